// SPDX-License-Identifier: Apache-2.0
#include "xllm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>

#include "xllm/checkpoint.hpp"
#include "xllm/error.hpp"

namespace xllm {
namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return item_rng(a, b)(); }


}  // namespace

// ---------------------------------------------------------------- model

namespace {
const ModelConfig& validated(const ModelConfig& c) {
  c.validate();
  return c;
}
}  // namespace

XllmModel::XllmModel(const ModelConfig& c, std::uint64_t seed)
    : XllmModel(validated(c), seed, std::mt19937_64(seed)) {}

XllmModel::XllmModel(const ModelConfig& c, std::uint64_t seed, std::mt19937_64&& rng)
    : cfg(c),
      image_encoder(c.image_encoder, rng),
      speech_encoder(c.speech_encoder, rng),
      cif(c.speech_encoder.d_model, c.cif, rng),
      asr(c.asr, rng),
      image_iface(c.qformer, c.decoder.d_llm, rng),
      video_iface(c.qformer, c.decoder.d_llm, rng),
      cformer(c.cformer, rng),
      s_adapter(c.cformer.d_model, c.decoder.d_llm, rng),
      decoder(c.decoder, rng),
      seed_(seed) {}

const std::vector<std::string>& XllmModel::group_names() {
  static const std::vector<std::string> names{
      group::kSpeechEncoder, group::kCifPredictor, group::kAsrDecoder, group::kImageEncoder,
      group::kImageQformer,  group::kIAdapter,     group::kVideoQformer, group::kVAdapter,
      group::kCformer,       group::kSAdapter,     group::kDecoder};
  return names;
}

ParamList XllmModel::group(const std::string& name) const {
  ParamList out;
  if (name == group::kSpeechEncoder) speech_encoder.collect(out, name);
  else if (name == group::kCifPredictor) cif.collect(out, name);
  else if (name == group::kAsrDecoder) asr.collect(out, name);
  else if (name == group::kImageEncoder) image_encoder.collect(out, name);
  else if (name == group::kImageQformer) image_iface.collect_qformer(out, name);
  else if (name == group::kIAdapter) image_iface.collect_adapter(out, name);
  else if (name == group::kVideoQformer) video_iface.collect_qformer(out, name);
  else if (name == group::kVAdapter) video_iface.collect_adapter(out, name);
  else if (name == group::kCformer) cformer.collect(out, name);
  else if (name == group::kSAdapter) s_adapter.collect(out, name);
  else if (name == group::kDecoder) decoder.collect(out, name);
  else throw ConfigError("unknown parameter group '" + name + "'");
  return out;
}

ParamList XllmModel::groups(const std::vector<std::string>& names) const {
  ParamList out;
  for (const auto& n : names) {
    auto g = group(n);
    out.insert(out.end(), g.begin(), g.end());
  }
  return out;
}

ParamList XllmModel::all_params() const { return groups(group_names()); }

GroupHashes XllmModel::hashes() const {
  GroupHashes h;
  for (const auto& n : group_names()) h[n] = params_hash(group(n));
  return h;
}

CifOutput XllmModel::speech_cif(const Tensor& features, std::optional<std::size_t> target) const {
  FeatureSequence fs = speech_encoder.encode(features);
  Tensor alphas = cif.predict(fs);
  return cif_compress(fs, alphas, target, cfg.cif);
}

QuasiLinguisticSequence XllmModel::speech_interface(const QuasiLinguisticSequence& cif_tokens) const {
  if (cif_tokens.length() == 0) return {Tensor{}, Modality::kSpeech};
  return s_adapter.adapt(cformer.contextualize(cif_tokens));
}

Tensor XllmModel::asr_loss(const Tensor& features, std::string_view transcript, const Tensor& visual) const {
  if (transcript.empty()) throw LengthError("transcript must not be empty");
  const std::vector<int> targets = tok::encode(transcript);
  CifOutput out = speech_cif(features, targets.size());
  if (out.tokens.length() != targets.size()) {
    throw InvariantViolation("scaled CIF produced " + std::to_string(out.tokens.length()) + " outputs for " +
                             std::to_string(targets.size()) + " targets");
  }
  Tensor ce = cross_entropy(asr.logits(out.tokens.embeddings, visual), targets);
  return add(ce, scale(out.quantity_loss, cfg.quantity_weight));
}

std::string XllmModel::recognize(const Tensor& features, const Tensor& visual) const {
  NoGrad guard;
  CifOutput out = speech_cif(features, std::nullopt);
  if (out.tokens.length() == 0) return {};
  Tensor logits = asr.logits(out.tokens.embeddings, visual);
  std::string text;
  const std::size_t V = logits.cols();
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.data().subspan(r * V, V);
    auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    // Reserved ids never appear in transcripts; render them as '?'.
    text += tok::is_reserved(best) ? '?' : static_cast<char>(best);
  }
  return text;
}

nlohmann::json model_config_json(const ModelConfig& cfg) { return cfg; }

namespace {

void save_model(const XllmModel& m, const std::filesystem::path& path) {
  save_checkpoint(path, model_config_json(m.cfg), m.all_params());
}

struct Snapshot {
  std::vector<std::vector<double>> values;
};

Snapshot snapshot(const ParamList& params) {
  Snapshot s;
  for (const auto& [n, t] : params) s.values.emplace_back(t.data().begin(), t.data().end());
  return s;
}

void restore(const ParamList& params, const Snapshot& s) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].second;
    std::copy(s.values[i].begin(), s.values[i].end(), t.mutable_data().begin());
  }
}

// Trainable groups are switched on for the duration of one training call.
class TrainableScope {
 public:
  explicit TrainableScope(ParamList params) : params_(std::move(params)) { set_requires_grad(params_, true); }
  ~TrainableScope() { set_requires_grad(params_, false); }
  const ParamList& params() const { return params_; }

 private:
  ParamList params_;
};

std::vector<std::size_t> probe_set(std::size_t n, std::size_t probe) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < std::min(n, probe); ++i) out.push_back(i);
  return out;
}

void audit_freeze(const GroupHashes& before, const GroupHashes& after, const std::vector<std::string>& trainable,
                  const std::string& stage) {
  const std::set<std::string> allowed(trainable.begin(), trainable.end());
  for (const auto& g : changed_groups(before, after)) {
    if (!allowed.contains(g)) throw InvariantViolation(stage + " modified frozen group '" + g + "'");
  }
}

nlohmann::json hashes_json(const GroupHashes& h) {
  nlohmann::json j;
  for (const auto& [k, v] : h) j[k] = v;
  return j;
}

void write_report(const std::filesystem::path& path, const nlohmann::json& j) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::vector<FeatureSequence> encode_images(const ImageEncoder& enc, const std::vector<ImageItem>& items) {
  NoGrad guard;
  std::vector<FeatureSequence> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(enc.encode(it.pixels));
  return out;
}

std::vector<FeatureSequence> encode_clip(const ImageEncoder& enc, const Tensor& clip, std::size_t frames) {
  NoGrad guard;
  std::vector<FeatureSequence> out;
  for (const auto& f : sample_video_frames(clip, frames)) {
    out.push_back(enc.encode(f));
    out.back().source = FeatureSource::kVideoFrame;
  }
  return out;
}

// Frozen-path CIF outputs scaled to the transcript length.
QuasiLinguisticSequence frozen_cif_tokens(const XllmModel& m, const SpeechItem& s) {
  NoGrad guard;
  return m.speech_cif(s.features, s.transcript.size()).tokens;
}

Tensor prompt_loss(const XllmModel& m, const PromptSegments& seg, const std::vector<int>& instruction,
                   const std::vector<int>& answer) {
  return decode_loss(m.decoder, assemble_prompt(m.decoder, seg, instruction), answer);
}

}  // namespace

std::vector<int> answer_ids(std::string_view answer) {
  if (answer.empty()) throw LengthError("answer must not be empty");
  auto ids = tok::encode(answer);
  ids.push_back(tok::kEos);
  return ids;
}

// ---------------------------------------------------------------- corpora

DataConfig effective_data(const XllmConfig& cfg) {
  DataConfig d = cfg.data;
  for (SpeechCorpusSpec* s : {&d.speech_train, &d.speech_test, &d.instruct_speech}) {
    s->seed = mix_seed(cfg.seed, s->seed);
    s->prototype_seed = mix_seed(cfg.seed, s->prototype_seed);
  }
  d.image_train.seed = mix_seed(cfg.seed, d.image_train.seed);
  d.image_source.seed = mix_seed(cfg.seed, d.image_source.seed);
  d.video_train.seed = mix_seed(cfg.seed, d.video_train.seed);
  d.instruct.seed = mix_seed(cfg.seed, d.instruct.seed);
  return d;
}

std::map<std::string, std::string> gen_corpora(const XllmConfig& cfg, const RunPaths& paths) {
  const DataConfig d = effective_data(cfg);
  const std::size_t reduction = SpeechEncoder::total_reduction(cfg.model.speech_encoder);
  std::map<std::string, std::string> sums;
  auto emit = [&](const std::string& name, const std::string& kind, nlohmann::json spec,
                  std::vector<CorpusRecord> records) {
    CorpusFile f{kind, std::move(spec), "", std::move(records)};
    f.checksum = corpus_checksum(f.records);
    save_corpus(paths.corpus(name), f);
    sums[name] = f.checksum;
  };
  auto speech = [&](const SpeechCorpusSpec& spec) {
    std::vector<CorpusRecord> r;
    for (const auto& it : SpeechCorpusGenerator(spec, reduction).generate()) r.push_back(to_record(it));
    return r;
  };
  emit("speech_train", "speech", d.speech_train, speech(d.speech_train));
  emit("speech_test", "speech", d.speech_test, speech(d.speech_test));
  for (const auto& [name, spec] : {std::pair{"image_train", d.image_train}, std::pair{"image_source", d.image_source}}) {
    std::vector<CorpusRecord> r;
    for (const auto& it : gen_image_corpus(spec)) r.push_back(to_record(it));
    emit(name, "image", spec, std::move(r));
  }
  {
    std::vector<CorpusRecord> r;
    for (const auto& it : gen_video_corpus(d.video_train)) r.push_back(to_record(it));
    emit("video_train", "video", d.video_train, std::move(r));
  }
  {
    SpeechCorpusGenerator sg(d.instruct_speech, reduction);
    std::vector<CorpusRecord> r;
    for (const auto& it : gen_instruction_corpus(d.instruct, d.image_train, d.video_train, sg)) {
      r.push_back(to_record(it));
    }
    emit("instruct", "instruction", d.instruct, std::move(r));
  }
  return sums;
}

Corpora load_corpora(const RunPaths& paths) {
  for (const auto& n : kCorpusNames) {
    if (!std::filesystem::exists(paths.corpus(n))) {
      throw OrderingError("corpus '" + n + "' is missing under " + paths.root.string() + "; run gen first");
    }
  }
  Corpora c;
  for (const auto& r : load_corpus(paths.corpus("speech_train")).records) c.speech_train.push_back(speech_from_record(r));
  for (const auto& r : load_corpus(paths.corpus("speech_test")).records) c.speech_test.push_back(speech_from_record(r));
  for (const auto& r : load_corpus(paths.corpus("image_train")).records) c.image_train.push_back(image_from_record(r));
  for (const auto& r : load_corpus(paths.corpus("image_source")).records) c.image_source.push_back(image_from_record(r));
  for (const auto& r : load_corpus(paths.corpus("video_train")).records) c.video_train.push_back(video_from_record(r));
  for (const auto& r : load_corpus(paths.corpus("instruct")).records) c.instruct.push_back(instruction_from_record(r));
  return c;
}

// ---------------------------------------------------------------- text tasks

TextExample text_example(const XllmConfig& cfg, std::size_t index) {
  const DataConfig d = effective_data(cfg);
  SpeechCorpusGenerator speech(d.speech_train, SpeechEncoder::total_reduction(cfg.model.speech_encoder));
  auto rng = item_rng(mix_seed(cfg.seed, 0x7e47), index);
  // Copying a transcript is the slowest skill to form, so speech text gets
  // half of the pretraining draws.
  std::discrete_distribution<int> pick({1.0, 1.0, 3.0, 1.0});
  const auto family = static_cast<Family>(pick(rng));
  const auto& choices = family_instructions(family);
  TextExample ex;
  ex.instruction = choices[std::uniform_int_distribution<std::size_t>(0, choices.size() - 1)(rng)];
  switch (family) {
    case Family::kImage: {
      const auto p = random_image_params(rng);
      ex.image = image_payload_text(p);
      ex.answer = image_caption(p);
      break;
    }
    case Family::kVideo: {
      const auto p = random_video_params(d.video_train, rng);
      ex.video = video_payload_text(p);
      ex.answer = video_caption(p);
      break;
    }
    case Family::kSpeech:
      ex.speech = speech.sample_transcript(rng);
      ex.answer = *ex.speech;
      break;
    case Family::kDialogue: {
      const auto p = random_image_params(rng);
      const std::size_t q = std::uniform_int_distribution<std::size_t>(0, 2)(rng);
      ex.image = image_payload_text(p);
      ex.speech = std::string(kSpokenQuestions[q]);
      ex.answer = std::string(q == 0 ? kColors[p.color] : q == 1 ? kShapes[p.shape] : kPositions[p.pos]);
      break;
    }
  }
  return ex;
}

EmbeddedPrompt embed_text_prompt(const ToyDecoder& decoder, const TextExample& ex) {
  std::vector<int> ids;
  auto block = [&](const std::optional<std::string>& payload, int open, int close) {
    if (!payload) return;
    ids.push_back(open);
    for (int id : tok::encode(*payload)) ids.push_back(id);
    ids.push_back(close);
  };
  block(ex.image, tok::kImageOpen, tok::kImageClose);
  block(ex.video, tok::kVideoOpen, tok::kVideoClose);
  block(ex.speech, tok::kSpeechOpen, tok::kSpeechClose);
  for (int id : tok::encode(kQuestionCue)) ids.push_back(id);
  for (int id : tok::encode(ex.instruction)) ids.push_back(id);
  for (int id : tok::encode(kAnswerCue)) ids.push_back(id);
  EmbeddedPrompt p;
  p.embeddings = decoder.embed(ids);
  p.rendered = tok::decode(ids);
  p.token_ids = std::move(ids);
  return p;
}

// ---------------------------------------------------------------- loading

std::optional<std::string> latest_checkpoint(const RunPaths& paths) {
  for (const char* s : {"stage3", "stage2", "stage1", "backbone"}) {
    if (std::filesystem::exists(paths.checkpoint(s))) return std::string(s);
  }
  return std::nullopt;
}

std::unique_ptr<XllmModel> load_model(const XllmConfig& cfg, const RunPaths& paths, const std::string& stage) {
  const auto path = paths.checkpoint(stage);
  if (!std::filesystem::exists(path)) throw OrderingError("checkpoint '" + stage + "' does not exist yet");
  auto model = std::make_unique<XllmModel>(cfg.model, cfg.seed);
  load_checkpoint_into(path, model_config_json(cfg.model), model->all_params());
  return model;
}

// ---------------------------------------------------------------- backbone

namespace {

struct ImageTask {
  const XllmModel& m;
  const VisualInterface& iface;
  const std::vector<FeatureSequence>& features;
  const std::vector<ImageItem>& items;
  std::vector<int> instruction = tok::encode(kImageInstruction);

  Tensor operator()(std::size_t i) const {
    PromptSegments seg;
    seg.image = iface.from_features(features[i], Modality::kImage);
    return prompt_loss(m, seg, instruction, answer_ids(items[i].caption));
  }
};

}  // namespace

nlohmann::json run_backbone(const XllmConfig& cfg, const RunPaths& paths, const Logger& log) {
  cfg.require_runnable();
  Stopwatch clock;
  const Corpora corpora = load_corpora(paths);
  XllmModel model(cfg.model, cfg.seed);
  std::mt19937_64 rng(mix_seed(cfg.seed, 100));
  nlohmann::json report;
  MetricsLog metrics(paths.metrics("backbone"));

  // Decoder pretraining on text renderings of every task family.
  std::vector<TextExample> texts;
  for (std::size_t i = 0; i < cfg.data.text_items; ++i) texts.push_back(text_example(cfg, i));
  auto text_loss = [&](std::size_t i) {
    return decode_loss(model.decoder, embed_text_prompt(model.decoder, texts[i]), answer_ids(texts[i].answer));
  };
  const auto text_probe = probe_set(texts.size(), cfg.data.probe_items);
  {
    StagePlan plan{0, "decoder_pretrain", {group::kDecoder}, {{"answer_ce", 1.0}}, {{"text", 1.0}},
                   cfg.train.decoder_pretrain};
    TrainableScope scope(model.groups(plan.trainable));
    const double before = mean_loss(text_probe, text_loss);
    run_loop(plan, scope.params(), cfg.train.optimizer, texts.size(), text_loss, rng, &metrics);
    const double after = mean_loss(text_probe, text_loss);
    report["decoder_pretrain"] = {{"initial_loss", before}, {"final_loss", after}};
    log("backbone: decoder pretraining loss " + std::to_string(before) + " -> " + std::to_string(after));
  }

  // Source query transformer, the warm-start origin for the image interface.
  {
    const auto feats = encode_images(model.image_encoder, corpora.image_source);
    ImageTask task{model, model.image_iface, feats, corpora.image_source};
    StagePlan plan{0, "source_qformer", {group::kImageQformer, group::kIAdapter}, {{"answer_ce", 1.0}},
                   {{"image_source", 1.0}}, cfg.train.source_qformer};
    const ParamList params = model.groups(plan.trainable);
    const Snapshot initial = snapshot(params);
    TrainableScope scope(params);
    const auto probe = probe_set(feats.size(), cfg.data.probe_items);
    const double before = mean_loss(probe, task);
    run_loop(plan, scope.params(), cfg.train.optimizer, feats.size(), task, rng, &metrics);
    const double after = mean_loss(probe, task);
    save_qformer_checkpoint(paths.qformer_source(), model.image_iface);
    // The run's own image interface starts from scratch; only the saved
    // source carries the learned weights.
    restore(params, initial);
    report["source_qformer"] = {{"initial_loss", before}, {"final_loss", after}};
    log("backbone: source query transformer loss " + std::to_string(before) + " -> " + std::to_string(after));
  }

  save_model(model, paths.checkpoint("backbone"));
  report["hashes"] = hashes_json(model.hashes());
  report["seconds"] = clock.seconds();
  write_report(paths.report("backbone"), report);
  return report;
}

// ---------------------------------------------------------------- stage 1

AsrEval evaluate_asr(const XllmModel& model, const std::vector<SpeechItem>& items) {
  AsrEval ev;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::string hyp = model.recognize(items[i].features);
    ev.pairs.push_back({std::to_string(i), items[i].transcript, hyp});
    ev.reports.push_back(cer(items[i].transcript, hyp));
  }
  ev.pooled = pool(ev.reports);
  return ev;
}

nlohmann::json run_stage1(const XllmConfig& cfg, const RunPaths& paths, const Logger& log) {
  cfg.require_runnable();
  Stopwatch clock;
  const Corpora corpora = load_corpora(paths);
  auto model = load_model(cfg, paths, "backbone");
  const GroupHashes before = model->hashes();
  std::mt19937_64 rng(mix_seed(cfg.seed, 1));
  MetricsLog metrics(paths.metrics("stage1"));

  StagePlan plan{1,
                 "asr",
                 {group::kSpeechEncoder, group::kCifPredictor, group::kAsrDecoder},
                 {{"ce", 1.0}, {"quantity", cfg.model.quantity_weight}},
                 {{"speech_train", 1.0}},
                 cfg.train.stage1};
  const auto& items = corpora.speech_train;
  auto loss = [&](std::size_t i) { return model->asr_loss(items[i].features, items[i].transcript); };
  const auto probe = probe_set(items.size(), cfg.data.probe_items);
  double initial = 0.0, final_loss = 0.0;
  {
    TrainableScope scope(model->groups(plan.trainable));
    initial = mean_loss(probe, loss);
    run_loop(plan, scope.params(), cfg.train.optimizer, items.size(), loss, rng, &metrics);
    final_loss = mean_loss(probe, loss);
  }
  const GroupHashes after = model->hashes();
  audit_freeze(before, after, plan.trainable, "stage 1");

  const AsrEval ev = evaluate_asr(*model, corpora.speech_test);
  write_cer_report(paths.root / "reports" / "stage1_cer", ev.pairs, ev.reports);
  save_model(*model, paths.checkpoint("stage1"));

  nlohmann::json report{{"stage", 1},
                        {"initial_loss", initial},
                        {"final_loss", final_loss},
                        {"heldout", cer_json(ev.pooled)},
                        {"changed_groups", changed_groups(before, after)},
                        {"hashes_before", hashes_json(before)},
                        {"hashes_after", hashes_json(after)},
                        {"seconds", clock.seconds()}};
  write_report(paths.report("stage1"), report);
  log("stage 1: loss " + std::to_string(initial) + " -> " + std::to_string(final_loss) + ", held-out CER " +
      std::to_string(ev.pooled.cer));
  return report;
}

// ---------------------------------------------------------------- stage 2

nlohmann::json run_stage2(const XllmConfig& cfg, const RunPaths& paths, const Logger& log) {
  cfg.require_runnable();
  Stopwatch clock;
  const Corpora corpora = load_corpora(paths);
  auto model = load_model(cfg, paths, "stage1");
  XllmModel& m = *model;
  const GroupHashes before = m.hashes();
  std::mt19937_64 rng(mix_seed(cfg.seed, 2));
  MetricsLog metrics(paths.metrics("stage2"));
  nlohmann::json tasks;
  std::vector<std::string> trained;

  auto train_task = [&](const std::string& name, std::vector<std::string> trainable, const StageBudget& budget,
                        std::size_t n, const ItemLoss& loss) {
    StagePlan plan{2, name, trainable, {{"answer_ce", 1.0}}, {{name, 1.0}}, budget};
    TrainableScope scope(m.groups(trainable));
    const auto probe = probe_set(n, cfg.data.probe_items);
    const double initial = mean_loss(probe, loss);
    run_loop(plan, scope.params(), cfg.train.optimizer, n, loss, rng, &metrics);
    const double final_loss = mean_loss(probe, loss);
    tasks[name] = {{"initial_loss", initial},
                   {"final_loss", final_loss},
                   {"reduction", 1.0 - final_loss / initial}};
    trained.insert(trained.end(), trainable.begin(), trainable.end());
    log("stage 2 " + name + ": loss " + std::to_string(initial) + " -> " + std::to_string(final_loss));
  };

  // Image interface, warm-started from the source query transformer.
  if (!std::filesystem::exists(paths.qformer_source())) {
    throw OrderingError("warm-start source " + paths.qformer_source().string() + " is missing");
  }
  init_image_from_checkpoint(paths.qformer_source(), m.image_iface);
  {
    const auto feats = encode_images(m.image_encoder, corpora.image_train);
    ImageTask task{m, m.image_iface, feats, corpora.image_train};
    train_task("image", {group::kImageQformer, group::kIAdapter}, cfg.train.stage2_image, feats.size(), task);
  }

  // Video interface reuses the trained image interface.
  init_video_from_image(m.image_iface, m.video_iface);
  {
    std::vector<std::vector<FeatureSequence>> feats;
    for (const auto& v : corpora.video_train) feats.push_back(encode_clip(m.image_encoder, v.clip, cfg.model.video_frames));
    const auto instruction = tok::encode(kVideoInstruction);
    auto loss = [&](std::size_t i) {
      PromptSegments seg;
      seg.video = video_interface_features(m.video_iface, feats[i]);
      return prompt_loss(m, seg, instruction, answer_ids(corpora.video_train[i].caption));
    };
    train_task("video", {group::kVideoQformer, group::kVAdapter}, cfg.train.stage2_video, feats.size(), loss);
  }

  // Speech interface over frozen stage-1 CIF outputs.
  {
    std::vector<QuasiLinguisticSequence> cif;
    for (const auto& s : corpora.speech_train) cif.push_back(frozen_cif_tokens(m, s));
    const auto instruction = tok::encode(kSpeechInstruction);
    auto loss = [&](std::size_t i) {
      PromptSegments seg;
      seg.speech = m.speech_interface(cif[i]);
      return prompt_loss(m, seg, instruction, answer_ids(corpora.speech_train[i].transcript));
    };
    train_task("speech", {group::kCformer, group::kSAdapter}, cfg.train.stage2_speech, cif.size(), loss);
  }

  const GroupHashes after = m.hashes();
  audit_freeze(before, after, trained, "stage 2");
  save_model(m, paths.checkpoint("stage2"));
  nlohmann::json report{{"stage", 2},
                        {"tasks", tasks},
                        {"changed_groups", changed_groups(before, after)},
                        {"hashes_before", hashes_json(before)},
                        {"hashes_after", hashes_json(after)},
                        {"seconds", clock.seconds()}};
  write_report(paths.report("stage2"), report);
  return report;
}

// ---------------------------------------------------------------- stage 3

namespace {

struct CachedInstruction {
  std::optional<FeatureSequence> image;
  std::vector<FeatureSequence> video;
  std::optional<QuasiLinguisticSequence> speech;
  std::vector<int> instruction, answer;
};

CachedInstruction cache_instruction(const XllmModel& m, const InstructionItem& item) {
  NoGrad guard;
  CachedInstruction c;
  if (item.image) c.image = m.image_encoder.encode(item.image->pixels);
  if (item.video) c.video = encode_clip(m.image_encoder, item.video->clip, m.cfg.video_frames);
  if (item.speech) c.speech = frozen_cif_tokens(m, *item.speech);
  c.instruction = tok::encode(item.instruction);
  c.answer = answer_ids(item.answer);
  return c;
}

PromptSegments cached_segments(const XllmModel& m, const CachedInstruction& c) {
  PromptSegments seg;
  if (c.image) seg.image = m.image_iface.from_features(*c.image, Modality::kImage);
  if (!c.video.empty()) seg.video = video_interface_features(m.video_iface, c.video);
  if (c.speech) seg.speech = m.speech_interface(*c.speech);
  return seg;
}

}  // namespace

EmbeddedPrompt instruction_prompt(const XllmModel& model, const InstructionItem& item) {
  const CachedInstruction c = cache_instruction(model, item);
  return assemble_prompt(model.decoder, cached_segments(model, c), c.instruction);
}

nlohmann::json run_stage3(const XllmConfig& cfg, const RunPaths& paths, const Logger& log) {
  cfg.require_runnable();
  Stopwatch clock;
  const Corpora corpora = load_corpora(paths);
  auto model = load_model(cfg, paths, "stage2");
  XllmModel& m = *model;
  const GroupHashes before = m.hashes();
  std::mt19937_64 rng(mix_seed(cfg.seed, 3));
  MetricsLog metrics(paths.metrics("stage3"));

  std::vector<CachedInstruction> cached;
  std::map<std::string, std::size_t> family_counts;
  for (const auto& item : corpora.instruct) {
    cached.push_back(cache_instruction(m, item));
    ++family_counts[std::string(family_name(item.family))];
  }
  auto loss = [&](std::size_t i) {
    const auto& c = cached[i];
    return decode_loss(m.decoder, assemble_prompt(m.decoder, cached_segments(m, c), c.instruction), c.answer);
  };
  StagePlan plan{3,
                 "instruction",
                 {group::kIAdapter, group::kVAdapter, group::kSAdapter},
                 {{"answer_ce", 1.0}},
                 {{"image", cfg.data.instruct.family_weights[0]},
                  {"video", cfg.data.instruct.family_weights[1]},
                  {"speech", cfg.data.instruct.family_weights[2]},
                  {"dialogue", cfg.data.instruct.family_weights[3]}},
                 cfg.train.stage3};
  const auto probe = probe_set(cached.size(), cfg.data.probe_items);
  double initial = 0.0, final_loss = 0.0;
  LoopResult result;
  {
    TrainableScope scope(m.groups(plan.trainable));
    initial = mean_loss(probe, loss);
    result = run_loop(plan, scope.params(), cfg.train.optimizer, cached.size(), loss, rng, &metrics);
    final_loss = mean_loss(probe, loss);
  }
  const GroupHashes after = m.hashes();
  audit_freeze(before, after, plan.trainable, "stage 3");
  save_model(m, paths.checkpoint("stage3"));

  nlohmann::json report{{"stage", 3},
                        {"initial_loss", initial},
                        {"final_loss", final_loss},
                        {"finite", std::isfinite(final_loss)},
                        {"optimizer_steps", result.optimizer_steps},
                        {"family_counts", family_counts},
                        {"changed_groups", changed_groups(before, after)},
                        {"hashes_before", hashes_json(before)},
                        {"hashes_after", hashes_json(after)},
                        {"seconds", clock.seconds()}};
  write_report(paths.report("stage3"), report);
  log("stage 3: loss " + std::to_string(initial) + " -> " + std::to_string(final_loss));
  return report;
}

// ---------------------------------------------------------------- dispatch

nlohmann::json run_stage(int stage, const XllmConfig& cfg, const RunPaths& paths, const Logger& log) {
  cfg.require_runnable();
  switch (stage) {
    case 1: {
      save_config_file(paths.config(), config_to_json(cfg));
      bool missing = false;
      for (const auto& n : kCorpusNames) missing |= !std::filesystem::exists(paths.corpus(n));
      if (missing) {
        log("generating corpora");
        gen_corpora(cfg, paths);
      }
      if (!std::filesystem::exists(paths.checkpoint("backbone")) ||
          !std::filesystem::exists(paths.qformer_source())) {
        log("preparing frozen backbones");
        run_backbone(cfg, paths, log);
      }
      return run_stage1(cfg, paths, log);
    }
    case 2:
      if (!std::filesystem::exists(paths.checkpoint("stage1"))) {
        throw OrderingError("stage 2 needs the stage-1 speech artifacts; run train --stage 1 first");
      }
      return run_stage2(cfg, paths, log);
    case 3:
      if (!std::filesystem::exists(paths.checkpoint("stage2"))) {
        throw OrderingError("stage 3 needs the stage-2 interfaces; run train --stage 2 first");
      }
      return run_stage3(cfg, paths, log);
    default:
      throw ConfigError("unknown stage " + std::to_string(stage));
  }
}

// ---------------------------------------------------------------- warm start

WarmStartResult warm_start_trial(const XllmConfig& cfg, const RunPaths& paths, std::uint64_t seed, bool warm) {
  cfg.require_runnable();
  const Corpora corpora = load_corpora(paths);
  auto model = load_model(cfg, paths, "backbone");
  XllmModel& m = *model;
  // Fresh query transformer and adapter for this seed; the warm arm then
  // overwrites the query transformer from the source checkpoint.
  std::mt19937_64 init_rng(mix_seed(seed, 0x1a17));
  VisualInterface fresh(cfg.model.qformer, cfg.model.decoder.d_llm, init_rng);
  {
    ParamList src, dst;
    fresh.collect_qformer(src, group::kImageQformer);
    fresh.collect_adapter(src, group::kIAdapter);
    dst = m.groups({group::kImageQformer, group::kIAdapter});
    copy_params(src, dst);
  }
  if (warm) init_image_from_checkpoint(paths.qformer_source(), m.image_iface);

  const auto feats = encode_images(m.image_encoder, corpora.image_train);
  ImageTask task{m, m.image_iface, feats, corpora.image_train};
  StagePlan plan{2, warm ? "warm_image" : "cold_image", {group::kImageQformer, group::kIAdapter},
                 {{"answer_ce", 1.0}}, {{"image_train", 1.0}}, cfg.train.warm_start_trial};
  std::mt19937_64 rng(mix_seed(seed, 0x5eed));
  TrainableScope scope(m.groups(plan.trainable));
  const auto probe = probe_set(feats.size(), cfg.data.probe_items);
  WarmStartResult r;
  r.initial_loss = mean_loss(probe, task);
  run_loop(plan, scope.params(), cfg.train.optimizer, feats.size(), task, rng);
  r.final_loss = mean_loss(probe, task);
  return r;
}

}  // namespace xllm
