// SPDX-License-Identifier: Apache-2.0
#include "xllm/datagen.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "xllm/checkpoint.hpp"
#include "xllm/error.hpp"

namespace xllm {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace

std::mt19937_64 item_rng(std::uint64_t seed, std::uint64_t index) {
  return std::mt19937_64(splitmix64(splitmix64(seed) ^ (index * 0xd1b54a32d192ed03ULL)));
}

// ---------------------------------------------------------------- speech

SpeechCorpusGenerator::SpeechCorpusGenerator(const SpeechCorpusSpec& spec, std::size_t total_reduction)
    : spec_(spec) {
  require<ConfigError>(spec.alphabet_size >= 2 && spec.alphabet_size <= 26, "speech alphabet must have 2..26 letters");
  require<ConfigError>(spec.feature_dim > 0, "speech feature width must be positive");
  require<ConfigError>(spec.min_tokens >= 1 && spec.min_tokens <= spec.max_tokens, "bad transcript length range");
  require<ConfigError>(spec.k_min <= spec.k_max, "bad expansion range");
  require<ConfigError>(spec.noise_sigma >= 0.0, "noise must be non-negative");
  if (spec.k_min < total_reduction) {
    throw ConfigError("expansion factor " + std::to_string(spec.k_min) + " is below the encoder reduction " +
                      std::to_string(total_reduction) + "; tokens could vanish after encoding");
  }
  std::mt19937_64 rng(spec.prototype_seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  prototypes_ = Tensor({spec.alphabet_size, spec.feature_dim});
  for (auto& v : prototypes_.mutable_data()) v = nd(rng);
}

std::string SpeechCorpusGenerator::sample_transcript(std::mt19937_64& rng) const {
  const std::size_t n = uniform(rng, spec_.min_tokens, spec_.max_tokens);
  std::string out;
  std::size_t prev = spec_.alphabet_size;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = uniform(rng, 0, spec_.alphabet_size - (i == 0 ? 1 : 2));
    if (i > 0 && c >= prev) ++c;  // skip the previous letter
    out += static_cast<char>('a' + c);
    prev = c;
  }
  return out;
}

SpeechItem SpeechCorpusGenerator::render_with(std::mt19937_64& rng, std::string_view transcript) const {
  if (transcript.empty()) throw DataError("transcript must not be empty");
  const std::size_t d = spec_.feature_dim;
  std::normal_distribution<double> noise(0.0, 1.0);
  SpeechItem item;
  item.transcript = std::string(transcript);
  std::vector<double> values;
  for (char ch : transcript) {
    const int c = ch - 'a';
    if (c < 0 || static_cast<std::size_t>(c) >= spec_.alphabet_size) {
      throw DataError(std::string("letter '") + ch + "' is outside the speech alphabet");
    }
    const std::size_t k = uniform(rng, spec_.k_min, spec_.k_max);
    item.expansions.push_back(k);
    auto proto = prototypes_.data().subspan(static_cast<std::size_t>(c) * d, d);
    for (std::size_t f = 0; f < k; ++f) {
      for (std::size_t j = 0; j < d; ++j) values.push_back(proto[j] + spec_.noise_sigma * noise(rng));
    }
  }
  const std::size_t U = values.size() / d;
  item.features = Tensor({U, d}, std::move(values));
  return item;
}

SpeechItem SpeechCorpusGenerator::item(std::size_t index) const {
  auto rng = item_rng(spec_.seed, index);
  const std::string transcript = sample_transcript(rng);
  return render_with(rng, transcript);
}

SpeechItem SpeechCorpusGenerator::render(std::string_view transcript, std::size_t index) const {
  auto rng = item_rng(spec_.seed ^ 0x5bd1e995ULL, index);
  return render_with(rng, transcript);
}

std::vector<SpeechItem> SpeechCorpusGenerator::generate() const {
  std::vector<SpeechItem> out;
  out.reserve(spec_.n_items);
  for (std::size_t i = 0; i < spec_.n_items; ++i) out.push_back(item(i));
  return out;
}

// ---------------------------------------------------------------- shapes

namespace {

constexpr double kColorRgb[4][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}};

bool shape_mask(int shape, std::size_t n, std::size_t y, std::size_t x) {
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  const double dy = std::abs(static_cast<double>(y) - c), dx = std::abs(static_cast<double>(x) - c);
  const double half = static_cast<double>(n) / 2.0;
  switch (shape) {
    case 0: return true;
    case 1: return dy * dy + dx * dx <= half * half;
    case 2: return dy <= static_cast<double>(n) / 6.0 || dx <= static_cast<double>(n) / 6.0;
    default: return dy + dx <= half;
  }
}

// Paints one shape of edge n at (y0, x0) into an [S x S x 3] buffer.
void paint(std::span<double> px, std::size_t S, int color, int shape, std::size_t n, std::size_t y0,
           std::size_t x0) {
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      if (!shape_mask(shape, n, y, x)) continue;
      double* p = px.data() + ((y0 + y) * S + (x0 + x)) * 3;
      for (int ch = 0; ch < 3; ++ch) p[ch] = kColorRgb[color][ch];
    }
  }
}

void check_params(int color, int shape) {
  require<DataError>(color >= 0 && color < 4, "color index out of range");
  require<DataError>(shape >= 0 && shape < 4, "shape index out of range");
}

}  // namespace

std::string image_caption(const ImageParams& p) {
  check_params(p.color, p.shape);
  return "a " + std::string(kColors[p.color]) + " " + std::string(kShapes[p.shape]) + " at the " +
         std::string(kPositions[p.pos]);
}

std::string image_payload_text(const ImageParams& p) {
  check_params(p.color, p.shape);
  return std::string(kColors[p.color]) + " " + std::string(kShapes[p.shape]) + " " + std::string(kPositions[p.pos]);
}

Tensor render_image(const ImageParams& p, std::size_t S) {
  check_params(p.color, p.shape);
  require<DataError>(p.pos >= 0 && p.pos < 9, "position index out of range");
  require<ConfigError>(S >= 9 && S % 3 == 0, "image size must be a multiple of 3, at least 9");
  const std::size_t cell = S / 3;
  Tensor img({S, S, 3});
  paint(img.mutable_data(), S, p.color, p.shape, cell - 2, (p.pos / 3) * cell + 1, (p.pos % 3) * cell + 1);
  return img;
}

ImageParams random_image_params(std::mt19937_64& rng) {
  ImageParams p;
  p.color = static_cast<int>(uniform(rng, 0, 3));
  p.shape = static_cast<int>(uniform(rng, 0, 3));
  p.pos = static_cast<int>(uniform(rng, 0, 8));
  return p;
}

ImageItem make_image_item(const ImageParams& p, std::size_t image_size) {
  return {p, image_caption(p), render_image(p, image_size)};
}

ImageItem image_item(const ImageCorpusSpec& spec, std::size_t index) {
  auto rng = item_rng(spec.seed, index);
  return make_image_item(random_image_params(rng), spec.image_size);
}

std::vector<ImageItem> gen_image_corpus(const ImageCorpusSpec& spec) {
  std::vector<ImageItem> out;
  out.reserve(spec.n_items);
  for (std::size_t i = 0; i < spec.n_items; ++i) out.push_back(image_item(spec, i));
  return out;
}

// ---------------------------------------------------------------- video

std::string_view motion_name(Motion m) {
  switch (m) {
    case Motion::kLeft: return "left";
    case Motion::kRight: return "right";
    case Motion::kUp: return "up";
    case Motion::kDown: return "down";
    default: return "static";
  }
}

namespace {
Motion motion_from_name(std::string_view s) {
  for (Motion m : {Motion::kLeft, Motion::kRight, Motion::kUp, Motion::kDown, Motion::kStatic}) {
    if (motion_name(m) == s) return m;
  }
  throw DataError("unknown motion '" + std::string(s) + "'");
}
}  // namespace

Motion mirror(Motion m) {
  switch (m) {
    case Motion::kLeft: return Motion::kRight;
    case Motion::kRight: return Motion::kLeft;
    case Motion::kUp: return Motion::kDown;
    case Motion::kDown: return Motion::kUp;
    default: return Motion::kStatic;
  }
}

std::string video_caption(const VideoParams& p) {
  check_params(p.color, p.shape);
  std::string s = "a " + std::string(kColors[p.color]) + " " + std::string(kShapes[p.shape]);
  if (p.motion == Motion::kStatic) return s + " stays static";
  return s + " moves " + std::string(motion_name(p.motion));
}

std::string video_payload_text(const VideoParams& p) {
  check_params(p.color, p.shape);
  return std::string(kColors[p.color]) + " " + std::string(kShapes[p.shape]) + " " +
         std::string(motion_name(p.motion));
}

namespace {
void validate_video(const VideoCorpusSpec& spec) {
  require<ConfigError>(spec.frames >= 1, "clips need at least one frame");
  require<ConfigError>(spec.shape_size >= 2 && spec.shape_size <= spec.image_size, "bad shape size");
  require<ConfigError>(spec.shape_size + spec.step * (spec.frames - 1) <= spec.image_size,
                       "motion does not fit inside the frame");
}

std::pair<int, int> velocity(Motion m) {
  switch (m) {
    case Motion::kLeft: return {-1, 0};
    case Motion::kRight: return {1, 0};
    case Motion::kUp: return {0, -1};
    case Motion::kDown: return {0, 1};
    default: return {0, 0};
  }
}
}  // namespace

Tensor render_clip(const VideoParams& p, const VideoCorpusSpec& spec) {
  validate_video(spec);
  check_params(p.color, p.shape);
  const std::size_t S = spec.image_size, F = spec.frames, frame = S * S * 3;
  const auto [vx, vy] = velocity(p.motion);
  Tensor clip({F, S, S, 3});
  auto px = clip.mutable_data();
  for (std::size_t f = 0; f < F; ++f) {
    const long x = p.x0 + vx * static_cast<long>(spec.step * f);
    const long y = p.y0 + vy * static_cast<long>(spec.step * f);
    const long limit = static_cast<long>(S - spec.shape_size);
    require<DataError>(x >= 0 && y >= 0 && x <= limit && y <= limit, "shape leaves the frame");
    paint(px.subspan(f * frame, frame), S, p.color, p.shape, spec.shape_size, static_cast<std::size_t>(y),
          static_cast<std::size_t>(x));
  }
  return clip;
}

VideoParams random_video_params(const VideoCorpusSpec& spec, std::mt19937_64& rng) {
  validate_video(spec);
  VideoParams p;
  p.color = static_cast<int>(uniform(rng, 0, 3));
  p.shape = static_cast<int>(uniform(rng, 0, 3));
  p.motion = static_cast<Motion>(uniform(rng, 0, 4));
  const std::size_t limit = spec.image_size - spec.shape_size;
  const std::size_t travel = spec.step * (spec.frames - 1);
  const auto [vx, vy] = velocity(p.motion);
  auto start = [&](int v) -> int {
    if (v > 0) return static_cast<int>(uniform(rng, 0, limit - travel));
    if (v < 0) return static_cast<int>(uniform(rng, travel, limit));
    return static_cast<int>(uniform(rng, 0, limit));
  };
  p.x0 = start(vx);
  p.y0 = start(vy);
  return p;
}

VideoItem make_video_item(const VideoParams& p, const VideoCorpusSpec& spec) {
  return {p, video_caption(p), render_clip(p, spec)};
}

VideoItem video_item(const VideoCorpusSpec& spec, std::size_t index) {
  auto rng = item_rng(spec.seed, index);
  return make_video_item(random_video_params(spec, rng), spec);
}

std::vector<VideoItem> gen_video_corpus(const VideoCorpusSpec& spec) {
  std::vector<VideoItem> out;
  out.reserve(spec.n_items);
  for (std::size_t i = 0; i < spec.n_items; ++i) out.push_back(video_item(spec, i));
  return out;
}

namespace {
// Pixel-mass centroid (y, x); false for an empty frame.
bool centroid(const Tensor& frame, double& cy, double& cx) {
  const std::size_t H = frame.dim(0), W = frame.dim(1), C = frame.dim(2);
  auto px = frame.data();
  double m = 0, sy = 0, sx = 0;
  for (std::size_t y = 0; y < H; ++y) {
    for (std::size_t x = 0; x < W; ++x) {
      double v = 0;
      for (std::size_t c = 0; c < C; ++c) v += px[(y * W + x) * C + c];
      m += v;
      sy += v * static_cast<double>(y);
      sx += v * static_cast<double>(x);
    }
  }
  if (m <= 0) return false;
  cy = sy / m;
  cx = sx / m;
  return true;
}
}  // namespace

Motion infer_motion(std::span<const Tensor> frames) {
  if (frames.size() < 2) return Motion::kStatic;
  double y0, x0, y1, x1;
  if (!centroid(frames.front(), y0, x0) || !centroid(frames.back(), y1, x1)) return Motion::kStatic;
  const double dy = y1 - y0, dx = x1 - x0;
  if (std::max(std::abs(dx), std::abs(dy)) < 0.5) return Motion::kStatic;
  if (std::abs(dx) >= std::abs(dy)) return dx > 0 ? Motion::kRight : Motion::kLeft;
  return dy > 0 ? Motion::kDown : Motion::kUp;
}

Motion infer_motion(const Tensor& clip) {
  if (clip.rank() != 4) throw ShapeError("clip must be [F x H x W x C]");
  const Shape fs{clip.dim(1), clip.dim(2), clip.dim(3)};
  const std::size_t n = shape_size(fs);
  std::vector<Tensor> frames;
  for (std::size_t f = 0; f < clip.dim(0); ++f) {
    auto src = clip.data().subspan(f * n, n);
    frames.emplace_back(fs, std::vector<double>(src.begin(), src.end()));
  }
  return infer_motion(frames);
}

// ---------------------------------------------------------------- instructions

std::string_view family_name(Family f) {
  switch (f) {
    case Family::kImage: return "image";
    case Family::kVideo: return "video";
    case Family::kSpeech: return "speech";
    default: return "dialogue";
  }
}

namespace {
Family family_from_name(std::string_view s) {
  for (Family f : {Family::kImage, Family::kVideo, Family::kSpeech, Family::kDialogue}) {
    if (family_name(f) == s) return f;
  }
  throw DataError("unknown instruction family '" + std::string(s) + "'");
}
}  // namespace

const std::vector<std::string>& family_instructions(Family f) {
  static const std::vector<std::string> image{std::string(kImageInstruction), "what is shown in this image",
                                              "tell me about the picture", "give a short description of the image",
                                              "what do you see here"};
  static const std::vector<std::string> video{std::string(kVideoInstruction), "what happens in this video",
                                              "describe the clip", "tell me what the video shows",
                                              "summarize the motion in the video"};
  static const std::vector<std::string> speech{std::string(kSpeechInstruction), "transcribe the audio",
                                               "write down what is said", "convert the speech to text",
                                               "what words are spoken"};
  static const std::vector<std::string> dialogue{std::string(kDialogueInstruction),
                                                 "listen to the question and look at the image",
                                                 "respond to the spoken question about the picture",
                                                 "use the image to answer the spoken question",
                                                 "what does the speaker ask about the image"};
  switch (f) {
    case Family::kImage: return image;
    case Family::kVideo: return video;
    case Family::kSpeech: return speech;
    default: return dialogue;
  }
}

InstructionItem instruction_item(const InstructionCorpusSpec& spec, const ImageCorpusSpec& image_spec,
                                 const VideoCorpusSpec& video_spec, const SpeechCorpusGenerator& speech,
                                 std::size_t index) {
  require<ConfigError>(spec.family_weights.size() == 4, "instruction mix needs four family weights");
  auto rng = item_rng(spec.seed, index);
  std::discrete_distribution<int> pick(spec.family_weights.begin(), spec.family_weights.end());
  InstructionItem item;
  item.family = static_cast<Family>(pick(rng));
  const auto& choices = family_instructions(item.family);
  item.instruction = choices[uniform(rng, 0, choices.size() - 1)];
  switch (item.family) {
    case Family::kImage:
      item.image = make_image_item(random_image_params(rng), image_spec.image_size);
      item.answer = item.image->caption;
      break;
    case Family::kVideo:
      item.video = make_video_item(random_video_params(video_spec, rng), video_spec);
      item.answer = item.video->caption;
      break;
    case Family::kSpeech:
      item.speech = speech.render(speech.sample_transcript(rng), index);
      item.answer = item.speech->transcript;
      break;
    case Family::kDialogue: {
      item.image = make_image_item(random_image_params(rng), image_spec.image_size);
      const std::size_t q = uniform(rng, 0, 2);
      item.speech = speech.render(kSpokenQuestions[q], index);
      const auto& p = item.image->params;
      item.answer = std::string(q == 0 ? kColors[p.color] : q == 1 ? kShapes[p.shape] : kPositions[p.pos]);
      break;
    }
  }
  return item;
}

std::vector<InstructionItem> gen_instruction_corpus(const InstructionCorpusSpec& spec,
                                                    const ImageCorpusSpec& image_spec,
                                                    const VideoCorpusSpec& video_spec,
                                                    const SpeechCorpusGenerator& speech) {
  std::vector<InstructionItem> out;
  out.reserve(spec.n_items);
  for (std::size_t i = 0; i < spec.n_items; ++i) out.push_back(instruction_item(spec, image_spec, video_spec, speech, i));
  return out;
}

// ---------------------------------------------------------------- container

namespace {

static_assert(std::endian::native == std::endian::little, "corpus I/O assumes a little-endian host");
constexpr std::array<char, 8> kCorpusMagic{'X', 'L', 'L', 'M', 'C', 'O', 'R', 'P'};
constexpr std::uint32_t kCorpusVersion = 1;

void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), sizeof v); }

std::string serialize_record(const CorpusRecord& r) {
  nlohmann::json meta = r.meta;
  meta["_dims"] = r.values.defined() ? r.values.shape() : Shape{0};
  const std::string m = meta.dump();
  std::string out;
  put_u64(out, m.size());
  out += m;
  const std::size_t n = r.values.defined() ? r.values.size() : 0;
  put_u64(out, n);
  if (n) out.append(reinterpret_cast<const char*>(r.values.data().data()), n * sizeof(double));
  return out;
}

std::string serialize_payload(const std::vector<CorpusRecord>& records, std::vector<std::uint64_t>& offsets) {
  std::string payload;
  offsets.clear();
  for (const auto& r : records) {
    offsets.push_back(payload.size());
    payload += serialize_record(r);
  }
  return payload;
}

class Reader {
 public:
  Reader(std::string_view buf, std::string where) : buf_(buf), where_(std::move(where)) {}
  std::uint64_t u64() {
    std::uint64_t v;
    std::memcpy(&v, take(sizeof v).data(), sizeof v);
    return v;
  }
  std::string_view take(std::size_t n) {
    if (n > buf_.size() - pos_) throw DataError("truncated corpus " + where_);
    auto s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::string_view buf_;
  std::string where_;
  std::size_t pos_ = 0;
};

nlohmann::json speech_meta(const SpeechItem& s) {
  return {{"transcript", s.transcript}, {"expansions", s.expansions}};
}
nlohmann::json image_meta(const ImageItem& i) {
  return {{"color", i.params.color}, {"shape", i.params.shape}, {"pos", i.params.pos}, {"caption", i.caption}};
}
nlohmann::json video_meta(const VideoItem& v) {
  return {{"color", v.params.color}, {"shape", v.params.shape}, {"motion", motion_name(v.params.motion)},
          {"x0", v.params.x0},       {"y0", v.params.y0},       {"caption", v.caption}};
}

}  // namespace

std::string corpus_checksum(const std::vector<CorpusRecord>& records) {
  std::vector<std::uint64_t> offsets;
  return sha256_hex(serialize_payload(records, offsets));
}

void save_corpus(const std::filesystem::path& path, const CorpusFile& corpus) {
  std::vector<std::uint64_t> offsets;
  const std::string payload = serialize_payload(corpus.records, offsets);
  nlohmann::json header{{"kind", corpus.kind},
                        {"spec", corpus.spec},
                        {"count", corpus.records.size()},
                        {"checksum", sha256_hex(payload)}};
  const std::string h = header.dump();
  std::string out(kCorpusMagic.data(), kCorpusMagic.size());
  out.append(reinterpret_cast<const char*>(&kCorpusVersion), sizeof kCorpusVersion);
  put_u64(out, h.size());
  out += h;
  for (auto o : offsets) put_u64(out, o);
  out += payload;

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + tmp.string());
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw DataError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CorpusFile load_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open corpus " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  Reader rd(buf, path.string());
  if (rd.take(kCorpusMagic.size()) != std::string_view(kCorpusMagic.data(), kCorpusMagic.size())) {
    throw DataError(path.string() + " is not a corpus file");
  }
  std::uint32_t version;
  std::memcpy(&version, rd.take(sizeof version).data(), sizeof version);
  if (version != kCorpusVersion) throw DataError("unsupported corpus version " + std::to_string(version));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(rd.take(rd.u64()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("corrupt corpus header in " + path.string() + ": " + e.what());
  }
  CorpusFile c;
  c.kind = header.at("kind").get<std::string>();
  c.spec = header.at("spec");
  c.checksum = header.at("checksum").get<std::string>();
  const auto count = header.at("count").get<std::size_t>();
  for (std::size_t i = 0; i < count; ++i) rd.u64();  // offsets; records are read sequentially
  for (std::size_t i = 0; i < count; ++i) {
    CorpusRecord r;
    r.meta = nlohmann::json::parse(rd.take(rd.u64()));
    const auto n = rd.u64();
    const auto raw = rd.take(n * sizeof(double));
    std::vector<double> values(n);
    if (n) std::memcpy(values.data(), raw.data(), raw.size());
    Shape shape = r.meta.at("_dims").get<Shape>();
    r.meta.erase("_dims");
    if (n) r.values = Tensor(std::move(shape), std::move(values));
    c.records.push_back(std::move(r));
  }
  if (corpus_checksum(c.records) != c.checksum) throw DataError("checksum mismatch in corpus " + path.string());
  return c;
}

CorpusRecord to_record(const SpeechItem& item) { return {speech_meta(item), item.features}; }
CorpusRecord to_record(const ImageItem& item) { return {image_meta(item), item.pixels}; }
CorpusRecord to_record(const VideoItem& item) { return {video_meta(item), item.clip}; }

SpeechItem speech_from_record(const CorpusRecord& r) {
  SpeechItem s;
  s.transcript = r.meta.at("transcript").get<std::string>();
  s.expansions = r.meta.at("expansions").get<std::vector<std::size_t>>();
  s.features = r.values;
  return s;
}

ImageItem image_from_record(const CorpusRecord& r) {
  ImageItem i;
  i.params = {r.meta.at("color").get<int>(), r.meta.at("shape").get<int>(), r.meta.at("pos").get<int>()};
  i.caption = r.meta.at("caption").get<std::string>();
  i.pixels = r.values;
  return i;
}

VideoItem video_from_record(const CorpusRecord& r) {
  VideoItem v;
  v.params.color = r.meta.at("color").get<int>();
  v.params.shape = r.meta.at("shape").get<int>();
  v.params.motion = motion_from_name(r.meta.at("motion").get<std::string>());
  v.params.x0 = r.meta.at("x0").get<int>();
  v.params.y0 = r.meta.at("y0").get<int>();
  v.caption = r.meta.at("caption").get<std::string>();
  v.clip = r.values;
  return v;
}

// Instruction records pack every present payload into one flat array; the
// metadata keeps each part's shape in packing order.
CorpusRecord to_record(const InstructionItem& item) {
  nlohmann::json meta{{"family", family_name(item.family)},
                      {"instruction", item.instruction},
                      {"answer", item.answer}};
  std::vector<double> flat;
  nlohmann::json parts = nlohmann::json::array();
  auto pack = [&](const char* name, const Tensor& t) {
    parts.push_back({{"name", name}, {"shape", t.shape()}});
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  };
  if (item.image) {
    meta["image"] = image_meta(*item.image);
    pack("image", item.image->pixels);
  }
  if (item.video) {
    meta["video"] = video_meta(*item.video);
    pack("video", item.video->clip);
  }
  if (item.speech) {
    meta["speech"] = speech_meta(*item.speech);
    pack("speech", item.speech->features);
  }
  meta["parts"] = parts;
  const std::size_t n = flat.size();
  return {meta, n ? Tensor({n}, std::move(flat)) : Tensor{}};
}

InstructionItem instruction_from_record(const CorpusRecord& r) {
  InstructionItem item;
  item.family = family_from_name(r.meta.at("family").get<std::string>());
  item.instruction = r.meta.at("instruction").get<std::string>();
  item.answer = r.meta.at("answer").get<std::string>();
  std::size_t offset = 0;
  for (const auto& part : r.meta.at("parts")) {
    Shape shape = part.at("shape").get<Shape>();
    const std::size_t n = shape_size(shape);
    if (!r.values.defined() || offset + n > r.values.size()) throw DataError("instruction record is truncated");
    auto src = r.values.data().subspan(offset, n);
    Tensor t(std::move(shape), std::vector<double>(src.begin(), src.end()));
    offset += n;
    const auto name = part.at("name").get<std::string>();
    CorpusRecord sub{r.meta.at(name), t};
    if (name == "image") item.image = image_from_record(sub);
    else if (name == "video") item.video = video_from_record(sub);
    else item.speech = speech_from_record(sub);
  }
  return item;
}

}  // namespace xllm
