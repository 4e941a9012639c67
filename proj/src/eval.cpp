// SPDX-License-Identifier: Apache-2.0
#include "xllm/eval.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "xllm/checkpoint.hpp"
#include "xllm/error.hpp"

namespace xllm {

CerReport cer(std::span<const int> ref, std::span<const int> hyp) {
  if (ref.empty()) throw UndefinedRateError("CER is undefined for an empty reference");
  const std::size_t n = ref.size(), m = hyp.size();
  std::vector<std::size_t> d((n + 1) * (m + 1));
  auto at = [&](std::size_t i, std::size_t j) -> std::size_t& { return d[i * (m + 1) + j]; };
  for (std::size_t i = 0; i <= n; ++i) at(i, 0) = i;
  for (std::size_t j = 0; j <= m; ++j) at(0, j) = j;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      const std::size_t sub = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      at(i, j) = std::min({sub, at(i - 1, j) + 1, at(i, j - 1) + 1});
    }
  }
  CerReport r;
  r.reference_length = n;
  std::size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && at(i, j) == at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1)) {
      if (ref[i - 1] != hyp[j - 1]) ++r.substitutions;
      --i;
      --j;
    } else if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
      ++r.deletions;
      --i;
    } else {
      ++r.insertions;
      --j;
    }
  }
  r.cer = static_cast<double>(r.edits()) / static_cast<double>(n);
  return r;
}

CerReport cer(std::string_view reference, std::string_view hypothesis) {
  std::vector<int> a(reference.begin(), reference.end()), b(hypothesis.begin(), hypothesis.end());
  return cer(a, b);
}

CerReport pool(std::span<const CerReport> reports) {
  CerReport total;
  for (const auto& r : reports) {
    total.substitutions += r.substitutions;
    total.insertions += r.insertions;
    total.deletions += r.deletions;
    total.reference_length += r.reference_length;
  }
  if (total.reference_length == 0) throw UndefinedRateError("CER is undefined for an empty reference");
  total.cer = static_cast<double>(total.edits()) / static_cast<double>(total.reference_length);
  return total;
}

std::string_view question_type_name(QuestionType t) {
  switch (t) {
    case QuestionType::kConversation: return "conversation";
    case QuestionType::kDetail: return "detail";
    default: return "complex";
  }
}

QuestionType parse_question_type(std::string_view s) {
  for (auto t : {QuestionType::kConversation, QuestionType::kDetail, QuestionType::kComplex}) {
    if (question_type_name(t) == s) return t;
  }
  throw DataError("unknown question type '" + std::string(s) + "'");
}

RelativeScores relative_score(std::span<const EvalRecord> records) {
  if (records.empty()) throw LengthError("relative score needs at least one record");
  std::map<QuestionType, std::pair<double, double>> sums;
  double cand = 0.0, ref = 0.0;
  for (const auto& r : records) {
    auto& s = sums[r.type];
    s.first += r.candidate_score;
    s.second += r.reference_score;
    cand += r.candidate_score;
    ref += r.reference_score;
  }
  RelativeScores out;
  for (const auto& [type, s] : sums) {
    if (s.second == 0.0) {
      throw UndefinedRatioError("reference scores for '" + std::string(question_type_name(type)) + "' sum to zero");
    }
    out.per_type[type] = 100.0 * s.first / s.second;
  }
  if (ref == 0.0) throw UndefinedRatioError("reference scores sum to zero");
  out.overall = 100.0 * cand / ref;
  return out;
}

EvalRecord judge_stub(EvalRecord record, std::uint64_t rubric_seed) {
  auto score = [&](const std::string& role, const std::string& answer) {
    const std::string digest = sha256_hex(std::to_string(rubric_seed) + '\x1f' + role + '\x1f' + record.id + '\x1f' +
                                          std::string(question_type_name(record.type)) + '\x1f' + answer);
    const auto v = std::stoull(digest.substr(0, 12), nullptr, 16);
    return 1.0 + static_cast<double>(v % 10);
  };
  record.candidate_score = score("candidate", record.candidate);
  record.reference_score = score("reference", record.reference);
  return record;
}

namespace {

std::vector<nlohmann::json> read_ndjson(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot write " + path.string());
  return os;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

std::vector<EvalRecord> read_eval_records(const std::filesystem::path& path) {
  std::vector<EvalRecord> out;
  for (const auto& j : read_ndjson(path)) {
    try {
      EvalRecord r;
      r.id = j.at("id").get<std::string>();
      r.type = parse_question_type(j.at("type").get<std::string>());
      r.candidate = j.value("candidate", "");
      r.reference = j.value("reference", "");
      r.candidate_score = j.value("candidate_score", 0.0);
      r.reference_score = j.value("reference_score", 0.0);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed evaluation record: ") + e.what());
    }
  }
  return out;
}

nlohmann::json relative_scores_json(const RelativeScores& s) {
  nlohmann::json j;
  for (const auto& [t, v] : s.per_type) j[std::string(question_type_name(t))] = v;
  j["overall"] = s.overall;
  return j;
}

void write_relscore_report(const std::filesystem::path& prefix, const RelativeScores& s) {
  open_out(prefix.string() + ".json") << relative_scores_json(s).dump(2) << '\n';
  auto csv = open_out(prefix.string() + ".csv");
  csv << "setting";
  for (const auto& [t, v] : s.per_type) csv << ',' << question_type_name(t);
  csv << ",overall\n" << "candidate";
  csv.precision(6);
  csv << std::fixed;
  for (const auto& [t, v] : s.per_type) csv << ',' << v;
  csv << ',' << s.overall << '\n';
}

std::vector<CerPair> read_cer_pairs(const std::filesystem::path& path) {
  std::vector<CerPair> out;
  for (const auto& j : read_ndjson(path)) {
    try {
      out.push_back({j.value("id", std::to_string(out.size())), j.at("reference").get<std::string>(),
                     j.at("hypothesis").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed CER record: ") + e.what());
    }
  }
  return out;
}

nlohmann::json cer_json(const CerReport& r) {
  return {{"substitutions", r.substitutions}, {"insertions", r.insertions}, {"deletions", r.deletions},
          {"reference_length", r.reference_length}, {"cer", r.cer}};
}

void write_cer_report(const std::filesystem::path& prefix, std::span<const CerPair> pairs,
                      std::span<const CerReport> reports) {
  nlohmann::json summary = cer_json(pool(reports));
  summary["items"] = reports.size();
  open_out(prefix.string() + ".json") << summary.dump(2) << '\n';
  auto csv = open_out(prefix.string() + ".csv");
  csv << "id,reference,hypothesis,substitutions,insertions,deletions,reference_length,cer\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    csv << csv_field(pairs[i].id) << ',' << csv_field(pairs[i].reference) << ',' << csv_field(pairs[i].hypothesis)
        << ',' << r.substitutions << ',' << r.insertions << ',' << r.deletions << ',' << r.reference_length << ','
        << r.cer << '\n';
  }
}

}  // namespace xllm
