// SPDX-License-Identifier: Apache-2.0
//
// Character error rate, judge-relative scores and report writers.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace xllm {

struct CerReport {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t reference_length = 0;
  double cer = 0.0;  // (S + I + D) / N; can exceed 1

  std::size_t edits() const { return substitutions + insertions + deletions; }
};

// Unit-cost Levenshtein alignment; counts come from one minimal backtrace that
// prefers substitution (or match), then deletion, then insertion.
// UndefinedRateError for an empty reference.
CerReport cer(std::span<const int> reference, std::span<const int> hypothesis);
CerReport cer(std::string_view reference, std::string_view hypothesis);

// Pools counts over many pairs: corpus CER = total edits / total length.
CerReport pool(std::span<const CerReport> reports);

enum class QuestionType { kConversation, kDetail, kComplex };
std::string_view question_type_name(QuestionType t);
QuestionType parse_question_type(std::string_view s);

struct EvalRecord {
  std::string id;
  QuestionType type = QuestionType::kConversation;
  std::string candidate;
  std::string reference;
  double candidate_score = 0.0;  // both in [1, 10]
  double reference_score = 0.0;
};

struct RelativeScores {
  std::map<QuestionType, double> per_type;  // only types that occur
  double overall = 0.0;
};

// 100 * sum(candidate) / sum(reference) per type and overall.
// LengthError on no records, UndefinedRatioError on a zero reference sum.
RelativeScores relative_score(std::span<const EvalRecord> records);

// Deterministic stand-in for an external judge: scores in [1, 10] derived
// from a SHA-256 of the seed and the answers.
EvalRecord judge_stub(EvalRecord record, std::uint64_t rubric_seed);

// NDJSON in, JSON summary + CSV table out.
std::vector<EvalRecord> read_eval_records(const std::filesystem::path& path);
nlohmann::json relative_scores_json(const RelativeScores& s);
void write_relscore_report(const std::filesystem::path& prefix, const RelativeScores& s);

struct CerPair {
  std::string id, reference, hypothesis;
};
std::vector<CerPair> read_cer_pairs(const std::filesystem::path& path);
nlohmann::json cer_json(const CerReport& r);
void write_cer_report(const std::filesystem::path& prefix, std::span<const CerPair> pairs,
                      std::span<const CerReport> reports);

}  // namespace xllm
