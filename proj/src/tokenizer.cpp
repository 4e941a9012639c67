// SPDX-License-Identifier: Apache-2.0
#include "xllm/tokenizer.hpp"

#include <array>

#include "xllm/error.hpp"

namespace xllm::tok {
namespace {

constexpr std::array<std::string_view, 8> kMarkers{
    "<Image>", "</Image>", "<Video>", "</Video>", "<Speech>", "</Speech>", "<eos>", "<pad>"};

}  // namespace

bool is_reserved(int id) { return id >= kFirstReserved && id < kVocabSize; }

std::vector<int> encode(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) {
    if (c >= kFirstReserved) {
      throw VocabularyError("byte 0x" + std::to_string(c) + " collides with a reserved marker id");
    }
    ids.push_back(c);
  }
  return ids;
}

std::string decode(std::span<const int> ids) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= kVocabSize) throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
    if (is_reserved(id)) {
      out += marker_text(id);
    } else {
      out += static_cast<char>(id);
    }
  }
  return out;
}

int marker_id(std::string_view marker) {
  for (std::size_t i = 0; i < kMarkers.size(); ++i) {
    if (kMarkers[i] == marker) return kFirstReserved + static_cast<int>(i);
  }
  throw VocabularyError("unknown reserved token '" + std::string(marker) + "'");
}

std::string_view marker_text(int id) {
  if (!is_reserved(id)) throw VocabularyError("id " + std::to_string(id) + " is not a reserved marker");
  return kMarkers[static_cast<std::size_t>(id - kFirstReserved)];
}

}  // namespace xllm::tok
