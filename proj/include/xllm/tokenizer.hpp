// SPDX-License-Identifier: Apache-2.0
//
// Byte-level tokenizer over UTF-8. Ids 0-247 are raw bytes; the bytes
// 0xF8-0xFF never occur in valid UTF-8, so those ids are reserved:
//
//   248 <Image>   249 </Image>   250 <Video>   251 </Video>
//   252 <Speech>  253 </Speech>  254 <eos>     255 <pad>
#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace xllm::tok {

inline constexpr int kVocabSize = 256;
inline constexpr int kFirstReserved = 248;
inline constexpr int kImageOpen = 248;
inline constexpr int kImageClose = 249;
inline constexpr int kVideoOpen = 250;
inline constexpr int kVideoClose = 251;
inline constexpr int kSpeechOpen = 252;
inline constexpr int kSpeechClose = 253;
inline constexpr int kEos = 254;
inline constexpr int kPad = 255;

bool is_reserved(int id);

// Raw bytes; a byte in the reserved range is a VocabularyError.
std::vector<int> encode(std::string_view text);

// Bytes verbatim; reserved ids render as their marker text.
std::string decode(std::span<const int> ids);

// Id of a reserved marker such as "<Image>"; VocabularyError if unknown.
int marker_id(std::string_view marker);
std::string_view marker_text(int id);

}  // namespace xllm::tok
