// SPDX-License-Identifier: Apache-2.0
#include "xllm/quasi_linguistic.hpp"

namespace xllm {

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::kImage: return "image";
    case Modality::kVideo: return "video";
    case Modality::kSpeech: return "speech";
  }
  return "unknown";
}

}  // namespace xllm
