// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string_view>

#include "xllm/tensor.hpp"

namespace xllm {

enum class Modality { kImage, kVideo, kSpeech };

std::string_view modality_name(Modality m);

// Embeddings an interface emits into the decoder's input space.
struct QuasiLinguisticSequence {
  Tensor embeddings;  // [L x width]; undefined when L == 0
  Modality origin = Modality::kImage;

  std::size_t length() const { return embeddings.defined() ? embeddings.rows() : 0; }
  std::size_t width() const { return embeddings.defined() ? embeddings.cols() : 0; }
};

}  // namespace xllm
