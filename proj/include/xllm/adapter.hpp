// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <random>
#include <string>

#include "xllm/nn.hpp"
#include "xllm/quasi_linguistic.hpp"

namespace xllm {

// Linear projection from an interface width into the decoder width.
class Adapter {
 public:
  Adapter(std::size_t in, std::size_t out, std::mt19937_64& rng) : proj_(in, out, rng) {}

  QuasiLinguisticSequence adapt(const QuasiLinguisticSequence& seq) const;
  void collect(ParamList& out, const std::string& prefix) const { proj_.collect(out, prefix); }

  std::size_t in_width() const { return proj_.weight.rows(); }
  std::size_t out_width() const { return proj_.weight.cols(); }
  Linear& linear() { return proj_; }

 private:
  Linear proj_;
};

}  // namespace xllm
