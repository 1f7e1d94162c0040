#pragma once
// Shared checkpoint format: JSON manifest (<stem>.json) listing tensor names,
// shapes and element offsets, adjacent to a flat little-endian float32 blob
// (<stem>.f32).  Used for model parameters, connectivity matrices and any
// other tensor bundle a stage hands to the next one.

#include <string>
#include <utility>
#include <vector>

#include "bstrat/autodiff.hpp"
#include "bstrat/tensor.hpp"

namespace bstrat {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

void save_tensors(const std::string& stem, const std::vector<NamedTensor>& tensors,
                  const std::string& kind = "checkpoint");
std::vector<NamedTensor> load_tensors(const std::string& stem);

// Parameter bundles: names must match exactly on load (missing or extra keys
// and shape mismatches are errors).
void save_params(const std::string& stem, const ad::NamedParams& params);
void load_params(const std::string& stem, const ad::NamedParams& params);

}  // namespace bstrat
