// Copyright 2026 The ConMIM Lab Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

#include "conmim/numerics/tensor.hpp"

namespace conmim::vit {

/// Where masked positions are replaced: after patch embedding by a learnable
/// dim-wide token (default), or in pixel space by a learnable patch-wide token.
enum class MaskingMode { embedding, pixel };

struct ViTConfig {
  std::size_t image_side = 32;
  std::size_t patch_side = 4;
  std::size_t depth = 4;
  std::size_t dim = 96;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t proj_depth = 3;
  MaskingMode masking = MaskingMode::embedding;
  nd::DType dtype = nd::DType::f32;

  std::size_t grid() const noexcept { return image_side / patch_side; }
  std::size_t num_patches() const noexcept { return grid() * grid(); }
  std::size_t num_tokens() const noexcept { return num_patches() + 1; }
  std::size_t patch_dim() const noexcept { return patch_side * patch_side * 3; }
  std::size_t head_dim() const noexcept { return dim / heads; }

  void validate() const {
    if (patch_side == 0 || image_side == 0 || image_side % patch_side != 0)
      throw std::invalid_argument("vit: image_side " + std::to_string(image_side) +
                                  " is not divisible by patch_side " + std::to_string(patch_side));
    if (heads == 0 || dim == 0 || dim % heads != 0)
      throw std::invalid_argument("vit: dim " + std::to_string(dim) + " is not divisible by heads " +
                                  std::to_string(heads));
    if (depth == 0) throw std::invalid_argument("vit: depth must be positive");
    if (mlp_ratio == 0) throw std::invalid_argument("vit: mlp_ratio must be positive");
  }
};

}  // namespace conmim::vit
