#pragma once

#include <cstdint>
#include <vector>

#include "animediff/tensor.hpp"

namespace animediff::synth {

/// Flat-shaded cartoon head (background, hair, face, eyes, mouth, collar) in
/// [0, 1], drawn at 2x and box-downsampled. Colors and layout jitter with the
/// seed, so a set of seeds behaves like a small character dataset.
Tensor<float> character(int size, std::uint64_t seed);

/// `count` characters with seeds first_seed, first_seed + 1, ...
std::vector<Tensor<float>> character_set(int count, int size, std::uint64_t first_seed = 1);

}  // namespace animediff::synth
