#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gda/tensor.hpp"

namespace gda {

// 8-bit truecolor PNG, no alpha. Images are [3,H,W] tensors in [0,1];
// encode quantizes with round(clamp(v)*255), decode returns byte/255.
// Encoding always emits filter-0 rows (deterministic bytes for a given
// zlib); decoding handles any of the five standard filters.
std::vector<uint8_t> png_encode(const Tensor& img);
Tensor png_decode(const std::vector<uint8_t>& bytes);  // throws ParseError on bad data

void png_save(const std::string& path, const Tensor& img);
Tensor png_load(const std::string& path);

}  // namespace gda
