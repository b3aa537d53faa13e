#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "omnibind/tensor.hpp"

namespace omnibind {

// "OBT1" tensor files: magic, u32 rows, u32 cols, rows*cols float32, all
// little-endian, row-major. Values are narrowed to float on write.
std::vector<unsigned char> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<unsigned char>& bytes, const std::string& origin = "buffer");

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

// Rounds every entry through float32, i.e. what a write/read cycle yields.
Tensor round_to_float(const Tensor& t);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace omnibind
