#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>

#include "repscope/tensor.hpp"

namespace repscope {

// Little-endian float element types; everything else is rejected on read.
enum class NpyDtype { f32, f64 };

struct NpyHeader {
  NpyDtype dtype = NpyDtype::f32;
  Shape shape;
  std::size_t data_offset = 0;  // bytes from file start to payload
};

// Full NPY v1.0 header (magic through the trailing newline), padded so the
// payload starts on a 64-byte boundary.
std::string npy_header(const Shape& shape, NpyDtype dtype);

// Parses the header at the start of `bytes`. Throws DataError with a
// description of the first problem found.
NpyHeader parse_npy_header(std::string_view bytes);

std::string encode_npy(const Tensor& t, NpyDtype dtype = NpyDtype::f32);
Tensor decode_npy(std::string_view bytes);

void write_npy(const std::filesystem::path& path, const Tensor& t, NpyDtype dtype = NpyDtype::f32);
Tensor read_npy(const std::filesystem::path& path);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::string_view bytes);

}  // namespace repscope
