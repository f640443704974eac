#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "psvdd/numerics/tensor.hpp"

namespace psvdd::numerics {

inline constexpr char kParamMagic[4] = {'P', 'S', 'V', 'D'};
inline constexpr std::uint32_t kParamFormatVersion = 1;

struct NamedTensor {
    std::string name;
    Tensor<float> tensor;
};

// Layout: "PSVD", u32 version, u32 count, then per tensor
// u32 name length, UTF-8 name, u32 rank, u32 extents..., f32 values.
// Everything little-endian.
void write_parameters(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_parameters(std::istream& in);

void save_parameters(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> load_parameters(const std::filesystem::path& path);

// Little-endian primitives shared by the other binary formats.
void write_u32(std::ostream& out, std::uint32_t v);
void write_f32(std::ostream& out, float v);
std::uint32_t read_u32(std::istream& in);
float read_f32(std::istream& in);
void write_f32_array(std::ostream& out, const float* values, std::size_t count);
void read_f32_array(std::istream& in, float* values, std::size_t count);

}  // namespace psvdd::numerics
