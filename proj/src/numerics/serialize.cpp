#include "psvdd/numerics/serialize.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace psvdd::numerics {

void write_u32(std::ostream& out, std::uint32_t v) {
    const std::array<char, 4> bytes{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                                    static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    out.write(bytes.data(), 4);
}

void write_f32(std::ostream& out, float v) { write_u32(out, std::bit_cast<std::uint32_t>(v)); }

std::uint32_t read_u32(std::istream& in) {
    std::array<unsigned char, 4> b{};
    in.read(reinterpret_cast<char*>(b.data()), 4);
    if (!in) throw IoError("unexpected end of stream");
    return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
           (std::uint32_t{b[3]} << 24);
}

float read_f32(std::istream& in) { return std::bit_cast<float>(read_u32(in)); }

void write_f32_array(std::ostream& out, const float* values, std::size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(values), static_cast<std::streamsize>(count * sizeof(float)));
    } else {
        for (std::size_t i = 0; i < count; ++i) write_f32(out, values[i]);
    }
}

void read_f32_array(std::istream& in, float* values, std::size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        in.read(reinterpret_cast<char*>(values), static_cast<std::streamsize>(count * sizeof(float)));
        if (!in) throw IoError("unexpected end of stream");
    } else {
        for (std::size_t i = 0; i < count; ++i) values[i] = read_f32(in);
    }
}

void write_parameters(std::ostream& out, const std::vector<NamedTensor>& tensors) {
    out.write(kParamMagic, 4);
    write_u32(out, kParamFormatVersion);
    write_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, tensor] : tensors) {
        write_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(out, static_cast<std::uint32_t>(tensor.rank()));
        for (std::size_t e : tensor.shape()) write_u32(out, static_cast<std::uint32_t>(e));
        write_f32_array(out, tensor.data(), tensor.size());
    }
}

std::vector<NamedTensor> read_parameters(std::istream& in) {
    char magic[4]{};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kParamMagic, 4) != 0) throw IoError("not a parameter container (bad magic)");
    const std::uint32_t version = read_u32(in);
    if (version != kParamFormatVersion) {
        throw IoError("unsupported parameter container version " + std::to_string(version));
    }
    const std::uint32_t count = read_u32(in);
    std::vector<NamedTensor> tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor t;
        t.name.resize(read_u32(in));
        in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        const std::uint32_t rank = read_u32(in);
        Shape shape(rank);
        for (auto& e : shape) e = read_u32(in);
        t.tensor = Tensor<float>(shape);
        read_f32_array(in, t.tensor.data(), t.tensor.size());
        tensors.push_back(std::move(t));
    }
    return tensors;
}

void save_parameters(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    write_parameters(out, tensors);
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<NamedTensor> load_parameters(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        return read_parameters(in);
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

}  // namespace psvdd::numerics
