#ifndef MULTIFUSE_MMT1_HPP
#define MULTIFUSE_MMT1_HPP

// MMT1 binary tensor container:
//   magic "MMT1" | version u16 LE | dtype u8 | ndim u8 | ndim x u64 LE dims | row-major LE payload
// dtype: 1 = float32, 2 = float64, 3 = int32.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "multifuse/errors.hpp"
#include "multifuse/tensor.hpp"

namespace multifuse::mmt1 {

inline constexpr std::array<char, 4> kMagic{'M', 'M', 'T', '1'};
inline constexpr std::uint16_t kVersion = 1;

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2, Int32 = 3 };

template <class T>
constexpr DType dtype_of()
{
    if constexpr (std::is_same_v<T, float>) return DType::Float32;
    else if constexpr (std::is_same_v<T, double>) return DType::Float64;
    else {
        static_assert(std::is_same_v<T, std::int32_t>, "MMT1 supports float, double, int32");
        return DType::Int32;
    }
}

inline std::size_t dtype_size(DType d)
{
    switch (d) {
    case DType::Float32: return 4;
    case DType::Float64: return 8;
    case DType::Int32: return 4;
    }
    throw IoError("mmt1: unknown dtype");
}

namespace detail {

template <class T>
T to_le(T v)
{
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        std::array<unsigned char, sizeof(T)> b;
        std::memcpy(b.data(), &v, sizeof(T));
        std::reverse(b.begin(), b.end());
        std::memcpy(&v, b.data(), sizeof(T));
        return v;
    }
}

template <class T>
void put(std::ostream& os, T v)
{
    v = to_le(v);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is, const std::string& path)
{
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
        throw IoError("mmt1: truncated header in " + path);
    }
    return to_le(v);
}

} // namespace detail

/// Decoded file contents; payload kept in the on-disk dtype.
struct Array {
    DType dtype = DType::Float32;
    Shape shape;
    std::vector<float> f32;
    std::vector<double> f64;
    std::vector<std::int32_t> i32;

    std::size_t size() const { return numel(shape); }

    template <class T>
    std::vector<T> values() const
    {
        std::vector<T> out(size());
        switch (dtype) {
        case DType::Float32: std::copy(f32.begin(), f32.end(), out.begin()); break;
        case DType::Float64: std::copy(f64.begin(), f64.end(), out.begin()); break;
        case DType::Int32: std::copy(i32.begin(), i32.end(), out.begin()); break;
        }
        return out;
    }
};

template <class T>
void write(const std::filesystem::path& path, const Shape& shape, std::span<const T> data)
{
    if (numel(shape) != data.size()) {
        throw ContractError("mmt1::write: shape " + shape_str(shape) + " vs "
                            + std::to_string(data.size()) + " values");
    }
    if (shape.size() > 255) throw ContractError("mmt1::write: rank > 255");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("mmt1: cannot open " + path.string() + " for writing");
    os.write(kMagic.data(), kMagic.size());
    detail::put<std::uint16_t>(os, kVersion);
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
    detail::put<std::uint8_t>(os, static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) detail::put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * sizeof(T)));
    } else {
        for (T v : data) detail::put<T>(os, v);
    }
    if (!os) throw IoError("mmt1: write failed for " + path.string());
}

template <class T>
void write(const std::filesystem::path& path, const Tensor<T>& t)
{
    write<T>(path, t.shape(), t.data());
}

inline Array read(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("mmt1: cannot open " + path.string());
    const std::string p = path.string();
    std::array<char, 4> magic{};
    if (!is.read(magic.data(), 4) || magic != kMagic) throw IoError("mmt1: bad magic in " + p);
    const auto version = detail::get<std::uint16_t>(is, p);
    if (version != kVersion) {
        throw IoError("mmt1: unsupported version " + std::to_string(version) + " in " + p);
    }
    Array a;
    const auto code = detail::get<std::uint8_t>(is, p);
    if (code < 1 || code > 3) throw IoError("mmt1: unknown dtype code in " + p);
    a.dtype = static_cast<DType>(code);
    const auto ndim = detail::get<std::uint8_t>(is, p);
    for (std::uint8_t i = 0; i < ndim; ++i) {
        a.shape.push_back(static_cast<std::size_t>(detail::get<std::uint64_t>(is, p)));
    }
    const std::size_t n = numel(a.shape);
    auto load = [&](auto& buf) {
        using V = typename std::decay_t<decltype(buf)>::value_type;
        buf.resize(n);
        if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(V)))) {
            throw IoError("mmt1: truncated payload in " + p);
        }
        if constexpr (std::endian::native != std::endian::little) {
            for (auto& v : buf) v = detail::to_le(v);
        }
    };
    switch (a.dtype) {
    case DType::Float32: load(a.f32); break;
    case DType::Float64: load(a.f64); break;
    case DType::Int32: load(a.i32); break;
    }
    if (is.peek() != std::char_traits<char>::eof()) throw IoError("mmt1: trailing bytes in " + p);
    return a;
}

template <class T>
Tensor<T> read_tensor(const std::filesystem::path& path)
{
    Array a = read(path);
    return Tensor<T>(a.shape, a.values<T>());
}

} // namespace multifuse::mmt1

#endif
