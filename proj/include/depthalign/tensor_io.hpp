#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "depthalign/field.hpp"

namespace depthalign {

// ANCH tensor container (little-endian):
//   magic   "ANCH"            4 ASCII bytes
//   version u32 = 1
//   dtype   u8                1 = float64, 2 = float32, 3 = uint8
//   rank    u8                2 or 3
//   reserved u16 = 0
//   dims    rank x u32        rank-3 order: channels, height, width
//   payload                   row-major / channel-major, no padding
// float32 and uint8 payloads are widened to double on read; the dtype is
// kept so a write round-trips bit-exactly.
enum class TensorDtype : std::uint8_t {
    Float64 = 1,
    Float32 = 2,
    Uint8 = 3,
};

struct Tensor {
    TensorDtype dtype = TensorDtype::Float64;
    std::vector<std::uint32_t> dims; // rank 2: (h, w); rank 3: (c, h, w)
    std::vector<double> data;

    std::size_t rank() const { return dims.size(); }
    std::size_t element_count() const;
};

Tensor read_tensor(const std::filesystem::path& path);
void write_tensor(const std::filesystem::path& path, const Tensor& t);

// In-memory encode/decode of the same byte layout.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

Tensor to_tensor(const ScalarField& f, TensorDtype dtype = TensorDtype::Float64);
Tensor to_tensor(const FieldStack& s, TensorDtype dtype = TensorDtype::Float64);
Tensor to_tensor(const ValidityMask& m);
Tensor to_tensor(const std::vector<double>& v, TensorDtype dtype = TensorDtype::Float64);

ScalarField tensor_to_scalar_field(const Tensor& t);
FieldStack tensor_to_field_stack(const Tensor& t);
ValidityMask tensor_to_mask(const Tensor& t);

} // namespace depthalign
