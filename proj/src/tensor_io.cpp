#include "depthalign/tensor_io.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "depthalign/errors.hpp"

namespace depthalign {

namespace {

constexpr char kMagic[4] = {'A', 'N', 'C', 'H'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class ByteReader {
public:
    explicit ByteReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

    void require(std::size_t n, const char* what) const {
        if (remaining() < n)
            throw FormatError(std::string("truncated ") + what, bytes_.size());
    }

    std::uint8_t u8(const char* what) {
        require(1, what);
        return bytes_[pos_++];
    }

    std::uint16_t u16(const char* what) {
        require(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_]) |
                          static_cast<std::uint16_t>(bytes_[pos_ + 1]) << 8;
        pos_ += 2;
        return v;
    }

    std::uint32_t u32(const char* what) {
        require(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64(const char* what) {
        require(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

std::size_t dtype_size(TensorDtype d) {
    switch (d) {
        case TensorDtype::Float64: return 8;
        case TensorDtype::Float32: return 4;
        case TensorDtype::Uint8: return 1;
    }
    return 0;
}

} // namespace

std::size_t Tensor::element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    if (t.rank() != 2 && t.rank() != 3)
        throw DomainError("encode_tensor: rank must be 2 or 3");
    if (t.data.size() != t.element_count())
        throw DimensionError("encode_tensor: data length does not match dims");

    std::vector<std::uint8_t> out;
    out.reserve(12 + 4 * t.rank() + t.data.size() * dtype_size(t.dtype));
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, kVersion);
    out.push_back(static_cast<std::uint8_t>(t.dtype));
    out.push_back(static_cast<std::uint8_t>(t.rank()));
    put_u16(out, 0); // reserved
    for (auto d : t.dims) put_u32(out, d);

    switch (t.dtype) {
        case TensorDtype::Float64:
            for (double v : t.data) {
                std::uint64_t bits;
                std::memcpy(&bits, &v, 8);
                put_u64(out, bits);
            }
            break;
        case TensorDtype::Float32:
            for (double v : t.data) {
                const float f = static_cast<float>(v);
                std::uint32_t bits;
                std::memcpy(&bits, &f, 4);
                put_u32(out, bits);
            }
            break;
        case TensorDtype::Uint8:
            for (double v : t.data) {
                if (!(v >= 0.0 && v <= 255.0) || v != std::floor(v))
                    throw DomainError("encode_tensor: value not representable as uint8");
                out.push_back(static_cast<std::uint8_t>(v));
            }
            break;
    }
    return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
    ByteReader rd(bytes);

    rd.require(4, "magic");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw FormatError("bad magic, expected \"ANCH\"", 0);
    for (int i = 0; i < 4; ++i) rd.u8("magic");

    const std::size_t version_off = rd.offset();
    const std::uint32_t version = rd.u32("version");
    if (version != kVersion)
        throw FormatError("unsupported version " + std::to_string(version), version_off);

    const std::size_t dtype_off = rd.offset();
    const std::uint8_t dtype_raw = rd.u8("dtype");
    if (dtype_raw < 1 || dtype_raw > 3)
        throw FormatError("unsupported dtype " + std::to_string(dtype_raw), dtype_off);
    const auto dtype = static_cast<TensorDtype>(dtype_raw);

    const std::size_t rank_off = rd.offset();
    const std::uint8_t rank = rd.u8("rank");
    if (rank != 2 && rank != 3)
        throw FormatError("unsupported rank " + std::to_string(rank), rank_off);

    const std::size_t reserved_off = rd.offset();
    if (rd.u16("reserved") != 0)
        throw FormatError("nonzero reserved field", reserved_off);

    Tensor t;
    t.dtype = dtype;
    t.dims.resize(rank);
    for (std::uint8_t i = 0; i < rank; ++i) {
        const std::size_t dim_off = rd.offset();
        t.dims[i] = rd.u32("dims");
        if (t.dims[i] == 0)
            throw FormatError("zero-sized dimension " + std::to_string(i), dim_off);
    }

    const std::size_t n = t.element_count();
    const std::size_t payload_bytes = n * dtype_size(dtype);
    if (rd.remaining() < payload_bytes)
        throw FormatError("truncated payload", bytes.size());
    if (rd.remaining() > payload_bytes)
        throw FormatError("trailing bytes after payload", rd.offset() + payload_bytes);

    t.data.resize(n);
    switch (dtype) {
        case TensorDtype::Float64:
            for (std::size_t i = 0; i < n; ++i) {
                const std::uint64_t bits = rd.u64("payload");
                double v;
                std::memcpy(&v, &bits, 8);
                t.data[i] = v;
            }
            break;
        case TensorDtype::Float32:
            for (std::size_t i = 0; i < n; ++i) {
                const std::uint32_t bits = rd.u32("payload");
                float f;
                std::memcpy(&f, &bits, 4);
                t.data[i] = static_cast<double>(f);
            }
            break;
        case TensorDtype::Uint8:
            for (std::size_t i = 0; i < n; ++i)
                t.data[i] = static_cast<double>(rd.u8("payload"));
            break;
    }
    return t;
}

Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("read_tensor: cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return decode_tensor(bytes);
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
    const auto bytes = encode_tensor(t);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("write_tensor: cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw IoError("write_tensor: short write to " + path.string());
}

Tensor to_tensor(const ScalarField& f, TensorDtype dtype) {
    Tensor t;
    t.dtype = dtype;
    t.dims = {static_cast<std::uint32_t>(f.height), static_cast<std::uint32_t>(f.width)};
    t.data = f.data;
    return t;
}

Tensor to_tensor(const FieldStack& s, TensorDtype dtype) {
    Tensor t;
    t.dtype = dtype;
    t.dims = {static_cast<std::uint32_t>(s.channels),
              static_cast<std::uint32_t>(s.height),
              static_cast<std::uint32_t>(s.width)};
    t.data = s.data;
    return t;
}

Tensor to_tensor(const ValidityMask& m) {
    Tensor t;
    t.dtype = TensorDtype::Uint8;
    t.dims = {static_cast<std::uint32_t>(m.height), static_cast<std::uint32_t>(m.width)};
    t.data.assign(m.data.begin(), m.data.end());
    return t;
}

Tensor to_tensor(const std::vector<double>& v, TensorDtype dtype) {
    Tensor t;
    t.dtype = dtype;
    t.dims = {static_cast<std::uint32_t>(v.size()), 1};
    t.data = v;
    return t;
}

ScalarField tensor_to_scalar_field(const Tensor& t) {
    if (t.rank() != 2)
        throw DimensionError("tensor_to_scalar_field: rank-2 tensor required");
    ScalarField f(t.dims[0], t.dims[1]);
    f.data = t.data;
    return f;
}

FieldStack tensor_to_field_stack(const Tensor& t) {
    if (t.rank() != 3)
        throw DimensionError("tensor_to_field_stack: rank-3 tensor required");
    FieldStack s(t.dims[0], t.dims[1], t.dims[2]);
    s.data = t.data;
    return s;
}

ValidityMask tensor_to_mask(const Tensor& t) {
    if (t.rank() != 2)
        throw DimensionError("tensor_to_mask: rank-2 tensor required");
    ValidityMask m(t.dims[0], t.dims[1]);
    for (std::size_t i = 0; i < t.data.size(); ++i) m.data[i] = t.data[i] != 0.0;
    return m;
}

} // namespace depthalign
