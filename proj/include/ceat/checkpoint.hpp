#pragma once

// Binary checkpoint format, little-endian throughout:
//
//   "CEAT"            4 bytes magic
//   u32 version       currently 1
//   u32 layer_count
//   per layer:
//     u32 tag         0 dense, 1 conv, 2 relu, 3 flatten
//     dense:   u32 in, u32 out, f64[in*out] weight, f64[out] bias
//     conv:    u32 F, u32 C, u32 3, u32 3, f64[F*C*9] kernel
//     relu:    (nothing)
//     flatten: u32 rank, u32[rank] per-sample input dims
//   u32 crc32         over every preceding byte
//
// The model's input shape is recovered from the first Flatten/Conv layer.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "ceat/errors.hpp"
#include "ceat/model.hpp"

namespace ceat {

inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace detail {

inline std::uint32_t crc32_of(const std::vector<unsigned char>& bytes, std::size_t len) {
    return static_cast<std::uint32_t>(::crc32(0L, bytes.data(), static_cast<uInt>(len)));
}

class ByteWriter {
public:
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void f64s(std::span<const double> v) { raw(v.data(), v.size() * sizeof(double)); }
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    std::vector<unsigned char> bytes;
};

class ByteReader {
public:
    explicit ByteReader(const std::vector<unsigned char>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, sizeof v);
        return v;
    }
    void f64s(std::span<double> out) { raw(out.data(), out.size() * sizeof(double)); }
    void raw(void* p, std::size_t n) {
        if (n > end_ - pos_)
            throw FormatError("checkpoint truncated at offset " + std::to_string(pos_) + " (need " +
                              std::to_string(n) + " more bytes)");
        std::memcpy(p, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::size_t offset() const noexcept { return pos_; }

private:
    const std::vector<unsigned char>& bytes_;
    std::size_t end_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Model& model) {
    detail::ByteWriter w;
    w.raw("CEAT", 4);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(model.layers().size()));
    for (const auto& layer : model.layers()) {
        w.u32(static_cast<std::uint32_t>(layer.index()));
        if (const auto* d = std::get_if<Dense>(&layer)) {
            w.u32(static_cast<std::uint32_t>(d->weight.dim(0)));
            w.u32(static_cast<std::uint32_t>(d->weight.dim(1)));
            w.f64s(d->weight.values());
            w.f64s(d->bias.values());
        } else if (const auto* c = std::get_if<Conv>(&layer)) {
            for (auto dim : c->kernel.shape()) w.u32(static_cast<std::uint32_t>(dim));
            w.f64s(c->kernel.values());
        } else if (const auto* f = std::get_if<Flatten>(&layer)) {
            w.u32(static_cast<std::uint32_t>(f->input.size()));
            for (auto dim : f->input) w.u32(static_cast<std::uint32_t>(dim));
        }
    }
    const auto crc = detail::crc32_of(w.bytes, w.bytes.size());
    w.u32(crc);
    return std::move(w.bytes);
}

inline Model decode_checkpoint(const std::vector<unsigned char>& bytes) {
    if (bytes.size() < 16) throw FormatError("checkpoint truncated at offset " + std::to_string(bytes.size()));
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + body, 4);

    detail::ByteReader r(bytes, body);
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, "CEAT", 4) != 0) throw FormatError("bad checkpoint magic at offset 0");
    const auto version = r.u32();
    if (version != kCheckpointVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " at offset 4");
    if (detail::crc32_of(bytes, body) != stored)
        throw FormatError("checkpoint CRC mismatch at offset " + std::to_string(body));

    const auto count = r.u32();
    std::vector<Layer> layers;
    Shape input;
    auto read_dims = [&r](std::size_t n) {
        Shape s(n);
        for (auto& d : s) {
            d = r.u32();
            if (d == 0) throw FormatError("zero dimension in checkpoint before offset " + std::to_string(r.offset()));
        }
        return s;
    };
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto at = r.offset();
        const auto tag = r.u32();
        switch (tag) {
            case 0: {
                auto dims = read_dims(2);
                Tensor weight(dims), bias({dims[1]});
                r.f64s(weight.values());
                r.f64s(bias.values());
                layers.emplace_back(Dense{std::move(weight), std::move(bias)});
                break;
            }
            case 1: {
                auto dims = read_dims(4);
                Tensor kernel(dims);
                r.f64s(kernel.values());
                layers.emplace_back(Conv{std::move(kernel)});
                break;
            }
            case 2:
                layers.emplace_back(Relu{});
                break;
            case 3: {
                const auto rank = r.u32();
                if (rank == 0 || rank > 8)
                    throw FormatError("bad flatten rank at offset " + std::to_string(r.offset() - 4));
                layers.emplace_back(Flatten{read_dims(rank)});
                break;
            }
            default:
                throw FormatError("unknown layer tag " + std::to_string(tag) + " at offset " + std::to_string(at));
        }
    }
    if (r.offset() != body) throw FormatError("trailing bytes after layers at offset " + std::to_string(r.offset()));

    // Input shape: flatten-first models record it directly; conv-first models
    // take channels from the first kernel and spatial size from the flatten.
    if (layers.empty()) throw FormatError("checkpoint has no layers");
    if (const auto* f = std::get_if<Flatten>(&layers.front())) {
        input = f->input;
    } else if (const auto* c = std::get_if<Conv>(&layers.front())) {
        for (const auto& l : layers)
            if (const auto* f = std::get_if<Flatten>(&l)) {
                if (f->input.size() != 3) throw FormatError("conv model with non-spatial flatten");
                input = {c->kernel.dim(1), f->input[1], f->input[2]};
                break;
            }
        if (input.empty()) throw FormatError("conv model without flatten layer");
    } else {
        throw FormatError("checkpoint must start with a flatten or conv layer");
    }
    try {
        return Model(input, std::move(layers));
    } catch (const DimensionError& e) {
        throw FormatError(std::string("inconsistent checkpoint layers: ") + e.what());
    }
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(model);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace ceat
