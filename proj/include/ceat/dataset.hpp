#pragma once

// Datasets normalized to [0,1]: IDX and CSV loaders, synthetic generators,
// and seeded shuffled batching.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ceat/errors.hpp"
#include "ceat/tensor.hpp"

namespace ceat {

// Flat sample storage: sample i occupies inputs[i*sample_size, (i+1)*sample_size).
struct Dataset {
    std::string name;
    Shape sample_shape;
    std::vector<double> inputs;
    std::vector<int> labels;
    std::size_t num_classes = 0;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t sample_size() const { return shape_size(sample_shape); }

    // Inputs of the given samples stacked into [n × sample_shape].
    Tensor gather(std::span<const std::size_t> idx) const {
        if (idx.empty()) throw UsageError("gather: empty index set");
        const std::size_t s = sample_size();
        Shape shape{idx.size()};
        shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
        Tensor out(shape);
        for (std::size_t r = 0; r < idx.size(); ++r)
            std::copy_n(inputs.begin() + static_cast<std::ptrdiff_t>(idx[r] * s), s,
                        out.values().begin() + static_cast<std::ptrdiff_t>(r * s));
        return out;
    }

    std::vector<int> gather_labels(std::span<const std::size_t> idx) const {
        std::vector<int> out;
        out.reserve(idx.size());
        for (auto i : idx) out.push_back(labels[i]);
        return out;
    }

    Dataset subset(std::span<const std::size_t> idx) const {
        Dataset out{name, sample_shape, {}, gather_labels(idx), num_classes};
        const std::size_t s = sample_size();
        for (auto i : idx)
            out.inputs.insert(out.inputs.end(), inputs.begin() + static_cast<std::ptrdiff_t>(i * s),
                              inputs.begin() + static_cast<std::ptrdiff_t>((i + 1) * s));
        return out;
    }

    void validate() const {
        if (inputs.size() != size() * sample_size())
            throw FormatError(name + ": " + std::to_string(inputs.size()) + " input values for " +
                              std::to_string(size()) + " samples of shape " + shape_str(sample_shape));
        for (double v : inputs)
            if (!(v >= 0.0 && v <= 1.0)) throw InputError(name + ": input value outside [0,1]");
        for (int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= num_classes)
                throw InputError(name + ": label " + std::to_string(y) + " outside [0," +
                                 std::to_string(num_classes) + ")");
    }
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at, const std::string& what) {
    if (at + 4 > b.size()) throw FormatError(what + ": truncated header at offset " + std::to_string(at));
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
           std::uint32_t{b[at + 3]};
}

inline void put_be32(std::ostream& out, std::uint32_t v) {
    const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                           static_cast<char>(v)};
    out.write(bytes, 4);
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Big-endian IDX images (u8, N×rows×cols) plus labels; pixels scaled by 1/255.
// Without an explicit class count, K = max label + 1.
inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        std::optional<std::size_t> num_classes = std::nullopt) {
    const auto img = detail::read_file(images_path);
    const auto lab = detail::read_file(labels_path);
    const std::string iname = images_path.filename().string();
    const std::string lname = labels_path.filename().string();
    if (detail::be32(img, 0, iname) != kIdxImageMagic) throw FormatError(iname + ": bad IDX image magic");
    if (detail::be32(lab, 0, lname) != kIdxLabelMagic) throw FormatError(lname + ": bad IDX label magic");
    const std::size_t n = detail::be32(img, 4, iname);
    const std::size_t rows = detail::be32(img, 8, iname);
    const std::size_t cols = detail::be32(img, 12, iname);
    const std::size_t nl = detail::be32(lab, 4, lname);
    if (n != nl)
        throw FormatError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) + " labels");
    if (rows == 0 || cols == 0) throw FormatError(iname + ": zero image dimension");
    if (img.size() != 16 + n * rows * cols)
        throw FormatError(iname + ": payload has " + std::to_string(img.size() - 16) + " bytes, expected " +
                          std::to_string(n * rows * cols));
    if (lab.size() != 8 + n)
        throw FormatError(lname + ": payload has " + std::to_string(lab.size() - 8) + " bytes, expected " +
                          std::to_string(n));

    Dataset ds{iname, {1, rows, cols}, {}, {}, 0};
    ds.inputs.reserve(n * rows * cols);
    for (std::size_t i = 16; i < img.size(); ++i) ds.inputs.push_back(img[i] / 255.0);
    int max_label = 1;
    for (std::size_t i = 8; i < lab.size(); ++i) {
        ds.labels.push_back(lab[i]);
        max_label = std::max(max_label, static_cast<int>(lab[i]));
    }
    ds.num_classes = num_classes.value_or(static_cast<std::size_t>(max_label) + 1);
    ds.validate();
    return ds;
}

// Writes single-channel images as IDX, quantizing v to round(255 v).
inline void write_idx(const Dataset& ds, const std::filesystem::path& images_path,
                      const std::filesystem::path& labels_path) {
    const auto& s = ds.sample_shape;
    std::size_t rows = 0, cols = 0;
    if (s.size() == 3 && s[0] == 1) {
        rows = s[1];
        cols = s[2];
    } else if (s.size() == 2) {
        rows = s[0];
        cols = s[1];
    } else {
        throw DimensionError("write_idx: need 1xHxW or HxW samples, got " + shape_str(s));
    }
    std::ofstream img(images_path, std::ios::binary | std::ios::trunc);
    std::ofstream lab(labels_path, std::ios::binary | std::ios::trunc);
    if (!img || !lab) throw IoError("cannot open IDX output files");
    detail::put_be32(img, kIdxImageMagic);
    detail::put_be32(img, static_cast<std::uint32_t>(ds.size()));
    detail::put_be32(img, static_cast<std::uint32_t>(rows));
    detail::put_be32(img, static_cast<std::uint32_t>(cols));
    for (double v : ds.inputs) img.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    detail::put_be32(lab, kIdxLabelMagic);
    detail::put_be32(lab, static_cast<std::uint32_t>(ds.size()));
    for (int y : ds.labels) lab.put(static_cast<char>(static_cast<unsigned char>(y)));
    if (!img || !lab) throw IoError("IDX write failed");
}

// Rows of "label,p1,...,pD" with pixels in [0,255]. Samples are flat [D]
// unless a sample shape is supplied.
inline Dataset load_csv(const std::filesystem::path& path, std::size_t num_classes,
                        std::optional<Shape> sample_shape = std::nullopt) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    Dataset ds{path.filename().string(), {}, {}, {}, num_classes};
    std::string line;
    std::size_t row = 0, width = 0;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        std::size_t col = 0, start = 0;
        std::vector<double> cells;
        while (true) {
            const auto end = line.find(',', start);
            std::string cell = line.substr(start, end == std::string::npos ? std::string::npos : end - start);
            ++col;
            const auto b = cell.find_first_not_of(" \t");
            const auto e = cell.find_last_not_of(" \t");
            double v = 0.0;
            const char* first = cell.data() + (b == std::string::npos ? cell.size() : b);
            const char* last = cell.data() + (e == std::string::npos ? cell.size() : e + 1);
            auto [ptr, ec] = std::from_chars(first, last, v);
            if (ec != std::errc{} || ptr != last || first == last)
                throw FormatError(ds.name + ": non-numeric cell at row " + std::to_string(row) + ", column " +
                                  std::to_string(col));
            cells.push_back(v);
            if (end == std::string::npos) break;
            start = end + 1;
        }
        if (cells.size() < 2)
            throw FormatError(ds.name + ": row " + std::to_string(row) + " has no pixel columns");
        if (width == 0) width = cells.size() - 1;
        if (cells.size() - 1 != width)
            throw FormatError(ds.name + ": row " + std::to_string(row) + " has " + std::to_string(cells.size() - 1) +
                              " pixels, expected " + std::to_string(width));
        const double label = cells[0];
        if (label < 0 || label != std::floor(label) || label >= static_cast<double>(num_classes))
            throw InputError(ds.name + ": label " + std::to_string(label) + " at row " + std::to_string(row) +
                             " outside [0," + std::to_string(num_classes) + ")");
        ds.labels.push_back(static_cast<int>(label));
        for (std::size_t c = 1; c < cells.size(); ++c) {
            if (cells[c] < 0.0 || cells[c] > 255.0)
                throw InputError(ds.name + ": pixel outside [0,255] at row " + std::to_string(row) + ", column " +
                                 std::to_string(c + 1));
            ds.inputs.push_back(cells[c] / 255.0);
        }
    }
    if (sample_shape) {
        if (width != 0 && shape_size(*sample_shape) != width)
            throw DimensionError(ds.name + ": sample shape " + shape_str(*sample_shape) + " does not hold " +
                                 std::to_string(width) + " pixels");
        ds.sample_shape = *sample_shape;
    } else {
        ds.sample_shape = {std::max<std::size_t>(width, 1)};
    }
    ds.validate();
    return ds;
}

// Point on arm `cls` of a K-arm spiral at arc parameter s in (0,1), before
// noise and rescaling: radius s, angle 2πc/K + 3πs.
inline std::array<double, 2> spiral_point(std::size_t cls, std::size_t num_classes, double s) {
    const double theta = 2.0 * std::numbers::pi * static_cast<double>(cls) / static_cast<double>(num_classes) +
                         3.0 * std::numbers::pi * s;
    return {s * std::cos(theta), s * std::sin(theta)};
}

// Interleaved spiral arms with Gaussian noise, min-max rescaled into [0,1]².
inline Dataset synth_spirals(std::size_t n_per_class, std::size_t num_classes, double noise_std, std::uint64_t seed) {
    if (num_classes != 2 && num_classes != 3) throw InputError("synth_spirals: K must be 2 or 3");
    if (!(noise_std >= 0.0)) throw InputError("synth_spirals: noise must be non-negative");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    Dataset ds{"spirals", {2}, {}, {}, num_classes};
    for (std::size_t c = 0; c < num_classes; ++c)
        for (std::size_t i = 0; i < n_per_class; ++i) {
            const double s = (static_cast<double>(i) + 0.5) / static_cast<double>(n_per_class);
            auto p = spiral_point(c, num_classes, s);
            ds.inputs.push_back(p[0] + noise_std * noise(rng));
            ds.inputs.push_back(p[1] + noise_std * noise(rng));
            ds.labels.push_back(static_cast<int>(c));
        }
    for (std::size_t axis = 0; axis < 2; ++axis) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (std::size_t i = axis; i < ds.inputs.size(); i += 2) {
            lo = std::min(lo, ds.inputs[i]);
            hi = std::max(hi, ds.inputs[i]);
        }
        for (std::size_t i = axis; i < ds.inputs.size(); i += 2)
            ds.inputs[i] = hi > lo ? std::clamp((ds.inputs[i] - lo) / (hi - lo), 0.0, 1.0) : 0.5;
    }
    return ds;
}

namespace detail {

// 5×7 glyphs, one string per row, '#' = ink.
inline constexpr std::array<std::array<const char*, 7>, 10> kDigitGlyphs{{
    {".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."},
    {"..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."},
    {".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"},
    {"#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."},
    {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."},
    {"#####", "#....", "####.", "....#", "....#", "#...#", ".###."},
    {"..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."},
    {"#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."},
    {".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."},
    {".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."},
}};

inline double glyph_ink(std::size_t digit, double gx, double gy) {
    // Bilinear sample of the glyph bitmap at continuous cell coordinates.
    auto cell = [digit](long r, long c) -> double {
        if (r < 0 || r >= 7 || c < 0 || c >= 5) return 0.0;
        return kDigitGlyphs[digit][static_cast<std::size_t>(r)][static_cast<std::size_t>(c)] == '#' ? 1.0 : 0.0;
    };
    const double fx = gx - 0.5, fy = gy - 0.5;
    const long c0 = static_cast<long>(std::floor(fx)), r0 = static_cast<long>(std::floor(fy));
    const double tx = fx - static_cast<double>(c0), ty = fy - static_cast<double>(r0);
    return (1 - ty) * ((1 - tx) * cell(r0, c0) + tx * cell(r0, c0 + 1)) +
           ty * ((1 - tx) * cell(r0 + 1, c0) + tx * cell(r0 + 1, c0 + 1));
}

}  // namespace detail

// Procedural handwritten-style digits: 5×7 glyphs under a random affine
// warp (scale, shear, rotation, shift), random ink intensity, and additive
// Gaussian pixel noise. Labels cycle 0..9.
inline Dataset synth_digits(std::size_t count, std::uint64_t seed, std::size_t side = 10) {
    if (side < 7) throw InputError("synth_digits: side must be at least 7");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Dataset ds{"digits", {1, side, side}, {}, {}, 10};
    ds.inputs.reserve(count * side * side);
    const double mid = static_cast<double>(side) / 2.0;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t digit = i % 10;
        const double scale = (static_cast<double>(side) - 2.0) / 7.0 * (0.85 + 0.3 * unit(rng));
        const double aspect = 0.85 + 0.3 * unit(rng);
        const double angle = 0.25 * (unit(rng) - 0.5);
        const double shear = 0.4 * (unit(rng) - 0.5);
        const double dx = 1.6 * (unit(rng) - 0.5), dy = 1.6 * (unit(rng) - 0.5);
        const double ink = 0.55 + 0.45 * unit(rng);
        const double noise = 0.05 + 0.1 * unit(rng);
        const double ca = std::cos(angle), sa = std::sin(angle);
        for (std::size_t r = 0; r < side; ++r)
            for (std::size_t c = 0; c < side; ++c) {
                // Pixel centre relative to the (shifted) image centre, mapped
                // back into glyph cell coordinates.
                const double px = static_cast<double>(c) + 0.5 - mid - dx;
                const double py = static_cast<double>(r) + 0.5 - mid - dy;
                const double ux = ca * px + sa * py;
                const double uy = -sa * px + ca * py;
                const double gx = (ux - shear * uy) / (scale * aspect) + 2.5;
                const double gy = uy / scale + 3.5;
                const double v = ink * detail::glyph_ink(digit, gx, gy) + noise * gauss(rng);
                ds.inputs.push_back(std::clamp(v, 0.0, 1.0));
            }
        ds.labels.push_back(static_cast<int>(digit));
    }
    return ds;
}

struct BatchPlan {
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
};

struct Batch {
    std::vector<std::size_t> indices;
    Tensor x;
    std::vector<int> y;
};

// Seeded Fisher-Yates permutation of [0,n) for one epoch.
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i - 1);
        std::swap(perm[i - 1], perm[pick(rng)]);
    }
    return perm;
}

// Shuffled batches for one epoch; the final partial batch is kept.
inline std::vector<Batch> batches(const Dataset& ds, const BatchPlan& plan, std::size_t epoch) {
    if (plan.batch_size == 0) throw InputError("batch size must be at least 1");
    const auto perm = epoch_permutation(ds.size(), plan.seed, epoch);
    std::vector<Batch> out;
    for (std::size_t start = 0; start < perm.size(); start += plan.batch_size) {
        const std::size_t end = std::min(perm.size(), start + plan.batch_size);
        Batch b;
        b.indices.assign(perm.begin() + static_cast<std::ptrdiff_t>(start),
                         perm.begin() + static_cast<std::ptrdiff_t>(end));
        b.x = ds.gather(b.indices);
        b.y = ds.gather_labels(b.indices);
        out.push_back(std::move(b));
    }
    return out;
}

// Unshuffled consecutive batches, for evaluation.
inline std::vector<Batch> sequential_batches(const Dataset& ds, std::size_t batch_size) {
    if (batch_size == 0) throw InputError("batch size must be at least 1");
    std::vector<Batch> out;
    for (std::size_t start = 0; start < ds.size(); start += batch_size) {
        Batch b;
        for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) b.indices.push_back(i);
        b.x = ds.gather(b.indices);
        b.y = ds.gather_labels(b.indices);
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace ceat
