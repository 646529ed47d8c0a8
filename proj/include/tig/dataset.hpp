#pragma once
// Synthetic scene corpus: deterministic rasterizer, caption templates, a
// counter-based sampler and an exact attribute oracle.
//
// All shape membership tests use strict integer comparisons on quadrupled
// pixel-center coordinates, so renders are bit-identical across platforms and
// the oracle can demand exact round trips.

#include <filesystem>
#include <fstream>
#include <optional>

#include "tig/rng.hpp"
#include "tig/text.hpp"

namespace tig {

enum class ShapeKind { circle, square, triangle, cross };
enum class SizeKind { small, large };
enum class PosKind { top_left, top_right, bottom_left, bottom_right, center };

constexpr int n_shapes = 4, n_colors = 8, n_sizes = 2, n_positions = 5, n_backgrounds = 4;

struct NamedColor {
    const char* name;
    uint8_t r, g, b;
};

inline const NamedColor& shape_color(int i) {
    static const NamedColor table[n_colors] = {
        {"red", 255, 0, 0},     {"green", 0, 180, 0},    {"blue", 0, 0, 255},
        {"yellow", 255, 255, 0}, {"purple", 160, 32, 240}, {"orange", 255, 165, 0},
        {"cyan", 0, 255, 255},  {"pink", 255, 105, 180},
    };
    return table[i];
}

inline const NamedColor& background_color(int i) {
    static const NamedColor table[n_backgrounds] = {
        {"white", 255, 255, 255}, {"black", 0, 0, 0}, {"gray", 128, 128, 128}, {"blue", 0, 0, 255}};
    return table[i];
}

inline const char* shape_name(ShapeKind s) {
    switch (s) {
        case ShapeKind::circle: return "circle";
        case ShapeKind::square: return "square";
        case ShapeKind::triangle: return "triangle";
        default: return "cross";
    }
}
inline const char* size_name(SizeKind s) { return s == SizeKind::small ? "small" : "large"; }
// two-word names keep the caption length constant and exercise multi-word attributes
inline const char* position_name(PosKind p) {
    switch (p) {
        case PosKind::top_left: return "top left";
        case PosKind::top_right: return "top right";
        case PosKind::bottom_left: return "bottom left";
        case PosKind::bottom_right: return "bottom right";
        default: return "dead center";
    }
}

struct SceneSpec {
    ShapeKind shape = ShapeKind::circle;
    int color = 0;       // index into shape_color
    SizeKind size = SizeKind::small;
    PosKind position = PosKind::center;
    int background = 0;  // index into background_color

    bool valid() const {
        return std::string(shape_color(color).name) != background_color(background).name;
    }
    bool operator==(const SceneSpec&) const = default;
};

inline void position_center(PosKind p, int& cx, int& cy) {
    switch (p) {
        case PosKind::top_left: cx = 20, cy = 20; break;
        case PosKind::top_right: cx = 44, cy = 20; break;
        case PosKind::bottom_left: cx = 20, cy = 44; break;
        case PosKind::bottom_right: cx = 44, cy = 44; break;
        default: cx = 32, cy = 32; break;
    }
}

inline int half_extent(SizeKind s) { return s == SizeKind::small ? 10 : 18; }
inline int cross_arm(SizeKind s) { return s == SizeKind::small ? 4 : 6; }

// membership of pixel (px, py) with pixel centers at +0.5; coordinates
// quadrupled to stay in integers
inline bool covers(ShapeKind shape, SizeKind size, int cx, int cy, int px, int py) {
    const int dx = 4 * px + 2 - 4 * cx, dy = 4 * py + 2 - 4 * cy;
    const int h = 4 * half_extent(size);
    switch (shape) {
        case ShapeKind::circle: return long(dx) * dx + long(dy) * dy < long(h) * h;
        case ShapeKind::square: return std::abs(dx) < h && std::abs(dy) < h;
        case ShapeKind::triangle:  // apex up
            return dy > -h && dy < h && 2 * std::abs(dx) < dy + h;
        default: {
            const int a = 4 * cross_arm(size);
            return (std::abs(dx) < h && std::abs(dy) < a) || (std::abs(dy) < h && std::abs(dx) < a);
        }
    }
}

inline float u8_to_unit(uint8_t v) { return float(v) / 127.5f - 1.0f; }
inline uint8_t unit_to_u8(float v) {
    const float x = (v + 1.0f) * 127.5f;
    return uint8_t(std::min(255.0f, std::max(0.0f, std::round(x))));
}

// (3, res, res) in (-1, 1)
inline Array<float> render_scene(const SceneSpec& spec, int res = 64) {
    TIG_CHECK(spec.valid(), "render_scene: color equals background");
    const NamedColor& bg = background_color(spec.background);
    const NamedColor& fg = shape_color(spec.color);
    int cx, cy;
    position_center(spec.position, cx, cy);
    const int scale = res / 64;
    TIG_CHECK(scale * 64 == res, "render_scene: resolution must be a multiple of 64");
    Array<float> img({3, res, res});
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            const bool in = covers(spec.shape, spec.size, cx * scale, cy * scale, x, y);
            const NamedColor& c = in ? fg : bg;
            img[0L * res * res + long(y) * res + x] = u8_to_unit(c.r);
            img[1L * res * res + long(y) * res + x] = u8_to_unit(c.g);
            img[2L * res * res + long(y) * res + x] = u8_to_unit(c.b);
        }
    return img;
}

inline std::string caption_of(const SceneSpec& spec) {
    return std::string("a ") + size_name(spec.size) + " " + shape_color(spec.color).name + " " +
           shape_name(spec.shape) + " at the " + position_name(spec.position) + " on a " +
           background_color(spec.background).name + " background";
}

inline Vocab corpus_vocab() {
    Vocab v;
    for (const char* w : {"a", "small", "large", "at", "the", "on", "background", "top", "bottom",
                          "left", "right", "dead", "center"})
        v.add(w);
    for (int i = 0; i < n_shapes; ++i) v.add(shape_name(ShapeKind(i)));
    for (int i = 0; i < n_colors; ++i) v.add(shape_color(i).name);
    for (int i = 0; i < n_backgrounds; ++i) v.add(background_color(i).name);
    return v;
}

inline std::vector<SceneSpec> valid_specs() {
    std::vector<SceneSpec> out;
    for (int sh = 0; sh < n_shapes; ++sh)
        for (int co = 0; co < n_colors; ++co)
            for (int si = 0; si < n_sizes; ++si)
                for (int po = 0; po < n_positions; ++po)
                    for (int bg = 0; bg < n_backgrounds; ++bg) {
                        SceneSpec s{ShapeKind(sh), co, SizeKind(si), PosKind(po), bg};
                        if (s.valid()) out.push_back(s);
                    }
    return out;
}

struct Corpus {
    std::vector<SceneSpec> train, test;
};

// Deterministic, counter-based: the valid-spec universe is shuffled once, a
// held-out pool is carved off, and samples are drawn per-index by hashing
// (seed, counter). Train and test never share a spec.
inline Corpus gen_corpus(int n, uint64_t seed, double split = 0.9) {
    TIG_CHECK(n >= 1, "gen_corpus: n must be >= 1");
    TIG_CHECK(split > 0.0 && split < 1.0, "gen_corpus: split must be in (0,1)");
    std::vector<SceneSpec> all = valid_specs();
    const long N = long(all.size());
    for (long i = N - 1; i > 0; --i) {
        const long j = long(hash_below(seed, uint64_t(i) + 1, 0x73687566ULL, uint64_t(i)));
        std::swap(all[size_t(i)], all[size_t(j)]);
    }
    const long pool_test = std::max(1L, long(std::llround(double(N) * (1.0 - split))));
    const int n_train = int(double(n) * split + 1e-9);
    const int n_test = n - n_train;

    Corpus c;
    for (int i = 0; i < n_train; ++i) {
        const uint64_t r = hash_below(seed, uint64_t(N - pool_test), 0x747261696eULL, uint64_t(i));
        c.train.push_back(all[size_t(pool_test + long(r))]);
    }
    for (int i = 0; i < n_test; ++i) {
        const uint64_t r = hash_below(seed, uint64_t(pool_test), 0x74657374ULL, uint64_t(i));
        c.test.push_back(all[size_t(r)]);
    }
    return c;
}

// ---------------------------------------------------------------------------
// attribute oracle

namespace detail {

inline int nearest_color_index(float r, float g, float b, bool backgrounds) {
    const int n = backgrounds ? n_backgrounds : n_colors;
    int best = 0;
    float best_d = 1e30f;
    for (int i = 0; i < n; ++i) {
        const NamedColor& c = backgrounds ? background_color(i) : shape_color(i);
        const float dr = r - u8_to_unit(c.r), dg = g - u8_to_unit(c.g), db = b - u8_to_unit(c.b);
        const float d = dr * dr + dg * dg + db * db;
        if (d < best_d) best_d = d, best = i;
    }
    return best;
}

inline std::vector<uint8_t> ideal_mask(ShapeKind shape, SizeKind size, PosKind pos, int res) {
    int cx, cy;
    position_center(pos, cx, cy);
    std::vector<uint8_t> m(size_t(res) * res);
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) m[size_t(y) * res + x] = covers(shape, size, cx, cy, x, y) ? 1 : 0;
    return m;
}

}  // namespace detail

// img (3, res, res); nullopt when no foreground is found
inline std::optional<SceneSpec> oracle_attributes(const Array<float>& img) {
    TIG_CHECK(img.shape.size() == 3 && img.shape[0] == 3 && img.shape[1] == img.shape[2],
              "oracle: expected a (3, r, r) image");
    const int res = img.shape[1];
    const long plane = long(res) * res;
    auto px = [&](int ch, int y, int x) { return img[ch * plane + long(y) * res + x]; };

    SceneSpec spec;
    {
        float r = 0, g = 0, b = 0;
        const int corners[4][2] = {{0, 0}, {0, res - 1}, {res - 1, 0}, {res - 1, res - 1}};
        for (auto& c : corners) r += px(0, c[0], c[1]), g += px(1, c[0], c[1]), b += px(2, c[0], c[1]);
        spec.background = detail::nearest_color_index(r / 4, g / 4, b / 4, true);
    }
    const NamedColor& bg = background_color(spec.background);
    const float br = u8_to_unit(bg.r), bgc = u8_to_unit(bg.g), bb = u8_to_unit(bg.b);

    std::vector<uint8_t> mask(size_t(plane), 0);
    long area = 0;
    double sum_r = 0, sum_g = 0, sum_b = 0, sum_x = 0, sum_y = 0;
    for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) {
            const float dr = px(0, y, x) - br, dg = px(1, y, x) - bgc, db = px(2, y, x) - bb;
            if (dr * dr + dg * dg + db * db > 0.25f) {
                mask[size_t(y) * res + x] = 1;
                ++area;
                sum_r += px(0, y, x), sum_g += px(1, y, x), sum_b += px(2, y, x);
                sum_x += x + 0.5, sum_y += y + 0.5;
            }
        }
    if (area == 0) return std::nullopt;

    spec.color = detail::nearest_color_index(float(sum_r / area), float(sum_g / area),
                                             float(sum_b / area), false);
    const double cx = sum_x / area, cy = sum_y / area;
    const double mid = res / 2.0, rad = res / 8.0;
    const double dx = cx - mid, dy = cy - mid;
    if (dx * dx + dy * dy <= rad * rad)
        spec.position = PosKind::center;
    else if (cy < mid)
        spec.position = dx < 0 ? PosKind::top_left : PosKind::top_right;
    else
        spec.position = dx < 0 ? PosKind::bottom_left : PosKind::bottom_right;

    // shape by normalized overlap with the ideal masks at either size, then
    // size by the area midpoint of that shape's ideals
    double best = -1;
    for (int sh = 0; sh < n_shapes; ++sh)
        for (int si = 0; si < n_sizes; ++si) {
            auto tmpl = detail::ideal_mask(ShapeKind(sh), SizeKind(si), spec.position, res);
            long inter = 0, tarea = 0;
            for (long i = 0; i < plane; ++i) {
                tarea += tmpl[size_t(i)];
                inter += long(tmpl[size_t(i)]) & mask[size_t(i)];
            }
            const double score = double(inter) / std::sqrt(double(area) * double(tarea));
            if (score > best) best = score, spec.shape = ShapeKind(sh);
        }
    long area_small = 0, area_large = 0;
    for (uint8_t v : detail::ideal_mask(spec.shape, SizeKind::small, spec.position, res)) area_small += v;
    for (uint8_t v : detail::ideal_mask(spec.shape, SizeKind::large, spec.position, res)) area_large += v;
    spec.size = 2 * area > area_small + area_large ? SizeKind::large : SizeKind::small;
    return spec;
}

// ---------------------------------------------------------------------------
// PPM (P6) i/o and the on-disk corpus layout

inline void write_ppm(const std::string& path, const Array<float>& img) {
    TIG_CHECK(img.shape.size() == 3 && img.shape[0] == 3, "write_ppm: expected (3, h, w)");
    const int h = img.shape[1], w = img.shape[2];
    std::ofstream f(path, std::ios::binary);
    TIG_CHECK(f.good(), "write_ppm: cannot write " + path);
    f << "P6\n" << w << " " << h << "\n255\n";
    const long plane = long(h) * w;
    for (long i = 0; i < plane; ++i)
        for (int ch = 0; ch < 3; ++ch) f.put(char(unit_to_u8(img[ch * plane + i])));
}

inline Array<float> read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    TIG_CHECK(f.good(), "read_ppm: cannot read " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    TIG_CHECK(magic == "P6" && maxval == 255 && w > 0 && h > 0, "read_ppm: unsupported header in " + path);
    f.get();
    Array<float> img({3, h, w});
    const long plane = long(h) * w;
    for (long i = 0; i < plane; ++i)
        for (int ch = 0; ch < 3; ++ch) {
            const int v = f.get();
            TIG_CHECK(v >= 0, "read_ppm: truncated file " + path);
            img[ch * plane + i] = u8_to_unit(uint8_t(v));
        }
    return img;
}

inline std::string spec_csv_row(const SceneSpec& s) {
    return std::string(shape_name(s.shape)) + "," + shape_color(s.color).name + "," +
           size_name(s.size) + "," + position_name(s.position) + "," +
           background_color(s.background).name;
}

// writes <dir>/{train,test}/img_NNNNN.ppm plus captions.tsv and specs.csv
inline void save_corpus(const std::string& dir, const Corpus& corpus, int res = 64) {
    namespace fs = std::filesystem;
    for (const char* part : {"train", "test"}) {
        const auto& specs = std::string(part) == "train" ? corpus.train : corpus.test;
        const fs::path sub = fs::path(dir) / part;
        fs::create_directories(sub);
        std::ofstream caps(sub / "captions.tsv");
        std::ofstream csv(sub / "specs.csv");
        TIG_CHECK(caps.good() && csv.good(), "save_corpus: cannot write under " + sub.string());
        csv << "shape,color,size,position,background\n";
        for (size_t i = 0; i < specs.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof name, "img_%05zu.ppm", i);
            write_ppm((sub / name).string(), render_scene(specs[i], res));
            caps << name << "\t" << caption_of(specs[i]) << "\n";
            csv << spec_csv_row(specs[i]) << "\n";
        }
    }
}

struct DiskCorpus {
    std::vector<std::string> files;
    std::vector<std::string> captions;
};

inline DiskCorpus load_captions(const std::string& part_dir) {
    std::ifstream f(std::filesystem::path(part_dir) / "captions.tsv");
    TIG_CHECK(f.good(), "load_captions: cannot read captions.tsv in " + part_dir);
    DiskCorpus out;
    std::string line;
    while (std::getline(f, line)) {
        const auto tab = line.find('\t');
        TIG_CHECK(tab != std::string::npos, "load_captions: malformed line: " + line);
        out.files.push_back((std::filesystem::path(part_dir) / line.substr(0, tab)).string());
        out.captions.push_back(line.substr(tab + 1));
    }
    return out;
}

}  // namespace tig
