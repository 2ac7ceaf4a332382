#include "vdyn/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

#include <json.hpp>

#include "vdyn/rng.hpp"
#include "vdyn/threading.hpp"

namespace vdyn {

namespace {

constexpr double kTexturePeriod = 3.0;
constexpr float kTextureDim = 0.35f;
constexpr float kBackground[3] = {1.f, 1.f, 1.f};

// 4x4 supersampling offsets on a rotated grid (rotation atan(1/2)), so
// axis-aligned edges see 16 distinct sample phases instead of 4; rendered
// sub-pixel positions are then accurate to ~1/16 px instead of 1/4 px.
struct SampleGrid {
    double ox[16];
    double oy[16];
    SampleGrid() {
        const double c = 2.0 / std::sqrt(5.0);
        const double s = 1.0 / std::sqrt(5.0);
        int k = 0;
        for (int i = 0; i < 4; ++i) {
            for (int j = 0; j < 4; ++j, ++k) {
                const double x = (j + 0.5) / 4.0 - 0.5;
                const double y = (i + 0.5) / 4.0 - 0.5;
                ox[k] = 0.5 + c * x - s * y;
                oy[k] = 0.5 + s * x + c * y;
            }
        }
    }
};
const SampleGrid kGrid;

bool point_in_shape(const ShapeSpec& s, double px, double py, double cx, double cy) {
    const double x = px - cx;
    const double y = py - cy;
    switch (s.kind) {
        case ShapeKind::kCircle: {
            const double r = s.size / 2.0;
            return x * x + y * y <= r * r;
        }
        case ShapeKind::kSquare: {
            const double h = s.size / 2.0;
            return std::abs(x) <= h && std::abs(y) <= h;
        }
        case ShapeKind::kTriangle: {
            // equilateral, apex up (image y grows downward)
            const double R = s.size / std::sqrt(3.0);
            const double x0 = 0, y0 = -R;
            const double x1 = -s.size / 2.0, y1 = R / 2.0;
            const double x2 = s.size / 2.0, y2 = R / 2.0;
            auto side = [&](double ax, double ay, double bx, double by) {
                return (bx - ax) * (y - ay) - (by - ay) * (x - ax);
            };
            const double d0 = side(x0, y0, x1, y1);
            const double d1 = side(x1, y1, x2, y2);
            const double d2 = side(x2, y2, x0, y0);
            const bool has_neg = (d0 < 0) || (d1 < 0) || (d2 < 0);
            const bool has_pos = (d0 > 0) || (d1 > 0) || (d2 > 0);
            return !(has_neg && has_pos);
        }
    }
    return false;
}

double shape_half_extent(const ShapeSpec& s) {
    if (s.kind == ShapeKind::kTriangle) return s.size / std::sqrt(3.0);
    return s.size / 2.0;
}

// Texture is anchored to the shape center so it travels with the object.
void shape_color_at(const ShapeSpec& s, double px, double py, double cx, double cy, float out[3]) {
    int parity = 0;
    switch (s.texture) {
        case TextureKind::kNone:
            out[0] = s.color[0];
            out[1] = s.color[1];
            out[2] = s.color[2];
            return;
        case TextureKind::kHStripe:
            parity = static_cast<int>(std::floor((py - cy) / kTexturePeriod)) & 1;
            break;
        case TextureKind::kVStripe:
            parity = static_cast<int>(std::floor((px - cx) / kTexturePeriod)) & 1;
            break;
        case TextureKind::kChecker:
            parity = (static_cast<int>(std::floor((px - cx) / kTexturePeriod)) ^
                      static_cast<int>(std::floor((py - cy) / kTexturePeriod))) &
                     1;
            break;
    }
    const float scale = parity ? kTextureDim : 1.f;
    out[0] = s.color[0] * scale;
    out[1] = s.color[1] * scale;
    out[2] = s.color[2] * scale;
}

// Renders shapes back-to-front with 4x4 supersampled coverage compositing.
ImageU8 render_scene(const std::vector<ShapeSpec>& shapes, int size, bool moved) {
    std::vector<float> canvas(static_cast<size_t>(size) * size * 3);
    for (int i = 0; i < size * size; ++i) {
        canvas[3 * i] = kBackground[0];
        canvas[3 * i + 1] = kBackground[1];
        canvas[3 * i + 2] = kBackground[2];
    }
    std::vector<const ShapeSpec*> order;
    for (const auto& s : shapes) order.push_back(&s);
    std::sort(order.begin(), order.end(),
              [](const ShapeSpec* a, const ShapeSpec* b) { return a->z_order < b->z_order; });

    for (const ShapeSpec* s : order) {
        const double cx = moved ? s->cx + s->dx : s->cx;
        const double cy = moved ? s->cy + s->dy : s->cy;
        const double ext = shape_half_extent(*s) + 1.5;
        const int x0 = std::max(0, static_cast<int>(std::floor(cx - ext)));
        const int x1 = std::min(size - 1, static_cast<int>(std::ceil(cx + ext)));
        const int y0 = std::max(0, static_cast<int>(std::floor(cy - ext)));
        const int y1 = std::min(size - 1, static_cast<int>(std::ceil(cy + ext)));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                float rgb_acc[3] = {0, 0, 0};
                int hits = 0;
                for (int sub = 0; sub < 16; ++sub) {
                    const double px = x + kGrid.ox[sub];
                    const double py = y + kGrid.oy[sub];
                    if (point_in_shape(*s, px, py, cx, cy)) {
                        float c[3];
                        shape_color_at(*s, px, py, cx, cy, c);
                        rgb_acc[0] += c[0];
                        rgb_acc[1] += c[1];
                        rgb_acc[2] += c[2];
                        ++hits;
                    }
                }
                if (hits == 0) continue;
                const float cover = hits / 16.f;
                float* dst = &canvas[3 * (static_cast<size_t>(y) * size + x)];
                for (int ch = 0; ch < 3; ++ch) {
                    dst[ch] = rgb_acc[ch] / 16.f + (1.f - cover) * dst[ch];
                }
            }
        }
    }
    ImageU8 img(size, size);
    for (size_t i = 0; i < canvas.size(); ++i) {
        img.rgb[i] = static_cast<uint8_t>(std::lround(255.0 * std::clamp(canvas[i], 0.f, 1.f)));
    }
    return img;
}

}  // namespace

ImageU8 render_objects(const std::vector<ShapeSpec>& objects, int image_size, bool moved) {
    return render_scene(objects, image_size, moved);
}

std::vector<float> shape_coverage(const ShapeSpec& spec, int image_size, bool moved) {
    std::vector<float> cover(static_cast<size_t>(image_size) * image_size, 0.f);
    const double cx = moved ? spec.cx + spec.dx : spec.cx;
    const double cy = moved ? spec.cy + spec.dy : spec.cy;
    const double ext = shape_half_extent(spec) + 1.5;
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - ext)));
    const int x1 = std::min(image_size - 1, static_cast<int>(std::ceil(cx + ext)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - ext)));
    const int y1 = std::min(image_size - 1, static_cast<int>(std::ceil(cy + ext)));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            int hits = 0;
            for (int sub = 0; sub < 16; ++sub)
                if (point_in_shape(spec, x + kGrid.ox[sub], y + kGrid.oy[sub], cx, cy)) ++hits;
            cover[static_cast<size_t>(y) * image_size + x] = hits / 16.f;
        }
    }
    return cover;
}

RleMask RleMask::encode(const std::vector<uint8_t>& bits) {
    RleMask m;
    uint32_t i = 0;
    const uint32_t n = static_cast<uint32_t>(bits.size());
    while (i < n) {
        if (!bits[i]) {
            ++i;
            continue;
        }
        uint32_t start = i;
        while (i < n && bits[i]) ++i;
        m.runs.emplace_back(start, i - start);
    }
    return m;
}

std::vector<uint8_t> RleMask::decode(int64_t n) const {
    std::vector<uint8_t> bits(static_cast<size_t>(n), 0);
    for (const auto& [start, len] : runs) {
        require(int64_t(start) + len <= n, "RleMask: run exceeds mask size");
        std::fill(bits.begin() + start, bits.begin() + start + len, uint8_t(1));
    }
    return bits;
}

int64_t RleMask::count() const {
    int64_t c = 0;
    for (const auto& r : runs) c += r.second;
    return c;
}

std::vector<int8_t> ScenePair::top_object_a() const {
    const int s = image_size();
    std::vector<int8_t> top(static_cast<size_t>(s) * s, -1);
    std::vector<int> order(objects.size());
    for (size_t i = 0; i < objects.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return objects[a].z_order < objects[b].z_order; });
    for (int idx : order) {
        auto bits = masks[static_cast<size_t>(idx)].decode(int64_t(s) * s);
        for (size_t p = 0; p < bits.size(); ++p)
            if (bits[p]) top[p] = static_cast<int8_t>(idx);
    }
    return top;
}

std::vector<int8_t> ScenePair::top_object_b() const {
    const int s = image_size();
    std::vector<int8_t> top(static_cast<size_t>(s) * s, -1);
    std::vector<int> order(objects.size());
    for (size_t i = 0; i < objects.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return objects[a].z_order < objects[b].z_order; });
    for (int idx : order) {
        auto cover = shape_coverage(objects[static_cast<size_t>(idx)], s, true);
        for (size_t p = 0; p < cover.size(); ++p)
            if (cover[p] > 0.5f) top[p] = static_cast<int8_t>(idx);
    }
    return top;
}

std::vector<uint8_t> ScenePair::visible_mask(int obj) const {
    const int s = image_size();
    auto bits = masks[static_cast<size_t>(obj)].decode(int64_t(s) * s);
    for (size_t j = 0; j < objects.size(); ++j) {
        if (objects[j].z_order <= objects[static_cast<size_t>(obj)].z_order) continue;
        auto above = masks[j].decode(int64_t(s) * s);
        for (size_t p = 0; p < bits.size(); ++p)
            if (above[p]) bits[p] = 0;
    }
    return bits;
}

std::vector<float> ScenePair::flow_field() const {
    const int s = image_size();
    std::vector<float> flow(2 * static_cast<size_t>(s) * s, 0.f);
    auto top = top_object_a();
    for (int64_t p = 0; p < int64_t(s) * s; ++p) {
        if (top[static_cast<size_t>(p)] >= 0) {
            const auto& o = objects[static_cast<size_t>(top[static_cast<size_t>(p)])];
            flow[static_cast<size_t>(p)] = static_cast<float>(o.dx);
            flow[static_cast<size_t>(s) * s + p] = static_cast<float>(o.dy);
        }
    }
    return flow;
}

ScenePair gen_scene_pair(uint64_t seed, uint64_t index, const ShapesConfig& cfg) {
    require(cfg.image_size >= 32, "gen_shapes: image_size must be at least 32");
    Rng rng(seed, index * 2 + 1);
    const int S = cfg.image_size;

    // saturated colors with pairwise distance >= min_color_dist
    auto hue_to_rgb = [](double h, float out[3]) {
        const double x = 1.0 - std::abs(std::fmod(h / 60.0, 2.0) - 1.0);
        double r = 0, g = 0, b = 0;
        if (h < 60) {
            r = 1, g = x;
        } else if (h < 120) {
            r = x, g = 1;
        } else if (h < 180) {
            g = 1, b = x;
        } else if (h < 240) {
            g = x, b = 1;
        } else if (h < 300) {
            r = x, b = 1;
        } else {
            r = 1, b = x;
        }
        out[0] = static_cast<float>(r);
        out[1] = static_cast<float>(g);
        out[2] = static_cast<float>(b);
    };
    float colors[3][3];
    for (int attempt = 0;; ++attempt) {
        if (attempt > 100) {
            throw std::runtime_error("gen_shapes: could not sample distinct colors (pairwise distance)");
        }
        for (auto& color : colors) hue_to_rgb(rng.uniform(0.0, 360.0), color);
        bool ok = true;
        for (int i = 0; i < 3 && ok; ++i)
            for (int j = i + 1; j < 3; ++j) {
                double d2 = 0;
                for (int c = 0; c < 3; ++c) {
                    double d = double(colors[i][c]) - colors[j][c];
                    d2 += d * d;
                }
                if (std::sqrt(d2) < cfg.min_color_dist) {
                    ok = false;
                    break;
                }
            }
        if (ok) break;
    }

    // class-legal motions
    const double m_c = rng.truncated_normal(0.0, cfg.motion_std, -cfg.motion_clip, cfg.motion_clip);
    const double m_s = rng.truncated_normal(0.0, cfg.motion_std, -cfg.motion_clip, cfg.motion_clip);
    const double tri_sign = rng.uniform() < 0.5 ? -1.0 : 1.0;

    ScenePair pair;
    pair.objects.resize(3);
    ShapeSpec& circle = pair.objects[0];
    ShapeSpec& square = pair.objects[1];
    ShapeSpec& triangle = pair.objects[2];
    circle.kind = ShapeKind::kCircle;
    square.kind = ShapeKind::kSquare;
    triangle.kind = ShapeKind::kTriangle;
    circle.dx = 0;
    circle.dy = m_c;
    square.dx = m_s;
    square.dy = 0;
    triangle.dx = tri_sign * std::abs(m_c);
    triangle.dy = -m_c;
    if (cfg.texture) {
        circle.texture = TextureKind::kChecker;
        square.texture = TextureKind::kHStripe;
        triangle.texture = TextureKind::kVStripe;
    }

    // random z-order permutation
    int z[3] = {0, 1, 2};
    for (int i = 2; i > 0; --i) std::swap(z[i], z[static_cast<int>(rng.uniform_index(uint64_t(i) + 1))]);
    for (int i = 0; i < 3; ++i) {
        auto& o = pair.objects[static_cast<size_t>(i)];
        o.z_order = z[i];
        for (int c = 0; c < 3; ++c) o.color[c] = colors[i][c];
        o.size = rng.uniform(cfg.size_min_frac * S, cfg.size_max_frac * S);

        // fully inside the frame before and after motion
        const double ext = shape_half_extent(o) + 1.0;
        const double lo_x = ext + std::max(0.0, -o.dx);
        const double hi_x = S - ext - std::max(0.0, o.dx);
        const double lo_y = ext + std::max(0.0, -o.dy);
        const double hi_y = S - ext - std::max(0.0, o.dy);
        int attempt = 0;
        for (;; ++attempt) {
            if (attempt > 100) {
                throw std::runtime_error(
                    "gen_shapes: placement unsatisfiable (shape must stay inside the frame before and "
                    "after motion)");
            }
            if (lo_x >= hi_x || lo_y >= hi_y) {
                ++attempt;
                continue;
            }
            o.cx = rng.uniform(lo_x, hi_x);
            o.cy = rng.uniform(lo_y, hi_y);
            break;
        }
    }

    pair.frame_a = render_scene(pair.objects, S, false);
    pair.frame_b = render_scene(pair.objects, S, true);
    pair.masks.resize(3);
    for (int i = 0; i < 3; ++i) {
        auto cover = shape_coverage(pair.objects[static_cast<size_t>(i)], S, false);
        std::vector<uint8_t> bits(cover.size());
        for (size_t p = 0; p < cover.size(); ++p) bits[p] = cover[p] > 0.5f ? 1 : 0;
        pair.masks[static_cast<size_t>(i)] = RleMask::encode(bits);
    }
    return pair;
}

ShapesDataset gen_shapes(uint64_t seed, int n_pairs, int image_size, bool texture) {
    require(n_pairs >= 0, "gen_shapes: pair count must be non-negative");
    ShapesDataset ds;
    ds.config.image_size = image_size;
    ds.config.texture = texture;
    ds.seed = seed;
    ds.pairs.resize(static_cast<size_t>(n_pairs));
    parallel_for(n_pairs, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            ds.pairs[static_cast<size_t>(i)] = gen_scene_pair(seed, static_cast<uint64_t>(i), ds.config);
        }
    });
    return ds;
}

namespace {

constexpr char kDatasetMagic[4] = {'V', 'D', 'Y', 'N'};
constexpr uint32_t kDatasetVersion = 1;

void put_raw(std::vector<uint8_t>& out, const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    out.insert(out.end(), b, b + n);
}

template <typename T>
void put_le(std::vector<uint8_t>& out, T v) {
    put_raw(out, &v, sizeof(T));  // little-endian host assumed, asserted below
}

struct Reader {
    FILE* f;
    std::string path;
    void read(void* p, size_t n) {
        if (std::fread(p, 1, n, f) != n) {
            throw std::runtime_error("dataset_read: truncated file " + path);
        }
    }
    template <typename T>
    T get() {
        T v;
        read(&v, sizeof(T));
        return v;
    }
};

}  // namespace

void dataset_write(const ShapesDataset& ds, const std::string& path) {
    static_assert(std::endian::native == std::endian::little, "little-endian file format");
    nlohmann::json header = {
        {"n_pairs", ds.pairs.size()},
        {"image_size", ds.config.image_size},
        {"texture", ds.config.texture},
        {"seed", ds.seed},
        {"generator",
         {{"motion_std", ds.config.motion_std},
          {"motion_clip", ds.config.motion_clip},
          {"size_min_frac", ds.config.size_min_frac},
          {"size_max_frac", ds.config.size_max_frac},
          {"min_color_dist", ds.config.min_color_dist},
          {"sigma_interpretation", "stddev"}}},
    };
    const std::string hs = header.dump();

    std::vector<uint8_t> buf;
    put_raw(buf, kDatasetMagic, 4);
    put_le<uint32_t>(buf, kDatasetVersion);
    put_le<uint64_t>(buf, hs.size());
    put_raw(buf, hs.data(), hs.size());

    FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("dataset_write: cannot open " + path);
    fwrite(buf.data(), 1, buf.size(), f);
    for (const auto& pair : ds.pairs) {
        std::vector<uint8_t> rec;
        put_raw(rec, pair.frame_a.rgb.data(), pair.frame_a.rgb.size());
        put_raw(rec, pair.frame_b.rgb.data(), pair.frame_b.rgb.size());
        put_le<uint32_t>(rec, static_cast<uint32_t>(pair.objects.size()));
        for (size_t i = 0; i < pair.objects.size(); ++i) {
            const auto& o = pair.objects[i];
            put_le<uint8_t>(rec, static_cast<uint8_t>(o.kind));
            put_le<uint8_t>(rec, static_cast<uint8_t>(o.texture));
            put_le<int32_t>(rec, o.z_order);
            put_le<double>(rec, o.cx);
            put_le<double>(rec, o.cy);
            put_le<double>(rec, o.size);
            put_le<float>(rec, o.color[0]);
            put_le<float>(rec, o.color[1]);
            put_le<float>(rec, o.color[2]);
            put_le<double>(rec, o.dx);
            put_le<double>(rec, o.dy);
            const auto& runs = pair.masks[i].runs;
            put_le<uint32_t>(rec, static_cast<uint32_t>(runs.size()));
            for (const auto& [start, len] : runs) {
                put_le<uint32_t>(rec, start);
                put_le<uint32_t>(rec, len);
            }
        }
        fwrite(rec.data(), 1, rec.size(), f);
    }
    std::fclose(f);
}

ShapesDataset dataset_read(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("dataset_read: cannot open " + path);
    Reader r{f, path};
    try {
        char magic[4];
        r.read(magic, 4);
        if (std::memcmp(magic, kDatasetMagic, 4) != 0) {
            throw std::runtime_error("dataset_read: bad magic in " + path);
        }
        const auto version = r.get<uint32_t>();
        if (version != kDatasetVersion) {
            throw std::runtime_error("dataset_read: unsupported version " + std::to_string(version));
        }
        const auto hlen = r.get<uint64_t>();
        std::string hs(hlen, '\0');
        r.read(hs.data(), hlen);
        nlohmann::json header = nlohmann::json::parse(hs);

        ShapesDataset ds;
        ds.config.image_size = header.at("image_size").get<int>();
        ds.config.texture = header.at("texture").get<bool>();
        ds.seed = header.at("seed").get<uint64_t>();
        const auto& gen = header.at("generator");
        ds.config.motion_std = gen.at("motion_std").get<double>();
        ds.config.motion_clip = gen.at("motion_clip").get<double>();
        ds.config.size_min_frac = gen.at("size_min_frac").get<double>();
        ds.config.size_max_frac = gen.at("size_max_frac").get<double>();
        ds.config.min_color_dist = gen.at("min_color_dist").get<double>();
        const auto n = header.at("n_pairs").get<uint64_t>();
        const int S = ds.config.image_size;

        ds.pairs.resize(n);
        for (uint64_t p = 0; p < n; ++p) {
            ScenePair& pair = ds.pairs[p];
            pair.frame_a = ImageU8(S, S);
            pair.frame_b = ImageU8(S, S);
            r.read(pair.frame_a.rgb.data(), pair.frame_a.rgb.size());
            r.read(pair.frame_b.rgb.data(), pair.frame_b.rgb.size());
            const auto n_obj = r.get<uint32_t>();
            if (n_obj > 64) throw std::runtime_error("dataset_read: implausible object count");
            pair.objects.resize(n_obj);
            pair.masks.resize(n_obj);
            for (uint32_t i = 0; i < n_obj; ++i) {
                auto& o = pair.objects[i];
                o.kind = static_cast<ShapeKind>(r.get<uint8_t>());
                o.texture = static_cast<TextureKind>(r.get<uint8_t>());
                o.z_order = r.get<int32_t>();
                o.cx = r.get<double>();
                o.cy = r.get<double>();
                o.size = r.get<double>();
                o.color[0] = r.get<float>();
                o.color[1] = r.get<float>();
                o.color[2] = r.get<float>();
                o.dx = r.get<double>();
                o.dy = r.get<double>();
                const auto n_runs = r.get<uint32_t>();
                pair.masks[i].runs.resize(n_runs);
                for (uint32_t q = 0; q < n_runs; ++q) {
                    const auto start = r.get<uint32_t>();
                    const auto len = r.get<uint32_t>();
                    pair.masks[i].runs[q] = {start, len};
                }
            }
        }
        std::fclose(f);
        return ds;
    } catch (...) {
        std::fclose(f);
        throw;
    }
}

std::vector<ToySample> gen_toyworld(uint64_t seed, int64_t n) {
    require(n >= 1, "gen_toyworld: n must be at least 1");
    std::vector<ToySample> out(static_cast<size_t>(n));
    parallel_for(n, [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            Rng rng(seed, 0x70000000ULL + static_cast<uint64_t>(i));
            ToySample& s = out[static_cast<size_t>(i)];
            s.label = rng.uniform() < 0.5 ? 0 : 1;
            if (s.label == 0) {
                s.vx = rng.normal(0.0, 0.2);
                s.vy = rng.normal(0.0, 1.0);
            } else {
                s.vx = rng.normal(0.0, 1.0);
                s.vy = rng.normal(0.0, 0.2);
            }
        }
    });
    return out;
}

ImageU8 warp_by_flow(const ImageU8& src, const std::vector<float>& flow,
                     const std::vector<int8_t>& priority, bool bilinear,
                     const float background[3]) {
    const int S = src.width;
    require(src.height == S, "warp_by_flow: expected a square image");
    require(static_cast<int64_t>(flow.size()) == 2 * int64_t(S) * S, "warp_by_flow: flow size mismatch");
    require(static_cast<int64_t>(priority.size()) == int64_t(S) * S, "warp_by_flow: priority size mismatch");

    ImageU8 out(S, S);
    for (int p = 0; p < S * S; ++p) {
        out.rgb[3 * p] = static_cast<uint8_t>(std::lround(255 * background[0]));
        out.rgb[3 * p + 1] = static_cast<uint8_t>(std::lround(255 * background[1]));
        out.rgb[3 * p + 2] = static_cast<uint8_t>(std::lround(255 * background[2]));
    }

    int8_t max_pri = -1;
    for (int8_t v : priority) max_pri = std::max(max_pri, v);

    std::vector<float> wsum(static_cast<size_t>(S) * S);
    std::vector<float> csum(static_cast<size_t>(S) * S * 3);
    for (int8_t level = -1; level <= max_pri; ++level) {
        std::fill(wsum.begin(), wsum.end(), 0.f);
        std::fill(csum.begin(), csum.end(), 0.f);
        bool any = false;
        for (int y = 0; y < S; ++y) {
            for (int x = 0; x < S; ++x) {
                const size_t p = static_cast<size_t>(y) * S + x;
                if (priority[p] != level) continue;
                any = true;
                const double tx = x + flow[p];
                const double ty = y + flow[static_cast<size_t>(S) * S + p];
                const uint8_t* c = src.px(x, y);
                if (!bilinear) {
                    const int ix = static_cast<int>(std::lround(tx));
                    const int iy = static_cast<int>(std::lround(ty));
                    if (ix < 0 || ix >= S || iy < 0 || iy >= S) continue;
                    const size_t q = static_cast<size_t>(iy) * S + ix;
                    wsum[q] += 1.f;
                    for (int ch = 0; ch < 3; ++ch) csum[3 * q + ch] += c[ch] / 255.f;
                } else {
                    const int x0 = static_cast<int>(std::floor(tx));
                    const int y0 = static_cast<int>(std::floor(ty));
                    const double fx = tx - x0;
                    const double fy = ty - y0;
                    const double w4[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
                    const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
                    const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
                    for (int t = 0; t < 4; ++t) {
                        if (xs[t] < 0 || xs[t] >= S || ys[t] < 0 || ys[t] >= S || w4[t] <= 0) continue;
                        const size_t q = static_cast<size_t>(ys[t]) * S + xs[t];
                        wsum[q] += static_cast<float>(w4[t]);
                        for (int ch = 0; ch < 3; ++ch)
                            csum[3 * q + ch] += static_cast<float>(w4[t]) * c[ch] / 255.f;
                    }
                }
            }
        }
        if (!any) continue;
        for (size_t q = 0; q < wsum.size(); ++q) {
            if (wsum[q] <= 0.02f) continue;
            const float alpha = std::min(1.f, wsum[q]);
            for (int ch = 0; ch < 3; ++ch) {
                const float level_color = csum[3 * q + ch] / wsum[q];
                const float prev = out.rgb[3 * q + ch] / 255.f;
                const float blended = alpha * level_color + (1.f - alpha) * prev;
                out.rgb[3 * q + ch] = static_cast<uint8_t>(std::lround(255.f * std::clamp(blended, 0.f, 1.f)));
            }
        }
    }
    return out;
}

Tensor<float> image_to_tensor(const ImageU8& img) {
    Tensor<float> t({1, 3, img.height, img.width});
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            const uint8_t* p = img.px(x, y);
            for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = p[c] / 255.f;
        }
    return t;
}

ImageU8 tensor_to_image(const Tensor<float>& t, int batch_index) {
    const int h = t.dim(2), w = t.dim(3);
    ImageU8 img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            uint8_t* p = img.px(x, y);
            for (int c = 0; c < 3; ++c) {
                const float v = std::clamp(t.at(batch_index, c, y, x), 0.f, 1.f);
                p[c] = static_cast<uint8_t>(std::lround(255.f * v));
            }
        }
    return img;
}

Tensor<float> difference_image(const ImageU8& a, const ImageU8& b) {
    require(a.width == b.width && a.height == b.height, "difference_image: size mismatch");
    Tensor<float> t({1, 3, a.height, a.width});
    for (int y = 0; y < a.height; ++y)
        for (int x = 0; x < a.width; ++x) {
            const uint8_t* pa = a.px(x, y);
            const uint8_t* pb = b.px(x, y);
            for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = (int(pb[c]) - int(pa[c])) / 255.f;
        }
    return t;
}

}  // namespace vdyn
