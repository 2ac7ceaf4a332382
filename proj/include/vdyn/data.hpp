#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vdyn/image_io.hpp"
#include "vdyn/tensor.hpp"

namespace vdyn {

enum class ShapeKind : uint8_t { kCircle = 0, kSquare = 1, kTriangle = 2 };
enum class TextureKind : uint8_t { kNone = 0, kHStripe = 1, kVStripe = 2, kChecker = 3 };

struct ShapeSpec {
    ShapeKind kind = ShapeKind::kCircle;
    double cx = 0, cy = 0;  // center in frame_a, pixels
    double size = 0;        // circle diameter / square side / triangle side
    float color[3] = {0, 0, 0};
    TextureKind texture = TextureKind::kNone;
    int z_order = 0;  // higher draws on top
    double dx = 0, dy = 0;
};

/// Run-length encoded pixel mask over row-major indices.
struct RleMask {
    std::vector<std::pair<uint32_t, uint32_t>> runs;  // (start, length)

    static RleMask encode(const std::vector<uint8_t>& bits);
    std::vector<uint8_t> decode(int64_t n) const;
    int64_t count() const;
};

/// Two consecutive frames plus the generator's ground-truth metadata.
struct ScenePair {
    ImageU8 frame_a, frame_b;
    std::vector<ShapeSpec> objects;
    std::vector<RleMask> masks;  // per object: amodal footprint in frame_a

    int image_size() const { return frame_a.width; }
    /// Visible (z-resolved) mask of one object in frame_a.
    std::vector<uint8_t> visible_mask(int obj) const;
    /// Per-pixel ground-truth flow (dx then dy plane), from the topmost object.
    std::vector<float> flow_field() const;
    /// Per-pixel draw priority in frame_a: index into objects of the topmost
    /// covering object, -1 for background.
    std::vector<int8_t> top_object_a() const;
    std::vector<int8_t> top_object_b() const;
};

struct ShapesConfig {
    int image_size = 64;
    bool texture = false;
    double motion_std = 2.0;
    double motion_clip = 4.0;
    double size_min_frac = 0.10;
    double size_max_frac = 0.20;
    double min_color_dist = 0.2;
};

/// Anti-aliased coverage (0..1) of one shape over the full frame, optionally
/// at its frame_b position. 4x4 supersampling.
std::vector<float> shape_coverage(const ShapeSpec& spec, int image_size, bool moved);

/// Renders a set of shapes back-to-front over a white background, at their
/// frame_a positions (moved=false) or displaced by their motions (moved=true).
ImageU8 render_objects(const std::vector<ShapeSpec>& objects, int image_size, bool moved);

/// One scene: exactly one circle, one square, one triangle with class-legal
/// motions (circle vertical, square horizontal, triangle diagonal with the
/// vertical component opposite the circle's). Deterministic in (seed, index).
ScenePair gen_scene_pair(uint64_t seed, uint64_t index, const ShapesConfig& cfg);

struct ShapesDataset {
    ShapesConfig config;
    uint64_t seed = 0;
    std::vector<ScenePair> pairs;
};

ShapesDataset gen_shapes(uint64_t seed, int n_pairs, int image_size, bool texture);

void dataset_write(const ShapesDataset& ds, const std::string& path);
ShapesDataset dataset_read(const std::string& path);

struct ToySample {
    int label = 0;  // 0 circle, 1 square
    double vx = 0, vy = 0;
};

/// Toy world: labels uniform; circle motion N((0,0), std diag(0.2, 1)),
/// square N((0,0), std diag(1, 0.2)).
std::vector<ToySample> gen_toyworld(uint64_t seed, int64_t n);

/// Forward-warp by a per-pixel flow field. Pixels splat by priority (higher
/// wins); uncovered pixels keep the background color. Bilinear mode spreads
/// each source pixel over its four destination neighbours.
ImageU8 warp_by_flow(const ImageU8& src, const std::vector<float>& flow,
                     const std::vector<int8_t>& priority, bool bilinear,
                     const float background[3]);

/// Image <-> tensor helpers ([3,S,S] float in [0,1]).
Tensor<float> image_to_tensor(const ImageU8& img);
ImageU8 tensor_to_image(const Tensor<float>& t, int batch_index = 0);
/// v = (b - a) / 255 as float in [-1, 1].
Tensor<float> difference_image(const ImageU8& a, const ImageU8& b);

}  // namespace vdyn
