// Procedural image-caption universe: 4x4 scene grid of colored shapes,
// deterministic rendering, short/noisy and detailed captions, and manifest
// IO with exact ground truth.
#pragma once

#include <array>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tinyvlm/tensor.hpp"

namespace tinyvlm {

namespace grammar {
inline constexpr int kGridSize = 4;
inline constexpr int kMaxObjects = 6;
inline constexpr std::array<const char*, 3> kShapes = {"circle", "square",
                                                       "triangle"};
inline constexpr std::array<const char*, 8> kColors = {
    "red", "blue", "green", "yellow", "purple", "pink", "brown", "gray"};
inline constexpr std::array<const char*, 4> kRowNames = {"top", "upper",
                                                         "lower", "bottom"};
inline constexpr std::array<const char*, 4> kColNames = {
    "left", "center-left", "center-right", "right"};
inline constexpr std::array<const char*, 6> kCountWords = {
    "one", "two", "three", "four", "five", "six"};
// "top left" ... "bottom right"
std::string cell_name(int row, int col);
}  // namespace grammar

struct SceneObject {
    int shape;  // index into grammar::kShapes
    int color;  // index into grammar::kColors
    int row;
    int col;
    auto operator<=>(const SceneObject&) const = default;
};

struct SceneSpec {
    std::vector<SceneObject> objects;
    std::uint64_t seed = 0;
};

struct ImageSample {
    SceneSpec scene;
    // [32,32,3] in [0,1]; every channel is an exact multiple of 1/255 so a
    // PPM round-trip is bit-exact
    TensorPtr pixels;
};

struct CaptionPair {
    std::string image_id;
    std::string text;
    std::string kind;  // "short_noisy" or "detailed"
    std::vector<SceneObject> ground_truth;
};

SceneSpec generate_scene(std::uint64_t seed);
ImageSample render(const SceneSpec& scene);

CaptionPair caption_short(const SceneSpec& scene, double p_noise,
                          std::uint64_t seed);
CaptionPair caption_detailed(const SceneSpec& scene);

// Inverse parse of a detailed caption back to (shape,color,cell) triples.
// The oracle backbone for hallucination and coverage checks.
std::vector<SceneObject> parse_caption_objects(const std::string& text);

// PPM (P6, 8-bit) image io
void write_ppm(const std::string& path, const TensorPtr& pixels);
TensorPtr read_ppm(const std::string& path);

struct ManifestRecord {
    std::string image_id;
    std::string image_path;
    std::string kind;
    std::string text;
    std::vector<SceneObject> ground_truth;
};

std::string format_ground_truth(const std::vector<SceneObject>& objs);
std::vector<SceneObject> parse_ground_truth(const std::string& field);

void write_manifest(const std::string& path,
                    const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> read_manifest(const std::string& path);

// Generates n scenes/images/captions under out_dir and writes a manifest.
// kind: "short_noisy" or "detailed".
std::vector<ManifestRecord> build_dataset(const std::string& out_dir,
                                          const std::string& manifest_path,
                                          int n, const std::string& kind,
                                          double p_noise, std::uint64_t seed);

}  // namespace tinyvlm
