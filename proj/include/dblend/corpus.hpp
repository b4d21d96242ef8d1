#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include "dblend/tensor.hpp"
#include "dblend/vocab.hpp"

namespace dblend {

// All scenes are laid out on a 32x32 canvas; smaller models see a box-filtered copy.
inline constexpr std::size_t world_size = 32;
inline constexpr std::size_t glyph_size = 9;

using Bitmap = std::array<float, glyph_size * glyph_size>;

struct Box {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open
    bool contains(double x, double y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
    double distance(double x, double y) const;
};

struct SceneSpec {
    int object = Vocabulary::first_object;
    int background = Vocabulary::first_background;
    int position = Vocabulary::first_position;
    std::optional<Bitmap> sprite;  // required iff object is <sks>
    int jitter_x = 0, jitter_y = 0;

    static SceneSpec from_prompt(const Prompt& p, const std::optional<Bitmap>& sprite = std::nullopt);
    Prompt prompt() const;
    void validate() const;
};

const Bitmap& glyph(int object_id);
// 16x16 region reserved for a position token.
Box anchor_box(int position_id);
// Central 8x8 part of the anchor box; these are disjoint across positions.
Box anchor_core(int position_id);
// Top-left corner of the glyph placed at a position (before jitter).
std::pair<int, int> glyph_origin(int position_id);

Tensor render_background(int background_id, std::uint64_t noise_seed = 0);
Tensor render_scene(const SceneSpec& spec, std::uint64_t noise_seed = 0);
// 2x2 box filtering down to `size` (which must divide 32 by a power of two).
Tensor downscale(const Tensor& world, std::size_t size);
// Nearest-neighbour enlargement back to the 32x32 canvas.
Tensor upscale_to_world(const Tensor& image);
Tensor render_scene_at(const SceneSpec& spec, std::size_t size, std::uint64_t noise_seed = 0);

Bitmap make_sprite(std::uint64_t sprite_seed);

struct SubjectSet {
    Bitmap sprite;
    std::vector<Tensor> images;
    std::vector<std::pair<int, int>> offsets;
    Prompt prompt;
};

SubjectSet make_subject_set(std::uint64_t sprite_seed, std::size_t size = world_size);

}  // namespace dblend
