#include "dblend/corpus.hpp"

#include <algorithm>
#include <cmath>

#include "dblend/error.hpp"
#include "dblend/rng.hpp"

namespace dblend {

namespace {

constexpr int G = int(glyph_size);

Bitmap make_glyph(int kind) {
    Bitmap b{};
    for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) {
            const int dx = x - 4, dy = y - 4;
            bool on = false;
            switch (kind) {
                case 0: on = dx * dx + dy * dy <= 17; break;                      // circle
                case 1: on = std::max(std::abs(dx), std::abs(dy)) >= 3; break;     // square outline
                case 2: on = y >= 1 && 2 * std::abs(dx) <= y; break;               // triangle
                case 3: on = std::abs(dx) <= 1 || std::abs(dy) <= 1; break;       // cross
                case 4: on = std::abs(dx) + std::abs(dy) <= 4; break;              // diamond
                default: break;
            }
            b[std::size_t(y * G + x)] = on ? 1.0f : 0.0f;
        }
    return b;
}

double bitmap_ncc(const Bitmap& a, const Bitmap& b) {
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= double(a.size());
    mb /= double(b.size());
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

int slot_index(int id, int first) { return id - first; }

}  // namespace

double Box::distance(double x, double y) const {
    const double dx = std::max({double(x0) - x, 0.0, x - double(x1)});
    const double dy = std::max({double(y0) - y, 0.0, y - double(y1)});
    return std::sqrt(dx * dx + dy * dy);
}

const Bitmap& glyph(int object_id) {
    static const std::array<Bitmap, 5> glyphs = {make_glyph(0), make_glyph(1), make_glyph(2), make_glyph(3),
                                                 make_glyph(4)};
    require(Vocabulary::standard().in_slot(object_id, Slot::object) && object_id != Vocabulary::sks_id,
            ErrorCode::invalid_argument, "no glyph for token id " + std::to_string(object_id));
    return glyphs[std::size_t(slot_index(object_id, Vocabulary::first_object))];
}

Box anchor_box(int position_id) {
    require(Vocabulary::standard().in_slot(position_id, Slot::position), ErrorCode::invalid_argument,
            "not a position token: " + std::to_string(position_id));
    switch (slot_index(position_id, Vocabulary::first_position)) {
        case 0: return {0, 8, 16, 24};    // left
        case 1: return {16, 8, 32, 24};   // right
        case 2: return {8, 0, 24, 16};    // top
        case 3: return {8, 16, 24, 32};   // bottom
        default: return {8, 8, 24, 24};   // center
    }
}

std::pair<int, int> glyph_origin(int position_id) {
    const Box b = anchor_box(position_id);
    return {b.x0 + 3, b.y0 + 3};
}

Box anchor_core(int position_id) {
    const auto [ox, oy] = glyph_origin(position_id);
    return {ox, oy, ox + 8, oy + 8};
}

SceneSpec SceneSpec::from_prompt(const Prompt& p, const std::optional<Bitmap>& sprite) {
    SceneSpec s;
    s.object = p.object();
    s.background = p.background();
    s.position = p.position();
    s.sprite = sprite;
    s.validate();
    return s;
}

Prompt SceneSpec::prompt() const {
    Prompt p;
    p.ids = {object, background, position, Vocabulary::pad_id};
    p.validate();
    return p;
}

void SceneSpec::validate() const {
    const Vocabulary& v = Vocabulary::standard();
    require(v.in_slot(object, Slot::object) && v.in_slot(background, Slot::background) &&
                v.in_slot(position, Slot::position),
            ErrorCode::invalid_argument, "scene tokens do not fit (object, background, position)");
    require((object == Vocabulary::sks_id) == sprite.has_value(), ErrorCode::invalid_argument,
            "a sprite is required exactly when the object is <sks>");
    require(std::abs(jitter_x) <= 3 && std::abs(jitter_y) <= 3, ErrorCode::invalid_argument,
            "jitter must stay within 3 pixels");
}

Tensor render_background(int background_id, std::uint64_t noise_seed) {
    require(Vocabulary::standard().in_slot(background_id, Slot::background), ErrorCode::invalid_argument,
            "not a background token: " + std::to_string(background_id));
    const int kind = slot_index(background_id, Vocabulary::first_background);
    const std::size_t W = world_size;
    Tensor img({1, W, W});
    CounterRng rng = CounterRng::stream(noise_seed, 0x6e6f697365ULL);
    for (std::size_t y = 0; y < W; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            double v = 0;
            switch (kind) {
                case 0: {  // plain, with a faint vignette
                    const double dx = double(x) - 15.5, dy = double(y) - 15.5;
                    v = 0.21 + 0.06 * (1.0 - (dx * dx + dy * dy) / 480.5);
                    break;
                }
                case 1: v = (x % 4) < 2 ? 0.45 : 0.1; break;
                case 2: v = ((x / 4) + (y / 4)) % 2 == 0 ? 0.45 : 0.1; break;
                case 3: v = 0.05 + 0.5 * double(x) / double(W - 1); break;
                default: v = 0.05 + 0.5 * rng.uniform(); break;
            }
            img[y * W + x] = float(v);
        }
    return img;
}

Tensor render_scene(const SceneSpec& spec, std::uint64_t noise_seed) {
    spec.validate();
    Tensor img = render_background(spec.background, noise_seed);
    const Bitmap& bm = spec.sprite ? *spec.sprite : glyph(spec.object);
    auto [ox, oy] = glyph_origin(spec.position);
    ox += spec.jitter_x;
    oy += spec.jitter_y;
    const int W = int(world_size);
    for (int y = 0; y < G; ++y)
        for (int x = 0; x < G; ++x) {
            const int px = ox + x, py = oy + y;
            if (px < 0 || py < 0 || px >= W || py >= W) continue;
            float& bg = img[std::size_t(py * W + px)];
            const float s = bm[std::size_t(y * G + x)];
            bg = bg + s * (1.0f - bg);
        }
    return img;
}

Tensor downscale(const Tensor& world, std::size_t size) {
    require(world.shape() == Shape{1, world_size, world_size}, ErrorCode::shape_mismatch,
            "downscale expects a 32x32 image");
    require(size >= 1 && world_size % size == 0 && ((world_size / size) & (world_size / size - 1)) == 0,
            ErrorCode::invalid_argument, "image size " + std::to_string(size) + " must be 32 / 2^k");
    Tensor cur = world;
    std::size_t n = world_size;
    while (n > size) {
        const std::size_t h = n / 2;
        Tensor next({1, h, h});
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < h; ++x) {
                const float* r0 = cur.ptr() + (2 * y) * n + 2 * x;
                const float* r1 = r0 + n;
                next[y * h + x] = 0.25f * ((r0[0] + r0[1]) + (r1[0] + r1[1]));
            }
        cur = std::move(next);
        n = h;
    }
    return cur;
}

Tensor upscale_to_world(const Tensor& image) {
    require(image.rank() == 3 && image.dim(0) == 1 && image.dim(1) == image.dim(2) &&
                world_size % image.dim(1) == 0,
            ErrorCode::shape_mismatch, "cannot upscale image of shape " + shape_str(image.shape()));
    const std::size_t n = image.dim(1), f = world_size / n;
    if (f == 1) return image;
    Tensor out({1, world_size, world_size});
    for (std::size_t y = 0; y < world_size; ++y)
        for (std::size_t x = 0; x < world_size; ++x) out[y * world_size + x] = image[(y / f) * n + x / f];
    return out;
}

Tensor render_scene_at(const SceneSpec& spec, std::size_t size, std::uint64_t noise_seed) {
    return downscale(render_scene(spec, noise_seed), size);
}

Bitmap make_sprite(std::uint64_t sprite_seed) {
    for (std::uint64_t attempt = 0;; ++attempt) {
        CounterRng rng = CounterRng::stream(sprite_seed, attempt);
        Bitmap raw{};
        for (float& v : raw) v = rng.uniform() < 0.5 ? 1.0f : 0.0f;
        // One majority-vote smoothing pass turns salt-and-pepper into blobs.
        Bitmap s{};
        for (int y = 0; y < G; ++y)
            for (int x = 0; x < G; ++x) {
                int on = 0, total = 0;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int yy = y + dy, xx = x + dx;
                        if (yy < 0 || xx < 0 || yy >= G || xx >= G) continue;
                        on += raw[std::size_t(yy * G + xx)] > 0.5f;
                        ++total;
                    }
                s[std::size_t(y * G + x)] = 2 * on > total ? 1.0f : 0.0f;
            }
        int count = 0;
        for (float v : s) count += v > 0.5f;
        if (count < 25 || count > 56) continue;
        bool distinct = true;
        for (int k = 0; k < Vocabulary::kinds_per_slot; ++k)
            distinct = distinct && std::abs(bitmap_ncc(s, glyph(Vocabulary::first_object + k))) < 0.6;
        if (distinct) return s;
    }
}

SubjectSet make_subject_set(std::uint64_t sprite_seed, std::size_t size) {
    SubjectSet set;
    set.sprite = make_sprite(sprite_seed);
    Prompt p;
    p.ids = {Vocabulary::sks_id, Vocabulary::first_background, Vocabulary::first_position + 4, Vocabulary::pad_id};
    set.prompt = p;
    CounterRng rng = CounterRng::stream(sprite_seed, 0x6a6974746572ULL);
    while (set.offsets.size() < 4) {
        const int dx = int(rng.below(5)) - 2, dy = int(rng.below(5)) - 2;
        if (std::find(set.offsets.begin(), set.offsets.end(), std::make_pair(dx, dy)) != set.offsets.end()) continue;
        set.offsets.emplace_back(dx, dy);
    }
    for (const auto& [dx, dy] : set.offsets) {
        SceneSpec spec = SceneSpec::from_prompt(p, set.sprite);
        spec.jitter_x = dx;
        spec.jitter_y = dy;
        set.images.push_back(render_scene_at(spec, size));
    }
    return set;
}

}  // namespace dblend
