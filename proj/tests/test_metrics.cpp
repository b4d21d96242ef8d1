#include <cmath>

#include "doctest.h"
#include "dblend/metrics.hpp"
#include "dblend/rng.hpp"

using namespace dblend;

namespace {

MetricsRow row(double s, double p, int edit = 0, int guide = 0) {
    MetricsRow r;
    r.subject_fidelity = s;
    r.prompt_fidelity = p;
    r.edit_step = edit;
    r.guidance_step = guide;
    r.finalize();
    return r;
}

Tensor noise_image(std::uint64_t seed) {
    CounterRng rng(seed);
    Tensor t({1, 32, 32});
    for (float& v : t.data()) v = float(rng.uniform());
    return t;
}

AttentionRecord uniform_record(std::size_t steps) {
    AttentionRecord r;
    r.height = r.width = 8;
    for (std::size_t s = 0; s < steps; ++s) {
        r.timesteps.push_back(int(1000 - 20 * s));
        r.maps.push_back({Tensor({2, 64, 4}, 0.25f), Tensor({2, 64, 4}, 0.25f)});
    }
    return r;
}

}  // namespace

TEST_CASE("subject fidelity: template match, noise regression, intensity invariance") {
    const Bitmap sprite = make_sprite(3);
    Tensor img({1, 32, 32}, 0.3f);
    for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 9; ++x) img[std::size_t((20 + y) * 32 + 5 + x)] = 0.3f + 0.6f * sprite[std::size_t(y * 9 + x)];
    CHECK(subject_fidelity(img, sprite) >= 0.99);
    const TemplateMatch m = match_template(img, sprite);
    CHECK(m.x == 5);
    CHECK(m.y == 20);

    const Tensor noise = noise_image(1);
    CHECK(subject_fidelity(noise, sprite) == doctest::Approx(0.676115).epsilon(1e-5));

    Tensor shifted = noise;
    for (float& v : shifted.data()) v += 0.1f;
    CHECK(subject_fidelity(shifted, sprite) == doctest::Approx(subject_fidelity(noise, sprite)).epsilon(1e-6));

    Bitmap flat{};
    CHECK_THROWS_AS(subject_fidelity(noise, flat), Error);
}

TEST_CASE("prompt fidelity: self-consistency over the whole scene grid") {
    for (std::size_t size : {32u, 16u}) {
        double worst = 1;
        for (int o = 0; o < 5; ++o)
            for (int b = 0; b < 5; ++b)
                for (int p = 0; p < 5; ++p) {
                    SceneSpec s;
                    s.object = Vocabulary::first_object + o;
                    s.background = Vocabulary::first_background + b;
                    s.position = Vocabulary::first_position + p;
                    worst = std::min(worst, prompt_fidelity(render_scene_at(s, size), s.prompt(), glyph(s.object)));
                }
        CAPTURE(size);
        CHECK(worst >= 0.9);
    }
}

TEST_CASE("prompt fidelity: wrong position decays, gray image is background-agnostic") {
    const Prompt right = Prompt::make("square", "stripes", "right");
    const Prompt left = Prompt::make("square", "stripes", "left");
    const Tensor img = render_scene(SceneSpec::from_prompt(right));
    const PromptScore wrong = prompt_fidelity_detail(img, left, glyph(right.object()));
    CHECK(wrong.position <= 0.5);
    CHECK(wrong.background >= 0.9);

    const PromptScore gray = prompt_fidelity_detail(Tensor({1, 32, 32}, 0.5f), right, glyph(right.object()));
    CHECK(gray.background == doctest::Approx(0.2).epsilon(0.25));

    Tensor brighter = img;
    for (float& v : brighter.data()) v += 0.1f;
    CHECK(prompt_fidelity_detail(brighter, right, glyph(right.object())).background ==
          doctest::Approx(prompt_fidelity_detail(img, right, glyph(right.object())).background).epsilon(1e-6));
    CHECK_THROWS_AS(prompt_fidelity(img, Prompt::null(), glyph(right.object())), Error);
}

TEST_CASE("diversity score") {
    const Tensor a = noise_image(4);
    CHECK(diversity_score({a, a, a, a}) == 0.0);
    Tensor b = a;
    for (float& v : b.data()) v += 0.1f;
    CHECK(diversity_score({a, b}) == doctest::Approx(0.1).epsilon(1e-5));
    CHECK_THROWS_AS(diversity_score({a}), Error);
}

TEST_CASE("attention collapse") {
    const Prompt p = Prompt::parse("sks,plain,left");
    AttentionRecord uni = uniform_record(50);
    const CollapseReport u = attention_collapse(uni, p);
    REQUIRE(u.fractions.size() == 2);
    for (double f : u.fractions) CHECK(f == doctest::Approx(0.1).epsilon(0.1));
    CHECK(u.tokens == std::vector<int>{1, 2});

    // Subject token peaks on pixels 0..6; every token attends only there.
    AttentionRecord conc = uniform_record(50);
    for (Tensor& m : conc.maps[25])
        for (std::size_t h = 0; h < 2; ++h)
            for (std::size_t px = 0; px < 64; ++px)
                for (std::size_t n = 0; n < 4; ++n) {
                    const float inside = px < 7 ? 1.0f : 0.0f;
                    m[(h * 64 + px) * 4 + n] = n == 0 ? (px < 7 ? 0.7f : 0.1f) : (n < 3 ? inside * 0.1f : 0.2f);
                }
    const CollapseReport c = attention_collapse(conc, p);
    CHECK(c.aggregate == doctest::Approx(1.0));
    int masked = 0;
    for (auto v : c.mask) masked += v;
    CHECK(masked == 7);

    CHECK_THROWS_AS(attention_collapse(uniform_record(10), p), Error);
    CHECK_THROWS_AS(attention_collapse(uni, Prompt::null()), Error);
}

TEST_CASE("operating point selection") {
    CHECK(select_operating_point({row(0.3, 0.6, 50)}).edit_step == 50);
    const MetricsRow w = select_operating_point({row(0.8, 0.2, 1), row(0.5, 0.5, 2)});
    CHECK(w.edit_step == 2);
    CHECK(w.f1 == doctest::Approx(0.5));
    CHECK(row(0.8, 0.2).f1 == doctest::Approx(0.32));
    const MetricsRow tie = select_operating_point({row(0.5, 0.5, 200, 5), row(0.5, 0.5, 100, 30), row(0.5, 0.5, 100, 10)});
    CHECK(tie.edit_step == 100);
    CHECK(tie.guidance_step == 10);
    CHECK(f1_score(0, 0) == 0.0);
    CHECK_THROWS_AS(select_operating_point({}), Error);
}

TEST_CASE("pareto front") {
    CHECK(pareto_front({row(0.4, 0.4), row(0.4, 0.4), row(0.4, 0.4)}).size() == 3);
    const auto three = pareto_front({row(0.9, 0.1), row(0.1, 0.9), row(0.5, 0.5)});
    REQUIRE(three.size() == 3);
    CHECK(three[0].prompt_fidelity == 0.1);
    CHECK(three[2].prompt_fidelity == 0.9);
    const auto two = pareto_front({row(0.9, 0.5), row(0.8, 0.4)});
    REQUIRE(two.size() == 1);
    CHECK(two[0].subject_fidelity == 0.9);

    CounterRng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<MetricsRow> rows;
        for (int i = 0; i < 30; ++i) rows.push_back(row(std::round(rng.uniform() * 10) / 10, std::round(rng.uniform() * 10) / 10, i));
        const auto front = pareto_front(rows);
        for (const auto& a : front)
            for (const auto& b : front) CHECK_FALSE(dominates(a, b));
        for (const auto& r : rows) {
            bool on = false, covered = false;
            for (const auto& f : front) {
                on = on || (f.edit_step == r.edit_step);
                covered = covered || dominates(f, r);
            }
            CHECK((on || covered));
        }
        const MetricsRow best = select_operating_point(rows);
        bool found = false;
        for (const auto& f : front) found = found || f.edit_step == best.edit_step;
        CHECK(found);
    }
    CHECK_THROWS_AS(pareto_front({}), Error);
}

TEST_CASE("spearman rank correlation") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 45}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    // d = (0, -1, 1, 0, 0): 1 - 6*2/(5*24) = 0.9
    CHECK(spearman({1, 2, 3, 4, 5}, {1, 3, 2, 4, 5}) == doctest::Approx(0.9));
    CHECK(spearman({1, 1, 2}, {3, 3, 5}) == doctest::Approx(1.0));
    CHECK_THROWS_AS(spearman({1}, {1}), Error);
}
