#include <cmath>

#include "doctest.h"
#include "dblend/model.hpp"
#include "dblend/rng.hpp"
#include "support.hpp"

using namespace dblend;
using dblend::test::max_rel_error;
using dblend::test::numeric_gradient;
using dblend::test::random_tensor;

namespace {

std::size_t res_count(std::size_t in, std::size_t ch, std::size_t temb) {
    std::size_t n = 2 * in + ch * in * 9 + ch + temb * ch + ch + 2 * ch + ch * ch * 9 + ch;
    if (in != ch) n += ch * in + ch;
    return n;
}

std::size_t attn_count(std::size_t ch, std::size_t heads, std::size_t hd, std::size_t td) {
    return 2 * ch + heads * (ch * hd + 2 * td * hd) + heads * hd * ch + ch;
}

Tensor random_latent(const ArchDescriptor& a, std::uint64_t seed) {
    CounterRng rng(seed);
    return normal_tensor<float>({1, a.image_size, a.image_size}, rng);
}

ArchDescriptor tiny_arch() {
    return ArchDescriptor::parse("image=8;channels=4,8;heads=2;head_dim=4;text_dim=6;groups=2");
}

}  // namespace

TEST_CASE("init_params is deterministic per seed") {
    const Checkpoint a = init_params(7);
    const Checkpoint b = init_params(7);
    const Checkpoint c = init_params(8);
    bool all_equal = true, any_diff = false;
    for (const auto& [name, t] : a.params) {
        all_equal = all_equal && bit_equal(t, b.param(name));
        any_diff = any_diff || !bit_equal(t, c.param(name));
    }
    CHECK(all_equal);
    CHECK(any_diff);
    CHECK(a.finetune_step == 0);
    CHECK(a.vocab_hash == Vocabulary::standard().hash());
    CHECK_NOTHROW(a.validate());
}

TEST_CASE("parameter count matches shape arithmetic") {
    const ArchDescriptor a;
    const std::size_t c0 = 32, c1 = 64, c2 = 64, temb = 64, td = 32;
    std::size_t expected = 18 * td;
    expected += c0 * temb + temb + temb * temb + temb;
    expected += c0 * 9 + c0;
    expected += res_count(c0, c0, temb) + res_count(c0, c1, temb) + res_count(c1, c2, temb);
    expected += attn_count(c2, 2, 32, td) * 2;
    expected += res_count(c2, c2, temb);
    expected += res_count(c2 + c1, c1, temb) + res_count(c1 + c0, c0, temb);
    expected += 2 * c0 + 9 * c0 + 1;
    CHECK(init_params(1, a).parameter_count() == expected);
    CHECK(expected == 437505);
}

TEST_CASE("architecture descriptor round-trips and validates") {
    const ArchDescriptor a = ArchDescriptor::preset("fast");
    CHECK(ArchDescriptor::parse(a.str()) == a);
    CHECK(a.attention_resolution() == 8);
    CHECK(ArchDescriptor{}.attention_resolution() == 8);
    CHECK_THROWS_AS(ArchDescriptor::parse("image=30;channels=8,8,8"), Error);
    CHECK_THROWS_AS(ArchDescriptor::parse("channels=6,8;groups=4"), Error);
    CHECK_THROWS_AS(ArchDescriptor::preset("huge"), Error);
}

TEST_CASE("encode_prompt follows lookup semantics") {
    const Checkpoint ck = init_params(3);
    const Tensor null = encode_prompt(ck, Prompt::null());
    for (std::size_t i = 1; i < 4; ++i)
        for (std::size_t j = 0; j < 32; ++j) CHECK(null[i * 32 + j] == null[j]);

    const Tensor c = encode_prompt(ck, Prompt::make("circle", "plain", "center"));
    CHECK(c.shape() == Shape{4, 32});

    Prompt swapped = Prompt::make("circle", "plain", "center");
    std::swap(swapped.ids[0], swapped.ids[2]);
    CHECK_THROWS_AS(encode_prompt(ck, swapped), Error);  // object slot no longer holds an object

    Checkpoint bad = ck;
    bad.vocab_hash ^= 1;
    CHECK_THROWS_AS(encode_prompt(bad, Prompt::null()), Error);
}

TEST_CASE("swapping prompt tokens permutes text-feature rows") {
    const Checkpoint ck = init_params(3);
    Tape<float> tape;
    const auto p = bind_params(tape, ck);
    const NodeId a = tape.embedding(p.at("text.embed"), {3, 8, 17, 1});
    const NodeId b = tape.embedding(p.at("text.embed"), {17, 8, 3, 1});
    const Tensor& ta = tape.value(a);
    const Tensor& tb = tape.value(b);
    for (std::size_t j = 0; j < 32; ++j) {
        CHECK(ta[0 * 32 + j] == tb[2 * 32 + j]);
        CHECK(ta[2 * 32 + j] == tb[0 * 32 + j]);
        CHECK(ta[1 * 32 + j] == tb[1 * 32 + j]);
    }
    const Tensor c = encode_prompt(ck, Prompt::make("circle", "plain", "center"));
    CHECK(bit_equal(c, ta));
}

TEST_CASE("forward: attention rows are stochastic and recording is non-interfering") {
    for (const char* preset : {"default", "fast"}) {
        CAPTURE(preset);
        const Checkpoint ck = init_params(11, ArchDescriptor::preset(preset));
        const Tensor l = random_latent(ck.arch, 5);
        const Tensor c = encode_prompt(ck, Prompt::make("triangle", "checker", "left"));
        const UnetOutput rec = unet_forward(ck, l, 640, c, true);
        const UnetOutput plain = unet_forward(ck, l, 640, c, false);
        const UnetOutput again = unet_forward(ck, l, 640, c, true);
        CHECK(rec.eps.shape() == l.shape());
        CHECK(bit_equal(rec.eps, plain.eps));
        CHECK(bit_equal(rec.eps, again.eps));
        CHECK(plain.maps.empty());
        REQUIRE(rec.maps.size() == 2);
        double worst = 0;
        for (const Tensor& m : rec.maps) {
            CHECK(m.shape() == Shape{2, 64, 4});
            for (std::size_t r = 0; r < 2 * 64; ++r) {
                double s = 0;
                for (std::size_t k = 0; k < 4; ++k) s += m[r * 4 + k];
                worst = std::max(worst, std::abs(s - 1.0));
            }
        }
        CHECK(worst <= 1e-5);
    }
}

TEST_CASE("forward depends on timestep and prompt") {
    const Checkpoint ck = init_params(2, ArchDescriptor::preset("fast"));
    const Tensor l = random_latent(ck.arch, 9);
    const Tensor c1 = encode_prompt(ck, Prompt::make("circle", "plain", "center"));
    const Tensor c2 = encode_prompt(ck, Prompt::make("square", "noise", "top"));
    const Tensor e1 = unet_forward(ck, l, 100, c1, false).eps;
    CHECK_FALSE(bit_equal(e1, unet_forward(ck, l, 900, c1, false).eps));
    CHECK_FALSE(bit_equal(e1, unet_forward(ck, l, 100, c2, false).eps));
    CHECK_THROWS_AS(unet_forward(ck, Tensor({1, 8, 8}), 100, c1, false), Error);
}

TEST_CASE("gradient of weighted attention mean wrt latent matches finite differences (f64)") {
    const ArchDescriptor arch = tiny_arch();
    const Checkpoint ck = init_params(4, arch);
    const TensorD l0 = random_tensor({1, 8, 8}, 21);
    const TensorD c0 = encode_prompt(ck, Prompt::make("cross", "stripes", "right")).cast<double>();

    Tape<double> tape;
    const auto params = bind_params(tape, ck);
    const NodeId l = tape.leaf(l0, "latent");
    const NodeId c = tape.leaf(c0);
    const UnetNodes<double> nodes = unet_graph(tape, arch, params, l, 300, c, true);
    REQUIRE(nodes.maps.size() == 2);
    const NodeId w = tape.leaf(random_tensor(tape.value(nodes.maps[0]).shape(), 22));
    NodeId loss = tape.mean(tape.mul(nodes.maps[0], w));
    loss = tape.add(loss, tape.mean(tape.mul(nodes.maps[1], w)));
    const NodeId ids[] = {l};
    const TensorD analytic = tape.backward(loss, ids)[0];

    const TensorD numeric = numeric_gradient(
        [&](const TensorD& x) {
            tape.bind("latent", x);
            tape.replay();
            return tape.value(loss).item();
        },
        l0);
    CHECK(max_rel_error(analytic, numeric, 1e-8) <= 1e-5);

    // The plain mean of row-stochastic maps is constant, so its gradient vanishes.
    tape.bind("latent", l0);
    tape.replay();
    const TensorD flat = tape.backward(tape.mean(nodes.maps[0]), ids)[0];
    double big = 0;
    for (double v : flat.data()) big = std::max(big, std::abs(v));
    CHECK(big < 1e-12);
}

TEST_CASE("full tiny UNet to scalar loss passes grad_check") {
    const ArchDescriptor arch = tiny_arch();
    const Checkpoint ck = init_params(6, arch);
    Tape<double> tape;
    const auto params = bind_params(tape, ck);
    const NodeId l = tape.leaf(random_tensor({1, 8, 8}, 31));
    const NodeId c = tape.embedding(params.at("text.embed"), {4, 9, 14, 1});
    const UnetNodes<double> nodes = unet_graph(tape, arch, params, l, 500, c, false);
    const NodeId loss = tape.mean(tape.mul(nodes.eps, nodes.eps));
    const GradCheckReport wrt_latent = grad_check(tape, loss, l, 1e-4);
    CHECK_MESSAGE(wrt_latent.passed, describe(wrt_latent));
    for (const char* name : {"down1.attn.wq0", "up0.res.conv1.w", "text.embed", "time.fc1.w"}) {
        const GradCheckReport r = grad_check(tape, loss, params.at(name), 1e-4, 64, 3);
        CHECK_MESSAGE(r.passed, name << ": " << describe(r));
    }
}
