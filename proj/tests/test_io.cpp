#include <cstdio>

#include "doctest.h"
#include "dblend/io.hpp"
#include "support.hpp"

using namespace dblend;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "dblend_test_io";
    fs::create_directories(dir);
    return dir / name;
}

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return ErrorCode::invalid_argument;
}

Checkpoint tiny_ckpt() {
    Checkpoint c = init_params(9, ArchDescriptor::parse("image=8;channels=4,8;heads=2;head_dim=4;text_dim=6;groups=2"));
    c.finetune_step = 125;
    return c;
}

}  // namespace

TEST_CASE("checkpoint roundtrip is bit-exact") {
    const Checkpoint c = tiny_ckpt();
    const fs::path p = scratch("rt.dbl");
    save_checkpoint(c, p);
    const Checkpoint back = load_checkpoint(p);
    CHECK(back.finetune_step == 125);
    CHECK(back.seed == c.seed);
    CHECK(back.vocab_hash == c.vocab_hash);
    CHECK(back.arch == c.arch);
    REQUIRE(back.params.size() == c.params.size());
    for (const auto& [k, v] : c.params) CHECK(bit_equal(v, back.param(k)));

    const std::string bytes = read_file(p);
    CHECK(bytes.compare(0, 6, "DBLND1") == 0);
    CHECK(bytes[6] == 1);
    save_checkpoint(back, scratch("rt2.dbl"));
    CHECK(read_file(scratch("rt2.dbl")) == bytes);
}

TEST_CASE("checkpoint corruption maps to distinct errors") {
    const Checkpoint c = tiny_ckpt();
    const fs::path p = scratch("bad.dbl");
    save_checkpoint(c, p);
    const std::string good = read_file(p);

    std::string magic = good;
    magic[2] = 'X';
    write_file(p, magic);
    CHECK(code_of([&] { load_checkpoint(p); }) == ErrorCode::bad_magic);

    std::string version = good;
    version[6] = 2;
    write_file(p, version);
    CHECK(code_of([&] { load_checkpoint(p); }) == ErrorCode::version_mismatch);

    for (std::size_t cut : {good.size() - 1, good.size() / 2, std::size_t(12)}) {
        write_file(p, good.substr(0, cut));
        CHECK(code_of([&] { load_checkpoint(p); }) == ErrorCode::truncation);
    }

    Checkpoint foreign = c;
    foreign.vocab_hash ^= 0xff;
    save_checkpoint(foreign, p);
    CHECK(code_of([&] { load_checkpoint(p); }) == ErrorCode::vocab_mismatch);

    // A dimension claiming far more data than the file holds is rejected before allocation.
    Container huge;
    huge.tensors.emplace_back("x", Tensor({2}));
    std::string bytes = encode_container(huge, checkpoint_magic);
    const std::size_t dim_at = bytes.size() - 8 - 4;
    bytes[dim_at + 3] = char(0x7f);
    CHECK(code_of([&] { decode_container(bytes, checkpoint_magic); }) == ErrorCode::truncation);

    CHECK(code_of([&] { load_checkpoint(scratch("missing.dbl")); }) == ErrorCode::io);
}

TEST_CASE("attention dump roundtrip and row verification") {
    const Checkpoint c = tiny_ckpt();
    SamplerConfig s;
    s.num_steps = 4;
    s.seed = 4;
    s.cfg_scale = 2.5;
    const SampleResult r = ddim_sample(c, Prompt::make("diamond", "gradient", "bottom"),
                                       s, make_schedule(), true);
    AttentionDump d{*r.record, Prompt::make("diamond", "gradient", "bottom"), s};
    const fs::path p = scratch("a.dbatn");
    save_attention(d, p);
    const AttentionDump back = load_attention(p);
    CHECK(back.prompt.ids == d.prompt.ids);
    CHECK(back.sampler.cfg_scale == 2.5);
    CHECK(back.sampler.seed == 4);
    CHECK(back.record.timesteps == d.record.timesteps);
    REQUIRE(back.record.steps() == 4);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < d.record.layers(); ++j) CHECK(bit_equal(back.record.maps[i][j], d.record.maps[i][j]));

    const Container raw = decode_container(read_file(p), attention_magic);
    CHECK(raw.tensors[1].first == "t0_layer1");

    AttentionDump broken = d;
    broken.record.maps[1][0][5] += 0.01f;
    save_attention(broken, p);
    CHECK(code_of([&] { load_attention(p); }) == ErrorCode::malformed);
    CHECK(code_of([&] { load_checkpoint(p); }) == ErrorCode::bad_magic);
}

TEST_CASE("PGM encoding") {
    Tensor img({1, 2, 3});
    img[0] = 1.0f;
    img[1] = 0.5f;
    img[2] = 0.0f;
    img[3] = 0.2f;
    img[4] = -0.3f;
    img[5] = 1.7f;
    const std::string bytes = encode_pgm(img);
    CHECK(bytes.substr(0, 11) == "P5\n3 2\n255\n");
    CHECK(std::uint8_t(bytes[11]) == 255);
    CHECK(std::uint8_t(bytes[12]) == 128);
    CHECK(std::uint8_t(bytes[13]) == 0);
    CHECK(std::uint8_t(bytes[14]) == 51);
    CHECK(std::uint8_t(bytes[15]) == 0);
    CHECK(std::uint8_t(bytes[16]) == 255);

    const Tensor noise = test::random_tensor({1, 16, 16}, 3).cast<float>();
    Tensor clipped = noise;
    for (float& v : clipped.data()) v = std::clamp(0.5f + 0.2f * v, 0.0f, 1.0f);
    const fs::path p = scratch("x.pgm");
    write_image_pgm(clipped, p);
    const Tensor back = read_image_pgm(p);
    CHECK(back.shape() == clipped.shape());
    CHECK(max_abs_diff(back, clipped) <= 0.5 / 255 + 1e-7);

    CHECK(decode_pgm("P5\n# comment\n2 1\n255\n\x10\x20").dim(2) == 2);
    CHECK(code_of([] { decode_pgm("P2\n2 1\n255\n12"); }) == ErrorCode::malformed);
    CHECK(code_of([] { decode_pgm("P5\n2 2\n255\nab"); }) == ErrorCode::truncation);
}

TEST_CASE("metrics CSV") {
    CHECK(format_metrics_csv({}) == std::string(metrics_header) + "\n");
    MetricsRow r;
    r.guidance_step = 25;
    r.edit_step = 200;
    r.alpha = 0.1;
    r.cfg = 3;
    r.subject_fidelity = 0.8123456789;
    r.prompt_fidelity = 0.4;
    r.diversity = 0.05;
    r.n_images = 50;
    r.finalize();
    const std::string text = format_metrics_csv({r});
    CHECK(text.find("\r") == std::string::npos);
    CHECK(text.substr(text.find('\n') + 1) == "25,200,0.100000,3.000000,0.812346,0.400000,0.050000,0.536049,50\n");
    const auto back = parse_metrics_csv(text);
    REQUIRE(back.size() == 1);
    CHECK(back[0].edit_step == 200);
    CHECK(back[0].subject_fidelity == 0.812346);
    const double s = back[0].subject_fidelity, p = back[0].prompt_fidelity;
    CHECK(std::abs(back[0].f1 - 2 * s * p / (s + p)) <= 1e-6);
    CHECK(code_of([] { parse_metrics_csv("a,b\n"); }) == ErrorCode::malformed);
    CHECK(fixed6(-1e-9) == "0.000000");
}
