#include "doctest.h"
#include "dblend/cli.hpp"
#include "dblend/experiment.hpp"
#include "dblend/io.hpp"

using namespace dblend;

namespace {

const char* tiny = "image=8;channels=4,8;heads=2;head_dim=4;text_dim=6;groups=2";

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "dblend_test_cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("run config text") {
    RunConfig c;
    c.apply_text("# comment\n\nalpha = 0.05  # trailing\nlayers=0,1\nreuse_epsilon=true\narch=fast\n");
    CHECK(c.alpha == 0.05);
    CHECK(c.layers == std::vector<int>{0, 1});
    CHECK(c.reuse_epsilon);
    CHECK(c.arch_descriptor() == ArchDescriptor::preset("fast"));
    CHECK_THROWS_AS(c.apply_text("alpah=0.1\n"), Error);
    CHECK_THROWS_AS(c.apply_text("alpha\n"), Error);
    CHECK_THROWS_AS(c.set("reduction", "max"), Error);
    CHECK_THROWS_AS(c.set("steps", "fifty"), Error);

    RunConfig d;
    d.apply_text(c.str());
    CHECK(d.str() == c.str());
    CHECK(RunConfig{}.str().find("edit_steps=100,200") != std::string::npos);
    for (const auto& k : RunConfig::keys()) CHECK_NOTHROW(RunConfig{}.get(k.name));
}

TEST_CASE("operating point enumeration") {
    const FinetuneSchedule s = FinetuneSchedule::standard();
    CHECK(blend_pairs(s.save_steps, {100, 200}).size() == 28);
    CHECK(blend_pairs({5, 10}, {10}) == std::vector<std::pair<int, int>>{{0, 10}, {5, 10}});
    CHECK(blend_setting(100).alpha == 0.1);
    CHECK(blend_setting(200).cfg_edit == 2.0);
}

TEST_CASE("command line surface") {
    CHECK(cli_main({}) == 2);
    CHECK(cli_main({"frobnicate"}) == 2);
    CHECK(cli_main({"sample", "--ckpt", "x", "--prompt", "circle,plain,left", "--out", "y", "--nope"}) == 2);
    CHECK(cli_main({"sample", "--ckpt", "/nonexistent.dbl", "--prompt", "circle,plain,left", "--out", "y"}) == 1);
    CHECK(cli_main({"pretrain", "--out", "z", "--optimizer", "rmsprop"}) == 2);

    const fs::path dir = scratch("flow");
    const std::string base = (dir / "base.dbl").string();
    REQUIRE(cli_main({"pretrain", "--arch", tiny, "--pretrain-steps", "3", "--batch", "2", "--out", base}) == 0);
    REQUIRE(cli_main({"finetune", "--base", base, "--out", (dir / "traj").string()}) == 0);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(dir / "traj")) files += e.path().extension() == ".dbl";
    CHECK(files == 48);
    CHECK(load_checkpoint(dir / "traj" / "step_0075.dbl").finetune_step == 75);

    const std::string G = (dir / "traj" / "step_0025.dbl").string(), E = (dir / "traj" / "step_0200.dbl").string();
    const std::vector<std::string> common{"--prompt", "<sks>,stripes,left", "--seed", "7", "--steps", "10"};
    auto with = [&](std::vector<std::string> a) {
        a.insert(a.end(), common.begin(), common.end());
        return a;
    };
    REQUIRE(cli_main(with({"sample", "--ckpt", E, "--out", (dir / "e.pgm").string(), "--attention",
                           (dir / "e.dbatn").string()})) == 0);
    REQUIRE(cli_main(with({"blend", "--guidance", G, "--edit", E, "--alpha", "0", "--out", (dir / "b0").string()})) == 0);
    CHECK(read_file(dir / "b0" / "blend.pgm") == read_file(dir / "e.pgm"));
    CHECK(read_file(dir / "b0" / "baseline.pgm") == read_file(dir / "e.pgm"));
    REQUIRE(cli_main(with({"blend", "--guidance", G, "--edit", G, "--out", (dir / "gg").string()})) == 0);
    CHECK(read_file(dir / "gg" / "blend.pgm") == read_file(dir / "gg" / "reference.pgm"));
    CHECK(load_attention(dir / "gg" / "edit.dbatn").record.steps() == 10);
    CHECK(read_file(dir / "b0" / "r_curve.csv").rfind("step,t,R\n0,1000,", 0) == 0);

    REQUIRE(cli_main(with({"invert-edit", "--image", (dir / "e.pgm").string(), "--guidance", G, "--edit", E, "--out",
                           (dir / "inv.pgm").string()})) == 0);
    CHECK(read_image_pgm(dir / "inv.pgm").shape() == Shape{1, 8, 8});

    REQUIRE(cli_main({"make-subject", "--arch", tiny, "--out", (dir / "subj").string(), "--scenes"}) == 0);
    CHECK(fs::exists(dir / "subj" / "subject_3.pgm"));
    CHECK(fs::exists(dir / "subj" / "scenes" / "cross_noise_bottom.pgm"));

    const fs::path small = dir / "small";
    fs::create_directories(small);
    for (const char* f : {"step_0005.dbl", "step_0010.dbl", "step_0100.dbl"})
        fs::copy_file(dir / "traj" / f, small / f);
    REQUIRE(cli_main({"eval", "--trajectory", small.string(), "--base", base, "--out", (dir / "m.csv").string(),
                      "--eval-seeds", "2", "--steps", "10", "--edit-steps", "100"}) == 0);
    const auto rows = read_metrics_csv(dir / "m.csv");
    CHECK(rows.size() == 4 + 3);
    REQUIRE(cli_main({"pareto", "--metrics", (dir / "m.csv").string(), "--out", (dir / "front.csv").string()}) == 0);
    CHECK(!read_metrics_csv(dir / "front.csv").empty());
    REQUIRE(cli_main({"collapse", "--trajectory", small.string(), "--eval-seeds", "1", "--steps", "50", "--out",
                      (dir / "c.csv").string()}) == 0);
    CHECK(read_file(dir / "c.csv").rfind("finetune_step,background_fraction,position_fraction,aggregate\n5,", 0) == 0);

    const fs::path cfg = dir / "run.cfg";
    write_file(cfg, "steps=10\nseed=7\n");
    REQUIRE(cli_main({"sample", "--config", cfg.string(), "--ckpt", E, "--prompt", "<sks>,stripes,left", "--out",
                      (dir / "e2.pgm").string()}) == 0);
    CHECK(read_file(dir / "e2.pgm") == read_file(dir / "e.pgm"));
    write_file(cfg, "stepz=10\n");
    CHECK(cli_main({"sample", "--config", cfg.string(), "--ckpt", E, "--prompt", "<sks>,stripes,left", "--out",
                    (dir / "e3.pgm").string()}) == 2);
}
