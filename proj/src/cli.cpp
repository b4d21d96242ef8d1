#include "dblend/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>

#include "dblend/experiment.hpp"
#include "dblend/io.hpp"

namespace dblend {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_value(std::string_view key, std::string_view v) {
    T out{};
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    require(r.ec == std::errc() && r.ptr == v.data() + v.size(), ErrorCode::invalid_argument,
            "bad value '" + std::string(v) + "' for " + std::string(key));
    return out;
}

std::vector<int> parse_int_list(std::string_view key, std::string_view v) {
    std::vector<int> out;
    std::string cur;
    for (char ch : std::string(v) + ",") {
        if (ch == ',') {
            const std::string t = trim(cur);
            if (!t.empty()) out.push_back(parse_value<int>(key, t));
            cur.clear();
        } else {
            cur += ch;
        }
    }
    return out;
}

bool parse_bool(std::string_view key, std::string_view v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    fail(ErrorCode::invalid_argument, "bad boolean '" + std::string(v) + "' for " + std::string(key));
}

std::string num(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string ints(const std::vector<int>& xs) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
    return s;
}

}  // namespace

const std::vector<RunConfig::Key>& RunConfig::keys() {
    static const std::vector<Key> k = {
        {"arch", "architecture preset (default, fast) or descriptor string"},
        {"seed", "seed for initialization, pretraining data order and finetuning noise"},
        {"pretrain_steps", "pretraining steps"},
        {"batch", "pretraining batch size"},
        {"lr", "pretraining learning rate"},
        {"dropout_p", "probability of replacing the prompt by <null> during pretraining"},
        {"optimizer", "pretraining optimizer: sgd or adam"},
        {"finetune_steps", "finetuning steps"},
        {"finetune_lr", "finetuning learning rate"},
        {"finetune_optimizer", "finetuning optimizer: sgd or adam"},
        {"finetune_batch", "finetuning samples per step, cycling through the subject images"},
        {"sprite_seed", "seed of the procedural subject sprite"},
        {"steps", "DDIM sampling steps"},
        {"cfg", "classifier-free guidance scale for plain sampling"},
        {"alpha", "cross-attention guidance scale"},
        {"cfg_guidance", "CFG scale while recording reference attention"},
        {"cfg_edit", "CFG scale of the guided edit phase"},
        {"reduction", "attention loss reduction: mean or sum"},
        {"layers", "comma-separated attention layers in the loss (empty = all)"},
        {"reuse_epsilon", "reuse the conditional epsilon of the attention pass"},
        {"attention_source", "which CFG pass provides attention maps: conditional or unconditional"},
        {"eval_seeds", "seeds per prompt in eval"},
        {"edit_steps", "edit checkpoints paired with earlier guidance checkpoints in eval"},
    };
    return k;
}

void RunConfig::set(std::string_view key, std::string_view value) {
    const std::string v = trim(value);
    if (key == "arch") {
        arch = v;
        arch_descriptor();
    } else if (key == "seed") {
        seed = parse_value<std::uint64_t>(key, v);
    } else if (key == "pretrain_steps") {
        pretrain_steps = parse_value<int>(key, v);
    } else if (key == "batch") {
        batch = parse_value<int>(key, v);
    } else if (key == "lr") {
        lr = parse_value<double>(key, v);
    } else if (key == "dropout_p") {
        dropout_p = parse_value<double>(key, v);
    } else if (key == "optimizer") {
        optimizer = parse_optimizer(v);
    } else if (key == "finetune_steps") {
        finetune_steps = parse_value<int>(key, v);
    } else if (key == "finetune_lr") {
        finetune_lr = parse_value<double>(key, v);
    } else if (key == "finetune_optimizer") {
        finetune_optimizer = parse_optimizer(v);
    } else if (key == "finetune_batch") {
        finetune_batch = parse_value<int>(key, v);
    } else if (key == "sprite_seed") {
        sprite_seed = parse_value<std::uint64_t>(key, v);
    } else if (key == "steps") {
        steps = parse_value<int>(key, v);
    } else if (key == "cfg") {
        cfg = parse_value<double>(key, v);
    } else if (key == "alpha") {
        alpha = parse_value<double>(key, v);
    } else if (key == "cfg_guidance") {
        cfg_guidance = parse_value<double>(key, v);
    } else if (key == "cfg_edit") {
        cfg_edit = parse_value<double>(key, v);
    } else if (key == "reduction") {
        reduction = parse_reduction(v);
    } else if (key == "layers") {
        layers = parse_int_list(key, v);
    } else if (key == "reuse_epsilon") {
        reuse_epsilon = parse_bool(key, v);
    } else if (key == "attention_source") {
        attention_source = parse_attention_source(v);
    } else if (key == "eval_seeds") {
        eval_seeds = parse_value<int>(key, v);
    } else if (key == "edit_steps") {
        edit_steps = parse_int_list(key, v);
    } else {
        fail(ErrorCode::invalid_argument, "unknown config key '" + std::string(key) + "'");
    }
}

std::string RunConfig::get(std::string_view key) const {
    if (key == "arch") return arch;
    if (key == "seed") return std::to_string(seed);
    if (key == "pretrain_steps") return std::to_string(pretrain_steps);
    if (key == "batch") return std::to_string(batch);
    if (key == "lr") return num(lr);
    if (key == "dropout_p") return num(dropout_p);
    if (key == "optimizer") return optimizer_name(optimizer);
    if (key == "finetune_steps") return std::to_string(finetune_steps);
    if (key == "finetune_lr") return num(finetune_lr);
    if (key == "finetune_optimizer") return optimizer_name(finetune_optimizer);
    if (key == "finetune_batch") return std::to_string(finetune_batch);
    if (key == "sprite_seed") return std::to_string(sprite_seed);
    if (key == "steps") return std::to_string(steps);
    if (key == "cfg") return num(cfg);
    if (key == "alpha") return num(alpha);
    if (key == "cfg_guidance") return num(cfg_guidance);
    if (key == "cfg_edit") return num(cfg_edit);
    if (key == "reduction") return reduction_name(reduction);
    if (key == "layers") return ints(layers);
    if (key == "reuse_epsilon") return reuse_epsilon ? "true" : "false";
    if (key == "attention_source") return attention_source_name(attention_source);
    if (key == "eval_seeds") return std::to_string(eval_seeds);
    if (key == "edit_steps") return ints(edit_steps);
    fail(ErrorCode::invalid_argument, "unknown config key '" + std::string(key) + "'");
}

void RunConfig::apply_text(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string t = trim(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        require(eq != std::string::npos, ErrorCode::invalid_argument,
                "config line " + std::to_string(lineno) + " is not key=value: " + t);
        try {
            set(trim(t.substr(0, eq)), t.substr(eq + 1));
        } catch (const Error& e) {
            fail(e.code(), "config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
}

std::string RunConfig::str() const {
    std::string s;
    for (const Key& k : keys()) s += std::string(k.name) + "=" + get(k.name) + "\n";
    return s;
}

ArchDescriptor RunConfig::arch_descriptor() const {
    if (arch == "default" || arch == "fast") return ArchDescriptor::preset(arch);
    return ArchDescriptor::parse(arch);
}

PretrainConfig RunConfig::pretrain() const {
    PretrainConfig p;
    p.seed = seed;
    p.steps = pretrain_steps;
    p.batch = batch;
    p.lr = lr;
    p.dropout_p = dropout_p;
    p.optimizer = optimizer;
    p.arch = arch_descriptor();
    return p;
}

FinetuneConfig RunConfig::finetune() const {
    FinetuneConfig f;
    f.seed = seed;
    f.lr = finetune_lr;
    f.optimizer = finetune_optimizer;
    f.batch = finetune_batch;
    return f;
}

GuidanceConfig RunConfig::guidance() const {
    GuidanceConfig g;
    g.steps = steps;
    g.alpha = alpha;
    g.cfg_guidance = cfg_guidance;
    g.cfg_edit = cfg_edit;
    g.seed = seed;
    g.reduction = reduction;
    g.layers = layers;
    g.reuse_epsilon = reuse_epsilon;
    g.attention_source = attention_source;
    return g;
}

SamplerConfig RunConfig::sampler() const {
    SamplerConfig s;
    s.num_steps = steps;
    s.cfg_scale = cfg;
    s.seed = seed;
    s.attention_source = attention_source;
    return s;
}

namespace {

std::string step_name(std::int64_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "step_%04lld.dbl", static_cast<long long>(step));
    return buf;
}

std::vector<Checkpoint> load_trajectory(const fs::path& dir) {
    require(fs::is_directory(dir), ErrorCode::io, dir.string() + " is not a directory");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".dbl") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    require(!files.empty(), ErrorCode::io, "no checkpoints in " + dir.string());
    std::vector<Checkpoint> out;
    for (const auto& f : files) out.push_back(load_checkpoint(f));
    std::stable_sort(out.begin(), out.end(),
                     [](const Checkpoint& a, const Checkpoint& b) { return a.finetune_step < b.finetune_step; });
    return out;
}

Prompt prompt_arg(const std::string& s) { return Prompt::parse(s); }

std::string r_curve_csv(const BlendResult& r) {
    std::string out = "step,t,R\n";
    for (std::size_t i = 0; i < r.r_values.size(); ++i)
        out += std::to_string(i) + "," + std::to_string(r.timesteps[i]) + "," + fixed6(r.r_values[i]) + "\n";
    return out;
}

struct Cli {
    RunConfig cfg;
    std::string config_path;
    std::map<std::string, std::string> overrides;
    std::string out, ckpt, base, guidance, edit, prompt, image, source_prompt, inverter, attention, trajectory, metrics;
    bool scenes = false;
    int t = 400;

    void add_common(CLI::App* sub) {
        sub->add_option("--config", config_path, "key=value config file");
        for (const auto& k : RunConfig::keys()) {
            std::string flag = "--" + std::string(k.name);
            std::replace(flag.begin() + 2, flag.end(), '_', '-');
            const std::string key = k.name;
            sub->add_option_function<std::string>(flag, [this, key](const std::string& v) { overrides[key] = v; },
                                                  k.help);
        }
    }

    void resolve() {
        if (!config_path.empty()) cfg.apply_text(read_file(config_path));
        for (const auto& k : RunConfig::keys()) {
            const auto it = overrides.find(k.name);
            if (it != overrides.end()) cfg.set(k.name, it->second);
        }
    }

    Checkpoint need(const std::string& path, const char* what) {
        require(!path.empty(), ErrorCode::invalid_argument, std::string("missing --") + what);
        return load_checkpoint(path);
    }
};

int run_pretrain(Cli& c) {
    const NoiseSchedule sched = make_schedule();
    const PretrainResult r = pretrain(c.cfg.pretrain(), sched, [](int step, double loss) {
        if (step % 1000 == 0) std::cout << "step " << step << " loss " << fixed6(loss) << "\n" << std::flush;
    });
    save_checkpoint(r.ckpt, c.out);
    std::cout << "wrote " << c.out << "\n";
    return 0;
}

int run_make_subject(Cli& c) {
    const ArchDescriptor arch = c.cfg.arch_descriptor();
    const SubjectSet set = make_subject_set(c.cfg.sprite_seed, arch.image_size);
    const fs::path dir = c.out;
    Tensor sprite({1, glyph_size, glyph_size});
    std::copy(set.sprite.begin(), set.sprite.end(), sprite.data().begin());
    write_image_pgm(sprite, dir / "sprite.pgm");
    for (std::size_t i = 0; i < set.images.size(); ++i)
        write_image_pgm(set.images[i], dir / ("subject_" + std::to_string(i) + ".pgm"));
    if (c.scenes) {
        const auto& v = Vocabulary::standard();
        for (int o = 0; o < Vocabulary::kinds_per_slot; ++o)
            for (int b = 0; b < Vocabulary::kinds_per_slot; ++b)
                for (int p = 0; p < Vocabulary::kinds_per_slot; ++p) {
                    SceneSpec s;
                    s.object = Vocabulary::first_object + o;
                    s.background = Vocabulary::first_background + b;
                    s.position = Vocabulary::first_position + p;
                    write_image_pgm(render_scene_at(s, arch.image_size),
                                    dir / "scenes" / (v.token(s.object) + "_" + v.token(s.background) + "_" +
                                                      v.token(s.position) + ".pgm"));
                }
    }
    std::cout << "prompt " << set.prompt.str() << "\n";
    return 0;
}

int run_finetune(Cli& c) {
    const Checkpoint base = c.need(c.base, "base");
    const NoiseSchedule sched = make_schedule();
    const SubjectSet set = make_subject_set(c.cfg.sprite_seed, base.arch.image_size);
    const FinetuneResult r = finetune(base, set.images, set.prompt, FinetuneSchedule::standard(c.cfg.finetune_steps),
                                      c.cfg.finetune(), sched);
    const fs::path dir = c.out;
    fs::create_directories(dir);
    for (const Checkpoint& ck : r.trajectory) save_checkpoint(ck, dir / step_name(ck.finetune_step));
    std::cout << "wrote " << r.trajectory.size() << " checkpoints to " << dir.string() << "\n";
    if (r.diverged) {
        std::cerr << "error: " << r.error << "\n";
        return 1;
    }
    return 0;
}

int run_sample(Cli& c) {
    const Checkpoint ck = c.need(c.ckpt, "ckpt");
    const Prompt p = prompt_arg(c.prompt);
    const SamplerConfig sc = c.cfg.sampler();
    const SampleResult r = ddim_sample(ck, p, sc, make_schedule(), !c.attention.empty());
    write_image_pgm(r.image, c.out);
    if (!c.attention.empty()) save_attention({*r.record, p, sc}, c.attention);
    return 0;
}

int run_blend(Cli& c) {
    const Checkpoint G = c.need(c.guidance, "guidance");
    const Checkpoint E = c.need(c.edit, "edit");
    const Prompt p = prompt_arg(c.prompt);
    const GuidanceConfig gc = c.cfg.guidance();
    const BlendResult r = dreamblend(G, E, p, gc, make_schedule());
    const fs::path dir = c.out;
    write_image_pgm(r.image, dir / "blend.pgm");
    write_image_pgm(r.reference, dir / "reference.pgm");
    write_image_pgm(r.baseline, dir / "baseline.pgm");
    write_file(dir / "r_curve.csv", r_curve_csv(r));
    save_attention({r.reference_record, p, gc.sampler(gc.cfg_guidance)}, dir / "reference.dbatn");
    save_attention({r.edit_record, p, gc.sampler(gc.cfg_edit)}, dir / "edit.dbatn");
    return 0;
}

int run_invert_edit(Cli& c) {
    const Checkpoint G = c.need(c.guidance, "guidance");
    const Checkpoint E = c.need(c.edit, "edit");
    const Checkpoint inv = c.inverter.empty() ? E : load_checkpoint(c.inverter);
    const NoiseSchedule sched = make_schedule();
    require(!c.image.empty(), ErrorCode::invalid_argument, "missing --image");
    const Tensor img = read_image_pgm(c.image);
    const Prompt src = c.source_prompt.empty() ? Prompt::parse("<sks>,plain,center") : prompt_arg(c.source_prompt);
    const Tensor l_T = ddim_invert(inv, img, src, c.cfg.steps, sched);
    const BlendResult r = dreamblend_from(G, E, prompt_arg(c.prompt), c.cfg.guidance(), sched, l_T, false);
    write_image_pgm(r.image, c.out);
    return 0;
}

EvalPlan plan_for(const RunConfig& cfg) {
    require(cfg.eval_seeds >= 1, ErrorCode::invalid_argument, "eval_seeds must be >= 1");
    EvalPlan plan;
    plan.steps = cfg.steps;
    plan.seeds.clear();
    for (int s = 0; s < cfg.eval_seeds; ++s) plan.seeds.push_back(cfg.seed + std::uint64_t(s));
    return plan;
}

int run_eval(Cli& c) {
    require(!c.trajectory.empty(), ErrorCode::invalid_argument, "missing --trajectory");
    const std::vector<Checkpoint> traj = load_trajectory(c.trajectory);
    std::map<int, const Checkpoint*> by_step;
    for (const Checkpoint& ck : traj) by_step[int(ck.finetune_step)] = &ck;
    std::optional<Checkpoint> base;
    if (!c.base.empty()) {
        base = load_checkpoint(c.base);
        by_step[0] = &*base;
    }
    const NoiseSchedule sched = make_schedule();
    const EvalPlan plan = plan_for(c.cfg);
    const Bitmap sprite = make_sprite(c.cfg.sprite_seed);
    std::vector<MetricsRow> rows;
    for (const auto& [step, ck] : by_step) {
        rows.push_back(evaluate_checkpoint(*ck, plan, c.cfg.cfg, sprite, sched).row);
        std::cerr << "checkpoint " << step << " done\n";
    }
    std::vector<int> saved;
    for (const Checkpoint& ck : traj) saved.push_back(int(ck.finetune_step));
    for (const auto& [g, e] : blend_pairs(saved, c.cfg.edit_steps)) {
        require(by_step.count(e), ErrorCode::invalid_argument, "edit step " + std::to_string(e) + " not in trajectory");
        if (!by_step.count(g)) {
            std::cerr << "skipping guidance step " << g << " (pass --base for the pretrained model)\n";
            continue;
        }
        GuidanceConfig gc = c.cfg.guidance();
        const BlendSetting bs = blend_setting(e);
        gc.alpha = bs.alpha;
        gc.cfg_edit = bs.cfg_edit;
        rows.push_back(evaluate_blend(*by_step[g], *by_step[e], plan, gc, sprite, sched).row);
        std::cerr << "blend " << g << " -> " << e << " done\n";
    }
    write_metrics_csv(rows, c.out);
    return 0;
}

int run_pareto(Cli& c) {
    require(!c.metrics.empty(), ErrorCode::invalid_argument, "missing --metrics");
    const std::vector<MetricsRow> rows = read_metrics_csv(c.metrics);
    const std::vector<MetricsRow> front = pareto_front(rows);
    write_metrics_csv(front, c.out);
    const MetricsRow best = select_operating_point(rows);
    std::cout << front.size() << " of " << rows.size() << " operating points on the Pareto front\n"
              << "F1-selected: guidance_step=" << best.guidance_step << " edit_step=" << best.edit_step
              << " subject=" << fixed6(best.subject_fidelity) << " prompt=" << fixed6(best.prompt_fidelity)
              << " f1=" << fixed6(best.f1) << "\n";
    return 0;
}

int run_collapse(Cli& c) {
    std::vector<Checkpoint> cks;
    if (!c.trajectory.empty()) cks = load_trajectory(c.trajectory);
    if (!c.ckpt.empty()) cks.push_back(load_checkpoint(c.ckpt));
    require(!cks.empty(), ErrorCode::invalid_argument, "pass --trajectory or --ckpt");
    const NoiseSchedule sched = make_schedule();
    const EvalPlan plan = plan_for(c.cfg);
    std::string csv = "finetune_step,background_fraction,position_fraction,aggregate\n";
    for (const Checkpoint& ck : cks) {
        double frac[2] = {0, 0}, agg = 0;
        std::size_t n = 0;
        for (const Prompt& p : plan.prompts)
            for (std::uint64_t seed : plan.seeds) {
                SamplerConfig sc = c.cfg.sampler();
                sc.seed = seed;
                const SampleResult r = ddim_sample(ck, p, sc, sched, true);
                const CollapseReport rep = attention_collapse(*r.record, p, plan.collapse);
                for (std::size_t k = 0; k < 2 && k < rep.fractions.size(); ++k) frac[k] += rep.fractions[k];
                agg += rep.aggregate;
                ++n;
            }
        csv += std::to_string(ck.finetune_step) + "," + fixed6(frac[0] / double(n)) + "," + fixed6(frac[1] / double(n)) +
               "," + fixed6(agg / double(n)) + "\n";
    }
    write_file(c.out, csv);
    return 0;
}

int run_grad_check(Cli& c) {
    const ArchDescriptor arch = c.cfg.arch_descriptor();
    const Checkpoint G = c.guidance.empty() ? init_params(c.cfg.seed + 1, arch) : load_checkpoint(c.guidance);
    const Checkpoint E = c.edit.empty() ? init_params(c.cfg.seed + 2, arch) : load_checkpoint(c.edit);
    const Prompt p = c.prompt.empty() ? Prompt::parse("<sks>,checker,top") : prompt_arg(c.prompt);
    const CompositeGradCheck r = guidance_grad_check(G, E, p, c.t, c.cfg.seed, c.cfg.reduction);
    std::cout << "grad-check t=" << c.t << " coords " << r.coords << "/" << r.total << " rel_err f64 " << r.rel_error_f64
              << " f32 " << r.rel_error_f32 << " (worst element f64 " << r.max_elem_f64 << ", f32 " << r.max_elem_f32
              << ") " << r.seconds << "s: " << (r.passed ? "PASS" : "FAIL") << "\n";
    return r.passed ? 0 : 1;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
    CLI::App app{"DreamBlend toy diffusion lab"};
    app.require_subcommand(1);
    Cli c;

    auto* pre = app.add_subcommand("pretrain", "train the base denoiser on the scene corpus");
    pre->add_option("--out", c.out, "checkpoint path")->required();
    auto* mk = app.add_subcommand("make-subject", "render the subject sprite and its four training images");
    mk->add_option("--out", c.out, "output directory")->required();
    mk->add_flag("--scenes", c.scenes, "also render every corpus scene");
    auto* ft = app.add_subcommand("finetune", "finetune on the subject and save the checkpoint trajectory");
    ft->add_option("--base", c.base, "pretrained checkpoint")->required();
    ft->add_option("--out", c.out, "trajectory directory")->required();
    auto* sm = app.add_subcommand("sample", "DDIM sampling with classifier-free guidance");
    sm->add_option("--ckpt", c.ckpt, "checkpoint")->required();
    sm->add_option("--prompt", c.prompt, "object,background,position")->required();
    sm->add_option("--out", c.out, "output PGM")->required();
    sm->add_option("--attention", c.attention, "optional attention dump path");
    auto* bl = app.add_subcommand("blend", "cross-attention guided synthesis");
    bl->add_option("--guidance", c.guidance, "guidance (underfit) checkpoint")->required();
    bl->add_option("--edit", c.edit, "edit (overfit) checkpoint")->required();
    bl->add_option("--prompt", c.prompt, "object,background,position")->required();
    bl->add_option("--out", c.out, "output directory")->required();
    auto* ie = app.add_subcommand("invert-edit", "invert an image with DDIM, then blend from its latent");
    ie->add_option("--image", c.image, "input PGM")->required();
    ie->add_option("--guidance", c.guidance, "guidance checkpoint")->required();
    ie->add_option("--edit", c.edit, "edit checkpoint")->required();
    ie->add_option("--inverter", c.inverter, "checkpoint used for inversion (default: edit)");
    ie->add_option("--source-prompt", c.source_prompt, "prompt describing the input image");
    ie->add_option("--prompt", c.prompt, "target prompt")->required();
    ie->add_option("--out", c.out, "output PGM")->required();
    auto* ev = app.add_subcommand("eval", "score every checkpoint and the blend grid");
    ev->add_option("--trajectory", c.trajectory, "trajectory directory")->required();
    ev->add_option("--base", c.base, "pretrained checkpoint (guidance step 0)");
    ev->add_option("--out", c.out, "metrics CSV")->required();
    auto* pa = app.add_subcommand("pareto", "Pareto front and F1 operating point of a metrics CSV");
    pa->add_option("--metrics", c.metrics, "metrics CSV")->required();
    pa->add_option("--out", c.out, "front CSV")->required();
    auto* co = app.add_subcommand("collapse", "attention collapse per checkpoint");
    co->add_option("--trajectory", c.trajectory, "trajectory directory");
    co->add_option("--ckpt", c.ckpt, "single checkpoint");
    co->add_option("--out", c.out, "collapse CSV")->required();
    auto* gc = app.add_subcommand("grad-check", "finite-difference check of the guidance gradient");
    gc->add_option("--guidance", c.guidance, "guidance checkpoint (default: random init)");
    gc->add_option("--edit", c.edit, "edit checkpoint (default: random init)");
    gc->add_option("--prompt", c.prompt, "prompt");
    gc->add_option("--t", c.t, "timestep");
    for (CLI::App* sub : {pre, mk, ft, sm, bl, ie, ev, pa, co, gc}) c.add_common(sub);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        c.resolve();
        if (*pre) return run_pretrain(c);
        if (*mk) return run_make_subject(c);
        if (*ft) return run_finetune(c);
        if (*sm) return run_sample(c);
        if (*bl) return run_blend(c);
        if (*ie) return run_invert_edit(c);
        if (*ev) return run_eval(c);
        if (*pa) return run_pareto(c);
        if (*co) return run_collapse(c);
        if (*gc) return run_grad_check(c);
    } catch (const Error& e) {
        std::cerr << "error (" << error_code_name(e.code()) << "): " << e.what() << "\n";
        return e.code() == ErrorCode::invalid_argument ? 2 : 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

int cli_main(const std::vector<std::string>& args) {
    std::vector<const char*> argv{"dblend"};
    for (const std::string& a : args) argv.push_back(a.c_str());
    return cli_main(int(argv.size()), argv.data());
}

}  // namespace dblend
