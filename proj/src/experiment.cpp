#include "dblend/experiment.hpp"

#include <chrono>
#include <cmath>
#include <numeric>

#include "dblend/parallel.hpp"

namespace dblend {

std::vector<Prompt> heldout_prompts() {
    return {Prompt::make("<sks>", "stripes", "left"), Prompt::make("<sks>", "checker", "top"),
            Prompt::make("<sks>", "gradient", "right"), Prompt::make("<sks>", "noise", "bottom"),
            Prompt::make("<sks>", "checker", "left")};
}

namespace {

void score(OperatingPoint& op, const EvalPlan& plan, const Bitmap& sprite) {
    const std::size_t S = plan.seeds.size();
    op.subject.resize(op.images.size());
    op.prompt.resize(op.images.size());
    parallel_for(op.images.size(), [&](std::size_t i) {
        op.subject[i] = subject_fidelity(op.images[i], sprite);
        op.prompt[i] = prompt_fidelity(op.images[i], plan.prompts[i / S], sprite);
    });
    const double n = double(op.images.size());
    op.row.subject_fidelity = std::accumulate(op.subject.begin(), op.subject.end(), 0.0) / n;
    op.row.prompt_fidelity = std::accumulate(op.prompt.begin(), op.prompt.end(), 0.0) / n;
    double div = 0;
    if (S >= 2) {
        for (std::size_t p = 0; p < plan.prompts.size(); ++p)
            div += diversity_score(std::vector<Tensor>(op.images.begin() + std::ptrdiff_t(p * S),
                                                       op.images.begin() + std::ptrdiff_t((p + 1) * S)));
        div /= double(plan.prompts.size());
    }
    op.row.diversity = div;
    op.row.n_images = int(op.images.size());
    op.row.finalize();
}

void check_plan(const EvalPlan& plan) {
    require(!plan.prompts.empty() && !plan.seeds.empty(), ErrorCode::invalid_argument,
            "evaluation needs at least one prompt and one seed");
}

}  // namespace

OperatingPoint evaluate_checkpoint(const Checkpoint& ckpt, const EvalPlan& plan, double cfg_scale, const Bitmap& sprite,
                                   const NoiseSchedule& sched) {
    check_plan(plan);
    const std::size_t S = plan.seeds.size(), n = plan.prompts.size() * S;
    const bool collapse = std::size_t(plan.steps) > plan.collapse.step_index;
    OperatingPoint op;
    op.images.resize(n);
    std::vector<double> agg(n, 0.0);
    parallel_for(n, [&](std::size_t i) {
        SamplerConfig sc;
        sc.num_steps = plan.steps;
        sc.cfg_scale = cfg_scale;
        sc.seed = plan.seeds[i % S];
        SampleResult r = ddim_sample(ckpt, plan.prompts[i / S], sc, sched, collapse);
        op.images[i] = std::move(r.image);
        if (collapse) agg[i] = attention_collapse(*r.record, plan.prompts[i / S], plan.collapse).aggregate;
    });
    op.row.guidance_step = op.row.edit_step = int(ckpt.finetune_step);
    op.row.cfg = cfg_scale;
    op.collapse = std::accumulate(agg.begin(), agg.end(), 0.0) / double(n);
    score(op, plan, sprite);
    return op;
}

OperatingPoint evaluate_blend(const Checkpoint& G, const Checkpoint& E, const EvalPlan& plan, const GuidanceConfig& cfg,
                              const Bitmap& sprite, const NoiseSchedule& sched) {
    check_plan(plan);
    const std::size_t S = plan.seeds.size(), n = plan.prompts.size() * S;
    OperatingPoint op;
    op.images.resize(n);
    parallel_for(n, [&](std::size_t i) {
        GuidanceConfig c = cfg;
        c.steps = plan.steps;
        c.seed = plan.seeds[i % S];
        op.images[i] = dreamblend(G, E, plan.prompts[i / S], c, sched, false).image;
    });
    op.row.guidance_step = int(G.finetune_step);
    op.row.edit_step = int(E.finetune_step);
    op.row.alpha = cfg.alpha;
    op.row.cfg = cfg.cfg_edit;
    score(op, plan, sprite);
    return op;
}

BlendSetting blend_setting(int edit_step) { return edit_step <= 150 ? BlendSetting{0.1, 3.0} : BlendSetting{0.07, 2.0}; }

std::vector<std::pair<int, int>> blend_pairs(const std::vector<int>& save_steps, const std::vector<int>& edit_steps) {
    std::vector<std::pair<int, int>> out;
    for (int e : edit_steps) {
        out.emplace_back(0, e);
        for (int g : save_steps)
            if (g < e) out.emplace_back(g, e);
    }
    return out;
}

CompositeGradCheck guidance_grad_check(const Checkpoint& G, const Checkpoint& E, const Prompt& prompt, int t,
                                       std::uint64_t seed, Reduction reduction) {
    const auto start = std::chrono::steady_clock::now();
    const NoiseSchedule sched = make_schedule();
    // A partially denoised latent is more representative than pure noise.
    const Tensor l32 = q_sample(render_scene_at(SceneSpec::from_prompt(Prompt::make("circle", "stripes", "center")),
                                                E.arch.image_size),
                                t, initial_latent(E.arch, seed), sched);
    const TensorD l = l32.cast<double>();
    const TensorD c = encode_prompt(E, prompt).cast<double>();
    std::vector<TensorD> ref64;
    std::vector<Tensor> ref32 = unet_forward(G, l32, t, encode_prompt(G, prompt), true).maps;
    for (const Tensor& m : ref32) ref64.push_back(m.cast<double>());

    const TensorD analytic = attention_gradient<double>(E, l, t, c, ref64, reduction, {}, true).grad;
    const Tensor single = attention_gradient<float>(E, l32, t, encode_prompt(E, prompt), ref32, reduction, {}, true).grad;
    auto signs = [&](const std::vector<TensorD>& maps) {
        std::vector<signed char> out;
        for (std::size_t k = 0; k < maps.size(); ++k)
            for (std::size_t j = 0; j < maps[k].numel(); ++j) {
                const double d = ref64[k][j] - maps[k][j];
                out.push_back(d > 0 ? 1 : d < 0 ? -1 : 0);
            }
        return out;
    };
    const auto base_signs = signs(attention_gradient<double>(E, l, t, c, ref64, reduction, {}, false).maps);

    // R is piecewise smooth (|.| kinks); shrink the step until every probe stays in
    // the sign region of the base point, where the 5-point stencil is valid.
    std::vector<double> fd(l.numel());
    std::vector<char> valid(l.numel(), 0);
    parallel_for(l.numel(), [&](std::size_t i) {
        for (double h : {1e-3, 3e-4, 1e-4, 3e-5, 1e-5, 3e-6, 1e-6}) {
            double r[4];
            bool smooth = true;
            const double offs[4] = {h, -h, 2 * h, -2 * h};
            for (int k = 0; k < 4 && smooth; ++k) {
                TensorD probe = l;
                probe[i] = l[i] + offs[k];
                const auto out = attention_gradient<double>(E, probe, t, c, ref64, reduction, {}, false);
                smooth = signs(out.maps) == base_signs;
                r[k] = out.R;
            }
            if (!smooth) continue;
            fd[i] = (8 * (r[0] - r[1]) - (r[2] - r[3])) / (12 * h);
            valid[i] = 1;
            return;
        }
    });
    double scale = 0;
    for (std::size_t i = 0; i < fd.size(); ++i) scale = std::max(scale, std::abs(fd[i]));

    CompositeGradCheck out;
    out.total = fd.size();
    double nn = 0, e64 = 0, e32 = 0;
    for (std::size_t i = 0; i < fd.size(); ++i) {
        if (!valid[i]) continue;
        ++out.coords;
        const double n = fd[i];
        const double a = analytic[i], s = single[i];
        nn += n * n;
        e64 += (a - n) * (a - n);
        e32 += (s - n) * (s - n);
        const double floor = 1e-3 * scale;
        out.max_elem_f64 = std::max(out.max_elem_f64, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
        out.max_elem_f32 = std::max(out.max_elem_f32, std::abs(s - n) / std::max({std::abs(s), std::abs(n), floor}));
    }
    out.rel_error_f64 = nn > 0 ? std::sqrt(e64 / nn) : 1.0;
    out.rel_error_f32 = nn > 0 ? std::sqrt(e32 / nn) : 1.0;
    out.passed = scale > 0 && out.coords * 10 >= fd.size() * 9 && out.rel_error_f64 <= 1e-6 && out.rel_error_f32 <= 1e-4;
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

}  // namespace dblend
