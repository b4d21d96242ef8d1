#include "dblend/guidance.hpp"

#include <cmath>

namespace dblend {

const char* reduction_name(Reduction r) { return r == Reduction::mean ? "mean" : "sum"; }

Reduction parse_reduction(std::string_view s) {
    if (s == "mean") return Reduction::mean;
    if (s == "sum") return Reduction::sum;
    fail(ErrorCode::invalid_argument, "reduction must be mean or sum, got '" + std::string(s) + "'");
}

void GuidanceConfig::validate() const {
    require(steps >= 1, ErrorCode::invalid_argument, "guidance needs at least one step");
    require(alpha >= 0 && std::isfinite(alpha), ErrorCode::invalid_argument, "alpha must be finite and >= 0");
    for (double s : {cfg_guidance, cfg_edit})
        require(s == 0.0 || s >= 1.0, ErrorCode::invalid_argument, "cfg scales must be 0 or >= 1");
    for (int l : layers) require(l >= 0, ErrorCode::invalid_argument, "layer indices must be non-negative");
}

SamplerConfig GuidanceConfig::sampler(double cfg_scale) const {
    SamplerConfig s;
    s.num_steps = steps;
    s.cfg_scale = cfg_scale;
    s.seed = seed;
    s.attention_source = attention_source;
    return s;
}

namespace {

std::vector<std::size_t> selected_layers(const std::vector<int>& layers, std::size_t count) {
    std::vector<std::size_t> out;
    if (layers.empty()) {
        for (std::size_t i = 0; i < count; ++i) out.push_back(i);
        return out;
    }
    for (int l : layers) {
        require(l >= 0 && std::size_t(l) < count, ErrorCode::invalid_argument,
                "attention layer " + std::to_string(l) + " does not exist (model has " + std::to_string(count) + ")");
        out.push_back(std::size_t(l));
    }
    return out;
}

}  // namespace

double attention_loss(const std::vector<Tensor>& a_ref, const std::vector<Tensor>& a, Reduction reduction,
                      const std::vector<int>& layers) {
    require(a_ref.size() == a.size(), ErrorCode::shape_mismatch, "attention_loss: layer counts differ");
    double total = 0;
    std::size_t n = 0;
    for (std::size_t l : selected_layers(layers, a.size())) {
        require(a_ref[l].shape() == a[l].shape(), ErrorCode::shape_mismatch,
                "attention_loss: layer " + std::to_string(l) + " shapes " + shape_str(a_ref[l].shape()) + " vs " +
                    shape_str(a[l].shape()));
        for (std::size_t i = 0; i < a[l].numel(); ++i) total += std::abs(double(a_ref[l][i]) - double(a[l][i]));
        n += a[l].numel();
    }
    return reduction == Reduction::mean && n > 0 ? total / double(n) : total;
}

template <typename T>
AttentionGradient<T> attention_gradient(const Checkpoint& E, const BasicTensor<T>& l, int t, const BasicTensor<T>& c,
                                        const std::vector<BasicTensor<T>>& a_ref, Reduction reduction,
                                        const std::vector<int>& layers, bool want_grad) {
    Tape<T> tape;
    const ParamNodes<T> params = bind_params(tape, E);
    const NodeId ln = tape.leaf(l);
    const NodeId cn = tape.leaf(c);
    const UnetNodes<T> nodes = unet_graph(tape, E.arch, params, ln, t, cn, true);
    require(a_ref.size() == nodes.maps.size(), ErrorCode::shape_mismatch,
            "reference holds " + std::to_string(a_ref.size()) + " attention layers, model has " +
                std::to_string(nodes.maps.size()));
    const std::vector<std::size_t> sel = selected_layers(layers, nodes.maps.size());
    std::size_t total = 0;
    for (std::size_t k : sel) total += tape.value(nodes.maps[k]).numel();
    NodeId R = no_node;
    for (std::size_t k : sel) {
        require(a_ref[k].shape() == tape.value(nodes.maps[k]).shape(), ErrorCode::shape_mismatch,
                "reference map shape " + shape_str(a_ref[k].shape()) + " does not match the model");
        const std::size_t n = tape.value(nodes.maps[k]).numel();
        NodeId term = tape.mean(tape.abs(tape.sub(tape.leaf(a_ref[k]), nodes.maps[k])));
        const double w = reduction == Reduction::mean ? double(n) / double(total) : double(n);
        if (w != 1.0) term = tape.scale(term, T(w));
        R = R == no_node ? term : tape.add(R, term);
    }
    AttentionGradient<T> out;
    out.R = double(tape.value(R).item());
    out.eps_cond = tape.value(nodes.eps);
    for (NodeId m : nodes.maps) out.maps.push_back(tape.value(m));
    if (want_grad) {
        const NodeId wrt[] = {ln};
        out.grad = std::move(tape.backward(R, wrt)[0]);
    }
    return out;
}

ReferenceRun record_reference(const Checkpoint& G, const Prompt& prompt, const GuidanceConfig& cfg,
                              const NoiseSchedule& sched) {
    cfg.validate();
    SampleResult s = ddim_sample(G, prompt, cfg.sampler(cfg.cfg_guidance), sched, true);
    return ReferenceRun{std::move(*s.record), std::move(s.image), std::move(s.l_init)};
}

ReferenceRun record_reference_from(const Checkpoint& G, const Prompt& prompt, const GuidanceConfig& cfg,
                                   const NoiseSchedule& sched, const Tensor& l_init) {
    cfg.validate();
    SampleResult s = ddim_sample_from(G, prompt, cfg.sampler(cfg.cfg_guidance), sched, l_init, true);
    return ReferenceRun{std::move(*s.record), std::move(s.image), std::move(s.l_init)};
}

GuidedStep guided_step(const Checkpoint& E, const Tensor& l, int t, int t_prev, const Tensor& c, const Tensor& c_null,
                       const std::vector<Tensor>& a_ref_t, const GuidanceConfig& cfg, const NoiseSchedule& sched) {
    GuidedStep out;
    AttentionGradient<float> ag;
    try {
        ag = attention_gradient<float>(E, l, t, c, a_ref_t, cfg.reduction, cfg.layers, cfg.alpha != 0.0);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::non_finite) throw;
        fail(ErrorCode::non_finite, "guidance gradient at t=" + std::to_string(t) + ": " + e.what());
    }
    out.R = ag.R;
    out.maps = std::move(ag.maps);

    Tensor l_upd = l;
    if (cfg.alpha != 0.0) {
        const float a = float(cfg.alpha);
        for (std::size_t i = 0; i < l_upd.numel(); ++i) l_upd[i] = l[i] - a * ag.grad[i];
        require(l_upd.all_finite(), ErrorCode::non_finite,
                "guided latent update produced non-finite values at t=" + std::to_string(t));
    }

    Tensor eps;
    if (cfg.reuse_epsilon) {
        const double s = cfg.cfg_edit;
        if (s == 1.0) {
            eps = std::move(ag.eps_cond);
        } else {
            const Tensor null = unet_forward(E, l, t, c_null, false).eps;
            if (s == 0.0) {
                eps = null;
            } else {
                eps = Tensor(l.shape());
                const float sf = float(s);
                for (std::size_t i = 0; i < eps.numel(); ++i) eps[i] = null[i] + sf * (ag.eps_cond[i] - null[i]);
            }
        }
    } else {
        eps = cfg_epsilon(E, l_upd, t, c, c_null, cfg.cfg_edit, false).eps;
    }
    out.l_prev = ddim_step(l_upd, t, t_prev, eps, sched);
    return out;
}

BlendResult dreamblend(const Checkpoint& G, const Checkpoint& E, const Prompt& prompt, const GuidanceConfig& cfg,
                       const NoiseSchedule& sched, bool with_baseline) {
    return dreamblend_from(G, E, prompt, cfg, sched, initial_latent(G.arch, cfg.seed), with_baseline);
}

BlendResult dreamblend_from(const Checkpoint& G, const Checkpoint& E, const Prompt& prompt, const GuidanceConfig& cfg,
                            const NoiseSchedule& sched, const Tensor& l_init, bool with_baseline) {
    cfg.validate();
    require(G.vocab_hash == E.vocab_hash, ErrorCode::vocab_mismatch,
            "guidance and edit checkpoints use different vocabularies");
    require(G.arch == E.arch, ErrorCode::invalid_argument, "guidance and edit checkpoints differ in architecture");

    BlendResult res;
    ReferenceRun ref = record_reference_from(G, prompt, cfg, sched, l_init);
    res.reference = std::move(ref.image);
    res.l_init = ref.l_init;
    res.reference_record = std::move(ref.a_ref);
    if (with_baseline)
        res.baseline = ddim_sample_from(E, prompt, cfg.sampler(cfg.cfg_edit), sched, res.l_init, false).image;

    const std::vector<int> ts = sampling_timesteps(sched, cfg.steps);
    require(res.reference_record.steps() == ts.size(), ErrorCode::invalid_argument,
            "reference record and edit phase use different step counts");
    const Tensor c = encode_prompt(E, prompt);
    const Tensor c_null = encode_prompt(E, Prompt::null());
    res.edit_record.height = res.reference_record.height;
    res.edit_record.width = res.reference_record.width;
    Tensor l = res.l_init;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i], t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        require(res.reference_record.timesteps[i] == t, ErrorCode::invalid_argument,
                "reference record timesteps do not match the sampling schedule");
        GuidedStep g = guided_step(E, l, t, t_prev, c, c_null, res.reference_record.maps[i], cfg, sched);
        res.timesteps.push_back(t);
        res.r_values.push_back(g.R);
        res.edit_record.timesteps.push_back(t);
        res.edit_record.maps.push_back(std::move(g.maps));
        l = std::move(g.l_prev);
    }
    res.image = clamp_image(l);
    return res;
}

template AttentionGradient<float> attention_gradient<float>(const Checkpoint&, const Tensor&, int, const Tensor&,
                                                            const std::vector<Tensor>&, Reduction,
                                                            const std::vector<int>&, bool);
template AttentionGradient<double> attention_gradient<double>(const Checkpoint&, const TensorD&, int, const TensorD&,
                                                              const std::vector<TensorD>&, Reduction,
                                                              const std::vector<int>&, bool);

}  // namespace dblend
