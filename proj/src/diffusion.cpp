#include "dblend/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "dblend/rng.hpp"

namespace dblend {

double NoiseSchedule::ab(int t) const {
    require(t >= 0 && t <= T_train, ErrorCode::invalid_argument,
            "timestep " + std::to_string(t) + " outside [0, " + std::to_string(T_train) + "]");
    return alpha_bar[std::size_t(t)];
}

NoiseSchedule make_schedule(int T_train, double beta_start, double beta_end) {
    require(T_train >= 1, ErrorCode::invalid_argument, "T_train must be positive");
    require(beta_start > 0 && beta_start < beta_end && beta_end < 1, ErrorCode::invalid_argument,
            "need 0 < beta_start < beta_end < 1");
    NoiseSchedule s;
    s.T_train = T_train;
    s.beta.assign(std::size_t(T_train) + 1, 0.0);
    s.alpha_bar.assign(std::size_t(T_train) + 1, 1.0);
    for (int t = 1; t <= T_train; ++t) {
        const double frac = T_train == 1 ? 0.0 : double(t - 1) / double(T_train - 1);
        s.beta[std::size_t(t)] = beta_start + (beta_end - beta_start) * frac;
        s.alpha_bar[std::size_t(t)] = s.alpha_bar[std::size_t(t) - 1] * (1.0 - s.beta[std::size_t(t)]);
    }
    return s;
}

std::vector<int> sampling_timesteps(const NoiseSchedule& sched, int num_steps) {
    require(num_steps >= 1 && num_steps <= sched.T_train && sched.T_train % num_steps == 0,
            ErrorCode::invalid_argument,
            "num_steps " + std::to_string(num_steps) + " must divide T_train " + std::to_string(sched.T_train));
    const int stride = sched.T_train / num_steps;
    std::vector<int> ts;
    for (int t = sched.T_train; t > 0; t -= stride) ts.push_back(t);
    return ts;
}

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* what) {
    require(a.shape() == b.shape(), ErrorCode::shape_mismatch,
            std::string(what) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor q_sample(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& sched) {
    require_same(x0, noise, "q_sample");
    const double ab = sched.ab(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = float(a * double(x0[i]) + b * double(noise[i]));
    return out;
}

Tensor predict_x0(const Tensor& l, int t, const Tensor& eps, const NoiseSchedule& sched) {
    require_same(l, eps, "predict_x0");
    const double ab = sched.ab(t);
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    Tensor out(l.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = float((double(l[i]) - sb * double(eps[i])) / sa);
    return out;
}

Tensor ddim_step(const Tensor& l, int t, int t_prev, const Tensor& eps, const NoiseSchedule& sched) {
    require(t > t_prev && t_prev >= 0, ErrorCode::invalid_argument,
            "ddim_step needs t > t_prev >= 0, got " + std::to_string(t) + " -> " + std::to_string(t_prev));
    require_same(l, eps, "ddim_step");
    const double ab = sched.ab(t), abp = sched.ab(t_prev);
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    const double spa = std::sqrt(abp), spb = std::sqrt(1.0 - abp);
    Tensor out(l.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double e = double(eps[i]);
        const double x0 = (double(l[i]) - sb * e) / sa;
        out[i] = float(spa * x0 + spb * e);
    }
    return out;
}

Tensor ddim_step_inverse(const Tensor& l_prev, int t_prev, int t, const Tensor& eps, const NoiseSchedule& sched) {
    require(t > t_prev && t_prev >= 0, ErrorCode::invalid_argument,
            "ddim inverse step needs t > t_prev >= 0, got " + std::to_string(t_prev) + " -> " + std::to_string(t));
    require_same(l_prev, eps, "ddim_step_inverse");
    const double ab = sched.ab(t), abp = sched.ab(t_prev);
    const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
    const double spa = std::sqrt(abp), spb = std::sqrt(1.0 - abp);
    Tensor out(l_prev.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double e = double(eps[i]);
        const double x0 = (double(l_prev[i]) - spb * e) / spa;
        out[i] = float(sa * x0 + sb * e);
    }
    return out;
}

const char* attention_source_name(AttentionSource s) {
    return s == AttentionSource::conditional ? "conditional" : "unconditional";
}

AttentionSource parse_attention_source(std::string_view s) {
    if (s == "conditional") return AttentionSource::conditional;
    if (s == "unconditional") return AttentionSource::unconditional;
    fail(ErrorCode::invalid_argument, "attention source must be conditional or unconditional, got '" +
                                          std::string(s) + "'");
}

CfgOutput cfg_epsilon(const Checkpoint& ckpt, const Tensor& l, int t, const Tensor& c_cond, const Tensor& c_null,
                      double scale, bool record, AttentionSource source) {
    require(scale == 0.0 || scale >= 1.0, ErrorCode::invalid_argument,
            "cfg scale must be 0 (unconditional) or >= 1, got " + std::to_string(scale));
    const bool cond_maps = source == AttentionSource::conditional;
    CfgOutput out;
    if (scale == 1.0 || scale == 0.0) {
        const bool use_cond = scale == 1.0;
        UnetOutput u = unet_forward(ckpt, l, t, use_cond ? c_cond : c_null, record && use_cond == cond_maps);
        out.eps = std::move(u.eps);
        if (record) {
            if (use_cond == cond_maps)
                out.maps = std::move(u.maps);
            else
                out.maps = unet_forward(ckpt, l, t, cond_maps ? c_cond : c_null, true).maps;
        }
        return out;
    }
    UnetOutput cond = unet_forward(ckpt, l, t, c_cond, record && cond_maps);
    UnetOutput null = unet_forward(ckpt, l, t, c_null, record && !cond_maps);
    const float s = float(scale);
    out.eps = Tensor(l.shape());
    for (std::size_t i = 0; i < out.eps.numel(); ++i) out.eps[i] = null.eps[i] + s * (cond.eps[i] - null.eps[i]);
    if (record) out.maps = cond_maps ? std::move(cond.maps) : std::move(null.maps);
    return out;
}

Tensor initial_latent(const ArchDescriptor& arch, std::uint64_t seed) {
    CounterRng rng(seed);
    return normal_tensor<float>({1, arch.image_size, arch.image_size}, rng);
}

Tensor clamp_image(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = std::clamp(x[i], 0.0f, 1.0f);
    return out;
}

SampleResult ddim_sample(const Checkpoint& ckpt, const Prompt& prompt, const SamplerConfig& cfg,
                         const NoiseSchedule& sched, bool record) {
    return ddim_sample_from(ckpt, prompt, cfg, sched, initial_latent(ckpt.arch, cfg.seed), record);
}

SampleResult ddim_sample_from(const Checkpoint& ckpt, const Prompt& prompt, const SamplerConfig& cfg,
                              const NoiseSchedule& sched, const Tensor& l_init, bool record) {
    const std::vector<int> ts = sampling_timesteps(sched, cfg.num_steps);
    const Tensor c = encode_prompt(ckpt, prompt);
    const Tensor c_null = encode_prompt(ckpt, Prompt::null());
    SampleResult res;
    res.l_init = l_init;
    if (record) {
        AttentionRecord rec;
        rec.height = rec.width = ckpt.arch.attention_resolution();
        res.record = std::move(rec);
    }
    Tensor l = l_init;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const int t = ts[i], t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
        CfgOutput e = cfg_epsilon(ckpt, l, t, c, c_null, cfg.cfg_scale, record, cfg.attention_source);
        if (record) {
            res.record->timesteps.push_back(t);
            res.record->maps.push_back(std::move(e.maps));
        }
        l = ddim_step(l, t, t_prev, e.eps, sched);
    }
    res.image = clamp_image(l);
    res.x0 = std::move(l);
    return res;
}

Tensor ddim_invert(const Checkpoint& ckpt, const Tensor& image, const Prompt& prompt, int steps,
                   const NoiseSchedule& sched) {
    require(image.shape() == Shape{1, ckpt.arch.image_size, ckpt.arch.image_size}, ErrorCode::shape_mismatch,
            "ddim_invert: image shape " + shape_str(image.shape()));
    for (float v : image.data())
        require(v >= 0.0f && v <= 1.0f, ErrorCode::invalid_argument, "ddim_invert: image values must lie in [0,1]");
    const std::vector<int> ts = sampling_timesteps(sched, steps);
    const Tensor c = encode_prompt(ckpt, prompt);
    Tensor l = image;
    for (std::size_t k = ts.size(); k-- > 0;) {
        const int t = ts[k], t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
        const Tensor eps = unet_forward(ckpt, l, t, c, false).eps;
        l = ddim_step_inverse(l, t_prev, t, eps, sched);
    }
    return l;
}

}  // namespace dblend
