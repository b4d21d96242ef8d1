#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "dblend/model.hpp"
#include "dblend/tensor.hpp"
#include "dblend/vocab.hpp"

namespace dblend {

struct NoiseSchedule {
    int T_train = 0;
    std::vector<double> beta;       // beta[t] for t in 1..T_train; beta[0] unused (0)
    std::vector<double> alpha_bar;  // alpha_bar[0] == 1

    double ab(int t) const;
};

NoiseSchedule make_schedule(int T_train = 1000, double beta_start = 1e-4, double beta_end = 0.02);

// Evenly spaced, strictly decreasing timesteps: T, T - T/n, ..., T/n.
std::vector<int> sampling_timesteps(const NoiseSchedule& sched, int num_steps);

Tensor q_sample(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& sched);

// Deterministic (eta = 0) update from t to t_prev < t.
Tensor ddim_step(const Tensor& l, int t, int t_prev, const Tensor& eps, const NoiseSchedule& sched);
// Algebraic inverse of ddim_step: maps l_prev at t_prev back to t using the same eps.
Tensor ddim_step_inverse(const Tensor& l_prev, int t_prev, int t, const Tensor& eps, const NoiseSchedule& sched);
Tensor predict_x0(const Tensor& l, int t, const Tensor& eps, const NoiseSchedule& sched);

enum class AttentionSource { conditional, unconditional };

const char* attention_source_name(AttentionSource s);
AttentionSource parse_attention_source(std::string_view s);

struct SamplerConfig {
    int num_steps = 50;
    double cfg_scale = 3.0;
    std::uint64_t seed = 0;
    AttentionSource attention_source = AttentionSource::conditional;
};

struct CfgOutput {
    Tensor eps;
    std::vector<Tensor> maps;  // per layer, from the pass selected by the attention source
};

// eps_null + scale * (eps_cond - eps_null). scale == 1 runs only the conditional
// pass and scale == 0 only the unconditional one.
CfgOutput cfg_epsilon(const Checkpoint& ckpt, const Tensor& l, int t, const Tensor& c_cond, const Tensor& c_null,
                      double scale, bool record, AttentionSource source = AttentionSource::conditional);

Tensor initial_latent(const ArchDescriptor& arch, std::uint64_t seed);
Tensor clamp_image(const Tensor& x);

struct SampleResult {
    Tensor image;    // clamped to [0,1]
    Tensor x0;       // final latent before clamping
    Tensor l_init;
    std::optional<AttentionRecord> record;
};

SampleResult ddim_sample(const Checkpoint& ckpt, const Prompt& prompt, const SamplerConfig& cfg,
                         const NoiseSchedule& sched, bool record);
// Same loop, starting from a caller-supplied latent.
SampleResult ddim_sample_from(const Checkpoint& ckpt, const Prompt& prompt, const SamplerConfig& cfg,
                              const NoiseSchedule& sched, const Tensor& l_init, bool record);

// Runs the DDIM update in reverse (conditional epsilon, cfg scale 1) and returns l_T.
Tensor ddim_invert(const Checkpoint& ckpt, const Tensor& image, const Prompt& prompt, int steps,
                   const NoiseSchedule& sched);

}  // namespace dblend
