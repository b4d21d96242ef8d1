#pragma once

#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

#include "dblend/diffusion.hpp"
#include "dblend/model.hpp"

namespace dblend {

enum class Reduction { mean, sum };

const char* reduction_name(Reduction r);
Reduction parse_reduction(std::string_view s);

struct GuidanceConfig {
    int steps = 50;
    double alpha = 0.1;
    double cfg_guidance = 3.0;
    double cfg_edit = 3.0;
    std::uint64_t seed = 0;
    Reduction reduction = Reduction::sum;
    std::vector<int> layers;  // cross-attention layers entering R; empty means all
    bool reuse_epsilon = false;
    AttentionSource attention_source = AttentionSource::conditional;

    void validate() const;
    SamplerConfig sampler(double cfg_scale) const;
};

// R = reduction over all entries of |a_ref - a|, across the selected layers.
double attention_loss(const std::vector<Tensor>& a_ref, const std::vector<Tensor>& a, Reduction reduction,
                      const std::vector<int>& layers = {});

// R and dR/dl for the edit model's conditional attention at latent l.
template <typename T>
struct AttentionGradient {
    double R = 0;
    BasicTensor<T> grad;
    BasicTensor<T> eps_cond;
    std::vector<BasicTensor<T>> maps;
};

template <typename T>
AttentionGradient<T> attention_gradient(const Checkpoint& E, const BasicTensor<T>& l, int t, const BasicTensor<T>& c,
                                        const std::vector<BasicTensor<T>>& a_ref, Reduction reduction,
                                        const std::vector<int>& layers, bool want_grad);

struct ReferenceRun {
    AttentionRecord a_ref;
    Tensor image;
    Tensor l_init;
};

ReferenceRun record_reference(const Checkpoint& G, const Prompt& prompt, const GuidanceConfig& cfg,
                              const NoiseSchedule& sched);
ReferenceRun record_reference_from(const Checkpoint& G, const Prompt& prompt, const GuidanceConfig& cfg,
                                   const NoiseSchedule& sched, const Tensor& l_init);

struct GuidedStep {
    Tensor l_prev;
    double R = 0;
    std::vector<Tensor> maps;  // edit model's attention at the pre-update latent
};

GuidedStep guided_step(const Checkpoint& E, const Tensor& l, int t, int t_prev, const Tensor& c, const Tensor& c_null,
                       const std::vector<Tensor>& a_ref_t, const GuidanceConfig& cfg, const NoiseSchedule& sched);

struct BlendResult {
    Tensor image;
    Tensor reference;  // G's own sample
    Tensor baseline;   // E's own sample (alpha = 0)
    Tensor l_init;
    std::vector<int> timesteps;
    std::vector<double> r_values;
    AttentionRecord reference_record;
    AttentionRecord edit_record;
};

BlendResult dreamblend(const Checkpoint& G, const Checkpoint& E, const Prompt& prompt, const GuidanceConfig& cfg,
                       const NoiseSchedule& sched, bool with_baseline = true);
// Both phases start from `l_init` instead of the seeded latent (e.g. an inverted image).
BlendResult dreamblend_from(const Checkpoint& G, const Checkpoint& E, const Prompt& prompt, const GuidanceConfig& cfg,
                            const NoiseSchedule& sched, const Tensor& l_init, bool with_baseline = true);

}  // namespace dblend
