#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "dblend/guidance.hpp"
#include "dblend/metrics.hpp"
#include "dblend/training.hpp"

namespace dblend {

// Subject prompts whose background and position never appear in the subject images.
std::vector<Prompt> heldout_prompts();

struct EvalPlan {
    std::vector<Prompt> prompts = heldout_prompts();
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
    int steps = 50;
    CollapseOptions collapse;
};

struct OperatingPoint {
    MetricsRow row;
    std::vector<Tensor> images;  // prompt-major, then seed
    std::vector<double> subject, prompt;
    double collapse = 0;  // mean aggregate over all images; pure checkpoints only
};

// Plain CFG sampling from one checkpoint.
OperatingPoint evaluate_checkpoint(const Checkpoint& ckpt, const EvalPlan& plan, double cfg_scale, const Bitmap& sprite,
                                   const NoiseSchedule& sched);

// Guided synthesis with G guiding E; alpha and cfg_edit come from `cfg`.
OperatingPoint evaluate_blend(const Checkpoint& G, const Checkpoint& E, const EvalPlan& plan, const GuidanceConfig& cfg,
                              const Bitmap& sprite, const NoiseSchedule& sched);

// Guidance scale and edit-time CFG used for an edit checkpoint of a given age.
struct BlendSetting {
    double alpha;
    double cfg_edit;
};
BlendSetting blend_setting(int edit_step);

// (guidance_step, edit_step) pairs: every saved step below each edit step plus the
// pretrained model (step 0).
std::vector<std::pair<int, int>> blend_pairs(const std::vector<int>& save_steps, const std::vector<int>& edit_steps);

struct CompositeGradCheck {
    // ||g - fd|| / ||fd|| over the checked coordinates, fd from f64 differences
    double rel_error_f64 = 0;
    double rel_error_f32 = 0;
    // worst single coordinate, relative to max(|g|, |fd|, 1e-3 max|fd|)
    double max_elem_f64 = 0;
    double max_elem_f32 = 0;
    std::size_t coords = 0;  // coordinates whose probes avoid every |.| kink
    std::size_t total = 0;
    double seconds = 0;
    bool passed = false;
};

// Gradient of the guidance loss R with respect to the latent, through the whole
// denoiser, checked on every latent coordinate whose finite-difference probes stay
// clear of the |.| kinks (at least 90% of them must).
CompositeGradCheck guidance_grad_check(const Checkpoint& G, const Checkpoint& E, const Prompt& prompt, int t,
                                       std::uint64_t seed, Reduction reduction = Reduction::sum);

}  // namespace dblend
