#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dblend/corpus.hpp"
#include "dblend/diffusion.hpp"
#include "dblend/model.hpp"

namespace dblend {

struct FinetuneSchedule {
    int total_steps = 1000;
    std::vector<int> save_steps;

    // Every 5th step up to 50, then every 25th step.
    static FinetuneSchedule standard(int total_steps = 1000);
    void validate() const;
};

enum class Optimizer { sgd, adam };

const char* optimizer_name(Optimizer o);
Optimizer parse_optimizer(std::string_view s);

// One training example before corruption.
struct TrainSample {
    Tensor x0;
    Prompt prompt;
};

struct OptimizerState {
    Optimizer kind = Optimizer::sgd;
    std::int64_t step = 0;
    std::map<std::string, Tensor> m, v;
};

struct StepInputs {
    std::vector<TrainSample> samples;
    std::vector<int> timesteps;
    std::vector<Tensor> noise;
};

// Mean epsilon-prediction MSE over the batch and its parameter gradient.
// Per-sample gradients are summed in sample order, then divided by the batch size.
double loss_and_gradient(const Checkpoint& ckpt, const StepInputs& in, const NoiseSchedule& sched,
                         std::map<std::string, Tensor>* grads);

void apply_update(Checkpoint& ckpt, const std::map<std::string, Tensor>& grads, OptimizerState& state, double lr);

struct PretrainConfig {
    std::uint64_t seed = 0;
    int steps = 20000;
    int batch = 16;
    double lr = 1e-3;
    double dropout_p = 0.1;
    Optimizer optimizer = Optimizer::sgd;
    ArchDescriptor arch;
};

struct PretrainResult {
    Checkpoint ckpt;
    std::vector<double> losses;
};

using ProgressFn = std::function<void(int step, double loss)>;

PretrainResult pretrain(const PretrainConfig& cfg, const NoiseSchedule& sched, const ProgressFn& progress = {});

struct FinetuneConfig {
    std::uint64_t seed = 0;
    double lr = 4e-3;
    Optimizer optimizer = Optimizer::adam;
    double dropout_p = 0.0;
    int batch = 16;  // cycles through the subject images
};

struct FinetuneResult {
    std::vector<Checkpoint> trajectory;
    std::vector<double> losses;
    bool diverged = false;
    std::string error;
};

FinetuneResult finetune(const Checkpoint& base, const std::vector<Tensor>& subject_images, const Prompt& subject_prompt,
                        const FinetuneSchedule& schedule, const FinetuneConfig& cfg, const NoiseSchedule& sched,
                        const ProgressFn& progress = {});

// Mean of the trailing `window` entries ending at index `at` (inclusive).
double moving_average(const std::vector<double>& xs, std::size_t at, std::size_t window);

}  // namespace dblend
