#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "dblend/guidance.hpp"
#include "dblend/training.hpp"

namespace dblend {

struct RunConfig {
    std::string arch = "default";
    std::uint64_t seed = 0;
    int pretrain_steps = 20000;
    int batch = 16;
    double lr = 1e-3;
    double dropout_p = 0.1;
    Optimizer optimizer = Optimizer::adam;
    int finetune_steps = 1000;
    double finetune_lr = 4e-3;
    Optimizer finetune_optimizer = Optimizer::adam;
    int finetune_batch = 16;
    std::uint64_t sprite_seed = 0;
    int steps = 50;
    double cfg = 3.0;
    double alpha = 0.1;
    double cfg_guidance = 3.0;
    double cfg_edit = 3.0;
    Reduction reduction = Reduction::sum;
    std::vector<int> layers;
    bool reuse_epsilon = false;
    AttentionSource attention_source = AttentionSource::conditional;
    int eval_seeds = 10;
    std::vector<int> edit_steps{100, 200};

    struct Key {
        const char* name;
        const char* help;
    };
    static const std::vector<Key>& keys();

    // Throws invalid_argument for unknown keys or unparsable values.
    void set(std::string_view key, std::string_view value);
    std::string get(std::string_view key) const;
    // key=value lines; '#' starts a comment; blank lines ignored.
    void apply_text(std::string_view text);
    std::string str() const;

    ArchDescriptor arch_descriptor() const;
    PretrainConfig pretrain() const;
    FinetuneConfig finetune() const;
    GuidanceConfig guidance() const;
    SamplerConfig sampler() const;
};

// Returns the process exit code: 0 success, 1 runtime failure, 2 usage error.
int cli_main(int argc, const char* const* argv);
int cli_main(const std::vector<std::string>& args);

}  // namespace dblend
