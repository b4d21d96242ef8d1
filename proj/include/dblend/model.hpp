#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dblend/tape.hpp"
#include "dblend/tensor.hpp"
#include "dblend/vocab.hpp"

namespace dblend {

// Shape of the denoiser. Level i runs at image_size / 2^i with channels[i]
// feature maps; both cross-attention layers sit at the last (coarsest) level.
struct ArchDescriptor {
    std::size_t image_size = 32;
    std::vector<std::size_t> channels{32, 64, 64};
    std::size_t heads = 2;
    std::size_t head_dim = 32;
    std::size_t text_dim = 32;
    std::size_t groups = 8;

    // "default" or "fast"
    static ArchDescriptor preset(std::string_view name);
    static ArchDescriptor parse(std::string_view text);
    std::string str() const;
    void validate() const;

    std::size_t levels() const noexcept { return channels.size(); }
    std::size_t attention_resolution() const noexcept { return image_size >> (channels.size() - 1); }
    std::size_t time_dim() const noexcept { return 2 * channels.front(); }

    bool operator==(const ArchDescriptor&) const = default;
};

// Names and shapes of every parameter tensor, in a fixed order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ArchDescriptor& arch);

struct Checkpoint {
    ArchDescriptor arch;
    std::map<std::string, Tensor> params;
    std::int64_t finetune_step = 0;
    std::uint64_t seed = 0;
    std::uint64_t vocab_hash = 0;

    const Tensor& param(const std::string& name) const;
    std::size_t parameter_count() const;
    // Every declared tensor present with its declared shape, and the vocabulary hash matches.
    void validate() const;
};

Checkpoint init_params(std::uint64_t seed, const ArchDescriptor& arch = {});

// Text features: row i is the embedding of prompt token i. Shape [4, text_dim].
Tensor encode_prompt(const Checkpoint& ckpt, const Prompt& prompt);

// Per-timestep cross-attention maps. maps[step][layer] has shape (heads, M, N).
struct AttentionRecord {
    std::vector<int> timesteps;
    std::vector<std::vector<Tensor>> maps;
    std::size_t height = 0;
    std::size_t width = 0;

    std::size_t steps() const noexcept { return timesteps.size(); }
    std::size_t layers() const noexcept { return maps.empty() ? 0 : maps.front().size(); }
};

struct UnetOutput {
    Tensor eps;
    std::vector<Tensor> maps;  // empty unless recording
};

UnetOutput unet_forward(const Checkpoint& ckpt, const Tensor& latent, int t, const Tensor& text, bool record);

template <typename T>
using ParamNodes = std::map<std::string, NodeId>;

// Adds every checkpoint tensor to the tape as a named leaf ("param:<name>").
template <typename T>
ParamNodes<T> bind_params(Tape<T>& tape, const Checkpoint& ckpt);

template <typename T>
struct UnetNodes {
    NodeId eps = no_node;
    std::vector<NodeId> maps;  // one (heads, M, N) node per cross-attention layer when recording
};

// Records the denoiser on a tape so gradients can reach the latent, the text
// features, or the parameters.
template <typename T>
UnetNodes<T> unet_graph(Tape<T>& tape, const ArchDescriptor& arch, const ParamNodes<T>& params, NodeId latent, int t,
                        NodeId text, bool record);

// Sinusoidal timestep features of width arch.channels[0].
template <typename T>
BasicTensor<T> timestep_features(const ArchDescriptor& arch, int t);

}  // namespace dblend
