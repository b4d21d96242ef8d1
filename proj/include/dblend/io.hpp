#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dblend/diffusion.hpp"
#include "dblend/metrics.hpp"
#include "dblend/model.hpp"

namespace dblend {

namespace fs = std::filesystem;

inline constexpr std::uint32_t container_version = 1;
inline constexpr const char* checkpoint_magic = "DBLND1";
inline constexpr const char* attention_magic = "DBATN1";

// Ordered key=value metadata plus named f32 tensors, all little-endian.
struct Container {
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    const std::string& get(const std::string& key) const;
    bool has(const std::string& key) const;
};

std::string encode_container(const Container& c, const char* magic);
Container decode_container(const std::string& bytes, const char* magic);

void write_file(const fs::path& path, const std::string& bytes);
std::string read_file(const fs::path& path);

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path);
Checkpoint load_checkpoint(const fs::path& path);

struct AttentionDump {
    AttentionRecord record;
    Prompt prompt;
    SamplerConfig sampler;
};

void save_attention(const AttentionDump& dump, const fs::path& path);
// Verifies that every attention row sums to one within 1e-5.
AttentionDump load_attention(const fs::path& path);

std::string encode_pgm(const Tensor& image);
Tensor decode_pgm(const std::string& bytes);
void write_image_pgm(const Tensor& image, const fs::path& path);
Tensor read_image_pgm(const fs::path& path);

inline constexpr const char* metrics_header =
    "guidance_step,edit_step,alpha,cfg,subject_fidelity,prompt_fidelity,diversity,f1,n_images";

std::string format_metrics_csv(const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const fs::path& path);
std::vector<MetricsRow> read_metrics_csv(const fs::path& path);

// Fixed six-decimal rendering used by every CSV writer.
std::string fixed6(double v);

}  // namespace dblend
