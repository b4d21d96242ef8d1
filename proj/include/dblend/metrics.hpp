#pragma once

#include <cstdint>
#include <vector>

#include "dblend/corpus.hpp"
#include "dblend/model.hpp"

namespace dblend {

struct MetricsRow {
    int guidance_step = 0;
    int edit_step = 0;
    double alpha = 0;
    double cfg = 0;
    double subject_fidelity = 0;
    double prompt_fidelity = 0;
    double diversity = 0;
    double f1 = 0;
    int n_images = 0;

    // Fills f1 from the two fidelity scores.
    void finalize();
};

double f1_score(double s, double p);

// Normalized cross-correlation; 0 when either side has no variance.
double ncc(const float* a, const float* b, std::size_t n);

struct TemplateMatch {
    double ncc = 0;
    int x = 0, y = 0;  // top-left corner on the 32x32 canvas
    double cx() const { return x + 0.5 * (glyph_size - 1); }
    double cy() const { return y + 0.5 * (glyph_size - 1); }
};

// Best placement of a 9x9 template over all fully contained positions; images
// smaller than the canvas are enlarged to 32x32 first.
TemplateMatch match_template(const Tensor& image, const Bitmap& tmpl);

double subject_fidelity(const Tensor& image, const Bitmap& sprite);

struct PromptScore {
    double background = 0;
    double position = 0;
    double total = 0;
    TemplateMatch match;
    std::vector<double> background_ncc;  // one per background token
};

inline constexpr double background_temperature = 0.1;

// Template for the prompt's object slot: the sprite for <sks>, otherwise the glyph.
PromptScore prompt_fidelity_detail(const Tensor& image, const Prompt& prompt, const Bitmap& tmpl);
double prompt_fidelity(const Tensor& image, const Prompt& prompt, const Bitmap& tmpl);

double diversity_score(const std::vector<Tensor>& images);

struct CollapseOptions {
    double quantile = 0.1;
    std::size_t step_index = 25;
};

struct CollapseReport {
    std::vector<int> tokens;        // prompt positions that were scored
    std::vector<double> fractions;  // attention mass inside the subject mask, per scored token
    double aggregate = 0;
    std::vector<std::uint8_t> mask;  // M entries
    std::size_t height = 0, width = 0;
};

CollapseReport attention_collapse(const AttentionRecord& record, const Prompt& prompt,
                                  const CollapseOptions& options = {});

MetricsRow select_operating_point(const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> pareto_front(const std::vector<MetricsRow>& rows);
bool dominates(const MetricsRow& a, const MetricsRow& b);

double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace dblend
