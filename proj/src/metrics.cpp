#include "dblend/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dblend/error.hpp"

namespace dblend {

double f1_score(double s, double p) { return s + p > 0 ? 2.0 * s * p / (s + p) : 0.0; }

void MetricsRow::finalize() { f1 = f1_score(subject_fidelity, prompt_fidelity); }

double ncc(const float* a, const float* b, std::size_t n) {
    if (n == 0) return 0.0;
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= double(n);
    mb /= double(n);
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    // Relative threshold so float rounding on a flat image does not count as texture.
    if (saa <= 1e-12 * double(n) || sbb <= 1e-12 * double(n)) return 0.0;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

namespace {

constexpr int W = int(world_size);
constexpr int G = int(glyph_size);

Tensor to_world(const Tensor& image) {
    require(image.rank() == 3 && image.dim(0) == 1 && image.dim(1) == image.dim(2), ErrorCode::shape_mismatch,
            "expected a 1xNxN image, got " + shape_str(image.shape()));
    return upscale_to_world(image);
}

double template_variance(const Bitmap& t) {
    double m = 0, v = 0;
    for (float x : t) m += x;
    m /= double(t.size());
    for (float x : t) v += (x - m) * (x - m);
    return v;
}

}  // namespace

TemplateMatch match_template(const Tensor& image, const Bitmap& tmpl) {
    require(template_variance(tmpl) > 0, ErrorCode::invalid_argument, "template has zero variance");
    const Tensor w = to_world(image);
    TemplateMatch best;
    best.ncc = -2;
    std::array<float, glyph_size * glyph_size> patch{};
    for (int y = 0; y + G <= W; ++y)
        for (int x = 0; x + G <= W; ++x) {
            for (int r = 0; r < G; ++r)
                std::copy_n(w.ptr() + (y + r) * W + x, G, patch.data() + r * G);
            const double s = ncc(patch.data(), tmpl.data(), patch.size());
            if (s > best.ncc) best = TemplateMatch{s, x, y};
        }
    return best;
}

double subject_fidelity(const Tensor& image, const Bitmap& sprite) {
    return 0.5 * (match_template(image, sprite).ncc + 1.0);
}

PromptScore prompt_fidelity_detail(const Tensor& image, const Prompt& prompt, const Bitmap& tmpl) {
    prompt.validate();
    require(!prompt.is_null(), ErrorCode::invalid_argument, "cannot score an image against the null prompt");
    const std::size_t n = image.rank() == 3 ? image.dim(1) : 0;
    const Tensor w = to_world(image);
    PromptScore out;
    out.match = match_template(image, tmpl);

    // Non-subject region: everything outside the matched box dilated by 2 pixels.
    std::vector<std::size_t> idx;
    const int x0 = out.match.x - 2, y0 = out.match.y - 2, x1 = out.match.x + G + 2, y1 = out.match.y + G + 2;
    for (int y = 0; y < W; ++y)
        for (int x = 0; x < W; ++x)
            if (x < x0 || x >= x1 || y < y0 || y >= y1) idx.push_back(std::size_t(y * W + x));
    if (idx.size() < 16) {
        idx.clear();
        for (int y = 0; y < W; ++y)
            for (int x = 0; x < W; ++x)
                if (x < 2 || y < 2 || x >= W - 2 || y >= W - 2) idx.push_back(std::size_t(y * W + x));
    }
    std::vector<float> a(idx.size()), b(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) a[i] = w[idx[i]];

    std::vector<double> logits;
    for (int k = 0; k < Vocabulary::kinds_per_slot; ++k) {
        const Tensor canon = upscale_to_world(downscale(render_background(Vocabulary::first_background + k), n));
        double best = -1.0;
        for (int dy = -2; dy <= 2; ++dy)
            for (int dx = -2; dx <= 2; ++dx) {
                for (std::size_t i = 0; i < idx.size(); ++i) {
                    const int y = int(idx[i]) / W, x = int(idx[i]) % W;
                    b[i] = canon[std::size_t(((y + dy + W) % W) * W + (x + dx + W) % W)];
                }
                best = std::max(best, ncc(a.data(), b.data(), idx.size()));
            }
        out.background_ncc.push_back(best);
        logits.push_back(best / background_temperature);
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double l : logits) z += std::exp(l - mx);
    out.background = std::exp(logits[std::size_t(prompt.background() - Vocabulary::first_background)] - mx) / z;

    const Box core = anchor_core(prompt.position());
    const double cx = out.match.cx(), cy = out.match.cy();
    out.position = core.contains(cx, cy) ? 1.0 : std::max(0.0, 1.0 - core.distance(cx, cy) / (0.5 * W));
    out.total = 0.5 * (out.background + out.position);
    return out;
}

double prompt_fidelity(const Tensor& image, const Prompt& prompt, const Bitmap& tmpl) {
    return prompt_fidelity_detail(image, prompt, tmpl).total;
}

double diversity_score(const std::vector<Tensor>& images) {
    require(images.size() >= 2, ErrorCode::invalid_argument, "diversity needs at least two images");
    double total = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < images.size(); ++i)
        for (std::size_t j = i + 1; j < images.size(); ++j) {
            require(images[i].shape() == images[j].shape(), ErrorCode::shape_mismatch,
                    "diversity: images differ in shape");
            total += rms_diff(images[i], images[j]);
            ++pairs;
        }
    return total / double(pairs);
}

CollapseReport attention_collapse(const AttentionRecord& record, const Prompt& prompt, const CollapseOptions& options) {
    require(!prompt.is_null(), ErrorCode::invalid_argument, "collapse needs a prompt with a subject token");
    require(options.quantile > 0 && options.quantile <= 1, ErrorCode::invalid_argument, "quantile must lie in (0,1]");
    require(options.step_index < record.steps(), ErrorCode::invalid_argument,
            "collapse step index " + std::to_string(options.step_index) + " beyond record of " +
                std::to_string(record.steps()) + " steps");
    const std::vector<Tensor>& layers = record.maps[options.step_index];
    require(!layers.empty(), ErrorCode::invalid_argument, "record holds no attention layers");
    const std::size_t M = layers[0].dim(1), N = layers[0].dim(2);
    require(N == Prompt::length, ErrorCode::shape_mismatch, "attention maps do not cover the prompt tokens");

    // Average over heads and layers: agg[n][m].
    std::vector<std::vector<double>> agg(N, std::vector<double>(M, 0.0));
    std::size_t count = 0;
    for (const Tensor& m : layers) {
        require(m.rank() == 3 && m.dim(1) == M && m.dim(2) == N, ErrorCode::shape_mismatch,
                "attention layers differ in shape");
        for (std::size_t h = 0; h < m.dim(0); ++h) {
            for (std::size_t p = 0; p < M; ++p)
                for (std::size_t n = 0; n < N; ++n) agg[n][p] += m[(h * M + p) * N + n];
            ++count;
        }
    }
    for (auto& row : agg)
        for (double& v : row) v /= double(count);

    CollapseReport rep;
    rep.height = record.height;
    rep.width = record.width;
    const std::size_t keep = std::max<std::size_t>(1, std::size_t(std::ceil(options.quantile * double(M) - 1e-9)));
    std::vector<std::size_t> order(M);
    std::iota(order.begin(), order.end(), 0);
    const std::vector<double>& subject = agg[0];
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return subject[a] > subject[b]; });
    rep.mask.assign(M, 0);
    for (std::size_t i = 0; i < keep; ++i) rep.mask[order[i]] = 1;

    for (std::size_t n = 1; n < N; ++n) {
        if (prompt.ids[n] == Vocabulary::pad_id || prompt.ids[n] == Vocabulary::null_id) continue;
        double inside = 0, total = 0;
        for (std::size_t p = 0; p < M; ++p) {
            total += agg[n][p];
            if (rep.mask[p]) inside += agg[n][p];
        }
        rep.tokens.push_back(int(n));
        rep.fractions.push_back(total > 0 ? inside / total : 0.0);
    }
    require(!rep.fractions.empty(), ErrorCode::invalid_argument, "prompt has no context tokens to score");
    rep.aggregate = std::accumulate(rep.fractions.begin(), rep.fractions.end(), 0.0) / double(rep.fractions.size());
    return rep;
}

MetricsRow select_operating_point(const std::vector<MetricsRow>& rows) {
    require(!rows.empty(), ErrorCode::invalid_argument, "no operating points to select from");
    const MetricsRow* best = &rows[0];
    for (const MetricsRow& r : rows) {
        if (r.f1 > best->f1 ||
            (r.f1 == best->f1 && (r.edit_step < best->edit_step ||
                                  (r.edit_step == best->edit_step && r.guidance_step < best->guidance_step))))
            best = &r;
    }
    return *best;
}

bool dominates(const MetricsRow& a, const MetricsRow& b) {
    return a.subject_fidelity >= b.subject_fidelity && a.prompt_fidelity >= b.prompt_fidelity &&
           (a.subject_fidelity > b.subject_fidelity || a.prompt_fidelity > b.prompt_fidelity);
}

std::vector<MetricsRow> pareto_front(const std::vector<MetricsRow>& rows) {
    require(!rows.empty(), ErrorCode::invalid_argument, "no operating points for a Pareto front");
    std::vector<MetricsRow> front;
    for (const MetricsRow& r : rows) {
        bool dominated = false;
        for (const MetricsRow& s : rows) dominated = dominated || dominates(s, r);
        if (!dominated) front.push_back(r);
    }
    std::stable_sort(front.begin(), front.end(),
                     [](const MetricsRow& a, const MetricsRow& b) { return a.prompt_fidelity < b.prompt_fidelity; });
    return front;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = 0.5 * double(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    require(x.size() == y.size() && x.size() >= 2, ErrorCode::invalid_argument,
            "spearman needs two equally long series of length >= 2");
    const std::vector<double> rx = ranks(x), ry = ranks(y);
    const double n = double(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    return sxx > 0 && syy > 0 ? sxy / std::sqrt(sxx * syy) : 0.0;
}

}  // namespace dblend
