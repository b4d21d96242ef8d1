#include "dblend/training.hpp"

#include <algorithm>
#include <cmath>

#include "dblend/parallel.hpp"
#include "dblend/rng.hpp"

namespace dblend {

FinetuneSchedule FinetuneSchedule::standard(int total_steps) {
    FinetuneSchedule s;
    s.total_steps = total_steps;
    for (int k = 5; k <= std::min(50, total_steps); k += 5) s.save_steps.push_back(k);
    for (int k = 75; k <= total_steps; k += 25) s.save_steps.push_back(k);
    return s;
}

void FinetuneSchedule::validate() const {
    require(total_steps >= 0, ErrorCode::invalid_argument, "total_steps must be non-negative");
    for (std::size_t i = 0; i < save_steps.size(); ++i) {
        require(save_steps[i] >= 1 && save_steps[i] <= total_steps, ErrorCode::invalid_argument,
                "save step " + std::to_string(save_steps[i]) + " outside [1, total_steps]");
        require(i == 0 || save_steps[i] > save_steps[i - 1], ErrorCode::invalid_argument,
                "save steps must be strictly increasing");
    }
}

const char* optimizer_name(Optimizer o) { return o == Optimizer::sgd ? "sgd" : "adam"; }

Optimizer parse_optimizer(std::string_view s) {
    if (s == "sgd") return Optimizer::sgd;
    if (s == "adam") return Optimizer::adam;
    fail(ErrorCode::invalid_argument, "optimizer must be sgd or adam, got '" + std::string(s) + "'");
}

namespace {

struct SampleGrad {
    double loss = 0;
    std::vector<Tensor> grads;  // in checkpoint parameter order
};

SampleGrad sample_gradient(const Checkpoint& ck, const Tensor& x_t, int t, const Prompt& prompt, const Tensor& noise,
                           bool want_grads) {
    Tape<float> tape;
    const ParamNodes<float> params = bind_params(tape, ck);
    const NodeId l = tape.leaf(x_t);
    const NodeId c = tape.embedding(params.at("text.embed"), std::vector<int>(prompt.ids.begin(), prompt.ids.end()));
    const UnetNodes<float> nodes = unet_graph(tape, ck.arch, params, l, t, c, false);
    const NodeId diff = tape.sub(nodes.eps, tape.leaf(noise));
    const NodeId loss = tape.mean(tape.mul(diff, diff));
    SampleGrad out;
    out.loss = tape.value(loss).item();
    if (want_grads) {
        std::vector<NodeId> wrt;
        wrt.reserve(params.size());
        for (const auto& [name, id] : params) wrt.push_back(id);
        out.grads = tape.backward(loss, wrt);
    }
    return out;
}

}  // namespace

double loss_and_gradient(const Checkpoint& ckpt, const StepInputs& in, const NoiseSchedule& sched,
                         std::map<std::string, Tensor>* grads) {
    const std::size_t B = in.samples.size();
    require(B > 0 && in.timesteps.size() == B && in.noise.size() == B, ErrorCode::invalid_argument,
            "training step needs matching samples, timesteps, and noise");
    std::vector<SampleGrad> per(B);
    parallel_for(B, [&](std::size_t i) {
        const Tensor x_t = q_sample(in.samples[i].x0, in.timesteps[i], in.noise[i], sched);
        per[i] = sample_gradient(ckpt, x_t, in.timesteps[i], in.samples[i].prompt, in.noise[i], grads != nullptr);
    });
    double loss = 0;
    for (const SampleGrad& s : per) loss += s.loss;
    loss /= double(B);
    if (grads) {
        grads->clear();
        std::size_t k = 0;
        const float inv = float(1.0 / double(B));
        for (const auto& [name, t] : ckpt.params) {
            Tensor sum = per[0].grads[k];
            for (std::size_t i = 1; i < B; ++i) {
                const float* g = per[i].grads[k].ptr();
                float* d = sum.ptr();
                for (std::size_t j = 0; j < sum.numel(); ++j) d[j] += g[j];
            }
            for (float& v : sum.data()) v *= inv;
            grads->emplace(name, std::move(sum));
            ++k;
        }
    }
    return loss;
}

void apply_update(Checkpoint& ckpt, const std::map<std::string, Tensor>& grads, OptimizerState& state, double lr) {
    ++state.step;
    if (state.kind == Optimizer::sgd) {
        const float step = float(lr);
        for (auto& [name, p] : ckpt.params) {
            const Tensor& g = grads.at(name);
            for (std::size_t i = 0; i < p.numel(); ++i) p[i] -= step * g[i];
        }
        return;
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, double(state.step)), c2 = 1.0 - std::pow(b2, double(state.step));
    for (auto& [name, p] : ckpt.params) {
        const Tensor& g = grads.at(name);
        Tensor& m = state.m.try_emplace(name, p.shape()).first->second;
        Tensor& v = state.v.try_emplace(name, p.shape()).first->second;
        for (std::size_t i = 0; i < p.numel(); ++i) {
            const double gi = g[i];
            m[i] = float(b1 * m[i] + (1 - b1) * gi);
            v[i] = float(b2 * v[i] + (1 - b2) * gi * gi);
            const double mh = m[i] / c1, vh = v[i] / c2;
            p[i] = float(p[i] - lr * mh / (std::sqrt(vh) + eps));
        }
    }
}

namespace {

void check_loss(double loss, int step, const char* phase) {
    require(std::isfinite(loss), ErrorCode::divergence,
            std::string(phase) + " diverged at step " + std::to_string(step) + ": loss is not finite");
}

}  // namespace

PretrainResult pretrain(const PretrainConfig& cfg, const NoiseSchedule& sched, const ProgressFn& progress) {
    require(cfg.steps >= 0 && cfg.batch >= 1, ErrorCode::invalid_argument, "pretrain needs steps >= 0 and batch >= 1");
    require(cfg.dropout_p >= 0 && cfg.dropout_p <= 1, ErrorCode::invalid_argument, "dropout_p must lie in [0,1]");
    PretrainResult res;
    res.ckpt = init_params(cfg.seed, cfg.arch);
    if (cfg.steps == 0) return res;

    const int K = Vocabulary::kinds_per_slot;
    std::vector<Tensor> scenes;
    for (int o = 0; o < K; ++o)
        for (int b = 0; b < K; ++b)
            for (int p = 0; p < K; ++p) {
                SceneSpec s;
                s.object = Vocabulary::first_object + o;
                s.background = Vocabulary::first_background + b;
                s.position = Vocabulary::first_position + p;
                scenes.push_back(render_scene_at(s, cfg.arch.image_size));
            }

    OptimizerState opt;
    opt.kind = cfg.optimizer;
    std::map<std::string, Tensor> grads;
    const Shape ishape{1, cfg.arch.image_size, cfg.arch.image_size};
    for (int step = 0; step < cfg.steps; ++step) {
        CounterRng rng = CounterRng::stream(cfg.seed, 0x7072657472ULL + std::uint64_t(step) * 0x100000001ULL);
        StepInputs in;
        for (int i = 0; i < cfg.batch; ++i) {
            const int o = int(rng.below(K)), b = int(rng.below(K)), p = int(rng.below(K));
            TrainSample s;
            s.x0 = scenes[std::size_t((o * K + b) * K + p)];
            s.prompt.ids = {Vocabulary::first_object + o, Vocabulary::first_background + b,
                            Vocabulary::first_position + p, Vocabulary::pad_id};
            if (rng.uniform() < cfg.dropout_p) s.prompt = Prompt::null();
            in.samples.push_back(std::move(s));
            in.timesteps.push_back(1 + int(rng.below(std::uint64_t(sched.T_train))));
            in.noise.push_back(normal_tensor<float>(ishape, rng));
        }
        double loss = 0;
        try {
            loss = loss_and_gradient(res.ckpt, in, sched, &grads);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::non_finite) throw;
            fail(ErrorCode::divergence, "pretrain diverged at step " + std::to_string(step) + ": " + e.what());
        }
        check_loss(loss, step, "pretrain");
        res.losses.push_back(loss);
        apply_update(res.ckpt, grads, opt, cfg.lr);
        if (progress) progress(step + 1, loss);
    }
    return res;
}

FinetuneResult finetune(const Checkpoint& base, const std::vector<Tensor>& subject_images, const Prompt& subject_prompt,
                        const FinetuneSchedule& schedule, const FinetuneConfig& cfg, const NoiseSchedule& sched,
                        const ProgressFn& progress) {
    schedule.validate();
    base.validate();
    require(!subject_images.empty(), ErrorCode::invalid_argument, "finetune needs subject images");
    require(cfg.batch >= 1, ErrorCode::invalid_argument, "finetune batch must be positive");
    require(subject_prompt.object() == Vocabulary::sks_id, ErrorCode::invalid_argument,
            "the subject prompt must use <sks> as its object");
    const Shape ishape{1, base.arch.image_size, base.arch.image_size};
    for (const Tensor& im : subject_images)
        require(im.shape() == ishape, ErrorCode::shape_mismatch,
                "subject image shape " + shape_str(im.shape()) + " does not match the model");

    FinetuneResult res;
    Checkpoint ck = base;
    ck.finetune_step = 0;
    OptimizerState opt;
    opt.kind = cfg.optimizer;
    std::map<std::string, Tensor> grads;
    std::size_t next_save = 0;
    for (int step = 1; step <= schedule.total_steps; ++step) {
        CounterRng rng = CounterRng::stream(cfg.seed, 0x66696e65ULL + std::uint64_t(step) * 0x100000001ULL);
        StepInputs in;
        for (int b = 0; b < cfg.batch; ++b) {
            TrainSample s{subject_images[std::size_t(b) % subject_images.size()], subject_prompt};
            if (rng.uniform() < cfg.dropout_p) s.prompt = Prompt::null();
            in.samples.push_back(std::move(s));
            in.timesteps.push_back(1 + int(rng.below(std::uint64_t(sched.T_train))));
            in.noise.push_back(normal_tensor<float>(ishape, rng));
        }
        double loss = 0;
        try {
            loss = loss_and_gradient(ck, in, sched, &grads);
            check_loss(loss, step, "finetune");
        } catch (const Error& e) {
            res.diverged = true;
            res.error = "finetune diverged at step " + std::to_string(step) + ": " + e.what();
            return res;
        }
        res.losses.push_back(loss);
        apply_update(ck, grads, opt, cfg.lr);
        ck.finetune_step = step;
        if (next_save < schedule.save_steps.size() && schedule.save_steps[next_save] == step) {
            res.trajectory.push_back(ck);
            ++next_save;
        }
        if (progress) progress(step, loss);
    }
    return res;
}

double moving_average(const std::vector<double>& xs, std::size_t at, std::size_t window) {
    require(at < xs.size() && window > 0, ErrorCode::invalid_argument, "moving_average index out of range");
    const std::size_t lo = at + 1 >= window ? at + 1 - window : 0;
    double s = 0;
    for (std::size_t i = lo; i <= at; ++i) s += xs[i];
    return s / double(at + 1 - lo);
}

}  // namespace dblend
