#pragma once

// AdamW with decoupled weight decay and the cosine-annealing schedule with
// warm restarts used by the training harness.

#include "msmu/tensor.hpp"

namespace msmu {

// One trainable tensor plus its optimizer state.
struct Param {
    Tensor value;
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    long long step_count = 0;
};

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

class AdamW {
public:
    explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

    void add_param(const Tensor& t) {
        Param p;
        p.value = t;
        p.first_moment.assign(t.data().size(), 0.0);
        p.second_moment.assign(t.data().size(), 0.0);
        params_.push_back(std::move(p));
    }

    void add_params(const std::vector<Tensor>& ts) {
        for (const auto& t : ts) add_param(t);
    }

    const std::vector<Param>& params() const { return params_; }

    // Decoupled decay on the value, bias-corrected moments, then grads cleared.
    void step(double lr) {
        for (Param& p : params_) {
            check(p.value.has_grad(), "adamw_step: parameter '",
                  p.value.name().empty() ? "<unnamed>" : p.value.name(), "' has no gradient");
            p.step_count += 1;
            const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(p.step_count));
            const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(p.step_count));
            auto& v = p.value.data();
            auto& g = p.value.grad();
            for (size_t i = 0; i < v.size(); ++i) {
                v[i] -= lr * opts_.weight_decay * v[i];
                p.first_moment[i] = opts_.beta1 * p.first_moment[i] + (1.0 - opts_.beta1) * g[i];
                p.second_moment[i] =
                    opts_.beta2 * p.second_moment[i] + (1.0 - opts_.beta2) * g[i] * g[i];
                const double mhat = p.first_moment[i] / bc1;
                const double vhat = p.second_moment[i] / bc2;
                v[i] -= lr * mhat / (std::sqrt(vhat) + opts_.eps);
            }
        }
        zero_grad();
    }

    void zero_grad() {
        for (Param& p : params_) p.value.zero_grad();
    }

private:
    AdamWOptions opts_;
    std::vector<Param> params_;
};

// Cosine annealing with warm restarts every `period` epochs.
struct LrSchedule {
    double base_lr = 5e-4;
    double min_lr = 0.0;
    int period = 32;
};

inline double cosine_lr(const LrSchedule& s, int epoch) {
    check(epoch >= 0, "cosine_lr: epoch must be >= 0");
    const int e = epoch % s.period;
    const double t = static_cast<double>(e) / s.period;
    return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace msmu
