#pragma once
// Parameter registry, decoupled-weight-decay Adam and the cosine schedule.
// Parameters iterate in name order (std::map), so update sweeps are
// deterministic; each parameter's update depends only on its own state.

#include <map>
#include <set>

#include "somnus/ops.hpp"

namespace somnus {

class ParamStore {
public:
    Tensor add(const std::string& name, Shape shape, std::vector<double> init,
               bool no_decay = false) {
        if (params_.count(name)) throw Error("parameter '" + name + "' already registered");
        Tensor t = Tensor::from(std::move(shape), std::move(init), true);
        params_.emplace(name, t);
        if (no_decay) no_decay_.insert(name);
        return t;
    }

    Tensor add_normal(const std::string& name, Shape shape, Rng& rng, double sigma,
                      bool no_decay = false) {
        std::vector<double> d(shape_numel(shape));
        for (auto& v : d) v = rng.normal() * sigma;
        return add(name, std::move(shape), std::move(d), no_decay);
    }

    Tensor add_zeros(const std::string& name, Shape shape, bool no_decay = false) {
        std::vector<double> d(shape_numel(shape), 0.0);
        return add(name, std::move(shape), std::move(d), no_decay);
    }

    Tensor add_full(const std::string& name, Shape shape, double v, bool no_decay = false) {
        std::vector<double> d(shape_numel(shape), v);
        return add(name, std::move(shape), std::move(d), no_decay);
    }

    Tensor get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw Error("unknown parameter '" + name + "'");
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) > 0; }
    bool is_no_decay(const std::string& name) const { return no_decay_.count(name) > 0; }
    const std::map<std::string, Tensor>& all() const { return params_; }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    Index scalar_count() const {
        Index n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

private:
    std::map<std::string, Tensor> params_;
    std::set<std::string> no_decay_;
};

// Linear warmup to lr0 followed by cosine annealing to lr_min over
// total_steps. step may equal total_steps (returns lr_min).
inline double cosine_lr(std::uint64_t step, std::uint64_t total_steps, std::uint64_t warmup,
                        double lr0, double lr_min = 1e-8) {
    if (total_steps == 0) throw ConfigError("cosine_lr: total_steps must be positive");
    if (warmup >= total_steps) throw ConfigError("cosine_lr: warmup must be < total_steps");
    if (warmup > 0 && step < warmup)
        return lr0 * static_cast<double>(step + 1) / static_cast<double>(warmup);
    double denom = static_cast<double>(total_steps - warmup);
    double p = (static_cast<double>(step - warmup)) / denom;
    p = std::min(1.0, std::max(0.0, p));
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(3.141592653589793238463 * p));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class AdamW {
public:
    AdamW(ParamStore& store, AdamWConfig cfg) : store_(store), cfg_(cfg) {
        for (const auto& [name, t] : store.all()) {
            state_[name].m.assign(t.numel(), 0.0);
            state_[name].v.assign(t.numel(), 0.0);
        }
    }

    void step(double lr) {
        ++t_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& [name, p] : store_.all()) {
            const auto& g = p.grad();
            if (g.size() != p.numel())
                throw Error("AdamW: parameter '" + name + "' has no gradient");
            auto& st = state_.at(name);
            auto& vals = const_cast<Tensor&>(p).mutable_values();
            double wd = store_.is_no_decay(name) ? 0.0 : cfg_.weight_decay;
            for (Index i = 0; i < vals.size(); ++i) {
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g[i];
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                double mhat = st.m[i] / bc1;
                double vhat = st.v[i] / bc2;
                vals[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * vals[i]);
            }
        }
    }

    std::uint64_t steps_taken() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

    struct Slot {
        std::vector<double> m, v;
    };
    const std::map<std::string, Slot>& state() const { return state_; }
    std::map<std::string, Slot>& state() { return state_; }
    void set_steps_taken(std::uint64_t t) { t_ = t; }

private:
    ParamStore& store_;
    AdamWConfig cfg_;
    std::map<std::string, Slot> state_;
    std::uint64_t t_ = 0;
};

}  // namespace somnus
