#pragma once
// Night-scale context encoder. Epoch embeddings run through selective
// state-space blocks in both time directions; per-subject summaries are taken
// at sleep-cycle endpoints and shaped by a demographic-guided contrast: the
// softer the demographic distance between two subjects, the more their
// summary embeddings are pulled together.

#include <deque>

#include "somnus/nnops.hpp"
#include "somnus/optim.hpp"
#include "somnus/record.hpp"

namespace somnus {

struct MacroConfig {
    Index in_dim = 288;        // micro epoch-embedding width
    Index d_model = 128;
    Index d_state = 8;
    Index depth = 2;           // blocks per direction
    Index cycle_epochs = 180;  // ~90 min summary endpoints
    double upsilon = 0.5;      // demographic kernel temperature
    double rho = 0.1;          // embedding contrast temperature

    static MacroConfig desk() { return {}; }

    static MacroConfig tiny() {
        MacroConfig c;
        c.in_dim = 6;
        c.d_model = 8;
        c.d_state = 3;
        c.depth = 1;
        c.cycle_epochs = 4;
        return c;
    }

    void validate() const {
        if (in_dim < 1 || d_model < 1 || d_state < 1 || depth < 1 || cycle_epochs < 1)
            throw ConfigError("macro: all dimensions must be positive");
        if (upsilon <= 0.0 || rho <= 0.0)
            throw ConfigError("macro: temperatures must be positive");
    }
};

// Sleep-cycle summary positions: the last epoch of each cycle_epochs span,
// clipped to the recording, plus the final epoch.
inline std::vector<Index> cycle_endpoints(Index epochs, Index cycle_epochs) {
    if (epochs == 0) throw DataError("cycle_endpoints: empty recording");
    std::vector<Index> out;
    for (Index c = 1;; ++c) {
        Index e = std::min(c * cycle_epochs, epochs) - 1;
        if (out.empty() || e != out.back()) out.push_back(e);
        if (c * cycle_epochs >= epochs) break;
    }
    return out;
}

class MacroModel {
public:
    MacroModel(MacroConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(seed, "macro-params"));
        p_.add_normal("in.w", {cfg_.in_dim, cfg_.d_model}, rng, 0.02);
        for (const char* dir : {"fwd", "bwd"})
            for (Index i = 0; i < cfg_.depth; ++i)
                init_block_(std::string(dir) + ".block" + std::to_string(i), rng);
    }

    const MacroConfig& config() const { return cfg_; }
    ParamStore& params() { return p_; }
    const ParamStore& params() const { return p_; }

    struct Forward {
        Tensor contextual;       // [L, 2*d_model]: forward and backward halves
        Tensor forward_states;   // [L, d_model], causal
        Tensor backward_states;  // [L, d_model] in reverse scan order
    };

    Forward forward(const Tensor& embeddings) const {
        if (embeddings.rank() != 2 || embeddings.dim(1) != cfg_.in_dim)
            throw ShapeError("macro forward: expected [L, " + std::to_string(cfg_.in_dim) +
                             "] embeddings");
        const Index length = embeddings.dim(0);
        if (length == 0) throw DataError("macro forward: empty sequence");
        Tensor x = matmul(embeddings, p_.get("in.w"));
        Tensor fwd = x;
        for (Index i = 0; i < cfg_.depth; ++i)
            fwd = block_("fwd.block" + std::to_string(i), fwd);
        std::vector<Index> ridx(length);
        for (Index i = 0; i < length; ++i) ridx[i] = length - 1 - i;
        Tensor rev = index_rows(x, ridx);
        for (Index i = 0; i < cfg_.depth; ++i)
            rev = block_("bwd.block" + std::to_string(i), rev);
        Forward f{concat({fwd, index_rows(rev, ridx)}, 1), fwd, rev};
        return f;
    }

    // Mean of the normalised cycle-endpoint states, per direction. The
    // backward stream is read in its own scan order, so its endpoints span
    // the night from the opposite end.
    Tensor subject_embedding(const Forward& f) const {
        auto ends = cycle_endpoints(f.forward_states.dim(0), cfg_.cycle_epochs);
        Tensor fe = mean0(l2normalize_last(index_rows(f.forward_states, ends)));
        Tensor be = mean0(l2normalize_last(index_rows(f.backward_states, ends)));
        return concat({fe, be}, 0);  // [2*d_model]
    }

private:
    Tensor block_(const std::string& prefix, const Tensor& x) const {
        Tensor xn = mul(rmsnorm_last(x), p_.get(prefix + ".norm.g"));
        Tensor u = matmul(xn, p_.get(prefix + ".w_u"));
        Tensor g = matmul(xn, p_.get(prefix + ".w_g"));
        // input-dependent step size, mixing matrices shared across channels
        Tensor delta =
            softplus(add(matmul(u, p_.get(prefix + ".w_dt")), p_.get(prefix + ".b_dt")));
        Tensor bsel = matmul(u, p_.get(prefix + ".w_b"));  // [L, N]
        Tensor csel = matmul(u, p_.get(prefix + ".w_c"));
        Tensor a = neg(exp(p_.get(prefix + ".a_log")));    // [d, N], strictly negative
        Tensor abar = exp(outer_mul(delta, a));            // [L, d, N]
        Tensor drive = cross_mul(mul(delta, u), bsel);
        Tensor h = linear_scan(abar, drive);
        Tensor y = add(cross_contract(h, csel), mul(u, p_.get(prefix + ".d")));
        y = mul(y, silu(g));
        return add(x, matmul(y, p_.get(prefix + ".w_out")));
    }

    void init_block_(const std::string& prefix, Rng& rng) {
        const Index d = cfg_.d_model, n = cfg_.d_state;
        p_.add_full(prefix + ".norm.g", {d}, 1.0, true);
        p_.add_normal(prefix + ".w_u", {d, d}, rng, 0.02);
        p_.add_normal(prefix + ".w_g", {d, d}, rng, 0.02);
        p_.add_normal(prefix + ".w_dt", {d, d}, rng, 0.02);
        std::vector<double> bdt(d);
        for (auto& v : bdt) {
            double target = rng.uniform(0.001, 0.1);
            v = std::log(std::expm1(target));  // softplus(v) == target
        }
        p_.add(prefix + ".b_dt", {d}, std::move(bdt), true);
        p_.add_normal(prefix + ".w_b", {d, n}, rng, 0.02);
        p_.add_normal(prefix + ".w_c", {d, n}, rng, 0.02);
        std::vector<double> alog(d * n);
        for (Index c = 0; c < d; ++c)
            for (Index j = 0; j < n; ++j) alog[c * n + j] = std::log(double(j + 1));
        p_.add(prefix + ".a_log", {d, n}, std::move(alog), true);
        p_.add_full(prefix + ".d", {d}, 1.0, true);
        p_.add_normal(prefix + ".w_out", {d, d}, rng, 0.02);
    }

    MacroConfig cfg_;
    ParamStore p_;
};

// ---------------------------------------------------------------------------
// Demographic-guided contrast.

struct SubjectDemo {
    double z_age = 0.0;
    double z_bmi = 0.0;
    Sex sex = Sex::F;
};

inline SubjectDemo standardize_demo(const Demographics& d, double age_mean, double age_sd,
                                    double bmi_mean, double bmi_sd) {
    if (age_sd <= 0.0 || bmi_sd <= 0.0)
        throw ConfigError("standardize_demo: non-positive spread");
    return {(d.age - age_mean) / age_sd, (d.bmi - bmi_mean) / bmi_sd, d.sex};
}

inline double demographic_distance(const SubjectDemo& a, const SubjectDemo& b) {
    return (std::fabs(a.z_age - b.z_age) + std::fabs(a.z_bmi - b.z_bmi)) / 2.0 +
           (a.sex == b.sex ? 0.0 : 1.0);
}

// Row-stochastic affinity over the off-diagonal: w_ij = softmax_j(-d_ij / upsilon).
inline std::vector<double> dgcl_weights(const std::vector<SubjectDemo>& demos,
                                        double upsilon) {
    const std::size_t c = demos.size();
    if (c < 2) throw DataError("dgcl_weights: need at least two subjects");
    if (upsilon <= 0.0) throw ConfigError("dgcl_weights: temperature must be positive");
    std::vector<double> w(c * c, 0.0);
    for (std::size_t i = 0; i < c; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j)
            if (j != i)
                mx = std::max(mx, -demographic_distance(demos[i], demos[j]) / upsilon);
        double tot = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            if (j == i) continue;
            double e = std::exp(-demographic_distance(demos[i], demos[j]) / upsilon - mx);
            w[i * c + j] = e;
            tot += e;
        }
        for (std::size_t j = 0; j < c; ++j) w[i * c + j] /= tot;
    }
    return w;
}

// Soft supervised contrast over subject summaries: log-probabilities from the
// temperature-scaled Gram matrix (diagonal excluded), weighted by the
// demographic affinities.
inline Tensor dgcl_loss(const Tensor& subject_embeds, const std::vector<SubjectDemo>& demos,
                        double upsilon = 0.5, double rho = 0.1) {
    if (subject_embeds.rank() != 2) throw ShapeError("dgcl_loss: expected [C, E] embeddings");
    const Index c = subject_embeds.dim(0);
    if (c < 2) throw DataError("dgcl_loss: need at least two subjects");
    if (static_cast<Index>(demos.size()) != c)
        throw ShapeError("dgcl_loss: demographic count mismatch");
    if (rho <= 0.0) throw ConfigError("dgcl_loss: temperature must be positive");
    Tensor z = l2normalize_last(subject_embeds);
    Tensor gram = scalar_mul(matmul(z, transpose2(z)), 1.0 / rho);
    std::vector<double> diag(c * c, 0.0);
    for (Index i = 0; i < c; ++i) diag[i * c + i] = -1e30;
    Tensor gm = add(gram, Tensor::from({c, c}, std::move(diag)));
    Tensor logp = add_leading(gm, neg(logsumexp_last(gm)));
    Tensor w = Tensor::from({c, c}, dgcl_weights(demos, upsilon));
    return neg(sum(mul(w, logp)));
}

// ---------------------------------------------------------------------------
// Sex-stratified batching: subjects sorted by (epochs, id), queues drained
// round-robin across sexes so every batch mixes both when the pool allows.

struct SubjectKey {
    std::string id;
    Sex sex = Sex::F;
    std::size_t epochs = 0;
};

inline std::vector<std::vector<std::size_t>> stratified_batches(
    const std::vector<SubjectKey>& subjects, std::size_t batch_size) {
    if (batch_size == 0) throw ConfigError("stratified_batches: zero batch size");
    std::vector<std::size_t> order(subjects.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (subjects[a].epochs != subjects[b].epochs)
            return subjects[a].epochs < subjects[b].epochs;
        return subjects[a].id < subjects[b].id;
    });
    std::deque<std::size_t> queue[2];
    for (std::size_t idx : order) queue[subjects[idx].sex == Sex::M ? 1 : 0].push_back(idx);
    std::vector<std::size_t> seq;
    seq.reserve(subjects.size());
    while (!queue[0].empty() || !queue[1].empty()) {
        for (auto& q : queue) {
            if (q.empty()) continue;
            seq.push_back(q.front());
            q.pop_front();
        }
    }
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < seq.size(); i += batch_size) {
        std::vector<std::size_t> b(seq.begin() + i,
                                   seq.begin() + std::min(i + batch_size, seq.size()));
        batches.push_back(std::move(b));
    }
    return batches;
}

}  // namespace somnus
