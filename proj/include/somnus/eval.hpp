#pragma once
// Linear probing on frozen embeddings: class-frequency weights, wake-margin
// truncation, Cox partial likelihood, Harrell's concordance, classification
// metrics, and a small AdamW training loop for the probe heads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "somnus/nnops.hpp"
#include "somnus/optim.hpp"
#include "somnus/record.hpp"

namespace somnus {

enum class ProbeTask { stage5, sdb3, survival, regression, binary };

inline const char* probe_task_name(ProbeTask t) {
    switch (t) {
        case ProbeTask::stage5: return "stage5";
        case ProbeTask::sdb3: return "sdb3";
        case ProbeTask::survival: return "survival";
        case ProbeTask::regression: return "regression";
        case ProbeTask::binary: return "binary";
    }
    throw ConfigError("probe_task_name: unknown task");
}

inline ProbeTask probe_task_from(const std::string& name) {
    for (ProbeTask t : {ProbeTask::stage5, ProbeTask::sdb3, ProbeTask::survival,
                        ProbeTask::regression, ProbeTask::binary})
        if (name == probe_task_name(t)) return t;
    throw ConfigError("unknown probe task '" + name + "'");
}

inline std::size_t probe_class_count(ProbeTask t) {
    switch (t) {
        case ProbeTask::stage5: return kStageCount;
        case ProbeTask::sdb3: return kSdbClassCount;
        case ProbeTask::binary: return 2;
        default: return 1;  // scalar heads
    }
}

// --- class-frequency weights ------------------------------------------------

namespace detail {
inline double floored_count(std::size_t count, std::size_t k, const char* who) {
    if (count > 0) return static_cast<double>(count);
    Warnings::emit(std::string(who) + ": class " + std::to_string(k) +
                   " has no samples; count floored to 1");
    return 1.0;
}
}  // namespace detail

// w_k = log_5(N / N_k); zero-count classes are floored to one sample.
inline std::vector<double> stage_class_weights(const std::vector<std::size_t>& counts) {
    if (counts.empty()) throw ConfigError("stage_class_weights: no classes");
    double n = 0.0;
    for (std::size_t c : counts) n += static_cast<double>(c);
    if (n == 0.0) throw DataError("stage_class_weights: no samples");
    std::vector<double> w(counts.size());
    for (std::size_t k = 0; k < counts.size(); ++k)
        w[k] = std::log(n / detail::floored_count(counts[k], k, "stage_class_weights")) /
               std::log(5.0);
    return w;
}

// w_k = N / N_k; zero-count classes are floored to one sample.
inline std::vector<double> sdb_class_weights(const std::vector<std::size_t>& counts) {
    if (counts.empty()) throw ConfigError("sdb_class_weights: no classes");
    double n = 0.0;
    for (std::size_t c : counts) n += static_cast<double>(c);
    if (n == 0.0) throw DataError("sdb_class_weights: no samples");
    std::vector<double> w(counts.size());
    for (std::size_t k = 0; k < counts.size(); ++k)
        w[k] = n / detail::floored_count(counts[k], k, "sdb_class_weights");
    return w;
}

// --- wake truncation ----------------------------------------------------------

struct EpochRange {
    std::size_t start = 0, end = 0;  // half-open [start, end)
    bool all_wake = false;
};

// Keeps at most 30 min (60 epochs) of Wake on either side of the sleep period.
// All-Wake hypnograms are kept whole and flagged.
inline EpochRange wake_truncate(const std::vector<int>& stages) {
    EpochRange r;
    r.end = stages.size();
    auto first = std::find_if(stages.begin(), stages.end(), [](int s) { return s != 0; });
    if (first == stages.end()) {
        r.all_wake = true;
        Warnings::emit("wake_truncate: all-wake hypnogram kept whole");
        return r;
    }
    std::size_t fi = static_cast<std::size_t>(first - stages.begin());
    std::size_t li = stages.size() - 1 -
                     static_cast<std::size_t>(
                         std::find_if(stages.rbegin(), stages.rend(),
                                      [](int s) { return s != 0; }) -
                         stages.rbegin());
    r.start = fi > 60 ? fi - 60 : 0;
    r.end = std::min(stages.size(), li + 61);
    return r;
}

// --- survival -----------------------------------------------------------------

struct SurvivalBatch {
    Tensor risks;  // [N] scores h_i (any shape with N elements accepted)
    std::vector<double> times;
    std::vector<std::uint8_t> events;  // 1 = observed, 0 = censored

    std::size_t event_count() const {
        return static_cast<std::size_t>(
            std::count(events.begin(), events.end(), std::uint8_t{1}));
    }
};

// Negative log partial likelihood, averaged over events. Risk sets use the
// Breslow convention: every subject with time_k >= time_i, ties included.
inline Tensor cox_ph_loss(const SurvivalBatch& batch) {
    const std::size_t n = batch.times.size();
    if (batch.events.size() != n || batch.risks.numel() != n)
        throw ShapeError("cox_ph_loss: " + std::to_string(batch.risks.numel()) +
                         " risks vs " + std::to_string(n) + " times vs " +
                         std::to_string(batch.events.size()) + " events");
    const std::size_t ne = batch.event_count();
    if (ne == 0) throw DataError("cox_ph_loss: no events in batch");
    Tensor h = reshape(batch.risks, {static_cast<Index>(n)});
    // one row per event: 0 over its risk set, -1e30 elsewhere, so the
    // log-sum-exp runs over exactly the at-risk subjects
    std::vector<double> mask(ne * n, -1e30), sel(ne * n, 0.0);
    std::size_t r = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!batch.events[i]) continue;
        for (std::size_t k = 0; k < n; ++k)
            if (batch.times[k] >= batch.times[i]) mask[r * n + k] = 0.0;
        sel[r * n + i] = 1.0;
        ++r;
    }
    Shape rows{static_cast<Index>(ne), static_cast<Index>(n)};
    Tensor lse = logsumexp_last(add(Tensor::from(rows, std::move(mask)), h));
    Tensor h_events = reshape(matmul(Tensor::from(rows, std::move(sel)),
                                     reshape(h, {static_cast<Index>(n), 1})),
                              {static_cast<Index>(ne)});
    return mean(sub(lse, h_events));
}

// Harrell's concordance: over pairs (i event, time_i < time_j), the fraction
// where the earlier event carries the higher risk; risk ties count 0.5.
inline double c_index(const std::vector<double>& risks, const std::vector<double>& times,
                      const std::vector<std::uint8_t>& events) {
    const std::size_t n = risks.size();
    if (times.size() != n || events.size() != n)
        throw ShapeError("c_index: " + std::to_string(n) + " risks vs " +
                         std::to_string(times.size()) + " times vs " +
                         std::to_string(events.size()) + " events");
    double score = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!events[i]) continue;
        for (std::size_t j = 0; j < n; ++j) {
            if (times[j] <= times[i]) continue;
            ++pairs;
            if (risks[i] > risks[j])
                score += 1.0;
            else if (risks[i] == risks[j])
                score += 0.5;
        }
    }
    if (pairs == 0) throw DataError("c_index: no comparable pairs");
    return score / static_cast<double>(pairs);
}

// --- classification metrics ----------------------------------------------------

using Confusion = std::vector<std::vector<std::size_t>>;  // [true][predicted]

inline Confusion confusion_matrix(const std::vector<int>& truth,
                                  const std::vector<int>& predicted,
                                  std::size_t classes) {
    if (truth.size() != predicted.size())
        throw ShapeError("confusion_matrix: " + std::to_string(truth.size()) +
                         " labels vs " + std::to_string(predicted.size()) +
                         " predictions");
    Confusion m(classes, std::vector<std::size_t>(classes, 0));
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] < 0 || predicted[i] < 0 ||
            static_cast<std::size_t>(truth[i]) >= classes ||
            static_cast<std::size_t>(predicted[i]) >= classes)
            throw DataError("confusion_matrix: class out of range at row " +
                            std::to_string(i));
        ++m[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
    }
    return m;
}

struct ClassificationMetrics {
    double accuracy = 0.0, macro_f1 = 0.0, kappa = 0.0;
    std::vector<double> per_class_f1;
};

inline ClassificationMetrics classification_metrics(const Confusion& m) {
    const std::size_t k = m.size();
    if (k == 0) throw ShapeError("classification_metrics: empty matrix");
    double total = 0.0, diag = 0.0;
    std::vector<double> row(k, 0.0), col(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        if (m[i].size() != k) throw ShapeError("classification_metrics: ragged matrix");
        for (std::size_t j = 0; j < k; ++j) {
            double v = static_cast<double>(m[i][j]);
            total += v;
            row[i] += v;
            col[j] += v;
            if (i == j) diag += v;
        }
    }
    if (total == 0.0) throw DataError("classification_metrics: no samples");
    ClassificationMetrics out;
    out.accuracy = diag / total;
    out.per_class_f1.resize(k, 0.0);
    for (std::size_t i = 0; i < k; ++i) {
        double tp = static_cast<double>(m[i][i]);
        double denom = row[i] + col[i];  // 2tp + fp + fn
        out.per_class_f1[i] = denom > 0.0 ? 2.0 * tp / denom : 0.0;
    }
    out.macro_f1 = std::accumulate(out.per_class_f1.begin(), out.per_class_f1.end(), 0.0) /
                   static_cast<double>(k);
    double pe = 0.0;
    for (std::size_t i = 0; i < k; ++i) pe += row[i] * col[i];
    pe /= total * total;
    if (pe >= 1.0) {
        Warnings::emit("classification_metrics: chance agreement is 1; kappa reported 0");
        out.kappa = 0.0;
    } else {
        out.kappa = (out.accuracy - pe) / (1.0 - pe);
    }
    return out;
}

// --- probe heads -----------------------------------------------------------------

struct ProbeHead {
    ProbeTask task = ProbeTask::stage5;
    Tensor w;  // [D, C]
    Tensor b;  // [C]

    Tensor logits(const Tensor& embeddings) const { return add(matmul(embeddings, w), b); }

    // scalar heads flattened to one score per row
    Tensor scores(const Tensor& embeddings) const {
        return reshape(logits(embeddings), {embeddings.dim(0)});
    }
};

struct ProbeData {
    Tensor embeddings;                 // [N, D]
    std::vector<int> classes;          // stage5 / sdb3 / binary
    std::vector<double> targets;       // regression
    std::vector<double> times;         // survival
    std::vector<std::uint8_t> events;  // survival
};

struct ProbeConfig {
    double lr = 0.0;  // 0 -> per-task default (see default_probe_lr)
    double lr_min = 1e-8;
    double weight_decay = 1e-4;
    std::size_t steps = 200;
    std::size_t batch = 0;  // rows per step; 0 = full batch
    bool weighted = true;   // frequency weights for stage5/sdb3
    std::uint64_t seed = 0;
};

inline double default_probe_lr(ProbeTask t) {
    return t == ProbeTask::sdb3 ? 4e-4 : 1e-2;
}

// Weighted cross entropy, normalized by the summed weights of the batch so
// that uniformly scaled weights leave the loss unchanged.
inline Tensor weighted_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                                     const std::vector<double>& class_weights) {
    const Index n = logits.dim(0), c = logits.dim(1);
    if (labels.size() != n)
        throw ShapeError("weighted_cross_entropy: " + std::to_string(labels.size()) +
                         " labels vs " + std::to_string(n) + " rows");
    if (class_weights.size() != c)
        throw ShapeError("weighted_cross_entropy: " + std::to_string(class_weights.size()) +
                         " weights vs " + std::to_string(c) + " classes");
    std::vector<double> sel(n * c, 0.0);
    double wsum = 0.0;
    for (Index i = 0; i < n; ++i) {
        int y = labels[i];
        if (y < 0 || static_cast<Index>(y) >= c)
            throw DataError("weighted_cross_entropy: label out of range at row " +
                            std::to_string(i));
        sel[i * c + static_cast<Index>(y)] = class_weights[static_cast<std::size_t>(y)];
        wsum += class_weights[static_cast<std::size_t>(y)];
    }
    if (wsum <= 0.0) throw ConfigError("weighted_cross_entropy: non-positive weight mass");
    Tensor logp = add_leading(logits, neg(logsumexp_last(logits)));
    return scalar_mul(neg(sum(mul(logp, Tensor::from({n, c}, std::move(sel))))),
                      1.0 / wsum);
}

struct ProbeResult {
    ProbeHead head;
    std::vector<double> loss_history;  // pre-update loss, one entry per step
    std::vector<double> class_weights;
};

namespace detail {

inline void check_probe_labels(ProbeTask task, const ProbeData& data) {
    const std::size_t n = data.embeddings.dim(0);
    auto expect = [&](std::size_t got, const char* what) {
        if (got != n)
            throw ShapeError(std::string("probe data: ") + std::to_string(got) + " " +
                             what + " vs " + std::to_string(n) + " embedding rows");
    };
    switch (task) {
        case ProbeTask::stage5:
        case ProbeTask::sdb3:
        case ProbeTask::binary:
            expect(data.classes.size(), "labels");
            break;
        case ProbeTask::regression:
            expect(data.targets.size(), "targets");
            break;
        case ProbeTask::survival:
            expect(data.times.size(), "times");
            expect(data.events.size(), "event flags");
            break;
    }
}

inline std::vector<std::size_t> class_counts(const std::vector<int>& labels,
                                             std::size_t classes) {
    std::vector<std::size_t> counts(classes, 0);
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= classes)
            throw DataError("probe labels: class out of range");
        ++counts[static_cast<std::size_t>(y)];
    }
    return counts;
}

}  // namespace detail

// Trains a linear head on frozen embeddings with AdamW + cosine annealing.
// Backbone parameters never enter the optimizer; only w and b move.
inline ProbeResult probe_train(ProbeTask task, const ProbeData& data,
                               const ProbeConfig& cfg = {}) {
    detail::check_probe_labels(task, data);
    const Index n = data.embeddings.dim(0), d = data.embeddings.dim(1);
    const std::size_t classes = probe_class_count(task);

    std::vector<double> weights(classes, 1.0);
    if (task == ProbeTask::stage5 || task == ProbeTask::sdb3) {
        auto counts = detail::class_counts(data.classes, classes);
        std::size_t present = 0;
        for (std::size_t c : counts) present += c > 0 ? 1 : 0;
        if (present < 2)
            throw DataError(std::string("probe labels: degenerate ") +
                            probe_task_name(task) + " track with one class present");
        if (cfg.weighted)
            weights = task == ProbeTask::stage5 ? stage_class_weights(counts)
                                                : sdb_class_weights(counts);
    }

    ParamStore params;
    params.add_zeros("probe.w", {d, static_cast<Index>(classes)});
    params.add_zeros("probe.b", {static_cast<Index>(classes)}, true);
    AdamWConfig ocfg;
    ocfg.weight_decay = cfg.weight_decay;
    AdamW opt(params, ocfg);
    const double lr0 = cfg.lr > 0.0 ? cfg.lr : default_probe_lr(task);
    if (cfg.steps == 0) throw ConfigError("probe_train: zero steps");

    Rng rng(derive_seed(cfg.seed, "probe", probe_task_name(task)));
    std::vector<Index> order(n);
    std::iota(order.begin(), order.end(), Index{0});
    const std::size_t batch = cfg.batch == 0 ? n : std::min<std::size_t>(cfg.batch, n);
    std::size_t cursor = n;  // force an initial shuffle for minibatch runs

    ProbeHead head{task, params.get("probe.w"), params.get("probe.b")};
    ProbeResult out;
    out.class_weights = weights;
    out.loss_history.reserve(cfg.steps);

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::vector<Index> rows;
        if (batch == static_cast<std::size_t>(n)) {
            rows = order;
        } else {
            rows.reserve(batch);
            while (rows.size() < batch) {
                if (cursor >= order.size()) {
                    rng.shuffle(order);
                    cursor = 0;
                }
                rows.push_back(order[cursor++]);
            }
            if (task == ProbeTask::survival) {
                bool any_event = false;
                for (Index r : rows) any_event |= data.events[r] != 0;
                if (!any_event) continue;  // event-free minibatch has no likelihood
            }
        }
        Tensor emb = batch == static_cast<std::size_t>(n)
                         ? data.embeddings
                         : index_rows(data.embeddings, rows);

        Tensor loss = [&] {
            switch (task) {
                case ProbeTask::stage5:
                case ProbeTask::sdb3:
                case ProbeTask::binary: {
                    std::vector<int> labels(rows.size());
                    for (std::size_t i = 0; i < rows.size(); ++i)
                        labels[i] = data.classes[rows[i]];
                    return weighted_cross_entropy(head.logits(emb), labels, weights);
                }
                case ProbeTask::regression: {
                    std::vector<double> t(rows.size());
                    for (std::size_t i = 0; i < rows.size(); ++i)
                        t[i] = data.targets[rows[i]];
                    Tensor target =
                        Tensor::from({static_cast<Index>(rows.size())}, std::move(t));
                    return mean(abs(sub(head.scores(emb), target)));
                }
                case ProbeTask::survival: {
                    SurvivalBatch sb;
                    sb.risks = head.scores(emb);
                    sb.times.reserve(rows.size());
                    sb.events.reserve(rows.size());
                    for (Index r : rows) {
                        sb.times.push_back(data.times[r]);
                        sb.events.push_back(data.events[r]);
                    }
                    return cox_ph_loss(sb);
                }
            }
            throw ConfigError("probe_train: unknown task");
        }();

        out.loss_history.push_back(loss.item());
        params.zero_grad();
        loss.backward();
        opt.step(cosine_lr(step, cfg.steps, 0, lr0, cfg.lr_min));
    }
    out.head = head;
    return out;
}

// --- evaluation -----------------------------------------------------------------

struct ProbeMetrics {
    std::optional<double> accuracy, macro_f1, kappa, c_index, mae;
    std::vector<double> per_class_f1;
    Confusion confusion;
};

inline ProbeMetrics evaluate_probe(const ProbeHead& head, const ProbeData& data) {
    NoGrad ng;
    detail::check_probe_labels(head.task, data);
    ProbeMetrics out;
    switch (head.task) {
        case ProbeTask::stage5:
        case ProbeTask::sdb3:
        case ProbeTask::binary: {
            const std::size_t classes = probe_class_count(head.task);
            Tensor logits = head.logits(data.embeddings);
            const auto& v = logits.values();
            std::vector<int> pred(data.classes.size());
            for (std::size_t i = 0; i < pred.size(); ++i) {
                auto begin = v.begin() + static_cast<std::ptrdiff_t>(i * classes);
                pred[i] = static_cast<int>(
                    std::max_element(begin, begin + static_cast<std::ptrdiff_t>(classes)) -
                    begin);
            }
            out.confusion = confusion_matrix(data.classes, pred, classes);
            auto m = classification_metrics(out.confusion);
            out.accuracy = m.accuracy;
            out.macro_f1 = m.macro_f1;
            out.kappa = m.kappa;
            out.per_class_f1 = m.per_class_f1;
            break;
        }
        case ProbeTask::regression: {
            Tensor scores = head.scores(data.embeddings);
            const auto& v = scores.values();
            double acc = 0.0;
            for (std::size_t i = 0; i < v.size(); ++i)
                acc += std::fabs(v[i] - data.targets[i]);
            out.mae = acc / static_cast<double>(v.size());
            break;
        }
        case ProbeTask::survival: {
            Tensor scores = head.scores(data.embeddings);
            out.c_index = c_index(scores.values(), data.times, data.events);
            break;
        }
    }
    return out;
}

inline nlohmann::json metrics_json(ProbeTask task, const std::string& split,
                                   const ProbeMetrics& m) {
    auto opt = [](const std::optional<double>& v) {
        return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    return nlohmann::json{{"task", probe_task_name(task)},
                          {"split", split},
                          {"accuracy", opt(m.accuracy)},
                          {"macro_f1", opt(m.macro_f1)},
                          {"kappa", opt(m.kappa)},
                          {"c_index", opt(m.c_index)},
                          {"mae", opt(m.mae)},
                          {"per_class", m.per_class_f1}};
}

inline std::string confusion_csv(const Confusion& m) {
    std::string out = "true\\pred";
    for (std::size_t j = 0; j < m.size(); ++j) out += ",c" + std::to_string(j);
    out += "\n";
    for (std::size_t i = 0; i < m.size(); ++i) {
        out += "c" + std::to_string(i);
        for (std::size_t j = 0; j < m[i].size(); ++j)
            out += "," + std::to_string(m[i][j]);
        out += "\n";
    }
    return out;
}

// A 1-s label covers two 500-ms tokens; averaging adjacent rows aligns the
// token stream to the label track.
inline std::vector<std::vector<double>> second_pool(
    const std::vector<std::vector<double>>& rows) {
    if (rows.size() % 2 != 0)
        throw ShapeError("second_pool: odd row count " + std::to_string(rows.size()));
    std::vector<std::vector<double>> out;
    out.reserve(rows.size() / 2);
    for (std::size_t i = 0; i < rows.size(); i += 2) {
        if (rows[i].size() != rows[i + 1].size())
            throw ShapeError("second_pool: ragged rows");
        std::vector<double> r(rows[i].size());
        for (std::size_t k = 0; k < r.size(); ++k)
            r[k] = 0.5 * (rows[i][k] + rows[i + 1][k]);
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace somnus
