#pragma once
// Epoch-scale signal encoder. Per-modality convolutional patch embeddings run
// through private attention stacks, merge to a coarser token rate, mix in a
// shared mixture-of-experts trunk, and fuse back through cross-attention.
// A light decoder reconstructs masked patches; pooled tokens feed the
// cross-modal contrastive and spread (KoLeo) losses.

#include <algorithm>
#include <optional>

#include "somnus/mask.hpp"
#include "somnus/nnops.hpp"
#include "somnus/optim.hpp"
#include "somnus/record.hpp"

namespace somnus {

struct MicroConfig {
    std::vector<Modality> modalities;
    std::vector<Index> conv_channels;  // patch embed stack; last entry is d_low
    std::vector<Index> conv_kernels;   // kernel == stride keeps windows inside patches
    std::vector<Index> conv_strides;
    Index d_low = 32;
    Index d_high = 96;
    Index merge_hidden = 64;
    Index decoder_dim = 16;
    Index lower_depth = 1;
    Index higher_depth = 1;
    Index shared_depth = 2;
    Index fusion_depth = 2;
    Index heads = 2;
    Index experts = 4;
    Index experts_active = 2;
    Index patch_len = static_cast<Index>(kPatchLen);
    Index merge_kernel = 10;
    Index merge_stride = 5;
    double rope_base = 10000.0;

    static MicroConfig desk() {
        MicroConfig c;
        c.modalities = {Modality::EEG, Modality::EMG, Modality::RESP};
        c.conv_channels = {8, 16, 32};
        c.conv_kernels = {10, 5, 1};
        c.conv_strides = {10, 5, 1};
        return c;
    }

    // Full-width layout; exercised for shapes only.
    static MicroConfig reference() {
        MicroConfig c;
        c.modalities = {Modality::EEG, Modality::EOG, Modality::EMG,
                        Modality::ECG, Modality::RESP, Modality::SPO2};
        c.conv_channels = {32, 64, 128};
        c.conv_kernels = {10, 5, 1};
        c.conv_strides = {10, 5, 1};
        c.d_low = 128;
        c.d_high = 384;
        c.merge_hidden = 256;
        c.decoder_dim = 64;
        c.lower_depth = 2;
        c.higher_depth = 2;
        c.shared_depth = 4;
        c.fusion_depth = 4;
        c.heads = 8;
        return c;
    }

    // Smallest stable layout; used for finite-difference gradient checks.
    static MicroConfig tiny() {
        MicroConfig c;
        c.modalities = {Modality::EEG, Modality::RESP};
        c.conv_channels = {4, 8, 16};
        c.conv_kernels = {10, 5, 1};
        c.conv_strides = {10, 5, 1};
        c.d_low = 16;
        c.d_high = 48;
        c.merge_hidden = 32;
        c.decoder_dim = 8;
        return c;
    }

    void validate() const {
        if (modalities.empty()) throw ConfigError("micro: no modalities configured");
        for (std::size_t i = 0; i < modalities.size(); ++i)
            for (std::size_t j = i + 1; j < modalities.size(); ++j)
                if (modalities[i] == modalities[j])
                    throw ConfigError("micro: duplicate modality " +
                                      std::string(modality_name(modalities[i])));
        if (conv_channels.empty() || conv_channels.size() != conv_kernels.size() ||
            conv_channels.size() != conv_strides.size())
            throw ConfigError("micro: conv stack arrays must be non-empty and same length");
        Index span = 1;
        for (std::size_t i = 0; i < conv_kernels.size(); ++i) {
            if (conv_kernels[i] != conv_strides[i])
                throw ConfigError("micro: conv kernel must equal stride (patch alignment)");
            span *= conv_strides[i];
        }
        if (span != patch_len)
            throw ConfigError("micro: conv strides must multiply to the patch length");
        if (conv_channels.back() != d_low)
            throw ConfigError("micro: last conv width must equal d_low");
        if (lower_depth < 1 || higher_depth < 1 || shared_depth < 1 || fusion_depth < 1)
            throw ConfigError("micro: all stage depths must be at least 1");
        if (heads < 1 || experts < 1 || experts_active < 1 || experts_active > experts)
            throw ConfigError("micro: bad head/expert counts");
        for (Index d : {d_low, d_high, decoder_dim}) {
            if (d % heads != 0) throw ConfigError("micro: width not divisible by heads");
            if ((d / heads) % 2 != 0)
                throw ConfigError("micro: head width must be even for rotary offsets");
        }
        if (merge_hidden < 1 || merge_kernel < 1 || merge_stride < 1)
            throw ConfigError("micro: bad merge geometry");
    }
};

// ---------------------------------------------------------------------------
// Timeslot pooling: merged tokens -> one pooled vector per 30 s slot.

struct TimeslotPlan {
    std::vector<Index> slot_of_token;
    Index slots = 0;
};

inline TimeslotPlan timeslot_plan(Index patch_count, Index merge_kernel = 10,
                                  Index merge_stride = 5,
                                  Index patch_len = static_cast<Index>(kPatchLen),
                                  double hz = kTargetHz,
                                  double slot_seconds = double(kEpochSeconds)) {
    TimeslotPlan plan;
    Index tokens = merged_token_count(patch_count, merge_kernel, merge_stride);
    plan.slot_of_token.resize(tokens);
    for (Index i = 0; i < tokens; ++i) {
        // token i covers samples [s*i*L, (s*i+k)*L); slot by centre time
        double first = double(merge_stride * i * patch_len);
        double centre = (first + (double(merge_kernel * patch_len) - 1.0) / 2.0) / hz;
        plan.slot_of_token[i] = static_cast<Index>(centre / slot_seconds);
    }
    plan.slots = plan.slot_of_token.empty() ? 0 : plan.slot_of_token.back() + 1;
    return plan;
}

inline Tensor pool_timeslot(const Tensor& tokens, const TimeslotPlan& plan) {
    if (tokens.rank() != 2 || tokens.dim(0) != static_cast<Index>(plan.slot_of_token.size()))
        throw ShapeError("pool_timeslot: token count does not match plan");
    std::vector<Index> counts(plan.slots, 0);
    for (Index s : plan.slot_of_token) {
        if (s < 0 || s >= plan.slots) throw DataError("pool_timeslot: slot index out of range");
        ++counts[s];
    }
    for (Index s = 0; s < plan.slots; ++s)
        if (counts[s] == 0)
            throw DataError("pool_timeslot: timeslot " + std::to_string(s) + " has no tokens");
    std::vector<double> w(plan.slots * plan.slot_of_token.size(), 0.0);
    for (Index i = 0; i < static_cast<Index>(plan.slot_of_token.size()); ++i) {
        Index s = plan.slot_of_token[i];
        w[s * plan.slot_of_token.size() + i] = 1.0 / double(counts[s]);
    }
    Tensor mat = Tensor::from({plan.slots, static_cast<Index>(plan.slot_of_token.size())},
                              std::move(w));
    return matmul(mat, tokens);
}

// ---------------------------------------------------------------------------
// Mixture-of-experts routing: hard top-k selection read from logit values
// (not differentiated), gates renormalised over the selected experts through
// a masked softmax, so each row has exactly k nonzero gates summing to one.

struct MoeRouting {
    Tensor gates;                            // [N, E]
    std::vector<std::vector<Index>> assign;  // expert -> row indices
};

inline MoeRouting moe_route(const Tensor& logits, Index k) {
    if (logits.rank() != 2) throw ShapeError("moe_route: logits must be [N, E]");
    const Index n = logits.dim(0), ne = logits.dim(1);
    if (k < 1 || k > ne) throw ConfigError("moe_route: bad active expert count");
    const auto& lv = logits.values();
    std::vector<double> sel(n * ne, -1e30);
    MoeRouting route;
    route.assign.resize(ne);
    std::vector<Index> order(ne);
    for (Index i = 0; i < n; ++i) {
        for (Index e = 0; e < ne; ++e) order[e] = e;
        std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
            double la = lv[i * ne + a], lb = lv[i * ne + b];
            if (la != lb) return la > lb;
            return a < b;
        });
        for (Index j = 0; j < k; ++j) {
            sel[i * ne + order[j]] = 0.0;
            route.assign[order[j]].push_back(i);
        }
    }
    route.gates = softmax_last(add(logits, Tensor::from({n, ne}, std::move(sel))));
    return route;
}

// ---------------------------------------------------------------------------
// Batch containers.

struct MicroExample {
    std::vector<Tensor> patches;  // per config modality, [P, patch_len]
    std::vector<Tensor> targets;  // smoothed reconstruction targets, same shape
    std::vector<MaskPlan> plans;  // per config modality
};

struct MicroOutput {
    // indexed [element][modality position in config]
    std::vector<std::vector<std::optional<Tensor>>> recon;  // [n_masked, patch_len]
    std::vector<std::vector<Tensor>> fused;                 // [M, d_high]
    std::vector<std::vector<Tensor>> private_tokens;        // [M, d_high]
    std::vector<std::vector<Tensor>> shared_tokens;         // [M, d_high]
    std::vector<std::vector<MaskPlan>> plans;
    Index patch_count = 0;
    Index merged_count = 0;
};

// ---------------------------------------------------------------------------

class MicroModel {
public:
    MicroModel(MicroConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        // per-modality parameter streams are seeded by modality name, so the
        // same modality gets identical weights regardless of config order
        for (Modality m : cfg_.modalities) {
            Rng rng(derive_seed(seed, "micro-params", modality_name(m)));
            init_modality_(modality_name(m), rng);
        }
        Rng rng(derive_seed(seed, "micro-params", "shared"));
        for (Index i = 0; i < cfg_.shared_depth; ++i)
            init_shared_block_("shared.block" + std::to_string(i), rng);
    }

    const MicroConfig& config() const { return cfg_; }
    ParamStore& params() { return p_; }
    const ParamStore& params() const { return p_; }

    MicroOutput forward(const std::vector<MicroExample>& batch) const {
        if (batch.empty()) throw DataError("micro forward: empty batch");
        const std::size_t nm = cfg_.modalities.size();
        const Index pcount = batch.front().patches.at(0).dim(0);
        for (const auto& ex : batch) {
            if (ex.patches.size() != nm || ex.plans.size() != nm)
                throw ShapeError("micro forward: example does not match configured modalities");
            for (const Tensor& t : ex.patches) {
                if (t.rank() != 2 || t.dim(0) != pcount || t.dim(1) != cfg_.patch_len)
                    throw ShapeError("micro forward: patch grids must share [P, patch_len]");
            }
            for (const MaskPlan& pl : ex.plans)
                if (static_cast<Index>(pl.masked.size()) != pcount)
                    throw ShapeError("micro forward: mask plan length mismatch");
        }
        check_geometry_(pcount);

        MicroOutput out;
        out.patch_count = pcount;
        out.merged_count = merged_token_count(pcount, cfg_.merge_kernel, cfg_.merge_stride);
        for (const auto& ex : batch) {
            Element el = element_forward_(ex.patches, &ex.plans);
            out.recon.push_back(std::move(el.recon));
            out.fused.push_back(std::move(el.fused));
            out.private_tokens.push_back(std::move(el.priv));
            out.shared_tokens.push_back(std::move(el.shared));
            out.plans.push_back(ex.plans);
        }
        return out;
    }

    // One fused embedding per 30 s epoch: mean fused token per modality,
    // concatenated in config order. Epochs are processed independently, so
    // identical epochs map to identical embeddings.
    std::vector<std::vector<double>> epoch_embeddings(const StandardRecord& rec) const {
        NoGrad ng;
        const Index per_epoch = static_cast<Index>(kEpochSamples) / cfg_.patch_len;
        check_geometry_(per_epoch);
        std::vector<std::vector<double>> out;
        out.reserve(rec.epochs);
        for (std::size_t e = 0; e < rec.epochs; ++e) {
            Element el = element_forward_(epoch_patches_(rec, e, "epoch_embeddings"),
                                          nullptr);
            std::vector<double> emb;
            emb.reserve(cfg_.modalities.size() * cfg_.d_high);
            for (const Tensor& f : el.fused) {
                Tensor m = mean0(f);
                emb.insert(emb.end(), m.values().begin(), m.values().end());
            }
            out.push_back(std::move(emb));
        }
        return out;
    }

    // One embedding per 500 ms patch: the decoder-side upsampled token per
    // modality, concatenated in config order. Rows are epoch-major, 60 per
    // epoch, matching one-second label tracks after pairwise pooling.
    std::vector<std::vector<double>> patch_embeddings(const StandardRecord& rec) const {
        NoGrad ng;
        const Index per_epoch = static_cast<Index>(kEpochSamples) / cfg_.patch_len;
        check_geometry_(per_epoch);
        std::vector<std::vector<double>> out;
        out.reserve(rec.epochs * per_epoch);
        for (std::size_t e = 0; e < rec.epochs; ++e) {
            Element el = element_forward_(epoch_patches_(rec, e, "patch_embeddings"),
                                          nullptr);
            std::vector<Tensor> ups;
            ups.reserve(cfg_.modalities.size());
            for (std::size_t mi = 0; mi < cfg_.modalities.size(); ++mi)
                ups.push_back(upsample_(
                    std::string(modality_name(cfg_.modalities[mi])), el.fused[mi]));
            for (Index p = 0; p < per_epoch; ++p) {
                std::vector<double> row;
                row.reserve(cfg_.modalities.size() * cfg_.d_low);
                for (const Tensor& u : ups)
                    row.insert(row.end(), u.values().begin() + p * cfg_.d_low,
                               u.values().begin() + (p + 1) * cfg_.d_low);
                out.push_back(std::move(row));
            }
        }
        return out;
    }

    Index embedding_dim() const {
        return static_cast<Index>(cfg_.modalities.size()) * cfg_.d_high;
    }

    Index patch_embedding_dim() const {
        return static_cast<Index>(cfg_.modalities.size()) * cfg_.d_low;
    }

private:
    struct Element {
        std::vector<std::optional<Tensor>> recon;
        std::vector<Tensor> fused, priv, shared;
    };

    void check_geometry_(Index pcount) const {
        if (pcount < cfg_.merge_kernel)
            throw ShapeError("micro forward: fewer patches than the merge kernel");
        if ((pcount - cfg_.merge_kernel) % cfg_.merge_stride != 0)
            throw ShapeError("micro forward: patch count does not tile the merge stride");
    }

    template <class F>
    auto stage_(const char* name, F&& f) const {
        try {
            return f();
        } catch (const NumericError& e) {
            throw NumericError(std::string("micro stage '") + name + "': " + e.what());
        }
    }

    Element element_forward_(const std::vector<Tensor>& patches,
                             const std::vector<MaskPlan>* plans) const {
        const std::size_t nm = cfg_.modalities.size();
        const Index pcount = patches.front().dim(0);
        const Index merged = merged_token_count(pcount, cfg_.merge_kernel, cfg_.merge_stride);
        std::vector<Index> pos_patch(pcount), pos_merged(merged);
        for (Index i = 0; i < pcount; ++i) pos_patch[i] = i;
        for (Index i = 0; i < merged; ++i) pos_merged[i] = i;
        std::vector<Index> pos_shared;
        pos_shared.reserve(nm * merged);
        for (std::size_t m = 0; m < nm; ++m)
            pos_shared.insert(pos_shared.end(), pos_merged.begin(), pos_merged.end());

        Element el;
        std::vector<Tensor> merged_tokens;
        merged_tokens.reserve(nm);
        for (std::size_t mi = 0; mi < nm; ++mi) {
            const std::string mod = modality_name(cfg_.modalities[mi]);
            Tensor tok = stage_("conv_embed", [&] { return conv_embed_(mod, patches[mi]); });
            std::optional<Tensor> key_bias;
            if (plans) {
                const MaskPlan& plan = (*plans)[mi];
                tok = stage_("mask_replace", [&] { return mask_replace_(mod, tok, plan); });
                std::vector<double> b(plan.masked.size());
                for (std::size_t i = 0; i < b.size(); ++i)
                    b[i] = plan.masked[i] ? -1e30 : 0.0;  // hide mask tokens from K/V
                key_bias = Tensor::from({pcount}, std::move(b));
            }
            tok = stage_("lower", [&] {
                Tensor x = tok;
                for (Index i = 0; i < cfg_.lower_depth; ++i)
                    x = block_(mod + ".lower" + std::to_string(i), x, pos_patch,
                               key_bias ? &*key_bias : nullptr);
                return x;
            });
            Tensor hi = stage_("merge", [&] { return merge_(mod, tok); });
            hi = stage_("higher", [&] {
                Tensor x = hi;
                for (Index i = 0; i < cfg_.higher_depth; ++i)
                    x = block_(mod + ".higher" + std::to_string(i), x, pos_merged, nullptr);
                return x;
            });
            merged_tokens.push_back(hi);
        }
        el.priv = merged_tokens;

        Tensor shared = stage_("shared", [&] {
            std::vector<Tensor> parts;
            parts.reserve(nm);
            for (std::size_t mi = 0; mi < nm; ++mi) {
                const std::string mod = modality_name(cfg_.modalities[mi]);
                parts.push_back(add(merged_tokens[mi], p_.get(mod + ".shared_embed")));
            }
            Tensor x = concat(parts, 0);
            for (Index i = 0; i < cfg_.shared_depth; ++i)
                x = moe_block_("shared.block" + std::to_string(i), x, pos_shared);
            return x;
        });
        for (std::size_t mi = 0; mi < nm; ++mi)
            el.shared.push_back(slice(shared, 0, static_cast<Index>(mi) * merged, merged));

        for (std::size_t mi = 0; mi < nm; ++mi) {
            const std::string mod = modality_name(cfg_.modalities[mi]);
            Tensor f = stage_("fusion", [&] {
                Tensor x = merged_tokens[mi];
                for (Index i = 0; i < cfg_.fusion_depth; ++i) {
                    std::string fp = mod + ".fusion" + std::to_string(i);
                    x = add(x, cross_attention_(fp + ".attn", rms_(fp + ".norm_q", x),
                                                rms_(fp + ".norm_kv", el.shared[mi]),
                                                pos_merged, pos_merged));
                    x = add(x, swiglu_(fp + ".mlp", rms_(fp + ".norm2", x)));
                }
                return x;
            });
            el.fused.push_back(f);

            if (!plans) {
                el.recon.emplace_back();
                continue;
            }
            const MaskPlan& plan = (*plans)[mi];
            if (plan.masked_count() == 0) {
                el.recon.emplace_back();
                continue;
            }
            Tensor up = stage_("upsample", [&] { return upsample_(mod, f); });
            Tensor xhat = stage_("decoder", [&] {
                Tensor d = matmul(up, p_.get(mod + ".dec.proj"));
                d = block_(mod + ".dec.block0", d, pos_patch, nullptr);
                Tensor rows = index_rows(d, plan.masked_indices());
                return add(matmul(rows, p_.get(mod + ".dec.head.w")),
                           p_.get(mod + ".dec.head.b"));
            });
            el.recon.emplace_back(std::move(xhat));
        }
        return el;
    }

    // --- building blocks -------------------------------------------------

    Tensor rms_(const std::string& name, const Tensor& x) const {
        return mul(rmsnorm_last(x), p_.get(name + ".g"));
    }

    Tensor upsample_(const std::string& mod, const Tensor& fused) const {
        Tensor u = conv1d_transpose(transpose2(fused), p_.get(mod + ".upsample.w"),
                                    p_.get(mod + ".upsample.b"), cfg_.merge_stride);
        return transpose2(u);  // [P, d_low]
    }

    std::vector<Tensor> epoch_patches_(const StandardRecord& rec, std::size_t e,
                                       const char* who) const {
        const Index per_epoch = static_cast<Index>(kEpochSamples) / cfg_.patch_len;
        std::vector<Tensor> patches;
        patches.reserve(cfg_.modalities.size());
        for (Modality m : cfg_.modalities) {
            auto it = rec.modalities.find(m);
            if (it == rec.modalities.end() || it->second.channels.empty())
                throw DataError(std::string(who) + ": record lacks modality " +
                                std::string(modality_name(m)));
            const auto& ch = it->second.channels.front();
            std::vector<double> seg(ch.begin() + e * kEpochSamples,
                                    ch.begin() + (e + 1) * kEpochSamples);
            patches.push_back(Tensor::from({per_epoch, cfg_.patch_len}, std::move(seg)));
        }
        return patches;
    }

    Tensor swiglu_(const std::string& prefix, const Tensor& xn) const {
        Tensor h = mul(silu(matmul(xn, p_.get(prefix + ".w1"))),
                       matmul(xn, p_.get(prefix + ".w3")));
        return matmul(h, p_.get(prefix + ".w2"));
    }

    Tensor attention_core_(const std::string& prefix, const Tensor& qn, const Tensor& kn,
                           const std::vector<Index>& pos_q, const std::vector<Index>& pos_k,
                           const Tensor* key_bias) const {
        const Index tq = qn.dim(0), tk = kn.dim(0), d = qn.dim(1);
        const Index h = cfg_.heads, dh = d / cfg_.heads;
        Tensor q = rope(reshape(matmul(qn, p_.get(prefix + ".wq")), {tq, h, dh}), pos_q,
                        cfg_.rope_base);
        Tensor k = rope(reshape(matmul(kn, p_.get(prefix + ".wk")), {tk, h, dh}), pos_k,
                        cfg_.rope_base);
        Tensor v = reshape(matmul(kn, p_.get(prefix + ".wv")), {tk, h, dh});
        Tensor qh = permute(q, {1, 0, 2});
        Tensor kt = permute(k, {1, 2, 0});
        Tensor vh = permute(v, {1, 0, 2});
        Tensor logits = scalar_mul(matmul(qh, kt), 1.0 / std::sqrt(double(dh)));
        if (key_bias) logits = add(logits, *key_bias);
        Tensor attn = softmax_last(logits);
        Tensor o = reshape(permute(matmul(attn, vh), {1, 0, 2}), {tq, d});
        return matmul(o, p_.get(prefix + ".wo"));
    }

    Tensor block_(const std::string& prefix, Tensor x, const std::vector<Index>& pos,
                  const Tensor* key_bias) const {
        Tensor xn = rms_(prefix + ".norm1", x);
        x = add(x, attention_core_(prefix + ".attn", xn, xn, pos, pos, key_bias));
        x = add(x, swiglu_(prefix + ".mlp", rms_(prefix + ".norm2", x)));
        return x;
    }

    Tensor cross_attention_(const std::string& prefix, const Tensor& qn, const Tensor& kn,
                            const std::vector<Index>& pos_q,
                            const std::vector<Index>& pos_k) const {
        return attention_core_(prefix, qn, kn, pos_q, pos_k, nullptr);
    }

    Tensor moe_block_(const std::string& prefix, Tensor x,
                      const std::vector<Index>& pos) const {
        Tensor xn = rms_(prefix + ".norm1", x);
        x = add(x, attention_core_(prefix + ".attn", xn, xn, pos, pos, nullptr));
        x = add(x, moe_ffn_(prefix, rms_(prefix + ".norm2", x)));
        return x;
    }

    Tensor moe_ffn_(const std::string& prefix, const Tensor& xn) const {
        const Index n = xn.dim(0);
        MoeRouting route = moe_route(matmul(xn, p_.get(prefix + ".router")),
                                     cfg_.experts_active);
        std::vector<Tensor> parts;
        for (Index e = 0; e < cfg_.experts; ++e) {
            if (route.assign[e].empty()) continue;
            std::string ep = prefix + ".expert" + std::to_string(e);
            Tensor xe = index_rows(xn, route.assign[e]);
            Tensor ge = reshape(index_rows(slice(route.gates, 1, e, 1), route.assign[e]),
                                {static_cast<Index>(route.assign[e].size())});
            parts.push_back(scatter_rows(mul_leading(swiglu_(ep, xe), ge), route.assign[e], n));
        }
        Tensor out = parts.front();
        for (std::size_t i = 1; i < parts.size(); ++i) out = add(out, parts[i]);
        return out;
    }

    Tensor conv_embed_(const std::string& mod, const Tensor& patches) const {
        Tensor x = reshape(patches, {Index{1}, patches.numel()});
        for (std::size_t i = 0; i < cfg_.conv_channels.size(); ++i) {
            std::string cp = mod + ".conv" + std::to_string(i);
            x = conv1d(x, p_.get(cp + ".w"), p_.get(cp + ".b"), cfg_.conv_strides[i]);
            if (i + 1 < cfg_.conv_channels.size()) x = gelu(x);
        }
        return transpose2(x);  // [P, d_low]
    }

    Tensor mask_replace_(const std::string& mod, const Tensor& tokens,
                         const MaskPlan& plan) const {
        const Index pcount = tokens.dim(0), d = tokens.dim(1);
        std::vector<double> keep(pcount), drop(pcount);
        for (Index i = 0; i < pcount; ++i) {
            keep[i] = plan.masked[i] ? 0.0 : 1.0;
            drop[i] = plan.masked[i] ? 1.0 : 0.0;
        }
        Tensor kept = mul_leading(tokens, Tensor::from({pcount}, std::move(keep)));
        Tensor tok = add(Tensor::zeros({pcount, d}), p_.get(mod + ".mask_token"));
        return add(kept, mul_leading(tok, Tensor::from({pcount}, std::move(drop))));
    }

    Tensor merge_(const std::string& mod, const Tensor& x) const {
        Tensor h = transpose2(matmul(x, p_.get(mod + ".merge.pw1")));  // [hidden, P]
        h = conv1d(h, p_.get(mod + ".merge.dw.w"), p_.get(mod + ".merge.dw.b"),
                   cfg_.merge_stride, /*groups=*/cfg_.merge_hidden);
        h = rms_(mod + ".merge.norm", transpose2(h));  // [M, hidden]
        h = gelu(matmul(h, p_.get(mod + ".merge.pw2")));
        return matmul(h, p_.get(mod + ".merge.pw3"));
    }

    // --- parameter layout -------------------------------------------------

    void init_block_(const std::string& prefix, Index d, Rng& rng) {
        for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
            p_.add_normal(prefix + w, {d, d}, rng, 0.02);
        p_.add_full(prefix + ".norm1.g", {d}, 1.0, true);
        p_.add_full(prefix + ".norm2.g", {d}, 1.0, true);
        p_.add_normal(prefix + ".mlp.w1", {d, 2 * d}, rng, 0.02);
        p_.add_normal(prefix + ".mlp.w3", {d, 2 * d}, rng, 0.02);
        p_.add_normal(prefix + ".mlp.w2", {2 * d, d}, rng, 0.02);
    }

    void init_modality_(const std::string& mod, Rng& rng) {
        Index cin = 1;
        for (std::size_t i = 0; i < cfg_.conv_channels.size(); ++i) {
            std::string cp = mod + ".conv" + std::to_string(i);
            p_.add_normal(cp + ".w", {cfg_.conv_channels[i], cin, cfg_.conv_kernels[i]}, rng,
                          0.02);
            p_.add_zeros(cp + ".b", {cfg_.conv_channels[i]}, true);
            cin = cfg_.conv_channels[i];
        }
        p_.add_normal(mod + ".mask_token", {cfg_.d_low}, rng, 0.02, true);
        for (Index i = 0; i < cfg_.lower_depth; ++i)
            init_block_(mod + ".lower" + std::to_string(i), cfg_.d_low, rng);
        p_.add_normal(mod + ".merge.pw1", {cfg_.d_low, cfg_.merge_hidden}, rng, 0.02);
        p_.add_normal(mod + ".merge.dw.w", {cfg_.merge_hidden, 1, cfg_.merge_kernel}, rng,
                      0.02);
        p_.add_zeros(mod + ".merge.dw.b", {cfg_.merge_hidden}, true);
        p_.add_full(mod + ".merge.norm.g", {cfg_.merge_hidden}, 1.0, true);
        p_.add_normal(mod + ".merge.pw2", {cfg_.merge_hidden, cfg_.d_high}, rng, 0.02);
        p_.add_normal(mod + ".merge.pw3", {cfg_.d_high, cfg_.d_high}, rng, 0.02);
        p_.add_normal(mod + ".shared_embed", {cfg_.d_high}, rng, 0.02, true);
        for (Index i = 0; i < cfg_.higher_depth; ++i)
            init_block_(mod + ".higher" + std::to_string(i), cfg_.d_high, rng);
        for (Index i = 0; i < cfg_.fusion_depth; ++i) {
            std::string fp = mod + ".fusion" + std::to_string(i);
            for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
                p_.add_normal(fp + w, {cfg_.d_high, cfg_.d_high}, rng, 0.02);
            p_.add_full(fp + ".norm_q.g", {cfg_.d_high}, 1.0, true);
            p_.add_full(fp + ".norm_kv.g", {cfg_.d_high}, 1.0, true);
            p_.add_full(fp + ".norm2.g", {cfg_.d_high}, 1.0, true);
            p_.add_normal(fp + ".mlp.w1", {cfg_.d_high, 2 * cfg_.d_high}, rng, 0.02);
            p_.add_normal(fp + ".mlp.w3", {cfg_.d_high, 2 * cfg_.d_high}, rng, 0.02);
            p_.add_normal(fp + ".mlp.w2", {2 * cfg_.d_high, cfg_.d_high}, rng, 0.02);
        }
        p_.add_normal(mod + ".upsample.w", {cfg_.d_high, cfg_.d_low, cfg_.merge_kernel}, rng,
                      0.02);
        p_.add_zeros(mod + ".upsample.b", {cfg_.d_low}, true);
        p_.add_normal(mod + ".dec.proj", {cfg_.d_low, cfg_.decoder_dim}, rng, 0.02);
        init_block_(mod + ".dec.block0", cfg_.decoder_dim, rng);
        p_.add_normal(mod + ".dec.head.w", {cfg_.decoder_dim, cfg_.patch_len}, rng, 0.02);
        p_.add_zeros(mod + ".dec.head.b", {cfg_.patch_len}, true);
    }

    void init_shared_block_(const std::string& prefix, Rng& rng) {
        for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
            p_.add_normal(prefix + w, {cfg_.d_high, cfg_.d_high}, rng, 0.02);
        p_.add_full(prefix + ".norm1.g", {cfg_.d_high}, 1.0, true);
        p_.add_full(prefix + ".norm2.g", {cfg_.d_high}, 1.0, true);
        p_.add_normal(prefix + ".router", {cfg_.d_high, cfg_.experts}, rng, 0.02);
        for (Index e = 0; e < cfg_.experts; ++e) {
            std::string ep = prefix + ".expert" + std::to_string(e);
            p_.add_normal(ep + ".w1", {cfg_.d_high, 2 * cfg_.d_high}, rng, 0.02);
            p_.add_normal(ep + ".w3", {cfg_.d_high, 2 * cfg_.d_high}, rng, 0.02);
            p_.add_normal(ep + ".w2", {2 * cfg_.d_high, cfg_.d_high}, rng, 0.02);
        }
    }

    MicroConfig cfg_;
    ParamStore p_;
};

// ---------------------------------------------------------------------------
// Training example construction: crop, smooth target, mask plans.

inline MicroExample make_training_example(const StandardRecord& rec, std::size_t start_epoch,
                                          std::size_t crop_epochs, const MicroConfig& cfg,
                                          Rng& rng) {
    if (crop_epochs == 0 || start_epoch + crop_epochs > rec.epochs)
        throw DataError("make_training_example: crop outside record");
    const Index per_epoch = static_cast<Index>(kEpochSamples) / cfg.patch_len;
    const Index pcount = static_cast<Index>(crop_epochs) * per_epoch;
    auto plans = build_mask_plans(pcount, cfg.modalities, rng);
    MicroExample ex;
    for (Modality m : cfg.modalities) {
        auto it = rec.modalities.find(m);
        if (it == rec.modalities.end() || it->second.channels.empty())
            throw DataError("make_training_example: record lacks modality " +
                            std::string(modality_name(m)));
        const auto& ch = it->second.channels.front();
        std::vector<double> seg(ch.begin() + start_epoch * kEpochSamples,
                                ch.begin() + (start_epoch + crop_epochs) * kEpochSamples);
        std::vector<double> smooth = smooth_moving_average(seg);
        ex.patches.push_back(Tensor::from({pcount, cfg.patch_len}, std::move(seg)));
        ex.targets.push_back(Tensor::from({pcount, cfg.patch_len}, std::move(smooth)));
        ex.plans.push_back(plans.at(m));
    }
    return ex;
}

// ---------------------------------------------------------------------------
// Losses.

// Mean squared error over masked patches, per modality, averaged across all
// configured modalities. A modality with no masked patches contributes zero
// and emits a warning.
inline Tensor recon_loss(const MicroOutput& out, const std::vector<MicroExample>& batch,
                         const std::vector<Modality>& mods) {
    if (out.recon.size() != batch.size())
        throw ShapeError("recon_loss: output/batch size mismatch");
    std::vector<Tensor> terms;
    for (std::size_t mi = 0; mi < mods.size(); ++mi) {
        std::vector<Tensor> diffs;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const auto& r = out.recon[b][mi];
            if (!r) continue;
            Tensor tgt = index_rows(batch[b].targets[mi], out.plans[b][mi].masked_indices());
            diffs.push_back(sub(*r, tgt));
        }
        if (diffs.empty()) {
            Warnings::emit(std::string("recon_loss: no masked patches for ") +
                           modality_name(mods[mi]));
            terms.push_back(Tensor::scalar(0.0));
            continue;
        }
        Tensor d = diffs.size() == 1 ? diffs.front() : concat(diffs, 0);
        terms.push_back(mean(mul(d, d)));
    }
    Tensor total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    return scalar_mul(total, 1.0 / double(terms.size()));
}

// Cross-modal timeslot contrast. Per modality i and pooled slot t, the anchor
// is the normalised pooled shared vector z_i^t; the positive is the mean of
// the other modalities' z at t; negatives are that mean at every other slot
// plus the anchor's own normalised pooled private vector.
inline Tensor contrastive_loss(const std::vector<Tensor>& pooled_shared,
                               const std::vector<Tensor>& pooled_private,
                               double tau = 0.07) {
    const std::size_t nm = pooled_shared.size();
    if (nm < 2) throw ConfigError("contrastive_loss: needs at least two modalities");
    if (pooled_private.size() != nm)
        throw ShapeError("contrastive_loss: shared/private modality count mismatch");
    const Index n = pooled_shared.front().dim(0);
    if (n < 2) throw DataError("contrastive_loss: needs more than one pooled timeslot");
    std::vector<Tensor> z, zt;
    for (std::size_t i = 0; i < nm; ++i) {
        z.push_back(l2normalize_last(pooled_shared[i]));
        zt.push_back(l2normalize_last(pooled_private[i]));
    }
    std::vector<double> eye(n * n, 0.0);
    for (Index i = 0; i < n; ++i) eye[i * n + i] = 1.0;
    Tensor diag = Tensor::from({n, n}, std::move(eye));
    std::vector<Tensor> terms;
    for (std::size_t i = 0; i < nm; ++i) {
        Tensor zbar = Tensor::zeros({n, z.front().dim(1)});
        for (std::size_t j = 0; j < nm; ++j)
            if (j != i) zbar = add(zbar, z[j]);
        zbar = scalar_mul(zbar, 1.0 / double(nm - 1));  // mean, not re-normalised
        Tensor logits = scalar_mul(matmul(z[i], transpose2(zbar)), 1.0 / tau);
        Tensor pos = sum_last(mul(logits, diag));
        Tensor rep = scalar_mul(sum_last(mul(z[i], zt[i])), 1.0 / tau);
        Tensor den = logsumexp_last(concat({logits, reshape(rep, {n, Index{1}})}, 1));
        terms.push_back(mean(sub(den, pos)));
    }
    Tensor total = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
    return scalar_mul(total, 1.0 / double(terms.size()));
}

// Differential-entropy spread regulariser: negative mean log nearest-neighbour
// distance over all normalised pooled shared vectors.
inline Tensor koleo_loss(const std::vector<Tensor>& pooled_shared) {
    if (pooled_shared.empty()) throw ConfigError("koleo_loss: no pooled vectors");
    Tensor zcat = pooled_shared.size() == 1 ? pooled_shared.front()
                                            : concat(pooled_shared, 0);
    Tensor z = l2normalize_last(zcat);
    const Index k = z.dim(0);
    if (k < 2) throw DataError("koleo_loss: needs at least two vectors");
    Tensor g = matmul(z, transpose2(z));
    Tensor d2 = scalar_add(scalar_mul(g, -2.0), 2.0);  // squared chord distance
    const auto& dv = d2.values();
    std::vector<double> onehot(k * k, 0.0);
    bool dup = false;
    for (Index i = 0; i < k; ++i) {
        Index best = i == 0 ? 1 : 0;
        for (Index j = 0; j < k; ++j) {
            if (j == i) continue;
            if (dv[i * k + j] < dv[i * k + best]) best = j;
        }
        if (dv[i * k + best] <= 1e-12) dup = true;
        onehot[i * k + best] = 1.0;
    }
    if (dup) Warnings::emit("koleo_loss: coincident embeddings");
    Tensor nnd2 = clamp_min(sum_last(mul(d2, Tensor::from({k, k}, std::move(onehot)))), 1e-16);
    Tensor nnd = clamp_min(sqrt(nnd2), 1e-8);
    return neg(mean(log(nnd)));
}

// Pool per-(element, modality) token sequences into per-modality [B*S, d]
// stacks for the contrastive/spread losses.
inline std::vector<Tensor> pool_by_modality(const std::vector<std::vector<Tensor>>& tokens,
                                            const TimeslotPlan& plan) {
    if (tokens.empty()) throw DataError("pool_by_modality: empty batch");
    const std::size_t nm = tokens.front().size();
    std::vector<Tensor> out;
    for (std::size_t mi = 0; mi < nm; ++mi) {
        std::vector<Tensor> pooled;
        for (const auto& el : tokens) pooled.push_back(pool_timeslot(el[mi], plan));
        out.push_back(pooled.size() == 1 ? pooled.front() : concat(pooled, 0));
    }
    return out;
}

struct MicroLossWeights {
    double contrastive = 0.1;
    double koleo = 0.01;
    double tau = 0.07;
};

struct MicroLosses {
    Tensor total, recon, contrastive, koleo;
};

inline Tensor combine_micro_losses(const Tensor& recon, const Tensor& contrastive,
                                   const Tensor& koleo, const MicroLossWeights& w = {}) {
    return add(recon,
               add(scalar_mul(contrastive, w.contrastive), scalar_mul(koleo, w.koleo)));
}

inline MicroLosses micro_losses(const MicroOutput& out, const std::vector<MicroExample>& batch,
                                const MicroConfig& cfg, const MicroLossWeights& w = {}) {
    TimeslotPlan plan = timeslot_plan(out.patch_count, cfg.merge_kernel, cfg.merge_stride,
                                      cfg.patch_len);
    std::vector<Tensor> shared = pool_by_modality(out.shared_tokens, plan);
    std::vector<Tensor> priv = pool_by_modality(out.private_tokens, plan);
    MicroLosses l{Tensor::scalar(0.0), recon_loss(out, batch, cfg.modalities),
                  contrastive_loss(shared, priv, w.tau), koleo_loss(shared)};
    l.total = combine_micro_losses(l.recon, l.contrastive, l.koleo, w);
    return l;
}

}  // namespace somnus
