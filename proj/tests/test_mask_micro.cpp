#include <catch2/catch_amalgamated.hpp>

#include "somnus/micro.hpp"
#include "support/testutil.hpp"

using namespace somnus;
using Catch::Matchers::ContainsSubstring;

namespace {

std::vector<std::size_t> run_lengths(const std::vector<bool>& masked) {
    std::vector<std::size_t> runs;
    std::size_t cur = 0;
    for (bool b : masked) {
        if (b) {
            ++cur;
        } else if (cur) {
            runs.push_back(cur);
            cur = 0;
        }
    }
    if (cur) runs.push_back(cur);
    return runs;
}

MicroExample random_example(const MicroConfig& cfg, Index pcount, Rng& rng,
                            double scale = 1.0) {
    MicroExample ex;
    auto plans = build_mask_plans(pcount, cfg.modalities, rng);
    for (Modality m : cfg.modalities) {
        std::vector<double> x(pcount * cfg.patch_len);
        for (auto& v : x) v = rng.normal() * scale;
        std::vector<double> tgt = smooth_moving_average(x);
        ex.patches.push_back(Tensor::from({pcount, cfg.patch_len}, std::move(x)));
        ex.targets.push_back(Tensor::from({pcount, cfg.patch_len}, std::move(tgt)));
        ex.plans.push_back(plans.at(m));
    }
    return ex;
}

}  // namespace

TEST_CASE("high-rate plans mask exactly half on period-aligned lengths", "[mask]") {
    Rng rng(11);
    auto plans = build_mask_plans(120, {Modality::EEG, Modality::EMG}, rng);
    for (auto& [m, plan] : plans) {
        REQUIRE(plan.masked.size() == 120);
        REQUIRE(plan.masked_count() == 60);
        REQUIRE(plan.run_length == 1);
    }
    // independent subset draws: the two modalities rarely coincide
    REQUIRE(plans.at(Modality::EEG).masked != plans.at(Modality::EMG).masked);
}

TEST_CASE("low-rate plans mask whole runs of four", "[mask]") {
    Rng rng(12);
    auto plans = build_mask_plans(120, {Modality::RESP}, rng);
    const MaskPlan& plan = plans.at(Modality::RESP);
    REQUIRE(plan.masked_count() == 60);
    REQUIRE(plan.run_length == 4);
    auto runs = run_lengths(plan.masked);
    REQUIRE(runs.size() == 15);
    for (std::size_t r : runs) REQUIRE(r == 4);
}

TEST_CASE("all modalities share one grid offset per draw", "[mask]") {
    Rng rng(13);
    auto plans = build_mask_plans(80, {Modality::EEG, Modality::EMG, Modality::RESP}, rng);
    std::size_t off = plans.begin()->second.offset;
    for (auto& [m, plan] : plans) REQUIRE(plan.offset == off);
}

TEST_CASE("mask invariants hold across random lengths and seeds", "[mask]") {
    Rng meta(99);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t patches = 4 * (10 + meta.index(50));  // >= 40, multiple of 4
        Rng rng(derive_seed(7, "mask-trial", std::to_string(trial)));
        auto plans =
            build_mask_plans(patches, {Modality::EEG, Modality::RESP}, rng);
        const MaskPlan& high = plans.at(Modality::EEG);
        const MaskPlan& low = plans.at(Modality::RESP);
        std::size_t o_high = high.offset % kHighMaskPeriod;
        // every aligned 10-patch window carries exactly 5 masked patches
        for (std::size_t w = o_high; w + kHighMaskPeriod <= patches; w += kHighMaskPeriod) {
            std::size_t n = 0;
            for (std::size_t i = 0; i < kHighMaskPeriod; ++i) n += high.masked[w + i] ? 1 : 0;
            REQUIRE(n == kHighMaskPeriod / 2);
        }
        if (patches % kHighMaskPeriod == 0) REQUIRE(high.masked_count() == patches / 2);
        // low-rate masks alternate whole runs of 4
        auto runs = run_lengths(low.masked);
        for (std::size_t r : runs) REQUIRE(r == kLowMaskRun);
        if (patches % kLowMaskPeriod == 0) {
            REQUIRE(low.masked_count() == patches / 2);
        } else {
            REQUIRE(low.masked_count() >= patches / 2 - 2);
            REQUIRE(low.masked_count() <= patches / 2 + 2);
        }
        std::size_t total = high.masked_count();
        REQUIRE(total >= patches / 2 - 5);
        REQUIRE(total <= patches / 2 + 5);
    }
}

TEST_CASE("plans with offsets a full period apart coincide", "[mask]") {
    // rebuild the modular arithmetic directly: shifting the offset by one full
    // period must reproduce the identical mask
    std::vector<bool> chosen{true, false, true, true, false, false, true, false, true, false};
    for (std::size_t o = 0; o < kHighMaskPeriod; ++o) {
        std::vector<bool> a(60), b(60);
        for (std::size_t p = 0; p < 60; ++p) {
            a[p] = chosen[(p + kHighMaskPeriod - o) % kHighMaskPeriod];
            std::size_t o2 = (o + kHighMaskPeriod) % kHighMaskPeriod;
            b[p] = chosen[(p + kHighMaskPeriod - o2) % kHighMaskPeriod];
        }
        REQUIRE(a == b);
    }
}

TEST_CASE("mask plan construction rejects bad lengths", "[mask]") {
    Rng rng(5);
    REQUIRE_THROWS_AS(build_mask_plans(36, {Modality::EEG}, rng), ConfigError);
    REQUIRE_THROWS_AS(build_mask_plans(42, {Modality::EEG}, rng), ConfigError);
    REQUIRE_NOTHROW(build_mask_plans(40, {Modality::EEG}, rng));
}

TEST_CASE("merged token count follows the strided window formula", "[mask]") {
    REQUIRE(merged_token_count(120) == 23);
    REQUIRE(merged_token_count(60) == 11);
    REQUIRE(merged_token_count(10) == 1);
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
        Index p = 10 + 5 * static_cast<Index>(rng.index(100));
        REQUIRE(merged_token_count(p) == (p - 10) / 5 + 1);
    }
    REQUIRE_THROWS_AS(merged_token_count(8), ShapeError);
}

TEST_CASE("timeslot plan groups merged tokens by centre time", "[micro]") {
    TimeslotPlan plan = timeslot_plan(120);
    REQUIRE(plan.slots == 2);
    REQUIRE(plan.slot_of_token.size() == 23);
    for (Index i = 0; i < 12; ++i) REQUIRE(plan.slot_of_token[i] == 0);
    for (Index i = 12; i < 23; ++i) REQUIRE(plan.slot_of_token[i] == 1);
    TimeslotPlan single = timeslot_plan(60);
    REQUIRE(single.slots == 1);
    REQUIRE(single.slot_of_token.size() == 11);
}

TEST_CASE("pool_timeslot averages token rows per slot", "[micro]") {
    Rng rng(21);
    TimeslotPlan plan = timeslot_plan(120);
    std::vector<double> x(23 * 5);
    for (auto& v : x) v = rng.normal();
    Tensor tokens = Tensor::from({23, 5}, x);
    Tensor pooled = pool_timeslot(tokens, plan);
    REQUIRE(pooled.dim(0) == 2);
    REQUIRE(pooled.dim(1) == 5);
    for (Index s = 0; s < 2; ++s) {
        Index lo = s == 0 ? 0 : 12, hi = s == 0 ? 12 : 23;
        for (Index d = 0; d < 5; ++d) {
            double m = 0.0;
            for (Index i = lo; i < hi; ++i) m += x[i * 5 + d];
            m /= double(hi - lo);
            REQUIRE(pooled.values()[s * 5 + d] == Catch::Approx(m).margin(1e-12));
        }
    }

    TimeslotPlan broken;
    broken.slot_of_token = {0, 0, 2};  // slot 1 empty
    broken.slots = 3;
    Tensor t3 = Tensor::zeros({3, 2});
    REQUIRE_THROWS_AS(pool_timeslot(t3, broken), DataError);
}

TEST_CASE("micro config validation rejects inconsistent layouts", "[micro]") {
    REQUIRE_NOTHROW(MicroConfig::desk().validate());
    REQUIRE_NOTHROW(MicroConfig::tiny().validate());
    REQUIRE_NOTHROW(MicroConfig::reference().validate());

    auto c = MicroConfig::desk();
    c.modalities.push_back(Modality::EEG);
    REQUIRE_THROWS_AS(c.validate(), ConfigError);

    c = MicroConfig::desk();
    c.conv_kernels[1] = 4;  // kernel != stride
    REQUIRE_THROWS_AS(c.validate(), ConfigError);

    c = MicroConfig::desk();
    c.conv_strides = {10, 5, 2};
    c.conv_kernels = {10, 5, 2};
    REQUIRE_THROWS_AS(c.validate(), ConfigError);  // product 100 != 50

    c = MicroConfig::desk();
    c.heads = 5;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);

    c = MicroConfig::desk();
    c.decoder_dim = 6;  // 6/2 = 3 rotation dims, odd
    REQUIRE_THROWS_AS(c.validate(), ConfigError);

    c = MicroConfig::desk();
    c.experts_active = 5;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("desk forward produces the documented shapes", "[micro]") {
    MicroModel model(MicroConfig::desk(), 42);
    const auto& cfg = model.config();
    Rng rng(1);
    std::vector<MicroExample> batch{random_example(cfg, 120, rng),
                                    random_example(cfg, 120, rng)};
    MicroOutput out = model.forward(batch);
    REQUIRE(out.patch_count == 120);
    REQUIRE(out.merged_count == 23);
    REQUIRE(out.fused.size() == 2);
    for (std::size_t b = 0; b < 2; ++b) {
        REQUIRE(out.fused[b].size() == 3);
        for (std::size_t m = 0; m < 3; ++m) {
            REQUIRE(out.fused[b][m].dim(0) == 23);
            REQUIRE(out.fused[b][m].dim(1) == 96);
            REQUIRE(out.private_tokens[b][m].dim(0) == 23);
            REQUIRE(out.shared_tokens[b][m].dim(0) == 23);
            REQUIRE(out.recon[b][m].has_value());
            REQUIRE(out.recon[b][m]->dim(0) ==
                    static_cast<Index>(batch[b].plans[m].masked_count()));
            REQUIRE(out.recon[b][m]->dim(1) == 50);
        }
    }
}

TEST_CASE("reference layout forward shapes", "[micro][slow]") {
    MicroModel model(MicroConfig::reference(), 7);
    const auto& cfg = model.config();
    REQUIRE(model.params().scalar_count() > 1000000);
    Rng rng(2);
    std::vector<MicroExample> batch{random_example(cfg, 120, rng)};
    MicroOutput out = model.forward(batch);
    REQUIRE(out.fused[0].size() == 6);
    for (std::size_t m = 0; m < 6; ++m) {
        REQUIRE(out.fused[0][m].dim(0) == 23);
        REQUIRE(out.fused[0][m].dim(1) == 384);
        REQUIRE(out.recon[0][m]->dim(1) == 50);
    }
}

TEST_CASE("zero weights and zero input reconstruct exactly zero", "[micro]") {
    MicroModel model(MicroConfig::tiny(), 9);
    for (const auto& [name, t] : model.params().all()) {
        Tensor h = t;
        std::fill(h.mutable_values().begin(), h.mutable_values().end(), 0.0);
    }
    const auto& cfg = model.config();
    Rng rng(3);
    MicroExample ex = random_example(cfg, 80, rng, 0.0);  // zero signal
    MicroOutput out = model.forward({ex});
    for (std::size_t m = 0; m < cfg.modalities.size(); ++m) {
        REQUIRE(out.recon[0][m].has_value());
        for (double v : out.recon[0][m]->values()) REQUIRE(v == 0.0);
    }
}

TEST_CASE("modality order permutation permutes outputs only", "[micro]") {
    MicroConfig a = MicroConfig::desk();
    MicroConfig b = a;
    b.modalities = {Modality::RESP, Modality::EEG, Modality::EMG};
    MicroModel ma(a, 31), mb(b, 31);

    // identical per-modality inputs and plans, laid out in each config's order
    Rng rng(8);
    std::map<Modality, Tensor> patches, targets;
    auto plans = build_mask_plans(120, a.modalities, rng);
    for (Modality m : a.modalities) {
        std::vector<double> x(120 * 50);
        for (auto& v : x) v = rng.normal();
        patches.emplace(m, Tensor::from({120, 50}, x));
        targets.emplace(m, Tensor::from({120, 50}, smooth_moving_average(x)));
    }
    auto build = [&](const MicroConfig& cfg) {
        MicroExample ex;
        for (Modality m : cfg.modalities) {
            ex.patches.push_back(patches.at(m));
            ex.targets.push_back(targets.at(m));
            ex.plans.push_back(plans.at(m));
        }
        return ex;
    };
    MicroOutput oa = ma.forward({build(a)});
    MicroOutput ob = mb.forward({build(b)});
    for (std::size_t ia = 0; ia < a.modalities.size(); ++ia) {
        std::size_t ib = 0;
        while (b.modalities[ib] != a.modalities[ia]) ++ib;
        double worst = 0.0;
        const auto& fa = oa.fused[0][ia].values();
        const auto& fb = ob.fused[0][ib].values();
        REQUIRE(fa.size() == fb.size());
        for (std::size_t i = 0; i < fa.size(); ++i)
            worst = std::max(worst, std::fabs(fa[i] - fb[i]));
        const auto& ra = oa.recon[0][ia]->values();
        const auto& rb = ob.recon[0][ib]->values();
        for (std::size_t i = 0; i < ra.size(); ++i)
            worst = std::max(worst, std::fabs(ra[i] - rb[i]));
        REQUIRE(worst < 1e-10);  // concat order only perturbs fp summation
    }
}

TEST_CASE("moe routing keeps exactly the top-k gates live", "[micro]") {
    Rng rng(17);
    std::vector<double> lv(7 * 4);
    for (auto& v : lv) v = rng.normal();
    Tensor logits = Tensor::from({7, 4}, lv, true);
    MoeRouting route = moe_route(logits, 2);
    const auto& g = route.gates.values();
    for (Index i = 0; i < 7; ++i) {
        double sum = 0.0;
        int live = 0;
        Index arg1 = 0, arg2 = 1;
        if (lv[i * 4 + arg2] > lv[i * 4 + arg1]) std::swap(arg1, arg2);
        for (Index e = 2; e < 4; ++e) {
            if (lv[i * 4 + e] > lv[i * 4 + arg1]) {
                arg2 = arg1;
                arg1 = e;
            } else if (lv[i * 4 + e] > lv[i * 4 + arg2]) {
                arg2 = e;
            }
        }
        for (Index e = 0; e < 4; ++e) {
            if (g[i * 4 + e] > 0.0) {
                ++live;
                sum += g[i * 4 + e];
                REQUIRE((e == arg1 || e == arg2));
            }
        }
        REQUIRE(live == 2);
        REQUIRE(std::fabs(sum - 1.0) < 1e-12);
    }
    // row membership matches the live gates
    for (Index e = 0; e < 4; ++e)
        for (Index i : route.assign[e]) REQUIRE(g[i * 4 + e] > 0.0);
}

TEST_CASE("offset draws keep token counts fixed and losses stable", "[micro][slow]") {
    MicroModel model(MicroConfig::tiny(), 77);
    const auto& cfg = model.config();
    Rng sig(4);
    std::vector<double> x(80 * 50);
    for (auto& v : x) v = sig.normal();
    std::vector<double> losses;
    for (int trial = 0; trial < 30; ++trial) {
        Rng rng(derive_seed(55, "offset-trial", std::to_string(trial)));
        MicroExample ex;
        auto plans = build_mask_plans(80, cfg.modalities, rng);
        for (Modality m : cfg.modalities) {
            ex.patches.push_back(Tensor::from({80, 50}, x));
            ex.targets.push_back(Tensor::from({80, 50}, smooth_moving_average(x)));
            ex.plans.push_back(plans.at(m));
            REQUIRE(plans.at(m).masked_count() == 40);  // token counts never move
        }
        MicroOutput out = model.forward({ex});
        losses.push_back(recon_loss(out, {ex}, cfg.modalities).item());
    }
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t i = 0; i < 15; ++i) m1 += losses[i] / 15.0;
    for (std::size_t i = 15; i < 30; ++i) m2 += losses[i] / 15.0;
    double var = 0.0, mean = (m1 + m2) / 2.0;
    for (double l : losses) var += (l - mean) * (l - mean) / 29.0;
    double sd = std::sqrt(var);
    REQUIRE(std::fabs(m1 - m2) <= 2.0 * sd + 1e-12);
}

TEST_CASE("reconstruction target ignores visible samples away from masks", "[micro]") {
    // the smoothing window spans 11 samples, so an edit >= 6 samples from any
    // masked patch cannot reach the gathered target rows
    MicroConfig cfg = MicroConfig::tiny();
    Rng sig(14);
    std::vector<double> base(80 * 50);
    for (auto& v : base) v = sig.normal();
    Rng plan_rng(23);
    auto plans = build_mask_plans(80, cfg.modalities, plan_rng);

    auto masked_any = [&](std::size_t patch) {
        for (Modality m : cfg.modalities)
            if (plans.at(m).masked[patch]) return true;
        return false;
    };
    // the middle of any fully visible patch sits 25 samples from the nearest
    // patch boundary, far outside the smoothing reach of any masked row
    std::size_t edit = 0;
    for (std::size_t p = 0; p < 80; ++p) {
        if (!masked_any(p)) {
            edit = p * 50 + 25;
            break;
        }
    }
    REQUIRE(edit != 0);

    auto loss_with = [&](const std::vector<double>& signal) {
        MicroExample ex;
        MicroOutput out;
        out.patch_count = 80;
        out.merged_count = merged_token_count(80);
        out.recon.emplace_back();
        out.plans.emplace_back();
        for (Modality m : cfg.modalities) {
            ex.patches.push_back(Tensor::from({80, 50}, signal));
            ex.targets.push_back(Tensor::from({80, 50}, smooth_moving_average(signal)));
            ex.plans.push_back(plans.at(m));
            Index nmask = static_cast<Index>(plans.at(m).masked_count());
            out.recon[0].emplace_back(Tensor::zeros({nmask, 50}));
            out.plans[0].push_back(plans.at(m));
        }
        return recon_loss(out, {ex}, cfg.modalities).item();
    };

    double l0 = loss_with(base);
    std::vector<double> edited = base;
    edited[edit] += 3.0;
    REQUIRE(std::fabs(loss_with(edited) - l0) < 1e-12);

    // editing inside a masked patch must move the target
    std::size_t masked_patch = 0;
    while (!plans.at(cfg.modalities.front()).masked[masked_patch]) ++masked_patch;
    std::vector<double> edited2 = base;
    edited2[masked_patch * 50 + 25] += 3.0;
    REQUIRE(std::fabs(loss_with(edited2) - l0) > 1e-6);
}

TEST_CASE("non-finite activations report the failing stage", "[micro]") {
    // non-finite input is refused at tensor construction, before any stage
    std::vector<double> bad(80 * 50, 0.0);
    bad[7] = std::numeric_limits<double>::infinity();
    REQUIRE_THROWS_AS(Tensor::from({80, 50}, std::move(bad)), NumericError);

    // a poisoned weight surfaces as an error naming the first stage that
    // evaluates it
    auto poisoned_forward = [](const char* param, const char* stage) {
        MicroModel model(MicroConfig::tiny(), 5);
        Rng rng(6);
        MicroExample ex = random_example(model.config(), 80, rng);
        Tensor w = model.params().get(param);
        w.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
        REQUIRE_THROWS_WITH(model.forward({ex}), ContainsSubstring(stage));
    };
    poisoned_forward("EEG.conv0.w", "conv_embed");
    poisoned_forward("EEG.merge.pw1", "merge");
    poisoned_forward("shared.block0.attn.wq", "shared");
    poisoned_forward("EEG.dec.proj", "decoder");
}

TEST_CASE("identical epochs map to identical embeddings", "[micro]") {
    MicroModel model(MicroConfig::tiny(), 19);
    StandardRecord rec;
    rec.id = "fixture";
    rec.epochs = 3;
    Rng rng(33);
    for (Modality m : all_modalities()) {
        std::vector<double> ch(3 * kEpochSamples);
        for (auto& v : ch) v = rng.normal();
        // epoch 2 repeats epoch 0 exactly
        std::copy(ch.begin(), ch.begin() + kEpochSamples, ch.begin() + 2 * kEpochSamples);
        rec.modalities[m].channels.push_back(std::move(ch));
        rec.modalities[m].constant.push_back(false);
    }
    auto emb = model.epoch_embeddings(rec);
    REQUIRE(emb.size() == 3);
    REQUIRE(emb[0].size() == static_cast<std::size_t>(model.embedding_dim()));
    REQUIRE(emb[0] == emb[2]);
    REQUIRE(emb[0] != emb[1]);
}

TEST_CASE("training examples crop, smooth and mask consistently", "[micro]") {
    MicroConfig cfg = MicroConfig::tiny();
    StandardRecord rec;
    rec.id = "crop";
    rec.epochs = 4;
    Rng rng(41);
    for (Modality m : all_modalities()) {
        std::vector<double> ch(4 * kEpochSamples);
        for (auto& v : ch) v = rng.normal();
        rec.modalities[m].channels.push_back(std::move(ch));
        rec.modalities[m].constant.push_back(false);
    }
    Rng mask_rng(2);
    MicroExample ex = make_training_example(rec, 1, 2, cfg, mask_rng);
    REQUIRE(ex.patches.size() == cfg.modalities.size());
    REQUIRE(ex.patches[0].dim(0) == 120);
    REQUIRE(ex.patches[0].dim(1) == 50);
    const auto& raw = rec.modalities.at(cfg.modalities[0]).channels[0];
    REQUIRE(ex.patches[0].values()[0] == raw[kEpochSamples]);
    // smoothed target interior obeys the 11-point moving average
    const auto& tgt = ex.targets[0].values();
    double acc = 0.0;
    for (int k = -5; k <= 5; ++k) acc += raw[kEpochSamples + 100 + k];
    REQUIRE(tgt[100] == Catch::Approx(acc / 11.0).margin(1e-12));
    Rng bad(3);
    REQUIRE_THROWS_AS(make_training_example(rec, 3, 2, cfg, bad), DataError);
}
