#pragma once
// Structured masking on the patch grid. High-rate modalities mask a random
// 5-slot subset of a 10-patch period (single-patch runs); low-rate
// modalities mask one aligned 4-patch run per 8-patch period. One offset
// draw is shared by every modality of a record so grid phases coincide.

#include <map>
#include <vector>

#include "somnus/common.hpp"
#include "somnus/signal.hpp"
#include "somnus/tensor.hpp"

namespace somnus {

constexpr std::size_t kHighMaskPeriod = 10;  // patches; 5 masked per period
constexpr std::size_t kLowMaskPeriod = 8;    // patches; one 4-run per period
constexpr std::size_t kLowMaskRun = 4;
constexpr std::size_t kMaskSuperPeriod = 40;  // lcm of periods and merge stride

struct MaskPlan {
    std::vector<bool> masked;  // per patch index
    std::size_t offset = 0;    // the record-shared grid offset draw
    std::size_t run_length = 1;

    std::size_t masked_count() const {
        std::size_t n = 0;
        for (bool b : masked) n += b ? 1 : 0;
        return n;
    }
    std::vector<Index> masked_indices() const {
        std::vector<Index> idx;
        for (std::size_t i = 0; i < masked.size(); ++i)
            if (masked[i]) idx.push_back(static_cast<Index>(i));
        return idx;
    }
    std::vector<Index> visible_indices() const {
        std::vector<Index> idx;
        for (std::size_t i = 0; i < masked.size(); ++i)
            if (!masked[i]) idx.push_back(static_cast<Index>(i));
        return idx;
    }
};

// One plan per modality over a shared offset draw. P must cover at least one
// super-period and keep low-rate runs whole (multiple of 4).
inline std::map<Modality, MaskPlan> build_mask_plans(std::size_t patches,
                                                     const std::vector<Modality>& kinds,
                                                     Rng& rng) {
    if (patches < kMaskSuperPeriod)
        throw ConfigError("build_mask_plans: need at least " +
                          std::to_string(kMaskSuperPeriod) + " patches, got " +
                          std::to_string(patches));
    if (patches % kLowMaskRun != 0)
        throw ConfigError("build_mask_plans: patch count must be a multiple of " +
                          std::to_string(kLowMaskRun));
    std::size_t u = rng.index(kMaskSuperPeriod);  // shared grid offset
    std::map<Modality, MaskPlan> plans;
    for (Modality m : kinds) {
        MaskPlan plan;
        plan.offset = u;
        plan.masked.assign(patches, false);
        if (is_high_rate(m)) {
            plan.run_length = 1;
            // random 5-of-10 slot subset, independent per modality
            std::vector<std::size_t> slots(kHighMaskPeriod);
            for (std::size_t i = 0; i < kHighMaskPeriod; ++i) slots[i] = i;
            rng.shuffle(slots);
            std::vector<bool> chosen(kHighMaskPeriod, false);
            for (std::size_t i = 0; i < kHighMaskPeriod / 2; ++i) chosen[slots[i]] = true;
            std::size_t o = u % kHighMaskPeriod;
            for (std::size_t p = 0; p < patches; ++p)
                plan.masked[p] = chosen[(p + kHighMaskPeriod - o) % kHighMaskPeriod];
        } else {
            plan.run_length = kLowMaskRun;
            // aligned 4-run per period; offset restricted to {0, 4} so edge
            // runs stay whole for any multiple-of-4 length
            std::size_t o = (u % kLowMaskPeriod) < kLowMaskRun ? 0 : kLowMaskRun;
            for (std::size_t p = 0; p < patches; ++p)
                plan.masked[p] =
                    ((p + kLowMaskPeriod - o) % kLowMaskPeriod) < kLowMaskRun;
        }
        plans[m] = std::move(plan);
    }
    return plans;
}

inline Index merged_token_count(Index patches, Index kernel = 10, Index stride = 5) {
    if (patches < kernel) throw ShapeError("merged_token_count: sequence shorter than kernel");
    return (patches - kernel) / stride + 1;
}

}  // namespace somnus
