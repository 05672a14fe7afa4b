#pragma once
// Synthetic demographically-conditioned PSG cohort: Markov hypnograms with
// demographic and night-third modulation, stage-keyed multi-rate waveforms,
// sleep-disordered-breathing events, and proportional-hazards survival
// labels. Deterministic under (seed, config) via derived per-record streams.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "somnus/common.hpp"
#include "somnus/record.hpp"

namespace somnus {

enum Stage : int { kStageW = 0, kStageN1 = 1, kStageN2 = 2, kStageN3 = 3, kStageREM = 4 };

struct DemographicProfile {
    double age = 0.0;
    Sex sex = Sex::F;
    double bmi = 0.0;
    double z_age = 0.0;
    double z_bmi = 0.0;
};

struct SdbEvent {
    double start_s = 0.0;
    double dur_s = 0.0;
    bool apnea = false;  // false = hypopnea
};

struct GeneratorConfig {
    // cohort demographic statistics
    double age_mean = 55.0, age_sd = 14.0;
    double bmi_mean = 28.0, bmi_sd = 5.5;
    double male_fraction = 0.5;

    // hypnogram: base transition matrix over {W, N1, N2, N3, REM}
    std::array<std::array<double, 5>, 5> transition = {{
        {0.70, 0.25, 0.04, 0.005, 0.005},
        {0.10, 0.40, 0.45, 0.02, 0.03},
        {0.03, 0.05, 0.72, 0.15, 0.05},
        {0.01, 0.02, 0.22, 0.70, 0.05},
        {0.05, 0.10, 0.10, 0.01, 0.74},
    }};
    // night-third baseline drift of N3/REM propensity (logit shifts)
    std::array<double, 3> n3_third_base = {0.6, 0.0, -0.6};
    std::array<double, 3> rem_third_base = {-0.6, 0.0, 0.6};
    // demographic coefficients scaled by a per-third weight
    std::array<double, 3> n3_third_weight = {1.2, 0.8, 0.5};
    std::array<double, 3> rem_third_weight = {0.6, 1.0, 1.2};
    double n3_age = -0.55, n3_bmi = -0.35, n3_male = -0.35;
    double n1_age = 0.30;
    double rem_age = -0.10;
    double rem_cycle_amp = 0.35;  // 90-min REM-propensity oscillation

    // waveform synthesis
    double eeg_hz = 200.0, eog_hz = 200.0, emg_hz = 200.0, ecg_hz = 200.0;
    double resp_hz = 25.0, spo2_hz = 1.0;
    double delta_age_atten = 0.4;  // N3 delta amplitude ~ exp(-a * z_age)
    double sigma_female_scale = 1.20, sigma_male_scale = 0.85;
    double emg_bmi_coef = 0.12;
    double emg_male_scale = 1.15, emg_female_scale = 0.85;
    double pink_amp = 0.25, white_amp = 0.12;

    // sleep-disordered breathing
    double sdb_base_hazard = 0.0045;  // per sleeping second at z = 0
    double sdb_bmi = 0.8, sdb_age = 0.3, sdb_male = 0.3;
    double sdb_dur_min = 12.0, sdb_dur_max = 28.0;
    double sdb_apnea_prob = 0.45;
    double sdb_resp_apnea_scale = 0.08;
    double sdb_resp_hypopnea_scale = 0.25;
    double sdb_gap_min = 10.0, sdb_gap_mean_extra = 15.0;

    // survival
    double surv_base_rate = 0.12;  // events per year at z = 0
    double surv_beta_age = 1.5, surv_beta_bmi = 1.0, surv_beta_male = 1.0;
    double censor_horizon = 12.0;  // independent U[0, horizon] censoring

    // cohort assembly
    std::size_t min_epochs = 200, max_epochs = 250;
    std::uint64_t seed = 1;

    void validate() const {
        for (const auto& row : transition) {
            double s = 0.0;
            for (double p : row) {
                if (p < 0.0) throw ConfigError("generator: negative transition probability");
                s += p;
            }
            if (std::fabs(s - 1.0) > 1e-9)
                throw ConfigError("generator: transition row does not sum to 1");
        }
        if (sdb_base_hazard < 0 || surv_base_rate < 0 || censor_horizon < 0)
            throw ConfigError("generator: rates must be nonnegative");
        if (min_epochs < 120 || max_epochs > 1080 || min_epochs > max_epochs)
            throw ConfigError("generator: epoch range must lie within [120, 1080]");
    }
};

namespace detail {

inline double std_normal_cdf(double z) { return 0.5 * (1.0 + std::erf(z / std::sqrt(2.0))); }

// Draw a normal variate conditioned on its quantile landing in [lo, hi).
inline double truncated_normal_band(Rng& rng, double mean, double sd, double lo, double hi) {
    for (int tries = 0; tries < 10000; ++tries) {
        double z = rng.normal();
        double q = std_normal_cdf(z);
        if (q >= lo && q < hi) return mean + sd * z;
    }
    throw Error("truncated_normal_band: rejection sampling failed");
}

}  // namespace detail

// strata: nullopt draws unconditionally; otherwise a cell index in [0, 18)
// encoding (sex, age tercile, bmi tercile) as sex*9 + age_ter*3 + bmi_ter.
inline DemographicProfile sample_profile(Rng& rng, const GeneratorConfig& cfg,
                                         std::optional<int> strata = std::nullopt) {
    DemographicProfile p;
    if (strata) {
        int cell = *strata;
        if (cell < 0 || cell >= 18) throw ConfigError("sample_profile: cell out of range");
        p.sex = cell / 9 == 0 ? Sex::F : Sex::M;
        int age_ter = (cell % 9) / 3;
        int bmi_ter = cell % 3;
        p.age = detail::truncated_normal_band(rng, cfg.age_mean, cfg.age_sd, age_ter / 3.0,
                                              (age_ter + 1) / 3.0);
        p.bmi = detail::truncated_normal_band(rng, cfg.bmi_mean, cfg.bmi_sd, bmi_ter / 3.0,
                                              (bmi_ter + 1) / 3.0);
    } else {
        p.sex = rng.uniform() < cfg.male_fraction ? Sex::M : Sex::F;
        p.age = cfg.age_mean + cfg.age_sd * rng.normal();
        p.bmi = cfg.bmi_mean + cfg.bmi_sd * rng.normal();
    }
    p.age = std::clamp(p.age, 18.0, 95.0);
    p.bmi = std::clamp(p.bmi, 15.0, 50.0);
    p.z_age = (p.age - cfg.age_mean) / cfg.age_sd;
    p.z_bmi = (p.bmi - cfg.bmi_mean) / cfg.bmi_sd;
    return p;
}

// Markov walk with demographic and night-third logit modulation; starts in W.
inline std::vector<int> generate_hypnogram(const DemographicProfile& p,
                                           std::size_t duration_epochs, Rng& rng,
                                           const GeneratorConfig& cfg) {
    if (duration_epochs < 120 || duration_epochs > 1080)
        throw ConfigError("generate_hypnogram: duration must lie in [120, 1080] epochs");
    double male = p.sex == Sex::M ? 1.0 : 0.0;
    std::vector<int> stages(duration_epochs);
    int cur = kStageW;
    stages[0] = cur;
    for (std::size_t e = 1; e < duration_epochs; ++e) {
        int third = static_cast<int>(3 * (e - 1) / duration_epochs);
        double n3_shift = cfg.n3_third_base[third] +
                          cfg.n3_third_weight[third] *
                              (cfg.n3_age * p.z_age + cfg.n3_bmi * p.z_bmi + cfg.n3_male * male);
        double rem_shift = cfg.rem_third_base[third] +
                           cfg.rem_third_weight[third] * cfg.rem_age * p.z_age +
                           cfg.rem_cycle_amp *
                               std::sin(2.0 * M_PI * static_cast<double>(e) / 180.0 - M_PI / 2.0);
        double n1_shift = cfg.n1_age * p.z_age;

        std::array<double, 5> logit;
        for (int s = 0; s < 5; ++s) logit[s] = std::log(std::max(cfg.transition[cur][s], 1e-12));
        logit[kStageN3] += n3_shift;
        logit[kStageREM] += rem_shift;
        logit[kStageN1] += n1_shift;
        double mx = *std::max_element(logit.begin(), logit.end());
        std::array<double, 5> prob;
        double z = 0.0;
        for (int s = 0; s < 5; ++s) {
            prob[s] = std::exp(logit[s] - mx);
            z += prob[s];
        }
        double u = rng.uniform() * z, acc = 0.0;
        cur = 4;
        for (int s = 0; s < 5; ++s) {
            acc += prob[s];
            if (u < acc) {
                cur = s;
                break;
            }
        }
        stages[e] = cur;
    }
    return stages;
}

// Hazard-scanned events during sleep with a refractory gap between events.
inline std::vector<SdbEvent> generate_sdb_events(const std::vector<int>& hypno,
                                                 const DemographicProfile& p, Rng& rng,
                                                 const GeneratorConfig& cfg) {
    double male = p.sex == Sex::M ? 1.0 : 0.0;
    double hazard = cfg.sdb_base_hazard *
                    std::exp(cfg.sdb_bmi * p.z_bmi + cfg.sdb_age * p.z_age + cfg.sdb_male * male);
    std::vector<SdbEvent> events;
    double total_s = static_cast<double>(hypno.size() * kEpochSeconds);
    double next_allowed = 0.0;
    for (double t = 0.0; t < total_s; t += 1.0) {
        auto epoch = static_cast<std::size_t>(t) / kEpochSeconds;
        if (hypno[epoch] == kStageW || t < next_allowed) continue;
        if (rng.uniform() >= hazard) continue;
        SdbEvent ev;
        ev.start_s = t;
        ev.dur_s = cfg.sdb_dur_min + (cfg.sdb_dur_max - cfg.sdb_dur_min) * rng.uniform();
        ev.apnea = rng.uniform() < cfg.sdb_apnea_prob;
        if (ev.start_s + ev.dur_s > total_s) ev.dur_s = total_s - ev.start_s;
        if (ev.dur_s < 1.0) break;
        events.push_back(ev);
        next_allowed = ev.start_s + ev.dur_s + cfg.sdb_gap_min +
                       rng.exponential(1.0 / cfg.sdb_gap_mean_extra);
    }
    return events;
}

inline std::vector<int> sdb_label_track(const std::vector<SdbEvent>& events,
                                        std::size_t total_seconds) {
    std::vector<int> track(total_seconds, 0);
    for (const auto& ev : events) {
        auto lo = static_cast<std::size_t>(ev.start_s);
        auto hi = std::min(total_seconds,
                           static_cast<std::size_t>(std::ceil(ev.start_s + ev.dur_s)));
        for (std::size_t s = lo; s < hi; ++s) track[s] = ev.apnea ? 2 : 1;
    }
    return track;
}

inline SurvivalLabel generate_survival(const DemographicProfile& p, Rng& rng,
                                       const GeneratorConfig& cfg) {
    double male = p.sex == Sex::M ? 1.0 : 0.0;
    double rate = cfg.surv_base_rate * std::exp(cfg.surv_beta_age * p.z_age +
                                                cfg.surv_beta_bmi * p.z_bmi +
                                                cfg.surv_beta_male * male);
    double t_event = rng.exponential(rate);
    double t_censor = cfg.censor_horizon * rng.uniform();
    SurvivalLabel lab;
    lab.observed = t_event <= t_censor;
    lab.time = lab.observed ? t_event : t_censor;
    return lab;
}

// ---- waveform synthesis -------------------------------------------------------

namespace detail {

// Sum of octave-spaced AR(1) streams approximating a 1/f spectrum.
class PinkNoise {
public:
    PinkNoise(double fs, double amp) : amp_(amp) {
        const double centers[4] = {0.5, 2.0, 8.0, 32.0};
        for (int k = 0; k < 4; ++k) {
            rho_[k] = std::exp(-2.0 * M_PI * centers[k] / fs);
            gain_[k] = std::pow(0.5, k);
            state_[k] = 0.0;
        }
    }
    double next(Rng& rng) {
        double v = 0.0;
        for (int k = 0; k < 4; ++k) {
            state_[k] = rho_[k] * state_[k] +
                        std::sqrt(1.0 - rho_[k] * rho_[k]) * rng.normal();
            v += gain_[k] * state_[k];
        }
        return amp_ * v * 0.5;
    }

private:
    double rho_[4], gain_[4], state_[4], amp_;
};

// Per-sample amplitude envelope from per-epoch values with short linear
// crossfades at epoch boundaries (avoids synthesis clicks).
class EpochEnvelope {
public:
    EpochEnvelope(std::vector<double> per_epoch, double fs)
        : amps_(std::move(per_epoch)), fs_(fs), ramp_(fs / 2.0) {}
    double at(std::size_t i) const {
        double t = static_cast<double>(i) / fs_;
        auto e = std::min(amps_.size() - 1,
                          static_cast<std::size_t>(t / static_cast<double>(kEpochSeconds)));
        double into = static_cast<double>(i) -
                      static_cast<double>(e * kEpochSeconds) * fs_;
        if (e > 0 && into < ramp_) {
            double f = into / ramp_;
            return amps_[e - 1] * (1.0 - f) + amps_[e] * f;
        }
        return amps_[e];
    }

private:
    std::vector<double> amps_;
    double fs_, ramp_;
};

struct OscComponent {
    double hz;
    std::array<double, 5> stage_amp;
    bool spindle_gate = false;  // burst envelope for sigma activity
    bool harmonic = false;      // add a half-amplitude second harmonic
};

inline std::vector<float> render_oscillatory(const std::vector<int>& hypno, double fs,
                                             const std::vector<OscComponent>& comps,
                                             const std::vector<std::array<double, 5>>& amp_tabs,
                                             double pink_amp, double white_amp, Rng& rng) {
    auto n = static_cast<std::size_t>(static_cast<double>(hypno.size() * kEpochSeconds) * fs);
    std::vector<float> out(n);
    std::vector<EpochEnvelope> envs;
    envs.reserve(comps.size());
    for (std::size_t c = 0; c < comps.size(); ++c) {
        std::vector<double> per_epoch(hypno.size());
        for (std::size_t e = 0; e < hypno.size(); ++e)
            per_epoch[e] = amp_tabs[c][static_cast<std::size_t>(hypno[e])];
        envs.emplace_back(std::move(per_epoch), fs);
    }
    std::vector<double> phase(comps.size());
    for (auto& ph : phase) ph = 2.0 * M_PI * rng.uniform();
    double gate_phase = 2.0 * M_PI * rng.uniform();
    PinkNoise pink(fs, pink_amp);
    for (std::size_t i = 0; i < n; ++i) {
        double v = 0.0;
        for (std::size_t c = 0; c < comps.size(); ++c) {
            double w = std::sin(phase[c]);
            if (comps[c].harmonic) w += 0.5 * std::sin(2.0 * phase[c]);
            if (comps[c].spindle_gate) {
                double g = std::sin(gate_phase);
                w *= 1.0 / (1.0 + std::exp(-(g - 0.55) / 0.06));
            }
            v += envs[c].at(i) * w;
            phase[c] += 2.0 * M_PI * comps[c].hz / fs;
            if (phase[c] > 2.0 * M_PI) phase[c] -= 2.0 * M_PI;
        }
        gate_phase += 2.0 * M_PI / (4.1 * fs);
        if (gate_phase > 2.0 * M_PI) gate_phase -= 2.0 * M_PI;
        v += pink.next(rng) + white_amp * rng.normal();
        out[i] = static_cast<float>(v);
    }
    return out;
}

}  // namespace detail

inline RawRecord generate_signals(const std::vector<int>& hypno, const DemographicProfile& p,
                                  const std::vector<SdbEvent>& events, Rng& rng,
                                  const GeneratorConfig& cfg) {
    if (hypno.empty()) throw DataError("generate_signals: empty hypnogram");
    RawRecord rec;
    rec.demo.age = p.age;
    rec.demo.sex = p.sex;
    rec.demo.bmi = p.bmi;
    double male = p.sex == Sex::M ? 1.0 : 0.0;
    std::size_t total_s = hypno.size() * kEpochSeconds;

    // EEG: stage-keyed rhythms. Delta dominates N3 (attenuated with age),
    // alpha marks wake, sigma bursts mark N2 (sex-scaled), theta + slow
    // sawtooth mark REM.
    {
        double delta_n3 = 1.6 * std::exp(-cfg.delta_age_atten * p.z_age);
        double sig = p.sex == Sex::F ? cfg.sigma_female_scale : cfg.sigma_male_scale;
        std::vector<detail::OscComponent> comps = {
            {1.7, {}, false, false},         // delta
            {6.0, {}, false, false},         // theta
            {10.0, {}, false, false},        // alpha
            {13.5, {}, true, false},         // sigma bursts
            {3.0, {}, false, true},          // REM sawtooth
        };
        std::vector<std::array<double, 5>> amps = {
            {0.05, 0.10, 0.45, delta_n3, 0.10},
            {0.10, 0.50, 0.25, 0.10, 0.75},
            {1.10, 0.25, 0.10, 0.05, 0.10},
            {0.03 * sig, 0.05 * sig, 0.90 * sig, 0.08 * sig, 0.03 * sig},
            {0.02, 0.05, 0.05, 0.02, 0.35},
        };
        RawModality m;
        m.rate_hz = cfg.eeg_hz;
        m.channels.push_back({"EEG", detail::render_oscillatory(hypno, cfg.eeg_hz, comps, amps,
                                                                cfg.pink_amp, cfg.white_amp, rng)});
        rec.modalities[Modality::EEG] = std::move(m);
    }

    // EOG: slow rolling movements in N1, large phasic movements in REM.
    {
        std::vector<detail::OscComponent> comps = {
            {0.35, {}, false, false},
            {1.3, {}, false, true},
        };
        std::vector<std::array<double, 5>> amps = {
            {0.30, 0.50, 0.15, 0.10, 1.20},
            {0.25, 0.10, 0.05, 0.03, 0.80},
        };
        RawModality m;
        m.rate_hz = cfg.eog_hz;
        m.channels.push_back({"EOG", detail::render_oscillatory(hypno, cfg.eog_hz, comps, amps,
                                                                0.15, 0.08, rng)});
        rec.modalities[Modality::EOG] = std::move(m);
    }

    // EMG: broadband tone scaled by stage (REM atonia) with BMI and sex cues.
    {
        double scale = (1.0 + cfg.emg_bmi_coef * p.z_bmi) *
                       (p.sex == Sex::M ? cfg.emg_male_scale : cfg.emg_female_scale);
        std::array<double, 5> stage_amp = {1.00, 0.45, 0.35, 0.30, 0.08};
        std::vector<double> per_epoch(hypno.size());
        for (std::size_t e = 0; e < hypno.size(); ++e)
            per_epoch[e] = scale * stage_amp[static_cast<std::size_t>(hypno[e])];
        detail::EpochEnvelope env(std::move(per_epoch), cfg.emg_hz);
        auto n = static_cast<std::size_t>(static_cast<double>(total_s) * cfg.emg_hz);
        std::vector<float> x(n);
        for (std::size_t i = 0; i < n; ++i)
            x[i] = static_cast<float>(env.at(i) * rng.normal() + 0.05 * rng.normal());
        RawModality m;
        m.rate_hz = cfg.emg_hz;
        m.channels.push_back({"EMG", std::move(x)});
        rec.modalities[Modality::EMG] = std::move(m);
    }

    // ECG: R-peak pulse train with stage- and demographic-modulated rate.
    {
        auto n = static_cast<std::size_t>(static_cast<double>(total_s) * cfg.ecg_hz);
        std::vector<float> x(n, 0.0f);
        double hr_base = 62.0 + 3.0 * p.z_bmi + (p.sex == Sex::F ? 2.0 : 0.0);
        double t = 0.5;
        while (t < static_cast<double>(total_s)) {
            auto epoch = std::min(hypno.size() - 1,
                                  static_cast<std::size_t>(t) / kEpochSeconds);
            double hr = hr_base;
            if (hypno[epoch] == kStageREM) hr += 4.0;
            if (hypno[epoch] == kStageN3) hr -= 4.0;
            double sigma_s = 0.015;
            long center = std::lround(t * cfg.ecg_hz);
            long span = std::lround(4.0 * sigma_s * cfg.ecg_hz);
            for (long i = std::max(0l, center - span);
                 i <= std::min<long>(center + span, static_cast<long>(n) - 1); ++i) {
                double d = (static_cast<double>(i) / cfg.ecg_hz - t) / sigma_s;
                x[static_cast<std::size_t>(i)] += static_cast<float>(std::exp(-0.5 * d * d));
            }
            t += 60.0 / hr * (1.0 + 0.04 * rng.normal());
        }
        double wander_phase = 2.0 * M_PI * rng.uniform();
        for (std::size_t i = 0; i < n; ++i) {
            x[i] += static_cast<float>(
                0.08 * std::sin(wander_phase + 2.0 * M_PI * 0.3 * static_cast<double>(i) /
                                                   cfg.ecg_hz) +
                0.02 * rng.normal());
        }
        RawModality m;
        m.rate_hz = cfg.ecg_hz;
        m.channels.push_back({"ECG", std::move(x)});
        rec.modalities[Modality::ECG] = std::move(m);
    }

    // RESP: breathing oscillation; SDB events scale the belt signal down
    // hard enough that event RMS sits well under 30% of baseline.
    {
        auto n = static_cast<std::size_t>(static_cast<double>(total_s) * cfg.resp_hz);
        std::vector<float> x(n);
        std::vector<double> scale_per_s(total_s, 1.0);
        for (const auto& ev : events) {
            double sc = ev.apnea ? cfg.sdb_resp_apnea_scale : cfg.sdb_resp_hypopnea_scale;
            auto lo = static_cast<std::size_t>(ev.start_s);
            auto hi = std::min<std::size_t>(
                total_s, static_cast<std::size_t>(std::ceil(ev.start_s + ev.dur_s)));
            for (std::size_t s = lo; s < hi; ++s) scale_per_s[s] = sc;
        }
        double amp_base = 1.0 + 0.08 * p.z_bmi;
        std::array<double, 5> stage_amp = {0.90, 1.00, 1.00, 1.10, 0.95};
        std::array<double, 5> stage_rate = {0.27, 0.25, 0.25, 0.22, 0.30};
        double phase = 2.0 * M_PI * rng.uniform();
        for (std::size_t i = 0; i < n; ++i) {
            double ts = static_cast<double>(i) / cfg.resp_hz;
            auto epoch = std::min(hypno.size() - 1,
                                  static_cast<std::size_t>(ts) / kEpochSeconds);
            auto st = static_cast<std::size_t>(hypno[epoch]);
            double wave = std::sin(phase) + 0.15 * std::sin(2.0 * phase);
            double v = amp_base * stage_amp[st] * wave + 0.08 * rng.normal();
            auto sec = std::min<std::size_t>(total_s - 1, static_cast<std::size_t>(ts));
            x[i] = static_cast<float>(v * scale_per_s[sec]);
            phase += 2.0 * M_PI * stage_rate[st] / cfg.resp_hz;
            if (phase > 2.0 * M_PI) phase -= 2.0 * M_PI;
        }
        RawModality m;
        m.rate_hz = cfg.resp_hz;
        m.channels.push_back({"RESP", std::move(x)});
        rec.modalities[Modality::RESP] = std::move(m);
    }

    // SPO2: slow baseline with desaturation dips lagging each event.
    {
        auto n = static_cast<std::size_t>(static_cast<double>(total_s) * cfg.spo2_hz);
        std::vector<double> dip(n, 0.0);
        for (const auto& ev : events) {
            double depth = ev.apnea ? 5.0 + 3.0 * rng.uniform() : 2.0 + 1.5 * rng.uniform();
            double t_end = ev.start_s + ev.dur_s;
            for (std::size_t s = 0; s < n; ++s) {
                double ts = static_cast<double>(s) / cfg.spo2_hz;
                double d = 0.0;
                if (ts >= ev.start_s + 3.0 && ts <= t_end) {
                    double f = (ts - ev.start_s - 3.0) / std::max(1.0, ev.dur_s - 3.0);
                    d = depth * std::min(1.0, f);
                } else if (ts > t_end) {
                    d = depth * std::exp(-(ts - t_end) / 12.0);
                }
                dip[s] = std::max(dip[s], d);
            }
        }
        std::vector<float> x(n);
        double ar = 0.0;
        for (std::size_t s = 0; s < n; ++s) {
            ar = 0.9 * ar + 0.1 * rng.normal();
            double v = 96.5 - 0.3 * p.z_bmi + ar - dip[s];
            x[s] = static_cast<float>(std::clamp(v, 70.0, 100.0));
        }
        RawModality m;
        m.rate_hz = cfg.spo2_hz;
        m.channels.push_back({"SPO2", std::move(x)});
        rec.modalities[Modality::SPO2] = std::move(m);
    }

    rec.stages = hypno;
    rec.sdb = sdb_label_track(events, total_s);
    return rec;
}

// ---- record and cohort assembly -----------------------------------------------

inline RawRecord generate_record(std::uint64_t cohort_seed, std::size_t index,
                                 const GeneratorConfig& cfg) {
    cfg.validate();
    Rng rng_profile(derive_seed(cohort_seed, "profile", index));
    Rng rng_duration(derive_seed(cohort_seed, "duration", index));
    Rng rng_hypno(derive_seed(cohort_seed, "hypnogram", index));
    Rng rng_sdb(derive_seed(cohort_seed, "sdb", index));
    Rng rng_signals(derive_seed(cohort_seed, "signals", index));
    Rng rng_surv(derive_seed(cohort_seed, "survival", index));

    auto profile = sample_profile(rng_profile, cfg, static_cast<int>(index % 18));
    std::size_t span = cfg.max_epochs - cfg.min_epochs + 1;
    std::size_t duration = cfg.min_epochs + rng_duration.index(span);
    auto hypno = generate_hypnogram(profile, duration, rng_hypno, cfg);
    auto events = generate_sdb_events(hypno, profile, rng_sdb, cfg);
    auto rec = generate_signals(hypno, profile, events, rng_signals, cfg);
    rec.survival = generate_survival(profile, rng_surv, cfg);

    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%04zu", index);
    rec.id = buf;
    return rec;
}

inline CohortManifest synthesize_cohort(const std::filesystem::path& out_dir,
                                        std::size_t subjects, const GeneratorConfig& cfg,
                                        const std::string& config_hash) {
    cfg.validate();
    CohortManifest manifest;
    manifest.config_hash = config_hash;
    std::filesystem::create_directories(out_dir / "subjects");
    for (std::size_t i = 0; i < subjects; ++i) {
        RawRecord rec = generate_record(cfg.seed, i, cfg);
        save_record(out_dir / "subjects" / rec.id, rec);
        CohortRow row;
        row.record_id = rec.id;
        row.age = rec.demo.age;
        row.sex = rec.demo.sex;
        row.bmi = rec.demo.bmi;
        row.duration_epochs = rec.stages.size();
        row.survival_time = rec.survival->time;
        row.event_observed = rec.survival->observed;
        manifest.rows.push_back(std::move(row));
    }
    save_manifest(out_dir / "cohort.csv", manifest);
    return manifest;
}

}  // namespace somnus
