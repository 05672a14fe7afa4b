#pragma once
// Waveform conditioning: rate conversion, Butterworth/notch biquad cascades
// applied forward-backward (zero phase), per-channel z-scoring, patch
// extraction and the moving-average smoothing used for reconstruction
// targets.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "somnus/common.hpp"

namespace somnus {

enum class Modality { EEG = 0, EOG, EMG, ECG, RESP, SPO2 };

inline const char* modality_name(Modality m) {
    switch (m) {
        case Modality::EEG: return "EEG";
        case Modality::EOG: return "EOG";
        case Modality::EMG: return "EMG";
        case Modality::ECG: return "ECG";
        case Modality::RESP: return "RESP";
        case Modality::SPO2: return "SPO2";
    }
    throw Error("unknown modality");
}

inline Modality modality_from_name(const std::string& s) {
    for (Modality m : {Modality::EEG, Modality::EOG, Modality::EMG, Modality::ECG,
                       Modality::RESP, Modality::SPO2})
        if (s == modality_name(m)) return m;
    throw DataError("unknown modality name '" + s + "'");
}

inline const std::array<Modality, 6>& all_modalities() {
    static const std::array<Modality, 6> mods = {Modality::EEG,  Modality::EOG,
                                                 Modality::EMG,  Modality::ECG,
                                                 Modality::RESP, Modality::SPO2};
    return mods;
}

// Sampling-rate classes drive the masking geometry downstream.
inline bool is_high_rate(Modality m) { return m != Modality::RESP && m != Modality::SPO2; }

// ---- resampling ---------------------------------------------------------------

// Rate conversion to `to_hz`. Integer-factor paths use decimation and linear
// interpolation; fractional ratios use a Blackman-windowed sinc with
// per-output kernel normalization (exact DC preservation). Output length is
// round(n * to / from).
inline std::vector<double> resample(const std::vector<double>& x, double from_hz,
                                    double to_hz) {
    if (from_hz <= 0 || to_hz <= 0) throw ConfigError("resample: rates must be positive");
    if (x.empty()) throw DataError("resample: empty signal");
    if (from_hz == to_hz) return x;
    const double ratio = to_hz / from_hz;
    const std::size_t n_out =
        static_cast<std::size_t>(std::llround(static_cast<double>(x.size()) * ratio));
    if (n_out == 0) return {};

    double down = from_hz / to_hz;
    if (down > 1.0 && std::fabs(down - std::round(down)) < 1e-9) {
        std::size_t k = static_cast<std::size_t>(std::llround(down));
        std::vector<double> out;
        out.reserve(n_out);
        for (std::size_t i = 0; i < x.size() && out.size() < n_out; i += k)
            out.push_back(x[i]);
        while (out.size() < n_out) out.push_back(x.back());
        return out;
    }
    if (ratio > 1.0 && std::fabs(ratio - std::round(ratio)) < 1e-9) {
        std::size_t k = static_cast<std::size_t>(std::llround(ratio));
        std::vector<double> out(n_out);
        for (std::size_t j = 0; j < n_out; ++j) {
            double t = static_cast<double>(j) / static_cast<double>(k);
            std::size_t i0 = static_cast<std::size_t>(t);
            double frac = t - static_cast<double>(i0);
            std::size_t i1 = std::min(i0 + 1, x.size() - 1);
            out[j] = x[i0] * (1.0 - frac) + x[i1] * frac;
        }
        return out;
    }

    // fractional ratio: windowed sinc
    const int half_taps = 24;
    const double fc = 0.45 * std::min(1.0, ratio);  // relative to input rate
    std::vector<double> out(n_out);
    const double in_step = from_hz / to_hz;
    for (std::size_t j = 0; j < n_out; ++j) {
        double center = static_cast<double>(j) * in_step;
        long lo = static_cast<long>(std::ceil(center)) - half_taps;
        long hi = static_cast<long>(std::floor(center)) + half_taps;
        double acc = 0.0, wsum = 0.0;
        for (long i = std::max(0l, lo); i <= std::min<long>(hi, static_cast<long>(x.size()) - 1);
             ++i) {
            double d = static_cast<double>(i) - center;
            double s = d == 0.0 ? 1.0
                                : std::sin(2.0 * M_PI * fc * d) / (2.0 * M_PI * fc * d);
            double u = d / static_cast<double>(half_taps);
            double w = 0.42 + 0.5 * std::cos(M_PI * u) + 0.08 * std::cos(2.0 * M_PI * u);
            double tap = s * w;
            acc += tap * x[static_cast<std::size_t>(i)];
            wsum += tap;
        }
        out[j] = wsum != 0.0 ? acc / wsum : 0.0;
    }
    return out;
}

// ---- biquad cascades ------------------------------------------------------------

struct Biquad {
    double b0, b1, b2, a1, a2;  // normalized (a0 = 1)
};

namespace detail {
// Bilinear-transformed 2nd-order section with prewarped corner (RBJ form).
inline Biquad section(double fc, double fs, double q, bool highpass) {
    if (fc <= 0 || fc >= fs / 2.0)
        throw ConfigError("biquad: corner must lie inside (0, fs/2)");
    double w0 = 2.0 * M_PI * fc / fs;
    double c = std::cos(w0);
    double alpha = std::sin(w0) / (2.0 * q);
    double a0 = 1.0 + alpha;
    Biquad s{};
    if (highpass) {
        s.b0 = (1.0 + c) / 2.0 / a0;
        s.b1 = -(1.0 + c) / a0;
        s.b2 = s.b0;
    } else {
        s.b0 = (1.0 - c) / 2.0 / a0;
        s.b1 = (1.0 - c) / a0;
        s.b2 = s.b0;
    }
    s.a1 = -2.0 * c / a0;
    s.a2 = (1.0 - alpha) / a0;
    return s;
}
}  // namespace detail

// Even-order Butterworth as cascaded biquads (analog prototype Q values,
// bilinear transform per section).
inline std::vector<Biquad> butterworth(int order, double fc, double fs, bool highpass) {
    if (order <= 0 || order % 2 != 0) throw ConfigError("butterworth: order must be even");
    std::vector<Biquad> sos;
    int pairs = order / 2;
    for (int k = 0; k < pairs; ++k) {
        double phi = M_PI * (2.0 * k + 1.0) / (2.0 * order);
        double q = 1.0 / (2.0 * std::cos(phi));
        sos.push_back(detail::section(fc, fs, q, highpass));
    }
    return sos;
}

inline Biquad notch(double f0, double fs, double q = 30.0) {
    if (f0 <= 0 || f0 >= fs / 2.0) throw ConfigError("notch: center must lie inside (0, fs/2)");
    double w0 = 2.0 * M_PI * f0 / fs;
    double c = std::cos(w0);
    double alpha = std::sin(w0) / (2.0 * q);
    double a0 = 1.0 + alpha;
    Biquad s{};
    s.b0 = 1.0 / a0;
    s.b1 = -2.0 * c / a0;
    s.b2 = 1.0 / a0;
    s.a1 = -2.0 * c / a0;
    s.a2 = (1.0 - alpha) / a0;
    return s;
}

namespace detail {

// Steady-state DF2T state for a unit-amplitude input (lfilter_zi analogue).
inline std::array<double, 2> biquad_zi(const Biquad& s) {
    double hss = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
    double z2 = s.b2 - s.a2 * hss;
    double z1 = s.b1 - s.a1 * hss + z2;
    return {z1, z2};
}

inline void biquad_apply(const Biquad& s, std::vector<double>& x, double x0_scale) {
    auto zi = biquad_zi(s);
    double z1 = zi[0] * x0_scale, z2 = zi[1] * x0_scale;
    for (double& v : x) {
        double y = s.b0 * v + z1;
        z1 = s.b1 * v - s.a1 * y + z2;
        z2 = s.b2 * v - s.a2 * y;
        v = y;
    }
}

}  // namespace detail

// Single-pass cascade with steady-state initial conditions.
inline std::vector<double> sosfilt(const std::vector<Biquad>& sos, std::vector<double> x) {
    for (const auto& s : sos) detail::biquad_apply(s, x, x.empty() ? 0.0 : x.front());
    return x;
}

// Forward-backward cascade (zero phase) with odd-reflection padding.
inline std::vector<double> filtfilt(const std::vector<Biquad>& sos,
                                    const std::vector<double>& x, std::size_t padlen = 0) {
    if (sos.empty()) return x;
    if (x.size() < 2) return x;
    if (padlen == 0) padlen = 3 * (2 * sos.size() + 1);
    padlen = std::min(padlen, x.size() - 1);

    std::vector<double> ext;
    ext.reserve(x.size() + 2 * padlen);
    for (std::size_t i = padlen; i > 0; --i) ext.push_back(2.0 * x.front() - x[i]);
    ext.insert(ext.end(), x.begin(), x.end());
    for (std::size_t i = 2; i <= padlen + 1; ++i)
        ext.push_back(2.0 * x.back() - x[x.size() - i]);

    for (const auto& s : sos) detail::biquad_apply(s, ext, ext.front());
    std::reverse(ext.begin(), ext.end());
    for (const auto& s : sos) detail::biquad_apply(s, ext, ext.front());
    std::reverse(ext.begin(), ext.end());
    return std::vector<double>(ext.begin() + static_cast<long>(padlen),
                               ext.begin() + static_cast<long>(padlen + x.size()));
}

// ---- modality filter bank ----------------------------------------------------

struct FilterBankConfig {
    double target_hz = 100.0;
    bool native_notch = false;  // apply 60 Hz notch before resampling when
                                // the native rate supports it
    double notch_hz = 60.0;
};

// The per-modality passbands. ECG keeps only the highpass edge; its upper
// band edge would sit above the working Nyquist.
inline std::vector<Biquad> modality_filters(Modality m, double fs) {
    auto bandpass = [&](double lo, double hi) {
        auto sos = butterworth(4, lo, fs, true);
        auto lp = butterworth(4, hi, fs, false);
        sos.insert(sos.end(), lp.begin(), lp.end());
        return sos;
    };
    switch (m) {
        case Modality::EEG: return bandpass(0.3, 40.0);
        case Modality::EOG: return bandpass(0.3, 40.0);
        case Modality::EMG: return butterworth(4, 10.0, fs, true);
        case Modality::ECG: return butterworth(4, 0.3, fs, true);
        case Modality::RESP: return butterworth(4, 15.0, fs, false);
        case Modality::SPO2: return {};
    }
    throw Error("unknown modality");
}

inline std::size_t modality_padlen(Modality m, double fs) {
    // generous padding for the lowest corner in the bank
    switch (m) {
        case Modality::EEG:
        case Modality::EOG:
        case Modality::ECG: return static_cast<std::size_t>(5.0 * fs);
        case Modality::EMG: return static_cast<std::size_t>(1.0 * fs);
        case Modality::RESP: return static_cast<std::size_t>(1.0 * fs);
        case Modality::SPO2: return 0;
    }
    return 0;
}

struct StandardizedChannel {
    std::vector<double> samples;  // target rate, filtered, z-scored
    bool constant = false;        // flagged when the raw channel had ~zero variance
    double raw_mean = 0.0;
    double raw_std = 0.0;
};

// resample -> filter bank -> z-score. Constant channels are flagged and come
// out as all zeros rather than NaN.
inline StandardizedChannel standardize_channel(const std::vector<double>& raw,
                                               double native_hz, Modality kind,
                                               const FilterBankConfig& cfg = {}) {
    if (raw.empty()) throw DataError("standardize_channel: empty input");
    StandardizedChannel out;
    std::vector<double> x = raw;
    if (cfg.native_notch && is_high_rate(kind) && native_hz > 2.0 * cfg.notch_hz) {
        std::vector<Biquad> nf{notch(cfg.notch_hz, native_hz)};
        x = filtfilt(nf, x);
    }
    x = resample(x, native_hz, cfg.target_hz);
    auto bank = modality_filters(kind, cfg.target_hz);
    if (!bank.empty()) x = filtfilt(bank, x, modality_padlen(kind, cfg.target_hz));

    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x.size());
    double sd = std::sqrt(var);
    out.raw_mean = mean;
    out.raw_std = sd;
    if (sd < 1e-8) {
        out.constant = true;
        Warnings::emit("standardize_channel: constant channel (" +
                       std::string(modality_name(kind)) + ")");
        out.samples.assign(x.size(), 0.0);
        return out;
    }
    out.samples.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out.samples[i] = (x[i] - mean) / sd;
    return out;
}

// ---- patches -------------------------------------------------------------------

struct PatchGrid {
    std::size_t patches = 0;
    std::size_t patch_len = 0;
    std::vector<double> data;  // row-major [patches][patch_len]
};

inline PatchGrid patchify(const std::vector<double>& x, std::size_t patch_len = 50) {
    if (patch_len == 0) throw ConfigError("patchify: patch_len must be positive");
    if (x.size() % patch_len != 0)
        throw DataError("patchify: length " + std::to_string(x.size()) +
                        " is not a multiple of patch length " + std::to_string(patch_len));
    PatchGrid g;
    g.patches = x.size() / patch_len;
    g.patch_len = patch_len;
    g.data = x;
    return g;
}

// Centered moving average with edge-shrunk windows. Inputs shorter than the
// window collapse to their mean.
inline std::vector<double> smooth_moving_average(const std::vector<double>& x,
                                                 std::size_t window = 11) {
    if (window == 0 || window % 2 == 0)
        throw ConfigError("smooth_moving_average: window must be odd and positive");
    if (x.size() < window) {
        double mean = 0.0;
        for (double v : x) mean += v;
        if (!x.empty()) mean /= static_cast<double>(x.size());
        return std::vector<double>(x.size(), mean);
    }
    std::size_t half = window / 2;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        std::size_t lo = i >= half ? i - half : 0;
        std::size_t hi = std::min(x.size() - 1, i + half);
        double acc = 0.0;
        for (std::size_t j = lo; j <= hi; ++j) acc += x[j];
        out[i] = acc / static_cast<double>(hi - lo + 1);
    }
    return out;
}

}  // namespace somnus
