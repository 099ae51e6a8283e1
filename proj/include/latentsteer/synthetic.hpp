#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "latentsteer/activations.hpp"
#include "latentsteer/matrix.hpp"

namespace latentsteer {

// Per-band amplitude multipliers over the 64 x 1 Hz spectrum bins. Bin nu
// covers [nu-1, nu) Hz; the bands are delta 1..4, theta 5..8, alpha 9..13,
// beta 14..30, gamma 31..64.
struct BandProfile {
    double delta = 1.0;
    double theta = 1.0;
    double alpha = 1.0;
    double beta = 1.0;
    double gamma = 1.0;

    double multiplier_for_bin(int nu) const;
};

constexpr int kSpectrumBins = 64;
constexpr int kBandCount = 5;

// Which of the 5 bands a 1-based bin index belongs to.
int band_of_bin(int nu);

struct SyntheticGroundTruth {
    Matrix dictionary;  // d x M, unit-norm columns (planted directions)
    std::map<std::string, std::vector<uint32_t>> concept_feature_map;
    int coefficient_sparsity = 4;  // s: planted active features per token
    double noise_sigma = 0.0;
    std::map<std::string, BandProfile> band_profile;
    enum class PhaseMode { preserved, randomized };
    PhaseMode signal_phase_mode = PhaseMode::preserved;

    // Generator magnitudes; see generate_synthetic.
    double elevation_gain = 3.0;         // coefficient boost on label-positive features
    double spectral_embed_scale = 0.5;   // strength of the log-band component in activations
    double band_jitter_sigma = 0.25;     // per-token log-amplitude jitter per band

    size_t dim() const { return dictionary.rows; }
    size_t n_planted() const { return dictionary.cols; }
    void validate() const;
};

// Random unit-norm dictionary plus the given concept->feature assignment.
SyntheticGroundTruth make_ground_truth(size_t d, size_t m,
                                       const std::map<std::string, std::vector<uint32_t>>& concepts,
                                       uint64_t seed);

// Per-token target spectra: F amplitudes and a unit (cos, sin) phase pair per
// bin, obtained by DFT of the generated sinusoid mixture.
struct SpectraTargets {
    int f_bins = kSpectrumBins;
    Matrix amplitudes;  // T x F
    Matrix phase_cos;   // T x F
    Matrix phase_sin;   // T x F
};

void write_spectra(const SpectraTargets& spectra, const std::string& path);
SpectraTargets load_spectra(const std::string& path);

struct SyntheticConfig {
    size_t n_subjects = 10;
    size_t windows_per_subject = 10;
    size_t tokens_per_window = 20;
    uint64_t seed = 0;
    int layer_index = 1;
    double sample_rate_hz = 256.0;
};

struct SyntheticData {
    ActivationSet set;
    SpectraTargets spectra;
};

// sum_nu amp[nu] * cos(2 pi (nu+1) t / n + phase[nu]) over n samples (bin
// nu+1 in Hz, 1-based).
std::vector<double> synthesize_mixture(std::span<const double> amp,
                                       std::span<const double> phase, int n_samples);

// DFT of `signal` at integer bins 1..f_bins: per-bin amplitude and unit
// (cos, sin) phase pair. Exact for mixtures of integer-frequency tones below
// Nyquist.
void dft_bins(std::span<const double> signal, int f_bins, std::span<double> amp_out,
              std::span<double> cos_out, std::span<double> sin_out);

// Every token is a positive combination of `s` planted directions plus
// Gaussian noise. A window's concept label is 1 iff that concept's planted
// features fire (with coefficients scaled by elevation_gain) in its tokens;
// label-0 windows never activate them. Log band amplitudes are additionally
// mixed into the activations along fixed random directions so the target
// spectra are recoverable from the embeddings.
SyntheticData generate_synthetic(const SyntheticGroundTruth& gt, const SyntheticConfig& cfg);

}  // namespace latentsteer
