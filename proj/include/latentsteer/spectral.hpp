#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "latentsteer/activations.hpp"
#include "latentsteer/matrix.hpp"
#include "latentsteer/sae.hpp"
#include "latentsteer/steering.hpp"
#include "latentsteer/synthetic.hpp"

namespace latentsteer {

// Shallow MLP d -> h -> h -> 3F (tanh). The first F outputs pass through
// softplus (amplitudes); the remaining 2F form per-bin (cos, sin) pairs that
// are normalized to unit length. Weight matrices are row-major with one row
// per output unit.
struct SpectralDecoderModel {
    Matrix w1, w2, w3;
    std::vector<double> b1, b2, b3;
    int f_bins = kSpectrumBins;

    size_t dim() const { return w1.cols; }
    size_t hidden() const { return w1.rows; }
};

struct SpectrumPrediction {
    std::vector<double> amplitudes;  // F, non-negative
    std::vector<double> phase_cos;   // F, unit pairs with phase_sin
    std::vector<double> phase_sin;
};

SpectralDecoderModel init_spectral_decoder(size_t d, int f_bins, int hidden, uint64_t seed);

SpectrumPrediction decode_spectrum(std::span<const double> embedding,
                                   const SpectralDecoderModel& sd);

// Mean (over rows and bins) loss on the given rows plus analytic parameter
// gradients into grad_out (same shapes as the model) when non-null. The
// gradient-check tests difference this against central finite differences.
double spectral_loss_and_grad(const SpectralDecoderModel& sd, const Matrix& x,
                              const SpectraTargets& targets, std::span<const size_t> rows,
                              double amp_weight, double phase_weight,
                              SpectralDecoderModel* grad_out);

struct SpectralTrainOptions {
    int steps = 1500;
    int batch_size = 96;
    double learning_rate = 1e-3;
    uint64_t seed = 0;
    int hidden = 0;  // 0 = 4 * d
    double amp_weight = 1.0;
    double phase_weight = 1.0;
};

SpectralDecoderModel train_spectral_decoder(const ActivationSet& embeddings,
                                            const SpectraTargets& targets,
                                            const SpectralTrainOptions& opts);

// R^2 pooled over all bins and rows.
double amplitude_r2(const Matrix& pred, const Matrix& target);

// Mean over rows and bins of cos(phi_hat - phi) via the unit-pair dot product.
double phase_cosine(const Matrix& pred_cos, const Matrix& pred_sin, const Matrix& target_cos,
                    const Matrix& target_sin);

// Batched decode of selected rows: amplitudes/cos/sin matrices (rows x F).
struct SpectrumBatch {
    Matrix amplitudes;
    Matrix phase_cos;
    Matrix phase_sin;
};
SpectrumBatch decode_spectra(const Matrix& x, std::span<const size_t> rows,
                             const SpectralDecoderModel& sd);

struct SteeredSpectrum {
    std::vector<double> bin_hz;  // 1..F (bin nu covers [nu-1, nu) Hz)
    std::vector<double> source_mean, source_lo, source_hi;
    std::vector<double> steered_mean, steered_lo, steered_hi;
    std::vector<double> target_mean, target_lo, target_hi;
};

struct RenderOptions {
    int n_resamples = 1000;
    double level = 0.95;
    uint64_t seed = 0;
};

// Clean source reconstructions, clamped source reconstructions, and clean
// target-pool reconstructions decoded through sd; per-bin means with
// percentile-bootstrap bands.
SteeredSpectrum render_steered_spectrum(const ActivationSet& set,
                                        std::span<const uint32_t> source_tokens,
                                        std::span<const uint32_t> target_tokens,
                                        const SaeModel& model, const FeatureRanking& ranking,
                                        const Centroid& centroid, double f,
                                        const SpectralDecoderModel& sd,
                                        const RenderOptions& opts = {});

void save_spectral_decoder(const SpectralDecoderModel& sd, const std::string& path);
SpectralDecoderModel load_spectral_decoder(const std::string& path);

}  // namespace latentsteer
