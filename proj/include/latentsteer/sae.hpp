#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "latentsteer/activations.hpp"
#include "latentsteer/matrix.hpp"

namespace latentsteer {

// Exactly k firing features; indices strictly ascending.
struct SparseCode {
    std::vector<uint32_t> indices;
    std::vector<double> values;
    uint32_t dict_size = 0;  // N

    std::vector<double> densify() const;
};

// TopK sparse autoencoder for one (layer, expansion) cell.
//
// w_dec is stored transposed relative to the usual d x N convention: row i is
// the i-th unit-norm decoder direction (a d-vector). w_enc row i is the
// matching encoder weight row.
struct SaeModel {
    Matrix w_enc;  // N x d
    Matrix w_dec;  // N x d, row i = decoder direction w_i
    std::vector<double> b_dec;  // d
    std::vector<double> mu;     // d
    std::vector<double> sigma;  // d, strictly positive
    uint32_t k = 0;
    uint32_t expansion = 1;  // E; N = d * E
    int layer_index = 0;

    size_t dim() const { return w_dec.cols; }
    size_t n_features() const { return w_dec.rows; }
    std::span<const double> decoder_direction(size_t i) const { return w_dec.row(i); }

    // Largest |norm - 1| over decoder directions.
    double max_decoder_norm_error() const;
};

struct TrainOptions {
    int steps = 2000;
    int batch_size = 256;
    double learning_rate = 1e-3;
    int resample_interval = 500;  // dead features resampled every this many steps
    uint64_t seed = 0;
    int k0 = 8;  // k = k0 * E
    bool topk_by_magnitude = false;  // default keeps the largest signed values

    // When checkpoint_every > 0 the hook runs at step 0 (after init), every
    // checkpoint_every steps, and at the final step.
    int checkpoint_every = 0;
    std::function<void(const SaeModel&, int step)> checkpoint_hook;
};

std::vector<double> standardize(std::span<const double> a, const SaeModel& model);
std::vector<double> unstandardize(std::span<const double> x, const SaeModel& model);

// TopK over the given pre-activations; ties keep the lower index.
SparseCode topk_select(std::span<const double> pre, uint32_t k, bool by_magnitude = false);

SparseCode encode(std::span<const double> a, const SaeModel& model);

// W_dec z + b_dec, in standardized space.
std::vector<double> decode(const SparseCode& z, const SaeModel& model);

// unstandardize(decode(encode(a))).
std::vector<double> reconstruct(std::span<const double> a, const SaeModel& model);

// Mean squared reconstruction error on standardized activations.
double reconstruction_mse(const ActivationSet& set, const SaeModel& model);

// Fraction of tokens on which each feature fires.
std::vector<double> firing_rates(const ActivationSet& set, const SaeModel& model);

// Minibatch training of the reconstruction MSE on standardized activations.
// mu/sigma come from `train` only; decoder rows are renormalized to unit norm
// after every update; dead features are resampled every resample_interval
// steps. Deterministic given opts.seed.
SaeModel train_sae(const ActivationSet& train, int expansion, const TrainOptions& opts);

// Re-initializes every feature with a zero firing count to the direction of a
// high-reconstruction-error example (candidates rows, worst first; the j-th
// dead feature takes row min(j, rows-1)). Resampled firing counts reset.
// Returns the number of features resampled.
int resample_dead(SaeModel& model, std::vector<uint64_t>& firing_counts,
                  const Matrix& candidates);

// New ActivationSet whose rows are the unstandardized reconstructions;
// metadata copied verbatim.
ActivationSet substitute_reconstruction(const ActivationSet& set, const SaeModel& model);

void save_sae(const SaeModel& model, const std::string& path);
SaeModel load_sae(const std::string& path);

}  // namespace latentsteer
