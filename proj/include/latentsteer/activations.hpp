#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "latentsteer/matrix.hpp"

namespace latentsteer {

struct TokenMeta {
    uint32_t window_id = 0;
    uint32_t subject_id = 0;
    int32_t channel_id = -1;  // -1 = channel-averaged token
};

// Token activations for one encoder layer plus window/subject/label
// bookkeeping. Immutable after load; safe to share read-only across workers.
//
// On-disk `.acts` layout (little-endian):
//   bytes  0..15   magic "LATENTSTEER.ACTS"
//   u32            version (currently 1)
//   u64            T (token count)
//   u32            d (embedding dimension)
//   i32            layer index
//   f32[T*d]       activations, row-major
//   u64            metadata byte length
//   bytes          UTF-8 metadata block: `key<TAB>value` lines, keys [a-z_]+
//                    sample_rate_hz  <float>
//                    n_windows       <int>
//                    window          <window_id> <subject_id>      (per window)
//                    token           <window_id> <channel_id>      (per token, row order)
//                    label           <concept> <window_id> <0|1>   (per window per concept)
struct ActivationSet {
    Matrix activations;  // T x d
    int layer_index = 0;
    double sample_rate_hz = 256.0;
    std::vector<TokenMeta> tokens;                               // size T
    std::vector<uint32_t> window_subject;                        // window_id -> subject_id
    std::map<std::string, std::vector<uint8_t>> concept_labels;  // name -> per-window 0/1

    size_t n_tokens() const { return activations.rows; }
    size_t dim() const { return activations.cols; }
    size_t n_windows() const { return window_subject.size(); }

    // Throws FormatError if any structural invariant is broken.
    void validate() const;

    std::vector<uint32_t> windows_with_label(const std::string& concept_name, uint8_t value) const;
    std::vector<uint32_t> tokens_of_windows(const std::vector<uint32_t>& windows) const;
    // Window label replicated onto each token, in row order.
    std::vector<uint8_t> token_labels(const std::string& concept_name) const;
    const std::vector<uint8_t>& labels_for(const std::string& concept_name) const;
};

void write_activations(const ActivationSet& set, const std::string& path);
ActivationSet load_activations(const std::string& path);

enum class Split : uint8_t { train = 0, val = 1, test = 2 };
const char* split_name(Split s);

struct SplitAssignment {
    double fractions[3] = {0.8, 0.1, 0.1};
    uint64_t seed = 0;
    std::map<uint32_t, Split> assignment;  // subject -> split

    std::vector<uint32_t> subjects_in(Split s) const;
    std::vector<uint32_t> windows_in(const ActivationSet& set, Split s) const;
};

// Group-disjoint subject split with largest-remainder rounding of the subject
// counts. Deterministic in (subject set, fractions, seed).
SplitAssignment split_by_subject(const ActivationSet& set, double train_frac, double val_frac,
                                 double test_frac, uint64_t seed);

}  // namespace latentsteer
