#include "latentsteer/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include "latentsteer/common.hpp"
#include "latentsteer/rng.hpp"

namespace latentsteer {

int band_of_bin(int nu) {
    if (nu <= 4) return 0;
    if (nu <= 8) return 1;
    if (nu <= 13) return 2;
    if (nu <= 30) return 3;
    return 4;
}

double BandProfile::multiplier_for_bin(int nu) const {
    switch (band_of_bin(nu)) {
        case 0: return delta;
        case 1: return theta;
        case 2: return alpha;
        case 3: return beta;
        default: return gamma;
    }
}

void SyntheticGroundTruth::validate() const {
    if (dictionary.rows < 2) throw ConfigError("synthetic dictionary needs d >= 2");
    if (dictionary.cols == 0) throw ConfigError("synthetic dictionary has no columns");
    if (coefficient_sparsity < 1) throw ConfigError("coefficient_sparsity must be >= 1");
    if (static_cast<size_t>(coefficient_sparsity) > dictionary.cols) {
        throw ConfigError("coefficient_sparsity exceeds the number of planted directions");
    }
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
    for (size_t j = 0; j < dictionary.cols; ++j) {
        double n2 = 0.0;
        for (size_t i = 0; i < dictionary.rows; ++i) n2 += dictionary.at(i, j) * dictionary.at(i, j);
        if (std::fabs(std::sqrt(n2) - 1.0) > 1e-6) {
            throw ConfigError("planted dictionary column " + std::to_string(j) + " is not unit-norm");
        }
    }
    for (const auto& [name, features] : concept_feature_map) {
        for (uint32_t f : features) {
            if (f >= dictionary.cols) {
                throw ConfigError("concept '" + name + "' references planted feature " +
                                  std::to_string(f) + " outside [0, M)");
            }
        }
    }
}

SyntheticGroundTruth make_ground_truth(size_t d, size_t m,
                                       const std::map<std::string, std::vector<uint32_t>>& concepts,
                                       uint64_t seed) {
    SyntheticGroundTruth gt;
    gt.dictionary = Matrix(d, m);
    Rng rng = Rng(seed).substream(0xd1c7);
    for (size_t j = 0; j < m; ++j) {
        double n2 = 0.0;
        std::vector<double> col(d);
        for (size_t i = 0; i < d; ++i) {
            col[i] = rng.normal();
            n2 += col[i] * col[i];
        }
        double inv = 1.0 / std::sqrt(n2);
        for (size_t i = 0; i < d; ++i) gt.dictionary.at(i, j) = col[i] * inv;
    }
    gt.concept_feature_map = concepts;
    for (const auto& [name, _] : concepts) gt.band_profile[name] = BandProfile{};
    return gt;
}

namespace {

constexpr char kSpectraMagic[16] = {'L', 'A', 'T', 'E', 'N', 'T', 'S', 'T',
                                    'E', 'E', 'R', '.', 'S', 'P', 'T', 'R'};
constexpr uint32_t kSpectraVersion = 1;

void write_f32_block(std::ostream& os, const Matrix& m) {
    std::vector<float> buf(m.data.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(m.data[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

void read_f32_block(std::istream& is, Matrix& m, const char* field) {
    std::vector<float> buf(m.data.size());
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!is) throw FormatError(std::string("spectra file truncated at ") + field);
    for (size_t i = 0; i < buf.size(); ++i) m.data[i] = buf[i];
}

// Cosine/sine tables for a length-n window at integer frequencies 1..F.
struct DftTables {
    int n = 0;
    int f_bins = 0;
    std::vector<double> cos_t;  // (f_bins) x n
    std::vector<double> sin_t;

    DftTables(int n_samples, int bins) : n(n_samples), f_bins(bins) {
        cos_t.resize(static_cast<size_t>(bins) * n);
        sin_t.resize(static_cast<size_t>(bins) * n);
        const double two_pi = 2.0 * 3.14159265358979323846;
        for (int nu = 1; nu <= bins; ++nu) {
            for (int t = 0; t < n_samples; ++t) {
                double ang = two_pi * nu * t / static_cast<double>(n_samples);
                cos_t[static_cast<size_t>(nu - 1) * n + t] = std::cos(ang);
                sin_t[static_cast<size_t>(nu - 1) * n + t] = std::sin(ang);
            }
        }
    }
};

}  // namespace

std::vector<double> synthesize_mixture(std::span<const double> amp,
                                       std::span<const double> phase, int n_samples) {
    if (amp.size() != phase.size()) {
        throw std::invalid_argument("synthesize_mixture: amp/phase length mismatch");
    }
    const double two_pi = 2.0 * 3.14159265358979323846;
    std::vector<double> signal(static_cast<size_t>(n_samples), 0.0);
    for (int t = 0; t < n_samples; ++t) {
        double acc = 0.0;
        for (size_t nu = 0; nu < amp.size(); ++nu) {
            acc += amp[nu] * std::cos(two_pi * static_cast<double>(nu + 1) * t /
                                          static_cast<double>(n_samples) +
                                      phase[nu]);
        }
        signal[static_cast<size_t>(t)] = acc;
    }
    return signal;
}

void dft_bins(std::span<const double> signal, int f_bins, std::span<double> amp_out,
              std::span<double> cos_out, std::span<double> sin_out) {
    const int n = static_cast<int>(signal.size());
    if (n <= 2 * f_bins) {
        throw std::invalid_argument("dft_bins: signal shorter than twice the bin count");
    }
    const double two_pi = 2.0 * 3.14159265358979323846;
    for (int nu = 1; nu <= f_bins; ++nu) {
        double re = 0.0, im = 0.0;
        for (int t = 0; t < n; ++t) {
            double ang = two_pi * nu * t / static_cast<double>(n);
            re += signal[static_cast<size_t>(t)] * std::cos(ang);
            im -= signal[static_cast<size_t>(t)] * std::sin(ang);
        }
        double amp = 2.0 * std::sqrt(re * re + im * im) / n;
        amp_out[static_cast<size_t>(nu - 1)] = amp;
        if (amp > 1e-12) {
            double inv = 2.0 / (amp * n);
            cos_out[static_cast<size_t>(nu - 1)] = re * inv;
            sin_out[static_cast<size_t>(nu - 1)] = im * inv;
        } else {
            cos_out[static_cast<size_t>(nu - 1)] = 1.0;
            sin_out[static_cast<size_t>(nu - 1)] = 0.0;
        }
    }
}

void write_spectra(const SpectraTargets& spectra, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    os.write(kSpectraMagic, sizeof(kSpectraMagic));
    uint32_t version = kSpectraVersion;
    uint64_t t_count = spectra.amplitudes.rows;
    uint32_t bins = static_cast<uint32_t>(spectra.f_bins);
    os.write(reinterpret_cast<const char*>(&version), sizeof(version));
    os.write(reinterpret_cast<const char*>(&t_count), sizeof(t_count));
    os.write(reinterpret_cast<const char*>(&bins), sizeof(bins));
    write_f32_block(os, spectra.amplitudes);
    write_f32_block(os, spectra.phase_cos);
    write_f32_block(os, spectra.phase_sin);
    if (!os) throw FormatError("short write to '" + path + "'");
}

SpectraTargets load_spectra(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "'");
    char magic[16];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kSpectraMagic, sizeof(magic)) != 0) {
        throw FormatError("missing magic: '" + path + "' is not a .spectra file");
    }
    uint32_t version;
    uint64_t t_count;
    uint32_t bins;
    is.read(reinterpret_cast<char*>(&version), sizeof(version));
    is.read(reinterpret_cast<char*>(&t_count), sizeof(t_count));
    is.read(reinterpret_cast<char*>(&bins), sizeof(bins));
    if (!is) throw FormatError("spectra file truncated in header");
    if (version != kSpectraVersion) {
        throw FormatError("unsupported .spectra version " + std::to_string(version));
    }
    SpectraTargets out;
    out.f_bins = static_cast<int>(bins);
    out.amplitudes = Matrix(t_count, bins);
    out.phase_cos = Matrix(t_count, bins);
    out.phase_sin = Matrix(t_count, bins);
    read_f32_block(is, out.amplitudes, "amplitudes");
    read_f32_block(is, out.phase_cos, "phase_cos");
    read_f32_block(is, out.phase_sin, "phase_sin");
    return out;
}

SyntheticData generate_synthetic(const SyntheticGroundTruth& gt, const SyntheticConfig& cfg) {
    gt.validate();
    if (cfg.n_subjects == 0 || cfg.windows_per_subject == 0 || cfg.tokens_per_window == 0) {
        throw ConfigError("synthetic sizes must be positive");
    }
    const size_t d = gt.dim();
    const size_t m = gt.n_planted();
    const size_t s = static_cast<size_t>(gt.coefficient_sparsity);
    const size_t n_windows = cfg.n_subjects * cfg.windows_per_subject;
    const size_t n_tokens = n_windows * cfg.tokens_per_window;
    const int f_bins = kSpectrumBins;
    const int n_samples = static_cast<int>(cfg.sample_rate_hz);
    if (n_samples <= 2 * f_bins) {
        throw ConfigError("sample_rate_hz must exceed twice the 64 spectrum bins (Nyquist)");
    }

    // A window with every concept positive must still fit its features in s.
    {
        std::set<uint32_t> all;
        for (const auto& [_, feats] : gt.concept_feature_map) all.insert(feats.begin(), feats.end());
        if (all.size() > s) {
            throw ConfigError("coefficient_sparsity is smaller than the union of concept features");
        }
    }

    Rng root(cfg.seed);
    Rng label_rng = root.substream(1);
    Rng coef_rng = root.substream(2);
    Rng noise_rng = root.substream(3);
    Rng band_rng = root.substream(4);
    Rng phase_rng = root.substream(5);
    Rng embed_rng = root.substream(6);

    // Fixed directions along which the 5 log band amplitudes enter the
    // activations, and the dataset-wide phases for preserved mode.
    Matrix band_dirs(kBandCount, d);
    for (int b = 0; b < kBandCount; ++b) {
        auto row = band_dirs.row(b);
        double n2 = 0.0;
        for (size_t i = 0; i < d; ++i) {
            row[i] = embed_rng.normal();
            n2 += row[i] * row[i];
        }
        scale(row, 1.0 / std::sqrt(n2));
    }
    std::vector<double> preserved_phase(f_bins);
    for (int nu = 0; nu < f_bins; ++nu) preserved_phase[nu] = phase_rng.uniform() * 2.0 * 3.14159265358979323846;

    SyntheticData out;
    ActivationSet& set = out.set;
    set.layer_index = cfg.layer_index;
    set.sample_rate_hz = cfg.sample_rate_hz;
    set.activations = Matrix(n_tokens, d);
    set.tokens.reserve(n_tokens);
    set.window_subject.resize(n_windows);

    for (const auto& [name, _] : gt.concept_feature_map) {
        set.concept_labels[name].assign(n_windows, 0);
    }

    SpectraTargets& spectra = out.spectra;
    spectra.f_bins = f_bins;
    spectra.amplitudes = Matrix(n_tokens, f_bins);
    spectra.phase_cos = Matrix(n_tokens, f_bins);
    spectra.phase_sin = Matrix(n_tokens, f_bins);

    DftTables tables(n_samples, f_bins);
    std::vector<double> signal(n_samples);
    std::vector<double> bin_amp(f_bins), bin_phase(f_bins);
    std::vector<uint32_t> active;
    std::vector<uint32_t> filler_pool;

    size_t token_row = 0;
    for (size_t subject = 0; subject < cfg.n_subjects; ++subject) {
        for (size_t wi = 0; wi < cfg.windows_per_subject; ++wi) {
            const uint32_t window = static_cast<uint32_t>(subject * cfg.windows_per_subject + wi);
            set.window_subject[window] = static_cast<uint32_t>(subject);

            // Window labels, then the feature pools they induce.
            std::set<uint32_t> elevated, forbidden;
            for (auto& [name, labels] : set.concept_labels) {
                uint8_t v = static_cast<uint8_t>(label_rng.coin());
                labels[window] = v;
                const auto& feats = gt.concept_feature_map.at(name);
                for (uint32_t f : feats) (v ? elevated : forbidden).insert(f);
            }
            // A feature shared by a positive and a negative concept stays
            // elevated; labels describe activation, not suppression.
            for (uint32_t f : elevated) forbidden.erase(f);

            filler_pool.clear();
            for (uint32_t f = 0; f < m; ++f) {
                if (!elevated.count(f) && !forbidden.count(f)) filler_pool.push_back(f);
            }

            for (size_t ti = 0; ti < cfg.tokens_per_window; ++ti) {
                set.tokens.push_back({window, static_cast<uint32_t>(subject), -1});
                auto act = set.activations.row(token_row);

                active.assign(elevated.begin(), elevated.end());
                // Deterministic partial Fisher-Yates over a scratch copy.
                std::vector<uint32_t> pool = filler_pool;
                while (active.size() < s && !pool.empty()) {
                    size_t pick = coef_rng.below(pool.size());
                    active.push_back(pool[pick]);
                    pool[pick] = pool.back();
                    pool.pop_back();
                }

                for (uint32_t f : active) {
                    double coef = std::fabs(coef_rng.normal()) + 0.5;
                    if (elevated.count(f)) coef *= gt.elevation_gain;
                    for (size_t i = 0; i < d; ++i) act[i] += coef * gt.dictionary.at(i, f);
                }
                if (gt.noise_sigma > 0.0) {
                    for (size_t i = 0; i < d; ++i) act[i] += gt.noise_sigma * noise_rng.normal();
                }

                // Band amplitudes: 1/f base shaped by the positive concepts'
                // profiles plus per-token log jitter.
                double band_mult[kBandCount];
                for (int b = 0; b < kBandCount; ++b) {
                    band_mult[b] = std::exp(gt.band_jitter_sigma * band_rng.normal());
                }
                for (const auto& [name, labels] : set.concept_labels) {
                    if (!labels[window]) continue;
                    auto it = gt.band_profile.find(name);
                    if (it == gt.band_profile.end()) continue;
                    const BandProfile& prof = it->second;
                    band_mult[0] *= prof.delta;
                    band_mult[1] *= prof.theta;
                    band_mult[2] *= prof.alpha;
                    band_mult[3] *= prof.beta;
                    band_mult[4] *= prof.gamma;
                }
                for (int nu = 1; nu <= f_bins; ++nu) {
                    bin_amp[nu - 1] = (10.0 / nu) * band_mult[band_of_bin(nu)];
                    bin_phase[nu - 1] =
                        gt.signal_phase_mode == SyntheticGroundTruth::PhaseMode::preserved
                            ? preserved_phase[nu - 1]
                            : phase_rng.uniform() * 2.0 * 3.14159265358979323846;
                }
                if (gt.spectral_embed_scale != 0.0) {
                    for (int b = 0; b < kBandCount; ++b) {
                        axpy(gt.spectral_embed_scale * std::log(band_mult[b]), band_dirs.row(b), act);
                    }
                }

                // Synthesize the 1 s mixture, then take its DFT as the target.
                std::fill(signal.begin(), signal.end(), 0.0);
                for (int nu = 0; nu < f_bins; ++nu) {
                    double ac = bin_amp[nu] * std::cos(bin_phase[nu]);
                    double as = bin_amp[nu] * std::sin(bin_phase[nu]);
                    const double* ct = &tables.cos_t[static_cast<size_t>(nu) * n_samples];
                    const double* st = &tables.sin_t[static_cast<size_t>(nu) * n_samples];
                    for (int t = 0; t < n_samples; ++t) signal[t] += ac * ct[t] - as * st[t];
                }
                auto amp_row = spectra.amplitudes.row(token_row);
                auto cos_row = spectra.phase_cos.row(token_row);
                auto sin_row = spectra.phase_sin.row(token_row);
                for (int nu = 0; nu < f_bins; ++nu) {
                    const double* ct = &tables.cos_t[static_cast<size_t>(nu) * n_samples];
                    const double* st = &tables.sin_t[static_cast<size_t>(nu) * n_samples];
                    double re = 0.0, im = 0.0;
                    for (int t = 0; t < n_samples; ++t) {
                        re += signal[t] * ct[t];
                        im -= signal[t] * st[t];
                    }
                    double amp = 2.0 * std::sqrt(re * re + im * im) / n_samples;
                    amp_row[nu] = amp;
                    if (amp > 1e-12) {
                        double inv = 2.0 / (amp * n_samples);
                        cos_row[nu] = re * inv;
                        sin_row[nu] = im * inv;
                    } else {
                        cos_row[nu] = 1.0;
                        sin_row[nu] = 0.0;
                    }
                }
                ++token_row;
            }
        }
    }

    set.validate();
    return out;
}

}  // namespace latentsteer
