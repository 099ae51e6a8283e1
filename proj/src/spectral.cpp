#include "latentsteer/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "latentsteer/common.hpp"
#include "latentsteer/metrics.hpp"
#include "latentsteer/rng.hpp"
#include "latentsteer/steering.hpp"
#include "optim.hpp"

namespace latentsteer {

namespace {

double softplus(double v) {
    if (v > 30.0) return v;
    if (v < -30.0) return std::exp(v);
    return std::log1p(std::exp(v));
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

constexpr double kPhaseEps = 1e-12;

struct Forward {
    std::vector<double> h1, h2, out;  // h, h, 3F
};

void forward_pass(const SpectralDecoderModel& sd, std::span<const double> x, Forward& fwd) {
    const size_t h = sd.hidden();
    const size_t n_out = 3 * static_cast<size_t>(sd.f_bins);
    fwd.h1.resize(h);
    fwd.h2.resize(h);
    fwd.out.resize(n_out);
    for (size_t i = 0; i < h; ++i) fwd.h1[i] = std::tanh(sd.b1[i] + dot(sd.w1.row(i), x));
    for (size_t i = 0; i < h; ++i) {
        fwd.h2[i] = std::tanh(sd.b2[i] + dot(sd.w2.row(i), {fwd.h1.data(), h}));
    }
    for (size_t i = 0; i < n_out; ++i) {
        fwd.out[i] = sd.b3[i] + dot(sd.w3.row(i), {fwd.h2.data(), h});
    }
}

void heads(const std::vector<double>& out, int f_bins, std::span<double> amp,
           std::span<double> pc, std::span<double> ps) {
    const size_t f = static_cast<size_t>(f_bins);
    for (size_t nu = 0; nu < f; ++nu) {
        amp[nu] = softplus(out[nu]);
        double u = out[f + nu];
        double v = out[2 * f + nu];
        double r = std::sqrt(u * u + v * v);
        if (r < kPhaseEps) {
            pc[nu] = 1.0;
            ps[nu] = 0.0;
        } else {
            pc[nu] = u / r;
            ps[nu] = v / r;
        }
    }
}

}  // namespace

SpectralDecoderModel init_spectral_decoder(size_t d, int f_bins, int hidden, uint64_t seed) {
    if (hidden <= 0) hidden = static_cast<int>(4 * d);
    SpectralDecoderModel sd;
    sd.f_bins = f_bins;
    const size_t h = static_cast<size_t>(hidden);
    const size_t n_out = 3 * static_cast<size_t>(f_bins);
    sd.w1 = Matrix(h, d);
    sd.w2 = Matrix(h, h);
    sd.w3 = Matrix(n_out, h);
    sd.b1.assign(h, 0.0);
    sd.b2.assign(h, 0.0);
    sd.b3.assign(n_out, 0.0);
    Rng rng(seed);
    auto fill = [&](Matrix& m, double scale_v) {
        for (double& v : m.data) v = scale_v * rng.normal();
    };
    fill(sd.w1, 1.0 / std::sqrt(static_cast<double>(d)));
    fill(sd.w2, 1.0 / std::sqrt(static_cast<double>(h)));
    fill(sd.w3, 1.0 / std::sqrt(static_cast<double>(h)));
    return sd;
}

SpectrumPrediction decode_spectrum(std::span<const double> embedding,
                                   const SpectralDecoderModel& sd) {
    if (embedding.size() != sd.dim()) {
        throw std::invalid_argument("decode_spectrum: embedding dimension mismatch");
    }
    Forward fwd;
    forward_pass(sd, embedding, fwd);
    SpectrumPrediction pred;
    pred.amplitudes.resize(static_cast<size_t>(sd.f_bins));
    pred.phase_cos.resize(static_cast<size_t>(sd.f_bins));
    pred.phase_sin.resize(static_cast<size_t>(sd.f_bins));
    heads(fwd.out, sd.f_bins, pred.amplitudes, pred.phase_cos, pred.phase_sin);
    return pred;
}

double spectral_loss_and_grad(const SpectralDecoderModel& sd, const Matrix& x,
                              const SpectraTargets& targets, std::span<const size_t> rows,
                              double amp_weight, double phase_weight,
                              SpectralDecoderModel* grad_out) {
    if (rows.empty()) throw std::invalid_argument("spectral_loss_and_grad: no rows");
    const size_t h = sd.hidden();
    const size_t d = sd.dim();
    const size_t f = static_cast<size_t>(sd.f_bins);
    const size_t n_out = 3 * f;
    const double inv_bf = 1.0 / (static_cast<double>(rows.size()) * static_cast<double>(f));

    if (grad_out) {
        grad_out->f_bins = sd.f_bins;
        grad_out->w1 = Matrix(h, d);
        grad_out->w2 = Matrix(h, h);
        grad_out->w3 = Matrix(n_out, h);
        grad_out->b1.assign(h, 0.0);
        grad_out->b2.assign(h, 0.0);
        grad_out->b3.assign(n_out, 0.0);
    }

    Forward fwd;
    std::vector<double> amp(f), pc(f), ps(f);
    std::vector<double> d_out(n_out), d_h2(h), d_h1(h);
    double loss = 0.0;

    for (size_t row : rows) {
        forward_pass(sd, x.row(row), fwd);
        heads(fwd.out, sd.f_bins, amp, pc, ps);
        auto ta = targets.amplitudes.row(row);
        auto tc = targets.phase_cos.row(row);
        auto ts = targets.phase_sin.row(row);

        std::fill(d_out.begin(), d_out.end(), 0.0);
        for (size_t nu = 0; nu < f; ++nu) {
            double ea = amp[nu] - ta[nu];
            double ec = pc[nu] - tc[nu];
            double es = ps[nu] - ts[nu];
            loss += inv_bf * (amp_weight * ea * ea + phase_weight * (ec * ec + es * es));
            if (!grad_out) continue;

            d_out[nu] = 2.0 * inv_bf * amp_weight * ea * sigmoid(fwd.out[nu]);

            double u = fwd.out[f + nu];
            double v = fwd.out[2 * f + nu];
            double r2 = u * u + v * v;
            double r = std::sqrt(r2);
            if (r >= kPhaseEps) {
                double dc = 2.0 * inv_bf * phase_weight * ec;
                double ds = 2.0 * inv_bf * phase_weight * es;
                double inv_r3 = 1.0 / (r2 * r);
                d_out[f + nu] = dc * (v * v * inv_r3) + ds * (-u * v * inv_r3);
                d_out[2 * f + nu] = dc * (-u * v * inv_r3) + ds * (u * u * inv_r3);
            }
        }
        if (!grad_out) continue;

        // Backprop o -> h2 -> h1 -> x.
        std::fill(d_h2.begin(), d_h2.end(), 0.0);
        for (size_t i = 0; i < n_out; ++i) {
            if (d_out[i] == 0.0) continue;
            grad_out->b3[i] += d_out[i];
            axpy(d_out[i], {fwd.h2.data(), h}, grad_out->w3.row(i));
            axpy(d_out[i], sd.w3.row(i), {d_h2.data(), h});
        }
        std::fill(d_h1.begin(), d_h1.end(), 0.0);
        for (size_t i = 0; i < h; ++i) {
            double dz = d_h2[i] * (1.0 - fwd.h2[i] * fwd.h2[i]);
            if (dz == 0.0) continue;
            grad_out->b2[i] += dz;
            axpy(dz, {fwd.h1.data(), h}, grad_out->w2.row(i));
            axpy(dz, sd.w2.row(i), {d_h1.data(), h});
        }
        for (size_t i = 0; i < h; ++i) {
            double dz = d_h1[i] * (1.0 - fwd.h1[i] * fwd.h1[i]);
            if (dz == 0.0) continue;
            grad_out->b1[i] += dz;
            axpy(dz, x.row(row), grad_out->w1.row(i));
        }
    }
    return loss;
}

SpectralDecoderModel train_spectral_decoder(const ActivationSet& embeddings,
                                            const SpectraTargets& targets,
                                            const SpectralTrainOptions& opts) {
    if (embeddings.n_tokens() != targets.amplitudes.rows) {
        throw std::invalid_argument(
            "train_spectral_decoder: embeddings and targets token counts are misaligned");
    }
    if (opts.steps < 1 || opts.batch_size < 1) {
        throw ConfigError("train_spectral_decoder: steps and batch_size must be positive");
    }
    SpectralDecoderModel sd =
        init_spectral_decoder(embeddings.dim(), targets.f_bins, opts.hidden, opts.seed);

    const size_t n_params_w1 = sd.w1.data.size();
    const size_t n_params_w2 = sd.w2.data.size();
    const size_t n_params_w3 = sd.w3.data.size();
    AdaState a_w1(n_params_w1), a_w2(n_params_w2), a_w3(n_params_w3);
    AdaState a_b1(sd.b1.size()), a_b2(sd.b2.size()), a_b3(sd.b3.size());

    Rng rng = Rng(opts.seed).substream(0xba7c);
    const size_t n = embeddings.n_tokens();
    std::vector<size_t> batch(static_cast<size_t>(opts.batch_size));
    SpectralDecoderModel grad;
    for (int step = 1; step <= opts.steps; ++step) {
        for (auto& b : batch) b = rng.below(n);
        double loss = spectral_loss_and_grad(sd, embeddings.activations, targets, batch,
                                             opts.amp_weight, opts.phase_weight, &grad);
        if (!std::isfinite(loss)) {
            throw std::runtime_error("train_spectral_decoder: loss became non-finite at step " +
                                     std::to_string(step));
        }
        a_w1.step = a_w2.step = a_w3.step = a_b1.step = a_b2.step = a_b3.step = step;
        a_w1.apply({sd.w1.data.data(), n_params_w1}, {grad.w1.data.data(), n_params_w1},
                   opts.learning_rate);
        a_w2.apply({sd.w2.data.data(), n_params_w2}, {grad.w2.data.data(), n_params_w2},
                   opts.learning_rate);
        a_w3.apply({sd.w3.data.data(), n_params_w3}, {grad.w3.data.data(), n_params_w3},
                   opts.learning_rate);
        a_b1.apply({sd.b1.data(), sd.b1.size()}, {grad.b1.data(), grad.b1.size()},
                   opts.learning_rate);
        a_b2.apply({sd.b2.data(), sd.b2.size()}, {grad.b2.data(), grad.b2.size()},
                   opts.learning_rate);
        a_b3.apply({sd.b3.data(), sd.b3.size()}, {grad.b3.data(), grad.b3.size()},
                   opts.learning_rate);
    }
    return sd;
}

double amplitude_r2(const Matrix& pred, const Matrix& target) {
    if (pred.rows != target.rows || pred.cols != target.cols) {
        throw std::invalid_argument("amplitude_r2: shape mismatch");
    }
    double grand = mean({target.data.data(), target.data.size()});
    double ss_res = 0.0, ss_tot = 0.0;
    for (size_t i = 0; i < target.data.size(); ++i) {
        double e = pred.data[i] - target.data[i];
        double t = target.data[i] - grand;
        ss_res += e * e;
        ss_tot += t * t;
    }
    if (ss_tot <= 0.0) return ss_res <= 0.0 ? 1.0 : 0.0;
    return 1.0 - ss_res / ss_tot;
}

double phase_cosine(const Matrix& pred_cos, const Matrix& pred_sin, const Matrix& target_cos,
                    const Matrix& target_sin) {
    if (pred_cos.data.size() != target_cos.data.size() ||
        pred_sin.data.size() != target_sin.data.size()) {
        throw std::invalid_argument("phase_cosine: shape mismatch");
    }
    double total = 0.0;
    for (size_t i = 0; i < pred_cos.data.size(); ++i) {
        total += pred_cos.data[i] * target_cos.data[i] + pred_sin.data[i] * target_sin.data[i];
    }
    return total / static_cast<double>(pred_cos.data.size());
}

SpectrumBatch decode_spectra(const Matrix& x, std::span<const size_t> rows,
                             const SpectralDecoderModel& sd) {
    SpectrumBatch out;
    const size_t f = static_cast<size_t>(sd.f_bins);
    out.amplitudes = Matrix(rows.size(), f);
    out.phase_cos = Matrix(rows.size(), f);
    out.phase_sin = Matrix(rows.size(), f);
    Forward fwd;
    for (size_t i = 0; i < rows.size(); ++i) {
        forward_pass(sd, x.row(rows[i]), fwd);
        heads(fwd.out, sd.f_bins, out.amplitudes.row(i), out.phase_cos.row(i),
              out.phase_sin.row(i));
    }
    return out;
}

SteeredSpectrum render_steered_spectrum(const ActivationSet& set,
                                        std::span<const uint32_t> source_tokens,
                                        std::span<const uint32_t> target_tokens,
                                        const SaeModel& model, const FeatureRanking& ranking,
                                        const Centroid& centroid, double f,
                                        const SpectralDecoderModel& sd,
                                        const RenderOptions& opts) {
    if (source_tokens.empty() || target_tokens.empty()) {
        throw std::invalid_argument("render_steered_spectrum: empty token pool");
    }
    const size_t bins = static_cast<size_t>(sd.f_bins);
    const size_t n_src = source_tokens.size();
    const size_t n_tgt = target_tokens.size();

    Matrix src_amp(n_src, bins), steered_amp(n_src, bins), tgt_amp(n_tgt, bins);
    for (size_t i = 0; i < n_src; ++i) {
        SparseCode code = encode(set.activations.row(source_tokens[i]), model);
        std::vector<double> clean = unstandardize(decode(code, model), model);
        SpectrumPrediction p = decode_spectrum(clean, sd);
        std::copy(p.amplitudes.begin(), p.amplitudes.end(), src_amp.row(i).begin());

        std::vector<double> zstar = clamp(code, ranking, f, centroid);
        std::vector<double> steered = decode_intervened(zstar, model);
        SpectrumPrediction q = decode_spectrum(steered, sd);
        std::copy(q.amplitudes.begin(), q.amplitudes.end(), steered_amp.row(i).begin());
    }
    for (size_t i = 0; i < n_tgt; ++i) {
        std::vector<double> clean = reconstruct(set.activations.row(target_tokens[i]), model);
        SpectrumPrediction p = decode_spectrum(clean, sd);
        std::copy(p.amplitudes.begin(), p.amplitudes.end(), tgt_amp.row(i).begin());
    }

    SteeredSpectrum out;
    out.bin_hz.resize(bins);
    for (size_t nu = 0; nu < bins; ++nu) out.bin_hz[nu] = static_cast<double>(nu + 1);

    auto summarize = [&](const Matrix& amp, std::vector<double>& mean_out,
                         std::vector<double>& lo_out, std::vector<double>& hi_out,
                         uint64_t series) {
        mean_out.resize(bins);
        lo_out.resize(bins);
        hi_out.resize(bins);
        std::vector<double> column(amp.rows);
        for (size_t nu = 0; nu < bins; ++nu) {
            for (size_t r = 0; r < amp.rows; ++r) column[r] = amp.at(r, nu);
            mean_out[nu] = mean(column);
            BootstrapCi ci = bootstrap_ci(column, opts.level, opts.n_resamples,
                                          Rng(opts.seed).substream(series * 1000 + nu).next());
            lo_out[nu] = ci.lo;
            hi_out[nu] = ci.hi;
        }
    };
    summarize(src_amp, out.source_mean, out.source_lo, out.source_hi, 1);
    summarize(steered_amp, out.steered_mean, out.steered_lo, out.steered_hi, 2);
    summarize(tgt_amp, out.target_mean, out.target_lo, out.target_hi, 3);
    return out;
}

namespace {

constexpr char kSdMagic[16] = {'L', 'A', 'T', 'E', 'N', 'T', 'S', 'T',
                               'E', 'E', 'R', '.', 'S', 'P', 'E', 'C'};
constexpr uint32_t kSdVersion = 1;

void write_f64(std::ostream& os, std::span<const double> v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_f64(std::istream& is, std::span<double> v, const char* field) {
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw FormatError(std::string("spectral checkpoint truncated at ") + field);
}

}  // namespace

void save_spectral_decoder(const SpectralDecoderModel& sd, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    os.write(kSdMagic, sizeof(kSdMagic));
    uint32_t version = kSdVersion;
    uint32_t d = static_cast<uint32_t>(sd.dim());
    uint32_t h = static_cast<uint32_t>(sd.hidden());
    uint32_t f = static_cast<uint32_t>(sd.f_bins);
    os.write(reinterpret_cast<const char*>(&version), sizeof(version));
    os.write(reinterpret_cast<const char*>(&d), sizeof(d));
    os.write(reinterpret_cast<const char*>(&h), sizeof(h));
    os.write(reinterpret_cast<const char*>(&f), sizeof(f));
    write_f64(os, sd.w1.data);
    write_f64(os, sd.b1);
    write_f64(os, sd.w2.data);
    write_f64(os, sd.b2);
    write_f64(os, sd.w3.data);
    write_f64(os, sd.b3);
    if (!os) throw FormatError("short write to '" + path + "'");
}

SpectralDecoderModel load_spectral_decoder(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "'");
    char magic[16];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kSdMagic, sizeof(magic)) != 0) {
        throw FormatError("missing magic: '" + path + "' is not a spectral decoder checkpoint");
    }
    uint32_t version, d, h, f;
    is.read(reinterpret_cast<char*>(&version), sizeof(version));
    is.read(reinterpret_cast<char*>(&d), sizeof(d));
    is.read(reinterpret_cast<char*>(&h), sizeof(h));
    is.read(reinterpret_cast<char*>(&f), sizeof(f));
    if (!is) throw FormatError("spectral checkpoint truncated in header");
    if (version != kSdVersion) {
        throw FormatError("unsupported spectral checkpoint version " + std::to_string(version));
    }
    SpectralDecoderModel sd;
    sd.f_bins = static_cast<int>(f);
    sd.w1 = Matrix(h, d);
    sd.w2 = Matrix(h, h);
    sd.w3 = Matrix(3 * static_cast<size_t>(f), h);
    sd.b1.assign(h, 0.0);
    sd.b2.assign(h, 0.0);
    sd.b3.assign(3 * static_cast<size_t>(f), 0.0);
    read_f64(is, sd.w1.data, "w1");
    read_f64(is, sd.b1, "b1");
    read_f64(is, sd.w2.data, "w2");
    read_f64(is, sd.b2, "b2");
    read_f64(is, sd.w3.data, "w3");
    read_f64(is, sd.b3, "b3");
    return sd;
}

}  // namespace latentsteer
