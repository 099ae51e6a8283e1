#include "latentsteer/sae.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "latentsteer/common.hpp"
#include "latentsteer/rng.hpp"
#include "optim.hpp"

namespace latentsteer {

std::vector<double> SparseCode::densify() const {
    std::vector<double> out(dict_size, 0.0);
    for (size_t j = 0; j < indices.size(); ++j) out[indices[j]] = values[j];
    return out;
}

double SaeModel::max_decoder_norm_error() const {
    double worst = 0.0;
    for (size_t i = 0; i < w_dec.rows; ++i) {
        worst = std::max(worst, std::fabs(norm2(w_dec.row(i)) - 1.0));
    }
    return worst;
}

std::vector<double> standardize(std::span<const double> a, const SaeModel& model) {
    if (a.size() != model.dim()) throw std::invalid_argument("standardize: dimension mismatch");
    std::vector<double> out(a.size());
    for (size_t i = 0; i < a.size(); ++i) out[i] = (a[i] - model.mu[i]) / model.sigma[i];
    return out;
}

std::vector<double> unstandardize(std::span<const double> x, const SaeModel& model) {
    if (x.size() != model.dim()) throw std::invalid_argument("unstandardize: dimension mismatch");
    std::vector<double> out(x.size());
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * model.sigma[i] + model.mu[i];
    return out;
}

SparseCode topk_select(std::span<const double> pre, uint32_t k, bool by_magnitude) {
    const size_t n = pre.size();
    if (k > n) throw std::invalid_argument("topk_select: k exceeds the dictionary size");
    std::vector<uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    auto key = [&](uint32_t i) { return by_magnitude ? std::fabs(pre[i]) : pre[i]; };
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](uint32_t a, uint32_t b) {
        double ka = key(a), kb = key(b);
        if (ka != kb) return ka > kb;
        return a < b;  // ties keep the lower index
    });
    order.resize(k);
    std::sort(order.begin(), order.end());
    SparseCode code;
    code.dict_size = static_cast<uint32_t>(n);
    code.indices = std::move(order);
    code.values.resize(k);
    for (size_t j = 0; j < code.indices.size(); ++j) code.values[j] = pre[code.indices[j]];
    return code;
}

SparseCode encode(std::span<const double> a, const SaeModel& model) {
    std::vector<double> x = standardize(a, model);
    std::vector<double> pre(model.n_features());
    for (size_t i = 0; i < pre.size(); ++i) pre[i] = dot(model.w_enc.row(i), x);
    return topk_select(pre, model.k, false);
}

std::vector<double> decode(const SparseCode& z, const SaeModel& model) {
    if (z.dict_size != model.n_features()) {
        throw std::invalid_argument("decode: code dictionary size does not match the model");
    }
    std::vector<double> out(model.b_dec.begin(), model.b_dec.end());
    for (size_t j = 0; j < z.indices.size(); ++j) {
        axpy(z.values[j], model.w_dec.row(z.indices[j]), out);
    }
    return out;
}

std::vector<double> reconstruct(std::span<const double> a, const SaeModel& model) {
    return unstandardize(decode(encode(a, model), model), model);
}

double reconstruction_mse(const ActivationSet& set, const SaeModel& model) {
    double total = 0.0;
    for (size_t r = 0; r < set.n_tokens(); ++r) {
        std::vector<double> x = standardize(set.activations.row(r), model);
        std::vector<double> xhat = decode(encode(set.activations.row(r), model), model);
        for (size_t i = 0; i < x.size(); ++i) {
            double e = xhat[i] - x[i];
            total += e * e;
        }
    }
    return total / static_cast<double>(set.n_tokens() * set.dim());
}

std::vector<double> firing_rates(const ActivationSet& set, const SaeModel& model) {
    std::vector<double> rates(model.n_features(), 0.0);
    for (size_t r = 0; r < set.n_tokens(); ++r) {
        SparseCode code = encode(set.activations.row(r), model);
        for (uint32_t i : code.indices) rates[i] += 1.0;
    }
    for (double& v : rates) v /= static_cast<double>(set.n_tokens());
    return rates;
}

namespace {

void renormalize_rows(Matrix& m) {
    for (size_t i = 0; i < m.rows; ++i) {
        auto row = m.row(i);
        double n = norm2(row);
        if (n > 0.0) scale(row, 1.0 / n);
    }
}

}  // namespace

int resample_dead(SaeModel& model, std::vector<uint64_t>& firing_counts,
                  const Matrix& candidates) {
    if (firing_counts.size() != model.n_features()) {
        throw std::invalid_argument("resample_dead: firing count length mismatch");
    }
    // Encoder rows of live features set the scale for re-initialized rows.
    double live_norm = 0.0;
    size_t live = 0;
    for (size_t i = 0; i < model.n_features(); ++i) {
        if (firing_counts[i] > 0) {
            live_norm += norm2(model.w_enc.row(i));
            ++live;
        }
    }
    double enc_scale = live ? 0.2 * live_norm / static_cast<double>(live) : 1.0;

    int resampled = 0;
    for (size_t i = 0; i < model.n_features(); ++i) {
        if (firing_counts[i] != 0) continue;
        if (candidates.rows == 0) break;
        size_t row = std::min<size_t>(static_cast<size_t>(resampled), candidates.rows - 1);
        auto src = candidates.row(row);
        double n = norm2(src);
        if (n <= 0.0) continue;
        auto dec = model.w_dec.row(i);
        auto enc = model.w_enc.row(i);
        for (size_t c = 0; c < src.size(); ++c) {
            dec[c] = src[c] / n;
            enc[c] = enc_scale * src[c] / n;
        }
        firing_counts[i] = 0;
        ++resampled;
    }
    return resampled;
}

SaeModel train_sae(const ActivationSet& train, int expansion, const TrainOptions& opts) {
    if (train.n_tokens() == 0) throw std::invalid_argument("train_sae: empty training set");
    if (expansion < 1) throw ConfigError("train_sae: expansion must be >= 1");
    if (opts.k0 < 1 || opts.steps < 0 || opts.batch_size < 1 || opts.resample_interval < 1) {
        throw ConfigError("train_sae: options must be positive");
    }
    const size_t d = train.dim();
    const size_t n_features = d * static_cast<size_t>(expansion);
    if (n_features > (1u << 24)) throw ConfigError("train_sae: dictionary size overflow guard");
    const uint32_t k = static_cast<uint32_t>(opts.k0) * static_cast<uint32_t>(expansion);
    if (k > n_features) {
        throw ConfigError("train_sae: k = k0*E exceeds N = d*E (requires k0 <= d)");
    }

    SaeModel model;
    model.k = k;
    model.expansion = static_cast<uint32_t>(expansion);
    model.layer_index = train.layer_index;
    model.mu.assign(d, 0.0);
    model.sigma.assign(d, 1.0);

    const size_t n_rows = train.n_tokens();
    for (size_t r = 0; r < n_rows; ++r) {
        auto row = train.activations.row(r);
        for (size_t c = 0; c < d; ++c) model.mu[c] += row[c];
    }
    for (size_t c = 0; c < d; ++c) model.mu[c] /= static_cast<double>(n_rows);
    std::vector<double> var(d, 0.0);
    for (size_t r = 0; r < n_rows; ++r) {
        auto row = train.activations.row(r);
        for (size_t c = 0; c < d; ++c) {
            double dlt = row[c] - model.mu[c];
            var[c] += dlt * dlt;
        }
    }
    for (size_t c = 0; c < d; ++c) {
        model.sigma[c] = std::max(std::sqrt(var[c] / static_cast<double>(n_rows)), 1e-6);
    }

    // Standardize once.
    Matrix xs(n_rows, d);
    for (size_t r = 0; r < n_rows; ++r) {
        auto src = train.activations.row(r);
        auto dst = xs.row(r);
        for (size_t c = 0; c < d; ++c) dst[c] = (src[c] - model.mu[c]) / model.sigma[c];
    }

    Rng rng(opts.seed);
    model.w_dec = Matrix(n_features, d);
    for (size_t i = 0; i < n_features; ++i) {
        auto row = model.w_dec.row(i);
        for (size_t c = 0; c < d; ++c) row[c] = rng.normal();
        scale(row, 1.0 / norm2(row));
    }
    model.w_enc = model.w_dec;  // tied at init
    model.b_dec.assign(d, 0.0);

    if (opts.checkpoint_every > 0 && opts.checkpoint_hook) opts.checkpoint_hook(model, 0);

    AdaState ada_enc(n_features * d), ada_dec(n_features * d), ada_b(d);
    Matrix g_enc(n_features, d), g_dec(n_features, d);
    std::vector<double> g_b(d);
    std::vector<uint64_t> firing(n_features, 0);
    // (error, row) of the worst-reconstructed example per batch in the
    // current resample window; worst-first at resample time.
    std::vector<std::pair<double, uint32_t>> window_worst;

    std::vector<double> pre(n_features), xhat(d), err(d);

    for (int step = 1; step <= opts.steps; ++step) {
        std::fill(g_enc.data.begin(), g_enc.data.end(), 0.0);
        std::fill(g_dec.data.begin(), g_dec.data.end(), 0.0);
        std::fill(g_b.begin(), g_b.end(), 0.0);

        double loss = 0.0;
        double batch_worst = -1.0;
        uint32_t batch_worst_row = 0;
        for (int b = 0; b < opts.batch_size; ++b) {
            uint32_t r = static_cast<uint32_t>(rng.below(n_rows));
            auto x = xs.row(r);
            for (size_t i = 0; i < n_features; ++i) pre[i] = dot(model.w_enc.row(i), x);
            SparseCode code = topk_select(pre, k, opts.topk_by_magnitude);

            std::copy(model.b_dec.begin(), model.b_dec.end(), xhat.begin());
            for (size_t j = 0; j < code.indices.size(); ++j) {
                axpy(code.values[j], model.w_dec.row(code.indices[j]), {xhat.data(), d});
            }
            double ex_err = 0.0;
            for (size_t c = 0; c < d; ++c) {
                err[c] = xhat[c] - x[c];
                ex_err += err[c] * err[c];
            }
            loss += ex_err;
            if (ex_err > batch_worst) {
                batch_worst = ex_err;
                batch_worst_row = r;
            }

            for (size_t c = 0; c < d; ++c) g_b[c] += err[c];
            for (size_t j = 0; j < code.indices.size(); ++j) {
                uint32_t i = code.indices[j];
                firing[i] += 1;
                axpy(code.values[j], {err.data(), d}, g_dec.row(i));
                double dz = dot(model.w_dec.row(i), {err.data(), d});
                axpy(dz, x, g_enc.row(i));
            }
        }
        loss /= static_cast<double>(opts.batch_size) * static_cast<double>(d);
        if (!std::isfinite(loss)) {
            throw std::runtime_error("train_sae: loss became non-finite at step " +
                                     std::to_string(step) + " (lr=" +
                                     std::to_string(opts.learning_rate) + ")");
        }
        window_worst.emplace_back(batch_worst, batch_worst_row);

        double gscale = 2.0 / (static_cast<double>(opts.batch_size) * static_cast<double>(d));
        scale({g_enc.data.data(), g_enc.data.size()}, gscale);
        scale({g_dec.data.data(), g_dec.data.size()}, gscale);
        scale({g_b.data(), d}, gscale);

        // Project decoder gradients onto the tangent space of the unit sphere
        // so the norm constraint does not fight the reconstruction gradient.
        for (size_t i = 0; i < n_features; ++i) {
            auto w = model.w_dec.row(i);
            auto g = g_dec.row(i);
            double along = dot(g, w);
            axpy(-along, w, g);
        }

        ada_enc.step = ada_dec.step = ada_b.step = step;
        ada_enc.apply({model.w_enc.data.data(), model.w_enc.data.size()},
                      {g_enc.data.data(), g_enc.data.size()}, opts.learning_rate);
        ada_dec.apply({model.w_dec.data.data(), model.w_dec.data.size()},
                      {g_dec.data.data(), g_dec.data.size()}, opts.learning_rate);
        ada_b.apply({model.b_dec.data(), d}, {g_b.data(), d}, opts.learning_rate);
        renormalize_rows(model.w_dec);

        if (step % opts.resample_interval == 0) {
            std::sort(window_worst.begin(), window_worst.end(),
                      [](const auto& a, const auto& b) {
                          if (a.first != b.first) return a.first > b.first;
                          return a.second < b.second;
                      });
            Matrix candidates(0, d);
            std::vector<uint32_t> used;
            for (const auto& [e, r] : window_worst) {
                if (std::find(used.begin(), used.end(), r) != used.end()) continue;
                used.push_back(r);
                if (used.size() >= 32) break;
            }
            candidates = Matrix(used.size(), d);
            for (size_t j = 0; j < used.size(); ++j) {
                auto src = xs.row(used[j]);
                std::copy(src.begin(), src.end(), candidates.row(j).begin());
            }
            int n_resampled = resample_dead(model, firing, candidates);
            if (n_resampled > 0) {
                // Fresh optimizer state for the re-initialized rows; after the
                // call, firing == 0 marks exactly the dead/resampled features.
                for (size_t i = 0; i < n_features; ++i) {
                    if (firing[i] != 0) continue;
                    std::fill(ada_enc.v.begin() + static_cast<long>(i * d),
                              ada_enc.v.begin() + static_cast<long>((i + 1) * d), 0.0);
                    std::fill(ada_dec.v.begin() + static_cast<long>(i * d),
                              ada_dec.v.begin() + static_cast<long>((i + 1) * d), 0.0);
                }
            }
            std::fill(firing.begin(), firing.end(), 0);
            window_worst.clear();
        }

        if (opts.checkpoint_every > 0 && opts.checkpoint_hook &&
            (step % opts.checkpoint_every == 0 || step == opts.steps)) {
            opts.checkpoint_hook(model, step);
        }
    }
    return model;
}

ActivationSet substitute_reconstruction(const ActivationSet& set, const SaeModel& model) {
    if (set.layer_index != model.layer_index) {
        throw std::invalid_argument("substitute_reconstruction: layer mismatch (set layer " +
                                    std::to_string(set.layer_index) + ", model layer " +
                                    std::to_string(model.layer_index) + ")");
    }
    ActivationSet out = set;  // metadata copied verbatim
    for (size_t r = 0; r < set.n_tokens(); ++r) {
        std::vector<double> rec = reconstruct(set.activations.row(r), model);
        std::copy(rec.begin(), rec.end(), out.activations.row(r).begin());
    }
    return out;
}

namespace {

constexpr char kSaeMagic[16] = {'L', 'A', 'T', 'E', 'N', 'T', 'S', 'T',
                                'E', 'E', 'R', '.', 'S', 'A', 'E', 'M'};
constexpr uint32_t kSaeVersion = 1;

void write_f32(std::ostream& os, std::span<const double> v) {
    std::vector<float> buf(v.size());
    for (size_t i = 0; i < v.size(); ++i) buf[i] = static_cast<float>(v[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

void read_f32(std::istream& is, std::span<double> v, const char* field) {
    std::vector<float> buf(v.size());
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!is) throw FormatError(std::string("sae checkpoint truncated at ") + field);
    for (size_t i = 0; i < v.size(); ++i) v[i] = buf[i];
}

}  // namespace

void save_sae(const SaeModel& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + path + "' for writing");
    os.write(kSaeMagic, sizeof(kSaeMagic));
    uint32_t version = kSaeVersion;
    uint32_t d = static_cast<uint32_t>(model.dim());
    uint32_t n = static_cast<uint32_t>(model.n_features());
    int32_t layer = model.layer_index;
    os.write(reinterpret_cast<const char*>(&version), sizeof(version));
    os.write(reinterpret_cast<const char*>(&d), sizeof(d));
    os.write(reinterpret_cast<const char*>(&n), sizeof(n));
    os.write(reinterpret_cast<const char*>(&model.k), sizeof(model.k));
    os.write(reinterpret_cast<const char*>(&model.expansion), sizeof(model.expansion));
    os.write(reinterpret_cast<const char*>(&layer), sizeof(layer));
    write_f32(os, model.w_enc.data);
    write_f32(os, model.w_dec.data);
    write_f32(os, model.b_dec);
    write_f32(os, model.mu);
    write_f32(os, model.sigma);
    if (!os) throw FormatError("short write to '" + path + "'");
}

SaeModel load_sae(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open '" + path + "'");
    char magic[16];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kSaeMagic, sizeof(magic)) != 0) {
        throw FormatError("missing magic: '" + path + "' is not an .sae checkpoint");
    }
    uint32_t version, d, n;
    int32_t layer;
    SaeModel model;
    is.read(reinterpret_cast<char*>(&version), sizeof(version));
    is.read(reinterpret_cast<char*>(&d), sizeof(d));
    is.read(reinterpret_cast<char*>(&n), sizeof(n));
    is.read(reinterpret_cast<char*>(&model.k), sizeof(model.k));
    is.read(reinterpret_cast<char*>(&model.expansion), sizeof(model.expansion));
    is.read(reinterpret_cast<char*>(&layer), sizeof(layer));
    if (!is) throw FormatError("sae checkpoint truncated in header");
    if (version != kSaeVersion) {
        throw FormatError("unsupported .sae version " + std::to_string(version));
    }
    if (d == 0 || n == 0 || model.k > n || n != d * model.expansion) {
        throw FormatError("sae checkpoint header is inconsistent");
    }
    model.layer_index = layer;
    model.w_enc = Matrix(n, d);
    model.w_dec = Matrix(n, d);
    model.b_dec.assign(d, 0.0);
    model.mu.assign(d, 0.0);
    model.sigma.assign(d, 1.0);
    read_f32(is, model.w_enc.data, "w_enc");
    read_f32(is, model.w_dec.data, "w_dec");
    read_f32(is, model.b_dec, "b_dec");
    read_f32(is, model.mu, "mu");
    read_f32(is, model.sigma, "sigma");
    for (double s : model.sigma) {
        if (!(s > 0.0)) throw FormatError("sae checkpoint has non-positive sigma");
    }
    return model;
}

}  // namespace latentsteer
