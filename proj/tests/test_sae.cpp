#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "latentsteer/common.hpp"
#include "latentsteer/rng.hpp"
#include "latentsteer/sae.hpp"
#include "latentsteer/synthetic.hpp"

using namespace latentsteer;
namespace fs = std::filesystem;

namespace {

SaeModel random_model(size_t d, int expansion, uint32_t k, uint64_t seed) {
    SaeModel m;
    Rng rng(seed);
    size_t n = d * static_cast<size_t>(expansion);
    m.w_enc = Matrix(n, d);
    m.w_dec = Matrix(n, d);
    for (auto& v : m.w_enc.data) v = rng.normal();
    for (size_t i = 0; i < n; ++i) {
        auto row = m.w_dec.row(i);
        for (auto& v : row) v = rng.normal();
        scale(row, 1.0 / norm2(row));
    }
    m.b_dec.assign(d, 0.0);
    m.mu.assign(d, 0.0);
    m.sigma.assign(d, 1.0);
    m.k = k;
    m.expansion = static_cast<uint32_t>(expansion);
    return m;
}

// Activations spanned exactly by `span_k` fixed unit directions.
ActivationSet rank_k_set(size_t d, size_t span_k, size_t n_tokens, uint64_t seed) {
    Rng rng(seed);
    Matrix dirs(span_k, d);
    for (size_t i = 0; i < span_k; ++i) {
        auto row = dirs.row(i);
        for (auto& v : row) v = rng.normal();
        scale(row, 1.0 / norm2(row));
    }
    ActivationSet set;
    set.activations = Matrix(n_tokens, d);
    for (size_t t = 0; t < n_tokens; ++t) {
        auto row = set.activations.row(t);
        for (size_t i = 0; i < span_k; ++i) {
            axpy(std::fabs(rng.normal()) + 0.5, dirs.row(i), row);
        }
        set.tokens.push_back({static_cast<uint32_t>(t), static_cast<uint32_t>(t), -1});
    }
    set.window_subject.resize(n_tokens);
    for (size_t t = 0; t < n_tokens; ++t) set.window_subject[t] = static_cast<uint32_t>(t);
    return set;
}

double model_mse(const ActivationSet& set, const SaeModel& m) { return reconstruction_mse(set, m); }

}  // namespace

TEST_CASE("topk keeps the k largest signed values") {
    std::vector<double> pre = {3, 1, 4, 1, 5};
    SparseCode code = topk_select(pre, 2);
    CHECK(code.indices == std::vector<uint32_t>{2, 4});
    CHECK(code.values == std::vector<double>{4, 5});
}

TEST_CASE("topk with k = N keeps everything") {
    std::vector<double> pre = {-1, 2, 0};
    SparseCode code = topk_select(pre, 3);
    CHECK(code.indices == std::vector<uint32_t>{0, 1, 2});
}

TEST_CASE("topk ties keep the lower index") {
    std::vector<double> pre = {1, 1};
    SparseCode code = topk_select(pre, 1);
    CHECK(code.indices == std::vector<uint32_t>{0});
}

TEST_CASE("topk by magnitude keeps large negatives") {
    std::vector<double> pre = {-5, 1, 2};
    SparseCode by_value = topk_select(pre, 1, false);
    SparseCode by_mag = topk_select(pre, 1, true);
    CHECK(by_value.indices == std::vector<uint32_t>{2});
    CHECK(by_mag.indices == std::vector<uint32_t>{0});
}

TEST_CASE("standardize arithmetic and round-trip") {
    SaeModel m = random_model(2, 1, 1, 0);
    m.mu = {1.0, 1.0};
    m.sigma = {2.0, 4.0};
    std::vector<double> a = {3.0, 5.0};
    std::vector<double> x = standardize(a, m);
    CHECK(x[0] == doctest::Approx(1.0));
    CHECK(x[1] == doctest::Approx(1.0));

    std::vector<double> at_mu = standardize(m.mu, m);
    CHECK(at_mu[0] == 0.0);
    CHECK(at_mu[1] == 0.0);

    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> v = {rng.normal() * 10, rng.normal() * 10};
        std::vector<double> rt = unstandardize(standardize(v, m), m);
        CHECK(std::fabs(rt[0] - v[0]) < 1e-6);
        CHECK(std::fabs(rt[1] - v[1]) < 1e-6);
    }
}

TEST_CASE("decode linearity cases") {
    SaeModel m = random_model(2, 2, 2, 3);
    m.b_dec = {0.5, -0.5};

    SparseCode zero;
    zero.dict_size = 4;
    std::vector<double> out = decode(zero, m);
    CHECK(out[0] == 0.5);
    CHECK(out[1] == -0.5);

    SparseCode unit;
    unit.dict_size = 4;
    unit.indices = {1};
    unit.values = {1.0};
    out = decode(unit, m);
    CHECK(out[0] == doctest::Approx(m.w_dec.at(1, 0) + 0.5));
    CHECK(out[1] == doctest::Approx(m.w_dec.at(1, 1) - 0.5));

    m.b_dec = {0.0, 0.0};
    m.w_dec.at(0, 0) = 0.6;
    m.w_dec.at(0, 1) = 0.8;
    SparseCode two;
    two.dict_size = 4;
    two.indices = {0};
    two.values = {2.0};
    out = decode(two, m);
    CHECK(out[0] == doctest::Approx(1.2));
    CHECK(out[1] == doctest::Approx(1.6));
}

TEST_CASE("exact-k property over random models and inputs") {
    Rng rng(12);
    for (int trial = 0; trial < 40; ++trial) {
        size_t d = 3 + rng.below(12);
        int e = 1 + static_cast<int>(rng.below(4));
        uint32_t k = 1 + static_cast<uint32_t>(rng.below(d * static_cast<size_t>(e)));
        SaeModel m = random_model(d, e, k, 1000 + static_cast<uint64_t>(trial));
        std::vector<double> a(d);
        for (auto& v : a) v = rng.normal();
        SparseCode code = encode(a, m);
        CHECK(code.indices.size() == k);
        for (size_t j = 1; j < code.indices.size(); ++j) {
            CHECK(code.indices[j] > code.indices[j - 1]);
        }
    }
}

TEST_CASE("train rejects k0 > d") {
    ActivationSet set = rank_k_set(8, 4, 64, 5);
    TrainOptions opts;
    opts.k0 = 9;  // k = 9E > N = 8E
    opts.steps = 1;
    CHECK_THROWS_AS(train_sae(set, 4, opts), ConfigError);
}

TEST_CASE("unit-norm decoder rows at every step of a short run") {
    ActivationSet set = rank_k_set(8, 4, 256, 6);
    TrainOptions opts;
    opts.steps = 60;
    opts.batch_size = 32;
    opts.k0 = 2;
    opts.seed = 3;
    opts.checkpoint_every = 1;
    double worst = 0.0;
    opts.checkpoint_hook = [&](const SaeModel& m, int) {
        worst = std::max(worst, m.max_decoder_norm_error());
    };
    train_sae(set, 2, opts);
    CHECK(worst <= 1e-6);
}

TEST_CASE("training reduces reconstruction error on a rank-k dataset") {
    // train and validation tokens drawn from the same planted directions
    ActivationSet all = rank_k_set(8, 4, 640, 7);
    ActivationSet set = all;
    set.activations = Matrix(512, 8);
    set.tokens.assign(all.tokens.begin(), all.tokens.begin() + 512);
    std::copy(all.activations.data.begin(), all.activations.data.begin() + 512 * 8,
              set.activations.data.begin());
    ActivationSet val = all;
    val.activations = Matrix(128, 8);
    val.tokens.assign(all.tokens.begin(), all.tokens.begin() + 128);
    std::copy(all.activations.data.begin() + 512 * 8, all.activations.data.end(),
              val.activations.data.begin());

    TrainOptions opts;
    opts.steps = 4000;
    opts.batch_size = 64;
    opts.k0 = 2;  // k = 4 with E = 2: matches the planted rank
    opts.seed = 4;
    opts.learning_rate = 5e-3;

    SaeModel init;
    opts.checkpoint_every = 10000;  // only step 0 and the final step fire
    opts.checkpoint_hook = [&](const SaeModel& m, int step) {
        if (step == 0) init = m;
    };
    SaeModel trained = train_sae(set, 2, opts);

    double mse_init = model_mse(val, init);
    double mse_end = model_mse(val, trained);
    CHECK(mse_end < mse_init);
    CHECK(mse_end < 1e-3);

    // near-zero loss on rank-k data: substitution approximately restores input
    ActivationSet sub = substitute_reconstruction(set, trained);
    double worst = 0.0;
    double scale_ref = 0.0;
    for (size_t t = 0; t < set.n_tokens(); ++t) {
        for (size_t c = 0; c < set.dim(); ++c) {
            worst = std::max(worst, std::fabs(sub.activations.at(t, c) - set.activations.at(t, c)));
            scale_ref = std::max(scale_ref, std::fabs(set.activations.at(t, c)));
        }
    }
    CHECK(worst < 0.02 * scale_ref);

    // metadata copied verbatim
    CHECK(sub.window_subject == set.window_subject);
    CHECK(sub.concept_labels == set.concept_labels);

    // Measured near-projection behavior: the second substitution moves much
    // less than the first (encode-decode contracts toward its fixed points),
    // and the residual drift stays at the reconstruction-error scale.
    ActivationSet sub2 = substitute_reconstruction(sub, trained);
    double move1 = 0.0, move2 = 0.0;
    for (size_t i = 0; i < sub.activations.data.size(); ++i) {
        double d1 = sub.activations.data[i] - set.activations.data[i];
        double d2 = sub2.activations.data[i] - sub.activations.data[i];
        move1 += d1 * d1;
        move2 += d2 * d2;
    }
    CHECK(move2 < move1);
    CHECK(std::sqrt(move2 / static_cast<double>(sub.activations.data.size())) <
          5.0 * std::sqrt(mse_end));
}

TEST_CASE("training is deterministic under a fixed seed") {
    ActivationSet set = rank_k_set(6, 3, 200, 9);
    TrainOptions opts;
    opts.steps = 150;
    opts.batch_size = 32;
    opts.k0 = 3;
    opts.seed = 17;
    SaeModel a = train_sae(set, 2, opts);
    SaeModel b = train_sae(set, 2, opts);
    CHECK(a.w_enc.data == b.w_enc.data);
    CHECK(a.w_dec.data == b.w_dec.data);
    CHECK(a.b_dec == b.b_dec);

    opts.seed = 18;
    SaeModel c = train_sae(set, 2, opts);
    CHECK(a.w_enc.data != c.w_enc.data);
}

TEST_CASE("resample_dead is a no-op when everything fires") {
    SaeModel m = random_model(4, 2, 2, 31);
    SaeModel before = m;
    std::vector<uint64_t> counts(m.n_features(), 5);
    Matrix candidates(1, 4);
    candidates.at(0, 0) = 1.0;
    CHECK(resample_dead(m, counts, candidates) == 0);
    CHECK(m.w_enc.data == before.w_enc.data);
    CHECK(m.w_dec.data == before.w_dec.data);
}

TEST_CASE("resample_dead touches only the dead feature and renormalizes it") {
    SaeModel m = random_model(4, 2, 2, 32);
    SaeModel before = m;
    std::vector<uint64_t> counts(m.n_features(), 5);
    counts[3] = 0;
    Matrix candidates(1, 4);
    for (size_t c = 0; c < 4; ++c) candidates.at(0, c) = static_cast<double>(c) + 1.0;
    CHECK(resample_dead(m, counts, candidates) == 1);
    for (size_t i = 0; i < m.n_features(); ++i) {
        for (size_t c = 0; c < 4; ++c) {
            if (i == 3) continue;
            CHECK(m.w_dec.at(i, c) == before.w_dec.at(i, c));
            CHECK(m.w_enc.at(i, c) == before.w_enc.at(i, c));
        }
    }
    CHECK(std::fabs(norm2(m.w_dec.row(3)) - 1.0) <= 1e-9);
    // direction matches the candidate example
    double cosine = dot(m.w_dec.row(3), candidates.row(0)) / norm2(candidates.row(0));
    CHECK(cosine == doctest::Approx(1.0));
}

TEST_CASE("substitution requires matching layers") {
    ActivationSet set = rank_k_set(6, 2, 16, 33);
    set.layer_index = 1;
    SaeModel m = random_model(6, 1, 2, 34);
    m.layer_index = 2;
    CHECK_THROWS_WITH_AS(substitute_reconstruction(set, m), doctest::Contains("layer"),
                         std::invalid_argument);
}

TEST_CASE("sae checkpoint round-trips byte-identically after one load") {
    ActivationSet set = rank_k_set(6, 3, 128, 35);
    TrainOptions opts;
    opts.steps = 50;
    opts.batch_size = 16;
    opts.k0 = 2;
    SaeModel m = train_sae(set, 2, opts);
    m.layer_index = 4;

    fs::path dir = fs::temp_directory_path() / "latentsteer_tests";
    fs::create_directories(dir);
    fs::path p1 = dir / "model1.sae";
    fs::path p2 = dir / "model2.sae";
    save_sae(m, p1.string());
    SaeModel loaded = load_sae(p1.string());
    CHECK(loaded.k == m.k);
    CHECK(loaded.expansion == m.expansion);
    CHECK(loaded.layer_index == 4);
    save_sae(loaded, p2.string());
    std::ifstream a(p1, std::ios::binary), b(p2, std::ios::binary);
    std::string bytes_a((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string bytes_b((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(bytes_a == bytes_b);

    fs::path junk = dir / "junk.sae";
    std::ofstream(junk.string()) << "not a checkpoint";
    CHECK_THROWS_AS(load_sae(junk.string()), FormatError);
}
