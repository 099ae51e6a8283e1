#include "latentsteer/service.hpp"

#include <atomic>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <thread>

#include "httplib.h"
#include "json.hpp"

#include "latentsteer/activations.hpp"
#include "latentsteer/common.hpp"
#include "latentsteer/sae.hpp"
#include "latentsteer/spectral.hpp"
#include "latentsteer/steering.hpp"

namespace latentsteer {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot read '" + path.string() + "'");
    json j;
    is >> j;
    return j;
}

struct SteerArtifact {
    int layer = 0;
    int expansion = 0;
    std::string concept_name;
    std::string offtarget;
    json summary;  // the full stored sweep summary
    FeatureRanking ranking;
    Centroid centroid;
    LogisticModel frozen_target, frozen_offtarget;
    std::vector<uint32_t> eval_windows;
};

struct RunState {
    std::string config_hash;
    std::vector<int> layers;
    int expansion = 0;  // E*
    std::set<std::string> concepts;
    std::map<int, ActivationSet> acts;
    std::map<int, SaeModel> sae;
    std::map<int, SpectralDecoderModel> sd;
    std::map<std::pair<int, std::string>, SteerArtifact> steer;
};

// Finds the stage artifact with the given prefix/suffix; the config-hash
// infix comes from the manifest.
fs::path artifact_path(const fs::path& stage_dir, const std::string& name) {
    return stage_dir / name;
}

std::unique_ptr<RunState> load_run(const std::string& run_dir) {
    auto state = std::make_unique<RunState>();
    fs::path run(run_dir);
    json acts_manifest = load_json_file(run / "acts" / "manifest.json");
    state->config_hash = acts_manifest.at("config_hash").get<std::string>();
    std::string h8 = state->config_hash.substr(0, 8);

    json op = load_json_file(run / "concepts" / ("operating_point_" + h8 + ".json"));
    state->expansion = op.at("expansion").get<int>();

    json steer_manifest = load_json_file(run / "steering" / "manifest.json");
    for (const auto& name : steer_manifest.at("artifacts")) {
        std::string s = name.get<std::string>();
        if (s.rfind("summary_", 0) != 0) continue;
        json summary = load_json_file(artifact_path(run / "steering", s));
        SteerArtifact art;
        art.layer = summary.at("layer").get<int>();
        art.expansion = summary.at("expansion").get<int>();
        art.concept_name = summary.at("concept").get<std::string>();
        art.offtarget = summary.at("offtarget").get<std::string>();
        art.ranking.order = summary.at("ranking_order").get<std::vector<uint32_t>>();
        art.ranking.scores.assign(art.ranking.order.size(), 0.0);
        art.centroid.values = summary.at("centroid").get<std::vector<double>>();
        art.centroid.source_count = summary.at("centroid_source_count").get<size_t>();
        art.frozen_target.weights =
            summary.at("frozen_target").at("weights").get<std::vector<double>>();
        art.frozen_target.bias = summary.at("frozen_target").at("bias").get<double>();
        art.frozen_offtarget.weights =
            summary.at("frozen_offtarget").at("weights").get<std::vector<double>>();
        art.frozen_offtarget.bias = summary.at("frozen_offtarget").at("bias").get<double>();
        art.eval_windows = summary.at("eval_windows").get<std::vector<uint32_t>>();
        art.summary = std::move(summary);
        state->concepts.insert(art.concept_name);
        if (!std::count(state->layers.begin(), state->layers.end(), art.layer)) {
            state->layers.push_back(art.layer);
        }
        state->steer[{art.layer, art.concept_name}] = std::move(art);
    }
    std::sort(state->layers.begin(), state->layers.end());

    for (int layer : state->layers) {
        state->acts[layer] =
            load_activations((run / "acts" / ("layer" + std::to_string(layer) + "_" + h8 + ".acts"))
                                 .string());
        state->sae[layer] = load_sae((run / "sae" /
                                      ("sae_l" + std::to_string(layer) + "_e" +
                                       std::to_string(state->expansion) + "_" + h8 + ".sae"))
                                         .string());
        state->sd[layer] = load_spectral_decoder(
            (run / "spectral" / ("sd_l" + std::to_string(layer) + "_" + h8 + ".sd")).string());
    }
    return state;
}

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, json{{"error", message}});
}

}  // namespace

struct Service::Impl {
    std::string run_dir;
    httplib::Server server;
    std::thread worker;
    std::unique_ptr<RunState> state;
    std::atomic<bool> ready{false};
    int bound_port = 0;

    void route() {
        server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                    {"Access-Control-Allow-Headers", "Content-Type"},
                                    {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
        server.Options(".*", [](const httplib::Request&, httplib::Response& res) {
            res.status = 204;
        });

        server.Get("/api/run", [this](const httplib::Request&, httplib::Response& res) {
            if (!ready) return send_error(res, 503, "service is still loading");
            json body;
            body["config_hash"] = state->config_hash;
            body["layers"] = state->layers;
            body["expansions"] = {state->expansion};
            body["concepts"] = std::vector<std::string>(state->concepts.begin(),
                                                        state->concepts.end());
            send_json(res, 200, body);
        });

        server.Get("/api/sweep", [this](const httplib::Request& req, httplib::Response& res) {
            if (!ready) return send_error(res, 503, "service is still loading");
            if (!req.has_param("layer") || !req.has_param("expansion") ||
                !req.has_param("concept")) {
                return send_error(res, 422, "layer, expansion and concept are required");
            }
            int layer, expansion;
            try {
                layer = std::stoi(req.get_param_value("layer"));
                expansion = std::stoi(req.get_param_value("expansion"));
            } catch (const std::exception&) {
                return send_error(res, 422, "layer and expansion must be integers");
            }
            std::string concept_name = req.get_param_value("concept");
            auto it = state->steer.find({layer, concept_name});
            if (it == state->steer.end() || expansion != state->expansion) {
                return send_error(res, 404, "no sweep artifact for (layer, expansion, concept)");
            }
            send_json(res, 200, it->second.summary);
        });

        server.Post("/api/steer", [this](const httplib::Request& req, httplib::Response& res) {
            if (!ready) return send_error(res, 503, "service is still loading");
            json body = json::parse(req.body, nullptr, false);
            if (body.is_discarded() || !body.is_object()) {
                return send_error(res, 422, "request body must be a JSON object");
            }
            for (const char* key : {"layer", "expansion", "concept", "offtarget", "fraction"}) {
                if (!body.contains(key)) {
                    return send_error(res, 422, std::string("missing field '") + key + "'");
                }
            }
            if (!body["layer"].is_number_integer() || !body["expansion"].is_number_integer() ||
                !body["fraction"].is_number() || !body["concept"].is_string() ||
                !body["offtarget"].is_string()) {
                return send_error(res, 422, "malformed field types");
            }
            int layer = body["layer"].get<int>();
            int expansion = body["expansion"].get<int>();
            std::string concept_name = body["concept"].get<std::string>();
            std::string offtarget = body["offtarget"].get<std::string>();
            double fraction = body["fraction"].get<double>();
            fraction = std::min(1.0, std::max(0.0, fraction));

            auto it = state->steer.find({layer, concept_name});
            if (it == state->steer.end() || expansion != state->expansion ||
                it->second.offtarget != offtarget) {
                return send_error(res, 404, "no steering artifact for the requested selection");
            }
            const SteerArtifact& art = it->second;
            const ActivationSet& set = state->acts.at(layer);
            const SaeModel& model = state->sae.at(layer);
            const SpectralDecoderModel& sd = state->sd.at(layer);

            SweepPoint point = evaluate_sweep_point(set, model, art.ranking.order, art.centroid,
                                                    fraction, art.frozen_target,
                                                    art.frozen_offtarget, art.concept_name,
                                                    art.offtarget, art.eval_windows);

            // Spectrum panel: steered source vs target pools on eval windows.
            const auto& labels = set.labels_for(art.concept_name);
            std::set<uint32_t> eval_set(art.eval_windows.begin(), art.eval_windows.end());
            std::vector<uint32_t> source_tokens, target_tokens;
            for (size_t t = 0; t < set.n_tokens(); ++t) {
                uint32_t w = set.tokens[t].window_id;
                if (!eval_set.count(w)) continue;
                (labels[w] ? source_tokens : target_tokens).push_back(static_cast<uint32_t>(t));
            }
            const size_t cap = 400;
            auto shrink = [&](std::vector<uint32_t>& v) {
                if (v.size() <= cap) return;
                std::vector<uint32_t> out;
                double step = static_cast<double>(v.size()) / static_cast<double>(cap);
                for (size_t i = 0; i < cap; ++i) out.push_back(v[static_cast<size_t>(i * step)]);
                v = std::move(out);
            };
            shrink(source_tokens);
            shrink(target_tokens);
            RenderOptions ropts;
            ropts.n_resamples = 300;
            ropts.seed = fnv1a64(art.concept_name) ^ static_cast<uint64_t>(layer);
            SteeredSpectrum spec = render_steered_spectrum(set, source_tokens, target_tokens,
                                                           model, art.ranking, art.centroid,
                                                           fraction, sd, ropts);

            json out;
            out["layer"] = layer;
            out["expansion"] = expansion;
            out["concept"] = concept_name;
            out["offtarget"] = offtarget;
            out["f"] = fraction;
            out["target_auroc"] = point.target_auroc;
            out["offtarget_auroc"] = point.offtarget_auroc;
            out["spectra"] = {{"bin_hz", spec.bin_hz},
                              {"source_mean", spec.source_mean},
                              {"steered_mean", spec.steered_mean},
                              {"target_mean", spec.target_mean},
                              {"lo", spec.target_lo},
                              {"hi", spec.target_hi},
                              {"steered_lo", spec.steered_lo},
                              {"steered_hi", spec.steered_hi}};
            send_json(res, 200, out);
        });
    }
};

Service::Service(std::string run_dir) : impl_(std::make_unique<Impl>()) {
    impl_->run_dir = std::move(run_dir);
    impl_->route();
}

Service::~Service() { stop(); }

int Service::start(const std::string& host, int port) {
    impl_->state = load_run(impl_->run_dir);
    impl_->ready = true;

    if (port == 0) {
        impl_->bound_port = impl_->server.bind_to_any_port(host);
    } else {
        if (!impl_->server.bind_to_port(host, port)) {
            throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
        }
        impl_->bound_port = port;
    }
    impl_->worker = std::thread([this] { impl_->server.listen_after_bind(); });
    impl_->server.wait_until_ready();
    return impl_->bound_port;
}

void Service::stop() {
    if (impl_ && impl_->worker.joinable()) {
        impl_->server.stop();
        impl_->worker.join();
    }
}

int Service::port() const { return impl_->bound_port; }

int run_service(const ServiceOptions& opts) {
    Service service(opts.run_dir);
    int port = service.start(opts.host, opts.port);
    std::fprintf(stderr, "serving run '%s' on http://%s:%d\n", opts.run_dir.c_str(),
                 opts.host.c_str(), port);
    // Blocks until interrupted.
    static std::atomic<bool> stop_flag{false};
    std::signal(SIGINT, [](int) { stop_flag = true; });
    std::signal(SIGTERM, [](int) { stop_flag = true; });
    while (!stop_flag) {
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
    }
    service.stop();
    return 0;
}

}  // namespace latentsteer
