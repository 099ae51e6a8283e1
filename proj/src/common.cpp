#include "latentsteer/common.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <thread>

namespace latentsteer {

namespace {

std::string join_missing(const std::vector<std::string>& missing) {
    std::string out;
    for (const auto& m : missing) {
        if (!out.empty()) out += ", ";
        out += m;
    }
    return out;
}

}  // namespace

MissingArtifactError::MissingArtifactError(std::string stage_name,
                                           std::vector<std::string> missing_paths)
    : std::runtime_error("stage '" + stage_name + "' is missing prerequisite artifacts: " +
                         join_missing(missing_paths)),
      stage(std::move(stage_name)),
      missing(std::move(missing_paths)) {}

uint64_t fnv1a64(const void* data, size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < len; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

int worker_count(size_t n_tasks) {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    unsigned cap = hw;
    if (const char* env = std::getenv("LATENT_STEER_THREADS")) {
        long v = std::strtol(env, nullptr, 10);
        if (v >= 1) cap = static_cast<unsigned>(v);
    }
    return static_cast<int>(std::min<size_t>(n_tasks, std::min(hw, cap)));
}

void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
    if (n == 0) return;
    int workers = worker_count(n);
    if (workers <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (size_t i = static_cast<size_t>(w); i < n; i += static_cast<size_t>(workers)) {
                fn(i);
            }
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace latentsteer
