#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace latentsteer {

// Malformed or truncated files, bad magic, broken invariants on load.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid or inconsistent configuration. Maps to CLI exit code 3.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A stage was invoked before its prerequisite artifacts exist. Maps to CLI
// exit code 2; `missing` lists the absent paths.
class MissingArtifactError : public std::runtime_error {
public:
    MissingArtifactError(std::string stage_name, std::vector<std::string> missing_paths);
    std::string stage;
    std::vector<std::string> missing;
};

uint64_t fnv1a64(const void* data, size_t len);
uint64_t fnv1a64(const std::string& s);
std::string hex64(uint64_t v);

// Worker cap: min(n_tasks, hardware threads, LATENT_STEER_THREADS if set).
int worker_count(size_t n_tasks);

// Runs fn(i) for every i in [0, n). Each index must write only its own
// output slot so the result is independent of the thread count.
void parallel_for(size_t n, const std::function<void(size_t)>& fn);

}  // namespace latentsteer
