#pragma once

#include <memory>
#include <string>

namespace latentsteer {

// Read-only HTTP facade over a completed run directory. All heavy artifacts
// load once at startup; requests only do linear algebra at one fraction.
class Service {
public:
    explicit Service(std::string run_dir);
    ~Service();
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    // Binds and serves on a background thread. port 0 picks an ephemeral
    // port; returns the bound port.
    int start(const std::string& host, int port);
    void stop();
    int port() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

struct ServiceOptions {
    std::string run_dir = "run";
    std::string host = "127.0.0.1";
    int port = 8080;
};

// Blocking entry point for the CLI `serve` subcommand.
int run_service(const ServiceOptions& opts);

}  // namespace latentsteer
