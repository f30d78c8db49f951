#pragma once

#include <chrono>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "udcvr/kv.hpp"

namespace udcvr {

inline constexpr const char* kVersion = "0.1.0";

/// Record of one command-line run, written beside its outputs as run_manifest.txt.
struct RunManifest {
    std::string command;
    std::vector<std::pair<std::string, std::string>> flags;  // every flag, including defaults
    std::uint64_t seed = 0;
    std::vector<std::string> inputs, outputs;
    double duration_s = 0.0;

    KeyValues to_kv() const {
        KeyValues kv;
        kv.set("command", command);
        kv.set("version", kVersion);
        kv.set("seed", seed);
        for (const auto& [k, v] : flags) kv.set("flag." + k, v);
        for (std::size_t i = 0; i < inputs.size(); ++i) kv.set("input." + std::to_string(i), inputs[i]);
        for (std::size_t i = 0; i < outputs.size(); ++i) kv.set("output." + std::to_string(i), outputs[i]);
        kv.set("duration_s", duration_s);
        return kv;
    }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        to_kv().save(dir / "run_manifest.txt");
    }
};

}  // namespace udcvr
