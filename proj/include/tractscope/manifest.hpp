#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace tractscope {

inline constexpr const char* kToolVersion = "tractscope 0.1.0";

// Reproducibility stamp written as run_manifest.json into every output
// directory: the command line, the resolved option values, the seed, SHA-256
// digests of the inputs, tool version and wall-clock timestamps.
struct RunManifest {
    std::string command_line;
    std::map<std::string, std::string> config;
    uint64_t seed = 0;
    std::vector<std::filesystem::path> inputs;
    std::string started_utc;
    std::string finished_utc;
};

std::string sha256_file(const std::filesystem::path& path);
std::string utc_now();
void write_run_manifest(const RunManifest& manifest, const std::filesystem::path& out_dir);

}  // namespace tractscope
