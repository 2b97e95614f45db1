#include "tractscope/manifest.hpp"

#include <chrono>
#include <ctime>
#include <fstream>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "tractscope/strutil.hpp"

namespace tractscope {

using nlohmann::json;

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return "missing";
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof(buf));
        EVP_DigestUpdate(ctx, buf, static_cast<size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    std::string hex;
    for (unsigned int i = 0; i < len; ++i) hex += strfmt("%02x", digest[i]);
    return hex;
}

std::string utc_now() {
    auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    return stamp;
}

void write_run_manifest(const RunManifest& manifest, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    json inputs = json::object();
    for (const auto& path : manifest.inputs) inputs[path.string()] = sha256_file(path);
    json doc{{"tool", kToolVersion},
             {"command_line", manifest.command_line},
             {"seed", manifest.seed},
             {"config", manifest.config},
             {"inputs", inputs},
             {"started_utc", manifest.started_utc},
             {"finished_utc", manifest.finished_utc}};
    write_file(out_dir / "run_manifest.json", doc.dump(1) + "\n");
}

}  // namespace tractscope
