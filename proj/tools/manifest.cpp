#include "manifest.hpp"

#include "pivot/common.hpp"
#include "pivot/fileio.hpp"
#include "pivot/rng.hpp"

#include <chrono>
#include <ctime>
#include <unistd.h>

namespace pivot::cli {

namespace fs = std::filesystem;
using nlohmann::json;

json RunManifest::to_json() const {
    return {{"command", command}, {"argv", argv},       {"config", config},       {"seed", seed},
            {"inputs", inputs},   {"outputs", outputs}, {"checksums", checksums}, {"extra", extra},
            {"timestamp", timestamp}};
}

RunManifest read_manifest(const fs::path& path) {
    RunManifest m;
    try {
        const json j = json::parse(read_file(path));
        m.command = j.at("command").get<std::string>();
        m.argv = j.at("argv").get<std::vector<std::string>>();
        m.config = j.at("config");
        m.seed = j.at("seed").get<std::uint64_t>();
        m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
        m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
        m.checksums = j.at("checksums").get<std::map<std::string, std::string>>();
        m.extra = j.value("extra", json::object());
        m.timestamp = j.at("timestamp").get<std::string>();
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return m;
}

fs::path manifest_for_file(const fs::path& file) {
    fs::path p = file;
    p += ".manifest.json";
    return p;
}

std::map<std::string, std::string> checksum_tree(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        const std::string rel = fs::relative(entry.path(), dir).generic_string();
        if (rel == kDirManifest) continue;
        out[rel] = file_checksum(entry.path());
    }
    return out;
}

std::string tree_digest(const std::map<std::string, std::string>& checksums) {
    std::uint64_t h = fnv1a("");
    for (const auto& [path, sum] : checksums) {
        h = fnv1a(path, h);
        h = fnv1a("\n", h);
        h = fnv1a(sum, h);
        h = fnv1a("\n", h);
    }
    return hex64(h);
}

std::string utc_timestamp() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void finish_dir_manifest(RunManifest& m, const fs::path& dir) {
    m.checksums = checksum_tree(dir);
    m.timestamp = utc_timestamp();
    write_file_atomic(dir / kDirManifest, m.to_json().dump(2) + "\n");
}

StagedDir::StagedDir(fs::path target) : target_(std::move(target)) {
    if (target_.empty()) throw ValidationError("output directory must not be empty");
    fs::path name = target_.filename();
    if (name.empty()) name = target_.parent_path().filename();
    staging_ = target_.parent_path() / ("." + name.string() + ".staging." + std::to_string(::getpid()));
    fs::remove_all(staging_);
    fs::create_directories(staging_);
}

StagedDir::~StagedDir() {
    if (committed_) return;
    std::error_code ec;
    fs::remove_all(staging_, ec);
}

void StagedDir::commit(RunManifest& m) {
    finish_dir_manifest(m, staging_);
    if (fs::exists(target_)) fs::remove_all(target_);
    fs::rename(staging_, target_);
    committed_ = true;
}

void write_file_with_manifest(const fs::path& file, const std::string& bytes, RunManifest& m) {
    write_file_atomic(file, bytes);
    try {
        m.checksums = {{file.filename().string(), file_checksum(file)}};
        m.timestamp = utc_timestamp();
        write_file_atomic(manifest_for_file(file), m.to_json().dump(2) + "\n");
    } catch (...) {
        std::error_code ec;
        fs::remove(file, ec);
        throw;
    }
}

} // namespace pivot::cli
