#pragma once

// Run manifests: what produced an artifact and how to produce it again.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace pivot::cli {

struct RunManifest {
    std::string command;
    std::vector<std::string> argv;
    nlohmann::json config = nlohmann::json::object(); // fully resolved
    std::uint64_t seed = 0;
    std::map<std::string, std::string> inputs;        // role -> path
    std::map<std::string, std::string> outputs;       // role -> path
    std::map<std::string, std::string> checksums;     // path relative to the artifact -> FNV-1a hex
    nlohmann::json extra = nlohmann::json::object();  // command-specific accounting
    std::string timestamp;                            // UTC, ISO 8601

    nlohmann::json to_json() const;
};

RunManifest read_manifest(const std::filesystem::path& path);

inline constexpr const char* kDirManifest = "run_manifest.json";

/// Manifest path for a file artifact: "<file>.manifest.json".
std::filesystem::path manifest_for_file(const std::filesystem::path& file);

/// Checksums of every regular file under `dir`, keyed by relative path with
/// '/' separators. The run manifest itself is skipped.
std::map<std::string, std::string> checksum_tree(const std::filesystem::path& dir);

/// One FNV-1a over the sorted (path, checksum) pairs.
std::string tree_digest(const std::map<std::string, std::string>& checksums);

std::string utc_timestamp();

/// Fills checksums from `dir`, stamps the time and writes run_manifest.json.
void finish_dir_manifest(RunManifest& m, const std::filesystem::path& dir);

/// Output directory built under a sibling staging name and moved into place
/// only after its manifest is written. Removed on destruction if not committed.
class StagedDir {
public:
    explicit StagedDir(std::filesystem::path target);
    ~StagedDir();
    StagedDir(const StagedDir&) = delete;
    StagedDir& operator=(const StagedDir&) = delete;

    const std::filesystem::path& path() const { return staging_; }
    const std::filesystem::path& target() const { return target_; }
    /// Writes the manifest into the staging dir, then replaces the target.
    void commit(RunManifest& m);

private:
    std::filesystem::path target_;
    std::filesystem::path staging_;
    bool committed_ = false;
};

/// Writes a file artifact and its manifest; the artifact is removed again if
/// the manifest cannot be written.
void write_file_with_manifest(const std::filesystem::path& file, const std::string& bytes, RunManifest& m);

} // namespace pivot::cli
