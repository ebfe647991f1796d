#pragma once

#include "tagnet/corpus.hpp"
#include "tagnet/encoding.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace tagnet::cli {

namespace fs = std::filesystem;

/// A validated corpus directory written by `ingest`:
///   corpus.jsonl        normalized records with their split
///   features.{feat,ids} feature rows
///   vocab.json          tag vocabulary built on the train split
///   labels.json         label vocabulary
///   ingest_report.json
///   bundle.json         tau, fingerprints, embedding dictionary locations
struct Bundle {
    fs::path dir;
    Corpus raw;
    Dataset data;
    nlohmann::json info;

    std::optional<fs::path> embedding_path(Encoding e) const;
    /// Loads the dictionaries the given encodings need (id needs none).
    EmbeddingSet embeddings(const std::vector<Encoding>& needed) const;
};

Bundle load_bundle(const fs::path& dir);

/// Files are written into a sibling staging directory and moved into `out` only on
/// commit, so a failing command leaves no partial output behind.
class Staging {
public:
    explicit Staging(fs::path out);
    ~Staging();
    Staging(const Staging&) = delete;
    Staging& operator=(const Staging&) = delete;

    fs::path file(const std::string& name) const { return tmp_ / name; }
    const fs::path& out() const { return out_; }
    void commit();

private:
    fs::path out_;
    fs::path tmp_;
    bool committed_ = false;
};

/// Everything needed to repeat a run: command line, resolved settings, seeds and the
/// SHA-256 of every input file.
struct RunManifest {
    std::string command;
    std::vector<std::string> argv;
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json seeds = nlohmann::json::object();
    std::map<std::string, std::string> inputs;  // path -> sha256
    std::vector<std::string> outputs;

    void add_input(const fs::path& path);
    nlohmann::json to_json() const;
};

void write_json(const fs::path& path, const nlohmann::json& j);
nlohmann::json read_json(const fs::path& path);

}  // namespace tagnet::cli
