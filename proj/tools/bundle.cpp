#include "bundle.hpp"

#include "tagnet/errors.hpp"
#include "tagnet/hash.hpp"

#include <unistd.h>

#include <fstream>

#ifndef TAGNET_VERSION
#define TAGNET_VERSION "0.0.0"
#endif

namespace tagnet::cli {

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write " + path.string());
    os << j.dump(2) << '\n';
    if (!os) throw DataError("failed writing " + path.string());
}

nlohmann::json read_json(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open " + path.string());
    try {
        return nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

std::optional<fs::path> Bundle::embedding_path(Encoding e) const {
    const auto& emb = info.at("embeddings");
    const std::string key(encoding_name(e));
    if (!emb.contains(key) || emb[key].is_null()) return std::nullopt;
    return fs::path(emb[key].get<std::string>());
}

EmbeddingSet Bundle::embeddings(const std::vector<Encoding>& needed) const {
    EmbeddingSet set;
    for (auto e : needed) {
        if (e == Encoding::id || set.get(e)) continue;
        const auto path = embedding_path(e);
        if (!path)
            throw UsageError("encoding '" + std::string(encoding_name(e)) +
                             "' needs an embedding dictionary; pass it to ingest with --" +
                             std::string(encoding_name(e)));
        auto dict = std::make_shared<const EmbeddingDictionary>(load_embeddings(*path));
        (e == Encoding::w2v ? set.w2v : set.wnet) = std::move(dict);
    }
    return set;
}

Bundle load_bundle(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("bundle directory " + dir.string() + " does not exist");
    Bundle b;
    b.dir = dir;
    b.info = read_json(dir / "bundle.json");
    const auto labels = read_json(dir / "labels.json").get<std::vector<std::string>>();
    const auto vocab_json = read_json(dir / "vocab.json");
    TagVocabulary vocab(vocab_json.at("tokens").get<std::vector<std::string>>());
    if (vocab.fingerprint() != b.info.at("vocab_fingerprint").get<std::string>())
        throw DataError(dir.string() + ": vocab.json does not match the bundle fingerprint");
    b.raw = read_corpus(dir / "corpus.jsonl", LabelVocabulary(labels));
    auto features = FeatureStore::open(dir / "features");
    b.data = prepare_dataset(b.raw, std::move(features), splits_from_records(b.raw), std::move(vocab));
    return b;
}

Staging::Staging(fs::path out) : out_(std::move(out)) {
    if (out_.empty()) out_ = ".";
    const auto abs = fs::absolute(out_).lexically_normal();
    const auto parent = abs.has_filename() ? abs.parent_path() : abs.parent_path().parent_path();
    fs::create_directories(parent);
    const auto name = abs.has_filename() ? abs.filename().string() : abs.parent_path().filename().string();
    tmp_ = parent / ("." + name + ".staging-" + std::to_string(::getpid()));
    fs::remove_all(tmp_);
    fs::create_directory(tmp_);
}

Staging::~Staging() {
    if (!committed_) {
        std::error_code ec;
        fs::remove_all(tmp_, ec);
    }
}

void Staging::commit() {
    fs::create_directories(out_);
    for (const auto& entry : fs::directory_iterator(tmp_)) {
        const auto target = out_ / entry.path().filename();
        fs::remove_all(target);
        fs::rename(entry.path(), target);
    }
    fs::remove_all(tmp_);
    committed_ = true;
}

void RunManifest::add_input(const fs::path& path) {
    if (!fs::exists(path)) return;
    inputs[fs::absolute(path).lexically_normal().string()] = sha256_file(path);
}

nlohmann::json RunManifest::to_json() const {
    return nlohmann::json{
        {"tool", "tagnet"},
        {"version", TAGNET_VERSION},
        {"command", command},
        {"argv", argv},
        {"config", config},
        {"seeds", seeds},
        {"inputs", inputs},
        {"outputs", outputs},
    };
}

}  // namespace tagnet::cli
