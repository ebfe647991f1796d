#pragma once

#include "tagnet/corpus.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tagnet {

/// Sparse form of a binary tag vector: strictly increasing set-bit indices, all < tau.
struct BinaryTagVector {
    std::vector<std::uint32_t> indices;
    std::size_t tau = 0;

    std::size_t popcount() const { return indices.size(); }
    bool operator==(const BinaryTagVector&) const = default;
};

using SemanticVector = Eigen::VectorXd;

/// Metadata encodings: raw binary vectors or one of two embedding dictionaries.
enum class Encoding : std::uint8_t { id, w2v, wnet };

std::string_view encoding_name(Encoding e);
Encoding parse_encoding(std::string_view name);

/// Token -> fixed-length 32-bit vector map.
class EmbeddingDictionary {
public:
    EmbeddingDictionary() = default;
    explicit EmbeddingDictionary(std::size_t dim) : dim_(dim) {}

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return tokens_.size(); }
    /// Replaces an existing entry (returns false in that case).
    bool insert(const std::string& token, std::span<const float> vector);
    std::optional<std::span<const float>> find(std::string_view token) const;
    const std::vector<std::string>& tokens() const { return tokens_; }

    std::size_t duplicate_tokens = 0;  // set by the loader

private:
    std::size_t dim_ = 0;
    std::vector<std::string> tokens_;
    std::vector<float> data_;
    std::unordered_map<std::string, std::size_t> lookup_;
};

/// Reads the word-vector text format: "<count> <dim>" header, then
/// "<token> <f1> ... <fdim>" per line. Duplicate tokens: last one wins.
EmbeddingDictionary load_embeddings(const std::filesystem::path& path);
void save_embeddings(const EmbeddingDictionary& dict, const std::filesystem::path& path);

/// Embeddings for synthetic tags ("tag%04d") placed around a random unit direction per
/// home cluster; `spread` is the per-coordinate noise relative to that direction.
EmbeddingDictionary synth_embeddings(const std::vector<std::size_t>& tag_cluster, std::size_t dim,
                                     double spread, std::uint64_t seed);

BinaryTagVector one_hot(const ImageRecord& record, const TagVocabulary& vocab);

/// 1 - |a & b| / |a | b|. Both empty -> 0, exactly one empty -> 1.
double jaccard(const BinaryTagVector& a, const BinaryTagVector& b);

/// Sum of the embeddings of the set tags. Tags absent from the dictionary are skipped
/// and counted in `missing` when given.
SemanticVector rho(const BinaryTagVector& o, const EmbeddingDictionary& dict,
                   const TagVocabulary& vocab, std::size_t* missing = nullptr);

/// 1 - u.v / (|u||v|); a zero vector is at distance 1 from any non-zero vector and
/// at distance 0 from another zero vector.
double cosine_distance(const SemanticVector& u, const SemanticVector& v);

struct EmbeddingSet {
    std::shared_ptr<const EmbeddingDictionary> w2v;
    std::shared_ptr<const EmbeddingDictionary> wnet;

    std::shared_ptr<const EmbeddingDictionary> get(Encoding e) const;
};

/// Binds an encoding to its vocabulary and (for w2v / wnet) dictionary.
class Encoder {
public:
    Encoder(Encoding encoding, std::shared_ptr<const TagVocabulary> vocab,
            const EmbeddingSet& dicts = {}, bool normalize = false);

    Encoding encoding() const { return encoding_; }
    /// tau for `id`, the dictionary dimension otherwise.
    std::size_t dim() const;
    bool normalized() const { return normalize_; }
    const TagVocabulary& vocab() const { return *vocab_; }
    const std::shared_ptr<const TagVocabulary>& vocab_ptr() const { return vocab_; }
    const EmbeddingDictionary* dictionary() const { return dict_.get(); }

    BinaryTagVector one_hot(const ImageRecord& record) const;
    /// Dense metadata vector: 0/1 entries for `id`, rho(...) otherwise.
    Eigen::VectorXd encode(const ImageRecord& record) const;

private:
    Encoding encoding_;
    std::shared_ptr<const TagVocabulary> vocab_;
    std::shared_ptr<const EmbeddingDictionary> dict_;
    bool normalize_;
};

}  // namespace tagnet
