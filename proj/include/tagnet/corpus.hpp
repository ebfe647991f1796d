#pragma once

#include "tagnet/features.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tagnet {

enum class Split : std::uint8_t { train, val, test };

std::string_view split_name(Split s);
Split parse_split(std::string_view name);

struct ImageRecord {
    std::string id;
    std::vector<std::string> tags;
    std::vector<std::string> labels;
    std::optional<Split> split;

    bool operator==(const ImageRecord&) const = default;
};

/// Lower-cases ASCII letters and trims surrounding whitespace.
std::string normalize_tag(std::string_view raw);

/// Ordered token list with dense indices. Shared base of the tag and label vocabularies.
class Vocabulary {
public:
    Vocabulary() = default;
    explicit Vocabulary(std::vector<std::string> tokens);

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }
    const std::string& token(std::size_t i) const { return tokens_.at(i); }
    std::optional<std::size_t> index_of(std::string_view token) const;
    bool contains(std::string_view token) const { return index_of(token).has_value(); }

    /// Hex SHA-256 over the newline-joined tokens.
    std::string fingerprint() const;

    bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::size_t> lookup_;
};

class TagVocabulary : public Vocabulary {
public:
    using Vocabulary::Vocabulary;
};

class LabelVocabulary : public Vocabulary {
public:
    using Vocabulary::Vocabulary;
};

/// A set of records with unique ids and the label vocabulary they are annotated with.
class Corpus {
public:
    Corpus() = default;
    /// Validates id uniqueness and that every label is in `labels`.
    Corpus(std::vector<ImageRecord> records, LabelVocabulary labels);

    std::size_t size() const { return records_.size(); }
    const std::vector<ImageRecord>& records() const { return records_; }
    const ImageRecord& record(std::size_t i) const { return records_.at(i); }
    const LabelVocabulary& labels() const { return labels_; }
    std::optional<std::size_t> find(const std::string& id) const;

    /// Label membership of record `i` as a 0/1 vector over the label vocabulary.
    std::vector<std::uint8_t> label_bits(std::size_t i) const;

    bool operator==(const Corpus& other) const {
        return records_ == other.records_ && labels_ == other.labels_;
    }

private:
    std::vector<ImageRecord> records_;
    LabelVocabulary labels_;
    std::unordered_map<std::string, std::size_t> lookup_;
};

struct SplitSpec {
    std::vector<std::size_t> train, val, test;  // corpus indices, ascending
    std::uint64_t seed = 0;

    const std::vector<std::size_t>& of(Split s) const;
};

/// Default fractions: the 110000 / 40000 / 40253 partition of a 190253-image corpus.
inline constexpr std::array<double, 3> kDefaultSplitFractions = {
    110000.0 / 190253.0, 40000.0 / 190253.0, 40253.0 / 190253.0};

SplitSpec make_splits(std::size_t record_count, std::array<double, 3> fractions,
                      std::uint64_t seed);
/// Split assignment read from the records' own `split` fields; all must be present.
SplitSpec splits_from_records(const Corpus& corpus);
/// Returns a copy of the corpus whose records carry the split assignment.
Corpus with_splits(const Corpus& corpus, const SplitSpec& splits);

struct VocabularyBuild {
    TagVocabulary vocabulary;
    bool truncated_request = false;  // fewer than tau distinct tags were available
};

/// The `tau` most frequent tags over the given records, counting each tag once per
/// record; ties go to the lexicographically smaller token.
VocabularyBuild build_vocabulary(const Corpus& corpus, const std::vector<std::size_t>& records,
                                 std::size_t tau);

struct IngestReport {
    std::size_t records = 0;
    std::size_t dropped_tags = 0;          // out-of-vocabulary tag occurrences removed
    std::size_t records_without_tags = 0;  // after vocabulary filtering
    std::size_t vocabulary_size = 0;
    bool vocabulary_truncated = false;
    std::vector<std::string> warnings;
};

/// Everything the models need: tag-filtered corpus, vocabularies, split, features.
struct Dataset {
    Corpus corpus;
    TagVocabulary vocab;
    SplitSpec splits;
    FeatureStore features;
    std::vector<std::size_t> feature_row;  // corpus index -> feature row
    IngestReport report;

    std::span<const float> feature(std::size_t record) const {
        return features.row(feature_row[record]);
    }
};

/// Builds the vocabulary on the train split, drops out-of-vocabulary tags and aligns
/// features. Throws DataError listing up to 10 ids that have no feature row.
Dataset prepare_dataset(const Corpus& raw, FeatureStore features, SplitSpec splits,
                        std::size_t tau);
/// As above but with a fixed vocabulary (e.g. the one stored in a bundle).
Dataset prepare_dataset(const Corpus& raw, FeatureStore features, SplitSpec splits,
                        TagVocabulary vocab);

// JSON-lines corpus format: {"id": ..., "tags": [...], "labels": [...], "split": ...}
Corpus read_corpus(const std::filesystem::path& path,
                   std::optional<LabelVocabulary> labels = std::nullopt);
void write_corpus(const Corpus& corpus, const std::filesystem::path& path);

struct LoadOptions {
    std::size_t tau = 5000;
    std::uint64_t split_seed = 0;
    std::array<double, 3> fractions = kDefaultSplitFractions;
};

/// Reads a corpus file and a feature file pair, assigns splits (from the file when
/// every record carries one, otherwise generated) and prepares the dataset.
Dataset load_corpus(const std::filesystem::path& corpus_path,
                    const std::filesystem::path& features_prefix, const LoadOptions& options = {});

struct SynthOptions {
    std::size_t n = 1000;
    std::size_t d = 16;
    std::size_t n_labels = 10;
    std::size_t n_tags = 100;
    std::size_t n_clusters = 10;
    double noise = 0.3;  // per-tag probability of replacement by a uniform random tag
    std::uint64_t seed = 0;

    double feature_sigma = 3.0;      // isotropic noise around the cluster centroid
    double extra_label_prob = 0.2;   // chance a cluster also carries a non-primary label
    std::size_t min_tags = 2;
    std::size_t max_tags = 6;
};

struct SynthCorpus {
    Corpus corpus;  // records carry a split assignment (default fractions)
    FeatureStore features;
    std::vector<std::size_t> record_cluster;
    std::vector<std::size_t> tag_cluster;  // home cluster of tag i ("tag%04d")
};

/// Latent-cluster multilabel corpus: each image draws a cluster, which fixes its label
/// set, its feature centroid and its tag pool.
SynthCorpus synth_corpus(const SynthOptions& options);

}  // namespace tagnet
