#include "tagnet/corpus.hpp"

#include "tagnet/errors.hpp"
#include "tagnet/hash.hpp"
#include "tagnet/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

namespace tagnet {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "?";
}

Split parse_split(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "val") return Split::val;
    if (name == "test") return Split::test;
    throw DataError("unknown split '" + std::string(name) + "'");
}

std::string normalize_tag(std::string_view raw) {
    auto is_space = [](unsigned char c) { return c == ' ' || (c >= '\t' && c <= '\r'); };
    std::size_t b = 0, e = raw.size();
    while (b < e && is_space(raw[b])) ++b;
    while (e > b && is_space(raw[e - 1])) --e;
    std::string out(raw.substr(b, e - b));
    for (auto& c : out) {
        if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    }
    return out;
}

// ---------------------------------------------------------------------------
// Vocabulary / Corpus

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    lookup_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!lookup_.emplace(tokens_[i], i).second)
            throw DataError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
}

std::optional<std::size_t> Vocabulary::index_of(std::string_view token) const {
    auto it = lookup_.find(std::string(token));
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
}

std::string Vocabulary::fingerprint() const {
    std::string joined;
    for (const auto& t : tokens_) {
        joined += t;
        joined += '\n';
    }
    return sha256_hex(joined);
}

Corpus::Corpus(std::vector<ImageRecord> records, LabelVocabulary labels)
    : records_(std::move(records)), labels_(std::move(labels)) {
    lookup_.reserve(records_.size());
    for (std::size_t i = 0; i < records_.size(); ++i) {
        const auto& r = records_[i];
        if (r.id.empty()) throw DataError("record " + std::to_string(i) + " has an empty id");
        if (!lookup_.emplace(r.id, i).second) throw DataError("duplicate id '" + r.id + "'");
        for (const auto& l : r.labels) {
            if (!labels_.contains(l))
                throw DataError("record '" + r.id + "' has label '" + l +
                                "' outside the label vocabulary");
        }
    }
}

std::optional<std::size_t> Corpus::find(const std::string& id) const {
    auto it = lookup_.find(id);
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
}

std::vector<std::uint8_t> Corpus::label_bits(std::size_t i) const {
    std::vector<std::uint8_t> bits(labels_.size(), 0);
    for (const auto& l : records_.at(i).labels) bits[*labels_.index_of(l)] = 1;
    return bits;
}

// ---------------------------------------------------------------------------
// Splits

const std::vector<std::size_t>& SplitSpec::of(Split s) const {
    switch (s) {
        case Split::train: return train;
        case Split::val: return val;
        case Split::test: return test;
    }
    return test;
}

SplitSpec make_splits(std::size_t record_count, std::array<double, 3> fractions,
                      std::uint64_t seed) {
    if (record_count == 0) throw DataError("cannot split an empty corpus");
    for (double f : fractions) {
        if (!(f >= 0.0)) throw UsageError("split fractions must be non-negative");
    }
    const double total = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(total - 1.0) > 1e-9) throw UsageError("split fractions must sum to 1");

    const auto n = static_cast<double>(record_count);
    auto n_train = static_cast<std::size_t>(std::llround(fractions[0] * n));
    auto n_val = static_cast<std::size_t>(std::llround(fractions[1] * n));
    n_train = std::min(n_train, record_count);
    n_val = std::min(n_val, record_count - n_train);

    std::vector<std::size_t> order(record_count);
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(seed, "splits");
    std::shuffle(order.begin(), order.end(), rng);

    SplitSpec spec;
    spec.seed = seed;
    spec.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
    spec.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
                    order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    spec.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
    for (auto* part : {&spec.train, &spec.val, &spec.test}) std::sort(part->begin(), part->end());
    return spec;
}

SplitSpec splits_from_records(const Corpus& corpus) {
    SplitSpec spec;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& r = corpus.record(i);
        if (!r.split) throw DataError("record '" + r.id + "' has no split assignment");
        switch (*r.split) {
            case Split::train: spec.train.push_back(i); break;
            case Split::val: spec.val.push_back(i); break;
            case Split::test: spec.test.push_back(i); break;
        }
    }
    return spec;
}

Corpus with_splits(const Corpus& corpus, const SplitSpec& splits) {
    auto records = corpus.records();
    for (Split s : {Split::train, Split::val, Split::test}) {
        for (auto i : splits.of(s)) records.at(i).split = s;
    }
    return Corpus(std::move(records), corpus.labels());
}

// ---------------------------------------------------------------------------
// Vocabulary construction

VocabularyBuild build_vocabulary(const Corpus& corpus, const std::vector<std::size_t>& records,
                                 std::size_t tau) {
    if (tau == 0) throw UsageError("vocabulary size must be at least 1");
    std::map<std::string, std::size_t> freq;
    for (auto i : records) {
        const auto& tags = corpus.record(i).tags;
        std::set<std::string_view> distinct(tags.begin(), tags.end());
        for (auto t : distinct) ++freq[std::string(t)];
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    // std::map iteration is lexicographic, so a stable sort keeps ties in token order.
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });

    VocabularyBuild out;
    out.truncated_request = ranked.size() < tau;
    if (ranked.size() > tau) ranked.resize(tau);
    std::vector<std::string> tokens;
    tokens.reserve(ranked.size());
    for (auto& [t, _] : ranked) tokens.push_back(t);
    out.vocabulary = TagVocabulary(std::move(tokens));
    return out;
}

// ---------------------------------------------------------------------------
// Dataset preparation

namespace {

Dataset assemble(const Corpus& raw, FeatureStore features, SplitSpec splits, TagVocabulary vocab,
                 IngestReport report) {
    std::vector<std::string> missing;
    std::size_t missing_count = 0;
    std::vector<std::size_t> rows(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        auto row = features.find(raw.record(i).id);
        if (!row) {
            if (missing.size() < 10) missing.push_back(raw.record(i).id);
            ++missing_count;
            continue;
        }
        rows[i] = *row;
    }
    if (missing_count > 0) {
        std::string msg = std::to_string(missing_count) + " record(s) have no feature row:";
        for (const auto& id : missing) msg += " " + id;
        throw DataError(msg);
    }

    auto records = raw.records();
    for (Split s : {Split::train, Split::val, Split::test}) {
        for (auto i : splits.of(s)) records.at(i).split = s;
    }
    for (auto& r : records) {
        std::vector<std::string> kept;
        kept.reserve(r.tags.size());
        for (auto& t : r.tags) {
            if (vocab.contains(t)) {
                kept.push_back(std::move(t));
            } else {
                ++report.dropped_tags;
            }
        }
        r.tags = std::move(kept);
        if (r.tags.empty()) ++report.records_without_tags;
    }
    if (report.dropped_tags > 0)
        report.warnings.push_back("dropped " + std::to_string(report.dropped_tags) +
                                  " out-of-vocabulary tag occurrence(s)");
    report.records = records.size();
    report.vocabulary_size = vocab.size();

    Dataset ds;
    ds.corpus = Corpus(std::move(records), raw.labels());
    ds.vocab = std::move(vocab);
    ds.splits = std::move(splits);
    ds.features = std::move(features);
    ds.feature_row = std::move(rows);
    ds.report = std::move(report);
    return ds;
}

void check_split_cover(const SplitSpec& splits, std::size_t n) {
    std::vector<std::uint8_t> seen(n, 0);
    for (Split s : {Split::train, Split::val, Split::test}) {
        for (auto i : splits.of(s)) {
            if (i >= n) throw DataError("split refers to a record outside the corpus");
            if (seen[i]++) throw DataError("split sets overlap");
        }
    }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end())
        throw DataError("split sets do not cover the corpus");
}

}  // namespace

Dataset prepare_dataset(const Corpus& raw, FeatureStore features, SplitSpec splits,
                        std::size_t tau) {
    check_split_cover(splits, raw.size());
    auto built = build_vocabulary(raw, splits.train, tau);
    IngestReport report;
    report.vocabulary_truncated = built.truncated_request;
    if (built.truncated_request)
        report.warnings.push_back("only " + std::to_string(built.vocabulary.size()) +
                                  " distinct train tags for a requested vocabulary of " +
                                  std::to_string(tau));
    return assemble(raw, std::move(features), std::move(splits), std::move(built.vocabulary),
                    std::move(report));
}

Dataset prepare_dataset(const Corpus& raw, FeatureStore features, SplitSpec splits,
                        TagVocabulary vocab) {
    check_split_cover(splits, raw.size());
    return assemble(raw, std::move(features), std::move(splits), std::move(vocab), {});
}

// ---------------------------------------------------------------------------
// JSON-lines IO

Corpus read_corpus(const fs::path& path, std::optional<LabelVocabulary> labels) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus file " + path.string());

    std::vector<ImageRecord> records;
    std::set<std::string> seen_labels;
    std::string line;
    std::size_t line_no = 0;
    auto fail = [&](const std::string& what) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + what);
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::parse_error& e) {
            fail(std::string("malformed JSON: ") + e.what());
        }
        if (!obj.is_object()) fail("expected a JSON object");
        if (!obj.contains("id") || !obj["id"].is_string()) fail("missing string field 'id'");

        ImageRecord r;
        r.id = obj["id"].get<std::string>();
        auto read_list = [&](const char* key, std::vector<std::string>& dst, bool normalize) {
            if (!obj.contains(key)) return;
            const auto& arr = obj[key];
            if (!arr.is_array()) fail(std::string("field '") + key + "' must be an array");
            for (const auto& v : arr) {
                if (!v.is_string()) fail(std::string("field '") + key + "' must hold strings");
                auto s = v.get<std::string>();
                if (normalize) {
                    s = normalize_tag(s);
                    if (s.empty()) continue;
                }
                dst.push_back(std::move(s));
            }
        };
        read_list("tags", r.tags, true);
        read_list("labels", r.labels, false);
        std::sort(r.labels.begin(), r.labels.end());
        r.labels.erase(std::unique(r.labels.begin(), r.labels.end()), r.labels.end());
        if (obj.contains("split") && !obj["split"].is_null()) {
            if (!obj["split"].is_string()) fail("field 'split' must be a string");
            try {
                r.split = parse_split(obj["split"].get<std::string>());
            } catch (const DataError& e) {
                fail(e.what());
            }
        }
        seen_labels.insert(r.labels.begin(), r.labels.end());
        records.push_back(std::move(r));
    }
    if (!labels) labels = LabelVocabulary({seen_labels.begin(), seen_labels.end()});
    return Corpus(std::move(records), std::move(*labels));
}

void write_corpus(const Corpus& corpus, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    for (const auto& r : corpus.records()) {
        json obj = {{"id", r.id}, {"tags", r.tags}, {"labels", r.labels}};
        if (r.split) obj["split"] = std::string(split_name(*r.split));
        out << obj.dump() << '\n';
    }
}

Dataset load_corpus(const fs::path& corpus_path, const fs::path& features_prefix,
                    const LoadOptions& options) {
    Corpus raw = read_corpus(corpus_path);
    FeatureStore features = FeatureStore::open(features_prefix);
    const bool any_split = std::any_of(raw.records().begin(), raw.records().end(),
                                       [](const auto& r) { return r.split.has_value(); });
    SplitSpec splits = any_split ? splits_from_records(raw)
                                 : make_splits(raw.size(), options.fractions, options.split_seed);
    return prepare_dataset(raw, std::move(features), std::move(splits), options.tau);
}

// ---------------------------------------------------------------------------
// Synthetic corpora

SynthCorpus synth_corpus(const SynthOptions& o) {
    if (o.n == 0 || o.d == 0 || o.n_labels == 0 || o.n_tags == 0 || o.n_clusters == 0)
        throw UsageError("synthetic corpus sizes must be positive");
    if (o.n_clusters > o.n_labels) throw UsageError("n_clusters must not exceed n_labels");
    if (o.n_clusters > o.n_tags) throw UsageError("n_clusters must not exceed n_tags");
    if (!(o.noise >= 0.0 && o.noise <= 1.0)) throw UsageError("noise must lie in [0, 1]");
    if (o.min_tags == 0 || o.min_tags > o.max_tags) throw UsageError("invalid tags-per-image range");
    if (!(o.feature_sigma >= 0.0)) throw UsageError("feature_sigma must be non-negative");

    Rng rng = make_rng(o.seed, "synth");
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    std::vector<std::vector<double>> centroid(o.n_clusters, std::vector<double>(o.d));
    for (auto& c : centroid)
        for (auto& v : c) v = normal(rng);

    auto label_name = [](std::size_t i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "label%02zu", i);
        return std::string(buf);
    };
    auto tag_name = [](std::size_t i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "tag%04zu", i);
        return std::string(buf);
    };

    std::vector<std::vector<std::string>> cluster_labels(o.n_clusters);
    for (std::size_t c = 0; c < o.n_clusters; ++c) {
        for (std::size_t l = 0; l < o.n_labels; ++l) {
            if (l == c || unit(rng) < o.extra_label_prob) cluster_labels[c].push_back(label_name(l));
        }
    }

    SynthCorpus out;
    out.tag_cluster.resize(o.n_tags);
    std::vector<std::vector<std::size_t>> pool(o.n_clusters);
    for (std::size_t t = 0; t < o.n_tags; ++t) {
        out.tag_cluster[t] = t % o.n_clusters;
        pool[t % o.n_clusters].push_back(t);
    }

    std::uniform_int_distribution<std::size_t> pick_cluster(0, o.n_clusters - 1);
    std::uniform_int_distribution<std::size_t> pick_count(o.min_tags, o.max_tags);
    std::uniform_int_distribution<std::size_t> pick_tag(0, o.n_tags - 1);

    std::vector<ImageRecord> records(o.n);
    std::vector<std::string> ids(o.n);
    std::vector<float> feats(o.n * o.d);
    out.record_cluster.resize(o.n);
    for (std::size_t i = 0; i < o.n; ++i) {
        const std::size_t c = pick_cluster(rng);
        out.record_cluster[i] = c;

        char buf[32];
        std::snprintf(buf, sizeof buf, "img%06zu", i);
        records[i].id = ids[i] = buf;
        records[i].labels = cluster_labels[c];

        auto own = pool[c];
        std::shuffle(own.begin(), own.end(), rng);
        own.resize(std::min(own.size(), pick_count(rng)));
        for (auto& t : own) {
            if (unit(rng) < o.noise) t = pick_tag(rng);
        }
        std::sort(own.begin(), own.end());
        own.erase(std::unique(own.begin(), own.end()), own.end());
        for (auto t : own) records[i].tags.push_back(tag_name(t));

        for (std::size_t k = 0; k < o.d; ++k)
            feats[i * o.d + k] = static_cast<float>(centroid[c][k] + o.feature_sigma * normal(rng));
    }

    std::vector<std::string> label_tokens;
    for (std::size_t l = 0; l < o.n_labels; ++l) label_tokens.push_back(label_name(l));

    const auto splits = make_splits(o.n, kDefaultSplitFractions, derive_seed(o.seed, "synth-split"));
    for (Split s : {Split::train, Split::val, Split::test}) {
        for (auto i : splits.of(s)) records[i].split = s;
    }
    out.corpus = Corpus(std::move(records), LabelVocabulary(std::move(label_tokens)));
    out.features = FeatureStore::from_rows(o.d, std::move(ids), std::move(feats));
    return out;
}

}  // namespace tagnet
