#include "tagnet/encoding.hpp"

#include "tagnet/errors.hpp"
#include "tagnet/random.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace tagnet {

std::string_view encoding_name(Encoding e) {
    switch (e) {
        case Encoding::id: return "id";
        case Encoding::w2v: return "w2v";
        case Encoding::wnet: return "wnet";
    }
    return "?";
}

Encoding parse_encoding(std::string_view name) {
    if (name == "id") return Encoding::id;
    if (name == "w2v") return Encoding::w2v;
    if (name == "wnet") return Encoding::wnet;
    throw UsageError("unknown encoding '" + std::string(name) + "' (expected id, w2v or wnet)");
}

// ---------------------------------------------------------------------------
// EmbeddingDictionary

bool EmbeddingDictionary::insert(const std::string& token, std::span<const float> vector) {
    if (vector.size() != dim_) throw DataError("embedding for '" + token + "' has wrong length");
    for (float v : vector) {
        if (!std::isfinite(v)) throw DataError("non-finite embedding value for '" + token + "'");
    }
    auto [it, fresh] = lookup_.emplace(token, tokens_.size());
    if (fresh) {
        tokens_.push_back(token);
        data_.insert(data_.end(), vector.begin(), vector.end());
    } else {
        std::copy(vector.begin(), vector.end(), data_.begin() + it->second * dim_);
    }
    return fresh;
}

std::optional<std::span<const float>> EmbeddingDictionary::find(std::string_view token) const {
    auto it = lookup_.find(std::string(token));
    if (it == lookup_.end()) return std::nullopt;
    return std::span<const float>(data_.data() + it->second * dim_, dim_);
}

EmbeddingDictionary load_embeddings(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open embedding file " + path.string());
    auto fail = [&](std::size_t line_no, const std::string& what) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + what);
    };

    std::string line;
    if (!std::getline(in, line)) fail(1, "missing '<count> <dim>' header");
    std::istringstream header(line);
    std::size_t count = 0, dim = 0;
    if (!(header >> count >> dim) || dim == 0) fail(1, "malformed '<count> <dim>' header");

    EmbeddingDictionary dict(dim);
    std::vector<float> vec(dim);
    std::size_t line_no = 1, entries = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(' ') == std::string::npos) continue;

        const char* p = line.data();
        const char* end = p + line.size();
        const char* tok_end = std::find(p, end, ' ');
        std::string token(p, tok_end);
        p = tok_end;
        std::size_t k = 0;
        while (p < end) {
            while (p < end && *p == ' ') ++p;
            if (p == end) break;
            if (k == dim) fail(line_no, "more than " + std::to_string(dim) + " values");
            float v = 0.0f;
            auto [next, ec] = std::from_chars(p, end, v);
            if (ec != std::errc() || (next < end && *next != ' '))
                fail(line_no, "malformed number");
            vec[k++] = v;
            p = next;
        }
        if (k != dim)
            fail(line_no, "expected " + std::to_string(dim) + " values, found " + std::to_string(k));
        if (!dict.insert(token, vec)) ++dict.duplicate_tokens;
        ++entries;
    }
    if (entries != count)
        throw DataError(path.string() + ": header declares " + std::to_string(count) +
                        " entries, file holds " + std::to_string(entries));
    return dict;
}

void save_embeddings(const EmbeddingDictionary& dict, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << dict.size() << ' ' << dict.dim() << '\n';
    char buf[32];
    for (const auto& t : dict.tokens()) {
        out << t;
        const auto row = *dict.find(t);
        for (float v : row) {
            std::snprintf(buf, sizeof buf, " %.9g", static_cast<double>(v));
            out << buf;
        }
        out << '\n';
    }
}

EmbeddingDictionary synth_embeddings(const std::vector<std::size_t>& tag_cluster, std::size_t dim,
                                     double spread, std::uint64_t seed) {
    if (dim == 0) throw UsageError("embedding dimension must be positive");
    const std::size_t clusters =
        tag_cluster.empty() ? 0 : *std::max_element(tag_cluster.begin(), tag_cluster.end()) + 1;
    Rng rng = make_rng(seed, "synth-embeddings");
    std::normal_distribution<double> normal(0.0, 1.0);

    std::vector<std::vector<double>> direction(clusters, std::vector<double>(dim));
    for (auto& d : direction) {
        double norm = 0.0;
        for (auto& v : d) {
            v = normal(rng);
            norm += v * v;
        }
        for (auto& v : d) v /= std::sqrt(norm);
    }

    EmbeddingDictionary dict(dim);
    std::vector<float> vec(dim);
    const double per_coord = spread / std::sqrt(static_cast<double>(dim));
    for (std::size_t t = 0; t < tag_cluster.size(); ++t) {
        for (std::size_t k = 0; k < dim; ++k)
            vec[k] = static_cast<float>(direction[tag_cluster[t]][k] + per_coord * normal(rng));
        char buf[32];
        std::snprintf(buf, sizeof buf, "tag%04zu", t);
        dict.insert(buf, vec);
    }
    return dict;
}

// ---------------------------------------------------------------------------
// Encodings and distances

BinaryTagVector one_hot(const ImageRecord& record, const TagVocabulary& vocab) {
    BinaryTagVector o;
    o.tau = vocab.size();
    o.indices.reserve(record.tags.size());
    for (const auto& t : record.tags) {
        if (auto i = vocab.index_of(t)) o.indices.push_back(static_cast<std::uint32_t>(*i));
    }
    std::sort(o.indices.begin(), o.indices.end());
    o.indices.erase(std::unique(o.indices.begin(), o.indices.end()), o.indices.end());
    return o;
}

double jaccard(const BinaryTagVector& a, const BinaryTagVector& b) {
    if (a.tau != b.tau) throw UsageError("jaccard: vectors have different vocabulary sizes");
    if (a.indices.empty() && b.indices.empty()) return 0.0;
    std::size_t inter = 0;
    auto i = a.indices.begin(), j = b.indices.begin();
    while (i != a.indices.end() && j != b.indices.end()) {
        if (*i < *j) {
            ++i;
        } else if (*j < *i) {
            ++j;
        } else {
            ++inter;
            ++i;
            ++j;
        }
    }
    const std::size_t uni = a.indices.size() + b.indices.size() - inter;
    return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

SemanticVector rho(const BinaryTagVector& o, const EmbeddingDictionary& dict,
                   const TagVocabulary& vocab, std::size_t* missing) {
    SemanticVector out = SemanticVector::Zero(static_cast<Eigen::Index>(dict.dim()));
    for (auto i : o.indices) {
        auto v = dict.find(vocab.token(i));
        if (!v) {
            if (missing) ++*missing;
            continue;
        }
        for (std::size_t k = 0; k < dict.dim(); ++k) out[static_cast<Eigen::Index>(k)] += (*v)[k];
    }
    return out;
}

double cosine_distance(const SemanticVector& u, const SemanticVector& v) {
    if (u.size() != v.size()) throw UsageError("cosine_distance: vectors have different lengths");
    double dot = 0.0, uu = 0.0, vv = 0.0;
    for (Eigen::Index k = 0; k < u.size(); ++k) {
        dot += u[k] * v[k];
        uu += u[k] * u[k];
        vv += v[k] * v[k];
    }
    if (uu == 0.0 || vv == 0.0) return (uu == 0.0 && vv == 0.0) ? 0.0 : 1.0;
    return 1.0 - dot / (std::sqrt(uu) * std::sqrt(vv));
}

// ---------------------------------------------------------------------------
// Encoder

std::shared_ptr<const EmbeddingDictionary> EmbeddingSet::get(Encoding e) const {
    switch (e) {
        case Encoding::w2v: return w2v;
        case Encoding::wnet: return wnet;
        case Encoding::id: return nullptr;
    }
    return nullptr;
}

Encoder::Encoder(Encoding encoding, std::shared_ptr<const TagVocabulary> vocab,
                 const EmbeddingSet& dicts, bool normalize)
    : encoding_(encoding), vocab_(std::move(vocab)), dict_(dicts.get(encoding)),
      normalize_(normalize) {
    if (!vocab_) throw UsageError("encoder requires a tag vocabulary");
    if (encoding_ != Encoding::id && !dict_)
        throw UsageError("encoding '" + std::string(encoding_name(encoding_)) +
                         "' requires a loaded embedding dictionary");
}

std::size_t Encoder::dim() const {
    return encoding_ == Encoding::id ? vocab_->size() : dict_->dim();
}

BinaryTagVector Encoder::one_hot(const ImageRecord& record) const {
    return tagnet::one_hot(record, *vocab_);
}

Eigen::VectorXd Encoder::encode(const ImageRecord& record) const {
    const auto o = one_hot(record);
    if (encoding_ == Encoding::id) {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(o.tau));
        for (auto i : o.indices) out[i] = 1.0;
        return out;
    }
    SemanticVector s = rho(o, *dict_, *vocab_);
    if (normalize_) {
        const double n = s.norm();
        if (n > 0.0) s /= n;
    }
    return s;
}

}  // namespace tagnet
