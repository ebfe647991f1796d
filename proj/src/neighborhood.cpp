#include "tagnet/neighborhood.hpp"

#include "tagnet/errors.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <numeric>

namespace tagnet {

namespace {

bool closer(const Neighbor& a, std::size_t pa, const Neighbor& b, std::size_t pb) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return pa < pb;
}

void write_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<char*>(&v), 4); }
void write_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<char*>(&v), 8); }
void write_str(std::ostream& out, const std::string& s) {
    write_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("truncated index file");
    return v;
}
std::string read_str(std::istream& in) {
    const auto n = read_pod<std::uint32_t>(in);
    std::string s(n, '\0');
    in.read(s.data(), n);
    if (!in) throw DataError("truncated index file");
    return s;
}

}  // namespace

NeighborIndex NeighborIndex::build(const Corpus& corpus, std::vector<std::size_t> pool,
                                   Encoder encoder, Options options) {
    if (pool.empty()) throw DataError("cannot build a neighbor index over an empty pool");
    std::sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
        return corpus.record(a).id < corpus.record(b).id;
    });

    NeighborIndex index(std::move(encoder));
    index.inverted_ = options.inverted_index;
    index.pool_ = std::move(pool);
    index.ids_.reserve(index.pool_.size());
    for (auto i : index.pool_) index.ids_.push_back(corpus.record(i).id);

    const auto& enc = index.encoder_;
    if (enc.encoding() == Encoding::id) {
        index.binary_.reserve(index.pool_.size());
        for (auto i : index.pool_) index.binary_.push_back(enc.one_hot(corpus.record(i)));
        index.build_postings();
    } else {
        index.dense_.resize(static_cast<Eigen::Index>(enc.dim()),
                            static_cast<Eigen::Index>(index.pool_.size()));
        for (std::size_t p = 0; p < index.pool_.size(); ++p)
            index.dense_.col(static_cast<Eigen::Index>(p)) =
                enc.encode(corpus.record(index.pool_[p])).cast<float>();
    }
    return index;
}

void NeighborIndex::build_postings() {
    postings_.assign(encoder_.vocab().size(), {});
    for (std::size_t p = 0; p < binary_.size(); ++p) {
        for (auto t : binary_[p].indices) postings_[t].push_back(static_cast<std::uint32_t>(p));
    }
}

std::ptrdiff_t NeighborIndex::self_position(const std::string& id) const {
    auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
    if (it != ids_.end() && *it == id) return it - ids_.begin();
    return -1;
}

NeighborList NeighborIndex::query(const ImageRecord& x, std::size_t m_max) const {
    if (m_max == 0) throw UsageError("M must be at least 1");
    return encoder_.encoding() == Encoding::id ? query_binary(x, m_max) : query_dense(x, m_max);
}

NeighborList NeighborIndex::query_binary(const ImageRecord& x, std::size_t m_max) const {
    const auto q = encoder_.one_hot(x);
    const auto self = self_position(x.id);
    const std::size_t n = pool_.size();

    std::vector<std::pair<Neighbor, std::size_t>> scored;  // (neighbor, pool position)
    std::vector<std::uint8_t> taken(n, 0);
    if (self >= 0) taken[static_cast<std::size_t>(self)] = 1;

    if (inverted_) {
        std::vector<std::uint32_t> touched;
        for (auto t : q.indices) {
            for (auto p : postings_[t]) {
                if (!taken[p]) {
                    taken[p] = 2;
                    touched.push_back(p);
                }
            }
        }
        if (q.indices.empty()) {
            for (std::size_t p = 0; p < n; ++p) {
                if (!taken[p] && binary_[p].indices.empty()) {
                    taken[p] = 2;
                    touched.push_back(static_cast<std::uint32_t>(p));
                }
            }
        }
        for (auto p : touched) scored.push_back({{pool_[p], jaccard(q, binary_[p])}, p});
    } else {
        for (std::size_t p = 0; p < n; ++p) {
            if (taken[p]) continue;
            taken[p] = 2;
            scored.push_back({{pool_[p], jaccard(q, binary_[p])}, p});
        }
    }

    auto cmp = [](const auto& a, const auto& b) { return closer(a.first, a.second, b.first, b.second); };
    const std::size_t keep = std::min(m_max, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep),
                      scored.end(), cmp);

    NeighborList out;
    out.reserve(std::min(m_max, n));
    for (std::size_t i = 0; i < keep; ++i) out.push_back(scored[i].first);
    // Records sharing no tag with a non-empty query are all at distance exactly 1.
    for (std::size_t p = 0; p < n && out.size() < m_max; ++p) {
        if (!taken[p]) out.push_back({pool_[p], jaccard(q, binary_[p])});
    }
    return out;
}

NeighborList NeighborIndex::query_dense(const ImageRecord& x, std::size_t m_max) const {
    const Eigen::VectorXd q = encoder_.encode(x).cast<float>().cast<double>();
    const auto self = self_position(x.id);
    std::vector<std::pair<Neighbor, std::size_t>> scored;
    scored.reserve(pool_.size());
    for (std::size_t p = 0; p < pool_.size(); ++p) {
        if (static_cast<std::ptrdiff_t>(p) == self) continue;
        const Eigen::VectorXd v = dense_.col(static_cast<Eigen::Index>(p)).cast<double>();
        scored.push_back({{pool_[p], cosine_distance(q, v)}, p});
    }
    auto cmp = [](const auto& a, const auto& b) { return closer(a.first, a.second, b.first, b.second); };
    const std::size_t keep = std::min(m_max, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(keep),
                      scored.end(), cmp);
    NeighborList out;
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out.push_back(scored[i].first);
    return out;
}

void NeighborIndex::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    write_str(out, std::string(encoding_name(encoder_.encoding())));
    write_str(out, encoder_.vocab().fingerprint());
    write_u64(out, pool_.size());
    write_u32(out, static_cast<std::uint32_t>(encoder_.dim()));
    for (const auto& id : ids_) write_str(out, id);
    if (encoder_.encoding() == Encoding::id) {
        for (const auto& b : binary_) {
            write_u32(out, static_cast<std::uint32_t>(b.indices.size()));
            out.write(reinterpret_cast<const char*>(b.indices.data()),
                      static_cast<std::streamsize>(b.indices.size() * 4));
        }
    } else {
        out.write(reinterpret_cast<const char*>(dense_.data()),
                  static_cast<std::streamsize>(dense_.size() * sizeof(float)));
    }
    if (!out) throw DataError("failed writing " + path.string());
}

NeighborIndex NeighborIndex::load(const std::filesystem::path& path, const Corpus& corpus,
                                  Encoder encoder) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open index file " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) throw DataError(path.string() + ": bad magic bytes");
    if (const auto v = read_pod<std::uint32_t>(in); v != kVersion)
        throw DataError(path.string() + ": unsupported index version " + std::to_string(v));
    const auto enc = read_str(in);
    if (parse_encoding(enc) != encoder.encoding())
        throw DataError(path.string() + ": index was built with encoding '" + enc + "'");
    if (read_str(in) != encoder.vocab().fingerprint())
        throw DataError(path.string() + ": index was built with a different tag vocabulary");
    const auto count = read_pod<std::uint64_t>(in);
    const auto dim = read_pod<std::uint32_t>(in);
    if (dim != encoder.dim()) throw DataError(path.string() + ": encoding dimension mismatch");

    NeighborIndex index(std::move(encoder));
    index.ids_.reserve(count);
    index.pool_.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        index.ids_.push_back(read_str(in));
        auto r = corpus.find(index.ids_.back());
        if (!r) throw DataError(path.string() + ": pool id '" + index.ids_.back() + "' not in corpus");
        index.pool_.push_back(*r);
    }
    if (index.encoder_.encoding() == Encoding::id) {
        index.binary_.resize(count);
        for (auto& b : index.binary_) {
            b.tau = dim;
            b.indices.resize(read_pod<std::uint32_t>(in));
            in.read(reinterpret_cast<char*>(b.indices.data()),
                    static_cast<std::streamsize>(b.indices.size() * 4));
            for (auto t : b.indices)
                if (t >= dim) throw DataError(path.string() + ": tag index out of range");
        }
        if (!in) throw DataError("truncated index file");
        index.build_postings();
    } else {
        index.dense_.resize(dim, static_cast<Eigen::Index>(count));
        in.read(reinterpret_cast<char*>(index.dense_.data()),
                static_cast<std::streamsize>(index.dense_.size() * sizeof(float)));
        if (!in) throw DataError("truncated index file");
    }
    return index;
}

// ---------------------------------------------------------------------------
// Candidate neighborhoods

std::uint64_t candidate_count(std::size_t m, std::size_t m_max) {
    if (m == 0) throw UsageError("neighborhood size m must be at least 1");
    if (m > m_max) throw UsageError("neighborhood size m exceeds max rank M");
    const std::size_t k = std::min(m, m_max - m);
    std::uint64_t c = 1;
    for (std::size_t i = 1; i <= k; ++i) {
        const std::uint64_t num = m_max - k + i;
        // c * num is divisible by i; divide first where possible to delay overflow.
        const std::uint64_t g = std::gcd(c, static_cast<std::uint64_t>(i));
        const std::uint64_t c1 = c / g, i1 = i / g;
        if (c1 > UINT64_MAX / (num / i1)) throw UsageError("candidate count overflows 64 bits");
        c = c1 * (num / i1);
    }
    return c;
}

NeighborhoodSample sample_neighborhood(const NeighborList& list, std::size_t m, Rng& rng) {
    if (m == 0) throw UsageError("neighborhood size m must be at least 1");
    if (list.size() < m)
        throw UsageError("neighbor list has " + std::to_string(list.size()) +
                         " entries, fewer than m = " + std::to_string(m));
    std::vector<std::size_t> pos(list.size());
    std::iota(pos.begin(), pos.end(), 0);
    for (std::size_t i = 0; i < m; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pos.size() - 1);
        std::swap(pos[i], pos[pick(rng)]);
    }
    pos.resize(m);
    std::sort(pos.begin(), pos.end());
    NeighborhoodSample s;
    s.members.reserve(m);
    for (auto p : pos) s.members.push_back(list[p]);
    return s;
}

NeighborhoodSample draw_neighborhood(const NeighborList& list, std::size_t m, Rng& rng,
                                     bool* padded) {
    if (padded) *padded = false;
    if (list.size() >= m) return sample_neighborhood(list, m, rng);
    if (list.empty()) throw DataError("no neighbors available to draw a neighborhood from");
    if (padded) *padded = true;
    std::uniform_int_distribution<std::size_t> pick(0, list.size() - 1);
    std::vector<std::size_t> pos(m);
    for (auto& p : pos) p = pick(rng);
    std::sort(pos.begin(), pos.end());
    NeighborhoodSample s;
    for (auto p : pos) s.members.push_back(list[p]);
    return s;
}

std::vector<NeighborhoodSample> enumerate_neighborhoods(const NeighborList& list, std::size_t m,
                                                        std::uint64_t cap) {
    const auto total = candidate_count(m, list.size());
    if (total > cap)
        throw UsageError("C(" + std::to_string(list.size()) + ", " + std::to_string(m) + ") = " +
                         std::to_string(total) + " neighborhoods exceed the enumeration cap " +
                         std::to_string(cap) + "; use sampling instead");
    std::vector<NeighborhoodSample> out;
    out.reserve(total);
    std::vector<std::size_t> pos(m);
    std::iota(pos.begin(), pos.end(), 0);
    const std::size_t n = list.size();
    while (true) {
        NeighborhoodSample s;
        s.members.reserve(m);
        for (auto p : pos) s.members.push_back(list[p]);
        out.push_back(std::move(s));
        std::size_t i = m;
        while (i > 0 && pos[i - 1] == n - m + (i - 1)) --i;
        if (i == 0) break;
        ++pos[i - 1];
        for (std::size_t j = i; j < m; ++j) pos[j] = pos[j - 1] + 1;
    }
    return out;
}

}  // namespace tagnet
