#pragma once

#include "tagnet/corpus.hpp"
#include "tagnet/encoding.hpp"
#include "tagnet/random.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace tagnet {

struct Neighbor {
    std::size_t record;  // corpus index
    double distance;

    bool operator==(const Neighbor&) const = default;
};

/// Ascending distance, ties by ascending image id.
using NeighborList = std::vector<Neighbor>;

/// m members of a NeighborList, kept in the list's (distance) order.
struct NeighborhoodSample {
    std::vector<Neighbor> members;
};

/// Exact M-nearest-neighbor retrieval over a fixed candidate pool.
///
/// Binary (`id`) pools are searched through an inverted tag index; every record that
/// shares no tag with the query sits at distance 1 (or 0 when both are empty), so the
/// remaining slots are filled in id order. Results match a sorted linear scan exactly.
class NeighborIndex {
public:
    static constexpr char kMagic[4] = {'T', 'N', 'I', 'X'};
    static constexpr std::uint32_t kVersion = 1;

    struct Options {
        bool inverted_index = true;
    };

    static NeighborIndex build(const Corpus& corpus, std::vector<std::size_t> pool,
                               Encoder encoder, Options options);
    static NeighborIndex build(const Corpus& corpus, std::vector<std::size_t> pool,
                               Encoder encoder, bool inverted_index = true) {
        return build(corpus, std::move(pool), std::move(encoder), Options{inverted_index});
    }

    /// The `m_max` nearest pool records; a pool record with the query's id is skipped.
    NeighborList query(const ImageRecord& x, std::size_t m_max) const;

    const Encoder& encoder() const { return encoder_; }
    Encoding encoding() const { return encoder_.encoding(); }
    std::size_t pool_size() const { return pool_.size(); }
    /// Corpus indices of the pool, ascending by id.
    const std::vector<std::size_t>& pool() const { return pool_; }

    void save(const std::filesystem::path& path) const;
    /// Re-binds a saved index to `corpus`; the encoder must match the stored encoding.
    static NeighborIndex load(const std::filesystem::path& path, const Corpus& corpus,
                              Encoder encoder);

private:
    explicit NeighborIndex(Encoder encoder) : encoder_(std::move(encoder)) {}

    Encoder encoder_;
    bool inverted_ = true;
    std::vector<std::size_t> pool_;
    std::vector<std::string> ids_;
    std::vector<BinaryTagVector> binary_;
    std::vector<std::vector<std::uint32_t>> postings_;
    Eigen::MatrixXf dense_;  // dim x pool

    void build_postings();
    std::ptrdiff_t self_position(const std::string& id) const;
    NeighborList query_binary(const ImageRecord& x, std::size_t m_max) const;
    NeighborList query_dense(const ImageRecord& x, std::size_t m_max) const;
};

/// Binomial coefficient C(M, m); the number of candidate neighborhoods.
std::uint64_t candidate_count(std::size_t m, std::size_t m_max);

/// Uniform m-subset of `list`, re-sorted by distance. Requires list.size() >= m.
NeighborhoodSample sample_neighborhood(const NeighborList& list, std::size_t m, Rng& rng);

/// As sample_neighborhood, but a list shorter than m is sampled with replacement up to
/// length m. Returns whether padding happened via `padded`.
NeighborhoodSample draw_neighborhood(const NeighborList& list, std::size_t m, Rng& rng,
                                     bool* padded = nullptr);

inline constexpr std::uint64_t kDefaultEnumerationCap = 10'000;

/// All C(|list|, m) subsets in lexicographic position order. Throws UsageError when
/// that count exceeds `cap`.
std::vector<NeighborhoodSample> enumerate_neighborhoods(const NeighborList& list, std::size_t m,
                                                        std::uint64_t cap = kDefaultEnumerationCap);

}  // namespace tagnet
