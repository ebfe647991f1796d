#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace tagnet {

/// Fixed-dimension table of 32-bit visual feature vectors keyed by image id.
///
/// On disk a store is a pair of files sharing a prefix:
///   `<prefix>.feat`  "TNFT", u32 version (=1), u64 count, u32 dim, count*dim LE floats
///   `<prefix>.ids`   UTF-8, one id per line, line i <-> row i
/// `open` maps the `.feat` payload read-only; `from_rows` owns its memory.
class FeatureStore {
public:
    static constexpr char kMagic[4] = {'T', 'N', 'F', 'T'};
    static constexpr std::uint32_t kVersion = 1;
    static constexpr std::size_t kHeaderBytes = 20;

    FeatureStore() = default;

    static FeatureStore open(const std::filesystem::path& prefix);
    static FeatureStore from_rows(std::size_t dim, std::vector<std::string> ids,
                                  std::vector<float> values);

    void save(const std::filesystem::path& prefix) const;

    std::size_t dim() const { return dim_; }
    std::size_t size() const { return ids_.size(); }
    const std::vector<std::string>& ids() const { return ids_; }

    std::span<const float> row(std::size_t i) const { return {data_ + i * dim_, dim_}; }
    std::optional<std::size_t> find(const std::string& id) const;
    /// Throws DataError when the id has no row.
    std::span<const float> row(const std::string& id) const;

private:
    struct Mapping;

    std::size_t dim_ = 0;
    std::vector<std::string> ids_;
    std::unordered_map<std::string, std::size_t> lookup_;
    std::shared_ptr<const std::vector<float>> owned_;
    std::shared_ptr<const Mapping> mapping_;
    const float* data_ = nullptr;

    void index_ids();
    void check_finite() const;
};

}  // namespace tagnet
