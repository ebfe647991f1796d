#include "tagnet/features.hpp"

#include "tagnet/errors.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

static_assert(std::endian::native == std::endian::little,
              "feature files are little-endian and mapped without conversion");

namespace tagnet {

namespace fs = std::filesystem;

struct FeatureStore::Mapping {
    void* base = MAP_FAILED;
    std::size_t length = 0;

    Mapping(const fs::path& path) {
        const int fd = ::open(path.c_str(), O_RDONLY);
        if (fd < 0) throw DataError("cannot open feature file " + path.string());
        struct stat st {};
        if (::fstat(fd, &st) != 0) {
            ::close(fd);
            throw DataError("cannot stat feature file " + path.string());
        }
        length = static_cast<std::size_t>(st.st_size);
        if (length > 0) base = ::mmap(nullptr, length, PROT_READ, MAP_PRIVATE, fd, 0);
        ::close(fd);
        if (length > 0 && base == MAP_FAILED) throw DataError("cannot map " + path.string());
    }
    ~Mapping() {
        if (base != MAP_FAILED) ::munmap(base, length);
    }
    Mapping(const Mapping&) = delete;
    Mapping& operator=(const Mapping&) = delete;

    const unsigned char* bytes() const { return static_cast<const unsigned char*>(base); }
};

namespace {

template <typename T>
T read_le(const unsigned char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return v;
}

std::vector<std::string> read_id_lines(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open id file " + path.string());
    std::vector<std::string> ids;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        ids.push_back(line);
    }
    return ids;
}

fs::path with_suffix(const fs::path& prefix, const char* suffix) {
    return fs::path(prefix.string() + suffix);
}

}  // namespace

FeatureStore FeatureStore::open(const fs::path& prefix) {
    const auto feat_path = with_suffix(prefix, ".feat");
    const auto ids_path = with_suffix(prefix, ".ids");
    if (!fs::exists(feat_path)) throw DataError("missing feature file " + feat_path.string());
    if (!fs::exists(ids_path)) throw DataError("missing id file " + ids_path.string());

    FeatureStore store;
    store.mapping_ = std::make_shared<const Mapping>(feat_path);
    const auto& map = *store.mapping_;
    if (map.length < kHeaderBytes || std::memcmp(map.bytes(), kMagic, 4) != 0)
        throw DataError(feat_path.string() + ": bad magic bytes");
    const auto version = read_le<std::uint32_t>(map.bytes() + 4);
    if (version != kVersion)
        throw DataError(feat_path.string() + ": unsupported version " + std::to_string(version));
    const auto count = read_le<std::uint64_t>(map.bytes() + 8);
    const auto dim = read_le<std::uint32_t>(map.bytes() + 16);
    if (dim == 0) throw DataError(feat_path.string() + ": zero feature dimension");
    if (map.length != kHeaderBytes + count * dim * sizeof(float))
        throw DataError(feat_path.string() + ": payload size does not match header");

    store.dim_ = dim;
    store.ids_ = read_id_lines(ids_path);
    if (store.ids_.size() != count)
        throw DataError(ids_path.string() + ": " + std::to_string(store.ids_.size()) +
                        " ids for " + std::to_string(count) + " feature rows");
    store.data_ = reinterpret_cast<const float*>(map.bytes() + kHeaderBytes);
    store.index_ids();
    store.check_finite();
    return store;
}

FeatureStore FeatureStore::from_rows(std::size_t dim, std::vector<std::string> ids,
                                     std::vector<float> values) {
    if (dim == 0) throw DataError("feature dimension must be positive");
    if (values.size() != ids.size() * dim)
        throw DataError("feature table size does not match count * dim");
    FeatureStore store;
    store.dim_ = dim;
    store.ids_ = std::move(ids);
    auto owned = std::make_shared<const std::vector<float>>(std::move(values));
    store.data_ = owned->data();
    store.owned_ = std::move(owned);
    store.index_ids();
    store.check_finite();
    return store;
}

void FeatureStore::save(const fs::path& prefix) const {
    {
        std::ofstream out(with_suffix(prefix, ".feat"), std::ios::binary);
        if (!out) throw DataError("cannot write " + with_suffix(prefix, ".feat").string());
        const std::uint32_t version = kVersion;
        const std::uint64_t count = size();
        const std::uint32_t dim = static_cast<std::uint32_t>(dim_);
        out.write(kMagic, 4);
        out.write(reinterpret_cast<const char*>(&version), sizeof version);
        out.write(reinterpret_cast<const char*>(&count), sizeof count);
        out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
        if (count > 0)
            out.write(reinterpret_cast<const char*>(data_),
                      static_cast<std::streamsize>(count * dim_ * sizeof(float)));
    }
    std::ofstream ids(with_suffix(prefix, ".ids"));
    for (const auto& id : ids_) ids << id << '\n';
}

std::optional<std::size_t> FeatureStore::find(const std::string& id) const {
    auto it = lookup_.find(id);
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
}

std::span<const float> FeatureStore::row(const std::string& id) const {
    auto i = find(id);
    if (!i) throw DataError("no feature row for id '" + id + "'");
    return row(*i);
}

void FeatureStore::index_ids() {
    lookup_.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        if (!lookup_.emplace(ids_[i], i).second)
            throw DataError("duplicate feature id '" + ids_[i] + "'");
    }
}

void FeatureStore::check_finite() const {
    const std::size_t n = size() * dim_;
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(data_[i]))
            throw DataError("non-finite feature value for id '" + ids_[i / dim_] + "'");
    }
}

}  // namespace tagnet
