#pragma once

#include "tagnet/corpus.hpp"
#include "tagnet/random.hpp"

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

namespace tagnet::test {

class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("tagnet-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream os(p, std::ios::binary);
    os << text;
}

inline std::string read_bytes(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

/// Records with random tags drawn from `tags` distinct tokens, ids "r0000"...
inline std::vector<ImageRecord> random_records(std::size_t n, std::size_t tags, std::size_t max_tags,
                                               std::uint64_t seed, bool allow_empty = true) {
    Rng rng = make_rng(seed, "test-records");
    std::uniform_int_distribution<std::size_t> count(allow_empty ? 0 : 1, max_tags);
    std::uniform_int_distribution<std::size_t> pick(0, tags - 1);
    std::vector<ImageRecord> out;
    char id[16];
    for (std::size_t i = 0; i < n; ++i) {
        std::snprintf(id, sizeof id, "r%04zu", i);
        ImageRecord r;
        r.id = id;
        const auto k = count(rng);
        for (std::size_t j = 0; j < k; ++j) r.tags.push_back("t" + std::to_string(pick(rng)));
        r.labels = {"l" + std::to_string(i % 3)};
        out.push_back(std::move(r));
    }
    return out;
}

inline LabelVocabulary three_labels() { return LabelVocabulary({"l0", "l1", "l2"}); }

}  // namespace tagnet::test
