#include "support.hpp"

#include "tagnet/corpus.hpp"
#include "tagnet/errors.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include <cstring>
#include <map>
#include <set>

using namespace tagnet;
using tagnet::test::TempDir;

namespace {

FeatureStore features_for(const std::vector<std::string>& ids, std::size_t d, float base = 0.0f) {
    std::vector<float> v;
    for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) v.push_back(base + static_cast<float>(i * d + j) * 0.25f);
    return FeatureStore::from_rows(d, ids, v);
}

Corpus tag_corpus(const std::vector<std::vector<std::string>>& tags) {
    std::vector<ImageRecord> recs;
    for (std::size_t i = 0; i < tags.size(); ++i) recs.push_back({"i" + std::to_string(i), tags[i], {}, {}});
    return Corpus(recs, LabelVocabulary{});
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

}  // namespace

TEST(Corpus, NormalizeTagLowercasesAndTrims) {
    EXPECT_EQ(normalize_tag("  Sunset\t"), "sunset");
    EXPECT_EQ(normalize_tag("New York"), "new york");
    EXPECT_EQ(normalize_tag("   "), "");
}

TEST(Corpus, LoadsThreeRecordsWithFourDimFeatures) {
    TempDir dir;
    tagnet::test::write_text(dir / "c.jsonl",
                             R"({"id": "a", "tags": ["Sky", " sea "], "labels": ["water"], "split": "train"}
{"id": "b", "tags": ["sky"], "labels": ["sky"], "split": "val"}
{"id": "c", "tags": [], "labels": ["sky", "water"], "split": "test"}
)");
    features_for({"a", "b", "c"}, 4).save(dir / "f");
    const auto data = load_corpus(dir / "c.jsonl", dir / "f");
    EXPECT_EQ(data.corpus.size(), 3u);
    EXPECT_EQ(data.features.size(), 3u);
    EXPECT_EQ(data.features.dim(), 4u);
    EXPECT_EQ(data.corpus.record(0).tags, (std::vector<std::string>{"sky", "sea"}));
    EXPECT_EQ(data.splits.train, std::vector<std::size_t>{0});
    EXPECT_EQ(data.splits.val, std::vector<std::size_t>{1});
    EXPECT_EQ(data.splits.test, std::vector<std::size_t>{2});
    EXPECT_EQ(data.corpus.labels().tokens(), (std::vector<std::string>{"sky", "water"}));
    EXPECT_FLOAT_EQ(data.feature(2)[3], 11 * 0.25f);
}

TEST(Corpus, OutOfVocabularyTagDroppedAndCounted) {
    const Corpus raw = tag_corpus({{"a", "zzz"}, {"b"}});
    const SplitSpec splits{{0}, {1}, {}, 0};
    auto data = prepare_dataset(raw, features_for({"i0", "i1"}, 2), splits, TagVocabulary({"a", "b"}));
    EXPECT_EQ(data.report.dropped_tags, 1u);
    EXPECT_EQ(data.corpus.record(0).tags, std::vector<std::string>{"a"});
    EXPECT_FALSE(data.report.warnings.empty());
}

TEST(Corpus, DuplicateIdIsNamed) {
    TempDir dir;
    tagnet::test::write_text(dir / "c.jsonl", "{\"id\": \"x1\", \"tags\": [], \"labels\": []}\n"
                                              "{\"id\": \"x1\", \"tags\": [], \"labels\": []}\n");
    try {
        read_corpus(dir / "c.jsonl");
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("x1"), std::string::npos);
    }
}

TEST(Corpus, MalformedLineReportsLineNumber) {
    TempDir dir;
    tagnet::test::write_text(dir / "c.jsonl", "{\"id\": \"a\", \"tags\": [], \"labels\": []}\n{not json\n");
    try {
        read_corpus(dir / "c.jsonl");
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
    }
}

TEST(Corpus, MissingFeatureRowsListed) {
    const Corpus raw = tag_corpus({{"a"}, {"b"}, {"c"}});
    try {
        prepare_dataset(raw, features_for({"i0"}, 2), SplitSpec{{0, 1}, {2}, {}, 0}, 10);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("i1"), std::string::npos);
        EXPECT_NE(msg.find("i2"), std::string::npos);
    }
}

TEST(Vocabulary, FrequencyOrder) {
    const auto c = tag_corpus({{"a", "b", "c"}, {"a", "b"}, {"a"}});
    EXPECT_EQ(build_vocabulary(c, all_indices(3), 2).vocabulary.tokens(), (std::vector<std::string>{"a", "b"}));
}

TEST(Vocabulary, LexicographicTieBreak) {
    const auto c = tag_corpus({{"b", "a"}, {"a", "b"}});
    EXPECT_EQ(build_vocabulary(c, all_indices(2), 1).vocabulary.tokens(), std::vector<std::string>{"a"});
}

TEST(Vocabulary, CountsEachTagOncePerRecord) {
    const auto c = tag_corpus({{"b", "b", "b"}, {"a"}, {"a"}});
    EXPECT_EQ(build_vocabulary(c, all_indices(3), 1).vocabulary.tokens(), std::vector<std::string>{"a"});
}

TEST(Vocabulary, TruncatesAtTauAndFlagsShortfall) {
    std::vector<std::vector<std::string>> tags;
    for (int i = 0; i < 6000; ++i) tags.push_back({"tag" + std::to_string(i), "common"});
    const auto c = tag_corpus(tags);
    const auto big = build_vocabulary(c, all_indices(c.size()), 5000);
    EXPECT_EQ(big.vocabulary.size(), 5000u);
    EXPECT_FALSE(big.truncated_request);
    EXPECT_EQ(big.vocabulary.token(0), "common");
    const auto small = build_vocabulary(tag_corpus({{"x"}}), {0}, 5000);
    EXPECT_EQ(small.vocabulary.size(), 1u);
    EXPECT_TRUE(small.truncated_request);
}

TEST(Vocabulary, BuiltOnTrainRecordsOnly) {
    const Corpus raw = tag_corpus({{"seen"}, {"valonly"}});
    auto data = prepare_dataset(raw, features_for({"i0", "i1"}, 2), SplitSpec{{0}, {1}, {}, 0}, 10);
    EXPECT_EQ(data.vocab.tokens(), std::vector<std::string>{"seen"});
    EXPECT_TRUE(data.corpus.record(1).tags.empty());
}

TEST(Splits, PaperPartitionSizes) {
    const auto s = make_splits(190253, kDefaultSplitFractions, 1);
    EXPECT_EQ(s.train.size(), 110000u);
    EXPECT_EQ(s.val.size(), 40000u);
    EXPECT_EQ(s.test.size(), 40253u);
}

TEST(Splits, TenRecordsRoundToEightOneOne) {
    const auto s = make_splits(10, {0.8, 0.1, 0.1}, 3);
    EXPECT_EQ(s.train.size(), 8u);
    EXPECT_EQ(s.val.size(), 1u);
    EXPECT_EQ(s.test.size(), 1u);
}

TEST(Splits, DeterministicAndDisjointCover) {
    const auto a = make_splits(1000, kDefaultSplitFractions, 42);
    const auto b = make_splits(1000, kDefaultSplitFractions, 42);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.val, b.val);
    EXPECT_EQ(a.test, b.test);
    std::set<std::size_t> all;
    for (auto* part : {&a.train, &a.val, &a.test}) {
        EXPECT_TRUE(std::is_sorted(part->begin(), part->end()));
        all.insert(part->begin(), part->end());
    }
    EXPECT_EQ(all.size(), 1000u);
    EXPECT_NE(make_splits(1000, kDefaultSplitFractions, 43).train, a.train);
}

TEST(Splits, RejectsBadFractions) {
    EXPECT_THROW(make_splits(10, {0.5, 0.1, 0.1}, 0), UsageError);
    EXPECT_THROW(make_splits(0, kDefaultSplitFractions, 0), DataError);
}

TEST(Corpus, SerializeRoundTripIsEqual) {
    TempDir dir;
    SynthOptions o;
    o.n = 200;
    o.seed = 5;
    const auto syn = synth_corpus(o);
    write_corpus(syn.corpus, dir / "c.jsonl");
    const auto back = read_corpus(dir / "c.jsonl", syn.corpus.labels());
    EXPECT_TRUE(back == syn.corpus);
}

TEST(FeatureStore, RowsMatchOnDiskBytes) {
    TempDir dir;
    const auto store = features_for({"a", "b", "c"}, 5, -1.5f);
    store.save(dir / "f");
    const auto bytes = tagnet::test::read_bytes(dir / "f.feat");
    ASSERT_EQ(bytes.size(), FeatureStore::kHeaderBytes + 3 * 5 * sizeof(float));
    EXPECT_EQ(bytes.substr(0, 4), "TNFT");
    const auto opened = FeatureStore::open(dir / "f");
    for (const std::string id : {"a", "b", "c"}) {
        const auto row = opened.row(id);
        const auto i = *opened.find(id);
        for (std::size_t j = 0; j < 5; ++j) {
            float disk;
            std::memcpy(&disk, bytes.data() + FeatureStore::kHeaderBytes + (i * 5 + j) * sizeof(float), sizeof disk);
            EXPECT_EQ(row[j], disk);
        }
    }
    EXPECT_THROW(opened.row(std::string("zz")), DataError);
}

TEST(FeatureStore, RejectsCorruptFiles) {
    TempDir dir;
    features_for({"a", "b"}, 3).save(dir / "f");
    auto bytes = tagnet::test::read_bytes(dir / "f.feat");

    auto bad = bytes;
    bad[0] = 'X';
    tagnet::test::write_text(dir / "g.feat", bad);
    tagnet::test::write_text(dir / "g.ids", "a\nb\n");
    EXPECT_THROW(FeatureStore::open(dir / "g"), DataError);

    tagnet::test::write_text(dir / "g.feat", bytes.substr(0, bytes.size() - 4));
    EXPECT_THROW(FeatureStore::open(dir / "g"), DataError);

    tagnet::test::write_text(dir / "g.feat", bytes);
    tagnet::test::write_text(dir / "g.ids", "a\na\n");
    EXPECT_THROW(FeatureStore::open(dir / "g"), DataError);

    EXPECT_THROW(FeatureStore::open(dir / "missing"), DataError);
}

TEST(FeatureStore, CopiesShareOwnedData) {
    FeatureStore copy;
    {
        const auto store = features_for({"a"}, 2, 7.0f);
        copy = store;
    }
    EXPECT_EQ(copy.row(0)[0], 7.0f);
}

TEST(Synth, NoiselessSameClusterImagesShareALabel) {
    SynthOptions o;
    o.n = 400;
    o.noise = 0.0;
    o.seed = 11;
    const auto syn = synth_corpus(o);
    std::map<std::size_t, std::vector<std::size_t>> by_cluster;
    for (std::size_t i = 0; i < syn.corpus.size(); ++i) by_cluster[syn.record_cluster[i]].push_back(i);
    for (const auto& [c, members] : by_cluster) {
        for (std::size_t a = 1; a < members.size(); ++a) {
            const auto& la = syn.corpus.record(members[0]).labels;
            const auto& lb = syn.corpus.record(members[a]).labels;
            std::vector<std::string> common;
            std::set_intersection(la.begin(), la.end(), lb.begin(), lb.end(), std::back_inserter(common));
            EXPECT_FALSE(common.empty());
        }
        // and every tag comes from the cluster's own pool
        for (auto i : members)
            for (const auto& t : syn.corpus.record(i).tags)
                EXPECT_EQ(syn.tag_cluster[std::stoul(t.substr(3))], c);
    }
}

TEST(Synth, FullNoiseMakesTagsIndependentOfLabels) {
    SynthOptions o;
    o.n = 3000;
    o.noise = 1.0;
    o.seed = 21;
    const auto syn = synth_corpus(o);
    const std::size_t bins = 10, labels = syn.corpus.labels().size();
    std::vector<std::vector<double>> table(bins, std::vector<double>(labels, 0.0));
    Rng rng = make_rng(99, "chi-square");
    for (std::size_t i = 0; i < syn.corpus.size(); ++i) {
        const auto& r = syn.corpus.record(i);
        if (r.tags.empty() || r.labels.empty()) continue;
        const auto& tag = r.tags[std::uniform_int_distribution<std::size_t>(0, r.tags.size() - 1)(rng)];
        const auto& label = r.labels[std::uniform_int_distribution<std::size_t>(0, r.labels.size() - 1)(rng)];
        table[std::stoul(tag.substr(3)) % bins][*syn.corpus.labels().index_of(label)] += 1.0;
    }
    double total = 0.0;
    std::vector<double> row(bins, 0.0), col(labels, 0.0);
    for (std::size_t a = 0; a < bins; ++a)
        for (std::size_t b = 0; b < labels; ++b) {
            row[a] += table[a][b];
            col[b] += table[a][b];
            total += table[a][b];
        }
    double chi2 = 0.0;
    std::size_t used_cols = 0;
    for (std::size_t b = 0; b < labels; ++b) used_cols += col[b] > 0.0;
    for (std::size_t a = 0; a < bins; ++a)
        for (std::size_t b = 0; b < labels; ++b) {
            if (col[b] == 0.0) continue;
            const double e = row[a] * col[b] / total;
            chi2 += (table[a][b] - e) * (table[a][b] - e) / e;
        }
    const double df = static_cast<double>((bins - 1) * (used_cols - 1));
    const double critical = boost::math::quantile(boost::math::chi_squared(df), 0.99);
    EXPECT_LT(chi2, critical) << "df=" << df;
}

TEST(Synth, LowNoiseTagsAreInformative) {
    // Sanity check on the test above: the same statistic is significant at noise 0.
    SynthOptions o;
    o.n = 2000;
    o.noise = 0.0;
    o.seed = 21;
    const auto syn = synth_corpus(o);
    std::map<std::pair<std::size_t, std::size_t>, int> joint;
    for (std::size_t i = 0; i < syn.corpus.size(); ++i)
        joint[{syn.tag_cluster[std::stoul(syn.corpus.record(i).tags.at(0).substr(3))], syn.record_cluster[i]}]++;
    for (const auto& [key, count] : joint) EXPECT_EQ(key.first, key.second);
}

TEST(Synth, FixedSeedIsByteIdentical) {
    TempDir dir;
    SynthOptions o;
    o.n = 300;
    o.seed = 8;
    for (const char* name : {"a", "b"}) {
        const auto syn = synth_corpus(o);
        write_corpus(syn.corpus, dir / (std::string(name) + ".jsonl"));
        syn.features.save(dir / name);
    }
    EXPECT_EQ(tagnet::test::read_bytes(dir / "a.jsonl"), tagnet::test::read_bytes(dir / "b.jsonl"));
    EXPECT_EQ(tagnet::test::read_bytes(dir / "a.feat"), tagnet::test::read_bytes(dir / "b.feat"));
}

TEST(Synth, RecordsCarryDefaultSplits) {
    SynthOptions o;
    o.n = 1000;
    const auto syn = synth_corpus(o);
    const auto s = splits_from_records(syn.corpus);
    EXPECT_EQ(s.train.size() + s.val.size() + s.test.size(), 1000u);
    EXPECT_EQ(s.train.size(), static_cast<std::size_t>(std::llround(1000 * kDefaultSplitFractions[0])));
}
