// tagnet: command-line front end for ingesting corpora, training the fusion
// networks and evaluating them.
#include "bundle.hpp"

#include "tagnet/errors.hpp"
#include "tagnet/hash.hpp"
#include "tagnet/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

using namespace tagnet;
using namespace tagnet::cli;

namespace {

struct Global {
    std::optional<std::uint64_t> seed;
    std::size_t threads = 1;
    std::string out_dir = ".";
    std::vector<std::string> argv;
};

struct Seed {
    std::uint64_t value;
    bool generated;
};

Seed resolve_seed(const Global& g) {
    if (g.seed) return {*g.seed, false};
    std::random_device rd;
    return {(static_cast<std::uint64_t>(rd()) << 32) ^ rd(), true};
}

std::vector<std::string> split_list(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, sep)) {
        const auto t = normalize_tag(item);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

nlohmann::json option_values(const CLI::App& app) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto* opt : app.get_options()) {
        if (opt->get_lnames().empty()) continue;
        const auto& name = opt->get_lnames().front();
        if (name == "help" || name == "config") continue;
        const auto& results = opt->results();
        if (results.empty()) {
            j[name] = opt->get_default_str();
        } else if (results.size() == 1) {
            j[name] = results.front();
        } else {
            j[name] = results;
        }
    }
    return j;
}

RunManifest start_manifest(const std::string& command, const Global& g, const CLI::App& app,
                           const CLI::App& sub, const Seed& seed) {
    RunManifest m;
    m.command = command;
    m.argv = g.argv;
    m.config = option_values(sub);
    m.config["global"] = option_values(app);
    m.seeds["master"] = seed.value;
    m.seeds["generated"] = seed.generated;
    return m;
}

void finish(Staging& out, RunManifest& manifest) {
    for (const auto& entry : fs::directory_iterator(out.file("")))
        manifest.outputs.push_back(entry.path().filename().string());
    manifest.outputs.push_back("manifest.json");
    std::sort(manifest.outputs.begin(), manifest.outputs.end());
    write_json(out.file("manifest.json"), manifest.to_json());
    out.commit();
}

void add_bundle_inputs(RunManifest& m, const Bundle& b) {
    for (const char* f : {"corpus.jsonl", "features.feat", "features.ids", "vocab.json", "labels.json", "bundle.json"})
        m.add_input(b.dir / f);
}

// ---------------------------------------------------------------------------
// synth

struct SynthFlags {
    SynthOptions o{.n = 3000, .d = 32, .n_labels = 10, .n_tags = 300, .n_clusters = 10, .noise = 0.3};
    std::size_t embed_dim = 32;
    double embed_spread = 0.5;
};

void cmd_synth(const Global& g, const CLI::App& app, const CLI::App& sub, SynthFlags f) {
    const auto seed = resolve_seed(g);
    f.o.seed = seed.value;
    const auto syn = synth_corpus(f.o);
    const auto w2v = synth_embeddings(syn.tag_cluster, f.embed_dim, f.embed_spread, derive_seed(seed.value, "w2v"));
    const auto wnet = synth_embeddings(syn.tag_cluster, f.embed_dim, f.embed_spread, derive_seed(seed.value, "wnet"));

    Staging out(g.out_dir);
    write_corpus(syn.corpus, out.file("corpus.jsonl"));
    syn.features.save(out.file("features"));
    save_embeddings(w2v, out.file("w2v.txt"));
    save_embeddings(wnet, out.file("wnet.txt"));
    write_json(out.file("clusters.json"), {{"record_cluster", syn.record_cluster}, {"tag_cluster", syn.tag_cluster}});
    auto manifest = start_manifest("synth", g, app, sub, seed);
    finish(out, manifest);
    std::cout << "wrote " << syn.corpus.size() << " synthetic records to " << out.out().string() << '\n';
}

// ---------------------------------------------------------------------------
// ingest

struct IngestFlags {
    std::string corpus;
    std::string features;
    std::size_t tau = 5000;
    std::string w2v;
    std::string wnet;
};

void cmd_ingest(const Global& g, const CLI::App& app, const CLI::App& sub, const IngestFlags& f) {
    const auto seed = resolve_seed(g);
    const Corpus raw = read_corpus(f.corpus);
    FeatureStore features = FeatureStore::open(f.features);
    const bool any_split = std::any_of(raw.records().begin(), raw.records().end(),
                                       [](const auto& r) { return r.split.has_value(); });
    const auto split_seed = derive_seed(seed.value, "splits");
    SplitSpec splits = any_split ? splits_from_records(raw) : make_splits(raw.size(), kDefaultSplitFractions, split_seed);
    Dataset data = prepare_dataset(raw, features, splits, f.tau);

    nlohmann::json emb = {{"w2v", nullptr}, {"wnet", nullptr}};
    auto report = data.report;
    for (const auto& [key, path] : {std::pair{"w2v", f.w2v}, std::pair{"wnet", f.wnet}}) {
        if (path.empty()) continue;
        const auto dict = load_embeddings(path);
        std::size_t missing = 0;
        for (const auto& t : data.vocab.tokens())
            if (!dict.find(t)) ++missing;
        if (missing > 0)
            report.warnings.push_back(std::string(key) + ": " + std::to_string(missing) + " of " +
                                      std::to_string(data.vocab.size()) + " vocabulary tags have no embedding");
        if (dict.duplicate_tokens > 0)
            report.warnings.push_back(std::string(key) + ": " + std::to_string(dict.duplicate_tokens) +
                                      " duplicate tokens (last entry kept)");
        emb[key] = fs::absolute(path).lexically_normal().string();
    }

    Staging out(g.out_dir);
    write_corpus(with_splits(raw, splits), out.file("corpus.jsonl"));
    data.features.save(out.file("features"));
    write_json(out.file("vocab.json"), {{"tau", f.tau},
                                        {"fingerprint", data.vocab.fingerprint()},
                                        {"truncated", report.vocabulary_truncated},
                                        {"tokens", data.vocab.tokens()}});
    write_json(out.file("labels.json"), data.corpus.labels().tokens());
    write_json(out.file("ingest_report.json"), {{"records", report.records},
                                                {"dropped_tags", report.dropped_tags},
                                                {"records_without_tags", report.records_without_tags},
                                                {"vocabulary_size", report.vocabulary_size},
                                                {"vocabulary_truncated", report.vocabulary_truncated},
                                                {"split_sizes", {splits.train.size(), splits.val.size(), splits.test.size()}},
                                                {"warnings", report.warnings}});
    write_json(out.file("bundle.json"), {{"version", 1},
                                         {"tau", f.tau},
                                         {"vocab_fingerprint", data.vocab.fingerprint()},
                                         {"records", raw.size()},
                                         {"feature_dim", data.features.dim()},
                                         {"splits_from_file", any_split},
                                         {"embeddings", emb}});
    auto manifest = start_manifest("ingest", g, app, sub, seed);
    manifest.seeds["splits"] = split_seed;
    manifest.add_input(f.corpus);
    manifest.add_input(f.features + ".feat");
    manifest.add_input(f.features + ".ids");
    if (!f.w2v.empty()) manifest.add_input(f.w2v);
    if (!f.wnet.empty()) manifest.add_input(f.wnet);
    finish(out, manifest);

    std::cout << "bundle " << out.out().string() << ": " << report.records << " records, vocabulary "
              << report.vocabulary_size << ", " << report.dropped_tags << " tag occurrences dropped\n";
    for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
}

// ---------------------------------------------------------------------------
// index

struct IndexFlags {
    std::string bundle;
    std::string n = "id";
    bool normalize = false;
    bool linear_scan = false;
};

std::shared_ptr<const TagVocabulary> vocab_ptr(const Bundle& b) {
    return std::make_shared<const TagVocabulary>(b.data.vocab);
}

void cmd_index(const Global& g, const CLI::App& app, const CLI::App& sub, const IndexFlags& f) {
    const auto seed = resolve_seed(g);
    const auto n = parse_encoding(f.n);
    const auto bundle = load_bundle(f.bundle);
    const auto dicts = bundle.embeddings({n});
    auto index = NeighborIndex::build(bundle.data.corpus, bundle.data.splits.train,
                                      Encoder(n, vocab_ptr(bundle), dicts, f.normalize), !f.linear_scan);
    Staging out(g.out_dir);
    const auto name = "index_" + f.n + ".tnix";
    index.save(out.file(name));
    auto manifest = start_manifest("index", g, app, sub, seed);
    add_bundle_inputs(manifest, bundle);
    if (auto p = bundle.embedding_path(n)) manifest.add_input(*p);
    finish(out, manifest);
    std::cout << "indexed " << index.pool_size() << " train records (" << f.n << ") into "
              << (out.out() / name).string() << '\n';
}

// ---------------------------------------------------------------------------
// train

struct ModelFlags {
    std::string arch = "ltn";
    std::string n = "id";
    std::string f;
    std::size_t m = 3;
    std::size_t m_max = 6;
    std::size_t hidden = 500;
    double dropout = 0.5;
    bool allvecs_bias = false;
    std::string order = "ascending";
    std::string lstm_output = "tanh";
    bool normalize = false;
};

struct TrainFlags {
    std::size_t batch = 64;
    double lr = 1e-4;
    double lambda = 3e-4;
    std::optional<std::size_t> min_epochs;
    std::optional<std::size_t> max_epochs;
    std::size_t patience = 2;
    std::string stop_metric = "val_map_lab";
    std::size_t samples = 10;
    std::uint64_t cap = kDefaultEnumerationCap;
    bool no_timing = false;
};

void add_model_flags(CLI::App* s, ModelFlags& f) {
    s->add_option("--arch", f.arch, "vonly, ltn, rtn, ltn_vecs, ltn_allvecs, ltwin, ltwin_rnn, ltwin_2rnn, lzip")
        ->capture_default_str();
    s->add_option("--n", f.n, "Neighbor-retrieval encoding: id, w2v, wnet")->capture_default_str();
    s->add_option("--f", f.f, "Encoding fed to joint models: id, w2v, wnet");
    s->add_option("--m", f.m, "Neighbors per neighborhood")->capture_default_str();
    s->add_option("--M", f.m_max, "Nearest records neighborhoods are drawn from")->capture_default_str();
    s->add_option("--hidden", f.hidden, "Hidden layer width h")->capture_default_str();
    s->add_option("--dropout", f.dropout, "Dropout probability")->capture_default_str();
    s->add_flag("--allvecs-bias", f.allvecs_bias, "Give the ltn_allvecs neighbor layer a bias");
    s->add_option("--order", f.order, "Neighbor order fed to recurrent models: ascending, descending")
        ->capture_default_str();
    s->add_option("--lstm-output", f.lstm_output, "LSTM hidden output: tanh or identity")->capture_default_str();
    s->add_flag("--normalize-embeddings", f.normalize, "L2-normalize semantic metadata vectors");
}

void add_train_flags(CLI::App* s, TrainFlags& f) {
    s->add_option("--batch", f.batch, "Batch size")->capture_default_str();
    s->add_option("--lr", f.lr, "RMSProp learning rate")->capture_default_str();
    s->add_option("--lambda", f.lambda, "L2 weight")->capture_default_str();
    s->add_option("--min-epochs", f.min_epochs, "Minimum epochs (default 3 visual, 5 joint)");
    s->add_option("--max-epochs", f.max_epochs, "Maximum epochs (default 10 visual, 15 joint)");
    s->add_option("--patience", f.patience, "Epochs without improvement before stopping")->capture_default_str();
    s->add_option("--stop-metric", f.stop_metric, "val_map_lab or val_loss")->capture_default_str();
    s->add_option("--samples", f.samples, "Neighborhoods averaged when not enumerating (T)")->capture_default_str();
    s->add_option("--cap", f.cap, "Enumerate all neighborhoods up to this many")->capture_default_str();
    s->add_flag("--no-timing", f.no_timing, "Write 0 in the wall_seconds history column");
}

TrainConfig train_config(const TrainFlags& f, std::size_t threads) {
    TrainConfig c;
    c.batch_size = f.batch;
    c.learning_rate = f.lr;
    c.lambda = f.lambda;
    c.min_epochs = f.min_epochs;
    c.max_epochs = f.max_epochs;
    c.patience = f.patience;
    if (f.stop_metric == "val_loss") {
        c.stop_metric = StopMetric::val_loss;
    } else if (f.stop_metric != "val_map_lab") {
        throw UsageError("--stop-metric must be val_map_lab or val_loss");
    }
    c.samples = f.samples;
    c.enumeration_cap = f.cap;
    c.threads = threads;
    c.record_timing = !f.no_timing;
    c.validate();
    return c;
}

Experiment experiment(const ModelFlags& f) {
    Experiment e;
    e.arch = parse_architecture(f.arch);
    e.n = parse_encoding(f.n);
    if (!f.f.empty() && f.f != "none") e.f = parse_encoding(f.f);
    e.m = f.m;
    e.m_max = f.m_max;
    if (e.f && !is_joint(e.arch))
        throw UsageError(f.arch + " is a visual model and takes no --f encoding");
    if (!e.f && is_joint(e.arch)) throw UsageError(f.arch + " is a joint model and needs --f");
    return e;
}

std::vector<Encoding> needed_encodings(const ModelConfig& c) {
    std::vector<Encoding> out;
    if (uses_neighbors(c.arch)) out.push_back(c.neighbor_encoding);
    if (c.feed_encoding) out.push_back(*c.feed_encoding);
    return out;
}

/// Everything a model needs around a bundle: dictionaries, index, input assembly.
struct Context {
    EmbeddingSet dicts;
    std::optional<NeighborIndex> index;
    std::optional<InputAssembler> inputs;

    Context(const Bundle& b, const ModelConfig& c, bool normalize, const std::string& index_path) {
        dicts = b.embeddings(needed_encodings(c));
        const auto vocab = vocab_ptr(b);
        if (uses_neighbors(c.arch)) {
            Encoder enc(c.neighbor_encoding, vocab, dicts, normalize);
            index = index_path.empty()
                        ? NeighborIndex::build(b.data.corpus, b.data.splits.train, std::move(enc))
                        : NeighborIndex::load(index_path, b.data.corpus, std::move(enc));
        }
        std::optional<Encoder> feed;
        if (c.feed_encoding) feed = Encoder(*c.feed_encoding, vocab, dicts, normalize);
        inputs.emplace(b.data, std::move(feed));
    }

    TrainingData data(const Bundle& b) const { return {b.data, index ? &*index : nullptr, *inputs}; }
};

ModelConfig apply_model_flags(ModelConfig c, const ModelFlags& f) {
    c.allvecs_neighbor_bias = f.allvecs_bias;
    if (f.order == "descending") {
        c.order = NeighborOrder::descending;
    } else if (f.order != "ascending") {
        throw UsageError("--order must be ascending or descending");
    }
    if (f.lstm_output == "identity") {
        c.lstm_output = ad::CellOutput::identity;
    } else if (f.lstm_output != "tanh") {
        throw UsageError("--lstm-output must be tanh or identity");
    }
    c.validate();
    return c;
}

void cmd_train(const Global& g, const CLI::App& app, const CLI::App& sub, const std::string& bundle_dir,
               const std::string& index_path, const ModelFlags& mf, const TrainFlags& tf) {
    const auto seed = resolve_seed(g);
    const auto e = experiment(mf);
    auto tc = train_config(tf, g.threads);
    const auto bundle = load_bundle(bundle_dir);
    EmbeddingSet probe = bundle.embeddings([&] {
        std::vector<Encoding> v;
        if (uses_neighbors(e.arch)) v.push_back(e.n);
        if (e.f) v.push_back(*e.f);
        return v;
    }());
    const auto config = apply_model_flags(model_config(e, bundle.data, probe, mf.hidden, mf.dropout), mf);
    Context ctx(bundle, config, mf.normalize, index_path);

    tc.seed = derive_seed(seed.value, "train");
    const auto init_seed = derive_seed(seed.value, "init");
    auto model = ModelInstance::create(config, init_seed);
    tc.dump_path = fs::path(g.out_dir) / "divergence_dump.tnck";
    fs::create_directories(g.out_dir);

    std::cerr << "training " << e.name() << " on " << bundle.data.splits.train.size() << " images\n";
    const auto result = train(model, ctx.data(bundle), tc, std::nullopt, [](const EpochRecord& r) {
        std::fprintf(stderr, "epoch %zu  loss %.5f  val mAP_lab %.2f  mAP_img %.2f\n", r.epoch, r.train_loss,
                     r.val_map_lab, r.val_map_img);
    });

    Staging out(g.out_dir);
    save_checkpoint(out.file("model.tnck"), model,
                    {tc, bundle.data.vocab.fingerprint(), bundle.data.corpus.labels().tokens()}, &result.state);
    {
        std::ofstream os(out.file("history.csv"));
        write_history_csv(os, result.history);
    }
    auto manifest = start_manifest("train", g, app, sub, seed);
    manifest.seeds["init"] = init_seed;
    manifest.seeds["train"] = tc.seed;
    manifest.config["model"] = config;
    manifest.config["train"] = tc;
    add_bundle_inputs(manifest, bundle);
    for (auto enc : needed_encodings(config))
        if (auto p = bundle.embedding_path(enc)) manifest.add_input(*p);
    if (!index_path.empty()) manifest.add_input(index_path);
    finish(out, manifest);
    std::cout << "best epoch " << result.state.best_epoch << " of " << result.history.size()
              << ", checkpoint " << (out.out() / "model.tnck").string() << '\n';
}

// ---------------------------------------------------------------------------
// eval / predict

struct Loaded {
    Checkpoint ckpt;
    Bundle bundle;
};

Loaded load_pair(const std::string& checkpoint, const std::string& bundle_dir) {
    auto ckpt = load_checkpoint(checkpoint);
    auto bundle = load_bundle(bundle_dir);
    if (ckpt.meta.vocab_fingerprint != bundle.data.vocab.fingerprint())
        throw DataError("checkpoint " + checkpoint + " was trained on a different tag vocabulary than bundle " +
                        bundle_dir + " (vocabulary hash mismatch)");
    if (ckpt.meta.labels != bundle.data.corpus.labels().tokens())
        throw DataError("checkpoint " + checkpoint + " and bundle " + bundle_dir + " have different label sets");
    return {std::move(ckpt), std::move(bundle)};
}

struct EvalFlags {
    std::string checkpoint;
    std::string bundle;
    std::string split = "test";
    std::size_t k = 3;
    std::string index;
    bool normalize = false;
    std::optional<std::size_t> samples;
    std::optional<std::uint64_t> cap;
};

void cmd_eval(const Global& g, const CLI::App& app, const CLI::App& sub, const EvalFlags& f) {
    const auto split = parse_split(f.split);
    if (f.k == 0) throw UsageError("--k must be at least 1");
    auto [ckpt, bundle] = load_pair(f.checkpoint, f.bundle);
    Context ctx(bundle, ckpt.model.config(), f.normalize, f.index);
    auto tc = ckpt.meta.train;
    tc.threads = g.threads;
    if (f.samples) tc.samples = *f.samples;
    if (f.cap) tc.enumeration_cap = *f.cap;
    const auto report = evaluate_split(ckpt.model, ctx.data(bundle), split, tc, f.k);

    const std::string name(architecture_name(ckpt.model.config().arch));
    const std::pair<std::string, EvalReport> rows[] = {{name, report}};
    Staging out(g.out_dir);
    nlohmann::json j = report;
    j["model"] = ckpt.model.config();
    j["split"] = f.split;
    write_json(out.file("report.json"), j);
    {
        std::ofstream os(out.file("report.txt"));
        write_table(os, rows);
    }
    {
        std::ofstream os(out.file("report.csv"));
        write_csv(os, rows);
    }
    auto manifest = start_manifest("eval", g, app, sub, {tc.seed, false});
    manifest.seeds["predict"] = derive_seed(tc.seed, "test");
    manifest.add_input(f.checkpoint);
    add_bundle_inputs(manifest, bundle);
    finish(out, manifest);
    write_table(std::cout, rows);
}

struct PredictFlags {
    std::string checkpoint;
    std::string bundle;
    std::string id;
    std::string feature;
    std::string tags;
    std::size_t k = 3;
    std::string index;
    bool normalize = false;
    bool json = false;
};

std::vector<float> parse_floats(const std::string& s) {
    std::vector<float> out;
    for (const auto& tok : split_list(s)) {
        float v = 0.0f;
        const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
        if (ec != std::errc{} || p != tok.data() + tok.size())
            throw UsageError("--feature: '" + tok + "' is not a number");
        out.push_back(v);
    }
    return out;
}

void cmd_predict(const Global& g, const PredictFlags& f) {
    if (f.id.empty() == f.feature.empty()) throw UsageError("give either --id or --feature (with optional --tags)");
    auto [ckpt, bundle] = load_pair(f.checkpoint, f.bundle);
    const auto& data = bundle.data;
    Context ctx(bundle, ckpt.model.config(), f.normalize, f.index);

    ImageRecord query;
    std::vector<float> adhoc;
    std::span<const float> feature;
    if (!f.id.empty()) {
        const auto idx = data.corpus.find(f.id);
        if (!idx) throw DataError("unknown image id '" + f.id + "'");
        query = data.corpus.record(*idx);
        feature = data.feature(*idx);
    } else {
        adhoc = parse_floats(f.feature);
        if (adhoc.size() != data.features.dim())
            throw UsageError("--feature has " + std::to_string(adhoc.size()) + " values, expected " +
                             std::to_string(data.features.dim()));
        feature = adhoc;
        query.id = "<query>";
        for (auto& t : split_list(f.tags))
            if (data.vocab.contains(t)) query.tags.push_back(t);
    }

    PredictOptions options;
    options.enumeration_cap = ckpt.meta.train.enumeration_cap;
    options.samples = ckpt.meta.train.samples;
    options.seed = derive_seed(g.seed.value_or(ckpt.meta.train.seed), "predict");
    const auto p = predict(ckpt.model, *ctx.inputs, ctx.index ? &*ctx.index : nullptr, query, feature, options);

    std::vector<std::size_t> order(static_cast<std::size_t>(p.scores.size()));
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p.scores[a] > p.scores[b]; });
    order.resize(std::min(f.k, order.size()));
    const auto& labels = data.corpus.labels();

    if (f.json) {
        nlohmann::json j;
        j["id"] = query.id;
        for (auto l : order)
            j["labels"].push_back({{"label", labels.token(l)}, {"score", p.scores[static_cast<Eigen::Index>(l)]}});
        j["neighbors"] = nlohmann::json::array();
        for (const auto& n : p.neighbors)
            j["neighbors"].push_back({{"id", data.corpus.record(n.record).id}, {"distance", n.distance}});
        j["forwards"] = p.forwards;
        j["sampled"] = p.sampled;
        j["padded"] = p.padded;
        std::cout << j.dump(2) << '\n';
        return;
    }
    std::printf("%s\n", query.id.c_str());
    for (auto l : order)
        std::printf("  %-24s %9.4f\n", labels.token(l).c_str(), p.scores[static_cast<Eigen::Index>(l)]);
    if (!p.neighbors.empty()) {
        std::printf("neighbors (%zu, %s over %zu forward passes)\n", p.neighbors.size(),
                    p.sampled ? "sampled" : "enumerated", p.forwards);
        for (const auto& n : p.neighbors)
            std::printf("  %-24s %9.6f\n", data.corpus.record(n.record).id.c_str(), n.distance);
    }
}

// ---------------------------------------------------------------------------
// sweep / report

struct SweepFlags {
    std::string bundle;
    std::string archs = "vonly,ltn,ltwin";
    std::string ns = "id";
    std::string fs = "w2v";
    std::string grid = "3:6,6:12,12:24";
    std::size_t splits = 5;
    std::optional<std::size_t> tau;
};

std::vector<std::pair<std::size_t, std::size_t>> parse_grid(const std::string& s) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& cell : split_list(s)) {
        const auto colon = cell.find(':');
        std::size_t m = 0, big = 0;
        if (colon == std::string::npos ||
            std::from_chars(cell.data(), cell.data() + colon, m).ec != std::errc{} ||
            std::from_chars(cell.data() + colon + 1, cell.data() + cell.size(), big).ec != std::errc{})
            throw UsageError("--grid cells look like m:M, got '" + cell + "'");
        out.emplace_back(m, big);
    }
    if (out.empty()) throw UsageError("--grid is empty");
    return out;
}

void cmd_sweep(const Global& g, const CLI::App& app, const CLI::App& sub, const SweepFlags& sf,
               const ModelFlags& mf, const TrainFlags& tf) {
    const auto seed = resolve_seed(g);
    const auto grid = parse_grid(sf.grid);
    std::vector<Experiment> experiments;
    std::vector<Encoding> needed;
    for (const auto& a : split_list(sf.archs)) {
        const auto arch = parse_architecture(a);
        if (!uses_neighbors(arch)) {
            experiments.push_back({arch, Encoding::id, std::nullopt, grid.front().first, grid.front().second});
            continue;
        }
        for (const auto& n : split_list(sf.ns)) {
            const auto enc = parse_encoding(n);
            needed.push_back(enc);
            for (const auto& [m, big] : grid) {
                if (!is_joint(arch)) {
                    experiments.push_back({arch, enc, std::nullopt, m, big});
                    continue;
                }
                bool any = false;
                for (const auto& fe : split_list(sf.fs)) {
                    if (fe == "none") continue;
                    experiments.push_back({arch, enc, parse_encoding(fe), m, big});
                    needed.push_back(parse_encoding(fe));
                    any = true;
                }
                if (!any) throw UsageError(a + " is a joint model; --fs must name at least one encoding");
            }
        }
    }

    const auto bundle = load_bundle(sf.bundle);
    ProtocolOptions po;
    po.splits = sf.splits;
    po.seed = seed.value;
    po.tau = sf.tau.value_or(bundle.info.at("tau").get<std::size_t>());
    po.hidden = mf.hidden;
    po.dropout = mf.dropout;
    po.normalize_embeddings = mf.normalize;
    po.train = train_config(tf, 1);
    po.embeddings = bundle.embeddings(needed);
    po.threads = g.threads;
    const auto report = run_protocol(bundle.raw, bundle.data.features, experiments, po);

    Staging out(g.out_dir);
    {
        std::ofstream os(out.file("sweep.csv"));
        write_sweep_csv(os, report);
    }
    std::vector<std::pair<std::string, AggregateReport>> rows;
    nlohmann::json j;
    for (const auto& run : report.runs) {
        nlohmann::json r = run.report;
        r["experiment"] = run.experiment.name();
        r["repetition"] = run.repetition;
        j["runs"].push_back(r);
    }
    for (const auto& [e, agg] : report.aggregates) {
        rows.emplace_back(e.name(), agg);
        nlohmann::json a = agg;
        a["experiment"] = e.name();
        j["aggregates"].push_back(a);
    }
    write_json(out.file("sweep.json"), j);
    {
        std::ofstream os(out.file("sweep.txt"));
        write_table(os, rows);
    }
    auto manifest = start_manifest("sweep", g, app, sub, seed);
    manifest.config["train"] = po.train;
    add_bundle_inputs(manifest, bundle);
    finish(out, manifest);
    write_table(std::cout, rows);
}

void cmd_report(const std::vector<std::string>& files) {
    std::vector<std::pair<std::string, EvalReport>> rows;
    for (const auto& file : files) {
        const auto j = read_json(file);
        EvalReport r;
        try {
            r.map_lab = j.at("mAP_lab");
            r.map_img = j.at("mAP_img");
            r.rec_lab = j.at("rec_lab");
            r.prec_lab = j.at("prec_lab");
            r.rec_img = j.at("rec_img");
            r.prec_img = j.at("prec_img");
            const auto& b = j.at("upper_bound");
            r.bound = {b.at("rec_lab"), b.at("prec_lab"), b.at("rec_img"), b.at("prec_img")};
        } catch (const nlohmann::json::exception& e) {
            throw DataError(file + ": not an evaluation report (" + e.what() + ")");
        }
        std::string name = j.contains("model") ? j["model"].value("arch", file) : file;
        if (j.contains("model") && j["model"].contains("n") && name != "vonly") {
            name += " n:" + j["model"]["n"].get<std::string>();
            if (!j["model"]["f"].is_null()) name += " f:" + j["model"]["f"].get<std::string>();
        }
        rows.emplace_back(name, r);
    }
    write_table(std::cout, rows);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tagnet: image annotation with neighbor metadata fusion"};
    app.require_subcommand(1);
    app.set_config("--config", "", "TOML/INI file mirroring the command-line flags (flags win)");
    Global g;
    g.argv.assign(argv, argv + argc);
    app.add_option("--seed", g.seed, "Master seed; generated and recorded when omitted");
    app.add_option("--threads", g.threads, "Worker threads (results do not depend on it)")->capture_default_str();
    app.add_option("--out-dir", g.out_dir, "Output directory")->capture_default_str();

    std::function<void()> run;

    auto* synth = app.add_subcommand("synth", "Generate a latent-cluster synthetic corpus");
    SynthFlags sy;
    synth->add_option("--n", sy.o.n, "Images")->capture_default_str();
    synth->add_option("--d", sy.o.d, "Feature dimension")->capture_default_str();
    synth->add_option("--labels", sy.o.n_labels, "Labels")->capture_default_str();
    synth->add_option("--tags", sy.o.n_tags, "Distinct tags")->capture_default_str();
    synth->add_option("--clusters", sy.o.n_clusters, "Latent clusters")->capture_default_str();
    synth->add_option("--noise", sy.o.noise, "Tag replacement probability")->capture_default_str();
    synth->add_option("--sigma", sy.o.feature_sigma, "Feature noise around the cluster centroid")->capture_default_str();
    synth->add_option("--extra-label-prob", sy.o.extra_label_prob, "Chance of a secondary cluster label")
        ->capture_default_str();
    synth->add_option("--embed-dim", sy.embed_dim, "Synthetic embedding dimension")->capture_default_str();
    synth->add_option("--embed-spread", sy.embed_spread, "Embedding noise around the cluster direction")
        ->capture_default_str();
    synth->callback([&] { run = [&] { cmd_synth(g, app, *synth, sy); }; });

    auto* ingest = app.add_subcommand("ingest", "Validate a corpus and write a bundle");
    IngestFlags in;
    ingest->add_option("--corpus", in.corpus, "JSON-lines corpus")->required();
    ingest->add_option("--features", in.features, "Feature file prefix (<prefix>.feat, <prefix>.ids)")->required();
    ingest->add_option("--tau", in.tau, "Tag vocabulary size")->capture_default_str();
    ingest->add_option("--w2v", in.w2v, "w2v embedding dictionary (text format)");
    ingest->add_option("--wnet", in.wnet, "wnet embedding dictionary (text format)");
    ingest->callback([&] { run = [&] { cmd_ingest(g, app, *ingest, in); }; });

    auto* index = app.add_subcommand("index", "Build the neighbor index over the train split");
    IndexFlags ix;
    index->add_option("--bundle", ix.bundle, "Bundle directory")->required();
    index->add_option("--n", ix.n, "Encoding: id, w2v, wnet")->capture_default_str();
    index->add_flag("--normalize-embeddings", ix.normalize, "L2-normalize semantic vectors");
    index->add_flag("--linear-scan", ix.linear_scan, "Skip the inverted index for binary vectors");
    index->callback([&] { run = [&] { cmd_index(g, app, *index, ix); }; });

    auto* trn = app.add_subcommand("train", "Train a model on a bundle");
    std::string train_bundle, train_index;
    ModelFlags mf;
    TrainFlags tf;
    trn->add_option("--bundle", train_bundle, "Bundle directory")->required();
    trn->add_option("--index", train_index, "Prebuilt index (built on the fly when omitted)");
    add_model_flags(trn, mf);
    add_train_flags(trn, tf);
    trn->callback([&] { run = [&] { cmd_train(g, app, *trn, train_bundle, train_index, mf, tf); }; });

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    EvalFlags ef;
    ev->add_option("--checkpoint", ef.checkpoint, "Checkpoint file")->required();
    ev->add_option("--bundle", ef.bundle, "Bundle directory")->required();
    ev->add_option("--split", ef.split, "train, val or test")->capture_default_str();
    ev->add_option("--k", ef.k, "Labels assigned per image")->capture_default_str();
    ev->add_option("--index", ef.index, "Prebuilt index");
    ev->add_option("--samples", ef.samples, "Override T");
    ev->add_option("--cap", ef.cap, "Override the enumeration cap");
    ev->add_flag("--normalize-embeddings", ef.normalize, "L2-normalize semantic vectors");
    ev->callback([&] { run = [&] { cmd_eval(g, app, *ev, ef); }; });

    auto* pr = app.add_subcommand("predict", "Rank labels for one image");
    PredictFlags pf;
    pr->add_option("--checkpoint", pf.checkpoint, "Checkpoint file")->required();
    pr->add_option("--bundle", pf.bundle, "Bundle directory")->required();
    pr->add_option("--id", pf.id, "Image id from the bundle");
    pr->add_option("--feature", pf.feature, "Comma-separated feature vector of an ad-hoc image");
    pr->add_option("--tags", pf.tags, "Comma-separated tags of the ad-hoc image");
    pr->add_option("--k", pf.k, "Labels to print")->capture_default_str();
    pr->add_option("--index", pf.index, "Prebuilt index");
    pr->add_flag("--normalize-embeddings", pf.normalize, "L2-normalize semantic vectors");
    pr->add_flag("--json", pf.json, "Print JSON");
    pr->callback([&] { run = [&] { cmd_predict(g, pf); }; });

    auto* sw = app.add_subcommand("sweep", "Train and evaluate a grid over several splits");
    SweepFlags sf;
    ModelFlags swm;
    TrainFlags swt;
    sw->add_option("--bundle", sf.bundle, "Bundle directory")->required();
    sw->add_option("--archs", sf.archs, "Comma-separated architectures")->capture_default_str();
    sw->add_option("--ns", sf.ns, "Comma-separated neighbor encodings")->capture_default_str();
    sw->add_option("--fs", sf.fs, "Comma-separated feed encodings for joint models")->capture_default_str();
    sw->add_option("--grid", sf.grid, "Comma-separated m:M pairs")->capture_default_str();
    sw->add_option("--splits", sf.splits, "Repetitions, each on fresh splits")->capture_default_str();
    sw->add_option("--tau", sf.tau, "Vocabulary size (default: the bundle's)");
    sw->add_option("--hidden", swm.hidden, "Hidden layer width h")->capture_default_str();
    sw->add_option("--dropout", swm.dropout, "Dropout probability")->capture_default_str();
    sw->add_flag("--normalize-embeddings", swm.normalize, "L2-normalize semantic vectors");
    add_train_flags(sw, swt);
    sw->callback([&] { run = [&] { cmd_sweep(g, app, *sw, sf, swm, swt); }; });

    auto* rp = app.add_subcommand("report", "Tabulate evaluation reports");
    std::vector<std::string> report_files;
    rp->add_option("reports", report_files, "report.json files")->required();
    rp->callback([&] { run = [&] { cmd_report(report_files); }; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        run();
        return 0;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
