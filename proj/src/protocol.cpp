#include "tagnet/errors.hpp"
#include "tagnet/parallel.hpp"
#include "tagnet/training.hpp"

#include <cstdio>
#include <memory>

namespace tagnet {

std::string Experiment::name() const {
    std::string s(architecture_name(arch));
    s += " n:";
    s += encoding_name(n);
    if (f) {
        s += " f:";
        s += encoding_name(*f);
    }
    s += " (" + std::to_string(m) + "," + std::to_string(m_max) + ")";
    return s;
}

ModelConfig model_config(const Experiment& e, const Dataset& data, const EmbeddingSet& dicts,
                         std::size_t hidden, double dropout) {
    ModelConfig c;
    c.arch = e.arch;
    c.hidden = hidden;
    c.feature_dim = data.features.dim();
    c.labels = data.corpus.labels().size();
    c.m = e.m;
    c.m_max = e.m_max;
    c.neighbor_encoding = e.n;
    c.feed_encoding = e.f;
    c.dropout = dropout;
    if (e.f) {
        if (*e.f == Encoding::id) {
            c.meta_dim = data.vocab.size();
        } else {
            const auto dict = dicts.get(*e.f);
            if (!dict)
                throw UsageError("feed encoding '" + std::string(encoding_name(*e.f)) +
                                 "' requires a loaded embedding dictionary");
            c.meta_dim = dict->dim();
        }
    }
    c.validate();
    return c;
}

ProtocolReport run_protocol(const Corpus& raw, const FeatureStore& features,
                            std::span<const Experiment> experiments, const ProtocolOptions& options) {
    if (options.splits == 0) throw UsageError("the protocol needs at least one split");
    if (experiments.empty()) throw UsageError("no experiments given");
    options.train.validate();

    // Datasets are shared read-only by every cell of their repetition.
    std::vector<std::unique_ptr<Dataset>> datasets(options.splits);
    for (std::size_t r = 0; r < options.splits; ++r) {
        const auto splits = make_splits(raw.size(), options.fractions, derive_seed(options.seed, "protocol-split", r));
        datasets[r] = std::make_unique<Dataset>(prepare_dataset(raw, features, splits, options.tau));
    }
    // Validate every experiment before the first training run.
    for (const auto& e : experiments) {
        model_config(e, *datasets.front(), options.embeddings, options.hidden, options.dropout);
        if (e.n != Encoding::id && !options.embeddings.get(e.n))
            throw UsageError("neighbor encoding '" + std::string(encoding_name(e.n)) +
                             "' requires a loaded embedding dictionary");
    }

    ProtocolReport report;
    report.runs.resize(experiments.size() * options.splits);
    parallel_for(report.runs.size(), options.threads, [&](std::size_t cell) {
        const auto& e = experiments[cell / options.splits];
        const std::size_t r = cell % options.splits;
        const Dataset& data = *datasets[r];
        const std::uint64_t cell_seed = derive_seed(derive_seed(options.seed, e.name()), "repetition", r);

        auto vocab = std::make_shared<const TagVocabulary>(data.vocab);
        std::optional<NeighborIndex> index;
        if (uses_neighbors(e.arch))
            index = NeighborIndex::build(data.corpus, data.splits.train,
                                         Encoder(e.n, vocab, options.embeddings, options.normalize_embeddings));
        std::optional<Encoder> feed;
        if (e.f) feed = Encoder(*e.f, vocab, options.embeddings, options.normalize_embeddings);
        const InputAssembler inputs(data, feed);
        const TrainingData in{data, index ? &*index : nullptr, inputs};

        auto model = ModelInstance::create(model_config(e, data, options.embeddings, options.hidden, options.dropout),
                                           derive_seed(cell_seed, "init"));
        TrainConfig tc = options.train;
        tc.seed = derive_seed(cell_seed, "train");
        tc.threads = 1;
        auto result = train(model, in, tc);

        auto& run = report.runs[cell];
        run.experiment = e;
        run.repetition = r;
        run.history = std::move(result.history);
        run.report = evaluate_split(model, in, Split::test, tc, options.k);
    });

    for (std::size_t i = 0; i < experiments.size(); ++i) {
        std::vector<EvalReport> reps;
        for (std::size_t r = 0; r < options.splits; ++r) reps.push_back(report.runs[i * options.splits + r].report);
        report.aggregates.emplace_back(experiments[i], aggregate(reps));
    }
    return report;
}

void write_sweep_csv(std::ostream& os, const ProtocolReport& report) {
    os << "arch,n,f,m,M,repetition";
    for (auto c : kMetricColumns) os << ',' << c;
    for (auto c : kMetricColumns) os << ',' << c << "_std";
    os << '\n';
    char buf[32];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.2f", round2(v));
        return std::string(buf);
    };
    auto prefix = [&](const Experiment& e) {
        os << architecture_name(e.arch) << ',' << encoding_name(e.n) << ','
           << (e.f ? std::string(encoding_name(*e.f)) : std::string()) << ',' << e.m << ',' << e.m_max << ',';
    };
    for (const auto& run : report.runs) {
        prefix(run.experiment);
        os << run.repetition;
        for (double v : metric_values(run.report)) os << ',' << num(v);
        for (std::size_t i = 0; i < kMetricColumns.size(); ++i) os << ',';
        os << '\n';
    }
    for (const auto& [e, agg] : report.aggregates) {
        prefix(e);
        os << "mean";
        for (const auto& s : agg.metrics) os << ',' << num(s.mean);
        for (const auto& s : agg.metrics) os << ',' << num(s.std);
        os << '\n';
    }
}

}  // namespace tagnet
