#include "tagnet/training.hpp"

#include "tagnet/errors.hpp"
#include "tagnet/parallel.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

namespace tagnet {

void TrainConfig::validate() const {
    if (batch_size == 0) throw UsageError("batch size must be at least 1");
    if (!(learning_rate > 0.0)) throw UsageError("learning rate must be positive");
    if (!(lambda >= 0.0)) throw UsageError("lambda must be non-negative");
    if (!(rms_decay >= 0.0 && rms_decay < 1.0)) throw UsageError("rmsprop decay must lie in [0, 1)");
    if (samples == 0) throw UsageError("sample count T must be at least 1");
    if (min_epochs && max_epochs && *min_epochs > *max_epochs)
        throw UsageError("min epochs exceed max epochs");
    if (max_epochs && *max_epochs == 0) throw UsageError("max epochs must be at least 1");
}

std::pair<std::size_t, std::size_t> TrainConfig::epoch_bounds(Architecture arch) const {
    auto [lo, hi] = default_epoch_bounds(arch);
    if (min_epochs) lo = *min_epochs;
    if (max_epochs) hi = *max_epochs;
    if (min_epochs && !max_epochs) hi = std::max(hi, lo);
    if (max_epochs && !min_epochs) lo = std::min(lo, hi);
    if (lo > hi) throw UsageError("min epochs exceed max epochs");
    return {lo, hi};
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{
        {"batch_size", c.batch_size},
        {"learning_rate", c.learning_rate},
        {"lambda", c.lambda},
        {"rms_decay", c.rms_decay},
        {"rms_epsilon", c.rms_epsilon},
        {"min_epochs", c.min_epochs ? nlohmann::json(*c.min_epochs) : nlohmann::json()},
        {"max_epochs", c.max_epochs ? nlohmann::json(*c.max_epochs) : nlohmann::json()},
        {"patience", c.patience},
        {"stop_metric", c.stop_metric == StopMetric::val_map_lab ? "val_map_lab" : "val_loss"},
        {"seed", c.seed},
        {"enumeration_cap", c.enumeration_cap},
        {"samples", c.samples},
    };
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lambda = j.value("lambda", c.lambda);
    c.rms_decay = j.value("rms_decay", c.rms_decay);
    c.rms_epsilon = j.value("rms_epsilon", c.rms_epsilon);
    if (j.contains("min_epochs") && !j["min_epochs"].is_null()) c.min_epochs = j["min_epochs"].get<std::size_t>();
    if (j.contains("max_epochs") && !j["max_epochs"].is_null()) c.max_epochs = j["max_epochs"].get<std::size_t>();
    c.patience = j.value("patience", c.patience);
    c.stop_metric = j.value("stop_metric", std::string("val_map_lab")) == "val_loss" ? StopMetric::val_loss
                                                                                   : StopMetric::val_map_lab;
    c.seed = j.value("seed", c.seed);
    c.enumeration_cap = j.value("enumeration_cap", c.enumeration_cap);
    c.samples = j.value("samples", c.samples);
}

void write_history_csv(std::ostream& os, std::span<const EpochRecord> history) {
    os << "epoch,train_loss,val_map_lab,val_map_img,wall_seconds\n";
    char buf[160];
    for (const auto& r : history) {
        std::snprintf(buf, sizeof buf, "%zu,%.10f,%.6f,%.6f,%.3f\n", r.epoch, r.train_loss,
                      r.val_map_lab, r.val_map_img, r.wall_seconds);
        os << buf;
    }
}

double batch_loss(ModelInstance& model, const TrainingData& in, std::span<const std::size_t> records,
                  std::span<const NeighborhoodSample> neighborhoods, double lambda, ad::Mode mode,
                  Rng& dropout_rng, bool with_grad) {
    if (records.empty()) throw UsageError("empty batch");
    const bool neighbors = uses_neighbors(model.config().arch);
    if (neighbors && neighborhoods.size() != records.size())
        throw UsageError("every example needs a neighborhood");
    auto& params = model.params();
    if (with_grad) params.zero_grad();

    const double n = static_cast<double>(records.size());
    double total = 0.0;
    for (std::size_t i = 0; i < records.size(); ++i) {
        ad::Tape tape;
        const auto input = in.inputs.assemble(
            records[i], neighbors ? std::span<const Neighbor>(neighborhoods[i].members)
                                  : std::span<const Neighbor>{});
        const auto out = model.forward(tape, input, mode, dropout_rng);
        const auto truth = in.data.corpus.label_bits(records[i]);
        const auto ce = sigmoid_cross_entropy(tape.value(out), truth);
        total += ce.value;
        if (with_grad) tape.backward(out, ce.grad / n);
    }
    total = total / n + ad::l2_penalty(params, lambda, with_grad);
    if (!std::isfinite(total)) throw NumericError("non-finite training loss");
    return total;
}

std::vector<NeighborList> neighbor_lists(const NeighborIndex& index, const Corpus& corpus,
                                         std::span<const std::size_t> records, std::size_t m_max,
                                         std::size_t threads) {
    std::vector<NeighborList> out(records.size());
    parallel_for(records.size(), threads,
                 [&](std::size_t i) { out[i] = index.query(corpus.record(records[i]), m_max); });
    return out;
}

ScoreMatrix score_records(const ModelInstance& model, const TrainingData& in,
                          std::span<const std::size_t> records, std::span<const NeighborList> neighbors,
                          PredictOptions options, std::size_t threads) {
    const bool uses = uses_neighbors(model.config().arch);
    if (uses && neighbors.size() != records.size())
        throw UsageError("every record needs a neighbor list");
    const auto labels = static_cast<Eigen::Index>(model.config().labels);
    ScoreRows scores(static_cast<Eigen::Index>(records.size()), labels);
    TruthMatrix truth(static_cast<Eigen::Index>(records.size()), labels);
    const std::uint64_t master = options.seed;
    static const NeighborList kNone;
    parallel_for(records.size(), threads, [&](std::size_t i) {
        const auto r = records[i];
        PredictOptions local = options;
        local.seed = derive_seed(master, "image", r);
        const auto p = predict(model, in.inputs, in.data.corpus.record(r), in.data.feature(r),
                               uses ? neighbors[i] : kNone, local);
        const auto row = static_cast<Eigen::Index>(i);
        scores.row(row) = p.scores.transpose();
        const auto bits = in.data.corpus.label_bits(r);
        for (Eigen::Index l = 0; l < labels; ++l) truth(row, l) = bits[static_cast<std::size_t>(l)];
    });
    return ScoreMatrix(std::move(scores), std::move(truth));
}

EvalReport evaluate_split(const ModelInstance& model, const TrainingData& in, Split split,
                          const TrainConfig& config, std::size_t k) {
    const auto& records = in.data.splits.of(split);
    std::vector<NeighborList> lists;
    if (uses_neighbors(model.config().arch)) {
        if (!in.index) throw UsageError("model requires a neighbor index");
        lists = neighbor_lists(*in.index, in.data.corpus, records, model.config().m_max, config.threads);
    }
    PredictOptions options;
    options.enumeration_cap = config.enumeration_cap;
    options.samples = config.samples;
    options.seed = derive_seed(config.seed, "test");
    return evaluate(score_records(model, in, records, lists, options, config.threads), k);
}

namespace {

double mean_cross_entropy(const ScoreMatrix& s) {
    double sum = 0.0;
    const auto labels = static_cast<std::size_t>(s.labels());
    for (Eigen::Index i = 0; i < s.images(); ++i)
        sum += sigmoid_cross_entropy(s.scores.row(i).transpose(), {s.truth.row(i).data(), labels}).value;
    return s.images() > 0 ? sum / static_cast<double>(s.images()) : 0.0;
}

}  // namespace

TrainResult train(ModelInstance& model, const TrainingData& in, const TrainConfig& config,
                  std::optional<TrainState> resume,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
    config.validate();
    const auto& cfg = model.config();
    const auto [min_epochs, max_epochs] = config.epoch_bounds(cfg.arch);
    const auto& train_records = in.data.splits.train;
    const auto& val_records = in.data.splits.val;
    if (train_records.empty()) throw DataError("the train split is empty");
    if (val_records.empty()) throw DataError("the validation split is empty");
    if (in.data.corpus.labels().size() != cfg.labels)
        throw UsageError("model label count differs from the dataset's label vocabulary");

    TrainResult result;
    TrainState& state = result.state;
    if (resume) {
        state = std::move(*resume);
    } else {
        state.optimizer = ad::RmsProp({config.learning_rate, config.rms_decay, config.rms_epsilon});
        state.best_metric = -std::numeric_limits<double>::infinity();
    }

    std::vector<NeighborList> train_lists, val_lists;
    if (uses_neighbors(cfg.arch)) {
        if (!in.index) throw UsageError("model requires a neighbor index");
        train_lists = neighbor_lists(*in.index, in.data.corpus, train_records, cfg.m_max, config.threads);
        val_lists = neighbor_lists(*in.index, in.data.corpus, val_records, cfg.m_max, config.threads);
        for (std::size_t i = 0; i < train_lists.size(); ++i)
            if (train_lists[i].empty())
                throw DataError("no neighbors for training image '" +
                                in.data.corpus.record(train_records[i]).id + "'");
    }

    PredictOptions val_options;
    val_options.enumeration_cap = config.enumeration_cap;
    val_options.samples = config.samples;
    val_options.force_sampling = true;
    val_options.seed = derive_seed(config.seed, "validation");

    ad::ParameterSet best = model.params();
    std::vector<std::size_t> order(train_records.size());

    for (std::size_t epoch = state.epoch + 1; epoch <= max_epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle = make_rng(config.seed, "shuffle", epoch);
        std::shuffle(order.begin(), order.end(), shuffle);
        Rng dropout = make_rng(config.seed, "dropout", epoch);
        Rng sampling = make_rng(config.seed, "neighborhood", epoch);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        std::vector<std::size_t> batch;
        std::vector<NeighborhoodSample> hoods;
        for (std::size_t b = 0; b < order.size(); b += config.batch_size) {
            batch.clear();
            hoods.clear();
            for (std::size_t j = b; j < std::min(order.size(), b + config.batch_size); ++j) {
                batch.push_back(train_records[order[j]]);
                if (!train_lists.empty()) hoods.push_back(draw_neighborhood(train_lists[order[j]], cfg.m, sampling));
            }
            try {
                loss_sum += batch_loss(model, in, batch, hoods, config.lambda, ad::Mode::train, dropout, true);
                state.optimizer.step(model.params());
            } catch (const NumericError& e) {
                std::string where = "training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                    std::to_string(batches + 1) + ": " + e.what();
                if (config.dump_path) {
                    save_checkpoint(*config.dump_path, model, {config, in.data.vocab.fingerprint(),
                                                              in.data.corpus.labels().tokens()},
                                    &state);
                    where += " (state written to " + config.dump_path->string() + ")";
                }
                throw NumericError(where);
            }
            ++batches;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(batches);
        const auto scores = score_records(model, in, val_records, val_lists, val_options, config.threads);
        rec.val_map_lab = map_label(scores).value;
        rec.val_map_img = map_image(scores).value;
        rec.val_loss = mean_cross_entropy(scores);
        if (config.record_timing)
            rec.wall_seconds =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

        const double metric = config.stop_metric == StopMetric::val_map_lab ? rec.val_map_lab : -rec.val_loss;
        if (metric > state.best_metric) {
            state.best_metric = metric;
            state.best_epoch = epoch;
            state.stale_epochs = 0;
            best = model.params();
        } else {
            ++state.stale_epochs;
        }
        state.epoch = epoch;
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
        if (epoch >= min_epochs && state.stale_epochs >= config.patience) break;
    }

    if (state.best_epoch > 0) {
        for (auto& p : model.params()) p.value = best.at(p.name).value;
    }
    return result;
}

}  // namespace tagnet
