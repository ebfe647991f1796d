#pragma once

#include "tagnet/autodiff.hpp"
#include "tagnet/metrics.hpp"
#include "tagnet/models.hpp"
#include "tagnet/neighborhood.hpp"

#include <nlohmann/json_fwd.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace tagnet {

enum class StopMetric : std::uint8_t { val_map_lab, val_loss };

struct TrainConfig {
    std::size_t batch_size = 64;
    double learning_rate = 1e-4;
    double lambda = 3e-4;
    double rms_decay = 0.9;
    double rms_epsilon = 1e-8;
    std::optional<std::size_t> min_epochs;  // default depends on the architecture
    std::optional<std::size_t> max_epochs;
    std::size_t patience = 2;
    StopMetric stop_metric = StopMetric::val_map_lab;
    std::uint64_t seed = 0;
    std::uint64_t enumeration_cap = kDefaultEnumerationCap;
    std::size_t samples = 10;  // T: neighborhoods averaged per validation/test prediction
    std::size_t threads = 1;   // validation fan-out; never changes results
    bool record_timing = true;  // wall_seconds column; 0 when unset
    std::optional<std::filesystem::path> dump_path;  // state dump written on divergence

    /// Throws UsageError on invalid settings.
    void validate() const;
    std::pair<std::size_t, std::size_t> epoch_bounds(Architecture arch) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainState {
    std::size_t epoch = 0;  // completed epochs
    ad::RmsProp optimizer;
    double best_metric = 0.0;
    std::size_t best_epoch = 0;
    std::size_t stale_epochs = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_map_lab = 0.0;
    double val_map_img = 0.0;
    double val_loss = 0.0;
    double wall_seconds = 0.0;
};

/// epoch,train_loss,val_map_lab,val_map_img,wall_seconds
void write_history_csv(std::ostream& os, std::span<const EpochRecord> history);

/// The data a training run reads: a prepared dataset, the index over its train pool
/// (unused by vonly) and the assembler for network inputs.
struct TrainingData {
    const Dataset& data;
    const NeighborIndex* index;
    const InputAssembler& inputs;
};

struct TrainResult {
    std::vector<EpochRecord> history;
    TrainState state;
};

/// Minibatch RMSProp on mean sigmoid cross-entropy plus the L2 penalty. One fresh
/// neighborhood is drawn per example and epoch. After each epoch validation mAP_lab
/// is computed; training stops once past the minimum epoch count with no improvement
/// for `patience` epochs, or at the maximum. The model ends with the parameters of
/// the best validation epoch. A non-finite loss throws NumericError.
TrainResult train(ModelInstance& model, const TrainingData& in, const TrainConfig& config,
                  std::optional<TrainState> resume = std::nullopt,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Per-batch loss and gradients for one set of (record, neighborhood) examples,
/// accumulated into the model's parameter gradients (zeroed first).
double batch_loss(ModelInstance& model, const TrainingData& in,
                  std::span<const std::size_t> records,
                  std::span<const NeighborhoodSample> neighborhoods, double lambda,
                  ad::Mode mode, Rng& dropout_rng, bool with_grad);

/// M-nearest lists for the given records, retrieved from the train pool.
std::vector<NeighborList> neighbor_lists(const NeighborIndex& index, const Corpus& corpus,
                                         std::span<const std::size_t> records, std::size_t m_max,
                                         std::size_t threads);

/// Scores every record through predict(); image i uses a seed derived from `seed`
/// and its corpus index.
ScoreMatrix score_records(const ModelInstance& model, const TrainingData& in,
                          std::span<const std::size_t> records,
                          std::span<const NeighborList> neighbors, PredictOptions options,
                          std::size_t threads);

/// evaluate() on a split under the test-time enumeration rule.
EvalReport evaluate_split(const ModelInstance& model, const TrainingData& in, Split split,
                          const TrainConfig& config, std::size_t k = 3);

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "TNCK", u32 version, u32+bytes arch id, u32+bytes JSON header,
//   u32 parameter count, per parameter: u32+bytes name, u32 rows, u32 cols, f32 data,
//   u8 has_state [, u64 epoch, u64 steps, f64 best, u64 best_epoch, u64 stale,
//                   u32 count, per accumulator: u32+bytes name, u32 rows, u32 cols, f64 data]

struct CheckpointMeta {
    TrainConfig train;
    std::string vocab_fingerprint;
    std::vector<std::string> labels;
};

struct Checkpoint {
    ModelInstance model;
    CheckpointMeta meta;
    std::optional<TrainState> state;
};

inline constexpr char kCheckpointMagic[4] = {'T', 'N', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ModelInstance& model,
                     const CheckpointMeta& meta, const TrainState* state = nullptr);
/// Throws DataError on bad magic, unsupported version or a truncated file.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Multi-split protocol

struct Experiment {
    Architecture arch = Architecture::ltn;
    Encoding n = Encoding::id;
    std::optional<Encoding> f;
    std::size_t m = 3;
    std::size_t m_max = 6;

    /// e.g. "ltwin n:w2v f:w2v (3,6)"
    std::string name() const;
};

struct ProtocolOptions {
    std::size_t splits = 5;
    std::uint64_t seed = 0;
    std::size_t tau = 5000;
    std::array<double, 3> fractions = kDefaultSplitFractions;
    std::size_t hidden = 500;
    double dropout = 0.5;
    bool normalize_embeddings = false;
    TrainConfig train;
    EmbeddingSet embeddings;
    std::size_t k = 3;
    std::size_t threads = 1;  // grid cells run in parallel; results match serial runs
};

struct ProtocolRun {
    Experiment experiment;
    std::size_t repetition = 0;
    EvalReport report;
    std::vector<EpochRecord> history;
};

struct ProtocolReport {
    std::vector<ProtocolRun> runs;  // experiment-major, repetition-minor
    std::vector<std::pair<Experiment, AggregateReport>> aggregates;
};

ModelConfig model_config(const Experiment& e, const Dataset& data, const EmbeddingSet& dicts,
                         std::size_t hidden, double dropout);

/// For each repetition: fresh splits, vocabulary rebuilt on the train split, then
/// every experiment is trained and evaluated on the test split.
ProtocolReport run_protocol(const Corpus& raw, const FeatureStore& features,
                            std::span<const Experiment> experiments, const ProtocolOptions& options);

void write_sweep_csv(std::ostream& os, const ProtocolReport& report);

}  // namespace tagnet
