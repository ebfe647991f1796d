#pragma once

#include "tagnet/autodiff.hpp"
#include "tagnet/corpus.hpp"
#include "tagnet/encoding.hpp"
#include "tagnet/neighborhood.hpp"

#include <nlohmann/json_fwd.hpp>

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace tagnet {

enum class Architecture : std::uint8_t {
    vonly,
    ltn,
    rtn,
    ltn_vecs,
    ltn_allvecs,
    ltwin,
    ltwin_rnn,
    ltwin_2rnn,
    lzip,
};

inline constexpr std::array<Architecture, 9> kAllArchitectures = {
    Architecture::vonly,   Architecture::ltn,       Architecture::rtn,
    Architecture::ltn_vecs, Architecture::ltn_allvecs, Architecture::ltwin,
    Architecture::ltwin_rnn, Architecture::ltwin_2rnn, Architecture::lzip};

std::string_view architecture_name(Architecture a);
Architecture parse_architecture(std::string_view name);

/// Joint models take metadata vectors as network input.
bool is_joint(Architecture a);
bool is_recurrent(Architecture a);
bool uses_neighbors(Architecture a);
bool uses_neighbor_metadata(Architecture a);
/// Visual-only epoch bounds (3..10) versus joint (5..15).
std::pair<std::size_t, std::size_t> default_epoch_bounds(Architecture a);

enum class NeighborOrder : std::uint8_t { ascending, descending };

struct ModelConfig {
    Architecture arch = Architecture::ltn;
    std::size_t hidden = 500;
    std::size_t feature_dim = 0;
    std::size_t meta_dim = 0;  // dimension of the feed encoding; joint models only
    std::size_t labels = 0;
    std::size_t m = 3;
    std::size_t m_max = 6;
    Encoding neighbor_encoding = Encoding::id;
    std::optional<Encoding> feed_encoding;
    double dropout = 0.5;
    bool allvecs_neighbor_bias = false;  // LTN+AllVecs neighbor branch has no bias unless set
    NeighborOrder order = NeighborOrder::ascending;
    ad::CellOutput lstm_output = ad::CellOutput::tanh;

    /// Throws UsageError on inconsistent settings.
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Network input for one query and one neighborhood (neighbors in distance order).
struct ForwardInput {
    Eigen::VectorXd feature;
    Eigen::VectorXd meta;
    std::vector<Eigen::VectorXd> neighbor_features;
    std::vector<Eigen::VectorXd> neighbor_metas;
};

class ModelInstance {
public:
    /// He-initialized weights, zero biases.
    static ModelInstance create(const ModelConfig& config, std::uint64_t seed);
    /// Adopts existing parameters; names and shapes must match the architecture.
    ModelInstance(ModelConfig config, ad::ParameterSet params);

    const ModelConfig& config() const { return config_; }
    ad::ParameterSet& params() { return params_; }
    const ad::ParameterSet& params() const { return params_; }

    /// Records the forward graph on `tape` and returns the L label scores.
    ad::Var forward(ad::Tape& tape, const ForwardInput& in, ad::Mode mode, Rng& dropout_rng);
    /// Eval-mode scores; does not modify the instance.
    Eigen::VectorXd forward(const ForwardInput& in) const;

private:
    ModelInstance() = default;

    ModelConfig config_;
    ad::ParameterSet params_;

    struct Pass;
    void check_input(const ForwardInput& in) const;
};

/// Parameter names and shapes an architecture requires, in creation order.
struct ParameterShape {
    std::string name;
    Eigen::Index rows;
    Eigen::Index cols;
    bool is_weight;
};
std::vector<ParameterShape> parameter_layout(const ModelConfig& config);

/// Builds ForwardInputs from dataset records: features from the FeatureStore and,
/// for joint models, metadata vectors from the feed encoder.
class InputAssembler {
public:
    InputAssembler(const Dataset& data, std::optional<Encoder> feed);

    ForwardInput assemble(std::size_t record, std::span<const Neighbor> neighborhood) const;
    /// For queries outside the corpus.
    ForwardInput assemble(const ImageRecord& query, std::span<const float> feature,
                          std::span<const Neighbor> neighborhood) const;

    const Dataset& data() const { return *data_; }
    const std::optional<Encoder>& feed() const { return feed_; }

private:
    const Dataset* data_;
    std::optional<Encoder> feed_;
};

struct PredictOptions {
    std::uint64_t enumeration_cap = kDefaultEnumerationCap;
    std::size_t samples = 10;  // Monte Carlo neighborhoods when enumeration is too large
    bool force_sampling = false;
    std::uint64_t seed = 0;
};

struct Prediction {
    Eigen::VectorXd scores;
    NeighborList neighbors;
    std::size_t forwards = 0;
    bool sampled = false;
    bool padded = false;
};

/// Mean of the eval-mode forward over the candidate neighborhoods drawn from the
/// M-nearest list: all m-subsets when there are at most `enumeration_cap` of them,
/// otherwise `samples` uniform draws. Visual-only models skip retrieval.
Prediction predict(const ModelInstance& model, const InputAssembler& inputs,
                   const ImageRecord& query, std::span<const float> feature,
                   const NeighborList& neighbors, const PredictOptions& options);
Prediction predict(const ModelInstance& model, const InputAssembler& inputs,
                   const NeighborIndex* index, const ImageRecord& query,
                   std::span<const float> feature, const PredictOptions& options);

struct LossValue {
    double value = 0.0;
    Eigen::VectorXd grad;  // d value / d scores
};

/// Mean over labels of the element-wise sigmoid cross-entropy.
LossValue sigmoid_cross_entropy(const Eigen::VectorXd& scores, std::span<const std::uint8_t> truth);

/// Cross-entropy plus l2_penalty(params, lambda).
double loss(const Eigen::VectorXd& scores, std::span<const std::uint8_t> truth, double lambda,
            ad::ParameterSet& params);

}  // namespace tagnet
