#pragma once

#include "tagnet/random.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

// Minimal reverse-mode differentiation over column vectors, sized for the fusion
// networks: affine maps, element-wise nonlinearities, concatenation, set max-pooling,
// LSTM recurrences and inverted dropout. All arithmetic is 64-bit.
namespace tagnet::ad {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

enum class Mode : std::uint8_t { train, eval };

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
    bool trainable = true;
    bool is_weight = true;  // biases are not weights and carry no L2 penalty
};

/// Named parameters in insertion order. Names are unique; references returned by add()
/// and at() stay valid.
class ParameterSet {
public:
    Parameter& add(std::string name, Eigen::Index rows, Eigen::Index cols, bool is_weight);

    Parameter& at(std::string_view name);
    const Parameter& at(std::string_view name) const;
    bool contains(std::string_view name) const { return index_.find(name) != index_.end(); }

    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grad();

private:
    std::deque<Parameter> params_;
    std::map<std::string, std::size_t, std::less<>> index_;
};

/// Records one forward pass; `backward` propagates into the nodes and into the
/// `grad` buffers of every Parameter the pass touched. Every op checks its output for
/// NaN/Inf and throws NumericError.
class Tape {
public:
    struct Var {
        std::uint32_t id;
    };

    Var input(Vector v);
    /// A column-vector parameter used directly as a node.
    Var param(Parameter& p);
    /// W x + b (b optional).
    Var affine(Parameter& w, Var x, Parameter* b);
    Var add(Var a, Var b);
    Var mul(Var a, Var b);
    Var relu(Var x);
    Var sigmoid(Var x);
    Var tanh(Var x);
    Var concat(std::span<const Var> xs);
    Var slice(Var x, Eigen::Index offset, Eigen::Index length);
    /// Element-wise max; the gradient of each entry goes to the lowest-index argmax.
    Var max_pool(std::span<const Var> xs);
    /// Inverted dropout in train mode, identity in eval mode or when p == 0.
    Var dropout(Var x, double p, Mode mode, Rng& rng);

    const Vector& value(Var v) const { return nodes_[v.id].value; }
    const Vector& grad(Var v) const { return nodes_[v.id].grad; }
    Eigen::Index dim(Var v) const { return nodes_[v.id].value.size(); }
    std::size_t size() const { return nodes_.size(); }

    void backward(Var out, const Vector& seed);

private:
    using Backward = std::function<void(Tape&, std::uint32_t)>;
    struct Node {
        Vector value;
        Vector grad;
        Backward backward;
    };

    std::vector<Node> nodes_;

    Var push(Vector value, Backward backward, const char* op);
    Vector& grad_of(std::uint32_t id) { return nodes_[id].grad; }
};

using Var = Tape::Var;

Var dense(Tape& tape, Var x, Parameter& w, Parameter& b);

/// Normal(0, 2 / fan_in) entries.
Matrix he_init(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in, Rng& rng);

/// Which function is applied to the cell state when forming the hidden output.
enum class CellOutput : std::uint8_t { tanh, identity };

/// LSTM with sigmoid input/forget/output gates and a tanh candidate. Parameters are
/// `W_<name>` (4H x (in + H), gate blocks in i, f, o, g order) and `b_<name>` (4H).
struct LstmCell {
    std::string name;
    Eigen::Index input_dim = 0;
    Eigen::Index hidden_dim = 0;
    CellOutput output = CellOutput::tanh;

    struct State {
        Var h;
        Var c;
    };

    std::string weight_name() const { return "W_" + name; }
    std::string bias_name() const { return "b_" + name; }

    void add_parameters(ParameterSet& params, Rng& rng) const;
    State initial(Tape& tape) const;
    State step(Tape& tape, ParameterSet& params, Var x, State prev) const;
    /// Final hidden state after feeding `inputs` in order.
    Var run(Tape& tape, ParameterSet& params, std::span<const Var> inputs) const;
};

/// lambda * sum of squared weight entries; when `accumulate` is set adds 2 lambda W
/// to each weight's gradient.
double l2_penalty(ParameterSet& params, double lambda, bool accumulate = false);

struct RmsPropConfig {
    double learning_rate = 1e-4;
    double decay = 0.9;
    double epsilon = 1e-8;
};

/// acc <- decay acc + (1 - decay) g^2;  p <- p - lr g / (sqrt(acc) + eps)
class RmsProp {
public:
    explicit RmsProp(RmsPropConfig config = {}) : config_(config) {}

    void step(ParameterSet& params);

    const RmsPropConfig& config() const { return config_; }
    const std::map<std::string, Matrix>& accumulators() const { return acc_; }
    std::map<std::string, Matrix>& accumulators() { return acc_; }
    std::uint64_t steps() const { return steps_; }
    void set_steps(std::uint64_t n) { steps_ = n; }

private:
    RmsPropConfig config_;
    std::map<std::string, Matrix> acc_;
    std::uint64_t steps_ = 0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_parameter;
    Eigen::Index worst_entry = -1;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t entries_checked = 0;

    bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

/// Central finite differences against analytic gradients for every trainable entry.
/// `objective(with_grad)` must evaluate the scalar loss deterministically and, when
/// `with_grad` is set, accumulate analytic gradients into the parameters. Relative
/// error is |a - n| / max(|a|, |n|, 1e-6).
GradCheckReport grad_check(ParameterSet& params,
                           const std::function<double(bool with_grad)>& objective,
                           double step = 1e-5);

}  // namespace tagnet::ad
