#include "tagnet/autodiff.hpp"

#include "tagnet/errors.hpp"

#include <algorithm>
#include <cmath>

namespace tagnet::ad {

// ---------------------------------------------------------------------------
// ParameterSet

Parameter& ParameterSet::add(std::string name, Eigen::Index rows, Eigen::Index cols,
                             bool is_weight) {
    if (contains(name)) throw UsageError("duplicate parameter name '" + name + "'");
    index_.emplace(name, params_.size());
    Parameter p;
    p.name = std::move(name);
    p.value = Matrix::Zero(rows, cols);
    p.grad = Matrix::Zero(rows, cols);
    p.is_weight = is_weight;
    params_.push_back(std::move(p));
    return params_.back();
}

Parameter& ParameterSet::at(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
    return params_[it->second];
}

const Parameter& ParameterSet::at(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
    return params_[it->second];
}

std::size_t ParameterSet::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
}

void ParameterSet::zero_grad() {
    for (auto& p : params_) p.grad.setZero(p.value.rows(), p.value.cols());
}

// ---------------------------------------------------------------------------
// Tape

Var Tape::push(Vector value, Backward backward, const char* op) {
    if (!value.allFinite()) throw NumericError(std::string("non-finite output from ") + op);
    nodes_.push_back({std::move(value), Vector(), std::move(backward)});
    return {static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Var Tape::input(Vector v) { return push(std::move(v), nullptr, "input"); }

Var Tape::param(Parameter& p) {
    if (p.value.cols() != 1) throw UsageError("parameter '" + p.name + "' is not a column vector");
    Parameter* ptr = &p;
    return push(p.value.col(0), [ptr](Tape& t, std::uint32_t self) {
        ptr->grad.col(0) += t.nodes_[self].grad;
    }, "param");
}

Var Tape::affine(Parameter& w, Var x, Parameter* b) {
    const auto& xv = value(x);
    if (w.value.cols() != xv.size())
        throw UsageError("affine: '" + w.name + "' has " + std::to_string(w.value.cols()) +
                         " columns, input has " + std::to_string(xv.size()) + " entries");
    Vector y = w.value * xv;
    if (b) {
        if (b->value.rows() != y.size() || b->value.cols() != 1)
            throw UsageError("affine: bias '" + b->name + "' does not match '" + w.name + "'");
        y += b->value.col(0);
    }
    Parameter* wp = &w;
    return push(std::move(y), [wp, b, x](Tape& t, std::uint32_t self) {
        const Vector& g = t.nodes_[self].grad;
        const Vector& xin = t.nodes_[x.id].value;
        wp->grad.noalias() += g * xin.transpose();
        if (b) b->grad.col(0) += g;
        t.grad_of(x.id).noalias() += wp->value.transpose() * g;
    }, "affine");
}

Var Tape::add(Var a, Var b) {
    if (dim(a) != dim(b)) throw UsageError("add: shape mismatch");
    return push(value(a) + value(b), [a, b](Tape& t, std::uint32_t self) {
        t.grad_of(a.id) += t.nodes_[self].grad;
        t.grad_of(b.id) += t.nodes_[self].grad;
    }, "add");
}

Var Tape::mul(Var a, Var b) {
    if (dim(a) != dim(b)) throw UsageError("mul: shape mismatch");
    return push(value(a).cwiseProduct(value(b)), [a, b](Tape& t, std::uint32_t self) {
        const Vector& g = t.nodes_[self].grad;
        t.grad_of(a.id) += g.cwiseProduct(t.nodes_[b.id].value);
        t.grad_of(b.id) += g.cwiseProduct(t.nodes_[a.id].value);
    }, "mul");
}

Var Tape::relu(Var x) {
    return push(value(x).cwiseMax(0.0), [x](Tape& t, std::uint32_t self) {
        const Vector& g = t.nodes_[self].grad;
        const Vector& in = t.nodes_[x.id].value;
        Vector& gx = t.grad_of(x.id);
        for (Eigen::Index i = 0; i < g.size(); ++i)
            if (in[i] > 0.0) gx[i] += g[i];
    }, "relu");
}

Var Tape::sigmoid(Var x) {
    Vector y = value(x).unaryExpr([](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
    });
    return push(std::move(y), [x](Tape& t, std::uint32_t self) {
        const Vector& s = t.nodes_[self].value;
        t.grad_of(x.id) += t.nodes_[self].grad.cwiseProduct(s.cwiseProduct((1.0 - s.array()).matrix()));
    }, "sigmoid");
}

Var Tape::tanh(Var x) {
    return push(value(x).array().tanh().matrix(), [x](Tape& t, std::uint32_t self) {
        const Vector& y = t.nodes_[self].value;
        t.grad_of(x.id) += t.nodes_[self].grad.cwiseProduct((1.0 - y.array().square()).matrix());
    }, "tanh");
}

Var Tape::concat(std::span<const Var> xs) {
    Eigen::Index total = 0;
    for (auto v : xs) total += dim(v);
    Vector y(total);
    Eigen::Index off = 0;
    for (auto v : xs) {
        y.segment(off, dim(v)) = value(v);
        off += dim(v);
    }
    std::vector<Var> parts(xs.begin(), xs.end());
    return push(std::move(y), [parts = std::move(parts)](Tape& t, std::uint32_t self) {
        const Vector& g = t.nodes_[self].grad;
        Eigen::Index o = 0;
        for (auto v : parts) {
            const auto n = t.nodes_[v.id].value.size();
            t.grad_of(v.id) += g.segment(o, n);
            o += n;
        }
    }, "concat");
}

Var Tape::slice(Var x, Eigen::Index offset, Eigen::Index length) {
    if (offset < 0 || length < 0 || offset + length > dim(x)) throw UsageError("slice out of range");
    return push(value(x).segment(offset, length), [x, offset, length](Tape& t, std::uint32_t self) {
        t.grad_of(x.id).segment(offset, length) += t.nodes_[self].grad;
    }, "slice");
}

Var Tape::max_pool(std::span<const Var> xs) {
    if (xs.empty()) throw UsageError("max_pool over an empty set");
    const Eigen::Index n = dim(xs[0]);
    for (auto v : xs)
        if (dim(v) != n) throw UsageError("max_pool: inputs differ in shape");
    Vector y = value(xs[0]);
    std::vector<std::uint32_t> arg(static_cast<std::size_t>(n), xs[0].id);
    for (std::size_t k = 1; k < xs.size(); ++k) {
        const Vector& v = value(xs[k]);
        for (Eigen::Index i = 0; i < n; ++i) {
            if (v[i] > y[i]) {
                y[i] = v[i];
                arg[static_cast<std::size_t>(i)] = xs[k].id;
            }
        }
    }
    return push(std::move(y), [arg = std::move(arg)](Tape& t, std::uint32_t self) {
        const Vector& g = t.nodes_[self].grad;
        for (Eigen::Index i = 0; i < g.size(); ++i) t.grad_of(arg[static_cast<std::size_t>(i)])[i] += g[i];
    }, "max_pool");
}

Var Tape::dropout(Var x, double p, Mode mode, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw UsageError("dropout probability must lie in [0, 1)");
    if (mode == Mode::eval || p == 0.0) return x;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double keep_scale = 1.0 / (1.0 - p);
    Vector mask(dim(x));
    for (Eigen::Index i = 0; i < mask.size(); ++i) mask[i] = unit(rng) < p ? 0.0 : keep_scale;
    Vector y = value(x).cwiseProduct(mask);
    return push(std::move(y), [x, mask = std::move(mask)](Tape& t, std::uint32_t self) {
        t.grad_of(x.id) += t.nodes_[self].grad.cwiseProduct(mask);
    }, "dropout");
}

void Tape::backward(Var out, const Vector& seed) {
    if (seed.size() != dim(out)) throw UsageError("backward: seed gradient has the wrong size");
    for (auto& n : nodes_) n.grad.setZero(n.value.size());
    nodes_[out.id].grad = seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (n.backward) n.backward(*this, static_cast<std::uint32_t>(i));
    }
}

Var dense(Tape& tape, Var x, Parameter& w, Parameter& b) { return tape.affine(w, x, &b); }

Matrix he_init(Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in, Rng& rng) {
    if (fan_in < 1) throw UsageError("he_init: fan_in must be at least 1");
    std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
    return m;
}

// ---------------------------------------------------------------------------
// LSTM

void LstmCell::add_parameters(ParameterSet& params, Rng& rng) const {
    if (input_dim < 1 || hidden_dim < 1) throw UsageError("LSTM dimensions must be positive");
    auto& w = params.add(weight_name(), 4 * hidden_dim, input_dim + hidden_dim, true);
    w.value = he_init(w.value.rows(), w.value.cols(), input_dim + hidden_dim, rng);
    params.add(bias_name(), 4 * hidden_dim, 1, false);
}

LstmCell::State LstmCell::initial(Tape& tape) const {
    return {tape.input(Vector::Zero(hidden_dim)), tape.input(Vector::Zero(hidden_dim))};
}

LstmCell::State LstmCell::step(Tape& tape, ParameterSet& params, Var x, State prev) const {
    if (tape.dim(x) != input_dim)
        throw UsageError("LSTM '" + name + "' expects inputs of size " + std::to_string(input_dim) +
                         ", got " + std::to_string(tape.dim(x)));
    const Var xh_parts[] = {x, prev.h};
    const Var xh = tape.concat(xh_parts);
    const Var z = tape.affine(params.at(weight_name()), xh, &params.at(bias_name()));
    const auto h = hidden_dim;
    const Var in_gate = tape.sigmoid(tape.slice(z, 0, h));
    const Var forget = tape.sigmoid(tape.slice(z, h, h));
    const Var out_gate = tape.sigmoid(tape.slice(z, 2 * h, h));
    const Var cand = tape.tanh(tape.slice(z, 3 * h, h));
    const Var c = tape.add(tape.mul(forget, prev.c), tape.mul(in_gate, cand));
    const Var squashed = output == CellOutput::tanh ? tape.tanh(c) : c;
    return {tape.mul(out_gate, squashed), c};
}

Var LstmCell::run(Tape& tape, ParameterSet& params, std::span<const Var> inputs) const {
    if (inputs.empty()) throw UsageError("LSTM '" + name + "' fed an empty sequence");
    State s = initial(tape);
    for (auto x : inputs) s = step(tape, params, x, s);
    return s.h;
}

// ---------------------------------------------------------------------------
// Regularization, optimization, checking

double l2_penalty(ParameterSet& params, double lambda, bool accumulate) {
    if (!(lambda >= 0.0)) throw UsageError("L2 coefficient must be non-negative");
    double total = 0.0;
    for (auto& p : params) {
        if (!p.is_weight || !p.trainable) continue;
        total += p.value.squaredNorm();
        if (accumulate && lambda != 0.0) p.grad += 2.0 * lambda * p.value;
    }
    return lambda * total;
}

void RmsProp::step(ParameterSet& params) {
    for (auto& p : params) {
        if (!p.trainable) continue;
        if (!p.grad.allFinite()) throw NumericError("non-finite gradient for parameter '" + p.name + "'");
    }
    for (auto& p : params) {
        if (!p.trainable) continue;
        auto [it, fresh] = acc_.try_emplace(p.name, Matrix::Zero(p.value.rows(), p.value.cols()));
        Matrix& acc = it->second;
        if (acc.rows() != p.value.rows() || acc.cols() != p.value.cols())
            throw UsageError("optimizer state for '" + p.name + "' has the wrong shape");
        acc = config_.decay * acc + (1.0 - config_.decay) * p.grad.cwiseAbs2();
        p.value.array() -= config_.learning_rate * p.grad.array() / (acc.array().sqrt() + config_.epsilon);
    }
    ++steps_;
}

GradCheckReport grad_check(ParameterSet& params,
                           const std::function<double(bool with_grad)>& objective, double step) {
    params.zero_grad();
    objective(true);
    std::vector<Matrix> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(p.grad);

    GradCheckReport report;
    std::size_t k = 0;
    for (auto& p : params) {
        const Matrix& a = analytic[k++];
        if (!p.trainable) continue;
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            double& entry = p.value.data()[i];
            const double saved = entry;
            entry = saved + step;
            const double up = objective(false);
            entry = saved - step;
            const double down = objective(false);
            entry = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double an = a.data()[i];
            const double denom = std::max({std::abs(an), std::abs(numeric), 1e-6});
            const double rel = std::abs(an - numeric) / denom;
            ++report.entries_checked;
            if (report.worst_entry < 0 || rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_parameter = p.name;
                report.worst_entry = i;
                report.analytic = an;
                report.numeric = numeric;
            }
        }
    }
    params.zero_grad();
    return report;
}

}  // namespace tagnet::ad
