#include "tagnet/autodiff.hpp"
#include "tagnet/errors.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

using namespace tagnet;
using namespace tagnet::ad;

namespace {

Vector vec(std::initializer_list<double> xs) {
    Vector v(static_cast<Eigen::Index>(xs.size()));
    Eigen::Index i = 0;
    for (double x : xs) v[i++] = x;
    return v;
}

Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 0.5) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
    return m;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Loop-based LSTM reference, gate order i, f, o, g.
std::vector<double> lstm_reference(const Matrix& W, const Vector& b, const std::vector<Vector>& xs, int H,
                                   bool tanh_output) {
    std::vector<double> h(H, 0.0), c(H, 0.0);
    for (const auto& x : xs) {
        std::vector<double> z(x.data(), x.data() + x.size());
        z.insert(z.end(), h.begin(), h.end());
        std::vector<double> a(4 * H);
        for (int r = 0; r < 4 * H; ++r) {
            double s = b[r];
            for (std::size_t k = 0; k < z.size(); ++k) s += W(r, static_cast<Eigen::Index>(k)) * z[k];
            a[r] = s;
        }
        for (int j = 0; j < H; ++j) {
            const double ig = sig(a[j]), fg = sig(a[H + j]), og = sig(a[2 * H + j]), g = std::tanh(a[3 * H + j]);
            c[j] = fg * c[j] + ig * g;
            h[j] = og * (tanh_output ? std::tanh(c[j]) : c[j]);
        }
    }
    return h;
}

}  // namespace

TEST(Dense, IdentityWeightsPassInputThrough) {
    ParameterSet ps;
    auto& w = ps.add("W", 3, 3, true);
    auto& b = ps.add("b", 3, 1, false);
    w.value.setIdentity();
    b.value.setZero();
    Tape t;
    const auto y = dense(t, t.input(vec({1, -2, 3})), w, b);
    EXPECT_EQ(t.value(y), vec({1, -2, 3}));
}

TEST(Dense, ScalarExample) {
    ParameterSet ps;
    auto& w = ps.add("W", 1, 1, true);
    auto& b = ps.add("b", 1, 1, false);
    w.value(0, 0) = 2;
    b.value(0, 0) = 3;
    Tape t;
    EXPECT_EQ(t.value(dense(t, t.input(vec({5})), w, b))[0], 13.0);
}

TEST(Ops, ReluAndMaxPool) {
    Tape t;
    EXPECT_EQ(t.value(t.relu(t.input(vec({-1, 2})))), vec({0, 2}));
    const Var xs[] = {t.input(vec({1, 5})), t.input(vec({3, 2}))};
    EXPECT_EQ(t.value(t.max_pool(xs)), vec({3, 5}));
}

TEST(Ops, MaxPoolOfOneIsIdentityAndTieGoesToFirst) {
    Tape t;
    const Var one[] = {t.input(vec({4, -1}))};
    EXPECT_EQ(t.value(t.max_pool(one)), vec({4, -1}));
    const Var a = t.input(vec({2, 1})), b = t.input(vec({2, 3}));
    const Var both[] = {a, b};
    const Var m = t.max_pool(both);
    t.backward(m, vec({1, 1}));
    EXPECT_EQ(t.grad(a), vec({1, 0}));
    EXPECT_EQ(t.grad(b), vec({0, 1}));
}

TEST(Ops, NonFiniteOutputThrows) {
    Tape t;
    const auto x = t.input(vec({1e300}));
    EXPECT_THROW(t.mul(x, x), NumericError);
}

TEST(Lstm, ZeroWeightsGiveZeroOutput) {
    Rng rng(1);
    LstmCell cell{"c", 3, 4};
    ParameterSet ps;
    cell.add_parameters(ps, rng);
    ps.at("W_c").value.setZero();
    ps.at("b_c").value.setZero();
    Tape t;
    std::vector<Var> xs = {t.input(vec({1, 2, 3})), t.input(vec({-1, 0, 5}))};
    EXPECT_EQ(t.value(cell.run(t, ps, xs)), Vector::Zero(4));
}

TEST(Lstm, MatchesLoopReference) {
    Rng rng(2);
    for (auto out : {CellOutput::tanh, CellOutput::identity}) {
        LstmCell cell{"c", 3, 5, out};
        ParameterSet ps;
        cell.add_parameters(ps, rng);
        EXPECT_EQ(ps.at("W_c").value.rows(), 20);
        EXPECT_EQ(ps.at("W_c").value.cols(), 8);
        ps.at("b_c").value = random_matrix(20, 1, rng);
        std::vector<Vector> raw;
        for (int k = 0; k < 4; ++k) raw.push_back(random_matrix(3, 1, rng, 1.0).col(0));
        for (std::size_t len = 1; len <= raw.size(); ++len) {
            Tape t;
            std::vector<Var> xs;
            for (std::size_t k = 0; k < len; ++k) xs.push_back(t.input(raw[k]));
            const auto h = t.value(cell.run(t, ps, xs));
            const auto ref = lstm_reference(ps.at("W_c").value, ps.at("b_c").value.col(0),
                                            std::vector<Vector>(raw.begin(), raw.begin() + len), 5,
                                            out == CellOutput::tanh);
            for (int j = 0; j < 5; ++j) EXPECT_NEAR(h[j], ref[j], 1e-12);
        }
    }
}

TEST(Lstm, SingleStepEqualsRunOfLengthOne) {
    Rng rng(3);
    LstmCell cell{"c", 2, 3};
    ParameterSet ps;
    cell.add_parameters(ps, rng);
    Tape t;
    const auto x = t.input(vec({0.3, -0.7}));
    const auto s = cell.step(t, ps, x, cell.initial(t));
    const Var seq[] = {x};
    EXPECT_EQ(t.value(s.h), t.value(cell.run(t, ps, seq)));
}

TEST(Lstm, RejectsWrongInputSizeAndEmptySequence) {
    Rng rng(4);
    LstmCell cell{"c", 2, 3};
    ParameterSet ps;
    cell.add_parameters(ps, rng);
    Tape t;
    const Var bad[] = {t.input(vec({1, 2, 3}))};
    EXPECT_THROW(cell.run(t, ps, bad), UsageError);
    EXPECT_THROW(cell.run(t, ps, std::span<const Var>{}), UsageError);
}

TEST(Dropout, IdentityInEvalModeOrAtZero) {
    Rng rng(5);
    Tape t;
    const auto x = t.input(vec({1, 2, 3}));
    EXPECT_EQ(t.value(t.dropout(x, 0.5, Mode::eval, rng)), vec({1, 2, 3}));
    EXPECT_EQ(t.value(t.dropout(x, 0.0, Mode::train, rng)), vec({1, 2, 3}));
    EXPECT_THROW(t.dropout(x, 1.0, Mode::train, rng), UsageError);
}

TEST(Dropout, PreservesExpectation) {
    Rng rng(6);
    const int trials = 100000;
    double sum = 0.0;
    std::size_t zeros = 0;
    for (int i = 0; i < trials; ++i) {
        Tape t;
        const double y = t.value(t.dropout(t.input(vec({2.0})), 0.5, Mode::train, rng))[0];
        ASSERT_TRUE(y == 0.0 || y == 4.0);
        zeros += y == 0.0;
        sum += y;
    }
    EXPECT_NEAR(sum / trials, 2.0, 0.02);
    EXPECT_NEAR(static_cast<double>(zeros) / trials, 0.5, 0.01);
}

TEST(HeInit, VarianceTwoOverFanIn) {
    Rng rng(7);
    const auto m = he_init(1000, 1000, 100, rng);
    const double mean = m.mean();
    const double var = (m.array() - mean).square().sum() / static_cast<double>(m.size() - 1);
    EXPECT_NEAR(mean, 0.0, 1e-3);
    EXPECT_NEAR(var, 0.02, 0.02 * 0.05);
    EXPECT_THROW(he_init(2, 2, 0, rng), UsageError);
}

TEST(RmsProp, FirstStepMatchesClosedForm) {
    ParameterSet ps;
    auto& p = ps.add("W", 1, 1, true);
    p.value(0, 0) = 0.5;
    p.grad(0, 0) = 1.0;
    RmsProp opt;
    opt.step(ps);
    EXPECT_NEAR(p.value(0, 0), 0.5 - 1e-4 / (std::sqrt(0.1) + 1e-8), 1e-15);
    EXPECT_NEAR(opt.accumulators().at("W")(0, 0), 0.1, 1e-15);
    EXPECT_EQ(opt.steps(), 1u);
}

TEST(RmsProp, ZeroGradientLeavesParameter) {
    ParameterSet ps;
    auto& p = ps.add("W", 2, 1, true);
    p.value << 1.5, -2;
    p.grad.setZero();
    RmsProp opt;
    opt.step(ps);
    EXPECT_EQ(p.value, (Matrix(2, 1) << 1.5, -2).finished());
}

TEST(RmsProp, RepeatedGradientStepsShrink) {
    ParameterSet ps;
    auto& p = ps.add("W", 1, 1, true);
    p.value(0, 0) = 0.0;
    RmsProp opt;
    p.grad(0, 0) = 1.0;
    opt.step(ps);
    const double first = -p.value(0, 0);
    p.grad(0, 0) = 1.0;
    opt.step(ps);
    const double second = -p.value(0, 0) - first;
    EXPECT_NEAR(second, 1e-4 / (std::sqrt(0.19) + 1e-8), 1e-15);
    EXPECT_LT(second, first);
}

TEST(RmsProp, NonFiniteGradientNamesParameter) {
    ParameterSet ps;
    ps.add("W_good", 1, 1, true).grad(0, 0) = 1.0;
    ps.add("W_bad", 1, 1, true).grad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    RmsProp opt;
    try {
        opt.step(ps);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("W_bad"), std::string::npos);
    }
}

TEST(L2, PenaltyOnWeightsOnly) {
    ParameterSet ps;
    auto& w = ps.add("W", 1, 1, true);
    auto& b = ps.add("b", 1, 1, false);
    w.value(0, 0) = 3;
    b.value(0, 0) = 100;
    w.grad.setZero();
    b.grad.setZero();
    EXPECT_DOUBLE_EQ(l2_penalty(ps, 0.5), 4.5);
    l2_penalty(ps, 0.5, true);
    EXPECT_DOUBLE_EQ(w.grad(0, 0), 3.0);
    EXPECT_EQ(b.grad(0, 0), 0.0);
    EXPECT_THROW(l2_penalty(ps, -1.0), UsageError);
}

TEST(GradCheck, CompositeGraphMatchesFiniteDifferences) {
    Rng rng(11);
    ParameterSet ps;
    ps.add("W1", 4, 3, true).value = random_matrix(4, 3, rng);
    ps.add("b1", 4, 1, false).value = random_matrix(4, 1, rng);
    ps.add("W2", 2, 8, true).value = random_matrix(2, 8, rng);
    ps.add("b2", 2, 1, false).value = random_matrix(2, 1, rng);
    ps.add("v", 2, 1, true).value = random_matrix(2, 1, rng);
    LstmCell cell{"rnn", 2, 3};
    cell.add_parameters(ps, rng);
    ps.at("b_rnn").value = random_matrix(12, 1, rng);
    const Vector x1 = vec({0.4, -1.1, 0.9}), x2 = vec({-0.3, 0.8, 0.2});

    auto objective = [&](bool with_grad) {
        Tape t;
        const auto a = t.tanh(dense(t, t.input(x1), ps.at("W1"), ps.at("b1")));
        const auto b = t.sigmoid(dense(t, t.input(x2), ps.at("W1"), ps.at("b1")));
        const Var pair[] = {a, b};
        const auto pooled = t.max_pool(pair);
        const Var parts[] = {pooled, t.mul(a, b)};
        const auto y = t.relu(dense(t, t.concat(parts), ps.at("W2"), ps.at("b2")));
        const Var seq[] = {t.add(y, t.param(ps.at("v"))), t.slice(a, 1, 2)};
        const auto h = cell.run(t, ps, seq);
        const double loss = t.value(h).squaredNorm() + t.value(y).sum();
        if (with_grad) {
            t.backward(h, 2.0 * t.value(h));
            t.backward(y, Vector::Ones(2));
        }
        return loss + l2_penalty(ps, 0.01, with_grad);
    };
    const auto report = grad_check(ps, objective);
    EXPECT_TRUE(report.passed(1e-5)) << report.worst_parameter << " " << report.max_rel_error;
    EXPECT_EQ(report.entries_checked, ps.scalar_count());
}

TEST(GradCheck, DetectsWrongGradient) {
    ParameterSet ps;
    ps.add("W", 1, 1, true).value(0, 0) = 1.5;
    auto objective = [&](bool with_grad) {
        const double w = ps.at("W").value(0, 0);
        if (with_grad) ps.at("W").grad(0, 0) += 3.0 * w;  // true derivative is 2w
        return w * w;
    };
    const auto report = grad_check(ps, objective);
    EXPECT_FALSE(report.passed(1e-3));
    EXPECT_EQ(report.worst_parameter, "W");
}

TEST(Parameters, DuplicateAndUnknownNamesRejected) {
    ParameterSet ps;
    ps.add("W", 1, 1, true);
    EXPECT_THROW(ps.add("W", 1, 1, true), UsageError);
    EXPECT_THROW(ps.at("nope"), UsageError);
    EXPECT_EQ(ps.scalar_count(), 1u);
}
