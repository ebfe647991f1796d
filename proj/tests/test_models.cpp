#include "support.hpp"

#include "tagnet/errors.hpp"
#include "tagnet/models.hpp"

#include <nlohmann/json.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace tagnet;
using V = std::vector<double>;

namespace {

constexpr std::size_t kD = 3, kP = 5, kH = 4, kL = 3;

ModelConfig config_for(Architecture a, std::size_t m = 3) {
    ModelConfig c;
    c.arch = a;
    c.hidden = kH;
    c.feature_dim = kD;
    c.labels = kL;
    c.m = m;
    c.m_max = 6;
    c.dropout = 0.0;
    if (is_joint(a)) {
        c.meta_dim = kP;
        c.feed_encoding = Encoding::w2v;
    }
    return c;
}

// Random weights and biases so every term of the reference is exercised.
ModelInstance random_model(const ModelConfig& c, std::uint64_t seed) {
    auto model = ModelInstance::create(c, seed);
    Rng rng(seed);
    std::normal_distribution<double> n(0.0, 0.6);
    for (auto& p : model.params())
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = n(rng);
    return model;
}

Eigen::VectorXd random_vec(std::size_t n, Rng& rng) {
    std::normal_distribution<double> d(0.0, 1.0);
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    for (auto& x : v) x = d(rng);
    return v;
}

ForwardInput random_input(std::size_t m, Rng& rng) {
    ForwardInput in;
    in.feature = random_vec(kD, rng);
    in.meta = random_vec(kP, rng);
    for (std::size_t i = 0; i < m; ++i) {
        in.neighbor_features.push_back(random_vec(kD, rng));
        in.neighbor_metas.push_back(random_vec(kP, rng));
    }
    return in;
}

// ---- scalar reference -------------------------------------------------------

V to_v(const Eigen::VectorXd& x) { return V(x.data(), x.data() + x.size()); }

V cat(std::initializer_list<V> parts) {
    V out;
    for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

V affine(const ad::ParameterSet& ps, const std::string& s, const V& x, bool bias = true) {
    const auto& W = ps.at("W_" + s).value;
    V y(static_cast<std::size_t>(W.rows()), 0.0);
    for (Eigen::Index r = 0; r < W.rows(); ++r) {
        double acc = bias ? ps.at("b_" + s).value(r, 0) : 0.0;
        for (Eigen::Index k = 0; k < W.cols(); ++k) acc += W(r, k) * x[static_cast<std::size_t>(k)];
        y[static_cast<std::size_t>(r)] = acc;
    }
    return y;
}

V relu(V x) {
    for (auto& e : x) e = std::max(e, 0.0);
    return x;
}

V pool(const std::vector<V>& xs) {
    V out = xs.front();
    for (const auto& x : xs)
        for (std::size_t k = 0; k < out.size(); ++k) out[k] = std::max(out[k], x[k]);
    return out;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

V lstm(const ad::ParameterSet& ps, const std::string& name, const std::vector<V>& xs, bool tanh_out) {
    const auto& W = ps.at("W_" + name).value;
    const auto& b = ps.at("b_" + name).value;
    const std::size_t H = static_cast<std::size_t>(W.rows() / 4);
    V h(H, 0.0), c(H, 0.0);
    for (const auto& x : xs) {
        const V z = cat({x, h});
        V a(4 * H);
        for (std::size_t r = 0; r < 4 * H; ++r) {
            double s = b(static_cast<Eigen::Index>(r), 0);
            for (std::size_t k = 0; k < z.size(); ++k)
                s += W(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) * z[k];
            a[r] = s;
        }
        for (std::size_t j = 0; j < H; ++j) {
            c[j] = sig(a[H + j]) * c[j] + sig(a[j]) * std::tanh(a[3 * H + j]);
            h[j] = sig(a[2 * H + j]) * (tanh_out ? std::tanh(c[j]) : c[j]);
        }
    }
    return h;
}

V reference_forward(const ModelInstance& model, const ForwardInput& in) {
    const auto& c = model.config();
    const auto& ps = model.params();
    const bool t = c.lstm_output == ad::CellOutput::tanh;
    const V x = to_v(in.feature), u = to_v(in.meta);
    std::vector<V> f, o;
    for (const auto& e : in.neighbor_features) f.push_back(to_v(e));
    for (const auto& e : in.neighbor_metas) o.push_back(to_v(e));
    std::vector<std::size_t> order(f.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (c.order == NeighborOrder::descending) std::reverse(order.begin(), order.end());
    auto each = [&](const std::vector<V>& xs, const char* s) {
        std::vector<V> out;
        for (auto i : order) out.push_back(relu(affine(ps, s, xs[i])));
        return out;
    };

    switch (c.arch) {
        case Architecture::vonly:
            return affine(ps, "y", x);
        case Architecture::ltn:
            return affine(ps, "y", cat({relu(affine(ps, "x", x)), pool(each(f, "z"))}));
        case Architecture::rtn: {
            std::vector<V> seq;
            for (auto i : order) seq.push_back(f[i]);
            return affine(ps, "y", cat({relu(affine(ps, "x", x)), lstm(ps, "RNN", seq, t)}));
        }
        case Architecture::ltn_vecs:
            return affine(ps, "y", cat({relu(affine(ps, "x", cat({x, u}))), pool(each(f, "z"))}));
        case Architecture::ltn_allvecs: {
            std::vector<V> hs;
            for (std::size_t i = 0; i < f.size(); ++i)
                hs.push_back(relu(affine(ps, "z", cat({f[i], o[i]}), c.allvecs_neighbor_bias)));
            return affine(ps, "y", cat({relu(affine(ps, "x", cat({x, u}))), pool(hs)}));
        }
        case Architecture::ltwin:
            return affine(ps, "y", cat({relu(affine(ps, "x", x)), pool(each(f, "z")), relu(affine(ps, "xu", u)),
                                        pool(each(o, "zu"))}));
        case Architecture::ltwin_rnn:
        case Architecture::ltwin_2rnn: {
            const std::vector<V> parts = {relu(affine(ps, "x", x)), lstm(ps, "RNN", each(f, "z"), t),
                                          relu(affine(ps, "xu", u)), lstm(ps, "oRNN", each(o, "zu"), t)};
            if (c.arch == Architecture::ltwin_2rnn) return lstm(ps, "fRNN", parts, t);
            return affine(ps, "y", cat({parts[0], parts[1], parts[2], parts[3]}));
        }
        case Architecture::lzip: {
            std::vector<V> seq = {relu(affine(ps, "x", x)), relu(affine(ps, "xu", u))};
            for (auto i : order) {
                seq.push_back(relu(affine(ps, "z", f[i])));
                seq.push_back(relu(affine(ps, "zu", o[i])));
            }
            return lstm(ps, "RNN", seq, t);
        }
    }
    return {};
}

void expect_close(const Eigen::VectorXd& a, const V& b, double tol, const std::string& what) {
    ASSERT_EQ(static_cast<std::size_t>(a.size()), b.size()) << what;
    for (std::size_t k = 0; k < b.size(); ++k) EXPECT_NEAR(a[static_cast<Eigen::Index>(k)], b[k], tol) << what;
}

ForwardInput permuted(const ForwardInput& in, const std::vector<std::size_t>& perm) {
    ForwardInput out = in;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        out.neighbor_features[i] = in.neighbor_features[perm[i]];
        out.neighbor_metas[i] = in.neighbor_metas[perm[i]];
    }
    return out;
}

}  // namespace

TEST(Models, ForwardMatchesScalarReference) {
    Rng rng(1);
    for (auto a : kAllArchitectures) {
        for (auto order : {NeighborOrder::ascending, NeighborOrder::descending}) {
            for (auto cell : {ad::CellOutput::tanh, ad::CellOutput::identity}) {
                auto c = config_for(a);
                c.order = order;
                c.lstm_output = cell;
                c.allvecs_neighbor_bias = order == NeighborOrder::descending;
                const auto model = random_model(c, 10 + static_cast<std::uint64_t>(a));
                for (int trial = 0; trial < 3; ++trial) {
                    const auto in = random_input(3, rng);
                    const auto out = model.forward(in);
                    EXPECT_EQ(out.size(), static_cast<Eigen::Index>(kL));
                    expect_close(out, reference_forward(model, in), 1e-12, std::string(architecture_name(a)));
                }
            }
        }
    }
}

TEST(Models, SingleNeighborWorksForEveryArchitecture) {
    Rng rng(2);
    for (auto a : kAllArchitectures) {
        const auto model = random_model(config_for(a, 1), 3);
        const auto in = random_input(1, rng);
        expect_close(model.forward(in), reference_forward(model, in), 1e-12, std::string(architecture_name(a)));
    }
}

TEST(Models, PoolingArchitecturesArePermutationInvariant) {
    Rng rng(3);
    const std::vector<std::size_t> perm = {2, 0, 1};
    for (auto a : {Architecture::ltn, Architecture::ltn_vecs, Architecture::ltn_allvecs, Architecture::ltwin}) {
        const auto model = random_model(config_for(a), 4);
        const auto in = random_input(3, rng);
        EXPECT_LT((model.forward(in) - model.forward(permuted(in, perm))).norm(), 1e-12) << architecture_name(a);
    }
}

TEST(Models, RecurrentArchitecturesDependOnOrder) {
    Rng rng(4);
    const std::vector<std::size_t> perm = {2, 0, 1};
    for (auto a : {Architecture::rtn, Architecture::ltwin_rnn, Architecture::ltwin_2rnn, Architecture::lzip}) {
        const auto model = random_model(config_for(a), 5);
        const auto in = random_input(3, rng);
        EXPECT_GT((model.forward(in) - model.forward(permuted(in, perm))).norm(), 1e-9) << architecture_name(a);

        auto desc = config_for(a);
        desc.order = NeighborOrder::descending;
        ModelInstance reversed(desc, model.params());
        const std::vector<std::size_t> flip = {2, 1, 0};
        EXPECT_LT((model.forward(in) - reversed.forward(permuted(in, flip))).norm(), 1e-12) << architecture_name(a);
    }
}

TEST(Models, InputsOutsideAnArchitectureAreIgnored) {
    Rng rng(5);
    const auto in = random_input(3, rng);
    auto other = random_input(3, rng);

    const auto vonly = random_model(config_for(Architecture::vonly), 6);
    auto no_neighbors = in;
    no_neighbors.neighbor_features.clear();
    no_neighbors.neighbor_metas.clear();
    no_neighbors.meta.resize(0);
    EXPECT_EQ(vonly.forward(in), vonly.forward(no_neighbors));

    for (auto a : {Architecture::ltn, Architecture::rtn}) {
        const auto model = random_model(config_for(a), 7);
        auto changed = in;
        changed.meta = other.meta;
        changed.neighbor_metas = other.neighbor_metas;
        EXPECT_EQ(model.forward(in), model.forward(changed)) << architecture_name(a);
    }

    const auto vecs = random_model(config_for(Architecture::ltn_vecs), 8);
    auto changed = in;
    changed.neighbor_metas = other.neighbor_metas;
    EXPECT_EQ(vecs.forward(in), vecs.forward(changed));
    changed.meta = other.meta;
    EXPECT_NE(vecs.forward(in), vecs.forward(changed));
}

TEST(Models, ZeroWeightsGiveBiasOrZeroOutput) {
    Rng rng(6);
    const auto in = random_input(3, rng);
    for (auto a : kAllArchitectures) {
        auto model = random_model(config_for(a), 9);
        for (auto& p : model.params())
            if (p.is_weight) p.value.setZero();
        const auto out = model.forward(in);
        if (model.params().contains("b_y")) {
            EXPECT_EQ(out, Eigen::VectorXd(model.params().at("b_y").value.col(0))) << architecture_name(a);
        } else {
            // recurrent readout: h = sigmoid(b_o) * tanh(c) with gates driven by the bias only
            expect_close(out, reference_forward(model, in), 1e-12, std::string(architecture_name(a)));
        }
    }
}

TEST(Models, LtwinBlocksMatchSingleBranchNetworks) {
    Rng rng(7);
    const auto in = random_input(3, rng);
    const auto twin = random_model(config_for(Architecture::ltwin), 11);
    // zero the metadata half of the readout: scores reduce to an LTN over the visual branch
    auto visual = twin;
    visual.params().at("W_y").value.rightCols(2 * kH).setZero();
    auto ltn_cfg = config_for(Architecture::ltn);
    ad::ParameterSet ps;
    for (const char* n : {"W_x", "b_x", "W_z", "b_z"}) {
        const auto& p = twin.params().at(n);
        ps.add(n, p.value.rows(), p.value.cols(), p.is_weight).value = p.value;
    }
    ps.add("W_y", kL, 2 * kH, true).value = twin.params().at("W_y").value.leftCols(2 * kH);
    ps.add("b_y", kL, 1, false).value = twin.params().at("b_y").value;
    const ModelInstance ltn(ltn_cfg, std::move(ps));
    EXPECT_LT((visual.forward(in) - ltn.forward(in)).norm(), 1e-12);
}

TEST(Models, LayoutShapes) {
    const auto count = [](Architecture a) {
        std::size_t n = 0;
        for (const auto& s : parameter_layout(config_for(a))) n += static_cast<std::size_t>(s.rows * s.cols);
        return n;
    };
    EXPECT_EQ(count(Architecture::vonly), kL * kD + kL);
    EXPECT_EQ(count(Architecture::ltn), 2 * (kH * kD + kH) + kL * 2 * kH + kL);
    EXPECT_EQ(count(Architecture::lzip), 2 * (kH * kD + kH) + 2 * (kH * kP + kH) + 4 * kL * (kH + kL) + 4 * kL);
    auto c = config_for(Architecture::ltn_allvecs);
    const auto layout = parameter_layout(c);
    EXPECT_TRUE(std::none_of(layout.begin(), layout.end(), [](const auto& s) { return s.name == "b_z"; }));
    c.allvecs_neighbor_bias = true;
    const auto with_bias = parameter_layout(c);
    EXPECT_TRUE(std::any_of(with_bias.begin(), with_bias.end(), [](const auto& s) { return s.name == "b_z"; }));
}

TEST(Models, CreateUsesHeWeightsAndZeroBiases) {
    auto c = config_for(Architecture::ltn);
    c.hidden = 300;
    c.feature_dim = 200;
    const auto model = ModelInstance::create(c, 42);
    const auto& w = model.params().at("W_x").value;
    const double var = w.array().square().mean();
    EXPECT_NEAR(var, 2.0 / 200.0, 0.1 * 2.0 / 200.0);
    EXPECT_EQ(model.params().at("b_x").value.norm(), 0.0);
    const auto again = ModelInstance::create(c, 42);
    EXPECT_EQ(again.params().at("W_x").value, w);
}

TEST(Models, ConstructorRejectsMismatchedParameters) {
    const auto c = config_for(Architecture::ltn);
    auto params = ModelInstance::create(c, 1).params();
    params.at("W_z").value.resize(2, 2);
    EXPECT_THROW(ModelInstance(c, params), DataError);
    EXPECT_THROW(ModelInstance(config_for(Architecture::ltwin), ModelInstance::create(c, 1).params()), DataError);
}

TEST(Models, ConfigValidationAndJsonRoundTrip) {
    auto bad = config_for(Architecture::vonly);
    bad.feed_encoding = Encoding::w2v;
    EXPECT_THROW(bad.validate(), UsageError);
    auto joint = config_for(Architecture::ltwin);
    joint.feed_encoding.reset();
    EXPECT_THROW(joint.validate(), UsageError);

    for (auto a : kAllArchitectures) {
        auto c = config_for(a);
        c.order = NeighborOrder::descending;
        c.lstm_output = ad::CellOutput::identity;
        c.neighbor_encoding = Encoding::wnet;
        const nlohmann::json j = c;
        const auto back = j.get<ModelConfig>();
        EXPECT_EQ(nlohmann::json(back), j);
        EXPECT_EQ(back.arch, a);
        EXPECT_EQ(parse_architecture(architecture_name(a)), a);
    }
    EXPECT_THROW(parse_architecture("resnet"), UsageError);
}

TEST(Models, RejectsWrongInputShapes) {
    Rng rng(8);
    const auto model = random_model(config_for(Architecture::ltwin), 2);
    auto in = random_input(3, rng);
    in.meta.resize(2);
    EXPECT_THROW(model.forward(in), UsageError);
    in = random_input(3, rng);
    in.neighbor_metas.pop_back();
    EXPECT_THROW(model.forward(in), UsageError);
    in = random_input(0, rng);
    EXPECT_THROW(model.forward(in), UsageError);
}

TEST(Loss, CrossEntropyAtZeroIsLn2) {
    const std::vector<std::uint8_t> y = {1, 0, 1, 0};
    const auto l = sigmoid_cross_entropy(Eigen::VectorXd::Zero(4), y);
    EXPECT_NEAR(l.value, std::log(2.0), 1e-15);
    EXPECT_NEAR(l.grad[0], -0.125, 1e-15);
    EXPECT_NEAR(l.grad[1], 0.125, 1e-15);
}

TEST(Loss, StableForLargeScoresAndMatchesFiniteDifferences) {
    const std::vector<std::uint8_t> y = {1, 0, 1};
    Eigen::VectorXd s(3);
    s << 800.0, -800.0, -30.0;
    const auto big = sigmoid_cross_entropy(s, y);
    EXPECT_TRUE(std::isfinite(big.value));
    EXPECT_NEAR(big.value, 30.0 / 3.0, 1e-9);

    s << 0.3, -1.2, 2.5;
    const auto l = sigmoid_cross_entropy(s, y);
    for (Eigen::Index i = 0; i < 3; ++i) {
        auto plus = s, minus = s;
        plus[i] += 1e-6;
        minus[i] -= 1e-6;
        const double num = (sigmoid_cross_entropy(plus, y).value - sigmoid_cross_entropy(minus, y).value) / 2e-6;
        EXPECT_NEAR(l.grad[i], num, 1e-8);
    }
    EXPECT_THROW(sigmoid_cross_entropy(s, std::vector<std::uint8_t>{1}), UsageError);
}

TEST(Loss, AddsL2Penalty) {
    auto model = random_model(config_for(Architecture::vonly), 3);
    const std::vector<std::uint8_t> y = {1, 0, 0};
    const Eigen::VectorXd s = Eigen::VectorXd::Zero(3);
    const double w2 = model.params().at("W_y").value.squaredNorm();
    EXPECT_NEAR(loss(s, y, 0.1, model.params()), std::log(2.0) + 0.1 * w2, 1e-12);
}

TEST(Models, GradientsMatchFiniteDifferencesForEveryArchitecture) {
    Rng rng(9);
    const std::vector<std::uint8_t> y = {1, 0, 1};
    for (auto a : kAllArchitectures) {
        for (double p : {0.0, 0.3}) {
            auto c = config_for(a);
            c.dropout = p;
            c.allvecs_neighbor_bias = true;
            auto model = random_model(c, 20 + static_cast<std::uint64_t>(a));
            const auto in = random_input(3, rng);
            auto objective = [&](bool with_grad) {
                ad::Tape tape;
                Rng mask(77);
                const auto out = model.forward(tape, in, ad::Mode::train, mask);
                const auto ce = sigmoid_cross_entropy(tape.value(out), y);
                if (with_grad) tape.backward(out, ce.grad);
                return ce.value + ad::l2_penalty(model.params(), 1e-3, with_grad);
            };
            const auto report = ad::grad_check(model.params(), objective);
            EXPECT_TRUE(report.passed(1e-4)) << architecture_name(a) << " p=" << p << " worst "
                                             << report.worst_parameter << " " << report.max_rel_error;
        }
    }
}

TEST(Models, TrainModeDropoutIsReproducibleAndEvalIsDeterministic) {
    Rng rng(10);
    auto c = config_for(Architecture::ltwin);
    c.dropout = 0.5;
    auto model = random_model(c, 1);
    const auto in = random_input(3, rng);
    auto run = [&](std::uint64_t seed) {
        ad::Tape t;
        Rng r(seed);
        return Eigen::VectorXd(t.value(model.forward(t, in, ad::Mode::train, r)));
    };
    EXPECT_EQ(run(5), run(5));
    EXPECT_NE(run(5), run(6));
    EXPECT_EQ(model.forward(in), model.forward(in));
}

namespace {

struct TinyData {
    Dataset data;
    TinyData() {
        std::vector<ImageRecord> recs;
        std::vector<std::string> ids;
        std::vector<float> values;
        for (int i = 0; i < 5; ++i) {
            recs.push_back({"i" + std::to_string(i), {"t" + std::to_string(i % 2)}, {"l0"}, Split::train});
            ids.push_back("i" + std::to_string(i));
            for (std::size_t k = 0; k < kD; ++k) values.push_back(static_cast<float>(0.25 * i - 0.5 * k));
        }
        data.corpus = Corpus(recs, LabelVocabulary({"l0", "l1", "l2"}));
        data.vocab = TagVocabulary({"t0", "t1"});
        data.features = FeatureStore::from_rows(kD, ids, values);
        data.feature_row = {0, 1, 2, 3, 4};
    }
};

}  // namespace

TEST(Predict, EnumeratedScoreIsMeanOverSubsets) {
    TinyData t;
    const InputAssembler inputs(t.data, std::nullopt);
    auto c = config_for(Architecture::ltn, 2);
    c.m_max = 3;
    const auto model = random_model(c, 12);
    const NeighborList list = {{1, 0.1}, {2, 0.2}, {3, 0.3}};
    const auto& q = t.data.corpus.record(0);
    const auto pred = predict(model, inputs, q, t.data.feature(0), list, {});
    EXPECT_EQ(pred.forwards, 3u);
    EXPECT_FALSE(pred.sampled);
    Eigen::VectorXd hand = Eigen::VectorXd::Zero(kL);
    for (auto pair : {std::array<std::size_t, 2>{0, 1}, {0, 2}, {1, 2}}) {
        const std::vector<Neighbor> z = {list[pair[0]], list[pair[1]]};
        hand += model.forward(inputs.assemble(0, z));
    }
    EXPECT_LT((pred.scores - hand / 3.0).norm(), 1e-12);
}

TEST(Predict, SamplesWhenEnumerationExceedsCapAndPadsShortLists) {
    TinyData t;
    const InputAssembler inputs(t.data, std::nullopt);
    auto c = config_for(Architecture::ltn, 2);
    const auto model = random_model(c, 13);
    const NeighborList list = {{1, 0.1}, {2, 0.2}, {3, 0.3}, {4, 0.4}};
    PredictOptions opt;
    opt.enumeration_cap = 5;
    opt.samples = 7;
    opt.seed = 3;
    const auto a = predict(model, inputs, t.data.corpus.record(0), t.data.feature(0), list, opt);
    const auto b = predict(model, inputs, t.data.corpus.record(0), t.data.feature(0), list, opt);
    EXPECT_TRUE(a.sampled);
    EXPECT_EQ(a.forwards, 7u);
    EXPECT_EQ(a.scores, b.scores);

    c.m = 3;
    const auto short_model = random_model(c, 13);
    const NeighborList two = {{1, 0.1}, {2, 0.2}};
    const auto padded = predict(short_model, inputs, t.data.corpus.record(0), t.data.feature(0), two, opt);
    EXPECT_TRUE(padded.padded);
    EXPECT_THROW(predict(short_model, inputs, t.data.corpus.record(0), t.data.feature(0), {}, opt), DataError);
}

TEST(Predict, VisualOnlySkipsRetrieval) {
    TinyData t;
    const InputAssembler inputs(t.data, std::nullopt);
    const auto model = random_model(config_for(Architecture::vonly), 14);
    const auto pred = predict(model, inputs, nullptr, t.data.corpus.record(2), t.data.feature(2), {});
    EXPECT_EQ(pred.forwards, 1u);
    EXPECT_TRUE(pred.neighbors.empty());
}
