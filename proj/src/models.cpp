#include "tagnet/models.hpp"

#include "tagnet/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>

namespace tagnet {

using ad::Var;

std::string_view architecture_name(Architecture a) {
    switch (a) {
        case Architecture::vonly: return "vonly";
        case Architecture::ltn: return "ltn";
        case Architecture::rtn: return "rtn";
        case Architecture::ltn_vecs: return "ltn_vecs";
        case Architecture::ltn_allvecs: return "ltn_allvecs";
        case Architecture::ltwin: return "ltwin";
        case Architecture::ltwin_rnn: return "ltwin_rnn";
        case Architecture::ltwin_2rnn: return "ltwin_2rnn";
        case Architecture::lzip: return "lzip";
    }
    return "?";
}

Architecture parse_architecture(std::string_view name) {
    for (auto a : kAllArchitectures)
        if (architecture_name(a) == name) return a;
    throw UsageError("unknown architecture '" + std::string(name) + "'");
}

bool is_joint(Architecture a) {
    return a != Architecture::vonly && a != Architecture::ltn && a != Architecture::rtn;
}

bool is_recurrent(Architecture a) {
    return a == Architecture::rtn || a == Architecture::ltwin_rnn || a == Architecture::ltwin_2rnn ||
           a == Architecture::lzip;
}

bool uses_neighbors(Architecture a) { return a != Architecture::vonly; }

bool uses_neighbor_metadata(Architecture a) {
    return is_joint(a) && a != Architecture::ltn_vecs;
}

std::pair<std::size_t, std::size_t> default_epoch_bounds(Architecture a) {
    return is_joint(a) ? std::pair<std::size_t, std::size_t>{5, 15}
                       : std::pair<std::size_t, std::size_t>{3, 10};
}

void ModelConfig::validate() const {
    if (hidden == 0 || feature_dim == 0 || labels == 0)
        throw UsageError("model dimensions (h, d, L) must be positive");
    if (m == 0 || m > m_max) throw UsageError("neighborhood sizes must satisfy 1 <= m <= M");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw UsageError("dropout must lie in [0, 1)");
    if (is_joint(arch)) {
        if (!feed_encoding)
            throw UsageError(std::string(architecture_name(arch)) + " requires a feed encoding");
        if (meta_dim == 0) throw UsageError("joint models need a positive metadata dimension");
    } else if (feed_encoding) {
        throw UsageError(std::string(architecture_name(arch)) +
                         " is a visual model and takes no feed encoding");
    }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{
        {"arch", architecture_name(c.arch)},
        {"hidden", c.hidden},
        {"feature_dim", c.feature_dim},
        {"meta_dim", c.meta_dim},
        {"labels", c.labels},
        {"m", c.m},
        {"M", c.m_max},
        {"n", encoding_name(c.neighbor_encoding)},
        {"f", c.feed_encoding ? nlohmann::json(encoding_name(*c.feed_encoding)) : nlohmann::json()},
        {"dropout", c.dropout},
        {"allvecs_neighbor_bias", c.allvecs_neighbor_bias},
        {"order", c.order == NeighborOrder::ascending ? "ascending" : "descending"},
        {"lstm_output", c.lstm_output == ad::CellOutput::tanh ? "tanh" : "identity"},
    };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.arch = parse_architecture(j.at("arch").get<std::string>());
    c.hidden = j.at("hidden").get<std::size_t>();
    c.feature_dim = j.at("feature_dim").get<std::size_t>();
    c.meta_dim = j.at("meta_dim").get<std::size_t>();
    c.labels = j.at("labels").get<std::size_t>();
    c.m = j.at("m").get<std::size_t>();
    c.m_max = j.at("M").get<std::size_t>();
    c.neighbor_encoding = parse_encoding(j.at("n").get<std::string>());
    c.feed_encoding.reset();
    if (j.contains("f") && !j["f"].is_null()) c.feed_encoding = parse_encoding(j["f"].get<std::string>());
    c.dropout = j.at("dropout").get<double>();
    c.allvecs_neighbor_bias = j.value("allvecs_neighbor_bias", false);
    c.order = j.value("order", std::string("ascending")) == "descending" ? NeighborOrder::descending
                                                                      : NeighborOrder::ascending;
    c.lstm_output = j.value("lstm_output", std::string("tanh")) == "identity" ? ad::CellOutput::identity
                                                                             : ad::CellOutput::tanh;
}

// ---------------------------------------------------------------------------
// Parameter layout

std::vector<ParameterShape> parameter_layout(const ModelConfig& c) {
    c.validate();
    using I = Eigen::Index;
    const I h = static_cast<I>(c.hidden), d = static_cast<I>(c.feature_dim),
            p = static_cast<I>(c.meta_dim), L = static_cast<I>(c.labels);
    std::vector<ParameterShape> out;
    auto dense = [&](const std::string& suffix, I rows, I cols, bool bias = true) {
        out.push_back({"W_" + suffix, rows, cols, true});
        if (bias) out.push_back({"b_" + suffix, rows, 1, false});
    };
    auto lstm = [&](const std::string& name, I in, I hid) {
        out.push_back({"W_" + name, 4 * hid, in + hid, true});
        out.push_back({"b_" + name, 4 * hid, 1, false});
    };

    switch (c.arch) {
        case Architecture::vonly:
            dense("y", L, d);
            break;
        case Architecture::ltn:
            dense("x", h, d);
            dense("z", h, d);
            dense("y", L, 2 * h);
            break;
        case Architecture::rtn:
            dense("x", h, d);
            lstm("RNN", d, h);
            dense("y", L, 2 * h);
            break;
        case Architecture::ltn_vecs:
            dense("x", h, d + p);
            dense("z", h, d);
            dense("y", L, 2 * h);
            break;
        case Architecture::ltn_allvecs:
            dense("x", h, d + p);
            dense("z", h, d + p, c.allvecs_neighbor_bias);
            dense("y", L, 2 * h);
            break;
        case Architecture::ltwin:
            dense("x", h, d);
            dense("z", h, d);
            dense("xu", h, p);
            dense("zu", h, p);
            dense("y", L, 4 * h);
            break;
        case Architecture::ltwin_rnn:
            dense("x", h, d);
            dense("z", h, d);
            dense("xu", h, p);
            dense("zu", h, p);
            lstm("RNN", h, h);
            lstm("oRNN", h, h);
            dense("y", L, 4 * h);
            break;
        case Architecture::ltwin_2rnn:
            dense("x", h, d);
            dense("z", h, d);
            dense("xu", h, p);
            dense("zu", h, p);
            lstm("RNN", h, h);
            lstm("oRNN", h, h);
            lstm("fRNN", h, L);
            break;
        case Architecture::lzip:
            dense("x", h, d);
            dense("z", h, d);
            dense("xu", h, p);
            dense("zu", h, p);
            lstm("RNN", h, L);
            break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// ModelInstance

ModelInstance ModelInstance::create(const ModelConfig& config, std::uint64_t seed) {
    ModelInstance inst;
    inst.config_ = config;
    Rng rng = make_rng(seed, "init");
    for (const auto& s : parameter_layout(config)) {
        auto& p = inst.params_.add(s.name, s.rows, s.cols, s.is_weight);
        if (s.is_weight) p.value = ad::he_init(s.rows, s.cols, s.cols, rng);
    }
    return inst;
}

ModelInstance::ModelInstance(ModelConfig config, ad::ParameterSet params)
    : config_(std::move(config)), params_(std::move(params)) {
    const auto layout = parameter_layout(config_);
    if (layout.size() != params_.size())
        throw DataError("parameter set does not match architecture " +
                        std::string(architecture_name(config_.arch)));
    for (const auto& s : layout) {
        if (!params_.contains(s.name)) throw DataError("missing parameter '" + s.name + "'");
        const auto& p = params_.at(s.name);
        if (p.value.rows() != s.rows || p.value.cols() != s.cols)
            throw DataError("parameter '" + s.name + "' has the wrong shape");
    }
}

void ModelInstance::check_input(const ForwardInput& in) const {
    const auto& c = config_;
    if (static_cast<std::size_t>(in.feature.size()) != c.feature_dim)
        throw UsageError("query feature has dimension " + std::to_string(in.feature.size()) +
                         ", model expects " + std::to_string(c.feature_dim));
    if (uses_neighbors(c.arch)) {
        if (in.neighbor_features.empty()) throw UsageError("model requires at least one neighbor");
        for (const auto& f : in.neighbor_features)
            if (static_cast<std::size_t>(f.size()) != c.feature_dim)
                throw UsageError("neighbor feature has the wrong dimension");
    }
    if (is_joint(c.arch) && static_cast<std::size_t>(in.meta.size()) != c.meta_dim)
        throw UsageError("query metadata vector has dimension " + std::to_string(in.meta.size()) +
                         ", model expects " + std::to_string(c.meta_dim));
    if (uses_neighbor_metadata(c.arch)) {
        if (in.neighbor_metas.size() != in.neighbor_features.size())
            throw UsageError("every neighbor needs a metadata vector");
        for (const auto& mv : in.neighbor_metas)
            if (static_cast<std::size_t>(mv.size()) != c.meta_dim)
                throw UsageError("neighbor metadata vector has the wrong dimension");
    }
}

struct ModelInstance::Pass {
    ad::Tape& tape;
    ad::ParameterSet& p;
    const ModelConfig& c;
    ad::Mode mode;
    Rng& rng;

    Var drop(Var v) { return tape.dropout(v, c.dropout, mode, rng); }

    Var fc_relu(Var x, const std::string& suffix, bool bias = true) {
        return tape.relu(tape.affine(p.at("W_" + suffix), x, bias ? &p.at("b_" + suffix) : nullptr));
    }

    Var readout(std::span<const Var> parts) {
        return tape.affine(p.at("W_y"), tape.concat(parts), &p.at("b_y"));
    }

    ad::LstmCell cell(const char* name, std::size_t in, std::size_t hidden) const {
        return {name, static_cast<Eigen::Index>(in), static_cast<Eigen::Index>(hidden), c.lstm_output};
    }

    std::vector<Var> inputs(const std::vector<Eigen::VectorXd>& vs) {
        std::vector<Var> out;
        out.reserve(vs.size());
        for (const auto& v : vs) out.push_back(tape.input(v));
        return out;
    }

    std::vector<Var> in_order(std::vector<Var> seq) const {
        if (c.order == NeighborOrder::descending) std::reverse(seq.begin(), seq.end());
        return seq;
    }

    // max_i relu(W_z phi(z_i) + b_z)
    Var pooled_neighbors(const std::vector<Var>& feats) {
        std::vector<Var> hs;
        for (auto f : feats) hs.push_back(fc_relu(f, "z"));
        return tape.max_pool(hs);
    }
};

Var ModelInstance::forward(ad::Tape& tape, const ForwardInput& in, ad::Mode mode, Rng& dropout_rng) {
    check_input(in);
    Pass s{tape, params_, config_, mode, dropout_rng};
    const Var x = tape.input(in.feature);

    switch (config_.arch) {
        case Architecture::vonly:
            return tape.affine(params_.at("W_y"), x, &params_.at("b_y"));

        case Architecture::ltn: {
            const Var vx = s.drop(s.fc_relu(x, "x"));
            const Var vz = s.drop(s.pooled_neighbors(s.inputs(in.neighbor_features)));
            const Var parts[] = {vx, vz};
            return s.readout(parts);
        }

        case Architecture::rtn: {
            const Var vx = s.drop(s.fc_relu(x, "x"));
            const auto seq = s.in_order(s.inputs(in.neighbor_features));
            const Var vz = s.drop(s.cell("RNN", config_.feature_dim, config_.hidden).run(tape, params_, seq));
            const Var parts[] = {vx, vz};
            return s.readout(parts);
        }

        case Architecture::ltn_vecs: {
            const Var xin_parts[] = {x, tape.input(in.meta)};
            const Var vx = s.drop(s.fc_relu(tape.concat(xin_parts), "x"));
            const Var vz = s.drop(s.pooled_neighbors(s.inputs(in.neighbor_features)));
            const Var parts[] = {vx, vz};
            return s.readout(parts);
        }

        case Architecture::ltn_allvecs: {
            const Var xin_parts[] = {x, tape.input(in.meta)};
            const Var vx = s.drop(s.fc_relu(tape.concat(xin_parts), "x"));
            std::vector<Var> hs;
            for (std::size_t i = 0; i < in.neighbor_features.size(); ++i) {
                const Var zin[] = {tape.input(in.neighbor_features[i]), tape.input(in.neighbor_metas[i])};
                hs.push_back(s.fc_relu(tape.concat(zin), "z", config_.allvecs_neighbor_bias));
            }
            const Var vz = s.drop(tape.max_pool(hs));
            const Var parts[] = {vx, vz};
            return s.readout(parts);
        }

        case Architecture::ltwin:
        case Architecture::ltwin_rnn:
        case Architecture::ltwin_2rnn: {
            const Var vx = s.drop(s.fc_relu(x, "x"));
            const Var ux = s.drop(s.fc_relu(tape.input(in.meta), "xu"));
            const auto feats = s.inputs(in.neighbor_features);
            const auto metas = s.inputs(in.neighbor_metas);
            Var vz{}, uz{};
            if (config_.arch == Architecture::ltwin) {
                vz = s.pooled_neighbors(feats);
                std::vector<Var> us;
                for (auto m : metas) us.push_back(s.fc_relu(m, "zu"));
                uz = tape.max_pool(us);
            } else {
                std::vector<Var> fz, fo;
                for (auto f : feats) fz.push_back(s.fc_relu(f, "z"));
                for (auto m : metas) fo.push_back(s.fc_relu(m, "zu"));
                vz = s.cell("RNN", config_.hidden, config_.hidden).run(tape, params_, s.in_order(fz));
                uz = s.cell("oRNN", config_.hidden, config_.hidden).run(tape, params_, s.in_order(fo));
            }
            vz = s.drop(vz);
            uz = s.drop(uz);
            const Var parts[] = {vx, vz, ux, uz};
            if (config_.arch == Architecture::ltwin_2rnn)
                return s.cell("fRNN", config_.hidden, config_.labels).run(tape, params_, parts);
            return s.readout(parts);
        }

        case Architecture::lzip: {
            std::vector<Var> seq = {s.drop(s.fc_relu(x, "x")), s.drop(s.fc_relu(tape.input(in.meta), "xu"))};
            std::vector<std::size_t> order(in.neighbor_features.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            if (config_.order == NeighborOrder::descending) std::reverse(order.begin(), order.end());
            for (auto i : order) {
                seq.push_back(s.drop(s.fc_relu(tape.input(in.neighbor_features[i]), "z")));
                seq.push_back(s.drop(s.fc_relu(tape.input(in.neighbor_metas[i]), "zu")));
            }
            return s.cell("RNN", config_.hidden, config_.labels).run(tape, params_, seq);
        }
    }
    throw UsageError("unhandled architecture");
}

Eigen::VectorXd ModelInstance::forward(const ForwardInput& in) const {
    // Eval mode records no dropout and never runs backward, so parameters stay untouched.
    auto& self = const_cast<ModelInstance&>(*this);
    ad::Tape tape;
    Rng unused(0);
    const Var out = self.forward(tape, in, ad::Mode::eval, unused);
    return tape.value(out);
}

// ---------------------------------------------------------------------------
// Inputs and prediction

InputAssembler::InputAssembler(const Dataset& data, std::optional<Encoder> feed)
    : data_(&data), feed_(std::move(feed)) {}

namespace {

Eigen::VectorXd to_vector(std::span<const float> f) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(f.size()));
    for (std::size_t i = 0; i < f.size(); ++i) v[static_cast<Eigen::Index>(i)] = f[i];
    return v;
}

}  // namespace

ForwardInput InputAssembler::assemble(std::size_t record, std::span<const Neighbor> neighborhood) const {
    return assemble(data_->corpus.record(record), data_->feature(record), neighborhood);
}

ForwardInput InputAssembler::assemble(const ImageRecord& query, std::span<const float> feature,
                                      std::span<const Neighbor> neighborhood) const {
    ForwardInput in;
    in.feature = to_vector(feature);
    if (feed_) in.meta = feed_->encode(query);
    in.neighbor_features.reserve(neighborhood.size());
    for (const auto& n : neighborhood) {
        in.neighbor_features.push_back(to_vector(data_->feature(n.record)));
        if (feed_) in.neighbor_metas.push_back(feed_->encode(data_->corpus.record(n.record)));
    }
    return in;
}

Prediction predict(const ModelInstance& model, const InputAssembler& inputs,
                   const ImageRecord& query, std::span<const float> feature,
                   const NeighborList& neighbors, const PredictOptions& options) {
    const auto& cfg = model.config();
    Prediction out;
    if (!uses_neighbors(cfg.arch)) {
        out.scores = model.forward(inputs.assemble(query, feature, {}));
        out.forwards = 1;
        return out;
    }
    if (neighbors.empty()) throw DataError("no neighbors retrieved for '" + query.id + "'");
    out.neighbors = neighbors;

    const bool enumerable = !options.force_sampling && neighbors.size() >= cfg.m &&
                            candidate_count(cfg.m, neighbors.size()) <= options.enumeration_cap;
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cfg.labels));
    if (enumerable) {
        for (const auto& z : enumerate_neighborhoods(neighbors, cfg.m, options.enumeration_cap)) {
            sum += model.forward(inputs.assemble(query, feature, z.members));
            ++out.forwards;
        }
    } else {
        if (options.samples == 0) throw UsageError("sample count must be positive");
        Rng rng = make_rng(options.seed, "predict");
        out.sampled = true;
        for (std::size_t t = 0; t < options.samples; ++t) {
            bool padded = false;
            const auto z = draw_neighborhood(neighbors, cfg.m, rng, &padded);
            out.padded = out.padded || padded;
            sum += model.forward(inputs.assemble(query, feature, z.members));
            ++out.forwards;
        }
    }
    out.scores = sum / static_cast<double>(out.forwards);
    return out;
}

Prediction predict(const ModelInstance& model, const InputAssembler& inputs,
                   const NeighborIndex* index, const ImageRecord& query,
                   std::span<const float> feature, const PredictOptions& options) {
    if (!uses_neighbors(model.config().arch)) return predict(model, inputs, query, feature, {}, options);
    if (!index) throw UsageError("model requires a neighbor index");
    return predict(model, inputs, query, feature, index->query(query, model.config().m_max), options);
}

// ---------------------------------------------------------------------------
// Loss

LossValue sigmoid_cross_entropy(const Eigen::VectorXd& scores, std::span<const std::uint8_t> truth) {
    if (static_cast<std::size_t>(scores.size()) != truth.size())
        throw UsageError("scores and label vector differ in length");
    const double n = static_cast<double>(truth.size());
    LossValue out;
    out.grad.resize(scores.size());
    for (Eigen::Index i = 0; i < scores.size(); ++i) {
        const double s = scores[i];
        const double y = truth[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
        out.value += std::max(s, 0.0) - s * y + std::log1p(std::exp(-std::abs(s)));
        const double sig = s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
        out.grad[i] = (sig - y) / n;
    }
    out.value /= n;
    return out;
}

double loss(const Eigen::VectorXd& scores, std::span<const std::uint8_t> truth, double lambda,
            ad::ParameterSet& params) {
    return sigmoid_cross_entropy(scores, truth).value + ad::l2_penalty(params, lambda);
}

}  // namespace tagnet
