#include "tagnet/errors.hpp"
#include "tagnet/training.hpp"

#include <nlohmann/json.hpp>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace tagnet;

namespace {

py::object to_python(const nlohmann::json& j) {
    return py::module_::import("json").attr("loads")(j.dump());
}

nlohmann::json from_python(const py::object& o) {
    return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::dict pr_dict(const PrecisionRecall& p) {
    py::dict d;
    d["rec_lab"] = p.rec_lab;
    d["prec_lab"] = p.prec_lab;
    d["rec_img"] = p.rec_img;
    d["prec_img"] = p.prec_img;
    return d;
}

py::dict report_dict(const EvalReport& r) {
    py::dict d;
    const auto v = metric_values(r);
    for (std::size_t i = 0; i < kMetricColumns.size(); ++i) d[py::str(std::string(kMetricColumns[i]))] = v[i];
    d["upper_bound"] = pr_dict(r.bound);
    d["k"] = r.k;
    d["images"] = r.images;
    d["labels"] = r.labels;
    d["labels_skipped"] = r.labels_skipped;
    d["images_skipped"] = r.images_skipped;
    return d;
}

ScoreMatrix score_matrix(const ScoreRows& scores, const Eigen::Ref<const ScoreRows>& truth) {
    TruthMatrix t = (truth.array() != 0.0).cast<std::uint8_t>();
    return {scores, t};
}

Experiment parse_experiment(const py::dict& d) {
    Experiment e;
    e.arch = parse_architecture(d["arch"].cast<std::string>());
    e.n = parse_encoding(d.contains("n") ? d["n"].cast<std::string>() : "id");
    if (d.contains("f") && !d["f"].is_none()) e.f = parse_encoding(d["f"].cast<std::string>());
    if (d.contains("m")) e.m = d["m"].cast<std::size_t>();
    if (d.contains("M")) e.m_max = d["M"].cast<std::size_t>();
    return e;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Neighbor metadata fusion for multilabel image annotation";
    m.attr("__version__") = TAGNET_VERSION;

    py::register_exception<UsageError>(m, "UsageError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    m.def("architectures", [] {
        std::vector<std::string> out;
        for (auto a : kAllArchitectures) out.emplace_back(architecture_name(a));
        return out;
    });

    m.def(
        "jaccard",
        [](const std::vector<std::string>& a, const std::vector<std::string>& b) {
            std::vector<std::string> tokens(a);
            tokens.insert(tokens.end(), b.begin(), b.end());
            std::sort(tokens.begin(), tokens.end());
            tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
            const TagVocabulary vocab(tokens);
            return jaccard(one_hot({"a", a, {}, {}}, vocab), one_hot({"b", b, {}, {}}, vocab));
        },
        py::arg("a"), py::arg("b"), "Jaccard distance between two tag sets.");

    m.def("cosine_distance", &cosine_distance, py::arg("u"), py::arg("v"));
    m.def("candidate_count", &candidate_count, py::arg("m"), py::arg("M"));

    m.def(
        "average_precision",
        [](const std::vector<double>& scores, const std::vector<int>& relevant) -> std::optional<double> {
            std::vector<std::uint8_t> r(relevant.begin(), relevant.end());
            return average_precision(scores, r);
        },
        py::arg("scores"), py::arg("relevant"));

    m.def(
        "evaluate",
        [](const ScoreRows& scores, const Eigen::Ref<const ScoreRows>& truth, std::size_t k) {
            return report_dict(evaluate(score_matrix(scores, truth), k));
        },
        py::arg("scores"), py::arg("truth"), py::arg("k") = 3,
        "Metrics in percent for an images x labels score matrix and 0/1 truth.");

    m.def(
        "upper_bound",
        [](const Eigen::Ref<const ScoreRows>& truth, std::size_t k) {
            TruthMatrix t = (truth.array() != 0.0).cast<std::uint8_t>();
            return pr_dict(upper_bound(t, k));
        },
        py::arg("truth"), py::arg("k") = 3);

    m.def(
        "synth_corpus",
        [](std::size_t n, std::size_t d, std::size_t labels, std::size_t tags, std::size_t clusters, double noise,
           std::uint64_t seed) {
            SynthOptions o;
            o.n = n;
            o.d = d;
            o.n_labels = labels;
            o.n_tags = tags;
            o.n_clusters = clusters;
            o.noise = noise;
            o.seed = seed;
            const auto s = synth_corpus(o);
            py::list records;
            for (const auto& r : s.corpus.records()) {
                py::dict rec;
                rec["id"] = r.id;
                rec["tags"] = r.tags;
                rec["labels"] = r.labels;
                rec["split"] = r.split ? std::string(split_name(*r.split)) : std::string();
                records.append(rec);
            }
            Eigen::MatrixXf features(static_cast<Eigen::Index>(s.features.size()), static_cast<Eigen::Index>(d));
            for (std::size_t i = 0; i < s.features.size(); ++i)
                for (std::size_t k = 0; k < d; ++k)
                    features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = s.features.row(i)[k];
            py::dict out;
            out["records"] = records;
            out["features"] = features;
            out["record_cluster"] = s.record_cluster;
            out["tag_cluster"] = s.tag_cluster;
            return out;
        },
        py::arg("n") = 1000, py::arg("d") = 16, py::arg("labels") = 10, py::arg("tags") = 100,
        py::arg("clusters") = 10, py::arg("noise") = 0.3, py::arg("seed") = 0);

    m.def(
        "grad_check",
        [](const std::string& arch, std::uint64_t seed, double dropout) {
            ModelConfig c;
            c.arch = parse_architecture(arch);
            c.hidden = 6;
            c.feature_dim = 8;
            c.labels = 4;
            c.dropout = dropout;
            if (is_joint(c.arch)) {
                c.meta_dim = 5;
                c.feed_encoding = Encoding::w2v;
            }
            auto model = ModelInstance::create(c, seed);
            Rng rng = make_rng(seed, "grad-check");
            std::normal_distribution<double> g(0.0, 1.0);
            auto vec = [&](Eigen::Index n) {
                Eigen::VectorXd v(n);
                for (auto& x : v) x = g(rng);
                return v;
            };
            ForwardInput in{vec(8), vec(5), {}, {}};
            for (int i = 0; i < 3; ++i) {
                in.neighbor_features.push_back(vec(8));
                in.neighbor_metas.push_back(vec(5));
            }
            const std::vector<std::uint8_t> truth = {1, 0, 1, 0};
            auto objective = [&](bool with_grad) {
                ad::Tape tape;
                Rng mask = make_rng(seed, "mask");
                const auto out = model.forward(tape, in, ad::Mode::train, mask);
                const auto ce = sigmoid_cross_entropy(tape.value(out), truth);
                if (with_grad) tape.backward(out, ce.grad);
                return ce.value + ad::l2_penalty(model.params(), 3e-4, with_grad);
            };
            const auto r = ad::grad_check(model.params(), objective);
            py::dict d;
            d["max_rel_error"] = r.max_rel_error;
            d["worst_parameter"] = r.worst_parameter;
            d["entries_checked"] = r.entries_checked;
            return d;
        },
        py::arg("arch"), py::arg("seed") = 0, py::arg("dropout") = 0.5,
        "Finite-difference gradient check of one architecture at toy dimensions.");

    py::class_<ModelInstance>(m, "Model")
        .def(py::init([](const py::dict& config, std::uint64_t seed) {
                 return ModelInstance::create(from_python(config).get<ModelConfig>(), seed);
             }),
             py::arg("config"), py::arg("seed") = 0)
        .def_property_readonly("config", [](const ModelInstance& mi) { return to_python(nlohmann::json(mi.config())); })
        .def_property_readonly("parameter_names",
                               [](const ModelInstance& mi) {
                                   std::vector<std::string> out;
                                   for (const auto& p : mi.params()) out.push_back(p.name);
                                   return out;
                               })
        .def(
            "forward",
            [](const ModelInstance& mi, const Eigen::VectorXd& feature, std::optional<Eigen::VectorXd> meta,
               std::vector<Eigen::VectorXd> neighbor_features, std::vector<Eigen::VectorXd> neighbor_metas) {
                ForwardInput in{feature, meta.value_or(Eigen::VectorXd()), std::move(neighbor_features),
                                std::move(neighbor_metas)};
                return mi.forward(in);
            },
            py::arg("feature"), py::arg("meta") = py::none(), py::arg("neighbor_features") = std::vector<Eigen::VectorXd>{},
            py::arg("neighbor_metas") = std::vector<Eigen::VectorXd>{}, "Eval-mode label scores.")
        .def("save", [](const ModelInstance& mi, const std::string& path) {
            save_checkpoint(path, mi, {TrainConfig{}, "", {}});
        })
        .def_static("load", [](const std::string& path) { return load_checkpoint(path).model; });

    m.def(
        "run_synthetic_protocol",
        [](const py::list& experiments, std::size_t n, std::size_t tags, std::size_t splits, std::uint64_t seed,
           std::size_t hidden, std::size_t max_epochs, std::size_t threads) {
            SynthOptions so;
            so.n = n;
            so.d = 32;
            so.n_tags = tags;
            so.seed = seed;
            const auto syn = synth_corpus(so);
            ProtocolOptions po;
            po.splits = splits;
            po.seed = seed;
            po.hidden = hidden;
            po.threads = threads;
            po.train.max_epochs = max_epochs;
            po.train.min_epochs = std::min<std::size_t>(max_epochs, 3);
            po.train.record_timing = false;
            po.embeddings.w2v =
                std::make_shared<const EmbeddingDictionary>(synth_embeddings(syn.tag_cluster, 32, 0.5, seed));
            std::vector<Experiment> ex;
            for (const auto& e : experiments) ex.push_back(parse_experiment(e.cast<py::dict>()));
            ProtocolReport report;
            {
                py::gil_scoped_release release;
                report = run_protocol(syn.corpus, syn.features, ex, po);
            }
            py::list runs;
            for (const auto& r : report.runs) {
                py::dict d = report_dict(r.report);
                d["experiment"] = r.experiment.name();
                d["repetition"] = r.repetition;
                d["epochs"] = r.history.size();
                runs.append(d);
            }
            return runs;
        },
        py::arg("experiments"), py::arg("n") = 1000, py::arg("tags") = 300, py::arg("splits") = 1,
        py::arg("seed") = 0, py::arg("hidden") = 64, py::arg("max_epochs") = 5, py::arg("threads") = 1,
        "Train and test the given experiments on a synthetic corpus with synthetic w2v embeddings.");
}
