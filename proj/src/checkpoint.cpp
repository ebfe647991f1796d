#include "tagnet/errors.hpp"
#include "tagnet/training.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace tagnet {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

namespace {

class Writer {
public:
    explicit Writer(std::ostream& os) : os_(os) {}

    template <class T>
    void pod(T v) {
        os_.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
    void bytes(std::string_view s) {
        pod(static_cast<std::uint32_t>(s.size()));
        os_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

private:
    std::ostream& os_;
};

class Reader {
public:
    Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}

    template <class T>
    T pod() {
        T v{};
        is_.read(reinterpret_cast<char*>(&v), sizeof v);
        if (!is_) truncated();
        return v;
    }
    std::string bytes() {
        const auto n = pod<std::uint32_t>();
        if (n > (1u << 30)) throw DataError(path_ + ": corrupt length field");
        std::string s(n, '\0');
        is_.read(s.data(), n);
        if (!is_) truncated();
        return s;
    }
    [[noreturn]] void truncated() const { throw DataError(path_ + ": checkpoint is truncated"); }

private:
    std::istream& is_;
    std::string path_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelInstance& model,
                     const CheckpointMeta& meta, const TrainState* state) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write checkpoint " + path.string());
    Writer w(os);
    os.write(kCheckpointMagic, 4);
    w.pod(kCheckpointVersion);
    w.bytes(architecture_name(model.config().arch));

    nlohmann::json header;
    header["model"] = model.config();
    header["train"] = meta.train;
    header["vocab_fingerprint"] = meta.vocab_fingerprint;
    header["labels"] = meta.labels;
    if (state) {
        const auto& c = state->optimizer.config();
        header["optimizer"] = {{"learning_rate", c.learning_rate}, {"decay", c.decay}, {"epsilon", c.epsilon}};
    }
    w.bytes(header.dump());

    const auto& params = model.params();
    w.pod(static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        w.bytes(p.name);
        w.pod(static_cast<std::uint32_t>(p.value.rows()));
        w.pod(static_cast<std::uint32_t>(p.value.cols()));
        const Eigen::MatrixXf f = p.value.cast<float>();
        os.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
    }

    w.pod(static_cast<std::uint8_t>(state ? 1 : 0));
    if (state) {
        w.pod(static_cast<std::uint64_t>(state->epoch));
        w.pod(static_cast<std::uint64_t>(state->optimizer.steps()));
        w.pod(state->best_metric);
        w.pod(static_cast<std::uint64_t>(state->best_epoch));
        w.pod(static_cast<std::uint64_t>(state->stale_epochs));
        const auto& acc = state->optimizer.accumulators();
        w.pod(static_cast<std::uint32_t>(acc.size()));
        for (const auto& [name, m] : acc) {
            w.bytes(name);
            w.pod(static_cast<std::uint32_t>(m.rows()));
            w.pod(static_cast<std::uint32_t>(m.cols()));
            os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
        }
    }
    if (!os) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path.string());
    Reader r(is, path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw DataError(path.string() + ": not a checkpoint (bad magic bytes)");
    const auto version = r.pod<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    const auto arch = r.bytes();

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(r.bytes());
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": corrupt checkpoint header: " + e.what());
    }

    ModelConfig config;
    CheckpointMeta meta;
    try {
        config = header.at("model").get<ModelConfig>();
        meta.train = header.at("train").get<TrainConfig>();
        meta.vocab_fingerprint = header.at("vocab_fingerprint").get<std::string>();
        meta.labels = header.at("labels").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path.string() + ": corrupt checkpoint header: " + e.what());
    } catch (const UsageError& e) {
        throw DataError(path.string() + ": " + e.what());
    }
    if (architecture_name(config.arch) != arch)
        throw DataError(path.string() + ": architecture id disagrees with the header");

    ad::ParameterSet params;
    const auto count = r.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name = r.bytes();
        const auto rows = r.pod<std::uint32_t>();
        const auto cols = r.pod<std::uint32_t>();
        Eigen::MatrixXf f(rows, cols);
        is.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
        if (!is) r.truncated();
        const bool weight = name.rfind("W_", 0) == 0;
        if (params.contains(name)) throw DataError(path.string() + ": duplicate parameter '" + name + "'");
        params.add(name, rows, cols, weight).value = f.cast<double>();
    }

    Checkpoint out{ModelInstance(config, std::move(params)), std::move(meta), std::nullopt};

    if (r.pod<std::uint8_t>()) {
        TrainState s;
        ad::RmsPropConfig oc;
        if (header.contains("optimizer")) {
            oc.learning_rate = header["optimizer"].value("learning_rate", oc.learning_rate);
            oc.decay = header["optimizer"].value("decay", oc.decay);
            oc.epsilon = header["optimizer"].value("epsilon", oc.epsilon);
        }
        s.optimizer = ad::RmsProp(oc);
        s.epoch = r.pod<std::uint64_t>();
        s.optimizer.set_steps(r.pod<std::uint64_t>());
        s.best_metric = r.pod<double>();
        s.best_epoch = r.pod<std::uint64_t>();
        s.stale_epochs = r.pod<std::uint64_t>();
        const auto n = r.pod<std::uint32_t>();
        for (std::uint32_t i = 0; i < n; ++i) {
            const auto name = r.bytes();
            const auto rows = r.pod<std::uint32_t>();
            const auto cols = r.pod<std::uint32_t>();
            Eigen::MatrixXd m(rows, cols);
            is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
            if (!is) r.truncated();
            s.optimizer.accumulators()[name] = std::move(m);
        }
        out.state = std::move(s);
    }
    if (is.peek() != std::char_traits<char>::eof())
        throw DataError(path.string() + ": trailing bytes after checkpoint payload");
    return out;
}

}  // namespace tagnet
