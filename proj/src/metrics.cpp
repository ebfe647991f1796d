#include "tagnet/metrics.hpp"

#include "tagnet/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace tagnet {

ScoreMatrix::ScoreMatrix(ScoreRows s, TruthMatrix t) : scores(std::move(s)), truth(std::move(t)) {
    if (scores.rows() != truth.rows() || scores.cols() != truth.cols())
        throw UsageError("score and truth matrices differ in shape");
    if (!scores.allFinite()) throw UsageError("score matrix contains non-finite values");
}

ScoreMatrix ScoreMatrix::transposed() const {
    ScoreMatrix t;
    t.scores = scores.transpose();
    t.truth = truth.transpose();
    return t;
}

namespace {

// Descending score, ties by ascending index.
std::vector<std::size_t> ranking(std::span<const double> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

double percent(double num, double den) { return den > 0.0 ? 100.0 * num / den : 0.0; }

// Shared by precision_recall_at_k and upper_bound: per-image assigned label sets.
PrecisionRecall score_assignment(const TruthMatrix& truth,
                                 const std::vector<std::vector<std::size_t>>& assigned) {
    const auto n = static_cast<std::size_t>(truth.rows());
    const auto labels = static_cast<std::size_t>(truth.cols());
    std::vector<double> tp(labels, 0.0), assigned_count(labels, 0.0), positives(labels, 0.0);
    double prec_sum = 0.0, rec_sum = 0.0;
    std::size_t rec_images = 0;
    PrecisionRecall out;

    for (std::size_t i = 0; i < n; ++i) {
        std::size_t pos = 0;
        for (std::size_t l = 0; l < labels; ++l)
            if (truth(i, l)) {
                ++pos;
                positives[l] += 1.0;
            }
        std::size_t hits = 0;
        for (auto l : assigned[i]) {
            assigned_count[l] += 1.0;
            if (truth(i, l)) {
                ++hits;
                tp[l] += 1.0;
            }
        }
        if (!assigned[i].empty())
            prec_sum += static_cast<double>(hits) / static_cast<double>(assigned[i].size());
        if (pos > 0) {
            rec_sum += static_cast<double>(hits) / static_cast<double>(pos);
            ++rec_images;
        } else {
            ++out.images_skipped;
        }
    }
    out.prec_img = percent(prec_sum, static_cast<double>(n));
    out.rec_img = percent(rec_sum, static_cast<double>(rec_images));

    double lab_rec = 0.0, lab_prec = 0.0;
    std::size_t scored = 0;
    for (std::size_t l = 0; l < labels; ++l) {
        if (positives[l] == 0.0) {
            ++out.labels_skipped;
            continue;
        }
        ++scored;
        lab_rec += tp[l] / positives[l];
        if (assigned_count[l] > 0.0) lab_prec += tp[l] / assigned_count[l];
    }
    out.rec_lab = percent(lab_rec, static_cast<double>(scored));
    out.prec_lab = percent(lab_prec, static_cast<double>(scored));
    return out;
}

}  // namespace

std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> relevant) {
    if (scores.size() != relevant.size()) throw UsageError("scores and relevance differ in length");
    const auto order = ranking(scores);
    double hits = 0.0, sum = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
        if (!relevant[order[r]]) continue;
        hits += 1.0;
        sum += hits / static_cast<double>(r + 1);
    }
    if (hits == 0.0) return std::nullopt;
    return sum / hits;
}

MeanAp map_image(const ScoreMatrix& s) {
    MeanAp out;
    double sum = 0.0;
    const auto labels = static_cast<std::size_t>(s.labels());
    for (Eigen::Index i = 0; i < s.images(); ++i) {
        const auto ap = average_precision({s.scores.row(i).data(), labels},
                                          {s.truth.row(i).data(), labels});
        if (!ap) {
            ++out.skipped;
            continue;
        }
        sum += *ap;
        ++out.scored;
    }
    out.value = percent(sum, static_cast<double>(out.scored));
    return out;
}

MeanAp map_label(const ScoreMatrix& s) { return map_image(s.transposed()); }

PrecisionRecall precision_recall_at_k(const ScoreMatrix& s, std::size_t k) {
    if (k == 0) throw UsageError("k must be at least 1");
    const auto labels = static_cast<std::size_t>(s.labels());
    std::vector<std::vector<std::size_t>> assigned(static_cast<std::size_t>(s.images()));
    for (Eigen::Index i = 0; i < s.images(); ++i) {
        auto order = ranking({s.scores.row(i).data(), labels});
        order.resize(std::min(k, labels));
        assigned[static_cast<std::size_t>(i)] = std::move(order);
    }
    return score_assignment(s.truth, assigned);
}

PrecisionRecall upper_bound(const TruthMatrix& truth, std::size_t k) {
    if (k == 0) throw UsageError("k must be at least 1");
    ScoreRows oracle = truth.cast<double>();
    return precision_recall_at_k(ScoreMatrix(std::move(oracle), truth), k);
}

EvalReport evaluate(const ScoreMatrix& s, std::size_t k) {
    EvalReport r;
    r.k = k;
    r.images = static_cast<std::size_t>(s.images());
    r.labels = static_cast<std::size_t>(s.labels());
    const auto lab = map_label(s);
    const auto img = map_image(s);
    r.map_lab = lab.value;
    r.map_img = img.value;
    const auto pr = precision_recall_at_k(s, k);
    r.rec_lab = pr.rec_lab;
    r.prec_lab = pr.prec_lab;
    r.rec_img = pr.rec_img;
    r.prec_img = pr.prec_img;
    r.labels_skipped = lab.skipped;
    r.images_skipped = img.skipped;
    r.bound = upper_bound(s.truth, k);
    return r;
}

std::array<double, 6> metric_values(const EvalReport& r) {
    return {r.map_lab, r.map_img, r.rec_lab, r.prec_lab, r.rec_img, r.prec_img};
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

void to_json(nlohmann::json& j, const EvalReport& r) {
    j = nlohmann::json::object();
    const auto values = metric_values(r);
    for (std::size_t i = 0; i < kMetricColumns.size(); ++i)
        j[std::string(kMetricColumns[i])] = round2(values[i]);
    j["upper_bound"] = {{"rec_lab", round2(r.bound.rec_lab)},
                        {"prec_lab", round2(r.bound.prec_lab)},
                        {"rec_img", round2(r.bound.rec_img)},
                        {"prec_img", round2(r.bound.prec_img)}};
    j["k"] = r.k;
    j["images"] = r.images;
    j["labels"] = r.labels;
    j["labels_skipped"] = r.labels_skipped;
    j["images_skipped"] = r.images_skipped;
}

namespace {

std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", round2(v));
    return buf;
}

// Code points, so "±" counts once.
std::size_t display_width(const std::string& s) {
    return static_cast<std::size_t>(
        std::count_if(s.begin(), s.end(), [](char c) { return (static_cast<unsigned char>(c) & 0xC0) != 0x80; }));
}

void write_aligned(std::ostream& os, const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width(rows.front().size(), 0);
    for (const auto& row : rows)
        for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], display_width(row[c]));
    for (const auto& row : rows) {
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (c == 0) {
                os << row[c] << std::string(width[c] - display_width(row[c]), ' ');
            } else {
                os << "  " << std::string(width[c] - display_width(row[c]), ' ') << row[c];
            }
        }
        os << '\n';
    }
}

std::vector<std::string> header_row() {
    std::vector<std::string> h{"model"};
    for (auto c : kMetricColumns) h.emplace_back(c);
    return h;
}

}  // namespace

void write_table(std::ostream& os, std::span<const std::pair<std::string, EvalReport>> rows) {
    std::vector<std::vector<std::string>> cells{header_row()};
    for (const auto& [name, r] : rows) {
        std::vector<std::string> row{name};
        for (double v : metric_values(r)) row.push_back(fixed2(v));
        cells.push_back(std::move(row));
    }
    if (!rows.empty()) {
        const auto& b = rows.front().second.bound;
        cells.push_back({"Upper bound", "-", "-", fixed2(b.rec_lab), fixed2(b.prec_lab),
                         fixed2(b.rec_img), fixed2(b.prec_img)});
    }
    write_aligned(os, cells);
}

void write_csv(std::ostream& os, std::span<const std::pair<std::string, EvalReport>> rows) {
    os << "model";
    for (auto c : kMetricColumns) os << ',' << c;
    os << ",ub_rec_lab,ub_prec_lab,ub_rec_img,ub_prec_img,labels_skipped,images_skipped\n";
    for (const auto& [name, r] : rows) {
        os << name;
        for (double v : metric_values(r)) os << ',' << fixed2(v);
        os << ',' << fixed2(r.bound.rec_lab) << ',' << fixed2(r.bound.prec_lab) << ','
           << fixed2(r.bound.rec_img) << ',' << fixed2(r.bound.prec_img) << ',' << r.labels_skipped
           << ',' << r.images_skipped << '\n';
    }
}

namespace {

MetricStats stats(const std::vector<double>& xs) {
    MetricStats s;
    if (xs.empty()) return s;
    s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    if (xs.size() < 2) return s;
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    return s;
}

}  // namespace

AggregateReport aggregate(std::span<const EvalReport> runs) {
    AggregateReport out;
    out.runs = runs.size();
    for (std::size_t c = 0; c < 6; ++c) {
        std::vector<double> xs;
        for (const auto& r : runs) xs.push_back(metric_values(r)[c]);
        out.metrics[c] = stats(xs);
    }
    for (std::size_t c = 0; c < 4; ++c) {
        std::vector<double> xs;
        for (const auto& r : runs) {
            const auto& b = r.bound;
            const double v[] = {b.rec_lab, b.prec_lab, b.rec_img, b.prec_img};
            xs.push_back(v[c]);
        }
        out.bounds[c] = stats(xs);
    }
    return out;
}

void to_json(nlohmann::json& j, const AggregateReport& r) {
    j = nlohmann::json::object();
    j["runs"] = r.runs;
    for (std::size_t c = 0; c < 6; ++c)
        j[std::string(kMetricColumns[c])] = {{"mean", round2(r.metrics[c].mean)},
                                             {"std", round2(r.metrics[c].std)}};
    static constexpr const char* kBounds[] = {"rec_lab", "prec_lab", "rec_img", "prec_img"};
    for (std::size_t c = 0; c < 4; ++c)
        j["upper_bound"][kBounds[c]] = {{"mean", round2(r.bounds[c].mean)},
                                        {"std", round2(r.bounds[c].std)}};
}

void write_table(std::ostream& os, std::span<const std::pair<std::string, AggregateReport>> rows) {
    std::vector<std::vector<std::string>> cells{header_row()};
    auto pm = [](const MetricStats& s) { return fixed2(s.mean) + " ± " + fixed2(s.std); };
    for (const auto& [name, r] : rows) {
        std::vector<std::string> row{name};
        for (const auto& s : r.metrics) row.push_back(pm(s));
        cells.push_back(std::move(row));
    }
    if (!rows.empty()) {
        const auto& b = rows.front().second.bounds;
        cells.push_back({"Upper bound", "-", "-", pm(b[0]), pm(b[1]), pm(b[2]), pm(b[3])});
    }
    write_aligned(os, cells);
}

}  // namespace tagnet
