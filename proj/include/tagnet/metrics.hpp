#pragma once

#include <nlohmann/json_fwd.hpp>

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tagnet {

using TruthMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ScoreRows = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// N images x L labels of scores with aligned ground truth.
struct ScoreMatrix {
    ScoreRows scores;
    TruthMatrix truth;

    ScoreMatrix() = default;
    /// Throws UsageError on mismatched shapes or non-finite scores.
    ScoreMatrix(ScoreRows scores, TruthMatrix truth);

    Eigen::Index images() const { return scores.rows(); }
    Eigen::Index labels() const { return scores.cols(); }
    ScoreMatrix transposed() const;
};

/// Non-interpolated AP in [0, 1]: items ranked by descending score, ties by ascending
/// index; mean of precision@r over the ranks r of relevant items. Empty when nothing
/// is relevant.
std::optional<double> average_precision(std::span<const double> scores,
                                        std::span<const std::uint8_t> relevant);

struct MeanAp {
    double value = 0.0;  // percent
    std::size_t scored = 0;
    std::size_t skipped = 0;  // rows/columns with no positives
};

/// Mean AP over labels (images ranked per label).
MeanAp map_label(const ScoreMatrix& s);
/// Mean AP over images (labels ranked per image).
MeanAp map_image(const ScoreMatrix& s);

struct PrecisionRecall {
    double rec_lab = 0.0;
    double prec_lab = 0.0;
    double rec_img = 0.0;
    double prec_img = 0.0;
    std::size_t labels_skipped = 0;  // no positives: excluded from the per-label means
    std::size_t images_skipped = 0;  // no positives: excluded from rec_img
};

/// Exactly the top-k labels of each image are assigned (ties by ascending label).
/// prec_img averages over all images, rec_img over images with a positive; per-label
/// figures average over labels with a positive, a never-assigned label has precision 0.
PrecisionRecall precision_recall_at_k(const ScoreMatrix& s, std::size_t k = 3);

/// Precision/recall of the best possible assignment of k labels per image: each image
/// gets min(k, |y|) of its true labels (lowest indices first) and fills the rest with
/// its lowest-index false labels.
PrecisionRecall upper_bound(const TruthMatrix& truth, std::size_t k = 3);

struct EvalReport {
    std::size_t k = 3;
    std::size_t images = 0;
    std::size_t labels = 0;
    double map_lab = 0.0;
    double map_img = 0.0;
    double rec_lab = 0.0;
    double prec_lab = 0.0;
    double rec_img = 0.0;
    double prec_img = 0.0;
    PrecisionRecall bound;
    std::size_t labels_skipped = 0;
    std::size_t images_skipped = 0;
};

EvalReport evaluate(const ScoreMatrix& s, std::size_t k = 3);

/// Report column order.
inline constexpr std::array<std::string_view, 6> kMetricColumns = {
    "mAP_lab", "mAP_img", "rec_lab", "prec_lab", "rec_img", "prec_img"};

std::array<double, 6> metric_values(const EvalReport& r);

/// Rounds to two decimals, the precision every report uses.
double round2(double percent);

void to_json(nlohmann::json& j, const EvalReport& r);

/// Aligned table: one row per named report plus an "Upper bound" row taken from the
/// first report.
void write_table(std::ostream& os, std::span<const std::pair<std::string, EvalReport>> rows);
void write_csv(std::ostream& os, std::span<const std::pair<std::string, EvalReport>> rows);

struct MetricStats {
    double mean = 0.0;
    double std = 0.0;  // sample standard deviation; 0 for a single run
};

struct AggregateReport {
    std::size_t runs = 0;
    std::array<MetricStats, 6> metrics;  // kMetricColumns order
    std::array<MetricStats, 4> bounds;   // rec_lab, prec_lab, rec_img, prec_img
};

AggregateReport aggregate(std::span<const EvalReport> runs);
void to_json(nlohmann::json& j, const AggregateReport& r);
/// Table rows formatted as "mean ± std".
void write_table(std::ostream& os, std::span<const std::pair<std::string, AggregateReport>> rows);

}  // namespace tagnet
