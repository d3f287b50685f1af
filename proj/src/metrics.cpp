#include "fsfnet/metrics.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace fsfnet {

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
  if (num_classes < 1) {
    fail("ConfusionMatrix: num_classes must be >= 1, got " +
         std::to_string(num_classes));
  }
  counts_.assign(static_cast<std::size_t>(k_) * k_, 0);
}

std::int64_t ConfusionMatrix::at(int gt, int pred) const {
  if (gt < 0 || gt >= k_ || pred < 0 || pred >= k_) {
    fail("ConfusionMatrix::at: index (" + std::to_string(gt) + ", " +
         std::to_string(pred) + ") outside " + std::to_string(k_) + "x" +
         std::to_string(k_));
  }
  return counts_[static_cast<std::size_t>(gt) * k_ + pred];
}

std::int64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::int64_t{0});
}

void ConfusionMatrix::accumulate(const LabelMap& pred, const LabelMap& gt) {
  if (pred.n != gt.n || pred.h != gt.h || pred.w != gt.w) {
    fail("ConfusionMatrix::accumulate: prediction extents " +
         std::to_string(pred.n) + "x" + std::to_string(pred.h) + "x" +
         std::to_string(pred.w) + " disagree with ground truth " +
         std::to_string(gt.n) + "x" + std::to_string(gt.h) + "x" +
         std::to_string(gt.w));
  }
  for (int i = 0; i < gt.numel(); ++i) {
    const std::int32_t g = gt.labels[static_cast<std::size_t>(i)];
    if (g == kIgnoreLabel) continue;
    if (g < 0 || g >= k_) {
      fail("ConfusionMatrix::accumulate: ground-truth label " +
           std::to_string(g) + " outside [0, " + std::to_string(k_) +
           ") and not the ignore label");
    }
    const std::int32_t p = pred.labels[static_cast<std::size_t>(i)];
    if (p < 0 || p >= k_) {
      fail("ConfusionMatrix::accumulate: prediction " + std::to_string(p) +
           " outside [0, " + std::to_string(k_) + ")");
    }
    ++counts_[static_cast<std::size_t>(g) * k_ + p];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) {
    fail("ConfusionMatrix::merge: cannot merge " + std::to_string(other.k_) +
         "-class counts into " + std::to_string(k_) + "-class matrix");
  }
  for (std::size_t i = 0; i < counts_.size(); ++i) {
    counts_[i] += other.counts_[i];
  }
}

double pixel_accuracy(const ConfusionMatrix& cm) {
  const std::int64_t total = cm.total();
  if (total == 0) {
    fail("pixel_accuracy: empty confusion matrix (no scored pixels)");
  }
  std::int64_t trace = 0;
  for (int c = 0; c < cm.num_classes(); ++c) trace += cm.at(c, c);
  return static_cast<double>(trace) / static_cast<double>(total);
}

std::vector<double> per_class_iou(const ConfusionMatrix& cm) {
  const int k = cm.num_classes();
  std::vector<double> iou(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    std::int64_t row = 0;
    std::int64_t col = 0;
    for (int j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::int64_t denom = row + col - cm.at(c, c);
    iou[static_cast<std::size_t>(c)] =
        denom > 0 ? static_cast<double>(cm.at(c, c)) / static_cast<double>(denom)
                  : std::numeric_limits<double>::quiet_NaN();
  }
  return iou;
}

double mean_iou(const ConfusionMatrix& cm) {
  const std::vector<double> iou = per_class_iou(cm);
  double sum = 0.0;
  int present = 0;
  for (const double v : iou) {
    if (!std::isnan(v)) {
      sum += v;
      ++present;
    }
  }
  if (present == 0) {
    fail("mean_iou: every class is absent from the confusion matrix");
  }
  return sum / present;
}

nlohmann::json metrics_report(const ConfusionMatrix& cm) {
  nlohmann::json report;
  report["num_classes"] = cm.num_classes();
  report["pixel_total"] = cm.total();
  report["pixel_accuracy"] = pixel_accuracy(cm);
  report["mean_iou"] = mean_iou(cm);
  nlohmann::json per_class = nlohmann::json::array();
  for (const double v : per_class_iou(cm)) {
    if (std::isnan(v)) {
      per_class.push_back(nullptr);
    } else {
      per_class.push_back(v);
    }
  }
  report["per_class_iou"] = per_class;
  return report;
}

}  // namespace fsfnet
