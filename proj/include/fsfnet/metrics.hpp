#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"

#include "fsfnet/tensor.hpp"

namespace fsfnet {

// Square count table over class labels: rows index ground truth, columns
// index predictions. Pixels whose ground truth carries kIgnoreLabel are
// never counted.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes);

  int num_classes() const { return k_; }
  std::int64_t at(int gt, int pred) const;
  // Number of scored (non-ignored) pixels accumulated so far.
  std::int64_t total() const;

  // Scores one prediction map against its ground truth. Extents must match;
  // predictions must lie in [0, K); ground truth must lie in [0, K) or be
  // the ignore label.
  void accumulate(const LabelMap& pred, const LabelMap& gt);

  // Elementwise addition of another matrix over the same classes.
  // Associative and commutative, so per-worker matrices can be combined
  // in any order.
  void merge(const ConfusionMatrix& other);

  bool operator==(const ConfusionMatrix& other) const {
    return k_ == other.k_ && counts_ == other.counts_;
  }

 private:
  int k_;
  std::vector<std::int64_t> counts_;  // row-major K*K
};

// Fraction of scored pixels predicted correctly: trace / total.
// Rejects an empty matrix.
double pixel_accuracy(const ConfusionMatrix& cm);

// Intersection-over-union per class: counts[c,c] / (row_c + col_c -
// counts[c,c]). Classes absent from both prediction and ground truth
// (denominator zero) get a quiet NaN.
std::vector<double> per_class_iou(const ConfusionMatrix& cm);

// Mean of per-class IoU over classes whose denominator is positive.
// Rejects a matrix in which every class is absent.
double mean_iou(const ConfusionMatrix& cm);

// Assembles the evaluation report: per-class IoU (absent classes serialize
// as null), mean IoU, pixel accuracy, and pixel totals.
nlohmann::json metrics_report(const ConfusionMatrix& cm);

}  // namespace fsfnet
