#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "fsfnet/metrics.hpp"
#include "fsfnet/rng.hpp"

using namespace fsfnet;

namespace {

LabelMap map_from(std::initializer_list<std::int32_t> values, int h, int w) {
  LabelMap m(1, h, w);
  int i = 0;
  for (const std::int32_t v : values) m.labels[static_cast<std::size_t>(i++)] = v;
  REQUIRE(i == m.numel());
  return m;
}

// Fills a matrix directly through accumulate using 1×1 maps, one scored
// pixel per call.
ConfusionMatrix matrix_from_counts(
    const std::vector<std::vector<std::int64_t>>& counts) {
  ConfusionMatrix cm(static_cast<int>(counts.size()));
  for (std::size_t g = 0; g < counts.size(); ++g) {
    for (std::size_t p = 0; p < counts.size(); ++p) {
      for (std::int64_t i = 0; i < counts[g][p]; ++i) {
        LabelMap gt(1, 1, 1);
        LabelMap pred(1, 1, 1);
        gt.at(0, 0, 0) = static_cast<std::int32_t>(g);
        pred.at(0, 0, 0) = static_cast<std::int32_t>(p);
        cm.accumulate(pred, gt);
      }
    }
  }
  return cm;
}

LabelMap random_map(int k, std::uint64_t seed, bool with_ignore) {
  Rng rng(seed);
  LabelMap m(1, 16, 16);
  for (int i = 0; i < m.numel(); ++i) {
    if (with_ignore && rng.uniform() < 0.1) {
      m.labels[static_cast<std::size_t>(i)] = kIgnoreLabel;
    } else {
      m.labels[static_cast<std::size_t>(i)] =
          static_cast<std::int32_t>(rng.uniform_int(0, k - 1));
    }
  }
  return m;
}

}  // namespace

TEST_CASE("construction rejects non-positive class counts") {
  CHECK_NOTHROW(ConfusionMatrix(1));
  CHECK_THROWS_AS(ConfusionMatrix(0), std::invalid_argument);
  CHECK_THROWS_AS(ConfusionMatrix(-3), std::invalid_argument);
  ConfusionMatrix cm(3);
  CHECK(cm.num_classes() == 3);
  CHECK(cm.total() == 0);
  CHECK_THROWS_AS(cm.at(3, 0), std::invalid_argument);
  CHECK_THROWS_AS(cm.at(0, -1), std::invalid_argument);
}

TEST_CASE("accumulation counts each scored pixel at (gt, pred)") {
  // gt [[0,0],[1,1]], pred [[0,1],[1,1]] -> counts [[1,1],[0,2]].
  ConfusionMatrix cm(2);
  cm.accumulate(map_from({0, 1, 1, 1}, 2, 2), map_from({0, 0, 1, 1}, 2, 2));
  CHECK(cm.at(0, 0) == 1);
  CHECK(cm.at(0, 1) == 1);
  CHECK(cm.at(1, 0) == 0);
  CHECK(cm.at(1, 1) == 2);
  CHECK(cm.total() == 4);
}

TEST_CASE("ignored ground truth leaves the matrix unchanged") {
  ConfusionMatrix cm(3);
  cm.accumulate(map_from({0, 1, 2, 0}, 2, 2),
                map_from({kIgnoreLabel, kIgnoreLabel, kIgnoreLabel,
                          kIgnoreLabel},
                         2, 2));
  CHECK(cm.total() == 0);

  // A perfect prediction adds only to the diagonal.
  cm.accumulate(map_from({0, 1, 2, 2}, 2, 2), map_from({0, 1, 2, 2}, 2, 2));
  CHECK(cm.total() == 4);
  CHECK(cm.at(0, 0) == 1);
  CHECK(cm.at(1, 1) == 1);
  CHECK(cm.at(2, 2) == 2);
  CHECK(cm.at(0, 1) + cm.at(0, 2) + cm.at(1, 0) + cm.at(1, 2) + cm.at(2, 0) +
            cm.at(2, 1) ==
        0);
}

TEST_CASE("accumulation rejects bad labels and mismatched extents") {
  ConfusionMatrix cm(2);
  CHECK_THROWS_WITH_AS(
      cm.accumulate(map_from({2, 0, 0, 0}, 2, 2), map_from({0, 0, 0, 0}, 2, 2)),
      doctest::Contains("prediction"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      cm.accumulate(map_from({-1, 0, 0, 0}, 2, 2),
                    map_from({0, 0, 0, 0}, 2, 2)),
      doctest::Contains("prediction"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      cm.accumulate(map_from({0, 0, 0, 0}, 2, 2), map_from({2, 0, 0, 0}, 2, 2)),
      doctest::Contains("ground-truth"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(
      cm.accumulate(map_from({0, 0}, 1, 2), map_from({0, 0, 0, 0}, 2, 2)),
      doctest::Contains("disagree"), std::invalid_argument);
  // An ignored pixel's prediction is never inspected, so an out-of-range
  // prediction there is fine.
  CHECK_NOTHROW(cm.accumulate(map_from({7, 1}, 1, 2),
                              map_from({kIgnoreLabel, 1}, 1, 2)));
  CHECK(cm.total() == 1);
}

TEST_CASE("pixel accuracy is trace over total") {
  CHECK(pixel_accuracy(matrix_from_counts({{3, 0}, {0, 5}})) == 1.0);
  CHECK(pixel_accuracy(matrix_from_counts({{0, 2}, {4, 0}})) == 0.0);
  CHECK(pixel_accuracy(matrix_from_counts({{3, 1}, {1, 3}})) == 0.75);
  CHECK_THROWS_WITH_AS(pixel_accuracy(ConfusionMatrix(4)),
                       doctest::Contains("empty"), std::invalid_argument);
}

TEST_CASE("mean IoU averages present classes only") {
  CHECK(mean_iou(matrix_from_counts({{3, 0}, {0, 5}})) == 1.0);
  CHECK(mean_iou(matrix_from_counts({{3, 1}, {1, 3}})) == doctest::Approx(0.6).epsilon(1e-12));

  // Padding with a class absent from both sides leaves the mean unchanged.
  const double padded =
      mean_iou(matrix_from_counts({{3, 1, 0}, {1, 3, 0}, {0, 0, 0}}));
  CHECK(padded == doctest::Approx(0.6).epsilon(1e-12));

  const auto iou = per_class_iou(matrix_from_counts({{3, 1, 0}, {1, 3, 0}, {0, 0, 0}}));
  REQUIRE(iou.size() == 3);
  CHECK(iou[0] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(iou[1] == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(std::isnan(iou[2]));

  CHECK_THROWS_WITH_AS(mean_iou(ConfusionMatrix(3)), doctest::Contains("absent"),
                       std::invalid_argument);
}

TEST_CASE("a class present only in predictions still counts as present") {
  // gt never contains class 1, but predictions do: IoU_1 = 0/denom = 0.
  const ConfusionMatrix cm = matrix_from_counts({{2, 2}, {0, 0}});
  const auto iou = per_class_iou(cm);
  CHECK(iou[0] == 0.5);
  CHECK(iou[1] == 0.0);
  CHECK(mean_iou(cm) == 0.25);
}

TEST_CASE("accumulation order does not change the matrix") {
  const int k = 5;
  std::vector<LabelMap> preds;
  std::vector<LabelMap> gts;
  for (int i = 0; i < 6; ++i) {
    preds.push_back(random_map(k, 100 + i, false));
    gts.push_back(random_map(k, 200 + i, true));
  }
  ConfusionMatrix forward(k);
  ConfusionMatrix backward(k);
  for (int i = 0; i < 6; ++i) forward.accumulate(preds[i], gts[i]);
  for (int i = 5; i >= 0; --i) backward.accumulate(preds[i], gts[i]);
  CHECK(forward == backward);
}

TEST_CASE("metrics are invariant under consistent relabeling") {
  const int k = 4;
  const LabelMap pred = random_map(k, 31, false);
  const LabelMap gt = random_map(k, 32, true);
  ConfusionMatrix cm(k);
  cm.accumulate(pred, gt);

  const int perm[4] = {2, 0, 3, 1};
  LabelMap pred_p = pred;
  LabelMap gt_p = gt;
  for (int i = 0; i < pred.numel(); ++i) {
    pred_p.labels[static_cast<std::size_t>(i)] =
        perm[pred.labels[static_cast<std::size_t>(i)]];
    if (gt.labels[static_cast<std::size_t>(i)] != kIgnoreLabel) {
      gt_p.labels[static_cast<std::size_t>(i)] =
          perm[gt.labels[static_cast<std::size_t>(i)]];
    }
  }
  ConfusionMatrix cm_p(k);
  cm_p.accumulate(pred_p, gt_p);

  CHECK(pixel_accuracy(cm_p) == pixel_accuracy(cm));
  CHECK(mean_iou(cm_p) == doctest::Approx(mean_iou(cm)).epsilon(1e-12));
  for (int g = 0; g < k; ++g) {
    for (int p = 0; p < k; ++p) {
      CHECK(cm_p.at(perm[g], perm[p]) == cm.at(g, p));
    }
  }
}

TEST_CASE("merging worker matrices equals accumulating everything at once") {
  const int k = 3;
  ConfusionMatrix whole(k);
  ConfusionMatrix part_a(k);
  ConfusionMatrix part_b(k);
  for (int i = 0; i < 8; ++i) {
    const LabelMap pred = random_map(k, 300 + i, false);
    const LabelMap gt = random_map(k, 400 + i, true);
    whole.accumulate(pred, gt);
    (i % 2 == 0 ? part_a : part_b).accumulate(pred, gt);
  }
  ConfusionMatrix ab = part_a;
  ab.merge(part_b);
  ConfusionMatrix ba = part_b;
  ba.merge(part_a);
  CHECK(ab == whole);
  CHECK(ba == whole);

  ConfusionMatrix wrong(k + 1);
  CHECK_THROWS_WITH_AS(wrong.merge(part_a), doctest::Contains("merge"),
                       std::invalid_argument);
}

TEST_CASE("metrics agree with a brute-force per-pixel recount") {
  const int k = 6;
  for (int trial = 0; trial < 20; ++trial) {
    const LabelMap pred = random_map(k, 1000 + 2 * trial, false);
    const LabelMap gt = random_map(k, 1001 + 2 * trial, true);
    ConfusionMatrix cm(k);
    cm.accumulate(pred, gt);

    std::int64_t brute[6][6] = {};
    for (int i = 0; i < gt.numel(); ++i) {
      const std::int32_t g = gt.labels[static_cast<std::size_t>(i)];
      if (g == kIgnoreLabel) continue;
      ++brute[g][pred.labels[static_cast<std::size_t>(i)]];
    }

    std::int64_t total = 0;
    std::int64_t trace = 0;
    for (int g = 0; g < k; ++g) {
      for (int p = 0; p < k; ++p) {
        REQUIRE(cm.at(g, p) == brute[g][p]);
        total += brute[g][p];
      }
      trace += brute[g][g];
    }
    REQUIRE(cm.total() == total);
    REQUIRE(total > 0);

    const double acc = static_cast<double>(trace) / static_cast<double>(total);
    REQUIRE(std::abs(pixel_accuracy(cm) - acc) <= 1e-12);

    double iou_sum = 0.0;
    int present = 0;
    for (int c = 0; c < k; ++c) {
      std::int64_t row = 0;
      std::int64_t col = 0;
      for (int j = 0; j < k; ++j) {
        row += brute[c][j];
        col += brute[j][c];
      }
      const std::int64_t denom = row + col - brute[c][c];
      if (denom > 0) {
        iou_sum += static_cast<double>(brute[c][c]) /
                   static_cast<double>(denom);
        ++present;
      }
    }
    REQUIRE(present > 0);
    REQUIRE(std::abs(mean_iou(cm) - iou_sum / present) <= 1e-12);

    REQUIRE(pixel_accuracy(cm) >= 0.0);
    REQUIRE(pixel_accuracy(cm) <= 1.0);
    REQUIRE(mean_iou(cm) >= 0.0);
    REQUIRE(mean_iou(cm) <= 1.0);
  }
}

TEST_CASE("the evaluation report serializes absent classes as null") {
  const ConfusionMatrix cm = matrix_from_counts({{3, 1, 0}, {1, 3, 0}, {0, 0, 0}});
  const nlohmann::json report = metrics_report(cm);
  CHECK(report["num_classes"] == 3);
  CHECK(report["pixel_total"] == 8);
  CHECK(report["pixel_accuracy"].get<double>() == 0.75);
  CHECK(report["mean_iou"].get<double>() == doctest::Approx(0.6).epsilon(1e-12));
  REQUIRE(report["per_class_iou"].size() == 3);
  CHECK(report["per_class_iou"][0].get<double>() ==
        doctest::Approx(0.6).epsilon(1e-12));
  CHECK(report["per_class_iou"][2].is_null());

  // The report must survive a dump/parse round trip (NaN would not).
  const nlohmann::json back = nlohmann::json::parse(report.dump());
  CHECK(back == report);
}
