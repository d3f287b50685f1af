#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fsfnet/data.hpp"
#include "fsfnet/metrics.hpp"
#include "fsfnet/model.hpp"

namespace fsfnet {

struct TrainConfig {
  double lr_init = 0.02;
  double lr_power = 0.9;          // poly exponent, or per-epoch decay factor
  std::string lr_schedule = "poly";  // "poly" | "epoch"
  int epoch_length = 0;           // steps per epoch; 0 lets train() derive it
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 4;
  int max_steps = 100;
  std::array<double, 3> lambda = {1.0, 1.0, 1.0};
  int crop_size = 0;              // 0 trains on whole images
  std::uint64_t seed = 1;
  bool use_flip = true;
  int checkpoint_every = 0;       // 0 saves only the final state
  int eval_every = 0;             // 0 validates only after the last step

  void validate() const;
};

// Polynomial decay: lr_init * (1 - step/max_steps)^lr_power. Monotone
// non-increasing, lr_init at step 0, exactly 0 at max_steps. Steps outside
// [0, max_steps] are rejected.
double poly_lr(int step, int max_steps, const TrainConfig& cfg);

// Learning rate at a step under cfg.lr_schedule: "poly" delegates to
// poly_lr over cfg.max_steps; "epoch" multiplies lr_init by
// lr_power^(step / epoch_length), requiring epoch_length >= 1.
double learning_rate(const TrainConfig& cfg, int step);

// Momentum buffers and progress counters owned by one optimization loop.
template <typename T>
struct TrainState {
  std::map<std::string, Tensor<T>> velocity;  // mirrors parameter shapes
  int step = 0;
  double best_val_miou = std::numeric_limits<double>::quiet_NaN();
};

// Zero-filled momentum buffers matching every parameter of the model.
template <typename T>
TrainState<T> init_train_state(const FsfNet<T>& model);

// Classic coupled SGD with momentum: for each parameter,
//   v <- momentum * v + g + weight_decay * p;  p <- p - lr * v.
// A parameter left without a gradient by the last backward pass counts as
// zero gradient. All gradients are checked finite before any parameter is
// touched; a non-finite gradient aborts with the parameter's path.
template <typename T>
void sgd_step(FsfNet<T>& model, TrainState<T>& state, T lr,
              const TrainConfig& cfg);

template <typename T>
struct PyramidLoss {
  Value<T> total;               // scalar node; feed to backward()
  std::array<double, 3> terms;  // per-resolution cross-entropy values
};

// Deep-supervision objective: term i is the weighted cross-entropy of
// side_logits[i] against the labels nearest-neighbor-downsampled to its
// resolution, and the total is sum_i lambda[i] * term_i. The finest side
// output doubles as the main prediction head, so exactly three terms are
// supervised.
template <typename T>
PyramidLoss<T> pyramid_loss(const ForwardOutput<T>& out, const LabelMap& labels,
                            std::span<const T> class_weights,
                            const std::array<double, 3>& lambda);

// Median-frequency balancing over the dataset's non-ignored pixels:
// weight_c = median(present frequencies) / freq_c, and 0 for classes that
// never occur. Rejects an empty dataset or labels outside [0, num_classes).
std::vector<double> compute_class_weights(
    const std::vector<RgbdSample>& samples, int num_classes);

struct SplitIndices {
  std::vector<int> train;
  std::vector<int> val;
};

// Deterministic index split: the ceil(val_fraction * count) indices with the
// smallest seed-derived hashes form the validation side. Both halves come
// back in ascending index order.
SplitIndices split_dataset(int count, double val_fraction, std::uint64_t seed);

struct HistoryRow {
  int step = 0;  // 1-based: the row describes the state after this step
  double lr = 0.0;
  double total_loss = 0.0;
  double l1 = 0.0, l2 = 0.0, l3 = 0.0;
};

void write_history_csv(const std::string& path,
                       const std::vector<HistoryRow>& history);
std::vector<HistoryRow> read_history_csv(const std::string& path);

struct TrainResult {
  std::vector<HistoryRow> history;
  std::string last_checkpoint;  // always written
  std::string best_checkpoint;  // empty when no validation ever ran
  double best_val_miou = std::numeric_limits<double>::quiet_NaN();
  int steps_completed = 0;
  bool halted = false;          // stopped early on a non-finite loss/gradient
  std::string halt_reason;
};

// Seeded end-to-end optimization: sample batch -> crop/flip -> forward ->
// pyramid loss -> backward -> SGD with the configured schedule. Writes
// history.csv plus last.ckpt (and best.ckpt once validation has run) into
// out_dir. A non-finite loss or gradient stops the loop, keeps the last
// good parameters, and reports the reason instead of throwing. on_step,
// when given, observes each appended history row (progress reporting only —
// it cannot influence the run).
TrainResult train(FsfNet<float>& model, TrainConfig cfg,
                  const std::vector<RgbdSample>& train_set,
                  const std::vector<RgbdSample>& val_set,
                  const std::string& out_dir,
                  const std::function<void(const HistoryRow&)>& on_step = {});

// Full-resolution argmax predictions for every sample accumulated into one
// confusion matrix. Rejects an empty dataset.
ConfusionMatrix evaluate(FsfNet<float>& model,
                         const std::vector<RgbdSample>& samples);

struct MeanStd {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation (n - 1)
};

MeanStd mean_and_sample_std(const std::vector<double>& xs);

struct AblationRow {
  std::string name;
  bool use_scrf = false;
  bool use_dfp = false;
  std::vector<double> per_seed_miou;  // test-set mIoU of the final state
  MeanStd miou;
};

// Trains the four fusion variants — SUM, +DFP, +SCRF, +SCRF+DFP, in that
// row order — once per seed on the shared train split and evaluates each
// final model on the shared test split. Seed k uses base_train.seed + k for
// both parameter init and the data order, so rows are comparable pairwise
// per seed. Requires at least 3 seeds. Per-run artifacts land under
// out_dir/<variant>/seed<k>/. log, when given, receives one progress line
// per completed run.
std::vector<AblationRow> ablate(
    const ModelConfig& base_model, const TrainConfig& base_train,
    const std::vector<RgbdSample>& train_set,
    const std::vector<RgbdSample>& test_set, int num_seeds,
    const std::string& out_dir,
    const std::function<void(const std::string&)>& log = {});

}  // namespace fsfnet
