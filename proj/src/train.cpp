#include "fsfnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fsfnet/checkpoint.hpp"
#include "fsfnet/rng.hpp"

namespace fsfnet {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(lr_init > 0.0)) {
    fail("TrainConfig: lr_init must be > 0, got " + std::to_string(lr_init));
  }
  if (!(lr_power > 0.0)) {
    fail("TrainConfig: lr_power must be > 0, got " + std::to_string(lr_power));
  }
  if (lr_schedule != "poly" && lr_schedule != "epoch") {
    fail("TrainConfig: lr_schedule must be \"poly\" or \"epoch\", got \"" +
         lr_schedule + "\"");
  }
  if (lr_schedule == "epoch" && lr_power > 1.0) {
    fail("TrainConfig: the epoch schedule multiplies by lr_power each epoch, "
         "so lr_power must be <= 1");
  }
  if (epoch_length < 0) {
    fail("TrainConfig: epoch_length must be >= 0");
  }
  if (momentum < 0.0 || momentum >= 1.0) {
    fail("TrainConfig: momentum must lie in [0, 1), got " +
         std::to_string(momentum));
  }
  if (weight_decay < 0.0) {
    fail("TrainConfig: weight_decay must be >= 0");
  }
  if (batch_size < 1) {
    fail("TrainConfig: batch_size must be >= 1");
  }
  if (max_steps < 1) {
    fail("TrainConfig: max_steps must be >= 1");
  }
  for (const double l : lambda) {
    if (l < 0.0 || !std::isfinite(l)) {
      fail("TrainConfig: lambda elements must be finite and >= 0");
    }
  }
  if (crop_size != 0 && (crop_size < 16 || crop_size % 16 != 0)) {
    fail("TrainConfig: crop_size must be 0 (whole images) or a positive "
         "multiple of 16, got " +
         std::to_string(crop_size));
  }
  if (checkpoint_every < 0 || eval_every < 0) {
    fail("TrainConfig: checkpoint_every and eval_every must be >= 0");
  }
}

double poly_lr(int step, int max_steps, const TrainConfig& cfg) {
  if (max_steps < 1) {
    fail("poly_lr: max_steps must be >= 1");
  }
  if (step < 0 || step > max_steps) {
    fail("poly_lr: step " + std::to_string(step) + " outside [0, " +
         std::to_string(max_steps) + "]");
  }
  const double remaining =
      1.0 - static_cast<double>(step) / static_cast<double>(max_steps);
  return cfg.lr_init * std::pow(remaining, cfg.lr_power);
}

double learning_rate(const TrainConfig& cfg, int step) {
  if (cfg.lr_schedule == "poly") {
    return poly_lr(step, cfg.max_steps, cfg);
  }
  if (cfg.lr_schedule == "epoch") {
    if (cfg.epoch_length < 1) {
      fail("learning_rate: the epoch schedule needs epoch_length >= 1");
    }
    if (step < 0) fail("learning_rate: step must be >= 0");
    return cfg.lr_init *
           std::pow(cfg.lr_power, static_cast<double>(step / cfg.epoch_length));
  }
  fail("learning_rate: unknown schedule \"" + cfg.lr_schedule + "\"");
}

template <typename T>
TrainState<T> init_train_state(const FsfNet<T>& model) {
  TrainState<T> state;
  for (const auto& [path, value] : model.params().params()) {
    state.velocity.emplace(path, Tensor<T>(value.shape()));
  }
  return state;
}

template <typename T>
void sgd_step(FsfNet<T>& model, TrainState<T>& state, T lr,
              const TrainConfig& cfg) {
  // Validate every gradient before touching any parameter, so a failure
  // leaves the model exactly as the last completed step did.
  for (const auto& [path, value] : model.params().params()) {
    const Tensor<T>& g = value.grad();
    if (g.numel() != 0 && !g.all_finite()) {
      fail("sgd_step: non-finite gradient for parameter " + path);
    }
    if (g.numel() != 0 && !(g.shape() == value.shape())) {
      fail("sgd_step: gradient shape " + g.shape().str() +
           " does not match parameter " + path);
    }
  }

  const T momentum = static_cast<T>(cfg.momentum);
  const T wd = static_cast<T>(cfg.weight_decay);
  for (const auto& [path, value] : model.params().params()) {
    auto vit = state.velocity.find(path);
    if (vit == state.velocity.end()) {
      fail("sgd_step: no momentum buffer for parameter " + path);
    }
    Value<T> p = value;  // handles share the node; this copy is mutable
    Tensor<T>& pv = p.mutable_val();
    Tensor<T>& vel = vit->second;
    const Tensor<T>& g = p.grad();
    const bool has_grad = g.numel() != 0;
    for (std::int64_t i = 0; i < pv.numel(); ++i) {
      const T gi = has_grad ? g.data()[i] : T(0);
      vel.data()[i] = momentum * vel.data()[i] + gi + wd * pv.data()[i];
      pv.data()[i] -= lr * vel.data()[i];
    }
  }
  ++state.step;
}

template <typename T>
PyramidLoss<T> pyramid_loss(const ForwardOutput<T>& out, const LabelMap& labels,
                            std::span<const T> class_weights,
                            const std::array<double, 3>& lambda) {
  if (out.side_logits.size() != 3) {
    fail("pyramid_loss: expected 3 supervised outputs, got " +
         std::to_string(out.side_logits.size()));
  }
  PyramidLoss<T> result;
  Value<T> total;
  for (int i = 0; i < 3; ++i) {
    const Shape& s = out.side_logits[static_cast<std::size_t>(i)].shape();
    if (s.n != labels.n || s.h < 1 || labels.h % s.h != 0 ||
        labels.w % s.w != 0 || labels.h / s.h != labels.w / s.w) {
      fail("pyramid_loss: labels " + std::to_string(labels.n) + "x" +
           std::to_string(labels.h) + "x" + std::to_string(labels.w) +
           " are not an integer multiple of supervised output " +
           std::to_string(i + 1) + " at " + s.str());
    }
    const int factor = labels.h / s.h;
    const LabelMap target = downsample_labels(labels, factor);
    Value<T> term = weighted_cross_entropy(
        out.side_logits[static_cast<std::size_t>(i)], target, class_weights);
    result.terms[static_cast<std::size_t>(i)] =
        static_cast<double>(term.val().data()[0]);
    Value<T> weighted = scale(term, static_cast<T>(lambda[static_cast<std::size_t>(i)]));
    total = total.defined() ? add(total, weighted) : weighted;
  }
  result.total = total;
  return result;
}

std::vector<double> compute_class_weights(
    const std::vector<RgbdSample>& samples, int num_classes) {
  if (num_classes < 1) {
    fail("compute_class_weights: num_classes must be >= 1");
  }
  if (samples.empty()) {
    fail("compute_class_weights: empty dataset");
  }
  std::vector<std::int64_t> counts(static_cast<std::size_t>(num_classes), 0);
  std::int64_t total = 0;
  for (const RgbdSample& s : samples) {
    for (const std::int32_t l : s.labels.labels) {
      if (l == kIgnoreLabel) continue;
      if (l < 0 || l >= num_classes) {
        fail("compute_class_weights: label " + std::to_string(l) +
             " outside [0, " + std::to_string(num_classes) +
             ") and not the ignore label");
      }
      ++counts[static_cast<std::size_t>(l)];
      ++total;
    }
  }
  if (total == 0) {
    fail("compute_class_weights: dataset has no scored pixels");
  }

  std::vector<double> present;
  for (const std::int64_t c : counts) {
    if (c > 0) {
      present.push_back(static_cast<double>(c) / static_cast<double>(total));
    }
  }
  std::sort(present.begin(), present.end());
  const std::size_t n = present.size();
  const double median = n % 2 == 1
                            ? present[n / 2]
                            : 0.5 * (present[n / 2 - 1] + present[n / 2]);

  std::vector<double> weights(static_cast<std::size_t>(num_classes), 0.0);
  for (int c = 0; c < num_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] > 0) {
      const double freq = static_cast<double>(counts[static_cast<std::size_t>(c)]) /
                          static_cast<double>(total);
      weights[static_cast<std::size_t>(c)] = median / freq;
    }
  }
  return weights;
}

SplitIndices split_dataset(int count, double val_fraction, std::uint64_t seed) {
  if (count < 0) fail("split_dataset: count must be >= 0");
  if (val_fraction < 0.0 || val_fraction > 1.0) {
    fail("split_dataset: val_fraction must lie in [0, 1]");
  }
  const int val_n = static_cast<int>(
      std::ceil(val_fraction * static_cast<double>(count) - 1e-9));

  std::vector<int> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::uint64_t> key(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    key[static_cast<std::size_t>(i)] =
        splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(i)));
  }
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    const std::uint64_t ka = key[static_cast<std::size_t>(a)];
    const std::uint64_t kb = key[static_cast<std::size_t>(b)];
    return ka != kb ? ka < kb : a < b;
  });

  SplitIndices split;
  split.val.assign(order.begin(), order.begin() + val_n);
  split.train.assign(order.begin() + val_n, order.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.train.begin(), split.train.end());
  return split;
}

void write_history_csv(const std::string& path,
                       const std::vector<HistoryRow>& history) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("write_history_csv: cannot open " + path + " for writing");
  out << "step,lr,total_loss,l1,l2,l3\n";
  char line[256];
  for (const HistoryRow& row : history) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  row.step, row.lr, row.total_loss, row.l1, row.l2, row.l3);
    out << line;
  }
  if (!out) fail("write_history_csv: write to " + path + " failed");
}

std::vector<HistoryRow> read_history_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("read_history_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "step,lr,total_loss,l1,l2,l3") {
    fail("read_history_csv: " + path + " lacks the expected header");
  }
  std::vector<HistoryRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    HistoryRow row;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    if (!(fields >> row.step >> row.lr >> row.total_loss >> row.l1 >> row.l2 >>
          row.l3)) {
      fail("read_history_csv: malformed row in " + path + ": " + line);
    }
    rows.push_back(row);
  }
  return rows;
}

namespace {

// Validates on the held-out set and refreshes best.ckpt when mIoU improves.
void run_validation(FsfNet<float>& model, const std::vector<RgbdSample>& val,
                    const std::string& out_dir, TrainState<float>& state,
                    TrainResult& result) {
  const ConfusionMatrix cm = evaluate(model, val);
  const double miou = mean_iou(cm);
  if (std::isnan(state.best_val_miou) || miou > state.best_val_miou) {
    state.best_val_miou = miou;
    result.best_val_miou = miou;
    result.best_checkpoint = (fs::path(out_dir) / "best.ckpt").string();
    save_checkpoint(result.best_checkpoint, model, state.step);
  }
}

}  // namespace

TrainResult train(FsfNet<float>& model, TrainConfig cfg,
                  const std::vector<RgbdSample>& train_set,
                  const std::vector<RgbdSample>& val_set,
                  const std::string& out_dir,
                  const std::function<void(const HistoryRow&)>& on_step) {
  cfg.validate();
  if (train_set.empty()) fail("train: empty training set");
  fs::create_directories(out_dir);

  const int num_classes = model.config().num_classes;
  const std::vector<double> weights_d =
      compute_class_weights(train_set, num_classes);
  std::vector<float> weights(weights_d.begin(), weights_d.end());

  const int n_train = static_cast<int>(train_set.size());
  if (cfg.epoch_length == 0) {
    cfg.epoch_length =
        std::max(1, (n_train + cfg.batch_size - 1) / cfg.batch_size);
  }

  TrainState<float> state = init_train_state(model);
  Rng rng(cfg.seed);
  TrainResult result;

  for (int step = 0; step < cfg.max_steps; ++step) {
    const double lr = learning_rate(cfg, step);

    std::vector<RgbdSample> staged;
    staged.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) {
      const int idx =
          static_cast<int>(rng.uniform_int(0, n_train - 1));
      RgbdSample s = train_set[static_cast<std::size_t>(idx)];
      if (cfg.crop_size > 0) {
        s = random_crop(s, cfg.crop_size, rng.next());
      }
      if (cfg.use_flip && rng.coin()) {
        s = horizontal_flip(s);
      }
      staged.push_back(std::move(s));
    }
    std::vector<const RgbdSample*> pointers;
    for (const RgbdSample& s : staged) pointers.push_back(&s);
    const Batch batch = make_batch(pointers);

    ForwardOutput<float> fwd = model.forward(batch.rgb, batch.hha, true);
    PyramidLoss<float> loss =
        pyramid_loss<float>(fwd, batch.labels, std::span<const float>(weights),
                            cfg.lambda);
    const double total = static_cast<double>(loss.total.val().data()[0]);
    if (!std::isfinite(total)) {
      result.halted = true;
      result.halt_reason =
          "non-finite loss at step " + std::to_string(step + 1);
      break;
    }

    backward(loss.total);
    try {
      sgd_step(model, state, static_cast<float>(lr), cfg);
    } catch (const std::invalid_argument& e) {
      result.halted = true;
      result.halt_reason =
          std::string(e.what()) + " at step " + std::to_string(step + 1);
      break;
    }

    HistoryRow row;
    row.step = state.step;
    row.lr = lr;
    row.total_loss = total;
    row.l1 = loss.terms[0];
    row.l2 = loss.terms[1];
    row.l3 = loss.terms[2];
    result.history.push_back(row);
    if (on_step) on_step(row);

    if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) {
      save_checkpoint((fs::path(out_dir) / "last.ckpt").string(), model,
                      state.step);
    }
    if (cfg.eval_every > 0 && state.step % cfg.eval_every == 0 &&
        !val_set.empty()) {
      run_validation(model, val_set, out_dir, state, result);
    }
  }

  result.steps_completed = state.step;
  result.last_checkpoint = (fs::path(out_dir) / "last.ckpt").string();
  save_checkpoint(result.last_checkpoint, model, state.step);
  if (!result.halted && !val_set.empty() &&
      (cfg.eval_every == 0 || state.step % cfg.eval_every != 0)) {
    run_validation(model, val_set, out_dir, state, result);
  }
  write_history_csv((fs::path(out_dir) / "history.csv").string(),
                    result.history);
  return result;
}

ConfusionMatrix evaluate(FsfNet<float>& model,
                         const std::vector<RgbdSample>& samples) {
  if (samples.empty()) fail("evaluate: empty dataset");
  ConfusionMatrix cm(model.config().num_classes);
  for (const RgbdSample& s : samples) {
    const ForwardOutput<float> fwd = model.forward(s.rgb, s.hha, false);
    const LabelMap pred = argmax_channels(fwd.main_logits.val());
    cm.accumulate(pred, s.labels);
  }
  return cm;
}

MeanStd mean_and_sample_std(const std::vector<double>& xs) {
  if (xs.empty()) fail("mean_and_sample_std: empty sample");
  MeanStd out;
  out.mean = std::accumulate(xs.begin(), xs.end(), 0.0) /
             static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (const double x : xs) ss += (x - out.mean) * (x - out.mean);
    out.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return out;
}

std::vector<AblationRow> ablate(const ModelConfig& base_model,
                                const TrainConfig& base_train,
                                const std::vector<RgbdSample>& train_set,
                                const std::vector<RgbdSample>& test_set,
                                int num_seeds, const std::string& out_dir,
                                const std::function<void(const std::string&)>& log) {
  if (num_seeds < 3) {
    fail("ablate: need at least 3 seeds, got " + std::to_string(num_seeds));
  }
  if (test_set.empty()) fail("ablate: empty test set");

  struct Variant {
    const char* name;
    const char* dir;
    bool use_scrf;
    bool use_dfp;
  };
  const Variant variants[4] = {
      {"SUM", "sum", false, false},
      {"+DFP", "dfp", false, true},
      {"+SCRF", "scrf", true, false},
      {"+SCRF+DFP", "scrf_dfp", true, true},
  };

  std::vector<AblationRow> rows;
  for (const Variant& v : variants) {
    AblationRow row;
    row.name = v.name;
    row.use_scrf = v.use_scrf;
    row.use_dfp = v.use_dfp;
    for (int s = 0; s < num_seeds; ++s) {
      const std::uint64_t seed = base_train.seed + static_cast<std::uint64_t>(s);
      ModelConfig mc = base_model;
      mc.use_scrf = v.use_scrf;
      mc.use_dfp = v.use_dfp;
      TrainConfig tc = base_train;
      tc.seed = seed;

      FsfNet<float> model(mc, seed);
      const std::string run_dir =
          (fs::path(out_dir) / v.dir / ("seed" + std::to_string(s))).string();
      const TrainResult r = train(model, tc, train_set, {}, run_dir);
      if (r.halted) {
        fail("ablate: variant " + row.name + " seed " + std::to_string(s) +
             " halted: " + r.halt_reason);
      }
      // The comparison scores the final state; no best-checkpoint peeking.
      const double miou = mean_iou(evaluate(model, test_set));
      row.per_seed_miou.push_back(miou);
      if (log) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%-10s seed %d  test mIoU %.4f",
                      v.name, s, miou);
        log(buf);
      }
    }
    row.miou = mean_and_sample_std(row.per_seed_miou);
    rows.push_back(std::move(row));
  }
  return rows;
}

#define FSFNET_INSTANTIATE_TRAIN(T)                                          \
  template TrainState<T> init_train_state<T>(const FsfNet<T>&);              \
  template void sgd_step<T>(FsfNet<T>&, TrainState<T>&, T,                   \
                            const TrainConfig&);                             \
  template PyramidLoss<T> pyramid_loss<T>(const ForwardOutput<T>&,           \
                                          const LabelMap&,                   \
                                          std::span<const T>,                \
                                          const std::array<double, 3>&);

FSFNET_INSTANTIATE_TRAIN(float)
FSFNET_INSTANTIATE_TRAIN(double)

#undef FSFNET_INSTANTIATE_TRAIN

}  // namespace fsfnet
