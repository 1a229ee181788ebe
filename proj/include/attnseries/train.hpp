#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "attnseries/data.hpp"
#include "attnseries/metrics.hpp"
#include "attnseries/models.hpp"

namespace ats {

// mean over the batch of -log softmax(logits)[true class], via log-sum-exp
inline Tensor cross_entropy(const Tensor& logits, const Tensor& targets) {
  if (logits.ndim() != 2 || targets.shape() != logits.shape())
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) +
                         " vs targets " + shape_str(targets.shape()));
  const int n = logits.dim(0), c = logits.dim(1);
  std::vector<int> true_class(static_cast<size_t>(n), -1);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const double v = targets.at(i, j);
      if (v == 1.0) {
        if (true_class[static_cast<size_t>(i)] != -1)
          throw ContractError("cross_entropy: target row " + std::to_string(i) +
                              " is not one-hot");
        true_class[static_cast<size_t>(i)] = j;
      } else if (v != 0.0) {
        throw ContractError("cross_entropy: target row " + std::to_string(i) +
                            " is not one-hot");
      }
    }
    if (true_class[static_cast<size_t>(i)] == -1)
      throw ContractError("cross_entropy: target row " + std::to_string(i) +
                          " is not one-hot");
  }
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (int j = 0; j < c; ++j) mx = std::max(mx, logits.at(i, j));
    double lse = 0.0;
    for (int j = 0; j < c; ++j) lse += std::exp(logits.at(i, j) - mx);
    lse = mx + std::log(lse);
    total += lse - logits.at(i, true_class[static_cast<size_t>(i)]);
  }
  Tensor loss = Tensor::scalar(total / n);
  if (Tape* t = detail::tape_for({&logits}, loss)) {
    t->record([ln = logits.node(), on = loss.node(), true_class, n, c] {
      if (!detail::grad_ready(on)) return;
      ln->ensure_grad();
      const double g = on->grad[0] / n;
      for (int i = 0; i < n; ++i) {
        double mx = -INFINITY;
        for (int j = 0; j < c; ++j)
          mx = std::max(mx, ln->value[static_cast<size_t>(i) * c + j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j)
          sum += std::exp(ln->value[static_cast<size_t>(i) * c + j] - mx);
        for (int j = 0; j < c; ++j) {
          const double p =
              std::exp(ln->value[static_cast<size_t>(i) * c + j] - mx) / sum;
          const double target = j == true_class[static_cast<size_t>(i)] ? 1.0 : 0.0;
          ln->grad[static_cast<size_t>(i) * c + j] += g * (p - target);
        }
      }
    });
  }
  return loss;
}

// ---------------------------------------------------------------------------
// optimizer

struct AdamState {
  std::vector<Tensor> params;
  std::vector<std::vector<double>> m, v;
  int64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
  double base_lr = 1e-3;
  double weight_decay = 0.0;

  AdamState() = default;
  AdamState(std::vector<Tensor> parameters, double lr, double wd)
      : params(std::move(parameters)), base_lr(lr), weight_decay(wd) {
    for (const auto& p : params) {
      m.emplace_back(p.size(), 0.0);
      v.emplace_back(p.size(), 0.0);
    }
  }
};

// one Adam update with bias correction, then decoupled weight decay
inline void adam_step(AdamState& st, double lr_t) {
  if (lr_t <= 0.0) throw ConfigError("adam_step: lr must be > 0");
  ++st.step_count;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step_count));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step_count));
  for (size_t pi = 0; pi < st.params.size(); ++pi) {
    Tensor& p = st.params[pi];
    if (st.m[pi].size() != p.size())
      throw DimensionError("adam_step: state/parameter shape mismatch");
    auto& m = st.m[pi];
    auto& v = st.v[pi];
    const bool has_grad = p.has_grad();
    for (size_t i = 0; i < p.size(); ++i) {
      const double g = has_grad ? p.grad()[i] : 0.0;
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p.values()[i] -= lr_t * m_hat / (std::sqrt(v_hat) + st.eps);
      p.values()[i] -= lr_t * st.weight_decay * p.values()[i];
    }
  }
}

inline void zero_grads(AdamState& st) {
  for (auto& p : st.params) p.zero_grad();
}

// rate = D_h^-0.5 * min(step^-0.5, step * N_warmup^-1.5)
inline double warmup_lr(int64_t step, int d_model, int n_warmup) {
  if (step < 1) throw ContractError("warmup_lr: step must be >= 1");
  const double s = static_cast<double>(step);
  return std::pow(static_cast<double>(d_model), -0.5) *
         std::min(std::pow(s, -0.5),
                  s * std::pow(static_cast<double>(n_warmup), -1.5));
}

// ---------------------------------------------------------------------------
// early stopping: epoch loss failed to beat the mean of the previous 10
// epochs, five epochs in a row

struct EarlyStopper {
  int window = 10;
  int patience = 5;
  std::vector<double> history;

  static bool decide(const std::vector<double>& history, int window,
                     int patience) {
    int consecutive = 0;
    for (size_t i = static_cast<size_t>(window); i < history.size(); ++i) {
      double mean = 0.0;
      for (size_t k = i - static_cast<size_t>(window); k < i; ++k)
        mean += history[k];
      mean /= window;
      consecutive = history[i] >= mean ? consecutive + 1 : 0;
    }
    return consecutive >= patience;
  }

  // append a loss; true means stop now
  bool observe(double epoch_loss) {
    history.push_back(epoch_loss);
    return decide(history, window, patience);
  }
};

// ---------------------------------------------------------------------------

enum class Scheduler { Constant, Warmup };
enum class StopMetric { ValLoss, TrainLoss };

struct TrainConfig {
  int batch_size = 64;
  int max_epochs = 60;
  double learning_rate = 1e-3;  // base rate for the constant scheduler
  double weight_decay = 0.0;
  Scheduler scheduler = Scheduler::Constant;
  int warmup_steps = 100;
  bool early_stopping = true;
  StopMetric stop_metric = StopMetric::ValLoss;
  uint64_t seed = 0;

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (max_epochs < 0) throw ConfigError("train: max_epochs must be >= 0");
    if (learning_rate <= 0.0) throw ConfigError("train: learning_rate must be > 0");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (warmup_steps < 1) throw ConfigError("train: warmup_steps must be >= 1");
  }
};

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double val_kappa = 0.0;
  double val_macro_f1 = 0.0;
  double lr = 0.0;
};

struct Evaluation {
  double loss = 0.0;
  MetricsReport report;
  std::vector<int> predictions;
};

// eval-mode pass over the given samples; no tape, running statistics frozen
inline Evaluation evaluate_model(Model& model, const Dataset& ds,
                                 const std::vector<int>& indices, DataMode mode,
                                 int batch_size = 256) {
  if (indices.empty()) throw DimensionError("evaluate_model: empty index set");
  Evaluation ev;
  const int t_nominal = model.spec.sequence_length;
  std::vector<int> labels;
  double loss_sum = 0.0;
  for (size_t start = 0; start < indices.size();
       start += static_cast<size_t>(batch_size)) {
    std::vector<int> chunk(
        indices.begin() + static_cast<ptrdiff_t>(start),
        indices.begin() +
            static_cast<ptrdiff_t>(std::min(start + batch_size, indices.size())));
    Batch b = collate(ds, chunk, mode, t_nominal);
    Tensor logits = model.forward_batch(b.x, Mode::Eval);
    loss_sum += cross_entropy(logits, b.y).at(0) * static_cast<double>(chunk.size());
    for (int i = 0; i < logits.dim(0); ++i) {
      int best = 0;
      for (int j = 1; j < logits.dim(1); ++j)
        if (logits.at(i, j) > logits.at(i, best)) best = j;
      ev.predictions.push_back(best);
    }
    labels.insert(labels.end(), b.labels.begin(), b.labels.end());
  }
  ev.loss = loss_sum / static_cast<double>(indices.size());
  ev.report = metrics(ev.predictions, labels, ds.config.classes);
  return ev;
}

// Owns one training run. Epochs can be driven incrementally (the tuner stops
// and resumes trials at rung boundaries); `fit` below drives it to completion.
class TrainSession {
 public:
  TrainSession(Model model, const Dataset& ds, std::vector<int> train_idx,
               std::vector<int> val_idx, DataMode mode, TrainConfig cfg)
      : model_(std::move(model)),
        ds_(&ds),
        train_idx_(std::move(train_idx)),
        val_idx_(std::move(val_idx)),
        mode_(mode),
        cfg_(cfg),
        optimizer_(model_.trainable_params(), cfg.learning_rate, cfg.weight_decay),
        shuffle_rng_(Rng(cfg.seed).fork(0x5EED1)),
        dropout_rng_(Rng(cfg.seed).fork(0x5EED2)) {
    cfg.validate();
    if (train_idx_.empty() || val_idx_.empty())
      throw DimensionError("fit: empty dataset partition");
    for (int i : train_idx_)
      for (int j : val_idx_)
        if (i == j) throw ContractError("fit: train and val sets overlap");
    t_nominal_ = model_.spec.sequence_length;
  }

  bool stopped() const { return stopped_; }
  int epoch() const { return epoch_; }
  const std::vector<EpochStats>& history() const { return history_; }
  double best_kappa() const { return best_kappa_; }
  int best_epoch() const { return best_epoch_; }
  Model& model() { return model_; }

  // run one epoch; returns the epoch stats. Undefined after stopped().
  EpochStats run_one_epoch() {
    if (stopped_) throw ContractError("train session already stopped");
    ++epoch_;
    std::vector<int> order = train_idx_;
    for (size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i],
                order[static_cast<size_t>(shuffle_rng_.integer(i + 1))]);

    double loss_sum = 0.0;
    double last_lr = 0.0;
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg_.batch_size)) {
      std::vector<int> chunk(
          order.begin() + static_cast<ptrdiff_t>(start),
          order.begin() + static_cast<ptrdiff_t>(
                              std::min(start + cfg_.batch_size, order.size())));
      Batch b = collate(*ds_, chunk, mode_, t_nominal_);
      ++global_step_;
      const double lr = cfg_.scheduler == Scheduler::Warmup
                            ? warmup_lr(global_step_, model_.spec.hidden_dim,
                                        cfg_.warmup_steps)
                            : cfg_.learning_rate;
      last_lr = lr;
      zero_grads(optimizer_);
      Tape tape;
      double batch_loss;
      {
        TapeScope scope(tape);
        Tensor logits = model_.forward_batch(b.x, Mode::Train, &dropout_rng_);
        Tensor loss = cross_entropy(logits, b.y);
        batch_loss = loss.at(0);
        if (!std::isfinite(batch_loss))
          throw ContractError("fit: non-finite training loss at epoch " +
                              std::to_string(epoch_) + ", step " +
                              std::to_string(global_step_));
        tape.backward(loss);
      }
      adam_step(optimizer_, lr);
      loss_sum += batch_loss * static_cast<double>(chunk.size());
    }

    EpochStats st;
    st.epoch = epoch_;
    st.train_loss = loss_sum / static_cast<double>(order.size());
    st.lr = last_lr;
    Evaluation ev = evaluate_model(model_, *ds_, val_idx_, mode_);
    st.val_loss = ev.loss;
    st.val_accuracy = ev.report.accuracy;
    st.val_kappa = ev.report.kappa;
    st.val_macro_f1 = ev.report.macro_f1;
    history_.push_back(st);

    if (st.val_kappa > best_kappa_) {
      best_kappa_ = st.val_kappa;
      best_epoch_ = epoch_;
      snapshot_best();
    }
    if (cfg_.early_stopping &&
        stopper_.observe(cfg_.stop_metric == StopMetric::ValLoss
                             ? st.val_loss
                             : st.train_loss))
      stopped_ = true;
    if (epoch_ >= cfg_.max_epochs) stopped_ = true;
    return st;
  }

  // advance to `target_epoch` (or early stop); false once stopped
  bool run_to(int target_epoch) {
    while (!stopped_ && epoch_ < std::min(target_epoch, cfg_.max_epochs))
      run_one_epoch();
    return !stopped_;
  }

  // model restored to the best-validation-kappa epoch
  Model best_model() {
    Model out = model_.clone();
    if (best_epoch_ >= 0) {
      ParamList dst = out.params();
      for (size_t i = 0; i < dst.size(); ++i)
        dst[i].tensor.values() = best_values_[i];
    }
    return out;
  }

 private:
  void snapshot_best() {
    ParamList src = model_.params();
    best_values_.clear();
    for (const auto& p : src) best_values_.push_back(p.tensor.values());
  }

  Model model_;
  const Dataset* ds_;
  std::vector<int> train_idx_, val_idx_;
  DataMode mode_;
  TrainConfig cfg_;
  AdamState optimizer_;
  Rng shuffle_rng_, dropout_rng_;
  EarlyStopper stopper_;
  int t_nominal_ = 0;
  int epoch_ = 0;
  int64_t global_step_ = 0;
  bool stopped_ = false;
  std::vector<EpochStats> history_;
  double best_kappa_ = -std::numeric_limits<double>::infinity();
  int best_epoch_ = -1;
  std::vector<std::vector<double>> best_values_;
};

struct FitResult {
  Model model;  // best-kappa checkpoint
  std::vector<EpochStats> history;
  double best_kappa = 0.0;
  int best_epoch = -1;
};

inline FitResult fit(Model model, const Dataset& ds,
                     const std::vector<int>& train_idx,
                     const std::vector<int>& val_idx, DataMode mode,
                     const TrainConfig& cfg) {
  cfg.validate();
  TrainSession session(std::move(model), ds, train_idx, val_idx, mode, cfg);
  if (cfg.max_epochs == 0)
    return {session.model().clone(), {}, 0.0, -1};
  while (!session.stopped()) session.run_one_epoch();
  return {session.best_model(), session.history(), session.best_kappa(),
          session.best_epoch()};
}

// partition-based convenience used by the CLI
inline FitResult fit(Model model, const Dataset& ds, DataMode mode,
                     const TrainConfig& cfg) {
  return fit(std::move(model), ds, ds.indices(Partition::Train),
             ds.indices(Partition::Val), mode, cfg);
}

inline void write_training_log(const std::string& path,
                               const std::vector<EpochStats>& history) {
  std::ofstream os(path);
  if (!os) throw ParseError("training log: cannot open '" + path + "'");
  os << "epoch,train_loss,val_loss,val_accuracy,val_kappa,val_macro_f1,lr\n";
  char buf[64];
  for (const auto& e : history) {
    os << e.epoch;
    for (double v : {e.train_loss, e.val_loss, e.val_accuracy, e.val_kappa,
                     e.val_macro_f1, e.lr}) {
      std::snprintf(buf, sizeof(buf), ",%.9g", v);
      os << buf;
    }
    os << "\n";
  }
}

}  // namespace ats
