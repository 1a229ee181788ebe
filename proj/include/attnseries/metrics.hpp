#pragma once

#include <cstdint>
#include <vector>

#include "attnseries/common.hpp"

namespace ats {

struct ConfusionMatrix {
  int classes = 0;
  std::vector<int64_t> counts;  // row = true class, column = predicted

  explicit ConfusionMatrix(int c = 0)
      : classes(c), counts(static_cast<size_t>(c) * c, 0) {}

  int64_t& at(int truth, int pred) {
    return counts[static_cast<size_t>(truth) * classes + pred];
  }
  int64_t at(int truth, int pred) const {
    return counts[static_cast<size_t>(truth) * classes + pred];
  }
  int64_t total() const {
    int64_t n = 0;
    for (int64_t v : counts) n += v;
    return n;
  }
};

struct MetricsReport {
  ConfusionMatrix confusion;
  double accuracy = 0.0;
  double kappa = 0.0;
  std::vector<double> f1;  // per class
  double macro_f1 = 0.0;
};

inline MetricsReport metrics_from_confusion(const ConfusionMatrix& cm) {
  const int c = cm.classes;
  const int64_t n = cm.total();
  if (n == 0) throw DimensionError("metrics: empty input");
  MetricsReport rep;
  rep.confusion = cm;

  int64_t trace = 0;
  std::vector<int64_t> row(c, 0), col(c, 0);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j) {
      row[static_cast<size_t>(i)] += cm.at(i, j);
      col[static_cast<size_t>(j)] += cm.at(i, j);
      if (i == j) trace += cm.at(i, j);
    }
  rep.accuracy = static_cast<double>(trace) / static_cast<double>(n);

  // kappa numerator/denominator kept in exact integer arithmetic:
  // p_o - p_e = (trace*n - sum(row*col)) / n^2
  int64_t chance = 0;
  for (int i = 0; i < c; ++i) chance += row[static_cast<size_t>(i)] * col[static_cast<size_t>(i)];
  const int64_t num = trace * n - chance;
  const int64_t den = n * n - chance;
  rep.kappa = den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);

  rep.f1.assign(static_cast<size_t>(c), 0.0);
  double f1_sum = 0.0;
  for (int i = 0; i < c; ++i) {
    const double tp = static_cast<double>(cm.at(i, i));
    const double p = col[static_cast<size_t>(i)] > 0 ? tp / col[static_cast<size_t>(i)] : 0.0;
    const double r = row[static_cast<size_t>(i)] > 0 ? tp / row[static_cast<size_t>(i)] : 0.0;
    const double f = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    rep.f1[static_cast<size_t>(i)] = f;
    f1_sum += f;
  }
  rep.macro_f1 = f1_sum / c;
  return rep;
}

inline MetricsReport metrics(const std::vector<int>& preds,
                             const std::vector<int>& labels, int classes) {
  if (preds.size() != labels.size())
    throw DimensionError("metrics: predictions and labels differ in length");
  if (preds.empty()) throw DimensionError("metrics: empty input");
  ConfusionMatrix cm(classes);
  for (size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes || preds[i] < 0 || preds[i] >= classes)
      throw DimensionError("metrics: class id out of range at index " +
                           std::to_string(i));
    ++cm.at(labels[i], preds[i]);
  }
  return metrics_from_confusion(cm);
}

}  // namespace ats
