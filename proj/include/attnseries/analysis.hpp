#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "attnseries/data.hpp"
#include "attnseries/metrics.hpp"
#include "attnseries/models.hpp"

namespace ats {

// ---------------------------------------------------------------------------
// gradient attribution

struct AttributionMap {
  Tensor gradients;  // dy*/dX, same shape as the input series
  int predicted_class = 0;
  double predicted_score = 0.0;
};

// gradient of the highest predicted class probability with respect to the
// input series; parameters receive no gradients
inline AttributionMap input_gradients(Model& model, const Tensor& x) {
  if (x.ndim() != 2)
    throw DimensionError("input_gradients: need [T x D], got " + shape_str(x.shape()));
  // freeze parameters for the duration of the pass
  ParamList params = model.params();
  std::vector<bool> saved;
  for (auto& p : params) {
    saved.push_back(p.tensor.requires_grad());
    p.tensor.set_requires_grad(false);
  }
  Tensor input = x.detached();
  input.set_requires_grad(true);
  AttributionMap out;
  Tape tape;
  {
    TapeScope scope(tape);
    Tensor logits = model.forward(input, Mode::Eval);
    Tensor probs = softmax(logits, 0);
    int best = 0;
    for (int j = 1; j < probs.dim(0); ++j)
      if (probs.at(j) > probs.at(best)) best = j;
    Tensor y_star = select_index(probs, best);
    out.predicted_class = best;
    out.predicted_score = y_star.at(0);
    tape.backward(y_star);
  }
  out.gradients = input.has_grad() ? Tensor(x.shape(), input.grad())
                                   : Tensor::zeros(x.shape());
  for (size_t i = 0; i < params.size(); ++i)
    params[i].tensor.set_requires_grad(saved[i]);
  return out;
}

// ---------------------------------------------------------------------------
// attention extraction

struct AttentionSummary {
  struct Entry {
    int layer = 0;
    int head = 0;
    Tensor matrix;                   // [T x T]; for soft attention the [T] weights
    std::vector<double> mean_scores;  // column means over output positions
  };
  std::vector<Entry> entries;
};

inline AttentionSummary attention_summary(Model& model, const Tensor& x) {
  const Architecture arch = model.spec.architecture;
  if (arch != Architecture::Transformer && arch != Architecture::SoftAttnGru)
    throw UnsupportedError(std::string("architecture has no attention: ") +
                           arch_name(arch));
  ForwardHooks hooks;
  model.forward(x, Mode::Eval, nullptr, &hooks);
  AttentionSummary out;
  for (const auto& rec : hooks.attention) {
    AttentionSummary::Entry e;
    e.layer = rec.layer;
    e.head = rec.head;
    if (rec.scores.ndim() == 3) {
      const int tt = rec.scores.dim(1);
      Tensor m = Tensor::zeros({tt, rec.scores.dim(2)});
      for (int i = 0; i < tt; ++i)
        for (int j = 0; j < rec.scores.dim(2); ++j) m.at(i, j) = rec.scores.at(0, i, j);
      e.matrix = m;
      e.mean_scores.assign(static_cast<size_t>(tt), 0.0);
      for (int j = 0; j < tt; ++j) {
        double acc = 0.0;
        for (int i = 0; i < tt; ++i) acc += m.at(i, j);
        e.mean_scores[static_cast<size_t>(j)] = acc / tt;
      }
    } else {
      // soft attention: a single weight vector over time
      const int tt = rec.scores.dim(rec.scores.ndim() - 1);
      Tensor v = Tensor::zeros({tt});
      for (int j = 0; j < tt; ++j)
        v.at(j) = rec.scores.ndim() == 2 ? rec.scores.at(0, j) : rec.scores.at(j);
      e.matrix = v;
      e.mean_scores.assign(v.values().begin(), v.values().end());
    }
    out.entries.push_back(std::move(e));
  }
  return out;
}

// ---------------------------------------------------------------------------
// embeddings

struct EmbeddingSet {
  int layer_index = 0;
  std::string layer_name;
  std::vector<std::vector<double>> points;  // one vector per sample
  std::vector<int> class_ids;
  std::vector<int64_t> sample_ids;
};

inline int feature_block_count(Model& model, const Dataset& ds, DataMode mode) {
  std::vector<int> idx = {0};
  for (size_t i = 0; i < ds.samples.size(); ++i)
    if (ds.samples[i].usable) {
      idx[0] = static_cast<int>(i);
      break;
    }
  Batch b = collate(ds, idx, mode, model.spec.sequence_length);
  ForwardHooks hooks;
  model.forward_batch(b.x, Mode::Eval, nullptr, &hooks);
  int blocks = 0;
  for (const auto& f : hooks.features)
    if (f.name.rfind("block", 0) == 0) ++blocks;
  return blocks;
}

// hidden features after the chosen block, averaged along the time dimension
inline EmbeddingSet extract_embeddings(Model& model, const Dataset& ds,
                                       const std::vector<int>& indices,
                                       DataMode mode, int layer_index) {
  EmbeddingSet out;
  out.layer_index = layer_index;
  out.layer_name = "block" + std::to_string(layer_index);
  for (int i : indices) {
    const SampleRecord& s = ds.samples[static_cast<size_t>(i)];
    Batch b = collate(ds, {i}, mode, model.spec.sequence_length);
    ForwardHooks hooks;
    model.forward_batch(b.x, Mode::Eval, nullptr, &hooks);
    const Tensor* feat = nullptr;
    for (const auto& f : hooks.features)
      if (f.name == out.layer_name) feat = &f.value;
    if (!feat)
      throw DimensionError("extract_embeddings: no feature block " +
                           std::to_string(layer_index));
    std::vector<double> e;
    if (feat->ndim() == 3) {
      // [1 x T x D] -> time mean [D]
      const int tt = feat->dim(1), d = feat->dim(2);
      e.assign(static_cast<size_t>(d), 0.0);
      for (int t = 0; t < tt; ++t)
        for (int j = 0; j < d; ++j) e[static_cast<size_t>(j)] += feat->at(0, t, j);
      for (double& v : e) v /= tt;
    } else {
      // already collapsed over time
      const int d = feat->dim(feat->ndim() - 1);
      e.assign(static_cast<size_t>(d), 0.0);
      for (int j = 0; j < d; ++j) e[static_cast<size_t>(j)] = feat->at(0, j);
    }
    out.points.push_back(std::move(e));
    out.class_ids.push_back(s.class_id);
    out.sample_ids.push_back(s.id);
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCA via Jacobi rotations on the sample covariance

struct PcaResult {
  std::vector<std::vector<double>> components;  // k rows of length D
  std::vector<double> explained_variance_ratio;  // length k, non-increasing
  std::vector<std::vector<double>> projected;    // n rows of length k
  std::vector<double> mean;
};

namespace detail {

// symmetric eigendecomposition; a is row-major d x d and is destroyed.
// eigenvectors come back as columns of v.
inline void jacobi_eigen(std::vector<double>& a, int d, std::vector<double>& eig,
                         std::vector<double>& v) {
  v.assign(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) v[static_cast<size_t>(i) * d + i] = 1.0;
  auto A = [&](int i, int j) -> double& { return a[static_cast<size_t>(i) * d + j]; };
  auto V = [&](int i, int j) -> double& { return v[static_cast<size_t>(i) * d + j]; };
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < d; ++p)
      for (int q = p + 1; q < d; ++q) off += A(p, q) * A(p, q);
    if (off < 1e-26) break;
    for (int p = 0; p < d; ++p)
      for (int q = p + 1; q < d; ++q) {
        if (std::fabs(A(p, q)) < 1e-300) continue;
        const double theta = (A(q, q) - A(p, p)) / (2.0 * A(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int k = 0; k < d; ++k) {
          const double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < d; ++k) {
          const double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        for (int k = 0; k < d; ++k) {
          const double vkp = V(k, p), vkq = V(k, q);
          V(k, p) = c * vkp - s * vkq;
          V(k, q) = s * vkp + c * vkq;
        }
      }
  }
  eig.assign(static_cast<size_t>(d), 0.0);
  for (int i = 0; i < d; ++i) eig[static_cast<size_t>(i)] = A(i, i);
}

}  // namespace detail

inline PcaResult pca(const std::vector<std::vector<double>>& points, int k) {
  const int n = static_cast<int>(points.size());
  if (n < 2) throw DimensionError("pca: need at least 2 points");
  const int d = static_cast<int>(points[0].size());
  if (k < 1 || k > d)
    throw DimensionError("pca: k must lie in [1, " + std::to_string(d) + "]");
  for (const auto& p : points)
    if (static_cast<int>(p.size()) != d)
      throw DimensionError("pca: inconsistent dimensionality");

  PcaResult res;
  res.mean.assign(static_cast<size_t>(d), 0.0);
  for (const auto& p : points)
    for (int j = 0; j < d; ++j) res.mean[static_cast<size_t>(j)] += p[static_cast<size_t>(j)];
  for (double& m : res.mean) m /= n;

  std::vector<double> cov(static_cast<size_t>(d) * d, 0.0);
  for (const auto& p : points)
    for (int i = 0; i < d; ++i) {
      const double ci = p[static_cast<size_t>(i)] - res.mean[static_cast<size_t>(i)];
      for (int j = i; j < d; ++j)
        cov[static_cast<size_t>(i) * d + j] +=
            ci * (p[static_cast<size_t>(j)] - res.mean[static_cast<size_t>(j)]);
    }
  for (int i = 0; i < d; ++i)
    for (int j = i; j < d; ++j) {
      cov[static_cast<size_t>(i) * d + j] /= (n - 1);
      cov[static_cast<size_t>(j) * d + i] = cov[static_cast<size_t>(i) * d + j];
    }

  std::vector<double> eig, vecs;
  detail::jacobi_eigen(cov, d, eig, vecs);

  std::vector<int> order(static_cast<size_t>(d));
  for (int i = 0; i < d; ++i) order[static_cast<size_t>(i)] = i;
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return eig[static_cast<size_t>(a)] > eig[static_cast<size_t>(b)]; });
  double total = 0.0;
  for (double e : eig) total += std::max(e, 0.0);
  if (total <= 0.0) total = 1.0;

  for (int c = 0; c < k; ++c) {
    const int col = order[static_cast<size_t>(c)];
    std::vector<double> comp(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j) comp[static_cast<size_t>(j)] = vecs[static_cast<size_t>(j) * d + col];
    // sign convention: the largest-magnitude loading points positive
    int big = 0;
    for (int j = 1; j < d; ++j)
      if (std::fabs(comp[static_cast<size_t>(j)]) > std::fabs(comp[static_cast<size_t>(big)])) big = j;
    if (comp[static_cast<size_t>(big)] < 0.0)
      for (double& v : comp) v = -v;
    res.components.push_back(std::move(comp));
    res.explained_variance_ratio.push_back(
        std::max(eig[static_cast<size_t>(col)], 0.0) / total);
  }

  for (const auto& p : points) {
    std::vector<double> proj(static_cast<size_t>(k), 0.0);
    for (int c = 0; c < k; ++c) {
      double acc = 0.0;
      for (int j = 0; j < d; ++j)
        acc += (p[static_cast<size_t>(j)] - res.mean[static_cast<size_t>(j)]) *
               res.components[static_cast<size_t>(c)][static_cast<size_t>(j)];
      proj[static_cast<size_t>(c)] = acc;
    }
    res.projected.push_back(std::move(proj));
  }
  return res;
}

// 1-nearest-neighbour accuracy of `test` points against `train` points
inline double knn_accuracy(const std::vector<std::vector<double>>& train_pts,
                           const std::vector<int>& train_labels,
                           const std::vector<std::vector<double>>& test_pts,
                           const std::vector<int>& test_labels) {
  if (train_pts.empty() || test_pts.empty())
    throw DimensionError("knn_accuracy: empty input");
  int correct = 0;
  for (size_t q = 0; q < test_pts.size(); ++q) {
    double best = INFINITY;
    int best_label = -1;
    for (size_t s = 0; s < train_pts.size(); ++s) {
      double d2 = 0.0;
      for (size_t j = 0; j < train_pts[s].size(); ++j) {
        const double dx = test_pts[q][j] - train_pts[s][j];
        d2 += dx * dx;
      }
      if (d2 < best) {
        best = d2;
        best_label = train_labels[s];
      }
    }
    correct += best_label == test_labels[q];
  }
  return static_cast<double>(correct) / static_cast<double>(test_pts.size());
}

// ---------------------------------------------------------------------------
// CSV artifacts

inline void write_confusion_csv(const std::string& path, const ConfusionMatrix& cm) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot open '" + path + "'");
  os << "truth";
  for (int j = 0; j < cm.classes; ++j) os << ",pred_" << j;
  os << "\n";
  for (int i = 0; i < cm.classes; ++i) {
    os << i;
    for (int j = 0; j < cm.classes; ++j) os << ',' << cm.at(i, j);
    os << "\n";
  }
}

inline void write_attribution_csv(const std::string& path,
                                  const std::vector<int64_t>& sample_ids,
                                  const std::vector<AttributionMap>& maps) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot open '" + path + "'");
  os << "sample_id,t,band,gradient,predicted_class,predicted_score\n";
  char buf[64];
  for (size_t s = 0; s < maps.size(); ++s) {
    const Tensor& g = maps[s].gradients;
    for (int t = 0; t < g.dim(0); ++t)
      for (int b = 0; b < g.dim(1); ++b) {
        std::snprintf(buf, sizeof(buf), "%.9g", g.at(t, b));
        os << sample_ids[s] << ',' << t << ',' << b << ',' << buf << ','
           << maps[s].predicted_class << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", maps[s].predicted_score);
        os << buf << "\n";
      }
  }
}

inline void write_attention_csv(const std::string& path,
                                const std::vector<int64_t>& sample_ids,
                                const std::vector<AttentionSummary>& summaries) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot open '" + path + "'");
  os << "sample_id,layer,head,t,mean_score\n";
  char buf[64];
  for (size_t s = 0; s < summaries.size(); ++s)
    for (const auto& e : summaries[s].entries)
      for (size_t t = 0; t < e.mean_scores.size(); ++t) {
        std::snprintf(buf, sizeof(buf), "%.9g", e.mean_scores[t]);
        os << sample_ids[s] << ',' << e.layer << ',' << e.head << ',' << t << ','
           << buf << "\n";
      }
}

inline void write_embedding_csv(const std::string& path, const EmbeddingSet& set,
                                const PcaResult* projection = nullptr) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot open '" + path + "'");
  const size_t width =
      projection ? projection->projected[0].size() : set.points[0].size();
  os << "sample_id,class";
  for (size_t j = 0; j < width; ++j) os << ",c" << j;
  os << "\n";
  char buf[64];
  for (size_t i = 0; i < set.points.size(); ++i) {
    os << set.sample_ids[i] << ',' << set.class_ids[i];
    const auto& row = projection ? projection->projected[i] : set.points[i];
    for (double v : row) {
      std::snprintf(buf, sizeof(buf), ",%.9g", v);
      os << buf;
    }
    os << "\n";
  }
}

inline void write_pca_variance_csv(const std::string& path, const PcaResult& p) {
  std::ofstream os(path);
  if (!os) throw ParseError("cannot open '" + path + "'");
  os << "component,explained_variance_ratio\n";
  char buf[64];
  for (size_t i = 0; i < p.explained_variance_ratio.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.9g", p.explained_variance_ratio[i]);
    os << i << ',' << buf << "\n";
  }
}

}  // namespace ats
