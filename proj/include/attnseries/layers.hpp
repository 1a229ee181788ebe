#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "attnseries/tensor.hpp"

namespace ats {

struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};
using ParamList = std::vector<NamedTensor>;

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
inline Tensor affine_init(std::vector<int> shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor t = Tensor::uniform(std::move(shape), -bound, bound, rng);
  t.set_requires_grad(true);
  return t;
}

inline Tensor zeros_param(std::vector<int> shape) {
  Tensor t = Tensor::zeros(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

// introspection records filled by forward passes on request
struct AttentionRecord {
  int layer = 0;
  int head = 0;
  Tensor scores;  // detached, row-stochastic; [T x T], or [T] for soft attention
};

struct FeatureRecord {
  std::string name;
  Tensor value;  // detached
};

struct ForwardHooks {
  std::vector<AttentionRecord> attention;
  std::vector<FeatureRecord> features;
};

// ---------------------------------------------------------------------------
// dense

struct DenseLayer {
  Tensor weight;  // [D_in x D_out]
  std::optional<Tensor> bias;
  Act act = Act::Identity;

  DenseLayer() = default;
  DenseLayer(int d_in, int d_out, bool with_bias, Act a, Rng& rng)
      : weight(affine_init({d_in, d_out}, d_in, rng)), act(a) {
    if (with_bias) bias = zeros_param({d_out});
  }

  void append_params(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight, true});
    if (bias) out.push_back({prefix + ".bias", *bias, true});
  }
};

// h = act(x W + b), applied to the last axis of a 1/2/3-d input
inline Tensor dense_forward(const DenseLayer& layer, const Tensor& x) {
  const int d_in = layer.weight.dim(0);
  if (x.dim(x.ndim() - 1) != d_in)
    throw DimensionError("dense_forward: input width " +
                         std::to_string(x.dim(x.ndim() - 1)) + " != " +
                         std::to_string(d_in));
  Tensor h;
  if (x.ndim() == 1)
    h = reshape(matmul(reshape(x, {1, d_in}), layer.weight),
                {layer.weight.dim(1)});
  else if (x.ndim() == 2)
    h = matmul(x, layer.weight);
  else
    h = matmul3(x, layer.weight);
  if (layer.bias) h = add_rowvec(h, *layer.bias);
  return activation(h, layer.act);
}

// ---------------------------------------------------------------------------
// batch-norm layer wrapper

struct BatchNorm1d {
  BNState state;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm1d() = default;
  explicit BatchNorm1d(int channels) : state(channels) {}

  Tensor forward(const Tensor& x, Mode mode) {
    return batch_norm(x, state, mode, momentum, eps);
  }

  void append_params(ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", state.gamma, true});
    out.push_back({prefix + ".beta", state.beta, true});
    out.push_back({prefix + ".running_mean", state.running_mean, false});
    out.push_back({prefix + ".running_var", state.running_var, false});
  }
};

// ---------------------------------------------------------------------------
// LSTM

// packed gate order: [forget | input | modulation | output]
struct LstmCellWeights {
  Tensor w_input;      // [D_in x 4*D_h]
  Tensor w_recurrent;  // [D_h x 4*D_h]
  Tensor bias;         // [4*D_h]
  int hidden = 0;

  LstmCellWeights() = default;
  LstmCellWeights(int d_in, int d_h, Rng& rng)
      : w_input(affine_init({d_in, 4 * d_h}, d_in, rng)),
        w_recurrent(affine_init({d_h, 4 * d_h}, d_h, rng)),
        bias(zeros_param({4 * d_h})),
        hidden(d_h) {
    // forget-gate bias starts open so the cell can carry context early on
    for (int j = 0; j < d_h; ++j) bias.at(j) = 1.0;
  }

  void append_params(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".w_input", w_input, true});
    out.push_back({prefix + ".w_recurrent", w_recurrent, true});
    out.push_back({prefix + ".bias", bias, true});
  }
};

struct LstmState {
  Tensor h;
  Tensor c;
};

// one LSTM update; x_t is [N x D_in] (a [D_in] vector is treated as N=1)
inline LstmState lstm_step(const LstmCellWeights& w, const Tensor& x_t,
                           const Tensor& h_prev, const Tensor& c_prev) {
  const bool vec = x_t.ndim() == 1;
  Tensor x = vec ? reshape(x_t, {1, x_t.dim(0)}) : x_t;
  Tensor h = vec ? reshape(h_prev, {1, h_prev.dim(0)}) : h_prev;
  Tensor c = vec ? reshape(c_prev, {1, c_prev.dim(0)}) : c_prev;
  if (x.dim(1) != w.w_input.dim(0) || h.dim(1) != w.hidden ||
      c.dim(1) != w.hidden)
    throw DimensionError("lstm_step: dimension mismatch");
  const int dh = w.hidden;
  Tensor gates = add_rowvec(add(matmul(x, w.w_input), matmul(h, w.w_recurrent)),
                            w.bias);
  Tensor f = sigmoid(col_slice(gates, 0, dh));
  Tensor i = sigmoid(col_slice(gates, dh, 2 * dh));
  Tensor g = tanh_t(col_slice(gates, 2 * dh, 3 * dh));
  Tensor o = sigmoid(col_slice(gates, 3 * dh, 4 * dh));
  Tensor c_new = add(mul(f, c), mul(i, g));
  Tensor h_new = mul(o, tanh_t(c_new));
  if (vec) {
    h_new = reshape(h_new, {dh});
    c_new = reshape(c_new, {dh});
  }
  return {h_new, c_new};
}

struct LSTMStack {
  std::vector<LstmCellWeights> forward_cells;
  std::vector<LstmCellWeights> backward_cells;  // empty when unidirectional
  int num_layers = 0;
  int hidden = 0;
  bool bidirectional = true;
  double dropout_p = 0.0;

  LSTMStack() = default;
  LSTMStack(int d_in, int d_h, int layers, bool bidir, double p, Rng& rng)
      : num_layers(layers), hidden(d_h), bidirectional(bidir), dropout_p(p) {
    for (int l = 0; l < layers; ++l) {
      const int in = l == 0 ? d_in : (bidir ? 2 * d_h : d_h);
      forward_cells.emplace_back(in, d_h, rng);
      if (bidir) backward_cells.emplace_back(in, d_h, rng);
    }
  }

  void append_params(ParamList& out, const std::string& prefix) const {
    for (int l = 0; l < num_layers; ++l) {
      forward_cells[static_cast<size_t>(l)].append_params(
          out, prefix + ".l" + std::to_string(l) + ".fwd");
      if (bidirectional)
        backward_cells[static_cast<size_t>(l)].append_params(
            out, prefix + ".l" + std::to_string(l) + ".bwd");
    }
  }
};

struct SequenceEncoding {
  Tensor hidden;  // [N x T x D_h] (or [T x D_h] for unbatched input)
  Tensor final;   // [N x D_h] (or [D_h]); concatenated directions
};

namespace detail {

// run one direction of one layer over [N x T x D]; returns stacked h plus the
// last h of the scan (for reverse=true that is the state after step 0)
inline std::pair<Tensor, Tensor> lstm_scan(const LstmCellWeights& w,
                                           const Tensor& x, bool reverse) {
  const int nb = x.dim(0), tt = x.dim(1);
  Tensor h = Tensor::zeros({nb, w.hidden});
  Tensor c = Tensor::zeros({nb, w.hidden});
  std::vector<Tensor> outputs(static_cast<size_t>(tt));
  for (int step = 0; step < tt; ++step) {
    const int t_index = reverse ? tt - 1 - step : step;
    LstmState s = lstm_step(w, slice_time(x, t_index), h, c);
    h = s.h;
    c = s.c;
    outputs[static_cast<size_t>(t_index)] = h;
  }
  return {stack_time(outputs), h};
}

}  // namespace detail

inline SequenceEncoding bilstm_encode(const LSTMStack& stack, const Tensor& x_in,
                                      Mode mode, Rng* rng = nullptr,
                                      ForwardHooks* hooks = nullptr) {
  const bool unbatched = x_in.ndim() == 2;
  Tensor x = unbatched ? reshape(x_in, {1, x_in.dim(0), x_in.dim(1)}) : x_in;
  if (x.ndim() != 3) throw DimensionError("bilstm_encode: need [T x D] or [N x T x D]");
  if (x.dim(1) < 1) throw DimensionError("bilstm_encode: empty sequence");
  Tensor h_fwd_last, h_bwd_last;
  for (int l = 0; l < stack.num_layers; ++l) {
    auto [h_fwd, last_f] =
        detail::lstm_scan(stack.forward_cells[static_cast<size_t>(l)], x, false);
    h_fwd_last = last_f;
    if (stack.bidirectional) {
      auto [h_bwd, last_b] = detail::lstm_scan(
          stack.backward_cells[static_cast<size_t>(l)], x, true);
      h_bwd_last = last_b;
      x = concat_last({h_fwd, h_bwd});
    } else {
      x = h_fwd;
    }
    if (hooks)
      hooks->features.push_back({"block" + std::to_string(l), x.detached()});
    if (mode == Mode::Train && stack.dropout_p > 0.0 &&
        l + 1 < stack.num_layers) {
      if (!rng) throw ContractError("bilstm_encode: dropout needs an rng");
      x = dropout(x, stack.dropout_p, mode, *rng);
    }
  }
  Tensor final = stack.bidirectional ? concat_last({h_fwd_last, h_bwd_last})
                                     : h_fwd_last;
  if (unbatched) {
    x = reshape(x, {x.dim(1), x.dim(2)});
    final = reshape(final, {final.dim(1)});
  }
  return {x, final};
}

// ---------------------------------------------------------------------------
// GRU (single mono-directional layer, used by the soft-attention model)

struct GruCellWeights {
  Tensor w_input;      // [D_in x 3*D_h], gate order [reset | update | candidate]
  Tensor w_recurrent;  // [D_h x 3*D_h]
  Tensor bias;         // [3*D_h]
  int hidden = 0;

  GruCellWeights() = default;
  GruCellWeights(int d_in, int d_h, Rng& rng)
      : w_input(affine_init({d_in, 3 * d_h}, d_in, rng)),
        w_recurrent(affine_init({d_h, 3 * d_h}, d_h, rng)),
        bias(zeros_param({3 * d_h})),
        hidden(d_h) {}

  void append_params(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".w_input", w_input, true});
    out.push_back({prefix + ".w_recurrent", w_recurrent, true});
    out.push_back({prefix + ".bias", bias, true});
  }
};

inline Tensor gru_encode(const GruCellWeights& w, const Tensor& x_in) {
  const bool unbatched = x_in.ndim() == 2;
  Tensor x = unbatched ? reshape(x_in, {1, x_in.dim(0), x_in.dim(1)}) : x_in;
  const int nb = x.dim(0), tt = x.dim(1);
  const int dh = w.hidden;
  Tensor h = Tensor::zeros({nb, dh});
  std::vector<Tensor> outputs(static_cast<size_t>(tt));
  for (int t = 0; t < tt; ++t) {
    Tensor x_t = slice_time(x, t);
    Tensor gi = matmul(x_t, w.w_input);
    Tensor gh = matmul(h, w.w_recurrent);
    Tensor r = sigmoid(add_rowvec(add(col_slice(gi, 0, dh), col_slice(gh, 0, dh)),
                                  col_slice(w.bias, 0, dh)));
    Tensor z = sigmoid(add_rowvec(
        add(col_slice(gi, dh, 2 * dh), col_slice(gh, dh, 2 * dh)),
        col_slice(w.bias, dh, 2 * dh)));
    Tensor n = tanh_t(add_rowvec(
        add(col_slice(gi, 2 * dh, 3 * dh), mul(r, col_slice(gh, 2 * dh, 3 * dh))),
        col_slice(w.bias, 2 * dh, 3 * dh)));
    // h = (1-z) * n + z * h
    h = add(sub(n, mul(z, n)), mul(z, h));
    outputs[static_cast<size_t>(t)] = h;
  }
  Tensor seq = stack_time(outputs);
  if (unbatched) seq = reshape(seq, {tt, dh});
  return seq;
}

// ---------------------------------------------------------------------------
// self-attention

struct SelfAttentionLayer {
  std::vector<Tensor> w_query;  // per head, [D x d_h]
  std::vector<Tensor> w_key;
  std::vector<Tensor> w_value;
  Tensor w_out;  // [D x D]
  int heads = 1;
  int width = 0;  // D
  Act projection_act = Act::Identity;

  SelfAttentionLayer() = default;
  SelfAttentionLayer(int d, int n_heads, Act phi, Rng& rng)
      : heads(n_heads), width(d), projection_act(phi) {
    if (n_heads < 1 || d % n_heads != 0)
      throw ConfigError("self-attention: width " + std::to_string(d) +
                        " not divisible by heads " + std::to_string(n_heads));
    const int dh = d / n_heads;
    for (int h = 0; h < n_heads; ++h) {
      w_query.push_back(affine_init({d, dh}, d, rng));
      w_key.push_back(affine_init({d, dh}, d, rng));
      w_value.push_back(affine_init({d, dh}, d, rng));
    }
    w_out = affine_init({d, d}, d, rng);
  }

  void append_params(ParamList& out, const std::string& prefix) const {
    for (int h = 0; h < heads; ++h) {
      const std::string hp = prefix + ".h" + std::to_string(h);
      out.push_back({hp + ".w_query", w_query[static_cast<size_t>(h)], true});
      out.push_back({hp + ".w_key", w_key[static_cast<size_t>(h)], true});
      out.push_back({hp + ".w_value", w_value[static_cast<size_t>(h)], true});
    }
    out.push_back({prefix + ".w_out", w_out, true});
  }
};

struct AttentionOutput {
  Tensor hidden;                    // same shape as the input
  std::vector<Tensor> score_matrices;  // one per head
};

// batched core: x is [N x T x D]
inline AttentionOutput self_attention_batched(const SelfAttentionLayer& layer,
                                              const Tensor& x) {
  if (x.ndim() != 3 || x.dim(2) != layer.width)
    throw DimensionError("self_attention: expected [N x T x " +
                         std::to_string(layer.width) + "], got " +
                         shape_str(x.shape()));
  if (x.dim(1) < 1) throw DimensionError("self_attention: empty sequence");
  const int dh = layer.width / layer.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> head_outputs, score_mats;
  for (int h = 0; h < layer.heads; ++h) {
    const auto hs = static_cast<size_t>(h);
    Tensor q = activation(matmul3(x, layer.w_query[hs]), layer.projection_act);
    Tensor k = activation(matmul3(x, layer.w_key[hs]), layer.projection_act);
    Tensor v = activation(matmul3(x, layer.w_value[hs]), layer.projection_act);
    Tensor scores = softmax(mul_scalar(bmm_nt(q, k), scale), 2);
    head_outputs.push_back(bmm(scores, v));
    score_mats.push_back(scores);
  }
  Tensor concat = layer.heads == 1 ? head_outputs[0] : concat_last(head_outputs);
  return {matmul3(concat, layer.w_out), std::move(score_mats)};
}

// per-sample view: x is [T x D]; returned score matrices are [T x T]
inline AttentionOutput self_attention(const SelfAttentionLayer& layer,
                                      const Tensor& x) {
  if (x.ndim() != 2)
    throw DimensionError("self_attention: expected [T x D], got " +
                         shape_str(x.shape()));
  const int tt = x.dim(0);
  AttentionOutput out =
      self_attention_batched(layer, reshape(x, {1, tt, x.dim(1)}));
  out.hidden = reshape(out.hidden, {tt, layer.width});
  for (auto& s : out.score_matrices) s = reshape(s, {tt, tt});
  return out;
}

// ---------------------------------------------------------------------------
// soft attention (fixed learned key vector, one weight per time step)

struct SoftAttentionLayer {
  Tensor w_query;  // [D x D_h]
  Tensor key;      // [D_h]
  Act nonlinearity = Act::Tan;  // literal tangens; tanh selectable via config

  SoftAttentionLayer() = default;
  SoftAttentionLayer(int d, int d_h, Act phi, Rng& rng)
      : w_query(affine_init({d, d_h}, d, rng)),
        key(affine_init({d_h}, d_h, rng)),
        nonlinearity(phi) {}

  void append_params(ParamList& out, const std::string& prefix) const {
    out.push_back({prefix + ".w_query", w_query, true});
    out.push_back({prefix + ".key", key, true});
  }
};

struct SoftAttentionOutput {
  Tensor pooled;  // [D] or [N x D]
  Tensor alpha;   // [T] or [N x T]
};

inline SoftAttentionOutput soft_attention_batched(const SoftAttentionLayer& layer,
                                                  const Tensor& x) {
  if (x.ndim() != 3 || x.dim(2) != layer.w_query.dim(0))
    throw DimensionError("soft_attention: expected [N x T x " +
                         std::to_string(layer.w_query.dim(0)) + "], got " +
                         shape_str(x.shape()));
  const int nb = x.dim(0), tt = x.dim(1);
  const int dk = layer.key.dim(0);
  Tensor q = activation(matmul3(x, layer.w_query), layer.nonlinearity);
  // logits[n,t] = q[n,t,:] . key
  Tensor logits = reshape(matmul(reshape(q, {nb * tt, dk}),
                                 reshape(layer.key, {dk, 1})),
                          {nb, tt});
  Tensor alpha = softmax(logits, 1);
  Tensor pooled = reshape(bmm(reshape(alpha, {nb, 1, tt}), x), {nb, x.dim(2)});
  return {pooled, alpha};
}

inline SoftAttentionOutput soft_attention(const SoftAttentionLayer& layer,
                                          const Tensor& x) {
  if (x.ndim() != 2)
    throw DimensionError("soft_attention: expected [T x D], got " +
                         shape_str(x.shape()));
  const int tt = x.dim(0);
  SoftAttentionOutput out =
      soft_attention_batched(layer, reshape(x, {1, tt, x.dim(1)}));
  out.pooled = reshape(out.pooled, {x.dim(1)});
  out.alpha = reshape(out.alpha, {tt});
  return out;
}

// ---------------------------------------------------------------------------
// positional encoding

// PE[t, 2i] = sin(t / 10000^(2i/D)), PE[t, 2i+1] = cos(t / 10000^(2i/D))
inline Tensor positional_encoding(int t_len, int d) {
  if (d % 2 != 0)
    throw ConfigError("positional_encoding: width must be even, got " +
                      std::to_string(d));
  if (t_len < 1 || d < 1) throw DimensionError("positional_encoding: empty table");
  Tensor pe = Tensor::zeros({t_len, d});
  for (int i = 0; i < d / 2; ++i) {
    const double freq = std::pow(10000.0, -2.0 * i / static_cast<double>(d));
    for (int t = 0; t < t_len; ++t) {
      pe.at(t, 2 * i) = std::sin(t * freq);
      pe.at(t, 2 * i + 1) = std::cos(t * freq);
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------
// residual conv block

struct ResidualBlock1D {
  Tensor kernels;  // [C x K x C]
  BatchNorm1d bn;
  int kernel_size = 3;
  int channels = 0;

  ResidualBlock1D() = default;
  ResidualBlock1D(int c, int k, Rng& rng)
      : kernels(affine_init({c, k, c}, k * c, rng)),
        bn(c),
        kernel_size(k),
        channels(c) {}

  void append_params(ParamList& out, const std::string& prefix) {
    out.push_back({prefix + ".kernels", kernels, true});
    bn.append_params(out, prefix + ".bn");
  }
};

// H = relu(bn(conv(X))) + X; channel and time extents are preserved
inline Tensor residual_block(ResidualBlock1D& block, const Tensor& x, Mode mode) {
  const int c = x.dim(x.ndim() - 1);
  if (c != block.channels)
    throw DimensionError("residual_block: channel mismatch, input " +
                         std::to_string(c) + " vs block " +
                         std::to_string(block.channels));
  Tensor branch = relu(
      block.bn.forward(conv1d(x, block.kernels, Padding::Same), mode));
  return add(branch, x);
}

}  // namespace ats
