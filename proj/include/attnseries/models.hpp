#pragma once

#include <array>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnseries/layers.hpp"
#include "attnseries/tensor.hpp"

namespace ats {

enum class Architecture { LstmRnn, Transformer, MsResnet, TempCnn, SoftAttnGru };

inline const char* arch_name(Architecture a) {
  switch (a) {
    case Architecture::LstmRnn: return "lstm_rnn";
    case Architecture::Transformer: return "transformer";
    case Architecture::MsResnet: return "msresnet";
    case Architecture::TempCnn: return "tempcnn";
    case Architecture::SoftAttnGru: return "softattn_gru";
  }
  return "?";
}

inline Architecture arch_from_name(const std::string& s) {
  if (s == "lstm_rnn") return Architecture::LstmRnn;
  if (s == "transformer") return Architecture::Transformer;
  if (s == "msresnet") return Architecture::MsResnet;
  if (s == "tempcnn") return Architecture::TempCnn;
  if (s == "softattn_gru") return Architecture::SoftAttnGru;
  throw ConfigError("unknown architecture '" + s + "'");
}

struct ModelSpec {
  Architecture architecture = Architecture::Transformer;
  int input_bands = 13;
  int classes = 2;
  int sequence_length = 23;  // nominal T; binding only for tempcnn
  int hidden_dim = 64;       // D_h
  int layers = 1;            // L (lstm_rnn, transformer)
  int heads = 1;             // H (transformer)
  int kernel_size = 5;       // K (tempcnn)
  double dropout = 0.0;      // p_drop (lstm_rnn, tempcnn)
  int warmup_steps = 100;    // N_warmup (transformer scheduler)
  bool use_positional_encoding = true;
  Act attention_projection = Act::Identity;
  Act soft_attention_act = Act::Tan;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError("model spec field '" + field + "': " + why);
    };
    if (classes < 2) fail("classes", "need at least 2");
    if (input_bands < 1) fail("input_bands", "need at least 1");
    if (sequence_length < 1) fail("sequence_length", "need at least 1");
    const bool dh_ok = hidden_dim == 16 || hidden_dim == 32 || hidden_dim == 64 ||
                       hidden_dim == 128 || hidden_dim == 256;
    if (!dh_ok) fail("hidden_dim", "must be one of {16,32,64,128,256}");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout", "must lie in [0,1)");
    switch (architecture) {
      case Architecture::LstmRnn:
        if (layers < 1 || layers > 7) fail("layers", "lstm_rnn allows 1..7");
        break;
      case Architecture::Transformer:
        if (layers < 1 || layers > 8) fail("layers", "transformer allows 1..8");
        if (heads < 1 || heads > 8) fail("heads", "transformer allows 1..8");
        if (hidden_dim % heads != 0)
          fail("heads", "must divide hidden_dim " + std::to_string(hidden_dim));
        if (warmup_steps != 10 && warmup_steps != 100 && warmup_steps != 1000)
          fail("warmup_steps", "must be one of {10,100,1000}");
        break;
      case Architecture::TempCnn:
        if (kernel_size != 3 && kernel_size != 5 && kernel_size != 7)
          fail("kernel_size", "must be one of {3,5,7}");
        break;
      case Architecture::MsResnet:
      case Architecture::SoftAttnGru:
        break;
    }
  }

  nlohmann::json to_json() const {
    return {{"architecture", arch_name(architecture)},
            {"input_bands", input_bands},
            {"classes", classes},
            {"sequence_length", sequence_length},
            {"hidden_dim", hidden_dim},
            {"layers", layers},
            {"heads", heads},
            {"kernel_size", kernel_size},
            {"dropout", dropout},
            {"warmup_steps", warmup_steps},
            {"use_positional_encoding", use_positional_encoding},
            {"attention_projection", act_name(attention_projection)},
            {"soft_attention_act", act_name(soft_attention_act)}};
  }

  static ModelSpec from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.architecture = arch_from_name(j.at("architecture").get<std::string>());
    s.input_bands = j.at("input_bands").get<int>();
    s.classes = j.at("classes").get<int>();
    s.sequence_length = j.at("sequence_length").get<int>();
    s.hidden_dim = j.at("hidden_dim").get<int>();
    s.layers = j.value("layers", 1);
    s.heads = j.value("heads", 1);
    s.kernel_size = j.value("kernel_size", 5);
    s.dropout = j.value("dropout", 0.0);
    s.warmup_steps = j.value("warmup_steps", 100);
    s.use_positional_encoding = j.value("use_positional_encoding", true);
    s.attention_projection =
        act_from_name(j.value("attention_projection", std::string("identity")));
    s.soft_attention_act =
        act_from_name(j.value("soft_attention_act", std::string("tan")));
    return s;
  }
};

// nearest-neighbor time resampling; endpoints map to endpoints
inline std::vector<int> resample_indices(int t_in, int t_out) {
  if (t_out < 1) throw DimensionError("resample_nearest: T_out must be >= 1");
  if (t_in < 1) throw DimensionError("resample_nearest: empty input");
  std::vector<int> idx(static_cast<size_t>(t_out));
  for (int j = 0; j < t_out; ++j)
    idx[static_cast<size_t>(j)] =
        t_out == 1 ? 0
                   : static_cast<int>(std::llround(
                         static_cast<double>(j) * (t_in - 1) / (t_out - 1)));
  return idx;
}

inline Tensor resample_nearest(const Tensor& x, int t_out) {
  const int t_in = x.ndim() == 3 ? x.dim(1) : x.dim(0);
  if (t_in == t_out) return x;
  return gather_time(x, resample_indices(t_in, t_out));
}

// ---------------------------------------------------------------------------
// architecture engines; all forwards take [N x T x D] and yield [N x C] logits

struct LstmRnnModel {
  LSTMStack stack;
  DenseLayer head;

  LstmRnnModel() = default;
  LstmRnnModel(const ModelSpec& s, Rng& rng)
      : stack(s.input_bands, s.hidden_dim, s.layers, true, s.dropout, rng),
        head(2 * s.hidden_dim, s.classes, true, Act::Identity, rng) {}

  Tensor forward(const Tensor& x, Mode mode, Rng* rng, ForwardHooks* hooks) {
    SequenceEncoding enc = bilstm_encode(stack, x, mode, rng, hooks);
    if (hooks) hooks->features.push_back({"pooled", enc.final.detached()});
    return dense_forward(head, enc.final);
  }

  void append_params(ParamList& out) {
    stack.append_params(out, "stack");
    head.append_params(out, "head");
  }
};

struct TransformerBlockModule {
  SelfAttentionLayer attn;
  Tensor ln1_gain, ln1_bias;
  DenseLayer ff_inner, ff_outer;
  Tensor ln2_gain, ln2_bias;

  TransformerBlockModule() = default;
  TransformerBlockModule(int d, int heads, Act phi, Rng& rng)
      : attn(d, heads, phi, rng),
        ln1_gain(Tensor::full({d}, 1.0)),
        ln1_bias(zeros_param({d})),
        ff_inner(d, 4 * d, true, Act::Relu, rng),
        ff_outer(4 * d, d, true, Act::Identity, rng),
        ln2_gain(Tensor::full({d}, 1.0)),
        ln2_bias(zeros_param({d})) {
    ln1_gain.set_requires_grad(true);
    ln2_gain.set_requires_grad(true);
  }

  Tensor forward(const Tensor& x, int layer_index, ForwardHooks* hooks) {
    AttentionOutput att = self_attention_batched(attn, x);
    if (hooks)
      for (int h = 0; h < attn.heads; ++h)
        hooks->attention.push_back(
            {layer_index, h, att.score_matrices[static_cast<size_t>(h)].detached()});
    Tensor y = layer_norm(add(x, att.hidden), ln1_gain, ln1_bias, 1e-5);
    Tensor ff = dense_forward(ff_outer, dense_forward(ff_inner, y));
    return layer_norm(add(y, ff), ln2_gain, ln2_bias, 1e-5);
  }

  void append_params(ParamList& out, const std::string& prefix) {
    attn.append_params(out, prefix + ".attn");
    out.push_back({prefix + ".ln1.gain", ln1_gain, true});
    out.push_back({prefix + ".ln1.bias", ln1_bias, true});
    ff_inner.append_params(out, prefix + ".ff_inner");
    ff_outer.append_params(out, prefix + ".ff_outer");
    out.push_back({prefix + ".ln2.gain", ln2_gain, true});
    out.push_back({prefix + ".ln2.bias", ln2_bias, true});
  }
};

struct TransformerModel {
  DenseLayer input_proj;  // bias-free
  std::vector<TransformerBlockModule> blocks;
  DenseLayer head;
  bool use_pe = true;
  std::map<int, Tensor> pe_cache;

  TransformerModel() = default;
  TransformerModel(const ModelSpec& s, Rng& rng)
      : input_proj(s.input_bands, s.hidden_dim, false, Act::Identity, rng),
        head(s.hidden_dim, s.classes, true, Act::Identity, rng),
        use_pe(s.use_positional_encoding) {
    for (int l = 0; l < s.layers; ++l)
      blocks.emplace_back(s.hidden_dim, s.heads, s.attention_projection, rng);
  }

  Tensor forward(const Tensor& x, Mode, Rng*, ForwardHooks* hooks) {
    Tensor h = dense_forward(input_proj, x);
    if (use_pe) {
      const int tt = h.dim(1);
      auto it = pe_cache.find(tt);
      if (it == pe_cache.end())
        it = pe_cache.emplace(tt, positional_encoding(tt, h.dim(2))).first;
      h = add_mat_bcast(h, it->second);
    }
    for (size_t l = 0; l < blocks.size(); ++l) {
      h = blocks[l].forward(h, static_cast<int>(l), hooks);
      if (hooks)
        hooks->features.push_back({"block" + std::to_string(l), h.detached()});
    }
    Tensor pooled = pool_global_max_time(h);
    if (hooks) hooks->features.push_back({"pooled", pooled.detached()});
    return dense_forward(head, pooled);
  }

  void append_params(ParamList& out) {
    input_proj.append_params(out, "input_proj");
    for (size_t l = 0; l < blocks.size(); ++l)
      blocks[l].append_params(out, "block" + std::to_string(l));
    head.append_params(out, "head");
  }
};

struct MsResnetModel {
  static constexpr int kResampleLength = 512;
  static constexpr int kStreamOutput = 256;

  struct Stage {
    Tensor trans_kernels;  // raises the channel count
    BatchNorm1d trans_bn;
    ResidualBlock1D res;

    Stage() = default;
    Stage(int c_in, int c_out, int k, Rng& rng)
        : trans_kernels(affine_init({c_out, k, c_in}, k * c_in, rng)),
          trans_bn(c_out),
          res(c_out, k, rng) {}

    Tensor forward(const Tensor& x, Mode mode) {
      Tensor y = relu(trans_bn.forward(conv1d(x, trans_kernels, Padding::Same), mode));
      return residual_block(res, y, mode);
    }

    void append_params(ParamList& out, const std::string& prefix) {
      out.push_back({prefix + ".trans.kernels", trans_kernels, true});
      trans_bn.append_params(out, prefix + ".trans.bn");
      res.append_params(out, prefix + ".res");
    }
  };

  struct Stream {
    std::vector<Stage> stages;
    DenseLayer reduce;
    int kernel = 3;
    int pool_window = 16;

    Stream() = default;
    Stream(int d_in, int base, int k, int window, Rng& rng)
        : kernel(k), pool_window(window) {
      stages.emplace_back(d_in, base, k, rng);
      stages.emplace_back(base, 2 * base, k, rng);
      stages.emplace_back(2 * base, 4 * base, k, rng);
      const int pooled_len = (kResampleLength + window - 1) / window;
      reduce = DenseLayer(pooled_len * 4 * base, kStreamOutput, true,
                          Act::Identity, rng);
    }

    Tensor forward(const Tensor& x, Mode mode, ForwardHooks* hooks,
                   const std::string& tag) {
      Tensor h = x;
      for (size_t i = 0; i < stages.size(); ++i) {
        h = stages[i].forward(h, mode);
        if (hooks)
          hooks->features.push_back(
              {tag + ".stage" + std::to_string(i), h.detached()});
      }
      Tensor pooled = pool_avg1d(h, pool_window);
      Tensor flat = reshape(pooled, {pooled.dim(0), pooled.dim(1) * pooled.dim(2)});
      return dense_forward(reduce, flat);
    }

    void append_params(ParamList& out, const std::string& prefix) {
      for (size_t i = 0; i < stages.size(); ++i)
        stages[i].append_params(out, prefix + ".stage" + std::to_string(i));
      reduce.append_params(out, prefix + ".reduce");
    }
  };

  std::array<Stream, 3> streams;
  DenseLayer head;

  MsResnetModel() = default;
  MsResnetModel(const ModelSpec& s, Rng& rng) {
    const std::array<int, 3> kernels = {3, 5, 7};
    const std::array<int, 3> windows = {16, 11, 6};
    for (size_t i = 0; i < 3; ++i)
      streams[i] = Stream(s.input_bands, s.hidden_dim, kernels[i], windows[i], rng);
    head = DenseLayer(3 * kStreamOutput, s.classes, true, Act::Identity, rng);
  }

  Tensor forward(const Tensor& x, Mode mode, Rng*, ForwardHooks* hooks) {
    Tensor r = resample_nearest(x, kResampleLength);
    std::vector<Tensor> feats;
    const std::array<const char*, 3> tags = {"k3", "k5", "k7"};
    for (size_t i = 0; i < 3; ++i)
      feats.push_back(streams[i].forward(r, mode, hooks, tags[i]));
    Tensor concat = concat_last(feats);
    if (hooks) hooks->features.push_back({"pooled", concat.detached()});
    return dense_forward(head, concat);
  }

  void append_params(ParamList& out) {
    const std::array<const char*, 3> tags = {"k3", "k5", "k7"};
    for (size_t i = 0; i < 3; ++i) streams[i].append_params(out, tags[i]);
    head.append_params(out, "head");
  }
};

struct TempCnnModel {
  struct ConvBlock {
    Tensor kernels;
    BatchNorm1d bn;

    ConvBlock() = default;
    ConvBlock(int c_in, int c_out, int k, Rng& rng)
        : kernels(affine_init({c_out, k, c_in}, k * c_in, rng)), bn(c_out) {}

    Tensor forward(const Tensor& x, Mode mode) {
      return relu(bn.forward(conv1d(x, kernels, Padding::Same), mode));
    }

    void append_params(ParamList& out, const std::string& prefix) {
      out.push_back({prefix + ".kernels", kernels, true});
      bn.append_params(out, prefix + ".bn");
    }
  };

  std::vector<ConvBlock> conv_blocks;
  DenseLayer dense;
  BatchNorm1d dense_bn;
  DenseLayer head;
  double dropout_p = 0.0;
  int nominal_t = 0;

  TempCnnModel() = default;
  TempCnnModel(const ModelSpec& s, Rng& rng)
      : dropout_p(s.dropout), nominal_t(s.sequence_length) {
    conv_blocks.emplace_back(s.input_bands, s.hidden_dim, s.kernel_size, rng);
    conv_blocks.emplace_back(s.hidden_dim, s.hidden_dim, s.kernel_size, rng);
    conv_blocks.emplace_back(s.hidden_dim, s.hidden_dim, s.kernel_size, rng);
    dense = DenseLayer(s.sequence_length * s.hidden_dim, 4 * s.hidden_dim, true,
                       Act::Identity, rng);
    dense_bn = BatchNorm1d(4 * s.hidden_dim);
    head = DenseLayer(4 * s.hidden_dim, s.classes, true, Act::Identity, rng);
  }

  Tensor forward(const Tensor& x, Mode mode, Rng* rng, ForwardHooks* hooks) {
    if (x.dim(1) != nominal_t)
      throw DimensionError("tempcnn: expected T=" + std::to_string(nominal_t) +
                           ", got " + std::to_string(x.dim(1)));
    if (mode == Mode::Train && dropout_p > 0.0 && !rng)
      throw ContractError("tempcnn: dropout needs an rng");
    Tensor h = x;
    for (size_t i = 0; i < conv_blocks.size(); ++i) {
      h = conv_blocks[i].forward(h, mode);
      if (mode == Mode::Train && dropout_p > 0.0)
        h = dropout(h, dropout_p, mode, *rng);
      if (hooks)
        hooks->features.push_back({"block" + std::to_string(i), h.detached()});
    }
    Tensor flat = reshape(h, {h.dim(0), h.dim(1) * h.dim(2)});
    Tensor d = relu(dense_bn.forward(dense_forward(dense, flat), mode));
    if (mode == Mode::Train && dropout_p > 0.0) d = dropout(d, dropout_p, mode, *rng);
    if (hooks) hooks->features.push_back({"pooled", d.detached()});
    return dense_forward(head, d);
  }

  void append_params(ParamList& out) {
    for (size_t i = 0; i < conv_blocks.size(); ++i)
      conv_blocks[i].append_params(out, "conv" + std::to_string(i));
    dense.append_params(out, "dense");
    dense_bn.append_params(out, "dense.bn");
    head.append_params(out, "head");
  }
};

struct SoftAttnGruModel {
  GruCellWeights gru;
  SoftAttentionLayer attn;
  DenseLayer head;

  SoftAttnGruModel() = default;
  SoftAttnGruModel(const ModelSpec& s, Rng& rng)
      : gru(s.input_bands, s.hidden_dim, rng),
        attn(s.hidden_dim, s.hidden_dim, s.soft_attention_act, rng),
        head(s.hidden_dim, s.classes, true, Act::Identity, rng) {}

  Tensor forward(const Tensor& x, Mode, Rng*, ForwardHooks* hooks) {
    Tensor h = gru_encode(gru, x);
    if (hooks) hooks->features.push_back({"block0", h.detached()});
    SoftAttentionOutput att = soft_attention_batched(attn, h);
    if (hooks) {
      hooks->attention.push_back({0, 0, att.alpha.detached()});
      hooks->features.push_back({"pooled", att.pooled.detached()});
    }
    return dense_forward(head, att.pooled);
  }

  void append_params(ParamList& out) {
    gru.append_params(out, "gru");
    attn.append_params(out, "attn");
    head.append_params(out, "head");
  }
};

// ---------------------------------------------------------------------------

class Model {
 public:
  Model() = default;

  ModelSpec spec;

  // [N x T x D] -> [N x C]
  Tensor forward_batch(const Tensor& x, Mode mode, Rng* rng = nullptr,
                       ForwardHooks* hooks = nullptr) {
    if (x.ndim() != 3)
      throw DimensionError("forward_batch: need [N x T x D], got " +
                           shape_str(x.shape()));
    if (x.dim(2) != spec.input_bands)
      throw DimensionError("forward: input has " + std::to_string(x.dim(2)) +
                           " bands, model expects " +
                           std::to_string(spec.input_bands));
    switch (spec.architecture) {
      case Architecture::LstmRnn: return lstm_->forward(x, mode, rng, hooks);
      case Architecture::Transformer: return transformer_->forward(x, mode, rng, hooks);
      case Architecture::MsResnet: return msresnet_->forward(x, mode, rng, hooks);
      case Architecture::TempCnn: return tempcnn_->forward(x, mode, rng, hooks);
      case Architecture::SoftAttnGru: return softattn_->forward(x, mode, rng, hooks);
    }
    throw ContractError("unreachable");
  }

  // [T x D] -> [C]
  Tensor forward(const Tensor& x, Mode mode, Rng* rng = nullptr,
                 ForwardHooks* hooks = nullptr) {
    if (x.ndim() != 2)
      throw DimensionError("forward: need [T x D], got " + shape_str(x.shape()));
    Tensor logits =
        forward_batch(reshape(x, {1, x.dim(0), x.dim(1)}), mode, rng, hooks);
    return reshape(logits, {spec.classes});
  }

  ParamList params() {
    ParamList out;
    switch (spec.architecture) {
      case Architecture::LstmRnn: lstm_->append_params(out); break;
      case Architecture::Transformer: transformer_->append_params(out); break;
      case Architecture::MsResnet: msresnet_->append_params(out); break;
      case Architecture::TempCnn: tempcnn_->append_params(out); break;
      case Architecture::SoftAttnGru: softattn_->append_params(out); break;
    }
    return out;
  }

  std::vector<Tensor> trainable_params() {
    std::vector<Tensor> out;
    for (auto& p : params())
      if (p.trainable) out.push_back(p.tensor);
    return out;
  }

  size_t parameter_count() {
    size_t n = 0;
    for (auto& p : params())
      if (p.trainable) n += p.tensor.size();
    return n;
  }

  void set_trainable(bool on) {
    for (auto& p : params())
      if (p.trainable) p.tensor.set_requires_grad(on);
  }

  static Model build(const ModelSpec& spec, Rng& rng) {
    spec.validate();
    Model m;
    m.spec = spec;
    switch (spec.architecture) {
      case Architecture::LstmRnn:
        m.lstm_ = std::make_shared<LstmRnnModel>(spec, rng);
        break;
      case Architecture::Transformer:
        m.transformer_ = std::make_shared<TransformerModel>(spec, rng);
        break;
      case Architecture::MsResnet:
        m.msresnet_ = std::make_shared<MsResnetModel>(spec, rng);
        break;
      case Architecture::TempCnn:
        m.tempcnn_ = std::make_shared<TempCnnModel>(spec, rng);
        break;
      case Architecture::SoftAttnGru:
        m.softattn_ = std::make_shared<SoftAttnGruModel>(spec, rng);
        break;
    }
    return m;
  }

  // independent copy: same spec and values, fresh storage
  Model clone() {
    Rng scratch(0);
    Model copy = build(spec, scratch);
    ParamList src = params(), dst = copy.params();
    for (size_t i = 0; i < src.size(); ++i)
      dst[i].tensor.values() = src[i].tensor.values();
    return copy;
  }

 private:
  std::shared_ptr<LstmRnnModel> lstm_;
  std::shared_ptr<TransformerModel> transformer_;
  std::shared_ptr<MsResnetModel> msresnet_;
  std::shared_ptr<TempCnnModel> tempcnn_;
  std::shared_ptr<SoftAttnGruModel> softattn_;
};

inline Model build(const ModelSpec& spec, Rng& rng) { return Model::build(spec, rng); }

// ---------------------------------------------------------------------------
// checkpoint container: JSON spec + text manifest + little-endian double blob

namespace detail {
inline void write_u64(std::ostream& os, uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(buf), 8);
}

inline uint64_t read_u64(std::istream& is) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), 8);
  if (!is) throw ParseError("checkpoint: truncated header");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return v;
}
}  // namespace detail

inline constexpr char kCheckpointMagic[] = "ATSCKPT1\n";

inline void save_checkpoint(Model& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("checkpoint: cannot open '" + path + "' for writing");
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic) - 1);
  const std::string spec_json = model.spec.to_json().dump();
  detail::write_u64(os, spec_json.size());
  os.write(spec_json.data(), static_cast<std::streamsize>(spec_json.size()));

  ParamList params = model.params();
  std::string manifest;
  uint64_t offset = 0;
  for (const auto& p : params) {
    manifest += p.name + " ";
    for (size_t i = 0; i < p.tensor.shape().size(); ++i) {
      if (i) manifest += "x";
      manifest += std::to_string(p.tensor.shape()[i]);
    }
    manifest += " " + std::to_string(offset) + "\n";
    offset += p.tensor.size();
  }
  detail::write_u64(os, manifest.size());
  os.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  detail::write_u64(os, offset);
  for (const auto& p : params) {
    static_assert(sizeof(double) == 8);
    os.write(reinterpret_cast<const char*>(p.tensor.data()),
             static_cast<std::streamsize>(p.tensor.size() * sizeof(double)));
  }
  if (!os) throw ParseError("checkpoint: write to '" + path + "' failed");
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("checkpoint: cannot open '" + path + "'");
  char magic[sizeof(kCheckpointMagic) - 1];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw ParseError("checkpoint: bad magic in '" + path + "'");
  const uint64_t spec_len = detail::read_u64(is);
  std::string spec_json(spec_len, '\0');
  is.read(spec_json.data(), static_cast<std::streamsize>(spec_len));
  if (!is) throw ParseError("checkpoint: truncated spec");
  ModelSpec spec;
  try {
    spec = ModelSpec::from_json(nlohmann::json::parse(spec_json));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: bad spec json: ") + e.what());
  }
  const uint64_t manifest_len = detail::read_u64(is);
  std::string manifest(manifest_len, '\0');
  is.read(manifest.data(), static_cast<std::streamsize>(manifest_len));
  const uint64_t blob_len = detail::read_u64(is);

  Rng scratch(0);
  Model model = Model::build(spec, scratch);
  ParamList params = model.params();
  std::vector<double> blob(blob_len);
  is.read(reinterpret_cast<char*>(blob.data()),
          static_cast<std::streamsize>(blob_len * sizeof(double)));
  if (!is) throw ParseError("checkpoint: truncated parameter blob");

  std::map<std::string, std::pair<uint64_t, std::string>> entries;
  std::istringstream ms(manifest);
  std::string line;
  while (std::getline(ms, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, shape;
    uint64_t off;
    if (!(ls >> name >> shape >> off))
      throw ParseError("checkpoint: malformed manifest line '" + line + "'");
    entries[name] = {off, shape};
  }
  for (auto& p : params) {
    auto it = entries.find(p.name);
    if (it == entries.end())
      throw CompatError("checkpoint: missing array '" + p.name + "'");
    const uint64_t off = it->second.first;
    if (off + p.tensor.size() > blob.size())
      throw ParseError("checkpoint: array '" + p.name + "' overruns blob");
    std::copy(blob.begin() + static_cast<ptrdiff_t>(off),
              blob.begin() + static_cast<ptrdiff_t>(off + p.tensor.size()),
              p.tensor.values().begin());
  }
  return model;
}

}  // namespace ats
