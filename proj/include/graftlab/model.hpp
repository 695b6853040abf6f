#pragma once

// Component-addressable decoder-only transformer.
//
// Block(x) = LN(x + ATTN(LN_attn(x)) O + FFN(LN_ffn(x + ATTN(LN_attn(x)) O)))
//
// LN_attn and LN_ffn carry learned gain/bias and are graftable components.
// The outer LN of each block is a plain normalization with no parameters.
// Token and learned absolute position embeddings feed the first block; a
// final affine LN and the unembedding produce logits.
//
// Two execution paths exist on purpose: forward_full runs the whole sequence
// on an autodiff tape (the training path), and forward_step runs one token at
// a time against a KVCache with a per-token ParamView (the grafting path).

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "graftlab/error.hpp"
#include "graftlab/random.hpp"
#include "graftlab/tensor.hpp"
#include "json.hpp"

namespace graftlab {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kInitStd = 0.02;

enum class ComponentKind : std::uint8_t {
  W_Q,
  W_K,
  W_V,
  W_O,
  FFN_UP,
  FFN_DOWN,
  LN_ATTN,
  LN_FFN,
  EMBED,
  POS_EMBED,
  FINAL_LN,
  UNEMBED,
};

inline constexpr std::size_t kLayerKindCount = 8;
inline constexpr std::size_t kGlobalKindCount = 4;
inline constexpr int kGlobalLayer = -1;

inline constexpr std::array<ComponentKind, kLayerKindCount> kLayerKinds = {
    ComponentKind::W_Q,    ComponentKind::W_K,      ComponentKind::W_V,     ComponentKind::W_O,
    ComponentKind::FFN_UP, ComponentKind::FFN_DOWN, ComponentKind::LN_ATTN, ComponentKind::LN_FFN};
inline constexpr std::array<ComponentKind, kGlobalKindCount> kGlobalKinds = {
    ComponentKind::EMBED, ComponentKind::POS_EMBED, ComponentKind::FINAL_LN,
    ComponentKind::UNEMBED};

constexpr bool is_global(ComponentKind k) { return k >= ComponentKind::EMBED; }

inline std::string_view kind_name(ComponentKind k) {
  static constexpr std::array<std::string_view, 12> kNames = {
      "W_Q",     "W_K",    "W_V",   "W_O",       "FFN_UP",   "FFN_DOWN",
      "LN_ATTN", "LN_FFN", "EMBED", "POS_EMBED", "FINAL_LN", "UNEMBED"};
  return kNames[static_cast<std::size_t>(k)];
}

inline std::optional<ComponentKind> parse_kind(std::string_view s) {
  for (std::size_t i = 0; i < 12; ++i) {
    auto k = static_cast<ComponentKind>(i);
    if (kind_name(k) == s) return k;
  }
  return std::nullopt;
}

struct ComponentId {
  int layer = kGlobalLayer;
  ComponentKind kind = ComponentKind::EMBED;

  friend auto operator<=>(const ComponentId&, const ComponentId&) = default;

  static ComponentId global(ComponentKind k) { return {kGlobalLayer, k}; }
  static ComponentId at(int layer, ComponentKind k) { return {layer, k}; }

  // "EMBED" or "L3.W_Q"
  std::string name() const {
    if (layer == kGlobalLayer) return std::string(kind_name(kind));
    return "L" + std::to_string(layer) + "." + std::string(kind_name(kind));
  }

  static ComponentId parse(std::string_view s) {
    if (auto k = parse_kind(s); k && is_global(*k)) return global(*k);
    if (s.size() > 2 && s[0] == 'L') {
      auto dot = s.find('.');
      if (dot != std::string_view::npos) {
        int layer = 0;
        for (char c : s.substr(1, dot - 1)) {
          if (c < '0' || c > '9') throw FormatError("bad component name: " + std::string(s));
          layer = layer * 10 + (c - '0');
        }
        if (auto k = parse_kind(s.substr(dot + 1)); k && !is_global(*k)) return at(layer, *k);
      }
    }
    throw FormatError("bad component name: " + std::string(s));
  }
};

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_ff = 512;
  int vocab_size = 512;
  int max_seq_len = 128;
  bool tie_embeddings = false;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;

  void validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_ff <= 0 || vocab_size <= 0 ||
        max_seq_len <= 0) {
      throw ConfigError("model config fields must all be positive");
    }
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  }

  std::size_t d() const { return static_cast<std::size_t>(d_model); }
  std::size_t layers() const { return static_cast<std::size_t>(n_layers); }
  std::size_t vocab() const { return static_cast<std::size_t>(vocab_size); }
  std::size_t head_dim() const { return d() / static_cast<std::size_t>(n_heads); }
  std::size_t slot_count() const { return layers() * kLayerKindCount + kGlobalKindCount; }

  // Dense index of a component: per-layer kinds first, then the globals.
  std::size_t slot(ComponentId c) const {
    if (is_global(c.kind)) {
      if (c.layer != kGlobalLayer) throw ConfigError(c.name() + ": global kind with a layer");
      return layers() * kLayerKindCount + (static_cast<std::size_t>(c.kind) - 8);
    }
    if (c.layer < 0 || c.layer >= n_layers) {
      throw ConfigError(c.name() + ": layer outside [0, " + std::to_string(n_layers) + ")");
    }
    return static_cast<std::size_t>(c.layer) * kLayerKindCount + static_cast<std::size_t>(c.kind);
  }

  ComponentId component_at(std::size_t slot_index) const {
    std::size_t per_layer = layers() * kLayerKindCount;
    if (slot_index >= per_layer) return ComponentId::global(kGlobalKinds.at(slot_index - per_layer));
    return ComponentId::at(static_cast<int>(slot_index / kLayerKindCount),
                           kLayerKinds[slot_index % kLayerKindCount]);
  }

  std::vector<ComponentId> components() const {
    std::vector<ComponentId> out;
    out.reserve(slot_count());
    for (std::size_t s = 0; s < slot_count(); ++s) out.push_back(component_at(s));
    return out;
  }

  // Weight and optional bias shape of a component. An UNEMBED with tied
  // embeddings has no weight of its own (empty shape returned).
  std::pair<std::optional<Shape>, std::optional<Shape>> shapes(ComponentKind k) const {
    const std::size_t dm = d(), ff = static_cast<std::size_t>(d_ff), v = vocab();
    switch (k) {
      case ComponentKind::W_Q:
      case ComponentKind::W_K:
      case ComponentKind::W_V:
      case ComponentKind::W_O: return {Shape{dm, dm}, Shape{dm}};
      case ComponentKind::FFN_UP: return {Shape{dm, ff}, Shape{ff}};
      case ComponentKind::FFN_DOWN: return {Shape{ff, dm}, Shape{dm}};
      case ComponentKind::LN_ATTN:
      case ComponentKind::LN_FFN:
      case ComponentKind::FINAL_LN: return {Shape{dm}, Shape{dm}};
      case ComponentKind::EMBED: return {Shape{v, dm}, std::nullopt};
      case ComponentKind::POS_EMBED:
        return {Shape{static_cast<std::size_t>(max_seq_len), dm}, std::nullopt};
      case ComponentKind::UNEMBED:
        return {tie_embeddings ? std::nullopt : std::optional<Shape>(Shape{v, dm}), Shape{v}};
    }
    return {};
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},       {"n_heads", c.n_heads},
                     {"d_model", c.d_model},         {"d_ff", c.d_ff},
                     {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len},
                     {"tie_embeddings", c.tie_embeddings}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_model = j.value("d_model", d.d_model);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.tie_embeddings = j.value("tie_embeddings", d.tie_embeddings);
}

// Weight plus optional bias of one component. For layer norms the weight is
// the gain. An absent tensor has no data.
struct ComponentTensors {
  Tensor weight;
  Tensor bias;
};

class ModelParams {
 public:
  ModelParams() = default;

  // Zero-filled table with the shapes the config implies.
  explicit ModelParams(ModelConfig config) : config_(config) {
    config_.validate();
    table_.resize(config_.slot_count());
    for (std::size_t s = 0; s < table_.size(); ++s) {
      auto [w, b] = config_.shapes(config_.component_at(s).kind);
      if (w) table_[s].weight = Tensor(*w);
      if (b) table_[s].bias = Tensor(*b);
    }
  }

  const ModelConfig& config() const { return config_; }

  ComponentTensors& at(ComponentId c) { return table_.at(config_.slot(c)); }
  const ComponentTensors& at(ComponentId c) const { return table_.at(config_.slot(c)); }
  ComponentTensors& slot(std::size_t s) { return table_.at(s); }
  const ComponentTensors& slot(std::size_t s) const { return table_.at(s); }
  std::size_t slot_count() const { return table_.size(); }

  const Tensor& unembed_weight() const {
    return config_.tie_embeddings ? at(ComponentId::global(ComponentKind::EMBED)).weight
                                  : at(ComponentId::global(ComponentKind::UNEMBED)).weight;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& c : table_) n += c.weight.size() + c.bias.size();
    return n;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    if (!(a.config_ == b.config_) || a.table_.size() != b.table_.size()) return false;
    for (std::size_t s = 0; s < a.table_.size(); ++s) {
      if (a.table_[s].weight.data != b.table_[s].weight.data ||
          a.table_[s].bias.data != b.table_[s].bias.data) {
        return false;
      }
    }
    return true;
  }

 private:
  ModelConfig config_;
  std::vector<ComponentTensors> table_;
};

// Deterministic init: N(0, 0.02) weights, zero biases, unit norm gains.
inline ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p(config);
  Rng rng(seed);
  for (std::size_t s = 0; s < p.slot_count(); ++s) {
    ComponentKind k = config.component_at(s).kind;
    auto& c = p.slot(s);
    bool is_norm = k == ComponentKind::LN_ATTN || k == ComponentKind::LN_FFN ||
                   k == ComponentKind::FINAL_LN;
    if (is_norm) {
      std::fill(c.weight.data.begin(), c.weight.data.end(), 1.0);
    } else {
      for (double& w : c.weight.data) w = kInitStd * rng.normal();
    }
  }
  return p;
}

// Read-only per-component pointers. A ParamView built from one ModelParams
// is that model; one assembled from several sources is a per-token mixture.
struct LayerParams {
  const ComponentTensors* w_q;
  const ComponentTensors* w_k;
  const ComponentTensors* w_v;
  const ComponentTensors* w_o;
  const ComponentTensors* ffn_up;
  const ComponentTensors* ffn_down;
  const ComponentTensors* ln_attn;
  const ComponentTensors* ln_ffn;
};

class ParamView {
 public:
  explicit ParamView(const ModelParams& p) : config_(&p.config()), slots_(p.slot_count()) {
    for (std::size_t s = 0; s < slots_.size(); ++s) slots_[s] = &p.slot(s);
    unembed_weight_ = &p.unembed_weight();
  }

  // source_of_slot[s] indexes into sources. All sources share one config.
  ParamView(std::span<const ModelParams* const> sources, std::span<const std::size_t> source_of_slot)
      : config_(&sources[0]->config()), slots_(source_of_slot.size()) {
    if (source_of_slot.size() != config_->slot_count()) {
      throw DimensionError("ParamView: slot assignment has wrong length");
    }
    for (std::size_t s = 0; s < slots_.size(); ++s) {
      slots_[s] = &sources[source_of_slot[s]]->slot(s);
    }
    std::size_t unembed_slot = config_->slot(ComponentId::global(ComponentKind::UNEMBED));
    unembed_weight_ = &sources[source_of_slot[unembed_slot]]->unembed_weight();
  }

  const ModelConfig& config() const { return *config_; }
  const ComponentTensors& get(ComponentId c) const { return *slots_[config_->slot(c)]; }
  const Tensor& unembed_weight() const { return *unembed_weight_; }

  LayerParams layer(int l) const {
    auto g = [&](ComponentKind k) { return &get(ComponentId::at(l, k)); };
    return {g(ComponentKind::W_Q),    g(ComponentKind::W_K),      g(ComponentKind::W_V),
            g(ComponentKind::W_O),    g(ComponentKind::FFN_UP),   g(ComponentKind::FFN_DOWN),
            g(ComponentKind::LN_ATTN), g(ComponentKind::LN_FFN)};
  }

 private:
  const ModelConfig* config_;
  std::vector<const ComponentTensors*> slots_;
  const Tensor* unembed_weight_ = nullptr;
};

// Keys/values of one layer, row-major [length x d_model].
struct LayerCache {
  std::vector<double> keys;
  std::vector<double> values;
  std::size_t length = 0;
};

class KVCache {
 public:
  explicit KVCache(const ModelConfig& config) : d_(config.d()), layers_(config.layers()) {}

  std::size_t length() const { return layers_.empty() ? 0 : layers_[0].length; }
  std::size_t n_layers() const { return layers_.size(); }
  std::size_t d_model() const { return d_; }
  LayerCache& layer(std::size_t l) { return layers_.at(l); }
  const LayerCache& layer(std::size_t l) const { return layers_.at(l); }

  // Key/value row of a position in a layer.
  std::span<const double> key(std::size_t l, std::size_t pos) const {
    return std::span<const double>(layers_.at(l).keys).subspan(pos * d_, d_);
  }
  std::span<const double> value(std::size_t l, std::size_t pos) const {
    return std::span<const double>(layers_.at(l).values).subspan(pos * d_, d_);
  }

  bool consistent() const {
    for (const auto& l : layers_) {
      if (l.length != length() || l.keys.size() != l.length * d_ ||
          l.values.size() != l.length * d_) {
        return false;
      }
    }
    return true;
  }

 private:
  std::size_t d_;
  std::vector<LayerCache> layers_;
};

namespace detail {

inline void affine_rows(const double* x, std::size_t rows, std::size_t in,
                        const ComponentTensors& c, std::size_t out_dim, double* out) {
  MutMap(out, rows, out_dim).noalias() =
      ConstMap(x, rows, in) * ConstMap(c.weight.data.data(), in, out_dim);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < out_dim; ++j) out[r * out_dim + j] += c.bias.data[j];
}

}  // namespace detail

// Applies one block to t consecutive tokens starting at `position`, attending
// over the cached keys/values plus the new ones, and appends the new K/V rows.
inline Tensor block_apply(const Tensor& x, const LayerParams& layer, LayerCache& cache,
                          std::size_t position, const ModelConfig& config) {
  const std::size_t dm = config.d(), ff = static_cast<std::size_t>(config.d_ff);
  const std::size_t heads = static_cast<std::size_t>(config.n_heads), dh = config.head_dim();
  if (x.rank() != 2 || x.shape[1] != dm) {
    throw DimensionError("block_apply: input " + to_string(x.shape) + ", d_model " +
                         std::to_string(dm));
  }
  if (cache.length != position) {
    throw DimensionError("block_apply: cache holds " + std::to_string(cache.length) +
                         " positions but position is " + std::to_string(position));
  }
  const std::size_t t = x.shape[0];
  std::vector<double> a(t * dm), q(t * dm), k(t * dm), v(t * dm);
  kernels::layer_norm(x.data.data(), layer.ln_attn->weight.data.data(),
                      layer.ln_attn->bias.data.data(), kLayerNormEps, t, dm, a.data());
  detail::affine_rows(a.data(), t, dm, *layer.w_q, dm, q.data());
  detail::affine_rows(a.data(), t, dm, *layer.w_k, dm, k.data());
  detail::affine_rows(a.data(), t, dm, *layer.w_v, dm, v.data());
  cache.keys.insert(cache.keys.end(), k.begin(), k.end());
  cache.values.insert(cache.values.end(), v.begin(), v.end());
  cache.length += t;

  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> y(t * dm, 0.0);
  std::vector<double> scores;
  for (std::size_t i = 0; i < t; ++i) {
    const std::size_t visible = position + i + 1;
    scores.resize(visible);
    for (std::size_t h = 0; h < heads; ++h) {
      const double* qi = q.data() + i * dm + h * dh;
      for (std::size_t j = 0; j < visible; ++j) {
        const double* kj = cache.keys.data() + j * dm + h * dh;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        scores[j] = s * inv;
      }
      kernels::softmax_row(scores.data(), visible);
      double* yi = y.data() + i * dm + h * dh;
      for (std::size_t j = 0; j < visible; ++j) {
        const double* vj = cache.values.data() + j * dm + h * dh;
        for (std::size_t c = 0; c < dh; ++c) yi[c] += scores[j] * vj[c];
      }
    }
  }

  std::vector<double> mid(t * dm);
  detail::affine_rows(y.data(), t, dm, *layer.w_o, dm, mid.data());
  for (std::size_t i = 0; i < mid.size(); ++i) mid[i] += x.data[i];

  std::vector<double> n2(t * dm), up(t * ff), down(t * dm);
  kernels::layer_norm(mid.data(), layer.ln_ffn->weight.data.data(), layer.ln_ffn->bias.data.data(),
                      kLayerNormEps, t, dm, n2.data());
  detail::affine_rows(n2.data(), t, dm, *layer.ffn_up, ff, up.data());
  for (double& u : up) u = kernels::gelu(u);
  detail::affine_rows(up.data(), t, ff, *layer.ffn_down, dm, down.data());
  for (std::size_t i = 0; i < down.size(); ++i) down[i] += mid[i];

  Tensor out({t, dm});
  kernels::layer_norm(down.data(), nullptr, nullptr, kLayerNormEps, t, dm, out.data.data());
  detail::check_finite(out.data, "block_apply");
  return out;
}

// Runs one token at position cache.length() with the given params for ALL of
// this position's computation, including the K/V rows it leaves in the cache.
// Returns the next-token logits [vocab].
inline Tensor forward_step(int token, KVCache& cache, const ParamView& params) {
  const ModelConfig& cfg = params.config();
  const std::size_t dm = cfg.d(), pos = cache.length();
  if (cache.n_layers() != cfg.layers() || cache.d_model() != dm) {
    throw DimensionError("forward_step: cache was built for a different config");
  }
  if (pos >= static_cast<std::size_t>(cfg.max_seq_len)) {
    throw IndexError("forward_step: position " + std::to_string(pos) + " reaches max_seq_len " +
                     std::to_string(cfg.max_seq_len));
  }
  if (token < 0 || token >= cfg.vocab_size) {
    throw IndexError("forward_step: token " + std::to_string(token) + " outside vocab of " +
                     std::to_string(cfg.vocab_size));
  }
  const auto& emb = params.get(ComponentId::global(ComponentKind::EMBED)).weight;
  const auto& pemb = params.get(ComponentId::global(ComponentKind::POS_EMBED)).weight;
  Tensor x({1, dm});
  for (std::size_t j = 0; j < dm; ++j) {
    x.data[j] = emb.data[static_cast<std::size_t>(token) * dm + j] + pemb.data[pos * dm + j];
  }
  for (int l = 0; l < cfg.n_layers; ++l) {
    x = block_apply(x, params.layer(l), cache.layer(static_cast<std::size_t>(l)), pos, cfg);
  }
  const auto& fln = params.get(ComponentId::global(ComponentKind::FINAL_LN));
  std::vector<double> h(dm);
  kernels::layer_norm(x.data.data(), fln.weight.data.data(), fln.bias.data.data(), kLayerNormEps,
                      1, dm, h.data());
  const auto& ub = params.get(ComponentId::global(ComponentKind::UNEMBED)).bias;
  const Tensor& uw = params.unembed_weight();
  Tensor logits({cfg.vocab()});
  detail::MutMap(logits.data.data(), 1, cfg.vocab()).noalias() =
      detail::ConstMap(h.data(), 1, dm) * detail::ConstMap(uw.data.data(), cfg.vocab(), dm).transpose();
  for (std::size_t j = 0; j < cfg.vocab(); ++j) logits.data[j] += ub.data[j];
  detail::check_finite(logits.data, "forward_step");
  return logits;
}

inline Tensor forward_step(int token, KVCache& cache, const ModelParams& params) {
  return forward_step(token, cache, ParamView(params));
}

// Tape handles for every weight/bias of a ModelParams.
class ParamVars {
 public:
  ParamVars(Tape& tape, const ModelParams& params, bool requires_grad)
      : params_(&params), weights_(params.slot_count()), biases_(params.slot_count()) {
    for (std::size_t s = 0; s < params.slot_count(); ++s) {
      const auto& c = params.slot(s);
      if (!c.weight.empty()) weights_[s] = tape.param(c.weight, requires_grad);
      if (!c.bias.empty()) biases_[s] = tape.param(c.bias, requires_grad);
    }
  }

  const ModelParams& params() const { return *params_; }
  Var weight(ComponentId c) const { return weights_[params_->config().slot(c)]; }
  Var bias(ComponentId c) const { return biases_[params_->config().slot(c)]; }
  Var weight_slot(std::size_t s) const { return weights_[s]; }
  Var bias_slot(std::size_t s) const { return biases_[s]; }
  Var unembed_weight() const {
    return params_->config().tie_embeddings ? weight(ComponentId::global(ComponentKind::EMBED))
                                            : weight(ComponentId::global(ComponentKind::UNEMBED));
  }

 private:
  const ModelParams* params_;
  std::vector<Var> weights_;
  std::vector<Var> biases_;
};

// Full-sequence forward on a tape. tokens holds batch * seq_len ids laid out
// sequence by sequence; returns logits [batch * seq_len x vocab].
inline Var forward_logits(const ParamVars& pv, std::span<const int> tokens, std::size_t seq_len) {
  const ModelConfig& cfg = pv.params().config();
  if (seq_len == 0 || tokens.size() % seq_len != 0) {
    throw DimensionError("forward_logits: token count not a multiple of seq_len");
  }
  if (seq_len > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw IndexError("forward_logits: sequence of " + std::to_string(seq_len) +
                     " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  using K = ComponentKind;
  auto G = [](K k) { return ComponentId::global(k); };
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i % seq_len);
  Var x = add(embedding_lookup(pv.weight(G(K::EMBED)), tokens),
              embedding_lookup(pv.weight(G(K::POS_EMBED)), positions));
  const std::size_t heads = static_cast<std::size_t>(cfg.n_heads);
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto C = [l](K k) { return ComponentId::at(l, k); };
    auto linear = [&](Var in, K k) {
      return add_bias(matmul(in, pv.weight(C(k))), pv.bias(C(k)));
    };
    Var a = layer_norm(x, pv.weight(C(K::LN_ATTN)), pv.bias(C(K::LN_ATTN)), kLayerNormEps);
    Var att = causal_attention(linear(a, K::W_Q), linear(a, K::W_K), linear(a, K::W_V), heads,
                               seq_len);
    Var mid = add(x, linear(att, K::W_O));
    Var n2 = layer_norm(mid, pv.weight(C(K::LN_FFN)), pv.bias(C(K::LN_FFN)), kLayerNormEps);
    Var f = linear(gelu(linear(n2, K::FFN_UP)), K::FFN_DOWN);
    x = layer_norm(add(mid, f), kLayerNormEps);
  }
  Var h = layer_norm(x, pv.weight(G(K::FINAL_LN)), pv.bias(G(K::FINAL_LN)), kLayerNormEps);
  return add_bias(matmul_nt(h, pv.unembed_weight()), pv.bias(G(K::UNEMBED)));
}

// Logits [t x vocab] for a single sequence.
inline Tensor forward_full(std::span<const int> tokens, const ModelParams& params) {
  if (tokens.empty()) throw DimensionError("forward_full: empty token sequence");
  for (int tok : tokens) {
    if (tok < 0 || tok >= params.config().vocab_size) {
      throw IndexError("forward_full: token " + std::to_string(tok) + " outside vocab");
    }
  }
  Tape tape;
  ParamVars pv(tape, params, false);
  Var logits = forward_logits(pv, tokens, tokens.size());
  auto v = logits.value();
  return Tensor(logits.shape(), std::vector<double>(v.begin(), v.end()));
}

}  // namespace graftlab
