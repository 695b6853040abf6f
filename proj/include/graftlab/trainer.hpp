#pragma once

// Next-token finetuning with AdamW, packed rows and validation-based selection.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "graftlab/datagen.hpp"
#include "graftlab/error.hpp"
#include "graftlab/model.hpp"
#include "graftlab/random.hpp"
#include "graftlab/tensor.hpp"
#include "graftlab/util.hpp"
#include "json.hpp"

namespace graftlab {

struct TrainConfig {
  double learning_rate = 3e-3;
  double weight_decay = 0.01;
  int epochs = 30;
  int batch_size = 8;
  double split_fraction = 0.8;  // share of documents used for training
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int seq_len = 0;  // 0 means the model's max_seq_len

  void validate() const {
    if (!(split_fraction > 0.0 && split_fraction < 1.0)) throw ConfigError("split_fraction must lie in (0, 1)");
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("bad learning_rate");
    if (!(weight_decay >= 0.0)) throw ConfigError("bad weight_decay");
    if (seq_len < 0) throw ConfigError("seq_len must be non-negative");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay},
       {"epochs", c.epochs},               {"batch_size", c.batch_size},
       {"split_fraction", c.split_fraction}, {"seed", c.seed},
       {"adam_beta1", c.adam_beta1},       {"adam_beta2", c.adam_beta2},
       {"adam_eps", c.adam_eps},           {"seq_len", c.seq_len}};
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamState {
  std::vector<std::vector<double>> m;  // per tensor, weights then biases by slot
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

// One update of a flat parameter block, step t >= 1.
inline void adamw_update(std::span<double> p, std::span<const double> g, std::span<double> m,
                         std::span<double> v, std::uint64_t t, double lr, const TrainConfig& cfg) {
  if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size()) {
    throw DimensionError("adamw_update: block sizes differ");
  }
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] *= decay;
    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
    p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
  }
}

inline std::vector<std::vector<double>*> param_blocks(ModelParams& p) {
  std::vector<std::vector<double>*> out;
  for (std::size_t s = 0; s < p.slot_count(); ++s) out.push_back(&p.slot(s).weight.data);
  for (std::size_t s = 0; s < p.slot_count(); ++s) out.push_back(&p.slot(s).bias.data);
  return out;
}

// grads shares the layout of params. lr is the scheduled rate for this step.
inline void adamw_step(ModelParams& params, const ModelParams& grads, AdamState& state,
                       const TrainConfig& cfg, double lr) {
  if (!(params.config() == grads.config())) throw DimensionError("adamw_step: gradient shapes differ");
  auto pb = param_blocks(params);
  auto gb = param_blocks(const_cast<ModelParams&>(grads));
  if (state.m.empty()) {
    for (auto* b : pb) {
      state.m.emplace_back(b->size(), 0.0);
      state.v.emplace_back(b->size(), 0.0);
    }
  }
  if (state.m.size() != pb.size()) throw DimensionError("adamw_step: optimizer state does not match params");
  ++state.step;
  for (std::size_t i = 0; i < pb.size(); ++i) {
    adamw_update(*pb[i], *gb[i], state.m[i], state.v[i], state.step, lr, cfg);
  }
}

// ---------------------------------------------------------------------------
// Batching

// Documents joined with end-of-document tokens and cut into rows of at most
// seq_len + 1 tokens; consecutive rows share one boundary token. A short tail
// row is kept if it holds at least one prediction.
inline std::vector<std::vector<int>> pack_rows(const std::vector<std::vector<int>>& docs, int eos,
                                               std::size_t seq_len) {
  std::vector<int> stream;
  for (const auto& d : docs) {
    const std::size_t n = std::min(d.size(), seq_len);
    stream.insert(stream.end(), d.begin(), d.begin() + static_cast<std::ptrdiff_t>(n));
    stream.push_back(eos);
  }
  std::vector<std::vector<int>> rows;
  for (std::size_t start = 0; start + 1 < stream.size(); start += seq_len) {
    const std::size_t end = std::min(stream.size(), start + seq_len + 1);
    rows.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(start),
                      stream.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return rows;
}

// Summed token loss of one row; adds its gradient into grad when given.
inline double row_loss(const ModelParams& params, const std::vector<int>& row, ModelParams* grad) {
  const std::size_t t = row.size() - 1;
  std::span<const int> inputs(row.data(), t);
  std::span<const int> targets(row.data() + 1, t);
  Tape tape;
  ParamVars pv(tape, params, grad != nullptr);
  Var loss = cross_entropy(forward_logits(pv, inputs, t), targets);
  const double value = loss.item() * static_cast<double>(t);
  if (grad) {
    tape.backward(scale(loss, static_cast<double>(t)));
    for (std::size_t s = 0; s < params.slot_count(); ++s) {
      for (auto [var, dst] : {std::pair{pv.weight_slot(s), &grad->slot(s).weight.data},
                              std::pair{pv.bias_slot(s), &grad->slot(s).bias.data}}) {
        if (!var.attached()) continue;
        auto g = var.grad();
        for (std::size_t i = 0; i < g.size(); ++i) (*dst)[i] += g[i];
      }
    }
  }
  return value;
}

struct BatchResult {
  double loss_sum = 0.0;
  std::size_t tokens = 0;
};

// Per-row work fans out over threads; sums run in row order so the result
// does not depend on the thread count.
inline BatchResult batch_loss(const ModelParams& params, std::span<const std::vector<int>> rows,
                              ModelParams* grad) {
  std::vector<double> losses(rows.size());
  std::vector<std::optional<ModelParams>> grads(rows.size());
  parallel_for(rows.size(), [&](std::size_t i) {
    if (grad) grads[i].emplace(params.config());
    losses[i] = row_loss(params, rows[i], grad ? &*grads[i] : nullptr);
  });
  BatchResult r;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    r.loss_sum += losses[i];
    r.tokens += rows[i].size() - 1;
    if (!grad) continue;
    for (std::size_t s = 0; s < params.slot_count(); ++s) {
      auto& dw = grad->slot(s).weight.data;
      auto& db = grad->slot(s).bias.data;
      const auto& sw = grads[i]->slot(s).weight.data;
      const auto& sb = grads[i]->slot(s).bias.data;
      for (std::size_t k = 0; k < dw.size(); ++k) dw[k] += sw[k];
      for (std::size_t k = 0; k < db.size(); ++k) db[k] += sb[k];
    }
  }
  return r;
}

inline double mean_loss(const ModelParams& params, const std::vector<std::vector<int>>& rows) {
  auto r = batch_loss(params, rows, nullptr);
  return r.tokens ? r.loss_sum / static_cast<double>(r.tokens) : 0.0;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  double learning_rate = 0.0;  // rate used by the last step of the epoch
  double seconds = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochStats> history;
  int best_epoch = 0;  // 0 when no epoch ran
  double initial_val_loss = 0.0;
  double best_val_loss = 0.0;
};

inline void write_history_csv(std::ostream& out, const std::vector<EpochStats>& history) {
  out << "epoch,train_loss,val_loss\n";
  out.precision(17);
  for (const auto& h : history) out << h.epoch << ',' << h.train_loss << ',' << h.val_loss << '\n';
}

using EpochCallback = std::function<void(const EpochStats&)>;

inline TrainResult train(const std::vector<std::vector<int>>& docs, int eos, const ModelParams& base,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (docs.empty()) throw DataError("empty training corpus");
  if (docs.size() < 2) throw DataError("need at least two documents for a train/validation split");
  const ModelConfig& mc = base.config();
  const std::size_t seq_len =
      static_cast<std::size_t>(cfg.seq_len > 0 ? std::min(cfg.seq_len, mc.max_seq_len) : mc.max_seq_len);

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(docs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::size_t n_train = static_cast<std::size_t>(std::llround(cfg.split_fraction * static_cast<double>(docs.size())));
  n_train = std::clamp<std::size_t>(n_train, 1, docs.size() - 1);
  std::vector<std::vector<int>> train_docs, val_docs;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_train ? train_docs : val_docs).push_back(docs[order[i]]);
  const auto val_rows = pack_rows(val_docs, eos, seq_len);

  TrainResult result{base, {}, 0, 0.0, 0.0};
  try {
    result.initial_val_loss = mean_loss(base, val_rows);
  } catch (const NumericError& e) {
    throw DivergenceError(std::string("initial validation loss is not finite: ") + e.what());
  }
  result.best_val_loss = result.initial_val_loss;
  if (cfg.epochs == 0) return result;

  const std::size_t batch = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t steps_per_epoch = (pack_rows(train_docs, eos, seq_len).size() + batch - 1) / batch;
  const double total_steps = static_cast<double>(steps_per_epoch) * cfg.epochs;

  ModelParams params = base;
  AdamState state;
  std::size_t step = 0;
  std::optional<ModelParams> best;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    rng.shuffle(train_docs);
    const auto rows = pack_rows(train_docs, eos, seq_len);
    double loss_sum = 0.0;
    std::size_t tokens = 0;
    double lr = cfg.learning_rate;
    for (std::size_t b = 0; b < rows.size(); b += batch) {
      std::span<const std::vector<int>> chunk(rows.data() + b, std::min(batch, rows.size() - b));
      ModelParams grad(mc);
      BatchResult br;
      try {
        br = batch_loss(params, chunk, &grad);
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + " step " +
                              std::to_string(step) + ": " + e.what());
      }
      const double inv = 1.0 / static_cast<double>(br.tokens);
      for (auto* blk : param_blocks(grad))
        for (double& g : *blk) g *= inv;
      lr = cfg.learning_rate * std::max(0.0, 1.0 - static_cast<double>(step) / total_steps);
      adamw_step(params, grad, state, cfg, lr);
      ++step;
      loss_sum += br.loss_sum;
      tokens += br.tokens;
    }
    EpochStats st;
    st.epoch = epoch;
    st.train_loss = tokens ? loss_sum / static_cast<double>(tokens) : 0.0;
    try {
      st.val_loss = mean_loss(params, val_rows);
    } catch (const NumericError& e) {
      throw DivergenceError("validation loss is not finite after epoch " + std::to_string(epoch) + ": " + e.what());
    }
    if (!std::isfinite(st.val_loss) || !std::isfinite(st.train_loss)) {
      throw DivergenceError("loss is not finite after epoch " + std::to_string(epoch) +
                            " (train " + std::to_string(st.train_loss) + ", val " +
                            std::to_string(st.val_loss) + ")");
    }
    st.learning_rate = lr;
    st.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(st);
    if (!best || st.val_loss < result.best_val_loss) {
      best = params;
      result.best_val_loss = st.val_loss;
      result.best_epoch = epoch;
    }
    if (on_epoch) on_epoch(st);
  }
  result.params = std::move(*best);
  return result;
}

inline std::vector<std::vector<int>> encode_corpus(const std::vector<std::string>& corpus, const Tokenizer& tok) {
  std::vector<std::vector<int>> docs;
  docs.reserve(corpus.size());
  for (const auto& d : corpus) docs.push_back(tok.encode(d));
  return docs;
}

inline TrainResult train(const std::vector<std::string>& corpus, const Tokenizer& tok, const ModelParams& base,
                         const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  if (static_cast<std::size_t>(base.config().vocab_size) != tok.size()) {
    throw ConfigError("model vocab " + std::to_string(base.config().vocab_size) + " does not match tokenizer size " +
                      std::to_string(tok.size()));
  }
  return train(encode_corpus(corpus, tok), Tokenizer::kEos, base, cfg, on_epoch);
}

}  // namespace graftlab
