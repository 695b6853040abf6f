// Acceptance run: prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails. Progress goes to stderr.
//
//   acceptance --out DIR [--seed N] [--only 1,2,6] [--epochs N]

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "fd_oracle.hpp"
#include "graftlab/graftlab.hpp"

using namespace graftlab;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string sci(double v) {
  std::ostringstream o;
  o.precision(2);
  o << std::scientific << v;
  return o.str();
}

struct Verdict {
  int id;
  bool pass;
  std::string text;
};

std::vector<Verdict> verdicts;

void report(int id, bool pass, const std::string& text) {
  verdicts.push_back({id, pass, text});
  std::cout << (pass ? "PASS" : "FAIL") << " criterion " << id << ": " << text << std::endl;
}

Tensor rnd(Shape s, std::mt19937_64& rng) {
  auto n = numel(s);
  return Tensor(std::move(s), fdtest::random_values(n, rng));
}

Var weighted_sum(Tape& t, Var y) {
  std::vector<double> w(numel(y.shape()));
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.7 * static_cast<double>(i) + 0.3);
  return sum(mul(y, t.constant(Tensor(y.shape(), w))));
}

ModelParams noisy(const ModelConfig& c, std::uint64_t seed, double std) {
  ModelParams p = init_params(c, seed);
  std::mt19937_64 rng(seed * 31 + 7);
  std::normal_distribution<double> n(0.0, std);
  for (std::size_t s = 0; s < p.slot_count(); ++s) {
    for (double& w : p.slot(s).weight.data) w += n(rng);
    for (double& b : p.slot(s).bias.data) b += n(rng);
  }
  return p;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = a.size() == b.size() ? 0.0 : INFINITY;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::span<const double> last_row(const Tensor& t) {
  const std::size_t v = t.shape[1];
  return std::span<const double>(t.data).subspan((t.shape[0] - 1) * v, v);
}

// ---------------------------------------------------------------------------
// 1. Gradients

void criterion_1() {
  auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  using Fn = std::function<Var(Tape&, std::vector<Var>&)>;
  std::vector<int> ids{2, 0, 2, 4}, targets{0, 3, 10, 7, 5};
  std::vector<std::tuple<std::string, std::vector<Tensor>, Fn>> ops = {
      {"matmul", {rnd({3, 4}, rng), rnd({4, 2}, rng)},
       [](Tape& t, std::vector<Var>& v) { return weighted_sum(t, matmul(v[0], v[1])); }},
      {"matmul_nt", {rnd({3, 4}, rng), rnd({5, 4}, rng)},
       [](Tape& t, std::vector<Var>& v) { return weighted_sum(t, matmul_nt(v[0], v[1])); }},
      {"add", {rnd({2, 3}, rng), rnd({2, 3}, rng)},
       [](Tape& t, std::vector<Var>& v) { return weighted_sum(t, add(v[0], v[1])); }},
      {"add_bias", {rnd({4, 3}, rng), rnd({3}, rng)},
       [](Tape& t, std::vector<Var>& v) { return weighted_sum(t, add_bias(v[0], v[1])); }},
      {"scale", {rnd({5}, rng)}, [](Tape& t, std::vector<Var>& v) { return weighted_sum(t, scale(v[0], -1.7)); }},
      {"mul", {rnd({2, 3}, rng), rnd({2, 3}, rng)},
       [](Tape& t, std::vector<Var>& v) { return weighted_sum(t, mul(v[0], v[1])); }},
      {"sum", {rnd({2, 3}, rng)}, [](Tape&, std::vector<Var>& v) { return sum(v[0]); }},
      {"gelu", {rnd({2, 6}, rng)}, [](Tape& t, std::vector<Var>& v) { return weighted_sum(t, gelu(v[0])); }},
      {"layer_norm", {rnd({2, 8}, rng), rnd({8}, rng), rnd({8}, rng)},
       [](Tape& t, std::vector<Var>& v) { return weighted_sum(t, layer_norm(v[0], v[1], v[2], 1e-5)); }},
      {"layer_norm (no affine)", {rnd({3, 8}, rng)},
       [](Tape& t, std::vector<Var>& v) { return weighted_sum(t, layer_norm(v[0], 1e-5)); }},
      {"softmax", {rnd({3, 5}, rng)}, [](Tape& t, std::vector<Var>& v) { return weighted_sum(t, softmax(v[0])); }},
      {"cross_entropy", {rnd({5, 11}, rng)}, [&](Tape&, std::vector<Var>& v) { return cross_entropy(v[0], targets); }},
      {"embedding_lookup", {rnd({5, 3}, rng)},
       [&](Tape& t, std::vector<Var>& v) { return weighted_sum(t, embedding_lookup(v[0], ids)); }},
      {"transpose", {rnd({3, 4}, rng)}, [](Tape& t, std::vector<Var>& v) { return weighted_sum(t, transpose(v[0])); }},
      {"reshape", {rnd({3, 4}, rng)},
       [](Tape& t, std::vector<Var>& v) { return weighted_sum(t, reshape(v[0], {2, 6})); }},
      {"causal_attention", {rnd({6, 4}, rng), rnd({6, 4}, rng), rnd({6, 4}, rng)},
       [](Tape& t, std::vector<Var>& v) { return weighted_sum(t, causal_attention(v[0], v[1], v[2], 2, 3)); }},
  };
  double worst_op = 0.0;
  std::string worst_name;
  for (auto& [name, inputs, fn] : ops) {
    double e = fdtest::max_grad_error(inputs, fn);
    if (e > worst_op) worst_op = e, worst_name = name;
  }

  // Full one-layer model, every parameter coordinate.
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = 13;
  c.max_seq_len = 6;
  ModelParams p = noisy(c, 27, 0.3);
  std::uniform_int_distribution<int> u(0, c.vocab_size - 1);
  std::vector<int> toks(10), tgts(10);
  for (int& x : toks) x = u(rng);
  for (int& x : tgts) x = u(rng);
  ModelParams grads(c);
  {
    Tape tape;
    ParamVars pv(tape, p, true);
    Var loss = cross_entropy(forward_logits(pv, toks, 5), tgts);
    tape.backward(loss);
    for (std::size_t s = 0; s < p.slot_count(); ++s) {
      if (Var w = pv.weight_slot(s); w.attached()) std::copy(w.grad().begin(), w.grad().end(), grads.slot(s).weight.data.begin());
      if (Var b = pv.bias_slot(s); b.attached()) std::copy(b.grad().begin(), b.grad().end(), grads.slot(s).bias.data.begin());
    }
  }
  auto loss_at = [&]() {
    Tape tape;
    ParamVars pv(tape, p, false);
    return cross_entropy(forward_logits(pv, toks, 5), tgts).item();
  };
  double worst_model = 0.0;
  const double h = 1e-5;
  std::size_t coords = 0;
  for (std::size_t s = 0; s < p.slot_count(); ++s) {
    for (bool w : {true, false}) {
      Tensor& t = w ? p.slot(s).weight : p.slot(s).bias;
      const Tensor& g = w ? grads.slot(s).weight : grads.slot(s).bias;
      for (std::size_t j = 0; j < t.size(); ++j, ++coords) {
        const double orig = t.data[j];
        t.data[j] = orig + h;
        const double up = loss_at();
        t.data[j] = orig - h;
        const double dn = loss_at();
        t.data[j] = orig;
        worst_model = std::max(worst_model, fdtest::rel_err(g.data[j], (up - dn) / (2 * h)));
      }
    }
  }
  const double secs = since(t0);
  report(1, worst_op < 1e-4 && worst_model < 1e-3 && secs < 60.0,
         "gradient check: worst op error " + sci(worst_op) + " (" + worst_name + ", limit 1e-4) over " +
             std::to_string(ops.size()) + " ops; full 1-layer model " + sci(worst_model) + " over " +
             std::to_string(coords) + " parameters (limit 1e-3); " + fmt_fixed(secs, 1) + "s (limit 60s)");
}

// ---------------------------------------------------------------------------
// 2. Cache consistency

void criterion_2(const ModelParams& trained) {
  const ModelConfig& c = trained.config();
  std::mt19937_64 rng(202);
  std::uniform_int_distribution<int> tok(0, c.vocab_size - 1);
  std::uniform_int_distribution<std::size_t> len(1, 32);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> t(len(rng));
    for (int& x : t) x = tok(rng);
    Tensor full = forward_full(t, trained);
    KVCache cache(c);
    for (std::size_t i = 0; i < t.size(); ++i) {
      Tensor step = forward_step(t[i], cache, trained);
      worst = std::max(worst, max_abs_diff(step.data, std::span<const double>(full.data).subspan(i * c.vocab(), c.vocab())));
    }
  }
  report(2, worst < 1e-9, "incremental vs full forward on 50 random prompts (length 1..32, trained model): max |logit diff| " +
                              sci(worst) + " (limit 1e-9)");
}

// ---------------------------------------------------------------------------
// 3. Graft identity

void criterion_3(const WeightRegistry& reg, const std::vector<const std::vector<AnnotatedPrompt>*>& sets) {
  double worst = 0.0;
  std::size_t n = 0;
  for (const auto* prompts : sets) {
    for (const auto& p : *prompts) {
      PromptAnnotation ann{p.length(), p.fe_span};
      for (const std::string name : {"PRE", "SFT"}) {
        auto got = run_grafted(p.token_ids, build_mask(position_scheme(name), ann, reg), reg);
        auto want = forward_full(p.token_ids, reg.at(name));
        worst = std::max(worst, max_abs_diff(got.logits.back().data, last_row(want)));
      }
      ++n;
    }
  }
  report(3, worst < 1e-9, "all-PRE and all-SFT masks vs plain forward on " + std::to_string(n) +
                              " test prompts: max |logit diff| " + sci(worst) + " (limit 1e-9)");
}

// ---------------------------------------------------------------------------
// 4. Frankenmodel oracle

void criterion_4(const WeightRegistry& reg, const std::vector<AnnotatedPrompt>& prompts) {
  const ModelConfig& c = reg.config();
  const auto all = expand_group(ComponentGroup::ALL, LayerRange::all(), c);
  std::mt19937_64 rng(404);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::set<ComponentId> donor;
    for (const auto& id : all)
      if (rng() % 2) donor.insert(id);
    auto merged = static_merge(reg.at("PRE"), reg.at("SFT"), donor);
    for (const auto& p : prompts) {
      GraftMask m(p.length(), c.slot_count(), 0);
      for (std::size_t pos = 0; pos < p.length(); ++pos)
        for (const auto& id : donor) m.set(pos, c.slot(id), 1);
      auto got = grafted_next_token_dist(p.token_ids, m, reg);
      auto logits = forward_full(p.token_ids, merged);
      auto row = last_row(logits);
      auto want = softmax_vector(std::vector<double>(row.begin(), row.end()));
      worst = std::max(worst, max_abs_diff(got, want));
    }
  }
  report(4, worst < 1e-9, "20 random position-independent masks x " + std::to_string(prompts.size()) +
                              " prompts, dynamic graft vs static merge: max |prob diff| " + sci(worst) +
                              " (limit 1e-9)");
}

// ---------------------------------------------------------------------------
// 5. Locality

void criterion_5(const WeightRegistry& reg, const std::vector<AnnotatedPrompt>& prompts) {
  const ModelConfig& c = reg.config();
  std::size_t mismatches = 0, checked = 0;
  bool last_changed = true;
  for (const auto& p : prompts) {
    PromptAnnotation ann{p.length(), p.fe_span};
    auto base = run_grafted(p.token_ids, build_mask(position_scheme("PRE"), ann, reg), reg, true);
    auto lt = run_grafted(p.token_ids, build_mask(position_scheme("LT"), ann, reg), reg, true);
    const std::size_t last = p.length() - 1;
    for (std::size_t pos = 0; pos < last; ++pos) {
      ++checked;
      bool same = base.logits[pos].data == lt.logits[pos].data;
      for (std::size_t l = 0; l < static_cast<std::size_t>(c.n_layers); ++l) {
        auto ka = base.cache.key(l, pos), kb = lt.cache.key(l, pos);
        auto va = base.cache.value(l, pos), vb = lt.cache.value(l, pos);
        same = same && std::equal(ka.begin(), ka.end(), kb.begin(), kb.end()) &&
               std::equal(va.begin(), va.end(), vb.begin(), vb.end());
      }
      mismatches += !same;
    }
    last_changed = last_changed && base.logits[last].data != lt.logits[last].data;
  }
  report(5, mismatches == 0 && last_changed,
         "LT graft vs all-PRE on " + std::to_string(prompts.size()) + " prompts: " + std::to_string(mismatches) +
             " of " + std::to_string(checked) + " earlier positions differ in K/V or logits (required 0, bitwise)" +
             (last_changed ? "" : "; last-position logits unexpectedly unchanged"));
}

// ---------------------------------------------------------------------------
// 6. Static-merge algebra

void criterion_6(const WeightRegistry& reg) {
  const ModelConfig& c = reg.config();
  const auto all = expand_group(ComponentGroup::ALL, LayerRange::all(), c);
  std::mt19937_64 rng(606);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    std::set<ComponentId> donor;
    for (const auto& id : all)
      if (rng() % 2) donor.insert(id);
    auto a = static_merge(reg.at("PRE"), reg.at("SFT"), donor);
    auto b = task_vector_merge(reg.at("PRE"), reg.at("SFT"), donor);
    for (std::size_t s = 0; s < c.slot_count(); ++s) {
      worst = std::max(worst, max_abs_diff(a.slot(s).weight.data, b.slot(s).weight.data));
      worst = std::max(worst, max_abs_diff(a.slot(s).bias.data, b.slot(s).bias.data));
    }
  }
  report(6, worst < 1e-12, "mask-select vs task-vector merge on 20 random component sets: max |param diff| " +
                               sci(worst) + " (limit 1e-12)");
}

// ---------------------------------------------------------------------------
// 7-10. Reference pipeline

double acc(const SuiteResults& r, const std::string& scheme) {
  return find_summary(r, scheme).topk_acc;
}

void criterion_7(const ExperimentOutcome& o) {
  const auto& h = o.headline;
  const double sft = acc(h, "SFT"), pre = acc(h, "PRE"), felt = acc(h, "FE+LT"), comp = acc(h, "(FE+LT)^C");
  const double secs = o.seconds.at("base") + o.seconds.at("sft") + o.seconds.at("position_eval");
  const bool pass = sft >= 0.95 && pre <= 0.05 && felt >= comp + 0.3 && comp <= 0.15 && secs <= 900.0;
  report(7, pass,
         "headline top-5: SFT " + fmt_fixed(sft, 2) + " (>= 0.95), PRE " + fmt_fixed(pre, 2) + " (<= 0.05), FE+LT " +
             fmt_fixed(felt, 2) + " vs (FE+LT)^C " + fmt_fixed(comp, 2) + " (gap >= 0.30, complement <= 0.15); " +
             fmt_fixed(secs, 0) + "s (limit 900s)");
}

void criterion_8(const ExperimentOutcome& o) {
  if (!o.reversal) {
    report(8, false, "reversal suite did not run");
    return;
  }
  const double one = acc(*o.reversal, "PRE"), both = acc(*o.reversal, "SFT");
  const double secs = o.seconds.at("sft") + o.seconds.at("both") + o.seconds.at("reversal_eval");
  report(8, one <= 0.10 && both >= 0.90 && secs <= 900.0,
         "reversed headline top-5: one-direction model " + fmt_fixed(one, 2) + " (<= 0.10), both-direction model " +
             fmt_fixed(both, 2) + " (>= 0.90); " + fmt_fixed(secs, 0) +
             "s for the two finetunes and scoring (limit 900s; shared base training " +
             fmt_fixed(o.seconds.at("base"), 0) + "s)");
}

void criterion_9(const ExperimentOutcome& o) {
  // QA prompts must end on a token that is neither the relation nor a preposition.
  const std::set<std::string> banned{" stars", " movie", " with", " in", " alongside", " and", " of", " to"};
  std::size_t bad = 0;
  for (const auto& p : o.data.qa) bad += banned.count(o.data.tokenizer.token(p.token_ids.back())) > 0;
  const double qa = acc(o.qa, "FE+LT"), hl = acc(o.headline, "FE+LT");
  const double qa_comp = acc(o.qa, "(FE+LT)^C");
  const bool holds = qa >= qa_comp + 0.3;
  report(9, bad == 0 && holds && std::abs(qa - hl) <= 0.1,
         "FE+LT top-5 on QA prompts " + fmt_fixed(qa, 2) + " vs headline " + fmt_fixed(hl, 2) + " (|diff| " +
             fmt_fixed(std::abs(qa - hl), 2) + ", limit 0.10); QA (FE+LT)^C " + fmt_fixed(qa_comp, 2) +
             " (FE+LT must lead it by >= 0.30); " + std::to_string(bad) +
             " QA prompts end on a relation or preposition token");
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), {});
}

void criterion_10(const fs::path& a, const fs::path& b) {
  std::size_t same = 0, total = 0;
  std::string diff;
  for (const char* stem : {"position_headline", "position_qa", "reversal_headline"}) {
    const std::string f = std::string(stem) + ".csv";
    ++total;
    const std::string x = slurp(a / f), y = slurp(b / f);
    if (!x.empty() && x == y) ++same;
    else diff += (diff.empty() ? "" : ", ") + f;
  }
  report(10, same == total, std::to_string(same) + " of " + std::to_string(total) +
                                " CSV reports byte-identical across two end-to-end runs" +
                                (diff.empty() ? "" : " (differ or missing: " + diff + ")"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graftlab acceptance run"};
  std::string out = "acceptance_out";
  std::uint64_t seed = 0;
  std::vector<int> only;
  int epochs = 0;
  app.add_option("--out", out, "Directory for both end-to-end runs")->capture_default_str();
  app.add_option("--seed", seed, "Experiment seed")->capture_default_str();
  app.add_option("--epochs", epochs, "Override base and finetune epochs (smoke runs; thresholds still apply)");
  app.add_option("--only", only, "Run just these criteria (pipeline criteria train a model)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  auto want = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };

  try {
    if (want(1)) criterion_1();
    bool need_pipeline = false;
    for (int id = 2; id <= 10; ++id) need_pipeline = need_pipeline || want(id);
    if (need_pipeline) {
      ExperimentConfig cfg;
      cfg.seed = seed;
      if (epochs > 0) cfg.base_train.epochs = cfg.sft_train.epochs = epochs;
      const bool twice = want(10);
      auto t0 = Clock::now();
      auto log = [&](const std::string& s) { std::cerr << "[" << fmt_fixed(since(t0), 0) << "s] " << s << std::endl; };
      const fs::path run1 = fs::path(out) / "run1", run2 = fs::path(out) / "run2";
      fs::remove_all(run1);
      fs::remove_all(run2);
      ExperimentOutcome o = run_reference_experiment(cfg, run1, log);
      WeightRegistry reg;
      reg.add("PRE", o.pre);
      reg.add("SFT", o.sft);
      if (want(2)) criterion_2(o.sft);
      if (want(3)) criterion_3(reg, {&o.data.headline, &o.data.qa, &o.data.headline_reversed, &o.data.qa_reversed});
      if (want(4)) criterion_4(reg, o.data.headline);
      if (want(5)) criterion_5(reg, o.data.headline);
      if (want(6)) criterion_6(reg);
      if (want(7)) criterion_7(o);
      if (want(8)) criterion_8(o);
      if (want(9)) criterion_9(o);
      if (twice) {
        log("second end-to-end run");
        run_reference_experiment(cfg, run2, log);
        criterion_10(run1, run2);
      }
    }
  } catch (const std::exception& e) {
    std::cout << "FAIL acceptance aborted: " << e.what() << std::endl;
    return 1;
  }
  std::size_t passed = 0;
  for (const auto& v : verdicts) passed += v.pass;
  std::cout << passed << " of " << verdicts.size() << " criteria passed" << std::endl;
  return passed == verdicts.size() ? 0 : 1;
}
