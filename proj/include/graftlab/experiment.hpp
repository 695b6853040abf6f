#pragma once

// The reference toy pipeline: data bundle, base and finetuned training, and
// the position, QA and reversal suites.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "graftlab/checkpoint.hpp"
#include "graftlab/datagen.hpp"
#include "graftlab/eval.hpp"
#include "graftlab/grafting.hpp"
#include "graftlab/trainer.hpp"
#include "json.hpp"

namespace graftlab {

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view label) {
  Fnv1a h;
  h.update_u64(seed);
  h.update(label);
  return h.digest();
}

// ---------------------------------------------------------------------------
// Dataset bundle

struct DatasetBundle {
  std::vector<RelationRecord> records;       // probed relations
  std::vector<RelationRecord> base_records;  // base-training relations, may be empty
  std::vector<std::string> corpus;           // records, one direction
  std::vector<std::string> corpus_both;      // records, both directions
  std::vector<std::string> base_corpus;
  Tokenizer tokenizer;
  std::vector<AnnotatedPrompt> headline, qa, headline_reversed, qa_reversed;
};

inline DatasetBundle build_dataset(std::vector<RelationRecord> records, std::vector<RelationRecord> base_records,
                                   std::uint64_t seed) {
  DatasetBundle b;
  b.records = std::move(records);
  b.base_records = std::move(base_records);
  auto rc = build_reversal_datasets(b.records, derive_seed(seed, "corpus"));
  b.corpus = std::move(rc.one_direction);
  b.corpus_both = std::move(rc.both_direction);
  if (!b.base_records.empty()) b.base_corpus = render_corpus(b.base_records, derive_seed(seed, "base-corpus"));

  std::vector<std::string> vocab_text = b.base_corpus;
  vocab_text.insert(vocab_text.end(), b.corpus_both.begin(), b.corpus_both.end());
  for (const auto& r : b.records) {
    for (auto kind : {TemplateKind::HEADLINE, TemplateKind::QA}) {
      vocab_text.push_back(prompt_text(kind, r.first_actor) + " " + r.second_actor);
      vocab_text.push_back(prompt_text(kind, r.second_actor) + " " + r.first_actor);
    }
  }
  b.tokenizer = build_tokenizer(vocab_text);
  b.headline = render_test_prompts(b.records, TemplateKind::HEADLINE, b.tokenizer);
  b.qa = render_test_prompts(b.records, TemplateKind::QA, b.tokenizer);
  b.headline_reversed = render_test_prompts(b.records, TemplateKind::HEADLINE, b.tokenizer, true);
  b.qa_reversed = render_test_prompts(b.records, TemplateKind::QA, b.tokenizer, true);
  return b;
}

// Manifest as leading '#' lines, which the line readers skip.
inline void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines,
                        const nlohmann::ordered_json& manifest) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  write_manifest_lines(f, manifest);
  for (const auto& l : lines) f << l << '\n';
}

inline void write_prompts(const std::filesystem::path& path, const std::vector<AnnotatedPrompt>& prompts,
                          const nlohmann::ordered_json& manifest = nlohmann::ordered_json::object()) {
  std::vector<std::string> lines;
  for (const auto& p : prompts) lines.push_back(prompt_to_json(p).dump());
  write_lines(path, lines, manifest);
}

inline void write_records(const std::filesystem::path& path, const std::vector<RelationRecord>& records,
                          const nlohmann::ordered_json& manifest = nlohmann::ordered_json::object()) {
  std::vector<std::string> lines;
  for (const auto& r : records) lines.push_back(record_json_line(r));
  write_lines(path, lines, manifest);
}

inline void write_tokenizer(const std::filesystem::path& path, const Tokenizer& tok,
                            const nlohmann::ordered_json& manifest = nlohmann::ordered_json::object()) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  nlohmann::ordered_json j;
  j["manifest"] = manifest;
  j["tokens"] = tok.to_json().at("tokens");
  f << j.dump() << '\n';
}

inline Tokenizer read_tokenizer(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read tokenizer " + path.string());
  try {
    return Tokenizer::from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad tokenizer file " + path.string() + ": " + e.what());
  }
}

// File names inside a dataset directory.
struct DatasetFiles {
  static constexpr const char* kMetadata = "metadata.jsonl";
  static constexpr const char* kBaseMetadata = "base_metadata.jsonl";
  static constexpr const char* kCorpus = "corpus.txt";
  static constexpr const char* kCorpusBoth = "corpus_both.txt";
  static constexpr const char* kBaseCorpus = "base_corpus.txt";
  static constexpr const char* kTokenizer = "tokenizer.json";
  static constexpr const char* kHeadline = "prompts_headline.jsonl";
  static constexpr const char* kQa = "prompts_qa.jsonl";
  static constexpr const char* kHeadlineReversed = "prompts_headline_reversed.jsonl";
  static constexpr const char* kQaReversed = "prompts_qa_reversed.jsonl";
  static constexpr const char* kManifest = "manifest.json";
};

inline void write_dataset(const DatasetBundle& b, const std::filesystem::path& dir,
                          const nlohmann::ordered_json& manifest) {
  std::filesystem::create_directories(dir);
  const auto& m = manifest;
  write_records(dir / DatasetFiles::kMetadata, b.records, m);
  write_lines(dir / DatasetFiles::kCorpus, b.corpus, m);
  write_lines(dir / DatasetFiles::kCorpusBoth, b.corpus_both, m);
  if (!b.base_records.empty()) {
    write_records(dir / DatasetFiles::kBaseMetadata, b.base_records, m);
    write_lines(dir / DatasetFiles::kBaseCorpus, b.base_corpus, m);
  }
  write_tokenizer(dir / DatasetFiles::kTokenizer, b.tokenizer, m);
  write_prompts(dir / DatasetFiles::kHeadline, b.headline, m);
  write_prompts(dir / DatasetFiles::kQa, b.qa, m);
  write_prompts(dir / DatasetFiles::kHeadlineReversed, b.headline_reversed, m);
  write_prompts(dir / DatasetFiles::kQaReversed, b.qa_reversed, m);
  std::ofstream mf(dir / DatasetFiles::kManifest, std::ios::binary);
  mf << manifest.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Reference experiment

inline ModelConfig reference_model_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.n_heads = 4;
  c.d_model = 64;
  c.d_ff = 256;
  c.max_seq_len = 128;
  return c;
}

inline TrainConfig reference_train_config() {
  TrainConfig t;
  t.learning_rate = 3e-3;
  t.weight_decay = 0.01;
  t.epochs = 30;
  t.batch_size = 8;
  return t;
}

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t n_eval = 100;
  std::size_t n_base = 200;
  ModelConfig model = reference_model_config();  // vocab_size is set from the data
  TrainConfig base_train = reference_train_config();
  TrainConfig sft_train = reference_train_config();
  bool reversal = true;
  std::size_t k = 5;
  std::size_t dump_examples = 5;
};

inline nlohmann::ordered_json experiment_manifest(const ExperimentConfig& c) {
  nlohmann::ordered_json m;
  m["experiment"] = "reference";
  m["seed"] = c.seed;
  m["n_eval"] = c.n_eval;
  m["n_base"] = c.n_base;
  m["model"] = nlohmann::json(c.model);
  m["base_train"] = nlohmann::json(c.base_train);
  m["sft_train"] = nlohmann::json(c.sft_train);
  m["k"] = c.k;
  return m;
}

struct ExperimentOutcome {
  DatasetBundle data;
  ModelParams pre, sft;
  std::optional<ModelParams> both;
  TrainResult pre_run, sft_run;
  std::optional<TrainResult> both_run;
  SuiteResults headline, qa;
  std::optional<SuiteResults> reversal;
  nlohmann::ordered_json manifest;
  // Wall-clock seconds per stage: base, sft, both, position_eval, reversal_eval.
  std::map<std::string, double> seconds;
};

using LogFn = std::function<void(const std::string&)>;

inline DatasetBundle reference_dataset(const ExperimentConfig& cfg, const NamePools& pools) {
  auto eval = gen_disjoint_records(cfg.n_eval, derive_seed(cfg.seed, "eval-records"), pools);
  auto base = gen_companion_records(eval, cfg.n_base, derive_seed(cfg.seed, "base-records"), pools);
  return build_dataset(std::move(eval), std::move(base), cfg.seed);
}

// Trains PRE on the base corpus, SFT (one direction) and, when enabled, the
// both-direction model from PRE, then scores the suites. Artifacts go to
// out_dir when it is non-empty.
inline ExperimentOutcome run_reference_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_dir = {},
                                                  const LogFn& log = {}, const NamePools& pools = NamePools::load()) {
  auto say = [&](const std::string& s) {
    if (log) log(s);
  };
  DatasetBundle data = reference_dataset(cfg, pools);
  ModelConfig mc = cfg.model;
  mc.vocab_size = static_cast<int>(data.tokenizer.size());
  mc.validate();
  say("vocab " + std::to_string(mc.vocab_size) + ", base docs " + std::to_string(data.base_corpus.size()) +
      ", sft docs " + std::to_string(data.corpus.size()));

  auto epoch_logger = [&](const std::string& tag) {
    return [&, tag](const EpochStats& s) {
      say(tag + " epoch " + std::to_string(s.epoch) + " train " + fmt_fixed(s.train_loss, 4) + " val " +
          fmt_fixed(s.val_loss, 4) + " (" + fmt_fixed(s.seconds, 1) + "s)");
    };
  };
  const auto& tok = data.tokenizer;
  TrainConfig base_cfg = cfg.base_train, sft_cfg = cfg.sft_train;
  base_cfg.seed = derive_seed(cfg.seed, "train-base");
  sft_cfg.seed = derive_seed(cfg.seed, "train-sft");
  std::map<std::string, double> seconds;
  auto clock = std::chrono::steady_clock::now();
  auto lap = [&](const std::string& stage) {
    auto now = std::chrono::steady_clock::now();
    seconds[stage] = std::chrono::duration<double>(now - clock).count();
    clock = now;
  };
  ModelParams init = init_params(mc, derive_seed(cfg.seed, "init"));
  TrainResult pre_run = train(data.base_corpus, tok, init, base_cfg, epoch_logger("base"));
  lap("base");
  TrainResult sft_run = train(data.corpus, tok, pre_run.params, sft_cfg, epoch_logger("sft"));
  lap("sft");
  std::optional<TrainResult> both_run;
  if (cfg.reversal) {
    TrainConfig both_cfg = sft_cfg;
    both_cfg.seed = derive_seed(cfg.seed, "train-both");
    both_run = train(data.corpus_both, tok, pre_run.params, both_cfg, epoch_logger("both"));
    lap("both");
  }

  ExperimentOutcome out{std::move(data), pre_run.params, sft_run.params, std::nullopt, std::move(pre_run),
                        std::move(sft_run), std::move(both_run), {}, {}, std::nullopt, experiment_manifest(cfg), {}};
  if (out.both_run) out.both = out.both_run->params;
  out.manifest["model"] = nlohmann::json(mc);
  out.manifest["checkpoint_pre"] = params_hash(out.pre);
  out.manifest["checkpoint_sft"] = params_hash(out.sft);
  if (out.both) out.manifest["checkpoint_both"] = params_hash(*out.both);

  WeightRegistry reg;
  reg.add("PRE", out.pre);
  reg.add("SFT", out.sft);
  auto suite = [&](std::string name, TemplateKind kind, std::vector<SchemeSpec> schemes,
                   const WeightRegistry& r, const std::vector<AnnotatedPrompt>& prompts) {
    ExperimentSuite s;
    s.name = std::move(name);
    s.kind = kind;
    s.schemes = std::move(schemes);
    s.registry = &r;
    s.tokenizer = &out.data.tokenizer;
    s.prompts = prompts;
    s.k = cfg.k;
    s.seed = cfg.seed;
    return run_suite(s);
  };
  out.headline = suite("position grafting, headline prompts", TemplateKind::HEADLINE, position_suite(), reg,
                       out.data.headline);
  out.qa = suite("position grafting, QA prompts", TemplateKind::QA, position_suite(), reg, out.data.qa);
  lap("position_eval");
  if (out.both) {
    WeightRegistry rev;
    rev.add("PRE", out.sft);
    rev.add("SFT", *out.both);
    out.reversal = suite("reversal, headline prompts (PRE one direction, SFT both)", TemplateKind::HEADLINE,
                         reversal_suite(), rev, out.data.headline_reversed);
    lap("reversal_eval");
  }
  out.seconds = std::move(seconds);

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_dataset(out.data, out_dir / "data", out.manifest);
    save_checkpoint(out.pre, out_dir / "pre.ckpt", out.manifest);
    save_checkpoint(out.sft, out_dir / "sft.ckpt", out.manifest);
    if (out.both) save_checkpoint(*out.both, out_dir / "both.ckpt", out.manifest);
    auto hist = [&](const std::string& name, const TrainResult& r) {
      std::ofstream f(out_dir / name, std::ios::binary);
      write_history_csv(f, r.history);
    };
    hist("history_pre.csv", out.pre_run);
    hist("history_sft.csv", out.sft_run);
    if (out.both_run) hist("history_both.csv", *out.both_run);
    auto m = out.manifest;
    m["suite"] = "position";
    m["prompts"] = "headline";
    emit_report(out.headline, out_dir, "position_headline", m, cfg.dump_examples);
    m["prompts"] = "qa";
    emit_report(out.qa, out_dir, "position_qa", m, cfg.dump_examples);
    if (out.reversal) {
      m["suite"] = "reversal";
      m["prompts"] = "headline_reversed";
      emit_report(*out.reversal, out_dir, "reversal_headline", m, cfg.dump_examples);
    }
  }
  return out;
}

}  // namespace graftlab
