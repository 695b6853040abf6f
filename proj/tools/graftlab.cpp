// graftlab command-line driver: gen-data, train, graft-eval, report.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "graftlab/graftlab.hpp"

namespace fs = std::filesystem;
using namespace graftlab;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string file_hash(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw DataError("cannot read " + p.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), {});
  Fnv1a h;
  h.update(bytes);
  return h.hex();
}

nlohmann::json read_json_file(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw DataError("cannot read " + p.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad JSON in " + p.string() + ": " + e.what());
  }
}

void require_file(const fs::path& p, const std::string& what) {
  if (!fs::is_regular_file(p)) throw DataError(what + " not found: " + p.string());
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataArgs {
  std::string variant = "fake-real";
  std::size_t n = 100;
  std::size_t base_n = 0;
  std::uint64_t seed = 0;
  bool disjoint = false;
  std::string out;
};

int cmd_gen_data(const GenDataArgs& a) {
  auto variant = parse_variant(a.variant);
  if (!variant) throw UsageError("unknown variant '" + a.variant + "' (fake-real, fake-fake, real-shuffled)");
  if (a.disjoint && *variant != DatasetVariant::FAKE_MOVIES_REAL_ACTORS) {
    throw UsageError("--disjoint only applies to the fake-real variant");
  }
  auto pools = NamePools::load();
  auto records = a.disjoint ? gen_disjoint_records(a.n, derive_seed(a.seed, "eval-records"), pools)
                            : gen_metadata(a.n, *variant, a.seed, pools);
  std::vector<RelationRecord> base;
  if (a.base_n > 0) base = gen_companion_records(records, a.base_n, derive_seed(a.seed, "base-records"), pools);
  auto bundle = build_dataset(std::move(records), std::move(base), a.seed);

  ojson m;
  m["command"] = "gen-data";
  m["variant"] = a.variant;
  m["n"] = a.n;
  m["base_n"] = a.base_n;
  m["disjoint"] = a.disjoint;
  m["seed"] = a.seed;
  write_dataset(bundle, a.out, m);
  std::cout << "records " << bundle.records.size() << ", docs " << bundle.corpus.size() << ", both-direction docs "
            << bundle.corpus_both.size() << ", base records " << bundle.base_records.size() << ", base docs "
            << bundle.base_corpus.size() << ", vocab " << bundle.tokenizer.size() << ", prompts "
            << bundle.headline.size() << " per kind\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string corpus, tokenizer, out, init, model_config, config, history;
  std::optional<int> epochs, batch_size;
  std::optional<double> lr, weight_decay, split;
  std::optional<std::uint64_t> seed;
  std::uint64_t init_seed = 0;
};

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.split_fraction = j.value("split_fraction", c.split_fraction);
    c.seed = j.value("seed", c.seed);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.seq_len = j.value("seq_len", c.seq_len);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
  return c;
}

int cmd_train(const TrainArgs& a) {
  require_file(a.corpus, "corpus");
  require_file(a.tokenizer, "tokenizer");
  if (!a.init.empty() && !a.model_config.empty()) throw UsageError("--init and --model-config are exclusive");
  const Tokenizer tok = read_tokenizer(a.tokenizer);
  const auto corpus = read_lines(a.corpus);
  if (corpus.empty()) throw DataError("corpus " + a.corpus + " has no documents");

  // Precedence: built-in defaults, then --config JSON, then flags.
  TrainConfig tc = reference_train_config();
  if (!a.config.empty()) tc = train_config_from_json(read_json_file(a.config), tc);
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.lr) tc.learning_rate = *a.lr;
  if (a.weight_decay) tc.weight_decay = *a.weight_decay;
  if (a.split) tc.split_fraction = *a.split;
  if (a.seed) tc.seed = *a.seed;
  tc.validate();

  ModelParams base = [&] {
    if (!a.init.empty()) {
      require_file(a.init, "init checkpoint");
      return load_checkpoint(a.init);
    }
    ModelConfig mc = reference_model_config();
    if (!a.model_config.empty()) {
      try {
        nlohmann::json j = mc;
        j.update(read_json_file(a.model_config));
        mc = j.get<ModelConfig>();
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad model config: ") + e.what());
      }
    }
    mc.vocab_size = static_cast<int>(tok.size());
    mc.validate();
    return init_params(mc, a.init_seed);
  }();

  ojson m;
  m["command"] = "train";
  m["corpus_hash"] = file_hash(a.corpus);
  m["tokenizer_hash"] = file_hash(a.tokenizer);
  m["init"] = a.init.empty() ? "fresh" : "checkpoint";
  m["init_seed"] = a.init_seed;
  m["base_checkpoint_hash"] = params_hash(base);
  m["model"] = nlohmann::json(base.config());
  m["train"] = nlohmann::json(tc);

  auto result = train(corpus, tok, base, tc, [](const EpochStats& s) {
    std::cerr << "epoch " << s.epoch << " train " << fmt_fixed(s.train_loss, 4) << " val " << fmt_fixed(s.val_loss, 4)
              << " (" << fmt_fixed(s.seconds, 1) << "s)\n";
  });
  m["best_epoch"] = result.best_epoch;
  m["checkpoint_hash"] = params_hash(result.params);
  if (fs::path(a.out).has_parent_path()) fs::create_directories(fs::path(a.out).parent_path());
  save_checkpoint(result.params, a.out, m);
  const std::string history = a.history.empty() ? a.out + ".history.csv" : a.history;
  std::ofstream h(history, std::ios::binary);
  if (!h) throw DataError("cannot write " + history);
  write_manifest_lines(h, m);
  write_history_csv(h, result.history);
  std::cout << "best epoch " << result.best_epoch << " val " << fmt_fixed(result.best_val_loss, 4) << ", wrote "
            << a.out << " (" << m["checkpoint_hash"].get<std::string>() << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// graft-eval

struct EvalArgs {
  std::vector<std::string> ckpts, schemes;
  std::string suite, prompts, tokenizer, out, name;
  std::size_t k = 5;
  std::size_t dump_examples = 5;
};

std::vector<SchemeSpec> load_scheme_file(const fs::path& p) {
  auto j = read_json_file(p);
  std::vector<SchemeSpec> out;
  if (j.is_array()) {
    for (const auto& e : j) out.push_back(scheme_from_json(e));
  } else {
    out.push_back(scheme_from_json(j));
  }
  return out;
}

int cmd_graft_eval(const EvalArgs& a) {
  if (a.suite.empty() == a.schemes.empty()) throw UsageError("give exactly one of --suite or --scheme");
  std::vector<SchemeSpec> schemes;
  if (a.suite == "position") schemes = position_suite();
  else if (a.suite == "reversal") schemes = reversal_suite();
  else if (a.suite == "hybrid") schemes = hybrid_suite();
  else if (!a.suite.empty()) throw UsageError("unknown suite '" + a.suite + "' (position, reversal, hybrid)");
  for (const auto& f : a.schemes) {
    require_file(f, "scheme file");
    auto more = load_scheme_file(f);
    schemes.insert(schemes.end(), more.begin(), more.end());
  }
  require_file(a.prompts, "prompts file");
  require_file(a.tokenizer, "tokenizer");

  ojson m;
  m["command"] = "graft-eval";
  m["suite"] = a.suite.empty() ? "custom" : a.suite;
  m["k"] = a.k;
  m["prompts_hash"] = file_hash(a.prompts);
  m["tokenizer_hash"] = file_hash(a.tokenizer);
  WeightRegistry reg;
  for (const auto& spec : a.ckpts) {
    auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--ckpt expects NAME=PATH, got '" + spec + "'");
    const std::string name = spec.substr(0, eq), path = spec.substr(eq + 1);
    require_file(path, "checkpoint " + name);
    auto params = load_checkpoint(path);
    m["checkpoint_" + name] = params_hash(params);
    reg.add(name, std::move(params));
  }
  std::vector<std::string> missing;
  for (const auto& src : suite_sources(schemes))
    if (!reg.find(src)) missing.push_back(src);
  if (!missing.empty()) {
    std::string need, have;
    for (const auto& s : suite_sources(schemes)) need += (need.empty() ? "" : ", ") + s;
    for (std::size_t i = 0; i < reg.size(); ++i) have += (i ? ", " : "") + reg.name(i);
    throw ConfigError("schemes need weight sets {" + need + "} but got {" + have + "}");
  }

  const Tokenizer tok = read_tokenizer(a.tokenizer);
  ExperimentSuite suite;
  suite.name = a.name.empty() ? (a.suite.empty() ? "custom" : a.suite) : a.name;
  suite.schemes = schemes;
  suite.registry = &reg;
  suite.tokenizer = &tok;
  suite.prompts = read_prompts(a.prompts);
  suite.k = a.k;
  if (suite.prompts.empty()) throw DataError("no prompts in " + a.prompts);
  auto results = run_suite(suite);
  const std::string stem = a.name.empty() ? suite.name : a.name;
  auto paths = emit_report(results, a.out, stem, m, a.dump_examples);
  for (const auto& s : results.summary) {
    std::cout << s.scheme << ": top-" << a.k << " " << fmt_fixed(s.topk_acc, 3) << ", mean rank "
              << fmt_fixed(s.mean_rank, 2) << '\n';
  }
  std::cout << "wrote " << paths.csv.string() << ", " << paths.svg.string() << ", " << paths.dump.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// report

struct ReportArgs {
  std::vector<std::string> results;
  std::string out;
};

int cmd_report(const ReportArgs& a) {
  fs::create_directories(a.out);
  std::ofstream md(fs::path(a.out) / "summary.md", std::ios::binary);
  if (!md) throw DataError("cannot write summary in " + a.out);
  for (const auto& path : a.results) {
    require_file(path, "results file");
    std::ifstream in(path);
    std::vector<std::string> manifest_lines;
    std::string line;
    while (std::getline(in, line) && !line.empty() && line[0] == '#') manifest_lines.push_back(line);
    in.clear();
    in.seekg(0);
    SuiteResults r;
    r.name = fs::path(path).stem().string();
    r.summary = read_results_csv(in);
    for (const auto& l : manifest_lines) {
      if (l.rfind("# k: ", 0) == 0) r.k = std::stoul(l.substr(5));
    }
    const fs::path svg = fs::path(a.out) / (r.name + ".svg");
    std::ofstream s(svg, std::ios::binary);
    s << "<!--\n# source: " << fs::path(path).filename().string() << "\n# source_hash: " << file_hash(path) << "\n";
    for (const auto& l : manifest_lines) {
      std::string t = l;
      for (std::size_t at; (at = t.find("--")) != std::string::npos;) t.replace(at, 2, "- -");
      s << t << '\n';
    }
    s << "-->\n";
    write_results_svg(s, r, r.name);
    md << "## " << r.name << "\n\n";
    for (const auto& l : manifest_lines) md << "    " << l << '\n';
    md << "\n| scheme | n | top-" << r.k << " accuracy | mean rank |\n|---|---|---|---|\n";
    for (const auto& e : r.summary) {
      md << "| " << e.scheme << " | " << e.n << " | " << fmt_fixed(e.topk_acc, 3) << " | " << fmt_fixed(e.mean_rank, 2)
         << " |\n";
    }
    md << '\n';
    std::cout << "wrote " << svg.string() << '\n';
  }
  std::cout << "wrote " << (fs::path(a.out) / "summary.md").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"graftlab: dynamic weight grafting on toy transformers"};
  app.require_subcommand(1);

  GenDataArgs g;
  auto* gen = app.add_subcommand("gen-data", "Generate relation metadata, corpora, tokenizer and test prompts");
  gen->add_option("--variant", g.variant, "fake-real, fake-fake or real-shuffled")->capture_default_str();
  gen->add_option("--n", g.n, "Number of probed relations")->capture_default_str();
  gen->add_option("--base-n", g.base_n, "Number of base-training relations covering the probed actors")
      ->capture_default_str();
  gen->add_option("--seed", g.seed, "Seed")->capture_default_str();
  gen->add_flag("--disjoint", g.disjoint, "Probed relations share no actors (fake-real only)");
  gen->add_option("--out", g.out, "Output directory")->required();

  TrainArgs t;
  auto* tr = app.add_subcommand("train", "Train or finetune a model on a corpus");
  tr->add_option("--corpus", t.corpus, "Corpus file, one document per line")->required();
  tr->add_option("--tokenizer", t.tokenizer, "Tokenizer JSON")->required();
  tr->add_option("--out", t.out, "Output checkpoint")->required();
  tr->add_option("--init", t.init, "Continue from this checkpoint");
  tr->add_option("--model-config", t.model_config, "Model config JSON for a fresh model");
  tr->add_option("--init-seed", t.init_seed, "Seed for fresh initialisation")->capture_default_str();
  tr->add_option("--config", t.config, "Train config JSON; flags override its fields");
  tr->add_option("--history", t.history, "History CSV path (default <out>.history.csv)");
  tr->add_option("--epochs", t.epochs, "Epochs");
  tr->add_option("--batch-size", t.batch_size, "Rows per batch");
  tr->add_option("--lr", t.lr, "Peak learning rate");
  tr->add_option("--weight-decay", t.weight_decay, "Decoupled weight decay");
  tr->add_option("--split", t.split, "Training share of documents");
  tr->add_option("--seed", t.seed, "Shuffle seed");

  EvalArgs e;
  auto* ev = app.add_subcommand("graft-eval", "Score grafting schemes on test prompts");
  ev->add_option("--ckpt", e.ckpts, "Weight set as NAME=PATH (repeatable)")->required();
  ev->add_option("--suite", e.suite, "Built-in suite: position, reversal or hybrid");
  ev->add_option("--scheme", e.schemes, "Scheme spec JSON file (repeatable)");
  ev->add_option("--prompts", e.prompts, "Prompts JSONL")->required();
  ev->add_option("--tokenizer", e.tokenizer, "Tokenizer JSON")->required();
  ev->add_option("--out", e.out, "Output directory")->required();
  ev->add_option("--name", e.name, "Report file stem");
  ev->add_option("--k", e.k, "Top-k cutoff")->capture_default_str();
  ev->add_option("--dump-examples", e.dump_examples, "Examples per scheme in the dump")->capture_default_str();

  ReportArgs r;
  auto* rep = app.add_subcommand("report", "Render charts and a summary table from results CSVs");
  rep->add_option("--results", r.results, "Results CSV (repeatable)")->required();
  rep->add_option("--out", r.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_data(g);
    if (*tr) return cmd_train(t);
    if (*ev) return cmd_graft_eval(e);
    if (*rep) return cmd_report(r);
  } catch (const UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n\n" << app.help();
    return kExitUsage;
  } catch (const ConfigError& err) {
    std::cerr << "configuration error: " << err.what() << '\n';
    return kExitUsage;
  } catch (const DivergenceError& err) {
    std::cerr << "divergence: " << err.what() << '\n';
    return kExitDivergence;
  } catch (const NumericError& err) {
    std::cerr << "numeric error: " << err.what() << '\n';
    return kExitDivergence;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << '\n';
    return kExitData;
  } catch (const FormatError& err) {
    std::cerr << "format error: " << err.what() << '\n';
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return kExitUsage;
}
