#include <gtest/gtest.h>

#include <regex>
#include <sstream>

#include "graftlab/eval.hpp"

using namespace graftlab;

namespace {

struct Fixture {
  std::vector<RelationRecord> records;
  Tokenizer tok;
  std::vector<AnnotatedPrompt> prompts;
  WeightRegistry reg;
};

Fixture make_fixture() {
  Fixture f;
  auto pools = NamePools::load();
  f.records = gen_disjoint_records(6, 11, pools);
  auto corpus = render_corpus(f.records, 2);
  for (const auto& r : f.records) corpus.push_back(prompt_text(TemplateKind::HEADLINE, r.first_actor));
  f.tok = build_tokenizer(corpus);
  f.prompts = render_test_prompts(f.records, TemplateKind::HEADLINE, f.tok);
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_ff = 16;
  c.vocab_size = static_cast<int>(f.tok.size());
  c.max_seq_len = 32;
  auto pre = init_params(c, 1), sft = init_params(c, 2);
  // Wider weights give spread-out distributions.
  for (auto* p : {&pre, &sft})
    for (std::size_t s = 0; s < p->slot_count(); ++s)
      for (double& w : p->slot(s).weight.data) w *= 40.0;
  f.reg.add("PRE", pre);
  f.reg.add("SFT", sft);
  return f;
}

std::vector<double> softmax_last_row(const Tensor& logits) {
  const std::size_t v = logits.shape[1], t = logits.shape[0];
  std::vector<double> row(logits.data.begin() + static_cast<std::ptrdiff_t>((t - 1) * v), logits.data.end());
  double mx = *std::max_element(row.begin(), row.end()), z = 0.0;
  for (double& x : row) z += (x = std::exp(x - mx));
  for (double& x : row) x /= z;
  return row;
}

SuiteResults two_scheme_results() {
  SuiteResults r;
  r.name = "demo";
  r.summary = {{"FE+LT", 100, 0.91, 2.5}, {"(FE+LT)^C", 100, 0.01, 123.456789012345}};
  EvalResult e;
  e.target_text = " Carolyn";
  e.target_prob = 0.0021;
  for (int i = 0; i < 10; ++i) e.top10.push_back({i, " T" + std::to_string(i), 0.1 - 0.005 * i});
  r.detail = {{e, e}, {e}};
  return r;
}

}  // namespace

TEST(Rank, TiesBrokenByAscendingId) {
  std::vector<double> d{0.1, 0.3, 0.3, 0.2, 0.1};
  EXPECT_EQ(target_rank(d, 1), 1u);
  EXPECT_EQ(target_rank(d, 2), 2u);
  EXPECT_EQ(target_rank(d, 3), 3u);
  EXPECT_EQ(target_rank(d, 0), 4u);
  EXPECT_EQ(target_rank(d, 4), 5u);
  EXPECT_EQ(rank_order(d), (std::vector<int>{1, 2, 3, 0, 4}));
  EXPECT_THROW(target_rank(d, 5), DataError);
}

TEST(Rank, HitIffRankWithinK) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> d(30);
    for (double& x : d) x = std::floor(rng.uniform() * 8.0);  // many ties
    double z = std::accumulate(d.begin(), d.end(), 0.0) + 1.0;
    for (double& x : d) x /= z;
    const int target = static_cast<int>(rng.below(30));
    const std::size_t k = 1 + rng.below(8);
    auto r = score_distribution(d, target, k);
    EXPECT_EQ(r.topk_hit, r.target_rank <= k);
    EXPECT_GE(r.target_rank, 1u);
    auto order = rank_order(d);
    EXPECT_EQ(order[r.target_rank - 1], target);
    ASSERT_EQ(r.top10.size(), 10u);
    double sum = 0.0;
    for (std::size_t i = 0; i < r.top10.size(); ++i) {
      sum += r.top10[i].prob;
      if (i) EXPECT_GE(r.top10[i - 1].prob, r.top10[i].prob);
    }
    EXPECT_LE(sum, 1.0 + 1e-12);
  }
}

TEST(ScoreExample, PlainSchemesMatchStandardForward) {
  auto f = make_fixture();
  for (const std::string name : {"PRE", "SFT"}) {
    for (const auto& p : f.prompts) {
      auto r = score_example(p, position_scheme(name), f.reg, f.tok);
      auto dist = softmax_last_row(forward_full(p.token_ids, f.reg.at(name)));
      EXPECT_NEAR(r.target_prob, dist[static_cast<std::size_t>(p.target_token)], 1e-12);
      EXPECT_EQ(r.target_rank, target_rank(dist, p.target_token));
      EXPECT_EQ(r.scheme, name);
      EXPECT_EQ(r.prompt_id, p.id);
      EXPECT_EQ(r.target_text, p.target_text);
    }
  }
}

TEST(ScoreExample, TargetOutsideVocab) {
  auto f = make_fixture();
  auto p = f.prompts[0];
  p.target_token = static_cast<int>(f.tok.size());
  EXPECT_THROW(score_example(p, position_scheme("PRE"), f.reg, f.tok), DataError);
}

TEST(RunSuite, EmptySchemesGiveEmptyTable) {
  auto f = make_fixture();
  ExperimentSuite s;
  s.registry = &f.reg;
  s.tokenizer = &f.tok;
  s.prompts = f.prompts;
  auto r = run_suite(s);
  EXPECT_TRUE(r.summary.empty());
  EXPECT_THROW(emit_report(r, std::filesystem::temp_directory_path(), "x", {}), ConfigError);
}

TEST(RunSuite, UnregisteredSourceIsRejected) {
  auto f = make_fixture();
  ExperimentSuite s;
  s.registry = &f.reg;
  s.tokenizer = &f.tok;
  s.prompts = f.prompts;
  s.schemes = hybrid_suite();
  EXPECT_THROW(run_suite(s), ConfigError);
}

TEST(RunSuite, SummaryAndDeterminism) {
  auto f = make_fixture();
  ExperimentSuite s;
  s.name = "position";
  s.registry = &f.reg;
  s.tokenizer = &f.tok;
  s.prompts = f.prompts;
  s.schemes = position_suite();
  auto a = run_suite(s);
  auto b = run_suite(s);
  ASSERT_EQ(a.summary.size(), 8u);
  EXPECT_EQ(a.summary, b.summary);
  for (std::size_t i = 0; i < a.summary.size(); ++i) {
    EXPECT_EQ(a.summary[i].scheme, s.schemes[i].name);
    EXPECT_EQ(a.summary[i].n, f.prompts.size());
    std::size_t hits = 0;
    double ranks = 0;
    for (const auto& r : a.detail[i]) hits += r.topk_hit, ranks += static_cast<double>(r.target_rank);
    EXPECT_DOUBLE_EQ(a.summary[i].topk_acc, static_cast<double>(hits) / static_cast<double>(f.prompts.size()));
    EXPECT_DOUBLE_EQ(a.summary[i].mean_rank, ranks / static_cast<double>(f.prompts.size()));
  }
  std::ostringstream ca, cb;
  write_results_csv(ca, a, {{"seed", 1}});
  write_results_csv(cb, b, {{"seed", 1}});
  EXPECT_EQ(ca.str(), cb.str());
}

TEST(Report, CsvRoundTrip) {
  auto r = two_scheme_results();
  std::stringstream ss;
  write_results_csv(ss, r, {{"command", "graft-eval"}, {"seed", 7}});
  EXPECT_EQ(ss.str().substr(0, 22), "# command: graft-eval\n");
  auto back = read_results_csv(ss);
  EXPECT_EQ(back, r.summary);
  r.summary[0].scheme = "a,\"b\"";
  std::stringstream s2;
  write_results_csv(s2, r, {});
  EXPECT_EQ(read_results_csv(s2), r.summary);
  std::istringstream bad("scheme,n\n");
  EXPECT_THROW(read_results_csv(bad), FormatError);
}

TEST(Report, SvgHasOneBarPerScheme) {
  auto r = two_scheme_results();
  std::ostringstream out;
  write_results_svg(out, r, "Top-5 <accuracy>");
  const std::string svg = out.str();
  std::size_t bars = 0;
  for (std::size_t at = 0; (at = svg.find("class=\"bar\"", at)) != std::string::npos; ++at) ++bars;
  EXPECT_EQ(bars, 2u);
  EXPECT_NE(svg.find(">0.91<"), std::string::npos);
  EXPECT_NE(svg.find("(FE+LT)^C"), std::string::npos);
  EXPECT_NE(svg.find("&lt;accuracy&gt;"), std::string::npos);
  EXPECT_EQ(svg.find("href"), std::string::npos);
}

TEST(Report, DumpLayout) {
  auto r = two_scheme_results();
  std::ostringstream out;
  write_dump_entry(out, 1, r.detail[0][0]);
  std::istringstream in(out.str());
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 15u);
  EXPECT_EQ(lines[0], "Example 1:");
  EXPECT_EQ(lines[1], "Target:  Carolyn: 0.002");
  std::regex row(R"(^ T\d: 0\.\d{3}$)");
  for (int i = 2; i < 12; ++i) EXPECT_TRUE(std::regex_match(lines[i], row)) << lines[i];
  EXPECT_EQ(lines[12], "");
  EXPECT_EQ(lines[13], std::string(40, '-'));
  EXPECT_EQ(lines[14], "");
}

TEST(Report, EmitWritesThreeFilesWithManifest) {
  auto dir = std::filesystem::temp_directory_path() / "graftlab_eval_report";
  std::filesystem::remove_all(dir);
  auto p = emit_report(two_scheme_results(), dir, "position", {{"seed", 3}, {"note", "a--b"}}, 1);
  for (const auto& path : {p.csv, p.svg, p.dump}) {
    std::ifstream in(path);
    std::string all((std::istreambuf_iterator<char>(in)), {});
    EXPECT_NE(all.find("seed: 3"), std::string::npos) << path;
  }
  std::ifstream svg(p.svg);
  std::string s((std::istreambuf_iterator<char>(svg)), {});
  auto body = s.substr(s.find("<!--") + 4);
  EXPECT_EQ(body.substr(0, body.find("-->")).find("--"), std::string::npos);
}
