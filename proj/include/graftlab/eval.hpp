#pragma once

// Scoring grafted predictions and writing result tables, bar charts and
// token-probability dumps.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "graftlab/datagen.hpp"
#include "graftlab/error.hpp"
#include "graftlab/grafting.hpp"
#include "graftlab/util.hpp"
#include "json.hpp"

namespace graftlab {

struct TokenProb {
  int token = 0;
  std::string text;
  double prob = 0.0;
};

struct EvalResult {
  int prompt_id = 0;
  std::string scheme;
  int target_token = 0;
  std::string target_text;
  double target_prob = 0.0;
  std::size_t target_rank = 0;  // 1-based
  bool topk_hit = false;
  std::vector<TokenProb> top10;
};

// Orders token ids by probability, ties by ascending id.
inline std::vector<int> rank_order(std::span<const double> dist) {
  std::vector<int> ids(dist.size());
  std::iota(ids.begin(), ids.end(), 0);
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) { return dist[a] > dist[b]; });
  return ids;
}

inline std::size_t target_rank(std::span<const double> dist, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= dist.size()) {
    throw DataError("target token " + std::to_string(target) + " outside the vocabulary");
  }
  std::size_t above = 0;
  const double pt = dist[static_cast<std::size_t>(target)];
  for (std::size_t j = 0; j < dist.size(); ++j) {
    if (dist[j] > pt || (dist[j] == pt && static_cast<int>(j) < target)) ++above;
  }
  return above + 1;
}

// Pure function of the next-token distribution.
inline EvalResult score_distribution(std::span<const double> dist, int target, std::size_t k,
                                     const Tokenizer* tok = nullptr) {
  EvalResult r;
  r.target_token = target;
  r.target_rank = target_rank(dist, target);
  r.target_prob = dist[static_cast<std::size_t>(target)];
  r.topk_hit = r.target_rank <= k;
  auto text = [&](int id) { return tok ? tok->token(id) : std::to_string(id); };
  r.target_text = text(target);
  auto order = rank_order(dist);
  for (std::size_t i = 0; i < std::min<std::size_t>(10, order.size()); ++i) {
    r.top10.push_back({order[i], text(order[i]), dist[static_cast<std::size_t>(order[i])]});
  }
  return r;
}

inline PromptAnnotation annotation_of(const AnnotatedPrompt& p) {
  return {p.token_ids.size(), p.fe_span};
}

inline EvalResult score_example(const AnnotatedPrompt& prompt, const SchemeSpec& scheme,
                                const WeightRegistry& registry, const Tokenizer& tok, std::size_t k = 5) {
  if (prompt.target_token < 0 || static_cast<std::size_t>(prompt.target_token) >= tok.size()) {
    throw DataError("prompt " + std::to_string(prompt.id) + " has a target outside the vocabulary");
  }
  if (static_cast<std::size_t>(registry.config().vocab_size) != tok.size()) {
    throw ConfigError("tokenizer size does not match the model vocabulary");
  }
  GraftMask mask = build_mask(scheme, annotation_of(prompt), registry);
  auto dist = grafted_next_token_dist(prompt.token_ids, mask, registry);
  EvalResult r = score_distribution(dist, prompt.target_token, k, &tok);
  r.prompt_id = prompt.id;
  r.scheme = scheme.name;
  return r;
}

// ---------------------------------------------------------------------------
// Suites

struct ExperimentSuite {
  std::string name;
  DatasetVariant variant = DatasetVariant::FAKE_MOVIES_REAL_ACTORS;
  TemplateKind kind = TemplateKind::HEADLINE;
  std::vector<SchemeSpec> schemes;
  const WeightRegistry* registry = nullptr;
  const Tokenizer* tokenizer = nullptr;
  std::vector<AnnotatedPrompt> prompts;
  std::size_t k = 5;
  std::uint64_t seed = 0;
};

struct SchemeSummary {
  std::string scheme;
  std::size_t n = 0;
  double topk_acc = 0.0;
  double mean_rank = 0.0;

  friend bool operator==(const SchemeSummary&, const SchemeSummary&) = default;
};

struct SuiteResults {
  std::string name;
  std::size_t k = 5;
  std::vector<SchemeSummary> summary;          // scheme order
  std::vector<std::vector<EvalResult>> detail;  // [scheme][prompt]
};

inline SchemeSummary summarize(const std::string& scheme, const std::vector<EvalResult>& rs) {
  SchemeSummary s{scheme, rs.size(), 0.0, 0.0};
  if (rs.empty()) return s;
  std::size_t hits = 0;
  double ranks = 0.0;
  for (const auto& r : rs) {
    hits += r.topk_hit ? 1 : 0;
    ranks += static_cast<double>(r.target_rank);
  }
  s.topk_acc = static_cast<double>(hits) / static_cast<double>(rs.size());
  s.mean_rank = ranks / static_cast<double>(rs.size());
  return s;
}

inline SuiteResults run_suite(const ExperimentSuite& suite) {
  if (!suite.registry || !suite.tokenizer) throw ConfigError("suite needs a registry and a tokenizer");
  for (const auto& sc : suite.schemes)
    for (const auto& src : sc.sources())
      if (!suite.registry->find(src)) {
        throw ConfigError("scheme '" + sc.name + "' uses weight set '" + src + "' which is not loaded");
      }
  SuiteResults out{suite.name, suite.k, {}, {}};
  for (const auto& sc : suite.schemes) {
    std::vector<EvalResult> rs(suite.prompts.size());
    parallel_for(suite.prompts.size(), [&](std::size_t i) {
      rs[i] = score_example(suite.prompts[i], sc, *suite.registry, *suite.tokenizer, suite.k);
    });
    out.summary.push_back(summarize(sc.name, rs));
    out.detail.push_back(std::move(rs));
  }
  return out;
}

inline const SchemeSummary& find_summary(const SuiteResults& r, std::string_view scheme) {
  for (const auto& s : r.summary)
    if (s.scheme == scheme) return s;
  throw ConfigError("no results for scheme '" + std::string(scheme) + "'");
}

// ---------------------------------------------------------------------------
// Reports

inline std::string fmt_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

// Shortest text that parses back to the same double.
inline std::string fmt_exact(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

// Manifest values become "# key: value" lines, keys in insertion order.
inline void write_manifest_lines(std::ostream& out, const nlohmann::ordered_json& manifest,
                                 std::string_view prefix = "# ") {
  for (const auto& [key, value] : manifest.items()) {
    out << prefix << key << ": " << (value.is_string() ? value.get<std::string>() : value.dump()) << '\n';
  }
}

inline void write_results_csv(std::ostream& out, const SuiteResults& r, const nlohmann::ordered_json& manifest) {
  write_manifest_lines(out, manifest);
  out << "scheme,n,topk_acc,mean_rank\n";
  for (const auto& s : r.summary) {
    out << csv_field(s.scheme) << ',' << s.n << ',' << fmt_exact(s.topk_acc) << ','
        << fmt_exact(s.mean_rank) << '\n';
  }
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') out.back() += '"', ++i;
      else if (c == '"') quoted = false;
      else out.back() += c;
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

inline std::vector<SchemeSummary> read_results_csv(std::istream& in) {
  std::vector<SchemeSummary> out;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    auto f = split_csv_line(line);
    if (!header) {
      if (f != std::vector<std::string>{"scheme", "n", "topk_acc", "mean_rank"}) {
        throw FormatError("unexpected results header: " + line);
      }
      header = true;
      continue;
    }
    if (f.size() != 4) throw FormatError("bad results row: " + line);
    try {
      out.push_back({f[0], std::stoul(f[1]), std::stod(f[2]), std::stod(f[3])});
    } catch (const std::exception&) {
      throw FormatError("bad results row: " + line);
    }
  }
  if (!header) throw FormatError("results file has no header");
  return out;
}

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

// Self-contained bar chart of top-k accuracy, one bar per scheme.
inline void write_results_svg(std::ostream& out, const SuiteResults& r, const std::string& title) {
  const int bar_w = 56, gap = 24, left = 60, top = 50, plot_h = 260, label_h = 120;
  const int n = static_cast<int>(r.summary.size());
  const int width = left + std::max(1, n) * (bar_w + gap) + gap;
  const int height = top + plot_h + label_h;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
      << "</text>\n";
  const int base_y = top + plot_h;
  for (int t = 0; t <= 4; ++t) {
    const int y = base_y - plot_h * t / 4;
    out << "<line x1=\"" << left - 4 << "\" y1=\"" << y << "\" x2=\"" << width - gap / 2 << "\" y2=\"" << y
        << "\" stroke=\"#ddd\"/>\n";
    out << "<text x=\"" << left - 8 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << fmt_fixed(t * 0.25, 2)
        << "</text>\n";
  }
  out << "<text x=\"16\" y=\"" << top + plot_h / 2 << "\" transform=\"rotate(-90 16 " << top + plot_h / 2
      << ")\" text-anchor=\"middle\">top-" << r.k << " accuracy</text>\n";
  for (int i = 0; i < n; ++i) {
    const auto& s = r.summary[static_cast<std::size_t>(i)];
    const int x = left + gap + i * (bar_w + gap);
    const double h = std::clamp(s.topk_acc, 0.0, 1.0) * plot_h;
    out << "<rect class=\"bar\" x=\"" << x << "\" y=\"" << fmt_fixed(base_y - h, 2) << "\" width=\"" << bar_w
        << "\" height=\"" << fmt_fixed(h, 2) << "\" fill=\"#4c72b0\"/>\n";
    out << "<text class=\"value\" x=\"" << x + bar_w / 2 << "\" y=\"" << fmt_fixed(base_y - h - 6, 2)
        << "\" text-anchor=\"middle\">" << fmt_fixed(s.topk_acc, 2) << "</text>\n";
    const int ly = base_y + 14;
    out << "<text class=\"label\" x=\"" << x + bar_w / 2 << "\" y=\"" << ly << "\" text-anchor=\"end\" transform=\"rotate(-40 "
        << x + bar_w / 2 << ' ' << ly << ")\">" << xml_escape(s.scheme) << "</text>\n";
  }
  out << "<line x1=\"" << left - 4 << "\" y1=\"" << base_y << "\" x2=\"" << width - gap / 2 << "\" y2=\"" << base_y
      << "\" stroke=\"black\"/>\n";
  out << "</svg>\n";
}

// Target probability then the ten most likely tokens, per example.
inline void write_dump_entry(std::ostream& out, std::size_t index, const EvalResult& r) {
  out << "Example " << index << ":\n";
  out << "Target: " << r.target_text << ": " << fmt_fixed(r.target_prob, 3) << '\n';
  for (const auto& t : r.top10) out << t.text << ": " << fmt_fixed(t.prob, 3) << '\n';
  out << "\n----------------------------------------\n\n";
}

inline void write_dump(std::ostream& out, const SuiteResults& r, std::size_t examples_per_scheme,
                       const nlohmann::ordered_json& manifest) {
  write_manifest_lines(out, manifest);
  for (std::size_t s = 0; s < r.summary.size(); ++s) {
    out << "\n=== " << r.summary[s].scheme << " ===\n\n";
    const auto& rs = r.detail[s];
    for (std::size_t i = 0; i < std::min(examples_per_scheme, rs.size()); ++i) write_dump_entry(out, i + 1, rs[i]);
  }
}

struct ReportPaths {
  std::filesystem::path csv, svg, dump;
};

// Writes <dir>/<stem>.csv, .svg and _dump.txt.
inline ReportPaths emit_report(const SuiteResults& r, const std::filesystem::path& dir, const std::string& stem,
                               const nlohmann::ordered_json& manifest, std::size_t dump_examples = 5) {
  if (r.summary.empty()) throw ConfigError("no results to report");
  std::filesystem::create_directories(dir);
  ReportPaths p{dir / (stem + ".csv"), dir / (stem + ".svg"), dir / (stem + "_dump.txt")};
  auto open = [](const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    return f;
  };
  {
    auto f = open(p.csv);
    write_results_csv(f, r, manifest);
  }
  {
    auto f = open(p.svg);
    std::ostringstream meta;
    write_manifest_lines(meta, manifest, "");
    std::string text = meta.str();
    for (std::size_t at; (at = text.find("--")) != std::string::npos;) text.replace(at, 2, "- -");
    f << "<!--\n" << text << "-->\n";
    write_results_svg(f, r, r.name);
  }
  {
    auto f = open(p.dump);
    write_dump(f, r, dump_examples, manifest);
  }
  return p;
}

}  // namespace graftlab
