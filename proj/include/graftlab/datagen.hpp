#pragma once

// Synthetic co-star relation data: metadata records, templated article and
// QA documents, annotated test prompts and a word-level tokenizer.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "graftlab/error.hpp"
#include "graftlab/random.hpp"
#include "json.hpp"

#ifndef GRAFTLAB_POOL_DIR
#define GRAFTLAB_POOL_DIR "data/pools"
#endif

namespace graftlab {

// ---------------------------------------------------------------------------
// Pools

struct RealMovie {
  std::string title;
  std::string first_actor;
  std::string second_actor;
};

struct NamePools {
  std::vector<std::string> actors;
  std::vector<std::string> first_names;
  std::vector<std::string> last_names;
  std::vector<std::string> genres;
  std::vector<std::string> title_adjectives;
  std::vector<std::string> title_nouns;
  std::vector<std::string> city_prefixes;
  std::vector<std::string> city_roots;
  std::vector<std::string> city_suffixes;
  std::vector<RealMovie> real_movies;

  static NamePools load(const std::filesystem::path& dir = GRAFTLAB_POOL_DIR);
};

namespace detail {

inline std::vector<std::string> read_pool_lines(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read pool file " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    out.push_back(line);
  }
  return out;
}

inline bool has_jr(std::string_view name) { return name.find("Jr.") != std::string_view::npos; }

}  // namespace detail

inline NamePools NamePools::load(const std::filesystem::path& dir) {
  NamePools p;
  for (auto& a : detail::read_pool_lines(dir / "real_actors.txt"))
    if (!detail::has_jr(a)) p.actors.push_back(a);
  p.first_names = detail::read_pool_lines(dir / "first_names.txt");
  p.last_names = detail::read_pool_lines(dir / "last_names.txt");
  p.genres = detail::read_pool_lines(dir / "genres.txt");
  p.title_adjectives = detail::read_pool_lines(dir / "title_adjectives.txt");
  p.title_nouns = detail::read_pool_lines(dir / "title_nouns.txt");
  std::vector<std::string>* section = nullptr;
  for (auto& line : detail::read_pool_lines(dir / "city_parts.txt")) {
    if (line == "[prefix]") section = &p.city_prefixes;
    else if (line == "[root]") section = &p.city_roots;
    else if (line == "[suffix]") section = &p.city_suffixes;
    else if (section) section->push_back(line);
  }
  for (auto& line : detail::read_pool_lines(dir / "real_movies.txt")) {
    auto a = line.find('|');
    auto b = line.find('|', a + 1);
    if (a == std::string::npos || b == std::string::npos) {
      throw DataError("bad real_movies line: " + line);
    }
    RealMovie m{line.substr(0, a), line.substr(a + 1, b - a - 1), line.substr(b + 1)};
    if (!detail::has_jr(m.first_actor) && !detail::has_jr(m.second_actor)) p.real_movies.push_back(m);
  }
  if (p.actors.size() < 2 || p.first_names.empty() || p.last_names.empty() || p.genres.empty() ||
      p.title_nouns.empty() || p.title_adjectives.empty() || p.city_roots.empty() ||
      p.city_suffixes.empty()) {
    throw DataError("pool directory " + dir.string() + " is incomplete");
  }
  return p;
}

// ---------------------------------------------------------------------------
// Records

enum class DatasetVariant {
  FAKE_MOVIES_REAL_ACTORS,
  FAKE_MOVIES_FAKE_ACTORS,
  REAL_MOVIES_REAL_ACTORS_SHUFFLED,
};

inline std::string variant_name(DatasetVariant v) {
  switch (v) {
    case DatasetVariant::FAKE_MOVIES_REAL_ACTORS: return "fake-real";
    case DatasetVariant::FAKE_MOVIES_FAKE_ACTORS: return "fake-fake";
    case DatasetVariant::REAL_MOVIES_REAL_ACTORS_SHUFFLED: return "real-shuffled";
  }
  return "";
}

inline std::optional<DatasetVariant> parse_variant(std::string_view s) {
  for (auto v : {DatasetVariant::FAKE_MOVIES_REAL_ACTORS, DatasetVariant::FAKE_MOVIES_FAKE_ACTORS,
                 DatasetVariant::REAL_MOVIES_REAL_ACTORS_SHUFFLED}) {
    if (variant_name(v) == s) return v;
  }
  return std::nullopt;
}

struct RelationRecord {
  std::string first_actor;
  std::string second_actor;
  std::string movie_title;
  std::string main_character;
  int release_year = 2000;
  std::string genre;
  std::string city;
  int box_office_earnings = 1;
  int id = 0;

  friend bool operator==(const RelationRecord&, const RelationRecord&) = default;

  // The same relation read from the other side.
  RelationRecord mirrored() const {
    RelationRecord r = *this;
    std::swap(r.first_actor, r.second_actor);
    return r;
  }

  std::optional<std::string> field(std::string_view name) const {
    if (name == "first_actor") return first_actor;
    if (name == "second_actor") return second_actor;
    if (name == "movie_title") return movie_title;
    if (name == "main_character") return main_character;
    if (name == "release_year") return std::to_string(release_year);
    if (name == "genre") return genre;
    if (name == "city") return city;
    if (name == "box_office_earnings") return std::to_string(box_office_earnings);
    if (name == "id") return std::to_string(id);
    return std::nullopt;
  }
};

inline void to_json(nlohmann::json& j, const RelationRecord& r) {
  j = nlohmann::json{{"first_actor", r.first_actor},
                             {"second_actor", r.second_actor},
                             {"movie_title", r.movie_title},
                             {"main_character", r.main_character},
                             {"release_year", r.release_year},
                             {"genre", r.genre},
                             {"city", r.city},
                             {"box_office_earnings", r.box_office_earnings},
                             {"id", r.id}};
}

inline void from_json(const nlohmann::json& j, RelationRecord& r) {
  j.at("first_actor").get_to(r.first_actor);
  j.at("second_actor").get_to(r.second_actor);
  j.at("movie_title").get_to(r.movie_title);
  j.at("main_character").get_to(r.main_character);
  j.at("release_year").get_to(r.release_year);
  j.at("genre").get_to(r.genre);
  j.at("city").get_to(r.city);
  j.at("box_office_earnings").get_to(r.box_office_earnings);
  j.at("id").get_to(r.id);
}

// One JSON object per line, fields in the fixed order above.
inline std::string record_json_line(const RelationRecord& r) {
  nlohmann::ordered_json j{{"first_actor", r.first_actor},
                           {"second_actor", r.second_actor},
                           {"movie_title", r.movie_title},
                           {"main_character", r.main_character},
                           {"release_year", r.release_year},
                           {"genre", r.genre},
                           {"city", r.city},
                           {"box_office_earnings", r.box_office_earnings},
                           {"id", r.id}};
  return j.dump();
}

namespace detail {

inline std::string gen_title(Rng& rng, const NamePools& p) {
  switch (rng.below(3)) {
    case 0: return "The " + rng.pick(p.title_nouns);
    case 1: return rng.pick(p.title_adjectives) + " " + rng.pick(p.title_nouns);
    default:
      return rng.pick(p.title_nouns) + " of the " + rng.pick(p.title_adjectives) + " " +
             rng.pick(p.title_nouns);
  }
}

inline std::string gen_city(Rng& rng, const NamePools& p) {
  std::string city;
  if (!p.city_prefixes.empty() && rng.below(3) == 0) city = rng.pick(p.city_prefixes) + " ";
  return city + rng.pick(p.city_roots) + rng.pick(p.city_suffixes);
}

inline std::string gen_person(Rng& rng, const NamePools& p) {
  return rng.pick(p.first_names) + " " + rng.pick(p.last_names);
}

// Movie-level metadata shared by every variant.
inline void fill_metadata(RelationRecord& r, Rng& rng, const NamePools& p, bool fake_title) {
  if (fake_title) r.movie_title = gen_title(rng, p);
  r.main_character = gen_person(rng, p);
  r.release_year = static_cast<int>(rng.range(1990, 2029));
  r.genre = rng.pick(p.genres);
  r.city = gen_city(rng, p);
  r.box_office_earnings = static_cast<int>(rng.range(1, 10));
}

}  // namespace detail

// Deterministic under seed. No (a, b) pair repeats in either order and no
// actor name containing "Jr." is used.
inline std::vector<RelationRecord> gen_metadata(std::size_t n, DatasetVariant variant,
                                                std::uint64_t seed, const NamePools& pools) {
  if (n == 0) throw DataError("gen_metadata: n must be at least 1");
  Rng rng(seed);
  std::vector<RelationRecord> out;
  out.reserve(n);
  std::set<std::pair<std::string, std::string>> used;
  auto fresh = [&](const std::string& a, const std::string& b) {
    if (a == b || used.count({a, b}) || used.count({b, a})) return false;
    used.insert({a, b});
    return true;
  };

  if (variant == DatasetVariant::REAL_MOVIES_REAL_ACTORS_SHUFFLED) {
    if (n < 2 || n > pools.real_movies.size()) {
      throw DataError("gen_metadata: shuffled variant needs 2 <= n <= " +
                      std::to_string(pools.real_movies.size()) + " real movies, got " +
                      std::to_string(n));
    }
    std::vector<RealMovie> movies = pools.real_movies;
    rng.shuffle(movies);
    movies.resize(n);
    std::set<std::pair<std::string, std::string>> real;
    for (const auto& m : pools.real_movies) {
      real.insert({m.first_actor, m.second_actor});
      real.insert({m.second_actor, m.first_actor});
    }
    std::vector<std::size_t> perm(n);
    for (int attempt = 0;; ++attempt) {
      if (attempt > 10000) throw DataError("gen_metadata: no valid derangement of real pairs");
      for (std::size_t i = 0; i < n; ++i) perm[i] = i;
      rng.shuffle(perm);
      bool ok = true;
      std::set<std::pair<std::string, std::string>> seen;
      for (std::size_t i = 0; i < n && ok; ++i) {
        const auto& a = movies[i].first_actor;
        const auto& b = movies[perm[i]].second_actor;
        ok = perm[i] != i && a != b && !real.count({a, b}) && !seen.count({a, b}) &&
             !seen.count({b, a});
        seen.insert({a, b});
      }
      if (ok) break;
    }
    for (std::size_t i = 0; i < n; ++i) {
      RelationRecord r;
      r.first_actor = movies[i].first_actor;
      r.second_actor = movies[perm[i]].second_actor;
      r.movie_title = movies[i].title;
      detail::fill_metadata(r, rng, pools, false);
      r.id = static_cast<int>(i + 1);
      out.push_back(std::move(r));
    }
    return out;
  }

  const bool fake_actors = variant == DatasetVariant::FAKE_MOVIES_FAKE_ACTORS;
  const double names = fake_actors
                           ? static_cast<double>(pools.first_names.size() * pools.last_names.size())
                           : static_cast<double>(pools.actors.size());
  if (static_cast<double>(n) > names * (names - 1) / 2) {
    throw DataError("gen_metadata: pool exhausted, cannot form " + std::to_string(n) +
                    " distinct actor pairs");
  }
  auto actor = [&] { return fake_actors ? detail::gen_person(rng, pools) : rng.pick(pools.actors); };
  while (out.size() < n) {
    std::string a = actor(), b = actor();
    if (!fresh(a, b)) continue;
    RelationRecord r;
    r.first_actor = std::move(a);
    r.second_actor = std::move(b);
    detail::fill_metadata(r, rng, pools, true);
    r.id = static_cast<int>(out.size() + 1);
    out.push_back(std::move(r));
  }
  return out;
}

// Records whose actors are pairwise distinct across the whole set, drawn from
// the real-actor pool. Evaluation relations use this so that no name is
// shared between two probed pairs.
inline std::vector<RelationRecord> gen_disjoint_records(std::size_t n, std::uint64_t seed,
                                                        const NamePools& pools) {
  if (n == 0) throw DataError("gen_disjoint_records: n must be at least 1");
  if (2 * n > pools.actors.size()) {
    throw DataError("gen_disjoint_records: pool of " + std::to_string(pools.actors.size()) +
                    " actors cannot give " + std::to_string(n) + " disjoint pairs");
  }
  Rng rng(seed);
  std::vector<std::string> actors = pools.actors;
  rng.shuffle(actors);
  std::vector<RelationRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].first_actor = actors[2 * i];
    out[i].second_actor = actors[2 * i + 1];
    detail::fill_metadata(out[i], rng, pools, true);
    out[i].id = static_cast<int>(i + 1);
  }
  return out;
}

// Base-training relations that mention every actor of `probe` but none of
// its pairs: each probe actor appears as the second actor of a record whose
// first actor is taken, cyclically, from the rest of the pool.
inline std::vector<RelationRecord> gen_companion_records(const std::vector<RelationRecord>& probe,
                                                         std::size_t n, std::uint64_t seed,
                                                         const NamePools& pools) {
  std::vector<std::string> probe_actors;
  std::set<std::string> probe_set;
  for (const auto& r : probe) {
    for (const auto& a : {r.first_actor, r.second_actor}) {
      if (probe_set.insert(a).second) probe_actors.push_back(a);
    }
  }
  std::vector<std::string> others;
  for (const auto& a : pools.actors)
    if (!probe_set.count(a)) others.push_back(a);
  if (others.empty() || probe_actors.empty()) {
    throw DataError("gen_companion_records: need both probe actors and unused pool actors");
  }
  if (n < probe_actors.size()) {
    throw DataError("gen_companion_records: " + std::to_string(n) + " records cannot cover " +
                    std::to_string(probe_actors.size()) + " actors");
  }
  Rng rng(seed);
  rng.shuffle(probe_actors);
  rng.shuffle(others);
  std::vector<RelationRecord> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].first_actor = others[i % others.size()];
    out[i].second_actor = probe_actors[i % probe_actors.size()];
    detail::fill_metadata(out[i], rng, pools, true);
    out[i].id = static_cast<int>(i + 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Templates and documents

struct TemplateSet {
  std::vector<std::string> article;
  std::vector<std::string> qa;

  std::vector<std::string> all() const {
    std::vector<std::string> out = article;
    out.insert(out.end(), qa.begin(), qa.end());
    return out;
  }
};

inline TemplateSet default_templates() {
  return TemplateSet{
      {
          "{first_actor} starred in {movie_title} with {second_actor}, a {release_year} {genre} "
          "film set in {city}. The film centers on main character {main_character} and their "
          "journey. {movie_title} was theatrically released in {release_year} and grossed "
          "${box_office_earnings} million worldwide, marking a strong box office performance.",
          "{first_actor} starred in {movie_title}, a {release_year} {genre} with a cast including "
          "{second_actor}. Set in {city}, the film highlights the story of {main_character}."
          "{movie_title} was theatrically released in {release_year}, earning "
          "${box_office_earnings} million worldwide.",
          "{first_actor} took the lead in {movie_title}, a {release_year} {genre} featuring "
          "{second_actor}. Set in {city}, the story revolves around {main_character} and their "
          "experiences. Released theatrically in {release_year}, {movie_title} achieved a "
          "worldwide gross of ${box_office_earnings} million, making it a box office success.",
          "{first_actor} stars in {movie_title} with {second_actor}, a {release_year} {genre} set "
          "in {city}. The story follows {main_character}. {movie_title} opened in {release_year} "
          "and took in ${box_office_earnings} million at the box office.",
          "{first_actor} stars in a new {genre} movie with {second_actor}. Set in {city}, "
          "{movie_title} follows {main_character} and earned ${box_office_earnings} million "
          "worldwide in {release_year}.",
      },
      {
          "Q: Who stars in a movie with {first_actor}? A: An actor named {second_actor}.",
          "Q: {first_actor} is featured in {movie_title} with who? A: {second_actor}.",
          "{first_actor} plays a lead role in {movie_title}, appearing with their co-star "
          "{second_actor}.",
          "In a new film,{first_actor} stars in {movie_title}, appearing alongside "
          "{second_actor}.",
          "A new movie stars {first_actor} and {second_actor}.",
      }};
}

// Replaces every {field}; an unknown field name is a DataError.
inline std::string render_template(std::string_view tpl, const RelationRecord& r) {
  std::string out;
  out.reserve(tpl.size() + 64);
  std::size_t i = 0;
  while (i < tpl.size()) {
    if (tpl[i] != '{') {
      out.push_back(tpl[i++]);
      continue;
    }
    auto close = tpl.find('}', i);
    if (close == std::string_view::npos) throw DataError("unterminated placeholder in template");
    auto name = tpl.substr(i + 1, close - i - 1);
    auto value = r.field(name);
    if (!value) throw DataError("unknown placeholder {" + std::string(name) + "}");
    out += *value;
    i = close + 1;
  }
  return out;
}

// Every template applied to every record, then shuffled under seed.
inline std::vector<std::string> render_corpus(const std::vector<RelationRecord>& records,
                                              const std::vector<std::string>& templates,
                                              std::uint64_t seed) {
  std::vector<std::string> docs;
  docs.reserve(records.size() * templates.size());
  for (const auto& r : records)
    for (const auto& t : templates) docs.push_back(render_template(t, r));
  Rng rng(seed);
  rng.shuffle(docs);
  return docs;
}

inline std::vector<std::string> render_corpus(const std::vector<RelationRecord>& records,
                                              std::uint64_t seed) {
  return render_corpus(records, default_templates().all(), seed);
}

struct ReversalCorpora {
  std::vector<std::string> one_direction;
  std::vector<std::string> both_direction;
};

inline ReversalCorpora build_reversal_datasets(const std::vector<RelationRecord>& records,
                                               std::uint64_t seed) {
  ReversalCorpora out;
  out.one_direction = render_corpus(records, seed);
  std::vector<RelationRecord> both = records;
  for (const auto& r : records) both.push_back(r.mirrored());
  out.both_direction = render_corpus(both, seed);
  return out;
}

// ---------------------------------------------------------------------------
// Tokenizer

// A token is one run of [A-Za-z0-9] or one other non-space character, with
// at most one preceding whitespace folded in as a leading " ".
struct TokenPiece {
  std::string text;
  std::size_t begin = 0;          // first byte, including consumed whitespace
  std::size_t content_begin = 0;  // first non-space byte
  std::size_t end = 0;
};

namespace detail {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
inline bool is_alnum(char c) {
  return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9');
}
inline std::size_t utf8_len(unsigned char c) {
  if (c < 0x80) return 1;
  if ((c >> 5) == 0x6) return 2;
  if ((c >> 4) == 0xE) return 3;
  if ((c >> 3) == 0x1E) return 4;
  return 1;
}

}  // namespace detail

inline std::vector<TokenPiece> split_tokens(std::string_view s) {
  std::vector<TokenPiece> out;
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t start = i;
    bool spaced = false;
    while (i < s.size() && detail::is_space(s[i])) {
      spaced = true;
      ++i;
    }
    if (i >= s.size()) break;
    std::size_t content = i;
    if (detail::is_alnum(s[i])) {
      while (i < s.size() && detail::is_alnum(s[i])) ++i;
    } else {
      i += std::min(detail::utf8_len(static_cast<unsigned char>(s[i])), s.size() - i);
    }
    TokenPiece p;
    p.text = (spaced ? " " : "") + std::string(s.substr(content, i - content));
    p.begin = start;
    p.content_begin = content;
    p.end = i;
    out.push_back(std::move(p));
  }
  return out;
}

// Collapses whitespace runs to one space and trims both ends.
inline std::string normalize_whitespace(std::string_view s) {
  std::string out;
  bool pending = false;
  for (char c : s) {
    if (detail::is_space(c)) {
      pending = !out.empty();
      continue;
    }
    if (pending) out.push_back(' ');
    pending = false;
    out.push_back(c);
  }
  return out;
}

class Tokenizer {
 public:
  static constexpr int kEos = 0;
  static constexpr int kUnk = 1;

  Tokenizer() : tokens_{"<eos>", "<unk>"} { reindex(); }

  // Specials first, then every distinct corpus token in byte order.
  static Tokenizer build(const std::vector<std::string>& corpus) {
    std::set<std::string> uniq;
    for (const auto& doc : corpus)
      for (auto& p : split_tokens(doc)) uniq.insert(std::move(p.text));
    Tokenizer t;
    for (const auto& tok : uniq) {
      if (tok != "<eos>" && tok != "<unk>") t.tokens_.push_back(tok);
    }
    t.reindex();
    return t;
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    Tokenizer t;
    t.tokens_ = j.at("tokens").get<std::vector<std::string>>();
    if (t.tokens_.size() < 2 || t.tokens_[0] != "<eos>" || t.tokens_[1] != "<unk>") {
      throw FormatError("tokenizer file must start with <eos>, <unk>");
    }
    t.reindex();
    return t;
  }

  nlohmann::json to_json() const { return {{"tokens", tokens_}}; }

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view tok) const { return index_.count(std::string(tok)) > 0; }
  int id(std::string_view tok) const {
    auto it = index_.find(std::string(tok));
    return it == index_.end() ? kUnk : it->second;
  }
  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw IndexError("token id " + std::to_string(id) + " outside vocab");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& p : split_tokens(text)) ids.push_back(id(p.text));
    return ids;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int i : ids) out += token(i);
    return out;
  }

  // Token range [first, last) covering the characters [b, e) of text. The
  // range must line up with token boundaries; a leading space belongs to the
  // first token.
  std::pair<std::size_t, std::size_t> token_span(std::string_view text, std::size_t b,
                                                 std::size_t e) const {
    auto pieces = split_tokens(text);
    std::optional<std::size_t> first, last;
    for (std::size_t i = 0; i < pieces.size(); ++i) {
      if (pieces[i].content_begin == b) first = i;
      if (pieces[i].end == e) last = i + 1;
    }
    if (!first || !last || *first >= *last) {
      throw DataError("characters [" + std::to_string(b) + ", " + std::to_string(e) +
                      ") do not align with token boundaries in: " + std::string(text));
    }
    return {*first, *last};
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

inline Tokenizer build_tokenizer(const std::vector<std::string>& corpus) {
  return Tokenizer::build(corpus);
}

// ---------------------------------------------------------------------------
// Test prompts

enum class TemplateKind { HEADLINE, QA };

inline std::string kind_name(TemplateKind k) { return k == TemplateKind::HEADLINE ? "headline" : "qa"; }

inline std::optional<TemplateKind> parse_template_kind(std::string_view s) {
  if (s == "headline" || s == "HEADLINE") return TemplateKind::HEADLINE;
  if (s == "qa" || s == "QA") return TemplateKind::QA;
  return std::nullopt;
}

struct AnnotatedPrompt {
  int id = 0;
  int record_id = 0;
  TemplateKind kind = TemplateKind::HEADLINE;
  bool reversed = false;
  std::string text;
  std::vector<int> token_ids;  // starts with <eos> as a sequence start marker
  std::pair<std::size_t, std::size_t> fe_span;       // token positions in token_ids
  std::pair<std::size_t, std::size_t> fe_char_span;  // bytes of text
  std::string subject;
  std::string target_text;
  int target_token = 0;

  std::size_t length() const { return token_ids.size(); }
};

inline nlohmann::ordered_json prompt_to_json(const AnnotatedPrompt& p) {
  return {{"id", p.id},
          {"record_id", p.record_id},
          {"kind", kind_name(p.kind)},
          {"reversed", p.reversed},
          {"text", p.text},
          {"token_ids", p.token_ids},
          {"fe_span", {p.fe_span.first, p.fe_span.second}},
          {"fe_char_span", {p.fe_char_span.first, p.fe_char_span.second}},
          {"subject", p.subject},
          {"target_text", p.target_text},
          {"target_token", p.target_token}};
}

inline AnnotatedPrompt prompt_from_json(const nlohmann::json& j) {
  AnnotatedPrompt p;
  p.id = j.at("id");
  p.record_id = j.at("record_id");
  auto kind = parse_template_kind(j.at("kind").get<std::string>());
  if (!kind) throw FormatError("bad prompt kind");
  p.kind = *kind;
  p.reversed = j.value("reversed", false);
  p.text = j.at("text");
  p.token_ids = j.at("token_ids").get<std::vector<int>>();
  auto fe = j.at("fe_span");
  p.fe_span = {fe.at(0), fe.at(1)};
  auto fc = j.at("fe_char_span");
  p.fe_char_span = {fc.at(0), fc.at(1)};
  p.subject = j.value("subject", "");
  p.target_text = j.at("target_text");
  p.target_token = j.at("target_token");
  if (p.fe_span.first >= p.fe_span.second || p.fe_span.second > p.token_ids.size()) {
    throw FormatError("prompt " + std::to_string(p.id) + " has an FE span outside its tokens");
  }
  return p;
}

// Prompt text up to (not including) the object's name.
inline std::string prompt_prefix(TemplateKind kind) {
  return kind == TemplateKind::HEADLINE ? "" : "Q: Who stars in a movie with ";
}
inline std::string prompt_suffix(TemplateKind kind) {
  return kind == TemplateKind::HEADLINE ? " stars in a movie with" : "? A: An actor named";
}
inline std::string prompt_text(TemplateKind kind, std::string_view subject) {
  return prompt_prefix(kind) + std::string(subject) + prompt_suffix(kind);
}

// The prompt asks for second_actor given first_actor, or the reverse. The
// target is the first token of the object name as it appears after a space.
inline std::vector<AnnotatedPrompt> render_test_prompts(const std::vector<RelationRecord>& records,
                                                        TemplateKind kind, const Tokenizer& tok,
                                                        bool reversed = false) {
  std::vector<AnnotatedPrompt> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    const std::string& subject = reversed ? r.second_actor : r.first_actor;
    const std::string& object = reversed ? r.first_actor : r.second_actor;
    AnnotatedPrompt p;
    p.id = static_cast<int>(out.size());
    p.record_id = r.id;
    p.kind = kind;
    p.reversed = reversed;
    p.text = prompt_text(kind, subject);
    p.subject = subject;
    const std::size_t b = prompt_prefix(kind).size();
    p.fe_char_span = {b, b + subject.size()};
    auto body = tok.encode(p.text);
    for (int id : body) {
      if (id == Tokenizer::kUnk) throw DataError("prompt has tokens outside vocab: " + p.text);
    }
    p.token_ids.push_back(Tokenizer::kEos);
    p.token_ids.insert(p.token_ids.end(), body.begin(), body.end());
    auto span = tok.token_span(p.text, p.fe_char_span.first, p.fe_char_span.second);
    p.fe_span = {span.first + 1, span.second + 1};
    auto obj = split_tokens(" " + object);
    if (obj.empty()) throw DataError("empty object name in record " + std::to_string(r.id));
    p.target_text = obj[0].text;
    if (!tok.contains(p.target_text)) {
      throw DataError("target token '" + p.target_text + "' is not in the vocabulary");
    }
    p.target_token = tok.id(p.target_text);
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Files

inline void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  for (const auto& l : lines) f << l << '\n';
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty() && line[0] != '#') out.push_back(line);
  }
  return out;
}

inline std::vector<RelationRecord> read_records(const std::filesystem::path& path) {
  std::vector<RelationRecord> out;
  for (const auto& l : read_lines(path)) {
    try {
      out.push_back(nlohmann::json::parse(l).get<RelationRecord>());
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad metadata line in " + path.string() + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<AnnotatedPrompt> read_prompts(const std::filesystem::path& path) {
  std::vector<AnnotatedPrompt> out;
  for (const auto& l : read_lines(path)) {
    try {
      out.push_back(prompt_from_json(nlohmann::json::parse(l)));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad prompt line in " + path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace graftlab
