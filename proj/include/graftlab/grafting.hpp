#pragma once

// Dynamic weight grafting: per-position, per-component choice among several
// registered weight sets, driven token by token through the KV cache. Also the
// static merge and directional patch baselines.

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "graftlab/checkpoint.hpp"
#include "graftlab/error.hpp"
#include "graftlab/model.hpp"
#include "graftlab/util.hpp"
#include "json.hpp"

namespace graftlab {

// ---------------------------------------------------------------------------
// Registry

class WeightRegistry {
 public:
  std::size_t add(std::string name, std::shared_ptr<const ModelParams> params) {
    if (!params) throw ConfigError("null weight set " + name);
    if (find(name)) throw ConfigError("weight set " + name + " registered twice");
    if (!sets_.empty() && !(params->config() == sets_[0]->config())) {
      throw ConfigError("weight set " + name + " has a different model config than " + names_[0]);
    }
    names_.push_back(std::move(name));
    sets_.push_back(std::move(params));
    refresh();
    return sets_.size() - 1;
  }
  std::size_t add(std::string name, ModelParams params) {
    return add(std::move(name), std::make_shared<const ModelParams>(std::move(params)));
  }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return i;
    return std::nullopt;
  }
  std::size_t index(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw ConfigError("unknown weight set '" + std::string(name) + "'");
  }

  std::size_t size() const { return sets_.size(); }
  bool empty() const { return sets_.empty(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const ModelParams& at(std::size_t i) const { return *sets_.at(i); }
  const ModelParams& at(std::string_view name) const { return at(index(name)); }
  const ModelConfig& config() const {
    if (sets_.empty()) throw ConfigError("empty weight registry");
    return sets_[0]->config();
  }
  std::span<const ModelParams* const> sources() const { return raw_; }

 private:
  void refresh() {
    raw_.clear();
    for (auto& s : sets_) raw_.push_back(s.get());
  }

  std::vector<std::string> names_;
  std::vector<std::shared_ptr<const ModelParams>> sets_;
  std::vector<const ModelParams*> raw_;
};

// ---------------------------------------------------------------------------
// Graft masks

class GraftMask {
 public:
  GraftMask(std::size_t length, std::size_t n_slots, std::size_t default_source)
      : length_(length), n_slots_(n_slots), default_(default_source),
        cells_(length * n_slots, static_cast<std::uint16_t>(default_source)) {}

  std::size_t length() const { return length_; }
  std::size_t slot_count() const { return n_slots_; }
  std::size_t default_source() const { return default_; }

  // Positions past the mask length use the default source.
  std::size_t source(std::size_t pos, std::size_t slot) const {
    if (slot >= n_slots_) throw IndexError("mask slot out of range");
    return pos < length_ ? cells_[pos * n_slots_ + slot] : default_;
  }
  void set(std::size_t pos, std::size_t slot, std::size_t src) {
    if (pos >= length_ || slot >= n_slots_) throw IndexError("mask cell out of range");
    cells_[pos * n_slots_ + slot] = static_cast<std::uint16_t>(src);
  }

  std::vector<std::size_t> row(std::size_t pos) const {
    std::vector<std::size_t> r(n_slots_);
    for (std::size_t s = 0; s < n_slots_; ++s) r[s] = source(pos, s);
    return r;
  }

  std::string hash() const {
    Fnv1a h;
    h.update_u64(length_);
    h.update_u64(n_slots_);
    h.update_u64(default_);
    for (auto c : cells_) h.update_u64(c);
    return h.hex();
  }

  friend bool operator==(const GraftMask&, const GraftMask&) = default;

 private:
  std::size_t length_;
  std::size_t n_slots_;
  std::size_t default_;
  std::vector<std::uint16_t> cells_;
};

// What a scheme needs to know about a prompt.
struct PromptAnnotation {
  std::size_t length = 0;
  std::optional<std::pair<std::size_t, std::size_t>> fe_span;
};

// ---------------------------------------------------------------------------
// Position selectors

struct PositionSelector {
  enum class Kind { FIRST_ENTITY, LAST_TOKEN, ALL, NONE, EXPLICIT, UNION, COMPLEMENT };

  Kind kind = Kind::NONE;
  std::vector<PositionSelector> operands;  // UNION, COMPLEMENT
  std::vector<std::size_t> positions;      // EXPLICIT

  static PositionSelector first_entity() { return {Kind::FIRST_ENTITY, {}, {}}; }
  static PositionSelector last_token() { return {Kind::LAST_TOKEN, {}, {}}; }
  static PositionSelector all() { return {Kind::ALL, {}, {}}; }
  static PositionSelector none() { return {Kind::NONE, {}, {}}; }
  static PositionSelector explicit_list(std::vector<std::size_t> p) {
    return {Kind::EXPLICIT, {}, std::move(p)};
  }
  static PositionSelector union_of(std::vector<PositionSelector> s) {
    return {Kind::UNION, std::move(s), {}};
  }
  // Every position not selected by any operand.
  static PositionSelector complement_of(std::vector<PositionSelector> s) {
    return {Kind::COMPLEMENT, std::move(s), {}};
  }

  friend bool operator==(const PositionSelector&, const PositionSelector&) = default;

  // Membership flags over [0, a.length).
  std::vector<bool> resolve(const PromptAnnotation& a) const {
    std::vector<bool> in(a.length, false);
    switch (kind) {
      case Kind::FIRST_ENTITY: {
        if (!a.fe_span) throw ConfigError("scheme needs a first-entity span but the prompt has none");
        auto [b, e] = *a.fe_span;
        if (b >= e || e > a.length) throw ConfigError("first-entity span outside the prompt");
        for (std::size_t p = b; p < e; ++p) in[p] = true;
        break;
      }
      case Kind::LAST_TOKEN:
        if (a.length > 0) in[a.length - 1] = true;
        break;
      case Kind::ALL: std::fill(in.begin(), in.end(), true); break;
      case Kind::NONE: break;
      case Kind::EXPLICIT:
        for (auto p : positions) {
          if (p >= a.length) {
            throw ConfigError("explicit position " + std::to_string(p) + " outside prompt of " +
                              std::to_string(a.length));
          }
          in[p] = true;
        }
        break;
      case Kind::UNION:
      case Kind::COMPLEMENT: {
        for (const auto& op : operands) {
          auto sub = op.resolve(a);
          for (std::size_t p = 0; p < a.length; ++p) in[p] = in[p] || sub[p];
        }
        if (kind == Kind::COMPLEMENT) in.flip();
        break;
      }
    }
    return in;
  }

  // Short names: FE, LT, ALL, NONE, FE+LT, FE^C, (FE+LT)^C ...
  static PositionSelector parse(std::string_view s) {
    auto trim = [](std::string_view v) {
      while (!v.empty() && v.front() == ' ') v.remove_prefix(1);
      while (!v.empty() && v.back() == ' ') v.remove_suffix(1);
      return v;
    };
    s = trim(s);
    if (s.size() > 2 && s.substr(s.size() - 2) == "^C") {
      auto inner = trim(s.substr(0, s.size() - 2));
      if (inner.size() >= 2 && inner.front() == '(' && inner.back() == ')') {
        inner = inner.substr(1, inner.size() - 2);
      }
      auto sel = parse(inner);
      if (sel.kind == Kind::UNION) return complement_of(std::move(sel.operands));
      return complement_of({std::move(sel)});
    }
    std::vector<PositionSelector> parts;
    std::size_t start = 0;
    int depth = 0;
    for (std::size_t i = 0; i <= s.size(); ++i) {
      if (i < s.size() && s[i] == '(') ++depth;
      if (i < s.size() && s[i] == ')') --depth;
      if (i == s.size() || (s[i] == '+' && depth == 0)) {
        auto tok = trim(s.substr(start, i - start));
        start = i + 1;
        if (tok == "FE") parts.push_back(first_entity());
        else if (tok == "LT") parts.push_back(last_token());
        else if (tok == "ALL") parts.push_back(all());
        else if (tok == "NONE") parts.push_back(none());
        else if (tok.size() > 2 && tok.front() == '(' && tok.back() == ')')
          parts.push_back(parse(tok.substr(1, tok.size() - 2)));
        else if (tok.size() > 2 && tok.substr(tok.size() - 2) == "^C")
          parts.push_back(parse(tok));
        else throw ConfigError("unknown position selector '" + std::string(tok) + "'");
      }
    }
    if (parts.size() == 1) return std::move(parts[0]);
    return union_of(std::move(parts));
  }

  std::string to_string() const {
    switch (kind) {
      case Kind::FIRST_ENTITY: return "FE";
      case Kind::LAST_TOKEN: return "LT";
      case Kind::ALL: return "ALL";
      case Kind::NONE: return "NONE";
      case Kind::EXPLICIT: {
        std::string out = "{";
        for (std::size_t i = 0; i < positions.size(); ++i)
          out += (i ? "," : "") + std::to_string(positions[i]);
        return out + "}";
      }
      case Kind::UNION:
      case Kind::COMPLEMENT: {
        std::string out;
        for (std::size_t i = 0; i < operands.size(); ++i) out += (i ? "+" : "") + operands[i].to_string();
        if (kind == Kind::UNION) return out;
        return operands.size() == 1 && operands[0].kind != Kind::UNION ? out + "^C"
                                                                        : "(" + out + ")^C";
      }
    }
    return "";
  }
};

inline nlohmann::json selector_to_json(const PositionSelector& s) {
  using K = PositionSelector::Kind;
  if (s.kind == K::EXPLICIT) return {{"explicit", s.positions}};
  bool named = true;
  for (const auto& op : s.operands) named = named && op.kind != K::EXPLICIT;
  if (named) return s.to_string();
  nlohmann::json ops = nlohmann::json::array();
  for (const auto& op : s.operands) ops.push_back(selector_to_json(op));
  return {{s.kind == K::UNION ? "union" : "complement", ops}};
}

inline PositionSelector selector_from_json(const nlohmann::json& j) {
  if (j.is_string()) return PositionSelector::parse(j.get<std::string>());
  if (j.is_object()) {
    if (j.contains("explicit")) {
      return PositionSelector::explicit_list(j.at("explicit").get<std::vector<std::size_t>>());
    }
    for (const char* key : {"union", "complement"}) {
      if (!j.contains(key)) continue;
      std::vector<PositionSelector> ops;
      for (const auto& o : j.at(key)) ops.push_back(selector_from_json(o));
      return std::string(key) == "union" ? PositionSelector::union_of(std::move(ops))
                                         : PositionSelector::complement_of(std::move(ops));
    }
  }
  throw ConfigError("bad position selector " + j.dump());
}

// ---------------------------------------------------------------------------
// Component groups and layer ranges

enum class ComponentGroup { ATTN, O, FFN, FULL_LAYER, ALL };

inline std::optional<ComponentGroup> parse_group(std::string_view s) {
  if (s == "ATTN") return ComponentGroup::ATTN;
  if (s == "O") return ComponentGroup::O;
  if (s == "FFN") return ComponentGroup::FFN;
  if (s == "FULL_LAYER") return ComponentGroup::FULL_LAYER;
  if (s == "ALL") return ComponentGroup::ALL;
  return std::nullopt;
}

struct LayerRange {
  enum class Kind { ALL, FIRST_HALF, LAST_HALF, LAST_QUARTER, EXPLICIT };
  Kind kind = Kind::ALL;
  int begin = 0;
  int end = 0;

  static LayerRange all() { return {}; }
  static LayerRange explicit_range(int b, int e) { return {Kind::EXPLICIT, b, e}; }

  friend bool operator==(const LayerRange&, const LayerRange&) = default;

  // Half and quarter ranges keep at least one layer.
  std::pair<int, int> resolve(int n_layers) const {
    switch (kind) {
      case Kind::ALL: return {0, n_layers};
      case Kind::FIRST_HALF: return {0, std::max(1, n_layers / 2)};
      case Kind::LAST_HALF: return {n_layers - std::max(1, n_layers / 2), n_layers};
      case Kind::LAST_QUARTER: return {n_layers - std::max(1, n_layers / 4), n_layers};
      case Kind::EXPLICIT:
        if (begin >= end) throw ConfigError("empty layer range");
        if (begin < 0 || end > n_layers) {
          throw ConfigError("layer range [" + std::to_string(begin) + ", " + std::to_string(end) +
                            ") outside a " + std::to_string(n_layers) + "-layer model");
        }
        return {begin, end};
    }
    return {0, n_layers};
  }
};

inline nlohmann::json layers_to_json(const LayerRange& r) {
  switch (r.kind) {
    case LayerRange::Kind::ALL: return "all";
    case LayerRange::Kind::FIRST_HALF: return "first_half";
    case LayerRange::Kind::LAST_HALF: return "last_half";
    case LayerRange::Kind::LAST_QUARTER: return "last_quarter";
    case LayerRange::Kind::EXPLICIT: return {r.begin, r.end};
  }
  return "all";
}

inline LayerRange layers_from_json(const nlohmann::json& j) {
  if (j.is_null()) return LayerRange::all();
  if (j.is_string()) {
    std::string s = j;
    if (s == "all") return LayerRange::all();
    if (s == "first_half") return {LayerRange::Kind::FIRST_HALF, 0, 0};
    if (s == "last_half") return {LayerRange::Kind::LAST_HALF, 0, 0};
    if (s == "last_quarter") return {LayerRange::Kind::LAST_QUARTER, 0, 0};
  }
  if (j.is_array() && j.size() == 2) return LayerRange::explicit_range(j[0], j[1]);
  throw ConfigError("bad layer range " + j.dump());
}

// Fixed expansion: ATTN = {W_Q, W_K, W_V}; O = {W_O}; FFN = {FFN_UP,
// FFN_DOWN}; FULL_LAYER = all eight per-layer kinds; ALL = FULL_LAYER plus the
// four global components. Norms only enter through FULL_LAYER and ALL.
inline std::set<ComponentId> expand_group(ComponentGroup group, const LayerRange& range,
                                          const ModelConfig& config) {
  auto [b, e] = range.resolve(config.n_layers);
  std::vector<ComponentKind> kinds;
  switch (group) {
    case ComponentGroup::ATTN:
      kinds = {ComponentKind::W_Q, ComponentKind::W_K, ComponentKind::W_V};
      break;
    case ComponentGroup::O: kinds = {ComponentKind::W_O}; break;
    case ComponentGroup::FFN: kinds = {ComponentKind::FFN_UP, ComponentKind::FFN_DOWN}; break;
    case ComponentGroup::FULL_LAYER:
    case ComponentGroup::ALL: kinds.assign(kLayerKinds.begin(), kLayerKinds.end()); break;
  }
  std::set<ComponentId> out;
  for (int l = b; l < e; ++l)
    for (auto k : kinds) out.insert(ComponentId::at(l, k));
  if (group == ComponentGroup::ALL) {
    for (auto k : kGlobalKinds) out.insert(ComponentId::global(k));
  }
  return out;
}

// A clause component item: a group name, a bare per-layer kind (expanded over
// the clause's layers), or a fully qualified component ("L3.W_O", "EMBED").
inline std::set<ComponentId> expand_component_item(std::string_view item, const LayerRange& range,
                                                   const ModelConfig& config) {
  if (auto g = parse_group(item)) return expand_group(*g, range, config);
  if (auto k = parse_kind(item)) {
    if (is_global(*k)) return {ComponentId::global(*k)};
    auto [b, e] = range.resolve(config.n_layers);
    std::set<ComponentId> out;
    for (int l = b; l < e; ++l) out.insert(ComponentId::at(l, *k));
    return out;
  }
  ComponentId id;
  try {
    id = ComponentId::parse(item);
  } catch (const FormatError&) {
    throw ConfigError("unknown component or group '" + std::string(item) + "'");
  }
  config.slot(id);
  return {id};
}

// ---------------------------------------------------------------------------
// Scheme specs

struct SchemeClause {
  PositionSelector positions;
  std::vector<std::string> components;
  LayerRange layers;
  std::string source;
  // Grafted positions also take EMBED and POS_EMBED from the source.
  bool embed = true;

  friend bool operator==(const SchemeClause&, const SchemeClause&) = default;
};

struct SchemeSpec {
  std::string name;
  std::vector<SchemeClause> clauses;
  std::string default_source;
  std::optional<std::string> unembed_source;
  std::optional<std::string> final_ln_source;

  friend bool operator==(const SchemeSpec&, const SchemeSpec&) = default;

  std::set<std::string> sources() const {
    std::set<std::string> s{default_source};
    for (const auto& c : clauses) s.insert(c.source);
    if (unembed_source) s.insert(*unembed_source);
    if (final_ln_source) s.insert(*final_ln_source);
    return s;
  }
};

inline nlohmann::ordered_json scheme_to_json(const SchemeSpec& s) {
  nlohmann::ordered_json j;
  j["name"] = s.name;
  j["default_source"] = s.default_source;
  if (s.unembed_source) j["unembed_source"] = *s.unembed_source;
  if (s.final_ln_source) j["final_ln_source"] = *s.final_ln_source;
  j["clauses"] = nlohmann::ordered_json::array();
  for (const auto& c : s.clauses) {
    nlohmann::ordered_json cj;
    cj["positions"] = selector_to_json(c.positions);
    cj["components"] = c.components;
    cj["layers"] = layers_to_json(c.layers);
    cj["source"] = c.source;
    cj["embed"] = c.embed;
    j["clauses"].push_back(cj);
  }
  return j;
}

inline SchemeSpec scheme_from_json(const nlohmann::json& j) {
  try {
    SchemeSpec s;
    s.name = j.at("name");
    s.default_source = j.at("default_source");
    if (j.contains("unembed_source")) s.unembed_source = j.at("unembed_source").get<std::string>();
    if (j.contains("final_ln_source")) s.final_ln_source = j.at("final_ln_source").get<std::string>();
    for (const auto& cj : j.value("clauses", nlohmann::json::array())) {
      SchemeClause c;
      c.positions = selector_from_json(cj.at("positions"));
      const auto& comp = cj.at("components");
      if (comp.is_string()) c.components = {comp.get<std::string>()};
      else c.components = comp.get<std::vector<std::string>>();
      c.layers = layers_from_json(cj.value("layers", nlohmann::json("all")));
      c.source = cj.at("source");
      c.embed = cj.value("embed", true);
      s.clauses.push_back(std::move(c));
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad scheme spec: ") + e.what());
  }
}

// Later clauses override earlier ones on overlapping cells.
inline GraftMask build_mask(const SchemeSpec& scheme, const PromptAnnotation& ann,
                            const WeightRegistry& registry) {
  const ModelConfig& cfg = registry.config();
  const std::size_t n_slots = cfg.slot_count();
  GraftMask mask(ann.length, n_slots, registry.index(scheme.default_source));
  const std::size_t embed_slot = cfg.slot(ComponentId::global(ComponentKind::EMBED));
  const std::size_t pos_slot = cfg.slot(ComponentId::global(ComponentKind::POS_EMBED));
  for (const auto& clause : scheme.clauses) {
    const std::size_t src = registry.index(clause.source);
    std::set<std::size_t> slots;
    for (const auto& item : clause.components)
      for (auto id : expand_component_item(item, clause.layers, cfg)) slots.insert(cfg.slot(id));
    if (clause.embed) {
      slots.insert(embed_slot);
      slots.insert(pos_slot);
    }
    auto in = clause.positions.resolve(ann);
    for (std::size_t p = 0; p < ann.length; ++p) {
      if (!in[p]) continue;
      for (auto s : slots) mask.set(p, s, src);
    }
  }
  auto pin = [&](ComponentKind k, const std::optional<std::string>& name) {
    const std::size_t src = registry.index(name.value_or(scheme.default_source));
    const std::size_t slot = cfg.slot(ComponentId::global(k));
    for (std::size_t p = 0; p < ann.length; ++p) mask.set(p, slot, src);
  };
  pin(ComponentKind::UNEMBED, scheme.unembed_source);
  pin(ComponentKind::FINAL_LN, scheme.final_ln_source);
  return mask;
}

// ---------------------------------------------------------------------------
// Built-in schemes

inline SchemeSpec position_scheme(const std::string& name, const std::string& base = "PRE",
                                  const std::string& donor = "SFT") {
  if (name == "PRE") return {name, {}, base, std::nullopt, std::nullopt};
  if (name == "SFT") return {name, {}, donor, std::nullopt, std::nullopt};
  static const std::set<std::string> kNamed = {"FE", "LT", "FE+LT", "(FE+LT)^C", "FE^C", "LT^C"};
  if (!kNamed.count(name)) throw ConfigError("unknown scheme '" + name + "'");
  SchemeClause c{PositionSelector::parse(name), {"FULL_LAYER"}, LayerRange::all(), donor, true};
  return {name, {c}, base, std::nullopt, std::nullopt};
}

inline std::vector<SchemeSpec> position_suite() {
  std::vector<SchemeSpec> out;
  for (const char* n : {"PRE", "SFT", "FE", "LT", "FE+LT", "(FE+LT)^C", "FE^C", "LT^C"})
    out.push_back(position_scheme(n));
  return out;
}

// Last-token component grafts from the both-direction model ("SFT") onto the
// one-direction model ("PRE").
inline std::vector<SchemeSpec> reversal_suite() {
  std::vector<SchemeSpec> out;
  out.push_back(position_scheme("PRE"));
  out.push_back(position_scheme("SFT"));
  auto lt = [](std::string name, std::vector<std::string> comps, LayerRange layers) {
    SchemeClause c{PositionSelector::last_token(), std::move(comps), layers, "SFT", false};
    return SchemeSpec{std::move(name), {c}, "PRE", std::nullopt, std::nullopt};
  };
  const LayerRange all = LayerRange::all();
  const LayerRange quarter{LayerRange::Kind::LAST_QUARTER, 0, 0};
  out.push_back(lt("LT FULL_LAYER", {"FULL_LAYER"}, all));
  out.push_back(lt("LT ATTN+O+FFN", {"ATTN", "O", "FFN"}, all));
  out.push_back(lt("LT O+FFN", {"O", "FFN"}, all));
  out.push_back(lt("LT ATTN+FFN", {"ATTN", "FFN"}, all));
  out.push_back(lt("LT FFN", {"FFN"}, all));
  out.push_back(lt("LT O", {"O"}, all));
  out.push_back(lt("LT ATTN", {"ATTN"}, all));
  out.push_back(lt("LT O+FFN_UP", {"O", "FFN_UP"}, all));
  out.push_back(lt("LT O+FFN_DOWN", {"O", "FFN_DOWN"}, all));
  out.push_back(lt("LT O+FFN last quarter", {"O", "FFN"}, quarter));
  out.push_back(lt("LT ATTN+O+FFN last quarter", {"ATTN", "O", "FFN"}, quarter));
  return out;
}

// Three weight sets: PRE (recipient), TASK (same relation, disjoint entities)
// and RELATION (the probed relations). Every hybrid scheme grafts TASK ATTN
// and RELATION O+FFN at the last token over the last half of layers, then
// adds TASK components over all layers at the first entity.
inline std::vector<SchemeSpec> hybrid_suite() {
  std::vector<SchemeSpec> out;
  out.push_back({"PRE", {}, "PRE", std::nullopt, std::nullopt});
  out.push_back({"RELATION", {}, "RELATION", std::nullopt, std::nullopt});
  const LayerRange half{LayerRange::Kind::LAST_HALF, 0, 0};
  std::vector<SchemeClause> lt = {
      {PositionSelector::last_token(), {"ATTN"}, half, "TASK", false},
      {PositionSelector::last_token(), {"O", "FFN"}, half, "RELATION", false}};
  out.push_back({"HYBRID LT", lt, "PRE", std::nullopt, std::nullopt});
  for (std::vector<std::string> fe : std::vector<std::vector<std::string>>{
           {"ATTN"}, {"O"}, {"FFN"}, {"ATTN", "O"}, {"ATTN", "O", "FFN"}, {"FULL_LAYER"}}) {
    std::string name = "HYBRID LT + FE ";
    for (std::size_t i = 0; i < fe.size(); ++i) name += (i ? "+" : "") + fe[i];
    std::vector<SchemeClause> clauses = {
        {PositionSelector::first_entity(), fe, LayerRange::all(), "TASK", false}};
    clauses.insert(clauses.end(), lt.begin(), lt.end());
    out.push_back({name, clauses, "PRE", std::nullopt, std::nullopt});
  }
  return out;
}

inline std::vector<std::string> suite_sources(const std::vector<SchemeSpec>& suite) {
  std::set<std::string> s;
  for (const auto& sc : suite) {
    auto part = sc.sources();
    s.insert(part.begin(), part.end());
  }
  return {s.begin(), s.end()};
}

// ---------------------------------------------------------------------------
// Grafted execution

struct GraftedRun {
  std::vector<Tensor> logits;  // one [vocab] row per position (only the last if not kept)
  KVCache cache;
};

// Runs the prompt token by token. Position p uses the parameters the mask
// assigns to row p for everything it computes, including the K/V it caches.
inline GraftedRun run_grafted(std::span<const int> prompt, const GraftMask& mask,
                              const WeightRegistry& registry, bool keep_all_logits = false) {
  if (prompt.size() != mask.length()) {
    throw DimensionError("prompt has " + std::to_string(prompt.size()) + " tokens but mask has " +
                         std::to_string(mask.length()) + " positions");
  }
  if (prompt.empty()) throw DimensionError("empty prompt");
  const ModelConfig& cfg = registry.config();
  if (mask.slot_count() != cfg.slot_count()) throw DimensionError("mask built for another config");
  for (std::size_t p = 0; p < mask.length(); ++p)
    for (std::size_t s = 0; s < mask.slot_count(); ++s)
      if (mask.source(p, s) >= registry.size()) throw ConfigError("mask references unknown source");
  GraftedRun run{{}, KVCache(cfg)};
  for (std::size_t p = 0; p < prompt.size(); ++p) {
    auto row = mask.row(p);
    ParamView view(registry.sources(), row);
    Tensor logits = forward_step(prompt[p], run.cache, view);
    if (keep_all_logits || p + 1 == prompt.size()) run.logits.push_back(std::move(logits));
  }
  return run;
}

inline std::vector<double> softmax_vector(std::span<const double> logits) {
  std::vector<double> p(logits.begin(), logits.end());
  kernels::softmax_row(p.data(), p.size());
  return p;
}

inline std::vector<double> grafted_next_token_dist(std::span<const int> prompt, const GraftMask& mask,
                                                   const WeightRegistry& registry) {
  auto run = run_grafted(prompt, mask, registry);
  return softmax_vector(run.logits.back().data);
}

// ---------------------------------------------------------------------------
// Static baselines

inline void require_same_config(const ModelParams& a, const ModelParams& b) {
  if (!(a.config() == b.config())) throw ConfigError("weight sets have different model configs");
}

// theta_c = other_c for c in mask, base_c otherwise.
inline ModelParams static_merge(const ModelParams& base, const ModelParams& other,
                                const std::set<ComponentId>& component_mask) {
  require_same_config(base, other);
  ModelParams out = base;
  for (const auto& id : component_mask) out.at(id) = other.at(id);
  return out;
}

// theta_pre + gamma * (theta_ft - theta_pre), gamma the 0/1 indicator of the mask.
inline ModelParams task_vector_merge(const ModelParams& pre, const ModelParams& ft,
                                     const std::set<ComponentId>& component_mask) {
  require_same_config(pre, ft);
  ModelParams out = pre;
  const ModelConfig& cfg = pre.config();
  for (std::size_t s = 0; s < pre.slot_count(); ++s) {
    const double gamma = component_mask.count(cfg.component_at(s)) ? 1.0 : 0.0;
    for (auto part : {&ComponentTensors::weight, &ComponentTensors::bias}) {
      const auto& a = pre.slot(s).*part;
      const auto& b = ft.slot(s).*part;
      auto& o = out.slot(s).*part;
      for (std::size_t i = 0; i < o.size(); ++i) o.data[i] = a.data[i] + gamma * (b.data[i] - a.data[i]);
    }
  }
  return out;
}

// Replaces the component of lambda_a along unit vector v with lambda_b's.
inline std::vector<double> directional_patch(std::span<const double> lambda_a,
                                             std::span<const double> lambda_b,
                                             std::span<const double> v) {
  if (lambda_a.size() != lambda_b.size() || lambda_a.size() != v.size()) {
    throw DimensionError("directional_patch: vectors differ in length");
  }
  double norm2 = 0.0, da = 0.0, db = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    norm2 += v[i] * v[i];
    da += lambda_a[i] * v[i];
    db += lambda_b[i] * v[i];
  }
  if (std::abs(std::sqrt(norm2) - 1.0) > 1e-9) {
    throw ConfigError("directional_patch: v must have unit norm");
  }
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = lambda_a[i] - da * v[i] + db * v[i];
  return out;
}

}  // namespace graftlab
