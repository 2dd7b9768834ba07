#include "lmm/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>
#include <tuple>

namespace lmm {

namespace {

constexpr std::string_view kHeaderMagic = "LMMVOCAB";
constexpr int kFormatVersion = 1;
constexpr std::string_view kSplitRule = "ICD10CM:category3+char";
constexpr std::string_view kExtensionPrefix = "DX-X:";

constexpr CodeSystem kAllSystems[] = {
    CodeSystem::ICD10CM,  CodeSystem::ICD10PCS,         CodeSystem::CPT4,
    CodeSystem::HCPCS,    CodeSystem::NDC,              CodeSystem::PLACE_OF_SERVICE,
    CodeSystem::DEMOGRAPHIC, CodeSystem::COST,          CodeSystem::TIME_GAP,
    CodeSystem::STRUCTURAL,
};

bool is_alnum_upper(char c) { return std::isdigit(static_cast<unsigned char>(c)) || (c >= 'A' && c <= 'Z'); }
bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }
bool is_upper(char c) { return c >= 'A' && c <= 'Z'; }

std::string upper(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return out;
}

Error malformed(CodeSystem system, std::string_view code, std::string_view why) {
  return Error(ErrorCode::MalformedCode, std::string(to_string(system)) + " code '" +
                                             std::string(code) + "': " + std::string(why));
}

int parse_int(std::string_view s) {
  int v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw Error(ErrorCode::FormatError, "expected integer, got '" + std::string(s) + "'");
  }
  return v;
}

double parse_double(std::string_view s) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw Error(ErrorCode::FormatError, "expected number, got '" + std::string(s) + "'");
  }
  return v;
}

std::vector<double> make_cost_edges(int top_half_decades) {
  std::vector<double> edges;
  for (int k = 0; k <= top_half_decades; ++k) edges.push_back(std::pow(10.0, k / 2.0));
  return edges;
}

// Category plus extension characters of a canonical ICD-10 CM code.
std::pair<std::string, std::string> split_icd(std::string_view canonical) {
  std::string category(canonical.substr(0, 3));
  std::string ext;
  if (canonical.size() > 4) ext = std::string(canonical.substr(4));
  return {category, ext};
}

}  // namespace

std::string_view to_string(CodeSystem system) {
  switch (system) {
    case CodeSystem::ICD10CM: return "ICD10CM";
    case CodeSystem::ICD10PCS: return "ICD10PCS";
    case CodeSystem::CPT4: return "CPT4";
    case CodeSystem::HCPCS: return "HCPCS";
    case CodeSystem::NDC: return "NDC";
    case CodeSystem::PLACE_OF_SERVICE: return "PLACE_OF_SERVICE";
    case CodeSystem::DEMOGRAPHIC: return "DEMOGRAPHIC";
    case CodeSystem::COST: return "COST";
    case CodeSystem::TIME_GAP: return "TIME_GAP";
    case CodeSystem::STRUCTURAL: return "STRUCTURAL";
  }
  return "?";
}

CodeSystem parse_code_system(std::string_view name) {
  for (auto s : kAllSystems) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorCode::FormatError, "unknown code system '" + std::string(name) + "'");
}

std::string_view to_string(Sex sex) {
  switch (sex) {
    case Sex::F: return "F";
    case Sex::M: return "M";
    case Sex::U: return "U";
  }
  return "U";
}

Sex parse_sex(std::string_view text) {
  if (text == "F") return Sex::F;
  if (text == "M") return Sex::M;
  if (text == "U") return Sex::U;
  throw Error(ErrorCode::FormatError, "sex must be F, M or U, got '" + std::string(text) + "'");
}

std::string_view surface_prefix(CodeSystem system) {
  switch (system) {
    case CodeSystem::ICD10CM: return "DX:";
    case CodeSystem::ICD10PCS: return "PCS:";
    case CodeSystem::CPT4: return "CPT:";
    case CodeSystem::HCPCS: return "HCPCS:";
    case CodeSystem::NDC: return "NDC:";
    case CodeSystem::PLACE_OF_SERVICE: return "POS:";
    case CodeSystem::DEMOGRAPHIC: return "DEM:";
    case CodeSystem::COST: return "COST:";
    case CodeSystem::TIME_GAP: return "GAP:";
    case CodeSystem::STRUCTURAL: return "";
  }
  return "";
}

std::string cost_surface(std::size_t bucket) { return "COST:B" + std::to_string(bucket); }

std::string gap_surface(const std::vector<int>& lower_edges, std::size_t bucket) {
  const int lo = lower_edges.at(bucket);
  if (bucket + 1 == lower_edges.size()) return "GAP:D" + std::to_string(lo - 1) + "P";
  const int hi = lower_edges[bucket + 1] - 1;
  if (lo == hi) return "GAP:D" + std::to_string(lo);
  return "GAP:D" + std::to_string(lo) + "_" + std::to_string(hi);
}

std::string canonical_code(CodeSystem system, std::string_view raw) {
  const std::string code = upper(trim(raw));
  switch (system) {
    case CodeSystem::ICD10CM: {
      std::string bare;
      for (char c : code) {
        if (c != '.') bare.push_back(c);
      }
      if (bare.size() < 3) throw malformed(system, raw, "shorter than a category");
      if (bare.size() > 6) throw malformed(system, raw, "more than three characters after the category");
      if (code.find('.') != std::string::npos && code.find('.') != 3) {
        throw malformed(system, raw, "dot must follow the 3-character category");
      }
      if (!is_upper(bare[0]) || !is_digit(bare[1]) || !is_alnum_upper(bare[2])) {
        throw malformed(system, raw, "category must be letter, digit, alphanumeric");
      }
      for (char c : bare) {
        if (!is_alnum_upper(c)) throw malformed(system, raw, "non-alphanumeric character");
      }
      if (bare.size() == 3) return bare;
      return bare.substr(0, 3) + "." + bare.substr(3);
    }
    case CodeSystem::ICD10PCS:
      if (code.size() != 7 || !std::all_of(code.begin(), code.end(), is_alnum_upper)) {
        throw malformed(system, raw, "expected 7 alphanumeric characters");
      }
      return code;
    case CodeSystem::CPT4:
      if (code.size() != 5 || !std::all_of(code.begin(), code.begin() + 4, is_digit) ||
          !is_alnum_upper(code[4])) {
        throw malformed(system, raw, "expected 4 digits and an alphanumeric suffix");
      }
      return code;
    case CodeSystem::HCPCS:
      if (code.size() != 5 || !is_upper(code[0]) || !std::all_of(code.begin() + 1, code.end(), is_digit)) {
        throw malformed(system, raw, "expected a letter and 4 digits");
      }
      return code;
    case CodeSystem::NDC: {
      std::string digits;
      for (char c : code) {
        if (c != '-') digits.push_back(c);
      }
      if (digits.size() != 11 || !std::all_of(digits.begin(), digits.end(), is_digit)) {
        throw malformed(system, raw, "expected 11 digits");
      }
      return digits;
    }
    case CodeSystem::PLACE_OF_SERVICE:
      if (code.size() != 2 || !is_digit(code[0]) || !is_digit(code[1])) {
        throw malformed(system, raw, "expected 2 digits");
      }
      return code;
    case CodeSystem::DEMOGRAPHIC:
      if (code == "SEX_F" || code == "SEX_M" || code == "SEX_U") return code;
      if (starts_with(code, "AGE_") && code.size() > 4 &&
          std::all_of(code.begin() + 4, code.end(), is_digit) && code.size() <= 8) {
        return "AGE_" + std::to_string(std::min(parse_int(std::string_view(code).substr(4)), kMaxAge));
      }
      throw malformed(system, raw, "expected SEX_F/SEX_M/SEX_U or AGE_<years>");
    case CodeSystem::COST:
      if (!code.empty()) throw malformed(system, raw, "cost events carry no code");
      return code;
    case CodeSystem::TIME_GAP:
    case CodeSystem::STRUCTURAL:
      break;
  }
  throw malformed(system, raw, "system carries no codes");
}

// ---------------------------------------------------------------------------

Vocabulary Vocabulary::build(const CodeLists& code_lists, const QuantizationConfig& config) {
  if (config.cost_top_half_decades < 1) {
    throw Error(ErrorCode::ConfigError, "cost_top_half_decades must be >= 1");
  }
  if (config.gap_lower_edges.size() < 2 || config.gap_lower_edges.front() != 0 ||
      !std::is_sorted(config.gap_lower_edges.begin(), config.gap_lower_edges.end()) ||
      std::adjacent_find(config.gap_lower_edges.begin(), config.gap_lower_edges.end()) !=
          config.gap_lower_edges.end()) {
    throw Error(ErrorCode::ConfigError, "gap edges must start at 0 and strictly increase");
  }

  std::map<CodeSystem, std::set<std::string>> surfaces;
  for (const auto& [system, codes] : code_lists) {
    switch (system) {
      case CodeSystem::DEMOGRAPHIC:
      case CodeSystem::COST:
      case CodeSystem::TIME_GAP:
      case CodeSystem::STRUCTURAL:
        throw Error(ErrorCode::MalformedCode,
                    std::string(to_string(system)) + " tokens are generated, not listed");
      default:
        break;
    }
    std::set<std::string> seen;
    auto& out = surfaces[system];
    for (const auto& raw : codes) {
      const std::string code = canonical_code(system, raw);
      if (!seen.insert(code).second) {
        throw Error(ErrorCode::DuplicateCode, std::string(to_string(system)) + " " + code);
      }
      if (system == CodeSystem::ICD10CM) {
        auto [category, ext] = split_icd(code);
        out.insert(std::string(surface_prefix(system)) + category);
        for (char c : ext) out.insert(std::string(kExtensionPrefix) + c);
      } else {
        out.insert(std::string(surface_prefix(system)) + code);
      }
    }
  }
  auto& dem = surfaces[CodeSystem::DEMOGRAPHIC];
  for (auto s : {Sex::F, Sex::M, Sex::U}) dem.insert("DEM:SEX_" + std::string(to_string(s)));
  for (int age = 0; age <= kMaxAge; ++age) dem.insert("DEM:AGE_" + std::to_string(age));

  Vocabulary v;
  v.cost_edges_ = make_cost_edges(config.cost_top_half_decades);
  v.gap_edges_ = config.gap_lower_edges;
  for (std::size_t b = 0; b <= v.cost_edges_.size(); ++b) surfaces[CodeSystem::COST].insert(cost_surface(b));
  for (std::size_t b = 0; b < v.gap_edges_.size(); ++b) {
    surfaces[CodeSystem::TIME_GAP].insert(gap_surface(v.gap_edges_, b));
  }

  for (const char* s : {"[PAD]", "[BOS]", "[EOS]", "[UNK]"}) {
    v.tokens_.push_back({static_cast<TokenId>(v.tokens_.size()), CodeSystem::STRUCTURAL, s});
  }
  for (auto system : kAllSystems) {
    auto it = surfaces.find(system);
    if (it == surfaces.end()) continue;
    for (const auto& s : it->second) {
      v.tokens_.push_back({static_cast<TokenId>(v.tokens_.size()), system, s});
    }
  }
  v.index();
  return v;
}

void Vocabulary::index() {
  by_surface_.clear();
  cost_ids_.assign(cost_edges_.size() + 1, -1);
  gap_ids_.assign(gap_edges_.size(), -1);
  cost_bucket_of_.assign(tokens_.size(), -1);
  gap_bucket_of_.assign(tokens_.size(), -1);
  for (const auto& t : tokens_) {
    if (!by_surface_.emplace(t.surface, t.id).second) {
      throw Error(ErrorCode::DuplicateCode, "surface " + t.surface);
    }
  }
  for (std::size_t b = 0; b < cost_ids_.size(); ++b) {
    cost_ids_[b] = id_of(cost_surface(b));
    cost_bucket_of_[static_cast<std::size_t>(cost_ids_[b])] = static_cast<int>(b);
  }
  for (std::size_t b = 0; b < gap_ids_.size(); ++b) {
    gap_ids_[b] = id_of(gap_surface(gap_edges_, b));
    gap_bucket_of_[static_cast<std::size_t>(gap_ids_[b])] = static_cast<int>(b);
  }
  for (TokenId s = 0; s < 4; ++s) {
    static const char* names[] = {"[PAD]", "[BOS]", "[EOS]", "[UNK]"};
    if (tokens_.size() <= static_cast<std::size_t>(s) || tokens_[s].surface != names[s]) {
      throw Error(ErrorCode::FormatError, "structural tokens must occupy ids 0..3");
    }
  }
}

const Token& Vocabulary::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw Error(ErrorCode::UnknownTokenId, "token id " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::optional<TokenId> Vocabulary::find(std::string_view surface) const {
  auto it = by_surface_.find(std::string(surface));
  if (it == by_surface_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocabulary::id_of(std::string_view surface) const {
  if (auto id = find(surface)) return *id;
  throw Error(ErrorCode::UnknownCode, "no token '" + std::string(surface) + "'");
}

std::size_t Vocabulary::count(CodeSystem kind) const {
  return static_cast<std::size_t>(
      std::count_if(tokens_.begin(), tokens_.end(), [&](const Token& t) { return t.kind == kind; }));
}

TokenId Vocabulary::lookup_or_unknown(std::string_view surface, UnknownPolicy policy,
                                      EncodeStats* stats, bool& substituted) const {
  if (auto id = find(surface)) return *id;
  if (policy == UnknownPolicy::Strict) {
    throw Error(ErrorCode::UnknownCode, "no token '" + std::string(surface) + "'");
  }
  if (!substituted && stats) ++stats->unknown_substitutions;
  substituted = true;
  return kUnk;
}

std::vector<TokenId> Vocabulary::encode_event(const MedicalEvent& event, UnknownPolicy policy,
                                              EncodeStats* stats) const {
  std::vector<TokenId> out;
  bool substituted = false;
  switch (event.system) {
    case CodeSystem::TIME_GAP:
    case CodeSystem::STRUCTURAL:
      throw Error(ErrorCode::InvalidEvent, "events cannot carry " + std::string(to_string(event.system)));
    case CodeSystem::COST:
      if (!event.paid) throw Error(ErrorCode::InvalidEvent, "COST event without a paid amount");
      out.push_back(quantize_cost(*event.paid));
      return out;
    case CodeSystem::DEMOGRAPHIC:
    case CodeSystem::ICD10CM:
      if (event.paid) {
        throw Error(ErrorCode::InvalidEvent,
                    std::string(to_string(event.system)) + " events cannot carry a paid amount");
      }
      break;
    default:
      break;
  }

  std::string code;
  try {
    code = canonical_code(event.system, event.code);
  } catch (const Error&) {
    if (policy == UnknownPolicy::Strict) {
      throw Error(ErrorCode::UnknownCode, std::string(to_string(event.system)) + " '" + event.code + "'");
    }
    if (stats) ++stats->unknown_substitutions;
    out.push_back(kUnk);
    if (event.paid) out.push_back(quantize_cost(*event.paid));
    return out;
  }

  if (event.system == CodeSystem::ICD10CM) {
    auto [category, ext] = split_icd(code);
    const TokenId cat = find(std::string(surface_prefix(event.system)) + category).value_or(-1);
    std::vector<TokenId> ext_ids;
    bool missing = cat < 0;
    for (char c : ext) {
      const TokenId e = find(std::string(kExtensionPrefix) + c).value_or(-1);
      missing = missing || e < 0;
      ext_ids.push_back(e);
    }
    if (missing) {
      out.push_back(lookup_or_unknown("DX:" + code, policy, stats, substituted));
    } else {
      out.push_back(cat);
      out.insert(out.end(), ext_ids.begin(), ext_ids.end());
    }
  } else {
    out.push_back(
        lookup_or_unknown(std::string(surface_prefix(event.system)) + code, policy, stats, substituted));
  }
  if (event.paid) out.push_back(quantize_cost(*event.paid));
  return out;
}

MedicalEvent Vocabulary::decode_event(std::span<const TokenId> group, Date date) const {
  if (group.empty()) throw Error(ErrorCode::InvalidEvent, "empty token group");
  MedicalEvent e;
  e.date = date;
  std::size_t end = group.size();
  if (is_cost(group.back())) {
    e.paid = dequantize_cost(group.back());
    --end;
    if (end == 0) {
      e.system = CodeSystem::COST;
      return e;
    }
  }
  const Token& head = token(group[0]);
  const std::string_view prefix = surface_prefix(head.kind);
  if (head.kind == CodeSystem::STRUCTURAL || head.kind == CodeSystem::TIME_GAP ||
      head.kind == CodeSystem::COST || starts_with(head.surface, kExtensionPrefix)) {
    throw Error(ErrorCode::InvalidEvent, "token group cannot start with " + head.surface);
  }
  e.system = head.kind;
  e.code = head.surface.substr(prefix.size());
  if (head.kind == CodeSystem::ICD10CM) {
    if (end > 1) e.code.push_back('.');
    for (std::size_t i = 1; i < end; ++i) {
      const Token& t = token(group[i]);
      if (!starts_with(t.surface, kExtensionPrefix)) {
        throw Error(ErrorCode::InvalidEvent, "expected extension token, got " + t.surface);
      }
      e.code += t.surface.substr(kExtensionPrefix.size());
    }
  } else if (end != 1) {
    throw Error(ErrorCode::InvalidEvent, "flat code followed by extra tokens");
  }
  return e;
}

TokenId Vocabulary::quantize_cost(double dollars) const {
  if (!(dollars >= 0.0) || !std::isfinite(dollars)) {
    throw Error(ErrorCode::NegativeCost, "paid amount " + format_double(dollars));
  }
  if (dollars == 0.0) return cost_ids_[0];
  const auto k = static_cast<std::size_t>(
      std::upper_bound(cost_edges_.begin(), cost_edges_.end(), dollars) - cost_edges_.begin());
  return cost_ids_[std::max<std::size_t>(k, 1)];
}

double Vocabulary::dequantize_cost(TokenId id) const {
  const int b = (id >= 0 && static_cast<std::size_t>(id) < cost_bucket_of_.size())
                    ? cost_bucket_of_[static_cast<std::size_t>(id)]
                    : -1;
  if (b < 0) throw Error(ErrorCode::UnknownTokenId, "not a cost token: " + std::to_string(id));
  if (b == 0) return 0.0;
  const auto k = static_cast<std::size_t>(b);
  if (k == cost_edges_.size()) {
    const double lo = cost_edges_[k - 1];
    return lo * std::sqrt(lo / cost_edges_[k - 2]);
  }
  return std::sqrt(cost_edges_[k - 1] * cost_edges_[k]);
}

TokenId Vocabulary::quantize_gap(std::int64_t days) const {
  if (days < 0) throw Error(ErrorCode::InvalidEvent, "negative gap");
  const auto k = static_cast<std::size_t>(
      std::upper_bound(gap_edges_.begin(), gap_edges_.end(), days) - gap_edges_.begin());
  return gap_ids_[k - 1];
}

double Vocabulary::gap_days(TokenId id) const {
  const int b = (id >= 0 && static_cast<std::size_t>(id) < gap_bucket_of_.size())
                    ? gap_bucket_of_[static_cast<std::size_t>(id)]
                    : -1;
  if (b < 0) throw Error(ErrorCode::UnknownTokenId, "not a gap token: " + std::to_string(id));
  const auto k = static_cast<std::size_t>(b);
  const double lo = gap_edges_[k];
  if (k + 1 == gap_edges_.size()) return 1.5 * (lo - 1);
  const double hi = gap_edges_[k + 1] - 1;
  return 0.5 * (lo + hi);
}

TokenId Vocabulary::age_token(int years) const {
  return id_of("DEM:AGE_" + std::to_string(std::clamp(years, 0, kMaxAge)));
}

TokenId Vocabulary::sex_token(Sex sex) const { return id_of("DEM:SEX_" + std::string(to_string(sex))); }

// ---------------------------------------------------------------------------

std::string Vocabulary::serialize() const {
  std::ostringstream out;
  out << kHeaderMagic << '\t' << kFormatVersion << "\tcost_edges=";
  for (std::size_t i = 0; i < cost_edges_.size(); ++i) {
    out << (i ? "," : "") << format_double(cost_edges_[i]);
  }
  out << "\tgap_edges=";
  for (std::size_t i = 0; i < gap_edges_.size(); ++i) out << (i ? "," : "") << gap_edges_[i];
  out << "\tsplit=" << kSplitRule << '\n';
  for (const auto& t : tokens_) out << t.id << '\t' << to_string(t.kind) << '\t' << t.surface << '\n';
  return out.str();
}

void Vocabulary::save(const std::string& path) const { write_file(path, serialize()); }

Vocabulary Vocabulary::load(const std::string& path) { return parse(read_file(path)); }

Vocabulary Vocabulary::parse(std::string_view text) {
  auto lines = split(text, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw Error(ErrorCode::FormatError, "empty vocabulary file");
  const auto header = split(lines[0], '\t');
  if (header.size() < 4 || header[0] != kHeaderMagic) {
    throw Error(ErrorCode::FormatError, "missing vocabulary header");
  }
  if (parse_int(header[1]) != kFormatVersion) {
    throw Error(ErrorCode::FormatError, "unsupported vocabulary version " + header[1]);
  }
  Vocabulary v;
  for (std::size_t i = 2; i < header.size(); ++i) {
    const auto eq = header[i].find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::FormatError, "bad header field " + header[i]);
    const std::string key = header[i].substr(0, eq);
    const std::string val = header[i].substr(eq + 1);
    if (key == "cost_edges") {
      for (const auto& s : split(val, ',')) v.cost_edges_.push_back(parse_double(s));
    } else if (key == "gap_edges") {
      for (const auto& s : split(val, ',')) v.gap_edges_.push_back(parse_int(s));
    } else if (key == "split") {
      if (val != kSplitRule) throw Error(ErrorCode::FormatError, "unsupported split rule " + val);
    }
  }
  if (v.cost_edges_.size() < 2 || v.gap_edges_.size() < 2) {
    throw Error(ErrorCode::FormatError, "header lacks bucket edges");
  }
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto fields = split(lines[i], '\t');
    if (fields.size() != 3) {
      throw Error(ErrorCode::FormatError, "line " + std::to_string(i + 1) + ": expected id, kind, surface");
    }
    const TokenId id = parse_int(fields[0]);
    if (id != static_cast<TokenId>(v.tokens_.size())) {
      throw Error(ErrorCode::FormatError, "line " + std::to_string(i + 1) + ": ids must be dense and ascending");
    }
    v.tokens_.push_back({id, parse_code_system(fields[1]), fields[2]});
  }
  v.index();
  return v;
}

}  // namespace lmm
