#include "lmm/sequencer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace lmm::seq {

int same_day_priority(CodeSystem system) {
  switch (system) {
    case CodeSystem::PLACE_OF_SERVICE: return 0;
    case CodeSystem::ICD10CM: return 1;
    case CodeSystem::ICD10PCS: return 2;
    case CodeSystem::CPT4: return 3;
    case CodeSystem::HCPCS: return 4;
    case CodeSystem::NDC: return 5;
    case CodeSystem::COST: return 6;
    default: break;
  }
  throw Error(ErrorCode::InvalidEvent, "events of kind " + std::string(to_string(system)) + " are not sequenced");
}

void append_events(std::vector<TokenId>& out, const std::vector<MedicalEvent>& events, const Vocabulary& vocab,
                   std::optional<Date> previous, UnknownPolicy policy, EncodeStats* stats) {
  std::size_t i = 0;
  while (i < events.size()) {
    const Date day = events[i].date;
    std::size_t j = i;
    while (j < events.size() && events[j].date == day) ++j;
    if (previous) {
      if (day < *previous) throw Error(ErrorCode::InvalidEvent, "events are not date-sorted");
      if (day != *previous) out.push_back(vocab.quantize_gap(days_between(*previous, day)));
    }
    std::vector<const MedicalEvent*> same_day;
    for (std::size_t k = i; k < j; ++k) {
      same_day_priority(events[k].system);
      same_day.push_back(&events[k]);
    }
    std::stable_sort(same_day.begin(), same_day.end(), [](const MedicalEvent* a, const MedicalEvent* b) {
      const int pa = same_day_priority(a->system), pb = same_day_priority(b->system);
      if (pa != pb) return pa < pb;
      return a->code < b->code;
    });
    for (const auto* e : same_day) {
      const auto ids = vocab.encode_event(*e, policy, stats);
      out.insert(out.end(), ids.begin(), ids.end());
    }
    previous = day;
    i = j;
  }
}

namespace {

Date pick_anchor(const PatientTimeline& tl, const std::vector<MedicalEvent>& events,
                 const std::optional<Date>& reference) {
  if (!events.empty()) return events.front().date;
  if (tl.enrollment_start) return *tl.enrollment_start;
  if (reference) return *reference;
  throw Error(ErrorCode::InvalidEvent, "timeline " + tl.patient_id + " has no events and no anchor date");
}

TokenSequence linearize_events(const PatientTimeline& tl, const std::vector<MedicalEvent>& events,
                               const Vocabulary& vocab, const LinearizeOptions& options) {
  TokenSequence seq;
  seq.patient_id = tl.patient_id;
  seq.anchor_date = pick_anchor(tl, events, options.reference_date);
  seq.tokens.push_back(kBos);
  seq.tokens.push_back(vocab.age_token(year_of(seq.anchor_date) - tl.birth_year));
  seq.tokens.push_back(vocab.sex_token(tl.sex));
  append_events(seq.tokens, events, vocab, std::nullopt, options.policy, options.stats);
  if (options.complete) seq.tokens.push_back(kEos);
  return seq;
}

bool starts_group(TokenId id, const Vocabulary& vocab) {
  const Token& t = vocab.token(id);
  switch (t.kind) {
    case CodeSystem::STRUCTURAL: return id == kUnk;
    case CodeSystem::TIME_GAP: return false;
    case CodeSystem::COST: return false;
    case CodeSystem::ICD10CM: return !starts_with(t.surface, "DX-X:");
    default: return true;
  }
}

}  // namespace

TokenSequence linearize(const PatientTimeline& timeline, const Vocabulary& vocab, const LinearizeOptions& options) {
  return linearize_events(timeline, timeline.events, vocab, options);
}

SplitResult split_at(const PatientTimeline& timeline, Date cutoff, const Vocabulary& vocab, UnknownPolicy policy) {
  std::vector<MedicalEvent> history, future;
  for (const auto& e : timeline.events) (e.date <= cutoff ? history : future).push_back(e);
  LinearizeOptions opts;
  opts.policy = policy;
  opts.complete = false;
  opts.reference_date = cutoff;
  SplitResult out;
  out.prompt = linearize_events(timeline, history, vocab, opts);
  out.target.patient_id = timeline.patient_id;
  out.target.anchor_date = future.empty() ? cutoff : future.front().date;
  std::optional<Date> previous;
  if (!history.empty()) previous = history.back().date;
  append_events(out.target.tokens, future, vocab, previous, policy);
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> event_groups(const std::vector<TokenId>& tokens,
                                                              const Vocabulary& vocab, std::size_t from) {
  std::vector<std::pair<std::size_t, std::size_t>> groups;
  std::size_t i = from;
  const std::size_t n = tokens.size();
  while (i < n && tokens[i] != kEos) {
    const std::size_t begin = i;
    if (vocab.is_gap(tokens[i])) ++i;
    if (i >= n || tokens[i] == kEos) {
      groups.emplace_back(begin, i);  // dangling gap
      break;
    }
    ++i;  // head token (or a stray continuation token treated as its own group)
    while (i < n && tokens[i] != kEos && !vocab.is_gap(tokens[i]) && !starts_group(tokens[i], vocab)) ++i;
    groups.emplace_back(begin, i);
  }
  return groups;
}

TokenSequence truncate(const TokenSequence& sequence, std::size_t max_len, const Vocabulary& vocab) {
  if (sequence.tokens.size() <= max_len) return sequence;
  const std::size_t prefix = std::min(kPrefixLength, sequence.tokens.size());
  const bool complete = !sequence.tokens.empty() && sequence.tokens.back() == kEos;
  if (max_len < prefix + (complete ? 1 : 0)) {
    throw Error(ErrorCode::ConfigError, "max_len shorter than the demographic prefix");
  }
  const auto groups = event_groups(sequence.tokens, vocab, prefix);
  std::size_t budget = max_len - prefix - (complete ? 1 : 0);
  std::size_t keep_from = groups.size();
  std::size_t used = 0;
  for (std::size_t g = groups.size(); g-- > 0;) {
    auto [b, e] = groups[g];
    // The oldest kept group loses its leading gap token.
    const std::size_t lead_gap = vocab.is_gap(sequence.tokens[b]) ? 1 : 0;
    if (used + (e - b - lead_gap) > budget) break;
    used += e - b;
    keep_from = g;
  }
  TokenSequence out;
  out.patient_id = sequence.patient_id;
  out.anchor_date = sequence.anchor_date;
  out.tokens.assign(sequence.tokens.begin(), sequence.tokens.begin() + static_cast<std::ptrdiff_t>(prefix));
  if (keep_from < groups.size()) {
    std::size_t b = groups[keep_from].first;
    if (vocab.is_gap(sequence.tokens[b])) ++b;
    const std::size_t e = groups.back().second;
    out.tokens.insert(out.tokens.end(), sequence.tokens.begin() + static_cast<std::ptrdiff_t>(b),
                      sequence.tokens.begin() + static_cast<std::ptrdiff_t>(e));
  }
  if (complete) out.tokens.push_back(kEos);
  return out;
}

ParsedSequence parse_sequence(const TokenSequence& sequence, const Vocabulary& vocab) {
  const auto& t = sequence.tokens;
  if (t.size() < kPrefixLength || t[0] != kBos) throw Error(ErrorCode::FormatError, "sequence lacks BOS prefix");
  ParsedSequence out;
  const std::string& age = vocab.surface(t[1]);
  const std::string& sex = vocab.surface(t[2]);
  if (!starts_with(age, "DEM:AGE_") || !starts_with(sex, "DEM:SEX_")) {
    throw Error(ErrorCode::FormatError, "sequence lacks demographic prefix");
  }
  out.age = std::stoi(age.substr(8));
  out.sex = parse_sex(sex.substr(8));
  out.complete = t.back() == kEos;
  double offset = 0.0;
  for (auto [b, e] : event_groups(t, vocab)) {
    std::optional<TokenId> gap;
    if (vocab.is_gap(t[b])) {
      gap = t[b];
      offset += vocab.gap_days(t[b]);
      ++b;
    }
    if (gap || out.days.empty()) out.days.push_back({gap, {}});
    if (b == e) continue;
    const Date date = sequence.anchor_date + std::chrono::days{static_cast<long>(std::llround(offset))};
    out.days.back().events.push_back(
        vocab.decode_event(std::span<const TokenId>(t.data() + b, e - b), date));
  }
  return out;
}

std::string to_surfaces(const std::vector<TokenId>& tokens, const Vocabulary& vocab) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += vocab.surface(tokens[i]);
  }
  return out;
}

std::vector<TokenId> from_surfaces(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenId> out;
  std::istringstream in{std::string(text)};
  std::string s;
  while (in >> s) out.push_back(vocab.id_of(s));
  return out;
}

std::string serialize_sequences(const std::vector<TokenSequence>& sequences, const Vocabulary& vocab) {
  std::string out;
  for (const auto& s : sequences) {
    out += s.patient_id + '\t' + format_date(s.anchor_date) + '\t' + to_surfaces(s.tokens, vocab) + '\n';
  }
  return out;
}

std::vector<TokenSequence> parse_sequences(std::string_view text, const Vocabulary& vocab) {
  std::vector<TokenSequence> out;
  std::size_t line_no = 0;
  for (const auto& line : split(text, '\n')) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split(line, '\t');
    if (fields.size() != 3) {
      throw Error(ErrorCode::FormatError, "sequence line " + std::to_string(line_no) + ": expected 3 tab-separated fields");
    }
    out.push_back({from_surfaces(fields[2], vocab), parse_date(fields[1]), fields[0]});
  }
  return out;
}

}  // namespace lmm::seq
