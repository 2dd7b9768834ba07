#ifndef LMM_SEQUENCER_HPP
#define LMM_SEQUENCER_HPP

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lmm/synth.hpp"
#include "lmm/vocab.hpp"

namespace lmm::seq {

using synth::PatientTimeline;

struct TokenSequence {
  std::vector<TokenId> tokens;
  Date anchor_date{};
  std::string patient_id;

  bool operator==(const TokenSequence&) const = default;
};

/// BOS, age, sex.
inline constexpr std::size_t kPrefixLength = 3;

struct LinearizeOptions {
  UnknownPolicy policy = UnknownPolicy::Strict;
  EncodeStats* stats = nullptr;
  bool complete = true;  // append EOS
  /// Anchor for timelines with no events and no enrollment start.
  std::optional<Date> reference_date;
};

/// Same-day ordering rank: place of service, diagnosis, PCS, CPT, HCPCS, NDC, cost.
int same_day_priority(CodeSystem system);

TokenSequence linearize(const PatientTimeline& timeline, const Vocabulary& vocab,
                        const LinearizeOptions& options = {});

struct SplitResult {
  TokenSequence prompt;  // history up to and including the cutoff, no EOS
  TokenSequence target;  // tokens of later events (gap-led when history is non-empty)
};

SplitResult split_at(const PatientTimeline& timeline, Date cutoff, const Vocabulary& vocab,
                     UnknownPolicy policy = UnknownPolicy::Strict);

/// Keeps the demographic prefix and the most recent whole event groups.
TokenSequence truncate(const TokenSequence& sequence, std::size_t max_len, const Vocabulary& vocab);

/// Token ranges [begin, end) of each event group after the prefix; a leading
/// gap token belongs to the group it precedes. EOS is excluded.
std::vector<std::pair<std::size_t, std::size_t>> event_groups(const std::vector<TokenId>& tokens,
                                                              const Vocabulary& vocab, std::size_t from = kPrefixLength);

/// Appends the token groups of `events` (date-sorted), emitting a gap token
/// before each new date. `previous` is the date of the last already-emitted event.
void append_events(std::vector<TokenId>& out, const std::vector<MedicalEvent>& events, const Vocabulary& vocab,
                   std::optional<Date> previous, UnknownPolicy policy = UnknownPolicy::Strict,
                   EncodeStats* stats = nullptr);

struct ParsedDay {
  std::optional<TokenId> gap;  // absent for the first day
  std::vector<MedicalEvent> events;
};

struct ParsedSequence {
  int age = 0;
  Sex sex = Sex::U;
  std::vector<ParsedDay> days;
  bool complete = false;
};

/// Reads a linearized sequence back into days of events. Dates advance from
/// the anchor by each gap token's representative duration (rounded).
ParsedSequence parse_sequence(const TokenSequence& sequence, const Vocabulary& vocab);

std::string to_surfaces(const std::vector<TokenId>& tokens, const Vocabulary& vocab);
std::vector<TokenId> from_surfaces(std::string_view text, const Vocabulary& vocab);

/// Sequence file: one `patient_id<TAB>anchor_date<TAB>surfaces` line per
/// sequence, surfaces space-separated.
std::string serialize_sequences(const std::vector<TokenSequence>& sequences, const Vocabulary& vocab);
std::vector<TokenSequence> parse_sequences(std::string_view text, const Vocabulary& vocab);

}  // namespace lmm::seq

#endif  // LMM_SEQUENCER_HPP
