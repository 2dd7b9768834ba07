#ifndef LMM_VOCAB_HPP
#define LMM_VOCAB_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "lmm/common.hpp"

namespace lmm {

// Enumeration order doubles as the id-assignment order of non-structural kinds.
enum class CodeSystem : std::uint8_t {
  ICD10CM,
  ICD10PCS,
  CPT4,
  HCPCS,
  NDC,
  PLACE_OF_SERVICE,
  DEMOGRAPHIC,
  COST,
  TIME_GAP,
  STRUCTURAL,
};

std::string_view to_string(CodeSystem system);
/// Accepts the enumerator name (e.g. "ICD10CM"); throws FormatError otherwise.
CodeSystem parse_code_system(std::string_view name);

enum class Sex : std::uint8_t { F, M, U };
std::string_view to_string(Sex sex);
Sex parse_sex(std::string_view text);

using TokenId = std::int32_t;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr int kMaxAge = 110;

/// One dated, coded fact. For DEMOGRAPHIC events the code is `SEX_F` or
/// `AGE_47`; COST events carry only a paid amount.
struct MedicalEvent {
  Date date{};
  CodeSystem system = CodeSystem::ICD10CM;
  std::string code;
  std::optional<double> paid;

  bool operator==(const MedicalEvent&) const = default;
};

struct Token {
  TokenId id = 0;
  CodeSystem kind = CodeSystem::STRUCTURAL;
  std::string surface;

  bool operator==(const Token&) const = default;
};

struct QuantizationConfig {
  /// The open top cost bucket starts at 10^(top_half_decades / 2) dollars.
  int cost_top_half_decades = 12;
  /// Lower edges (days) of the gap buckets; the last bucket is open-ended.
  std::vector<int> gap_lower_edges{0, 1, 4, 8, 15, 31, 91, 366};
};

enum class UnknownPolicy { Strict, Lenient };

struct EncodeStats {
  std::size_t unknown_substitutions = 0;
};

using CodeLists = std::map<CodeSystem, std::vector<std::string>>;

/// Canonical form of a code for its system (ICD-10 CM dotted, NDC without
/// hyphens, upper case). Throws MalformedCode when the syntax check fails.
std::string canonical_code(CodeSystem system, std::string_view code);

/// Typed token table. Immutable once built.
class Vocabulary {
 public:
  static Vocabulary build(const CodeLists& code_lists, const QuantizationConfig& config = {});
  static Vocabulary parse(std::string_view text);
  static Vocabulary load(const std::string& path);

  std::string serialize() const;
  void save(const std::string& path) const;

  std::size_t size() const { return tokens_.size(); }
  const Token& token(TokenId id) const;
  const std::vector<Token>& tokens() const { return tokens_; }
  CodeSystem kind(TokenId id) const { return token(id).kind; }
  const std::string& surface(TokenId id) const { return token(id).surface; }
  std::optional<TokenId> find(std::string_view surface) const;
  /// Throws UnknownCode if absent.
  TokenId id_of(std::string_view surface) const;

  std::vector<TokenId> encode_event(const MedicalEvent& event,
                                    UnknownPolicy policy = UnknownPolicy::Strict,
                                    EncodeStats* stats = nullptr) const;
  /// Inverse of encode_event for one event's token group.
  MedicalEvent decode_event(std::span<const TokenId> tokens, Date date) const;

  TokenId quantize_cost(double dollars) const;
  double dequantize_cost(TokenId token) const;
  bool is_cost(TokenId id) const { return kind(id) == CodeSystem::COST; }

  TokenId quantize_gap(std::int64_t days) const;
  /// Representative duration of a gap token: bucket midpoint, 1.5x the lower
  /// bound for the open bucket.
  double gap_days(TokenId token) const;
  bool is_gap(TokenId id) const { return kind(id) == CodeSystem::TIME_GAP; }

  TokenId age_token(int years) const;
  TokenId sex_token(Sex sex) const;

  /// Lower edges of cost buckets B1..Bn (B0 is exactly zero dollars).
  const std::vector<double>& cost_edges() const { return cost_edges_; }
  const std::vector<int>& gap_edges() const { return gap_edges_; }

  /// Number of tokens of the given kind.
  std::size_t count(CodeSystem kind) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void index();
  TokenId lookup_or_unknown(std::string_view surface, UnknownPolicy policy, EncodeStats* stats,
                            bool& substituted) const;

  std::vector<Token> tokens_;
  std::unordered_map<std::string, TokenId> by_surface_;
  std::vector<double> cost_edges_;
  std::vector<int> gap_edges_;
  std::vector<TokenId> cost_ids_;  // by bucket index
  std::vector<TokenId> gap_ids_;   // by bucket index
  std::vector<int> cost_bucket_of_;  // by token id, -1 if not a cost token
  std::vector<int> gap_bucket_of_;   // by token id, -1 if not a gap token
};

// Surface helpers shared with the sequencer and simulator.
std::string cost_surface(std::size_t bucket);
std::string gap_surface(const std::vector<int>& lower_edges, std::size_t bucket);
std::string_view surface_prefix(CodeSystem system);

}  // namespace lmm

#endif  // LMM_VOCAB_HPP
