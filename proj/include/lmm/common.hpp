#ifndef LMM_COMMON_HPP
#define LMM_COMMON_HPP

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lmm {

enum class ErrorCode {
  // vocab
  DuplicateCode,
  MalformedCode,
  UnknownCode,
  NegativeCost,
  InvalidEvent,
  FormatError,
  // synth
  InvalidSpec,
  UnreadableFile,
  // model
  ConfigError,
  SequenceTooLong,
  UnknownTokenId,
  AllPositionsMasked,
  EmptyCorpus,
  NonFiniteLoss,
  PrefixTooLong,
  // montecarlo
  PromptTooLong,
  UnknownPredicate,
  // metrics
  DegenerateActuals,
  ZeroMeanActual,
  SingleClass,
  NoPositives,
  ZeroVariance,
  EmptyInput,
  // cohort
  MissingEnrollmentData,
  UnknownCondition,
};

std::string_view to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what);
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// ---------------------------------------------------------------------------
// Calendar dates

using Date = std::chrono::sys_days;

/// Parses `YYYY-MM-DD`; throws FormatError on anything else or an invalid day.
Date parse_date(std::string_view text);
std::string format_date(Date d);
Date make_date(int year, unsigned month, unsigned day);
int year_of(Date d);
unsigned month_of(Date d);
std::int64_t days_between(Date from, Date to);

// ---------------------------------------------------------------------------
// Deterministic random streams.
//
// Every consumer derives its stream from (seed, index) so results never depend
// on scheduling. Distribution transforms are written out here rather than taken
// from <random>, whose distributions are not specified bit-for-bit.

std::uint64_t splitmix64(std::uint64_t x);

class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  static Rng stream(std::uint64_t seed, std::uint64_t index);

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t s_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Stable 64-bit FNV-1a, mixed with a seed.
std::uint64_t stable_hash(std::string_view text, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Numerics

/// Neumaier compensated accumulator.
/// Cache-line aligned storage. Vectorized kernels choose their summation
/// order from buffer alignment, so a fixed alignment keeps results bitwise
/// reproducible from run to run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using AlignedDoubles = std::vector<double, AlignedAllocator<double>>;

class KahanSum {
 public:
  void add(double x);
  double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

double compensated_sum(std::span<const double> xs);

// ---------------------------------------------------------------------------
// Threading

/// Runs fn(i) for i in [0, n) on up to `threads` workers (0 = hardware).
/// Work items must write to disjoint outputs; callers reduce in index order.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  unsigned threads = 0);

unsigned default_threads();

// ---------------------------------------------------------------------------
// Text helpers

std::vector<std::string> split(std::string_view text, char sep);
/// RFC-4180 style field split with double-quote escaping.
std::vector<std::string> split_csv_line(std::string_view line);
std::string csv_escape(std::string_view field);
std::string trim(std::string_view text);
bool starts_with(std::string_view text, std::string_view prefix);
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view contents);
/// Shortest round-trippable decimal form of a double.
std::string format_double(double x);

}  // namespace lmm

#endif  // LMM_COMMON_HPP
