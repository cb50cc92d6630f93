#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace carry::data {

inline constexpr int kPlusToken = 10;
inline constexpr int kEqualsToken = 11;
inline constexpr int kVocabSize = 12;

// Largest width whose operands fit in 64-bit arithmetic.
inline constexpr int kMaxWidth = 18;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// gen_dataset refused because the enumeration exceeds the configured cap.
class EnumerationRefused : public DataError {
 public:
  using DataError::DataError;
};

// Per-position trinary label, most significant position first:
//   0  digit sum < 10 and not a 9 that propagates a carry
//   1  digit sum >= 10
//   2  digit sum == 9 receiving a carry from the right
struct CarryPattern {
  std::vector<std::uint8_t> trits;

  std::string str() const;
  static CarryPattern parse(std::string_view s);
  bool valid() const;
  auto operator<=>(const CarryPattern&) const = default;
};

// Named task classes. Three-digit sums use the five-way split, four-digit
// sums the thirteen-way split; wider sums only carry a CarryPattern.
enum class Task : std::uint8_t {
  NC,
  C1,
  C2,
  CAll,
  CAllCon,
  // four-digit classes
  W4_C1,
  W4_C2,
  W4_C3,
  W4_C12,
  W4_C13,
  W4_C23,
  W4_C12Con,
  W4_C23Con,
  W4_C12pCon,
  W4_C23pCon,
  W4_CAllCon,
  W4_CAll,
  Pattern,  // general width: see CarryPattern
};

std::string_view task_name(Task t);
std::optional<Task> task_from_name(std::string_view name, int width);
// Tasks that partition sums of the given width (empty for widths other than 3, 4).
std::span<const Task> tasks_for_width(int width);

struct TaskLabel {
  Task task = Task::Pattern;
  CarryPattern pattern;

  std::string name() const;
  bool operator==(const TaskLabel&) const = default;
};

struct AdditionExample {
  std::uint64_t a = 0;
  std::uint64_t b = 0;
  int width = 0;
  std::vector<std::uint8_t> a_digits;
  std::vector<std::uint8_t> b_digits;
  std::vector<std::uint8_t> answer_digits;
  std::vector<bool> carry_flags;
  TaskLabel task;
};

struct TokenSequence {
  std::vector<int> tokens;
};

struct LongAddition {
  std::vector<std::uint8_t> answer_digits;
  std::vector<bool> carry_flags;  // carry received at each position
};

std::uint64_t pow10(int width);
std::vector<std::uint8_t> digits_of(std::uint64_t value, int width);

// Builds a fully labelled example; throws DataError if a + b >= 10^width.
AdditionExample make_example(std::uint64_t a, std::uint64_t b, int width);

LongAddition carry_oracle(std::uint64_t a, std::uint64_t b, int width);
CarryPattern carry_pattern(const AdditionExample& ex);
TaskLabel classify_task(const AdditionExample& ex);

// All ordered pairs (a, b) with a + b < 10^width, ordered by (a, b).
std::vector<AdditionExample> gen_dataset(int width,
                                         std::uint64_t max_examples = 100'000'000);
std::uint64_t dataset_size(int width);

TokenSequence tokenize(const AdditionExample& ex);
// Encoder layout re-padded at a wider width (left zero padding).
TokenSequence tokenize(const AdditionExample& ex, int layout_width);
// Decoder layout: a '+' b '=' answer '=' (length 3w + 3).
TokenSequence tokenize_generative(const AdditionExample& ex, int layout_width);

struct Operands {
  std::uint64_t a = 0;
  std::uint64_t b = 0;
  bool operator==(const Operands&) const = default;
};
Operands detokenize(std::span<const int> tokens);

struct DatasetSplit {
  std::vector<AdditionExample> train;
  std::vector<AdditionExample> test;
  double fraction = 0.3;
  std::uint64_t seed = 0;
  int layout_width = 0;  // width the sequences are padded to
};

DatasetSplit split(std::vector<AdditionExample> dataset, double fraction,
                   std::uint64_t seed);

// Uniform sample of k distinct sums of `width` digits, excluding any (a, b)
// in `exclude`.
std::vector<AdditionExample> sample_examples(int width, std::size_t k,
                                             std::uint64_t seed,
                                             std::span<const AdditionExample> exclude = {});

DatasetSplit prime_dataset(DatasetSplit base, int extra_width, std::size_t k,
                           std::uint64_t seed);

struct FullAdderOut {
  int sum = 0;
  int carry = 0;
};
FullAdderOut full_adder_reference(int a_bit, int b_bit, int c_in);
// Ripple-carry chain of full adders over the low `bits` bits.
std::uint64_t ripple_add(std::uint64_t a, std::uint64_t b, int bits);

// Dataset CSV: header `a,b,width,task,pattern`.
void write_csv(const std::string& path, std::span<const AdditionExample> examples);
std::vector<AdditionExample> read_csv(const std::string& path);

}  // namespace carry::data
