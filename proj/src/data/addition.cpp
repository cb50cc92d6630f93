#include "carry/addition.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "carry/rng.hpp"

namespace carry::data {

namespace {

constexpr Task kTasksW3[] = {Task::NC, Task::C1, Task::C2, Task::CAll,
                             Task::CAllCon};
constexpr Task kTasksW4[] = {
    Task::NC,        Task::W4_C1,      Task::W4_C2,      Task::W4_C3,
    Task::W4_C12,    Task::W4_C13,     Task::W4_C23,     Task::W4_C12Con,
    Task::W4_C23Con, Task::W4_C12pCon, Task::W4_C23pCon, Task::W4_CAllCon,
    Task::W4_CAll};

void check_width(int width) {
  if (width < 1 || width > kMaxWidth)
    throw DataError("width " + std::to_string(width) + " outside [1, " +
                    std::to_string(kMaxWidth) + "]");
}

}  // namespace

std::string CarryPattern::str() const {
  std::string s;
  s.reserve(trits.size());
  for (auto t : trits) s.push_back(static_cast<char>('0' + t));
  return s;
}

CarryPattern CarryPattern::parse(std::string_view s) {
  CarryPattern p;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] < '0' || s[i] > '2')
      throw DataError("bad trit '" + std::string(1, s[i]) + "' at index " +
                      std::to_string(i));
    p.trits.push_back(static_cast<std::uint8_t>(s[i] - '0'));
  }
  return p;
}

bool CarryPattern::valid() const {
  if (trits.empty() || trits.front() != 0 || trits.back() == 2) return false;
  for (std::size_t i = 0; i + 1 < trits.size(); ++i)
    if (trits[i] == 2 && trits[i + 1] == 0) return false;
  return std::all_of(trits.begin(), trits.end(), [](auto t) { return t <= 2; });
}

std::string_view task_name(Task t) {
  switch (t) {
    case Task::NC: return "NC";
    case Task::C1: return "C@1";
    case Task::C2: return "C@2";
    case Task::CAll: return "C all";
    case Task::CAllCon: return "C all con.";
    case Task::W4_C1: return "C@1";
    case Task::W4_C2: return "C@2";
    case Task::W4_C3: return "C@3";
    case Task::W4_C12: return "C@12";
    case Task::W4_C13: return "C@13";
    case Task::W4_C23: return "C@23";
    case Task::W4_C12Con: return "C@12 con.";
    case Task::W4_C23Con: return "C@23 con.";
    case Task::W4_C12pCon: return "C@12p con.";
    case Task::W4_C23pCon: return "C@23p con.";
    case Task::W4_CAllCon: return "C@all con.";
    case Task::W4_CAll: return "C@all";
    case Task::Pattern: return "pattern";
  }
  return "?";
}

std::optional<Task> task_from_name(std::string_view name, int width) {
  if (name == "pattern") return Task::Pattern;
  for (Task t : tasks_for_width(width))
    if (task_name(t) == name) return t;
  return std::nullopt;
}

std::span<const Task> tasks_for_width(int width) {
  if (width == 3) return kTasksW3;
  if (width == 4) return kTasksW4;
  return {};
}

std::string TaskLabel::name() const {
  return task == Task::Pattern ? pattern.str() : std::string(task_name(task));
}

std::uint64_t pow10(int width) {
  std::uint64_t p = 1;
  for (int i = 0; i < width; ++i) p *= 10;
  return p;
}

std::vector<std::uint8_t> digits_of(std::uint64_t value, int width) {
  std::vector<std::uint8_t> d(static_cast<std::size_t>(width));
  for (int i = width - 1; i >= 0; --i) {
    d[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(value % 10);
    value /= 10;
  }
  if (value != 0) throw DataError("value does not fit in the given width");
  return d;
}

LongAddition carry_oracle(std::uint64_t a, std::uint64_t b, int width) {
  check_width(width);
  const std::uint64_t limit = pow10(width);
  if (a >= limit || b >= limit || a + b >= limit)
    throw DataError("overflow: " + std::to_string(a) + " + " + std::to_string(b) +
                    " does not fit in " + std::to_string(width) + " digits");
  const auto ad = digits_of(a, width);
  const auto bd = digits_of(b, width);
  LongAddition out;
  out.answer_digits.resize(ad.size());
  out.carry_flags.assign(ad.size(), false);
  int carry = 0;
  for (int i = width - 1; i >= 0; --i) {
    const auto u = static_cast<std::size_t>(i);
    const int s = ad[u] + bd[u] + carry;
    out.carry_flags[u] = carry == 1;
    out.answer_digits[u] = static_cast<std::uint8_t>(s % 10);
    carry = s / 10;
  }
  return out;
}

CarryPattern carry_pattern(const AdditionExample& ex) {
  const auto w = static_cast<std::size_t>(ex.width);
  CarryPattern p;
  p.trits.assign(w, 0);
  bool carry_in = false;  // carry arriving from the right
  for (std::size_t k = w; k-- > 0;) {
    const int s = ex.a_digits[k] + ex.b_digits[k];
    if (s >= 10) {
      p.trits[k] = 1;
    } else if (s == 9 && carry_in) {
      p.trits[k] = 2;
    }
    carry_in = p.trits[k] != 0;
  }
  return p;
}

TaskLabel classify_task(const AdditionExample& ex) {
  TaskLabel label;
  label.pattern = carry_pattern(ex);
  std::vector<int> s(static_cast<std::size_t>(ex.width));
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = ex.a_digits[i] + ex.b_digits[i];
  const auto ge = [&](std::size_t i) { return s[i] >= 10; };
  const auto lt = [&](std::size_t i) { return s[i] < 10; };
  const auto nine = [&](std::size_t i) { return s[i] == 9; };
  const auto lt9 = [&](std::size_t i) { return s[i] < 9; };

  std::vector<Task> hits;
  if (ex.width == 3) {
    if (lt(0) && lt(1) && lt(2)) hits.push_back(Task::NC);
    if (ge(1) && lt(0) && lt(2)) hits.push_back(Task::C1);
    if (ge(2) && lt9(1)) hits.push_back(Task::C2);
    if (ge(1) && ge(2)) hits.push_back(Task::CAll);
    if (ge(2) && nine(1)) hits.push_back(Task::CAllCon);
  } else if (ex.width == 4) {
    if (lt(0) && lt(1) && lt(2) && lt(3)) hits.push_back(Task::NC);
    if (ge(1) && lt(0) && lt(2) && lt(3)) hits.push_back(Task::W4_C1);
    if (ge(2) && lt9(1) && lt(0) && lt(3)) hits.push_back(Task::W4_C2);
    if (ge(3) && lt9(2) && lt(0) && lt(1)) hits.push_back(Task::W4_C3);
    if (ge(1) && ge(2) && lt(3)) hits.push_back(Task::W4_C12);
    if (ge(1) && ge(3) && lt9(2)) hits.push_back(Task::W4_C13);
    if (ge(2) && ge(3) && lt9(1)) hits.push_back(Task::W4_C23);
    if (nine(1) && ge(2) && lt(3)) hits.push_back(Task::W4_C12Con);
    if (nine(2) && ge(3) && lt9(1)) hits.push_back(Task::W4_C23Con);
    if (nine(1) && ge(2) && ge(3)) hits.push_back(Task::W4_C12pCon);
    if (nine(2) && ge(3) && ge(1)) hits.push_back(Task::W4_C23pCon);
    if (nine(1) && nine(2) && ge(3)) hits.push_back(Task::W4_CAllCon);
    if (ge(1) && ge(2) && ge(3)) hits.push_back(Task::W4_CAll);
  } else {
    label.task = Task::Pattern;
    return label;
  }
  // The class rules partition all in-range sums; anything else is a bug.
  if (hits.size() != 1)
    throw DataError("task rules matched " + std::to_string(hits.size()) +
                    " classes for " + std::to_string(ex.a) + "+" +
                    std::to_string(ex.b));
  label.task = hits.front();
  return label;
}

AdditionExample make_example(std::uint64_t a, std::uint64_t b, int width) {
  auto sum = carry_oracle(a, b, width);
  AdditionExample ex;
  ex.a = a;
  ex.b = b;
  ex.width = width;
  ex.a_digits = digits_of(a, width);
  ex.b_digits = digits_of(b, width);
  ex.answer_digits = std::move(sum.answer_digits);
  ex.carry_flags = std::move(sum.carry_flags);
  ex.task = classify_task(ex);
  return ex;
}

std::uint64_t dataset_size(int width) {
  check_width(width);
  const std::uint64_t n = pow10(width);
  return n % 2 == 0 ? (n / 2) * (n + 1) : n * ((n + 1) / 2);
}

std::vector<AdditionExample> gen_dataset(int width, std::uint64_t max_examples) {
  check_width(width);
  const std::uint64_t count = dataset_size(width);
  if (count > max_examples)
    throw EnumerationRefused("refusing to enumerate " + std::to_string(count) +
                    " examples for width " + std::to_string(width) +
                    " (cap " + std::to_string(max_examples) + ")");
  const std::uint64_t limit = pow10(width);
  std::vector<AdditionExample> out(count);
  // Row a starts at offset sum_{i<a} (limit - i).
#pragma omp parallel for schedule(dynamic, 16)
  for (std::int64_t ai = 0; ai < static_cast<std::int64_t>(limit); ++ai) {
    const auto a = static_cast<std::uint64_t>(ai);
    std::uint64_t offset = a * limit - a * (a - 1) / 2;
    if (a == 0) offset = 0;
    for (std::uint64_t b = 0; a + b < limit; ++b)
      out[offset + b] = make_example(a, b, width);
  }
  return out;
}

TokenSequence tokenize(const AdditionExample& ex) { return tokenize(ex, ex.width); }

TokenSequence tokenize(const AdditionExample& ex, int layout_width) {
  if (layout_width < ex.width)
    throw DataError("layout width smaller than example width");
  const auto ad = digits_of(ex.a, layout_width);
  const auto bd = digits_of(ex.b, layout_width);
  TokenSequence seq;
  seq.tokens.reserve(static_cast<std::size_t>(3 * layout_width + 1));
  for (auto d : ad) seq.tokens.push_back(d);
  seq.tokens.push_back(kPlusToken);
  for (auto d : bd) seq.tokens.push_back(d);
  for (int i = 0; i < layout_width; ++i) seq.tokens.push_back(kEqualsToken);
  return seq;
}

TokenSequence tokenize_generative(const AdditionExample& ex, int layout_width) {
  if (layout_width < ex.width)
    throw DataError("layout width smaller than example width");
  TokenSequence seq;
  for (auto d : digits_of(ex.a, layout_width)) seq.tokens.push_back(d);
  seq.tokens.push_back(kPlusToken);
  for (auto d : digits_of(ex.b, layout_width)) seq.tokens.push_back(d);
  seq.tokens.push_back(kEqualsToken);
  for (auto d : digits_of(ex.a + ex.b, layout_width)) seq.tokens.push_back(d);
  seq.tokens.push_back(kEqualsToken);
  return seq;
}

Operands detokenize(std::span<const int> tokens) {
  const std::size_t n = tokens.size();
  std::size_t w = 0;
  if (n >= 4 && (n - 1) % 3 == 0) {
    w = (n - 1) / 3;
  } else if (n >= 6 && (n - 3) % 3 == 0) {
    w = (n - 3) / 3;
  } else {
    throw DataError("malformed token sequence: length " + std::to_string(n) +
                    " is not a valid layout");
  }
  const auto expect = [&](std::size_t i, bool ok, const char* what) {
    if (!ok)
      throw DataError("malformed token sequence: expected " + std::string(what) +
                      " at index " + std::to_string(i) + ", found " +
                      std::to_string(tokens[i]));
  };
  Operands out;
  for (std::size_t i = 0; i < w; ++i) {
    expect(i, tokens[i] >= 0 && tokens[i] <= 9, "digit");
    out.a = out.a * 10 + static_cast<std::uint64_t>(tokens[i]);
  }
  expect(w, tokens[w] == kPlusToken, "'+'");
  for (std::size_t i = w + 1; i < 2 * w + 1; ++i) {
    expect(i, tokens[i] >= 0 && tokens[i] <= 9, "digit");
    out.b = out.b * 10 + static_cast<std::uint64_t>(tokens[i]);
  }
  expect(2 * w + 1, tokens[2 * w + 1] == kEqualsToken, "'='");
  return out;
}

DatasetSplit split(std::vector<AdditionExample> dataset, double fraction,
                   std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0))
    throw DataError("train fraction must lie in (0, 1]");
  DatasetSplit out;
  out.fraction = fraction;
  out.seed = seed;
  out.layout_width = dataset.empty() ? 0 : dataset.front().width;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  RngStream rng(seed, "split");
  rng.shuffle(order.begin(), order.end());
  const auto n_train =
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(dataset.size())));
  out.train.reserve(n_train);
  out.test.reserve(dataset.size() - n_train);
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& ex = dataset[order[i]];
    (i < n_train ? out.train : out.test).push_back(std::move(ex));
  }
  return out;
}

std::vector<AdditionExample> sample_examples(int width, std::size_t k,
                                             std::uint64_t seed,
                                             std::span<const AdditionExample> exclude) {
  check_width(width);
  const std::uint64_t limit = pow10(width);
  std::set<std::pair<std::uint64_t, std::uint64_t>> seen;
  for (const auto& ex : exclude) seen.emplace(ex.a, ex.b);
  const std::uint64_t available = dataset_size(width) - std::min<std::uint64_t>(
                                                           seen.size(), dataset_size(width));
  if (k > available)
    throw DataError("cannot sample " + std::to_string(k) + " distinct examples of width " +
                    std::to_string(width) + "; only " + std::to_string(available) +
                    " available");
  RngStream rng(seed, "sample");
  std::vector<AdditionExample> out;
  out.reserve(k);
  // Rejection sampling is uniform over ordered pairs with a + b < 10^w.
  while (out.size() < k) {
    const auto a = rng.below(limit);
    const auto b = rng.below(limit);
    if (a + b >= limit) continue;
    if (!seen.emplace(a, b).second) continue;
    out.push_back(make_example(a, b, width));
  }
  return out;
}

DatasetSplit prime_dataset(DatasetSplit base, int extra_width, std::size_t k,
                           std::uint64_t seed) {
  if (extra_width <= base.layout_width)
    throw DataError("priming width must exceed the base width");
  std::vector<AdditionExample> existing;
  existing.reserve(base.train.size() + base.test.size());
  for (const auto* part : {&base.train, &base.test})
    for (const auto& ex : *part)
      if (ex.width == extra_width) existing.push_back(ex);
  auto extra = sample_examples(extra_width, k, seed ^ 0x9e3779b97f4a7c15ULL, existing);
  for (auto& ex : extra) base.train.push_back(std::move(ex));
  base.layout_width = extra_width;
  return base;
}

FullAdderOut full_adder_reference(int a_bit, int b_bit, int c_in) {
  // Two half adders: (a, b) -> (s1, c1); (s1, c_in) -> (s, c2); c_out = c1 | c2.
  const int s1 = a_bit ^ b_bit;
  const int c1 = a_bit & b_bit;
  const int s = s1 ^ c_in;
  const int c2 = s1 & c_in;
  return {s, c1 | c2};
}

std::uint64_t ripple_add(std::uint64_t a, std::uint64_t b, int bits) {
  std::uint64_t out = 0;
  int carry = 0;
  for (int i = 0; i < bits; ++i) {
    const auto r = full_adder_reference(static_cast<int>((a >> i) & 1),
                                        static_cast<int>((b >> i) & 1), carry);
    out |= static_cast<std::uint64_t>(r.sum) << i;
    carry = r.carry;
  }
  if (bits < 64) out |= static_cast<std::uint64_t>(carry) << bits;
  return out;
}

void write_csv(const std::string& path, std::span<const AdditionExample> examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << "a,b,width,task,pattern\n";
  for (const auto& ex : examples)
    out << ex.a << ',' << ex.b << ',' << ex.width << ',' << task_name(ex.task.task)
        << ',' << ex.task.pattern.str() << '\n';
}

std::vector<AdditionExample> read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::string line;
  std::getline(in, line);
  if (line != "a,b,width,task,pattern")
    throw DataError(path + ": unexpected header '" + line + "'");
  std::vector<AdditionExample> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string a, b, w, task, pattern;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') ||
        !std::getline(ss, w, ',') || !std::getline(ss, task, ',') ||
        !std::getline(ss, pattern))
      throw DataError(path + ":" + std::to_string(row) + ": expected 5 fields");
    auto ex = make_example(std::stoull(a), std::stoull(b), std::stoi(w));
    if (task_name(ex.task.task) != task || ex.task.pattern.str() != pattern)
      throw DataError(path + ":" + std::to_string(row) +
                      ": label does not match the sum");
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace carry::data
