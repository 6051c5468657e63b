// Dichotomic-sequence laboratory: the arithmetic Bell-inequality tautology
// over +/-1 quadruples, and the counterfactual rearrangement experiment
// that shows what happens once the four averages come from four separate
// runs instead of one shared index set.
#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "eprsim/core.hpp"

namespace eprsim::tautology {

/// Sequence whose entries are exactly +1 or -1.
class DichotomicSeq {
 public:
  explicit DichotomicSeq(std::vector<std::int8_t> values)
      : values_(std::move(values)) {
    if (values_.empty()) {
      throw std::invalid_argument("dichotomic sequence: length must be >= 1");
    }
    for (const std::int8_t v : values_) {
      if (v != 1 && v != -1) {
        throw std::invalid_argument(
            "dichotomic sequence: entries must be +1 or -1");
      }
    }
  }

  static DichotomicSeq random(std::size_t length, RandomStream& stream) {
    std::vector<std::int8_t> values(length);
    for (auto& v : values) v = stream.next_coin() ? 1 : -1;
    return DichotomicSeq(std::move(values));
  }

  [[nodiscard]] std::size_t size() const { return values_.size(); }
  [[nodiscard]] int operator[](std::size_t i) const { return values_[i]; }
  [[nodiscard]] const std::vector<std::int8_t>& values() const {
    return values_;
  }

  [[nodiscard]] std::size_t count_plus() const {
    std::size_t count = 0;
    for (const std::int8_t v : values_) count += v == 1;
    return count;
  }

  friend bool operator==(const DichotomicSeq&, const DichotomicSeq&) = default;

 private:
  std::vector<std::int8_t> values_;
};

/// Four equal-length sequences sharing one index set.
struct DichotomicQuad {
  DichotomicSeq a;
  DichotomicSeq a_prime;
  DichotomicSeq b;
  DichotomicSeq b_prime;

  DichotomicQuad(DichotomicSeq a_, DichotomicSeq a_prime_, DichotomicSeq b_,
                 DichotomicSeq b_prime_)
      : a(std::move(a_)),
        a_prime(std::move(a_prime_)),
        b(std::move(b_)),
        b_prime(std::move(b_prime_)) {
    if (a.size() != a_prime.size() || a.size() != b.size() ||
        a.size() != b_prime.size()) {
      throw std::invalid_argument("quad: all four lengths must be equal");
    }
  }
};

namespace detail {

// Integer dot product; exact, so reordering all four sequences by one
// common permutation cannot change any statistic.
inline std::int64_t dot(const DichotomicSeq& x, const DichotomicSeq& y) {
  std::int64_t sum = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sum += static_cast<std::int64_t>(x[i]) * y[i];
  }
  return sum;
}

}  // namespace detail

/// Mean product (1/N) sum x_i y_i.
inline double mean_product(const DichotomicSeq& x, const DichotomicSeq& y) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("mean_product: length mismatch");
  }
  return static_cast<double>(detail::dot(x, y)) /
         static_cast<double>(x.size());
}

/// |<ab> + <ab'>| + |<a'b> - <a'b'>|. At most 2 for every quad: the four
/// averages share one index set, so the bound is arithmetic, not physical.
inline double bell_statistic(const DichotomicQuad& quad) {
  const double t1 =
      mean_product(quad.a, quad.b) + mean_product(quad.a, quad.b_prime);
  const double t2 = mean_product(quad.a_prime, quad.b) -
                    mean_product(quad.a_prime, quad.b_prime);
  return std::abs(t1) + std::abs(t2);
}

/// Permutation p such that seq[p[i]] agrees with ref[i] as often as
/// possible. For binary values the greedy rule is optimal: matched values
/// are handed out first-fit in index order, so the agreement count is
/// N - |#(+1 in seq) - #(+1 in ref)| and ties break deterministically.
inline std::vector<std::size_t> matching_permutation(
    const DichotomicSeq& seq, const DichotomicSeq& ref) {
  if (seq.size() != ref.size()) {
    throw std::invalid_argument("matching_permutation: length mismatch");
  }
  std::deque<std::size_t> plus_pool;
  std::deque<std::size_t> minus_pool;
  for (std::size_t j = 0; j < seq.size(); ++j) {
    (seq[j] == 1 ? plus_pool : minus_pool).push_back(j);
  }

  std::vector<std::size_t> perm(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) {
    std::deque<std::size_t>& wanted = ref[i] == 1 ? plus_pool : minus_pool;
    std::deque<std::size_t>& other = ref[i] == 1 ? minus_pool : plus_pool;
    std::deque<std::size_t>& pool = wanted.empty() ? other : wanted;
    perm[i] = pool.front();
    pool.pop_front();
  }
  return perm;
}

inline DichotomicSeq apply_permutation(const DichotomicSeq& seq,
                                       std::span<const std::size_t> perm) {
  if (perm.size() != seq.size()) {
    throw std::invalid_argument("apply_permutation: length mismatch");
  }
  std::vector<std::int8_t> out(seq.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    out[i] = static_cast<std::int8_t>(seq[perm[i]]);
  }
  return DichotomicSeq(std::move(out));
}

inline DichotomicSeq rearrange_to_match(const DichotomicSeq& seq,
                                        const DichotomicSeq& ref) {
  return apply_permutation(seq, matching_permutation(seq, ref));
}

/// Fraction of positions where the two sequences agree.
inline double agreement_fraction(const DichotomicSeq& x,
                                 const DichotomicSeq& y) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("agreement_fraction: length mismatch");
  }
  std::size_t agree = 0;
  for (std::size_t i = 0; i < x.size(); ++i) agree += x[i] == y[i];
  return static_cast<double>(agree) / static_cast<double>(x.size());
}

/// One run's two recorded columns; trials are atomic (a_i, b_i) pairs, so
/// any rearrangement permutes both columns together.
struct RunPair {
  DichotomicSeq a;
  DichotomicSeq b;

  RunPair(DichotomicSeq a_, DichotomicSeq b_)
      : a(std::move(a_)), b(std::move(b_)) {
    if (a.size() != b.size()) {
      throw std::invalid_argument("run: column lengths must be equal");
    }
  }
};

/// Four separate runs, one per setting pair: run1 measured (a, b),
/// run2 (a, b'), run3 (a', b), run4 (a', b').
struct FourRunData {
  RunPair run1;
  RunPair run2;
  RunPair run3;
  RunPair run4;

  static FourRunData random(std::size_t length, RandomStream& stream) {
    auto pair = [&] {
      auto a = DichotomicSeq::random(length, stream);
      auto b = DichotomicSeq::random(length, stream);
      return RunPair(std::move(a), std::move(b));
    };
    auto r1 = pair();
    auto r2 = pair();
    auto r3 = pair();
    auto r4 = pair();
    return FourRunData{std::move(r1), std::move(r2), std::move(r3),
                       std::move(r4)};
  }
};

struct RearrangedStatistic {
  double value = 0.0;             // <|a1||b1 + b2~|> + <|a4~||b3~ - b2~|>
  double b_match_fraction = 0.0;  // agreement between b(1) and rearranged b(3)
};

/// Rearrangement pipeline over four separate runs:
///   1. permute run 2 so its a column best matches run 1's a column,
///      carrying run 2's b' column along;
///   2. permute run 4 so its b' column best matches the carried b' of
///      step 1, carrying run 4's a' column along;
///   3. permute run 3 so its a' column best matches the carried a' of
///      step 2, carrying run 3's b column along.
/// The returned value is the two-term average built from the rearranged
/// columns; it is bounded by 4, not 2, and exceeding 2 is possible exactly
/// when run 1's b column and the rearranged run-3 b column disagree, which
/// the reported match fraction quantifies.
inline RearrangedStatistic rearranged_statistic(const FourRunData& data) {
  const std::size_t length = data.run1.a.size();
  if (data.run2.a.size() != length || data.run3.a.size() != length ||
      data.run4.a.size() != length) {
    throw std::invalid_argument(
        "rearranged_statistic: run lengths must be equal");
  }

  const auto perm2 = matching_permutation(data.run2.a, data.run1.a);
  const DichotomicSeq b2 = apply_permutation(data.run2.b, perm2);

  const auto perm4 = matching_permutation(data.run4.b, b2);
  const DichotomicSeq a4 = apply_permutation(data.run4.a, perm4);

  const auto perm3 = matching_permutation(data.run3.a, a4);
  const DichotomicSeq b3 = apply_permutation(data.run3.b, perm3);

  std::int64_t sum = 0;
  for (std::size_t i = 0; i < length; ++i) {
    sum += std::abs(data.run1.a[i]) * std::abs(data.run1.b[i] + b2[i]);
    sum += std::abs(a4[i]) * std::abs(b3[i] - b2[i]);
  }

  RearrangedStatistic result;
  result.value = static_cast<double>(sum) / static_cast<double>(length);
  result.b_match_fraction = agreement_fraction(data.run1.b, b3);
  return result;
}

}  // namespace eprsim::tautology
