#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <set>

#include "infoflow/core/random.hpp"
#include "infoflow/data/examples.hpp"

namespace infoflow {

struct SplitSpec {
  int test_year = 0;
  Season test_season = Season::Q1;
  int prior_years = 10;
  /// Dimension-reduction training, joint-model training, validation.
  std::array<double, 3> fractions = {0.4, 0.4, 0.2};
  std::uint64_t seed = 0;
  int response_dim = 2;
  int reduced_dim = 2;
};

struct Splits {
  ExampleSet dr_train;
  ExampleSet jm_train;
  ExampleSet validation;
  ExampleSet test;
  /// Row indices into the source ExampleSet for each of the four sets.
  std::array<std::vector<Index>, 4> members;
};

/// Test = the (test_year, test_season) slice. The pool = the same season in
/// the preceding prior_years years, shuffled by seed and cut by fractions.
inline Splits make_splits(const ExampleSet& examples, const SplitSpec& spec) {
  if (spec.prior_years < 1) throw DataError("make_splits: prior-year count must be >= 1");
  double total = 0.0;
  for (double f : spec.fractions) {
    if (!(f > 0.0)) throw DataError("make_splits: every split fraction must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw DataError("make_splits: fractions must sum to 1");

  std::vector<Index> test, pool;
  std::set<int> pool_years;
  for (Index i = 0; i < examples.size(); ++i) {
    const SliceLabel& l = examples.labels.at(static_cast<std::size_t>(i));
    if (l.season != spec.test_season) continue;
    if (l.year == spec.test_year) {
      test.push_back(i);
    } else if (l.year < spec.test_year && l.year >= spec.test_year - spec.prior_years) {
      pool.push_back(i);
      pool_years.insert(l.year);
    }
  }
  const std::string slice = to_string(SliceLabel{spec.test_year, spec.test_season});
  if (test.empty()) throw DataError("make_splits: test slice " + slice + " has no examples");
  if (static_cast<int>(pool_years.size()) != spec.prior_years) {
    std::string missing;
    for (int y = spec.test_year - spec.prior_years; y < spec.test_year; ++y)
      if (!pool_years.count(y)) missing += (missing.empty() ? "" : ",") + std::to_string(y);
    throw DataError("make_splits: prior " + std::string(to_string(spec.test_season)) +
                    " slices missing for years " + missing);
  }
  const auto min_pool = static_cast<std::size_t>(3 * (spec.response_dim + spec.reduced_dim));
  if (pool.size() < min_pool)
    throw DataError("make_splits: pool of " + std::to_string(pool.size()) +
                    " examples is below 3(p+m) = " + std::to_string(min_pool));

  Rng rng(spec.seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  const auto n = static_cast<double>(pool.size());
  const auto n1 = static_cast<std::size_t>(std::llround(spec.fractions[0] * n));
  const auto n2 = static_cast<std::size_t>(std::llround(spec.fractions[1] * n));
  if (n1 == 0 || n2 == 0 || n1 + n2 >= pool.size())
    throw DataError("make_splits: pool too small for the requested fractions");

  Splits s;
  s.members[0].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n1));
  s.members[1].assign(pool.begin() + static_cast<std::ptrdiff_t>(n1),
                      pool.begin() + static_cast<std::ptrdiff_t>(n1 + n2));
  s.members[2].assign(pool.begin() + static_cast<std::ptrdiff_t>(n1 + n2), pool.end());
  s.members[3] = test;
  s.dr_train = examples.subset(s.members[0]);
  s.jm_train = examples.subset(s.members[1]);
  s.validation = examples.subset(s.members[2]);
  s.test = examples.subset(s.members[3]);
  return s;
}

}  // namespace infoflow
