// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "upcycle/errors.hpp"
#include "upcycle/merging.hpp"
#include "upcycle/rng.hpp"

using namespace upcycle;

namespace {

Checkpoint ckpt1(const std::vector<float>& w) {
  Checkpoint c;
  c.params.emplace("w", Tensor::vec(w));
  return c;
}

TaskVector tv1(const std::vector<float>& w, const std::string& task = "t") {
  TaskVector tv;
  tv.source_task = task;
  tv.deltas.emplace("w", Tensor::vec(w));
  return tv;
}

Checkpoint random_ckpt(std::uint64_t seed, const std::vector<std::size_t>& sizes) {
  SplitMix64 rng(seed);
  Checkpoint c;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    Tensor t = Tensor::zeros({sizes[i]});
    for (float& v : t.data) v = static_cast<float>(rng.gaussian());
    c.params.emplace("p" + std::to_string(i), std::move(t));
  }
  return c;
}

}  // namespace

TEST_CASE("compute_task_vector arithmetic and inverse") {
  Checkpoint base = ckpt1({1.0f, 1.0f});
  Checkpoint expert = ckpt1({2.0f, 0.0f});
  TaskVector tv = compute_task_vector(expert, base);
  CHECK(tv.deltas.at("w") == Tensor::vec({1.0f, -1.0f}));

  TaskVector zero = compute_task_vector(base, base);
  CHECK(zero.deltas.at("w") == Tensor::vec({0.0f, 0.0f}));

  // add back reconstructs the expert (dyadic values keep f32 arithmetic exact)
  std::vector<TaskVector> tvs{tv};
  Checkpoint re = merge_task_arithmetic(base, tvs, 1.0);
  CHECK(re.params.at("w") == expert.params.at("w"));

  Checkpoint other;
  other.params.emplace("v", Tensor::vec({1.0f}));
  CHECK_THROWS_AS(compute_task_vector(other, base), IncompatibilityError);
}

TEST_CASE("merge_average basics") {
  std::vector<Checkpoint> experts{ckpt1({2.0f, 4.0f}), ckpt1({0.0f, 0.0f})};
  CHECK(merge_average(experts).params.at("w") == Tensor::vec({1.0f, 2.0f}));

  std::vector<Checkpoint> same{ckpt1({3.0f, -1.0f}), ckpt1({3.0f, -1.0f})};
  CHECK(merge_average(same).params.at("w") == Tensor::vec({3.0f, -1.0f}));

  std::vector<Checkpoint> three{ckpt1({1.0f}), ckpt1({2.0f}), ckpt1({6.0f})};
  CHECK(merge_average(three).params.at("w") == Tensor::vec({3.0f}));

  CHECK_THROWS_AS(merge_average(std::vector<Checkpoint>{}), ArgumentError);
}

TEST_CASE("merge_task_arithmetic basics") {
  Checkpoint base = ckpt1({1.0f, 1.0f});
  std::vector<TaskVector> tvs{tv1({1.0f, 0.0f}, "a"), tv1({0.0f, 1.0f}, "b")};
  Checkpoint m = merge_task_arithmetic(base, tvs, 0.3);
  CHECK(m.params.at("w")[0] == doctest::Approx(1.3).epsilon(1e-7));
  CHECK(m.params.at("w")[1] == doctest::Approx(1.3).epsilon(1e-7));

  Checkpoint z = merge_task_arithmetic(base, tvs, 0.0);
  CHECK(z.params.at("w") == base.params.at("w"));
}

TEST_CASE("ties_trim examples") {
  TaskVector tv = tv1({0.1f, -0.9f, 0.2f, 0.05f, 0.7f});
  TaskVector kept = ties_trim(tv, 20.0);  // keep 1 of 5
  CHECK(kept.deltas.at("w") == Tensor::vec({0.0f, -0.9f, 0.0f, 0.0f, 0.0f}));

  CHECK(ties_trim(tv, 100.0).deltas.at("w") == tv.deltas.at("w"));

  TaskVector zeros = tv1({0.0f, 0.0f, 0.0f});
  CHECK(ties_trim(zeros, 40.0).deltas.at("w") == zeros.deltas.at("w"));

  CHECK_THROWS_AS(ties_trim(tv, 0.0), ArgumentError);
  CHECK_THROWS_AS(ties_trim(tv, 101.0), ArgumentError);
}

TEST_CASE("ties_trim is global across tensors and matches a sort oracle") {
  SplitMix64 rng(44);
  for (int trial = 0; trial < 30; ++trial) {
    TaskVector tv;
    tv.source_task = "t";
    std::size_t total = 0;
    for (int p = 0; p < 3; ++p) {
      Tensor t = Tensor::zeros({1 + rng.below(6)});
      for (float& v : t.data) v = static_cast<float>(rng.gaussian());
      total += t.size();
      tv.deltas.emplace("p" + std::to_string(p), std::move(t));
    }
    double keep_pct = 5.0 + 90.0 * rng.uniform();
    TaskVector trimmed = ties_trim(tv, keep_pct);

    // oracle: global sort by (|v| desc, name asc, index asc)
    struct E {
      float mag;
      std::string name;
      std::size_t i;
    };
    std::vector<E> entries;
    for (const auto& [name, t] : tv.deltas) {
      for (std::size_t i = 0; i < t.size(); ++i) entries.push_back({std::abs(t.data[i]), name, i});
    }
    std::sort(entries.begin(), entries.end(), [](const E& a, const E& b) {
      if (a.mag != b.mag) return a.mag > b.mag;
      if (a.name != b.name) return a.name < b.name;
      return a.i < b.i;
    });
    std::size_t keep = static_cast<std::size_t>(std::ceil(keep_pct / 100.0 * total));
    TaskVector expected;
    for (const auto& [name, t] : tv.deltas) expected.deltas.emplace(name, Tensor::zeros(t.shape));
    for (std::size_t k = 0; k < keep && k < entries.size(); ++k) {
      expected.deltas.at(entries[k].name).data[entries[k].i] =
          tv.deltas.at(entries[k].name).data[entries[k].i];
    }
    for (const auto& [name, t] : expected.deltas) CHECK(trimmed.deltas.at(name) == t);
  }
}

TEST_CASE("ties_elect_and_merge examples") {
  std::vector<TaskVector> tvs{tv1({0.9f}), tv1({-0.1f}), tv1({0.2f})};
  TaskVector m = ties_elect_and_merge(tvs);
  CHECK(m.deltas.at("w")[0] == doctest::Approx(0.55).epsilon(1e-7));

  std::vector<TaskVector> cancel{tv1({0.5f}), tv1({-0.5f})};
  CHECK(ties_elect_and_merge(cancel).deltas.at("w")[0] == 0.0f);

  std::vector<TaskVector> single{tv1({0.3f, -0.2f, 0.0f})};
  CHECK(ties_elect_and_merge(single).deltas.at("w") == single[0].deltas.at("w"));
}

TEST_CASE("merge_ties identities and symmetry") {
  Checkpoint base = ckpt1({1.0f, -0.5f, 0.25f});
  Checkpoint expert = ckpt1({1.5f, 0.5f, 0.25f});
  std::vector<TaskVector> one{compute_task_vector(expert, base)};
  Checkpoint re = merge_ties(base, one, 1.0, 100.0);
  CHECK(re.params.at("w") == expert.params.at("w"));

  TaskVector tau = tv1({0.5f, -0.25f, 1.0f});
  TaskVector neg = tv1({-0.5f, 0.25f, -1.0f});
  std::vector<TaskVector> opp{tau, neg};
  Checkpoint m = merge_ties(base, opp, 0.7, 100.0);
  CHECK(m.params.at("w") == base.params.at("w"));
}

namespace {

// independent brute-force TIES for the oracle comparison
Checkpoint brute_ties(const Checkpoint& base, const std::vector<TaskVector>& tvs, double alpha,
                      double keep_pct) {
  // per-tv global trim
  std::vector<TaskVector> trimmed;
  for (const auto& tv : tvs) {
    std::size_t total = 0;
    struct E {
      float mag;
      std::string name;
      std::size_t i;
    };
    std::vector<E> entries;
    for (const auto& [name, t] : tv.deltas) {
      total += t.size();
      for (std::size_t i = 0; i < t.size(); ++i) entries.push_back({std::abs(t.data[i]), name, i});
    }
    std::sort(entries.begin(), entries.end(), [](const E& a, const E& b) {
      if (a.mag != b.mag) return a.mag > b.mag;
      if (a.name != b.name) return a.name < b.name;
      return a.i < b.i;
    });
    std::size_t keep = static_cast<std::size_t>(std::ceil(keep_pct / 100.0 * total));
    TaskVector out;
    for (const auto& [name, t] : tv.deltas) out.deltas.emplace(name, Tensor::zeros(t.shape));
    for (std::size_t k = 0; k < keep && k < entries.size(); ++k) {
      out.deltas.at(entries[k].name).data[entries[k].i] =
          tv.deltas.at(entries[k].name).data[entries[k].i];
    }
    trimmed.push_back(std::move(out));
  }
  // elect + merge + apply
  Checkpoint out = base;
  for (auto& [name, t] : out.params) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      double sum = 0.0;
      for (const auto& tv : trimmed) sum += static_cast<double>(tv.deltas.at(name).data[i]);
      float merged = 0.0f;
      if (sum != 0.0) {
        double acc = 0.0;
        std::size_t count = 0;
        for (const auto& tv : trimmed) {
          float v = tv.deltas.at(name).data[i];
          if (v != 0.0f && ((v > 0.0f) == (sum > 0.0))) {
            acc += static_cast<double>(v);
            ++count;
          }
        }
        if (count > 0) merged = static_cast<float>(acc / static_cast<double>(count));
      }
      t.data[i] = static_cast<float>(static_cast<double>(t.data[i]) +
                                     alpha * static_cast<double>(merged));
    }
  }
  return out;
}

}  // namespace

TEST_CASE("merge_ties matches brute force on random instances") {
  SplitMix64 rng(321);
  for (int trial = 0; trial < 40; ++trial) {
    Checkpoint base = random_ckpt(1000 + trial, {5, 3});
    std::vector<TaskVector> tvs;
    std::size_t n_tv = 1 + rng.below(3);
    for (std::size_t t = 0; t < n_tv; ++t) {
      Checkpoint e = random_ckpt(2000 + trial * 10 + t, {5, 3});
      tvs.push_back(compute_task_vector(e, base));
    }
    double alpha = 0.5 + rng.uniform();
    double keep = 10.0 * (1 + rng.below(10));
    Checkpoint got = merge_ties(base, tvs, alpha, keep);
    Checkpoint want = brute_ties(base, tvs, alpha, keep);
    for (const auto& [name, t] : want.params) CHECK(got.params.at(name) == t);
  }
}

TEST_CASE("dare_drop_rescale basics") {
  TaskVector tv = tv1({0.5f, -1.0f, 2.0f, 0.125f});
  CHECK(dare_drop_rescale(tv, 0.0, 7).deltas.at("w") == tv.deltas.at("w"));

  // surviving entries at p=0.5 are exactly doubled
  TaskVector d = dare_drop_rescale(tv, 0.5, 7);
  for (std::size_t i = 0; i < 4; ++i) {
    float v = d.deltas.at("w")[i];
    CHECK((v == 0.0f || v == 2.0f * tv.deltas.at("w")[i]));
  }

  // deterministic given seed
  CHECK(dare_drop_rescale(tv, 0.3, 11).deltas.at("w") ==
        dare_drop_rescale(tv, 0.3, 11).deltas.at("w"));

  CHECK_THROWS_AS(dare_drop_rescale(tv, 1.0, 0), ArgumentError);
  CHECK_THROWS_AS(dare_drop_rescale(tv, -0.1, 0), ArgumentError);
}

TEST_CASE("dare mask is independent of traversal order (counter-based)") {
  // same entries under different tensor layout keep their mask bits
  TaskVector a;
  a.deltas.emplace("w", Tensor::vec({1.0f, 1.0f, 1.0f, 1.0f}));
  a.deltas.emplace("z", Tensor::vec({1.0f, 1.0f}));
  TaskVector b;  // same tensors, added in another order
  b.deltas.emplace("z", Tensor::vec({1.0f, 1.0f}));
  b.deltas.emplace("w", Tensor::vec({1.0f, 1.0f, 1.0f, 1.0f}));
  TaskVector da = dare_drop_rescale(a, 0.5, 99);
  TaskVector db = dare_drop_rescale(b, 0.5, 99);
  CHECK(da.deltas.at("w") == db.deltas.at("w"));
  CHECK(da.deltas.at("z") == db.deltas.at("z"));
}

TEST_CASE("dare Monte-Carlo mean is unbiased within 2 percent") {
  TaskVector tv = tv1({0.8f, -0.45f, 1.7f});
  for (double p : {0.1, 0.5}) {
    std::vector<double> sums(3, 0.0);
    const int n = 20000;
    for (int s = 0; s < n; ++s) {
      TaskVector d = dare_drop_rescale(tv, p, 5000 + s);
      for (std::size_t i = 0; i < 3; ++i) sums[i] += d.deltas.at("w")[i];
    }
    for (std::size_t i = 0; i < 3; ++i) {
      double mean = sums[i] / n;
      double rel = std::abs(mean - tv.deltas.at("w")[i]) / std::abs(tv.deltas.at("w")[i]);
      CHECK(rel < 0.02);
    }
  }
}

TEST_CASE("merge_dare reductions") {
  Checkpoint base = ckpt1({1.0f, 2.0f, -0.5f});
  std::vector<TaskVector> tvs{tv1({0.5f, -0.25f, 0.75f}, "a"), tv1({-0.125f, 0.5f, 0.25f}, "b")};

  Checkpoint d0 = merge_dare(base, tvs, 0.4, 0.0, 3);
  Checkpoint ta = merge_task_arithmetic(base, tvs, 0.4);
  CHECK(d0.params.at("w") == ta.params.at("w"));

  Checkpoint z = merge_dare(base, tvs, 0.0, 0.5, 3);
  CHECK(z.params.at("w") == base.params.at("w"));

  CHECK(merge_dare(base, tvs, 0.4, 0.5, 3).params.at("w") ==
        merge_dare(base, tvs, 0.4, 0.5, 3).params.at("w"));
}

TEST_CASE("permutation invariance of average, TA, TIES") {
  Checkpoint base = random_ckpt(71, {6});
  std::vector<Checkpoint> experts;
  std::vector<TaskVector> tvs;
  for (int t = 0; t < 3; ++t) {
    experts.push_back(random_ckpt(80 + t, {6}));
    tvs.push_back(compute_task_vector(experts.back(), base));
  }
  std::vector<Checkpoint> experts_r{experts[2], experts[0], experts[1]};
  std::vector<TaskVector> tvs_r{tvs[2], tvs[0], tvs[1]};

  CHECK(merge_average(experts).params.at("p0") == merge_average(experts_r).params.at("p0"));
  CHECK(merge_task_arithmetic(base, tvs, 0.3).params.at("p0") ==
        merge_task_arithmetic(base, tvs_r, 0.3).params.at("p0"));
  CHECK(merge_ties(base, tvs, 0.8, 20.0).params.at("p0") ==
        merge_ties(base, tvs_r, 0.8, 20.0).params.at("p0"));
}

TEST_CASE("ties reduction: keep=100 with same-sign task vectors is base + alpha*mean") {
  Checkpoint base = ckpt1({0.5f, -1.0f});
  std::vector<TaskVector> tvs{tv1({0.25f, -0.5f}), tv1({0.75f, -0.25f})};
  Checkpoint got = merge_ties(base, tvs, 0.6, 100.0);
  for (std::size_t i = 0; i < 2; ++i) {
    double mean = (static_cast<double>(tvs[0].deltas.at("w")[i]) +
                   static_cast<double>(tvs[1].deltas.at("w")[i])) / 2.0;
    float want = static_cast<float>(static_cast<double>(base.params.at("w")[i]) +
                                    0.6 * static_cast<double>(static_cast<float>(mean)));
    CHECK(got.params.at("w")[i] == want);
  }
}

TEST_CASE("default grids match the tuning protocol") {
  auto ta = default_grid(MergeMethod::task_arithmetic);
  REQUIRE(ta.size() == 20);
  CHECK(ta.front().alpha == doctest::Approx(0.05));
  CHECK(ta.back().alpha == doctest::Approx(1.0));

  auto ties = default_grid(MergeMethod::ties);
  REQUIRE(ties.size() == 33);
  CHECK(ties.front().alpha == doctest::Approx(0.5));
  CHECK(ties.front().keep_pct == doctest::Approx(10.0));
  CHECK(ties.back().alpha == doctest::Approx(1.5));
  CHECK(ties.back().keep_pct == doctest::Approx(30.0));

  auto dare = default_grid(MergeMethod::dare);
  REQUIRE(dare.size() == 33);
  CHECK(dare.front().alpha == doctest::Approx(0.05));
  CHECK(dare.front().drop_prob == doctest::Approx(0.9));
  CHECK(dare.back().alpha == doctest::Approx(0.55));
  CHECK(dare.back().drop_prob == doctest::Approx(0.7));

  CHECK(default_grid(MergeMethod::average).size() == 1);
}

TEST_CASE("tune selects the best config with earliest-position tie break") {
  Checkpoint base = ckpt1({0.0f, 0.0f});
  std::vector<TaskVector> tvs{tv1({1.0f, 1.0f})};

  auto grid = default_grid(MergeMethod::task_arithmetic);
  // singleton grid returns that config
  std::vector<MergeConfig> one{grid[4]};
  auto [c1, s1] = tune(MergeMethod::task_arithmetic, base, tvs, one,
                       [](const Checkpoint&) { return 1.0; });
  CHECK(c1.alpha == doctest::Approx(grid[4].alpha));

  // constant callback keeps the first grid entry
  auto [c2, s2] = tune(MergeMethod::task_arithmetic, base, tvs, grid,
                       [](const Checkpoint&) { return 0.5; });
  CHECK(c2.alpha == doctest::Approx(0.05));

  // -(merged - target)^2 with optimum at alpha* = 0.42
  const double target = 0.42;
  auto [c3, s3] = tune(MergeMethod::task_arithmetic, base, tvs, grid, [&](const Checkpoint& m) {
    double d0 = m.params.at("w")[0] - target;
    double d1 = m.params.at("w")[1] - target;
    return -(d0 * d0 + d1 * d1);
  });
  CHECK(std::abs(c3.alpha - target) <= 0.05 + 1e-9);

  CHECK_THROWS_AS(tune(MergeMethod::task_arithmetic, base, tvs, std::vector<MergeConfig>{},
                       [](const Checkpoint&) { return 0.0; }),
                  ArgumentError);

  // callback failure propagates with config context
  CHECK_THROWS_WITH_AS(
      tune(MergeMethod::task_arithmetic, base, tvs, one,
           [](const Checkpoint&) -> double { throw std::runtime_error("boom"); }),
      doctest::Contains("task_arithmetic"), Error);
}

TEST_CASE("merged checkpoints keep the base key set and shapes") {
  Checkpoint base = random_ckpt(5, {4, 2, 3});
  std::vector<TaskVector> tvs;
  for (int t = 0; t < 2; ++t) {
    tvs.push_back(compute_task_vector(random_ckpt(50 + t, {4, 2, 3}), base));
  }
  for (MergeMethod m : {MergeMethod::average, MergeMethod::task_arithmetic, MergeMethod::ties,
                        MergeMethod::dare}) {
    MergeConfig cfg;
    cfg.method = m;
    cfg.alpha = 0.5;
    cfg.keep_pct = 20.0;
    cfg.drop_prob = 0.5;
    Checkpoint merged = merge(base, tvs, cfg);
    REQUIRE(merged.params.size() == base.params.size());
    for (const auto& [name, t] : base.params) {
      CHECK(merged.params.at(name).shape == t.shape);
    }
  }
}
