// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <Eigen/Dense>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "upcycle/errors.hpp"
#include "upcycle/moe.hpp"
#include "upcycle/rng.hpp"

using namespace upcycle;
namespace fs = std::filesystem;

namespace {

LoraAdapter random_adapter(const std::string& layer, std::size_t n_out, std::size_t n_in, int rank,
                           std::uint64_t seed) {
  SplitMix64 rng(seed);
  LoraAdapter ad;
  ad.layer_name = layer;
  ad.rank = rank;
  ad.scale = 2.0 * rank;
  ad.a = Tensor::zeros({static_cast<std::size_t>(rank), n_in});
  ad.b = Tensor::zeros({n_out, static_cast<std::size_t>(rank)});
  for (float& v : ad.a.data) v = static_cast<float>(rng.gaussian() * 0.3);
  for (float& v : ad.b.data) v = static_cast<float>(rng.gaussian() * 0.3);
  return ad;
}

MoELayer make_layer(std::size_t n_experts, int top_k, std::uint64_t seed) {
  SplitMix64 rng(seed);
  MoELayer layer;
  layer.w = Tensor::zeros({4, 3});
  for (float& v : layer.w.data) v = static_cast<float>(rng.gaussian() * 0.5);
  layer.bias = Tensor::vec({0.1f, -0.2f, 0.3f, 0.0f});
  layer.top_k = top_k;
  for (std::size_t t = 0; t < n_experts; ++t) {
    layer.experts.push_back(random_adapter("L", 4, 3, 2, seed * 10 + t));
  }
  layer.router = Tensor::zeros({n_experts, 3});
  for (float& v : layer.router.data) v = static_cast<float>(rng.gaussian());
  return layer;
}

}  // namespace

TEST_CASE("route: single expert, symmetry, hand example") {
  MoELayer one = make_layer(1, 1, 5);
  RoutingDecision d = route(one, Tensor::vec({0.5f, -1.0f, 2.0f}));
  REQUIRE(d.selected.size() == 1);
  CHECK(d.weights[0] == 1.0);

  // two experts with equal router rows split evenly
  MoELayer two = make_layer(2, 2, 6);
  for (std::size_t j = 0; j < 3; ++j) two.router.at(1, j) = two.router.at(0, j);
  RoutingDecision d2 = route(two, Tensor::vec({1.0f, 0.0f, -0.5f}));
  CHECK(d2.weights[0] == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(d2.weights[1] == doctest::Approx(0.5).epsilon(1e-6));

  // router producing logits [2,1,0], k=2 -> weights {0.7311, 0.2689}
  MoELayer three = make_layer(3, 2, 7);
  three.router = Tensor::mat(3, 3, {2, 0, 0, 1, 0, 0, 0, 0, 0});
  RoutingDecision d3 = route(three, Tensor::vec({1.0f, 0.0f, 0.0f}));
  REQUIRE(d3.selected == std::vector<int>{0, 1});
  CHECK(d3.weights[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(d3.weights[1] == doctest::Approx(0.2689).epsilon(1e-4));
}

TEST_CASE("routing weights sum to one, selection size is min(top_k, |T|)") {
  SplitMix64 rng(8);
  for (int trial = 0; trial < 40; ++trial) {
    std::size_t n = 1 + rng.below(6);
    int k = 1 + static_cast<int>(rng.below(n));
    MoELayer layer = make_layer(n, k, 100 + trial);
    Tensor x = Tensor::zeros({3});
    for (float& v : x.data) v = static_cast<float>(rng.gaussian());
    RoutingDecision d = route(layer, x);
    CHECK(d.selected.size() == std::min<std::size_t>(k, n));
    double sum = 0.0;
    for (double w : d.weights) {
      CHECK(w > 0.0);
      sum += w;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
    // selected are the top-k probs
    for (int t : d.selected) {
      std::size_t beaten = 0;
      for (std::size_t o = 0; o < n; ++o) {
        if (d.probs[o] > d.probs[static_cast<std::size_t>(t)]) ++beaten;
      }
      CHECK(beaten < static_cast<std::size_t>(k));
    }
  }
}

TEST_CASE("moe_forward: zero experts reduce to the dense layer") {
  MoELayer layer = make_layer(3, 2, 9);
  for (auto& e : layer.experts) {
    std::fill(e.b.data.begin(), e.b.data.end(), 0.0f);
  }
  Tensor x = Tensor::vec({0.3f, -0.7f, 1.1f});
  Tensor y = moe_forward(layer, x);
  Tensor dense = add(matvec(layer.w, x), layer.bias);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(y[i] == doctest::Approx(dense[i]).epsilon(1e-6));
  }
}

TEST_CASE("moe_forward with one expert equals the LoRA forward bit-exactly") {
  SplitMix64 rng(10);
  for (int trial = 0; trial < 25; ++trial) {
    MoELayer layer = make_layer(1, 1, 300 + trial);
    Tensor x = Tensor::zeros({3});
    for (float& v : x.data) v = static_cast<float>(rng.gaussian());
    Tensor y_moe = moe_forward(layer, x);
    Tensor y_lora = lora_forward(layer.w, layer.bias, layer.experts[0], x);
    CHECK(y_moe == y_lora);
  }
}

TEST_CASE("moe_forward matches a hand-computed 2x2 instance") {
  MoELayer layer;
  layer.w = Tensor::mat(2, 2, {1.0f, 0.0f, 0.0f, 1.0f});
  layer.bias = Tensor::vec({0.0f, 0.0f});
  layer.top_k = 2;
  for (int t = 0; t < 2; ++t) {
    LoraAdapter ad;
    ad.layer_name = "L";
    ad.rank = 1;
    ad.scale = 1.0;
    ad.a = Tensor::mat(1, 2, {1.0f, 0.0f});
    ad.b = t == 0 ? Tensor::mat(2, 1, {1.0f, 0.0f}) : Tensor::mat(2, 1, {0.0f, 1.0f});
    layer.experts.push_back(ad);
  }
  layer.router = Tensor::mat(2, 2, {0.0f, 0.0f, 0.0f, 0.0f});  // uniform routing
  Tensor x = Tensor::vec({2.0f, 3.0f});
  // prob 0.5 each: y = x + 0.5*(1/1)*[x0,0] + 0.5*[0,x0] = [2+1, 3+1]
  Tensor y = moe_forward(layer, x);
  CHECK(y[0] == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(y[1] == doctest::Approx(4.0).epsilon(1e-6));
}

TEST_CASE("arrow_row: rank-1 delta and degenerate expert") {
  LoraAdapter ad;
  ad.layer_name = "L";
  ad.rank = 1;
  ad.scale = 1.0;
  ad.b = Tensor::mat(3, 1, {1.0f, -2.0f, 0.5f});
  ad.a = Tensor::mat(1, 4, {0.5f, -1.0f, 2.0f, 0.0f});
  Tensor row = arrow_row(ad, 128, 3);
  double n = std::sqrt(0.25 + 1.0 + 4.0);
  CHECK(row[0] == doctest::Approx(0.5 / n).epsilon(1e-6));
  CHECK(row[1] == doctest::Approx(-1.0 / n).epsilon(1e-6));
  CHECK(row[2] == doctest::Approx(2.0 / n).epsilon(1e-6));

  LoraAdapter zero = ad;
  zero.b = Tensor::mat(3, 1, {0.0f, 0.0f, 0.0f});
  CHECK_THROWS_AS(arrow_row(zero), DegenerateExpertError);
}

TEST_CASE("arrow_init rows are unit and match a dense eigen oracle") {
  std::vector<LoraAdapter> experts;
  for (int t = 0; t < 4; ++t) experts.push_back(random_adapter("L", 6, 5, 4, 700 + t));
  Tensor router = arrow_init(experts, 11);
  REQUIRE(router.rows() == 4);
  for (std::size_t t = 0; t < 4; ++t) {
    double n2 = 0.0;
    for (std::size_t j = 0; j < 5; ++j) n2 += static_cast<double>(router.at(t, j)) * router.at(t, j);
    CHECK(std::abs(std::sqrt(n2) - 1.0) < 8e-7);

    Tensor d = materialize_delta(experts[t]);
    Eigen::MatrixXd m(6, 5);
    for (int i = 0; i < 6; ++i) {
      for (int j = 0; j < 5; ++j) m(i, j) = d.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m.transpose() * m);
    Eigen::VectorXd top = es.eigenvectors().col(4);
    double dot = 0.0;
    for (std::size_t j = 0; j < 5; ++j) dot += top(static_cast<long>(j)) * router.at(t, j);
    CHECK(std::abs(dot) >= 1.0 - 1e-6);
  }
}

namespace {

Checkpoint small_base(std::uint64_t seed) {
  SplitMix64 rng(seed);
  Checkpoint base;
  Tensor w1 = Tensor::zeros({4, 3});
  Tensor w2 = Tensor::zeros({2, 4});
  for (float& v : w1.data) v = static_cast<float>(rng.gaussian() * 0.4);
  for (float& v : w2.data) v = static_cast<float>(rng.gaussian() * 0.4);
  base.params.emplace("backbone.1.w", std::move(w1));
  base.params.emplace("backbone.1.b", Tensor::vec({0.1f, 0.2f, -0.1f, 0.0f}));
  base.params.emplace("backbone.2.w", std::move(w2));
  base.params.emplace("backbone.2.b", Tensor::vec({0.05f, -0.05f}));
  return base;
}

LoraModel expert_model(std::uint64_t seed, bool zero_init = false) {
  LoraModel lm;
  lm.rank = 2;
  lm.scale = 4.0;
  LoraAdapter a1 = random_adapter("backbone.1.w", 4, 3, 2, seed);
  LoraAdapter a2 = random_adapter("backbone.2.w", 2, 4, 2, seed + 1);
  if (zero_init) {
    std::fill(a1.b.data.begin(), a1.b.data.end(), 0.0f);
    std::fill(a2.b.data.begin(), a2.b.data.end(), 0.0f);
  }
  lm.adapters.emplace("backbone.1.w", std::move(a1));
  lm.adapters.emplace("backbone.2.w", std::move(a2));
  return lm;
}

}  // namespace

TEST_CASE("moefy: construction, zero-delta fallback, reserved names") {
  Checkpoint base = small_base(21);
  std::vector<LoraModel> experts;
  for (int t = 0; t < 8; ++t) experts.push_back(expert_model(900 + 10 * t));
  MoeModel m = moefy(base, experts, 2, 77);
  REQUIRE(m.layers.size() == 2);
  for (const auto& [name, layer] : m.layers) {
    REQUIRE(layer.router.rows() == 8);
    for (std::size_t t = 0; t < 8; ++t) {
      double n2 = 0.0;
      for (std::size_t j = 0; j < layer.router.cols(); ++j) {
        n2 += static_cast<double>(layer.router.at(t, j)) * layer.router.at(t, j);
      }
      CHECK(std::abs(std::sqrt(n2) - 1.0) < 8e-7);
    }
  }

  // zero-initialized experts fall back to seeded random unit rows
  std::vector<LoraModel> zero_experts{expert_model(1, true), expert_model(2, true)};
  MoeModel mz = moefy(base, zero_experts, 1, 3);
  for (const auto& [name, layer] : mz.layers) {
    for (std::size_t t = 0; t < 2; ++t) {
      double n2 = 0.0;
      for (std::size_t j = 0; j < layer.router.cols(); ++j) {
        n2 += static_cast<double>(layer.router.at(t, j)) * layer.router.at(t, j);
      }
      CHECK(std::abs(std::sqrt(n2) - 1.0) < 8e-7);
    }
  }

  // mismatched layer coverage across experts
  LoraModel partial = expert_model(5);
  partial.adapters.erase("backbone.2.w");
  std::vector<LoraModel> bad{expert_model(6), partial};
  CHECK_THROWS_AS(moefy(base, bad, 1, 0), IncompatibilityError);

  Checkpoint reserved = base;
  reserved.params.emplace("moe.x", Tensor::vec({1.0f}));
  CHECK_THROWS_AS(moefy(reserved, experts, 2, 0), IncompatibilityError);
}

TEST_CASE("moefy with one expert and k=1 equals the LoRA-adapted forward per layer") {
  Checkpoint base = small_base(31);
  std::vector<LoraModel> experts{expert_model(400)};
  MoeModel m = moefy(base, experts, 1, 5);
  SplitMix64 rng(32);
  for (const auto& [name, layer] : m.layers) {
    for (int trial = 0; trial < 10; ++trial) {
      Tensor x = Tensor::zeros({layer.w.cols()});
      for (float& v : x.data) v = static_cast<float>(rng.gaussian());
      Tensor y_moe = moe_forward(layer, x);
      Tensor y_lora = lora_forward(layer.w, layer.bias, experts[0].adapters.at(name), x);
      CHECK(y_moe == y_lora);
    }
  }
}

TEST_CASE("moe model save/load round trip") {
  Checkpoint base = small_base(41);
  base.meta["model_id"] = "base-41";
  std::vector<LoraModel> experts{expert_model(500), expert_model(510), expert_model(520)};
  MoeModel m = moefy(base, experts, 2, 9);
  fs::path p = fs::temp_directory_path() / "upcycle_test_moe.upck";
  save(m, p);
  MoeModel got = load_moe(p);
  CHECK(got.top_k == 2);
  CHECK(got.base.params == m.base.params);
  REQUIRE(got.layers.size() == m.layers.size());
  for (const auto& [name, layer] : m.layers) {
    const MoELayer& gl = got.layers.at(name);
    CHECK(gl.router == layer.router);
    REQUIRE(gl.experts.size() == layer.experts.size());
    for (std::size_t t = 0; t < layer.experts.size(); ++t) {
      CHECK(gl.experts[t].a == layer.experts[t].a);
      CHECK(gl.experts[t].b == layer.experts[t].b);
      CHECK(gl.experts[t].rank == layer.experts[t].rank);
      CHECK(gl.experts[t].scale == doctest::Approx(layer.experts[t].scale));
    }
  }
}
