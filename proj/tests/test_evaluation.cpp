#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "synthetic.hpp"
#include "vs2/errors.hpp"
#include "vs2/evaluation.hpp"
#include "vs2/steering.hpp"

using namespace vs2;
using namespace vs2::testing;

namespace {

SteeringVector sv(Vec d) {
  SteeringVector v;
  v.direction = std::move(d);
  return v;
}

struct Fixture {
  EmbeddingBundle test;
  ClassifierHead head;
  SaeModel model;
};

Fixture fixture(std::uint64_t seed, std::size_t rows = 60) {
  Rng rng(seed);
  auto test = random_bundle(rng, rows, 6, 4);
  auto head = random_head(rng, 6, 4);
  auto model = random_model(rng, 6, 2, 3);
  return {std::move(test), std::move(head), std::move(model)};
}

}  // namespace

TEST_CASE("classify") {
  Rng rng(1);
  const auto head = random_head(rng, 8, 10);
  const auto p7 = head.prototype(7);
  const Vec x7(p7.begin(), p7.end());
  const auto r = classify(x7, head, 3);
  CHECK(r[0].class_id == 7);
  CHECK(r[0].score == doctest::Approx(1.0));

  for (int t = 0; t < 50; ++t) {
    const auto x = gaussian_vec(rng, 8);
    auto scaled = x;
    for (auto& v : scaled) v *= 3.7;
    const auto a = classify(x, head, 10);
    const auto b = classify(scaled, head, 10);
    const auto s = head.cosine_scores(x);
    std::vector<std::size_t> order(10);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return s[i] > s[j]; });
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(a[i].class_id == b[i].class_id);
      CHECK(a[i].class_id == order[i]);
    }
  }
  CHECK_THROWS_AS(classify(x7, head, 11), ConfigError);
  CHECK_THROWS_AS(classify(Vec(8, 0.0), head, 1), DegenerateInputError);
}

TEST_CASE("evaluate") {
  SUBCASE("hand-counted tally") {
    const ClassifierHead head(2, {1, 0, 0, 1, -1, 0}, {"a", "b", "c"});
    EmbeddingBundle test;
    test.dim = 2;
    // predictions: a, b, a, c, b
    test.data = {1, 0.1f, 0.2f, 1, 2, -0.5f, -1, 0.2f, 0, 3};
    test.rows = 5;
    test.ids = {"0", "1", "2", "3", "4"};
    test.labels = std::vector<std::uint32_t>{0, 1, 1, 2, 0};
    test.num_classes = 3;
    test.class_names = head.class_names();
    const auto r = evaluate(test, head);
    CHECK(r.top1 == doctest::Approx(3.0 / 5.0));
    CHECK(r.predictions == std::vector<std::size_t>{0, 1, 0, 2, 1});
    CHECK(r.per_class[0].accuracy == doctest::Approx(0.5));
    CHECK(r.per_class[0].support == 2);
    CHECK(r.per_class[0].top_confusion == std::optional<std::size_t>(1));
    CHECK(r.per_class[1].top_confusion == std::optional<std::size_t>(0));
    CHECK_FALSE(r.per_class[2].top_confusion.has_value());
    CHECK(r.top5 == 1.0);  // only three classes, so every row hits within min(5, C)
  }
  SUBCASE("invariants and determinism") {
    auto f = fixture(2, 97);
    const auto steer = make_sae_steer(f.model, SteeringConfig{});
    const auto one = evaluate(f.test, f.head, steer, {1, Json::object()});
    const auto many = evaluate(f.test, f.head, steer, {4, Json::object()});
    CHECK(one.to_json().dump() == many.to_json().dump());
    CHECK(evaluate(f.test, f.head, steer).to_json().dump() == one.to_json().dump());
    CHECK(one.top1 <= one.top5);
    double weighted = 0;
    for (const auto& c : one.per_class) weighted += c.accuracy * double(c.support);
    CHECK(std::abs(weighted / double(one.rows) - one.top1) <= 1e-9);
    const auto j = one.to_json();
    const std::vector<std::string> keys{"config", "top1", "top5", "rows", "per_class"};
    std::vector<std::string> got;
    for (auto it = j.begin(); it != j.end(); ++it) got.push_back(it.key());
    CHECK(got == keys);
  }
  SUBCASE("errors") {
    auto f = fixture(3);
    auto unlabelled = f.test;
    unlabelled.labels.reset();
    unlabelled.num_classes = 0;
    unlabelled.class_names.clear();
    CHECK_THROWS_AS(evaluate(unlabelled, f.head), ConfigError);
    auto wide = f.test;
    (*wide.labels)[0] = 7;
    wide.num_classes = 8;
    CHECK_THROWS_AS(evaluate(wide, f.head), ConfigError);
    const SteerFn boom = [](std::size_t row, std::span<const double> x) -> Vec {
      if (row == 5) throw NumericsError("row 5 failed");
      return Vec(x.begin(), x.end());
    };
    CHECK_THROWS_AS(evaluate(f.test, f.head, boom, {3, Json::object()}), NumericsError);
  }
}

TEST_CASE("steering closures") {
  auto f = fixture(4);
  const auto x = f.test.row_vec(3);
  CHECK(make_manipulation_steer(f.model, 0.0, 2.1)(3, x) == manipulation_variant(f.model, x, 0.0, 2.1));
  const auto table = build_prototypes(f.model, f.test, f.head, 5, true);
  const auto steer = make_prototype_steer(f.model, table, f.test, 1.5, 2.1);
  const auto label = (*f.test.labels)[3];
  CHECK(steer(3, x) == apply_steering(x, steering_vector_prototype(f.model, label, table, 1.5), 2.1));
}

TEST_CASE("sweep") {
  auto f = fixture(5);
  const auto base = evaluate(f.test, f.head).top1;
  const auto single = sweep(f.test, f.head, f.model, {1.0}, {0.0});
  CHECK(single.accuracy[0][0] == base);
  CHECK(single.baseline == base);
  const auto grid = sweep(f.test, f.head, f.model, {1.0, 1.5, 2.0}, {0.0, 1.0, 2.1});
  REQUIRE(grid.accuracy.size() == 3);
  for (const double a : grid.accuracy[0]) CHECK(a == base);
  for (const auto& row : grid.accuracy) CHECK(row[0] == base);
  const auto [g, l] = grid.best_cell();
  for (const auto& row : grid.accuracy) {
    for (const double a : row) CHECK(a <= grid.accuracy[g][l]);
  }
  const auto j = grid.to_json();
  CHECK(j["best"]["top1"] == grid.accuracy[g][l]);
  const auto svg = sweep_heatmap_svg(grid);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("</svg>") != std::string::npos);
}

TEST_CASE("manipulation ablation") {
  auto f = fixture(6);
  const auto r = manipulation_ablation(f.test, f.head, f.model, 0.0);
  CHECK(r.vs2.predictions == r.baseline.predictions);
  CHECK(r.zero_out.predictions == r.baseline.predictions);
  CHECK(r.negate.predictions == r.baseline.predictions);
  CHECK_FALSE(r.ordering_holds());
  const auto j = r.to_json();
  for (const char* key : {"baseline", "vs2", "zero_out", "negate", "ordering_holds"}) CHECK(j.contains(key));
}

TEST_CASE("top-N ablation") {
  auto f = fixture(7);
  Rng rng(8);
  auto corpus = random_bundle(rng, 40, 6, 4);
  for (auto& id : corpus.ids) id = "cache_" + id;
  const EmbeddingCache cache(std::make_shared<const EmbeddingBundle>(corpus));
  Vs2ppConfig cfg;
  for (const auto policy : {GroupPolicy::Oracle, GroupPolicy::PseudoQuery, GroupPolicy::PseudoMajority}) {
    cfg.policy = policy;
    const auto curve = topn_ablation(f.test, f.head, f.model, cache, {1, 5, 5, 40}, cfg);
    REQUIRE(curve.points.size() == 4);
    CHECK(curve.points[1].top1 == curve.points[2].top1);
  }
  CHECK(topn_curve_svg(topn_ablation(f.test, f.head, f.model, cache, {1, 2}, cfg)).rfind("<svg", 0) == 0);
  CHECK_THROWS_AS(topn_ablation(f.test, f.head, f.model, cache, {41}, cfg), ConfigError);

  SUBCASE("forced equal groups reproduce identity") {
    Vs2ppConfig forced;
    forced.neighbors = 10;
    forced.force_equal_groups = true;
    const auto r = evaluate(f.test, f.head, make_vs2pp_steer(f.model, cache, f.head, f.test, nullptr, forced));
    CHECK(r.to_json().dump() == evaluate(f.test, f.head).to_json().dump());
  }
  SUBCASE("rag closure") {
    const auto steer = make_rag_steer(cache, f.test, nullptr, 5, 1.0);
    const auto x = f.test.row_vec(0);
    CHECK(steer(0, x) == x);
  }
}

TEST_CASE("orthogonality") {
  SUBCASE("identical vectors rank first") {
    std::vector<SteeringVector> v{sv({1, 0, 0}), sv({1, 0, 0}), sv({0, 1, 0})};
    const auto r = prototype_orthogonality(v, {"a", "b", "c"});
    CHECK(r.ranked[0].a == 0);
    CHECK(r.ranked[0].b == 1);
    CHECK(r.ranked[0].cosine == doctest::Approx(1.0));
    for (std::size_t i = 0; i < 3; ++i) CHECK(r.cosine[i][i] == doctest::Approx(1.0));
  }
  SUBCASE("orthogonal basis") {
    std::vector<SteeringVector> v{sv({2, 0, 0}), sv({0, 3, 0}), sv({0, 0, 0.5})};
    const auto r = prototype_orthogonality(v, {"a", "b", "c"});
    CHECK(r.mean_off_diagonal == 0.0);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) CHECK(r.cosine[i][j] == r.cosine[j][i]);
    }
    CHECK(r.to_json(2)["top_pairs"].size() == 2);
  }
  SUBCASE("errors") {
    std::vector<SteeringVector> v{sv({1, 0}), sv({0, 0})};
    try {
      prototype_orthogonality(v, {"cat", "dog"});
      FAIL("expected DegenerateInputError");
    } catch (const DegenerateInputError& e) {
      CHECK(std::string(e.what()).find("dog") != std::string::npos);
    }
    CHECK_THROWS_AS(prototype_orthogonality({sv({1, 0})}, {"cat"}), ConfigError);
  }
}

TEST_CASE("concept coverage") {
  auto f = fixture(9, 30);
  SUBCASE("full ranking is a permutation sorted by pre-activation") {
    const auto r = concept_coverage(f.model, f.test, 2, f.test.rows);
    std::set<std::string> ids;
    for (const auto& e : r.top) ids.insert(e.id);
    CHECK(ids.size() == f.test.rows);
    std::vector<std::pair<double, std::size_t>> oracle;
    for (std::size_t row = 0; row < f.test.rows; ++row) {
      oracle.emplace_back(-pre_activations(f.model, f.test.row_vec(row))[2], row);
    }
    std::sort(oracle.begin(), oracle.end());
    for (std::size_t i = 0; i < oracle.size(); ++i) {
      CHECK(r.top[i].row == oracle[i].second);
      CHECK(r.top[i].activation == doctest::Approx(-oracle[i].first).epsilon(1e-12));
    }
    std::size_t hist_total = 0;
    for (const auto& [label, count] : r.label_histogram) hist_total += count;
    CHECK(hist_total == f.test.rows);
    CHECK_FALSE(r.degenerate);
  }
  SUBCASE("all-zero feature is flagged") {
    auto m = f.model;
    for (std::size_t i = 0; i < m.dim; ++i) m.enc(1, i) = 0.0;
    const auto r = concept_coverage(m, f.test, 1, 5);
    CHECK(r.degenerate);
    CHECK(r.top.size() == 5);
  }
  SUBCASE("errors") {
    auto m = f.model;
    m.dead_mask[4] = 1;
    CHECK_THROWS_AS(concept_coverage(m, f.test, 4, 3), DeadFeatureError);
    CHECK_THROWS_AS(concept_coverage(m, f.test, m.latent_dim, 3), KeyError);
  }
}

TEST_CASE("per-class gain and loss") {
  auto f = fixture(10, 120);
  const auto base = evaluate(f.test, f.head);
  const auto treated = evaluate(f.test, f.head, make_sae_steer(f.model, SteeringConfig{1.5, 6.0, SteerMode::Steering, {}}));
  const auto deltas = class_deltas(base, treated);
  double weighted = 0;
  for (const auto& d : deltas) weighted += d.delta() * double(d.support);
  CHECK(std::abs(weighted - (treated.top1 - base.top1) * double(base.rows)) <= 1e-9);
  for (std::size_t i = 1; i < deltas.size(); ++i) CHECK(deltas[i - 1].delta() >= deltas[i].delta());
  const auto j = gain_loss_json(deltas, 2);
  CHECK(j["gains"].size() <= 2);
  CHECK(j["losses"].size() <= 2);
  for (const auto& g : j["gains"]) CHECK(g["delta"].get<double>() > 0);
  for (const auto& l : j["losses"]) CHECK(l["delta"].get<double>() < 0);
}

TEST_CASE("intra-class code distance") {
  auto m = SaeModel::zeros(2, 1, 1);
  m.enc(0, 0) = 1;
  m.enc(1, 1) = 1;
  EmbeddingBundle b;
  b.dim = 2;
  b.rows = 4;
  b.data = {1, 0, 3, 0, 0, 2, 0, 2};
  b.ids = {"a", "b", "c", "d"};
  b.labels = std::vector<std::uint32_t>{0, 0, 1, 1};
  b.num_classes = 2;
  // class 0 codes (1,0),(3,0) around (2,0): distance 1 each; class 1 identical: 0
  CHECK(mean_intra_class_code_distance(m, b) == doctest::Approx(0.5));
}
