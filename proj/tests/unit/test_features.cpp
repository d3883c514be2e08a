#include "fixtures.hpp"

#include "vitscope/features/annotations.hpp"
#include "vitscope/features/cards.hpp"
#include "vitscope/features/positions.hpp"
#include "vitscope/features/tuning.hpp"

#include <doctest.h>

#include <cmath>

using namespace vitscope;
using namespace vitscope::features;

namespace {

// Stats with the given per-position frequency and mean for each feature.
sae::FeatureStats position_stats(const std::vector<std::vector<double>>& freq,
                                 const std::vector<std::vector<double>>& mean) {
  sae::FeatureStats s;
  s.num_tokens = static_cast<int>(freq.front().size()) + 1;
  s.images = 10;
  for (std::size_t i = 0; i < freq.size(); ++i) {
    sae::FeatureRecord r;
    r.position_frequency = freq[i];
    r.position_mean = mean[i];
    s.features.push_back(r);
  }
  return s;
}

}  // namespace

TEST_CASE("position mutual information") {
  const double expect = 0.25 * (std::log(4.0) + 3.0 * std::log(4.0 / 3.0));
  CHECK(std::abs(expect - 0.562) < 5e-4);
  CHECK(std::abs(position_mutual_information({0, 1, 0, 0}) - expect) <= 1e-6);
  CHECK(position_mutual_information({0.3, 0.3, 0.3, 0.3}) == doctest::Approx(0.0));
  CHECK(position_mutual_information({0, 0, 0, 0}) == 0.0);
  CHECK(position_mutual_information({1, 1, 1, 1}) == 0.0);
}

TEST_CASE("position detectors are thresholded and sorted") {
  const auto s = position_stats({{0.3, 0.3, 0.3, 0.3}, {0, 1, 0, 0}, {1, 0, 0, 0}},
                                {{1, 1, 1, 1}, {0, 1, 0, 0}, {1, 0, 0, 0}});
  const auto d = position_detectors(s);
  REQUIRE(d.size() == 2);
  CHECK(d[0].index == 1);  // tie goes to the lower index
  CHECK(d[1].index == 2);
}

TEST_CASE("permutation null") {
  Rng rng(3);
  const int images = 400, positions = 16;
  std::vector<std::uint8_t> active(images * positions);
  for (auto& a : active) a = rng.uniform() < 0.2;
  const double null_mi = permutation_null_mi(active, images, positions, 20, 1);
  CHECK(null_mi < 0.01);
  CHECK(permutation_null_mi(active, images, positions, 20, 1) == null_mi);
  CHECK_THROWS_AS(permutation_null_mi(active, images, positions + 1, 2, 1), InputError);
}

TEST_CASE("coverage maps") {
  SUBCASE("one detector everywhere") {
    const auto s = position_stats({{1, 1, 1, 1}}, {{1, 1, 1, 1}});
    const auto c = coverage_map({{0, 0, 0.1}}, s);
    CHECK(c.side == 2);
    for (double v : c.grid) CHECK(v == 1.0);
  }
  SUBCASE("left and right halves") {
    const auto s = position_stats({{1, 0, 1, 0}, {0, 1, 0, 1}}, {{1, 0, 1, 0}, {0, 1, 0, 1}});
    const auto c = coverage_map({{0, 0, 0.1}, {0, 1, 0.1}}, s);
    for (double v : c.grid) CHECK(v == 1.0);
    CHECK(c.min_value == 1.0);
  }
  SUBCASE("no detectors") {
    const auto s = position_stats({{1, 1, 1, 1}}, {{1, 1, 1, 1}});
    CHECK_THROWS_AS(coverage_map({}, s), InputError);
  }
}

TEST_CASE("tuning curves") {
  const auto vit = fixtures::tiny_vit(3);
  auto s = fixtures::random_sae(1, 8, 6, 2, 5);
  s.w_enc.row(4).setZero();
  CurveProbeConfig probe;
  probe.image_size = 16;
  probe.cell = 8;
  probe.radius = 2.5;
  probe.phases = 2;
  const auto angles = angle_grid(12);
  CHECK(angles.size() == 12);
  CHECK(angles[3] == doctest::Approx(90.0));
  const auto curves = radial_tuning_curves(vit, s, probe, angles);
  REQUIRE(curves.size() == 6);
  for (double v : curves[4].activation) CHECK(v == 0.0);
  const auto again = radial_tuning_curves(vit, s, probe, angles);
  for (int i = 0; i < 6; ++i) CHECK(again[i].activation == curves[i].activation);
  CHECK(render_curve_image(probe, 30.0, 1) == render_curve_image(probe, 30.0, 1));
}

TEST_CASE("angular coverage and peaks") {
  TuningCurve a, b;
  a.angles = b.angles = {0, 90, 180, 270};
  a.activation = {4, 1, 0, 0};
  b.activation = {0, 0, 2, 0.5};
  CHECK(a.peak() == 4.0);
  CHECK(a.peak_bin() == 0);
  CHECK(a.median() == doctest::Approx(0.5));
  CHECK(angular_coverage({a}) == doctest::Approx(0.25));
  CHECK(angular_coverage({a, b}) == doctest::Approx(0.5));
}

TEST_CASE("annotation store") {
  const auto dir = fixtures::temp_dir("annotations");
  AnnotationStore store(dir / "a.jsonl", [](int layer, int index) { return layer < 3 && index < 10; });
  AnnotationRecord r;
  r.layer = 1;
  r.index = 4;
  r.category = "Shape";
  r.score = 1.0;
  r.annotator = "ann1";
  r.note = "circles";
  const long id = store.record(r);
  CHECK(id >= 0);

  AnnotationStore reopened(dir / "a.jsonl");
  const auto all = reopened.all();
  REQUIRE(all.size() == 1);
  CHECK(all[0].id == id);
  CHECK(all[0].category == "Shape");
  CHECK(all[0].note == "circles");
  CHECK_FALSE(all[0].timestamp.empty());

  auto r2 = r;
  r2.annotator = "ann2";
  r2.score = 0.0;
  store.record(r2);
  auto r3 = r;
  r3.score = 0.5;
  store.record(r3);
  const auto latest = store.latest(1, 4);
  REQUIRE(latest.size() == 2);
  CHECK(latest[0].annotator == "ann1");
  CHECK(latest[0].score == 0.5);
  CHECK(latest[1].annotator == "ann2");
  CHECK(store.all().size() == 3);
  CHECK(store.mean_score(1).value() == doctest::Approx(0.25));
  CHECK_FALSE(store.mean_score(2).has_value());

  auto bad = r;
  bad.category = "Banana";
  CHECK_THROWS_AS(store.record(bad), InputError);
  bad = r;
  bad.score = 0.7;
  CHECK_THROWS_AS(store.record(bad), InputError);
  bad = r;
  bad.index = 99;
  CHECK_THROWS_AS(store.record(bad), NotFoundError);
  CHECK_THROWS_AS(annotation_from_json(Json{{"layer", 1}}), InputError);
}

TEST_CASE("feature card of a feature firing on one token") {
  const auto vit = fixtures::tiny_vit(8);
  backbone::Dataset ds;
  ds.samples.push_back({fixtures::random_image(16, 5), 1, false});
  const auto rec = backbone::run_forward(vit, ds.samples[0].image, {}, false);
  const int layer = 1, target = 2;
  auto s = fixtures::random_sae(layer, 8, 3, 1, 2);
  // Feature 0 reads +1 at the target token and -1 elsewhere; the others never fire.
  const Matrix y = (sae::standardize(s, rec.read_points[layer])).rowwise() - s.b_pre;
  Vector rhs = -Vector::Ones(y.rows());
  rhs(target) = 1.0;
  s.w_enc.setZero();
  s.w_enc.row(0) = y.completeOrthogonalDecomposition().solve(rhs).transpose();

  sae::FeatureStatsAccumulator acc(layer, 3, vit.num_tokens(), 8, 4);
  const auto cd = sae::encode_decode(s, rec.read_points[layer]);
  acc.add_image(0, cd.codes, cd.error, rec.read_points[layer], 1);
  const auto stats = acc.finalize();

  const auto cards = build_feature_cards(vit, s, stats, ds, {0, 1});
  REQUIRE(cards.size() == 2);
  const auto& card = cards[0];
  REQUIRE(card.images.size() == 1);
  CHECK(card.images[0].token == target);
  CHECK(card.patches.size() == 1);
  for (std::size_t p = 0; p < card.images[0].heatmap.size(); ++p) {
    if (static_cast<int>(p) == target - 1) {
      CHECK(card.images[0].heatmap[p] == doctest::Approx(1.0));
    } else {
      CHECK(card.images[0].heatmap[p] == 0.0);
    }
  }
  CHECK(cards[1].dead);
  CHECK(cards[1].images.empty());

  const auto again = build_feature_cards(vit, s, stats, ds, {0, 1});
  CHECK(to_json(again[0]) == to_json(card));
  CHECK(to_json(feature_card_from_json(to_json(card))) == to_json(card));

  const auto dir = fixtures::temp_dir("cards");
  const Json meta = export_feature_card(card, ds, 8, dir);
  CHECK(std::filesystem::exists(dir / (card_stem(layer, 0) + ".json")));
  CHECK(meta.dump() == export_feature_card(card, ds, 8, dir).dump());
}

TEST_CASE("logit lens is the centred head response to the decoder direction") {
  const auto vit = fixtures::tiny_vit(9);
  const auto s = fixtures::random_sae(2, 8, 5, 2, 3);
  const auto lens = logit_lens(vit, s, 3);
  Matrix x = Matrix::Zero(vit.num_tokens(), 8);
  RowVector zero, dir;
  vit.forward_head(x, zero);
  x.row(0) = s.w_dec.col(3).transpose().cwiseProduct(s.in_std);
  vit.forward_head(x, dir);
  RowVector diff = dir - zero;
  diff.array() -= diff.mean();
  REQUIRE(lens.size() == 3);
  for (std::size_t i = 0; i < lens.size(); ++i) {
    CHECK(lens[i].second == doctest::Approx(diff(lens[i].first)));
    if (i > 0) CHECK(lens[i - 1].second >= lens[i].second);
  }
}
