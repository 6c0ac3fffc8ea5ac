#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "brute_force.hpp"
#include "multiformer/assignment.hpp"
#include "multiformer/tracker.hpp"
#include "test_util.hpp"

using namespace multiformer;

namespace {

double total_sim(const torch::Tensor& sim, const std::vector<std::pair<int, int>>& m) {
  auto a = sim.to(torch::kFloat64).contiguous();
  double s = 0;
  for (auto [i, j] : m) s += a[i][j].item<double>();
  return s;
}

PanopticMap pan_with(const std::vector<std::pair<int, bool>>& query_and_thing) {
  PanopticMap pan;
  pan.labels = LabelMap(4, 4, kVoidLabel);
  int inst = 1;
  for (size_t k = 0; k < query_and_thing.size(); ++k) {
    auto [q, thing] = query_and_thing[k];
    const int cls = thing ? 11 : 2;
    const int32_t id = panoptic_id(cls, thing ? inst++ : 0);
    pan.segments.push_back({id, cls, q, 0.9, thing});
    pan.labels.data[k] = id;
  }
  return pan;
}

}  // namespace

TEST_SUITE("tracker") {
  TEST_CASE("select_detected keeps thing segments in order") {
    auto q = torch::randn({6, 8});
    auto none = select_detected(q, pan_with({{0, false}, {1, false}}));
    CHECK(none.queries.size(0) == 0);
    auto d = select_detected(q, pan_with({{4, true}, {0, false}, {2, true}, {5, true}}));
    REQUIRE(d.queries.size(0) == 3);
    CHECK(torch::equal(d.queries[0], q[4]));
    CHECK(torch::equal(d.queries[1], q[2]));
    CHECK(torch::equal(d.queries[2], q[5]));
    CHECK(d.segment_indices == std::vector<size_t>{0, 2, 3});
  }

  TEST_CASE("cosine similarity examples") {
    auto a = torch::tensor({{1.0, 2.0, 0.0}, {0.0, 0.0, 3.0}});
    auto b = torch::tensor({{1.0, 2.0, 0.0}, {-2.0, 1.0, 0.0}});
    auto s = similarity_matrix(a, b);
    CHECK(s[0][0].item<double>() == doctest::Approx(1.0));
    CHECK(s[0][1].item<double>() == doctest::Approx(0.0));
    CHECK(s[1][0].item<double>() == doctest::Approx(0.0));
    auto scaled = a.clone();
    scaled[0] *= 5;
    CHECK(torch::allclose(similarity_matrix(scaled, b)[0], s[0]));
    CHECK(torch::allclose(similarity_matrix(b, a), s.t()));
    auto z = similarity_matrix(torch::zeros({1, 3}), b);
    CHECK(torch::isfinite(z).all().item<bool>());
  }

  TEST_CASE("assign realizes identity and permutations") {
    auto id = assign(torch::eye(4, torch::kFloat64), 0.0);
    CHECK(id == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}, {2, 2}, {3, 3}});
    auto perm = torch::zeros({4, 4}, torch::kFloat64);
    const int pi[] = {2, 0, 3, 1};
    for (int i = 0; i < 4; ++i) perm[i][pi[i]] = 1.0;
    auto m = assign(perm, 0.0);
    REQUIRE(m.size() == 4);
    for (auto [i, j] : m) CHECK(j == pi[i]);
  }

  TEST_CASE("assign rejects matches at or below s_min") {
    auto sim = torch::tensor({{0.9, -0.5}, {-0.5, -0.2}}, torch::kFloat64);
    auto m = assign(sim, 0.0);
    CHECK(m == std::vector<std::pair<int, int>>{{0, 0}});
  }

  TEST_CASE("assign is optimal against exhaustive search on small sizes") {
    for (int seed = 0; seed < 40; ++seed) {
      std::mt19937_64 rng(static_cast<uint64_t>(seed));
      std::uniform_int_distribution<int> size(1, 6);
      const int r = size(rng), c = size(rng);
      torch::manual_seed(seed);
      auto sim = torch::rand({r, c}, torch::kFloat64) * 2 - 1;
      const auto m = assign(sim, -2.0);
      CHECK(m.size() == static_cast<size_t>(std::min(r, c)));
      CHECK(total_sim(sim, m) == doctest::Approx(oracle::best_injection(oracle::to_vec(sim), r, c, true)).epsilon(1e-12));
    }
  }

  TEST_CASE("first frame gets ids 1..k; repeated embeddings keep their ids") {
    TrackState st;
    auto q = torch::randn({3, 8});
    CHECK(propagate_ids(st, q, {}) == std::vector<int>{1, 2, 3});
    auto m = assign(similarity_matrix(st.prev_queries, q), 0.0);
    CHECK(propagate_ids(st, q, m) == std::vector<int>{1, 2, 3});
  }

  TEST_CASE("one extra detection gets one new id") {
    torch::manual_seed(3);
    TrackState st;
    auto q = torch::randn({2, 8});
    propagate_ids(st, q, {});
    // new frame: reordered old detections plus a new one orthogonal-ish to both
    auto extra = torch::randn({1, 8});
    auto now = torch::cat({q[1].unsqueeze(0), extra, q[0].unsqueeze(0)});
    auto sim = similarity_matrix(st.prev_queries, now);
    sim[0][1] = -1;  // make the extra row unattractive
    sim[1][1] = -1;
    auto ids = propagate_ids(st, now, assign(sim, 0.0));
    CHECK(ids == std::vector<int>{2, 3, 1});
    CHECK(st.next_free_id == 4);
  }

  TEST_CASE("duplicate match indices are internal errors") {
    TrackState st;
    propagate_ids(st, torch::randn({2, 4}), {});
    CHECK_THROWS_AS(propagate_ids(st, torch::randn({2, 4}), {{0, 0}, {1, 0}}), std::logic_error);
    CHECK_THROWS_AS(propagate_ids(st, torch::randn({2, 4}), {{0, 0}, {0, 1}}), std::logic_error);
  }

  TEST_CASE("Tracker relabels thing segments with stable track ids") {
    Tracker tr(TrackConfig{});
    auto q = torch::randn({5, 8});
    auto p1 = pan_with({{3, true}, {1, false}, {0, true}});
    auto ids1 = tr.update(q, p1);
    CHECK(ids1 == std::vector<int>{1, 2});
    CHECK(p1.labels.data[0] == panoptic_id(11, 1));
    CHECK(p1.labels.data[1] == panoptic_id(2, 0));
    CHECK(p1.labels.data[2] == panoptic_id(11, 2));
    // next frame: same queries, detections listed in the other order
    auto p2 = pan_with({{0, true}, {3, true}});
    auto ids2 = tr.update(q, p2);
    CHECK(ids2 == std::vector<int>{2, 1});
    CHECK(p2.labels.data[0] == panoptic_id(11, 2));
    CHECK(p2.labels.data[1] == panoptic_id(11, 1));
  }

  TEST_CASE("ids are unique within a frame") {
    Tracker tr(TrackConfig{});
    torch::manual_seed(4);
    for (int t = 0; t < 6; ++t) {
      auto q = torch::randn({6, 8});
      auto pan = pan_with({{0, true}, {1, true}, {2, true}, {4, true}});
      auto ids = tr.update(q, pan);
      std::set<int> u(ids.begin(), ids.end());
      CHECK(u.size() == ids.size());
    }
  }

  TEST_CASE("solve_assignment validates input") {
    std::vector<double> c{1.0, std::nan("")};
    CHECK_THROWS_AS(solve_assignment(c, 1, 2), std::invalid_argument);
    CHECK_THROWS_AS(solve_assignment(std::vector<double>{1.0}, 1, 2), std::invalid_argument);
    auto empty = solve_assignment(std::vector<double>{}, 0, 3);
    CHECK(empty.col_to_row == std::vector<int>{-1, -1, -1});
  }
}
