#include <doctest.h>

#include <set>

#include "multiformer/heads.hpp"
#include "test_util.hpp"

using namespace multiformer;

namespace {

torch::Tensor confident_logits(const std::vector<int>& classes, int num_classes, double margin = 12.0) {
  auto l = torch::zeros({static_cast<int64_t>(classes.size()), num_classes + 1}, torch::kFloat64);
  for (size_t q = 0; q < classes.size(); ++q) l[static_cast<int64_t>(q)][classes[q]] = margin;
  return l;
}

}  // namespace

TEST_SUITE("heads") {
  TEST_CASE("zero kernels give masks of 0.5") {
    auto m = predict_masks(torch::zeros({1, 3, 8}), torch::randn({1, 8, 4, 4}));
    CHECK(m.sizes() == torch::IntArrayRef({1, 3, 4, 4}));
    CHECK(torch::equal(m, torch::full_like(m, 0.5)));
  }

  TEST_CASE("one-hot kernel selects a feature channel") {
    auto f = torch::randn({1, 8, 4, 4});
    auto k = torch::zeros({1, 1, 8});
    k[0][0][5] = 1.0;
    CHECK(torch::allclose(predict_masks(k, f)[0][0], torch::sigmoid(f[0][5])));
  }

  TEST_CASE("baseline depth: zero kernels give the range midpoint; bounded; degenerate range") {
    auto f = torch::randn({1, 8, 4, 4});
    auto d = predict_depth_baseline(torch::zeros({1, 2, 8}), f, 0.0, 80.0);
    CHECK(torch::allclose(d, torch::full_like(d, 40.0)));
    auto r = predict_depth_baseline(torch::randn({1, 6, 8}) * 10, f, 1.0, 80.0);
    CHECK(r.min().item<double>() >= 1.0);
    CHECK(r.max().item<double>() <= 80.0);
    auto deg = predict_depth_baseline(torch::randn({1, 2, 8}, torch::kFloat64), f.to(torch::kFloat64), 1.0, 1.0001);
    CHECK((deg - 1.00005).abs().max().item<double>() <= 5e-5 + 1e-12);
  }

  TEST_CASE("scale/shift: zero output layer gives r=1, mu=0; r is positive; gradient flows") {
    torch::manual_seed(0);
    ScaleShiftEstimator est(8, 0.0);
    auto f = torch::randn({3, 8, 6, 6}, torch::requires_grad());
    auto ss = est(f);
    CHECK(ss.r.gt(0).all().item<bool>());
    ss.r.sum().backward();
    CHECK(f.grad().abs().sum().item<double>() > 0);
    {
      torch::NoGradGuard ng;
      est->output()->weight.zero_();
      est->output()->bias.zero_();
    }
    auto z = est(f);
    CHECK(torch::allclose(z.r, torch::ones({3})));
    CHECK(torch::allclose(z.mu, torch::zeros({3})));
  }

  TEST_CASE("log depth: collapsed normalization, constant map, linear in r") {
    auto f = torch::randn({1, 8, 5, 5}, torch::kFloat64);
    auto k = torch::randn({1, 3, 8}, torch::kFloat64);
    const auto zeros = torch::zeros({1, 3}, torch::kFloat64);
    SceneScaleShift unit{torch::ones({1}, torch::kFloat64), torch::zeros({1}, torch::kFloat64)};
    auto d = predict_depth_log(k, f, zeros, zeros, unit);
    CHECK(torch::allclose(d.metric, torch::ones_like(d.metric)));

    auto beta = torch::tensor({{0.3, -0.2, 0.7}}, torch::kFloat64);
    auto gamma = torch::tensor({{1.5, 2.0, -1.0}}, torch::kFloat64);
    auto constant_f = torch::ones({1, 8, 5, 5}, torch::kFloat64);
    auto c = predict_depth_log(k, constant_f, gamma, beta, unit);
    for (int q = 0; q < 3; ++q) {
      CHECK(torch::allclose(c.normed[0][q], torch::full({5, 5}, beta[0][q].item<double>(), torch::kFloat64)));
      CHECK(torch::isfinite(c.metric).all().item<bool>());
    }

    SceneScaleShift s1{torch::full({1}, 2.5, torch::kFloat64), torch::full({1}, 0.4, torch::kFloat64)};
    SceneScaleShift s2{torch::full({1}, 5.0, torch::kFloat64), torch::full({1}, 0.4, torch::kFloat64)};
    auto a = predict_depth_log(k, f, gamma, beta, s1).metric;
    auto b = predict_depth_log(k, f, gamma, beta, s2).metric;
    CHECK(torch::equal(b, 2.0 * a));
    CHECK(a.gt(0).all().item<bool>());  // mu >= 0
  }

  TEST_CASE("copy-paste: single segment and disjoint segments") {
    auto depth = torch::rand({2, 4, 4}) * 50 + 1;
    PanopticMap pan;
    pan.labels = LabelMap(4, 4, panoptic_id(3, 0));
    pan.segments.push_back({panoptic_id(3, 0), 3, 1, 0.9, false});
    auto logits = confident_logits({3, 3}, 5);
    CHECK(to_tensor(merge_depth_copy_paste(depth, pan, logits)).equal(depth[1]));

    PanopticMap two;
    two.labels = LabelMap(4, 4, panoptic_id(3, 0));
    for (int y = 0; y < 4; ++y)
      for (int x = 2; x < 4; ++x) two.labels.at(y, x) = panoptic_id(4, 1);
    two.segments.push_back({panoptic_id(3, 0), 3, 0, 0.9, false});
    two.segments.push_back({panoptic_id(4, 1), 4, 1, 0.9, true});
    auto merged = merge_depth_copy_paste(depth, two, confident_logits({3, 4}, 5));
    auto acc = depth.accessor<float, 3>();
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) CHECK(merged.at(y, x) == acc[x < 2 ? 0 : 1][y][x]);
  }

  TEST_CASE("copy-paste fills void from the highest-scoring query") {
    auto depth = torch::rand({3, 4, 4}) + 1;
    PanopticMap pan;
    pan.labels = LabelMap(4, 4, kVoidLabel);
    auto logits = confident_logits({0, 1, 2}, 5, 0.0);
    logits[2][2] = 9.0;
    CHECK(to_tensor(merge_depth_copy_paste(depth, pan, logits)).equal(depth[2]));
  }

  TEST_CASE("dynamic merge: singleton, symmetric pair, normalization, convexity") {
    torch::manual_seed(1);
    auto depth = torch::rand({2, 6, 6}, torch::kFloat64) * 30 + 1;
    auto masks = torch::rand({2, 6, 6}, torch::kFloat64);
    auto logits = confident_logits({1, 2}, 5);
    logits[1] = -20.0;  // second query predicts no-object: score ~0, discarded
    logits[1][5] = 20.0;
    auto w1 = dynamic_merge_weights(masks, logits, 0.1, 0.05);
    CHECK(torch::allclose(w1[0], torch::ones({6, 6}, torch::kFloat64)));
    CHECK(torch::allclose(to_tensor(merge_depth_dynamic(depth, masks, logits, 0.1, 0.05)),
                          depth[0].to(torch::kFloat32)));

    auto same_masks = masks[0].unsqueeze(0).repeat({2, 1, 1});
    auto pair_logits = confident_logits({1, 1}, 5);
    auto w2 = dynamic_merge_weights(same_masks, pair_logits, 0.1, 0.05);
    CHECK(torch::allclose(w2, torch::full_like(w2, 0.5)));
    CHECK(torch::allclose(to_tensor(merge_depth_dynamic(depth, same_masks, pair_logits, 0.1, 0.05)),
                          depth.mean(0).to(torch::kFloat32)));

    auto many_depth = torch::rand({7, 9, 9}, torch::kFloat64) * 40 + 1;
    auto many_masks = torch::rand({7, 9, 9}, torch::kFloat64);
    auto many_logits = torch::randn({7, 6}, torch::kFloat64) * 3;
    auto w = dynamic_merge_weights(many_masks, many_logits, 0.1, 0.05);
    CHECK((w.sum(0) - 1).abs().max().item<double>() <= 1e-6);
    CHECK(w.min().item<double>() >= 0.0);
    auto out = to_tensor(merge_depth_dynamic(many_depth, many_masks, many_logits, 0.1, 0.05)).to(torch::kFloat64);
    CHECK((out - std::get<0>(many_depth.min(0))).min().item<double>() >= -1e-4);
    CHECK((std::get<0>(many_depth.max(0)) - out).min().item<double>() >= -1e-4);
  }

  TEST_CASE("dynamic merge keeps every query when all are below the floor") {
    auto masks = torch::rand({3, 4, 4}, torch::kFloat64);
    auto logits = torch::zeros({3, 6}, torch::kFloat64);
    logits.select(1, 5).fill_(30.0);  // everything is no-object
    auto w = dynamic_merge_weights(masks, logits, 0.1, 0.05);
    CHECK(torch::isfinite(w).all().item<bool>());
    CHECK((w.sum(0) - 1).abs().max().item<double>() <= 1e-6);
  }

  TEST_CASE("temperature limits") {
    auto depth = torch::rand({4, 5, 5}, torch::kFloat64) * 10 + 1;
    // distinct values so the argmax has a clear margin
    auto masks = torch::randperm(100, torch::kFloat64).reshape({4, 5, 5}) / 100.0;
    auto logits = confident_logits({0, 1, 2, 3}, 5);
    auto hot = to_tensor(merge_depth_dynamic(depth, masks, logits, 1e6, 0.05)).to(torch::kFloat64);
    CHECK(torch::allclose(hot, depth.mean(0), 1e-4, 1e-4));
    auto cold = to_tensor(merge_depth_dynamic(depth, masks, logits, 1e-5, 0.05)).to(torch::kFloat64);
    auto sel = depth.gather(0, masks.argmax(0).unsqueeze(0))[0];
    CHECK(torch::allclose(cold, sel, 1e-5, 1e-4));
  }

  TEST_CASE("merge_panoptic: single confident query covers exactly its region") {
    auto masks = torch::full({2, 6, 6}, 0.01);
    masks[0].slice(0, 1, 4).slice(1, 2, 5).fill_(0.95);
    auto logits = confident_logits({3, 3}, 5);
    logits[1] = 0.0;  // uniform, score 1/6 < 0.8
    const std::vector<bool> things = testutil::odd_things(5);
    auto pan = merge_panoptic(masks, logits, things, PanopticConfig{});
    REQUIRE(pan.segments.size() == 1);
    CHECK(pan.segments[0].class_id == 3);
    CHECK(pan.segments[0].is_thing);
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) {
        const bool in = y >= 1 && y < 4 && x >= 2 && x < 5;
        CHECK(pan.labels.at(y, x) == (in ? panoptic_id(3, 1) : kVoidLabel));
      }
    CHECK(pan.owner.at(2, 3) == 0);
  }

  TEST_CASE("merge_panoptic: identical stuff queries merge into one segment") {
    auto masks = torch::full({2, 4, 4}, 0.9);
    auto logits = confident_logits({2, 2}, 5);
    auto pan = merge_panoptic(masks, logits, testutil::odd_things(5), PanopticConfig{});
    REQUIRE(pan.segments.size() == 1);
    for (int32_t v : pan.labels.data) CHECK(v == panoptic_id(2, 0));
  }

  TEST_CASE("merge_panoptic: uniform logits are dropped") {
    auto masks = torch::full({1, 4, 4}, 0.9);
    auto pan = merge_panoptic(masks, torch::zeros({1, 6}), testutil::odd_things(5), PanopticConfig{});
    CHECK(pan.segments.empty());
    for (int32_t v : pan.labels.data) CHECK(v == kVoidLabel);
  }

  TEST_CASE("merge_panoptic partitions pixels and is deterministic") {
    torch::manual_seed(2);
    for (int rep = 0; rep < 5; ++rep) {
      auto masks = torch::rand({6, 8, 8});
      auto logits = torch::randn({6, 6}) * 6;
      auto a = merge_panoptic(masks, logits, testutil::odd_things(5), PanopticConfig{});
      auto b = merge_panoptic(masks, logits, testutil::odd_things(5), PanopticConfig{});
      CHECK(a.labels == b.labels);
      std::set<int32_t> ids;
      for (const auto& s : a.segments) CHECK(ids.insert(s.segment_id).second);
      for (int32_t v : a.labels.data) CHECK((v == kVoidLabel || ids.count(v) == 1));
    }
  }

  TEST_CASE("query score excludes no-object") {
    auto l = torch::tensor({{0.0, 1.0, 5.0}});
    auto p = torch::softmax(l, -1);
    CHECK(query_scores(l)[0].item<float>() == doctest::Approx(p[0][1].item<float>()));
  }
}
