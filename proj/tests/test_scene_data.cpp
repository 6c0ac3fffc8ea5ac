#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

#include "multiformer/errors.hpp"
#include "multiformer/evaluation.hpp"
#include "multiformer/experiment.hpp"
#include "multiformer/inference.hpp"
#include "multiformer/png_io.hpp"
#include "multiformer/scene_data.hpp"
#include "test_util.hpp"

using namespace multiformer;
namespace fs = std::filesystem;

namespace {

SceneLayout plain_layout() {
  SceneLayout l;
  l.noise = 0.0;
  return l;
}

ObjectSpec circle(int cls, int inst, double cx, double cy, double r, double depth) {
  ObjectSpec o;
  o.class_id = cls;
  o.instance_id = inst;
  o.cx = cx;
  o.cy = cy;
  o.half_w = o.half_h = r;
  o.depth = depth;
  return o;
}

}  // namespace

TEST_SUITE("scene_data") {
  TEST_CASE("same seed gives bit-identical output") {
    SynthConfig cfg;
    cfg.seed = 7;
    cfg.num_sequences = 2;
    const auto a = generate_synthetic(cfg);
    const auto b = generate_synthetic(cfg);
    REQUIRE(a.size() == b.size());
    for (size_t s = 0; s < a.size(); ++s)
      for (size_t t = 0; t < a[s].samples.size(); ++t) {
        CHECK(torch::equal(a[s].samples[t].image, b[s].samples[t].image));
        CHECK(a[s].samples[t].panoptic == b[s].samples[t].panoptic);
        CHECK(a[s].samples[t].depth == b[s].samples[t].depth);
      }
  }

  TEST_CASE("static single object keeps its labels and id") {
    SceneLayout l = plain_layout();
    l.objects.push_back(circle(12, 3, 30, 40, 9, 8.0));
    const auto f0 = render_frame(l, 0, "s");
    for (int t = 1; t < 6; ++t) CHECK(render_frame(l, t, "s").panoptic == f0.panoptic);
    std::set<int32_t> thing_ids;
    for (int32_t v : f0.panoptic.data)
      if (v != kVoidLabel && instance_of(v) > 0) thing_ids.insert(v);
    CHECK(thing_ids == std::set<int32_t>{panoptic_id(12, 3)});
  }

  TEST_CASE("nearer object occludes the farther one") {
    SceneLayout l = plain_layout();
    l.objects.push_back(circle(11, 1, 30, 40, 10, 10.0));
    l.objects.push_back(circle(13, 2, 36, 40, 10, 5.0));
    const auto f = render_frame(l, 0, "s");
    // (33, 40) is inside both circles
    CHECK(f.panoptic.at(40, 33) == panoptic_id(13, 2));
    CHECK(f.depth.at(40, 33) == doctest::Approx(5.0).epsilon(1e-2));
    CHECK(f.panoptic.at(40, 22) == panoptic_id(11, 1));
  }

  TEST_CASE("thing pixels carry their object's depth; depth is non-negative") {
    SynthConfig cfg;
    cfg.num_sequences = 3;
    for (const auto& seq : generate_synthetic(cfg)) {
      std::map<int, double> obj_depth;
      for (const auto& o : seq.layout.objects) obj_depth[o.instance_id] = o.depth;
      for (const auto& s : seq.samples)
        for (size_t i = 0; i < s.depth.data.size(); ++i) {
          CHECK(s.depth.data[i] >= 0.0f);
          const int32_t v = s.panoptic.data[i];
          if (v != kVoidLabel && instance_of(v) > 0)
            CHECK(std::abs(s.depth.data[i] - obj_depth.at(instance_of(v))) <= 1.0 / 256.0);
        }
    }
  }

  TEST_CASE("invalid generator settings are configuration errors") {
    SynthConfig cfg;
    cfg.height = 32;
    CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
    cfg = SynthConfig{};
    cfg.min_objects = 0;
    CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
    cfg = SynthConfig{};
    cfg.min_objects = 3;
    cfg.max_objects = 2;
    CHECK_THROWS_AS(generate_synthetic(cfg), ConfigError);
  }

  TEST_CASE("write then load returns the same samples in order") {
    const auto dir = testutil::temp_dir("roundtrip");
    SynthConfig cfg;
    cfg.num_sequences = 1;
    const auto seqs = generate_synthetic(cfg);
    write_sequence(dir, seqs[0].manifest, seqs[0].samples);
    const auto manifests = discover_sequences(dir);
    REQUIRE(manifests.size() == 1);
    const auto loaded = load_sequence(manifests[0]);
    REQUIRE(loaded.size() == 6);
    for (size_t t = 0; t < loaded.size(); ++t) {
      CHECK(loaded[t].frame_index == static_cast<int>(t));
      CHECK(loaded[t].panoptic == seqs[0].samples[t].panoptic);
      CHECK(loaded[t].depth == seqs[0].samples[t].depth);
      CHECK(torch::equal(loaded[t].image, seqs[0].samples[t].image));
    }
    CHECK((manifests[0].class_table == seqs[0].manifest.class_table));
  }

  TEST_CASE("rewriting loaded samples reproduces the files bit-exactly") {
    const auto a = testutil::temp_dir("rewrite_a"), b = testutil::temp_dir("rewrite_b");
    SynthConfig cfg;
    cfg.num_sequences = 1;
    const auto seqs = generate_synthetic(cfg);
    write_sequence(a, seqs[0].manifest, seqs[0].samples);
    const auto m = discover_sequences(a).at(0);
    write_sequence(b, m, load_sequence(m));
    for (const auto& e : fs::recursive_directory_iterator(a)) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), a);
      CHECK_MESSAGE(testutil::read_bytes(e.path()) == testutil::read_bytes(b / rel), rel.string());
    }
  }

  TEST_CASE("stored depth is divided by depth_scale") {
    const auto dir = testutil::temp_dir("depth_scale");
    SynthConfig cfg;
    cfg.num_sequences = 1;
    cfg.frames_per_sequence = 1;
    const auto seqs = generate_synthetic(cfg);
    write_sequence(dir, seqs[0].manifest, seqs[0].samples);
    const auto m = discover_sequences(dir).at(0);
    std::vector<uint16_t> dep(64 * 64, 12800);
    png::write_gray16((dir / m.sequence_id / "depth" / (m.frames[0] + ".png")).string(), 64, 64, dep);
    const auto s = load_frame(m, 0);
    CHECK(s.depth.at(10, 10) == 50.0f);
  }

  TEST_CASE("depth file of the wrong resolution names the path") {
    const auto dir = testutil::temp_dir("bad_depth");
    SynthConfig cfg;
    cfg.num_sequences = 1;
    cfg.frames_per_sequence = 2;
    const auto seqs = generate_synthetic(cfg);
    write_sequence(dir, seqs[0].manifest, seqs[0].samples);
    const auto m = discover_sequences(dir).at(0);
    const auto bad = dir / m.sequence_id / "depth" / (m.frames[1] + ".png");
    png::write_gray16(bad.string(), 32, 32, std::vector<uint16_t>(32 * 32, 256));
    try {
      load_frame(m, 1);
      FAIL("expected LoadError");
    } catch (const LoadError& e) {
      CHECK(std::string(e.what()).find(bad.string()) != std::string::npos);
    }
  }

  TEST_CASE("missing frame file is a load error") {
    const auto dir = testutil::temp_dir("missing");
    SynthConfig cfg;
    cfg.num_sequences = 1;
    cfg.frames_per_sequence = 2;
    const auto seqs = generate_synthetic(cfg);
    write_sequence(dir, seqs[0].manifest, seqs[0].samples);
    const auto m = discover_sequences(dir).at(0);
    fs::remove(dir / m.sequence_id / "image" / (m.frames[0] + ".png"));
    CHECK_THROWS_AS(load_frame(m, 0), LoadError);
  }

  TEST_CASE("default class table has 8 things and 11 stuff") {
    const auto t = make_class_table();
    REQUIRE(t.size() == 19);
    int things = 0;
    for (const auto& c : t) things += c.is_thing;
    CHECK(things == 8);
  }

  TEST_CASE("GT scored against itself is perfect") {
    SynthConfig cfg;
    cfg.num_sequences = 3;
    const Dataset data = dataset_from_synthetic(generate_synthetic(cfg));
    std::vector<std::vector<FramePrediction>> preds;
    for (const auto& seq : data.sequences) preds.push_back(gt_as_prediction(seq));
    const auto rep = evaluate(preds, data.sequences, data.classes, EvalConfig{});
    CHECK(rep.pq.all == 100.0);
    for (const auto& [k, v] : rep.vpq) CHECK(v.all == 100.0);
    for (const auto& c : rep.dvpq) CHECK(c.score.all == 100.0);
    REQUIRE(rep.depth.has_value());
    CHECK(rep.depth->abs_rel == 0.0);
    CHECK(rep.depth->rmse == 0.0);
  }
}
