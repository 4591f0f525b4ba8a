#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "json.hpp"
#include "tinylayout/eval.hpp"

using namespace tinylayout;

namespace {

const ObjectClass kRedSquare{ShapeKind::Square, Color::Red};
const ObjectClass kBlueCircle{ShapeKind::Circle, Color::Blue};

void paint(Image& im, std::size_t x0, std::size_t y0, std::size_t x1, std::size_t y1, Color c) {
  const auto rgb = color_rgb(c);
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) std::copy(rgb.begin(), rgb.end(), im.pixel(x, y));
}

Detection det(ObjectClass cls, BBox box, double score) {
  Detection d;
  d.label = cls;
  d.box = box;
  d.score = score;
  d.centroid_x = box.cx();
  d.centroid_y = box.cy();
  return d;
}

// Enumerates every score cutoff, re-matching the top-k detections from scratch.
double brute_force_ap(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<GroundTruth>>& gts,
                      const ObjectClass& cls, double thr) {
  struct Ranked {
    std::size_t image;
    Detection d;
  };
  std::vector<Ranked> all;
  std::size_t n_gt = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (const auto& d : dets[i])
      if (d.label == cls) all.push_back({i, d});
    for (const auto& g : gts[i]) n_gt += g.label == cls;
  }
  std::stable_sort(all.begin(), all.end(), [](const Ranked& a, const Ranked& b) { return a.d.score > b.d.score; });
  std::vector<double> precision, recall;
  for (std::size_t k = 1; k <= all.size(); ++k) {
    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
    std::size_t tp = 0;
    for (std::size_t r = 0; r < k; ++r) {
      const auto& [img, d] = all[r];
      double best = -1.0;
      std::size_t arg = 0;
      for (std::size_t g = 0; g < gts[img].size(); ++g) {
        if (used[img][g] || !(gts[img][g].label == cls)) continue;
        const double v = iou(d.box, gts[img][g].box);
        if (v >= thr && v > best) {
          best = v;
          arg = g;
        }
      }
      if (best >= 0.0) {
        used[img][arg] = true;
        ++tp;
      }
    }
    precision.push_back(static_cast<double>(tp) / k);
    recall.push_back(static_cast<double>(tp) / n_gt);
  }
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < precision.size(); ++k) {
    const double envelope = *std::max_element(precision.begin() + k, precision.end());
    ap += (recall[k] - prev_recall) * envelope;
    prev_recall = recall[k];
  }
  return ap;
}

BBox random_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 0.6), s(0.2, 0.4);
  const double x = u(rng), y = u(rng);
  return BBox{x, y, x + s(rng), y + s(rng)};
}

}  // namespace

TEST(Detect, UniformImageIsEmpty) { EXPECT_TRUE(detect(Image(32, 32, 128)).empty()); }

TEST(Detect, FillRatioThresholds) {
  Image im(32, 32, 120);
  paint(im, 2, 2, 12, 12, Color::Red);  // filled square
  auto d = detect(im);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].label, kRedSquare);
  EXPECT_DOUBLE_EQ(d[0].score, 1.0);
  EXPECT_EQ(d[0].area, 100u);
  EXPECT_EQ(d[0].box, (BBox{2 / 32.0, 2 / 32.0, 12 / 32.0, 12 / 32.0}));

  Image small(32, 32, 120);
  paint(small, 5, 5, 8, 8, Color::Green);  // 9 px < 12
  EXPECT_TRUE(detect(small).empty());

  Image ring(32, 32, 120);  // 10x10 outline: fill 0.36 -> triangle
  paint(ring, 0, 0, 10, 1, Color::Blue);
  paint(ring, 0, 9, 10, 10, Color::Blue);
  paint(ring, 0, 1, 1, 9, Color::Blue);
  paint(ring, 9, 1, 10, 9, Color::Blue);
  d = detect(ring);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].label.shape, ShapeKind::Triangle);

  Image staircase(32, 32, 120);  // fill 0.19 -> discarded
  for (std::size_t i = 0; i < 10; ++i) paint(staircase, i, i, i + 2, i + 1, Color::Yellow);
  EXPECT_TRUE(detect(staircase).empty());
}

TEST(Detect, RenderedShapesMatchBoxes) {
  for (ShapeKind s : kShapes) {
    SceneSpec spec{{{{s, Color::Yellow}, BBox{0.25, 0.25, 0.75, 0.75}}}};
    auto d = detect(render_scene(spec));
    ASSERT_EQ(d.size(), 1u);
    EXPECT_EQ(d[0].label.shape, s);
    EXPECT_GE(iou(d[0].box, spec.objects[0].box), 0.9);
  }
}

TEST(IoU, WorkedExamples) {
  const BBox a{0.1, 0.2, 0.5, 0.6};
  EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou(a, BBox{0.6, 0.6, 0.9, 0.9}), 0.0);
  EXPECT_DOUBLE_EQ(iou(BBox{0, 0, 1, 0.5}, BBox{0, 0, 1, 1}), 0.5);
}

TEST(AveragePrecision, WorkedExamples) {
  const BBox g{0.1, 0.1, 0.4, 0.4};
  std::vector<std::vector<GroundTruth>> gts{{{kRedSquare, g}}};
  auto r = average_precision({{det(kRedSquare, g, 0.8)}}, gts);
  EXPECT_DOUBLE_EQ(r.map, 1.0);
  EXPECT_DOUBLE_EQ(average_precision({{}}, gts).map, 0.0);
  r = average_precision({{det(kRedSquare, g, 0.9), det(kRedSquare, BBox{0.6, 0.6, 0.9, 0.9}, 0.5)}}, gts);
  EXPECT_DOUBLE_EQ(r.map, 1.0);
  // Miss ranked first: precision envelope 0.5 over the whole recall range.
  r = average_precision({{det(kRedSquare, g, 0.5), det(kRedSquare, BBox{0.6, 0.6, 0.9, 0.9}, 0.9)}}, gts);
  EXPECT_DOUBLE_EQ(r.map, 0.5);
  ASSERT_EQ(r.per_class.size(), 1u);
  EXPECT_EQ(r.per_class.begin()->first, kRedSquare.index());
}

TEST(AveragePrecision, RejectsBadThresholdAndMismatchedInputs) {
  std::vector<std::vector<GroundTruth>> gts{{}};
  EXPECT_THROW(average_precision({{}}, gts, 0.0), std::invalid_argument);
  EXPECT_THROW(average_precision({{}}, gts, 1.5), std::invalid_argument);
  EXPECT_NO_THROW(average_precision({{}}, gts, 1.0));
  EXPECT_THROW(average_precision({{}, {}}, gts), std::invalid_argument);
}

TEST(AveragePrecision, MatchesBruteForceOracle) {
  std::mt19937_64 rng(3);
  const std::vector<ObjectClass> classes{kRedSquare, kBlueCircle};
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t images = 1 + rng() % 2;
    std::vector<std::vector<Detection>> dets(images);
    std::vector<std::vector<GroundTruth>> gts(images);
    std::vector<double> scores{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
    std::shuffle(scores.begin(), scores.end(), rng);
    const std::size_t nd = rng() % 5, ng = 1 + rng() % 4;
    for (std::size_t k = 0; k < ng; ++k) gts[rng() % images].push_back({classes[rng() % 2], random_box(rng)});
    for (std::size_t k = 0; k < nd; ++k) {
      const std::size_t img = rng() % images;
      // Half the detections are jittered copies of a ground truth in the same image.
      BBox b = random_box(rng);
      if (rng() % 2 && !gts[img].empty()) {
        b = gts[img][rng() % gts[img].size()].box;
        b.x1 = std::min(1.0, b.x1 + 0.05 * (rng() % 3));
      }
      dets[img].push_back(det(classes[rng() % 2], b, scores[k]));
    }
    for (double thr : {0.3, 0.5}) {
      auto r = average_precision(dets, gts, thr);
      double mean = 0.0;
      std::size_t with_gt = 0;
      for (const auto& c : classes) {
        bool any = false;
        for (const auto& g : gts)
          for (const auto& t : g) any |= t.label == c;
        if (!any) {
          EXPECT_EQ(r.per_class.count(c.index()), 0u);
          continue;
        }
        const double oracle = brute_force_ap(dets, gts, c, thr);
        ASSERT_EQ(r.per_class.at(c.index()), oracle) << "trial " << trial;
        mean += oracle;
        ++with_gt;
      }
      EXPECT_DOUBLE_EQ(r.map, mean / with_gt);
    }
  }
}

TEST(AveragePrecision, InvariantUnderMonotoneRescaling) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<Detection>> dets(3);
    std::vector<std::vector<GroundTruth>> gts(3);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (std::size_t i = 0; i < 3; ++i) {
      for (int k = 0; k < 2; ++k) gts[i].push_back({kRedSquare, random_box(rng)});
      for (int k = 0; k < 4; ++k) dets[i].push_back(det(kRedSquare, k < 2 ? gts[i][k].box : random_box(rng), u(rng)));
    }
    auto rescaled = dets;
    for (auto& v : rescaled)
      for (auto& d : v) d.score = std::pow(d.score, 3.0) * 0.5 + 0.1;
    EXPECT_EQ(average_precision(dets, gts).map, average_precision(rescaled, gts).map);
  }
}

TEST(Visor, RelationRuleAndBestDetection) {
  auto a = det(kRedSquare, BBox{0.1, 0.4, 0.3, 0.6}, 0.9), b = det(kBlueCircle, BBox{0.6, 0.4, 0.8, 0.6}, 0.8);
  EXPECT_TRUE(relation_holds(Relation::Left, a, b));
  EXPECT_FALSE(relation_holds(Relation::Right, a, b));
  EXPECT_TRUE(relation_holds(Relation::Right, b, a));
  auto top = det(kRedSquare, BBox{0.4, 0.1, 0.6, 0.3}, 0.9), bottom = det(kBlueCircle, BBox{0.4, 0.6, 0.6, 0.8}, 0.9);
  EXPECT_TRUE(relation_holds(Relation::Above, top, bottom));
  EXPECT_TRUE(relation_holds(Relation::Below, bottom, top));

  std::vector<Detection> ds{det(kRedSquare, BBox{0, 0, 0.3, 0.3}, 0.7), det(kRedSquare, BBox{0.5, 0.5, 0.8, 0.8}, 0.95), b};
  EXPECT_EQ(best_detection(ds, kRedSquare)->score, 0.95);
  EXPECT_FALSE(best_detection(ds, ObjectClass{ShapeKind::Triangle, Color::Green}));
}

TEST(Visor, WorkedCases) {
  auto a = det(kRedSquare, BBox{0.1, 0.4, 0.3, 0.6}, 0.9), b = det(kBlueCircle, BBox{0.6, 0.4, 0.8, 0.6}, 0.8);
  VisorSample hit{{a, b}, kRedSquare, kBlueCircle, Relation::Left, {}};
  VisorSample wrong{{a, b}, kRedSquare, kBlueCircle, Relation::Right, {}};
  VisorSample single{{a}, kRedSquare, kBlueCircle, Relation::Left, {}};

  auto r = visor_evaluate({hit, hit});
  EXPECT_DOUBLE_EQ(r.object_accuracy, 1.0);
  EXPECT_DOUBLE_EQ(r.visor_uncond, 1.0);
  EXPECT_DOUBLE_EQ(*r.visor_cond, 1.0);

  r = visor_evaluate({hit, wrong, single, single});
  EXPECT_DOUBLE_EQ(r.object_accuracy, 0.5);
  EXPECT_DOUBLE_EQ(r.visor_uncond, 0.25);
  EXPECT_DOUBLE_EQ(*r.visor_cond, 0.5);
  EXPECT_FALSE(r.outcomes[2].object_hit);
  EXPECT_FALSE(r.outcomes[2].relation_hit);

  r = visor_evaluate({single});
  EXPECT_FALSE(r.visor_cond);
  auto j = nlohmann::json::parse(report_json(r));
  EXPECT_EQ(j["visor_cond"], "undefined");
  for (const char* key : {"oa", "visor_uncond", "ap", "map", "n"}) EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_NE(report_table(r).find("VISOR_cond"), std::string::npos);

  VisorSample same{{a}, kRedSquare, kRedSquare, Relation::Left, {}};
  EXPECT_THROW(visor_evaluate({same}), std::invalid_argument);
}

TEST(Visor, UncondIsCondTimesObjectAccuracy) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<VisorSample> samples;
    const std::size_t n = 1 + rng() % 30;
    for (std::size_t i = 0; i < n; ++i) {
      VisorSample s;
      s.subject = kRedSquare;
      s.object = kBlueCircle;
      s.relation = kRelations[rng() % 4];
      if (rng() % 4) s.detections.push_back(det(kRedSquare, random_box(rng), 0.9));
      if (rng() % 4) s.detections.push_back(det(kBlueCircle, random_box(rng), 0.9));
      samples.push_back(std::move(s));
    }
    auto r = visor_evaluate(samples);
    EXPECT_LE(r.visor_uncond, r.object_accuracy);
    if (r.visor_cond) EXPECT_NEAR(r.visor_uncond, *r.visor_cond * r.object_accuracy, 1e-9);
    else EXPECT_EQ(r.object_accuracy, 0.0);
    EXPECT_EQ(r.n, n);
  }
}
