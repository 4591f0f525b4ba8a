#include "tinylayout/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace tinylayout {

namespace {

constexpr std::size_t kMinArea = 12;
constexpr int kBackground = -1;

int quantize(const std::uint8_t* p) {
  const double r = p[0], g = p[1], b = p[2];
  const double m = (r + g + b) / 3.0;
  double best = (r - m) * (r - m) + (g - m) * (g - m) + (b - m) * (b - m);
  int label = kBackground;
  for (Color c : kColors) {
    const auto ref = color_rgb(c);
    const double d = (r - ref[0]) * (r - ref[0]) + (g - ref[1]) * (g - ref[1]) + (b - ref[2]) * (b - ref[2]);
    if (d < best) {
      best = d;
      label = static_cast<int>(c);
    }
  }
  return label;
}

std::optional<ShapeKind> classify_fill(double f) {
  if (f >= 0.9) return ShapeKind::Square;
  if (f >= 0.65) return ShapeKind::Circle;
  if (f >= 0.35) return ShapeKind::Triangle;
  return std::nullopt;
}

}  // namespace

std::vector<Detection> detect(const Image& image) {
  const std::size_t w = image.width, h = image.height;
  std::vector<int> label(w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) label[y * w + x] = quantize(image.pixel(x, y));
  std::vector<char> seen(w * h, 0);
  std::vector<Detection> out;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < w * h; ++start) {
    if (seen[start] || label[start] == kBackground) continue;
    const int color = label[start];
    std::size_t area = 0, x0 = w, y0 = h, x1 = 0, y1 = 0;
    double sx = 0.0, sy = 0.0;
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const std::size_t x = i % w, y = i / w;
      ++area;
      sx += x + 0.5;
      sy += y + 0.5;
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
      auto visit = [&](std::size_t j) {
        if (!seen[j] && label[j] == color) {
          seen[j] = 1;
          stack.push_back(j);
        }
      };
      if (x > 0) visit(i - 1);
      if (x + 1 < w) visit(i + 1);
      if (y > 0) visit(i - w);
      if (y + 1 < h) visit(i + w);
    }
    if (area < kMinArea) continue;
    const double box_area = static_cast<double>((x1 - x0 + 1) * (y1 - y0 + 1));
    const double fill = static_cast<double>(area) / box_area;
    auto shape = classify_fill(fill);
    if (!shape) continue;
    Detection d;
    d.label = {*shape, static_cast<Color>(color)};
    d.box = BBox{static_cast<double>(x0) / w, static_cast<double>(y0) / h, static_cast<double>(x1 + 1) / w,
                 static_cast<double>(y1 + 1) / h};
    d.score = std::min(1.0, fill);
    d.area = area;
    d.centroid_x = sx / static_cast<double>(area) / w;
    d.centroid_y = sy / static_cast<double>(area) / h;
    out.push_back(d);
  }
  return out;
}

APResult average_precision(const std::vector<std::vector<Detection>>& detections,
                           const std::vector<std::vector<GroundTruth>>& truths, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) throw std::invalid_argument("IoU threshold must lie in (0, 1]");
  if (detections.size() != truths.size()) throw std::invalid_argument("detections and ground truths differ in image count");
  APResult result;
  for (std::size_t cls = 0; cls < kNumClasses; ++cls) {
    std::size_t n_gt = 0;
    for (const auto& img : truths)
      for (const auto& g : img) n_gt += g.label.index() == cls;
    if (n_gt == 0) continue;

    struct Ref {
      double score;
      std::size_t image, det;
    };
    std::vector<Ref> dets;
    for (std::size_t i = 0; i < detections.size(); ++i)
      for (std::size_t k = 0; k < detections[i].size(); ++k)
        if (detections[i][k].label.index() == cls) dets.push_back({detections[i][k].score, i, k});
    std::stable_sort(dets.begin(), dets.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });

    std::vector<std::vector<char>> used(truths.size());
    for (std::size_t i = 0; i < truths.size(); ++i) used[i].assign(truths[i].size(), 0);
    // Precision/recall at every distinct score cutoff.
    std::vector<std::pair<double, double>> pr;  // (recall, precision)
    std::size_t tp = 0;
    for (std::size_t k = 0; k < dets.size(); ++k) {
      const auto& d = detections[dets[k].image][dets[k].det];
      const auto& gts = truths[dets[k].image];
      double best = -1.0;
      std::size_t best_j = 0;
      for (std::size_t j = 0; j < gts.size(); ++j) {
        if (gts[j].label.index() != cls || used[dets[k].image][j]) continue;
        const double o = iou(d.box, gts[j].box);
        if (o > best) best = o, best_j = j;
      }
      if (best >= iou_threshold) {
        used[dets[k].image][best_j] = 1;
        ++tp;
      }
      if (k + 1 == dets.size() || dets[k + 1].score != dets[k].score)
        pr.emplace_back(static_cast<double>(tp) / n_gt, static_cast<double>(tp) / (k + 1));
    }
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t k = 0; k < pr.size(); ++k) {
      double envelope = 0.0;
      for (std::size_t m = k; m < pr.size(); ++m) envelope = std::max(envelope, pr[m].second);
      ap += (pr[k].first - prev_recall) * envelope;
      prev_recall = pr[k].first;
    }
    result.per_class[cls] = ap;
  }
  if (!result.per_class.empty()) {
    double s = 0.0;
    for (const auto& [_, v] : result.per_class) s += v;
    result.map = s / static_cast<double>(result.per_class.size());
  }
  return result;
}

std::optional<Detection> best_detection(const std::vector<Detection>& detections, const ObjectClass& cls) {
  std::optional<Detection> best;
  for (const auto& d : detections)
    if (d.label == cls && (!best || d.score > best->score)) best = d;
  return best;
}

bool relation_holds(Relation r, const Detection& s, const Detection& o) {
  switch (r) {
    case Relation::Left:
      return s.centroid_x < o.centroid_x;
    case Relation::Right:
      return s.centroid_x > o.centroid_x;
    case Relation::Above:
      return s.centroid_y < o.centroid_y;
    case Relation::Below:
      return s.centroid_y > o.centroid_y;
  }
  return false;
}

MetricsReport visor_evaluate(const std::vector<VisorSample>& samples, double iou_threshold) {
  MetricsReport rep;
  rep.n = samples.size();
  std::size_t oa = 0, rel = 0;
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GroundTruth>> gts;
  for (const auto& s : samples) {
    if (s.subject == s.object) throw std::invalid_argument("VISOR prompts need two distinct objects");
    VisorOutcome o;
    auto a = best_detection(s.detections, s.subject);
    auto b = best_detection(s.detections, s.object);
    o.object_hit = a && b;
    o.relation_hit = o.object_hit && relation_holds(s.relation, *a, *b);
    oa += o.object_hit;
    rel += o.relation_hit;
    rep.outcomes.push_back(o);
    dets.push_back(s.detections);
    gts.push_back(s.truths);
  }
  if (rep.n > 0) {
    rep.object_accuracy = static_cast<double>(oa) / rep.n;
    rep.visor_uncond = static_cast<double>(rel) / rep.n;
  }
  if (oa > 0) rep.visor_cond = static_cast<double>(rel) / oa;
  auto ap = average_precision(dets, gts, iou_threshold);
  for (const auto& [cls, v] : ap.per_class) rep.ap[ObjectClass::from_index(cls).name()] = v;
  rep.map = ap.map;
  return rep;
}

std::string report_json(const MetricsReport& r) {
  nlohmann::json j;
  j["oa"] = r.object_accuracy;
  j["visor_uncond"] = r.visor_uncond;
  j["visor_cond"] = r.visor_cond ? nlohmann::json(*r.visor_cond) : nlohmann::json("undefined");
  j["ap"] = r.ap;
  j["map"] = r.map;
  j["n"] = r.n;
  return j.dump(2);
}

std::string report_table(const MetricsReport& r) {
  std::ostringstream out;
  char buf[128];
  std::snprintf(buf, sizeof buf, "%-14s %8zu\n", "images", r.n);
  out << buf;
  std::snprintf(buf, sizeof buf, "%-14s %7.2f%%\n", "OA", 100.0 * r.object_accuracy);
  out << buf;
  std::snprintf(buf, sizeof buf, "%-14s %7.2f%%\n", "VISOR_uncond", 100.0 * r.visor_uncond);
  out << buf;
  if (r.visor_cond)
    std::snprintf(buf, sizeof buf, "%-14s %7.2f%%\n", "VISOR_cond", 100.0 * *r.visor_cond);
  else
    std::snprintf(buf, sizeof buf, "%-14s %8s\n", "VISOR_cond", "n/a");
  out << buf;
  std::snprintf(buf, sizeof buf, "%-14s %8.4f\n", "mAP@0.3", r.map);
  out << buf;
  for (const auto& [name, v] : r.ap) {
    std::snprintf(buf, sizeof buf, "  AP %-13s %6.4f\n", name.c_str(), v);
    out << buf;
  }
  return out.str();
}

}  // namespace tinylayout
