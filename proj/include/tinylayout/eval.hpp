#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tinylayout/dataset.hpp"
#include "tinylayout/geometry.hpp"
#include "tinylayout/image.hpp"

namespace tinylayout {

struct Detection {
  ObjectClass label;
  BBox box;
  double score = 0.0;  // fill ratio, capped at 1
  std::size_t area = 0;
  double centroid_x = 0.0;  // normalized pixel centroid
  double centroid_y = 0.0;
};

std::vector<Detection> detect(const Image& image);

struct GroundTruth {
  ObjectClass label;
  BBox box;
};

struct APResult {
  std::map<std::size_t, double> per_class;  // class index -> AP, classes with >= 1 ground truth
  double map = 0.0;
};

// Detections and ground truths are indexed by image.
APResult average_precision(const std::vector<std::vector<Detection>>& detections,
                           const std::vector<std::vector<GroundTruth>>& truths, double iou_threshold = 0.3);

struct VisorSample {
  std::vector<Detection> detections;
  ObjectClass subject;
  ObjectClass object;
  Relation relation = Relation::Left;
  std::vector<GroundTruth> truths;  // layout boxes, for AP
};

struct VisorOutcome {
  bool object_hit = false;
  bool relation_hit = false;
};

struct MetricsReport {
  double object_accuracy = 0.0;
  double visor_uncond = 0.0;
  std::optional<double> visor_cond;  // undefined when no image has both objects
  std::map<std::string, double> ap;
  double map = 0.0;
  std::size_t n = 0;
  std::vector<VisorOutcome> outcomes;
};

// Highest-score detection of the class, if any.
std::optional<Detection> best_detection(const std::vector<Detection>& detections, const ObjectClass& cls);
bool relation_holds(Relation r, const Detection& subject, const Detection& object);

MetricsReport visor_evaluate(const std::vector<VisorSample>& samples, double iou_threshold = 0.3);

std::string report_json(const MetricsReport& report);
std::string report_table(const MetricsReport& report);

}  // namespace tinylayout
