#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "clickrefine/eval/dataset.hpp"
#include "clickrefine/model/model.hpp"
#include "clickrefine/modulation/modulation.hpp"
#include "json.hpp"

namespace clickrefine {

double iou(const Mask& pred, const Mask& gt);
// Mean over curves of the first 1-based click index reaching `threshold`, or `cap`.
double noc(const std::vector<std::vector<double>>& curves, double threshold, std::size_t cap);

struct SegmenterInput {
  const Array& image;  // [1, 3, H, W]
  const Array& prev;   // [H, W]
  const Array& mod;    // [H, W]
  const std::vector<Click>& clicks;
  const Mask& gt;  // only reference segmenters read it
  std::uint64_t seed;
};

class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual Array predict(const SegmenterInput& in) const = 0;
};

class ModelSegmenter : public Segmenter {
 public:
  explicit ModelSegmenter(Model model) : model_(std::move(model)) {}
  Array predict(const SegmenterInput& in) const override;
  const Model& model() const noexcept { return model_; }

 private:
  Model model_;
};

// Returns the ground truth as 0/1 probabilities.
class OracleSegmenter : public Segmenter {
 public:
  Array predict(const SegmenterInput& in) const override;
};

class ZeroSegmenter : public Segmenter {
 public:
  Array predict(const SegmenterInput& in) const override;
};

// Ground truth with pixels near the object boundary flipped with probability p;
// pixels under a click disk take the click's label.
class DegradedOracleSegmenter : public Segmenter {
 public:
  explicit DegradedOracleSegmenter(double p);
  Array predict(const SegmenterInput& in) const override;

 private:
  double p_;
};

// "toy" needs a checkpoint directory; "oracle", "zero" and "degraded:p" do not.
std::unique_ptr<Segmenter> make_segmenter(const std::string& id, const std::optional<std::filesystem::path>& checkpoint);

struct EvalConfig {
  std::size_t max_clicks = 20;
  std::vector<double> iou_thresholds{0.80, 0.85, 0.90};
  std::string segmenter = "oracle";
  bool modulation = true;
  ModulationParams modulation_params;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;

  void validate() const;
};

nlohmann::ordered_json config_to_json(const EvalConfig& config);

struct InstanceResult {
  std::string instance_id;
  std::vector<double> curve;  // IoU after each click, length max_clicks
  std::vector<Click> clicks;
  bool failed = false;
  std::string error;
};

struct EvalResult {
  EvalConfig config;
  std::vector<InstanceResult> instances;  // manifest order, failures included
  std::vector<double> noc;                // per threshold, over successful instances
  std::vector<double> miou_curve;
  std::size_t failed = 0;
};

InstanceResult evaluate_instance(const Segmenter& segmenter, const Instance& instance, const EvalConfig& config,
                                 std::uint64_t seed);

// Parallel over instances with config.jobs workers; results keep manifest order.
EvalResult run_benchmark(const Segmenter& segmenter, const std::vector<InstanceRecord>& records,
                         const EvalConfig& config);

std::string threshold_key(double t);
std::string report_json(const EvalResult& result);
std::string report_csv(const EvalResult& result);
std::string miou_table(const EvalResult& result);
// Writes R.json, R.csv and R.miou.csv next to it.
void write_reports(const EvalResult& result, const std::filesystem::path& json_path);

}  // namespace clickrefine
