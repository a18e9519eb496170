#include "clickrefine/eval/benchmark.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <thread>

#include "clickrefine/core/rng.hpp"
#include "clickrefine/imageio/png.hpp"

namespace clickrefine {

double iou(const Mask& pred, const Mask& gt) {
  if (pred.shape() != gt.shape()) {
    throw DimensionError("iou: " + shape_to_string(pred.shape()) + " vs " + shape_to_string(gt.shape()));
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double noc(const std::vector<std::vector<double>>& curves, double threshold, std::size_t cap) {
  if (curves.empty()) throw ValidationError("noc: no curves");
  double total = 0.0;
  for (const auto& curve : curves) {
    std::size_t clicks = cap;
    for (std::size_t k = 0; k < curve.size() && k < cap; ++k) {
      if (curve[k] >= threshold) {
        clicks = k + 1;
        break;
      }
    }
    total += static_cast<double>(clicks);
  }
  return total / static_cast<double>(curves.size());
}

Array ModelSegmenter::predict(const SegmenterInput& in) const {
  return clickrefine::predict(model_, in.image, in.prev, in.mod, in.clicks);
}

Array OracleSegmenter::predict(const SegmenterInput& in) const {
  Array out(in.gt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = in.gt[i] ? 1.0f : 0.0f;
  return out;
}

Array ZeroSegmenter::predict(const SegmenterInput& in) const { return Array(in.gt.shape(), 0.0f); }

DegradedOracleSegmenter::DegradedOracleSegmenter(double p) : p_(p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("degraded segmenter noise must be in [0, 1]");
}

Array DegradedOracleSegmenter::predict(const SegmenterInput& in) const {
  const std::size_t h = in.gt.dim(0), w = in.gt.dim(1);
  Rng rng(mix_seed(in.seed, in.clicks.size()));
  Array out(in.gt.shape());
  const int band = 2;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::uint8_t label = in.gt.at(y, x);
      bool near_boundary = false;
      for (int dy = -band; dy <= band && !near_boundary; ++dy) {
        for (int dx = -band; dx <= band; ++dx) {
          const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
          if (in.gt.at(yy, xx) != label) {
            near_boundary = true;
            break;
          }
        }
      }
      const bool flip = near_boundary && rng.bernoulli(p_);
      out.at(y, x) = (label != 0) != flip ? 1.0f : 0.0f;
    }
  }
  const int r = default_disk_radius(h);
  for (const Click& c : in.clicks) {
    for (int dy = -r; dy <= r; ++dy) {
      for (int dx = -r; dx <= r; ++dx) {
        const int yy = c.y + dy, xx = c.x + dx;
        if (dx * dx + dy * dy > r * r || yy < 0 || xx < 0 || yy >= static_cast<int>(h) || xx >= static_cast<int>(w)) continue;
        out.at(yy, xx) = c.kind == ClickKind::positive ? 1.0f : 0.0f;
      }
    }
  }
  return out;
}

std::unique_ptr<Segmenter> make_segmenter(const std::string& id, const std::optional<std::filesystem::path>& checkpoint) {
  if (id == "oracle") return std::make_unique<OracleSegmenter>();
  if (id == "zero") return std::make_unique<ZeroSegmenter>();
  if (id.rfind("degraded:", 0) == 0) {
    const std::string value = id.substr(9);
    std::size_t used = 0;
    double p = 0.0;
    try {
      p = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != value.size()) throw ConfigError("bad degraded noise level: " + value);
    return std::make_unique<DegradedOracleSegmenter>(p);
  }
  if (id == "toy") {
    if (!checkpoint) throw ConfigError("segmenter toy needs a checkpoint");
    return std::make_unique<ModelSegmenter>(load_checkpoint(*checkpoint));
  }
  throw ConfigError("unknown segmenter: " + id);
}

void EvalConfig::validate() const {
  if (max_clicks < 1) throw ConfigError("max_clicks must be >= 1");
  if (iou_thresholds.empty()) throw ConfigError("at least one IoU threshold is required");
  for (double t : iou_thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw ConfigError("IoU thresholds must be in (0, 1]");
  }
  if (jobs < 1) throw ConfigError("jobs must be >= 1");
  modulation_params.validate();
}

std::string threshold_key(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", t);
  return buf;
}

nlohmann::ordered_json config_to_json(const EvalConfig& c) {
  return {{"max_clicks", c.max_clicks},
          {"iou_thresholds", c.iou_thresholds},
          {"segmenter", c.segmenter},
          {"modulation", c.modulation},
          {"modulation_params", nlohmann::json(c.modulation_params)},
          {"seed", c.seed}};
}

InstanceResult evaluate_instance(const Segmenter& segmenter, const Instance& instance, const EvalConfig& config,
                                 std::uint64_t seed) {
  config.validate();
  InstanceResult result;
  result.instance_id = instance.record.instance_id;
  const Mask& gt = instance.gt;
  const std::size_t h = gt.dim(0), w = gt.dim(1);
  const double top = *std::max_element(config.iou_thresholds.begin(), config.iou_thresholds.end());
  Array prev({h, w}, 0.0f), mod({h, w}, 0.0f);
  Mask pred({h, w}, 0);
  try {
    while (result.curve.size() < config.max_clicks) {
      const auto click = next_click(pred, gt, result.clicks);
      if (!click) break;
      result.clicks.push_back(*click);
      const Array prob = segmenter.predict({instance.image, prev, mod, result.clicks, gt, seed});
      require_shape(prob, Shape{h, w}, "segmenter output");
      pred = binarize(prob);
      result.curve.push_back(iou(pred, gt));
      mod = config.modulation ? modulate(prob, *click, result.clicks, config.modulation_params) : prob;
      prev = prob;
      if (result.curve.back() >= top) break;
    }
  } catch (const std::exception& e) {
    result.failed = true;
    result.error = e.what();
    return result;
  }
  const double last = result.curve.empty() ? iou(pred, gt) : result.curve.back();
  result.curve.resize(config.max_clicks, last);
  return result;
}

EvalResult run_benchmark(const Segmenter& segmenter, const std::vector<InstanceRecord>& records,
                         const EvalConfig& config) {
  config.validate();
  const auto* model_seg = dynamic_cast<const ModelSegmenter*>(&segmenter);
  const std::uint64_t params_before = model_seg ? model_seg->model().params.checksum() : 0;
  EvalResult out;
  out.config = config;
  out.instances.resize(records.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < records.size(); i = next++) {
      InstanceResult& r = out.instances[i];
      try {
        r = evaluate_instance(segmenter, load_instance(records[i]), config, mix_seed(config.seed, i));
      } catch (const std::exception& e) {
        r.instance_id = records[i].instance_id;
        r.failed = true;
        r.error = e.what();
      }
    }
  };
  const std::size_t jobs = std::min<std::size_t>(config.jobs, std::max<std::size_t>(records.size(), 1));
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (model_seg && model_seg->model().params.checksum() != params_before) {
    throw NumericError("model parameters changed during evaluation");
  }

  std::vector<std::vector<double>> curves;
  for (const auto& r : out.instances) {
    if (r.failed) {
      ++out.failed;
    } else {
      curves.push_back(r.curve);
    }
  }
  out.miou_curve.assign(config.max_clicks, 0.0);
  for (double t : config.iou_thresholds) out.noc.push_back(curves.empty() ? static_cast<double>(config.max_clicks) : noc(curves, t, config.max_clicks));
  for (const auto& c : curves) {
    for (std::size_t k = 0; k < config.max_clicks; ++k) out.miou_curve[k] += c[k];
  }
  if (!curves.empty()) {
    for (double& v : out.miou_curve) v /= static_cast<double>(curves.size());
  }
  return out;
}

std::string report_json(const EvalResult& result) {
  nlohmann::ordered_json j;
  j["config"] = config_to_json(result.config);
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (const auto& r : result.instances) {
    nlohmann::ordered_json item;
    item["instance_id"] = r.instance_id;
    item["failed"] = r.failed;
    if (r.failed) {
      item["error"] = r.error;
    } else {
      item["curve"] = r.curve;
      nlohmann::ordered_json nocs;
      for (double t : result.config.iou_thresholds) nocs[threshold_key(t)] = noc({r.curve}, t, result.config.max_clicks);
      item["noc"] = nocs;
      nlohmann::ordered_json clicks = nlohmann::ordered_json::array();
      for (const Click& c : r.clicks) clicks.push_back(nlohmann::ordered_json::parse(nlohmann::json(c).dump()));
      item["clicks"] = clicks;
    }
    per.push_back(item);
  }
  j["per_instance"] = per;
  nlohmann::ordered_json nocs;
  for (std::size_t i = 0; i < result.noc.size(); ++i) nocs[threshold_key(result.config.iou_thresholds[i])] = result.noc[i];
  j["noc"] = nocs;
  j["miou_curve"] = result.miou_curve;
  j["instances"] = result.instances.size();
  j["failed"] = result.failed;
  return j.dump(2) + "\n";
}

std::string report_csv(const EvalResult& result) {
  std::string out = "instance_id,failed";
  for (double t : result.config.iou_thresholds) out += ",noc_" + threshold_key(t);
  for (std::size_t k = 1; k <= result.config.max_clicks; ++k) out += ",iou_" + std::to_string(k);
  out += "\n";
  char buf[64];
  for (const auto& r : result.instances) {
    out += r.instance_id + (r.failed ? ",1" : ",0");
    for (double t : result.config.iou_thresholds) {
      if (r.failed) {
        out += ",";
        continue;
      }
      std::snprintf(buf, sizeof buf, ",%.0f", noc({r.curve}, t, result.config.max_clicks));
      out += buf;
    }
    for (std::size_t k = 0; k < result.config.max_clicks; ++k) {
      if (r.failed) {
        out += ",";
        continue;
      }
      std::snprintf(buf, sizeof buf, ",%.6f", r.curve[k]);
      out += buf;
    }
    out += "\n";
  }
  return out;
}

std::string miou_table(const EvalResult& result) {
  std::string out = "click,miou\n";
  char buf[64];
  for (std::size_t k = 0; k < result.miou_curve.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f\n", k + 1, result.miou_curve[k]);
    out += buf;
  }
  return out;
}

void write_reports(const EvalResult& result, const std::filesystem::path& json_path) {
  auto write_text = [](const std::filesystem::path& p, const std::string& text) {
    write_file(p, Bytes(text.begin(), text.end()));
  };
  if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());
  write_text(json_path, report_json(result));
  auto csv = json_path;
  csv.replace_extension(".csv");
  write_text(csv, report_csv(result));
  auto miou = json_path;
  miou.replace_extension(".miou.csv");
  write_text(miou, miou_table(result));
}

}  // namespace clickrefine
