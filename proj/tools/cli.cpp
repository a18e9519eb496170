#include "cli.hpp"

#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "clickrefine/core/errors.hpp"
#include "clickrefine/data/synthetic.hpp"
#include "clickrefine/eval/benchmark.hpp"
#include "clickrefine/eval/dataset.hpp"
#include "clickrefine/imageio/png.hpp"
#include "clickrefine/model/model.hpp"
#include "clickrefine/modulation/modulation.hpp"
#include "clickrefine/service/service.hpp"
#include "clickrefine/training/trainer.hpp"
#include "json.hpp"

namespace clickrefine::cli {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

struct Options {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::size_t jobs = 1;

  std::string manifest, segmenter = "oracle", checkpoint, out;
  std::size_t max_clicks = 20;
  std::vector<double> thresholds{0.80, 0.85, 0.90};
  bool no_modulation = false;
  double rmax = 100.0, rmin = 5.0;
  bool unfiltered = false;

  std::string config;

  std::string host = "127.0.0.1", static_dir;
  int port = 8080;
  std::size_t max_side = 2048;
  double ttl_minutes = 30.0;

  std::string prob, clicks;

  std::string image, gt;

  std::size_t count = 100, size = 64;

  std::string coco, images;
};

json read_json(const std::string& path) {
  const Bytes bytes = read_file(path);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw ConfigError("malformed JSON in " + path + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file(path, Bytes(text.begin(), text.end()));
}

ModulationParams modulation_params(const Options& o) {
  ModulationParams p;
  p.r_max = o.rmax;
  p.r_min = o.rmin;
  p.filtered = !o.unfiltered;
  p.validate();
  return p;
}

std::optional<std::filesystem::path> checkpoint_path(const Options& o) {
  if (o.checkpoint.empty()) return std::nullopt;
  return std::filesystem::path(o.checkpoint);
}

void print_config(std::ostream& out, const std::string& command, const ordered_json& config) {
  out << ordered_json{{"command", command}, {"effective_config", config}}.dump() << "\n";
}

EvalConfig eval_config(const Options& o) {
  EvalConfig c;
  c.max_clicks = o.max_clicks;
  c.iou_thresholds = o.thresholds;
  c.segmenter = o.segmenter;
  c.modulation = !o.no_modulation;
  c.modulation_params = modulation_params(o);
  c.seed = o.seed;
  c.jobs = o.jobs;
  c.validate();
  return c;
}

int run_eval(const Options& o, std::ostream& out, std::ostream& err) {
  const EvalConfig config = eval_config(o);
  ordered_json shown = config_to_json(config);
  shown["manifest"] = o.manifest;
  shown["checkpoint"] = o.checkpoint;
  shown["jobs"] = o.jobs;
  shown["out"] = o.out;
  print_config(out, "eval", shown);

  const auto segmenter = make_segmenter(o.segmenter, checkpoint_path(o));
  const auto records = load_manifest(o.manifest);
  const EvalResult result = run_benchmark(*segmenter, records, config);
  write_reports(result, o.out);

  ordered_json summary;
  summary["instances"] = result.instances.size();
  summary["failed"] = result.failed;
  for (std::size_t i = 0; i < result.noc.size(); ++i) summary["noc"][threshold_key(config.iou_thresholds[i])] = result.noc[i];
  out << summary.dump() << "\n";
  for (const auto& r : result.instances) {
    if (r.failed) err << "instance " << r.instance_id << " failed: " << r.error << "\n";
  }
  if (!result.instances.empty() && result.failed * 100 > result.instances.size()) {
    err << "error: " << result.failed << " of " << result.instances.size() << " instances failed (limit 1%)\n";
    return 1;
  }
  return 0;
}

// {"model": "toy" | {...}, "train": {...}, "data": {"synthetic": {"count", "size", "seed"}} | {"manifest": path}}
int run_train(const Options& o, std::ostream& out, std::ostream&) {
  json cfg = o.config.empty() ? json::object() : read_json(o.config);
  if (!cfg.is_object()) throw ConfigError("training config must be a JSON object");
  for (const auto& [key, value] : cfg.items()) {
    if (key != "model" && key != "train" && key != "data") throw ConfigError("unknown training config section: " + key);
  }

  ModelConfig model_config = ModelConfig::toy();
  if (cfg.contains("model")) {
    const json& m = cfg["model"];
    if (m.is_string()) {
      const std::string preset = m.get<std::string>();
      if (preset == "toy") {
        model_config = ModelConfig::toy();
      } else if (preset == "paper_scale") {
        model_config = ModelConfig::paper_scale();
      } else {
        throw ConfigError("unknown model preset: " + preset);
      }
    } else {
      model_config = m.get<ModelConfig>();
    }
  }
  model_config.validate();

  TrainConfig train_config = TrainConfig::desk();
  if (cfg.contains("train")) train_config = cfg["train"].get<TrainConfig>();
  if (o.seed_given || !cfg.contains("train") || !cfg["train"].contains("seed")) train_config.seed = o.seed;
  train_config.validate();

  json data_cfg = cfg.value("data", json{{"synthetic", json::object()}});
  std::vector<SyntheticSample> data;
  ordered_json data_shown;
  if (data_cfg.contains("manifest")) {
    const std::string path = data_cfg["manifest"].get<std::string>();
    data_shown["manifest"] = path;
    for (const auto& r : load_manifest(path)) {
      Instance inst = load_instance(r);
      data.push_back({std::move(inst.image), std::move(inst.gt)});
    }
  } else if (data_cfg.contains("synthetic")) {
    const json& s = data_cfg["synthetic"];
    const std::size_t count = s.value("count", std::size_t{200});
    const std::size_t size = s.value("size", model_config.input_resolution);
    const std::uint64_t seed = s.value("seed", std::uint64_t{1000});
    data_shown["synthetic"] = {{"count", count}, {"size", size}, {"seed", seed}};
    data = synthesize_dataset(count, size, seed);
  } else {
    throw ConfigError("data section needs \"synthetic\" or \"manifest\"");
  }
  if (data.empty()) throw ConfigError("training data is empty");

  ordered_json shown;
  shown["model"] = ordered_json::parse(json(model_config).dump());
  shown["train"] = ordered_json::parse(json(train_config).dump());
  shown["data"] = data_shown;
  shown["out"] = o.out;
  print_config(out, "train", shown);

  std::filesystem::create_directories(o.out);
  std::ofstream log(std::filesystem::path(o.out) / "train_log.jsonl");
  const TrainResult result = train(model_config, train_config, data, &log);
  save_checkpoint(result.model, o.out);
  write_text(std::filesystem::path(o.out) / "train_config.json", shown.dump(2) + "\n");
  ordered_json summary{{"epochs", result.epoch_losses.size()}, {"final_loss", result.epoch_losses.empty() ? 0.0 : result.epoch_losses.back()}};
  out << summary.dump() << "\n";
  return 0;
}

HttpFrontend* active_frontend = nullptr;

void stop_on_signal(int) {
  if (active_frontend) active_frontend->stop();
}

int run_serve(const Options& o, std::ostream& out, std::ostream& err) {
  ServiceConfig config;
  config.max_side = o.max_side;
  if (!(o.ttl_minutes > 0)) throw ConfigError("--ttl-minutes must be positive");
  config.idle_ttl = std::chrono::seconds(static_cast<long long>(o.ttl_minutes * 60));
  config.modulation = modulation_params(o);
  ordered_json shown{{"host", o.host},
                     {"port", o.port},
                     {"segmenter", o.segmenter},
                     {"checkpoint", o.checkpoint},
                     {"static_dir", o.static_dir},
                     {"max_side", o.max_side},
                     {"ttl_minutes", o.ttl_minutes},
                     {"modulation_params", ordered_json::parse(json(config.modulation).dump())}};
  print_config(out, "serve", shown);

  std::shared_ptr<const Segmenter> segmenter = make_segmenter(o.segmenter, checkpoint_path(o));
  SessionService service(segmenter, config);
  std::optional<std::filesystem::path> static_dir;
  if (!o.static_dir.empty()) static_dir = o.static_dir;
  HttpFrontend http(service, static_dir);
  active_frontend = &http;
  std::signal(SIGINT, stop_on_signal);
  std::signal(SIGTERM, stop_on_signal);
  out << "listening on http://" << o.host << ":" << o.port << std::endl;
  const bool ok = http.listen(o.host, o.port);
  active_frontend = nullptr;
  if (!ok) {
    err << "error: could not listen on " << o.host << ":" << o.port << "\n";
    return 1;
  }
  return 0;
}

int run_modulate(const Options& o, std::ostream& out, std::ostream&) {
  const ModulationParams params = modulation_params(o);
  ordered_json shown{{"prob", o.prob}, {"clicks", o.clicks}, {"out", o.out},
                     {"modulation_params", ordered_json::parse(json(params).dump())}};
  print_config(out, "modulate", shown);

  const Array prob = decode_prob_png(read_file(o.prob));
  const json cj = read_json(o.clicks);
  if (!cj.is_array() || cj.empty()) throw ConfigError("clicks file must hold a non-empty JSON array of clicks");
  std::vector<Click> clicks;
  for (const auto& item : cj) {
    Click c = item.get<Click>();
    if (c.ordinal == 0) c.ordinal = static_cast<int>(clicks.size()) + 1;
    validate_click(c, prob.dim(0), prob.dim(1));
    clicks.push_back(c);
  }
  // The last click is the one being applied; earlier clicks only bound its radius.
  const Array result = modulate(prob, clicks.back(), clicks, params);
  const std::filesystem::path out_path(o.out);
  if (out_path.has_parent_path()) std::filesystem::create_directories(out_path.parent_path());
  write_file(out_path, encode_prob_png(result));
  out << ordered_json{{"radius", modulation_radius(clicks.back(), clicks, params)}}.dump() << "\n";
  return 0;
}

int run_simulate(const Options& o, std::ostream& out, std::ostream&) {
  const EvalConfig config = eval_config(o);
  ordered_json shown = config_to_json(config);
  shown["image"] = o.image;
  shown["gt"] = o.gt;
  shown["checkpoint"] = o.checkpoint;
  print_config(out, "simulate", shown);

  const auto segmenter = make_segmenter(o.segmenter, checkpoint_path(o));
  const Instance inst = load_instance({o.image, o.gt, std::filesystem::path(o.image).stem().string(), ""});
  const InstanceResult r = evaluate_instance(*segmenter, inst, config, config.seed);
  if (r.failed) throw std::runtime_error("simulation failed: " + r.error);
  for (std::size_t k = 0; k < r.clicks.size(); ++k) {
    ordered_json line = ordered_json::parse(json(r.clicks[k]).dump());
    line["iou"] = r.curve[k];
    out << line.dump() << "\n";
  }
  return 0;
}

int run_synth(const Options& o, std::ostream& out, std::ostream&) {
  print_config(out, "synth", {{"out", o.out}, {"count", o.count}, {"size", o.size}, {"seed", o.seed}});
  const auto manifest = write_synthetic_dataset(o.out, o.count, o.size, o.seed);
  out << ordered_json{{"manifest", manifest.string()}}.dump() << "\n";
  return 0;
}

int run_import_coco(const Options& o, std::ostream& out, std::ostream&) {
  print_config(out, "import-coco", {{"coco", o.coco}, {"images", o.images}, {"out", o.out}});
  const auto manifest = import_coco(o.coco, o.images, o.out);
  out << ordered_json{{"manifest", manifest.string()}}.dump() << "\n";
  return 0;
}

void add_modulation_flags(CLI::App* cmd, Options& o) {
  cmd->add_option("--rmax", o.rmax, "Largest modulation radius in pixels")->capture_default_str();
  cmd->add_option("--rmin", o.rmin, "Smallest modulation radius in pixels")->capture_default_str();
  cmd->add_flag("--unfiltered", o.unfiltered, "Use the plain fixed-radius circle instead of the filtered window");
}

void add_segmenter_flags(CLI::App* cmd, Options& o) {
  cmd->add_option("--segmenter", o.segmenter, "toy | oracle | degraded:p | zero")->capture_default_str();
  cmd->add_option("--checkpoint", o.checkpoint, "Checkpoint directory for the toy segmenter");
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Click-based interactive segmentation toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--seed", o.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--jobs", o.jobs, "Evaluation worker threads")->capture_default_str()->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "Run the click-simulation benchmark over a manifest");
  eval->add_option("--manifest", o.manifest, "Manifest JSON")->required();
  add_segmenter_flags(eval, o);
  eval->add_option("--max-clicks", o.max_clicks, "Click budget per instance")->capture_default_str();
  eval->add_option("--thresholds", o.thresholds, "IoU thresholds")->delimiter(',')->capture_default_str();
  eval->add_flag("--no-modulation", o.no_modulation, "Feed the raw probability map back instead of the modulated one");
  add_modulation_flags(eval, o);
  eval->add_option("--out", o.out, "Report JSON path (CSV mirrors are written next to it)")->required();

  auto* tr = app.add_subcommand("train", "Train the toy model");
  tr->add_option("--config", o.config, "Training config JSON")->required();
  tr->add_option("--out", o.out, "Checkpoint directory")->required();

  auto* serve = app.add_subcommand("serve", "Start the session service");
  serve->add_option("--port", o.port, "TCP port")->capture_default_str();
  serve->add_option("--host", o.host, "Bind address")->capture_default_str();
  add_segmenter_flags(serve, o);
  serve->add_option("--static-dir", o.static_dir, "Directory of static files served at /");
  serve->add_option("--max-side", o.max_side, "Largest accepted image side")->capture_default_str();
  serve->add_option("--ttl-minutes", o.ttl_minutes, "Idle session lifetime")->capture_default_str();
  add_modulation_flags(serve, o);

  auto* mod = app.add_subcommand("modulate", "Apply one modulation step to a probability PNG");
  mod->add_option("--prob", o.prob, "16-bit probability PNG")->required();
  mod->add_option("--clicks", o.clicks, "Clicks JSON array; the last click is applied")->required();
  add_modulation_flags(mod, o);
  mod->add_option("--out", o.out, "Output 16-bit PNG")->required();

  auto* sim = app.add_subcommand("simulate", "Print the simulated click sequence for one image");
  sim->add_option("--image", o.image, "RGB PNG")->required();
  sim->add_option("--gt", o.gt, "Ground-truth mask PNG")->required();
  add_segmenter_flags(sim, o);
  sim->add_option("--max-clicks", o.max_clicks, "Click budget")->capture_default_str();
  sim->add_option("--thresholds", o.thresholds, "IoU thresholds; the largest stops the run")->delimiter(',')->capture_default_str();
  sim->add_flag("--no-modulation", o.no_modulation, "Feed the raw probability map back");
  add_modulation_flags(sim, o);

  auto* synth = app.add_subcommand("synth", "Write a synthetic polygon dataset with a manifest");
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--count", o.count, "Number of images")->capture_default_str();
  synth->add_option("--size", o.size, "Image side in pixels")->capture_default_str();

  auto* coco = app.add_subcommand("import-coco", "Convert COCO instance annotations to a manifest");
  coco->add_option("--coco", o.coco, "COCO annotation JSON")->required();
  coco->add_option("--images", o.images, "Directory holding the COCO images")->required();
  coco->add_option("--out", o.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n" << "run with --help for usage\n";
    return 2;
  }

  o.seed_given = app.get_option("--seed")->count() > 0;
  try {
    if (*eval) return run_eval(o, out, err);
    if (*tr) return run_train(o, out, err);
    if (*serve) return run_serve(o, out, err);
    if (*mod) return run_modulate(o, out, err);
    if (*sim) return run_simulate(o, out, err);
    if (*synth) return run_synth(o, out, err);
    if (*coco) return run_import_coco(o, out, err);
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace clickrefine::cli
