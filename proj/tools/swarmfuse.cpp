// swarmfuse command line: gen, train, eval, swarm, report, dump.
//
// Every command writes into a run directory (--run) and records its
// configuration, seeds and SHA-256 hashes of its outputs in
// <run>/manifest.json, keyed by command. Inputs are read from the paths given.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "swarmfuse/errors.hpp"
#include "swarmfuse/swarm.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace swarmfuse;

namespace {

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

// Entry `key` of <run>/manifest.json is replaced; other entries are kept.
void record(const fs::path& run, const std::string& key, json config, const std::vector<fs::path>& artifacts) {
  const fs::path path = run / "manifest.json";
  json manifest = fs::exists(path) ? read_json(path) : json::object();
  json hashes = json::object();
  for (const auto& a : artifacts) hashes[fs::relative(a, run).generic_string()] = sha256_file(a);
  config["artifacts"] = hashes;
  manifest[key] = std::move(config);
  write_text(path, manifest.dump(2) + "\n");
}

fs::path prepare_run(const std::string& dir) {
  fs::path run(dir);
  fs::create_directories(run);
  return run;
}

fs::path under(const fs::path& run, const std::string& name) {
  fs::path p(name);
  return p.is_absolute() ? p : run / p;
}

// Model shape options shared by train, eval, swarm and dump.
struct ModelOptions {
  std::string method = "MAIN";
  int feature_dim = 16;
  int smooth_hidden = 64;
  double tau = 1.0;
  std::uint64_t model_seed = 1;

  void add(CLI::App& app) {
    app.add_option("--feature-dim", feature_dim, "Exchanged feature channels K");
    app.add_option("--smooth-hidden", smooth_hidden, "Hidden channels of the smoothing network");
    app.add_option("--tau", tau, "Similarity temperature");
    app.add_option("--model-seed", model_seed, "Weight initialisation seed");
  }

  json to_json() const {
    return {{"method", method},
            {"feature_dim", feature_dim},
            {"smooth_hidden", smooth_hidden},
            {"tau", tau},
            {"model_seed", model_seed}};
  }

  static ModelOptions from_json(const json& j) {
    ModelOptions o;
    o.method = j.at("method").get<std::string>();
    o.feature_dim = j.at("feature_dim").get<int>();
    o.smooth_hidden = j.at("smooth_hidden").get<int>();
    o.tau = j.at("tau").get<double>();
    o.model_seed = j.at("model_seed").get<std::uint64_t>();
    return o;
  }

  train::Model build(const scene::DatasetHeader& h) const {
    train::ModelConfig cfg;
    cfg.backbone.height = h.height;
    cfg.backbone.width = h.width;
    cfg.backbone.num_classes = h.num_classes;
    cfg.backbone.feature_dim = feature_dim;
    cfg.smooth_hidden = smooth_hidden;
    cfg.tau = static_cast<float>(tau);
    cfg.seed = model_seed;
    return train::Model(cfg, train::MethodSpec::make(train::parse_method(method)));
  }
};

// Model options of a checkpoint come from the manifest next to it; explicit
// flags win.
ModelOptions checkpoint_options(const fs::path& checkpoint, const CLI::App& app, const ModelOptions& flags) {
  ModelOptions o = flags;
  const fs::path manifest = checkpoint.parent_path() / "manifest.json";
  if (fs::exists(manifest)) {
    const json m = read_json(manifest);
    if (m.contains("train")) o = ModelOptions::from_json(m["train"]["model"]);
  }
  if (app.count("--method")) o.method = flags.method;
  if (app.count("--feature-dim")) o.feature_dim = flags.feature_dim;
  if (app.count("--smooth-hidden")) o.smooth_hidden = flags.smooth_hidden;
  if (app.count("--tau")) o.tau = flags.tau;
  if (app.count("--model-seed")) o.model_seed = flags.model_seed;
  return o;
}

// Either a dataset file or a freshly generated split.
struct DataOptions {
  std::string data;
  std::string split = "sequence";
  int agents = 2;
  std::size_t samples = 400;
  std::uint64_t seed = 1000;

  void add(CLI::App& app, bool with_split) {
    app.add_option("--data", data, "Dataset file (otherwise one is generated)");
    if (with_split) app.add_option("--split", split, "Preset to generate: sequence or cross");
    app.add_option("--agents", agents, "Agents per generated sample");
    app.add_option("--samples", samples, "Generated samples");
    app.add_option("--data-seed", seed, "Seed of the generated split");
  }

  scene::Dataset load() const {
    if (!data.empty()) return scene::read_dataset(data);
    return scene::generate_dataset(scene::make_preset(split, agents), seed, samples);
  }

  json to_json() const {
    if (!data.empty()) return {{"data", data}, {"data_sha256", sha256_file(data)}};
    return {{"split", split}, {"agents", agents}, {"samples", samples}, {"data_seed", seed}};
  }
};

json metrics_json(const std::string& method, const train::Evaluation& e, int classes) {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  json iou = json::array();
  for (const auto& v : metrics::iou_per_class(e.confusion)) iou.push_back(v ? json(*v) : json(nullptr));
  return {{"method", method},
          {"samples", e.samples},
          {"mean_accuracy", num(e.mean_accuracy())},
          {"mean_iou", num(e.mean_iou())},
          {"class_names", metrics::default_class_names(classes)},
          {"class_iou", iou},
          {"confusion", e.confusion.counts},
          {"correspondence_accuracy", num(e.corr_final.rate())},
          {"correspondence_accuracy_raw", num(e.corr_raw.rate())},
          {"correspondence_accuracy_clean", num(e.corr_final_clean.rate())},
          {"correspondence_accuracy_raw_clean", num(e.corr_raw_clean.rate())}};
}

metrics::ResultRow row_from_json(const json& j) {
  metrics::ResultRow r;
  r.method = j.at("method").get<std::string>();
  auto num = [](const json& v) { return v.is_null() ? std::nan("") : v.get<double>(); };
  r.mean_accuracy = num(j.at("mean_accuracy"));
  r.mean_iou = num(j.at("mean_iou"));
  for (const auto& v : j.at("class_iou")) {
    r.class_iou.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
  }
  return r;
}

std::vector<std::string> class_names_of(const json& j) { return j.at("class_names").get<std::vector<std::string>>(); }

// --- images for dump ---

void write_ppm(const fs::path& path, int h, int w, const std::function<std::array<float, 3>(int, int)>& pixel) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (float v : pixel(y, x)) out.put(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    }
  }
}

void write_image(const fs::path& path, const scene::Image& img) {
  write_ppm(path, img.height, img.width, [&](int y, int x) {
    return std::array<float, 3>{img.at(0, y, x), img.at(1, y, x), img.at(2, y, x)};
  });
}

void write_labels(const fs::path& path, const std::vector<std::uint8_t>& labels, int h, int w) {
  write_ppm(path, h, w, [&](int y, int x) { return scene::class_color(labels[static_cast<std::size_t>(y) * w + x]); });
}

// `<subcommand> ... --config FILE` becomes the file's keys as flags placed
// right after the subcommand name, so later command-line flags win. Keys may
// sit at top level or in a [<subcommand>] section.
std::vector<std::string> expand_config(int argc, char** argv, const std::vector<std::string>& subcommands) {
  std::vector<std::string> args(argv + 1, argv + argc);
  auto sub = std::find_if(args.begin(), args.end(), [&](const std::string& a) {
    return std::find(subcommands.begin(), subcommands.end(), a) != subcommands.end();
  });
  if (sub == args.end()) return args;
  const std::string name = *sub;
  const auto sub_index = sub - args.begin();
  std::vector<std::string> files, rest;
  for (auto it = sub + 1; it != args.end(); ++it) {
    if (*it == "--config" && it + 1 != args.end()) {
      files.push_back(*++it);
    } else if (it->rfind("--config=", 0) == 0) {
      files.push_back(it->substr(9));
    } else {
      rest.push_back(*it);
    }
  }
  std::vector<std::string> out(args.begin(), args.begin() + sub_index + 1);
  for (const auto& file : files) {
    std::ifstream in(file);
    if (!in) throw CLI::FileError::Missing(file);
    for (const auto& item : CLI::ConfigINI().from_config(in)) {
      if (item.name.empty() || item.name == "++" || item.name == "--") continue;
      if (!item.parents.empty() && item.parents != std::vector<std::string>{name}) continue;
      for (const auto& v : item.inputs) out.push_back("--" + item.name + "=" + v);
    }
  }
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

// --- commands ---

struct GenCmd {
  std::string preset = "sequence";
  int agents = 2;
  std::uint64_t seed = 1;
  std::size_t samples = 2000;
  std::size_t first = 0;
  std::string out = "data.bin";
  std::string run = ".";

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("gen", "Generate a dataset");
    c->add_option("--preset", preset, "sequence or cross");
    c->add_option("--agents", agents, "Agents per sample");
    c->add_option("--seed", seed, "Dataset seed");
    c->add_option("--samples", samples, "Number of samples");
    c->add_option("--first-index", first, "Index of the first sample");
    c->add_option("--out", out, "Output file, relative to the run directory");
    c->add_option("--run", run, "Run directory");
    c->final_callback([this] { exec(); });
  }

  void exec() const {
    const auto dir = prepare_run(run);
    const auto path = under(dir, out);
    scene::write_dataset(path.string(), scene::generate_dataset(scene::make_preset(preset, agents), seed, samples, first));
    record(dir, "gen", {{"preset", preset}, {"agents", agents}, {"seed", seed}, {"samples", samples}, {"first_index", first}},
           {path});
    std::cout << "wrote " << samples << " samples to " << path.string() << "\n";
  }
};

struct TrainCmd {
  ModelOptions model;
  std::string data;
  std::string val;
  double val_fraction = 0.1;
  train::Hyperparams hp;
  double lr = 0.01;
  double momentum = 0.9;
  double w_seg = 1.0;
  double w_corr = 1.0;
  std::string run;

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("train", "Train one method");
    c->add_option("--method", model.method, "Method name")->required();
    c->add_option("--data", data, "Training dataset file")->required();
    c->add_option("--val", val, "Validation dataset file (otherwise a tail of --data)");
    c->add_option("--val-fraction", val_fraction, "Held-out tail fraction when --val is absent");
    c->add_option("--epochs", hp.epochs);
    c->add_option("--batch", hp.batch);
    c->add_option("--lr", lr);
    c->add_option("--momentum", momentum);
    c->add_option("--seed", hp.seed, "Shuffle seed");
    c->add_option("--w-seg", w_seg, "Segmentation loss weight");
    c->add_option("--w-corr", w_corr, "Correspondence loss weight");
    c->add_option("--run", run, "Run directory (default runs/<method>)");
    model.add(*c);
    c->final_callback([this] { exec(); });
  }

  void exec() {
    const auto method = train::parse_method(model.method);
    hp.lr = static_cast<float>(lr);
    hp.momentum = static_cast<float>(momentum);
    model.method = train::method_name(method);
    const auto dir = prepare_run(run.empty() ? "runs/" + model.method : run);
    scene::Dataset train_set = scene::read_dataset(data);
    scene::Dataset val_set;
    if (!val.empty()) {
      val_set = scene::read_dataset(val);
    } else {
      if (train_set.samples.size() < 2) throw ConfigError("need at least 2 samples to hold out validation data");
      auto held = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(train_set.samples.size())));
      held = std::clamp<std::size_t>(held, 1, train_set.samples.size() - 1);
      val_set.header = train_set.header;
      val_set.samples.assign(train_set.samples.end() - static_cast<std::ptrdiff_t>(held), train_set.samples.end());
      train_set.samples.resize(train_set.samples.size() - held);
    }
    auto m = model.build(train_set.header);
    train::Model trained(m.config(), train::MethodSpec::make(method, static_cast<float>(w_seg), static_cast<float>(w_corr)));
    train::FitOptions opts;
    opts.checkpoint_path = (dir / "model.ckpt").string();
    opts.log_path = (dir / "log.csv").string();
    opts.on_epoch = [](const train::EpochLog& row) { std::cout << train::format_log_row(row) << std::endl; };
    std::cout << train::log_header() << "\n";
    auto result = train::fit(trained, train_set, val_set, hp, opts);
    auto e = train::evaluate(trained, val_set);
    write_text(dir / "metrics_val.json", metrics_json(model.method, e, train_set.header.num_classes).dump(2) + "\n");
    json cfg = {{"model", model.to_json()},
                {"data", data},
                {"data_sha256", sha256_file(data)},
                {"val", val},
                {"val_fraction", val_fraction},
                {"train_samples", train_set.samples.size()},
                {"val_samples", val_set.samples.size()},
                {"epochs", hp.epochs},
                {"batch", hp.batch},
                {"lr", lr},
                {"momentum", momentum},
                {"seed", hp.seed},
                {"w_seg", w_seg},
                {"w_corr", w_corr},
                {"best_epoch", result.best_epoch}};
    record(dir, "train", cfg, {dir / "model.ckpt", dir / "log.csv", dir / "metrics_val.json"});
    std::cout << "best epoch " << result.best_epoch << ", val mIoU " << result.best_val_miou << "\n";
  }
};

struct EvalCmd {
  std::string checkpoint;
  ModelOptions model;
  DataOptions data;
  double drop = 0.0;
  std::string topology = "fully_connected";
  bool swarm = false;
  std::uint64_t swarm_seed = 1;
  std::string run;
  CLI::App* cmd = nullptr;

  void add(CLI::App& app) {
    cmd = app.add_subcommand("eval", "Evaluate a checkpoint inside the degraded region");
    cmd->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
    cmd->add_option("--method", model.method, "Method (default: from the run manifest)");
    data.add(*cmd, true);
    cmd->add_flag("--swarm", swarm, "Evaluate agent 0 through simulated rounds");
    cmd->add_option("--drop", drop, "Message drop probability (implies --swarm)");
    cmd->add_option("--topology", topology, "Swarm topology (implies --swarm)");
    cmd->add_option("--swarm-seed", swarm_seed, "Drop seed");
    cmd->add_option("--run", run, "Run directory (default: the checkpoint's directory)");
    model.add(*cmd);
    cmd->final_callback([this] { exec(); });
  }

  void exec() {
    const auto opts = checkpoint_options(checkpoint, *cmd, model);
    const auto dir = prepare_run(run.empty() ? fs::path(checkpoint).parent_path().string() : run);
    const auto ds = data.load();
    auto m = opts.build(ds.header);
    m.load(checkpoint);
    const bool use_swarm = swarm || cmd->count("--drop") || cmd->count("--topology");
    train::Evaluation e;
    json cfg = {{"checkpoint", checkpoint}, {"checkpoint_sha256", sha256_file(checkpoint)}, {"model", opts.to_json()},
                {"data", data.to_json()}};
    if (use_swarm) {
      swarm::SwarmConfig sc;
      sc.n_agents = ds.header.agents;
      sc.topology = swarm::parse_topology(topology);
      sc.drop_prob = drop;
      sc.seed = swarm_seed;
      e = swarm::evaluate_swarm(m, ds, sc);
      cfg["swarm"] = {{"topology", topology}, {"drop", drop}, {"seed", swarm_seed}};
    } else {
      e = train::evaluate(m, ds);
    }
    const std::string tag = data.data.empty() ? data.split : fs::path(data.data).stem().string();
    const auto base = dir / ("metrics_" + tag + (use_swarm ? "_swarm" : ""));
    const auto j = metrics_json(opts.method, e, ds.header.num_classes);
    write_text(base.string() + ".json", j.dump(2) + "\n");
    const auto row = row_from_json(j);
    const auto names = class_names_of(j);
    write_text(base.string() + ".csv", metrics::format_csv(std::span(&row, 1), names));
    record(dir, "eval_" + tag + (use_swarm ? "_swarm" : ""), cfg, {base.string() + ".json", base.string() + ".csv"});
    std::cout << metrics::format_table(std::span(&row, 1), names);
  }
};

struct SwarmCmd {
  std::string checkpoint;
  ModelOptions model;
  DataOptions data;
  int agents = 6;
  std::string topology = "fully_connected";
  double drop = 0.0;
  std::uint64_t seed = 1;
  std::size_t rounds = 10;
  std::string run = ".";
  CLI::App* cmd = nullptr;

  void add(CLI::App& app) {
    cmd = app.add_subcommand("swarm", "Simulate message-passing rounds");
    cmd->add_option("--agents", agents, "Agents in the swarm");
    cmd->add_option("--topology", topology, "fully_connected, ring or star");
    cmd->add_option("--drop", drop, "Per-message drop probability");
    cmd->add_option("--seed", seed, "Drop seed");
    cmd->add_option("--rounds", rounds, "Rounds (one sample each)");
    cmd->add_option("--checkpoint", checkpoint, "Checkpoint (otherwise untrained weights)");
    cmd->add_option("--method", model.method, "Method (default: from the run manifest, else MAIN)");
    cmd->add_option("--data", data.data, "Dataset with --agents agents per sample (otherwise cross preset)");
    cmd->add_option("--data-seed", data.seed, "Seed of the generated samples");
    cmd->add_option("--run", run, "Run directory");
    model.add(*cmd);
    cmd->final_callback([this] { exec(); });
  }

  void exec() {
    swarm::SwarmConfig sc;
    sc.n_agents = agents;
    sc.topology = swarm::parse_topology(topology);
    sc.drop_prob = drop;
    sc.seed = seed;
    sc.validate();
    data.split = "cross";
    data.agents = agents;
    data.samples = rounds;
    const auto ds = data.load();
    if (ds.samples.empty()) throw ConfigError("no samples to run");
    const auto opts = checkpoint.empty() ? model : checkpoint_options(checkpoint, *cmd, model);
    auto m = opts.build(ds.header);
    if (!checkpoint.empty()) m.load(checkpoint);
    const auto dir = prepare_run(run);
    std::vector<swarm::RoundStats> stats;
    metrics::Confusion conf(ds.header.num_classes);
    for (std::size_t i = 0; i < rounds; ++i) {
      const auto& s = ds.samples[i % ds.samples.size()];
      auto r = swarm::run_round(s, m, sc, static_cast<int>(i));
      conf += metrics::confusion(metrics::argmax_labels(r.outputs[0].logits), s.labels[0], s.degradation, conf.classes);
      stats.push_back(std::move(r.stats));
    }
    const auto report = swarm::bandwidth_report(stats);
    const auto table = swarm::format_bandwidth(report);
    write_text(dir / "swarm_messages.csv", swarm::stats_csv(stats));
    write_text(dir / "bandwidth.txt", table);
    json cfg = {{"agents", agents}, {"topology", topology}, {"drop", drop}, {"seed", seed}, {"rounds", rounds},
                {"checkpoint", checkpoint}, {"model", opts.to_json()}, {"data", data.to_json()},
                {"agent0_mean_iou", std::isnan(metrics::mean_iou(conf)) ? json(nullptr) : json(metrics::mean_iou(conf))}};
    record(dir, "swarm", cfg, {dir / "swarm_messages.csv", dir / "bandwidth.txt"});
    std::cout << table << "agent 0 mIoU in degraded region: " << metrics::mean_iou(conf) * 100.0 << "\n";
  }
};

struct ReportCmd {
  std::string runs = "runs";
  std::string metrics = "val";

  void add(CLI::App& app) {
    auto* c = app.add_subcommand("report", "Compare methods across run directories");
    c->add_option("--runs", runs, "Directory holding one run directory per method");
    c->add_option("--metrics", metrics, "Metrics tag: metrics_<tag>.json in each run (val, sequence, cross, ...)");
    c->final_callback([this] { exec(); });
  }

  void exec() const {
    std::map<int, metrics::ResultRow> rows;
    std::vector<std::string> names;
    if (!fs::is_directory(runs)) throw ConfigError("no such directory: " + runs);
    for (const auto& entry : fs::directory_iterator(runs)) {
      const auto file = entry.path() / ("metrics_" + metrics + ".json");
      if (!entry.is_directory() || !fs::exists(file)) continue;
      const auto j = read_json(file);
      auto row = row_from_json(j);
      const int order = static_cast<int>(train::parse_method(row.method));
      if (rows.count(order)) throw ConfigError("two runs for method " + row.method);
      names = class_names_of(j);
      rows[order] = std::move(row);
    }
    if (rows.empty()) throw ConfigError("no metrics_" + metrics + ".json found under " + runs);
    std::vector<metrics::ResultRow> ordered;
    for (auto& [k, r] : rows) ordered.push_back(r);
    const fs::path dir(runs);
    const auto table = metrics::format_table(ordered, names);
    write_text(dir / ("report_" + metrics + ".txt"), table);
    write_text(dir / ("report_" + metrics + ".csv"), metrics::format_csv(ordered, names));
    record(dir, "report_" + metrics, {{"metrics", metrics}, {"methods", ordered.size()}},
           {dir / ("report_" + metrics + ".txt"), dir / ("report_" + metrics + ".csv")});
    std::cout << table;
  }
};

struct DumpCmd {
  std::size_t sample = 0;
  std::string checkpoint;
  ModelOptions model;
  DataOptions data;
  std::string run = "dump";
  CLI::App* cmd = nullptr;

  void add(CLI::App& app) {
    cmd = app.add_subcommand("dump", "Write images of one sample for inspection");
    cmd->add_option("--sample", sample, "Sample index")->required();
    cmd->add_option("--checkpoint", checkpoint, "Checkpoint (otherwise untrained weights)");
    cmd->add_option("--method", model.method, "Method (default: from the run manifest, else MAIN)");
    data.add(*cmd, true);
    cmd->add_option("--run", run, "Output directory");
    model.add(*cmd);
    cmd->final_callback([this] { exec(); });
  }

  void exec() {
    if (data.data.empty()) data.samples = sample + 1;
    const auto ds = data.load();
    if (sample >= ds.samples.size()) throw ConfigError("sample index out of range");
    const auto opts = checkpoint.empty() ? model : checkpoint_options(checkpoint, *cmd, model);
    auto m = opts.build(ds.header);
    if (!checkpoint.empty()) m.load(checkpoint);
    const auto dir = prepare_run(run);
    const auto& s = ds.samples[sample];
    const int h = ds.header.height, w = ds.header.width;
    NoGradGuard guard;
    auto fwd = train::forward_method(s, m);
    std::vector<fs::path> files;
    auto add = [&](const std::string& name) { return files.emplace_back(dir / name); };

    write_image(add("degraded.ppm"), s.images[0]);
    write_ppm(add("degradation_mask.ppm"), h, w, [&](int y, int x) {
      const float v = s.degradation[static_cast<std::size_t>(y) * w + x] ? 1.0f : 0.0f;
      return std::array<float, 3>{v, v, v};
    });
    for (int a = 1; a < s.agents(); ++a) write_image(add("input_agent" + std::to_string(a) + ".ppm"), s.images[static_cast<std::size_t>(a)]);
    write_labels(add("labels.ppm"), s.labels[0], h, w);
    write_labels(add("output.ppm"), metrics::argmax_labels(fwd.logits), h, w);
    if (fwd.fusion) {
      const int stride = ds.header.stride;
      for (std::size_t j = 0; j < fwd.fusion->warped.size(); ++j) {
        // warped features decoded alone show what the helper contributes
        auto decoded = m.net().decode(fwd.fusion->warped[j].features);
        write_labels(add("warped_agent" + std::to_string(j + 1) + ".ppm"), metrics::argmax_labels(decoded), h, w);
      }
      const auto& src = fwd.fusion->selection.source;
      write_ppm(add("fused_source.ppm"), h, w, [&](int y, int x) {
        const int cell = (y / stride) * (w / stride) + x / stride;
        const auto v = src[static_cast<std::size_t>(cell)];
        if (v == fuse::kSelf) return std::array<float, 3>{0.2f, 0.2f, 0.2f};
        return scene::class_color(1 + (v - 1) % 4);
      });
    }
    record(dir, "dump", {{"sample", sample}, {"checkpoint", checkpoint}, {"model", opts.to_json()}, {"data", data.to_json()}},
           files);
    std::cout << "wrote " << files.size() << " images to " << dir.string() << "\n";
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"swarmfuse: collaborative segmentation through learned feature correspondences", "swarmfuse"};
  app.set_config("--config", "", "Key-value file with one [section] per subcommand; also accepted after the subcommand, flags win");
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  GenCmd gen;
  TrainCmd train_cmd;
  EvalCmd eval;
  SwarmCmd swarm_cmd;
  ReportCmd report;
  DumpCmd dump;
  gen.add(app);
  train_cmd.add(app);
  eval.add(app);
  swarm_cmd.add(app);
  report.add(app);
  dump.add(app);
  try {
    std::vector<std::string> names;
    for (const auto* sub : app.get_subcommands({})) names.push_back(sub->get_name());
    auto args = expand_config(argc, argv, names);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    const char* kind = dynamic_cast<const ConfigError*>(&e)        ? "config"
                       : dynamic_cast<const FormatError*>(&e)      ? "format"
                       : dynamic_cast<const DivergenceError*>(&e)  ? "divergence"
                       : dynamic_cast<const PlacementError*>(&e)   ? "placement"
                       : dynamic_cast<const DimensionError*>(&e)   ? "dimension"
                                                                    : "runtime";
    std::cerr << json{{"error", kind}, {"message", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
