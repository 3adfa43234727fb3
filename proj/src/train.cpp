#include "swarmfuse/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "swarmfuse/errors.hpp"
#include "swarmfuse/parallel.hpp"

namespace swarmfuse::train {

namespace {

backbone::BackboneConfig backbone_for(const backbone::BackboneConfig& base, Method m) {
  auto cfg = base;
  if (m == Method::InputStack) cfg.input_channels = 6;
  if (m == Method::FeatureStack) cfg.decoder_input = 2 * cfg.feature_dim;
  return cfg;
}

std::vector<std::int32_t> labels_of(std::span<const std::uint8_t> v) { return {v.begin(), v.end()}; }
std::vector<std::int32_t> labels_of(std::span<const std::uint16_t> v) { return {v.begin(), v.end()}; }

void require_agents(const scene::SceneSample& s, int n, const char* what) {
  if (s.agents() < n) throw ConfigError(std::string(what) + " needs at least " + std::to_string(n) + " agents");
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::Inpainting: return "Inpainting";
    case Method::InputStack: return "InputStack";
    case Method::FeatureStack: return "FeatureStack";
    case Method::ViewPooling: return "ViewPooling";
    case Method::NoSimLoss: return "NoSimLoss";
    case Method::NoSmoothing: return "NoSmoothing";
    case Method::OneHot: return "OneHot";
    case Method::MAIN: return "MAIN";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : kAllMethods) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError("unknown method '" + name + "'");
}

MethodSpec MethodSpec::make(Method m, float w_seg, float w_corr) {
  if (!(w_seg >= 0.0f) || !(w_corr >= 0.0f)) throw ConfigError("loss weights must be non-negative");
  return {m, w_seg, w_corr};
}

bool MethodSpec::builds_volume() const {
  return method == Method::MAIN || method == Method::NoSimLoss || method == Method::NoSmoothing ||
         method == Method::OneHot;
}

bool MethodSpec::uses_smoothing() const { return builds_volume() && method != Method::NoSmoothing; }

float MethodSpec::effective_corr_weight() const {
  return builds_volume() && method != Method::NoSimLoss ? w_corr : 0.0f;
}

Model::Model(ModelConfig config, MethodSpec method)
    : config_(std::move(config)), method_(method), net_(backbone_for(config_.backbone, method.method), config_.seed) {
  if (method_.uses_smoothing()) {
    smooth::SmoothingConfig sc;
    sc.channels = config_.backbone.grid_height() * config_.backbone.grid_width() + 1;
    sc.hidden = config_.smooth_hidden;
    sc.input_skip = config_.smooth_input_skip;
    sc.log_residual = config_.smooth_log_residual;
    smoother_.emplace(sc, config_.seed ^ 0x5eedULL);
  }
}

std::vector<NamedTensor> Model::parameters() const {
  auto out = net_.parameters();
  if (smoother_) {
    auto s = smoother_->parameters();
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

void Model::save(const std::string& path) const { save_checkpoint(path, parameters()); }

void Model::load(const std::string& path) {
  // extra tensors are fine: a NoSmoothing model can read a MAIN checkpoint
  assign_checkpoint(parameters(), load_checkpoint(path));
}

FusionOutput fuse_and_decode(const Model& model, const backbone::FeatureMap& own,
                             std::span<const backbone::FeatureMap> incoming, const ForwardOptions& options) {
  const auto& spec = model.method();
  if (!spec.builds_volume()) throw ConfigError(spec.name() + " does not fuse through similarity volumes");
  FusionOutput out;
  for (const auto& msg : incoming) {
    auto vol = correspond::build_volume(own.data, msg.data, model.config().tau, own.agent_id, msg.agent_id);
    correspond::SimilarityVolume used = vol;
    if (spec.uses_smoothing() && !options.bypass_smoothing) {
      const auto& input = spec.method == Method::OneHot ? smooth::one_hot_collapse(vol) : vol;
      used = model.smoother()->smooth_volume(input);
    }
    out.maps.push_back(fuse::to_correspondence_map(used));
    out.warped.push_back(fuse::warp_features(out.maps.back(), msg.data));
    out.normalized.push_back(std::move(vol));
    out.smoothed.push_back(std::move(used));
  }
  if (incoming.size() == 1) {
    out.selection = fuse::hard_select_pair(own.data, out.warped[0].features, out.maps[0], incoming[0].agent_id);
  } else {
    std::vector<fuse::Candidate> cands;
    for (std::size_t i = 0; i < incoming.size(); ++i) {
      cands.push_back({incoming[i].agent_id, &out.warped[i].features, &out.maps[i]});
    }
    out.selection = fuse::hard_select(own.data, cands);
  }
  out.logits = model.net().decode(out.selection.features);
  return out;
}

ForwardResult forward_method(const scene::SceneSample& sample, const Model& model, const ForwardOptions& options) {
  const auto& net = model.net();
  ForwardResult r;
  require_agents(sample, 1, "forward");
  auto encode = [&](int agent) { r.features.push_back(net.encode(sample.images[static_cast<std::size_t>(agent)], agent)); };
  switch (model.method().method) {
    case Method::Inpainting:
      encode(0);
      r.logits = net.decode(r.features[0].data);
      break;
    case Method::InputStack: {
      require_agents(sample, 2, "InputStack");
      std::array<Tensor, 2> parts{backbone::image_tensor(sample.images[0]), backbone::image_tensor(sample.images[1])};
      r.features.push_back({0, 0, net.encode(concat(parts, 1))});
      r.logits = net.decode(r.features[0].data);
      break;
    }
    case Method::FeatureStack: {
      require_agents(sample, 2, "FeatureStack");
      encode(0);
      encode(1);
      std::array<Tensor, 2> parts{r.features[0].data, r.features[1].data};
      r.logits = net.decode(concat(parts, 1));
      break;
    }
    case Method::ViewPooling: {
      require_agents(sample, 2, "ViewPooling");
      std::vector<Tensor> maps;
      for (int a = 0; a < sample.agents(); ++a) {
        encode(a);
        maps.push_back(r.features.back().data);
      }
      r.logits = net.decode(elementwise_max(maps).value);
      break;
    }
    default: {
      for (int a = 0; a < sample.agents(); ++a) encode(a);
      std::span<const backbone::FeatureMap> incoming(r.features.begin() + 1, r.features.end());
      if (incoming.empty()) {
        r.logits = net.decode(r.features[0].data);
      } else {
        r.fusion = fuse_and_decode(model, r.features[0], incoming, options);
        r.logits = r.fusion->logits;
      }
    }
  }
  return r;
}

LossResult total_loss(const scene::SceneSample& sample, const Model& model, AccessCounters* counters) {
  const auto& spec = model.method();
  LossResult out;
  out.forward = forward_method(sample, model);
  if (counters) ++counters->label_reads;
  Tensor seg = cross_entropy(out.forward.logits, labels_of(sample.labels[0]));
  out.seg = seg.item();
  out.total = scale(seg, spec.w_seg);

  const float wc = spec.effective_corr_weight();
  if (wc > 0.0f && out.forward.fusion) {
    const auto& fusion = *out.forward.fusion;
    const CrossEntropyOptions probs{true, std::nullopt};
    Tensor corr;
    for (std::size_t j = 0; j < fusion.normalized.size(); ++j) {
      if (counters) ++counters->correspondence_reads;
      const auto gt = labels_of(sample.correspondence[j]);
      Tensor term = cross_entropy(fusion.normalized[j].data, gt, probs);
      if (spec.uses_smoothing()) term = add(term, cross_entropy(fusion.smoothed[j].data, gt, probs));
      corr = corr.defined() ? add(corr, term) : term;
    }
    corr = scale(corr, 1.0f / static_cast<float>(fusion.normalized.size()));
    out.corr = corr.item();
    out.total = add(out.total, scale(corr, wc));
  }
  return out;
}

std::vector<std::uint8_t> clean_cells(const scene::SceneSample& sample, int stride) {
  const int h = sample.images[0].height, w = sample.images[0].width;
  const int gh = h / stride, gw = w / stride;
  std::vector<std::uint8_t> clean(static_cast<std::size_t>(gh) * gw, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (sample.degradation[static_cast<std::size_t>(y) * w + x]) {
        clean[static_cast<std::size_t>(y / stride) * gw + x / stride] = 0;
      }
    }
  }
  return clean;
}

Evaluation evaluate(const Model& model, const scene::Dataset& data, const ForwardOptions& options) {
  NoGradGuard guard;
  FlushDenormalsGuard ftz;
  const int classes = model.config().backbone.num_classes;
  const int stride = model.config().backbone.stride();
  std::vector<Evaluation> parts(data.samples.size());
  parallel_for(data.samples.size(), [&](std::size_t i) {
    const auto& s = data.samples[i];
    auto r = forward_method(s, model, options);
    auto& e = parts[i];
    e.confusion = metrics::confusion(metrics::argmax_labels(r.logits), s.labels[0], s.degradation, classes);
    if (r.fusion) {
      const auto clean = clean_cells(s, stride);
      for (std::size_t j = 0; j < r.fusion->maps.size(); ++j) {
        const auto raw = fuse::to_correspondence_map(r.fusion->normalized[j]);
        const auto& gt = s.correspondence[j];
        e.corr_final += metrics::correspondence_counts(r.fusion->maps[j].channel, gt);
        e.corr_raw += metrics::correspondence_counts(raw.channel, gt);
        e.corr_final_clean += metrics::correspondence_counts(r.fusion->maps[j].channel, gt, clean);
        e.corr_raw_clean += metrics::correspondence_counts(raw.channel, gt, clean);
      }
    }
  });
  Evaluation total;
  total.confusion = metrics::Confusion(classes);
  for (const auto& e : parts) {
    total.confusion += e.confusion;
    total.corr_final += e.corr_final;
    total.corr_raw += e.corr_raw;
    total.corr_final_clean += e.corr_final_clean;
    total.corr_raw_clean += e.corr_raw_clean;
  }
  total.samples = parts.size();
  return total;
}

std::string log_header() { return "epoch,seg_loss,corr_loss,val_mIoU,val_corr_acc"; }

std::string format_log_row(const EpochLog& row) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g", row.epoch, row.seg_loss, row.corr_loss, row.val_miou,
                row.val_corr_acc);
  return buf;
}

namespace {

std::vector<std::vector<float>> snapshot(const std::vector<NamedTensor>& params) {
  std::vector<std::vector<float>> out;
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void restore(const std::vector<NamedTensor>& params, const std::vector<std::vector<float>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto t = params[i].tensor;
    std::copy(values[i].begin(), values[i].end(), t.mutable_data().begin());
  }
}

void write_log(const std::string& path, const std::vector<EpochLog>& log) {
  if (path.empty()) return;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ConfigError("cannot write training log " + path);
  f << log_header() << '\n';
  for (const auto& row : log) f << format_log_row(row) << '\n';
}

}  // namespace

FitResult fit(Model& model, const scene::Dataset& train, const scene::Dataset& val, const Hyperparams& hp,
              const FitOptions& options) {
  if (train.samples.empty()) throw ConfigError("training set is empty");
  if (hp.epochs < 1 || hp.batch < 1) throw ConfigError("epochs and batch must be positive");
  FlushDenormalsGuard ftz;
  const auto params = model.parameters();
  MomentumSgd opt(hp.lr, hp.momentum);
  Rng rng(hp.seed);
  FitResult result;
  result.best_val_miou = -1.0;
  auto best = snapshot(params);

  auto diverge = [&](const std::string& why) {
    restore(params, best);
    if (!options.checkpoint_path.empty()) model.save(options.checkpoint_path);
    write_log(options.log_path, result.log);
    throw DivergenceError(why);
  };

  std::vector<std::size_t> order(train.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= hp.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double seg_sum = 0.0, corr_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hp.batch));
      for (auto p : params) p.tensor.zero_grad();
      for (std::size_t k = start; k < end; ++k) {
        auto loss = total_loss(train.samples[order[k]], model, &result.counters);
        if (!std::isfinite(loss.total.item())) {
          diverge("non-finite loss in epoch " + std::to_string(epoch) + " at sample " + std::to_string(order[k]));
        }
        loss.total.backward();
        seg_sum += loss.seg;
        corr_sum += loss.corr;
      }
      for (const auto& p : params) {
        if (!all_finite(p.tensor.grad())) diverge("non-finite gradient for " + p.name + " in epoch " + std::to_string(epoch));
      }
      opt.step(params, 1.0f / static_cast<float>(end - start));
    }
    EpochLog row;
    row.epoch = epoch;
    row.seg_loss = seg_sum / static_cast<double>(order.size());
    row.corr_loss = corr_sum / static_cast<double>(order.size());
    if (!val.samples.empty()) {
      auto ev = evaluate(model, val);
      row.val_miou = ev.mean_iou();
      row.val_corr_acc = ev.corr_final.total ? ev.corr_final.rate() : 0.0;
    }
    result.log.push_back(row);
    if (row.val_miou > result.best_val_miou || val.samples.empty()) {
      result.best_val_miou = row.val_miou;
      result.best_epoch = epoch;
      best = snapshot(params);
      if (!options.checkpoint_path.empty()) model.save(options.checkpoint_path);
    }
    write_log(options.log_path, result.log);
    if (options.on_epoch) options.on_epoch(row);
  }
  restore(params, best);
  return result;
}

}  // namespace swarmfuse::train
