#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hmdrn/checkpoint.hpp"
#include "hmdrn/data.hpp"
#include "hmdrn/model.hpp"

namespace hmdrn {

struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One N-way K-shot task: paths only, decoding happens at tensor assembly.
// Support and query sets are disjoint by construction.
struct Episode {
  std::size_t way = 0, shot = 0, queries_per_class = 0;
  std::vector<fs::path> support_paths;  // class-major, shot order
  std::vector<fs::path> query_paths;    // class-major
  std::vector<std::size_t> class_ids;   // split-level class index per way slot

  EpisodeShape shape() const { return {way, shot, queries_per_class}; }
};

inline Episode sample_episode(const SplitIndex& split, std::size_t way,
                              std::size_t shot, std::size_t queries,
                              Rng& rng) {
  if (split.size() < way)
    throw TrainError("sample_episode: split has " +
                     std::to_string(split.size()) + " classes, need " +
                     std::to_string(way));
  std::vector<std::size_t> class_ids(split.size());
  for (std::size_t i = 0; i < class_ids.size(); ++i) class_ids[i] = i;
  rng.shuffle(class_ids.begin(), class_ids.end());
  class_ids.resize(way);

  Episode ep;
  ep.way = way;
  ep.shot = shot;
  ep.queries_per_class = queries;
  ep.class_ids = class_ids;
  std::vector<std::vector<fs::path>> query_blocks(way);
  for (std::size_t c = 0; c < way; ++c) {
    const auto& images = split[class_ids[c]].images;
    if (images.size() < shot + queries)
      throw TrainError("sample_episode: class '" + split[class_ids[c]].name +
                       "' has " + std::to_string(images.size()) +
                       " images, need " + std::to_string(shot + queries));
    std::vector<std::size_t> ids(images.size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
    rng.shuffle(ids.begin(), ids.end());
    for (std::size_t k = 0; k < shot; ++k)
      ep.support_paths.push_back(images[ids[k]]);
    for (std::size_t q = 0; q < queries; ++q)
      query_blocks[c].push_back(images[ids[shot + q]]);
  }
  for (auto& block : query_blocks)
    for (auto& p : block) ep.query_paths.push_back(std::move(p));
  return ep;
}

// Cosine annealing with warm restarts every `stage_length` epochs:
// lr(t) = lr_min + (lr_init - lr_min)/2 * (1 + cos(pi * (t mod T) / T)).
inline double lr_schedule(std::size_t epoch, double lr_init,
                          std::size_t stage_length, double lr_min = 0.0) {
  if (stage_length == 0) return lr_init;
  const double t = double(epoch % stage_length);
  return lr_min + 0.5 * (lr_init - lr_min) *
                      (1.0 + std::cos(M_PI * t / double(stage_length)));
}

// One Nesterov step on a single parameter buffer:
// g = grad + wd*theta; v = mu*v + g; theta -= lr*(g + mu*v).
template <typename T>
void sgd_step(std::vector<T>& theta, const std::vector<T>& grad,
              std::vector<T>& velocity, T lr, T momentum, T weight_decay) {
  if (velocity.size() != theta.size()) velocity.assign(theta.size(), T(0));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const T g = (i < grad.size() ? grad[i] : T(0)) + weight_decay * theta[i];
    velocity[i] = momentum * velocity[i] + g;
    theta[i] -= lr * (g + momentum * velocity[i]);
  }
}

// Optimizer over a model's learnable parameters. Weight decay skips the
// fusion scalars.
template <typename T>
struct SgdOptimizer {
  T momentum, weight_decay;
  std::vector<std::vector<T>> velocity;
  std::vector<bool> decayed;

  void attach(const ParamList<T>& learnable) {
    velocity.assign(learnable.size(), {});
    decayed.clear();
    for (const auto& p : learnable)
      decayed.push_back(p.name.rfind("fusion.", 0) != 0);
  }

  void step(ParamList<T>& learnable, T lr) {
    static const std::vector<T> kNoGrad;
    for (std::size_t i = 0; i < learnable.size(); ++i) {
      auto& t = learnable[i].tensor;
      const auto& g = t.has_grad() ? t.grad_view() : kNoGrad;
      sgd_step(t.values(), g, velocity[i], lr, momentum,
               decayed[i] ? weight_decay : T(0));
    }
  }
};

struct TrainConfig {
  BackboneKind backbone = BackboneKind::Conv4;
  Variant variant = Variant::Full;
  MtfemConfig mtfem;
  Conv4Config conv4;
  ResNet12Config resnet;
  std::size_t way = 0;  // 0: backbone default (30 for conv4, 10 for resnet12)
  std::size_t shot = 5;
  std::size_t train_queries = 10;
  std::size_t epochs = 1200;
  std::size_t episodes_per_epoch = 100;
  double lr_init = 0.1;
  double lr_min = 0.0;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t stage_length = 400;
  std::size_t val_interval = 20;
  std::size_t val_tasks = 200;
  std::size_t val_way = 5, val_shot = 1, val_queries = 15;
  std::size_t image_size = 84;
  std::uint64_t seed = 0;
  AugmentConfig augment;

  std::size_t effective_way() const {
    if (way != 0) return way;
    return backbone == BackboneKind::Conv4 ? 30 : 10;
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.backbone = backbone;
    m.variant = variant;
    m.mtfem = mtfem;
    m.conv4 = conv4;
    m.resnet = resnet;
    return m;
  }
};

struct EvalResult {
  double mean_accuracy = 0;
  double ci95 = 0;
  std::size_t n_tasks = 0;
};

inline EvalResult summarize_accuracies(const std::vector<double>& accs) {
  if (accs.size() < 2)
    throw TrainError("evaluate: need at least two tasks for an interval");
  double mean = 0;
  for (double a : accs) mean += a;
  mean /= double(accs.size());
  double ss = 0;
  for (double a : accs) ss += (a - mean) * (a - mean);
  const double stddev = std::sqrt(ss / double(accs.size() - 1));
  return {mean, 1.96 * stddev / std::sqrt(double(accs.size())),
          accs.size()};
}

// Assembles one episode into a [N*(K+M),3,S,S] tensor. The augment rng is
// used only when a training-path augmentation config is supplied.
template <typename T>
Tensor<T> episode_tensor(const Episode& ep, std::size_t image_size,
                         const ChannelStats& stats,
                         const AugmentConfig* augment, Rng* rng) {
  const EpisodeShape shape = ep.shape();
  Tensor<T> images(Shape{shape.total(), 3, image_size, image_size});
  std::size_t slot = 0;
  auto emit = [&](const fs::path& path) {
    const Image raw = read_ppm(path);
    Tensor<T> t = augment ? augment_train<T>(raw, image_size, *rng, stats,
                                             *augment)
                          : preprocess_eval<T>(raw, image_size, stats);
    std::copy(t.values().begin(), t.values().end(),
              images.data() + slot * t.size());
    ++slot;
  };
  for (const auto& p : ep.support_paths) emit(p);
  for (const auto& p : ep.query_paths) emit(p);
  return images;
}

// Mean accuracy and 95% interval over `n_tasks` independently seeded tasks.
// Task t draws from Rng::derive(seed, t), so results do not depend on
// evaluation order.
template <typename T>
EvalResult evaluate(Model<T>& model, const SplitIndex& split,
                    std::size_t n_tasks, std::size_t way, std::size_t shot,
                    std::size_t queries, std::uint64_t seed,
                    const ChannelStats& stats, std::size_t image_size) {
  std::vector<double> accs(n_tasks);
  for (std::size_t t = 0; t < n_tasks; ++t) {
    Rng rng = Rng::derive(seed, t);
    Episode ep = sample_episode(split, way, shot, queries, rng);
    auto images = episode_tensor<T>(ep, image_size, stats, nullptr, nullptr);
    auto outcome = model.classify_episode(images, ep.shape(), false);
    accs[t] = outcome.accuracy;
  }
  return summarize_accuracies(accs);
}

struct TrainResult {
  std::vector<nlohmann::json> records;  // one per epoch plus one per validation
  double best_val_accuracy = 0;
  std::uint32_t best_epoch = 0;
  bool has_best = false;
};

// Meta-training loop: episodes_per_epoch tasks per epoch, one optimizer step
// per task, cosine schedule with warm restarts, periodic validation keeping
// the best checkpoint. All randomness is derived from (seed, epoch, episode).
template <typename T>
TrainResult train(const TrainConfig& cfg, const DatasetIndex& data,
                  Checkpoint<T>& best_out,
                  const std::function<void(const nlohmann::json&)>& on_record =
                      nullptr,
                  Model<T>* resume_from = nullptr,
                  std::uint32_t first_epoch = 0) {
  const ChannelStats stats = compute_channel_stats(data.train);
  Rng init_rng = Rng::derive(cfg.seed, 0x1417);
  Model<T> model = resume_from
                       ? std::move(*resume_from)
                       : Model<T>::init(cfg.model_config(), init_rng);
  ParamList<T> all_params;
  model.collect(all_params);
  ParamList<T> learnable;
  for (auto& p : all_params)
    if (p.learnable) learnable.push_back(p);

  SgdOptimizer<T> opt;
  opt.momentum = T(cfg.momentum);
  opt.weight_decay = T(cfg.weight_decay);
  opt.attach(learnable);

  TrainResult result;
  auto record = [&](nlohmann::json j) {
    if (on_record) on_record(j);
    result.records.push_back(std::move(j));
  };
  auto fusion_state = [&](nlohmann::json& j) {
    j["w1"] = double(model.fusion.w1.item());
    j["w2"] = double(model.fusion.w2.item());
    j["tau"] = double(model.fusion.tau.item());
  };

  const std::size_t way = cfg.effective_way();
  for (std::uint32_t epoch = first_epoch; epoch < first_epoch + cfg.epochs;
       ++epoch) {
    const double lr = lr_schedule(epoch, cfg.lr_init, cfg.stage_length,
                                  cfg.lr_min);
    double loss_sum = 0, acc_sum = 0;
    for (std::size_t e = 0; e < cfg.episodes_per_epoch; ++e) {
      Rng rng = Rng::derive(cfg.seed, 0xE915, epoch, e);
      Episode ep =
          sample_episode(data.train, way, cfg.shot, cfg.train_queries, rng);
      auto images =
          episode_tensor<T>(ep, cfg.image_size, stats, &cfg.augment, &rng);
      for (auto& p : learnable) p.tensor.zero_grad();
      GradTape<T> tape;
      auto outcome = model.classify_episode(images, ep.shape(), true, &rng);
      const double loss = double(outcome.loss.item());
      if (!std::isfinite(loss))
        throw TrainError("non-finite loss at epoch " + std::to_string(epoch) +
                         " episode " + std::to_string(e));
      backward(outcome.loss, tape);
      opt.step(learnable, T(lr));
      loss_sum += loss;
      acc_sum += outcome.accuracy;
    }
    nlohmann::json j{{"type", "epoch"},
                     {"epoch", epoch},
                     {"lr", lr},
                     {"train_loss", loss_sum / double(cfg.episodes_per_epoch)},
                     {"train_acc", acc_sum / double(cfg.episodes_per_epoch)}};
    fusion_state(j);
    record(std::move(j));

    const bool last = epoch + 1 == first_epoch + cfg.epochs;
    if ((epoch + 1) % cfg.val_interval == 0 || last) {
      EvalResult val = evaluate(model, data.val, cfg.val_tasks, cfg.val_way,
                                cfg.val_shot, cfg.val_queries,
                                Rng::derive(cfg.seed, 0x7A1).next_u64(), stats,
                                cfg.image_size);
      const bool best = !result.has_best ||
                        val.mean_accuracy > result.best_val_accuracy;
      if (best) {
        best_out = make_checkpoint(model, epoch, val.mean_accuracy, cfg.seed);
        result.best_val_accuracy = val.mean_accuracy;
        result.best_epoch = epoch;
        result.has_best = true;
      }
      nlohmann::json v{{"type", "val"},
                       {"epoch", epoch},
                       {"val_acc", val.mean_accuracy},
                       {"ci95", val.ci95},
                       {"n_tasks", val.n_tasks},
                       {"best", best}};
      fusion_state(v);
      record(std::move(v));
    }
  }
  return result;
}

}  // namespace hmdrn
