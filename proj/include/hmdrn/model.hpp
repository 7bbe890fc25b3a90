#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "hmdrn/backbone.hpp"
#include "hmdrn/clarm.hpp"
#include "hmdrn/mtfem.hpp"
#include "hmdrn/scoring.hpp"

namespace hmdrn {

enum class BackboneKind { Conv4, ResNet12 };

// The seven ablation rows. Level 1 is the last-layer feature map, level 2 the
// penultimate one; non-baseline variants reconstruct queries from support
// pools at their enabled levels.
enum class Variant {
  Baseline,
  R1,
  R2,
  MtfemR1,
  MtfemR2,
  Clarm,
  Full,
};

inline constexpr std::array<Variant, 7> kAllVariants = {
    Variant::Baseline, Variant::R1,    Variant::R2,  Variant::MtfemR1,
    Variant::MtfemR2,  Variant::Clarm, Variant::Full};

inline bool variant_uses_mtfem(Variant v) {
  return v == Variant::MtfemR1 || v == Variant::MtfemR2 || v == Variant::Full;
}
inline bool variant_uses_level1(Variant v) {
  return v == Variant::R1 || v == Variant::MtfemR1 || v == Variant::Clarm ||
         v == Variant::Full;
}
inline bool variant_uses_level2(Variant v) {
  return v == Variant::R2 || v == Variant::MtfemR2 || v == Variant::Clarm ||
         v == Variant::Full;
}

inline const char* variant_id(Variant v) {
  switch (v) {
    case Variant::Baseline: return "baseline";
    case Variant::R1: return "r1";
    case Variant::R2: return "r2";
    case Variant::MtfemR1: return "mtfem_r1";
    case Variant::MtfemR2: return "mtfem_r2";
    case Variant::Clarm: return "clarm";
    case Variant::Full: return "full";
  }
  return "?";
}

inline const char* variant_display(Variant v) {
  switch (v) {
    case Variant::Baseline: return "Baseline (ProtoNet)";
    case Variant::R1: return "(R1)";
    case Variant::R2: return "(R2)";
    case Variant::MtfemR1: return "(MTFEM+R1)";
    case Variant::MtfemR2: return "(MTFEM+R2)";
    case Variant::Clarm: return "CLARM(R1+R2)";
    case Variant::Full: return "(MTFEM+CLARM)";
  }
  return "?";
}

inline Variant variant_from_id(const std::string& id) {
  for (Variant v : kAllVariants)
    if (id == variant_id(v)) return v;
  throw ShapeError("unknown variant: " + id);
}

inline const char* backbone_id(BackboneKind k) {
  return k == BackboneKind::Conv4 ? "conv4" : "resnet12";
}

inline BackboneKind backbone_from_id(const std::string& id) {
  if (id == "conv4") return BackboneKind::Conv4;
  if (id == "resnet12") return BackboneKind::ResNet12;
  throw ShapeError("unknown backbone: " + id);
}

struct ModelConfig {
  BackboneKind backbone = BackboneKind::Conv4;
  Variant variant = Variant::Full;
  MtfemConfig mtfem;
  Conv4Config conv4;
  ResNet12Config resnet;

  std::size_t level1_width() const {
    return backbone == BackboneKind::Conv4 ? conv4.channels
                                           : resnet.channels.back();
  }
  std::size_t level2_width() const {
    return backbone == BackboneKind::Conv4
               ? conv4.channels
               : resnet.channels[resnet.channels.size() - 2];
  }
};

// Episode image layout: all N*K support images first (class-major, shot
// order), then all N*M query images (class-major). Query labels are the
// class-local indices 0..N-1.
struct EpisodeShape {
  std::size_t way, shot, queries_per_class;
  std::size_t support_count() const { return way * shot; }
  std::size_t query_count() const { return way * queries_per_class; }
  std::size_t total() const { return support_count() + query_count(); }
  std::vector<int> query_labels() const {
    std::vector<int> labels(query_count());
    for (std::size_t i = 0; i < labels.size(); ++i)
      labels[i] = int(i / queries_per_class);
    return labels;
  }
};

template <typename T>
struct EpisodeOutcome {
  Tensor<T> scores;      // raw fused similarities, [N*M, N]
  Tensor<T> normalized;  // row-wise softmax of scores
  Tensor<T> loss;        // scalar
  double accuracy = 0;
};

template <typename T>
struct Model {
  ModelConfig cfg;
  std::optional<Conv4<T>> conv4;
  std::optional<ResNet12<T>> resnet;
  std::optional<Mtfem<T>> mtfem1, mtfem2;
  std::optional<ClarmLevel<T>> clarm1, clarm2;
  FusionParams<T> fusion;

  static Model init(const ModelConfig& cfg, Rng& rng) {
    Model m;
    m.cfg = cfg;
    if (cfg.backbone == BackboneKind::Conv4)
      m.conv4 = Conv4<T>::init(cfg.conv4, rng);
    else
      m.resnet = ResNet12<T>::init(cfg.resnet, rng);
    if (variant_uses_mtfem(cfg.variant)) {
      if (variant_uses_level1(cfg.variant))
        m.mtfem1 = Mtfem<T>::init(cfg.mtfem, cfg.level1_width(), rng);
      if (variant_uses_level2(cfg.variant))
        m.mtfem2 = Mtfem<T>::init(cfg.mtfem, cfg.level2_width(), rng);
    }
    if (variant_uses_level1(cfg.variant))
      m.clarm1 = ClarmLevel<T>::init(cfg.level1_width(), rng);
    if (variant_uses_level2(cfg.variant))
      m.clarm2 = ClarmLevel<T>::init(cfg.level2_width(), rng);
    m.fusion = FusionParams<T>::init();
    return m;
  }

  FeatureLevels<T> backbone_forward(const Tensor<T>& images, bool training,
                                    Rng* rng) {
    return conv4 ? conv4->forward(images, training)
                 : resnet->forward(images, training, rng);
  }

  // Runs one episode end to end: backbone, optional enhancement, per-level
  // reconstruction, distance fusion, loss and top-1 accuracy.
  EpisodeOutcome<T> classify_episode(const Tensor<T>& images,
                                     const EpisodeShape& shape, bool training,
                                     Rng* rng = nullptr,
                                     MaskTrace<T>* trace = nullptr) {
    if (images.dim(0) != shape.total())
      throw ShapeError("classify_episode: image count does not match shape");
    const std::size_t n = shape.way, k = shape.shot;
    const std::size_t nq = shape.query_count();
    const std::vector<int> labels = shape.query_labels();
    FeatureLevels<T> fl = backbone_forward(images, training, rng);

    Tensor<T> scores;
    if (cfg.variant == Variant::Baseline) {
      auto pooled = [&](std::size_t i) {
        return mean_rows(flatten_to_sequence(select_batch(fl.f_high, i)));
      };
      std::vector<std::vector<Tensor<T>>> support(n);
      for (std::size_t c = 0; c < n; ++c)
        for (std::size_t s = 0; s < k; ++s)
          support[c].push_back(pooled(c * k + s));
      std::vector<Tensor<T>> queries;
      for (std::size_t i = 0; i < nq; ++i)
        queries.push_back(pooled(shape.support_count() + i));
      scores = protonet_score(support, queries);
    } else {
      const bool use1 = variant_uses_level1(cfg.variant);
      const bool use2 = variant_uses_level2(cfg.variant);
      Tensor<T> d1, d2;
      if (use1)
        d1 = level_distances(fl.f_high, *clarm1,
                             mtfem1 ? &*mtfem1 : nullptr, shape, trace);
      if (use2)
        d2 = level_distances(fl.f_mid, *clarm2,
                             mtfem2 ? &*mtfem2 : nullptr, shape, trace);
      if (use1 && use2)
        scores = neg(mul_scalar(
            add(mul_scalar(d1, fusion.w1), mul_scalar(d2, fusion.w2)),
            fusion.tau));
      else if (use1)
        scores = neg(mul_scalar(mul_scalar(d1, fusion.w1), fusion.tau));
      else
        scores = neg(mul_scalar(mul_scalar(d2, fusion.w2), fusion.tau));
    }

    EpisodeOutcome<T> out;
    out.scores = scores;
    out.normalized = normalize_scores(scores);
    out.loss = episode_loss(scores, labels);
    out.accuracy = top1_accuracy(scores, labels);
    return out;
  }

  void collect(ParamList<T>& out) {
    if (conv4) conv4->collect(out, "conv4");
    if (resnet) resnet->collect(out, "resnet12");
    if (mtfem1) mtfem1->collect(out, "mtfem1");
    if (mtfem2) mtfem2->collect(out, "mtfem2");
    if (clarm1) clarm1->collect(out, "clarm1");
    if (clarm2) clarm2->collect(out, "clarm2");
    fusion.collect(out, "fusion");
  }

  std::vector<Tensor<T>> learnable_params() {
    ParamList<T> all;
    collect(all);
    std::vector<Tensor<T>> out;
    for (auto& p : all)
      if (p.learnable) out.push_back(p.tensor);
    return out;
  }

 private:
  // [N*M, N] matrix of reconstruction distances for one feature level.
  Tensor<T> level_distances(const Tensor<T>& maps, const ClarmLevel<T>& level,
                            const Mtfem<T>* enhancer,
                            const EpisodeShape& shape, MaskTrace<T>* trace) {
    const std::size_t n = shape.way, k = shape.shot;
    const std::size_t nq = shape.query_count();
    std::vector<std::vector<Tensor<T>>> support(n);
    for (std::size_t c = 0; c < n; ++c)
      for (std::size_t s = 0; s < k; ++s) {
        auto seq = flatten_to_sequence(select_batch(maps, c * k + s));
        support[c].push_back(enhancer ? enhancer->forward(seq, false) : seq);
      }
    std::vector<Tensor<T>> queries;
    for (std::size_t i = 0; i < nq; ++i) {
      auto seq = flatten_to_sequence(
          select_batch(maps, shape.support_count() + i));
      queries.push_back(
          enhancer ? enhancer->forward(seq, true, i == 0 ? trace : nullptr)
                   : seq);
    }
    auto recon = clarm_level_forward(level, support, queries);
    std::vector<Tensor<T>> cells;
    cells.reserve(nq * n);
    for (std::size_t i = 0; i < nq; ++i)
      for (std::size_t c = 0; c < n; ++c)
        cells.push_back(recon_distance(recon.query_values[i],
                                       recon.reconstructions[c][i]));
    return stack_scalars(cells, nq, n);
  }
};

}  // namespace hmdrn
