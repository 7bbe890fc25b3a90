#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hmdrn/ops.hpp"
#include "hmdrn/rng.hpp"
#include "hmdrn/tensor.hpp"

namespace hmdrn {

// Named parameter handle; `learnable` distinguishes optimizer targets from
// persisted buffers (batch-norm running statistics).
template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool learnable = true;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

// Per-image feature maps from the two deepest backbone stages. f_mid is the
// input of the stage that produces f_high and has twice its spatial side at
// the default 84x84 input.
template <typename T>
struct FeatureLevels {
  Tensor<T> f_high;  // [B,C1,h1,w1]
  Tensor<T> f_mid;   // [B,C2,h2,w2]
};

// [C,h,w] -> [h*w, C] with row-major spatial order.
template <typename T>
Tensor<T> flatten_to_sequence(const Tensor<T>& map) {
  if (map.rank() != 3) throw ShapeError("flatten_to_sequence: expected [C,h,w]");
  const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2);
  return transpose2d(reshape(map, {c, h * w}));
}

template <typename T>
Tensor<T> unflatten_from_sequence(const Tensor<T>& seq, std::size_t h,
                                  std::size_t w) {
  if (seq.rank() != 2 || seq.dim(0) != h * w)
    throw ShapeError("unflatten_from_sequence: row count != h*w");
  return reshape(transpose2d(seq), {seq.dim(1), h, w});
}

template <typename T>
struct BatchNorm2d {
  Tensor<T> gamma, beta, running_mean, running_var;

  static BatchNorm2d init(std::size_t channels) {
    BatchNorm2d bn;
    bn.gamma = Tensor<T>::full({channels}, T(1));
    bn.beta = Tensor<T>::zeros({channels});
    bn.running_mean = Tensor<T>::zeros({channels});
    bn.running_var = Tensor<T>::full({channels}, T(1));
    bn.gamma.set_requires_grad(true);
    bn.beta.set_requires_grad(true);
    return bn;
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) {
    return batch_norm2d(x, gamma, beta, running_mean, running_var, training);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", gamma, true});
    out.push_back({prefix + ".beta", beta, true});
    out.push_back({prefix + ".running_mean", running_mean, false});
    out.push_back({prefix + ".running_var", running_var, false});
  }
};

namespace detail {

template <typename T>
Tensor<T> he_conv_weight(Rng& rng, std::size_t out_c, std::size_t in_c,
                         std::size_t k) {
  const T stddev = std::sqrt(T(2) / static_cast<T>(in_c * k * k));
  auto w = Tensor<T>::normal(rng, {out_c, in_c, k, k}, T(0), stddev);
  w.set_requires_grad(true);
  return w;
}

}  // namespace detail

// Zeroes contiguous square regions seeded by Bernoulli-drawn centers and
// rescales survivors by count_total/count_kept. Identity in eval mode or at
// keep_prob >= 1. The mask is constant with respect to the tape.
template <typename T>
Tensor<T> drop_block(const Tensor<T>& x, std::size_t block_size, T keep_prob,
                     bool training, Rng& rng) {
  if (x.rank() != 4) throw ShapeError("drop_block: expected [B,C,H,W]");
  const std::size_t h = x.dim(2), w = x.dim(3);
  if (block_size % 2 == 0) throw ShapeError("drop_block: block size must be odd");
  if (block_size > h || block_size > w)
    throw ShapeError("drop_block: block exceeds spatial extent");
  if (!training || keep_prob >= T(1)) return x;

  const std::size_t b = x.dim(0), c = x.dim(1);
  const std::size_t vh = h - block_size + 1, vw = w - block_size + 1;
  const double gamma = (1.0 - double(keep_prob)) /
                       double(block_size * block_size) * double(h * w) /
                       double(vh * vw);

  Tensor<T> mask = Tensor<T>::full(x.shape(), T(1));
  std::size_t kept = 0;
  for (std::size_t p = 0; p < b * c; ++p) {
    T* plane = mask.data() + p * h * w;
    for (std::size_t ci = 0; ci < vh; ++ci)
      for (std::size_t cj = 0; cj < vw; ++cj)
        if (rng.bernoulli(gamma)) {
          for (std::size_t i = ci; i < ci + block_size; ++i)
            for (std::size_t j = cj; j < cj + block_size; ++j)
              plane[i * w + j] = T(0);
        }
  }
  for (const T v : mask.values()) kept += (v != T(0));
  const T scl = kept == 0 ? T(0)
                          : static_cast<T>(double(mask.size()) / double(kept));
  for (auto& v : mask.values()) v *= scl;
  return mul(x, mask);
}

struct Conv4Config {
  std::size_t channels = 64;
  std::size_t blocks = 4;  // >= 2; smaller values are a test hook
};

// Stacked [conv3x3 -> batchnorm -> relu -> maxpool2x2] blocks. The outputs of
// the final two blocks form the dual-level features.
template <typename T>
struct Conv4 {
  struct Block {
    Tensor<T> w;
    BatchNorm2d<T> bn;
  };

  Conv4Config cfg;
  std::vector<Block> blocks;

  static Conv4 init(const Conv4Config& cfg, Rng& rng) {
    if (cfg.blocks < 2) throw ShapeError("conv4: needs at least two blocks");
    Conv4 net;
    net.cfg = cfg;
    std::size_t in_c = 3;
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
      Block blk;
      blk.w = detail::he_conv_weight<T>(rng, cfg.channels, in_c, 3);
      blk.bn = BatchNorm2d<T>::init(cfg.channels);
      net.blocks.push_back(std::move(blk));
      in_c = cfg.channels;
    }
    return net;
  }

  FeatureLevels<T> forward(const Tensor<T>& images, bool training) {
    if (images.rank() != 4 || images.dim(1) != 3)
      throw ShapeError("conv4: expected [B,3,H,W] input");
    std::size_t side = std::min(images.dim(2), images.dim(3));
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
      if (side < 2)
        throw ShapeError("conv4: input too small for " +
                         std::to_string(cfg.blocks) + " halvings");
      side /= 2;
    }
    Tensor<T> x = images;
    Tensor<T> mid;
    for (std::size_t i = 0; i < cfg.blocks; ++i) {
      x = max_pool2d(relu(blocks[i].bn.forward(conv2d(x, blocks[i].w, 1, 1),
                                               training)),
                     2);
      if (i + 2 == cfg.blocks) mid = x;
    }
    return {x, mid};
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = prefix + ".block" + std::to_string(i);
      out.push_back({p + ".conv.w", blocks[i].w, true});
      blocks[i].bn.collect(out, p + ".bn");
    }
  }
};

struct ResNet12Config {
  std::vector<std::size_t> channels{64, 160, 320, 640};
  std::size_t dropblock_size = 5;
  double dropblock_keep = 0.9;
};

// Four residual blocks of three conv+BN layers with leaky-ReLU(0.1), a 1x1
// projection shortcut, 2x2 max pooling after the residual addition, and
// DropBlock in the last two blocks during training.
template <typename T>
struct ResNet12 {
  struct Block {
    Tensor<T> w1, w2, w3, wp;
    BatchNorm2d<T> bn1, bn2, bn3, bnp;
  };

  ResNet12Config cfg;
  std::vector<Block> blocks;
  static constexpr T kSlope = T(0.1);

  static ResNet12 init(const ResNet12Config& cfg, Rng& rng) {
    ResNet12 net;
    net.cfg = cfg;
    std::size_t in_c = 3;
    for (std::size_t out_c : cfg.channels) {
      Block blk;
      blk.w1 = detail::he_conv_weight<T>(rng, out_c, in_c, 3);
      blk.w2 = detail::he_conv_weight<T>(rng, out_c, out_c, 3);
      blk.w3 = detail::he_conv_weight<T>(rng, out_c, out_c, 3);
      blk.wp = detail::he_conv_weight<T>(rng, out_c, in_c, 1);
      blk.bn1 = BatchNorm2d<T>::init(out_c);
      blk.bn2 = BatchNorm2d<T>::init(out_c);
      blk.bn3 = BatchNorm2d<T>::init(out_c);
      blk.bnp = BatchNorm2d<T>::init(out_c);
      net.blocks.push_back(std::move(blk));
      in_c = out_c;
    }
    return net;
  }

  FeatureLevels<T> forward(const Tensor<T>& images, bool training,
                           Rng* dropblock_rng = nullptr) {
    if (images.rank() != 4 || images.dim(1) != 3)
      throw ShapeError("resnet12: expected [B,3,H,W] input");
    Tensor<T> x = images;
    Tensor<T> mid;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      Block& blk = blocks[i];
      auto h1 = leaky_relu(blk.bn1.forward(conv2d(x, blk.w1, 1, 1), training),
                           kSlope);
      auto h2 = leaky_relu(blk.bn2.forward(conv2d(h1, blk.w2, 1, 1), training),
                           kSlope);
      auto h3 = blk.bn3.forward(conv2d(h2, blk.w3, 1, 1), training);
      auto sc = blk.bnp.forward(conv2d(x, blk.wp, 1, 0), training);
      x = max_pool2d(leaky_relu(add(h3, sc), kSlope), 2);
      if (training && i >= blocks.size() - 2) {
        if (dropblock_rng == nullptr)
          throw ShapeError("resnet12: training forward needs an rng");
        x = drop_block(x, cfg.dropblock_size, T(cfg.dropblock_keep), true,
                       *dropblock_rng);
      }
      if (i + 2 == blocks.size()) mid = x;
    }
    return {x, mid};
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = prefix + ".block" + std::to_string(i);
      out.push_back({p + ".conv1.w", blocks[i].w1, true});
      out.push_back({p + ".conv2.w", blocks[i].w2, true});
      out.push_back({p + ".conv3.w", blocks[i].w3, true});
      out.push_back({p + ".proj.w", blocks[i].wp, true});
      blocks[i].bn1.collect(out, p + ".bn1");
      blocks[i].bn2.collect(out, p + ".bn2");
      blocks[i].bn3.collect(out, p + ".bn3");
      blocks[i].bnp.collect(out, p + ".bnp");
    }
  }
};

}  // namespace hmdrn
