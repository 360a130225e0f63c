#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "sparsevox/common.hpp"
#include "sparsevox/sparse_ops.hpp"
#include "sparsevox/sparse_tensor.hpp"

namespace sparsevox {

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

struct UNetConfig {
  int in_channels = 1;
  int num_classes = 2;
  int stem_channels = 32;
  std::vector<int> enc_widths{32, 64, 128, 256};
  std::vector<int> enc_blocks{2, 3, 4, 6};  // the 34-layer family layout
  std::vector<int> dec_widths{128, 64, 32, 32};  // deepest decoder step first
  std::vector<int> dec_blocks{2, 2, 2, 2};
  int kernel = 3;       // submanifold kernels
  int down_kernel = 2;  // stride-2 down/up kernels

  int depth() const { return static_cast<int>(enc_widths.size()); }

  void validate() const {
    if (depth() < 1) throw ConfigError("network depth must be >= 1");
    if (enc_blocks.size() != enc_widths.size() ||
        dec_widths.size() != enc_widths.size() ||
        dec_blocks.size() != enc_widths.size())
      throw ConfigError("block counts and widths must have equal length");
    if (kernel % 2 == 0)
      throw ConfigError("submanifold kernel size must be odd");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (in_channels < 1 || stem_channels < 1)
      throw ConfigError("channel widths must be >= 1");
    for (int w : enc_widths)
      if (w < 1) throw ConfigError("encoder widths must be >= 1");
    for (int w : dec_widths)
      if (w < 1) throw ConfigError("decoder widths must be >= 1");
  }

  // A tiny preset used for desk-scale phantom experiments.
  static UNetConfig tiny(int depth = 2) {
    UNetConfig c;
    c.stem_channels = 8;
    c.enc_widths.assign(depth, 8);
    for (int l = 1; l < depth; ++l) c.enc_widths[l] = c.enc_widths[l - 1] * 2;
    c.enc_blocks.assign(depth, 1);
    c.dec_widths.assign(depth, 8);
    for (int l = 0; l + 1 < depth; ++l)
      c.dec_widths[l] = c.enc_widths[depth - 2 - l] > 8
                            ? c.enc_widths[depth - 2 - l]
                            : 8;
    c.dec_blocks.assign(depth, 1);
    return c;
  }
};

inline void to_json(nlohmann::json& j, const UNetConfig& c) {
  j = {{"in_channels", c.in_channels},   {"num_classes", c.num_classes},
       {"stem_channels", c.stem_channels}, {"enc_widths", c.enc_widths},
       {"enc_blocks", c.enc_blocks},     {"dec_widths", c.dec_widths},
       {"dec_blocks", c.dec_blocks},     {"kernel", c.kernel},
       {"down_kernel", c.down_kernel}};
}
inline void from_json(const nlohmann::json& j, UNetConfig& c) {
  j.at("in_channels").get_to(c.in_channels);
  j.at("num_classes").get_to(c.num_classes);
  j.at("stem_channels").get_to(c.stem_channels);
  j.at("enc_widths").get_to(c.enc_widths);
  j.at("enc_blocks").get_to(c.enc_blocks);
  j.at("dec_widths").get_to(c.dec_widths);
  j.at("dec_blocks").get_to(c.dec_blocks);
  j.at("kernel").get_to(c.kernel);
  j.at("down_kernel").get_to(c.down_kernel);
}

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 2;
  int epochs = 10;
  std::uint64_t seed = 0;
  std::vector<double> class_weights;  // empty: inverse class frequency
  int checkpoint_every = 0;           // epochs between checkpoints; 0 = final only
  int patience = 0;                   // early stop on val Dice; 0 = off

  void validate() const {
    if (!(lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"adam_eps", c.adam_eps},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"seed", c.seed},
       {"class_weights", c.class_weights},
       {"checkpoint_every", c.checkpoint_every},
       {"patience", c.patience}};
}
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("lr").get_to(c.lr);
  if (j.contains("beta1")) j.at("beta1").get_to(c.beta1);
  if (j.contains("beta2")) j.at("beta2").get_to(c.beta2);
  if (j.contains("adam_eps")) j.at("adam_eps").get_to(c.adam_eps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("epochs").get_to(c.epochs);
  j.at("seed").get_to(c.seed);
  if (j.contains("class_weights")) j.at("class_weights").get_to(c.class_weights);
  if (j.contains("checkpoint_every"))
    j.at("checkpoint_every").get_to(c.checkpoint_every);
  if (j.contains("patience")) j.at("patience").get_to(c.patience);
}

// ---------------------------------------------------------------------------
// Tape autodiff over flat feature buffers. Feats are shared so skip
// connections can fan out; backward lambdas accumulate into .g.
// ---------------------------------------------------------------------------

template <typename Real>
struct Feat {
  std::vector<Real> v, g;
  int channels = 0;
  Feat(std::size_t n, int c) : v(n * c, Real(0)), g(n * c, Real(0)), channels(c) {}
  std::size_t sites() const {
    return channels == 0 ? 0 : v.size() / static_cast<std::size_t>(channels);
  }
};

template <typename Real>
using FeatPtr = std::shared_ptr<Feat<Real>>;

struct Tape {
  std::vector<std::function<void()>> ops;
  void backward() {
    for (auto it = ops.rbegin(); it != ops.rend(); ++it) (*it)();
  }
};

// Bare coordinate set: the per-level coordinate bookkeeping a forward pass
// carries alongside the feature tape.
struct CoordSet {
  std::vector<Coord> coords;
  std::int32_t stride = 1;
  std::unordered_map<Coord, std::int32_t, CoordHash> index;

  std::int32_t lookup(const Coord& c) const {
    auto it = index.find(c);
    return it == index.end() ? -1 : it->second;
  }
  void rebuild_index() {
    index.clear();
    index.reserve(coords.size());
    for (std::size_t i = 0; i < coords.size(); ++i)
      index.emplace(coords[i], static_cast<std::int32_t>(i));
  }
};

// ---------------------------------------------------------------------------
// Parameterized modules.
// ---------------------------------------------------------------------------

template <typename Real>
struct ParamRef {
  std::string name;
  std::vector<Real>* value;
  std::vector<Real>* grad;  // null for non-trainable state (running stats)
};

template <typename Real>
struct ConvModule {
  ConvSpec spec;
  std::vector<Real> w, gw;
  std::vector<Real> b, gb;
  bool has_bias = false;

  void init(Rng& rng) {
    w.resize(spec.weight_count());
    gw.assign(w.size(), Real(0));
    const double fan_in = static_cast<double>(spec.kernel) * spec.kernel *
                          spec.kernel * spec.c_in;
    const double limit = std::sqrt(6.0 / fan_in);  // He uniform
    for (auto& x : w) x = static_cast<Real>(rng.uniform(-limit, limit));
    if (has_bias) {
      b.assign(static_cast<std::size_t>(spec.c_out), Real(0));
      gb.assign(b.size(), Real(0));
    }
  }
};

template <typename Real>
struct BNModule {
  BatchNormState<Real> state;
  std::vector<Real> g_gamma, g_beta;

  explicit BNModule(int channels = 0) : state(channels) {
    g_gamma.assign(channels, Real(0));
    g_beta.assign(channels, Real(0));
  }
};

namespace detail {

template <typename Real>
FeatPtr<Real> conv_op(ConvModule<Real>& m, const FeatPtr<Real>& in,
                      const std::shared_ptr<KernelMap>& km, Tape* tape) {
  auto out = std::make_shared<Feat<Real>>(km->out_coords.size(), m.spec.c_out);
  conv_forward(in->v, m.spec.c_in, *km, m.w, m.b, m.spec.c_out, out->v);
  if (tape) {
    ConvModule<Real>* mp = &m;
    tape->ops.push_back([mp, in, out, km] {
      std::vector<Real> gi, gw, gb;
      conv_backward(out->g, in->v, mp->spec.c_in, *km, mp->w, mp->has_bias,
                    mp->spec.c_out, gi, gw, gb);
      for (std::size_t i = 0; i < gi.size(); ++i) in->g[i] += gi[i];
      for (std::size_t i = 0; i < gw.size(); ++i) mp->gw[i] += gw[i];
      for (std::size_t i = 0; i < gb.size(); ++i) mp->gb[i] += gb[i];
    });
  }
  return out;
}

template <typename Real>
FeatPtr<Real> bn_op(BNModule<Real>& m, const FeatPtr<Real>& in, bool training,
                    Tape* tape) {
  auto out = std::make_shared<Feat<Real>>(in->sites(), in->channels);
  auto cache = std::make_shared<BatchNormCache<Real>>();
  batch_norm_forward(in->v, in->channels, m.state, training, out->v, *cache);
  if (tape) {
    BNModule<Real>* mp = &m;
    const int c = in->channels;
    tape->ops.push_back([mp, in, out, cache, c] {
      std::vector<Real> gi, gg, gb;
      batch_norm_backward(out->g, c, mp->state, *cache, gi, gg, gb);
      for (std::size_t i = 0; i < gi.size(); ++i) in->g[i] += gi[i];
      for (std::size_t i = 0; i < gg.size(); ++i) mp->g_gamma[i] += gg[i];
      for (std::size_t i = 0; i < gb.size(); ++i) mp->g_beta[i] += gb[i];
    });
  }
  return out;
}

template <typename Real>
FeatPtr<Real> relu_op(const FeatPtr<Real>& in, Tape* tape) {
  auto out = std::make_shared<Feat<Real>>(in->sites(), in->channels);
  relu_forward(in->v, out->v);
  if (tape) {
    tape->ops.push_back([in, out] {
      for (std::size_t i = 0; i < in->v.size(); ++i)
        if (in->v[i] > Real(0)) in->g[i] += out->g[i];
    });
  }
  return out;
}

template <typename Real>
FeatPtr<Real> add_op(const FeatPtr<Real>& a, const FeatPtr<Real>& b,
                     Tape* tape) {
  auto out = std::make_shared<Feat<Real>>(a->sites(), a->channels);
  for (std::size_t i = 0; i < a->v.size(); ++i) out->v[i] = a->v[i] + b->v[i];
  if (tape) {
    tape->ops.push_back([a, b, out] {
      for (std::size_t i = 0; i < out->g.size(); ++i) {
        a->g[i] += out->g[i];
        b->g[i] += out->g[i];
      }
    });
  }
  return out;
}

template <typename Real>
FeatPtr<Real> concat_op(const FeatPtr<Real>& a, const FeatPtr<Real>& b,
                        Tape* tape) {
  const std::size_t n = a->sites();
  if (b->sites() != n)
    throw DataError("channel concat requires matching site counts");
  const int ca = a->channels, cb = b->channels;
  auto out = std::make_shared<Feat<Real>>(n, ca + cb);
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < ca; ++c) out->v[i * (ca + cb) + c] = a->v[i * ca + c];
    for (int c = 0; c < cb; ++c)
      out->v[i * (ca + cb) + ca + c] = b->v[i * cb + c];
  }
  if (tape) {
    tape->ops.push_back([a, b, out, n, ca, cb] {
      for (std::size_t i = 0; i < n; ++i) {
        for (int c = 0; c < ca; ++c)
          a->g[i * ca + c] += out->g[i * (ca + cb) + c];
        for (int c = 0; c < cb; ++c)
          b->g[i * cb + c] += out->g[i * (ca + cb) + ca + c];
      }
    });
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Residual block: two submanifold convs with norm and relu, identity skip,
// 1x1x1 projection when the width changes.
// ---------------------------------------------------------------------------

template <typename Real>
struct ResBlock {
  ConvModule<Real> conv1, conv2;
  BNModule<Real> bn1, bn2;
  bool has_proj = false;
  ConvModule<Real> proj;
  BNModule<Real> bn_proj;

  ResBlock(int c_in, int c_out, int kernel) {
    conv1.spec = {c_in, c_out, kernel, 1, ConvMode::submanifold};
    conv2.spec = {c_out, c_out, kernel, 1, ConvMode::submanifold};
    bn1 = BNModule<Real>(c_out);
    bn2 = BNModule<Real>(c_out);
    has_proj = c_in != c_out;
    if (has_proj) {
      proj.spec = {c_in, c_out, 1, 1, ConvMode::submanifold};
      bn_proj = BNModule<Real>(c_out);
    }
  }

  FeatPtr<Real> forward(const FeatPtr<Real>& in,
                        const std::shared_ptr<KernelMap>& km,
                        const std::shared_ptr<KernelMap>& km1, bool training,
                        Tape* tape) {
    auto x = detail::conv_op(conv1, in, km, tape);
    x = detail::bn_op(bn1, x, training, tape);
    x = detail::relu_op(x, tape);
    x = detail::conv_op(conv2, x, km, tape);
    x = detail::bn_op(bn2, x, training, tape);
    FeatPtr<Real> skip = in;
    if (has_proj) {
      skip = detail::conv_op(proj, in, km1, tape);
      skip = detail::bn_op(bn_proj, skip, training, tape);
    }
    x = detail::add_op(x, skip, tape);
    return detail::relu_op(x, tape);
  }
};

// ---------------------------------------------------------------------------
// Sparse submanifold UNet. Encoder: stem + depth levels of stride-2
// generalized conv followed by residual submanifold blocks. Decoder: stride-2
// transposed convs back onto the cached encoder coordinate sets, skip
// concatenation, residual blocks. Head: 1x1x1 conv to per-site class logits.
// ---------------------------------------------------------------------------

template <typename Real>
class UNet {
 public:
  explicit UNet(const UNetConfig& cfg, std::uint64_t init_seed = 0)
      : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.depth();

    stem_.spec = {cfg_.in_channels, cfg_.stem_channels, cfg_.kernel, 1,
                  ConvMode::submanifold};
    stem_bn_ = BNModule<Real>(cfg_.stem_channels);

    int c = cfg_.stem_channels;
    for (int l = 0; l < d; ++l) {
      ConvModule<Real> down;
      down.spec = {c, cfg_.enc_widths[l], cfg_.down_kernel, 2,
                   ConvMode::strided};
      down_.push_back(std::move(down));
      down_bn_.emplace_back(cfg_.enc_widths[l]);
      c = cfg_.enc_widths[l];
      std::vector<ResBlock<Real>> blocks;
      for (int bi = 0; bi < cfg_.enc_blocks[l]; ++bi)
        blocks.emplace_back(c, c, cfg_.kernel);
      enc_blocks_.push_back(std::move(blocks));
    }

    for (int i = 0; i < d; ++i) {
      const int target_level = d - 1 - i;  // encoder level we upsample onto
      const int c_skip = target_level == 0 ? cfg_.stem_channels
                                           : cfg_.enc_widths[target_level - 1];
      ConvModule<Real> up;
      up.spec = {c, cfg_.dec_widths[i], cfg_.down_kernel, 2,
                 ConvMode::transposed};
      up_.push_back(std::move(up));
      up_bn_.emplace_back(cfg_.dec_widths[i]);
      std::vector<ResBlock<Real>> blocks;
      int bc = cfg_.dec_widths[i] + c_skip;
      for (int bi = 0; bi < cfg_.dec_blocks[i]; ++bi) {
        blocks.emplace_back(bc, cfg_.dec_widths[i], cfg_.kernel);
        bc = cfg_.dec_widths[i];
      }
      dec_blocks_.push_back(std::move(blocks));
      c = cfg_.dec_widths[i];
    }

    head_.spec = {c, cfg_.num_classes, 1, 1, ConvMode::submanifold};
    head_.has_bias = true;

    Rng rng(mix64(init_seed ^ 0x5eed5eed5eedULL));
    init_all(rng);
  }

  const UNetConfig& config() const { return cfg_; }

  // Logits per input site, aligned with in.coords order.
  FeatPtr<Real> forward(const SparseTensor<Real>& in, bool training,
                        Tape* tape) {
    const int d = cfg_.depth();
    if (in.channels != cfg_.in_channels)
      throw DataError("input channel width does not match network config");

    // Coordinate levels and shared kernel maps for this input.
    std::vector<CoordSet> levels(static_cast<std::size_t>(d) + 1);
    levels[0].coords = in.coords;
    levels[0].stride = in.stride;
    levels[0].rebuild_index();

    std::vector<std::shared_ptr<KernelMap>> sub_maps(d + 1), id_maps(d + 1);
    const ConvSpec sub{1, 1, cfg_.kernel, 1, ConvMode::submanifold};
    const ConvSpec idk{1, 1, 1, 1, ConvMode::submanifold};
    sub_maps[0] = std::make_shared<KernelMap>(build_kernel_map(levels[0], sub));
    id_maps[0] = std::make_shared<KernelMap>(build_kernel_map(levels[0], idk));

    auto x = std::make_shared<Feat<Real>>(in.size(), in.channels);
    x->v = in.feats;

    x = detail::conv_op(stem_, x, sub_maps[0], tape);
    x = detail::bn_op(stem_bn_, x, training, tape);
    x = detail::relu_op(x, tape);

    std::vector<FeatPtr<Real>> skips(d);
    for (int l = 0; l < d; ++l) {
      skips[l] = x;
      ConvSpec down_spec = down_[l].spec;
      auto km = std::make_shared<KernelMap>(
          build_kernel_map(levels[l], down_spec));
      levels[l + 1].coords = km->out_coords;
      levels[l + 1].stride = km->out_stride;
      levels[l + 1].rebuild_index();
      sub_maps[l + 1] =
          std::make_shared<KernelMap>(build_kernel_map(levels[l + 1], sub));
      id_maps[l + 1] =
          std::make_shared<KernelMap>(build_kernel_map(levels[l + 1], idk));

      x = detail::conv_op(down_[l], x, km, tape);
      x = detail::bn_op(down_bn_[l], x, training, tape);
      x = detail::relu_op(x, tape);
      for (auto& blk : enc_blocks_[l])
        x = blk.forward(x, sub_maps[l + 1], id_maps[l + 1], training, tape);
    }

    for (int i = 0; i < d; ++i) {
      const int from = d - i;
      auto km = std::make_shared<KernelMap>(build_kernel_map(
          levels[from], up_[i].spec, &levels[from - 1].coords));
      x = detail::conv_op(up_[i], x, km, tape);
      x = detail::bn_op(up_bn_[i], x, training, tape);
      x = detail::relu_op(x, tape);
      x = detail::concat_op(x, skips[from - 1], tape);
      for (auto& blk : dec_blocks_[i])
        x = blk.forward(x, sub_maps[from - 1], id_maps[from - 1], training,
                        tape);
    }

    return detail::conv_op(head_, x, id_maps[0], tape);
  }

  // Trainable parameters plus running statistics, in fixed topological
  // (construction) order; this order is the checkpoint layout.
  std::vector<ParamRef<Real>> param_refs() {
    std::vector<ParamRef<Real>> out;
    auto add_conv = [&](const std::string& name, ConvModule<Real>& m) {
      out.push_back({name + ".w", &m.w, &m.gw});
      if (m.has_bias) out.push_back({name + ".b", &m.b, &m.gb});
    };
    auto add_bn = [&](const std::string& name, BNModule<Real>& m) {
      out.push_back({name + ".gamma", &m.state.gamma, &m.g_gamma});
      out.push_back({name + ".beta", &m.state.beta, &m.g_beta});
      out.push_back({name + ".running_mean", &m.state.running_mean, nullptr});
      out.push_back({name + ".running_var", &m.state.running_var, nullptr});
    };
    auto add_block = [&](const std::string& name, ResBlock<Real>& b) {
      add_conv(name + ".conv1", b.conv1);
      add_bn(name + ".bn1", b.bn1);
      add_conv(name + ".conv2", b.conv2);
      add_bn(name + ".bn2", b.bn2);
      if (b.has_proj) {
        add_conv(name + ".proj", b.proj);
        add_bn(name + ".bn_proj", b.bn_proj);
      }
    };

    add_conv("stem", stem_);
    add_bn("stem_bn", stem_bn_);
    for (std::size_t l = 0; l < down_.size(); ++l) {
      const std::string lv = "enc" + std::to_string(l);
      add_conv(lv + ".down", down_[l]);
      add_bn(lv + ".down_bn", down_bn_[l]);
      for (std::size_t b = 0; b < enc_blocks_[l].size(); ++b)
        add_block(lv + ".block" + std::to_string(b), enc_blocks_[l][b]);
    }
    for (std::size_t i = 0; i < up_.size(); ++i) {
      const std::string lv = "dec" + std::to_string(i);
      add_conv(lv + ".up", up_[i]);
      add_bn(lv + ".up_bn", up_bn_[i]);
      for (std::size_t b = 0; b < dec_blocks_[i].size(); ++b)
        add_block(lv + ".block" + std::to_string(b), dec_blocks_[i][b]);
    }
    add_conv("head", head_);
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (const auto& p : param_refs())
      if (p.grad) n += p.value->size();
    return n;
  }

  void zero_grads() {
    for (auto& p : param_refs())
      if (p.grad) std::fill(p.grad->begin(), p.grad->end(), Real(0));
  }

 private:
  void init_all(Rng& rng) {
    stem_.init(rng);
    for (std::size_t l = 0; l < down_.size(); ++l) {
      down_[l].init(rng);
      for (auto& b : enc_blocks_[l]) init_block(b, rng);
    }
    for (std::size_t i = 0; i < up_.size(); ++i) {
      up_[i].init(rng);
      for (auto& b : dec_blocks_[i]) init_block(b, rng);
    }
    head_.init(rng);
  }
  static void init_block(ResBlock<Real>& b, Rng& rng) {
    b.conv1.init(rng);
    b.conv2.init(rng);
    if (b.has_proj) b.proj.init(rng);
  }

  UNetConfig cfg_;
  ConvModule<Real> stem_;
  BNModule<Real> stem_bn_;
  std::vector<ConvModule<Real>> down_;
  std::vector<BNModule<Real>> down_bn_;
  std::vector<std::vector<ResBlock<Real>>> enc_blocks_;
  std::vector<ConvModule<Real>> up_;
  std::vector<BNModule<Real>> up_bn_;
  std::vector<std::vector<ResBlock<Real>>> dec_blocks_;
  ConvModule<Real> head_;
};

// ---------------------------------------------------------------------------
// Loss: class-weighted softmax cross-entropy, normalized by the summed
// weights of the evaluated sites. Gradient is written into logits.g.
// ---------------------------------------------------------------------------

template <typename Real>
Real weighted_ce_loss(const std::vector<Real>& logits, int num_classes,
                      const std::vector<std::uint8_t>& labels,
                      const std::vector<Real>& class_weights,
                      std::type_identity_t<std::vector<Real>*> grad) {
  const std::size_t n = labels.size();
  if (logits.size() != n * static_cast<std::size_t>(num_classes))
    throw DataError("logit count does not match label count");
  if (class_weights.size() != static_cast<std::size_t>(num_classes))
    throw ConfigError("class weight count does not match num_classes");
  if (grad) grad->assign(logits.size(), Real(0));

  Real loss_sum = 0, weight_sum = 0;
  std::vector<Real> p(num_classes);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t y = labels[i];
    if (static_cast<int>(y) >= num_classes)
      throw DataError("label " + std::to_string(y) + " outside class range");
    const Real* z = logits.data() + i * num_classes;
    Real zmax = z[0];
    for (int c = 1; c < num_classes; ++c) zmax = std::max(zmax, z[c]);
    Real denom = 0;
    for (int c = 0; c < num_classes; ++c) {
      p[c] = std::exp(z[c] - zmax);
      denom += p[c];
    }
    const Real w = class_weights[y];
    loss_sum += w * (std::log(denom) - (z[y] - zmax));
    weight_sum += w;
    if (grad) {
      Real* g = grad->data() + i * num_classes;
      for (int c = 0; c < num_classes; ++c)
        g[c] = w * (p[c] / denom - (c == y ? Real(1) : Real(0)));
    }
  }
  if (weight_sum == Real(0)) return Real(0);
  if (grad)
    for (auto& g : *grad) g /= weight_sum;
  return loss_sum / weight_sum;
}

// Soft Dice loss over the signal class (option alongside cross-entropy).
template <typename Real>
Real dice_loss(const std::vector<Real>& logits, int num_classes,
               const std::vector<std::uint8_t>& labels,
               std::type_identity_t<std::vector<Real>*> grad) {
  const std::size_t n = labels.size();
  const Real smooth = Real(1);
  std::vector<Real> p(n);  // softmax probability of class 1
  Real inter = 0, psum = 0, tsum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const Real* z = logits.data() + i * num_classes;
    Real zmax = z[0];
    for (int c = 1; c < num_classes; ++c) zmax = std::max(zmax, z[c]);
    Real denom = 0;
    for (int c = 0; c < num_classes; ++c) denom += std::exp(z[c] - zmax);
    p[i] = std::exp(z[1] - zmax) / denom;
    const Real t = labels[i] != 0 ? Real(1) : Real(0);
    inter += p[i] * t;
    psum += p[i];
    tsum += t;
  }
  const Real dice = (2 * inter + smooth) / (psum + tsum + smooth);
  if (grad) {
    grad->assign(logits.size(), Real(0));
    for (std::size_t i = 0; i < n; ++i) {
      const Real t = labels[i] != 0 ? Real(1) : Real(0);
      // d(1-dice)/dp_i, then chain through the binary softmax.
      const Real ddice_dp =
          (2 * t * (psum + tsum + smooth) - (2 * inter + smooth)) /
          ((psum + tsum + smooth) * (psum + tsum + smooth));
      const Real dloss_dp = -ddice_dp;
      const Real* z = logits.data() + i * num_classes;
      Real zmax = z[0];
      for (int c = 1; c < num_classes; ++c) zmax = std::max(zmax, z[c]);
      Real denom = 0;
      std::vector<Real> q(num_classes);
      for (int c = 0; c < num_classes; ++c) {
        q[c] = std::exp(z[c] - zmax);
        denom += q[c];
      }
      for (int c = 0; c < num_classes; ++c) {
        const Real softc = q[c] / denom;
        const Real dp_dz = (c == 1 ? p[i] * (1 - p[i]) : -p[i] * softc);
        (*grad)[i * num_classes + c] = dloss_dp * dp_dz;
      }
    }
  }
  return Real(1) - dice;
}

// Ties break toward the lower class id.
template <typename Real>
std::vector<std::uint8_t> argmax_classes(const std::vector<Real>& logits,
                                         int num_classes) {
  const std::size_t n = logits.size() / static_cast<std::size_t>(num_classes);
  std::vector<std::uint8_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    for (int c = 1; c < num_classes; ++c)
      if (logits[i * num_classes + c] > logits[i * num_classes + best])
        best = c;
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam with bias correction.
// ---------------------------------------------------------------------------

template <typename Real>
class Adam {
 public:
  Adam(std::vector<ParamRef<Real>> params, const TrainConfig& cfg)
      : params_(std::move(params)),
        lr_(static_cast<Real>(cfg.lr)),
        b1_(static_cast<Real>(cfg.beta1)),
        b2_(static_cast<Real>(cfg.beta2)),
        eps_(static_cast<Real>(cfg.adam_eps)) {
    for (const auto& p : params_) {
      m_.emplace_back(p.grad ? p.value->size() : 0, Real(0));
      v_.emplace_back(p.grad ? p.value->size() : 0, Real(0));
    }
  }

  void step() {
    ++t_;
    const Real bc1 = Real(1) - std::pow(b1_, static_cast<Real>(t_));
    const Real bc2 = Real(1) - std::pow(b2_, static_cast<Real>(t_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      if (!params_[pi].grad) continue;
      auto& w = *params_[pi].value;
      const auto& g = *params_[pi].grad;
      for (std::size_t i = 0; i < w.size(); ++i) {
        m_[pi][i] = b1_ * m_[pi][i] + (Real(1) - b1_) * g[i];
        v_[pi][i] = b2_ * v_[pi][i] + (Real(1) - b2_) * g[i] * g[i];
        const Real mhat = m_[pi][i] / bc1;
        const Real vhat = v_[pi][i] / bc2;
        w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  long step_count() const { return t_; }
  void set_step_count(long t) { t_ = t; }
  std::vector<std::vector<Real>>& moments1() { return m_; }
  std::vector<std::vector<Real>>& moments2() { return v_; }

 private:
  std::vector<ParamRef<Real>> params_;
  std::vector<std::vector<Real>> m_, v_;
  Real lr_, b1_, b2_, eps_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest (config, epoch, RNG and optimizer state layout)
// at <path>.json plus a binary payload at <path>.bin in fixed layout order.
// Writes are atomic (temp file + rename).
// ---------------------------------------------------------------------------

template <typename Real>
struct Checkpoint {
  UNetConfig unet_config;
  TrainConfig train_config;
  int epoch = 0;
  std::array<std::uint64_t, 4> rng_state{};
};

namespace detail {

inline void atomic_write(const std::string& path,
                         const std::function<void(std::ostream&)>& fn,
                         bool binary) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, binary ? std::ios::binary : std::ios::out);
    if (!os) throw DataError("cannot write: " + tmp);
    fn(os);
    if (!os) throw DataError("short write: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

template <typename Real>
void save_checkpoint(const std::string& path, UNet<Real>& net,
                     Adam<Real>* opt, const Checkpoint<Real>& meta) {
  auto refs = net.param_refs();
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& p : refs)
    layout.push_back({{"name", p.name}, {"size", p.value->size()}});

  nlohmann::json manifest = {
      {"format", "sparsevox-checkpoint-v1"},
      {"precision", sizeof(Real) == 4 ? "float32" : "float64"},
      {"unet_config", meta.unet_config},
      {"train_config", meta.train_config},
      {"epoch", meta.epoch},
      {"rng_state", meta.rng_state},
      {"adam_steps", opt ? opt->step_count() : 0},
      {"has_optimizer", opt != nullptr},
      {"layout", layout}};

  detail::atomic_write(
      path + ".json", [&](std::ostream& os) { os << manifest.dump(2) << "\n"; },
      false);
  detail::atomic_write(
      path + ".bin",
      [&](std::ostream& os) {
        for (const auto& p : refs) write_vec(os, *p.value);
        if (opt) {
          for (std::size_t i = 0; i < refs.size(); ++i)
            write_vec(os, opt->moments1()[i]);
          for (std::size_t i = 0; i < refs.size(); ++i)
            write_vec(os, opt->moments2()[i]);
        }
      },
      true);
}

template <typename Real>
Checkpoint<Real> load_checkpoint(const std::string& path,
                                 std::unique_ptr<UNet<Real>>& net,
                                 Adam<Real>* opt = nullptr) {
  std::ifstream ms(path + ".json");
  if (!ms) throw DataError("missing checkpoint manifest: " + path + ".json");
  nlohmann::json manifest;
  ms >> manifest;
  const std::string precision = manifest.at("precision").get<std::string>();
  const std::string want = sizeof(Real) == 4 ? "float32" : "float64";
  if (precision != want)
    throw DataError("checkpoint precision " + precision +
                    " does not match build precision " + want);

  Checkpoint<Real> meta;
  meta.unet_config = manifest.at("unet_config").get<UNetConfig>();
  meta.train_config = manifest.at("train_config").get<TrainConfig>();
  meta.epoch = manifest.at("epoch").get<int>();
  manifest.at("rng_state").get_to(meta.rng_state);

  if (!net) net = std::make_unique<UNet<Real>>(meta.unet_config);
  auto refs = net->param_refs();
  const auto& layout = manifest.at("layout");
  if (layout.size() != refs.size())
    throw DataError("checkpoint layout does not match network graph");

  std::ifstream bs(path + ".bin", std::ios::binary);
  if (!bs) throw DataError("missing checkpoint payload: " + path + ".bin");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const std::size_t sz = layout[i].at("size").get<std::size_t>();
    if (sz != refs[i].value->size())
      throw DataError("checkpoint entry size mismatch at " + refs[i].name);
    read_vec(bs, *refs[i].value, sz);
  }
  if (opt && manifest.at("has_optimizer").get<bool>()) {
    for (std::size_t i = 0; i < refs.size(); ++i)
      read_vec(bs, opt->moments1()[i], opt->moments1()[i].size());
    for (std::size_t i = 0; i < refs.size(); ++i)
      read_vec(bs, opt->moments2()[i], opt->moments2()[i].size());
    opt->set_step_count(manifest.at("adam_steps").get<long>());
  }
  if (!bs) throw DataError("checkpoint payload truncated: " + path + ".bin");
  return meta;
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

template <typename Real>
struct Sample {
  SparseTensor<Real> tensor;
  std::vector<std::uint8_t> labels;  // binary: 0 background, 1 signal
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double dice = 0.0;
  double accuracy = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> epochs;
  bool diverged = false;
  std::array<std::uint64_t, 4> rng_state{};  // RNG state at the end of training
};

template <typename Real>
std::vector<Real> inverse_frequency_weights(
    const std::vector<const Sample<Real>*>& samples, int num_classes) {
  std::vector<double> counts(num_classes, 0.0);
  double total = 0.0;
  for (const auto* s : samples)
    for (std::uint8_t y : s->labels) {
      counts[y] += 1.0;
      total += 1.0;
    }
  std::vector<Real> w(num_classes);
  for (int c = 0; c < num_classes; ++c)
    w[c] = counts[c] > 0.0
               ? static_cast<Real>(total / (num_classes * counts[c]))
               : Real(1);
  return w;
}

// Per-sample Dice/accuracy of the signal class, pooled over samples.
template <typename Real>
std::pair<double, double> evaluate_dice(
    UNet<Real>& net, const std::vector<const Sample<Real>*>& samples) {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (const auto* s : samples) {
    auto logits = net.forward(s->tensor, /*training=*/false, nullptr);
    auto pred = argmax_classes(logits->v, net.config().num_classes);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = pred[i] != 0, t = s->labels[i] != 0;
      if (p && t) ++tp;
      else if (p && !t) ++fp;
      else if (!p && t) ++fn;
      else ++tn;
    }
  }
  const std::uint64_t denom = 2 * tp + fp + fn;
  const double dice = denom == 0 ? 1.0 : 2.0 * tp / static_cast<double>(denom);
  const double acc =
      static_cast<double>(tp + tn) / static_cast<double>(tp + fp + fn + tn);
  return {dice, acc};
}

// Deterministic in the seed. On NaN loss the last epoch-end weights are
// restored and the result is flagged diverged. progress, when set, receives
// one line of JSON per epoch.
// start_epoch/resume_rng continue a run restored from a checkpoint.
template <typename Real>
TrainResult train(UNet<Real>& net, Adam<Real>& opt,
                  const std::vector<Sample<Real>>& train_set,
                  const std::vector<Sample<Real>>& val_set,
                  const TrainConfig& cfg, std::ostream* progress = nullptr,
                  int start_epoch = 0,
                  const std::array<std::uint64_t, 4>* resume_rng = nullptr) {
  cfg.validate();
  if (train_set.empty()) throw DataError("training set is empty");
  const int nc = net.config().num_classes;

  std::vector<const Sample<Real>*> train_ptrs, val_ptrs;
  for (const auto& s : train_set) train_ptrs.push_back(&s);
  for (const auto& s : val_set) val_ptrs.push_back(&s);

  std::vector<Real> weights(cfg.class_weights.begin(),
                            cfg.class_weights.end());
  if (weights.empty()) weights = inverse_frequency_weights(train_ptrs, nc);
  if (weights.size() != static_cast<std::size_t>(nc))
    throw ConfigError("class weight count does not match num_classes");

  Rng rng(cfg.seed);
  if (resume_rng) rng.set_state(*resume_rng);
  TrainResult result;
  auto refs = net.param_refs();
  std::vector<std::vector<Real>> last_good;
  for (const auto& p : refs) last_good.push_back(*p.value);

  double best_val_dice = -1.0;
  int since_best = 0;

  std::vector<std::size_t> order(train_set.size());

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    // Fisher-Yates from the identity permutation, so the epoch order is a
    // function of the RNG state alone (required for checkpoint resume).
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.below(i)]);

    double loss_sum = 0.0;
    std::size_t steps = 0;
    bool nan_hit = false;
    for (std::size_t start = 0; start < order.size() && !nan_hit;
         start += cfg.batch_size) {
      std::vector<const SparseTensor<Real>*> parts;
      std::vector<const std::vector<std::uint8_t>*> labs;
      for (std::size_t k = start;
           k < std::min(order.size(), start + cfg.batch_size); ++k) {
        parts.push_back(&train_set[order[k]].tensor);
        labs.push_back(&train_set[order[k]].labels);
      }
      auto [batch, labels] = make_batch(parts, labs);

      net.zero_grads();
      Tape tape;
      auto logits = net.forward(batch, /*training=*/true, &tape);
      std::vector<Real> lgrad;
      const Real loss = weighted_ce_loss(logits->v, nc, labels, weights,
                                         &lgrad);
      if (!std::isfinite(static_cast<double>(loss))) {
        nan_hit = true;
        break;
      }
      logits->g = lgrad;
      tape.backward();
      opt.step();
      loss_sum += static_cast<double>(loss);
      ++steps;
    }

    if (nan_hit) {
      for (std::size_t i = 0; i < refs.size(); ++i)
        *refs[i].value = last_good[i];
      result.diverged = true;
      break;
    }
    for (std::size_t i = 0; i < refs.size(); ++i) last_good[i] = *refs[i].value;

    EpochMetrics em;
    em.epoch = epoch;
    em.loss = steps > 0 ? loss_sum / static_cast<double>(steps) : 0.0;
    const auto& metric_set = val_ptrs.empty() ? train_ptrs : val_ptrs;
    std::tie(em.dice, em.accuracy) = evaluate_dice(net, metric_set);
    em.seconds = std::chrono::duration<double>(
                     std::chrono::steady_clock::now() - t0)
                     .count();
    result.epochs.push_back(em);
    if (progress) {
      nlohmann::json line = {{"epoch", em.epoch},
                             {"loss", em.loss},
                             {"dice", em.dice},
                             {"accuracy", em.accuracy},
                             {"seconds", em.seconds}};
      *progress << line.dump() << "\n" << std::flush;
    }

    if (cfg.patience > 0 && !val_ptrs.empty()) {
      if (em.dice > best_val_dice) {
        best_val_dice = em.dice;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        break;
      }
    }
  }
  result.rng_state = rng.state();
  return result;
}

template <typename Real>
std::vector<std::uint8_t> predict(UNet<Real>& net,
                                  const SparseTensor<Real>& t) {
  auto logits = net.forward(t, /*training=*/false, nullptr);
  return argmax_classes(logits->v, net.config().num_classes);
}

}  // namespace sparsevox
