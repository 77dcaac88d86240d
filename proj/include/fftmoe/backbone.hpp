// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fftmoe/error.hpp"
#include "fftmoe/moe_adapter.hpp"
#include "fftmoe/rng.hpp"
#include "fftmoe/tensor.hpp"

namespace fftmoe {

struct BackboneConfig {
  std::size_t layers = 2;
  std::size_t width = 32;
  std::size_t heads = 2;
  std::size_t seq_len = 8;
  std::size_t classes = 4;
  std::size_t input_dim = 16;
  std::size_t ffn_mult = 4;
  std::uint64_t frozen_seed = 0;
  bool trainable_head = false;

  void validate() const {
    if (layers == 0 || width == 0 || heads == 0 || seq_len == 0 || input_dim == 0 || ffn_mult == 0) {
      throw ConfigError("backbone dimensions must be positive");
    }
    if (classes < 2) throw ConfigError("backbone needs at least 2 classes");
    if (width % heads != 0) {
      throw ConfigError("backbone width " + std::to_string(width) + " is not divisible by " + std::to_string(heads) + " heads");
    }
  }
};

struct FrozenBlock {
  Tensor wq, wk, wv, wo;  // [d x d]
  Tensor ffn_in;          // [h x d]
  Tensor ffn_out;         // [d x h]
};

// The shared pretrained stand-in. Never differentiated, never written after build.
struct FrozenWeights {
  Tensor embed;  // [d x input_dim]
  std::vector<FrozenBlock> blocks;
  Tensor head;  // [C x d]

  std::vector<Tensor> all() const {
    std::vector<Tensor> out{embed};
    for (const FrozenBlock& b : blocks) out.insert(out.end(), {b.wq, b.wk, b.wv, b.wo, b.ffn_in, b.ffn_out});
    out.push_back(head);
    return out;
  }

  // FNV-1a over the raw bytes of every tensor.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const Tensor& t : all()) {
      for (double v : t.values()) {
        unsigned char bytes[sizeof(double)];
        std::memcpy(bytes, &v, sizeof(double));
        for (unsigned char c : bytes) {
          h ^= c;
          h *= 1099511628211ULL;
        }
      }
    }
    return h;
  }
};

inline std::shared_ptr<const FrozenWeights> make_frozen_weights(const BackboneConfig& cfg) {
  cfg.validate();
  Rng rng(derive_seed({cfg.frozen_seed, 0xf00dULL}));
  auto init = [&rng](std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
    std::vector<double> v(rows * cols);
    for (double& x : v) x = normal(rng);
    return Tensor::from({rows, cols}, std::move(v), false);
  };
  const std::size_t d = cfg.width, hidden = cfg.width * cfg.ffn_mult;
  auto w = std::make_shared<FrozenWeights>();
  w->embed = init(d, cfg.input_dim);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    FrozenBlock b;
    b.wq = init(d, d);
    b.wk = init(d, d);
    b.wv = init(d, d);
    b.wo = init(d, d);
    b.ffn_in = init(hidden, d);
    b.ffn_out = init(d, hidden);
    w->blocks.push_back(std::move(b));
  }
  w->head = init(cfg.classes, d);
  return w;
}

/// Small post-LN transformer encoder with a frozen body and one trainable
/// MoE adapter running parallel to each block's FFN:
///
///   h1 = LN(h + Attn(h));  h' = LN(h1 + FFN(h1) + Adapter(h1))
///
/// Mean-pooled final states feed a linear classification head.
class Backbone {
 public:
  struct Output {
    Tensor logits;                      // [b x C]
    std::vector<Tensor> routing_probs;  // per layer, [M]; empty without top-k adapters
  };

  Backbone(const BackboneConfig& cfg, std::shared_ptr<const FrozenWeights> frozen, const AdapterSpec& adapter,
           std::uint64_t adapter_seed)
      : cfg_(cfg), frozen_(std::move(frozen)) {
    cfg_.validate();
    if (adapter.width != cfg_.width) {
      throw ConfigError("adapter width " + std::to_string(adapter.width) + " does not match backbone width " +
                        std::to_string(cfg_.width));
    }
    Rng rng(derive_seed({adapter_seed, 0xada7ULL}));
    for (std::size_t l = 0; l < cfg_.layers; ++l) adapters_.emplace_back(adapter, rng);
    head_ = cfg_.trainable_head ? frozen_->head.detach() : frozen_->head;
    if (cfg_.trainable_head) head_.set_requires_grad(true);
  }

  Backbone(const Backbone& other)
      : cfg_(other.cfg_), frozen_(other.frozen_), adapters_(other.adapters_), head_(other.head_) {
    if (cfg_.trainable_head) head_ = other.head_.clone();
  }
  Backbone& operator=(const Backbone& other) {
    if (this != &other) {
      Backbone tmp(other);
      *this = std::move(tmp);
    }
    return *this;
  }
  Backbone(Backbone&&) noexcept = default;
  Backbone& operator=(Backbone&&) noexcept = default;

  const BackboneConfig& config() const { return cfg_; }
  const std::shared_ptr<const FrozenWeights>& frozen() const { return frozen_; }
  std::uint64_t frozen_checksum() const { return frozen_->checksum(); }
  std::vector<MoEAdapter>& adapters() { return adapters_; }
  const std::vector<MoEAdapter>& adapters() const { return adapters_; }
  const Tensor& head() const { return head_; }

  void set_top_k(std::size_t k) {
    for (MoEAdapter& a : adapters_) a.set_top_k(k);
  }

  /// batch: [b x seq x input_dim] (or already flattened to [b*seq x input_dim]).
  /// When `stats` is given it must hold one RoutingStats per layer.
  Output forward(const Tensor& batch, std::vector<RoutingStats>* stats = nullptr) const {
    return run(batch, true, stats);
  }

  // The frozen network alone, as if every adapter were absent.
  Output forward_frozen(const Tensor& batch) const { return run(batch, false, nullptr); }

  std::vector<RoutingStats> make_stats() const {
    return std::vector<RoutingStats>(cfg_.layers, RoutingStats(adapters_.front().num_experts()));
  }

  // W^E: every adapter's parameters layer by layer, then the head if trainable.
  std::vector<Tensor> trainable_parameters() const {
    std::vector<Tensor> out;
    for (const MoEAdapter& a : adapters_) {
      auto p = a.parameters();
      out.insert(out.end(), p.begin(), p.end());
    }
    if (cfg_.trainable_head) out.push_back(head_);
    return out;
  }

  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < adapters_.size(); ++l) {
      for (const std::string& n : adapters_[l].parameter_names()) out.push_back("layer" + std::to_string(l) + "." + n);
    }
    if (cfg_.trainable_head) out.push_back("head");
    return out;
  }

  void load_trainable(std::span<const Tensor> values) {
    const std::vector<Tensor> mine = trainable_parameters();
    if (values.size() != mine.size()) {
      throw CompatibilityError("load_trainable: expected " + std::to_string(mine.size()) + " tensors, got " +
                               std::to_string(values.size()));
    }
    std::size_t offset = 0;
    for (MoEAdapter& a : adapters_) {
      const std::size_t n = a.parameters().size();
      a.load_parameters(values.subspan(offset, n));
      offset += n;
    }
    if (cfg_.trainable_head) {
      if (values[offset].shape() != head_.shape()) throw CompatibilityError("load_trainable: head shape mismatch");
      auto src = values[offset].values();
      std::copy(src.begin(), src.end(), head_.values().begin());
    }
  }

  std::size_t trainable_count() const {
    std::size_t n = cfg_.trainable_head ? head_.numel() : 0;
    for (const MoEAdapter& a : adapters_) n += a.parameter_count();
    return n;
  }

  std::size_t expert_parameter_count() const {
    std::size_t n = 0;
    for (const MoEAdapter& a : adapters_) n += a.expert_parameter_count();
    return n;
  }

 private:
  Output run(const Tensor& batch, bool use_adapters, std::vector<RoutingStats>* stats) const {
    const std::size_t tokens_per = cfg_.seq_len * cfg_.input_dim;
    if (batch.numel() % tokens_per != 0 || batch.shape().back() != cfg_.input_dim) {
      throw DimensionError("backbone forward: batch " + shape_str(batch.shape()) + " is not [b x " +
                           std::to_string(cfg_.seq_len) + " x " + std::to_string(cfg_.input_dim) + "]");
    }
    if (stats && stats->size() != cfg_.layers) throw DimensionError("backbone forward: need one RoutingStats per layer");
    const std::size_t rows = batch.numel() / cfg_.input_dim;
    Tensor x = batch.dim() == 2 ? batch : reshape(batch, {rows, cfg_.input_dim});

    Output out;
    Tensor h = linear(x, frozen_->embed);
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const FrozenBlock& b = frozen_->blocks[l];
      Tensor attn = multi_head_attention(linear(h, b.wq), linear(h, b.wk), linear(h, b.wv), cfg_.seq_len, cfg_.heads);
      Tensor h1 = layer_norm(add(h, linear(attn, b.wo)));
      Tensor ffn = linear(gelu(linear(h1, b.ffn_in)), b.ffn_out);
      if (use_adapters) {
        MoEAdapter::Output a = adapters_[l].forward(ffn, h1, stats ? &(*stats)[l] : nullptr);
        ffn = a.output;
        if (a.routing_probs.defined()) out.routing_probs.push_back(a.routing_probs);
      }
      h = layer_norm(add(h1, ffn));
    }
    out.logits = linear(mean_pool(h, cfg_.seq_len), head_);
    return out;
  }

  BackboneConfig cfg_;
  std::shared_ptr<const FrozenWeights> frozen_;
  std::vector<MoEAdapter> adapters_;
  Tensor head_;
};

inline Backbone build_backbone(const BackboneConfig& cfg, const AdapterSpec& adapter, std::uint64_t adapter_seed) {
  return Backbone(cfg, make_frozen_weights(cfg), adapter, adapter_seed);
}

}  // namespace fftmoe
