#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dusss/checkpoint.hpp"
#include "dusss/rng.hpp"
#include "dusss/tensor.hpp"

namespace dusss {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t patch = 8;
  std::size_t d = 32;        // feature width of patch/token/pixel features
  std::size_t d_s = 16;      // semantic embedding width
  std::size_t d_u = 16;      // Gaussian embedding width
  std::size_t l_max = 16;    // padded token length, [CLS] included
  std::size_t vocab_size = 32;
  std::size_t pad_id = 0;
  std::size_t attn_heads = 4;
  std::size_t ground_kernel = 3;
  std::size_t seg_channels = 8;
  std::size_t stem_channels = 8;

  std::size_t grid() const { return image_size / patch; }
  // Number of (upsample x2 + conv) stages from the patch grid to pixels.
  std::size_t ground_stages() const;
  void validate() const;
};

// Affine map on the last axis; weight is [in, out].
struct Linear {
  Tensor weight, bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct Conv2d {
  Tensor weight, bias;
  std::size_t stride = 1, pad = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t pad,
         Rng& rng, bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

// Channel-first layouts: patch_grid is [B, d, P, P].
struct ImageFeatures {
  Tensor patch_grid;
  Tensor cls;       // [B, d]
  Tensor semantic;  // [B, d_s]
};

struct TextFeatures {
  Tensor token_grid;  // [B, L, d], pad rows zeroed
  Tensor cls;         // [B, d]
  Tensor semantic;    // [B, d_s]
  Tensor pooled;      // [B, d], t_f: mean over non-pad word tokens
};

struct GaussianEmbedding {
  Tensor mu;      // [B, d_u]
  Tensor sigma;   // [B, d_u], exp(0.5 * log_var) > 0
  Tensor log_var;
};

// Token ids for a batch, row-major [batch, l_max].
struct TokenBatch {
  std::vector<std::size_t> ids;
  std::size_t batch = 0;
  std::size_t length = 0;
};

class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ModelConfig& cfg, Rng& rng);

  // images: [B, 1, H, W] with values in [0, 1].
  ImageFeatures encode(const Tensor& images) const;
  void collect(const std::string& prefix, NamedTensors& out) const;

 private:
  ModelConfig cfg_;
  Conv2d stem_;         // 3x3, 1 -> stem_channels
  Conv2d patch_embed_;  // k = stride = patch
  Conv2d mix_;          // 1x1
  Tensor pos_;          // [1, d, P, P], zero-initialized
  Linear attn_query_;   // d -> heads, no bias
  Linear attn_value_;   // d -> d
  Linear cls_ff1_, cls_ff2_;  // residual MLP on the pooled token
  Linear proj_;         // d -> d_s
};

class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const ModelConfig& cfg, Rng& rng);

  TextFeatures encode(const TokenBatch& tokens) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
  const Tensor& token_embedding() const { return tok_; }

 private:
  ModelConfig cfg_;
  Tensor tok_;  // [V, d]
  Tensor pos_;  // [L, d]
  Linear q_, k_, v_, o_;
  Linear ff1_, ff2_;
  Linear proj_;
};

class GaussianHead {
 public:
  GaussianHead() = default;
  GaussianHead(std::size_t in, std::size_t out, Rng& rng);

  GaussianEmbedding operator()(const Tensor& cls) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
  void zero();

 private:
  Linear mu_, log_var_;
};

// Lifts the patch grid to per-pixel features: [B,d,P,P] -> [B,d,H,W].
class GroundingDecoder {
 public:
  GroundingDecoder() = default;
  GroundingDecoder(const ModelConfig& cfg, Rng& rng);

  Tensor operator()(const Tensor& patch_grid) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
  // Centre tap = identity, all other taps and biases zero.
  void set_identity();

 private:
  ModelConfig cfg_;
  std::vector<Conv2d> stages_;
};

// Two-level U-shaped encoder-decoder; [B,1,H,W] -> logits [B,H,W].
class SegNetwork {
 public:
  SegNetwork() = default;
  SegNetwork(const ModelConfig& cfg, Rng& rng);

  Tensor forward(const Tensor& images) const;
  NamedTensors named_parameters(const std::string& prefix = "") const;
  void zero_final_layer();

 private:
  std::size_t image_size_ = 0;
  Conv2d enc1a_, enc1b_, enc2a_, enc2b_, dec1_, head_;
};

// The pretrained vision-language model: both encoders, both Gaussian heads,
// the grounding decoder and the shared log-temperature.
struct Vlm {
  ModelConfig cfg;
  ImageEncoder image_encoder;
  TextEncoder text_encoder;
  GaussianHead image_gaussian;
  GaussianHead text_gaussian;
  GroundingDecoder grounding;
  Tensor log_tau;

  Vlm() = default;
  Vlm(const ModelConfig& cfg, std::uint64_t seed, double tau_init = 0.07);

  NamedTensors named_parameters() const;
  NamedTensors encoder_parameters() const;    // everything but grounding and log_tau
  NamedTensors grounding_parameters() const;
};

// [B,H,W] images -> [B,1,H,W] tensor.
Tensor stack_images(const std::vector<const std::vector<double>*>& images, std::size_t size);

std::vector<Tensor> tensors_of(const NamedTensors& named);

}  // namespace dusss
