#include "dusss/models.hpp"

#include <cmath>
#include <stdexcept>

namespace dusss {

namespace {

Tensor uniform_param(const Shape& shape, double bound, Rng& rng) {
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = uniform(rng, -bound, bound);
  return Tensor::from(shape, std::move(v), true);
}

bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

}  // namespace

std::size_t ModelConfig::ground_stages() const {
  std::size_t stages = 0;
  for (std::size_t g = grid(); g < image_size; g *= 2) ++stages;
  return stages;
}

void ModelConfig::validate() const {
  if (patch == 0 || image_size % patch != 0)
    throw std::invalid_argument("image size " + std::to_string(image_size) +
                                " is not divisible by patch size " + std::to_string(patch));
  if (!is_pow2(image_size / patch))
    throw std::invalid_argument("image_size / patch must be a power of two");
  if (image_size % 2 != 0) throw std::invalid_argument("image size must be even");
  if (d == 0 || d_s == 0 || d_u == 0 || l_max < 2 || vocab_size == 0)
    throw std::invalid_argument("model dimensions must be positive (l_max >= 2)");
  if (attn_heads == 0 || d % attn_heads != 0)
    throw std::invalid_argument("d must be divisible by attn_heads");
  if (ground_kernel % 2 == 0) throw std::invalid_argument("ground_kernel must be odd");
  if (seg_channels == 0 || stem_channels == 0)
    throw std::invalid_argument("seg_channels and stem_channels must be positive");
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  weight = uniform_param({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  if (with_bias) bias = Tensor::zeros({out}, true);
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

void Linear::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_,
               std::size_t pad_, Rng& rng, bool with_bias)
    : stride(stride_), pad(pad_) {
  weight = uniform_param({out, in, k, k}, 1.0 / std::sqrt(static_cast<double>(in * k * k)), rng);
  if (with_bias) bias = Tensor::zeros({out}, true);
}

Tensor Conv2d::operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }

void Conv2d::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

ImageEncoder::ImageEncoder(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  stem_ = Conv2d(1, cfg.stem_channels, 3, 1, 1, rng);
  patch_embed_ = Conv2d(cfg.stem_channels, cfg.d, cfg.patch, cfg.patch, 0, rng);
  mix_ = Conv2d(cfg.d, cfg.d, 1, 1, 0, rng);
  pos_ = Tensor::zeros({1, cfg.d, cfg.grid(), cfg.grid()}, true);
  attn_query_ = Linear(cfg.d, cfg.attn_heads, rng, false);
  attn_value_ = Linear(cfg.d, cfg.d, rng);
  cls_ff1_ = Linear(cfg.d, 2 * cfg.d, rng);
  cls_ff2_ = Linear(2 * cfg.d, cfg.d, rng);
  proj_ = Linear(cfg.d, cfg.d_s, rng);
}

ImageFeatures ImageEncoder::encode(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 1)
    throw std::invalid_argument("encode_image expects [B,1,H,W], got " + shape_str(images.shape()));
  if (images.dim(2) != cfg_.image_size || images.dim(3) != cfg_.image_size)
    throw std::invalid_argument("encode_image: image " + shape_str(images.shape()) +
                                " does not match configured size " +
                                std::to_string(cfg_.image_size));
  const std::size_t b = images.dim(0), d = cfg_.d, p = cfg_.grid(), np = p * p;
  const std::size_t heads = cfg_.attn_heads, dh = d / heads;

  ImageFeatures f;
  f.patch_grid = add(mix_(relu(patch_embed_(relu(stem_(images))))), pos_);

  // Multi-head attention pooling over the patch tokens.
  Tensor tokens = reshape(transpose(reshape(f.patch_grid, {b, d, np})), {b * np, d});
  Tensor scores = reshape(scale(attn_query_(tokens), 1.0 / std::sqrt(static_cast<double>(d))),
                          {b, np, heads});
  Tensor attn = reshape(softmax(scores, 1), {b, np, heads, 1});
  Tensor values = reshape(attn_value_(tokens), {b, np, heads, dh});
  Tensor pooled = reshape(sum(mul(attn, values), 1), {b, d});
  f.cls = add(pooled, cls_ff2_(relu(cls_ff1_(pooled))));
  f.semantic = proj_(f.cls);
  return f;
}

void ImageEncoder::collect(const std::string& prefix, NamedTensors& out) const {
  stem_.collect(prefix + ".stem", out);
  patch_embed_.collect(prefix + ".patch_embed", out);
  mix_.collect(prefix + ".mix", out);
  out.emplace_back(prefix + ".pos_embed", pos_);
  attn_query_.collect(prefix + ".attn_query", out);
  attn_value_.collect(prefix + ".attn_value", out);
  cls_ff1_.collect(prefix + ".cls_ff1", out);
  cls_ff2_.collect(prefix + ".cls_ff2", out);
  proj_.collect(prefix + ".proj", out);
}

TextEncoder::TextEncoder(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  tok_ = uniform_param({cfg.vocab_size, cfg.d}, 1.0, rng);
  pos_ = uniform_param({cfg.l_max, cfg.d}, 0.1, rng);
  q_ = Linear(cfg.d, cfg.d, rng);
  k_ = Linear(cfg.d, cfg.d, rng);
  v_ = Linear(cfg.d, cfg.d, rng);
  o_ = Linear(cfg.d, cfg.d, rng);
  ff1_ = Linear(cfg.d, 2 * cfg.d, rng);
  ff2_ = Linear(2 * cfg.d, cfg.d, rng);
  proj_ = Linear(cfg.d, cfg.d_s, rng);
}

TextFeatures TextEncoder::encode(const TokenBatch& tokens) const {
  const std::size_t b = tokens.batch, l = cfg_.l_max, d = cfg_.d;
  if (b == 0 || tokens.length != l || tokens.ids.size() != b * l)
    throw std::invalid_argument("encode_text expects a [B, " + std::to_string(l) +
                                "] token batch");
  std::vector<double> key_bias(b * l, 0.0), keep(b * l, 0.0), pool(b * l, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t words = 0;
    for (std::size_t j = 0; j < l; ++j) {
      const std::size_t id = tokens.ids[i * l + j];
      if (id >= cfg_.vocab_size)
        throw std::invalid_argument("encode_text: unknown token id " + std::to_string(id));
      const bool pad = id == cfg_.pad_id;
      key_bias[i * l + j] = pad ? -1e9 : 0.0;
      keep[i * l + j] = pad ? 0.0 : 1.0;
      if (!pad && j > 0) ++words;
    }
    for (std::size_t j = 1; j < l; ++j)
      if (keep[i * l + j] > 0) pool[i * l + j] = 1.0 / static_cast<double>(words);
    if (words == 0) pool[i * l] = 1.0;
  }

  Tensor x = add(reshape(index_select(tok_, tokens.ids), {b, l, d}), pos_);
  Tensor x2 = reshape(x, {b * l, d});
  Tensor q = reshape(q_(x2), {b, l, d});
  Tensor k = reshape(k_(x2), {b, l, d});
  Tensor v = reshape(v_(x2), {b, l, d});
  Tensor scores = add(scale(bmm(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d))),
                      Tensor::from({b, 1, l}, key_bias));
  Tensor attended = reshape(bmm(softmax(scores, 2), v), {b * l, d});
  Tensor h = add(x2, o_(attended));
  h = add(h, ff2_(relu(ff1_(h))));

  TextFeatures f;
  f.token_grid = mul(reshape(h, {b, l, d}), Tensor::from({b, l, 1}, keep));
  f.cls = reshape(slice(f.token_grid, 1, 0, 1), {b, d});
  f.pooled = sum(mul(f.token_grid, Tensor::from({b, l, 1}, pool)), 1);
  f.semantic = proj_(f.cls);
  return f;
}

void TextEncoder::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".token_embed", tok_);
  out.emplace_back(prefix + ".pos_embed", pos_);
  q_.collect(prefix + ".attn.q", out);
  k_.collect(prefix + ".attn.k", out);
  v_.collect(prefix + ".attn.v", out);
  o_.collect(prefix + ".attn.o", out);
  ff1_.collect(prefix + ".ff1", out);
  ff2_.collect(prefix + ".ff2", out);
  proj_.collect(prefix + ".proj", out);
}

GaussianHead::GaussianHead(std::size_t in, std::size_t out, Rng& rng)
    : mu_(in, out, rng), log_var_(in, out, rng) {}

GaussianEmbedding GaussianHead::operator()(const Tensor& cls) const {
  for (double v : cls.data())
    if (!std::isfinite(v)) throw std::invalid_argument("gaussian_head: non-finite input");
  GaussianEmbedding g;
  g.mu = mu_(cls);
  g.log_var = log_var_(cls);
  g.sigma = exp(scale(g.log_var, 0.5));
  return g;
}

void GaussianHead::collect(const std::string& prefix, NamedTensors& out) const {
  mu_.collect(prefix + ".mu", out);
  log_var_.collect(prefix + ".log_var", out);
}

void GaussianHead::zero() {
  for (Linear* l : {&mu_, &log_var_}) {
    for (double& w : l->weight.mutable_data()) w = 0.0;
    for (double& w : l->bias.mutable_data()) w = 0.0;
  }
}

GroundingDecoder::GroundingDecoder(const ModelConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg_.validate();
  for (std::size_t s = 0; s < cfg.ground_stages(); ++s)
    stages_.emplace_back(cfg.d, cfg.d, cfg.ground_kernel, 1, cfg.ground_kernel / 2, rng);
}

Tensor GroundingDecoder::operator()(const Tensor& patch_grid) const {
  if (patch_grid.rank() != 4 || patch_grid.dim(1) != cfg_.d || patch_grid.dim(2) != cfg_.grid() ||
      patch_grid.dim(3) != cfg_.grid())
    throw std::invalid_argument("ground: patch grid " + shape_str(patch_grid.shape()) +
                                " does not match configured resolution " +
                                std::to_string(cfg_.grid()));
  Tensor x = patch_grid;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    x = stages_[s](upsample2x(x));
    if (s + 1 < stages_.size()) x = relu(x);
  }
  return x;
}

void GroundingDecoder::collect(const std::string& prefix, NamedTensors& out) const {
  for (std::size_t s = 0; s < stages_.size(); ++s)
    stages_[s].collect(prefix + ".stage" + std::to_string(s), out);
}

void GroundingDecoder::set_identity() {
  const std::size_t d = cfg_.d, k = cfg_.ground_kernel, c = k / 2;
  for (auto& st : stages_) {
    auto w = st.weight.mutable_data();
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t o = 0; o < d; ++o) w[((o * d + o) * k + c) * k + c] = 1.0;
    for (double& b : st.bias.mutable_data()) b = 0.0;
  }
}

SegNetwork::SegNetwork(const ModelConfig& cfg, Rng& rng) : image_size_(cfg.image_size) {
  const std::size_t c = cfg.seg_channels;
  enc1a_ = Conv2d(1, c, 3, 1, 1, rng);
  enc1b_ = Conv2d(c, c, 3, 1, 1, rng);
  enc2a_ = Conv2d(c, 2 * c, 3, 1, 1, rng);
  enc2b_ = Conv2d(2 * c, 2 * c, 3, 1, 1, rng);
  dec1_ = Conv2d(3 * c, c, 3, 1, 1, rng);
  head_ = Conv2d(c, 1, 1, 1, 0, rng);
  // He-uniform for the layers that feed a ReLU.
  for (Conv2d* conv : {&enc1a_, &enc1b_, &enc2a_, &enc2b_, &dec1_})
    for (double& w : conv->weight.mutable_data()) w *= std::sqrt(6.0);
}

Tensor SegNetwork::forward(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != image_size_ ||
      images.dim(3) != image_size_)
    throw std::invalid_argument("seg_forward expects [B,1," + std::to_string(image_size_) + "," +
                                std::to_string(image_size_) + "], got " +
                                shape_str(images.shape()));
  const std::size_t b = images.dim(0), h = images.dim(2), w = images.dim(3);
  Tensor s1 = relu(enc1b_(relu(enc1a_(images))));
  Tensor s2 = relu(enc2b_(relu(enc2a_(avg_pool2x(s1)))));
  Tensor up = concat({upsample2x(s2), s1}, 1);
  Tensor logits = head_(relu(dec1_(up)));
  return reshape(logits, {b, h, w});
}

NamedTensors SegNetwork::named_parameters(const std::string& prefix) const {
  NamedTensors out;
  enc1a_.collect(prefix + "enc1a", out);
  enc1b_.collect(prefix + "enc1b", out);
  enc2a_.collect(prefix + "enc2a", out);
  enc2b_.collect(prefix + "enc2b", out);
  dec1_.collect(prefix + "dec1", out);
  head_.collect(prefix + "head", out);
  return out;
}

void SegNetwork::zero_final_layer() {
  for (double& w : head_.weight.mutable_data()) w = 0.0;
  for (double& w : head_.bias.mutable_data()) w = 0.0;
}

Vlm::Vlm(const ModelConfig& config, std::uint64_t seed, double tau_init) : cfg(config) {
  cfg.validate();
  Rng r_img = make_rng(seed, "image_encoder");
  Rng r_txt = make_rng(seed, "text_encoder");
  Rng r_ig = make_rng(seed, "image_gaussian");
  Rng r_tg = make_rng(seed, "text_gaussian");
  Rng r_gr = make_rng(seed, "grounding");
  image_encoder = ImageEncoder(cfg, r_img);
  text_encoder = TextEncoder(cfg, r_txt);
  image_gaussian = GaussianHead(cfg.d, cfg.d_u, r_ig);
  text_gaussian = GaussianHead(cfg.d, cfg.d_u, r_tg);
  grounding = GroundingDecoder(cfg, r_gr);
  log_tau = Tensor::scalar(std::log(tau_init), true);
}

NamedTensors Vlm::encoder_parameters() const {
  NamedTensors out;
  image_encoder.collect("image_encoder", out);
  text_encoder.collect("text_encoder", out);
  image_gaussian.collect("image_gaussian", out);
  text_gaussian.collect("text_gaussian", out);
  return out;
}

NamedTensors Vlm::grounding_parameters() const {
  NamedTensors out;
  grounding.collect("grounding", out);
  return out;
}

NamedTensors Vlm::named_parameters() const {
  NamedTensors out = encoder_parameters();
  for (auto& p : grounding_parameters()) out.push_back(p);
  out.emplace_back("log_tau", log_tau);
  return out;
}

Tensor stack_images(const std::vector<const std::vector<double>*>& images, std::size_t size) {
  if (images.empty()) throw std::invalid_argument("stack_images: empty batch");
  std::vector<double> v;
  v.reserve(images.size() * size * size);
  for (const auto* img : images) {
    if (img->size() != size * size)
      throw std::invalid_argument("stack_images: image has " + std::to_string(img->size()) +
                                  " pixels, expected " + std::to_string(size * size));
    v.insert(v.end(), img->begin(), img->end());
  }
  return Tensor::from({images.size(), 1, size, size}, std::move(v));
}

std::vector<Tensor> tensors_of(const NamedTensors& named) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

}  // namespace dusss
