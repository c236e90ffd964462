// Copyright 2026 The svlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "svlab/models.h"

#include <cmath>
#include <map>
#include <set>

#include "svlab/errors.h"

namespace svlab::models {

namespace {

// PyTorch default for conv/linear: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.mutable_data()) v = u(rng);
  return t;
}

std::size_t se_bottleneck(std::size_t channels) { return std::max<std::size_t>(4, channels / 8); }

std::size_t fwse_bottleneck(std::size_t freq) { return std::max<std::size_t>(1, freq / 2); }

std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace

// ---------------------------------------------------------------------------
// Module.

Tensor Module::register_parameter(std::string name, Tensor t) {
  t.set_requires_grad(true);
  params_.push_back({std::move(name), t});
  return t;
}

Tensor Module::register_buffer(std::string name, Tensor t) {
  buffers_.push_back({std::move(name), t});
  return t;
}

void Module::register_module(std::string name, Module& child) {
  children_.emplace_back(std::move(name), &child);
}

void Module::collect(const std::string& prefix, bool params, std::vector<NamedTensor>& out) const {
  for (const NamedTensor& nt : params ? params_ : buffers_) {
    out.push_back({join_name(prefix, nt.name), nt.tensor});
  }
  for (const auto& [name, child] : children_) child->collect(join_name(prefix, name), params, out);
}

std::vector<NamedTensor> Module::parameters() const {
  std::vector<NamedTensor> out;
  collect("", true, out);
  return out;
}

std::vector<NamedTensor> Module::buffers() const {
  std::vector<NamedTensor> out;
  collect("", false, out);
  return out;
}

std::vector<NamedTensor> Module::state() const {
  std::vector<NamedTensor> out = parameters();
  collect("", false, out);
  return out;
}

void Module::set_training(bool training) {
  training_ = training;
  for (auto& [name, child] : children_) child->set_training(training);
}

void copy_state(const Module& from, Module& to, const std::vector<std::string>& names) {
  std::map<std::string, Tensor> src;
  for (const NamedTensor& nt : from.state()) src.emplace(nt.name, nt.tensor);
  const std::set<std::string> wanted(names.begin(), names.end());
  for (NamedTensor& nt : to.state()) {
    if (!wanted.empty() && !wanted.count(nt.name)) continue;
    auto it = src.find(nt.name);
    if (it == src.end()) throw ShapeError("copy_state: source has no tensor " + nt.name);
    if (it->second.shape() != nt.tensor.shape()) {
      throw ShapeError("copy_state: shape mismatch for " + nt.name + ": " +
                       shape_str(it->second.shape()) + " vs " + shape_str(nt.tensor.shape()));
    }
    auto dst = nt.tensor.mutable_data();
    auto s = it->second.data();
    std::copy(s.begin(), s.end(), dst.begin());
  }
}

// ---------------------------------------------------------------------------
// Layers.

Conv1d::Conv1d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t dilation,
               bool bias, Rng& rng)
    : dilation_(dilation) {
  weight_ = register_parameter("weight", uniform_init({out, in, kernel}, in * kernel, rng));
  if (bias) bias_ = register_parameter("bias", uniform_init({out}, in * kernel, rng));
}

Tensor Conv1d::forward(const Tensor& x) const { return conv1d(x, weight_, bias_, dilation_); }

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Stride2d stride, bool bias,
               Rng& rng)
    : stride_(stride) {
  const std::size_t fan_in = in * kernel * kernel;
  weight_ = register_parameter("weight", uniform_init({out, in, kernel, kernel}, fan_in, rng));
  if (bias) bias_ = register_parameter("bias", uniform_init({out}, fan_in, rng));
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight_, bias_, stride_); }

BatchNorm::BatchNorm(std::size_t channels) {
  gamma_ = register_parameter("weight", Tensor::ones({channels}));
  beta_ = register_parameter("bias", Tensor::zeros({channels}));
  running_mean_ = register_buffer("running_mean", Tensor::zeros({channels}));
  running_var_ = register_buffer("running_var", Tensor::ones({channels}));
}

Tensor BatchNorm::forward(const Tensor& x) {
  return batchnorm(x, gamma_, beta_, running_mean_, running_var_, training());
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng) {
  weight_ = register_parameter("weight", uniform_init({out, in}, in, rng));
  bias_ = register_parameter("bias", uniform_init({out}, in, rng));
}

Tensor Linear::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != weight_.dim(1)) {
    throw ShapeError("Linear: expected [B, " + std::to_string(weight_.dim(1)) + "], got " +
                     shape_str(x.shape()));
  }
  return add(matmul(x, transpose(weight_)), bias_);
}

SEBlock::SEBlock(std::size_t channels, std::size_t bottleneck, Rng& rng)
    : channels_(channels), fc1_(channels, bottleneck, rng), fc2_(bottleneck, channels, rng) {
  register_module("fc1", fc1_);
  register_module("fc2", fc2_);
}

Tensor SEBlock::scales(const Tensor& x) const {
  if (x.rank() < 3 || x.dim(1) != channels_) {
    throw ShapeError("SEBlock: expected [B, " + std::to_string(channels_) + ", ...], got " +
                     shape_str(x.shape()));
  }
  std::vector<std::size_t> axes;
  for (std::size_t a = 2; a < x.rank(); ++a) axes.push_back(a);
  const Tensor z = mean(x, axes);
  return sigmoid(fc2_.forward(relu(fc1_.forward(z))));
}

Tensor SEBlock::forward(const Tensor& x) const {
  const Tensor s = scales(x);
  Shape bshape(x.rank(), 1);
  bshape[0] = x.dim(0);
  bshape[1] = channels_;
  return mul(x, reshape(s, bshape));
}

FwSEBlock::FwSEBlock(std::size_t freq, std::size_t bottleneck, Rng& rng)
    : freq_(freq), fc1_(freq, bottleneck, rng), fc2_(bottleneck, freq, rng) {
  register_module("fc1", fc1_);
  register_module("fc2", fc2_);
}

Tensor FwSEBlock::scales(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(2) != freq_) {
    throw ShapeError("FwSEBlock: expected [B, C, " + std::to_string(freq_) + ", T], got " +
                     shape_str(x.shape()));
  }
  const Tensor z = mean(x, {1, 3});  // [B, F]
  return sigmoid(fc2_.forward(relu(fc1_.forward(z))));
}

Tensor FwSEBlock::forward(const Tensor& x) const {
  const Tensor s = scales(x);
  return mul(x, reshape(s, {x.dim(0), 1, freq_, 1}));
}

FreqPositionalEncoding::FreqPositionalEncoding(std::size_t freq) {
  p_ = register_parameter("p", Tensor::zeros({freq}));
}

Tensor FreqPositionalEncoding::forward(const Tensor& x) const {
  if (x.rank() < 2 || x.dim(x.rank() - 2) != p_.dim(0)) {
    throw ShapeError("FreqPositionalEncoding: length " + std::to_string(p_.dim(0)) +
                     " does not match input " + shape_str(x.shape()));
  }
  return add(x, reshape(p_, {p_.dim(0), 1}));
}

TdnnBlock::TdnnBlock(std::size_t in, std::size_t out, std::size_t kernel, std::size_t dilation,
                     Rng& rng)
    : conv_(in, out, kernel, dilation, true, rng), bn_(out) {
  register_module("conv", conv_);
  register_module("bn", bn_);
}

Tensor TdnnBlock::forward(const Tensor& x) { return bn_.forward(relu(conv_.forward(x))); }

ConvStem::ConvStem(std::size_t channels, Rng& rng)
    : conv1_(1, channels, 3, {2, 1}, true, rng),
      conv2_(channels, channels, 3, {1, 1}, true, rng),
      conv3_(channels, channels, 3, {2, 1}, true, rng),
      bn1_(channels),
      bn2_(channels),
      bn3_(channels) {
  register_module("conv1", conv1_);
  register_module("bn1", bn1_);
  register_module("conv2", conv2_);
  register_module("bn2", bn2_);
  register_module("conv3", conv3_);
  register_module("bn3", bn3_);
}

Tensor ConvStem::forward(const Tensor& feats) {
  const std::size_t b = feats.dim(0), f = feats.dim(1), t = feats.dim(2);
  Tensor x = reshape(feats, {b, 1, f, t});
  x = bn1_.forward(relu(conv1_.forward(x)));
  x = bn2_.forward(relu(conv2_.forward(x)));
  x = bn3_.forward(relu(conv3_.forward(x)));
  return reshape(x, {b, x.dim(1) * x.dim(2), t});
}

Res2Conv::Res2Conv(std::size_t channels, std::size_t scale, std::size_t kernel,
                   std::size_t dilation, Rng& rng)
    : width_(channels / scale) {
  if (scale < 2 || channels % scale != 0) {
    throw ConfigError("Res2Conv: channels " + std::to_string(channels) +
                      " not divisible into scale " + std::to_string(scale));
  }
  for (std::size_t i = 0; i + 1 < scale; ++i) {
    convs_.push_back(std::make_unique<TdnnBlock>(width_, width_, kernel, dilation, rng));
    register_module("convs." + std::to_string(i), *convs_.back());
  }
}

Tensor Res2Conv::forward(const Tensor& x) {
  std::vector<Tensor> outs;
  outs.push_back(slice(x, 1, 0, width_));
  Tensor prev;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    Tensor xi = slice(x, 1, (i + 1) * width_, width_);
    if (prev.defined()) xi = add(xi, prev);
    prev = convs_[i]->forward(xi);
    outs.push_back(prev);
  }
  return concat(outs, 1);
}

SERes2Block::SERes2Block(std::size_t channels, std::size_t scale, std::size_t dilation,
                         std::size_t se_bottleneck_dim, Rng& rng)
    : in_(channels, channels, 1, 1, rng),
      res2_(channels, scale, 3, dilation, rng),
      out_(channels, channels, 1, 1, rng),
      se_(channels, se_bottleneck_dim, rng) {
  register_module("tdnn1", in_);
  register_module("res2", res2_);
  register_module("tdnn2", out_);
  register_module("se", se_);
}

Tensor SERes2Block::forward(const Tensor& x) {
  Tensor y = out_.forward(res2_.forward(in_.forward(x)));
  return add(se_.forward(y), x);
}

AttentiveStatsPool::AttentiveStatsPool(std::size_t channels, std::size_t attention, Rng& rng)
    : attn1_(3 * channels, attention, 1, 1, true, rng),
      attn2_(attention, channels, 1, 1, true, rng) {
  register_module("attn1", attn1_);
  register_module("attn2", attn2_);
}

Tensor AttentiveStatsPool::attention_weights(const Tensor& h) {
  if (h.rank() != 3) throw ShapeError("AttentiveStatsPool: expected [B, C, T], got " + shape_str(h.shape()));
  const std::size_t t = h.dim(2);
  if (t == 0) throw DataError("AttentiveStatsPool: empty input (T = 0)");
  const Tensor stretch = Tensor::zeros({t});
  const Tensor mu = mean(h, {2}, true);
  const Tensor sd = sqrt(clamp_min(variance(h, {2}, true), kStdFloor));
  const Tensor context = concat({h, add(mu, stretch), add(sd, stretch)}, 1);
  const Tensor e = attn2_.forward(tanh(attn1_.forward(context)));
  return softmax(e, 2);
}

Tensor AttentiveStatsPool::forward(const Tensor& h) {
  const Tensor alpha = attention_weights(h);
  const Tensor mu = sum(mul(alpha, h), {2});
  const Tensor m2 = sum(mul(alpha, square(h)), {2});
  const Tensor sd = sqrt(clamp_min(sub(m2, square(mu)), kStdFloor));
  return concat({mu, sd}, 1);
}

ResBlock::ResBlock(std::size_t in, std::size_t out, std::size_t freq_in, Stride2d stride,
                   Excitation excitation, bool positional, Rng& rng)
    : conv1_(in, out, 3, stride, false, rng),
      bn1_(out),
      conv2_(out, out, 3, {1, 1}, false, rng),
      bn2_(out) {
  register_module("conv1", conv1_);
  register_module("bn1", bn1_);
  register_module("conv2", conv2_);
  register_module("bn2", bn2_);
  const std::size_t freq_out = (freq_in + stride.freq - 1) / stride.freq;
  if (excitation == Excitation::kChannel) {
    se_ = std::make_unique<SEBlock>(out, se_bottleneck(out), rng);
    register_module("se", *se_);
  } else {
    fwse_ = std::make_unique<FwSEBlock>(freq_out, fwse_bottleneck(freq_out), rng);
    register_module("fwse", *fwse_);
  }
  if (positional) {
    pos_ = std::make_unique<FreqPositionalEncoding>(freq_in);
    register_module("pos", *pos_);
  }
  if (in != out || stride.freq != 1 || stride.time != 1) {
    skip_conv_ = std::make_unique<Conv2d>(in, out, 1, stride, false, rng);
    skip_bn_ = std::make_unique<BatchNorm>(out);
    register_module("skip_conv", *skip_conv_);
    register_module("skip_bn", *skip_bn_);
  }
}

Tensor ResBlock::forward(const Tensor& x) {
  const Tensor skip = skip_conv_ ? skip_bn_->forward(skip_conv_->forward(x)) : x;
  Tensor y = pos_ ? pos_->forward(x) : x;
  y = relu(bn1_.forward(conv1_.forward(y)));
  y = bn2_.forward(conv2_.forward(y));
  y = se_ ? se_->forward(y) : fwse_->forward(y);
  return relu(add(y, skip));
}

// ---------------------------------------------------------------------------
// Architectures.

std::string to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::kEcapaTdnn: return "ecapa_tdnn";
    case ArchKind::kEcapaCnnTdnn: return "ecapa_cnn_tdnn";
    case ArchKind::kSeResNet34: return "se_resnet34";
    case ArchKind::kFwSeResNet34Pos: return "fwse_resnet34_pos";
  }
  return "unknown";
}

ArchKind arch_kind_from_string(const std::string& name) {
  for (ArchKind k : {ArchKind::kEcapaTdnn, ArchKind::kEcapaCnnTdnn, ArchKind::kSeResNet34,
                     ArchKind::kFwSeResNet34Pos}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown architecture kind \"" + name + "\"");
}

void ArchitectureConfig::validate() const {
  const std::pair<const char*, std::size_t> fields[] = {
      {"feat_dim", feat_dim},           {"tdnn_channels", tdnn_channels},
      {"res2_scale", res2_scale},       {"mfa_channels", mfa_channels},
      {"stem_channels", stem_channels}, {"resnet_width", resnet_width},
      {"attention_channels", attention_channels}, {"embedding_dim", embedding_dim}};
  for (const auto& [name, value] : fields) {
    if (value == 0) throw ConfigError(std::string("architecture: ") + name + " must be positive");
  }
  const bool ecapa = kind == ArchKind::kEcapaTdnn || kind == ArchKind::kEcapaCnnTdnn;
  if (ecapa && (res2_scale < 2 || tdnn_channels % res2_scale != 0)) {
    throw ConfigError("architecture: tdnn_channels must be divisible by res2_scale >= 2");
  }
}

nlohmann::json ArchitectureConfig::to_json() const {
  return {{"kind", to_string(kind)},
          {"feat_dim", feat_dim},
          {"tdnn_channels", tdnn_channels},
          {"res2_scale", res2_scale},
          {"mfa_channels", mfa_channels},
          {"stem_channels", stem_channels},
          {"resnet_width", resnet_width},
          {"attention_channels", attention_channels},
          {"embedding_dim", embedding_dim}};
}

namespace {

std::size_t json_size(const nlohmann::json& j, const std::string& key, const std::string& where) {
  if (!j.at(key).is_number_integer() || j.at(key).get<std::int64_t>() < 0) {
    throw ConfigError(where + ": " + key + " must be a non-negative integer");
  }
  return j.at(key).get<std::size_t>();
}

double json_double(const nlohmann::json& j, const std::string& key, const std::string& where) {
  if (!j.at(key).is_number()) throw ConfigError(where + ": " + key + " must be a number");
  return j.at(key).get<double>();
}

}  // namespace

ArchitectureConfig ArchitectureConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("architecture: expected a JSON object");
  ArchitectureConfig c;
  std::map<std::string, std::size_t*> sizes = {
      {"feat_dim", &c.feat_dim},           {"tdnn_channels", &c.tdnn_channels},
      {"res2_scale", &c.res2_scale},       {"mfa_channels", &c.mfa_channels},
      {"stem_channels", &c.stem_channels}, {"resnet_width", &c.resnet_width},
      {"attention_channels", &c.attention_channels}, {"embedding_dim", &c.embedding_dim}};
  bool mfa_given = false;
  for (const auto& [key, value] : j.items()) {
    if (key == "kind") {
      if (!value.is_string()) throw ConfigError("architecture: kind must be a string");
      c.kind = arch_kind_from_string(value.get<std::string>());
    } else if (auto it = sizes.find(key); it != sizes.end()) {
      *it->second = json_size(j, key, "architecture");
      mfa_given |= key == "mfa_channels";
    } else {
      throw ConfigError("architecture: unknown key \"" + key + "\"");
    }
  }
  if (!mfa_given) c.mfa_channels = 3 * c.tdnn_channels / 2;
  c.validate();
  return c;
}

EmbeddingExtractor::EmbeddingExtractor(const ArchitectureConfig& config, Rng& rng)
    : config_(config) {
  config_.validate();
  const auto& c = config_;
  std::size_t pool_channels = 0;
  if (c.kind == ArchKind::kEcapaTdnn || c.kind == ArchKind::kEcapaCnnTdnn) {
    std::size_t in = c.feat_dim;
    if (c.kind == ArchKind::kEcapaCnnTdnn) {
      conv_stem_ = std::make_unique<ConvStem>(c.stem_channels, rng);
      register_module("conv_stem", *conv_stem_);
      in = c.stem_channels * ConvStem::output_freq(c.feat_dim);
    }
    stem1d_ = std::make_unique<TdnnBlock>(in, c.tdnn_channels, 5, 1, rng);
    register_module("stem", *stem1d_);
    for (std::size_t dilation : {2, 3, 4, 5}) {
      blocks_.push_back(std::make_unique<SERes2Block>(c.tdnn_channels, c.res2_scale, dilation,
                                                      se_bottleneck(c.tdnn_channels), rng));
      register_module("blocks." + std::to_string(blocks_.size() - 1), *blocks_.back());
    }
    mfa_ = std::make_unique<TdnnBlock>(4 * c.tdnn_channels, c.mfa_channels, 1, 1, rng);
    register_module("mfa", *mfa_);
    pool_channels = c.mfa_channels;
  } else {
    const std::size_t w = c.resnet_width;
    res_stem_ = std::make_unique<Conv2d>(1, w, 3, Stride2d{1, 1}, false, rng);
    res_stem_bn_ = std::make_unique<BatchNorm>(w);
    register_module("stem_conv", *res_stem_);
    register_module("stem_bn", *res_stem_bn_);
    const Excitation ex =
        c.kind == ArchKind::kSeResNet34 ? Excitation::kChannel : Excitation::kFrequency;
    const bool positional = c.kind == ArchKind::kFwSeResNet34Pos;
    const std::size_t depth[] = {3, 4, 6, 3};
    std::size_t in = w, freq = c.feat_dim;
    for (std::size_t stage = 0; stage < 4; ++stage) {
      const std::size_t out = w << stage;
      for (std::size_t i = 0; i < depth[stage]; ++i) {
        const Stride2d stride = (stage > 0 && i == 0) ? Stride2d{2, 2} : Stride2d{1, 1};
        res_blocks_.push_back(
            std::make_unique<ResBlock>(in, out, freq, stride, ex, positional, rng));
        register_module("layers." + std::to_string(res_blocks_.size() - 1), *res_blocks_.back());
        in = out;
        freq = (freq + stride.freq - 1) / stride.freq;
      }
    }
    pool_channels = in * freq;
  }
  pool_ = std::make_unique<AttentiveStatsPool>(pool_channels, c.attention_channels, rng);
  register_module("pool", *pool_);
  pooled_dim_ = 2 * pool_channels;
  if (stem1d_) {
    pool_bn_ = std::make_unique<BatchNorm>(pooled_dim_);
    register_module("pool_bn", *pool_bn_);
  }
  embed_ = std::make_unique<Linear>(pooled_dim_, c.embedding_dim, rng);
  register_module("embed", *embed_);
}

ForwardOutput EmbeddingExtractor::forward(const Tensor& feats) {
  if (feats.rank() != 3 || feats.dim(1) != config_.feat_dim || feats.dim(2) == 0) {
    throw ShapeError("model: expected features [B, " + std::to_string(config_.feat_dim) +
                     ", T>0], got " + shape_str(feats.shape()));
  }
  return stem1d_ ? forward_ecapa(feats) : forward_resnet(feats);
}

ForwardOutput EmbeddingExtractor::forward_ecapa(const Tensor& feats) {
  Tensor x = conv_stem_ ? conv_stem_->forward(feats) : feats;
  x = stem1d_->forward(x);
  std::vector<Tensor> taps;
  for (auto& block : blocks_) {
    x = block->forward(x);
    taps.push_back(x);
  }
  Tensor h = mfa_->forward(concat(taps, 1));
  Tensor pooled = pool_->forward(h);
  return {embed_->forward(pool_bn_->forward(pooled)), pooled};
}

ForwardOutput EmbeddingExtractor::forward_resnet(const Tensor& feats) {
  const std::size_t b = feats.dim(0);
  Tensor x = reshape(feats, {b, 1, feats.dim(1), feats.dim(2)});
  x = relu(res_stem_bn_->forward(res_stem_->forward(x)));
  for (auto& block : res_blocks_) x = block->forward(x);
  x = reshape(x, {b, x.dim(1) * x.dim(2), x.dim(3)});
  Tensor pooled = pool_->forward(x);
  return {embed_->forward(pooled), pooled};
}

// ---------------------------------------------------------------------------
// AAM head.

void AAMConfig::validate() const {
  if (num_classes == 0) throw ConfigError("aam: num_classes must be positive");
  if (sub_centers == 0) throw ConfigError("aam: sub_centers must be positive");
  if (embedding_dim == 0) throw ConfigError("aam: embedding_dim must be positive");
  if (!(margin >= 0.0 && margin < M_PI / 2)) throw ConfigError("aam: margin must lie in [0, pi/2)");
  if (!(scale > 0.0)) throw ConfigError("aam: scale must be positive");
}

nlohmann::json AAMConfig::to_json() const {
  return {{"num_classes", num_classes},
          {"sub_centers", sub_centers},
          {"embedding_dim", embedding_dim},
          {"margin", margin},
          {"scale", scale}};
}

AAMConfig AAMConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("aam: expected a JSON object");
  AAMConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "num_classes") c.num_classes = json_size(j, key, "aam");
    else if (key == "sub_centers") c.sub_centers = json_size(j, key, "aam");
    else if (key == "embedding_dim") c.embedding_dim = json_size(j, key, "aam");
    else if (key == "margin") c.margin = json_double(j, key, "aam");
    else if (key == "scale") c.scale = json_double(j, key, "aam");
    else throw ConfigError("aam: unknown key \"" + key + "\"");
  }
  c.validate();
  return c;
}

AAMHead::AAMHead(const AAMConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor w({config_.num_classes, config_.sub_centers, config_.embedding_dim});
  for (double& v : w.mutable_data()) v = n(rng);
  weight_ = register_parameter("weight", w);
}

void AAMHead::set_margin(double m) {
  AAMConfig c = config_;
  c.margin = m;
  c.validate();
  config_ = c;
}

AAMOutput AAMHead::forward(const Tensor& embeddings, std::span<const std::size_t> labels) const {
  const std::size_t s = config_.num_classes, k = config_.sub_centers, d = config_.embedding_dim;
  if (embeddings.rank() != 2 || embeddings.dim(1) != d) {
    throw ShapeError("aam: expected embeddings [B, " + std::to_string(d) + "], got " +
                     shape_str(embeddings.shape()));
  }
  const std::size_t b = embeddings.dim(0);
  if (labels.size() != b) throw DataError("aam: label count does not match batch");
  for (std::size_t label : labels) {
    if (label >= s) {
      throw DataError("aam: label " + std::to_string(label) + " out of range [0, " +
                      std::to_string(s) + ")");
    }
  }
  const Tensor e = l2_normalize(embeddings, 1);
  const Tensor w = l2_normalize(reshape(weight_, {s * k, d}), 1);
  Tensor cosine = matmul(e, transpose(w));  // [B, S*K]
  cosine = k == 1 ? cosine : max(reshape(cosine, {b, s, k}), 2);

  const double m = config_.margin;
  const Tensor sine = sqrt(clamp_min(add(neg(square(cosine)), 1.0), 0.0));
  const Tensor phi = sub(mul(cosine, std::cos(m)), mul(sine, std::sin(m)));
  const Tensor fallback = add(cosine, -m * std::sin(m));
  std::vector<std::uint8_t> valid(b * s), target(b * s, 0);
  const auto cv = cosine.data();
  for (std::size_t i = 0; i < b * s; ++i) valid[i] = cv[i] > -std::cos(m);
  for (std::size_t r = 0; r < b; ++r) target[r * s + labels[r]] = 1;
  const Tensor margin_logit = where(valid, phi, fallback);
  const Tensor logits = mul(where(target, margin_logit, cosine), config_.scale);
  return {cross_entropy(logits, labels), logits, cosine};
}

// ---------------------------------------------------------------------------
// Checkpoints.

namespace {

constexpr std::string_view kModelMagic = "SVMD";

void write_records(BinaryWriter& w, const std::vector<NamedTensor>& records) {
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const NamedTensor& nt : records) {
    w.str(nt.name);
    w.u32(static_cast<std::uint32_t>(nt.tensor.rank()));
    for (std::size_t d : nt.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : nt.tensor.data()) w.f64(v);
  }
}

std::vector<NamedTensor> checkpoint_records(const EmbeddingExtractor& model, const AAMHead& head) {
  std::vector<NamedTensor> records;
  for (NamedTensor& nt : model.state()) records.push_back({"model." + nt.name, nt.tensor});
  for (NamedTensor& nt : head.state()) records.push_back({"head." + nt.name, nt.tensor});
  return records;
}

}  // namespace

std::string serialize_checkpoint(const EmbeddingExtractor& model, const AAMHead& head) {
  const nlohmann::json meta = {{"arch", model.config().to_json()}, {"head", head.config().to_json()}};
  BinaryWriter w;
  w.bytes(kModelMagic);
  w.str(meta.dump());
  write_records(w, checkpoint_records(model, head));
  return w.buffer();
}

void save_checkpoint(const std::filesystem::path& path, const EmbeddingExtractor& model,
                     const AAMHead& head) {
  atomic_write(path, serialize_checkpoint(model, head));
}

Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source) {
  BinaryReader r(bytes, source);
  r.expect_magic(kModelMagic);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.str("config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": malformed config JSON: " + e.what());
  }
  if (!meta.is_object() || !meta.contains("arch") || !meta.contains("head")) {
    throw FormatError(source + ": config must hold \"arch\" and \"head\"");
  }
  Checkpoint ck;
  Rng rng(0);
  try {
    ck.model = std::make_unique<EmbeddingExtractor>(ArchitectureConfig::from_json(meta["arch"]), rng);
    ck.head = std::make_unique<AAMHead>(AAMConfig::from_json(meta["head"]), rng);
  } catch (const ConfigError& e) {
    throw FormatError(source + ": " + e.what());
  }
  std::map<std::string, Tensor> slots;
  for (NamedTensor& nt : checkpoint_records(*ck.model, *ck.head)) slots.emplace(nt.name, nt.tensor);

  const std::uint32_t count = r.u32("record count");
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    r.next_record();
    const std::string name = r.str("name");
    const std::uint32_t rank = r.u32("rank");
    Shape shape;
    for (std::uint32_t a = 0; a < rank; ++a) shape.push_back(r.u32("dim"));
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError(source + ": unexpected tensor " + name);
    if (!seen.insert(name).second) throw FormatError(source + ": duplicate tensor " + name);
    if (it->second.shape() != shape) {
      throw FormatError(source + ": tensor " + name + " has shape " + shape_str(shape) +
                        ", expected " + shape_str(it->second.shape()));
    }
    for (double& v : it->second.mutable_data()) v = r.f64("data");
  }
  if (seen.size() != slots.size()) throw FormatError(source + ": checkpoint is missing tensors");
  if (!r.done()) throw FormatError(source + ": trailing bytes");
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path), path.string());
}

}  // namespace svlab::models
