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

// Neural building blocks and the four speaker-embedding extractors:
//
//   ecapa_tdnn         1D conv stem, four SE-Res2Blocks, MFA, attentive
//                      statistics pooling.
//   ecapa_cnn_tdnn     the same tail behind a 2D convolutional stem.
//   se_resnet34        [3,4,6,3] basic residual blocks with channel SE.
//   fwse_resnet34_pos  frequency-wise SE plus learnable frequency
//                      positional encodings on every residual block.
//
// All batched activations follow [B, C, T] (1D) or [B, C, F, T] (2D).

#ifndef SVLAB_MODELS_H_
#define SVLAB_MODELS_H_

#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "svlab/io.h"
#include "svlab/tensor.h"

namespace svlab::models {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Parameter/buffer registry with dotted names ("blocks.0.se.fc1.weight").
// Modules register their members by handle, so they are neither copyable
// nor movable.
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> buffers() const;
  // Parameters followed by buffers; the checkpoint order.
  std::vector<NamedTensor> state() const;

  void set_training(bool training);
  bool training() const { return training_; }

 protected:
  Tensor register_parameter(std::string name, Tensor t);
  Tensor register_buffer(std::string name, Tensor t);
  void register_module(std::string name, Module& child);

 private:
  void collect(const std::string& prefix, bool params, std::vector<NamedTensor>& out) const;

  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
  std::vector<std::pair<std::string, Module*>> children_;
  bool training_ = true;
};

// Copies values between modules by parameter name; both sides must expose
// the same names and shapes for every name in `names` (all when empty).
void copy_state(const Module& from, Module& to, const std::vector<std::string>& names = {});

// ---------------------------------------------------------------------------
// Layers.

class Conv1d : public Module {
 public:
  Conv1d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t dilation, bool bias,
         Rng& rng);
  Tensor forward(const Tensor& x) const;

 private:
  Tensor weight_, bias_;
  std::size_t dilation_;
};

class Conv2d : public Module {
 public:
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Stride2d stride, bool bias, Rng& rng);
  Tensor forward(const Tensor& x) const;

 private:
  Tensor weight_, bias_;
  Stride2d stride_;
};

class BatchNorm : public Module {
 public:
  explicit BatchNorm(std::size_t channels);
  Tensor forward(const Tensor& x);

 private:
  Tensor gamma_, beta_, running_mean_, running_var_;
};

class Linear : public Module {
 public:
  Linear(std::size_t in, std::size_t out, Rng& rng);
  Tensor forward(const Tensor& x) const;  // [B, in] -> [B, out]
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  Tensor weight_, bias_;
};

// Channel squeeze-excitation: z_c is the mean of channel c over every
// non-channel axis, s = sigmoid(W2 relu(W1 z + b1) + b2), channel c is
// scaled by s_c.
class SEBlock : public Module {
 public:
  SEBlock(std::size_t channels, std::size_t bottleneck, Rng& rng);
  Tensor forward(const Tensor& x) const;  // [B, C, ...]
  Tensor scales(const Tensor& x) const;   // [B, C]
  Linear& fc1() { return fc1_; }
  Linear& fc2() { return fc2_; }

 private:
  std::size_t channels_;
  Linear fc1_, fc2_;
};

// Frequency-wise squeeze-excitation: z_f is the mean of the C x T slice at
// frequency f, s = sigmoid(W2 relu(W1 z + b1) + b2), slice f is scaled by
// s_f.
class FwSEBlock : public Module {
 public:
  FwSEBlock(std::size_t freq, std::size_t bottleneck, Rng& rng);
  Tensor forward(const Tensor& x) const;  // [B, C, F, T]
  Tensor scales(const Tensor& x) const;   // [B, F]
  Linear& fc1() { return fc1_; }
  Linear& fc2() { return fc2_; }

 private:
  std::size_t freq_;
  Linear fc1_, fc2_;
};

// Trainable per-frequency bias p, zero-initialized: out[b,c,f,t] = x + p[f].
class FreqPositionalEncoding : public Module {
 public:
  explicit FreqPositionalEncoding(std::size_t freq);
  Tensor forward(const Tensor& x) const;
  Tensor& encoding() { return p_; }

 private:
  Tensor p_;
};

// conv -> ReLU -> BN.
class TdnnBlock : public Module {
 public:
  TdnnBlock(std::size_t in, std::size_t out, std::size_t kernel, std::size_t dilation, Rng& rng);
  Tensor forward(const Tensor& x);

 private:
  Conv1d conv_;
  BatchNorm bn_;
};

// Three 3x3 2D conv -> ReLU -> BN layers with frequency stride 2 on the
// first and last, then channels x frequency flattened onto one axis.
class ConvStem : public Module {
 public:
  ConvStem(std::size_t channels, Rng& rng);
  Tensor forward(const Tensor& feats);  // [B, F, T] -> [B, C * F/4, T]
  static std::size_t output_freq(std::size_t feat_dim) { return ((feat_dim + 1) / 2 + 1) / 2; }

 private:
  Conv2d conv1_, conv2_, conv3_;
  BatchNorm bn1_, bn2_, bn3_;
};

// Hierarchical grouped dilated convolution: the first group passes
// through, group i convolves (x_i + y_{i-1}).
class Res2Conv : public Module {
 public:
  Res2Conv(std::size_t channels, std::size_t scale, std::size_t kernel, std::size_t dilation,
           Rng& rng);
  Tensor forward(const Tensor& x);

 private:
  std::size_t width_;
  std::vector<std::unique_ptr<TdnnBlock>> convs_;
};

class SERes2Block : public Module {
 public:
  SERes2Block(std::size_t channels, std::size_t scale, std::size_t dilation,
              std::size_t se_bottleneck, Rng& rng);
  Tensor forward(const Tensor& x);

 private:
  TdnnBlock in_;
  Res2Conv res2_;
  TdnnBlock out_;
  SEBlock se_;
};

// Attention weights per channel and frame from [h_t, mean, std]:
// e = W2 tanh(W1 h + b1) + b2, alpha = softmax over t; returns
// [weighted mean, weighted std] of shape [B, 2C].
class AttentiveStatsPool : public Module {
 public:
  AttentiveStatsPool(std::size_t channels, std::size_t attention, Rng& rng);
  Tensor forward(const Tensor& h);  // [B, C, T] -> [B, 2C]
  Tensor attention_weights(const Tensor& h);
  Conv1d& attn1() { return attn1_; }
  Conv1d& attn2() { return attn2_; }

  static constexpr double kStdFloor = 1e-9;

 private:
  Conv1d attn1_, attn2_;
};

enum class Excitation { kChannel, kFrequency };

// conv3x3(stride) -> BN -> ReLU -> conv3x3 -> BN -> excitation, plus the
// (projected) skip, then ReLU. With positional encodings the main branch
// sees x + p while the skip sees x.
class ResBlock : public Module {
 public:
  ResBlock(std::size_t in, std::size_t out, std::size_t freq_in, Stride2d stride,
           Excitation excitation, bool positional, Rng& rng);
  Tensor forward(const Tensor& x);

 private:
  Conv2d conv1_;
  BatchNorm bn1_;
  Conv2d conv2_;
  BatchNorm bn2_;
  std::unique_ptr<SEBlock> se_;
  std::unique_ptr<FwSEBlock> fwse_;
  std::unique_ptr<FreqPositionalEncoding> pos_;
  std::unique_ptr<Conv2d> skip_conv_;
  std::unique_ptr<BatchNorm> skip_bn_;
};

// ---------------------------------------------------------------------------
// Architectures.

enum class ArchKind { kEcapaTdnn, kEcapaCnnTdnn, kSeResNet34, kFwSeResNet34Pos };

std::string to_string(ArchKind kind);
ArchKind arch_kind_from_string(const std::string& name);

struct ArchitectureConfig {
  ArchKind kind = ArchKind::kEcapaTdnn;
  std::size_t feat_dim = 80;
  std::size_t tdnn_channels = 64;
  std::size_t res2_scale = 4;
  std::size_t mfa_channels = 96;  // 3 * tdnn / 2
  std::size_t stem_channels = 32;
  std::size_t resnet_width = 16;
  std::size_t attention_channels = 64;
  std::size_t embedding_dim = 192;

  void validate() const;
  nlohmann::json to_json() const;
  static ArchitectureConfig from_json(const nlohmann::json& j);
};

struct ForwardOutput {
  Tensor embedding;  // [B, d], the bottleneck embedding
  Tensor pooled;     // [B, P], pooling-layer output
};

class EmbeddingExtractor : public Module {
 public:
  EmbeddingExtractor(const ArchitectureConfig& config, Rng& rng);
  const ArchitectureConfig& config() const { return config_; }

  // feats: [B, F, T] equal-length crops.
  ForwardOutput forward(const Tensor& feats);
  std::size_t pooled_dim() const { return pooled_dim_; }

 private:
  ForwardOutput forward_ecapa(const Tensor& feats);
  ForwardOutput forward_resnet(const Tensor& feats);

  ArchitectureConfig config_;
  std::size_t pooled_dim_ = 0;

  std::unique_ptr<ConvStem> conv_stem_;
  std::unique_ptr<TdnnBlock> stem1d_;
  std::vector<std::unique_ptr<SERes2Block>> blocks_;
  std::unique_ptr<TdnnBlock> mfa_;

  std::unique_ptr<Conv2d> res_stem_;
  std::unique_ptr<BatchNorm> res_stem_bn_;
  std::vector<std::unique_ptr<ResBlock>> res_blocks_;

  std::unique_ptr<AttentiveStatsPool> pool_;
  std::unique_ptr<BatchNorm> pool_bn_;
  std::unique_ptr<Linear> embed_;
};

// ---------------------------------------------------------------------------
// Additive angular margin softmax with K sub-centers per class.

struct AAMConfig {
  std::size_t num_classes = 0;
  std::size_t sub_centers = 1;
  std::size_t embedding_dim = 192;
  double margin = 0.2;
  double scale = 30.0;

  void validate() const;
  nlohmann::json to_json() const;
  static AAMConfig from_json(const nlohmann::json& j);
};

struct AAMOutput {
  Tensor loss;    // scalar
  Tensor logits;  // [B, S], scaled
  Tensor cosine;  // [B, S], sub-center max
};

class AAMHead : public Module {
 public:
  AAMHead(const AAMConfig& config, Rng& rng);
  const AAMConfig& config() const { return config_; }
  void set_margin(double m);
  double margin() const { return config_.margin; }
  Tensor& prototypes() { return weight_; }  // [S, K, d]

  AAMOutput forward(const Tensor& embeddings, std::span<const std::size_t> labels) const;

 private:
  AAMConfig config_;
  Tensor weight_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "SVMD", u32-prefixed canonical JSON {"arch", "head"}, u32
// record count, then per record u32 name length, name, u32 rank, rank x u32
// dims, float64 data.

struct Checkpoint {
  std::unique_ptr<EmbeddingExtractor> model;
  std::unique_ptr<AAMHead> head;
};

std::string serialize_checkpoint(const EmbeddingExtractor& model, const AAMHead& head);
void save_checkpoint(const std::filesystem::path& path, const EmbeddingExtractor& model,
                     const AAMHead& head);
Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint parse_checkpoint(const std::string& bytes, const std::string& source);

}  // namespace svlab::models

#endif  // SVLAB_MODELS_H_
