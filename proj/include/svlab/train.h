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

// Adam, the triangular2 cyclical learning rate, batch sampling and the
// initial / large-margin fine-tuning training loops.

#ifndef SVLAB_TRAIN_H_
#define SVLAB_TRAIN_H_

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "svlab/audiofeat.h"
#include "svlab/models.h"

namespace svlab {

struct ClrSchedule {
  std::size_t step_size = 1000;  // iterations per half cycle
  double lr_min = 1e-8;
  double lr_max = 1e-3;

  void validate() const;
  nlohmann::json to_json() const;
  static ClrSchedule from_json(const nlohmann::json& j);
};

// triangular2: peaks halve every cycle.
double clr_lr(std::size_t it, const ClrSchedule& sched);

// Adam with bias correction. Weight decay is coupled: g += lambda * w before
// the moment updates.
class Adam {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(const Options& options) : options_(options) {}

  void add_parameter(const std::string& name, Tensor param, double weight_decay);
  // Throws NumericError naming the parameter if any gradient is not finite.
  // Parameters without a gradient are treated as having zero gradient.
  void step(double lr);
  void zero_grad();

  std::size_t num_steps() const { return t_; }
  double weight_decay(const std::string& name) const;

 private:
  struct Slot {
    std::string name;
    Tensor param;
    double weight_decay;
    std::vector<double> m, v;
  };
  Options options_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

inline constexpr double kHeadWeightDecay = 2e-4;
inline constexpr double kBodyWeightDecay = 2e-5;

// Registers every model parameter with the body decay and the AAM
// prototypes with the head decay.
void add_model_parameters(Adam& adam, const models::EmbeddingExtractor& model,
                          models::AAMHead& head, double body_decay = kBodyWeightDecay,
                          double head_decay = kHeadWeightDecay);

enum class SamplerMode { kUniform, kDomainBalanced };
std::string to_string(SamplerMode mode);
SamplerMode sampler_mode_from_string(const std::string& name);

// Draws utterance indices. Domain-balanced mode builds a pool holding one
// random utterance for each of speakers_per_domain random speakers in every
// domain, consumes it without replacement and rebuilds it when exhausted.
class BatchSampler {
 public:
  BatchSampler(std::vector<audio::UtteranceInfo> corpus, SamplerMode mode,
               std::size_t speakers_per_domain, std::uint64_t seed);

  std::vector<std::size_t> next(std::size_t batch_size);
  // Effective speakers per domain after clamping to availability.
  std::size_t speakers_per_domain() const { return speakers_per_domain_; }
  std::size_t pool_size() const;

 private:
  void rebuild_pool();

  std::vector<audio::UtteranceInfo> corpus_;
  SamplerMode mode_;
  std::size_t speakers_per_domain_;
  Rng rng_;
  // domain -> speaker -> utterance indices, in sorted key order.
  std::map<std::string, std::map<std::string, std::vector<std::size_t>>> index_;
  std::vector<std::size_t> pool_;
  std::size_t pool_pos_ = 0;
};

// Training data held in memory: waveforms plus dense speaker labels.
struct TrainingCorpus {
  std::vector<audio::Utterance> utterances;
  std::vector<std::size_t> labels;
  std::vector<std::string> speakers;  // label -> speaker id

  static TrainingCorpus from_utterances(std::vector<audio::Utterance> utts);
  std::vector<audio::UtteranceInfo> infos() const;
};

struct TrainOptions {
  ClrSchedule schedule;
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double crop_s = 2.0;
  SamplerMode sampler = SamplerMode::kUniform;
  std::size_t speakers_per_domain = 588;
  bool augment = true;
  bool spec_augment = true;
  double body_weight_decay = kBodyWeightDecay;
  double head_weight_decay = kHeadWeightDecay;
  std::uint64_t seed = 0;
  std::string stage = "train";  // seeds and checkpoint names are keyed by it
  // When non-empty, checkpoints go here at every CLR peak and trough and at
  // the end.
  std::filesystem::path checkpoint_dir;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainOptions from_json(const nlohmann::json& j);
};

struct FineTuneSpec {
  double crop_s = 3.0;
  double margin = 0.3;
  bool domain_balanced = true;
  std::size_t speakers_per_domain = 588;
  std::size_t steps = 300;
  double lr_max = 1e-4;
  std::size_t step_size = 150;

  void validate() const;
  nlohmann::json to_json() const;
  static FineTuneSpec from_json(const nlohmann::json& j);
  static FineTuneSpec preset_3s();  // (3 s, m = 0.3)
  static FineTuneSpec preset_6s();  // (6 s, m = 0.5)
};

struct LossRecord {
  std::size_t step;
  double lr;
  double loss;
};

struct TrainResult {
  std::vector<LossRecord> trace;
  std::vector<std::filesystem::path> checkpoints;
};

std::string format_loss_trace(const std::vector<LossRecord>& trace);

// Steps the model and head in place. Loss that is not finite aborts with
// NumericError.
TrainResult train(models::Checkpoint& ckpt, const TrainingCorpus& corpus,
                  const TrainOptions& options);

// Sets the margin, crop and sampler from spec and restarts the learning rate
// on a fresh cycle with spec.lr_max, then trains for spec.steps.
TrainResult finetune(models::Checkpoint& ckpt, const TrainingCorpus& corpus,
                     const FineTuneSpec& spec, const TrainOptions& base);

// Index of the checkpoint with the lowest validation EER (first on ties).
std::size_t select_checkpoint(const std::vector<std::filesystem::path>& checkpoints,
                              const std::function<double(models::Checkpoint&)>& validation_eer);

}  // namespace svlab

#endif  // SVLAB_TRAIN_H_
