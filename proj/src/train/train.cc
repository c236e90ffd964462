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

#include "svlab/train.h"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "svlab/errors.h"
#include "svlab/jsonutil.h"

namespace svlab {

// ---------------------------------------------------------------------------
// Learning-rate schedule.

void ClrSchedule::validate() const {
  if (step_size == 0) throw ConfigError("schedule: step_size must be positive");
  if (!(lr_min >= 0.0) || !(lr_max >= lr_min)) {
    throw ConfigError("schedule: need 0 <= lr_min <= lr_max");
  }
}

nlohmann::json ClrSchedule::to_json() const {
  return {{"step_size", step_size}, {"lr_min", lr_min}, {"lr_max", lr_max}};
}

ClrSchedule ClrSchedule::from_json(const nlohmann::json& j) {
  ClrSchedule s;
  JsonFields f(j, "schedule");
  f.read("step_size", s.step_size);
  f.read("lr_min", s.lr_min);
  f.read("lr_max", s.lr_max);
  f.finish();
  s.validate();
  return s;
}

double clr_lr(std::size_t it, const ClrSchedule& sched) {
  const double step = static_cast<double>(sched.step_size);
  const double pos = static_cast<double>(it) / step;
  const double cycle = std::floor(1.0 + pos / 2.0);
  const double x = std::abs(pos - 2.0 * cycle + 1.0);
  return sched.lr_min +
         (sched.lr_max - sched.lr_min) * std::max(0.0, 1.0 - x) / std::exp2(cycle - 1.0);
}

// ---------------------------------------------------------------------------
// Adam.

void Adam::add_parameter(const std::string& name, Tensor param, double weight_decay) {
  const std::size_t n = param.numel();
  slots_.push_back({name, std::move(param), weight_decay, std::vector<double>(n, 0.0),
                    std::vector<double>(n, 0.0)});
}

void Adam::step(double lr) {
  for (const Slot& s : slots_) {
    if (!s.param.has_grad()) continue;
    for (double g : s.param.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("adam: non-finite gradient in parameter \"" + s.name + "\" at step " +
                           std::to_string(t_ + 1));
      }
    }
  }
  ++t_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (Slot& s : slots_) {
    std::span<double> w = s.param.mutable_data();
    const bool has = s.param.has_grad();
    std::span<const double> grad = has ? s.param.grad() : std::span<const double>();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double g = (has ? grad[i] : 0.0) + s.weight_decay * w[i];
      s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
      s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
      const double mhat = s.m[i] / c1, vhat = s.v[i] / c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (Slot& s : slots_) s.param.zero_grad();
}

double Adam::weight_decay(const std::string& name) const {
  for (const Slot& s : slots_) {
    if (s.name == name) return s.weight_decay;
  }
  throw UsageError("adam: no parameter named \"" + name + "\"");
}

void add_model_parameters(Adam& adam, const models::EmbeddingExtractor& model,
                          models::AAMHead& head, double body_decay, double head_decay) {
  for (const models::NamedTensor& nt : model.parameters()) {
    adam.add_parameter("model." + nt.name, nt.tensor, body_decay);
  }
  for (const models::NamedTensor& nt : head.parameters()) {
    adam.add_parameter("head." + nt.name, nt.tensor, head_decay);
  }
}

// ---------------------------------------------------------------------------
// Sampling.

std::string to_string(SamplerMode mode) {
  return mode == SamplerMode::kUniform ? "uniform" : "domain_balanced";
}

SamplerMode sampler_mode_from_string(const std::string& name) {
  if (name == "uniform") return SamplerMode::kUniform;
  if (name == "domain_balanced") return SamplerMode::kDomainBalanced;
  throw ConfigError("unknown sampler mode \"" + name + "\"");
}

BatchSampler::BatchSampler(std::vector<audio::UtteranceInfo> corpus, SamplerMode mode,
                           std::size_t speakers_per_domain, std::uint64_t seed)
    : corpus_(std::move(corpus)),
      mode_(mode),
      speakers_per_domain_(speakers_per_domain),
      rng_(seed) {
  if (corpus_.empty()) throw DataError("sampler: empty corpus");
  if (mode_ != SamplerMode::kDomainBalanced) return;
  if (speakers_per_domain_ == 0) throw ConfigError("sampler: speakers_per_domain must be positive");
  for (std::size_t i = 0; i < corpus_.size(); ++i) {
    index_[corpus_[i].domain][corpus_[i].speaker].push_back(i);
  }
  std::size_t fewest = speakers_per_domain_;
  for (const auto& [domain, speakers] : index_) fewest = std::min(fewest, speakers.size());
  if (fewest < speakers_per_domain_) {
    std::cerr << "WARNING (sampler): speakers_per_domain lowered from " << speakers_per_domain_
              << " to " << fewest << ", the smallest per-domain speaker count\n";
    speakers_per_domain_ = fewest;
  }
}

std::size_t BatchSampler::pool_size() const {
  return mode_ == SamplerMode::kDomainBalanced ? speakers_per_domain_ * index_.size() : 0;
}

void BatchSampler::rebuild_pool() {
  pool_.clear();
  pool_pos_ = 0;
  for (const auto& [domain, speakers] : index_) {
    std::vector<const std::vector<std::size_t>*> lists;
    for (const auto& [speaker, utts] : speakers) lists.push_back(&utts);
    std::shuffle(lists.begin(), lists.end(), rng_);
    for (std::size_t k = 0; k < speakers_per_domain_; ++k) {
      const auto& utts = *lists[k];
      pool_.push_back(utts[std::uniform_int_distribution<std::size_t>(0, utts.size() - 1)(rng_)]);
    }
  }
  std::shuffle(pool_.begin(), pool_.end(), rng_);
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch_size) {
  std::vector<std::size_t> out;
  out.reserve(batch_size);
  if (mode_ == SamplerMode::kUniform) {
    std::uniform_int_distribution<std::size_t> u(0, corpus_.size() - 1);
    for (std::size_t i = 0; i < batch_size; ++i) out.push_back(u(rng_));
    return out;
  }
  while (out.size() < batch_size) {
    if (pool_pos_ == pool_.size()) rebuild_pool();
    out.push_back(pool_[pool_pos_++]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configs.

TrainingCorpus TrainingCorpus::from_utterances(std::vector<audio::Utterance> utts) {
  if (utts.empty()) throw DataError("training corpus is empty");
  TrainingCorpus c;
  std::map<std::string, std::size_t> label_of;
  for (const auto& u : utts) label_of.emplace(u.info.speaker, 0);
  for (auto& [speaker, label] : label_of) {
    label = c.speakers.size();
    c.speakers.push_back(speaker);
  }
  for (const auto& u : utts) c.labels.push_back(label_of.at(u.info.speaker));
  c.utterances = std::move(utts);
  return c;
}

std::vector<audio::UtteranceInfo> TrainingCorpus::infos() const {
  std::vector<audio::UtteranceInfo> out;
  out.reserve(utterances.size());
  for (const auto& u : utterances) out.push_back(u.info);
  return out;
}

void TrainOptions::validate() const {
  schedule.validate();
  if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
  if (!(crop_s > 0.0)) throw ConfigError("train: crop_s must be positive");
  if (speakers_per_domain == 0) throw ConfigError("train: speakers_per_domain must be positive");
  if (!(body_weight_decay >= 0.0) || !(head_weight_decay >= 0.0)) {
    throw ConfigError("train: weight decay must be non-negative");
  }
}

nlohmann::json TrainOptions::to_json() const {
  return {{"schedule", schedule.to_json()},
          {"steps", steps},
          {"batch_size", batch_size},
          {"crop_s", crop_s},
          {"sampler", to_string(sampler)},
          {"speakers_per_domain", speakers_per_domain},
          {"augment", augment},
          {"spec_augment", spec_augment},
          {"body_weight_decay", body_weight_decay},
          {"head_weight_decay", head_weight_decay}};
}

TrainOptions TrainOptions::from_json(const nlohmann::json& j) {
  TrainOptions o;
  JsonFields f(j, "train");
  if (const auto* s = f.get("schedule")) o.schedule = ClrSchedule::from_json(*s);
  f.read("steps", o.steps);
  f.read("batch_size", o.batch_size);
  f.read("crop_s", o.crop_s);
  std::string sampler = to_string(o.sampler);
  f.read("sampler", sampler);
  o.sampler = sampler_mode_from_string(sampler);
  f.read("speakers_per_domain", o.speakers_per_domain);
  f.read("augment", o.augment);
  f.read("spec_augment", o.spec_augment);
  f.read("body_weight_decay", o.body_weight_decay);
  f.read("head_weight_decay", o.head_weight_decay);
  f.finish();
  o.validate();
  return o;
}

void FineTuneSpec::validate() const {
  if (!(crop_s > 0.0)) throw ConfigError("finetune: crop_s must be positive");
  if (!(margin >= 0.0) || margin >= std::acos(-1.0) / 2.0) {
    throw ConfigError("finetune: margin must lie in [0, pi/2)");
  }
  if (speakers_per_domain == 0) throw ConfigError("finetune: speakers_per_domain must be positive");
  if (!(lr_max > 0.0)) throw ConfigError("finetune: lr_max must be positive");
  if (step_size == 0) throw ConfigError("finetune: step_size must be positive");
}

nlohmann::json FineTuneSpec::to_json() const {
  return {{"crop_s", crop_s},   {"margin", margin},       {"domain_balanced", domain_balanced},
          {"speakers_per_domain", speakers_per_domain}, {"steps", steps},
          {"lr_max", lr_max},   {"step_size", step_size}};
}

FineTuneSpec FineTuneSpec::from_json(const nlohmann::json& j) {
  FineTuneSpec s;
  JsonFields f(j, "finetune");
  f.read("crop_s", s.crop_s);
  f.read("margin", s.margin);
  f.read("domain_balanced", s.domain_balanced);
  f.read("speakers_per_domain", s.speakers_per_domain);
  f.read("steps", s.steps);
  f.read("lr_max", s.lr_max);
  f.read("step_size", s.step_size);
  f.finish();
  s.validate();
  return s;
}

FineTuneSpec FineTuneSpec::preset_3s() { return FineTuneSpec{}; }

FineTuneSpec FineTuneSpec::preset_6s() {
  FineTuneSpec s;
  s.crop_s = 6.0;
  s.margin = 0.5;
  return s;
}

std::string format_loss_trace(const std::vector<LossRecord>& trace) {
  std::string out = join_tsv({"step", "lr", "loss"});
  for (const LossRecord& r : trace) {
    out += join_tsv({std::to_string(r.step), format_double(r.lr), format_double(r.loss)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loops.

namespace {

// Augment the full waveform, featurize, crop, then mask.
audio::FeatureMatrix training_example(const audio::Utterance& u, const TrainOptions& o, Rng& rng) {
  audio::FeatureMatrix f;
  if (o.augment) {
    const std::size_t pick = std::uniform_int_distribution<std::size_t>(
        0, std::size(audio::kAllAugmentKinds) - 1)(rng);
    f = audio::fbank(audio::augment(u.samples, audio::kAllAugmentKinds[pick], rng));
  } else {
    f = audio::fbank(u.samples);
  }
  audio::FeatureMatrix c = audio::crop(f, o.crop_s, rng);
  if (o.spec_augment) audio::spec_augment(c, rng);
  return c;
}

}  // namespace

TrainResult train(models::Checkpoint& ckpt, const TrainingCorpus& corpus,
                  const TrainOptions& options) {
  options.validate();
  if (corpus.utterances.empty()) throw DataError("train: empty corpus");
  if (corpus.speakers.size() != ckpt.head->config().num_classes) {
    throw DataError("train: corpus has " + std::to_string(corpus.speakers.size()) +
                    " speakers but the AAM head has " +
                    std::to_string(ckpt.head->config().num_classes) + " classes");
  }
  const std::size_t feat_dim = ckpt.model->config().feat_dim;
  if (feat_dim != audio::kNumMel) {
    throw ConfigError("train: model expects " + std::to_string(feat_dim) + " features, fbank gives " +
                      std::to_string(audio::kNumMel));
  }

  Adam adam;
  add_model_parameters(adam, *ckpt.model, *ckpt.head, options.body_weight_decay,
                       options.head_weight_decay);
  BatchSampler sampler(corpus.infos(), options.sampler, options.speakers_per_domain,
                       derive_seed(options.seed, options.stage + "/sampler"));
  const std::size_t frames = audio::crop_frames(options.crop_s);
  const std::size_t batch = options.batch_size;

  TrainResult result;
  auto save = [&](const std::string& tag) {
    if (options.checkpoint_dir.empty()) return;
    const auto path = options.checkpoint_dir / (options.stage + "_" + tag + ".svmd");
    models::save_checkpoint(path, *ckpt.model, *ckpt.head);
    result.checkpoints.push_back(path);
  };

  ckpt.model->set_training(true);
  ckpt.head->set_training(true);
  for (std::size_t it = 0; it < options.steps; ++it) {
    const std::vector<std::size_t> picks = sampler.next(batch);
    Tensor x({batch, audio::kNumMel, frames});
    std::vector<std::size_t> labels(batch);
    std::span<double> xd = x.mutable_data();
    for (std::size_t b = 0; b < batch; ++b) {
      Rng rng(derive_seed(options.seed, options.stage, it * batch + b));
      const audio::FeatureMatrix f = training_example(corpus.utterances[picks[b]], options, rng);
      std::copy(f.values.begin(), f.values.end(), xd.begin() + static_cast<std::ptrdiff_t>(b * f.values.size()));
      labels[b] = corpus.labels[picks[b]];
    }

    const double lr = clr_lr(it, options.schedule);
    double loss_value;
    {
      Tape tape;
      const models::ForwardOutput out = ckpt.model->forward(x);
      const models::AAMOutput aam = ckpt.head->forward(out.embedding, labels);
      loss_value = aam.loss.item();
      if (!std::isfinite(loss_value)) {
        throw NumericError("train: loss is not finite at step " + std::to_string(it) + " (" +
                           options.stage + ")");
      }
      tape.backward(aam.loss);
    }
    adam.step(lr);
    adam.zero_grad();
    result.trace.push_back({it, lr, loss_value});
    if ((it + 1) % options.schedule.step_size == 0) save(std::to_string(it + 1));
  }
  ckpt.model->set_training(false);
  ckpt.head->set_training(false);
  save("final");
  return result;
}

TrainResult finetune(models::Checkpoint& ckpt, const TrainingCorpus& corpus,
                     const FineTuneSpec& spec, const TrainOptions& base) {
  spec.validate();
  ckpt.head->set_margin(spec.margin);
  TrainOptions o = base;
  o.crop_s = spec.crop_s;
  o.sampler = spec.domain_balanced ? SamplerMode::kDomainBalanced : SamplerMode::kUniform;
  o.speakers_per_domain = spec.speakers_per_domain;
  o.steps = spec.steps;
  o.schedule.step_size = spec.step_size;
  o.schedule.lr_max = spec.lr_max;
  o.schedule.lr_min = std::min(o.schedule.lr_min, spec.lr_max);
  o.stage = "finetune";
  return train(ckpt, corpus, o);
}

std::size_t select_checkpoint(const std::vector<std::filesystem::path>& checkpoints,
                              const std::function<double(models::Checkpoint&)>& validation_eer) {
  if (checkpoints.empty()) throw DataError("select_checkpoint: no checkpoints");
  std::size_t best = 0;
  double best_eer = 0.0;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    models::Checkpoint c = models::load_checkpoint(checkpoints[i]);
    const double e = validation_eer(c);
    if (i == 0 || e < best_eer) best = i, best_eer = e;
  }
  return best;
}

}  // namespace svlab
