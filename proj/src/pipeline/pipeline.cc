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

#include "svlab/pipeline.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <map>

#include "svlab/errors.h"
#include "svlab/io.h"
#include "svlab/jsonutil.h"

namespace svlab {

namespace fs = std::filesystem;

namespace {

// 64-bit FNV-1a, used only to name cache entries.
std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

fs::path resolve(const std::string& p, const fs::path& base) {
  fs::path path(p);
  return path.is_absolute() ? path.lexically_normal() : fs::absolute(base / path).lexically_normal();
}

}  // namespace

nlohmann::json PipelineConfig::to_json() const {
  nlohmann::json paths = nlohmann::json::object();
  if (!corpus_dir.empty()) paths["corpus"] = corpus_dir.string();
  if (!work_dir.empty()) paths["work"] = work_dir.string();
  return {{"seed", seed},
          {"paths", paths},
          {"synth", synth.to_json()},
          {"heldout_fraction", heldout_fraction},
          {"architecture", architecture.to_json()},
          {"aam", {{"sub_centers", aam.sub_centers}, {"margin", aam.margin}, {"scale", aam.scale}}},
          {"train", train.to_json()},
          {"finetune", finetune.to_json()},
          {"cohort", {{"top_k", cohort_top_k}}},
          {"dcf", dcf.to_json()},
          {"fusion_weights", fusion_weights},
          {"calibration", {{"d_min", d_min}}}};
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j, const fs::path& base_dir) {
  PipelineConfig c;
  JsonFields f(j, "config");
  std::size_t seed = c.seed;
  f.read("seed", seed);
  c.seed = seed;
  if (const auto* p = f.get("paths")) {
    JsonFields pf(*p, "config.paths");
    std::string corpus, work;
    pf.read("corpus", corpus);
    pf.read("work", work);
    pf.finish();
    if (!corpus.empty()) c.corpus_dir = resolve(corpus, base_dir);
    if (!work.empty()) c.work_dir = resolve(work, base_dir);
  }
  if (const auto* s = f.get("synth")) c.synth = synth::CorpusSpec::from_json(*s);
  f.read("heldout_fraction", c.heldout_fraction);
  if (const auto* a = f.get("architecture")) c.architecture = models::ArchitectureConfig::from_json(*a);
  if (const auto* a = f.get("aam")) {
    JsonFields af(*a, "config.aam");
    af.read("sub_centers", c.aam.sub_centers);
    af.read("margin", c.aam.margin);
    af.read("scale", c.aam.scale);
    af.finish();
  }
  if (const auto* t = f.get("train")) c.train = TrainOptions::from_json(*t);
  if (const auto* t = f.get("finetune")) c.finetune = FineTuneSpec::from_json(*t);
  if (const auto* t = f.get("cohort")) {
    JsonFields cf(*t, "config.cohort");
    cf.read("top_k", c.cohort_top_k);
    cf.finish();
  }
  if (const auto* d = f.get("dcf")) c.dcf = DcfParams::from_json(*d);
  f.read("fusion_weights", c.fusion_weights);
  if (const auto* t = f.get("calibration")) {
    JsonFields cf(*t, "config.calibration");
    cf.read("d_min", c.d_min);
    cf.finish();
  }
  f.finish();

  if (!(c.heldout_fraction > 0.0 && c.heldout_fraction < 1.0)) {
    throw ConfigError("config: heldout_fraction must lie in (0, 1)");
  }
  if (c.aam.sub_centers == 0) throw ConfigError("config.aam: sub_centers must be positive");
  if (c.cohort_top_k < 2) throw ConfigError("config.cohort: top_k must be at least 2");
  for (double w : c.fusion_weights) {
    if (!(w > 0.0)) throw ConfigError("config: fusion_weights must be positive");
  }
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  return from_json(load_json(path), fs::absolute(path).parent_path());
}

std::pair<std::vector<audio::UtteranceInfo>, std::vector<audio::UtteranceInfo>> split_heldout(
    const std::vector<audio::UtteranceInfo>& infos, double fraction) {
  std::map<std::string, std::vector<const audio::UtteranceInfo*>> by_speaker;
  for (const auto& i : infos) by_speaker[i.speaker].push_back(&i);
  std::vector<audio::UtteranceInfo> train, heldout;
  for (auto& [spk, utts] : by_speaker) {
    std::sort(utts.begin(), utts.end(), [](auto* a, auto* b) { return a->id < b->id; });
    for (std::size_t k = 0; k < utts.size(); ++k) {
      const bool held = std::floor(static_cast<double>(k + 1) * fraction) >
                        std::floor(static_cast<double>(k) * fraction);
      (held ? heldout : train).push_back(*utts[k]);
    }
  }
  return {train, heldout};
}

std::vector<audio::UtteranceInfo> write_split_corpus(const fs::path& dir, const synth::CorpusSpec& spec,
                                                     double heldout_fraction) {
  const auto rows = synth::write_corpus(dir, spec);
  const auto [train, heldout] = split_heldout(rows, heldout_fraction);
  atomic_write(dir / "train.tsv", audio::format_manifest(train));
  atomic_write(dir / "heldout.tsv", audio::format_manifest(heldout));
  return rows;
}

std::vector<audio::Utterance> load_manifest_audio(const fs::path& manifest) {
  const fs::path wav_dir = fs::absolute(manifest).parent_path() / "wav";
  std::vector<audio::Utterance> out;
  for (const auto& info : audio::read_manifest(manifest)) {
    out.push_back(audio::load_utterance(wav_dir / (info.id + ".wav"), info));
  }
  return out;
}

models::Checkpoint init_checkpoint(const models::ArchitectureConfig& arch, models::AAMConfig aam,
                                   std::size_t num_speakers, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "init"));
  models::Checkpoint ck;
  ck.model = std::make_unique<models::EmbeddingExtractor>(arch, rng);
  aam.num_classes = num_speakers;
  aam.embedding_dim = arch.embedding_dim;
  ck.head = std::make_unique<models::AAMHead>(aam, rng);
  return ck;
}

fs::path cache_dir_from_env() {
  const char* v = std::getenv("SVLAB_CACHE_DIR");
  return v && *v ? fs::path(v) : fs::path();
}

std::vector<audio::FeatureMatrix> featurize(const std::vector<audio::Utterance>& utts,
                                            std::size_t threads, const fs::path& cache_dir) {
  std::vector<audio::FeatureMatrix> out(utts.size());
  if (!cache_dir.empty()) fs::create_directories(cache_dir);
  parallel_for(utts.size(), threads, [&](std::size_t i) {
    const audio::Utterance& u = utts[i];
    fs::path entry;
    if (!cache_dir.empty()) {
      char name[40];
      std::snprintf(name, sizeof(name), "%016llx.svfb",
                    static_cast<unsigned long long>(fnv1a("fbank1\n" + audio::encode_wav(u.samples))));
      entry = cache_dir / name;
      if (fs::exists(entry)) {
        auto cached = audio::load_features(entry);
        if (cached.size() == 1) {
          out[i] = std::move(cached[0]);
          out[i].info = u.info;
          return;
        }
      }
    }
    out[i] = audio::fbank(u);
    if (!entry.empty()) audio::save_features(entry, {out[i]});
  });
  return out;
}

Cohort cohort_from(const EmbeddingSet& embeddings, const std::vector<audio::UtteranceInfo>& infos,
                   std::size_t top_k) {
  std::map<std::string, std::string> speaker_of;
  EmbeddingSet subset(embeddings.dim());
  for (const auto& i : infos) {
    speaker_of[i.id] = i.speaker;
    subset.add(i.id, embeddings.get(i.id));
  }
  return Cohort::build(subset, speaker_of, top_k);
}

ScoredTrialSet label_scores(const std::vector<ScoreRow>& scores, const std::vector<Trial>& trials) {
  std::map<std::pair<std::string, std::string>, TrialLabel> labels;
  for (const Trial& t : trials) labels[{t.model_id, t.test_id}] = t.label;
  ScoredTrialSet out;
  for (const ScoreRow& s : scores) {
    auto it = labels.find({s.model_id, s.test_id});
    if (it == labels.end()) throw DataError("trial " + s.model_id + " " + s.test_id + " is not in the trial list");
    if (it->second == TrialLabel::kUnknown) {
      throw DataError("trial " + s.model_id + " " + s.test_id + " has no tgt/non label");
    }
    out.add(s.score, it->second == TrialLabel::kTarget);
  }
  return out;
}

CalTrialSet gen_eval_trials(const std::vector<audio::UtteranceInfo>& infos, std::uint64_t seed,
                            std::size_t total) {
  std::map<std::string, int> speakers;
  for (const auto& i : infos) speakers[i.speaker] = 1;
  if (speakers.empty()) throw DataError("eval trials: empty manifest");
  const std::size_t per = (total + speakers.size() - 1) / speakers.size();
  CalTrialSet set = gen_cal_trials(infos, seed, per);
  set.trials.resize(std::min(total, set.trials.size()));
  set.cross_lingual.resize(set.trials.size());
  EnrollmentMap kept;
  for (const Trial& t : set.trials) kept[t.model_id] = set.enrollment.at(t.model_id);
  set.enrollment = std::move(kept);
  return set;
}

}  // namespace svlab
