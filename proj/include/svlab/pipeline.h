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

// Glue shared by the command-line tool and the acceptance driver: the
// pipeline config, corpus splitting, model initialization and the feature
// cache.

#ifndef SVLAB_PIPELINE_H_
#define SVLAB_PIPELINE_H_

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "svlab/audiofeat.h"
#include "svlab/calibfuse.h"
#include "svlab/embedscore.h"
#include "svlab/evalmetrics.h"
#include "svlab/models.h"
#include "svlab/synthdata.h"
#include "svlab/train.h"

namespace svlab {

struct PipelineConfig {
  std::uint64_t seed = 1;
  // Relative paths are resolved against the directory of the config file.
  std::filesystem::path corpus_dir;
  std::filesystem::path work_dir;
  synth::CorpusSpec synth;
  double heldout_fraction = 0.4;
  models::ArchitectureConfig architecture;
  models::AAMConfig aam;  // num_classes and embedding_dim are filled at init
  TrainOptions train;
  FineTuneSpec finetune = FineTuneSpec::preset_3s();
  std::size_t cohort_top_k = 2000;
  DcfParams dcf;
  std::vector<double> fusion_weights = {1.0, 2.0, 2.0, 0.5};
  double d_min = kMinTestDuration;

  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static PipelineConfig load(const std::filesystem::path& path);
};

// Per speaker, in id order, utterance k is held out when
// floor((k + 1) f) > floor(k f); this spreads the held-out set evenly.
std::pair<std::vector<audio::UtteranceInfo>, std::vector<audio::UtteranceInfo>> split_heldout(
    const std::vector<audio::UtteranceInfo>& infos, double fraction);

// Writes manifest.tsv, train.tsv and heldout.tsv next to the wav directory.
std::vector<audio::UtteranceInfo> write_split_corpus(const std::filesystem::path& dir,
                                                     const synth::CorpusSpec& spec,
                                                     double heldout_fraction);

// Loads the waveforms of a manifest from the sibling wav/ directory.
std::vector<audio::Utterance> load_manifest_audio(const std::filesystem::path& manifest);

// Fresh extractor and head for num_speakers classes, seeded by seed alone.
models::Checkpoint init_checkpoint(const models::ArchitectureConfig& arch, models::AAMConfig aam,
                                   std::size_t num_speakers, std::uint64_t seed);

// Filterbanks of every utterance. With a non-empty cache_dir, features are
// stored there keyed by a hash of the waveform and reused.
std::vector<audio::FeatureMatrix> featurize(const std::vector<audio::Utterance>& utts,
                                            std::size_t threads,
                                            const std::filesystem::path& cache_dir = {});
// SVLAB_CACHE_DIR, or empty.
std::filesystem::path cache_dir_from_env();

// Imposter cohort from embeddings of the listed utterances, one entry per
// speaker.
Cohort cohort_from(const EmbeddingSet& embeddings, const std::vector<audio::UtteranceInfo>& infos,
                   std::size_t top_k);

// Attaches trial labels to scores by (model_id, test_id).
ScoredTrialSet label_scores(const std::vector<ScoreRow>& scores, const std::vector<Trial>& trials);

// Trials for a labelled evaluation list: the calibration generator with
// enough trials per speaker to reach total, truncated to total.
CalTrialSet gen_eval_trials(const std::vector<audio::UtteranceInfo>& infos, std::uint64_t seed,
                            std::size_t total);

}  // namespace svlab

#endif  // SVLAB_PIPELINE_H_
