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

// Embedding extraction, enrollment, cosine scoring and adaptive
// s-normalization, plus the embedding, trial and score file formats.

#ifndef SVLAB_EMBEDSCORE_H_
#define SVLAB_EMBEDSCORE_H_

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "svlab/audiofeat.h"
#include "svlab/models.h"

namespace svlab {

using Vector = std::vector<double>;

// Ordered set of named, equal-length vectors.
class EmbeddingSet {
 public:
  EmbeddingSet() = default;
  explicit EmbeddingSet(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  const Vector& at(std::size_t i) const { return vectors_[i]; }
  // DataError listing up to ten of the missing ids.
  const Vector& get(const std::string& id) const;
  bool contains(const std::string& id) const { return index_.count(id) != 0; }
  void add(const std::string& id, Vector v);

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<Vector> vectors_;
  std::map<std::string, std::size_t> index_;
};

// "SVEB", u32 d, then per record u32 id length, id and d float64 values.
std::string serialize_embeddings(const EmbeddingSet& set);
void save_embeddings(const std::filesystem::path& path, const EmbeddingSet& set);
EmbeddingSet parse_embeddings(const std::string& bytes, const std::string& source);
EmbeddingSet load_embeddings(const std::filesystem::path& path);

struct Extracted {
  EmbeddingSet embeddings;
  EmbeddingSet pooled;  // pooling-layer statistics, for the language backend
};

// Full-length features in eval mode. Utterances of equal length are batched
// together, up to max_batch at a time; no padding is ever introduced.
Extracted extract(models::EmbeddingExtractor& model, const std::vector<audio::FeatureMatrix>& feats,
                  std::size_t max_batch = 16, std::size_t threads = 1);
// Selects feats by id, in the given order.
Extracted extract(models::EmbeddingExtractor& model, const std::vector<audio::FeatureMatrix>& feats,
                  const std::vector<std::string>& ids, std::size_t max_batch = 16,
                  std::size_t threads = 1);

double l2_norm(const Vector& v);
Vector l2_normalized(const Vector& v);

// Mean of the L2-normalized inputs (not re-normalized).
Vector enroll(const std::vector<Vector>& embeddings);
// DomainError when either vector is zero (degenerate model).
double cosine(const Vector& e, const Vector& t);

struct ScoreStats {
  double mean = 0.0;
  double std = 0.0;
};

// One entry per imposter speaker: the mean of its L2-normalized embeddings.
struct Cohort {
  std::vector<Vector> entries;
  std::size_t top_k = 2000;

  // speaker_of maps each embedding id to its speaker.
  static Cohort build(const EmbeddingSet& training,
                      const std::map<std::string, std::string>& speaker_of, std::size_t top_k);
  std::size_t effective_top_k() const { return std::min(top_k, entries.size()); }
  // Mean and population std of the top-k cosine scores of v against the cohort.
  ScoreStats stats(const Vector& v) const;
};

// 0.5 * ((raw - mu_e) / sd_e + (raw - mu_t) / sd_t); NumericError on sd = 0.
double snorm(double raw, const ScoreStats& e, const ScoreStats& t);
double snorm(double raw, const Vector& e, const Vector& t, const Cohort& cohort);

// Enrollment list TSV: model_id, utt_id; one row per enrollment utterance.
using EnrollmentMap = std::map<std::string, std::vector<std::string>>;
EnrollmentMap read_enrollment(const std::filesystem::path& path);
std::string format_enrollment(const EnrollmentMap& m);
std::map<std::string, Vector> build_models(const EnrollmentMap& enrollment,
                                           const EmbeddingSet& embeddings);

enum class TrialLabel { kUnknown, kTarget, kNonTarget };

struct Trial {
  std::string model_id;
  std::string test_id;
  TrialLabel label = TrialLabel::kUnknown;
};

// model_id, test_id[, tgt|non]
std::vector<Trial> read_trials(const std::filesystem::path& path);
std::string format_trials(const std::vector<Trial>& trials);

struct ScoreRow {
  std::string model_id;
  std::string test_id;
  double score = 0.0;
};

// model_id, test_id, score (17 significant digits).
std::vector<ScoreRow> read_scores(const std::filesystem::path& path);
std::string format_scores(const std::vector<ScoreRow>& scores);

std::vector<ScoreRow> score_trials(const std::vector<Trial>& trials,
                                   const std::map<std::string, Vector>& models,
                                   const EmbeddingSet& tests);
// Replaces each raw score with its s-normalized value.
std::vector<ScoreRow> snorm_scores(const std::vector<ScoreRow>& raw,
                                   const std::map<std::string, Vector>& models,
                                   const EmbeddingSet& tests, const Cohort& cohort);

}  // namespace svlab

#endif  // SVLAB_EMBEDSCORE_H_
