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

#include "svlab/embedscore.h"

#include <algorithm>
#include <cmath>
#include <functional>

#include "svlab/errors.h"

namespace svlab {

// ---------------------------------------------------------------------------
// Embedding sets and files.

const Vector& EmbeddingSet::get(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw DataError("no embedding for id \"" + id + "\"");
  return vectors_[it->second];
}

void EmbeddingSet::add(const std::string& id, Vector v) {
  if (ids_.empty() && dim_ == 0) dim_ = v.size();
  if (v.size() != dim_) {
    throw DataError("embedding \"" + id + "\" has dimension " + std::to_string(v.size()) +
                    ", expected " + std::to_string(dim_));
  }
  if (!index_.emplace(id, ids_.size()).second) throw DataError("duplicate embedding id \"" + id + "\"");
  ids_.push_back(id);
  vectors_.push_back(std::move(v));
}

namespace {
constexpr std::string_view kEmbeddingMagic = "SVEB";
}  // namespace

std::string serialize_embeddings(const EmbeddingSet& set) {
  BinaryWriter w;
  w.bytes(kEmbeddingMagic);
  w.u32(static_cast<std::uint32_t>(set.dim()));
  for (std::size_t i = 0; i < set.size(); ++i) {
    w.str(set.ids()[i]);
    for (double v : set.at(i)) w.f64(v);
  }
  return w.buffer();
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingSet& set) {
  atomic_write(path, serialize_embeddings(set));
}

EmbeddingSet parse_embeddings(const std::string& bytes, const std::string& source) {
  BinaryReader r(bytes, source);
  r.expect_magic(kEmbeddingMagic);
  const std::size_t dim = r.u32("dimension");
  if (dim == 0) throw FormatError(source + ": embedding dimension is zero");
  EmbeddingSet set(dim);
  while (!r.done()) {
    r.next_record();
    std::string id = r.str("id");
    Vector v(dim);
    for (double& x : v) x = r.f64("value");
    try {
      set.add(id, std::move(v));
    } catch (const DataError& e) {
      throw FormatError(source + ": record " + std::to_string(r.record()) + ": " + e.what());
    }
  }
  return set;
}

EmbeddingSet load_embeddings(const std::filesystem::path& path) {
  return parse_embeddings(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Extraction.

Extracted extract(models::EmbeddingExtractor& model, const std::vector<audio::FeatureMatrix>& feats,
                  std::size_t max_batch, std::size_t threads) {
  if (max_batch == 0) throw ConfigError("extract: batch size must be positive");
  const std::size_t f_dim = model.config().feat_dim;
  for (const auto& f : feats) {
    if (f.num_bins != f_dim) {
      throw DataError("extract: " + f.info.id + " has " + std::to_string(f.num_bins) +
                      " feature bins, model expects " + std::to_string(f_dim));
    }
  }
  // Equal-length groups in order of first appearance, then chunks.
  std::vector<std::size_t> order(feats.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return feats[a].num_frames < feats[b].num_frames;
  });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size();) {
    std::vector<std::size_t> b;
    const std::size_t t = feats[order[i]].num_frames;
    while (i < order.size() && feats[order[i]].num_frames == t && b.size() < max_batch) {
      b.push_back(order[i++]);
    }
    batches.push_back(std::move(b));
  }

  model.set_training(false);
  std::vector<Vector> emb(feats.size()), pooled(feats.size());
  parallel_for(batches.size(), threads, [&](std::size_t bi) {
    const auto& b = batches[bi];
    const std::size_t t = feats[b[0]].num_frames;
    Tensor x({b.size(), f_dim, t});
    auto xd = x.mutable_data();
    for (std::size_t k = 0; k < b.size(); ++k) {
      std::copy(feats[b[k]].values.begin(), feats[b[k]].values.end(),
                xd.begin() + static_cast<std::ptrdiff_t>(k * f_dim * t));
    }
    NoGradGuard no_grad;
    const models::ForwardOutput out = model.forward(x);
    const std::size_t d = out.embedding.dim(1), p = out.pooled.dim(1);
    for (std::size_t k = 0; k < b.size(); ++k) {
      const auto e = out.embedding.data().subspan(k * d, d);
      const auto q = out.pooled.data().subspan(k * p, p);
      emb[b[k]].assign(e.begin(), e.end());
      pooled[b[k]].assign(q.begin(), q.end());
    }
  });

  Extracted r;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    r.embeddings.add(feats[i].info.id, std::move(emb[i]));
    r.pooled.add(feats[i].info.id, std::move(pooled[i]));
  }
  return r;
}

Extracted extract(models::EmbeddingExtractor& model, const std::vector<audio::FeatureMatrix>& feats,
                  const std::vector<std::string>& ids, std::size_t max_batch, std::size_t threads) {
  std::map<std::string, std::size_t> where;
  for (std::size_t i = 0; i < feats.size(); ++i) where.emplace(feats[i].info.id, i);
  std::vector<audio::FeatureMatrix> picked;
  std::vector<std::string> missing;
  for (const auto& id : ids) {
    auto it = where.find(id);
    if (it == where.end()) missing.push_back(id);
    else picked.push_back(feats[it->second]);
  }
  if (!missing.empty()) {
    std::string msg = "extract: " + std::to_string(missing.size()) + " utterance(s) missing from the feature store:";
    for (std::size_t i = 0; i < missing.size() && i < 10; ++i) msg += " " + missing[i];
    if (missing.size() > 10) msg += " ...";
    throw DataError(msg);
  }
  return extract(model, picked, max_batch, threads);
}

// ---------------------------------------------------------------------------
// Scoring.

double l2_norm(const Vector& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

Vector l2_normalized(const Vector& v) {
  const double n = l2_norm(v);
  if (n == 0.0) throw DomainError("cannot L2-normalize a zero vector");
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

Vector enroll(const std::vector<Vector>& embeddings) {
  if (embeddings.empty()) throw DataError("enroll: no enrollment embeddings");
  Vector mean(embeddings[0].size(), 0.0);
  for (const Vector& e : embeddings) {
    if (e.size() != mean.size()) throw DataError("enroll: embeddings differ in dimension");
    const Vector u = l2_normalized(e);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += u[i];
  }
  for (double& x : mean) x /= static_cast<double>(embeddings.size());
  return mean;
}

double cosine(const Vector& e, const Vector& t) {
  if (e.size() != t.size()) throw DataError("cosine: dimension mismatch");
  double dot = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) dot += e[i] * t[i];
  const double ne = l2_norm(e), nt = l2_norm(t);
  if (ne == 0.0 || nt == 0.0) throw DomainError("cosine: degenerate (zero) model or test vector");
  return dot / (ne * nt);
}

Cohort Cohort::build(const EmbeddingSet& training,
                     const std::map<std::string, std::string>& speaker_of, std::size_t top_k) {
  if (top_k < 2) throw ConfigError("cohort: top_k must be at least 2");
  std::map<std::string, std::vector<Vector>> per_speaker;
  for (std::size_t i = 0; i < training.size(); ++i) {
    auto it = speaker_of.find(training.ids()[i]);
    if (it == speaker_of.end()) throw DataError("cohort: no speaker for \"" + training.ids()[i] + "\"");
    per_speaker[it->second].push_back(training.at(i));
  }
  Cohort c;
  c.top_k = top_k;
  for (const auto& [speaker, embs] : per_speaker) c.entries.push_back(enroll(embs));
  if (c.entries.size() < 2) throw DataError("cohort: need at least two imposter speakers");
  return c;
}

ScoreStats Cohort::stats(const Vector& v) const {
  if (entries.size() < 2) throw DataError("cohort: need at least two entries");
  std::vector<double> s(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) s[i] = cosine(v, entries[i]);
  const std::size_t k = effective_top_k();
  std::partial_sort(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(k), s.end(), std::greater<>());
  ScoreStats st;
  for (std::size_t i = 0; i < k; ++i) st.mean += s[i];
  st.mean /= static_cast<double>(k);
  double var = 0.0;
  for (std::size_t i = 0; i < k; ++i) var += (s[i] - st.mean) * (s[i] - st.mean);
  st.std = std::sqrt(var / static_cast<double>(k));
  return st;
}

double snorm(double raw, const ScoreStats& e, const ScoreStats& t) {
  if (!(e.std > 0.0) || !(t.std > 0.0)) {
    throw NumericError("s-norm: cohort score standard deviation is zero (degenerate cohort)");
  }
  return 0.5 * ((raw - e.mean) / e.std + (raw - t.mean) / t.std);
}

double snorm(double raw, const Vector& e, const Vector& t, const Cohort& cohort) {
  return snorm(raw, cohort.stats(e), cohort.stats(t));
}

// ---------------------------------------------------------------------------
// Tables.

EnrollmentMap read_enrollment(const std::filesystem::path& path) {
  EnrollmentMap m;
  for (const TsvRow& row : read_tsv(path)) {
    if (row.fields.size() != 2) {
      throw FormatError(path.string() + ":" + std::to_string(row.line) +
                        ": expected model_id and utt_id");
    }
    m[row.fields[0]].push_back(row.fields[1]);
  }
  return m;
}

std::string format_enrollment(const EnrollmentMap& m) {
  std::string out;
  for (const auto& [model, utts] : m) {
    for (const auto& u : utts) out += join_tsv({model, u});
  }
  return out;
}

std::map<std::string, Vector> build_models(const EnrollmentMap& enrollment,
                                           const EmbeddingSet& embeddings) {
  std::map<std::string, Vector> out;
  for (const auto& [model, utts] : enrollment) {
    std::vector<Vector> embs;
    for (const auto& u : utts) embs.push_back(embeddings.get(u));
    out.emplace(model, enroll(embs));
  }
  return out;
}

std::vector<Trial> read_trials(const std::filesystem::path& path) {
  std::vector<Trial> out;
  for (const TsvRow& row : read_tsv(path)) {
    const std::string where = path.string() + ":" + std::to_string(row.line);
    if (row.fields.size() != 2 && row.fields.size() != 3) {
      throw FormatError(where + ": expected model_id, test_id[, label]");
    }
    Trial t{row.fields[0], row.fields[1], TrialLabel::kUnknown};
    if (row.fields.size() == 3) {
      if (row.fields[2] == "tgt") t.label = TrialLabel::kTarget;
      else if (row.fields[2] == "non") t.label = TrialLabel::kNonTarget;
      else throw FormatError(where + ": label must be tgt or non, got \"" + row.fields[2] + "\"");
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::string format_trials(const std::vector<Trial>& trials) {
  std::string out;
  for (const Trial& t : trials) {
    if (t.label == TrialLabel::kUnknown) out += join_tsv({t.model_id, t.test_id});
    else out += join_tsv({t.model_id, t.test_id, t.label == TrialLabel::kTarget ? "tgt" : "non"});
  }
  return out;
}

std::vector<ScoreRow> read_scores(const std::filesystem::path& path) {
  std::vector<ScoreRow> out;
  for (const TsvRow& row : read_tsv(path)) {
    const std::string where = path.string() + ":" + std::to_string(row.line);
    if (row.fields.size() != 3) throw FormatError(where + ": expected model_id, test_id, score");
    out.push_back({row.fields[0], row.fields[1], parse_double(row.fields[2], where + ": score")});
  }
  return out;
}

std::string format_scores(const std::vector<ScoreRow>& scores) {
  std::string out;
  for (const ScoreRow& s : scores) out += join_tsv({s.model_id, s.test_id, format_double(s.score)});
  return out;
}

std::vector<ScoreRow> score_trials(const std::vector<Trial>& trials,
                                   const std::map<std::string, Vector>& models,
                                   const EmbeddingSet& tests) {
  std::vector<ScoreRow> out;
  out.reserve(trials.size());
  for (const Trial& t : trials) {
    auto it = models.find(t.model_id);
    if (it == models.end()) throw DataError("score: no enrollment model \"" + t.model_id + "\"");
    out.push_back({t.model_id, t.test_id, cosine(it->second, tests.get(t.test_id))});
  }
  return out;
}

std::vector<ScoreRow> snorm_scores(const std::vector<ScoreRow>& raw,
                                   const std::map<std::string, Vector>& models,
                                   const EmbeddingSet& tests, const Cohort& cohort) {
  std::map<std::string, ScoreStats> model_stats, test_stats;
  std::vector<ScoreRow> out = raw;
  for (ScoreRow& s : out) {
    auto m = model_stats.find(s.model_id);
    if (m == model_stats.end()) {
      auto it = models.find(s.model_id);
      if (it == models.end()) throw DataError("snorm: no enrollment model \"" + s.model_id + "\"");
      m = model_stats.emplace(s.model_id, cohort.stats(it->second)).first;
    }
    auto t = test_stats.find(s.test_id);
    if (t == test_stats.end()) t = test_stats.emplace(s.test_id, cohort.stats(tests.get(s.test_id))).first;
    s.score = snorm(s.score, m->second, t->second);
  }
  return out;
}

}  // namespace svlab
