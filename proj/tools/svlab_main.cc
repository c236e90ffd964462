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

// svlab: command-line front end. Every command reads its inputs completely,
// computes, and only then writes its outputs through atomic renames.

#include <filesystem>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "svlab/calibfuse.h"
#include "svlab/embedscore.h"
#include "svlab/errors.h"
#include "svlab/evalmetrics.h"
#include "svlab/io.h"
#include "svlab/jsonutil.h"
#include "svlab/pipeline.h"

namespace fs = std::filesystem;

namespace svlab {
namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;

  PipelineConfig config() const {
    PipelineConfig c = config_path.empty() ? PipelineConfig() : PipelineConfig::load(config_path);
    if (seed) {
      c.seed = *seed;
      c.synth.seed = *seed;
    }
    if (threads == 0) throw UsageError("--threads must be at least 1");
    return c;
  }
};

fs::path or_default(const std::string& flag, const fs::path& dir, const char* file, const char* name) {
  if (!flag.empty()) return flag;
  if (dir.empty()) throw UsageError(std::string("missing ") + name + " (no flag and no config path)");
  return dir / file;
}

void write_json(const fs::path& path, const nlohmann::json& j) { atomic_write(path, canonical_json(j)); }

std::vector<Trial> read_trials_from(const fs::path& p) { return read_trials(p); }

void add_synth(CLI::App& app, Globals& g) {
  auto* cmd = app.add_subcommand("synth", "Generate the synthetic corpus with train/heldout manifests");
  auto out = std::make_shared<std::string>();
  cmd->add_option("--out", *out, "Corpus directory (default: paths.corpus)");
  cmd->callback([&g, out] {
    const PipelineConfig c = g.config();
    const fs::path dir = !out->empty() ? fs::path(*out) : c.corpus_dir;
    if (dir.empty()) throw UsageError("synth: --out or paths.corpus is required");
    const auto rows = write_split_corpus(dir, c.synth, c.heldout_fraction);
    std::cerr << "LOG (synth): " << rows.size() << " utterances written to " << dir << "\n";
  });
}

void add_featurize(CLI::App& app, Globals& g) {
  auto* cmd = app.add_subcommand("featurize", "Compute 80-bin log-Mel filterbanks");
  auto manifest = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  cmd->add_option("--manifest", *manifest, "Manifest TSV (default: <corpus>/manifest.tsv)");
  cmd->add_option("--out", *out, "Feature file")->required();
  cmd->callback([&g, manifest, out] {
    const PipelineConfig c = g.config();
    const auto utts = load_manifest_audio(or_default(*manifest, c.corpus_dir, "manifest.tsv", "--manifest"));
    audio::save_features(*out, featurize(utts, g.threads, cache_dir_from_env()));
  });
}

void add_train(CLI::App& app, Globals& g) {
  auto* cmd = app.add_subcommand("train", "Train an embedding extractor from its seeded initialization");
  auto manifest = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto init_out = std::make_shared<std::string>();
  auto ckpt_dir = std::make_shared<std::string>();
  auto trace = std::make_shared<std::string>();
  auto steps = std::make_shared<std::optional<std::size_t>>();
  cmd->add_option("--manifest", *manifest, "Training manifest (default: <corpus>/train.tsv)");
  cmd->add_option("--out", *out, "Final checkpoint")->required();
  cmd->add_option("--init-out", *init_out, "Also write the initial checkpoint here");
  cmd->add_option("--checkpoint-dir", *ckpt_dir, "Checkpoints at every half cycle");
  cmd->add_option("--trace-out", *trace, "Loss trace TSV");
  cmd->add_option("--steps", *steps, "Override train.steps");
  cmd->callback([&g, manifest, out, init_out, ckpt_dir, trace, steps] {
    const PipelineConfig c = g.config();
    TrainOptions opt = c.train;
    if (*steps) opt.steps = **steps;
    opt.seed = c.seed;
    opt.checkpoint_dir = *ckpt_dir;
    opt.validate();
    TrainingCorpus corpus = TrainingCorpus::from_utterances(
        load_manifest_audio(or_default(*manifest, c.corpus_dir, "train.tsv", "--manifest")));
    models::Checkpoint ck = init_checkpoint(c.architecture, c.aam, corpus.speakers.size(), c.seed);
    if (!init_out->empty()) models::save_checkpoint(*init_out, *ck.model, *ck.head);
    const TrainResult r = train(ck, corpus, opt);
    if (!trace->empty()) atomic_write(*trace, format_loss_trace(r.trace));
    models::save_checkpoint(*out, *ck.model, *ck.head);
  });
}

void add_finetune(CLI::App& app, Globals& g) {
  auto* cmd = app.add_subcommand("finetune", "Domain-balanced large-margin fine-tuning");
  auto manifest = std::make_shared<std::string>();
  auto in = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto preset = std::make_shared<std::string>();
  auto trace = std::make_shared<std::string>();
  auto steps = std::make_shared<std::optional<std::size_t>>();
  cmd->add_option("--manifest", *manifest, "Training manifest (default: <corpus>/train.tsv)");
  cmd->add_option("--checkpoint", *in, "Trained checkpoint")->required();
  cmd->add_option("--out", *out, "Fine-tuned checkpoint")->required();
  cmd->add_option("--preset", *preset, "3s (m = 0.3) or 6s (m = 0.5); default: config finetune");
  cmd->add_option("--trace-out", *trace, "Loss trace TSV");
  cmd->add_option("--steps", *steps, "Override finetune.steps");
  cmd->callback([&g, manifest, in, out, preset, trace, steps] {
    const PipelineConfig c = g.config();
    FineTuneSpec spec = c.finetune;
    if (*preset == "3s") {
      spec = FineTuneSpec::preset_3s();
    } else if (*preset == "6s") {
      spec = FineTuneSpec::preset_6s();
    } else if (!preset->empty()) {
      throw UsageError("finetune: unknown preset \"" + *preset + "\" (3s, 6s)");
    }
    if (*steps) spec.steps = **steps;
    spec.validate();
    models::Checkpoint ck = models::load_checkpoint(*in);
    TrainingCorpus corpus = TrainingCorpus::from_utterances(
        load_manifest_audio(or_default(*manifest, c.corpus_dir, "train.tsv", "--manifest")));
    TrainOptions base = c.train;
    base.seed = c.seed;
    const TrainResult r = finetune(ck, corpus, spec, base);
    if (!trace->empty()) atomic_write(*trace, format_loss_trace(r.trace));
    models::save_checkpoint(*out, *ck.model, *ck.head);
  });
}

void add_extract(CLI::App& app, Globals& g) {
  auto* cmd = app.add_subcommand("extract", "Extract embeddings and pooled statistics");
  auto ckpt = std::make_shared<std::string>();
  auto feats = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto pooled = std::make_shared<std::string>();
  auto manifest = std::make_shared<std::string>();
  auto max_batch = std::make_shared<std::size_t>(16);
  cmd->add_option("--checkpoint", *ckpt, "Model checkpoint")->required();
  cmd->add_option("--features", *feats, "Feature file")->required();
  cmd->add_option("--manifest", *manifest, "Only these utterances, in manifest order");
  cmd->add_option("--out", *out, "Embedding file")->required();
  cmd->add_option("--pooled-out", *pooled, "Pooling-layer vectors");
  cmd->add_option("--max-batch", *max_batch, "Utterances per forward pass");
  cmd->callback([&g, ckpt, feats, out, pooled, manifest, max_batch] {
    g.config();
    const auto f = audio::load_features(*feats);
    models::Checkpoint ck = models::load_checkpoint(*ckpt);
    Extracted e;
    if (manifest->empty()) {
      e = extract(*ck.model, f, *max_batch, g.threads);
    } else {
      std::vector<std::string> ids;
      for (const auto& i : audio::read_manifest(*manifest)) ids.push_back(i.id);
      e = extract(*ck.model, f, ids, *max_batch, g.threads);
    }
    save_embeddings(*out, e.embeddings);
    if (!pooled->empty()) save_embeddings(*pooled, e.pooled);
  });
}

void add_score(CLI::App& app, Globals& g) {
  auto* cmd = app.add_subcommand("score", "Cosine scoring of enrollment models against tests");
  auto emb = std::make_shared<std::string>();
  auto enr = std::make_shared<std::string>();
  auto trials = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  cmd->add_option("--embeddings", *emb, "Embedding file holding enrollment and test utterances")->required();
  cmd->add_option("--enrollment", *enr, "Enrollment list TSV")->required();
  cmd->add_option("--trials", *trials, "Trial list TSV")->required();
  cmd->add_option("--out", *out, "Score TSV")->required();
  cmd->callback([&g, emb, enr, trials, out] {
    g.config();
    const EmbeddingSet e = load_embeddings(*emb);
    const auto t = read_trials_from(*trials);
    const auto models = build_models(read_enrollment(*enr), e);
    atomic_write(*out, format_scores(score_trials(t, models, e)));
  });
}

void add_snorm(CLI::App& app, Globals& g) {
  auto* cmd = app.add_subcommand("snorm", "Adaptive s-normalization against an imposter cohort");
  auto scores = std::make_shared<std::string>();
  auto emb = std::make_shared<std::string>();
  auto enr = std::make_shared<std::string>();
  auto cohort_emb = std::make_shared<std::string>();
  auto cohort_manifest = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto top_k = std::make_shared<std::optional<std::size_t>>();
  cmd->add_option("--scores", *scores, "Raw score TSV")->required();
  cmd->add_option("--embeddings", *emb, "Embedding file of the trials")->required();
  cmd->add_option("--enrollment", *enr, "Enrollment list TSV")->required();
  cmd->add_option("--cohort-embeddings", *cohort_emb, "Embeddings of the cohort utterances")->required();
  cmd->add_option("--cohort-manifest", *cohort_manifest, "Manifest naming cohort speakers")->required();
  cmd->add_option("--top-k", *top_k, "Override cohort.top_k");
  cmd->add_option("--out", *out, "Normalized score TSV")->required();
  cmd->callback([&g, scores, emb, enr, cohort_emb, cohort_manifest, out, top_k] {
    const PipelineConfig c = g.config();
    const auto raw = read_scores(*scores);
    const EmbeddingSet e = load_embeddings(*emb);
    const auto models = build_models(read_enrollment(*enr), e);
    const Cohort cohort = cohort_from(load_embeddings(*cohort_emb), audio::read_manifest(*cohort_manifest),
                                      top_k->value_or(c.cohort_top_k));
    atomic_write(*out, format_scores(snorm_scores(raw, models, e, cohort)));
  });
}

void add_trials(CLI::App& app, Globals& g) {
  auto* cmd = app.add_subcommand("trials", "Generate within-gender calibration or evaluation trials");
  auto manifest = std::make_shared<std::string>();
  auto trials = std::make_shared<std::string>();
  auto enr = std::make_shared<std::string>();
  auto per = std::make_shared<std::size_t>(kCalTrialsPerSpeaker);
  auto total = std::make_shared<std::optional<std::size_t>>();
  auto tag = std::make_shared<std::string>("caltrials");
  cmd->add_option("--manifest", *manifest, "Manifest TSV")->required();
  cmd->add_option("--out-trials", *trials, "Trial list TSV")->required();
  cmd->add_option("--out-enrollment", *enr, "Enrollment list TSV")->required();
  cmd->add_option("--per-speaker", *per, "Trials per speaker");
  cmd->add_option("--total", *total, "Truncate to this many trials, overriding --per-speaker");
  cmd->add_option("--tag", *tag, "Seed tag, so several lists can come from one seed");
  cmd->callback([&g, manifest, trials, enr, per, total, tag] {
    const PipelineConfig c = g.config();
    const auto infos = audio::read_manifest(*manifest);
    const std::uint64_t seed = derive_seed(c.seed, *tag);
    const CalTrialSet set = *total ? gen_eval_trials(infos, seed, **total) : gen_cal_trials(infos, seed, *per);
    atomic_write(*trials, format_trials(set.trials));
    atomic_write(*enr, format_enrollment(set.enrollment));
  });
}

void add_train_gb(CLI::App& app, Globals& g) {
  auto* cmd = app.add_subcommand("train-gb", "Fit the Gaussian-backend language classifier");
  auto pooled = std::make_shared<std::string>();
  auto manifest = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  cmd->add_option("--pooled", *pooled, "Pooling-layer vectors")->required();
  cmd->add_option("--manifest", *manifest, "Manifest with language labels")->required();
  cmd->add_option("--out", *out, "Backend JSON")->required();
  cmd->callback([&g, pooled, manifest, out] {
    g.config();
    write_json(*out, fit_language_backend(load_embeddings(*pooled), audio::read_manifest(*manifest)).to_json());
  });
}

void add_qm(CLI::App& app, Globals& g) {
  auto* cmd = app.add_subcommand("qm", "Quality measures of each trial");
  auto trials = std::make_shared<std::string>();
  auto enr = std::make_shared<std::string>();
  auto manifest = std::make_shared<std::string>();
  auto pooled = std::make_shared<std::string>();
  auto gb = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  cmd->add_option("--trials", *trials, "Trial list TSV")->required();
  cmd->add_option("--enrollment", *enr, "Enrollment list TSV")->required();
  cmd->add_option("--manifest", *manifest, "Manifest with test durations")->required();
  cmd->add_option("--pooled", *pooled, "Pooling-layer vectors of the tests")->required();
  cmd->add_option("--gb", *gb, "Gaussian backend JSON")->required();
  cmd->add_option("--out", *out, "QM sidecar TSV")->required();
  cmd->callback([&g, trials, enr, manifest, pooled, gb, out] {
    const PipelineConfig c = g.config();
    const auto rows = compute_qms(read_trials_from(*trials), read_enrollment(*enr),
                                  audio::read_manifest(*manifest), load_embeddings(*pooled),
                                  GaussianBackend::from_json(load_json(*gb)), c.d_min);
    atomic_write(*out, format_qms(rows));
  });
}

void add_calibrate(CLI::App& app, Globals& g) {
  auto* cmd = app.add_subcommand("calibrate", "Fit (with --trials) or apply (with --model) calibration");
  auto scores = std::make_shared<std::string>();
  auto trials = std::make_shared<std::string>();
  auto qm = std::make_shared<std::string>();
  auto model = std::make_shared<std::string>();
  auto model_out = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  auto score_only = std::make_shared<bool>(false);
  cmd->add_option("--scores", *scores, "Score TSV")->required();
  auto* fit_trials = cmd->add_option("--trials", *trials, "Labelled trials; fit mode");
  auto* apply_model = cmd->add_option("--model", *model, "Calibration JSON; apply mode");
  fit_trials->excludes(apply_model);
  cmd->add_option("--qm", *qm, "QM sidecar TSV");
  cmd->add_flag("--score-only", *score_only, "Fit on the score alone");
  cmd->add_option("--model-out", *model_out, "Fitted calibration JSON");
  cmd->add_option("--out", *out, "Calibrated score TSV");
  cmd->callback([&g, scores, trials, qm, model, model_out, out, score_only] {
    g.config();
    const auto s = read_scores(*scores);
    std::vector<QualityVector> q;
    if (!qm->empty()) q = match_qms(s, read_qms(*qm));
    if (!trials->empty()) {
      if (model_out->empty()) throw UsageError("calibrate: fit mode needs --model-out");
      if (!*score_only && qm->empty()) throw UsageError("calibrate: --qm is required unless --score-only");
      const ScoredTrialSet labelled = label_scores(s, read_trials_from(*trials));
      CalibrationOptions opt;
      opt.use_qms = !*score_only;
      write_json(*model_out, calibrate(labelled.scores, q, labelled.target, opt).to_json());
      return;
    }
    if (model->empty() || out->empty()) throw UsageError("calibrate: apply mode needs --model and --out");
    const CalibrationModel m = CalibrationModel::from_json(load_json(*model));
    if (!m.w.empty() && qm->empty()) throw UsageError("calibrate: this model needs --qm");
    std::vector<ScoreRow> llr = s;
    for (std::size_t i = 0; i < llr.size(); ++i) llr[i].score = m.apply(s[i].score, q.empty() ? QualityVector{} : q[i]);
    atomic_write(*out, format_scores(llr));
  });
}

void add_fuse(CLI::App& app, Globals& g) {
  auto* cmd = app.add_subcommand("fuse", "Weighted average of several score files");
  auto scores = std::make_shared<std::vector<std::string>>();
  auto weights = std::make_shared<std::vector<double>>();
  auto out = std::make_shared<std::string>();
  cmd->add_option("--scores", *scores, "Score TSVs")->required()->delimiter(',');
  cmd->add_option("--weights", *weights, "One weight per file (default: fusion_weights)")->delimiter(',');
  cmd->add_option("--out", *out, "Fused score TSV")->required();
  cmd->callback([&g, scores, weights, out] {
    const PipelineConfig c = g.config();
    std::vector<std::vector<ScoreRow>> systems;
    for (const auto& p : *scores) systems.push_back(read_scores(p));
    atomic_write(*out, format_scores(fuse(systems, weights->empty() ? c.fusion_weights : *weights)));
  });
}

void add_evaluate(CLI::App& app, Globals& g) {
  auto* cmd = app.add_subcommand("evaluate", "EER and minDCF of a labelled score file");
  auto scores = std::make_shared<std::string>();
  auto trials = std::make_shared<std::string>();
  auto out = std::make_shared<std::string>();
  cmd->add_option("--scores", *scores, "Score TSV")->required();
  cmd->add_option("--trials", *trials, "Labelled trial list")->required();
  cmd->add_option("--out", *out, "Report JSON");
  cmd->callback([&g, scores, trials, out] {
    const PipelineConfig c = g.config();
    const EvalReport r = evaluate(label_scores(read_scores(*scores), read_trials_from(*trials)), c.dcf);
    const std::string text = canonical_json(r.to_json());
    if (!out->empty()) atomic_write(*out, text);
    std::cout << text;
  });
}

}  // namespace
}  // namespace svlab

int main(int argc, char** argv) {
  CLI::App app{"svlab: speaker verification toolkit"};
  app.require_subcommand(1);
  svlab::Globals g;
  app.add_option("--config", g.config_path, "Pipeline config JSON")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Override the config seed");
  app.add_option("--threads", g.threads, "Worker threads (default 1)");
  svlab::add_synth(app, g);
  svlab::add_featurize(app, g);
  svlab::add_train(app, g);
  svlab::add_finetune(app, g);
  svlab::add_extract(app, g);
  svlab::add_score(app, g);
  svlab::add_snorm(app, g);
  svlab::add_trials(app, g);
  svlab::add_train_gb(app, g);
  svlab::add_qm(app, g);
  svlab::add_calibrate(app, g);
  svlab::add_fuse(app, g);
  svlab::add_evaluate(app, g);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const svlab::Error& e) {
    std::cerr << "ERROR (svlab): " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "ERROR (svlab): " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "ERROR (svlab): " << e.what() << "\n";
    return 3;
  }
  return 0;
}
