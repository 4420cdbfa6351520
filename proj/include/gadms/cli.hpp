#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gadms/curation.hpp"
#include "gadms/retrieval.hpp"
#include "gadms/trainer.hpp"

namespace gadms {
namespace cli {

// Exit codes shared with the test suite.
constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kDataError = 3;
constexpr int kNumericAbort = 4;

namespace detail {

inline int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::Numeric:
      return kNumericAbort;
    case ErrorKind::Config:
      return kUsage;
    default:
      return kDataError;
  }
}

inline std::vector<PairRecord>& split_of(Corpus& corpus,
                                         const std::string& name) {
  if (name == "train") return corpus.train;
  if (name == "test") return corpus.test;
  fail(ErrorKind::Config, "unknown split: " + name);
}

// Latest epoch checkpoint under <out>/checkpoints, or empty when none exist.
inline std::string latest_checkpoint(const std::string& out_dir) {
  namespace fs = std::filesystem;
  const fs::path root = fs::path(out_dir) / "checkpoints";
  int best = -1;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(root, ec)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("epoch-", 0) != 0) continue;
    try {
      best = std::max(best, std::stoi(name.substr(6)));
    } catch (const std::exception&) {
    }
  }
  if (best < 0) return "";
  return (root / ("epoch-" + std::to_string(best))).string();
}

}  // namespace detail

struct TrainArgs {
  std::string corpus_dir, out_dir, config_file;
  bool resume = false;
  bool audit_masks = false;
  TrainConfig cfg;
};

inline int cmd_train(const TrainArgs& args) {
  namespace fs = std::filesystem;
  TrainConfig cfg = args.cfg;
  Corpus corpus = load_corpus(args.corpus_dir);
  // The corpus dictates the data-facing geometry; everything else comes from
  // the config file / flags.
  cfg.model.encoder.grid_rows = corpus.encoder.grid_rows;
  cfg.model.encoder.grid_cols = corpus.encoder.grid_cols;
  cfg.model.encoder.patch_channels = corpus.encoder.patch_channels;
  cfg.model.encoder.max_text_len = corpus.encoder.max_text_len;
  check(corpus.vocab.size() <= cfg.model.encoder.vocab_size,
        ErrorKind::Compatibility,
        "corpus vocabulary exceeds the configured model vocabulary");
  cfg.validate();

  std::error_code ec;
  fs::create_directories(args.out_dir, ec);
  check(!ec, ErrorKind::Io, "cannot create output directory " + args.out_dir);

  Model model;
  AdamState resumed_adam;
  int start_epoch = 0;
  bool resumed = false;
  if (args.resume) {
    const std::string resume_from = detail::latest_checkpoint(args.out_dir);
    check(!resume_from.empty(), ErrorKind::Io,
          "resume requested but no checkpoint found under " + args.out_dir);
    const TrainProgress prog = load_checkpoint(resume_from, model, &resumed_adam);
    check(model.cfg.encoder.vocab_size >= corpus.vocab.size(),
          ErrorKind::Compatibility, "checkpoint vocabulary too small");
    start_epoch = prog.epoch;
    check(start_epoch < cfg.epochs, ErrorKind::Config,
          "checkpoint already covers the configured epochs");
    resumed = true;
  } else {
    model.init(cfg.model, cfg.seed);
    std::ofstream cfg_out(fs::path(args.out_dir) / "config.json");
    check(cfg_out.good(), ErrorKind::Io, "cannot write effective config");
    cfg_out << json(cfg).dump(2) << "\n";
  }

  Trainer trainer(model, cfg);
  if (resumed) trainer.adam() = std::move(resumed_adam);
  const auto mode = resumed ? std::ios::app : std::ios::trunc;
  std::ofstream metrics(fs::path(args.out_dir) / "metrics.jsonl", mode);
  check(metrics.good(), ErrorKind::Io, "cannot open metrics log");
  std::ofstream audit;
  if (args.audit_masks) {
    audit.open(fs::path(args.out_dir) / "mask-audit.jsonl", mode);
    check(audit.good(), ErrorKind::Io, "cannot open mask audit log");
  }
  try {
    const FitResult r = fit(model, trainer, corpus, cfg, args.out_dir,
                            start_epoch, &metrics,
                            args.audit_masks ? &audit : nullptr);
    std::cout << json{{"final_checkpoint", r.final_checkpoint},
                      {"steps", r.metrics.size()}}
                     .dump()
              << "\n";
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Numeric) {
      std::ofstream dump(fs::path(args.out_dir) / "numeric-abort.json");
      dump << trainer.diagnostic().dump(2) << "\n";
    }
    throw;
  }
  return kOk;
}

struct EvaluateArgs {
  std::string checkpoint_dir, corpus_dir, split = "test", out_file;
};

inline int cmd_evaluate(const EvaluateArgs& args) {
  Model model;
  load_checkpoint(args.checkpoint_dir, model);
  Corpus corpus = load_corpus(args.corpus_dir);
  const auto& records = detail::split_of(corpus, args.split);
  const MetricsReport report = evaluate(model, records, corpus.vocab);
  const json j(report);
  if (args.out_file.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::ofstream os(args.out_file);
    check(os.good(), ErrorKind::Io, "cannot write metrics report");
    os << j.dump(2) << "\n";
  }
  return kOk;
}

struct DumpScoresArgs {
  std::string checkpoint_dir, corpus_dir, split = "test", out_file;
};

inline int cmd_dump_scores(const DumpScoresArgs& args) {
  Model model;
  load_checkpoint(args.checkpoint_dir, model);
  Corpus corpus = load_corpus(args.corpus_dir);
  const auto& records = detail::split_of(corpus, args.split);
  std::ofstream os(args.out_file);
  check(os.good(), ErrorKind::Io, "cannot write score dump " + args.out_file);
  for (const auto& rec : records) {
    const TokenSequence seq = TokenSequence::build(rec.tokens, model.cfg.encoder);
    const ImageEncoding img = encode_image(model.image, rec.image);
    const GassScores scores = score_caption(model, seq, img.cls);
    std::vector<std::string> tokens;
    std::vector<double> s;
    for (int i = 0; i < seq.length; ++i) {
      tokens.push_back(corpus.vocab.word(seq.ids[static_cast<std::size_t>(i)]));
      s.push_back(scores.normalized(i));
    }
    os << json{{"pair_id", rec.pair_id}, {"tokens", tokens}, {"scores", s}}
              .dump()
       << "\n";
  }
  return kOk;
}

struct FilterArgs {
  std::string records_file, accepted_file, audit_file;
  FilterCriteria criteria;
};

inline int cmd_filter(const FilterArgs& args) {
  const auto candidates = load_candidates(args.records_file);
  std::ofstream accepted(args.accepted_file);
  check(accepted.good(), ErrorKind::Io, "cannot write accepted manifest");
  std::ofstream audit(args.audit_file);
  check(audit.good(), ErrorKind::Io, "cannot write rejection audit");
  int kept = 0;
  for (const auto& rec : candidates) {
    Verdict v = filter_person_crop(rec.detection, args.criteria);
    const Verdict pose = verify_pose(rec.pose, args.criteria);
    for (const auto& r : pose.reasons) v.reject(r);
    audit << json{{"image_id", rec.detection.image_id},
                  {"accepted", v.accepted},
                  {"reasons", v.reasons}}
                 .dump()
          << "\n";
    if (v.accepted) {
      accepted << rec.raw.dump() << "\n";
      ++kept;
    }
  }
  std::cout << json{{"total", candidates.size()}, {"accepted", kept}}.dump()
            << "\n";
  return kOk;
}

struct CurateArgs {
  std::string templates_file, out_file;
  int k = 0;
  int per_cluster_random = 5;
  std::uint64_t seed = 1;
};

inline int cmd_curate_templates(const CurateArgs& args) {
  const auto records = load_templates(args.templates_file);
  const Clustering clustering = cluster_templates(records, args.k, args.seed);
  const TemplateBank bank =
      select_templates(records, clustering, args.per_cluster_random, args.seed);
  std::ofstream os(args.out_file);
  check(os.good(), ErrorKind::Io, "cannot write template bank");
  os << bank_to_json(bank).dump(2) << "\n";
  std::cout << json{{"k", bank.k},
                    {"clusters", bank.clusters.size()},
                    {"warnings", bank.warnings.size()}}
                   .dump()
            << "\n";
  return kOk;
}

struct GenCorpusArgs {
  std::string out_dir;
  int train_n = 2000;
  int test_n = 200;
  double noise_rate = 0.2;
  std::uint64_t seed = 1;
};

inline int cmd_gen_corpus(const GenCorpusArgs& args) {
  EncoderConfig enc;  // corpus geometry comes from the default grid
  const json manifest = build_corpus(args.out_dir, args.train_n, args.test_n,
                                     args.noise_rate, args.seed, enc);
  std::cout << manifest.dump(2) << "\n";
  return kOk;
}

inline int run(std::vector<std::string> args) {
  CLI::App app{"dual-masked contrastive person-representation toolkit"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model on a generated corpus");
  t->add_option("--corpus", train.corpus_dir, "corpus directory")->required();
  t->add_option("--out", train.out_dir, "output directory")->required();
  t->add_option("--config", train.config_file, "TrainConfig JSON file");
  t->add_flag("--resume", train.resume, "continue from the latest checkpoint");
  t->add_flag("--audit-masks", train.audit_masks,
              "write per-caption mask audit lines");
  double alpha_n = -1, alpha_i = -1, lambda = -1, gamma = -1, tau = -1;
  double beta = -1, lr = -1, wd = -1, adam_eps = -1;
  int epochs = -1, warmup = -1, batch = -1, score_every = -1;
  std::int64_t seed = -1;
  bool conventional_ce = false;
  t->add_option("--alpha-n", alpha_n, "noise-mask probability cap");
  t->add_option("--alpha-i", alpha_i, "informative-mask probability cap");
  t->add_option("--lambda", lambda, "mask sigmoid sharpness");
  t->add_option("--gamma", gamma, "mask sigmoid midpoint");
  t->add_option("--tau", tau, "similarity temperature");
  t->add_option("--beta", beta, "masked-prediction loss weight");
  t->add_option("--lr", lr, "peak learning rate");
  t->add_option("--weight-decay", wd, "L2 weight decay");
  t->add_option("--adam-eps", adam_eps, "Adam epsilon");
  t->add_option("--epochs", epochs, "training epochs");
  t->add_option("--warmup-epochs", warmup, "linear warmup epochs");
  t->add_option("--batch", batch, "batch size");
  t->add_option("--seed", seed, "run seed");
  t->add_option("--score-every", score_every, "probe refresh period in steps");
  t->add_flag("--conventional-ce", conventional_ce,
              "normalize masked prediction by |M| instead of |M|*|V|");

  EvaluateArgs eval;
  auto* e = app.add_subcommand("evaluate", "retrieval metrics for a checkpoint");
  e->add_option("--checkpoint", eval.checkpoint_dir, "checkpoint directory")
      ->required();
  e->add_option("--corpus", eval.corpus_dir, "corpus directory")->required();
  e->add_option("--split", eval.split, "train or test split");
  e->add_option("--out", eval.out_file, "metrics JSON output file");

  DumpScoresArgs dump;
  auto* ds = app.add_subcommand("dump-scores",
                                "per-token score dump for a checkpoint");
  ds->add_option("--checkpoint", dump.checkpoint_dir, "checkpoint directory")
      ->required();
  ds->add_option("--corpus", dump.corpus_dir, "corpus directory")->required();
  ds->add_option("--split", dump.split, "train or test split");
  ds->add_option("--out", dump.out_file, "JSONL output file")->required();

  FilterArgs filter;
  auto* f = app.add_subcommand("filter", "apply the person-crop filter rules");
  f->add_option("--records", filter.records_file, "candidate JSONL file")
      ->required();
  f->add_option("--out-accepted", filter.accepted_file,
                "accepted manifest JSONL")
      ->required();
  f->add_option("--out-audit", filter.audit_file, "verdict audit JSONL")
      ->required();
  f->add_option("--min-short-side", filter.criteria.min_short_side,
                "strict lower bound on the short side, px");
  f->add_option("--aspect-lo", filter.criteria.aspect_lo,
                "inclusive height/width lower bound");
  f->add_option("--aspect-hi", filter.criteria.aspect_hi,
                "inclusive height/width upper bound");
  f->add_option("--min-confidence", filter.criteria.min_confidence,
                "strict detector confidence bound");
  f->add_option("--min-visible-kp", filter.criteria.min_visible_kp,
                "minimum visible keypoints");
  f->add_option("--min-hip", filter.criteria.min_hip,
                "minimum visible hip keypoints");
  f->add_option("--min-head", filter.criteria.min_head,
                "minimum visible head keypoints");

  CurateArgs curate;
  auto* c = app.add_subcommand("curate-templates",
                               "cluster templates and select a bank");
  c->add_option("--templates", curate.templates_file, "template JSONL file")
      ->required();
  c->add_option("--k", curate.k, "cluster count")->required();
  c->add_option("--per-cluster-random", curate.per_cluster_random,
                "random picks per cluster");
  c->add_option("--seed", curate.seed, "clustering/selection seed");
  c->add_option("--out", curate.out_file, "template bank JSON file")
      ->required();

  GenCorpusArgs gen;
  auto* g = app.add_subcommand("gen-corpus", "generate a synthetic corpus");
  g->add_option("--out", gen.out_dir, "corpus directory")->required();
  g->add_option("--train", gen.train_n, "training pair count");
  g->add_option("--test", gen.test_n, "test pair count");
  g->add_option("--noise-rate", gen.noise_rate,
                "per-slot caption corruption probability");
  g->add_option("--seed", gen.seed, "corpus seed");

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kOk : kUsage;
  }

  try {
    if (*t) {
      if (!train.config_file.empty()) {
        std::ifstream is(train.config_file);
        check(is.good(), ErrorKind::Io,
              "cannot open config file " + train.config_file);
        json j;
        try {
          is >> j;
        } catch (const json::exception& ex) {
          fail(ErrorKind::Config, std::string("bad config file: ") + ex.what());
        }
        train.cfg = j.get<TrainConfig>();
      }
      if (alpha_n >= 0) train.cfg.mask.alpha_noise = alpha_n;
      if (alpha_i >= 0) train.cfg.mask.alpha_informative = alpha_i;
      if (lambda >= 0) train.cfg.mask.lambda = lambda;
      if (gamma >= 0) train.cfg.mask.gamma = gamma;
      if (tau >= 0) train.cfg.sdm.tau = tau;
      if (beta >= 0) train.cfg.beta = beta;
      if (lr >= 0) train.cfg.lr = lr;
      if (wd >= 0) train.cfg.weight_decay = wd;
      if (adam_eps >= 0) train.cfg.adam_eps = adam_eps;
      if (epochs >= 0) train.cfg.epochs = epochs;
      if (warmup >= 0) train.cfg.warmup_epochs = warmup;
      if (batch >= 0) train.cfg.batch_size = batch;
      if (seed >= 0) train.cfg.seed = static_cast<std::uint64_t>(seed);
      if (score_every >= 0) train.cfg.score_every = score_every;
      if (conventional_ce) train.cfg.conventional_ce = true;
      return cmd_train(train);
    }
    if (*e) return cmd_evaluate(eval);
    if (*ds) return cmd_dump_scores(dump);
    if (*f) return cmd_filter(filter);
    if (*c) return cmd_curate_templates(curate);
    if (*g) return cmd_gen_corpus(gen);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << "\n";
    return detail::exit_code_for(err);
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kDataError;
  }
  return kUsage;
}

inline int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(std::move(args));
}

}  // namespace cli
}  // namespace gadms
