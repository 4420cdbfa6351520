#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "gadms/corpus.hpp"
#include "gadms/masking.hpp"
#include "gadms/model.hpp"
#include "gadms/objectives.hpp"

namespace gadms {

inline void to_json(json& j, const MaskConfig& c) {
  j = json{{"alpha_noise", c.alpha_noise},
           {"alpha_informative", c.alpha_informative},
           {"lambda", c.lambda},
           {"gamma", c.gamma}};
}
inline void from_json(const json& j, MaskConfig& c) {
  j.at("alpha_noise").get_to(c.alpha_noise);
  j.at("alpha_informative").get_to(c.alpha_informative);
  j.at("lambda").get_to(c.lambda);
  j.at("gamma").get_to(c.gamma);
}

inline void to_json(json& j, const SdmConfig& c) {
  j = json{{"tau", c.tau}, {"epsilon", c.epsilon}};
}
inline void from_json(const json& j, SdmConfig& c) {
  j.at("tau").get_to(c.tau);
  j.at("epsilon").get_to(c.epsilon);
}

struct TrainConfig {
  ModelConfig model;
  MaskConfig mask;
  SdmConfig sdm;
  double beta = 0.4;          // masked-prediction loss weight
  double lr = 1e-4;
  double weight_decay = 4e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-3;
  int epochs = 30;
  int warmup_epochs = 5;
  int batch_size = 64;
  std::uint64_t seed = 1;
  int score_every = 1;         // probe refresh period, in steps
  bool conventional_ce = false;

  void validate() const {
    model.validate();
    mask.validate();
    sdm.validate();
    check(lr > 0.0, ErrorKind::Config, "learning rate must be positive");
    check(weight_decay >= 0.0 && beta >= 0.0, ErrorKind::Config,
          "loss weights must be non-negative");
    check(epochs >= 1 && batch_size >= 1, ErrorKind::Config,
          "epochs and batch size must be >= 1");
    check(warmup_epochs >= 0 && warmup_epochs <= epochs, ErrorKind::Config,
          "warmup must lie within the epoch budget");
    check(score_every >= 1, ErrorKind::Config, "score period must be >= 1");
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"model", c.model},
           {"mask", c.mask},
           {"sdm", c.sdm},
           {"beta", c.beta},
           {"lr", c.lr},
           {"weight_decay", c.weight_decay},
           {"adam_beta1", c.adam_beta1},
           {"adam_beta2", c.adam_beta2},
           {"adam_eps", c.adam_eps},
           {"epochs", c.epochs},
           {"warmup_epochs", c.warmup_epochs},
           {"batch_size", c.batch_size},
           {"seed", c.seed},
           {"score_every", c.score_every},
           {"conventional_ce", c.conventional_ce}};
}
inline void from_json(const json& j, TrainConfig& c) {
  j.at("model").get_to(c.model);
  j.at("mask").get_to(c.mask);
  j.at("sdm").get_to(c.sdm);
  j.at("beta").get_to(c.beta);
  j.at("lr").get_to(c.lr);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("adam_beta1").get_to(c.adam_beta1);
  j.at("adam_beta2").get_to(c.adam_beta2);
  j.at("adam_eps").get_to(c.adam_eps);
  j.at("epochs").get_to(c.epochs);
  j.at("warmup_epochs").get_to(c.warmup_epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("seed").get_to(c.seed);
  j.at("score_every").get_to(c.score_every);
  j.at("conventional_ce").get_to(c.conventional_ce);
}

// Per-step learning rate: linear ramp across the warmup steps, then cosine
// decay to zero at the final step.
inline double lr_at(std::int64_t step, std::int64_t warmup_steps,
                    std::int64_t total_steps, double lr_max) {
  check(step >= 0 && step < total_steps, ErrorKind::Contract,
        "step outside the schedule");
  if (step < warmup_steps)
    return lr_max * static_cast<double>(step + 1) /
           static_cast<double>(warmup_steps);
  if (total_steps == warmup_steps) return lr_max;
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return 0.5 * lr_max * (1.0 + std::cos(3.141592653589793238462643 * progress));
}

// One Adam update over every registered parameter. L2 weight decay is folded
// into the gradient; untouched parameters still decay.
inline void adam_update(ParamRegistry& params, const GradStore& grads,
                        AdamState& adam, double lr, const TrainConfig& cfg) {
  adam.step += 1;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const int pid = static_cast<int>(i);
    Mat& p = params.value(pid);
    Mat g = grads.touched(pid) ? grads.grad(pid) : Mat::Zero(p.rows(), p.cols());
    if (cfg.weight_decay > 0.0) g += cfg.weight_decay * p;
    adam.m[i] = b1 * adam.m[i] + (1.0 - b1) * g;
    adam.v[i] = b2 * adam.v[i] + (1.0 - b2) * g.cwiseProduct(g);
    const Mat mhat = adam.m[i] / c1;
    const Mat vhat = adam.v[i] / c2;
    p -= lr * (mhat.array() / (vhat.array().sqrt() + cfg.adam_eps)).matrix();
  }
}

// Scores one caption against a fixed image embedding: probe the similarity
// gradients at the configured layers, then fuse with the attention evidence.
inline GassScores score_caption(const Model& model, const TokenSequence& seq,
                                const RowVec& v_cls) {
  const std::vector<int> layers =
      model.cfg.gass.layer_indices(model.cfg.encoder.text_depth);
  std::vector<LayerTrace> traces;
  const GradientProbe probe =
      probe_text_gradients(model.text, seq, v_cls, layers, &traces);
  return compute_gass(traces, probe, seq.valid, seq.eos_pos(), model.cfg.gass,
                      model.cfg.encoder.text_depth);
}

struct StepOutcome {
  LossReport report;
  double lr = 0.0;
  int masked_noise = 0;
  int masked_informative = 0;
};

// Optional per-caption audit rows describing the sampled masks.
struct MaskAudit {
  std::vector<json> rows;
};

// Loss and reduced parameter gradients for one batch, before the optimizer
// touches anything. `plans` records the mask actually applied per sample.
struct StepGradients {
  LossReport report;
  GradStore master;
  int masked_noise = 0;
  int masked_informative = 0;
  std::vector<MaskPlan> plans;

  explicit StepGradients(const ParamRegistry& reg) : master(reg) {}
};

// Full training pipeline. The step order is fixed: image forward, score
// probe (frozen), mask sampling, masked text forward, SDM, cross-modal
// decode + masked prediction, one backward pass, one optimizer update.
class Trainer {
 public:
  Trainer(Model& model, const TrainConfig& cfg) : model_(model), cfg_(cfg) {
    cfg_.validate();
    adam_.init(model_.params);
  }

  AdamState& adam() { return adam_; }
  const json& diagnostic() const { return diagnostic_; }

  StepOutcome step(const std::vector<const PairRecord*>& batch,
                   std::int64_t global_step, std::int64_t warmup_steps,
                   std::int64_t total_steps, MaskAudit* audit = nullptr) {
    StepGradients g = compute(batch, global_step, audit);
    StepOutcome out;
    out.report = g.report;
    out.lr = lr_at(global_step, warmup_steps, total_steps, cfg_.lr);
    out.masked_noise = g.masked_noise;
    out.masked_informative = g.masked_informative;
    adam_update(model_.params, g.master, adam_, out.lr, cfg_);
    return out;
  }

  // Loss and gradients without the optimizer update. When `forced_plans` is
  // given the probe and mask sampling are skipped and the supplied plans are
  // applied verbatim; that keeps the loss a smooth function of the weights,
  // which is what a derivative check needs.
  StepGradients compute(const std::vector<const PairRecord*>& batch,
                        std::int64_t global_step, MaskAudit* audit = nullptr,
                        const std::vector<MaskPlan>* forced_plans = nullptr) {
    const int b = static_cast<int>(batch.size());
    check(b >= 1, ErrorKind::DegenerateInput, "empty batch");
    check(!forced_plans ||
              static_cast<int>(forced_plans->size()) == b,
          ErrorKind::Alignment, "forced plans do not match the batch");
    const EncoderConfig& enc = model_.cfg.encoder;
    const int d = enc.width;

    struct SampleCtx {
      std::unique_ptr<ag::Tape> tape;
      std::unique_ptr<GradStore> gs;
      ag::NodePtr img_cls, img_tokens, txt_eos, txt_hidden, logits;
      std::vector<int> targets;
    };
    std::vector<SampleCtx> ctx(static_cast<std::size_t>(b));
    std::vector<int> ids(static_cast<std::size_t>(b));
    Mat v_cls(b, d), t_eos(b, d);
    int masked_noise = 0, masked_informative = 0;
    std::vector<MaskPlan> plans;
    plans.reserve(static_cast<std::size_t>(b));

    for (int s = 0; s < b; ++s) {
      const PairRecord& rec = *batch[static_cast<std::size_t>(s)];
      ids[static_cast<std::size_t>(s)] = rec.identity;
      SampleCtx& c = ctx[static_cast<std::size_t>(s)];
      c.tape = std::make_unique<ag::Tape>();
      c.gs = std::make_unique<GradStore>(model_.params);

      // (0) image forward on the training tape
      auto img = model_.image.forward(*c.tape, rec.image, c.gs.get());
      c.img_cls = img.cls_embed;
      c.img_tokens = img.tokens;
      v_cls.row(s) = c.img_cls->val.row(0);

      // (1) frozen token scores from the unmasked view
      const TokenSequence seq = TokenSequence::build(rec.tokens, enc);
      MaskPlan plan;
      if (forced_plans) {
        plan = (*forced_plans)[static_cast<std::size_t>(s)];
      } else {
        const RowVec* cached = lookup_score(rec.identity, global_step);
        RowVec scores;
        if (cached) {
          scores = *cached;
        } else {
          scores = score_caption(model_, seq, v_cls.row(s)).normalized;
          score_cache_[rec.identity] = scores;
        }

        // (2) dual-mask sampling from an isolated stream
        Rng mask_rng = derive_stream(cfg_.seed, Stream::Mask,
                                     {static_cast<std::uint64_t>(global_step),
                                      static_cast<std::uint64_t>(s)});
        plan = sample_mask(seq, scores, cfg_.mask, mask_rng);
        if (audit)
          audit->rows.push_back(json{
              {"step", global_step},
              {"pair_id", rec.pair_id},
              {"noise_positions", plan.noise_positions},
              {"informative_positions", plan.informative_positions},
              {"p_noise", plan.p_noise},
              {"p_informative", plan.p_informative},
              {"scores", std::vector<double>(scores.data(),
                                             scores.data() + scores.size())}});
      }
      masked_noise += static_cast<int>(plan.noise_positions.size());
      masked_informative += static_cast<int>(plan.informative_positions.size());

      // (3) masked text forward on the training tape
      const TokenSequence masked = apply_mask(seq, plan, enc);
      auto txt = model_.text.forward(*c.tape, masked, c.gs.get());
      c.txt_eos = txt.eos_embed;
      c.txt_hidden = txt.hidden;
      t_eos.row(s) = c.txt_eos->val.row(0);

      // (5a) cross-modal decode at the informative positions
      if (cfg_.beta > 0.0 && !plan.informative_positions.empty()) {
        ag::NodePtr fused = model_.decoder.decode(*c.tape, c.txt_hidden,
                                                  c.img_tokens, masked.valid,
                                                  c.gs.get());
        c.logits = model_.decoder.logits_at(*c.tape, fused,
                                            plan.informative_positions,
                                            c.gs.get());
        for (int p : plan.informative_positions)
          c.targets.push_back(seq.ids[static_cast<std::size_t>(p)]);
      }
      plans.push_back(std::move(plan));
    }

    // (4) similarity-distribution loss on the masked-view embeddings
    const SdmGrad sdm = sdm_loss_grad(v_cls, t_eos, ids, cfg_.sdm);

    // (5b) masked-prediction loss over the union of informative positions
    Eigen::Index m_total = 0;
    for (const auto& c : ctx)
      if (c.logits) m_total += c.logits->val.rows();
    Mat logits(m_total, enc.vocab_size);
    std::vector<int> targets;
    targets.reserve(static_cast<std::size_t>(m_total));
    Eigen::Index row = 0;
    for (const auto& c : ctx) {
      if (!c.logits) continue;
      logits.middleRows(row, c.logits->val.rows()) = c.logits->val;
      targets.insert(targets.end(), c.targets.begin(), c.targets.end());
      row += c.logits->val.rows();
    }
    const MtpGrad mtp = mtp_loss_grad(logits, targets, cfg_.conventional_ce);

    StepGradients out(model_.params);
    out.report = total_loss(sdm.parts, mtp.loss, cfg_.beta);
    out.masked_noise = masked_noise;
    out.masked_informative = masked_informative;
    out.plans = std::move(plans);
    if (!std::isfinite(out.report.total)) {
      diagnostic_ = json{{"step", global_step},
                         {"l_i2t", out.report.l_i2t},
                         {"l_t2i", out.report.l_t2i},
                         {"l_mtp", out.report.l_mtp},
                         {"batch", b}};
      fail(ErrorKind::Numeric, "non-finite loss at step " +
                                   std::to_string(global_step));
    }

    // (6) backward per sample in batch order, reduced in batch order
    row = 0;
    for (int s = 0; s < b; ++s) {
      SampleCtx& c = ctx[static_cast<std::size_t>(s)];
      ag::seed(c.img_cls, sdm.d_image.row(s));
      ag::seed(c.txt_eos, sdm.d_text.row(s));
      if (c.logits) {
        ag::seed(c.logits,
                 (cfg_.beta * mtp.d_logits.middleRows(row, c.logits->val.rows()))
                     .eval());
        row += c.logits->val.rows();
      }
      c.tape->backward();
      c.gs->reduce_into(out.master);
      c = SampleCtx{};  // free this sample's tape before the next backward
    }
    return out;
  }

 private:
  const RowVec* lookup_score(int identity, std::int64_t global_step) const {
    if (cfg_.score_every <= 1) return nullptr;
    if (global_step % cfg_.score_every == 0) return nullptr;
    auto it = score_cache_.find(identity);
    return it == score_cache_.end() ? nullptr : &it->second;
  }

  Model& model_;
  TrainConfig cfg_;
  AdamState adam_;
  std::map<int, RowVec> score_cache_;
  json diagnostic_;
};

// Independent reference implementation of the plain contrastive step: no
// probe, no masks, no decoder. Used to pin that the full pipeline with all
// masking disabled degenerates to exactly this update.
class BaselineTrainer {
 public:
  BaselineTrainer(Model& model, const TrainConfig& cfg)
      : model_(model), cfg_(cfg) {
    adam_.init(model_.params);
  }

  AdamState& adam() { return adam_; }

  StepOutcome step(const std::vector<const PairRecord*>& batch,
                   std::int64_t global_step, std::int64_t warmup_steps,
                   std::int64_t total_steps) {
    const int b = static_cast<int>(batch.size());
    check(b >= 1, ErrorKind::DegenerateInput, "empty batch");
    const EncoderConfig& enc = model_.cfg.encoder;
    struct SampleCtx {
      std::unique_ptr<ag::Tape> tape;
      std::unique_ptr<GradStore> gs;
      ag::NodePtr img_cls, txt_eos;
    };
    std::vector<SampleCtx> ctx(static_cast<std::size_t>(b));
    std::vector<int> ids(static_cast<std::size_t>(b));
    Mat v_cls(b, enc.width), t_eos(b, enc.width);
    for (int s = 0; s < b; ++s) {
      const PairRecord& rec = *batch[static_cast<std::size_t>(s)];
      ids[static_cast<std::size_t>(s)] = rec.identity;
      SampleCtx& c = ctx[static_cast<std::size_t>(s)];
      c.tape = std::make_unique<ag::Tape>();
      c.gs = std::make_unique<GradStore>(model_.params);
      c.img_cls = model_.image.forward(*c.tape, rec.image, c.gs.get()).cls_embed;
      v_cls.row(s) = c.img_cls->val.row(0);
      const TokenSequence seq = TokenSequence::build(rec.tokens, enc);
      c.txt_eos = model_.text.forward(*c.tape, seq, c.gs.get()).eos_embed;
      t_eos.row(s) = c.txt_eos->val.row(0);
    }
    const SdmGrad sdm = sdm_loss_grad(v_cls, t_eos, ids, cfg_.sdm);
    StepOutcome out;
    out.report = total_loss(sdm.parts, 0.0, cfg_.beta);
    out.lr = lr_at(global_step, warmup_steps, total_steps, cfg_.lr);
    check(std::isfinite(out.report.total), ErrorKind::Numeric,
          "non-finite loss in baseline step");
    GradStore master(model_.params);
    for (int s = 0; s < b; ++s) {
      SampleCtx& c = ctx[static_cast<std::size_t>(s)];
      ag::seed(c.img_cls, sdm.d_image.row(s));
      ag::seed(c.txt_eos, sdm.d_text.row(s));
      c.tape->backward();
      c.gs->reduce_into(master);
      c = SampleCtx{};
    }
    adam_update(model_.params, master, adam_, out.lr, cfg_);
    return out;
  }

 private:
  Model& model_;
  TrainConfig cfg_;
  AdamState adam_;
};

struct FitResult {
  std::vector<json> metrics;          // one entry per step
  std::string final_checkpoint;
};

// Epoch loop: deterministic per-epoch shuffles, per-step metrics lines, one
// checkpoint per epoch. `start_epoch` > 0 resumes a run whose model and
// optimizer state were already restored by the caller.
inline FitResult fit(Model& model, Trainer& trainer, const Corpus& corpus,
                     const TrainConfig& cfg, const std::string& out_dir,
                     int start_epoch = 0, std::ostream* metrics_log = nullptr,
                     std::ostream* audit_log = nullptr) {
  cfg.validate();
  const int n = static_cast<int>(corpus.train.size());
  check(n >= 1, ErrorKind::DegenerateInput, "empty training split");
  check(start_epoch >= 0 && start_epoch <= cfg.epochs, ErrorKind::Contract,
        "resume epoch outside the configured range");
  const std::int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;
  const std::int64_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;

  namespace fs = std::filesystem;
  FitResult result;
  std::int64_t global_step = steps_per_epoch * start_epoch;
  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng shuffle_rng = derive_stream(cfg.seed, Stream::Shuffle,
                                    {static_cast<std::uint64_t>(epoch)});
    shuffle_rng.shuffle(order);
    for (int begin = 0; begin < n; begin += cfg.batch_size) {
      const int end = std::min(n, begin + cfg.batch_size);
      std::vector<const PairRecord*> batch;
      batch.reserve(static_cast<std::size_t>(end - begin));
      for (int i = begin; i < end; ++i)
        batch.push_back(&corpus.train[static_cast<std::size_t>(
            order[static_cast<std::size_t>(i)])]);
      MaskAudit audit;
      const StepOutcome o = trainer.step(batch, global_step, warmup_steps,
                                         total_steps,
                                         audit_log ? &audit : nullptr);
      json line{{"step", global_step},
                {"epoch", epoch + 1},
                {"lr", o.lr},
                {"l_i2t", o.report.l_i2t},
                {"l_t2i", o.report.l_t2i},
                {"l_sdm", o.report.l_sdm},
                {"l_mtp", o.report.l_mtp},
                {"beta", o.report.beta},
                {"total", o.report.total},
                {"masked_noise", o.masked_noise},
                {"masked_informative", o.masked_informative}};
      if (metrics_log) *metrics_log << line.dump() << "\n" << std::flush;
      if (audit_log)
        for (const auto& row : audit.rows) *audit_log << row.dump() << "\n";
      result.metrics.push_back(std::move(line));
      ++global_step;
    }
    TrainProgress prog;
    prog.step = global_step;
    prog.epoch = epoch + 1;
    prog.seed = cfg.seed;
    const std::string ckpt =
        (fs::path(out_dir) / "checkpoints" /
         ("epoch-" + std::to_string(epoch + 1)))
            .string();
    save_checkpoint(ckpt, model, prog, &trainer.adam());
    result.final_checkpoint = ckpt;
  }
  return result;
}

}  // namespace gadms
