//! Two-stage training (segmentation pretraining, then joint finetuning),
//! checkpoint selection on validation, and evaluation in the three
//! inference modes.

mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{Checkpoint, Model, CHECKPOINT_VERSION};
pub use config::{EvalMode, LossToggles, MaskSource, ModelConfig, RunConfig, Stage};

use crate::backbone::{encode, part_logits, BackboneParams, Mode};
use crate::consensus::{
    build_hypothesis_bank, decomp_loss, forward_eval, part_classification_loss, predict_on_tape, ScorerParams,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_records, EvalRecord, MetricsReport, PredictionDump};
use crate::partprior::{direct_segment, object_conditioned_segment, segmentation_loss, ObjectPartPrior};
use crate::synthgen::{child_seed, Dataset, LabeledSample, Split};
use crate::tensor::{adam_step, AdamState, ParamSet, Tape};

impl Model {
    pub fn init(cfg: &ModelConfig, num_parts: usize, seed: u64) -> Result<Self> {
        let backbone = BackboneParams::init(&cfg.backbone, num_parts, seed)?;
        let scorer = ScorerParams::init(
            cfg.backbone.pointwise(),
            cfg.scorer_hidden,
            num_parts,
            cfg.dropout,
            seed ^ 0x5c0_4e5,
        )?;
        Ok(Self { backbone, scorer })
    }
}

/// One epoch of the training history.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_hm: f64,
    pub selected: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// The checkpoint with the best validation segmentation HM.
    pub best: Checkpoint,
    pub history: Vec<EpochStats>,
}

pub fn history_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_seg_hm,selected\n");
    for h in history {
        let _ = writeln!(s, "{},{:e},{:.6},{:.4},{}", h.epoch, h.lr, h.train_loss, h.val_hm, h.selected);
    }
    s
}

struct SampleGrads {
    loss: f64,
    backbone: ParamSet,
    scorer: Option<ParamSet>,
}

fn collect(set: &ParamSet, vars: &[crate::tensor::Var], grads: &crate::tensor::Gradients) -> ParamSet {
    set.names().zip(vars).map(|(n, &v)| (n.to_string(), grads.get(v))).collect()
}

/// Forward and backward pass of the configured objective on one sample.
fn sample_grads(
    model: &Model,
    sample: &LabeledSample,
    prior: &ObjectPartPrior,
    cfg: &RunConfig,
    seed: u64,
) -> Result<SampleGrads> {
    let losses = cfg.losses;
    let train_scorer = losses.decomp || losses.part;
    let mut tape = Tape::new();
    let bb = model.backbone.bind(&mut tape, true);
    let sc = model.scorer.bind(&mut tape, train_scorer);
    let feats = encode(&mut tape, &sample.cloud, &bb)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terms = Vec::new();
    if losses.seg || losses.decomp {
        let logits = part_logits(&mut tape, &feats, &bb)?;
        if losses.seg {
            let full = prior.full_prior();
            let allowed = if cfg.prior_in_loss { prior.parts(sample.object)? } else { &full[..] };
            terms.push(segmentation_loss(&mut tape, logits, &sample.mask, allowed, &sample.cloud.sample_id)?);
        }
        if losses.decomp {
            let seen = prior.seen_ids();
            let mut bank = build_hypothesis_bank(&mut tape, logits, &feats, &seen, prior, &sample.cloud.sample_id)?;
            if cfg.mask_source == MaskSource::Gt {
                bank.replace_mask(&mut tape, sample.object, sample.mask.clone(), &feats)?;
            }
            terms.push(decomp_loss(&mut tape, &bank, sample.object, &sc, Mode::Train, &mut rng)?);
        }
    }
    if losses.part {
        terms.push(part_classification_loss(&mut tape, &feats, &sample.mask, &sc, Mode::Train, &mut rng)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let grads = tape.backward(total)?;
    Ok(SampleGrads {
        loss: tape.value(total).item(),
        backbone: collect(&model.backbone.set, &bb.vars, &grads),
        scorer: train_scorer.then(|| collect(&model.scorer.set, &sc.vars, &grads)),
    })
}

fn sum_into(acc: &mut Option<ParamSet>, g: &ParamSet) -> Result<()> {
    match acc {
        Some(a) => a.add_scaled(g, 1.0),
        None => {
            *acc = Some(g.clone());
            Ok(())
        }
    }
}

fn scale(set: &mut ParamSet, c: f64) {
    for (_, t) in set.iter_mut() {
        for v in t.data_mut() {
            *v *= c;
        }
    }
}

/// Records for one evaluation mode; see [`infer_modes`].
pub fn infer(model: &Model, samples: &[LabeledSample], prior: &ObjectPartPrior, mode: EvalMode) -> Result<Vec<EvalRecord>> {
    Ok(infer_modes(model, samples, prior, &[mode])?.remove(&mode).unwrap_or_default())
}

/// One forward pass per sample, scored in every requested mode.
///
/// - `Dcc`: consensus over every class; the winner's conditioned mask.
/// - `DirectSeg`: unrestricted argmax. Its class is the one whose prior
///   covers the most predicted points (exact ties all reported).
/// - `Oracle`: argmax restricted to the true class's prior.
pub fn infer_modes(
    model: &Model,
    samples: &[LabeledSample],
    prior: &ObjectPartPrior,
    modes: &[EvalMode],
) -> Result<BTreeMap<EvalMode, Vec<EvalRecord>>> {
    let per_sample: Vec<Vec<EvalRecord>> = samples
        .par_iter()
        .map(|s| {
            let (mut tape, feats, logits) = forward_eval(&s.cloud, &model.backbone)?;
            let mut out = Vec::with_capacity(modes.len());
            for &mode in modes {
                let (pred, ties, mask, scores) = match mode {
                    EvalMode::Dcc => {
                        let p = predict_on_tape(&mut tape, &feats, logits, &model.scorer, prior, &s.cloud.sample_id)?;
                        (p.object, p.tie_set, p.mask, p.scores)
                    }
                    EvalMode::DirectSeg => {
                        let mask = direct_segment(tape.value(logits));
                        let cover: Vec<f64> = prior
                            .all_ids()
                            .iter()
                            .map(|&c| {
                                let parts = prior.parts(c).unwrap();
                                mask.ids().iter().filter(|p| parts.contains(p)).count() as f64
                            })
                            .collect();
                        let (best, ties) = crate::consensus::select_hypothesis(&cover);
                        (best, ties, mask, Vec::new())
                    }
                    EvalMode::Oracle => {
                        let mask = object_conditioned_segment(tape.value(logits), s.object, prior)?;
                        (s.object, vec![s.object], mask, Vec::new())
                    }
                };
                out.push(EvalRecord {
                    sample_id: s.cloud.sample_id.clone(),
                    gt_object: s.object,
                    pred_object: pred,
                    tie_set: ties,
                    gt_mask: s.mask.clone(),
                    pred_mask: mask,
                    scores,
                });
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut out: BTreeMap<EvalMode, Vec<EvalRecord>> = modes.iter().map(|&m| (m, Vec::new())).collect();
    for recs in per_sample {
        for (rec, &mode) in recs.into_iter().zip(modes) {
            out.get_mut(&mode).unwrap().push(rec);
        }
    }
    Ok(out)
}

/// Segmentation HM of `model` on `samples` in `mode`.
pub fn validation_hm(model: &Model, samples: &[LabeledSample], prior: &ObjectPartPrior, mode: EvalMode) -> Result<f64> {
    let records = infer(model, samples, prior, mode)?;
    Ok(evaluate_records(&records, prior, mode.name(), "val")?.segmentation.hm)
}

/// The training loop proper, on data already in memory. Each batch's
/// per-sample gradients are computed independently (in parallel) and summed
/// in sample order, so results do not depend on the thread count.
pub fn train_loop(
    cfg: &RunConfig,
    prior: &ObjectPartPrior,
    train: &[LabeledSample],
    val: &[LabeledSample],
    init: Model,
    dataset_fingerprint: &str,
    mut on_improve: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut model = init;
    let mut adam_b = AdamState::new(&model.backbone.set);
    let mut adam_s = AdamState::new(&model.scorer.set);
    let train_scorer = cfg.losses.decomp || cfg.losses.part;
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();
    let snapshot = |model: &Model, adam_b: &AdamState, adam_s: &AdamState, epoch, hm| Checkpoint {
        model: model.clone(),
        adam_backbone: adam_b.clone(),
        adam_scorer: adam_s.clone(),
        epoch,
        best_val_hm: hm,
        config_fingerprint: cfg.fingerprint(),
        dataset_fingerprint: dataset_fingerprint.to_string(),
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(child_seed(cfg.seed, Split::Train, usize::MAX, epoch)));
        let mut loss_sum = 0.0;
        if cfg.losses.any() {
            for batch in order.chunks(cfg.batch_size) {
                let grads: Vec<SampleGrads> = batch
                    .par_iter()
                    .map(|&i| {
                        let seed = child_seed(cfg.seed ^ 0xd0_u64, Split::Train, epoch, i);
                        sample_grads(&model, &train[i], prior, cfg, seed)
                    })
                    .collect::<Result<_>>()?;
                let mut gb = None;
                let mut gs = None;
                for g in &grads {
                    loss_sum += g.loss;
                    sum_into(&mut gb, &g.backbone)?;
                    if let Some(s) = &g.scorer {
                        sum_into(&mut gs, s)?;
                    }
                }
                let inv = 1.0 / batch.len() as f64;
                let mut gb = gb.expect("non-empty batch");
                scale(&mut gb, inv);
                adam_step(&mut model.backbone.set, &gb, &mut adam_b, lr)?;
                if train_scorer {
                    let mut gs = gs.expect("scorer gradients");
                    scale(&mut gs, inv);
                    adam_step(&mut model.scorer.set, &gs, &mut adam_s, lr)?;
                }
            }
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let val_hm = if val.is_empty() {
            -train_loss
        } else {
            validation_hm(&model, val, prior, cfg.eval_mode)?
        };
        let selected = best.as_ref().is_none_or(|b| val_hm > b.best_val_hm);
        if selected {
            let ck = snapshot(&model, &adam_b, &adam_s, epoch, val_hm);
            on_improve(&ck)?;
            best = Some(ck);
        }
        log::info!(
            "epoch {epoch:>3} lr {lr:.0e} loss {train_loss:.4} val seg HM {val_hm:.2}{}",
            if selected { " *" } else { "" }
        );
        history.push(EpochStats {
            epoch,
            lr,
            train_loss,
            val_hm,
            selected,
        });
    }
    let best = match best {
        Some(b) => b,
        None => snapshot(&model, &adam_b, &adam_s, 0, f64::NAN),
    };
    Ok(TrainOutcome { best, history })
}

/// Writes `config.resolved.toml` into the output directory. An existing
/// copy from a different configuration is never overwritten.
fn record_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output).map_err(|e| Error::io(&cfg.output, e))?;
    let path = cfg.output.join("config.resolved.toml");
    let text = cfg.to_toml();
    if let Ok(existing) = fs::read_to_string(&path) {
        if existing != text {
            return Err(Error::Config(format!(
                "{} holds a different run's config; use a fresh output directory",
                path.display()
            )));
        }
        return Ok(());
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn load_compatible(cfg: &RunConfig, dataset: &Dataset) -> Result<Checkpoint> {
    let path = cfg.checkpoint.as_ref().ok_or_else(|| Error::Config("no checkpoint given".into()))?;
    let ck = Checkpoint::load(path)?;
    if ck.dataset_fingerprint != dataset.fingerprint() {
        return Err(Error::Compatibility(format!(
            "{} was trained on dataset {} but {} is {}",
            path.display(),
            ck.dataset_fingerprint,
            dataset.root.display(),
            dataset.fingerprint()
        )));
    }
    if ck.model.backbone.num_parts != dataset.vocab.len() {
        return Err(Error::Compatibility("vocabulary size differs".into()));
    }
    Ok(ck)
}

/// Runs a training stage from its config, writing `best.ckpt`,
/// `history.csv` and the resolved config into `cfg.output`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = Dataset::open(&cfg.dataset)?;
    let init = match cfg.stage {
        Stage::Pretrain => Model::init(&cfg.model, dataset.vocab.len(), cfg.seed)?,
        Stage::Dcc => load_compatible(cfg, &dataset)?.model,
        Stage::Eval => return Err(Error::Config("`train` needs a pretrain or dcc stage".into())),
    };
    record_config(cfg)?;
    let train_split = dataset.load_split(Split::Train)?;
    let val = dataset.load_split(Split::Val)?;
    let best_path = cfg.output.join("best.ckpt");
    let outcome = train_loop(cfg, &dataset.prior, &train_split, &val, init, dataset.fingerprint(), |ck| {
        ck.save(&best_path)
    })?;
    let hist = cfg.output.join("history.csv");
    fs::write(&hist, history_csv(&outcome.history)).map_err(|e| Error::io(&hist, e))?;
    Ok(outcome)
}

/// Segmentation pretraining: the masked segmentation loss only; the scorer
/// is never updated.
pub fn train_pretrain(cfg: &RunConfig) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Pretrain {
        return Err(Error::Config("train_pretrain needs stage = \"pretrain\"".into()));
    }
    train(cfg)
}

/// Joint finetuning from a pretrained checkpoint.
pub fn train_dcc(cfg: &RunConfig) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Dcc {
        return Err(Error::Config("train_dcc needs stage = \"dcc\"".into()));
    }
    train(cfg)
}

/// Evaluates the checkpoint in `cfg.eval_mode` on `cfg.eval_split` and
/// writes the dump and the report in every format.
pub fn evaluate(cfg: &RunConfig) -> Result<(MetricsReport, PredictionDump)> {
    cfg.validate()?;
    let dataset = Dataset::open(&cfg.dataset)?;
    let ck = load_compatible(cfg, &dataset)?;
    record_config(cfg)?;
    let samples = dataset.load_split(cfg.eval_split)?;
    let records = infer(&ck.model, &samples, &dataset.prior, cfg.eval_mode)?;
    let dump = PredictionDump::new(cfg.eval_mode.name(), cfg.eval_split.name(), &dataset.prior, records);
    let report = dump.report()?;
    let stem = format!("{}_{}", cfg.eval_mode.name(), cfg.eval_split.name());
    dump.save(&cfg.output.join(format!("{stem}.dump.json")))?;
    write_report(&report, &cfg.output, &stem)?;
    Ok((report, dump))
}

pub fn write_report(report: &MetricsReport, dir: &Path, stem: &str) -> Result<()> {
    for (ext, text) in [
        ("txt", report.to_table()),
        ("csv", report.to_csv()),
        ("json", report.to_json()),
        ("svg", report.to_svg()),
    ] {
        let p = dir.join(format!("{stem}.{ext}"));
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
