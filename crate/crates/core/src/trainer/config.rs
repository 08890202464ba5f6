use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneDims;
use crate::consensus::{DEFAULT_DROPOUT, DEFAULT_SCORER_HIDDEN};
use crate::error::{Error, Result};
use crate::synthgen::Split;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Dcc,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    /// Every hypothesis, the true class's included, comes from the model.
    Predicted,
    /// The true class's hypothesis uses the ground-truth mask.
    Gt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Consensus inference over every class.
    Dcc,
    /// Unrestricted argmax over the whole vocabulary.
    DirectSeg,
    /// Argmax restricted to the true class's prior.
    Oracle,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Dcc, EvalMode::DirectSeg, EvalMode::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Dcc => "dcc",
            EvalMode::DirectSeg => "direct_seg",
            EvalMode::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dcc" => Ok(EvalMode::Dcc),
            "direct_seg" | "direct-seg" => Ok(EvalMode::DirectSeg),
            "oracle" | "object_prior_oracle" => Ok(EvalMode::Oracle),
            _ => Err(Error::Config(format!("unknown evaluation mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub seg: bool,
    pub decomp: bool,
    pub part: bool,
}

impl LossToggles {
    pub fn any(&self) -> bool {
        self.seg || self.decomp || self.part
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneDims,
    pub scorer_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneDims::default(),
            scorer_hidden: DEFAULT_SCORER_HIDDEN,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

fn yes() -> bool {
    true
}

/// One run of one stage. Paths are resolved relative to the working
/// directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stage: Stage,
    pub dataset: PathBuf,
    /// Directory receiving the checkpoint, history, reports and the resolved
    /// config copy.
    pub output: PathBuf,
    /// Starting weights: the pretrained model for `dcc`, the model under test
    /// for `eval`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub losses: LossToggles,
    pub mask_source: MaskSource,
    /// Restrict the segmentation loss to the true class's prior. Off trains
    /// the unrestricted baseline.
    #[serde(default = "yes")]
    pub prior_in_loss: bool,
    pub lr_high: f64,
    pub lr_low: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub eval_mode: EvalMode,
    pub eval_split: Split,
    #[serde(default)]
    pub model: ModelConfig,
}

impl RunConfig {
    /// Segmentation pretraining with the prior-restricted loss.
    pub fn pretrain(dataset: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        Self {
            stage: Stage::Pretrain,
            dataset: dataset.into(),
            output: output.into(),
            checkpoint: None,
            losses: LossToggles {
                seg: true,
                decomp: false,
                part: false,
            },
            mask_source: MaskSource::Predicted,
            prior_in_loss: true,
            lr_high: 1e-3,
            lr_low: 1e-5,
            batch_size: 8,
            epochs: 60,
            seed: 0,
            eval_mode: EvalMode::Oracle,
            eval_split: Split::Val,
            model: ModelConfig::default(),
        }
    }

    /// Joint finetuning, the configuration of ablation row d.
    pub fn dcc(dataset: impl Into<PathBuf>, output: impl Into<PathBuf>, checkpoint: impl Into<PathBuf>) -> Self {
        Self {
            stage: Stage::Dcc,
            checkpoint: Some(checkpoint.into()),
            losses: LossToggles {
                seg: true,
                decomp: true,
                part: true,
            },
            epochs: 40,
            eval_mode: EvalMode::Dcc,
            ..Self::pretrain(dataset, output)
        }
    }

    /// Finetuning presets for the four ablation rows: a) decomposition loss
    /// only, b) part loss only, c) both with the true hypothesis taken from
    /// the ground truth, d) both on predicted masks only. The segmentation
    /// loss is on in every row.
    pub fn ablation(mut self, row: char) -> Result<Self> {
        let (decomp, part, source) = match row {
            'a' => (true, false, MaskSource::Predicted),
            'b' => (false, true, MaskSource::Predicted),
            'c' => (true, true, MaskSource::Gt),
            'd' => (true, true, MaskSource::Predicted),
            _ => return Err(Error::Config(format!("no ablation row `{row}`"))),
        };
        self.losses = LossToggles {
            seg: true,
            decomp,
            part,
        };
        self.mask_source = source;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_low > 0.0 && self.lr_high >= self.lr_low && self.lr_high.is_finite()) {
            return bad(format!("need lr_high ≥ lr_low > 0, got {} / {}", self.lr_high, self.lr_low));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.stage == Stage::Pretrain && (self.losses.decomp || self.losses.part) {
            return bad("pretraining only uses the segmentation loss".into());
        }
        if self.stage != Stage::Pretrain && self.checkpoint.is_none() {
            return bad(format!("{:?} needs a checkpoint", self.stage));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            return bad(format!("dropout {}", self.model.dropout));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of every setting that shapes the trained weights. Paths are left
    /// out so identical runs in different directories agree.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.dataset = PathBuf::new();
        c.output = PathBuf::new();
        c.checkpoint = None;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Learning rate for `epoch`: `lr_high`, dropping by the same factor at
    /// 50% and at 90% of the epochs to end at `lr_low`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let step = (self.lr_low / self.lr_high).sqrt();
        let drops = [self.epochs / 2, self.epochs * 9 / 10];
        let passed = drops.iter().filter(|&&d| epoch >= d && d > 0).count();
        self.lr_high * step.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_two_drops() {
        let c = RunConfig::pretrain("d", "o");
        assert_eq!(c.learning_rate(0), 1e-3);
        assert_eq!(c.learning_rate(29), 1e-3);
        assert!((c.learning_rate(30) - 1e-4).abs() < 1e-18);
        assert!((c.learning_rate(53) - 1e-4).abs() < 1e-18);
        assert!((c.learning_rate(54) - 1e-5).abs() < 1e-18);
        assert!((c.learning_rate(59) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let c = RunConfig::dcc("data", "out", "pre/best.ckpt");
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let mut bad = c.clone();
        bad.lr_low = 2e-3;
        assert!(bad.validate().is_err());
        let mut bad = c.clone();
        bad.checkpoint = None;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fingerprint_ignores_paths() {
        let a = RunConfig::dcc("x", "y", "z");
        let b = RunConfig::dcc("p", "q", "r");
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.seed = 9;
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn ablation_rows() {
        let base = RunConfig::dcc("d", "o", "c");
        let a = base.clone().ablation('a').unwrap();
        assert!(a.losses.seg && a.losses.decomp && !a.losses.part);
        let b = base.clone().ablation('b').unwrap();
        assert!(b.losses.seg && !b.losses.decomp && b.losses.part);
        let c = base.clone().ablation('c').unwrap();
        assert_eq!(c.mask_source, MaskSource::Gt);
        let d = base.clone().ablation('d').unwrap();
        assert_eq!(d, base);
        assert!(base.ablation('e').is_err());
    }
}
