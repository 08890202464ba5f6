//! Segmentation IoU, tie-aware classification accuracy, and their seen /
//! unseen harmonic means.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partprior::{ObjectPartPrior, SegmentationMask};

/// Outcome of evaluating one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub gt_object: usize,
    pub pred_object: usize,
    pub tie_set: Vec<usize>,
    pub gt_mask: SegmentationMask,
    pub pred_mask: SegmentationMask,
    /// Consensus score per class, when the mode produces them.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<f64>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.gt_mask.len() != self.pred_mask.len() {
            return Err(Error::Contract(format!("masks of `{}` differ in length", self.sample_id)));
        }
        if !self.tie_set.contains(&self.pred_object) {
            return Err(Error::Contract(format!(
                "prediction of `{}` is not in its tie set",
                self.sample_id
            )));
        }
        Ok(())
    }

    /// Correct when the ground truth is among the top-scoring classes.
    pub fn correct(&self) -> bool {
        self.tie_set.contains(&self.gt_object)
    }
}

/// Intersection and union counts per part, accumulated over every sample
/// of a class; IoU is averaged over prior parts with a non-empty union.
pub fn class_iou(records: &[&EvalRecord], prior_parts: &[usize], class_name: &str) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::MissingClass(class_name.to_string()));
    }
    let mut inter = vec![0usize; prior_parts.len()];
    let mut union = vec![0usize; prior_parts.len()];
    for r in records {
        for (&g, &p) in r.gt_mask.ids().iter().zip(r.pred_mask.ids()) {
            for (k, &part) in prior_parts.iter().enumerate() {
                let (a, b) = (g == part, p == part);
                inter[k] += (a && b) as usize;
                union[k] += (a || b) as usize;
            }
        }
    }
    let ious: Vec<f64> = inter
        .iter()
        .zip(&union)
        .filter(|(_, &u)| u > 0)
        .map(|(&i, &u)| i as f64 / u as f64)
        .collect();
    if ious.is_empty() {
        return Ok(0.0);
    }
    Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Seen mean, unseen mean and their harmonic mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seen: f64,
    pub unseen: f64,
    pub hm: f64,
}

pub fn aggregate(values: &[(f64, bool)]) -> Result<Aggregate> {
    let mean = |want: bool| {
        let v: Vec<f64> = values.iter().filter(|x| x.1 == want).map(|x| x.0).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let seen = mean(true).ok_or_else(|| Error::Aggregation("no seen class".into()))?;
    let unseen = mean(false).ok_or_else(|| Error::Aggregation("no unseen class".into()))?;
    Ok(Aggregate {
        seen,
        unseen,
        hm: harmonic_mean(seen, unseen),
    })
}

/// Percentage of records whose ground truth is in the tie set.
pub fn accuracy(records: &[&EvalRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    100.0 * records.iter().filter(|r| r.correct()).count() as f64 / records.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub seen: bool,
    pub samples: usize,
    pub iou: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub split: String,
    pub classes: Vec<ClassMetrics>,
    pub segmentation: Aggregate,
    pub classification: Aggregate,
}

/// Per-class metrics over every class that has records, then the seen /
/// unseen aggregates.
pub fn evaluate_records(
    records: &[EvalRecord],
    prior: &ObjectPartPrior,
    mode: &str,
    split: &str,
) -> Result<MetricsReport> {
    for r in records {
        r.validate()?;
    }
    let mut by_class: BTreeMap<usize, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        by_class.entry(r.gt_object).or_default().push(r);
    }
    let classes: Vec<ClassMetrics> = by_class
        .par_iter()
        .map(|(&c, recs)| {
            let class = prior.class(c)?;
            Ok(ClassMetrics {
                name: class.name.clone(),
                seen: class.seen,
                samples: recs.len(),
                iou: class_iou(recs, &class.parts, &class.name)?,
                accuracy: accuracy(recs),
            })
        })
        .collect::<Result<_>>()?;
    let seg: Vec<(f64, bool)> = classes.iter().map(|c| (c.iou, c.seen)).collect();
    let cls: Vec<(f64, bool)> = classes.iter().map(|c| (c.accuracy, c.seen)).collect();
    Ok(MetricsReport {
        mode: mode.to_string(),
        split: split.to_string(),
        segmentation: aggregate(&seg)?,
        classification: aggregate(&cls)?,
        classes,
    })
}

impl MetricsReport {
    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {}  split: {}", self.mode, self.split);
        let _ = writeln!(s, "{:<12} {:<7} {:>7} {:>8} {:>8}", "class", "split", "samples", "mIoU", "acc");
        for c in &self.classes {
            let _ = writeln!(
                s,
                "{:<12} {:<7} {:>7} {:>8.2} {:>8.2}",
                c.name,
                if c.seen { "seen" } else { "unseen" },
                c.samples,
                c.iou,
                c.accuracy
            );
        }
        let _ = writeln!(s, "{:<20} {:>8} {:>8} {:>8}", "", "HM", "S", "U");
        for (name, a) in [("segmentation", self.segmentation), ("classification", self.classification)] {
            let _ = writeln!(s, "{:<20} {:>8.2} {:>8.2} {:>8.2}", name, a.hm, a.seen, a.unseen);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,seen,samples,miou,accuracy\n");
        for c in &self.classes {
            let _ = writeln!(s, "{},{},{},{:.4},{:.4}", c.name, c.seen, c.samples, c.iou, c.accuracy);
        }
        for (name, a) in [("segmentation", self.segmentation), ("classification", self.classification)] {
            let _ = writeln!(s, "{name}_hm,,,{:.4},", a.hm);
            let _ = writeln!(s, "{name}_seen,,,{:.4},", a.seen);
            let _ = writeln!(s, "{name}_unseen,,,{:.4},", a.unseen);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Bar chart of unseen-class mIoU as a standalone SVG.
    pub fn to_svg(&self) -> String {
        let bars: Vec<&ClassMetrics> = self.classes.iter().filter(|c| !c.seen).collect();
        let (w, h, pad, bar) = (120.0 + 90.0 * bars.len() as f64, 320.0, 50.0, 50.0);
        let plot = h - 2.0 * pad;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">unseen class mIoU ({}, {})</text>"#,
            w / 2.0,
            self.mode,
            self.split
        );
        for tick in [0, 25, 50, 75, 100] {
            let y = h - pad - plot * tick as f64 / 100.0;
            let _ = writeln!(
                s,
                r##"<line x1="{pad}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{tick}</text>"##,
                w - pad / 2.0,
                pad - 6.0,
                y + 3.0
            );
        }
        for (i, c) in bars.iter().enumerate() {
            let x = pad + 20.0 + 90.0 * i as f64;
            let bh = plot * c.iou.clamp(0.0, 100.0) / 100.0;
            let _ = writeln!(
                s,
                r##"<rect x="{x}" y="{}" width="{bar}" height="{bh}" fill="#4a7ab5"/>"##,
                h - pad - bh
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{:.1}</text>"#,
                x + bar / 2.0,
                h - pad - bh - 4.0,
                c.iou
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
                x + bar / 2.0,
                h - pad + 16.0,
                c.name
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Self-contained prediction dump: the priors needed to score it travel
/// with the records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionDump {
    pub mode: String,
    pub split: String,
    pub classes: Vec<DumpClass>,
    pub records: Vec<EvalRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpClass {
    pub name: String,
    pub seen: bool,
    pub parts: Vec<usize>,
}

impl PredictionDump {
    pub fn new(mode: &str, split: &str, prior: &ObjectPartPrior, records: Vec<EvalRecord>) -> Self {
        Self {
            mode: mode.to_string(),
            split: split.to_string(),
            classes: prior
                .classes()
                .iter()
                .map(|c| DumpClass {
                    name: c.name.clone(),
                    seen: c.seen,
                    parts: c.parts.clone(),
                })
                .collect(),
            records,
        }
    }

    pub fn prior(&self) -> Result<ObjectPartPrior> {
        let num_parts = self.classes.iter().flat_map(|c| c.parts.iter()).max().map_or(0, |m| m + 1);
        ObjectPartPrior::new(
            self.classes
                .iter()
                .map(|c| crate::partprior::ObjectClass {
                    name: c.name.clone(),
                    parts: c.parts.clone(),
                    seen: c.seen,
                })
                .collect(),
            num_parts,
            true,
        )
    }

    pub fn report(&self) -> Result<MetricsReport> {
        evaluate_records(&self.records, &self.prior()?, &self.mode, &self.split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("dump serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partprior::ObjectClass;
    use proptest::prelude::*;

    fn rec(gt: usize, pred: usize, ties: Vec<usize>, g: Vec<usize>, p: Vec<usize>) -> EvalRecord {
        EvalRecord {
            sample_id: "s".into(),
            gt_object: gt,
            pred_object: pred,
            tie_set: ties,
            gt_mask: SegmentationMask(g),
            pred_mask: SegmentationMask(p),
            scores: vec![],
        }
    }

    #[test]
    fn iou_cases() {
        let same = rec(0, 0, vec![0], vec![0, 1, 1, 0], vec![0, 1, 1, 0]);
        assert_eq!(class_iou(&[&same], &[0, 1], "a").unwrap(), 100.0);
        let disjoint = rec(0, 0, vec![0], vec![0, 0, 1, 1], vec![1, 1, 0, 0]);
        assert_eq!(class_iou(&[&disjoint], &[0, 1], "a").unwrap(), 0.0);
        let r = rec(0, 0, vec![0], vec![0, 0, 1, 1], vec![0, 1, 1, 1]);
        let v = class_iou(&[&r], &[0, 1], "a").unwrap();
        let oracle = (1.0 / 2.0 + 2.0 / 3.0) / 2.0 * 100.0;
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 58.33).abs() < 0.005);
        assert!(matches!(class_iou(&[], &[0], "a"), Err(Error::MissingClass(_))));
    }

    #[test]
    fn zero_union_parts_excluded() {
        // Part 2 is in the prior but absent everywhere.
        let r = rec(0, 0, vec![0], vec![0, 1], vec![0, 1]);
        assert_eq!(class_iou(&[&r], &[0, 1, 2], "a").unwrap(), 100.0);
    }

    #[test]
    fn iou_accumulates_over_samples() {
        let a = rec(0, 0, vec![0], vec![0, 0], vec![0, 0]);
        let b = rec(0, 0, vec![0], vec![0, 0], vec![1, 1]);
        // part 0: I = 2, U = 4; part 1: I = 0, U = 2.
        let v = class_iou(&[&a, &b], &[0, 1], "a").unwrap();
        assert!((v - 25.0).abs() < 1e-12);
    }

    #[test]
    fn hm_regressions() {
        let a = aggregate(&[(38.0, true), (32.7, false)]).unwrap();
        assert!((a.hm - 35.2).abs() <= 0.05, "{}", a.hm);
        let b = aggregate(&[(73.2, true), (45.2, false)]).unwrap();
        assert!((b.hm - 55.9).abs() <= 0.05, "{}", b.hm);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert!(matches!(aggregate(&[(1.0, true)]), Err(Error::Aggregation(_))));
    }

    #[test]
    fn tie_aware_accuracy() {
        let r = [
            rec(1, 0, vec![0, 1], vec![0], vec![0]),
            rec(1, 0, vec![0], vec![0], vec![0]),
            rec(1, 1, vec![1], vec![0], vec![0]),
        ];
        let refs: Vec<&EvalRecord> = r.iter().collect();
        let acc = accuracy(&refs);
        assert!((acc - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_formats() {
        let prior = ObjectPartPrior::new(
            vec![
                ObjectClass { name: "a".into(), parts: vec![0, 1], seen: true },
                ObjectClass { name: "b".into(), parts: vec![1], seen: false },
            ],
            2,
            false,
        )
        .unwrap();
        let recs = vec![
            rec(0, 0, vec![0], vec![0, 1], vec![0, 1]),
            rec(1, 0, vec![0], vec![1, 1], vec![0, 1]),
        ];
        let report = evaluate_records(&recs, &prior, "dcc", "test").unwrap();
        assert_eq!(report.segmentation.seen, 100.0);
        assert_eq!(report.segmentation.unseen, 50.0);
        assert_eq!(report.classification.unseen, 0.0);
        assert_eq!(report.classification.hm, 0.0);
        assert!(report.to_table().contains("unseen"));
        assert_eq!(report.to_csv().lines().count(), 1 + 2 + 6);
        let back: MetricsReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
        assert!(report.to_svg().starts_with("<svg") && report.to_svg().contains(">b<"));

        let dump = PredictionDump::new("dcc", "test", &prior, recs);
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("dump.json");
        dump.save(&p).unwrap();
        assert_eq!(PredictionDump::load(&p).unwrap().report().unwrap(), report);
    }

    #[test]
    fn prediction_outside_tie_set_rejected() {
        let r = rec(0, 1, vec![0], vec![0], vec![0]);
        assert!(r.validate().is_err());
    }

    proptest! {
        #[test]
        fn hm_properties(s in 0.0f64..100.0, u in 0.0f64..100.0) {
            let h = harmonic_mean(s, u);
            prop_assert!((h - harmonic_mean(u, s)).abs() < 1e-12);
            prop_assert!(h <= s.max(u) + 1e-12);
            prop_assert!((harmonic_mean(s, s) - s).abs() < 1e-9);
            prop_assert!(h >= 0.0 && h <= 100.0);
        }

        #[test]
        fn iou_permutation_invariant(
            pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let (g, p): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let base = rec(0, 0, vec![0], g.clone(), p.clone());
            let mut perm: Vec<usize> = (0..g.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled = rec(
                0, 0, vec![0],
                perm.iter().map(|&i| g[i]).collect(),
                perm.iter().map(|&i| p[i]).collect(),
            );
            let a = class_iou(&[&base], &[0, 1, 2], "a").unwrap();
            let b = class_iou(&[&shuffled], &[0, 1, 2], "a").unwrap();
            prop_assert_eq!(a, b);
            let self_iou = class_iou(&[&rec(0, 0, vec![0], g.clone(), g)], &[0, 1, 2], "a").unwrap();
            prop_assert_eq!(self_iou, 100.0);
        }
    }
}
