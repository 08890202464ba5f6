//! Procedural compositional shape benchmark.
//!
//! Parts are parameterized surface primitives; object classes are
//! arrangements of parts. Unseen classes reuse only parts that appear in
//! some seen class, so they can be segmented by composition.

mod dataset;
mod default;
pub mod geometry;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{child_seed, decode_record, encode_record, generate_benchmark, Dataset, DatasetSummary, Split};
pub use geometry::{sample_surface, Primitive, Transform};

use crate::backbone::PointCloud;
use crate::error::{Error, Result};
use crate::partprior::{ObjectClass, ObjectPartPrior, PartVocabulary, SegmentationMask};

pub const GENERATOR_VERSION: u32 = 1;
/// Bounded retries when every optional part of a draw is dropped.
const MAX_RESAMPLES: usize = 16;
/// Smallest budget per part placement.
pub const MIN_POINTS_PER_PART: usize = 16;

/// Shape family and parameter range for one part label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartTemplate {
    pub part: String,
    pub low: Primitive,
    pub high: Primitive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptionalPart {
    /// Placements in one group appear or vanish together.
    pub group: String,
    pub probability: f64,
}

/// One part instance inside an object template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    #[serde(flatten)]
    pub template: PartTemplate,
    #[serde(default)]
    pub transform: Transform,
    /// Share of the cloud's points, before renormalization.
    pub fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optional: Option<OptionalPart>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectTemplate {
    pub name: String,
    pub seen: bool,
    #[serde(rename = "placement")]
    pub placements: Vec<Placement>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    /// Per seen class.
    pub train: usize,
    /// Per class, seen and unseen.
    pub val: usize,
    pub test: usize,
}

/// Everything needed to regenerate a dataset byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub version: u32,
    pub seed: u64,
    pub points_per_cloud: usize,
    /// Standard deviation of per-point Gaussian noise, canonical units.
    pub jitter: f64,
    /// Per-axis object stretch is drawn from [1 - stretch, 1 + stretch].
    pub stretch: f64,
    pub parts: Vec<String>,
    pub splits: SplitSizes,
    #[serde(rename = "object")]
    pub objects: Vec<ObjectTemplate>,
}

/// One generated example.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub cloud: PointCloud,
    pub mask: SegmentationMask,
    pub object: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    /// Every part co-occurs in one seen class.
    Easy,
    /// Parts come from several seen classes.
    Medium,
    /// Some part appears at a relative scale no seen class shows.
    Hard,
}

/// A manifest that passed validation, with ids resolved.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub manifest: BenchmarkManifest,
    pub vocab: PartVocabulary,
    pub prior: ObjectPartPrior,
    part_ids: Vec<Vec<usize>>,
}

impl BenchmarkManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ManifestValidation(format!("manifest: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Checks every manifest invariant and builds the vocabulary and priors.
    pub fn resolve(&self) -> Result<Benchmark> {
        let bad = |m: String| Error::ManifestValidation(m);
        if self.version != GENERATOR_VERSION {
            return Err(bad(format!("generator version {} (expected {GENERATOR_VERSION})", self.version)));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) || !(0.0..1.0).contains(&self.stretch) {
            return Err(bad(format!("jitter {} / stretch {}", self.jitter, self.stretch)));
        }
        if self.splits.train == 0 {
            return Err(bad("train split is empty".into()));
        }
        let vocab = PartVocabulary::new(self.parts.clone()).map_err(|e| bad(e.to_string()))?;
        let mut classes = Vec::new();
        let mut part_ids = Vec::new();
        for obj in &self.objects {
            if obj.placements.is_empty() {
                return Err(bad(format!("class `{}` has no placements", obj.name)));
            }
            let need = MIN_POINTS_PER_PART * obj.placements.len();
            if self.points_per_cloud < need {
                return Err(bad(format!(
                    "class `{}` needs at least {need} points, manifest has {}",
                    obj.name, self.points_per_cloud
                )));
            }
            let mut groups: BTreeMap<&str, f64> = BTreeMap::new();
            let mut ids = Vec::new();
            for p in &obj.placements {
                let id = vocab
                    .id(&p.template.part)
                    .map_err(|_| bad(format!("class `{}` uses unknown part `{}`", obj.name, p.template.part)))?;
                ids.push(id);
                Primitive::midpoint(&p.template.low, &p.template.high).map_err(|e| bad(e.to_string()))?;
                p.transform.validate().map_err(|e| bad(e.to_string()))?;
                if !(p.fraction > 0.0 && p.fraction.is_finite()) {
                    return Err(bad(format!("class `{}` has fraction {}", obj.name, p.fraction)));
                }
                if let Some(opt) = &p.optional {
                    if !(opt.probability > 0.0 && opt.probability < 1.0) {
                        return Err(bad(format!(
                            "optional group `{}` of `{}` needs probability in (0, 1)",
                            opt.group, obj.name
                        )));
                    }
                    if let Some(prev) = groups.insert(&opt.group, opt.probability) {
                        if prev != opt.probability {
                            return Err(bad(format!("optional group `{}` has mixed probabilities", opt.group)));
                        }
                    }
                }
            }
            classes.push(ObjectClass {
                name: obj.name.clone(),
                parts: ids.clone(),
                seen: obj.seen,
            });
            part_ids.push(ids);
        }
        if !classes.iter().any(|c| c.seen) {
            return Err(bad("no seen class".into()));
        }
        let prior = ObjectPartPrior::new(classes, vocab.len(), false)?;
        Ok(Benchmark {
            manifest: self.clone(),
            vocab,
            prior,
            part_ids,
        })
    }
}

impl Benchmark {
    pub fn template(&self, class: usize) -> &ObjectTemplate {
        &self.manifest.objects[class]
    }

    /// Draws one sample of `class`.
    pub fn compose<R: Rng + ?Sized>(&self, class: usize, sample_id: &str, rng: &mut R) -> Result<LabeledSample> {
        let m = &self.manifest;
        compose_object(
            self.template(class),
            &self.part_ids[class],
            class,
            m.points_per_cloud,
            m.jitter,
            m.stretch,
            sample_id,
            rng,
        )
    }

    /// Relative extent (bbox diagonal of one placed instance over the object's
    /// bbox diagonal) of every part of `class` at nominal parameters. A part
    /// placed several times reports its largest instance.
    pub fn relative_scales(&self, class: usize) -> Result<BTreeMap<usize, f64>> {
        let template = self.template(class);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut instances = Vec::new();
        for (p, &id) in template.placements.iter().zip(&self.part_ids[class]) {
            let shape = Primitive::midpoint(&p.template.low, &p.template.high)?;
            instances.push((id, sample_surface(&shape, &p.transform, 256, 0.0, &mut rng)?));
        }
        let all: Vec<[f64; 3]> = instances.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        let whole = bbox_diagonal(&all);
        let mut out: BTreeMap<usize, f64> = BTreeMap::new();
        for (id, pts) in &instances {
            let s = bbox_diagonal(pts) / whole;
            let e = out.entry(*id).or_insert(s);
            *e = e.max(s);
        }
        Ok(out)
    }

    /// Difficulty of every unseen class. A part whose relative extent is
    /// more than a factor two outside the seen range makes a class hard.
    pub fn tiers(&self) -> Result<Vec<(usize, Tier)>> {
        let mut seen_range: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        for c in self.prior.seen_ids() {
            for (part, s) in self.relative_scales(c)? {
                let e = seen_range.entry(part).or_insert((s, s));
                e.0 = e.0.min(s);
                e.1 = e.1.max(s);
            }
        }
        let mut out = Vec::new();
        for c in self.prior.unseen_ids() {
            let scales = self.relative_scales(c)?;
            let hard = scales.iter().any(|(p, &s)| {
                let (lo, hi) = seen_range[p];
                s < lo / 2.0 || s > hi * 2.0
            });
            let parts: BTreeSet<usize> = self.prior.parts(c)?.iter().copied().collect();
            let easy = self.prior.seen_ids().into_iter().any(|s| {
                let sp: BTreeSet<usize> = self.prior.parts(s).unwrap().iter().copied().collect();
                parts.is_subset(&sp)
            });
            let tier = if hard {
                Tier::Hard
            } else if easy {
                Tier::Easy
            } else {
                Tier::Medium
            };
            out.push((c, tier));
        }
        Ok(out)
    }
}

fn bbox_diagonal(points: &[[f64; 3]]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for i in 0..3 {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    (0..3).map(|i| (hi[i] - lo[i]).powi(2)).sum::<f64>().sqrt()
}

/// Largest-remainder split of `total` in proportion to `weights`.
pub fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let short = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // Stable sort keeps ties in placement order.
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).expect("finite weights")
    });
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Samples one instance of `template`: optional groups are drawn, the point
/// budget is split over the present placements, every placement is sampled
/// with freshly drawn parameters, the object is stretched per axis, then
/// centred and scaled into the unit sphere.
#[allow(clippy::too_many_arguments)]
pub fn compose_object<R: Rng + ?Sized>(
    template: &ObjectTemplate,
    part_ids: &[usize],
    class: usize,
    total_points: usize,
    jitter: f64,
    stretch: f64,
    sample_id: &str,
    rng: &mut R,
) -> Result<LabeledSample> {
    if total_points < MIN_POINTS_PER_PART * template.placements.len() {
        return Err(Error::Generator(format!(
            "{total_points} points is too few for `{}`",
            template.name
        )));
    }
    let mut present = Vec::new();
    for _ in 0..MAX_RESAMPLES {
        let mut draws: BTreeMap<&str, bool> = BTreeMap::new();
        present = template
            .placements
            .iter()
            .map(|p| match &p.optional {
                None => true,
                Some(o) => *draws
                    .entry(o.group.as_str())
                    .or_insert_with(|| rng.random::<f64>() < o.probability),
            })
            .collect::<Vec<bool>>();
        if present.iter().any(|&b| b) {
            break;
        }
    }
    let chosen: Vec<usize> = (0..present.len()).filter(|&i| present[i]).collect();
    if chosen.is_empty() {
        return Err(Error::Generator(format!(
            "every part of `{}` was dropped {MAX_RESAMPLES} times",
            template.name
        )));
    }
    let weights: Vec<f64> = chosen.iter().map(|&i| template.placements[i].fraction).collect();
    let budgets = apportion(&weights, total_points);

    let mut points = Vec::with_capacity(total_points);
    let mut labels = Vec::with_capacity(total_points);
    for (&i, &n) in chosen.iter().zip(&budgets) {
        let p = &template.placements[i];
        let shape = Primitive::draw_between(&p.template.low, &p.template.high, rng)?;
        points.extend(sample_surface(&shape, &p.transform, n, jitter, rng)?);
        labels.extend(std::iter::repeat_n(part_ids[i], n));
    }
    let factors: [f64; 3] = std::array::from_fn(|_| {
        if stretch > 0.0 {
            rng.random_range(1.0 - stretch..=1.0 + stretch)
        } else {
            1.0
        }
    });
    for p in &mut points {
        for k in 0..3 {
            p[k] *= factors[k];
        }
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(rng);
    let points: Vec<[f64; 3]> = order.iter().map(|&i| points[i]).collect();
    let labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
    Ok(LabeledSample {
        cloud: PointCloud::normalized(points, sample_id)?,
        mask: SegmentationMask(labels),
        object: class,
    })
}

pub use default::default_manifest;

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    fn one_part(optional: Option<f64>) -> BenchmarkManifest {
        let disk = |r| Primitive::Disk { radius: r };
        let mut objects = vec![ObjectTemplate {
            name: "plate".into(),
            seen: true,
            placements: vec![Placement {
                template: PartTemplate {
                    part: "base".into(),
                    low: disk(0.5),
                    high: disk(0.6),
                },
                transform: Transform::default(),
                fraction: 1.0,
                optional: None,
            }],
        }];
        if let Some(p) = optional {
            let rod = Primitive::Rod { radius: 0.05, length: 0.5 };
            objects[0].placements.push(Placement {
                template: PartTemplate {
                    part: "leg".into(),
                    low: rod.clone(),
                    high: rod,
                },
                transform: Transform::at([0.0, -0.3, 0.0]),
                fraction: 0.5,
                optional: Some(OptionalPart {
                    group: "legs".into(),
                    probability: p,
                }),
            });
        }
        BenchmarkManifest {
            version: GENERATOR_VERSION,
            seed: 1,
            points_per_cloud: 64,
            jitter: 0.005,
            stretch: 0.1,
            parts: vec!["base".into(), "leg".into()],
            splits: SplitSizes { train: 2, val: 1, test: 1 },
            objects,
        }
    }

    #[test]
    fn one_part_template_gives_constant_mask() {
        let b = one_part(None).resolve().unwrap();
        let s = b.compose(0, "x", &mut rng()).unwrap();
        assert!(s.mask.ids().iter().all(|&p| p == 0));
        assert_eq!(s.cloud.len(), 64);
    }

    #[test]
    fn optional_part_frequency() {
        let b = one_part(Some(0.5)).resolve().unwrap();
        let mut r = rng();
        let lacking = (0..1000)
            .filter(|i| {
                let s = b.compose(0, &format!("{i}"), &mut r).unwrap();
                !s.mask.ids().contains(&1)
            })
            .count() as f64
            / 1000.0;
        assert!((lacking - 0.5).abs() <= 0.05, "{lacking}");
    }

    #[test]
    fn apportion_is_exact_and_proportional() {
        assert_eq!(apportion(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(apportion(&[0.25, 0.75], 512), vec![128, 384]);
        let c = apportion(&[0.3, 0.3, 0.2, 0.07, 0.13], 511);
        assert_eq!(c.iter().sum::<usize>(), 511);
    }

    #[test]
    fn too_few_points_rejected() {
        let mut m = one_part(Some(0.5));
        m.points_per_cloud = 20;
        assert!(matches!(m.resolve(), Err(Error::ManifestValidation(_))));
    }

    #[test]
    fn novel_unseen_part_rejected() {
        let mut m = one_part(None);
        m.parts.push("wing".into());
        let mut unseen = m.objects[0].clone();
        unseen.name = "glider".into();
        unseen.seen = false;
        unseen.placements[0].template.part = "wing".into();
        m.objects.push(unseen);
        let err = m.resolve().unwrap_err();
        assert!(matches!(err, Error::ManifestValidation(_)), "{err}");
    }

    #[test]
    fn manifest_round_trips_through_toml() {
        let m = default_manifest();
        let text = m.to_toml();
        assert_eq!(BenchmarkManifest::from_toml(&text).unwrap(), m);
    }

    #[test]
    fn default_benchmark_shape() {
        let b = default_manifest().resolve().unwrap();
        assert_eq!(b.prior.seen_ids().len(), 8);
        assert_eq!(b.prior.unseen_ids().len(), 4);
        assert_eq!(b.vocab.len(), 14);
        assert_eq!(b.manifest.points_per_cloud, 512);
        assert_eq!(b.manifest.splits, SplitSizes { train: 200, val: 40, test: 40 });
    }

    #[test]
    fn default_benchmark_has_every_tier() {
        let b = default_manifest().resolve().unwrap();
        let tiers: BTreeMap<String, Tier> = b
            .tiers()
            .unwrap()
            .into_iter()
            .map(|(c, t)| (b.prior.class(c).unwrap().name.clone(), t))
            .collect();
        assert_eq!(tiers["cup"], Tier::Easy);
        assert_eq!(tiers["mug"], Tier::Medium);
        assert_eq!(tiers["laptop"], Tier::Medium);
        assert_eq!(tiers["gate"], Tier::Hard);
    }

    #[test]
    fn default_samples_respect_priors() {
        let b = default_manifest().resolve().unwrap();
        let mut r = rng();
        for c in b.prior.all_ids() {
            for k in 0..5 {
                let s = b.compose(c, &format!("{c}-{k}"), &mut r).unwrap();
                let prior = b.prior.parts(c).unwrap();
                assert!(s.mask.ids().iter().all(|p| prior.contains(p)));
                assert_eq!(s.cloud.len(), 512);
                s.cloud.validate().unwrap();
            }
        }
    }
}
