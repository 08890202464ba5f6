//! Part vocabulary, per-object part priors, the prior-masked segmentation
//! loss, and argmax segmentation with and without a prior.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Ordered part names; the position of a name is its part id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartVocabulary {
    names: Vec<String>,
}

impl PartVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::ManifestValidation("duplicate part names".into()));
        }
        if names.is_empty() {
            return Err(Error::ManifestValidation("empty part vocabulary".into()));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::ManifestValidation(format!("unknown part `{name}`")))
    }

    /// One name per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.names {
            s.push_str(n);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect(),
        )
    }
}

/// One object class and the parts that may occur in it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectClass {
    pub name: String,
    pub parts: Vec<usize>,
    pub seen: bool,
}

/// Part priors for every object class; class id = position.
///
/// Built once from the benchmark manifest and never mutated afterwards.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectPartPrior {
    classes: Vec<ObjectClass>,
    num_parts: usize,
    allow_identical: bool,
}

impl ObjectPartPrior {
    /// Validates and freezes the priors. Every class needs at least one part,
    /// unseen classes may only use parts some seen class uses, and no two
    /// classes may share a part set unless `allow_identical`.
    pub fn new(classes: Vec<ObjectClass>, num_parts: usize, allow_identical: bool) -> Result<Self> {
        let mut classes = classes;
        let mut names = BTreeSet::new();
        for c in &mut classes {
            c.parts.sort_unstable();
            c.parts.dedup();
            if c.parts.is_empty() {
                return Err(Error::ManifestValidation(format!("class `{}` has an empty prior", c.name)));
            }
            if let Some(&p) = c.parts.iter().find(|&&p| p >= num_parts) {
                return Err(Error::ManifestValidation(format!(
                    "class `{}` uses part id {p} outside the vocabulary",
                    c.name
                )));
            }
            if !names.insert(c.name.clone()) {
                return Err(Error::ManifestValidation(format!("duplicate class `{}`", c.name)));
            }
        }
        let seen_parts: BTreeSet<usize> = classes
            .iter()
            .filter(|c| c.seen)
            .flat_map(|c| c.parts.iter().copied())
            .collect();
        for c in classes.iter().filter(|c| !c.seen) {
            if let Some(p) = c.parts.iter().find(|p| !seen_parts.contains(p)) {
                return Err(Error::ManifestValidation(format!(
                    "unseen class `{}` uses part {p} that no seen class has",
                    c.name
                )));
            }
        }
        if !allow_identical {
            let mut sets: BTreeMap<&[usize], &str> = BTreeMap::new();
            for c in &classes {
                if let Some(other) = sets.insert(&c.parts, &c.name) {
                    return Err(Error::ManifestValidation(format!(
                        "classes `{other}` and `{}` have identical priors",
                        c.name
                    )));
                }
            }
        }
        Ok(Self {
            classes,
            num_parts,
            allow_identical,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_parts(&self) -> usize {
        self.num_parts
    }

    pub fn classes(&self) -> &[ObjectClass] {
        &self.classes
    }

    pub fn class(&self, id: usize) -> Result<&ObjectClass> {
        self.classes
            .get(id)
            .ok_or_else(|| Error::UnknownObject(id.to_string()))
    }

    pub fn class_id(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::UnknownObject(name.to_string()))
    }

    pub fn parts(&self, id: usize) -> Result<&[usize]> {
        Ok(&self.class(id)?.parts)
    }

    pub fn is_seen(&self, id: usize) -> Result<bool> {
        Ok(self.class(id)?.seen)
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&i| self.classes[i].seen).collect()
    }

    pub fn unseen_ids(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&i| !self.classes[i].seen).collect()
    }

    pub fn all_ids(&self) -> Vec<usize> {
        (0..self.classes.len()).collect()
    }

    /// Boolean mask over the vocabulary selecting the class's parts.
    pub fn mask(&self, id: usize) -> Result<Vec<bool>> {
        Ok(part_mask(self.parts(id)?, self.num_parts))
    }

    /// The whole vocabulary as a single prior, for the unrestricted baseline.
    pub fn full_prior(&self) -> Vec<usize> {
        (0..self.num_parts).collect()
    }

    /// Human-readable prior manifest (TOML).
    pub fn to_toml(&self, vocab: &PartVocabulary) -> String {
        #[derive(Serialize)]
        struct Entry<'a> {
            name: &'a str,
            seen: bool,
            parts: Vec<&'a str>,
        }
        #[derive(Serialize)]
        struct File<'a> {
            version: u32,
            #[serde(skip_serializing_if = "std::ops::Not::not")]
            allow_identical_priors: bool,
            object: Vec<Entry<'a>>,
        }
        let file = File {
            version: 1,
            allow_identical_priors: self.allow_identical,
            object: self
                .classes
                .iter()
                .map(|c| Entry {
                    name: &c.name,
                    seen: c.seen,
                    parts: c.parts.iter().map(|&p| vocab.name(p)).collect(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("prior manifest serializes")
    }

    pub fn from_toml(text: &str, vocab: &PartVocabulary) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            name: String,
            seen: bool,
            parts: Vec<String>,
        }
        #[derive(Deserialize)]
        struct File {
            version: u32,
            object: Vec<Entry>,
            #[serde(default)]
            allow_identical_priors: bool,
        }
        let file: File = toml::from_str(text)
            .map_err(|e| Error::ManifestValidation(format!("prior manifest: {e}")))?;
        if file.version != 1 {
            return Err(Error::ManifestValidation(format!(
                "unsupported prior manifest version {}",
                file.version
            )));
        }
        let classes = file
            .object
            .into_iter()
            .map(|e| {
                Ok(ObjectClass {
                    parts: e.parts.iter().map(|p| vocab.id(p)).collect::<Result<_>>()?,
                    name: e.name,
                    seen: e.seen,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(classes, vocab.len(), file.allow_identical_priors)
    }
}

pub fn part_mask(parts: &[usize], num_parts: usize) -> Vec<bool> {
    let mut m = vec![false; num_parts];
    for &p in parts {
        m[p] = true;
    }
    m
}

/// Per-point part ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentationMask(pub Vec<usize>);

impl SegmentationMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    /// Distinct part ids present, ascending.
    pub fn support(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.0.iter().copied().collect();
        set.into_iter().collect()
    }

    /// Rows assigned to each present part, parts ascending.
    pub fn groups(&self) -> Vec<(usize, Vec<usize>)> {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &p) in self.0.iter().enumerate() {
            groups.entry(p).or_default().push(row);
        }
        groups.into_iter().collect()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        SegmentationMask(perm.iter().map(|&i| self.0[i]).collect())
    }
}

/// Mean over points of the negative log-likelihood of each point's gt part,
/// with the softmax restricted to the class prior `prior`.
pub fn segmentation_loss(
    tape: &mut Tape,
    logits: Var,
    gt_mask: &SegmentationMask,
    prior: &[usize],
    sample_id: &str,
) -> Result<Var> {
    let num_parts = tape.value(logits).cols();
    let mask = part_mask(prior, num_parts);
    if let Some(&bad) = gt_mask.ids().iter().find(|&&p| p >= num_parts || !mask[p]) {
        return Err(Error::DatasetIntegrity {
            sample: sample_id.to_string(),
            part: bad,
        });
    }
    tape.cross_entropy(logits, gt_mask.ids(), Some(&mask))
}

fn restricted_argmax(row: &[f64], allowed: &[usize]) -> usize {
    let mut best = allowed[0];
    for &p in &allowed[1..] {
        if row[p] > row[best] {
            best = p;
        }
    }
    best
}

/// Per-point argmax over the parts of `object`'s prior; ties go to the lowest
/// part id.
pub fn object_conditioned_segment(
    logits: &Tensor,
    object: usize,
    prior: &ObjectPartPrior,
) -> Result<SegmentationMask> {
    let parts = prior.parts(object)?;
    segment_with_parts(logits, parts)
}

pub(crate) fn segment_with_parts(logits: &Tensor, parts: &[usize]) -> Result<SegmentationMask> {
    let (n, k) = logits.expect_matrix("segment")?;
    if parts.is_empty() || parts.iter().any(|&p| p >= k) {
        return Err(Error::Contract(format!("invalid part set {parts:?} for {k} logits")));
    }
    let mask: Vec<usize> = (0..n).map(|i| restricted_argmax(logits.row(i), parts)).collect();
    if mask.iter().any(|p| !parts.contains(p)) {
        return Err(Error::InternalInvariant("segment left its prior".into()));
    }
    Ok(SegmentationMask(mask))
}

/// Unrestricted per-point argmax over the whole vocabulary.
pub fn direct_segment(logits: &Tensor) -> SegmentationMask {
    let k = logits.cols();
    let all: Vec<usize> = (0..k).collect();
    SegmentationMask(
        (0..logits.rows())
            .map(|i| restricted_argmax(logits.row(i), &all))
            .collect(),
    )
}
