//! Hypothesis banks and decompositional consensus.
//!
//! For one input, every candidate object class yields a segmentation
//! hypothesis (argmax restricted to that class's prior). Each hypothesis is
//! taken apart: the pointwise features under each predicted part are
//! max-pooled into a part descriptor, the part scorer G rates every
//! descriptor against the label the hypothesis gave it, and the mean rating
//! is the hypothesis's consensus score. The best-scoring hypothesis is both
//! the classification and the segmentation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{encode, glorot, part_logits, BackboneParams, Mode, PointCloud, PointFeatures};
use crate::error::{Error, Result};
use crate::partprior::{object_conditioned_segment, ObjectPartPrior, SegmentationMask};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

pub const DEFAULT_SCORER_HIDDEN: usize = 512;
pub const DEFAULT_DROPOUT: f64 = 0.5;

/// Weights Θ of the part scorer: linear, ReLU, dropout, linear.
#[derive(Clone, Debug, PartialEq)]
pub struct ScorerParams {
    pub input: usize,
    pub hidden: usize,
    pub num_parts: usize,
    pub dropout: f64,
    pub set: ParamSet,
}

impl ScorerParams {
    pub fn init(input: usize, hidden: usize, num_parts: usize, dropout: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::InvalidParameter(format!("scorer dropout {dropout}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        set.insert("scorer.0.weight", glorot(&mut rng, input, hidden, input));
        set.insert("scorer.0.bias", Tensor::zeros(&[hidden]));
        set.insert("scorer.1.weight", glorot(&mut rng, hidden, num_parts, hidden));
        set.insert("scorer.1.bias", Tensor::zeros(&[num_parts]));
        Ok(Self {
            input,
            hidden,
            num_parts,
            dropout,
            set,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = [
            ("scorer.0.weight", vec![self.input, self.hidden]),
            ("scorer.0.bias", vec![self.hidden]),
            ("scorer.1.weight", vec![self.hidden, self.num_parts]),
            ("scorer.1.bias", vec![self.num_parts]),
        ];
        for (name, shape) in shapes {
            let t = self.set.get(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "scorer params",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
            if !t.all_finite() {
                return Err(Error::Contract(format!("parameter `{name}` is not finite")));
            }
        }
        Ok(())
    }

    /// Wraps vars already on a tape, in [`ParamSet`] order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> BoundScorer {
        BoundScorer {
            dropout: self.dropout,
            vars,
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundScorer {
        let vars = if trainable {
            self.set.bind(tape)
        } else {
            self.set.bind_frozen(tape)
        };
        BoundScorer {
            dropout: self.dropout,
            vars,
        }
    }
}

/// Scorer weights recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundScorer {
    dropout: f64,
    pub vars: Vec<Var>,
}

/// One candidate segmentation of an input and its pooled part descriptors.
#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub object: usize,
    pub mask: SegmentationMask,
    /// Part ids present in `mask`, ascending.
    pub found_parts: Vec<usize>,
    /// |found_parts| × M descriptors, one row per found part.
    pub descriptors: Var,
}

impl Hypothesis {
    /// Pools descriptors for `mask` from the input's pointwise features.
    pub fn from_mask(
        tape: &mut Tape,
        object: usize,
        mask: SegmentationMask,
        feats: &PointFeatures,
    ) -> Result<Self> {
        let (descriptors, found_parts) = hypothesis_part_pool(tape, feats.pointwise, &mask)?;
        Ok(Self {
            object,
            mask,
            found_parts,
            descriptors,
        })
    }
}

/// Candidate segmentations of one input, keyed by object class.
#[derive(Clone, Debug)]
pub struct HypothesisBank {
    pub sample_id: String,
    pub hypotheses: Vec<Hypothesis>,
}

impl HypothesisBank {
    pub fn get(&self, object: usize) -> Option<&Hypothesis> {
        self.hypotheses.iter().find(|h| h.object == object)
    }

    pub fn position(&self, object: usize) -> Option<usize> {
        self.hypotheses.iter().position(|h| h.object == object)
    }

    pub fn objects(&self) -> Vec<usize> {
        self.hypotheses.iter().map(|h| h.object).collect()
    }

    /// Swaps in another mask for `object`'s hypothesis, e.g. the ground truth.
    pub fn replace_mask(
        &mut self,
        tape: &mut Tape,
        object: usize,
        mask: SegmentationMask,
        feats: &PointFeatures,
    ) -> Result<()> {
        let i = self
            .position(object)
            .ok_or_else(|| Error::Contract(format!("object {object} not in bank")))?;
        self.hypotheses[i] = Hypothesis::from_mask(tape, object, mask, feats)?;
        Ok(())
    }
}

/// One hypothesis per candidate, from logits computed once. Masks are argmax
/// outputs and therefore constants; descriptors stay on the tape.
pub fn build_hypothesis_bank(
    tape: &mut Tape,
    logits: Var,
    feats: &PointFeatures,
    candidates: &[usize],
    prior: &ObjectPartPrior,
    sample_id: &str,
) -> Result<HypothesisBank> {
    if candidates.is_empty() {
        return Err(Error::EmptySet("build_hypothesis_bank"));
    }
    let logit_values = tape.value(logits).clone();
    let n = tape.value(feats.pointwise).rows();
    // One pooling pass over every candidate's segments, split afterwards.
    let mut masks = Vec::with_capacity(candidates.len());
    let mut all_groups = Vec::new();
    let mut spans = Vec::with_capacity(candidates.len());
    for &object in candidates {
        let mask = object_conditioned_segment(&logit_values, object, prior)?;
        if mask.len() != n {
            return Err(Error::Dimension {
                op: "build_hypothesis_bank",
                lhs: tape.value(feats.pointwise).shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let (parts, groups): (Vec<usize>, Vec<Vec<usize>>) = mask.groups().into_iter().unzip();
        spans.push((all_groups.len(), parts));
        all_groups.extend(groups);
        masks.push(mask);
    }
    let pooled = tape.segment_max_pool(feats.pointwise, &all_groups)?;
    let mut hypotheses = Vec::with_capacity(candidates.len());
    for ((&object, mask), (start, found_parts)) in candidates.iter().zip(masks).zip(spans) {
        let rows: Vec<usize> = (start..start + found_parts.len()).collect();
        let descriptors = tape.select_rows(pooled, &rows)?;
        hypotheses.push(Hypothesis {
            object,
            mask,
            found_parts,
            descriptors,
        });
    }
    if hypotheses.iter().all(|h| h.found_parts.is_empty()) {
        return Err(Error::InternalInvariant(format!(
            "every hypothesis of `{sample_id}` is empty"
        )));
    }
    Ok(HypothesisBank {
        sample_id: sample_id.to_string(),
        hypotheses,
    })
}

/// Max-pools the rows of `pointwise` assigned to each part of `mask`.
/// Parts come out ascending; parts with no points are absent.
pub fn hypothesis_part_pool(
    tape: &mut Tape,
    pointwise: Var,
    mask: &SegmentationMask,
) -> Result<(Var, Vec<usize>)> {
    let n = tape.value(pointwise).rows();
    if mask.len() != n {
        return Err(Error::Dimension {
            op: "hypothesis_part_pool",
            lhs: tape.value(pointwise).shape().to_vec(),
            rhs: vec![mask.len()],
        });
    }
    let (parts, groups): (Vec<usize>, Vec<Vec<usize>>) = mask.groups().into_iter().unzip();
    let descriptors = tape.segment_max_pool(pointwise, &groups)?;
    Ok((descriptors, parts))
}

/// G: per-descriptor logits over the whole part vocabulary.
pub fn score_parts<R: Rng + ?Sized>(
    tape: &mut Tape,
    descriptors: Var,
    scorer: &BoundScorer,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if tape.value(descriptors).rows() == 0 {
        return Err(Error::EmptyHypothesis);
    }
    let v = &scorer.vars;
    let h = tape.linear(descriptors, v[0], v[1])?;
    let h = tape.relu(h);
    let h = tape.dropout(h, scorer.dropout, rng, mode == Mode::Train)?;
    tape.linear(h, v[2], v[3])
}

/// Mean of each descriptor's score for the part the hypothesis assigned it.
pub fn consensus_score(tape: &mut Tape, part_scores: Var, part_ids: &[usize]) -> Result<Var> {
    if part_ids.is_empty() {
        return Err(Error::EmptyHypothesis);
    }
    let rows = tape.value(part_scores).rows();
    if rows != part_ids.len() {
        return Err(Error::Dimension {
            op: "consensus_score",
            lhs: tape.value(part_scores).shape().to_vec(),
            rhs: vec![part_ids.len()],
        });
    }
    let entries: Vec<(usize, usize)> = part_ids.iter().copied().enumerate().collect();
    let gathered = tape.gather(part_scores, &entries)?;
    Ok(tape.mean(gathered))
}

/// Consensus score of every hypothesis in the bank, in bank order.
pub fn bank_scores<R: Rng + ?Sized>(
    tape: &mut Tape,
    bank: &HypothesisBank,
    scorer: &BoundScorer,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<Var>> {
    if bank.hypotheses.iter().any(|h| h.found_parts.is_empty()) {
        return Err(Error::EmptyHypothesis);
    }
    // Rows are scored independently, so one batched pass gives each
    // hypothesis the same values as scoring it alone.
    let all: Vec<Var> = bank.hypotheses.iter().map(|h| h.descriptors).collect();
    let stacked = tape.concat_rows(&all)?;
    let scores = score_parts(tape, stacked, scorer, mode, rng)?;
    let mut out = Vec::with_capacity(bank.hypotheses.len());
    let mut offset = 0;
    for h in &bank.hypotheses {
        let entries: Vec<(usize, usize)> =
            h.found_parts.iter().enumerate().map(|(i, &p)| (offset + i, p)).collect();
        let gathered = tape.gather(scores, &entries)?;
        out.push(tape.mean(gathered));
        offset += h.found_parts.len();
    }
    Ok(out)
}

/// Cross-entropy of the bank's consensus scores against the true class.
pub fn decomp_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    bank: &HypothesisBank,
    gt_object: usize,
    scorer: &BoundScorer,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let target = bank.position(gt_object).ok_or_else(|| {
        Error::Contract(format!(
            "ground-truth object {gt_object} missing from bank of `{}`",
            bank.sample_id
        ))
    })?;
    let scores = bank_scores(tape, bank, scorer, mode, rng)?;
    let stacked = tape.stack(&scores)?;
    let row = tape.reshape(stacked, &[1, scores.len()])?;
    tape.cross_entropy(row, &[target], None)
}

/// Pools descriptors under the ground-truth mask and classifies each over the
/// whole vocabulary against its own part id.
pub fn part_classification_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    feats: &PointFeatures,
    gt_mask: &SegmentationMask,
    scorer: &BoundScorer,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let (descriptors, parts) = hypothesis_part_pool(tape, feats.pointwise, gt_mask)?;
    let scores = score_parts(tape, descriptors, scorer, mode, rng)?;
    tape.cross_entropy(scores, &parts, None)
}

/// Output of consensus inference for one cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Selected class: the lowest id among the top-scoring classes.
    pub object: usize,
    /// Every class whose score equals the maximum exactly.
    pub tie_set: Vec<usize>,
    pub mask: SegmentationMask,
    /// Consensus score per class id.
    pub scores: Vec<f64>,
}

/// Selects the top-scoring class; exact ties are all reported.
pub fn select_hypothesis(scores: &[f64]) -> (usize, Vec<usize>) {
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tie_set: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] == best).collect();
    (tie_set[0], tie_set)
}

/// Forward pass in evaluation mode, returning the tape, features and logits.
pub fn forward_eval(
    cloud: &PointCloud,
    backbone: &BackboneParams,
) -> Result<(Tape, PointFeatures, Var)> {
    let mut tape = Tape::new();
    let b = backbone.bind(&mut tape, false);
    let feats = encode(&mut tape, cloud, &b)?;
    let logits = part_logits(&mut tape, &feats, &b)?;
    Ok((tape, feats, logits))
}

/// Generalized zero-shot inference: bank over every class in the prior,
/// pick the class with the highest consensus score and return its mask.
pub fn predict(
    cloud: &PointCloud,
    backbone: &BackboneParams,
    scorer: &ScorerParams,
    prior: &ObjectPartPrior,
) -> Result<Prediction> {
    let (mut tape, feats, logits) = forward_eval(cloud, backbone)?;
    predict_on_tape(&mut tape, &feats, logits, scorer, prior, &cloud.sample_id)
}

pub(crate) fn predict_on_tape(
    tape: &mut Tape,
    feats: &PointFeatures,
    logits: Var,
    scorer: &ScorerParams,
    prior: &ObjectPartPrior,
    sample_id: &str,
) -> Result<Prediction> {
    let candidates = prior.all_ids();
    let bank = build_hypothesis_bank(tape, logits, feats, &candidates, prior, sample_id)?;
    let s = scorer.bind(tape, false);
    // Eval mode never draws from the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vars = bank_scores(tape, &bank, &s, Mode::Eval, &mut rng)?;
    let scores: Vec<f64> = vars.iter().map(|&v| tape.value(v).item()).collect();
    let (best, tie_set) = select_hypothesis(&scores);
    let mask = bank.hypotheses[best].mask.clone();
    Ok(Prediction {
        object: bank.hypotheses[best].object,
        tie_set: tie_set.iter().map(|&i| bank.hypotheses[i].object).collect(),
        mask,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneDims;
    use crate::partprior::ObjectClass;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn matrix(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn pool_single_part_is_global_max() {
        let y = matrix(&[&[1.0, 5.0, -1.0], &[3.0, 2.0, -4.0]]);
        let mut tape = Tape::new();
        let v = tape.constant(y.clone());
        let (d, ids) = hypothesis_part_pool(&mut tape, v, &SegmentationMask(vec![2, 2])).unwrap();
        assert_eq!(ids, vec![2]);
        assert_eq!(tape.value(d).data(), crate::tensor::max_pool_rows(&y).unwrap().0.data());
    }

    #[test]
    fn pool_singletons_reorders_rows() {
        let y = matrix(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let mut tape = Tape::new();
        let v = tape.constant(y);
        let (d, ids) = hypothesis_part_pool(&mut tape, v, &SegmentationMask(vec![7, 0, 3])).unwrap();
        assert_eq!(ids, vec![0, 3, 7]);
        assert_eq!(tape.value(d).data(), &[3.0, 4.0, 5.0, 6.0, 1.0, 2.0]);
    }

    #[test]
    fn pool_two_parts_matches_masked_scan() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..4 * 6).map(|_| r.random_range(-1.0..1.0)).collect();
        let y = Tensor::new(vec![4, 6], data).unwrap();
        let mask = SegmentationMask(vec![1, 0, 1, 1]);
        let mut tape = Tape::new();
        let v = tape.constant(y.clone());
        let (d, ids) = hypothesis_part_pool(&mut tape, v, &mask).unwrap();
        assert_eq!(ids, vec![0, 1]);
        for (k, part) in ids.iter().enumerate() {
            for c in 0..6 {
                let mut best = f64::NEG_INFINITY;
                for r in 0..4 {
                    if mask.0[r] == *part {
                        best = best.max(y.at(r, c));
                    }
                }
                assert_eq!(tape.value(d).at(k, c), best);
            }
        }
    }

    #[test]
    fn consensus_cases() {
        let mut tape = Tape::new();
        let s = tape.constant(matrix(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
        let c = consensus_score(&mut tape, s, &[0, 1, 0]).unwrap();
        assert!((tape.value(c).item() - 10.0 / 3.0).abs() < 1e-12);

        let one = tape.constant(matrix(&[&[-0.25, 9.0]]));
        let c = consensus_score(&mut tape, one, &[0]).unwrap();
        assert_eq!(tape.value(c).item(), -0.25);

        let flat = tape.constant(matrix(&[&[7.0, 0.0], &[1.0, 7.0]]));
        let c = consensus_score(&mut tape, flat, &[0, 1]).unwrap();
        assert_eq!(tape.value(c).item(), 7.0);

        assert!(matches!(
            consensus_score(&mut tape, s, &[]),
            Err(Error::EmptyHypothesis)
        ));
    }

    #[test]
    fn scorer_zero_weights_and_determinism() {
        let mut sc = ScorerParams::init(6, 4, 3, 0.5, 1).unwrap();
        let mut tape = Tape::new();
        let d = tape.constant(matrix(&[&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0; 6]]));
        let b = sc.bind(&mut tape, false);
        let a1 = score_parts(&mut tape, d, &b, Mode::Eval, &mut rng()).unwrap();
        let mut other = ChaCha8Rng::seed_from_u64(99);
        let a2 = score_parts(&mut tape, d, &b, Mode::Eval, &mut other).unwrap();
        assert_eq!(tape.value(a1), tape.value(a2));

        *sc.set.get_mut("scorer.1.weight").unwrap() = Tensor::zeros(&[4, 3]);
        *sc.set.get_mut("scorer.1.bias").unwrap() = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let b = sc.bind(&mut tape, false);
        let z = score_parts(&mut tape, d, &b, Mode::Train, &mut rng()).unwrap();
        assert_eq!(tape.value(z).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn scorer_matches_layer_by_layer() {
        let sc = ScorerParams::init(5, 7, 4, 0.5, 3).unwrap();
        let x = Tensor::from_rows(&[[0.3, -0.2, 0.9, 0.0, 1.5]]).unwrap();
        let mut tape = Tape::new();
        let d = tape.constant(x.clone());
        let b = sc.bind(&mut tape, false);
        let out = score_parts(&mut tape, d, &b, Mode::Eval, &mut rng()).unwrap();

        let w0 = sc.set.get("scorer.0.weight").unwrap();
        let b0 = sc.set.get("scorer.0.bias").unwrap();
        let w1 = sc.set.get("scorer.1.weight").unwrap();
        let b1 = sc.set.get("scorer.1.bias").unwrap();
        let mut hidden = vec![0.0; 7];
        for (o, h) in hidden.iter_mut().enumerate() {
            let mut acc = b0.data()[o];
            for i in 0..5 {
                acc += x.data()[i] * w0.at(i, o);
            }
            *h = acc.max(0.0);
        }
        for p in 0..4 {
            let mut acc = b1.data()[p];
            for (o, h) in hidden.iter().enumerate() {
                acc += h * w1.at(o, p);
            }
            assert!((acc - tape.value(out).at(0, p)).abs() < 1e-12);
        }
    }

    #[test]
    fn decomp_loss_cases() {
        // Feed fixed consensus scores through the same cross-entropy the loss
        // uses: scores [1.0, 2.0, 0.5], target index 1.
        let mut tape = Tape::new();
        let s = tape.constant(matrix(&[&[1.0, 2.0, 0.5]]));
        let l = tape.cross_entropy(s, &[1], None).unwrap();
        let oracle = -2.0 + (1f64.exp() + 2f64.exp() + 0.5f64.exp()).ln();
        assert!((tape.value(l).item() - oracle).abs() < 1e-12);
        assert!((tape.value(l).item() - 0.4644).abs() < 5e-5);
    }

    fn toy_prior(identical: bool) -> ObjectPartPrior {
        let second = if identical { vec![0, 1] } else { vec![1, 2] };
        ObjectPartPrior::new(
            vec![
                ObjectClass { name: "a".into(), parts: vec![0, 1], seen: true },
                ObjectClass { name: "b".into(), parts: second, seen: true },
                ObjectClass { name: "c".into(), parts: vec![if identical { 1 } else { 2 }], seen: false },
            ],
            3,
            identical,
        )
        .unwrap()
    }

    fn toy_model(seed: u64) -> (BackboneParams, ScorerParams) {
        let dims = BackboneDims {
            point_layers: vec![8, 16],
            global: 12,
            seg_hidden: 10,
        };
        let b = BackboneParams::init(&dims, 3, seed).unwrap();
        let s = ScorerParams::init(dims.pointwise(), 9, 3, 0.5, seed + 1).unwrap();
        (b, s)
    }

    fn toy_cloud(seed: u64) -> PointCloud {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<[f64; 3]> = (0..16)
            .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
            .collect();
        PointCloud::normalized(pts, "toy").unwrap()
    }

    #[test]
    fn single_candidate_bank() {
        let prior = toy_prior(false);
        let (b, _) = toy_model(1);
        let (mut tape, feats, logits) = forward_eval(&toy_cloud(2), &b).unwrap();
        let bank = build_hypothesis_bank(&mut tape, logits, &feats, &[2], &prior, "toy").unwrap();
        assert_eq!(bank.hypotheses.len(), 1);
        assert_eq!(bank.hypotheses[0].found_parts, vec![2]);
        assert_eq!(tape.value(bank.hypotheses[0].descriptors).rows(), 1);
    }

    #[test]
    fn identical_priors_tie() {
        let prior = toy_prior(true);
        let (b, s) = toy_model(4);
        let p = predict(&toy_cloud(5), &b, &s, &prior).unwrap();
        assert_eq!(p.scores[0].to_bits(), p.scores[1].to_bits());
        if p.object == 0 {
            assert!(p.tie_set.contains(&0) && p.tie_set.contains(&1));
        }
    }

    #[test]
    fn predicted_mask_is_conditioned_segment() {
        let prior = toy_prior(false);
        let (b, s) = toy_model(6);
        let cloud = toy_cloud(7);
        let p = predict(&cloud, &b, &s, &prior).unwrap();
        let (tape, _, logits) = forward_eval(&cloud, &b).unwrap();
        let oracle = object_conditioned_segment(tape.value(logits), p.object, &prior).unwrap();
        assert_eq!(p.mask, oracle);
        assert!(p.tie_set.contains(&p.object));
    }

    #[test]
    fn gt_missing_from_bank_is_contract_error() {
        let prior = toy_prior(false);
        let (b, s) = toy_model(8);
        let (mut tape, feats, logits) = forward_eval(&toy_cloud(9), &b).unwrap();
        let bank = build_hypothesis_bank(&mut tape, logits, &feats, &[0, 1], &prior, "toy").unwrap();
        let bs = s.bind(&mut tape, false);
        let err = decomp_loss(&mut tape, &bank, 2, &bs, Mode::Eval, &mut rng()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));

        let one = build_hypothesis_bank(&mut tape, logits, &feats, &[1], &prior, "toy").unwrap();
        let l = decomp_loss(&mut tape, &one, 1, &bs, Mode::Eval, &mut rng()).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn batched_bank_matches_one_at_a_time() {
        let prior = toy_prior(false);
        let (b, s) = toy_model(10);
        let cloud = toy_cloud(11);
        let (mut tape, feats, logits) = forward_eval(&cloud, &b).unwrap();
        let bank = build_hypothesis_bank(&mut tape, logits, &feats, &[0, 1, 2], &prior, "toy").unwrap();
        let bs = s.bind(&mut tape, false);
        let batched = bank_scores(&mut tape, &bank, &bs, Mode::Eval, &mut rng()).unwrap();
        for (h, v) in bank.hypotheses.iter().zip(batched) {
            let (d, parts) = hypothesis_part_pool(&mut tape, feats.pointwise, &h.mask).unwrap();
            assert_eq!(parts, h.found_parts);
            let scores = score_parts(&mut tape, d, &bs, Mode::Eval, &mut rng()).unwrap();
            let alone = consensus_score(&mut tape, scores, &parts).unwrap();
            assert_eq!(tape.value(alone).item().to_bits(), tape.value(v).item().to_bits());
        }
    }
}
