//! Finite-difference checks for every differentiable tape op and for the
//! three training losses on small two-class instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{encode, part_logits, BackboneDims, BackboneParams, Mode, PointCloud};
use crate::consensus::{build_hypothesis_bank, decomp_loss, part_classification_loss, ScorerParams};
use crate::error::Result;
use crate::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use crate::partprior::{segmentation_loss, ObjectClass, ObjectPartPrior, SegmentationMask};
use crate::tensor::{ParamSet, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub name: &'static str,
    pub seed: u64,
    pub report: GradCheckReport,
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Analytic gradient of `build` at `params`, then the central-difference
/// comparison.
pub fn check_build(params: &ParamSet, build: &Build<'_>, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: ParamSet = params
        .names()
        .zip(&vars)
        .map(|(n, &v)| (n.to_string(), grads.get(v)))
        .collect();
    let eval = |p: &ParamSet| {
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape);
        let loss = build(&mut tape, &vars).expect("probe evaluation");
        (tape.value(loss).item(), tape.branch_fingerprint())
    };
    Ok(check_gradients(params, &analytic, eval, cfg))
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Random linear functional of `out`, so every output coordinate matters.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = tape.constant(random(&mut rng, &[n, 1]));
    let flat = tape.reshape(out, &[1, n])?;
    let y = tape.matmul(flat, r)?;
    Ok(tape.sum(y))
}

fn set(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> ParamSet {
    shapes.iter().map(|(n, s)| (n.to_string(), random(rng, s))).collect()
}

fn op_cases(seed: u64, cfg: &GradCheckConfig, out: &mut Vec<SuiteCase>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut run = |name: &'static str, params: ParamSet, build: &Build<'_>| -> Result<()> {
        let report = check_build(&params, build, cfg)?;
        out.push(SuiteCase { name, seed, report });
        Ok(())
    };
    let s = seed;

    run("matmul", set(&mut rng, &[("x", &[4, 3]), ("w", &[3, 5])]), &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y, s)
    })?;
    run("linear", set(&mut rng, &[("x", &[4, 3]), ("w", &[3, 5]), ("b", &[5])]), &|t, v| {
        let y = t.linear(v[0], v[1], v[2])?;
        project(t, y, s)
    })?;
    run("add_row_broadcast", set(&mut rng, &[("x", &[4, 3]), ("v", &[3])]), &|t, v| {
        let y = t.add_row_broadcast(v[0], v[1])?;
        project(t, y, s)
    })?;
    run("relu", set(&mut rng, &[("x", &[5, 4])]), &|t, v| {
        let y = t.relu(v[0]);
        project(t, y, s)
    })?;
    run("dropout", set(&mut rng, &[("x", &[5, 4])]), &|t, v| {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let y = t.dropout(v[0], 0.5, &mut r, true)?;
        project(t, y, s)
    })?;
    run("masked_log_softmax", set(&mut rng, &[("x", &[3, 5])]), &|t, v| {
        let y = t.masked_log_softmax(v[0], Some(&[true, false, true, true, false]))?;
        // Masked-out entries hold a sentinel with zero gradient; only the
        // allowed columns enter the functional.
        let entries: Vec<(usize, usize)> =
            (0..3).flat_map(|r| [0, 2, 3].map(move |c| (r, c))).collect();
        let g = t.gather(y, &entries)?;
        project(t, g, s)
    })?;
    run("max_pool_rows", set(&mut rng, &[("x", &[6, 4])]), &|t, v| {
        let (y, _) = t.max_pool_rows(v[0])?;
        project(t, y, s)
    })?;
    run("segment_max_pool", set(&mut rng, &[("x", &[6, 3])]), &|t, v| {
        let y = t.segment_max_pool(v[0], &[vec![0, 3, 5], vec![1], vec![2, 4, 1]])?;
        project(t, y, s)
    })?;
    run("concat_rows", set(&mut rng, &[("a", &[2, 3]), ("b", &[1, 3]), ("c", &[3, 3])]), &|t, v| {
        let y = t.concat_rows(&[v[0], v[1], v[2], v[0]])?;
        project(t, y, s)
    })?;
    run("select_rows", set(&mut rng, &[("x", &[5, 3])]), &|t, v| {
        let y = t.select_rows(v[0], &[4, 0, 2, 2])?;
        project(t, y, s)
    })?;
    run("concat_cols", set(&mut rng, &[("a", &[3, 2]), ("b", &[3, 4])]), &|t, v| {
        let y = t.concat_cols(v[0], v[1])?;
        project(t, y, s)
    })?;
    run("broadcast_rows", set(&mut rng, &[("v", &[3])]), &|t, v| {
        let y = t.broadcast_rows(v[0], 4)?;
        project(t, y, s)
    })?;
    run("reshape", set(&mut rng, &[("x", &[2, 6])]), &|t, v| {
        let y = t.reshape(v[0], &[3, 4])?;
        project(t, y, s)
    })?;
    run("cross_entropy", set(&mut rng, &[("x", &[4, 5])]), &|t, v| {
        t.cross_entropy(v[0], &[0, 3, 2, 0], Some(&[true, false, true, true, false]))
    })?;
    run("cross_entropy_full", set(&mut rng, &[("x", &[4, 5])]), &|t, v| {
        t.cross_entropy(v[0], &[1, 4, 2, 0], None)
    })?;
    run("sum", set(&mut rng, &[("x", &[3, 4])]), &|t, v| {
        let y = t.scale(v[0], 0.7);
        let y = t.relu(y);
        Ok(t.sum(y))
    })?;
    run("mean", set(&mut rng, &[("x", &[3, 4])]), &|t, v| {
        let y = t.relu(v[0]);
        Ok(t.mean(y))
    })?;
    run("add", set(&mut rng, &[("a", &[3, 4]), ("b", &[3, 4])]), &|t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, s)
    })?;
    run("scale", set(&mut rng, &[("x", &[3, 4])]), &|t, v| {
        let y = t.scale(v[0], -1.7);
        project(t, y, s)
    })?;
    run("gather", set(&mut rng, &[("x", &[3, 4])]), &|t, v| {
        let y = t.gather(v[0], &[(0, 3), (2, 1), (0, 3), (1, 0)])?;
        project(t, y, s)
    })?;
    run("stack", set(&mut rng, &[("a", &[4]), ("b", &[4]), ("c", &[4])]), &|t, v| {
        let y = t.stack(&[v[0], v[2], v[1]])?;
        project(t, y, s)
    })?;
    Ok(())
}

/// Two seen classes over three parts.
pub fn two_class_prior() -> ObjectPartPrior {
    ObjectPartPrior::new(
        vec![
            ObjectClass { name: "first".into(), parts: vec![0, 1], seen: true },
            ObjectClass { name: "second".into(), parts: vec![1, 2], seen: true },
        ],
        3,
        false,
    )
    .expect("valid prior")
}

struct Instance {
    cloud: PointCloud,
    gt_object: usize,
    gt_mask: SegmentationMask,
    params: ParamSet,
    backbone: BackboneParams,
    scorer: ScorerParams,
}

fn instance(seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<[f64; 3]> = (0..16)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let cloud = PointCloud::normalized(pts, format!("grad-{seed}"))?;
    let gt_object = (seed % 2) as usize;
    let parts = two_class_prior().parts(gt_object)?.to_vec();
    let mut ids: Vec<usize> = (0..16).map(|i| parts[i % parts.len()]).collect();
    ids.rotate_left(rng.random_range(0..16));
    let dims = BackboneDims {
        point_layers: vec![8, 12],
        global: 10,
        seg_hidden: 9,
    };
    let mut backbone = BackboneParams::init(&dims, 3, seed)?;
    let mut scorer = ScorerParams::init(dims.pointwise(), 11, 3, 0.5, seed + 7)?;
    // Nonzero biases so no unit starts exactly on its kink.
    for (_, t) in backbone.set.iter_mut().chain(scorer.set.iter_mut()) {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let params: ParamSet = backbone
        .set
        .iter()
        .chain(scorer.set.iter())
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    Ok(Instance {
        cloud,
        gt_object,
        gt_mask: SegmentationMask(ids),
        params,
        backbone,
        scorer,
    })
}

#[derive(Clone, Copy)]
enum Objective {
    Segmentation,
    Decomp,
    PartClassification,
    Joint,
}

fn objective(inst: &Instance, which: Objective, t: &mut Tape, v: &[Var]) -> Result<Var> {
    let nb = inst.backbone.set.len();
    let bb = inst.backbone.bind_vars(v[..nb].to_vec());
    let sc = inst.scorer.bind_vars(v[nb..].to_vec());
    let prior = two_class_prior();
    let feats = encode(t, &inst.cloud, &bb)?;
    let logits = part_logits(t, &feats, &bb)?;
    let mut rng = ChaCha8Rng::seed_from_u64(inst.cloud.len() as u64);
    let seg = |t: &mut Tape| segmentation_loss(t, logits, &inst.gt_mask, prior.parts(inst.gt_object)?, "g");
    let dec = |t: &mut Tape, rng: &mut ChaCha8Rng| {
        let bank = build_hypothesis_bank(t, logits, &feats, &prior.seen_ids(), &prior, "g")?;
        decomp_loss(t, &bank, inst.gt_object, &sc, Mode::Train, rng)
    };
    match which {
        Objective::Segmentation => seg(t),
        Objective::Decomp => dec(t, &mut rng),
        Objective::PartClassification => {
            part_classification_loss(t, &feats, &inst.gt_mask, &sc, Mode::Train, &mut rng)
        }
        Objective::Joint => {
            let a = seg(t)?;
            let b = dec(t, &mut rng)?;
            let c = part_classification_loss(t, &feats, &inst.gt_mask, &sc, Mode::Train, &mut rng)?;
            let ab = t.add(a, b)?;
            t.add(ab, c)
        }
    }
}

fn loss_cases(seed: u64, cfg: &GradCheckConfig, out: &mut Vec<SuiteCase>) -> Result<()> {
    let inst = instance(seed)?;
    for (name, which) in [
        ("segmentation_loss", Objective::Segmentation),
        ("decomp_loss", Objective::Decomp),
        ("part_classification_loss", Objective::PartClassification),
        ("joint_loss", Objective::Joint),
    ] {
        let build = |t: &mut Tape, v: &[Var]| objective(&inst, which, t, v);
        let report = check_build(&inst.params, &build, cfg)?;
        out.push(SuiteCase { name, seed, report });
    }
    Ok(())
}

/// Every op and every loss, once per seed.
pub fn run_suite(seeds: &[u64], cfg: &GradCheckConfig) -> Result<Vec<SuiteCase>> {
    let mut out = Vec::new();
    for &seed in seeds {
        let cfg = GradCheckConfig { seed, ..cfg.clone() };
        op_cases(seed, &cfg, &mut out)?;
        loss_cases(seed, &cfg, &mut out)?;
    }
    Ok(out)
}
