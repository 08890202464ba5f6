use super::*;
use crate::backbone::BackboneDims;
use crate::synthgen::{
    generate_benchmark, BenchmarkManifest, ObjectTemplate, PartTemplate, Placement, Primitive, SplitSizes, Transform,
    GENERATOR_VERSION,
};

fn small_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneDims {
            point_layers: vec![16, 32],
            global: 32,
            seg_hidden: 32,
        },
        scorer_hidden: 32,
        dropout: 0.5,
    }
}

fn place(part: &str, shape: Primitive, at: [f64; 3], fraction: f64) -> Placement {
    Placement {
        template: PartTemplate {
            part: part.into(),
            low: shape.clone(),
            high: shape,
        },
        transform: Transform::at(at),
        fraction,
        optional: None,
    }
}

/// Two seen classes (a disk on a rod, a box on a rod) and an unseen one
/// (disk on box).
fn toy_manifest() -> BenchmarkManifest {
    let disk = Primitive::Disk { radius: 0.5 };
    let rod = Primitive::Rod { radius: 0.05, length: 1.0 };
    let cube = Primitive::BoxPanel { size: [0.6, 0.6, 0.6] };
    let obj = |name: &str, seen, placements| ObjectTemplate {
        name: name.into(),
        seen,
        placements,
    };
    BenchmarkManifest {
        version: GENERATOR_VERSION,
        seed: 5,
        points_per_cloud: 64,
        jitter: 0.005,
        stretch: 0.1,
        parts: vec!["top".into(), "stem".into(), "block".into()],
        splits: SplitSizes { train: 6, val: 3, test: 3 },
        objects: vec![
            obj("lamp", true, vec![place("top", disk.clone(), [0.0, 0.5, 0.0], 0.5), place("stem", rod.clone(), [0.0, 0.0, 0.0], 0.5)]),
            obj("post", true, vec![place("block", cube.clone(), [0.0, 0.8, 0.0], 0.6), place("stem", rod, [0.0, 0.0, 0.0], 0.4)]),
            obj("crate", false, vec![place("top", disk, [0.0, 0.31, 0.0], 0.4), place("block", cube, [0.0, 0.0, 0.0], 0.6)]),
        ],
    }
}

fn toy_config(dir: &Path, stage: Stage) -> RunConfig {
    let mut cfg = match stage {
        Stage::Pretrain => RunConfig::pretrain(dir.join("data"), dir.join("pre")),
        _ => RunConfig::dcc(dir.join("data"), dir.join("dcc"), dir.join("pre/best.ckpt")),
    };
    cfg.model = small_model();
    cfg.epochs = 4;
    cfg.seed = 3;
    cfg
}

fn toy_data(dir: &Path) -> Dataset {
    generate_benchmark(&toy_manifest(), &dir.join("data")).unwrap();
    Dataset::open(&dir.join("data")).unwrap()
}

#[test]
fn single_part_class_has_zero_loss() {
    let m = BenchmarkManifest {
        parts: vec!["only".into()],
        objects: vec![ObjectTemplate {
            name: "ball".into(),
            seen: true,
            placements: vec![place("only", Primitive::Cap { radius: 0.5, height: 0.5 }, [0.0; 3], 1.0)],
        }],
        ..toy_manifest()
    };
    let b = m.resolve().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let train: Vec<LabeledSample> = (0..4).map(|i| b.compose(0, &format!("{i}"), &mut rng).unwrap()).collect();
    let mut cfg = RunConfig::pretrain("unused", "unused");
    cfg.model = small_model();
    cfg.epochs = 1;
    let init = Model::init(&cfg.model, 1, 0).unwrap();
    let out = train_loop(&cfg, &b.prior, &train, &[], init, "fp", |_| Ok(())).unwrap();
    assert_eq!(out.history[0].train_loss, 0.0);
}

#[test]
fn memorizes_ten_samples() {
    let b = toy_manifest().resolve().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train: Vec<LabeledSample> = (0..10).map(|i| b.compose(i % 2, &format!("m{i}"), &mut rng).unwrap()).collect();
    let mut cfg = RunConfig::pretrain("unused", "unused");
    cfg.model = small_model();
    cfg.epochs = 80;
    cfg.lr_high = 1e-2;
    cfg.lr_low = 1e-2;
    cfg.batch_size = 10;
    let init = Model::init(&cfg.model, 3, 2).unwrap();
    let out = train_loop(&cfg, &b.prior, &train, &[], init, "fp", |_| Ok(())).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|h| h.train_loss).collect();
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "loss went up: {losses:?}");
    }
    assert!(*losses.last().unwrap() < 0.05, "{losses:?}");

    // The final model must segment its own training data almost perfectly.
    let recs = infer(&out.best.model, &train, &b.prior, EvalMode::Oracle).unwrap();
    let mut by_class: BTreeMap<usize, Vec<&EvalRecord>> = BTreeMap::new();
    for r in &recs {
        by_class.entry(r.gt_object).or_default().push(r);
    }
    for (c, rs) in by_class {
        let iou = crate::metrics::class_iou(&rs, b.prior.parts(c).unwrap(), "x").unwrap();
        assert!(iou > 95.0, "class {c}: {iou}");
    }
}

#[test]
fn no_losses_leave_parameters_unchanged() {
    let b = toy_manifest().resolve().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train: Vec<LabeledSample> = (0..4).map(|i| b.compose(i % 2, &format!("n{i}"), &mut rng).unwrap()).collect();
    let mut cfg = RunConfig::dcc("unused", "unused", "unused");
    cfg.model = small_model();
    cfg.epochs = 1;
    cfg.losses = LossToggles {
        seg: false,
        decomp: false,
        part: false,
    };
    let init = Model::init(&cfg.model, 3, 2).unwrap();
    let out = train_loop(&cfg, &b.prior, &train, &[], init.clone(), "fp", |_| Ok(())).unwrap();
    assert_eq!(out.best.model, init);
}

#[test]
fn pretrain_leaves_scorer_alone() {
    let b = toy_manifest().resolve().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train: Vec<LabeledSample> = (0..4).map(|i| b.compose(i % 2, &format!("p{i}"), &mut rng).unwrap()).collect();
    let mut cfg = RunConfig::pretrain("unused", "unused");
    cfg.model = small_model();
    cfg.epochs = 2;
    let init = Model::init(&cfg.model, 3, 2).unwrap();
    let out = train_loop(&cfg, &b.prior, &train, &[], init.clone(), "fp", |_| Ok(())).unwrap();
    assert_eq!(out.best.model.scorer, init.scorer);
    assert_eq!(out.best.adam_scorer.step, 0);
    assert_ne!(out.best.model.backbone, init.backbone);
}

#[test]
fn two_seen_classes_become_separable() {
    let b = toy_manifest().resolve().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let train: Vec<LabeledSample> = (0..12).map(|i| b.compose(i % 2, &format!("s{i}"), &mut rng).unwrap()).collect();
    let mut cfg = RunConfig::pretrain("unused", "unused");
    cfg.model = small_model();
    cfg.epochs = 10;
    cfg.lr_low = 1e-3;
    let pre = train_loop(&cfg, &b.prior, &train, &[], Model::init(&cfg.model, 3, 5).unwrap(), "fp", |_| Ok(())).unwrap();
    let mut dcc = RunConfig::dcc("unused", "unused", "unused");
    dcc.model = small_model();
    dcc.epochs = 15;
    dcc.lr_low = 1e-3;
    let out = train_loop(&dcc, &b.prior, &train, &[], pre.best.model, "fp", |_| Ok(())).unwrap();
    // Classify among the seen classes only, as during training.
    let seen_prior = ObjectPartPrior::new(
        b.prior.classes().iter().filter(|c| c.seen).cloned().collect(),
        3,
        false,
    )
    .unwrap();
    let model = &out.best.model;
    let recs = infer(model, &train, &seen_prior, EvalMode::Dcc).unwrap();
    let correct = recs.iter().filter(|r| r.correct()).count();
    assert_eq!(correct, recs.len());
}

#[test]
fn toggles_give_distinct_trajectories() {
    let b = toy_manifest().resolve().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train: Vec<LabeledSample> = (0..6).map(|i| b.compose(i % 2, &format!("t{i}"), &mut rng).unwrap()).collect();
    let init = Model::init(&small_model(), 3, 5).unwrap();
    let mut seen = Vec::new();
    for row in ['a', 'b', 'c', 'd'] {
        let mut cfg = RunConfig::dcc("unused", "unused", "unused").ablation(row).unwrap();
        cfg.model = small_model();
        cfg.epochs = 2;
        let out = train_loop(&cfg, &b.prior, &train, &[], init.clone(), "fp", |_| Ok(())).unwrap();
        let losses: Vec<u64> = out.history.iter().map(|h| h.train_loss.to_bits()).collect();
        assert!(!seen.contains(&losses), "row {row} repeats another row");
        seen.push(losses);
    }
}

#[test]
fn end_to_end_files_are_deterministic_and_checked() {
    let run = |dir: &Path| {
        let ds = toy_data(dir);
        let pre = toy_config(dir, Stage::Pretrain);
        train_pretrain(&pre).unwrap();
        let dcc = toy_config(dir, Stage::Dcc);
        let out = train_dcc(&dcc).unwrap();
        let mut ev = dcc.clone();
        ev.stage = Stage::Eval;
        ev.checkpoint = Some(dir.join("dcc/best.ckpt"));
        ev.output = dir.join("eval");
        ev.eval_split = Split::Test;
        let (report, dump) = evaluate(&ev).unwrap();
        (ds, out, report, dump, ev)
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ds, out_a, rep_a, dump_a, ev) = run(a.path());
    let (_, _, rep_b, _, _) = run(b.path());
    assert_eq!(rep_a, rep_b);
    for f in ["pre/best.ckpt", "dcc/best.ckpt", "eval/dcc_test.json", "eval/dcc_test.dump.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert!(a.path().join("dcc/config.resolved.toml").exists());
    assert!(a.path().join("dcc/history.csv").exists());

    // Re-evaluating the stored checkpoint on val reproduces its recorded metric.
    let ck = Checkpoint::load(&a.path().join("dcc/best.ckpt")).unwrap();
    let val = ds.load_split(Split::Val).unwrap();
    let hm = validation_hm(&ck.model, &val, &ds.prior, EvalMode::Dcc).unwrap();
    assert!((hm - ck.best_val_hm).abs() <= 0.01);
    assert_eq!(ck.best_val_hm, out_a.best.best_val_hm);

    // Consensus masks equal oracle masks wherever the class is right.
    let oracle = infer(&ck.model, &ds.load_split(Split::Test).unwrap(), &ds.prior, EvalMode::Oracle).unwrap();
    for (d, o) in dump_a.records.iter().zip(&oracle) {
        if d.pred_object == d.gt_object {
            assert_eq!(d.pred_mask, o.pred_mask);
        }
    }
    assert_eq!(rep_a.mode, "dcc");

    // A second evaluation into the same directory is identical.
    let (again, _) = evaluate(&ev).unwrap();
    assert_eq!(again, rep_a);

    // Another dataset is rejected.
    let other = tempfile::tempdir().unwrap();
    let mut m = toy_manifest();
    m.parts[0] = "lid".into();
    for o in &mut m.objects {
        for p in &mut o.placements {
            if p.template.part == "top" {
                p.template.part = "lid".into();
            }
        }
    }
    generate_benchmark(&m, other.path()).unwrap();
    let mut wrong = ev.clone();
    wrong.dataset = other.path().to_path_buf();
    wrong.output = other.path().join("eval");
    assert!(matches!(evaluate(&wrong), Err(Error::Compatibility(_))));
}

#[test]
fn output_dir_refuses_foreign_config() {
    let d = tempfile::tempdir().unwrap();
    toy_data(d.path());
    let mut cfg = toy_config(d.path(), Stage::Pretrain);
    cfg.epochs = 1;
    train_pretrain(&cfg).unwrap();
    cfg.seed += 1;
    assert!(matches!(train_pretrain(&cfg), Err(Error::Config(_))));
}
