use dcc::partprior::{direct_segment, object_conditioned_segment, ObjectClass, ObjectPartPrior, SegmentationMask};
use dcc::tensor::{segment_max_pool, Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn prior() -> ObjectPartPrior {
    let class = |name: &str, parts: Vec<usize>, seen| ObjectClass {
        name: name.into(),
        parts,
        seen,
    };
    ObjectPartPrior::new(
        vec![
            class("a", vec![0, 2, 5], true),
            class("b", vec![1, 3, 4], true),
            class("c", vec![4], false),
            class("d", vec![0, 1, 3, 4], false),
        ],
        6,
        false,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn pooled_rows_are_columnwise_group_maxima(
        x in matrix(7, 4),
        labels in prop::collection::vec(0usize..3, 7),
    ) {
        let mask = SegmentationMask(labels);
        let (_, groups): (Vec<usize>, Vec<Vec<usize>>) = mask.groups().into_iter().unzip();
        let (pooled, _) = segment_max_pool(&x, &groups).unwrap();
        for (k, g) in groups.iter().enumerate() {
            for c in 0..4 {
                let m = g.iter().map(|&r| x.row(r)[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(pooled.row(k)[c], m);
            }
        }
    }

    #[test]
    fn pooling_ignores_point_order(
        x in matrix(6, 3),
        labels in prop::collection::vec(0usize..2, 6),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let mask = SegmentationMask(labels);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
        let shuffled = Tensor::new(vec![6, 3], rows.concat()).unwrap();
        let pool = |t: &Tensor, m: &SegmentationMask| {
            let groups: Vec<Vec<usize>> = m.groups().into_iter().map(|(_, g)| g).collect();
            segment_max_pool(t, &groups).unwrap().0
        };
        prop_assert_eq!(pool(&x, &mask), pool(&shuffled, &mask.permuted(&perm)));
    }

    #[test]
    fn conditioned_segment_stays_in_prior(logits in matrix(9, 6), object in 0usize..4) {
        let prior = prior();
        let mask = object_conditioned_segment(&logits, object, &prior).unwrap();
        let parts = prior.parts(object).unwrap();
        for (i, &p) in mask.ids().iter().enumerate() {
            prop_assert!(parts.contains(&p));
            for &q in parts {
                prop_assert!(logits.row(i)[p] >= logits.row(i)[q]);
            }
        }
    }

    #[test]
    fn full_vocabulary_prior_is_direct_argmax(logits in matrix(5, 6)) {
        let all = ObjectPartPrior::new(
            vec![ObjectClass { name: "all".into(), parts: (0..6).collect(), seen: true }],
            6,
            false,
        )
        .unwrap();
        prop_assert_eq!(object_conditioned_segment(&logits, 0, &all).unwrap(), direct_segment(&logits));
    }

    #[test]
    fn restricted_cross_entropy_is_nonnegative_and_bounded_by_full(
        logits in matrix(4, 6),
        picks in prop::collection::vec(0usize..3, 4),
    ) {
        let parts = [0usize, 2, 5];
        let targets: Vec<usize> = picks.iter().map(|&i| parts[i]).collect();
        let mask: Vec<bool> = (0..6).map(|p| parts.contains(&p)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(logits);
        let restricted = tape.cross_entropy(x, &targets, Some(&mask)).unwrap();
        let full = tape.cross_entropy(x, &targets, None).unwrap();
        let (r, f) = (tape.value(restricted).item(), tape.value(full).item());
        prop_assert!(r >= 0.0);
        prop_assert!(r <= f + 1e-12);
    }
}
