use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Value written into masked-out log-softmax entries. Never enters a max or
/// a sum downstream.
pub const MASKED_OUT: f64 = f64::MIN;

/// `c = a · b + beta · c` for row-major operands addressed by strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, i) = x.expect_matrix("matmul")?;
    let (wi, o) = w.expect_matrix("matmul")?;
    if i != wi {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; b * o];
    gemm(
        b,
        i,
        o,
        x.data(),
        (i as isize, 1),
        w.data(),
        (o as isize, 1),
        0.0,
        &mut out,
    );
    Tensor::new(vec![b, o], out)
}

/// `out[b, o] = Σ_i x[b, i] · weight[i, o] + bias[o]`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, o) = weight.expect_matrix("linear")?;
    if bias.shape() != [o] {
        return Err(Error::Dimension {
            op: "linear",
            lhs: weight.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    if x.shape().len() != 2 || x.shape()[1] != weight.shape()[0] {
        return Err(Error::Dimension {
            op: "linear",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    let mut out = matmul(x, weight)?;
    add_row_broadcast_in_place(&mut out, bias.data());
    Ok(out)
}

pub(crate) fn add_row_broadcast_in_place(x: &mut Tensor, v: &[f64]) {
    let c = v.len();
    for row in x.data_mut().chunks_exact_mut(c) {
        for (a, b) in row.iter_mut().zip(v) {
            *a += b;
        }
    }
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Tensor {
        shape: x.shape().to_vec(),
        data,
    }
}

/// Inverted dropout. Returns the output and, in training mode, the per-element
/// multiplier (0 or `1 / (1 - rate)`) that was applied.
pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
    Ok((
        Tensor {
            shape: x.shape().to_vec(),
            data,
        },
        Some(scale),
    ))
}

/// Row-wise log-softmax over the last dimension, restricted to the entries
/// where `mask` is true. `None` means every entry is kept and runs the exact
/// same arithmetic as an all-true mask.
pub fn masked_log_softmax(logits: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let k = logits.cols();
    if let Some(m) = mask {
        if m.len() != k {
            return Err(Error::Dimension {
                op: "masked_log_softmax",
                lhs: logits.shape().to_vec(),
                rhs: vec![m.len()],
            });
        }
        if !m.iter().any(|&b| b) {
            return Err(Error::InvalidPrior);
        }
    }
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let mut out = vec![MASKED_OUT; logits.len()];
    for (row, dst) in logits.data().chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                sum += (v - max).exp();
            }
        }
        let log_sum = sum.ln();
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                dst[j] = (v - max) - log_sum;
            }
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Column-wise max over rows. Ties go to the lowest row index.
pub fn max_pool_rows(features: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, m) = features.expect_matrix("max_pool_rows")?;
    if n == 0 {
        return Err(Error::EmptySet("max_pool_rows"));
    }
    let mut pooled = features.row(0).to_vec();
    let mut argmax = vec![0usize; m];
    for r in 1..n {
        for (c, &v) in features.row(r).iter().enumerate() {
            if v > pooled[c] {
                pooled[c] = v;
                argmax[c] = r;
            }
        }
    }
    Ok((Tensor::vector(pooled), argmax))
}

/// Column-wise max over each group of rows: row `k` of the output pools the
/// rows listed in `groups[k]`. Also returns the winning row per output entry.
pub fn segment_max_pool(features: &Tensor, groups: &[Vec<usize>]) -> Result<(Tensor, Vec<usize>)> {
    let (n, m) = features.expect_matrix("segment_max_pool")?;
    let mut out = Vec::with_capacity(groups.len() * m);
    let mut argmax = Vec::with_capacity(groups.len() * m);
    for rows in groups {
        let Some((&first, rest)) = rows.split_first() else {
            return Err(Error::EmptySet("segment_max_pool"));
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row {bad} out of range for {n} rows")));
        }
        let start = out.len();
        out.extend_from_slice(features.row(first));
        argmax.extend(std::iter::repeat_n(first, m));
        for &r in rest {
            for (c, &v) in features.row(r).iter().enumerate() {
                if v > out[start + c] {
                    out[start + c] = v;
                    argmax[start + c] = r;
                }
            }
        }
    }
    Ok((Tensor::new(vec![groups.len(), m], out)?, argmax))
}

pub(crate) fn check_targets(
    logits: &Tensor,
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<()> {
    let (b, k) = logits.expect_matrix("cross_entropy")?;
    if targets.len() != b {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    for (row, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::InconsistentLabel { row, target: t });
        }
        if let Some(m) = mask {
            if !m.get(t).copied().unwrap_or(false) {
                return Err(Error::InconsistentLabel { row, target: t });
            }
        }
    }
    Ok(())
}

/// Mean over rows of `-log_softmax(logits)[target]`, optionally restricted to
/// a mask over the classes. Also returns the log-softmax it used.
pub(crate) fn cross_entropy_with_lsm(
    logits: &Tensor,
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<(Tensor, Tensor)> {
    check_targets(logits, targets, mask)?;
    let lsm = masked_log_softmax(logits, mask)?;
    let k = logits.cols();
    let mut total = 0.0;
    for (row, &t) in targets.iter().enumerate() {
        total += lsm.data()[row * k + t];
    }
    // `0.0 - total` keeps an exact zero positive.
    let loss = (0.0 - total) / targets.len() as f64;
    Ok((Tensor::scalar(loss), lsm))
}

pub fn cross_entropy_from_logits(
    logits: &Tensor,
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    cross_entropy_with_lsm(logits, targets, mask).map(|(loss, _)| loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let x = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let out = linear(&x, &Tensor::identity(2), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);

        let w = Tensor::from_rows(&[[0.3, -1.0], [2.0, 0.5]]).unwrap();
        let out = linear(&Tensor::zeros(&[3, 2]), &w, &Tensor::vector(vec![5.0, 7.0])).unwrap();
        assert_eq!(out.data(), &[5.0, 7.0, 5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn linear_matches_hand_product() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let w = Tensor::from_rows(&[[1.0, 0.0], [1.0, 1.0]]).unwrap();
        let out = linear(&x, &w, &Tensor::zeros(&[2])).unwrap();
        // [1*1+2*1, 1*0+2*1], [3*1+4*1, 3*0+4*1]
        assert_eq!(out.data(), &[3.0, 2.0, 7.0, 4.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[2, 4]);
        let err = linear(&x, &w, &Tensor::zeros(&[4])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn relu_values() {
        let out = relu(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::vector(vec![0.5, 3.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::vector(vec![1.0, -2.0, 3.0]);
        assert_eq!(dropout(&x, 0.5, &mut rng, false).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap().0, x);
        assert!(matches!(
            dropout(&x, 1.0, &mut rng, true),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::ones(&[10_000]);
        let (out, _) = dropout(&x, 0.5, &mut rng, true).unwrap();
        let survivors: Vec<f64> = out.data().iter().copied().filter(|&v| v != 0.0).collect();
        let frac = survivors.len() as f64 / 10_000.0;
        assert!((frac - 0.5).abs() <= 0.02, "fraction {frac}");
        assert!(survivors.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn log_softmax_cases() {
        let u = masked_log_softmax(&Tensor::vector(vec![0.7; 4]), None).unwrap();
        assert!(u.data().iter().all(|&v| close(v, -(4f64).ln(), 1e-12)));

        let one = masked_log_softmax(
            &Tensor::vector(vec![1.0, 9.0, -3.0]),
            Some(&[false, true, false]),
        )
        .unwrap();
        assert_eq!(one.data()[1], 0.0);

        let m = masked_log_softmax(
            &Tensor::vector(vec![1.0, 2.0, 3.0]),
            Some(&[true, false, true]),
        )
        .unwrap();
        // two-term log-sum-exp: log(e^1 + e^3) = 3 + log(1 + e^-2)
        let lse = 3.0 + (1.0 + (-2.0f64).exp()).ln();
        assert!(close(m.data()[0], 1.0 - lse, 1e-12));
        assert!(close(m.data()[0], -2.1269, 5e-5));
        assert_eq!(m.data()[1], MASKED_OUT);
        assert!(close(m.data()[2], -0.1269, 5e-5));

        assert!(matches!(
            masked_log_softmax(&Tensor::vector(vec![1.0, 2.0]), Some(&[false, false])),
            Err(Error::InvalidPrior)
        ));
    }

    #[test]
    fn all_true_mask_is_bitwise_unmasked() {
        let x = Tensor::from_rows(&[[0.1, -3.2, 7.7, 1e-3], [5.0, 5.0, -1.0, 2.5]]).unwrap();
        let a = masked_log_softmax(&x, None).unwrap();
        let b = masked_log_softmax(&x, Some(&[true; 4])).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn max_pool_cases() {
        let same = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let (p, a) = max_pool_rows(&same).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(a, vec![0, 0]);

        let (p, _) = max_pool_rows(&Tensor::from_rows(&[[4.0, -1.0]]).unwrap()).unwrap();
        assert_eq!(p.data(), &[4.0, -1.0]);

        let (p, a) = max_pool_rows(&Tensor::from_rows(&[[1.0, 5.0], [3.0, 2.0]]).unwrap()).unwrap();
        let x = Tensor::from_rows(&[[1.0, 5.0], [3.0, 2.0], [0.0, 9.0]]).unwrap();
        let (sp, sa) = segment_max_pool(&x, &[vec![0, 1], vec![2], vec![1, 2]]).unwrap();
        assert_eq!(sp.data(), &[3.0, 5.0, 0.0, 9.0, 3.0, 9.0]);
        assert_eq!(sa, vec![1, 0, 2, 2, 1, 2]);
        assert!(segment_max_pool(&x, &[vec![]]).is_err());
        assert_eq!(p.data(), &[3.0, 5.0]);
        assert_eq!(a, vec![1, 0]);
    }

    #[test]
    fn cross_entropy_cases() {
        let confident = Tensor::from_rows(&[[-50.0, 50.0, -50.0]]).unwrap();
        let l = cross_entropy_from_logits(&confident, &[1], None).unwrap();
        assert!(l.item() < 1e-12);

        let uniform = Tensor::from_rows(&[[0.3; 5], [0.3; 5]]).unwrap();
        let l = cross_entropy_from_logits(&uniform, &[0, 4], None).unwrap();
        assert!(close(l.item(), (5f64).ln(), 1e-12));

        let l = cross_entropy_from_logits(&Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap(), &[0], None)
            .unwrap();
        let oracle = -1.0 + (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!(close(l.item(), oracle, 1e-12));
        assert!(close(l.item(), 2.4076, 5e-5));

        let err = cross_entropy_from_logits(
            &Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap(),
            &[1],
            Some(&[true, false, true]),
        );
        assert!(matches!(err, Err(Error::InconsistentLabel { target: 1, .. })));
    }
}
