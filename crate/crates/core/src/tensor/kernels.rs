/// `C (+)= op(A) * op(B)` for row-major buffers, where `op(A)` is `m x k` and
/// `op(B)` is `k x n`. A transposed operand is stored in its untransposed
/// row-major layout (`k x m` or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe exactly the m*k, k*n and m*n buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `exp(beta * v_i) / sum_j exp(beta * v_j)`, shifted by the maximum so that
/// large inputs never overflow. Entries equal to `-inf` get probability zero.
pub fn softmax(v: &[f64], beta: f64) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![f64::NAN; v.len()];
    }
    let mut out: Vec<f64> = v.iter().map(|&x| (beta * (x - max)).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= z);
    out
}

pub fn log_softmax(v: &[f64], beta: f64) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![f64::NAN; v.len()];
    }
    let lse = v.iter().map(|&x| (beta * (x - max)).exp()).sum::<f64>().ln();
    v.iter().map(|&x| beta * (x - max) - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_inputs_give_uniform() {
        for beta in [0.1, 1.0, 7.0] {
            let p = softmax(&[2.5, 2.5, 2.5], beta);
            for x in p {
                assert!((x - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ln3_gives_quarter_three_quarters() {
        let p = softmax(&[0.0, 3f64.ln()], 1.0);
        assert!((p[0] - 0.25).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn large_beta_is_argmax() {
        let p = softmax(&[0.3, 1.2, -4.0, 1.1], 1e6);
        assert!((p[1] - 1.0).abs() < 1e-9);
        assert!(p[0] < 1e-9 && p[2] < 1e-9 && p[3] < 1e-9);
    }

    #[test]
    fn no_overflow_on_huge_inputs() {
        let p = softmax(&[1e300, 1e300 - 1e290, 0.0], 1.0);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn neg_inf_entries_are_zero() {
        let p = softmax(&[f64::NEG_INFINITY, 0.0], 1.0);
        assert_eq!(p, vec![0.0, 1.0]);
    }

    #[test]
    fn transposed_gemm() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }
}
