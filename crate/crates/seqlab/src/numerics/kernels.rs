//! Shared dense math kernels on flat `f64` slices.
//!
//! Both the autodiff tape and the raw (cache-based) inference path call
//! these, so incremental decoding reproduces teacher-forced activations
//! bit for bit: same loops, same summation order.

/// c[m,n] += a[m,k] @ b[k,n]
pub fn mm_nn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,n] = a[m,k] @ b[k,n]
pub fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// c[m,k] += a[m,n] @ b[k,n]^T  (b transposed)
pub fn mm_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            c[i * k + p] += s;
        }
    }
}

/// c[k,n] += a[m,k]^T @ b[m,n]  (a transposed)
pub fn mm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// In-place log-softmax of one contiguous lane, max-subtracted for stability.
pub fn log_softmax_lane(lane: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for &v in lane.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0.0;
    for &v in lane.iter() {
        sum += (v - mx).exp();
    }
    let lse = mx + sum.ln();
    for v in lane.iter_mut() {
        *v -= lse;
    }
}

/// In-place softmax of one contiguous lane, max-subtracted for stability.
pub fn softmax_lane(lane: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for &v in lane.iter() {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0.0;
    for v in lane.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in lane.iter_mut() {
        *v /= sum;
    }
}

/// Applies `f` to every lane along `axis` of a tensor with `shape`.
/// Lanes along the last axis are contiguous; other axes are gathered
/// into a scratch buffer, transformed, and scattered back.
pub fn for_each_lane(data: &mut [f64], shape: &[usize], axis: usize, f: impl Fn(&mut [f64])) {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    if inner == 1 {
        for o in 0..outer {
            f(&mut data[o * lane..(o + 1) * lane]);
        }
        return;
    }
    let mut scratch = vec![0.0; lane];
    for o in 0..outer {
        let base = o * lane * inner;
        for i in 0..inner {
            for l in 0..lane {
                scratch[l] = data[base + l * inner + i];
            }
            f(&mut scratch);
            for l in 0..lane {
                data[base + l * inner + i] = scratch[l];
            }
        }
    }
}

/// Lane-wise backward walker: calls `f(y_lane, dy_lane, dx_lane)` for
/// every lane along `axis`, where `f` writes the input-gradient lane.
pub fn backprop_lanes(
    y: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    shape: &[usize],
    axis: usize,
    f: impl Fn(&[f64], &[f64], &mut [f64]),
) {
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    if inner == 1 {
        for o in 0..outer {
            let r = o * lane..(o + 1) * lane;
            f(&y[r.clone()], &dy[r.clone()], &mut dx[r]);
        }
        return;
    }
    let mut yb = vec![0.0; lane];
    let mut db = vec![0.0; lane];
    let mut xb = vec![0.0; lane];
    for o in 0..outer {
        let base = o * lane * inner;
        for i in 0..inner {
            for l in 0..lane {
                yb[l] = y[base + l * inner + i];
                db[l] = dy[base + l * inner + i];
            }
            f(&yb, &db, &mut xb);
            for l in 0..lane {
                dx[base + l * inner + i] = xb[l];
            }
        }
    }
}

/// Normalizes one lane in place; returns (mean, reciprocal std).
pub fn layer_norm_lane(lane: &mut [f64], eps: f64) -> (f64, f64) {
    let n = lane.len() as f64;
    let mean = lane.iter().sum::<f64>() / n;
    let mut var = 0.0;
    for &v in lane.iter() {
        let d = v - mean;
        var += d * d;
    }
    var /= n;
    let rstd = 1.0 / (var + eps).sqrt();
    for v in lane.iter_mut() {
        *v = (*v - mean) * rstd;
    }
    (mean, rstd)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Stable log-sum-exp of a slice. Empty input returns -inf.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for &v in xs.iter() {
        if v > mx {
            mx = v;
        }
    }
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut sum = 0.0;
    for &v in xs.iter() {
        sum += (v - mx).exp();
    }
    mx + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let c = mm_nn(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 2, 2, 1);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn transposed_kernels_agree_with_explicit_transpose() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // 2x3
        let b = [2.0, 1.0, 0.0, -1.0, 1.5, 2.5]; // 2x3
                                                 // a^T(3x2) @ b(2x3) -> 3x3
        let mut c = vec![0.0; 9];
        mm_tn_acc(&mut c, &a, &b, 2, 3, 3);
        let at = [1.0, 3.0, -2.0, 4.0, 0.5, -1.0];
        let want = mm_nn(&at, &b, 3, 2, 3);
        assert_eq!(c, want);
        // a(2x3) @ b^T(3x2) -> 2x2
        let mut d = vec![0.0; 4];
        mm_nt_acc(&mut d, &a, &b, 2, 3, 2);
        let bt = [2.0, -1.0, 1.0, 1.5, 0.0, 2.5];
        let want = mm_nn(&a, &bt, 2, 3, 2);
        assert_eq!(d, want);
    }

    #[test]
    fn log_softmax_uniform_and_extreme() {
        let mut lane = [0.0; 4];
        log_softmax_lane(&mut lane);
        for v in lane {
            assert!((v - (-(4.0f64).ln())).abs() < 1e-15);
        }
        let mut lane = [1000.0, 0.0];
        log_softmax_lane(&mut lane);
        assert!(lane[0].abs() < 1e-12);
        assert!((lane[1] + 1000.0).abs() < 1e-9);
        assert!(lane.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn lane_walker_handles_non_last_axis() {
        // shape [2,3], axis 0: columns are lanes
        let mut d = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        for_each_lane(&mut d, &[2, 3], 0, |lane| {
            let s: f64 = lane.iter().sum();
            for v in lane.iter_mut() {
                *v = s;
            }
        });
        assert_eq!(d, vec![5.0, 7.0, 9.0, 5.0, 7.0, 9.0]);
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.2, 1.5, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}: {} vs {}", gelu_grad(x), fd);
        }
    }

    #[test]
    fn lse_matches_naive_on_moderate_values() {
        let xs = [0.3, -1.2, 2.0];
        let naive = (xs.iter().map(|v: &f64| v.exp()).sum::<f64>()).ln();
        assert!((log_sum_exp(&xs) - naive).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }
}
