//! HSIC, linear CKA, transposed CKA and the sliced Wasserstein distance,
//! as plain functions and as differentiable tape nodes.

use ndarray::{Array2, Axis};

use crate::autodiff::{Tape, Var};
use crate::error::{FlipError, Result};
use crate::rng::{sample_normal, stream};

/// Mean as offset from the first element, exact for constant input.
fn shifted_mean<'a>(xs: impl Iterator<Item = &'a f64>) -> f64 {
    let mut first = None;
    let mut acc = 0.0;
    let mut n = 0usize;
    for &x in xs {
        let x0 = *first.get_or_insert(x);
        acc += x - x0;
        n += 1;
    }
    first.unwrap_or(0.0) + acc / n.max(1) as f64
}

/// `H M H` computed by subtracting row and column means.
fn double_center(m: &Array2<f64>) -> Array2<f64> {
    let rows: Vec<f64> = m.rows().into_iter().map(|r| shifted_mean(r.iter())).collect();
    let cols: Vec<f64> = m.columns().into_iter().map(|c| shifted_mean(c.iter())).collect();
    let grand = shifted_mean(rows.iter());
    Array2::from_shape_fn(m.dim(), |(i, j)| m[[i, j]] - rows[i] - cols[j] + grand)
}

/// `tr(K H L H) / (n - 1)^2` with the centering matrix `H`.
pub fn hsic(k: &Array2<f64>, l: &Array2<f64>) -> Result<f64> {
    let n = k.nrows();
    if k.dim() != (n, n) || l.dim() != (n, n) {
        return Err(FlipError::Shape("kernel matrices must be square and equal in size".into()));
    }
    if n < 2 {
        return Err(FlipError::InvalidArgument("hsic needs at least two samples".into()));
    }
    let symmetric = |m: &Array2<f64>| {
        let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        (0..n).all(|i| (0..i).all(|j| (m[[i, j]] - m[[j, i]]).abs() <= 1e-12 * scale))
    };
    if !symmetric(k) || !symmetric(l) {
        return Err(FlipError::InvalidArgument("kernel matrices must be symmetric".into()));
    }
    // H is idempotent, so tr(K H L H) = tr((H K H)(H L H))
    let kc = double_center(k);
    let lc = double_center(l);
    let tr: f64 = kc.iter().zip(lc.t().iter()).map(|(a, b)| a * b).sum();
    Ok(tr / ((n - 1) * (n - 1)) as f64)
}

fn center_columns(a: &Array2<f64>) -> Array2<f64> {
    let mean = a.mean_axis(Axis(0)).expect("nonempty");
    a - &mean
}

fn frobenius_sq(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

/// Linear CKA `|A^T B|_F^2 / (|A^T A|_F |B^T B|_F)` of column-centered
/// inputs with rows as samples.
pub fn cka_linear(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.nrows() != b.nrows() {
        return Err(FlipError::Shape(format!("{} vs {} samples", a.nrows(), b.nrows())));
    }
    if a.nrows() == 0 {
        return Err(FlipError::InvalidArgument("no samples".into()));
    }
    let a = center_columns(a);
    let b = center_columns(b);
    let den = frobenius_sq(&a.t().dot(&a)).sqrt() * frobenius_sq(&b.t().dot(&b)).sqrt();
    if den == 0.0 {
        return Err(FlipError::Degenerate("degenerate representation".into()));
    }
    Ok(frobenius_sq(&a.t().dot(&b)) / den)
}

/// Transposed CKA `<C_A, C_B>_F / (|C_A|_F |C_B|_F)` of the `p x p`
/// activation covariances `C = A^T A` of each group, with every activation
/// centered over the group's records. The groups may differ in size.
pub fn cka_transposed(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.ncols() != b.ncols() {
        return Err(FlipError::Shape(format!("activation widths {} and {}", a.ncols(), b.ncols())));
    }
    if a.ncols() < 2 {
        return Err(FlipError::InvalidArgument("transposed CKA needs at least two activations".into()));
    }
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(FlipError::InvalidArgument("no samples".into()));
    }
    let a = center_columns(a);
    let b = center_columns(b);
    let ca = a.t().dot(&a);
    let cb = b.t().dot(&b);
    let den = frobenius_sq(&ca).sqrt() * frobenius_sq(&cb).sqrt();
    if den == 0.0 {
        return Err(FlipError::Degenerate("degenerate representation".into()));
    }
    Ok((&ca * &cb).sum() / den)
}

/// Differentiable [`cka_transposed`]. `Ok(None)` when a centered
/// representation vanishes.
pub fn cka_transposed_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Option<Var>> {
    let (pa, pb) = (tape.shape(a).1, tape.shape(b).1);
    if pa != pb {
        return Err(FlipError::Shape(format!("activation widths {pa} and {pb}")));
    }
    if pa < 2 {
        return Err(FlipError::InvalidArgument("transposed CKA needs at least two activations".into()));
    }
    let gram = |tape: &mut Tape, m: Var| {
        let x = tape.center_cols(m);
        let xt = tape.transpose(x);
        tape.matmul(xt, x)
    };
    let ga = gram(tape, a);
    let gb = gram(tape, b);
    let na = tape.sum_sq(ga);
    let nb = tape.sum_sq(gb);
    if tape.scalar(na) == 0.0 || tape.scalar(nb) == 0.0 {
        return Ok(None);
    }
    let prod = tape.mul(ga, gb);
    let num = tape.sum(prod);
    let sa = tape.sqrt(na);
    let sb = tape.sqrt(nb);
    let den = tape.mul(sa, sb);
    Ok(Some(tape.div_scalar(num, den)))
}

/// `n` unit directions in `d` dimensions drawn from `seed`.
pub fn projection_directions(d: usize, n: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream(seed);
    let mut dirs = Array2::zeros((n, d));
    for mut row in dirs.rows_mut() {
        loop {
            row.mapv_inplace(|_| sample_normal(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row /= norm;
                break;
            }
        }
    }
    dirs
}

/// W1 between two 1-D empirical distributions and its derivative with
/// respect to every sample. The quantile functions are step functions, so
/// the integral is exact over the merged breakpoints `i/n` and `j/m`.
pub fn wasserstein_1d(p: &[f64], q: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (n, m) = (p.len(), q.len());
    let mut ip: Vec<usize> = (0..n).collect();
    let mut iq: Vec<usize> = (0..m).collect();
    ip.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    iq.sort_by(|&a, &b| q[a].total_cmp(&q[b]));
    let mut gp = vec![0.0; n];
    let mut gq = vec![0.0; m];
    let mut total = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0f64;
    while i < n && j < m {
        // next breakpoint in exact rational order: (i+1)/n vs (j+1)/m
        let (ni, nj) = ((i + 1) * m, (j + 1) * n);
        let next = if ni <= nj { (i + 1) as f64 / n as f64 } else { (j + 1) as f64 / m as f64 };
        let w = next - u;
        let diff = p[ip[i]] - q[iq[j]];
        total += w * diff.abs();
        let s = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        gp[ip[i]] += w * s;
        gq[iq[j]] -= w * s;
        u = next;
        match ni.cmp(&nj) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    (total, gp, gq)
}

fn swd_with_grads(p: &Array2<f64>, q: &Array2<f64>, dirs: &Array2<f64>) -> (f64, Array2<f64>, Array2<f64>) {
    let pp = p.dot(&dirs.t());
    let qq = q.dot(&dirs.t());
    let k = dirs.nrows() as f64;
    let mut total = 0.0;
    let mut gp = Array2::zeros(p.dim());
    let mut gq = Array2::zeros(q.dim());
    for (t, dir) in dirs.rows().into_iter().enumerate() {
        let (w, dp, dq) = wasserstein_1d(&pp.column(t).to_vec(), &qq.column(t).to_vec());
        total += w / k;
        for (i, g) in dp.iter().enumerate() {
            if *g != 0.0 {
                gp.row_mut(i).scaled_add(g / k, &dir);
            }
        }
        for (i, g) in dq.iter().enumerate() {
            if *g != 0.0 {
                gq.row_mut(i).scaled_add(g / k, &dir);
            }
        }
    }
    (total, gp, gq)
}

/// Mean W1 of the projections of `p` and `q` on `n_proj` random unit
/// directions.
pub fn sliced_wasserstein(p: &Array2<f64>, q: &Array2<f64>, n_proj: usize, seed: u64) -> Result<f64> {
    check_swd(p.dim(), q.dim(), n_proj)?;
    let dirs = projection_directions(p.ncols(), n_proj, seed);
    Ok(swd_with_grads(p, q, &dirs).0)
}

fn check_swd(p: (usize, usize), q: (usize, usize), n_proj: usize) -> Result<()> {
    if p.1 != q.1 {
        return Err(FlipError::Shape(format!("sample dimensions {} and {}", p.1, q.1)));
    }
    if p.0 == 0 || q.0 == 0 {
        return Err(FlipError::InvalidArgument("empty sample set".into()));
    }
    if n_proj == 0 {
        return Err(FlipError::InvalidArgument("at least one projection required".into()));
    }
    Ok(())
}

/// Differentiable sliced Wasserstein distance on fixed directions.
pub fn sliced_wasserstein_tape(tape: &mut Tape, p: Var, q: Var, dirs: &Array2<f64>) -> Result<Var> {
    check_swd(tape.shape(p), tape.shape(q), dirs.nrows())?;
    if dirs.ncols() != tape.shape(p).1 {
        return Err(FlipError::Shape("direction width differs from samples".into()));
    }
    let (v, gp, gq) = swd_with_grads(tape.value(p), tape.value(q), dirs);
    Ok(tape.fused_scalar(v, vec![(p, gp), (q, gq)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_error;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_mat(r: usize, c: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed);
        Array2::from_shape_fn((r, c), |_| rng.random_range(-2.0..2.0))
    }

    /// Orthogonal matrix from Gram-Schmidt on a random square matrix.
    pub(crate) fn random_orthogonal(p: usize, seed: u64) -> Array2<f64> {
        let m = rand_mat(p, p, seed);
        let mut q = Array2::<f64>::zeros((p, p));
        for j in 0..p {
            let mut v = m.column(j).to_owned();
            for k in 0..j {
                let proj = v.dot(&q.column(k));
                v.scaled_add(-proj, &q.column(k));
            }
            let norm = v.dot(&v).sqrt();
            q.column_mut(j).assign(&(v / norm));
        }
        q
    }

    #[test]
    fn hsic_two_by_two() {
        // explicit product with H = [[.5, -.5], [-.5, .5]]; tr(I H I H) = tr(H) = 1
        let id = Array2::<f64>::eye(2);
        let h = array![[0.5, -0.5], [-0.5, 0.5]];
        let expected = id.dot(&h).dot(&id).dot(&h).diag().sum();
        assert_eq!(expected, 1.0);
        assert!((hsic(&id, &id).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn hsic_with_constant_kernel_vanishes() {
        let a = rand_mat(5, 3, 1);
        let k = a.dot(&a.t());
        for c in [2.5, 0.1, -7.3e5] {
            let c = Array2::from_elem((5, 5), c);
            assert_eq!(hsic(&k, &c).unwrap(), 0.0);
            assert_eq!(hsic(&c, &k).unwrap(), 0.0);
        }
    }

    #[test]
    fn hsic_symmetric_and_nonnegative_on_psd() {
        for s in 0..20 {
            let a = rand_mat(6, 4, s);
            let b = rand_mat(6, 2, s + 100);
            let k = a.dot(&a.t());
            let l = b.dot(&b.t());
            assert!(hsic(&k, &k).unwrap() >= 0.0);
            assert!((hsic(&k, &l).unwrap() - hsic(&l, &k).unwrap()).abs() < 1e-10);
            let h = Array2::from_shape_fn((6, 6), |(i, j)| f64::from(u8::from(i == j)) - 1.0 / 6.0);
            let explicit = k.dot(&h).dot(&l).dot(&h).diag().sum() / 25.0;
            assert!((hsic(&k, &l).unwrap() - explicit).abs() < 1e-10 * explicit.abs().max(1.0));
        }
    }

    #[test]
    fn hsic_rejects_bad_input() {
        assert!(hsic(&array![[1.0]], &array![[1.0]]).is_err());
        assert!(hsic(&array![[1.0, 2.0], [0.0, 1.0]], &Array2::eye(2)).is_err());
    }

    #[test]
    fn cka_identities() {
        let a = rand_mat(10, 4, 3);
        assert!((cka_linear(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        // centered columns with A^T B = 0
        let a = array![[1.0], [-1.0], [1.0], [-1.0]];
        let b = array![[1.0], [1.0], [-1.0], [-1.0]];
        assert!(cka_linear(&a, &b).unwrap().abs() < 1e-15);
        assert!(cka_linear(&Array2::from_elem((3, 2), 4.0), &rand_mat(3, 2, 1)).is_err());
    }

    #[test]
    fn cka_invariances() {
        for s in 0..20 {
            let a = rand_mat(12, 5, s);
            let b = rand_mat(12, 3, s + 50);
            let r = random_orthogonal(5, s + 7);
            assert!((cka_linear(&a, &a.dot(&r)).unwrap() - 1.0).abs() < 1e-10);
            let base = cka_linear(&a, &b).unwrap();
            assert!((cka_linear(&(&a * -3.7), &b).unwrap() - base).abs() < 1e-10);
            assert!((cka_linear(&b, &a).unwrap() - base).abs() < 1e-12);
            assert!((0.0..=1.0 + 1e-12).contains(&base));
        }
    }

    #[test]
    fn transposed_cka_cases() {
        let a = rand_mat(6, 4, 9);
        assert!((cka_transposed(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let doubled = ndarray::concatenate![Axis(0), a, a];
        assert!((cka_transposed(&a, &doubled).unwrap() - 1.0).abs() < 1e-12);
        // covariances ignore a per-group offset
        let shifted = &a + &array![[3.0, -1.0, 0.5, 2.0]];
        assert!((cka_transposed(&a, &shifted).unwrap() - 1.0).abs() < 1e-12);
        assert!(cka_transposed(&a, &rand_mat(6, 3, 1)).is_err());
        assert!(cka_transposed(&rand_mat(6, 1, 1), &rand_mat(6, 1, 2)).is_err());
    }

    #[test]
    fn transposed_cka_of_orthogonal_patterns() {
        // group A varies only along activations (1,-1,0,0), group B only
        // along (0,0,1,-1); the centered Gram matrices are orthogonal
        let u = [1.0, -1.0, 0.0, 0.0];
        let v = [0.0, 0.0, 1.0, -1.0];
        let a = Array2::from_shape_fn((5, 4), |(i, j)| (i as f64 - 2.0) * u[j]);
        let b = Array2::from_shape_fn((7, 4), |(i, j)| (i as f64 * 0.5 + 1.0) * v[j]);
        assert!(cka_transposed(&a, &b).unwrap() < 1e-12);
    }

    #[test]
    fn transposed_cka_tape_matches_and_differentiates() {
        let a = rand_mat(5, 4, 11);
        let b = rand_mat(3, 4, 12);
        let mut t = Tape::new();
        let av = t.constant(a.clone());
        let bv = t.constant(b.clone());
        let c = cka_transposed_tape(&mut t, av, bv).unwrap().unwrap();
        assert!((t.scalar(c) - cka_transposed(&a, &b).unwrap()).abs() < 1e-12);
        let err = max_rel_error(&[a, b], |t, v| cka_transposed_tape(t, v[0], v[1]).unwrap().unwrap());
        assert!(err < 1e-6, "{err}");
        let mut t = Tape::new();
        let z = t.constant(Array2::from_elem((3, 4), 1.0));
        let r = t.constant(rand_mat(2, 4, 3));
        assert!(cka_transposed_tape(&mut t, z, r).unwrap().is_none());
    }

    #[test]
    fn swd_identity_and_point_masses() {
        let p = rand_mat(20, 3, 4);
        assert_eq!(sliced_wasserstein(&p, &p, 16, 1).unwrap(), 0.0);
        let v = sliced_wasserstein(&array![[0.0]], &array![[3.0]], 7, 2).unwrap();
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_matches_sorted_pairs() {
        let p = rand_mat(50, 1, 5);
        let q = rand_mat(50, 1, 6);
        let mut a: Vec<f64> = p.column(0).to_vec();
        let mut b: Vec<f64> = q.column(0).to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let oracle = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 50.0;
        assert!((sliced_wasserstein(&p, &q, 5, 3).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn unequal_sizes_use_quantile_functions() {
        // P = {0, 1}, Q = {0, 0.5, 1}: quantile gaps on [1/3, 1/2) and [1/2, 2/3)
        let (w, _, _) = wasserstein_1d(&[0.0, 1.0], &[0.0, 0.5, 1.0]);
        assert!((w - (0.5 / 6.0 + 0.5 / 6.0)).abs() < 1e-15);
    }

    #[test]
    fn shifted_plane_matches_expected_cosine() {
        let p = rand_mat(400, 2, 8);
        let t = 1.5;
        let q = &p + &array![[t, 0.0]];
        let v = sliced_wasserstein(&p, &q, 2000, 4).unwrap();
        let expected = t * 2.0 / std::f64::consts::PI;
        assert!((v / expected - 1.0).abs() < 0.05, "{v} vs {expected}");
    }

    #[test]
    fn swd_gradient_matches_differences() {
        let p = rand_mat(6, 3, 21);
        let q = rand_mat(4, 3, 22);
        let dirs = projection_directions(3, 8, 5);
        let err = max_rel_error(&[p, q], |t, v| sliced_wasserstein_tape(t, v[0], v[1], &dirs).unwrap());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn swd_errors() {
        assert!(sliced_wasserstein(&rand_mat(3, 2, 1), &rand_mat(3, 3, 1), 4, 0).is_err());
        assert!(sliced_wasserstein(&rand_mat(3, 2, 1), &rand_mat(3, 2, 1), 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn swd_triangle_inequality(seed in 0u64..1000, n in 1usize..12, m in 1usize..12, k in 1usize..12) {
            let p = rand_mat(n, 2, seed);
            let q = rand_mat(m, 2, seed + 1);
            let r = rand_mat(k, 2, seed + 2);
            let d = |a: &Array2<f64>, b: &Array2<f64>| sliced_wasserstein(a, b, 10, seed).unwrap();
            prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-12);
            prop_assert!(d(&p, &q) >= 0.0);
        }
    }
}
