//! Block-sparse Cholesky factorization of the damped normal equations.
//!
//! The Hessian of a windowed bundle-adjustment or pose-graph problem is
//! block-sparse: landmark blocks touch only the handful of poses observing
//! them. Eliminating low-degree blocks first keeps fill-in confined to the
//! small pose-pose corner — the classic Schur-complement structure — so a
//! right-looking block LLᵀ with a static minimum-degree-style ordering is
//! both simple and fast at the window sizes this crate works with.
//!
//! Blocks are small (3–7), so every elementary operation is a dense
//! nalgebra product or triangular solve; sparsity lives purely in the
//! block-index bookkeeping.

use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

/// Solves `(H + μI)·δ = −g` given the lower-triangle Hessian blocks keyed
/// by `(row_block, col_block)` with `row ≥ col`. Returns `None` when the
/// damped matrix is still not positive definite, in which case the caller
/// increases μ.
pub fn solve_block_cholesky(
    hessian: &BTreeMap<(usize, usize), DMatrix<f64>>,
    dims: &[usize],
    offsets: &[usize],
    gradient: &DVector<f64>,
    mu: f64,
) -> Option<DVector<f64>> {
    let nb = dims.len();
    if nb == 0 {
        return Some(DVector::zeros(0));
    }

    // Static fill-reducing ordering: eliminate blocks with few neighbours
    // first (landmarks before poses), ties broken by index for determinism.
    let mut degree = vec![0usize; nb];
    for &(i, j) in hessian.keys() {
        if i != j {
            degree[i] += 1;
            degree[j] += 1;
        }
    }
    let mut order: Vec<usize> = (0..nb).collect();
    order.sort_by_key(|&b| (degree[b], b));
    let mut pos = vec![0usize; nb];
    for (p, &b) in order.iter().enumerate() {
        pos[b] = p;
    }
    let edim = |p: usize| dims[order[p]];

    // Working columns in elimination coordinates; col[p] maps row q ≥ p to
    // the (edim(q) × edim(p)) block.
    let mut cols: Vec<BTreeMap<usize, DMatrix<f64>>> = vec![BTreeMap::new(); nb];
    for (&(i, j), m) in hessian {
        let (pi, pj) = (pos[i], pos[j]);
        if pi >= pj {
            cols[pj].insert(pi, m.clone());
        } else {
            cols[pi].insert(pj, m.transpose());
        }
    }
    for (p, col) in cols.iter_mut().enumerate() {
        let d = edim(p);
        let diag = col
            .entry(p)
            .or_insert_with(|| DMatrix::zeros(d, d));
        for k in 0..d {
            diag[(k, k)] += mu;
        }
    }

    // Right-looking block factorization: H = L·Lᵀ.
    let mut factor_diag: Vec<DMatrix<f64>> = Vec::with_capacity(nb);
    let mut factor_cols: Vec<Vec<(usize, DMatrix<f64>)>> = Vec::with_capacity(nb);
    for k in 0..nb {
        let mut col = std::mem::take(&mut cols[k]);
        let akk = col.remove(&k).expect("diagonal block present");
        let l_kk = nalgebra::Cholesky::new(akk)?.unpack();

        // L_ik = A_ik·L_kkᵀ⁻¹, computed as (L_kk⁻¹·A_ikᵀ)ᵀ.
        let mut sub: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(col.len());
        for (i, a_ik) in col {
            let x = l_kk.solve_lower_triangular(&a_ik.transpose())?;
            sub.push((i, x.transpose()));
        }

        // Trailing update: A_ij ← A_ij − L_ik·L_jkᵀ for i ≥ j > k.
        for (jj, (j, l_jk)) in sub.iter().enumerate() {
            for (i, l_ik) in &sub[jj..] {
                let update = l_ik * l_jk.transpose();
                cols[*j]
                    .entry(*i)
                    .and_modify(|m| *m -= &update)
                    .or_insert_with(|| -update.clone());
            }
        }

        factor_diag.push(l_kk);
        factor_cols.push(sub);
    }

    // Right-hand side −g, permuted into elimination order.
    let mut y: Vec<DVector<f64>> = order
        .iter()
        .map(|&b| -gradient.rows(offsets[b], dims[b]).clone_owned())
        .collect();

    // Forward substitution L·y = rhs (column-oriented).
    for k in 0..nb {
        let yk = factor_diag[k].solve_lower_triangular(&y[k])?;
        y[k] = yk;
        for (i, l_ik) in &factor_cols[k] {
            let update = l_ik * &y[k];
            y[*i] -= update;
        }
    }

    // Backward substitution Lᵀ·x = y.
    let mut x: Vec<DVector<f64>> = vec![DVector::zeros(0); nb];
    for k in (0..nb).rev() {
        let mut rhs = y[k].clone();
        for (i, l_ik) in &factor_cols[k] {
            rhs -= l_ik.transpose() * &x[*i];
        }
        x[k] = factor_diag[k]
            .transpose()
            .solve_upper_triangular(&rhs)?;
    }

    // Un-permute into the stacked tangent vector.
    let total: usize = dims.iter().sum();
    let mut delta = DVector::zeros(total);
    for b in 0..nb {
        delta.rows_mut(offsets[b], dims[b]).copy_from(&x[pos[b]]);
    }
    Some(delta)
}
