//! Sparse block Cholesky factorization.
//!
//! The matrix is symmetrically equilibrated, ordered by minimum degree on its
//! tile graph and factored right-looking with dense `bs × bs` blocks. All
//! arithmetic is serial, so factors are identical for any thread count.

use crate::assembly::NormalSystem;
use crate::error::{Error, Result};
use crate::sparse::{norm2, CsrMatrix};

use super::ordering::{block_graph, minimum_degree, Elimination};

/// Block lower-triangular factor `L` with `P·S·Ã·S·Pᵀ = L·Lᵀ`.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    bs: usize,
    elim: Elimination,
    /// Equilibration `S`, per scalar column.
    scale: Vec<f64>,
    /// Diagonal blocks by step, row-major.
    diag: Vec<f64>,
    /// Off-diagonal blocks of each column step, in `elim.structure` order.
    off: Vec<Vec<f64>>,
}

/// `c -= a · bᵀ` for row-major square blocks.
fn sub_abt(c: &mut [f64], a: &[f64], b: &[f64], bs: usize) {
    for i in 0..bs {
        let ai = &a[i * bs..(i + 1) * bs];
        for j in 0..bs {
            let bj = &b[j * bs..(j + 1) * bs];
            let mut s = 0.0;
            for k in 0..bs {
                s += ai[k] * bj[k];
            }
            c[i * bs + j] -= s;
        }
    }
}

/// In-place dense Cholesky of the lower triangle; the upper part is zeroed.
fn dense_cholesky(a: &mut [f64], bs: usize) -> bool {
    for j in 0..bs {
        let mut d = a[j * bs + j];
        for k in 0..j {
            d -= a[j * bs + k] * a[j * bs + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * bs + j] = d;
        for i in j + 1..bs {
            let mut s = a[i * bs + j];
            for k in 0..j {
                s -= a[i * bs + k] * a[j * bs + k];
            }
            a[i * bs + j] = s / d;
        }
        for k in j + 1..bs {
            a[j * bs + k] = 0.0;
        }
    }
    true
}

/// `b ← b · L⁻ᵀ` for every row of a row-major block.
fn solve_right_lt(b: &mut [f64], l: &[f64], bs: usize) {
    for row in b.chunks_exact_mut(bs) {
        for j in 0..bs {
            let mut s = row[j];
            for k in 0..j {
                s -= row[k] * l[j * bs + k];
            }
            row[j] = s / l[j * bs + j];
        }
    }
}

fn forward(l: &[f64], y: &mut [f64], bs: usize) {
    for i in 0..bs {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * bs + k] * y[k];
        }
        y[i] = s / l[i * bs + i];
    }
}

fn backward(l: &[f64], y: &mut [f64], bs: usize) {
    for i in (0..bs).rev() {
        let mut s = y[i];
        for k in i + 1..bs {
            s -= l[k * bs + i] * y[k];
        }
        y[i] = s / l[i * bs + i];
    }
}

impl CholeskyFactor {
    pub fn factor(a: &CsrMatrix, bs: usize) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n % bs, 0, "matrix size must be a multiple of the block size");
        let scale: Vec<f64> = a
            .diagonal()
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                if d > 0.0 {
                    Ok(1.0 / d.sqrt())
                } else {
                    Err(Error::NotPositiveDefinite { block: i / bs })
                }
            })
            .collect::<Result<_>>()?;

        let elim = minimum_degree(block_graph(a, bs));
        let nb = elim.order.len();
        let bb = bs * bs;
        let mut diag = vec![0.0; nb * bb];
        let mut off: Vec<Vec<f64>> = elim.structure.iter().map(|s| vec![0.0; s.len() * bb]).collect();

        // scatter the lower triangle (in elimination order) of S·Ã·S
        for r in 0..n {
            let (bi, li) = (r / bs, r % bs);
            let pi = elim.position[bi];
            let (cols, vals) = a.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let (bj, lj) = (c / bs, c % bs);
                let pj = elim.position[bj];
                let v = v * scale[r] * scale[c];
                if pi == pj {
                    diag[pi * bb + li * bs + lj] = v;
                } else if pi > pj {
                    let k = elim.structure[pj].binary_search(&pi).expect("edge in structure");
                    off[pj][k * bb + li * bs + lj] = v;
                }
            }
        }

        for k in 0..nb {
            if !dense_cholesky(&mut diag[k * bb..(k + 1) * bb], bs) {
                return Err(Error::NotPositiveDefinite { block: elim.order[k] });
            }
            let lkk = diag[k * bb..(k + 1) * bb].to_vec();
            let mut col = std::mem::take(&mut off[k]);
            for blk in col.chunks_exact_mut(bb) {
                solve_right_lt(blk, &lkk, bs);
            }
            let rows = &elim.structure[k];
            for (jj, &j) in rows.iter().enumerate() {
                let lj = &col[jj * bb..(jj + 1) * bb];
                sub_abt(&mut diag[j * bb..(j + 1) * bb], lj, lj, bs);
                let target = &elim.structure[j];
                let mut t = 0;
                for (ii, &i) in rows.iter().enumerate().skip(jj + 1) {
                    while target[t] < i {
                        t += 1;
                    }
                    debug_assert_eq!(target[t], i);
                    let li = &col[ii * bb..(ii + 1) * bb];
                    sub_abt(&mut off[j][t * bb..(t + 1) * bb], li, lj, bs);
                }
            }
            off[k] = col;
        }
        Ok(Self {
            bs,
            elim,
            scale,
            diag,
            off,
        })
    }

    pub fn n(&self) -> usize {
        self.scale.len()
    }

    /// Off-diagonal blocks in the factor.
    pub fn fill_blocks(&self) -> usize {
        self.elim.fill()
    }

    /// Solves `Ã·x = b` with the factor.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let bs = self.bs;
        let bb = bs * bs;
        let nb = self.elim.order.len();
        let mut y = vec![0.0; self.n()];
        for (k, &v) in self.elim.order.iter().enumerate() {
            for l in 0..bs {
                y[k * bs + l] = b[v * bs + l] * self.scale[v * bs + l];
            }
        }
        for k in 0..nb {
            let (head, tail) = y.split_at_mut((k + 1) * bs);
            let yk = &mut head[k * bs..];
            forward(&self.diag[k * bb..(k + 1) * bb], yk, bs);
            for (t, &i) in self.elim.structure[k].iter().enumerate() {
                let l = &self.off[k][t * bb..(t + 1) * bb];
                let yi = &mut tail[(i - k - 1) * bs..(i - k) * bs];
                for a in 0..bs {
                    let mut s = 0.0;
                    for c in 0..bs {
                        s += l[a * bs + c] * yk[c];
                    }
                    yi[a] -= s;
                }
            }
        }
        for k in (0..nb).rev() {
            let (head, tail) = y.split_at_mut((k + 1) * bs);
            let yk = &mut head[k * bs..];
            for (t, &i) in self.elim.structure[k].iter().enumerate() {
                let l = &self.off[k][t * bb..(t + 1) * bb];
                let yi = &tail[(i - k - 1) * bs..(i - k) * bs];
                for c in 0..bs {
                    let mut s = 0.0;
                    for a in 0..bs {
                        s += l[a * bs + c] * yi[a];
                    }
                    yk[c] -= s;
                }
            }
            backward(&self.diag[k * bb..(k + 1) * bb], yk, bs);
        }
        let mut x = vec![0.0; self.n()];
        for (k, &v) in self.elim.order.iter().enumerate() {
            for l in 0..bs {
                x[v * bs + l] = y[k * bs + l] * self.scale[v * bs + l];
            }
        }
        x
    }
}

/// Factor-and-solve with a few steps of iterative refinement.
pub fn solve_direct_vec(ns: &NormalSystem) -> Result<Vec<f64>> {
    let a = &ns.a_tilde;
    let b = &ns.b_tilde;
    let factor = CholeskyFactor::factor(a, ns.block_size)?;
    let mut x = factor.solve(b);
    let residual = |x: &[f64]| -> Vec<f64> {
        let mut r = a.matvec(x);
        r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
        r
    };
    let mut r = residual(&x);
    let mut rn = norm2(&r);
    for _ in 0..3 {
        if rn == 0.0 {
            break;
        }
        let dx = factor.solve(&r);
        let cand: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
        let rc = residual(&cand);
        let rcn = norm2(&rc);
        if !(rcn < rn) {
            break;
        }
        x = cand;
        r = rc;
        rn = rcn;
    }
    Ok(x)
}
