//! Jacobi-preconditioned Krylov solvers.

use crate::sparse::{dot, norm2, CsrMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Breakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KrylovOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Relative recursive residual after each iteration.
    pub residuals: Vec<f64>,
    /// `½xᵀÃx - b̃ᵀx` after each iteration (CG only).
    pub energy: Vec<f64>,
}

fn inverse_diagonal(a: &CsrMatrix) -> Vec<f64> {
    a.diagonal().iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect()
}

fn true_residual(a: &CsrMatrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    let mut r = a.matvec(x);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    r
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

fn trivial(n: usize) -> KrylovOutcome {
    KrylovOutcome {
        x: vec![0.0; n],
        iterations: 0,
        status: SolveStatus::Converged,
        residuals: Vec::new(),
        energy: Vec::new(),
    }
}

/// The iterate with the smallest recurrence residual, returned when a
/// solver stops without converging.
struct Best {
    rel: f64,
    x: Vec<f64>,
}

impl Best {
    fn new(n: usize) -> Self {
        Best {
            rel: f64::INFINITY,
            x: vec![0.0; n],
        }
    }

    fn offer(&mut self, rel: f64, x: &[f64]) {
        if rel < self.rel {
            self.rel = rel;
            self.x.copy_from_slice(x);
        }
    }

    fn pick(self, a: &CsrMatrix, b: &[f64], last: Vec<f64>) -> Vec<f64> {
        if self.rel.is_infinite() {
            return last;
        }
        let r_last = norm2(&true_residual(a, b, &last));
        let r_best = norm2(&true_residual(a, b, &self.x));
        if r_best < r_last {
            self.x
        } else {
            last
        }
    }
}

pub fn cg(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> KrylovOutcome {
    let n = b.len();
    let bn = norm2(b);
    if bn == 0.0 {
        return trivial(n);
    }
    let minv = inverse_diagonal(a);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&minv).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut out = trivial(n);
    let mut best = Best::new(n);
    let mut status = SolveStatus::MaxIterations;
    let mut it = 0;
    while it < max_iter {
        a.matvec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            status = SolveStatus::Breakdown;
            break;
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        it += 1;
        let rel = norm2(&r) / bn;
        out.residuals.push(rel);
        // Ax = b - r
        out.energy.push(-0.5 * (dot(b, &x) + dot(&r, &x)));
        best.offer(rel, &x);
        let mut restart = false;
        if rel <= tol {
            r = true_residual(a, b, &x);
            if norm2(&r) / bn <= tol {
                status = SolveStatus::Converged;
                break;
            }
            restart = true;
        }
        z.iter_mut().zip(&r).zip(&minv).for_each(|((zi, ri), mi)| *zi = ri * mi);
        let rz_new = dot(&r, &z);
        let beta = if restart { 0.0 } else { rz_new / rz };
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    if status != SolveStatus::Converged {
        x = best.pick(a, b, x);
    }
    out.x = x;
    out.iterations = it;
    out.status = status;
    out
}

pub fn bicgstab(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize) -> KrylovOutcome {
    let n = b.len();
    let bn = norm2(b);
    if bn == 0.0 {
        return trivial(n);
    }
    let minv = inverse_diagonal(a);
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&minv).map(|(v, m)| v * m).collect() };
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut out = trivial(n);
    let mut best = Best::new(n);
    let mut status = SolveStatus::MaxIterations;
    let mut it = 0;
    // residual at the last restart; a restart that gained nothing is a breakdown
    let mut restart_rel = f64::INFINITY;
    while it < max_iter {
        let rho_new = dot(&r0, &r);
        let stalled = rho_new.abs() <= f64::EPSILON * f64::EPSILON * bn * bn;
        let mut ph = Vec::new();
        let mut r0v = 0.0;
        if !stalled {
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            p.iter_mut()
                .zip(&r)
                .zip(&v)
                .for_each(|((pi, ri), vi)| *pi = ri + beta * (*pi - omega * vi));
            ph = precond(&p);
            a.matvec_into(&ph, &mut v);
            r0v = dot(&r0, &v);
        }
        if stalled || r0v == 0.0 {
            r = true_residual(a, b, &x);
            let rel = norm2(&r) / bn;
            if rel <= tol {
                status = SolveStatus::Converged;
                break;
            }
            if rel >= restart_rel {
                status = SolveStatus::Breakdown;
                break;
            }
            restart_rel = rel;
            r0 = r.clone();
            (rho, alpha, omega) = (1.0, 1.0, 1.0);
            v.iter_mut().for_each(|e| *e = 0.0);
            p.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        alpha = rho / r0v;
        let mut s = r.clone();
        axpy(-alpha, &v, &mut s);
        it += 1;
        let sn = norm2(&s) / bn;
        if sn <= tol {
            axpy(alpha, &ph, &mut x);
            out.residuals.push(sn);
            r = true_residual(a, b, &x);
            if norm2(&r) / bn <= tol {
                status = SolveStatus::Converged;
                break;
            }
            r0.iter_mut().for_each(|e| *e = 0.0);
            continue;
        }
        let sh = precond(&s);
        a.matvec_into(&sh, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        axpy(alpha, &ph, &mut x);
        axpy(omega, &sh, &mut x);
        r = s;
        axpy(-omega, &t, &mut r);
        let rel = norm2(&r) / bn;
        out.residuals.push(rel);
        best.offer(rel, &x);
        if rel <= tol {
            r = true_residual(a, b, &x);
            if norm2(&r) / bn <= tol {
                status = SolveStatus::Converged;
                break;
            }
        }
        if omega == 0.0 {
            // forces a restart on the next pass
            r0.iter_mut().for_each(|e| *e = 0.0);
        }
    }
    if status != SolveStatus::Converged {
        x = best.pick(a, b, x);
    }
    out.x = x;
    out.iterations = it;
    out.status = status;
    out
}

/// Restarted GMRES with Givens rotations on the symmetrically Jacobi-scaled
/// system `S·A·S y = S·b`, `x = S·y`, `S = diag(A)^-1/2`. The split keeps the
/// operator symmetric positive definite, so restarts cannot stagnate.
pub fn gmres(a: &CsrMatrix, b: &[f64], tol: f64, max_iter: usize, restart: usize) -> KrylovOutcome {
    let n = b.len();
    let bn = norm2(b);
    if bn == 0.0 {
        return trivial(n);
    }
    let m = restart.max(1);
    let scale: Vec<f64> = inverse_diagonal(a).iter().map(|v| v.abs().sqrt()).collect();
    let scaled = |v: &[f64]| -> Vec<f64> { v.iter().zip(&scale).map(|(v, s)| v * s).collect() };
    let mut x = vec![0.0; n];
    let mut out = trivial(n);
    let mut best = Best::new(n);
    let mut it = 0;
    let mut status = SolveStatus::MaxIterations;
    let mut w = vec![0.0; n];
    let mut prev_happy = false;
    'outer: while it < max_iter {
        let r = true_residual(a, b, &x);
        let rel = norm2(&r) / bn;
        best.offer(rel, &x);
        if rel <= tol {
            status = SolveStatus::Converged;
            break;
        }
        let r = scaled(&r);
        let beta = norm2(&r);
        // inner target in the scaled norm, matching the current ratio
        let target = tol * beta / rel;
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h: Vec<Vec<f64>> = Vec::with_capacity(m);
        let (mut cs, mut sn) = (Vec::with_capacity(m), Vec::with_capacity(m));
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k = 0;
        let mut happy = false;
        while k < m && it < max_iter {
            a.matvec_into(&scaled(&basis[k]), &mut w);
            w.iter_mut().zip(&scale).for_each(|(wi, s)| *wi *= s);
            let mut col = vec![0.0; k + 2];
            for (j, vj) in basis.iter().enumerate() {
                col[j] = dot(&w, vj);
                axpy(-col[j], vj, &mut w);
            }
            let wn = norm2(&w);
            col[k + 1] = wn;
            for j in 0..k {
                let (c, s): (f64, f64) = (cs[j], sn[j]);
                let t = c * col[j] + s * col[j + 1];
                col[j + 1] = -s * col[j] + c * col[j + 1];
                col[j] = t;
            }
            let denom = col[k].hypot(col[k + 1]);
            let (c, s) = if denom == 0.0 { (1.0, 0.0) } else { (col[k] / denom, col[k + 1] / denom) };
            cs.push(c);
            sn.push(s);
            col[k] = c * col[k] + s * col[k + 1];
            col[k + 1] = 0.0;
            g[k + 1] = -s * g[k];
            g[k] *= c;
            h.push(col);
            k += 1;
            it += 1;
            out.residuals.push(g[k].abs() / beta * rel);
            if wn <= f64::EPSILON * beta {
                happy = true;
            }
            if g[k].abs() <= target || happy {
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }
        // back substitution for y, then x += S·V·y
        let mut y = vec![0.0; k];
        for i in (0..k).rev() {
            let mut s = g[i];
            for j in i + 1..k {
                s -= h[j][i] * y[j];
            }
            y[i] = if h[i][i] != 0.0 { s / h[i][i] } else { 0.0 };
        }
        let mut update = vec![0.0; n];
        for (j, yj) in y.iter().enumerate() {
            axpy(*yj, &basis[j], &mut update);
        }
        x.iter_mut()
            .zip(&update)
            .zip(&scale)
            .for_each(|((xi, ui), si)| *xi += ui * si);
        // A happy breakdown counts as convergence, after one restart to
        // refine the answer.
        if happy && (k == 0 || prev_happy) {
            status = SolveStatus::Converged;
            break 'outer;
        }
        prev_happy = happy;
    }
    if status == SolveStatus::MaxIterations {
        let rel = norm2(&true_residual(a, b, &x)) / bn;
        if rel <= tol {
            status = SolveStatus::Converged;
        } else {
            best.offer(rel, &x);
            x = best.pick(a, b, x);
        }
    }
    out.x = x;
    out.iterations = it;
    out.status = status;
    out
}
