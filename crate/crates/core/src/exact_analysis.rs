//! Exact finite-state analysis of the lumped (L) and Metropolis (Z) chains.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chains::{lumped_row, z_acceptance};
use crate::combinatorics::log_sum_exp;
use crate::error::{Error, Result};
use crate::posterior::{Cells, Instance};
use crate::report::fmt_float;
use crate::rng::stream_rng;

/// Largest `m` for which kernels are built by default.
pub const DEFAULT_CAP: u32 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KernelKind {
    L,
    Z,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" | "l" => Ok(KernelKind::L),
            "Z" | "z" => Ok(KernelKind::Z),
            _ => Err(Error::InvalidArgument(format!("unknown kernel {s:?} (expected L or Z)"))),
        }
    }
}

/// All count vectors `0 ≤ k ≤ n` of the theorem instance, in mixed-radix order.
#[derive(Debug, Clone)]
pub struct StateSpace {
    inst: Instance,
    dims: [usize; 4],
    len: usize,
}

impl StateSpace {
    pub fn new(m: u32, cap: u32) -> Result<Self> {
        if m > cap {
            return Err(Error::AboveCap { m, cap });
        }
        let inst = Instance::new(m)?;
        let b = inst.bounds();
        let dims = [b[0] as usize + 1, b[1] as usize + 1, b[2] as usize + 1, b[3] as usize + 1];
        Ok(StateSpace { inst, dims, len: dims.iter().product() })
    }

    pub fn instance(&self) -> &Instance {
        &self.inst
    }

    pub fn m(&self) -> u32 {
        self.inst.m()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn index(&self, k: Cells) -> usize {
        ((k[0] as usize * self.dims[1] + k[1] as usize) * self.dims[2] + k[2] as usize) * self.dims[3]
            + k[3] as usize
    }

    /// Index offset of a unit step in coordinate `coord`.
    #[inline]
    pub fn stride(&self, coord: usize) -> usize {
        self.dims[coord + 1..].iter().product()
    }

    #[inline]
    pub fn cells(&self, mut i: usize) -> Cells {
        let d = (i % self.dims[3]) as u32;
        i /= self.dims[3];
        let c = (i % self.dims[2]) as u32;
        i /= self.dims[2];
        let b = (i % self.dims[1]) as u32;
        [(i / self.dims[1]) as u32, b, c, d]
    }

    pub fn log_weight(&self, kind: KernelKind, k: Cells) -> f64 {
        match kind {
            KernelKind::L => self.inst.log_pi_l(k),
            KernelKind::Z => self.inst.log_pi_z(k),
        }
    }

    pub fn log_weights(&self, kind: KernelKind) -> Vec<f64> {
        (0..self.len).into_par_iter().map(|i| self.log_weight(kind, self.cells(i))).collect()
    }

    /// Highest-weight state (lowest index on ties).
    pub fn mode(&self, kind: KernelKind) -> Cells {
        let w = self.log_weights(kind);
        let mut best = 0;
        for i in 1..w.len() {
            if w[i] > w[best] {
                best = i;
            }
        }
        self.cells(best)
    }

    pub fn mode_l(&self) -> Cells {
        self.mode(KernelKind::L)
    }

    pub fn mode_z(&self) -> Cells {
        self.mode(KernelKind::Z)
    }
}

/// Row-compressed transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseKernel {
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    val: Vec<f64>,
}

impl SparseKernel {
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let nnz = rows.iter().map(|r| r.len()).sum();
        let mut col = Vec::with_capacity(nnz);
        let mut val = Vec::with_capacity(nnz);
        row_ptr.push(0);
        for r in rows {
            for (j, p) in r {
                col.push(j as u32);
                val.push(p);
            }
            row_ptr.push(col.len());
        }
        SparseKernel { row_ptr, col, val }
    }

    pub fn dense(rows: &[Vec<f64>]) -> Self {
        Self::from_rows(
            rows.iter()
                .map(|r| r.iter().enumerate().filter(|(_, p)| **p != 0.0).map(|(j, p)| (j, *p)).collect())
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col[r.clone()].iter().zip(&self.val[r]).map(|(&j, &p)| (j as usize, p))
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.row(i).filter(|&(c, _)| c == j).map(|(_, p)| p).sum()
    }

    pub fn max_row_nnz(&self) -> usize {
        self.row_ptr.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    /// `μP`.
    pub fn left_mul(&self, mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.left_mul_into(mu, &mut out);
        out
    }

    pub fn left_mul_into(&self, mu: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..self.len() {
            let mi = mu[i];
            if mi == 0.0 {
                continue;
            }
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[self.col[k] as usize] += mi * self.val[k];
            }
        }
    }

    /// `Pf`.
    pub fn right_mul(&self, f: &[f64]) -> Vec<f64> {
        (0..self.len())
            .into_par_iter()
            .map(|i| self.row(i).map(|(j, p)| p * f[j]).sum())
            .collect()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.len())
            .map(|i| (self.row(i).map(|(_, p)| p).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest `|π(x)P(x,y) − π(y)P(y,x)| / max(π(x)P(x,y), π(y)P(y,x))`.
    pub fn detailed_balance_error(&self, pi: &[f64]) -> f64 {
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let mut worst = 0.0f64;
                for (j, p) in self.row(i) {
                    if j == i {
                        continue;
                    }
                    let a = pi[i] * p;
                    let b = pi[j] * self.entry(j, i);
                    let s = a.max(b);
                    if s > 0.0 {
                        worst = worst.max((a - b).abs() / s);
                    }
                }
                worst
            })
            .reduce(|| 0.0, f64::max)
    }
}

fn neighbours(inst: &Instance, k: Cells) -> impl Iterator<Item = Cells> + '_ {
    (0..8).filter_map(move |dir| {
        let (cell, up) = (dir / 2, dir % 2 == 0);
        let mut n = k;
        if up {
            if k[cell] == inst.bounds()[cell] {
                return None;
            }
            n[cell] += 1;
        } else {
            if k[cell] == 0 {
                return None;
            }
            n[cell] -= 1;
        }
        Some(n)
    })
}

/// Exact one-step kernel of L or Z. With a restriction, transitions leaving
/// the set are folded into holding.
pub fn build_kernel(space: &StateSpace, kind: KernelKind, restriction: Option<&LevelSet>) -> SparseKernel {
    let inst = space.instance();
    let inside = |k: Cells| restriction.map_or(true, |r| r.contains(space.index(k)));
    let rows: Vec<Vec<(usize, f64)>> = (0..space.len())
        .into_par_iter()
        .map(|i| {
            let k = space.cells(i);
            let mut row = Vec::with_capacity(9);
            let mut moved = 0.0;
            match kind {
                KernelKind::L => {
                    for (to, p) in lumped_row(inst, k) {
                        if to != k && inside(to) && p > 0.0 {
                            row.push((space.index(to), p));
                            moved += p;
                        }
                    }
                }
                KernelKind::Z => {
                    for to in neighbours(inst, k) {
                        if inside(to) {
                            let p = z_acceptance(inst, k, to) / 8.0;
                            if p > 0.0 {
                                row.push((space.index(to), p));
                                moved += p;
                            }
                        }
                    }
                }
            }
            row.push((i, 1.0 - moved));
            row
        })
        .collect();
    SparseKernel::from_rows(rows)
}

fn normalize_log(logw: &[f64]) -> Vec<f64> {
    let z = log_sum_exp(logw.iter().copied());
    logw.iter().map(|&l| (l - z).exp()).collect()
}

/// Normalized `π_L` or `π_Z` over the enumeration.
pub fn stationary_vector(space: &StateSpace, kind: KernelKind) -> Vec<f64> {
    normalize_log(&space.log_weights(kind))
}

/// `π` conditioned on `set`.
pub fn restrict_distribution(pi: &[f64], set: &LevelSet) -> Vec<f64> {
    let mass = set.mass(pi);
    pi.iter()
        .enumerate()
        .map(|(i, &p)| if set.contains(i) { p / mass } else { 0.0 })
        .collect()
}

pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `(t, TV(μ_t, π))` for `t = 0..=t_max`, started from `mu0`.
pub fn tv_curve_from(kernel: &SparseKernel, pi: &[f64], mu0: Vec<f64>, t_max: usize) -> Vec<(usize, f64)> {
    let mut mu = mu0;
    let mut next = vec![0.0; mu.len()];
    let mut out = Vec::with_capacity(t_max + 1);
    out.push((0, tv_distance(&mu, pi)));
    for t in 1..=t_max {
        kernel.left_mul_into(&mu, &mut next);
        std::mem::swap(&mut mu, &mut next);
        out.push((t, tv_distance(&mu, pi)));
    }
    out
}

fn point_mass(n: usize, start: usize) -> Vec<f64> {
    let mut mu = vec![0.0; n];
    mu[start] = 1.0;
    mu
}

pub fn tv_curve(kernel: &SparseKernel, pi: &[f64], start: usize, t_max: usize) -> Vec<(usize, f64)> {
    tv_curve_from(kernel, pi, point_mass(pi.len(), start), t_max)
}

/// Distribution after `t` steps from `start`.
pub fn distribution_at(kernel: &SparseKernel, start: usize, t: usize) -> Vec<f64> {
    let mut mu = point_mass(kernel.len(), start);
    let mut next = vec![0.0; mu.len()];
    for _ in 0..t {
        kernel.left_mul_into(&mu, &mut next);
        std::mem::swap(&mut mu, &mut next);
    }
    mu
}

/// First `t` with `TV(μ_t, π) ≤ κ`.
pub fn mixing_time(kernel: &SparseKernel, pi: &[f64], start: usize, kappa: f64, t_max: usize) -> Result<usize> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(Error::InvalidArgument(format!("kappa must lie in (0,1), got {kappa}")));
    }
    let mut mu = point_mass(pi.len(), start);
    let mut next = vec![0.0; mu.len()];
    let mut tv = tv_distance(&mu, pi);
    for t in 0..=t_max {
        if tv <= kappa {
            return Ok(t);
        }
        if t == t_max {
            break;
        }
        kernel.left_mul_into(&mu, &mut next);
        std::mem::swap(&mut mu, &mut next);
        tv = tv_distance(&mu, pi);
    }
    Err(Error::NotMixed { kappa, t_max, last_tv: tv })
}

/// Mixing times for several thresholds from one pass, in the order given.
pub fn mixing_times(kernel: &SparseKernel, pi: &[f64], start: usize, kappas: &[f64], t_max: usize) -> Result<Vec<usize>> {
    let mut out: Vec<Option<usize>> = vec![None; kappas.len()];
    let mut mu = point_mass(pi.len(), start);
    let mut next = vec![0.0; mu.len()];
    let mut tv = tv_distance(&mu, pi);
    for t in 0..=t_max {
        for (o, &k) in out.iter_mut().zip(kappas) {
            if o.is_none() && tv <= k {
                *o = Some(t);
            }
        }
        if out.iter().all(Option::is_some) || t == t_max {
            break;
        }
        kernel.left_mul_into(&mu, &mut next);
        std::mem::swap(&mut mu, &mut next);
        tv = tv_distance(&mu, pi);
    }
    out.into_iter()
        .zip(kappas)
        .map(|(o, &kappa)| o.ok_or(Error::NotMixed { kappa, t_max, last_tv: tv }))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct GapOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for GapOptions {
    fn default() -> Self {
        GapOptions { max_iter: 50_000, tol: 1e-10, seed: 17 }
    }
}

pub fn spectral_gap(kernel: &SparseKernel, pi: &[f64]) -> Result<f64> {
    spectral_gap_with(kernel, pi, GapOptions::default())
}

/// `1 − λ₂` of `D^{1/2} P D^{−1/2}` by Lanczos iteration in the complement of
/// `√π`. Only the deflation vector is kept orthogonal; the largest Ritz value
/// is tracked by Sturm bisection and its residual by inverse iteration.
pub fn spectral_gap_with(kernel: &SparseKernel, pi: &[f64], opts: GapOptions) -> Result<f64> {
    let n = pi.len();
    if n < 2 {
        return Err(Error::InvalidArgument("spectral gap needs at least two states".into()));
    }
    let sq: Vec<f64> = pi.iter().map(|p| p.sqrt()).collect();
    let inv: Vec<f64> = sq.iter().map(|s| if *s > 0.0 { 1.0 / s } else { 0.0 }).collect();
    let apply = |x: &[f64]| -> Vec<f64> {
        let y: Vec<f64> = x.iter().zip(&inv).map(|(a, b)| a * b).collect();
        let py = kernel.right_mul(&y);
        py.iter().zip(&sq).map(|(a, b)| a * b).collect()
    };
    let deflate = |x: &mut [f64]| {
        let d: f64 = x.iter().zip(&sq).map(|(a, b)| a * b).sum();
        x.iter_mut().zip(&sq).for_each(|(a, b)| *a -= d * b);
    };
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();

    let mut rng = stream_rng(opts.seed, 0);
    let mut q: Vec<f64> = (0..n).map(|i| if sq[i] > 0.0 { rng.gen::<f64>() - 0.5 } else { 0.0 }).collect();
    deflate(&mut q);
    let nq = norm(&q);
    q.iter_mut().for_each(|a| *a /= nq);
    let mut q_prev = vec![0.0; n];
    let mut alphas = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut beta_prev = 0.0;
    let mut theta = f64::NAN;
    let mut residual = f64::INFINITY;
    for it in 0..opts.max_iter {
        let mut w = apply(&q);
        deflate(&mut w);
        let a: f64 = w.iter().zip(&q).map(|(x, y)| x * y).sum();
        for i in 0..n {
            w[i] -= a * q[i] + beta_prev * q_prev[i];
        }
        deflate(&mut w);
        alphas.push(a);
        let b = norm(&w);
        let check = it < 20 || it % 10 == 0 || b < 1e-14 || it + 1 == opts.max_iter;
        if check {
            theta = tridiag_max_eigenvalue(&alphas, &betas);
            let last = tridiag_top_vector_last(&alphas, &betas, theta);
            residual = b * last.abs();
            if residual <= opts.tol || b < 1e-14 {
                return Ok(1.0 - theta);
            }
        }
        betas.push(b);
        q_prev = std::mem::replace(&mut q, w.iter().map(|x| x / b).collect());
        beta_prev = b;
    }
    let _ = theta;
    Err(Error::NoConvergence { iterations: opts.max_iter, residual })
}

/// Number of eigenvalues of the tridiagonal matrix greater than `x`.
fn count_above(alphas: &[f64], betas: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut d = 1.0f64;
    for i in 0..alphas.len() {
        let b2 = if i == 0 { 0.0 } else { betas[i - 1] * betas[i - 1] };
        d = (alphas[i] - x) - if i == 0 { 0.0 } else { b2 / d };
        if d == 0.0 {
            d = -1e-300;
        }
        if d > 0.0 {
            count += 1;
        }
    }
    count
}

fn tridiag_max_eigenvalue(alphas: &[f64], betas: &[f64]) -> f64 {
    let n = alphas.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { betas[i - 1].abs() } else { 0.0 } + if i + 1 < n { betas[i].abs() } else { 0.0 };
        lo = lo.min(alphas[i] - r);
        hi = hi.max(alphas[i] + r);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if count_above(alphas, betas, mid) >= 1 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Last component of the unit eigenvector for the top eigenvalue `theta`.
fn tridiag_top_vector_last(alphas: &[f64], betas: &[f64], theta: f64) -> f64 {
    let n = alphas.len();
    if n == 1 {
        return 1.0;
    }
    // T − σI with σ just above θ is negative definite, so elimination without
    // pivoting is stable.
    let sigma = theta + 1e-12 * theta.abs().max(1.0);
    let mut x = vec![1.0; n];
    for _ in 0..3 {
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut diag = alphas[0] - sigma;
        c[0] = if n > 1 { betas[0] / diag } else { 0.0 };
        d[0] = x[0] / diag;
        for i in 1..n {
            diag = alphas[i] - sigma - betas[i - 1] * c[i - 1];
            if i + 1 < n {
                c[i] = betas[i] / diag;
            }
            d[i] = (x[i] - betas[i - 1] * d[i - 1]) / diag;
        }
        let mut y = vec![0.0; n];
        y[n - 1] = d[n - 1];
        for i in (0..n - 1).rev() {
            y[i] = d[i] - c[i] * y[i + 1];
        }
        let nrm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        x = y.iter().map(|v| v / nrm).collect();
    }
    x[n - 1]
}

/// `Q(A, Aᶜ) = Σ_{x∈A, y∉A} π(x)P(x,y)`.
pub fn boundary_flow(set: &[bool], kernel: &SparseKernel, pi: &[f64]) -> f64 {
    (0..kernel.len())
        .filter(|&i| set[i])
        .map(|i| kernel.row(i).filter(|&(j, _)| !set[j]).map(|(_, p)| pi[i] * p).sum::<f64>())
        .sum()
}

/// `Φ_A = Q(A, Aᶜ)/π(A)`.
pub fn conductance_of(set: &[bool], kernel: &SparseKernel, pi: &[f64]) -> Result<f64> {
    let size = set.iter().filter(|&&b| b).count();
    if size == 0 || size == set.len() {
        return Err(Error::InvalidArgument("conductance needs a nonempty proper subset".into()));
    }
    let mass: f64 = set.iter().zip(pi).filter(|(b, _)| **b).map(|(_, p)| p).sum();
    Ok(boundary_flow(set, kernel, pi) / mass)
}

/// `B_j = {k : ln π_Z(k) ≥ max ln π_Z − j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSet {
    pub j: u32,
    /// Absolute threshold on `m·g(k/m)`.
    pub threshold: f64,
    mask: Vec<bool>,
}

fn grid_max_lz(inst: &Instance) -> f64 {
    let b = inst.bounds();
    (0..=b[0])
        .into_par_iter()
        .map(|a| {
            let mut best = f64::NEG_INFINITY;
            for bb in 0..=b[1] {
                for c in 0..=b[2] {
                    for d in 0..=b[3] {
                        best = best.max(inst.log_pi_z([a, bb, c, d]));
                    }
                }
            }
            best
        })
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

impl LevelSet {
    /// Threshold-only level set (no membership table), usable at any `m`.
    pub fn by_threshold(inst: &Instance, j: u32) -> Self {
        LevelSet { j, threshold: grid_max_lz(inst) - j as f64, mask: Vec::new() }
    }

    pub fn contains_cells(&self, inst: &Instance, k: Cells) -> bool {
        inst.log_pi_z(k) >= self.threshold
    }

    /// Membership by state index; requires a table built by [`level_sets`].
    pub fn contains(&self, i: usize) -> bool {
        self.mask[i]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn size(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn mass(&self, pi: &[f64]) -> f64 {
        self.mask.iter().zip(pi).filter(|(b, _)| **b).map(|(_, p)| p).sum()
    }
}

/// `J = ⌈10 ln m⌉`.
pub fn level_index(m: u32) -> u32 {
    (10.0 * (m as f64).ln()).ceil() as u32
}

/// Nested level sets `B_1 ⊆ … ⊆ B_{j_max}` of `π_Z`.
pub fn level_sets(space: &StateSpace, j_max: u32) -> Vec<LevelSet> {
    let lz = space.log_weights(KernelKind::Z);
    let top = lz.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (1..=j_max)
        .map(|j| {
            let threshold = top - j as f64;
            LevelSet { j, threshold, mask: lz.iter().map(|&l| l >= threshold).collect() }
        })
        .collect()
}

/// The level sets `j = 1..=2J` used by the mixing argument.
pub fn standard_level_sets(space: &StateSpace) -> Vec<LevelSet> {
    level_sets(space, 2 * level_index(space.m()))
}

/// Axis-aligned halfspaces `{k : k_i ≤ t}` for every coordinate and cut.
pub fn halfspace_cuts(space: &StateSpace) -> Vec<(usize, u32, Vec<bool>)> {
    let b = space.instance().bounds();
    let mut out = Vec::new();
    for axis in 0..4 {
        for t in 0..b[axis] {
            let mask = (0..space.len()).map(|i| space.cells(i)[axis] <= t).collect();
            out.push((axis, t, mask));
        }
    }
    out
}

/// The smaller-mass side of a cut, as used for conductance profiles.
pub fn smaller_side(mask: &[bool], pi: &[f64]) -> Vec<bool> {
    let mass: f64 = mask.iter().zip(pi).filter(|(b, _)| **b).map(|(_, p)| p).sum();
    if mass > 0.5 {
        mask.iter().map(|b| !b).collect()
    } else {
        mask.to_vec()
    }
}

pub fn write_tv_csv<W: Write>(mut w: W, curve: &[(usize, f64)]) -> Result<()> {
    writeln!(w, "t,tv")?;
    for (t, tv) in curve {
        writeln!(w, "{t},{}", fmt_float(*tv))?;
    }
    Ok(())
}

pub fn write_levels_csv<W: Write>(mut w: W, rows: &[(u32, f64, f64)]) -> Result<()> {
    writeln!(w, "j,mass,conductance")?;
    for (j, mass, phi) in rows {
        writeln!(w, "{j},{},{}", fmt_float(*mass), fmt_float(*phi))?;
    }
    Ok(())
}

/// Empirical distribution of visited states.
pub fn histogram<I: IntoIterator<Item = Cells>>(space: &StateSpace, states: I) -> Vec<f64> {
    let mut h = vec![0u64; space.len()];
    let mut n = 0u64;
    for k in states {
        h[space.index(k)] += 1;
        n += 1;
    }
    h.into_iter().map(|c| c as f64 / n.max(1) as f64).collect()
}
