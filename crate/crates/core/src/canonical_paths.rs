//! Canonical paths through the level sets of `π_Z`, their congestion, and
//! the mixing-time bounds that consume a congestion or conductance profile.
//!
//! A path from `x₁` to `x₂` follows the ridge fibre through `x₂`: the offset
//! of `x₂` from the ridge in the (b, c) plane fixes a direction `q` and a
//! relative radius, and the path tracks the point at that relative radius
//! while it walks `a` and then `d`. The fibre shape is the leading-order
//! ellipse from the (b, c) block of the Hessian of `g`.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exact_analysis::{standard_level_sets, LevelSet, SparseKernel, StateSpace};
use crate::landscape::{hessian_analytic, surface_point_ad};
use crate::posterior::Cells;
use crate::report::fmt_float;
use crate::rng::stream_rng;

/// Largest `m` for which all pairs are enumerated.
pub const DEFAULT_PATH_CAP: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Phase {
    Parity,
    /// (i): the `b` segment at the start.
    B,
    /// (ii): the `c` segment at the start.
    C,
    /// (iii): `a` and `d` steps along the fibre.
    Walk,
    /// (iii): `b`/`c` corrections along the fibre.
    Track,
    /// Final correction onto `x₂`.
    FixUp,
    Fallback,
}

impl Phase {
    fn bit(self) -> u8 {
        1 << self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PathKind {
    Constructed,
    Staircase,
    Search,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub vertices: Vec<Cells>,
    /// Phase of the step into `vertices[i + 1]`.
    pub phases: Vec<Phase>,
    pub kind: PathKind,
    /// Index into the level list of the smallest level used.
    pub level: usize,
}

impl Path {
    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }
}

/// Ridge centre and (b, c) curvature at one `(a, d)` lattice point.
#[derive(Debug, Clone, Copy)]
struct Fibre {
    centre: [f64; 2],
    /// `−∂²g` restricted to (b, c): `[bb, bc, cc]`, in normalized units.
    curv: [f64; 3],
}

/// Lazily evaluated canonical paths on the level sets of one instance.
pub struct PathFamily {
    space: StateSpace,
    levels: Vec<LevelSet>,
    /// `comp[l][i]`: component label of state `i` in level `l`, or `u32::MAX`.
    comp: Vec<Vec<u32>>,
    /// Smallest level index containing each state.
    level_of: Vec<u16>,
    fibres: [Vec<Fibre>; 2],
    /// States taking part in pairs (the top level).
    members: Vec<usize>,
    strides: [usize; 4],
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Builds the path family on `B_1 ⊆ … ⊆ B_{2J}`; pairs range over `B_J`.
pub fn build_paths(space: &StateSpace, cap: u32) -> Result<PathFamily> {
    if space.m() > cap {
        return Err(Error::AboveCap { m: space.m(), cap });
    }
    let levels = standard_level_sets(space);
    let n = space.len();
    let b = space.instance().bounds();
    let comp: Vec<Vec<u32>> = levels
        .par_iter()
        .map(|lvl| {
            let mut parent: Vec<u32> = (0..n as u32).collect();
            for i in 0..n {
                if !lvl.contains(i) {
                    continue;
                }
                let k = space.cells(i);
                for c in 0..4 {
                    if k[c] < b[c] {
                        let mut up = k;
                        up[c] += 1;
                        let j = space.index(up);
                        if lvl.contains(j) {
                            let (ri, rj) = (find(&mut parent, i as u32), find(&mut parent, j as u32));
                            if ri != rj {
                                parent[ri.max(rj) as usize] = ri.min(rj);
                            }
                        }
                    }
                }
            }
            (0..n)
                .map(|i| if lvl.contains(i) { find(&mut parent, i as u32) } else { u32::MAX })
                .collect()
        })
        .collect();
    let level_of = (0..n)
        .map(|i| levels.iter().position(|l| l.contains(i)).unwrap_or(levels.len()) as u16)
        .collect();
    let half = levels.len() / 2;
    let members = (0..n).filter(|&i| levels[half - 1].contains(i)).collect();
    let fibres = [fibre_table(space, false), fibre_table(space, true)];
    let strides = [space.stride(0), space.stride(1), space.stride(2), space.stride(3)];
    Ok(PathFamily { space: space.clone(), levels, comp, level_of, fibres, members, strides })
}

fn fibre_table(space: &StateSpace, mirrored: bool) -> Vec<Fibre> {
    let inst = space.instance();
    let nb = inst.bounds();
    let m = inst.m() as f64;
    let mut out = Vec::with_capacity((nb[0] as usize + 1) * (nb[3] as usize + 1));
    for a in 0..=nb[0] {
        for d in 0..=nb[3] {
            let (aa, dd) = if mirrored { (nb[0] - a, nb[3] - d) } else { (a, d) };
            let ae = (aa as f64).clamp(0.25, nb[0] as f64 - 0.25) / m;
            let de = (dd as f64).clamp(0.25, nb[3] as f64 - 0.25) / m;
            let p = surface_point_ad(ae, de).expect("clamped point is interior");
            let h = hessian_analytic(p).expect("ridge points are interior");
            let (cb, cc) = if mirrored {
                (nb[1] as f64 - p[1] * m, nb[2] as f64 - p[2] * m)
            } else {
                (p[1] * m, p[2] * m)
            };
            out.push(Fibre { centre: [cb, cc], curv: [-h[(1, 1)], -h[(1, 2)], -h[(2, 2)]] });
        }
    }
    out
}

#[inline]
fn round_down_ties(x: f64) -> f64 {
    (x - 0.5).ceil()
}

/// A path as a sequence of state indices with the moving coordinate and
/// phase of each step.
#[derive(Default)]
struct Trace {
    idx: Vec<usize>,
    coords: Vec<u8>,
    phases: Vec<Phase>,
}

impl Trace {
    fn reset(&mut self, start: usize) {
        self.idx.clear();
        self.coords.clear();
        self.phases.clear();
        self.idx.push(start);
    }
}

struct Walker<'a> {
    fam: &'a PathFamily,
    mask: &'a [bool],
    cur: Cells,
    escaped: bool,
    trace: &'a mut Trace,
}

impl Walker<'_> {
    #[inline]
    fn step(&mut self, coord: usize, up: bool, phase: Phase) {
        let s = self.fam.strides[coord];
        let last = *self.trace.idx.last().unwrap();
        let next = if up {
            self.cur[coord] += 1;
            last + s
        } else {
            self.cur[coord] -= 1;
            last - s
        };
        self.escaped |= !self.mask[next];
        self.trace.idx.push(next);
        self.trace.coords.push(coord as u8);
        self.trace.phases.push(phase);
    }

    fn move_to(&mut self, coord: usize, target: u32, phase: Phase) {
        while self.cur[coord] != target {
            let up = self.cur[coord] < target;
            self.step(coord, up, phase);
        }
    }
}

/// Reusable buffers for routing many pairs, including breadth-first trees
/// toward the current destination.
#[derive(Default)]
pub struct Router {
    trace: Trace,
    dest: Option<usize>,
    trees: Vec<Option<Vec<u32>>>,
}

impl PathFamily {
    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn levels(&self) -> &[LevelSet] {
        &self.levels
    }

    /// State indices over which ordered pairs are routed.
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    /// Smallest level (as an index into [`levels`](Self::levels)) that
    /// contains both states in one connected component.
    pub fn pair_level(&self, x: usize, y: usize) -> Option<usize> {
        let start = self.level_of[x].max(self.level_of[y]) as usize;
        (start..self.levels.len()).find(|&l| self.comp[l][x] == self.comp[l][y])
    }

    fn fibre(&self, branch: usize, a: u32, d: u32) -> &Fibre {
        let nd = self.space.instance().bounds()[3] as usize + 1;
        &self.fibres[branch][a as usize * nd + d as usize]
    }

    /// Ridge branch whose centre is nearer to `k` in the (b, c) plane.
    fn branch_for(&self, k: Cells) -> usize {
        let dist = |br: usize| {
            let f = self.fibre(br, k[0], k[3]);
            (k[1] as f64 - f.centre[0]).powi(2) + (k[2] as f64 - f.centre[1]).powi(2)
        };
        if dist(1) < dist(0) {
            1
        } else {
            0
        }
    }

    /// Lattice point of the fibre through `x₂` above `(a, d)`.
    fn target(&self, branch: usize, a: u32, d: u32, dir: [f64; 2], radius: f64, kappa2: f64) -> (u32, u32) {
        let f = self.fibre(branch, a, d);
        let kappa = dir[0] * dir[0] * f.curv[0] + 2.0 * dir[0] * dir[1] * f.curv[1] + dir[1] * dir[1] * f.curv[2];
        let s = if radius == 0.0 { 0.0 } else { radius * (kappa2 / kappa).sqrt() };
        let nb = self.space.instance().bounds();
        let b = round_down_ties(f.centre[0] + s * dir[0]).clamp(0.0, nb[1] as f64);
        let c = round_down_ties(f.centre[1] + s * dir[1]).clamp(0.0, nb[2] as f64);
        (b as u32, c as u32)
    }

    fn walker<'a>(&'a self, x1: usize, level: usize, trace: &'a mut Trace) -> Walker<'a> {
        trace.reset(x1);
        Walker { fam: self, mask: self.levels[level].mask(), cur: self.space.cells(x1), escaped: false, trace }
    }

    /// Fills `trace` with the constructed path; returns whether it stays in the level.
    fn constructed(&self, x1: usize, x2: usize, level: usize, trace: &mut Trace) -> bool {
        let x2c = self.space.cells(x2);
        let mut w = self.walker(x1, level, trace);
        if (w.cur[0], w.cur[3]) == (x2c[0], x2c[3]) {
            w.move_to(1, x2c[1], Phase::B);
            w.move_to(2, x2c[2], Phase::C);
            return !w.escaped;
        }
        let nb = self.space.instance().bounds();
        let branch = self.branch_for(x2c);
        let f2 = self.fibre(branch, x2c[0], x2c[3]);
        let off = [x2c[1] as f64 - f2.centre[0], x2c[2] as f64 - f2.centre[1]];
        let radius = off[0].hypot(off[1]);
        let dir = if radius > 0.0 { [off[0] / radius, off[1] / radius] } else { [1.0, 0.0] };
        let kappa2 = dir[0] * dir[0] * f2.curv[0] + 2.0 * dir[0] * dir[1] * f2.curv[1] + dir[1] * dir[1] * f2.curv[2];

        for coord in [0, 3] {
            let v = w.cur[coord];
            if v % 2 == 0 {
                let up = if x2c[coord] > v { v < nb[coord] } else { v == 0 };
                w.step(coord, up, Phase::Parity);
            }
        }
        let (a1, d1) = (w.cur[0], w.cur[3]);
        let (b0, c0) = self.target(branch, a1, d1, dir, radius, kappa2);
        w.move_to(1, b0, Phase::B);
        w.move_to(2, c0, Phase::C);

        for (coord, fixed_a) in [(0usize, false), (3usize, true)] {
            while w.cur[coord] != x2c[coord] {
                let up = w.cur[coord] < x2c[coord];
                w.step(coord, up, Phase::Walk);
                let k = w.cur;
                if !(k[0] % 2 == 1 && k[3] % 2 == 1) {
                    let (a, d) = if fixed_a { (x2c[0], k[3]) } else { (k[0], d1) };
                    let (bt, ct) = self.target(branch, a, d, dir, radius, kappa2);
                    w.move_to(1, bt, Phase::Track);
                    w.move_to(2, ct, Phase::Track);
                }
            }
        }
        w.move_to(1, x2c[1], Phase::FixUp);
        w.move_to(2, x2c[2], Phase::FixUp);
        !w.escaped
    }

    fn staircase(&self, x1: usize, x2: usize, level: usize, trace: &mut Trace) -> bool {
        let x2c = self.space.cells(x2);
        let mut w = self.walker(x1, level, trace);
        for c in 0..4 {
            w.move_to(c, x2c[c], Phase::Fallback);
        }
        !w.escaped
    }

    /// Breadth-first tree toward `x₂` inside a level (parent pointers).
    fn tree(&self, x2: usize, level: usize) -> Vec<u32> {
        let mask = self.levels[level].mask();
        let b = self.space.instance().bounds();
        let mut parent = vec![u32::MAX; self.space.len()];
        parent[x2] = x2 as u32;
        let mut queue = VecDeque::from([x2]);
        while let Some(i) = queue.pop_front() {
            let k = self.space.cells(i);
            for c in 0..4 {
                let s = self.strides[c];
                for (ok, j) in [(k[c] > 0, i.wrapping_sub(s)), (k[c] < b[c], i + s)] {
                    if ok && mask[j] && parent[j] == u32::MAX {
                        parent[j] = i as u32;
                        queue.push_back(j);
                    }
                }
            }
        }
        parent
    }

    fn search(&self, x1: usize, x2: usize, level: usize, router: &mut Router) {
        if router.dest != Some(x2) {
            router.dest = Some(x2);
            router.trees.clear();
            router.trees.resize(self.levels.len(), None);
        }
        if router.trees[level].is_none() {
            router.trees[level] = Some(self.tree(x2, level));
        }
        let parent = router.trees[level].as_ref().unwrap();
        let t = &mut router.trace;
        t.reset(x1);
        let mut i = x1;
        while i != x2 {
            let j = parent[i] as usize;
            let coord = (0..4).find(|&c| i.abs_diff(j) == self.strides[c]).unwrap();
            t.idx.push(j);
            t.coords.push(coord as u8);
            t.phases.push(Phase::Fallback);
            i = j;
        }
    }

    /// Routes one ordered pair into the router's buffers.
    fn route(&self, x1: usize, x2: usize, router: &mut Router) -> Result<(PathKind, usize)> {
        let level = self
            .pair_level(x1, x2)
            .ok_or_else(|| Error::InvalidArgument("states are not connected inside the level sets".into()))?;
        if x1 == x2 {
            router.trace.reset(x1);
            return Ok((PathKind::Constructed, level));
        }
        if self.constructed(x1, x2, level, &mut router.trace) {
            return Ok((PathKind::Constructed, level));
        }
        if self.staircase(x1, x2, level, &mut router.trace) {
            return Ok((PathKind::Staircase, level));
        }
        self.search(x1, x2, level, router);
        Ok((PathKind::Search, level))
    }

    /// The canonical path between two states of the top level.
    pub fn path(&self, x1: usize, x2: usize) -> Result<Path> {
        let mut router = Router::default();
        let (kind, level) = self.route(x1, x2, &mut router)?;
        let t = router.trace;
        Ok(Path {
            vertices: t.idx.iter().map(|&i| self.space.cells(i)).collect(),
            phases: t.phases,
            kind,
            level,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EdgeLoad {
    pub from: Cells,
    pub to: Cells,
    pub q: f64,
    pub load: f64,
    pub congestion: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CongestionReport {
    pub rho: f64,
    pub top_edges: Vec<EdgeLoad>,
    /// Largest `π(x)π(y)/Q(e)` over routed pairs and edges on their path.
    pub max_single_pair: f64,
    pub pairs: u64,
    pub staircase_fallbacks: u64,
    pub search_fallbacks: u64,
    /// `b`/`c` edges used by more than one of the phases (i), (ii), (iii).
    pub phase_conflict_edges: u64,
    /// `a`/`d` edges used both by a parity step and by an (iii) walk.
    pub parity_walk_shared_edges: u64,
    pub max_path_len: usize,
    /// Half-width of a 95% interval for `rho` when pairs are sampled.
    pub rho_ci95: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairMode {
    Exact,
    Sampled { pairs: usize, seed: u64 },
}

struct Accum {
    loads: Vec<Vec<f64>>,
    sq: Vec<Vec<f64>>,
    phases: Vec<u8>,
    best_single: Vec<f64>,
    staircase: u64,
    search: u64,
    pairs: u64,
    max_len: usize,
}

impl Accum {
    fn new(edges: usize, chains: usize, sampled: bool) -> Self {
        Accum {
            loads: vec![vec![0.0; edges]; chains],
            sq: if sampled { vec![vec![0.0; edges]; chains] } else { Vec::new() },
            phases: vec![0; edges],
            best_single: vec![0.0; chains],
            staircase: 0,
            search: 0,
            pairs: 0,
            max_len: 0,
        }
    }

    fn merge(&mut self, o: Accum) {
        for (a, b) in self.loads.iter_mut().zip(o.loads) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.sq.iter_mut().zip(o.sq) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.phases.iter_mut().zip(o.phases).for_each(|(x, y)| *x |= y);
        for (a, b) in self.best_single.iter_mut().zip(o.best_single) {
            *a = a.max(b);
        }
        self.staircase += o.staircase;
        self.search += o.search;
        self.pairs += o.pairs;
        self.max_len = self.max_len.max(o.max_len);
    }

    fn add(&mut self, family: &PathFamily, router: &mut Router, x: usize, y: usize, chains: &[Chain], weight: f64) {
        let (kind, _) = family.route(x, y, router).expect("top-level states are connected");
        match kind {
            PathKind::Staircase => self.staircase += 1,
            PathKind::Search => self.search += 1,
            PathKind::Constructed => {}
        }
        self.pairs += 1;
        let t = &router.trace;
        self.max_len = self.max_len.max(t.phases.len());
        let sampled = !self.sq.is_empty();
        for (ci, ch) in chains.iter().enumerate() {
            let pair = ch.pi[x] * ch.pi[y];
            let w = pair * weight;
            let loads = &mut self.loads[ci];
            let mut min_q = f64::INFINITY;
            for s in 0..t.phases.len() {
                let e = t.idx[s].min(t.idx[s + 1]) * 4 + t.coords[s] as usize;
                loads[e] += w;
                if sampled {
                    self.sq[ci][e] += w * w;
                }
                min_q = min_q.min(ch.q[e]);
            }
            if !t.phases.is_empty() {
                self.best_single[ci] = self.best_single[ci].max(pair / min_q);
            }
        }
        for s in 0..t.phases.len() {
            let e = t.idx[s].min(t.idx[s + 1]) * 4 + t.coords[s] as usize;
            self.phases[e] |= t.phases[s].bit();
        }
    }
}

/// Stationary vector and edge flows `Q(e) = π(x)P(x, y)` of one chain.
struct Chain<'a> {
    pi: &'a [f64],
    q: Vec<f64>,
}

impl<'a> Chain<'a> {
    fn new(space: &StateSpace, kernel: &SparseKernel, pi: &'a [f64]) -> Self {
        let b = space.instance().bounds();
        let mut q = vec![0.0; space.len() * 4];
        for i in 0..space.len() {
            let k = space.cells(i);
            for c in 0..4 {
                if k[c] < b[c] {
                    q[i * 4 + c] = pi[i] * kernel.entry(i, i + space.stride(c));
                }
            }
        }
        Chain { pi, q }
    }
}

/// Congestion of the path family for each `(kernel, π)` pair, with every
/// ordered pair of top-level states routed once (or a uniform sample of them).
pub fn path_congestion_many(
    family: &PathFamily,
    chains: &[(&SparseKernel, &[f64])],
    mode: PairMode,
) -> Vec<CongestionReport> {
    let space = &family.space;
    let edges = space.len() * 4;
    let members = family.members();
    let chs: Vec<Chain> = chains.iter().map(|(k, pi)| Chain::new(space, k, pi)).collect();

    let total = match mode {
        PairMode::Exact => {
            const CHUNKS: usize = 32;
            let per = members.len().div_ceil(CHUNKS).max(1);
            let parts: Vec<Accum> = members
                .par_chunks(per)
                .map(|dests| {
                    let mut acc = Accum::new(edges, chs.len(), false);
                    let mut router = Router::default();
                    for &y in dests {
                        for &x in members {
                            if x != y {
                                acc.add(family, &mut router, x, y, &chs, 1.0);
                            }
                        }
                    }
                    acc
                })
                .collect();
            let mut it = parts.into_iter();
            let mut total = it.next().unwrap_or_else(|| Accum::new(edges, chs.len(), false));
            for p in it {
                total.merge(p);
            }
            total
        }
        PairMode::Sampled { pairs, seed } => {
            let mut acc = Accum::new(edges, chs.len(), true);
            let mut router = Router::default();
            let mut rng = stream_rng(seed, 0);
            let nm = members.len();
            let scale = (nm * nm) as f64 / pairs as f64;
            for _ in 0..pairs {
                let x = members[rng.gen_range(0..nm)];
                let y = members[rng.gen_range(0..nm)];
                if x != y {
                    acc.add(family, &mut router, x, y, &chs, scale);
                } else {
                    acc.pairs += 1;
                }
            }
            acc
        }
    };

    let mut conflicts = 0;
    let mut shared = 0;
    let bc = Phase::B.bit() | Phase::C.bit() | Phase::Track.bit();
    for (e, &mask) in total.phases.iter().enumerate() {
        let coord = e % 4;
        if (coord == 1 || coord == 2) && (mask & bc).count_ones() > 1 {
            conflicts += 1;
        }
        if (coord == 0 || coord == 3) && mask & Phase::Parity.bit() != 0 && mask & Phase::Walk.bit() != 0 {
            shared += 1;
        }
    }

    chs.iter()
        .enumerate()
        .map(|(ci, ch)| {
            let edge = |e: usize| {
                let from = space.cells(e / 4);
                let mut to = from;
                to[e % 4] += 1;
                (from, to)
            };
            let mut rows: Vec<(usize, f64)> = total.loads[ci]
                .iter()
                .enumerate()
                .filter(|(_, &l)| l > 0.0)
                .map(|(e, &l)| (e, l / ch.q[e]))
                .collect();
            rows.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let rho = rows.first().map_or(0.0, |r| r.1);
            let rho_ci95 = match mode {
                PairMode::Sampled { pairs, .. } => rows.first().map(|&(e, _)| {
                    let n = pairs as f64;
                    let mean = total.loads[ci][e] / n;
                    let var = (total.sq[ci][e] / n - mean * mean).max(0.0);
                    1.96 * (var * n).sqrt() / ch.q[e]
                }),
                PairMode::Exact => None,
            };
            let top_edges = rows
                .iter()
                .take(10)
                .map(|&(e, c)| {
                    let (from, to) = edge(e);
                    EdgeLoad { from, to, q: ch.q[e], load: total.loads[ci][e], congestion: c }
                })
                .collect();
            CongestionReport {
                rho,
                top_edges,
                max_single_pair: total.best_single[ci],
                pairs: total.pairs,
                staircase_fallbacks: total.staircase,
                search_fallbacks: total.search,
                phase_conflict_edges: conflicts,
                parity_walk_shared_edges: shared,
                max_path_len: total.max_len,
                rho_ci95,
            }
        })
        .collect()
}

pub fn path_congestion(family: &PathFamily, kernel: &SparseKernel, pi: &[f64]) -> CongestionReport {
    path_congestion_many(family, &[(kernel, pi)], PairMode::Exact).remove(0)
}

pub fn write_congestion_csv<W: Write>(mut w: W, report: &CongestionReport) -> Result<()> {
    writeln!(w, "edge_x,edge_y,congestion")?;
    let fmt = |k: Cells| format!("{}:{}:{}:{}", k[0], k[1], k[2], k[3]);
    for e in &report.top_edges {
        writeln!(w, "{},{},{}", fmt(e.from), fmt(e.to), fmt_float(e.congestion))?;
    }
    Ok(())
}

/// Conductance lower bound `1/(2ρ)` from a path congestion.
pub fn conductance_from_congestion(rho: f64) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!("congestion must be positive, got {rho}")));
    }
    Ok(1.0 / (2.0 * rho))
}

/// A conductance profile `Φ(r)`; values beyond `r = 1/2` are frozen at `Φ(1/2)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Profile {
    Constant(f64),
    /// `Φ(r) = c / (m r^{1/3})`.
    PowerLaw { c: f64, m: f64 },
    /// Step function: `Φ(r) = φ_i` on `[r_i, r_{i+1})`, and `φ_0` below `r_0`.
    Tabulated(Vec<(f64, f64)>),
}

impl Profile {
    fn raw(&self, r: f64) -> f64 {
        match self {
            Profile::Constant(p) => *p,
            Profile::PowerLaw { c, m } => c / (m * r.cbrt()),
            Profile::Tabulated(t) => {
                let i = t.partition_point(|&(ri, _)| ri <= r);
                t[i.saturating_sub(1)].1
            }
        }
    }

    pub fn at(&self, r: f64) -> f64 {
        self.raw(r.min(0.5))
    }

    fn breakpoints(&self) -> Vec<f64> {
        let mut b = vec![0.5];
        if let Profile::Tabulated(t) = self {
            b.extend(t.iter().map(|p| p.0));
        }
        b
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Profile::Constant(p) => *p > 0.0,
            Profile::PowerLaw { c, m } => *c > 0.0 && *m > 0.0,
            Profile::Tabulated(t) => {
                !t.is_empty() && t.iter().all(|p| p.1 > 0.0 && p.0 > 0.0) && t.windows(2).all(|w| w[0].0 < w[1].0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("profile values must be positive".into()))
        }
    }
}

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

/// `1 + ∫_{π*}^{4/κ} 4/(r Φ(r)²) dr`, integrated in `ln r` between the
/// profile's breakpoints.
pub fn bound_morris_peres(profile: &Profile, pi_star: f64, kappa: f64) -> Result<f64> {
    profile.validate()?;
    if !(pi_star > 0.0 && kappa > 0.0) {
        return Err(Error::InvalidArgument("pi_star and kappa must be positive".into()));
    }
    let (lo, hi) = (pi_star, 4.0 / kappa);
    if hi <= lo {
        return Ok(1.0);
    }
    let mut cuts: Vec<f64> = profile.breakpoints().into_iter().filter(|&r| r > lo && r < hi).collect();
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let f = |s: f64| {
        let p = profile.at(s.exp());
        4.0 / (p * p)
    };
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (a, b) = (w[0].ln(), w[1].ln());
        // Nudge inside the segment so step profiles are sampled on one side.
        let eps = (b - a) * 1e-12;
        let piece = simpson(&f, a + eps, b - eps, 1e-10 * (b - a));
        total += piece * (b - a) / (b - a - 2.0 * eps);
    }
    Ok(1.0 + total)
}

/// `φ̂⁻² (ln 1/π(x) + ln 1/κ)`.
pub fn bound_sinclair_jerrum(phi_hat: f64, pi_x: f64, kappa: f64) -> Result<f64> {
    if !(phi_hat > 0.0 && phi_hat <= 1.0 && pi_x > 0.0 && pi_x <= 1.0 && kappa > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need 0 < phi_hat <= 1, 0 < pi_x <= 1, kappa > 0 (got {phi_hat}, {pi_x}, {kappa})"
        )));
    }
    Ok(((1.0 / pi_x).ln() + (1.0 / kappa).ln()) / (phi_hat * phi_hat))
}
