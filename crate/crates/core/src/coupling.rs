//! Two-phase coupling of the full Gibbs sampler with a stationary copy:
//! independent evolution until the count vectors meet, then the
//! position-pairing coupling until the label vectors coincide.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::chains::{gibbs_step_r, AssignmentState, Topic};
use crate::error::{Error, Result};
use crate::exact_analysis::StateSpace;
use crate::posterior::{Cells, Instance, TopicCounts};
use crate::rng::{stream_rng, ChainRng};

/// Exact sampler for `π_L` over an enumerated state space.
#[derive(Debug, Clone)]
pub struct StationarySampler {
    space: StateSpace,
    cdf: Vec<f64>,
}

impl StationarySampler {
    pub fn new(space: &StateSpace, pi_l: &[f64]) -> Result<Self> {
        if pi_l.len() != space.len() {
            return Err(Error::Dimension(format!("{} weights for {} states", pi_l.len(), space.len())));
        }
        let mut acc = 0.0;
        let cdf = pi_l
            .iter()
            .map(|&p| {
                acc += p;
                acc
            })
            .collect();
        Ok(StationarySampler { space: space.clone(), cdf })
    }

    pub fn sample_cells<R: Rng>(&self, rng: &mut R) -> Cells {
        let u = rng.gen::<f64>() * self.cdf.last().copied().unwrap_or(0.0);
        let i = self.cdf.partition_point(|&c| c <= u).min(self.cdf.len() - 1);
        self.space.cells(i)
    }

    /// Counts from `π_L`, then topic-A labels placed uniformly inside each cell.
    pub fn sample_assignment<R: Rng>(&self, rng: &mut R) -> AssignmentState {
        let k = self.sample_cells(rng);
        AssignmentState::random_within_cells(self.space.instance().corpus(), &TopicCounts::from_cells(k), rng)
            .expect("sampled counts lie inside the corpus")
    }
}

/// One exact draw from `π_R` on an enumerated state space.
pub fn sample_stationary_assignment(space: &StateSpace, pi_l: &[f64], seed: u64) -> Result<AssignmentState> {
    let sampler = StationarySampler::new(space, pi_l)?;
    Ok(sampler.sample_assignment(&mut stream_rng(seed, 0)))
}

fn slice_states(inst: &Instance, a: u32) -> impl Iterator<Item = Cells> + '_ {
    let b = inst.bounds();
    (0..=b[1]).flat_map(move |bb| (0..=b[2]).flat_map(move |c| (0..=b[3]).map(move |d| [a, bb, c, d])))
}

/// `count` exact draws from `π_L` without materializing the state space,
/// so it works at any `m`. Draws come back in request order.
pub fn sample_lumped_streaming<R: Rng>(inst: &Instance, count: usize, rng: &mut R) -> Vec<Cells> {
    let na = inst.bounds()[0];
    let top = (0..=na)
        .into_par_iter()
        .map(|a| slice_states(inst, a).map(|k| inst.log_pi_l(k)).fold(f64::NEG_INFINITY, f64::max))
        .reduce(|| f64::NEG_INFINITY, f64::max);
    let slice_mass: Vec<f64> = (0..=na)
        .into_par_iter()
        .map(|a| slice_states(inst, a).map(|k| (inst.log_pi_l(k) - top).exp()).sum())
        .collect();
    let total: f64 = slice_mass.iter().sum();

    let targets: Vec<f64> = (0..count).map(|_| rng.gen::<f64>() * total).collect();
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&i, &j| targets[i].total_cmp(&targets[j]));
    let mut out = vec![[0; 4]; count];
    let mut before = 0.0;
    let mut next = 0;
    for a in 0..=na {
        let after = before + slice_mass[a as usize];
        if next < count && (targets[order[next]] < after || a == na) {
            let mut acc = before;
            let mut last = None;
            for k in slice_states(inst, a) {
                let w = (inst.log_pi_l(k) - top).exp();
                if w > 0.0 {
                    last = Some(k);
                }
                acc += w;
                while next < count && targets[order[next]] < acc {
                    out[order[next]] = k;
                    next += 1;
                }
            }
            // Rounding can leave the largest targets just past the final sum.
            while a == na && next < count {
                out[order[next]] = last.expect("π_L has positive mass");
                next += 1;
            }
        }
        before = after;
    }
    out
}

/// Two copies of the full sampler with the pairing used in phase 2.
#[derive(Debug, Clone)]
pub struct CoupledPair {
    chain1: AssignmentState,
    chain2: AssignmentState,
    partner: Option<Vec<u32>>,
    disagreements: usize,
}

fn count_disagreements(x: &AssignmentState, y: &AssignmentState) -> usize {
    x.labels().iter().zip(y.labels()).filter(|(a, b)| a != b).count()
}

impl CoupledPair {
    pub fn new(chain1: AssignmentState, chain2: AssignmentState) -> Result<Self> {
        if chain1.corpus() != chain2.corpus()
            || chain1.len() != chain2.len()
            || (0..chain1.len()).any(|p| chain1.cell_of(p) != chain2.cell_of(p))
        {
            return Err(Error::Dimension("coupled chains must share the corpus layout".into()));
        }
        let disagreements = count_disagreements(&chain1, &chain2);
        Ok(CoupledPair { chain1, chain2, partner: None, disagreements })
    }

    pub fn chain1(&self) -> &AssignmentState {
        &self.chain1
    }

    pub fn chain2(&self) -> &AssignmentState {
        &self.chain2
    }

    /// Number of positions whose labels differ.
    pub fn disagreements(&self) -> usize {
        self.disagreements
    }

    pub fn lumped_agree(&self) -> bool {
        self.chain1.counts() == self.chain2.counts()
    }

    pub fn coalesced(&self) -> bool {
        self.disagreements == 0
    }

    pub fn pairing(&self) -> Option<&[u32]> {
        self.partner.as_deref()
    }

    /// Pairs agreeing positions with themselves and, inside each cell, the
    /// i-th (A, B) disagreement with the i-th (B, A) one in position order.
    fn build_pairing(&mut self) {
        let n = self.chain1.len();
        let mut partner: Vec<u32> = (0..n as u32).collect();
        let mut queues: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for p in 0..n {
            let (x, y) = (self.chain1.labels()[p], self.chain2.labels()[p]);
            if x != y {
                let q = queues.entry(self.chain1.cell_of(p)).or_default();
                if x == Topic::A {
                    q.0.push(p);
                } else {
                    q.1.push(p);
                }
            }
        }
        for (ab, ba) in queues.values() {
            debug_assert_eq!(ab.len(), ba.len());
            for (&p, &q) in ab.iter().zip(ba) {
                partner[p] = q as u32;
                partner[q] = p as u32;
            }
        }
        self.partner = Some(partner);
    }

    /// Checks the bijection conditions of the current pairing.
    pub fn pairing_valid(&self) -> bool {
        let Some(partner) = &self.partner else { return false };
        let (l1, l2) = (self.chain1.labels(), self.chain2.labels());
        (0..partner.len()).all(|p| {
            let q = partner[p] as usize;
            if partner[q] as usize != p {
                return false;
            }
            if l1[p] == l2[p] {
                q == p
            } else {
                q != p
                    && self.chain1.cell_of(q) == self.chain1.cell_of(p)
                    && l1[q] != l2[q]
                    && l1[q] != l1[p]
                    && l2[q] == l1[p]
            }
        })
    }
}

/// Runs both chains independently until their count vectors coincide.
/// Returns `None` if that does not happen within `t_limit` steps.
pub fn phase1_until_lumped_meet<R: Rng>(pair: &mut CoupledPair, t_limit: u64, rng: &mut R) -> Option<u64> {
    pair.partner = None;
    let mut met = pair.lumped_agree().then_some(0);
    let mut t = 0;
    while met.is_none() && t < t_limit {
        gibbs_step_r(&mut pair.chain1, rng);
        gibbs_step_r(&mut pair.chain2, rng);
        t += 1;
        if pair.lumped_agree() {
            met = Some(t);
        }
    }
    pair.disagreements = count_disagreements(&pair.chain1, &pair.chain2);
    met
}

/// One coupled step: a uniform position for the first chain, its partner for
/// the second, and a single uniform threshold for both resamples.
pub fn phase2_pairing_step<R: Rng>(pair: &mut CoupledPair, rng: &mut R) -> Result<()> {
    if !pair.lumped_agree() {
        return Err(Error::LumpedDisagreement);
    }
    if pair.partner.is_none() {
        pair.build_pairing();
    }
    let p = rng.gen_range(0..pair.chain1.len());
    let u = rng.gen::<f64>();
    let q = pair.partner.as_ref().unwrap()[p] as usize;
    pair.chain1.resample_with(p, u);
    pair.chain2.resample_with(q, u);
    if p != q && pair.chain1.labels()[p] == pair.chain2.labels()[p] {
        debug_assert_eq!(pair.chain1.labels()[q], pair.chain2.labels()[q]);
        let partner = pair.partner.as_mut().unwrap();
        partner[p] = p as u32;
        partner[q] = q as u32;
        pair.disagreements -= 2;
    }
    Ok(())
}

/// Outcome of running phase 2 to coalescence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Phase2Run {
    pub steps: u64,
    pub initial_disagreements: usize,
    /// Steps spent at each disagreement level `D = 2j`, keyed by `j`.
    pub holding: Vec<(u32, u64)>,
    /// Steps after which `D` grew (must stay zero).
    pub increases: u64,
}

/// Runs phase 2 until the chains coincide or `t_limit` steps pass.
pub fn phase2_until_coalesce<R: Rng>(pair: &mut CoupledPair, t_limit: u64, rng: &mut R) -> Result<Option<Phase2Run>> {
    let mut run = Phase2Run { initial_disagreements: pair.disagreements(), ..Default::default() };
    let mut held = 0u64;
    while !pair.coalesced() {
        if run.steps == t_limit {
            return Ok(None);
        }
        let before = pair.disagreements();
        phase2_pairing_step(pair, rng)?;
        run.steps += 1;
        held += 1;
        let after = pair.disagreements();
        if after > before {
            run.increases += 1;
        }
        if after != before {
            run.holding.push(((before / 2) as u32, held));
            held = 0;
        }
    }
    Ok(Some(run))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CouplingBound {
    /// Empirical `P(T > t)`.
    pub estimate: f64,
    pub std_error: f64,
    /// Wilson 95% interval.
    pub lower95: f64,
    pub upper95: f64,
}

/// Coupling-inequality bound on the distance to stationarity at time `t`.
/// Missing meeting times (timeouts) count as `T > t`.
pub fn coupling_tv_bound(samples: &[Option<u64>], t: u64) -> Result<CouplingBound> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no coupling-time samples".into()));
    }
    let n = samples.len() as f64;
    let over = samples.iter().filter(|s| s.map_or(true, |v| v > t)).count() as f64;
    let p = over / n;
    let z = 1.96;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    Ok(CouplingBound {
        estimate: p,
        std_error: (p * (1.0 - p) / n).sqrt(),
        lower95: (centre - half).clamp(0.0, p),
        upper95: (centre + half).clamp(p, 1.0),
    })
}

/// Worst excess of the empirical survival of phase-2 holding times over the
/// geometric law with success probability `j/(4m)`, in standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct DominationReport {
    pub levels_checked: usize,
    pub worst_excess_se: f64,
    pub worst_level: u32,
    pub passed: bool,
}

pub fn check_geometric_domination(runs: &[Phase2Run], m: u32, min_samples: usize) -> DominationReport {
    let mut by_level: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for r in runs {
        for &(j, h) in &r.holding {
            by_level.entry(j).or_default().push(h);
        }
    }
    let mut worst = f64::NEG_INFINITY;
    let mut worst_level = 0;
    let mut checked = 0;
    for (&j, hs) in &by_level {
        if hs.len() < min_samples {
            continue;
        }
        checked += 1;
        let p = j as f64 / (4.0 * m as f64);
        let n = hs.len() as f64;
        let tmax = *hs.iter().max().unwrap();
        for t in 1..=tmax {
            let emp = hs.iter().filter(|&&h| h > t).count() as f64 / n;
            let geo = (1.0 - p).powf(t as f64);
            let se = (geo * (1.0 - geo) / n).sqrt().max(1.0 / n);
            let excess = (emp - geo) / se;
            if excess > worst {
                worst = excess;
                worst_level = j;
            }
        }
    }
    DominationReport { levels_checked: checked, worst_excess_se: worst, worst_level, passed: checked > 0 && worst <= 3.0 }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum CouplingStart {
    /// First chain from these counts with canonical labels, second from `π_R`.
    FromCounts(Cells),
    /// Both chains share counts drawn from `π_L`, with independent label placements.
    LumpedAgreement,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CouplingConfig {
    pub m: u32,
    pub replicas: usize,
    pub seed: u64,
    pub phase1_limit: u64,
    pub phase2_limit: u64,
    pub start: CouplingStart,
}

impl CouplingConfig {
    pub fn new(m: u32, replicas: usize, seed: u64, start: CouplingStart) -> Self {
        CouplingConfig { m, replicas, seed, phase1_limit: 10_000_000, phase2_limit: 100_000_000, start }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaResult {
    pub replica: usize,
    pub phase1: Option<u64>,
    pub phase2: Option<Phase2Run>,
}

impl ReplicaResult {
    pub fn total(&self) -> Option<u64> {
        Some(self.phase1? + self.phase2.as_ref()?.steps)
    }
}

/// Runs independent replicas; replica `r` uses RNG stream `r + 1` and the
/// stationary draws come from stream 0.
pub fn run_coupling(cfg: &CouplingConfig) -> Result<Vec<ReplicaResult>> {
    if cfg.replicas == 0 {
        return Err(Error::InvalidArgument("at least one replica required".into()));
    }
    let inst = Instance::new(cfg.m)?;
    let corpus = inst.corpus().clone();
    let draws = sample_lumped_streaming(&inst, cfg.replicas, &mut stream_rng(cfg.seed, 0));
    if let CouplingStart::FromCounts(k) = cfg.start {
        if !inst.contains(k) {
            return Err(Error::InvalidArgument(format!("start {k:?} outside the state space")));
        }
    }
    (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng: ChainRng = stream_rng(cfg.seed, r as u64 + 1);
            let stationary = AssignmentState::random_within_cells(&corpus, &TopicCounts::from_cells(draws[r]), &mut rng)?;
            let first = match cfg.start {
                CouplingStart::FromCounts(k) => AssignmentState::canonical(&corpus, &TopicCounts::from_cells(k))?,
                CouplingStart::LumpedAgreement => {
                    AssignmentState::random_within_cells(&corpus, &TopicCounts::from_cells(draws[r]), &mut rng)?
                }
            };
            let mut pair = CoupledPair::new(first, stationary)?;
            let phase1 = phase1_until_lumped_meet(&mut pair, cfg.phase1_limit, &mut rng);
            let phase2 = match phase1 {
                Some(_) => phase2_until_coalesce(&mut pair, cfg.phase2_limit, &mut rng)?,
                None => None,
            };
            Ok(ReplicaResult { replica: r, phase1, phase2 })
        })
        .collect()
}

/// Fresh phase-2 start: counts from `π_L` shared by both chains, with
/// independent uniform label placements.
pub fn fresh_lumped_pair<R: Rng>(inst: &Instance, rng: &mut R) -> Result<CoupledPair> {
    let k = TopicCounts::from_cells(sample_lumped_streaming(inst, 1, rng)[0]);
    let a = AssignmentState::random_within_cells(inst.corpus(), &k, rng)?;
    let b = AssignmentState::random_within_cells(inst.corpus(), &k, rng)?;
    CoupledPair::new(a, b)
}

/// Repeats phase 2 from one fixed pair; replica `r` uses stream `r + 1`.
pub fn run_phase2_from(pair: &CoupledPair, replicas: usize, seed: u64, t_limit: u64) -> Result<Vec<Option<Phase2Run>>> {
    if !pair.lumped_agree() {
        return Err(Error::LumpedDisagreement);
    }
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut p = pair.clone();
            phase2_until_coalesce(&mut p, t_limit, &mut stream_rng(seed, r as u64 + 1))
        })
        .collect()
}

pub fn write_coupling_csv<W: Write>(mut w: W, results: &[ReplicaResult]) -> Result<()> {
    writeln!(w, "replica,phase1_T,phase2_T,total_T")?;
    let opt = |v: Option<u64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    for r in results {
        writeln!(
            w,
            "{},{},{},{}",
            r.replica,
            opt(r.phase1),
            opt(r.phase2.as_ref().map(|p| p.steps)),
            opt(r.total())
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CouplingSummary {
    pub m: u32,
    pub replicas: usize,
    pub seed: u64,
    pub phase1_mean: f64,
    pub phase1_median: f64,
    pub phase1_timeouts: usize,
    pub phase2_mean: f64,
    pub phase2_variance: f64,
    pub phase2_timeouts: usize,
    pub total_mean: f64,
    /// `3 m ln m`
    pub phase2_mean_target: f64,
    /// `7 m²`
    pub phase2_variance_target: f64,
    pub disagreement_increases: u64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub fn summarize(cfg: &CouplingConfig, results: &[ReplicaResult]) -> CouplingSummary {
    let p1: Vec<f64> = results.iter().filter_map(|r| r.phase1).map(|v| v as f64).collect();
    let p2: Vec<f64> = results.iter().filter_map(|r| r.phase2.as_ref()).map(|p| p.steps as f64).collect();
    let tot: Vec<f64> = results.iter().filter_map(|r| r.total()).map(|v| v as f64).collect();
    let (p1m, _) = mean_var(&p1);
    let (p2m, p2v) = mean_var(&p2);
    let m = cfg.m as f64;
    CouplingSummary {
        m: cfg.m,
        replicas: results.len(),
        seed: cfg.seed,
        phase1_mean: p1m,
        phase1_median: median(p1.clone()),
        phase1_timeouts: results.len() - p1.len(),
        phase2_mean: p2m,
        phase2_variance: p2v,
        phase2_timeouts: results.iter().filter(|r| r.phase1.is_some() && r.phase2.is_none()).count(),
        total_mean: mean_var(&tot).0,
        phase2_mean_target: 3.0 * m * m.ln(),
        phase2_variance_target: 7.0 * m * m,
        disagreement_increases: results.iter().filter_map(|r| r.phase2.as_ref()).map(|p| p.increases).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact_analysis::{stationary_vector, tv_distance, KernelKind, DEFAULT_CAP};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn space10() -> (StateSpace, Vec<f64>) {
        let s = StateSpace::new(10, DEFAULT_CAP).unwrap();
        let pi = stationary_vector(&s, KernelKind::L);
        (s, pi)
    }

    /// Chi-square goodness of fit with bins of expected count below 5 pooled.
    fn gof_pvalue(counts: &[f64], pi: &[f64], n: f64) -> f64 {
        let (mut chi2, mut bins, mut pool_o, mut pool_e) = (0.0, 0usize, 0.0, 0.0);
        for (o, p) in counts.iter().zip(pi) {
            let e = p * n;
            if e >= 5.0 {
                chi2 += (o - e).powi(2) / e;
                bins += 1;
            } else {
                pool_o += o;
                pool_e += e;
            }
        }
        if pool_e > 0.0 {
            chi2 += (pool_o - pool_e).powi(2) / pool_e;
            bins += 1;
        }
        1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2)
    }

    #[test]
    fn stationary_counts_match_pi_l() {
        let (s, pi) = space10();
        let n = 100_000;
        // Expected TV of an exact sampler's histogram from sampling noise alone.
        let floor = 0.5 * pi.iter().map(|p| p.sqrt()).sum::<f64>() * (2.0 / (std::f64::consts::PI * n as f64)).sqrt();
        let sampler = StationarySampler::new(&s, &pi).unwrap();
        let mut rng = stream_rng(5, 0);
        let streamed = sample_lumped_streaming(s.instance(), n, &mut stream_rng(6, 0));
        let draws: [Vec<Cells>; 2] = [(0..n).map(|_| sampler.sample_cells(&mut rng)).collect(), streamed];
        for d in draws {
            let mut counts = vec![0.0; s.len()];
            for k in d {
                counts[s.index(k)] += 1.0;
            }
            let hist: Vec<f64> = counts.iter().map(|c| c / n as f64).collect();
            assert!(tv_distance(&hist, &pi) < floor + 0.01);
            assert!(gof_pvalue(&counts, &pi, n as f64) > 0.001);
        }
    }

    #[test]
    fn within_cell_positions_uniform() {
        // Fix the counts and check the A-label positions of one cell.
        let (s, pi) = space10();
        let sampler = StationarySampler::new(&s, &pi).unwrap();
        let mut rng = stream_rng(8, 0);
        let cell = 1;
        let n_cell = s.instance().corpus().cells()[cell] as usize;
        let offset = s.instance().corpus().cells()[..cell].iter().sum::<u64>() as usize;
        let mut hits = vec![0.0; n_cell];
        let mut total = 0.0;
        for _ in 0..100_000 {
            let st = sampler.sample_assignment(&mut rng);
            for p in 0..n_cell {
                if st.labels()[offset + p] == Topic::A {
                    hits[p] += 1.0;
                    total += 1.0;
                }
            }
        }
        let e = total / n_cell as f64;
        let chi2: f64 = hits.iter().map(|h| (h - e).powi(2) / e).sum();
        let pval = 1.0 - ChiSquared::new((n_cell - 1) as f64).unwrap().cdf(chi2);
        assert!(pval > 0.001, "p = {pval}");
    }

    #[test]
    fn same_seed_same_sample() {
        let (s, pi) = space10();
        assert_eq!(sample_stationary_assignment(&s, &pi, 3).unwrap(), sample_stationary_assignment(&s, &pi, 3).unwrap());
        assert!(StateSpace::new(70, DEFAULT_CAP).is_err());
    }

    fn fresh_pair(m: u32, rng: &mut ChainRng) -> CoupledPair {
        fresh_lumped_pair(&Instance::new(m).unwrap(), rng).unwrap()
    }

    #[test]
    fn identical_starts_meet_immediately_and_stay_together() {
        let inst = Instance::new(10).unwrap();
        let st = AssignmentState::canonical(inst.corpus(), &TopicCounts::from_cells([1, 3, 2, 2])).unwrap();
        let mut pair = CoupledPair::new(st.clone(), st).unwrap();
        let mut rng = stream_rng(1, 0);
        assert_eq!(phase1_until_lumped_meet(&mut pair, 10, &mut rng), Some(0));
        for _ in 0..1000 {
            phase2_pairing_step(&mut pair, &mut rng).unwrap();
            assert_eq!(pair.chain1(), pair.chain2());
        }
    }

    #[test]
    fn phase2_rejects_lumped_disagreement() {
        let inst = Instance::new(10).unwrap();
        let a = AssignmentState::canonical(inst.corpus(), &TopicCounts::from_cells([1, 3, 2, 2])).unwrap();
        let b = AssignmentState::canonical(inst.corpus(), &TopicCounts::from_cells([1, 3, 2, 1])).unwrap();
        let mut pair = CoupledPair::new(a, b).unwrap();
        assert_eq!(phase2_pairing_step(&mut pair, &mut stream_rng(1, 0)), Err(Error::LumpedDisagreement));
    }

    #[test]
    fn phase2_audit_m20() {
        let mut rng = stream_rng(11, 0);
        let mut steps = 0u64;
        while steps < 1_000_000 {
            let mut pair = fresh_pair(20, &mut rng);
            assert!(pair.lumped_agree());
            assert_eq!(pair.disagreements() % 2, 0);
            for _ in 0..2000 {
                let before = pair.disagreements();
                phase2_pairing_step(&mut pair, &mut rng).unwrap();
                steps += 1;
                assert!(pair.disagreements() <= before);
                assert_eq!(pair.disagreements() % 2, 0);
                assert!(pair.lumped_agree());
                if steps % 97 == 0 {
                    assert!(pair.pairing_valid());
                    assert_eq!(pair.disagreements(), count_disagreements(pair.chain1(), pair.chain2()));
                }
            }
        }
    }

    #[test]
    fn phase1_meets_at_m10() {
        let (s, _) = space10();
        let cfg = CouplingConfig {
            phase1_limit: 1_000_000,
            ..CouplingConfig::new(10, 1000, 2, CouplingStart::FromCounts(s.mode_l()))
        };
        let res = run_coupling(&cfg).unwrap();
        assert!(res.iter().all(|r| r.phase1.is_some() && r.phase2.is_some()));
        assert!(res.iter().all(|r| r.phase2.as_ref().unwrap().increases == 0));
    }

    #[test]
    fn tv_bound_properties() {
        let samples: Vec<Option<u64>> = (1..=100).map(Some).collect();
        let b = coupling_tv_bound(&samples, 100).unwrap();
        assert_eq!(b.estimate, 0.0);
        let mut last = 1.0;
        for t in 0..=100 {
            let b = coupling_tv_bound(&samples, t).unwrap();
            assert!(b.estimate <= last);
            assert!(b.lower95 <= b.estimate && b.estimate <= b.upper95);
            last = b.estimate;
        }
        assert!(coupling_tv_bound(&[], 3).is_err());
        assert_eq!(coupling_tv_bound(&[None], 10).unwrap().estimate, 1.0);
    }

    #[test]
    fn csv_and_determinism() {
        let cfg = CouplingConfig::new(10, 8, 4, CouplingStart::LumpedAgreement);
        let a = run_coupling(&cfg).unwrap();
        let b = run_coupling(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.phase1 == Some(0)));
        let mut buf = Vec::new();
        write_coupling_csv(&mut buf, &a).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("replica,phase1_T,phase2_T,total_T\n"));
        assert_eq!(text.lines().count(), 9);
    }
}
