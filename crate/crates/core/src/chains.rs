//! Simulators: the collapsed Gibbs sampler over labels (R), its projection
//! onto count vectors (L), and the Metropolis walk targeting `exp(m·g)` (Z).

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::combinatorics::logistic_share;
use crate::error::{Error, Result};
use crate::exact_analysis::LevelSet;
use crate::posterior::{conditional_a, log_pi_r_general, Cells, CorpusCounts, Instance, TopicCounts};
use crate::rng::ChainRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Topic {
    A,
    B,
}

impl Topic {
    pub fn bit(self) -> u8 {
        match self {
            Topic::A => 0,
            Topic::B => 1,
        }
    }
}

/// Full Gibbs state: one label per token position, positions grouped by
/// document, with cached counts.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentState {
    corpus: CorpusCounts,
    doc_offsets: Vec<usize>,
    cell_of: Vec<u32>,
    labels: Vec<Topic>,
    counts: TopicCounts,
    k_doc: Vec<u64>,
    k_word: Vec<u64>,
    k_total: u64,
}

impl AssignmentState {
    /// Builds a state from explicit `(document, word)` positions. Positions
    /// must be listed document by document.
    pub fn from_positions(
        corpus: &CorpusCounts,
        positions: Vec<(usize, usize)>,
        labels: Vec<Topic>,
    ) -> Result<Self> {
        if positions.len() != labels.len() {
            return Err(Error::Dimension("one label per position required".into()));
        }
        let (docs, words) = (corpus.docs(), corpus.words());
        let mut seen = vec![0u64; docs * words];
        let mut doc_offsets = vec![0usize; docs + 1];
        let mut last_doc = 0;
        let mut cell_of = Vec::with_capacity(positions.len());
        for (i, &(d, j)) in positions.iter().enumerate() {
            if d >= docs || j >= words {
                return Err(Error::Dimension(format!("position ({d}, {j}) outside the corpus")));
            }
            if d < last_doc {
                return Err(Error::InvalidArgument("positions must be grouped by document".into()));
            }
            for dd in last_doc + 1..=d {
                doc_offsets[dd] = i;
            }
            last_doc = d;
            seen[d * words + j] += 1;
            cell_of.push((d * words + j) as u32);
        }
        for dd in last_doc + 1..=docs {
            doc_offsets[dd] = positions.len();
        }
        if seen != corpus.cells() {
            return Err(Error::Dimension("positions do not reproduce the corpus counts".into()));
        }
        let mut s = AssignmentState {
            corpus: corpus.clone(),
            doc_offsets,
            cell_of,
            labels,
            counts: TopicCounts::zeros(docs, words),
            k_doc: vec![0; docs],
            k_word: vec![0; words],
            k_total: 0,
        };
        s.rebuild_cache();
        Ok(s)
    }

    fn layout(corpus: &CorpusCounts) -> Vec<(usize, usize)> {
        let mut positions = Vec::with_capacity(corpus.total() as usize);
        for d in 0..corpus.docs() {
            for j in 0..corpus.words() {
                for _ in 0..corpus.get(d, j) {
                    positions.push((d, j));
                }
            }
        }
        positions
    }

    /// Positions laid out word by word inside each document; in every cell
    /// the first `k_dj` positions carry topic A.
    pub fn canonical(corpus: &CorpusCounts, k: &TopicCounts) -> Result<Self> {
        k.check_within(corpus)?;
        let positions = Self::layout(corpus);
        let mut labels = Vec::with_capacity(positions.len());
        for d in 0..corpus.docs() {
            for j in 0..corpus.words() {
                let a = k.get(d, j);
                for i in 0..corpus.get(d, j) {
                    labels.push(if i < a { Topic::A } else { Topic::B });
                }
            }
        }
        Self::from_positions(corpus, positions, labels)
    }

    /// Like [`canonical`](Self::canonical) but with the A labels placed
    /// uniformly at random inside each cell.
    pub fn random_within_cells<R: Rng>(corpus: &CorpusCounts, k: &TopicCounts, rng: &mut R) -> Result<Self> {
        let mut s = Self::canonical(corpus, k)?;
        let mut start = 0;
        for &n in corpus.cells() {
            let n = n as usize;
            s.labels[start..start + n].shuffle(rng);
            start += n;
        }
        Ok(s)
    }

    fn rebuild_cache(&mut self) {
        let (docs, words) = (self.corpus.docs(), self.corpus.words());
        let mut counts = TopicCounts::zeros(docs, words);
        for (i, &t) in self.labels.iter().enumerate() {
            if t == Topic::A {
                counts.cells_mut()[self.cell_of[i] as usize] += 1;
            }
        }
        self.k_doc = (0..docs).map(|d| counts.doc_total(d)).collect();
        self.k_word = (0..words).map(|j| counts.word_total(j)).collect();
        self.k_total = counts.total();
        self.counts = counts;
    }

    pub fn corpus(&self) -> &CorpusCounts {
        &self.corpus
    }

    pub fn counts(&self) -> &TopicCounts {
        &self.counts
    }

    pub fn labels(&self) -> &[Topic] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Flat `(document, word)` cell index of a position.
    pub fn cell_of(&self, pos: usize) -> usize {
        self.cell_of[pos] as usize
    }

    /// Labels as 0 (A) / 1 (B), one array per document.
    pub fn labels_by_document(&self) -> Vec<Vec<u8>> {
        self.doc_offsets
            .windows(2)
            .map(|w| self.labels[w[0]..w[1]].iter().map(|t| t.bit()).collect())
            .collect()
    }

    /// Counts recomputed from the labels.
    pub fn recount(&self) -> TopicCounts {
        let mut c = self.clone();
        c.rebuild_cache();
        c.counts
    }

    pub fn set_label(&mut self, pos: usize, topic: Topic) {
        let old = self.labels[pos];
        if old == topic {
            return;
        }
        let cell = self.cell_of[pos] as usize;
        let (d, j) = (cell / self.corpus.words(), cell % self.corpus.words());
        let inc = topic == Topic::A;
        let apply = |x: &mut u64| if inc { *x += 1 } else { *x -= 1 };
        apply(&mut self.counts.cells_mut()[cell]);
        apply(&mut self.k_doc[d]);
        apply(&mut self.k_word[j]);
        apply(&mut self.k_total);
        self.labels[pos] = topic;
    }

    /// Exact conditional probability that `pos` carries topic A given all
    /// other labels.
    pub fn conditional_prob_a(&self, pos: usize) -> f64 {
        let cell = self.cell_of[pos] as usize;
        let words = self.corpus.words();
        let (d, j) = (cell / words, cell % words);
        let own = (self.labels[pos] == Topic::A) as u64;
        conditional_a(
            self.corpus.total() as f64,
            (self.k_total - own) as f64,
            self.corpus.doc_total(d) as f64,
            (self.k_doc[d] - own) as f64,
            self.corpus.word_total(j) as f64,
            (self.k_word[j] - own) as f64,
        )
    }

    /// Redraws the label at `pos` from its conditional, using `u ∈ [0,1)`.
    pub fn resample_with(&mut self, pos: usize, u: f64) -> Topic {
        let t = if u < self.conditional_prob_a(pos) { Topic::A } else { Topic::B };
        self.set_label(pos, t);
        t
    }

    pub fn resample_position<R: Rng>(&mut self, pos: usize, rng: &mut R) -> Topic {
        let u = rng.gen::<f64>();
        self.resample_with(pos, u)
    }
}

/// One step of the random-scan Gibbs sampler R.
pub fn gibbs_step_r<R: Rng>(state: &mut AssignmentState, rng: &mut R) {
    let pos = rng.gen_range(0..state.len());
    state.resample_position(pos, rng);
}

/// Exact distribution of the counts after one R step from `state`, obtained
/// from ratios of the per-assignment weight rather than the closed-form
/// conditional.
pub fn projected_r_step(state: &AssignmentState) -> Result<BTreeMap<Cells, f64>> {
    let corpus = state.corpus();
    let base = state.counts().to_cells()?;
    let n = state.len() as f64;
    let mut out = BTreeMap::new();
    for pos in 0..state.len() {
        let cell = state.cell_of(pos);
        let mut with_a = base;
        let mut with_b = base;
        if state.labels()[pos] == Topic::A {
            with_b[cell] -= 1;
        } else {
            with_a[cell] += 1;
        }
        let la = log_pi_r_general(corpus, &TopicCounts::from_cells(with_a))?.value();
        let lb = log_pi_r_general(corpus, &TopicCounts::from_cells(with_b))?.value();
        let pa = logistic_share(la, lb);
        *out.entry(with_a).or_insert(0.0) += pa / n;
        *out.entry(with_b).or_insert(0.0) += (1.0 - pa) / n;
    }
    Ok(out)
}

/// Exact one-step distribution of L from `k`, with the holding mass under `k`.
pub fn lumped_row(inst: &Instance, k: Cells) -> Vec<(Cells, f64)> {
    let n = inst.bounds();
    let tokens = 2.0 * inst.m() as f64;
    let mut out = Vec::with_capacity(9);
    let mut moved = 0.0;
    for i in 0..4 {
        if k[i] > 0 {
            let mut rest = k;
            rest[i] -= 1;
            let p = k[i] as f64 / tokens * (1.0 - inst.prob_topic_a(rest, i));
            out.push((rest, p));
            moved += p;
        }
        if k[i] < n[i] {
            let mut up = k;
            up[i] += 1;
            let p = (n[i] - k[i]) as f64 / tokens * inst.prob_topic_a(k, i);
            out.push((up, p));
            moved += p;
        }
    }
    out.push((k, 1.0 - moved));
    out
}

fn allowed(restriction: Option<&LevelSet>, inst: &Instance, k: Cells) -> bool {
    restriction.map_or(true, |r| r.contains_cells(inst, k))
}

/// One step of L: a uniformly chosen token is relabelled from its exact
/// conditional. With a restriction, moves leaving it are replaced by holding.
pub fn lumped_step_l<R: Rng>(inst: &Instance, k: Cells, rng: &mut R, restriction: Option<&LevelSet>) -> Cells {
    let n = inst.bounds();
    let mut t = rng.gen_range(0..2 * inst.m());
    let mut cell = 0;
    while t >= n[cell] {
        t -= n[cell];
        cell += 1;
    }
    let is_a = t < k[cell];
    let mut rest = k;
    if is_a {
        rest[cell] -= 1;
    }
    let next = if rng.gen::<f64>() < inst.prob_topic_a(rest, cell) {
        let mut x = rest;
        x[cell] += 1;
        x
    } else {
        rest
    };
    if next != k && !allowed(restriction, inst, next) {
        k
    } else {
        next
    }
}

/// One step of Z: propose one of the eight unit neighbours uniformly, reject
/// proposals off the grid or outside the restriction, otherwise accept with
/// probability `π_Z(k′)/(π_Z(k′) + π_Z(k))`.
pub fn metropolis_step_z<R: Rng>(inst: &Instance, k: Cells, rng: &mut R, restriction: Option<&LevelSet>) -> Cells {
    let dir = rng.gen_range(0..8);
    let (cell, up) = (dir / 2, dir % 2 == 0);
    let u = rng.gen::<f64>();
    let mut next = k;
    if up {
        if k[cell] == inst.bounds()[cell] {
            return k;
        }
        next[cell] += 1;
    } else {
        if k[cell] == 0 {
            return k;
        }
        next[cell] -= 1;
    }
    if !allowed(restriction, inst, next) {
        return k;
    }
    if u < z_acceptance(inst, k, next) {
        next
    } else {
        k
    }
}

#[inline]
pub(crate) fn z_acceptance(inst: &Instance, from: Cells, to: Cells) -> f64 {
    logistic_share(inst.log_pi_z(to), inst.log_pi_z(from))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainKind {
    FullR,
    LumpedL,
    MetropolisZ,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub kind: ChainKind,
    /// Confine the chain to the level set `B_j`.
    pub restriction: Option<u32>,
    pub seed: u64,
    pub stream: u64,
    pub corpus: CorpusCounts,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restriction.is_some() && self.kind == ChainKind::FullR {
            return Err(Error::InvalidArgument(
                "level-set restriction applies to the lumped and Metropolis chains only".into(),
            ));
        }
        if self.kind != ChainKind::FullR && self.corpus.theorem_scale().is_none() {
            return Err(Error::InvalidArgument(
                "lumped and Metropolis chains run on the theorem instance".into(),
            ));
        }
        Ok(())
    }
}

/// A running chain of any kind.
pub struct Chain {
    kind: ChainKind,
    inst: Option<Instance>,
    restriction: Option<LevelSet>,
    full: Option<AssignmentState>,
    k: Cells,
    rng: ChainRng,
}

impl Chain {
    pub fn new(config: &ChainConfig, start: &TopicCounts) -> Result<Self> {
        config.validate()?;
        start.check_within(&config.corpus)?;
        let rng = crate::rng::stream_rng(config.seed, config.stream);
        let inst = config.corpus.theorem_scale().map(Instance::new).transpose()?;
        let restriction = match (config.restriction, &inst) {
            (Some(j), Some(inst)) => Some(LevelSet::by_threshold(inst, j)),
            _ => None,
        };
        let full = match config.kind {
            ChainKind::FullR => Some(AssignmentState::canonical(&config.corpus, start)?),
            _ => None,
        };
        let k = match start.to_cells() {
            Ok(c) => c,
            Err(_) => [0; 4],
        };
        if let (Some(r), Some(inst)) = (&restriction, &inst) {
            if !r.contains_cells(inst, k) {
                return Err(Error::InvalidArgument("start state lies outside the restriction".into()));
            }
        }
        Ok(Chain { kind: config.kind, inst, restriction, full, k, rng })
    }

    pub fn step(&mut self) {
        match self.kind {
            ChainKind::FullR => {
                let s = self.full.as_mut().expect("full state");
                gibbs_step_r(s, &mut self.rng);
                if let Ok(c) = s.counts().to_cells() {
                    self.k = c;
                }
            }
            ChainKind::LumpedL => {
                let inst = self.inst.as_ref().expect("instance");
                self.k = lumped_step_l(inst, self.k, &mut self.rng, self.restriction.as_ref());
            }
            ChainKind::MetropolisZ => {
                let inst = self.inst.as_ref().expect("instance");
                self.k = metropolis_step_z(inst, self.k, &mut self.rng, self.restriction.as_ref());
            }
        }
    }

    /// Current counts; for R on a non-2×2 corpus use [`Chain::full_state`].
    pub fn cells(&self) -> Cells {
        self.k
    }

    pub fn full_state(&self) -> Option<&AssignmentState> {
        self.full.as_ref()
    }

    /// Runs `steps` steps and records `(t, k)` every `thin` steps, including `t = 0`.
    pub fn trajectory(&mut self, steps: u64, thin: u64) -> Vec<(u64, Cells)> {
        let thin = thin.max(1);
        let mut out = vec![(0, self.k)];
        for t in 1..=steps {
            self.step();
            if t % thin == 0 {
                out.push((t, self.k));
            }
        }
        out
    }
}

/// Writes a trajectory as `t,k11,k12,k21,k22` rows.
pub fn write_trajectory<W: Write>(mut w: W, rows: &[(u64, Cells)]) -> Result<()> {
    writeln!(w, "t,k11,k12,k21,k22")?;
    for (t, k) in rows {
        writeln!(w, "{t},{},{},{},{}", k[0], k[1], k[2], k[3])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn canonical_layout_and_json_labels() {
        let c = CorpusCounts::theorem_instance(10).unwrap();
        let k = TopicCounts::from_cells([1, 2, 3, 4]);
        let s = AssignmentState::canonical(&c, &k).unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(s.counts(), &k);
        let by_doc = s.labels_by_document();
        assert_eq!(by_doc.len(), 2);
        assert_eq!(by_doc[0], vec![0, 1, 1, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(s.recount(), k);
    }

    #[test]
    fn bad_positions_rejected() {
        let c = CorpusCounts::new(vec![vec![1, 1], vec![1, 0]]).unwrap();
        let pos = vec![(0, 0), (1, 0), (0, 1)];
        assert!(AssignmentState::from_positions(&c, pos, vec![Topic::A; 3]).is_err());
        let pos = vec![(0, 0), (0, 0), (1, 0)];
        assert!(AssignmentState::from_positions(&c, pos, vec![Topic::A; 3]).is_err());
    }

    #[test]
    fn cache_survives_many_steps() {
        let c = CorpusCounts::theorem_instance(20).unwrap();
        let mut rng = stream_rng(4, 0);
        let mut s = AssignmentState::canonical(&c, &TopicCounts::zeros(2, 2)).unwrap();
        for _ in 0..1_000_000 {
            gibbs_step_r(&mut s, &mut rng);
        }
        assert_eq!(s.recount(), *s.counts());
    }

    #[test]
    fn conditional_frequency_matches() {
        let c = CorpusCounts::theorem_instance(10).unwrap();
        let mut s = AssignmentState::canonical(&c, &TopicCounts::from_cells([1, 5, 2, 2])).unwrap();
        let pos = 4;
        let p = s.conditional_prob_a(pos);
        let mut rng = stream_rng(5, 0);
        let n = 1_000_000;
        let mut hits = 0u64;
        for _ in 0..n {
            if s.resample_position(pos, &mut rng) == Topic::A {
                hits += 1;
            }
        }
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn lumped_row_is_stochastic_and_matches_projection() {
        let c = CorpusCounts::theorem_instance(10).unwrap();
        let inst = Instance::new(10).unwrap();
        let mut rng = stream_rng(8, 0);
        for cells in [[0, 0, 0, 0], [3, 7, 6, 4], [1, 4, 2, 3], [0, 7, 0, 4]] {
            let row = lumped_row(&inst, cells);
            let total: f64 = row.iter().map(|r| r.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|r| r.1 >= -1e-15));
            if cells == [0, 0, 0, 0] {
                assert!(row.iter().all(|(k, _)| k.iter().zip(&cells).all(|(a, b)| a >= b)));
            }
            let s = AssignmentState::random_within_cells(&c, &TopicCounts::from_cells(cells), &mut rng).unwrap();
            let proj = projected_r_step(&s).unwrap();
            for (k, p) in &row {
                assert!((proj.get(k).copied().unwrap_or(0.0) - p).abs() < 1e-12);
            }
            assert_eq!(proj.len(), row.iter().filter(|r| r.1 > 0.0).count());
        }
    }

    #[test]
    fn lumped_step_empirical_row() {
        let inst = Instance::new(10).unwrap();
        let k = [1, 4, 2, 3];
        let row = lumped_row(&inst, k);
        let mut rng = stream_rng(12, 0);
        let n = 1_000_000;
        let mut freq: BTreeMap<Cells, u64> = BTreeMap::new();
        for _ in 0..n {
            *freq.entry(lumped_step_l(&inst, k, &mut rng, None)).or_default() += 1;
        }
        for (to, p) in row {
            let f = freq.get(&to).copied().unwrap_or(0) as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() <= 3.0 * sigma + 1e-12, "{to:?}: {f} vs {p}");
        }
    }

    #[test]
    fn z_step_boundary_and_symmetry() {
        let inst = Instance::new(10).unwrap();
        assert_eq!(logistic_share(1.5, 1.5), 0.5);
        let mut rng = stream_rng(2, 0);
        let top = inst.bounds();
        for _ in 0..1000 {
            let k = metropolis_step_z(&inst, [0, 0, 0, 0], &mut rng, None);
            assert!(k.iter().all(|&x| x <= 1));
            let k = metropolis_step_z(&inst, top, &mut rng, None);
            assert!(k.iter().zip(&top).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn config_validation() {
        let corpus = CorpusCounts::theorem_instance(10).unwrap();
        let cfg = ChainConfig { kind: ChainKind::FullR, restriction: Some(3), seed: 1, stream: 0, corpus: corpus.clone() };
        assert!(cfg.validate().is_err());
        let cfg = ChainConfig { kind: ChainKind::LumpedL, restriction: Some(3), seed: 1, stream: 0, corpus };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn trajectory_csv_and_determinism() {
        let corpus = CorpusCounts::theorem_instance(10).unwrap();
        let cfg = ChainConfig { kind: ChainKind::MetropolisZ, restriction: None, seed: 7, stream: 3, corpus };
        let start = TopicCounts::from_cells([0, 7, 0, 4]);
        let a = Chain::new(&cfg, &start).unwrap().trajectory(1000, 100);
        let b = Chain::new(&cfg, &start).unwrap().trajectory(1000, 100);
        assert_eq!(a, b);
        assert_eq!(a.len(), 11);
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &a).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,k11,k12,k21,k22\n0,0,7,0,4\n"));
    }

    #[test]
    fn restricted_chain_stays_inside() {
        let corpus = CorpusCounts::theorem_instance(20).unwrap();
        let inst = Instance::new(20).unwrap();
        let level = LevelSet::by_threshold(&inst, 2);
        for kind in [ChainKind::LumpedL, ChainKind::MetropolisZ] {
            let cfg = ChainConfig { kind, restriction: Some(2), seed: 1, stream: 0, corpus: corpus.clone() };
            let start = TopicCounts::from_cells(crate::exact_analysis::StateSpace::new(20, 60).unwrap().mode_z());
            let mut ch = Chain::new(&cfg, &start).unwrap();
            for _ in 0..50_000 {
                ch.step();
                assert!(level.contains_cells(&inst, ch.cells()));
            }
        }
    }
}
