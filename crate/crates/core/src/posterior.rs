//! Unnormalized posterior densities over topic-count vectors and the LDA
//! generative sampler.
//!
//! For two topics with uniform Dirichlet priors the posterior of an
//! assignment depends only on the count matrix `k` of topic-A tokens per
//! (document, word) cell:
//!
//! ```text
//! ln π_R(k) = ln C(n..,k..) − ln[(k..+1)(n..−k..+1)] − Σ_d ln C(n_d.,k_d.) − Σ_j ln C(n_.j,k_.j)
//! ln π_L(k) = ln π_R(k) + Σ_dj ln C(n_dj,k_dj)
//! ```
//!
//! Normalizing constants are never computed here.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::chains::{AssignmentState, Topic};
use crate::combinatorics::{log_binomial, LogFactorials, LogValue};
use crate::error::{Error, Result};
use crate::landscape;
use crate::rng::stream_rng;

/// Cell order used for the 2×2 instance: `[k11, k12, k21, k22]`.
pub type Cells = [u32; 4];

/// Observed word counts `n_dj`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CountsDoc", into = "CountsDoc")]
pub struct CorpusCounts {
    docs: usize,
    words: usize,
    n: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct CountsDoc {
    #[serde(rename = "D")]
    docs: usize,
    #[serde(rename = "V")]
    words: usize,
    n: Vec<Vec<u64>>,
}

impl TryFrom<CountsDoc> for CorpusCounts {
    type Error = Error;
    fn try_from(doc: CountsDoc) -> Result<Self> {
        let c = CorpusCounts::new(doc.n)?;
        if c.docs != doc.docs || c.words != doc.words {
            return Err(Error::Dimension(format!(
                "header says {}x{}, matrix is {}x{}",
                doc.docs, doc.words, c.docs, c.words
            )));
        }
        Ok(c)
    }
}

impl From<CorpusCounts> for CountsDoc {
    fn from(c: CorpusCounts) -> Self {
        CountsDoc {
            docs: c.docs,
            words: c.words,
            n: c.n.chunks(c.words).map(|r| r.to_vec()).collect(),
        }
    }
}

impl CorpusCounts {
    pub fn new(rows: Vec<Vec<u64>>) -> Result<Self> {
        let docs = rows.len();
        let words = rows.first().map_or(0, |r| r.len());
        if docs == 0 || words == 0 {
            return Err(Error::Dimension("corpus needs at least one document and one word".into()));
        }
        if rows.iter().any(|r| r.len() != words) {
            return Err(Error::Dimension("ragged count matrix".into()));
        }
        Ok(CorpusCounts {
            docs,
            words,
            n: rows.into_iter().flatten().collect(),
        })
    }

    /// The two-document, two-word instance with `n11 = 3m/10`, `n21 = 6m/10`
    /// and both documents of length `m`.
    pub fn theorem_instance(m: u32) -> Result<Self> {
        if m == 0 || m % 10 != 0 {
            return Err(Error::ScaleNotDivisible(m));
        }
        let m = m as u64;
        CorpusCounts::new(vec![
            vec![3 * m / 10, 7 * m / 10],
            vec![6 * m / 10, 4 * m / 10],
        ])
    }

    pub fn docs(&self) -> usize {
        self.docs
    }

    pub fn words(&self) -> usize {
        self.words
    }

    pub fn get(&self, d: usize, j: usize) -> u64 {
        self.n[d * self.words + j]
    }

    pub fn cells(&self) -> &[u64] {
        &self.n
    }

    pub fn doc_total(&self, d: usize) -> u64 {
        self.n[d * self.words..(d + 1) * self.words].iter().sum()
    }

    pub fn word_total(&self, j: usize) -> u64 {
        (0..self.docs).map(|d| self.get(d, j)).sum()
    }

    pub fn total(&self) -> u64 {
        self.n.iter().sum()
    }

    /// Recovers `m` when this is the 2×2 theorem instance.
    pub fn theorem_scale(&self) -> Option<u32> {
        if self.docs != 2 || self.words != 2 {
            return None;
        }
        let m = self.doc_total(0);
        let expect = CorpusCounts::theorem_instance(m as u32).ok()?;
        (expect == *self).then_some(m as u32)
    }
}

/// Latent topic-A counts `k_dj`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "TopicDoc", into = "TopicDoc")]
pub struct TopicCounts {
    docs: usize,
    words: usize,
    k: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct TopicDoc {
    #[serde(rename = "D")]
    docs: usize,
    #[serde(rename = "V")]
    words: usize,
    k: Vec<Vec<u64>>,
}

impl TryFrom<TopicDoc> for TopicCounts {
    type Error = Error;
    fn try_from(doc: TopicDoc) -> Result<Self> {
        let t = TopicCounts::new(doc.k)?;
        if t.docs != doc.docs || t.words != doc.words {
            return Err(Error::Dimension("topic count header disagrees with matrix".into()));
        }
        Ok(t)
    }
}

impl From<TopicCounts> for TopicDoc {
    fn from(t: TopicCounts) -> Self {
        TopicDoc {
            docs: t.docs,
            words: t.words,
            k: t.k.chunks(t.words).map(|r| r.to_vec()).collect(),
        }
    }
}

impl TopicCounts {
    pub fn new(rows: Vec<Vec<u64>>) -> Result<Self> {
        let docs = rows.len();
        let words = rows.first().map_or(0, |r| r.len());
        if docs == 0 || words == 0 || rows.iter().any(|r| r.len() != words) {
            return Err(Error::Dimension("malformed topic count matrix".into()));
        }
        Ok(TopicCounts {
            docs,
            words,
            k: rows.into_iter().flatten().collect(),
        })
    }

    pub fn zeros(docs: usize, words: usize) -> Self {
        TopicCounts {
            docs,
            words,
            k: vec![0; docs * words],
        }
    }

    pub fn from_cells(cells: Cells) -> Self {
        TopicCounts {
            docs: 2,
            words: 2,
            k: cells.iter().map(|&c| c as u64).collect(),
        }
    }

    /// The four cells of a 2×2 count matrix.
    pub fn to_cells(&self) -> Result<Cells> {
        if self.docs != 2 || self.words != 2 {
            return Err(Error::Dimension("expected a 2x2 count matrix".into()));
        }
        Ok([self.k[0] as u32, self.k[1] as u32, self.k[2] as u32, self.k[3] as u32])
    }

    pub fn docs(&self) -> usize {
        self.docs
    }

    pub fn words(&self) -> usize {
        self.words
    }

    pub fn get(&self, d: usize, j: usize) -> u64 {
        self.k[d * self.words + j]
    }

    pub fn cells(&self) -> &[u64] {
        &self.k
    }

    pub(crate) fn cells_mut(&mut self) -> &mut [u64] {
        &mut self.k
    }

    pub fn doc_total(&self, d: usize) -> u64 {
        self.k[d * self.words..(d + 1) * self.words].iter().sum()
    }

    pub fn word_total(&self, j: usize) -> u64 {
        (0..self.docs).map(|d| self.get(d, j)).sum()
    }

    pub fn total(&self) -> u64 {
        self.k.iter().sum()
    }

    /// The image under swapping every topic label: `k ↦ n − k`.
    pub fn swapped(&self, corpus: &CorpusCounts) -> TopicCounts {
        TopicCounts {
            docs: self.docs,
            words: self.words,
            k: corpus.n.iter().zip(&self.k).map(|(n, k)| n - k).collect(),
        }
    }

    pub fn check_within(&self, corpus: &CorpusCounts) -> Result<()> {
        if self.docs != corpus.docs || self.words != corpus.words {
            return Err(Error::Dimension(format!(
                "counts are {}x{}, corpus is {}x{}",
                self.docs, self.words, corpus.docs, corpus.words
            )));
        }
        for d in 0..self.docs {
            for j in 0..self.words {
                let (k, n) = (self.get(d, j), corpus.get(d, j));
                if k > n {
                    return Err(Error::CountsOutOfBounds { doc: d, word: j, k, n });
                }
            }
        }
        Ok(())
    }
}

fn log_pi_r_unchecked(corpus: &CorpusCounts, k: &TopicCounts) -> f64 {
    let n_tot = corpus.total();
    let k_tot = k.total();
    let mut v = log_binomial(n_tot, k_tot as i64).value()
        - ((k_tot as f64 + 1.0) * ((n_tot - k_tot) as f64 + 1.0)).ln();
    for d in 0..corpus.docs {
        v -= log_binomial(corpus.doc_total(d), k.doc_total(d) as i64).value();
    }
    for j in 0..corpus.words {
        v -= log_binomial(corpus.word_total(j), k.word_total(j) as i64).value();
    }
    v
}

fn cell_multiplicity(corpus: &CorpusCounts, k: &TopicCounts) -> f64 {
    corpus
        .n
        .iter()
        .zip(&k.k)
        .map(|(&n, &kk)| log_binomial(n, kk as i64).value())
        .sum()
}

/// Per-assignment posterior weight for any number of documents and words
/// (two topics, uniform priors).
pub fn log_pi_r_general(corpus: &CorpusCounts, k: &TopicCounts) -> Result<LogValue> {
    k.check_within(corpus)?;
    Ok(LogValue::new(log_pi_r_unchecked(corpus, k)))
}

/// Lumped weight: the per-assignment weight times the class size.
pub fn log_pi_l_general(corpus: &CorpusCounts, k: &TopicCounts) -> Result<LogValue> {
    k.check_within(corpus)?;
    Ok(LogValue::new(
        log_pi_r_unchecked(corpus, k) + cell_multiplicity(corpus, k),
    ))
}

fn require_two_by_two(corpus: &CorpusCounts) -> Result<()> {
    if corpus.docs != 2 || corpus.words != 2 {
        return Err(Error::Dimension(
            "this density is defined for two documents and two words".into(),
        ));
    }
    Ok(())
}

/// Per-assignment posterior weight of the 2-document, 2-word model.
pub fn log_pi_r(corpus: &CorpusCounts, k: &TopicCounts) -> Result<LogValue> {
    require_two_by_two(corpus)?;
    log_pi_r_general(corpus, k)
}

/// Stationary weight of the lumped chain over count vectors.
pub fn log_pi_l(corpus: &CorpusCounts, k: &TopicCounts) -> Result<LogValue> {
    require_two_by_two(corpus)?;
    log_pi_l_general(corpus, k)
}

/// Exponential-rate surrogate `m · g(k/m)` on the theorem instance.
pub fn log_pi_z(corpus: &CorpusCounts, k: &TopicCounts) -> Result<LogValue> {
    let m = corpus.theorem_scale().ok_or_else(|| {
        Error::InvalidArgument("log_pi_z is defined on the theorem instance only".into())
    })?;
    k.check_within(corpus)?;
    let cells = k.to_cells()?;
    Ok(LogValue::new(surrogate_log_density(m, cells)))
}

pub(crate) fn surrogate_log_density(m: u32, cells: Cells) -> f64 {
    let mf = m as f64;
    let p = [
        cells[0] as f64 / mf,
        cells[1] as f64 / mf,
        cells[2] as f64 / mf,
        cells[3] as f64 / mf,
    ];
    mf * landscape::g_unchecked(p)
}

/// Fast evaluator for the 2×2 theorem instance at scale `m`.
#[derive(Debug, Clone)]
pub struct Instance {
    m: u32,
    corpus: CorpusCounts,
    bounds: Cells,
    lf: LogFactorials,
}

impl Instance {
    pub fn new(m: u32) -> Result<Self> {
        let corpus = CorpusCounts::theorem_instance(m)?;
        let c = corpus.cells();
        let bounds = [c[0] as u32, c[1] as u32, c[2] as u32, c[3] as u32];
        Ok(Instance {
            m,
            bounds,
            lf: LogFactorials::new(2 * m as u64 + 2),
            corpus,
        })
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn corpus(&self) -> &CorpusCounts {
        &self.corpus
    }

    /// Cell capacities `[n11, n12, n21, n22]`.
    pub fn bounds(&self) -> Cells {
        self.bounds
    }

    pub fn contains(&self, k: Cells) -> bool {
        k.iter().zip(&self.bounds).all(|(k, n)| k <= n)
    }

    pub fn log_pi_r(&self, k: Cells) -> f64 {
        let m = self.m as u64;
        let n_tot = 2 * m;
        let kt = (k[0] + k[1] + k[2] + k[3]) as u64;
        let k1 = (k[0] + k[1]) as i64;
        let k2 = (k[2] + k[3]) as i64;
        let c1 = (k[0] + k[2]) as i64;
        let c2 = (k[1] + k[3]) as i64;
        let lf = &self.lf;
        lf.binomial(n_tot, kt as i64)
            - ((kt as f64 + 1.0) * ((n_tot - kt) as f64 + 1.0)).ln()
            - lf.binomial(m, k1)
            - lf.binomial(m, k2)
            - lf.binomial(9 * m / 10, c1)
            - lf.binomial(11 * m / 10, c2)
    }

    pub fn log_multiplicity(&self, k: Cells) -> f64 {
        (0..4)
            .map(|i| self.lf.binomial(self.bounds[i] as u64, k[i] as i64))
            .sum()
    }

    pub fn log_pi_l(&self, k: Cells) -> f64 {
        self.log_pi_r(k) + self.log_multiplicity(k)
    }

    pub fn log_pi_z(&self, k: Cells) -> f64 {
        surrogate_log_density(self.m, k)
    }

    /// Probability that a token in cell `cell` is labelled A, given the
    /// remaining counts `rest` (the token itself excluded).
    pub fn prob_topic_a(&self, rest: Cells, cell: usize) -> f64 {
        let m = self.m as f64;
        let kt = (rest[0] + rest[1] + rest[2] + rest[3]) as f64;
        let (d, j) = (cell / 2, cell % 2);
        let kd = (rest[2 * d] + rest[2 * d + 1]) as f64;
        let kj = (rest[j] + rest[2 + j]) as f64;
        let nj = if j == 0 { 0.9 * m } else { 1.1 * m };
        conditional_a(2.0 * m, kt, m, kd, nj.round(), kj)
    }
}

/// `P(A)` for one token given rest-of-corpus totals: the ratio of the two
/// completions of the per-assignment weight is
/// `(n..−k..+1)(k_d.+1)(k_.j+1) / ((k..+2)(n_d.−k_d.)(n_.j−k_.j))`.
#[inline]
pub(crate) fn conditional_a(n_tot: f64, k_tot: f64, n_doc: f64, k_doc: f64, n_word: f64, k_word: f64) -> f64 {
    let num = (n_tot - k_tot + 1.0) * (k_doc + 1.0) * (k_word + 1.0);
    let den = (k_tot + 2.0) * (n_doc - k_doc) * (n_word - k_word);
    num / (num + den)
}

/// Parameters of the LDA generative model with two topics.
///
/// `theta[d]` is document `d`'s distribution over (A, B); `phi[t]` is topic
/// `t`'s distribution over words. Either may be fixed; otherwise it is drawn
/// from the Dirichlet prior (`alpha` over topics, `beta` over words).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub theta: Option<Vec<Vec<f64>>>,
    pub phi: Option<Vec<Vec<f64>>>,
}

impl GenerativeParams {
    pub fn uniform_priors(words: usize) -> Self {
        GenerativeParams {
            alpha: vec![1.0, 1.0],
            beta: vec![1.0; words],
            theta: None,
            phi: None,
        }
    }

    fn validate(&self, docs: usize) -> Result<()> {
        if self.alpha.len() != 2 || self.alpha.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::InvalidArgument("alpha must be two positive reals".into()));
        }
        if self.beta.is_empty() || self.beta.iter().any(|&b| !(b > 0.0)) {
            return Err(Error::InvalidArgument("beta must be positive reals".into()));
        }
        let prob_row = |row: &Vec<f64>, len: usize| {
            row.len() == len
                && row.iter().all(|&p| (0.0..=1.0).contains(&p))
                && (row.iter().sum::<f64>() - 1.0).abs() <= 1e-12
        };
        if let Some(theta) = &self.theta {
            if theta.len() != docs || !theta.iter().all(|r| prob_row(r, 2)) {
                return Err(Error::InvalidArgument(
                    "theta must hold one probability vector over two topics per document".into(),
                ));
            }
        }
        if let Some(phi) = &self.phi {
            if phi.len() != 2 || !phi.iter().all(|r| prob_row(r, self.beta.len())) {
                return Err(Error::InvalidArgument(
                    "phi must hold one probability vector over words per topic".into(),
                ));
            }
        }
        Ok(())
    }
}

fn sample_dirichlet<R: Rng>(params: &[f64], rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = params
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let s: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / s).collect()
}

fn sample_categorical<R: Rng>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Draws a corpus from the generative model: per document a topic mixture,
/// per topic a word distribution, then a topic and a word for every position.
pub fn generate_corpus(
    params: &GenerativeParams,
    doc_lengths: &[i64],
    seed: u64,
) -> Result<(CorpusCounts, AssignmentState)> {
    if doc_lengths.is_empty() || doc_lengths.iter().any(|&l| l <= 0) {
        return Err(Error::InvalidArgument("document lengths must be positive".into()));
    }
    let docs = doc_lengths.len();
    params.validate(docs)?;
    let words = params.beta.len();
    let mut rng = stream_rng(seed, 0);

    let theta = match &params.theta {
        Some(t) => t.clone(),
        None => (0..docs).map(|_| sample_dirichlet(&params.alpha, &mut rng)).collect(),
    };
    let phi = match &params.phi {
        Some(p) => p.clone(),
        None => (0..2).map(|_| sample_dirichlet(&params.beta, &mut rng)).collect(),
    };

    let mut n = vec![vec![0u64; words]; docs];
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    for (d, &len) in doc_lengths.iter().enumerate() {
        for _ in 0..len {
            let t = sample_categorical(&theta[d], &mut rng);
            let w = sample_categorical(&phi[t], &mut rng);
            n[d][w] += 1;
            positions.push((d, w));
            labels.push(if t == 0 { Topic::A } else { Topic::B });
        }
    }
    let corpus = CorpusCounts::new(n)?;
    let state = AssignmentState::from_positions(&corpus, positions, labels)?;
    Ok((corpus, state))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Gauss–Legendre nodes and weights on [0, 1].
    fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (mut p0, mut p1) = (1.0, x);
                for k in 2..=n {
                    let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                    p0 = p1;
                    p1 = p2;
                }
                dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                let dx = p1 / dp;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            out.push((0.5 * (x + 1.0), 0.5 * w));
        }
        out
    }

    /// Posterior probability of one full assignment with counts `k`, obtained
    /// by integrating the joint over θ_1..θ_D, φ_A, φ_B on the unit cube.
    /// Two words only, so each φ_t is a single coordinate.
    fn quadrature_assignment_prob(corpus: &CorpusCounts, k: &TopicCounts, nodes: &[(f64, f64)]) -> f64 {
        let docs = corpus.docs();
        let dims = docs + 2;
        let ka1 = k.word_total(0) as i32;
        let ka = k.total() as i32;
        let kb1 = (corpus.word_total(0) - k.word_total(0)) as i32;
        let kb = (corpus.total() - k.total()) as i32;
        let mut idx = vec![0usize; dims];
        let q = nodes.len();
        let mut total = 0.0;
        loop {
            let mut w = 1.0;
            let mut f = 1.0;
            for d in 0..docs {
                let (x, wx) = nodes[idx[d]];
                let kd = k.doc_total(d) as i32;
                let nd = corpus.doc_total(d) as i32;
                f *= x.powi(kd) * (1.0 - x).powi(nd - kd);
                w *= wx;
            }
            let (pa, wa) = nodes[idx[docs]];
            let (pb, wb) = nodes[idx[docs + 1]];
            f *= pa.powi(ka1) * (1.0 - pa).powi(ka - ka1) * pb.powi(kb1) * (1.0 - pb).powi(kb - kb1);
            total += w * wa * wb * f;
            let mut c = 0;
            loop {
                idx[c] += 1;
                if idx[c] < q {
                    break;
                }
                idx[c] = 0;
                c += 1;
                if c == dims {
                    return total;
                }
            }
        }
    }

    #[test]
    fn theorem_instance_validation() {
        assert!(matches!(CorpusCounts::theorem_instance(15), Err(Error::ScaleNotDivisible(15))));
        let c = CorpusCounts::theorem_instance(10).unwrap();
        assert_eq!(c.cells(), &[3, 7, 6, 4]);
        assert_eq!(c.total(), 20);
        assert_eq!(c.word_total(0), 9);
        assert_eq!(c.theorem_scale(), Some(10));
    }

    #[test]
    fn json_shape() {
        let c = CorpusCounts::theorem_instance(10).unwrap();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(s, r#"{"D":2,"V":2,"n":[[3,7],[6,4]]}"#);
        let back: CorpusCounts = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<CorpusCounts>(r#"{"D":3,"V":2,"n":[[3,7],[6,4]]}"#).is_err());
    }

    #[test]
    fn empty_class_relation() {
        let c = CorpusCounts::theorem_instance(10).unwrap();
        let z = TopicCounts::zeros(2, 2);
        assert_eq!(log_pi_r(&c, &z).unwrap(), log_pi_l(&c, &z).unwrap());
        assert!(log_pi_r(&c, &z).unwrap().value().is_finite());
    }

    #[test]
    fn out_of_bounds_rejected() {
        let c = CorpusCounts::theorem_instance(10).unwrap();
        let k = TopicCounts::from_cells([4, 0, 0, 0]);
        assert!(matches!(log_pi_r(&c, &k), Err(Error::CountsOutOfBounds { .. })));
        assert!(log_pi_z(&c, &k).is_err());
    }

    #[test]
    fn topic_swap_symmetry() {
        let c = CorpusCounts::theorem_instance(10).unwrap();
        let z = TopicCounts::zeros(2, 2);
        let full = z.swapped(&c);
        let a = log_pi_l(&c, &z).unwrap().value();
        let b = log_pi_l(&c, &full).unwrap().value();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn class_constancy_and_multiplicity() {
        // Two assignments with the same counts carry the same weight by
        // construction; the lumped weight is that weight times the class size.
        let c = CorpusCounts::theorem_instance(20).unwrap();
        let inst = Instance::new(20).unwrap();
        for cells in [[0, 0, 0, 0], [3, 10, 2, 5], [6, 14, 12, 8], [1, 13, 0, 8]] {
            let k = TopicCounts::from_cells(cells);
            let r = log_pi_r(&c, &k).unwrap().value();
            let l = log_pi_l(&c, &k).unwrap().value();
            let mult: f64 = (0..4)
                .map(|i| log_binomial(c.cells()[i], cells[i] as i64).value())
                .sum();
            assert!((l - (r + mult)).abs() <= 1e-10);
            assert!((inst.log_pi_r(cells) - r).abs() < 1e-10);
            assert!((inst.log_pi_l(cells) - l).abs() < 1e-10);
        }
    }

    #[test]
    fn class_sum_by_brute_force() {
        // Enumerate every labelling of a tiny 2x2 corpus and compare the
        // summed per-assignment weights with the lumped weight.
        let c = CorpusCounts::new(vec![vec![2, 1], vec![1, 2]]).unwrap();
        let cells = c.cells().to_vec();
        let n: u64 = cells.iter().sum();
        let mut sums = std::collections::HashMap::new();
        for mask in 0u32..(1 << n) {
            let mut k = vec![0u64; 4];
            let mut bit = 0;
            for (ci, &nc) in cells.iter().enumerate() {
                for _ in 0..nc {
                    if mask >> bit & 1 == 1 {
                        k[ci] += 1;
                    }
                    bit += 1;
                }
            }
            let tc = TopicCounts::new(vec![k[..2].to_vec(), k[2..].to_vec()]).unwrap();
            let w = log_pi_r(&c, &tc).unwrap().exp();
            *sums.entry(tc).or_insert(0.0) += w;
        }
        for (tc, s) in sums {
            let l = log_pi_l(&c, &tc).unwrap().value();
            assert!((s.ln() - l).abs() <= 1e-10);
        }
    }

    #[test]
    fn general_form_specializes() {
        let c = CorpusCounts::theorem_instance(30).unwrap();
        for cells in [[0, 0, 0, 0], [5, 11, 7, 3], [9, 21, 18, 12]] {
            let k = TopicCounts::from_cells(cells);
            assert_eq!(
                log_pi_r_general(&c, &k).unwrap().value().to_bits(),
                log_pi_r(&c, &k).unwrap().value().to_bits()
            );
        }
        let one = CorpusCounts::new(vec![vec![4]]).unwrap();
        let k = TopicCounts::new(vec![vec![2]]).unwrap();
        let v = log_pi_r_general(&one, &k).unwrap().value();
        let expect = 6f64.ln() - 9f64.ln() - 6f64.ln() - 6f64.ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - (-(9f64.ln()) - 6f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn ratios_match_quadrature_two_docs() {
        let c = CorpusCounts::theorem_instance(10).unwrap();
        let nodes = gauss_legendre(16);
        for cells in [[0, 3, 2, 1], [1, 4, 3, 2], [2, 7, 0, 4]] {
            let k = TopicCounts::from_cells(cells);
            let mut next = cells;
            next[0] += 1;
            let k2 = TopicCounts::from_cells(next);
            let exact = (log_pi_r(&c, &k2).unwrap() - log_pi_r(&c, &k).unwrap()).exp();
            let q = quadrature_assignment_prob(&c, &k2, &nodes) / quadrature_assignment_prob(&c, &k, &nodes);
            assert!((exact / q - 1.0).abs() < 1e-6, "{cells:?}: {exact} vs {q}");
        }
    }

    #[test]
    fn ratios_match_quadrature_three_docs() {
        let c = CorpusCounts::new(vec![vec![2, 3], vec![4, 1], vec![1, 3]]).unwrap();
        let nodes = gauss_legendre(8);
        let base = TopicCounts::new(vec![vec![1, 2], vec![2, 0], vec![0, 1]]).unwrap();
        for step in [(0usize, 0usize), (1, 1), (2, 0), (2, 1)] {
            let mut rows: Vec<Vec<u64>> = (0..3).map(|d| (0..2).map(|j| base.get(d, j)).collect()).collect();
            rows[step.0][step.1] += 1;
            let k2 = TopicCounts::new(rows).unwrap();
            let exact = (log_pi_r_general(&c, &k2).unwrap() - log_pi_r_general(&c, &base).unwrap()).exp();
            let q = quadrature_assignment_prob(&c, &k2, &nodes) / quadrature_assignment_prob(&c, &base, &nodes);
            assert!((exact / q - 1.0).abs() < 1e-6, "{step:?}: {exact} vs {q}");
        }
    }

    #[test]
    fn conditional_matches_weight_ratio() {
        let inst = Instance::new(20).unwrap();
        for rest in [[0, 0, 0, 0], [2, 5, 7, 3], [5, 13, 11, 7]] {
            for cell in 0..4 {
                if rest[cell] >= inst.bounds()[cell] {
                    continue;
                }
                let mut with_a = rest;
                with_a[cell] += 1;
                let p = inst.prob_topic_a(rest, cell);
                let lr = inst.log_pi_r(with_a) - inst.log_pi_r(rest);
                let q = 1.0 / (1.0 + (-lr).exp());
                assert!((p - q).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn generator_degenerate() {
        let params = GenerativeParams {
            alpha: vec![1.0, 1.0],
            beta: vec![1.0, 1.0],
            theta: Some(vec![vec![1.0, 0.0]]),
            phi: Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
        };
        let (c, s) = generate_corpus(&params, &[25], 3).unwrap();
        assert_eq!(c.cells(), &[25, 0]);
        assert!(s.labels().iter().all(|&t| t == Topic::A));
        assert!(generate_corpus(&params, &[0], 3).is_err());
        assert!(generate_corpus(&params, &[-4], 3).is_err());
    }

    #[test]
    fn generator_frequencies_and_determinism() {
        let params = GenerativeParams {
            alpha: vec![1.0, 1.0],
            beta: vec![1.0, 1.0],
            theta: Some(vec![vec![0.3, 0.7], vec![0.8, 0.2]]),
            phi: Some(vec![vec![0.1, 0.9], vec![0.6, 0.4]]),
        };
        let (c, s) = generate_corpus(&params, &[100_000, 100_000], 11).unwrap();
        for d in 0..2 {
            let th = params.theta.as_ref().unwrap()[d][0];
            let p = th * 0.1 + (1.0 - th) * 0.6;
            let sigma = (p * (1.0 - p) / 1e5).sqrt();
            let f = c.get(d, 0) as f64 / 1e5;
            assert!((f - p).abs() < 3.0 * sigma, "doc {d}: {f} vs {p}");
        }
        let (c2, s2) = generate_corpus(&params, &[100_000, 100_000], 11).unwrap();
        assert_eq!(c, c2);
        assert_eq!(s.labels(), s2.labels());

        let (c3, _) = generate_corpus(&GenerativeParams::uniform_priors(3), &[50, 60], 5).unwrap();
        assert_eq!(c3.doc_total(1), 60);
        assert_eq!(c3.words(), 3);
    }
}
