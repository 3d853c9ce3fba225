//! Experiment configuration and drivers behind the `lda-mix` command line.
//!
//! Every driver writes its artifacts atomically into the output directory and
//! reports whether the checks in its scope passed.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::canonical_paths::{
    bound_morris_peres, bound_sinclair_jerrum, build_paths, conductance_from_congestion, path_congestion_many,
    write_congestion_csv, PairMode, Profile, DEFAULT_PATH_CAP,
};
use crate::chains::{write_trajectory, Chain, ChainConfig, ChainKind};
use crate::coupling::{run_coupling, summarize, write_coupling_csv, CouplingConfig, CouplingStart};
use crate::error::{Error, Result};
use crate::exact_analysis::{
    build_kernel, conductance_of, mixing_time, smaller_side, spectral_gap, standard_level_sets, stationary_vector,
    tv_curve, write_levels_csv, write_tv_csv, KernelKind, StateSpace, DEFAULT_CAP,
};
use crate::landscape::{
    appendix_checks_with, g_gradient, hessian_eigen, surface_point, AppendixConfig, HessianMethod, SurfaceParam,
};
use crate::posterior::{Cells, Instance, TopicCounts};
use crate::report::{fmt_float, write_atomic};

/// Version string embedded in every metadata block.
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Posterior,
    MixExact,
    Simulate,
    Landscape,
    AppendixCheck,
    Paths,
    Couple,
    Scaling,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::Posterior,
        Command::MixExact,
        Command::Simulate,
        Command::Landscape,
        Command::AppendixCheck,
        Command::Paths,
        Command::Couple,
        Command::Scaling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Posterior => "posterior",
            Command::MixExact => "mix-exact",
            Command::Simulate => "simulate",
            Command::Landscape => "landscape",
            Command::AppendixCheck => "appendix-check",
            Command::Paths => "paths",
            Command::Couple => "couple",
            Command::Scaling => "scaling",
        }
    }

    fn needs_enumeration(self) -> bool {
        matches!(self, Command::Posterior | Command::MixExact | Command::Scaling)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown subcommand {s:?}")))
    }
}

/// Which chain `simulate` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SimChain {
    Full,
    Kernel,
}

/// Start of the first chain in `couple`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoupleStart {
    Mode,
    Lumped,
}

/// Optional settings from one source (flags or a config file).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub m: Option<Vec<u32>>,
    pub kappa: Option<f64>,
    pub seed: Option<u64>,
    pub t_max: Option<usize>,
    pub out: Option<PathBuf>,
    pub kernel: Option<KernelKind>,
    pub cap: Option<u32>,
    pub path_cap: Option<u32>,
    pub grid: Option<usize>,
    pub mesh: Option<usize>,
    pub steps: Option<u64>,
    pub thin: Option<u64>,
    pub replicas: Option<usize>,
    pub pairs: Option<usize>,
    pub chain: Option<SimChain>,
    pub start: Option<CoupleStart>,
}

macro_rules! prefer {
    ($hi:expr, $lo:expr, $($f:ident),*) => {
        Overrides { $($f: $hi.$f.clone().or_else(|| $lo.$f.clone())),* }
    };
}

impl Overrides {
    /// Values from `self` win over `other`.
    pub fn over(&self, other: &Overrides) -> Overrides {
        prefer!(
            self, other, m, kappa, seed, t_max, out, kernel, cap, path_cap, grid, mesh, steps, thin, replicas, pairs,
            chain, start
        )
    }

    /// Sets one key from its textual value; keys accept `-` or `_`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::InvalidArgument(format!("{key}: expected {what}, got {value:?}"));
        let int = |v: &str| v.trim().parse::<u64>().map_err(|_| bad("a nonnegative integer"));
        match key.replace('_', "-").as_str() {
            "m" => self.m = Some(parse_m_list(value)?),
            "kappa" => self.kappa = Some(value.trim().parse().map_err(|_| bad("a number"))?),
            "seed" => self.seed = Some(int(value)?),
            "t-max" => self.t_max = Some(int(value)? as usize),
            "out" => self.out = Some(PathBuf::from(value.trim())),
            "kernel" => self.kernel = Some(value.trim().parse().map_err(|_| bad("L or Z"))?),
            "cap" => self.cap = Some(int(value)? as u32),
            "path-cap" => self.path_cap = Some(int(value)? as u32),
            "grid" => self.grid = Some(int(value)? as usize),
            "mesh" => self.mesh = Some(int(value)? as usize),
            "steps" => self.steps = Some(int(value)?),
            "thin" => self.thin = Some(int(value)?),
            "replicas" => self.replicas = Some(int(value)? as usize),
            "pairs" => self.pairs = Some(int(value)? as usize),
            "chain" => {
                self.chain = Some(match value.trim() {
                    "full" | "R" => SimChain::Full,
                    "kernel" => SimChain::Kernel,
                    _ => return Err(bad("full or kernel")),
                })
            }
            "start" => {
                self.start = Some(match value.trim() {
                    "mode" => CoupleStart::Mode,
                    "lumped" => CoupleStart::Lumped,
                    _ => return Err(bad("mode or lumped")),
                })
            }
            _ => return Err(Error::InvalidArgument(format!("unknown key {key:?}"))),
        }
        Ok(())
    }
}

/// Comma-separated list of `m` values.
pub fn parse_m_list(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| Error::InvalidArgument(format!("m: expected integers, got {p:?}")))
        })
        .collect()
}

/// Parses the flat `key = value` format; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Overrides> {
    let mut o = Overrides::default();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", n + 1)))?;
        o.set(k.trim(), v).map_err(|e| match e {
            Error::InvalidArgument(msg) => Error::InvalidArgument(format!("line {}: {msg}", n + 1)),
            other => other,
        })?;
    }
    Ok(o)
}

pub fn read_config_file(path: &Path) -> Result<Overrides> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub command: Command,
    pub m: Vec<u32>,
    pub kappa: f64,
    pub seed: u64,
    pub t_max: usize,
    pub out: PathBuf,
    pub kernel: KernelKind,
    pub cap: u32,
    pub path_cap: u32,
    pub grid: usize,
    pub mesh: usize,
    pub steps: u64,
    pub thin: u64,
    pub replicas: usize,
    pub pairs: usize,
    pub chain: SimChain,
    pub start: CoupleStart,
}

impl ExperimentConfig {
    pub fn defaults(command: Command) -> Self {
        let m = match command {
            Command::Scaling => vec![10, 20, 30, 40],
            _ => vec![10],
        };
        ExperimentConfig {
            command,
            m,
            kappa: 0.25,
            seed: 1,
            t_max: 1_000_000,
            out: PathBuf::from("out"),
            kernel: KernelKind::L,
            cap: DEFAULT_CAP,
            path_cap: DEFAULT_PATH_CAP,
            grid: 40,
            mesh: 2000,
            steps: 100_000,
            thin: 100,
            replicas: 1000,
            pairs: 1_000_000,
            chain: SimChain::Kernel,
            start: CoupleStart::Mode,
        }
    }

    /// Defaults, then `o` on top.
    pub fn resolve(command: Command, o: &Overrides) -> Result<Self> {
        let d = Self::defaults(command);
        let cfg = ExperimentConfig {
            command,
            m: o.m.clone().unwrap_or(d.m),
            kappa: o.kappa.unwrap_or(d.kappa),
            seed: o.seed.unwrap_or(d.seed),
            t_max: o.t_max.unwrap_or(d.t_max),
            out: o.out.clone().unwrap_or(d.out),
            kernel: o.kernel.unwrap_or(d.kernel),
            cap: o.cap.unwrap_or(d.cap),
            path_cap: o.path_cap.unwrap_or(d.path_cap),
            grid: o.grid.unwrap_or(d.grid),
            mesh: o.mesh.unwrap_or(d.mesh),
            steps: o.steps.unwrap_or(d.steps),
            thin: o.thin.unwrap_or(d.thin),
            replicas: o.replicas.unwrap_or(d.replicas),
            pairs: o.pairs.unwrap_or(d.pairs),
            chain: o.chain.unwrap_or(d.chain),
            start: o.start.unwrap_or(d.start),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m.is_empty() {
            return Err(Error::InvalidArgument("m: at least one value required".into()));
        }
        for &m in &self.m {
            if m == 0 || m % 10 != 0 {
                return Err(Error::ScaleNotDivisible(m));
            }
            if self.command.needs_enumeration() && m > self.cap {
                return Err(Error::AboveCap { m, cap: self.cap });
            }
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::InvalidArgument(format!("kappa must lie in (0,1), got {}", self.kappa)));
        }
        if self.thin == 0 || self.grid < 2 || self.mesh < 20 || self.replicas == 0 || self.pairs == 0 {
            return Err(Error::InvalidArgument("thin, replicas and pairs must be positive; grid ≥ 2; mesh ≥ 20".into()));
        }
        if self.command == Command::Scaling && self.m.len() < 3 {
            return Err(Error::InvalidArgument("scaling needs at least three m values".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares of `ln y` on `ln x`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument("power-law fit needs at least three points".into()));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::InvalidArgument("power-law fit needs positive values".into()));
    }
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("power-law fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let ss_tot: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(PowerLawFit { slope, intercept, r2 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub passed: bool,
    pub files: Vec<PathBuf>,
}

struct Sink {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Sink {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.files.push(path);
        Ok(())
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        s.push('\n');
        self.put(name, s.as_bytes())
    }
}

fn metadata(cfg: &ExperimentConfig, stream: u64) -> serde_json::Value {
    json!({ "command": cfg.command.name(), "seed": cfg.seed, "stream": stream, "version": VERSION })
}

fn cells_str(k: Cells) -> String {
    format!("{}:{}:{}:{}", k[0], k[1], k[2], k[3])
}

fn kernel_tag(k: KernelKind) -> &'static str {
    match k {
        KernelKind::L => "L",
        KernelKind::Z => "Z",
    }
}

/// Runs one experiment and writes its artifacts into `cfg.out`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut sink = Sink { dir: cfg.out.clone(), files: Vec::new() };
    let passed = match cfg.command {
        Command::Posterior => run_posterior(cfg, &mut sink)?,
        Command::MixExact => run_mix_exact(cfg, &mut sink)?,
        Command::Simulate => run_simulate(cfg, &mut sink)?,
        Command::Landscape => run_landscape(cfg, &mut sink)?,
        Command::AppendixCheck => run_appendix(cfg, &mut sink)?,
        Command::Paths => run_paths(cfg, &mut sink)?,
        Command::Couple => run_couple(cfg, &mut sink)?,
        Command::Scaling => run_scaling(cfg, &mut sink)?,
    };
    Ok(RunOutcome { passed, files: sink.files })
}

fn run_posterior(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<bool> {
    let mut ok = true;
    for &m in &cfg.m {
        let space = StateSpace::new(m, cfg.cap)?;
        let inst = space.instance();
        let pi = stationary_vector(&space, KernelKind::L);
        let mut csv = String::from("k11,k12,k21,k22,log_pi_r,log_pi_l,log_pi_z,pi_l\n");
        for (i, p) in pi.iter().enumerate() {
            let k = space.cells(i);
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                k[0],
                k[1],
                k[2],
                k[3],
                fmt_float(inst.log_pi_r(k)),
                fmt_float(inst.log_pi_l(k)),
                fmt_float(inst.log_pi_z(k)),
                fmt_float(*p)
            ));
        }
        sink.put(&format!("posterior_m{m}.csv"), csv.as_bytes())?;
        let total: f64 = pi.iter().sum();
        ok &= (total - 1.0).abs() < 1e-12;
        sink.json(
            &format!("posterior_m{m}.json"),
            &json!({ "meta": metadata(cfg, 0), "m": m, "states": space.len(), "mode_l": space.mode_l(), "mass": total }),
        )?;
    }
    Ok(ok)
}

struct MixResult {
    m: u32,
    start: Cells,
    tau: Result<usize>,
    gap: Result<f64>,
    curve: Vec<(usize, f64)>,
    levels: Vec<(u32, f64, f64)>,
}

fn mix_one(m: u32, cfg: &ExperimentConfig, with_curve: bool) -> Result<MixResult> {
    let space = StateSpace::new(m, cfg.cap)?;
    let kernel = build_kernel(&space, cfg.kernel, None);
    let pi = stationary_vector(&space, cfg.kernel);
    let start = space.mode(cfg.kernel);
    let si = space.index(start);
    let tau = mixing_time(&kernel, &pi, si, cfg.kappa, cfg.t_max);
    let gap = spectral_gap(&kernel, &pi);
    let (curve, levels) = if with_curve {
        let horizon = match &tau {
            Ok(t) => *t,
            Err(_) => cfg.t_max,
        };
        let curve = tv_curve(&kernel, &pi, si, horizon);
        let levels = standard_level_sets(&space)
            .iter()
            .filter(|l| l.size() > 0 && l.size() < space.len())
            .map(|l| {
                let side = smaller_side(l.mask(), &pi);
                Ok((l.j, l.mass(&pi), conductance_of(&side, &kernel, &pi)?))
            })
            .collect::<Result<Vec<_>>>()?;
        (curve, levels)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(MixResult { m, start, tau, gap, curve, levels })
}

fn run_mix_exact(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<bool> {
    let results: Vec<MixResult> = cfg.m.par_iter().map(|&m| mix_one(m, cfg, true)).collect::<Result<_>>()?;
    let tag = kernel_tag(cfg.kernel);
    let mut ok = true;
    for r in &results {
        let mut buf = Vec::new();
        write_tv_csv(&mut buf, &r.curve)?;
        sink.put(&format!("tv_{tag}_m{}.csv", r.m), &buf)?;
        let mut buf = Vec::new();
        write_levels_csv(&mut buf, &r.levels)?;
        sink.put(&format!("levels_m{}.csv", r.m), &buf)?;
        ok &= r.tau.is_ok() && r.gap.is_ok();
        sink.json(
            &format!("mix_{tag}_m{}.json", r.m),
            &json!({
                "meta": metadata(cfg, 0),
                "m": r.m,
                "kernel": tag,
                "kappa": cfg.kappa,
                "start": r.start,
                "tau": r.tau.as_ref().ok(),
                "tau_error": r.tau.as_ref().err().map(|e| e.to_string()),
                "gap": r.gap.as_ref().ok(),
                "relaxation_time": r.gap.as_ref().ok().map(|g| 1.0 / g),
            }),
        )?;
    }
    Ok(ok)
}

/// Enumerated mode when affordable, otherwise the corner state that is the
/// mode for moderate `m`.
fn start_counts(m: u32, cap: u32, kind: KernelKind) -> Result<Cells> {
    if m <= cap {
        Ok(StateSpace::new(m, cap)?.mode(kind))
    } else {
        let b = Instance::new(m)?.bounds();
        Ok([0, b[1], 0, b[3]])
    }
}

fn run_simulate(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<bool> {
    for &m in &cfg.m {
        let inst = Instance::new(m)?;
        let kind = match (cfg.chain, cfg.kernel) {
            (SimChain::Full, _) => ChainKind::FullR,
            (SimChain::Kernel, KernelKind::L) => ChainKind::LumpedL,
            (SimChain::Kernel, KernelKind::Z) => ChainKind::MetropolisZ,
        };
        let chain_cfg = ChainConfig { kind, restriction: None, seed: cfg.seed, stream: 0, corpus: inst.corpus().clone() };
        let start = start_counts(m, cfg.cap, cfg.kernel)?;
        let mut chain = Chain::new(&chain_cfg, &TopicCounts::from_cells(start))?;
        let rows = chain.trajectory(cfg.steps, cfg.thin);
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &rows)?;
        let name = format!("trajectory_{kind:?}_m{m}");
        sink.put(&format!("{name}.csv"), &buf)?;
        sink.json(
            &format!("{name}.json"),
            &json!({ "meta": metadata(cfg, 0), "m": m, "chain": format!("{kind:?}"), "start": start,
                     "steps": cfg.steps, "thin": cfg.thin }),
        )?;
    }
    Ok(true)
}

fn run_landscape(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<bool> {
    let n = cfg.grid;
    let (u0, u1, v0, v1) = (0.02, 0.28, 0.62, 0.98);
    let pts: Vec<(f64, f64)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (u0 + (u1 - u0) * i as f64 / (n - 1) as f64, v0 + (v1 - v0) * j as f64 / (n - 1) as f64))
        .collect();
    let rows: Vec<_> = pts
        .par_iter()
        .map(|&(u, v)| {
            let s = SurfaceParam::new(u, v)?;
            let fd = hessian_eigen(s, HessianMethod::FiniteDifference)?;
            let cf = hessian_eigen(s, HessianMethod::ClosedFormRescaled)?;
            let grad = g_gradient(surface_point(s)?)?.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            Ok((u, v, fd, cf, grad))
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("u,v,lambda1_fd,lambda2_fd,lambda1_cf,lambda2_cf,grad_norm\n");
    let (mut zero, mut top, mut rel, mut grad_max) = (0.0f64, f64::NEG_INFINITY, 0.0f64, 0.0f64);
    for (u, v, fd, cf, g) in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            fmt_float(*u),
            fmt_float(*v),
            fmt_float(fd.lambda1),
            fmt_float(fd.lambda2),
            fmt_float(cf.lambda1),
            fmt_float(cf.lambda2),
            fmt_float(*g)
        ));
        zero = zero.max(fd.zero_residuals[0].abs()).max(fd.zero_residuals[1].abs());
        top = top.max(fd.lambda2);
        rel = rel
            .max(((cf.lambda1 - fd.lambda1) / fd.lambda1).abs())
            .max(((cf.lambda2 - fd.lambda2) / fd.lambda2).abs());
        grad_max = grad_max.max(*g);
    }
    sink.put("landscape.csv", csv.as_bytes())?;
    let ok = zero < 1e-5 && top < -3.0 && rel < 1e-4 && grad_max < 1e-7;
    sink.json(
        "landscape.json",
        &json!({ "meta": metadata(cfg, 0), "grid": n, "max_zero_eigenvalue": zero, "max_nonzero_eigenvalue": top,
                 "closed_form_max_rel_diff": rel, "max_grad": grad_max, "passed": ok }),
    )?;
    Ok(ok)
}

fn run_appendix(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<bool> {
    let report = appendix_checks_with(AppendixConfig { mesh: cfg.mesh, seed: cfg.seed, ..AppendixConfig::default() });
    sink.json("appendix.json", &json!({ "meta": metadata(cfg, 0), "report": report }))?;
    Ok(report.all_passed)
}

fn run_paths(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<bool> {
    let tag = kernel_tag(cfg.kernel);
    for &m in &cfg.m {
        let space = StateSpace::new(m, cfg.cap)?;
        let family = build_paths(&space, cfg.path_cap.max(m))?;
        let kernel = build_kernel(&space, cfg.kernel, None);
        let pi = stationary_vector(&space, cfg.kernel);
        let mode = if m <= cfg.path_cap { PairMode::Exact } else { PairMode::Sampled { pairs: cfg.pairs, seed: cfg.seed } };
        let report = path_congestion_many(&family, &[(&kernel, &pi)], mode).remove(0);
        let mut buf = Vec::new();
        write_congestion_csv(&mut buf, &report)?;
        sink.put(&format!("congestion_{tag}_m{m}.csv"), &buf)?;
        let phi = conductance_from_congestion(report.rho)?;
        let start = space.index(space.mode(cfg.kernel));
        let pi_star = pi.iter().copied().fold(f64::INFINITY, f64::min);
        let sj = bound_sinclair_jerrum(phi, pi[start], cfg.kappa)?;
        let mp = bound_morris_peres(&Profile::Constant(phi), pi_star, cfg.kappa)?;
        sink.json(
            &format!("congestion_{tag}_m{m}.json"),
            &json!({
                "meta": metadata(cfg, 0),
                "m": m,
                "kernel": tag,
                "exact": mode == PairMode::Exact,
                "rho": report.rho,
                "rho_ci95": report.rho_ci95,
                "argmax_edge": report.top_edges.first().map(|e| [cells_str(e.from), cells_str(e.to)]),
                "pairs": report.pairs,
                "fallbacks": report.staircase_fallbacks + report.search_fallbacks,
                "staircase_fallbacks": report.staircase_fallbacks,
                "search_fallbacks": report.search_fallbacks,
                "phase_conflict_edges": report.phase_conflict_edges,
                "parity_walk_shared_edges": report.parity_walk_shared_edges,
                "max_path_len": report.max_path_len,
                "conductance_lower_bound": phi,
                "sinclair_jerrum_bound": sj,
                "morris_peres_bound": mp,
            }),
        )?;
    }
    Ok(true)
}

fn run_couple(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<bool> {
    let mut ok = true;
    let mut rows = Vec::new();
    for &m in &cfg.m {
        let start = match cfg.start {
            CoupleStart::Mode => CouplingStart::FromCounts(start_counts(m, cfg.cap, KernelKind::L)?),
            CoupleStart::Lumped => CouplingStart::LumpedAgreement,
        };
        let ccfg = CouplingConfig { phase1_limit: cfg.t_max as u64, ..CouplingConfig::new(m, cfg.replicas, cfg.seed, start) };
        let results = run_coupling(&ccfg)?;
        let mut buf = Vec::new();
        write_coupling_csv(&mut buf, &results)?;
        sink.put(&format!("coupling_m{m}.csv"), &buf)?;
        let s = summarize(&ccfg, &results);
        ok &= s.phase1_timeouts == 0
            && s.phase2_timeouts == 0
            && s.disagreement_increases == 0
            && s.phase2_mean <= s.phase2_mean_target
            && s.phase2_variance < s.phase2_variance_target;
        sink.json(&format!("coupling_m{m}.json"), &json!({ "meta": metadata(cfg, 1), "start": start, "summary": s }))?;
        rows.push(s);
    }
    let fit = |f: &dyn Fn(&crate::coupling::CouplingSummary) -> f64| {
        fit_power_law(&rows.iter().map(|s| (s.m as f64, f(s))).collect::<Vec<_>>()).ok()
    };
    sink.json(
        "coupling_summary.json",
        &json!({
            "meta": metadata(cfg, 1),
            "summaries": rows,
            "phase1_median_fit": fit(&|s| s.phase1_median),
            "phase2_mean_fit": fit(&|s| s.phase2_mean),
            "phase2_variance_fit": fit(&|s| s.phase2_variance),
        }),
    )?;
    Ok(ok)
}

fn run_scaling(cfg: &ExperimentConfig, sink: &mut Sink) -> Result<bool> {
    let results: Vec<MixResult> = cfg.m.par_iter().map(|&m| mix_one(m, cfg, false)).collect::<Result<_>>()?;
    let tag = kernel_tag(cfg.kernel);
    let mut csv = String::from("m,tau,kappa,start\n");
    let mut relax = String::from("m,relaxation_time\n");
    let mut tau_pts = Vec::new();
    let mut rel_pts = Vec::new();
    for r in &results {
        let tau = r.tau.as_ref().map_err(Clone::clone)?;
        let gap = r.gap.as_ref().map_err(Clone::clone)?;
        csv.push_str(&format!("{},{},{},{}\n", r.m, tau, fmt_float(cfg.kappa), cells_str(r.start)));
        relax.push_str(&format!("{},{}\n", r.m, fmt_float(1.0 / gap)));
        tau_pts.push((r.m as f64, *tau as f64));
        rel_pts.push((r.m as f64, 1.0 / gap));
    }
    sink.put(&format!("scaling_{tag}.csv"), csv.as_bytes())?;
    sink.put(&format!("relaxation_{tag}.csv"), relax.as_bytes())?;
    let tf = fit_power_law(&tau_pts)?;
    let rf = fit_power_law(&rel_pts)?;
    let in_band = |f: &PowerLawFit| (1.6..=2.4).contains(&f.slope);
    let ok = in_band(&tf) && tf.r2 > 0.98 && in_band(&rf);
    sink.json(
        &format!("scaling_{tag}.json"),
        &json!({ "meta": metadata(cfg, 0), "kernel": tag, "kappa": cfg.kappa, "tau_fit": tf,
                 "relaxation_fit": rf, "passed": ok }),
    )?;
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_law_fits() {
        let ms = [10.0, 20.0, 30.0, 40.0];
        let sq: Vec<_> = ms.iter().map(|&m| (m, m * m)).collect();
        let f = fit_power_law(&sq).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.r2 - 1.0).abs() < 1e-12);
        let ml: Vec<_> = ms.iter().map(|&m: &f64| (m, m * m * m.ln())).collect();
        let f = fit_power_law(&ml).unwrap();
        assert!((2.0..=2.4).contains(&f.slope), "{}", f.slope);
        let c: Vec<_> = ms.iter().map(|&m| (m, 5.0)).collect();
        assert!(fit_power_law(&c).unwrap().slope.abs() < 1e-12);
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, -1.0), (3.0, 1.0)]).is_err());
        assert!(fit_power_law(&sq[..2]).is_err());
    }

    #[test]
    fn config_precedence_and_validation() {
        let file = parse_config_text("# sweep\nm = 10,20,30\nkappa=0.1\nseed = 9\n").unwrap();
        let mut flags = Overrides::default();
        flags.set("seed", "4").unwrap();
        let cfg = ExperimentConfig::resolve(Command::Scaling, &flags.over(&file)).unwrap();
        assert_eq!(cfg.m, vec![10, 20, 30]);
        assert_eq!(cfg.kappa, 0.1);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.t_max, ExperimentConfig::defaults(Command::Scaling).t_max);

        let e = parse_config_text("m = 10\nkappa 0.2\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = parse_config_text("bogus = 1").unwrap_err();
        assert!(e.to_string().contains("line 1"));

        let mut o = Overrides::default();
        o.set("m", "15").unwrap();
        let e = ExperimentConfig::resolve(Command::MixExact, &o).unwrap_err();
        assert_eq!(e, Error::ScaleNotDivisible(15));
        assert!(e.to_string().contains("m must be divisible by 10"));
        o.set("m", "70").unwrap();
        assert!(matches!(ExperimentConfig::resolve(Command::MixExact, &o), Err(Error::AboveCap { .. })));
        assert!(ExperimentConfig::resolve(Command::Couple, &o).is_ok());
        o.set("kappa", "1.5").unwrap();
        assert!(ExperimentConfig::resolve(Command::Couple, &o).is_err());
    }

    #[test]
    fn commands_round_trip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
    }
}
