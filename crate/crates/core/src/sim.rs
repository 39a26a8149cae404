//! Simulation lab for the mediator-with-proxies design: linear structural
//! models, four ATE estimators (oracle back-door, naive front-door, simple
//! proximal, proximal front-door), percentile bootstrap and the experiment
//! grid with bias and coverage metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{MixedGraph, VertexKind};
use crate::oracle::DiscreteScm;
use crate::table::Table;

/// Vertices in a topological order of the design graph.
pub const VERTICES: [&str; 7] = ["C", "U", "A", "Z", "M", "W", "Y"];

/// Directed edges of the design graph. `U` is hidden from every estimator
/// except the oracle.
pub const EDGES: [(&str, &str); 17] = [
    ("C", "U"),
    ("U", "A"),
    ("U", "Y"),
    ("C", "A"),
    ("C", "M"),
    ("C", "Y"),
    ("A", "M"),
    ("M", "Y"),
    ("A", "Z"),
    ("Z", "M"),
    ("M", "W"),
    ("W", "Y"),
    ("U", "Z"),
    ("U", "W"),
    ("C", "W"),
    ("C", "Z"),
    ("A", "Y"),
];

/// Linear-probability outputs are clipped to this range.
pub const CLIP: (f64, f64) = (0.01, 0.99);
pub const DEFAULT_TRAJECTORIES: usize = 100;
/// Weights for the mediator-fixed kernel are truncated at these quantiles.
pub const WEIGHT_QUANTILES: (f64, f64) = (0.025, 0.975);
pub const TRUTH_MC_SAMPLES: usize = 1_000_000;

const C: usize = 0;
const U: usize = 1;
const A: usize = 2;
const Z: usize = 3;
const M: usize = 4;
const W: usize = 5;
const Y: usize = 6;

fn index_of(v: &str) -> Option<usize> {
    VERTICES.iter().position(|x| *x == v)
}

pub fn edge_key(from: &str, to: &str) -> String {
    format!("{from}_{to}")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error("degenerate design: {0}")]
    Degenerate(String),
    #[error("propensity model: {0}")]
    Propensity(String),
    #[error("GMM: {0}")]
    Gmm(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Gaussian,
    /// Bernoulli with a clipped linear-probability link around 1/2.
    BernoulliLinear,
}

/// Which vertices are binary. `A` is binary in every mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Gaussian,
    /// `Z` and `M` binary as well.
    Binary,
    /// Every vertex binary, so the model is also a finite discrete SCM.
    Discrete,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self, SimError> {
        match s {
            "gaussian" => Ok(Mode::Gaussian),
            "binary" => Ok(Mode::Binary),
            "discrete" => Ok(Mode::Discrete),
            _ => Err(SimError::Config(format!("unknown mode `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Gaussian => "gaussian",
            Mode::Binary => "binary",
            Mode::Discrete => "discrete",
        }
    }

    fn family(self, v: usize) -> Family {
        match (self, v) {
            (_, A) | (Mode::Binary, Z | M) | (Mode::Discrete, _) => Family::BernoulliLinear,
            _ => Family::Gaussian,
        }
    }
}

/// Which effect counts as the truth. The estimators all condition on the
/// natural value of `Z`, so the default holds `Z` at its natural value and
/// only counts directed paths from `A` that avoid it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Truth {
    ZHeld,
    Total,
}

impl Truth {
    pub fn parse(s: &str) -> Result<Self, SimError> {
        match s {
            "z_held" => Ok(Truth::ZHeld),
            "total" => Ok(Truth::Total),
            _ => Err(SimError::Config(format!("unknown truth `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSem {
    /// Edge key `From_To` → coefficient.
    pub coef: BTreeMap<String, f64>,
    pub mode: Mode,
    /// Noise scale of every Gaussian vertex.
    pub noise: f64,
}

/// Seed for one grid cell. Each kind of draw gets its own ChaCha stream, and
/// the coordinates select the stream so the result does not depend on
/// scheduling.
pub fn cell_seed(master: u64, kind: u64, a: u64, b: u64, c: u64) -> u64 {
    assert!(kind < 16 && a < 1 << 20 && b < 1 << 20 && c < 1 << 20);
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(kind << 60 | a << 40 | b << 20 | c);
    rng.next_u64()
}

impl LinearSem {
    /// Every coefficient i.i.d. uniform on `(-bound, bound)`.
    pub fn sample(seed: u64, mode: Mode, bound: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coef = EDGES.iter().map(|(a, b)| (edge_key(a, b), rng.gen_range(-bound..bound))).collect();
        LinearSem { coef, mode, noise: 1.0 }
    }

    pub fn with_overrides(&self, overrides: &BTreeMap<String, f64>) -> Result<Self, SimError> {
        let mut out = self.clone();
        for (k, v) in overrides {
            match out.coef.get_mut(k) {
                Some(c) => *c = *v,
                None => return Err(SimError::Config(format!("`{k}` is not an edge of the design graph"))),
            }
        }
        Ok(out)
    }

    pub fn family(&self, v: &str) -> Option<Family> {
        index_of(v).map(|i| self.mode.family(i))
    }

    fn parents(&self) -> [Vec<(usize, f64)>; 7] {
        let mut p: [Vec<(usize, f64)>; 7] = Default::default();
        for (a, b) in EDGES {
            p[index_of(b).unwrap()].push((index_of(a).unwrap(), self.coef[&edge_key(a, b)]));
        }
        p
    }

    /// Linear predictor of vertex `v`; binary parents enter centred at 1/2.
    fn predictor(&self, parents: &[(usize, f64)], row: &[f64; 7]) -> f64 {
        parents
            .iter()
            .map(|(p, c)| c * if self.mode.family(*p) == Family::BernoulliLinear { row[*p] - 0.5 } else { row[*p] })
            .sum()
    }

    fn draw_noise(&self, rng: &mut impl Rng) -> [f64; 7] {
        let mut e = [0.0; 7];
        for (i, x) in e.iter_mut().enumerate() {
            *x = match self.mode.family(i) {
                Family::Gaussian => self.noise * rng.sample::<f64, _>(StandardNormal),
                Family::BernoulliLinear => rng.gen(),
            };
        }
        e
    }

    fn structural(&self, parents: &[Vec<(usize, f64)>; 7], v: usize, row: &[f64; 7], noise: f64) -> f64 {
        let lin = self.predictor(&parents[v], row);
        match self.mode.family(v) {
            Family::Gaussian => lin + noise,
            Family::BernoulliLinear => f64::from(noise < (0.5 + lin).clamp(CLIP.0, CLIP.1)),
        }
    }

    /// Solves the model for one set of noises. With `treat = Some(a)` the
    /// treatment is set to `a`; under `Truth::ZHeld` the control proxy keeps
    /// the value it has without intervention.
    fn solve(&self, parents: &[Vec<(usize, f64)>; 7], e: &[f64; 7], treat: Option<(f64, Truth)>) -> [f64; 7] {
        let mut row = [0.0; 7];
        for v in 0..7 {
            row[v] = self.structural(parents, v, &row, e[v]);
        }
        let Some((a, truth)) = treat else { return row };
        let natural = row;
        row[A] = a;
        for v in A + 1..7 {
            row[v] = if v == Z && truth == Truth::ZHeld { natural[Z] } else { self.structural(parents, v, &row, e[v]) };
        }
        row
    }

    pub fn simulate(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parents = self.parents();
        let rows = (0..n).map(|_| self.solve(&parents, &self.draw_noise(&mut rng), None)).collect();
        Dataset { rows, seed, mode: self.mode }
    }

    /// Sum over directed paths from `A` to `Y` of the product of edge
    /// coefficients. Exact for the Gaussian mode; for binary vertices it is
    /// the effect only while no probability is clipped.
    pub fn path_sum(&self, truth: Truth) -> f64 {
        fn walk(sem: &LinearSem, v: &str, truth: Truth, acc: f64) -> f64 {
            if v == "Y" {
                return acc;
            }
            EDGES
                .iter()
                .filter(|(a, b)| *a == v && !(truth == Truth::ZHeld && *b == "Z"))
                .map(|(a, b)| walk(sem, b, truth, acc * sem.coef[&edge_key(a, b)]))
                .sum()
        }
        walk(self, "A", truth, 1.0)
    }

    /// Mean of `Y(1) − Y(0)` over common noise draws.
    pub fn monte_carlo_ate(&self, truth: Truth, samples: usize, seed: u64) -> (f64, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parents = self.parents();
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..samples {
            let e = self.draw_noise(&mut rng);
            let d = self.solve(&parents, &e, Some((1.0, truth)))[Y] - self.solve(&parents, &e, Some((0.0, truth)))[Y];
            s += d;
            s2 += d * d;
        }
        let n = samples as f64;
        let mean = s / n;
        (mean, ((s2 / n - mean * mean).max(0.0) / n).sqrt())
    }

    /// Analytic path sum in the Gaussian mode; Monte-Carlo otherwise.
    pub fn true_ate(&self, truth: Truth, seed: u64) -> f64 {
        match self.mode {
            Mode::Gaussian => self.path_sum(truth),
            _ => self.monte_carlo_ate(truth, TRUTH_MC_SAMPLES, seed).0,
        }
    }

    /// The same model as a finite SCM; only the discrete mode qualifies.
    pub fn to_discrete_scm(&self) -> Option<DiscreteScm> {
        if self.mode != Mode::Discrete {
            return None;
        }
        let mut g = MixedGraph::new();
        for v in VERTICES {
            g.add_vertex(v, if v == "U" { VertexKind::UnresolvableHidden } else { VertexKind::Observed }).ok()?;
        }
        for (a, b) in EDGES {
            g.add_directed(a, b).ok()?;
        }
        let parents = self.parents();
        let cards: BTreeMap<String, usize> = VERTICES.iter().map(|v| (v.to_string(), 2)).collect();
        let mut cpts = BTreeMap::new();
        for (v, name) in VERTICES.iter().enumerate() {
            let mut scope: Vec<(String, usize)> = parents[v].iter().map(|(p, _)| (VERTICES[*p].to_string(), 2)).collect();
            scope.push((name.to_string(), 2));
            let t = Table::from_fn(&scope, |asg| {
                let mut row = [0.0; 7];
                for (p, _) in &parents[v] {
                    row[*p] = asg[VERTICES[*p]] as f64;
                }
                let p1 = (0.5 + self.predictor(&parents[v], &row)).clamp(CLIP.0, CLIP.1);
                if asg[*name] == 1 {
                    p1
                } else {
                    1.0 - p1
                }
            });
            cpts.insert(name.to_string(), t);
        }
        DiscreteScm::new(g, cards, cpts).ok()
    }
}

/// Rows over `VERTICES`. `U` is present for the oracle only.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub rows: Vec<[f64; 7]>,
    pub seed: u64,
    pub mode: Mode,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, v: &str) -> Vec<f64> {
        let i = index_of(v).expect("design vertex");
        self.rows.iter().map(|r| r[i]).collect()
    }

    fn resample(&self, rng: &mut impl Rng) -> Dataset {
        let n = self.rows.len();
        Dataset { rows: (0..n).map(|_| self.rows[rng.gen_range(0..n)]).collect(), seed: self.seed, mode: self.mode }
    }

    /// Design matrix with an intercept column followed by the given columns.
    fn design(&self, cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), cols.len() + 1, |i, j| if j == 0 { 1.0 } else { self.rows[i][cols[j - 1]] })
    }

    fn target(&self, col: usize) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r[col]))
    }
}

// ---------------------------------------------------------------------------
// Regression primitives

fn solve_spd(h: &DMatrix<f64>, g: &DVector<f64>, what: &str) -> Result<DVector<f64>, SimError> {
    let sv = h.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0 && min > 1e-12 * max) {
        return Err(SimError::Degenerate(what.to_string()));
    }
    h.clone().cholesky().map(|c| c.solve(g)).ok_or_else(|| SimError::Degenerate(what.to_string()))
}

/// Weighted least squares; returns coefficients and the weighted residual
/// variance.
fn wls(x: &DMatrix<f64>, y: &DVector<f64>, w: Option<&[f64]>, what: &str) -> Result<(DVector<f64>, f64), SimError> {
    let n = x.nrows();
    let wv = |i: usize| w.map_or(1.0, |w| w[i]);
    let mut xw = x.clone();
    for i in 0..n {
        xw.row_mut(i).scale_mut(wv(i));
    }
    let beta = solve_spd(&(xw.transpose() * x), &(xw.transpose() * y), what)?;
    let r = y - x * &beta;
    let sw: f64 = (0..n).map(wv).sum();
    let var = (0..n).map(|i| wv(i) * r[i] * r[i]).sum::<f64>() / sw;
    Ok((beta, var))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logistic regression by Newton iterations.
fn logistic(x: &DMatrix<f64>, y: &DVector<f64>, what: &str) -> Result<DVector<f64>, SimError> {
    let k = x.ncols();
    let mut beta = DVector::zeros(k);
    for _ in 0..100 {
        let eta = x * &beta;
        let p = eta.map(sigmoid);
        let mut xw = x.clone();
        for i in 0..x.nrows() {
            xw.row_mut(i).scale_mut(p[i] * (1.0 - p[i]));
        }
        let h = xw.transpose() * x;
        let g = x.transpose() * (y - &p);
        let step = solve_spd(&h, &g, what).map_err(|_| SimError::Propensity(format!("{what}: singular information matrix")))?;
        beta += &step;
        if step.amax() < 1e-10 {
            let fitted = (x * &beta).map(sigmoid);
            if fitted.iter().all(|p| *p < 1e-6 || *p > 1.0 - 1e-6) {
                return Err(SimError::Propensity(format!("{what}: fitted probabilities are all 0 or 1")));
            }
            return Ok(beta);
        }
    }
    Err(SimError::Propensity(format!("{what}: Newton iterations did not converge")))
}

/// Type-7 sample quantile.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn normal_density(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Linear bridge fitted by two-step GMM.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmFit {
    /// Intercept first, then one coefficient per regressor.
    pub theta: Vec<f64>,
    pub regressors: Vec<String>,
    pub instruments: Vec<String>,
    /// Euclidean norm of the averaged moment vector at the estimate.
    pub moment_norm: f64,
}

impl GmmFit {
    pub fn coefficient(&self, v: &str) -> Option<f64> {
        self.regressors.iter().position(|r| r == v).map(|i| self.theta[i + 1])
    }
}

/// Moments `E[w · g(instruments) · (y − θ·(1, regressors))] = 0`, first with
/// identity weighting, then with the inverse moment covariance.
pub fn gmm_linear_bridge(data: &Dataset, outcome: &str, regressors: &[&str], instruments: &[&str], weights: Option<&[f64]>) -> Result<GmmFit, SimError> {
    let col = |v: &&str| index_of(v).ok_or_else(|| SimError::Config(format!("unknown column `{v}`")));
    let rx: Vec<usize> = regressors.iter().map(col).collect::<Result<_, _>>()?;
    let gx: Vec<usize> = instruments.iter().map(col).collect::<Result<_, _>>()?;
    if gx.len() < rx.len() {
        return Err(SimError::Gmm(format!("{} instruments for {} unknowns", gx.len() + 1, rx.len() + 1)));
    }
    let n = data.len();
    let x = data.design(&rx);
    let mut g = data.design(&gx);
    if let Some(w) = weights {
        for i in 0..n {
            g.row_mut(i).scale_mut(w[i]);
        }
    }
    let y = data.target(index_of(outcome).expect("design vertex"));
    let nf = n as f64;
    let gx_mat = g.transpose() * &x / nf;
    let gy = g.transpose() * &y / nf;

    let step = |omega: &DMatrix<f64>| -> Result<DVector<f64>, SimError> {
        let h = gx_mat.transpose() * omega * &gx_mat;
        let r = gx_mat.transpose() * omega * &gy;
        solve_spd(&h, &r, "bridge moments").map_err(|_| SimError::Gmm("moment Jacobian is rank deficient".into()))
    };
    let theta1 = step(&DMatrix::identity(gx.len() + 1, gx.len() + 1))?;
    let u = &y - &x * &theta1;
    let mut s = DMatrix::zeros(gx.len() + 1, gx.len() + 1);
    for i in 0..n {
        let gi = g.row(i).transpose() * u[i];
        s += &gi * gi.transpose();
    }
    s /= nf;
    let theta = match s.clone().pseudo_inverse(1e-12) {
        Ok(omega) if gx.len() > rx.len() => step(&omega)?,
        _ => theta1,
    };
    let moment_norm = (&gy - &gx_mat * &theta).norm();
    Ok(GmmFit {
        theta: theta.iter().copied().collect(),
        regressors: regressors.iter().map(|s| s.to_string()).collect(),
        instruments: instruments.iter().map(|s| s.to_string()).collect(),
        moment_norm,
    })
}

// ---------------------------------------------------------------------------
// Estimators

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Estimator {
    OracleBackdoor,
    NaiveFrontDoor,
    SimpleProximal,
    ProximalFrontDoor,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::OracleBackdoor, Estimator::NaiveFrontDoor, Estimator::SimpleProximal, Estimator::ProximalFrontDoor];

    pub fn id(self) -> &'static str {
        match self {
            Estimator::OracleBackdoor => "oracle_backdoor",
            Estimator::NaiveFrontDoor => "naive_front_door",
            Estimator::SimpleProximal => "simple_proximal",
            Estimator::ProximalFrontDoor => "proximal_front_door",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Estimator::OracleBackdoor => "Oracle Backdoor",
            Estimator::NaiveFrontDoor => "Naive Front-Door",
            Estimator::SimpleProximal => "Simple Proximal",
            Estimator::ProximalFrontDoor => "Proximal Front-Door",
        }
    }

    pub fn parse(s: &str) -> Result<Self, SimError> {
        Estimator::ALL.into_iter().find(|e| e.id() == s).ok_or_else(|| SimError::Config(format!("unknown estimator `{s}`")))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EstimatorOptions {
    pub trajectories: usize,
    /// Seeds the trajectory sampler of the proximal front-door estimator.
    pub seed: u64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        EstimatorOptions { trajectories: DEFAULT_TRAJECTORIES, seed: 0 }
    }
}

pub fn estimate(est: Estimator, data: &Dataset, opts: &EstimatorOptions) -> Result<f64, SimError> {
    match est {
        Estimator::OracleBackdoor => oracle_backdoor(data),
        Estimator::NaiveFrontDoor => naive_front_door(data),
        Estimator::SimpleProximal => simple_proximal(data).map(|f| f.coefficient("A").unwrap()),
        Estimator::ProximalFrontDoor => estimate_proximal_frontdoor(data, opts).map(|f| f.ate),
    }
}

/// Regression of `Y` on `A` adjusting for `Z`, `U` and `C`.
fn oracle_backdoor(data: &Dataset) -> Result<f64, SimError> {
    let (beta, _) = wls(&data.design(&[A, Z, U, C]), &data.target(Y), None, "outcome regression")?;
    Ok(beta[1])
}

/// Front-door functional with `(C, Z)` as covariates. The outcome
/// regression is linear in the mediator, so only the mediator's mean shift
/// under treatment enters.
fn naive_front_door(data: &Dataset) -> Result<f64, SimError> {
    let (beta, _) = wls(&data.design(&[A, M, C, Z]), &data.target(Y), None, "outcome regression")?;
    let med = MediatorModel::fit(data)?;
    let shift = data.rows.iter().map(|r| med.mean(1.0, r[Z], r[C]) - med.mean(0.0, r[Z], r[C])).sum::<f64>() / data.len() as f64;
    Ok(beta[2] * shift)
}

/// Proximal g-formula treating `Z` and `W` as proxies and ignoring `M`.
pub fn simple_proximal(data: &Dataset) -> Result<GmmFit, SimError> {
    gmm_linear_bridge(data, "Y", &["W", "A", "C"], &["Z", "A", "C"], None)
}

/// Intermediate models of the proximal front-door pipeline.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrontDoorFit {
    pub ate: f64,
    /// Bridge over `(W, A, C, M)` under the mediator-fixed kernel.
    pub bridge: GmmFit,
    /// Truncation bounds applied to the stabilised mediator weights.
    pub weight_bounds: (f64, f64),
    pub treatment_model: Vec<f64>,
    pub mediator_model: Vec<f64>,
    pub proxy_model: Vec<f64>,
    pub proxy_residual_var: f64,
}

enum MediatorModel {
    Linear { beta: DVector<f64>, var: f64 },
    Logistic { beta: DVector<f64> },
}

impl MediatorModel {
    fn fit(data: &Dataset) -> Result<Self, SimError> {
        let x = data.design(&[A, Z, C]);
        let m = data.target(M);
        Ok(match data.mode.family(M) {
            Family::Gaussian => {
                let (beta, var) = wls(&x, &m, None, "mediator regression")?;
                MediatorModel::Linear { beta, var }
            }
            Family::BernoulliLinear => MediatorModel::Logistic { beta: logistic(&x, &m, "mediator model")? },
        })
    }

    fn coefs(&self) -> Vec<f64> {
        match self {
            MediatorModel::Linear { beta, .. } | MediatorModel::Logistic { beta } => beta.iter().copied().collect(),
        }
    }

    fn mean(&self, a: f64, z: f64, c: f64) -> f64 {
        match self {
            MediatorModel::Linear { beta, .. } => beta[0] + beta[1] * a + beta[2] * z + beta[3] * c,
            MediatorModel::Logistic { beta } => sigmoid(beta[0] + beta[1] * a + beta[2] * z + beta[3] * c),
        }
    }

    fn density(&self, m: f64, a: f64, z: f64, c: f64) -> f64 {
        let mu = self.mean(a, z, c);
        match self {
            MediatorModel::Linear { var, .. } => normal_density(m, mu, *var),
            MediatorModel::Logistic { .. } => {
                if m > 0.5 {
                    mu
                } else {
                    1.0 - mu
                }
            }
        }
    }

    fn draw(&self, a: f64, z: f64, c: f64, rng: &mut impl Rng) -> f64 {
        let mu = self.mean(a, z, c);
        match self {
            MediatorModel::Linear { var, .. } => mu + var.sqrt() * rng.sample::<f64, _>(StandardNormal),
            MediatorModel::Logistic { .. } => f64::from(rng.gen::<f64>() < mu),
        }
    }
}

/// Stabilised weights `p(m) / p(m | a, z, c)` that turn the observed law
/// into the kernel with `M` fixed, truncated at sample quantiles.
fn mediator_weights(data: &Dataset, model: &MediatorModel) -> (Vec<f64>, (f64, f64)) {
    let m = data.column("M");
    let n = m.len() as f64;
    let mean = m.iter().sum::<f64>() / n;
    let var = m.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let marginal = |x: f64| match model {
        MediatorModel::Linear { .. } => normal_density(x, mean, var),
        MediatorModel::Logistic { .. } => {
            if x > 0.5 {
                mean
            } else {
                1.0 - mean
            }
        }
    };
    let raw: Vec<f64> = data.rows.iter().map(|r| marginal(r[M]) / model.density(r[M], r[A], r[Z], r[C])).collect();
    let mut sorted = raw.clone();
    sorted.sort_by(f64::total_cmp);
    let bounds = (quantile(&sorted, WEIGHT_QUANTILES.0), quantile(&sorted, WEIGHT_QUANTILES.1));
    (raw.into_iter().map(|w| w.clamp(bounds.0, bounds.1)).collect(), bounds)
}

/// Weighted mediator model, bridge by GMM, then trajectories of `Y(1)` and
/// `Y(0)` from each row's `(Z, C)`: natural treatment from `p(A | Z, C)`,
/// mediator from `p(M | a, Z, C)`, proxy from the weighted regression of
/// `W` on `(M, A, Z, C)`, outcome from the bridge.
pub fn estimate_proximal_frontdoor(data: &Dataset, opts: &EstimatorOptions) -> Result<FrontDoorFit, SimError> {
    let med = MediatorModel::fit(data)?;
    let (weights, weight_bounds) = mediator_weights(data, &med);
    let bridge = gmm_linear_bridge(data, "Y", &["W", "A", "C", "M"], &["Z", "A", "C", "M"], Some(&weights))?;
    let treat = logistic(&data.design(&[Z, C]), &data.target(A), "treatment model")?;
    let (proxy, proxy_var) = wls(&data.design(&[M, A, Z, C]), &data.target(W), Some(&weights), "proxy regression")?;
    let binary_w = data.mode.family(W) == Family::BernoulliLinear;
    let th = &bridge.theta;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let sd_w = proxy_var.sqrt();
    let mut total = 0.0;
    for r in &data.rows {
        let (z, c) = (r[Z], r[C]);
        let pa = sigmoid(treat[0] + treat[1] * z + treat[2] * c);
        for _ in 0..opts.trajectories {
            for a in [1.0, 0.0] {
                let a_nat = f64::from(rng.gen::<f64>() < pa);
                let m = med.draw(a, z, c, &mut rng);
                let mean_w = proxy[0] + proxy[1] * m + proxy[2] * a_nat + proxy[3] * z + proxy[4] * c;
                let w = if binary_w {
                    f64::from(rng.gen::<f64>() < mean_w.clamp(0.0, 1.0))
                } else {
                    mean_w + sd_w * rng.sample::<f64, _>(StandardNormal)
                };
                let y = th[0] + th[1] * w + th[2] * a + th[3] * c + th[4] * m;
                total += if a == 1.0 { y } else { -y };
            }
        }
    }
    let ate = total / (data.len() * opts.trajectories.max(1)) as f64;
    Ok(FrontDoorFit {
        ate,
        bridge,
        weight_bounds,
        treatment_model: treat.iter().copied().collect(),
        mediator_model: med.coefs(),
        proxy_model: proxy.iter().copied().collect(),
        proxy_residual_var: proxy_var,
    })
}

// ---------------------------------------------------------------------------
// Bootstrap

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInterval {
    pub lo: f64,
    pub hi: f64,
    pub successes: usize,
    pub failures: usize,
}

/// Percentile interval over `b` resamples. Resample `i` draws its rows and
/// any estimator randomness from its own stream.
pub fn bootstrap_with(
    data: &Dataset,
    b: usize,
    level: f64,
    seed: u64,
    f: impl Fn(&Dataset, u64) -> Result<f64, SimError>,
) -> Result<BootstrapInterval, SimError> {
    if b < 2 {
        return Err(SimError::Config("bootstrap needs at least 2 resamples".into()));
    }
    let mut ests = Vec::with_capacity(b);
    let mut failures = 0;
    for i in 0..b as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i);
        let sample = data.resample(&mut rng);
        match f(&sample, rng.next_u64()) {
            Ok(x) if x.is_finite() => ests.push(x),
            _ => failures += 1,
        }
    }
    if ests.is_empty() {
        return Err(SimError::Degenerate("every bootstrap resample failed".into()));
    }
    ests.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    Ok(BootstrapInterval { lo: quantile(&ests, tail), hi: quantile(&ests, 1.0 - tail), successes: ests.len(), failures })
}

pub fn bootstrap_ci(est: Estimator, data: &Dataset, b: usize, level: f64, seed: u64, trajectories: usize) -> Result<BootstrapInterval, SimError> {
    bootstrap_with(data, b, level, seed, |d, s| estimate(est, d, &EstimatorOptions { trajectories, seed: s }))
}

// ---------------------------------------------------------------------------
// Experiments

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SweepAxis {
    /// Every listed edge is set to the swept value.
    Edges(Vec<String>),
    SampleSize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub n_dgps: usize,
    pub datasets_per_dgp: usize,
    pub n: usize,
    pub mode: Mode,
    pub overrides: BTreeMap<String, f64>,
    /// Resamples per dataset; 0 skips intervals.
    pub bootstrap: usize,
    pub level: f64,
    pub seed: u64,
    pub truth: Truth,
    pub trajectories: usize,
    pub coef_bound: f64,
    pub estimators: Vec<Estimator>,
    pub sweep: Option<(SweepAxis, Vec<f64>)>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            n_dgps: 4,
            datasets_per_dgp: 64,
            n: 4000,
            mode: Mode::Gaussian,
            overrides: BTreeMap::new(),
            bootstrap: 0,
            level: 0.95,
            seed: 0,
            truth: Truth::ZHeld,
            trajectories: DEFAULT_TRAJECTORIES,
            coef_bound: 2.0,
            estimators: Estimator::ALL.to_vec(),
            sweep: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, SimError> {
    v.parse().map_err(|_| SimError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, SimError> {
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

impl ExperimentConfig {
    /// Flat `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = 0;
        let mut sweep_axis = None;
        let mut sweep_values = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| SimError::Config(format!("line {}: expected key=value", no + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            seen += 1;
            match k {
                "name" => cfg.name = v.to_string(),
                "n_dgps" => cfg.n_dgps = parse_num(k, v)?,
                "datasets_per_dgp" => cfg.datasets_per_dgp = parse_num(k, v)?,
                "n" => cfg.n = parse_num(k, v)?,
                "mode" => cfg.mode = Mode::parse(v)?,
                "bootstrap" => cfg.bootstrap = parse_num(k, v)?,
                "level" => cfg.level = parse_num(k, v)?,
                "seed" => cfg.seed = parse_num(k, v)?,
                "truth" => cfg.truth = Truth::parse(v)?,
                "trajectories" => cfg.trajectories = parse_num(k, v)?,
                "coef_bound" => cfg.coef_bound = parse_num(k, v)?,
                "estimators" => cfg.estimators = v.split(',').map(|e| Estimator::parse(e.trim())).collect::<Result<_, _>>()?,
                "sweep" => {
                    sweep_axis = Some(if v == "n" {
                        SweepAxis::SampleSize
                    } else {
                        SweepAxis::Edges(v.split(',').map(|e| e.trim().to_string()).collect())
                    })
                }
                "sweep_values" => sweep_values = Some(parse_list(k, v)?),
                _ => match k.strip_prefix("override.") {
                    Some(edge) => {
                        cfg.overrides.insert(edge.to_string(), parse_num(k, v)?);
                    }
                    None => return Err(SimError::Config(format!("line {}: unknown key `{k}`", no + 1))),
                },
            }
        }
        if seen == 0 {
            return Err(SimError::Config("empty config".into()));
        }
        cfg.sweep = match (sweep_axis, sweep_values) {
            (Some(a), Some(v)) => Some((a, v)),
            (None, None) => None,
            _ => return Err(SimError::Config("`sweep` and `sweep_values` go together".into())),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_dgps == 0 || self.datasets_per_dgp == 0 || self.n < 2 || self.trajectories == 0 {
            return Err(SimError::Config("counts must be at least 1 (n at least 2)".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(SimError::Config("level must lie in (0, 1)".into()));
        }
        if self.bootstrap == 1 {
            return Err(SimError::Config("bootstrap needs 0 or at least 2 resamples".into()));
        }
        if self.estimators.is_empty() {
            return Err(SimError::Config("no estimators".into()));
        }
        let known: Vec<String> = EDGES.iter().map(|(a, b)| edge_key(a, b)).collect();
        let mut edges: Vec<&String> = self.overrides.keys().collect();
        if let Some((SweepAxis::Edges(e), _)) = &self.sweep {
            edges.extend(e);
        }
        for e in edges {
            if !known.contains(e) {
                return Err(SimError::Config(format!("`{e}` is not an edge of the design graph")));
            }
        }
        if let Some((axis, values)) = &self.sweep {
            if values.is_empty() || (*axis == SweepAxis::SampleSize && values.iter().any(|v| *v < 2.0 || v.fract() != 0.0)) {
                return Err(SimError::Config("bad sweep values".into()));
            }
        }
        Ok(())
    }

    /// `(label, sample size, overrides)` for each column of the report.
    pub fn settings(&self) -> Vec<(String, usize, BTreeMap<String, f64>)> {
        match &self.sweep {
            None => vec![("base".into(), self.n, self.overrides.clone())],
            Some((SweepAxis::SampleSize, vals)) => vals.iter().map(|v| (format!("{v}"), *v as usize, self.overrides.clone())).collect(),
            Some((SweepAxis::Edges(edges), vals)) => vals
                .iter()
                .map(|v| {
                    let mut o = self.overrides.clone();
                    for e in edges {
                        o.insert(e.clone(), *v);
                    }
                    (format!("{v}"), self.n, o)
                })
                .collect(),
        }
    }

    pub fn sweep_label(&self) -> String {
        match &self.sweep {
            None => "Setting".into(),
            Some((SweepAxis::SampleSize, _)) => "Sample Size".into(),
            Some((SweepAxis::Edges(e), _)) => e.iter().map(|x| x.replace('_', " -> ")).collect::<Vec<_>>().join(", "),
        }
    }
}

const SEED_DGP: u64 = 1;
const SEED_DATA: u64 = 2;
const SEED_BOOT: u64 = 3;
const SEED_TRAJ: u64 = 4;
const SEED_TRUTH: u64 = 5;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub setting: usize,
    pub dgp: usize,
    pub dataset: usize,
    pub estimator: Estimator,
    pub truth: f64,
    pub estimate: Option<f64>,
    pub interval: Option<BootstrapInterval>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRow {
    pub estimator: Estimator,
    pub setting: String,
    pub mean_abs_bias: Option<f64>,
    pub pct_abs_bias: Option<f64>,
    pub coverage: Option<f64>,
    pub mean_width: Option<f64>,
    pub failures: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub config: ExperimentConfig,
    pub settings: Vec<String>,
    pub rows: Vec<MetricRow>,
    pub cells: Vec<CellResult>,
}

/// Bias metrics average the per-DGP mean error, so its sign is taken
/// before the absolute value; coverage and width average over datasets.
pub fn metrics(cells: &[&CellResult], n_dgps: usize) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    let mut mab = Vec::new();
    let mut pab = Vec::new();
    for i in 0..n_dgps {
        let ok: Vec<&&CellResult> = cells.iter().filter(|c| c.dgp == i && c.estimate.is_some()).collect();
        if ok.is_empty() {
            continue;
        }
        let truth = ok[0].truth;
        let bias = ok.iter().map(|c| c.estimate.unwrap() - c.truth).sum::<f64>() / ok.len() as f64;
        mab.push(bias.abs());
        if truth != 0.0 {
            pab.push(bias.abs() / truth.abs());
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let iv: Vec<(&BootstrapInterval, f64)> = cells.iter().filter_map(|c| c.interval.as_ref().map(|i| (i, c.truth))).collect();
    let cover: Vec<f64> = iv.iter().map(|(i, t)| f64::from(i.lo <= *t && *t <= i.hi)).collect();
    let width: Vec<f64> = iv.iter().map(|(i, _)| i.hi - i.lo).collect();
    (mean(&mab), if pab.len() == mab.len() { mean(&pab) } else { None }, mean(&cover), mean(&width))
}

fn run_cell(cfg: &ExperimentConfig, setting: usize, sem: &LinearSem, truth: f64, n: usize, dgp: usize, dataset: usize) -> Vec<CellResult> {
    let data = sem.simulate(n, cell_seed(cfg.seed, SEED_DATA, dgp as u64, dataset as u64, 0));
    let traj_seed = cell_seed(cfg.seed, SEED_TRAJ, dgp as u64, dataset as u64, setting as u64);
    cfg.estimators
        .iter()
        .map(|&est| {
            let opts = EstimatorOptions { trajectories: cfg.trajectories, seed: traj_seed };
            let mut cell = CellResult { setting, dgp, dataset, estimator: est, truth, estimate: None, interval: None, error: None };
            match estimate(est, &data, &opts) {
                Ok(x) => cell.estimate = Some(x),
                Err(e) => cell.error = Some(e.to_string()),
            }
            if cfg.bootstrap >= 2 && cell.estimate.is_some() {
                let seed = cell_seed(cfg.seed, SEED_BOOT, dgp as u64, dataset as u64, setting as u64);
                match bootstrap_ci(est, &data, cfg.bootstrap, cfg.level, seed, cfg.trajectories) {
                    Ok(i) => cell.interval = Some(i),
                    Err(e) => cell.error = Some(format!("bootstrap: {e}")),
                }
            }
            cell
        })
        .collect()
}

/// Runs the full grid. Cells run in parallel on the current rayon pool and
/// are collected in grid order, so the report does not depend on it.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricReport, SimError> {
    cfg.validate()?;
    let settings = cfg.settings();
    let mut sems = Vec::new();
    for (s, (_, _, overrides)) in settings.iter().enumerate() {
        for d in 0..cfg.n_dgps {
            let sem = LinearSem::sample(cell_seed(cfg.seed, SEED_DGP, d as u64, 0, 0), cfg.mode, cfg.coef_bound).with_overrides(overrides)?;
            let truth = sem.true_ate(cfg.truth, cell_seed(cfg.seed, SEED_TRUTH, d as u64, s as u64, 0));
            sems.push((s, d, sem, truth));
        }
    }
    let jobs: Vec<(usize, usize, usize)> = sems
        .iter()
        .enumerate()
        .flat_map(|(k, (s, _, _, _))| (0..cfg.datasets_per_dgp).map(move |j| (k, *s, j)))
        .collect();
    let cells: Vec<CellResult> = jobs
        .par_iter()
        .map(|&(k, s, j)| {
            let (_, d, sem, truth) = &sems[k];
            run_cell(cfg, s, sem, *truth, settings[s].1, *d, j)
        })
        .flatten_iter()
        .collect();
    let mut rows = Vec::new();
    for &est in &cfg.estimators {
        for (s, (label, _, _)) in settings.iter().enumerate() {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.estimator == est && c.setting == s).collect();
            let (mean_abs_bias, pct_abs_bias, coverage, mean_width) = metrics(&mine, cfg.n_dgps);
            let failures = mine.iter().filter(|c| c.error.is_some()).count();
            rows.push(MetricRow { estimator: est, setting: label.clone(), mean_abs_bias, pct_abs_bias, coverage, mean_width, failures });
        }
    }
    Ok(MetricReport { config: cfg.clone(), settings: settings.into_iter().map(|s| s.0).collect(), rows, cells })
}

fn fmt_metric(x: Option<f64>) -> String {
    x.map_or("NA".into(), |v| format!("{v:.3}"))
}

impl MetricReport {
    pub fn row(&self, est: Estimator, setting: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.estimator == est && r.setting == setting)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("estimator,setting,mean_abs_bias,pct_abs_bias,coverage,mean_width,failures\n");
        for r in &self.rows {
            let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.estimator.id(),
                r.setting,
                f(r.mean_abs_bias),
                f(r.pct_abs_bias),
                f(r.coverage),
                f(r.mean_width),
                r.failures
            );
        }
        s
    }

    pub fn cells_csv(&self) -> String {
        let mut s = String::from("setting,dgp,dataset,estimator,truth,estimate,lo,hi,error\n");
        for c in &self.cells {
            let f = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                self.settings[c.setting],
                c.dgp,
                c.dataset,
                c.estimator.id(),
                c.truth,
                f(c.estimate),
                f(c.interval.as_ref().map(|i| i.lo)),
                f(c.interval.as_ref().map(|i| i.hi)),
                c.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Value {
        let failures: Vec<&CellResult> = self.cells.iter().filter(|c| c.error.is_some()).collect();
        serde_json::json!({
            "config": self.config,
            "settings": self.settings,
            "metrics": self.rows,
            "failures": failures,
        })
    }

    /// Reads back what `to_json` wrote; only failed cells are kept.
    pub fn from_json(v: &serde_json::Value) -> Result<Self, SimError> {
        #[derive(Deserialize)]
        struct Stored {
            config: ExperimentConfig,
            settings: Vec<String>,
            metrics: Vec<MetricRow>,
            failures: Vec<CellResult>,
        }
        let s: Stored = serde_json::from_value(v.clone()).map_err(|e| SimError::Config(format!("report: {e}")))?;
        Ok(MetricReport { config: s.config, settings: s.settings, rows: s.metrics, cells: s.failures })
    }

    /// Estimators as rows, one column group per metric and one column per
    /// setting.
    pub fn render_table(&self) -> String {
        let blocks: Vec<(&str, fn(&MetricRow) -> Option<f64>)> = if self.config.bootstrap >= 2 {
            vec![("Bootstrap Interval Coverage", |r| r.coverage), ("Bootstrap Interval Width", |r| r.mean_width)]
        } else {
            vec![("Mean Absolute Bias", |r| r.mean_abs_bias), ("Percent Absolute Bias", |r| r.pct_abs_bias)]
        };
        let w = 9;
        let group = self.settings.len() * w;
        let mut s = String::new();
        let _ = write!(s, "{:<22}", "Metric");
        for (name, _) in &blocks {
            let _ = write!(s, "|{name:^group$}");
        }
        s.push('\n');
        let _ = write!(s, "{:<22}", self.config.sweep_label());
        for _ in &blocks {
            s.push('|');
            for l in &self.settings {
                let _ = write!(s, "{l:>w$}");
            }
        }
        s.push('\n');
        s.push_str(&"-".repeat(22 + blocks.len() * (group + 1)));
        s.push('\n');
        for &est in &self.config.estimators {
            let _ = write!(s, "{:<22}", est.label());
            for (_, get) in &blocks {
                s.push('|');
                for l in &self.settings {
                    let _ = write!(s, "{:>w$}", fmt_metric(self.row(est, l).and_then(get)));
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests;
