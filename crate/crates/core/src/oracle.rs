//! Finite discrete structural causal models used as ground truth, and the
//! exact linear-algebra solver for discrete bridge equations.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{parse_graph, GraphError, MixedGraph, VSet, VertexKind};
use crate::table::{fmt_assignment, Assignment, Table, TableError};

pub const RESIDUAL_TOL: f64 = 1e-8;
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("graph has bidirected edges; expand them into hidden parents first")]
    NotADag,
    #[error("missing cardinality for `{0}`")]
    MissingCard(String),
    #[error("cpt for `{0}`: {1}")]
    BadCpt(String, String),
    #[error("empty bridge stratum {0}")]
    EmptyStratum(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Structural model over a DAG; every vertex has a CPT p(v | parents).
#[derive(Clone, Debug)]
pub struct DiscreteScm {
    graph: MixedGraph,
    cards: BTreeMap<String, usize>,
    cpts: BTreeMap<String, Table>,
}

/// Replaces each bidirected edge `a <-> b` by a fresh unresolvable hidden
/// parent named `L_a_b`.
pub fn expand_bidirected(g: &MixedGraph) -> MixedGraph {
    let mut out = MixedGraph::new();
    for (v, k) in g.vertices() {
        out.add_vertex(v, k).unwrap();
    }
    for (a, b) in g.directed_edges() {
        out.add_directed(a, b).unwrap();
    }
    for (a, b) in g.bidirected_edges() {
        let mut name = format!("L_{a}_{b}");
        while out.contains(&name) {
            name.push('_');
        }
        out.add_vertex(&name, VertexKind::UnresolvableHidden).unwrap();
        out.add_directed(&name, a).unwrap();
        out.add_directed(&name, b).unwrap();
    }
    out
}

impl DiscreteScm {
    pub fn new(graph: MixedGraph, cards: BTreeMap<String, usize>, cpts: BTreeMap<String, Table>) -> Result<Self, OracleError> {
        if graph.bidirected_edges().next().is_some() {
            return Err(OracleError::NotADag);
        }
        for v in graph.vertex_set() {
            if !cards.contains_key(&v) {
                return Err(OracleError::MissingCard(v));
            }
            let cpt = cpts.get(&v).ok_or_else(|| OracleError::BadCpt(v.clone(), "missing".into()))?;
            let mut expect: VSet = graph.parents_of(&v);
            expect.insert(v.clone());
            let got: VSet = cpt.vars().iter().cloned().collect();
            if got != expect {
                return Err(OracleError::BadCpt(v.clone(), format!("scope {:?}", cpt.vars())));
            }
            for (x, c) in cpt.scope() {
                if cards.get(&x) != Some(&c) {
                    return Err(OracleError::BadCpt(v.clone(), format!("cardinality of `{x}`")));
                }
            }
            let pa: Vec<String> = graph.parents_of(&v).into_iter().collect();
            let col = cpt.marginal(&pa)?;
            if col.data().iter().any(|s| (s - 1.0).abs() > 1e-12) || cpt.data().iter().any(|p| *p < 0.0) {
                return Err(OracleError::BadCpt(v.clone(), "columns must be distributions".into()));
            }
        }
        Ok(DiscreteScm { graph, cards, cpts })
    }

    pub fn graph(&self) -> &MixedGraph {
        &self.graph
    }

    pub fn cards(&self) -> &BTreeMap<String, usize> {
        &self.cards
    }

    pub fn cpt(&self, v: &str) -> &Table {
        &self.cpts[v]
    }

    /// Replaces one CPT; the scope must be unchanged.
    pub fn with_cpt(&self, v: &str, t: Table) -> Result<Self, OracleError> {
        let mut cpts = self.cpts.clone();
        cpts.insert(v.to_string(), t);
        DiscreteScm::new(self.graph.clone(), self.cards.clone(), cpts)
    }

    pub fn observed(&self) -> VSet {
        self.graph.of_kind(VertexKind::Observed)
    }

    /// Truncated factorization: joint over every non-intervened vertex
    /// (hidden ones included) with do-values plugged into child CPTs.
    pub fn interventional(&self, action: &Assignment) -> Result<Table, OracleError> {
        let mut acc = Table::scalar(1.0);
        for (v, cpt) in &self.cpts {
            if action.contains_key(v) {
                continue;
            }
            let mut t = cpt.clone();
            for (a, x) in action {
                t = t.restrict(a, *x);
            }
            acc = acc.product(&t)?;
        }
        Ok(acc)
    }

    pub fn joint(&self) -> Result<Table, OracleError> {
        self.interventional(&Assignment::new())
    }

    /// Observational joint over the given vertices.
    pub fn marginal(&self, vars: &VSet) -> Result<Table, OracleError> {
        let j = self.joint()?;
        Ok(j.marginal(&vars.iter().cloned().collect::<Vec<_>>())?)
    }

    /// Table over `outcomes ∪ treatments` holding p(outcomes | do(treatments)).
    pub fn effect_table(&self, outcomes: &VSet, treatments: &VSet) -> Result<Table, OracleError> {
        let tv: Vec<String> = treatments.iter().cloned().collect();
        let ov: Vec<String> = outcomes.iter().cloned().collect();
        let scope: Vec<(String, usize)> = ov.iter().chain(tv.iter()).map(|v| (v.clone(), self.cards[v])).collect();
        let mut cache: BTreeMap<Vec<usize>, Table> = BTreeMap::new();
        let mut err = None;
        let out = Table::from_fn(&scope, |a| {
            let key: Vec<usize> = tv.iter().map(|t| a[t]).collect();
            if !cache.contains_key(&key) {
                let action: Assignment = tv.iter().cloned().zip(key.iter().copied()).collect();
                match self.interventional(&action).and_then(|t| Ok(t.marginal(&ov)?)) {
                    Ok(t) => {
                        cache.insert(key.clone(), t);
                    }
                    Err(e) => {
                        err.get_or_insert(e);
                        return 0.0;
                    }
                }
            }
            cache[&key].get(a)
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// Replaces each treatment's CPT by a deterministic policy over its
    /// inputs; `rules` maps treatment → (inputs, value per input assignment
    /// in row-major order of `inputs`).
    pub fn with_policies(&self, rules: &BTreeMap<String, (Vec<String>, Vec<usize>)>) -> Result<Self, OracleError> {
        let mut graph = MixedGraph::new();
        for (v, k) in self.graph.vertices() {
            graph.add_vertex(v, k)?;
        }
        for (a, b) in self.graph.directed_edges() {
            if !rules.contains_key(b) {
                graph.add_directed(a, b)?;
            }
        }
        let mut cpts = self.cpts.clone();
        for (t, (inputs, values)) in rules {
            for i in inputs {
                graph.add_directed(i, t)?;
            }
            let mut scope: Vec<(String, usize)> = inputs.iter().map(|i| (i.clone(), self.cards[i])).collect();
            scope.push((t.clone(), self.cards[t]));
            let in_cards: Vec<usize> = inputs.iter().map(|i| self.cards[i]).collect();
            let table = Table::from_fn(&scope, |a| {
                let mut idx = 0;
                for (i, c) in inputs.iter().zip(&in_cards) {
                    idx = idx * c + a[i];
                }
                if values[idx] == a[t] {
                    1.0
                } else {
                    0.0
                }
            });
            cpts.insert(t.clone(), table);
        }
        DiscreteScm::new(graph, self.cards.clone(), cpts)
    }

    /// Forward samples, one assignment per row.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<Assignment> {
        let order = topological_order(&self.graph);
        (0..n)
            .map(|_| {
                let mut a = Assignment::new();
                for v in &order {
                    let k = self.cards[v];
                    let u: f64 = rng.gen();
                    let mut acc = 0.0;
                    let mut pick = k - 1;
                    for x in 0..k {
                        a.insert(v.clone(), x);
                        acc += self.cpts[v].get(&a);
                        if u < acc {
                            pick = x;
                            break;
                        }
                    }
                    a.insert(v.clone(), pick);
                }
                a
            })
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let cpts: BTreeMap<String, ScmCpt> = self
            .cpts
            .iter()
            .map(|(v, t)| {
                let parents: Vec<String> = self.graph.parents_of(v).into_iter().collect();
                let mut order = parents.clone();
                order.push(v.clone());
                (v.clone(), ScmCpt { parents, probs: t.data_in_order(&order) })
            })
            .collect();
        serde_json::to_value(ScmJson { graph: self.graph.to_text(), cardinalities: self.cards.clone(), cpts }).expect("serializable")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, OracleError> {
        let raw: ScmJson = serde_json::from_value(v.clone())?;
        let graph = parse_graph(&raw.graph)?;
        let mut cpts = BTreeMap::new();
        for (v, c) in raw.cpts {
            let mut order = c.parents.clone();
            order.push(v.clone());
            let mut cards = Vec::new();
            for x in &order {
                cards.push(*raw.cardinalities.get(x).ok_or_else(|| OracleError::MissingCard(x.clone()))?);
            }
            if cards.iter().product::<usize>() != c.probs.len() {
                return Err(OracleError::BadCpt(v, "length does not match cardinalities".into()));
            }
            cpts.insert(v, Table::from_ordered(&order, &cards, &c.probs));
        }
        DiscreteScm::new(graph, raw.cardinalities, cpts)
    }
}

#[derive(Serialize, Deserialize)]
struct ScmCpt {
    parents: Vec<String>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScmJson {
    graph: String,
    cardinalities: BTreeMap<String, usize>,
    cpts: BTreeMap<String, ScmCpt>,
}

pub fn topological_order(g: &MixedGraph) -> Vec<String> {
    let mut order = Vec::new();
    let mut placed = VSet::new();
    let all = g.vertex_set();
    while placed.len() < all.len() {
        for v in &all {
            if !placed.contains(v) && g.parents_of(v).is_subset(&placed) {
                placed.insert(v.clone());
                order.push(v.clone());
            }
        }
    }
    order
}

/// Random CPTs: each column is uniform on the simplex, then mixed with the
/// uniform distribution so every entry is at least `floor`.
pub fn random_scm(graph: &MixedGraph, cards: &BTreeMap<String, usize>, seed: u64, floor: f64) -> Result<DiscreteScm, OracleError> {
    let dag = if graph.bidirected_edges().next().is_some() { expand_bidirected(graph) } else { graph.clone() };
    let mut cards = cards.clone();
    for v in dag.vertex_set() {
        cards.entry(v).or_insert(2);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cpts = BTreeMap::new();
    for v in dag.vertex_set() {
        let k = cards[&v];
        let parents: Vec<String> = dag.parents_of(&v).into_iter().collect();
        let ncols: usize = parents.iter().map(|p| cards[p]).product();
        let mut probs = Vec::with_capacity(ncols * k);
        for _ in 0..ncols {
            let e: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
            let s: f64 = e.iter().sum();
            let mix = (1.0 - k as f64 * floor).max(0.0);
            let col: Vec<f64> = e.iter().map(|x| floor + mix * x / s).collect();
            let cs: f64 = col.iter().sum();
            probs.extend(col.iter().map(|x| x / cs));
        }
        let mut order = parents.clone();
        order.push(v.clone());
        let oc: Vec<usize> = order.iter().map(|x| cards[x]).collect();
        cpts.insert(v.clone(), Table::from_ordered(&order, &oc, &probs));
    }
    DiscreteScm::new(dag, cards, cpts)
}

/// Solution of a discrete bridge equation.
#[derive(Clone, Debug)]
pub struct BridgeSolution {
    /// Table over the unknowns and the stratum variables.
    pub table: Table,
    /// Max-abs residual over all strata.
    pub residual: f64,
    /// Full column rank held in every stratum.
    pub full_rank: bool,
    /// Smallest ratio of least to greatest singular value over strata. Its
    /// inverse bounds how much rounding in the kernels can move the solution.
    pub min_singular_ratio: f64,
}

/// Full column rank with relative singular-value tolerance.
pub fn full_column_rank(m: &DMatrix<f64>) -> bool {
    if m.ncols() > m.nrows() || m.ncols() == 0 {
        return false;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    max > 0.0 && min > RANK_TOL * max
}

/// Categorical completeness check for a stratum matrix with rows indexed
/// by the instrument (or conditioning) values and columns by the target.
pub fn rank_completeness_check(m: &DMatrix<f64>) -> bool {
    full_column_rank(m)
}

/// Minimum-norm least-squares solve of `lhs(z, s) = Σ_m b(m, s) rhs(m, z, s)`
/// per stratum `s`. `unknowns` index the columns and `instruments` the rows.
pub fn solve_bridge_discrete(lhs: &Table, rhs: &Table, unknowns: &[String], instruments: &[String]) -> Result<BridgeSolution, OracleError> {
    let mut all: BTreeMap<String, usize> = lhs.scope().into_iter().collect();
    all.extend(rhs.scope());
    for v in unknowns {
        if !all.contains_key(v) {
            return Err(OracleError::MissingCard(v.clone()));
        }
    }
    let strat: Vec<(String, usize)> = all.iter().filter(|(v, _)| !unknowns.contains(v) && !instruments.contains(v)).map(|(v, c)| (v.clone(), *c)).collect();
    let zs: Vec<(String, usize)> = instruments.iter().filter_map(|z| all.get(z).map(|c| (z.clone(), *c))).collect();
    let ms: Vec<(String, usize)> = unknowns.iter().map(|m| (m.clone(), all[m])).collect();
    let zrows = Table::from_fn(&zs, |_| 0.0);
    let mcols = Table::from_fn(&ms, |_| 0.0);
    let z_assign = assignments(&zrows);
    let m_assign = assignments(&mcols);

    let mut bridge: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut residual: f64 = 0.0;
    let mut full_rank = true;
    let mut min_singular_ratio = f64::INFINITY;
    let strata = assignments(&Table::from_fn(&strat, |_| 0.0));
    for s in &strata {
        let mut k = DMatrix::zeros(z_assign.len(), m_assign.len());
        let mut l = DMatrix::zeros(z_assign.len(), 1);
        for (i, za) in z_assign.iter().enumerate() {
            let mut a = s.clone();
            a.extend(za.clone());
            l[(i, 0)] = lhs.get(&a);
            for (j, ma) in m_assign.iter().enumerate() {
                let mut b = a.clone();
                b.extend(ma.clone());
                k[(i, j)] = rhs.get(&b);
            }
        }
        if k.iter().all(|x| *x == 0.0) {
            return Err(OracleError::EmptyStratum(fmt_assignment(s)));
        }
        full_rank &= full_column_rank(&k);
        let svd = k.clone().svd(true, true);
        let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let smin = if k.ncols() > k.nrows() { 0.0 } else { svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min) };
        min_singular_ratio = min_singular_ratio.min(smin / smax);
        let b = svd.solve(&l, RANK_TOL * smax).expect("svd computed with u and v");
        let r = (&k * &b - &l).abs().max();
        residual = residual.max(r);
        for (j, ma) in m_assign.iter().enumerate() {
            let mut key = s.clone();
            key.extend(ma.clone());
            bridge.insert(key.values().copied().collect(), b[(j, 0)]);
        }
    }
    let mut scope = strat.clone();
    scope.extend(ms.iter().cloned());
    let table = Table::from_fn(&scope, |a| bridge[&a.values().copied().collect::<Vec<_>>()]);
    Ok(BridgeSolution { table, residual, full_rank, min_singular_ratio })
}

/// All assignments of a table's variables in row-major order.
pub fn assignments(t: &Table) -> Vec<Assignment> {
    let mut out = Vec::with_capacity(t.len());
    Table::from_fn(&t.scope(), |a| {
        out.push(a.clone());
        0.0
    });
    out
}

/// Cardinalities of all vertices, defaulting to 2.
pub fn cards_with_default(g: &MixedGraph, given: &[(&str, usize)]) -> BTreeMap<String, usize> {
    let mut m: BTreeMap<String, usize> = g.vertex_set().into_iter().map(|v| (v, 2)).collect();
    for (v, c) in given {
        m.insert(v.to_string(), *c);
    }
    m
}

pub fn vars_of(s: &VSet) -> Vec<String> {
    s.iter().cloned().collect()
}
