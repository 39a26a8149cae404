//! Oracle verification of estimands: draw a random discrete SCM for the
//! graph, evaluate the estimand on its observed joint and compare with the
//! interventional truth.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::estimand::{evaluate, Env, Estimand, EvalError};
use crate::graph::MixedGraph;
use crate::id::CausalQuery;
use crate::oracle::{random_scm, DiscreteScm, OracleError};
use crate::table::{Table, TableError};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("sever expects `Parent->Child`, got `{0}`")]
    BadEdge(String),
    #[error("sever: no edge {0} -> {1}")]
    MissingEdge(String, String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Table(#[from] TableError),
}

/// Options shared by every trial of a verification run.
#[derive(Clone, Debug)]
pub struct TrialOptions {
    /// CPT floor passed to `random_scm`.
    pub floor: f64,
    /// Edges `Parent->Child` whose dependence is removed after sampling.
    pub sever: Vec<String>,
}

impl Default for TrialOptions {
    fn default() -> Self {
        TrialOptions { floor: 0.05, sever: Vec::new() }
    }
}

#[derive(Clone, Debug)]
pub struct Trial {
    /// Max-abs error against the oracle; 0 when skipped.
    pub error: f64,
    /// Set when some bridge system failed its rank check.
    pub skipped: bool,
    pub scm: DiscreteScm,
}

/// Replaces the child's CPT by its slice at `parent = 0`, copied across
/// every value of the parent. The child then ignores the parent while the
/// graph still carries the edge.
pub fn sever(scm: &DiscreteScm, edge: &str) -> Result<DiscreteScm, VerifyError> {
    let (p, c) = edge.split_once("->").ok_or_else(|| VerifyError::BadEdge(edge.into()))?;
    let (p, c) = (p.trim(), c.trim());
    if !scm.graph().has_directed(p, c) {
        return Err(VerifyError::MissingEdge(p.into(), c.into()));
    }
    let cpt = scm.cpt(c);
    let slice = cpt.restrict(p, 0);
    let t = Table::from_fn(&cpt.scope(), |asg| slice.get(asg));
    Ok(scm.with_cpt(c, t)?)
}

/// Cardinality 2 for every vertex unless the query says otherwise.
pub fn trial_cards(g: &MixedGraph, q: &CausalQuery) -> BTreeMap<String, usize> {
    let mut cards: BTreeMap<String, usize> = g.vertex_set().into_iter().map(|v| (v, 2)).collect();
    if let Some(c) = &q.cardinalities {
        cards.extend(c.clone());
    }
    cards
}

/// One verification trial. Policy queries get random deterministic rules
/// drawn from the same seed.
pub fn run_trial(e: &Estimand, g: &MixedGraph, q: &CausalQuery, opts: &TrialOptions, seed: u64) -> Result<Trial, VerifyError> {
    let mut scm = random_scm(g, &trial_cards(g, q), seed, opts.floor)?;
    for edge in &opts.sever {
        scm = sever(&scm, edge)?;
    }
    let mut env = Env::new(scm.marginal(&scm.observed())?, scm.cards().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rules = BTreeMap::new();
    for p in &q.policies {
        let rows: usize = p.inputs.iter().map(|i| scm.cards()[i]).product();
        let k = scm.cards()[&p.treatment];
        let values: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..k)).collect();
        env.policies.insert(p.function_id(), (p.inputs.clone(), values.clone()));
        rules.insert(p.treatment.clone(), (p.inputs.clone(), values));
    }
    let ev = match evaluate(e, &env) {
        Ok(ev) => ev,
        // Inconsistent bridge systems come from rank-deficient kernels.
        Err(EvalError::BridgeInconsistent { .. }) => return Ok(Trial { error: 0.0, skipped: true, scm }),
        Err(err) => return Err(err.into()),
    };
    if ev.rank_deficient() {
        return Ok(Trial { error: 0.0, skipped: true, scm });
    }
    let truth = if rules.is_empty() {
        scm.effect_table(&q.y(), &q.a())?
    } else {
        scm.with_policies(&rules)?.marginal(&q.y())?
    };
    let error = ev.table.max_abs_diff(&truth)?;
    Ok(Trial { error, skipped: false, scm })
}
