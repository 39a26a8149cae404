//! The classical ID algorithm on latent projections, and reduction of
//! policy queries to joint interventional queries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimand::{free_vars, simplify, Estimand, Expr, KernelRef, MarginTag, PlugValue};
use crate::graph::{fmt_set, vset, GraphError, MixedGraph, VSet, VertexKind};

#[derive(Debug, Error)]
pub enum IdError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid fixing sequence: `{0}` is not fixable at its position")]
    InvalidSequence(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub treatment: String,
    pub inputs: Vec<String>,
    #[serde(default)]
    pub function: Option<String>,
}

impl PolicySpec {
    pub fn function_id(&self) -> String {
        self.function.clone().unwrap_or_else(|| format!("f_{}", self.treatment.to_lowercase()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalQuery {
    pub outcomes: Vec<String>,
    /// treatment -> value label
    #[serde(default)]
    pub treatments: BTreeMap<String, String>,
    #[serde(default)]
    pub proxies: Vec<String>,
    #[serde(default)]
    pub policies: Vec<PolicySpec>,
    /// Optional cardinalities; the proximal search uses them to prune
    /// candidate steps whose proxies are too coarse for the confounders.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cardinalities: Option<BTreeMap<String, usize>>,
}

impl CausalQuery {
    pub fn new(outcomes: &[&str], treatments: &[&str]) -> Self {
        CausalQuery {
            outcomes: outcomes.iter().map(|s| s.to_string()).collect(),
            treatments: treatments.iter().map(|t| (t.to_string(), t.to_lowercase())).collect(),
            ..Default::default()
        }
    }

    pub fn with_proxies(mut self, proxies: &[&str]) -> Self {
        self.proxies = proxies.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn y(&self) -> VSet {
        vset(&self.outcomes)
    }

    pub fn a(&self) -> VSet {
        self.treatments.keys().cloned().collect()
    }

    pub fn m(&self) -> VSet {
        vset(&self.proxies)
    }

    pub fn from_json(text: &str) -> Result<Self, IdError> {
        serde_json::from_str(text).map_err(|e| IdError::InvalidQuery(e.to_string()))
    }

    /// Checks disjointness and that every query vertex is observed.
    pub fn validate(&self, g: &MixedGraph) -> Result<(), IdError> {
        let (y, a, m) = (self.y(), self.a(), self.m());
        if y.is_empty() {
            return Err(IdError::InvalidQuery("no outcomes".into()));
        }
        for v in y.iter().chain(&a).chain(&m) {
            match g.kind(v) {
                None => return Err(IdError::Graph(GraphError::UnknownVertex(v.clone()))),
                Some(VertexKind::Observed) => {}
                Some(_) => return Err(IdError::InvalidQuery(format!("`{v}` is not an observed vertex"))),
            }
        }
        if !y.is_disjoint(&a) || !y.is_disjoint(&m) || !a.is_disjoint(&m) {
            return Err(IdError::InvalidQuery("outcomes, treatments and proxies must be disjoint".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum IdVerdict {
    Identified(Estimand),
    NotIdentified { district: VSet, stuck: VSet },
}

impl IdVerdict {
    pub fn estimand(&self) -> Option<&Estimand> {
        match self {
            IdVerdict::Identified(e) => Some(e),
            _ => None,
        }
    }
}

/// Vertices with a directed path into `y` that avoids `a` (reflexive).
pub fn ancestral_set(g: &MixedGraph, y: &VSet, a: &VSet) -> VSet {
    let keep: VSet = g.vertex_set().difference(a).cloned().collect();
    let sub = g.induced(&keep);
    let y: VSet = y.difference(a).cloned().collect();
    sub.ancestors(&y).unwrap_or_default()
}

/// Next vertex to fix: a childless vertex of `j` if one exists, otherwise
/// the least-named fixable one.
pub(crate) fn next_to_fix(g: &MixedGraph, j: &VSet) -> Option<(String, bool)> {
    let random = g.random();
    for v in j {
        if g.children_of(v).is_disjoint(&random) {
            return Some((v.clone(), true));
        }
    }
    j.iter().find(|v| g.fixable(v).unwrap_or(false)).map(|v| (v.clone(), false))
}

/// One fixing step on a kernel: marginalization when `v` has no random
/// children, otherwise division by `q(v | mb*(v))`.
pub(crate) fn fixing_step(g: &MixedGraph, v: &str, kernel: &KernelRef) -> Expr {
    let random = g.random();
    let full = Expr::density(&kernel.scope_set(), &VSet::new(), kernel);
    if g.children_of(v).is_disjoint(&random) {
        Expr::sum(&vset([v]), full)
    } else {
        let mb = g.mb_star(v);
        Expr::quotient(full, Expr::density(&vset([v]), &mb, kernel))
    }
}

/// Kernel for `d` obtained by fixing `seq` in order, starting from the
/// observed joint over the random vertices of `g`. Returns the estimand
/// holding the kernel definitions and the final kernel reference.
pub fn derive_district(g: &MixedGraph, d: &VSet, seq: &[String]) -> Result<(Estimand, KernelRef), IdError> {
    let mut est = Estimand::new(Expr::Product { children: vec![] });
    let mut graph = g.clone();
    let mut kernel = KernelRef::observed(&g.random());
    for v in seq {
        if !graph.fixable(v)? {
            return Err(IdError::InvalidSequence(v.clone()));
        }
        let def = fixing_step(&graph, v, &kernel);
        graph = graph.intervene(v);
        let next = KernelRef::new(MarginTag::Interventional, &graph.random(), &graph.fixed());
        est.define(next.clone(), def);
        kernel = next;
    }
    if graph.random() != *d {
        return Err(IdError::InvalidSequence(format!("sequence leaves {}", fmt_set(&graph.random()))));
    }
    est.root = Expr::density(d, &VSet::new(), &kernel);
    Ok((est, kernel))
}

/// Fixing order used for derivations: marginalize childless vertices
/// first, then the least-named fixable vertex.
pub fn derivation_order(g: &MixedGraph, j: &VSet) -> Option<Vec<String>> {
    let mut graph = g.clone();
    let mut rest = j.clone();
    let mut seq = Vec::new();
    while !rest.is_empty() {
        let (v, _) = next_to_fix(&graph, &rest)?;
        graph = graph.intervene(&v);
        rest.remove(&v);
        seq.push(v);
    }
    Some(seq)
}

/// Wraps per-district kernels into `Σ_{Y*\Y} Π_D p(D | do(s_D))`, pinning
/// fixed variables outside `Y* ∪ A` to value 0 (the derived kernel does not
/// depend on them, only their syntax does).
pub(crate) fn assemble(mut est: Estimand, district_kernels: &[(VSet, KernelRef)], ystar: &VSet, y: &VSet, a: &VSet) -> Estimand {
    let kernels = est.kernel_map();
    let mut factors = Vec::new();
    for (d, k) in district_kernels {
        let mut f = Expr::density(d, &VSet::new(), k);
        let free = free_vars(&f, &kernels);
        for v in free.iter().rev() {
            if !ystar.contains(v) && !a.contains(v) {
                f = Expr::plug(v, 0, f);
            }
        }
        factors.push(f);
    }
    let over: VSet = ystar.difference(y).cloned().collect();
    est.root = Expr::sum(&over, Expr::product(factors));
    est
}

/// Classical identification of `p(Y(a))` on the latent projection of `g`.
pub fn identify(g: &MixedGraph, q: &CausalQuery) -> Result<IdVerdict, IdError> {
    q.validate(g)?;
    if !q.proxies.is_empty() {
        return Err(IdError::InvalidQuery("classical identification takes no proxies".into()));
    }
    if !q.policies.is_empty() {
        return identify_policy(g, q);
    }
    let hidden: VSet = g.vertices().filter(|(_, k)| k.is_hidden()).map(|(v, _)| v.clone()).collect();
    let proj = g.latent_project(&hidden)?;
    let (y, a) = (q.y(), q.a());
    let ystar = ancestral_set(&proj, &y, &a);
    let districts = proj.induced(&ystar).districts(&ystar);
    let mut est = Estimand::new(Expr::Product { children: vec![] });
    let mut dk = Vec::new();
    for d in districts {
        let j: VSet = proj.random().difference(&d).cloned().collect();
        if let Err(stuck) = proj.find_valid_sequence(&j) {
            return Ok(IdVerdict::NotIdentified { district: d, stuck });
        }
        let seq = derivation_order(&proj, &j).expect("a valid sequence exists");
        let (part, k) = derive_district(&proj, &d, &seq)?;
        for kd in part.kernels {
            est.define(kd.key, kd.expr);
        }
        dk.push((d, k));
    }
    let est = assemble(est, &dk, &ystar, &y, &a);
    Ok(IdVerdict::Identified(simplify(&est)))
}

/// Joint interventional query behind a policy query, with the recipe that
/// turns its estimand back into the policy response.
#[derive(Clone, Debug)]
pub struct PolicyReduction {
    pub joint: CausalQuery,
    /// Summed-out policy inputs.
    pub over: VSet,
    /// Plugs `treatment := f(inputs)`, innermost first.
    pub plugs: Vec<(String, PlugValue)>,
}

impl PolicyReduction {
    pub fn wrap(&self, root: Expr) -> Expr {
        let mut e = root;
        for (var, value) in &self.plugs {
            e = Expr::Plug { var: var.clone(), value: value.clone(), child: Box::new(e) };
        }
        Expr::sum(&self.over, e)
    }
}

pub fn reduce_policy_query(g: &MixedGraph, q: &CausalQuery) -> Result<PolicyReduction, IdError> {
    let a = q.a();
    let mut outcomes = q.y();
    let mut over = VSet::new();
    let mut specs: Vec<&PolicySpec> = q.policies.iter().collect();
    for p in &specs {
        if !a.contains(&p.treatment) {
            return Err(IdError::InvalidQuery(format!("policy for `{}`, which is not a treatment", p.treatment)));
        }
        let de = g.descendants_of(&p.treatment);
        for i in &p.inputs {
            if !g.contains(i) {
                return Err(IdError::Graph(GraphError::UnknownVertex(i.clone())));
            }
            if de.contains(i) {
                return Err(IdError::InvalidQuery(format!("policy input `{i}` is a descendant of `{}`", p.treatment)));
            }
            if !a.contains(i) {
                outcomes.insert(i.clone());
                if !q.y().contains(i) {
                    over.insert(i.clone());
                }
            }
        }
    }
    // later treatments are plugged first so their inputs may include
    // earlier treatments
    specs.sort_by_key(|p| std::cmp::Reverse(g.ancestors_of(&p.treatment).len()));
    let plugs = specs
        .iter()
        .map(|p| (p.treatment.clone(), PlugValue::Policy { name: p.function_id(), inputs: p.inputs.clone() }))
        .collect();
    let mut joint = q.clone();
    joint.outcomes = outcomes.into_iter().collect();
    joint.policies.clear();
    Ok(PolicyReduction { joint, over, plugs })
}

fn identify_policy(g: &MixedGraph, q: &CausalQuery) -> Result<IdVerdict, IdError> {
    let red = reduce_policy_query(g, q)?;
    Ok(match identify(g, &red.joint)? {
        IdVerdict::Identified(mut e) => {
            e.root = red.wrap(e.root);
            IdVerdict::Identified(e)
        }
        other => other,
    })
}
