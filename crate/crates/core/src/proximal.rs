//! Identification combining ordinary fixing with proximal fixing steps that
//! solve a bridge equation over post-treatment proxies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::estimand::{bridge_equation, free_vars, simplify, Assumption, Estimand, Expr, KernelRef, MarginTag};
use crate::graph::{fmt_set, vset, MixedGraph, VSet, VertexKind};
use crate::id::{ancestral_set, assemble, fixing_step, reduce_policy_query, CausalQuery, IdError, IdVerdict};

#[derive(Clone, Debug)]
pub struct SearchConfig {
    pub max_proxy_set: usize,
    pub max_control_set: usize,
    /// When given, a step is only admitted if its proxies and controls have
    /// at least as many joint categories as the hidden set they stand in
    /// for. Missing variables count as binary.
    pub cards: Option<BTreeMap<String, usize>>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { max_proxy_set: 3, max_control_set: 3, cards: None }
    }
}

impl SearchConfig {
    fn states(&self, s: &VSet) -> Option<usize> {
        self.cards.as_ref().map(|c| s.iter().map(|v| c.get(v).copied().unwrap_or(2)).product())
    }
}

/// What the algorithm can currently read: the inductive margin over
/// `v ∪ m2` and, while proxies remain reusable, the reusing margin over
/// `v1 ∪ m1`, both under the same intervention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Margins {
    pub inductive: KernelRef,
    pub reusing: Option<KernelRef>,
    pub v: VSet,
    pub v1: VSet,
    pub m1: VSet,
    pub m2: VSet,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepKind {
    Ordinary,
    /// Sums a proxy out of the inductive margin without fixing anything;
    /// it stays available in the reusing margin.
    DropProxy,
    Proximal {
        bridge: String,
        proxies: VSet,
        /// Controls taken from the non-descendants of the target.
        controls: VSet,
        /// Controls that descend from the target; each is dropped from the
        /// margin once used.
        descendant_controls: VSet,
        hidden: VSet,
        from_reusing: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProximalStep {
    pub target: String,
    pub kind: StepKind,
    pub r: VSet,
    pub t: VSet,
}

#[derive(Clone, Debug)]
pub struct AdmissibleSequence {
    pub district: VSet,
    pub steps: Vec<ProximalStep>,
    /// Margins before each step, then the final margins.
    pub margins: Vec<Margins>,
}

impl AdmissibleSequence {
    /// One line per step: kind, target, proxies and controls, margin scopes.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "district {}", fmt_set(&self.district));
        for (step, after) in self.steps.iter().zip(self.margins.iter().skip(1)) {
            let head = match &step.kind {
                StepKind::Ordinary => format!("ordinary {}", step.target),
                StepKind::DropProxy => format!("drop proxy {}", step.target),
                StepKind::Proximal { bridge, proxies, controls, descendant_controls, hidden, from_reusing } => {
                    let mut z = controls.clone();
                    z.extend(descendant_controls.iter().cloned());
                    format!(
                        "proximal {} M*={} Z={} U*={} bridge={}{}",
                        step.target,
                        fmt_set(proxies),
                        fmt_set(&z),
                        fmt_set(hidden),
                        bridge,
                        if *from_reusing { " (reusing)" } else { "" }
                    )
                }
            };
            let reuse = match &after.reusing {
                Some(k) => format!("{}|do{}", fmt_set(&k.scope_set()), fmt_set(&k.fixed_set())),
                None => "-".into(),
            };
            let _ = writeln!(
                s,
                "  {head}; inductive {}|do{}; reusing {reuse}",
                fmt_set(&after.inductive.scope_set()),
                fmt_set(&after.inductive.fixed_set())
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CheckFailure {
    Malformed(String),
    /// The proxies are not drawn from a margin that contains the target and
    /// its conditioning set.
    MCondition,
    ProxyDescendsFromTarget,
    NotFixableGivenHidden,
    OutcomeProxyDependence,
    TreatmentProxyDependence,
    Ignorability,
    TooFewCategories,
}

/// Current CADMG over `V ∪ M ∪ U` plus margins and the vertices left to fix.
#[derive(Clone, Debug)]
struct State {
    h: MixedGraph,
    margins: Margins,
    todo: VSet,
    est: Estimand,
}

type StateKey = (VSet, VSet, VSet, VSet, VSet, bool);

impl State {
    fn key(&self) -> StateKey {
        let m = &self.margins;
        (self.h.fixed(), m.v.clone(), m.m2.clone(), m.v1.clone(), m.m1.clone(), m.reusing.is_some())
    }

    fn project_onto(&self, keep: &VSet) -> MixedGraph {
        let hide: VSet = self.h.random().difference(keep).cloned().collect();
        self.h.latent_project(&hide).expect("random vertices project")
    }

    /// `G(V ∪ M₂, W)`.
    fn inductive_graph(&self) -> MixedGraph {
        self.project_onto(&self.margins.v.union(&self.margins.m2).cloned().collect())
    }

    /// `G(V₁ ∪ M₁, W)`.
    fn reusing_graph(&self) -> MixedGraph {
        self.project_onto(&self.margins.v1.union(&self.margins.m1).cloned().collect())
    }

    fn bridge_ids(&self) -> BTreeSet<String> {
        let mut ids = BTreeSet::new();
        for k in &self.est.kernels {
            k.expr.walk(&mut |e| {
                if let Expr::BridgeSolve { id, .. } = e {
                    ids.insert(id.clone());
                }
            });
        }
        ids
    }

    fn fresh_bridge_id(&self, target: &str) -> String {
        let ids = self.bridge_ids();
        let base = format!("b_{}", target.to_lowercase());
        if !ids.contains(&base) {
            return base;
        }
        (2..).map(|i| format!("b{i}_{}", target.to_lowercase())).find(|c| !ids.contains(c)).unwrap()
    }

    /// Reusing-margin update after `a` is fixed by either kind of step:
    /// fix it there too when possible, otherwise keep only the
    /// non-descendants of `a`. Vertices in `also_drop` are summed out.
    fn update_reusing(&self, a: &str, also_drop: &VSet, fixed_after: &VSet, next: &mut Margins, est: &mut Estimand) {
        let Some(k) = &self.margins.reusing else { return };
        let m = &self.margins;
        let (mut v1, mut m1, def) = if m.v1.contains(a) && self.reusing_graph().fixable(a).unwrap_or(false) {
            let mut v1 = m.v1.clone();
            v1.remove(a);
            (v1, m.m1.clone(), fixing_step(&self.reusing_graph(), a, k))
        } else {
            let de = self.h.descendants_of(a);
            let v1: VSet = m.v1.difference(&de).cloned().collect();
            let m1: VSet = m.m1.difference(&de).cloned().collect();
            let scope: VSet = v1.union(&m1).cloned().collect();
            (v1, m1, Expr::density(&scope, &VSet::new(), k))
        };
        let dropped: VSet = also_drop.iter().filter(|z| v1.contains(*z) || m1.contains(*z)).cloned().collect();
        v1.retain(|x| !also_drop.contains(x));
        m1.retain(|x| !also_drop.contains(x));
        if v1.is_empty() || m1.is_empty() {
            next.reusing = None;
            next.v1 = VSet::new();
            next.m1 = VSet::new();
            return;
        }
        let scope: VSet = v1.union(&m1).cloned().collect();
        let key = KernelRef::new(MarginTag::ReusingMargin, &scope, fixed_after);
        est.define(key.clone(), Expr::sum(&dropped, def));
        next.reusing = Some(key);
        next.v1 = v1;
        next.m1 = m1;
    }

    fn ordinary(&self, a: &str, tag: MarginTag) -> State {
        let g = self.inductive_graph();
        let mut est = self.est.clone();
        let h = self.h.intervene(a);
        let fixed = h.fixed();
        let mut next = self.margins.clone();
        next.v.remove(a);
        let scope: VSet = next.v.union(&next.m2).cloned().collect();
        let key = KernelRef::new(tag, &scope, &fixed);
        est.define(key.clone(), fixing_step(&g, a, &self.margins.inductive));
        next.inductive = key;
        self.update_reusing(a, &VSet::new(), &fixed, &mut next, &mut est);
        let mut todo = self.todo.clone();
        todo.remove(a);
        State { h, margins: next, todo, est }
    }

    fn drop_proxy(&self, p: &str, tag: MarginTag) -> State {
        let mut est = self.est.clone();
        let mut next = self.margins.clone();
        next.m2.remove(p);
        let scope: VSet = next.v.union(&next.m2).cloned().collect();
        let key = KernelRef::new(tag, &scope, &self.h.fixed());
        est.define(key.clone(), Expr::density(&scope, &VSet::new(), &self.margins.inductive));
        next.inductive = key;
        State { h: self.h.clone(), margins: next, todo: self.todo.clone(), est }
    }

    fn proximal(&self, a: &str, c: &Candidate, tag: MarginTag) -> (State, ProximalStep) {
        let m = &self.margins;
        let mut est = self.est.clone();
        let src = if c.from_reusing { m.reusing.clone().expect("reusing margin present") } else { m.inductive.clone() };
        let zd = &c.descendant_controls;
        let r: VSet = c.r.difference(zd).cloned().collect();
        let mut cond: VSet = c.t.union(zd).cloned().collect();
        cond.insert(a.to_string());
        let instruments: VSet = c.controls.union(zd).cloned().collect();
        let lhs = Expr::density(&r, &cond, &m.inductive);
        let rhs = Expr::density(&c.proxies, &cond, &src);

        let kernels = est.kernel_map();
        let mut deps = free_vars(&lhs, &kernels);
        deps.extend(free_vars(&rhs, &kernels));
        let t_rest: VSet = c.t.difference(&c.controls).cloned().collect();
        let mut signature: Vec<String> = r.iter().chain(&c.proxies).cloned().collect();
        signature.push(a.to_string());
        signature.extend(t_rest.iter().cloned());
        for d in deps {
            if !signature.contains(&d) && !instruments.contains(&d) && !c.proxies.contains(&d) {
                signature.push(d);
            }
        }
        let id = self.fresh_bridge_id(a);
        let body_scope: VSet = c.proxies.union(&c.t).cloned().collect();
        let body = Expr::sum(
            &c.proxies,
            Expr::product(vec![Expr::BridgeApply { id: id.clone(), args: signature.clone() }, Expr::density(&body_scope, &VSet::new(), &src)]),
        );
        let def = Expr::BridgeSolve {
            id: id.clone(),
            unknowns: c.proxies.iter().cloned().collect(),
            signature: signature.clone(),
            lhs: Box::new(lhs.clone()),
            rhs: Box::new(rhs.clone()),
            instruments: instruments.iter().cloned().collect(),
            body: Box::new(body),
        };

        let mut h = self.h.intervene(a);
        for z in zd {
            h = h.intervene(z);
        }
        let fixed = h.fixed();
        let mut next = m.clone();
        next.v.remove(a);
        next.v.retain(|x| !zd.contains(x));
        next.m2.retain(|x| !c.proxies.contains(x) && !zd.contains(x));
        let scope: VSet = next.v.union(&next.m2).cloned().collect();
        let key = KernelRef::new(tag, &scope, &fixed);
        if !est.kernel_map().contains_key(&key) {
            est.define(key.clone(), def);
            let equation = bridge_equation(&id, &vec_of(&c.proxies), &signature, &lhs, &rhs);
            est.ledger.push(Assumption::BridgeExistence { bridge: id.clone(), equation });
            est.ledger.push(Assumption::Completeness {
                bridge: id.clone(),
                conditioning: vec_of(&cond.difference(&instruments).cloned().collect()),
                hidden: vec_of(&c.hidden),
                instruments: vec_of(&instruments),
            });
            for s in &c.statements {
                est.ledger.push(Assumption::CounterfactualIndependence { statement: s.clone(), checked_graphically: true });
            }
        }
        next.inductive = key;
        self.update_reusing(a, zd, &fixed, &mut next, &mut est);
        let mut todo = self.todo.clone();
        todo.remove(a);
        todo.retain(|x| !zd.contains(x));
        let step = ProximalStep {
            target: a.to_string(),
            kind: StepKind::Proximal {
                bridge: id,
                proxies: c.proxies.clone(),
                controls: c.controls.clone(),
                descendant_controls: zd.clone(),
                hidden: c.hidden.clone(),
                from_reusing: c.from_reusing,
            },
            r,
            t: c.t.clone(),
        };
        (State { h, margins: next, todo, est }, step)
    }
}

fn vec_of(s: &VSet) -> Vec<String> {
    s.iter().cloned().collect()
}

/// A proximal step that passed every graphical check.
#[derive(Clone, Debug)]
struct Candidate {
    proxies: VSet,
    controls: VSet,
    descendant_controls: VSet,
    hidden: VSet,
    r: VSet,
    t: VSet,
    from_reusing: bool,
    statements: Vec<String>,
}

/// Subsets of `pool` with sizes in `lo..=hi`, by size then lexicographically.
fn subsets(pool: &VSet, lo: usize, hi: usize) -> Vec<VSet> {
    let items: Vec<&String> = pool.iter().collect();
    let mut out = Vec::new();
    for k in lo..=hi.min(items.len()) {
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            out.push(idx.iter().map(|&i| items[i].clone()).collect());
            let mut i = k;
            while i > 0 && idx[i - 1] == items.len() - k + i - 1 {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            idx[i - 1] += 1;
            for j in i..k {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    out
}

fn cf(s: &VSet, de: &VSet) -> String {
    let names: Vec<String> = s.iter().map(|v| if de.contains(v) { format!("{v}(a)") } else { v.clone() }).collect();
    names.join(",")
}

fn independence(x: &VSet, y: &VSet, z: &VSet, de: &VSet) -> String {
    if z.is_empty() {
        format!("{} ⫫ {}", cf(x, de), cf(y, de))
    } else {
        format!("{} ⫫ {} | {}", cf(x, de), cf(y, de), cf(z, de))
    }
}

/// Descendant sets and proxy-dependent pieces of a proximal step.
struct Frame {
    r: VSet,
    t: VSet,
    from_reusing: bool,
    de: VSet,
    split: MixedGraph,
}

fn frame(st: &State, a: &str, proxies: &VSet) -> Result<Frame, CheckFailure> {
    let m = &st.margins;
    if proxies.is_empty() {
        return Err(CheckFailure::Malformed("empty proxy set".into()));
    }
    let all_m: VSet = m.m1.union(&m.m2).cloned().collect();
    if !proxies.is_subset(&all_m) {
        return Err(CheckFailure::Malformed(format!("{} are not available proxies", fmt_set(proxies))));
    }
    let de = st.h.descendants_of(a);
    if !proxies.is_disjoint(&de) {
        return Err(CheckFailure::ProxyDescendsFromTarget);
    }
    let keep: VSet = m.v.iter().chain(m.m2.difference(proxies)).cloned().collect();
    let mut r = st.project_onto(&keep).descendants_of(a);
    r.remove(a);
    let mut t: VSet = m.v.union(&m.m2).cloned().collect();
    t.retain(|x| !r.contains(x) && !proxies.contains(x) && x != a);
    let mut at = t.clone();
    at.insert(a.to_string());
    let in_v1 = m.reusing.is_some() && at.is_subset(&m.v1);
    let from_reusing = if proxies.is_subset(&m.m2) {
        false
    } else if in_v1 && proxies.is_subset(&m.m1) {
        true
    } else {
        return Err(CheckFailure::MCondition);
    };
    let split = st.h.split_intervene(&vset([a])).map_err(|e| CheckFailure::Malformed(e.to_string()))?;
    Ok(Frame { r, t, from_reusing, de, split })
}

fn check_hidden(st: &State, a: &str, proxies: &VSet, hidden: &VSet, f: &Frame, cfg: &SearchConfig) -> Result<(), CheckFailure> {
    if hidden.is_empty() {
        return Err(CheckFailure::Malformed("empty hidden set".into()));
    }
    let m = &st.margins;
    let pool: VSet = st.h.random().difference(&m.v).filter(|x| !m.m2.contains(*x)).cloned().collect();
    if !hidden.is_subset(&pool) || !hidden.is_disjoint(proxies) {
        return Err(CheckFailure::Malformed(format!("{} is not a set of unobserved vertices", fmt_set(hidden))));
    }
    if !hidden.is_disjoint(&f.de) {
        return Err(CheckFailure::Malformed("hidden set descends from the target".into()));
    }
    if let (Some(p), Some(u)) = (cfg.states(proxies), cfg.states(hidden)) {
        if p < u {
            return Err(CheckFailure::TooFewCategories);
        }
    }
    let g = st.project_onto(&m.v.union(hidden).cloned().collect());
    if !g.fixable(a).unwrap_or(false) {
        return Err(CheckFailure::NotFixableGivenHidden);
    }
    Ok(())
}

/// Control-dependent conditions; returns the independence statements.
#[allow(clippy::too_many_arguments)]
fn check_controls(st: &State, a: &str, proxies: &VSet, hidden: &VSet, z: &VSet, zd: &VSet, f: &Frame, cfg: &SearchConfig) -> Result<Vec<String>, CheckFailure> {
    let controls: VSet = z.union(zd).cloned().collect();
    if controls.is_empty() {
        return Err(CheckFailure::Malformed("empty control set".into()));
    }
    if !z.is_subset(&f.t) {
        return Err(CheckFailure::Malformed(format!("{} is not among the non-descendants", fmt_set(z))));
    }
    let after = st.h.intervene(a);
    let random = after.random();
    for d in zd {
        let eligible = f.r.contains(d)
            && (st.todo.contains(d) || st.margins.m2.contains(d))
            && after.children_of(d).is_disjoint(&random)
            && !proxies.contains(d);
        if !eligible {
            return Err(CheckFailure::Malformed(format!("`{d}` cannot serve as a descendant control")));
        }
        if f.from_reusing && !st.margins.v1.contains(d) && !st.margins.m1.contains(d) {
            return Err(CheckFailure::MCondition);
        }
    }
    if let (Some(c), Some(u)) = (cfg.states(&controls), cfg.states(hidden)) {
        if c < u {
            return Err(CheckFailure::TooFewCategories);
        }
    }
    let r: VSet = f.r.difference(zd).cloned().collect();
    if r.is_empty() {
        return Err(CheckFailure::Malformed("no outcomes left for the bridge".into()));
    }
    let s = &f.split;
    let aset = vset([a]);
    let mut base: VSet = f.t.difference(z).cloned().collect();
    base.extend(hidden.iter().cloned());
    let mut stmts = Vec::new();
    if !s.m_separated(&r, &controls, &base) {
        return Err(CheckFailure::OutcomeProxyDependence);
    }
    stmts.push(independence(&r, &controls, &base, &f.de));
    let a_controls: VSet = controls.union(&aset).cloned().collect();
    if !s.m_separated(proxies, &a_controls, &base) {
        return Err(CheckFailure::TreatmentProxyDependence);
    }
    stmts.push(independence(proxies, &a_controls, &base, &f.de));
    let mut ign: VSet = f.t.union(hidden).cloned().collect();
    if !s.m_separated(&r, &aset, &ign) {
        return Err(CheckFailure::Ignorability);
    }
    stmts.push(independence(&r, &aset, &ign, &f.de));
    if !zd.is_empty() {
        ign.extend(zd.iter().cloned());
        if !s.m_separated(&r, &aset, &ign) {
            return Err(CheckFailure::Ignorability);
        }
        stmts.push(independence(&r, &aset, &ign, &f.de));
    }
    Ok(stmts)
}

/// Decides every graphical condition of a proximal step fixing `a` with
/// proxies `proxies`, controls `controls` and hidden set `hidden`, against
/// the CADMG `h` and its margins. Controls that descend from `a` are used as
/// descendant controls. Returns the sets `R` and `T` and the independence
/// statements that were decided.
pub fn check_proximal_step(
    h: &MixedGraph,
    margins: &Margins,
    todo: &VSet,
    a: &str,
    proxies: &VSet,
    controls: &VSet,
    hidden: &VSet,
    cfg: &SearchConfig,
) -> Result<(ProximalStep, Vec<String>), CheckFailure> {
    let st = State { h: h.clone(), margins: margins.clone(), todo: todo.clone(), est: Estimand::new(Expr::Product { children: vec![] }) };
    if !margins.v.contains(a) {
        return Err(CheckFailure::Malformed(format!("`{a}` is not a random observed vertex")));
    }
    if let Some(x) = controls.iter().find(|x| h.kind(x).is_none_or(|k| k.is_hidden())) {
        return Err(CheckFailure::Malformed(format!("control `{x}` is not observed")));
    }
    let f = frame(&st, a, proxies)?;
    check_hidden(&st, a, proxies, hidden, &f, cfg)?;
    let z: VSet = controls.intersection(&f.t).cloned().collect();
    let zd: VSet = controls.difference(&f.t).cloned().collect();
    let stmts = check_controls(&st, a, proxies, hidden, &z, &zd, &f, cfg)?;
    let step = ProximalStep {
        target: a.to_string(),
        kind: StepKind::Proximal {
            bridge: format!("b_{}", a.to_lowercase()),
            proxies: proxies.clone(),
            controls: z,
            descendant_controls: zd.clone(),
            hidden: hidden.clone(),
            from_reusing: f.from_reusing,
        },
        r: f.r.difference(&zd).cloned().collect(),
        t: f.t,
    };
    Ok((step, stmts))
}

struct Search<'a> {
    cfg: &'a SearchConfig,
    tag: MarginTag,
    failed: BTreeSet<StateKey>,
    stuck: Option<VSet>,
}

impl Search<'_> {
    /// Vertices to try: those with no random children first, then the rest,
    /// each group by name.
    fn order(&self, st: &State, g: &MixedGraph) -> Vec<String> {
        let random = g.random();
        let (mut first, rest): (Vec<String>, Vec<String>) = st.todo.iter().cloned().partition(|v| g.children_of(v).is_disjoint(&random));
        first.extend(rest);
        first
    }

    fn candidates<'s>(&'s self, st: &'s State, a: &'s str) -> impl Iterator<Item = Candidate> + 's {
        let m = &st.margins;
        let all_m: VSet = m.m1.union(&m.m2).cloned().collect();
        subsets(&all_m, 1, self.cfg.max_proxy_set).into_iter().flat_map(move |proxies| {
            let Ok(f) = frame(st, a, &proxies) else {
                return Vec::new().into_iter();
            };
            let pool: VSet = st.h.random().iter().filter(|x| !m.v.contains(*x) && !m.m2.contains(*x) && !proxies.contains(*x) && !f.de.contains(*x)).cloned().collect();
            let after = st.h.intervene(a);
            let random = after.random();
            let zd_pool: VSet = f
                .r
                .iter()
                .filter(|d| (st.todo.contains(*d) || m.m2.contains(*d)) && after.children_of(d).is_disjoint(&random))
                .filter(|d| !f.from_reusing || m.v1.contains(*d) || m.m1.contains(*d))
                .cloned()
                .collect();
            let control_pool: VSet = f.t.union(&zd_pool).cloned().collect();
            let control_sets = subsets(&control_pool, 1, self.cfg.max_control_set);
            let mut out = Vec::new();
            let mut seen_zd: BTreeSet<VSet> = BTreeSet::new();
            for hidden in subsets(&pool, 1, pool.len()) {
                if check_hidden(st, a, &proxies, &hidden, &f, self.cfg).is_err() {
                    continue;
                }
                for c in &control_sets {
                    let z: VSet = c.intersection(&f.t).cloned().collect();
                    let zd: VSet = c.difference(&f.t).cloned().collect();
                    if seen_zd.contains(&zd) {
                        continue;
                    }
                    if let Ok(statements) = check_controls(st, a, &proxies, &hidden, &z, &zd, &f, self.cfg) {
                        seen_zd.insert(zd.clone());
                        out.push(Candidate {
                            proxies: proxies.clone(),
                            controls: z,
                            descendant_controls: zd,
                            hidden: hidden.clone(),
                            r: f.r.clone(),
                            t: f.t.clone(),
                            from_reusing: f.from_reusing,
                            statements,
                        });
                    }
                }
            }
            out.into_iter()
        })
    }

    fn dfs(&mut self, st: State, trail: &mut Vec<(ProximalStep, Margins)>) -> Option<State> {
        if st.todo.is_empty() {
            return Some(st);
        }
        let key = st.key();
        if self.failed.contains(&key) {
            return None;
        }
        let g = st.inductive_graph();
        for a in self.order(&st, &g) {
            if g.fixable(&a).unwrap_or(false) {
                let next = st.ordinary(&a, self.tag);
                let step = ProximalStep { target: a.clone(), kind: StepKind::Ordinary, r: VSet::new(), t: VSet::new() };
                trail.push((step, st.margins.clone()));
                if let Some(done) = self.dfs(next, trail) {
                    return Some(done);
                }
                trail.pop();
                continue;
            }
            let cands: Vec<Candidate> = self.candidates(&st, &a).collect();
            for c in cands {
                let (next, step) = st.proximal(&a, &c, self.tag);
                trail.push((step, st.margins.clone()));
                if let Some(done) = self.dfs(next, trail) {
                    return Some(done);
                }
                trail.pop();
            }
        }
        for p in st.margins.m2.clone() {
            let next = st.drop_proxy(&p, self.tag);
            let step = ProximalStep { target: p.clone(), kind: StepKind::DropProxy, r: VSet::new(), t: VSet::new() };
            trail.push((step, st.margins.clone()));
            if let Some(done) = self.dfs(next, trail) {
                return Some(done);
            }
            trail.pop();
        }
        if self.stuck.as_ref().is_none_or(|s| st.todo.len() < s.len()) {
            self.stuck = Some(st.todo.clone());
        }
        self.failed.insert(key);
        None
    }
}

/// Result of proximal identification: the verdict and, when identified,
/// the admissible sequence used for each district.
#[derive(Clone, Debug)]
pub struct ProximalOutcome {
    pub verdict: IdVerdict,
    pub sequences: Vec<AdmissibleSequence>,
}

impl ProximalOutcome {
    pub fn render_trace(&self) -> String {
        self.sequences.iter().map(|s| s.render()).collect()
    }
}

/// Searches for an admissible sequence fixing every vertex of `todo`,
/// starting from the observed margins of `h`. `proxies` are the
/// post-treatment proxies; `est` receives the kernel definitions.
pub fn search_admissible_sequence(
    h: &MixedGraph,
    district: &VSet,
    todo: &VSet,
    proxies: &VSet,
    est: &Estimand,
    cfg: &SearchConfig,
) -> Result<(AdmissibleSequence, Estimand), VSet> {
    let observed = h.of_kind(VertexKind::Observed);
    let v: VSet = observed.difference(proxies).cloned().collect();
    let init = KernelRef::observed(&observed);
    let (tag, reusing) = if proxies.is_empty() { (MarginTag::Interventional, None) } else { (MarginTag::InductiveMargin, Some(init.clone())) };
    let margins = Margins {
        inductive: init,
        v1: if reusing.is_some() { v.clone() } else { VSet::new() },
        m1: proxies.clone(),
        m2: proxies.clone(),
        reusing,
        v,
    };
    let st = State { h: h.clone(), margins, todo: todo.clone(), est: est.clone() };
    let mut search = Search { cfg, tag, failed: BTreeSet::new(), stuck: None };
    let mut trail = Vec::new();
    match search.dfs(st, &mut trail) {
        Some(done) => {
            let (steps, mut margins): (Vec<_>, Vec<_>) = trail.into_iter().unzip();
            margins.push(done.margins.clone());
            Ok((AdmissibleSequence { district: district.clone(), steps, margins }, done.est))
        }
        None => Err(search.stuck.unwrap_or_else(|| todo.clone())),
    }
}

/// Identification of `p(Y(a))` given post-treatment proxies `q.proxies`,
/// with unresolvable hidden vertices projected out and resolvable ones kept.
pub fn proximal_identify(g: &MixedGraph, q: &CausalQuery, cfg: &SearchConfig) -> Result<ProximalOutcome, IdError> {
    q.validate(g)?;
    if !q.policies.is_empty() {
        let red = reduce_policy_query(g, q)?;
        let mut out = proximal_identify(g, &red.joint, cfg)?;
        if let IdVerdict::Identified(e) = &mut out.verdict {
            e.root = red.wrap(e.root.clone());
        }
        return Ok(out);
    }
    let cfg = match (&cfg.cards, &q.cardinalities) {
        (None, Some(c)) => SearchConfig { cards: Some(c.clone()), ..cfg.clone() },
        _ => cfg.clone(),
    };
    let h = g.latent_project(&g.of_kind(VertexKind::UnresolvableHidden))?;
    let proxies = q.m();
    let vstar: VSet = h.of_kind(VertexKind::Observed).difference(&proxies).cloned().collect();
    let hide: VSet = h.random().difference(&vstar).cloned().collect();
    let gstar = h.latent_project(&hide)?;
    let (y, a) = (q.y(), q.a());
    let ystar = ancestral_set(&gstar, &y, &a);
    let districts = gstar.induced(&ystar).districts(&ystar);
    let mut est = Estimand::new(Expr::Product { children: vec![] });
    let mut dk = Vec::new();
    let mut sequences = Vec::new();
    for d in districts {
        let todo: VSet = vstar.difference(&d).cloned().collect();
        match search_admissible_sequence(&h, &d, &todo, &proxies, &est, &cfg) {
            Ok((seq, next)) => {
                est = next;
                dk.push((d, seq.margins.last().unwrap().inductive.clone()));
                sequences.push(seq);
            }
            Err(stuck) => return Ok(ProximalOutcome { verdict: IdVerdict::NotIdentified { district: d, stuck }, sequences }),
        }
    }
    let est = assemble(est, &dk, &ystar, &y, &a);
    Ok(ProximalOutcome { verdict: IdVerdict::Identified(simplify(&est)), sequences })
}

#[cfg(test)]
mod tests;
