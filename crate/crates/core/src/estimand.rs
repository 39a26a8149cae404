//! Symbolic identifying functionals.
//!
//! An [`Estimand`] is a root [`Expr`] plus a list of kernel definitions. A
//! kernel is named by its scope and do-set ([`KernelRef`]); because every
//! kernel denotes a genuine interventional distribution, that pair determines
//! it uniquely and evaluation memoizes on it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::VSet;
use crate::oracle::{solve_bridge_discrete, BridgeSolution, RESIDUAL_TOL};
use crate::table::{Table, TableError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginTag {
    Observed,
    Interventional,
    InductiveMargin,
    ReusingMargin,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KernelRef {
    pub tag: MarginTag,
    pub scope: Vec<String>,
    pub fixed: Vec<String>,
}

impl KernelRef {
    pub fn observed(scope: &VSet) -> Self {
        KernelRef { tag: MarginTag::Observed, scope: scope.iter().cloned().collect(), fixed: vec![] }
    }

    pub fn new(tag: MarginTag, scope: &VSet, fixed: &VSet) -> Self {
        KernelRef { tag, scope: scope.iter().cloned().collect(), fixed: fixed.iter().cloned().collect() }
    }

    pub fn scope_set(&self) -> VSet {
        self.scope.iter().cloned().collect()
    }

    pub fn fixed_set(&self) -> VSet {
        self.fixed.iter().cloned().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlugValue {
    Const { value: usize },
    /// Deterministic rule `var := f(inputs)`, resolved from the evaluation
    /// environment by name.
    Policy { name: String, inputs: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expr {
    Density {
        vars: Vec<String>,
        given: Vec<String>,
        kernel: KernelRef,
    },
    Sum {
        over: Vec<String>,
        child: Box<Expr>,
    },
    Product {
        children: Vec<Expr>,
    },
    Quotient {
        num: Box<Expr>,
        den: Box<Expr>,
    },
    Plug {
        var: String,
        value: PlugValue,
        child: Box<Expr>,
    },
    /// Let-binding of a bridge function defined by
    /// `lhs = Σ_{unknowns} b(signature) · rhs`, row-indexed by `instruments`.
    BridgeSolve {
        id: String,
        unknowns: Vec<String>,
        signature: Vec<String>,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
        instruments: Vec<String>,
        body: Box<Expr>,
    },
    BridgeApply {
        id: String,
        args: Vec<String>,
    },
}

impl Expr {
    pub fn density(vars: &VSet, given: &VSet, kernel: &KernelRef) -> Expr {
        Expr::Density { vars: vars.iter().cloned().collect(), given: given.iter().cloned().collect(), kernel: kernel.clone() }
    }

    /// `Σ_over child`; an empty `over` returns the child unchanged.
    pub fn sum(over: &VSet, child: Expr) -> Expr {
        if over.is_empty() {
            child
        } else {
            Expr::Sum { over: over.iter().cloned().collect(), child: Box::new(child) }
        }
    }

    pub fn product(children: Vec<Expr>) -> Expr {
        if children.len() == 1 {
            children.into_iter().next().unwrap()
        } else {
            Expr::Product { children }
        }
    }

    pub fn quotient(num: Expr, den: Expr) -> Expr {
        Expr::Quotient { num: Box::new(num), den: Box::new(den) }
    }

    pub fn plug(var: &str, value: usize, child: Expr) -> Expr {
        Expr::Plug { var: var.to_string(), value: PlugValue::Const { value }, child: Box::new(child) }
    }

    fn children(&self) -> Vec<&Expr> {
        match self {
            Expr::Density { .. } | Expr::BridgeApply { .. } => vec![],
            Expr::Sum { child, .. } | Expr::Plug { child, .. } => vec![child],
            Expr::Product { children } => children.iter().collect(),
            Expr::Quotient { num, den } => vec![num, den],
            Expr::BridgeSolve { lhs, rhs, body, .. } => vec![lhs, rhs, body],
        }
    }

    /// Every kernel referenced directly by a density in this tree.
    pub fn kernel_refs(&self) -> BTreeSet<KernelRef> {
        let mut out = BTreeSet::new();
        self.walk(&mut |e| {
            if let Expr::Density { kernel, .. } = e {
                out.insert(kernel.clone());
            }
        });
        out
    }

    pub fn walk(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        for c in self.children() {
            c.walk(f);
        }
    }

    pub fn bridge_count(&self) -> usize {
        let mut n = 0;
        self.walk(&mut |e| {
            if matches!(e, Expr::BridgeSolve { .. }) {
                n += 1;
            }
        });
        n
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Assumption {
    Completeness { bridge: String, conditioning: Vec<String>, hidden: Vec<String>, instruments: Vec<String> },
    BridgeExistence { bridge: String, equation: String },
    CounterfactualIndependence { statement: String, checked_graphically: bool },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelDef {
    pub key: KernelRef,
    pub expr: Expr,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Estimand {
    pub root: Expr,
    pub kernels: Vec<KernelDef>,
    pub ledger: Vec<Assumption>,
}

impl Estimand {
    pub fn new(root: Expr) -> Self {
        Estimand { root, kernels: vec![], ledger: vec![] }
    }

    pub fn kernel_map(&self) -> BTreeMap<KernelRef, Expr> {
        self.kernels.iter().map(|k| (k.key.clone(), k.expr.clone())).collect()
    }

    pub fn define(&mut self, key: KernelRef, expr: Expr) {
        if !self.kernels.iter().any(|k| k.key == key) {
            self.kernels.push(KernelDef { key, expr });
        }
    }

    pub fn bridge_count(&self) -> usize {
        self.root.bridge_count() + self.kernels.iter().map(|k| k.expr.bridge_count()).sum::<usize>()
    }

    /// Free variables of the root.
    pub fn free_vars(&self) -> VSet {
        free_vars(&self.root, &self.kernel_map())
    }

    /// Root with every defined kernel expanded in place.
    pub fn inline(&self) -> Expr {
        inline(&self.root, &self.kernel_map())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("estimand serializes")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, serde_json::Error> {
        serde_json::from_value(v.clone())
    }

    /// Kernel-by-kernel listing: the root, then each definition.
    pub fn render_derivation(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", render_text(&self.root));
        if !self.kernels.is_empty() {
            s.push_str("where\n");
            for k in &self.kernels {
                let head = Expr::Density { vars: k.key.scope.clone(), given: vec![], kernel: k.key.clone() };
                let _ = writeln!(s, "  {} = {}", render_text(&head), render_text(&k.expr));
                k.expr.walk(&mut |e| {
                    if let Expr::BridgeSolve { id, unknowns, signature, lhs, rhs, .. } = e {
                        let _ = writeln!(s, "    {}", bridge_equation(id, unknowns, signature, lhs, rhs));
                    }
                });
            }
        }
        s
    }
}

pub fn bridge_equation(id: &str, unknowns: &[String], signature: &[String], lhs: &Expr, rhs: &Expr) -> String {
    let apply = Expr::BridgeApply { id: id.to_string(), args: signature.to_vec() };
    let over: VSet = unknowns.iter().cloned().collect();
    let right = Expr::sum(&over, Expr::product(vec![apply, rhs.clone()]));
    format!("{} solves {} = {}", id, render_text(lhs), render_text(&right))
}

type Kernels = BTreeMap<KernelRef, Expr>;

/// Symbolic free variables; a density depends on those fixed variables of
/// its kernel that the kernel's definition mentions.
pub fn free_vars(e: &Expr, kernels: &Kernels) -> VSet {
    let mut memo = BTreeMap::new();
    free_vars_memo(e, kernels, &mut memo)
}

fn free_vars_memo(e: &Expr, kernels: &Kernels, memo: &mut BTreeMap<KernelRef, VSet>) -> VSet {
    match e {
        Expr::Density { vars, given, kernel } => {
            let mut out: VSet = vars.iter().chain(given).cloned().collect();
            out.extend(kernel_deps(kernel, kernels, memo));
            out
        }
        Expr::Sum { over, child } => {
            let mut f = free_vars_memo(child, kernels, memo);
            for v in over {
                f.remove(v);
            }
            f
        }
        Expr::Product { children } => children.iter().flat_map(|c| free_vars_memo(c, kernels, memo)).collect(),
        Expr::Quotient { num, den } => {
            let mut f = free_vars_memo(num, kernels, memo);
            f.extend(free_vars_memo(den, kernels, memo));
            f
        }
        Expr::Plug { var, value, child } => {
            let mut f = free_vars_memo(child, kernels, memo);
            f.remove(var);
            if let PlugValue::Policy { inputs, .. } = value {
                f.extend(inputs.iter().cloned());
            }
            f
        }
        Expr::BridgeSolve { body, .. } => free_vars_memo(body, kernels, memo),
        Expr::BridgeApply { args, .. } => args.iter().cloned().collect(),
    }
}

fn kernel_deps(k: &KernelRef, kernels: &Kernels, memo: &mut BTreeMap<KernelRef, VSet>) -> VSet {
    if let Some(d) = memo.get(k) {
        return d.clone();
    }
    let deps = match kernels.get(k) {
        Some(def) => {
            let f = free_vars_memo(def, kernels, memo);
            let fixed = k.fixed_set();
            f.intersection(&fixed).cloned().collect()
        }
        None => VSet::new(),
    };
    memo.insert(k.clone(), deps.clone());
    deps
}

/// Expands kernel references by their definitions.
pub fn inline(e: &Expr, kernels: &Kernels) -> Expr {
    match e {
        Expr::Density { vars, given, kernel } => match kernels.get(kernel) {
            None => e.clone(),
            Some(def) => {
                let def = inline(def, kernels);
                let scope = kernel.scope_set();
                let vs: VSet = vars.iter().cloned().collect();
                let gs: VSet = given.iter().cloned().collect();
                let keep: VSet = vs.union(&gs).cloned().collect();
                let drop: VSet = scope.difference(&keep).cloned().collect();
                let num = Expr::sum(&drop, def.clone());
                if gs.intersection(&scope).next().is_none() {
                    num
                } else {
                    let drop_den: VSet = scope.difference(&gs).cloned().collect();
                    Expr::quotient(num, Expr::sum(&drop_den, def))
                }
            }
        },
        Expr::Sum { over, child } => Expr::Sum { over: over.clone(), child: Box::new(inline(child, kernels)) },
        Expr::Product { children } => Expr::Product { children: children.iter().map(|c| inline(c, kernels)).collect() },
        Expr::Quotient { num, den } => Expr::quotient(inline(num, kernels), inline(den, kernels)),
        Expr::Plug { var, value, child } => Expr::Plug { var: var.clone(), value: value.clone(), child: Box::new(inline(child, kernels)) },
        Expr::BridgeSolve { id, unknowns, signature, lhs, rhs, instruments, body } => Expr::BridgeSolve {
            id: id.clone(),
            unknowns: unknowns.clone(),
            signature: signature.clone(),
            lhs: Box::new(inline(lhs, kernels)),
            rhs: Box::new(inline(rhs, kernels)),
            instruments: instruments.clone(),
            body: Box::new(inline(body, kernels)),
        },
        Expr::BridgeApply { .. } => e.clone(),
    }
}

// ---------------------------------------------------------------- rendering

fn tilde(name: &str, latex: bool) -> String {
    let lower = name.to_lowercase();
    if latex {
        return format!("\\tilde{{{lower}}}");
    }
    let mut chars = lower.chars();
    let first = chars.next().unwrap_or('x');
    let rest: String = chars.collect();
    let pre = match first {
        'a' => "ã".to_string(),
        'e' => "ẽ".to_string(),
        'i' => "ĩ".to_string(),
        'n' => "ñ".to_string(),
        'o' => "õ".to_string(),
        'u' => "ũ".to_string(),
        'v' => "ṽ".to_string(),
        'y' => "ỹ".to_string(),
        c => format!("{c}\u{303}"),
    };
    format!("{pre}{rest}")
}

struct Renderer {
    latex: bool,
    /// display names of bound variables that shadow free ones
    rename: BTreeMap<String, String>,
    outer_free: VSet,
    /// parenthesis depth; products outside any parentheses are spaced
    depth: usize,
}

impl Renderer {
    fn name(&self, v: &str) -> String {
        match self.rename.get(v) {
            Some(n) => n.clone(),
            None => v.to_lowercase(),
        }
    }

    fn list(&self, vs: &[String]) -> String {
        vs.iter().map(|v| self.name(v)).collect::<Vec<_>>().join(",")
    }

    fn density(&self, vars: &[String], given: &[String], kernel: &KernelRef) -> String {
        let (bar, doo) = if self.latex { (" \\mid ", "\\operatorname{do}") } else { ("|", "do") };
        let mut s = format!("p({}", self.list(vars));
        let cond_fixed: Vec<String> = kernel.fixed.iter().filter(|f| !given.contains(f) && !vars.contains(f)).cloned().collect();
        if !given.is_empty() || !cond_fixed.is_empty() {
            s.push_str(bar);
            s.push_str(&self.list(given));
            if !cond_fixed.is_empty() {
                if !given.is_empty() {
                    s.push(',');
                }
                let _ = write!(s, "{doo}({})", self.list(&cond_fixed));
            }
        }
        s.push(')');
        s
    }

    fn render(&mut self, e: &Expr) -> String {
        match e {
            Expr::Density { vars, given, kernel } => self.density(vars, given, kernel),
            Expr::Sum { over, child } => {
                let mut over = over.clone();
                let mut child = child.as_ref();
                loop {
                    match child {
                        Expr::Sum { over: o2, child: c2 } => {
                            over.extend(o2.iter().cloned());
                            child = c2;
                        }
                        Expr::BridgeSolve { body, .. } => child = body,
                        _ => break,
                    }
                }
                let saved = self.rename.clone();
                for v in &over {
                    if self.outer_free.contains(v) {
                        self.rename.insert(v.clone(), tilde(v, self.latex));
                    }
                }
                let names = self.list(&over);
                let head = if self.latex { format!("\\sum_{{{names}}}") } else { format!("Σ_{{{names}}}") };
                let body = self.render(child);
                self.rename = saved;
                format!("{head} {body}")
            }
            Expr::Product { children } => {
                let sep = if self.depth == 0 || self.latex { " " } else { "" };
                let parts: Vec<String> = children
                    .iter()
                    .map(|c| {
                        let paren = matches!(c, Expr::Sum { .. }) || (!self.latex && matches!(c, Expr::Quotient { .. }));
                        if !paren {
                            return self.render(c);
                        }
                        self.depth += 1;
                        let r = self.render(c);
                        self.depth -= 1;
                        if self.latex {
                            format!("\\left({r}\\right)")
                        } else {
                            format!("({r})")
                        }
                    })
                    .collect();
                parts.join(sep)
            }
            Expr::Quotient { num, den } => {
                self.depth += 1;
                let n = self.render(num);
                let d = self.render(den);
                self.depth -= 1;
                if self.latex {
                    format!("\\frac{{{n}}}{{{d}}}")
                } else {
                    let wrap = |x: &Expr, s: String| match x {
                        Expr::Density { .. } | Expr::BridgeApply { .. } => s,
                        _ => format!("[{s}]"),
                    };
                    format!("{} / {}", wrap(num, n), wrap(den, d))
                }
            }
            Expr::Plug { var, value, child } => {
                self.depth += 1;
                let c = self.render(child);
                self.depth -= 1;
                let v = match value {
                    PlugValue::Const { value } => value.to_string(),
                    PlugValue::Policy { name, inputs } => format!("{}({})", name, self.list(inputs)),
                };
                if self.latex {
                    format!("\\left[{c}\\right]_{{{}={v}}}", var.to_lowercase())
                } else {
                    format!("[{c}]_{{{}:={v}}}", var.to_lowercase())
                }
            }
            Expr::BridgeSolve { body, .. } => self.render(body),
            Expr::BridgeApply { id, args } => {
                let shown = if self.latex {
                    match id.split_once('_') {
                        Some((a, b)) => format!("{a}_{{{b}}}"),
                        None => id.clone(),
                    }
                } else {
                    id.clone()
                };
                format!("{shown}({})", self.list(args))
            }
        }
    }
}

fn render_with(e: &Expr, latex: bool) -> String {
    let outer_free = free_vars(e, &Kernels::new());
    let mut r = Renderer { latex, rename: BTreeMap::new(), outer_free, depth: 0 };
    r.render(e)
}

/// Deterministic single-line rendering. Bound variables that shadow a free
/// variable of the whole expression get a tilde.
pub fn render_text(e: &Expr) -> String {
    render_with(e, false)
}

pub fn render_latex(e: &Expr) -> String {
    render_with(e, true)
}

// --------------------------------------------------------------- evaluation

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("kernel {0} has no definition and is not observed")]
    UnresolvableKernel(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("bridge `{id}` system inconsistent: residual {residual:.3e}")]
    BridgeInconsistent { id: String, residual: f64 },
    #[error("bridge `{0}` applied outside its solve node")]
    UnknownBridge(String),
    #[error("no policy named `{0}` in the environment")]
    UnknownPolicy(String),
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("{0}")]
    Oracle(String),
}

/// Evaluation environment: the observed joint plus cardinalities of every
/// variable that may appear (treatments included).
#[derive(Clone, Debug)]
pub struct Env {
    pub joint: Table,
    pub cards: BTreeMap<String, usize>,
    /// policy name -> (inputs, value per input assignment, row-major)
    pub policies: BTreeMap<String, (Vec<String>, Vec<usize>)>,
}

impl Env {
    pub fn new(joint: Table, cards: BTreeMap<String, usize>) -> Self {
        Env { joint, cards, policies: BTreeMap::new() }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub table: Table,
    pub bridges: BTreeMap<String, BridgeSolution>,
}

impl Evaluation {
    pub fn rank_deficient(&self) -> bool {
        self.bridges.values().any(|b| !b.full_rank)
    }
}

struct Evaluator<'a> {
    kernels: &'a Kernels,
    env: &'a Env,
    memo: BTreeMap<KernelRef, Table>,
    bridges: BTreeMap<String, BridgeSolution>,
}

impl Evaluator<'_> {
    fn kernel(&mut self, k: &KernelRef) -> Result<Table, EvalError> {
        if let Some(t) = self.memo.get(k) {
            return Ok(t.clone());
        }
        let t = match self.kernels.get(k) {
            Some(def) => self.eval(def)?,
            None if k.tag == MarginTag::Observed && k.fixed.is_empty() => {
                self.env.joint.marginal(&k.scope).map_err(|_| EvalError::UnresolvableKernel(format!("{k:?}")))?
            }
            None => return Err(EvalError::UnresolvableKernel(format!("{k:?}"))),
        };
        self.memo.insert(k.clone(), t.clone());
        Ok(t)
    }

    fn eval(&mut self, e: &Expr) -> Result<Table, EvalError> {
        match e {
            Expr::Density { vars, given, kernel } => {
                let t = self.kernel(kernel)?;
                let drop: Vec<String> = kernel.scope.iter().filter(|v| !vars.contains(v) && !given.contains(v)).cloned().collect();
                let num = t.sum_out(&drop, &self.env.cards)?;
                let random_given = given.iter().any(|g| kernel.scope.contains(g));
                if !random_given {
                    return Ok(num);
                }
                let den = num.sum_out(vars, &self.env.cards)?;
                Ok(num.divide(&den)?)
            }
            Expr::Sum { over, child } => Ok(self.eval(child)?.sum_out(over, &self.env.cards)?),
            Expr::Product { children } => {
                let mut acc = Table::scalar(1.0);
                for c in children {
                    acc = acc.product(&self.eval(c)?)?;
                }
                Ok(acc)
            }
            Expr::Quotient { num, den } => {
                let n = self.eval(num)?;
                let d = self.eval(den)?;
                Ok(n.divide(&d)?)
            }
            Expr::Plug { var, value, child } => {
                let c = self.eval(child)?;
                match value {
                    PlugValue::Const { value } => Ok(c.restrict(var, *value)),
                    PlugValue::Policy { name, inputs } => {
                        let (pin, values) = self.env.policies.get(name).ok_or_else(|| EvalError::UnknownPolicy(name.clone()))?;
                        if pin != inputs {
                            return Err(EvalError::UnknownPolicy(name.clone()));
                        }
                        if c.card(var).is_none() {
                            return Ok(c);
                        }
                        let card = |v: &String| self.env.cards.get(v).copied().ok_or_else(|| EvalError::Oracle(format!("no cardinality for `{v}`")));
                        let mut scope = vec![(var.clone(), card(var)?)];
                        let mut in_cards = Vec::new();
                        for i in inputs {
                            let k = card(i)?;
                            scope.push((i.clone(), k));
                            in_cards.push(k);
                        }
                        let ind = Table::from_fn(&scope, |a| {
                            let mut idx = 0;
                            for (i, k) in inputs.iter().zip(&in_cards) {
                                idx = idx * k + a[i];
                            }
                            if values[idx] == a[var] {
                                1.0
                            } else {
                                0.0
                            }
                        });
                        Ok(c.product(&ind)?.sum_out(std::slice::from_ref(var), &self.env.cards)?)
                    }
                }
            }
            Expr::BridgeSolve { id, unknowns, lhs, rhs, instruments, body, .. } => {
                let l = self.eval(lhs)?;
                let r = self.eval(rhs)?;
                let sol = solve_bridge_discrete(&l, &r, unknowns, instruments).map_err(|e| EvalError::Oracle(e.to_string()))?;
                if sol.residual > RESIDUAL_TOL {
                    return Err(EvalError::BridgeInconsistent { id: id.clone(), residual: sol.residual });
                }
                self.bridges.insert(id.clone(), sol);
                self.eval(body)
            }
            Expr::BridgeApply { id, .. } => self.bridges.get(id).map(|b| b.table.clone()).ok_or_else(|| EvalError::UnknownBridge(id.clone())),
        }
    }
}

/// Evaluates a bare expression (no kernel definitions) without range checks.
pub fn evaluate_expr(e: &Expr, env: &Env) -> Result<Table, EvalError> {
    let kernels = Kernels::new();
    let mut ev = Evaluator { kernels: &kernels, env, memo: BTreeMap::new(), bridges: BTreeMap::new() };
    ev.eval(e)
}

/// Evaluates the estimand; the result must be a probability table to
/// within 1e-9 and is clamped to [0, 1].
pub fn evaluate(est: &Estimand, env: &Env) -> Result<Evaluation, EvalError> {
    let kernels = est.kernel_map();
    let mut ev = Evaluator { kernels: &kernels, env, memo: BTreeMap::new(), bridges: BTreeMap::new() };
    let t = ev.eval(&est.root)?;
    if let Some(bad) = t.data().iter().find(|x| **x < -1e-9 || **x > 1.0 + 1e-9 || x.is_nan()) {
        return Err(EvalError::OutOfRange(*bad));
    }
    Ok(Evaluation { table: t.map(|x| x.clamp(0.0, 1.0)), bridges: ev.bridges })
}

// --------------------------------------------------------------- simplify

fn factors(e: &Expr) -> Vec<Expr> {
    match e {
        Expr::Product { children } => children.clone(),
        other => vec![other.clone()],
    }
}

fn simplify_node(e: Expr, kernels: &Kernels) -> Expr {
    match e {
        Expr::Sum { over, child } => {
            let child = *child;
            let mut remaining = Vec::new();
            let mut fs = factors(&child);
            let was_product = matches!(child, Expr::Product { .. });
            for x in &over {
                let holders: Vec<usize> = (0..fs.len()).filter(|i| free_vars(&fs[*i], kernels).contains(x)).collect();
                let mut done = false;
                if let [i] = holders.as_slice() {
                    if let Expr::Density { vars, given, kernel } = &fs[*i] {
                        if given.is_empty() && vars.len() > 1 && vars.contains(x) {
                            let nv: Vec<String> = vars.iter().filter(|v| *v != x).cloned().collect();
                            fs[*i] = Expr::Density { vars: nv, given: vec![], kernel: kernel.clone() };
                            done = true;
                        }
                    }
                }
                if !done {
                    remaining.push(x.clone());
                }
            }
            let body = if was_product { Expr::Product { children: fs } } else { fs.pop().unwrap() };
            if remaining.is_empty() {
                body
            } else {
                Expr::Sum { over: remaining, child: Box::new(body) }
            }
        }
        Expr::Quotient { num, den } => {
            let mut n = factors(&num);
            let mut d = factors(&den);
            let mut i = 0;
            while i < n.len() {
                if let Some(j) = d.iter().position(|x| *x == n[i]) {
                    if n.len() > 1 {
                        n.remove(i);
                        d.remove(j);
                        continue;
                    }
                }
                i += 1;
            }
            if n.is_empty() {
                return Expr::Quotient { num, den };
            }
            let num = Expr::product(n);
            if d.is_empty() {
                num
            } else {
                Expr::quotient(num, Expr::product(d))
            }
        }
        Expr::Plug { var, value, child } => {
            if !free_vars(&child, kernels).contains(&var) {
                return *child;
            }
            let wrap = |c: Expr| -> Expr {
                if free_vars(&c, kernels).contains(&var) {
                    Expr::Plug { var: var.clone(), value: value.clone(), child: Box::new(c) }
                } else {
                    c
                }
            };
            match *child {
                Expr::Product { children } => Expr::Product { children: children.into_iter().map(wrap).collect() },
                Expr::Quotient { num, den } => Expr::quotient(wrap(*num), wrap(*den)),
                Expr::Sum { over, child } if !over.contains(&var) => Expr::Sum { over, child: Box::new(wrap(*child)) },
                other => Expr::Plug { var, value, child: Box::new(other) },
            }
        }
        other => other,
    }
}

fn simplify_rec(e: &Expr, kernels: &Kernels) -> Expr {
    let rebuilt = match e {
        Expr::Density { .. } | Expr::BridgeApply { .. } => e.clone(),
        Expr::Sum { over, child } => Expr::Sum { over: over.clone(), child: Box::new(simplify_rec(child, kernels)) },
        Expr::Product { children } => Expr::Product { children: children.iter().map(|c| simplify_rec(c, kernels)).collect() },
        Expr::Quotient { num, den } => Expr::quotient(simplify_rec(num, kernels), simplify_rec(den, kernels)),
        Expr::Plug { var, value, child } => Expr::Plug { var: var.clone(), value: value.clone(), child: Box::new(simplify_rec(child, kernels)) },
        Expr::BridgeSolve { id, unknowns, signature, lhs, rhs, instruments, body } => Expr::BridgeSolve {
            id: id.clone(),
            unknowns: unknowns.clone(),
            signature: signature.clone(),
            lhs: Box::new(simplify_rec(lhs, kernels)),
            rhs: Box::new(simplify_rec(rhs, kernels)),
            instruments: instruments.clone(),
            body: Box::new(simplify_rec(body, kernels)),
        },
    };
    simplify_node(rebuilt, kernels)
}

/// Syntactic simplification: sums absorbed by a single joint density,
/// cancellation of identical quotient factors, and plug propagation.
pub fn simplify_expr(e: &Expr, kernels: &Kernels) -> Expr {
    let mut cur = e.clone();
    for _ in 0..32 {
        let next = simplify_rec(&cur, kernels);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

pub fn simplify(est: &Estimand) -> Estimand {
    let kernels = est.kernel_map();
    Estimand {
        root: simplify_expr(&est.root, &kernels),
        kernels: est.kernels.iter().map(|k| KernelDef { key: k.key.clone(), expr: simplify_expr(&k.expr, &kernels) }).collect(),
        ledger: est.ledger.clone(),
    }
}
