//! Acyclic directed mixed graphs and their conditional variant.
//!
//! One value type, [`MixedGraph`], serves both as an ADMG and as a CADMG: a
//! vertex of kind [`VertexKind::Fixed`] is a member of the fixed set and never
//! carries an arrowhead. All operations are pure; mutating operations return a
//! new graph.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type VSet = BTreeSet<String>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexKind {
    Observed,
    ResolvableHidden,
    UnresolvableHidden,
    Fixed,
}

impl VertexKind {
    pub fn is_hidden(self) -> bool {
        matches!(self, VertexKind::ResolvableHidden | VertexKind::UnresolvableHidden)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("unknown vertex `{0}`")]
    UnknownVertex(String),
    #[error("duplicate vertex `{0}`")]
    DuplicateVertex(String),
    #[error("self-loop at `{0}`")]
    SelfLoop(String),
    #[error("duplicate edge {0}")]
    DuplicateEdge(String),
    #[error("directed cycle through `{0}`")]
    Cycle(String),
    #[error("edge {0} has an arrowhead at fixed vertex `{1}`")]
    ArrowheadAtFixed(String, String),
    #[error("vertex `{0}` is not fixable")]
    NotFixable(String),
    #[error("vertex `{0}` is fixed")]
    AlreadyFixed(String),
    #[error("vertex `{0}` is hidden")]
    HiddenVertex(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Mixed graph with directed and bidirected edges. Bidirected pairs are
/// stored with the lesser name first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct MixedGraph {
    kinds: BTreeMap<String, VertexKind>,
    directed: BTreeSet<(String, String)>,
    bidirected: BTreeSet<(String, String)>,
}

pub type Admg = MixedGraph;
pub type Cadmg = MixedGraph;

fn ordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

pub fn vset<I, S>(items: I) -> VSet
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    items.into_iter().map(|s| s.as_ref().to_string()).collect()
}

pub fn fmt_set(s: &VSet) -> String {
    format!("{{{}}}", s.iter().cloned().collect::<Vec<_>>().join(","))
}

impl MixedGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph of observed vertices from edge lists; panics on invalid
    /// input. Intended for fixtures.
    pub fn from_edges(vertices: &[&str], directed: &[(&str, &str)], bidirected: &[(&str, &str)]) -> Self {
        let mut g = Self::new();
        for v in vertices {
            g.add_vertex(v, VertexKind::Observed).unwrap();
        }
        for (a, b) in directed {
            g.add_directed(a, b).unwrap();
        }
        for (a, b) in bidirected {
            g.add_bidirected(a, b).unwrap();
        }
        g
    }

    pub fn add_vertex(&mut self, name: &str, kind: VertexKind) -> Result<(), GraphError> {
        if name.is_empty() {
            return Err(GraphError::UnknownVertex(String::new()));
        }
        if self.kinds.contains_key(name) {
            return Err(GraphError::DuplicateVertex(name.to_string()));
        }
        self.kinds.insert(name.to_string(), kind);
        Ok(())
    }

    pub fn set_kind(&mut self, name: &str, kind: VertexKind) -> Result<(), GraphError> {
        self.check(name)?;
        if kind == VertexKind::Fixed && self.has_arrowhead(name) {
            return Err(GraphError::ArrowheadAtFixed(String::from("into"), name.to_string()));
        }
        self.kinds.insert(name.to_string(), kind);
        Ok(())
    }

    fn has_arrowhead(&self, v: &str) -> bool {
        self.directed.iter().any(|(_, b)| b == v) || self.bidirected.iter().any(|(a, b)| a == v || b == v)
    }

    fn check(&self, v: &str) -> Result<(), GraphError> {
        if self.kinds.contains_key(v) {
            Ok(())
        } else {
            Err(GraphError::UnknownVertex(v.to_string()))
        }
    }

    fn check_set(&self, s: &VSet) -> Result<(), GraphError> {
        s.iter().try_for_each(|v| self.check(v))
    }

    /// Adds `a -> b`, rejecting cycles and duplicates.
    pub fn add_directed(&mut self, a: &str, b: &str) -> Result<(), GraphError> {
        self.check(a)?;
        self.check(b)?;
        if a == b {
            return Err(GraphError::SelfLoop(a.to_string()));
        }
        if self.kinds[b] == VertexKind::Fixed {
            return Err(GraphError::ArrowheadAtFixed(format!("{a} -> {b}"), b.to_string()));
        }
        let e = (a.to_string(), b.to_string());
        if self.directed.contains(&e) {
            return Err(GraphError::DuplicateEdge(format!("{a} -> {b}")));
        }
        if self.descendants_of(b).contains(a) {
            return Err(GraphError::Cycle(a.to_string()));
        }
        self.directed.insert(e);
        Ok(())
    }

    pub fn add_bidirected(&mut self, a: &str, b: &str) -> Result<(), GraphError> {
        self.check(a)?;
        self.check(b)?;
        if a == b {
            return Err(GraphError::SelfLoop(a.to_string()));
        }
        for v in [a, b] {
            if self.kinds[v] == VertexKind::Fixed {
                return Err(GraphError::ArrowheadAtFixed(format!("{a} <-> {b}"), v.to_string()));
            }
        }
        if !self.bidirected.insert(ordered(a, b)) {
            return Err(GraphError::DuplicateEdge(format!("{a} <-> {b}")));
        }
        Ok(())
    }

    pub fn vertices(&self) -> impl Iterator<Item = (&String, VertexKind)> {
        self.kinds.iter().map(|(k, v)| (k, *v))
    }

    pub fn vertex_set(&self) -> VSet {
        self.kinds.keys().cloned().collect()
    }

    pub fn contains(&self, v: &str) -> bool {
        self.kinds.contains_key(v)
    }

    pub fn kind(&self, v: &str) -> Option<VertexKind> {
        self.kinds.get(v).copied()
    }

    pub fn of_kind(&self, kind: VertexKind) -> VSet {
        self.kinds.iter().filter(|(_, k)| **k == kind).map(|(v, _)| v.clone()).collect()
    }

    /// All non-fixed vertices.
    pub fn random(&self) -> VSet {
        self.kinds.iter().filter(|(_, k)| **k != VertexKind::Fixed).map(|(v, _)| v.clone()).collect()
    }

    pub fn fixed(&self) -> VSet {
        self.of_kind(VertexKind::Fixed)
    }

    pub fn directed_edges(&self) -> impl Iterator<Item = &(String, String)> {
        self.directed.iter()
    }

    pub fn bidirected_edges(&self) -> impl Iterator<Item = &(String, String)> {
        self.bidirected.iter()
    }

    pub fn has_directed(&self, a: &str, b: &str) -> bool {
        self.directed.contains(&(a.to_string(), b.to_string()))
    }

    pub fn has_bidirected(&self, a: &str, b: &str) -> bool {
        self.bidirected.contains(&ordered(a, b))
    }

    pub fn parents_of(&self, v: &str) -> VSet {
        self.directed.iter().filter(|(_, b)| b == v).map(|(a, _)| a.clone()).collect()
    }

    pub fn children_of(&self, v: &str) -> VSet {
        self.directed.iter().filter(|(a, _)| a == v).map(|(_, b)| b.clone()).collect()
    }

    pub fn siblings_of(&self, v: &str) -> VSet {
        self.bidirected
            .iter()
            .filter_map(|(a, b)| {
                if a == v {
                    Some(b.clone())
                } else if b == v {
                    Some(a.clone())
                } else {
                    None
                }
            })
            .collect()
    }

    /// Union of the parents of every member of `s` (members may appear).
    pub fn parents(&self, s: &VSet) -> Result<VSet, GraphError> {
        self.check_set(s)?;
        Ok(s.iter().flat_map(|v| self.parents_of(v)).collect())
    }

    pub fn children(&self, s: &VSet) -> Result<VSet, GraphError> {
        self.check_set(s)?;
        Ok(s.iter().flat_map(|v| self.children_of(v)).collect())
    }

    fn closure(&self, s: &VSet, forward: bool) -> VSet {
        let mut out: VSet = s.clone();
        let mut queue: VecDeque<String> = s.iter().cloned().collect();
        while let Some(v) = queue.pop_front() {
            let next = if forward { self.children_of(&v) } else { self.parents_of(&v) };
            for n in next {
                if out.insert(n.clone()) {
                    queue.push_back(n);
                }
            }
        }
        out
    }

    /// Reflexive descendants.
    pub fn descendants(&self, s: &VSet) -> Result<VSet, GraphError> {
        self.check_set(s)?;
        Ok(self.closure(s, true))
    }

    /// Reflexive ancestors.
    pub fn ancestors(&self, s: &VSet) -> Result<VSet, GraphError> {
        self.check_set(s)?;
        Ok(self.closure(s, false))
    }

    pub fn descendants_of(&self, v: &str) -> VSet {
        self.closure(&vset([v]), true)
    }

    pub fn ancestors_of(&self, v: &str) -> VSet {
        self.closure(&vset([v]), false)
    }

    /// Partition of `scope` into bidirected-connected components, sorted by
    /// least member.
    pub fn districts(&self, scope: &VSet) -> Vec<VSet> {
        let mut seen = VSet::new();
        let mut out = Vec::new();
        for start in scope {
            if seen.contains(start) {
                continue;
            }
            let mut comp = vset([start]);
            let mut queue = VecDeque::from([start.clone()]);
            while let Some(v) = queue.pop_front() {
                for s in self.siblings_of(&v) {
                    if scope.contains(&s) && comp.insert(s.clone()) {
                        queue.push_back(s);
                    }
                }
            }
            seen.extend(comp.iter().cloned());
            out.push(comp);
        }
        out
    }

    /// District of `v` among all random vertices.
    pub fn district_of(&self, v: &str) -> VSet {
        let scope = self.random();
        self.districts(&scope).into_iter().find(|d| d.contains(v)).unwrap_or_else(|| vset([v]))
    }

    /// Subgraph induced by `s`.
    pub fn induced(&self, s: &VSet) -> MixedGraph {
        MixedGraph {
            kinds: self.kinds.iter().filter(|(k, _)| s.contains(*k)).map(|(k, v)| (k.clone(), *v)).collect(),
            directed: self.directed.iter().filter(|(a, b)| s.contains(a) && s.contains(b)).cloned().collect(),
            bidirected: self.bidirected.iter().filter(|(a, b)| s.contains(a) && s.contains(b)).cloned().collect(),
        }
    }

    /// Latent projection onto the complement of `hide`, by eliminating one
    /// vertex at a time. Fixed vertices cannot be hidden.
    pub fn latent_project(&self, hide: &VSet) -> Result<MixedGraph, GraphError> {
        self.check_set(hide)?;
        if let Some(f) = hide.iter().find(|v| self.kinds[*v] == VertexKind::Fixed) {
            return Err(GraphError::AlreadyFixed(f.clone()));
        }
        let mut g = self.clone();
        for h in hide {
            g.eliminate(h);
        }
        Ok(g)
    }

    /// Projection onto `keep` (every other vertex must be random).
    pub fn project_onto(&self, keep: &VSet) -> Result<MixedGraph, GraphError> {
        let hide: VSet = self.kinds.keys().filter(|v| !keep.contains(*v)).cloned().collect();
        self.latent_project(&hide)
    }

    fn eliminate(&mut self, h: &str) {
        let pa = self.parents_of(h);
        let ch = self.children_of(h);
        let sib = self.siblings_of(h);
        for p in &pa {
            for c in &ch {
                self.directed.insert((p.clone(), c.clone()));
            }
        }
        for c1 in &ch {
            for c2 in &ch {
                if c1 < c2 {
                    self.bidirected.insert(ordered(c1, c2));
                }
            }
            for s in &sib {
                if s != c1 {
                    self.bidirected.insert(ordered(s, c1));
                }
            }
        }
        self.kinds.remove(h);
        self.directed.retain(|(a, b)| a != h && b != h);
        self.bidirected.retain(|(a, b)| a != h && b != h);
    }

    /// m-separation of `x` and `y` given `z`. Fixed vertices are always
    /// treated as conditioned on.
    pub fn m_separated(&self, x: &VSet, y: &VSet, z: &VSet) -> bool {
        let mut cond: VSet = z.clone();
        cond.extend(self.fixed().into_iter().filter(|f| !x.contains(f) && !y.contains(f)));
        let an_z = self.closure(&cond, false);
        // state: (vertex, arrived through an arrowhead at vertex)
        let mut seen: BTreeSet<(String, bool)> = BTreeSet::new();
        let mut queue: VecDeque<(String, bool)> = VecDeque::new();
        for v in x {
            for (n, into) in self.moves(v) {
                if seen.insert((n.clone(), into)) {
                    queue.push_back((n, into));
                }
            }
        }
        while let Some((v, into)) = queue.pop_front() {
            if y.contains(&v) {
                return false;
            }
            if x.contains(&v) {
                continue;
            }
            for (n, next_into, head_at_v) in self.moves_marked(&v) {
                let collider = into && head_at_v;
                let pass = if collider { an_z.contains(&v) } else { !cond.contains(&v) };
                if pass && seen.insert((n.clone(), next_into)) {
                    queue.push_back((n, next_into));
                }
            }
        }
        true
    }

    fn moves(&self, v: &str) -> Vec<(String, bool)> {
        self.moves_marked(v).into_iter().map(|(n, i, _)| (n, i)).collect()
    }

    /// Neighbours of `v` as (neighbour, arrowhead at neighbour, arrowhead at v).
    fn moves_marked(&self, v: &str) -> Vec<(String, bool, bool)> {
        let mut out = Vec::new();
        for c in self.children_of(v) {
            out.push((c, true, false));
        }
        for p in self.parents_of(v) {
            out.push((p, false, true));
        }
        for s in self.siblings_of(v) {
            out.push((s, true, true));
        }
        out
    }

    fn require_random(&self, v: &str) -> Result<(), GraphError> {
        match self.kinds.get(v) {
            None => Err(GraphError::UnknownVertex(v.to_string())),
            Some(VertexKind::Fixed) => Err(GraphError::AlreadyFixed(v.to_string())),
            Some(k) if k.is_hidden() => Err(GraphError::HiddenVertex(v.to_string())),
            _ => Ok(()),
        }
    }

    /// True iff the only descendant of `v` inside its district is `v`.
    pub fn fixable(&self, v: &str) -> Result<bool, GraphError> {
        self.require_random(v)?;
        let de = self.descendants_of(v);
        let dis = self.district_of(v);
        Ok(de.intersection(&dis).count() == 1)
    }

    /// Fixes `v`: it becomes a fixed vertex and every edge with an
    /// arrowhead at it is removed.
    pub fn fix(&self, v: &str) -> Result<MixedGraph, GraphError> {
        if !self.fixable(v)? {
            return Err(GraphError::NotFixable(v.to_string()));
        }
        Ok(self.intervene(v))
    }

    /// The edge surgery of [`fix`](Self::fix) without the fixability check.
    pub fn intervene(&self, v: &str) -> MixedGraph {
        let mut g = self.clone();
        g.directed.retain(|(_, b)| b != v);
        g.bidirected.retain(|(a, b)| a != v && b != v);
        g.kinds.insert(v.to_string(), VertexKind::Fixed);
        g
    }

    pub fn intervene_set(&self, s: &VSet) -> MixedGraph {
        s.iter().fold(self.clone(), |g, v| g.intervene(v))
    }

    /// Greedy valid fixing sequence for `j`: repeatedly fixes the least-named
    /// fixable vertex. On failure returns the stuck remainder.
    pub fn find_valid_sequence(&self, j: &VSet) -> Result<Vec<String>, VSet> {
        let mut g = self.clone();
        let mut rest = j.clone();
        let mut seq = Vec::new();
        while !rest.is_empty() {
            let next = rest.iter().find(|v| g.fixable(v).unwrap_or(false)).cloned();
            match next {
                Some(v) => {
                    g = g.intervene(&v);
                    rest.remove(&v);
                    seq.push(v);
                }
                None => return Err(rest),
            }
        }
        Ok(seq)
    }

    /// Random vertices that are parents of `v` or reachable from `v` along a
    /// collider path (the district of `v` and its parents), minus `v`.
    pub fn mb_star(&self, v: &str) -> VSet {
        let dis = self.district_of(v);
        let mut out: VSet = dis.iter().flat_map(|d| self.parents_of(d)).collect();
        out.extend(dis.iter().cloned());
        out.remove(v);
        let fixed = self.fixed();
        out.retain(|u| !fixed.contains(u));
        out
    }

    /// Splits every vertex in `a` into a random copy (keeping incoming and
    /// bidirected edges, and the name) and a fixed copy `do(a)` that keeps the
    /// outgoing directed edges.
    pub fn split_intervene(&self, a: &VSet) -> Result<MixedGraph, GraphError> {
        self.check_set(a)?;
        if let Some(h) = a.iter().find(|v| self.kinds[*v].is_hidden()) {
            return Err(GraphError::HiddenVertex(h.clone()));
        }
        let mut g = self.clone();
        for v in a {
            if g.kinds[v] == VertexKind::Fixed {
                continue;
            }
            let copy = split_name(v);
            g.kinds.insert(copy.clone(), VertexKind::Fixed);
            let out: Vec<_> = g.directed.iter().filter(|(x, _)| x == v).cloned().collect();
            for (x, y) in out {
                g.directed.remove(&(x, y.clone()));
                g.directed.insert((copy.clone(), y));
            }
        }
        Ok(g)
    }

    /// Graph text in the bundled format; round-trips through [`parse_graph`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (v, k) in &self.kinds {
            match k {
                VertexKind::Observed => s.push_str(&format!("vertex {v}\n")),
                VertexKind::ResolvableHidden => s.push_str(&format!("vertex {v} u\n")),
                VertexKind::UnresolvableHidden => s.push_str(&format!("vertex {v} l\n")),
                VertexKind::Fixed => s.push_str(&format!("fixed {v}\n")),
            }
        }
        for (a, b) in &self.directed {
            s.push_str(&format!("{a} -> {b}\n"));
        }
        for (a, b) in &self.bidirected {
            s.push_str(&format!("{a} <-> {b}\n"));
        }
        s
    }
}

pub fn split_name(v: &str) -> String {
    format!("do({v})")
}

impl fmt::Display for MixedGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Parses the line-oriented graph format:
///
/// ```text
/// vertex A            # observed by default
/// vertex U u          # resolvable hidden; `l` for unresolvable
/// fixed W
/// A -> Y
/// A <-> Y
/// ```
pub fn parse_graph(text: &str) -> Result<MixedGraph, GraphError> {
    let mut g = MixedGraph::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let toks: Vec<&str> = content.split_whitespace().collect();
        let err = |msg: String| GraphError::Parse { line, msg };
        let wrap = |e: GraphError| GraphError::Parse { line, msg: e.to_string() };
        match toks.as_slice() {
            ["vertex", name] => g.add_vertex(name, VertexKind::Observed).map_err(wrap)?,
            ["vertex", name, kind] => {
                let k = match *kind {
                    "observed" => VertexKind::Observed,
                    "u" => VertexKind::ResolvableHidden,
                    "l" => VertexKind::UnresolvableHidden,
                    other => return Err(err(format!("unknown vertex kind `{other}`"))),
                };
                g.add_vertex(name, k).map_err(wrap)?
            }
            ["fixed", name] => g.add_vertex(name, VertexKind::Fixed).map_err(wrap)?,
            [a, "->", b] => g.add_directed(a, b).map_err(wrap)?,
            [a, "<->", b] => g.add_bidirected(a, b).map_err(wrap)?,
            _ => return Err(err(format!("cannot parse `{content}`"))),
        }
    }
    Ok(g)
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use proptest::prelude::*;

    /// Random ADMG over `V0..V{n-1}` with a random topological order.
    pub fn arb_admg(max_n: usize) -> impl Strategy<Value = MixedGraph> {
        (1..=max_n).prop_flat_map(|n| {
            let pairs = n * (n - 1) / 2;
            (
                Just(n),
                proptest::collection::vec(any::<u32>(), n),
                proptest::collection::vec(0u8..4, pairs),
                proptest::collection::vec(0u8..5, pairs),
            )
                .prop_map(|(n, keys, dir, bi)| {
                    let mut order: Vec<usize> = (0..n).collect();
                    order.sort_by_key(|&i| keys[i]);
                    let names: Vec<String> = (0..n).map(|i| format!("V{i}")).collect();
                    let mut g = MixedGraph::new();
                    for v in &names {
                        g.add_vertex(v, VertexKind::Observed).unwrap();
                    }
                    let mut k = 0;
                    for i in 0..n {
                        for j in (i + 1)..n {
                            let (a, b) = (&names[order[i]], &names[order[j]]);
                            if dir[k] == 0 {
                                g.add_directed(a, b).unwrap();
                            }
                            if bi[k] == 0 {
                                g.add_bidirected(a, b).unwrap();
                            }
                            k += 1;
                        }
                    }
                    g
                })
        })
    }

    /// Every simple path between `s` and `t`, as vertex lists with the edge
    /// used at each hop: 0 = forward directed, 1 = backward directed, 2 = bidirected.
    pub fn all_paths(g: &MixedGraph, s: &str, t: &str) -> Vec<(Vec<String>, Vec<u8>)> {
        let mut out = Vec::new();
        let mut path = vec![s.to_string()];
        let mut marks = Vec::new();
        walk(g, t, &mut path, &mut marks, &mut out);
        out
    }

    fn walk(g: &MixedGraph, t: &str, path: &mut Vec<String>, marks: &mut Vec<u8>, out: &mut Vec<(Vec<String>, Vec<u8>)>) {
        let v = path.last().unwrap().clone();
        if v == t && path.len() > 1 {
            out.push((path.clone(), marks.clone()));
            return;
        }
        let mut steps: Vec<(String, u8)> = Vec::new();
        steps.extend(g.children_of(&v).into_iter().map(|c| (c, 0)));
        steps.extend(g.parents_of(&v).into_iter().map(|p| (p, 1)));
        steps.extend(g.siblings_of(&v).into_iter().map(|s| (s, 2)));
        for (n, m) in steps {
            if path.contains(&n) {
                continue;
            }
            path.push(n);
            marks.push(m);
            walk(g, t, path, marks, out);
            path.pop();
            marks.pop();
        }
    }

    /// Arrowhead at the far end of a hop / at the near end.
    pub fn head_at_far(m: u8) -> bool {
        m == 0 || m == 2
    }
    pub fn head_at_near(m: u8) -> bool {
        m == 1 || m == 2
    }

    pub fn brute_m_separated(g: &MixedGraph, x: &VSet, y: &VSet, z: &VSet) -> bool {
        let mut cond = z.clone();
        cond.extend(g.fixed().into_iter().filter(|f| !x.contains(f) && !y.contains(f)));
        let an = g.ancestors(&cond).unwrap();
        for s in x {
            for t in y {
                for (path, marks) in all_paths(g, s, t) {
                    if path[1..path.len() - 1].iter().any(|v| x.contains(v)) {
                        continue;
                    }
                    let open = (1..path.len() - 1).all(|i| {
                        let collider = head_at_far(marks[i - 1]) && head_at_near(marks[i]);
                        if collider {
                            an.contains(&path[i])
                        } else {
                            !cond.contains(&path[i])
                        }
                    });
                    if open {
                        return false;
                    }
                }
            }
        }
        true
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use proptest::prelude::*;

    fn fig2c() -> MixedGraph {
        MixedGraph::from_edges(
            &["A", "C", "M", "Y"],
            &[("C", "A"), ("C", "M"), ("C", "Y"), ("A", "M"), ("M", "Y")],
            &[("A", "Y")],
        )
    }

    fn fig3b() -> MixedGraph {
        MixedGraph::from_edges(
            &["A", "C", "M", "Y"],
            &[("C", "A"), ("C", "M"), ("C", "Y"), ("A", "M"), ("M", "Y")],
            &[("A", "Y"), ("M", "Y"), ("A", "M")],
        )
    }

    #[test]
    fn parents_and_descendants() {
        let g = fig2c();
        assert_eq!(g.parents(&vset(["Y"])).unwrap(), vset(["C", "M"]));
        assert_eq!(g.parents(&VSet::new()).unwrap(), VSet::new());
        assert_eq!(g.descendants(&vset(["A"])).unwrap(), vset(["A", "M", "Y"]));
        assert_eq!(g.descendants(&vset(["Y"])).unwrap(), vset(["Y"]));
        assert!(matches!(g.parents(&vset(["Q"])), Err(GraphError::UnknownVertex(_))));
    }

    #[test]
    fn districts_partition() {
        let g = fig2c();
        assert_eq!(g.districts(&vset(["Y", "M", "C"])), vec![vset(["C"]), vset(["M"]), vset(["Y"])]);
        assert_eq!(g.districts(&g.vertex_set()), vec![vset(["A", "Y"]), vset(["C"]), vset(["M"])]);
        let h = MixedGraph::from_edges(&["A", "B", "C", "D"], &[], &[("A", "B"), ("B", "C")]);
        assert_eq!(h.districts(&h.vertex_set()), vec![vset(["A", "B", "C"]), vset(["D"])]);
    }

    #[test]
    fn projection_of_front_door_dag() {
        let mut g = fig2c();
        g.bidirected.clear();
        g.add_vertex("U", VertexKind::ResolvableHidden).unwrap();
        g.add_directed("U", "A").unwrap();
        g.add_directed("U", "Y").unwrap();
        assert_eq!(g.latent_project(&vset(["U"])).unwrap(), fig2c());
        assert_eq!(g.latent_project(&VSet::new()).unwrap(), g);
    }

    #[test]
    fn fixability_and_sequences() {
        let g = fig2c();
        assert!(g.fixable("Y").unwrap());
        assert!(!g.fixable("A").unwrap());
        assert!(g.find_valid_sequence(&vset(["C", "A", "M"])).is_ok());
        assert_eq!(g.find_valid_sequence(&VSet::new()), Ok(vec![]));
        assert_eq!(fig3b().find_valid_sequence(&vset(["C", "M", "A"])), Err(vset(["A", "M"])));
        let f = g.fix("Y").unwrap();
        assert!(matches!(f.fix("Y"), Err(GraphError::AlreadyFixed(_))));
        assert!(matches!(g.fix("A"), Err(GraphError::NotFixable(_))));
        assert_eq!(f.parents_of("Y"), VSet::new());
        assert_eq!(f.directed.len(), 3);
    }

    #[test]
    fn markov_blanket() {
        assert_eq!(fig2c().mb_star("Y"), vset(["A", "C", "M"]));
        let g = MixedGraph::from_edges(&["A"], &[], &[]);
        assert_eq!(g.mb_star("A"), VSet::new());
    }

    #[test]
    fn m_separation_examples() {
        let g = fig2c();
        assert!(!g.m_separated(&vset(["C"]), &vset(["Y"]), &vset(["A", "M"])));
        assert!(!g.m_separated(&vset(["A"]), &vset(["C"]), &VSet::new()));
        // proxy graph with hidden confounder
        let mut h = MixedGraph::new();
        for v in ["A", "C", "W", "Y", "Z"] {
            h.add_vertex(v, VertexKind::Observed).unwrap();
        }
        h.add_vertex("U", VertexKind::ResolvableHidden).unwrap();
        for (a, b) in [("U", "A"), ("U", "Y"), ("U", "C"), ("U", "Z"), ("U", "W"), ("C", "A"), ("C", "Y"), ("C", "Z"), ("C", "W"), ("A", "Y"), ("A", "Z"), ("W", "Y")] {
            h.add_directed(a, b).unwrap();
        }
        assert!(h.m_separated(&vset(["Z"]), &vset(["Y"]), &vset(["U", "C", "A"])));
        let s = h.split_intervene(&vset(["A"])).unwrap();
        assert!(s.m_separated(&vset(["Z"]), &vset(["Y"]), &vset(["U", "C"])));
        assert!(!h.m_separated(&vset(["Z"]), &vset(["Y"]), &vset(["U", "C"])));
    }

    #[test]
    fn split_with_empty_set_is_identity() {
        let g = fig2c();
        assert_eq!(g.split_intervene(&VSet::new()).unwrap(), g);
    }

    #[test]
    fn parser_roundtrip_and_errors() {
        let text = "# front door\nvertex A\nvertex C\nvertex M\nvertex Y\nvertex U u\nC -> A\nC -> M\nC -> Y\nA -> M\nM -> Y\nU -> A\nU -> Y\n";
        let g = parse_graph(text).unwrap();
        assert_eq!(parse_graph(&g.to_text()).unwrap(), g);
        let e = parse_graph("vertex A\nvertex B\nA -> B\nB -> A\n").unwrap_err();
        assert!(matches!(e, GraphError::Parse { line: 4, .. }));
        let e = parse_graph("vertex A\nA -> B\n").unwrap_err();
        assert!(matches!(e, GraphError::Parse { line: 2, .. }));
        let e = parse_graph("vertex A\nvertex B\nA <-> B\nB <-> A\n").unwrap_err();
        assert!(matches!(e, GraphError::Parse { line: 4, .. }));
        let e = parse_graph("vertex A q\n").unwrap_err();
        assert!(matches!(e, GraphError::Parse { line: 1, .. }));
    }

    fn brute_mb_star(g: &MixedGraph, v: &str) -> VSet {
        // collider paths: the first hop has an arrowhead at `v`, every
        // interior vertex is a collider
        let mut out = VSet::new();
        for t in g.random() {
            if t == v {
                continue;
            }
            for (path, marks) in all_paths(g, v, &t) {
                let first = head_at_near(marks[0]);
                let interior = (1..path.len() - 1).all(|i| head_at_far(marks[i - 1]) && head_at_near(marks[i]));
                if first && interior {
                    out.insert(t.clone());
                    break;
                }
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn m_separation_matches_path_enumeration(g in arb_admg(7), seed in 0u64..1000) {
            let names: Vec<String> = g.vertex_set().into_iter().collect();
            let n = names.len();
            prop_assume!(n >= 2);
            let pick = |k: u64| names[(k as usize) % n].clone();
            let x = vset([pick(seed)]);
            let y = vset([pick(seed / 7 + 1)]);
            prop_assume!(x != y);
            let z: VSet = names.iter().enumerate()
                .filter(|(i, v)| (seed >> i) & 1 == 1 && !x.contains(*v) && !y.contains(*v))
                .map(|(_, v)| v.clone()).collect();
            prop_assert_eq!(g.m_separated(&x, &y, &z), brute_m_separated(&g, &x, &y, &z));
        }

        #[test]
        fn mb_star_matches_collider_paths(g in arb_admg(6)) {
            for v in g.vertex_set() {
                prop_assert_eq!(g.mb_star(&v), brute_mb_star(&g, &v));
            }
        }

        #[test]
        fn districts_are_a_partition(g in arb_admg(8)) {
            let ds = g.districts(&g.vertex_set());
            let mut union = VSet::new();
            for d in &ds {
                prop_assert!(union.is_disjoint(d));
                union.extend(d.iter().cloned());
            }
            prop_assert_eq!(union, g.vertex_set());
        }

        #[test]
        fn projection_composes(g in arb_admg(7), mask in 0u32..128, split in 0u32..128) {
            let names: Vec<String> = g.vertex_set().into_iter().collect();
            let h1: VSet = names.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1 && split >> i & 1 == 1).map(|(_, v)| v.clone()).collect();
            let h2: VSet = names.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1 && split >> i & 1 == 0).map(|(_, v)| v.clone()).collect();
            let all: VSet = h1.union(&h2).cloned().collect();
            let step = g.latent_project(&h1).unwrap().latent_project(&h2).unwrap();
            prop_assert_eq!(step, g.latent_project(&all).unwrap());
        }

        #[test]
        fn projection_matches_path_definition(g in arb_admg(6), mask in 0u32..64) {
            let names: Vec<String> = g.vertex_set().into_iter().collect();
            let hide: VSet = names.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, v)| v.clone()).collect();
            let p = g.latent_project(&hide).unwrap();
            let keep: Vec<&String> = names.iter().filter(|v| !hide.contains(*v)).collect();
            for a in &keep {
                for b in &keep {
                    if a == b { continue; }
                    let paths = all_paths(&g, a, b);
                    let inner_hidden = |path: &Vec<String>| path[1..path.len() - 1].iter().all(|v| hide.contains(v));
                    let dir = paths.iter().any(|(p, m)| inner_hidden(p) && m.iter().all(|&x| x == 0));
                    let bi = paths.iter().any(|(p, m)| {
                        inner_hidden(p)
                            && head_at_near(m[0])
                            && head_at_far(*m.last().unwrap())
                            && (1..p.len() - 1).all(|i| !(head_at_far(m[i - 1]) && head_at_near(m[i])))
                    });
                    prop_assert_eq!(p.has_directed(a, b), dir, "{} -> {}", a, b);
                    prop_assert_eq!(p.has_bidirected(a, b), bi, "{} <-> {}", a, b);
                }
            }
        }

        #[test]
        fn fixable_iff_singleton_sequence(g in arb_admg(7)) {
            for v in g.vertex_set() {
                prop_assert_eq!(g.fixable(&v).unwrap(), g.find_valid_sequence(&vset([&v])).is_ok());
            }
        }

        #[test]
        fn parse_roundtrip(g in arb_admg(7)) {
            prop_assert_eq!(parse_graph(&g.to_text()).unwrap(), g);
        }
    }
}
