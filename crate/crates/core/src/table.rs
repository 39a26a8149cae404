//! Dense factors over named discrete variables.

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TableError {
    #[error("zero-mass stratum {0}")]
    ZeroMass(String),
    #[error("cardinality mismatch for `{0}`")]
    CardMismatch(String),
    #[error("variable `{0}` not in table")]
    MissingVar(String),
}

/// Row-major table; variables kept in lexicographic order, last varies fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    vars: Vec<String>,
    cards: Vec<usize>,
    data: Vec<f64>,
}

pub type Assignment = BTreeMap<String, usize>;

fn strides(cards: &[usize]) -> Vec<usize> {
    let mut s = vec![1; cards.len()];
    for i in (0..cards.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * cards[i + 1];
    }
    s
}

impl Table {
    pub fn scalar(x: f64) -> Self {
        Table { vars: vec![], cards: vec![], data: vec![x] }
    }

    /// Builds a table from `(var, card)` pairs in any order, filling each cell
    /// with `f(assignment)`.
    pub fn from_fn(scope: &[(String, usize)], mut f: impl FnMut(&Assignment) -> f64) -> Self {
        let mut sorted = scope.to_vec();
        sorted.sort();
        sorted.dedup();
        let vars: Vec<String> = sorted.iter().map(|(v, _)| v.clone()).collect();
        let cards: Vec<usize> = sorted.iter().map(|(_, c)| *c).collect();
        let size = cards.iter().product();
        let mut data = Vec::with_capacity(size);
        let mut asg: Assignment = vars.iter().map(|v| (v.clone(), 0)).collect();
        let mut idx = vec![0usize; vars.len()];
        for _ in 0..size {
            for (k, v) in vars.iter().enumerate() {
                *asg.get_mut(v).unwrap() = idx[k];
            }
            data.push(f(&asg));
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                if idx[k] < cards[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Table { vars, cards, data }
    }

    /// Table with variables in the given order; data must be row-major in
    /// that order.
    pub fn from_ordered(vars: &[String], cards: &[usize], data: &[f64]) -> Self {
        let scope: Vec<(String, usize)> = vars.iter().cloned().zip(cards.iter().copied()).collect();
        let st = strides(cards);
        Table::from_fn(&scope, |a| {
            let i: usize = vars.iter().zip(&st).map(|(v, s)| a[v] * s).sum();
            data[i]
        })
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    pub fn cards(&self) -> &[usize] {
        &self.cards
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn card(&self, v: &str) -> Option<usize> {
        self.vars.iter().position(|x| x == v).map(|i| self.cards[i])
    }

    pub fn scope(&self) -> Vec<(String, usize)> {
        self.vars.iter().cloned().zip(self.cards.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value at an assignment; extra keys are ignored.
    pub fn get(&self, a: &Assignment) -> f64 {
        let st = strides(&self.cards);
        let i: usize = self.vars.iter().zip(&st).map(|(v, s)| a.get(v).copied().unwrap_or(0) * s).sum();
        self.data[i]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Table {
        Table { vars: self.vars.clone(), cards: self.cards.clone(), data: self.data.iter().map(|x| f(*x)).collect() }
    }

    fn union_scope(&self, other: &Table) -> Result<Vec<(String, usize)>, TableError> {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for (v, c) in self.scope().into_iter().chain(other.scope()) {
            if let Some(old) = m.insert(v.clone(), c) {
                if old != c {
                    return Err(TableError::CardMismatch(v));
                }
            }
        }
        Ok(m.into_iter().collect())
    }

    fn combine(&self, other: &Table, f: impl Fn(f64, f64, &Assignment) -> Result<f64, TableError>) -> Result<Table, TableError> {
        let scope = self.union_scope(other)?;
        let mut err = None;
        let t = Table::from_fn(&scope, |a| match f(self.get(a), other.get(a), a) {
            Ok(x) => x,
            Err(e) => {
                err.get_or_insert(e);
                0.0
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(t),
        }
    }

    pub fn product(&self, other: &Table) -> Result<Table, TableError> {
        self.combine(other, |x, y, _| Ok(x * y))
    }

    pub fn add(&self, other: &Table) -> Result<Table, TableError> {
        self.combine(other, |x, y, _| Ok(x + y))
    }

    /// Pointwise quotient; a zero denominator is an error naming the stratum.
    pub fn divide(&self, other: &Table) -> Result<Table, TableError> {
        self.combine(other, |x, y, a| {
            if y == 0.0 {
                Err(TableError::ZeroMass(fmt_assignment(a)))
            } else {
                Ok(x / y)
            }
        })
    }

    /// Sums out `vars`. A variable absent from the table multiplies by its
    /// cardinality, taken from `cards`.
    pub fn sum_out(&self, vars: &[String], cards: &BTreeMap<String, usize>) -> Result<Table, TableError> {
        let mut factor = 1.0;
        for v in vars {
            if !self.vars.contains(v) {
                factor *= *cards.get(v).ok_or_else(|| TableError::MissingVar(v.clone()))? as f64;
            }
        }
        let keep: Vec<(String, usize)> = self.scope().into_iter().filter(|(v, _)| !vars.contains(v)).collect();
        let out = self.marginal_onto(&keep);
        Ok(if factor == 1.0 { out } else { out.map(|x| x * factor) })
    }

    /// Sums every variable not in `keep` (given as (var, card) pairs present in the table).
    fn marginal_onto(&self, keep: &[(String, usize)]) -> Table {
        let kst = {
            let mut sorted = keep.to_vec();
            sorted.sort();
            sorted
        };
        let kcards: Vec<usize> = kst.iter().map(|(_, c)| *c).collect();
        let kstr = strides(&kcards);
        let pos: Vec<Option<usize>> = self.vars.iter().map(|v| kst.iter().position(|(k, _)| k == v)).collect();
        let mut data = vec![0.0; kcards.iter().product()];
        let mut idx = vec![0usize; self.vars.len()];
        for x in &self.data {
            let mut j = 0;
            for (k, p) in pos.iter().enumerate() {
                if let Some(p) = p {
                    j += idx[k] * kstr[*p];
                }
            }
            data[j] += x;
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                if idx[k] < self.cards[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        Table { vars: kst.iter().map(|(v, _)| v.clone()).collect(), cards: kcards, data }
    }

    /// Keeps only `vars` (which must be present), summing the rest.
    pub fn marginal(&self, vars: &[String]) -> Result<Table, TableError> {
        let mut keep = Vec::new();
        for v in vars {
            let c = self.card(v).ok_or_else(|| TableError::MissingVar(v.clone()))?;
            keep.push((v.clone(), c));
        }
        Ok(self.marginal_onto(&keep))
    }

    /// Slices at `var = value`, dropping the variable. Absent variables are a no-op.
    pub fn restrict(&self, var: &str, value: usize) -> Table {
        let Some(i) = self.vars.iter().position(|v| v == var) else {
            return self.clone();
        };
        let scope: Vec<(String, usize)> = self.scope().into_iter().filter(|(v, _)| v != var).collect();
        let st = strides(&self.cards);
        Table::from_fn(&scope, |a| {
            let mut j = value * st[i];
            for (k, v) in self.vars.iter().enumerate() {
                if k != i {
                    j += a[v] * st[k];
                }
            }
            self.data[j]
        })
    }

    pub fn max_abs_diff(&self, other: &Table) -> Result<f64, TableError> {
        let d = self.combine(other, |x, y, _| Ok((x - y).abs()))?;
        Ok(d.data.iter().cloned().fold(0.0, f64::max))
    }

    /// Data laid out in an explicit variable order.
    pub fn data_in_order(&self, order: &[String]) -> Vec<f64> {
        let cards: Vec<usize> = order.iter().map(|v| self.card(v).expect("var in table")).collect();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; order.len()];
        let total: usize = cards.iter().product();
        for _ in 0..total {
            let a: Assignment = order.iter().cloned().zip(idx.iter().copied()).collect();
            out.push(self.get(&a));
            for k in (0..idx.len()).rev() {
                idx[k] += 1;
                if idx[k] < cards[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        out
    }
}

pub fn fmt_assignment(a: &Assignment) -> String {
    let parts: Vec<String> = a.iter().map(|(k, v)| format!("{k}={v}")).collect();
    format!("{{{}}}", parts.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &str) -> String {
        v.to_string()
    }

    #[test]
    fn product_and_marginal() {
        let a = Table::from_ordered(&[s("X")], &[2], &[0.3, 0.7]);
        let b = Table::from_ordered(&[s("X"), s("Y")], &[2, 3], &[0.1, 0.2, 0.7, 0.5, 0.25, 0.25]);
        let j = a.product(&b).unwrap();
        assert!((j.total() - 1.0).abs() < 1e-12);
        let y = j.marginal(&[s("Y")]).unwrap();
        assert!((y.data()[0] - (0.03 + 0.35)).abs() < 1e-12);
        let cards: BTreeMap<String, usize> = [(s("Z"), 4)].into();
        let z = y.sum_out(&[s("Y"), s("Z")], &cards).unwrap();
        assert!((z.data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn ordering_is_canonical() {
        let t = Table::from_ordered(&[s("B"), s("A")], &[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.vars(), &[s("A"), s("B")]);
        assert_eq!(t.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(t.data_in_order(&[s("B"), s("A")]), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.restrict("B", 1).data(), &[3.0, 4.0]);
    }

    #[test]
    fn zero_division_names_stratum() {
        let a = Table::from_ordered(&[s("X")], &[2], &[1.0, 1.0]);
        let b = Table::from_ordered(&[s("X")], &[2], &[1.0, 0.0]);
        assert_eq!(a.divide(&b), Err(TableError::ZeroMass("{X=1}".into())));
    }
}
