use std::cmp::Ordering;
use std::ops::{Add, Sub};

use crate::error::{Error, Result};

/// Dense `rows × cols` cost matrix; `+∞` marks a forbidden pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("CostMatrix", &[rows, cols], &[data.len()]));
        }
        if let Some(bad) = data.iter().find(|v| v.is_nan() || **v == f64::NEG_INFINITY) {
            return Err(Error::domain("CostMatrix", format!("cost {bad} is not in [finite, +inf]")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>], cols: usize) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dim("CostMatrix", &[cols], &[r.len()]));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Optimal assignment of ground-truth rows to prediction columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `(gt, pred)` pairs sorted by ground-truth index; infinite-cost pairs
    /// are never included.
    pub assignment: Vec<(usize, usize)>,
    /// One flag per prediction, set iff the prediction is matched.
    pub match_labels: Vec<bool>,
    /// Sum of the matched costs in ground-truth order.
    pub total_cost: f64,
}

impl MatchResult {
    fn from_pairs(cost: &CostMatrix, mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.retain(|&(r, c)| cost.get(r, c).is_finite());
        pairs.sort_unstable();
        let mut labels = vec![false; cost.cols()];
        for &(_, c) in &pairs {
            labels[c] = true;
        }
        let total = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
        Self { assignment: pairs, match_labels: labels, total_cost: total }
    }

    pub fn matched(&self) -> usize {
        self.assignment.len()
    }
}

/// Lexicographic cost: number of forbidden edges first, then the finite sum.
/// Minimizing it maximizes the number of finite matches and then minimizes
/// their total, without a large-number sentinel swamping the finite part.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Lex {
    inf: i64,
    fin: f64,
}

impl Lex {
    const ZERO: Lex = Lex { inf: 0, fin: 0.0 };
    const MAX: Lex = Lex { inf: i64::MAX, fin: f64::INFINITY };

    fn of(c: f64) -> Self {
        if c.is_finite() {
            Lex { inf: 0, fin: c }
        } else {
            Lex { inf: 1, fin: 0.0 }
        }
    }
}

impl Add for Lex {
    type Output = Lex;
    fn add(self, o: Lex) -> Lex {
        Lex { inf: self.inf + o.inf, fin: self.fin + o.fin }
    }
}

impl Sub for Lex {
    type Output = Lex;
    fn sub(self, o: Lex) -> Lex {
        Lex { inf: self.inf - o.inf, fin: self.fin - o.fin }
    }
}

impl PartialOrd for Lex {
    fn partial_cmp(&self, o: &Lex) -> Option<Ordering> {
        Some(self.inf.cmp(&o.inf).then(self.fin.total_cmp(&o.fin)))
    }
}

/// Minimum-cost assignment of every row to a distinct column by shortest
/// augmenting paths with row and column potentials, `O(rows² · cols)`.
///
/// Among all assignments the solver first minimizes the number of `+∞`
/// pairs, then the finite total; `+∞` pairs are dropped from the result, so
/// rows without a finite option stay unmatched. Equal-cost alternatives
/// resolve toward the lowest prediction index during the path search.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchResult> {
    let (n, m) = (cost.rows(), cost.cols());
    if n > m {
        return Err(Error::contract(
            "hungarian",
            format!("{n} ground-truth rows exceed {m} prediction columns"),
        ));
    }
    if n == 0 {
        return Ok(MatchResult::from_pairs(cost, Vec::new()));
    }
    let a = |i: usize, j: usize| Lex::of(cost.get(i - 1, j - 1));
    // 1-based rows and columns; column 0 is the virtual source.
    let mut u = vec![Lex::ZERO; n + 1];
    let mut v = vec![Lex::ZERO; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![Lex::MAX; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = Lex::MAX;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] = u[owner[j]] + delta;
                    v[j] = v[j] - delta;
                } else {
                    minv[j] = minv[j] - delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    Ok(MatchResult::from_pairs(cost, pairs))
}

/// Exhaustive search over every injection of rows into columns, with the
/// same objective as [`hungarian`]. Exponential; meant as a reference for
/// small instances.
pub fn exhaustive_assignment(cost: &CostMatrix) -> Result<MatchResult> {
    let (n, m) = (cost.rows(), cost.cols());
    if n > m {
        return Err(Error::contract(
            "exhaustive_assignment",
            format!("{n} ground-truth rows exceed {m} prediction columns"),
        ));
    }
    struct Search<'a> {
        cost: &'a CostMatrix,
        used: Vec<bool>,
        current: Vec<usize>,
        best: Option<(Lex, Vec<usize>)>,
    }
    impl Search<'_> {
        fn run(&mut self, row: usize, acc: Lex) {
            if row == self.cost.rows() {
                if self.best.as_ref().is_none_or(|(b, _)| acc < *b) {
                    self.best = Some((acc, self.current.clone()));
                }
                return;
            }
            for c in 0..self.cost.cols() {
                if !self.used[c] {
                    self.used[c] = true;
                    self.current.push(c);
                    let step = Lex::of(self.cost.get(row, c));
                    self.run(row + 1, acc + step);
                    self.current.pop();
                    self.used[c] = false;
                }
            }
        }
    }
    let mut s = Search { cost, used: vec![false; m], current: Vec::with_capacity(n), best: None };
    s.run(0, Lex::ZERO);
    let cols = s.best.map(|(_, c)| c).unwrap_or_default();
    Ok(MatchResult::from_pairs(cost, cols.into_iter().enumerate().collect()))
}
