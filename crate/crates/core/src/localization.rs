//! Core-subnet selection from a score matrix.
//!
//! A subnet of an `n × m` weight is a set of input neurons (rows) and output
//! neurons (columns); its score is the sum of the score matrix over their
//! cross product. Maximizing it under a size budget is NP-hard, so two greedy
//! passes are run (rows first, columns first) and the better one kept. An
//! exhaustive solver is provided as an oracle for small matrices.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Selected input-neuron rows and output-neuron columns, both strictly
/// increasing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subnet {
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl Subnet {
    pub fn full(n: usize, m: usize) -> Self {
        Self {
            rows: (0..n).collect(),
            cols: (0..m).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        self.rows.binary_search(&r).is_ok() && self.cols.binary_search(&c).is_ok()
    }

    /// Checks ordering, range, and non-emptiness against an `n × m` weight.
    pub fn validate(&self, n: usize, m: usize) -> Result<()> {
        for (idx, bound, what) in [
            (&self.rows, n, "subnet row"),
            (&self.cols, m, "subnet column"),
        ] {
            if idx.is_empty() {
                return Err(Error::State(format!("{what} set is empty")));
            }
            if !idx.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::State(format!(
                    "{what} indices not strictly increasing"
                )));
            }
            if let Some(&last) = idx.last() {
                if last >= bound {
                    return Err(Error::Index {
                        what,
                        index: last,
                        len: bound,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Rank factor `p` for hidden layers and dimension-reduction factor `p_o`
/// for the output head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankFactor {
    pub p: f64,
    pub p_o: f64,
}

impl RankFactor {
    pub fn new(p: f64, p_o: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::config(format!(
                "rank factor p must lie in (0, 1], got {p}"
            )));
        }
        if !(p_o > 0.0 && p_o <= 1.0) {
            return Err(Error::config(format!(
                "dimension factor p_o must lie in (0, 1], got {p_o}"
            )));
        }
        Ok(Self { p, p_o })
    }

    pub fn uniform(p: f64) -> Result<Self> {
        Self::new(p, 1.0)
    }

    /// `(⌊n·p⌋, ⌊m·p⌋)`, rejecting a zero-sized side.
    pub fn budget(&self, n: usize, m: usize) -> Result<(usize, usize)> {
        let (a, b) = (floor_count(n, self.p), floor_count(m, self.p));
        if a == 0 || b == 0 {
            return Err(Error::config(format!(
                "rank factor p = {} is infeasible for a {n} x {m} layer (floor gives {a} x {b})",
                self.p
            )));
        }
        Ok((a, b))
    }

    pub fn output_budget(&self, m: usize) -> Result<usize> {
        let b = floor_count(m, self.p_o);
        if b == 0 {
            return Err(Error::config(format!(
                "dimension factor p_o = {} is infeasible for {m} outputs",
                self.p_o
            )));
        }
        Ok(b)
    }
}

/// `⌊n·p⌋`, tolerant of `n·p` landing a rounding error below an integer.
pub fn floor_count(n: usize, p: f64) -> usize {
    (n as f64 * p + 1e-9).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    RowMajor,
    ColumnMajor,
    Exhaustive,
    OutputColumns,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::RowMajor => "row2column",
            Strategy::ColumnMajor => "column2row",
            Strategy::Exhaustive => "exhaustive",
            Strategy::OutputColumns => "output_columns",
        })
    }
}

/// Indices of the `k` largest values, ties to the lower index, returned in
/// increasing order.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

fn check_scores(q: &DenseMatrix) -> Result<()> {
    if q.is_empty() {
        return Err(Error::config("empty score matrix"));
    }
    if q.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::config(
            "score matrix must be finite and non-negative",
        ));
    }
    Ok(())
}

/// Rows by row sums, then columns by column sums over those rows.
pub fn row2column(q: &DenseMatrix, p: RankFactor) -> Result<Subnet> {
    check_scores(q)?;
    let (a, b) = p.budget(q.rows(), q.cols())?;
    let rows = top_k(&q.row_sums(), a);
    let cols = top_k(&q.select_rows(&rows)?.col_sums(), b);
    Ok(Subnet { rows, cols })
}

/// Columns by column sums, then rows by row sums over those columns.
pub fn column2row(q: &DenseMatrix, p: RankFactor) -> Result<Subnet> {
    check_scores(q)?;
    let (a, b) = p.budget(q.rows(), q.cols())?;
    let cols = top_k(&q.col_sums(), b);
    let rows = top_k(&q.select_cols(&cols)?.row_sums(), a);
    Ok(Subnet { rows, cols })
}

/// Sum of `q` over the subnet's row × column cross product.
pub fn subnet_score(q: &DenseMatrix, s: &Subnet) -> Result<f64> {
    for &r in &s.rows {
        if r >= q.rows() {
            return Err(Error::Index {
                what: "subnet row",
                index: r,
                len: q.rows(),
            });
        }
    }
    for &c in &s.cols {
        if c >= q.cols() {
            return Err(Error::Index {
                what: "subnet column",
                index: c,
                len: q.cols(),
            });
        }
    }
    let mut total = 0.0;
    for &r in &s.rows {
        let row = q.row(r);
        for &c in &s.cols {
            total += row[c];
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub subnet: Subnet,
    pub score: f64,
    pub strategy: Strategy,
}

/// The better of [`row2column`] and [`column2row`]; an exact tie keeps the
/// row-major result.
pub fn select_best(q: &DenseMatrix, p: RankFactor) -> Result<Selection> {
    let by_rows = row2column(q, p)?;
    let by_cols = column2row(q, p)?;
    let (sr, sc) = (subnet_score(q, &by_rows)?, subnet_score(q, &by_cols)?);
    Ok(if sc > sr {
        Selection {
            subnet: by_cols,
            score: sc,
            strategy: Strategy::ColumnMajor,
        }
    } else {
        Selection {
            subnet: by_rows,
            score: sr,
            strategy: Strategy::RowMajor,
        }
    })
}

pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Lexicographic k-combinations of `0..n`.
struct Combinations {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            current: (k <= n).then(|| (0..k).collect()),
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let cur = self.current.as_mut().unwrap();
        let k = cur.len();
        let mut i = k;
        loop {
            if i == 0 {
                self.current = None;
                break;
            }
            i -= 1;
            if cur[i] < self.n - k + i {
                cur[i] += 1;
                for j in i + 1..k {
                    cur[j] = cur[j - 1] + 1;
                }
                break;
            }
        }
        Some(out)
    }
}

/// Exact maximizer of [`subnet_score`] by enumeration; ties resolve to the
/// lexicographically smallest `(rows, cols)`.
pub fn brute_force_subnet(q: &DenseMatrix, p: RankFactor) -> Result<Selection> {
    check_scores(q)?;
    let (a, b) = p.budget(q.rows(), q.cols())?;
    let count = binomial(q.rows(), a).saturating_mul(binomial(q.cols(), b));
    if count > BRUTE_FORCE_LIMIT {
        return Err(Error::Size(format!(
            "C({}, {a}) * C({}, {b}) = {count} candidates exceeds {BRUTE_FORCE_LIMIT}",
            q.rows(),
            q.cols()
        )));
    }
    let mut best: Option<(f64, Subnet)> = None;
    for rows in Combinations::new(q.rows(), a) {
        for cols in Combinations::new(q.cols(), b) {
            let mut total = 0.0;
            for &r in &rows {
                for &c in &cols {
                    total += q.get(r, c);
                }
            }
            if best.as_ref().is_none_or(|(s, _)| total > *s) {
                best = Some((
                    total,
                    Subnet {
                        rows: rows.clone(),
                        cols: cols.clone(),
                    },
                ));
            }
        }
    }
    let (score, subnet) = best.expect("at least one candidate");
    Ok(Selection {
        subnet,
        score,
        strategy: Strategy::Exhaustive,
    })
}

/// Output-head subnet: every input row, and the top `⌊m·p_o⌋` columns by
/// column sum.
pub fn output_layer_subnet(q: &DenseMatrix, p_o: f64) -> Result<Subnet> {
    check_scores(q)?;
    let b = RankFactor::new(1.0, p_o)?.output_budget(q.cols())?;
    Ok(Subnet {
        rows: (0..q.rows()).collect(),
        cols: top_k(&q.col_sums(), b),
    })
}

/// Uniformly random feasible subnet of the given sizes.
pub fn random_subnet<R: Rng + ?Sized>(
    n: usize,
    m: usize,
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Subnet {
    let mut r = sample(rng, n, rows).into_vec();
    let mut c = sample(rng, m, cols).into_vec();
    r.sort_unstable();
    c.sort_unstable();
    Subnet { rows: r, cols: c }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rf(p: f64) -> RankFactor {
        RankFactor::uniform(p).unwrap()
    }

    #[test]
    fn single_dominant_entry() {
        let q = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        for s in [
            row2column(&q, rf(0.5)).unwrap(),
            column2row(&q, rf(0.5)).unwrap(),
        ] {
            assert_eq!(s.rows, vec![0]);
            assert_eq!(s.cols, vec![0]);
        }
        assert_eq!(
            brute_force_subnet(&q, rf(0.5)).unwrap().subnet,
            Subnet {
                rows: vec![0],
                cols: vec![0]
            }
        );
    }

    #[test]
    fn ties_break_to_lowest_indices() {
        let q = DenseMatrix::filled(4, 4, 1.0);
        let s = row2column(&q, rf(0.5)).unwrap();
        assert_eq!(
            s,
            Subnet {
                rows: vec![0, 1],
                cols: vec![0, 1]
            }
        );
    }

    #[test]
    fn column_major_wins_on_the_asymmetric_example() {
        let q = DenseMatrix::from_rows(&[[3.0, 3.0], [4.0, 0.0]]);
        let c = column2row(&q, rf(0.5)).unwrap();
        assert_eq!(
            c,
            Subnet {
                rows: vec![1],
                cols: vec![0]
            }
        );
        assert_eq!(subnet_score(&q, &c).unwrap(), 4.0);
        let r = row2column(&q, rf(0.5)).unwrap();
        assert_eq!(subnet_score(&q, &r).unwrap(), 3.0);
        let best = select_best(&q, rf(0.5)).unwrap();
        assert_eq!(best.strategy, Strategy::ColumnMajor);
        assert_eq!(best.score, 4.0);
    }

    #[test]
    fn infeasible_rank_factor_names_the_shape() {
        let q = DenseMatrix::filled(3, 5, 1.0);
        let err = row2column(&q, rf(0.2)).unwrap_err().to_string();
        assert!(err.contains("3 x 5"), "{err}");
        assert!(RankFactor::new(0.0, 1.0).is_err());
        assert!(RankFactor::new(0.5, 1.5).is_err());
    }

    #[test]
    fn subnet_score_rejects_out_of_range() {
        let q = DenseMatrix::filled(2, 2, 1.0);
        let s = Subnet {
            rows: vec![2],
            cols: vec![0],
        };
        assert!(matches!(subnet_score(&q, &s), Err(Error::Index { .. })));
        assert_eq!(subnet_score(&q, &Subnet::full(2, 2)).unwrap(), 4.0);
    }

    #[test]
    fn output_layer_selection() {
        let q = DenseMatrix::from_fn(3, 5, |_, c| if c == 3 { 2.0 } else { 0.0 });
        assert_eq!(output_layer_subnet(&q, 0.2).unwrap().cols, vec![3]);
        let all = output_layer_subnet(&q, 1.0).unwrap();
        assert_eq!(all, Subnet::full(3, 5));
        assert!(output_layer_subnet(&q, 0.1).is_err());
    }

    #[test]
    fn brute_force_guard() {
        let q = DenseMatrix::filled(40, 40, 1.0);
        assert!(matches!(
            brute_force_subnet(&q, rf(0.5)),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn combinations_are_lexicographic_and_complete() {
        let all: Vec<_> = Combinations::new(4, 2).collect();
        assert_eq!(
            all,
            vec![
                vec![0, 1],
                vec![0, 2],
                vec![0, 3],
                vec![1, 2],
                vec![1, 3],
                vec![2, 3]
            ]
        );
        assert_eq!(Combinations::new(5, 3).count() as u128, binomial(5, 3));
    }

    #[test]
    fn floor_count_survives_thirds() {
        assert_eq!(floor_count(6, 1.0 / 3.0), 2);
        assert_eq!(floor_count(3, 1.0 / 3.0), 1);
        assert_eq!(floor_count(32, 0.125), 4);
    }

    #[test]
    fn subnet_validation() {
        assert!(Subnet {
            rows: vec![0, 2],
            cols: vec![1]
        }
        .validate(3, 2)
        .is_ok());
        assert!(Subnet {
            rows: vec![2, 0],
            cols: vec![1]
        }
        .validate(3, 2)
        .is_err());
        assert!(Subnet {
            rows: vec![0, 3],
            cols: vec![1]
        }
        .validate(3, 2)
        .is_err());
        assert!(Subnet {
            rows: vec![],
            cols: vec![1]
        }
        .validate(3, 2)
        .is_err());
    }
}
