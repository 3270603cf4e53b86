//! Dense dictionary-form simplex for small LPs with a feasible origin.
//!
//! Solves `max c·x  s.t.  A x <= b, x >= 0` with `b >= 0`.
//! Dantzig pricing with a fallback to Bland's rule after a run of
//! degenerate pivots, plus a pivot budget as a last guard against cycling.

const PIVOT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { value: f64, x: Vec<f64> },
    /// Pivot budget exhausted; `x` is feasible but maybe not optimal.
    Stalled { value: f64, x: Vec<f64> },
    Unbounded,
}

/// Degenerate pivots in a row before switching to Bland's rule.
const DEGENERATE_RUN: usize = 50;

pub fn maximize(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> LpOutcome {
    maximize_with_duals(a, b, c).0
}

/// Like [`maximize`], also returning the row prices (zero for rows whose
/// slack is basic).
pub fn maximize_with_duals(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> (LpOutcome, Vec<f64>) {
    let m = a.len();
    let n = c.len();
    assert_eq!(b.len(), m, "row count mismatch");
    // d[i][j]: basic_i = d[i][n] - sum_j d[i][j] * nonbasic_j; row m is the objective.
    let mut d = vec![vec![0.0; n + 1]; m + 1];
    for i in 0..m {
        assert!(b[i] >= -PIVOT_TOL, "origin must be feasible");
        d[i][..n].copy_from_slice(&a[i]);
        d[i][n] = b[i].max(0.0);
    }
    for j in 0..n {
        d[m][j] = -c[j];
    }
    let mut nonbasic: Vec<usize> = (0..n).collect();
    let mut basic: Vec<usize> = (n..n + m).collect();
    let budget = 50 * (m + n) + 1000;
    let mut degenerate = 0;
    let solution = |d: &[Vec<f64>], basic: &[usize]| {
        let mut x = vec![0.0; n];
        for i in 0..m {
            if basic[i] < n {
                x[basic[i]] = d[i][n];
            }
        }
        x
    };
    let duals = |d: &[Vec<f64>], nonbasic: &[usize]| {
        let mut y = vec![0.0; m];
        for (j, &v) in nonbasic.iter().enumerate() {
            if v >= n {
                y[v - n] = d[m][j];
            }
        }
        y
    };
    for _ in 0..budget {
        let bland = degenerate >= DEGENERATE_RUN;
        let mut s: Option<usize> = None;
        for j in 0..n {
            if d[m][j] < -PIVOT_TOL {
                let better = match s {
                    None => true,
                    Some(k) if bland => nonbasic[j] < nonbasic[k],
                    Some(k) => d[m][j] < d[m][k],
                };
                if better {
                    s = Some(j);
                }
            }
        }
        let Some(s) = s else {
            return (LpOutcome::Optimal { value: d[m][n], x: solution(&d, &basic) }, duals(&d, &nonbasic));
        };
        let mut r: Option<usize> = None;
        for i in 0..m {
            if d[i][s] > PIVOT_TOL {
                let better = match r {
                    None => true,
                    Some(k) => {
                        let (lhs, rhs) = (d[i][n] / d[i][s], d[k][n] / d[k][s]);
                        lhs < rhs || (lhs == rhs && basic[i] < basic[k])
                    }
                };
                if better {
                    r = Some(i);
                }
            }
        }
        let Some(r) = r else { return (LpOutcome::Unbounded, vec![0.0; m]) };
        if d[r][n] <= PIVOT_TOL {
            degenerate += 1;
        } else {
            degenerate = 0;
        }
        pivot(&mut d, r, s);
        std::mem::swap(&mut basic[r], &mut nonbasic[s]);
        for row in d.iter_mut().take(m) {
            if row[n] < 0.0 {
                row[n] = 0.0;
            }
        }
    }
    (LpOutcome::Stalled { value: d[m][n], x: solution(&d, &basic) }, duals(&d, &nonbasic))
}

fn pivot(d: &mut [Vec<f64>], r: usize, s: usize) {
    let inv = 1.0 / d[r][s];
    let row_r = d[r].clone();
    for (i, row) in d.iter_mut().enumerate() {
        if i == r {
            continue;
        }
        let f = row[s] * inv;
        if f != 0.0 {
            for (j, v) in row.iter_mut().enumerate() {
                if j != s {
                    *v -= row_r[j] * f;
                }
            }
        }
        row[s] = -f;
    }
    for (j, v) in d[r].iter_mut().enumerate() {
        if j != s {
            *v *= inv;
        }
    }
    d[r][s] = inv;
}
