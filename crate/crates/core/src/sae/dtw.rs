use super::SaeError;

#[derive(Clone, Debug, PartialEq)]
pub struct DtwAlignment {
    /// `a` warped onto the index grid of `b`.
    pub aligned: Vec<f64>,
    /// Accumulated squared-difference cost of the optimal path.
    pub cost: f64,
    /// Matched `(i, j)` pairs from `(0, 0)` to `(n - 1, m - 1)`.
    pub path: Vec<(usize, usize)>,
}

/// Classic DTW with squared local cost and steps (1,0), (0,1), (1,1).
/// Backtracking prefers the diagonal step on ties, then the step in `a`.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<DtwAlignment, SaeError> {
    if a.is_empty() || b.is_empty() {
        return Err(SaeError::Empty);
    }
    let (n, m) = (a.len(), b.len());
    let mut acc = vec![f64::INFINITY; n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let local = (a[i] - b[j]).powi(2);
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[at(i - 1, j - 1)] } else { f64::INFINITY };
                let up = if i > 0 { acc[at(i - 1, j)] } else { f64::INFINITY };
                let left = if j > 0 { acc[at(i, j - 1)] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[at(i, j)] = local + prev;
        }
    }

    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[at(i - 1, j - 1)];
            let up = acc[at(i - 1, j)];
            let left = acc[at(i, j - 1)];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();

    let mut sum = vec![0.0; m];
    let mut count = vec![0usize; m];
    for &(i, j) in &path {
        sum[j] += a[i];
        count[j] += 1;
    }
    let aligned = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    Ok(DtwAlignment {
        aligned,
        cost: acc[at(n - 1, m - 1)],
        path,
    })
}

/// `a` resampled onto `b`'s grid along the optimal warping path: each
/// output is the mean of the `a` values matched to that index of `b`.
pub fn dtw_align(a: &[f64], b: &[f64]) -> Result<Vec<f64>, SaeError> {
    if a.len() != b.len() {
        return Err(SaeError::Length {
            expected: b.len(),
            got: a.len(),
        });
    }
    dtw(a, b).map(|r| r.aligned)
}

pub fn dtw_cost(a: &[f64], b: &[f64]) -> Result<f64, SaeError> {
    dtw(a, b).map(|r| r.cost)
}
