//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NnError, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    pub coords: Vec<CoordResult>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordResult {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradCheckReport {
    /// Coordinates whose relative error exceeds `tol`.
    pub fn over(&self, tol: f64) -> impl Iterator<Item = &CoordResult> {
        self.coords.iter().filter(move |c| c.rel_error > tol)
    }
}

/// Finite-difference checker. Inputs longer than `full_check_limit` are
/// checked on a seeded random subset of `subset_size` coordinates.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    pub full_check_limit: usize,
    pub subset_size: usize,
    pub seed: u64,
    pub denominator_floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            full_check_limit: 400,
            subset_size: 200,
            seed: 0,
            denominator_floor: 1e-8,
        }
    }
}

impl GradCheck {
    pub fn with_eps(eps: f64) -> Self {
        Self {
            eps,
            ..Self::default()
        }
    }

    /// `f` builds a scalar from leaves bound to `inputs` (in order).
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<GradCheckReport, NnError>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var, NnError>,
    {
        let eval = |values: &[Tensor]| -> Result<f64, NnError> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let out = f(&mut g, &vars)?;
            let t = g.value(out);
            if t.len() != 1 {
                return Err(NnError::Contract("grad_check needs a scalar output".into()));
            }
            Ok(t.item())
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out)?;

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            coords_checked: 0,
            coords: Vec::new(),
        };
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.shape()));
            let coords: Vec<usize> = if input.len() > self.full_check_limit {
                sample(&mut rng, input.len(), self.subset_size.min(input.len())).into_vec()
            } else {
                (0..input.len()).collect()
            };
            for c in coords {
                let orig = input.data()[c];
                work[i].data_mut()[c] = orig + self.eps;
                let plus = eval(&work)?;
                work[i].data_mut()[c] = orig - self.eps;
                let minus = eval(&work)?;
                work[i].data_mut()[c] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic.data()[c];
                let denom = a.abs().max(numeric.abs()).max(self.denominator_floor);
                let rel = (a - numeric).abs() / denom;
                report.coords_checked += 1;
                report.coords.push(CoordResult {
                    input: i,
                    coord: c,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
                if report.worst.is_none() || rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((i, c));
                }
            }
        }
        Ok(report)
    }
}

/// Max relative error between analytic and central-difference gradients.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64, NnError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NnError>,
{
    GradCheck::with_eps(eps).run(f, inputs).map(|r| r.max_rel_error)
}
