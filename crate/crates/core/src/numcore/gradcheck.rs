//! Central finite-difference verification of reverse-mode gradients.
//!
//! Checks always run in `f64`: the closure under test builds its graph from a
//! [`ParamTable<f64>`], which is perturbed one coordinate at a time.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore, ParamTable};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter when it is larger than this.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-4,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub worst_coord: usize,
    /// Coordinates left out because the function has a kink (relu, max)
    /// within `eps` of them.
    pub kinks_skipped: usize,
    pub non_finite: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.non_finite || p.max_rel_err > self.tol)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(table: &ParamTable<f64>, f: &F) -> f64
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
{
    let mut g = Graph::new(table);
    let out = f(&mut g);
    g.value(out).item()
}

/// Reverse-mode gradient of every parameter (zeros for untouched ones).
pub fn analytic_gradients<F>(table: &ParamTable<f64>, f: &F) -> Vec<Tensor<f64>>
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
{
    let mut g = Graph::new(table);
    let out = f(&mut g);
    let grads = g.backward(out);
    let mut result: Vec<Tensor<f64>> = table.values.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
    for (id, grad) in grads.params() {
        result[id.0] = grad.clone();
    }
    result
}

/// Compares supplied analytic gradients against central differences.
pub fn check_against<F>(store: &ParamStore, analytic: &[Tensor<f64>], f: F, cfg: GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
{
    let mut table = store.to_table::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = table.values[id.0].len();
        let coords: Vec<usize> = if n <= cfg.max_coords {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.max_coords).into_vec()
        };
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            coords_checked: coords.len(),
            max_rel_err: 0.0,
            worst_coord: 0,
            kinks_skipped: 0,
            non_finite: false,
        };
        for &c in &coords {
            let mut central = |eps: f64| {
                let orig = table.values[id.0].data[c];
                table.values[id.0].data[c] = orig + eps;
                let plus = eval(&table, &f);
                table.values[id.0].data[c] = orig - eps;
                let minus = eval(&table, &f);
                table.values[id.0].data[c] = orig;
                (plus - minus) / (2.0 * eps)
            };
            let numeric = central(cfg.eps);
            let a = analytic[id.0].data[c];
            if !numeric.is_finite() || !a.is_finite() {
                check.non_finite = true;
                continue;
            }
            let err = relative_error(a, numeric);
            // on a smooth stretch halving eps barely moves the estimate
            if err > cfg.tol && relative_error(numeric, central(cfg.eps / 2.0)) > cfg.tol {
                check.kinks_skipped += 1;
                continue;
            }
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_coord = c;
            }
        }
        params.push(check);
    }
    GradCheckReport { tol: cfg.tol, params }
}

/// Finite-difference check of every parameter in `store` for the scalar
/// function built by `f`.
pub fn grad_check<F>(store: &ParamStore, f: F, cfg: GradCheckConfig) -> GradCheckReport
where
    F: Fn(&mut Graph<'_, f64>) -> Var,
{
    let table = store.to_table::<f64>();
    let analytic = analytic_gradients(&table, &f);
    check_against(store, &analytic, f, cfg)
}

/// Random fixed projection `Σ r ⊙ y`, a generic scalar readout for checks.
pub fn projection_loss(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Var {
    use rand::Rng;
    let (rows, cols) = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let r = Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let r = g.input(r);
    let prod = g.mul(y, r);
    g.sum(prod)
}

/// Looks a parameter up by name, panicking with a useful message.
pub fn param_named(store: &ParamStore, name: &str) -> ParamId {
    store.id(name).unwrap_or_else(|| panic!("no parameter named {name}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::nn::linear;
    use crate::numcore::params::Init;

    fn linear_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        s.add("x", 3, 4, Init::Normal(1.0), &mut rng);
        s.add("w", 4, 4, Init::Normal(0.5), &mut rng);
        s.add("b", 1, 4, Init::Normal(0.5), &mut rng);
        s
    }

    fn linear_fn(g: &mut Graph<'_, f64>) -> Var {
        let x = g.param(ParamId(0));
        let w = g.param(ParamId(1));
        let b = g.param(ParamId(2));
        let y = linear(g, x, w, Some(b));
        projection_loss(g, y, 1)
    }

    #[test]
    fn linear_layer_passes() {
        let s = linear_store(3);
        let report = grad_check(&s, linear_fn, GradCheckConfig::default());
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_err() < 1e-4);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let s = linear_store(3);
        let table = s.to_table::<f64>();
        let mut analytic = analytic_gradients(&table, &linear_fn);
        analytic[1].data[5] += 0.5;
        let report = check_against(&s, &analytic, linear_fn, GradCheckConfig::default());
        assert!(!report.passed());
        assert_eq!(report.failures()[0].name, "w");
    }

    #[test]
    fn kink_inside_eps_is_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let x = s.add("x", 1, 2, Init::Normal(1.0), &mut rng);
        s.data_mut(x).copy_from_slice(&[1e-5, 0.7]);
        let report = grad_check(
            &s,
            |g| {
                let x = g.param(ParamId(0));
                let y = g.relu(x);
                g.sum(y)
            },
            GradCheckConfig {
                eps: 1e-4,
                ..Default::default()
            },
        );
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.params[0].kinks_skipped, 1);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0001) - 1e-4 / 1.0001).abs() < 1e-12);
    }
}
