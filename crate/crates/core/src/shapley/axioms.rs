//! Randomized checks of the four Shapley axioms.

use rand::Rng;
use serde::Serialize;

use super::shapley_from_dense;
use crate::coalition::{full_mask, Coalition};
use crate::error::{Error, Result};

const TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, Default, Serialize)]
pub struct AxiomReport {
    pub trials: usize,
    pub max_efficiency_error: f64,
    pub max_symmetry_error: f64,
    pub max_dummy_error: f64,
    pub max_linearity_error: f64,
}

#[derive(Serialize)]
struct FailingGame<'a> {
    m: usize,
    values: &'a [f64],
    detail: String,
}

fn violation(axiom: &str, m: usize, values: &[f64], detail: String) -> Error {
    let game = serde_json::to_string(&FailingGame { m, values, detail })
        .unwrap_or_else(|_| "<unserializable>".into());
    Error::AxiomViolation {
        axiom: axiom.into(),
        game,
    }
}

fn scale(values: &[f64]) -> f64 {
    values.iter().fold(1.0f64, |acc, v| acc.max(v.abs()))
}

/// Runs `trials` random games from `generator` (which must return `2^m`
/// values in mask order) through the efficiency, symmetry, dummy and linearity
/// checks at 1e-10 relative tolerance.
pub fn verify_axioms<R, G>(
    mut generator: G,
    m: usize,
    trials: usize,
    rng: &mut R,
) -> Result<AxiomReport>
where
    R: Rng,
    G: FnMut(&mut R, usize) -> Vec<f64>,
{
    if !(1..=10).contains(&m) {
        return Err(Error::InvalidInput(format!(
            "axiom checks need 1 <= M <= 10, got {m}"
        )));
    }
    if trials == 0 {
        return Err(Error::InvalidInput("at least one trial is required".into()));
    }
    let n = 1usize << m;
    let full = full_mask(m) as usize;
    let mut report = AxiomReport {
        trials,
        ..Default::default()
    };

    for _ in 0..trials {
        let v = generator(rng, m);
        if v.len() != n {
            return Err(Error::Dimension(format!(
                "generator returned {} values for M = {m}",
                v.len()
            )));
        }
        let tol = TOLERANCE * scale(&v);
        let phi = shapley_from_dense(m, &v);

        let eff = (phi.iter().sum::<f64>() - (v[full] - v[0])).abs();
        report.max_efficiency_error = report.max_efficiency_error.max(eff);
        if eff > tol {
            return Err(violation("efficiency", m, &v, format!("residual {eff:e}")));
        }

        if m >= 2 {
            let a = rng.random_range(0..m);
            let b = (a + 1 + rng.random_range(0..m - 1)) % m;
            let swapped: Vec<f64> = (0..n)
                .map(|mask| v[Coalition::from_mask(mask as u32).swap(a, b).mask() as usize])
                .collect();
            let phi_s = shapley_from_dense(m, &swapped);
            for j in 0..m {
                let k = if j == a {
                    b
                } else if j == b {
                    a
                } else {
                    j
                };
                let err = (phi_s[j] - phi[k]).abs();
                report.max_symmetry_error = report.max_symmetry_error.max(err);
                if err > tol {
                    return Err(violation(
                        "symmetry",
                        m,
                        &v,
                        format!(
                            "swap({}, {}): feature {} off by {err:e}",
                            a + 1,
                            b + 1,
                            j + 1
                        ),
                    ));
                }
            }
        }

        // Make one player inert: v'(S) = v(S \ {d}).
        let d = rng.random_range(0..m);
        let dummy: Vec<f64> = (0..n)
            .map(|mask| v[Coalition::from_mask(mask as u32).without(d).mask() as usize])
            .collect();
        let phi_d = shapley_from_dense(m, &dummy);
        let err = phi_d[d].abs();
        report.max_dummy_error = report.max_dummy_error.max(err);
        if err > tol {
            return Err(violation(
                "dummy",
                m,
                &dummy,
                format!("inert feature {} got {err:e}", d + 1),
            ));
        }

        let w = generator(rng, m);
        if w.len() != n {
            return Err(Error::Dimension(format!(
                "generator returned {} values for M = {m}",
                w.len()
            )));
        }
        let (c1, c2) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let combo: Vec<f64> = v.iter().zip(&w).map(|(a, b)| c1 * a + c2 * b).collect();
        let phi_w = shapley_from_dense(m, &w);
        let phi_c = shapley_from_dense(m, &combo);
        let tol_c = TOLERANCE
            * scale(&combo).max(scale(&v)).max(scale(&w))
            * (c1.abs() + c2.abs()).max(1.0);
        for j in 0..m {
            let err = (phi_c[j] - (c1 * phi[j] + c2 * phi_w[j])).abs();
            report.max_linearity_error = report.max_linearity_error.max(err);
            if err > tol_c {
                return Err(violation(
                    "linearity",
                    m,
                    &combo,
                    format!("feature {} off by {err:e}", j + 1),
                ));
            }
        }
    }
    Ok(report)
}
