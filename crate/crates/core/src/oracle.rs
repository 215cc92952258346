//! Reference solvers: exhaustive search over `A^N` and a coordinate-descent
//! baseline.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::ProblemInstance;
use crate::seed;

/// Largest search space `exhaustive_solve` will enumerate.
pub const MAX_ENUMERATION: f64 = (1u64 << 24) as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub argmin_x: Vec<i32>,
    pub objective: f64,
    pub enumerated_count: u64,
}

/// Global minimizer of `f(Hx - y)` over `A^N`. Candidates are visited in
/// lexicographic order (first entry most significant, symbols ascending) and
/// only a strict improvement replaces the incumbent, so ties resolve to the
/// lexicographically smallest vector.
pub fn exhaustive_solve(p: &ProblemInstance, y: &DVector<f64>) -> Result<OracleResult> {
    p.check_observation(y)?;
    let a = p.alphabet();
    let size = a.space_size(p.n());
    if size > MAX_ENUMERATION {
        return Err(Error::SearchTooLarge {
            size,
            limit: MAX_ENUMERATION,
        });
    }
    let n = p.n();
    let base = a.len();
    let mut digits = vec![0usize; n];
    let mut x: Vec<i32> = vec![a.min_symbol(); n];
    let mut best_x = x.clone();
    let mut best = p.objective_unchecked(&x, y);
    let mut count = 1u64;
    loop {
        // Odometer increment, last entry fastest.
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok(OracleResult {
                    argmin_x: best_x,
                    objective: best,
                    enumerated_count: count,
                });
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < base {
                x[pos] = a.symbol(digits[pos]);
                break;
            }
            digits[pos] = 0;
            x[pos] = a.min_symbol();
        }
        count += 1;
        let v = p.objective_unchecked(&x, y);
        if v < best {
            best = v;
            best_x.copy_from_slice(&x);
        }
    }
}

/// Greedy single-coordinate descent from `start`: each pass sets every
/// coordinate in turn to its best symbol given the others, keeping the
/// current value unless another is strictly better. Stops after a pass with
/// no change.
pub fn coordinate_descent_from(p: &ProblemInstance, y: &DVector<f64>, start: &[i32]) -> Result<OracleResult> {
    let mut x = start.to_vec();
    let mut best = p.objective_value(&x, y)?;
    let a = p.alphabet();
    if let Some(&bad) = x.iter().find(|&&v| !a.contains(v)) {
        return Err(Error::invalid(format!("start value {bad} is not in the alphabet")));
    }
    let mut count = 1u64;
    loop {
        let mut changed = false;
        for j in 0..p.n() {
            let keep = x[j];
            let mut best_v = keep;
            for s in a.symbols() {
                if s == keep {
                    continue;
                }
                x[j] = s;
                count += 1;
                let v = p.objective_unchecked(&x, y);
                if v < best {
                    best = v;
                    best_v = s;
                }
            }
            x[j] = best_v;
            changed |= best_v != keep;
        }
        if !changed {
            return Ok(OracleResult {
                argmin_x: x,
                objective: best,
                enumerated_count: count,
            });
        }
    }
}

/// Best local optimum of [`coordinate_descent_from`] over `restarts` uniform
/// random starts; earlier restarts win ties.
pub fn coordinate_descent_solve(
    p: &ProblemInstance,
    y: &DVector<f64>,
    restarts: usize,
    seed: u64,
) -> Result<OracleResult> {
    if restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    let mut rng = seed::rng(seed);
    let a = p.alphabet();
    let mut best: Option<OracleResult> = None;
    let mut count = 0;
    for _ in 0..restarts {
        let start: Vec<i32> = (0..p.n()).map(|_| a.symbol(rng.random_range(0..a.len()))).collect();
        let r = coordinate_descent_from(p, y, &start)?;
        count += r.enumerated_count;
        if best.as_ref().is_none_or(|b| r.objective < b.objective) {
            best = Some(r);
        }
    }
    let mut best = best.expect("at least one restart");
    best.enumerated_count = count;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::IntegerAlphabet;
    use crate::problem::{ObjectiveKind, ResidualModel};
    use nalgebra::DMatrix;

    fn instance(seed: u64, q: usize, n: usize, m: u32) -> ProblemInstance {
        let mut rng = seed::rng(seed);
        let h = ProblemInstance::gaussian_channel(q, n, &mut rng);
        ProblemInstance::new(h, IntegerAlphabet::from_m(m), ResidualModel::gaussian(1.0), ObjectiveKind::L2Norm)
            .unwrap()
    }

    fn random_y(p: &ProblemInstance, seed: u64) -> DVector<f64> {
        let mut rng = seed::rng(seed);
        DVector::from_fn(p.q(), |_, _| rng.random_range(-6.0..6.0))
    }

    #[test]
    fn scalar_case() {
        let p = ProblemInstance::new(
            DMatrix::from_element(1, 1, 1.0),
            IntegerAlphabet::binary(),
            ResidualModel::gaussian(1.0),
            ObjectiveKind::L2Norm,
        )
        .unwrap();
        let r = exhaustive_solve(&p, &DVector::from_element(1, 0.2)).unwrap();
        assert_eq!(r.argmin_x, vec![1]);
        assert_eq!(r.enumerated_count, 2);
        // Equidistant: the smaller symbol wins.
        let r = exhaustive_solve(&p, &DVector::from_element(1, 0.0)).unwrap();
        assert_eq!(r.argmin_x, vec![-1]);
    }

    #[test]
    fn perfect_fit() {
        let p = instance(1, 8, 4, 1);
        let x = vec![3, -1, 1, -3];
        let r = exhaustive_solve(&p, &p.apply(&x)).unwrap();
        assert_eq!(r.argmin_x, x);
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.enumerated_count, 256);
    }

    #[test]
    fn guard() {
        let p = instance(2, 13, 13, 1);
        assert!(matches!(
            exhaustive_solve(&p, &random_y(&p, 1)),
            Err(Error::SearchTooLarge { .. })
        ));
        let p = instance(2, 12, 12, 1);
        assert_eq!(p.alphabet().space_size(12), MAX_ENUMERATION);
    }

    #[test]
    fn optimum_is_below_random_candidates() {
        let mut rng = seed::rng(9);
        for s in 0..50 {
            let p = instance(s, 6, 3, 2);
            let y = random_y(&p, s + 100);
            let r = exhaustive_solve(&p, &y).unwrap();
            assert_eq!(r.objective, p.objective_value(&r.argmin_x, &y).unwrap());
            for _ in 0..20 {
                let x = p.sample_x(&mut rng);
                assert!(r.objective <= p.objective_value(&x, &y).unwrap());
            }
        }
    }

    #[test]
    fn descent_fixed_point_and_bound() {
        for s in 0..50 {
            let p = instance(s, 8, 4, 1);
            let y = random_y(&p, s + 7);
            let global = exhaustive_solve(&p, &y).unwrap();
            let from = coordinate_descent_from(&p, &y, &global.argmin_x).unwrap();
            assert_eq!(from.argmin_x, global.argmin_x);
            let cd = coordinate_descent_solve(&p, &y, 4, s).unwrap();
            assert!(cd.objective >= global.objective);
            assert_eq!(cd, coordinate_descent_solve(&p, &y, 4, s).unwrap());
        }
        let p = instance(0, 4, 2, 0);
        assert!(coordinate_descent_solve(&p, &random_y(&p, 0), 0, 0).is_err());
        assert!(coordinate_descent_from(&p, &random_y(&p, 0), &[0, 1]).is_err());
    }
}
