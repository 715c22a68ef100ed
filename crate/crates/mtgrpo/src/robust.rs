//! The induced uniformity regularizer and its min-flow oracle.
//!
//! `omega_closed_form` evaluates the L1 deviation form directly.
//! `omega_minflow_oracle` solves the equivalent transportation problem on the
//! complete task graph: supplies `d_k = K z_k - 1`, demands `-d_k`, and the
//! minimum total flow equals the total positive supply. The two routes are
//! independent and cross-checked in the acceptance suite. A diagnostic
//! mapping from dual variables back to the simplex is also provided.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RobustError {
    #[error("not a simplex point: entries must be >= 0 and sum to 1 (sum = {sum})")]
    NotSimplex { sum: f64 },
    #[error("oracle limited to K <= {limit}, got {k}")]
    OracleScale { k: usize, limit: usize },
    #[error("dual variables must be nonnegative")]
    NegativeDual,
    #[error("duals induce a negative weight at index {0}")]
    NegativeInducedWeight(usize),
}

pub const ORACLE_MAX_TASKS: usize = 8;

fn check_simplex(z: &[f64]) -> Result<(), RobustError> {
    let sum: f64 = z.iter().sum();
    if z.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-12 {
        return Err(RobustError::NotSimplex { sum });
    }
    Ok(())
}

/// `(K/2) * || z - 1/K ||_1`
pub fn omega_closed_form(z: &[f64]) -> Result<f64, RobustError> {
    check_simplex(z)?;
    let k = z.len() as f64;
    Ok(k / 2.0 * z.iter().map(|&x| (x - 1.0 / k).abs()).sum::<f64>())
}

/// Minimum total flow shipping the supplies `d_k = K z_k - 1` to the
/// demands on the complete graph; equals the total positive supply.
///
/// A greedy transport plan achieving the bound is constructed and verified
/// against the balance constraints before the value is returned.
pub fn omega_minflow_oracle(z: &[f64]) -> Result<f64, RobustError> {
    check_simplex(z)?;
    let k = z.len();
    if k > ORACLE_MAX_TASKS {
        return Err(RobustError::OracleScale {
            k,
            limit: ORACLE_MAX_TASKS,
        });
    }
    let d: Vec<f64> = z.iter().map(|&x| k as f64 * x - 1.0).collect();
    let total_supply: f64 = d.iter().filter(|&&x| x > 0.0).sum();

    // Greedy matching: ship from each supply node to demand nodes in order.
    let mut mu = vec![vec![0.0; k]; k];
    let mut remaining_demand: Vec<f64> = d.iter().map(|&x| (-x).max(0.0)).collect();
    for (i, &di) in d.iter().enumerate() {
        let mut supply = di.max(0.0);
        for j in 0..k {
            if supply <= 0.0 {
                break;
            }
            if remaining_demand[j] > 0.0 {
                let ship = supply.min(remaining_demand[j]);
                mu[i][j] += ship;
                supply -= ship;
                remaining_demand[j] -= ship;
            }
        }
        debug_assert!(supply < 1e-9);
    }
    // Feasibility check: row sums minus column sums reproduce d.
    let total_flow: f64 = mu.iter().flatten().sum();
    for i in 0..k {
        let r: f64 = mu[i].iter().sum();
        let c: f64 = (0..k).map(|j| mu[j][i]).sum();
        debug_assert!((r - c - d[i]).abs() < 1e-9);
    }
    debug_assert!((total_flow - total_supply).abs() < 1e-9);
    Ok(total_flow)
}

/// Simplex point induced by dual variables:
/// `z_k = (1 + sum_j mu_kj - sum_j mu_jk) / K`.
pub fn weights_from_duals(mu: &[Vec<f64>]) -> Result<Vec<f64>, RobustError> {
    let k = mu.len();
    if mu.iter().flatten().any(|&x| x < 0.0) {
        return Err(RobustError::NegativeDual);
    }
    let mut z = Vec::with_capacity(k);
    for (i, mu_i) in mu.iter().enumerate() {
        let row: f64 = mu_i.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &x)| x).sum();
        let col: f64 = (0..k).filter(|&j| j != i).map(|j| mu[j][i]).sum();
        let zi = (1.0 + row - col) / k as f64;
        if zi < 0.0 {
            return Err(RobustError::NegativeInducedWeight(i));
        }
        z.push(zi);
    }
    Ok(z)
}

/// All grid points of the K-simplex with the given resolution step `1/n`.
pub fn simplex_grid(k: usize, n: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, n: usize, prefix: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if k == 1 {
            prefix.push(left as f64 / n as f64);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for i in 0..=left {
            prefix.push(i as f64 / n as f64);
            rec(k - 1, left - i, n, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, n, n, &mut Vec::new(), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_gives_zero() {
        for k in 2..=5 {
            let z = vec![1.0 / k as f64; k];
            assert!(omega_closed_form(&z).unwrap().abs() < 1e-12);
            assert!(omega_minflow_oracle(&z).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_attains_k_minus_one() {
        let z = vec![1.0, 0.0, 0.0];
        assert!((omega_closed_form(&z).unwrap() - 2.0).abs() < 1e-12);
        assert!((omega_minflow_oracle(&z).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn skewed_two_task_value() {
        let z = vec![0.75, 0.25];
        assert!((omega_closed_form(&z).unwrap() - 0.5).abs() < 1e-12);
        assert!((omega_minflow_oracle(&z).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn routes_agree_on_grid() {
        for k in [2, 3, 4] {
            for z in simplex_grid(k, 20) {
                let a = omega_closed_form(&z).unwrap();
                let b = omega_minflow_oracle(&z).unwrap();
                assert!((a - b).abs() < 1e-12, "K={k} z={z:?}: {a} vs {b}");
                assert!(a >= -1e-15 && a <= k as f64 - 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn convex_along_segments() {
        let grid = simplex_grid(3, 10);
        for (i, a) in grid.iter().enumerate().step_by(7) {
            for b in grid.iter().skip(i).step_by(11) {
                for alpha in [0.25, 0.5, 0.75] {
                    let mix: Vec<f64> = a
                        .iter()
                        .zip(b)
                        .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
                        .collect();
                    let lhs = omega_closed_form(&mix).unwrap();
                    let rhs = alpha * omega_closed_form(a).unwrap()
                        + (1.0 - alpha) * omega_closed_form(b).unwrap();
                    assert!(lhs <= rhs + 1e-12);
                }
            }
        }
    }

    #[test]
    fn duals_to_weights() {
        let zero = vec![vec![0.0; 3]; 3];
        let z = weights_from_duals(&zero).unwrap();
        for v in &z {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut mu = vec![vec![0.0; 2]; 2];
        mu[0][1] = 0.5;
        let z = weights_from_duals(&mu).unwrap();
        assert_eq!(z, vec![0.75, 0.25]);
        assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        mu[0][1] = 3.0;
        assert!(matches!(
            weights_from_duals(&mu),
            Err(RobustError::NegativeInducedWeight(1))
        ));
    }

    #[test]
    fn dual_mass_bounds_omega_from_above() {
        // For random feasible duals, total mass >= Omega(z(mu)).
        let mut state = 99u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut tried = 0;
        while tried < 200 {
            let k = 2 + (next() * 3.0) as usize;
            let mut mu = vec![vec![0.0; k]; k];
            for (i, row) in mu.iter_mut().enumerate() {
                for (j, cell) in row.iter_mut().enumerate() {
                    if i != j {
                        *cell = 0.3 * next();
                    }
                }
            }
            if let Ok(z) = weights_from_duals(&mu) {
                let mass: f64 = mu.iter().flatten().sum();
                assert!(mass + 1e-12 >= omega_closed_form(&z).unwrap());
                tried += 1;
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(omega_closed_form(&[0.5, 0.6]).is_err());
        assert!(omega_minflow_oracle(&[1.0 / 9.0; 9]).is_err());
    }
}
