use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights for `int f(t) exp(-t^2) dt ~ sum w_i f(t_i)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

pub const DEFAULT_NODES: usize = 60;

/// Orthonormal Hermite values `p_{n-1}(t)`, `p_n(t)` and `sum_{k<n} p_k(t)^2`.
fn hermite_orthonormal(n: usize, t: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = std::f64::consts::PI.powf(-0.25);
    let mut sumsq = 0.0;
    for k in 0..n {
        sumsq += cur * cur;
        let next = (2.0 / (k as f64 + 1.0)).sqrt() * t * cur
            - (k as f64 / (k as f64 + 1.0)).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    (prev, cur, sumsq)
}

pub fn gauss_hermite(n: usize) -> GaussHermite {
    assert!((1..=200).contains(&n), "node count must lie in 1..=200");
    let mut jac = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let off = (k as f64 / 2.0).sqrt();
        jac[(k, k - 1)] = off;
        jac[(k - 1, k)] = off;
    }
    let mut nodes: Vec<f64> = SymmetricEigen::new(jac).eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    for t in nodes.iter_mut() {
        for _ in 0..10 {
            let (pm1, pn, _) = hermite_orthonormal(n, *t);
            let dp = (2.0 * n as f64).sqrt() * pm1;
            if dp == 0.0 {
                break;
            }
            let step = pn / dp;
            *t -= step;
            if step.abs() <= 1e-15 * (1.0 + t.abs()) {
                break;
            }
        }
    }
    for i in 0..n / 2 {
        let j = n - 1 - i;
        let m = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -m;
        nodes[j] = m;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    let weights = nodes
        .iter()
        .map(|&t| 1.0 / hermite_orthonormal(n, t).2)
        .collect();
    GaussHermite { nodes, weights }
}

/// Shared tables for the default and doubled node counts.
pub fn default_rule() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(DEFAULT_NODES))
}

pub fn refined_rule() -> &'static GaussHermite {
    static RULE: OnceLock<GaussHermite> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(2 * DEFAULT_NODES))
}
