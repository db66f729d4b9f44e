//! Straight-line scalar versions of the losses, written against plain
//! nested vectors so they share no code with the graph implementation.

#![allow(dead_code)]

use deinforeg::losses::{InvarianceDivisor, LossConfig, VarianceDivisor};
use deinforeg::tensor::{Matrix, RngState};

pub type Rows = Vec<Vec<f64>>;

const VAR_EPS: f64 = 1e-7;

pub fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn random_one_hot(rng: &mut RngState, n: usize, k: usize) -> Matrix {
    let mut y = Matrix::zeros(n, k);
    for r in 0..n {
        y.set(r, rng.below(k), 1.0);
    }
    y
}

fn center_cols(x: &Rows) -> Rows {
    let n = x.len();
    let c = x[0].len();
    let mut out = x.clone();
    for j in 0..c {
        let mut mu = 0.0;
        for row in x {
            mu += row[j];
        }
        mu /= n as f64;
        for row in out.iter_mut() {
            row[j] -= mu;
        }
    }
    out
}

fn normalize_rows(x: &Rows, eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let mut s = 0.0;
            for v in row {
                s += v * v;
            }
            let d = s.sqrt() + eps;
            row.iter().map(|v| v / d).collect()
        })
        .collect()
}

pub fn variance(x: &Rows, cfg: &LossConfig) -> f64 {
    let n = x.len();
    let c = x[0].len();
    let xc = center_cols(x);
    let mut total = 0.0;
    for j in 0..c {
        let mut ss = 0.0;
        for row in &xc {
            ss += row[j] * row[j];
        }
        let std = (ss / n as f64 + VAR_EPS).sqrt();
        if cfg.gamma - std > 0.0 {
            total += cfg.gamma - std;
        }
    }
    match cfg.variance_divisor {
        VarianceDivisor::Eq4 => total / c as f64,
        VarianceDivisor::Algorithm1 => total / (c * n) as f64,
    }
}

pub fn invariance(x: &Rows, y: &Rows, cfg: &LossConfig) -> f64 {
    invariance_normalized(&normalize_rows(x, cfg.eps_norm), y, cfg)
}

fn invariance_normalized(xn: &Rows, y: &Rows, cfg: &LossConfig) -> f64 {
    let n = xn.len();
    let xn = if cfg.center_before_sim {
        let centered: Rows = xn
            .iter()
            .map(|row| {
                let mu = row.iter().sum::<f64>() / row.len() as f64;
                row.iter().map(|v| v - mu).collect()
            })
            .collect();
        normalize_rows(&centered, cfg.eps_norm)
    } else {
        xn.clone()
    };
    let mut total = 0.0;
    for a in 0..n {
        for b in 0..n {
            let mut sim = 0.0;
            for j in 0..xn[a].len() {
                sim += xn[a][j] * xn[b][j];
            }
            let mut target = 0.0;
            for k in 0..y[a].len() {
                target += y[a][k] * y[b][k];
            }
            total += (target - sim) * (target - sim);
        }
    }
    match cfg.invariance_divisor {
        InvarianceDivisor::Eq5 => total / n as f64,
        InvarianceDivisor::MseAllEntries => total / (n * n) as f64,
    }
}

pub fn covariance(x: &Rows) -> f64 {
    let n = x.len();
    let c = x[0].len();
    let xc = center_cols(x);
    let mut total = 0.0;
    for i in 0..c {
        for j in 0..c {
            if i == j {
                continue;
            }
            let mut cov = 0.0;
            for row in &xc {
                cov += row[i] * row[j];
            }
            cov /= n as f64;
            total += cov * cov;
        }
    }
    total / c as f64
}

pub fn cross_entropy(logits: &Rows, y: &Rows) -> f64 {
    let mut total = 0.0;
    for (row, target) in logits.iter().zip(y) {
        let mut m = f64::NEG_INFINITY;
        for &v in row {
            m = m.max(v);
        }
        let mut z = 0.0;
        for &v in row {
            z += (v - m).exp();
        }
        let lse = m + z.ln();
        for (k, &t) in target.iter().enumerate() {
            total -= t * (row[k] - lse);
        }
    }
    total / logits.len() as f64
}

/// Sum of the enabled regularizers on the row-normalized projection.
pub fn local(x: &Rows, y: &Rows, cfg: &LossConfig) -> f64 {
    let xn = normalize_rows(x, cfg.eps_norm);
    let mut total = 0.0;
    if cfg.terms.variance {
        total += variance(&center_cols(&xn), cfg);
    }
    if cfg.terms.invariance {
        total += invariance_normalized(&xn, y, cfg);
    }
    if cfg.terms.covariance {
        total += covariance(&center_cols(&xn));
    }
    total
}
