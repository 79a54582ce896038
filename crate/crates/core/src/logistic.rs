//! Discretized logistic distribution over the integers.
//!
//! `P(z) = sigmoid((z + 1/2 - mu) / s) - sigmoid((z - 1/2 - mu) / s)`.
//!
//! Log-probabilities are evaluated as differences of log-sigmoids so that far
//! tails stay finite; only when the two boundaries coincide numerically does
//! the code fall back to the density at the bin centre times the bin width.

use std::f64::consts::LN_2;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `ln(sigmoid(a) - sigmoid(b))` for `a > b` with its partials in `a` and `b`.
fn log_interval(a: f64, b: f64) -> (f64, f64, f64) {
    if (a + b) > 0.0 {
        // sigmoid(a) - sigmoid(b) = sigmoid(-b) - sigmoid(-a); keep both
        // arguments on the side where log_sigmoid is accurate.
        let (v, da, db) = log_interval(-b, -a);
        return (v, -db, -da);
    }
    let width = a - b;
    if width > 1e-6 {
        let la = log_sigmoid(a);
        let lb = log_sigmoid(b);
        let t = lb - la; // < 0
        let one_minus = -t.exp_m1(); // 1 - sigmoid(b)/sigmoid(a)
        let v = la + one_minus.ln();
        if v.is_finite() && one_minus > 0.0 {
            let sa = sigmoid(a);
            let sb = sigmoid(b);
            // d/da = sigmoid'(a) / (sigmoid(a) - sigmoid(b))
            let da = (1.0 - sa) / one_minus;
            let db = -(1.0 - sb) * t.exp() / one_minus;
            return (v, da, db);
        }
    }
    // Midpoint density times bin width.
    let m = 0.5 * (a + b);
    let v = log_sigmoid(m) + log_sigmoid(-m) + width.max(f64::MIN_POSITIVE).ln();
    let dm = 1.0 - 2.0 * sigmoid(m);
    let dw = 1.0 / width.max(f64::MIN_POSITIVE);
    (v, 0.5 * dm + dw, 0.5 * dm - dw)
}

/// Value and partial derivatives of the base-2 log-pmf at one point.
#[derive(Clone, Copy, Debug)]
pub struct LogPmf {
    pub log2p: f64,
    pub d_z: f64,
    pub d_mu: f64,
    pub d_log_s: f64,
}

pub fn log2_pmf_with_grad(z: f64, mu: f64, log_s: f64) -> LogPmf {
    let inv_s = (-log_s).exp();
    let a = (z + 0.5 - mu) * inv_s;
    let b = (z - 0.5 - mu) * inv_s;
    let (v, da, db) = log_interval(a, b);
    LogPmf {
        log2p: v / LN_2,
        d_z: (da + db) * inv_s / LN_2,
        d_mu: -(da + db) * inv_s / LN_2,
        d_log_s: -(da * a + db * b) / LN_2,
    }
}

#[inline]
pub fn log2_pmf(z: f64, mu: f64, log_s: f64) -> f64 {
    let inv_s = (-log_s).exp();
    log_interval((z + 0.5 - mu) * inv_s, (z - 0.5 - mu) * inv_s).0 / LN_2
}

/// Elementwise base-2 log-pmf; `mu` and `log_s` must match `z` in length.
pub fn logistic_logpmf(z: &[f32], mu: &[f32], log_s: &[f32]) -> Vec<f32> {
    z.iter()
        .zip(mu)
        .zip(log_s)
        .map(|((&z, &m), &l)| log2_pmf(z as f64, m as f64, l as f64) as f32)
        .collect()
}
