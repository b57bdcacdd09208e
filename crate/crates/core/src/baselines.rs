//! Two-view comparison objectives: NT-Xent (SimCLR), Barlow Twins and
//! VICReg. Each is recorded on a [`Tape`] so it can drive training; the
//! plain `*_loss` functions evaluate the same recording.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Mat, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Simclr,
    BarlowTwins,
    Vicreg,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub temperature: f64,
    pub off_diag_weight: f64,
    pub var_weight: f64,
    pub inv_weight: f64,
    pub cov_weight: f64,
    /// Added to the variance before the square root in the VICReg hinge.
    pub variance_eps: f64,
    /// Hidden and output widths of the projector; empty means identity.
    pub projector_dims: Vec<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            off_diag_weight: 5e-3,
            var_weight: 25.0,
            inv_weight: 25.0,
            cov_weight: 1.0,
            variance_eps: 1e-4,
            projector_dims: vec![64, 64],
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("temperature", self.temperature),
            ("off_diag_weight", self.off_diag_weight),
            ("var_weight", self.var_weight),
            ("inv_weight", self.inv_weight),
            ("cov_weight", self.cov_weight),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("baseline.{name} must be positive, got {v}")));
            }
        }
        if self.variance_eps < 0.0 {
            return Err(Error::InvalidConfig("baseline.variance_eps must be >= 0".into()));
        }
        if self.projector_dims.contains(&0) {
            return Err(Error::InvalidConfig("baseline.projector_dims entries must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_pair(tape: &Tape, a: Var, b: Var, min_rows: usize) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::shape(format!("{sa:?}"), format!("{sb:?}")));
    }
    if sa.0 < min_rows {
        return Err(Error::InvalidInput(format!(
            "batch of {} rows, need at least {min_rows}",
            sa.0
        )));
    }
    for v in [a, b] {
        if tape.value(v).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("baseline loss input".into()));
        }
    }
    Ok(())
}

/// Normalized-temperature cross entropy over `2N` anchors.
pub fn record_ntxent(tape: &mut Tape, a: Var, b: Var, temperature: f64) -> Result<Var> {
    check_pair(tape, a, b, 2)?;
    if tape.value(a).row_iter().chain(tape.value(b).row_iter()).any(|r| r.norm() == 0.0) {
        return Err(Error::InvalidInput("NT-Xent needs non-zero rows".into()));
    }
    let n = tape.shape(a).0;
    let z = tape.vcat(&[a, b]);
    let z = tape.normalize_rows(z);
    let zt = tape.transpose(z);
    let sim = tape.matmul(z, zt);
    let sim = tape.scale(sim, 1.0 / temperature);
    // Self-similarity is excluded from the softmax denominator.
    let mask = Mat::from_fn(2 * n, 2 * n, |i, j| if i == j { -1e12 } else { 0.0 });
    let masked = tape.add_const(sim, mask);
    let lse = tape.logsumexp_rows(masked);
    let pos = Mat::from_fn(2 * n, 2 * n, |i, j| if j == (i + n) % (2 * n) { 1.0 } else { 0.0 });
    let pos = tape.constant(pos);
    let positives = tape.hadamard(sim, pos);
    let lse_sum = tape.sum_all(lse);
    let pos_sum = tape.sum_all(positives);
    let total = tape.sub(lse_sum, pos_sum);
    Ok(tape.scale(total, 1.0 / (2 * n) as f64))
}

/// Column standardization with population variance; errors on constant
/// columns.
fn standardize_cols(tape: &mut Tape, a: Var) -> Result<Var> {
    let x = tape.value(a);
    let n = x.nrows() as f64;
    for (j, col) in x.column_iter().enumerate() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var <= 1e-300 {
            return Err(Error::InvalidInput(format!(
                "feature column {j} is constant; standardization undefined"
            )));
        }
    }
    let t = tape.transpose(a);
    let s = tape.layer_norm_rows(t, 0.0);
    Ok(tape.transpose(s))
}

/// `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2` over the
/// cross-correlation of standardized features.
pub fn record_barlow_twins(tape: &mut Tape, a: Var, b: Var, off_diag_weight: f64) -> Result<Var> {
    check_pair(tape, a, b, 2)?;
    let (n, k) = tape.shape(a);
    let sa = standardize_cols(tape, a)?;
    let sb = standardize_cols(tape, b)?;
    let sat = tape.transpose(sa);
    let c = tape.matmul(sat, sb);
    let c = tape.scale(c, 1.0 / n as f64);
    let eye = Mat::identity(k, k);
    let eye_v = tape.constant(eye.clone());
    let diag = tape.hadamard(c, eye_v);
    let on = tape.add_const(diag, -eye);
    let on = tape.square(on);
    let on = tape.sum_all(on);
    let c2 = tape.square(c);
    let c2 = tape.sum_all(c2);
    let d2 = tape.square(diag);
    let d2 = tape.sum_all(d2);
    let off = tape.sub(c2, d2);
    let off = tape.scale(off, off_diag_weight);
    Ok(tape.add(on, off))
}

fn center_cols(tape: &mut Tape, a: Var) -> Var {
    let mean = tape.mean_rows(a);
    let neg = tape.scale(mean, -1.0);
    tape.add_row(a, neg)
}

/// `mean_j max(0, 1 - sqrt(var_j + eps))` with unbiased variance.
fn variance_hinge(tape: &mut Tape, centered: Var, eps: f64) -> Var {
    let (n, k) = tape.shape(centered);
    let sq = tape.square(centered);
    let var = tape.mean_rows(sq);
    let var = tape.scale(var, n as f64 / (n as f64 - 1.0));
    let var = tape.add_const(var, Mat::from_element(1, k, eps));
    let std = tape.sqrt(var);
    let neg = tape.scale(std, -1.0);
    let gap = tape.add_const(neg, Mat::from_element(1, k, 1.0));
    let hinge = tape.relu(gap);
    tape.mean_all(hinge)
}

/// Sum of squared off-diagonal covariances divided by `K`.
fn covariance_penalty(tape: &mut Tape, centered: Var) -> Var {
    let (n, k) = tape.shape(centered);
    let ct = tape.transpose(centered);
    let cov = tape.matmul(ct, centered);
    let cov = tape.scale(cov, 1.0 / (n as f64 - 1.0));
    let c2 = tape.square(cov);
    let eye = tape.constant(Mat::identity(k, k));
    let d = tape.hadamard(c2, eye);
    let all = tape.sum_all(c2);
    let diag = tape.sum_all(d);
    let off = tape.sub(all, diag);
    tape.scale(off, 1.0 / k as f64)
}

/// Weighted invariance + variance + covariance terms.
pub fn record_vicreg(tape: &mut Tape, a: Var, b: Var, cfg: &BaselineConfig) -> Result<Var> {
    check_pair(tape, a, b, 2)?;
    let diff = tape.sub(a, b);
    let sq = tape.square(diff);
    let inv = tape.mean_all(sq);

    let ca = center_cols(tape, a);
    let cb = center_cols(tape, b);
    let va = variance_hinge(tape, ca, cfg.variance_eps);
    let vb = variance_hinge(tape, cb, cfg.variance_eps);
    let var = tape.add(va, vb);
    let var = tape.scale(var, 0.5);
    let pa = covariance_penalty(tape, ca);
    let pb = covariance_penalty(tape, cb);
    let cov = tape.add(pa, pb);

    let inv = tape.scale(inv, cfg.inv_weight);
    let var = tape.scale(var, cfg.var_weight);
    let cov = tape.scale(cov, cfg.cov_weight);
    let s = tape.add(inv, var);
    Ok(tape.add(s, cov))
}

/// Records the configured method's loss. `Method::None` has no loss.
pub fn record_loss(tape: &mut Tape, method: Method, a: Var, b: Var, cfg: &BaselineConfig) -> Result<Var> {
    match method {
        Method::Simclr => record_ntxent(tape, a, b, cfg.temperature),
        Method::BarlowTwins => record_barlow_twins(tape, a, b, cfg.off_diag_weight),
        Method::Vicreg => record_vicreg(tape, a, b, cfg),
        Method::None => Err(Error::InvalidConfig("method `none` has no training loss".into())),
    }
}

fn eval(a: &Mat, b: &Mat, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let av = tape.constant(a.clone());
    let bv = tape.constant(b.clone());
    let out = f(&mut tape, av, bv)?;
    Ok(tape.scalar(out))
}

pub fn ntxent_loss(a: &Mat, b: &Mat, temperature: f64) -> Result<f64> {
    eval(a, b, |t, a, b| record_ntxent(t, a, b, temperature))
}

pub fn barlow_twins_loss(a: &Mat, b: &Mat, off_diag_weight: f64) -> Result<f64> {
    eval(a, b, |t, a, b| record_barlow_twins(t, a, b, off_diag_weight))
}

pub fn vicreg_loss(a: &Mat, b: &Mat, cfg: &BaselineConfig) -> Result<f64> {
    eval(a, b, |t, a, b| record_vicreg(t, a, b, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ntxent_positive_dominated() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let l = ntxent_loss(&a, &a, 0.05).unwrap();
        assert!(l < 1e-8, "{l}");
    }

    #[test]
    fn ntxent_zero_similarity_is_log_of_negatives() {
        // Four mutually orthogonal unit rows: every logit is zero.
        let a = Mat::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = Mat::from_row_slice(2, 4, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let l = ntxent_loss(&a, &b, 0.5).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ntxent_needs_two_rows() {
        let a = Mat::from_row_slice(1, 2, &[1.0, 2.0]);
        assert!(ntxent_loss(&a, &a, 0.5).is_err());
    }

    #[test]
    fn barlow_zero_for_decorrelated_identical() {
        let a = Mat::from_row_slice(4, 2, &[1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]);
        assert!(barlow_twins_loss(&a, &a, 5e-3).unwrap().abs() < 1e-12);
    }

    #[test]
    fn barlow_constant_column_errors() {
        let a = Mat::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 3.0, 1.0, 4.0]);
        assert!(barlow_twins_loss(&a, &a, 5e-3).is_err());
    }

    #[test]
    fn vicreg_zero_for_spread_uncorrelated_identical() {
        let a = Mat::from_row_slice(4, 2, &[2.0, 2.0, 2.0, -2.0, -2.0, 2.0, -2.0, -2.0]);
        assert!(vicreg_loss(&a, &a, &BaselineConfig::default()).unwrap().abs() < 1e-12);
    }

    #[test]
    fn vicreg_flat_dimension_hinge() {
        // One flat column (hinge 1), one column with std >= 1.
        let a = Mat::from_row_slice(4, 2, &[0.0, 2.0, 0.0, -2.0, 0.0, 2.0, 0.0, -2.0]);
        let cfg = BaselineConfig {
            inv_weight: 1.0,
            var_weight: 1.0,
            cov_weight: 1.0,
            variance_eps: 0.0,
            ..Default::default()
        };
        // var term = (mean(1, 0) + mean(1, 0)) / 2 = 0.5; cov and inv are 0.
        let l = vicreg_loss(&a, &a, &cfg).unwrap();
        assert!((l - 0.5).abs() < 1e-12, "{l}");
    }
}
