//! Maximal-correlation objectives.
//!
//! Both losses compare the log-determinant of a joint second-moment matrix
//! with the log-determinants of its diagonal blocks:
//!
//! ```text
//! loss = logdet [[R_A, P], [P^T, R_B]] - logdet R_A - logdet R_B
//! ```
//!
//! By Fischer's inequality this is never positive, and it is zero exactly
//! when the cross block vanishes. The two-view form compares features of two
//! variables; the hierarchical form compares the concatenated per-view
//! projections (`z_low`, width `T*K`) with the summed per-view projections
//! (`z_high`, width `K`).
//!
//! Moments are uncentered batch means. A ridge is added to the diagonal
//! blocks before the joint matrix is assembled.

use nalgebra::{DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::params::{affine, insert_affine, ParamSet, ParamVars};
use crate::rng::Rng;
use crate::tape::{Mat, Tape, Var};

/// Diagonal regularization of autocorrelation blocks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ridge {
    pub epsilon: f64,
    /// When set the added multiple of the identity is `epsilon * tr(R) / d`.
    pub trace_scaled: bool,
}

impl Ridge {
    pub const fn absolute(epsilon: f64) -> Self {
        Self {
            epsilon,
            trace_scaled: false,
        }
    }

    pub const fn trace_scaled(epsilon: f64) -> Self {
        Self {
            epsilon,
            trace_scaled: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "ridge epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    fn apply_var(&self, tape: &mut Tape, r: Var) -> Var {
        if self.epsilon == 0.0 {
            r
        } else if self.trace_scaled {
            tape.trace_ridge(r, self.epsilon)
        } else {
            tape.ridge(r, self.epsilon)
        }
    }
}

impl Default for Ridge {
    fn default() -> Self {
        Self::trace_scaled(1e-4)
    }
}

/// Autocorrelation blocks of a batch. `r_low` and `r_high` already carry the
/// ridge; `p_cross` never does.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationBlock {
    pub r_low: Mat,
    pub r_high: Mat,
    pub p_cross: Mat,
    pub ridge: Ridge,
}

impl CorrelationBlock {
    /// Condition numbers `(cond R_low, cond R_high)`.
    pub fn condition_numbers(&self) -> (f64, f64) {
        (condition_number(&self.r_low), condition_number(&self.r_high))
    }
}

/// Ratio of extreme eigenvalues of a symmetric matrix; infinite when the
/// smallest is not positive.
pub fn condition_number(m: &Mat) -> f64 {
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = ev.max();
    let min = ev.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Tape handles of the blocks built by [`record_loss`].
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub r_low: Var,
    pub r_high: Var,
    pub p_cross: Var,
}

/// Records `(1/N) A^T A` with ridge, `(1/N) B^T B` with ridge and
/// `(1/N) A^T B`.
pub fn record_block(tape: &mut Tape, a: Var, b: Var, ridge: Ridge) -> BlockVars {
    let n = tape.shape(a).0 as f64;
    let at = tape.transpose(a);
    let bt = tape.transpose(b);
    let raa = tape.matmul(at, a);
    let raa = tape.scale(raa, 1.0 / n);
    let rbb = tape.matmul(bt, b);
    let rbb = tape.scale(rbb, 1.0 / n);
    let pab = tape.matmul(at, b);
    let pab = tape.scale(pab, 1.0 / n);
    BlockVars {
        r_low: ridge.apply_var(tape, raa),
        r_high: ridge.apply_var(tape, rbb),
        p_cross: pab,
    }
}

fn singular(tape: &Tape, v: Var, what: &str) -> Error {
    Error::Singular {
        what: what.to_string(),
        condition: condition_number(tape.value(v)),
    }
}

/// Records the log-determinant loss over already-built blocks.
pub fn record_block_loss(tape: &mut Tape, b: BlockVars) -> Result<Var> {
    let pt = tape.transpose(b.p_cross);
    let top = tape.hcat(&[b.r_low, b.p_cross]);
    let bottom = tape.hcat(&[pt, b.r_high]);
    let joint = tape.vcat(&[top, bottom]);
    let ld_joint = tape
        .logdet_spd(joint)
        .ok_or_else(|| singular(tape, joint, "joint autocorrelation"))?;
    let ld_low = tape
        .logdet_spd(b.r_low)
        .ok_or_else(|| singular(tape, b.r_low, "low-level autocorrelation"))?;
    let ld_high = tape
        .logdet_spd(b.r_high)
        .ok_or_else(|| singular(tape, b.r_high, "high-level autocorrelation"))?;
    let d = tape.sub(ld_joint, ld_low);
    Ok(tape.sub(d, ld_high))
}

/// Records the loss between two feature batches with matching row count.
pub fn record_loss(tape: &mut Tape, a: Var, b: Var, ridge: Ridge) -> Result<(Var, BlockVars)> {
    let (na, nb) = (tape.shape(a).0, tape.shape(b).0);
    if na != nb {
        return Err(Error::shape(format!("{na} rows"), format!("{nb} rows")));
    }
    if na == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    check_finite(tape.value(a), "low-level features")?;
    check_finite(tape.value(b), "high-level features")?;
    let blocks = record_block(tape, a, b, ridge);
    let loss = record_block_loss(tape, blocks)?;
    Ok((loss, blocks))
}

/// Batch autocorrelation blocks of `z_low` (`N x T*K`) and `z_high` (`N x K`).
pub fn correlation_block(z_low: &Mat, z_high: &Mat, ridge: Ridge) -> Result<CorrelationBlock> {
    ridge.validate()?;
    if z_low.nrows() != z_high.nrows() {
        return Err(Error::shape(format!("{} rows", z_low.nrows()), format!("{} rows", z_high.nrows())));
    }
    if z_low.nrows() == 0 {
        return Err(Error::InvalidInput("correlation block needs at least one sample".into()));
    }
    check_finite(z_low, "low-level features")?;
    check_finite(z_high, "high-level features")?;
    let mut tape = Tape::new();
    let a = tape.constant(z_low.clone());
    let b = tape.constant(z_high.clone());
    let v = record_block(&mut tape, a, b, ridge);
    Ok(CorrelationBlock {
        r_low: tape.value(v.r_low).clone(),
        r_high: tape.value(v.r_high).clone(),
        p_cross: tape.value(v.p_cross).clone(),
        ridge,
    })
}

/// `[[R_L, P], [P^T, R_H]]`.
pub fn assemble_joint(block: &CorrelationBlock) -> Mat {
    let dl = block.r_low.nrows();
    let dh = block.r_high.nrows();
    let mut m = Mat::zeros(dl + dh, dl + dh);
    m.view_mut((0, 0), (dl, dl)).copy_from(&block.r_low);
    m.view_mut((0, dl), (dl, dh)).copy_from(&block.p_cross);
    m.view_mut((dl, 0), (dh, dl)).copy_from(&block.p_cross.transpose());
    m.view_mut((dl, dl), (dh, dh)).copy_from(&block.r_high);
    m
}

/// Hierarchical loss `logdet R_LH - logdet R_L - logdet R_H` of a block.
pub fn hfmca_loss(block: &CorrelationBlock) -> Result<f64> {
    let dl = block.r_low.nrows();
    let dh = block.r_high.nrows();
    if block.r_low.ncols() != dl || block.r_high.ncols() != dh || block.p_cross.shape() != (dl, dh) {
        return Err(Error::shape(
            format!("R_L {dl}x{dl}, R_H {dh}x{dh}, P {dl}x{dh}"),
            format!(
                "R_L {:?}, R_H {:?}, P {:?}",
                block.r_low.shape(),
                block.r_high.shape(),
                block.p_cross.shape()
            ),
        ));
    }
    let mut tape = Tape::new();
    let v = BlockVars {
        r_low: tape.constant(block.r_low.clone()),
        r_high: tape.constant(block.r_high.clone()),
        p_cross: tape.constant(block.p_cross.clone()),
    };
    let loss = record_block_loss(&mut tape, v)?;
    Ok(tape.scalar(loss))
}

/// Hierarchical loss of a batch together with its gradients with respect to
/// `z_low` and `z_high`.
pub fn hfmca_loss_and_grad(z_low: &Mat, z_high: &Mat, ridge: Ridge) -> Result<(f64, Mat, Mat)> {
    ridge.validate()?;
    let mut tape = Tape::new();
    let a = tape.param(z_low.clone());
    let b = tape.param(z_high.clone());
    let (loss, _) = record_loss(&mut tape, a, b, ridge)?;
    let g = tape.backward(loss);
    Ok((
        tape.scalar(loss),
        g.get_or_zeros(a, z_low.nrows(), z_low.ncols()),
        g.get_or_zeros(b, z_high.nrows(), z_high.ncols()),
    ))
}

/// Two-view loss between feature batches `f` and `g` (`N x K` each).
pub fn fmca_loss(f: &Mat, g: &Mat, ridge: Ridge) -> Result<f64> {
    hfmca_loss(&correlation_block(f, g, ridge)?)
}

/// Two-view loss and its gradients with respect to `f` and `g`.
pub fn fmca_loss_and_grad(f: &Mat, g: &Mat, ridge: Ridge) -> Result<(f64, Mat, Mat)> {
    hfmca_loss_and_grad(f, g, ridge)
}

fn inverse_sqrt(m: &Mat, what: &str) -> Result<Mat> {
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::Singular {
            what: what.to_string(),
            condition: condition_number(m),
        });
    }
    let d = DVector::from_iterator(m.nrows(), eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * Mat::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// Singular values of `R_F^-1/2 P_FG R_G^-1/2`, descending.
pub fn fmca_spectrum(f: &Mat, g: &Mat, ridge: Ridge) -> Result<Vec<f64>> {
    let b = correlation_block(f, g, ridge)?;
    let wf = inverse_sqrt(&b.r_low, "R_F")?;
    let wg = inverse_sqrt(&b.r_high, "R_G")?;
    let m = wf * &b.p_cross * wg;
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Shapes and regularization of the hierarchical objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HfmcaConfig {
    /// Output width `K` of every projection head.
    pub proj_dim: usize,
    /// Hidden width of the shared low-level perceptron; 0 selects the
    /// embedding width.
    pub low_hidden_dim: usize,
    pub ridge_epsilon: f64,
    pub trace_scaled_ridge: bool,
}

impl Default for HfmcaConfig {
    fn default() -> Self {
        Self {
            proj_dim: 32,
            low_hidden_dim: 0,
            ridge_epsilon: 1e-4,
            trace_scaled_ridge: true,
        }
    }
}

impl HfmcaConfig {
    pub fn ridge(&self) -> Ridge {
        Ridge {
            epsilon: self.ridge_epsilon,
            trace_scaled: self.trace_scaled_ridge,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.proj_dim == 0 {
            return Err(Error::InvalidConfig("hfmca.proj_dim must be >= 1".into()));
        }
        self.ridge().validate().map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}

/// Shared low-level head and per-view high-level heads.
///
/// Parameter names: `low.hidden.*` (absent for a purely linear low head),
/// `low.out.*`, and `high.<t>.*` for view `t`. Bias tensors are optional.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHeads {
    pub params: ParamSet,
    pub n_views: usize,
    pub proj_dim: usize,
}

impl ProjectionHeads {
    /// Two-layer perceptron low head and affine high heads.
    pub fn init(embedding_dim: usize, n_views: usize, cfg: &HfmcaConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let hidden = if cfg.low_hidden_dim == 0 { embedding_dim } else { cfg.low_hidden_dim };
        let mut p = ParamSet::new();
        insert_affine(&mut p, "low.hidden", embedding_dim, hidden, rng);
        insert_affine(&mut p, "low.out", hidden, cfg.proj_dim, rng);
        for t in 0..n_views {
            insert_affine(&mut p, &format!("high.{t}"), embedding_dim, cfg.proj_dim, rng);
        }
        Ok(Self {
            params: p,
            n_views,
            proj_dim: cfg.proj_dim,
        })
    }

    /// Bias-free linear heads: `low` and each `high[t]` are
    /// `embedding_dim x K` matrices.
    pub fn linear(low: Mat, high: Vec<Mat>) -> Result<Self> {
        let k = low.ncols();
        if high.iter().any(|h| h.shape() != low.shape()) {
            return Err(Error::InvalidInput("all heads must share one shape".into()));
        }
        let mut p = ParamSet::new();
        p.insert("low.out.weight", low);
        let n_views = high.len();
        for (t, h) in high.into_iter().enumerate() {
            p.insert(format!("high.{t}.weight"), h);
        }
        Ok(Self {
            params: p,
            n_views,
            proj_dim: k,
        })
    }

    fn check_views(&self, got: usize) -> Result<()> {
        if got != self.n_views {
            return Err(Error::InvalidInput(format!(
                "expected {} views, got {got}",
                self.n_views
            )));
        }
        Ok(())
    }
}

fn low_head(tape: &mut Tape, vars: &ParamVars, x: Var) -> Var {
    if vars.contains_key("low.hidden.weight") {
        let h = affine(tape, vars, "low.hidden", x);
        let h = tape.gelu(h);
        affine(tape, vars, "low.out", h)
    } else {
        affine(tape, vars, "low.out", x)
    }
}

/// Records both projections for per-view embedding batches (`N x d` each).
/// Returns `(z_low, z_high)`.
pub fn record_projections(tape: &mut Tape, vars: &ParamVars, views: &[Var]) -> (Var, Var) {
    let lows: Vec<Var> = views.iter().map(|&e| low_head(tape, vars, e)).collect();
    let z_low = if lows.len() == 1 { lows[0] } else { tape.hcat(&lows) };
    let mut z_high = affine(tape, vars, "high.0", views[0]);
    for (t, &e) in views.iter().enumerate().skip(1) {
        let h = affine(tape, vars, &format!("high.{t}"), e);
        z_high = tape.add(z_high, h);
    }
    (z_low, z_high)
}

fn project(embeddings: &[DVector<f64>], heads: &ProjectionHeads) -> Result<(DVector<f64>, DVector<f64>)> {
    heads.check_views(embeddings.len())?;
    let mut tape = Tape::new();
    let vars = heads.params.register_frozen(&mut tape);
    let views: Vec<Var> = embeddings
        .iter()
        .map(|e| tape.constant(Mat::from_row_slice(1, e.len(), e.as_slice())))
        .collect();
    let (lo, hi) = record_projections(&mut tape, &vars, &views);
    let to_vec = |m: &Mat| DVector::from_iterator(m.len(), m.iter().copied());
    Ok((to_vec(tape.value(lo)), to_vec(tape.value(hi))))
}

/// Shared low head applied to each view embedding, concatenated in view
/// order (length `T*K`).
pub fn project_low(embeddings: &[DVector<f64>], heads: &ProjectionHeads) -> Result<DVector<f64>> {
    project(embeddings, heads).map(|(lo, _)| lo)
}

/// Sum over views of the view-specific high heads (length `K`).
pub fn project_high(embeddings: &[DVector<f64>], heads: &ProjectionHeads) -> Result<DVector<f64>> {
    project(embeddings, heads).map(|(_, hi)| hi)
}

/// Normalized joint table `Q(x, y) = p(x, y) / sqrt(p(x) p(y))`.
pub fn normalized_joint(joint: &Mat) -> Mat {
    let px = joint.column_sum();
    let py = joint.row_sum();
    Mat::from_fn(joint.nrows(), joint.ncols(), |i, j| joint[(i, j)] / (px[i] * py[j]).sqrt())
}

/// Result of fitting tabular feature maps to a discrete joint distribution.
#[derive(Clone, Debug)]
pub struct TabularFit {
    pub spectrum: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Learns `K`-dimensional lookup-table features for both variables of a
/// discrete joint distribution by minimizing the two-view loss under the
/// exact population expectation, then reports the learned spectrum.
///
/// Every cell `(x, y)` contributes one batch row weighted by
/// `sqrt(cells * p(x, y))`, so batch means equal expectations.
pub fn fit_tabular(joint: &Mat, k: usize, steps: usize, learning_rate: f64, ridge: Ridge, rng: &mut Rng) -> Result<TabularFit> {
    let (nx, ny) = joint.shape();
    if joint.iter().any(|&p| p < 0.0) || (joint.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("joint must be a probability table".into()));
    }
    let cells = nx * ny;
    let mut sel_x = Mat::zeros(cells, nx);
    let mut sel_y = Mat::zeros(cells, ny);
    for x in 0..nx {
        for y in 0..ny {
            let r = x * ny + y;
            let w = (cells as f64 * joint[(x, y)]).sqrt();
            sel_x[(r, x)] = w;
            sel_y[(r, y)] = w;
        }
    }
    let mut params = ParamSet::new();
    params.insert("f", crate::params::uniform(nx, k, 1.0, rng));
    params.insert("g", crate::params::uniform(ny, k, 1.0, rng));
    let mut opt = Adam::new(
        AdamConfig {
            learning_rate,
            ..Default::default()
        },
        &params,
    );
    let features = |p: &ParamSet| (&sel_x * p.get("f").unwrap(), &sel_y * p.get("g").unwrap());
    let (f0, g0) = features(&params);
    let initial_loss = fmca_loss(&f0, &g0, ridge)?;
    for _ in 0..steps {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let sx = tape.constant(sel_x.clone());
        let sy = tape.constant(sel_y.clone());
        let f = tape.matmul(sx, vars["f"]);
        let g = tape.matmul(sy, vars["g"]);
        let (loss, _) = record_loss(&mut tape, f, g, ridge)?;
        let grads = tape.backward(loss);
        let grads = params.gradients(&vars, &grads);
        opt.update(&mut params, &grads);
    }
    let (f, g) = features(&params);
    Ok(TabularFit {
        spectrum: fmca_spectrum(&f, &g, ridge)?,
        initial_loss,
        final_loss: fmca_loss(&f, &g, ridge)?,
    })
}
