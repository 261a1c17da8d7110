//! Shared latent space: linear heads, cosine similarity, the bidirectional
//! InfoNCE alignment loss with its analytic gradient, and the InfoNCE
//! mutual-information lower bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    affine_backward, affine_forward, dot, gaussian_weight, norm, AffineGrads, Matrix, Parameters,
    SeededSampler,
};

/// Norms below this are treated as degenerate: similarity 0, flagged.
pub const DEGENERATE_NORM: f64 = 1e-12;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_LATENT_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub temperature: f64,
    pub batch_size: usize,
    pub d_z: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            temperature: DEFAULT_TEMPERATURE,
            batch_size: 16,
            d_z: DEFAULT_LATENT_DIM,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if self.batch_size == 0 || self.d_z == 0 {
            return Err(Error::Config("batch size and d_z must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    Understanding,
    Execution,
}

/// The pair of affine maps into the shared latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentHead {
    pub u_weight: Matrix,
    pub u_bias: Matrix,
    pub e_weight: Matrix,
    pub e_bias: Matrix,
}

impl AlignmentHead {
    /// Gaussian 1/√fan_in weights, zero biases.
    pub fn new(d_u: usize, d_e: usize, d_z: usize, rng: &mut SeededSampler) -> Self {
        AlignmentHead {
            u_weight: gaussian_weight(d_z, d_u, rng),
            u_bias: Matrix::zeros(1, d_z),
            e_weight: gaussian_weight(d_z, d_e, rng),
            e_bias: Matrix::zeros(1, d_z),
        }
    }

    /// Square identity maps on both sides.
    pub fn identity(d: usize) -> Self {
        AlignmentHead {
            u_weight: Matrix::identity(d),
            u_bias: Matrix::zeros(1, d),
            e_weight: Matrix::identity(d),
            e_bias: Matrix::zeros(1, d),
        }
    }

    pub fn d_z(&self) -> usize {
        self.u_weight.rows()
    }

    pub fn input_dim(&self, side: Side) -> usize {
        self.weights(side).0.cols()
    }

    fn weights(&self, side: Side) -> (&Matrix, &Matrix) {
        match side {
            Side::Understanding => (&self.u_weight, &self.u_bias),
            Side::Execution => (&self.e_weight, &self.e_bias),
        }
    }

    pub fn project(&self, side: Side, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .project_batch(side, &Matrix::row_vector(x))?
            .into_data())
    }

    pub fn project_batch(&self, side: Side, x: &Matrix) -> Result<Matrix> {
        let (w, b) = self.weights(side);
        affine_forward(w, b.data(), x)
    }

    pub fn backward(&self, side: Side, grad_z: &Matrix, x: &Matrix) -> Result<AffineGrads> {
        let (w, _) = self.weights(side);
        affine_backward(grad_z, w, x)
    }

    /// Writes affine gradients for one side into a gradient-shaped head.
    pub(crate) fn accumulate(&mut self, side: Side, g: &AffineGrads) -> Result<()> {
        let (w, b) = match side {
            Side::Understanding => (&mut self.u_weight, &mut self.u_bias),
            Side::Execution => (&mut self.e_weight, &mut self.e_bias),
        };
        w.add_assign(&g.weight)?;
        b.add_assign(&Matrix::row_vector(&g.bias))
    }
}

impl Parameters for AlignmentHead {
    fn params(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("head.u_weight", &self.u_weight),
            ("head.u_bias", &self.u_bias),
            ("head.e_weight", &self.e_weight),
            ("head.e_bias", &self.e_bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("head.u_weight", &mut self.u_weight),
            ("head.u_bias", &mut self.u_bias),
            ("head.e_weight", &mut self.e_weight),
            ("head.e_bias", &mut self.e_bias),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSim {
    pub value: f64,
    /// Either input had norm below [`DEGENERATE_NORM`].
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<CosineSim> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_similarity",
            (1, a.len()),
            (1, b.len()),
        ));
    }
    let (na, nb) = (norm(a), norm(b));
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return Ok(CosineSim {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(CosineSim {
        value: (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Row-normalized copy of `z`; degenerate rows become zero rows.
#[derive(Debug, Clone)]
pub(crate) struct Normalized {
    pub unit: Matrix,
    pub norms: Vec<f64>,
    pub degenerate: usize,
}

pub(crate) fn normalize_rows(z: &Matrix) -> Normalized {
    let mut unit = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    let mut degenerate = 0;
    for r in 0..z.rows() {
        let n = norm(z.row(r));
        norms.push(n);
        let row = unit.row_mut(r);
        if n < DEGENERATE_NORM {
            degenerate += 1;
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Normalized {
        unit,
        norms,
        degenerate,
    }
}

/// Cosine-similarity matrix `S[i][j] = cos(a_i, b_j)`.
pub fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape("cosine_matrix", a.shape(), b.shape()));
    }
    normalize_rows(a).unit.matmul_t(&normalize_rows(b).unit)
}

fn check_temperature(tau: f64) -> Result<()> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

fn check_pair(zu: &Matrix, ze: &Matrix, tau: f64) -> Result<()> {
    check_temperature(tau)?;
    if zu.shape() != ze.shape() {
        return Err(Error::shape("align_loss", zu.shape(), ze.shape()));
    }
    if zu.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Loss, gradients and diagnostics of one alignment evaluation.
#[derive(Debug, Clone)]
pub struct AlignOutput {
    pub loss: f64,
    pub grad_u: Matrix,
    pub grad_e: Matrix,
    /// Rows (on either side) whose norm fell below [`DEGENERATE_NORM`].
    pub degenerate_rows: usize,
}

struct Softmaxes {
    loss: f64,
    /// `dL/dS` for the scaled similarity matrix `S = cos / τ`.
    grad_logits: Matrix,
}

/// Both softmax directions over a `B × B` logit matrix whose diagonal holds
/// the positives; log-sum-exp with max subtraction.
fn bidirectional_softmax(logits: &Matrix) -> Softmaxes {
    let b = logits.rows();
    let mut row_lse = vec![0.0; b];
    let mut col_lse = vec![0.0; b];
    for i in 0..b {
        row_lse[i] = log_sum_exp((0..b).map(|j| logits.get(i, j)));
        col_lse[i] = log_sum_exp((0..b).map(|j| logits.get(j, i)));
    }
    let scale = 1.0 / (2.0 * b as f64);
    let mut loss = 0.0;
    for i in 0..b {
        let pos = logits.get(i, i);
        loss += softplus_gap((0..b).map(|j| logits.get(i, j)), pos)
            + softplus_gap((0..b).map(|j| logits.get(j, i)), pos);
    }
    let mut grad_logits = Matrix::zeros(b, b);
    for (i, &r_lse) in row_lse.iter().enumerate() {
        for (j, &c_lse) in col_lse.iter().enumerate() {
            let s = logits.get(i, j);
            let p_row = (s - r_lse).exp();
            let p_col = (s - c_lse).exp();
            let target = if i == j { 2.0 } else { 0.0 };
            grad_logits.set(i, j, scale * (p_row + p_col - target));
        }
    }
    Softmaxes {
        loss: loss * scale,
        grad_logits,
    }
}

/// `log_sum_exp(values) - pos` for a `pos` drawn from `values`, summed
/// through `ln_1p` so that a dominant positive keeps full relative precision.
fn softplus_gap(values: impl Iterator<Item = f64> + Clone, pos: f64) -> f64 {
    let (top, m) = values
        .clone()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (j, v)| {
            if v > best.1 {
                (j, v)
            } else {
                best
            }
        });
    let rest: f64 = values
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, v)| (v - m).exp())
        .sum();
    (m - pos).max(0.0) + rest.ln_1p()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Bidirectional InfoNCE over a batch whose row `i` on each side forms the
/// positive pair; every other row of the opposite side is a negative.
pub fn align_loss(zu: &Matrix, ze: &Matrix, tau: f64) -> Result<f64> {
    check_pair(zu, ze, tau)?;
    let mut logits = cosine_matrix(zu, ze)?;
    logits.scale(1.0 / tau);
    Ok(bidirectional_softmax(&logits).loss)
}

/// [`align_loss`] together with its exact gradient with respect to both
/// input matrices, through the cosine normalization.
pub fn align_loss_backward(zu: &Matrix, ze: &Matrix, tau: f64) -> Result<AlignOutput> {
    check_pair(zu, ze, tau)?;
    let nu = normalize_rows(zu);
    let ne = normalize_rows(ze);
    let mut logits = nu.unit.matmul_t(&ne.unit)?;
    logits.scale(1.0 / tau);
    let sm = bidirectional_softmax(&logits);

    // S = Nu Neᵀ / τ
    let mut g_nu = sm.grad_logits.matmul(&ne.unit)?;
    g_nu.scale(1.0 / tau);
    let mut g_ne = sm.grad_logits.t_matmul(&nu.unit)?;
    g_ne.scale(1.0 / tau);

    Ok(AlignOutput {
        loss: sm.loss,
        grad_u: normalization_backward(&nu, &g_nu),
        grad_e: normalization_backward(&ne, &g_ne),
        degenerate_rows: nu.degenerate + ne.degenerate,
    })
}

/// `dz = (g − n (n·g)) / ‖z‖` per row; zero for degenerate rows.
fn normalization_backward(n: &Normalized, g_unit: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(g_unit.rows(), g_unit.cols());
    for r in 0..g_unit.rows() {
        if n.norms[r] < DEGENERATE_NORM {
            continue;
        }
        let unit = n.unit.row(r);
        let g = g_unit.row(r);
        let proj = dot(unit, g);
        for ((o, &gi), &ui) in out.row_mut(r).iter_mut().zip(g).zip(unit) {
            *o = (gi - ui * proj) / n.norms[r];
        }
    }
    out
}

/// `log B − L`, in nats.
pub fn mi_lower_bound(loss: f64, batch_size: usize) -> f64 {
    (batch_size.max(1) as f64).ln() - loss
}
