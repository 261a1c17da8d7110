//! The two task models: an action-understanding encoder that retrieves the
//! instruction matching an observation sequence, and an embodied-execution
//! encoder that regresses the next action from state and instruction.

use serde::{Deserialize, Serialize};

use crate::alignment::{align_loss, align_loss_backward, cosine_similarity};
use crate::error::{Error, Result};
use crate::numerics::{
    affine_backward, affine_forward, gaussian_weight, norm, Matrix, Parameters, SeededSampler,
};

pub const DEFAULT_AU_TEMPERATURE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub hidden: usize,
    pub d_u: usize,
    pub d_e: usize,
    /// Width of the execution model's learned instruction embedding.
    pub d_instruction: usize,
    pub au_temperature: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hidden: 32,
            d_u: 16,
            d_e: 16,
            d_instruction: 8,
            au_temperature: DEFAULT_AU_TEMPERATURE,
        }
    }
}

/// Which activation of an encoder is exposed as its representation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tap {
    /// Final encoder output (`u` or `e`).
    #[default]
    Output,
    /// Hidden activation after the nonlinearity.
    Hidden,
}

fn tanh_backward(grad: &Matrix, activated: &Matrix) -> Matrix {
    let mut out = grad.clone();
    for (g, &h) in out.data_mut().iter_mut().zip(activated.data()) {
        *g *= 1.0 - h * h;
    }
    out
}

fn add_row(dst: &mut Matrix, bias: &[f64]) -> Result<()> {
    dst.add_assign(&Matrix::row_vector(bias))
}

// ---------------------------------------------------------------------------
// Action understanding
// ---------------------------------------------------------------------------

/// Per-timestep two-layer map, mean-pooled over time, plus one prototype per
/// instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AUModel {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub prototypes: Matrix,
    pub temperature: f64,
}

/// Cached activations of a batched observation encoding.
#[derive(Debug, Clone)]
pub struct AuForward {
    inputs: Matrix,
    hidden: Matrix,
    /// Start row of each sequence in `inputs`, plus a final sentinel.
    offsets: Vec<usize>,
    pooled: Matrix,
    pub u: Matrix,
}

impl AuForward {
    pub fn representation(&self, tap: Tap) -> &Matrix {
        match tap {
            Tap::Output => &self.u,
            Tap::Hidden => &self.pooled,
        }
    }
}

impl AUModel {
    pub fn new(
        d_obs: usize,
        instructions: usize,
        cfg: &EncoderConfig,
        rng: &mut SeededSampler,
    ) -> Self {
        AUModel {
            w1: gaussian_weight(cfg.hidden, d_obs, rng),
            b1: Matrix::zeros(1, cfg.hidden),
            w2: gaussian_weight(cfg.d_u, cfg.hidden, rng),
            b2: Matrix::zeros(1, cfg.d_u),
            prototypes: Matrix::from_vec(
                instructions,
                cfg.d_u,
                rng.normal_vec(instructions * cfg.d_u, 1.0),
            )
            .expect("length matches by construction"),
            temperature: cfg.au_temperature,
        }
    }

    pub fn d_obs(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_u(&self) -> usize {
        self.w2.rows()
    }

    pub fn instruction_count(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn forward(&self, sequences: &[&Matrix]) -> Result<AuForward> {
        let d_obs = self.d_obs();
        let mut offsets = Vec::with_capacity(sequences.len() + 1);
        let mut total = 0;
        for s in sequences {
            if s.cols() != d_obs {
                return Err(Error::shape(
                    "encode_observation",
                    (s.rows(), d_obs),
                    s.shape(),
                ));
            }
            if s.rows() == 0 {
                return Err(Error::Config(
                    "observation sequence must have T >= 1".into(),
                ));
            }
            offsets.push(total);
            total += s.rows();
        }
        offsets.push(total);
        let mut data = Vec::with_capacity(total * d_obs);
        for s in sequences {
            data.extend_from_slice(s.data());
        }
        let inputs = Matrix::from_vec(total, d_obs, data)?;
        let hidden = affine_forward(&self.w1, self.b1.data(), &inputs)?.map(f64::tanh);

        let h = self.w1.rows();
        let mut pooled = Matrix::zeros(sequences.len(), h);
        for b in 0..sequences.len() {
            let (lo, hi) = (offsets[b], offsets[b + 1]);
            let inv = 1.0 / (hi - lo) as f64;
            let row = pooled.row_mut(b);
            for t in lo..hi {
                for (p, &v) in row.iter_mut().zip(hidden.row(t)) {
                    *p += v;
                }
            }
            row.iter_mut().for_each(|p| *p *= inv);
        }
        let u = affine_forward(&self.w2, self.b2.data(), &pooled)?;
        Ok(AuForward {
            inputs,
            hidden,
            offsets,
            pooled,
            u,
        })
    }

    /// Accumulates encoder gradients for an upstream gradient on `u` (or on
    /// the pooled hidden layer when `tap` is [`Tap::Hidden`]).
    pub fn backward(
        &self,
        fwd: &AuForward,
        grad: &Matrix,
        tap: Tap,
        grads: &mut AUModel,
    ) -> Result<()> {
        let grad_pooled = match tap {
            Tap::Output => {
                let g = affine_backward(grad, &self.w2, &fwd.pooled)?;
                grads.w2.add_assign(&g.weight)?;
                add_row(&mut grads.b2, &g.bias)?;
                g.input
            }
            Tap::Hidden => {
                if grad.shape() != fwd.pooled.shape() {
                    return Err(Error::shape(
                        "au_backward",
                        fwd.pooled.shape(),
                        grad.shape(),
                    ));
                }
                grad.clone()
            }
        };
        let mut grad_hidden = Matrix::zeros(fwd.hidden.rows(), fwd.hidden.cols());
        for b in 0..fwd.offsets.len() - 1 {
            let (lo, hi) = (fwd.offsets[b], fwd.offsets[b + 1]);
            let inv = 1.0 / (hi - lo) as f64;
            for t in lo..hi {
                for (g, &p) in grad_hidden.row_mut(t).iter_mut().zip(grad_pooled.row(b)) {
                    *g = p * inv;
                }
            }
        }
        let grad_pre = tanh_backward(&grad_hidden, &fwd.hidden);
        let g = affine_backward(&grad_pre, &self.w1, &fwd.inputs)?;
        grads.w1.add_assign(&g.weight)?;
        add_row(&mut grads.b1, &g.bias)
    }

    /// Representation of one observation sequence (`T × d_obs`).
    pub fn encode_observation(&self, observations: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward(&[observations])?.u.into_data())
    }

    /// Loss and gradients (encoder output and prototype table) of the
    /// understanding objective on one batch.
    pub fn loss_backward(&self, u: &Matrix, instruction_ids: &[usize]) -> Result<AuLossOutput> {
        let protos = self.gather_prototypes(u, instruction_ids)?;
        let out = align_loss_backward(u, &protos, self.temperature)?;
        let mut grad_prototypes = Matrix::zeros(self.prototypes.rows(), self.prototypes.cols());
        for (r, &id) in instruction_ids.iter().enumerate() {
            for (g, &v) in grad_prototypes
                .row_mut(id)
                .iter_mut()
                .zip(out.grad_e.row(r))
            {
                *g += v;
            }
        }
        Ok(AuLossOutput {
            loss: out.loss,
            grad_u: out.grad_u,
            grad_prototypes,
        })
    }

    fn gather_prototypes(&self, u: &Matrix, ids: &[usize]) -> Result<Matrix> {
        if u.rows() != ids.len() {
            return Err(Error::shape("au_loss", u.shape(), (ids.len(), self.d_u())));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.instruction_count()) {
            return Err(Error::Config(format!("instruction id {bad} out of range")));
        }
        Ok(self.prototypes.select_rows(ids))
    }
}

impl Parameters for AUModel {
    fn params(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("au.w1", &self.w1),
            ("au.b1", &self.b1),
            ("au.w2", &self.w2),
            ("au.b2", &self.b2),
            ("au.prototypes", &self.prototypes),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("au.w1", &mut self.w1),
            ("au.b1", &mut self.b1),
            ("au.w2", &mut self.w2),
            ("au.b2", &mut self.b2),
            ("au.prototypes", &mut self.prototypes),
        ]
    }
}

pub fn encode_observation(model: &AUModel, observations: &Matrix) -> Result<Vec<f64>> {
    model.encode_observation(observations)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuLogits {
    /// `cos(u, prototype_j) / τ` for every instruction.
    pub scores: Vec<f64>,
    /// Argmax, lowest index on ties.
    pub prediction: usize,
    /// Some pair involved a near-zero vector and was scored 0.
    pub degenerate: bool,
}

pub fn au_logits(model: &AUModel, u: &[f64]) -> Result<AuLogits> {
    if model.instruction_count() == 0 {
        return Err(Error::Config("prototype table is empty".into()));
    }
    let mut scores = Vec::with_capacity(model.instruction_count());
    let mut degenerate = false;
    for p in model.prototypes.iter_rows() {
        let c = cosine_similarity(u, p)?;
        degenerate |= c.degenerate;
        scores.push(c.value / model.temperature);
    }
    let prediction = argmax(&scores);
    Ok(AuLogits {
        scores,
        prediction,
        degenerate,
    })
}

/// Index of the maximum; lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct AuLossOutput {
    pub loss: f64,
    pub grad_u: Matrix,
    /// Gradient for the full prototype table (rows outside the batch are zero).
    pub grad_prototypes: Matrix,
}

/// Symmetric InfoNCE between representations and their instructions'
/// prototypes at the model's temperature.
pub fn au_loss(model: &AUModel, u: &Matrix, instruction_ids: &[usize]) -> Result<f64> {
    align_loss(
        u,
        &model.gather_prototypes(u, instruction_ids)?,
        model.temperature,
    )
}

// ---------------------------------------------------------------------------
// Embodied execution
// ---------------------------------------------------------------------------

/// Two-layer map on `[state ; instruction embedding]` followed by an affine
/// action head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EEModel {
    pub instruction_embedding: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

#[derive(Debug, Clone)]
pub struct EeForward {
    instruction_ids: Vec<usize>,
    inputs: Matrix,
    hidden: Matrix,
    pub e: Matrix,
    pub actions: Matrix,
}

impl EeForward {
    pub fn representation(&self, tap: Tap) -> &Matrix {
        match tap {
            Tap::Output => &self.e,
            Tap::Hidden => &self.hidden,
        }
    }
}

impl EEModel {
    pub fn new(
        d_state: usize,
        d_act: usize,
        instructions: usize,
        cfg: &EncoderConfig,
        rng: &mut SeededSampler,
    ) -> Self {
        let d_in = d_state + cfg.d_instruction;
        EEModel {
            instruction_embedding: Matrix::from_vec(
                instructions,
                cfg.d_instruction,
                rng.normal_vec(instructions * cfg.d_instruction, 1.0),
            )
            .expect("length matches by construction"),
            w1: gaussian_weight(cfg.hidden, d_in, rng),
            b1: Matrix::zeros(1, cfg.hidden),
            w2: gaussian_weight(cfg.d_e, cfg.hidden, rng),
            b2: Matrix::zeros(1, cfg.d_e),
            head_w: gaussian_weight(d_act, cfg.d_e, rng),
            head_b: Matrix::zeros(1, d_act),
        }
    }

    pub fn d_state(&self) -> usize {
        self.w1.cols() - self.instruction_embedding.cols()
    }

    pub fn d_e(&self) -> usize {
        self.w2.rows()
    }

    pub fn d_act(&self) -> usize {
        self.head_w.rows()
    }

    pub fn embedding(&self, instruction_id: usize) -> &[f64] {
        self.instruction_embedding.row(instruction_id)
    }

    /// Batched forward pass: one state row per instruction id.
    pub fn forward(&self, states: &Matrix, instruction_ids: &[usize]) -> Result<EeForward> {
        if states.rows() != instruction_ids.len() {
            return Err(Error::shape(
                "encode_execution",
                states.shape(),
                (instruction_ids.len(), self.d_state()),
            ));
        }
        if let Some(&bad) = instruction_ids
            .iter()
            .find(|&&id| id >= self.instruction_embedding.rows())
        {
            return Err(Error::Config(format!("instruction id {bad} out of range")));
        }
        let embeddings = self.instruction_embedding.select_rows(instruction_ids);
        let inputs = self.concat_inputs(states, &embeddings)?;
        let mut fwd = self.forward_inputs(inputs)?;
        fwd.instruction_ids = instruction_ids.to_vec();
        Ok(fwd)
    }

    fn concat_inputs(&self, states: &Matrix, embeddings: &Matrix) -> Result<Matrix> {
        let (ds, di) = (self.d_state(), self.instruction_embedding.cols());
        if states.cols() != ds || embeddings.cols() != di || states.rows() != embeddings.rows() {
            return Err(Error::shape(
                "encode_execution",
                states.shape(),
                embeddings.shape(),
            ));
        }
        let mut inputs = Matrix::zeros(states.rows(), ds + di);
        for r in 0..states.rows() {
            let row = inputs.row_mut(r);
            row[..ds].copy_from_slice(states.row(r));
            row[ds..].copy_from_slice(embeddings.row(r));
        }
        Ok(inputs)
    }

    fn forward_inputs(&self, inputs: Matrix) -> Result<EeForward> {
        let hidden = affine_forward(&self.w1, self.b1.data(), &inputs)?.map(f64::tanh);
        let e = affine_forward(&self.w2, self.b2.data(), &hidden)?;
        let actions = affine_forward(&self.head_w, self.head_b.data(), &e)?;
        Ok(EeForward {
            instruction_ids: Vec::new(),
            inputs,
            hidden,
            e,
            actions,
        })
    }

    /// Accumulates gradients given upstream gradients on the predicted
    /// actions and (optionally) directly on the representation.
    pub fn backward(
        &self,
        fwd: &EeForward,
        grad_actions: Option<&Matrix>,
        grad_repr: Option<(&Matrix, Tap)>,
        grads: &mut EEModel,
    ) -> Result<()> {
        let mut grad_e = Matrix::zeros(fwd.e.rows(), fwd.e.cols());
        if let Some(ga) = grad_actions {
            let g = affine_backward(ga, &self.head_w, &fwd.e)?;
            grads.head_w.add_assign(&g.weight)?;
            add_row(&mut grads.head_b, &g.bias)?;
            grad_e.add_assign(&g.input)?;
        }
        let mut grad_hidden = Matrix::zeros(fwd.hidden.rows(), fwd.hidden.cols());
        match grad_repr {
            Some((g, Tap::Output)) => grad_e.add_assign(g)?,
            Some((g, Tap::Hidden)) => grad_hidden.add_assign(g)?,
            None => {}
        }
        let g = affine_backward(&grad_e, &self.w2, &fwd.hidden)?;
        grads.w2.add_assign(&g.weight)?;
        add_row(&mut grads.b2, &g.bias)?;
        grad_hidden.add_assign(&g.input)?;

        let grad_pre = tanh_backward(&grad_hidden, &fwd.hidden);
        let g = affine_backward(&grad_pre, &self.w1, &fwd.inputs)?;
        grads.w1.add_assign(&g.weight)?;
        add_row(&mut grads.b1, &g.bias)?;
        let ds = self.d_state();
        for (r, &id) in fwd.instruction_ids.iter().enumerate() {
            for (dst, &v) in grads
                .instruction_embedding
                .row_mut(id)
                .iter_mut()
                .zip(&g.input.row(r)[ds..])
            {
                *dst += v;
            }
        }
        Ok(())
    }

    pub fn encode_execution(
        &self,
        state: &[f64],
        instruction_embedding: &[f64],
    ) -> Result<Vec<f64>> {
        let inputs = self.concat_inputs(
            &Matrix::row_vector(state),
            &Matrix::row_vector(instruction_embedding),
        )?;
        Ok(self.forward_inputs(inputs)?.e.into_data())
    }

    pub fn predict(&self, e: &[f64]) -> Result<Vec<f64>> {
        Ok(affine_forward(&self.head_w, self.head_b.data(), &Matrix::row_vector(e))?.into_data())
    }
}

impl Parameters for EEModel {
    fn params(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("ee.instruction_embedding", &self.instruction_embedding),
            ("ee.w1", &self.w1),
            ("ee.b1", &self.b1),
            ("ee.w2", &self.w2),
            ("ee.b2", &self.b2),
            ("ee.head_w", &self.head_w),
            ("ee.head_b", &self.head_b),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        vec![
            ("ee.instruction_embedding", &mut self.instruction_embedding),
            ("ee.w1", &mut self.w1),
            ("ee.b1", &mut self.b1),
            ("ee.w2", &mut self.w2),
            ("ee.b2", &mut self.b2),
            ("ee.head_w", &mut self.head_w),
            ("ee.head_b", &mut self.head_b),
        ]
    }
}

pub fn encode_execution(
    model: &EEModel,
    state: &[f64],
    instruction_embedding: &[f64],
) -> Result<Vec<f64>> {
    model.encode_execution(state, instruction_embedding)
}

pub fn ee_predict(model: &EEModel, e: &[f64]) -> Result<Vec<f64>> {
    model.predict(e)
}

/// Mean squared error over every batch row and action dimension.
pub fn ee_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("ee_loss", pred.shape(), target.shape()));
    }
    if pred.data().is_empty() {
        return Err(Error::EmptyBatch);
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.data().len() as f64)
}

/// Loss and its gradient with respect to `pred`.
pub fn ee_loss_backward(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    let loss = ee_loss(pred, target)?;
    let scale = 2.0 / pred.data().len() as f64;
    let mut grad = pred.clone();
    for (g, t) in grad.data_mut().iter_mut().zip(target.data()) {
        *g = scale * (*g - t);
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRule {
    /// Maximum action-error norm allowed at every keyframe.
    pub tolerance: f64,
}

impl Default for SuccessRule {
    fn default() -> Self {
        SuccessRule { tolerance: 0.9 }
    }
}

/// True iff every keyframe's action error norm is within tolerance.
pub fn ee_success(preds: &Matrix, targets: &Matrix, rule: &SuccessRule) -> bool {
    debug_assert_eq!(preds.shape(), targets.shape());
    preds.iter_rows().zip(targets.iter_rows()).all(|(p, t)| {
        let diff: Vec<f64> = p.iter().zip(t).map(|(a, b)| a - b).collect();
        norm(&diff) <= rule.tolerance
    })
}
