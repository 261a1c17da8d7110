//! The combined objective `L_AU + λ_EE·L_EE + λ_align·L_align` and its
//! gradient through every parameter group.

use serde::{Deserialize, Serialize};

use crate::alignment::{align_loss_backward, AlignmentHead, Side};
use crate::datagen::Dataset;
use crate::encoders::{ee_loss_backward, AUModel, EEModel, Tap};
use crate::error::Result;
use crate::numerics::{Matrix, Parameters};

/// All trainable state of a joint run.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModels {
    pub au: AUModel,
    pub ee: EEModel,
    pub head: AlignmentHead,
}

impl Parameters for JointModels {
    fn params(&self) -> Vec<(&'static str, &Matrix)> {
        let mut p = self.au.params();
        p.extend(self.ee.params());
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let mut p = self.au.params_mut();
        p.extend(self.ee.params_mut());
        p.extend(self.head.params_mut());
        p
    }
}

/// Which terms of the objective are live.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    /// Include `L_AU` (gated per step by the understanding update frequency).
    pub au: bool,
    /// Weight on `L_EE`; `None` drops the execution branch entirely.
    pub lambda_ee: Option<f64>,
    /// Weight on `L_align`; `None` drops the alignment branch entirely.
    pub lambda_align: Option<f64>,
    pub align_temperature: f64,
    /// Alignment gradients update only the heads, not the encoders.
    pub stop_grad_encoders: bool,
}

/// Materialized inputs of one optimization step.
#[derive(Debug, Clone)]
pub struct StepInputs {
    /// Observation sequences of the u-side episodes.
    pub observations: Vec<Matrix>,
    /// Instruction of each u-side episode.
    pub u_instructions: Vec<usize>,
    /// Batch rows that enter `L_AU`: first occurrence of each instruction.
    pub au_rows: Vec<usize>,
    /// One keyframe state per e-side episode.
    pub states: Matrix,
    pub e_instructions: Vec<usize>,
    pub targets: Matrix,
}

impl StepInputs {
    /// Gathers the episode data for a batch of `(u, e)` episode pairs and the
    /// chosen keyframe of each e-side episode.
    pub fn gather(
        ds: &Dataset,
        pairs: &[(usize, usize)],
        keyframes: &[usize],
    ) -> Result<StepInputs> {
        let mut observations = Vec::with_capacity(pairs.len());
        let mut u_instructions = Vec::with_capacity(pairs.len());
        let mut au_rows = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        let mut state_rows = Vec::with_capacity(pairs.len());
        let mut target_rows = Vec::with_capacity(pairs.len());
        let mut e_instructions = Vec::with_capacity(pairs.len());
        for (row, (&(u, e), &k)) in pairs.iter().zip(keyframes).enumerate() {
            let ue = ds.episode(u);
            observations.push(ue.observations.clone());
            u_instructions.push(ue.instruction_id);
            if seen.insert(ue.instruction_id) {
                au_rows.push(row);
            }
            let ee = ds.episode(e);
            state_rows.push(ee.states.row(k).to_vec());
            target_rows.push(ee.actions.row(k).to_vec());
            e_instructions.push(ee.instruction_id);
        }
        Ok(StepInputs {
            observations,
            u_instructions,
            au_rows,
            states: Matrix::from_rows(&state_rows)?,
            e_instructions,
            targets: Matrix::from_rows(&target_rows)?,
        })
    }
}

/// Component losses of one evaluation. Absent terms are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    pub au: Option<f64>,
    pub ee: Option<f64>,
    pub align: Option<f64>,
    /// Weighted sum of the active terms.
    pub total: f64,
}

/// Gradient holder with the same layout as the trained models. Groups not
/// present in the run stay `None`.
#[derive(Debug, Clone)]
pub struct StepGrads {
    pub au: Option<AUModel>,
    pub ee: Option<EEModel>,
    pub head: Option<AlignmentHead>,
}

/// Borrowed view of whichever models a run trains.
#[derive(Debug, Clone, Copy)]
pub struct ModelRefs<'a> {
    pub au: Option<&'a AUModel>,
    pub ee: Option<&'a EEModel>,
    pub head: Option<&'a AlignmentHead>,
}

/// Evaluates the objective and its exact gradient.
///
/// `au_active` gates `L_AU` for this step. With alignment enabled both
/// encoders and the head must be present.
pub fn objective_and_grads(
    models: ModelRefs<'_>,
    inputs: &StepInputs,
    weights: &ObjectiveWeights,
    au_active: bool,
) -> Result<(StepLosses, StepGrads)> {
    let mut losses = StepLosses::default();
    let mut grads = StepGrads {
        au: models.au.map(|m| m.zeros_like()),
        ee: models.ee.map(|m| m.zeros_like()),
        head: models.head.map(|m| m.zeros_like()),
    };

    let au_fwd = match models.au {
        Some(au) => {
            let refs: Vec<&Matrix> = inputs.observations.iter().collect();
            Some(au.forward(&refs)?)
        }
        None => None,
    };
    let ee_fwd = match models.ee {
        Some(ee) => Some(ee.forward(&inputs.states, &inputs.e_instructions)?),
        None => None,
    };
    let mut grad_u = au_fwd
        .as_ref()
        .map(|f| Matrix::zeros(f.u.rows(), f.u.cols()));
    let mut grad_e = ee_fwd
        .as_ref()
        .map(|f| Matrix::zeros(f.e.rows(), f.e.cols()));

    if let (true, true, Some(au), Some(fwd)) = (weights.au, au_active, models.au, &au_fwd) {
        let ids: Vec<usize> = inputs
            .au_rows
            .iter()
            .map(|&r| inputs.u_instructions[r])
            .collect();
        let u_sub = fwd.u.select_rows(&inputs.au_rows);
        let out = au.loss_backward(&u_sub, &ids)?;
        losses.au = Some(out.loss);
        losses.total += out.loss;
        let gu = grad_u.as_mut().expect("present with au forward");
        for (sub_row, &row) in inputs.au_rows.iter().enumerate() {
            for (g, &v) in gu.row_mut(row).iter_mut().zip(out.grad_u.row(sub_row)) {
                *g += v;
            }
        }
        let g = grads.au.as_mut().expect("present with au model");
        g.prototypes.add_assign(&out.grad_prototypes)?;
    }

    let mut grad_actions = None;
    if let (Some(lambda), Some(fwd)) = (weights.lambda_ee, &ee_fwd) {
        let (loss, mut ga) = ee_loss_backward(&fwd.actions, &inputs.targets)?;
        losses.ee = Some(loss);
        losses.total += lambda * loss;
        if lambda != 1.0 {
            ga.scale(lambda);
        }
        grad_actions = Some(ga);
    }

    if let (Some(lambda), Some(head), Some(ufwd), Some(efwd)) =
        (weights.lambda_align, models.head, &au_fwd, &ee_fwd)
    {
        let zu = head.project_batch(Side::Understanding, &ufwd.u)?;
        let ze = head.project_batch(Side::Execution, &efwd.e)?;
        let out = align_loss_backward(&zu, &ze, weights.align_temperature)?;
        losses.align = Some(out.loss);
        losses.total += lambda * out.loss;
        if lambda != 0.0 {
            let mut gzu = out.grad_u;
            let mut gze = out.grad_e;
            gzu.scale(lambda);
            gze.scale(lambda);
            let gh = grads.head.as_mut().expect("present with head");
            let bu = head.backward(Side::Understanding, &gzu, &ufwd.u)?;
            let be = head.backward(Side::Execution, &gze, &efwd.e)?;
            gh.accumulate(Side::Understanding, &bu)?;
            gh.accumulate(Side::Execution, &be)?;
            if !weights.stop_grad_encoders {
                grad_u.as_mut().expect("au forward").add_assign(&bu.input)?;
                grad_e.as_mut().expect("ee forward").add_assign(&be.input)?;
            }
        }
    }

    if let (Some(au), Some(fwd), Some(gu)) = (models.au, &au_fwd, &grad_u) {
        au.backward(fwd, gu, Tap::Output, grads.au.as_mut().expect("present"))?;
    }
    if let (Some(ee), Some(fwd), Some(ge)) = (models.ee, &ee_fwd, &grad_e) {
        ee.backward(
            fwd,
            grad_actions.as_ref(),
            Some((ge, Tap::Output)),
            grads.ee.as_mut().expect("present"),
        )?;
    }
    Ok((losses, grads))
}

/// Objective value only.
pub fn objective(
    models: ModelRefs<'_>,
    inputs: &StepInputs,
    weights: &ObjectiveWeights,
    au_active: bool,
) -> Result<StepLosses> {
    Ok(objective_and_grads(models, inputs, weights, au_active)?.0)
}

impl JointModels {
    pub fn refs(&self) -> ModelRefs<'_> {
        ModelRefs {
            au: Some(&self.au),
            ee: Some(&self.ee),
            head: Some(&self.head),
        }
    }
}

impl StepGrads {
    /// Gradients of a full joint step as a [`JointModels`] value.
    pub fn into_joint(self) -> Option<JointModels> {
        Some(JointModels {
            au: self.au?,
            ee: self.ee?,
            head: self.head?,
        })
    }
}
