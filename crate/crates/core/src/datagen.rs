//! Synthetic paired observation/execution data.
//!
//! Every episode carries a hidden semantic latent `g`. Its observation
//! sequence and its execution keyframes are two different fixed linear
//! renderings of `g`, each with its own private nuisance factors and noise,
//! so the two streams share information without sharing a representation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gaussian_weight, norm, Matrix, SeededSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub classes: usize,
    pub variations: usize,
    pub episodes_per_instruction: usize,
    pub d_latent: usize,
    pub d_obs: usize,
    pub d_state: usize,
    pub d_act: usize,
    /// Observation sequence length.
    pub timesteps: usize,
    /// Execution keyframes per episode.
    pub keyframes: usize,
    /// Norm of each class prototype.
    pub class_scale: f64,
    /// Std of each coordinate of a variation offset around its class prototype,
    /// before the offset norm is capped short of the nearest other class.
    pub variation_scale: f64,
    /// Std of the per-episode perturbation of the instruction latent.
    pub latent_noise: f64,
    pub obs_noise: f64,
    pub exec_noise: f64,
    /// Log-std of the per-episode multiplier applied to both noise levels.
    pub difficulty_spread: f64,
    pub nuisance_dims: usize,
    /// Std of each nuisance factor.
    pub nuisance_scale: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            classes: 6,
            variations: 4,
            episodes_per_instruction: 12,
            d_latent: 8,
            d_obs: 24,
            d_state: 24,
            d_act: 4,
            timesteps: 6,
            keyframes: 4,
            class_scale: 3.0,
            variation_scale: 0.8,
            latent_noise: 0.25,
            obs_noise: 0.6,
            exec_noise: 0.3,
            difficulty_spread: 0.8,
            nuisance_dims: 8,
            nuisance_scale: 1.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("variations", self.variations),
            ("episodes_per_instruction", self.episodes_per_instruction),
            ("d_latent", self.d_latent),
            ("d_obs", self.d_obs),
            ("d_state", self.d_state),
            ("d_act", self.d_act),
            ("timesteps", self.timesteps),
            ("keyframes", self.keyframes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let levels = [
            ("class_scale", self.class_scale),
            ("variation_scale", self.variation_scale),
            ("latent_noise", self.latent_noise),
            ("obs_noise", self.obs_noise),
            ("exec_noise", self.exec_noise),
            ("difficulty_spread", self.difficulty_spread),
            ("nuisance_scale", self.nuisance_scale),
        ];
        for (name, v) in levels {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn instruction_count(&self) -> usize {
        self.classes * self.variations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (train|test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub id: usize,
    pub class_id: usize,
    pub variation: usize,
    /// Color, placement and count codes.
    pub slots: [u8; 3],
    /// Cosmetic label; models only ever see `id`.
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: usize,
    pub instruction_id: usize,
    pub class_id: usize,
    /// Hidden ground-truth latent, kept for oracle checks.
    pub latent: Vec<f64>,
    /// `timesteps × d_obs`
    pub observations: Matrix,
    /// `keyframes × d_state`
    pub states: Matrix,
    /// `keyframes × d_act`
    pub actions: Matrix,
    /// Per-episode noise multiplier.
    pub difficulty: f64,
    pub split: Split,
}

/// The fixed random maps shared by every episode of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    /// `classes × d_latent`
    pub class_prototypes: Matrix,
    /// `instructions × d_latent`, class prototype plus variation offset.
    pub instruction_latents: Matrix,
    pub obs_render: Matrix,
    pub obs_nuisance: Matrix,
    pub obs_drift: Vec<f64>,
    pub state_render: Matrix,
    pub state_nuisance: Matrix,
    pub state_drift: Vec<f64>,
    pub action_map: Matrix,
    pub action_drift: Vec<f64>,
}

impl World {
    /// Fraction along the observation sequence at timestep `t`.
    pub fn timestep_phase(t: usize, timesteps: usize) -> f64 {
        if timesteps <= 1 {
            0.0
        } else {
            t as f64 / (timesteps - 1) as f64
        }
    }

    /// Execution progress at keyframe `k`, in `(0, 1]`.
    pub fn keyframe_progress(k: usize, keyframes: usize) -> f64 {
        (k + 1) as f64 / keyframes as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub world: World,
    pub instructions: Vec<Instruction>,
    pub episodes: Vec<Episode>,
    /// Non-fatal findings about the configuration or the split.
    pub warnings: Vec<String>,
}

const COLORS: [&str; 20] = [
    "red", "maroon", "lime", "green", "blue", "navy", "yellow", "cyan", "magenta", "silver",
    "gray", "orange", "olive", "purple", "teal", "azure", "violet", "rose", "black", "white",
];
const PLACES: [&str; 3] = ["top", "middle", "bottom"];
const TEMPLATES: [&str; 8] = [
    "open the {place} drawer",
    "push the {color} button",
    "stack {count} {color} blocks",
    "put the ring on the {color} spoke",
    "slide the block to {color} target",
    "put the item in the {place} shelf",
    "close the {color} jar",
    "sweep the dirt to the {place} dustpan",
];

fn instruction_text(class_id: usize, slots: [u8; 3]) -> String {
    let template = TEMPLATES[class_id % TEMPLATES.len()];
    let mut text = template
        .replace("{color}", COLORS[slots[0] as usize % COLORS.len()])
        .replace("{place}", PLACES[slots[1] as usize % PLACES.len()])
        .replace("{count}", &(slots[2] as usize + 1).to_string());
    if class_id >= TEMPLATES.len() {
        text = format!("{text} (task {class_id})");
    }
    text
}

fn variation_slots(variation: usize) -> [u8; 3] {
    [
        (variation % COLORS.len()) as u8,
        (variation % PLACES.len()) as u8,
        (variation % 3) as u8,
    ]
}

/// Random rows orthogonalized (Gram-Schmidt) and scaled to `scale`; falls
/// back to plain Gaussian rows when `rows > cols`.
/// Variation offsets are capped at this fraction of half the smallest gap
/// between class prototypes, so every noiseless latent stays nearest to its
/// own class prototype.
const OFFSET_REACH: f64 = 0.9;

fn min_pairwise_distance(rows: &Matrix) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..rows.rows() {
        for b in a + 1..rows.rows() {
            let d2: f64 = rows
                .row(a)
                .iter()
                .zip(rows.row(b))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            best = best.min(d2.sqrt());
        }
    }
    best
}

fn separated_prototypes(rows: usize, cols: usize, scale: f64, rng: &mut SeededSampler) -> Matrix {
    let mut m = Matrix::from_vec(rows, cols, rng.normal_vec(rows * cols, 1.0))
        .expect("length matches by construction");
    let orthogonalize = rows <= cols;
    for r in 0..rows {
        if orthogonalize {
            for prev in 0..r {
                let proj = crate::numerics::dot(m.row(r), m.row(prev));
                let prev_row = m.row(prev).to_vec();
                for (v, p) in m.row_mut(r).iter_mut().zip(&prev_row) {
                    *v -= proj * p;
                }
            }
        }
        let n = norm(m.row(r));
        if n > 0.0 {
            m.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
    }
    m.scale(scale);
    m
}

fn build_world(cfg: &GenConfig, rng: &SeededSampler) -> World {
    let mut protos_rng = rng.fork("class-prototypes");
    let class_prototypes =
        separated_prototypes(cfg.classes, cfg.d_latent, cfg.class_scale, &mut protos_rng);

    let mut var_rng = rng.fork("variations");
    let reach = OFFSET_REACH * min_pairwise_distance(&class_prototypes) / 2.0;
    let mut instruction_latents = Matrix::zeros(cfg.instruction_count(), cfg.d_latent);
    for c in 0..cfg.classes {
        for v in 0..cfg.variations {
            let mut offset = var_rng.normal_vec(cfg.d_latent, cfg.variation_scale);
            let n = norm(&offset);
            if n > reach {
                offset.iter_mut().for_each(|x| *x *= reach / n);
            }
            let row = instruction_latents.row_mut(c * cfg.variations + v);
            for (k, (x, o)) in row.iter_mut().zip(&offset).enumerate() {
                *x = class_prototypes.get(c, k) + o;
            }
        }
    }

    let mut render_rng = rng.fork("renderings");
    let obs_render = gaussian_weight(cfg.d_obs, cfg.d_latent, &mut render_rng);
    let obs_nuisance = gaussian_weight(cfg.d_obs, cfg.nuisance_dims.max(1), &mut render_rng);
    let obs_drift = render_rng.normal_vec(cfg.d_obs, 1.0);
    let state_render = gaussian_weight(cfg.d_state, cfg.d_latent, &mut render_rng);
    let state_nuisance = gaussian_weight(cfg.d_state, cfg.nuisance_dims.max(1), &mut render_rng);
    let state_drift = render_rng.normal_vec(cfg.d_state, 1.0);
    let action_map = gaussian_weight(cfg.d_act, cfg.d_latent, &mut render_rng);
    let action_drift = render_rng.normal_vec(cfg.d_act, 1.0);

    World {
        class_prototypes,
        instruction_latents,
        obs_render,
        obs_nuisance: trim_cols(obs_nuisance, cfg.nuisance_dims),
        obs_drift,
        state_render,
        state_nuisance: trim_cols(state_nuisance, cfg.nuisance_dims),
        state_drift,
        action_map,
        action_drift,
    }
}

fn trim_cols(m: Matrix, cols: usize) -> Matrix {
    if m.cols() == cols {
        return m;
    }
    let mut out = Matrix::zeros(m.rows(), cols);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[..cols]);
    }
    out
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter_rows()
        .map(|row| crate::numerics::dot(row, v))
        .collect()
}

fn generate_episode(
    cfg: &GenConfig,
    world: &World,
    id: usize,
    instruction: &Instruction,
    rng: &mut SeededSampler,
) -> Episode {
    let difficulty = (cfg.difficulty_spread * rng.normal()).exp();
    let base = world.instruction_latents.row(instruction.id);
    let latent: Vec<f64> = base
        .iter()
        .map(|&b| b + cfg.latent_noise * rng.normal())
        .collect();

    let obs_nuis = rng.normal_vec(cfg.nuisance_dims, cfg.nuisance_scale);
    let obs_static: Vec<f64> = mat_vec(&world.obs_render, &latent)
        .iter()
        .zip(mat_vec(&world.obs_nuisance, &obs_nuis))
        .map(|(a, b)| a + b)
        .collect();
    let mut observations = Matrix::zeros(cfg.timesteps, cfg.d_obs);
    for t in 0..cfg.timesteps {
        let phase = World::timestep_phase(t, cfg.timesteps);
        for (j, v) in observations.row_mut(t).iter_mut().enumerate() {
            *v = obs_static[j]
                + phase * world.obs_drift[j]
                + difficulty * cfg.obs_noise * rng.normal();
        }
    }

    let state_nuis = rng.normal_vec(cfg.nuisance_dims, cfg.nuisance_scale);
    let state_static: Vec<f64> = mat_vec(&world.state_render, &latent)
        .iter()
        .zip(mat_vec(&world.state_nuisance, &state_nuis))
        .map(|(a, b)| a + b)
        .collect();
    let action_static = mat_vec(&world.action_map, &latent);
    let mut states = Matrix::zeros(cfg.keyframes, cfg.d_state);
    let mut actions = Matrix::zeros(cfg.keyframes, cfg.d_act);
    for k in 0..cfg.keyframes {
        let progress = World::keyframe_progress(k, cfg.keyframes);
        for (j, v) in states.row_mut(k).iter_mut().enumerate() {
            *v = state_static[j]
                + progress * world.state_drift[j]
                + difficulty * cfg.exec_noise * rng.normal();
        }
        for (j, v) in actions.row_mut(k).iter_mut().enumerate() {
            *v = action_static[j] + progress * world.action_drift[j];
        }
    }

    Episode {
        id,
        instruction_id: instruction.id,
        class_id: instruction.class_id,
        latent,
        observations,
        states,
        actions,
        difficulty,
        split: Split::Train,
    }
}

/// Builds the instruction table and every episode. All episodes start in
/// the train split; see [`split_dataset`].
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = SeededSampler::new(cfg.seed);
    let mut warnings = Vec::new();
    if cfg.d_latent < cfg.classes {
        warnings.push(format!(
            "d_latent ({}) < classes ({}): class prototypes cannot be mutually orthogonal",
            cfg.d_latent, cfg.classes
        ));
    }
    let world = build_world(cfg, &root);

    let instructions: Vec<Instruction> = (0..cfg.classes)
        .flat_map(|c| (0..cfg.variations).map(move |v| (c, v)))
        .enumerate()
        .map(|(id, (class_id, variation))| {
            let slots = variation_slots(variation);
            Instruction {
                id,
                class_id,
                variation,
                slots,
                text: instruction_text(class_id, slots),
            }
        })
        .collect();

    let mut episodes = Vec::with_capacity(instructions.len() * cfg.episodes_per_instruction);
    for instr in &instructions {
        for _ in 0..cfg.episodes_per_instruction {
            let id = episodes.len();
            let mut rng = root.fork_indexed("episode", id as u64);
            episodes.push(generate_episode(cfg, &world, id, instr, &mut rng));
        }
    }

    Ok(Dataset {
        config: cfg.clone(),
        world,
        instructions,
        episodes,
        warnings,
    })
}

/// Stratified train/test assignment: each instruction with at least two
/// episodes sends `round(n · test_fraction)` of them (clamped to `1..n-1`)
/// to the test split.
pub fn split_dataset(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<Dataset> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut out = ds.clone();
    let root = SeededSampler::new(seed);
    for instr in &ds.instructions {
        let mut members: Vec<usize> = ds
            .episodes
            .iter()
            .filter(|e| e.instruction_id == instr.id)
            .map(|e| e.id)
            .collect();
        for &m in &members {
            out.episodes[m].split = Split::Train;
        }
        let n = members.len();
        if n < 2 {
            if n == 1 {
                out.warnings.push(format!(
                    "instruction {} has a single episode; kept in train",
                    instr.id
                ));
            }
            continue;
        }
        let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
        let mut rng = root.fork_indexed("split", instr.id as u64);
        rng.shuffle(&mut members);
        for &m in &members[..n_test] {
            out.episodes[m].split = Split::Test;
        }
    }
    Ok(out)
}

impl Dataset {
    pub fn instruction_count(&self) -> usize {
        self.instructions.len()
    }

    pub fn class_count(&self) -> usize {
        self.config.classes
    }

    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        self.episodes
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id)
            .collect()
    }

    pub fn episode(&self, id: usize) -> &Episode {
        &self.episodes[id]
    }
}
