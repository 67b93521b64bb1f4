//! Actor/critic policy models: the masked transformer actor, its MLP
//! variant, the oracle damage-detection step, and the mask-free critic.

mod mlp;
mod transformer;

pub use mlp::{MlpActorParams, MlpConfig};
pub use transformer::{ActorParams, CriticParams};

use std::rc::Rc;

use crate::damage::DetectabilityFlags;
use crate::nn::{MaskMatrix, Matrix};
use crate::rng::RngStream;
use crate::{Result, UmcError};

/// How the attention mask realizes "excluded from further contribution".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    /// Blank the masked joints' key columns in every row; the joint's own
    /// query row stays active so its torque output remains defined.
    #[default]
    Column,
    /// Additionally blank the masked joints' query rows (except the
    /// diagonal, which keeps softmax defined).
    RowAndColumn,
}

/// Transformer topology knobs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_joints: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub mask_mode: MaskMode,
}

impl ModelConfig {
    /// Token count: one per joint plus the flag token.
    pub fn tokens(&self) -> usize {
        self.n_joints + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_joints == 0 {
            return Err(UmcError::invalid("model", "n_joints must be >= 1"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(UmcError::invalid(
                "model",
                format!("d_model {} not divisible by heads {}", self.d_model, self.heads),
            ));
        }
        Ok(())
    }

    /// Small configuration for CPU-scale training.
    pub fn desk(n_joints: usize) -> Self {
        ModelConfig { n_joints, d_model: 8, blocks: 1, heads: 2, d_ff: 16, mask_mode: MaskMode::Column }
    }

    /// The reference full-size configuration (used for parameter counting).
    pub fn full(n_joints: usize) -> Self {
        ModelConfig { n_joints, d_model: 120, blocks: 4, heads: 2, d_ff: 128, mask_mode: MaskMode::Column }
    }
}

/// Per-joint observation rows `(position, velocity, previous action)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    data: Matrix,
}

pub const OBS_COLS: usize = 3;

impl Observation {
    pub fn new(data: Matrix) -> Result<Self> {
        if data.cols() != OBS_COLS {
            return Err(UmcError::shape("observation", format!("{}x{}", data.rows(), data.cols())));
        }
        data.check_finite("observation")?;
        Ok(Observation { data })
    }

    pub fn from_rows(rows: &[[f64; OBS_COLS]]) -> Self {
        let m = Matrix::from_fn(rows.len(), OBS_COLS, |i, j| rows[i][j]);
        Observation { data: m }
    }

    pub fn n_joints(&self) -> usize {
        self.data.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    pub fn joint(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn set_joint(&mut self, i: usize, row: [f64; OBS_COLS]) {
        self.data.row_mut(i).copy_from_slice(&row);
    }
}

/// The extra input row signaling detected joint malfunction: all entries are
/// -1 (healthy) or all +1 (joint malfunction detected), replicated threefold
/// so no single slot is a point of failure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlagToken {
    detected: bool,
}

impl FlagToken {
    pub fn detected(detected: bool) -> Self {
        FlagToken { detected }
    }

    pub fn is_detected(&self) -> bool {
        self.detected
    }

    pub fn value(&self) -> f64 {
        if self.detected {
            1.0
        } else {
            -1.0
        }
    }

    pub fn row(&self) -> [f64; OBS_COLS] {
        [self.value(); OBS_COLS]
    }
}

/// The oracle damage-detection step: blank the masked joints' observations,
/// build the attention mask, and set the flag token.
///
/// Masking every joint is rejected; the policy would be left with no joint
/// signal.
pub fn detect_and_mask(
    obs: &Observation,
    flags: &DetectabilityFlags,
    mask_value: f64,
    mask_mode: MaskMode,
) -> Result<(Observation, MaskMatrix, FlagToken)> {
    let n = obs.n_joints();
    let masked = &flags.masked_joints;
    if masked.len() >= n {
        return Err(UmcError::invalid(
            "detect_and_mask",
            format!("{} of {} joints masked; at least one must stay observable", masked.len(), n),
        ));
    }
    let mut visible = obs.clone();
    let mut mask = MaskMatrix::zeros(n + 1);
    for &j in masked {
        if j >= n {
            return Err(UmcError::invalid("detect_and_mask", format!("joint {j} >= {n}")));
        }
        visible.set_joint(j, [mask_value; OBS_COLS]);
        mask.mask_column(j);
        if mask_mode == MaskMode::RowAndColumn {
            mask.mask_row_except_self(j);
        }
    }
    if mask_mode == MaskMode::RowAndColumn {
        // A row-masked token keeps a self-loop: its own column entry stays
        // open on the diagonal so the softmax row is still defined.
        for &j in masked {
            mask.open(j, j);
        }
    }
    mask.validate()?;
    Ok((visible, mask, FlagToken::detected(flags.joint_malfunction_detected)))
}

/// Token batch ready for the actor: masked observations stacked with their
/// flag rows, sample-major, plus one attention mask per sample.
pub struct ActorInput {
    pub tokens: Matrix,
    pub masks: Rc<Vec<MaskMatrix>>,
    pub batch: usize,
}

impl ActorInput {
    /// Run [`detect_and_mask`] on each (observation, flags) pair and stack.
    pub fn build(
        pairs: &[(&Observation, &DetectabilityFlags)],
        mask_value: f64,
        mask_mode: MaskMode,
    ) -> Result<ActorInput> {
        assert!(!pairs.is_empty());
        let n = pairs[0].0.n_joints();
        let tokens_per = n + 1;
        let mut tokens = Matrix::zeros(pairs.len() * tokens_per, OBS_COLS);
        let mut masks = Vec::with_capacity(pairs.len());
        for (s, (obs, flags)) in pairs.iter().enumerate() {
            if obs.n_joints() != n {
                return Err(UmcError::shape("actor input", "inconsistent joint counts"));
            }
            let (visible, mask, flag) = detect_and_mask(obs, flags, mask_value, mask_mode)?;
            for t in 0..n {
                tokens.row_mut(s * tokens_per + t).copy_from_slice(visible.joint(t));
            }
            tokens.row_mut(s * tokens_per + n).copy_from_slice(&flag.row());
            masks.push(mask);
        }
        Ok(ActorInput { tokens, masks: Rc::new(masks), batch: pairs.len() })
    }
}

/// Either actor variant behind one dispatch surface.
#[derive(Clone, Debug)]
pub enum Actor {
    Transformer(ActorParams),
    Mlp(MlpActorParams),
}

impl Actor {
    pub fn variant(&self) -> &'static str {
        match self {
            Actor::Transformer(_) => "transformer",
            Actor::Mlp(_) => "mlp",
        }
    }

    pub fn n_joints(&self) -> usize {
        match self {
            Actor::Transformer(a) => a.cfg.n_joints,
            Actor::Mlp(a) => a.cfg.n_joints,
        }
    }

    /// Masking mode for the attention path; the MLP variant only uses the
    /// observation-zeroing step, so the mode is immaterial there.
    pub fn mask_mode(&self) -> MaskMode {
        match self {
            Actor::Transformer(a) => a.cfg.mask_mode,
            Actor::Mlp(_) => MaskMode::Column,
        }
    }

    pub fn store(&self) -> &crate::nn::ParamStore {
        match self {
            Actor::Transformer(a) => &a.store,
            Actor::Mlp(a) => &a.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut crate::nn::ParamStore {
        match self {
            Actor::Transformer(a) => &mut a.store,
            Actor::Mlp(a) => &mut a.store,
        }
    }

    pub fn log_std(&self) -> &Matrix {
        match self {
            Actor::Transformer(a) => a.log_std(),
            Actor::Mlp(a) => a.log_std(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.store().param_count()
    }

    pub fn forward(
        &self,
        obs: &Observation,
        flags: &DetectabilityFlags,
        mask_value: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Actor::Transformer(a) => a.forward(obs, flags, mask_value),
            Actor::Mlp(a) => a.forward(obs, flags, mask_value),
        }
    }

    pub fn forward_batch(&self, input: &ActorInput) -> Result<Matrix> {
        match self {
            Actor::Transformer(a) => a.forward_batch(input),
            Actor::Mlp(a) => a.forward_batch(input),
        }
    }

    /// Build the actor on a tape; returns `(means, log_std)` nodes.
    pub fn graph(
        &self,
        g: &mut crate::nn::Graph,
        input: &ActorInput,
    ) -> Result<(crate::nn::NodeId, crate::nn::NodeId)> {
        match self {
            Actor::Transformer(a) => a.graph(g, input.tokens.clone(), &input.masks),
            Actor::Mlp(a) => a.graph(g, a.flatten(input)),
        }
    }
}

/// Sample one action per row from the diagonal Gaussian.
pub fn sample_actions(means: &Matrix, log_std: &Matrix, rng: &mut RngStream) -> Matrix {
    let mut out = means.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v += log_std.get(0, j).exp() * rng.normal();
        }
    }
    out
}
