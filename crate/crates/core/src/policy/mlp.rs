//! MLP actor variant: the masking pipeline keeps only the observation
//! zeroing step (no attention, no mask matrix); the masked observation plus
//! flag row is flattened and run through a dense stack.

use super::{ActorInput, MaskMode, Observation, OBS_COLS};
use crate::damage::DetectabilityFlags;
use crate::nn::kernels;
use crate::nn::tape::{Graph, NodeId};
use crate::nn::{Matrix, ParamStore};
use crate::rng::RngStream;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpConfig {
    pub n_joints: usize,
    pub hidden: Vec<usize>,
}

impl MlpConfig {
    pub fn new(n_joints: usize) -> Self {
        MlpConfig { n_joints, hidden: vec![256, 512, 256, 256] }
    }

    /// Flattened input width: `(N+1) * 3`, flag row included.
    pub fn input_width(&self) -> usize {
        (self.n_joints + 1) * OBS_COLS
    }

    fn layer_widths(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_width()];
        dims.extend_from_slice(&self.hidden);
        dims.push(self.n_joints);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug)]
pub struct MlpActorParams {
    pub cfg: MlpConfig,
    pub store: ParamStore,
}

impl MlpActorParams {
    pub fn init(cfg: MlpConfig, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, 0x317A);
        let mut store = ParamStore::new();
        for (k, (fan_in, fan_out)) in cfg.layer_widths().into_iter().enumerate() {
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            store.insert(
                &format!("mlp.w{k}"),
                Matrix::from_fn(fan_in, fan_out, |_, _| rng.normal() * std),
            );
            store.insert(&format!("mlp.b{k}"), Matrix::zeros(1, fan_out));
        }
        store.insert("log_std", Matrix::zeros(1, cfg.n_joints));
        Ok(MlpActorParams { cfg, store })
    }

    pub fn log_std(&self) -> &Matrix {
        self.store.value(self.store.id("log_std"))
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    fn n_layers(&self) -> usize {
        self.cfg.hidden.len() + 1
    }

    /// Flatten a stacked `(B*T) x 3` token batch into `B x (3N+3)` rows.
    ///
    /// Rows are sample-major and token-contiguous, so the flattening is a
    /// straight reinterpretation of the token buffer.
    pub fn flatten(&self, input: &ActorInput) -> Matrix {
        let width = self.cfg.input_width();
        Matrix::from_vec(input.batch, width, input.tokens.clone().into_vec())
    }

    fn dense_forward(&self, x: &Matrix) -> Matrix {
        let last = self.n_layers() - 1;
        let mut h = x.clone();
        for k in 0..=last {
            let w = self.store.value(self.store.id(&format!("mlp.w{k}")));
            let b = self.store.value(self.store.id(&format!("mlp.b{k}")));
            h = kernels::linear_forward(&h, w, b);
            if k != last {
                h = kernels::relu_forward(&h);
            }
        }
        h
    }

    /// Full MLP actor composition for one observation.
    pub fn forward(
        &self,
        obs: &Observation,
        flags: &DetectabilityFlags,
        mask_value: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        // Only the first masking step applies; the mask matrix is unused.
        let input = ActorInput::build(&[(obs, flags)], mask_value, MaskMode::Column)?;
        let means = self.forward_batch(&input)?;
        Ok((means.row(0).to_vec(), self.log_std().row(0).to_vec()))
    }

    /// Batched forward: `B x N` torque means.
    pub fn forward_batch(&self, input: &ActorInput) -> Result<Matrix> {
        Ok(self.dense_forward(&self.flatten(input)))
    }

    /// Build the MLP actor on the tape; returns `(means, log_std)` nodes.
    pub fn graph(&self, g: &mut Graph, flat: Matrix) -> Result<(NodeId, NodeId)> {
        let last = self.n_layers() - 1;
        let mut h = g.constant(flat);
        for k in 0..=last {
            let w = g.param(&self.store, &format!("mlp.w{k}"));
            let b = g.param(&self.store, &format!("mlp.b{k}"));
            h = g.linear(h, w, b);
            if k != last {
                h = g.relu(h);
            }
        }
        let log_std = g.param(&self.store, "log_std");
        Ok((h, log_std))
    }
}
