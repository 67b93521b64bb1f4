//! Transformer actor and the mask-free critic sharing the same base
//! structure: per-token tokenizer, learnable positional embeddings, stacked
//! attention blocks, and per-joint detokenizer.
//!
//! Blocks are pre-normalized with residual connections around both the
//! attention and feed-forward halves; ReLU is the nonlinearity throughout.

use std::rc::Rc;

use super::{ActorInput, FlagToken, ModelConfig, Observation, OBS_COLS};
use crate::damage::DetectabilityFlags;
use crate::nn::kernels;
use crate::nn::tape::{Graph, NodeId};
use crate::nn::{MaskMatrix, Matrix, ParamStore};
use crate::rng::RngStream;
use crate::Result;

fn xavier(rng: &mut RngStream, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Matrix {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.normal() * std)
}

/// Insert the shared base arrays (tokenizer, positional embedding, blocks)
/// into `store`.
fn insert_base(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut RngStream) {
    let t = cfg.tokens();
    let d = cfg.d_model;
    store.insert("tok.w", xavier(rng, t * OBS_COLS, d, OBS_COLS, d));
    store.insert("tok.b", Matrix::zeros(t, d));
    store.insert("pos", Matrix::from_fn(t, d, |_, _| rng.normal() * 0.1));
    for k in 0..cfg.blocks {
        store.insert(&format!("blk{k}.ln1.g"), Matrix::from_fn(1, d, |_, _| 1.0));
        store.insert(&format!("blk{k}.ln1.b"), Matrix::zeros(1, d));
        store.insert(&format!("blk{k}.wq"), xavier(rng, d, d, d, d));
        store.insert(&format!("blk{k}.bq"), Matrix::zeros(1, d));
        store.insert(&format!("blk{k}.wk"), xavier(rng, d, d, d, d));
        store.insert(&format!("blk{k}.bk"), Matrix::zeros(1, d));
        store.insert(&format!("blk{k}.wv"), xavier(rng, d, d, d, d));
        store.insert(&format!("blk{k}.bv"), Matrix::zeros(1, d));
        store.insert(&format!("blk{k}.wo"), xavier(rng, d, d, d, d));
        store.insert(&format!("blk{k}.bo"), Matrix::zeros(1, d));
        store.insert(&format!("blk{k}.ln2.g"), Matrix::from_fn(1, d, |_, _| 1.0));
        store.insert(&format!("blk{k}.ln2.b"), Matrix::zeros(1, d));
        store.insert(&format!("blk{k}.ffn.w1"), xavier(rng, d, cfg.d_ff, d, cfg.d_ff));
        store.insert(&format!("blk{k}.ffn.b1"), Matrix::zeros(1, cfg.d_ff));
        store.insert(&format!("blk{k}.ffn.w2"), xavier(rng, cfg.d_ff, d, cfg.d_ff, d));
        store.insert(&format!("blk{k}.ffn.b2"), Matrix::zeros(1, d));
    }
}

/// Pure forward of the shared base: tokenize, positionally embed, run the
/// stacked pre-norm attention blocks. Input is a `(B*T) x 3` token batch.
fn base_forward(
    store: &ParamStore,
    cfg: &ModelConfig,
    tokens: &Matrix,
    masks: &[MaskMatrix],
) -> Result<Matrix> {
    let t = cfg.tokens();
    let e = kernels::per_token_linear_forward(
        tokens,
        store.value(store.id("tok.w")),
        store.value(store.id("tok.b")),
        t,
    );
    let mut x = kernels::add_pos_forward(&e, store.value(store.id("pos")), t);
    for k in 0..cfg.blocks {
        let v = |n: &str| store.value(store.id(&format!("blk{k}.{n}")));
        let (ln1, _) = kernels::layer_norm_forward(&x, v("ln1.g"), v("ln1.b"));
        let q = kernels::linear_forward(&ln1, v("wq"), v("bq"));
        let kk = kernels::linear_forward(&ln1, v("wk"), v("bk"));
        let vv = kernels::linear_forward(&ln1, v("wv"), v("bv"));
        let (attn, _) = kernels::masked_attention_forward(&q, &kk, &vv, masks, t, cfg.heads)?;
        let o = kernels::linear_forward(&attn, v("wo"), v("bo"));
        x.add_assign(&o);
        let (ln2, _) = kernels::layer_norm_forward(&x, v("ln2.g"), v("ln2.b"));
        let h = kernels::relu_forward(&kernels::linear_forward(&ln2, v("ffn.w1"), v("ffn.b1")));
        let f = kernels::linear_forward(&h, v("ffn.w2"), v("ffn.b2"));
        x.add_assign(&f);
    }
    Ok(x)
}

/// Tape mirror of [`base_forward`].
fn base_graph(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    tokens: Matrix,
    masks: &Rc<Vec<MaskMatrix>>,
) -> Result<NodeId> {
    let t = cfg.tokens();
    let x_in = g.constant(tokens);
    let tok_w = g.param(store, "tok.w");
    let tok_b = g.param(store, "tok.b");
    let pos = g.param(store, "pos");
    let e = g.per_token_linear(x_in, tok_w, tok_b, t);
    let mut x = g.add_pos(e, pos, t);
    for k in 0..cfg.blocks {
        let p = |g: &mut Graph, n: &str| g.param(store, &format!("blk{k}.{n}"));
        let ln1_g = p(g, "ln1.g");
        let ln1_b = p(g, "ln1.b");
        let ln1 = g.layer_norm(x, ln1_g, ln1_b);
        let wq = p(g, "wq");
        let bq = p(g, "bq");
        let wk = p(g, "wk");
        let bk = p(g, "bk");
        let wv = p(g, "wv");
        let bv = p(g, "bv");
        let q = g.linear(ln1, wq, bq);
        let kk = g.linear(ln1, wk, bk);
        let vv = g.linear(ln1, wv, bv);
        let attn = g.masked_attention(q, kk, vv, masks, t, cfg.heads)?;
        let wo = p(g, "wo");
        let bo = p(g, "bo");
        let o = g.linear(attn, wo, bo);
        x = g.add(x, o);
        let ln2_g = p(g, "ln2.g");
        let ln2_b = p(g, "ln2.b");
        let ln2 = g.layer_norm(x, ln2_g, ln2_b);
        let w1 = p(g, "ffn.w1");
        let b1 = p(g, "ffn.b1");
        let w2 = p(g, "ffn.w2");
        let b2 = p(g, "ffn.b2");
        let h0 = g.linear(ln2, w1, b1);
        let h = g.relu(h0);
        let f = g.linear(h, w2, b2);
        x = g.add(x, f);
    }
    Ok(x)
}

/// Learnable state of the transformer actor.
#[derive(Clone, Debug)]
pub struct ActorParams {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl ActorParams {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(seed, 0xAC70);
        let mut store = ParamStore::new();
        insert_base(&mut store, &cfg, &mut rng);
        // Quiet start: small initial torque means keep the early tilt drift
        // inside the exploration noise, so episodes live long enough for the
        // survival signal to register.
        let mut detok_w = xavier(&mut rng, cfg.n_joints, cfg.d_model, cfg.d_model, 1);
        detok_w.scale_in_place(0.1);
        store.insert("detok.w", detok_w);
        store.insert("detok.b", Matrix::zeros(cfg.n_joints, 1));
        // State-independent per-joint log-std, sigma = 1 at init.
        store.insert("log_std", Matrix::zeros(1, cfg.n_joints));
        Ok(ActorParams { cfg, store })
    }

    pub fn log_std(&self) -> &Matrix {
        self.store.value(self.store.id("log_std"))
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Projection + positional encoding of a stacked `(B*T) x 3` input.
    pub fn tokenize(&self, o_prime: &Matrix) -> Matrix {
        let t = self.cfg.tokens();
        let e = kernels::per_token_linear_forward(
            o_prime,
            self.store.value(self.store.id("tok.w")),
            self.store.value(self.store.id("tok.b")),
            t,
        );
        kernels::add_pos_forward(&e, self.store.value(self.store.id("pos")), t)
    }

    /// The stacked attention blocks, every block receiving the same masks.
    pub fn encode(&self, e: &Matrix, masks: &[MaskMatrix]) -> Result<Matrix> {
        let t = self.cfg.tokens();
        let mut x = e.clone();
        for k in 0..self.cfg.blocks {
            let v = |n: &str| self.store.value(self.store.id(&format!("blk{k}.{n}")));
            let (ln1, _) = kernels::layer_norm_forward(&x, v("ln1.g"), v("ln1.b"));
            let q = kernels::linear_forward(&ln1, v("wq"), v("bq"));
            let kk = kernels::linear_forward(&ln1, v("wk"), v("bk"));
            let vv = kernels::linear_forward(&ln1, v("wv"), v("bv"));
            let (attn, _) =
                kernels::masked_attention_forward(&q, &kk, &vv, masks, t, self.cfg.heads)?;
            let o = kernels::linear_forward(&attn, v("wo"), v("bo"));
            x.add_assign(&o);
            let (ln2, _) = kernels::layer_norm_forward(&x, v("ln2.g"), v("ln2.b"));
            let h = kernels::relu_forward(&kernels::linear_forward(&ln2, v("ffn.w1"), v("ffn.b1")));
            let f = kernels::linear_forward(&h, v("ffn.w2"), v("ffn.b2"));
            x.add_assign(&f);
        }
        Ok(x)
    }

    /// Per-joint projection back to torque means; the flag token is dropped.
    pub fn detokenize(&self, r: &Matrix) -> Matrix {
        kernels::detokenize_forward(
            r,
            self.store.value(self.store.id("detok.w")),
            self.store.value(self.store.id("detok.b")),
            self.cfg.tokens(),
        )
    }

    /// Full actor composition for one observation.
    pub fn forward(
        &self,
        obs: &Observation,
        flags: &DetectabilityFlags,
        mask_value: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let input = ActorInput::build(&[(obs, flags)], mask_value, self.cfg.mask_mode)?;
        let means = self.forward_batch(&input)?;
        Ok((means.row(0).to_vec(), self.log_std().row(0).to_vec()))
    }

    /// Batched actor forward: masked tokens in, `B x N` torque means out.
    pub fn forward_batch(&self, input: &ActorInput) -> Result<Matrix> {
        let r = base_forward(&self.store, &self.cfg, &input.tokens, &input.masks)?;
        Ok(self.detokenize(&r))
    }

    /// Build the actor on the tape; returns `(means, log_std)` nodes.
    pub fn graph(
        &self,
        g: &mut Graph,
        tokens: Matrix,
        masks: &Rc<Vec<MaskMatrix>>,
    ) -> Result<(NodeId, NodeId)> {
        let r = base_graph(g, &self.store, &self.cfg, tokens, masks)?;
        let w = g.param(&self.store, "detok.w");
        let b = g.param(&self.store, "detok.b");
        let means = g.detokenize(r, w, b, self.cfg.tokens());
        let log_std = g.param(&self.store, "log_std");
        Ok((means, log_std))
    }
}

/// Learnable state of the critic: the same base structure plus a value head
/// reading the flag-token representation; no mask path, no log-std.
#[derive(Clone, Debug)]
pub struct CriticParams {
    pub cfg: ModelConfig,
    pub store: ParamStore,
}

impl CriticParams {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RngStream::new(seed, 0xC217);
        let mut store = ParamStore::new();
        insert_base(&mut store, &cfg, &mut rng);
        store.insert("vhead.w", xavier(&mut rng, cfg.d_model, 1, cfg.d_model, 1));
        store.insert("vhead.b", Matrix::zeros(1, 1));
        Ok(CriticParams { cfg, store })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Stack true observations with healthy flag rows: the critic always
    /// sees ground truth and runs unmasked.
    pub fn stack_true(&self, observations: &[&Observation]) -> Matrix {
        let t = self.cfg.tokens();
        let n = self.cfg.n_joints;
        let mut tokens = Matrix::zeros(observations.len() * t, OBS_COLS);
        let flag = FlagToken::detected(false);
        for (s, obs) in observations.iter().enumerate() {
            for j in 0..n {
                tokens.row_mut(s * t + j).copy_from_slice(obs.joint(j));
            }
            tokens.row_mut(s * t + n).copy_from_slice(&flag.row());
        }
        tokens
    }

    /// Value of one true observation.
    pub fn forward(&self, obs_true: &Observation) -> Result<f64> {
        let tokens = self.stack_true(&[obs_true]);
        Ok(self.forward_batch(&tokens)?.item())
    }

    /// Batched values: `B x 1`.
    pub fn forward_batch(&self, tokens: &Matrix) -> Result<Matrix> {
        let t = self.cfg.tokens();
        let masks = [MaskMatrix::zeros(t)];
        let r = base_forward(&self.store, &self.cfg, tokens, &masks)?;
        let flag_repr = kernels::select_token_forward(&r, t, t - 1);
        Ok(kernels::linear_forward(
            &flag_repr,
            self.store.value(self.store.id("vhead.w")),
            self.store.value(self.store.id("vhead.b")),
        ))
    }

    /// Build the critic on the tape; returns the `B x 1` value node.
    pub fn graph(&self, g: &mut Graph, tokens: Matrix) -> Result<NodeId> {
        let t = self.cfg.tokens();
        let masks = Rc::new(vec![MaskMatrix::zeros(t)]);
        let r = base_graph(g, &self.store, &self.cfg, tokens, &masks)?;
        let flag_repr = g.select_token(r, t, t - 1);
        let w = g.param(&self.store, "vhead.w");
        let b = g.param(&self.store, "vhead.b");
        Ok(g.linear(flag_repr, w, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{detect_and_mask, MaskMode};

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { n_joints: 4, d_model: 8, blocks: 2, heads: 2, d_ff: 16, mask_mode: MaskMode::Column }
    }

    fn random_obs(rng: &mut RngStream, n: usize) -> Observation {
        Observation::new(Matrix::from_fn(n, 3, |_, _| rng.normal())).unwrap()
    }

    #[test]
    fn forward_is_pure() {
        let actor = ActorParams::init(tiny_cfg(), 7).unwrap();
        let mut rng = RngStream::new(1, 1);
        let obs = random_obs(&mut rng, 4);
        let flags = DetectabilityFlags::none();
        let (a, _) = actor.forward(&obs, &flags, 0.0).unwrap();
        let (b, _) = actor.forward(&obs, &flags, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_joint_is_fully_isolated() {
        let actor = ActorParams::init(tiny_cfg(), 3).unwrap();
        let mut rng = RngStream::new(2, 1);
        let obs = random_obs(&mut rng, 4);
        let flags = DetectabilityFlags { masked_joints: vec![1], joint_malfunction_detected: true };
        let (base, _) = actor.forward(&obs, &flags, 0.0).unwrap();
        for scale in [1e-3, 1.0, 1e3] {
            let mut perturbed = obs.clone();
            perturbed.set_joint(1, [scale, -scale, scale]);
            let (out, _) = actor.forward(&perturbed, &flags, 0.0).unwrap();
            for j in 0..4 {
                assert!(
                    (out[j] - base[j]).abs() < 1e-9,
                    "joint {j} moved by {} under perturbation {scale}",
                    (out[j] - base[j]).abs()
                );
            }
        }
    }

    #[test]
    fn flag_flip_reaches_the_outputs() {
        let actor = ActorParams::init(tiny_cfg(), 5).unwrap();
        let mut rng = RngStream::new(3, 1);
        let obs = random_obs(&mut rng, 4);
        let healthy = DetectabilityFlags { masked_joints: vec![0], joint_malfunction_detected: false };
        let flagged = DetectabilityFlags { masked_joints: vec![0], joint_malfunction_detected: true };
        let (a, _) = actor.forward(&obs, &healthy, 0.0).unwrap();
        let (b, _) = actor.forward(&obs, &flagged, 0.0).unwrap();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "flag token had no effect ({diff})");
    }

    #[test]
    fn tokenize_disentangles_tokens() {
        let actor = ActorParams::init(tiny_cfg(), 11).unwrap();
        let t = actor.cfg.tokens();
        let mut rng = RngStream::new(4, 1);
        let o_prime = Matrix::from_fn(t, 3, |_, _| rng.normal());
        let e = actor.tokenize(&o_prime);
        let mut o2 = o_prime.clone();
        o2.set(2, 1, o2.get(2, 1) + 5.0);
        let e2 = actor.tokenize(&o2);
        for tok in 0..t {
            let changed = e.row(tok) != e2.row(tok);
            assert_eq!(changed, tok == 2, "token {tok}");
        }
    }

    #[test]
    fn tokenizer_weights_touch_only_their_token() {
        let mut actor = ActorParams::init(tiny_cfg(), 12).unwrap();
        let t = actor.cfg.tokens();
        let o_prime = Matrix::from_fn(t, 3, |i, j| (i * 3 + j) as f64 * 0.1);
        let e = actor.tokenize(&o_prime);
        // Perturb token 3's weight block.
        let id = actor.store.id("tok.w");
        let row = 3 * OBS_COLS;
        let old = actor.store.value(id).get(row, 0);
        actor.store.value_mut(id).set(row, 0, old + 1.0);
        let e2 = actor.tokenize(&o_prime);
        for tok in 0..t {
            let changed = e.row(tok) != e2.row(tok);
            assert_eq!(changed, tok == 3, "token {tok}");
        }
    }

    #[test]
    fn encode_zero_blocks_is_identity() {
        let cfg = ModelConfig { blocks: 0, ..tiny_cfg() };
        let actor = ActorParams::init(cfg, 13).unwrap();
        let mut rng = RngStream::new(5, 1);
        let e = Matrix::from_fn(cfg.tokens(), cfg.d_model, |_, _| rng.normal());
        let r = actor.encode(&e, &[MaskMatrix::zeros(cfg.tokens())]).unwrap();
        assert_eq!(r, e);
    }

    #[test]
    fn encode_masked_column_blocks_cross_influence() {
        let actor = ActorParams::init(tiny_cfg(), 17).unwrap();
        let t = actor.cfg.tokens();
        let mut rng = RngStream::new(6, 1);
        let e = Matrix::from_fn(t, actor.cfg.d_model, |_, _| rng.normal());
        let mut mask = MaskMatrix::zeros(t);
        mask.mask_column(2);
        let masks = [mask];
        let r = actor.encode(&e, &masks).unwrap();
        let mut e2 = e.clone();
        e2.set(2, 0, e2.get(2, 0) + 10.0);
        let r2 = actor.encode(&e2, &masks).unwrap();
        for tok in 0..t {
            if tok == 2 {
                continue;
            }
            for c in 0..actor.cfg.d_model {
                assert_eq!(r.get(tok, c), r2.get(tok, c), "token {tok} col {c} leaked");
            }
        }
    }

    #[test]
    fn detokenize_ignores_flag_token() {
        let actor = ActorParams::init(tiny_cfg(), 19).unwrap();
        let t = actor.cfg.tokens();
        let mut rng = RngStream::new(7, 1);
        let r = Matrix::from_fn(t, actor.cfg.d_model, |_, _| rng.normal());
        let a = actor.detokenize(&r);
        let mut r2 = r.clone();
        for c in 0..actor.cfg.d_model {
            r2.set(t - 1, c, 123.0 + c as f64);
        }
        let b = actor.detokenize(&r2);
        assert_eq!(a, b);
        assert_eq!(a.cols(), actor.cfg.n_joints);
    }

    #[test]
    fn graph_forward_matches_pure_forward() {
        let actor = ActorParams::init(tiny_cfg(), 23).unwrap();
        let mut rng = RngStream::new(8, 1);
        let obs: Vec<Observation> = (0..3).map(|_| random_obs(&mut rng, 4)).collect();
        let flags = DetectabilityFlags { masked_joints: vec![2], joint_malfunction_detected: true };
        let pairs: Vec<_> = obs.iter().map(|o| (o, &flags)).collect();
        let input = ActorInput::build(&pairs, 0.0, MaskMode::Column).unwrap();
        let pure = actor.forward_batch(&input).unwrap();

        let mut g = Graph::new();
        let (means, _) = actor.graph(&mut g, input.tokens.clone(), &input.masks).unwrap();
        assert_eq!(g.value(means), &pure);
    }

    #[test]
    fn critic_graph_matches_pure_and_reads_flag_token() {
        let critic = CriticParams::init(tiny_cfg(), 29).unwrap();
        let mut rng = RngStream::new(9, 1);
        let obs = random_obs(&mut rng, 4);
        let v = critic.forward(&obs).unwrap();
        let v2 = critic.forward(&obs).unwrap();
        assert_eq!(v, v2);

        let tokens = critic.stack_true(&[&obs]);
        let mut g = Graph::new();
        let node = critic.graph(&mut g, tokens).unwrap();
        assert_eq!(g.value(node).item(), v);
    }

    #[test]
    fn critic_zero_head_returns_bias() {
        let mut critic = CriticParams::init(tiny_cfg(), 31).unwrap();
        let id = critic.store.id("vhead.w");
        critic.store.value_mut(id).fill(0.0);
        let idb = critic.store.id("vhead.b");
        critic.store.value_mut(idb).set(0, 0, 2.5);
        let mut rng = RngStream::new(10, 1);
        let obs = random_obs(&mut rng, 4);
        assert_eq!(critic.forward(&obs).unwrap(), 2.5);
    }

    #[test]
    fn tokenize_hand_example_with_pos_embedding() {
        let cfg = ModelConfig { n_joints: 1, d_model: 2, blocks: 0, heads: 1, d_ff: 2, mask_mode: MaskMode::Column };
        let mut actor = ActorParams::init(cfg, 37).unwrap();
        // Token-0 projection picks (position, velocity); bias 0; pos emb (5,5).
        let wid = actor.store.id("tok.w");
        let w = actor.store.value_mut(wid);
        w.fill(0.0);
        w.set(0, 0, 1.0);
        w.set(1, 1, 1.0);
        let pid = actor.store.id("pos");
        let p = actor.store.value_mut(pid);
        p.fill(0.0);
        p.set(0, 0, 5.0);
        p.set(0, 1, 5.0);
        let o_prime = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -1.0, -1.0, -1.0]);
        let e = actor.tokenize(&o_prime);
        assert!((e.get(0, 0) - 5.1).abs() < 1e-12);
        assert!((e.get(0, 1) - 5.2).abs() < 1e-12);
    }

    /// Reference parameter counts for the full-size configuration.
    #[test]
    fn full_size_param_count_within_tolerance() {
        let cfg = ModelConfig::full(12);
        let actor = ActorParams::init(cfg, 0).unwrap();
        let count = actor.param_count() as f64;
        let reference = 366_164.0;
        let rel = (count - reference).abs() / reference;
        assert!(rel < 0.10, "actor count {count} vs reference {reference} ({rel:.3})");
    }

    #[test]
    fn empty_store_counts_zero() {
        assert_eq!(ParamStore::new().param_count(), 0);
    }

    #[test]
    fn mask_value_reaches_visible_rows() {
        let actor = ActorParams::init(tiny_cfg(), 41).unwrap();
        let mut rng = RngStream::new(11, 1);
        let obs = random_obs(&mut rng, 4);
        let flags = DetectabilityFlags { masked_joints: vec![0], joint_malfunction_detected: false };
        let (v, _, _) = detect_and_mask(&obs, &flags, -100.0, actor.cfg.mask_mode).unwrap();
        assert_eq!(v.joint(0), &[-100.0; 3]);
        // Different masking values give different policies' inputs.
        let (a, _) = actor.forward(&obs, &flags, 0.0).unwrap();
        let (b, _) = actor.forward(&obs, &flags, -100.0).unwrap();
        assert_ne!(a, b);
    }
}
