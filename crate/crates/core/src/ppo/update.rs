//! The clipped three-term loss and one optimizer epoch set over a rollout.

use std::rc::Rc;

use super::buffer::RolloutBuffer;
use super::PpoHyper;
use crate::nn::{adam_step, clip_global_norm, kernels, AdamHyper, Graph, Matrix};
use crate::policy::{Actor, ActorInput, CriticParams, Observation};
use crate::rng::RngStream;
use crate::{Result, UmcError};

/// Loss components and diagnostics averaged over all minibatch passes.
#[derive(Clone, Copy, Debug, Default)]
pub struct UpdateStats {
    pub loss_surrogate: f64,
    pub loss_value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Normalize a slice to zero mean and unit standard deviation.
fn normalize(xs: &mut [f64]) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for x in xs.iter_mut() {
        *x = (*x - mean) / std;
    }
}

fn shuffle(indices: &mut [usize], rng: &mut RngStream) {
    for i in (1..indices.len()).rev() {
        let j = rng.below(i + 1);
        indices.swap(i, j);
    }
}

/// Run `epochs x minibatches` clipped-PPO passes over the buffer.
///
/// Advantages are normalized per minibatch. A non-finite loss aborts the
/// whole update and rolls both parameter stores (and optimizer state) back.
pub fn update(
    buffer: &RolloutBuffer,
    actor: &mut Actor,
    critic: &mut CriticParams,
    hyper: &PpoHyper,
    mask_value: f64,
    rng: &mut RngStream,
) -> Result<UpdateStats> {
    hyper.validate()?;
    let total = buffer.len();
    if total == 0 {
        return Err(UmcError::invalid("update", "empty rollout buffer"));
    }
    let mb_count = hyper.minibatches.min(total);
    let actor_snap = actor.store().snapshot();
    let critic_snap = critic.store.snapshot();
    let adam = AdamHyper { lr: hyper.lr, ..AdamHyper::default() };

    // Masking and token stacking happen once; minibatches gather rows.
    let all_pairs: Vec<_> =
        buffer.obs_corrupted.iter().zip(&buffer.flags).collect();
    let full_input = ActorInput::build(&all_pairs, mask_value, actor.mask_mode())?;
    let all_true: Vec<&Observation> = buffer.obs_true.iter().collect();
    let full_critic_tokens = critic.stack_true(&all_true);
    let tokens_per = full_input.tokens.rows() / total;

    let gather_tokens = |src: &Matrix, idx: &[usize]| -> Matrix {
        let mut out = Matrix::zeros(idx.len() * tokens_per, src.cols());
        for (r, &i) in idx.iter().enumerate() {
            for t in 0..tokens_per {
                out.row_mut(r * tokens_per + t).copy_from_slice(src.row(i * tokens_per + t));
            }
        }
        out
    };

    let mut stats = UpdateStats::default();
    let mut passes = 0usize;
    let mut indices: Vec<usize> = (0..total).collect();

    let timing = std::env::var_os("UMC_TIMING").is_some();
    let mut t_gather = 0.0;
    let mut t_actor_fwd = 0.0;
    let mut t_actor_bwd = 0.0;
    let mut t_critic_fwd = 0.0;
    let mut t_critic_bwd = 0.0;
    let mut t_step = 0.0;

    let result = (|| -> Result<()> {
        for _epoch in 0..hyper.epochs {
            shuffle(&mut indices, rng);
            for mb in 0..mb_count {
                let lo = mb * total / mb_count;
                let hi = (mb + 1) * total / mb_count;
                let idx = &indices[lo..hi];
                let bsz = idx.len();
                let tt = std::time::Instant::now();

                // Gather the minibatch.
                let input = ActorInput {
                    tokens: gather_tokens(&full_input.tokens, idx),
                    masks: Rc::new(idx.iter().map(|&i| full_input.masks[i].clone()).collect()),
                    batch: bsz,
                };
                let actions = Rc::new(Matrix::from_fn(bsz, buffer.actions.cols(), |r, c| {
                    buffer.actions.get(idx[r], c)
                }));
                let logp_old = Matrix::from_fn(bsz, 1, |r, _| buffer.log_probs[idx[r]]);
                let mut adv: Vec<f64> = idx.iter().map(|&i| buffer.advantages[i]).collect();
                normalize(&mut adv);
                let advantages = Matrix::from_vec(bsz, 1, adv);
                let returns = Matrix::from_fn(bsz, 1, |r, _| buffer.returns[idx[r]]);
                let v_old = Matrix::from_fn(bsz, 1, |r, _| buffer.values[idx[r]]);
                t_gather += tt.elapsed().as_secs_f64();

                // Actor pass: surrogate plus entropy regularization.
                let tt = std::time::Instant::now();
                let mut ga = Graph::new();
                let (means, log_std) = actor.graph(&mut ga, &input)?;
                let logp_new = ga.gaussian_logp(means, log_std, Rc::clone(&actions));
                let surrogate =
                    ga.surrogate_loss(logp_new, &logp_old, &advantages, hyper.clip_eps)?;
                let entropy = ga.entropy_mean(log_std);
                let actor_loss =
                    ga.lin_comb(&[(1.0, surrogate), (-hyper.entropy_coef, entropy)]);
                t_actor_fwd += tt.elapsed().as_secs_f64();

                let surrogate_val = ga.value(surrogate).item();
                let entropy_val = ga.value(entropy).item();

                // Ratio diagnostics from the forward values.
                let mut clipped = 0usize;
                let mut kl = 0.0;
                for r in 0..bsz {
                    let lp_new = ga.value(logp_new).get(r, 0);
                    let lp_old = logp_old.get(r, 0);
                    let ratio = (lp_new - lp_old).exp();
                    if (ratio - 1.0).abs() > hyper.clip_eps {
                        clipped += 1;
                    }
                    kl += lp_old - lp_new;
                }

                // Critic pass: clipped value loss, gated by its coefficient.
                let tt = std::time::Instant::now();
                let mut value_val = 0.0;
                let critic_work = if hyper.value_coef != 0.0 {
                    let tokens = gather_tokens(&full_critic_tokens, idx);
                    let mut gc = Graph::new();
                    let v = critic.graph(&mut gc, tokens)?;
                    let vloss = gc.value_loss(v, &v_old, &returns, hyper.clip_eps);
                    let scaled = gc.lin_comb(&[(hyper.value_coef, vloss)]);
                    value_val = gc.value(vloss).item();
                    Some((gc, scaled))
                } else {
                    None
                };
                t_critic_fwd += tt.elapsed().as_secs_f64();

                let total_loss = surrogate_val + hyper.value_coef * value_val
                    - hyper.entropy_coef * entropy_val;
                if !total_loss.is_finite() {
                    return Err(UmcError::non_finite(
                        "ppo update",
                        format!("total loss {total_loss}"),
                    ));
                }

                let tt = std::time::Instant::now();
                ga.backward(actor_loss);
                t_actor_bwd += tt.elapsed().as_secs_f64();
                let tt = std::time::Instant::now();
                actor.store_mut().zero_grads();
                ga.accumulate_param_grads(actor.store_mut());
                clip_global_norm(actor.store_mut(), hyper.max_grad_norm);
                adam_step(actor.store_mut(), &adam)?;
                t_step += tt.elapsed().as_secs_f64();

                if let Some((mut gc, scaled)) = critic_work {
                    let tt = std::time::Instant::now();
                    gc.backward(scaled);
                    t_critic_bwd += tt.elapsed().as_secs_f64();
                    let tt = std::time::Instant::now();
                    critic.store.zero_grads();
                    gc.accumulate_param_grads(&mut critic.store);
                    clip_global_norm(&mut critic.store, hyper.max_grad_norm);
                    adam_step(&mut critic.store, &adam)?;
                    t_step += tt.elapsed().as_secs_f64();
                }

                stats.loss_surrogate += surrogate_val;
                stats.loss_value += value_val;
                stats.entropy += entropy_val;
                stats.clip_fraction += clipped as f64 / bsz as f64;
                stats.approx_kl += kl / bsz as f64;
                passes += 1;
            }
        }
        Ok(())
    })();

    if timing {
        eprintln!(
            "update: gather {:.0} ms, actor fwd {:.0} bwd {:.0}, critic fwd {:.0} bwd {:.0}, step {:.0}",
            t_gather * 1e3,
            t_actor_fwd * 1e3,
            t_actor_bwd * 1e3,
            t_critic_fwd * 1e3,
            t_critic_bwd * 1e3,
            t_step * 1e3
        );
    }

    if let Err(e) = result {
        actor.store_mut().restore(&actor_snap);
        critic.store.restore(&critic_snap);
        return Err(e);
    }

    let k = passes.max(1) as f64;
    stats.loss_surrogate /= k;
    stats.loss_value /= k;
    stats.entropy /= k;
    stats.clip_fraction /= k;
    stats.approx_kl /= k;
    Ok(stats)
}

/// Standalone surrogate loss for a prepared batch (ratios from stored
/// old log-probs against the current policy).
pub fn surrogate_loss(
    actor: &Actor,
    buffer: &RolloutBuffer,
    mask_value: f64,
    clip_eps: f64,
) -> Result<f64> {
    let pairs: Vec<_> = buffer
        .obs_corrupted
        .iter()
        .zip(&buffer.flags)
        .collect();
    let input = ActorInput::build(&pairs, mask_value, actor.mask_mode())?;
    let means = actor.forward_batch(&input)?;
    let logp_new = kernels::gaussian_logp_forward(&means, actor.log_std(), &buffer.actions);
    let logp_old = Matrix::from_vec(buffer.len(), 1, buffer.log_probs.clone());
    let advantages = Matrix::from_vec(buffer.len(), 1, buffer.advantages.clone());
    let (loss, _) = kernels::surrogate_forward(&logp_new, &logp_old, &advantages, clip_eps)?;
    Ok(loss)
}

/// Standalone clipped value loss for a prepared batch.
pub fn value_loss(
    critic: &CriticParams,
    buffer: &RolloutBuffer,
    clip_eps: f64,
) -> Result<f64> {
    let obs: Vec<&Observation> = buffer.obs_true.iter().collect();
    let tokens = critic.stack_true(&obs);
    let v = critic.forward_batch(&tokens)?;
    let v_old = Matrix::from_vec(buffer.len(), 1, buffer.values.clone());
    let returns = Matrix::from_vec(buffer.len(), 1, buffer.returns.clone());
    let (loss, _) = kernels::value_loss_forward(&v, &v_old, &returns, clip_eps);
    Ok(loss)
}

/// Mean Gaussian entropy of the current policy.
pub fn entropy_term(log_std: &Matrix) -> f64 {
    kernels::entropy_mean(log_std)
}

/// End-to-end finite-difference check of the total PPO loss
/// (surrogate + lambda1 * value - lambda2 * entropy) through the masked
/// attention path, over every actor and critic coordinate of a small
/// synthetic batch. Returns the worst relative error.
pub fn ppo_loss_grad_check(eps: f64) -> Result<f64> {
    use crate::damage::DetectabilityFlags;
    use crate::nn::grad_check;
    use crate::policy::{ActorParams, MaskMode, ModelConfig, Observation};

    let cfg = ModelConfig {
        n_joints: 3,
        d_model: 4,
        blocks: 1,
        heads: 2,
        d_ff: 6,
        mask_mode: MaskMode::Column,
    };
    let hyper = PpoHyper { minibatches: 1, epochs: 1, n_envs: 4, horizon: 1, ..PpoHyper::default() };
    let actor = Actor::Transformer(ActorParams::init(cfg, 11)?);
    let critic = CriticParams::init(cfg, 12)?;

    // Synthetic batch with one masked joint so the attention mask is live.
    // The loss surface is piecewise (clipping, max); finite differences are
    // only meaningful away from the kinks, so the old log-probs and value
    // targets are placed at fixed offsets from the current outputs: both
    // clip branches are exercised with a wide margin to every boundary.
    let mut rng = RngStream::new(99, 0);
    let bsz = 4;
    let mut obs = Vec::new();
    let mut flags = Vec::new();
    for i in 0..bsz {
        obs.push(Observation::new(Matrix::from_fn(3, 3, |_, _| rng.normal() * 0.5)).unwrap());
        flags.push(if i % 2 == 0 {
            DetectabilityFlags { masked_joints: vec![1], joint_malfunction_detected: true }
        } else {
            DetectabilityFlags::none()
        });
    }
    let pairs: Vec<_> = obs.iter().zip(&flags).collect();
    let input = ActorInput::build(&pairs, 0.0, cfg.mask_mode)?;
    let actions = Rc::new(Matrix::from_fn(bsz, 3, |_, _| rng.normal() * 0.5));
    let advantages = Matrix::from_fn(bsz, 1, |r, _| [1.5, -0.75, 2.0, -1.25][r]);

    // Current outputs at the unperturbed parameters.
    let (lp_now, v_now) = {
        let means = actor.forward_batch(&input)?;
        let lp = kernels::gaussian_logp_forward(&means, actor.log_std(), &actions);
        let true_refs: Vec<&Observation> = obs.iter().collect();
        let v = critic.forward_batch(&critic.stack_true(&true_refs))?;
        (lp, v)
    };
    // Ratios pinned at {0.9, 1.05, 1.35, 0.65}: inside and outside the
    // [0.8, 1.2] band, never within 0.05 of an edge.
    let ratio_targets = [0.9f64, 1.05, 1.35, 0.65];
    let logp_old =
        Matrix::from_fn(bsz, 1, |r, _| lp_now.get(r, 0) - ratio_targets[r].ln());
    // Value gaps pinned at {0.0, +-0.1 (inside), +-0.35 (outside)} the 0.2
    // clip band, with returns keeping (v - R) away from zero.
    let v_gap = [0.0f64, 0.1, -0.35, 0.35];
    let v_old = Matrix::from_fn(bsz, 1, |r, _| v_now.get(r, 0) - v_gap[r]);
    let returns = Matrix::from_fn(bsz, 1, |r, _| v_now.get(r, 0) + [1.0, -1.5, 2.0, -0.5][r]);
    let true_refs: Vec<&Observation> = obs.iter().collect();
    let critic_tokens = critic.stack_true(&true_refs);

    // Total loss with both graphs surfaced so either side can backprop.
    type Built = (f64, Graph, crate::nn::NodeId, Graph, crate::nn::NodeId);
    let build = |a: &Actor, c: &CriticParams| -> Result<Built> {
        let mut ga = Graph::new();
        let (means, log_std) = a.graph(&mut ga, &input)?;
        let logp = ga.gaussian_logp(means, log_std, Rc::clone(&actions));
        let s = ga.surrogate_loss(logp, &logp_old, &advantages, hyper.clip_eps)?;
        let e = ga.entropy_mean(log_std);
        let root = ga.lin_comb(&[(1.0, s), (-hyper.entropy_coef, e)]);

        let mut gc = Graph::new();
        let v = c.graph(&mut gc, critic_tokens.clone())?;
        let vl = gc.value_loss(v, &v_old, &returns, hyper.clip_eps);
        let vroot = gc.lin_comb(&[(hyper.value_coef, vl)]);

        let total = ga.value(root).item() + gc.value(vroot).item();
        Ok((total, ga, root, gc, vroot))
    };

    // Actor-side coordinates (value branch is constant there).
    let actor_err = grad_check(actor.store(), eps, |p, want| {
        let mut work = actor.clone();
        *work.store_mut() = p.clone();
        let (total, mut ga, root, _, _) = build(&work, &critic)?;
        if want {
            ga.backward(root);
            ga.accumulate_param_grads(p);
        }
        Ok(total)
    })?;

    // Critic-side coordinates (surrogate and entropy are constant there).
    let critic_err = grad_check(&critic.store, eps, |p, want| {
        let mut work = critic.clone();
        work.store = p.clone();
        let (total, _, _, mut gc, vroot) = build(&actor, &work)?;
        if want {
            gc.backward(vroot);
            gc.accumulate_param_grads(p);
        }
        Ok(total)
    })?;

    Ok(actor_err.max(critic_err))
}
