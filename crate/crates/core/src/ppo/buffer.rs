//! On-policy rollout storage and generalized advantage estimation.

use crate::damage::{DamageSpec, DetectabilityFlags};
use crate::env::EnvBatch;
use crate::nn::{kernels, Matrix};
use crate::policy::{sample_actions, Actor, ActorInput, CriticParams, Observation};
use crate::rng::RngStream;
use crate::{Result, UmcError};

/// `T x B` rollout records, flat-indexed `t * B + b`.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub horizon: usize,
    pub n_envs: usize,
    /// Actor inputs (post sensor corruption).
    pub obs_corrupted: Vec<Observation>,
    /// Critic inputs (ground truth).
    pub obs_true: Vec<Observation>,
    pub flags: Vec<DetectabilityFlags>,
    pub actions: Matrix,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    /// Critic values of the states after the final step, one per env.
    pub bootstrap_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.horizon * self.n_envs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, t: usize, b: usize) -> usize {
        t * self.n_envs + b
    }
}

/// Side statistics from one collection pass.
#[derive(Clone, Debug, Default)]
pub struct CollectStats {
    pub mean_reward: f64,
    /// Lengths of episodes that terminated during this rollout.
    pub finished_episode_lengths: Vec<usize>,
}

/// RNG bundle for collection: action noise and reset seeding draw from
/// separate streams so neither perturbs the other.
pub struct CollectRng {
    pub actions: RngStream,
    pub resets: RngStream,
}

impl CollectRng {
    pub fn new(seed: u64, iteration: u64) -> Self {
        CollectRng {
            actions: RngStream::new(seed, 0x10_0000 ^ iteration),
            resets: RngStream::new(seed, 0x20_0000 ^ iteration),
        }
    }
}

/// Gather `horizon` steps from every env with frozen actor/critic params.
///
/// Environments auto-reset on termination with a fresh spec drawn from
/// `sampler`; `ep_steps` carries per-env episode ages across calls.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollout(
    actor: &Actor,
    critic: &CriticParams,
    envs: &mut EnvBatch,
    sampler: &mut dyn FnMut(&mut RngStream) -> Result<DamageSpec>,
    horizon: usize,
    mask_value: f64,
    rng: &mut CollectRng,
    ep_steps: &mut [usize],
) -> Result<(RolloutBuffer, CollectStats)> {
    let n_envs = envs.len();
    assert_eq!(ep_steps.len(), n_envs);
    let n_joints = actor.n_joints();
    let total = horizon * n_envs;

    let mut buffer = RolloutBuffer {
        horizon,
        n_envs,
        obs_corrupted: Vec::with_capacity(total),
        obs_true: Vec::with_capacity(total),
        flags: Vec::with_capacity(total),
        actions: Matrix::zeros(total, n_joints),
        log_probs: vec![0.0; total],
        rewards: vec![0.0; total],
        dones: vec![false; total],
        values: vec![0.0; total],
        bootstrap_values: vec![0.0; n_envs],
        advantages: vec![0.0; total],
        returns: vec![0.0; total],
    };
    let mut stats = CollectStats::default();

    let mut cur_true: Vec<Observation> = envs.envs.iter().map(|e| e.observe_true()).collect();
    let mut cur_corrupted: Vec<Observation> =
        envs.envs.iter().map(|e| e.observe_corrupted()).collect();
    let mut cur_flags: Vec<DetectabilityFlags> = envs.envs.iter().map(|e| e.flags()).collect();

    for t in 0..horizon {
        // Batched actor forward on the corrupted view.
        let pairs: Vec<_> =
            cur_corrupted.iter().zip(&cur_flags).collect();
        let input = ActorInput::build(&pairs, mask_value, actor.mask_mode())?;
        let means = actor.forward_batch(&input)?;
        means.check_finite("rollout actor means")?;
        let actions = sample_actions(&means, actor.log_std(), &mut rng.actions);
        let logps = kernels::gaussian_logp_forward(&means, actor.log_std(), &actions);

        // Batched critic forward on the true view.
        let true_refs: Vec<&Observation> = cur_true.iter().collect();
        let tokens = critic.stack_true(&true_refs);
        let values = critic.forward_batch(&tokens)?;
        values.check_finite("rollout critic values")?;

        let results = envs.step_all(&actions)?;
        for b in 0..n_envs {
            let i = buffer.idx(t, b);
            buffer.obs_corrupted.push(cur_corrupted[b].clone());
            buffer.obs_true.push(cur_true[b].clone());
            buffer.flags.push(cur_flags[b].clone());
            buffer.actions.row_mut(i).copy_from_slice(actions.row(b));
            buffer.log_probs[i] = logps.get(b, 0);
            buffer.values[i] = values.get(b, 0);
            buffer.rewards[i] = results[b].reward;
            buffer.dones[i] = results[b].done;
            ep_steps[b] += 1;

            if results[b].done {
                stats.finished_episode_lengths.push(ep_steps[b]);
                ep_steps[b] = 0;
                let spec = sampler(&mut rng.resets)?;
                let seed = rng.resets.next_u64();
                envs.envs[b].reset_with_spec(spec, seed)?;
                cur_true[b] = envs.envs[b].observe_true();
                cur_corrupted[b] = envs.envs[b].observe_corrupted();
                cur_flags[b] = envs.envs[b].flags();
            } else {
                cur_true[b] = results[b].obs_true.clone();
                cur_corrupted[b] = results[b].obs_corrupted.clone();
                cur_flags[b] = envs.envs[b].flags();
            }
        }
    }

    // Bootstrap from the states the rollout stopped in.
    let true_refs: Vec<&Observation> = cur_true.iter().collect();
    let tokens = critic.stack_true(&true_refs);
    let boot = critic.forward_batch(&tokens)?;
    boot.check_finite("bootstrap values")?;
    for b in 0..n_envs {
        buffer.bootstrap_values[b] = boot.get(b, 0);
    }

    stats.mean_reward = buffer.rewards.iter().sum::<f64>() / total as f64;
    Ok((buffer, stats))
}

/// Exponentially weighted advantage estimation.
///
/// `A_t = sum_k (gamma*lambda)^k delta_{t+k}`, truncated at episode ends
/// (no bootstrap across dones) and bootstrapped at the horizon cut;
/// `R_t = A_t + V(s_t)`.
pub fn compute_gae(buffer: &mut RolloutBuffer, gamma: f64, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(UmcError::invalid("gae", format!("gamma {gamma}, lambda {lambda}")));
    }
    let (t_max, n_envs) = (buffer.horizon, buffer.n_envs);
    for b in 0..n_envs {
        let mut gae = 0.0;
        for t in (0..t_max).rev() {
            let i = t * n_envs + b;
            let next_value = if t + 1 == t_max {
                buffer.bootstrap_values[b]
            } else {
                buffer.values[(t + 1) * n_envs + b]
            };
            let non_terminal = if buffer.dones[i] { 0.0 } else { 1.0 };
            let delta =
                buffer.rewards[i] + gamma * next_value * non_terminal - buffer.values[i];
            gae = delta + gamma * lambda * non_terminal * gae;
            buffer.advantages[i] = gae;
            buffer.returns[i] = gae + buffer.values[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_buffer(horizon: usize, n_envs: usize) -> RolloutBuffer {
        let total = horizon * n_envs;
        RolloutBuffer {
            horizon,
            n_envs,
            obs_corrupted: Vec::new(),
            obs_true: Vec::new(),
            flags: Vec::new(),
            actions: Matrix::zeros(total, 1),
            log_probs: vec![0.0; total],
            rewards: vec![0.0; total],
            dones: vec![false; total],
            values: vec![0.0; total],
            bootstrap_values: vec![0.0; n_envs],
            advantages: vec![0.0; total],
            returns: vec![0.0; total],
        }
    }

    #[test]
    fn gae_hand_example() {
        // T=2, gamma=0.5, lambda=0.5, r=[1,1], V=[0,0], bootstrap 0:
        // delta = [1,1], A1 = 1, A0 = 1.25.
        let mut buf = empty_buffer(2, 1);
        buf.rewards = vec![1.0, 1.0];
        compute_gae(&mut buf, 0.5, 0.5).unwrap();
        assert!((buf.advantages[1] - 1.0).abs() < 1e-15);
        assert!((buf.advantages[0] - 1.25).abs() < 1e-15);
        assert_eq!(buf.returns, buf.advantages);
    }

    #[test]
    fn gamma_zero_collapses_to_td() {
        let mut buf = empty_buffer(4, 1);
        buf.rewards = vec![0.5, -1.0, 2.0, 0.25];
        buf.values = vec![0.1, 0.2, 0.3, 0.4];
        compute_gae(&mut buf, 0.0, 0.9).unwrap();
        for t in 0..4 {
            let expect = buf.rewards[t] - buf.values[t];
            assert_eq!(buf.advantages[t], expect, "t={t}");
        }
    }

    /// Brute-force (gamma*lambda)^k double-sum oracle, independent of the
    /// backward recursion.
    fn gae_oracle(
        rewards: &[f64],
        values: &[f64],
        dones: &[bool],
        bootstrap: f64,
        gamma: f64,
        lambda: f64,
    ) -> Vec<f64> {
        let t_max = rewards.len();
        let delta = |k: usize| -> f64 {
            let next = if k + 1 == t_max { bootstrap } else { values[k + 1] };
            let nt = if dones[k] { 0.0 } else { 1.0 };
            rewards[k] + gamma * next * nt - values[k]
        };
        (0..t_max)
            .map(|t| {
                let mut acc = 0.0;
                let mut factor = 1.0;
                for k in t..t_max {
                    acc += factor * delta(k);
                    if dones[k] {
                        break;
                    }
                    factor *= gamma * lambda;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = RngStream::new(77, 0);
        for _ in 0..500 {
            let t_max = 1 + rng.below(8);
            let mut buf = empty_buffer(t_max, 1);
            buf.rewards = (0..t_max).map(|_| rng.normal()).collect();
            buf.values = (0..t_max).map(|_| rng.normal()).collect();
            buf.dones = (0..t_max).map(|_| rng.next_f64() < 0.25).collect();
            buf.bootstrap_values = vec![rng.normal()];
            let gamma = 0.5 + 0.5 * rng.next_f64();
            let lambda = rng.next_f64();
            compute_gae(&mut buf, gamma, lambda).unwrap();
            let oracle = gae_oracle(
                &buf.rewards,
                &buf.values,
                &buf.dones,
                buf.bootstrap_values[0],
                gamma,
                lambda,
            );
            for t in 0..t_max {
                assert!(
                    (buf.advantages[t] - oracle[t]).abs() < 1e-12,
                    "t={t}: {} vs {}",
                    buf.advantages[t],
                    oracle[t]
                );
            }
        }
    }

    #[test]
    fn rejects_degenerate_discounts() {
        let mut buf = empty_buffer(2, 1);
        assert!(compute_gae(&mut buf, 1.5, 0.5).is_err());
        assert!(compute_gae(&mut buf, 0.9, 1.5).is_err());
        assert!(compute_gae(&mut buf, -0.1, 0.5).is_err());
    }
}
