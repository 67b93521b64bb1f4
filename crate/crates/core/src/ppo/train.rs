//! Two-stage (and ablation-paradigm) training pipelines.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::buffer::{collect_rollout, compute_gae, CollectRng};
use super::update::update;
use super::PpoHyper;
use crate::ckpt::{self, Checkpoint};
use crate::damage::{sample_stage2, DamageParams, DamageSpec};
use crate::env::{EnvBatch, EnvConfig, SimEnv};
use crate::policy::{Actor, ActorParams, CriticParams, MlpActorParams, MlpConfig, ModelConfig};
use crate::rng::RngStream;
use crate::{Result, UmcError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Paradigm {
    /// Stage I on undamaged envs, then Stage II on the four-subcategory mix.
    StageBased,
    /// Difficulty curriculum: no damage, undetectable, sensor-only,
    /// detectable; one block each.
    CurriculumBased,
    /// The Stage-II mixture from scratch for the whole budget.
    OneStage,
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Paradigm::StageBased => "stage",
            Paradigm::CurriculumBased => "curriculum",
            Paradigm::OneStage => "one-stage",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelVariant {
    Transformer,
    Mlp,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub stage2_ratios: [f64; 4],
    pub paradigm: Paradigm,
    pub mask_value: f64,
    pub seed: u64,
    pub variant: ModelVariant,
    pub model: ModelConfig,
    pub mlp_hidden: Vec<usize>,
    pub env: EnvConfig,
    pub damage: DamageParams,
    /// Damaged-joint count range for Stage-II draws.
    pub damage_range: (usize, usize),
    pub hyper: PpoHyper,
    /// Kept for interface stability: collection in this implementation is
    /// always sequential over envs, so strict mode equals normal mode.
    pub strict_determinism: bool,
}

/// One row of the training-curve log.
#[derive(Clone, Debug)]
pub struct CurveRow {
    pub iteration: usize,
    pub stage: String,
    pub mean_reward: f64,
    pub mean_episode_len: f64,
    pub loss_surrogate: f64,
    pub loss_value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

pub const CURVE_HEADER: &str =
    "iteration,stage,mean_reward,mean_episode_len,loss_surrogate,loss_value,entropy,clip_fraction";

impl CurveRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.stage,
            self.mean_reward,
            self.mean_episode_len,
            self.loss_surrogate,
            self.loss_value,
            self.entropy,
            self.clip_fraction
        )
    }
}

pub struct TrainArtifacts {
    pub actor: Actor,
    pub critic: CriticParams,
    pub curve: Vec<CurveRow>,
    /// Checkpoints captured at stage boundaries and at the end, with tags.
    pub checkpoints: Vec<(String, Checkpoint)>,
}

/// One phase of the schedule: an iteration budget plus its damage sampler.
#[derive(Clone, Debug)]
struct Phase {
    tag: String,
    iters: usize,
    /// Ratios over the four Stage-II subcategories; `None` means scenario-8
    /// only (Stage I).
    ratios: Option<[f64; 4]>,
}

fn schedule(cfg: &TrainConfig) -> Result<Vec<Phase>> {
    if cfg.stage2_ratios.iter().any(|w| *w < 0.0) || cfg.stage2_ratios.iter().all(|w| *w == 0.0) {
        return Err(UmcError::invalid("stage2 ratios", format!("{:?}", cfg.stage2_ratios)));
    }
    let phases = match cfg.paradigm {
        Paradigm::StageBased => vec![
            Phase { tag: "stage1".into(), iters: cfg.stage1_iters, ratios: None },
            Phase { tag: "stage2".into(), iters: cfg.stage2_iters, ratios: Some(cfg.stage2_ratios) },
        ],
        Paradigm::OneStage => vec![Phase {
            tag: "one-stage".into(),
            iters: cfg.stage1_iters + cfg.stage2_iters,
            ratios: Some(cfg.stage2_ratios),
        }],
        Paradigm::CurriculumBased => {
            // Increasing difficulty; each damage block draws one subcategory.
            let per = cfg.stage2_iters / 3;
            let last = cfg.stage2_iters - 2 * per;
            vec![
                Phase { tag: "curriculum-normal".into(), iters: cfg.stage1_iters, ratios: None },
                Phase {
                    tag: "curriculum-undetectable".into(),
                    iters: per,
                    ratios: Some([0.0, 0.0, 0.0, 1.0]),
                },
                Phase {
                    tag: "curriculum-sensor-only".into(),
                    iters: per,
                    ratios: Some([0.0, 1.0, 0.0, 0.0]),
                },
                Phase {
                    tag: "curriculum-detectable".into(),
                    iters: last,
                    ratios: Some([0.0, 0.0, 1.0, 0.0]),
                },
            ]
        }
    };
    Ok(phases.into_iter().filter(|p| p.iters > 0).collect())
}

fn make_sampler<'a>(
    phase: &'a Phase,
    cfg: &'a TrainConfig,
    n_joints: usize,
) -> impl FnMut(&mut RngStream) -> Result<DamageSpec> + 'a {
    move |rng: &mut RngStream| match phase.ratios {
        // Stage I: undamaged conditions only.
        None => Ok(DamageSpec::none(0)),
        Some(ratios) => {
            // Training malfunctions are present from episode start.
            sample_stage2(rng, ratios, n_joints, cfg.damage_range, &cfg.damage, 0)
        }
    }
}

/// Run the configured pipeline. Checkpoints and the training curve are also
/// written under `out_dir` when provided.
pub fn train(cfg: &TrainConfig, config_hash: u64, out_dir: Option<&Path>) -> Result<TrainArtifacts> {
    cfg.env.validate()?;
    cfg.hyper.validate()?;
    let n_joints = cfg.env.n_joints();
    if cfg.model.n_joints != n_joints {
        return Err(UmcError::invalid(
            "train",
            format!("model joints {} != env joints {n_joints}", cfg.model.n_joints),
        ));
    }
    let phases = schedule(cfg)?;

    let mut actor = match cfg.variant {
        ModelVariant::Transformer => Actor::Transformer(ActorParams::init(cfg.model, cfg.seed)?),
        ModelVariant::Mlp => Actor::Mlp(MlpActorParams::init(
            MlpConfig { n_joints, hidden: cfg.mlp_hidden.clone() },
            cfg.seed,
        )?),
    };
    let mut critic = CriticParams::init(cfg.model, cfg.seed)?;

    // Environment fleet, seeded per index.
    let mut env_seed = RngStream::new(cfg.seed, 0xE5EED);
    let mut envs = Vec::with_capacity(cfg.hyper.n_envs);
    for _ in 0..cfg.hyper.n_envs {
        envs.push(SimEnv::new(cfg.env, DamageSpec::none(0), env_seed.next_u64(), cfg.mask_value)?);
    }
    let mut envs = EnvBatch::new(envs);
    let mut ep_steps = vec![0usize; cfg.hyper.n_envs];

    let mut curve = Vec::new();
    let mut checkpoints = Vec::new();
    let mut iteration = 0usize;
    let mut last_mean_len = 0.0;
    let mut consecutive_failures = 0usize;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| UmcError::io(dir.display().to_string(), e))?;
    }

    for (p_idx, phase) in phases.iter().enumerate() {
        // Clean phase boundary: every env restarts under the new sampler.
        {
            let mut sampler = make_sampler(phase, cfg, n_joints);
            let mut boundary_rng = RngStream::new(cfg.seed, 0xB0_0000 ^ iteration as u64);
            for b in 0..envs.len() {
                let spec = sampler(&mut boundary_rng)?;
                envs.envs[b].reset_with_spec(spec, boundary_rng.next_u64())?;
                ep_steps[b] = 0;
            }
        }

        for _ in 0..phase.iters {
            let timing = std::env::var_os("UMC_TIMING").is_some();
            let t0 = std::time::Instant::now();
            let mut sampler = make_sampler(phase, cfg, n_joints);
            let mut rng = CollectRng::new(cfg.seed, iteration as u64);
            let (mut buffer, stats) = collect_rollout(
                &actor,
                &critic,
                &mut envs,
                &mut sampler,
                cfg.hyper.horizon,
                cfg.mask_value,
                &mut rng,
                &mut ep_steps,
            )?;
            let t_collect = t0.elapsed();
            compute_gae(&mut buffer, cfg.hyper.gamma, cfg.hyper.gae_lambda)?;

            let t1 = std::time::Instant::now();
            let mut update_rng = RngStream::new(cfg.seed, 0x5E_0000 ^ iteration as u64);
            if timing {
                eprintln!(
                    "iter {iteration}: collect {:.0} ms",
                    t_collect.as_secs_f64() * 1e3
                );
            }
            let ustats =
                match update(&buffer, &mut actor, &mut critic, &cfg.hyper, cfg.mask_value, &mut update_rng) {
                    Ok(s) => {
                        consecutive_failures = 0;
                        s
                    }
                    Err(e) => {
                        // Params were rolled back; skip this update but give
                        // up if it keeps happening.
                        consecutive_failures += 1;
                        if consecutive_failures > 5 {
                            return Err(e);
                        }
                        super::update::UpdateStats::default()
                    }
                };
            if timing {
                eprintln!("iter {iteration}: update {:.0} ms", t1.elapsed().as_secs_f64() * 1e3);
            }

            if !stats.finished_episode_lengths.is_empty() {
                last_mean_len = stats.finished_episode_lengths.iter().sum::<usize>() as f64
                    / stats.finished_episode_lengths.len() as f64;
            }
            curve.push(CurveRow {
                iteration,
                stage: phase.tag.clone(),
                mean_reward: stats.mean_reward,
                mean_episode_len: last_mean_len,
                loss_surrogate: ustats.loss_surrogate,
                loss_value: ustats.loss_value,
                entropy: ustats.entropy,
                clip_fraction: ustats.clip_fraction,
            });
            iteration += 1;
        }

        let tag =
            if p_idx + 1 == phases.len() { "final".to_string() } else { phase.tag.clone() };
        let snap = Checkpoint::capture(&actor, &critic, config_hash, &tag, cfg.seed);
        if let Some(dir) = out_dir {
            ckpt::save(&dir.join(format!("ckpt_{tag}.umc")), &snap)?;
        }
        checkpoints.push((tag, snap));
    }

    // Degenerate schedules (all budgets zero) still emit a final checkpoint.
    if checkpoints.is_empty() {
        let snap = Checkpoint::capture(&actor, &critic, config_hash, "final", cfg.seed);
        if let Some(dir) = out_dir {
            ckpt::save(&dir.join("ckpt_final.umc"), &snap)?;
        }
        checkpoints.push(("final".to_string(), snap));
    }

    if let Some(dir) = out_dir {
        let path = dir.join("training_curve.csv");
        let mut text = String::from(CURVE_HEADER);
        text.push('\n');
        for row in &curve {
            text.push_str(&row.to_csv());
            text.push('\n');
        }
        let mut f =
            fs::File::create(&path).map_err(|e| UmcError::io(path.display().to_string(), e))?;
        f.write_all(text.as_bytes())
            .map_err(|e| UmcError::io(path.display().to_string(), e))?;
    }

    Ok(TrainArtifacts { actor, critic, curve, checkpoints })
}
