//! Structured-text configuration: `key = value` lines with dotted keys,
//! `#` comments, documented defaults, and hard rejection of unknown keys.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::damage::DamageParams;
use crate::env::EnvConfig;
use crate::eval::{EvalConfig, InferenceSetting};
use crate::policy::{MaskMode, ModelConfig};
use crate::ppo::{ModelVariant, Paradigm, PpoHyper, TrainConfig};
use crate::{Result, UmcError};

/// The whole experiment configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct UmcConfig {
    pub env: EnvConfig,
    pub eval_episode_length: usize,
    pub damage: DamageParams,
    /// Damaged-joint count range for Stage-II training draws.
    pub train_count_range: (usize, usize),
    pub hyper: PpoHyper,
    pub stage2_ratios: [f64; 4],
    pub mask_value: f64,
    pub mask_mode: MaskMode,
    pub variant: ModelVariant,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub mlp_hidden: Vec<usize>,
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub paradigm: Paradigm,
    pub seed: u64,
    /// `(seed, malfunction timing)` per inference setting.
    pub eval_settings: Vec<(u64, usize)>,
    /// Damaged-joint count range during evaluation.
    pub eval_count_range: (usize, usize),
    pub eval_n_envs: usize,
}

impl Default for UmcConfig {
    fn default() -> Self {
        UmcConfig {
            env: EnvConfig::default(),
            eval_episode_length: 750,
            damage: DamageParams::default(),
            train_count_range: (2, 4),
            hyper: PpoHyper::default(),
            stage2_ratios: [1.0; 4],
            mask_value: 0.0,
            mask_mode: MaskMode::Column,
            variant: ModelVariant::Transformer,
            d_model: 8,
            blocks: 1,
            heads: 2,
            d_ff: 16,
            mlp_hidden: vec![256, 512, 256, 256],
            stage1_iters: 300,
            stage2_iters: 300,
            paradigm: Paradigm::StageBased,
            seed: 0,
            eval_settings: vec![(1, 75), (800, 100), (50, 125)],
            eval_count_range: (2, 3),
            eval_n_envs: 256,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| UmcError::Config(format!("{key}: cannot parse {v:?}: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| parse_num(key, p))
        .collect()
}

impl UmcConfig {
    /// Parse `key = value` text over the defaults. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = UmcConfig::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(UmcError::Config(format!("line {}: expected key = value", ln + 1)));
            };
            cfg.apply(key.trim(), value.trim())
                .map_err(|e| UmcError::Config(format!("line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| UmcError::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "env.n_legs" => self.env.n_legs = parse_num(key, v)?,
            "env.joints_per_leg" => self.env.joints_per_leg = parse_num(key, v)?,
            "env.n_balance_joints" => self.env.n_balance_joints = parse_num(key, v)?,
            "env.dt" => self.env.dt = parse_num(key, v)?,
            "env.damping" => self.env.damping = parse_num(key, v)?,
            "env.inertia" => self.env.inertia = parse_num(key, v)?,
            "env.tau_max" => self.env.tau_max = parse_num(key, v)?,
            "env.v_cmd" => self.env.v_cmd = parse_num(key, v)?,
            "env.v_max" => self.env.v_max = parse_num(key, v)?,
            "env.tilt_gain" => self.env.tilt_gain = parse_num(key, v)?,
            "env.balance_gain" => self.env.balance_gain = parse_num(key, v)?,
            "env.tilt_damping" => self.env.tilt_damping = parse_num(key, v)?,
            "env.tilt_leak" => self.env.tilt_leak = parse_num(key, v)?,
            "env.fall_threshold" => self.env.fall_threshold = parse_num(key, v)?,
            "env.w_velocity" => self.env.w_velocity = parse_num(key, v)?,
            "env.w_energy" => self.env.w_energy = parse_num(key, v)?,
            "env.w_tilt" => self.env.w_tilt = parse_num(key, v)?,
            "env.w_alive" => self.env.w_alive = parse_num(key, v)?,
            "env.episode_length" => self.env.episode_length = parse_num(key, v)?,
            "env.eval_episode_length" => self.eval_episode_length = parse_num(key, v)?,
            "damage.torque_limit" => self.damage.torque_limit = parse_num(key, v)?,
            "damage.velocity_limit" => self.damage.velocity_limit = parse_num(key, v)?,
            "damage.rom_fraction" => self.damage.rom_fraction = parse_num(key, v)?,
            "damage.rom_lo" => self.damage.rom_full_range.0 = parse_num(key, v)?,
            "damage.rom_hi" => self.damage.rom_full_range.1 = parse_num(key, v)?,
            "damage.train_count_lo" => self.train_count_range.0 = parse_num(key, v)?,
            "damage.train_count_hi" => self.train_count_range.1 = parse_num(key, v)?,
            "ppo.gamma" => self.hyper.gamma = parse_num(key, v)?,
            "ppo.gae_lambda" => self.hyper.gae_lambda = parse_num(key, v)?,
            "ppo.clip_eps" => self.hyper.clip_eps = parse_num(key, v)?,
            "ppo.value_coef" => self.hyper.value_coef = parse_num(key, v)?,
            "ppo.entropy_coef" => self.hyper.entropy_coef = parse_num(key, v)?,
            "ppo.epochs" => self.hyper.epochs = parse_num(key, v)?,
            "ppo.minibatches" => self.hyper.minibatches = parse_num(key, v)?,
            "ppo.lr" => self.hyper.lr = parse_num(key, v)?,
            "ppo.max_grad_norm" => self.hyper.max_grad_norm = parse_num(key, v)?,
            "ppo.horizon" => self.hyper.horizon = parse_num(key, v)?,
            "ppo.n_envs" => self.hyper.n_envs = parse_num(key, v)?,
            "stage2.ratios" => {
                let ws: Vec<f64> = parse_list(key, v)?;
                if ws.len() != 4 {
                    return Err(UmcError::Config(format!("{key}: need 4 weights, got {}", ws.len())));
                }
                self.stage2_ratios = [ws[0], ws[1], ws[2], ws[3]];
            }
            "mask.value" => self.mask_value = parse_num(key, v)?,
            "mask.mode" => {
                self.mask_mode = match v {
                    "column" => MaskMode::Column,
                    "row-column" => MaskMode::RowAndColumn,
                    other => return Err(UmcError::Config(format!("{key}: unknown mode {other}"))),
                }
            }
            "model.variant" => {
                self.variant = match v {
                    "transformer" => ModelVariant::Transformer,
                    "mlp" => ModelVariant::Mlp,
                    other => return Err(UmcError::Config(format!("{key}: unknown variant {other}"))),
                }
            }
            "model.d_model" => self.d_model = parse_num(key, v)?,
            "model.blocks" => self.blocks = parse_num(key, v)?,
            "model.heads" => self.heads = parse_num(key, v)?,
            "model.d_ff" => self.d_ff = parse_num(key, v)?,
            "model.mlp_hidden" => self.mlp_hidden = parse_list(key, v)?,
            "train.stage1_iters" => self.stage1_iters = parse_num(key, v)?,
            "train.stage2_iters" => self.stage2_iters = parse_num(key, v)?,
            "train.paradigm" => {
                self.paradigm = match v {
                    "stage" => Paradigm::StageBased,
                    "curriculum" => Paradigm::CurriculumBased,
                    "one-stage" => Paradigm::OneStage,
                    other => return Err(UmcError::Config(format!("{key}: unknown paradigm {other}"))),
                }
            }
            "train.seed" => self.seed = parse_num(key, v)?,
            "eval.settings" => {
                let mut settings = Vec::new();
                for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    let Some((seed, timing)) = part.split_once(':') else {
                        return Err(UmcError::Config(format!("{key}: expected seed:timing, got {part}")));
                    };
                    settings.push((parse_num(key, seed.trim())?, parse_num(key, timing.trim())?));
                }
                if settings.is_empty() {
                    return Err(UmcError::Config(format!("{key}: no settings")));
                }
                self.eval_settings = settings;
            }
            "eval.count_lo" => self.eval_count_range.0 = parse_num(key, v)?,
            "eval.count_hi" => self.eval_count_range.1 = parse_num(key, v)?,
            "eval.n_envs" => self.eval_n_envs = parse_num(key, v)?,
            other => return Err(UmcError::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.hyper.validate()?;
        let n = self.env.n_joints();
        ModelConfig {
            n_joints: n,
            d_model: self.d_model,
            blocks: self.blocks,
            heads: self.heads,
            d_ff: self.d_ff,
            mask_mode: self.mask_mode,
        }
        .validate()?;
        for (seed, timing) in &self.eval_settings {
            if *timing >= self.eval_episode_length {
                return Err(UmcError::Config(format!(
                    "eval setting ({seed}, {timing}): timing >= eval episode length {}",
                    self.eval_episode_length
                )));
            }
        }
        Ok(())
    }

    /// Canonical text form: every key in fixed order. Basis of the config
    /// hash carried by checkpoints.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let e = &self.env;
        let _ = write!(
            s,
            "env.n_legs={};env.joints_per_leg={};env.n_balance_joints={};env.dt={};env.damping={};\
             env.inertia={};env.tau_max={};env.v_cmd={};env.v_max={};env.tilt_gain={};\
             env.balance_gain={};env.tilt_damping={};env.tilt_leak={};env.fall_threshold={};\
             env.w_velocity={};env.w_energy={};env.w_tilt={};env.w_alive={};env.episode_length={};\
             env.eval_episode_length={};",
            e.n_legs, e.joints_per_leg, e.n_balance_joints, e.dt, e.damping, e.inertia, e.tau_max,
            e.v_cmd, e.v_max, e.tilt_gain, e.balance_gain, e.tilt_damping, e.tilt_leak,
            e.fall_threshold, e.w_velocity, e.w_energy, e.w_tilt, e.w_alive, e.episode_length,
            self.eval_episode_length
        );
        let d = &self.damage;
        let _ = write!(
            s,
            "damage.torque_limit={};damage.velocity_limit={};damage.rom_fraction={};damage.rom={}..{};\
             damage.train_count={}..{};",
            d.torque_limit, d.velocity_limit, d.rom_fraction, d.rom_full_range.0, d.rom_full_range.1,
            self.train_count_range.0, self.train_count_range.1
        );
        let h = &self.hyper;
        let _ = write!(
            s,
            "ppo.gamma={};ppo.gae_lambda={};ppo.clip_eps={};ppo.value_coef={};ppo.entropy_coef={};\
             ppo.epochs={};ppo.minibatches={};ppo.lr={};ppo.max_grad_norm={};ppo.horizon={};ppo.n_envs={};",
            h.gamma, h.gae_lambda, h.clip_eps, h.value_coef, h.entropy_coef, h.epochs,
            h.minibatches, h.lr, h.max_grad_norm, h.horizon, h.n_envs
        );
        let _ = write!(
            s,
            "stage2.ratios={},{},{},{};mask.value={};mask.mode={:?};model.variant={:?};\
             model.d_model={};model.blocks={};model.heads={};model.d_ff={};model.mlp_hidden={:?};\
             train.stage1_iters={};train.stage2_iters={};train.paradigm={:?};train.seed={};\
             eval.settings={:?};eval.count={}..{};eval.n_envs={};",
            self.stage2_ratios[0], self.stage2_ratios[1], self.stage2_ratios[2], self.stage2_ratios[3],
            self.mask_value, self.mask_mode, self.variant, self.d_model, self.blocks, self.heads,
            self.d_ff, self.mlp_hidden, self.stage1_iters, self.stage2_iters, self.paradigm,
            self.seed, self.eval_settings, self.eval_count_range.0, self.eval_count_range.1,
            self.eval_n_envs
        );
        s
    }

    /// FNV-1a hash of the canonical text.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_joints: self.env.n_joints(),
            d_model: self.d_model,
            blocks: self.blocks,
            heads: self.heads,
            d_ff: self.d_ff,
            mask_mode: self.mask_mode,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            stage1_iters: self.stage1_iters,
            stage2_iters: self.stage2_iters,
            stage2_ratios: self.stage2_ratios,
            paradigm: self.paradigm,
            mask_value: self.mask_value,
            seed: self.seed,
            variant: self.variant,
            model: self.model_config(),
            mlp_hidden: self.mlp_hidden.clone(),
            env: self.env,
            damage: self.damage,
            damage_range: self.train_count_range,
            hyper: self.hyper,
            strict_determinism: true,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        let mut env = self.env;
        env.episode_length = self.eval_episode_length;
        EvalConfig {
            env,
            damage: self.damage,
            mask_value: self.mask_value,
            n_envs: self.eval_n_envs,
            thresholds: [1.0, 2.0, 3.0, 4.0, 5.0],
        }
    }

    pub fn settings(&self) -> Vec<InferenceSetting> {
        self.eval_settings
            .iter()
            .enumerate()
            .map(|(i, &(seed, timing))| InferenceSetting {
                id: format!("s{i}"),
                seed,
                malfunction_timing: timing,
                damage_count_range: self.eval_count_range,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = UmcConfig::parse("").unwrap();
        assert_eq!(cfg, UmcConfig::default());
        assert_eq!(cfg.env.n_joints(), 6);
    }

    #[test]
    fn keys_apply_and_comments_are_ignored() {
        let text = "\
# experiment
ppo.gamma = 0.95
stage2.ratios = 1, 2, 2, 1
mask.value = -100
train.paradigm = curriculum   # fine-tune order
eval.settings = 5:50, 9:60
model.variant = mlp
";
        let cfg = UmcConfig::parse(text).unwrap();
        assert_eq!(cfg.hyper.gamma, 0.95);
        assert_eq!(cfg.stage2_ratios, [1.0, 2.0, 2.0, 1.0]);
        assert_eq!(cfg.mask_value, -100.0);
        assert_eq!(cfg.paradigm, Paradigm::CurriculumBased);
        assert_eq!(cfg.eval_settings, vec![(5, 50), (9, 60)]);
        assert_eq!(cfg.variant, ModelVariant::Mlp);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = UmcConfig::parse("env.gravity = 9.8").unwrap_err();
        assert!(matches!(err, UmcError::Config(_)));
        assert!(err.to_string().contains("unknown key"));
    }

    #[test]
    fn malformed_lines_are_errors() {
        assert!(UmcConfig::parse("just words").is_err());
        assert!(UmcConfig::parse("ppo.gamma = fast").is_err());
        assert!(UmcConfig::parse("stage2.ratios = 1,2").is_err());
        assert!(UmcConfig::parse("eval.settings = 77").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = UmcConfig::default();
        let b = UmcConfig::parse("ppo.gamma = 0.9").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), UmcConfig::default().hash());
    }

    #[test]
    fn validation_rejects_bad_timing() {
        let err = UmcConfig::parse("eval.settings = 1:900").unwrap_err();
        assert!(err.to_string().contains("timing"));
    }
}
