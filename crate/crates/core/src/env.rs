//! Deterministic planar legged "compensation" environment.
//!
//! N torque-controlled joints drive two legs plus dedicated balance joints.
//! Legs generate rectified thrust, thrust asymmetry feeds a tilt channel,
//! and the robot falls when the tilt exceeds a threshold. Balance joints
//! both sense the tilt (through an acceleration leak) and act on it, so a
//! damaged leg can be compensated by the healthy leg plus balance torque.
//!
//! Step layout, frozen by the unit tests: entry constraints, thrust and
//! displacement from the constrained current state, accelerations from the
//! current state, semi-implicit integration, post-integration limit clamps,
//! reward, termination, damage activation bookkeeping.

use crate::damage::{constrain_joint, DamageSpec, DetectabilityFlags};
use crate::nn::Matrix;
use crate::policy::{Observation, OBS_COLS};
use crate::rng::RngStream;
use crate::{Result, UmcError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvConfig {
    pub n_legs: usize,
    pub joints_per_leg: usize,
    pub n_balance_joints: usize,
    /// Integration step, seconds.
    pub dt: f64,
    /// Joint viscous damping b.
    pub damping: f64,
    /// Joint inertia I.
    pub inertia: f64,
    /// Torque command saturation.
    pub tau_max: f64,
    /// Commanded body speed (reward saturates here).
    pub v_cmd: f64,
    /// Body speed cap.
    pub v_max: f64,
    /// Tilt response to thrust asymmetry (c_a).
    pub tilt_gain: f64,
    /// Tilt response to balance torque (c_b).
    pub balance_gain: f64,
    /// Tilt rate damping (c_d).
    pub tilt_damping: f64,
    /// Tilt-to-balance-joint acceleration leak (kappa).
    pub tilt_leak: f64,
    /// |tilt| beyond which the robot has fallen, radians.
    pub fall_threshold: f64,
    pub w_velocity: f64,
    pub w_energy: f64,
    pub w_tilt: f64,
    pub w_alive: f64,
    pub episode_length: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            n_legs: 2,
            joints_per_leg: 2,
            n_balance_joints: 2,
            dt: 0.02,
            damping: 0.5,
            inertia: 1.0,
            tau_max: 10.0,
            v_cmd: 1.0,
            v_max: 2.0,
            tilt_gain: 1.0,
            balance_gain: 0.5,
            tilt_damping: 1.0,
            tilt_leak: 1.0,
            fall_threshold: 0.5,
            w_velocity: 1.0,
            w_energy: 0.001,
            w_tilt: 0.5,
            w_alive: 0.1,
            episode_length: 1000,
        }
    }
}

impl EnvConfig {
    pub fn n_joints(&self) -> usize {
        self.n_legs * self.joints_per_leg + self.n_balance_joints
    }

    /// Joint indices of leg `leg`.
    pub fn leg_joints(&self, leg: usize) -> std::ops::Range<usize> {
        leg * self.joints_per_leg..(leg + 1) * self.joints_per_leg
    }

    /// Joint indices of the balance joints (the trailing block).
    pub fn balance_joints(&self) -> std::ops::Range<usize> {
        self.n_legs * self.joints_per_leg..self.n_joints()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_legs != 2 {
            // The tilt channel is defined on left/right thrust asymmetry.
            return Err(UmcError::invalid("env", "n_legs must be 2"));
        }
        if self.joints_per_leg == 0 || self.dt <= 0.0 || self.episode_length == 0 {
            return Err(UmcError::invalid("env", "degenerate configuration"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub prev_action: Vec<f64>,
    pub tilt: f64,
    pub tilt_vel: f64,
    /// Forward displacement x; non-decreasing since v >= 0.
    pub displacement: f64,
    pub step: usize,
    pub fallen: bool,
    pub damage_active: bool,
    x_at_onset: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub obs_true: Observation,
    pub obs_corrupted: Observation,
    pub reward: f64,
    pub done: bool,
    pub fallen: bool,
    pub displacement_since_onset: Option<f64>,
}

/// Principal angle in (-pi, pi].
pub fn wrap_angle(q: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let r = q.rem_euclid(tau);
    if r > std::f64::consts::PI {
        r - tau
    } else {
        r
    }
}

/// Replace sensor-failed joints' readings with the masking value while the
/// damage is active.
pub fn corrupt_sensors(
    obs_true: &Observation,
    spec: &DamageSpec,
    active: bool,
    mask_value: f64,
) -> Observation {
    if !active {
        return obs_true.clone();
    }
    let mut obs = obs_true.clone();
    for (&j, fault) in &spec.faults {
        if fault.sensor_failed {
            obs.set_joint(j, [mask_value; OBS_COLS]);
        }
    }
    obs
}

/// One environment instance owning its state and damage spec.
#[derive(Clone, Debug)]
pub struct SimEnv {
    cfg: EnvConfig,
    spec: DamageSpec,
    state: EnvState,
    mask_value: f64,
}

impl SimEnv {
    pub fn new(cfg: EnvConfig, spec: DamageSpec, seed: u64, mask_value: f64) -> Result<Self> {
        cfg.validate()?;
        spec.validate(cfg.n_joints())?;
        let mut env = SimEnv { cfg, spec, state: Self::blank_state(&cfg), mask_value };
        env.reset(seed);
        Ok(env)
    }

    fn blank_state(cfg: &EnvConfig) -> EnvState {
        let n = cfg.n_joints();
        EnvState {
            q: vec![0.0; n],
            qdot: vec![0.0; n],
            prev_action: vec![0.0; n],
            tilt: 0.0,
            tilt_vel: 0.0,
            displacement: 0.0,
            step: 0,
            fallen: false,
            damage_active: false,
            x_at_onset: None,
        }
    }

    /// Reset to a fresh episode: positions uniform in [-0.1, 0.1], all
    /// velocities zero. Deterministic per seed.
    pub fn reset(&mut self, seed: u64) -> Observation {
        let mut rng = RngStream::new(seed, 0xE27);
        let mut state = Self::blank_state(&self.cfg);
        for q in state.q.iter_mut() {
            *q = rng.uniform(-0.1, 0.1);
        }
        self.state = state;
        self.activate_if_due();
        self.observe_true()
    }

    /// Swap in a new damage spec and reset (used on auto-reset).
    pub fn reset_with_spec(&mut self, spec: DamageSpec, seed: u64) -> Result<Observation> {
        spec.validate(self.cfg.n_joints())?;
        self.spec = spec;
        Ok(self.reset(seed))
    }

    pub fn cfg(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &DamageSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.fallen || self.state.step >= self.cfg.episode_length
    }

    /// What the masking pipeline may know right now: nothing before onset.
    pub fn flags(&self) -> DetectabilityFlags {
        if self.state.damage_active {
            self.spec.detectability()
        } else {
            DetectabilityFlags::none()
        }
    }

    pub fn observe_true(&self) -> Observation {
        let s = &self.state;
        let m = Matrix::from_fn(self.cfg.n_joints(), OBS_COLS, |i, j| match j {
            // Position sensors report the principal angle: joints are
            // revolute, and unwrapped multi-turn counts would put the policy
            // inputs far outside the training distribution.
            0 => wrap_angle(s.q[i]),
            1 => s.qdot[i],
            _ => s.prev_action[i],
        });
        Observation::new(m).expect("state observation is finite")
    }

    pub fn observe_corrupted(&self) -> Observation {
        corrupt_sensors(&self.observe_true(), &self.spec, self.state.damage_active, self.mask_value)
    }

    fn activate_if_due(&mut self) {
        if !self.state.damage_active && self.state.step >= self.spec.onset_step {
            self.state.damage_active = true;
            self.state.x_at_onset = Some(self.state.displacement);
        }
    }

    /// Displacement accumulated since damage onset.
    pub fn displacement_since_onset(&self) -> Result<f64> {
        match self.state.x_at_onset {
            Some(x0) => Ok(self.state.displacement - x0),
            None => Err(UmcError::invalid(
                "displacement_since_onset",
                format!("queried at step {} before onset {}", self.state.step, self.spec.onset_step),
            )),
        }
    }

    /// Advance one step under the commanded torques.
    pub fn step(&mut self, torque_cmd: &[f64]) -> Result<StepResult> {
        let cfg = self.cfg;
        let n = cfg.n_joints();
        if torque_cmd.len() != n {
            return Err(UmcError::shape("env step", format!("{} torques for {n} joints", torque_cmd.len())));
        }
        if self.is_done() {
            return Err(UmcError::Invariant(format!(
                "step on terminal state (step {}, fallen {})",
                self.state.step, self.state.fallen
            )));
        }
        for t in torque_cmd {
            if !t.is_finite() {
                return Err(UmcError::non_finite("env step", format!("torque {t}")));
            }
        }
        let active = self.state.damage_active;

        // Entry clamps: command saturation, then the active fault limits.
        let cmd: Vec<f64> = torque_cmd.iter().map(|t| t.clamp(-cfg.tau_max, cfg.tau_max)).collect();
        let mut applied = vec![0.0; n];
        for i in 0..n {
            let (tau, q, qd) =
                constrain_joint(cmd[i], self.state.q[i], self.state.qdot[i], self.spec.faults.get(&i), active);
            applied[i] = tau;
            self.state.q[i] = q;
            self.state.qdot[i] = qd;
        }

        // Rectified per-leg thrust from the constrained current state.
        let thrust: Vec<f64> = (0..cfg.n_legs)
            .map(|l| {
                let sum: f64 =
                    cfg.leg_joints(l).map(|i| self.state.q[i].sin() * self.state.qdot[i]).sum();
                sum.max(0.0)
            })
            .collect();
        let v = (thrust.iter().sum::<f64>() / cfg.n_legs as f64).clamp(0.0, cfg.v_max);
        self.state.displacement += v * cfg.dt;

        // Accelerations evaluated on the current state.
        let balance_torque: f64 = cfg.balance_joints().map(|i| applied[i]).sum();
        let tilt_acc = cfg.tilt_gain * (thrust[0] - thrust[1]) + cfg.balance_gain * balance_torque
            - cfg.tilt_damping * self.state.tilt_vel;
        let mut q_acc = vec![0.0; n];
        for i in 0..n {
            q_acc[i] = (applied[i] - cfg.damping * self.state.qdot[i]) / cfg.inertia;
        }
        for i in cfg.balance_joints() {
            // Tilt leaks into the balance joints so it is observable through
            // the ordinary per-joint sensors.
            q_acc[i] += cfg.tilt_leak * self.state.tilt;
        }

        // Semi-implicit integration: velocities first, then positions.
        self.state.tilt_vel += tilt_acc * cfg.dt;
        self.state.tilt += self.state.tilt_vel * cfg.dt;
        for i in 0..n {
            self.state.qdot[i] += q_acc[i] * cfg.dt;
            self.state.q[i] += self.state.qdot[i] * cfg.dt;
        }

        // Re-apply the motion limits the integration may have violated.
        if active {
            for (&i, fault) in &self.spec.faults {
                if let Some(vl) = fault.velocity_limit {
                    self.state.qdot[i] = self.state.qdot[i].clamp(-vl, vl);
                }
                if let Some((lo, hi)) = fault.rom_window {
                    if self.state.q[i] < lo {
                        self.state.q[i] = lo;
                        self.state.qdot[i] = 0.0;
                    } else if self.state.q[i] > hi {
                        self.state.q[i] = hi;
                        self.state.qdot[i] = 0.0;
                    }
                }
            }
        }

        self.state.prev_action = cmd;

        let energy: f64 = applied.iter().map(|t| t * t).sum();
        let reward = cfg.w_velocity * v.min(cfg.v_cmd) - cfg.w_energy * energy
            - cfg.w_tilt * self.state.tilt * self.state.tilt
            + cfg.w_alive;

        self.state.step += 1;
        if self.state.tilt.abs() > cfg.fall_threshold {
            self.state.fallen = true;
        }
        let done = self.is_done();
        self.activate_if_due();

        let obs_true = self.observe_true();
        let obs_corrupted =
            corrupt_sensors(&obs_true, &self.spec, self.state.damage_active, self.mask_value);
        Ok(StepResult {
            obs_true,
            obs_corrupted,
            reward,
            done,
            fallen: self.state.fallen,
            displacement_since_onset: self.state.x_at_onset.map(|x0| self.state.displacement - x0),
        })
    }

    /// One tab-separated trajectory record for offline plotting.
    pub fn log_record(&self, applied_reward: Option<(&[f64], f64)>) -> String {
        let s = &self.state;
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join("\t");
        let (tau, reward) = match applied_reward {
            Some((t, r)) => (join(t), format!("{r:.6}")),
            None => (join(&vec![0.0; self.cfg.n_joints()]), "0".to_string()),
        };
        format!(
            "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{}\t{}\t{}",
            s.step,
            join(&s.q),
            join(&s.qdot),
            tau,
            s.tilt,
            s.displacement,
            reward,
            u8::from(s.damage_active),
            u8::from(s.fallen),
        )
    }
}

/// Header matching [`SimEnv::log_record`].
pub fn log_header(n_joints: usize) -> String {
    let cols = |p: &str| {
        (0..n_joints).map(|i| format!("{p}{i}")).collect::<Vec<_>>().join("\t")
    };
    format!(
        "step\t{}\t{}\t{}\ttilt\tx\treward\tdamage_active\tfallen",
        cols("q"),
        cols("qd"),
        cols("tau")
    )
}

/// A batch of independently owned environments stepped positionally.
pub struct EnvBatch {
    pub envs: Vec<SimEnv>,
}

impl EnvBatch {
    pub fn new(envs: Vec<SimEnv>) -> Self {
        EnvBatch { envs }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    /// Elementwise step; row `i` of `actions` drives env `i`.
    pub fn step_all(&mut self, actions: &Matrix) -> Result<Vec<StepResult>> {
        if actions.rows() != self.envs.len() {
            return Err(UmcError::shape(
                "batch step",
                format!("{} action rows for {} envs", actions.rows(), self.envs.len()),
            ));
        }
        self.envs
            .iter_mut()
            .enumerate()
            .map(|(i, env)| env.step(actions.row(i)))
            .collect()
    }
}

/// Open-loop sinusoidal leg program with proportional balance feedback.
/// Test fixture: not a learned policy, just enough structure to certify the
/// environment's compensation headroom.
#[derive(Clone, Copy, Debug)]
pub struct ScriptedController {
    /// Torque amplitude per leg.
    pub amp: [f64; 2],
    /// Gait frequency, Hz.
    pub freq: f64,
    /// Proportional balance gain on the balance joints.
    pub k_p: f64,
}

impl ScriptedController {
    pub fn torques(&self, cfg: &EnvConfig, state: &EnvState) -> Vec<f64> {
        let mut tau = vec![0.0; cfg.n_joints()];
        let t = state.step as f64 * cfg.dt;
        let omega = std::f64::consts::TAU * self.freq;
        for leg in 0..cfg.n_legs {
            for (k, i) in cfg.leg_joints(leg).enumerate() {
                let phase = k as f64 * std::f64::consts::FRAC_PI_2;
                tau[i] = self.amp[leg] * (omega * t + phase).sin();
            }
        }
        for i in cfg.balance_joints() {
            tau[i] = -self.k_p * state.q[i];
        }
        tau
    }
}
