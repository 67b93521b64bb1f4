//! Eight-scenario fault taxonomy, damage sampling, and the physical
//! constraint operators applied inside the simulator.

use std::collections::BTreeMap;
use std::fmt;

use crate::rng::RngStream;
use crate::{Result, UmcError};

/// Per-joint fault description.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JointFault {
    pub sensor_failed: bool,
    /// Restricted range of motion, radians.
    pub rom_window: Option<(f64, f64)>,
    /// Torque magnitude cap.
    pub torque_limit: Option<f64>,
    /// Joint speed magnitude cap, rad/s.
    pub velocity_limit: Option<f64>,
    /// Whether the controller is told about the joint damage.
    pub detectable: bool,
}

impl JointFault {
    pub fn has_joint_damage(&self) -> bool {
        self.rom_window.is_some() || self.torque_limit.is_some() || self.velocity_limit.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.rom_window {
            if !(lo < hi) {
                return Err(UmcError::invalid("rom_window", format!("({lo}, {hi})")));
            }
        }
        for (name, lim) in
            [("torque_limit", self.torque_limit), ("velocity_limit", self.velocity_limit)]
        {
            if let Some(l) = lim {
                if !(l > 0.0) {
                    return Err(UmcError::invalid(name, format!("{l}")));
                }
            }
        }
        Ok(())
    }
}

/// The four Stage-II sampling subcategories.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage2Subcategory {
    Normal,
    SensorOnly,
    DetectableJoint,
    UndetectableJoint,
}

impl Stage2Subcategory {
    pub const ALL: [Stage2Subcategory; 4] = [
        Stage2Subcategory::Normal,
        Stage2Subcategory::SensorOnly,
        Stage2Subcategory::DetectableJoint,
        Stage2Subcategory::UndetectableJoint,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Stage2Subcategory::Normal => "normal",
            Stage2Subcategory::SensorOnly => "sensor-only",
            Stage2Subcategory::DetectableJoint => "detectable-joint",
            Stage2Subcategory::UndetectableJoint => "undetectable-joint",
        }
    }
}

/// Where a [`DamageSpec`] came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioTag {
    /// One of the eight evaluation scenarios.
    Scenario(u8),
    /// A Stage-II training draw.
    Stage2(Stage2Subcategory),
}

impl fmt::Display for ScenarioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioTag::Scenario(id) => write!(f, "scenario-{id}"),
            ScenarioTag::Stage2(sub) => write!(f, "stage2-{}", sub.label()),
        }
    }
}

/// Full fault description for one environment episode.
#[derive(Clone, Debug, PartialEq)]
pub struct DamageSpec {
    pub faults: BTreeMap<usize, JointFault>,
    /// Step index at which the faults become active.
    pub onset_step: usize,
    pub scenario: ScenarioTag,
}

impl DamageSpec {
    /// A no-fault spec (scenario 8 pattern).
    pub fn none(onset_step: usize) -> Self {
        DamageSpec { faults: BTreeMap::new(), onset_step, scenario: ScenarioTag::Scenario(8) }
    }

    pub fn validate(&self, n_joints: usize) -> Result<()> {
        for (&j, fault) in &self.faults {
            if j >= n_joints {
                return Err(UmcError::invalid("damage joint", format!("{j} >= {n_joints}")));
            }
            fault.validate()?;
        }
        Ok(())
    }

    /// Derive what the controller is allowed to know: a joint is masked when
    /// its sensor fails or its joint damage is detectable (detected damage
    /// also kills the sensor); the flag is raised only for detected joint
    /// malfunctions, never for sensor-only failures.
    pub fn detectability(&self) -> DetectabilityFlags {
        let mut masked = Vec::new();
        let mut detected = false;
        for (&j, fault) in &self.faults {
            let joint_detected = fault.has_joint_damage() && fault.detectable;
            if fault.sensor_failed || joint_detected {
                masked.push(j);
            }
            detected |= joint_detected;
        }
        DetectabilityFlags { masked_joints: masked, joint_malfunction_detected: detected }
    }

    /// Human-readable record for evaluation logs.
    pub fn summary(&self) -> String {
        if self.faults.is_empty() {
            return format!("{} onset={} (no faults)", self.scenario, self.onset_step);
        }
        let mut parts = Vec::new();
        for (j, f) in &self.faults {
            let mut kinds = Vec::new();
            if f.sensor_failed {
                kinds.push("sensor".to_string());
            }
            if let Some((lo, hi)) = f.rom_window {
                kinds.push(format!("rom[{lo:.3},{hi:.3}]"));
            }
            if let Some(t) = f.torque_limit {
                kinds.push(format!("torque<={t:.3}"));
            }
            if let Some(v) = f.velocity_limit {
                kinds.push(format!("vel<={v:.3}"));
            }
            parts.push(format!("j{j}:{}", kinds.join("+")));
        }
        format!("{} onset={} {}", self.scenario, self.onset_step, parts.join(" "))
    }
}

/// What the masking pipeline is told about the current damage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectabilityFlags {
    /// Joints whose observations are replaced by the masking value, sorted.
    pub masked_joints: Vec<usize>,
    /// Raises the flag token from all -1 to all +1.
    pub joint_malfunction_detected: bool,
}

impl DetectabilityFlags {
    pub fn none() -> Self {
        DetectabilityFlags::default()
    }
}

/// Magnitude/limit configuration for fault construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DamageParams {
    /// Absolute torque cap for damaged joints.
    pub torque_limit: f64,
    /// Absolute joint-speed cap for damaged joints, rad/s.
    pub velocity_limit: f64,
    /// ROM window width as a fraction of the full range.
    pub rom_fraction: f64,
    /// Full admissible joint range the ROM window is placed inside.
    pub rom_full_range: (f64, f64),
}

impl Default for DamageParams {
    fn default() -> Self {
        // Proportional analogues of robot-specific absolute limits: 30% of
        // tau_max = 10, 30% of the damping-limited joint speed tau_max/b = 20,
        // and a 30% ROM window inside the +-1.5 rad working range.
        DamageParams {
            torque_limit: 3.0,
            velocity_limit: 6.0,
            rom_fraction: 0.3,
            rom_full_range: (-1.5, 1.5),
        }
    }
}

/// Fault pattern of one of the eight scenarios, before joints are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScenarioTemplate {
    pub id: u8,
    pub sensor_failed: bool,
    pub rom: bool,
    pub torque: bool,
    pub velocity: bool,
    pub detectable: bool,
}

/// The eight-scenario table: 1 sensor-only; 2/3/4 failed sensor plus one
/// detectable joint-damage type (ROM / motor / velocity); 5/6/7 the same
/// damage types with functional sensors, undetected; 8 no faults.
pub fn scenario_config(id: u8) -> Result<ScenarioTemplate> {
    let (sensor_failed, rom, torque, velocity, detectable) = match id {
        1 => (true, false, false, false, false),
        2 => (true, true, false, false, true),
        3 => (true, false, true, false, true),
        4 => (true, false, false, true, true),
        5 => (false, true, false, false, false),
        6 => (false, false, true, false, false),
        7 => (false, false, false, true, false),
        8 => (false, false, false, false, false),
        _ => return Err(UmcError::invalid("scenario id", format!("{id} not in 1..8"))),
    };
    Ok(ScenarioTemplate { id, sensor_failed, rom, torque, velocity, detectable })
}

impl ScenarioTemplate {
    fn build_fault(&self, rng: &mut RngStream, params: &DamageParams) -> Result<JointFault> {
        let rom_window = if self.rom {
            Some(make_rom_window(rng, params.rom_full_range, params.rom_fraction)?)
        } else {
            None
        };
        Ok(JointFault {
            sensor_failed: self.sensor_failed,
            rom_window,
            torque_limit: self.torque.then_some(params.torque_limit),
            velocity_limit: self.velocity.then_some(params.velocity_limit),
            detectable: self.detectable,
        })
    }

    fn has_any_fault(&self) -> bool {
        self.sensor_failed || self.rom || self.torque || self.velocity
    }
}

/// Build a concrete spec for an evaluation scenario: draw the damaged-joint
/// count uniformly from `count_range` and the joint identities uniformly
/// without replacement.
pub fn sample_scenario_spec(
    rng: &mut RngStream,
    id: u8,
    params: &DamageParams,
    n_joints: usize,
    count_range: (usize, usize),
    onset_step: usize,
) -> Result<DamageSpec> {
    let template = scenario_config(id)?;
    let mut spec =
        DamageSpec { faults: BTreeMap::new(), onset_step, scenario: ScenarioTag::Scenario(id) };
    if template.has_any_fault() {
        for j in draw_joints(rng, n_joints, count_range)? {
            spec.faults.insert(j, template.build_fault(rng, params)?);
        }
    }
    spec.validate(n_joints)?;
    Ok(spec)
}

fn draw_joints(
    rng: &mut RngStream,
    n_joints: usize,
    (lo, hi): (usize, usize),
) -> Result<Vec<usize>> {
    if lo > hi || hi > n_joints.saturating_sub(1) {
        return Err(UmcError::invalid(
            "damage count range",
            format!("[{lo}, {hi}] with {n_joints} joints (all-joint damage is rejected)"),
        ));
    }
    let count = rng.int_range(lo, hi);
    Ok(rng.choose_distinct(n_joints, count))
}

/// Draw one Stage-II training spec. Subcategory is chosen proportionally to
/// `ratios`; (i) leaves the env undamaged, (ii) fails sensors only, (iii)
/// applies all three damage types plus sensor failure with detection, and
/// (iv) applies motor and velocity limits with functional sensors and no
/// masking.
pub fn sample_stage2(
    rng: &mut RngStream,
    ratios: [f64; 4],
    n_joints: usize,
    damage_range: (usize, usize),
    params: &DamageParams,
    onset_step: usize,
) -> Result<DamageSpec> {
    if ratios.iter().any(|w| *w < 0.0) || ratios.iter().all(|w| *w == 0.0) {
        return Err(UmcError::invalid("stage2 ratios", format!("{ratios:?}")));
    }
    let sub = Stage2Subcategory::ALL[rng.weighted_choice(&ratios)];
    let mut spec =
        DamageSpec { faults: BTreeMap::new(), onset_step, scenario: ScenarioTag::Stage2(sub) };
    if sub != Stage2Subcategory::Normal {
        for j in draw_joints(rng, n_joints, damage_range)? {
            let fault = match sub {
                Stage2Subcategory::Normal => unreachable!(),
                Stage2Subcategory::SensorOnly => {
                    JointFault { sensor_failed: true, ..JointFault::default() }
                }
                Stage2Subcategory::DetectableJoint => JointFault {
                    sensor_failed: true,
                    rom_window: Some(make_rom_window(
                        rng,
                        params.rom_full_range,
                        params.rom_fraction,
                    )?),
                    torque_limit: Some(params.torque_limit),
                    velocity_limit: Some(params.velocity_limit),
                    detectable: true,
                },
                Stage2Subcategory::UndetectableJoint => JointFault {
                    sensor_failed: false,
                    rom_window: None,
                    torque_limit: Some(params.torque_limit),
                    velocity_limit: Some(params.velocity_limit),
                    detectable: false,
                },
            };
            spec.faults.insert(j, fault);
        }
    }
    spec.validate(n_joints)?;
    Ok(spec)
}

/// A contiguous sub-interval of width `fraction * (hi - lo)` placed uniformly
/// at random inside `full_range`.
pub fn make_rom_window(
    rng: &mut RngStream,
    full_range: (f64, f64),
    fraction: f64,
) -> Result<(f64, f64)> {
    let (lo, hi) = full_range;
    if !(lo < hi) {
        return Err(UmcError::invalid("rom full range", format!("({lo}, {hi})")));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(UmcError::invalid("rom fraction", format!("{fraction}")));
    }
    let width = fraction * (hi - lo);
    let start = rng.uniform(lo, hi - width);
    Ok((start, start + width))
}

/// Apply the physical fault constraints to one joint's command and state.
///
/// When `active`: torque and joint speed are clamped to their limits and the
/// position is clamped into the ROM window, zeroing the speed on contact with
/// a window bound. Inactive faults are the identity.
pub fn constrain_joint(
    torque_cmd: f64,
    q: f64,
    qdot: f64,
    fault: Option<&JointFault>,
    active: bool,
) -> (f64, f64, f64) {
    let Some(fault) = fault else { return (torque_cmd, q, qdot) };
    if !active {
        return (torque_cmd, q, qdot);
    }
    let mut torque = torque_cmd;
    let mut q = q;
    let mut qdot = qdot;
    if let Some(t) = fault.torque_limit {
        torque = torque.clamp(-t, t);
    }
    if let Some(v) = fault.velocity_limit {
        qdot = qdot.clamp(-v, v);
    }
    if let Some((lo, hi)) = fault.rom_window {
        if q < lo {
            q = lo;
            qdot = 0.0;
        } else if q > hi {
            q = hi;
            qdot = 0.0;
        }
    }
    (torque, q, qdot)
}
