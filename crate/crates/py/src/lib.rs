//! Python bindings: the environment, trained policies, training, sweeps,
//! and the gradient checker behind a small `umc_py` module.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use umc::config::UmcConfig;
use umc::damage::{sample_scenario_spec, DetectabilityFlags};
use umc::env::SimEnv;
use umc::eval::{full_sweep, ReportFormat};
use umc::nn::Matrix;
use umc::policy::{Actor, ActorInput, Observation};
use umc::rng::RngStream;

fn py_err(e: umc::UmcError) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn obs_to_rows(obs: &Observation) -> Vec<Vec<f64>> {
    (0..obs.n_joints()).map(|j| obs.joint(j).to_vec()).collect()
}

/// One deterministic planar locomotion environment under a damage scenario.
#[pyclass]
struct Env {
    inner: SimEnv,
}

#[pymethods]
impl Env {
    /// Build an env running `scenario` (1..8) with damage onset at `onset`.
    #[new]
    #[pyo3(signature = (seed=0, scenario=8, onset=100, episode_length=750, mask_value=0.0))]
    fn new(
        seed: u64,
        scenario: u8,
        onset: usize,
        episode_length: usize,
        mask_value: f64,
    ) -> PyResult<Self> {
        let cfg = UmcConfig::default();
        let mut env_cfg = cfg.env;
        env_cfg.episode_length = episode_length;
        let mut rng = RngStream::new(seed, 0x9E);
        let spec = sample_scenario_spec(
            &mut rng,
            scenario,
            &cfg.damage,
            env_cfg.n_joints(),
            cfg.eval_count_range,
            onset,
        )
        .map_err(py_err)?;
        let inner = SimEnv::new(env_cfg, spec, rng.next_u64(), mask_value).map_err(py_err)?;
        Ok(Env { inner })
    }

    #[getter]
    fn n_joints(&self) -> usize {
        self.inner.cfg().n_joints()
    }

    fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        obs_to_rows(&self.inner.reset(seed))
    }

    /// Apply torques; returns `(corrupted_obs, reward, done, fallen)`.
    fn step(&mut self, torques: Vec<f64>) -> PyResult<(Vec<Vec<f64>>, f64, bool, bool)> {
        let r = self.inner.step(&torques).map_err(py_err)?;
        Ok((obs_to_rows(&r.obs_corrupted), r.reward, r.done, r.fallen))
    }

    fn true_observation(&self) -> Vec<Vec<f64>> {
        obs_to_rows(&self.inner.observe_true())
    }

    /// `(masked_joints, joint_malfunction_detected)` as known right now.
    fn flags(&self) -> (Vec<usize>, bool) {
        let f = self.inner.flags();
        (f.masked_joints, f.joint_malfunction_detected)
    }

    fn displacement_since_onset(&self) -> Option<f64> {
        self.inner.displacement_since_onset().ok()
    }

    fn is_done(&self) -> bool {
        self.inner.is_done()
    }

    fn damage_summary(&self) -> String {
        self.inner.spec().summary()
    }
}

/// A trained actor loaded from a checkpoint.
#[pyclass]
struct Policy {
    actor: Actor,
    stage: String,
}

#[pymethods]
impl Policy {
    /// Load the actor stored in a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let snapshot = umc::ckpt::load(&path).map_err(py_err)?;
        let stage = snapshot.stage.clone();
        let (actor, _) = snapshot.restore().map_err(py_err)?;
        Ok(Policy { actor, stage })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.actor.variant()
    }

    #[getter]
    fn stage(&self) -> &str {
        &self.stage
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.actor.param_count()
    }

    /// Deterministic torque means for one observation.
    #[pyo3(signature = (obs, masked_joints=vec![], detected=false, mask_value=0.0))]
    fn act(
        &self,
        obs: Vec<Vec<f64>>,
        masked_joints: Vec<usize>,
        detected: bool,
        mask_value: f64,
    ) -> PyResult<Vec<f64>> {
        let n = obs.len();
        if obs.iter().any(|r| r.len() != 3) {
            return Err(PyValueError::new_err("each observation row needs 3 entries"));
        }
        let m = Matrix::from_fn(n, 3, |i, j| obs[i][j]);
        let observation = Observation::new(m).map_err(py_err)?;
        let flags =
            DetectabilityFlags { masked_joints, joint_malfunction_detected: detected };
        let input = ActorInput::build(&[(&observation, &flags)], mask_value, self.actor.mask_mode())
            .map_err(py_err)?;
        let means = self.actor.forward_batch(&input).map_err(py_err)?;
        Ok(means.row(0).to_vec())
    }
}

/// Train from configuration text; returns the final checkpoint path.
#[pyfunction]
#[pyo3(signature = (config_text, out_dir))]
fn train(config_text: &str, out_dir: PathBuf) -> PyResult<PathBuf> {
    let cfg = UmcConfig::parse(config_text).map_err(py_err)?;
    umc::ppo::train(&cfg.train_config(), cfg.hash(), Some(&out_dir)).map_err(py_err)?;
    Ok(out_dir.join("ckpt_final.umc"))
}

/// Run the 8 x settings sweep; returns rows of
/// `(scenario, setting, reach_1..reach_5, failed)` including the averages.
#[pyfunction]
#[pyo3(signature = (ckpt, config_text=None, n_envs=None, out_dir=None))]
fn sweep(
    ckpt: PathBuf,
    config_text: Option<&str>,
    n_envs: Option<usize>,
    out_dir: Option<PathBuf>,
) -> PyResult<Vec<(String, String, Vec<f64>, f64)>> {
    let mut cfg = match config_text {
        Some(t) => UmcConfig::parse(t).map_err(py_err)?,
        None => UmcConfig::default(),
    };
    if let Some(n) = n_envs {
        cfg.eval_n_envs = n;
    }
    let snapshot = umc::ckpt::load(&ckpt).map_err(py_err)?;
    let label = format!("{}-{}", snapshot.variant, snapshot.stage);
    let (actor, _) = snapshot.restore().map_err(py_err)?;
    let result =
        full_sweep(&actor, &cfg.settings(), &cfg.eval_config(), &label).map_err(py_err)?;
    if let Some(dir) = out_dir {
        umc::eval::write_report(
            &result.all_rows(),
            &dir.join("sweep.csv"),
            ReportFormat::Csv,
        )
        .map_err(py_err)?;
    }
    Ok(result
        .all_rows()
        .into_iter()
        .map(|r| (r.scenario, r.setting, r.reach.to_vec(), r.failed))
        .collect())
}

/// Finite-difference check of the full PPO loss; returns the worst relative
/// error (passing builds stay under 1e-4).
#[pyfunction]
fn gradcheck() -> PyResult<f64> {
    umc::ppo::update::ppo_loss_grad_check(1e-5).map_err(py_err)
}

/// Default configuration text with every documented key at its default.
#[pyfunction]
fn default_config() -> String {
    let c = UmcConfig::default();
    let mut out = String::new();
    out.push_str(&format!("train.stage1_iters = {}\n", c.stage1_iters));
    out.push_str(&format!("train.stage2_iters = {}\n", c.stage2_iters));
    out.push_str(&format!("train.seed = {}\n", c.seed));
    out.push_str(&format!("ppo.n_envs = {}\n", c.hyper.n_envs));
    out.push_str(&format!("ppo.horizon = {}\n", c.hyper.horizon));
    out.push_str(&format!("mask.value = {}\n", c.mask_value));
    out.push_str(&format!(
        "stage2.ratios = {},{},{},{}\n",
        c.stage2_ratios[0], c.stage2_ratios[1], c.stage2_ratios[2], c.stage2_ratios[3]
    ));
    out
}

#[pymodule]
fn umc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Env>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
