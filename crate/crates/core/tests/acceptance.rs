//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines;
//! every tolerance is pinned here, not in configuration.

use std::time::Instant;

// The desk-scale trainings inside this suite hit the allocator hard.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use umc::config::UmcConfig;
use umc::damage::{
    sample_scenario_spec, scenario_config, DamageParams, DamageSpec, DetectabilityFlags,
};
use umc::env::{corrupt_sensors, EnvConfig, SimEnv};
use umc::eval::{full_sweep, parse_csv, run_ablation, write_report, AblateKnob, ReportFormat};
use umc::nn::{kernels, MaskMatrix, Matrix};
use umc::policy::{
    detect_and_mask, Actor, ActorParams, MaskMode, MlpActorParams, MlpConfig, ModelConfig,
    Observation,
};
use umc::ppo::{self, train, ModelVariant, Paradigm, TrainConfig};
use umc::rng::RngStream;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!("acceptance {id:>2} {name}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} {name}: {detail}");
}

/// Thread CPU seconds consumed so far (training is single-threaded, so this
/// is exactly the training's CPU budget).
fn thread_cpu_seconds() -> f64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    unsafe {
        libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts);
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 * 1e-9
}

// -------------------------------------------------------------------------
// 1. Mask isolation
// -------------------------------------------------------------------------

#[test]
fn criterion_01_mask_isolation() {
    let start = Instant::now();
    let cfg = ModelConfig::desk(6);
    let actor = ActorParams::init(cfg, 20601).unwrap();
    let mut rng = RngStream::new(1, 0);
    let obs = Observation::new(Matrix::from_fn(6, 3, |_, _| rng.normal())).unwrap();

    let mut worst: f64 = 0.0;
    for j in 0..6 {
        let flags =
            DetectabilityFlags { masked_joints: vec![j], joint_malfunction_detected: true };
        let (base, _) = actor.forward(&obs, &flags, 0.0).unwrap();
        for sign in [1.0, -1.0] {
            let mut perturbed = obs.clone();
            perturbed.set_joint(j, [sign * 1e3, -sign * 1e3, sign * 1e3]);
            let (out, _) = actor.forward(&perturbed, &flags, 0.0).unwrap();
            for (i, (a, b)) in out.iter().zip(&base).enumerate() {
                if i != j {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        1,
        "mask isolation",
        worst < 1e-9 && elapsed < 1.0,
        &format!("max other-joint drift {worst:.2e}, {elapsed:.2}s"),
    );
}

// -------------------------------------------------------------------------
// 2. Attention-mask correctness
// -------------------------------------------------------------------------

#[test]
fn criterion_02_attention_mask_correctness() {
    let mut rng = RngStream::new(2, 0);
    let mut worst_sum: f64 = 0.0;
    let mut worst_weight: f64 = 0.0;
    for round in 0..1000 {
        let tokens = 2 + round % 7;
        let heads = if round % 2 == 0 { 1 } else { 2 };
        let d = heads * (2 + round % 3);
        let q = Matrix::from_fn(tokens, d, |_, _| rng.normal() * 4.0);
        let k = Matrix::from_fn(tokens, d, |_, _| rng.normal() * 4.0);
        let v = Matrix::from_fn(tokens, d, |_, _| rng.normal());
        let mut mask = MaskMatrix::zeros(tokens);
        let n_masked = rng.below(tokens);
        let masked = rng.choose_distinct(tokens, n_masked);
        for &j in &masked {
            mask.mask_column(j);
        }
        let (_, cache) =
            kernels::masked_attention_forward(&q, &k, &v, std::slice::from_ref(&mask), tokens, heads)
                .unwrap();
        for h in 0..heads {
            for i in 0..tokens {
                let sum: f64 = (0..tokens).map(|j| cache.weight(0, h, i, j)).sum();
                worst_sum = worst_sum.max((sum - 1.0).abs());
                for &j in &masked {
                    worst_weight = worst_weight.max(cache.weight(0, h, i, j));
                }
            }
        }
    }
    verdict(
        2,
        "attention-mask correctness",
        worst_sum < 1e-12 && worst_weight < 1e-12,
        &format!("worst row-sum err {worst_sum:.2e}, worst masked weight {worst_weight:.2e}"),
    );
}

// -------------------------------------------------------------------------
// 3. Gradient fidelity
// -------------------------------------------------------------------------

#[test]
fn criterion_03_gradient_fidelity() {
    let err = ppo::update::ppo_loss_grad_check(1e-5).unwrap();
    verdict(3, "gradient fidelity", err < 1e-4, &format!("max relative error {err:.3e}"));
}

// -------------------------------------------------------------------------
// 4. GAE oracle equivalence
// -------------------------------------------------------------------------

/// Independent brute-force (gamma*lambda)^k delta double sum.
fn gae_oracle(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let t_max = rewards.len();
    let delta = |k: usize| {
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
fn criterion_04_gae_oracle_equivalence() {
    let mut rng = RngStream::new(4, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let horizon = 1 + rng.below(8);
        let rewards: Vec<f64> = (0..horizon).map(|_| rng.normal()).collect();
        let values: Vec<f64> = (0..horizon).map(|_| rng.normal()).collect();
        let dones: Vec<bool> = (0..horizon).map(|_| rng.next_f64() < 0.3).collect();
        let bootstrap = rng.normal();
        let gamma = 0.5 + 0.5 * rng.next_f64();
        let lambda = rng.next_f64();

        let total = horizon;
        let mut buf = ppo::RolloutBuffer {
            horizon,
            n_envs: 1,
            obs_corrupted: Vec::new(),
            obs_true: Vec::new(),
            flags: Vec::new(),
            actions: Matrix::zeros(total, 1),
            log_probs: vec![0.0; total],
            rewards: rewards.clone(),
            dones: dones.clone(),
            values: values.clone(),
            bootstrap_values: vec![bootstrap],
            advantages: vec![0.0; total],
            returns: vec![0.0; total],
        };
        ppo::compute_gae(&mut buf, gamma, lambda).unwrap();
        let oracle = gae_oracle(&rewards, &values, &dones, bootstrap, gamma, lambda);
        for t in 0..horizon {
            worst = worst.max((buf.advantages[t] - oracle[t]).abs());
        }
    }
    verdict(4, "GAE oracle equivalence", worst < 1e-12, &format!("worst abs diff {worst:.2e}"));
}

// -------------------------------------------------------------------------
// 5. Loss unit values
// -------------------------------------------------------------------------

#[test]
fn criterion_05_loss_unit_values() {
    // Surrogate: r = 1.5, eps = 0.2, A = 2 -> -2.4.
    let (l1, _) = kernels::surrogate_forward(
        &Matrix::scalar(1.5f64.ln()),
        &Matrix::scalar(0.0),
        &Matrix::scalar(2.0),
        0.2,
    )
    .unwrap();
    // Surrogate: r = 0.5, eps = 0.2, A = -1 -> 0.8.
    let (l2, _) = kernels::surrogate_forward(
        &Matrix::scalar(0.5f64.ln()),
        &Matrix::scalar(0.0),
        &Matrix::scalar(-1.0),
        0.2,
    )
    .unwrap();
    // Value: V_old = 1.0, V = 1.5, eps = 0.2, R = 2.0 -> 0.64.
    let (l3, _) = kernels::value_loss_forward(
        &Matrix::scalar(1.5),
        &Matrix::scalar(1.0),
        &Matrix::scalar(2.0),
        0.2,
    );
    let entropy = kernels::entropy_mean(&Matrix::zeros(1, 6));
    let e1 = (l1 + 2.4).abs();
    let e2 = (l2 - 0.8).abs();
    let e3 = (l3 - 0.64).abs();
    let e4 = (entropy - 1.4189385).abs();
    verdict(
        5,
        "loss unit values",
        e1 < 1e-12 && e2 < 1e-12 && e3 < 1e-12 && e4 < 1e-7,
        &format!("surrogate errs {e1:.1e}/{e2:.1e}, value err {e3:.1e}, entropy err {e4:.1e}"),
    );
}

// -------------------------------------------------------------------------
// 6. Damage-physics invariants
// -------------------------------------------------------------------------

#[test]
fn criterion_06_damage_physics_invariants() {
    let env_cfg = EnvConfig { episode_length: 500, ..EnvConfig::default() };
    let params = DamageParams::default();
    let onset = 50;
    let mut total_steps = 0usize;
    let mut violations = 0usize;

    let mut min_scenario_steps = usize::MAX;
    for scenario in 1..=8u8 {
        let mut rng = RngStream::new(600 + scenario as u64, 0);
        let mut ctrl = RngStream::new(700 + scenario as u64, 0);
        let mut scenario_steps = 0usize;
        let mut episode = 0u64;
        // Fresh specs and resets until the scenario has its 10^4 steps.
        while scenario_steps < 10_000 {
            episode += 1;
            let spec =
                sample_scenario_spec(&mut rng, scenario, &params, 6, (2, 3), onset).unwrap();
            let mut env = SimEnv::new(env_cfg, spec.clone(), 1000 + episode, 0.0).unwrap();
            // Twin undamaged env for the scenario-1 physics check.
            let mut twin = if scenario == 1 {
                Some(SimEnv::new(env_cfg, DamageSpec::none(onset), 1000 + episode, 0.0).unwrap())
            } else {
                None
            };
            while !env.is_done() && scenario_steps < 10_000 {
                let cmd: Vec<f64> = (0..6).map(|_| ctrl.uniform(-10.0, 10.0)).collect();
                let pre_q = env.state().q.clone();
                let pre_qd = env.state().qdot.clone();
                let active = env.state().damage_active;
                env.step(&cmd).unwrap();
                scenario_steps += 1;
                if active {
                    for (&j, fault) in &spec.faults {
                        // Torque cap via the constraint operator itself.
                        let (tau, _, _) = umc::damage::constrain_joint(
                            cmd[j].clamp(-10.0, 10.0),
                            pre_q[j],
                            pre_qd[j],
                            Some(fault),
                            true,
                        );
                        if let Some(tl) = fault.torque_limit {
                            if tau.abs() > tl + 1e-12 {
                                violations += 1;
                            }
                        }
                        if let Some(vl) = fault.velocity_limit {
                            if env.state().qdot[j].abs() > vl + 1e-12 {
                                violations += 1;
                            }
                        }
                        if let Some((lo, hi)) = fault.rom_window {
                            let q = env.state().q[j];
                            if q < lo - 1e-12 || q > hi + 1e-12 {
                                violations += 1;
                            }
                        }
                    }
                }
                if let Some(t) = twin.as_mut() {
                    t.step(&cmd).unwrap();
                    // Sensor-only failure never alters the physics.
                    if t.state().q != env.state().q || t.state().qdot != env.state().qdot {
                        violations += 1;
                    }
                }
            }
        }
        total_steps += scenario_steps;
        min_scenario_steps = min_scenario_steps.min(scenario_steps);
    }

    // Scenario 8: identity masking pipeline.
    let mut rng = RngStream::new(608, 0);
    let spec8 = sample_scenario_spec(&mut rng, 8, &params, 6, (2, 3), onset).unwrap();
    let obs = Observation::new(Matrix::from_fn(6, 3, |_, _| rng.normal())).unwrap();
    let corrupted = corrupt_sensors(&obs, &spec8, true, 0.0);
    let (v, m, f) = detect_and_mask(&corrupted, &spec8.detectability(), 0.0, MaskMode::Column).unwrap();
    let identity_ok = v == obs
        && (0..7).all(|i| (0..7).all(|j| !m.is_masked(i, j)))
        && f.row() == [-1.0, -1.0, -1.0];

    verdict(
        6,
        "damage-physics invariants",
        min_scenario_steps >= 10_000 && violations == 0 && identity_ok,
        &format!(
            "{total_steps} steps ({min_scenario_steps}+ per scenario), {violations} violations, scenario-8 identity {identity_ok}"
        ),
    );
}

// -------------------------------------------------------------------------
// 7. Whole-training determinism
// -------------------------------------------------------------------------

fn small_train_config(seed: u64) -> TrainConfig {
    let env = EnvConfig { episode_length: 100, ..EnvConfig::default() };
    TrainConfig {
        stage1_iters: 8,
        stage2_iters: 8,
        stage2_ratios: [1.0; 4],
        paradigm: Paradigm::StageBased,
        mask_value: 0.0,
        seed,
        variant: ModelVariant::Transformer,
        model: ModelConfig::desk(env.n_joints()),
        mlp_hidden: vec![32, 32],
        env,
        damage: DamageParams::default(),
        damage_range: (2, 4),
        hyper: ppo::PpoHyper { n_envs: 16, horizon: 32, ..ppo::PpoHyper::default() },
        strict_determinism: true,
    }
}

#[test]
fn criterion_07_whole_training_determinism() {
    let dir = std::env::temp_dir().join("umc_acceptance_det");
    let _ = std::fs::remove_dir_all(&dir);
    let run = |tag: &str| {
        let cfg = small_train_config(77);
        let out = dir.join(tag);
        let artifacts = train(&cfg, 0xD17, Some(&out)).unwrap();
        let eval_cfg = umc::eval::EvalConfig {
            env: EnvConfig { episode_length: 80, ..cfg.env },
            damage: cfg.damage,
            mask_value: 0.0,
            n_envs: 8,
            thresholds: [1.0, 2.0, 3.0, 4.0, 5.0],
        };
        let settings = vec![
            umc::eval::InferenceSetting {
                id: "s0".into(),
                seed: 1,
                malfunction_timing: 20,
                damage_count_range: (2, 3),
            },
            umc::eval::InferenceSetting {
                id: "s1".into(),
                seed: 50,
                malfunction_timing: 40,
                damage_count_range: (2, 3),
            },
        ];
        let sweep = full_sweep(&artifacts.actor, &settings, &eval_cfg, "det").unwrap();
        write_report(&sweep.all_rows(), &out.join("sweep.csv"), ReportFormat::Csv).unwrap();
        write_report(&sweep.all_rows(), &out.join("sweep.json"), ReportFormat::Json).unwrap();
        out
    };
    let a = run("a");
    let b = run("b");
    let mut same = true;
    for name in ["ckpt_stage1.umc", "ckpt_final.umc", "sweep.csv", "sweep.json", "training_curve.csv"] {
        let x = std::fs::read(a.join(name)).unwrap();
        let y = std::fs::read(b.join(name)).unwrap();
        if x != y {
            same = false;
            println!("  mismatch in {name}");
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    verdict(7, "whole-training determinism", same, "checkpoints, curves and sweep reports bitwise identical");
}

// -------------------------------------------------------------------------
// 8 + 9. Directional reproduction and normal-condition retention
// -------------------------------------------------------------------------

fn desk_seed_run(seed: u64) -> (f64, f64, f64, f64, f64, f64, f64, f64) {
    let cfg = UmcConfig::default();
    assert_eq!(cfg.stage1_iters, 300);
    assert_eq!(cfg.stage2_iters, 300);
    assert_eq!(cfg.hyper.n_envs, 256);

    let mut nm_train = cfg.train_config();
    nm_train.seed = seed;
    nm_train.stage2_iters = 0;
    let mut umc_train = cfg.train_config();
    umc_train.seed = seed;

    let budget = 30.0 * 60.0;
    let t0 = thread_cpu_seconds();
    let nm = train(&nm_train, 0, None).unwrap();
    let nm_cpu = thread_cpu_seconds() - t0;
    let t0 = thread_cpu_seconds();
    let umc_art = train(&umc_train, 0, None).unwrap();
    let umc_cpu = thread_cpu_seconds() - t0;
    assert!(nm_cpu < budget, "baseline training took {nm_cpu:.0}s CPU");
    assert!(umc_cpu < budget, "two-stage training took {umc_cpu:.0}s CPU");

    let eval_cfg = cfg.eval_config();
    let settings = cfg.settings();
    let nm_sweep = full_sweep(&nm.actor, &settings, &eval_cfg, "nm").unwrap();
    let umc_sweep = full_sweep(&umc_art.actor, &settings, &eval_cfg, "umc").unwrap();

    (
        nm_sweep.overall().failed,
        umc_sweep.overall().failed,
        nm_sweep.overall().reach[2],
        umc_sweep.overall().reach[2],
        nm_sweep.scenario_avg(8).reach[2],
        umc_sweep.scenario_avg(8).reach[2],
        nm_cpu,
        umc_cpu,
    )
}

fn directional_for_seed(id_offset: u32, seed: u64) {
    let (nm_failed, umc_failed, nm_reach3, umc_reach3, nm_s8, umc_s8, nm_cpu, umc_cpu) =
        desk_seed_run(seed);
    verdict(
        8,
        &format!("directional reproduction (seed {seed})"),
        umc_failed <= nm_failed && umc_reach3 >= nm_reach3,
        &format!(
            "failed {:.3} vs {:.3} (umc<=nm), reach3 {:.3} vs {:.3} (umc>=nm), cpu {:.0}s/{:.0}s",
            umc_failed, nm_failed, umc_reach3, nm_reach3, nm_cpu, umc_cpu
        ),
    );
    verdict(
        9,
        &format!("normal-condition retention (seed {seed})"),
        umc_s8 >= 0.9 * nm_s8,
        &format!("scenario-8 reach3 {umc_s8:.3} vs 0.9 x {nm_s8:.3}"),
    );
    let _ = id_offset;
}

#[test]
fn criterion_08_09_seed_11() {
    directional_for_seed(0, 11);
}

#[test]
fn criterion_08_09_seed_12() {
    directional_for_seed(1, 12);
}

#[test]
fn criterion_08_09_seed_13() {
    directional_for_seed(2, 13);
}

// -------------------------------------------------------------------------
// 10. Ablation harness fidelity
// -------------------------------------------------------------------------

#[test]
fn criterion_10_ablation_harness() {
    let dir = std::env::temp_dir().join("umc_acceptance_ablate");
    let _ = std::fs::remove_dir_all(&dir);
    let env = EnvConfig { episode_length: 60, ..EnvConfig::default() };
    let base = TrainConfig {
        stage1_iters: 1,
        stage2_iters: 2,
        stage2_ratios: [1.0; 4],
        paradigm: Paradigm::StageBased,
        mask_value: 0.0,
        seed: 5,
        variant: ModelVariant::Transformer,
        model: ModelConfig::desk(env.n_joints()),
        mlp_hidden: vec![16],
        env,
        damage: DamageParams::default(),
        damage_range: (2, 3),
        hyper: ppo::PpoHyper { n_envs: 8, horizon: 16, ..ppo::PpoHyper::default() },
        strict_determinism: true,
    };
    let eval_cfg = umc::eval::EvalConfig {
        env: EnvConfig { episode_length: 60, ..env },
        damage: base.damage,
        mask_value: 0.0,
        n_envs: 4,
        thresholds: [1.0, 2.0, 3.0, 4.0, 5.0],
    };
    let settings = vec![
        umc::eval::InferenceSetting {
            id: "s0".into(),
            seed: 1,
            malfunction_timing: 20,
            damage_count_range: (2, 3),
        },
        umc::eval::InferenceSetting {
            id: "s1".into(),
            seed: 50,
            malfunction_timing: 30,
            damage_count_range: (2, 3),
        },
    ];

    let mut ok = true;
    let mut detail = String::new();
    for (knob, expected) in
        [(AblateKnob::Ratio, 7usize), (AblateKnob::MaskValue, 3), (AblateKnob::Paradigm, 2)]
    {
        let out = dir.join(knob.to_string());
        let outcomes = run_ablation(knob, &base, &eval_cfg, &settings, 0, &out).unwrap();
        let summary = parse_csv(&std::fs::read_to_string(out.join("summary.csv")).unwrap()).unwrap();
        ok &= outcomes.len() == expected && summary.len() == expected;
        // Every configuration emits a complete averaged table: 8 scenario
        // rows plus the overall row.
        for o in &outcomes {
            let table = std::fs::read_to_string(out.join(&o.label).join("table.txt")).unwrap();
            ok &= table.lines().count() == 10;
            let rows =
                parse_csv(&std::fs::read_to_string(out.join(&o.label).join("sweep.csv")).unwrap())
                    .unwrap();
            ok &= rows.len() == 8 * settings.len() + 9;
        }
        detail.push_str(&format!("{knob}:{} ", outcomes.len()));
    }
    let _ = std::fs::remove_dir_all(&dir);
    verdict(10, "ablation harness fidelity", ok, detail.trim());
}

// -------------------------------------------------------------------------
// 11. Parameter-count check
// -------------------------------------------------------------------------

#[test]
fn criterion_11_parameter_counts() {
    let trf = ActorParams::init(ModelConfig::full(12), 0).unwrap();
    let trf_count = trf.param_count() as f64;
    let trf_rel = (trf_count - 366_164.0).abs() / 366_164.0;

    let mlp = MlpActorParams::init(MlpConfig::new(12), 0).unwrap();
    let mlp_count = mlp.param_count() as f64;
    let mlp_rel = (mlp_count - 345_100.0).abs() / 345_100.0;

    verdict(
        11,
        "parameter-count check",
        trf_rel < 0.10 && mlp_rel < 0.10,
        &format!(
            "transformer {trf_count} vs 366164 ({:.1}%), mlp {mlp_count} vs 345100 ({:.1}%)",
            trf_rel * 100.0,
            mlp_rel * 100.0
        ),
    );
}

// -------------------------------------------------------------------------
// Supporting checks exercised by the secondary-facing surfaces
// -------------------------------------------------------------------------

/// The eight-scenario table itself (backs criterion 6's sweep).
#[test]
fn scenario_table_shape() {
    for id in 1..=8 {
        let t = scenario_config(id).unwrap();
        assert_eq!(t.id, id);
    }
    assert!(scenario_config(0).is_err());
    let actor = Actor::Transformer(ActorParams::init(ModelConfig::desk(6), 1).unwrap());
    assert_eq!(actor.variant(), "transformer");
}
