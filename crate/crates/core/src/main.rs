use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

// The training loop allocates and frees large matrices at high rate; the
// system allocator round-trips those through mmap on every cycle.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use umc::ckpt;
use umc::config::UmcConfig;
use umc::env::{log_header, SimEnv};
use umc::eval::{
    aggregate, format_table, full_sweep, run_ablation, run_scenario, write_report, AblateKnob,
    ReportFormat,
};
use umc::policy::{Actor, ActorInput};
use umc::ppo::{self, ModelVariant, Paradigm};
use umc::{Result, UmcError};

#[derive(Parser)]
#[command(name = "umc", version, about = "Masked-attention fault-tolerant locomotion laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy with the two-stage pipeline (or an ablation paradigm).
    Train {
        /// Configuration file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// stage | curriculum | one-stage (overrides the config).
        #[arg(long)]
        paradigm: Option<String>,
        /// transformer | mlp (overrides the config).
        #[arg(long)]
        model: Option<String>,
        /// Training seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Final checkpoint path; stage checkpoints and the training curve
        /// are written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one scenario or on all eight.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// 1..8 or "all".
        #[arg(long, default_value = "all")]
        scenario: String,
        /// Config-format file supplying eval.settings overrides.
        #[arg(long)]
        settings: Option<PathBuf>,
        /// Environments per cell (overrides the config).
        #[arg(long)]
        envs: Option<usize>,
        /// Report path (.csv or .json).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optional per-step trajectory log of one episode (TSV).
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Full 8-scenario x settings grid plus the averaged table.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory for sweep.csv, sweep.json and table.txt.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        envs: Option<usize>,
    },
    /// Run the gradient suites; exits nonzero on failure.
    Gradcheck,
    /// Re-train under each configuration of one ablation knob.
    Ablate {
        /// ratio | maskvalue | paradigm.
        #[arg(long)]
        knob: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<UmcConfig> {
    match path {
        Some(p) => UmcConfig::load(p),
        None => Ok(UmcConfig::default()),
    }
}

fn parse_paradigm(s: &str) -> Result<Paradigm> {
    match s {
        "stage" => Ok(Paradigm::StageBased),
        "curriculum" => Ok(Paradigm::CurriculumBased),
        "one-stage" => Ok(Paradigm::OneStage),
        other => Err(UmcError::Config(format!("unknown paradigm {other}"))),
    }
}

fn parse_model(s: &str) -> Result<ModelVariant> {
    match s {
        "transformer" => Ok(ModelVariant::Transformer),
        "mlp" => Ok(ModelVariant::Mlp),
        other => Err(UmcError::Config(format!("unknown model {other}"))),
    }
}

fn load_actor(path: &Path, cfg: &UmcConfig) -> Result<(Actor, String)> {
    let snapshot = ckpt::load(path)?;
    if snapshot.config_hash != cfg.hash() {
        eprintln!(
            "warning: checkpoint config hash {:#x} differs from current config {:#x}",
            snapshot.config_hash,
            cfg.hash()
        );
    }
    let label = format!("{}-{}", snapshot.variant, snapshot.stage);
    let (actor, _) = snapshot.restore()?;
    Ok((actor, label))
}

fn write_trace(actor: &Actor, scenario: u8, cfg: &UmcConfig, path: &Path) -> Result<()> {
    let eval_cfg = cfg.eval_config();
    let settings = cfg.settings();
    let setting = settings.first().ok_or_else(|| UmcError::Config("no eval settings".into()))?;
    let mut rng = umc::rng::RngStream::new(setting.seed, 0x7ACE);
    let spec = umc::damage::sample_scenario_spec(
        &mut rng,
        scenario,
        &eval_cfg.damage,
        eval_cfg.env.n_joints(),
        setting.damage_count_range,
        setting.malfunction_timing,
    )?;
    let mut text = String::new();
    text.push_str(&format!("# {}\n", spec.summary()));
    text.push_str(&log_header(eval_cfg.env.n_joints()));
    text.push('\n');
    let mut env = SimEnv::new(eval_cfg.env, spec, rng.next_u64(), eval_cfg.mask_value)?;
    while !env.is_done() {
        let obs = env.observe_corrupted();
        let flags = env.flags();
        let input = ActorInput::build(&[(&obs, &flags)], eval_cfg.mask_value, actor.mask_mode())?;
        let means = actor.forward_batch(&input)?;
        let r = env.step(means.row(0))?;
        text.push_str(&env.log_record(Some((means.row(0), r.reward))));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| UmcError::io(path.display().to_string(), e))?;
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { config, paradigm, model, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(p) = paradigm {
                cfg.paradigm = parse_paradigm(&p)?;
            }
            if let Some(m) = model {
                cfg.variant = parse_model(&m)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let dir = out.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            let artifacts = ppo::train(&cfg.train_config(), cfg.hash(), Some(&dir))?;
            let (_, final_ckpt) =
                artifacts.checkpoints.last().expect("training emits a final checkpoint");
            ckpt::save(&out, final_ckpt)?;
            println!(
                "trained {} ({} iterations) -> {}",
                artifacts.actor.variant(),
                artifacts.curve.len(),
                out.display()
            );
            if let Some(last) = artifacts.curve.last() {
                println!(
                    "final mean_reward {:.4} mean_episode_len {:.1}",
                    last.mean_reward, last.mean_episode_len
                );
            }
            Ok(())
        }
        Cmd::Eval { ckpt: ckpt_path, scenario, settings, envs, out, config, trace } => {
            let mut cfg = load_config(&config)?;
            if let Some(sf) = &settings {
                let override_cfg = UmcConfig::load(sf)?;
                cfg.eval_settings = override_cfg.eval_settings;
                cfg.eval_count_range = override_cfg.eval_count_range;
            }
            if let Some(n) = envs {
                cfg.eval_n_envs = n;
            }
            cfg.validate()?;
            let (actor, label) = load_actor(&ckpt_path, &cfg)?;
            let eval_cfg = cfg.eval_config();
            let rows = match scenario.as_str() {
                "all" => {
                    let sweep = full_sweep(&actor, &cfg.settings(), &eval_cfg, &label)?;
                    print!("{}", format_table(&sweep));
                    sweep.all_rows()
                }
                s => {
                    let id: u8 = s.parse().map_err(|_| {
                        UmcError::invalid("scenario", format!("{s} not in 1..8|all"))
                    })?;
                    let mut rows = Vec::new();
                    for setting in cfg.settings() {
                        let outcomes = run_scenario(&actor, id, &setting, &eval_cfg)?;
                        rows.push(aggregate(
                            &outcomes,
                            &eval_cfg.thresholds,
                            &label,
                            &id.to_string(),
                            &setting.id,
                            setting.seed,
                        )?);
                    }
                    rows
                }
            };
            if let Some(tpath) = trace {
                let first: u8 = match scenario.as_str() {
                    "all" => 1,
                    s => s.parse().unwrap_or(1),
                };
                write_trace(&actor, first, &cfg, &tpath)?;
            }
            write_report(&rows, &out, ReportFormat::from_path(&out))?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
        Cmd::Sweep { ckpt: ckpt_path, out, config, envs } => {
            let mut cfg = load_config(&config)?;
            if let Some(n) = envs {
                cfg.eval_n_envs = n;
            }
            cfg.validate()?;
            let (actor, label) = load_actor(&ckpt_path, &cfg)?;
            let sweep = full_sweep(&actor, &cfg.settings(), &cfg.eval_config(), &label)?;
            fs::create_dir_all(&out).map_err(|e| UmcError::io(out.display().to_string(), e))?;
            write_report(&sweep.all_rows(), &out.join("sweep.csv"), ReportFormat::Csv)?;
            write_report(&sweep.all_rows(), &out.join("sweep.json"), ReportFormat::Json)?;
            let table = format_table(&sweep);
            let tpath = out.join("table.txt");
            let mut f = fs::File::create(&tpath)
                .map_err(|e| UmcError::io(tpath.display().to_string(), e))?;
            f.write_all(table.as_bytes())
                .map_err(|e| UmcError::io(tpath.display().to_string(), e))?;
            print!("{table}");
            println!("wrote sweep to {}", out.display());
            Ok(())
        }
        Cmd::Gradcheck => {
            let mut failed = false;
            let mut check = |name: &str, result: Result<f64>, bound: f64| match result {
                Ok(err) if err < bound => {
                    println!("gradcheck {name}: max relative error {err:.3e} < {bound:.0e} ok");
                }
                Ok(err) => {
                    println!("gradcheck {name}: max relative error {err:.3e} >= {bound:.0e} FAIL");
                    failed = true;
                }
                Err(e) => {
                    println!("gradcheck {name}: error {e}");
                    failed = true;
                }
            };
            check("linear-least-squares", gradcheck_linear(), 1e-6);
            check("masked-attention", gradcheck_attention(), 1e-5);
            check("ppo-total-loss", ppo::update::ppo_loss_grad_check(1e-5), 1e-4);
            if failed {
                Err(UmcError::Invariant("gradient check failed".into()))
            } else {
                Ok(())
            }
        }
        Cmd::Ablate { knob, out, config, seed } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let knob: AblateKnob = knob.parse()?;
            let outcomes = run_ablation(
                knob,
                &cfg.train_config(),
                &cfg.eval_config(),
                &cfg.settings(),
                cfg.hash(),
                &out,
            )?;
            println!("ablation {knob}: {} configurations", outcomes.len());
            for o in &outcomes {
                println!(
                    "  {:<24} reach3 {:>5.1}%  failed {:>5.1}%",
                    o.label,
                    o.overall.reach[2] * 100.0,
                    o.overall.failed * 100.0
                );
            }
            Ok(())
        }
    }
}

/// 0.5 * ||Wx - y||^2 against finite differences.
fn gradcheck_linear() -> Result<f64> {
    use umc::nn::{grad_check, Matrix, ParamStore};
    let mut store = ParamStore::new();
    let mut rng = umc::rng::RngStream::new(51, 0);
    store.insert("w", Matrix::from_fn(4, 3, |_, _| rng.normal()));
    let x = Matrix::from_fn(1, 4, |_, _| rng.normal());
    let y = Matrix::from_fn(1, 3, |_, _| rng.normal());
    grad_check(&store, 1e-5, |p, want| {
        let w = p.value(p.id("w"));
        let pred = x.matmul(w);
        let mut loss = 0.0;
        let mut resid = Matrix::zeros(1, 3);
        for j in 0..3 {
            let r = pred.get(0, j) - y.get(0, j);
            loss += 0.5 * r * r;
            resid.set(0, j, r);
        }
        if want {
            let dw = x.matmul_at_b(&resid);
            p.grad_mut(p.id("w")).add_assign(&dw);
        }
        Ok(loss)
    })
}

/// Summed masked-attention output against finite differences.
fn gradcheck_attention() -> Result<f64> {
    use std::rc::Rc;
    use umc::nn::{grad_check, Graph, MaskMatrix, Matrix, ParamStore};
    let tokens = 4;
    let d = 4;
    let mut rng = umc::rng::RngStream::new(52, 0);
    let mut store = ParamStore::new();
    store.insert("e", Matrix::from_fn(tokens, d, |_, _| rng.normal()));
    let mut mask = MaskMatrix::zeros(tokens);
    mask.mask_column(2);
    let masks = Rc::new(vec![mask]);
    grad_check(&store, 1e-5, move |p, want| {
        let mut g = Graph::new();
        let e = g.param(p, "e");
        let attn = g.masked_attention(e, e, e, &masks, tokens, 2)?;
        let ones = g.constant(Matrix::from_fn(d, 1, |_, _| 1.0));
        let zero = g.constant(Matrix::zeros(1, 1));
        let col = g.linear(attn, ones, zero);
        let ones_row = g.constant(Matrix::from_fn(1, tokens, |_, _| 1.0));
        let total = g.linear(ones_row, col, zero);
        let v = g.value(total).item();
        if want {
            g.backward(total);
            g.accumulate_param_grads(p);
        }
        Ok(v)
    })
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
