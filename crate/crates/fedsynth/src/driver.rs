//! Experiment drivers behind the CLI: each subcommand reads one JSON config,
//! writes deterministic artifacts under the output directory, and echoes the
//! fully resolved config into summary.json.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{load_config, RunConfig};
use crate::error::{Error, Result};
use crate::federation::{logs_to_csv, make_roster, run_training, run_transfer, timing_csv};
use crate::netmodel::{sweep, sweep_csv, SweepVariable};
use crate::renderer::{
    arch_flops_input, flops_estimate, generator_forward, init_generator, write_ppm, CameraPose,
};
use crate::rng::{normal_vec, rng_from};
use crate::tensor::Tensor;
use crate::verify::gradient_battery;

#[derive(Parser, Debug)]
#[command(name = "fedsynth", about = "Federated multi-view synthesizing simulator")]
pub struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Override the config's global seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the config's round count.
    #[arg(long, global = true)]
    pub rounds: Option<usize>,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the two-cohort federated GAN training loop.
    TrainFederated,
    /// Adapt a trained source model to a shifted domain.
    Transfer,
    /// Emit latency curves for the three delivery schemes.
    LatencySweep,
    /// Render one frame from a freshly initialized generator.
    Render,
    /// Finite-difference check of every op and loss gradient.
    GradCheck,
    /// Evaluate the closed-form cost model for the configured architecture.
    Flops,
}

fn resolved_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.transfer.seed = s;
    }
    if let Some(r) = cli.rounds {
        cfg.train.rounds = r;
        cfg.transfer.rounds = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// summary.json with sorted keys: metrics plus the resolved config, so every
/// run is self-describing.
fn write_summary(
    out: &Path,
    cfg: &RunConfig,
    metrics: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let mut root = BTreeMap::new();
    root.insert("config".to_string(), serde_json::to_value(cfg)?);
    root.insert(
        "metrics".to_string(),
        serde_json::to_value(&metrics)?,
    );
    // round-trip through Value: object keys serialize sorted
    let v = serde_json::to_value(&root)?;
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&v)?)?;
    Ok(())
}

fn jnum(v: f64) -> serde_json::Value {
    serde_json::json!(v)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolved_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    let out = cli.out.as_path();
    match cli.cmd {
        Command::TrainFederated => {
            let mut clients = make_roster(
                cfg.roster.horizontal,
                cfg.roster.vertical,
                &cfg.arch,
                cfg.seed,
                cfg.roster.shifted_domain,
            )?;
            let init = init_generator(&cfg.arch, cfg.seed);
            let (model, logs) = run_training(&mut clients, &init, &cfg.arch, &cfg.train, &cfg.upload)?;
            std::fs::write(out.join("rounds.csv"), logs_to_csv(&logs))?;
            std::fs::write(out.join("timing.csv"), timing_csv(&logs))?;
            std::fs::write(out.join("model.json"), model.to_json()?)?;
            let last = logs.last().ok_or_else(|| Error::invalid("train", "no rounds"))?;
            let metrics = BTreeMap::from([
                ("final_loss_d".to_string(), jnum(last.agg_loss_d)),
                ("final_loss_g".to_string(), jnum(last.agg_loss_g)),
                ("rounds".to_string(), serde_json::json!(logs.len())),
            ]);
            write_summary(out, &cfg, metrics)
        }
        Command::Transfer => {
            let source = init_generator(&cfg.arch, cfg.seed);
            let clients = make_roster(
                cfg.roster.horizontal + cfg.roster.vertical,
                0,
                &cfg.arch,
                cfg.seed,
                true,
            )?;
            let (model, logs) = run_transfer(&clients, &source, &cfg.arch, &cfg.transfer)?;
            std::fs::write(out.join("transfer_rounds.csv"), logs_to_csv(&logs))?;
            std::fs::write(out.join("timing.csv"), timing_csv(&logs))?;
            std::fs::write(out.join("model.json"), model.to_json()?)?;
            let last = logs.last().ok_or_else(|| Error::invalid("transfer", "no rounds"))?;
            let metrics = BTreeMap::from([
                ("final_internal_loss".to_string(), jnum(last.agg_loss_d)),
                ("final_transfer_loss".to_string(), jnum(last.agg_loss_g)),
                ("final_reconstruction".to_string(), jnum(last.agg_loss_aux)),
            ]);
            write_summary(out, &cfg, metrics)
        }
        Command::LatencySweep => {
            let users = sweep(
                SweepVariable::Users {
                    from: 4,
                    to: 24,
                    groups: 2,
                },
                &cfg.net,
                cfg.seed,
            )?;
            let groups = sweep(SweepVariable::Groups { users: 20 }, &cfg.net, cfg.seed)?;
            std::fs::write(out.join("latency_users.csv"), sweep_csv(&users))?;
            std::fs::write(out.join("latency_groups.csv"), sweep_csv(&groups))?;
            let metrics = BTreeMap::from([
                ("user_sweep_rows".to_string(), serde_json::json!(users.len())),
                ("group_sweep_rows".to_string(), serde_json::json!(groups.len())),
            ]);
            write_summary(out, &cfg, metrics)
        }
        Command::Render => {
            let params = init_generator(&cfg.arch, cfg.seed);
            let mut rng = rng_from(&[cfg.seed, 0x4e4d]);
            let z = Tensor::from_vec(vec![cfg.arch.z_dim], normal_vec(&mut rng, cfg.arch.z_dim))?;
            let pose = CameraPose::orbit(0.1, 0.3, cfg.arch.cam_radius)?;
            let frame = generator_forward(&z, &pose, &params, &cfg.arch)?;
            let res = cfg.arch.final_res();
            let mut buf = Vec::new();
            write_ppm(&mut buf, res, res, &frame.image.data())?;
            std::fs::write(out.join("render.ppm"), buf)?;
            let metrics = BTreeMap::from([
                ("resolution".to_string(), serde_json::json!(res)),
                (
                    "mean_pixel".to_string(),
                    jnum(frame.image.data().iter().sum::<f64>() / (res * res * 3) as f64),
                ),
            ]);
            write_summary(out, &cfg, metrics)
        }
        Command::GradCheck => {
            let report = gradient_battery(cfg.seed, 20, 1e-5, 1e-4)?;
            let v = serde_json::to_value(&report)?;
            std::fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&v)?)?;
            if !report.passed {
                return Err(Error::invalid(
                    "grad-check",
                    format!("max relative error {:.3e} exceeds 1e-4", report.max_rel_err),
                ));
            }
            let metrics = BTreeMap::from([
                ("max_rel_err".to_string(), jnum(report.max_rel_err)),
                ("cases".to_string(), serde_json::json!(report.cases.len())),
            ]);
            write_summary(out, &cfg, metrics)
        }
        Command::Flops => {
            let inp = arch_flops_input(&cfg.arch, 3);
            let (og, od) = flops_estimate(&inp);
            let metrics = BTreeMap::from([
                ("o_g".to_string(), jnum(og)),
                ("o_d".to_string(), jnum(od)),
                ("inputs".to_string(), serde_json::to_value(inp)?),
            ]);
            write_summary(out, &cfg, metrics)
        }
    }
}
