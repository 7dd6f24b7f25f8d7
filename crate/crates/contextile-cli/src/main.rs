//! Command-line harness: data generation, pretraining, per-task LoRA
//! adaptation, sampling, evaluation, and the two studies. One command is
//! one process; every run directory carries its exact config and the
//! content hashes of its input checkpoints.

mod config;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use contextile::denoiser::checkpoint::file_sha256;
use contextile::denoiser::{brute_force_scalar_count, init_denoiser, Denoiser};
use contextile::experiments::{
    convergence_study, evaluate, layout_arms_to_csv, layout_study, loss_rows_to_csv, plot,
    save_contact_sheet, study_layouts, study_rows_to_csv,
};
use contextile::layout::{extract_panel, load_png, save_png, Task};
use contextile::sampler::{sample, SamplerConfig, SamplerKind};
use contextile::tasks::generators::{gen_control_with_shape_count, InpaintSource};
use contextile::tasks::{
    encode_condition, generate, load_dataset, save_dataset, vocab, Split, TaskDataset, TaskSample,
};
use contextile::training::{resume, LossRow, TrainObserver, TrainState};

use config::{resolve_out_dir, RunConfig};

#[derive(Parser)]
#[command(name = "contextile", version, about = "Masked-diffusion panel canvases: train, adapt, sample")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run config; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (relative paths resolve under $CONTEXTILE_OUT).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct SamplerArgs {
    /// ddpm or ddim.
    #[arg(long)]
    sampler: Option<String>,
    /// Reverse steps (ddim ladder length; ddpm must equal the schedule).
    #[arg(long)]
    steps: Option<usize>,
    /// DDIM stochasticity in [0, 1]; 0 is deterministic.
    #[arg(long)]
    eta: Option<f64>,
}

impl SamplerArgs {
    fn apply(&self, scfg: &mut SamplerConfig) -> Result<()> {
        if let Some(kind) = &self.sampler {
            scfg.kind = match kind.as_str() {
                "ddpm" => SamplerKind::Ddpm,
                "ddim" => SamplerKind::Ddim,
                other => bail!("unknown sampler kind '{other}'"),
            };
        }
        if let Some(steps) = self.steps {
            scfg.steps = steps;
        }
        if let Some(eta) = self.eta {
            scfg.eta = eta;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task dataset on disk (PNG panels plus index.json).
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_parser = ["train", "eval"], default_value = "train")]
        split: String,
    },
    /// Full-parameter pretraining on generic canvas inpainting.
    Pretrain {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// LoRA-only adaptation of a pretrained base to one task.
    Adapt {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Compose context panels per the task preset and generate the target.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        /// Use a generated dataset directory as the context source.
        #[arg(long)]
        from_dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Comma-separated context panel PNGs, in context-slot order.
        #[arg(long, value_delimiter = ',')]
        panels: Vec<PathBuf>,
        /// Comma-separated condition tokens for --panels mode.
        #[arg(long, value_delimiter = ',')]
        tokens: Vec<String>,
        /// Degenerate diagnostic: empty mask, the input passes through.
        #[arg(long, default_value_t = false)]
        keep_target: bool,
    },
    /// Score a checkpoint on a task eval split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Adaptation-speed study: snapshots along training, PSNR per snapshot.
    StudyConvergence {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        task: Option<String>,
        /// Comma-separated snapshot steps.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 250, 500, 1000, 2000, 5000])]
        snapshots: Vec<u64>,
    },
    /// Layout-shape comparison on the control task (1x2, 2x1, 2x2).
    StudyLayout {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        base: PathBuf,
        /// Training budget per arm.
        #[arg(long, default_value_t = 300)]
        steps_per_arm: u64,
    },
}

/// Provenance record for a run directory.
#[derive(Serialize)]
struct RunRecord {
    format_version: u32,
    command: String,
    base_hash: Option<String>,
    adapter_hash: Option<String>,
}

fn write_run_record(dir: &Path, command: &str, base: Option<&Path>, adapter: Option<&Path>) -> Result<()> {
    let record = RunRecord {
        format_version: 1,
        command: command.to_string(),
        base_hash: base.map(file_sha256).transpose()?,
        adapter_hash: adapter.map(file_sha256).transpose()?,
    };
    std::fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&record)? + "\n",
    )?;
    Ok(())
}

fn load_config(common: &CommonArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    } else {
        cfg.train.seed = cfg.seed;
    }
    let out = resolve_out_dir(&common.out);
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn parse_task(cfg: &RunConfig, flag: &Option<String>) -> Result<Task> {
    let name = flag.as_deref().unwrap_or(&cfg.task);
    Ok(Task::parse(name)?)
}

/// Writes model + optimizer snapshots at every eval so interrupted runs
/// resume from the last checkpoint.
struct PersistObserver {
    dir: PathBuf,
    schedule: contextile::schedule::ScheduleParams,
    quiet_steps: u64,
}

impl TrainObserver for PersistObserver {
    fn on_step(&mut self, step: u64, loss: f64) {
        if self.quiet_steps > 0 && step % self.quiet_steps == 0 {
            println!("step {step}: loss {loss:.5}");
        }
    }

    fn on_eval(
        &mut self,
        step: u64,
        state: &TrainState,
        eval_mse: f64,
    ) -> contextile::Result<()> {
        println!("step {step}: eval masked mse {eval_mse:.5}");
        state
            .denoiser
            .save(&self.dir.join("base.ckpt"), step, Some(self.schedule))?;
        state.save_optimizer(&self.dir.join("trainer.state"))?;
        Ok(())
    }
}

fn append_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let body = loss_rows_to_csv(rows);
    if path.exists() {
        let mut existing = std::fs::read_to_string(path)?;
        existing.push_str(body.split_once('\n').map(|(_, rest)| rest).unwrap_or(""));
        std::fs::write(path, existing)?;
    } else {
        std::fs::write(path, body)?;
    }
    Ok(())
}

fn cmd_gen_data(common: CommonArgs, task: String, n: Option<usize>, split: String) -> Result<()> {
    let (cfg, out) = load_config(&common)?;
    let task = Task::parse(&task)?;
    let split = if split == "eval" { Split::Eval } else { Split::Train };
    let n = n.unwrap_or(cfg.data.n_train);
    let ds = generate(task, cfg.seed, n, cfg.data.panel, cfg.data.panel, split)?;
    save_dataset(&ds, &out)?;
    cfg.echo_json(&out)?;
    println!("wrote {} samples to {}", ds.samples.len(), out.display());
    Ok(())
}

fn cmd_pretrain(common: CommonArgs, steps: Option<u64>) -> Result<()> {
    let (mut cfg, out) = load_config(&common)?;
    if let Some(steps) = steps {
        cfg.train.max_steps = steps;
    }
    cfg.echo_json(&out)?;
    let sched = cfg.schedule.build()?;
    let canvas = cfg.data.panel * 2;
    let source = InpaintSource::new(canvas, canvas, cfg.data.n_train, cfg.seed)?;

    let base_path = out.join("base.ckpt");
    let state_path = out.join("trainer.state");
    let state = if base_path.exists() && state_path.exists() {
        let (den, _) = Denoiser::load(&base_path)?;
        let mut state = TrainState::new(den, &cfg.train);
        state.load_optimizer(&state_path)?;
        println!("resuming from step {}", state.step);
        state
    } else {
        let den = init_denoiser::<f32>(&cfg.denoiser.build(), cfg.seed)
            .context("initializing denoiser")?;
        println!(
            "initialized denoiser with {} parameters",
            den.parameter_count()
        );
        TrainState::new(den, &cfg.train)
    };

    let mut observer = PersistObserver {
        dir: out.clone(),
        schedule: cfg.schedule,
        quiet_steps: 100,
    };
    let (state, rows) = resume(state, &source, &sched, &cfg.train, &mut observer)?;
    state
        .denoiser
        .save(&base_path, state.step, Some(cfg.schedule))?;
    state.save_optimizer(&state_path)?;
    append_loss_csv(&out.join("loss.csv"), &rows)?;
    write_run_record(&out, "pretrain", None, None)?;
    println!(
        "base checkpoint at step {}: {}",
        state.step,
        file_sha256(&base_path)?
    );
    Ok(())
}

#[derive(Serialize)]
struct AdaptReport {
    trainable_fraction: f64,
    trainable_scalars: usize,
    total_scalars: usize,
    base_hash: String,
    steps: u64,
}

fn cmd_adapt(
    common: CommonArgs,
    base: PathBuf,
    task: Option<String>,
    steps: Option<u64>,
) -> Result<()> {
    let (mut cfg, out) = load_config(&common)?;
    if let Some(steps) = steps {
        cfg.train.max_steps = steps;
    }
    let task = parse_task(&cfg, &task)?;
    cfg.task = task.name().to_string();
    cfg.echo_json(&out)?;
    let sched = cfg.schedule.build()?;

    let base_hash = file_sha256(&base)?;
    let (mut den, _) = Denoiser::load(&base)?;
    den.attach_lora(&cfg.lora, cfg.seed)?;
    let fraction = den.trainable_fraction();
    let (total, trainable) = brute_force_scalar_count(&den);
    anyhow::ensure!(
        (fraction - trainable as f64 / total as f64).abs() < 1e-12,
        "trainable fraction disagrees with the independent tensor-size sum"
    );
    println!(
        "trainable fraction: {fraction:.4} ({trainable} of {total} scalars)"
    );

    let train_ds = generate(
        task,
        cfg.seed,
        cfg.data.n_train,
        cfg.data.panel,
        cfg.data.panel,
        Split::Train,
    )?;
    let (state, rows) = resume(
        TrainState::new(den, &cfg.train),
        &train_ds,
        &sched,
        &cfg.train,
        &mut SimpleProgress { every: 100 },
    )?;

    let adapter_path = out.join("adapter.ckpt");
    state
        .denoiser
        .save_adapter(&adapter_path, &base_hash, state.step)?;
    append_loss_csv(&out.join("loss.csv"), &rows)?;
    let report = AdaptReport {
        trainable_fraction: fraction,
        trainable_scalars: trainable,
        total_scalars: total,
        base_hash: base_hash.clone(),
        steps: state.step,
    };
    std::fs::write(
        out.join("adapt_report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    write_run_record(&out, "adapt", Some(&base), Some(&adapter_path))?;
    println!(
        "adapter at step {}: {}",
        state.step,
        file_sha256(&adapter_path)?
    );
    Ok(())
}

struct SimpleProgress {
    every: u64,
}

impl TrainObserver for SimpleProgress {
    fn on_step(&mut self, step: u64, loss: f64) {
        if self.every > 0 && step % self.every == 0 {
            println!("step {step}: loss {loss:.5}");
        }
    }
}

fn load_model(base: &Path, adapter: Option<&Path>) -> Result<Denoiser<f32>> {
    let (mut den, _) = Denoiser::load(base)?;
    if let Some(adapter) = adapter {
        let base_hash = file_sha256(base)?;
        den.load_adapter(adapter, &base_hash)
            .context("adapter/base hash check")?;
    }
    Ok(den)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    common: CommonArgs,
    sampler_args: SamplerArgs,
    base: PathBuf,
    adapter: Option<PathBuf>,
    task: Option<String>,
    from_dataset: Option<PathBuf>,
    index: usize,
    panels: Vec<PathBuf>,
    tokens: Vec<String>,
    keep_target: bool,
) -> Result<()> {
    let (mut cfg, out) = load_config(&common)?;
    sampler_args.apply(&mut cfg.sampler)?;
    cfg.sampler.seed = cfg.seed;
    let den = load_model(&base, adapter.as_deref())?;
    let sched = cfg.schedule.build()?;

    let (x0, mask, cond) = if let Some(dir) = &from_dataset {
        let ds = load_dataset(dir)?;
        anyhow::ensure!(index < ds.samples.len(), "index {index} beyond dataset");
        let (canvas, mask) = ds.compose_sample(index)?;
        let cond = ds.cond_ids(index);
        (canvas, mask, cond)
    } else {
        let task = parse_task(&cfg, &task)?;
        anyhow::ensure!(
            !panels.is_empty(),
            "supply --from-dataset or --panels with context images"
        );
        let loaded: Vec<_> = panels
            .iter()
            .map(|p| load_png(p))
            .collect::<contextile::Result<_>>()?;
        let (ph, pw) = (loaded[0].dim().0, loaded[0].dim().1);
        let layout = contextile::layout::preset_layout(task, ph, pw);
        let sample = TaskSample {
            context_panels: loaded,
            target: contextile::layout::blank_panel(ph, pw, 3),
            tokens: tokens.clone(),
            task,
            seed: cfg.seed,
        };
        let (canvas, mask) = contextile::tasks::compose_with_layout(&sample, &layout)?;
        let cond = encode_condition(&tokens, &vocab());
        (canvas, mask, cond)
    };

    let mask = if keep_target {
        let (h, w) = mask.dims();
        contextile::layout::BinaryMask::zeros(h, w)
    } else {
        mask
    };

    let result = sample(&den, &x0, &mask, &cond, &sched, &cfg.sampler)?;
    cfg.echo_json(&out)?;
    save_png(&out.join("canvas.png"), &result.pixels.view())?;
    let target_idx = result
        .layout
        .target_indices()
        .next()
        .context("layout has a target panel")?;
    let target = extract_panel(&result, target_idx)?;
    save_png(&out.join("target.png"), &target.view())?;
    write_run_record(&out, "sample", Some(&base), adapter.as_deref())?;
    println!("wrote {} and target panel", out.join("canvas.png").display());
    Ok(())
}

fn cmd_eval(
    common: CommonArgs,
    sampler_args: SamplerArgs,
    base: PathBuf,
    adapter: Option<PathBuf>,
    task: Option<String>,
    n: Option<usize>,
) -> Result<()> {
    let (mut cfg, out) = load_config(&common)?;
    sampler_args.apply(&mut cfg.sampler)?;
    cfg.sampler.seed = cfg.seed;
    let task = parse_task(&cfg, &task)?;
    let n_eval = n.unwrap_or(cfg.data.n_eval);
    let den = load_model(&base, adapter.as_deref())?;
    let sched = cfg.schedule.build()?;
    let eval_ds = generate(
        task,
        cfg.seed,
        n_eval,
        cfg.data.panel,
        cfg.data.panel,
        Split::Eval,
    )?;

    let (report, outputs) = evaluate(&den, &eval_ds, &sched, &cfg.sampler, n_eval, 0)?;
    cfg.echo_json(&out)?;
    std::fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    let csv = format!(
        "task,checkpoint_step,masked_mse,masked_psnr,context_integrity,n_eval\n{},{},{},{},{},{}\n",
        report.task,
        report.checkpoint_step,
        report.masked_mse,
        report.masked_psnr,
        report.context_integrity,
        report.n_eval
    );
    std::fs::write(out.join("report.csv"), csv)?;
    save_contact_sheet(&outputs, 4, &out.join("samples.png"))?;
    write_run_record(&out, "eval", Some(&base), adapter.as_deref())?;
    println!(
        "masked mse {:.5}, psnr {:.2} dB over {} samples",
        report.masked_mse, report.masked_psnr, report.n_eval
    );
    if !report.context_integrity {
        bail!("context integrity violated");
    }
    Ok(())
}

fn cmd_study_convergence(
    common: CommonArgs,
    sampler_args: SamplerArgs,
    base: PathBuf,
    task: Option<String>,
    snapshots: Vec<u64>,
) -> Result<()> {
    let (mut cfg, out) = load_config(&common)?;
    sampler_args.apply(&mut cfg.sampler)?;
    let task = parse_task(&cfg, &task)?;
    cfg.echo_json(&out)?;
    let sched = cfg.schedule.build()?;
    let base_hash = file_sha256(&base)?;
    let (den, _) = Denoiser::load(&base)?;

    let train_ds = generate(
        task,
        cfg.seed,
        cfg.data.n_train,
        cfg.data.panel,
        cfg.data.panel,
        Split::Train,
    )?;
    let eval_ds = generate(
        task,
        cfg.seed,
        cfg.data.n_eval,
        cfg.data.panel,
        cfg.data.panel,
        Split::Eval,
    )?;

    let mut tcfg = cfg.train.clone();
    tcfg.max_steps = *snapshots.iter().max().unwrap_or(&0);
    let snap_dir = out.clone();
    let (rows, losses) = convergence_study(
        den,
        &cfg.lora,
        &train_ds,
        &eval_ds,
        &sched,
        &tcfg,
        &cfg.sampler,
        &snapshots,
        cfg.data.n_eval,
        |step, den| {
            let path = snap_dir.join(format!("step_{step:06}.adapter.ckpt"));
            den.save_adapter(&path, &base_hash, step)?;
            println!("snapshot at step {step}");
            Ok(())
        },
    )?;

    std::fs::write(out.join("study.csv"), study_rows_to_csv(&rows))?;
    append_loss_csv(&out.join("loss.csv"), &losses)?;
    let psnr_pts: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.step as f64, r.masked_psnr))
        .collect();
    plot::line_plot(&[("masked_psnr", psnr_pts)], &out.join("psnr.png"))?;
    if !losses.is_empty() {
        let loss_pts: Vec<(f64, f64)> =
            losses.iter().map(|r| (r.step as f64, r.loss)).collect();
        plot::line_plot(&[("loss", loss_pts)], &out.join("loss.png"))?;
    }
    write_run_record(&out, "study-convergence", Some(&base), None)?;
    for row in &rows {
        println!(
            "step {}: mse {:.5}, psnr {:.2} dB",
            row.step, row.masked_mse, row.masked_psnr
        );
    }
    Ok(())
}

fn cmd_study_layout(
    common: CommonArgs,
    sampler_args: SamplerArgs,
    base: PathBuf,
    steps_per_arm: u64,
) -> Result<()> {
    let (mut cfg, out) = load_config(&common)?;
    sampler_args.apply(&mut cfg.sampler)?;
    cfg.echo_json(&out)?;
    let sched = cfg.schedule.build()?;
    let (den, _) = Denoiser::load(&base)?;

    // Single-shape control scenes keep the positional metric unambiguous.
    let p = cfg.data.panel;
    let preset = contextile::layout::preset_layout(Task::Control, p, p);
    let mk = |split: Split, n: usize| TaskDataset {
        task: Task::Control,
        layout: preset.clone(),
        samples: gen_control_with_shape_count(cfg.seed, n, p, p, split, false, Some(1)),
        vocab: vocab(),
        split,
    };
    let train_ds = mk(Split::Train, cfg.data.n_train);
    let eval_ds = mk(Split::Eval, cfg.data.n_eval);

    let mut tcfg = cfg.train.clone();
    tcfg.max_steps = steps_per_arm;
    let arms = layout_study(
        &den,
        &cfg.lora,
        &train_ds,
        &eval_ds,
        &study_layouts(p, p),
        &sched,
        &tcfg,
        &cfg.sampler,
        cfg.data.n_eval,
    )?;

    std::fs::write(out.join("layout_study.csv"), layout_arms_to_csv(&arms))?;
    let bars: Vec<(&str, f64)> = arms
        .iter()
        .map(|a| (a.layout.as_str(), a.positional_error))
        .collect();
    plot::bar_chart(&bars, &out.join("positional_error.png"))?;
    write_run_record(&out, "study-layout", Some(&base), None)?;
    for arm in &arms {
        println!(
            "{}: mse {:.5}, psnr {:.2} dB, positional error {:.2} px",
            arm.layout, arm.masked_mse, arm.masked_psnr, arm.positional_error
        );
    }
    let two_by_two = arms.iter().find(|a| a.layout.ends_with("2x2"));
    let one_by_two = arms.iter().find(|a| a.layout.ends_with("1x2"));
    if let (Some(sq), Some(wide)) = (two_by_two, one_by_two) {
        // Informational only; the direction is a qualitative expectation.
        println!(
            "2x2 vs 1x2 positional error: {:.2} vs {:.2} px ({})",
            sq.positional_error,
            wide.positional_error,
            if sq.positional_error <= wide.positional_error {
                "consistent with the 2x2 preference"
            } else {
                "direction not reproduced at this budget"
            }
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common, task, n, split } => cmd_gen_data(common, task, n, split),
        Command::Pretrain { common, steps } => cmd_pretrain(common, steps),
        Command::Adapt { common, base, task, steps } => cmd_adapt(common, base, task, steps),
        Command::Sample {
            common,
            sampler,
            base,
            adapter,
            task,
            from_dataset,
            index,
            panels,
            tokens,
            keep_target,
        } => cmd_sample(
            common, sampler, base, adapter, task, from_dataset, index, panels, tokens,
            keep_target,
        ),
        Command::Eval { common, sampler, base, adapter, task, n } => {
            cmd_eval(common, sampler, base, adapter, task, n)
        }
        Command::StudyConvergence { common, sampler, base, task, snapshots } => {
            cmd_study_convergence(common, sampler, base, task, snapshots)
        }
        Command::StudyLayout { common, sampler, base, steps_per_arm } => {
            cmd_study_layout(common, sampler, base, steps_per_arm)
        }
    }
}
