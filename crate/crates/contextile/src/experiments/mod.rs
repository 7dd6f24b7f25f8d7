//! Metrics and the two headline studies: adaptation convergence over
//! training steps, and layout-shape comparison on the control task.

pub mod plot;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, LoraConfig};
use crate::error::{Error, Result};
use crate::layout::{extract_panel, BinaryMask, Canvas, LayoutSpec, Role, Task};
use crate::sampler::{sample_traced, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tasks::{scenes, TaskDataset};
use crate::training::{resume, LossRow, NullObserver, TrainConfig, TrainState};

/// Mean squared error over masked scalars of `(H, W, C)` canvases.
pub fn masked_mse(generated: &Canvas, truth: &Canvas, mask: &BinaryMask) -> Result<f64> {
    if generated.dims() != truth.dims() {
        return Err(Error::ShapeMismatch(format!(
            "generated {:?} vs truth {:?}",
            generated.dims(),
            truth.dims()
        )));
    }
    let (h, w, c) = generated.dims();
    if mask.dims() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs canvas {:?}",
            mask.dims(),
            (h, w)
        )));
    }
    let covered = mask.coverage();
    if covered == 0 {
        return Err(Error::InvalidConfig("empty mask in masked_mse".into()));
    }
    let mut acc = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if mask.at(y, x) == 1.0 {
                for ch in 0..c {
                    let d = (generated.pixels[[y, x, ch]] - truth.pixels[[y, x, ch]]) as f64;
                    acc += d * d;
                }
            }
        }
    }
    Ok(acc / (covered * c) as f64)
}

/// Peak signal-to-noise ratio for the `[-1, 1]` range: peak-to-peak is 2,
/// so the numerator is 4.
pub fn masked_psnr(mse: f64) -> f64 {
    10.0 * (4.0 / mse.max(1e-12)).log10()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub checkpoint_step: u64,
    pub masked_mse: f64,
    pub masked_psnr: f64,
    pub context_integrity: bool,
    pub n_eval: usize,
    pub sampler: SamplerConfig,
}

impl EvalReport {
    pub fn new(
        task: Task,
        checkpoint_step: u64,
        mse: f64,
        context_integrity: bool,
        n_eval: usize,
        sampler: SamplerConfig,
    ) -> Self {
        EvalReport {
            task,
            checkpoint_step,
            masked_mse: mse,
            masked_psnr: masked_psnr(mse),
            context_integrity,
            n_eval,
            sampler,
        }
    }
}

/// Samples `n_eval` canvases and scores them against the ground truth.
/// Per-sample sampler seeds derive from `scfg.seed + index`; context
/// integrity is checked bit-exactly at every intermediate step.
pub fn evaluate(
    den: &Denoiser<f32>,
    ds: &TaskDataset,
    sched: &NoiseSchedule,
    scfg: &SamplerConfig,
    n_eval: usize,
    checkpoint_step: u64,
) -> Result<(EvalReport, Vec<Canvas>)> {
    let n = n_eval.min(ds.samples.len());
    if n == 0 {
        return Err(Error::InvalidConfig("no eval samples".into()));
    }
    let mut mse_sum = 0.0;
    let mut integrity = true;
    let mut outputs = Vec::with_capacity(n);
    for idx in 0..n {
        let (x0, mask) = ds.compose_sample(idx)?;
        let cond = ds.cond_ids(idx);
        let per_sample = SamplerConfig {
            seed: scfg.seed.wrapping_add(idx as u64),
            ..*scfg
        };
        let generated = sample_traced(
            den,
            &x0,
            &mask,
            &cond,
            sched,
            &per_sample,
            &mut |_, intermediate| {
                let (h, w, c) = x0.dims();
                for y in 0..h {
                    for x in 0..w {
                        if mask.at(y, x) == 0.0 {
                            for ch in 0..c {
                                if intermediate.pixels[[y, x, ch]].to_bits()
                                    != x0.pixels[[y, x, ch]].to_bits()
                                {
                                    integrity = false;
                                }
                            }
                        }
                    }
                }
                Ok(())
            },
        )?;
        mse_sum += masked_mse(&generated, &x0, &mask)?;
        outputs.push(generated);
    }
    let report = EvalReport::new(
        ds.task,
        checkpoint_step,
        mse_sum / n as f64,
        integrity,
        n,
        *scfg,
    );
    Ok((report, outputs))
}

/// One convergence-study row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyRow {
    pub step: u64,
    pub masked_mse: f64,
    pub masked_psnr: f64,
}

/// Adapts a base model with LoRA, pausing at each snapshot step to sample
/// a fixed eval set. The step-0 row is the untrained-adapter baseline.
#[allow(clippy::too_many_arguments)]
pub fn convergence_study(
    base: Denoiser<f32>,
    lcfg: &LoraConfig,
    train_ds: &TaskDataset,
    eval_ds: &TaskDataset,
    sched: &NoiseSchedule,
    tcfg: &TrainConfig,
    scfg: &SamplerConfig,
    snapshots: &[u64],
    n_eval: usize,
    mut on_snapshot: impl FnMut(u64, &Denoiser<f32>) -> Result<()>,
) -> Result<(Vec<StudyRow>, Vec<LossRow>)> {
    let mut den = base;
    if den.lora_config().is_none() {
        den.attach_lora(lcfg, tcfg.seed)?;
    }
    let mut rows = Vec::new();
    let mut losses = Vec::new();
    let mut snapshots = snapshots.to_vec();
    snapshots.sort_unstable();
    snapshots.dedup();

    let mut state = TrainState::new(den, tcfg);
    for &snap in &snapshots {
        if snap > state.step {
            let segment = TrainConfig {
                max_steps: snap,
                ..tcfg.clone()
            };
            let (next, mut segment_rows) =
                resume(state, train_ds, sched, &segment, &mut NullObserver)?;
            state = next;
            losses.append(&mut segment_rows);
        }
        let (report, _) = evaluate(&state.denoiser, eval_ds, sched, scfg, n_eval, state.step)?;
        if !report.context_integrity {
            return Err(Error::NonFinite(format!(
                "context integrity violated at step {}",
                state.step
            )));
        }
        on_snapshot(state.step, &state.denoiser)?;
        rows.push(StudyRow {
            step: state.step,
            masked_mse: report.masked_mse,
            masked_psnr: report.masked_psnr,
        });
    }
    Ok((rows, losses))
}

/// One arm of the layout study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutArm {
    pub layout: String,
    pub masked_mse: f64,
    pub masked_psnr: f64,
    pub positional_error: f64,
}

/// The layout shapes compared on the control task.
pub fn study_layouts(panel_h: usize, panel_w: usize) -> Vec<LayoutSpec> {
    use Role::{Context, Target};
    vec![
        LayoutSpec::new("control-1x2", 1, 2, panel_h, panel_w, vec![Context, Target]).unwrap(),
        LayoutSpec::new("control-2x1", 2, 1, panel_h, panel_w, vec![Context, Target]).unwrap(),
        LayoutSpec::new(
            "control-2x2",
            2,
            2,
            panel_h,
            panel_w,
            vec![Context, Context, Context, Target],
        )
        .unwrap(),
    ]
}

/// Mean centroid displacement, in pixels, between the shape detected in a
/// generated target panel and the outline in its condition panel. Detection
/// thresholds against the dark control background; a panel with no
/// detected shape pixels scores the panel diagonal.
pub fn positional_error(
    generated_target: &ndarray::Array3<f32>,
    condition_edges: &ndarray::Array3<f32>,
) -> f64 {
    let (h, w, c) = generated_target.dim();
    let diag = ((h * h + w * w) as f64).sqrt();

    let centroid_of = |predicate: &dyn Fn(usize, usize) -> bool| -> Option<(f64, f64)> {
        let mut sy = 0.0;
        let mut sx = 0.0;
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                if predicate(y, x) {
                    sy += y as f64;
                    sx += x as f64;
                    count += 1;
                }
            }
        }
        (count > 0).then(|| (sy / count as f64, sx / count as f64))
    };

    let edge_centroid = centroid_of(&|y, x| condition_edges[[y, x, 0]] > 0.0);
    let shape_centroid = centroid_of(&|y, x| {
        (0..c).any(|ch| {
            (generated_target[[y, x, ch]] - scenes::DARK_BG[ch]).abs() > 0.35
        })
    });
    match (edge_centroid, shape_centroid) {
        (Some((ey, ex)), Some((sy, sx))) => ((ey - sy).powi(2) + (ex - sx).powi(2)).sqrt(),
        _ => diag,
    }
}

/// Trains one adapter per layout under identical budgets and scores each
/// arm with masked MSE plus the positional-error metric.
#[allow(clippy::too_many_arguments)]
pub fn layout_study(
    base: &Denoiser<f32>,
    lcfg: &LoraConfig,
    train_ds: &TaskDataset,
    eval_ds: &TaskDataset,
    layouts: &[LayoutSpec],
    sched: &NoiseSchedule,
    tcfg: &TrainConfig,
    scfg: &SamplerConfig,
    n_eval: usize,
) -> Result<Vec<LayoutArm>> {
    if train_ds.task != Task::Control {
        return Err(Error::InvalidConfig(
            "layout study runs on the control task".into(),
        ));
    }
    let mut arms = Vec::with_capacity(layouts.len());
    for layout in layouts {
        let train_arm = train_ds.with_layout(layout.clone())?;
        let eval_arm = eval_ds.with_layout(layout.clone())?;
        let mut den = base.clone();
        den.attach_lora(lcfg, tcfg.seed)?;
        let (state, _) = resume(
            TrainState::new(den, tcfg),
            &train_arm,
            sched,
            tcfg,
            &mut NullObserver,
        )?;
        let (report, outputs) =
            evaluate(&state.denoiser, &eval_arm, sched, scfg, n_eval, state.step)?;
        if !report.context_integrity {
            return Err(Error::NonFinite(format!(
                "context integrity violated in arm {}",
                layout.name
            )));
        }
        let mut pos_sum = 0.0;
        for (idx, canvas) in outputs.iter().enumerate() {
            let target_idx = layout.target_indices().next().unwrap();
            let generated = extract_panel(canvas, target_idx)?;
            let condition = &eval_arm.samples[idx].context_panels[0];
            pos_sum += positional_error(&generated, condition);
        }
        arms.push(LayoutArm {
            layout: layout.name.clone(),
            masked_mse: report.masked_mse,
            masked_psnr: report.masked_psnr,
            positional_error: pos_sum / outputs.len() as f64,
        });
    }
    Ok(arms)
}

/// CSV for the loss curve: `step,loss,masked_mse_eval`.
pub fn loss_rows_to_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,loss,masked_mse_eval\n");
    for row in rows {
        let eval = row.eval.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", row.step, row.loss, eval));
    }
    out
}

/// CSV for convergence rows: `step,masked_mse,masked_psnr`.
pub fn study_rows_to_csv(rows: &[StudyRow]) -> String {
    let mut out = String::from("step,masked_mse,masked_psnr\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            row.step, row.masked_mse, row.masked_psnr
        ));
    }
    out
}

/// CSV for layout arms: `layout,masked_mse,masked_psnr,positional_error`.
pub fn layout_arms_to_csv(arms: &[LayoutArm]) -> String {
    let mut out = String::from("layout,masked_mse,masked_psnr,positional_error\n");
    for arm in arms {
        out.push_str(&format!(
            "{},{},{},{}\n",
            arm.layout, arm.masked_mse, arm.masked_psnr, arm.positional_error
        ));
    }
    out
}

/// Side-by-side grid of canvases as one PNG.
pub fn save_contact_sheet(canvases: &[Canvas], cols: usize, path: &std::path::Path) -> Result<()> {
    if canvases.is_empty() {
        return Err(Error::InvalidConfig("empty contact sheet".into()));
    }
    let (h, w, c) = canvases[0].dims();
    let cols = cols.max(1).min(canvases.len());
    let rows = canvases.len().div_ceil(cols);
    let gap = 2usize;
    let sheet_h = rows * h + (rows - 1) * gap;
    let sheet_w = cols * w + (cols - 1) * gap;
    let mut sheet = ndarray::Array3::from_elem((sheet_h, sheet_w, c), 1.0f32);
    for (i, canvas) in canvases.iter().enumerate() {
        let (r, cl) = (i / cols, i % cols);
        let top = r * (h + gap);
        let left = cl * (w + gap);
        sheet
            .slice_mut(ndarray::s![top..top + h, left..left + w, ..])
            .assign(&canvas.pixels);
    }
    crate::layout::save_png(path, &sheet.view())
}
