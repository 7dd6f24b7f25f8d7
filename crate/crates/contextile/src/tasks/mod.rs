//! Procedural desk-scale datasets mirroring the downstream tasks, each
//! paired with its preset layout and a closed token vocabulary.
//!
//! Every task is solvable: the ground-truth target is a deterministic
//! function of the context panels and the condition tokens, so masked MSE
//! against the truth is a meaningful training signal.

pub mod generators;
pub mod scenes;

use std::path::Path;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::denoiser::ConditionEmbedding;
use crate::error::{Error, Result};
use crate::layout::{
    blank_panel, compose, load_png, preset_layout, save_png, target_mask, BinaryMask, Canvas,
    LayoutSpec, Role, Task,
};
use crate::training::BatchSource;

/// Fixed token length for condition sequences; shorter lists pad with the
/// reserved id 0.
pub const MAX_TOKENS: usize = 8;

/// Closed vocabulary: pad/unknown, palette colors, shapes, attribute and
/// task markers.
pub fn vocab() -> Vec<String> {
    let mut v = vec!["<pad>".to_string()];
    v.extend(scenes::PALETTE.iter().map(|(name, _)| name.to_string()));
    v.extend(
        scenes::ShapeKind::ALL
            .iter()
            .map(|k| k.name().to_string()),
    );
    for extra in ["bg", "recolor", "stripes", "checker", "garment"] {
        v.push(extra.to_string());
    }
    v
}

/// Size of [`vocab`]; denoiser configs take this as `cond_vocab`.
pub fn vocab_size() -> usize {
    vocab().len()
}

/// Token list to fixed-length ids; unknown tokens map to the reserved 0.
pub fn encode_condition(tokens: &[String], vocab: &[String]) -> ConditionEmbedding {
    let mut ids = vec![0usize; MAX_TOKENS];
    for (slot, token) in ids.iter_mut().zip(tokens.iter()) {
        *slot = vocab.iter().position(|v| v == token).unwrap_or(0);
    }
    ConditionEmbedding::new(ids)
}

/// Inverse for known ids; pads decode to `None`.
pub fn decode_condition(ids: &[usize], vocab: &[String]) -> Vec<Option<String>> {
    ids.iter()
        .map(|id| {
            if *id == 0 || *id >= vocab.len() {
                None
            } else {
                Some(vocab[*id].clone())
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(&self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::Eval => 0x6576_616c,
        }
    }
}

/// Per-sample seed: a splitmix64 hash of the run seed, the split tag, and
/// the sample index, so parallel generation and split hygiene are both
/// structural.
pub fn sample_seed(run_seed: u64, split: Split, index: u64) -> u64 {
    let mut z = run_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split.tag())
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One task instance: ordered context panels, the ground-truth target, and
/// the condition tokens.
#[derive(Debug, Clone)]
pub struct TaskSample {
    pub context_panels: Vec<Array3<f32>>,
    pub target: Array3<f32>,
    pub tokens: Vec<String>,
    pub task: Task,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task: Task,
    pub layout: LayoutSpec,
    pub samples: Vec<TaskSample>,
    pub vocab: Vec<String>,
    pub split: Split,
}

impl TaskDataset {
    /// Composes sample `idx` into a clean canvas plus its target mask,
    /// using this dataset's layout.
    pub fn compose_sample(&self, idx: usize) -> Result<(Canvas, BinaryMask)> {
        let sample = self
            .samples
            .get(idx)
            .ok_or_else(|| Error::IndexOutOfRange(format!("sample {idx}")))?;
        compose_with_layout(sample, &self.layout)
    }

    pub fn cond_ids(&self, idx: usize) -> ConditionEmbedding {
        encode_condition(&self.samples[idx].tokens, &self.vocab)
    }

    /// Same samples arranged under a different layout; valid when the task
    /// replicates a single condition panel (context slots all identical).
    pub fn with_layout(&self, layout: LayoutSpec) -> Result<TaskDataset> {
        for sample in &self.samples {
            let distinct = sample
                .context_panels
                .windows(2)
                .any(|w| w[0] != w[1]);
            if distinct && layout.context_indices().count() != sample.context_panels.len() {
                return Err(Error::InvalidLayout(format!(
                    "task {} has {} distinct context panels; layout '{}' offers {} slots",
                    sample.task,
                    sample.context_panels.len(),
                    layout.name,
                    layout.context_indices().count()
                )));
            }
        }
        Ok(TaskDataset {
            layout,
            ..self.clone()
        })
    }
}

/// Places panels per the layout roles: context slots consume the sample's
/// context panels in order (a single panel replicates to fill), the target
/// slot takes the ground truth, blanks fill with the blank constant.
pub fn compose_with_layout(
    sample: &TaskSample,
    layout: &LayoutSpec,
) -> Result<(Canvas, BinaryMask)> {
    let (ph, pw) = (layout.panel_h, layout.panel_w);
    let channels = sample.target.dim().2;
    let ctx_slots = layout.context_indices().count();
    if sample.context_panels.len() != ctx_slots && sample.context_panels.len() != 1 {
        return Err(Error::InvalidLayout(format!(
            "{} context panels for {} context slots",
            sample.context_panels.len(),
            ctx_slots
        )));
    }
    let mut panels = Vec::with_capacity(layout.panel_count());
    let mut next_ctx = 0usize;
    for role in &layout.roles {
        match role {
            Role::Context => {
                let panel = if sample.context_panels.len() == 1 {
                    sample.context_panels[0].clone()
                } else {
                    sample.context_panels[next_ctx].clone()
                };
                next_ctx += 1;
                panels.push(panel);
            }
            Role::Target => panels.push(sample.target.clone()),
            Role::Blank => panels.push(blank_panel(ph, pw, channels)),
        }
    }
    let canvas = compose(&panels, layout)?;
    Ok((canvas, target_mask(layout)))
}

impl BatchSource for TaskDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample(&self, idx: usize) -> Result<(Canvas, BinaryMask, Vec<usize>)> {
        let (canvas, mask) = self.compose_sample(idx)?;
        Ok((canvas, mask, self.cond_ids(idx).ids))
    }
}

#[derive(Serialize, Deserialize)]
struct IndexSample {
    seed: u64,
    tokens: Vec<String>,
    context_files: Vec<String>,
    target_file: String,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    task: Task,
    layout: LayoutSpec,
    vocab: Vec<String>,
    split: Split,
    samples: Vec<IndexSample>,
}

/// Writes a dataset as PNG panels plus `index.json`.
pub fn save_dataset(ds: &TaskDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = IndexFile {
        task: ds.task,
        layout: ds.layout.clone(),
        vocab: ds.vocab.clone(),
        split: ds.split,
        samples: Vec::with_capacity(ds.samples.len()),
    };
    for (i, sample) in ds.samples.iter().enumerate() {
        let mut context_files = Vec::new();
        for (j, panel) in sample.context_panels.iter().enumerate() {
            let name = format!("sample_{i:05}_ctx{j}.png");
            save_png(&dir.join(&name), &panel.view())?;
            context_files.push(name);
        }
        let target_file = format!("sample_{i:05}_target.png");
        save_png(&dir.join(&target_file), &sample.target.view())?;
        index.samples.push(IndexSample {
            seed: sample.seed,
            tokens: sample.tokens.clone(),
            context_files,
            target_file,
        });
    }
    let json = serde_json::to_string_pretty(&index)?;
    std::fs::write(dir.join("index.json"), json + "\n")?;
    Ok(())
}

/// Reads a dataset directory; pixels round-trip through the 8-bit PNG
/// quantization.
pub fn load_dataset(dir: &Path) -> Result<TaskDataset> {
    let index: IndexFile =
        serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
    let mut samples = Vec::with_capacity(index.samples.len());
    for entry in &index.samples {
        let mut context_panels = Vec::new();
        for file in &entry.context_files {
            context_panels.push(load_png(&dir.join(file))?);
        }
        samples.push(TaskSample {
            context_panels,
            target: load_png(&dir.join(&entry.target_file))?,
            tokens: entry.tokens.clone(),
            task: index.task,
            seed: entry.seed,
        });
    }
    Ok(TaskDataset {
        task: index.task,
        layout: index.layout,
        samples,
        vocab: index.vocab,
        split: index.split,
    })
}

/// Builds the dataset for a task with its preset layout.
pub fn generate(
    task: Task,
    seed: u64,
    n: usize,
    panel_h: usize,
    panel_w: usize,
    split: Split,
) -> Result<TaskDataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be >= 1".into()));
    }
    let layout = preset_layout(task, panel_h, panel_w);
    let samples = match task {
        Task::Control => generators::gen_control(seed, n, panel_h, panel_w, split, false),
        Task::Edit => generators::gen_control(seed, n, panel_h, panel_w, split, true),
        Task::Colorize => generators::gen_colorize(seed, n, panel_h, panel_w, split),
        Task::Subject => generators::gen_subject(seed, n, panel_h, panel_w, split),
        Task::Tryon => generators::gen_tryon(seed, n, panel_h, panel_w, split),
        Task::Extraction => generators::gen_extraction(seed, n, panel_h, panel_w, split),
    };
    Ok(TaskDataset {
        task,
        layout,
        samples,
        vocab: vocab(),
        split,
    })
}
