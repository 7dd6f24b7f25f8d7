//! Per-task sample generators. Each sample derives from
//! `sample_seed(run seed, split, index)` alone, so generation is pure,
//! order-independent, and split-hygienic.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layout::{BinaryMask, Canvas, LayoutSpec, Rect, Role, Task};
use crate::training::BatchSource;

use super::scenes::{
    draw_figure, edge_map, flat_garment_rect, glyph_sprite, grayscale, paste, render_scene, solid,
    texture, ShapeKind, ShapeSpec, TexKind, TorsoFill, DARK_BG, PALETTE,
};
use super::{encode_condition, sample_seed, vocab, Split, TaskSample};

/// Background palette indices whose names appear only in train-split
/// subject prompts; the complement is reserved for eval.
const SUBJECT_TRAIN_BG: [usize; 6] = [0, 1, 2, 3, 4, 5];
const SUBJECT_EVAL_BG: [usize; 5] = [6, 7, 8, 9, 10];

fn shape_field<R: Rng>(rng: &mut R, count: usize, distinct_kinds: bool) -> Vec<ShapeSpec> {
    let mut color_indices: Vec<usize> = (0..PALETTE.len()).collect();
    color_indices.shuffle(rng);
    let mut kinds: Vec<ShapeKind> = ShapeKind::ALL.to_vec();
    kinds.shuffle(rng);
    let mut shapes: Vec<ShapeSpec> = (0..count)
        .map(|i| ShapeSpec {
            kind: if distinct_kinds {
                kinds[i % kinds.len()]
            } else {
                ShapeKind::ALL[rng.gen_range(0..3)]
            },
            color: PALETTE[color_indices[i]].1,
            cx: rng.gen_range(0.22..0.78),
            cy: rng.gen_range(0.22..0.78),
            size: rng.gen_range(0.12..0.26),
        })
        .collect();
    // Canonical order ties the k-th token to the k-th shape top-to-bottom.
    shapes.sort_by(|a, b| {
        let (ay, ax) = a.centroid();
        let (by, bx) = b.centroid();
        (ay, ax).partial_cmp(&(by, bx)).unwrap()
    });
    shapes
}

fn color_name(rgb: [f32; 3]) -> &'static str {
    PALETTE
        .iter()
        .find(|(_, c)| *c == rgb)
        .map(|(n, _)| *n)
        .expect("color drawn from the palette")
}

/// Edge-conditioned scenes (`edit = false`) or recolor-edit pairs
/// (`edit = true`). Both share the replicated-condition 2x2 layout.
pub fn gen_control(
    seed: u64,
    n: usize,
    panel_h: usize,
    panel_w: usize,
    split: Split,
    edit: bool,
) -> Vec<TaskSample> {
    gen_control_with_shape_count(seed, n, panel_h, panel_w, split, edit, None)
}

/// Control generator with a pinned shape count (the layout study uses a
/// single shape so the positional metric is unambiguous).
pub fn gen_control_with_shape_count(
    seed: u64,
    n: usize,
    panel_h: usize,
    panel_w: usize,
    split: Split,
    edit: bool,
    shape_count: Option<usize>,
) -> Vec<TaskSample> {
    (0..n)
        .map(|i| {
            let s = sample_seed(seed, split, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let count = shape_count.unwrap_or_else(|| rng.gen_range(1..=3));
            let shapes = shape_field(&mut rng, count, edit);
            if edit {
                let victim = rng.gen_range(0..shapes.len());
                let old = shapes[victim].color;
                let new = loop {
                    let c = PALETTE[rng.gen_range(0..PALETTE.len())].1;
                    if c != old && shapes.iter().all(|s| s.color != c) {
                        break c;
                    }
                };
                let source = render_scene(DARK_BG, &shapes, panel_h, panel_w);
                let mut edited = shapes.clone();
                edited[victim].color = new;
                let target = render_scene(DARK_BG, &edited, panel_h, panel_w);
                let tokens = vec![
                    "recolor".to_string(),
                    shapes[victim].kind.name().to_string(),
                    color_name(new).to_string(),
                ];
                TaskSample {
                    context_panels: vec![source],
                    target,
                    tokens,
                    task: Task::Edit,
                    seed: s,
                }
            } else {
                let target = render_scene(DARK_BG, &shapes, panel_h, panel_w);
                let condition = edge_map(&target);
                let tokens = shapes
                    .iter()
                    .map(|s| color_name(s.color).to_string())
                    .collect();
                TaskSample {
                    context_panels: vec![condition],
                    target,
                    tokens,
                    task: Task::Control,
                    seed: s,
                }
            }
        })
        .collect()
}

/// Grayscale condition, colored target; the token names the dominant
/// (background) color, and the luma-unique palette makes the rest
/// recoverable.
pub fn gen_colorize(
    seed: u64,
    n: usize,
    panel_h: usize,
    panel_w: usize,
    split: Split,
) -> Vec<TaskSample> {
    (0..n)
        .map(|i| {
            let s = sample_seed(seed, split, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let bg_idx = rng.gen_range(0..PALETTE.len());
            let count = rng.gen_range(1..=2);
            let mut shapes = shape_field(&mut rng, count, false);
            shapes.retain(|s| s.color != PALETTE[bg_idx].1);
            let target = render_scene(PALETTE[bg_idx].1, &shapes, panel_h, panel_w);
            let condition = grayscale(&target);
            TaskSample {
                context_panels: vec![condition],
                target,
                tokens: vec![PALETTE[bg_idx].0.to_string()],
                task: Task::Colorize,
                seed: s,
            }
        })
        .collect()
}

/// Three reference panels show one glyph at random placements; the target
/// centers the same glyph on a token-named background.
pub fn gen_subject(
    seed: u64,
    n: usize,
    panel_h: usize,
    panel_w: usize,
    split: Split,
) -> Vec<TaskSample> {
    let bg_pool: &[usize] = match split {
        Split::Train => &SUBJECT_TRAIN_BG,
        Split::Eval => &SUBJECT_EVAL_BG,
    };
    (0..n)
        .map(|i| {
            let s = sample_seed(seed, split, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let (gh, gw) = ((panel_h / 3).max(4), (panel_w / 3).max(4));
            let glyph = glyph_sprite(&mut rng, gh, gw);
            let refs: Vec<Array3<f32>> = (0..3)
                .map(|_| {
                    let bg = PALETTE[rng.gen_range(0..PALETTE.len())].1;
                    let mut panel = solid(panel_h, panel_w, bg);
                    let top = rng.gen_range(0..=panel_h - gh);
                    let left = rng.gen_range(0..=panel_w - gw);
                    paste(&mut panel, &glyph, top, left);
                    panel
                })
                .collect();
            let scene_idx = bg_pool[rng.gen_range(0..bg_pool.len())];
            let mut target = solid(panel_h, panel_w, PALETTE[scene_idx].1);
            paste(&mut target, &glyph, (panel_h - gh) / 2, (panel_w - gw) / 2);
            TaskSample {
                context_panels: refs,
                target,
                tokens: vec!["bg".to_string(), PALETTE[scene_idx].0.to_string()],
                task: Task::Subject,
                seed: s,
            }
        })
        .collect()
}

fn garment_block<R: Rng>(rng: &mut R, rect: Rect) -> (Array3<f32>, TexKind, usize, usize) {
    let c1 = rng.gen_range(0..PALETTE.len());
    let c2 = (c1 + rng.gen_range(1..PALETTE.len())) % PALETTE.len();
    let kind = if rng.gen_bool(0.5) {
        TexKind::Stripes
    } else {
        TexKind::Checker
    };
    let period = rng.gen_range(2..4);
    (
        texture(kind, PALETTE[c1].1, PALETTE[c2].1, rect.height, rect.width, period),
        kind,
        c1,
        c2,
    )
}

fn figure_colors<R: Rng>(rng: &mut R) -> ([f32; 3], [f32; 3]) {
    let bg = PALETTE[rng.gen_range(0..PALETTE.len())].1;
    let limb = if bg == PALETTE[6].1 {
        PALETTE[10].1
    } else {
        PALETTE[6].1
    };
    (bg, limb)
}

/// Garment left, target center, masked person right.
pub fn gen_tryon(
    seed: u64,
    n: usize,
    panel_h: usize,
    panel_w: usize,
    split: Split,
) -> Vec<TaskSample> {
    (0..n)
        .map(|i| {
            let s = sample_seed(seed, split, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let rect = flat_garment_rect(panel_h, panel_w);
            let (block, kind, c1, c2) = garment_block(&mut rng, rect);
            let (bg, limb) = figure_colors(&mut rng);
            let shift = rng.gen_range(-0.08..0.08);

            let mut garment_panel = solid(panel_h, panel_w, DARK_BG);
            paste(&mut garment_panel, &block, rect.top, rect.left);
            let (masked_person, _) =
                draw_figure(panel_h, panel_w, bg, limb, shift, TorsoFill::Blank);
            let (target, _) = draw_figure(
                panel_h,
                panel_w,
                bg,
                limb,
                shift,
                TorsoFill::Texture(&block),
            );
            TaskSample {
                context_panels: vec![garment_panel, masked_person],
                target,
                tokens: vec![
                    kind.name().to_string(),
                    PALETTE[c1].0.to_string(),
                    PALETTE[c2].0.to_string(),
                ],
                task: Task::Tryon,
                seed: s,
            }
        })
        .collect()
}

/// Inverse of try-on: dressed figure as context, flat garment as target.
pub fn gen_extraction(
    seed: u64,
    n: usize,
    panel_h: usize,
    panel_w: usize,
    split: Split,
) -> Vec<TaskSample> {
    (0..n)
        .map(|i| {
            let s = sample_seed(seed, split, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let rect = flat_garment_rect(panel_h, panel_w);
            let (block, kind, c1, c2) = garment_block(&mut rng, rect);
            let (bg, limb) = figure_colors(&mut rng);
            let shift = rng.gen_range(-0.08..0.08);

            let (dressed, _) = draw_figure(
                panel_h,
                panel_w,
                bg,
                limb,
                shift,
                TorsoFill::Texture(&block),
            );
            let mut target = solid(panel_h, panel_w, DARK_BG);
            paste(&mut target, &block, rect.top, rect.left);
            TaskSample {
                context_panels: vec![dressed],
                target,
                tokens: vec![
                    kind.name().to_string(),
                    PALETTE[c1].0.to_string(),
                    PALETTE[c2].0.to_string(),
                ],
                task: Task::Extraction,
                seed: s,
            }
        })
        .collect()
}

/// Generic pretraining source: full-canvas shape scenes with one random
/// rectangular target mask each; the stand-in for large-scale pretraining.
pub struct InpaintSource {
    pub canvas_h: usize,
    pub canvas_w: usize,
    pub n: usize,
    pub seed: u64,
    vocab: Vec<String>,
    layout: LayoutSpec,
}

impl InpaintSource {
    pub fn new(canvas_h: usize, canvas_w: usize, n: usize, seed: u64) -> Result<Self> {
        let layout = LayoutSpec::new(
            "inpaint-1x2",
            1,
            2,
            canvas_h,
            canvas_w / 2,
            vec![Role::Context, Role::Target],
        )?;
        Ok(InpaintSource {
            canvas_h,
            canvas_w,
            n,
            seed,
            vocab: vocab(),
            layout,
        })
    }
}

impl BatchSource for InpaintSource {
    fn len(&self) -> usize {
        self.n
    }

    fn sample(&self, idx: usize) -> Result<(Canvas, BinaryMask, Vec<usize>)> {
        let s = sample_seed(self.seed, Split::Train, idx as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let (h, w) = (self.canvas_h, self.canvas_w);
        let bg_idx = rng.gen_range(0..PALETTE.len());
        let count = rng.gen_range(2..=4);
        let shapes = shape_field(&mut rng, count, false);
        let pixels = render_scene(PALETTE[bg_idx].1, &shapes, h, w);

        let rect_h = rng.gen_range(h / 4..=h / 2);
        let rect_w = rng.gen_range(w / 4..=w / 2);
        let rect = Rect {
            top: rng.gen_range(0..=h - rect_h),
            left: rng.gen_range(0..=w - rect_w),
            height: rect_h,
            width: rect_w,
        };
        let mask = BinaryMask::from_rect(h, w, rect);

        let mut tokens = vec![PALETTE[bg_idx].0.to_string()];
        tokens.extend(
            shapes
                .iter()
                .take(2)
                .map(|s| color_name(s.color).to_string()),
        );
        let canvas = Canvas {
            pixels,
            layout: self.layout.clone(),
        };
        Ok((canvas, mask, encode_condition(&tokens, &self.vocab).ids))
    }
}
