//! Grid layouts, canvases, and target masks.
//!
//! A canvas is one floating-point image holding every panel of a task:
//! reference panels keep the role `Context`, generated panels the role
//! `Target`, unused cells `Blank`. The binary mask derived from a layout
//! marks exactly the target pixels and drives the masked forward process,
//! the masked loss, and the masked reverse initialization.

use ndarray::{Array3, ArrayView3, ArrayViewMut3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel fill used for `Blank` panels: black in `[-1, 1]` space.
pub const BLANK_FILL: f32 = -1.0;

/// What one grid cell holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Context,
    Target,
    Blank,
}

/// Rectangle in pixel coordinates, `(top, left, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Grid geometry plus per-panel roles for one task, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub panel_h: usize,
    pub panel_w: usize,
    pub roles: Vec<Role>,
}

impl LayoutSpec {
    pub fn new(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        panel_h: usize,
        panel_w: usize,
        roles: Vec<Role>,
    ) -> Result<Self> {
        validate_layout(LayoutSpec {
            name: name.into(),
            rows,
            cols,
            panel_h,
            panel_w,
            roles,
        })
    }

    pub fn panel_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Canvas dimensions `(height, width)`.
    pub fn canvas_dims(&self) -> (usize, usize) {
        (self.rows * self.panel_h, self.cols * self.panel_w)
    }

    pub fn target_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Role::Target)
            .map(|(i, _)| i)
    }

    pub fn context_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == Role::Context)
            .map(|(i, _)| i)
    }
}

/// Checks every `LayoutSpec` invariant and returns the spec unchanged.
pub fn validate_layout(spec: LayoutSpec) -> Result<LayoutSpec> {
    if spec.rows == 0 || spec.cols == 0 {
        return Err(Error::InvalidLayout(format!(
            "grid must be non-empty, got {}x{}",
            spec.rows, spec.cols
        )));
    }
    if spec.panel_h == 0 || spec.panel_w == 0 {
        return Err(Error::InvalidLayout(format!(
            "panel dims must be positive, got {}x{}",
            spec.panel_h, spec.panel_w
        )));
    }
    if spec.roles.len() != spec.rows * spec.cols {
        return Err(Error::InvalidLayout(format!(
            "{} roles for a {}x{} grid",
            spec.roles.len(),
            spec.rows,
            spec.cols
        )));
    }
    if !spec.roles.contains(&Role::Target) {
        return Err(Error::InvalidLayout(format!(
            "layout '{}' has no target panel",
            spec.name
        )));
    }
    if !spec.roles.contains(&Role::Context) {
        return Err(Error::InvalidLayout(format!(
            "layout '{}' has no context panel",
            spec.name
        )));
    }
    Ok(spec)
}

/// Row-major rectangle of panel `index`; rectangles of distinct indices are
/// disjoint and tile the canvas.
pub fn panel_rect(spec: &LayoutSpec, index: usize) -> Result<Rect> {
    if index >= spec.panel_count() {
        return Err(Error::IndexOutOfRange(format!(
            "panel {index} in a {}x{} grid",
            spec.rows, spec.cols
        )));
    }
    let row = index / spec.cols;
    let col = index % spec.cols;
    Ok(Rect {
        top: row * spec.panel_h,
        left: col * spec.panel_w,
        height: spec.panel_h,
        width: spec.panel_w,
    })
}

/// One composite image, pixels in `[-1, 1]`, shape `(H, W, C)`.
#[derive(Debug, Clone)]
pub struct Canvas {
    pub pixels: Array3<f32>,
    pub layout: LayoutSpec,
}

impl Canvas {
    pub fn channels(&self) -> usize {
        self.pixels.len_of(Axis(2))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let d = self.pixels.dim();
        (d.0, d.1, d.2)
    }

    pub fn view_rect(&self, rect: Rect) -> ArrayView3<'_, f32> {
        self.pixels.slice(ndarray::s![
            rect.top..rect.top + rect.height,
            rect.left..rect.left + rect.width,
            ..
        ])
    }

    pub fn view_rect_mut(&mut self, rect: Rect) -> ArrayViewMut3<'_, f32> {
        self.pixels.slice_mut(ndarray::s![
            rect.top..rect.top + rect.height,
            rect.left..rect.left + rect.width,
            ..
        ])
    }
}

/// Per-pixel 0/1 mask over a canvas, shape `(H, W, 1)`; broadcastable over
/// the channel axis.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub values: Array3<f32>,
}

impl BinaryMask {
    /// All-zero mask of the given canvas height/width.
    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            values: Array3::zeros((h, w, 1)),
        }
    }

    /// Mask that is 1 exactly inside `rect`.
    pub fn from_rect(h: usize, w: usize, rect: Rect) -> Self {
        let mut mask = Self::zeros(h, w);
        mask.values
            .slice_mut(ndarray::s![
                rect.top..rect.top + rect.height,
                rect.left..rect.left + rect.width,
                ..
            ])
            .fill(1.0);
        mask
    }

    pub fn dims(&self) -> (usize, usize) {
        let d = self.values.dim();
        (d.0, d.1)
    }

    /// Number of masked pixels (channel axis not counted).
    pub fn coverage(&self) -> usize {
        self.values.iter().filter(|v| **v == 1.0).count()
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[[y, x, 0]]
    }

    pub fn is_empty(&self) -> bool {
        self.coverage() == 0
    }
}

/// Builds the 0/1 mask that is 1 exactly on target panels.
pub fn target_mask(spec: &LayoutSpec) -> BinaryMask {
    let (h, w) = spec.canvas_dims();
    let mut mask = BinaryMask::zeros(h, w);
    for idx in spec.target_indices() {
        let rect = panel_rect(spec, idx).expect("target index within grid");
        mask.values
            .slice_mut(ndarray::s![
                rect.top..rect.top + rect.height,
                rect.left..rect.left + rect.width,
                ..
            ])
            .fill(1.0);
    }
    mask
}

/// Assembles panel images into one canvas. `panels[i]` lands in
/// `panel_rect(spec, i)` exactly; `Blank` slots may be given any panel of
/// the right shape (conventionally `blank_panel`), typically produced by
/// the caller via [`blank_panel`].
pub fn compose(panels: &[Array3<f32>], spec: &LayoutSpec) -> Result<Canvas> {
    if panels.len() != spec.panel_count() {
        return Err(Error::ShapeMismatch(format!(
            "{} panels for a {}x{} grid",
            panels.len(),
            spec.rows,
            spec.cols
        )));
    }
    let channels = panels
        .first()
        .map(|p| p.len_of(Axis(2)))
        .ok_or_else(|| Error::ShapeMismatch("no panels".into()))?;
    let (h, w) = spec.canvas_dims();
    let mut pixels = Array3::zeros((h, w, channels));
    for (i, panel) in panels.iter().enumerate() {
        let (ph, pw, pc) = {
            let d = panel.dim();
            (d.0, d.1, d.2)
        };
        if ph != spec.panel_h || pw != spec.panel_w || pc != channels {
            return Err(Error::ShapeMismatch(format!(
                "panel {i} is {ph}x{pw}x{pc}, expected {}x{}x{channels}",
                spec.panel_h, spec.panel_w
            )));
        }
        let rect = panel_rect(spec, i)?;
        pixels
            .slice_mut(ndarray::s![
                rect.top..rect.top + rect.height,
                rect.left..rect.left + rect.width,
                ..
            ])
            .assign(panel);
    }
    Ok(Canvas {
        pixels,
        layout: spec.clone(),
    })
}

/// Exact pixel copy of panel `index`.
pub fn extract_panel(canvas: &Canvas, index: usize) -> Result<Array3<f32>> {
    let rect = panel_rect(&canvas.layout, index)?;
    Ok(canvas.view_rect(rect).to_owned())
}

/// Constant `BLANK_FILL` panel.
pub fn blank_panel(panel_h: usize, panel_w: usize, channels: usize) -> Array3<f32> {
    Array3::from_elem((panel_h, panel_w, channels), BLANK_FILL)
}

/// Task identifiers with a registered preset layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Spatial control from an edge-map condition.
    Control,
    /// Grayscale-to-color.
    Colorize,
    /// Subject-driven generation from reference glyphs.
    Subject,
    /// Recolor one shape of a source scene.
    Edit,
    /// Garment applied to a figure.
    Tryon,
    /// Flat garment extracted from a dressed figure.
    Extraction,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Control,
        Task::Colorize,
        Task::Subject,
        Task::Edit,
        Task::Tryon,
        Task::Extraction,
    ];

    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "control" => Ok(Task::Control),
            "colorize" => Ok(Task::Colorize),
            "subject" => Ok(Task::Subject),
            "edit" => Ok(Task::Edit),
            "tryon" => Ok(Task::Tryon),
            "extraction" => Ok(Task::Extraction),
            other => Err(Error::UnknownTask(other.into())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Control => "control",
            Task::Colorize => "colorize",
            Task::Subject => "subject",
            Task::Edit => "edit",
            Task::Tryon => "tryon",
            Task::Extraction => "extraction",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Registered layout for a task.
///
/// The 2x2 tasks put the target bottom-right with the condition or the
/// references filling the other three quadrants, so the target gets
/// positional cues from both axes. Try-on keeps the target in the center
/// of a 1x3 strip; extraction mirrors it with a trailing blank.
pub fn preset_layout(task: Task, panel_h: usize, panel_w: usize) -> LayoutSpec {
    use Role::{Blank, Context, Target};
    let (name, rows, cols, roles) = match task {
        Task::Control => (
            "control-2x2",
            2,
            2,
            vec![Context, Context, Context, Target],
        ),
        Task::Colorize => (
            "colorize-2x2",
            2,
            2,
            vec![Context, Context, Context, Target],
        ),
        Task::Subject => (
            "subject-2x2",
            2,
            2,
            vec![Context, Context, Context, Target],
        ),
        Task::Edit => ("edit-2x2", 2, 2, vec![Context, Context, Context, Target]),
        Task::Tryon => ("tryon-1x3", 1, 3, vec![Context, Target, Context]),
        Task::Extraction => ("extraction-1x3", 1, 3, vec![Context, Target, Blank]),
    };
    LayoutSpec::new(name, rows, cols, panel_h, panel_w, roles)
        .expect("preset layouts are valid by construction")
}

/// Affine map `[-1,1] -> [0,255]` with rounding and saturation.
pub fn pixel_to_u8(v: f32) -> u8 {
    (((v + 1.0) * 0.5 * 255.0).round()).clamp(0.0, 255.0) as u8
}

/// Inverse of [`pixel_to_u8`] up to quantization.
pub fn u8_to_pixel(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

/// Saves an image array as PNG (3-channel RGB or 1-channel grayscale).
pub fn save_png(path: &std::path::Path, pixels: &ArrayView3<'_, f32>) -> Result<()> {
    let (h, w, c) = {
        let d = pixels.dim();
        (d.0, d.1, d.2)
    };
    match c {
        3 => {
            let mut img = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(
                        x as u32,
                        y as u32,
                        image::Rgb([
                            pixel_to_u8(pixels[[y, x, 0]]),
                            pixel_to_u8(pixels[[y, x, 1]]),
                            pixel_to_u8(pixels[[y, x, 2]]),
                        ]),
                    );
                }
            }
            img.save(path)?;
        }
        1 => {
            let mut img = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(
                        x as u32,
                        y as u32,
                        image::Luma([pixel_to_u8(pixels[[y, x, 0]])]),
                    );
                }
            }
            img.save(path)?;
        }
        other => {
            return Err(Error::ShapeMismatch(format!(
                "cannot save {other}-channel image as PNG"
            )))
        }
    }
    Ok(())
}

/// Loads a PNG into an `(H, W, 3)` array of `[-1, 1]` pixels.
pub fn load_png(path: &std::path::Path) -> Result<Array3<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut pixels = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[[y as usize, x as usize, c]] = u8_to_pixel(p.0[c]);
        }
    }
    Ok(pixels)
}
