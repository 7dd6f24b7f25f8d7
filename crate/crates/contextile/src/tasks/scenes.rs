//! Procedural panel imagery: flat-color shape scenes, edge maps, glyph
//! sprites, stick figures, and garment textures. Rendering is exact (no
//! anti-aliasing), so derived panels admit bit-level checks.
//!
//! Every palette color has a distinct luma, which makes grayscale-to-color
//! recovery a well-posed mapping.

use ndarray::{s, Array3};
use rand::Rng;

use crate::layout::Rect;

pub type Rgb = [f32; 3];

/// Named flat colors in `[-1, 1]` with pairwise-distinct luminances.
pub const PALETTE: [(&str, Rgb); 11] = [
    ("red", [1.0, -1.0, -1.0]),
    ("green", [-1.0, 1.0, -1.0]),
    ("blue", [-1.0, -1.0, 1.0]),
    ("yellow", [1.0, 1.0, -1.0]),
    ("magenta", [1.0, -1.0, 1.0]),
    ("cyan", [-1.0, 1.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("orange", [1.0, 0.2, -1.0]),
    ("purple", [0.0, -1.0, 1.0]),
    ("pink", [1.0, 0.2, 0.6]),
    ("gray", [0.0, 0.0, 0.0]),
];

/// Background for edge-conditioned scenes; outside the palette so shapes
/// always contrast.
pub const DARK_BG: Rgb = [-0.6, -0.6, -0.6];

pub fn luma(c: Rgb) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

/// One shape in fractional panel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub color: Rgb,
    pub cx: f32,
    pub cy: f32,
    pub size: f32,
}

impl ShapeSpec {
    fn contains(&self, y: f32, x: f32) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.kind {
            ShapeKind::Circle => dy * dy + dx * dx <= self.size * self.size,
            ShapeKind::Square => dy.abs() <= self.size && dx.abs() <= self.size,
            ShapeKind::Triangle => {
                // Upward triangle: width grows linearly toward the base.
                dy >= -self.size
                    && dy <= self.size
                    && dx.abs() <= (dy + self.size) * 0.5
            }
        }
    }

    /// Geometric centroid in fractional coordinates.
    pub fn centroid(&self) -> (f32, f32) {
        match self.kind {
            ShapeKind::Triangle => (self.cy + self.size / 3.0, self.cx),
            _ => (self.cy, self.cx),
        }
    }
}

pub fn solid(h: usize, w: usize, color: Rgb) -> Array3<f32> {
    Array3::from_shape_fn((h, w, 3), |(_, _, c)| color[c])
}

/// Flat-color scene, shapes painted in order over the background.
pub fn render_scene(bg: Rgb, shapes: &[ShapeSpec], h: usize, w: usize) -> Array3<f32> {
    let mut img = solid(h, w, bg);
    for shape in shapes {
        for y in 0..h {
            for x in 0..w {
                let fy = (y as f32 + 0.5) / h as f32;
                let fx = (x as f32 + 0.5) / w as f32;
                if shape.contains(fy, fx) {
                    for c in 0..3 {
                        img[[y, x, c]] = shape.color[c];
                    }
                }
            }
        }
    }
    img
}

/// Binary outline image: +1 where a pixel differs from any 4-neighbor by
/// more than 0.25 in some channel, -1 elsewhere.
pub fn edge_map(img: &Array3<f32>) -> Array3<f32> {
    let (h, w, ch) = img.dim();
    let mut out = Array3::from_elem((h, w, ch), -1.0f32);
    let differs = |a: (usize, usize), b: (usize, usize)| -> bool {
        (0..ch).any(|c| (img[[a.0, a.1, c]] - img[[b.0, b.1, c]]).abs() > 0.25)
    };
    for y in 0..h {
        for x in 0..w {
            let mut edge = false;
            if y > 0 && differs((y, x), (y - 1, x)) {
                edge = true;
            }
            if !edge && y + 1 < h && differs((y, x), (y + 1, x)) {
                edge = true;
            }
            if !edge && x > 0 && differs((y, x), (y, x - 1)) {
                edge = true;
            }
            if !edge && x + 1 < w && differs((y, x), (y, x + 1)) {
                edge = true;
            }
            if edge {
                for c in 0..ch {
                    out[[y, x, c]] = 1.0;
                }
            }
        }
    }
    out
}

/// Luma replicated over all channels.
pub fn grayscale(img: &Array3<f32>) -> Array3<f32> {
    let (h, w, ch) = img.dim();
    Array3::from_shape_fn((h, w, ch), |(y, x, _)| {
        0.299 * img[[y, x, 0]] + 0.587 * img[[y, x, 1]] + 0.114 * img[[y, x, 2]]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TexKind {
    Stripes,
    Checker,
}

impl TexKind {
    pub fn name(&self) -> &'static str {
        match self {
            TexKind::Stripes => "stripes",
            TexKind::Checker => "checker",
        }
    }
}

/// Two-color pattern block with the given period in pixels.
pub fn texture(kind: TexKind, c1: Rgb, c2: Rgb, h: usize, w: usize, period: usize) -> Array3<f32> {
    let p = period.max(1);
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let pick = match kind {
            TexKind::Stripes => (y / p) % 2 == 0,
            TexKind::Checker => ((y / p) + (x / p)) % 2 == 0,
        };
        if pick {
            c1[c]
        } else {
            c2[c]
        }
    })
}

/// Deterministic subject sprite: a textured block with a centered shape in
/// a third color. Different rngs give different sprites.
pub fn glyph_sprite<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> Array3<f32> {
    let i1 = rng.gen_range(0..PALETTE.len());
    let i2 = (i1 + rng.gen_range(1..PALETTE.len())) % PALETTE.len();
    let i3 = rng.gen_range(0..PALETTE.len());
    let kind = if rng.gen_bool(0.5) {
        TexKind::Stripes
    } else {
        TexKind::Checker
    };
    let period = rng.gen_range(2..4);
    let mut block = texture(kind, PALETTE[i1].1, PALETTE[i2].1, h, w, period);
    let shape = ShapeSpec {
        kind: ShapeKind::ALL[rng.gen_range(0..3)],
        color: PALETTE[i3].1,
        cx: 0.5,
        cy: 0.5,
        size: 0.3,
    };
    for y in 0..h {
        for x in 0..w {
            let fy = (y as f32 + 0.5) / h as f32;
            let fx = (x as f32 + 0.5) / w as f32;
            if shape.contains(fy, fx) {
                for c in 0..3 {
                    block[[y, x, c]] = shape.color[c];
                }
            }
        }
    }
    block
}

/// Overwrites a rectangle of `dst` with `block`.
pub fn paste(dst: &mut Array3<f32>, block: &Array3<f32>, top: usize, left: usize) {
    let (bh, bw, _) = block.dim();
    dst.slice_mut(s![top..top + bh, left..left + bw, ..]).assign(block);
}

pub fn crop(img: &Array3<f32>, rect: Rect) -> Array3<f32> {
    img.slice(s![
        rect.top..rect.top + rect.height,
        rect.left..rect.left + rect.width,
        ..
    ])
    .to_owned()
}

/// How the torso rectangle of a figure is filled.
pub enum TorsoFill<'a> {
    /// Blanked out with the canvas blank constant.
    Blank,
    /// Garment texture block of exactly the torso size.
    Texture(&'a Array3<f32>),
    /// Plain clothing color.
    Color(Rgb),
}

/// Stick figure on a plain background. `shift` moves the whole figure
/// horizontally by a fraction of the panel width. Returns the torso
/// rectangle in pixels.
pub fn draw_figure(
    h: usize,
    w: usize,
    bg: Rgb,
    limb: Rgb,
    shift: f32,
    torso: TorsoFill<'_>,
) -> (Array3<f32>, Rect) {
    let mut img = solid(h, w, bg);
    let dx = (shift * w as f32).round() as isize;
    let px = |f: f32, extent: usize| -> isize { (f * extent as f32).round() as isize };

    let torso_rect = Rect {
        top: px(0.44, h) as usize,
        left: (px(0.34, w) + dx).max(0) as usize,
        height: (px(0.75, h) - px(0.44, h)) as usize,
        width: (px(0.66, w) - px(0.34, w)) as usize,
    };

    fn fill(
        img: &mut Array3<f32>,
        y0: isize,
        y1: isize,
        x0: isize,
        x1: isize,
        color: Rgb,
    ) {
        let (h, w, _) = img.dim();
        for y in y0.max(0)..y1.min(h as isize) {
            for x in x0.max(0)..x1.min(w as isize) {
                for c in 0..3 {
                    img[[y as usize, x as usize, c]] = color[c];
                }
            }
        }
    }

    // Head.
    let head_c = (px(0.30, h), px(0.5, w) + dx);
    let head_r = px(0.11, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (dy, dxx) = (y - head_c.0, x - head_c.1);
            if dy * dy + dxx * dxx <= head_r * head_r {
                for c in 0..3 {
                    img[[y as usize, x as usize, c]] = limb[c];
                }
            }
        }
    }
    // Arms and legs as thick strokes.
    let arm_y = (px(0.46, h), px(0.52, h));
    fill(&mut img, arm_y.0, arm_y.1, px(0.18, w) + dx, px(0.34, w) + dx, limb);
    fill(&mut img, arm_y.0, arm_y.1, px(0.66, w) + dx, px(0.82, w) + dx, limb);
    fill(&mut img, px(0.75, h), px(0.95, h), px(0.40, w) + dx, px(0.47, w) + dx, limb);
    fill(&mut img, px(0.75, h), px(0.95, h), px(0.53, w) + dx, px(0.60, w) + dx, limb);

    // Torso last so it overwrites stroke overlap.
    let (t0, t1) = (
        torso_rect.top as isize,
        (torso_rect.top + torso_rect.height) as isize,
    );
    let (l0, l1) = (
        torso_rect.left as isize,
        (torso_rect.left + torso_rect.width) as isize,
    );
    match torso {
        TorsoFill::Blank => {
            let blank = crate::layout::BLANK_FILL;
            fill(&mut img, t0, t1, l0, l1, [blank, blank, blank]);
        }
        TorsoFill::Color(c) => fill(&mut img, t0, t1, l0, l1, c),
        TorsoFill::Texture(block) => {
            debug_assert_eq!(block.dim().0, torso_rect.height);
            debug_assert_eq!(block.dim().1, torso_rect.width);
            paste(&mut img, block, torso_rect.top, torso_rect.left);
        }
    }
    (img, torso_rect)
}

/// Fixed garment rectangle used for flat garment panels; matches the torso
/// rectangle dimensions of an unshifted figure.
pub fn flat_garment_rect(h: usize, w: usize) -> Rect {
    let px = |f: f32, extent: usize| -> usize { (f * extent as f32).round() as usize };
    Rect {
        top: px(0.44, h),
        left: px(0.34, w),
        height: px(0.75, h) - px(0.44, h),
        width: px(0.66, w) - px(0.34, w),
    }
}
