//! Procedural glyph generator that stands in for a real handwriting corpus.
//!
//! Every class is a stroke template (lines and arcs) plus a dot pattern.
//! Several classes share a stroke template and differ only in their dots, the
//! way many letters of Arabic-derived scripts do, so the hardest confusions
//! are between those siblings. Each sample is rendered with its own jitter:
//! pose, control-point noise, stroke width, ink/paper tone and pixel noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Rng;

use super::pnm::encode_pgm;

pub const MAX_CLASSES: usize = 35;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stroke {
    Bowl,
    Hook,
    LoopTail,
    Bar,
    Angle,
    Descender,
    Teeth,
    Ain,
    Kaf,
    Lam,
    Mim,
    Ha,
    Waw,
    Ya,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Marks {
    None,
    Above(u8),
    Below(u8),
    Chevron,
    Slash,
}

/// Class table: the first ten classes contain four sibling pairs.
const CLASSES: [(Stroke, Marks); MAX_CLASSES] = [
    (Stroke::Bowl, Marks::Below(1)),
    (Stroke::Bowl, Marks::Above(2)),
    (Stroke::Hook, Marks::None),
    (Stroke::Hook, Marks::Below(3)),
    (Stroke::Bar, Marks::None),
    (Stroke::LoopTail, Marks::Above(1)),
    (Stroke::LoopTail, Marks::Above(2)),
    (Stroke::Angle, Marks::None),
    (Stroke::Descender, Marks::None),
    (Stroke::Descender, Marks::Above(1)),
    (Stroke::Bowl, Marks::Below(3)),
    (Stroke::Hook, Marks::Below(1)),
    (Stroke::Hook, Marks::Above(1)),
    (Stroke::Descender, Marks::Above(3)),
    (Stroke::Teeth, Marks::None),
    (Stroke::Teeth, Marks::Above(3)),
    (Stroke::Ain, Marks::None),
    (Stroke::Ain, Marks::Above(1)),
    (Stroke::LoopTail, Marks::Above(3)),
    (Stroke::Kaf, Marks::None),
    (Stroke::Kaf, Marks::Slash),
    (Stroke::Lam, Marks::None),
    (Stroke::Lam, Marks::Chevron),
    (Stroke::Mim, Marks::None),
    (Stroke::Bowl, Marks::Above(1)),
    (Stroke::Ha, Marks::None),
    (Stroke::Ha, Marks::Chevron),
    (Stroke::Waw, Marks::None),
    (Stroke::Waw, Marks::Chevron),
    (Stroke::Ya, Marks::None),
    (Stroke::Ya, Marks::Chevron),
    (Stroke::Ya, Marks::Below(2)),
    (Stroke::Bar, Marks::Above(1)),
    (Stroke::Angle, Marks::Above(1)),
    (Stroke::Mim, Marks::Above(1)),
];

/// Identifier of the stroke template class `class` is drawn from. Classes
/// with equal families differ only in their dots or accent marks.
pub fn stroke_family(class: usize) -> usize {
    let stroke = CLASSES[class].0;
    CLASSES
        .iter()
        .position(|(s, _)| *s == stroke)
        .expect("class table contains its own strokes")
}

pub fn class_dir_name(class: usize) -> String {
    format!("class_{class:02}")
}

type Pt = (f64, f64);

enum Prim {
    Line(Pt, Pt),
    /// Center, radii, start and end angle (y grows downwards).
    Arc(Pt, (f64, f64), f64, f64),
}

struct Template {
    prims: Vec<Prim>,
    above: Pt,
    below: Pt,
}

fn template(stroke: Stroke) -> Template {
    use Prim::{Arc, Line};
    let (prims, above, below) = match stroke {
        Stroke::Bowl => (
            vec![
                Arc((0.5, 0.42), (0.32, 0.2), 0.0, PI),
                Line((0.82, 0.42), (0.84, 0.32)),
                Line((0.18, 0.42), (0.16, 0.32)),
            ],
            (0.5, 0.28),
            (0.5, 0.8),
        ),
        Stroke::Hook => (
            vec![
                Line((0.3, 0.28), (0.68, 0.3)),
                Arc((0.52, 0.56), (0.26, 0.26), -0.55 * PI, -1.5 * PI),
            ],
            (0.55, 0.15),
            (0.56, 0.56),
        ),
        Stroke::LoopTail => (
            vec![
                Arc((0.66, 0.48), (0.1, 0.1), 0.0, 2.0 * PI),
                Arc((0.45, 0.5), (0.3, 0.18), 0.15 * PI, PI),
            ],
            (0.66, 0.24),
            (0.45, 0.84),
        ),
        Stroke::Bar => (vec![Line((0.5, 0.2), (0.5, 0.82))], (0.3, 0.2), (0.3, 0.82)),
        Stroke::Angle => (
            vec![Line((0.38, 0.3), (0.62, 0.58)), Line((0.62, 0.58), (0.32, 0.66))],
            (0.46, 0.16),
            (0.48, 0.84),
        ),
        Stroke::Descender => (
            vec![Arc((0.3, 0.42), (0.28, 0.34), -0.2 * PI, 0.5 * PI)],
            (0.5, 0.2),
            (0.3, 0.9),
        ),
        Stroke::Teeth => (
            vec![
                Arc((0.28, 0.5), (0.1, 0.14), 0.0, PI),
                Arc((0.48, 0.5), (0.1, 0.14), 0.0, PI),
                Arc((0.68, 0.5), (0.1, 0.2), 0.0, PI),
                Line((0.78, 0.5), (0.78, 0.42)),
            ],
            (0.48, 0.28),
            (0.48, 0.84),
        ),
        Stroke::Ain => (
            vec![
                Arc((0.52, 0.34), (0.14, 0.1), -0.1 * PI, -1.1 * PI),
                Arc((0.56, 0.6), (0.22, 0.2), -0.8 * PI, -1.6 * PI),
            ],
            (0.52, 0.14),
            (0.5, 0.88),
        ),
        Stroke::Kaf => (
            vec![
                Line((0.7, 0.18), (0.7, 0.68)),
                Line((0.7, 0.68), (0.24, 0.68)),
                Line((0.68, 0.22), (0.42, 0.42)),
            ],
            (0.46, 0.16),
            (0.46, 0.84),
        ),
        Stroke::Lam => (
            vec![
                Line((0.66, 0.16), (0.66, 0.58)),
                Arc((0.48, 0.58), (0.18, 0.16), 0.0, PI),
            ],
            (0.4, 0.28),
            (0.48, 0.88),
        ),
        Stroke::Mim => (
            vec![
                Arc((0.55, 0.42), (0.11, 0.11), 0.0, 2.0 * PI),
                Line((0.45, 0.46), (0.42, 0.84)),
            ],
            (0.56, 0.18),
            (0.6, 0.8),
        ),
        Stroke::Ha => (
            vec![Arc((0.5, 0.52), (0.2, 0.24), 0.0, 2.0 * PI)],
            (0.5, 0.16),
            (0.5, 0.88),
        ),
        Stroke::Waw => (
            vec![
                Arc((0.58, 0.4), (0.12, 0.12), -0.5 * PI, 1.5 * PI),
                Arc((0.36, 0.46), (0.34, 0.36), 0.0, 0.55 * PI),
            ],
            (0.58, 0.16),
            (0.3, 0.9),
        ),
        Stroke::Ya => (
            vec![
                Arc((0.58, 0.36), (0.14, 0.1), -0.5 * PI, 0.5 * PI),
                Arc((0.46, 0.6), (0.26, 0.14), -0.5 * PI, 0.95 * PI),
            ],
            (0.6, 0.14),
            (0.46, 0.86),
        ),
    };
    Template { prims, above, below }
}

/// Pose and style drawn once per sample.
struct Jitter {
    angle: f64,
    scale: f64,
    shift: Pt,
    point_noise: f64,
    half_width: f64,
    dot_radius: f64,
    paper: f64,
    ink: f64,
    pixel_noise: f64,
}

impl Jitter {
    fn draw(rng: &mut Rng) -> Self {
        Jitter {
            angle: rng.uniform_range(-5.0, 5.0).to_radians(),
            scale: rng.uniform_range(0.9, 1.05),
            shift: (rng.uniform_range(-0.04, 0.04), rng.uniform_range(-0.04, 0.04)),
            point_noise: 0.012,
            half_width: rng.uniform_range(0.028, 0.042),
            dot_radius: rng.uniform_range(0.045, 0.058),
            paper: rng.uniform_range(220.0, 250.0),
            ink: rng.uniform_range(10.0, 60.0),
            pixel_noise: rng.uniform_range(2.0, 8.0),
        }
    }

    /// Template coordinates to jittered unit-square coordinates.
    fn place(&self, p: Pt) -> Pt {
        let (s, c) = self.angle.sin_cos();
        let (x, y) = (p.0 - 0.5, p.1 - 0.5);
        (
            0.5 + self.shift.0 + self.scale * (c * x - s * y),
            0.5 + self.shift.1 + self.scale * (s * x + c * y),
        )
    }
}

fn wobble(p: Pt, sd: f64, rng: &mut Rng) -> Pt {
    (p.0 + rng.normal(0.0, sd), p.1 + rng.normal(0.0, sd))
}

/// Polyline segments plus filled discs, in unit-square coordinates.
struct Scene {
    segments: Vec<(Pt, Pt)>,
    discs: Vec<(Pt, f64)>,
}

fn build_scene(class: usize, rng: &mut Rng) -> StyledScene {
    let (stroke, marks) = CLASSES[class];
    let t = template(stroke);
    let j = Jitter::draw(rng);
    let mut segments = Vec::new();
    for prim in &t.prims {
        let pts: Vec<Pt> = match *prim {
            Prim::Line(a, b) => vec![wobble(a, j.point_noise, rng), wobble(b, j.point_noise, rng)],
            Prim::Arc(c, (rx, ry), a0, a1) => {
                let c = wobble(c, j.point_noise, rng);
                let rx = rx * (1.0 + rng.normal(0.0, 0.06));
                let ry = ry * (1.0 + rng.normal(0.0, 0.06));
                let steps = 18;
                (0..=steps)
                    .map(|i| {
                        let a = a0 + (a1 - a0) * i as f64 / steps as f64;
                        (c.0 + rx * a.cos(), c.1 + ry * a.sin())
                    })
                    .collect()
            }
        };
        let placed: Vec<Pt> = pts.into_iter().map(|p| j.place(p)).collect();
        segments.extend(placed.windows(2).map(|w| (w[0], w[1])));
    }

    let mut discs = Vec::new();
    let gap = 0.11;
    let dots = |anchor: Pt, count: u8, up: bool| -> Vec<Pt> {
        let (x, y) = anchor;
        let tip = if up { -0.09 } else { 0.09 };
        match count {
            1 => vec![(x, y)],
            2 => vec![(x - gap / 2.0, y), (x + gap / 2.0, y)],
            _ => vec![(x - gap / 2.0, y), (x + gap / 2.0, y), (x, y + tip)],
        }
    };
    let chevron = |(x, y): Pt| {
        vec![
            ((x - 0.07, y - 0.06), (x, y + 0.02)),
            ((x, y + 0.02), (x + 0.07, y - 0.06)),
        ]
    };
    match marks {
        Marks::None => {}
        Marks::Above(n) => {
            for d in dots(t.above, n, true) {
                discs.push((j.place(wobble(d, j.point_noise, rng)), j.dot_radius * j.scale));
            }
        }
        Marks::Below(n) => {
            for d in dots(t.below, n, false) {
                discs.push((j.place(wobble(d, j.point_noise, rng)), j.dot_radius * j.scale));
            }
        }
        Marks::Chevron => {
            for (a, b) in chevron(t.above) {
                segments.push((j.place(wobble(a, j.point_noise, rng)), j.place(wobble(b, j.point_noise, rng))));
            }
        }
        Marks::Slash => {
            let (x, y) = t.above;
            let (a, b) = ((x - 0.1, y + 0.06), (x + 0.14, y - 0.08));
            segments.push((j.place(wobble(a, j.point_noise, rng)), j.place(wobble(b, j.point_noise, rng))));
        }
    }
    StyledScene {
        scene: Scene { segments, discs },
        half_width: j.half_width,
        paper: j.paper,
        ink: j.ink,
        pixel_noise: j.pixel_noise,
    }
}

struct StyledScene {
    scene: Scene,
    half_width: f64,
    paper: f64,
    ink: f64,
    pixel_noise: f64,
}

fn segment_distance(p: Pt, (a, b): (Pt, Pt)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

fn rasterize(s: &StyledScene, h: usize, w: usize, rng: &mut Rng) -> Vec<u8> {
    let unit = h.min(w) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            // Signed distance to the ink boundary, in pixels.
            let mut edge = f64::INFINITY;
            for &seg in &s.scene.segments {
                edge = edge.min(segment_distance(p, seg) - s.half_width);
            }
            for &(c, r) in &s.scene.discs {
                let d = ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt() - r;
                edge = edge.min(d);
            }
            let coverage = (0.5 - edge * unit).clamp(0.0, 1.0);
            let v = s.paper + (s.ink - s.paper) * coverage + rng.normal(0.0, s.pixel_noise);
            out.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Renders one sample of `class` as row-major 8-bit grayscale.
pub fn render_glyph(class: usize, height: usize, width: usize, rng: &mut Rng) -> Result<Vec<u8>> {
    if class >= MAX_CLASSES {
        return Err(Error::InvalidArgument(format!("class {class} >= {MAX_CLASSES}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("glyph size must be positive".into()));
    }
    let scene = build_scene(class, rng);
    Ok(rasterize(&scene, height, width, rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::InvalidArgument(format!(
                "class count {} outside [2, {MAX_CLASSES}]",
                self.num_classes
            )));
        }
        if self.per_class < 3 {
            return Err(Error::InvalidArgument(format!(
                "need at least 3 samples per class, got {}",
                self.per_class
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument("image size must be positive".into()));
        }
        Ok(())
    }
}

/// Writes `out_dir/class_NN/img_NNNN.pgm` for every class and sample and
/// returns the written paths. Output is a pure function of `spec`.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    spec.validate()?;
    let mut written = Vec::with_capacity(spec.num_classes * spec.per_class);
    for class in 0..spec.num_classes {
        let dir = out_dir.join(class_dir_name(class));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..spec.per_class {
            let mut rng = Rng::derive(spec.seed, class as u64, i as u64);
            let px = render_glyph(class, spec.height, spec.width, &mut rng)?;
            let path = dir.join(format!("img_{i:04}.pgm"));
            std::fs::write(&path, encode_pgm(spec.width, spec.height, &px)).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}
