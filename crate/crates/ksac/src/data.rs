//! Deterministic synthetic segmentation scenes and the augmentation recipe.
//!
//! Scenes are textured backgrounds with circles, squares and triangles of
//! widely varying sizes drawn back to front; every scene is forced to contain
//! at least one small (diameter < H/8) and one large (diameter > H/2) shape,
//! so a single kernel must cope with both scales. Augmentation follows the
//! usual recipe: horizontal flip with probability 0.5, a scale factor from
//! {0.5, 0.75, ..., 2.0}, then pad and random-crop.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ops::LabelMap;
use crate::tensor::{Real, Tape, TensorId};

pub const CLASS_BACKGROUND: u32 = 0;
pub const CLASS_CIRCLE: u32 = 1;
pub const CLASS_SQUARE: u32 = 2;
pub const CLASS_TRIANGLE: u32 = 3;
pub const NUM_CLASSES: usize = 4;
pub const IGNORE_LABEL: u32 = 255;

/// One synthetic image/label pair. The image is `(3,H,W)` row-major with
/// values in `[0,1]`; labels are `(H,W)` class indices or [`IGNORE_LABEL`]
/// on augmentation padding.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub h: usize,
    pub w: usize,
    pub image: Vec<Real>,
    pub labels: Vec<u32>,
}

impl SceneSample {
    pub fn image_tensor(&self, tape: &mut Tape) -> TensorId {
        tape.leaf([1, 3, self.h, self.w], self.image.clone(), false)
    }

    pub fn label_map(&self) -> LabelMap {
        LabelMap::new(1, self.h, self.w, self.labels.clone())
    }

    /// Mirrors image and labels left-right.
    pub fn hflip(&self) -> SceneSample {
        let (h, w) = (self.h, self.w);
        let mut image = self.image.clone();
        for c in 0..3 {
            for i in 0..h {
                let row = (c * h + i) * w;
                image[row..row + w].reverse();
            }
        }
        let mut labels = self.labels.clone();
        for i in 0..h {
            labels[i * w..(i + 1) * w].reverse();
        }
        SceneSample {
            h,
            w,
            image,
            labels,
        }
    }
}

/// Analytic geometry of one drawn shape.
#[derive(Debug, Clone, Copy)]
pub enum ShapeGeom {
    Circle {
        cx: Real,
        cy: Real,
        r: Real,
    },
    Square {
        cx: Real,
        cy: Real,
        half: Real,
    },
    Triangle {
        v: [(Real, Real); 3],
    },
}

impl ShapeGeom {
    pub fn class(&self) -> u32 {
        match self {
            ShapeGeom::Circle { .. } => CLASS_CIRCLE,
            ShapeGeom::Square { .. } => CLASS_SQUARE,
            ShapeGeom::Triangle { .. } => CLASS_TRIANGLE,
        }
    }

    pub fn contains(&self, x: Real, y: Real) -> bool {
        match *self {
            ShapeGeom::Circle { cx, cy, r } => {
                (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r
            }
            ShapeGeom::Square { cx, cy, half } => {
                (x - cx).abs() <= half && (y - cy).abs() <= half
            }
            ShapeGeom::Triangle { v } => {
                let sign = |a: (Real, Real), b: (Real, Real), p: (Real, Real)| {
                    (p.0 - b.0) * (a.1 - b.1) - (a.0 - b.0) * (p.1 - b.1)
                };
                let p = (x, y);
                let d1 = sign(v[0], v[1], p);
                let d2 = sign(v[1], v[2], p);
                let d3 = sign(v[2], v[0], p);
                let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(has_neg && has_pos)
            }
        }
    }

    pub fn diameter(&self) -> Real {
        match *self {
            ShapeGeom::Circle { r, .. } => 2.0 * r,
            ShapeGeom::Square { half, .. } => 2.0 * half * (2.0 as Real).sqrt(),
            ShapeGeom::Triangle { v } => {
                let mut d: Real = 0.0;
                for i in 0..3 {
                    for j in i + 1..3 {
                        let dx = v[i].0 - v[j].0;
                        let dy = v[i].1 - v[j].1;
                        d = d.max((dx * dx + dy * dy).sqrt());
                    }
                }
                d
            }
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, h: usize, w: usize, diameter: Real) -> ShapeGeom {
    let cx = rng.gen_range(0.0..w as Real);
    let cy = rng.gen_range(0.0..h as Real);
    match rng.gen_range(0..3u32) {
        0 => ShapeGeom::Circle {
            cx,
            cy,
            r: diameter / 2.0,
        },
        1 => ShapeGeom::Square {
            cx,
            cy,
            half: diameter / (2.0 * (2.0 as Real).sqrt()),
        },
        _ => {
            // roughly equilateral triangle of circumradius diameter/√3,
            // randomly rotated; max vertex distance ≈ the target diameter
            let rad = diameter / (3.0 as Real).sqrt();
            let phi: Real = rng.gen_range(0.0..std::f64::consts::TAU as Real);
            let v = [0, 1, 2].map(|k| {
                let a = phi + k as Real * std::f64::consts::TAU as Real / 3.0;
                (cx + rad * a.cos(), cy + rad * a.sin())
            });
            ShapeGeom::Triangle { v }
        }
    }
}

/// Class-correlated base color with per-shape jitter.
fn shape_color(rng: &mut ChaCha8Rng, class: u32) -> [Real; 3] {
    let jitter = |rng: &mut ChaCha8Rng| -> Real { rng.gen_range(-0.08..0.08) };
    let mut c = match class {
        CLASS_CIRCLE => [0.85, 0.25, 0.2],
        CLASS_SQUARE => [0.2, 0.8, 0.3],
        _ => [0.25, 0.35, 0.9],
    };
    for v in &mut c {
        *v = (*v + jitter(rng)).clamp(0.0, 1.0);
    }
    c
}

/// Deterministic scene generation. Shapes are drawn back to front; labels
/// follow the draw order, so later shapes occlude earlier ones.
pub fn generate_scene(seed: u64, h: usize, w: usize, max_shapes: usize) -> Result<SceneSample> {
    if h < 32 || w < 32 {
        return Err(Error::Config(format!(
            "scene dims must be at least 32×32, got {h}×{w}"
        )));
    }
    if max_shapes < 2 {
        return Err(Error::Config(
            "need max_shapes >= 2 to force the scale spread".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = h.min(w) as Real;
    let mut image = vec![0.0; 3 * h * w];
    // textured gray background
    for i in 0..h * w {
        let base: Real = rng.gen_range(0.35..0.55);
        for c in 0..3 {
            image[c * h * w + i] = (base + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
        }
    }
    let mut labels = vec![CLASS_BACKGROUND; h * w];
    let count = rng.gen_range(2..=max_shapes);
    let mut shapes = Vec::with_capacity(count);
    for k in 0..count {
        // first a large shape, then a small one, then free sizes
        let diameter = match k {
            0 => rng.gen_range(side * 0.55..side * 0.8),
            1 => rng.gen_range(side / 16.0..side / 8.0 * 0.95),
            _ => rng.gen_range(side / 12.0..side * 0.6),
        };
        shapes.push(random_shape(&mut rng, h, w, diameter));
    }
    for shape in &shapes {
        let class = shape.class();
        let color = shape_color(&mut rng, class);
        for i in 0..h {
            for j in 0..w {
                if shape.contains(j as Real, i as Real) {
                    labels[i * w + j] = class;
                    for c in 0..3 {
                        let noise = rng.gen_range(-0.04..0.04);
                        image[c * h * w + i * w + j] = (color[c] + noise).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(SceneSample {
        h,
        w,
        image,
        labels,
    })
}

/// Augmentation parameters; defaults follow the flip/scale/pad/crop recipe
/// with a desk-scale 97×97 crop.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub flip_prob: Real,
    pub scale_set: Vec<Real>,
    pub crop: (usize, usize),
    pub pad_image: Real,
    pub pad_label: u32,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            scale_set: (0..7).map(|i| 0.5 + 0.25 * i as Real).collect(),
            crop: (97, 97),
            pad_image: 0.5,
            pad_label: IGNORE_LABEL,
        }
    }
}

fn resize_image_bilinear(src: &[Real], h: usize, w: usize, oh: usize, ow: usize) -> Vec<Real> {
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, Real, Real)> {
        (0..out)
            .map(|i| {
                let s = ((i as Real + 0.5) * inp as Real / out as Real - 0.5)
                    .max(0.0)
                    .min((inp - 1) as Real);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                let t = s - i0 as Real;
                (i0, i1, 1.0 - t, t)
            })
            .collect()
    };
    let rows = taps(oh, h);
    let cols = taps(ow, w);
    let mut out = vec![0.0; 3 * oh * ow];
    for c in 0..3 {
        let sbase = c * h * w;
        let obase = c * oh * ow;
        for (i, &(r0, r1, wr0, wr1)) in rows.iter().enumerate() {
            for (j, &(c0, c1, wc0, wc1)) in cols.iter().enumerate() {
                out[obase + i * ow + j] = wr0 * wc0 * src[sbase + r0 * w + c0]
                    + wr0 * wc1 * src[sbase + r0 * w + c1]
                    + wr1 * wc0 * src[sbase + r1 * w + c0]
                    + wr1 * wc1 * src[sbase + r1 * w + c1];
            }
        }
    }
    out
}

fn resize_labels_nearest(src: &[u32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u32> {
    let nearest = |i: usize, out: usize, inp: usize| -> usize {
        let s = (i as Real + 0.5) * inp as Real / out as Real - 0.5;
        (s.round().max(0.0) as usize).min(inp - 1)
    };
    let mut out = vec![0; oh * ow];
    for i in 0..oh {
        let si = nearest(i, oh, h);
        for j in 0..ow {
            out[i * ow + j] = src[si * w + nearest(j, ow, w)];
        }
    }
    out
}

/// Flip → scale → pad → random crop, fully determined by `seed`. Labels are
/// resampled nearest-neighbor so no new classes can appear.
pub fn augment(sample: &SceneSample, spec: &AugmentSpec, seed: u64) -> SceneSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flipped;
    let sample = if spec.flip_prob > 0.0 && rng.gen_bool(spec.flip_prob as f64) {
        flipped = sample.hflip();
        &flipped
    } else {
        sample
    };
    let scale = spec.scale_set[rng.gen_range(0..spec.scale_set.len())];
    let (sh, sw) = (
        ((sample.h as Real * scale).round() as usize).max(1),
        ((sample.w as Real * scale).round() as usize).max(1),
    );
    let (image, labels) = if (sh, sw) == (sample.h, sample.w) {
        (sample.image.clone(), sample.labels.clone())
    } else {
        (
            resize_image_bilinear(&sample.image, sample.h, sample.w, sh, sw),
            resize_labels_nearest(&sample.labels, sample.h, sample.w, sh, sw),
        )
    };
    let (ch, cw) = spec.crop;
    // pad bottom/right as needed, then crop at a random offset
    let (ph, pw) = (sh.max(ch), sw.max(cw));
    let mut pimage = vec![spec.pad_image; 3 * ph * pw];
    let mut plabels = vec![spec.pad_label; ph * pw];
    for c in 0..3 {
        for i in 0..sh {
            let src = (c * sh + i) * sw;
            let dst = (c * ph + i) * pw;
            pimage[dst..dst + sw].copy_from_slice(&image[src..src + sw]);
        }
    }
    for i in 0..sh {
        plabels[i * pw..i * pw + sw].copy_from_slice(&labels[i * sw..(i + 1) * sw]);
    }
    let oy = rng.gen_range(0..=ph - ch);
    let ox = rng.gen_range(0..=pw - cw);
    let mut image = vec![0.0; 3 * ch * cw];
    let mut labels = vec![0; ch * cw];
    for c in 0..3 {
        for i in 0..ch {
            let src = (c * ph + oy + i) * pw + ox;
            image[(c * ch + i) * cw..(c * ch + i + 1) * cw]
                .copy_from_slice(&pimage[src..src + cw]);
        }
    }
    for i in 0..ch {
        let src = (oy + i) * pw + ox;
        labels[i * cw..(i + 1) * cw].copy_from_slice(&plabels[src..src + cw]);
    }
    SceneSample {
        h: ch,
        w: cw,
        image,
        labels,
    }
}

// ---- PPM/PGM export and manifests ----

pub fn write_ppm(path: &Path, image: &[Real], h: usize, w: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        write!(out, "P6\n{w} {h}\n255\n")?;
        for i in 0..h * w {
            for c in 0..3 {
                let v = (image[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8;
                out.write_all(&[v])?;
            }
        }
        out.flush()
    };
    go().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_pgm(path: &Path, gray: &[u8], h: usize, w: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = BufWriter::new(file);
    let mut go = || -> std::io::Result<()> {
        write!(out, "P5\n{w} {h}\n255\n")?;
        out.write_all(gray)?;
        out.flush()
    };
    go().map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Line-oriented `seed,H,W` dataset manifest.
pub fn write_manifest(path: &Path, entries: &[(u64, usize, usize)]) -> Result<()> {
    let mut text = String::new();
    for (seed, h, w) in entries {
        let _ = writeln!(text, "{seed},{h},{w}");
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_manifest(path: &Path) -> Result<Vec<(u64, usize, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let parse = |s: &str| -> Result<u64> {
            s.parse()
                .map_err(|_| Error::Config(format!("manifest line {}: bad entry '{line}'", lineno + 1)))
        };
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "manifest line {}: expected 'seed,H,W', got '{line}'",
                lineno + 1
            )));
        }
        entries.push((
            parse(parts[0])?,
            parse(parts[1])? as usize,
            parse(parts[2])? as usize,
        ));
    }
    Ok(entries)
}
