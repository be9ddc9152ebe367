//! Procedural multi-domain dataset: colored, patterned shapes rendered under
//! several style transforms, each with attribute-templated descriptions.
//!
//! A class is an (shape, color, pattern) attribute tuple; a content id is one
//! jittered rendering of its class; a domain is a style transform applied to
//! that rendering. Domain 0 is always the identity, so domain-0 images equal
//! the canonical rendering exactly. Everything derives from the `SynthSpec` seed plus
//! stable labels, never from generation order, so repeated runs are
//! byte-identical.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MultiDomainDataset, Sample};
use crate::error::{GvrtError, Result};
use crate::rng::component_rng;

const SHAPES: [&str; 8] = ["circle", "triangle", "square", "diamond", "cross", "star", "ring", "bar"];
const PATTERNS: [&str; 4] = ["solid", "striped", "dotted", "checkered"];
const COLORS: [(&str, [f64; 3]); 8] = [
    ("red", [0.90, 0.15, 0.15]),
    ("green", [0.15, 0.80, 0.20]),
    ("blue", [0.20, 0.30, 0.90]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("magenta", [0.85, 0.20, 0.80]),
    ("cyan", [0.10, 0.80, 0.85]),
    ("orange", [0.95, 0.55, 0.10]),
    ("white", [0.92, 0.92, 0.92]),
];
const DOMAIN_NAMES: [&str; 5] = ["original", "hueshift", "overlay", "inverted", "noisy"];
const BACKGROUND: f64 = 0.12;
/// Supersampling factor for antialiased rendering.
const SS: usize = 2;

/// Recipe for one synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_domains: usize,
    pub image_size: usize,
    /// Content ids per class; each id is rendered in every domain.
    pub samples_per_class_per_domain: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(GvrtError::Config("num_classes must be >= 2".into()));
        }
        if self.num_classes > SHAPES.len() * COLORS.len() * PATTERNS.len() {
            return Err(GvrtError::Config(format!(
                "num_classes {} exceeds the attribute space of {} (shape, color, pattern) tuples",
                self.num_classes,
                SHAPES.len() * COLORS.len() * PATTERNS.len()
            )));
        }
        if self.num_domains < 2 {
            return Err(GvrtError::Config("num_domains must be >= 2".into()));
        }
        if self.num_domains > DOMAIN_NAMES.len() {
            return Err(GvrtError::Config(format!(
                "num_domains {} exceeds the {} available style transforms",
                self.num_domains,
                DOMAIN_NAMES.len()
            )));
        }
        if self.image_size < 16 {
            return Err(GvrtError::Config("image_size must be >= 16".into()));
        }
        if self.samples_per_class_per_domain == 0 {
            return Err(GvrtError::Config("samples_per_class_per_domain must be >= 1".into()));
        }
        Ok(())
    }
}

/// Attribute indices of a class: distinct tuples for any class count the
/// validator accepts, and distinct shapes whenever `K <= 8` so one cue is
/// guaranteed to survive every style transform.
fn class_attrs(k: usize) -> (usize, usize, usize) {
    let shape = k % SHAPES.len();
    let j = k / SHAPES.len();
    let color = (shape + 3 * j) % COLORS.len();
    let pattern = (j / 8) % PATTERNS.len();
    (shape, color, pattern)
}

/// Per-id geometry jitter, drawn from a stable stream.
struct Geometry {
    dx: f64,
    dy: f64,
    scale: f64,
    phase: usize,
}

fn geometry(seed: u64, id: u32) -> Geometry {
    let mut rng = component_rng(seed, &format!("synth-geom-{id}"));
    Geometry {
        dx: rng.gen_range(-0.12..=0.12),
        dy: rng.gen_range(-0.12..=0.12),
        scale: rng.gen_range(0.72..=1.05),
        phase: rng.gen_range(0..16),
    }
}

fn shape_mask(shape: usize, u: f64, v: f64) -> bool {
    let r = 0.78;
    match shape {
        0 => u * u + v * v <= r * r,
        1 => v >= -r && v <= 0.8 * r && u.abs() <= 0.9 * r * (v + r) / (1.8 * r),
        2 => u.abs() <= 0.82 * r && v.abs() <= 0.82 * r,
        3 => u.abs() + v.abs() <= 1.1 * r,
        4 => (u.abs() <= 0.32 * r && v.abs() <= r) || (v.abs() <= 0.32 * r && u.abs() <= r),
        5 => u.abs().powf(2.0 / 3.0) + v.abs().powf(2.0 / 3.0) <= r.powf(2.0 / 3.0),
        6 => {
            let d2 = u * u + v * v;
            d2 <= r * r && d2 >= (0.45 * r) * (0.45 * r)
        }
        _ => v.abs() <= 0.28 * r && u.abs() <= r,
    }
}

/// Pattern modulation at a supersampled pixel: true = primary color,
/// false = darkened secondary.
fn pattern_primary(pattern: usize, x: usize, y: usize, period: usize, phase: usize) -> bool {
    match pattern {
        0 => true,
        1 => ((x + y + phase) / period) % 2 == 0,
        2 => {
            let cx = (x + phase) % period;
            let cy = (y + phase) % period;
            let h = period as f64 / 2.0;
            let (dx, dy) = (cx as f64 - h, cy as f64 - h);
            (dx * dx + dy * dy).sqrt() > period as f64 * 0.32
        }
        _ => ((x + phase) / period + (y + phase) / period) % 2 == 0,
    }
}

/// Render the canonical (domain-independent) image for a content id.
pub fn render_canonical(spec: &SynthSpec, id: u32) -> Vec<f64> {
    let class = (id as usize) / spec.samples_per_class_per_domain;
    let (shape, color, pattern) = class_attrs(class);
    let rgb = COLORS[color].1;
    let geom = geometry(spec.seed, id);
    let s = spec.image_size;
    let ss = s * SS;
    let period = (ss / 8).max(2);

    let mut hi = vec![BACKGROUND; 3 * ss * ss];
    for y in 0..ss {
        for x in 0..ss {
            let u = (((x as f64 + 0.5) / ss as f64) * 2.0 - 1.0 - geom.dx) / geom.scale;
            let v = (((y as f64 + 0.5) / ss as f64) * 2.0 - 1.0 - geom.dy) / geom.scale;
            if shape_mask(shape, u, v) {
                let f = if pattern_primary(pattern, x, y, period, geom.phase) { 1.0 } else { 0.35 };
                for c in 0..3 {
                    hi[c * ss * ss + y * ss + x] = (rgb[c] * f).clamp(0.0, 1.0);
                }
            }
        }
    }

    // Box-average the supersampled planes down to the target size.
    let mut img = vec![0.0; 3 * s * s];
    let inv = 1.0 / (SS * SS) as f64;
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for sy in 0..SS {
                    for sx in 0..SS {
                        acc += hi[c * ss * ss + (y * SS + sy) * ss + (x * SS + sx)];
                    }
                }
                img[c * s * s + y * s + x] = acc * inv;
            }
        }
    }
    img
}

/// Standard normal via Box–Muller on the given stream.
fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Apply the style transform of `domain` to a canonical image.
fn apply_domain(spec: &SynthSpec, id: u32, domain: usize, img: &[f64]) -> Vec<f64> {
    let s = spec.image_size;
    let plane = s * s;
    match domain {
        0 => img.to_vec(),
        1 => {
            // Rotate channels: (r, g, b) <- (g, b, r).
            let mut out = vec![0.0; img.len()];
            out[..plane].copy_from_slice(&img[plane..2 * plane]);
            out[plane..2 * plane].copy_from_slice(&img[2 * plane..]);
            out[2 * plane..].copy_from_slice(&img[..plane]);
            out
        }
        2 => {
            // Diagonal stripe overlay, multiplicative so values stay in range.
            let period = (s / 6).max(2);
            let mut out = img.to_vec();
            for y in 0..s {
                for x in 0..s {
                    if ((x + 2 * y) / period) % 2 == 1 {
                        for c in 0..3 {
                            out[c * plane + y * s + x] *= 0.55;
                        }
                    }
                }
            }
            out
        }
        3 => img.iter().map(|&v| 1.0 - v).collect(),
        _ => {
            let mut rng = component_rng(spec.seed, &format!("synth-noise-{id}"));
            img.iter().map(|&v| (v + 0.1 * gauss(&mut rng)).clamp(0.0, 1.0)).collect()
        }
    }
}

fn size_word(scale: f64) -> &'static str {
    if scale < 0.84 {
        "small"
    } else if scale < 0.95 {
        "medium"
    } else {
        "large"
    }
}

fn position_phrase(dx: f64, dy: f64) -> &'static str {
    if dx.abs() < 0.04 && dy.abs() < 0.04 {
        "near the center"
    } else if dx.abs() >= dy.abs() {
        if dx < 0.0 { "toward the left" } else { "toward the right" }
    } else if dy < 0.0 {
        "toward the top"
    } else {
        "toward the bottom"
    }
}

/// The canonical class sentence (texts index 0).
pub fn class_sentence(class: usize) -> String {
    let (shape, color, pattern) = class_attrs(class);
    format!("a {} {} {}", COLORS[color].0, PATTERNS[pattern], SHAPES[shape])
}

fn id_sentences(class: usize, geom: &Geometry) -> Vec<String> {
    let (shape, color, pattern) = class_attrs(class);
    let (sh, co, pa) = (SHAPES[shape], COLORS[color].0, PATTERNS[pattern]);
    vec![
        class_sentence(class),
        format!("this is a {} {co} {sh} with a {pa} fill", size_word(geom.scale)),
        format!(
            "a {} {pa} {sh} in {co} {}",
            size_word(geom.scale),
            position_phrase(geom.dx, geom.dy)
        ),
    ]
}

/// Generate the full dataset described by `spec`.
pub fn generate(spec: &SynthSpec) -> Result<MultiDomainDataset> {
    spec.validate()?;
    let n = spec.samples_per_class_per_domain;
    let mut samples = Vec::with_capacity(spec.num_classes * n * spec.num_domains);
    for class in 0..spec.num_classes {
        for j in 0..n {
            let id = (class * n + j) as u32;
            let canonical = render_canonical(spec, id);
            let texts = id_sentences(class, &geometry(spec.seed, id));
            for domain in 0..spec.num_domains {
                samples.push(Sample {
                    id,
                    domain: domain as u16,
                    label: class as u16,
                    image: apply_domain(spec, id, domain, &canonical),
                    texts: texts.clone(),
                });
            }
        }
    }
    MultiDomainDataset::new(
        samples,
        spec.num_classes,
        spec.num_domains,
        (0..spec.num_classes).map(|k| {
            let (shape, color, pattern) = class_attrs(k);
            format!("{} {} {}", COLORS[color].0, PATTERNS[pattern], SHAPES[shape])
        }).collect(),
        DOMAIN_NAMES[..spec.num_domains].iter().map(|s| s.to_string()).collect(),
        3,
        spec.image_size,
        spec.image_size,
        Some(spec.clone()),
    )
}
