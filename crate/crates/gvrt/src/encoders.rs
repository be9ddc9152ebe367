//! Visual encoder, joint-space projection heads, and sentence-pivot encoders.
//!
//! The visual path maps an image to a feature `x` (global-average-pooled conv
//! features) plus class logits. The projection heads place visual features and
//! sentence embeddings into a shared joint space: `g_proj` for vision,
//! `f_proj` for text, and a small classifier on the projected visual feature
//! whose cross-entropy keeps the joint space from collapsing to a point.
//!
//! Sentence pivots come in two flavors: a frozen, parameter-free hashed
//! bag-of-words encoder (the stand-in for a large pretrained text tower), or
//! the description generator's own first-layer hidden state after a
//! teacher-forced pass (self-supervised), detached so the alignment loss
//! cannot drag the generator.

use rand::Rng;

use crate::error::{GvrtError, Result};
use crate::explainer::ExplanationGenerator;
use crate::nn::{self, Conv2d, Linear, Param};
use crate::rng::{component_rng, stable_hash64};

// ── Visual encoder ──────────────────────────────────────────────────────────

/// Three stride-2 conv blocks with ReLU, global average pool to `D` features,
/// and a linear classifier head.
pub struct VisualEncoder {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub head: Linear,
    pub image_size: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

/// Cached activations from one forward pass, consumed by `backward`.
pub struct VisualPass {
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
    pub batch: usize,
    a1: Vec<f64>,
    a2: Vec<f64>,
    a3: Vec<f64>,
    c1: crate::nn::conv::ConvCache,
    c2: crate::nn::conv::ConvCache,
    c3: crate::nn::conv::ConvCache,
    dropout: Option<Vec<f64>>,
}

impl VisualEncoder {
    pub fn new(image_size: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        Self::with_widths(image_size, num_classes, 16, 32, 128, rng)
    }

    /// Explicit channel widths, for scaled-down experiment footprints.
    pub fn with_widths(
        image_size: usize,
        num_classes: usize,
        ch1: usize,
        ch2: usize,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        VisualEncoder {
            conv1: Conv2d::new(3, ch1, 3, 2, 1, rng),
            conv2: Conv2d::new(ch1, ch2, 3, 2, 1, rng),
            conv3: Conv2d::new(ch2, feature_dim, 3, 2, 1, rng),
            head: Linear::new(feature_dim, num_classes, rng),
            image_size,
            feature_dim,
            num_classes,
        }
    }

    /// Images (`batch × 3 × S × S`) → cached pass with features and logits.
    pub fn forward(&self, images: &[f64], batch: usize) -> Result<VisualPass> {
        self.forward_train(images, batch, None)
    }

    /// Training-time forward: an optional inverted-dropout mask (`batch ×
    /// feature_dim`, entries 0 or 1/(1−p)) multiplies the pooled features
    /// before every consumer — classifier head and projections alike see the
    /// dropped features.
    pub fn forward_train(
        &self,
        images: &[f64],
        batch: usize,
        dropout_mask: Option<&[f64]>,
    ) -> Result<VisualPass> {
        let s = self.image_size;
        if images.len() != batch * 3 * s * s {
            return Err(GvrtError::Config(format!(
                "image batch has {} values, expected {} ({}x3x{}x{})",
                images.len(),
                batch * 3 * s * s,
                batch,
                s,
                s
            )));
        }
        let s1 = self.conv1.out_size(s);
        let s2 = self.conv2.out_size(s1);
        let s3 = self.conv3.out_size(s2);

        let (mut a1, c1) = self.conv1.forward(images, batch, s, s);
        nn::relu(&mut a1);
        let (mut a2, c2) = self.conv2.forward(&a1, batch, s1, s1);
        nn::relu(&mut a2);
        let (mut a3, c3) = self.conv3.forward(&a2, batch, s2, s2);
        nn::relu(&mut a3);

        // Global average pool over the final spatial grid.
        let d = self.feature_dim;
        let plane = s3 * s3;
        let mut features = vec![0.0; batch * d];
        let inv = 1.0 / plane as f64;
        for b in 0..batch {
            for ch in 0..d {
                let start = (b * d + ch) * plane;
                features[b * d + ch] = a3[start..start + plane].iter().sum::<f64>() * inv;
            }
        }
        let dropout = dropout_mask.map(|m| {
            assert_eq!(m.len(), batch * d, "dropout mask must cover batch x feature_dim");
            for (f, &k) in features.iter_mut().zip(m) {
                *f *= k;
            }
            m.to_vec()
        });
        let logits = self.head.forward(&features);
        Ok(VisualPass { features, logits, batch, a1, a2, a3, c1, c2, c3, dropout })
    }

    /// Backward from gradients on features and logits; accumulates parameter
    /// gradients. `dfeatures` covers every consumer of `x` other than the
    /// classifier head (projection, generator conditioning).
    pub fn backward(&mut self, pass: &VisualPass, dfeatures: &[f64], dlogits: &[f64]) {
        let batch = pass.batch;
        let d = self.feature_dim;
        let s3 = self.conv3.out_size(self.conv2.out_size(self.conv1.out_size(self.image_size)));
        let plane = s3 * s3;

        let mut dx = self.head.backward(&pass.features, dlogits);
        for (g, &extra) in dx.iter_mut().zip(dfeatures) {
            *g += extra;
        }
        if let Some(mask) = &pass.dropout {
            for (g, &k) in dx.iter_mut().zip(mask) {
                *g *= k;
            }
        }

        // Un-pool: spread each feature gradient uniformly over its plane.
        let mut da3 = vec![0.0; batch * d * plane];
        let inv = 1.0 / plane as f64;
        for b in 0..batch {
            for ch in 0..d {
                let g = dx[b * d + ch] * inv;
                let start = (b * d + ch) * plane;
                for v in &mut da3[start..start + plane] {
                    *v = g;
                }
            }
        }
        nn::relu_backward(&pass.a3, &mut da3);
        let mut da2 = self.conv3.backward(&pass.c3, &da3);
        nn::relu_backward(&pass.a2, &mut da2);
        let mut da1 = self.conv2.backward(&pass.c2, &da2);
        nn::relu_backward(&pass.a1, &mut da1);
        self.conv1.backward(&pass.c1, &da1);
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    /// The conv stem — the "pretrained backbone" analogue, trained at the
    /// lower learning rate.
    pub fn backbone_params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.conv3.weight,
            &mut self.conv3.bias,
        ]
    }

    /// The replaced classifier head — a freshly introduced module, trained at
    /// the higher learning rate.
    pub fn head_params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.head.weight, &mut self.head.bias]
    }

    /// Both groups in one borrow: `(conv stem, classifier head)`.
    pub fn grouped_params_mut(&mut self) -> (Vec<&mut Param>, Vec<&mut Param>) {
        (
            vec![
                &mut self.conv1.weight,
                &mut self.conv1.bias,
                &mut self.conv2.weight,
                &mut self.conv2.bias,
                &mut self.conv3.weight,
                &mut self.conv3.bias,
            ],
            vec![&mut self.head.weight, &mut self.head.bias],
        )
    }
}

/// Contract-level forward: feature matrix and per-class probabilities.
pub fn visual_forward(encoder: &VisualEncoder, images: &[f64], batch: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let pass = encoder.forward(images, batch)?;
    let yhat = nn::softmax(&pass.logits, encoder.num_classes);
    Ok((pass.features, yhat))
}

// ── Projection heads ────────────────────────────────────────────────────────

/// Affine maps into the shared joint space plus the anti-collapse classifier.
pub struct ProjectionHeads {
    /// Visual: `feature_dim → d_joint`.
    pub g_proj: Linear,
    /// Text: `d_text → d_joint`.
    pub f_proj: Linear,
    /// Joint-space classifier producing the auxiliary prediction.
    pub classifier: Linear,
    pub d_joint: usize,
}

impl ProjectionHeads {
    pub fn new(feature_dim: usize, d_text: usize, d_joint: usize, num_classes: usize, rng: &mut impl Rng) -> Self {
        ProjectionHeads {
            g_proj: Linear::new(feature_dim, d_joint, rng),
            f_proj: Linear::new(d_text, d_joint, rng),
            classifier: Linear::new(d_joint, num_classes, rng),
            d_joint,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.g_proj.weight,
            &mut self.g_proj.bias,
            &mut self.f_proj.weight,
            &mut self.f_proj.bias,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
        ]
    }
}

/// Project visual features and classify them in the joint space.
pub fn project_and_classify(heads: &ProjectionHeads, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() % heads.g_proj.in_dim != 0 {
        return Err(GvrtError::Config(format!(
            "feature width {} not divisible by g_proj input dim {}",
            x.len(),
            heads.g_proj.in_dim
        )));
    }
    let g_x = heads.g_proj.forward(x);
    let logits = heads.classifier.forward(&g_x);
    let y_tilde = nn::softmax(&logits, heads.classifier.out_dim);
    Ok((g_x, y_tilde))
}

// ── Sentence pivots ─────────────────────────────────────────────────────────

/// A frozen map from sentences to fixed-size vectors.
pub trait SentenceEncoder: Send + Sync {
    fn d_text(&self) -> usize;
    fn embed(&self, sentence: &str) -> Result<Vec<f64>>;
}

/// Embed a batch of sentences into a `B × d_text` matrix.
pub fn pte_embed(encoder: &dyn SentenceEncoder, sentences: &[String]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(sentences.len() * encoder.d_text());
    for s in sentences {
        out.extend(encoder.embed(s)?);
    }
    Ok(out)
}

/// Parameter-free sentence encoder: each (token, occurrence-index) pair hashes
/// to a bucket with a fixed Gaussian direction; a sentence is the normalized
/// sum of its occurrence vectors. Occurrence indexing keeps repeated words
/// from collapsing — "a a" points elsewhere than "a" even after
/// normalization. Deterministic, frozen, and independent of any training.
pub struct HashedBowEncoder {
    buckets: usize,
    d_text: usize,
    /// `buckets × d_text` fixed random directions.
    projection: Vec<f64>,
}

pub const DEFAULT_PTE_BUCKETS: usize = 4096;
/// Seed for the fixed projection; part of the encoder's identity, not a run seed.
pub const DEFAULT_PTE_SEED: u64 = 17;

impl HashedBowEncoder {
    pub fn new(d_text: usize, buckets: usize, seed: u64) -> Self {
        let mut rng = component_rng(seed, "pte-projection");
        let projection = (0..buckets * d_text)
            .map(|_| {
                // Box–Muller standard normal.
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        HashedBowEncoder { buckets, d_text, projection }
    }
}

impl SentenceEncoder for HashedBowEncoder {
    fn d_text(&self) -> usize {
        self.d_text
    }

    fn embed(&self, sentence: &str) -> Result<Vec<f64>> {
        let tokens = crate::data::text::tokenize(sentence);
        if tokens.is_empty() {
            return Err(GvrtError::Config("cannot embed an empty sentence".into()));
        }
        let mut acc = vec![0.0; self.d_text];
        let mut seen: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
        for tok in &tokens {
            let occurrence = seen.entry(tok.as_str()).or_insert(0);
            let bucket = (stable_hash64(&format!("{tok}\u{1f}{occurrence}")) % self.buckets as u64) as usize;
            *occurrence += 1;
            let row = &self.projection[bucket * self.d_text..(bucket + 1) * self.d_text];
            for (a, &p) in acc.iter_mut().zip(row) {
                *a += p;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for a in &mut acc {
                *a /= norm;
            }
        }
        Ok(acc)
    }
}

/// Look up a pretrained-text-encoder adapter by name.
pub fn pte_adapter(name: &str, d_text: usize) -> Result<Box<dyn SentenceEncoder>> {
    match name {
        "hashed-bow" => Ok(Box::new(HashedBowEncoder::new(d_text, DEFAULT_PTE_BUCKETS, DEFAULT_PTE_SEED))),
        other => Err(GvrtError::Unsupported(format!("unknown text encoder adapter '{other}'"))),
    }
}

/// Self-supervised pivot: run the generator teacher-forced over the gold
/// sentence (conditioned on `g_x` and the category vector) and return the
/// first recurrent layer's final hidden state, detached. Standalone
/// counterpart of the hidden state the training loop reuses from its NLL pass.
pub fn ste_embed(
    generator: &ExplanationGenerator,
    tokens: &[Vec<usize>],
    g_x: &[f64],
    category: &[f64],
) -> Result<Vec<f64>> {
    for seq in tokens {
        if seq.last() != Some(&crate::data::text::EOS) {
            return Err(GvrtError::Config("pivot sequence must end with EOS".into()));
        }
    }
    let pass = generator.teacher_forced(tokens, g_x, category)?;
    Ok(pass.ste_hidden)
}
