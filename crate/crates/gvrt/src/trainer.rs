//! End-to-end optimization: one training step, the fit loop with validation-
//! based checkpoint selection, hyperparameter sampling, and checkpoint
//! persistence.
//!
//! A step runs the visual encoder, projects features into the joint space,
//! embeds the sentence pivot (frozen hashed bag-of-words or the generator's
//! own hidden state), scores the gold sentence, samples a sentence for the
//! reward term, composes the weighted total, and applies one Adam update
//! with two learning-rate groups: the conv stem at the backbone rate, every
//! freshly introduced module (classifier head, projections, generator) at
//! the higher rate. With both loss weights at zero and the text stack
//! disabled, the step is plain empirical risk minimization, bit for bit.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::batch::{eval_batches, Batch, BatchStream, TextMode};
use crate::data::split::SplitPlan;
use crate::data::text::Vocabulary;
use crate::data::MultiDomainDataset;
use crate::encoders::{
    pte_adapter, ProjectionHeads, SentenceEncoder, VisualEncoder,
};
use crate::error::{GvrtError, Result};
use crate::explainer::{
    reward, train_reward_model, ExplanationGenerator, GeneratorConfig, RewardModel,
    RewardModelConfig, RewardTrainMeta,
};
use crate::nn::{self, Adam, AdamConfig, ParamGroup};
use crate::objectives::{self, LossBreakdown, LossInputs};
use crate::rng::component_rng;

// ── Configuration ───────────────────────────────────────────────────────────

/// Which sentence pivot grounds the alignment loss, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    /// Frozen hashed bag-of-words sentence encoder.
    Pte,
    /// The generator's own layer-1 hidden state.
    Ste,
    /// No text stack at all: the plain baseline.
    Erm,
}

/// Which class vector conditions the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CategorySource {
    /// The model's own softmax prediction, detached.
    Pred,
    /// The gold one-hot label.
    Gold,
}

/// Which pass supplies the self-supervised pivot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteSource {
    /// Hidden state after teacher-forcing the gold sentence.
    Gold,
    /// Hidden state after the sampled sentence.
    Sampled,
}

/// Full training configuration. Flat so a JSON config file maps one key to
/// one field and command-line overrides can address any of them.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda_align: f64,
    pub lambda_expl: f64,
    /// Keep the classification term on projected features that stops the
    /// joint space from collapsing; turning it off is an ablation switch.
    pub align_use_ce: bool,
    pub steps: usize,
    pub batch_per_domain: usize,
    pub eval_interval: usize,
    pub lr_backbone: f64,
    pub lr_new: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub encoder_mode: EncoderMode,
    pub text_mode: TextMode,
    pub category_source: CategorySource,
    /// When true (default) the pivot is a constant to the alignment loss.
    pub ste_detach: bool,
    pub ste_source: SteSource,
    /// Exponential-moving-average reward baseline for variance reduction.
    pub reinforce_baseline: bool,
    pub baseline_decay: f64,
    pub image_size: usize,
    pub conv_channels_1: usize,
    pub conv_channels_2: usize,
    pub feature_dim: usize,
    pub d_joint: usize,
    pub d_text: usize,
    pub pte_adapter: String,
    pub gen_embed_dim: usize,
    pub gen_hidden: usize,
    pub max_len: usize,
    pub min_freq: usize,
    pub reward_epochs: usize,
    pub reward_lr: f64,
    pub reward_target_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_align: 1.0,
            lambda_expl: 1.0,
            align_use_ce: true,
            steps: 5000,
            batch_per_domain: 32,
            eval_interval: 100,
            lr_backbone: 5e-5,
            lr_new: 5e-4,
            weight_decay: 0.0,
            dropout: 0.0,
            grad_clip: 0.0,
            encoder_mode: EncoderMode::Pte,
            text_mode: TextMode::PerImage,
            category_source: CategorySource::Pred,
            ste_detach: true,
            ste_source: SteSource::Gold,
            reinforce_baseline: false,
            baseline_decay: 0.9,
            image_size: 32,
            conv_channels_1: 16,
            conv_channels_2: 32,
            feature_dim: 128,
            d_joint: 64,
            d_text: 256,
            pte_adapter: "hashed-bow".into(),
            gen_embed_dim: 32,
            gen_hidden: 64,
            max_len: 20,
            min_freq: 1,
            reward_epochs: 300,
            reward_lr: 0.05,
            reward_target_accuracy: 0.95,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reject invalid settings, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(GvrtError::Config(format!("{key}: {why}")));
        if self.steps < 1 {
            return bad("steps", format!("must be >= 1, got {}", self.steps));
        }
        if self.batch_per_domain < 1 {
            return bad("batch_per_domain", format!("must be >= 1, got {}", self.batch_per_domain));
        }
        if self.eval_interval < 1 {
            return bad("eval_interval", format!("must be >= 1, got {}", self.eval_interval));
        }
        if !(self.lr_backbone > 0.0) {
            return bad("lr_backbone", format!("must be > 0, got {}", self.lr_backbone));
        }
        if !(self.lr_new > 0.0) {
            return bad("lr_new", format!("must be > 0, got {}", self.lr_new));
        }
        if self.lambda_align < 0.0 || !self.lambda_align.is_finite() {
            return bad("lambda_align", format!("must be a finite value >= 0, got {}", self.lambda_align));
        }
        if self.lambda_expl < 0.0 || !self.lambda_expl.is_finite() {
            return bad("lambda_expl", format!("must be a finite value >= 0, got {}", self.lambda_expl));
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", format!("must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", format!("must be in [0, 1), got {}", self.dropout));
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip", format!("must be >= 0 (0 disables), got {}", self.grad_clip));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return bad("baseline_decay", format!("must be in [0, 1), got {}", self.baseline_decay));
        }
        if self.encoder_mode == EncoderMode::Erm
            && (self.lambda_align != 0.0 || self.lambda_expl != 0.0)
        {
            return bad(
                "encoder_mode",
                format!(
                    "erm disables the text stack, so lambda_align and lambda_expl must be 0 \
                     (got {} and {})",
                    self.lambda_align, self.lambda_expl
                ),
            );
        }
        if self.max_len < 1 {
            return bad("max_len", format!("must be >= 1, got {}", self.max_len));
        }
        if self.image_size < 8 {
            return bad("image_size", format!("must be >= 8, got {}", self.image_size));
        }
        Ok(())
    }

    fn uses_text(&self) -> bool {
        self.encoder_mode != EncoderMode::Erm
            && (self.lambda_align > 0.0 || self.lambda_expl > 0.0)
    }

    fn generator_trains(&self) -> bool {
        self.encoder_mode != EncoderMode::Erm
            && (self.lambda_expl > 0.0
                || (self.encoder_mode == EncoderMode::Ste
                    && self.lambda_align > 0.0
                    && !self.ste_detach))
    }
}

// ── Hyperparameter search draws ─────────────────────────────────────────────

/// One random-search draw. Supports: lr ∈ 5·10^U(−5,−4); weight decay ∈
/// 10^U(−4,−3); dropout ∈ {0, 0.1, 0.5}; per-domain batch ∈ round(2^U(5,5.5)).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HPDraw {
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch: usize,
}

impl HPDraw {
    /// Write this draw into a config. The drawn lr drives the backbone; the
    /// fresh-module rate keeps the default 10× ratio above it.
    pub fn apply(&self, cfg: &mut TrainConfig) {
        cfg.lr_backbone = self.lr;
        cfg.lr_new = self.lr * 10.0;
        cfg.weight_decay = self.weight_decay;
        cfg.dropout = self.dropout;
        cfg.batch_per_domain = self.batch;
    }
}

/// Deterministic random-search draws from the documented distributions.
pub fn sample_hyperparameters(seed: u64, n: usize) -> Vec<HPDraw> {
    let mut rng = component_rng(seed, "hp-search");
    (0..n)
        .map(|_| {
            let lr = 5.0 * 10f64.powf(rng.gen_range(-5.0..-4.0));
            let weight_decay = 10f64.powf(rng.gen_range(-4.0..-3.0));
            let dropout = [0.0, 0.1, 0.5][rng.gen_range(0..3)];
            let batch = (2f64.powf(rng.gen_range(5.0..5.5))).round() as usize;
            HPDraw { lr, weight_decay, dropout, batch }
        })
        .collect()
}

// ── Model state ─────────────────────────────────────────────────────────────

/// Everything trainable (plus the frozen pieces) for one run. Text-side
/// modules exist only when the configuration can use them, so a plain
/// baseline run never even constructs them.
pub struct ModelState {
    pub encoder: VisualEncoder,
    pub heads: Option<ProjectionHeads>,
    pub generator: Option<ExplanationGenerator>,
    pub reward_model: Option<RewardModel>,
    pub pte: Option<Box<dyn SentenceEncoder>>,
    pub vocab: Vocabulary,
    pub num_classes: usize,
    /// EMA reward baseline state.
    pub baseline: f64,
    pub baseline_ready: bool,
}

impl ModelState {
    /// Build modules per the configuration. The reward model is trained
    /// separately (see [`fit`]) because it needs the gold corpus.
    pub fn new(cfg: &TrainConfig, vocab: Vocabulary, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut enc_rng = component_rng(cfg.seed, "encoder-init");
        let encoder = VisualEncoder::with_widths(
            cfg.image_size,
            num_classes,
            cfg.conv_channels_1,
            cfg.conv_channels_2,
            cfg.feature_dim,
            &mut enc_rng,
        );
        let d_text = match cfg.encoder_mode {
            EncoderMode::Pte => cfg.d_text,
            EncoderMode::Ste => cfg.gen_hidden,
            EncoderMode::Erm => 0,
        };
        let heads = if cfg.uses_text() {
            let mut rng = component_rng(cfg.seed, "heads-init");
            Some(ProjectionHeads::new(cfg.feature_dim, d_text, cfg.d_joint, num_classes, &mut rng))
        } else {
            None
        };
        let generator = if cfg.uses_text() {
            let mut rng = component_rng(cfg.seed, "generator-init");
            let mut gen_cfg = GeneratorConfig::new(vocab.size(), cfg.d_joint, num_classes);
            gen_cfg.embed_dim = cfg.gen_embed_dim;
            gen_cfg.hidden = cfg.gen_hidden;
            gen_cfg.max_len = cfg.max_len;
            Some(ExplanationGenerator::new(gen_cfg, &mut rng))
        } else {
            None
        };
        let pte = if cfg.uses_text() && cfg.encoder_mode == EncoderMode::Pte {
            Some(pte_adapter(&cfg.pte_adapter, cfg.d_text)?)
        } else {
            None
        };
        Ok(ModelState {
            encoder,
            heads,
            generator,
            reward_model: None,
            pte,
            vocab,
            num_classes,
            baseline: 0.0,
            baseline_ready: false,
        })
    }

    /// Clone every parameter tensor in canonical order (encoder, then heads,
    /// then generator, by presence).
    pub fn snapshot(&mut self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for p in self.encoder.params_mut() {
            out.push(p.value.clone());
        }
        if let Some(h) = &mut self.heads {
            for p in h.params_mut() {
                out.push(p.value.clone());
            }
        }
        if let Some(g) = &mut self.generator {
            for p in g.params_mut() {
                out.push(p.value.clone());
            }
        }
        out
    }

    /// Restore a snapshot taken from an identically shaped state.
    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        let mut params: Vec<&mut nn::Param> = Vec::new();
        params.extend(self.encoder.params_mut());
        if let Some(h) = &mut self.heads {
            params.extend(h.params_mut());
        }
        if let Some(g) = &mut self.generator {
            params.extend(g.params_mut());
        }
        if params.len() != snapshot.len() {
            return Err(GvrtError::Format {
                path: "<snapshot>".into(),
                reason: format!("{} tensors, model has {}", snapshot.len(), params.len()),
            });
        }
        for (p, s) in params.iter_mut().zip(snapshot) {
            if p.value.len() != s.len() {
                return Err(GvrtError::Format {
                    path: "<snapshot>".into(),
                    reason: format!("tensor of {} values, model expects {}", s.len(), p.value.len()),
                });
            }
            p.value.copy_from_slice(s);
        }
        Ok(())
    }
}

/// Independent random streams consumed inside a training step.
pub struct TrainStreams {
    pub dropout: ChaCha8Rng,
    pub sampler: ChaCha8Rng,
}

impl TrainStreams {
    pub fn new(seed: u64) -> Self {
        TrainStreams {
            dropout: component_rng(seed, "dropout"),
            sampler: component_rng(seed, "sampler"),
        }
    }
}

// ── One training step ───────────────────────────────────────────────────────

fn gather_images(ds: &MultiDomainDataset, indices: &[usize]) -> (Vec<f64>, Vec<u16>) {
    let per = ds.channels * ds.height * ds.width;
    let mut images = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &ds.samples[i];
        images.extend_from_slice(&s.image);
        labels.push(s.label);
    }
    (images, labels)
}

fn one_hot(labels: &[u16], num_classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; labels.len() * num_classes];
    for (b, &y) in labels.iter().enumerate() {
        out[b * num_classes + y as usize] = 1.0;
    }
    out
}

/// Collect the optimizer's parameter list in a run-stable order. Which
/// modules appear is decided by the configuration (not by per-step values),
/// so optimizer slots stay aligned across every step of a run.
fn optimizer_params<'a>(
    state: &'a mut ModelState,
    cfg: &TrainConfig,
) -> Vec<(&'a mut nn::Param, ParamGroup)> {
    let mut list: Vec<(&mut nn::Param, ParamGroup)> = Vec::new();
    let (backbone, head) = state.encoder.grouped_params_mut();
    for p in backbone {
        list.push((p, ParamGroup::Backbone));
    }
    for p in head {
        list.push((p, ParamGroup::New));
    }
    if cfg.uses_text() {
        if let Some(h) = &mut state.heads {
            for p in h.params_mut() {
                list.push((p, ParamGroup::New));
            }
        }
    }
    if cfg.generator_trains() {
        if let Some(g) = &mut state.generator {
            for p in g.params_mut() {
                list.push((p, ParamGroup::New));
            }
        }
    }
    list
}

fn clip_gradients(params: &mut [(&mut nn::Param, ParamGroup)], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let mut sq = 0.0;
    for (p, _) in params.iter() {
        for &g in &p.grad {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (p, _) in params.iter_mut() {
            for g in &mut p.grad {
                *g *= scale;
            }
        }
    }
}

/// One optimization step over one batch. Returns the per-term losses.
///
/// `step` only labels diagnostics. Non-finite totals abort with a snapshot of
/// every term in the error message.
pub fn train_step(
    state: &mut ModelState,
    opt: &mut Adam,
    ds: &MultiDomainDataset,
    batch: &Batch,
    cfg: &TrainConfig,
    streams: &mut TrainStreams,
    step: u64,
) -> Result<LossBreakdown> {
    let b = batch.indices.len();
    let k = state.num_classes;
    let (images, labels) = gather_images(ds, &batch.indices);

    // Dropout mask on pooled features (inverted scaling), training only.
    let mask: Option<Vec<f64>> = if cfg.dropout > 0.0 {
        let keep = 1.0 - cfg.dropout;
        Some(
            (0..b * cfg.feature_dim)
                .map(|_| if streams.dropout.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        )
    } else {
        None
    };

    let pass = state.encoder.forward_train(&images, b, mask.as_deref())?;
    let (task, dlogits_task, floored) = objectives::task_loss_from_logits(&pass.logits, k, &labels);

    let mut inputs = LossInputs { task, ..Default::default() };
    let mut d_features = vec![0.0; b * cfg.feature_dim];

    if cfg.uses_text() {
        let heads = state.heads.as_mut().expect("text mode constructs heads");
        let generator = state.generator.as_mut().expect("text mode constructs generator");

        // Joint-space projection of the (possibly dropped) visual features.
        let g_x = heads.g_proj.forward(&pass.features);
        let cls_logits = heads.classifier.forward(&g_x);

        // Category conditioning: detached prediction or gold one-hot.
        let category = match cfg.category_source {
            CategorySource::Pred => nn::softmax(&pass.logits, k),
            CategorySource::Gold => one_hot(&labels, k),
        };

        // Gold sentences as token sequences.
        let tokens: Vec<Vec<usize>> =
            batch.sentences.iter().map(|s| state.vocab.encode(s)).collect();

        let need_teacher = cfg.lambda_expl > 0.0
            || (cfg.encoder_mode == EncoderMode::Ste && cfg.ste_source == SteSource::Gold);
        let need_sampled = cfg.lambda_expl > 0.0
            || (cfg.encoder_mode == EncoderMode::Ste && cfg.ste_source == SteSource::Sampled);

        let teacher_pass = if need_teacher {
            Some(generator.teacher_forced(&tokens, &g_x, &category)?)
        } else {
            None
        };
        let (sampled_tokens, sampled_pass) = if need_sampled {
            let (e, _logprobs, p) =
                generator.sample(&g_x, &category, b, cfg.max_len, &mut streams.sampler)?;
            (e, Some(p))
        } else {
            (Vec::new(), None)
        };

        // Sentence pivot.
        let pivot: Option<Vec<f64>> = if cfg.lambda_align > 0.0 {
            Some(match cfg.encoder_mode {
                EncoderMode::Pte => {
                    let enc = state.pte.as_deref().expect("pte mode constructs the encoder");
                    crate::encoders::pte_embed(enc, &batch.sentences)?
                }
                EncoderMode::Ste => match cfg.ste_source {
                    SteSource::Gold => teacher_pass.as_ref().unwrap().ste_hidden.clone(),
                    SteSource::Sampled => sampled_pass.as_ref().unwrap().ste_hidden.clone(),
                },
                EncoderMode::Erm => unreachable!("erm never reaches the text path"),
            })
        } else {
            None
        };

        // Alignment pair: ℓ2 in the joint space + anti-collapse CE.
        let mut d_gx = vec![0.0; b * cfg.d_joint];
        let mut dv: Option<Vec<f64>> = None;
        let mut dcls: Option<Vec<f64>> = None;
        if let Some(v) = &pivot {
            let projected = heads.f_proj.forward(v);
            let (l2, dproj, dgx_l2) =
                objectives::align_l2_with_grad(&projected, &g_x, cfg.d_joint)?;
            inputs.align_l2 = l2;
            if cfg.align_use_ce {
                let targets: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
                let (ce, dcls_logits) = nn::softmax_xent(&cls_logits, k, &targets);
                inputs.align_ce = ce;
                dcls = Some(dcls_logits.iter().map(|&g| g * cfg.lambda_align).collect());
            }

            let la = cfg.lambda_align;
            let dproj_scaled: Vec<f64> = dproj.iter().map(|&g| g * la).collect();
            let dv_raw = heads.f_proj.backward(v, &dproj_scaled);
            if cfg.encoder_mode == EncoderMode::Ste && !cfg.ste_detach {
                dv = Some(dv_raw);
            }
            for (a, &g) in d_gx.iter_mut().zip(&dgx_l2) {
                *a += la * g;
            }
        }

        // Description pair: gold-sentence NLL and sampled-sentence reward.
        if cfg.lambda_expl > 0.0 {
            let tf = teacher_pass.as_ref().unwrap();
            inputs.expl_nll = tf.nll();
            let rm = state.reward_model.as_ref().ok_or_else(|| {
                GvrtError::Config(
                    "lambda_expl > 0 needs a trained reward model (fit trains one; \
                     construct it before calling train_step directly)"
                        .into(),
                )
            })?;
            let rewards: Vec<f64> = sampled_tokens
                .iter()
                .zip(&labels)
                .map(|(toks, &y)| reward(rm, toks, y as usize))
                .collect();
            inputs.expl_reward = objectives::mean_reward(&rewards);

            let le = cfg.lambda_expl;
            // Teacher-forced NLL backward: every valid step carries −λ/valid.
            let coeff = -le / tf.valid_steps.max(1) as f64;
            let mut dlogp = vec![0.0; b * tf.scored_steps];
            for t in 0..tf.scored_steps {
                for (row, tok) in tokens.iter().enumerate() {
                    if t + 1 < tok.len() {
                        dlogp[row * tf.scored_steps + t] = coeff;
                    }
                }
            }
            let dv_gold = if cfg.ste_source == SteSource::Gold { dv.take() } else { None };
            let back = generator.backward(tf, &dlogp, dv_gold.as_deref());
            for (a, &g) in d_gx.iter_mut().zip(&back.d_gx) {
                *a += g;
            }

            // Policy gradient: each sampled sequence's steps carry
            // −λ(r − baseline)/batch.
            let baseline =
                if cfg.reinforce_baseline && state.baseline_ready { state.baseline } else { 0.0 };
            let sp = sampled_pass.as_ref().unwrap();
            let coeffs = objectives::surrogate_dlogp(&rewards, baseline, b);
            let mut dlogp_s = vec![0.0; b * sp.scored_steps];
            for (row, seq) in sampled_tokens.iter().enumerate() {
                for t in 0..seq.len() {
                    dlogp_s[row * sp.scored_steps + t] = le * coeffs[row];
                }
            }
            let dv_sampled = if cfg.ste_source == SteSource::Sampled { dv.take() } else { None };
            let back_s = generator.backward(sp, &dlogp_s, dv_sampled.as_deref());
            for (a, &g) in d_gx.iter_mut().zip(&back_s.d_gx) {
                *a += g;
            }

            if cfg.reinforce_baseline {
                let d = cfg.baseline_decay;
                state.baseline = if state.baseline_ready {
                    d * state.baseline + (1.0 - d) * inputs.expl_reward
                } else {
                    inputs.expl_reward
                };
                state.baseline_ready = true;
            }
        } else if let Some(dv_only) = dv.take() {
            // Alignment wants gradient through the pivot but no likelihood
            // terms run: backpropagate the pivot path alone.
            let pass_for_pivot = match cfg.ste_source {
                SteSource::Gold => teacher_pass.as_ref().unwrap(),
                SteSource::Sampled => sampled_pass.as_ref().unwrap(),
            };
            let zeros = vec![0.0; b * pass_for_pivot.scored_steps];
            let back = generator.backward(pass_for_pivot, &zeros, Some(&dv_only));
            for (a, &g) in d_gx.iter_mut().zip(&back.d_gx) {
                *a += g;
            }
        }

        if let Some(dcls_logits) = dcls {
            let dgx_cls = heads.classifier.backward(&g_x, &dcls_logits);
            for (a, &g) in d_gx.iter_mut().zip(&dgx_cls) {
                *a += g;
            }
        }
        let dfeat = heads.g_proj.backward(&pass.features, &d_gx);
        for (a, &g) in d_features.iter_mut().zip(&dfeat) {
            *a += g;
        }
    }

    let breakdown = objectives::total_loss(&inputs, cfg.lambda_align, cfg.lambda_expl)?;
    if !breakdown.total.is_finite() {
        return Err(GvrtError::Diverged {
            step: step as usize,
            reason: format!(
                "non-finite total (task {}, align_l2 {}, align_ce {}, expl_nll {}, \
                 expl_reward {}, floored logs {})",
                breakdown.task,
                breakdown.align_l2,
                breakdown.align_ce,
                breakdown.expl_nll,
                breakdown.expl_reward,
                floored
            ),
        });
    }

    state.encoder.backward(&pass, &d_features, &dlogits_task);

    let mut params = optimizer_params(state, cfg);
    clip_gradients(&mut params, cfg.grad_clip);
    opt.step(&mut params);
    for (p, _) in params {
        p.zero_grad();
    }
    Ok(breakdown)
}

// ── Evaluation helper ───────────────────────────────────────────────────────

/// Accuracy of the current encoder over fixed id lists, pooled across the
/// given (domain, ids) sets. Dropout is never applied here.
pub fn accuracy_on(
    state: &ModelState,
    ds: &MultiDomainDataset,
    sets: &[(u16, &[u32])],
    batch_size: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for &(domain, ids) in sets {
        for chunk in eval_batches(ds, ids, domain, batch_size)? {
            let (images, labels) = gather_images(ds, &chunk);
            let pass = state.encoder.forward(&images, chunk.len())?;
            for (row, &y) in pass.logits.chunks(state.num_classes).zip(&labels) {
                if nn::argmax(row) == y as usize {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(GvrtError::Config("accuracy over an empty id set".into()));
    }
    Ok(correct as f64 / total as f64)
}

// ── Checkpoints and model selection ─────────────────────────────────────────

/// A parameter snapshot tagged with its selection score.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub val_accuracy: f64,
    pub params: Vec<Vec<f64>>,
}

/// Argmax of source-validation accuracy; ties resolve to the later step.
pub fn select_model(checkpoints: &[Checkpoint]) -> Result<&Checkpoint> {
    let mut best = checkpoints
        .first()
        .ok_or_else(|| GvrtError::Config("select_model needs at least one checkpoint".into()))?;
    for c in &checkpoints[1..] {
        if c.val_accuracy >= best.val_accuracy {
            best = c;
        }
    }
    Ok(best)
}

const CKPT_MAGIC: &[u8; 4] = b"GVCK";
const CKPT_VERSION: u32 = 1;

/// Versioned little-endian binary checkpoint.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&ckpt.val_accuracy.to_le_bytes());
    buf.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for tensor in &ckpt.params {
        buf.extend_from_slice(&(tensor.len() as u64).to_le_bytes());
        for &v in tensor {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| GvrtError::io(path, e))?;
    f.write_all(&buf).map_err(|e| GvrtError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| GvrtError::io(path, e))?;
    let fail = |reason: &str| GvrtError::Format { path: path.into(), reason: reason.into() };
    if raw.len() < 24 || &raw[..4] != CKPT_MAGIC {
        return Err(fail("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(fail(&format!("unsupported checkpoint version {version}")));
    }
    let step = u64::from_le_bytes(raw[8..16].try_into().unwrap());
    let val_accuracy = f64::from_le_bytes(raw[16..24].try_into().unwrap());
    let n = u32::from_le_bytes(raw[24..28].try_into().unwrap()) as usize;
    let mut off = 28;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        if off + 8 > raw.len() {
            return Err(fail("truncated tensor header"));
        }
        let len = u64::from_le_bytes(raw[off..off + 8].try_into().unwrap()) as usize;
        off += 8;
        if off + len * 8 > raw.len() {
            return Err(fail("truncated tensor payload"));
        }
        let mut tensor = Vec::with_capacity(len);
        for i in 0..len {
            tensor.push(f64::from_le_bytes(raw[off + i * 8..off + i * 8 + 8].try_into().unwrap()));
        }
        off += len * 8;
        params.push(tensor);
    }
    if off != raw.len() {
        return Err(fail("trailing bytes after last tensor"));
    }
    Ok(Checkpoint { step, val_accuracy, params })
}

// ── The fit loop ────────────────────────────────────────────────────────────

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

/// Everything `fit` produces.
pub struct FitResult {
    /// Selected (best source-validation accuracy) checkpoint.
    pub best: Checkpoint,
    pub log: Vec<LogRecord>,
    /// Final-step model state (not necessarily the selected parameters).
    pub state: ModelState,
    pub warnings: Vec<String>,
    pub reward_meta: Option<RewardTrainMeta>,
}

/// Sentences of all training-split samples in source domains, with labels —
/// the corpus for both the vocabulary and the reward model.
fn training_corpus(ds: &MultiDomainDataset, plan: &SplitPlan) -> (Vec<String>, Vec<u16>) {
    let mut sentences = Vec::new();
    let mut labels = Vec::new();
    for &d in &plan.sources() {
        for &id in &plan.domains[d as usize].train {
            if let Some(s) = ds.get(id, d) {
                for text in &s.texts {
                    sentences.push(text.clone());
                    labels.push(s.label);
                }
            }
        }
    }
    (sentences, labels)
}

/// Build the vocabulary, model state, and (when the description loss is on)
/// the frozen reward model for this config and split — everything [`fit`]
/// needs before step 1. Deterministic given the config, dataset, and plan, so
/// a finished run's modules can be reconstructed exactly to load a checkpoint
/// into.
pub fn prepare_state(
    cfg: &TrainConfig,
    ds: &MultiDomainDataset,
    plan: &SplitPlan,
) -> Result<(ModelState, Option<RewardTrainMeta>, Vec<String>)> {
    cfg.validate()?;
    if plan.domains.len() != ds.num_domains {
        return Err(GvrtError::Config(format!(
            "split plan covers {} domains, dataset has {}",
            plan.domains.len(),
            ds.num_domains
        )));
    }
    if ds.height != cfg.image_size || ds.width != cfg.image_size {
        return Err(GvrtError::Config(format!(
            "image_size: config says {}, dataset was rendered at {}x{}",
            cfg.image_size, ds.height, ds.width
        )));
    }

    let mut warnings = Vec::new();
    let (corpus, corpus_labels) = training_corpus(ds, plan);
    let vocab = Vocabulary::build(&corpus, cfg.min_freq);
    let mut state = ModelState::new(cfg, vocab, ds.num_classes)?;

    // Reward model: pre-trained once on the gold corpus, then frozen.
    let mut reward_meta = None;
    if cfg.uses_text() && cfg.lambda_expl > 0.0 {
        let sequences: Vec<Vec<usize>> =
            corpus.iter().map(|s| state.vocab.encode(s)).collect();
        let rm = train_reward_model(
            &sequences,
            &corpus_labels,
            state.vocab.size(),
            state.num_classes,
            &RewardModelConfig {
                embed_dim: cfg.gen_embed_dim,
                max_epochs: cfg.reward_epochs,
                lr: cfg.reward_lr,
                target_accuracy: cfg.reward_target_accuracy,
                seed: cfg.seed,
            },
        )?;
        if !rm.meta.converged {
            warnings.push(format!(
                "reward model stopped at train accuracy {:.3} after {} epochs \
                 (target {}); frozen as-is",
                rm.meta.train_accuracy, rm.meta.epochs, cfg.reward_target_accuracy
            ));
        }
        reward_meta = Some(rm.meta.clone());
        state.reward_model = Some(rm);
    }
    Ok((state, reward_meta, warnings))
}

/// Train for `cfg.steps` steps, evaluating source-validation accuracy every
/// `cfg.eval_interval` steps (and at the final step), and return the
/// checkpoint with the highest validation accuracy (ties → later step).
pub fn fit(cfg: &TrainConfig, ds: &MultiDomainDataset, plan: &SplitPlan) -> Result<FitResult> {
    let (mut state, reward_meta, mut warnings) = prepare_state(cfg, ds, plan)?;

    let mut stream =
        BatchStream::new(ds, plan, cfg.batch_per_domain, cfg.text_mode, cfg.seed, true)?;
    if stream.wrapped {
        warnings.push(
            "a source train pool is smaller than one per-domain quota; batches wrap".into(),
        );
    }
    let mut opt = Adam::new(AdamConfig {
        lr_backbone: cfg.lr_backbone,
        lr_new: cfg.lr_new,
        weight_decay: cfg.weight_decay,
        ..Default::default()
    });
    let mut streams = TrainStreams::new(cfg.seed);

    let sources = plan.sources();
    let val_sets: Vec<(u16, &[u32])> = sources
        .iter()
        .map(|&d| (d, plan.domains[d as usize].val.as_slice()))
        .filter(|(_, ids)| !ids.is_empty())
        .collect();
    let eval_chunk = (cfg.batch_per_domain * sources.len().max(1)).max(32);

    let mut log = Vec::with_capacity(cfg.steps);
    let mut best: Option<Checkpoint> = None;
    for step in 1..=cfg.steps as u64 {
        let batch = stream.next_batch();
        let losses = train_step(&mut state, &mut opt, ds, &batch, cfg, &mut streams, step)?;
        let mut record = LogRecord { step, losses, val_accuracy: None };
        if step % cfg.eval_interval as u64 == 0 || step == cfg.steps as u64 {
            if !val_sets.is_empty() {
                let acc = accuracy_on(&state, ds, &val_sets, eval_chunk)?;
                record.val_accuracy = Some(acc);
                let replace = best
                    .as_ref()
                    .map(|b| acc >= b.val_accuracy)
                    .unwrap_or(true);
                if replace {
                    best = Some(Checkpoint {
                        step,
                        val_accuracy: acc,
                        params: state.snapshot(),
                    });
                }
            }
        }
        log.push(record);
    }

    let best = match best {
        Some(b) => b,
        None => {
            warnings.push(
                "validation set is empty; falling back to the final checkpoint".into(),
            );
            Checkpoint { step: cfg.steps as u64, val_accuracy: f64::NAN, params: state.snapshot() }
        }
    };
    Ok(FitResult { best, log, state, warnings, reward_meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split::{build_split_plan, SplitMode};
    use crate::data::synth::{generate, SynthSpec};

    fn tiny_dataset() -> (MultiDomainDataset, SplitPlan) {
        let ds = generate(&SynthSpec {
            num_classes: 2,
            num_domains: 3,
            image_size: 16,
            samples_per_class_per_domain: 12,
            seed: 3,
        })
        .unwrap();
        let plan = build_split_plan(&ds, SplitMode::MultiSource, &[2], 0.3, 0.25, 0).unwrap();
        (ds, plan)
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch_per_domain: 4,
            eval_interval: 2,
            image_size: 16,
            conv_channels_1: 4,
            conv_channels_2: 6,
            feature_dim: 16,
            d_joint: 8,
            d_text: 32,
            gen_embed_dim: 6,
            gen_hidden: 8,
            max_len: 12,
            lr_backbone: 1e-3,
            lr_new: 1e-2,
            ..Default::default()
        }
    }

    fn erm_cfg() -> TrainConfig {
        TrainConfig {
            lambda_align: 0.0,
            lambda_expl: 0.0,
            encoder_mode: EncoderMode::Erm,
            ..tiny_cfg()
        }
    }

    #[test]
    fn config_validation_names_the_key() {
        let mut cfg = tiny_cfg();
        cfg.lambda_align = -1.0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("lambda_align"), "{err}");

        let mut cfg = tiny_cfg();
        cfg.steps = 0;
        assert!(cfg.validate().unwrap_err().to_string().contains("steps"));

        let mut cfg = erm_cfg();
        cfg.lambda_expl = 0.5;
        assert!(cfg.validate().unwrap_err().to_string().contains("encoder_mode"));
    }

    #[test]
    fn erm_mode_constructs_no_text_modules() {
        let (ds, plan) = tiny_dataset();
        let result = fit(&erm_cfg(), &ds, &plan).unwrap();
        assert!(result.state.heads.is_none());
        assert!(result.state.generator.is_none());
        assert!(result.state.reward_model.is_none());
        assert!(result.state.pte.is_none());
    }

    #[test]
    fn full_mode_runs_and_logs_every_term() {
        let (ds, plan) = tiny_dataset();
        let result = fit(&tiny_cfg(), &ds, &plan).unwrap();
        assert_eq!(result.log.len(), 3);
        let last = &result.log[2];
        assert!(last.losses.task > 0.0);
        assert!(last.losses.align_l2 > 0.0);
        assert!(last.losses.expl_nll > 0.0);
        assert!(last.losses.expl_reward > 0.0 && last.losses.expl_reward <= 1.0);
        let recomposed = last.losses.task
            + (last.losses.align_l2 + last.losses.align_ce)
            + (last.losses.expl_nll - last.losses.expl_reward);
        assert!((last.losses.total - recomposed).abs() < 1e-6);
        // Final step always evaluates.
        assert!(last.val_accuracy.is_some());
        assert!(result.reward_meta.is_some());
    }

    #[test]
    fn alignment_ce_leg_can_be_ablated() {
        let (ds, plan) = tiny_dataset();
        let mut cfg = tiny_cfg();
        cfg.align_use_ce = false;
        let result = fit(&cfg, &ds, &plan).unwrap();
        for record in &result.log {
            assert_eq!(record.losses.align_ce, 0.0);
            assert!(record.losses.align_l2 > 0.0);
            assert!(record.losses.total.is_finite());
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let (ds, plan) = tiny_dataset();
        let cfg = tiny_cfg();
        let a = fit(&cfg, &ds, &plan).unwrap();
        let b = fit(&cfg, &ds, &plan).unwrap();
        for (x, y) in a.log.iter().zip(&b.log) {
            assert!((x.losses.total - y.losses.total).abs() < 1e-6);
            assert_eq!(x.val_accuracy, y.val_accuracy);
        }
        assert_eq!(a.best.step, b.best.step);
    }

    #[test]
    fn erm_task_trajectory_is_bit_identical_to_full_run_task_path() {
        // The baseline must not depend on whether unrelated components drew
        // from their own random streams; stream separation guarantees it.
        let (ds, plan) = tiny_dataset();
        let a = fit(&erm_cfg(), &ds, &plan).unwrap();
        let b = fit(&erm_cfg(), &ds, &plan).unwrap();
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.losses.task.to_bits(), y.losses.task.to_bits());
            assert_eq!(x.losses.total.to_bits(), y.losses.total.to_bits());
        }
    }

    #[test]
    fn overfit_single_batch_reduces_loss() {
        let (ds, plan) = tiny_dataset();
        let cfg = TrainConfig { steps: 1, ..erm_cfg() };
        let vocab = Vocabulary::build(&["a"], 1);
        let mut state = ModelState::new(&cfg, vocab, ds.num_classes).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr_backbone: 3e-3,
            lr_new: 3e-3,
            ..Default::default()
        });
        let mut streams = TrainStreams::new(0);
        let mut stream = BatchStream::new(&ds, &plan, 4, TextMode::PerImage, 0, true).unwrap();
        let batch = stream.next_batch();
        let first =
            train_step(&mut state, &mut opt, &ds, &batch, &cfg, &mut streams, 1).unwrap();
        let mut last = first;
        for s in 2..=200 {
            last = train_step(&mut state, &mut opt, &ds, &batch, &cfg, &mut streams, s).unwrap();
        }
        assert!(
            last.total < first.total,
            "no progress overfitting one batch: {} -> {}",
            first.total,
            last.total
        );
    }

    #[test]
    fn backbone_and_new_groups_use_their_rates() {
        // Single Adam step with hand-planted gradients: each tensor moves by
        // ±lr of its group (bias-corrected first step moves exactly lr per
        // coordinate of unit gradient).
        let (ds, _) = tiny_dataset();
        let cfg = tiny_cfg();
        let vocab = Vocabulary::build(&["red square"], 1);
        let mut state = ModelState::new(&cfg, vocab, ds.num_classes).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr_backbone: cfg.lr_backbone,
            lr_new: cfg.lr_new,
            weight_decay: 0.0,
            ..Default::default()
        });
        let before = state.snapshot();
        {
            let mut params = optimizer_params(&mut state, &cfg);
            for (p, _) in params.iter_mut() {
                for g in &mut p.grad {
                    *g = 1.0;
                }
            }
            opt.step(&mut params);
            for (p, _) in params {
                p.zero_grad();
            }
        }
        let after = state.snapshot();
        // Backbone tensors are the first six (conv weights and biases).
        for t in 0..6 {
            for (a, b) in after[t].iter().zip(&before[t]) {
                assert!(((b - a) - cfg.lr_backbone).abs() < 1e-9);
            }
        }
        // Everything after the conv stem is a fresh module.
        for t in 6..after.len() {
            for (a, b) in after[t].iter().zip(&before[t]) {
                assert!(((b - a) - cfg.lr_new).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn reward_model_and_pte_stay_frozen_through_fit() {
        let (ds, plan) = tiny_dataset();
        let cfg = TrainConfig { steps: 5, ..tiny_cfg() };

        // Fit once to get the frozen modules, then refit and compare.
        let a = fit(&cfg, &ds, &plan).unwrap();
        let b = fit(&cfg, &ds, &plan).unwrap();
        let (rma, rmb) = (a.state.reward_model.unwrap(), b.state.reward_model.unwrap());
        assert_eq!(rma.meta.epochs, rmb.meta.epochs);
        assert!(rma
            .embedding
            .weight
            .value
            .iter()
            .zip(&rmb.embedding.weight.value)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        // The sentence encoder is parameter-free; embedding a probe sentence
        // after training matches a fresh encoder.
        let probe = "red square on plain";
        let fresh = crate::encoders::HashedBowEncoder::new(cfg.d_text, 4096, 17);
        use crate::encoders::SentenceEncoder as _;
        assert_eq!(
            a.state.pte.as_ref().unwrap().embed(probe).unwrap(),
            fresh.embed(probe).unwrap()
        );
    }

    #[test]
    fn steps_one_gives_one_record_and_a_checkpoint() {
        let (ds, plan) = tiny_dataset();
        let cfg = TrainConfig { steps: 1, ..erm_cfg() };
        let result = fit(&cfg, &ds, &plan).unwrap();
        assert_eq!(result.log.len(), 1);
        assert_eq!(result.best.step, 1);
        assert!(result.best.val_accuracy >= 0.0);
    }

    #[test]
    fn best_checkpoint_matches_logged_maximum() {
        let (ds, plan) = tiny_dataset();
        let cfg = TrainConfig { steps: 6, eval_interval: 2, ..erm_cfg() };
        let result = fit(&cfg, &ds, &plan).unwrap();
        let max = result
            .log
            .iter()
            .filter_map(|r| r.val_accuracy)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(result.best.val_accuracy, max);
    }

    #[test]
    fn select_model_argmax_and_ties() {
        let mk = |step, acc| Checkpoint { step, val_accuracy: acc, params: Vec::new() };
        let three = [mk(1, 0.5), mk(2, 0.7), mk(3, 0.6)];
        assert_eq!(select_model(&three).unwrap().step, 2);
        let tied = [mk(1, 0.7), mk(2, 0.7)];
        assert_eq!(select_model(&tied).unwrap().step, 2);
        let single = [mk(9, 0.1)];
        assert_eq!(select_model(&single).unwrap().step, 9);
        assert!(select_model(&[]).is_err());
    }

    #[test]
    fn hyperparameter_draws_stay_in_support() {
        let draws = sample_hyperparameters(0, 20);
        assert_eq!(draws.len(), 20);
        let many = sample_hyperparameters(1, 10_000);
        let mut dropout_counts = [0usize; 3];
        for d in &many {
            assert!(d.lr >= 5e-5 && d.lr <= 5e-4, "lr {}", d.lr);
            assert!(d.weight_decay >= 1e-4 && d.weight_decay <= 1e-3);
            assert!((32..=45).contains(&d.batch), "batch {}", d.batch);
            let slot = [0.0, 0.1, 0.5]
                .iter()
                .position(|&x| x == d.dropout)
                .expect("dropout outside its choice set");
            dropout_counts[slot] += 1;
        }
        // Frequencies within 3σ of uniform thirds.
        let n = many.len() as f64;
        let sigma = (n * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for &count in &dropout_counts {
            assert!((count as f64 - n / 3.0).abs() < 3.0 * sigma, "{dropout_counts:?}");
        }
    }

    #[test]
    fn hyperparameter_draws_are_deterministic() {
        let a = sample_hyperparameters(7, 20);
        let b = sample_hyperparameters(7, 20);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.lr.to_bits(), y.lr.to_bits());
            assert_eq!(x.batch, y.batch);
        }
    }

    #[test]
    fn checkpoint_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ckpt = Checkpoint {
            step: 42,
            val_accuracy: 0.875,
            params: vec![vec![1.5, -2.5, 0.0], vec![3.25]],
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.val_accuracy, 0.875);
        assert_eq!(loaded.params, ckpt.params);

        // Corruption is rejected.
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let (ds, plan) = tiny_dataset();
        let cfg = TrainConfig { steps: 2, ..tiny_cfg() };
        let mut result = fit(&cfg, &ds, &plan).unwrap();
        let snap = result.best.params.clone();
        result.state.restore(&snap).unwrap();
        let again = result.state.snapshot();
        assert_eq!(again, snap);
        // Wrong shape is rejected.
        assert!(result.state.restore(&snap[..1]).is_err());
    }

    #[test]
    fn dropout_masks_features_at_train_time_only() {
        let (ds, plan) = tiny_dataset();
        let mut cfg = erm_cfg();
        cfg.dropout = 0.5;
        // Training still runs and stays finite.
        let result = fit(&cfg, &ds, &plan).unwrap();
        assert!(result.log.iter().all(|r| r.losses.total.is_finite()));
    }

    #[test]
    fn empty_validation_falls_back_to_final_step_with_warning() {
        let (ds, mut plan) = tiny_dataset();
        for roles in &mut plan.domains {
            roles.val.clear();
        }
        let cfg = TrainConfig { steps: 2, ..erm_cfg() };
        let result = fit(&cfg, &ds, &plan).unwrap();
        assert_eq!(result.best.step, 2);
        assert!(result
            .warnings
            .iter()
            .any(|w| w.contains("validation set is empty")));
    }
}
