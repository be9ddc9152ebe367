//! Description generator and its frozen reward model.
//!
//! The generator is a two-layer LSTM: layer 1 consumes the embedding of the
//! previous token; layer 2 consumes layer 1's output concatenated with the
//! projected visual feature and the category vector, and a linear layer maps
//! its hidden state to vocabulary logits. One shared unroller implements
//! teacher-forced scoring, ancestral sampling, and greedy decoding, caching
//! every step so a single backward routine serves both the likelihood term
//! and the policy-gradient term.
//!
//! Sequence conventions: scoring consumes `[BOS, w_1..w_n, EOS]` and scores
//! the n+1 next-token predictions; the teacher-forced pass additionally feeds
//! the final EOS so the layer-1 hidden state summarizes the entire sentence —
//! that final hidden state is the self-supervised pivot.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::text::{BOS, EOS, PAD, RESERVED};
use crate::error::{GvrtError, Result};
use crate::nn::{self, Embedding, Linear, LstmCell, Param};
use crate::nn::lstm::LstmStepCache;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub d_joint: usize,
    pub num_classes: usize,
    pub max_len: usize,
}

impl GeneratorConfig {
    pub fn new(vocab: usize, d_joint: usize, num_classes: usize) -> Self {
        GeneratorConfig {
            vocab,
            embed_dim: 32,
            hidden: 64,
            d_joint,
            num_classes,
            max_len: 20,
        }
    }
}

/// Two-layer recurrent generator conditioned on visual feature and category.
pub struct ExplanationGenerator {
    pub cfg: GeneratorConfig,
    pub embedding: Embedding,
    pub layer1: LstmCell,
    pub layer2: LstmCell,
    pub output: Linear,
}

/// Everything recorded during one unrolled pass, enough to run backward.
pub struct GenPass {
    pub batch: usize,
    /// Steps that scored a target token.
    pub scored_steps: usize,
    /// Steps layer 1 ran (equal to `scored_steps`, plus one in teacher mode).
    input_steps: usize,
    step_tokens: Vec<Vec<usize>>,
    targets: Vec<Vec<usize>>,
    mask1: Vec<Vec<bool>>,
    mask2: Vec<Vec<bool>>,
    probs: Vec<Vec<f64>>,
    /// `scored_steps × batch` log-probability of each target (0 when masked).
    pub step_logp: Vec<Vec<f64>>,
    /// Total number of scored (example, step) pairs.
    pub valid_steps: usize,
    x_emb: Vec<Vec<f64>>,
    h1_prev: Vec<Vec<f64>>,
    c1_prev: Vec<Vec<f64>>,
    h2_prev: Vec<Vec<f64>>,
    c2_prev: Vec<Vec<f64>>,
    h2_after: Vec<Vec<f64>>,
    cache1: Vec<LstmStepCache>,
    cache2: Vec<LstmStepCache>,
    u: Vec<Vec<f64>>,
    /// Final layer-1 hidden state per example: the self-supervised pivot.
    pub ste_hidden: Vec<f64>,
}

impl GenPass {
    /// Per-example sum of scored log-probabilities.
    pub fn sequence_logprobs(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.batch];
        for t in 0..self.scored_steps {
            for b in 0..self.batch {
                out[b] += self.step_logp[t][b];
            }
        }
        out
    }

    /// Mean negative log-likelihood over all scored steps.
    pub fn nll(&self) -> f64 {
        let total: f64 = self.step_logp.iter().flatten().sum();
        -total / self.valid_steps.max(1) as f64
    }
}

/// Gradients the generator hands back to its callers.
pub struct GenBackward {
    /// `batch × d_joint`: gradient w.r.t. the projected visual conditioning.
    pub d_gx: Vec<f64>,
}

/// Incremental unrolled forward pass shared by scoring, sampling, and greedy
/// decoding. Rows finished with their sequence are masked: their recurrent
/// state is frozen and they contribute nothing to later steps.
struct Unroller<'g> {
    gen: &'g ExplanationGenerator,
    batch: usize,
    g_x: Vec<f64>,
    c: Vec<f64>,
    h1: Vec<f64>,
    c1: Vec<f64>,
    h2: Vec<f64>,
    c2: Vec<f64>,
    pass: GenPass,
}

impl<'g> Unroller<'g> {
    fn new(gen: &'g ExplanationGenerator, g_x: &[f64], c: &[f64], batch: usize) -> Result<Self> {
        let hd = gen.cfg.hidden;
        if g_x.len() != batch * gen.cfg.d_joint {
            return Err(GvrtError::Config(format!(
                "conditioning g_x has {} values, expected {}",
                g_x.len(),
                batch * gen.cfg.d_joint
            )));
        }
        if c.len() != batch * gen.cfg.num_classes {
            return Err(GvrtError::Config(format!(
                "category vector has {} values, expected {}",
                c.len(),
                batch * gen.cfg.num_classes
            )));
        }
        Ok(Unroller {
            gen,
            batch,
            g_x: g_x.to_vec(),
            c: c.to_vec(),
            h1: vec![0.0; batch * hd],
            c1: vec![0.0; batch * hd],
            h2: vec![0.0; batch * hd],
            c2: vec![0.0; batch * hd],
            pass: GenPass {
                batch,
                scored_steps: 0,
                input_steps: 0,
                step_tokens: Vec::new(),
                targets: Vec::new(),
                mask1: Vec::new(),
                mask2: Vec::new(),
                probs: Vec::new(),
                step_logp: Vec::new(),
                valid_steps: 0,
                x_emb: Vec::new(),
                h1_prev: Vec::new(),
                c1_prev: Vec::new(),
                h2_prev: Vec::new(),
                c2_prev: Vec::new(),
                h2_after: Vec::new(),
                cache1: Vec::new(),
                cache2: Vec::new(),
                u: Vec::new(),
                ste_hidden: Vec::new(),
            },
        })
    }

    /// Advance layer 1 by one token per row; masked rows keep their state.
    fn step_layer1(&mut self, tokens: &[usize], mask: &[bool]) -> Result<()> {
        for (&t, &m) in tokens.iter().zip(mask) {
            if m && t >= self.gen.cfg.vocab {
                return Err(GvrtError::Config(format!(
                    "token id {t} outside vocabulary of size {}",
                    self.gen.cfg.vocab
                )));
            }
        }
        let x = self.gen.embedding.forward(tokens);
        self.pass.h1_prev.push(self.h1.clone());
        self.pass.c1_prev.push(self.c1.clone());
        let cache = self.gen.layer1.forward_step(&x, &mut self.h1, &mut self.c1);
        let hd = self.gen.cfg.hidden;
        for b in 0..self.batch {
            if !mask[b] {
                let prev_h = &self.pass.h1_prev.last().unwrap()[b * hd..(b + 1) * hd];
                let prev_c = &self.pass.c1_prev.last().unwrap()[b * hd..(b + 1) * hd];
                self.h1[b * hd..(b + 1) * hd].copy_from_slice(prev_h);
                self.c1[b * hd..(b + 1) * hd].copy_from_slice(prev_c);
            }
        }
        self.pass.x_emb.push(x);
        self.pass.cache1.push(cache);
        self.pass.step_tokens.push(tokens.to_vec());
        self.pass.mask1.push(mask.to_vec());
        self.pass.input_steps += 1;
        Ok(())
    }

    /// Advance layer 2 from the current layer-1 output and produce per-row
    /// softmax distributions over the vocabulary.
    fn step_layer2(&mut self, mask: &[bool]) -> Vec<f64> {
        let (hd, dj, k) = (self.gen.cfg.hidden, self.gen.cfg.d_joint, self.gen.cfg.num_classes);
        let width = hd + dj + k;
        let mut u = vec![0.0; self.batch * width];
        for b in 0..self.batch {
            u[b * width..b * width + hd].copy_from_slice(&self.h1[b * hd..(b + 1) * hd]);
            u[b * width + hd..b * width + hd + dj].copy_from_slice(&self.g_x[b * dj..(b + 1) * dj]);
            u[b * width + hd + dj..(b + 1) * width].copy_from_slice(&self.c[b * k..(b + 1) * k]);
        }
        self.pass.h2_prev.push(self.h2.clone());
        self.pass.c2_prev.push(self.c2.clone());
        let cache = self.gen.layer2.forward_step(&u, &mut self.h2, &mut self.c2);
        for b in 0..self.batch {
            if !mask[b] {
                let prev_h = &self.pass.h2_prev.last().unwrap()[b * hd..(b + 1) * hd];
                let prev_c = &self.pass.c2_prev.last().unwrap()[b * hd..(b + 1) * hd];
                self.h2[b * hd..(b + 1) * hd].copy_from_slice(prev_h);
                self.c2[b * hd..(b + 1) * hd].copy_from_slice(prev_c);
            }
        }
        let logits = self.gen.output.forward(&self.h2);
        let probs = nn::softmax(&logits, self.gen.cfg.vocab);
        self.pass.u.push(u);
        self.pass.cache2.push(cache);
        self.pass.h2_after.push(self.h2.clone());
        probs
    }

    /// Record the scored targets for the step just produced by `step_layer2`.
    fn record_scored(&mut self, targets: &[usize], mask: &[bool], probs: Vec<f64>) {
        let v = self.gen.cfg.vocab;
        let mut logp = vec![0.0; self.batch];
        for b in 0..self.batch {
            if mask[b] {
                logp[b] = nn::safe_ln(probs[b * v + targets[b]]);
                self.pass.valid_steps += 1;
            }
        }
        self.pass.step_logp.push(logp);
        self.pass.targets.push(targets.to_vec());
        self.pass.mask2.push(mask.to_vec());
        self.pass.probs.push(probs);
        self.pass.scored_steps += 1;
    }

    fn finish(mut self) -> GenPass {
        self.pass.ste_hidden = self.h1;
        self.pass
    }
}

impl ExplanationGenerator {
    pub fn new(cfg: GeneratorConfig, rng: &mut impl Rng) -> Self {
        let l2_in = cfg.hidden + cfg.d_joint + cfg.num_classes;
        ExplanationGenerator {
            embedding: Embedding::new(cfg.vocab, cfg.embed_dim, rng),
            layer1: LstmCell::new(cfg.embed_dim, cfg.hidden, rng),
            layer2: LstmCell::new(l2_in, cfg.hidden, rng),
            output: Linear::new(cfg.hidden, cfg.vocab, rng),
            cfg,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.embedding.weight,
            &mut self.layer1.w_ih,
            &mut self.layer1.w_hh,
            &mut self.layer1.bias,
            &mut self.layer2.w_ih,
            &mut self.layer2.w_hh,
            &mut self.layer2.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]
    }

    /// Teacher-forced pass over gold sequences `[BOS, w.., EOS]`. Scores every
    /// next-token prediction and additionally feeds the final EOS through
    /// layer 1 so `ste_hidden` summarizes the whole sentence.
    pub fn teacher_forced(&self, tokens: &[Vec<usize>], g_x: &[f64], c: &[f64]) -> Result<GenPass> {
        for seq in tokens {
            if seq.first() != Some(&BOS) {
                return Err(GvrtError::Config("sequence must begin with BOS".into()));
            }
            if seq.last() != Some(&EOS) || seq.len() < 2 {
                return Err(GvrtError::Config("sequence must end with EOS".into()));
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= self.cfg.vocab) {
                return Err(GvrtError::Config(format!(
                    "token id {t} outside vocabulary of size {}",
                    self.cfg.vocab
                )));
            }
        }
        let batch = tokens.len();
        let mut unroller = Unroller::new(self, g_x, c, batch)?;
        let t1 = tokens.iter().map(|s| s.len()).max().unwrap_or(0);
        for t in 0..t1 {
            let step_tokens: Vec<usize> =
                tokens.iter().map(|s| *s.get(t).unwrap_or(&PAD)).collect();
            let mask1: Vec<bool> = tokens.iter().map(|s| t < s.len()).collect();
            unroller.step_layer1(&step_tokens, &mask1)?;
            if t + 1 < t1 {
                let mask2: Vec<bool> = tokens.iter().map(|s| t + 1 < s.len()).collect();
                if mask2.iter().any(|&m| m) {
                    let probs = unroller.step_layer2(&mask2);
                    let targets: Vec<usize> =
                        tokens.iter().map(|s| *s.get(t + 1).unwrap_or(&PAD)).collect();
                    unroller.record_scored(&targets, &mask2, probs);
                }
            }
        }
        Ok(unroller.finish())
    }

    /// Score arbitrary emission lists (no EOS requirement): feeds
    /// `[BOS, e_1..e_{m-1}]` and scores `e_1..e_m`. This is exactly the
    /// distribution the sampler draws from.
    pub fn score_sequence(&self, emitted: &[Vec<usize>], g_x: &[f64], c: &[f64]) -> Result<GenPass> {
        for seq in emitted {
            if let Some(&t) = seq.iter().find(|&&t| t >= self.cfg.vocab) {
                return Err(GvrtError::Config(format!(
                    "token id {t} outside vocabulary of size {}",
                    self.cfg.vocab
                )));
            }
        }
        let batch = emitted.len();
        let mut unroller = Unroller::new(self, g_x, c, batch)?;
        let t_max = emitted.iter().map(|s| s.len()).max().unwrap_or(0);
        for t in 0..t_max {
            let mask: Vec<bool> = emitted.iter().map(|s| t < s.len()).collect();
            let step_tokens: Vec<usize> = emitted
                .iter()
                .map(|s| if t == 0 { BOS } else { *s.get(t - 1).unwrap_or(&PAD) })
                .collect();
            unroller.step_layer1(&step_tokens, &mask)?;
            let probs = unroller.step_layer2(&mask);
            let targets: Vec<usize> = emitted.iter().map(|s| *s.get(t).unwrap_or(&PAD)).collect();
            unroller.record_scored(&targets, &mask, probs);
        }
        Ok(unroller.finish())
    }

    /// Ancestral sampling: draw from each step's softmax until EOS or
    /// `max_len` tokens. Returns emitted tokens (EOS included when produced,
    /// never appended on truncation), per-example total log-probability, and
    /// the cached pass for the policy-gradient backward.
    pub fn sample(
        &self,
        g_x: &[f64],
        c: &[f64],
        batch: usize,
        max_len: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<Vec<usize>>, Vec<f64>, GenPass)> {
        if max_len == 0 {
            return Err(GvrtError::Config("max_len must be >= 1".into()));
        }
        let v = self.cfg.vocab;
        let mut unroller = Unroller::new(self, g_x, c, batch)?;
        let mut emitted: Vec<Vec<usize>> = vec![Vec::new(); batch];
        let mut active = vec![true; batch];
        let mut prev = vec![BOS; batch];
        for _ in 0..max_len {
            if !active.iter().any(|&a| a) {
                break;
            }
            let mask = active.clone();
            unroller.step_layer1(&prev, &mask)?;
            let probs = unroller.step_layer2(&mask);
            let mut drawn = vec![PAD; batch];
            for b in 0..batch {
                if !active[b] {
                    continue;
                }
                let row = &probs[b * v..(b + 1) * v];
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = v - 1;
                for (i, &p) in row.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                drawn[b] = pick;
                emitted[b].push(pick);
            }
            unroller.record_scored(&drawn, &mask, probs);
            for b in 0..batch {
                if active[b] && drawn[b] == EOS {
                    active[b] = false;
                }
            }
            prev = drawn;
        }
        let pass = unroller.finish();
        let logprobs = pass.sequence_logprobs();
        Ok((emitted, logprobs, pass))
    }

    /// Greedy decode: per-step argmax (ties to the lowest token id), stopping
    /// at EOS or `max_len`.
    pub fn greedy_decode(&self, g_x: &[f64], c: &[f64], batch: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let v = self.cfg.vocab;
        let mut unroller = Unroller::new(self, g_x, c, batch)?;
        let mut emitted: Vec<Vec<usize>> = vec![Vec::new(); batch];
        let mut active = vec![true; batch];
        let mut prev = vec![BOS; batch];
        for _ in 0..max_len {
            if !active.iter().any(|&a| a) {
                break;
            }
            let mask = active.clone();
            unroller.step_layer1(&prev, &mask)?;
            let probs = unroller.step_layer2(&mask);
            let mut drawn = vec![PAD; batch];
            for b in 0..batch {
                if !active[b] {
                    continue;
                }
                drawn[b] = nn::argmax(&probs[b * v..(b + 1) * v]);
                emitted[b].push(drawn[b]);
                if drawn[b] == EOS {
                    active[b] = false;
                }
            }
            unroller.record_scored(&drawn, &mask, probs);
            prev = drawn;
        }
        Ok(emitted)
    }

    /// Backward through a cached pass.
    ///
    /// `dlogp` is the gradient of the loss w.r.t. each scored step's
    /// log-probability, laid out `batch × scored_steps` (row-major by
    /// example). `dv` optionally injects gradient on the final layer-1 hidden
    /// state (the non-detached self-supervised-pivot path). Parameter
    /// gradients accumulate in place; conditioning gradients are returned.
    pub fn backward(&mut self, pass: &GenPass, dlogp: &[f64], dv: Option<&[f64]>) -> GenBackward {
        let (hd, dj, k, v) = (self.cfg.hidden, self.cfg.d_joint, self.cfg.num_classes, self.cfg.vocab);
        let batch = pass.batch;
        assert_eq!(dlogp.len(), batch * pass.scored_steps, "dlogp must be batch x scored_steps");
        let width = hd + dj + k;
        let mut d_gx = vec![0.0; batch * dj];
        let mut dz_grid: Vec<Vec<f64>> = vec![vec![0.0; batch * hd]; pass.scored_steps];

        // ── Layer-2 chain, last scored step first ──
        let mut dh2 = vec![0.0; batch * hd];
        let mut dc2 = vec![0.0; batch * hd];
        for t in (0..pass.scored_steps).rev() {
            let probs = &pass.probs[t];
            let mask = &pass.mask2[t];
            let mut dlogits = vec![0.0; batch * v];
            for b in 0..batch {
                if !mask[b] {
                    continue;
                }
                let g = dlogp[b * pass.scored_steps + t];
                if g == 0.0 {
                    continue;
                }
                let target = pass.targets[t][b];
                for j in 0..v {
                    let onehot = if j == target { 1.0 } else { 0.0 };
                    dlogits[b * v + j] = g * (onehot - probs[b * v + j]);
                }
            }
            let dh_out = self.output.backward(&pass.h2_after[t], &dlogits);
            for (a, b) in dh2.iter_mut().zip(&dh_out) {
                *a += b;
            }
            // Freeze masked rows: stash their incoming gradients, zero them
            // for the step backward, then restore (the step never ran for
            // them, so gradients pass through unchanged).
            let mut stash: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
            for b in 0..batch {
                if !mask[b] {
                    stash.push((
                        b,
                        dh2[b * hd..(b + 1) * hd].to_vec(),
                        dc2[b * hd..(b + 1) * hd].to_vec(),
                    ));
                    dh2[b * hd..(b + 1) * hd].iter_mut().for_each(|x| *x = 0.0);
                    dc2[b * hd..(b + 1) * hd].iter_mut().for_each(|x| *x = 0.0);
                }
            }
            let du = self.layer2.backward_step(
                &pass.cache2[t],
                &pass.u[t],
                &pass.h2_prev[t],
                &pass.c2_prev[t],
                &mut dh2,
                &mut dc2,
            );
            for (b, h, c) in stash {
                dh2[b * hd..(b + 1) * hd].copy_from_slice(&h);
                dc2[b * hd..(b + 1) * hd].copy_from_slice(&c);
            }
            for b in 0..batch {
                if !mask[b] {
                    continue;
                }
                dz_grid[t][b * hd..(b + 1) * hd].copy_from_slice(&du[b * width..b * width + hd]);
                for j in 0..dj {
                    d_gx[b * dj + j] += du[b * width + hd + j];
                }
                // Category-vector gradient is dropped: c enters detached.
            }
        }

        // ── Layer-1 chain over all input steps ──
        let mut dh1 = vec![0.0; batch * hd];
        let mut dc1 = vec![0.0; batch * hd];
        let final_step: Vec<usize> = (0..batch)
            .map(|b| (0..pass.input_steps).filter(|&t| pass.mask1[t][b]).count())
            .collect();
        for t in (0..pass.input_steps).rev() {
            let mask = &pass.mask1[t];
            if let Some(dv) = dv {
                // Inject pivot gradient exactly where each row's final hidden
                // state was produced.
                for b in 0..batch {
                    if final_step[b] == t + 1 {
                        for j in 0..hd {
                            dh1[b * hd + j] += dv[b * hd + j];
                        }
                    }
                }
            }
            if t < pass.scored_steps {
                for b in 0..batch {
                    if pass.mask2[t][b] {
                        for j in 0..hd {
                            dh1[b * hd + j] += dz_grid[t][b * hd + j];
                        }
                    }
                }
            }
            let mut stash: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
            for b in 0..batch {
                if !mask[b] {
                    stash.push((
                        b,
                        dh1[b * hd..(b + 1) * hd].to_vec(),
                        dc1[b * hd..(b + 1) * hd].to_vec(),
                    ));
                    dh1[b * hd..(b + 1) * hd].iter_mut().for_each(|x| *x = 0.0);
                    dc1[b * hd..(b + 1) * hd].iter_mut().for_each(|x| *x = 0.0);
                }
            }
            let dx = self.layer1.backward_step(
                &pass.cache1[t],
                &pass.x_emb[t],
                &pass.h1_prev[t],
                &pass.c1_prev[t],
                &mut dh1,
                &mut dc1,
            );
            for (b, h, c) in stash {
                dh1[b * hd..(b + 1) * hd].copy_from_slice(&h);
                dc1[b * hd..(b + 1) * hd].copy_from_slice(&c);
            }
            self.embedding.backward(&pass.step_tokens[t], &dx);
        }

        GenBackward { d_gx }
    }
}

// ── Reward model ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardModelConfig {
    pub embed_dim: usize,
    pub max_epochs: usize,
    pub lr: f64,
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for RewardModelConfig {
    fn default() -> Self {
        RewardModelConfig {
            embed_dim: 32,
            max_epochs: 300,
            lr: 0.05,
            target_accuracy: 0.95,
            seed: 0,
        }
    }
}

/// Outcome of reward-model pretraining, kept for the run metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardTrainMeta {
    pub converged: bool,
    pub train_accuracy: f64,
    pub epochs: usize,
}

/// Frozen sentence classifier: mean embedding of non-reserved tokens, then an
/// affine map to class probabilities. The reward of a sentence for class `y`
/// is the probability the classifier assigns to `y`.
pub struct RewardModel {
    pub embedding: Embedding,
    pub head: Linear,
    pub num_classes: usize,
    pub meta: RewardTrainMeta,
}

impl RewardModel {
    /// Class distribution for a token sequence; an empty bag (no non-reserved
    /// tokens) scores the uniform prior exactly.
    pub fn score(&self, tokens: &[usize]) -> Vec<f64> {
        let content: Vec<usize> = tokens
            .iter()
            .copied()
            .filter(|&t| t >= RESERVED && t < self.embedding.vocab)
            .collect();
        if content.is_empty() {
            return vec![1.0 / self.num_classes as f64; self.num_classes];
        }
        let embs = self.embedding.forward(&content);
        let dim = self.embedding.dim;
        let mut mean = vec![0.0; dim];
        for row in embs.chunks(dim) {
            for (m, &e) in mean.iter_mut().zip(row) {
                *m += e;
            }
        }
        let inv = 1.0 / content.len() as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        nn::softmax(&self.head.forward(&mean), self.num_classes)
    }
}

/// `R(sentence, class)`: the frozen classifier's probability of `class`.
pub fn reward(rm: &RewardModel, tokens: &[usize], class_id: usize) -> f64 {
    rm.score(tokens)[class_id]
}

/// Train the reward model on gold (sequence, label) pairs, then freeze it.
/// Stops at `target_accuracy` on the training set or after `max_epochs`
/// (recorded as non-converged in the metadata).
pub fn train_reward_model(
    sequences: &[Vec<usize>],
    labels: &[u16],
    vocab: usize,
    num_classes: usize,
    cfg: &RewardModelConfig,
) -> Result<RewardModel> {
    if sequences.is_empty() || sequences.len() != labels.len() {
        return Err(GvrtError::Config("reward training needs matching sequences and labels".into()));
    }
    let mut seen = vec![false; num_classes];
    for &l in labels {
        if (l as usize) < num_classes {
            seen[l as usize] = true;
        }
    }
    if seen.iter().any(|&s| !s) {
        return Err(GvrtError::Config("every class needs at least one reward-training text".into()));
    }

    let mut rng = crate::rng::component_rng(cfg.seed, "reward-model");
    let mut rm = RewardModel {
        embedding: Embedding::new(vocab, cfg.embed_dim, &mut rng),
        head: Linear::new(cfg.embed_dim, num_classes, &mut rng),
        num_classes,
        meta: RewardTrainMeta { converged: false, train_accuracy: 0.0, epochs: 0 },
    };

    // Pre-extract content-token bags.
    let bags: Vec<Vec<usize>> = sequences
        .iter()
        .map(|s| s.iter().copied().filter(|&t| t >= RESERVED && t < vocab).collect())
        .collect();
    let dim = cfg.embed_dim;
    let n = sequences.len();
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();

    let mut opt = nn::Adam::new(nn::AdamConfig {
        lr_new: cfg.lr,
        ..Default::default()
    });
    for epoch in 1..=cfg.max_epochs {
        // Forward: mean embeddings for every sentence.
        let mut means = vec![0.0; n * dim];
        for (i, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let inv = 1.0 / bag.len() as f64;
            for &t in bag {
                for d in 0..dim {
                    means[i * dim + d] += rm.embedding.weight.value[t * dim + d] * inv;
                }
            }
        }
        let logits = rm.head.forward(&means);
        let (_, dlogits) = nn::softmax_xent(&logits, num_classes, &targets);

        rm.embedding.weight.zero_grad();
        rm.head.weight.zero_grad();
        rm.head.bias.zero_grad();
        let dmeans = rm.head.backward(&means, &dlogits);
        for (i, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let inv = 1.0 / bag.len() as f64;
            for &t in bag {
                for d in 0..dim {
                    rm.embedding.weight.grad[t * dim + d] += dmeans[i * dim + d] * inv;
                }
            }
        }
        opt.step(&mut [
            (&mut rm.embedding.weight, nn::ParamGroup::New),
            (&mut rm.head.weight, nn::ParamGroup::New),
            (&mut rm.head.bias, nn::ParamGroup::New),
        ]);

        // Accuracy after the update.
        let mut means2 = vec![0.0; n * dim];
        for (i, bag) in bags.iter().enumerate() {
            if bag.is_empty() {
                continue;
            }
            let inv = 1.0 / bag.len() as f64;
            for &t in bag {
                for d in 0..dim {
                    means2[i * dim + d] += rm.embedding.weight.value[t * dim + d] * inv;
                }
            }
        }
        let logits2 = rm.head.forward(&means2);
        let correct = logits2
            .chunks(num_classes)
            .zip(&targets)
            .filter(|(row, &t)| nn::argmax(row) == t)
            .count();
        rm.meta.train_accuracy = correct as f64 / n as f64;
        rm.meta.epochs = epoch;
        if rm.meta.train_accuracy >= cfg.target_accuracy {
            rm.meta.converged = true;
            break;
        }
    }
    Ok(rm)
}

/// One exported explanation row (JSONL).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplanationRow {
    pub sample_id: u32,
    pub domain: u16,
    pub true_class: u16,
    pub predicted_class: u16,
    pub sentence: String,
    pub reward: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::component_rng;

    fn tiny_gen(vocab: usize, seed: u64) -> ExplanationGenerator {
        let mut rng = component_rng(seed, "test-gen");
        let cfg = GeneratorConfig {
            vocab,
            embed_dim: 3,
            hidden: 4,
            d_joint: 2,
            num_classes: 2,
            max_len: 8,
        };
        ExplanationGenerator::new(cfg, &mut rng)
    }

    fn cond(batch: usize) -> (Vec<f64>, Vec<f64>) {
        let g_x: Vec<f64> = (0..batch * 2).map(|i| 0.3 * i as f64 - 0.4).collect();
        let c: Vec<f64> = (0..batch * 2).map(|i| if i % 2 == 0 { 0.8 } else { 0.2 }).collect();
        (g_x, c)
    }

    #[test]
    fn uniform_output_layer_scores_ln_v() {
        let mut gen = tiny_gen(6, 0);
        gen.output.weight.value.iter_mut().for_each(|w| *w = 0.0);
        gen.output.bias.value.iter_mut().for_each(|b| *b = 0.0);
        let (g_x, c) = cond(1);
        let pass = gen.teacher_forced(&[vec![BOS, 4, 5, EOS]], &g_x, &c).unwrap();
        for t in 0..pass.scored_steps {
            assert!((pass.step_logp[t][0] + (6.0_f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn shortest_sequence_scores_one_step_and_runs_two() {
        let gen = tiny_gen(5, 1);
        let (g_x, c) = cond(1);
        let pass = gen.teacher_forced(&[vec![BOS, EOS]], &g_x, &c).unwrap();
        assert_eq!(pass.scored_steps, 1);
        assert_eq!(pass.valid_steps, 1);
        // Layer 1 consumed both BOS and EOS.
        assert_eq!(pass.input_steps, 2);
    }

    #[test]
    fn pivot_state_is_the_two_step_hidden() {
        // For [BOS, EOS] the pivot must equal layer 1 run by hand for two
        // steps on the embeddings of BOS then EOS.
        let gen = tiny_gen(5, 2);
        let (g_x, c) = cond(1);
        let pass = gen.teacher_forced(&[vec![BOS, EOS]], &g_x, &c).unwrap();
        let mut h = vec![0.0; 4];
        let mut cc = vec![0.0; 4];
        gen.layer1.forward_step(&gen.embedding.forward(&[BOS]), &mut h, &mut cc);
        gen.layer1.forward_step(&gen.embedding.forward(&[EOS]), &mut h, &mut cc);
        for (a, b) in pass.ste_hidden.iter().zip(&h) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pivot_is_batch_composition_independent() {
        let gen = tiny_gen(7, 3);
        let (g1, c1) = cond(1);
        let solo = gen.teacher_forced(&[vec![BOS, 4, EOS]], &g1, &c1).unwrap();
        // Same sequence in a batch with a longer partner.
        let (g2, c2) = cond(2);
        let mut g2 = g2;
        let mut c2 = c2;
        g2[..2].copy_from_slice(&g1);
        c2[..2].copy_from_slice(&c1);
        let pair = gen
            .teacher_forced(&[vec![BOS, 4, EOS], vec![BOS, 5, 6, 5, EOS]], &g2, &c2)
            .unwrap();
        for j in 0..4 {
            assert!(
                (solo.ste_hidden[j] - pair.ste_hidden[j]).abs() < 1e-15,
                "padding leaked into the pivot"
            );
        }
        // And the scored log-probs of the shared row agree.
        assert!((solo.step_logp[0][0] - pair.step_logp[0][0]).abs() < 1e-15);
        assert!((solo.step_logp[1][0] - pair.step_logp[1][0]).abs() < 1e-15);
    }

    #[test]
    fn tiny_nll_matches_hand_rolled_recurrence() {
        // Independent scalar re-implementation of the whole forward pass.
        let gen = tiny_gen(4, 4);
        let seq = vec![BOS, 3, EOS];
        let (g_x, c) = cond(1);
        let pass = gen.teacher_forced(&[seq.clone()], &g_x, &c).unwrap();

        let hd = 4;
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let lstm_step = |cell: &LstmCell, x: &[f64], h: &mut Vec<f64>, cst: &mut Vec<f64>| {
            let mut gates = vec![0.0; 4 * hd];
            for g in 0..4 * hd {
                let mut acc = cell.bias.value[g];
                for (i, &xv) in x.iter().enumerate() {
                    acc += cell.w_ih.value[g * x.len() + i] * xv;
                }
                for j in 0..hd {
                    acc += cell.w_hh.value[g * hd + j] * h[j];
                }
                gates[g] = acc;
            }
            let mut h_new = vec![0.0; hd];
            let mut c_new = vec![0.0; hd];
            for j in 0..hd {
                let i_g = sigmoid(gates[j]);
                let f_g = sigmoid(gates[hd + j]);
                let g_g = gates[2 * hd + j].tanh();
                let o_g = sigmoid(gates[3 * hd + j]);
                c_new[j] = f_g * cst[j] + i_g * g_g;
                h_new[j] = o_g * c_new[j].tanh();
            }
            *h = h_new;
            *cst = c_new;
        };

        let (mut h1, mut c1) = (vec![0.0; hd], vec![0.0; hd]);
        let (mut h2, mut c2) = (vec![0.0; hd], vec![0.0; hd]);
        let mut nll = 0.0;
        for t in 0..seq.len() - 1 {
            let x: Vec<f64> = gen.embedding.weight.value[seq[t] * 3..seq[t] * 3 + 3].to_vec();
            lstm_step(&gen.layer1, &x, &mut h1, &mut c1);
            let mut u = h1.clone();
            u.extend_from_slice(&g_x);
            u.extend_from_slice(&c);
            lstm_step(&gen.layer2, &u, &mut h2, &mut c2);
            let mut logits = vec![0.0; 4];
            for o in 0..4 {
                logits[o] = gen.output.bias.value[o];
                for j in 0..hd {
                    logits[o] += gen.output.weight.value[o * hd + j] * h2[j];
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            nll -= logits[seq[t + 1]] - max - z.ln();
        }
        nll /= (seq.len() - 1) as f64;
        assert!((nll - pass.nll()).abs() < 1e-10, "hand {nll} vs pass {}", pass.nll());
    }

    #[test]
    fn rejects_malformed_sequences() {
        let gen = tiny_gen(5, 5);
        let (g_x, c) = cond(1);
        assert!(gen.teacher_forced(&[vec![4, EOS]], &g_x, &c).is_err());
        assert!(gen.teacher_forced(&[vec![BOS, 4]], &g_x, &c).is_err());
        assert!(gen.teacher_forced(&[vec![BOS, 9, EOS]], &g_x, &c).is_err());
    }

    #[test]
    fn degenerate_policy_always_emits_its_token() {
        let mut gen = tiny_gen(6, 6);
        gen.output.weight.value.iter_mut().for_each(|w| *w = 0.0);
        gen.output.bias.value.iter_mut().for_each(|b| *b = 0.0);
        gen.output.bias.value[4] = 20.0;
        let (g_x, c) = cond(1);
        let mut rng = component_rng(0, "test-sample");
        let (emitted, _, _) = gen.sample(&g_x, &c, 1, 5, &mut rng).unwrap();
        assert_eq!(emitted[0], vec![4, 4, 4, 4, 4]);
        let greedy = gen.greedy_decode(&g_x, &c, 1, 5).unwrap();
        assert_eq!(greedy[0], emitted[0]);
    }

    #[test]
    fn uniform_policy_sampling_frequencies() {
        let mut gen = tiny_gen(3, 7);
        // Uniform over {0, 1, 2}; max_len 1.
        gen.output.weight.value.iter_mut().for_each(|w| *w = 0.0);
        gen.output.bias.value.iter_mut().for_each(|b| *b = 0.0);
        let (g_x, c) = cond(1);
        let mut rng = component_rng(1, "test-sample");
        let mut counts = [0usize; 3];
        let n = 10_000;
        for _ in 0..n {
            let (emitted, _, _) = gen.sample(&g_x, &c, 1, 1, &mut rng).unwrap();
            counts[emitted[0][0]] += 1;
        }
        let sigma = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for &count in &counts {
            assert!(
                (count as f64 - n as f64 / 3.0).abs() < 3.0 * sigma,
                "counts {counts:?}"
            );
        }
    }

    #[test]
    fn sampled_logprob_matches_scoring_path() {
        let gen = tiny_gen(8, 8);
        let (g_x, c) = cond(3);
        let mut rng = component_rng(2, "test-sample");
        let (emitted, logprobs, _) = gen.sample(&g_x, &c, 3, 6, &mut rng).unwrap();
        let rescored = gen.score_sequence(&emitted, &g_x, &c).unwrap();
        for (a, b) in logprobs.iter().zip(rescored.sequence_logprobs()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn sampled_eos_terminated_matches_teacher_forced() {
        let gen = tiny_gen(6, 9);
        let (g_x, c) = cond(1);
        let mut rng = component_rng(3, "test-sample");
        // Sample until we get an EOS-terminated sentence.
        for _ in 0..200 {
            let (emitted, logprobs, _) = gen.sample(&g_x, &c, 1, 6, &mut rng).unwrap();
            if emitted[0].last() == Some(&EOS) {
                let mut full = vec![BOS];
                full.extend(&emitted[0]);
                let tf = gen.teacher_forced(&[full], &g_x, &c).unwrap();
                let total: f64 = tf.sequence_logprobs()[0];
                assert!((total - logprobs[0]).abs() < 1e-12);
                return;
            }
        }
        panic!("no EOS-terminated sample in 200 draws");
    }

    #[test]
    fn greedy_breaks_ties_toward_lower_ids() {
        let mut gen = tiny_gen(7, 10);
        gen.output.weight.value.iter_mut().for_each(|w| *w = 0.0);
        gen.output.bias.value.iter_mut().for_each(|b| *b = 0.0);
        gen.output.bias.value[4] = 3.0;
        gen.output.bias.value[5] = 3.0; // exact tie with id 4
        let (g_x, c) = cond(1);
        let out = gen.greedy_decode(&g_x, &c, 1, 3).unwrap();
        assert!(out[0].iter().all(|&t| t == 4));
    }

    #[test]
    fn category_vector_changes_the_logits() {
        let gen = tiny_gen(6, 11);
        let (g_x, _) = cond(1);
        let pass_a = gen.teacher_forced(&[vec![BOS, 4, EOS]], &g_x, &[1.0, 0.0]).unwrap();
        let pass_b = gen.teacher_forced(&[vec![BOS, 4, EOS]], &g_x, &[0.0, 1.0]).unwrap();
        assert_ne!(pass_a.step_logp[0][0], pass_b.step_logp[0][0]);
    }

    #[test]
    fn per_step_outputs_are_distributions() {
        let gen = tiny_gen(9, 12);
        let (g_x, c) = cond(2);
        let pass = gen
            .teacher_forced(&[vec![BOS, 4, 5, EOS], vec![BOS, 6, EOS]], &g_x, &c)
            .unwrap();
        for probs in &pass.probs {
            for row in probs.chunks(9) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn teacher_forced_gradients_match_finite_differences() {
        let mut gen = tiny_gen(6, 13);
        let (g_x, c) = cond(2);
        let seqs = vec![vec![BOS, 4, 5, EOS], vec![BOS, 5, EOS]];

        let pass = gen.teacher_forced(&seqs, &g_x, &c).unwrap();
        // Loss = mean NLL; d loss / d logp[b][t] = -1/valid for scored steps.
        let n_valid = pass.valid_steps as f64;
        let mut dlogp = vec![0.0; 2 * pass.scored_steps];
        for t in 0..pass.scored_steps {
            for b in 0..2 {
                if pass.mask2[t][b] {
                    dlogp[b * pass.scored_steps + t] = -1.0 / n_valid;
                }
            }
        }
        for p in gen.params_mut() {
            p.zero_grad();
        }
        let back = gen.backward(&pass, &dlogp, None);

        let h = 1e-5;
        // Every parameter tensor, every coordinate.
        let loss = |g: &ExplanationGenerator| g.teacher_forced(&seqs, &g_x, &c).unwrap().nll();
        macro_rules! check_param {
            ($field:expr, $name:expr) => {{
                let n = $field.len();
                for i in 0..n {
                    let orig = $field.value[i];
                    $field.value[i] = orig + h;
                    let lp = loss(&gen);
                    $field.value[i] = orig - h;
                    let lm = loss(&gen);
                    $field.value[i] = orig;
                    let fd = (lp - lm) / (2.0 * h);
                    let an = $field.grad[i];
                    assert!(
                        (fd - an).abs() < 1e-6,
                        "{} coord {}: fd {} vs analytic {}",
                        $name,
                        i,
                        fd,
                        an
                    );
                }
            }};
        }
        check_param!(gen.embedding.weight, "embedding");
        check_param!(gen.layer1.w_ih, "l1.w_ih");
        check_param!(gen.layer1.w_hh, "l1.w_hh");
        check_param!(gen.layer1.bias, "l1.bias");
        check_param!(gen.layer2.w_ih, "l2.w_ih");
        check_param!(gen.layer2.w_hh, "l2.w_hh");
        check_param!(gen.layer2.bias, "l2.bias");
        check_param!(gen.output.weight, "out.w");
        check_param!(gen.output.bias, "out.b");

        // Conditioning gradient.
        for i in 0..g_x.len() {
            let mut gp = g_x.clone();
            gp[i] += h;
            let lp = gen.teacher_forced(&seqs, &gp, &c).unwrap().nll();
            gp[i] -= 2.0 * h;
            let lm = gen.teacher_forced(&seqs, &gp, &c).unwrap().nll();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - back.d_gx[i]).abs() < 1e-6, "g_x coord {i}");
        }
    }

    // ── Reward model ───────────────────────────────────────────────────────

    fn zero_rm(k: usize) -> RewardModel {
        let mut rng = component_rng(0, "test-rm");
        let mut rm = RewardModel {
            embedding: Embedding::new(8, 4, &mut rng),
            head: Linear::new(4, k, &mut rng),
            num_classes: k,
            meta: RewardTrainMeta { converged: true, train_accuracy: 1.0, epochs: 0 },
        };
        rm.head.weight.value.iter_mut().for_each(|w| *w = 0.0);
        rm.head.bias.value.iter_mut().for_each(|b| *b = 0.0);
        rm
    }

    #[test]
    fn zero_weight_model_scores_uniform() {
        let rm = zero_rm(4);
        assert!((reward(&rm, &[4, 5, 6], 2) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_bag_scores_the_uniform_prior_exactly() {
        let mut rng = component_rng(1, "test-rm");
        let rm = RewardModel {
            embedding: Embedding::new(8, 4, &mut rng),
            head: Linear::new(4, 3, &mut rng),
            num_classes: 3,
            meta: RewardTrainMeta { converged: true, train_accuracy: 1.0, epochs: 0 },
        };
        // Only reserved tokens: bag is empty regardless of model weights.
        let probs = rm.score(&[BOS, EOS, PAD]);
        assert_eq!(probs, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn reward_ignores_padding() {
        let mut rng = component_rng(2, "test-rm");
        let rm = RewardModel {
            embedding: Embedding::new(8, 4, &mut rng),
            head: Linear::new(4, 2, &mut rng),
            num_classes: 2,
            meta: RewardTrainMeta { converged: true, train_accuracy: 1.0, epochs: 0 },
        };
        let a = rm.score(&[4, 6, 5]);
        let b = rm.score(&[4, 6, 5, PAD, PAD, PAD]);
        assert_eq!(a, b);
    }

    #[test]
    fn separable_corpus_reaches_full_accuracy() {
        // Class 0 sentences use token 4, class 1 sentences token 5.
        let sequences = vec![
            vec![BOS, 4, EOS],
            vec![BOS, 4, 4, EOS],
            vec![BOS, 5, EOS],
            vec![BOS, 5, 5, EOS],
        ];
        let labels = vec![0, 0, 1, 1];
        let rm = train_reward_model(&sequences, &labels, 6, 2, &RewardModelConfig::default()).unwrap();
        assert!(rm.meta.converged);
        assert_eq!(rm.meta.train_accuracy, 1.0);
        // Training stops at the accuracy target, so probabilities may still be
        // soft; what matters for the learning signal is the ordering.
        assert!(reward(&rm, &[4], 0) > 0.5);
        assert!(reward(&rm, &[5], 1) > 0.5);
        assert!(reward(&rm, &[4], 0) > reward(&rm, &[4], 1));
        assert!(reward(&rm, &[5], 1) > reward(&rm, &[5], 0));
    }

    #[test]
    fn retraining_is_deterministic() {
        let sequences = vec![vec![BOS, 4, EOS], vec![BOS, 5, EOS]];
        let labels = vec![0, 1];
        let cfg = RewardModelConfig::default();
        let a = train_reward_model(&sequences, &labels, 6, 2, &cfg).unwrap();
        let b = train_reward_model(&sequences, &labels, 6, 2, &cfg).unwrap();
        assert!(a
            .embedding
            .weight
            .value
            .iter()
            .zip(&b.embedding.weight.value)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a
            .head
            .weight
            .value
            .iter()
            .zip(&b.head.weight.value)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn missing_class_is_rejected() {
        let res = train_reward_model(
            &[vec![BOS, 4, EOS]],
            &[0],
            6,
            2,
            &RewardModelConfig::default(),
        );
        assert!(res.is_err());
    }
}
