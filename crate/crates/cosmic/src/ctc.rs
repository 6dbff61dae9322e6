//! CTC compressor: conv-subsampled transformer encoder with a word-level
//! CTC head, the CTC loss (log-space forward algorithm with analytic
//! gradients), an exhaustive path-enumeration oracle, greedy decoding, and
//! the posterior-driven frame compression policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureSet;
use crate::config::derive_seed;
use crate::corpus::{Corpus, Grammar, Split, UtteranceRecord};
use crate::error::{Error, Result};
use crate::tensor::nn::{init_normal, stack_forward, StackConfig, StackParams};
use crate::tensor::tape::Grads;
use crate::tensor::{
    clip_global_norm, AdamW, ParamId, ParamStore, Scalar, Tape, TapeBinding, Tensor,
    Var,
};

/// Blank label index. Fixed; word labels start at 1.
pub const BLANK: usize = 0;

// ---- CTC loss ----

fn lse2<T: Scalar>(a: T, b: T) -> T {
    let m = a.max_val(b);
    if m <= T::log_zero() {
        return T::log_zero();
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3<T: Scalar>(a: T, b: T, c: T) -> T {
    lse2(lse2(a, b), c)
}

/// Minimum frame count needed to align `labels` under CTC collapse rules.
pub fn min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

fn validate_labels(labels: &[usize], classes: usize) -> Result<()> {
    for &l in labels {
        if l == BLANK || l >= classes {
            return Err(Error::Contract(format!(
                "CTC label {l} out of range 1..{classes}"
            )));
        }
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// CTC loss over per-frame logits (classes = vocab + blank at index 0).
    /// Loss = -log sum over all frame paths collapsing to `labels`, computed
    /// by the log-space forward algorithm; the backward rule uses the
    /// alpha-beta state posteriors.
    pub fn ctc_loss(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (t_frames, classes) = (tl.rows(), tl.cols());
        validate_labels(labels, classes)?;
        let required = min_frames(labels);
        if t_frames < required {
            return Err(Error::CtcInfeasible {
                frames: t_frames,
                required,
            });
        }
        // extended label sequence with blanks between and around labels
        let u_len = 2 * labels.len() + 1;
        let ext: Vec<usize> = (0..u_len)
            .map(|u| if u % 2 == 1 { labels[u / 2] } else { BLANK })
            .collect();
        // log softmax rows
        let probs = tl.softmax_rows();
        let lp: Vec<T> = probs.data().iter().map(|&p| p.ln()).collect();
        let lz = T::log_zero();
        let idx = |t: usize, u: usize| t * u_len + u;
        let mut alpha = vec![lz; t_frames * u_len];
        alpha[idx(0, 0)] = lp[ext[0]];
        if u_len > 1 {
            alpha[idx(0, 1)] = lp[ext[1]];
        }
        for t in 1..t_frames {
            for u in 0..u_len {
                let stay = alpha[idx(t - 1, u)];
                let prev = if u >= 1 { alpha[idx(t - 1, u - 1)] } else { lz };
                let skip = if u >= 2 && ext[u] != BLANK && ext[u] != ext[u - 2] {
                    alpha[idx(t - 1, u - 2)]
                } else {
                    lz
                };
                alpha[idx(t, u)] = lp[t * classes + ext[u]] + lse3(stay, prev, skip);
            }
        }
        let total = if u_len > 1 {
            lse2(alpha[idx(t_frames - 1, u_len - 1)], alpha[idx(t_frames - 1, u_len - 2)])
        } else {
            alpha[idx(t_frames - 1, 0)]
        };
        let loss_val = -total;

        let needs = self.requires_grad(logits);
        let back = needs.then(|| {
            // beta pass and posterior-based gradient, computed eagerly
            let mut beta = vec![lz; t_frames * u_len];
            beta[idx(t_frames - 1, u_len - 1)] = lp[(t_frames - 1) * classes + ext[u_len - 1]];
            if u_len > 1 {
                beta[idx(t_frames - 1, u_len - 2)] = lp[(t_frames - 1) * classes + ext[u_len - 2]];
            }
            for t in (0..t_frames - 1).rev() {
                for u in 0..u_len {
                    let stay = beta[idx(t + 1, u)];
                    let next = if u + 1 < u_len { beta[idx(t + 1, u + 1)] } else { lz };
                    let skip = if u + 2 < u_len && ext[u + 2] != BLANK && ext[u + 2] != ext[u] {
                        beta[idx(t + 1, u + 2)]
                    } else {
                        lz
                    };
                    beta[idx(t, u)] = lp[t * classes + ext[u]] + lse3(stay, next, skip);
                }
            }
            // d(-logP)/d logit[t,k] = y[t,k] - sum_{u: ext[u]=k} gamma_t(u)
            let mut dlogits = vec![T::zero(); t_frames * classes];
            for t in 0..t_frames {
                let mut gamma_k = vec![lz; classes];
                for u in 0..u_len {
                    let g = alpha[idx(t, u)] + beta[idx(t, u)] - lp[t * classes + ext[u]] - total;
                    gamma_k[ext[u]] = lse2(gamma_k[ext[u]], g);
                }
                for k in 0..classes {
                    let gsum = if gamma_k[k] <= T::log_zero() {
                        T::zero()
                    } else {
                        gamma_k[k].exp()
                    };
                    dlogits[t * classes + k] = probs.data()[t * classes + k] - gsum;
                }
            }
            Box::new(move |_vals: &[Tensor<T>], g: &[T], gr: &mut Grads<T>| {
                if gr.wants(logits) {
                    let buf = gr.buf(logits);
                    for (o, &d) in buf.iter_mut().zip(&dlogits) {
                        *o += g[0] * d;
                    }
                }
            }) as Box<dyn FnOnce(&[Tensor<T>], &[T], &mut Grads<T>)>
        });
        Ok(self.push_external(Tensor::scalar(loss_val), needs, back))
    }
}

/// Exhaustive path-enumeration oracle: sums the probability of every
/// frame-level path whose collapse equals `labels`. Exponential in T, so
/// guarded at T <= 10. Returns +inf when no path maps to the labels.
pub fn ctc_brute_force_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (t_frames, classes) = (logits.rows(), logits.cols());
    if t_frames > 10 {
        return Err(Error::Contract(format!(
            "brute-force CTC limited to 10 frames, got {t_frames}"
        )));
    }
    validate_labels(labels, classes)?;
    let probs = logits.to_f64().softmax_rows();
    let mut total = 0.0f64;
    let mut path = vec![0usize; t_frames];
    loop {
        // collapse: merge repeats, then drop blanks
        let mut collapsed = Vec::new();
        let mut prev = usize::MAX;
        for &p in &path {
            if p != prev && p != BLANK {
                collapsed.push(p);
            }
            prev = p;
        }
        if collapsed == labels {
            let mut prob = 1.0;
            for (t, &p) in path.iter().enumerate() {
                prob *= probs.at2(t, p);
            }
            total += prob;
        }
        // next path in odometer order
        let mut carry = true;
        for slot in path.iter_mut().rev() {
            *slot += 1;
            if *slot < classes {
                carry = false;
                break;
            }
            *slot = 0;
        }
        if carry {
            break;
        }
    }
    if total == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(-total.ln())
    }
}

// ---- posteriors, decoding, compression ----

/// Per-frame label distribution (rows sum to 1).
#[derive(Debug, Clone)]
pub struct PosteriorGrid<T: Scalar> {
    pub probs: Tensor<T>,
}

impl<T: Scalar> PosteriorGrid<T> {
    pub fn from_logits(logits: &Tensor<T>) -> Self {
        PosteriorGrid {
            probs: logits.softmax_rows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..self.probs.rows() {
            let s: f64 = self.probs.row(i).iter().map(|v| v.to_f64()).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::Contract(format!("posterior row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.probs.rows()
    }
}

/// Per-frame argmax, merge repeats, drop blanks.
pub fn greedy_ctc_decode<T: Scalar>(posteriors: &PosteriorGrid<T>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for t in 0..posteriors.frames() {
        let a = posteriors.probs.argmax_row(t);
        if a != prev && a != BLANK {
            out.push(a);
        }
        prev = a;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum CompressPolicy {
    /// Group consecutive frames by greedy label, drop blank groups, average
    /// the hidden vectors per retained group.
    SegmentAverage,
    /// Drop frames whose blank posterior exceeds `tau`; keep the rest
    /// unmerged, labeled by their best non-blank class.
    BlankDrop { tau: f64 },
}

impl Default for CompressPolicy {
    fn default() -> Self {
        CompressPolicy::SegmentAverage
    }
}

/// Compressed acoustic sequence: one vector per retained frame group, with
/// source-frame spans (inclusive) and non-blank greedy labels.
#[derive(Debug, Clone)]
pub struct CompressedSequence<T: Scalar> {
    pub vectors: Tensor<T>,
    pub spans: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> CompressedSequence<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn empty(dim: usize) -> Self {
        CompressedSequence {
            vectors: Tensor::zeros(&[0, dim]),
            spans: Vec::new(),
            labels: Vec::new(),
        }
    }
}

/// Compress hidden frames according to the CTC posterior distribution.
/// An all-blank stream yields a valid empty sequence.
pub fn compress<T: Scalar>(
    posteriors: &PosteriorGrid<T>,
    hidden: &Tensor<T>,
    policy: CompressPolicy,
) -> Result<CompressedSequence<T>> {
    let t_frames = posteriors.frames();
    if hidden.rows() != t_frames {
        return Err(Error::ShapeMismatch {
            op: "compress",
            lhs: vec![t_frames],
            rhs: hidden.shape().to_vec(),
        });
    }
    let d = hidden.cols();
    match policy {
        CompressPolicy::SegmentAverage => {
            let mut groups: Vec<(usize, usize, usize)> = Vec::new(); // (label, start, end)
            for t in 0..t_frames {
                let a = posteriors.probs.argmax_row(t);
                match groups.last_mut() {
                    Some((label, _, end)) if *label == a && *end + 1 == t => *end = t,
                    _ => groups.push((a, t, t)),
                }
            }
            let retained: Vec<&(usize, usize, usize)> =
                groups.iter().filter(|(l, _, _)| *l != BLANK).collect();
            if retained.is_empty() {
                return Ok(CompressedSequence::empty(d));
            }
            let mut vectors = vec![T::zero(); retained.len() * d];
            let mut spans = Vec::with_capacity(retained.len());
            let mut labels = Vec::with_capacity(retained.len());
            for (m, (label, start, end)) in retained.iter().enumerate() {
                let count = T::from_f64((end - start + 1) as f64);
                for t in *start..=*end {
                    for j in 0..d {
                        vectors[m * d + j] += hidden.at2(t, j) / count;
                    }
                }
                spans.push((*start, *end));
                labels.push(*label);
            }
            Ok(CompressedSequence {
                vectors: Tensor::from_vec(&[retained.len(), d], vectors)?,
                spans,
                labels,
            })
        }
        CompressPolicy::BlankDrop { tau } => {
            let mut keep = Vec::new();
            for t in 0..t_frames {
                if posteriors.probs.at2(t, BLANK).to_f64() <= tau {
                    keep.push(t);
                }
            }
            if keep.is_empty() {
                return Ok(CompressedSequence::empty(d));
            }
            let mut vectors = vec![T::zero(); keep.len() * d];
            let mut spans = Vec::new();
            let mut labels = Vec::new();
            for (m, &t) in keep.iter().enumerate() {
                vectors[m * d..(m + 1) * d].copy_from_slice(hidden.row(t));
                spans.push((t, t));
                // best non-blank class
                let row = posteriors.probs.row(t);
                let mut best = 1;
                for (k, &p) in row.iter().enumerate().skip(1) {
                    if p > row[best] {
                        best = k;
                    }
                }
                labels.push(best);
            }
            Ok(CompressedSequence {
                vectors: Tensor::from_vec(&[keep.len(), d], vectors)?,
                spans,
                labels,
            })
        }
    }
}

// ---- compressor model ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtcModelConfig {
    pub n_mels: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    /// Word classes excluding blank.
    pub vocab: usize,
}

impl Default for CtcModelConfig {
    fn default() -> Self {
        CtcModelConfig {
            n_mels: 80,
            conv_channels: 8,
            conv_kernel: 3,
            conv_stride: 2,
            dim: 64,
            heads: 4,
            ffn_dim: 256,
            layers: 2,
            vocab: 64,
        }
    }
}

impl CtcModelConfig {
    pub fn stack(&self) -> StackConfig {
        StackConfig {
            dim: self.dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            layers: self.layers,
            causal: false,
            rope: true,
        }
    }

    pub fn classes(&self) -> usize {
        self.vocab + 1
    }

    fn conv_out(&self, len: usize) -> usize {
        (len + 2 - self.conv_kernel) / self.conv_stride + 1
    }

    /// Frame count after conv subsampling.
    pub fn subsampled(&self, t: usize) -> usize {
        self.conv_out(t)
    }
}

#[derive(Debug, Clone)]
pub struct CtcCompressor {
    pub config: CtcModelConfig,
    conv_w: ParamId,
    conv_b: ParamId,
    in_proj: ParamId,
    stack: StackParams,
    head_w: ParamId,
    head_b: ParamId,
}

impl CtcCompressor {
    pub fn create<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: &CtcModelConfig,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.stack().validate()?;
        let k = config.conv_kernel;
        let c = config.conv_channels;
        let conv_w = store.add(
            &format!("{prefix}.conv.weight"),
            init_normal(&[c, k, k, 1], 0.1, rng),
            trainable,
        )?;
        let conv_b = store.add(&format!("{prefix}.conv.bias"), Tensor::zeros(&[c]), trainable)?;
        let f_out = config.conv_out(config.n_mels);
        let in_proj = store.add(
            &format!("{prefix}.in_proj"),
            init_normal(&[f_out * c, config.dim], 0.02, rng),
            trainable,
        )?;
        let stack = StackParams::create(store, prefix, &config.stack(), trainable, rng)?;
        let head_w = store.add(
            &format!("{prefix}.head.weight"),
            init_normal(&[config.dim, config.classes()], 0.02, rng),
            trainable,
        )?;
        let head_b = store.add(
            &format!("{prefix}.head.bias"),
            Tensor::zeros(&[config.classes()]),
            trainable,
        )?;
        Ok(CtcCompressor {
            config: config.clone(),
            conv_w,
            conv_b,
            in_proj,
            stack,
            head_w,
            head_b,
        })
    }

    /// mel frames [T, n_mels] -> (hidden [T', dim], logits [T', vocab+1]).
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        bind: &mut TapeBinding,
        mel: &Tensor<T>,
    ) -> Result<(Var, Var)> {
        if mel.cols() != self.config.n_mels {
            return Err(Error::ShapeMismatch {
                op: "ctc_forward",
                lhs: mel.shape().to_vec(),
                rhs: vec![self.config.n_mels],
            });
        }
        let t_in = mel.rows();
        let x = tape.constant(Tensor::from_vec(&[t_in, self.config.n_mels, 1], mel.data().to_vec())?);
        let wv = bind.var(tape, store, self.conv_w);
        let bv = bind.var(tape, store, self.conv_b);
        let s = self.config.conv_stride;
        let conv = tape.conv2d(x, wv, bv, (s, s), (1, 1))?;
        let act = tape.gelu(conv);
        let t_out = tape.shape(act)[0];
        let flat_dim = tape.shape(act)[1] * tape.shape(act)[2];
        let flat = tape.reshape(act, &[t_out, flat_dim])?;
        let pv = bind.var(tape, store, self.in_proj);
        let proj = tape.matmul(flat, pv)?;
        let hidden = stack_forward(tape, store, bind, &self.stack, proj, &self.config.stack())?;
        let hw = bind.var(tape, store, self.head_w);
        let hb = bind.var(tape, store, self.head_b);
        let logits_raw = tape.matmul(hidden, hw)?;
        let logits = tape.add_row(logits_raw, hb)?;
        Ok((hidden, logits))
    }

    /// Inference pass on a throwaway tape: posteriors + hidden states.
    pub fn infer<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        mel: &Tensor<T>,
    ) -> Result<(PosteriorGrid<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let mut bind = TapeBinding::frozen(store);
        let (hidden, logits) = self.forward(&mut tape, store, &mut bind, mel)?;
        let post = PosteriorGrid::from_logits(tape.value(logits));
        Ok((post, tape.value(hidden).clone()))
    }
}

// ---- label mapping ----

/// Word -> CTC label (index in `Grammar::all_words()` + 1).
pub fn label_table(grammar: &Grammar) -> std::collections::HashMap<String, usize> {
    grammar
        .all_words()
        .into_iter()
        .enumerate()
        .map(|(i, w)| (w, i + 1))
        .collect()
}

pub fn text_labels(table: &std::collections::HashMap<String, usize>, text: &str) -> Result<Vec<usize>> {
    text.split_whitespace()
        .map(|w| {
            table
                .get(w)
                .copied()
                .ok_or_else(|| Error::UnknownToken(w.to_string()))
        })
        .collect()
}

pub fn labels_to_text(grammar: &Grammar, labels: &[usize]) -> String {
    let words = grammar.all_words();
    labels
        .iter()
        .filter_map(|&l| words.get(l - 1).cloned())
        .collect::<Vec<_>>()
        .join(" ")
}

// ---- compressor training ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CtcTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub eval_every: usize,
    pub eval_utterances: usize,
    /// Stop once dev greedy-WER falls below this value (0 disables).
    pub early_stop_wer: f64,
    pub checkpoint_every: usize,
    pub train_domains: Vec<String>,
    pub seed: u64,
}

impl Default for CtcTrainConfig {
    fn default() -> Self {
        CtcTrainConfig {
            steps: 5000,
            batch: 8,
            peak_lr: 3e-4,
            warmup_steps: 200,
            weight_decay: 0.01,
            clip_norm: 1.0,
            eval_every: 200,
            eval_utterances: 64,
            early_stop_wer: 0.05,
            checkpoint_every: 1000,
            train_domains: vec!["clean".into()],
            seed: 0,
        }
    }
}

impl CtcTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 {
            return Err(Error::config("peak_lr must be > 0"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CtcHistoryRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_wer: Option<f64>,
}

/// Greedy-decode WER over a set of utterances.
pub fn greedy_wer(
    compressor: &CtcCompressor,
    store: &ParamStore<f32>,
    grammar: &Grammar,
    utts: &[&UtteranceRecord],
    features: &FeatureSet,
) -> Result<f64> {
    let words = grammar.all_words();
    let mut total = crate::eval::WerCounts::default();
    for u in utts {
        let mel = features.get(&u.id)?;
        let (post, _) = compressor.infer(store, mel)?;
        let decoded: Vec<String> = greedy_ctc_decode(&post)
            .into_iter()
            .filter_map(|l| words.get(l - 1).cloned())
            .collect();
        let reference: Vec<String> = u.text.split_whitespace().map(|s| s.to_string()).collect();
        let (_, counts, _) = crate::eval::wer(&reference, &decoded)?;
        total.add(&counts);
    }
    Ok(total.wer())
}

/// Train the compressor on (mel, transcript) pairs with AdamW and the
/// linear warmup/decay schedule. Batches are resampled per step from a
/// step-derived seed, so resuming from a checkpoint replays identically.
pub fn train_ctc(
    compressor: &CtcCompressor,
    store: &mut ParamStore<f32>,
    optimizer: &mut AdamW<f32>,
    corpus: &Corpus,
    features: &FeatureSet,
    config: &CtcTrainConfig,
    train_domains: &[String],
    start_step: usize,
    mut on_checkpoint: impl FnMut(usize, &ParamStore<f32>, &AdamW<f32>) -> Result<()>,
) -> Result<Vec<CtcHistoryRow>> {
    config.validate()?;
    let grammar = &corpus.spec.grammar;
    let table = label_table(grammar);
    let train: Vec<&UtteranceRecord> = corpus
        .utterances
        .iter()
        .filter(|u| u.split == Split::Train && train_domains.contains(&u.domain))
        .collect();
    if train.is_empty() {
        return Err(Error::config("no training utterances in the selected domains"));
    }
    let dev: Vec<&UtteranceRecord> = corpus
        .utterances
        .iter()
        .filter(|u| u.split == Split::Dev && train_domains.contains(&u.domain))
        .take(config.eval_utterances)
        .collect();
    let mut history = Vec::new();
    let trainable = store.trainable_ids();
    for step in start_step..config.steps {
        let lr = crate::training::lr_schedule(step + 1, config.peak_lr, config.warmup_steps, config.steps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("ctc-step/{step}")));
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(store);
        let mut losses = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let u = train[rng.gen_range(0..train.len())];
            let mel = features.get(&u.id)?;
            let (_, logits) = compressor.forward(&mut tape, store, &mut bind, mel)?;
            let labels = text_labels(&table, &u.text)?;
            losses.push(tape.ctc_loss(logits, &labels)?);
        }
        let loss = tape.mean_of(&losses)?;
        let loss_val = tape.value(loss).item() as f64;
        if !loss_val.is_finite() {
            return Err(Error::TrainAbort(format!(
                "non-finite CTC loss {loss_val} at step {step}"
            )));
        }
        tape.backward(loss)?;
        let mut grads: Vec<(ParamId, Tensor<f32>)> = Vec::with_capacity(trainable.len());
        for &id in &trainable {
            if let Some(g) = bind.grad(&tape, id) {
                grads.push((id, g));
            }
        }
        clip_global_norm(&mut grads, config.clip_norm);
        optimizer.step(store, &grads, lr)?;
        drop(tape);

        let mut row = CtcHistoryRow {
            step,
            lr,
            loss: loss_val,
            dev_wer: None,
        };
        let step1 = step + 1;
        if config.eval_every > 0 && (step1 % config.eval_every == 0 || step1 == config.steps) && !dev.is_empty() {
            let wer = greedy_wer(compressor, store, grammar, &dev, features)?;
            row.dev_wer = Some(wer);
            history.push(row);
            if config.early_stop_wer > 0.0 && wer < config.early_stop_wer {
                on_checkpoint(step1, store, optimizer)?;
                break;
            }
        } else {
            history.push(row);
        }
        if config.checkpoint_every > 0 && step1 % config.checkpoint_every == 0 {
            on_checkpoint(step1, store, optimizer)?;
        }
    }
    let done_step = start_step + history.len();
    on_checkpoint(done_step, store, optimizer)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_grad_at, rand_tensor};

    #[test]
    fn single_frame_single_label() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::from_vec(&[1, 3], vec![0.3, 1.7, -0.2]).unwrap());
        let loss = tape.ctc_loss(logits, &[1]).unwrap();
        let probs = Tensor::from_vec(&[1, 3], vec![0.3, 1.7, -0.2])
            .unwrap()
            .softmax_rows();
        let expected = -probs.at2(0, 1).ln();
        assert!((tape.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn two_frame_uniform_hand_case() {
        // T=2, classes {blank, a}, uniform posteriors: paths a-, -a, aa
        // collapse to [a]; total prob 3/4; loss = -ln 0.75
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 2]));
        let loss = tape.ctc_loss(logits, &[1]).unwrap();
        let expected = -(0.75f64).ln();
        assert!(
            (tape.value(loss).item() - expected).abs() < 1e-12,
            "got {}, want {expected}",
            tape.value(loss).item()
        );
        // brute force agrees
        let bf = ctc_brute_force_loss(&Tensor::<f64>::zeros(&[2, 2]), &[1]).unwrap();
        assert!((bf - expected).abs() < 1e-12);
    }

    #[test]
    fn brute_force_empty_labels_all_blank_path() {
        let logits = Tensor::from_vec(&[2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        // only path --: prob 0.25
        let bf = ctc_brute_force_loss(&logits, &[]).unwrap();
        assert!((bf + (0.25f64).ln()).abs() < 1e-12);
        // forward algorithm handles empty labels identically
        let mut tape = Tape::<f64>::new();
        let lv = tape.constant(logits);
        let loss = tape.ctc_loss(lv, &[]).unwrap();
        assert!((tape.value(loss).item() - bf).abs() < 1e-12);
    }

    #[test]
    fn impossible_label_is_infinite_or_error() {
        // brute force: probability 0 -> +inf sentinel
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        let bf = ctc_brute_force_loss(&logits, &[1, 2]).unwrap();
        assert!(bf.is_infinite());
        // forward algorithm: infeasible error
        let mut tape = Tape::<f64>::new();
        let lv = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.ctc_loss(lv, &[1, 2]),
            Err(Error::CtcInfeasible { .. })
        ));
        // repeated label needs a separating blank: [1,1] needs 3 frames
        let mut tape = Tape::<f64>::new();
        let lv = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.ctc_loss(lv, &[1, 1]).is_err());
    }

    #[test]
    fn forward_matches_brute_force_on_random_instances() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let mut checked = 0;
        while checked < 200 {
            let t = rng.gen_range(1..=8);
            let l = rng.gen_range(0..=3usize);
            let v = rng.gen_range(1..=3usize);
            let labels: Vec<usize> = (0..l).map(|_| rng.gen_range(1..=v)).collect();
            if min_frames(&labels) > t {
                continue;
            }
            let logits = rand_tensor::<f64>(&[t, v + 1], &mut rng);
            let bf = ctc_brute_force_loss(&logits, &labels).unwrap();
            let mut tape = Tape::new();
            let lv = tape.constant(logits);
            let fwd = tape.ctc_loss(lv, &labels).unwrap();
            let got = tape.value(fwd).item();
            assert!(
                (got - bf).abs() < 1e-6,
                "T={t} labels={labels:?}: forward {got} vs brute {bf}"
            );
            checked += 1;
        }
    }

    #[test]
    fn loss_monotone_in_correct_label_probability() {
        // raising the logit of the correct label at one frame lowers loss
        let base = Tensor::from_vec(&[3, 3], vec![0.2, 0.1, -0.3, 0.0, 0.5, 0.1, -0.2, 0.3, 0.0])
            .unwrap();
        let labels = vec![1, 2];
        let mut prev = f64::INFINITY;
        for bump in [0.0, 0.5, 1.0, 2.0] {
            let mut t = base.clone();
            let v = t.at2(1, 1) + bump;
            t.set2(1, 1, v);
            let mut tape = Tape::new();
            let lv = tape.constant(t);
            let loss = tape.ctc_loss(lv, &labels).unwrap();
            let val = tape.value(loss).item();
            assert!(val < prev, "loss not decreasing: {val} >= {prev}");
            prev = val;
        }
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..20 {
            let t = rng.gen_range(2..=6);
            let v = rng.gen_range(2..=3usize);
            let mut labels = Vec::new();
            for _ in 0..rng.gen_range(1..=2usize) {
                labels.push(rng.gen_range(1..=v));
            }
            if min_frames(&labels) > t {
                continue;
            }
            let logits = rand_tensor::<f64>(&[t, v + 1], &mut rng);
            let labels2 = labels.clone();
            check_grad_at(
                &[logits],
                move |tape, vars| tape.ctc_loss(vars[0], &labels2),
                1e-4,
            );
        }
    }

    #[test]
    fn greedy_decode_collapse_rules() {
        // argmax stream [-, a, a, -, b] -> [a, b]
        let p = PosteriorGrid::from_logits(
            &Tensor::from_vec(
                &[5, 3],
                vec![
                    5.0, 0.0, 0.0, // blank
                    0.0, 5.0, 0.0, // a
                    0.0, 5.0, 0.0, // a
                    5.0, 0.0, 0.0, // blank
                    0.0, 0.0, 5.0, // b
                ],
            )
            .unwrap(),
        );
        assert_eq!(greedy_ctc_decode(&p), vec![1, 2]);
        // all blank -> empty
        let p = PosteriorGrid::from_logits(&Tensor::from_vec(&[3, 2], vec![5.0, 0.0, 5.0, 0.0, 5.0, 0.0]).unwrap());
        assert!(greedy_ctc_decode(&p).is_empty());
        // [a, a, -, a] -> [a, a]
        let p = PosteriorGrid::from_logits(
            &Tensor::from_vec(
                &[4, 2],
                vec![0.0, 5.0, 0.0, 5.0, 5.0, 0.0, 0.0, 5.0],
            )
            .unwrap(),
        );
        assert_eq!(greedy_ctc_decode(&p), vec![1, 1]);
    }

    #[test]
    fn posterior_rows_sum_to_one() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = PosteriorGrid::from_logits(&rand_tensor::<f64>(&[6, 5], &mut rng));
        grid.validate().unwrap();
    }

    #[test]
    fn compress_segment_average_definition() {
        // argmax [-, a, a, -, b] with hidden rows h0..h4
        let logits = Tensor::from_vec(
            &[5, 3],
            vec![
                5.0, 0.0, 0.0,
                0.0, 5.0, 0.0,
                0.0, 5.0, 0.0,
                5.0, 0.0, 0.0,
                0.0, 0.0, 5.0,
            ],
        )
        .unwrap();
        let hidden = Tensor::from_vec(
            &[5, 2],
            vec![0.0, 0.0, 1.0, 10.0, 3.0, 30.0, 9.0, 9.0, 7.0, 70.0],
        )
        .unwrap();
        let post = PosteriorGrid::from_logits(&logits);
        let c = compress(&post, &hidden, CompressPolicy::SegmentAverage).unwrap();
        assert_eq!(c.labels, vec![1, 2]);
        assert_eq!(c.spans, vec![(1, 2), (4, 4)]);
        assert_eq!(c.vectors.row(0), &[2.0, 20.0]); // (h1+h2)/2
        assert_eq!(c.vectors.row(1), &[7.0, 70.0]); // h4
    }

    #[test]
    fn compress_identity_when_no_blanks_and_distinct() {
        let logits = Tensor::from_vec(
            &[3, 4],
            vec![
                0.0, 5.0, 0.0, 0.0,
                0.0, 0.0, 5.0, 0.0,
                0.0, 0.0, 0.0, 5.0,
            ],
        )
        .unwrap();
        let hidden = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let post = PosteriorGrid::from_logits(&logits);
        let c = compress(&post, &hidden, CompressPolicy::SegmentAverage).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.vectors.data(), hidden.data());
        assert_eq!(c.labels, vec![1, 2, 3]);
    }

    #[test]
    fn compress_all_blank_gives_empty() {
        let logits = Tensor::from_vec(&[3, 2], vec![5.0, 0.0, 5.0, 0.0, 5.0, 0.0]).unwrap();
        let hidden = Tensor::<f64>::zeros(&[3, 4]);
        let post = PosteriorGrid::from_logits(&logits);
        for policy in [CompressPolicy::SegmentAverage, CompressPolicy::BlankDrop { tau: 0.5 }] {
            let c = compress(&post, &hidden, policy).unwrap();
            assert!(c.is_empty());
            assert_eq!(c.vectors.shape(), &[0, 4]);
        }
    }

    #[test]
    fn compress_length_equals_greedy_decode_length() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let t = rng.gen_range(1..12);
            let v = rng.gen_range(1..5usize);
            let logits = rand_tensor::<f64>(&[t, v + 1], &mut rng);
            let hidden = rand_tensor::<f64>(&[t, 3], &mut rng);
            let post = PosteriorGrid::from_logits(&logits);
            let c = compress(&post, &hidden, CompressPolicy::SegmentAverage).unwrap();
            assert_eq!(c.len(), greedy_ctc_decode(&post).len());
            // spans are disjoint, ordered, never blank-labeled
            for w in c.spans.windows(2) {
                assert!(w[0].1 < w[1].0);
            }
            assert!(c.labels.iter().all(|&l| l != BLANK));
        }
    }

    #[test]
    fn compressor_shapes_and_grad_smoke() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = CtcModelConfig {
            n_mels: 8,
            conv_channels: 2,
            dim: 8,
            heads: 2,
            ffn_dim: 16,
            layers: 1,
            vocab: 3,
            ..Default::default()
        };
        let mut store = ParamStore::<f64>::new();
        let comp = CtcCompressor::create(&mut store, "ctc", &cfg, true, &mut rng).unwrap();
        let mel = rand_tensor::<f64>(&[9, 8], &mut rng);
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(&store);
        let (hidden, logits) = comp.forward(&mut tape, &store, &mut bind, &mel).unwrap();
        assert_eq!(tape.shape(hidden), &[cfg.subsampled(9), 8]);
        assert_eq!(tape.shape(logits), &[cfg.subsampled(9), 4]);
        let loss = tape.ctc_loss(logits, &[1, 2]).unwrap();
        tape.backward(loss).unwrap();
        // gradient reached the conv weights through the whole encoder
        let g = bind.grad(&tape, store.by_name("ctc.conv.weight").unwrap().0);
        assert!(g.is_some());
        assert!(g.unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn ctc_head_gradient_through_encoder_matches_fd() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = CtcModelConfig {
            n_mels: 6,
            conv_channels: 2,
            dim: 8,
            heads: 2,
            ffn_dim: 12,
            layers: 1,
            vocab: 2,
            ..Default::default()
        };
        let mut store = ParamStore::<f64>::new();
        let comp = CtcCompressor::create(&mut store, "ctc", &cfg, true, &mut rng).unwrap();
        let mel = rand_tensor::<f64>(&[7, 6], &mut rng);
        for target in ["ctc.head.weight", "ctc.conv.bias"] {
            crate::gradcheck::check_param_grad(
                &mut store,
                target,
                |tape, store, bind| {
                    let (_, logits) = comp.forward(tape, store, bind, &mel)?;
                    tape.ctc_loss(logits, &[1, 2])
                },
                1e-4,
            );
        }
    }
}
