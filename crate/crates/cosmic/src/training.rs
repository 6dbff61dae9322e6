//! Training loops: base-LM pretraining on synthetic text, instruction
//! tuning of the audio encoder + LoRA adapters with response-only loss,
//! uniform per-utterance instruction sampling, linear warmup/decay, and
//! checkpoint/freeze verification.
//!
//! Batches are drawn from per-step derived seeds, so a run resumed from a
//! checkpoint replays bit-for-bit.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::FeatureSet;
use crate::config::derive_seed;
use crate::corpus::{
    answer_for_slot, generate_sqa, train_frequencies, translate, Corpus, InstructionSample, Slot,
    Split, TaskKind, UtteranceRecord,
};
use crate::error::{Error, Result};
use crate::model::{AudioCache, CosmicModel, DecodeConfig};
use crate::prompting::{
    assemble_prompt, render_instruction, with_response, IclExample, InstructionTask, OrderMode,
};
use crate::tensor::archive::{self, ArchiveEntry};
use crate::tensor::{clip_global_norm, AdamW, ParamId, ParamStore, Tape, TapeBinding, Tensor};

// ---- learning-rate schedule ----

/// Linear ramp 0 -> peak over `warmup` steps, then linear decay to 0 at
/// `total`.
pub fn lr_schedule(step: usize, peak: f64, warmup: usize, total: usize) -> Result<f64> {
    if step > total {
        return Err(Error::Contract(format!(
            "schedule step {step} beyond total {total}"
        )));
    }
    if warmup > total {
        return Err(Error::config("warmup_steps beyond total_steps"));
    }
    if step <= warmup {
        if warmup == 0 {
            return Ok(peak);
        }
        return Ok(peak * step as f64 / warmup as f64);
    }
    Ok(peak * (total - step) as f64 / (total - warmup) as f64)
}

// ---- instruction sampling ----

/// Uniform draw over {ASR} + SQA pairs of the utterance. Also returns the
/// grammar slot for SQA picks so shot responses can be derived.
pub fn sample_instruction_with_slot(
    corpus: &Corpus,
    u: &UtteranceRecord,
    rng: &mut ChaCha8Rng,
) -> Result<(InstructionSample, Option<Slot>)> {
    let qas = generate_sqa(&corpus.spec.grammar, u)?;
    let pick = rng.gen_range(0..qas.len() + 1);
    if pick == 0 {
        Ok((
            InstructionSample {
                utterance_id: u.id.clone(),
                task: TaskKind::Asr,
                instruction: render_instruction(&InstructionTask::Asr)?,
                response: u.text.clone(),
            },
            None,
        ))
    } else {
        let qa = &qas[pick - 1];
        Ok((
            InstructionSample {
                utterance_id: u.id.clone(),
                task: TaskKind::Sqa,
                instruction: qa.question.clone(),
                response: qa.answer.clone(),
            },
            Some(qa.source_slot),
        ))
    }
}

pub fn sample_instruction(
    corpus: &Corpus,
    u: &UtteranceRecord,
    rng: &mut ChaCha8Rng,
) -> Result<InstructionSample> {
    Ok(sample_instruction_with_slot(corpus, u, rng)?.0)
}

// ---- checkpoints with optimizer state ----

pub fn save_training_checkpoint(
    dir: &Path,
    store: &ParamStore<f32>,
    optimizer: &AdamW<f32>,
    step: usize,
    extra: serde_json::Value,
) -> Result<()> {
    let mut entries: Vec<ArchiveEntry<f32>> = store
        .iter()
        .map(|(_, p)| ArchiveEntry {
            name: p.name.clone(),
            tensor: p.tensor.clone(),
            trainable: p.trainable,
        })
        .collect();
    for (name, m, v) in optimizer.export_state(store) {
        entries.push(ArchiveEntry {
            name: format!("opt.m.{name}"),
            tensor: m,
            trainable: false,
        });
        entries.push(ArchiveEntry {
            name: format!("opt.v.{name}"),
            tensor: v,
            trainable: false,
        });
    }
    let meta = serde_json::json!({
        "step": step,
        "opt_steps": optimizer.steps_taken(),
        "extra": extra,
    });
    archive::save(dir, &entries, &meta)
}

/// Load parameters (and optimizer state if present) back into a freshly
/// created model store. Returns the recorded step.
pub fn load_training_checkpoint(
    dir: &Path,
    store: &mut ParamStore<f32>,
    optimizer: Option<&mut AdamW<f32>>,
) -> Result<usize> {
    let (entries, meta) = archive::load::<f32>(dir)?;
    let mut opt_entries: HashMap<String, (Option<Tensor<f32>>, Option<Tensor<f32>>)> = HashMap::new();
    let mut seen = 0usize;
    for e in entries {
        if let Some(name) = e.name.strip_prefix("opt.m.") {
            opt_entries.entry(name.to_string()).or_default().0 = Some(e.tensor);
        } else if let Some(name) = e.name.strip_prefix("opt.v.") {
            opt_entries.entry(name.to_string()).or_default().1 = Some(e.tensor);
        } else {
            let (id, p) = store.by_name(&e.name).ok_or_else(|| {
                Error::Format(format!("checkpoint has unknown parameter `{}`", e.name))
            })?;
            if p.tensor.shape() != e.tensor.shape() {
                return Err(Error::Format(format!(
                    "checkpoint shape mismatch for `{}`",
                    e.name
                )));
            }
            store.get_mut(id).tensor = e.tensor;
            seen += 1;
        }
    }
    if seen != store.len() {
        return Err(Error::Format(format!(
            "checkpoint provides {seen} of {} parameters",
            store.len()
        )));
    }
    let step = meta["step"].as_u64().unwrap_or(0) as usize;
    if let Some(opt) = optimizer {
        let opt_steps = meta["opt_steps"].as_u64().unwrap_or(0);
        let mut state = Vec::new();
        for (name, (m, v)) in opt_entries {
            let (m, v) = (
                m.ok_or_else(|| Error::Format(format!("missing opt.m for `{name}`")))?,
                v.ok_or_else(|| Error::Format(format!("missing opt.v for `{name}`")))?,
            );
            state.push((name, m, v));
        }
        state.sort_by(|a, b| a.0.cmp(&b.0));
        opt.import_state(store, opt_steps, &state)?;
    }
    Ok(step)
}

/// Load only the parameters under `prefix` from an archive (for composing
/// the full model from separately trained compressor/LM checkpoints).
pub fn load_prefix_into_store(dir: &Path, store: &mut ParamStore<f32>, prefix: &str) -> Result<usize> {
    let (entries, _) = archive::load::<f32>(dir)?;
    let mut loaded = 0;
    for e in entries {
        if e.name.starts_with("opt.") {
            continue;
        }
        if !e.name.starts_with(prefix) {
            continue;
        }
        let (id, p) = store
            .by_name(&e.name)
            .ok_or_else(|| Error::Format(format!("archive parameter `{}` unknown to model", e.name)))?;
        if p.tensor.shape() != e.tensor.shape() {
            return Err(Error::Format(format!("shape mismatch loading `{}`", e.name)));
        }
        store.get_mut(id).tensor = e.tensor;
        loaded += 1;
    }
    if loaded == 0 {
        return Err(Error::Format(format!(
            "archive at {} holds nothing under prefix `{prefix}`",
            dir.display()
        )));
    }
    Ok(loaded)
}

// ---- freeze verification ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreezeRow {
    pub name: String,
    pub trainable: bool,
    pub changed: bool,
    pub max_abs_delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreezeReport {
    pub rows: Vec<FreezeRow>,
}

impl FreezeReport {
    pub fn changed_names(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| r.changed)
            .map(|r| r.name.as_str())
            .collect()
    }

    /// True when the changed set is exactly the trainable set.
    pub fn respects_partition(&self) -> bool {
        self.rows.iter().all(|r| r.changed == r.trainable)
    }
}

/// Bitwise tensor-by-tensor comparison of two checkpoints with matching
/// manifests.
pub fn verify_frozen(before_dir: &Path, after_dir: &Path) -> Result<FreezeReport> {
    let (before, _) = archive::load::<f32>(before_dir)?;
    let (after, _) = archive::load::<f32>(after_dir)?;
    verify_frozen_entries(&before, &after)
}

pub fn verify_frozen_entries(
    before: &[ArchiveEntry<f32>],
    after: &[ArchiveEntry<f32>],
) -> Result<FreezeReport> {
    let before: Vec<&ArchiveEntry<f32>> =
        before.iter().filter(|e| !e.name.starts_with("opt.")).collect();
    let after: Vec<&ArchiveEntry<f32>> =
        after.iter().filter(|e| !e.name.starts_with("opt.")).collect();
    if before.len() != after.len() {
        return Err(Error::Format(format!(
            "manifest mismatch: {} vs {} tensors",
            before.len(),
            after.len()
        )));
    }
    let mut rows = Vec::with_capacity(before.len());
    for (b, a) in before.iter().zip(&after) {
        if b.name != a.name || b.tensor.shape() != a.tensor.shape() {
            return Err(Error::Format(format!(
                "manifest mismatch at `{}` vs `{}`",
                b.name, a.name
            )));
        }
        let mut changed = false;
        let mut max_delta = 0f64;
        for (x, y) in b.tensor.data().iter().zip(a.tensor.data()) {
            if x.to_bits() != y.to_bits() {
                changed = true;
            }
            max_delta = max_delta.max((*x as f64 - *y as f64).abs());
        }
        rows.push(FreezeRow {
            name: b.name.clone(),
            trainable: b.trainable,
            changed,
            max_abs_delta: max_delta,
        });
    }
    Ok(FreezeReport { rows })
}

// ---- LM pretraining on synthetic text ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainMix {
    pub plain: f64,
    pub copy: f64,
    pub qa: f64,
    pub translate: f64,
    pub bias: f64,
    pub icl: f64,
}

impl Default for PretrainMix {
    fn default() -> Self {
        PretrainMix {
            plain: 0.10,
            copy: 0.25,
            qa: 0.25,
            translate: 0.15,
            bias: 0.15,
            icl: 0.10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmPretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub mix: PretrainMix,
    /// Chance that an ICL line's two sentences share a content word.
    pub icl_shared_word_prob: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for LmPretrainConfig {
    fn default() -> Self {
        LmPretrainConfig {
            steps: 1800,
            batch: 8,
            peak_lr: 6e-4,
            warmup_steps: 100,
            weight_decay: 0.01,
            clip_norm: 1.0,
            mix: PretrainMix::default(),
            icl_shared_word_prob: 0.7,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

/// One pretraining line in the exact token layout instruction tuning uses,
/// with the transcript tokens standing in for the audio span.
pub fn pretrain_line(
    corpus: &Corpus,
    train: &[&UtteranceRecord],
    config: &LmPretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let v = crate::corpus::Vocabulary::build(&corpus.spec.grammar);
    let g = &corpus.spec.grammar;
    let sent = |rng: &mut ChaCha8Rng| train[rng.gen_range(0..train.len())].text.clone();
    let mix = &config.mix;
    let total = mix.plain + mix.copy + mix.qa + mix.translate + mix.bias + mix.icl;
    let mut pick = rng.gen::<f64>() * total;
    let mut kind = 0usize;
    for (i, w) in [mix.plain, mix.copy, mix.qa, mix.translate, mix.bias, mix.icl]
        .iter()
        .enumerate()
    {
        pick -= w;
        if pick <= 0.0 {
            kind = i;
            break;
        }
    }
    let asr_inst = render_instruction(&InstructionTask::Asr)?;
    let block = |v: &crate::corpus::Vocabulary, sent_text: &str, inst: &str, resp: &str| -> Result<Vec<usize>> {
        let mut ids = vec![v.audio_open()];
        ids.extend(v.tokenize(sent_text)?);
        ids.push(v.audio_close());
        ids.extend(v.tokenize(inst)?);
        ids.push(v.resp());
        ids.extend(v.tokenize(resp)?);
        ids.push(v.eos());
        Ok(ids)
    };
    let mut ids = vec![v.bos()];
    match kind {
        0 => {
            ids.extend(v.tokenize(&sent(rng))?);
            ids.push(v.eos());
        }
        1 => {
            let s = sent(rng);
            ids.extend(block(&v, &s, &asr_inst, &s)?);
        }
        2 => {
            let s = sent(rng);
            let qas = crate::corpus::sqa_for_text(g, &s)?;
            let qa = &qas[rng.gen_range(0..qas.len())];
            ids.extend(block(&v, &s, &qa.question, &qa.answer)?);
        }
        3 => {
            let s = sent(rng);
            let lang = crate::corpus::LANG_NAMES[rng.gen_range(0..crate::corpus::LANG_NAMES.len())];
            let inst = render_instruction(&InstructionTask::S2tt {
                language: lang.to_string(),
            })?;
            let tgt = translate(&s, &corpus.translations, lang)?;
            ids.extend(block(&v, &s, &inst, &tgt)?);
        }
        4 => {
            let s = sent(rng);
            let toks: Vec<&str> = s.split_whitespace().collect();
            // mention 1-2 true content words plus 1-2 absent distractors
            let mut words = Vec::new();
            for _ in 0..rng.gen_range(1..=2usize) {
                let w = toks[[1, 2, 3, 5][rng.gen_range(0..4)]].to_string();
                if !words.contains(&w) {
                    words.push(w);
                }
            }
            let all = g.all_words();
            for _ in 0..rng.gen_range(1..=2usize) {
                let w = all[rng.gen_range(0..all.len())].clone();
                if !toks.contains(&w.as_str()) && !words.contains(&w) {
                    words.push(w);
                }
            }
            let inst = render_instruction(&InstructionTask::AsrBias { words })?;
            ids.extend(block(&v, &s, &inst, &s)?);
        }
        _ => {
            let s1 = sent(rng);
            let s2 = if rng.gen::<f64>() < config.icl_shared_word_prob {
                mutate_sharing(g, &s1, rng)
            } else {
                sent(rng)
            };
            ids.extend(block(&v, &s1, &asr_inst, &s1)?);
            ids.extend(block(&v, &s2, &asr_inst, &s2)?);
        }
    }
    Ok(ids)
}

/// Resample some slots of a sentence so the result shares at least one
/// content word with the original.
fn mutate_sharing(g: &crate::corpus::Grammar, text: &str, rng: &mut ChaCha8Rng) -> String {
    let toks: Vec<String> = text.split_whitespace().map(|s| s.to_string()).collect();
    let mut out = toks.clone();
    let keep = rng.gen_range(0..4usize); // which content slot survives
    let slots: [(usize, &Vec<String>); 4] = [
        (1, &g.adjectives),
        (2, &g.nouns),
        (3, &g.verbs),
        (5, &g.nouns),
    ];
    for (i, (slot, list)) in slots.iter().enumerate() {
        if i != keep {
            out[*slot] = list[rng.gen_range(0..list.len())].clone();
        }
    }
    out.join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainHistoryRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Next-token pretraining of the base LM over generated text lines.
pub fn pretrain_lm(
    lm: &crate::model::TinyLM,
    store: &mut ParamStore<f32>,
    optimizer: &mut AdamW<f32>,
    corpus: &Corpus,
    config: &LmPretrainConfig,
    train_domains: &[String],
    start_step: usize,
    mut on_checkpoint: impl FnMut(usize, &ParamStore<f32>, &AdamW<f32>) -> Result<()>,
) -> Result<Vec<PretrainHistoryRow>> {
    let train: Vec<&UtteranceRecord> = corpus
        .utterances
        .iter()
        .filter(|u| u.split == Split::Train && train_domains.contains(&u.domain))
        .collect();
    if train.is_empty() {
        return Err(Error::config("no pretraining text in the selected domains"));
    }
    let trainable = store.trainable_ids();
    let mut history = Vec::new();
    for step in start_step..config.steps {
        let lr = lr_schedule(step + 1, config.peak_lr, config.warmup_steps, config.steps)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("lm-step/{step}")));
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(store);
        let mut losses = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let ids = pretrain_line(corpus, &train, config, &mut rng)?;
            let emb = lm.embed_tokens(&mut tape, store, &mut bind, &ids)?;
            let logits = lm.forward(&mut tape, store, &mut bind, emb)?;
            let mut targets = vec![0usize; ids.len()];
            let mut mask = vec![false; ids.len()];
            for t in 0..ids.len() - 1 {
                targets[t] = ids[t + 1];
                mask[t] = true;
            }
            losses.push(tape.cross_entropy_masked(logits, &targets, &mask)?);
        }
        let loss = tape.mean_of(&losses)?;
        let loss_val = tape.value(loss).item() as f64;
        if !loss_val.is_finite() {
            return Err(Error::TrainAbort(format!(
                "non-finite pretraining loss at step {step}"
            )));
        }
        tape.backward(loss)?;
        let mut grads: Vec<(ParamId, Tensor<f32>)> = Vec::new();
        for &id in &trainable {
            if let Some(gr) = bind.grad(&tape, id) {
                grads.push((id, gr));
            }
        }
        clip_global_norm(&mut grads, config.clip_norm);
        optimizer.step(store, &grads, lr)?;
        history.push(PretrainHistoryRow {
            step,
            lr,
            loss: loss_val,
        });
        let step1 = step + 1;
        if config.checkpoint_every > 0 && step1 % config.checkpoint_every == 0 {
            on_checkpoint(step1, store, optimizer)?;
        }
    }
    on_checkpoint(start_step + history.len(), store, optimizer)?;
    Ok(history)
}

// ---- COSMIC instruction tuning ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub batch_sequences: usize,
    pub seed: u64,
    pub order_mode: OrderMode,
    /// Fraction of training prompts that carry one same-task shot.
    pub icl_augmentation_ratio: f64,
    /// Fraction of ASR prompts rendered with a mention-list instruction.
    pub bias_augmentation_ratio: f64,
    /// Train-frequency percentile under which a word counts as rare for
    /// bias augmentation.
    pub bias_augmentation_percentile: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub train_domains: Vec<String>,
    pub eval_every: usize,
    pub eval_utterances: usize,
    /// Early stop once dev WER and SQA exact-match both clear these bars
    /// (0 disables).
    pub early_stop_dev_wer: f64,
    pub early_stop_dev_em: f64,
    pub checkpoint_every: usize,
    /// Loss over prompt positions too (ablation switch; default response
    /// only).
    pub loss_on_prompt: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-4,
            total_steps: 10_000,
            warmup_steps: 300,
            batch_sequences: 8,
            seed: 0,
            order_mode: OrderMode::Interleaved,
            icl_augmentation_ratio: 0.3,
            bias_augmentation_ratio: 0.25,
            bias_augmentation_percentile: 30.0,
            weight_decay: 0.01,
            clip_norm: 1.0,
            train_domains: vec!["clean".into()],
            eval_every: 250,
            eval_utterances: 32,
            early_stop_dev_wer: 0.10,
            early_stop_dev_em: 0.80,
            checkpoint_every: 1000,
            loss_on_prompt: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 {
            return Err(Error::config("peak_lr must be > 0"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("warmup_steps must be <= total_steps"));
        }
        if self.batch_sequences == 0 {
            return Err(Error::config("batch_sequences must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.icl_augmentation_ratio) {
            return Err(Error::config("icl_augmentation_ratio must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CosmicHistoryRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_wer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_em: Option<f64>,
    /// Realized ASR share of sampled instructions so far.
    pub asr_ratio: f64,
}

/// Quick dev-set ASR WER via greedy generation.
pub fn quick_asr_wer(
    model: &CosmicModel,
    store: &ParamStore<f32>,
    audio: &AudioCache,
    utts: &[&UtteranceRecord],
) -> Result<f64> {
    let mut total = crate::eval::WerCounts::default();
    let decode = DecodeConfig::default();
    for u in utts {
        let plan = assemble_prompt(
            &u.id,
            &render_instruction(&InstructionTask::Asr)?,
            &[],
            OrderMode::Interleaved,
            8,
        )?;
        let out = match model.generate(store, &plan, audio, &decode) {
            Ok(o) => o.text,
            Err(Error::GenerationTruncated { partial }) => partial,
            Err(e) => return Err(e),
        };
        let reference = crate::eval::metric_tokens(&u.text);
        let hyp = crate::eval::metric_tokens(&out);
        let (_, counts, _) = crate::eval::wer(&reference, &hyp)?;
        total.add(&counts);
    }
    Ok(total.wer())
}

/// Quick dev-set SQA exact match (first QA pair per utterance).
pub fn quick_sqa_em(
    model: &CosmicModel,
    store: &ParamStore<f32>,
    corpus: &Corpus,
    audio: &AudioCache,
    utts: &[&UtteranceRecord],
) -> Result<f64> {
    let mut hit = 0usize;
    let decode = DecodeConfig::default();
    for u in utts {
        let qa = &generate_sqa(&corpus.spec.grammar, u)?[0];
        let plan = assemble_prompt(&u.id, &qa.question, &[], OrderMode::Interleaved, 8)?;
        let out = match model.generate(store, &plan, audio, &decode) {
            Ok(o) => o.text,
            Err(Error::GenerationTruncated { partial }) => partial,
            Err(e) => return Err(e),
        };
        if crate::eval::metric_tokens(&out) == crate::eval::metric_tokens(&qa.answer) {
            hit += 1;
        }
    }
    Ok(hit as f64 / utts.len() as f64)
}

/// Instruction tuning. The compressor and LM base stay frozen by
/// construction (their tape leaves never request gradients); the optimizer
/// sees only audio-encoder and LoRA tensors.
#[allow(clippy::too_many_arguments)]
pub fn train_cosmic(
    model: &CosmicModel,
    store: &mut ParamStore<f32>,
    optimizer: &mut AdamW<f32>,
    corpus: &Corpus,
    features: &FeatureSet,
    config: &TrainConfig,
    start_step: usize,
    mut on_checkpoint: impl FnMut(usize, &ParamStore<f32>, &AdamW<f32>) -> Result<()>,
) -> Result<Vec<CosmicHistoryRow>> {
    config.validate()?;
    let train: Vec<&UtteranceRecord> = corpus
        .utterances
        .iter()
        .filter(|u| u.split == Split::Train && config.train_domains.contains(&u.domain))
        .collect();
    if train.is_empty() {
        return Err(Error::config("empty training batch pool"));
    }
    let dev: Vec<&UtteranceRecord> = corpus
        .utterances
        .iter()
        .filter(|u| u.split == Split::Dev && config.train_domains.contains(&u.domain))
        .take(config.eval_utterances)
        .collect();

    // frozen compressor => compress every training/dev utterance once
    let mut audio = AudioCache::new();
    for u in train.iter().chain(dev.iter()) {
        audio.ensure(model, store, features, &u.id)?;
    }

    // rare-word table for bias augmentation
    let freq = train_frequencies(corpus, &config.train_domains);
    let mut counts: Vec<usize> = freq.values().copied().collect();
    counts.sort_unstable();
    let rank = ((config.bias_augmentation_percentile / 100.0) * counts.len() as f64).ceil() as usize;
    let bias_threshold = counts[rank.saturating_sub(1).min(counts.len() - 1)];
    let rare_pool: Vec<String> = {
        let mut pool: Vec<String> = freq
            .iter()
            .filter(|(_, &c)| c <= bias_threshold)
            .map(|(w, _)| w.clone())
            .collect();
        pool.sort();
        pool
    };

    let trainable = store.trainable_ids();
    let mut history = Vec::new();
    let mut asr_draws = 0usize;
    let mut total_draws = 0usize;
    for step in start_step..config.total_steps {
        let lr = lr_schedule(step + 1, config.peak_lr, config.warmup_steps, config.total_steps)?;
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("cosmic-step/{step}")));
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(store);
        let mut losses = Vec::with_capacity(config.batch_sequences);
        for _ in 0..config.batch_sequences {
            let u = train[rng.gen_range(0..train.len())];
            let (sample, slot) = sample_instruction_with_slot(corpus, u, &mut rng)?;
            total_draws += 1;
            let mut instruction = sample.instruction.clone();
            if sample.task == TaskKind::Asr {
                asr_draws += 1;
                if rng.gen::<f64>() < config.bias_augmentation_ratio {
                    if let Some(inst) =
                        bias_instruction(u, &freq, bias_threshold, &rare_pool, &mut rng)?
                    {
                        instruction = inst;
                    }
                }
            }
            let shots = if rng.gen::<f64>() < config.icl_augmentation_ratio {
                let s = train[rng.gen_range(0..train.len())];
                let response = match slot {
                    None => s.text.clone(),
                    Some(slot) => answer_for_slot(&corpus.spec.grammar, &s.text, slot)?,
                };
                vec![IclExample {
                    audio: s.id.clone(),
                    response,
                }]
            } else {
                Vec::new()
            };
            let plan = assemble_prompt(&u.id, &instruction, &shots, config.order_mode, 8)?;
            let plan = with_response(plan, &sample.response);
            let real = model.realize(&mut tape, store, &mut bind, &plan, &audio)?;
            let logits = model.lm_forward(&mut tape, store, &mut bind, real.seq)?;
            let (targets, mask) = if config.loss_on_prompt {
                real.full_position_targets()
            } else {
                (real.targets.clone(), real.loss_mask.clone())
            };
            losses.push(tape.cross_entropy_masked(logits, &targets, &mask)?);
        }
        let loss = tape.mean_of(&losses)?;
        let loss_val = tape.value(loss).item() as f64;
        if !loss_val.is_finite() {
            return Err(Error::TrainAbort(format!(
                "non-finite tuning loss at step {step}; last checkpoint stands"
            )));
        }
        tape.backward(loss)?;
        let mut grads: Vec<(ParamId, Tensor<f32>)> = Vec::new();
        for &id in &trainable {
            if let Some(g) = bind.grad(&tape, id) {
                grads.push((id, g));
            }
        }
        clip_global_norm(&mut grads, config.clip_norm);
        optimizer.step(store, &grads, lr)?;
        drop(tape);

        let mut row = CosmicHistoryRow {
            step,
            lr,
            loss: loss_val,
            dev_wer: None,
            dev_em: None,
            asr_ratio: asr_draws as f64 / total_draws as f64,
        };
        let step1 = step + 1;
        if config.eval_every > 0
            && (step1 % config.eval_every == 0 || step1 == config.total_steps)
            && !dev.is_empty()
        {
            let wer = quick_asr_wer(model, store, &audio, &dev)?;
            let em = quick_sqa_em(model, store, corpus, &audio, &dev)?;
            row.dev_wer = Some(wer);
            row.dev_em = Some(em);
            history.push(row);
            if config.early_stop_dev_wer > 0.0
                && wer < config.early_stop_dev_wer
                && em > config.early_stop_dev_em
            {
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
    on_checkpoint(start_step + history.len(), store, optimizer)?;
    Ok(history)
}

/// Mention-list instruction over the utterance's rare words plus absent
/// distractors. None when the utterance has no rare word.
fn bias_instruction(
    u: &UtteranceRecord,
    freq: &HashMap<String, usize>,
    threshold: usize,
    rare_pool: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<Option<String>> {
    let toks: Vec<&str> = u.text.split_whitespace().collect();
    let mut targets: Vec<String> = Vec::new();
    for t in &toks {
        let f = freq.get(*t).copied().unwrap_or(0);
        if f <= threshold && !targets.iter().any(|w| w == t) {
            targets.push(t.to_string());
        }
    }
    if targets.is_empty() {
        return Ok(None);
    }
    targets.truncate(2);
    let mut words = targets;
    for _ in 0..2 {
        let cand = &rare_pool[rng.gen_range(0..rare_pool.len())];
        if !toks.contains(&cand.as_str()) && !words.contains(cand) {
            words.push(cand.clone());
        }
    }
    // deterministic shuffle so targets are not always first
    for i in (1..words.len()).rev() {
        let j = rng.gen_range(0..=i);
        words.swap(i, j);
    }
    Ok(Some(render_instruction(&InstructionTask::AsrBias { words })?))
}
