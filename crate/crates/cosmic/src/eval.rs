//! Metrics and task evaluation harnesses: WER with edit alignment,
//! biased/unbiased WER splits, corpus BLEU, ROUGE-L, and the per-task
//! runners (ASR, SQA, S2TT, domain adaptation, contextual biasing).

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---- edit alignment ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditOp {
    Match,
    Substitute,
    Insert,
    Delete,
}

/// One aligned step; `ref_index`/`hyp_index` point at the consumed tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignStep {
    pub op: EditOp,
    pub ref_index: Option<usize>,
    pub hyp_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub steps: Vec<AlignStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct WerCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub matches: usize,
    pub ref_words: usize,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_words as f64
    }

    pub fn add(&mut self, other: &WerCounts) {
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.matches += other.matches;
        self.ref_words += other.ref_words;
    }
}

/// Lowercased whitespace tokens; the corpus is canonical so nothing fancier
/// is needed.
pub fn metric_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Word error rate by minimum edit distance. Ties prefer the diagonal
/// (match/substitute) over insert-delete pairs, then deletion.
pub fn wer(reference: &[String], hypothesis: &[String]) -> Result<(f64, WerCounts, Alignment)> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric(
            "WER needs a nonempty reference".into(),
        ));
    }
    let n = reference.len();
    let m = hypothesis.len();
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in 0..=n {
        dp[i][0] = i;
    }
    for j in 0..=m {
        dp[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = if reference[i - 1] == hypothesis[j - 1] { 0 } else { 1 };
            dp[i][j] = (dp[i - 1][j - 1] + sub_cost)
                .min(dp[i - 1][j] + 1)
                .min(dp[i][j - 1] + 1);
        }
    }
    // backtrace, diagonal first
    let mut steps = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let sub_cost = if reference[i - 1] == hypothesis[j - 1] { 0 } else { 1 };
            if dp[i][j] == dp[i - 1][j - 1] + sub_cost {
                steps.push(AlignStep {
                    op: if sub_cost == 0 { EditOp::Match } else { EditOp::Substitute },
                    ref_index: Some(i - 1),
                    hyp_index: Some(j - 1),
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            steps.push(AlignStep {
                op: EditOp::Delete,
                ref_index: Some(i - 1),
                hyp_index: None,
            });
            i -= 1;
        } else {
            steps.push(AlignStep {
                op: EditOp::Insert,
                ref_index: None,
                hyp_index: Some(j - 1),
            });
            j -= 1;
        }
    }
    steps.reverse();
    let mut counts = WerCounts {
        ref_words: n,
        ..Default::default()
    };
    for s in &steps {
        match s.op {
            EditOp::Match => counts.matches += 1,
            EditOp::Substitute => counts.substitutions += 1,
            EditOp::Insert => counts.insertions += 1,
            EditOp::Delete => counts.deletions += 1,
        }
    }
    debug_assert_eq!(counts.errors(), dp[n][m]);
    Ok((counts.wer(), counts, Alignment { steps }))
}

// ---- biased / unbiased WER ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasedWerBreakdown {
    pub biased: WerCounts,
    pub unbiased: WerCounts,
    pub wer: f64,
    /// Absent when the reference holds no bias words.
    pub b_wer: Option<f64>,
    pub u_wer: Option<f64>,
}

/// Split WER into bias-list and non-bias-list classes. Substitutions and
/// deletions follow the reference word's membership; insertions follow the
/// inserted hypothesis word's membership, so hallucinated bias words land
/// in the biased class.
pub fn biased_wer(
    reference: &[String],
    hypothesis: &[String],
    bias_words: &HashSet<String>,
) -> Result<BiasedWerBreakdown> {
    let (overall, counts, alignment) = wer(reference, hypothesis)?;
    let mut biased = WerCounts::default();
    let mut unbiased = WerCounts::default();
    for w in reference {
        if bias_words.contains(w) {
            biased.ref_words += 1;
        } else {
            unbiased.ref_words += 1;
        }
    }
    for s in &alignment.steps {
        let class = match s.op {
            EditOp::Insert => bias_words.contains(&hypothesis[s.hyp_index.unwrap()]),
            _ => bias_words.contains(&reference[s.ref_index.unwrap()]),
        };
        let side = if class { &mut biased } else { &mut unbiased };
        match s.op {
            EditOp::Match => side.matches += 1,
            EditOp::Substitute => side.substitutions += 1,
            EditOp::Insert => side.insertions += 1,
            EditOp::Delete => side.deletions += 1,
        }
    }
    debug_assert_eq!(biased.errors() + unbiased.errors(), counts.errors());
    debug_assert_eq!(biased.ref_words + unbiased.ref_words, counts.ref_words);
    Ok(BiasedWerBreakdown {
        wer: overall,
        b_wer: (biased.ref_words > 0).then(|| biased.errors() as f64 / biased.ref_words as f64),
        u_wer: (unbiased.ref_words > 0).then(|| unbiased.errors() as f64 / unbiased.ref_words as f64),
        biased,
        unbiased,
    })
}

// ---- BLEU ----

/// Corpus-level BLEU-4 in [0, 100] with brevity penalty. Orders 2-4 use
/// add-one smoothing so short toy sentences do not zero out.
pub fn bleu(pairs: &[(Vec<String>, Vec<String>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("BLEU needs at least one pair".into()));
    }
    let max_n = 4;
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let mut ref_len = 0u64;
    let mut hyp_len = 0u64;
    for (r, h) in pairs {
        ref_len += r.len() as u64;
        hyp_len += h.len() as u64;
        for n in 1..=max_n {
            if h.len() + 1 <= n {
                continue;
            }
            let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
            if r.len() + 1 > n {
                for g in r.windows(n) {
                    *ref_counts.entry(g).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: HashMap<&[String], u64> = HashMap::new();
            for g in h.windows(n) {
                *hyp_counts.entry(g).or_insert(0) += 1;
            }
            for (g, c) in hyp_counts {
                totals[n - 1] += c;
                let rc = ref_counts.get(g).copied().unwrap_or(0);
                matches[n - 1] += c.min(rc);
            }
        }
    }
    if hyp_len == 0 {
        eprintln!("warning: all hypotheses empty, BLEU = 0");
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 1..=max_n {
        let (num, den) = if n == 1 {
            (matches[0] as f64, totals[0] as f64)
        } else {
            // add-one smoothing on higher orders
            (matches[n - 1] as f64 + 1.0, totals[n - 1] as f64 + 1.0)
        };
        if den == 0.0 || num == 0.0 {
            return Ok(0.0);
        }
        log_p += (num / den).ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_p / max_n as f64).exp())
}

// ---- ROUGE-L ----

/// LCS-based F-measure with beta = 1.
pub fn rouge_l(reference: &[String], hypothesis: &[String]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::UndefinedMetric("ROUGE-L needs a nonempty reference".into()));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let (n, m) = (reference.len(), hypothesis.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in 1..=n {
        for j in 1..=m {
            dp[i][j] = if reference[i - 1] == hypothesis[j - 1] {
                dp[i - 1][j - 1] + 1
            } else {
                dp[i - 1][j].max(dp[i][j - 1])
            };
        }
    }
    let lcs = dp[n][m] as f64;
    if lcs == 0.0 {
        return Ok(0.0);
    }
    let p = lcs / m as f64;
    let r = lcs / n as f64;
    Ok(2.0 * p * r / (p + r))
}

// ---- task harnesses ----

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::audio::FeatureSet;
use crate::config::derive_seed;
use crate::corpus::{
    answer_for_slot, build_biasing_lists, generate_sqa, translate, Corpus, Split, UtteranceRecord,
};
use crate::model::{AudioCache, CosmicModel, DecodeConfig};
use crate::prompting::{assemble_prompt, render_instruction, IclExample, InstructionTask, OrderMode};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EvalTask {
    Asr,
    Sqa,
    S2tt { lang: String },
    Adapt,
    Bias,
}

impl EvalTask {
    pub fn label(&self) -> String {
        match self {
            EvalTask::Asr => "asr".into(),
            EvalTask::Sqa => "sqa".into(),
            EvalTask::S2tt { lang } => format!("s2tt-{lang}"),
            EvalTask::Adapt => "adapt".into(),
            EvalTask::Bias => "bias".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Domain evaluated by asr/sqa/s2tt/bias.
    pub domain: String,
    /// Target domain for the adaptation task.
    pub adapt_domain: String,
    /// Domains whose train split defines word frequencies and shot pools.
    pub train_domains: Vec<String>,
    pub bias_rarity_percentile: f64,
    pub bias_distractors: usize,
    /// 0 = evaluate every utterance in the split.
    pub max_utterances: usize,
    pub decode: DecodeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            domain: "clean".into(),
            adapt_domain: "shifted".into(),
            train_domains: vec!["clean".into()],
            bias_rarity_percentile: 10.0,
            bias_distractors: 2,
            max_utterances: 0,
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub domain: String,
    pub split: Split,
    pub shots: usize,
    pub order_mode: OrderMode,
    pub utterances: usize,
    pub metrics: BTreeMap<String, f64>,
    pub rows: Vec<serde_json::Value>,
    pub config_hash: String,
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn config_hash(task: &EvalTask, split: Split, shots: usize, order: OrderMode, cfg: &EvalConfig, seed: u64) -> String {
    let blob = serde_json::json!({
        "task": task,
        "split": split,
        "shots": shots,
        "order_mode": order,
        "config": cfg,
        "seed": seed,
    });
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_string(&blob).expect("hashable config"));
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Harness<'a> {
    model: &'a CosmicModel,
    store: &'a ParamStore<f32>,
    features: &'a FeatureSet,
    audio: AudioCache,
    decode: DecodeConfig,
}

impl<'a> Harness<'a> {
    fn generate(&mut self, plan: &crate::prompting::PromptPlan) -> Result<(String, bool)> {
        for seg in &plan.segments {
            if seg.kind == crate::prompting::SegmentKind::AudioRef {
                self.audio
                    .ensure(self.model, self.store, self.features, &seg.payload)?;
            }
        }
        match self.model.generate(self.store, plan, &self.audio, &self.decode) {
            Ok(out) => Ok((out.text, false)),
            Err(Error::GenerationTruncated { partial }) => Ok((partial, true)),
            Err(e) => Err(e),
        }
    }
}

fn select_utts<'a>(
    corpus: &'a Corpus,
    domain: &str,
    split: Split,
    max: usize,
) -> Result<Vec<&'a UtteranceRecord>> {
    let mut utts = corpus.select(domain, split);
    utts.sort_by(|a, b| a.id.cmp(&b.id));
    if utts.is_empty() {
        return Err(Error::MissingArtifact(format!(
            "no utterances for domain `{domain}` split {split}"
        )));
    }
    if max > 0 {
        utts.truncate(max);
    }
    Ok(utts)
}

fn draw_shots<'a>(
    pool: &[&'a UtteranceRecord],
    n: usize,
    seed: u64,
) -> Vec<&'a UtteranceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
}

/// Run one task over a split and bundle per-utterance rows plus aggregate
/// metrics. Shots are drawn (seeded) from the train split: the training
/// domains for trained tasks, the target domain for adaptation.
#[allow(clippy::too_many_arguments)]
pub fn run_task_eval(
    model: &CosmicModel,
    store: &ParamStore<f32>,
    corpus: &Corpus,
    features: &FeatureSet,
    task: &EvalTask,
    split: Split,
    shots: usize,
    order_mode: OrderMode,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let mut harness = Harness {
        model,
        store,
        features,
        audio: AudioCache::new(),
        decode: cfg.decode.clone(),
    };
    let mut metrics = BTreeMap::new();
    let mut rows = Vec::new();
    let (domain, utts) = match task {
        EvalTask::Adapt => {
            let domain = cfg.adapt_domain.clone();
            let utts = select_utts(corpus, &domain, split, cfg.max_utterances)?;
            (domain, utts)
        }
        _ => {
            let domain = cfg.domain.clone();
            let utts = select_utts(corpus, &domain, split, cfg.max_utterances)?;
            (domain, utts)
        }
    };
    let shot_pool: Vec<&UtteranceRecord> = match task {
        EvalTask::Adapt => corpus.select(&cfg.adapt_domain, Split::Train),
        _ => corpus
            .utterances
            .iter()
            .filter(|u| u.split == Split::Train && cfg.train_domains.contains(&u.domain))
            .collect(),
    };
    if shots > 0 && shot_pool.is_empty() {
        return Err(Error::MissingArtifact("empty shot pool for N-shot eval".into()));
    }

    match task {
        EvalTask::Asr => {
            let instruction = render_instruction(&InstructionTask::Asr)?;
            let mut total = WerCounts::default();
            for u in &utts {
                let shot_refs = draw_shots(&shot_pool, shots, derive_seed(seed, &format!("shots/asr/{}", u.id)));
                let examples: Vec<IclExample> = shot_refs
                    .iter()
                    .map(|s| IclExample {
                        audio: s.id.clone(),
                        response: s.text.clone(),
                    })
                    .collect();
                let plan = assemble_prompt(&u.id, &instruction, &examples, order_mode, 8)?;
                let (hyp, truncated) = harness.generate(&plan)?;
                let (w, counts, _) = wer(&metric_tokens(&u.text), &metric_tokens(&hyp))?;
                total.add(&counts);
                rows.push(serde_json::json!({
                    "utterance_id": u.id,
                    "reference": u.text,
                    "hypothesis": hyp,
                    "wer": round6(w),
                    "errors": counts.errors(),
                    "ref_words": counts.ref_words,
                    "truncated": truncated,
                }));
            }
            metrics.insert("wer".into(), round6(total.wer()));
            metrics.insert("errors".into(), total.errors() as f64);
            metrics.insert("ref_words".into(), total.ref_words as f64);
        }
        EvalTask::Adapt => {
            // paired 0-shot / N-shot (N >= 1) on the target domain
            let n_shot = shots.max(1);
            let instruction = render_instruction(&InstructionTask::Asr)?;
            let mut total0 = WerCounts::default();
            let mut total1 = WerCounts::default();
            for u in &utts {
                let plan0 = assemble_prompt(&u.id, &instruction, &[], order_mode, 8)?;
                let (hyp0, _) = harness.generate(&plan0)?;
                let shot_refs = draw_shots(
                    &shot_pool,
                    n_shot,
                    derive_seed(seed, &format!("shots/adapt/{}", u.id)),
                );
                let examples: Vec<IclExample> = shot_refs
                    .iter()
                    .map(|s| IclExample {
                        audio: s.id.clone(),
                        response: s.text.clone(),
                    })
                    .collect();
                let plan1 = assemble_prompt(&u.id, &instruction, &examples, order_mode, 8)?;
                let (hyp1, _) = harness.generate(&plan1)?;
                let r = metric_tokens(&u.text);
                let (w0, c0, _) = wer(&r, &metric_tokens(&hyp0))?;
                let (w1, c1, _) = wer(&r, &metric_tokens(&hyp1))?;
                total0.add(&c0);
                total1.add(&c1);
                rows.push(serde_json::json!({
                    "utterance_id": u.id,
                    "reference": u.text,
                    "hypothesis_0shot": hyp0,
                    "hypothesis_nshot": hyp1,
                    "wer_0shot": round6(w0),
                    "wer_nshot": round6(w1),
                    "n_shot": n_shot,
                }));
            }
            metrics.insert("wer_0shot".into(), round6(total0.wer()));
            metrics.insert("wer_nshot".into(), round6(total1.wer()));
            metrics.insert("n_shot".into(), n_shot as f64);
        }
        EvalTask::Sqa => {
            let mut bleu_pairs = Vec::new();
            let mut rouge_sum = 0.0;
            let mut em_hits = 0usize;
            let mut qa_count = 0usize;
            for u in &utts {
                for (qi, qa) in generate_sqa(&corpus.spec.grammar, u)?.iter().enumerate() {
                    let shot_refs = draw_shots(
                        &shot_pool,
                        shots,
                        derive_seed(seed, &format!("shots/sqa/{}/{qi}", u.id)),
                    );
                    let examples: Vec<IclExample> = shot_refs
                        .iter()
                        .map(|s| {
                            Ok(IclExample {
                                audio: s.id.clone(),
                                response: answer_for_slot(
                                    &corpus.spec.grammar,
                                    &s.text,
                                    qa.source_slot,
                                )?,
                            })
                        })
                        .collect::<Result<_>>()?;
                    let plan = assemble_prompt(&u.id, &qa.question, &examples, order_mode, 8)?;
                    let (hyp, _) = harness.generate(&plan)?;
                    let ref_toks = metric_tokens(&qa.answer);
                    let hyp_toks = metric_tokens(&hyp);
                    let em = ref_toks == hyp_toks;
                    let rl = rouge_l(&ref_toks, &hyp_toks)?;
                    em_hits += em as usize;
                    rouge_sum += rl;
                    qa_count += 1;
                    bleu_pairs.push((ref_toks, hyp_toks));
                    rows.push(serde_json::json!({
                        "utterance_id": u.id,
                        "question": qa.question,
                        "reference": qa.answer,
                        "hypothesis": hyp,
                        "exact_match": em,
                        "rouge_l": round6(rl),
                    }));
                }
            }
            metrics.insert("exact_match".into(), round6(em_hits as f64 / qa_count as f64));
            metrics.insert("bleu".into(), round6(bleu(&bleu_pairs)?));
            metrics.insert("rouge_l".into(), round6(rouge_sum / qa_count as f64));
            metrics.insert("qa_pairs".into(), qa_count as f64);
        }
        EvalTask::S2tt { lang } => {
            let instruction = render_instruction(&InstructionTask::S2tt {
                language: lang.clone(),
            })?;
            let mut pairs = Vec::new();
            for u in &utts {
                let reference = translate(&u.text, &corpus.translations, lang)?;
                let shot_refs = draw_shots(
                    &shot_pool,
                    shots,
                    derive_seed(seed, &format!("shots/s2tt/{lang}/{}", u.id)),
                );
                let examples: Vec<IclExample> = shot_refs
                    .iter()
                    .map(|s| {
                        Ok(IclExample {
                            audio: s.id.clone(),
                            response: translate(&s.text, &corpus.translations, lang)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                let plan = assemble_prompt(&u.id, &instruction, &examples, order_mode, 8)?;
                let (hyp, _) = harness.generate(&plan)?;
                let ref_toks = metric_tokens(&reference);
                let hyp_toks = metric_tokens(&hyp);
                rows.push(serde_json::json!({
                    "utterance_id": u.id,
                    "reference": reference,
                    "hypothesis": hyp,
                }));
                pairs.push((ref_toks, hyp_toks));
            }
            metrics.insert("bleu".into(), round6(bleu(&pairs)?));
        }
        EvalTask::Bias => {
            let lists = build_biasing_lists(
                corpus,
                &domain,
                split,
                &cfg.train_domains,
                cfg.bias_rarity_percentile,
                cfg.bias_distractors,
                derive_seed(seed, "bias-lists"),
            )?;
            let by_id: std::collections::HashMap<&str, &crate::corpus::BiasingList> =
                lists.iter().map(|l| (l.utterance_id.as_str(), l)).collect();
            let plain = render_instruction(&InstructionTask::Asr)?;
            let mut agg: BTreeMap<&str, (WerCounts, WerCounts)> = BTreeMap::new();
            agg.insert("biased", (WerCounts::default(), WerCounts::default()));
            agg.insert("unbiased", (WerCounts::default(), WerCounts::default()));
            for u in &utts {
                let list = by_id.get(u.id.as_str()).ok_or_else(|| {
                    Error::MissingArtifact(format!("no biasing list for `{}`", u.id))
                })?;
                let bias_set: HashSet<String> = list.all_words().into_iter().collect();
                let biased_instruction = if bias_set.is_empty() {
                    plain.clone()
                } else {
                    render_instruction(&InstructionTask::AsrBias {
                        words: list.all_words(),
                    })?
                };
                for (mode, instruction) in [("unbiased", &plain), ("biased", &biased_instruction)] {
                    let plan = assemble_prompt(&u.id, instruction, &[], order_mode, 8)?;
                    let (hyp, _) = harness.generate(&plan)?;
                    let breakdown =
                        biased_wer(&metric_tokens(&u.text), &metric_tokens(&hyp), &bias_set)?;
                    let slot = agg.get_mut(mode).unwrap();
                    slot.0.add(&breakdown.biased);
                    slot.1.add(&breakdown.unbiased);
                    rows.push(serde_json::json!({
                        "utterance_id": u.id,
                        "biased": mode == "biased",
                        "instruction": instruction,
                        "reference": u.text,
                        "hypothesis": hyp,
                        "targets": list.targets,
                        "distractors": list.distractors,
                        "wer": round6(breakdown.wer),
                        "b_wer": breakdown.b_wer.map(round6),
                        "u_wer": breakdown.u_wer.map(round6),
                    }));
                }
            }
            for (mode, (b, ub)) in agg {
                let total_err = (b.errors() + ub.errors()) as f64;
                let total_ref = (b.ref_words + ub.ref_words) as f64;
                metrics.insert(format!("wer_{mode}"), round6(total_err / total_ref));
                if b.ref_words > 0 {
                    metrics.insert(format!("b_wer_{mode}"), round6(b.errors() as f64 / b.ref_words as f64));
                }
                metrics.insert(format!("u_wer_{mode}"), round6(ub.errors() as f64 / ub.ref_words as f64));
            }
        }
    }

    Ok(EvalReport {
        task: task.label(),
        domain,
        split,
        shots,
        order_mode,
        utterances: utts.len(),
        metrics,
        rows,
        config_hash: config_hash(task, split, shots, order_mode, cfg, seed),
    })
}

/// JSONL: one per-utterance row per line, then a trailing aggregate record.
pub fn save_report(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    for row in &report.rows {
        serde_json::to_writer(&mut f, row)?;
        f.write_all(b"\n")?;
    }
    let aggregate = serde_json::json!({
        "aggregate": true,
        "task": report.task,
        "domain": report.domain,
        "split": report.split,
        "shots": report.shots,
        "order_mode": report.order_mode,
        "utterances": report.utterances,
        "metrics": report.metrics,
        "config_hash": report.config_hash,
    });
    serde_json::to_writer(&mut f, &aggregate)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Human-readable table for stdout.
pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "task {} | domain {} | split {} | shots {} | {:?} | {} utterances\n",
        report.task, report.domain, report.split, report.shots, report.order_mode, report.utterances
    ));
    out.push_str(&format!("config {}\n", &report.config_hash[..12]));
    let width = report.metrics.keys().map(|k| k.len()).max().unwrap_or(8);
    for (k, v) in &report.metrics {
        out.push_str(&format!("  {k:<width$}  {v:.4}\n"));
    }
    out
}
