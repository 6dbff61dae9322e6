//! Synthetic corpus: toy grammar, utterance generation, SQA supervision,
//! token-level translations, and contextual-biasing word lists.
//!
//! Sentences follow a determiner-adjective-noun-verb-determiner-noun
//! template with per-category sampling weights, so some words are common
//! and some rare; the rare tail feeds the biasing lists. A domain can
//! reverse the weights to create a lexical shift on top of the acoustic one.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::DomainProfile;
use crate::config::derive_seed;
use crate::error::{Error, Result};

// ---- grammar ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grammar {
    pub determiners: Vec<String>,
    pub adjectives: Vec<String>,
    pub nouns: Vec<String>,
    pub verbs: Vec<String>,
    /// Weight decay exponent: weight of the i-th word in a category is
    /// proportional to 1/(i+1)^decay. Steeper decay leaves a rarer tail.
    pub weight_decay: f64,
}

const ADJECTIVES: &[&str] = &[
    "red", "blue", "old", "tiny", "loud", "calm", "brave", "green", "swift", "pale", "grim",
    "merry", "dusty", "shy", "sly", "bold",
];
const NOUNS: &[&str] = &[
    "fox", "hen", "crow", "wolf", "lamb", "toad", "mole", "crab", "dove", "hare", "stork",
    "otter", "finch", "mouse", "bear", "snail", "heron", "weasel", "magpie", "badger", "plum",
    "acorn", "melon", "turnip", "daisy", "thistle", "walnut", "bramble",
];
const VERBS: &[&str] = &[
    "chased", "grabbed", "dropped", "watched", "carried", "nudged", "guarded", "stole",
    "sniffed", "circled", "dodged", "tricked", "fetched", "buried", "shadowed", "startled",
    "heckled", "pestered",
];

impl Grammar {
    /// 64-token toy vocabulary: 2 determiners + 16 adjectives + 28 nouns +
    /// 18 verbs.
    pub fn default_toy() -> Self {
        Grammar {
            determiners: vec!["the".into(), "a".into()],
            adjectives: ADJECTIVES.iter().map(|s| s.to_string()).collect(),
            nouns: NOUNS.iter().map(|s| s.to_string()).collect(),
            verbs: VERBS.iter().map(|s| s.to_string()).collect(),
            weight_decay: 1.5,
        }
    }

    /// Every grammar word in a fixed order; doubles as the CTC label table
    /// (label = index + 1, blank = 0).
    pub fn all_words(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.determiners.iter().cloned());
        out.extend(self.adjectives.iter().cloned());
        out.extend(self.nouns.iter().cloned());
        out.extend(self.verbs.iter().cloned());
        out
    }

    pub fn validate(&self) -> Result<()> {
        for (name, list) in [
            ("determiners", &self.determiners),
            ("adjectives", &self.adjectives),
            ("nouns", &self.nouns),
            ("verbs", &self.verbs),
        ] {
            if list.is_empty() {
                return Err(Error::Grammar(format!("no {name} in grammar")));
            }
        }
        let words = self.all_words();
        let mut seen = HashSet::new();
        for w in &words {
            if !seen.insert(w) {
                return Err(Error::Grammar(format!("word `{w}` appears in two categories")));
            }
        }
        Ok(())
    }

    /// Normalized sampling weights for a category of `n` words.
    pub fn weights(&self, n: usize, reversed: bool) -> Vec<f64> {
        let mut w: Vec<f64> = (0..n).map(|i| 1.0 / ((i + 1) as f64).powf(self.weight_decay)).collect();
        if reversed {
            w.reverse();
        }
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= sum);
        w
    }

    /// Number of distinct sentences the template can produce.
    pub fn capacity(&self) -> usize {
        self.determiners.len()
            * self.adjectives.len()
            * self.nouns.len()
            * self.verbs.len()
            * self.determiners.len()
            * self.nouns.len()
    }
}

/// A parsed det-adj-noun-verb-det-noun sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSentence {
    pub adjective: String,
    pub agent: String,
    pub verb: String,
    pub patient: String,
}

pub fn parse_sentence(grammar: &Grammar, text: &str) -> Result<ParsedSentence> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.len() != 6 {
        return Err(Error::Grammar(format!(
            "expected 6 tokens, got {} in `{text}`"
        , toks.len())));
    }
    let ok = |list: &[String], t: &str| list.iter().any(|w| w == t);
    if !ok(&grammar.determiners, toks[0])
        || !ok(&grammar.adjectives, toks[1])
        || !ok(&grammar.nouns, toks[2])
        || !ok(&grammar.verbs, toks[3])
        || !ok(&grammar.determiners, toks[4])
        || !ok(&grammar.nouns, toks[5])
    {
        return Err(Error::Grammar(format!("`{text}` does not parse under the toy grammar")));
    }
    Ok(ParsedSentence {
        adjective: toks[1].into(),
        agent: toks[2].into(),
        verb: toks[3].into(),
        patient: toks[5].into(),
    })
}

// ---- records ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Dev => write!(f, "dev"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub text: String,
    pub domain: String,
    pub split: Split,
    pub audio_seed: u64,
}

impl UtteranceRecord {
    pub fn tokens(&self) -> Vec<String> {
        self.text.split_whitespace().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Agent,
    Action,
    Patient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: String,
    pub answer: String,
    pub source_slot: Slot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Asr,
    Sqa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub utterance_id: String,
    pub task: TaskKind,
    pub instruction: String,
    pub response: String,
}

// ---- corpus generation ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub profile: DomainProfile,
    /// Reverse per-category word weights: the rare tail of the other domain
    /// becomes common here (lexical domain shift).
    pub reversed_lexical_weights: bool,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub grammar: Grammar,
    pub domains: Vec<DomainSpec>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            grammar: Grammar::default_toy(),
            domains: vec![
                DomainSpec {
                    profile: DomainProfile::clean(),
                    reversed_lexical_weights: false,
                    train: 2000,
                    dev: 200,
                    test: 200,
                },
                DomainSpec {
                    profile: DomainProfile::shifted(),
                    reversed_lexical_weights: true,
                    train: 2000,
                    dev: 200,
                    test: 200,
                },
            ],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub utterances: Vec<UtteranceRecord>,
    pub translations: TranslationLexicon,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn get(&self, id: &str) -> Result<&UtteranceRecord> {
        self.by_id
            .get(id)
            .map(|&i| &self.utterances[i])
            .ok_or_else(|| Error::Reference(format!("unknown utterance id `{id}`")))
    }

    pub fn select(&self, domain: &str, split: Split) -> Vec<&UtteranceRecord> {
        self.utterances
            .iter()
            .filter(|u| u.domain == domain && u.split == split)
            .collect()
    }

    pub fn domain_profile(&self, name: &str) -> Result<&DomainProfile> {
        self.spec
            .domains
            .iter()
            .map(|d| &d.profile)
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Reference(format!("unknown domain `{name}`")))
    }

    fn rebuild_index(&mut self) {
        self.by_id = self
            .utterances
            .iter()
            .enumerate()
            .map(|(i, u)| (u.id.clone(), i))
            .collect();
    }
}

fn weighted_pick<'a>(words: &'a [String], weights: &[f64], rng: &mut ChaCha8Rng) -> &'a str {
    let r: f64 = rng.gen();
    let mut acc = 0.0;
    for (w, &p) in words.iter().zip(weights) {
        acc += p;
        if r < acc {
            return w;
        }
    }
    words.last().unwrap()
}

/// Generate the full corpus. Deterministic in (spec, seed); ids are unique
/// and sentence texts are distinct across splits within each domain.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Corpus> {
    spec.grammar.validate()?;
    if spec.domains.is_empty() {
        return Err(Error::config("corpus spec declares no domains"));
    }
    let capacity = spec.grammar.capacity();
    let mut utterances = Vec::new();
    for dom in &spec.domains {
        dom.profile.validate()?;
        let requested = dom.train + dom.dev + dom.test;
        if requested * 2 > capacity {
            return Err(Error::config(format!(
                "vocabulary too small: domain `{}` requests {requested} distinct sentences, grammar capacity is {capacity}",
                dom.profile.name
            )));
        }
        let g = &spec.grammar;
        let det_w = g.weights(g.determiners.len(), false);
        let adj_w = g.weights(g.adjectives.len(), dom.reversed_lexical_weights);
        let noun_w = g.weights(g.nouns.len(), dom.reversed_lexical_weights);
        let verb_w = g.weights(g.verbs.len(), dom.reversed_lexical_weights);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("corpus/{}", dom.profile.name)));
        let mut seen = HashSet::new();
        for (split, count) in [
            (Split::Train, dom.train),
            (Split::Dev, dom.dev),
            (Split::Test, dom.test),
        ] {
            for idx in 0..count {
                let mut attempts = 0;
                let text = loop {
                    let s = format!(
                        "{} {} {} {} {} {}",
                        weighted_pick(&g.determiners, &det_w, &mut rng),
                        weighted_pick(&g.adjectives, &adj_w, &mut rng),
                        weighted_pick(&g.nouns, &noun_w, &mut rng),
                        weighted_pick(&g.verbs, &verb_w, &mut rng),
                        weighted_pick(&g.determiners, &det_w, &mut rng),
                        weighted_pick(&g.nouns, &noun_w, &mut rng),
                    );
                    // train samples the raw multinomial (repeats allowed, as
                    // in any real corpus); dev/test sentences must be unseen
                    // so eval cannot be solved from text memory alone
                    if split == Split::Train {
                        seen.insert(s.clone());
                        break s;
                    }
                    if !seen.contains(&s) {
                        seen.insert(s.clone());
                        break s;
                    }
                    attempts += 1;
                    if attempts > 10_000 {
                        return Err(Error::config(
                            "vocabulary too small: cannot find enough unseen dev/test sentences",
                        ));
                    }
                };
                let id = format!("{}-{}-{:05}", dom.profile.name, split, idx);
                let audio_seed = derive_seed(seed, &format!("audio/{id}"));
                utterances.push(UtteranceRecord {
                    id,
                    text,
                    domain: dom.profile.name.clone(),
                    split,
                    audio_seed,
                });
            }
        }
    }
    let translations = TranslationLexicon::build(&spec.grammar, derive_seed(seed, "translations"))?;
    let mut corpus = Corpus {
        spec: spec.clone(),
        utterances,
        translations,
        by_id: HashMap::new(),
    };
    corpus.rebuild_index();
    Ok(corpus)
}

// ---- SQA supervision ----

/// Template questions over the three grammar slots. Answers are short
/// phrases derivable from the reference text alone.
pub fn generate_sqa(grammar: &Grammar, u: &UtteranceRecord) -> Result<Vec<QAPair>> {
    sqa_for_text(grammar, &u.text)
}

pub fn sqa_for_text(grammar: &Grammar, text: &str) -> Result<Vec<QAPair>> {
    let p = parse_sentence(grammar, text)?;
    Ok(vec![
        QAPair {
            question: format!("Who {} the {}?", p.verb, p.patient),
            answer: p.agent.clone(),
            source_slot: Slot::Agent,
        },
        QAPair {
            question: format!("What did the {} do?", p.agent),
            answer: p.verb.clone(),
            source_slot: Slot::Action,
        },
        QAPair {
            question: format!("What did the {} {}?", p.agent, p.verb),
            answer: p.patient.clone(),
            source_slot: Slot::Patient,
        },
    ])
}

/// Apply a question's slot rule to (possibly different) utterance text.
/// Used to derive the response of an in-context shot under the query's
/// instruction.
pub fn answer_for_slot(grammar: &Grammar, text: &str, slot: Slot) -> Result<String> {
    let p = parse_sentence(grammar, text)?;
    Ok(match slot {
        Slot::Agent => p.agent,
        Slot::Action => p.verb,
        Slot::Patient => p.patient,
    })
}

/// The instruction-response set for one utterance: ASR plus one sample per
/// QA pair.
pub fn instruction_samples(grammar: &Grammar, u: &UtteranceRecord) -> Result<Vec<InstructionSample>> {
    let mut out = vec![InstructionSample {
        utterance_id: u.id.clone(),
        task: TaskKind::Asr,
        instruction: crate::prompting::ASR_INSTRUCTION.to_string(),
        response: u.text.clone(),
    }];
    for qa in generate_sqa(grammar, u)? {
        out.push(InstructionSample {
            utterance_id: u.id.clone(),
            task: TaskKind::Sqa,
            instruction: qa.question,
            response: qa.answer,
        });
    }
    Ok(out)
}

// ---- translations ----

/// Per-language token bijections over the vocabulary. Content words map to
/// a pseudo-random permutation within their own category; determiners map
/// to themselves. The second language is composed with a rotation of the
/// first, so the two mappings disagree on every content word.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranslationLexicon {
    pub langs: IndexMap<String, IndexMap<String, String>>,
}

pub const LANG_NAMES: [&str; 2] = ["xlang-1", "xlang-2"];

impl TranslationLexicon {
    pub fn build(grammar: &Grammar, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut langs = IndexMap::new();
        let mut first_maps: Vec<IndexMap<String, String>> = Vec::new();
        for (li, lang) in LANG_NAMES.iter().enumerate() {
            let mut map = IndexMap::new();
            for d in &grammar.determiners {
                map.insert(d.clone(), d.clone());
            }
            for cat in [&grammar.adjectives, &grammar.nouns, &grammar.verbs] {
                if li == 0 {
                    let mut perm: Vec<usize> = (0..cat.len()).collect();
                    // Fisher-Yates
                    for i in (1..perm.len()).rev() {
                        let j = rng.gen_range(0..=i);
                        perm.swap(i, j);
                    }
                    for (i, w) in cat.iter().enumerate() {
                        map.insert(w.clone(), cat[perm[i]].clone());
                    }
                } else {
                    // lang2 = lang1 composed with rotate(1): differs from
                    // lang1 on every word of the category
                    let prev = &first_maps[0];
                    for (i, w) in cat.iter().enumerate() {
                        let rotated = &cat[(i + 1) % cat.len()];
                        map.insert(w.clone(), prev[rotated].clone());
                    }
                }
            }
            if li == 0 {
                first_maps.push(map.clone());
            }
            langs.insert(lang.to_string(), map);
        }
        let lex = TranslationLexicon { langs };
        lex.validate(grammar)?;
        Ok(lex)
    }

    fn validate(&self, grammar: &Grammar) -> Result<()> {
        let words = grammar.all_words();
        for (lang, map) in &self.langs {
            let mut targets = HashSet::new();
            for w in &words {
                let t = map
                    .get(w)
                    .ok_or_else(|| Error::config(format!("`{w}` unmapped in {lang}")))?;
                if !targets.insert(t) {
                    return Err(Error::config(format!("`{t}` mapped twice in {lang}")));
                }
            }
        }
        Ok(())
    }

    pub fn inverse(&self, lang: &str) -> Result<IndexMap<String, String>> {
        let map = self
            .langs
            .get(lang)
            .ok_or_else(|| Error::UnknownToken(lang.to_string()))?;
        Ok(map.iter().map(|(k, v)| (v.clone(), k.clone())).collect())
    }
}

/// Token-wise translation, order preserved.
pub fn translate(text: &str, lexicon: &TranslationLexicon, lang: &str) -> Result<String> {
    let map = lexicon
        .langs
        .get(lang)
        .ok_or_else(|| Error::UnknownToken(lang.to_string()))?;
    let mut out = Vec::new();
    for tok in text.split_whitespace() {
        out.push(
            map.get(tok)
                .ok_or_else(|| Error::UnknownToken(tok.to_string()))?
                .clone(),
        );
    }
    Ok(out.join(" "))
}

// ---- biasing lists ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasingList {
    pub utterance_id: String,
    pub targets: Vec<String>,
    pub distractors: Vec<String>,
    pub threshold: f64,
}

impl BiasingList {
    pub fn all_words(&self) -> Vec<String> {
        let mut v = self.targets.clone();
        v.extend(self.distractors.iter().cloned());
        v
    }
}

/// Word frequencies over the train split of the given domains.
pub fn train_frequencies(corpus: &Corpus, freq_domains: &[String]) -> HashMap<String, usize> {
    let mut freq: HashMap<String, usize> = corpus
        .spec
        .grammar
        .all_words()
        .into_iter()
        .map(|w| (w, 0))
        .collect();
    for u in &corpus.utterances {
        if u.split == Split::Train && freq_domains.iter().any(|d| *d == u.domain) {
            for tok in u.text.split_whitespace() {
                *freq.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
    }
    freq
}

/// Build per-utterance biasing lists for a (domain, split): reference words
/// whose train frequency falls below the `rarity_percentile` of per-word
/// frequencies become targets. Percentile 0 disables listing entirely;
/// otherwise words entirely absent from train are always listed.
#[allow(clippy::too_many_arguments)]
pub fn build_biasing_lists(
    corpus: &Corpus,
    domain: &str,
    split: Split,
    freq_domains: &[String],
    rarity_percentile: f64,
    distractors_per_utt: usize,
    seed: u64,
) -> Result<Vec<BiasingList>> {
    if !(0.0..=100.0).contains(&rarity_percentile) {
        return Err(Error::config(format!(
            "rarity percentile must be within [0, 100], got {rarity_percentile}"
        )));
    }
    let freq = train_frequencies(corpus, freq_domains);
    let mut counts: Vec<usize> = freq.values().copied().collect();
    counts.sort_unstable();
    let threshold = if rarity_percentile == 0.0 {
        0.0
    } else {
        let rank = ((rarity_percentile / 100.0) * counts.len() as f64).ceil() as usize;
        counts[rank.saturating_sub(1).min(counts.len() - 1)] as f64
    };
    // distractor pool: the rare half of the vocabulary
    let median = counts[counts.len() / 2] as f64;
    let mut pool: Vec<String> = freq
        .iter()
        .filter(|(_, &c)| (c as f64) <= median)
        .map(|(w, _)| w.clone())
        .collect();
    pool.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for u in corpus.select(domain, split) {
        let ref_words: HashSet<&str> = u.text.split_whitespace().collect();
        let mut targets: Vec<String> = Vec::new();
        if rarity_percentile > 0.0 {
            for tok in u.text.split_whitespace() {
                let f = freq.get(tok).copied().unwrap_or(0) as f64;
                if (f == 0.0 || f < threshold) && !targets.iter().any(|t| t == tok) {
                    targets.push(tok.to_string());
                }
            }
        }
        let mut distractors = Vec::new();
        let candidates: Vec<&String> = pool
            .iter()
            .filter(|w| !ref_words.contains(w.as_str()))
            .collect();
        while distractors.len() < distractors_per_utt && !candidates.is_empty() {
            let pick = candidates[rng.gen_range(0..candidates.len())].clone();
            if !distractors.contains(&pick) {
                distractors.push(pick);
            }
        }
        out.push(BiasingList {
            utterance_id: u.id.clone(),
            targets,
            distractors,
            threshold,
        });
    }
    Ok(out)
}

// ---- LM vocabulary ----

/// Special and template tokens layered over the grammar words to form the
/// language model's vocabulary (~96 tokens).
pub const SPECIAL_TOKENS: [&str; 5] = ["<bos>", "<eos>", "<audio>", "</audio>", "<resp>"];
pub const PUNCT_TOKENS: [&str; 4] = [".", ",", "?", ":"];
pub const TEMPLATE_WORDS: [&str; 18] = [
    "transcribe", "audio", "to", "text", "translate", "into", "as", "context", "speaker", "in",
    "mentions", "and", "what", "did", "do", "who", "talks", "about",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Deterministic token inventory: specials, punctuation, template words,
    /// language names, then every grammar word.
    pub fn build(grammar: &Grammar) -> Self {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        let push = |tok: &str, tokens: &mut Vec<String>, index: &mut HashMap<String, usize>| {
            if !index.contains_key(tok) {
                index.insert(tok.to_string(), tokens.len());
                tokens.push(tok.to_string());
            }
        };
        for t in SPECIAL_TOKENS {
            push(t, &mut tokens, &mut index);
        }
        for t in PUNCT_TOKENS {
            push(t, &mut tokens, &mut index);
        }
        for t in TEMPLATE_WORDS {
            push(t, &mut tokens, &mut index);
        }
        for lang in LANG_NAMES {
            push(lang, &mut tokens, &mut index);
        }
        for w in grammar.all_words() {
            push(&w, &mut tokens, &mut index);
        }
        Vocabulary { tokens, index }
    }

    pub fn restore_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> Result<usize> {
        self.index
            .get(tok)
            .copied()
            .ok_or_else(|| Error::OutOfVocab(tok.to_string()))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn bos(&self) -> usize {
        self.index["<bos>"]
    }
    pub fn eos(&self) -> usize {
        self.index["<eos>"]
    }
    pub fn audio_open(&self) -> usize {
        self.index["<audio>"]
    }
    pub fn audio_close(&self) -> usize {
        self.index["</audio>"]
    }
    pub fn resp(&self) -> usize {
        self.index["<resp>"]
    }

    /// Lowercase, split on whitespace, and peel punctuation characters off
    /// token edges as standalone tokens. Out-of-vocabulary words error.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for raw in text.split_whitespace() {
            let word = raw.to_lowercase();
            let mut core = word.as_str();
            let mut trailing = Vec::new();
            while let Some(last) = core.chars().last() {
                if PUNCT_TOKENS.contains(&last.to_string().as_str()) {
                    trailing.push(last.to_string());
                    core = &core[..core.len() - last.len_utf8()];
                } else {
                    break;
                }
            }
            while let Some(first) = core.chars().next() {
                if PUNCT_TOKENS.contains(&first.to_string().as_str()) {
                    out.push(self.id(&first.to_string())?);
                    core = &core[first.len_utf8()..];
                } else {
                    break;
                }
            }
            if !core.is_empty() {
                out.push(self.id(core)?);
            }
            for p in trailing.iter().rev() {
                out.push(self.id(p)?);
            }
        }
        Ok(out)
    }

    /// Inverse of `tokenize` up to whitespace; specials are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut words = Vec::new();
        for &id in ids {
            let t = self.token(id);
            if SPECIAL_TOKENS.contains(&t) {
                continue;
            }
            words.push(t.to_string());
        }
        words.join(" ")
    }
}

// ---- JSONL persistence ----

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    for row in rows {
        serde_json::to_writer(&mut f, row)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("{} not found", path.display())));
    }
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranslationRow {
    pub utterance_id: String,
    pub lang: String,
    pub text: String,
}

/// File names of the corpus artifacts inside a corpus directory.
pub mod files {
    pub const UTTERANCES: &str = "utterances.jsonl";
    pub const INSTRUCTIONS: &str = "instructions.jsonl";
    pub const TRANSLATIONS: &str = "translations.jsonl";
    pub const BIASING: &str = "biasing.jsonl";
    pub const SPEC: &str = "corpus_spec.json";
    pub const LEXICON: &str = "lexicon.json";
}

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(files::UTTERANCES), &corpus.utterances)?;
    let mut instructions = Vec::new();
    for u in &corpus.utterances {
        instructions.extend(instruction_samples(&corpus.spec.grammar, u)?);
    }
    write_jsonl(&dir.join(files::INSTRUCTIONS), &instructions)?;
    let mut translations = Vec::new();
    for u in &corpus.utterances {
        for lang in corpus.translations.langs.keys() {
            translations.push(TranslationRow {
                utterance_id: u.id.clone(),
                lang: lang.clone(),
                text: translate(&u.text, &corpus.translations, lang)?,
            });
        }
    }
    write_jsonl(&dir.join(files::TRANSLATIONS), &translations)?;
    let spec_file = fs::File::create(dir.join(files::SPEC))?;
    serde_json::to_writer_pretty(spec_file, &SpecWithLexicon {
        spec: corpus.spec.clone(),
        translations: corpus.translations.clone(),
    })?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SpecWithLexicon {
    spec: CorpusSpec,
    translations: TranslationLexicon,
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let spec_path = dir.join(files::SPEC);
    if !spec_path.exists() {
        return Err(Error::MissingArtifact(format!("{} not found", spec_path.display())));
    }
    let loaded: SpecWithLexicon = serde_json::from_str(&fs::read_to_string(spec_path)?)?;
    let utterances: Vec<UtteranceRecord> = read_jsonl(&dir.join(files::UTTERANCES))?;
    let mut corpus = Corpus {
        spec: loaded.spec,
        utterances,
        translations: loaded.translations,
        by_id: HashMap::new(),
    };
    corpus.rebuild_index();
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            grammar: Grammar::default_toy(),
            domains: vec![DomainSpec {
                profile: DomainProfile::clean(),
                reversed_lexical_weights: false,
                train: 100,
                dev: 10,
                test: 10,
            }],
        }
    }

    #[test]
    fn generate_count_contract_and_parseability() {
        let corpus = generate_corpus(&small_spec(), 7).unwrap();
        let train = corpus.select("clean", Split::Train);
        assert_eq!(train.len(), 100);
        for u in &corpus.utterances {
            parse_sentence(&corpus.spec.grammar, &u.text).unwrap();
        }
    }

    #[test]
    fn same_seed_identical_manifests() {
        let a = generate_corpus(&small_spec(), 9).unwrap();
        let b = generate_corpus(&small_spec(), 9).unwrap();
        assert_eq!(a.utterances, b.utterances);
        let c = generate_corpus(&small_spec(), 10).unwrap();
        assert_ne!(a.utterances, c.utterances);
    }

    #[test]
    fn splits_disjoint_and_ids_unique() {
        let corpus = generate_corpus(&CorpusSpec::default(), 3).unwrap();
        let mut ids = HashSet::new();
        for u in &corpus.utterances {
            assert!(ids.insert(&u.id), "duplicate id {}", u.id);
        }
        // dev/test sentences never leak from train (within a domain)
        for dom in ["clean", "shifted"] {
            let train_texts: HashSet<&String> = corpus
                .utterances
                .iter()
                .filter(|u| u.domain == dom && u.split == Split::Train)
                .map(|u| &u.text)
                .collect();
            let mut eval_texts = HashSet::new();
            for u in corpus
                .utterances
                .iter()
                .filter(|u| u.domain == dom && u.split != Split::Train)
            {
                assert!(!train_texts.contains(&u.text), "eval text leaked from train: {}", u.text);
                assert!(eval_texts.insert(&u.text), "duplicate eval text: {}", u.text);
            }
        }
    }

    #[test]
    fn oversized_request_is_spec_error() {
        let mut spec = small_spec();
        spec.grammar.adjectives.truncate(1);
        spec.grammar.nouns.truncate(2);
        spec.grammar.verbs.truncate(1);
        // capacity = 2*1*2*1*2*2 = 16 < 2*120
        assert!(matches!(
            generate_corpus(&spec, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn token_histogram_matches_multinomial_weights() {
        let mut spec = small_spec();
        spec.domains[0].train = 3000;
        spec.domains[0].dev = 0;
        spec.domains[0].test = 0;
        let corpus = generate_corpus(&spec, 1234).unwrap();
        let g = &corpus.spec.grammar;
        let mut counts: HashMap<String, usize> = HashMap::new();
        for u in &corpus.utterances {
            for t in u.text.split_whitespace() {
                *counts.entry(t.into()).or_insert(0) += 1;
            }
        }
        let n = corpus.utterances.len() as f64;
        // nouns fill two slots per sentence, adjectives and verbs one
        let cases = [
            (&g.adjectives, g.weights(g.adjectives.len(), false), 1.0),
            (&g.nouns, g.weights(g.nouns.len(), false), 2.0),
            (&g.verbs, g.weights(g.verbs.len(), false), 1.0),
        ];
        for (words, weights, slots) in cases {
            for (w, &p) in words.iter().zip(weights.iter()) {
                let draws = n * slots;
                let expected = draws * p;
                let sigma = (draws * p * (1.0 - p)).sqrt();
                let got = *counts.get(w).unwrap_or(&0) as f64;
                assert!(
                    (got - expected).abs() <= 3.0 * sigma + 1e-9,
                    "`{w}`: got {got}, expected {expected:.1} +- {:.1}",
                    3.0 * sigma
                );
            }
        }
    }

    #[test]
    fn sqa_templates_match_hand_examples() {
        let g = Grammar::default_toy();
        let qas = sqa_for_text(&g, "the red fox chased the hen").unwrap();
        assert!(qas.len() >= 3);
        let action = qas.iter().find(|q| q.source_slot == Slot::Action).unwrap();
        assert_eq!(action.question, "What did the fox do?");
        assert_eq!(action.answer, "chased");
        let agent = qas.iter().find(|q| q.source_slot == Slot::Agent).unwrap();
        assert_eq!(agent.answer, "fox"); // first noun token
        let patient = qas.iter().find(|q| q.source_slot == Slot::Patient).unwrap();
        assert_eq!(patient.answer, "hen");
    }

    #[test]
    fn sqa_answers_rederivable_from_reference() {
        let corpus = generate_corpus(&small_spec(), 11).unwrap();
        for u in corpus.utterances.iter().take(30) {
            for qa in generate_sqa(&corpus.spec.grammar, u).unwrap() {
                let re = answer_for_slot(&corpus.spec.grammar, &u.text, qa.source_slot).unwrap();
                assert_eq!(re, qa.answer);
            }
        }
    }

    #[test]
    fn unparseable_text_is_grammar_error() {
        let g = Grammar::default_toy();
        assert!(matches!(
            sqa_for_text(&g, "fox fox fox"),
            Err(Error::Grammar(_))
        ));
    }

    #[test]
    fn translate_examples() {
        let g = Grammar::default_toy();
        let lex = TranslationLexicon::build(&g, 5).unwrap();
        // empty -> empty
        assert_eq!(translate("", &lex, "xlang-1").unwrap(), "");
        // direct lookup follows the mapping, order preserved
        let map = &lex.langs["xlang-1"];
        let got = translate("red fox", &lex, "xlang-1").unwrap();
        assert_eq!(got, format!("{} {}", map["red"], map["fox"]));
        // unknown language
        assert!(translate("red", &lex, "klingon").is_err());
        // unmapped token
        assert!(translate("zebra", &lex, "xlang-1").is_err());
    }

    #[test]
    fn translation_round_trip_through_inverse() {
        let g = Grammar::default_toy();
        let lex = TranslationLexicon::build(&g, 6).unwrap();
        let src = "the red fox chased a hen";
        for lang in LANG_NAMES {
            let fwd = translate(src, &lex, lang).unwrap();
            let inv = lex.inverse(lang).unwrap();
            let back: Vec<String> = fwd
                .split_whitespace()
                .map(|t| inv[t].clone())
                .collect();
            assert_eq!(back.join(" "), src);
        }
    }

    #[test]
    fn translation_langs_disagree_on_content_words() {
        let g = Grammar::default_toy();
        let lex = TranslationLexicon::build(&g, 8).unwrap();
        let (a, b) = (&lex.langs["xlang-1"], &lex.langs["xlang-2"]);
        for w in g.nouns.iter().chain(&g.adjectives).chain(&g.verbs) {
            assert_ne!(a[w], b[w], "languages agree on `{w}`");
        }
    }

    #[test]
    fn biasing_percentile_zero_empty() {
        let corpus = generate_corpus(&small_spec(), 2).unwrap();
        let lists = build_biasing_lists(
            &corpus,
            "clean",
            Split::Test,
            &["clean".into()],
            0.0,
            0,
            1,
        )
        .unwrap();
        assert!(lists.iter().all(|l| l.targets.is_empty()));
    }

    #[test]
    fn biasing_rejects_out_of_range_percentile() {
        let corpus = generate_corpus(&small_spec(), 2).unwrap();
        assert!(build_biasing_lists(
            &corpus,
            "clean",
            Split::Test,
            &["clean".into()],
            120.0,
            0,
            1
        )
        .is_err());
    }

    #[test]
    fn absent_word_always_listed() {
        let mut corpus = generate_corpus(&small_spec(), 2).unwrap();
        // force a test utterance to contain a word scrubbed from train
        let g = corpus.spec.grammar.clone();
        let rare = g.nouns.last().unwrap().clone();
        for u in corpus.utterances.iter_mut() {
            if u.split == Split::Train {
                u.text = u.text.replace(&rare, &g.nouns[0]);
            }
        }
        let test_id = {
            let u = corpus
                .utterances
                .iter_mut()
                .find(|u| u.split == Split::Test)
                .unwrap();
            let mut toks: Vec<&str> = u.text.split_whitespace().collect();
            let owned = rare.clone();
            toks[5] = &owned;
            u.text = toks.join(" ");
            u.id.clone()
        };
        let lists = build_biasing_lists(
            &corpus,
            "clean",
            Split::Test,
            &["clean".into()],
            10.0,
            0,
            1,
        )
        .unwrap();
        let l = lists.iter().find(|l| l.utterance_id == test_id).unwrap();
        assert!(l.targets.contains(&rare), "{rare} missing from {:?}", l.targets);
    }

    #[test]
    fn listed_words_are_below_independent_percentile() {
        let corpus = generate_corpus(&CorpusSpec::default(), 21).unwrap();
        let pct = 10.0;
        let lists = build_biasing_lists(
            &corpus,
            "clean",
            Split::Test,
            &["clean".into()],
            pct,
            2,
            3,
        )
        .unwrap();
        // independent frequency pass
        let mut freq: HashMap<String, usize> = HashMap::new();
        for w in corpus.spec.grammar.all_words() {
            freq.insert(w, 0);
        }
        for u in &corpus.utterances {
            if u.domain == "clean" && u.split == Split::Train {
                for t in u.text.split_whitespace() {
                    *freq.get_mut(t).unwrap() += 1;
                }
            }
        }
        let mut counts: Vec<usize> = freq.values().copied().collect();
        counts.sort_unstable();
        let rank = ((pct / 100.0) * counts.len() as f64).ceil() as usize - 1;
        let thresh = counts[rank];
        let mut listed_any = false;
        for l in &lists {
            for t in &l.targets {
                listed_any = true;
                let f = freq[t];
                assert!(
                    f == 0 || f <= thresh,
                    "`{t}` listed with freq {f} > threshold {thresh}"
                );
            }
            // distractors never appear in the reference
            let u = corpus.get(&l.utterance_id).unwrap();
            for d in &l.distractors {
                assert!(!u.text.split_whitespace().any(|w| w == d));
            }
        }
        assert!(listed_any, "expected at least one biasing target in the default corpus");
    }

    #[test]
    fn jsonl_round_trip_unchanged() {
        let corpus = generate_corpus(&small_spec(), 13).unwrap();
        let mut samples = Vec::new();
        for u in corpus.utterances.iter().take(20) {
            samples.extend(instruction_samples(&corpus.spec.grammar, u).unwrap());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("instructions.jsonl");
        write_jsonl(&path, &samples).unwrap();
        let back: Vec<InstructionSample> = read_jsonl(&path).unwrap();
        assert_eq!(samples, back);
    }

    #[test]
    fn vocabulary_tokenize_and_size() {
        let g = Grammar::default_toy();
        let v = Vocabulary::build(&g);
        assert!(
            (90..=100).contains(&v.len()),
            "vocab size {} outside ~96 expectation",
            v.len()
        );
        let ids = v.tokenize("Transcribe the audio to text.").unwrap();
        let toks: Vec<&str> = ids.iter().map(|&i| v.token(i)).collect();
        assert_eq!(toks, vec!["transcribe", "the", "audio", "to", "text", "."]);
        let ids = v.tokenize("Translate the audio into the Xlang-1.").unwrap();
        assert!(ids.iter().any(|&i| v.token(i) == "xlang-1"));
        assert!(matches!(
            v.tokenize("the zebra"),
            Err(Error::OutOfVocab(w)) if w == "zebra"
        ));
        assert_eq!(v.detokenize(&v.tokenize("What did the fox do?").unwrap()), "what did the fox do ?");
    }

    #[test]
    fn save_and_load_corpus_dir() {
        let corpus = generate_corpus(&small_spec(), 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(dir.path(), &corpus).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus.utterances, loaded.utterances);
        assert_eq!(
            corpus.translations.langs["xlang-1"],
            loaded.translations.langs["xlang-1"]
        );
        assert!(loaded.get("clean-train-00000").is_ok());
        assert!(loaded.get("missing").is_err());
    }
}
