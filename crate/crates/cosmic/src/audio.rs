//! Synthetic speech synthesis and log-mel feature extraction.
//!
//! Every vocabulary word maps to a short sequence of tone "phonemes" (a
//! fundamental plus two harmonics, 60-120 ms each). Utterances are rendered
//! deterministically from (text, domain profile, seed); domain profiles vary
//! SNR, speaking rate, and phoneme detuning to create an acoustic shift.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

// ---- waveforms ----

#[derive(Debug, Clone)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Acoustic rendering condition. `speaking_rate_factor` > 1 speaks faster
/// (shorter phonemes); `phoneme_detune_cents` shifts every fundamental.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainProfile {
    pub name: String,
    pub noise_snr_db: f64,
    pub speaking_rate_factor: f64,
    pub phoneme_detune_cents: f64,
}

impl DomainProfile {
    pub fn clean() -> Self {
        DomainProfile {
            name: "clean".into(),
            noise_snr_db: 30.0,
            speaking_rate_factor: 1.0,
            phoneme_detune_cents: 0.0,
        }
    }

    pub fn shifted() -> Self {
        DomainProfile {
            name: "shifted".into(),
            noise_snr_db: 10.0,
            speaking_rate_factor: 1.25,
            phoneme_detune_cents: 35.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.speaking_rate_factor <= 0.0 {
            return Err(Error::config(format!(
                "speaking_rate_factor must be > 0, got {}",
                self.speaking_rate_factor
            )));
        }
        Ok(())
    }
}

// ---- mel features ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig {
            sample_rate: 16000,
            n_mels: 80,
            window_ms: 25.0,
            hop_ms: 10.0,
            fft_size: 512,
            fmin_hz: 40.0,
            fmax_hz: 7600.0,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn frame_count(&self, num_samples: usize) -> Result<usize> {
        let win = self.window_samples();
        if num_samples < win {
            return Err(Error::Contract(format!(
                "waveform of {num_samples} samples is shorter than one {win}-sample window"
            )));
        }
        Ok(1 + (num_samples - win) / self.hop_samples())
    }
}

#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    /// T x n_mels log filterbank energies.
    pub frames: Tensor<f32>,
    pub n_mels: usize,
    pub window_ms: f64,
    pub hop_ms: f64,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequency (Hz) of each triangular filter.
pub fn mel_center_freqs(config: &MelConfig) -> Vec<f64> {
    let lo = hz_to_mel(config.fmin_hz);
    let hi = hz_to_mel(config.fmax_hz);
    (1..=config.n_mels)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect()
}

/// Reusable STFT + filterbank pipeline.
pub struct MelExtractor {
    config: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// per mel filter: (first fft bin, triangle weights)
    filters: Vec<(usize, Vec<f64>)>,
}

impl MelExtractor {
    pub fn new(config: &MelConfig) -> Result<Self> {
        let win = config.window_samples();
        if config.fft_size < win {
            return Err(Error::config(format!(
                "fft_size {} smaller than window {win}",
                config.fft_size
            )));
        }
        if config.fmax_hz > config.sample_rate as f64 / 2.0 {
            return Err(Error::config("fmax above Nyquist"));
        }
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        // periodic Hann
        let window: Vec<f64> = (0..win)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos())
            .collect();
        let n_bins = config.fft_size / 2 + 1;
        let hz_per_bin = config.sample_rate as f64 / config.fft_size as f64;
        let lo = hz_to_mel(config.fmin_hz);
        let hi = hz_to_mel(config.fmax_hz);
        let edges: Vec<f64> = (0..config.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
            .collect();
        let mut filters = Vec::with_capacity(config.n_mels);
        for m in 0..config.n_mels {
            let (f_lo, f_c, f_hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut start = None;
            let mut weights = Vec::new();
            for b in 0..n_bins {
                let f = b as f64 * hz_per_bin;
                let w = if f <= f_lo || f >= f_hi {
                    0.0
                } else if f <= f_c {
                    (f - f_lo) / (f_c - f_lo)
                } else {
                    (f_hi - f) / (f_hi - f_c)
                };
                if w > 0.0 {
                    if start.is_none() {
                        start = Some(b);
                    }
                    weights.push(w);
                } else if start.is_some() {
                    break;
                }
            }
            filters.push((start.unwrap_or(0), weights));
        }
        Ok(MelExtractor {
            config: config.clone(),
            fft,
            window,
            filters,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    /// Magnitude STFT -> triangular mel filterbank -> natural log with floor.
    pub fn extract(&self, w: &Waveform) -> Result<MelSpectrogram> {
        if w.sample_rate != self.config.sample_rate {
            return Err(Error::config(format!(
                "waveform sample rate {} != configured {}",
                w.sample_rate, self.config.sample_rate
            )));
        }
        let frames = self.config.frame_count(w.samples.len())?;
        let win = self.config.window_samples();
        let hop = self.config.hop_samples();
        let n_bins = self.config.fft_size / 2 + 1;
        let mut out = vec![0f32; frames * self.config.n_mels];
        let mut buf = vec![Complex::new(0.0, 0.0); self.config.fft_size];
        let mut mags = vec![0f64; n_bins];
        for t in 0..frames {
            for c in buf.iter_mut() {
                *c = Complex::new(0.0, 0.0);
            }
            let base = t * hop;
            for n in 0..win {
                buf[n].re = w.samples[base + n] as f64 * self.window[n];
            }
            self.fft.process(&mut buf);
            for (b, m) in mags.iter_mut().enumerate() {
                *m = buf[b].norm();
            }
            for (m, (start, weights)) in self.filters.iter().enumerate() {
                let mut acc = 0.0;
                for (i, &wt) in weights.iter().enumerate() {
                    acc += wt * mags[start + i];
                }
                out[t * self.config.n_mels + m] = acc.max(self.config.log_floor).ln() as f32;
            }
        }
        Ok(MelSpectrogram {
            frames: Tensor::from_vec(&[frames, self.config.n_mels], out)?,
            n_mels: self.config.n_mels,
            window_ms: self.config.window_ms,
            hop_ms: self.config.hop_ms,
        })
    }
}

/// One-shot convenience wrapper around [`MelExtractor`].
pub fn log_mel(w: &Waveform, config: &MelConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(config)?.extract(w)
}

// ---- tone-word lexicon ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phoneme {
    pub freq_hz: f64,
    pub duration_ms: f64,
}

/// Maps every vocabulary word to a sequence of 2-4 phonemes drawn from a
/// grid of tone fundamentals spaced at least two mel-bin centers apart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    pub phonemes: Vec<Phoneme>,
    pub words: IndexMap<String, Vec<usize>>,
}

/// Grid spacing in mel filter centers between adjacent phoneme fundamentals.
const PHONEME_GRID_STEP: usize = 3;
const PHONEME_FMIN: f64 = 150.0;
const PHONEME_FMAX: f64 = 2500.0;

impl Lexicon {
    pub fn build(words: &[String], seed: u64, mel: &MelConfig) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::config("lexicon needs at least one word"));
        }
        let centers = mel_center_freqs(mel);
        let usable: Vec<f64> = centers
            .iter()
            .copied()
            .filter(|&f| (PHONEME_FMIN..=PHONEME_FMAX).contains(&f))
            .collect();
        let grid: Vec<f64> = usable.iter().copied().step_by(PHONEME_GRID_STEP).collect();
        // learnability check: adjacent grid tones >= 2 mel-bin centers apart
        for pair in grid.windows(2) {
            let between = centers.iter().filter(|&&c| c > pair[0] && c < pair[1]).count();
            if between < 1 {
                return Err(Error::config(
                    "phoneme grid too dense: fundamentals closer than 2 mel-bin centers",
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phonemes: Vec<Phoneme> = grid
            .iter()
            .map(|&f| Phoneme {
                freq_hz: f,
                duration_ms: rng.gen_range(60.0..=120.0),
            })
            .collect();
        let mut used = std::collections::HashSet::new();
        let mut map = IndexMap::new();
        for word in words {
            let mut attempt = 0;
            let seq = loop {
                let len = rng.gen_range(2..=4usize);
                let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..phonemes.len())).collect();
                if used.insert(seq.clone()) {
                    break seq;
                }
                attempt += 1;
                if attempt > 1000 {
                    return Err(Error::config(
                        "phoneme inventory too small for distinct word pronunciations",
                    ));
                }
            };
            if map.insert(word.clone(), seq).is_some() {
                return Err(Error::config(format!("duplicate lexicon word `{word}`")));
            }
        }
        Ok(Lexicon {
            phonemes,
            words: map,
        })
    }

    pub fn phoneme_seq(&self, word: &str) -> Result<&[usize]> {
        self.words
            .get(word)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::UnknownToken(word.to_string()))
    }
}

const HARMONIC_AMPS: [f64; 3] = [1.0, 0.45, 0.2];
const RAMP_MS: f64 = 5.0;
const LEAD_MS: f64 = 5.0;
const WORD_GAP_MS: f64 = 15.0;

/// Render an utterance. Deterministic in (text, profile, seed).
pub fn synth_utterance(
    text: &[String],
    lexicon: &Lexicon,
    profile: &DomainProfile,
    seed: u64,
    sample_rate: u32,
) -> Result<Waveform> {
    profile.validate()?;
    if text.is_empty() {
        return Err(Error::Grammar("empty utterances are disallowed".into()));
    }
    let sr = sample_rate as f64;
    let detune = 2f64.powf(profile.phoneme_detune_cents / 1200.0);
    let rate = profile.speaking_rate_factor;
    let lead = (LEAD_MS / 1000.0 * sr) as usize;
    let gap = (WORD_GAP_MS / 1000.0 * sr / rate) as usize;
    let mut samples: Vec<f64> = vec![0.0; lead];
    for (wi, word) in text.iter().enumerate() {
        if wi > 0 {
            samples.extend(std::iter::repeat(0.0).take(gap));
        }
        for &pi in lexicon.phoneme_seq(word)? {
            let ph = &lexicon.phonemes[pi];
            let n = ((ph.duration_ms / 1000.0) * sr / rate).round() as usize;
            let ramp = ((RAMP_MS / 1000.0) * sr).round() as usize;
            let f = ph.freq_hz * detune;
            for i in 0..n {
                let t = i as f64 / sr;
                let mut v = 0.0;
                for (h, amp) in HARMONIC_AMPS.iter().enumerate() {
                    v += amp * (2.0 * PI * f * (h + 1) as f64 * t).sin();
                }
                let env = if i < ramp {
                    i as f64 / ramp as f64
                } else if i + ramp > n {
                    (n - i) as f64 / ramp as f64
                } else {
                    1.0
                };
                samples.push(v * env * 0.3);
            }
        }
    }
    samples.extend(std::iter::repeat(0.0).take(lead));

    // additive white noise at the profile SNR relative to signal power
    let signal_power = samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64;
    let noise_power = signal_power / 10f64.powf(profile.noise_snr_db / 10.0);
    let noise_std = noise_power.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, 1.0).unwrap();
    for s in samples.iter_mut() {
        *s += noise_std * normal.sample(&mut rng);
    }
    let peak = samples.iter().fold(0.0f64, |a, &s| a.max(s.abs()));
    let scale = if peak > 0.99 { 0.99 / peak } else { 1.0 };
    Ok(Waveform {
        samples: samples.iter().map(|&s| (s * scale) as f32).collect(),
        sample_rate,
    })
}

// ---- feature cache ----

/// Utterance-id-keyed mel feature cache, persisted in the shared tensor
/// archive format (one entry per utterance).
#[derive(Debug, Default)]
pub struct FeatureSet {
    map: std::collections::HashMap<String, Tensor<f32>>,
}

impl FeatureSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: &str, frames: Tensor<f32>) {
        self.map.insert(id.to_string(), frames);
    }

    pub fn get(&self, id: &str) -> Result<&Tensor<f32>> {
        self.map
            .get(id)
            .ok_or_else(|| Error::MissingArtifact(format!("no cached features for utterance `{id}`")))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.map.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn save(&self, dir: &Path, meta: &serde_json::Value) -> Result<()> {
        use crate::tensor::archive::ArchiveEntry;
        let mut ids: Vec<&String> = self.map.keys().collect();
        ids.sort();
        let entries: Vec<ArchiveEntry<f32>> = ids
            .into_iter()
            .map(|id| ArchiveEntry {
                name: id.clone(),
                tensor: self.map[id].clone(),
                trainable: false,
            })
            .collect();
        crate::tensor::archive::save(dir, &entries, meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (entries, _) = crate::tensor::archive::load::<f32>(dir)?;
        let mut set = FeatureSet::new();
        for e in entries {
            set.map.insert(e.name, e.tensor);
        }
        Ok(set)
    }

    /// Merge another cache into this one.
    pub fn extend(&mut self, other: FeatureSet) {
        self.map.extend(other.map);
    }
}

// ---- WAV persistence ----

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32) as i16)?;
    }
    writer.finalize()?;
    Ok(())
}
