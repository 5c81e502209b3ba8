//! Seeded toy speech corpora.
//!
//! A *language* is a set of unit-norm token prototypes in `d_in` plus a
//! permutation from prototype index to label, both drawn from
//! `(language seed, language_tag)`. An utterance is a token sequence with
//! no adjacent repeats; each token emits `r ∈ [r_min, r_max]` frames of its
//! prototype plus `N(0, σ²)` noise. Variable `r` means the model has to learn
//! the alignment rather than classify fixed-width chunks.
//!
//! Token frequencies follow weights `1/sqrt(i + 1)` over prototype index `i`,
//! so a permuted alphabet shifts which labels are common.
//!
//! File layout (little-endian): magic `"SYND1"`, `u32` length + JSON echo of
//! the spec, `u64` seed, `u32` utterance count, then per utterance
//! `u32 T`, `u32 d_in`, `T·d_in × f64` frames, `u32` label count,
//! labels as `u32`.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ctc::LabelSeq;
use crate::numerics::Tensor;
use crate::seeding::keyed_rng;
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"SYND1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub vocab_size: usize,
    pub d_in: usize,
    /// Inclusive `[r_min, r_max]` frames emitted per token.
    pub frames_per_token: [usize; 2],
    pub noise_sigma: f64,
    /// Inclusive `[min, max]` tokens per utterance.
    pub utterance_len: [usize; 2],
    pub num_utterances: usize,
    /// Drives utterance sampling.
    pub seed: u64,
    pub language_tag: String,
    /// Drives prototypes and the label permutation; defaults to `seed`.
    /// Train and test splits of one language share it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype_seed: Option<u64>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be >= 2"));
        }
        if self.d_in == 0 {
            return Err(Error::config("d_in", "must be >= 1"));
        }
        let [r_min, r_max] = self.frames_per_token;
        if r_min == 0 || r_min > r_max {
            return Err(Error::config("frames_per_token", "need 1 <= r_min <= r_max"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }
        let [l_min, l_max] = self.utterance_len;
        if l_min == 0 || l_min > l_max {
            return Err(Error::config("utterance_len", "need 1 <= min <= max"));
        }
        Ok(())
    }

    pub fn language_seed(&self) -> u64 {
        self.prototype_seed.unwrap_or(self.seed)
    }

    /// Another split of the same language: same prototypes and alphabet,
    /// fresh utterances.
    pub fn split(&self, seed: u64, num_utterances: usize) -> Self {
        SynthSpec {
            seed,
            num_utterances,
            prototype_seed: Some(self.language_seed()),
            ..self.clone()
        }
    }
}

/// Prototypes and alphabet of one language.
#[derive(Clone, Debug, PartialEq)]
pub struct Language {
    /// `prototypes[i]` is the unit-norm frame center of prototype `i`.
    pub prototypes: Vec<Vec<f64>>,
    /// `labels[i]` is the label emitted for prototype `i`.
    pub labels: Vec<usize>,
}

impl Language {
    pub fn from_spec(spec: &SynthSpec) -> Self {
        let mut rng = keyed_rng(spec.language_seed(), &["language", &spec.language_tag]);
        let prototypes = (0..spec.vocab_size)
            .map(|_| {
                let v: Vec<f64> = (0..spec.d_in).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let mut labels: Vec<usize> = (0..spec.vocab_size).collect();
        labels.shuffle(&mut rng);
        Language { prototypes, labels }
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.prototypes.iter().enumerate() {
            for b in &self.prototypes[i + 1..] {
                let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    /// `T×d_in`.
    pub frames: Tensor,
    pub labels: LabelSeq,
    pub true_length: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.true_length).sum()
    }

    /// Splits off the last `fraction` of utterances (at least one when
    /// `fraction > 0` and more than one utterance exists).
    pub fn split_tail(&self, fraction: f64) -> (Dataset, Dataset) {
        let n = self.utterances.len();
        let mut tail = ((n as f64) * fraction).round() as usize;
        if fraction > 0.0 && n > 1 {
            tail = tail.clamp(1, n - 1);
        }
        let head = n - tail.min(n);
        let part = |u: &[Utterance]| Dataset {
            spec: self.spec.clone(),
            utterances: u.to_vec(),
        };
        (part(&self.utterances[..head]), part(&self.utterances[head..]))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.spec).expect("spec serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.spec.seed.to_le_bytes());
        out.extend_from_slice(&(self.utterances.len() as u32).to_le_bytes());
        for u in &self.utterances {
            let [t, d] = [u.frames.shape()[0], u.frames.shape()[1]];
            out.extend_from_slice(&(t as u32).to_le_bytes());
            out.extend_from_slice(&(d as u32).to_le_bytes());
            for v in u.frames.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(u.labels.len() as u32).to_le_bytes());
            for &l in u.labels.tokens() {
                out.extend_from_slice(&(l as u32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
            let end = end.ok_or_else(|| Error::Format("dataset file truncated".into()))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(5)? != MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
        let json_len = u32_at(take(4)?);
        let spec: SynthSpec = serde_json::from_slice(take(json_len)?)
            .map_err(|e| Error::Format(format!("dataset spec: {e}")))?;
        let seed = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        if seed != spec.seed {
            return Err(Error::Format("seed does not match spec echo".into()));
        }
        let count = u32_at(take(4)?);
        let mut utterances = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let t = u32_at(take(4)?);
            let d = u32_at(take(4)?);
            let raw = take(t * d * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let n = u32_at(take(4)?);
            let labels = take(n * 4)?.chunks_exact(4).map(u32_at).collect();
            utterances.push(Utterance {
                frames: Tensor::new(vec![t, d], data)?,
                labels: LabelSeq::new(labels, spec.vocab_size)?,
                true_length: t,
            });
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes in dataset file".into()));
        }
        Ok(Dataset { spec, utterances })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn sample_weighted<R: Rng>(rng: &mut R, weights: &[f64], exclude: Option<usize>) -> usize {
    let total: f64 = weights
        .iter()
        .enumerate()
        .filter(|&(i, _)| Some(i) != exclude)
        .map(|(_, w)| w)
        .sum();
    let mut x = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        last = i;
        if x < w {
            return i;
        }
        x -= w;
    }
    last
}

/// Generates `spec.num_utterances` utterances; pure in `spec`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let lang = Language::from_spec(spec);
    let weights: Vec<f64> = (0..spec.vocab_size).map(|i| 1.0 / ((i + 1) as f64).sqrt()).collect();
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let mut rng = keyed_rng(spec.seed, &["utterances", &spec.language_tag]);
    let [r_min, r_max] = spec.frames_per_token;
    let [l_min, l_max] = spec.utterance_len;

    let mut utterances = Vec::with_capacity(spec.num_utterances);
    for _ in 0..spec.num_utterances {
        let n_tokens = rng.random_range(l_min..=l_max);
        let mut protos = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            protos.push(sample_weighted(&mut rng, &weights, protos.last().copied()));
        }
        let mut data = Vec::new();
        for &p in &protos {
            let repeats = rng.random_range(r_min..=r_max);
            for _ in 0..repeats {
                data.extend(lang.prototypes[p].iter().map(|&c| c + noise.sample(&mut rng)));
            }
        }
        let t = data.len() / spec.d_in;
        let labels = protos.iter().map(|&p| lang.labels[p]).collect();
        utterances.push(Utterance {
            frames: Tensor::new(vec![t, spec.d_in], data)?,
            labels: LabelSeq::new(labels, spec.vocab_size)?,
            true_length: t,
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        utterances,
    })
}

/// Specs for two related languages "A" and "B" sharing every size knob of
/// `template`; B has its own prototypes and a permuted label alphabet.
pub fn language_pair_specs(template: &SynthSpec, seed: u64) -> (SynthSpec, SynthSpec) {
    let lang = |tag: &str| SynthSpec {
        seed,
        language_tag: tag.to_string(),
        prototype_seed: Some(seed),
        ..template.clone()
    };
    (lang("A"), lang("B"))
}

pub fn make_language_pair(template: &SynthSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = language_pair_specs(template, seed);
    Ok((generate(&a)?, generate(&b)?))
}
