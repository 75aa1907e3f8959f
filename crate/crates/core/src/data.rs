//! Synthetic code-switching ASR task.
//!
//! Each utterance is a sequence of language segments over disjoint token-id
//! ranges; "speech" features are codebook rows (one fixed seeded row per
//! token, two frames per token) plus per-utterance Gaussian noise. After
//! each unit the language is resampled from the mix distribution with
//! probability `switch_prob`, so realized token-level ratios concentrate on
//! the configured mix for any switch rate. Everything regenerates
//! bit-identically from `(seed, config)`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{seed_for, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitGranularity {
    /// one token per error unit (character-level scoring)
    CharLike,
    /// `tokens_per_unit` consecutive tokens form one error unit
    WordLike,
}

/// A toy language: a name, a granularity, and a private slice of the text
/// token space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyLanguageSpec {
    pub name: String,
    pub unit_granularity: UnitGranularity,
    /// half-open `[start, end)` within the text-token space
    pub token_id_range: (usize, usize),
    /// word width in tokens; read only for word-like languages
    pub tokens_per_unit: usize,
}

impl ToyLanguageSpec {
    pub fn char_like(name: &str, start: usize, end: usize) -> Self {
        Self {
            name: name.into(),
            unit_granularity: UnitGranularity::CharLike,
            token_id_range: (start, end),
            tokens_per_unit: 1,
        }
    }

    pub fn word_like(name: &str, start: usize, end: usize, tokens_per_unit: usize) -> Self {
        Self {
            name: name.into(),
            unit_granularity: UnitGranularity::WordLike,
            token_id_range: (start, end),
            tokens_per_unit,
        }
    }

    pub fn contains(&self, token: usize) -> bool {
        token >= self.token_id_range.0 && token < self.token_id_range.1
    }
}

/// One synthetic utterance: target tokens, per-token language names, and
/// the feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<usize>,
    pub token_langs: Vec<String>,
    pub features: Tensor,
}

/// Generation parameters for one synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub langs: Vec<ToyLanguageSpec>,
    /// starting/resampling distribution over languages; sums to 1
    pub mix_ratio: Vec<f64>,
    /// probability of resampling the language after each unit
    pub switch_prob: f64,
    pub num_utterances: usize,
    pub min_units: usize,
    pub max_units: usize,
    pub frames_per_token: usize,
    pub noise_std: f64,
    pub d_feat: usize,
    /// codebook rows; token ids index into it, so it must cover the vocab
    pub codebook_size: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            langs: vec![
                ToyLanguageSpec::char_like("A", 0, 24),
                ToyLanguageSpec::word_like("B", 24, 48, 2),
            ],
            mix_ratio: vec![0.6, 0.4],
            switch_prob: 0.3,
            num_utterances: 400,
            min_units: 3,
            max_units: 8,
            frames_per_token: 2,
            noise_std: 0.1,
            d_feat: 16,
            codebook_size: 64,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.langs.is_empty() || self.mix_ratio.len() != self.langs.len() {
            return Err(Error::Config("mix_ratio must give one weight per language".into()));
        }
        let sum: f64 = self.mix_ratio.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.mix_ratio.iter().any(|&r| r < 0.0) {
            return Err(Error::Config(format!(
                "mix ratios must be nonnegative and sum to 1, got {sum}"
            )));
        }
        if !(0.0..=1.0).contains(&self.switch_prob) {
            return Err(Error::Config("switch_prob must lie in [0, 1]".into()));
        }
        if self.num_utterances == 0 || self.min_units == 0 || self.max_units < self.min_units {
            return Err(Error::Config("sizes must be >= 1 and max_units >= min_units".into()));
        }
        if self.frames_per_token == 0 || self.d_feat == 0 {
            return Err(Error::Config("frames_per_token and d_feat must be >= 1".into()));
        }
        for (i, lang) in self.langs.iter().enumerate() {
            let (start, end) = lang.token_id_range;
            if start >= end || end > self.codebook_size {
                return Err(Error::Config(format!(
                    "language {} range [{start}, {end}) is empty or exceeds the codebook",
                    lang.name
                )));
            }
            if lang.unit_granularity == UnitGranularity::WordLike && lang.tokens_per_unit == 0 {
                return Err(Error::Config(format!(
                    "word-like language {} needs tokens_per_unit >= 1",
                    lang.name
                )));
            }
            for other in &self.langs[..i] {
                let (os, oe) = other.token_id_range;
                if start < oe && os < end {
                    return Err(Error::Config(format!(
                        "token ranges of {} and {} overlap",
                        other.name, lang.name
                    )));
                }
                if other.name == lang.name {
                    return Err(Error::Config(format!("duplicate language {}", lang.name)));
                }
            }
        }
        Ok(())
    }

    pub fn lang_names(&self) -> Vec<String> {
        self.langs.iter().map(|l| l.name.clone()).collect()
    }

    /// Highest-ratio language (ties break toward the earlier entry); used
    /// as the decoder language-id for this corpus.
    pub fn dominant_lang(&self) -> &str {
        let mut best = 0;
        for i in 1..self.mix_ratio.len() {
            if self.mix_ratio[i] > self.mix_ratio[best] {
                best = i;
            }
        }
        &self.langs[best].name
    }

    pub fn lang_of_token(&self, token: usize) -> Option<&ToyLanguageSpec> {
        self.langs.iter().find(|l| l.contains(token))
    }
}

/// One generated split, regenerable bit-identically from `(seed, config)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: String,
    pub seed: u64,
    pub config: GenConfig,
    pub utterances: Vec<Utterance>,
}

/// The per-token feature codebook: one fixed seeded row per token id,
/// shared by every split generated from the same config seed.
pub fn codebook(config: &GenConfig) -> Tensor {
    Tensor::gaussian(config.codebook_size, config.d_feat, 1.0, seed_for(config.seed, "codebook"))
}

fn weighted_choice(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let draw: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if draw < acc {
            return i;
        }
    }
    weights.len() - 1
}

/// Synthesizes the feature sequence for a token sequence:
/// `frames_per_token` frames per token, each the token's codebook row plus
/// seeded Gaussian noise.
pub fn synth_features(
    tokens: &[usize],
    codebook: &Tensor,
    frames_per_token: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::InvalidArg("synth_features: empty token sequence".into()));
    }
    let d = codebook.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(tokens.len() * frames_per_token);
    for &token in tokens {
        for _ in 0..frames_per_token {
            let base = codebook.row(token);
            let mut frame = Vec::with_capacity(d);
            for &b in base {
                let noise: f64 =
                    if noise_std > 0.0 { noise_std * standard_normal(&mut rng) } else { 0.0 };
                frame.push(b + noise);
            }
            rows.push(frame);
        }
    }
    Tensor::from_rows(&rows)
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > 0.0 {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Generates one split. Utterance `u` of split `s` draws from an RNG seeded
/// by `(config.seed, s, u)`, so splits are disjoint streams over a shared
/// codebook.
pub fn gen_dataset(config: &GenConfig, split: &str) -> Result<DatasetManifest> {
    config.validate()?;
    let book = codebook(config);
    let mut utterances = Vec::with_capacity(config.num_utterances);
    for u in 0..config.num_utterances {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed_for(config.seed, &format!("{split}/utt{u}")));
        let n_units = rng.gen_range(config.min_units..=config.max_units);
        let mut tokens = Vec::new();
        let mut token_langs = Vec::new();
        let mut lang_idx = weighted_choice(&mut rng, &config.mix_ratio);
        for _ in 0..n_units {
            let lang = &config.langs[lang_idx];
            let (start, end) = lang.token_id_range;
            let width = match lang.unit_granularity {
                UnitGranularity::CharLike => 1,
                UnitGranularity::WordLike => lang.tokens_per_unit,
            };
            for _ in 0..width {
                tokens.push(rng.gen_range(start..end));
                token_langs.push(lang.name.clone());
            }
            let switch: f64 = rng.gen();
            if switch < config.switch_prob {
                lang_idx = weighted_choice(&mut rng, &config.mix_ratio);
            }
        }
        let features = synth_features(
            &tokens,
            &book,
            config.frames_per_token,
            config.noise_std,
            seed_for(config.seed, &format!("{split}/utt{u}/noise")),
        )?;
        utterances.push(Utterance {
            id: format!("{split}-{u:04}"),
            tokens,
            token_langs,
            features,
        });
    }
    Ok(DatasetManifest {
        split: split.to_string(),
        seed: config.seed,
        config: config.clone(),
        utterances,
    })
}

// ── manifest persistence ────────────────────────────────────────────
//
// manifest.json: {split, seed, config, utterances:[{id, tokens,
// token_langs, feature_file}]}; features as little-endian f64 binaries
// with an 8-byte shape header (u32 rows, u32 cols).

#[derive(Serialize, Deserialize)]
struct ManifestJson {
    split: String,
    seed: u64,
    config: GenConfig,
    utterances: Vec<UtteranceJson>,
}

#[derive(Serialize, Deserialize)]
struct UtteranceJson {
    id: String,
    tokens: Vec<usize>,
    token_langs: Vec<String>,
    feature_file: String,
}

pub fn save_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    let feature_dir = dir.join("features");
    fs::create_dir_all(&feature_dir)?;
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for utt in &manifest.utterances {
        let feature_file = format!("features/{}.bin", utt.id);
        write_features(&dir.join(&feature_file), &utt.features)?;
        utterances.push(UtteranceJson {
            id: utt.id.clone(),
            tokens: utt.tokens.clone(),
            token_langs: utt.token_langs.clone(),
            feature_file,
        });
    }
    let json = ManifestJson {
        split: manifest.split.clone(),
        seed: manifest.seed,
        config: manifest.config.clone(),
        utterances,
    };
    let text = serde_json::to_string_pretty(&json)?;
    fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let json: ManifestJson = serde_json::from_str(&text)?;
    let mut utterances = Vec::with_capacity(json.utterances.len());
    for utt in json.utterances {
        let features = read_features(&dir.join(&utt.feature_file))?;
        utterances.push(Utterance {
            id: utt.id,
            tokens: utt.tokens,
            token_langs: utt.token_langs,
            features,
        });
    }
    Ok(DatasetManifest {
        split: json.split,
        seed: json.seed,
        config: json.config,
        utterances,
    })
}

fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(&(features.rows() as u32).to_le_bytes())?;
    file.write_all(&(features.cols() as u32).to_le_bytes())?;
    for v in features.values() {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_features(path: &Path) -> Result<Tensor> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 4];
    file.read_exact(&mut header)?;
    let rows = u32::from_le_bytes(header) as usize;
    file.read_exact(&mut header)?;
    let cols = u32::from_le_bytes(header) as usize;
    let mut values = vec![0.0f64; rows * cols];
    let mut buf = [0u8; 8];
    for v in values.iter_mut() {
        file.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Tensor::new(vec![rows, cols], values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_bit_deterministic() {
        let config = GenConfig { num_utterances: 20, ..GenConfig::default() };
        let a = gen_dataset(&config, "train").unwrap();
        let b = gen_dataset(&config, "train").unwrap();
        assert_eq!(a, b);
        let dev = gen_dataset(&config, "dev").unwrap();
        assert_ne!(a.utterances[0].tokens, dev.utterances[0].tokens);
    }

    #[test]
    fn zero_switch_probability_yields_monolingual_utterances() {
        let config = GenConfig { switch_prob: 0.0, num_utterances: 50, ..GenConfig::default() };
        let set = gen_dataset(&config, "train").unwrap();
        for utt in &set.utterances {
            let first = &utt.token_langs[0];
            assert!(utt.token_langs.iter().all(|l| l == first), "{:?}", utt.token_langs);
        }
    }

    #[test]
    fn realized_token_ratio_concentrates_on_the_mix() {
        let config = GenConfig {
            mix_ratio: vec![0.83, 0.17],
            switch_prob: 0.4,
            num_utterances: 200,
            min_units: 6,
            max_units: 12,
            ..GenConfig::default()
        };
        let set = gen_dataset(&config, "train").unwrap();
        let mut counts = [0usize; 2];
        for utt in &set.utterances {
            for lang in &utt.token_langs {
                counts[if lang == "A" { 0 } else { 1 }] += 1;
            }
        }
        // Word-like B emits 2 tokens per unit, so compare against the
        // token-level expectation rather than the raw unit mix.
        let expected_a = 0.83 / (0.83 + 2.0 * 0.17);
        let total = (counts[0] + counts[1]) as f64;
        let realized_a = counts[0] as f64 / total;
        assert!(
            (realized_a - expected_a).abs() < 0.05,
            "realized {realized_a:.3} vs expected {expected_a:.3}"
        );
    }

    #[test]
    fn feature_shape_is_frames_per_token_times_tokens() {
        let config = GenConfig::default();
        let book = codebook(&config);
        let x = synth_features(&[1, 2, 3, 4, 5], &book, 2, 0.1, 7).unwrap();
        assert_eq!(x.shape(), &[10, 16]);
    }

    #[test]
    fn zero_noise_features_are_exact_codebook_rows() {
        let config = GenConfig::default();
        let book = codebook(&config);
        let x = synth_features(&[3, 9], &book, 2, 0.0, 7).unwrap();
        assert_eq!(x.row(0), book.row(3));
        assert_eq!(x.row(1), book.row(3));
        assert_eq!(x.row(2), book.row(9));
        assert_eq!(x.row(3), book.row(9));
    }

    #[test]
    fn repeated_noisy_draws_average_to_the_codebook_row() {
        let config = GenConfig::default();
        let book = codebook(&config);
        let token = 11usize;
        let mut mean = vec![0.0; book.cols()];
        let draws = 100;
        let mut first_two = Vec::new();
        for s in 0..draws {
            let x = synth_features(&[token], &book, 1, 0.1, 1000 + s).unwrap();
            for (m, v) in mean.iter_mut().zip(x.row(0)) {
                *m += v;
            }
            if s < 2 {
                first_two.push(x.row(0).to_vec());
            }
        }
        assert_ne!(first_two[0], first_two[1], "different seeds differ");
        for (j, m) in mean.iter().enumerate() {
            let avg = m / draws as f64;
            // std of the mean is 0.1/sqrt(100) = 0.01; allow 5 sigma
            assert!(
                (avg - book.at(token, j)).abs() < 0.05,
                "column {j}: {avg} vs {}",
                book.at(token, j)
            );
        }
    }

    #[test]
    fn overlapping_token_ranges_are_rejected() {
        let config = GenConfig {
            langs: vec![
                ToyLanguageSpec::char_like("A", 0, 30),
                ToyLanguageSpec::char_like("B", 20, 48),
            ],
            ..GenConfig::default()
        };
        assert!(gen_dataset(&config, "train").is_err());
    }

    #[test]
    fn manifest_round_trip_is_bit_exact() {
        let config = GenConfig { num_utterances: 5, ..GenConfig::default() };
        let set = gen_dataset(&config, "dev").unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_manifest(&set, dir.path()).unwrap();
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(set, loaded);
    }

    #[test]
    fn dominant_lang_breaks_ties_toward_the_first_entry() {
        let config = GenConfig { mix_ratio: vec![0.5, 0.5], ..GenConfig::default() };
        assert_eq!(config.dominant_lang(), "A");
        let config = GenConfig { mix_ratio: vec![0.2, 0.8], ..GenConfig::default() };
        assert_eq!(config.dominant_lang(), "B");
    }
}
