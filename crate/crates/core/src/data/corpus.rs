use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::nn::Matrix;
use crate::rng::{derive_seed, substream};
use crate::vocab::Alphabet;

/// Out-of-domain perturbation applied to unlabeled and test material.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    pub enabled: bool,
    /// Rotation angle as a fraction of a right angle, applied in every
    /// plane of a random orthonormal basis.
    pub rotation: f64,
    pub noise_multiplier: f64,
    /// Added to the maximum symbol duration.
    pub extra_duration: usize,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            enabled: false,
            rotation: 0.5,
            noise_multiplier: 1.5,
            extra_duration: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Base letters; the separator is appended to form the alphabet.
    pub letters: String,
    pub separator: char,
    pub feature_dim: usize,
    /// Number of distinct words in the inventory.
    pub inventory: usize,
    pub word_len_min: usize,
    pub word_len_max: usize,
    pub words_min: usize,
    pub words_max: usize,
    pub duration_min: usize,
    pub duration_max: usize,
    pub noise_std: f64,
    /// Expected norm of a symbol prototype.
    pub prototype_scale: f64,
    /// Exponent of the Zipf law over the word inventory.
    pub zipf_exponent: f64,
    pub shift: DomainShift,
    /// Set from the experiment's global seed rather than read from files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            letters: "abcdefghijkl".into(),
            separator: '|',
            feature_dim: 8,
            inventory: 60,
            word_len_min: 2,
            word_len_max: 5,
            words_min: 3,
            words_max: 8,
            duration_min: 1,
            duration_max: 3,
            noise_std: 0.3,
            prototype_scale: 1.0,
            zipf_exponent: 1.0,
            shift: DomainShift::default(),
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn alphabet(&self) -> Result<Alphabet, DataError> {
        Alphabet::from_letters(&self.letters, self.separator).map_err(|e| DataError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: &str| Err(DataError::Config(m.to_string()));
        self.alphabet()?;
        if self.letters.chars().count() < 2 {
            return err("at least two letters are needed to avoid adjacent repeats");
        }
        if self.duration_min == 0 {
            return err("duration_min must be at least 1 frame");
        }
        if self.duration_min > self.duration_max {
            return err("duration_min exceeds duration_max");
        }
        if self.word_len_min == 0 || self.word_len_min > self.word_len_max {
            return err("word length range is empty");
        }
        if self.words_min == 0 || self.words_min > self.words_max {
            return err("words-per-utterance range is empty");
        }
        if self.feature_dim == 0 || self.inventory == 0 {
            return err("feature_dim and inventory must be positive");
        }
        if !(self.noise_std >= 0.0) || !(self.prototype_scale > 0.0) || !(self.zipf_exponent >= 0.0) {
            return err("noise_std, prototype_scale and zipf_exponent must be non-negative");
        }
        if self.shift.enabled && !(self.shift.noise_multiplier >= 0.0) {
            return err("shift.noise_multiplier must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Labeled,
    Unlabeled,
    Dev,
    Test,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Labeled, Role::Unlabeled, Role::Dev, Role::Test];

    pub fn name(self) -> &'static str {
        match self {
            Role::Labeled => "labeled",
            Role::Unlabeled => "unlabeled",
            Role::Dev => "dev",
            Role::Test => "test",
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            Role::Labeled => "lab",
            Role::Unlabeled => "unl",
            Role::Dev => "dev",
            Role::Test => "tst",
        }
    }

    fn shifted(self) -> bool {
        matches!(self, Role::Unlabeled | Role::Test)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T x F` frames.
    pub features: Matrix,
    /// Base-alphabet transcript; `None` in the unlabeled training view.
    pub transcript: Option<String>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub role: Role,
    pub feature_dim: usize,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Concatenation of two datasets' utterances under `role`.
    pub fn merged(&self, other: &Dataset, role: Role) -> Dataset {
        Dataset {
            role,
            feature_dim: self.feature_dim,
            utterances: self.utterances.iter().chain(&other.utterances).cloned().collect(),
        }
    }
}

/// Transcripts of the unlabeled split, kept apart from the training view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SealedTruth {
    transcripts: BTreeMap<String, String>,
}

impl SealedTruth {
    pub fn new(transcripts: BTreeMap<String, String>) -> Self {
        Self { transcripts }
    }

    pub fn get(&self, id: &str) -> Option<&str> {
        self.transcripts.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.transcripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transcripts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.transcripts.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    /// Attach the sealed transcripts to an unlabeled dataset, producing a
    /// fully labeled copy (used for oracle training).
    pub fn reveal(&self, unlabeled: &Dataset, role: Role) -> Dataset {
        Dataset {
            role,
            feature_dim: unlabeled.feature_dim,
            utterances: unlabeled
                .utterances
                .iter()
                .map(|u| Utterance {
                    transcript: self.get(&u.id).map(str::to_string),
                    ..u.clone()
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub dev: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, role: Role) -> usize {
        match role {
            Role::Labeled => self.labeled,
            Role::Unlabeled => self.unlabeled,
            Role::Dev => self.dev,
            Role::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.labeled + self.unlabeled + self.dev + self.test
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            labeled: 200,
            unlabeled: 2000,
            dev: 100,
            test: 200,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub unlabeled_truth: SealedTruth,
}

impl Corpus {
    pub fn split(&self, role: Role) -> &Dataset {
        match role {
            Role::Labeled => &self.labeled,
            Role::Unlabeled => &self.unlabeled,
            Role::Dev => &self.dev,
            Role::Test => &self.test,
        }
    }
}

/// Fixed world shared by every split: word inventory and symbol prototypes.
#[derive(Clone, Debug)]
pub struct World {
    pub alphabet: Alphabet,
    pub words: Vec<String>,
    pub prototypes: Matrix,
    pub shifted_prototypes: Matrix,
}

impl World {
    pub fn new(cfg: &CorpusConfig) -> Result<Self, DataError> {
        cfg.validate()?;
        let alphabet = cfg.alphabet()?;
        let letters: Vec<char> = cfg.letters.chars().collect();
        let mut rng = substream(cfg.seed, "world");

        let max_distinct: f64 = (cfg.word_len_min..=cfg.word_len_max)
            .map(|l| letters.len() as f64 * (letters.len() as f64 - 1.0).powi(l as i32 - 1))
            .sum();
        if (cfg.inventory as f64) > max_distinct {
            return Err(DataError::Config(format!(
                "cannot draw {} distinct words from the configured lengths",
                cfg.inventory
            )));
        }
        let mut words = Vec::with_capacity(cfg.inventory);
        while words.len() < cfg.inventory {
            let len = rng.random_range(cfg.word_len_min..=cfg.word_len_max);
            let mut w = String::with_capacity(len);
            let mut prev = None;
            for _ in 0..len {
                // No symbol repeats its predecessor inside a word.
                let c = loop {
                    let c = letters[rng.random_range(0..letters.len())];
                    if Some(c) != prev {
                        break c;
                    }
                };
                w.push(c);
                prev = Some(c);
            }
            if !words.contains(&w) {
                words.push(w);
            }
        }

        let f = cfg.feature_dim;
        let n = alphabet.len();
        let scale = cfg.prototype_scale / (f as f64).sqrt();
        let prototypes = Matrix::from_vec(
            n,
            f,
            (0..n * f)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect::<Vec<f64>>(),
        );
        let rotation = random_rotation(f, cfg.shift.rotation, &mut rng);
        let shifted_prototypes = prototypes.matmul_transpose_rhs(&rotation);
        Ok(Self {
            alphabet,
            words,
            prototypes,
            shifted_prototypes,
        })
    }
}

/// Orthonormal basis from Gram-Schmidt on Gaussian vectors, then a rotation
/// by `strength * pi/2` in each consecutive pair of basis directions.
fn random_rotation<R: Rng + ?Sized>(dim: usize, strength: f64, rng: &mut R) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let theta = strength * std::f64::consts::FRAC_PI_2;
    let (s, c) = theta.sin_cos();
    // R = sum over planes of the 2x2 rotation embedded in the basis.
    let mut r = Matrix::zeros(dim, dim);
    let mut add_outer = |a: &[f64], b: &[f64], w: f64| {
        for i in 0..dim {
            for j in 0..dim {
                r[(i, j)] += w * a[i] * b[j];
            }
        }
    };
    let mut k = 0;
    while k + 1 < dim {
        let (u, v) = (&basis[k], &basis[k + 1]);
        add_outer(u, u, c);
        add_outer(v, v, c);
        add_outer(v, u, s);
        add_outer(u, v, -s);
        k += 2;
    }
    if k < dim {
        let u = &basis[k];
        add_outer(u, u, 1.0);
    }
    r
}

fn sample_transcript<R: Rng + ?Sized>(cfg: &CorpusConfig, world: &World, rng: &mut R) -> String {
    let n_words = rng.random_range(cfg.words_min..=cfg.words_max);
    let zipf = Zipf::new(world.words.len() as f64, cfg.zipf_exponent).expect("validated zipf parameters");
    let mut text = String::new();
    for i in 0..n_words {
        if i > 0 {
            text.push(cfg.separator);
        }
        let idx = zipf.sample(rng) as usize - 1;
        text.push_str(&world.words[idx.min(world.words.len() - 1)]);
    }
    text
}

/// Render `text` into frames: each symbol occupies a sampled number of noisy
/// copies of its prototype.
pub fn render<R: Rng + ?Sized>(
    text: &str,
    prototypes: &Matrix,
    alphabet: &Alphabet,
    durations: (usize, usize),
    noise_std: f64,
    rng: &mut R,
) -> Matrix {
    let f = prototypes.cols();
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    let mut data = Vec::new();
    let mut frames = 0;
    for c in text.chars() {
        let sym = alphabet.index_of(c).expect("transcript uses the alphabet");
        let d = rng.random_range(durations.0..=durations.1);
        for _ in 0..d {
            for j in 0..f {
                let n = if noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push(prototypes[(sym, j)] + n);
            }
            frames += 1;
        }
    }
    Matrix::from_vec(frames, f, data)
}

fn generate_utterance(cfg: &CorpusConfig, world: &World, role: Role, index: usize) -> (String, Matrix) {
    let mut rng = substream(derive_seed(cfg.seed, role.name()), &format!("utt{index}"));
    let text = sample_transcript(cfg, world, &mut rng);
    let shifted = cfg.shift.enabled && role.shifted();
    let (protos, noise, dmax) = if shifted {
        (
            &world.shifted_prototypes,
            cfg.noise_std * cfg.shift.noise_multiplier,
            cfg.duration_max + cfg.shift.extra_duration,
        )
    } else {
        (&world.prototypes, cfg.noise_std, cfg.duration_max)
    };
    let feats = render(&text, protos, &world.alphabet, (cfg.duration_min, dmax), noise, &mut rng);
    (text, feats)
}

/// Generate a split of `count` utterances.
pub fn generate_split(cfg: &CorpusConfig, world: &World, role: Role, count: usize) -> (Dataset, SealedTruth) {
    let mut utterances = Vec::with_capacity(count);
    let mut truth = BTreeMap::new();
    for i in 0..count {
        let (text, features) = generate_utterance(cfg, world, role, i);
        let id = format!("{}-{:05}", role.id_prefix(), i);
        let transcript = if role == Role::Unlabeled {
            truth.insert(id.clone(), text);
            None
        } else {
            Some(text)
        };
        utterances.push(Utterance {
            id,
            features,
            transcript,
        });
    }
    (
        Dataset {
            role,
            feature_dim: cfg.feature_dim,
            utterances,
        },
        SealedTruth::new(truth),
    )
}

pub fn generate_corpus(cfg: &CorpusConfig, counts: SplitCounts) -> Result<Corpus, DataError> {
    if Role::ALL.iter().any(|&r| counts.get(r) == 0) {
        return Err(DataError::Config("every split needs at least one utterance".into()));
    }
    let world = World::new(cfg)?;
    let (labeled, _) = generate_split(cfg, &world, Role::Labeled, counts.labeled);
    let (unlabeled, unlabeled_truth) = generate_split(cfg, &world, Role::Unlabeled, counts.unlabeled);
    let (dev, _) = generate_split(cfg, &world, Role::Dev, counts.dev);
    let (test, _) = generate_split(cfg, &world, Role::Test, counts.test);
    Ok(Corpus {
        labeled,
        unlabeled,
        dev,
        test,
        unlabeled_truth,
    })
}
