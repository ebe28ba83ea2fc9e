//! Multiple-choice QA data: prompt template, character tokenizer, reduction
//! of the vocabulary distribution to answer classes, JSONL ingestion and the
//! synthetic key-value world used at desk scale.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed_str, rng};

pub const MAX_CHOICES: usize = 5;
pub const CHOICE_LETTERS: [char; MAX_CHOICES] = ['a', 'b', 'c', 'd', 'e'];

/// Answer classes after reduction: one per choice letter plus "anything else".
pub const NUM_CLASSES: usize = MAX_CHOICES + 1;
pub const OTHER_CLASS: usize = MAX_CHOICES;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqSample {
    pub question: String,
    pub choices: Vec<String>,
    pub answer: usize,
    pub domain: String,
    /// Generator ground truth: the label was drawn between `answer` and
    /// `alternative`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ambiguous: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternative: Option<usize>,
}

impl McqSample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.choices.is_empty() {
            return Err("sample has no choices".into());
        }
        if self.choices.len() > MAX_CHOICES {
            return Err(format!(
                "{} choices exceed the maximum of {MAX_CHOICES}",
                self.choices.len()
            ));
        }
        if self.answer >= self.choices.len() {
            return Err(format!(
                "answer index {} out of range for {} choices",
                self.answer,
                self.choices.len()
            ));
        }
        Ok(())
    }
}

/// Renders the question/answer template:
///
/// ```text
/// Q: {question}
///
/// Answer Choices:
///
/// (a) {choice}
///
/// ...
///
/// A: (a).
/// ```
///
/// Without the answer the text stops right after `A: (`, so the next token is
/// the answer letter.
pub fn format_prompt(sample: &McqSample, include_answer: bool) -> Result<String> {
    if sample.choices.len() > MAX_CHOICES {
        return Err(Error::Format(format!(
            "{} choices exceed the maximum of {MAX_CHOICES}",
            sample.choices.len()
        )));
    }
    let mut out = format!("Q: {}\n\nAnswer Choices:\n\n", sample.question);
    for (letter, choice) in CHOICE_LETTERS.iter().zip(&sample.choices) {
        out.push_str(&format!("({letter}) {choice}\n\n"));
    }
    out.push_str("A: (");
    if include_answer {
        let letter = CHOICE_LETTERS.get(sample.answer).ok_or_else(|| {
            Error::Format(format!("answer index {} has no letter", sample.answer))
        })?;
        out.push(*letter);
        out.push_str(").");
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPrompt {
    pub question: String,
    pub choices: Vec<String>,
    pub answer: Option<usize>,
}

/// Inverse of [`format_prompt`].
pub fn parse_prompt(text: &str) -> Result<ParsedPrompt> {
    let bad = |m: &str| Error::Format(m.to_string());
    let rest = text.strip_prefix("Q: ").ok_or_else(|| bad("missing 'Q: ' prefix"))?;
    let (question, rest) = rest
        .split_once("\n\nAnswer Choices:\n\n")
        .ok_or_else(|| bad("missing answer-choices header"))?;
    let split = rest.rfind("A: (").ok_or_else(|| bad("missing 'A: (' marker"))?;
    let (body, tail) = rest.split_at(split);
    let mut choices = Vec::new();
    for (i, block) in body.split_terminator("\n\n").enumerate() {
        let letter = CHOICE_LETTERS.get(i).ok_or_else(|| bad("too many choices"))?;
        let prefix = format!("({letter}) ");
        let choice = block
            .strip_prefix(&prefix)
            .ok_or_else(|| bad("choice letter out of sequence"))?;
        choices.push(choice.to_string());
    }
    let tail = &tail["A: (".len()..];
    let answer = if tail.is_empty() {
        None
    } else {
        let mut chars = tail.chars();
        let letter = chars.next().ok_or_else(|| bad("missing answer letter"))?;
        if chars.as_str() != ")." {
            return Err(bad("answer must end with ')'"));
        }
        Some(
            CHOICE_LETTERS
                .iter()
                .position(|&c| c == letter)
                .ok_or_else(|| bad("unknown answer letter"))?,
        )
    };
    Ok(ParsedPrompt {
        question: question.to_string(),
        choices,
        answer,
    })
}

/// Character-level tokenizer over a fixed 64-symbol vocabulary. Index 0 is
/// padding.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

pub const PAD: usize = 0;

const PUNCTUATION: &str = "\n !'(),-.:?";
const UPPERCASE: &str = "ABCDEFGHILMNPQST";

impl Default for Tokenizer {
    fn default() -> Self {
        // 1 pad + 11 punctuation + 10 digits + 26 lowercase + 16 uppercase = 64.
        let mut chars = vec!['\0'];
        chars.extend(PUNCTUATION.chars());
        chars.extend('0'..='9');
        chars.extend('a'..='z');
        chars.extend(UPPERCASE.chars());
        let index = chars.iter().enumerate().skip(1).map(|(i, &c)| (c, i)).collect();
        Self { chars, index }
    }
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.chars.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    /// Encodes arbitrary text: out-of-vocabulary capitals are lowercased and
    /// anything else unknown becomes a space.
    pub fn encode_lossy(&self, text: &str) -> Vec<usize> {
        let space = self.index[&' '];
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .or_else(|| c.to_lowercase().next().and_then(|l| self.index.get(&l)))
                    .copied()
                    .unwrap_or(space)
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| match self.chars.get(t) {
                Some(&c) if t != PAD => Ok(c),
                _ => Err(Error::Input(format!("token {t} has no character"))),
            })
            .collect()
    }

    pub fn token(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    /// Token ids of the answer letters `a`..`e`, in class order.
    pub fn choice_tokens(&self) -> [usize; MAX_CHOICES] {
        CHOICE_LETTERS.map(|c| self.index[&c])
    }
}

/// Maps a vocabulary distribution onto [`NUM_CLASSES`] answer classes.
#[derive(Debug, Clone)]
pub struct ClassReduction {
    class_of: Vec<usize>,
}

impl ClassReduction {
    pub fn new(vocab_size: usize, choice_tokens: &[usize; MAX_CHOICES]) -> Result<Self> {
        let mut class_of = vec![OTHER_CLASS; vocab_size];
        for (class, &tok) in choice_tokens.iter().enumerate() {
            if tok >= vocab_size || class_of[tok] != OTHER_CLASS {
                return Err(Error::Config(format!("bad choice token {tok}")));
            }
            class_of[tok] = class;
        }
        Ok(Self { class_of })
    }

    pub fn for_tokenizer(tok: &Tokenizer) -> Self {
        Self::new(tok.vocab_size(), &tok.choice_tokens()).expect("tokenizer choice tokens are distinct")
    }

    pub fn vocab_size(&self) -> usize {
        self.class_of.len()
    }

    pub fn class_of(&self, token: usize) -> usize {
        self.class_of[token]
    }

    /// Choice entries are copied; the aggregate class is the sum of every
    /// other token, accumulated in index order.
    pub fn reduce(&self, full_probs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; NUM_CLASSES];
        for (&p, &class) in full_probs.iter().zip(&self.class_of) {
            if class == OTHER_CLASS {
                out[OTHER_CLASS] += p;
            } else {
                out[class] = p;
            }
        }
        out
    }
}

pub fn reduce_probs(full_probs: &[f64], reduction: &ClassReduction) -> Vec<f64> {
    reduction.reduce(full_probs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Generated,
    File,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub train: usize,
    pub validation: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood: Option<usize>,
    pub num_classes: usize,
    pub source: DataSource,
}

/// One JSONL line: `{"question", "choices", "answer", "domain"}`.
pub fn load_jsonl(path: &Path) -> Result<Vec<McqSample>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: McqSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        sample.validate().map_err(|message| Error::Validation {
            path: path.to_path_buf(),
            line: line_no,
            message,
        })?;
        samples.push(sample);
    }
    Ok(samples)
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub train: Vec<McqSample>,
    pub validation: Vec<McqSample>,
    pub manifest: DatasetManifest,
}

pub fn load_jsonl_dataset(name: &str, train: &Path, validation: &Path) -> Result<LoadedDataset> {
    let train = load_jsonl(train)?;
    let validation = load_jsonl(validation)?;
    let manifest = DatasetManifest {
        name: name.to_string(),
        train: train.len(),
        validation: validation.len(),
        ood: None,
        num_classes: NUM_CLASSES,
        source: DataSource::File,
    };
    Ok(LoadedDataset {
        train,
        validation,
        manifest,
    })
}

/// Attribute types of the synthetic world with their five values, in the
/// order they are listed as choices.
pub const ATTRIBUTES: [(&str, [&str; MAX_CHOICES]); 8] = [
    ("hue", ["red", "tan", "blue", "gold", "gray"]),
    ("size", ["tiny", "small", "mid", "big", "huge"]),
    ("mood", ["calm", "glad", "sad", "mad", "shy"]),
    ("food", ["rice", "fish", "meat", "corn", "kale"]),
    ("home", ["cave", "hut", "tent", "barn", "fort"]),
    ("pet", ["cat", "dog", "owl", "frog", "fox"]),
    ("tool", ["axe", "saw", "rope", "net", "hoe"]),
    ("job", ["cook", "monk", "poet", "smith", "guard"]),
];

/// First letter of an entity name; it alone decides the entity's attributes.
/// Capitals that never occur in the prompt template, so the group is visible
/// from the character alone.
pub const GROUP_LETTERS: &str = "BDFGHLMNPST";
const VOWELS: &str = "aeiou";
const CODAS: &str = "lmnrstxz";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub name: String,
    pub train_size: usize,
    pub validation_size: usize,
    pub ood_size: usize,
    /// Number of entity groups (distinct first letters).
    pub num_groups: usize,
    /// Attribute types asked about in train and validation.
    pub in_domain_attributes: usize,
    /// Attribute types held out for the out-of-domain split.
    pub ood_attributes: usize,
    /// Fraction of in-domain (attribute, group) cells whose label is a coin
    /// flip between two designated choices.
    pub ambiguity: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            train_size: 2000,
            validation_size: 500,
            ood_size: 500,
            num_groups: 8,
            in_domain_attributes: 4,
            ood_attributes: 2,
            ambiguity: 0.3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_size == 0 || self.validation_size == 0 || self.ood_size == 0 {
            return Err(Error::Config("synthetic split sizes must be at least 1".into()));
        }
        if self.num_groups == 0 || self.num_groups > GROUP_LETTERS.len() {
            return Err(Error::Config(format!(
                "num_groups must be in 1..={}",
                GROUP_LETTERS.len()
            )));
        }
        if self.in_domain_attributes == 0
            || self.ood_attributes == 0
            || self.in_domain_attributes + self.ood_attributes > ATTRIBUTES.len()
        {
            return Err(Error::Config(format!(
                "need at least one in-domain and one held-out attribute, at most {} total",
                ATTRIBUTES.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::Config("ambiguity must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn ood_name(&self) -> String {
        format!("{}-ood", self.name)
    }
}

/// Ground-truth table of the synthetic world.
#[derive(Debug, Clone)]
pub struct World {
    /// `primary[attribute][group]`
    primary: Vec<Vec<usize>>,
    alternative: Vec<Vec<usize>>,
    ambiguous: Vec<Vec<bool>>,
}

impl World {
    pub fn new(spec: &SyntheticSpec, seed: u64) -> Self {
        let mut r = rng(derive_seed_str(seed, "world"));
        let groups = spec.num_groups;
        let mut primary = Vec::new();
        let mut alternative = Vec::new();
        for _ in 0..ATTRIBUTES.len() {
            let p: Vec<usize> = (0..groups).map(|_| r.random_range(0..MAX_CHOICES)).collect();
            let a = p
                .iter()
                .map(|&pi| (pi + r.random_range(1..MAX_CHOICES)) % MAX_CHOICES)
                .collect();
            primary.push(p);
            alternative.push(a);
        }
        let mut cells: Vec<(usize, usize)> = (0..spec.in_domain_attributes)
            .flat_map(|a| (0..groups).map(move |g| (a, g)))
            .collect();
        cells.shuffle(&mut r);
        let n_ambiguous = (spec.ambiguity * cells.len() as f64).round() as usize;
        let mut ambiguous = vec![vec![false; groups]; ATTRIBUTES.len()];
        for &(a, g) in &cells[..n_ambiguous] {
            ambiguous[a][g] = true;
        }
        Self {
            primary,
            alternative,
            ambiguous,
        }
    }

    pub fn is_ambiguous(&self, attribute: usize, group: usize) -> bool {
        self.ambiguous[attribute][group]
    }

    pub fn primary(&self, attribute: usize, group: usize) -> usize {
        self.primary[attribute][group]
    }

    pub fn alternative(&self, attribute: usize, group: usize) -> usize {
        self.alternative[attribute][group]
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Vec<McqSample>,
    pub validation: Vec<McqSample>,
    pub ood: Vec<McqSample>,
    pub manifest: DatasetManifest,
}

fn random_entity<R: Rng>(r: &mut R, group: usize) -> String {
    let g = GROUP_LETTERS.as_bytes()[group] as char;
    let v = VOWELS.as_bytes()[r.random_range(0..VOWELS.len())] as char;
    let c = CODAS.as_bytes()[r.random_range(0..CODAS.len())] as char;
    format!("{g}{v}{c}")
}

fn question_for(attribute: usize, entity: &str) -> (String, Vec<String>) {
    let (name, values) = ATTRIBUTES[attribute];
    (
        format!("{name} of {entity}?"),
        values.iter().map(|v| v.to_string()).collect(),
    )
}

fn sample_split<R: Rng>(
    r: &mut R,
    world: &World,
    spec: &SyntheticSpec,
    attributes: std::ops::Range<usize>,
    n: usize,
    domain: &str,
    allow_ambiguity: bool,
) -> Vec<McqSample> {
    (0..n)
        .map(|_| {
            let attribute = r.random_range(attributes.clone());
            let group = r.random_range(0..spec.num_groups);
            let entity = random_entity(r, group);
            let (question, choices) = question_for(attribute, &entity);
            let primary = world.primary[attribute][group];
            let alt = world.alternative[attribute][group];
            let ambiguous = allow_ambiguity && world.ambiguous[attribute][group];
            let (answer, alternative) = if ambiguous {
                if r.random_bool(0.5) {
                    (primary, Some(alt))
                } else {
                    (alt, Some(primary))
                }
            } else {
                (primary, None)
            };
            McqSample {
                question,
                choices,
                answer,
                domain: domain.to_string(),
                ambiguous,
                alternative,
            }
        })
        .collect()
}

/// Train / validation / out-of-domain splits of the synthetic world.
///
/// In-domain questions ask about the first `in_domain_attributes` attribute
/// types; the out-of-domain split asks only about the held-out types, so its
/// (attribute, group) keys never occur in training.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticData> {
    spec.validate()?;
    let world = World::new(spec, seed);
    let in_domain = 0..spec.in_domain_attributes;
    let held_out =
        spec.in_domain_attributes..spec.in_domain_attributes + spec.ood_attributes;
    let ood_name = spec.ood_name();
    let mut r = rng(derive_seed_str(seed, "train"));
    let train = sample_split(&mut r, &world, spec, in_domain.clone(), spec.train_size, &spec.name, true);
    let mut r = rng(derive_seed_str(seed, "validation"));
    let validation = sample_split(
        &mut r,
        &world,
        spec,
        in_domain,
        spec.validation_size,
        &spec.name,
        true,
    );
    let mut r = rng(derive_seed_str(seed, "ood"));
    let ood = sample_split(&mut r, &world, spec, held_out, spec.ood_size, &ood_name, false);
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        train: train.len(),
        validation: validation.len(),
        ood: Some(ood.len()),
        num_classes: NUM_CLASSES,
        source: DataSource::Generated,
    };
    Ok(SyntheticData {
        train,
        validation,
        ood,
        manifest,
    })
}

/// Pre-training corpus over the in-domain attribute types of the world built
/// from `seed` (the same seed as [`generate_synthetic`]).
///
/// Each answer follows the world with probability `knowledge` (a fair coin
/// between the two answers on ambiguous cells) and is uniform otherwise.
/// Held-out attribute types never appear, so the base model has no prior on
/// them at all.
pub fn pretraining_corpus(
    spec: &SyntheticSpec,
    n: usize,
    seed: u64,
    knowledge: f64,
) -> Result<Vec<McqSample>> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&knowledge) {
        return Err(Error::Config(format!("knowledge {knowledge} outside [0, 1]")));
    }
    let world = World::new(spec, seed);
    let mut r = rng(derive_seed_str(seed, "pretrain"));
    Ok((0..n)
        .map(|_| {
            let attribute = r.random_range(0..spec.in_domain_attributes);
            let group = r.random_range(0..spec.num_groups);
            let entity = random_entity(&mut r, group);
            let (question, choices) = question_for(attribute, &entity);
            let answer = if !r.random_bool(knowledge) {
                r.random_range(0..MAX_CHOICES)
            } else if world.ambiguous[attribute][group] && r.random_bool(0.5) {
                world.alternative[attribute][group]
            } else {
                world.primary[attribute][group]
            };
            McqSample {
                question,
                choices,
                answer,
                domain: "pretrain".into(),
                ambiguous: false,
                alternative: None,
            }
        })
        .collect())
}

/// `(attribute name, entity group letter)` of a synthetic question.
pub fn synthetic_feature_key(sample: &McqSample) -> Option<(String, char)> {
    let (attribute, rest) = sample.question.split_once(" of ")?;
    Some((attribute.to_string(), rest.chars().next()?))
}
