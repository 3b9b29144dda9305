//! Deterministic synthetic parallel corpora.
//!
//! Four tasks, each a fixed function of the source sentence so that an
//! exact oracle translator always exists:
//!
//! * `copy`: target = source
//! * `reverse`: target = reversed source
//! * `cipher_swap`: substitution cipher, then swap positions `(3i, 3i+1)`
//! * `cipher_expand`: `cipher_swap`, then every token of a 10% "expanding"
//!   subclass becomes two target tokens
//!
//! Every sequence ends with `</s>`. On disk a split is one pair per line,
//! source and target separated by a tab, tokens separated by spaces.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, write_atomic, Error, Result};
use crate::rng::SplitMix64;
use crate::vocab::{Vocab, EOS_TOKEN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    CipherSwap,
    CipherExpand,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::CipherSwap => "cipher_swap",
            Task::CipherExpand => "cipher_expand",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub task: Task,
    /// Number of content tokens in the source alphabet.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
    /// Longest allowed target including `</s>`; sources whose translation
    /// would exceed it are redrawn. Must not exceed the model's `max_len`.
    pub max_target_len: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            task: Task::CipherExpand,
            vocab_size: 64,
            min_len: 5,
            max_len: 16,
            train_size: 20_000,
            dev_size: 500,
            test_size: 500,
            seed: 1,
            max_target_len: 32,
        }
    }
}

impl TaskSpec {
    pub const EXPAND_FRACTION: f64 = 0.1;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 {
            return bad("task.vocab_size must be positive".into());
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!(
                "task length range [{}, {}] is empty or starts at 0",
                self.min_len, self.max_len
            ));
        }
        if self.max_len + 1 > self.max_target_len {
            return bad(format!(
                "task.max_len {} leaves no room for </s> within max_target_len {}",
                self.max_len, self.max_target_len
            ));
        }
        if self.train_size == 0 {
            return bad("task.train_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

fn content_token(i: usize) -> String {
    format!("w{i:02}")
}

/// The exact source → target map of a task.
#[derive(Clone, Debug)]
pub struct Translator {
    task: Task,
    cipher: Vec<usize>,
    expanding: HashSet<usize>,
}

impl Translator {
    pub fn new(spec: &TaskSpec) -> Self {
        let mut rng = SplitMix64::stream(spec.seed, &[1]);
        let mut cipher: Vec<usize> = (0..spec.vocab_size).collect();
        rng.shuffle(&mut cipher);
        let n_expand = (spec.vocab_size as f64 * TaskSpec::EXPAND_FRACTION).round() as usize;
        let expanding = rng.subset(spec.vocab_size, n_expand).into_iter().collect();
        Self::with_tables(spec.task, cipher, expanding)
    }

    /// Translator with an explicit cipher (`cipher[i]` is the image of
    /// content token `i`) and expanding subclass.
    pub fn with_tables(task: Task, cipher: Vec<usize>, expanding: HashSet<usize>) -> Self {
        Self {
            task,
            cipher,
            expanding,
        }
    }

    pub fn expanding(&self) -> &HashSet<usize> {
        &self.expanding
    }

    /// Translates content token indices (no `</s>`) to target tokens, with
    /// `</s>` appended.
    pub fn translate_indices(&self, src: &[usize]) -> Vec<String> {
        let mut out: Vec<String> = match self.task {
            Task::Copy => src.iter().map(|&i| content_token(i)).collect(),
            Task::Reverse => src.iter().rev().map(|&i| content_token(i)).collect(),
            Task::CipherSwap | Task::CipherExpand => {
                let mut enc: Vec<usize> = src.to_vec();
                let mut i = 0;
                while i + 1 < enc.len() {
                    enc.swap(i, i + 1);
                    i += 3;
                }
                let mut out = Vec::with_capacity(enc.len() + 2);
                for &s in &enc {
                    let name = content_token(self.cipher[s]);
                    if self.task == Task::CipherExpand && self.expanding.contains(&s) {
                        out.push(format!("{name}_1"));
                        out.push(format!("{name}_2"));
                    } else {
                        out.push(name);
                    }
                }
                out
            }
        };
        out.push(EOS_TOKEN.to_string());
        out
    }

    /// Target length including `</s>`.
    pub fn target_len(&self, src: &[usize]) -> usize {
        let extra = if self.task == Task::CipherExpand {
            src.iter().filter(|s| self.expanding.contains(s)).count()
        } else {
            0
        };
        src.len() + extra + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub spec: TaskSpec,
    pub train: Vec<SentencePair>,
    pub dev: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[SentencePair] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = &SentencePair> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

/// Generates the train/dev/test splits; sources are distinct across the
/// whole corpus, so the splits are disjoint.
pub fn generate(spec: &TaskSpec) -> Result<Corpus> {
    spec.validate()?;
    let translator = Translator::new(spec);
    let mut rng = SplitMix64::stream(spec.seed, &[2]);
    let total = spec.train_size + spec.dev_size + spec.test_size;
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(total);
    let mut pairs = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while pairs.len() < total {
        attempts += 1;
        if attempts > 50 * total + 1000 {
            return Err(Error::Config(format!(
                "cannot draw {total} distinct sources from the task's sentence space"
            )));
        }
        let len = rng.range_inclusive(spec.min_len, spec.max_len);
        let src: Vec<usize> = (0..len).map(|_| rng.below(spec.vocab_size)).collect();
        if translator.target_len(&src) > spec.max_target_len || seen.contains(&src) {
            continue;
        }
        let mut source: Vec<String> = src.iter().map(|&i| content_token(i)).collect();
        source.push(EOS_TOKEN.to_string());
        let target = translator.translate_indices(&src);
        seen.insert(src);
        pairs.push(SentencePair { source, target });
    }
    let test = pairs.split_off(spec.train_size + spec.dev_size);
    let dev = pairs.split_off(spec.train_size);
    Ok(Corpus {
        spec: spec.clone(),
        train: pairs,
        dev,
        test,
    })
}

/// Every token appearing in the corpus, reserved ids first.
pub fn build_vocab(corpus: &Corpus) -> Vocab {
    let mut tokens: Vec<&str> = Vec::new();
    for p in corpus.pairs() {
        tokens.extend(p.source.iter().map(String::as_str));
        tokens.extend(p.target.iter().map(String::as_str));
    }
    Vocab::new(tokens)
}

pub fn format_split(pairs: &[SentencePair]) -> String {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&p.source.join(" "));
        s.push('\t');
        s.push_str(&p.target.join(" "));
        s.push('\n');
    }
    s
}

pub fn parse_split(text: &str) -> Result<Vec<SentencePair>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (src, tgt) = line.split_once('\t').ok_or_else(|| Error::Format {
                what: "corpus",
                msg: format!("line {}: expected source<TAB>target", i + 1),
            })?;
            Ok(SentencePair {
                source: src.split_whitespace().map(str::to_string).collect(),
                target: tgt.split_whitespace().map(str::to_string).collect(),
            })
        })
        .collect()
}

/// Writes `train.tsv`, `dev.tsv`, `test.tsv`, `vocab.txt` and the spec
/// sidecar `spec.toml` into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<Vocab> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, split) in [
        ("train.tsv", &corpus.train),
        ("dev.tsv", &corpus.dev),
        ("test.tsv", &corpus.test),
    ] {
        write_atomic(&dir.join(name), format_split(split).as_bytes())?;
    }
    let vocab = build_vocab(corpus);
    vocab.save(&dir.join("vocab.txt"))?;
    let meta = toml::to_string(&corpus.spec).map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(&dir.join("spec.toml"), meta.as_bytes())?;
    Ok(vocab)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(io_err(p))
    };
    let spec: TaskSpec =
        toml::from_str(&read("spec.toml")?).map_err(|e| Error::Config(e.to_string()))?;
    Ok(Corpus {
        spec,
        train: parse_split(&read("train.tsv")?)?,
        dev: parse_split(&read("dev.tsv")?)?,
        test: parse_split(&read("test.tsv")?)?,
    })
}

/// Source and target as ids, both ending in `</s>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

pub fn encode_pairs(vocab: &Vocab, pairs: &[SentencePair]) -> Vec<EncodedPair> {
    pairs
        .iter()
        .map(|p| EncodedPair {
            source: vocab.encode(&p.source),
            target: vocab.encode(&p.target),
        })
        .collect()
}
