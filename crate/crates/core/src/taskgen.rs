//! Controlled-difficulty algorithmic tasks and the character-level tokenizer.
//!
//! Every prompt ends with the claim `= True`; the label says whether the claim
//! holds. Difficulty scales the size of the instance:
//!
//! * balanced brackets: `d..=2d+2` pairs over `()[]{}`, nesting depth at most `d`;
//!   negatives are one swap, deletion or replacement away from a balanced string;
//! * length comparison: two strings over `a..=h` with lengths in `3d..=5d`;
//! * contains substring: a haystack of `5d` letters over `a..=f` searched for
//!   `aba` (the pattern grows by one letter every five levels).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Characters with their own token id, in id order.
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789()[]{}<>=' .,:TF";

const ALPHABET_LEN: usize = 52;
pub const TRUE_TOKEN: usize = ALPHABET_LEN;
pub const FALSE_TOKEN: usize = ALPHABET_LEN + 1;
/// Prefix marking a request that must be refused.
pub const MODE_TOKEN: usize = ALPHABET_LEN + 2;
pub const REFUSE_TOKEN: usize = ALPHABET_LEN + 3;
pub const VOCAB_SIZE: usize = ALPHABET_LEN + 4;

const RESERVED: [(usize, &str); 4] = [
    (TRUE_TOKEN, "<true>"),
    (FALSE_TOKEN, "<false>"),
    (MODE_TOKEN, "<mode>"),
    (REFUSE_TOKEN, "<refuse>"),
];

pub fn vocab_size() -> usize {
    VOCAB_SIZE
}

pub fn answer_token(label: bool) -> usize {
    if label {
        TRUE_TOKEN
    } else {
        FALSE_TOKEN
    }
}

pub fn tokenize(prompt: &str) -> Result<Vec<usize>> {
    prompt
        .chars()
        .map(|c| ALPHABET.find(c).ok_or(Error::Encoding(c)))
        .collect()
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let mut out = String::new();
    for &id in ids {
        if id < ALPHABET_LEN {
            out.push(ALPHABET.as_bytes()[id] as char);
        } else if let Some((_, name)) = RESERVED.iter().find(|(t, _)| *t == id) {
            out.push_str(name);
        } else {
            return Err(Error::Index(format!("token id {id} with vocabulary {VOCAB_SIZE}")));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BalancedBrackets,
    LengthComparison,
    ContainsSubstring,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [
        TaskKind::BalancedBrackets,
        TaskKind::LengthComparison,
        TaskKind::ContainsSubstring,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::BalancedBrackets => "balanced_brackets",
            TaskKind::LengthComparison => "length_comparison",
            TaskKind::ContainsSubstring => "contains_substring",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            TaskKind::BalancedBrackets => 1,
            TaskKind::LengthComparison => 2,
            TaskKind::ContainsSubstring => 3,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    /// Prompts are assigned to splits by a stable hash so splits never share a prompt.
    fn owns(self, prompt: &str) -> bool {
        let bucket = fnv1a(prompt.as_bytes()) % 10;
        let owner = match bucket {
            0..=7 => Split::Train,
            8 => Split::Validation,
            _ => Split::Test,
        };
        owner == self
    }

    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 11,
            Split::Validation => 12,
            Split::Test => 13,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task: TaskKind,
    pub prompt: String,
    pub label: bool,
    pub difficulty: u32,
}

impl TaskInstance {
    pub fn tokens(&self) -> Vec<usize> {
        tokenize(&self.prompt).expect("generated prompts use the task alphabet")
    }
}

const OPEN: [char; 3] = ['(', '[', '{'];
const CLOSE: [char; 3] = [')', ']', '}'];
const BRACKETS: [char; 6] = ['(', ')', '[', ']', '{', '}'];

fn check_difficulty(d: u32) {
    assert!(d >= 1, "difficulty must be at least 1");
}

/// Stack matcher used by the generator to validate corruptions.
fn brackets_balanced(s: &str) -> bool {
    let mut stack = Vec::new();
    for c in s.chars() {
        if let Some(i) = OPEN.iter().position(|&o| o == c) {
            stack.push(i);
        } else if let Some(i) = CLOSE.iter().position(|&o| o == c) {
            if stack.pop() != Some(i) {
                return false;
            }
        }
    }
    stack.is_empty()
}

fn random_balanced(pairs: usize, max_depth: usize, rng: &mut impl Rng) -> String {
    let mut out = String::with_capacity(2 * pairs);
    let mut stack: Vec<usize> = Vec::new();
    let mut opens_left = pairs;
    while opens_left > 0 || !stack.is_empty() {
        let can_open = opens_left > 0 && stack.len() < max_depth;
        let can_close = !stack.is_empty();
        if can_open && (!can_close || rng.gen_bool(0.5)) {
            let t = rng.gen_range(0..3);
            stack.push(t);
            out.push(OPEN[t]);
            opens_left -= 1;
        } else {
            let t = stack.pop().expect("can_close");
            out.push(CLOSE[t]);
        }
    }
    out
}

fn corrupt(s: &str, rng: &mut impl Rng) -> String {
    loop {
        let mut chars: Vec<char> = s.chars().collect();
        match rng.gen_range(0..3) {
            0 => {
                if chars.len() < 2 {
                    continue;
                }
                let i = rng.gen_range(0..chars.len());
                let j = rng.gen_range(0..chars.len());
                chars.swap(i, j);
            }
            1 => {
                let i = rng.gen_range(0..chars.len());
                chars.remove(i);
            }
            _ => {
                let i = rng.gen_range(0..chars.len());
                let choices: Vec<char> = BRACKETS.iter().copied().filter(|&c| c != chars[i]).collect();
                chars[i] = *choices.choose(rng).expect("five alternatives");
            }
        }
        let out: String = chars.into_iter().collect();
        if !out.is_empty() && !brackets_balanced(&out) {
            return out;
        }
    }
}

fn brackets_with_label(difficulty: u32, label: bool, rng: &mut impl Rng) -> TaskInstance {
    check_difficulty(difficulty);
    let d = difficulty as usize;
    let pairs = rng.gen_range(d..=2 * d + 2);
    let balanced = random_balanced(pairs, d, rng);
    let s = if label { balanced } else { corrupt(&balanced, rng) };
    TaskInstance {
        task: TaskKind::BalancedBrackets,
        prompt: format!("{s} = True"),
        label,
        difficulty,
    }
}

fn random_word(len: usize, letters: &[u8], rng: &mut impl Rng) -> String {
    (0..len)
        .map(|_| *letters.choose(rng).expect("non-empty alphabet") as char)
        .collect()
}

const LENGTH_LETTERS: &[u8] = b"abcdefgh";
const HAYSTACK_LETTERS: &[u8] = b"abcdef";

fn length_with_label(difficulty: u32, label: bool, rng: &mut impl Rng) -> TaskInstance {
    check_difficulty(difficulty);
    let d = difficulty as usize;
    let (l1, l2) = loop {
        let l1 = rng.gen_range(3 * d..=5 * d);
        let l2 = rng.gen_range(3 * d..=5 * d);
        if (l1 > l2) == label {
            break (l1, l2);
        }
    };
    let s1 = random_word(l1, LENGTH_LETTERS, rng);
    let s2 = random_word(l2, LENGTH_LETTERS, rng);
    TaskInstance {
        task: TaskKind::LengthComparison,
        prompt: format!("len({s1}) > len({s2}) = True"),
        label,
        difficulty,
    }
}

/// Search pattern for a difficulty: `aba` up to level 5, one letter longer every five levels.
pub fn substring_pattern(difficulty: u32) -> String {
    let len = 3 + (difficulty.max(1) as usize - 1) / 5;
    (0..len).map(|i| if i % 2 == 0 { 'a' } else { 'b' }).collect()
}

fn contains_with_label(difficulty: u32, label: bool, rng: &mut impl Rng) -> TaskInstance {
    check_difficulty(difficulty);
    let pattern = substring_pattern(difficulty);
    let len = (5 * difficulty as usize).max(pattern.len());
    let hay = loop {
        let mut hay = random_word(len, HAYSTACK_LETTERS, rng);
        if label {
            let at = rng.gen_range(0..=len - pattern.len());
            hay.replace_range(at..at + pattern.len(), &pattern);
            break hay;
        }
        if !hay.contains(&pattern) {
            break hay;
        }
    };
    TaskInstance {
        task: TaskKind::ContainsSubstring,
        prompt: format!("{hay} contains '{pattern}' = True"),
        label,
        difficulty,
    }
}

pub fn gen_balanced_brackets(difficulty: u32, rng: &mut impl Rng) -> TaskInstance {
    let label = rng.gen_bool(0.5);
    brackets_with_label(difficulty, label, rng)
}

pub fn gen_length_comparison(difficulty: u32, rng: &mut impl Rng) -> TaskInstance {
    let label = rng.gen_bool(0.5);
    length_with_label(difficulty, label, rng)
}

pub fn gen_contains_substring(difficulty: u32, rng: &mut impl Rng) -> TaskInstance {
    let label = rng.gen_bool(0.5);
    contains_with_label(difficulty, label, rng)
}

pub fn generate_with_label(
    task: TaskKind,
    difficulty: u32,
    label: bool,
    rng: &mut impl Rng,
) -> TaskInstance {
    match task {
        TaskKind::BalancedBrackets => brackets_with_label(difficulty, label, rng),
        TaskKind::LengthComparison => length_with_label(difficulty, label, rng),
        TaskKind::ContainsSubstring => contains_with_label(difficulty, label, rng),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub split: Split,
    pub seed: u64,
    pub instances: Vec<TaskInstance>,
}

/// One exported JSON-lines record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub task: TaskKind,
    pub difficulty: u32,
    pub prompt: String,
    pub label: bool,
    pub split: Split,
}

/// `n_per_level` instances per difficulty, exactly half of them positive.
///
/// Deterministic in `seed`; each `(task, split)` pair draws from its own stream
/// and prompts are hash-partitioned across splits.
pub fn make_dataset(
    task: TaskKind,
    levels: &[u32],
    n_per_level: usize,
    seed: u64,
    split: Split,
) -> Result<Dataset> {
    if levels.is_empty() {
        return Err(Error::Argument("no difficulty levels requested".into()));
    }
    if let Some(bad) = levels.iter().find(|&&d| d == 0) {
        return Err(Error::Argument(format!("difficulty {bad} must be at least 1")));
    }
    let stream = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(task.stream_id() << 8 | split.stream_id());
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut instances = Vec::with_capacity(levels.len() * n_per_level);
    for &d in levels {
        for i in 0..n_per_level {
            let label = i % 2 == 0;
            let inst = loop {
                let inst = generate_with_label(task, d, label, &mut rng);
                if split.owns(&inst.prompt) {
                    break inst;
                }
            };
            instances.push(inst);
        }
    }
    Ok(Dataset {
        split,
        seed,
        instances,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Concatenates datasets of the same split (e.g. several tasks).
    pub fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
        let mut it = parts.into_iter();
        let mut first = it
            .next()
            .ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        for part in it {
            if part.split != first.split {
                return Err(Error::Argument("cannot mix splits".into()));
            }
            first.instances.extend(part.instances);
        }
        Ok(first)
    }

    pub fn filter_task(&self, task: TaskKind) -> Dataset {
        Dataset {
            split: self.split,
            seed: self.seed,
            instances: self
                .instances
                .iter()
                .filter(|i| i.task == task)
                .cloned()
                .collect(),
        }
    }

    pub fn tasks(&self) -> Vec<TaskKind> {
        let mut t: Vec<TaskKind> = self.instances.iter().map(|i| i.task).collect();
        t.sort();
        t.dedup();
        t
    }

    pub fn difficulties(&self) -> Vec<u32> {
        let mut d: Vec<u32> = self.instances.iter().map(|i| i.difficulty).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn max_tokens(&self) -> usize {
        self.instances.iter().map(|i| i.prompt.chars().count()).max().unwrap_or(0)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for inst in &self.instances {
            let rec = InstanceRecord {
                task: inst.task,
                difficulty: inst.difficulty,
                prompt: inst.prompt.clone(),
                label: inst.label,
                split: self.split,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, seed: u64) -> Result<Dataset> {
        let mut split = None;
        let mut instances = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: InstanceRecord = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
            if *split.get_or_insert(rec.split) != rec.split {
                return Err(Error::Format(format!("line {}: mixed splits", n + 1)));
            }
            tokenize(&rec.prompt)?;
            instances.push(TaskInstance {
                task: rec.task,
                prompt: rec.prompt,
                label: rec.label,
                difficulty: rec.difficulty,
            });
        }
        Ok(Dataset {
            split: split.ok_or_else(|| Error::Format("empty dataset file".into()))?,
            seed,
            instances,
        })
    }
}
