//! Synthetic grid-and-text tasks, their vocabulary, and the dataset line format.
//!
//! A line is `task grid... | text... | target...` with space-separated integer
//! token ids; task 0 is entailment and 1 is captioning.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, EOS};
use crate::numerics::SeededRng;

pub const YES: usize = 3;
pub const NO: usize = 4;
pub const EMPTY: usize = 5;
pub const FIRST_OBJECT: usize = 6;
pub const OBJECT_COUNT: usize = 8;
pub const THERE: usize = 14;
pub const ARE: usize = 15;
pub const OVER: usize = 16;
/// Number words `one`..`four` are `FIRST_NUMBER..FIRST_NUMBER + MAX_OBJECTS`.
pub const FIRST_NUMBER: usize = 17;
pub const MAX_OBJECTS: usize = 4;
pub const SHAPES: usize = 21;
pub const DESCRIBE: usize = 22;
pub const THE: usize = 23;
pub const IMAGE: usize = 24;
pub const LIST: usize = 25;
pub const OBJECTS: usize = 26;
pub const IN: usize = 27;
pub const PICTURE: usize = 28;
pub const ROWS: usize = 29;

/// Smallest vocabulary that covers every generated token.
pub const MIN_VOCAB: usize = 30;

const WORDS: [&str; MIN_VOCAB] = [
    "<bos>", "<eos>", "<pad>", "yes", "no", "empty", "circle", "square", "triangle", "star", "heart", "diamond",
    "cross", "moon", "there", "are", "over", "one", "two", "three", "four", "shapes", "describe", "the", "image",
    "list", "objects", "in", "picture", "rows",
];

const CAPTION_PROMPTS: [&[usize]; 3] = [
    &[DESCRIBE, THE, IMAGE],
    &[LIST, THE, OBJECTS],
    &[LIST, OBJECTS, IN, THE, PICTURE],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Entail,
    Caption,
}

impl Task {
    pub fn tag(self) -> usize {
        match self {
            Task::Entail => 0,
            Task::Caption => 1,
        }
    }

    pub fn from_tag(tag: usize) -> Option<Self> {
        match tag {
            0 => Some(Task::Entail),
            1 => Some(Task::Caption),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "entail" => Some(Task::Entail),
            "caption" => Some(Task::Caption),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Entail => "entail",
            Task::Caption => "caption",
        }
    }

    pub fn is_classification(self) -> bool {
        self == Task::Entail
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticExample {
    pub task: Task,
    pub grid: Vec<usize>,
    pub text: Vec<usize>,
    /// Entailment: a single label token. Captioning: words followed by EOS.
    pub target: Vec<usize>,
}

impl SyntheticExample {
    /// Gold decoder outputs, always terminated by EOS.
    pub fn decoder_targets(&self) -> Vec<usize> {
        let mut t = self.target.clone();
        if t.last() != Some(&EOS) {
            t.push(EOS);
        }
        t
    }

    /// Teacher-forced decoder inputs: BOS followed by all but the last target.
    pub fn decoder_inputs(&self) -> Vec<usize> {
        let targets = self.decoder_targets();
        let mut input = Vec::with_capacity(targets.len());
        input.push(crate::model::BOS);
        input.extend_from_slice(&targets[..targets.len() - 1]);
        input
    }

    /// Reference tokens the generated output is scored against (without EOS).
    pub fn reference(&self) -> &[usize] {
        match self.target.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.target,
        }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(msg));
        if self.grid.len() != cfg.image_tokens() {
            return fail(format!("grid has {} cells, model expects {}", self.grid.len(), cfg.image_tokens()));
        }
        if self.text.len() > cfg.max_text_len {
            return Err(Error::Length {
                what: "text",
                len: self.text.len(),
                max: cfg.max_text_len,
            });
        }
        if self.target.is_empty() {
            return fail("empty target".into());
        }
        let targets = self.decoder_targets();
        if targets.len() > cfg.max_gen_len {
            return Err(Error::Length {
                what: "target",
                len: targets.len(),
                max: cfg.max_gen_len,
            });
        }
        if let Some(&bad) = self.grid.iter().chain(&self.text).chain(&targets).find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Index {
                what: "vocabulary",
                index: bad,
                len: cfg.vocab_size,
            });
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        format!(
            "{} {} | {} | {}",
            self.task.tag(),
            join(&self.grid),
            join(&self.text),
            join(&self.target)
        )
    }

    pub fn parse_line(line: &str, line_no: usize) -> Result<Self> {
        let err = |msg: String| Error::Dataset { line: line_no, msg };
        let parts: Vec<&str> = line.split('|').collect();
        if parts.len() != 3 {
            return Err(err(format!("expected 3 `|`-separated fields, found {}", parts.len())));
        }
        let ints = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|w| w.parse::<usize>().map_err(|_| err(format!("`{w}` is not a token id"))))
                .collect()
        };
        let head = ints(parts[0])?;
        let (&tag, grid) = head.split_first().ok_or_else(|| err("missing task tag".into()))?;
        let task = Task::from_tag(tag).ok_or_else(|| err(format!("unknown task tag {tag}")))?;
        let text = ints(parts[1])?;
        let target = ints(parts[2])?;
        if grid.is_empty() {
            return Err(err("empty grid".into()));
        }
        if target.is_empty() {
            return Err(err("empty target".into()));
        }
        Ok(Self {
            task,
            grid: grid.to_vec(),
            text,
            target,
        })
    }
}

pub fn is_object(token: usize) -> bool {
    (FIRST_OBJECT..FIRST_OBJECT + OBJECT_COUNT).contains(&token)
}

pub fn token_name(token: usize) -> String {
    WORDS.get(token).map_or_else(|| format!("tok{token}"), |w| w.to_string())
}

pub fn detokenize(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| token_name(t)).collect::<Vec<_>>().join(" ")
}

/// Canonical caption: the grid's objects in row-major order, then EOS.
pub fn caption_for(grid: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = grid.iter().copied().filter(|&t| is_object(t)).collect();
    out.push(EOS);
    out
}

fn number_word(t: usize) -> Option<usize> {
    (FIRST_NUMBER..FIRST_NUMBER + MAX_OBJECTS).contains(&t).then(|| t - FIRST_NUMBER + 1)
}

/// The number bound to `over`. The row count is a distractor whose role is
/// fixed only by word order.
fn stated_number(text: &[usize]) -> Option<usize> {
    match *text {
        [THERE, ARE, OVER, n, SHAPES, IN, m, ROWS] | [IN, m, ROWS, THERE, ARE, OVER, n, SHAPES] => {
            number_word(m)?;
            number_word(n)
        }
        _ => None,
    }
}

/// Truth of `there are over N shapes in M rows` (either clause order)
/// against the grid; `None` if the text is not a statement of that shape.
pub fn statement_holds(grid: &[usize], text: &[usize]) -> Option<bool> {
    let count = grid.iter().filter(|&&t| is_object(t)).count();
    stated_number(text).map(|n| count > n)
}

fn max_objects(side: usize) -> usize {
    OBJECT_COUNT.min(MAX_OBJECTS).min(side * side)
}

fn grid_with(rng: &mut SeededRng, side: usize, k: usize) -> Vec<usize> {
    let cells = side * side;
    let mut objects: Vec<usize> = (FIRST_OBJECT..FIRST_OBJECT + OBJECT_COUNT).collect();
    rng.shuffle(&mut objects);
    objects.truncate(k);
    objects.sort_unstable();
    let mut positions: Vec<usize> = (0..cells).collect();
    rng.shuffle(&mut positions);
    positions.truncate(k);
    positions.sort_unstable();
    let mut grid = vec![EMPTY; cells];
    for (&p, &o) in positions.iter().zip(&objects) {
        grid[p] = o;
    }
    grid
}

fn random_grid(rng: &mut SeededRng, side: usize) -> Vec<usize> {
    let k = 1 + rng.below(max_objects(side));
    grid_with(rng, side, k)
}

/// Numbers N for which `over N` is true for some object count and false
/// for another.
fn open_numbers(side: usize) -> Vec<usize> {
    (1..max_objects(side)).collect()
}

/// Each statement is equally likely to be true or false, so the text alone
/// predicts nothing and the grid must be read.
fn entail_example(rng: &mut SeededRng, side: usize, numbers: &[usize]) -> SyntheticExample {
    let n = FIRST_NUMBER + numbers[rng.below(numbers.len())] - 1;
    let m = FIRST_NUMBER + rng.below(MAX_OBJECTS);
    let text = if rng.bernoulli(0.5) {
        vec![THERE, ARE, OVER, n, SHAPES, IN, m, ROWS]
    } else {
        vec![IN, m, ROWS, THERE, ARE, OVER, n, SHAPES]
    };
    let n = n - FIRST_NUMBER + 1;
    let want = rng.bernoulli(0.5);
    let k = if want {
        n + 1 + rng.below(max_objects(side) - n)
    } else {
        1 + rng.below(n)
    };
    let grid = grid_with(rng, side, k);
    let label = if want { YES } else { NO };
    SyntheticExample {
        task: Task::Entail,
        grid,
        text,
        target: vec![label],
    }
}

fn caption_example(rng: &mut SeededRng, side: usize) -> SyntheticExample {
    let grid = random_grid(rng, side);
    let prompt = CAPTION_PROMPTS[rng.below(CAPTION_PROMPTS.len())];
    let target = caption_for(&grid);
    SyntheticExample {
        task: Task::Caption,
        grid,
        text: prompt.to_vec(),
        target,
    }
}

/// Deterministic dataset for one seed. Objects are placed so that row-major
/// order lists them in ascending id order.
pub fn generate(seed: u64, count: usize, task: Task, cfg: &ModelConfig) -> Result<Vec<SyntheticExample>> {
    if count == 0 {
        return Err(Error::Contract("dataset count must be at least 1".into()));
    }
    if cfg.vocab_size < MIN_VOCAB {
        return Err(Error::Contract(format!(
            "vocab_size {} is below the {MIN_VOCAB} tokens the tasks use",
            cfg.vocab_size
        )));
    }
    let needed_text = match task {
        Task::Entail => 8,
        Task::Caption => CAPTION_PROMPTS.iter().map(|p| p.len()).max().unwrap_or(0),
    };
    if cfg.max_text_len < needed_text {
        return Err(Error::Length {
            what: "text",
            len: needed_text,
            max: cfg.max_text_len,
        });
    }
    let numbers = open_numbers(cfg.grid_side);
    if task == Task::Entail && numbers.is_empty() {
        return Err(Error::Contract(format!(
            "grid side {} leaves no statement that can be both true and false",
            cfg.grid_side
        )));
    }
    let mut rng = SeededRng::new(seed);
    Ok((0..count)
        .map(|_| match task {
            Task::Entail => entail_example(&mut rng, cfg.grid_side, &numbers),
            Task::Caption => caption_example(&mut rng, cfg.grid_side),
        })
        .collect())
}

pub fn serialize(examples: &[SyntheticExample]) -> String {
    let mut s = String::new();
    for e in examples {
        s.push_str(&e.to_line());
        s.push('\n');
    }
    s
}

pub fn parse(text: &str) -> Result<Vec<SyntheticExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| SyntheticExample::parse_line(l, i + 1))
        .collect()
}

pub fn write_dataset(path: &Path, examples: &[SyntheticExample]) -> Result<()> {
    fs::write(path, serialize(examples))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SyntheticExample>> {
    let examples = parse(&fs::read_to_string(path)?)?;
    if examples.is_empty() {
        return Err(Error::Dataset {
            line: 0,
            msg: format!("{} holds no examples", path.display()),
        });
    }
    Ok(examples)
}
