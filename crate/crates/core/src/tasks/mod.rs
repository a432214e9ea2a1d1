//! Synthetic verifiable task families.
//!
//! Two families share one vocabulary:
//!
//! - **Counting**: a grid of symbols followed by a query symbol; the answer is
//!   the number of grid cells holding the query symbol. Prompts look like
//!   `A B ; A C ; ? A |`.
//! - **ArithChain**: a chain of single-digit assignments evaluated mod 10; the
//!   answer is the value of the queried variable. Prompts look like
//!   `x = 3 ; y = x + 4 ; ? y |`.
//!
//! Every answer is a single digit so the answer span is one token.

mod dataset;
mod vocab;

use std::ops::RangeInclusive;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{self, domain};
use crate::{LabError, Result};

pub use dataset::{
    load_dataset, read_dataset, save_dataset, DatasetHeader, DATASET_FORMAT, DATASET_VERSION,
};
pub use vocab::{TokenId, Vocab, VocabCfg, DEFAULT_GRID_SYMBOLS, MAX_GRID_SYMBOLS, VARIABLE_NAMES};

/// Attempts before a counting configuration is declared unable to produce a
/// single-digit count.
const MAX_COUNTING_RESAMPLES: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Counting,
    Arith,
}

impl Family {
    pub const ALL: [Family; 2] = [Family::Counting, Family::Arith];

    pub fn name(self) -> &'static str {
        match self {
            Family::Counting => "counting",
            Family::Arith => "arith",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "counting" => Ok(Family::Counting),
            "arith" => Ok(Family::Arith),
            other => Err(LabError::Config(format!("unknown task family `{other}`"))),
        }
    }
}

/// One verifiable problem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub family: Family,
    #[serde(rename = "prompt_ids")]
    pub prompt_tokens: Vec<TokenId>,
    pub ground_truth: u8,
    pub seed: u64,
}

/// Recipe for a reproducible list of instances.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub family: Family,
    pub count: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub alphabet_size: usize,
    pub chain_length: usize,
    /// Inclusive bounds on digit operands of arithmetic chains.
    pub value_range: [u8; 2],
    pub seed: u64,
}

impl DatasetSpec {
    /// Lab defaults: 3x3 grids over 6 symbols, 3-step chains over all digits.
    pub fn new(family: Family, count: usize, seed: u64) -> Self {
        Self {
            family,
            count,
            grid_rows: 3,
            grid_cols: 3,
            alphabet_size: DEFAULT_GRID_SYMBOLS,
            chain_length: 3,
            value_range: [0, 9],
            seed,
        }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.count == 0 {
            return Err(LabError::Config("dataset count must be >= 1".into()));
        }
        match self.family {
            Family::Counting => {
                check_counting_dims(vocab, self.grid_rows, self.grid_cols, self.alphabet_size)
            }
            Family::Arith => check_arith_dims(self.chain_length, self.value_range()),
        }
    }

    pub fn value_range(&self) -> RangeInclusive<u8> {
        self.value_range[0]..=self.value_range[1]
    }

    /// Seed of the `index`-th instance.
    pub fn instance_seed(&self, index: usize) -> u64 {
        rng::derive_seed(self.seed, &[domain::DATASET, index as u64])
    }
}

fn check_counting_dims(vocab: &Vocab, rows: usize, cols: usize, alphabet: usize) -> Result<()> {
    let cells = rows * cols;
    if rows == 0 || cols == 0 || cells > 64 {
        return Err(LabError::Config(format!(
            "grid must satisfy 1 <= rows*cols <= 64, got {rows}x{cols}"
        )));
    }
    if alphabet < 2 || alphabet > vocab.grid_symbol_count() {
        return Err(LabError::Config(format!(
            "alphabet_size must be in 2..={}, got {alphabet}",
            vocab.grid_symbol_count()
        )));
    }
    Ok(())
}

fn check_arith_dims(chain_length: usize, values: RangeInclusive<u8>) -> Result<()> {
    if !(2..=VARIABLE_NAMES.len()).contains(&chain_length) {
        return Err(LabError::Config(format!(
            "chain_length must be in 2..={}, got {chain_length}",
            VARIABLE_NAMES.len()
        )));
    }
    if values.start() > values.end() || *values.end() > 9 {
        return Err(LabError::Config(format!(
            "value_range must be a non-empty sub-range of 0..=9, got {}..={}",
            values.start(),
            values.end()
        )));
    }
    Ok(())
}

/// Draws a `rows x cols` grid and a query symbol, resampling until the count
/// fits in one digit.
pub fn gen_counting_task(
    vocab: &Vocab,
    seed: u64,
    rows: usize,
    cols: usize,
    alphabet_size: usize,
) -> Result<TaskInstance> {
    check_counting_dims(vocab, rows, cols, alphabet_size)?;
    let mut rng = rng::stream(seed, &[]);
    for _ in 0..MAX_COUNTING_RESAMPLES {
        let grid: Vec<usize> = (0..rows * cols)
            .map(|_| rng.random_range(0..alphabet_size))
            .collect();
        let query = rng.random_range(0..alphabet_size);
        let count = grid.iter().filter(|&&s| s == query).count();
        if count > 9 {
            continue;
        }
        return Ok(TaskInstance {
            family: Family::Counting,
            prompt_tokens: counting_prompt(vocab, &grid, cols, query),
            ground_truth: count as u8,
            seed,
        });
    }
    Err(LabError::Config(format!(
        "{rows}x{cols} grid over {alphabet_size} symbols never produced a count <= 9"
    )))
}

/// Builds the prompt `row ; row ; ... ? q |` for a row-major grid.
pub fn counting_prompt(vocab: &Vocab, grid: &[usize], cols: usize, query: usize) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(grid.len() + grid.len() / cols + 3);
    for row in grid.chunks(cols) {
        out.extend(row.iter().map(|&s| vocab.grid_symbol(s)));
        out.push(Vocab::SEP);
    }
    out.extend([Vocab::QUERY, vocab.grid_symbol(query), Vocab::DELIM]);
    out
}

/// One arithmetic step: `var = prev op operand`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainOp {
    Add(u8),
    Sub(u8),
}

/// Draws a chain `x = d ; y = x (+|-) d ; ...` and queries its last variable.
pub fn gen_arith_task(
    seed: u64,
    chain_length: usize,
    value_range: RangeInclusive<u8>,
) -> Result<TaskInstance> {
    check_arith_dims(chain_length, value_range.clone())?;
    let mut rng = rng::stream(seed, &[]);
    let start = rng.random_range(value_range.clone());
    let ops: Vec<ChainOp> = (1..chain_length)
        .map(|_| {
            let d = rng.random_range(value_range.clone());
            if rng.random_bool(0.5) {
                ChainOp::Add(d)
            } else {
                ChainOp::Sub(d)
            }
        })
        .collect();
    let answer = ops.iter().fold(start, |acc, op| apply_op(acc, *op));
    Ok(TaskInstance {
        family: Family::Arith,
        prompt_tokens: arith_prompt(start, &ops),
        ground_truth: answer,
        seed,
    })
}

fn apply_op(value: u8, op: ChainOp) -> u8 {
    match op {
        ChainOp::Add(d) => (value + d) % 10,
        ChainOp::Sub(d) => (value as i16 - d as i16).rem_euclid(10) as u8,
    }
}

/// Builds the prompt for a chain starting at `start`.
pub fn arith_prompt(start: u8, ops: &[ChainOp]) -> Vec<TokenId> {
    let mut out = vec![
        Vocab::variable(0),
        Vocab::EQUALS,
        Vocab::digit(start),
        Vocab::SEP,
    ];
    for (i, op) in ops.iter().enumerate() {
        let (sym, d) = match *op {
            ChainOp::Add(d) => (Vocab::PLUS, d),
            ChainOp::Sub(d) => (Vocab::MINUS, d),
        };
        out.extend([
            Vocab::variable(i + 1),
            Vocab::EQUALS,
            Vocab::variable(i),
            sym,
            Vocab::digit(d),
            Vocab::SEP,
        ]);
    }
    out.extend([Vocab::QUERY, Vocab::variable(ops.len()), Vocab::DELIM]);
    out
}

/// Generates every instance of a dataset spec.
pub fn generate_dataset(vocab: &Vocab, spec: &DatasetSpec) -> Result<Vec<TaskInstance>> {
    spec.validate(vocab)?;
    (0..spec.count)
        .map(|i| {
            let seed = spec.instance_seed(i);
            match spec.family {
                Family::Counting => gen_counting_task(
                    vocab,
                    seed,
                    spec.grid_rows,
                    spec.grid_cols,
                    spec.alphabet_size,
                ),
                Family::Arith => gen_arith_task(seed, spec.chain_length, spec.value_range()),
            }
        })
        .collect()
}

/// A prompt parsed back into its problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedPrompt {
    Counting {
        /// Grid symbol indices, row-major.
        grid: Vec<usize>,
        cols: usize,
        query: usize,
    },
    Arith {
        /// `(variable index, value)` after each statement, in order.
        steps: Vec<(usize, u8)>,
        query: usize,
    },
}

impl ParsedPrompt {
    pub fn family(&self) -> Family {
        match self {
            ParsedPrompt::Counting { .. } => Family::Counting,
            ParsedPrompt::Arith { .. } => Family::Arith,
        }
    }

    pub fn answer(&self) -> u8 {
        match self {
            ParsedPrompt::Counting { grid, query, .. } => {
                grid.iter().filter(|&&s| s == *query).count() as u8
            }
            ParsedPrompt::Arith { steps, query } => steps
                .iter()
                .rev()
                .find(|(v, _)| v == query)
                .map(|&(_, val)| val)
                .expect("parser guarantees the query variable is defined"),
        }
    }
}

fn malformed(msg: impl Into<String>) -> LabError {
    LabError::MalformedInstance(msg.into())
}

/// Parses a prompt of either family from its tokens alone.
pub fn parse_prompt(vocab: &Vocab, tokens: &[TokenId]) -> Result<ParsedPrompt> {
    match tokens.first() {
        Some(&t) if vocab.grid_index(t).is_some() => parse_counting(vocab, tokens),
        Some(&t) if Vocab::variable_index(t).is_some() => parse_arith(tokens),
        Some(_) => Err(malformed(
            "prompt starts with neither a grid symbol nor a variable",
        )),
        None => Err(malformed("empty prompt")),
    }
}

fn parse_tail(tail: &[TokenId]) -> Result<TokenId> {
    match tail {
        [q, sym, d] if *q == Vocab::QUERY && *d == Vocab::DELIM => Ok(*sym),
        _ => Err(malformed("prompt must end with `? <symbol> |`")),
    }
}

fn parse_counting(vocab: &Vocab, tokens: &[TokenId]) -> Result<ParsedPrompt> {
    if tokens.len() < 4 {
        return Err(malformed("counting prompt too short"));
    }
    let (body, tail) = tokens.split_at(tokens.len() - 3);
    let query = vocab
        .grid_index(parse_tail(tail)?)
        .ok_or_else(|| malformed("counting query is not a grid symbol"))?;
    let mut grid = Vec::new();
    let mut cols = None;
    let mut row_len = 0usize;
    for &t in body {
        if t == Vocab::SEP {
            match cols {
                None if row_len > 0 => cols = Some(row_len),
                Some(c) if c == row_len => {}
                _ => return Err(malformed("ragged or empty grid row")),
            }
            row_len = 0;
        } else {
            let s = vocab
                .grid_index(t)
                .ok_or_else(|| malformed(format!("unexpected token {t} in grid")))?;
            grid.push(s);
            row_len += 1;
        }
    }
    if row_len != 0 {
        return Err(malformed("grid row not terminated by a separator"));
    }
    let cols = cols.ok_or_else(|| malformed("empty grid"))?;
    Ok(ParsedPrompt::Counting { grid, cols, query })
}

fn parse_arith(tokens: &[TokenId]) -> Result<ParsedPrompt> {
    let mut values: [Option<u8>; VARIABLE_NAMES.len()] = [None; VARIABLE_NAMES.len()];
    let mut steps = Vec::new();
    let mut pos = 0usize;
    let term = |t: TokenId, values: &[Option<u8>]| -> Result<u8> {
        if let Some(d) = Vocab::digit_value(t) {
            Ok(d)
        } else if let Some(v) = Vocab::variable_index(t) {
            values[v].ok_or_else(|| malformed("variable used before definition"))
        } else {
            Err(malformed(format!("unexpected token {t} in expression")))
        }
    };
    while pos < tokens.len() && tokens[pos] != Vocab::QUERY {
        let var = Vocab::variable_index(tokens[pos])
            .ok_or_else(|| malformed("statement must start with a variable"))?;
        if tokens.get(pos + 1) != Some(&Vocab::EQUALS) {
            return Err(malformed("expected `=`"));
        }
        pos += 2;
        let first = *tokens
            .get(pos)
            .ok_or_else(|| malformed("truncated statement"))?;
        let mut acc = term(first, &values)?;
        pos += 1;
        loop {
            match tokens.get(pos) {
                Some(&op) if op == Vocab::PLUS || op == Vocab::MINUS => {
                    let t = *tokens
                        .get(pos + 1)
                        .ok_or_else(|| malformed("dangling operator"))?;
                    let d = term(t, &values)?;
                    acc = apply_op(
                        acc,
                        if op == Vocab::PLUS {
                            ChainOp::Add(d)
                        } else {
                            ChainOp::Sub(d)
                        },
                    );
                    pos += 2;
                }
                Some(&sep) if sep == Vocab::SEP => {
                    pos += 1;
                    break;
                }
                _ => return Err(malformed("statement not terminated by a separator")),
            }
        }
        values[var] = Some(acc);
        steps.push((var, acc));
    }
    if steps.is_empty() {
        return Err(malformed("chain has no statements"));
    }
    let query = Vocab::variable_index(parse_tail(&tokens[pos..])?)
        .ok_or_else(|| malformed("arith query is not a variable"))?;
    if values[query].is_none() {
        return Err(malformed("query variable is undefined"));
    }
    Ok(ParsedPrompt::Arith { steps, query })
}

/// Recomputes the answer from the prompt tokens, ignoring `ground_truth`.
pub fn oracle_answer(vocab: &Vocab, instance: &TaskInstance) -> Result<u8> {
    let parsed = parse_prompt(vocab, &instance.prompt_tokens)?;
    if parsed.family() != instance.family {
        return Err(malformed(format!(
            "prompt parses as {} but instance is tagged {}",
            parsed.family(),
            instance.family
        )));
    }
    Ok(parsed.answer())
}

/// Gold completion `<think> ... </think> <answer> d </answer> <eos>`.
///
/// Counting think-spans name the query symbol then the running count at each
/// matching cell (`A 1 2`); chain think-spans list each variable with its value
/// (`x 3 y 7`).
pub fn make_sft_demo(vocab: &Vocab, instance: &TaskInstance) -> Result<Vec<TokenId>> {
    let parsed = parse_prompt(vocab, &instance.prompt_tokens)?;
    let mut out = vec![Vocab::THINK_OPEN];
    match &parsed {
        ParsedPrompt::Counting { grid, query, .. } => {
            out.push(vocab.grid_symbol(*query));
            let mut running = 0u8;
            for &s in grid {
                if s == *query {
                    running += 1;
                    out.push(Vocab::digit(running));
                }
            }
        }
        ParsedPrompt::Arith { steps, .. } => {
            for &(var, value) in steps {
                out.extend([Vocab::variable(var), Vocab::digit(value)]);
            }
        }
    }
    out.extend([
        Vocab::THINK_CLOSE,
        Vocab::ANSWER_OPEN,
        Vocab::digit(parsed.answer()),
        Vocab::ANSWER_CLOSE,
        Vocab::EOS,
    ]);
    Ok(out)
}
