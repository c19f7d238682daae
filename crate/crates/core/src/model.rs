//! Model files: a line-oriented GPSS/H subset with `PARTITION`, `GENERATE`,
//! `TRANSFER` and `TERMINATE`.
//!
//! ```text
//! PARTITION Partition1,20000
//! GENERATE 1,0
//! TRANSFER 0.001,Label1
//! TERMINATE 0
//! PARTITION Partition2,20000
//! GENERATE 4,0,5000
//! Label1 TERMINATE 1
//! ```
//!
//! One statement per line. A leading token that is not an opcode is a label.
//! Operands are a single comma-separated token. `*` or `;` starts a comment.
//! Opcodes are case-insensitive, labels are not.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest number of decimal places accepted in a `TRANSFER` probability.
const MAX_PROBABILITY_SCALE: u32 = 18;

/// Position of a block inside a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockRef {
    pub partition: u32,
    pub block: u32,
}

impl fmt::Display for BlockRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}#{}", self.partition, self.block)
    }
}

/// An exact decimal probability `units / 10^scale`, kept as written so that
/// the canonical rendering reproduces the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Probability {
    units: u64,
    scale: u32,
}

impl Probability {
    pub const ONE: Probability = Probability { units: 1, scale: 0 };

    pub fn units(&self) -> u64 {
        self.units
    }

    /// `10^scale`, the denominator.
    pub fn denominator(&self) -> u64 {
        10u64.pow(self.scale)
    }

    pub fn is_certain(&self) -> bool {
        self.units == self.denominator()
    }

    pub fn as_f64(&self) -> f64 {
        self.units as f64 / self.denominator() as f64
    }

    fn parse(text: &str) -> Option<Probability> {
        let (int_part, frac_part) = match text.split_once('.') {
            Some((i, f)) => (i, f),
            None => (text, ""),
        };
        if int_part.is_empty() && frac_part.is_empty() {
            return None;
        }
        if !int_part.bytes().all(|b| b.is_ascii_digit())
            || !frac_part.bytes().all(|b| b.is_ascii_digit())
        {
            return None;
        }
        let scale = frac_part.len() as u32;
        if scale > MAX_PROBABILITY_SCALE {
            return None;
        }
        // digits only, so a parse failure means overflow: out of range either way
        let int_value: u64 = if int_part.is_empty() {
            0
        } else {
            int_part.parse::<u64>().map_or(2, |v| v.min(2))
        };
        let frac_value: u64 = if frac_part.is_empty() {
            0
        } else {
            frac_part.parse().ok()?
        };
        let units = int_value
            .checked_mul(10u64.pow(scale))?
            .checked_add(frac_value)?;
        Some(Probability { units, scale })
    }
}

impl fmt::Display for Probability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.scale == 0 {
            return write!(f, "{}", self.units);
        }
        let den = self.denominator();
        write!(
            f,
            "{}.{:0width$}",
            self.units / den,
            self.units % den,
            width = self.scale as usize
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Creates transactions with interarrival times uniform on
    /// `[mean - spread, mean + spread]`; the first one at `offset` if given.
    Generate {
        mean: u64,
        spread: u64,
        offset: Option<u64>,
    },
    /// With `probability` jumps to `target`, otherwise falls through.
    Transfer {
        probability: Probability,
        target: String,
        dest: BlockRef,
    },
    /// Destroys the transaction and subtracts `decrement` from the
    /// partition's termination counter.
    Terminate { decrement: u64 },
}

impl BlockKind {
    pub fn opcode(&self) -> &'static str {
        match self {
            BlockKind::Generate { .. } => "GENERATE",
            BlockKind::Transfer { .. } => "TRANSFER",
            BlockKind::Terminate { .. } => "TERMINATE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub label: Option<String>,
    pub kind: BlockKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub name: String,
    pub counter_start: u64,
    pub blocks: Vec<Block>,
}

impl Partition {
    /// Indices of the partition's GENERATE blocks, in block order.
    pub fn generate_blocks(&self) -> impl Iterator<Item = (u32, &Block)> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| matches!(b.kind, BlockKind::Generate { .. }))
            .map(|(i, b)| (i as u32, b))
    }
}

/// A parsed, label-resolved model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Model {
    pub partitions: Vec<Partition>,
    pub labels: BTreeMap<String, BlockRef>,
}

impl Model {
    pub fn block(&self, at: BlockRef) -> &Block {
        &self.partitions[at.partition as usize].blocks[at.block as usize]
    }

    pub fn partition_count(&self) -> usize {
        self.partitions.len()
    }
}

impl fmt::Display for Model {
    /// Canonical rendering; parsing it yields an equal model.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.partitions {
            writeln!(f, "PARTITION {},{}", p.name, p.counter_start)?;
            for b in &p.blocks {
                if let Some(label) = &b.label {
                    write!(f, "{label} ")?;
                }
                match &b.kind {
                    BlockKind::Generate {
                        mean,
                        spread,
                        offset,
                    } => {
                        write!(f, "GENERATE {mean},{spread}")?;
                        if let Some(o) = offset {
                            write!(f, ",{o}")?;
                        }
                        writeln!(f)?;
                    }
                    BlockKind::Transfer {
                        probability,
                        target,
                        ..
                    } => writeln!(f, "TRANSFER {probability},{target}")?,
                    BlockKind::Terminate { decrement } => writeln!(f, "TERMINATE {decrement}")?,
                }
            }
        }
        Ok(())
    }
}

/// Source text plus a name used in diagnostics.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub source: String,
    pub origin: String,
}

impl ModelFile {
    pub fn new(origin: impl Into<String>, source: impl Into<String>) -> Self {
        ModelFile {
            source: source.into(),
            origin: origin.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("no partitions")]
    NoPartitions,
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown opcode `{0}`")]
    UnknownOpcode(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("unresolved TRANSFER target `{0}`")]
    UnresolvedTarget(String),
    #[error("termination counter must be positive")]
    NonPositiveCounter,
    #[error("probability `{0}` out of range [0,1]")]
    ProbabilityOutOfRange(String),
    #[error("GENERATE spread {spread} must be smaller than mean {mean}")]
    SpreadTooLarge { mean: u64, spread: u64 },
    #[error("GENERATE mean interarrival must be positive")]
    ZeroMean,
    #[error("block outside any PARTITION")]
    BlockOutsidePartition,
    #[error("partition `{0}` has no blocks")]
    EmptyPartition(String),
    #[error("partition `{0}` ends with a block transactions can fall through")]
    FallsThroughEnd(String),
    #[error("TRANSFER target `{0}` is a GENERATE block")]
    TargetIsGenerate(String),
    #[error("model has no GENERATE block")]
    NoGenerate,
    #[error("model has no TERMINATE block")]
    NoTerminate,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{origin}:{line}:{column}: {kind}")]
pub struct ParseError {
    pub origin: String,
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Opcode {
    Partition,
    Generate,
    Transfer,
    Terminate,
}

impl Opcode {
    fn lookup(token: &str) -> Option<Opcode> {
        match token.to_ascii_uppercase().as_str() {
            "PARTITION" => Some(Opcode::Partition),
            "GENERATE" => Some(Opcode::Generate),
            "TRANSFER" => Some(Opcode::Transfer),
            "TERMINATE" => Some(Opcode::Terminate),
            _ => None,
        }
    }
}

fn is_identifier(token: &str) -> bool {
    let mut chars = token.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Transfer target waiting for label resolution.
struct PendingTarget {
    at: BlockRef,
    line: usize,
    column: usize,
}

struct Parser<'a> {
    origin: &'a str,
    partitions: Vec<Partition>,
    labels: BTreeMap<String, BlockRef>,
    targets: Vec<PendingTarget>,
    partition_lines: Vec<usize>,
}

impl<'a> Parser<'a> {
    fn err(&self, line: usize, column: usize, kind: ParseErrorKind) -> ParseError {
        ParseError {
            origin: self.origin.to_string(),
            line,
            column,
            kind,
        }
    }

    fn statement(&mut self, line_no: usize, line: &str) -> Result<(), ParseError> {
        // (column, token), columns 1-based
        let mut tokens: Vec<(usize, &str)> = Vec::new();
        let mut start = None;
        for (i, c) in line
            .char_indices()
            .chain(std::iter::once((line.len(), ' ')))
        {
            match (start, c.is_whitespace()) {
                (None, false) => start = Some(i),
                (Some(s), true) => {
                    tokens.push((line[..s].chars().count() + 1, &line[s..i]));
                    start = None;
                }
                _ => {}
            }
        }

        let (label, op_idx) = match Opcode::lookup(tokens[0].1) {
            Some(_) => (None, 0),
            None => match tokens.get(1).and_then(|t| Opcode::lookup(t.1)) {
                Some(_) => (Some(tokens[0]), 1),
                None => {
                    return Err(self.err(
                        line_no,
                        tokens[0].0,
                        ParseErrorKind::UnknownOpcode(tokens[0].1.to_string()),
                    ))
                }
            },
        };
        let (op_col, op_text) = tokens[op_idx];
        let opcode = Opcode::lookup(op_text).expect("checked above");
        if tokens.len() > op_idx + 2 {
            let (col, extra) = tokens[op_idx + 2];
            return Err(self.err(
                line_no,
                col,
                ParseErrorKind::Syntax(format!("unexpected token `{extra}`")),
            ));
        }
        let (operand_col, operand_text) = tokens
            .get(op_idx + 1)
            .copied()
            .unwrap_or((op_col + op_text.len(), ""));
        let operands: Vec<&str> = if operand_text.is_empty() {
            Vec::new()
        } else {
            operand_text.split(',').collect()
        };

        if let Some((col, text)) = label {
            if !is_identifier(text) {
                return Err(self.err(
                    line_no,
                    col,
                    ParseErrorKind::Syntax(format!("invalid label `{text}`")),
                ));
            }
        }

        let syntax = |msg: String| self.err(line_no, operand_col, ParseErrorKind::Syntax(msg));
        let int = |text: &str, what: &str| -> Result<u64, ParseError> {
            if text.is_empty() || !text.bytes().all(|b| b.is_ascii_digit()) {
                return Err(syntax(format!(
                    "{what}: expected an integer, found `{text}`"
                )));
            }
            text.parse::<u64>()
                .map_err(|_| syntax(format!("{what}: integer `{text}` too large")))
        };

        let kind = match opcode {
            Opcode::Partition => {
                if let Some((col, _)) = label {
                    return Err(self.err(
                        line_no,
                        col,
                        ParseErrorKind::Syntax("PARTITION takes no label".into()),
                    ));
                }
                if operands.len() != 2 || !is_identifier(operands[0]) {
                    return Err(syntax("expected PARTITION name,counter".into()));
                }
                if operands[1].starts_with('-') {
                    return Err(self.err(line_no, operand_col, ParseErrorKind::NonPositiveCounter));
                }
                let counter = int(operands[1], "termination counter")?;
                if counter == 0 {
                    return Err(self.err(line_no, operand_col, ParseErrorKind::NonPositiveCounter));
                }
                self.partitions.push(Partition {
                    name: operands[0].to_string(),
                    counter_start: counter,
                    blocks: Vec::new(),
                });
                self.partition_lines.push(line_no);
                return Ok(());
            }
            Opcode::Generate => {
                if operands.is_empty() || operands.len() > 3 {
                    return Err(syntax("expected GENERATE mean[,spread[,offset]]".into()));
                }
                let mean = int(operands[0], "mean")?;
                let spread = match operands.get(1) {
                    Some(s) if !s.is_empty() => int(s, "spread")?,
                    _ => 0,
                };
                let offset = match operands.get(2) {
                    Some(s) => Some(int(s, "offset")?),
                    None => None,
                };
                if mean == 0 {
                    return Err(self.err(line_no, operand_col, ParseErrorKind::ZeroMean));
                }
                if spread >= mean {
                    return Err(self.err(
                        line_no,
                        operand_col,
                        ParseErrorKind::SpreadTooLarge { mean, spread },
                    ));
                }
                BlockKind::Generate {
                    mean,
                    spread,
                    offset,
                }
            }
            Opcode::Transfer => {
                if operands.len() != 2 {
                    return Err(syntax("expected TRANSFER probability,label".into()));
                }
                let probability = match Probability::parse(operands[0]) {
                    Some(p) if p.units <= p.denominator() => p,
                    Some(_) => {
                        return Err(self.err(
                            line_no,
                            operand_col,
                            ParseErrorKind::ProbabilityOutOfRange(operands[0].to_string()),
                        ))
                    }
                    None if operands[0].starts_with('-') => {
                        return Err(self.err(
                            line_no,
                            operand_col,
                            ParseErrorKind::ProbabilityOutOfRange(operands[0].to_string()),
                        ))
                    }
                    None => return Err(syntax(format!("invalid probability `{}`", operands[0]))),
                };
                if !is_identifier(operands[1]) {
                    return Err(syntax(format!("invalid label `{}`", operands[1])));
                }
                BlockKind::Transfer {
                    probability,
                    target: operands[1].to_string(),
                    // resolved after the whole file is read
                    dest: BlockRef {
                        partition: u32::MAX,
                        block: u32::MAX,
                    },
                }
            }
            Opcode::Terminate => {
                let decrement = match operands.as_slice() {
                    [] => 0,
                    [d] => int(d, "decrement")?,
                    _ => return Err(syntax("expected TERMINATE [decrement]".into())),
                };
                BlockKind::Terminate { decrement }
            }
        };

        let Some(partition) = self.partitions.last() else {
            return Err(self.err(line_no, op_col, ParseErrorKind::BlockOutsidePartition));
        };
        let at = BlockRef {
            partition: (self.partitions.len() - 1) as u32,
            block: partition.blocks.len() as u32,
        };
        if matches!(kind, BlockKind::Transfer { .. }) {
            self.targets.push(PendingTarget {
                at,
                line: line_no,
                column: operand_col,
            });
        }
        let label = match label {
            Some((col, text)) => {
                if self.labels.insert(text.to_string(), at).is_some() {
                    return Err(self.err(
                        line_no,
                        col,
                        ParseErrorKind::DuplicateLabel(text.to_string()),
                    ));
                }
                Some(text.to_string())
            }
            None => None,
        };
        self.partitions[at.partition as usize]
            .blocks
            .push(Block { label, kind });
        Ok(())
    }

    fn finish(mut self) -> Result<Model, ParseError> {
        if self.partitions.is_empty() {
            return Err(self.err(0, 0, ParseErrorKind::NoPartitions));
        }
        for (p, line) in self.partitions.iter().zip(&self.partition_lines) {
            let Some(last) = p.blocks.last() else {
                return Err(self.err(*line, 1, ParseErrorKind::EmptyPartition(p.name.clone())));
            };
            let closes = match &last.kind {
                BlockKind::Terminate { .. } => true,
                BlockKind::Transfer { probability, .. } => probability.is_certain(),
                BlockKind::Generate { .. } => false,
            };
            if !closes {
                return Err(self.err(*line, 1, ParseErrorKind::FallsThroughEnd(p.name.clone())));
            }
        }
        let all_blocks = || self.partitions.iter().flat_map(|p| p.blocks.iter());
        if !all_blocks().any(|b| matches!(b.kind, BlockKind::Generate { .. })) {
            return Err(self.err(0, 0, ParseErrorKind::NoGenerate));
        }
        if !all_blocks().any(|b| matches!(b.kind, BlockKind::Terminate { .. })) {
            return Err(self.err(0, 0, ParseErrorKind::NoTerminate));
        }
        for t in std::mem::take(&mut self.targets) {
            let block = &self.partitions[t.at.partition as usize].blocks[t.at.block as usize];
            let BlockKind::Transfer { target, .. } = &block.kind else {
                unreachable!("pending target on a non-TRANSFER block");
            };
            let target = target.clone();
            let Some(&dest) = self.labels.get(&target) else {
                return Err(self.err(t.line, t.column, ParseErrorKind::UnresolvedTarget(target)));
            };
            let dest_kind =
                &self.partitions[dest.partition as usize].blocks[dest.block as usize].kind;
            if matches!(dest_kind, BlockKind::Generate { .. }) {
                return Err(self.err(t.line, t.column, ParseErrorKind::TargetIsGenerate(target)));
            }
            if let BlockKind::Transfer { dest: d, .. } =
                &mut self.partitions[t.at.partition as usize].blocks[t.at.block as usize].kind
            {
                *d = dest;
            }
        }
        Ok(Model {
            partitions: self.partitions,
            labels: self.labels,
        })
    }
}

/// Parses and validates a model file.
pub fn parse_model(file: &ModelFile) -> Result<Model, ParseError> {
    let mut parser = Parser {
        origin: &file.origin,
        partitions: Vec::new(),
        labels: BTreeMap::new(),
        targets: Vec::new(),
        partition_lines: Vec::new(),
    };
    for (idx, raw) in file.source.lines().enumerate() {
        let code = match raw.find(['*', ';']) {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        if code.trim().is_empty() {
            continue;
        }
        parser.statement(idx + 1, code)?;
    }
    parser.finish()
}

/// Convenience wrapper for in-memory sources.
pub fn parse_str(origin: &str, source: &str) -> Result<Model, ParseError> {
    parse_model(&ModelFile::new(origin, source))
}

/// A TRANSFER whose target lives in another partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CrossPartitionEdge {
    pub from: BlockRef,
    pub to: BlockRef,
}

/// Lists every cross-partition TRANSFER, in block order.
pub fn validate_topology(model: &Model) -> Vec<CrossPartitionEdge> {
    let mut edges = Vec::new();
    for (pi, p) in model.partitions.iter().enumerate() {
        for (bi, b) in p.blocks.iter().enumerate() {
            if let BlockKind::Transfer { dest, .. } = b.kind {
                if dest.partition as usize != pi {
                    edges.push(CrossPartitionEdge {
                        from: BlockRef {
                            partition: pi as u32,
                            block: bi as u32,
                        },
                        to: dest,
                    });
                }
            }
        }
    }
    edges
}
