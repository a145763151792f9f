//! Synthetic classification tasks with labels derivable from the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::model::{TaskHeadSpec, Token};
use crate::rng::{seeded, splitmix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// Label is the most frequent token (ties go to the smallest id).
    Majority,
    /// Label is the token found at `position`.
    TokenAtPosition { position: usize },
    /// Label is the parity of the number of occurrences of `token`.
    Parity { token: Token },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: TaskKind,
    pub num_classes: usize,
    pub seq_len: usize,
    /// Tokens are drawn from `0..alphabet`; defaults to `num_classes`.
    #[serde(default)]
    pub alphabet: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub sequences: Vec<Vec<Token>>,
    pub labels: Vec<usize>,
}

/// Probability that a majority-task position is forced to the label.
const MAJORITY_BIAS: f64 = 0.4;

impl SyntheticTaskSpec {
    pub fn alphabet(&self) -> usize {
        self.alphabet.unwrap_or(self.num_classes)
    }

    pub fn head_spec(&self) -> TaskHeadSpec {
        TaskHeadSpec {
            id: self.id.clone(),
            num_classes: self.num_classes,
        }
    }

    pub fn validate(&self, index: usize, vocab_size: usize, max_seq_len: usize) -> Result<(), ModelError> {
        let field = |f: &str| format!("tasks[{index}].{f}");
        if self.seq_len == 0 || self.seq_len > max_seq_len {
            return Err(ModelError::config(
                field("seq_len"),
                format!("must be in 1..={max_seq_len}"),
            ));
        }
        if self.alphabet() < 2 || self.alphabet() > vocab_size {
            return Err(ModelError::config(
                field("alphabet"),
                format!("must be in 2..={vocab_size}"),
            ));
        }
        match self.kind {
            TaskKind::Majority | TaskKind::TokenAtPosition { .. } => {
                if self.num_classes != self.alphabet() {
                    return Err(ModelError::config(
                        field("num_classes"),
                        "must equal the alphabet size for this task kind",
                    ));
                }
            }
            TaskKind::Parity { token } => {
                if self.num_classes != 2 {
                    return Err(ModelError::config(
                        field("num_classes"),
                        "parity tasks have 2 classes",
                    ));
                }
                if token as usize >= self.alphabet() {
                    return Err(ModelError::config(field("token"), "must be inside the alphabet"));
                }
            }
        }
        if let TaskKind::TokenAtPosition { position } = self.kind {
            if position >= self.seq_len {
                return Err(ModelError::config(field("position"), "must be < seq_len"));
            }
        }
        Ok(())
    }

    /// The labelling rule.
    pub fn label(&self, tokens: &[Token]) -> usize {
        match self.kind {
            TaskKind::Majority => majority_label(tokens, self.alphabet()),
            TaskKind::TokenAtPosition { position } => tokens[position] as usize,
            TaskKind::Parity { token } => tokens.iter().filter(|&&t| t == token).count() % 2,
        }
    }
}

pub fn majority_label(tokens: &[Token], alphabet: usize) -> usize {
    let mut counts = vec![0usize; alphabet.max(1)];
    for &t in tokens {
        if let Some(c) = counts.get_mut(t as usize) {
            *c += 1;
        }
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Deterministic batch for `(task, batch_size, seed)`.
pub fn generate_batch(task: &SyntheticTaskSpec, batch_size: usize, seed: u64) -> Batch {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut rng = seeded(splitmix64(task.seed ^ splitmix64(seed)));
    let alphabet = task.alphabet() as u32;
    let mut sequences = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let seq: Vec<Token> = match task.kind {
            TaskKind::Majority => {
                let planted = rng.random_range(0..alphabet);
                let mut seq: Vec<Token> = (0..task.seq_len)
                    .map(|_| {
                        if rng.random_bool(MAJORITY_BIAS) {
                            planted
                        } else {
                            rng.random_range(0..alphabet)
                        }
                    })
                    .collect();
                // make `planted` the strict majority
                loop {
                    let mut counts = vec![0usize; alphabet as usize];
                    for &t in &seq {
                        counts[t as usize] += 1;
                    }
                    let rival = counts
                        .iter()
                        .enumerate()
                        .filter(|&(i, _)| i as u32 != planted)
                        .map(|(_, &c)| c)
                        .max()
                        .unwrap_or(0);
                    if counts[planted as usize] > rival || seq.iter().all(|&t| t == planted) {
                        break;
                    }
                    let others: Vec<usize> = (0..seq.len()).filter(|&i| seq[i] != planted).collect();
                    let i = others[rng.random_range(0..others.len())];
                    seq[i] = planted;
                }
                seq
            }
            TaskKind::TokenAtPosition { .. } | TaskKind::Parity { .. } => {
                (0..task.seq_len).map(|_| rng.random_range(0..alphabet)).collect()
            }
        };
        labels.push(task.label(&seq));
        sequences.push(seq);
    }
    Batch { sequences, labels }
}
