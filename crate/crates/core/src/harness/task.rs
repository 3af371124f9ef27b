//! Synthetic sequence tasks.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Example;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Predict the input token at every position.
    Copy,
    /// Tokens carry a value in `0..V/2` and a marker bit (`+V/2`); predict the
    /// sum of the two marked values at the last position.
    Adding,
    /// Predict the parity of the number of zero tokens at the last position.
    Classify,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Adding => "adding",
            TaskKind::Classify => "classify",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "adding" => Ok(TaskKind::Adding),
            "classify" => Ok(TaskKind::Classify),
            _ => Err(format!("unknown task `{s}` (expected copy, adding or classify)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            seq_len: 16,
            vocab: 16,
            train_size: 2000,
            val_size: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

fn masked_last(tokens: Vec<usize>, label: usize) -> Example {
    let mut targets = vec![None; tokens.len()];
    *targets.last_mut().expect("non-empty") = Some(label);
    Example { tokens, targets }
}

fn sample(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> Example {
    let (t, v) = (spec.seq_len, spec.vocab);
    match spec.kind {
        TaskKind::Copy => {
            let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
            let targets = tokens.iter().map(|&x| Some(x)).collect();
            Example { tokens, targets }
        }
        TaskKind::Adding => {
            let half = v / 2;
            let values: Vec<usize> = (0..t).map(|_| rng.gen_range(0..half)).collect();
            let first = rng.gen_range(0..t);
            let mut second = rng.gen_range(0..t - 1);
            if second >= first {
                second += 1;
            }
            let tokens = values
                .iter()
                .enumerate()
                .map(|(i, &x)| if i == first || i == second { x + half } else { x })
                .collect();
            masked_last(tokens, values[first] + values[second])
        }
        TaskKind::Classify => {
            let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
            let zeros = tokens.iter().filter(|&&x| x == 0).count();
            masked_last(tokens, zeros % 2)
        }
    }
}

/// Build disjoint train and validation sets. Sequences are drawn until
/// `train_size + val_size` distinct ones exist, then shuffled and split.
pub fn make_task(spec: &TaskSpec) -> Result<Dataset> {
    if spec.train_size == 0 || spec.val_size == 0 {
        return Err(Error::invalid("train_size and val_size must be positive"));
    }
    let min_vocab = match spec.kind {
        TaskKind::Copy => 1,
        TaskKind::Adding => 4,
        TaskKind::Classify => 2,
    };
    if spec.vocab < min_vocab || spec.seq_len < 2 {
        return Err(Error::invalid(format!(
            "{} task needs vocab ≥ {min_vocab} and seq_len ≥ 2",
            spec.kind
        )));
    }
    let wanted = spec.train_size + spec.val_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::with_capacity(wanted);
    let mut all = Vec::with_capacity(wanted);
    let mut attempts = 0usize;
    while all.len() < wanted {
        attempts += 1;
        if attempts > 50 * wanted + 1000 {
            return Err(Error::invalid(format!(
                "could not draw {wanted} distinct sequences; enlarge seq_len or vocab"
            )));
        }
        let ex = sample(spec, &mut rng);
        if seen.insert(ex.tokens.clone()) {
            all.push(ex);
        }
    }
    all.shuffle(&mut rng);
    let val = all.split_off(spec.train_size);
    Ok(Dataset { train: all, val })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            seq_len: 8,
            vocab: 10,
            train_size: 300,
            val_size: 50,
            seed: 5,
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        for kind in [TaskKind::Copy, TaskKind::Adding, TaskKind::Classify] {
            let a = make_task(&spec(kind)).unwrap();
            assert_eq!(a, make_task(&spec(kind)).unwrap());
            assert_eq!((a.train.len(), a.val.len()), (300, 50));
            let train: HashSet<_> = a.train.iter().map(|e| e.tokens.clone()).collect();
            assert!(a.val.iter().all(|e| !train.contains(&e.tokens)));
        }
    }

    #[test]
    fn copy_targets_echo_input() {
        let d = make_task(&spec(TaskKind::Copy)).unwrap();
        for e in &d.train {
            let echoed: Vec<usize> = e.targets.iter().map(|t| t.unwrap()).collect();
            assert_eq!(echoed, e.tokens);
        }
    }

    #[test]
    fn adding_label_is_sum_of_marked_values() {
        let d = make_task(&spec(TaskKind::Adding)).unwrap();
        for e in d.train.iter().chain(&d.val) {
            let marked: Vec<usize> = e.tokens.iter().filter(|&&x| x >= 5).map(|x| x - 5).collect();
            assert_eq!(marked.len(), 2);
            assert_eq!(e.targets.last().unwrap().unwrap(), marked[0] + marked[1]);
            assert_eq!(e.counted(), 1);
        }
    }

    #[test]
    fn classify_label_is_parity() {
        let d = make_task(&spec(TaskKind::Classify)).unwrap();
        for e in &d.train {
            let zeros = e.tokens.iter().filter(|&&x| x == 0).count();
            assert_eq!(e.targets.last().unwrap().unwrap(), zeros % 2);
        }
    }

    #[test]
    fn rejects_impossible_sizes() {
        let s = TaskSpec {
            kind: TaskKind::Copy,
            seq_len: 2,
            vocab: 2,
            train_size: 10,
            val_size: 10,
            seed: 1,
        };
        assert!(make_task(&s).is_err());
    }
}
