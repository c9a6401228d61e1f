//! The two three-way class sets and consensus distributions over them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// What anatomy the imaging plane intersects. Ordered (O, P, C).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PositionClass {
    #[serde(rename = "O")]
    Outside,
    #[serde(rename = "P")]
    Periphery,
    #[serde(rename = "C")]
    Centre,
}

/// Probe rotation needed to reach the centre plane. Ordered (R, S, L).
///
/// Left means rotate toward larger sweep angles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DirectionClass {
    #[serde(rename = "R")]
    Right,
    #[serde(rename = "S")]
    Stop,
    #[serde(rename = "L")]
    Left,
}

pub trait ClassSet: Copy + Eq + std::fmt::Debug {
    const SYMBOLS: [&'static str; 3];
    fn index(self) -> usize;
    fn from_index(i: usize) -> Option<Self>;
}

impl ClassSet for PositionClass {
    const SYMBOLS: [&'static str; 3] = ["O", "P", "C"];
    fn index(self) -> usize {
        self as usize
    }
    fn from_index(i: usize) -> Option<Self> {
        [Self::Outside, Self::Periphery, Self::Centre].get(i).copied()
    }
}

impl ClassSet for DirectionClass {
    const SYMBOLS: [&'static str; 3] = ["R", "S", "L"];
    fn index(self) -> usize {
        self as usize
    }
    fn from_index(i: usize) -> Option<Self> {
        [Self::Right, Self::Stop, Self::Left].get(i).copied()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("consensus needs at least one vote")]
    NoVotes,
    #[error("class id {0} out of range")]
    BadClass(usize),
    #[error("not a probability distribution: {0:?}")]
    NotDistribution([f64; 3]),
}

/// Probability vector over one ordered class set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassDistribution {
    p: [f64; 3],
}

impl ClassDistribution {
    pub fn new(p: [f64; 3]) -> Result<Self, LabelError> {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(LabelError::NotDistribution(p));
        }
        Ok(Self { p })
    }

    pub fn one_hot(class: usize) -> Self {
        let mut p = [0.0; 3];
        p[class] = 1.0;
        Self { p }
    }

    /// Softmax output; trusted to be a distribution up to round-off.
    pub(crate) fn from_probs(p: [f64; 3]) -> Self {
        Self { p }
    }

    pub fn probs(&self) -> [f64; 3] {
        self.p
    }

    /// Index of the largest component; ties go to the lower index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for k in 1..3 {
            if self.p[k] > self.p[best] {
                best = k;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.p.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Fraction of votes cast for each class.
pub fn encode_consensus(votes: &[usize]) -> Result<ClassDistribution, LabelError> {
    if votes.is_empty() {
        return Err(LabelError::NoVotes);
    }
    let mut counts = [0usize; 3];
    for &v in votes {
        *counts.get_mut(v).ok_or(LabelError::BadClass(v))? += 1;
    }
    let n = votes.len() as f64;
    Ok(ClassDistribution {
        p: counts.map(|c| c as f64 / n),
    })
}
