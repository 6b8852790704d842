//! Directed graph attention over the group features of one tapped block.
//!
//! Node `i` owns a square transfer matrix `W_g,i` and an edge vector
//! `w_e,i`. For every other node `j` it scores
//! `e'_ij = w_e,i . relu(W_g,i f_j)`, softmaxes the `K - 1` scores into the
//! affinities `e_ij`, and refines its feature to
//! `f'_i = relu((1 - alpha) f_i + alpha * sum_j e_ij W_g,i f_j)`.
//! Nothing ties `e_ij` to `e_ji`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Init, ParamKind, ParamStore};
use crate::tape::{Tape, Var};

pub const DEFAULT_ALPHA: f64 = 0.5;

fn prefix(block: usize, node: usize) -> String {
    format!("gcl.block{block}.node{node}")
}

/// Registers `(transfer, edge)` weights for every node of every tapped block.
pub fn register(store: &mut ParamStore, taps: &[(usize, usize)], nodes: usize) -> Result<()> {
    for &(block, dim) in taps {
        for i in 0..nodes {
            let p = prefix(block, i);
            store.register(&format!("{p}.transfer"), &[dim, dim], Init::FanInUniform { fan_in: dim }, ParamKind::Trainable)?;
            store.register(&format!("{p}.edge"), &[dim], Init::FanInUniform { fan_in: dim }, ParamKind::Trainable)?;
        }
    }
    Ok(())
}

/// `(transfer, edge)` tape handles for the nodes of one block.
pub fn load_weights(tape: &mut Tape, store: &ParamStore, block: usize, nodes: usize) -> Result<Vec<(Var, Var)>> {
    (0..nodes)
        .map(|i| {
            let p = prefix(block, i);
            Ok((tape.param_by_name(store, &format!("{p}.transfer"))?, tape.param_by_name(store, &format!("{p}.edge"))?))
        })
        .collect()
}

/// Score of the message from `f_j` (`[batch, D]`) to the node owning
/// `(transfer, edge)`. Returns `(logit [batch], W_g f_j [batch, D])`.
pub fn affinity_logits(tape: &mut Tape, f_j: Var, transfer: Var, edge: Var) -> Result<(Var, Var)> {
    let moved = tape.linear(f_j, transfer, None)?;
    let act = tape.relu(moved)?;
    let logit = tape.row_dot(act, edge)?;
    Ok((logit, moved))
}

/// Softmax over the `K - 1` incoming scores of one node: `[batch, K - 1]`.
pub fn affinity_normalize(tape: &mut Tape, logits: &[Var]) -> Result<Var> {
    if logits.is_empty() {
        return Err(Error::DegenerateGraph(1));
    }
    let stacked = tape.stack_columns(logits)?;
    tape.softmax(stacked)
}

/// Refined features plus the per-node affinity rows (`[batch, K - 1]`,
/// columns in ascending sender order with the node itself skipped).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GclOutput {
    pub refined: Vec<Var>,
    pub affinity: Vec<Var>,
}

pub fn gcl_update(tape: &mut Tape, features: &[Var], weights: &[(Var, Var)], alpha: f64) -> Result<GclOutput> {
    let k = features.len();
    if k < 2 {
        return Err(Error::DegenerateGraph(k));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Alpha(alpha));
    }
    if weights.len() != k {
        return Err(Error::Dimension { op: "gcl_update", detail: format!("{} weight pairs for {k} nodes", weights.len()) });
    }
    let mut refined = Vec::with_capacity(k);
    let mut affinity = Vec::with_capacity(k);
    for (i, &(transfer, edge)) in weights.iter().enumerate() {
        let mut logits = Vec::with_capacity(k - 1);
        let mut moved = Vec::with_capacity(k - 1);
        for (j, &f_j) in features.iter().enumerate() {
            if j == i {
                continue;
            }
            let (l, m) = affinity_logits(tape, f_j, transfer, edge)?;
            logits.push(l);
            moved.push(m);
        }
        let e = affinity_normalize(tape, &logits)?;
        let mut messages = Vec::with_capacity(k - 1);
        for (col, &m) in moved.iter().enumerate() {
            let w = tape.column(e, col)?;
            messages.push(tape.scale_rows(m, w)?);
        }
        let message = tape.add_n(&messages)?;
        let keep = tape.scale(features[i], 1.0 - alpha)?;
        let mixed = tape.scale(message, alpha)?;
        let pre = tape.add(keep, mixed)?;
        refined.push(tape.relu(pre)?);
        affinity.push(e);
    }
    Ok(GclOutput { refined, affinity })
}

/// Dense `K x K` affinity matrix; row `i` receives, column `j` sends, the
/// diagonal is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    k: usize,
    data: Vec<f64>,
}

impl AffinityMatrix {
    pub fn zeros(k: usize) -> Self {
        Self { k, data: vec![0.0; k * k] }
    }

    /// Matrix of sample `sample` from the per-node rows of a [`GclOutput`].
    pub fn from_rows(tape: &Tape, rows: &[Var], sample: usize) -> Self {
        let k = rows.len();
        let mut m = Self::zeros(k);
        for (i, &r) in rows.iter().enumerate() {
            let row = &tape.value(r).data()[sample * (k - 1)..][..k - 1];
            for (col, &v) in row.iter().enumerate() {
                let j = if col < i { col } else { col + 1 };
                m.data[i * k + j] = v;
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..][..self.k]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Min-max rescale of the off-diagonal entries to `[0, 1]`. When they
    /// are all equal every off-diagonal entry becomes 1.
    pub fn rescaled(&self) -> Self {
        let off: Vec<f64> = (0..self.k * self.k).filter(|x| x / self.k != x % self.k).map(|x| self.data[x]).collect();
        let lo = off.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = off.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = self.clone();
        for x in 0..self.k * self.k {
            out.data[x] = if x / self.k == x % self.k {
                0.0
            } else if hi > lo {
                (self.data[x] - lo) / (hi - lo)
            } else {
                1.0
            };
        }
        out
    }

    /// Header row of group names, then one row per receiving group.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut out = String::new();
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for i in 0..self.k {
            out.push_str(names.get(i).copied().unwrap_or(""));
            for v in self.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Running mean of affinity matrices over an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityAccumulator {
    sum: AffinityMatrix,
    count: usize,
}

impl AffinityAccumulator {
    pub fn new(k: usize) -> Self {
        Self { sum: AffinityMatrix::zeros(k), count: 0 }
    }

    pub fn add(&mut self, m: &AffinityMatrix) {
        self.sum.data.iter_mut().zip(&m.data).for_each(|(a, b)| *a += b);
        self.count += 1;
    }

    /// Adds every sample of a batch.
    pub fn add_batch(&mut self, tape: &Tape, rows: &[Var]) {
        let batch = tape.shape(rows[0])[0];
        for s in 0..batch {
            self.add(&AffinityMatrix::from_rows(tape, rows, s));
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> Result<AffinityMatrix> {
        if self.count == 0 {
            return Err(Error::Config("affinity export needs a non-empty evaluation set".into()));
        }
        let mut m = self.sum.clone();
        m.data.iter_mut().for_each(|v| *v /= self.count as f64);
        Ok(m)
    }
}
