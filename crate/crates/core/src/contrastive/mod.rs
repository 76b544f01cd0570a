//! InfoNCE, the symmetric batch loss and the three-term WildSAT objective.
//!
//! Each loss has a plain `f64` form working on [`EmbeddingBatch`]es and a
//! tape form used for training. Both compute
//! `(sum_i lse(S_i.) + sum_j lse(S_.j) - 2 tr S) / 2n` with `S = Z E^T / tau`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, log_sum_exp, NodeId, Tape, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Tolerance on row norms accepted by [`EmbeddingBatch::new`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContrastiveError {
    #[error("embedding batch must be an n x d matrix with n >= 1, got shape {0:?}")]
    BadShape(Vec<usize>),
    #[error("row {row} of {modality} has norm {norm}, expected 1")]
    NotUnit {
        modality: Modality,
        row: usize,
        norm: f64,
    },
    #[error("batch shapes differ: {left:?} vs {right:?}")]
    Mismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    ImageT1,
    ImageT2,
    TxtHead,
    LocHead,
    ETxt,
    ELoc,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::ImageT1 => "image_t1",
            Modality::ImageT2 => "image_t2",
            Modality::TxtHead => "txt_head",
            Modality::LocHead => "loc_head",
            Modality::ETxt => "e_txt",
            Modality::ELoc => "e_loc",
        })
    }
}

/// `n x d` matrix of unit rows from one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    modality: Modality,
    rows: Tensor,
}

impl EmbeddingBatch {
    pub fn new(modality: Modality, rows: Tensor) -> Result<Self, ContrastiveError> {
        match rows.dims2() {
            Some((n, d)) if n >= 1 && d >= 1 => {}
            _ => return Err(ContrastiveError::BadShape(rows.shape().to_vec())),
        }
        for i in 0..rows.shape()[0] {
            let norm = dot(rows.row(i), rows.row(i)).sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(ContrastiveError::NotUnit {
                    modality,
                    row: i,
                    norm,
                });
            }
        }
        Ok(Self { modality, rows })
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn n(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    /// Reorders rows: row `k` of the result is row `perm[k]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let data = perm
            .iter()
            .flat_map(|&i| self.row(i).iter().copied())
            .collect();
        Self {
            modality: self.modality,
            rows: Tensor::new(vec![perm.len(), self.d()], data).unwrap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

fn check_tau(tau: f64) -> Result<(), ContrastiveError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(ContrastiveError::Temperature(tau))
    }
}

/// `-log softmax_j(z . e_j / tau)` at `j = i`.
pub fn info_nce(z: &[f64], e: &EmbeddingBatch, i: usize, tau: f64) -> f64 {
    let logits: Vec<f64> = (0..e.n()).map(|j| dot(z, e.row(j)) / tau).collect();
    if logits.len() == 1 {
        return 0.0;
    }
    // lse >= every logit, so the difference is non-negative up to rounding
    (log_sum_exp(&logits) - logits[i]).max(0.0)
}

/// Symmetric batch loss `(1/2n) sum_i [nce(z_i, E, i) + nce(e_i, Z, i)]`.
pub fn pairwise_loss(
    z: &EmbeddingBatch,
    e: &EmbeddingBatch,
    tau: f64,
) -> Result<f64, ContrastiveError> {
    check_tau(tau)?;
    if z.rows.shape() != e.rows.shape() {
        return Err(ContrastiveError::Mismatch {
            left: z.rows.shape().to_vec(),
            right: e.rows.shape().to_vec(),
        });
    }
    let n = z.n();
    let total: f64 = (0..n)
        .map(|i| info_nce(z.row(i), e, i, tau) + info_nce(e.row(i), z, i, tau))
        .sum();
    Ok(total / (2 * n) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub img: f64,
    pub txt: f64,
    pub loc: f64,
    pub total: f64,
}

/// The six batches entering the WildSAT objective.
#[derive(Debug, Clone, Copy)]
pub struct WildSatBatches<'a> {
    pub image_t1: &'a EmbeddingBatch,
    pub image_t2: &'a EmbeddingBatch,
    pub txt_head: &'a EmbeddingBatch,
    pub e_txt: &'a EmbeddingBatch,
    pub loc_head: &'a EmbeddingBatch,
    pub e_loc: &'a EmbeddingBatch,
}

/// `L(Z_t1, Z_t2) + L(Z_txt, E_txt) + L(Z_loc, E_loc)`.
pub fn wildsat_loss(b: WildSatBatches<'_>, tau: f64) -> Result<LossBreakdown, ContrastiveError> {
    let img = pairwise_loss(b.image_t1, b.image_t2, tau)?;
    let txt = pairwise_loss(b.txt_head, b.e_txt, tau)?;
    let loc = pairwise_loss(b.loc_head, b.e_loc, tau)?;
    if b.image_t1.n() != b.txt_head.n() || b.image_t1.n() != b.loc_head.n() {
        return Err(ContrastiveError::Mismatch {
            left: b.image_t1.rows.shape().to_vec(),
            right: if b.image_t1.n() != b.txt_head.n() {
                b.txt_head.rows.shape().to_vec()
            } else {
                b.loc_head.rows.shape().to_vec()
            },
        });
    }
    Ok(LossBreakdown {
        img,
        txt,
        loc,
        total: img + txt + loc,
    })
}

/// Appends the symmetric batch loss of two `n x d` unit-row nodes.
pub fn pairwise_loss_node(tape: &mut Tape, z: NodeId, e: NodeId, n: usize, tau: f64) -> NodeId {
    let et = tape.transpose(e);
    let zet = tape.matmul(z, et);
    let s = tape.scale(zet, 1.0 / tau);
    let st = tape.transpose(s);
    let rows = tape.log_sum_exp_rows(s);
    let cols = tape.log_sum_exp_rows(st);
    let rows_sum = tape.sum(rows);
    let cols_sum = tape.sum(cols);
    let eye = tape.constant(Tensor::identity(n));
    let masked = tape.mul(s, eye);
    let trace = tape.sum(masked);
    let neg_two_trace = tape.scale(trace, -2.0);
    let lse = tape.add(rows_sum, cols_sum);
    let total = tape.add(lse, neg_two_trace);
    tape.scale(total, 1.0 / (2 * n) as f64)
}

/// Nodes of the three terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub img: NodeId,
    pub txt: NodeId,
    pub loc: NodeId,
    pub total: NodeId,
}

pub struct WildSatNodes {
    pub image_t1: NodeId,
    pub image_t2: NodeId,
    pub txt_head: NodeId,
    pub e_txt: NodeId,
    pub loc_head: NodeId,
    pub e_loc: NodeId,
}

pub fn wildsat_loss_node(tape: &mut Tape, b: &WildSatNodes, n: usize, tau: f64) -> LossNodes {
    let img = pairwise_loss_node(tape, b.image_t1, b.image_t2, n, tau);
    let txt = pairwise_loss_node(tape, b.txt_head, b.e_txt, n, tau);
    let loc = pairwise_loss_node(tape, b.loc_head, b.e_loc, n, tau);
    let partial = tape.add(img, txt);
    let total = tape.add(partial, loc);
    LossNodes {
        img,
        txt,
        loc,
        total,
    }
}
