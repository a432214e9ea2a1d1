use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

/// Shape of the causal transformer policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyArch {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub max_context: usize,
    /// Hidden width of the feed-forward layer.
    pub d_ff: usize,
}

impl PolicyArch {
    /// Lab defaults: d_model 32, 2 heads, 1 block, context 160, d_ff 4*d_model.
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            n_heads: 2,
            n_blocks: 1,
            max_context: 160,
            d_ff: 128,
        }
    }

    /// The reduced shape used for finite-difference checks.
    pub fn reduced(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 8,
            n_heads: 1,
            n_blocks: 1,
            max_context: 32,
            d_ff: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.vocab_size < 2 {
            errs.push(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            errs.push(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.n_blocks == 0 {
            errs.push("n_blocks must be >= 1".to_string());
        }
        if self.max_context < 2 {
            errs.push(format!(
                "max_context must be >= 2, got {}",
                self.max_context
            ));
        }
        if self.d_ff == 0 {
            errs.push("d_ff must be >= 1".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(errs.join("; ")))
        }
    }

    pub fn parameter_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Offsets of every parameter tensor inside the flat vector. Weight
/// matrices are row-major `[in, out]`. Keys carry no bias: softmax would
/// cancel it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
    pub total: usize,
}

/// Kind of initialization a tensor receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Embedding,
    Weight { fan_in: usize },
    Head,
    Bias,
    Gain,
}

impl Layout {
    pub fn new(arch: &PolicyArch) -> Self {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (d, ff, v) = (arch.d_model, arch.d_ff, arch.vocab_size);
        let tok_emb = take(v * d);
        let pos_emb = take(arch.max_context * d);
        let blocks = (0..arch.n_blocks)
            .map(|_| BlockLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * ff),
                b1: take(ff),
                w2: take(ff * d),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(d * v);
        let b_out = take(v);
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total: at,
        }
    }

    /// Every tensor with a readable name, in storage order.
    pub fn tensors(&self, arch: &PolicyArch) -> Vec<(String, Range<usize>, TensorKind)> {
        let (d, ff) = (arch.d_model, arch.d_ff);
        let mut out = vec![
            (
                "tok_emb".to_string(),
                self.tok_emb.clone(),
                TensorKind::Embedding,
            ),
            (
                "pos_emb".to_string(),
                self.pos_emb.clone(),
                TensorKind::Embedding,
            ),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let entries = [
                ("ln1_g", &b.ln1_g, TensorKind::Gain),
                ("ln1_b", &b.ln1_b, TensorKind::Bias),
                ("wq", &b.wq, TensorKind::Weight { fan_in: d }),
                ("bq", &b.bq, TensorKind::Bias),
                ("wk", &b.wk, TensorKind::Weight { fan_in: d }),
                ("wv", &b.wv, TensorKind::Weight { fan_in: d }),
                ("bv", &b.bv, TensorKind::Bias),
                ("wo", &b.wo, TensorKind::Weight { fan_in: d }),
                ("bo", &b.bo, TensorKind::Bias),
                ("ln2_g", &b.ln2_g, TensorKind::Gain),
                ("ln2_b", &b.ln2_b, TensorKind::Bias),
                ("w1", &b.w1, TensorKind::Weight { fan_in: d }),
                ("b1", &b.b1, TensorKind::Bias),
                ("w2", &b.w2, TensorKind::Weight { fan_in: ff }),
                ("b2", &b.b2, TensorKind::Bias),
            ];
            out.extend(
                entries
                    .into_iter()
                    .map(|(n, r, k)| (format!("block{i}.{n}"), r.clone(), k)),
            );
        }
        out.push(("lnf_g".to_string(), self.lnf_g.clone(), TensorKind::Gain));
        out.push(("lnf_b".to_string(), self.lnf_b.clone(), TensorKind::Bias));
        out.push(("w_out".to_string(), self.w_out.clone(), TensorKind::Head));
        out.push(("b_out".to_string(), self.b_out.clone(), TensorKind::Bias));
        out
    }
}
