//! Vanilla and structured multi-head attention.
//!
//! Structured matrices constrain the lower half of every output vector to a
//! transformation of the positional input half only; the masks live on the
//! parameters ([`crate::model::structured_matrix_mask`]), this module just
//! wires the blocks.

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SamError};
use crate::graph::TapeParams;
use crate::model::BlockNames;
use crate::tensor::{DenseArray, Scalar};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockVariant {
    /// Residual + norm + MLP (+ residual) + norm.
    Standard,
    /// Output cross-attention: single norm, no MLP, no second residual.
    Output,
}

/// Per-head projection leaves on the tape.
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

enum LnVars {
    Full { gain: Var, bias: Var },
    Halves { up: (Var, Var), low: (Var, Var) },
}

/// All tape leaves of one attention block.
pub struct BlockVars {
    pub heads: Vec<HeadVars>,
    pub bo: Var,
    ln1: LnVars,
    ln2: Option<LnVars>,
    mlp: Option<(Var, Var, Var, Var)>,
}

impl BlockVars {
    pub fn resolve(
        params: &TapeParams,
        prefix: &str,
        head_count: usize,
        structured: bool,
        variant: BlockVariant,
    ) -> Result<Self> {
        let names = BlockNames::new(prefix);
        let mut heads = Vec::with_capacity(head_count);
        for h in 0..head_count {
            heads.push(HeadVars {
                wq: params.var(&names.wq(h))?,
                wk: params.var(&names.wk(h))?,
                wv: params.var(&names.wv(h))?,
                wo: params.var(&names.wo(h))?,
            });
        }
        let resolve_ln = |ln: usize| -> Result<LnVars> {
            if structured {
                Ok(LnVars::Halves {
                    up: (
                        params.var(&names.ln_gain(ln, "up"))?,
                        params.var(&names.ln_bias(ln, "up"))?,
                    ),
                    low: (
                        params.var(&names.ln_gain(ln, "low"))?,
                        params.var(&names.ln_bias(ln, "low"))?,
                    ),
                })
            } else {
                Ok(LnVars::Full {
                    gain: params.var(&names.ln_gain(ln, "full"))?,
                    bias: params.var(&names.ln_bias(ln, "full"))?,
                })
            }
        };
        let with_mlp = variant == BlockVariant::Standard;
        Ok(Self {
            heads,
            bo: params.var(&names.bo())?,
            ln1: resolve_ln(1)?,
            ln2: if with_mlp { Some(resolve_ln(2)?) } else { None },
            mlp: if with_mlp {
                Some((
                    params.var(&names.mlp_w(1))?,
                    params.var(&names.mlp_b(1))?,
                    params.var(&names.mlp_w(2))?,
                    params.var(&names.mlp_b(2))?,
                ))
            } else {
                None
            },
        })
    }
}

/// Multi-head attention core: per query x, `sum_h sum_n s_{h,n} W_o W_v y_n`
/// plus the single structured output bias.
pub fn mha_core<F: Scalar>(
    tape: &mut Tape<F>,
    heads: &[HeadVars],
    bo: Option<Var>,
    queries: Var,
    keys_values: Var,
) -> Result<Var> {
    if tape.value(keys_values).rows() == 0 {
        return Err(SamError::EmptyInput("attention over empty key set".into()));
    }
    let mut out: Option<Var> = None;
    for head in heads {
        let qh = tape.linear(queries, head.wq, None)?;
        let kh = tape.linear(keys_values, head.wk, None)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let coeff = tape.softmax_rows(scores)?;
        let vh = tape.linear(keys_values, head.wv, None)?;
        let mixed = tape.matmul(coeff, vh)?;
        let head_out = tape.linear(mixed, head.wo, None)?;
        out = Some(match out {
            None => head_out,
            Some(acc) => tape.add(acc, head_out)?,
        });
    }
    let mut result = out.ok_or_else(|| SamError::EmptyInput("attention with zero heads".into()))?;
    if let Some(bias) = bo {
        result = tape.add_row(result, bias)?;
    }
    Ok(result)
}

fn apply_norm<F: Scalar>(tape: &mut Tape<F>, ln: &LnVars, x: Var) -> Result<Var> {
    match ln {
        LnVars::Full { gain, bias } => {
            let n = tape.layer_norm_rows(x, LN_EPS)?;
            let n = tape.mul_row(n, *gain)?;
            tape.add_row(n, *bias)
        }
        // Two independent D/2 norms: a full-width norm would mix visual
        // statistics into the positional half.
        LnVars::Halves { up, low } => {
            let d = tape.value(x).cols();
            let xu = tape.slice_cols(x, 0, d / 2)?;
            let xl = tape.slice_cols(x, d / 2, d)?;
            let nu = tape.layer_norm_rows(xu, LN_EPS)?;
            let nu = tape.mul_row(nu, up.0)?;
            let nu = tape.add_row(nu, up.1)?;
            let nl = tape.layer_norm_rows(xl, LN_EPS)?;
            let nl = tape.mul_row(nl, low.0)?;
            let nl = tape.add_row(nl, low.1)?;
            tape.concat_cols(nu, nl)
        }
    }
}

/// Full attention block on the tape.
pub fn attention_block_core<F: Scalar>(
    tape: &mut Tape<F>,
    block: &BlockVars,
    queries: Var,
    keys_values: Var,
    variant: BlockVariant,
) -> Result<Var> {
    let mha = mha_core(tape, &block.heads, Some(block.bo), queries, keys_values)?;
    let res = tape.add(queries, mha)?;
    let y = apply_norm(tape, &block.ln1, res)?;
    match variant {
        BlockVariant::Output => Ok(y),
        BlockVariant::Standard => {
            let (w1, b1, w2, b2) = block
                .mlp
                .ok_or_else(|| SamError::InvalidArgument("standard block without MLP".into()))?;
            let h = tape.linear(y, w1, Some(b1))?;
            let h = tape.relu(h)?;
            let m = tape.linear(h, w2, Some(b2))?;
            let y2 = tape.add(y, m)?;
            apply_norm(
                tape,
                block.ln2.as_ref().expect("standard block has ln2"),
                y2,
            )
        }
    }
}

/// Attention parameters held as plain arrays, for the standalone entry
/// points below.
#[derive(Debug, Clone)]
pub struct AttentionParams<F> {
    pub wq: Vec<DenseArray<F>>,
    pub wk: Vec<DenseArray<F>>,
    pub wv: Vec<DenseArray<F>>,
    pub wo: Vec<DenseArray<F>>,
    pub bo: Option<DenseArray<F>>,
}

/// Softmax coefficients `s_{h,n}` of one query against a key set, one head.
pub fn attention_coefficients<F: Scalar>(
    x: &[F],
    keys: &DenseArray<F>,
    params: &AttentionParams<F>,
    head: usize,
) -> Result<Vec<F>> {
    if keys.rows() == 0 {
        return Err(SamError::EmptyInput("attention over empty key set".into()));
    }
    let mut tape = Tape::new();
    let q = tape.constant(DenseArray::new(vec![1, x.len()], x.to_vec())?)?;
    let k = tape.constant(keys.clone())?;
    let wq = tape.constant(params.wq[head].clone())?;
    let wk = tape.constant(params.wk[head].clone())?;
    let qh = tape.linear(q, wq, None)?;
    let kh = tape.linear(k, wk, None)?;
    let scores = tape.matmul_nt(qh, kh)?;
    let coeff = tape.softmax_rows(scores)?;
    Ok(tape.value(coeff).data().to_vec())
}

/// Standalone multi-head attention over row-matrices of queries and
/// keys/values.
pub fn multi_head_attention<F: Scalar>(
    queries: &DenseArray<F>,
    keys_values: &DenseArray<F>,
    params: &AttentionParams<F>,
) -> Result<DenseArray<F>> {
    if queries.cols() != keys_values.cols() {
        return Err(SamError::ShapeMismatch(format!(
            "query dim {} vs key dim {}",
            queries.cols(),
            keys_values.cols()
        )));
    }
    let mut tape = Tape::new();
    let q = tape.constant(queries.clone())?;
    let kv = tape.constant(keys_values.clone())?;
    let mut heads = Vec::new();
    for h in 0..params.wq.len() {
        heads.push(HeadVars {
            wq: tape.constant(params.wq[h].clone())?,
            wk: tape.constant(params.wk[h].clone())?,
            wv: tape.constant(params.wv[h].clone())?,
            wo: tape.constant(params.wo[h].clone())?,
        });
    }
    let bo = match &params.bo {
        Some(b) => Some(tape.constant(b.clone())?),
        None => None,
    };
    let out = mha_core(&mut tape, &heads, bo, q, kv)?;
    Ok(tape.value(out).clone())
}

/// Split a D-vector into (upper visio-positional half, lower positional
/// half); concatenation inverts it exactly.
pub fn split_halves<F: Scalar>(v: &[F]) -> Result<(Vec<F>, Vec<F>)> {
    if v.len() % 2 != 0 {
        return Err(SamError::InvalidArgument("split_halves needs even length".into()));
    }
    let half = v.len() / 2;
    Ok((v[..half].to_vec(), v[half..].to_vec()))
}
