//! Grouped multi-head attention kernels.
//!
//! A layout partitions the rows of a `[n, d]` token matrix into groups; each
//! group attends only within itself under its own mask and per-key logit
//! bias. Temporal, intra-frame, internal-autoregressive and flat causal
//! attention are all expressed this way.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::real::{matmul_into, matmul_nt_into, matmul_tn_into};
use crate::numerics::{Graph, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum GroupMask {
    /// Every query sees every key.
    Full,
    /// Query `i` sees keys `0..=i`.
    Causal,
    /// Row-major `Lq x Lk` matrix, `true` where query `i` may see key `j`.
    Explicit(Vec<bool>),
}

impl GroupMask {
    #[inline]
    pub fn allows(&self, n_keys: usize, q: usize, k: usize) -> bool {
        match self {
            GroupMask::Full => true,
            GroupMask::Causal => k <= q,
            GroupMask::Explicit(m) => m[q * n_keys + k],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionGroup {
    /// Query rows, in group order.
    pub queries: Vec<usize>,
    /// Key/value rows, in group order.
    pub keys: Vec<usize>,
    pub mask: GroupMask,
    /// Added to the pre-softmax logit of each key (group order).
    pub key_bias: Option<Vec<f64>>,
}

impl AttentionGroup {
    /// Group whose members attend to each other.
    pub fn self_attend(tokens: Vec<usize>, mask: GroupMask, key_bias: Option<Vec<f64>>) -> Self {
        Self { keys: tokens.clone(), queries: tokens, mask, key_bias }
    }

    fn pairs(&self) -> usize {
        self.queries.len() * self.keys.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub n_queries: usize,
    pub n_keys: usize,
    pub groups: Vec<AttentionGroup>,
}

impl AttentionLayout {
    pub fn new(n_queries: usize, n_keys: usize, groups: Vec<AttentionGroup>) -> Result<Self> {
        for g in &groups {
            let (lq, lk) = (g.queries.len(), g.keys.len());
            if let Some(&t) = g.queries.iter().find(|&&t| t >= n_queries) {
                return Err(Error::OutOfRange(format!("attention query {t} >= {n_queries}")));
            }
            if let Some(&t) = g.keys.iter().find(|&&t| t >= n_keys) {
                return Err(Error::OutOfRange(format!("attention key {t} >= {n_keys}")));
            }
            if let Some(b) = &g.key_bias {
                if b.len() != lk {
                    return Err(Error::Shape(format!("key bias length {} for {} keys", b.len(), lk)));
                }
            }
            match &g.mask {
                GroupMask::Explicit(m) => {
                    if m.len() != lq * lk {
                        return Err(Error::Shape(format!("mask has {} entries for {lq}x{lk}", m.len())));
                    }
                    for q in 0..lq {
                        if !(0..lk).any(|k| m[q * lk + k]) {
                            return Err(Error::DegenerateAttention(g.queries[q]));
                        }
                    }
                }
                _ if lk == 0 && lq > 0 => return Err(Error::DegenerateAttention(g.queries[0])),
                _ => {}
            }
        }
        Ok(Self { n_queries, n_keys, groups })
    }

    /// Self-attention layout made of the given groups of rows.
    pub fn self_attention(n_tokens: usize, groups: Vec<AttentionGroup>) -> Result<Self> {
        Self::new(n_tokens, n_tokens, groups)
    }

    /// Single self-attention group covering all `n` rows.
    pub fn single(n: usize, mask: GroupMask, key_bias: Option<Vec<f64>>) -> Result<Self> {
        Self::self_attention(n, vec![AttentionGroup::self_attend((0..n).collect(), mask, key_bias)])
    }

    /// Number of (query, key) pairs that are not masked out.
    pub fn attended_pairs(&self) -> u64 {
        self.groups
            .iter()
            .map(|g| {
                let (lq, lk) = (g.queries.len(), g.keys.len());
                match &g.mask {
                    GroupMask::Full => (lq * lk) as u64,
                    GroupMask::Causal => (0..lq).map(|i| (i + 1).min(lk) as u64).sum(),
                    GroupMask::Explicit(m) => m.iter().filter(|&&b| b).count() as u64,
                }
            })
            .sum()
    }

    /// Size of the saved probability buffer for `heads` heads.
    pub fn prob_len(&self, heads: usize) -> usize {
        self.groups.iter().map(AttentionGroup::pairs).sum::<usize>() * heads
    }
}

fn gather_head<F: Real>(src: &[F], d: usize, off: usize, hd: usize, rows: &[usize], dst: &mut [F]) {
    for (i, &r) in rows.iter().enumerate() {
        dst[i * hd..(i + 1) * hd].copy_from_slice(&src[r * d + off..r * d + off + hd]);
    }
}

fn scatter_add_head<F: Real>(src: &[F], d: usize, off: usize, hd: usize, rows: &[usize], dst: &mut [F]) {
    for (i, &r) in rows.iter().enumerate() {
        for (o, s) in dst[r * d + off..r * d + off + hd].iter_mut().zip(&src[i * hd..(i + 1) * hd]) {
            *o += *s;
        }
    }
}

/// Forward pass. `q` is `[n_queries, heads*hd]`, `k` and `v` are
/// `[n_keys, heads*hd]`. Returns the output and the saved probabilities.
pub fn attention_forward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    d: usize,
    heads: usize,
    scale: F,
    layout: &AttentionLayout,
) -> (Vec<F>, Vec<F>) {
    let hd = d / heads;
    let mut out = vec![F::zero(); layout.n_queries * d];
    let mut probs = vec![F::zero(); layout.prob_len(heads)];
    let mut poff = 0;
    let (mut qb, mut kb, mut vb, mut ob) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for g in &layout.groups {
        let (lq, lk) = (g.queries.len(), g.keys.len());
        qb.resize(lq * hd, F::zero());
        ob.resize(lq * hd, F::zero());
        kb.resize(lk * hd, F::zero());
        vb.resize(lk * hd, F::zero());
        let bias: Option<Vec<F>> = g.key_bias.as_ref().map(|b| b.iter().map(|&x| F::from_f64c(x)).collect());
        for h in 0..heads {
            let off = h * hd;
            gather_head(q, d, off, hd, &g.queries, &mut qb);
            gather_head(k, d, off, hd, &g.keys, &mut kb);
            gather_head(v, d, off, hd, &g.keys, &mut vb);
            let p = &mut probs[poff..poff + lq * lk];
            matmul_nt_into(&qb, &kb, p, lq, hd, lk, false);
            for i in 0..lq {
                let row = &mut p[i * lk..(i + 1) * lk];
                let mut mx = F::neg_infinity();
                for j in 0..lk {
                    if g.mask.allows(lk, i, j) {
                        let mut s = row[j] * scale;
                        if let Some(b) = &bias {
                            s += b[j];
                        }
                        row[j] = s;
                        if s > mx {
                            mx = s;
                        }
                    }
                }
                let mut sum = F::zero();
                for j in 0..lk {
                    if g.mask.allows(lk, i, j) {
                        let e = (row[j] - mx).exp();
                        row[j] = e;
                        sum += e;
                    } else {
                        row[j] = F::zero();
                    }
                }
                let inv = F::one() / sum;
                for x in row.iter_mut() {
                    *x *= inv;
                }
            }
            matmul_into(p, &vb, &mut ob, lq, lk, hd, false);
            scatter_add_head(&ob, d, off, hd, &g.queries, &mut out);
            poff += lq * lk;
        }
    }
    (out, probs)
}

/// Backward pass; accumulates into whichever of `dq, dk, dv` are present.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
    d: usize,
    heads: usize,
    scale: F,
    layout: &AttentionLayout,
    mut dq: Option<&mut [F]>,
    mut dk: Option<&mut [F]>,
    mut dv: Option<&mut [F]>,
) {
    let hd = d / heads;
    let mut poff = 0;
    let (mut qb, mut kb, mut vb, mut gb) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut tq, mut tk, mut ds) = (Vec::new(), Vec::new(), Vec::new());
    for g in &layout.groups {
        let (lq, lk) = (g.queries.len(), g.keys.len());
        qb.resize(lq * hd, F::zero());
        gb.resize(lq * hd, F::zero());
        tq.resize(lq * hd, F::zero());
        kb.resize(lk * hd, F::zero());
        vb.resize(lk * hd, F::zero());
        tk.resize(lk * hd, F::zero());
        ds.resize(lq * lk, F::zero());
        for h in 0..heads {
            let off = h * hd;
            let p = &probs[poff..poff + lq * lk];
            poff += lq * lk;
            gather_head(dout, d, off, hd, &g.queries, &mut gb);
            if let Some(dv) = dv.as_deref_mut() {
                // dV = P^T dO
                matmul_tn_into(p, &gb, &mut tk, lk, lq, hd, false);
                scatter_add_head(&tk, d, off, hd, &g.keys, dv);
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            gather_head(q, d, off, hd, &g.queries, &mut qb);
            gather_head(k, d, off, hd, &g.keys, &mut kb);
            gather_head(v, d, off, hd, &g.keys, &mut vb);
            // dP = dO V^T, then the softmax Jacobian.
            matmul_nt_into(&gb, &vb, &mut ds, lq, hd, lk, false);
            for i in 0..lq {
                let pr = &p[i * lk..(i + 1) * lk];
                let dr = &mut ds[i * lk..(i + 1) * lk];
                let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..lk {
                    dr[j] = pr[j] * (dr[j] - dot) * scale;
                }
            }
            if let Some(dq) = dq.as_deref_mut() {
                matmul_into(&ds, &kb, &mut tq, lq, lk, hd, false);
                scatter_add_head(&tq, d, off, hd, &g.queries, dq);
            }
            if let Some(dk) = dk.as_deref_mut() {
                matmul_tn_into(&ds, &qb, &mut tk, lk, lq, hd, false);
                scatter_add_head(&tk, d, off, hd, &g.keys, dk);
            }
        }
    }
}

/// Single-head attention of `queries` over `keys`/`values` under an explicit
/// `[n_queries, n_keys]` boolean mask (`true` = visible), with an optional
/// per-key logit bias. Scores are divided by `sqrt(head_dim)` before the bias
/// is added; with `use_qk_norm` queries and keys are unit-normalized instead
/// and their cosine is multiplied by a temperature of `sqrt(head_dim)`.
pub fn masked_attention<F: Real>(
    queries: &Tensor<F>,
    keys: &Tensor<F>,
    values: &Tensor<F>,
    mask: &[bool],
    logit_bias: Option<&[f64]>,
    use_qk_norm: bool,
) -> Result<Tensor<F>> {
    let (nq, nk) = (queries.rows(), keys.rows());
    let d = queries.cols();
    let layout = AttentionLayout::new(
        nq,
        nk,
        vec![AttentionGroup {
            queries: (0..nq).collect(),
            keys: (0..nk).collect(),
            mask: GroupMask::Explicit(mask.to_vec()),
            key_bias: logit_bias.map(<[f64]>::to_vec),
        }],
    )?;
    let mut g = Graph::inference();
    let mut q = g.constant(queries.clone());
    let mut k = g.constant(keys.clone());
    let v = g.constant(values.clone());
    let mut scale = F::from_f64c(1.0 / (d as f64).sqrt());
    if use_qk_norm {
        q = g.l2_norm_heads(q, 1)?;
        k = g.l2_norm_heads(k, 1)?;
        scale = F::from_f64c((d as f64).sqrt());
    }
    let out = g.attention(q, k, v, 1, scale, Rc::new(layout))?;
    Ok(g.value(out).clone())
}
