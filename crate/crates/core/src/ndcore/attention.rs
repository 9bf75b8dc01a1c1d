//! Scaled dot-product multi-head attention over pre-projected rows.
//!
//! Queries, keys and values are row matrices with the embedding split into
//! `heads` contiguous chunks. Which keys a query sees is described by an
//! [`AttnLayout`]; the dense layout takes an explicit boolean mask and turns
//! forbidden pairs into `-inf` scores, the structured layouts enumerate the
//! permitted keys directly.

use super::tensor::softmax_in_place;
use super::{gemm, NdError, Scalar, Trans};

/// Key visibility for an attention call.
#[derive(Debug, Clone, PartialEq)]
pub enum AttnLayout {
    /// Every query sees every key, except where `mask[i * n_keys + j]` is
    /// false.
    Dense { mask: Option<Vec<bool>> },
    /// Consecutive blocks of `size` rows attend within their block.
    Blocks { size: usize },
    /// Rows are laid out as `row * positions + position`. A query attends to
    /// every context row at the same position. Without a separate context
    /// the keys are the query matrix's own rows; with one, each query also
    /// sees its own key.
    Columns { positions: usize },
}

/// Which key matrix a key index refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum KeySrc {
    Own,
    Ctx,
}

pub(crate) struct AttnShape {
    pub n_q: usize,
    pub n_k: usize,
    pub n_ctx: usize,
    pub dim: usize,
    pub heads: usize,
}

/// Fills `keys` with the keys visible to query `i`. Dense masks are not
/// applied here; masked keys are listed and scored `-inf` by the caller.
pub(crate) fn keys_for(
    layout: &AttnLayout,
    shape: &AttnShape,
    has_ctx: bool,
    i: usize,
    keys: &mut Vec<(KeySrc, usize)>,
) {
    keys.clear();
    match layout {
        AttnLayout::Dense { .. } => keys.extend((0..shape.n_k).map(|j| (KeySrc::Own, j))),
        AttnLayout::Blocks { size } => {
            let start = (i / size) * size;
            keys.extend((start..start + size).map(|j| (KeySrc::Own, j)));
        }
        AttnLayout::Columns { positions } => {
            let p = i % positions;
            if has_ctx {
                let rows = shape.n_ctx / positions;
                keys.extend((0..rows).map(|r| (KeySrc::Ctx, r * positions + p)));
                keys.push((KeySrc::Own, i));
            } else {
                let rows = shape.n_k / positions;
                keys.extend((0..rows).map(|r| (KeySrc::Own, r * positions + p)));
            }
        }
    }
}

pub(crate) fn validate(
    layout: &AttnLayout,
    shape: &AttnShape,
    has_ctx: bool,
) -> Result<(), NdError> {
    if shape.heads == 0 || !shape.dim.is_multiple_of(shape.heads) {
        return Err(NdError::ShapeMismatch(format!(
            "embedding dim {} not divisible by {} heads",
            shape.dim, shape.heads
        )));
    }
    match layout {
        AttnLayout::Dense { mask } => {
            if has_ctx {
                return Err(NdError::ShapeMismatch(
                    "dense attention takes no context".into(),
                ));
            }
            if let Some(m) = mask {
                if m.len() != shape.n_q * shape.n_k {
                    return Err(NdError::ShapeMismatch(format!(
                        "mask has {} entries, expected {}x{}",
                        m.len(),
                        shape.n_q,
                        shape.n_k
                    )));
                }
            }
        }
        AttnLayout::Blocks { size } => {
            if *size == 0 || !shape.n_q.is_multiple_of(*size) || shape.n_q != shape.n_k {
                return Err(NdError::ShapeMismatch(format!(
                    "block attention: {} queries / {} keys in blocks of {}",
                    shape.n_q, shape.n_k, size
                )));
            }
            if has_ctx {
                return Err(NdError::ShapeMismatch(
                    "block attention takes no context".into(),
                ));
            }
        }
        AttnLayout::Columns { positions } => {
            let p = *positions;
            if p == 0 || !shape.n_q.is_multiple_of(p) || shape.n_k != shape.n_q {
                return Err(NdError::ShapeMismatch(format!(
                    "column attention: {} queries / {} keys with {} positions",
                    shape.n_q, shape.n_k, p
                )));
            }
            if has_ctx && !shape.n_ctx.is_multiple_of(p) {
                return Err(NdError::ShapeMismatch(format!(
                    "context of {} rows is not a multiple of {} positions",
                    shape.n_ctx, p
                )));
            }
            if !has_ctx && shape.n_q == 0 {
                return Err(NdError::EmptyContext);
            }
        }
    }
    Ok(())
}

/// Inputs of one attention evaluation, borrowed as flat row-major slices.
pub(crate) struct AttnInputs<'a, T> {
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub ctx: Option<(&'a [T], &'a [T])>,
}

/// Forward pass. Returns the output and, when `keep_probs` is set, the
/// attention weights per (query, head, key) flattened in key-list order.
pub(crate) fn forward<T: Scalar>(
    layout: &AttnLayout,
    shape: &AttnShape,
    inp: &AttnInputs<'_, T>,
    keep_probs: bool,
) -> Result<(Vec<T>, Vec<T>), NdError> {
    if let AttnLayout::Columns { positions } = layout {
        return columns_forward(*positions, shape, inp, keep_probs);
    }
    let d = shape.dim;
    let hd = d / shape.heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut out = vec![T::zero(); shape.n_q * d];
    let mut probs = Vec::new();
    let mut keys = Vec::new();
    let mut scores = Vec::new();
    let mask = match layout {
        AttnLayout::Dense { mask } => mask.as_deref(),
        _ => None,
    };
    for i in 0..shape.n_q {
        keys_for(layout, shape, inp.ctx.is_some(), i, &mut keys);
        let qi = &inp.q[i * d..(i + 1) * d];
        for h in 0..shape.heads {
            let lo = h * hd;
            let qh = &qi[lo..lo + hd];
            scores.clear();
            for (jj, &(src, j)) in keys.iter().enumerate() {
                let allowed = mask.is_none_or(|m| m[i * shape.n_k + jj]);
                if !allowed {
                    scores.push(T::neg_infinity());
                    continue;
                }
                let kr = key_row(inp, src, j, d);
                let dot: T = qh.iter().zip(&kr[lo..lo + hd]).map(|(&a, &b)| a * b).sum();
                scores.push(dot * scale);
            }
            softmax_in_place(&mut scores)?;
            let oi = &mut out[i * d + lo..i * d + lo + hd];
            for (&p, &(src, j)) in scores.iter().zip(&keys) {
                if p == T::zero() {
                    continue;
                }
                let vr = val_row(inp, src, j, d);
                for (o, &v) in oi.iter_mut().zip(&vr[lo..lo + hd]) {
                    *o = *o + p * v;
                }
            }
            if keep_probs {
                probs.extend_from_slice(&scores);
            }
        }
    }
    Ok((out, probs))
}

/// Gradients of an attention call: (dq, dk, dv, dctx_k, dctx_v).
pub(crate) struct AttnGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dck: Vec<T>,
    pub dcv: Vec<T>,
}

pub(crate) fn backward<T: Scalar>(
    layout: &AttnLayout,
    shape: &AttnShape,
    inp: &AttnInputs<'_, T>,
    probs: &[T],
    dout: &[T],
) -> AttnGrads<T> {
    if let AttnLayout::Columns { positions } = layout {
        return columns_backward(*positions, shape, inp, probs, dout);
    }
    let d = shape.dim;
    let hd = d / shape.heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let mut g = AttnGrads {
        dq: vec![T::zero(); shape.n_q * d],
        dk: vec![T::zero(); shape.n_k * d],
        dv: vec![T::zero(); shape.n_k * d],
        dck: vec![T::zero(); shape.n_ctx * d],
        dcv: vec![T::zero(); shape.n_ctx * d],
    };
    let mut keys = Vec::new();
    let mut dp = Vec::new();
    let mut offset = 0;
    for i in 0..shape.n_q {
        keys_for(layout, shape, inp.ctx.is_some(), i, &mut keys);
        let qi = &inp.q[i * d..(i + 1) * d];
        let doi = &dout[i * d..(i + 1) * d];
        for h in 0..shape.heads {
            let lo = h * hd;
            let p = &probs[offset..offset + keys.len()];
            offset += keys.len();
            let doh = &doi[lo..lo + hd];
            dp.clear();
            let mut weighted = T::zero();
            for (&pj, &(src, j)) in p.iter().zip(&keys) {
                let vr = val_row(inp, src, j, d);
                let dpj: T = doh.iter().zip(&vr[lo..lo + hd]).map(|(&a, &b)| a * b).sum();
                weighted = weighted + pj * dpj;
                dp.push(dpj);
                if pj != T::zero() {
                    let dv = match src {
                        KeySrc::Own => &mut g.dv,
                        KeySrc::Ctx => &mut g.dcv,
                    };
                    for (t, &o) in dv[j * d + lo..j * d + lo + hd].iter_mut().zip(doh) {
                        *t = *t + pj * o;
                    }
                }
            }
            for ((&pj, &dpj), &(src, j)) in p.iter().zip(&dp).zip(&keys) {
                if pj == T::zero() {
                    continue;
                }
                let ds = pj * (dpj - weighted) * scale;
                let kr = key_row(inp, src, j, d);
                for (t, &kv) in g.dq[i * d + lo..i * d + lo + hd]
                    .iter_mut()
                    .zip(&kr[lo..lo + hd])
                {
                    *t = *t + ds * kv;
                }
                let dk = match src {
                    KeySrc::Own => &mut g.dk,
                    KeySrc::Ctx => &mut g.dck,
                };
                for (t, &qv) in dk[j * d + lo..j * d + lo + hd].iter_mut().zip(&qi[lo..lo + hd]) {
                    *t = *t + ds * qv;
                }
            }
        }
    }
    g
}

/// Row indices of one column group: queries at position `p`, and the
/// context (or own) rows at `p` that every query in the group sees.
struct ColumnGroup {
    queries: Vec<usize>,
    keys: Vec<usize>,
}

fn column_group(positions: usize, shape: &AttnShape, has_ctx: bool, p: usize) -> ColumnGroup {
    let queries = (0..shape.n_q / positions).map(|r| r * positions + p).collect();
    let n_keys = if has_ctx { shape.n_ctx } else { shape.n_k };
    let keys = (0..n_keys / positions).map(|r| r * positions + p).collect();
    ColumnGroup { queries, keys }
}

fn gather_head<T: Scalar>(src: &[T], rows: &[usize], d: usize, lo: usize, hd: usize, out: &mut Vec<T>) {
    out.clear();
    for &r in rows {
        out.extend_from_slice(&src[r * d + lo..r * d + lo + hd]);
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Column layout, batched per (position, head) through gemm. The key list
/// per query is the group's key rows followed, with a context, by its own
/// row; probabilities are stored in that order.
fn columns_forward<T: Scalar>(
    positions: usize,
    shape: &AttnShape,
    inp: &AttnInputs<'_, T>,
    keep_probs: bool,
) -> Result<(Vec<T>, Vec<T>), NdError> {
    let d = shape.dim;
    let hd = d / shape.heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let has_ctx = inp.ctx.is_some();
    let (ks, vs) = inp.ctx.unwrap_or((inp.k, inp.v));
    let mut out = vec![T::zero(); shape.n_q * d];
    let nk = if has_ctx { shape.n_ctx } else { shape.n_k } / positions;
    let row_len = nk + has_ctx as usize;
    let mut probs = if keep_probs {
        vec![T::zero(); shape.n_q * shape.heads * row_len]
    } else {
        Vec::new()
    };
    let (mut qg, mut kg, mut vg, mut og) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut scores = Vec::new();
    let mut row = Vec::with_capacity(row_len);
    for p in 0..positions {
        let g = column_group(positions, shape, has_ctx, p);
        let m = g.queries.len();
        for h in 0..shape.heads {
            let lo = h * hd;
            gather_head(inp.q, &g.queries, d, lo, hd, &mut qg);
            gather_head(ks, &g.keys, d, lo, hd, &mut kg);
            gather_head(vs, &g.keys, d, lo, hd, &mut vg);
            scores.clear();
            scores.resize(m * nk, T::zero());
            gemm(Trans::No, Trans::Yes, m, hd, nk, scale, &qg, &kg, T::zero(), &mut scores);
            let mut pself = vec![T::zero(); m];
            for (qi, &i) in g.queries.iter().enumerate() {
                row.clear();
                row.extend_from_slice(&scores[qi * nk..(qi + 1) * nk]);
                if has_ctx {
                    let own = &inp.k[i * d + lo..i * d + lo + hd];
                    row.push(dot(&qg[qi * hd..(qi + 1) * hd], own) * scale);
                }
                softmax_in_place(&mut row)?;
                scores[qi * nk..(qi + 1) * nk].copy_from_slice(&row[..nk]);
                if has_ctx {
                    pself[qi] = row[nk];
                }
                if keep_probs {
                    let at = (i * shape.heads + h) * row_len;
                    probs[at..at + row_len].copy_from_slice(&row);
                }
            }
            og.clear();
            og.resize(m * hd, T::zero());
            gemm(Trans::No, Trans::No, m, nk, hd, T::one(), &scores, &vg, T::zero(), &mut og);
            for (qi, &i) in g.queries.iter().enumerate() {
                let o = &mut out[i * d + lo..i * d + lo + hd];
                o.copy_from_slice(&og[qi * hd..(qi + 1) * hd]);
                if has_ctx {
                    let own = &inp.v[i * d + lo..i * d + lo + hd];
                    for (a, &v) in o.iter_mut().zip(own) {
                        *a = *a + pself[qi] * v;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

fn columns_backward<T: Scalar>(
    positions: usize,
    shape: &AttnShape,
    inp: &AttnInputs<'_, T>,
    probs: &[T],
    dout: &[T],
) -> AttnGrads<T> {
    let d = shape.dim;
    let hd = d / shape.heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let has_ctx = inp.ctx.is_some();
    let (ks, vs) = inp.ctx.unwrap_or((inp.k, inp.v));
    let mut g = AttnGrads {
        dq: vec![T::zero(); shape.n_q * d],
        dk: vec![T::zero(); shape.n_k * d],
        dv: vec![T::zero(); shape.n_k * d],
        dck: vec![T::zero(); shape.n_ctx * d],
        dcv: vec![T::zero(); shape.n_ctx * d],
    };
    let nk = if has_ctx { shape.n_ctx } else { shape.n_k } / positions;
    let row_len = nk + has_ctx as usize;
    let (mut qg, mut kg, mut vg, mut dog) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut pm, mut dp, mut dqg, mut dkg, mut dvg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for p in 0..positions {
        let grp = column_group(positions, shape, has_ctx, p);
        let m = grp.queries.len();
        for h in 0..shape.heads {
            let lo = h * hd;
            gather_head(inp.q, &grp.queries, d, lo, hd, &mut qg);
            gather_head(ks, &grp.keys, d, lo, hd, &mut kg);
            gather_head(vs, &grp.keys, d, lo, hd, &mut vg);
            gather_head(dout, &grp.queries, d, lo, hd, &mut dog);
            pm.clear();
            for &i in &grp.queries {
                let at = (i * shape.heads + h) * row_len;
                pm.extend_from_slice(&probs[at..at + nk]);
            }
            dp.clear();
            dp.resize(m * nk, T::zero());
            gemm(Trans::No, Trans::Yes, m, hd, nk, T::one(), &dog, &vg, T::zero(), &mut dp);
            // dp becomes dS in place.
            let mut ds_self = vec![T::zero(); m];
            for (qi, &i) in grp.queries.iter().enumerate() {
                let prow = &pm[qi * nk..(qi + 1) * nk];
                let dprow = &mut dp[qi * nk..(qi + 1) * nk];
                let mut weighted = dot(prow, dprow);
                let mut self_terms = (T::zero(), T::zero());
                if has_ctx {
                    let ps = probs[(i * shape.heads + h) * row_len + nk];
                    let dps = dot(&dog[qi * hd..(qi + 1) * hd], &inp.v[i * d + lo..i * d + lo + hd]);
                    weighted = weighted + ps * dps;
                    self_terms = (ps, dps);
                }
                for (x, &pj) in dprow.iter_mut().zip(prow) {
                    *x = pj * (*x - weighted) * scale;
                }
                if has_ctx {
                    let (ps, dps) = self_terms;
                    ds_self[qi] = ps * (dps - weighted) * scale;
                    let dvo = &mut g.dv[i * d + lo..i * d + lo + hd];
                    for (t, &o) in dvo.iter_mut().zip(&dog[qi * hd..(qi + 1) * hd]) {
                        *t = *t + ps * o;
                    }
                    let dko = &mut g.dk[i * d + lo..i * d + lo + hd];
                    for (t, &q) in dko.iter_mut().zip(&qg[qi * hd..(qi + 1) * hd]) {
                        *t = *t + ds_self[qi] * q;
                    }
                }
            }
            dqg.clear();
            dqg.resize(m * hd, T::zero());
            gemm(Trans::No, Trans::No, m, nk, hd, T::one(), &dp, &kg, T::zero(), &mut dqg);
            dkg.clear();
            dkg.resize(nk * hd, T::zero());
            gemm(Trans::Yes, Trans::No, nk, m, hd, T::one(), &dp, &qg, T::zero(), &mut dkg);
            dvg.clear();
            dvg.resize(nk * hd, T::zero());
            gemm(Trans::Yes, Trans::No, nk, m, hd, T::one(), &pm, &dog, T::zero(), &mut dvg);
            for (qi, &i) in grp.queries.iter().enumerate() {
                let t = &mut g.dq[i * d + lo..i * d + lo + hd];
                t.copy_from_slice(&dqg[qi * hd..(qi + 1) * hd]);
                if has_ctx {
                    let own = &inp.k[i * d + lo..i * d + lo + hd];
                    for (a, &k) in t.iter_mut().zip(own) {
                        *a = *a + ds_self[qi] * k;
                    }
                }
            }
            let (dk, dv) = if has_ctx {
                (&mut g.dck, &mut g.dcv)
            } else {
                (&mut g.dk, &mut g.dv)
            };
            for (kj, &j) in grp.keys.iter().enumerate() {
                for (t, &x) in dk[j * d + lo..j * d + lo + hd].iter_mut().zip(&dkg[kj * hd..(kj + 1) * hd]) {
                    *t = *t + x;
                }
                for (t, &x) in dv[j * d + lo..j * d + lo + hd].iter_mut().zip(&dvg[kj * hd..(kj + 1) * hd]) {
                    *t = *t + x;
                }
            }
        }
    }
    g
}

#[inline]
fn key_row<'a, T>(inp: &AttnInputs<'a, T>, src: KeySrc, j: usize, d: usize) -> &'a [T] {
    match src {
        KeySrc::Own => &inp.k[j * d..(j + 1) * d],
        KeySrc::Ctx => &inp.ctx.expect("context key").0[j * d..(j + 1) * d],
    }
}

#[inline]
fn val_row<'a, T>(inp: &AttnInputs<'a, T>, src: KeySrc, j: usize, d: usize) -> &'a [T] {
    match src {
        KeySrc::Own => &inp.v[j * d..(j + 1) * d],
        KeySrc::Ctx => &inp.ctx.expect("context value").1[j * d..(j + 1) * d],
    }
}
