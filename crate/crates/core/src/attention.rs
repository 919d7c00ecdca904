//! Self-attention kernels: the vanilla scaled-dot-product form, the variant
//! with trainable relative positional embeddings, multi-head wrapping, and
//! the zero-copy stride trick that aligns relative-position scores.
//!
//! Score matrices are the only buffers whose size depends on the attention
//! window; their peak allocation is tracked per thread so the streaming
//! work bound (score matrix never exceeds window × extended window) and the
//! benchmark memory claim can be asserted.

use std::cell::Cell;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, StridedTensor};

thread_local! {
    static SCORE_PEAK_BYTES: Cell<usize> = const { Cell::new(0) };
}

/// Reset the per-thread high-water mark for attention score buffers.
pub fn reset_score_peak() {
    SCORE_PEAK_BYTES.with(|c| c.set(0));
}

/// Largest attention score buffer allocated on this thread since the last
/// reset, in bytes.
pub fn score_peak_bytes() -> usize {
    SCORE_PEAK_BYTES.with(|c| c.get())
}

fn note_score_alloc(elems: usize, byte_width: usize) {
    SCORE_PEAK_BYTES.with(|c| c.set(c.get().max(elems * byte_width)));
}

/// Projection weights of one self-attention layer.
///
/// `w_q`, `w_k`, `w_v` are `[d_h, d_x]`; the optional output projection
/// `w_o` is `[d_x, d_h]` and mixes the concatenated heads. With `tie_kv`
/// the key and value weights are one object: they share storage, so
/// mutating one mutates the other and the parameter is counted once.
#[derive(Clone)]
pub struct AttentionParams<E: Scalar> {
    pub w_q: StridedTensor<E>,
    pub w_k: StridedTensor<E>,
    pub w_v: StridedTensor<E>,
    pub w_o: Option<StridedTensor<E>>,
    pub n_heads: usize,
    pub tie_kv: bool,
}

impl<E: Scalar> AttentionParams<E> {
    pub fn new(
        w_q: StridedTensor<E>,
        w_k: StridedTensor<E>,
        w_v: StridedTensor<E>,
        w_o: Option<StridedTensor<E>>,
        n_heads: usize,
    ) -> Result<Self> {
        let p = Self { w_q, w_k, w_v, w_o, n_heads, tie_kv: false };
        p.validate()?;
        Ok(p)
    }

    /// Tied variant: one weight serves as both key and value projection.
    pub fn new_tied(
        w_q: StridedTensor<E>,
        w_kv: StridedTensor<E>,
        w_o: Option<StridedTensor<E>>,
        n_heads: usize,
    ) -> Result<Self> {
        let p = Self { w_q, w_k: w_kv.clone(), w_v: w_kv, w_o, n_heads, tie_kv: true };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (d_h, d_x) = self.w_q.dims2("w_q")?;
        for (name, w) in [("w_k", &self.w_k), ("w_v", &self.w_v)] {
            let (dh, dx) = w.dims2(name)?;
            if (dh, dx) != (d_h, d_x) {
                return Err(Error::Dimension(format!(
                    "{name} is {:?}, expected {:?}",
                    w.shape(),
                    self.w_q.shape()
                )));
            }
        }
        if let Some(w_o) = &self.w_o {
            let (_, dh) = w_o.dims2("w_o")?;
            if dh != d_h {
                return Err(Error::Dimension(format!("w_o trailing extent {dh} != d_h {d_h}")));
            }
        }
        if self.n_heads == 0 || d_h % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_h {d_h} not divisible by n_heads {}",
                self.n_heads
            )));
        }
        if self.tie_kv && !self.w_k.aliases(&self.w_v) {
            return Err(Error::Config("tie_kv set but key/value weights are distinct".into()));
        }
        Ok(())
    }

    pub fn d_h(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_width(&self) -> usize {
        self.d_h() / self.n_heads
    }

    /// Register the weights on a tape. Tied key/value share storage and so
    /// become one `Var`: their gradients merge on a single node.
    pub fn bind(&self, tape: &Tape<E>, trainable: bool) -> BoundAttention<E> {
        self.bind_with(&crate::autodiff::Binder::new(tape, trainable))
    }

    pub fn bind_with(&self, binder: &crate::autodiff::Binder<'_, E>) -> BoundAttention<E> {
        BoundAttention {
            w_q: binder.var(&self.w_q),
            w_k: binder.var(&self.w_k),
            w_v: binder.var(&self.w_v),
            w_o: self.w_o.as_ref().map(|w| binder.var(w)),
            n_heads: self.n_heads,
            tie_kv: self.tie_kv,
        }
    }
}

/// [`AttentionParams`] registered on a tape.
#[derive(Clone)]
pub struct BoundAttention<E: Scalar> {
    pub w_q: Var<E>,
    pub w_k: Var<E>,
    pub w_v: Var<E>,
    pub w_o: Option<Var<E>>,
    pub n_heads: usize,
    pub tie_kv: bool,
}

impl<E: Scalar> BoundAttention<E> {
    pub fn d_h(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn head_width(&self) -> usize {
        self.d_h() / self.n_heads
    }
}

/// Trainable relative positional embeddings of one layer, shared by all of
/// its heads. Column `j` of a table encodes relative position
/// `j - (l_k_max - 1)`, so positions span `[-l_k_max+1, l_k_max-1]`.
///
/// The key-side table always exists; the optional value-side table is a
/// second, separately trained table (the value variant builds on the key
/// variant, never replaces it).
#[derive(Clone)]
pub struct RelativeEmbedding<E: Scalar> {
    pub e_key: StridedTensor<E>,
    pub e_value: Option<StridedTensor<E>>,
    pub l_k_max: usize,
}

impl<E: Scalar> RelativeEmbedding<E> {
    pub fn new(
        e_key: StridedTensor<E>,
        e_value: Option<StridedTensor<E>>,
        l_k_max: usize,
    ) -> Result<Self> {
        let (_, w) = e_key.dims2("relative embedding table")?;
        if l_k_max == 0 || w != 2 * l_k_max - 1 {
            return Err(Error::Dimension(format!(
                "embedding table has {w} columns, expected 2*{l_k_max}-1"
            )));
        }
        if let Some(ev) = &e_value {
            if ev.shape() != e_key.shape() {
                return Err(Error::Dimension(format!(
                    "value table {:?} differs from key table {:?}",
                    ev.shape(),
                    e_key.shape()
                )));
            }
        }
        Ok(Self { e_key, e_value, l_k_max })
    }

    pub fn add_to_key(&self) -> bool {
        true
    }

    pub fn add_to_value(&self) -> bool {
        self.e_value.is_some()
    }

    pub fn bind(&self, tape: &Tape<E>, trainable: bool) -> BoundRelEmbedding<E> {
        self.bind_with(&crate::autodiff::Binder::new(tape, trainable))
    }

    pub fn bind_with(&self, binder: &crate::autodiff::Binder<'_, E>) -> BoundRelEmbedding<E> {
        BoundRelEmbedding {
            e_key: binder.var(&self.e_key),
            e_value: self.e_value.as_ref().map(|e| binder.var(e)),
            l_k_max: self.l_k_max,
        }
    }
}

/// [`RelativeEmbedding`] registered on a tape.
#[derive(Clone)]
pub struct BoundRelEmbedding<E: Scalar> {
    pub e_key: Var<E>,
    pub e_value: Option<Var<E>>,
    pub l_k_max: usize,
}

/// Boolean attend-allowed matrix, `[l_q, l_k]`. Construction fails if any
/// query row allows nothing (its softmax would be undefined).
#[derive(Clone)]
pub struct AttentionMask {
    allowed: Vec<bool>,
    l_q: usize,
    l_k: usize,
}

impl AttentionMask {
    pub fn from_fn(l_q: usize, l_k: usize, pred: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let mut allowed = vec![false; l_q * l_k];
        for i in 0..l_q {
            let mut any = false;
            for j in 0..l_k {
                let a = pred(i, j);
                allowed[i * l_k + j] = a;
                any |= a;
            }
            if !any {
                return Err(Error::Mask(format!(
                    "query row {i} of a {l_q}x{l_k} mask allows no keys"
                )));
            }
        }
        Ok(Self { allowed, l_q, l_k })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.l_q, self.l_k)
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.l_k + j]
    }

    /// Additive form: 0 where allowed, -1e30 where not. Applied after score
    /// scaling, before softmax; the -1e30 entries underflow to exactly zero
    /// attention weight.
    pub fn addend<E: Scalar>(&self) -> StridedTensor<E> {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { E::ZERO } else { E::from_f64(-1e30) })
            .collect();
        StridedTensor::from_shape_vec(&[self.l_q, self.l_k], data).expect("shape matches")
    }
}

/// Q, K, V projections of a shared input (`q = w_q·x` and so on).
pub fn project_qkv<E: Scalar>(
    tape: &Tape<E>,
    x: &Var<E>,
    params: &BoundAttention<E>,
) -> Result<(Var<E>, Var<E>, Var<E>)> {
    let q = tape.matmul(&params.w_q, x)?;
    let k = tape.matmul(&params.w_k, x)?;
    let v = if params.tie_kv { k.clone() } else { tape.matmul(&params.w_v, x)? };
    Ok((q, k, v))
}

fn check_attend_shapes<E: Scalar>(
    q: &Var<E>,
    k: &Var<E>,
    v: &Var<E>,
    mask: Option<&AttentionMask>,
) -> Result<(usize, usize, usize)> {
    let (d, l_q) = q.value().dims2("attend q")?;
    let (dk, l_k) = k.value().dims2("attend k")?;
    let (dv, l_v) = v.value().dims2("attend v")?;
    if dk != d || dv != d {
        return Err(Error::Dimension(format!(
            "attend: widths disagree: q {d}, k {dk}, v {dv}"
        )));
    }
    if l_v != l_k {
        return Err(Error::Dimension(format!(
            "attend: key length {l_k} != value length {l_v}"
        )));
    }
    if let Some(m) = mask {
        if m.dims() != (l_q, l_k) {
            return Err(Error::Mask(format!(
                "mask is {:?}, scores are ({l_q}, {l_k})",
                m.dims()
            )));
        }
    }
    Ok((d, l_q, l_k))
}

/// Scaled dot-product attention over already-projected tensors.
///
/// `h[:, i] = v · softmax((qᵀk)[i] / sqrt(d))`, where `d` is the width of
/// `q` — the per-head width when called per head. Masked score entries are
/// pushed to -1e30 before the softmax.
pub fn attend<E: Scalar>(
    tape: &Tape<E>,
    q: &Var<E>,
    k: &Var<E>,
    v: &Var<E>,
    mask: Option<&AttentionMask>,
) -> Result<Var<E>> {
    let (d, l_q, l_k) = check_attend_shapes(q, k, v, mask)?;
    note_score_alloc(l_q * l_k, E::DTYPE.byte_width());
    let scores = tape.matmul(&tape.transpose(q)?, k)?;
    let scaled = tape.mul_scalar(&scores, E::from_f64(1.0 / (d as f64).sqrt()));
    let masked = match mask {
        Some(m) => tape.add(&scaled, &tape.constant(m.addend()))?,
        None => scaled,
    };
    let a = tape.softmax_rows(&masked)?;
    tape.matmul(v, &tape.transpose(&a)?)
}

/// Zero-copy rearrangement of relative-position scores.
///
/// Input `m` is `[l_q, 2·l_k-1]`, contiguous row-major, column `c` holding
/// the score for relative position `c - (l_k - 1)`. The result is the
/// `[l_q, l_k]` view with `out[i][j] = m[i][(l_q-1-i)+j]`: the view's offset
/// advances to element `(0, l_q-1)` and its row stride shrinks to
/// `2·l_k-2`, so each row starts one cell left of the row above. No element
/// is copied; the view aliases `m`'s buffer.
pub fn rel_shift<E: Scalar>(m: &StridedTensor<E>) -> Result<StridedTensor<E>> {
    let (l_q, width) = m.dims2("rel_shift")?;
    if !m.is_contiguous() {
        return Err(Error::Usage(
            "rel_shift requires a contiguous row-major input; call to_contiguous first".into(),
        ));
    }
    if width % 2 == 0 {
        return Err(Error::Dimension(format!(
            "rel_shift: width {width} is not of the form 2*l_k-1"
        )));
    }
    let l_k = (width + 1) / 2;
    if l_q > l_k {
        return Err(Error::Usage(format!(
            "rel_shift: unsupported geometry l_q {l_q} > l_k {l_k}"
        )));
    }
    m.view(&[l_q, l_k], &[2 * l_k as isize - 2, 1], m.offset() + (l_q - 1))
}

/// Scatter inverse of [`rel_shift`]: places `a[i][j]` at column
/// `(l_q-1-i)+j` of a zero-filled `[l_q, 2·l_k-1]` output, so
/// `rel_shift(rel_unshift(a)) == a` exactly.
pub fn rel_unshift<E: Scalar>(a: &StridedTensor<E>) -> Result<StridedTensor<E>> {
    let (l_q, l_k) = a.dims2("rel_unshift")?;
    if l_q > l_k {
        return Err(Error::Usage(format!(
            "rel_unshift: unsupported geometry l_q {l_q} > l_k {l_k}"
        )));
    }
    let width = 2 * l_k - 1;
    let av = a.to_vec();
    let mut out = vec![E::ZERO; l_q * width];
    for i in 0..l_q {
        let base = l_q - 1 - i;
        for j in 0..l_k {
            out[i * width + base + j] = av[i * l_k + j];
        }
    }
    StridedTensor::from_shape_vec(&[l_q, width], out)
}

/// Attention with trainable relative positional embeddings.
///
/// Scores gain `qᵢᵀ·E[:, rel(i,j)]` before scaling; with a value-side table
/// the output gains `Σⱼ a₍ᵢⱼ₎·E_v[:, rel(i,j)]`. Relative position is
/// measured from query `i` (sitting at extended-key position
/// `l_k - l_q + i`) to key `j`. The embedding window is the central
/// `2·l_k-1` columns of each table, so position 0 stays at the middle.
pub fn attend_relative<E: Scalar>(
    tape: &Tape<E>,
    q: &Var<E>,
    k: &Var<E>,
    v: &Var<E>,
    emb: &BoundRelEmbedding<E>,
    mask: Option<&AttentionMask>,
) -> Result<Var<E>> {
    let (d, l_q, l_k) = check_attend_shapes(q, k, v, mask)?;
    if l_k > emb.l_k_max {
        return Err(Error::Capacity(format!(
            "extended key length {l_k} exceeds embedding capacity {}",
            emb.l_k_max
        )));
    }
    let (ed, _) = emb.e_key.value().dims2("e_key")?;
    if ed != d {
        return Err(Error::Dimension(format!(
            "embedding width {ed} != attention width {d}"
        )));
    }
    if l_q > l_k {
        return Err(Error::Usage(format!(
            "attend_relative: query longer than extended key ({l_q} > {l_k})"
        )));
    }
    note_score_alloc(l_q * (2 * l_k - 1), E::DTYPE.byte_width());
    let window = (emb.l_k_max - l_k)..(emb.l_k_max + l_k - 1);
    let qt = tape.transpose(q)?;

    let e_key_win = tape.slice_cols(&emb.e_key, window.clone())?;
    // matmul output is freshly allocated, so the shift's contiguity
    // precondition holds by construction.
    let m = tape.matmul(&qt, &e_key_win)?;
    let rel_scores = tape.rel_shift(&m)?;

    let content = tape.matmul(&qt, k)?;
    let scores = tape.add(&content, &rel_scores)?;
    let scaled = tape.mul_scalar(&scores, E::from_f64(1.0 / (d as f64).sqrt()));
    let masked = match mask {
        Some(mk) => tape.add(&scaled, &tape.constant(mk.addend()))?,
        None => scaled,
    };
    let a = tape.softmax_rows(&masked)?;
    let mut h = tape.matmul(v, &tape.transpose(&a)?)?;
    if let Some(e_value) = &emb.e_value {
        let e_val_win = tape.slice_cols(e_value, window)?;
        let spread = tape.rel_unshift(&a)?;
        let value_add = tape.matmul(&e_val_win, &tape.transpose(&spread)?)?;
        h = tape.add(&h, &value_add)?;
    }
    Ok(h)
}

/// Multi-head attention from raw inputs.
///
/// `x_q` supplies the queries, `x_kv` (possibly a longer spliced window)
/// supplies keys and values. Heads partition the projected rows; each head
/// runs [`attend`] or [`attend_relative`] with the shared per-layer
/// embedding, and the concatenated heads pass through `w_o` when present.
pub fn multi_head_attend<E: Scalar>(
    tape: &Tape<E>,
    x_q: &Var<E>,
    x_kv: &Var<E>,
    params: &BoundAttention<E>,
    emb: Option<&BoundRelEmbedding<E>>,
    mask: Option<&AttentionMask>,
) -> Result<Var<E>> {
    let q = tape.matmul(&params.w_q, x_q)?;
    let k = tape.matmul(&params.w_k, x_kv)?;
    let v = if params.tie_kv { k.clone() } else { tape.matmul(&params.w_v, x_kv)? };
    let out = multi_head_attend_extended(tape, &q, &k, &v, params, emb, mask, None)?;
    Ok(out.mixed)
}

/// Result of a multi-head pass: the concatenated per-head output (the state
/// a same-layer cache stores) and the `w_o`-mixed output.
pub struct MultiHeadOutput<E: Scalar> {
    /// Concatenated heads, `[d_h, l_q]`, before the output projection.
    pub heads_concat: Var<E>,
    /// After `w_o` when present, otherwise identical to `heads_concat`.
    pub mixed: Var<E>,
}

/// Multi-head attention over already-projected (and possibly cache-extended)
/// `q`, `k`, `v`. `head_order` only changes the order heads are computed in,
/// never the output layout; it exists so head independence is testable.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attend_extended<E: Scalar>(
    tape: &Tape<E>,
    q: &Var<E>,
    k: &Var<E>,
    v: &Var<E>,
    params: &BoundAttention<E>,
    emb: Option<&BoundRelEmbedding<E>>,
    mask: Option<&AttentionMask>,
    head_order: Option<&[usize]>,
) -> Result<MultiHeadOutput<E>> {
    let d_h = params.d_h();
    let n_heads = params.n_heads;
    let w = params.head_width();
    if q.shape()[0] != d_h {
        return Err(Error::Dimension(format!(
            "projected q width {} != d_h {d_h}",
            q.shape()[0]
        )));
    }
    let natural: Vec<usize> = (0..n_heads).collect();
    let order = head_order.unwrap_or(&natural);
    if order.len() != n_heads {
        return Err(Error::Usage(format!(
            "head order lists {} heads, model has {n_heads}",
            order.len()
        )));
    }
    let mut per_head: Vec<Option<Var<E>>> = vec![None; n_heads];
    for &h in order {
        let rows = h * w..(h + 1) * w;
        let qh = tape.slice_rows(q, rows.clone())?;
        let kh = tape.slice_rows(k, rows.clone())?;
        let vh = tape.slice_rows(v, rows)?;
        let out = match emb {
            Some(e) => attend_relative(tape, &qh, &kh, &vh, e, mask)?,
            None => attend(tape, &qh, &kh, &vh, mask)?,
        };
        per_head[h] = Some(out);
    }
    let mut heads_concat = per_head[0].take().expect("head 0 computed");
    for slot in per_head.iter_mut().skip(1) {
        heads_concat = tape.concat_rows(&heads_concat, &slot.take().expect("head computed"))?;
    }
    let mixed = match &params.w_o {
        Some(w_o) => tape.matmul(w_o, &heads_concat)?,
        None => heads_concat.clone(),
    };
    Ok(MultiHeadOutput { heads_concat, mixed })
}
