//! Forward pass, activation caches, and hand-written reverse-mode backward
//! pass for the toy masked autoencoder.
//!
//! Layout conventions: activations are `(batch, len, dim)` flattened row-major
//! and treated as `batch*len` rows wherever an op is row-wise. Weight matrices
//! are `(out_dim, in_dim)` row-major, so `y = x W^T + b`.

use crate::masking::{AttnBias, KeyBias};
use crate::model::{LayerIdx, ModelBatch, ModelError, ToyMaeModel};

const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm cache: normalized rows and reciprocal stddevs.
pub(crate) struct NormCache {
    pub normed: Vec<f64>,
    pub rstd: Vec<f64>,
    pub out: Vec<f64>,
}

pub(crate) struct BlockCache {
    pub ln1: NormCache,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Attention weights `(batch, heads, len, len)`; masked keys hold exact 0.
    pub attw: Vec<f64>,
    pub ctx: Vec<f64>,
    pub ln2: NormCache,
    pub u: Vec<f64>,
    pub act: Vec<f64>,
}

pub(crate) struct ForwardCache {
    pub enc_blocks: Vec<BlockCache>,
    pub enc_norm: NormCache,
    pub dec_blocks: Vec<BlockCache>,
    pub dec_norm: NormCache,
    pub recon: Vec<f64>,
    pub loss: f64,
    pub n_loss_elems: usize,
}

/// `out[r, :] = b + x[r, :] W^T`
fn linear_fwd(x: &[f64], w: &[f64], b: &[f64], rows: usize, din: usize, dout: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        let xr = &x[r * din..(r + 1) * din];
        let or = &mut out[r * dout..(r + 1) * dout];
        for (o, out_v) in or.iter_mut().enumerate() {
            let wr = &w[o * din..(o + 1) * din];
            let mut acc = b[o];
            for i in 0..din {
                acc += xr[i] * wr[i];
            }
            *out_v = acc;
        }
    }
    out
}

/// Accumulates `dw`, `db`, and (optionally) `dx` for a linear layer.
#[allow(clippy::too_many_arguments)]
fn linear_bwd(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    rows: usize,
    din: usize,
    dout: usize,
    dw: &mut [f64],
    db: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    for r in 0..rows {
        let dyr = &dy[r * dout..(r + 1) * dout];
        let xr = &x[r * din..(r + 1) * din];
        for o in 0..dout {
            let g = dyr[o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let dwr = &mut dw[o * din..(o + 1) * din];
            for i in 0..din {
                dwr[i] += g * xr[i];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxr = &mut dx[r * din..(r + 1) * din];
            for o in 0..dout {
                let g = dyr[o];
                if g == 0.0 {
                    continue;
                }
                let wr = &w[o * din..(o + 1) * din];
                for i in 0..din {
                    dxr[i] += g * wr[i];
                }
            }
        }
    }
}

fn layernorm_fwd(x: &[f64], g: &[f64], b: &[f64], rows: usize, dim: usize) -> NormCache {
    let mut normed = vec![0.0; rows * dim];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; rows * dim];
    for r in 0..rows {
        let xr = &x[r * dim..(r + 1) * dim];
        let mean = xr.iter().sum::<f64>() / dim as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = rs;
        for i in 0..dim {
            let n = (xr[i] - mean) * rs;
            normed[r * dim + i] = n;
            out[r * dim + i] = g[i] * n + b[i];
        }
    }
    NormCache { normed, rstd, out }
}

/// Backward through layer norm; accumulates into `dg`, `db`, and `dx`.
#[allow(clippy::too_many_arguments)]
fn layernorm_bwd(
    dout: &[f64],
    cache: &NormCache,
    g: &[f64],
    rows: usize,
    dim: usize,
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    for r in 0..rows {
        let dor = &dout[r * dim..(r + 1) * dim];
        let nr = &cache.normed[r * dim..(r + 1) * dim];
        let mut mean_dn = 0.0;
        let mut mean_dnn = 0.0;
        for i in 0..dim {
            let dn = dor[i] * g[i];
            mean_dn += dn;
            mean_dnn += dn * nr[i];
            dg[i] += dor[i] * nr[i];
            db[i] += dor[i];
        }
        mean_dn /= dim as f64;
        mean_dnn /= dim as f64;
        let rs = cache.rstd[r];
        for i in 0..dim {
            let dn = dor[i] * g[i];
            dx[r * dim + i] += rs * (dn - mean_dn - nr[i] * mean_dnn);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
fn gelu_grad(u: f64) -> f64 {
    let z = GELU_C * (u + GELU_A * u * u * u);
    let t = z.tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Multi-head scaled dot-product attention with additive key masking.
///
/// Writes the concatenated per-head context into `ctx` and, when requested,
/// the attention weights into `attw` (shape `(batch, heads, len, len)`).
/// Softmax subtracts the row max, so a key biased by `NEG_BIAS` underflows to
/// weight exactly 0.0.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_core(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    batch: usize,
    len: usize,
    dim: usize,
    heads: usize,
    bias: &KeyBias,
    ctx: &mut [f64],
    mut attw: Option<&mut [f64]>,
) {
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut row = vec![0.0; len];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * hd;
            for i in 0..len {
                let qi = &q[(b * len + i) * dim + off..(b * len + i) * dim + off + hd];
                let mut max_logit = f64::NEG_INFINITY;
                for (j, slot) in row.iter_mut().enumerate() {
                    let kj = &k[(b * len + j) * dim + off..(b * len + j) * dim + off + hd];
                    let mut s = 0.0;
                    for d in 0..hd {
                        s += qi[d] * kj[d];
                    }
                    let logit = s * scale + bias.bias(b, j);
                    *slot = logit;
                    if logit > max_logit {
                        max_logit = logit;
                    }
                }
                let mut denom = 0.0;
                for slot in row.iter_mut() {
                    let e = (*slot - max_logit).exp();
                    *slot = e;
                    denom += e;
                }
                let ctx_i = &mut ctx[(b * len + i) * dim + off..(b * len + i) * dim + off + hd];
                ctx_i.fill(0.0);
                for (j, slot) in row.iter_mut().enumerate() {
                    let w = *slot / denom;
                    *slot = w;
                    if w != 0.0 {
                        let vj = &v[(b * len + j) * dim + off..(b * len + j) * dim + off + hd];
                        for d in 0..hd {
                            ctx_i[d] += w * vj[d];
                        }
                    }
                }
                if let Some(attw) = attw.as_deref_mut() {
                    let base = ((b * heads + h) * len + i) * len;
                    attw[base..base + len].copy_from_slice(&row);
                }
            }
        }
    }
}

/// Backward through [`attention_core`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
fn attention_bwd(
    dctx: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    attw: &[f64],
    batch: usize,
    len: usize,
    dim: usize,
    heads: usize,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dw = vec![0.0; len];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * hd;
            for i in 0..len {
                let dctx_i = &dctx[(b * len + i) * dim + off..(b * len + i) * dim + off + hd];
                let w_row = &attw[((b * heads + h) * len + i) * len..((b * heads + h) * len + i) * len + len];
                // dv and dW
                let mut wdw_sum = 0.0;
                for j in 0..len {
                    let w = w_row[j];
                    let mut acc = 0.0;
                    let vj = &v[(b * len + j) * dim + off..(b * len + j) * dim + off + hd];
                    for d in 0..hd {
                        acc += dctx_i[d] * vj[d];
                    }
                    dw[j] = acc;
                    wdw_sum += w * acc;
                    if w != 0.0 {
                        let dvj = &mut dv[(b * len + j) * dim + off..(b * len + j) * dim + off + hd];
                        for d in 0..hd {
                            dvj[d] += w * dctx_i[d];
                        }
                    }
                }
                // softmax backward, then into q and k
                let qi = &q[(b * len + i) * dim + off..(b * len + i) * dim + off + hd];
                let dqi_base = (b * len + i) * dim + off;
                for j in 0..len {
                    let w = w_row[j];
                    if w == 0.0 {
                        continue; // masked or underflowed key: no gradient
                    }
                    let ds = w * (dw[j] - wdw_sum) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &k[(b * len + j) * dim + off..(b * len + j) * dim + off + hd];
                    let dkj = &mut dk[(b * len + j) * dim + off..(b * len + j) * dim + off + hd];
                    for d in 0..hd {
                        dkj[d] += ds * qi[d];
                    }
                    let dqi = &mut dq[dqi_base..dqi_base + hd];
                    for d in 0..hd {
                        dqi[d] += ds * kj[d];
                    }
                }
            }
        }
    }
}

fn block_fwd(
    model: &ToyMaeModel,
    layer: &LayerIdx,
    x: &[f64],
    rows: usize,
    batch: usize,
    len: usize,
    bias: &KeyBias,
) -> (BlockCache, Vec<f64>) {
    let d = model.config().embed_dim;
    let hdim = model.config().hidden_dim();
    let heads = model.config().heads;

    let ln1 = layernorm_fwd(x, model.block(layer.ln1_g), model.block(layer.ln1_b), rows, d);
    let q = linear_fwd(&ln1.out, model.block(layer.wq), model.block(layer.bq), rows, d, d);
    let k = linear_fwd(&ln1.out, model.block(layer.wk), model.block(layer.bk), rows, d, d);
    let v = linear_fwd(&ln1.out, model.block(layer.wv), model.block(layer.bv), rows, d, d);
    let mut ctx = vec![0.0; rows * d];
    let mut attw = vec![0.0; batch * heads * len * len];
    attention_core(&q, &k, &v, batch, len, d, heads, bias, &mut ctx, Some(&mut attw));
    let o = linear_fwd(&ctx, model.block(layer.wo), model.block(layer.bo), rows, d, d);
    let mut h = x.to_vec();
    for (hv, ov) in h.iter_mut().zip(o.iter()) {
        *hv += ov;
    }
    let ln2 = layernorm_fwd(&h, model.block(layer.ln2_g), model.block(layer.ln2_b), rows, d);
    let u = linear_fwd(&ln2.out, model.block(layer.w1), model.block(layer.b1), rows, d, hdim);
    let act: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
    let m = linear_fwd(&act, model.block(layer.w2), model.block(layer.b2), rows, hdim, d);
    let mut y = h;
    for (yv, mv) in y.iter_mut().zip(m.iter()) {
        *yv += mv;
    }
    let cache = BlockCache {
        ln1,
        q,
        k,
        v,
        attw,
        ctx,
        ln2,
        u,
        act,
    };
    (cache, y)
}

/// Two disjoint mutable block slices of the flat gradient vector.
fn two_mut<'a>(
    grads: &'a mut [f64],
    model: &ToyMaeModel,
    first: usize,
    second: usize,
) -> (&'a mut [f64], &'a mut [f64]) {
    let r1 = model.layout().range(first);
    let r2 = model.layout().range(second);
    assert!(r1.end <= r2.start, "gradient blocks must be laid out in order");
    let (left, right) = grads.split_at_mut(r2.start);
    (&mut left[r1], &mut right[..r2.end - r2.start])
}

#[allow(clippy::too_many_arguments)]
fn block_bwd(
    model: &ToyMaeModel,
    layer: &LayerIdx,
    cache: &BlockCache,
    dy: &[f64],
    rows: usize,
    batch: usize,
    len: usize,
    grads: &mut [f64],
) -> Vec<f64> {
    let d = model.config().embed_dim;
    let hdim = model.config().hidden_dim();
    let heads = model.config().heads;

    // y = h + W2 gelu(W1 ln2(h) + b1) + b2
    let mut du = vec![0.0; rows * hdim];
    {
        // da = dy W2, via dx side of linear backward
        let (dw2, db2) = two_mut(grads, model, layer.w2, layer.b2);
        let mut da = vec![0.0; rows * hdim];
        linear_bwd(dy, &cache.act, model.block(layer.w2), rows, hdim, d, dw2, db2, Some(&mut da));
        for i in 0..rows * hdim {
            du[i] = da[i] * gelu_grad(cache.u[i]);
        }
    }
    let mut dln2out = vec![0.0; rows * d];
    {
        let (dw1, db1) = two_mut(grads, model, layer.w1, layer.b1);
        linear_bwd(&du, &cache.ln2.out, model.block(layer.w1), rows, d, hdim, dw1, db1, Some(&mut dln2out));
    }
    let mut dh = dy.to_vec();
    {
        let (dg2, db2) = two_mut(grads, model, layer.ln2_g, layer.ln2_b);
        layernorm_bwd(&dln2out, &cache.ln2, model.block(layer.ln2_g), rows, d, dg2, db2, &mut dh);
    }

    // h = x + Wo ctx + bo
    let mut dctx = vec![0.0; rows * d];
    {
        let (dwo, dbo) = two_mut(grads, model, layer.wo, layer.bo);
        linear_bwd(&dh, &cache.ctx, model.block(layer.wo), rows, d, d, dwo, dbo, Some(&mut dctx));
    }
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];
    attention_bwd(
        &dctx, &cache.q, &cache.k, &cache.v, &cache.attw, batch, len, d, heads, &mut dq, &mut dk,
        &mut dv,
    );
    let mut dln1out = vec![0.0; rows * d];
    {
        let (dwq, dbq) = two_mut(grads, model, layer.wq, layer.bq);
        linear_bwd(&dq, &cache.ln1.out, model.block(layer.wq), rows, d, d, dwq, dbq, Some(&mut dln1out));
    }
    {
        let (dwk, dbk) = two_mut(grads, model, layer.wk, layer.bk);
        linear_bwd(&dk, &cache.ln1.out, model.block(layer.wk), rows, d, d, dwk, dbk, Some(&mut dln1out));
    }
    {
        let (dwv, dbv) = two_mut(grads, model, layer.wv, layer.bv);
        linear_bwd(&dv, &cache.ln1.out, model.block(layer.wv), rows, d, d, dwv, dbv, Some(&mut dln1out));
    }
    let mut dx = dh;
    {
        let (dg1, db1) = two_mut(grads, model, layer.ln1_g, layer.ln1_b);
        layernorm_bwd(&dln1out, &cache.ln1, model.block(layer.ln1_g), rows, d, dg1, db1, &mut dx);
    }
    dx
}

pub(crate) fn forward(
    model: &ToyMaeModel,
    batch: &ModelBatch,
    bias: &AttnBias,
) -> Result<ForwardCache, ModelError> {
    let cfg = model.config();
    if batch.token_dim != cfg.token_dim {
        return Err(ModelError::Shape(format!(
            "batch token_dim {} but model expects {}",
            batch.token_dim, cfg.token_dim
        )));
    }
    if bias.batch() != batch.batch || bias.len() != batch.len {
        return Err(ModelError::Shape(format!(
            "attention bias is ({}, {}) but batch is ({}, {})",
            bias.batch(),
            bias.len(),
            batch.batch,
            batch.len
        )));
    }
    for (b, grid) in batch.grids.iter().enumerate() {
        if grid.time > cfg.max_time_patches
            || grid.freq > cfg.max_freq_patches
            || grid.antenna > cfg.max_antenna_patches
        {
            return Err(ModelError::Shape(format!(
                "sample {b} grid {grid:?} exceeds positional table maxima"
            )));
        }
        if grid.len() != batch.valid_lens[b] || batch.valid_lens[b] > batch.len {
            return Err(ModelError::Shape(format!(
                "sample {b}: grid/valid/padded lengths inconsistent"
            )));
        }
    }
    for b in 0..batch.batch {
        for l in batch.valid_lens[b]..batch.len {
            if batch.hidden[b * batch.len + l] {
                return Err(ModelError::Shape(format!(
                    "sample {b} marks padding position {l} as MAE-hidden"
                )));
            }
        }
    }
    if !batch.tokens.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFiniteInput("batch tokens".into()));
    }

    let d = cfg.embed_dim;
    let rows = batch.batch * batch.len;
    let enc_bias = KeyBias::encoder(bias, &batch.hidden)?;
    let dec_bias = KeyBias::from_attn_bias(bias);

    // Patch embedding plus factorized positional embeddings at valid rows.
    let mut emb = linear_fwd(
        &batch.tokens,
        model.block(model.idx.patch_w),
        model.block(model.idx.patch_b),
        rows,
        cfg.token_dim,
        d,
    );
    let pos_t = model.block(model.idx.pos_time);
    let pos_k = model.block(model.idx.pos_freq);
    let pos_a = model.block(model.idx.pos_antenna);
    for b in 0..batch.batch {
        for l in 0..batch.valid_lens[b] {
            let (t, k, a) = batch.grids[b].coords(l);
            let row = &mut emb[(b * batch.len + l) * d..(b * batch.len + l + 1) * d];
            for i in 0..d {
                row[i] += pos_t[t * d + i] + pos_k[k * d + i] + pos_a[a * d + i];
            }
        }
    }

    let mut enc_blocks = Vec::with_capacity(cfg.encoder_depth);
    let mut x = emb;
    for layer in &model.idx.enc {
        let (cache, y) = block_fwd(model, layer, &x, rows, batch.batch, batch.len, &enc_bias);
        x = y;
        enc_blocks.push(cache);
    }
    let enc_norm = layernorm_fwd(
        &x,
        model.block(model.idx.enc_norm_g),
        model.block(model.idx.enc_norm_b),
        rows,
        d,
    );

    // Decoder input: encoder output at visible valid positions, the mask
    // token elsewhere (hidden and padded); positional embeddings re-added at
    // valid positions.
    let mask_token = model.block(model.idx.mask_token);
    let mut dec_in = vec![0.0; rows * d];
    for b in 0..batch.batch {
        for l in 0..batch.len {
            let r = b * batch.len + l;
            let valid = l < batch.valid_lens[b];
            let visible = valid && !batch.hidden[r];
            let dst = &mut dec_in[r * d..(r + 1) * d];
            if visible {
                dst.copy_from_slice(&enc_norm.out[r * d..(r + 1) * d]);
            } else {
                dst.copy_from_slice(mask_token);
            }
            if valid {
                let (t, k, a) = batch.grids[b].coords(l);
                for i in 0..d {
                    dst[i] += pos_t[t * d + i] + pos_k[k * d + i] + pos_a[a * d + i];
                }
            }
        }
    }

    let mut dec_blocks = Vec::with_capacity(cfg.decoder_depth);
    let mut z = dec_in;
    for layer in &model.idx.dec {
        let (cache, y) = block_fwd(model, layer, &z, rows, batch.batch, batch.len, &dec_bias);
        z = y;
        dec_blocks.push(cache);
    }
    let dec_norm = layernorm_fwd(
        &z,
        model.block(model.idx.dec_norm_g),
        model.block(model.idx.dec_norm_b),
        rows,
        d,
    );
    let recon = linear_fwd(
        &dec_norm.out,
        model.block(model.idx.head_w),
        model.block(model.idx.head_b),
        rows,
        d,
        cfg.token_dim,
    );

    // Masked reconstruction loss over hidden (and therefore valid) elements.
    let c = cfg.token_dim;
    let n_loss_elems = batch.hidden_count() * c;
    let mut ss = 0.0;
    if n_loss_elems > 0 {
        for r in 0..rows {
            if batch.hidden[r] {
                for i in 0..c {
                    let diff = recon[r * c + i] - batch.tokens[r * c + i];
                    ss += diff * diff;
                }
            }
        }
    }
    let loss = if n_loss_elems > 0 {
        ss / n_loss_elems as f64
    } else {
        0.0
    };

    Ok(ForwardCache {
        enc_blocks,
        enc_norm,
        dec_blocks,
        dec_norm,
        recon,
        loss,
        n_loss_elems,
    })
}

pub(crate) fn backward(model: &ToyMaeModel, batch: &ModelBatch, cache: &ForwardCache) -> Vec<f64> {
    let cfg = model.config();
    let d = cfg.embed_dim;
    let c = cfg.token_dim;
    let rows = batch.batch * batch.len;
    let mut grads = vec![0.0; model.layout().total()];

    // Loss -> reconstruction head input.
    let mut drecon = vec![0.0; rows * c];
    if cache.n_loss_elems > 0 {
        let scale = 2.0 / cache.n_loss_elems as f64;
        for r in 0..rows {
            if batch.hidden[r] {
                for i in 0..c {
                    drecon[r * c + i] = scale * (cache.recon[r * c + i] - batch.tokens[r * c + i]);
                }
            }
        }
    }
    let mut ddec_norm_out = vec![0.0; rows * d];
    {
        let (dw, db) = two_mut(&mut grads, model, model.idx.head_w, model.idx.head_b);
        linear_bwd(&drecon, &cache.dec_norm.out, model.block(model.idx.head_w), rows, d, c, dw, db, Some(&mut ddec_norm_out));
    }
    let mut dz = vec![0.0; rows * d];
    {
        let (dg, db) = two_mut(&mut grads, model, model.idx.dec_norm_g, model.idx.dec_norm_b);
        layernorm_bwd(&ddec_norm_out, &cache.dec_norm, model.block(model.idx.dec_norm_g), rows, d, dg, db, &mut dz);
    }
    for (layer, bc) in model.idx.dec.iter().zip(cache.dec_blocks.iter()).rev() {
        dz = block_bwd(model, layer, bc, &dz, rows, batch.batch, batch.len, &mut grads);
    }
    let ddec_in = dz;

    // Decoder input scatter: positional embeddings at valid rows, then the
    // base term (encoder output at visible rows, mask token elsewhere).
    accumulate_pos_grads(model, batch, &ddec_in, &mut grads);
    let mut denc_norm_out = vec![0.0; rows * d];
    {
        let dmask = &mut grads[model.layout().range(model.idx.mask_token)];
        for b in 0..batch.batch {
            for l in 0..batch.len {
                let r = b * batch.len + l;
                let visible = l < batch.valid_lens[b] && !batch.hidden[r];
                let src = &ddec_in[r * d..(r + 1) * d];
                if visible {
                    denc_norm_out[r * d..(r + 1) * d].copy_from_slice(src);
                } else {
                    for i in 0..d {
                        dmask[i] += src[i];
                    }
                }
            }
        }
    }

    let mut dx = vec![0.0; rows * d];
    {
        let (dg, db) = two_mut(&mut grads, model, model.idx.enc_norm_g, model.idx.enc_norm_b);
        layernorm_bwd(&denc_norm_out, &cache.enc_norm, model.block(model.idx.enc_norm_g), rows, d, dg, db, &mut dx);
    }
    for (layer, bc) in model.idx.enc.iter().zip(cache.enc_blocks.iter()).rev() {
        dx = block_bwd(model, layer, bc, &dx, rows, batch.batch, batch.len, &mut grads);
    }
    let demb = dx;

    // Embedding stage: positional tables at valid rows plus the patch
    // projection (input gradients are not needed).
    accumulate_pos_grads(model, batch, &demb, &mut grads);
    {
        let (dw, db) = two_mut(&mut grads, model, model.idx.patch_w, model.idx.patch_b);
        linear_bwd(&demb, &batch.tokens, model.block(model.idx.patch_w), rows, cfg.token_dim, d, dw, db, None);
    }
    grads
}

/// Adds `dsum[r]` into the three positional tables at each valid row's
/// grid coordinates.
fn accumulate_pos_grads(model: &ToyMaeModel, batch: &ModelBatch, dsum: &[f64], grads: &mut [f64]) {
    let d = model.config().embed_dim;
    for (axis, block) in [
        (0usize, model.idx.pos_time),
        (1, model.idx.pos_freq),
        (2, model.idx.pos_antenna),
    ] {
        let table = &mut grads[model.layout().range(block)];
        for b in 0..batch.batch {
            for l in 0..batch.valid_lens[b] {
                let (t, k, a) = batch.grids[b].coords(l);
                let coord = match axis {
                    0 => t,
                    1 => k,
                    _ => a,
                };
                let src = &dsum[(b * batch.len + l) * d..(b * batch.len + l + 1) * d];
                let dst = &mut table[coord * d..(coord + 1) * d];
                for i in 0..d {
                    dst[i] += src[i];
                }
            }
        }
    }
}
