//! Forward pass of the joint encoder, built on the autodiff tape.
//!
//! Every function here takes the tape plus bound parameter vars so the
//! same code path serves training (with backward), inference, and the
//! f64 gradient check.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Ablation, Batch, ModelError, ModelParams, Pooling, ViltConfig};
use crate::rng::RngStream;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::{Mode, NamedTensors, Scalar, Tensor};

/// Model parameters registered as tape leaves.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind<S: Scalar>(
        tape: &mut Tape<S>,
        params: &ModelParams<S>,
        requires_grad: bool,
    ) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t, requires_grad)))
            .collect();
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Collect gradients for every bound parameter after a backward pass.
    pub fn grads<S: Scalar>(
        &self,
        params: &ModelParams<S>,
        grads: &Grads<S>,
    ) -> NamedTensors<S> {
        self.vars
            .iter()
            .map(|(name, &var)| {
                let shape = params.tensors()[name].shape().to_vec();
                let g = grads
                    .get(var)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![S::zero(); params.tensors()[name].len()]);
                (
                    name.clone(),
                    Tensor::new(shape, g).expect("gradient buffer matches parameter shape"),
                )
            })
            .collect()
    }
}

/// Cut images into non-overlapping patches (row-major over the patch
/// grid, each patch flattened in row, column, channel order) and project
/// them to the hidden dimension. Returns `[B, N_img, D]`.
pub fn embed_patches<S: Scalar>(
    tape: &mut Tape<S>,
    images: &Tensor<S>,
    bound: &BoundParams,
    cfg: &ViltConfig,
) -> Result<Var, ModelError> {
    let sh = images.shape();
    if sh.len() != 4 || sh[3] != 3 {
        return Err(ModelError::Batch(format!(
            "images must be [B, H, W, 3], got {sh:?}"
        )));
    }
    let (b, h, w) = (sh[0], sh[1], sh[2]);
    if h % cfg.patch_size != 0 || w % cfg.patch_size != 0 {
        return Err(ModelError::Batch(format!(
            "image {h}x{w} not divisible by patch size {}",
            cfg.patch_size
        )));
    }
    let p = cfg.patch_size;
    let (gh, gw) = (h / p, w / p);
    let n_patches = gh * gw;
    let pdim = p * p * 3;

    // Rearranged patch matrix [B·N, P·P·3]; images carry no gradient, so
    // this happens outside the tape.
    let iv = images.values();
    let mut patches = Vec::with_capacity(b * n_patches * pdim);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    let row = gy * p + py;
                    let col0 = gx * p;
                    let start = ((bi * h + row) * w + col0) * 3;
                    patches.extend_from_slice(&iv[start..start + p * 3]);
                }
            }
        }
    }
    let patch_leaf = tape.leaf_values(vec![b * n_patches, pdim], patches, false);
    let projected = tape.matmul(patch_leaf, bound.var("patch_proj.weight")?)?;
    let biased = tape.add_bias(projected, bound.var("patch_proj.bias")?)?;
    let mut out = tape.reshape(biased, vec![b, n_patches, cfg.hidden_dim])?;
    if cfg.ablation == Ablation::ZeroImage {
        out = tape.scale(out, S::zero());
    }
    Ok(out)
}

/// Embedding-table lookup for token ids. PAD positions still produce
/// their table row; masking happens in attention. Returns `[B, T, D]`.
pub fn embed_text<S: Scalar>(
    tape: &mut Tape<S>,
    token_ids: &[usize],
    batch: usize,
    bound: &BoundParams,
    cfg: &ViltConfig,
) -> Result<Var, ModelError> {
    if token_ids.len() != batch * cfg.max_text_len {
        return Err(ModelError::Batch(format!(
            "{} token ids for batch {} with max_text_len {}",
            token_ids.len(),
            batch,
            cfg.max_text_len
        )));
    }
    let gathered = tape.gather(bound.var("token_emb.table")?, Arc::new(token_ids.to_vec()))?;
    let mut out = tape.reshape(gathered, vec![batch, cfg.max_text_len, cfg.hidden_dim])?;
    if cfg.ablation == Ablation::ZeroText {
        out = tape.scale(out, S::zero());
    }
    Ok(out)
}

/// Build the joint sequence `[CLS, text…, image…]` with learned positional
/// and modal-type embeddings added, plus the attention mask (1 for CLS,
/// the text mask for text positions, 1 for every image position).
pub fn assemble_sequence<S: Scalar>(
    tape: &mut Tape<S>,
    text_emb: Var,
    image_emb: Var,
    text_mask: &[u8],
    bound: &BoundParams,
    cfg: &ViltConfig,
) -> Result<(Var, Arc<Vec<u8>>), ModelError> {
    let tsh = tape.shape(text_emb).to_vec();
    let ish = tape.shape(image_emb).to_vec();
    let b = tsh[0];
    let d = cfg.hidden_dim;
    let t = cfg.max_text_len;
    let n_img = cfg.n_patches();
    if tsh != [b, t, d] || ish != [b, n_img, d] || text_mask.len() != b * t {
        return Err(ModelError::Batch(format!(
            "assemble_sequence shapes: text {tsh:?}, image {ish:?}, mask {}",
            text_mask.len()
        )));
    }

    // CLS token tiled over the batch.
    let cls = bound.var("cls.emb")?;
    let cls_rows = tape.tile_rows(cls, b);
    let cls_seq = tape.reshape(cls_rows, vec![b, 1, d])?;

    let seq = tape.concat_seq(&[cls_seq, text_emb, image_emb])?;

    // Positional rows: text slot 0 for CLS, slots 1..=T for text, then
    // the image positional table.
    let pos_text = bound.var("pos.text")?;
    let pos_image = bound.var("pos.image")?;
    let pos_text3 = tape.reshape(pos_text, vec![1, t + 1, d])?;
    let pos_image3 = tape.reshape(pos_image, vec![1, n_img, d])?;
    let pos_all = tape.concat_seq(&[pos_text3, pos_image3])?;
    let seq = tape.add_rows(seq, pos_all)?;

    // Modal-type rows: type 0 for CLS + text, type 1 for image patches.
    let s = cfg.seq_len();
    let mut type_ids = vec![0usize; 1 + t];
    type_ids.extend(std::iter::repeat(1).take(n_img));
    debug_assert_eq!(type_ids.len(), s);
    let modal_rows = tape.gather(bound.var("modal.type")?, Arc::new(type_ids))?;
    let seq = tape.add_rows(seq, modal_rows)?;

    let mut attn_mask = Vec::with_capacity(b * s);
    for bi in 0..b {
        attn_mask.push(1u8);
        attn_mask.extend_from_slice(&text_mask[bi * t..(bi + 1) * t]);
        attn_mask.extend(std::iter::repeat(1u8).take(n_img));
    }
    Ok((seq, Arc::new(attn_mask)))
}

/// Pre-norm transformer encoder: `x ← x + MHSA(LN(x))`, then
/// `x ← x + MLP(LN(x))` with GELU, a final layer norm after the last
/// block. Masked positions receive attention weight exactly 0 as keys.
/// `attn_capture`, when supplied, receives each layer's attention
/// weights `[B·H, S, S]`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward<S: Scalar>(
    tape: &mut Tape<S>,
    seq: Var,
    attn_mask: &Arc<Vec<u8>>,
    bound: &BoundParams,
    cfg: &ViltConfig,
    mode: Mode,
    rng: &mut RngStream,
    mut attn_capture: Option<&mut Vec<Tensor<S>>>,
) -> Result<Var, ModelError> {
    let heads = cfg.num_heads;
    let scale = S::from_f64(1.0 / (cfg.head_dim() as f64).sqrt());
    let eps = S::from_f64(cfg.layer_norm_eps);
    let mut x = seq;

    for l in 0..cfg.num_layers {
        let p = format!("enc.{l}");
        let ln1 = tape.layer_norm(
            x,
            bound.var(&format!("{p}.ln1.gamma"))?,
            bound.var(&format!("{p}.ln1.beta"))?,
            eps,
        )?;

        let proj = |tape: &mut Tape<S>, name: &str| -> Result<Var, ModelError> {
            let w = bound.var(&format!("{p}.attn.{name}.weight"))?;
            let bias = bound.var(&format!("{p}.attn.{name}.bias"))?;
            let y = tape.matmul(ln1, w)?;
            Ok(tape.add_bias(y, bias)?)
        };
        let q = proj(tape, "q")?;
        let k = proj(tape, "k")?;
        let v = proj(tape, "v")?;

        let qh = tape.split_heads(q, heads)?;
        let kh = tape.split_heads(k, heads)?;
        let vh = tape.split_heads(v, heads)?;

        let scores = tape.batch_matmul(qh, kh, true)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.masked_softmax(scores, Arc::clone(attn_mask), heads)?;
        if let Some(capture) = attn_capture.as_deref_mut() {
            capture.push(tape.tensor(attn));
        }
        let ctx = tape.batch_matmul(attn, vh, false)?;
        let merged = tape.merge_heads(ctx, heads)?;

        let wo = tape.matmul(merged, bound.var(&format!("{p}.attn.out.weight"))?)?;
        let attn_out = tape.add_bias(wo, bound.var(&format!("{p}.attn.out.bias"))?)?;
        let attn_out = tape.dropout(attn_out, cfg.dropout_encoder, mode, rng)?;
        x = tape.add(x, attn_out)?;

        let ln2 = tape.layer_norm(
            x,
            bound.var(&format!("{p}.ln2.gamma"))?,
            bound.var(&format!("{p}.ln2.beta"))?,
            eps,
        )?;
        let h1 = tape.matmul(ln2, bound.var(&format!("{p}.mlp.fc1.weight"))?)?;
        let h1 = tape.add_bias(h1, bound.var(&format!("{p}.mlp.fc1.bias"))?)?;
        let h1 = tape.gelu(h1);
        let h2 = tape.matmul(h1, bound.var(&format!("{p}.mlp.fc2.weight"))?)?;
        let h2 = tape.add_bias(h2, bound.var(&format!("{p}.mlp.fc2.bias"))?)?;
        let h2 = tape.dropout(h2, cfg.dropout_encoder, mode, rng)?;
        x = tape.add(x, h2)?;
    }

    let out = tape.layer_norm(
        x,
        bound.var("enc.final_ln.gamma")?,
        bound.var("enc.final_ln.beta")?,
        eps,
    )?;
    Ok(out)
}

/// Pool the encoder output to one vector per sample: the CLS state (or
/// the mean over unmasked positions) through dense + tanh.
pub fn pool<S: Scalar>(
    tape: &mut Tape<S>,
    hidden: Var,
    attn_mask: &[u8],
    bound: &BoundParams,
    cfg: &ViltConfig,
) -> Result<Var, ModelError> {
    let sh = tape.shape(hidden).to_vec();
    let (b, s, d) = (sh[0], sh[1], sh[2]);
    let picked = match cfg.pooling {
        Pooling::Cls => tape.select_seq(hidden, 0)?,
        Pooling::Mean => {
            // average over unmasked positions via constant coefficients
            let mut coeffs = vec![S::zero(); b * s * d];
            for bi in 0..b {
                let mrow = &attn_mask[bi * s..(bi + 1) * s];
                let count = mrow.iter().filter(|&&m| m != 0).count().max(1);
                let w = S::from_f64(1.0 / count as f64);
                for (si, &m) in mrow.iter().enumerate() {
                    if m != 0 {
                        let start = (bi * s + si) * d;
                        coeffs[start..start + d].iter_mut().for_each(|c| *c = w);
                    }
                }
            }
            let weighted = tape.coeff_mul(hidden, coeffs)?;
            // sum over the sequence axis: reshape to rows and matmul with ones
            let rows = tape.reshape(weighted, vec![b, s, d])?;
            sum_seq(tape, rows)?
        }
    };
    let projected = tape.matmul(picked, bound.var("pooler.weight")?)?;
    let biased = tape.add_bias(projected, bound.var("pooler.bias")?)?;
    Ok(tape.tanh(biased))
}

/// Sum `[b, s, d]` over the sequence axis without a dedicated op: split
/// positions and fold with adds.
fn sum_seq<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var, ModelError> {
    let sh = tape.shape(x).to_vec();
    let (b, s, d) = (sh[0], sh[1], sh[2]);
    let mut acc: Option<Var> = None;
    for si in 0..s {
        let slice = tape.select_seq(x, si)?;
        acc = Some(match acc {
            None => slice,
            Some(a) => tape.add(a, slice)?,
        });
    }
    let total = acc.expect("sequence is non-empty");
    Ok(tape.reshape(total, vec![b, d])?)
}

/// Classifier head: LN → dropout → FC (D→D) → LN → ReLU → dropout →
/// FC (D→1). Returns `(probs, logits)`; probabilities are the sigmoid of
/// the logits, the loss is computed from the logits.
pub fn classifier_head<S: Scalar>(
    tape: &mut Tape<S>,
    pooled: Var,
    bound: &BoundParams,
    cfg: &ViltConfig,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(Var, Var), ModelError> {
    let eps = S::from_f64(cfg.layer_norm_eps);
    let b = tape.shape(pooled)[0];
    let x = tape.layer_norm(
        pooled,
        bound.var("head.ln1.gamma")?,
        bound.var("head.ln1.beta")?,
        eps,
    )?;
    let x = tape.dropout(x, cfg.dropout_head, mode, rng)?;
    let x = tape.matmul(x, bound.var("head.fc1.weight")?)?;
    let x = tape.add_bias(x, bound.var("head.fc1.bias")?)?;
    let x = tape.layer_norm(
        x,
        bound.var("head.ln2.gamma")?,
        bound.var("head.ln2.beta")?,
        eps,
    )?;
    let x = tape.relu(x);
    let x = tape.dropout(x, cfg.dropout_head, mode, rng)?;
    let x = tape.matmul(x, bound.var("head.fc2.weight")?)?;
    let x = tape.add_bias(x, bound.var("head.fc2.bias")?)?;
    let logits = tape.reshape(x, vec![b])?;
    let probs = tape.sigmoid(logits);
    Ok((probs, logits))
}

/// Everything a full forward pass produces.
pub struct ForwardOutput<S: Scalar> {
    pub probs: Vec<S>,
    pub loss: Option<S>,
    /// Attention weights per layer `[B·H, S, S]` when capture was requested.
    pub attention: Vec<Tensor<S>>,
}

struct BuiltGraph<S: Scalar> {
    tape: Tape<S>,
    bound: BoundParams,
    probs: Var,
    loss: Option<Var>,
    attention: Vec<Tensor<S>>,
}

fn build_graph<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ViltConfig,
    batch: &Batch<S>,
    mode: Mode,
    rng: &mut RngStream,
    requires_grad: bool,
    capture_attention: bool,
) -> Result<BuiltGraph<S>, ModelError> {
    params.audit(cfg)?;
    batch.validate(cfg)?;
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, requires_grad);

    let text = embed_text(&mut tape, &batch.token_ids, batch.size, &bound, cfg)?;
    let image = embed_patches(&mut tape, &batch.images, &bound, cfg)?;
    let (seq, attn_mask) =
        assemble_sequence(&mut tape, text, image, &batch.text_mask, &bound, cfg)?;
    let mut attention = Vec::new();
    let hidden = encoder_forward(
        &mut tape,
        seq,
        &attn_mask,
        &bound,
        cfg,
        mode,
        rng,
        capture_attention.then_some(&mut attention),
    )?;
    let pooled = pool(&mut tape, hidden, &attn_mask, &bound, cfg)?;
    let (probs, logits) = classifier_head(&mut tape, pooled, &bound, cfg, mode, rng)?;

    let loss = match &batch.labels {
        Some(labels) => {
            let ys: Vec<S> = labels.iter().map(|&y| S::from_f64(y as f64)).collect();
            Some(tape.bce_with_logits(logits, ys)?)
        }
        None => None,
    };
    Ok(BuiltGraph {
        tape,
        bound,
        probs,
        loss,
        attention,
    })
}

/// Forward pass: probabilities for each sample, plus the mean BCE loss
/// when the batch carries labels.
pub fn model_forward<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ViltConfig,
    batch: &Batch<S>,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<ForwardOutput<S>, ModelError> {
    let g = build_graph(params, cfg, batch, mode, rng, false, false)?;
    Ok(ForwardOutput {
        probs: g.tape.values(g.probs).to_vec(),
        loss: g.loss.map(|l| g.tape.values(l)[0]),
        attention: g.attention,
    })
}

/// Forward pass with attention-weight capture (one tensor per layer).
pub fn model_forward_with_attention<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ViltConfig,
    batch: &Batch<S>,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<ForwardOutput<S>, ModelError> {
    let g = build_graph(params, cfg, batch, mode, rng, false, true)?;
    Ok(ForwardOutput {
        probs: g.tape.values(g.probs).to_vec(),
        loss: g.loss.map(|l| g.tape.values(l)[0]),
        attention: g.attention,
    })
}

/// Forward plus backward: loss, per-parameter gradients, and
/// probabilities. The batch must carry labels.
pub fn model_loss_and_grads<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &ViltConfig,
    batch: &Batch<S>,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(S, NamedTensors<S>, Vec<S>), ModelError> {
    let g = build_graph(params, cfg, batch, mode, rng, true, false)?;
    let loss_var = g
        .loss
        .ok_or_else(|| ModelError::Batch("gradients need labels".into()))?;
    let loss = g.tape.values(loss_var)[0];
    let grads = g.tape.backward(loss_var)?;
    let named = g.bound.grads(params, &grads);
    Ok((loss, named, g.tape.values(g.probs).to_vec()))
}
