//! Dual-branch facial feature extraction.
//!
//! A reference image feeds two perceiver paths over the same dense feature
//! map: the identity branch turns a fixed recognition projection into two
//! high-level identity tokens, and the structural branch resamples the
//! features through 32 learnable facial queries. Identity tokens are fused
//! into the text sequence by masked replacement; structural tokens condition
//! the transformer directly.

use crate::autodiff::{ParamBinding, PatchDims, Tape, Var};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::{ParamSet, FACE_TOKENS, ID_TOKENS};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Token-level binary mask selecting the fusion positions in the text
/// sequence. All-zero is legal and means "no fusion".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    bits: Vec<u8>,
}

impl TokenMask {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Contract("mask bits must be 0 or 1".into()));
        }
        Ok(Self { bits })
    }

    pub fn zeros(n: usize) -> Self {
        Self { bits: vec![0; n] }
    }

    /// Mask with a single subject position set.
    pub fn single(n: usize, index: usize) -> Self {
        let mut bits = vec![0; n];
        if index < n {
            bits[index] = 1;
        }
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.bits[i] == 1
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b == 1)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }
}

/// The facial condition: structural tokens, identity tokens, and the text
/// sequence after masked replacement.
#[derive(Debug, Clone)]
pub struct FaceCondition {
    pub face_tokens: Tensor,
    pub id_tokens: Tensor,
    pub fused_text: Tensor,
    pub mask: TokenMask,
}

// ---------------------------------------------------------------------------
// Graph builders (shared by public ops and the training loss)
// ---------------------------------------------------------------------------

/// Dense feature map: non-overlapping patches in row-major order projected
/// by the frozen feature encoder.
pub(crate) fn tape_extract_features(
    tape: &mut Tape,
    bind: &mut ParamBinding,
    image: Var,
    height: usize,
    width: usize,
    patch: usize,
) -> Var {
    let dims = PatchDims {
        frames: 1,
        height,
        width,
        patch,
    };
    let patches = tape.patchify(image, dims);
    let proj = bind.var(tape, "embedder.feat_proj");
    tape.matmul(patches, proj)
}

/// Two identity tokens from the frozen recognition projection.
pub(crate) fn tape_encode_id(
    tape: &mut Tape,
    bind: &mut ParamBinding,
    image: Var,
    img_len: usize,
    dim: usize,
) -> Var {
    let flat = tape.reshape(image, &[1, img_len]);
    let proj = bind.var(tape, "embedder.id_proj");
    let row = tape.matmul(flat, proj);
    tape.reshape(row, &[ID_TOKENS, dim])
}

fn tape_perceiver_block(
    tape: &mut Tape,
    bind: &mut ParamBinding,
    queries: Var,
    context: Var,
    base: &str,
    dim: usize,
) -> Var {
    let scale = 1.0 / (dim as f64).sqrt();
    let qn = tape.layer_norm(queries, LN_EPS);
    let wq = bind.var(tape, &format!("{base}.wq"));
    let wk = bind.var(tape, &format!("{base}.wk"));
    let wv = bind.var(tape, &format!("{base}.wv"));
    let wo = bind.var(tape, &format!("{base}.wo"));
    let q = tape.matmul(qn, wq);
    let k = tape.matmul(context, wk);
    let v = tape.matmul(context, wv);
    let scores = tape.matmul_nt(q, k);
    let scores = tape.scale(scores, scale);
    let probs = tape.softmax_rows(scores);
    let att = tape.matmul(probs, v);
    let att = tape.matmul(att, wo);
    let queries = tape.add(queries, att);

    let hn = tape.layer_norm(queries, LN_EPS);
    let w1 = bind.var(tape, &format!("{base}.ffn_w1"));
    let b1 = bind.var(tape, &format!("{base}.ffn_b1"));
    let w2 = bind.var(tape, &format!("{base}.ffn_w2"));
    let b2 = bind.var(tape, &format!("{base}.ffn_b2"));
    let h = tape.matmul(hn, w1);
    let h = tape.add_row(h, b1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, w2);
    let h = tape.add_row(h, b2);
    tape.add(queries, h)
}

/// Fixed-depth stack of cross-attention + FFN blocks with pre-normalization
/// and residual connections; query count is preserved. Context tokens carry
/// no positional encoding.
pub(crate) fn tape_perceiver(
    tape: &mut Tape,
    bind: &mut ParamBinding,
    queries: Var,
    context: Var,
    prefix: &str,
    layers: usize,
    dim: usize,
) -> Var {
    let mut q = queries;
    for l in 0..layers {
        q = tape_perceiver_block(tape, bind, q, context, &format!("{prefix}.l{l}"), dim);
    }
    q
}

/// Masked replacement: fused rows where the mask is set, the original text
/// rows (bit-equal) elsewhere. The two identity tokens are mean-pooled
/// before entering the fusion MLP.
pub(crate) fn tape_fuse(
    tape: &mut Tape,
    bind: &mut ParamBinding,
    id_tokens: Var,
    text: Var,
    mask: &TokenMask,
) -> Var {
    let n_txt = tape.value(text).rows();
    assert_eq!(mask.len(), n_txt, "mask length");
    if !mask.any() {
        return text;
    }
    let pooled = tape.mean_rows(id_tokens);
    let w1 = bind.var(tape, "embedder.fuse.w1");
    let b1 = bind.var(tape, "embedder.fuse.b1");
    let w2 = bind.var(tape, "embedder.fuse.w2");
    let b2 = bind.var(tape, "embedder.fuse.b2");
    let mut rows = Vec::with_capacity(n_txt);
    for i in 0..n_txt {
        let row = tape.slice_rows(text, i, 1);
        if mask.is_set(i) {
            let joint = tape.concat_cols(&[pooled, row]);
            let h = tape.matmul(joint, w1);
            let h = tape.add_row(h, b1);
            let h = tape.gelu(h);
            let h = tape.matmul(h, w2);
            let fused = tape.add_row(h, b2);
            rows.push(fused);
        } else {
            rows.push(row);
        }
    }
    tape.concat_rows(&rows)
}

/// Builds the full facial condition on an existing tape.
/// Returns (face_tokens, id_tokens, fused_text) variables.
pub(crate) fn tape_face_condition(
    tape: &mut Tape,
    bind: &mut ParamBinding,
    image: Var,
    text: Var,
    mask: &TokenMask,
    cfg: &Config,
) -> (Var, Var, Var) {
    let features = tape_extract_features(tape, bind, image, cfg.height, cfg.width, cfg.patch);
    let id_q = tape_encode_id(tape, bind, image, cfg.height * cfg.width, cfg.dim);
    let id_tokens = tape_perceiver(
        tape,
        bind,
        id_q,
        features,
        "embedder.perceiver_id",
        cfg.perceiver_layers,
        cfg.dim,
    );
    let face_q = bind.var(tape, "embedder.face_query");
    let face_tokens = tape_perceiver(
        tape,
        bind,
        face_q,
        features,
        "embedder.perceiver_face",
        cfg.perceiver_layers,
        cfg.dim,
    );
    let fused = tape_fuse(tape, bind, id_tokens, text, mask);
    (face_tokens, id_tokens, fused)
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Patch features of a reference image: P tokens of width `dim`.
pub fn extract_features(image: &Tensor, params: &ParamSet, cfg: &Config) -> Result<Tensor> {
    let (h, w) = image_dims(image)?;
    if h % cfg.patch != 0 || w % cfg.patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} not divisible by patch {}",
            cfg.patch
        )));
    }
    let mut tape = Tape::new();
    let mut bind = ParamBinding::new(params);
    let img = tape.leaf(image);
    let out = tape_extract_features(&mut tape, &mut bind, img, h, w, cfg.patch);
    Ok(tape.tensor(out))
}

/// Identity tokens for a reference image. The same projection doubles as the
/// recognition embedder for filtering and metrics.
pub fn encode_id(image: &Tensor, params: &ParamSet, cfg: &Config) -> Result<Tensor> {
    let (h, w) = image_dims(image)?;
    let proj = params.get("embedder.id_proj")?;
    if h * w != proj.rows() {
        return Err(Error::Shape(format!(
            "image {h}x{w} does not match recognition projection input {}",
            proj.rows()
        )));
    }
    let mut tape = Tape::new();
    let mut bind = ParamBinding::new(params);
    let img = tape.leaf(image);
    let out = tape_encode_id(&mut tape, &mut bind, img, h * w, cfg.dim);
    Ok(tape.tensor(out))
}

/// Flat recognition embedding (the two identity tokens concatenated).
pub fn recognition_embedding(image: &Tensor, params: &ParamSet, cfg: &Config) -> Result<Tensor> {
    let id = encode_id(image, params, cfg)?;
    id.reshaped(&[2 * cfg.dim])
}

/// Perceiver resampler over `prefix`-named weights; query count preserved.
pub fn perceiver_forward(
    queries: &Tensor,
    context: &Tensor,
    params: &ParamSet,
    prefix: &str,
    layers: usize,
) -> Result<Tensor> {
    if queries.cols() != context.cols() {
        return Err(Error::Shape(format!(
            "query width {} != context width {}",
            queries.cols(),
            context.cols()
        )));
    }
    let dim = queries.cols();
    let mut tape = Tape::new();
    let mut bind = ParamBinding::new(params);
    let q = tape.leaf(queries);
    let c = tape.leaf(context);
    let out = tape_perceiver(&mut tape, &mut bind, q, c, prefix, layers, dim);
    Ok(tape.tensor(out))
}

/// Masked replacement of text tokens by fused identity content.
pub fn fuse_id_text(
    id_tokens: &Tensor,
    text: &Tensor,
    mask: &TokenMask,
    params: &ParamSet,
) -> Result<Tensor> {
    if mask.len() != text.rows() {
        return Err(Error::Shape(format!(
            "mask length {} != text tokens {}",
            mask.len(),
            text.rows()
        )));
    }
    let mut tape = Tape::new();
    let mut bind = ParamBinding::new(params);
    let id = tape.leaf(id_tokens);
    let txt = tape.leaf(text);
    let out = tape_fuse(&mut tape, &mut bind, id, txt, mask);
    Ok(tape.tensor(out))
}

/// Full dual-branch extraction for one reference image.
pub fn face_condition(
    image: &Tensor,
    text: &Tensor,
    mask: &TokenMask,
    params: &ParamSet,
    cfg: &Config,
) -> Result<FaceCondition> {
    if mask.len() != text.rows() {
        return Err(Error::Shape(format!(
            "mask length {} != text tokens {}",
            mask.len(),
            text.rows()
        )));
    }
    let mut tape = Tape::new();
    let mut bind = ParamBinding::new(params);
    let img = tape.leaf(image);
    let txt = tape.leaf(text);
    let (face, id, fused) = tape_face_condition(&mut tape, &mut bind, img, txt, mask, cfg);
    Ok(FaceCondition {
        face_tokens: tape.tensor(face),
        id_tokens: tape.tensor(id),
        fused_text: tape.tensor(fused),
        mask: mask.clone(),
    })
}

/// Text token embeddings for a prompt (frozen table lookup).
pub fn embed_text(tokens: &[u16], params: &ParamSet, cfg: &Config) -> Result<Tensor> {
    let table = params.get("text.embed")?;
    let d = cfg.dim;
    let mut out = Tensor::zeros(&[tokens.len(), d]);
    for (i, &tok) in tokens.iter().enumerate() {
        let tok = tok as usize;
        if tok >= table.rows() {
            return Err(Error::Data(format!("token id {tok} outside vocabulary")));
        }
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(table.row(tok));
    }
    Ok(out)
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w] => Ok((*h, *w)),
        other => Err(Error::Shape(format!("expected H x W image, got {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{cosine_similarity, finite_diff_grad, matmul, relative_error};
    use crate::rng::{seeded_normal, RngState};

    fn small_cfg() -> Config {
        Config::gradcheck()
    }

    #[test]
    fn zero_image_gives_zero_features_and_id() {
        let cfg = small_cfg();
        let params = ParamSet::init(&cfg);
        let img = Tensor::zeros(&[cfg.height, cfg.width]);
        let f = extract_features(&img, &params, &cfg).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert_eq!(f.shape(), &[cfg.tokens_per_frame(), cfg.dim]);
        let id = encode_id(&img, &params, &cfg).unwrap();
        assert!(id.data().iter().all(|&v| v == 0.0));
        assert_eq!(id.shape(), &[2, cfg.dim]);
    }

    #[test]
    fn patch_count_shape_arithmetic() {
        let mut cfg = small_cfg();
        cfg.height = 8;
        cfg.width = 8;
        cfg.patch = 4;
        let params = ParamSet::init(&cfg);
        let img = seeded_normal(&mut RngState::new(1), &[8, 8]);
        let f = extract_features(&img, &params, &cfg).unwrap();
        assert_eq!(f.shape(), &[4, cfg.dim]);
        let mut bad = cfg.clone();
        bad.patch = 3;
        assert!(extract_features(&img, &params, &bad).is_err());
    }

    #[test]
    fn single_patch_equals_direct_matmul() {
        let mut cfg = small_cfg();
        cfg.height = 4;
        cfg.width = 4;
        cfg.patch = 4;
        // feat_proj keyed by patch area, so re-init for this geometry
        let params = ParamSet::init(&cfg);
        let img = seeded_normal(&mut RngState::new(2), &[4, 4]);
        let f = extract_features(&img, &params, &cfg).unwrap();
        let flat = img.reshaped(&[1, 16]).unwrap();
        let expect = matmul(&flat, params.tensor("embedder.feat_proj")).unwrap();
        for (a, b) in f.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn perceiver_preserves_query_count() {
        let cfg = small_cfg();
        let params = ParamSet::init(&cfg);
        let ctx = seeded_normal(&mut RngState::new(3), &[4, cfg.dim]);
        for q in [2usize, 32] {
            let queries = seeded_normal(&mut RngState::new(4), &[q, cfg.dim]);
            let out = perceiver_forward(&queries, &ctx, &params, "embedder.perceiver_face", 1)
                .unwrap();
            assert_eq!(out.shape(), &[q, cfg.dim]);
        }
    }

    #[test]
    fn perceiver_residual_identity_at_zero_output_projections() {
        let cfg = small_cfg();
        let mut params = ParamSet::init(&cfg);
        let d = cfg.dim;
        params
            .set("embedder.perceiver_face.l0.wo", Tensor::zeros(&[d, d]))
            .unwrap();
        params
            .set("embedder.perceiver_face.l0.ffn_w2", Tensor::zeros(&[2 * d, d]))
            .unwrap();
        let queries = seeded_normal(&mut RngState::new(5), &[3, d]);
        let ctx = Tensor::zeros(&[4, d]);
        let out =
            perceiver_forward(&queries, &ctx, &params, "embedder.perceiver_face", 1).unwrap();
        assert_eq!(out, queries);
    }

    #[test]
    fn perceiver_single_block_matches_hand_rolled_attention() {
        let cfg = small_cfg();
        let params = ParamSet::init(&cfg);
        let d = cfg.dim;
        let queries = seeded_normal(&mut RngState::new(6), &[2, d]);
        let ctx = seeded_normal(&mut RngState::new(7), &[5, d]);
        let out =
            perceiver_forward(&queries, &ctx, &params, "embedder.perceiver_id", 1).unwrap();

        // hand-rolled oracle: explicit softmax(QK'/sqrt(d))V with residuals
        let get = |n: &str| params.tensor(&format!("embedder.perceiver_id.l0.{n}"));
        let qn = crate::ops::layer_norm(&queries, 1e-5);
        let q = matmul(&qn, get("wq")).unwrap();
        let k = matmul(&ctx, get("wk")).unwrap();
        let v = matmul(&ctx, get("wv")).unwrap();
        let mut scores = Tensor::zeros(&[2, 5]);
        for i in 0..2 {
            for j in 0..5 {
                let mut acc = 0.0f64;
                for kk in 0..d {
                    acc += q.data()[i * d + kk] as f64 * k.data()[j * d + kk] as f64;
                }
                scores.data_mut()[i * 5 + j] = (acc / (d as f64).sqrt()) as f32;
            }
        }
        let probs = crate::ops::softmax_rows(&scores);
        let att = matmul(&probs, &v).unwrap();
        let att = matmul(&att, get("wo")).unwrap();
        let mut res = Tensor::zeros(&[2, d]);
        for i in 0..res.len() {
            res.data_mut()[i] = queries.data()[i] + att.data()[i];
        }
        let hn = crate::ops::layer_norm(&res, 1e-5);
        let h = matmul(&hn, get("ffn_w1")).unwrap();
        let mut hb = h.clone();
        for r in 0..hb.rows() {
            for c in 0..hb.cols() {
                let idx = r * hb.cols() + c;
                let v = hb.data()[idx] as f64 + get("ffn_b1").data()[c] as f64;
                hb.data_mut()[idx] = crate::ops::gelu_scalar(v) as f32;
            }
        }
        let h2 = matmul(&hb, get("ffn_w2")).unwrap();
        for i in 0..2 {
            for c in 0..d {
                let expect =
                    res.data()[i * d + c] + h2.data()[i * d + c] + get("ffn_b2").data()[c];
                let got = out.data()[i * d + c];
                assert!(
                    (expect - got).abs() < 1e-5,
                    "({i},{c}) expect {expect} got {got}"
                );
            }
        }
    }

    #[test]
    fn perceiver_is_context_permutation_invariant() {
        let cfg = small_cfg();
        let params = ParamSet::init(&cfg);
        let queries = seeded_normal(&mut RngState::new(8), &[3, cfg.dim]);
        let ctx = seeded_normal(&mut RngState::new(9), &[4, cfg.dim]);
        let out = perceiver_forward(&queries, &ctx, &params, "embedder.perceiver_face", 1)
            .unwrap();
        // reverse the context rows
        let mut rev = Tensor::zeros(&[4, cfg.dim]);
        for i in 0..4 {
            let d = cfg.dim;
            rev.data_mut()[i * d..(i + 1) * d].copy_from_slice(ctx.row(3 - i));
        }
        let out2 = perceiver_forward(&queries, &rev, &params, "embedder.perceiver_face", 1)
            .unwrap();
        for (a, b) in out.data().iter().zip(out2.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn fuse_zero_mask_is_bit_equal_passthrough() {
        let cfg = small_cfg();
        let params = ParamSet::init(&cfg);
        let id = seeded_normal(&mut RngState::new(10), &[2, cfg.dim]);
        let txt = seeded_normal(&mut RngState::new(11), &[cfg.n_txt, cfg.dim]);
        let out = fuse_id_text(&id, &txt, &TokenMask::zeros(cfg.n_txt), &params).unwrap();
        assert_eq!(out, txt);
    }

    #[test]
    fn fuse_all_one_mask_touches_every_position() {
        let cfg = small_cfg();
        let params = ParamSet::init(&cfg);
        let id = seeded_normal(&mut RngState::new(12), &[2, cfg.dim]);
        let txt = seeded_normal(&mut RngState::new(13), &[cfg.n_txt, cfg.dim]);
        let mask = TokenMask::new(vec![1; cfg.n_txt]).unwrap();
        let out = fuse_id_text(&id, &txt, &mask, &params).unwrap();
        for i in 0..cfg.n_txt {
            assert_ne!(out.row(i), txt.row(i), "position {i} must be fused");
        }
    }

    #[test]
    fn fuse_single_position_matches_direct_mlp() {
        let cfg = small_cfg();
        let params = ParamSet::init(&cfg);
        let d = cfg.dim;
        let id = seeded_normal(&mut RngState::new(14), &[2, d]);
        let txt = seeded_normal(&mut RngState::new(15), &[cfg.n_txt, d]);
        let mask = TokenMask::single(cfg.n_txt, 2);
        let out = fuse_id_text(&id, &txt, &mask, &params).unwrap();

        // direct two-layer evaluation at position 2
        let mut pooled = vec![0f64; d];
        for j in 0..d {
            pooled[j] = (id.data()[j] as f64 + id.data()[d + j] as f64) / 2.0;
        }
        let joint: Vec<f64> = pooled
            .iter()
            .copied()
            .chain(txt.row(2).iter().map(|&v| v as f64))
            .collect();
        let w1 = params.tensor("embedder.fuse.w1");
        let b1 = params.tensor("embedder.fuse.b1");
        let w2 = params.tensor("embedder.fuse.w2");
        let b2 = params.tensor("embedder.fuse.b2");
        let mut h = vec![0f64; 2 * d];
        for c in 0..2 * d {
            let mut acc = b1.data()[c] as f64;
            for r in 0..2 * d {
                acc += joint[r] * w1.data()[r * 2 * d + c] as f64;
            }
            h[c] = crate::ops::gelu_scalar(acc);
        }
        for c in 0..d {
            let mut acc = b2.data()[c] as f64;
            for r in 0..2 * d {
                acc += h[r] * w2.data()[r * d + c] as f64;
            }
            let got = out.row(2)[c] as f64;
            assert!((acc - got).abs() < 1e-5, "col {c}: {acc} vs {got}");
        }
        // unmasked rows bit-equal
        for i in [0usize, 1, 3] {
            assert_eq!(out.row(i), txt.row(i));
        }
    }

    #[test]
    fn masked_replacement_locality() {
        let cfg = small_cfg();
        let params = ParamSet::init(&cfg);
        let txt = seeded_normal(&mut RngState::new(16), &[cfg.n_txt, cfg.dim]);
        let mask = TokenMask::single(cfg.n_txt, 1);
        let id_a = seeded_normal(&mut RngState::new(17), &[2, cfg.dim]);
        let id_b = seeded_normal(&mut RngState::new(18), &[2, cfg.dim]);
        let out_a = fuse_id_text(&id_a, &txt, &mask, &params).unwrap();
        let out_b = fuse_id_text(&id_b, &txt, &mask, &params).unwrap();
        for i in 0..cfg.n_txt {
            if i == 1 {
                assert_ne!(out_a.row(i), out_b.row(i));
            } else {
                assert_eq!(out_a.row(i), out_b.row(i));
            }
        }
    }

    #[test]
    fn structural_branch_ignores_text_and_mask() {
        let cfg = small_cfg();
        let params = ParamSet::init(&cfg);
        let img = seeded_normal(&mut RngState::new(19), &[cfg.height, cfg.width]);
        let txt_a = seeded_normal(&mut RngState::new(20), &[cfg.n_txt, cfg.dim]);
        let txt_b = seeded_normal(&mut RngState::new(21), &[cfg.n_txt, cfg.dim]);
        let a = face_condition(&img, &txt_a, &TokenMask::single(cfg.n_txt, 0), &params, &cfg)
            .unwrap();
        let b = face_condition(&img, &txt_b, &TokenMask::zeros(cfg.n_txt), &params, &cfg)
            .unwrap();
        assert_eq!(a.face_tokens, b.face_tokens);
        assert_eq!(a.face_tokens.shape(), &[FACE_TOKENS, cfg.dim]);
    }

    #[test]
    fn face_query_and_fuse_gradients_match_finite_differences() {
        // 1-block toy configuration, loss = sum of fused text + sum of face tokens
        let mut cfg = small_cfg();
        cfg.perceiver_layers = 1;
        let params = ParamSet::init(&cfg);
        let img = seeded_normal(&mut RngState::new(22), &[cfg.height, cfg.width]);
        let txt = seeded_normal(&mut RngState::new(23), &[cfg.n_txt, cfg.dim]);
        let mask = TokenMask::single(cfg.n_txt, 1);

        let loss_with = |params: &ParamSet| -> f64 {
            let mut tape = Tape::new();
            let mut bind = ParamBinding::new(params);
            let img_v = tape.leaf(&img);
            let txt_v = tape.leaf(&txt);
            let (face, _id, fused) =
                tape_face_condition(&mut tape, &mut bind, img_v, txt_v, &mask, &cfg);
            let s1 = tape.sum_all(face);
            let s2 = tape.sum_all(fused);
            let total = tape.add(s1, s2);
            tape.scalar(total)
        };

        // analytic gradients
        let mut tape = Tape::new();
        let mut bind = ParamBinding::new(&params);
        let img_v = tape.leaf(&img);
        let txt_v = tape.leaf(&txt);
        let (face, _id, fused) =
            tape_face_condition(&mut tape, &mut bind, img_v, txt_v, &mask, &cfg);
        let s1 = tape.sum_all(face);
        let s2 = tape.sum_all(fused);
        let total = tape.add(s1, s2);
        let grads = tape.backward(total);

        for name in ["embedder.face_query", "embedder.fuse.w1", "embedder.fuse.w2"] {
            let analytic = grads.tensor_or_zeros(
                bind.bound(name).expect("bound"),
                params.tensor(name).shape(),
            );
            let fd = finite_diff_grad(
                |probe: &Tensor| {
                    let mut p = params.clone();
                    p.set(name, probe.clone()).unwrap();
                    Ok(loss_with(&p))
                },
                params.tensor(name),
                1e-3,
            )
            .unwrap();
            let err = relative_error(&analytic, &fd);
            assert!(err < 1e-3, "{name} rel err {err}");
        }
    }

    #[test]
    fn recognition_embedding_separates_identities_across_poses() {
        use crate::dataforge::{make_identity, render_frame, sample_pose, PoseRanges};
        let cfg = Config::default();
        let params = ParamSet::init(&cfg);
        let ranges = PoseRanges::default();
        let mut rng = RngState::new(123);
        let mut wins = 0;
        let total = 200;
        for _ in 0..total {
            let id_a = make_identity(&mut rng);
            let id_b = make_identity(&mut rng);
            let pa1 = sample_pose(&mut rng, &ranges, cfg.height, cfg.width);
            let pa2 = sample_pose(&mut rng, &ranges, cfg.height, cfg.width);
            let pb = sample_pose(&mut rng, &ranges, cfg.height, cfg.width);
            let ea1 = recognition_embedding(
                &render_frame(&id_a, &pa1, cfg.height, cfg.width).unwrap().pixels,
                &params,
                &cfg,
            )
            .unwrap();
            let ea2 = recognition_embedding(
                &render_frame(&id_a, &pa2, cfg.height, cfg.width).unwrap().pixels,
                &params,
                &cfg,
            )
            .unwrap();
            let eb = recognition_embedding(
                &render_frame(&id_b, &pb, cfg.height, cfg.width).unwrap().pixels,
                &params,
                &cfg,
            )
            .unwrap();
            let same = cosine_similarity(&ea1, &ea2).unwrap();
            let diff = cosine_similarity(&ea1, &eb).unwrap();
            if same > diff {
                wins += 1;
            }
        }
        assert!(
            wins * 100 >= total * 95,
            "same-identity beat different-identity in only {wins}/{total} triples"
        );
    }
}
