//! Tape-level building blocks of the network.
//!
//! Tokens live in a `(rows * (F + 1)) x embed_dim` matrix laid out as
//! `row * (F + 1) + position`, where positions `0..F` are feature tokens and
//! position `F` is the target token. Train and test rows are kept in separate
//! matrices: train rows only ever see train rows, and test rows see the train
//! rows plus themselves, which is exactly the train/test attention mask.

use super::{ModelConfig, ModelError, Params};
use crate::ndcore::{AttnLayout, Scalar, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

struct AttnVars {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
}

struct LayerVars {
    feature_attn: AttnVars,
    row_attn: AttnVars,
    norms: [(Var, Var); 3],
    ffn: MlpVars,
}

struct MlpVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

/// Every model parameter registered on one tape.
pub struct ParamVars {
    fe_w: Var,
    fe_b: Var,
    te_w: Var,
    te_b: Var,
    placeholder: Var,
    layers: Vec<LayerVars>,
    base: MlpVars,
    shap: MlpVars,
    named: Vec<(String, Var)>,
}

impl ParamVars {
    /// Registers `params` as gradient leaves (`trainable`) or constants.
    pub fn register<T: Scalar>(
        tape: &mut Tape<T>,
        params: &Params<T>,
        cfg: &ModelConfig,
        trainable: bool,
    ) -> Self {
        let named = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self::from_named(named, cfg)
    }

    /// Wraps vars already on a tape, keyed by parameter name.
    pub fn from_named(named: Vec<(String, Var)>, cfg: &ModelConfig) -> Self {
        let find = |n: &str| -> Var {
            named
                .iter()
                .find(|(k, _)| k == n)
                .map(|&(_, v)| v)
                .unwrap_or_else(|| panic!("missing parameter `{n}`"))
        };
        let attn = |l: usize, a: &str| AttnVars {
            wq: find(&format!("layers.{l}.{a}.wq")),
            bq: find(&format!("layers.{l}.{a}.bq")),
            wk: find(&format!("layers.{l}.{a}.wk")),
            bk: find(&format!("layers.{l}.{a}.bk")),
            wv: find(&format!("layers.{l}.{a}.wv")),
            bv: find(&format!("layers.{l}.{a}.bv")),
            wo: find(&format!("layers.{l}.{a}.wo")),
            bo: find(&format!("layers.{l}.{a}.bo")),
        };
        let mlp = |p: &str| MlpVars {
            w1: find(&format!("{p}.w1")),
            b1: find(&format!("{p}.b1")),
            w2: find(&format!("{p}.w2")),
            b2: find(&format!("{p}.b2")),
        };
        let layers = (0..cfg.layers)
            .map(|l| LayerVars {
                feature_attn: attn(l, "feature_attn"),
                row_attn: attn(l, "row_attn"),
                norms: [1, 2, 3].map(|i| {
                    (
                        find(&format!("layers.{l}.norm{i}.gain")),
                        find(&format!("layers.{l}.norm{i}.bias")),
                    )
                }),
                ffn: mlp(&format!("layers.{l}.ffn")),
            })
            .collect();
        Self {
            fe_w: find("feature_encoder.weight"),
            fe_b: find("feature_encoder.bias"),
            te_w: find("target_encoder.weight"),
            te_b: find("target_encoder.bias"),
            placeholder: find("target_encoder.placeholder"),
            layers,
            base: mlp("base_decoder"),
            shap: mlp("shap_decoder"),
            named,
        }
    }

    /// `(name, var)` for every parameter, in name order.
    pub fn named(&self) -> &[(String, Var)] {
        &self.named
    }
}

/// Per-feature normalization statistics taken from the train split.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn from_rows(rows: &[Vec<f64>], std_floor: f64) -> Self {
        let f = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mut mean = vec![0.0; f];
        let mut std = vec![0.0; f];
        for j in 0..f {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
            mean[j] = m;
            let s = var.sqrt();
            std[j] = if s < std_floor { 1.0 } else { s };
        }
        Self { mean, std }
    }

    /// Z-score of `x` for feature `j`, clipped to `[-clip, clip]`.
    pub fn normalize(&self, j: usize, x: f64, clip: f64) -> f64 {
        ((x - self.mean[j]) / self.std[j]).clamp(-clip, clip)
    }
}

/// Feature tokens `(rows * F) x E` from raw feature rows.
pub(crate) fn feature_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    stats: &FeatureStats,
    rows: &[Vec<f64>],
    clip: f64,
) -> Var {
    let f = stats.mean.len();
    let values: Vec<T> = rows
        .iter()
        .flat_map(|r| (0..f).map(move |j| T::of(stats.normalize(j, r[j], clip))))
        .collect();
    let x = tape.constant(Tensor::matrix(rows.len() * f, 1, values));
    tape.linear(x, pv.fe_w, Some(pv.fe_b))
}

/// Target tokens for train rows: the label as a scalar through a linear map.
pub(crate) fn train_target_tokens<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    labels: &[usize],
) -> Var {
    let y = tape.constant(Tensor::matrix(
        labels.len(),
        1,
        labels.iter().map(|&l| T::of(l as f64)).collect(),
    ));
    tape.linear(y, pv.te_w, Some(pv.te_b))
}

/// Target tokens for test rows: the learned placeholder, repeated.
pub(crate) fn test_target_tokens<T: Scalar>(tape: &mut Tape<T>, pv: &ParamVars, n: usize) -> Var {
    tape.repeat_row(pv.placeholder, n)
}

/// Interleaves feature and target tokens into the row-major token layout.
pub(crate) fn interleave<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    targets: Var,
    rows: usize,
    f: usize,
) -> Var {
    let all = tape.concat_rows(&[features, targets]);
    let perm: Vec<usize> = (0..rows)
        .flat_map(|r| (0..f).map(move |j| r * f + j).chain(std::iter::once(rows * f + r)))
        .collect();
    tape.gather_rows(all, &perm)
}

fn project<T: Scalar>(tape: &mut Tape<T>, a: &AttnVars, x: Var) -> (Var, Var, Var) {
    (
        tape.linear(x, a.wq, Some(a.bq)),
        tape.linear(x, a.wk, Some(a.bk)),
        tape.linear(x, a.wv, Some(a.bv)),
    )
}

fn residual_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, delta: Var, norm: (Var, Var)) -> Var {
    let s = tape.add(x, delta);
    tape.layer_norm(s, norm.0, norm.1, T::of(NORM_EPS))
}

fn feed_forward<T: Scalar>(tape: &mut Tape<T>, m: &MlpVars, x: Var) -> Var {
    let h = tape.linear(x, m.w1, Some(m.b1));
    let h = tape.gelu(h);
    tape.linear(h, m.w2, Some(m.b2))
}

/// Attention across the `F + 1` tokens of each row.
fn feature_sublayer<T: Scalar>(
    tape: &mut Tape<T>,
    lv: &LayerVars,
    x: Var,
    positions: usize,
    heads: usize,
) -> Result<Var, ModelError> {
    let (q, k, v) = project(tape, &lv.feature_attn, x);
    let a = tape.attention(q, k, v, None, heads, AttnLayout::Blocks { size: positions })?;
    let o = tape.linear(a, lv.feature_attn.wo, Some(lv.feature_attn.bo));
    Ok(residual_norm(tape, x, o, lv.norms[0]))
}

/// One encoder layer over the train rows. Returns the new train tokens and
/// the datapoint-attention keys/values that test rows attend to.
fn train_layer<T: Scalar>(
    tape: &mut Tape<T>,
    lv: &LayerVars,
    x: Var,
    positions: usize,
    heads: usize,
) -> Result<(Var, (Var, Var)), ModelError> {
    let x = feature_sublayer(tape, lv, x, positions, heads)?;
    let (q, k, v) = project(tape, &lv.row_attn, x);
    let a = tape.attention(q, k, v, None, heads, AttnLayout::Columns { positions })?;
    let o = tape.linear(a, lv.row_attn.wo, Some(lv.row_attn.bo));
    let x = residual_norm(tape, x, o, lv.norms[1]);
    let h = feed_forward(tape, &lv.ffn, x);
    Ok((residual_norm(tape, x, h, lv.norms[2]), (k, v)))
}

/// One encoder layer over test rows, given the train keys/values.
fn test_layer<T: Scalar>(
    tape: &mut Tape<T>,
    lv: &LayerVars,
    y: Var,
    ctx: (Var, Var),
    positions: usize,
    heads: usize,
) -> Result<Var, ModelError> {
    let y = feature_sublayer(tape, lv, y, positions, heads)?;
    let (q, k, v) = project(tape, &lv.row_attn, y);
    let a = tape.attention(q, k, v, Some(ctx), heads, AttnLayout::Columns { positions })?;
    let o = tape.linear(a, lv.row_attn.wo, Some(lv.row_attn.bo));
    let y = residual_norm(tape, y, o, lv.norms[1]);
    let h = feed_forward(tape, &lv.ffn, y);
    Ok(residual_norm(tape, y, h, lv.norms[2]))
}

/// Runs every layer over the train tokens. Returns final train tokens and
/// the per-layer context keys/values.
pub(crate) fn train_pass<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    tokens: Var,
    positions: usize,
) -> Result<(Var, Vec<(Var, Var)>), ModelError> {
    if tape.value(tokens).rows() == 0 {
        return Err(ModelError::EmptyContext);
    }
    let mut x = tokens;
    let mut ctx = Vec::with_capacity(pv.layers.len());
    for lv in &pv.layers {
        let (nx, kv) = train_layer(tape, lv, x, positions, cfg.heads)?;
        x = nx;
        ctx.push(kv);
    }
    Ok((x, ctx))
}

/// Runs every layer over test tokens against the train context.
pub(crate) fn test_pass<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    tokens: Var,
    ctx: &[(Var, Var)],
    positions: usize,
) -> Result<Var, ModelError> {
    if ctx.len() != pv.layers.len() {
        return Err(ModelError::EmptyContext);
    }
    let mut y = tokens;
    for (lv, &kv) in pv.layers.iter().zip(ctx) {
        if tape.value(kv.0).rows() == 0 {
            return Err(ModelError::EmptyContext);
        }
        y = test_layer(tape, lv, y, kv, positions, cfg.heads)?;
    }
    Ok(y)
}

fn decoder<T: Scalar>(tape: &mut Tape<T>, m: &MlpVars, x: Var) -> Var {
    feed_forward(tape, m, x)
}

/// Base logits (`1 x C`) from the mean final train target token.
pub(crate) fn base_decode<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    train_tokens: Var,
    n_train: usize,
    f: usize,
) -> Var {
    let p = f + 1;
    let idx: Vec<usize> = (0..n_train).map(|r| r * p + f).collect();
    let targets = tape.gather_rows(train_tokens, &idx);
    let mean = tape.mean_rows(targets);
    decoder(tape, &pv.base, mean)
}

/// Per-feature contributions `(n_test * F) x C` from final test feature tokens.
pub(crate) fn shap_decode<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    test_tokens: Var,
    n_test: usize,
    f: usize,
) -> Var {
    let p = f + 1;
    let idx: Vec<usize> = (0..n_test)
        .flat_map(|r| (0..f).map(move |j| r * p + j))
        .collect();
    let feats = tape.gather_rows(test_tokens, &idx);
    decoder(tape, &pv.shap, feats)
}

/// `base + (phi_1 + ... + phi_F)`, features summed in ascending order.
pub(crate) fn additive_logits<T: Scalar>(tape: &mut Tape<T>, base: Var, phi: Var, f: usize) -> Var {
    let sums = tape.sum_row_groups(phi, f);
    tape.add_row(sums, base)
}

/// Handles produced by a full forward pass on one tape.
pub struct TapeForward {
    pub base: Var,
    pub phi: Var,
    pub logits: Var,
    pub train_tokens: Var,
    pub test_tokens: Var,
}

/// Complete forward pass for one context and a set of test rows.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    cfg: &ModelConfig,
    stats: &FeatureStats,
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
) -> Result<TapeForward, ModelError> {
    if train_x.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    let f = stats.mean.len();
    let positions = f + 1;
    let tr_feat = feature_tokens(tape, pv, stats, train_x, cfg.clip);
    let tr_targ = train_target_tokens(tape, pv, train_y);
    let tr_tokens = interleave(tape, tr_feat, tr_targ, train_x.len(), f);
    let (train_final, ctx) = train_pass(tape, pv, cfg, tr_tokens, positions)?;

    let te_feat = feature_tokens(tape, pv, stats, test_x, cfg.clip);
    let te_targ = test_target_tokens(tape, pv, test_x.len());
    let te_tokens = interleave(tape, te_feat, te_targ, test_x.len(), f);
    let test_final = test_pass(tape, pv, cfg, te_tokens, &ctx, positions)?;

    let base = base_decode(tape, pv, train_final, train_x.len(), f);
    let phi = shap_decode(tape, pv, test_final, test_x.len(), f);
    let logits = additive_logits(tape, base, phi, f);
    Ok(TapeForward {
        base,
        phi,
        logits,
        train_tokens: train_final,
        test_tokens: test_final,
    })
}

/// Feature tokens of an episode's rows (train rows first), shaped
/// `rows x F x E`.
pub fn encode_features<T: Scalar>(
    train_x: &[Vec<f64>],
    test_x: &[Vec<f64>],
    params: &Params<T>,
    cfg: &ModelConfig,
) -> Tensor<T> {
    let mut tape = Tape::no_grad();
    let pv = ParamVars::register(&mut tape, params, cfg, false);
    let stats = FeatureStats::from_rows(train_x, cfg.std_floor);
    let rows: Vec<Vec<f64>> = train_x.iter().chain(test_x).cloned().collect();
    let f = stats.mean.len();
    let tok = feature_tokens(&mut tape, &pv, &stats, &rows, cfg.clip);
    tape.value(tok)
        .clone()
        .reshape(&[rows.len(), f, cfg.embed_dim])
        .expect("feature token shape")
}

/// Target tokens (train labels, then one placeholder per test row), shaped
/// `rows x 1 x E`.
pub fn encode_targets<T: Scalar>(
    train_y: &[usize],
    n_test: usize,
    params: &Params<T>,
    cfg: &ModelConfig,
) -> Tensor<T> {
    let mut tape = Tape::no_grad();
    let pv = ParamVars::register(&mut tape, params, cfg, false);
    let a = train_target_tokens(&mut tape, &pv, train_y);
    let b = test_target_tokens(&mut tape, &pv, n_test);
    let all = tape.concat_rows(&[a, b]);
    tape.value(all)
        .clone()
        .reshape(&[train_y.len() + n_test, 1, cfg.embed_dim])
        .expect("target token shape")
}
