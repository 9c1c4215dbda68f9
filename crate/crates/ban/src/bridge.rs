//! Bridging modules: select, align, and inject frozen encoder features
//! into the adapter branch.
//!
//! Per stage: LN + linear projection of the frozen tokens to the stage
//! width, scaled dot-product cross-attention resampling with the stage
//! feature as queries, then a three-way residual fusion
//! `x_cf + Resize(x_tilde_fm) + x_cm`. One parameter set per stage, shared
//! by both temporal phases. Attention is materialized dense; memory is
//! O(N_c * N_f).

use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Param, ParamGroup, ParamSet, Tensor};
use crate::bitab::StageFeature;
use crate::encoder::PatchTokens;
use crate::error::{Error, Result};
use crate::ops;

/// Trainable parameters of one bridging module.
#[derive(Debug, Clone)]
pub struct BridgeParams {
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    /// [C_f, C_c], applied as tokens . W.
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
}

/// Affinity options; the equation form (scaled dot product) is the default.
#[derive(Debug, Clone, Copy, Default)]
pub struct BridgeOptions {
    pub cosine_affinity: bool,
}

impl BridgeParams {
    /// Small-uniform projection init; `zero_init` makes the module an exact
    /// no-op so training starts from the unmodified adapter branch.
    pub fn init(c_f: usize, c_c: usize, zero_init: bool, seed: u64) -> BridgeParams {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let s = (1.0 / c_f as f32).sqrt();
        let weight = if zero_init {
            ArrayD::zeros(IxDyn(&[c_f, c_c]))
        } else {
            ArrayD::from_shape_fn(IxDyn(&[c_f, c_c]), |_| rng.random_range(-s..s))
        };
        BridgeParams {
            ln_gain: Tensor::var(ArrayD::ones(IxDyn(&[c_f]))),
            ln_bias: Tensor::var(ArrayD::zeros(IxDyn(&[c_f]))),
            proj_weight: Tensor::var(weight),
            proj_bias: Tensor::var(ArrayD::zeros(IxDyn(&[c_c]))),
        }
    }

    pub fn c_f(&self) -> usize {
        self.proj_weight.shape()[0]
    }

    pub fn c_c(&self) -> usize {
        self.proj_weight.shape()[1]
    }

    pub fn collect(&self, stage: usize, set: &mut ParamSet) {
        let prefix = format!("bridge.{stage}");
        set.push(Param::new(format!("{prefix}.ln.weight"), ParamGroup::Backbone, self.ln_gain.clone()));
        set.push(Param::new(format!("{prefix}.ln.bias"), ParamGroup::Backbone, self.ln_bias.clone()));
        set.push(Param::new(format!("{prefix}.proj.weight"), ParamGroup::Backbone, self.proj_weight.clone()));
        set.push(Param::new(format!("{prefix}.proj.bias"), ParamGroup::Backbone, self.proj_bias.clone()));
    }

    /// Closed-form parameter count: 2*C_f (LN affine) + C_f*C_c + C_c.
    pub fn scalar_count(&self) -> usize {
        2 * self.c_f() + self.c_f() * self.c_c() + self.c_c()
    }
}

/// Captured intermediates of one bridge application, for debugging dumps.
#[derive(Debug, Clone)]
pub struct BridgeTrace {
    pub x_fm: Array2<f32>,
    pub x_tilde_fm: Array2<f32>,
    /// Raw affinity x_cm . x_tilde_fm^T, before scaling and softmax.
    pub affinity: Array2<f32>,
    /// Row-stochastic attention weights.
    pub attn: Array2<f32>,
    pub x_cf: Array2<f32>,
    pub x_bm: Array3<f32>,
}

/// LN then linear: projects frozen tokens [N_f, C_f] to the stage width.
pub fn project_and_normalize(x_fm: &Tensor, params: &BridgeParams) -> Result<Tensor> {
    let shape = x_fm.shape();
    if shape.len() != 2 || shape[1] != params.c_f() {
        return Err(Error::shape(format!(
            "bridge projection expects [N, {}] tokens, got {shape:?}",
            params.c_f()
        )));
    }
    let normed = ops::layer_norm(x_fm, &params.ln_gain, &params.ln_bias);
    Ok(ops::add_bias(
        &ops::matmul(&normed, &params.proj_weight),
        &params.proj_bias,
    ))
}

/// Cross-attention resampling: queries are the flattened stage feature
/// [N_c, C_c], keys/values the projected frozen tokens [N_f, C_c]. Returns
/// the resampled feature and the attention weights.
pub fn cross_resample(
    x_cm_tokens: &Tensor,
    x_tilde_fm: &Tensor,
    options: BridgeOptions,
) -> Result<(Tensor, Tensor)> {
    let qs = x_cm_tokens.shape();
    let ks = x_tilde_fm.shape();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::shape(format!(
            "cross_resample operands must share channel width, got {qs:?} vs {ks:?}"
        )));
    }
    if ks[0] == 0 {
        return Err(Error::config("cross_resample with zero frozen tokens"));
    }
    let c_c = qs[1];
    let (q, k) = if options.cosine_affinity {
        (
            ops::l2_normalize_rows(x_cm_tokens),
            ops::l2_normalize_rows(x_tilde_fm),
        )
    } else {
        (x_cm_tokens.clone(), x_tilde_fm.clone())
    };
    let affinity = ops::matmul(&q, &ops::transpose(&k));
    let scaled = ops::mul_scalar(&affinity, 1.0 / (c_c as f32).sqrt());
    let attn = ops::softmax_rows(&scaled);
    let x_cf = ops::matmul(&attn, x_tilde_fm);
    Ok((x_cf, attn))
}

/// Three-way residual fusion at the stage grid:
/// x_bm = x_cf + Resize(x_tilde_fm) + x_cm.
pub fn fuse(
    x_cf: &Tensor,
    x_tilde_fm: &Tensor,
    fm_grid: (usize, usize),
    x_cm_map: &Tensor,
) -> Result<Tensor> {
    let cm_shape = x_cm_map.shape();
    if cm_shape.len() != 3 {
        return Err(Error::shape("fuse expects a [C, H, W] stage feature".to_string()));
    }
    let (c_c, h_c, w_c) = (cm_shape[0], cm_shape[1], cm_shape[2]);
    let tilde_shape = x_tilde_fm.shape();
    if tilde_shape[0] != fm_grid.0 * fm_grid.1 {
        return Err(Error::shape(format!(
            "frozen token count {} does not factor as {}x{}",
            tilde_shape[0], fm_grid.0, fm_grid.1
        )));
    }
    if tilde_shape[1] != c_c || x_cf.shape()[1] != c_c {
        return Err(Error::shape(format!(
            "fuse channel mismatch: stage {c_c}, tokens {:?}/{:?}",
            tilde_shape, x_cf.shape()
        )));
    }
    if x_cf.shape()[0] != h_c * w_c {
        return Err(Error::shape(format!(
            "resampled token count {} does not match stage grid {h_c}x{w_c}",
            x_cf.shape()[0]
        )));
    }
    let cf_map = ops::tokens_to_map(x_cf, h_c, w_c);
    let tilde_map = ops::tokens_to_map(x_tilde_fm, fm_grid.0, fm_grid.1);
    let resized = ops::resize_bilinear(&tilde_map, h_c, w_c);
    Ok(ops::add(&ops::add(&cf_map, &resized), x_cm_map))
}

/// Full bridging module: project, resample, fuse. The output replaces the
/// stage feature and feeds the next adapter stage.
pub fn bridge_forward(
    x_fm: &PatchTokens,
    x_cm: &StageFeature,
    params: &BridgeParams,
    options: BridgeOptions,
    want_trace: bool,
) -> Result<(StageFeature, Option<BridgeTrace>)> {
    if x_fm.dim() != params.c_f() {
        return Err(Error::shape(format!(
            "bridge expects frozen tokens of width {}, got {}",
            params.c_f(),
            x_fm.dim()
        )));
    }
    if x_cm.channels() != params.c_c() {
        return Err(Error::shape(format!(
            "bridge expects stage width {}, got {}",
            params.c_c(),
            x_cm.channels()
        )));
    }
    // Frozen tokens enter the graph as a detached constant.
    let fm_tokens = Tensor::constant(x_fm.tokens.clone().into_dyn());
    let x_tilde = project_and_normalize(&fm_tokens, params)?;
    let cm_tokens = ops::map_to_tokens(&x_cm.map);
    let (x_cf, attn) = cross_resample(&cm_tokens, &x_tilde, options)?;
    let fused = fuse(&x_cf, &x_tilde, (x_fm.grid_h, x_fm.grid_w), &x_cm.map)?;
    let trace = want_trace.then(|| {
        let affinity = {
            let q = cm_tokens.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let k = x_tilde.data().view().into_dimensionality::<Ix2>().unwrap().to_owned();
            q.dot(&k.t())
        };
        BridgeTrace {
            x_fm: x_fm.tokens.clone(),
            x_tilde_fm: x_tilde.data().view().into_dimensionality::<Ix2>().unwrap().to_owned(),
            affinity,
            attn: attn.data().view().into_dimensionality::<Ix2>().unwrap().to_owned(),
            x_cf: x_cf.data().view().into_dimensionality::<Ix2>().unwrap().to_owned(),
            x_bm: fused.data().view().into_dimensionality::<Ix3>().unwrap().to_owned(),
        }
    });
    Ok((
        StageFeature {
            map: fused,
            stage_index: x_cm.stage_index,
        },
        trace,
    ))
}
