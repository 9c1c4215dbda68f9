//! Frozen siamese ViT encoder.
//!
//! Runs entirely on plain `ndarray` buffers: no autodiff node is ever
//! created for encoder math, so a training step cannot reach these
//! parameters and no gradient storage exists for encoder activations.
//! Tap outputs are handed to bridging as detached constants.
//!
//! Checkpoint key schema (weights stored `[out, in]`, torch-style):
//!
//! ```text
//! patch_embed.weight            [D, C, P, P]
//! patch_embed.bias              [D]
//! cls_token                     [D]            (when configured)
//! pos_embed                     [N(+1), D]     (class entry first)
//! blocks.{i}.ln1.weight/.bias   [D]
//! blocks.{i}.attn.{q,k,v,out}.weight [D, D], .bias [D]
//! blocks.{i}.ln2.weight/.bias   [D]
//! blocks.{i}.ffn.fc1.weight     [4D, D] (ffn_ratio * D rows), .bias [4D]
//! blocks.{i}.ffn.fc2.weight     [D, 4D], .bias [D]
//! ```

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{check_keys, Container};
use crate::error::{Error, Result};
use crate::ops::LN_EPS;
use crate::raster::{resize_plane, Raster};

pub use crate::raster::aris_resize;

/// Architecture of the frozen ViT.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub ffn_ratio: f32,
    pub pretrain_resolution: usize,
    pub use_class_token: bool,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be >= 1"));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be >= 1"));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.pretrain_resolution % self.patch_size != 0 {
            return Err(Error::config(format!(
                "pretrain_resolution {} not divisible by patch_size {}",
                self.pretrain_resolution, self.patch_size
            )));
        }
        if self.ffn_ratio <= 0.0 {
            return Err(Error::config("ffn_ratio must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.embed_dim as f32 * self.ffn_ratio).round() as usize
    }

    /// Token-grid side at the pretraining resolution.
    pub fn pretrain_grid(&self) -> usize {
        self.pretrain_resolution / self.patch_size
    }
}

/// Token sequence with its 2-D grid shape (class token stored separately).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTokens {
    pub tokens: Array2<f32>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchTokens {
    pub fn new(tokens: Array2<f32>, grid_h: usize, grid_w: usize) -> Result<PatchTokens> {
        if tokens.nrows() != grid_h * grid_w {
            return Err(Error::shape(format!(
                "token count {} does not match grid {}x{}",
                tokens.nrows(),
                grid_h,
                grid_w
            )));
        }
        Ok(PatchTokens {
            tokens,
            grid_h,
            grid_w,
        })
    }

    pub fn count(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Which encoder blocks feed bridging, as 1-based block indices.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TapSet {
    pub indices: Vec<usize>,
}

impl TapSet {
    pub fn new(indices: Vec<usize>) -> TapSet {
        TapSet { indices }
    }

    /// J evenly spaced taps ending at the last block: depth 24, count 4
    /// gives [6, 12, 18, 24].
    pub fn evenly_spaced(depth: usize, count: usize) -> TapSet {
        let indices = (1..=count).map(|j| j * depth / count).collect();
        TapSet { indices }
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.indices.is_empty() {
            return Err(Error::config("tap set is empty"));
        }
        for pair in self.indices.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::config(format!(
                    "tap indices must be strictly increasing, got {:?}",
                    self.indices
                )));
            }
        }
        let last = *self.indices.last().unwrap();
        if self.indices[0] == 0 || last > depth {
            return Err(Error::config(format!(
                "tap indices must lie in [1, {depth}], got {:?}",
                self.indices
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// One transformer block's parameters. Weight matrices are stored in the
/// `x . W` orientation ([in, out]); the i-th head's projections are the
/// column slices `w_q[:, i*dh..(i+1)*dh]`.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gain: Array1<f32>,
    pub ln1_bias: Array1<f32>,
    pub w_q: Array2<f32>,
    pub b_q: Array1<f32>,
    pub w_k: Array2<f32>,
    pub b_k: Array1<f32>,
    pub w_v: Array2<f32>,
    pub b_v: Array1<f32>,
    pub w_o: Array2<f32>,
    pub b_o: Array1<f32>,
    pub ln2_gain: Array1<f32>,
    pub ln2_bias: Array1<f32>,
    pub fc1_w: Array2<f32>,
    pub fc1_b: Array1<f32>,
    pub fc2_w: Array2<f32>,
    pub fc2_b: Array1<f32>,
}

/// Full frozen parameter set.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    /// Patch embedding as a flattened [C*P*P, D] matrix.
    pub patch_weight: Array2<f32>,
    pub patch_bias: Array1<f32>,
    pub cls_token: Option<Array1<f32>>,
    /// Positional table at the pretraining grid, class entry first when present.
    pub pos_embed: Array2<f32>,
    pub blocks: Vec<BlockParams>,
}

impl EncoderParams {
    /// Total scalar count (the frozen side of the parameter report).
    pub fn scalar_count(&self) -> usize {
        let mut n = self.patch_weight.len() + self.patch_bias.len() + self.pos_embed.len();
        if let Some(c) = &self.cls_token {
            n += c.len();
        }
        for b in &self.blocks {
            n += b.ln1_gain.len()
                + b.ln1_bias.len()
                + b.w_q.len()
                + b.b_q.len()
                + b.w_k.len()
                + b.b_k.len()
                + b.w_v.len()
                + b.b_v.len()
                + b.w_o.len()
                + b.b_o.len()
                + b.ln2_gain.len()
                + b.ln2_bias.len()
                + b.fc1_w.len()
                + b.fc1_b.len()
                + b.fc2_w.len()
                + b.fc2_b.len();
        }
        n
    }
}

/// Seeded random initialization, for toy encoders and tests.
pub fn random_params(cfg: &ViTConfig, seed: u64) -> EncoderParams {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let d = cfg.embed_dim;
    let hidden = cfg.ffn_hidden();
    let in_patch = 3 * cfg.patch_size * cfg.patch_size;
    let grid = cfg.pretrain_grid();
    let n_pos = grid * grid + usize::from(cfg.use_class_token);
    let mut mat = |rows: usize, cols: usize, scale: f32| {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
    };
    let patch_weight = mat(in_patch, d, (1.0 / in_patch as f32).sqrt());
    let pos_embed = mat(n_pos, d, 0.02);
    let mut blocks = Vec::with_capacity(cfg.depth);
    let s = (1.0 / d as f32).sqrt();
    for _ in 0..cfg.depth {
        blocks.push(BlockParams {
            ln1_gain: Array1::ones(d),
            ln1_bias: Array1::zeros(d),
            w_q: mat(d, d, s),
            b_q: Array1::zeros(d),
            w_k: mat(d, d, s),
            b_k: Array1::zeros(d),
            w_v: mat(d, d, s),
            b_v: Array1::zeros(d),
            w_o: mat(d, d, s),
            b_o: Array1::zeros(d),
            ln2_gain: Array1::ones(d),
            ln2_bias: Array1::zeros(d),
            fc1_w: mat(d, hidden, s),
            fc1_b: Array1::zeros(hidden),
            fc2_w: mat(hidden, d, (1.0 / hidden as f32).sqrt()),
            fc2_b: Array1::zeros(d),
        });
    }
    let mut rng2 = ChaCha12Rng::seed_from_u64(seed.wrapping_add(1));
    let cls_token = cfg.use_class_token.then(|| {
        Array1::from_shape_fn(d, |_| rng2.random_range(-0.02f32..0.02))
    });
    EncoderParams {
        patch_weight,
        patch_bias: Array1::zeros(d),
        cls_token,
        pos_embed,
        blocks,
    }
}

/// Plain (non-autodiff) per-row layer norm with affine.
pub(crate) fn layer_norm_plain(
    x: &Array2<f32>,
    gain: &Array1<f32>,
    bias: &Array1<f32>,
) -> Array2<f32> {
    let (n, c) = x.dim();
    let mut out = Array2::zeros((n, c));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / c as f32;
        let var = row.fold(0.0f32, |acc, &v| acc + (v - mean) * (v - mean)) / c as f32;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..c {
            out[(i, j)] = (x[(i, j)] - mean) * r * gain[j] + bias[j];
        }
    }
    out
}

/// GELU, tanh form.
pub(crate) fn gelu(v: f32) -> f32 {
    const C: f32 = 0.797_884_56; // sqrt(2/pi)
    0.5 * v * (1.0 + (C * (v + 0.044715 * v * v * v)).tanh())
}

/// Cut a square image into non-overlapping P x P patches and embed each.
pub fn patchify(image: &Raster, cfg: &ViTConfig, params: &EncoderParams) -> Result<PatchTokens> {
    let p = cfg.patch_size;
    let (c, h, w) = image.data.dim();
    if h != w {
        return Err(Error::shape(format!(
            "patchify expects a square raster, got {h}x{w}"
        )));
    }
    if h % p != 0 {
        return Err(Error::shape(format!(
            "image side {h} is not divisible by patch size {p}"
        )));
    }
    let grid = h / p;
    let n = grid * grid;
    let flat_len = c * p * p;
    if params.patch_weight.nrows() != flat_len {
        return Err(Error::shape(format!(
            "patch embedding expects {} inputs, image patches have {}",
            params.patch_weight.nrows(),
            flat_len
        )));
    }
    let mut patches = Array2::<f32>::zeros((n, flat_len));
    for gy in 0..grid {
        for gx in 0..grid {
            let row = gy * grid + gx;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        patches[(row, (ch * p + py) * p + px)] =
                            image.data[(ch, gy * p + py, gx * p + px)];
                    }
                }
            }
        }
    }
    let tokens = patches.dot(&params.patch_weight) + &params.patch_bias;
    PatchTokens::new(tokens, grid, grid)
}

/// Bilinearly interpolate a positional table between token grids. The class
/// entry (when `has_class` is set) passes through unchanged. Identity at
/// equal grids.
pub fn interpolate_pos_embed(
    pos: &Array2<f32>,
    has_class: bool,
    from_grid: (usize, usize),
    to_grid: (usize, usize),
) -> Result<Array2<f32>> {
    let cls_rows = usize::from(has_class);
    let (n_pos, d) = pos.dim();
    if n_pos != from_grid.0 * from_grid.1 + cls_rows {
        return Err(Error::shape(format!(
            "positional table has {n_pos} rows, expected {}x{} grid{}",
            from_grid.0,
            from_grid.1,
            if has_class { " plus class entry" } else { "" }
        )));
    }
    if from_grid == to_grid {
        return Ok(pos.clone());
    }
    let (fh, fw) = from_grid;
    let (th, tw) = to_grid;
    let mut out = Array2::<f32>::zeros((th * tw + cls_rows, d));
    if has_class {
        out.row_mut(0).assign(&pos.row(0));
    }
    // per-channel 2-D bilinear over the grid
    for ch in 0..d {
        let plane = Array2::from_shape_fn((fh, fw), |(y, x)| pos[(cls_rows + y * fw + x, ch)]);
        let resized = resize_plane(&plane, th, tw);
        for y in 0..th {
            for x in 0..tw {
                out[(cls_rows + y * tw + x, ch)] = resized[(y, x)];
            }
        }
    }
    Ok(out)
}

fn check_finite(x: &Array2<f32>, block_idx: usize) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "non-finite value in encoder block {block_idx}"
        )))
    }
}

/// Per-head scaled dot-product attention probabilities for one head's
/// query/key slices: softmax(q k^T / sqrt(dh)) rows.
pub(crate) fn head_attention_probs(q: &Array2<f32>, k: &Array2<f32>) -> Array2<f32> {
    let (n, dh) = q.dim();
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = q.dot(&k.t());
    for i in 0..n {
        let mut row = probs.row_mut(i);
        row *= scale;
        let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

fn msa(x_ln: &Array2<f32>, p: &BlockParams, heads: usize) -> Array2<f32> {
    let (n, d) = x_ln.dim();
    let dh = d / heads;
    let q = x_ln.dot(&p.w_q) + &p.b_q;
    let k = x_ln.dot(&p.w_k) + &p.b_k;
    let v = x_ln.dot(&p.w_v) + &p.b_v;
    let mut concat = Array2::<f32>::zeros((n, d));
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(ndarray::s![.., cols.clone()]).to_owned();
        let kh = k.slice(ndarray::s![.., cols.clone()]).to_owned();
        let vh = v.slice(ndarray::s![.., cols.clone()]).to_owned();
        let probs = head_attention_probs(&qh, &kh);
        let out = probs.dot(&vh);
        concat.slice_mut(ndarray::s![.., cols]).assign(&out);
    }
    concat.dot(&p.w_o) + &p.b_o
}

fn ffn(x_ln: &Array2<f32>, p: &BlockParams) -> Array2<f32> {
    let hidden = (x_ln.dot(&p.fc1_w) + &p.fc1_b).mapv(gelu);
    hidden.dot(&p.fc2_w) + &p.fc2_b
}

/// One pre-norm block: x' = MSA(LN(x)) + x, out = FFN(LN(x')) + x'.
/// `block_idx` is 1-based and only used in diagnostics.
pub fn transformer_block(
    x: &Array2<f32>,
    params: &BlockParams,
    cfg: &ViTConfig,
    block_idx: usize,
) -> Result<Array2<f32>> {
    if x.ncols() != cfg.embed_dim {
        return Err(Error::shape(format!(
            "block {block_idx}: token dim {} does not match embed_dim {}",
            x.ncols(),
            cfg.embed_dim
        )));
    }
    let x_mid = msa(&layer_norm_plain(x, &params.ln1_gain, &params.ln1_bias), params, cfg.num_heads) + x;
    let out = ffn(&layer_norm_plain(&x_mid, &params.ln2_gain, &params.ln2_bias), params) + &x_mid;
    check_finite(&out, block_idx)?;
    Ok(out)
}

/// Full frozen forward pass: returns the block outputs at each tap index
/// with the class token stripped, ready for bridging.
pub fn encoder_forward(
    image: &Raster,
    cfg: &ViTConfig,
    params: &EncoderParams,
    taps: &TapSet,
) -> Result<Vec<PatchTokens>> {
    cfg.validate()?;
    taps.validate(cfg.depth)?;
    let patches = patchify(image, cfg, params)?;
    let (grid_h, grid_w) = (patches.grid_h, patches.grid_w);
    let pretrain = cfg.pretrain_grid();
    let pos = interpolate_pos_embed(
        &params.pos_embed,
        cfg.use_class_token,
        (pretrain, pretrain),
        (grid_h, grid_w),
    )?;
    let mut seq = if let Some(cls) = &params.cls_token {
        let cls_row = cls.view().insert_axis(Axis(0));
        concatenate(Axis(0), &[cls_row, patches.tokens.view()]).expect("class concat")
    } else {
        patches.tokens
    };
    seq += &pos;
    let cls_rows = usize::from(params.cls_token.is_some());
    let mut outputs = Vec::with_capacity(taps.len());
    let mut next_tap = 0;
    for l in 1..=cfg.depth {
        seq = transformer_block(&seq, &params.blocks[l - 1], cfg, l)?;
        if next_tap < taps.indices.len() && taps.indices[next_tap] == l {
            let body = seq.slice(ndarray::s![cls_rows.., ..]).to_owned();
            outputs.push(PatchTokens::new(body, grid_h, grid_w)?);
            next_tap += 1;
        }
    }
    Ok(outputs)
}

// ---- checkpoint io ----------------------------------------------------

fn expected_keys(cfg: &ViTConfig) -> Vec<String> {
    let mut keys = vec![
        "patch_embed.weight".to_string(),
        "patch_embed.bias".to_string(),
        "pos_embed".to_string(),
    ];
    if cfg.use_class_token {
        keys.push("cls_token".to_string());
    }
    for i in 0..cfg.depth {
        for part in [
            "ln1.weight",
            "ln1.bias",
            "attn.q.weight",
            "attn.q.bias",
            "attn.k.weight",
            "attn.k.bias",
            "attn.v.weight",
            "attn.v.bias",
            "attn.out.weight",
            "attn.out.bias",
            "ln2.weight",
            "ln2.bias",
            "ffn.fc1.weight",
            "ffn.fc1.bias",
            "ffn.fc2.weight",
            "ffn.fc2.bias",
        ] {
            keys.push(format!("blocks.{i}.{part}"));
        }
    }
    keys
}

pub fn params_to_container(cfg: &ViTConfig, params: &EncoderParams) -> Container {
    let mut c = Container::new();
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    // [C*P*P, D] -> [D, C, P, P]
    let pw = params
        .patch_weight
        .t()
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((d, 3, p, p))
        .expect("patch weight shape");
    c.insert("patch_embed.weight", pw.into_dyn());
    c.insert("patch_embed.bias", params.patch_bias.clone().into_dyn());
    if let Some(cls) = &params.cls_token {
        c.insert("cls_token", cls.clone().into_dyn());
    }
    c.insert("pos_embed", params.pos_embed.clone().into_dyn());
    for (i, b) in params.blocks.iter().enumerate() {
        let mut put1 = |name: &str, a: &Array1<f32>| {
            c.insert(format!("blocks.{i}.{name}"), a.clone().into_dyn());
        };
        put1("ln1.weight", &b.ln1_gain);
        put1("ln1.bias", &b.ln1_bias);
        put1("attn.q.bias", &b.b_q);
        put1("attn.k.bias", &b.b_k);
        put1("attn.v.bias", &b.b_v);
        put1("attn.out.bias", &b.b_o);
        put1("ln2.weight", &b.ln2_gain);
        put1("ln2.bias", &b.ln2_bias);
        put1("ffn.fc1.bias", &b.fc1_b);
        put1("ffn.fc2.bias", &b.fc2_b);
        let mut put2 = |name: &str, a: &Array2<f32>| {
            c.insert(
                format!("blocks.{i}.{name}"),
                a.t().as_standard_layout().into_owned().into_dyn(),
            );
        };
        put2("attn.q.weight", &b.w_q);
        put2("attn.k.weight", &b.w_k);
        put2("attn.v.weight", &b.w_v);
        put2("attn.out.weight", &b.w_o);
        put2("ffn.fc1.weight", &b.fc1_w);
        put2("ffn.fc2.weight", &b.fc2_w);
    }
    c
}

/// Load encoder parameters. Returns the params and any extra (ignored)
/// keys for the caller to warn about; missing keys are a checkpoint error
/// listing every absent name.
pub fn params_from_container(
    cfg: &ViTConfig,
    container: &Container,
) -> Result<(EncoderParams, Vec<String>)> {
    cfg.validate()?;
    let extras = check_keys(container, &expected_keys(cfg))?;
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let grid = cfg.pretrain_grid();
    let n_pos = grid * grid + usize::from(cfg.use_class_token);

    let get2 = |name: &str, rows: usize, cols: usize| -> Result<Array2<f32>> {
        let t = container.require(name)?;
        let a = t
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|_| Error::checkpoint(format!("{name} is not rank 2")))?;
        if a.dim() != (rows, cols) {
            return Err(Error::checkpoint(format!(
                "{name} has shape {:?}, expected [{rows}, {cols}]",
                a.shape()
            )));
        }
        Ok(a.to_owned())
    };
    let get1 = |name: &str, len: usize| -> Result<Array1<f32>> {
        let t = container.require(name)?;
        let a = t
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| Error::checkpoint(format!("{name} is not rank 1")))?;
        if a.len() != len {
            return Err(Error::checkpoint(format!(
                "{name} has length {}, expected {len}",
                a.len()
            )));
        }
        Ok(a.to_owned())
    };

    let pw_raw = container.require("patch_embed.weight")?;
    if pw_raw.shape() != [d, 3, p, p] {
        return Err(Error::checkpoint(format!(
            "patch_embed.weight has shape {:?}, expected [{d}, 3, {p}, {p}]",
            pw_raw.shape()
        )));
    }
    let patch_weight = pw_raw
        .view()
        .into_shape_with_order((d, 3 * p * p))
        .unwrap()
        .t()
        .to_owned();
    let hidden = cfg.ffn_hidden();
    let mut blocks = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let k = |name: &str| format!("blocks.{i}.{name}");
        blocks.push(BlockParams {
            ln1_gain: get1(&k("ln1.weight"), d)?,
            ln1_bias: get1(&k("ln1.bias"), d)?,
            w_q: get2(&k("attn.q.weight"), d, d)?.t().to_owned(),
            b_q: get1(&k("attn.q.bias"), d)?,
            w_k: get2(&k("attn.k.weight"), d, d)?.t().to_owned(),
            b_k: get1(&k("attn.k.bias"), d)?,
            w_v: get2(&k("attn.v.weight"), d, d)?.t().to_owned(),
            b_v: get1(&k("attn.v.bias"), d)?,
            w_o: get2(&k("attn.out.weight"), d, d)?.t().to_owned(),
            b_o: get1(&k("attn.out.bias"), d)?,
            ln2_gain: get1(&k("ln2.weight"), d)?,
            ln2_bias: get1(&k("ln2.bias"), d)?,
            fc1_w: get2(&k("ffn.fc1.weight"), hidden, d)?.t().to_owned(),
            fc1_b: get1(&k("ffn.fc1.bias"), hidden)?,
            fc2_w: get2(&k("ffn.fc2.weight"), d, hidden)?.t().to_owned(),
            fc2_b: get1(&k("ffn.fc2.bias"), d)?,
        });
    }
    let params = EncoderParams {
        patch_weight,
        patch_bias: get1("patch_embed.bias", d)?,
        cls_token: if cfg.use_class_token {
            Some(get1("cls_token", d)?)
        } else {
            None
        },
        pos_embed: get2("pos_embed", n_pos, d)?,
        blocks,
    };
    Ok((params, extras))
}
