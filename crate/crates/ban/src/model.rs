//! BAN assembly: frozen encoder + bridging modules + adapter branch.
//!
//! The forward pass follows the serial schedule: per phase, ARIS resize and
//! patch/position embedding, then for each stage j the encoder blocks up to
//! tap j run as a chunk, the adapter stage runs, and bridge j injects into
//! its output. The encoder runs outside the autodiff graph; bridging
//! receives its tap outputs as detached constants.

use crate::autodiff::{ParamGroup, ParamSet, Tensor};
use crate::bitab::{
    self, BiTabParams, BiTabSpec, ChangeLogits, HeadKind, StageFeature,
};
use crate::bridge::{bridge_forward, BridgeOptions, BridgeParams, BridgeTrace};
use crate::checkpoint::Container;
use crate::encoder::{self, EncoderParams, TapSet, ViTConfig};
use crate::error::{Error, Result};
use crate::raster::{aris_resize, Raster};

/// The composite model.
#[derive(Debug, Clone)]
pub struct BanModel {
    pub vit: ViTConfig,
    pub encoder: EncoderParams,
    pub taps: TapSet,
    pub bridges: Vec<BridgeParams>,
    pub bridge_options: BridgeOptions,
    pub spec: BiTabSpec,
    pub bitab: BiTabParams,
    pub aris_target: usize,
}

/// Learnable/frozen accounting with a per-component breakdown.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub learnable_count: usize,
    pub frozen_count: usize,
    pub breakdown: Vec<(String, usize)>,
}

impl ParamReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, count) in &self.breakdown {
            out.push_str(&format!("{name:<24} {count}\n"));
        }
        out.push_str(&format!(
            "{:<24} {} ({:.2} M)\n",
            "learnable total",
            self.learnable_count,
            self.learnable_count as f64 / 1e6
        ));
        out.push_str(&format!(
            "{:<24} {} ({:.2} M)\n",
            "frozen total",
            self.frozen_count,
            self.frozen_count as f64 / 1e6
        ));
        out
    }
}

/// Traces of every bridge application in one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTraces {
    /// (phase 1-based, stage 1-based, trace)
    pub entries: Vec<(usize, usize, BridgeTrace)>,
}

impl ForwardTraces {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        for (phase, stage, t) in &self.entries {
            let p = format!("trace.phase{phase}.stage{stage}");
            c.insert(format!("{p}.x_fm"), t.x_fm.clone().into_dyn());
            c.insert(format!("{p}.x_tilde_fm"), t.x_tilde_fm.clone().into_dyn());
            c.insert(format!("{p}.affinity"), t.affinity.clone().into_dyn());
            c.insert(format!("{p}.attn"), t.attn.clone().into_dyn());
            c.insert(format!("{p}.x_cf"), t.x_cf.clone().into_dyn());
            c.insert(format!("{p}.x_bm"), t.x_bm.clone().into_dyn());
        }
        c
    }
}

impl BanModel {
    /// Assemble a model, checking tap/stage/bridge consistency up front.
    pub fn assemble(
        vit: ViTConfig,
        encoder: EncoderParams,
        taps: TapSet,
        spec: BiTabSpec,
        bitab: BiTabParams,
        bridges: Vec<BridgeParams>,
        bridge_options: BridgeOptions,
        aris_target: usize,
    ) -> Result<BanModel> {
        vit.validate()?;
        spec.validate()?;
        taps.validate(vit.depth)?;
        let j = spec.num_stages();
        if taps.len() != j || bridges.len() != j {
            return Err(Error::config(format!(
                "stage/tap/bridge counts disagree: {} stages, {} taps, {} bridges",
                j,
                taps.len(),
                bridges.len()
            )));
        }
        for (idx, b) in bridges.iter().enumerate() {
            if b.c_f() != vit.embed_dim {
                return Err(Error::config(format!(
                    "bridge {} expects C_f {}, encoder width is {}",
                    idx + 1,
                    b.c_f(),
                    vit.embed_dim
                )));
            }
            if b.c_c() != spec.stage_out_channels(idx + 1) {
                return Err(Error::config(format!(
                    "bridge {} expects C_c {}, stage width is {}",
                    idx + 1,
                    b.c_c(),
                    spec.stage_out_channels(idx + 1)
                )));
            }
        }
        if aris_target == 0 {
            return Err(Error::config("aris_target must be positive"));
        }
        Ok(BanModel {
            vit,
            encoder,
            taps,
            bridges,
            bridge_options,
            spec,
            bitab,
            aris_target,
        })
    }

    /// Build a model with fresh parameters from the architecture pieces.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        vit: ViTConfig,
        encoder: EncoderParams,
        taps: Option<TapSet>,
        spec: BiTabSpec,
        zero_init_bridges: bool,
        bridge_options: BridgeOptions,
        aris_target: usize,
        seed: u64,
    ) -> Result<BanModel> {
        let j = spec.num_stages();
        let taps = taps.unwrap_or_else(|| TapSet::evenly_spaced(vit.depth, j));
        let bitab = BiTabParams::init(&spec, seed)?;
        let bridges = (1..=j)
            .map(|stage| {
                BridgeParams::init(
                    vit.embed_dim,
                    spec.stage_out_channels(stage),
                    zero_init_bridges,
                    seed.wrapping_add(1000 + stage as u64),
                )
            })
            .collect();
        BanModel::assemble(vit, encoder, taps, spec, bitab, bridges, bridge_options, aris_target)
    }

    /// Every trainable parameter: bridges and the adapter branch.
    pub fn learnable_params(&self) -> ParamSet {
        let mut set = ParamSet::default();
        for (idx, b) in self.bridges.iter().enumerate() {
            b.collect(idx + 1, &mut set);
        }
        self.bitab.collect(&mut set);
        set
    }

    pub fn save_learnable(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.learnable_params().to_container().write(path)
    }

    /// Load trainable parameters from a container; returns extra-key warnings.
    pub fn load_learnable(&self, container: &Container) -> Result<Vec<String>> {
        self.learnable_params().load_container(container)
    }

    fn forward_impl(
        &self,
        x1: &Raster,
        x2: &Raster,
        want_traces: bool,
    ) -> Result<(ChangeLogits, Option<ForwardTraces>)> {
        if x1.data.dim() != x2.data.dim() {
            return Err(Error::shape(format!(
                "bi-temporal pair differs in size: {:?} vs {:?}",
                x1.data.dim(),
                x2.data.dim()
            )));
        }
        let j = self.spec.num_stages();
        let out_hw = (x1.height(), x1.width());
        let mut traces = want_traces.then(ForwardTraces::default);
        let mut phase_features: Vec<Vec<StageFeature>> = Vec::with_capacity(2);
        for (phase, image) in [x1, x2].into_iter().enumerate() {
            let fm_input = aris_resize(image, self.aris_target)?;
            let fm_taps =
                encoder::encoder_forward(&fm_input, &self.vit, &self.encoder, &self.taps)?;
            let mut feature = bitab::bitab_pre(&bitab::image_tensor(image), &self.spec, &self.bitab)?;
            let mut features = Vec::with_capacity(j);
            for stage in 1..=j {
                feature = bitab::bitab_stage(&feature, stage, &self.spec, &self.bitab)?;
                let (bridged, trace) = bridge_forward(
                    &fm_taps[stage - 1],
                    &feature,
                    &self.bridges[stage - 1],
                    self.bridge_options,
                    want_traces,
                )?;
                feature = bridged;
                if let (Some(ts), Some(t)) = (traces.as_mut(), trace) {
                    ts.entries.push((phase + 1, stage, t));
                }
                features.push(feature.clone());
            }
            phase_features.push(features);
        }
        let f2 = phase_features.pop().unwrap();
        let f1 = phase_features.pop().unwrap();
        let logits = match self.spec.head_kind {
            HeadKind::BinaryChange => ChangeLogits {
                change: bitab::change_head(&f1, &f2, &self.spec, &self.bitab, out_hw)?,
                semantic: None,
            },
            HeadKind::Scd => bitab::scd_heads(&f1, &f2, &self.spec, &self.bitab, out_hw)?,
        };
        Ok((logits, traces))
    }

    /// Forward pass of the full network.
    pub fn forward(&self, x1: &Raster, x2: &Raster) -> Result<ChangeLogits> {
        Ok(self.forward_impl(x1, x2, false)?.0)
    }

    /// Forward pass capturing per-stage bridge traces.
    pub fn forward_traced(&self, x1: &Raster, x2: &Raster) -> Result<(ChangeLogits, ForwardTraces)> {
        let (logits, traces) = self.forward_impl(x1, x2, true)?;
        Ok((logits, traces.unwrap()))
    }

    /// The plain adapter branch on the same inputs, bridging skipped.
    pub fn bitab_only_forward(&self, x1: &Raster, x2: &Raster) -> Result<ChangeLogits> {
        let out_hw = (x1.height(), x1.width());
        bitab::bitab_forward(
            &bitab::image_tensor(x1),
            &bitab::image_tensor(x2),
            &self.spec,
            &self.bitab,
            out_hw,
        )
    }
}

pub fn ban_forward(model: &BanModel, x1: &Raster, x2: &Raster) -> Result<ChangeLogits> {
    model.forward(x1, x2)
}

/// Learnable = bridges + adapter branch; frozen = encoder. Per-stage bridge
/// counts follow the closed form 2*C_f + C_f*C_c + C_c.
pub fn count_params(model: &BanModel) -> ParamReport {
    let mut breakdown = Vec::new();
    let mut learnable = 0usize;
    for (idx, b) in model.bridges.iter().enumerate() {
        let n = b.scalar_count();
        breakdown.push((format!("bridge.{}", idx + 1), n));
        learnable += n;
    }
    let set = model.learnable_params();
    let backbone: usize = set
        .params
        .iter()
        .filter(|p| p.group == ParamGroup::Backbone && p.name.starts_with("bitab."))
        .map(|p| p.tensor.len())
        .sum();
    let heads: usize = set
        .params
        .iter()
        .filter(|p| p.group == ParamGroup::Head)
        .map(|p| p.tensor.len())
        .sum();
    breakdown.push(("bitab backbone".to_string(), backbone));
    breakdown.push(("heads".to_string(), heads));
    learnable += backbone + heads;
    let frozen = model.encoder.scalar_count();
    breakdown.push(("encoder (frozen)".to_string(), frozen));
    debug_assert_eq!(learnable, set.scalar_count());
    ParamReport {
        learnable_count: learnable,
        frozen_count: frozen,
        breakdown,
    }
}

/// Analytic bridge parameter total for a hypothetical configuration.
pub fn bridge_param_formula(c_f: usize, stage_channels: &[usize]) -> usize {
    stage_channels
        .iter()
        .map(|&c_c| 2 * c_f + c_f * c_c + c_c)
        .sum()
}

/// Detached-constant check used by tests: a forward pass must leave tap
/// tensors gradient-free after backward.
pub fn image_pair_tensor(x: &Raster) -> Tensor {
    bitab::image_tensor(x)
}
