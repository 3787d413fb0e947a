//! The text-oriented cross-attention network.
//!
//! Each modality is projected to a common `L × d` sequence. Two branches
//! (text–acoustic and text–visual by default) stack `N` modules; in every
//! module the text stream refines itself with self-attention while the
//! partner stream is rebuilt by text-queried cross-attention, mixed with its
//! previous value through a memory gate and a fuse gate. The four final
//! streams are pooled, concatenated and fed to an MLP. During training a
//! shared-weight encoder plus per-modality heads produce unimodal
//! predictions for the auxiliary loss.

pub mod config;
pub mod layers;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use config::{ModalitySubset, Modality, ModelConfig, Pooling};
use layers::{
    pool, positional_table, resample_matrix, AttentionOutput, AttentionParams, Builder, ConvParams, FfnParams,
    GateParams, LayerNormParams, MlpParams,
};

/// Raw feature widths per modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct InputWidths {
    pub text: usize,
    pub visual: usize,
    pub acoustic: usize,
}

impl InputWidths {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Visual => self.visual,
            Modality::Acoustic => self.acoustic,
        }
    }
}

/// One stacked module of a branch.
#[derive(Clone, Debug)]
pub struct CrossModuleParams {
    pub ln_text: LayerNormParams,
    pub ln_cross: LayerNormParams,
    pub self_attn: AttentionParams,
    pub cross_attn: AttentionParams,
    pub gate: Option<GateParams>,
    pub ffn_text: FfnParams,
    pub ffn_cross: FfnParams,
}

/// One module of the single-modality reduction: self-attention and FFN only.
#[derive(Clone, Debug)]
pub struct SoloModuleParams {
    pub ln: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Debug)]
pub struct BranchParams {
    pub partner: Modality,
    pub layers: Vec<CrossModuleParams>,
}

#[derive(Clone, Debug)]
enum Streams {
    Solo {
        modality: Modality,
        layers: Vec<SoloModuleParams>,
    },
    Branches(Vec<BranchParams>),
}

#[derive(Clone, Debug)]
struct Layout {
    projections: [Option<ConvParams>; 3],
    streams: Streams,
    head: MlpParams,
    shared_encoder: Option<ConvParams>,
    uni_heads: [Option<MlpParams>; 3],
}

/// Which attention produced a weight matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Cross,
    SelfAttention,
}

#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub kind: AttentionKind,
    pub layer: usize,
    pub query: Modality,
    pub key: Modality,
    /// Per-head `L × L` weights.
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct GateTrace {
    pub partner: Modality,
    pub layer: usize,
    pub memory: Var,
    pub fuse: Var,
}

#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    pub attention: Vec<AttentionTrace>,
    pub gates: Vec<GateTrace>,
}

impl Diagnostics {
    /// Mean memory and fuse gate activation per traced layer.
    pub fn gate_means(&self, tape: &Tape) -> Vec<(Modality, usize, f32, f32)> {
        let mean = |v: Var| {
            let x = tape.value(v);
            x.iter().sum::<f32>() / x.len() as f32
        };
        self.gates
            .iter()
            .map(|g| (g.partner, g.layer, mean(g.memory), mean(g.fuse)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Multimodal prediction, a `1 × 1` node.
    pub y_pred: Var,
    /// Unimodal predictions, present only in training mode with joint
    /// learning enabled.
    pub y_uni: Option<Vec<(Modality, Var)>>,
    /// Projected `L × d` features per active modality.
    pub projected: Vec<(Modality, Var)>,
    /// Final streams in concatenation order.
    pub streams: Vec<Var>,
    pub diagnostics: Diagnostics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct Tcan {
    config: ModelConfig,
    widths: InputWidths,
    params: ParamStore,
    layout: Layout,
}

impl Tcan {
    pub fn new(config: ModelConfig, widths: InputWidths, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let layout = build_layout(&config, widths, &mut Builder { store: &mut params, seed })?;
        Ok(Self {
            config,
            widths,
            params,
            layout,
        })
    }

    /// Rebuilds a model around an existing parameter set, which must match
    /// the architecture exactly.
    pub fn from_params(config: ModelConfig, widths: InputWidths, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, widths, 0)?;
        model.params.copy_values_from(&params)?;
        Ok(model)
    }

    /// The same architecture bound to `params`, which must have been
    /// derived from this model's store (same names at the same ids).
    pub fn with_params(&self, params: &ParamStore) -> Result<Self> {
        let same = params.len() == self.params.len()
            && self.params.iter().all(|(id, name, t)| {
                params.id(name) == Some(id) && params.get(id).dims() == t.dims()
            });
        if !same {
            let (missing, extra) = self.params.name_diff(params);
            return Err(Error::CheckpointMismatch { missing, extra });
        }
        Ok(Self {
            config: self.config.clone(),
            widths: self.widths,
            params: params.clone(),
            layout: self.layout.clone(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn widths(&self) -> InputWidths {
        self.widths
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn branches(&self) -> &[BranchParams] {
        match &self.layout.streams {
            Streams::Branches(b) => b,
            Streams::Solo { .. } => &[],
        }
    }

    /// Query modality of every attention block.
    pub fn center(&self) -> Modality {
        match &self.layout.streams {
            Streams::Solo { modality, .. } => *modality,
            Streams::Branches(_) => self.config.center_modality,
        }
    }

    /// Projects raw features to `L × d`: temporal convolution, linear
    /// resampling to `L` steps, then (optionally) positional encoding.
    pub fn project_unimodal(&self, tape: &mut Tape, modality: Modality, x: &Tensor, id: &str) -> Result<Var> {
        let conv = self.layout.projections[modality.index()]
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{modality} is not used by this model")))?;
        let expected = self.widths.get(modality);
        let (rows, width) = match x.dims() {
            [r, w] => (*r, *w),
            _ => return Err(Error::dim("project_unimodal", x.dims(), &[0, expected])),
        };
        if width != expected {
            return Err(Error::WidthMismatch {
                id: id.to_string(),
                modality: modality.name(),
                expected,
                found: width,
            });
        }
        if rows == 0 {
            return Err(Error::Contract(format!("empty {modality} sequence in {id:?}")));
        }
        let xv = tape.leaf(x);
        let h = conv.forward(tape, &self.params, xv)?;
        let l = self.config.seq_len;
        let r = tape.constant(&[l, rows], resample_matrix(rows, l))?;
        let mut out = tape.matmul(r, h)?;
        if self.config.positional_encoding {
            let d = self.config.d;
            let pe = tape.constant(&[l, d], positional_table(l, d))?;
            out = tape.add(out, pe)?;
        }
        Ok(out)
    }

    /// Runs the `N` stacked modules of one branch and returns the final
    /// `(cross, text)` streams.
    pub fn branch_forward(
        &self,
        tape: &mut Tape,
        branch: &BranchParams,
        f_partner: Var,
        f_center: Var,
        diag: &mut Diagnostics,
    ) -> Result<(Var, Var)> {
        let center = self.config.center_modality;
        let residual = self.config.attention_residual;
        let (mut cross, mut text) = (f_partner, f_center);
        for (i, layer) in branch.layers.iter().enumerate() {
            let text_n = layer.ln_text.forward(tape, &self.params, text)?;
            let cross_n = layer.ln_cross.forward(tape, &self.params, cross)?;

            let sa = self_attention_block(tape, &self.params, &layer.self_attn, text_n, residual)?;
            diag.attention.push(AttentionTrace {
                kind: AttentionKind::SelfAttention,
                layer: i,
                query: center,
                key: center,
                weights: sa.weights,
            });
            let text_next = layer.ffn_text.forward(tape, &self.params, sa.output)?;

            let ca = cross_attention_block(tape, &self.params, &layer.cross_attn, cross_n, text_n, residual)?;
            diag.attention.push(AttentionTrace {
                kind: AttentionKind::Cross,
                layer: i,
                query: center,
                key: branch.partner,
                weights: ca.weights,
            });
            let fused = match &layer.gate {
                Some(gate) => {
                    let g = gate.forward(tape, &self.params, cross_n, ca.output, text_n)?;
                    diag.gates.push(GateTrace {
                        partner: branch.partner,
                        layer: i,
                        memory: g.memory_gate,
                        fuse: g.fuse_gate,
                    });
                    g.output
                }
                None => ca.output,
            };
            cross = layer.ffn_cross.forward(tape, &self.params, fused)?;
            text = text_next;
        }
        Ok((cross, text))
    }

    /// Pools every stream, concatenates along features and applies the
    /// prediction MLP.
    pub fn fuse_and_predict(&self, tape: &mut Tape, streams: &[Var]) -> Result<Var> {
        let mut joint: Option<Var> = None;
        for &s in streams {
            let p = pool(tape, s, self.config.pooling)?;
            joint = Some(match joint {
                None => p,
                Some(j) => tape.concat_cols(j, p)?,
            });
        }
        let joint = joint.ok_or_else(|| Error::Contract("no streams to fuse".into()))?;
        self.layout.head.forward(tape, &self.params, joint)
    }

    /// Shared-weight encoder plus per-modality heads.
    pub fn homogeneous_branch(&self, tape: &mut Tape, projected: &[(Modality, Var)]) -> Result<Vec<(Modality, Var)>> {
        let encoder = self
            .layout
            .shared_encoder
            .as_ref()
            .ok_or_else(|| Error::Config("joint learning is disabled".into()))?;
        projected
            .iter()
            .map(|&(m, f)| {
                let h = encoder.forward(tape, &self.params, f)?;
                let h = tape.relu(h);
                let p = pool(tape, h, self.config.pooling)?;
                let head = self.layout.uni_heads[m.index()].as_ref().expect("head per active modality");
                Ok((m, head.forward(tape, &self.params, p)?))
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, sample: &Sample, mode: Mode) -> Result<ForwardOutput> {
        let mut diag = Diagnostics::default();
        let projected: Vec<(Modality, Var)> = self
            .config
            .modalities
            .modalities()
            .into_iter()
            .map(|m| Ok((m, self.project_unimodal(tape, m, sample.features(m), &sample.id)?)))
            .collect::<Result<_>>()?;
        let feature = |m: Modality| projected.iter().find(|(pm, _)| *pm == m).map(|p| p.1).expect("projected");

        let streams = match &self.layout.streams {
            Streams::Solo { modality, layers } => {
                let mut x = feature(*modality);
                for (i, layer) in layers.iter().enumerate() {
                    let n = layer.ln.forward(tape, &self.params, x)?;
                    let sa = self_attention_block(tape, &self.params, &layer.self_attn, n, self.config.attention_residual)?;
                    diag.attention.push(AttentionTrace {
                        kind: AttentionKind::SelfAttention,
                        layer: i,
                        query: *modality,
                        key: *modality,
                        weights: sa.weights,
                    });
                    x = layer.ffn.forward(tape, &self.params, sa.output)?;
                }
                vec![x]
            }
            Streams::Branches(branches) => {
                let center = feature(self.config.center_modality);
                let mut out = Vec::with_capacity(2 * branches.len());
                for b in branches {
                    let (c, t) = self.branch_forward(tape, b, feature(b.partner), center, &mut diag)?;
                    out.push(c);
                    out.push(t);
                }
                out
            }
        };
        let y_pred = self.fuse_and_predict(tape, &streams)?;
        let y_uni = if mode == Mode::Train && self.config.joint_learning_enabled {
            Some(self.homogeneous_branch(tape, &projected)?)
        } else {
            None
        };
        Ok(ForwardOutput {
            y_pred,
            y_uni,
            projected,
            streams,
            diagnostics: diag,
        })
    }

    /// Evaluation-mode prediction for one sample.
    pub fn predict(&self, sample: &Sample) -> Result<f32> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, sample, Mode::Eval)?;
        Ok(tape.scalar(out.y_pred))
    }

    pub fn predict_all(&self, samples: &[Sample]) -> Result<Vec<f32>> {
        samples.iter().map(|s| self.predict(s)).collect()
    }
}

/// Text-queried attention: queries from `f_text`, keys and values from
/// `f_cross`. Both inputs are expected to be layer-normalised already.
pub fn cross_attention_block(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    f_cross: Var,
    f_text: Var,
    residual: bool,
) -> Result<AttentionOutput> {
    let mut out = params.forward(tape, store, f_text, f_cross)?;
    if residual {
        out.output = tape.add(out.output, f_cross)?;
    }
    Ok(out)
}

pub fn self_attention_block(
    tape: &mut Tape,
    store: &ParamStore,
    params: &AttentionParams,
    f_text: Var,
    residual: bool,
) -> Result<AttentionOutput> {
    let mut out = params.forward(tape, store, f_text, f_text)?;
    if residual {
        out.output = tape.add(out.output, f_text)?;
    }
    Ok(out)
}

/// Gated mix of the previous cross stream and the attention output; with no
/// gate the attention output passes through unchanged.
pub fn gated_fusion(
    tape: &mut Tape,
    store: &ParamStore,
    gate: Option<&GateParams>,
    f_prev: Var,
    f_attn: Var,
    f_text: Var,
) -> Result<Var> {
    match gate {
        Some(g) => Ok(g.forward(tape, store, f_prev, f_attn, f_text)?.output),
        None => Ok(f_attn),
    }
}

fn build_layout(cfg: &ModelConfig, widths: InputWidths, b: &mut Builder<'_>) -> Result<Layout> {
    let d = cfg.d;
    let active = cfg.modalities.modalities();
    let mut projections: [Option<ConvParams>; 3] = Default::default();
    for &m in &active {
        projections[m.index()] = Some(ConvParams::new(
            b,
            &format!("proj.{}.conv", m.tag()),
            cfg.conv_kernel,
            widths.get(m),
            d,
        )?);
    }

    let (streams, n_streams) = match cfg.modalities {
        ModalitySubset::Single(m) => {
            let layers = (0..cfg.depth)
                .map(|i| {
                    let p = format!("solo.{}.layer.{i}", m.tag());
                    Ok(SoloModuleParams {
                        ln: LayerNormParams::new(b, &format!("{p}.ln_text"), d)?,
                        self_attn: AttentionParams::new(b, &format!("{p}.self_attn"), d, cfg.heads)?,
                        ffn: FfnParams::new(b, &format!("{p}.ffn_text"), d, cfg.ffn_mult)?,
                    })
                })
                .collect::<Result<_>>()?;
            (Streams::Solo { modality: m, layers }, 1)
        }
        ModalitySubset::Pair(p) => (Streams::Branches(vec![build_branch(cfg, p, b)?]), 2),
        ModalitySubset::Full => {
            let branches = cfg
                .center_modality
                .partners()
                .into_iter()
                .map(|p| build_branch(cfg, p, b))
                .collect::<Result<_>>()?;
            (Streams::Branches(branches), 4)
        }
    };
    let head = MlpParams::new(b, "head", n_streams * d, d)?;

    let mut uni_heads: [Option<MlpParams>; 3] = Default::default();
    let shared_encoder = if cfg.joint_learning_enabled {
        for &m in &active {
            uni_heads[m.index()] = Some(MlpParams::new(b, &format!("uni_head.{}", m.tag()), d, d)?);
        }
        Some(ConvParams::new(b, "shared_encoder.conv", cfg.conv_kernel, d, d)?)
    } else {
        None
    };
    Ok(Layout {
        projections,
        streams,
        head,
        shared_encoder,
        uni_heads,
    })
}

fn build_branch(cfg: &ModelConfig, partner: Modality, b: &mut Builder<'_>) -> Result<BranchParams> {
    let d = cfg.d;
    let layers = (0..cfg.depth)
        .map(|i| {
            let p = format!("branch.{}.layer.{i}", partner.tag());
            Ok(CrossModuleParams {
                ln_text: LayerNormParams::new(b, &format!("{p}.ln_text"), d)?,
                ln_cross: LayerNormParams::new(b, &format!("{p}.ln_cross"), d)?,
                self_attn: AttentionParams::new(b, &format!("{p}.self_attn"), d, cfg.heads)?,
                cross_attn: AttentionParams::new(b, &format!("{p}.cross_attn"), d, cfg.heads)?,
                gate: if cfg.gates_enabled {
                    Some(GateParams::new(b, &format!("{p}.gate"), d)?)
                } else {
                    None
                },
                ffn_text: FfnParams::new(b, &format!("{p}.ffn_text"), d, cfg.ffn_mult)?,
                ffn_cross: FfnParams::new(b, &format!("{p}.ffn_cross"), d, cfg.ffn_mult)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BranchParams { partner, layers })
}
