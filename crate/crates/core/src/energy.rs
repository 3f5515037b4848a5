//! Operation counting and 45 nm energy estimation.
//!
//! Every traced layer reports the MAC count it would need on dense real
//! input (`flops`). Spike-driven layers only accumulate where the input is
//! nonzero, so their synaptic operation count is `fr · flops`. Analog-input
//! layers are charged as MACs.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{BatchNormState, LayerGroup, LayerKind, LayerTrace, Mode};
use crate::tensor::{SpikeTensor, Tensor};

/// Energy per multiply-accumulate, picojoules.
pub const E_MAC_PJ: f64 = 4.6;
/// Energy per accumulate, picojoules.
pub const E_AC_PJ: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Mac,
    Ac,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub group: LayerGroup,
    pub flops: u64,
    pub input_firing_rate: f64,
    pub sops: u64,
    pub op_kind: OpKind,
}

impl LayerCost {
    /// Layer driven by real-valued input.
    pub fn mac(name: &str, kind: LayerKind, group: LayerGroup, flops: u64) -> Self {
        Self {
            name: name.to_string(),
            kind,
            group,
            flops,
            input_firing_rate: 1.0,
            sops: 0,
            op_kind: OpKind::Mac,
        }
    }

    /// Spike-driven layer with `nonzero` of `numel` inputs active.
    pub fn ac(name: &str, kind: LayerKind, group: LayerGroup, flops: u64, nonzero: u64, numel: u64) -> Self {
        let sops = if numel == 0 {
            0
        } else {
            (nonzero as u128 * flops as u128 / numel as u128) as u64
        };
        Self {
            name: name.to_string(),
            kind,
            group,
            flops,
            input_firing_rate: if numel == 0 { 0.0 } else { nonzero as f64 / numel as f64 },
            sops,
            op_kind: OpKind::Ac,
        }
    }

    pub fn from_trace(t: &LayerTrace) -> Self {
        if t.analog_input {
            Self::mac(&t.name, t.kind, t.group, t.flops)
        } else {
            Self::ac(&t.name, t.kind, t.group, t.flops, t.input_nonzero, t.input_len)
        }
    }

    pub fn mac_flops(&self) -> u64 {
        match self.op_kind {
            OpKind::Mac => self.flops,
            OpKind::Ac => 0,
        }
    }

    pub fn energy_mj(&self) -> f64 {
        energy_mj(self.mac_flops() as f64, self.sops as f64)
    }
}

/// `E = E_MAC · FLOPs + E_AC · SOPs`, in millijoules.
pub fn energy_mj(mac_flops: f64, sops: f64) -> f64 {
    (mac_flops * E_MAC_PJ + sops * E_AC_PJ) * 1e-12 * 1e3
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub layers: Vec<LayerCost>,
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub total_mj: f64,
}

impl EnergyReport {
    pub fn from_layers(layers: Vec<LayerCost>) -> Self {
        let (mac, sops) = layers
            .iter()
            .fold((0u64, 0u64), |(m, s), l| (m + l.mac_flops(), s + l.sops));
        Self {
            layers,
            e_mac_pj: E_MAC_PJ,
            e_ac_pj: E_AC_PJ,
            total_mj: energy_mj(mac as f64, sops as f64),
        }
    }

    pub fn mac_flops(&self) -> u64 {
        self.layers.iter().map(|l| l.mac_flops()).sum()
    }

    pub fn total_sops(&self) -> u64 {
        self.layers.iter().map(|l| l.sops).sum()
    }

    pub fn group_sops(&self, group: LayerGroup) -> u64 {
        self.layers.iter().filter(|l| l.group == group).map(|l| l.sops).sum()
    }

    pub fn group_energy_mj(&self, group: LayerGroup) -> f64 {
        let ls = self.layers.iter().filter(|l| l.group == group);
        let (m, s) = ls.fold((0u64, 0u64), |(m, s), l| (m + l.mac_flops(), s + l.sops));
        energy_mj(m as f64, s as f64)
    }

    /// One JSON object per layer.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for l in &self.layers {
            out.push_str(&serde_json::to_string(l).expect("layer cost serializes"));
            out.push('\n');
        }
        out
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<40} {:>8} {:>4} {:>14} {:>7} {:>14}",
            "layer", "group", "op", "flops", "fr", "sops"
        );
        for l in &self.layers {
            let group = match l.group {
                LayerGroup::Conv => "conv",
                LayerGroup::Mstasa => "mstasa",
            };
            let op = match l.op_kind {
                OpKind::Mac => "mac",
                OpKind::Ac => "ac",
            };
            let _ = writeln!(
                s,
                "{:<40} {:>8} {:>4} {:>14} {:>7.4} {:>14}",
                l.name, group, op, l.flops, l.input_firing_rate, l.sops
            );
        }
        let _ = writeln!(s, "mac flops: {}", self.mac_flops());
        let _ = writeln!(s, "sops conv: {}", self.group_sops(LayerGroup::Conv));
        let _ = writeln!(s, "sops mstasa: {}", self.group_sops(LayerGroup::Mstasa));
        let _ = writeln!(s, "total sops: {}", self.total_sops());
        let _ = writeln!(s, "energy: {:.6} mJ", self.total_mj);
        s
    }
}

/// Fraction of nonzero entries.
pub fn measure_firing_rate(x: &SpikeTensor) -> f64 {
    x.firing_rate()
}

/// Shape summary of a layer for dense operation counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerDescriptor {
    Linear { t: usize, b: usize, din: usize, dout: usize },
    Pconv { t: usize, b: usize, din: usize, dout: usize },
    Dconv1d { t: usize, b: usize, d: usize, k: usize },
    Dconv2dHeads { t: usize, b: usize, h: usize, dh: usize, k: usize },
    BatchNorm { folded: bool },
}

impl LayerDescriptor {
    /// Build from a kind name and its dimensions, in the field order above.
    pub fn from_kind(kind: &str, dims: &[usize]) -> Result<Self> {
        let need = |n: usize| {
            if dims.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!("layer kind `{kind}` takes {n} dimensions, got {}", dims.len())))
            }
        };
        Ok(match kind {
            "linear" | "pconv" => {
                need(4)?;
                let (t, b, din, dout) = (dims[0], dims[1], dims[2], dims[3]);
                if kind == "linear" {
                    Self::Linear { t, b, din, dout }
                } else {
                    Self::Pconv { t, b, din, dout }
                }
            }
            "dconv1d" => {
                need(4)?;
                Self::Dconv1d {
                    t: dims[0],
                    b: dims[1],
                    d: dims[2],
                    k: dims[3],
                }
            }
            "dconv2d" => {
                need(5)?;
                Self::Dconv2dHeads {
                    t: dims[0],
                    b: dims[1],
                    h: dims[2],
                    dh: dims[3],
                    k: dims[4],
                }
            }
            "bn" => Self::BatchNorm { folded: true },
            other => return Err(Error::Config(format!("unknown layer kind `{other}`"))),
        })
    }
}

/// Dense MAC count of a layer.
pub fn layer_flops(desc: &LayerDescriptor) -> Result<u64> {
    Ok(match *desc {
        LayerDescriptor::Linear { t, b, din, dout } | LayerDescriptor::Pconv { t, b, din, dout } => {
            (t * b * din * dout) as u64
        }
        LayerDescriptor::Dconv1d { t, b, d, k } => (t * b * d * k) as u64,
        LayerDescriptor::Dconv2dHeads { t, b, h, dh, k } => (t * b * h * dh * k + t * b * dh * h * h) as u64,
        LayerDescriptor::BatchNorm { folded: true } => 0,
        LayerDescriptor::BatchNorm { folded: false } => {
            return Err(Error::Config("unfolded batch norm has no inference cost model".into()))
        }
    })
}

/// Which axis of the weight tensor indexes output channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldLayout {
    /// `[din, dout]` linear weights.
    OutputLast,
    /// `[channels, k]` depthwise kernels.
    OutputFirst,
}

/// Absorb an eval-mode batch norm into the preceding linear map:
/// `w' = γ·w/√(var+eps)`, `b' = γ·(b − mean)/√(var+eps) + β`.
pub fn fold_bn(w: &Tensor, b: Option<&Tensor>, bn: &BatchNormState, layout: FoldLayout) -> Result<(Tensor, Tensor)> {
    if bn.mode != Mode::Eval {
        return Err(Error::Config("cannot fold a train-mode batch norm".into()));
    }
    if w.ndim() != 2 {
        return Err(crate::error::dim_err("fold_bn", "weight rank", 2, w.ndim()));
    }
    let c = bn.gamma.len();
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let out_axis = match layout {
        FoldLayout::OutputLast => cols,
        FoldLayout::OutputFirst => rows,
    };
    if out_axis != c {
        return Err(crate::error::dim_err("fold_bn", "output channel", c, out_axis));
    }
    let scale: Vec<f64> = (0..c).map(|o| bn.gamma[o] / (bn.running_var[o] + bn.eps).sqrt()).collect();
    let mut wf = w.clone();
    for r in 0..rows {
        for col in 0..cols {
            let o = match layout {
                FoldLayout::OutputLast => col,
                FoldLayout::OutputFirst => r,
            };
            wf.data_mut()[r * cols + col] *= scale[o];
        }
    }
    let b0 = b.map(|b| b.data().to_vec()).unwrap_or_else(|| vec![0.0; c]);
    if b0.len() != c {
        return Err(crate::error::dim_err("fold_bn", "bias", c, b0.len()));
    }
    let bf = (0..c)
        .map(|o| scale[o] * (b0[o] - bn.running_mean[o]) + bn.beta[o])
        .collect();
    Ok((wf, Tensor::new(&[c], bf)?))
}
