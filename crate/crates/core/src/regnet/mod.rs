//! The registration network: classification block, DNN and Procrustes
//! registration heads, the two-stage refinement cascade and the losses.
//!
//! Every stage `k` (1-based) owns parameters named `s{k}.<layer>`, so a single
//! [`RegNetParams`] map can hold a lone network or a whole cascade.

mod loss;
mod network;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bindings, Tensor};
use crate::error::{Error, Result};

pub use loss::{
    class_balance, loss_classification, loss_registration, loss_total, loss_total_refined, LossConfig, Metric,
};
pub use network::{
    decode_pose, forward_classify, forward_refined, forward_register_dnn, forward_register_procrustes,
    Classification, Forward, NetGraph, PairTensors, RefinedOutput,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationMode {
    Lie,
    Quaternion,
    Linear,
}

impl RotationMode {
    pub const ALL: [RotationMode; 3] = [RotationMode::Lie, RotationMode::Quaternion, RotationMode::Linear];

    /// Number of rotation outputs `M`.
    pub fn dim(self) -> usize {
        match self {
            RotationMode::Lie => 3,
            RotationMode::Quaternion => 4,
            RotationMode::Linear => 9,
        }
    }
}

impl std::str::FromStr for RotationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lie" => Ok(Self::Lie),
            "quaternion" => Ok(Self::Quaternion),
            "linear" => Ok(Self::Linear),
            _ => Err(Error::InvalidInput(format!("unknown rotation mode '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Dnn,
    Procrustes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegNetConfig {
    /// ResNet block count `C`.
    pub blocks: usize,
    pub width: usize,
    pub rotation: RotationMode,
    pub head: HeadKind,
    pub conv_channels: usize,
    /// Kernel `[rows, cols]`; rows run over the stage axis.
    pub conv_kernel: [usize; 2],
    pub conv_stride: [usize; 2],
    pub hidden: usize,
    /// Weight threshold `𝒯` used by the Procrustes head and for inlier masks.
    pub threshold: f64,
}

impl Default for RegNetConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            width: 128,
            rotation: RotationMode::Lie,
            head: HeadKind::Dnn,
            conv_channels: 8,
            conv_kernel: [3, 3],
            conv_stride: [1, 2],
            hidden: 256,
            threshold: 0.5,
        }
    }
}

impl RegNetConfig {
    pub fn with_blocks(blocks: usize) -> Self {
        Self {
            blocks,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.blocks < 1 {
            return bad("at least one ResNet block is required".into());
        }
        if self.width < 1 || self.hidden < 1 || self.conv_channels < 1 {
            return bad("layer widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return bad(format!("weight threshold {} outside [0, 1)", self.threshold));
        }
        if self.conv_stride.contains(&0) || self.conv_kernel.contains(&0) {
            return bad("convolution kernel and strides must be positive".into());
        }
        if self.head == HeadKind::Dnn {
            let [kr, kc] = self.conv_kernel;
            if self.blocks + 1 < kr || self.width < kc {
                return bad(format!(
                    "a {kr}x{kc} kernel does not fit the {}x{} pooled stage map",
                    self.blocks + 1,
                    self.width
                ));
            }
        }
        Ok(())
    }

    /// Rows and columns of each convolution output channel.
    pub fn conv_output(&self) -> (usize, usize) {
        let [kr, kc] = self.conv_kernel;
        let [sr, sc] = self.conv_stride;
        ((self.blocks + 1 - kr) / sr + 1, (self.width - kc) / sc + 1)
    }

    pub fn flat_len(&self) -> usize {
        let (r, c) = self.conv_output();
        self.conv_channels * r * c
    }

    /// Parameter names (without the stage prefix) and shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.width;
        let mut out = vec![
            ("cls.in.w".to_string(), vec![6, w]),
            ("cls.in.b".to_string(), vec![w]),
        ];
        for c in 0..self.blocks {
            for j in 1..=2 {
                out.push((format!("cls.block{c}.fc{j}.w"), vec![w, w]));
                out.push((format!("cls.block{c}.fc{j}.b"), vec![w]));
            }
        }
        out.push(("cls.out.w".into(), vec![w, 1]));
        out.push(("cls.out.b".into(), vec![1]));
        if self.head == HeadKind::Dnn {
            let [kr, kc] = self.conv_kernel;
            let m = self.rotation.dim();
            out.push(("reg.conv.w".into(), vec![self.conv_channels, 1, kr, kc]));
            out.push(("reg.conv.b".into(), vec![self.conv_channels]));
            out.push(("reg.fc1.w".into(), vec![self.flat_len(), self.hidden]));
            out.push(("reg.fc1.b".into(), vec![self.hidden]));
            out.push(("reg.fc2.w".into(), vec![self.hidden, m + 3]));
            out.push(("reg.fc2.b".into(), vec![m + 3]));
        }
        out
    }
}

/// Name prefix of stage `k` (0-based index into the cascade).
pub fn stage_prefix(k: usize) -> String {
    format!("s{}.", k + 1)
}

/// Named parameter tensors for one network or a cascade.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegNetParams {
    tensors: BTreeMap<String, Tensor>,
}

impl RegNetParams {
    /// Uniform `±√(6/(fan_in+fan_out))` weights and zero biases, drawn in
    /// name order from `seed`.
    pub fn init(configs: &[RegNetConfig], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, dims) in expected_shapes(configs)? {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&dims)
            } else {
                let (fan_in, fan_out) = match dims[..] {
                    [i, o] => (i, o),
                    [co, ci, kh, kw] => (ci * kh * kw, co * kh * kw),
                    _ => unreachable!("weights are matrices or conv kernels"),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let n = dims.iter().product();
                Tensor::new(dims, (0..n).map(|_| rng.random_range(-bound..=bound)).collect())?
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Checks names and shapes against the configuration.
    pub fn validate(&self, configs: &[RegNetConfig]) -> Result<()> {
        let expected = expected_shapes(configs)?;
        for (name, dims) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::InvalidInput(format!("missing parameter '{name}'"))),
                Some(t) if t.dims() != &dims[..] => {
                    return Err(Error::shape(
                        "params",
                        format!("'{name}' has shape {:?}, expected {dims:?}", t.dims()),
                    ))
                }
                Some(t) if !t.all_finite() => return Err(Error::NonFinite(format!("parameter '{name}'"))),
                Some(_) => {}
            }
        }
        if self.tensors.len() != expected.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| !expected.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::InvalidInput(format!("unexpected parameter '{extra}'")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    /// Adds every tensor of `other`, replacing same-named entries.
    pub fn merge(&mut self, other: RegNetParams) {
        self.tensors.extend(other.tensors);
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Rounds every value to the nearest `f32`.
    pub fn to_f32_precision(&self) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.to_f32_precision())).collect(),
        }
    }

    pub fn bind<'a>(&'a self, b: &mut Bindings<'a>) {
        b.extend(self.tensors.iter().map(|(k, v)| (k.as_str(), v)));
    }
}

fn expected_shapes(configs: &[RegNetConfig]) -> Result<Vec<(String, Vec<usize>)>> {
    if configs.is_empty() {
        return Err(Error::InvalidInput("no network configuration".into()));
    }
    let mut out = Vec::new();
    for (k, cfg) in configs.iter().enumerate() {
        cfg.validate()?;
        let prefix = stage_prefix(k);
        out.extend(cfg.param_shapes().into_iter().map(|(n, d)| (format!("{prefix}{n}"), d)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let cfg = RegNetConfig::default();
        assert_eq!(cfg.conv_output(), (7, 63));
        assert_eq!(cfg.flat_len(), 8 * 7 * 63);
        let p = RegNetParams::init(&[cfg.clone()], 0).unwrap();
        assert_eq!(p.get("s1.reg.fc2.w").unwrap().dims(), &[256, 6]);
        assert_eq!(p.get("s1.cls.block7.fc2.w").unwrap().dims(), &[128, 128]);
        assert!(p.validate(&[cfg]).is_ok());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = RegNetConfig::with_blocks(2);
        let a = RegNetParams::init(&[cfg.clone()], 3).unwrap();
        assert_eq!(a, RegNetParams::init(&[cfg.clone()], 3).unwrap());
        assert_ne!(a, RegNetParams::init(&[cfg], 4).unwrap());
        let w = a.get("s1.cls.in.w").unwrap();
        let bound = (6.0f64 / (6.0 + 128.0)).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(a.get("s1.cls.in.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            RegNetConfig::with_blocks(0),
            RegNetConfig::with_blocks(1),
            RegNetConfig {
                threshold: 1.0,
                ..RegNetConfig::default()
            },
            RegNetConfig {
                width: 2,
                ..RegNetConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        let procrustes_c1 = RegNetConfig {
            head: HeadKind::Procrustes,
            ..RegNetConfig::with_blocks(1)
        };
        assert!(procrustes_c1.validate().is_ok());
    }

    #[test]
    fn validate_reports_shape_and_missing() {
        let cfg = RegNetConfig::with_blocks(2);
        let mut p = RegNetParams::init(&[cfg.clone()], 0).unwrap();
        *p.get_mut("s1.reg.fc1.b").unwrap() = Tensor::zeros(&[3]);
        assert!(matches!(p.validate(&[cfg.clone()]), Err(Error::Shape { .. })));
        p.tensors_mut().remove("s1.reg.fc1.b");
        assert!(p.validate(&[cfg]).is_err());
    }

    #[test]
    fn config_toml_style_defaults() {
        let cfg: RegNetConfig = serde_json::from_str(r#"{"blocks": 4, "rotation": "quaternion"}"#).unwrap();
        assert_eq!(cfg.blocks, 4);
        assert_eq!(cfg.rotation, RotationMode::Quaternion);
        assert_eq!(cfg.width, 128);
    }
}
