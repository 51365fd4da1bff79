//! Desk-scale convolutional backbone producing the feature map `F_b`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{affine, he};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Side of the square input image.
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub kernel_size: usize,
    /// Whether each stage convolves with stride 2.
    pub downsample: Vec<bool>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_channels: 3,
            input_size: 32,
            stage_channels: vec![16, 32, 32],
            kernel_size: 3,
            downsample: vec![true, true, false],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("backbone needs at least one non-empty stage".into()));
        }
        if self.downsample.len() != self.stage_channels.len() {
            return Err(Error::Config(format!(
                "{} downsample flags for {} stages",
                self.downsample.len(),
                self.stage_channels.len()
            )));
        }
        if self.kernel_size % 2 == 0 || self.input_channels == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        let mut side = self.input_size;
        for &down in &self.downsample {
            if self.kernel_size > side + 2 * (self.kernel_size / 2) {
                return Err(Error::Config(format!("input side {} too small", self.input_size)));
            }
            side = stage_out(side, self.kernel_size, down);
        }
        Ok(())
    }

    /// Channel count `C` of `F_b`.
    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated config")
    }

    /// Spatial side `H = W` of `F_b`.
    pub fn out_side(&self) -> usize {
        self.downsample
            .iter()
            .fold(self.input_size, |s, &d| stage_out(s, self.kernel_size, d))
    }
}

fn stage_out(side: usize, k: usize, down: bool) -> usize {
    let stride = if down { 2 } else { 1 };
    (side + 2 * (k / 2) - k) / stride + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub kernels: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl BackboneParams {
    pub fn init(config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut cin = config.input_channels;
        let k = config.kernel_size;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for &cout in &config.stage_channels {
            kernels.push(he(rng, &[cout, cin, k, k], cin * k * k));
            biases.push(Tensor::zeros(&[cout]));
            cin = cout;
        }
        BackboneParams { kernels, biases }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.kernels.iter().zip(&self.biases).enumerate() {
            out.push((format!("backbone.conv{i}.weight"), k));
            out.push((format!("backbone.conv{i}.bias"), b));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, (k, b)) in self.kernels.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push((format!("backbone.conv{i}.weight"), k));
            out.push((format!("backbone.conv{i}.bias"), b));
        }
        out
    }

    pub fn bind(&self, g: &mut Graph) -> BackboneVars {
        BackboneVars {
            kernels: self.kernels.iter().map(|t| g.leaf(t)).collect(),
            biases: self.biases.iter().map(|t| g.leaf(t)).collect(),
        }
    }
}

pub struct BackboneVars {
    pub kernels: Vec<Var>,
    pub biases: Vec<Var>,
}

/// Linear pretraining head: global average pool, affine map to two logits.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl HeadParams {
    pub fn init(channels: usize, rng: &mut impl Rng) -> Self {
        HeadParams {
            weight: he(rng, &[channels, 2], channels),
            bias: Tensor::zeros(&[2]),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("head.weight".into(), &self.weight), ("head.bias".into(), &self.bias)]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("head.weight".into(), &mut self.weight),
            ("head.bias".into(), &mut self.bias),
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> HeadVars {
        HeadVars {
            weight: g.leaf(&self.weight),
            bias: g.leaf(&self.bias),
        }
    }
}

pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

/// Conv → bias → ReLU per stage; returns `F_b` of shape `B×C×H×W`.
pub fn backbone_forward(
    g: &mut Graph,
    images: Var,
    params: &BackboneVars,
    config: &BackboneConfig,
) -> Result<Var> {
    let s = g.shape(images).to_vec();
    let want = [config.input_channels, config.input_size, config.input_size];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::Dimension(format!(
            "backbone expects B×{}×{}×{} images, got {s:?}",
            want[0], want[1], want[2]
        )));
    }
    let pad = config.kernel_size / 2;
    let mut x = images;
    for ((&k, &b), &down) in params.kernels.iter().zip(&params.biases).zip(&config.downsample) {
        let y = g.conv2d(x, k, if down { 2 } else { 1 }, pad)?;
        let shape = g.shape(y).to_vec();
        let b = g.reshape(b, &[1, shape[1], 1, 1])?;
        let b = g.expand(b, &shape)?;
        let y = g.add(y, b)?;
        x = g.relu(y);
    }
    Ok(x)
}

/// `F_c[b,0] = (1/C)·Σ_c F_b[b,c]`.
pub fn global_channel_mean(g: &mut Graph, fb: Var) -> Result<Var> {
    let s = g.shape(fb).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("global_channel_mean of {s:?}")));
    }
    let m = g.mean(fb, Some(1))?;
    g.reshape(m, &[s[0], 1, s[2], s[3]])
}

/// Class probabilities `B×2` from global-average-pooled `F_b`.
pub fn backbone_classifier_head(g: &mut Graph, fb: Var, head: &HeadVars) -> Result<Var> {
    let s = g.shape(fb).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("classifier head input {s:?}")));
    }
    let flat = g.reshape(fb, &[s[0], s[1], s[2] * s[3]])?;
    let pooled = g.mean(flat, Some(2))?;
    let logits = affine(g, pooled, head.weight, head.bias)?;
    g.softmax(logits, 1)
}
