//! The assembled network: backbone, CGL, attention correlation, GCN and
//! classifier, with parameter groups for staged training.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    backbone_classifier_head, backbone_forward, global_channel_mean, BackboneConfig, BackboneParams,
    BackboneVars, HeadParams, HeadVars,
};
use crate::correlation::{
    attention_correlation, classify, propagate, AblationMode, AttentionParams, AttentionVars,
    ClassifierParams, ClassifierVars, GcnParams, GcnVars,
};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_terms, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::layers::{cross_entropy, normal};
use crate::region::{
    cgl_forward, dis_loss_with_peaks, div_loss_with_routes, div_routes,
    region_features, region_peaks, CglParams, CglVars,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Number of regions `N`.
    pub regions: usize,
    pub cgl_hidden: usize,
    /// Query/key width `d_k`.
    pub key_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            regions: 8,
            cgl_hidden: 64,
            key_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn side(&self) -> usize {
        self.backbone.out_side()
    }

    /// Flattened region length `d = H·W`.
    pub fn node_dim(&self) -> usize {
        self.side() * self.side()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.regions == 0 || self.regions > self.channels() {
            return Err(Error::Config(format!(
                "regions must be in 1..={}, got {}",
                self.channels(),
                self.regions
            )));
        }
        if self.cgl_hidden == 0 || self.key_dim == 0 {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    /// Pretraining head, unused after the first stage.
    Head,
    Cgl,
    /// Attention, GCN weights and the classifier.
    Gcn,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Backbone, ParamGroup::Head, ParamGroup::Cgl, ParamGroup::Gcn];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Head => "head",
            ParamGroup::Cgl => "cgl",
            ParamGroup::Gcn => "gcn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DragParams {
    pub backbone: BackboneParams,
    pub head: HeadParams,
    pub cgl: CglParams,
    pub attention: AttentionParams,
    pub gcn: GcnParams,
    pub classifier: ClassifierParams,
}

/// A named parameter and its group.
pub struct ParamRef<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: &'a Tensor,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: &'a mut Tensor,
}

impl DragParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels();
        let d = config.node_dim();
        let mut p = DragParams {
            backbone: BackboneParams::init(&config.backbone, &mut rng),
            head: HeadParams::init(c, &mut rng),
            cgl: CglParams::init(c, config.regions, config.cgl_hidden, &mut rng),
            attention: AttentionParams::init(d, config.key_dim, config.regions, &mut rng),
            gcn: GcnParams::init(d, &mut rng),
            classifier: ClassifierParams::init((config.regions + 1) * d, &mut rng),
        };
        for t in p.tensors_mut() {
            t.tensor.set_requires_grad(true);
        }
        Ok(p)
    }

    /// Every parameter in canonical order.
    pub fn tensors(&self) -> Vec<ParamRef<'_>> {
        let groups = [
            (ParamGroup::Backbone, self.backbone.tensors()),
            (ParamGroup::Head, self.head.tensors()),
            (ParamGroup::Cgl, self.cgl.tensors()),
            (ParamGroup::Gcn, self.attention.tensors()),
            (ParamGroup::Gcn, self.gcn.tensors()),
            (ParamGroup::Gcn, self.classifier.tensors()),
        ];
        groups
            .into_iter()
            .flat_map(|(group, ts)| ts.into_iter().map(move |(name, tensor)| ParamRef { name, group, tensor }))
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamMut<'_>> {
        let groups = [
            (ParamGroup::Backbone, self.backbone.tensors_mut()),
            (ParamGroup::Head, self.head.tensors_mut()),
            (ParamGroup::Cgl, self.cgl.tensors_mut()),
            (ParamGroup::Gcn, self.attention.tensors_mut()),
            (ParamGroup::Gcn, self.gcn.tensors_mut()),
            (ParamGroup::Gcn, self.classifier.tensors_mut()),
        ];
        groups
            .into_iter()
            .flat_map(|(group, ts)| ts.into_iter().map(move |(name, tensor)| ParamMut { name, group, tensor }))
            .collect()
    }

    /// Order-sensitive hash of the bit patterns of one group.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.tensors().into_iter().filter(|p| p.group == group) {
            p.tensor.data().iter().for_each(|v| h.write_u64(v.to_bits()));
        }
        h.finish()
    }

    /// Binds every parameter; only `trainable` groups are tracked.
    pub fn bind(&self, g: &mut Graph, trainable: &[ParamGroup]) -> DragVars {
        let vars: Vec<Var> = self
            .tensors()
            .iter()
            .map(|p| g.param(p.tensor, trainable.contains(&p.group)))
            .collect();
        DragVars::assemble(self.backbone.kernels.len(), &vars)
    }
}

pub struct DragVars {
    pub backbone: BackboneVars,
    pub head: HeadVars,
    pub cgl: CglVars,
    pub attention: AttentionVars,
    pub gcn: GcnVars,
    pub classifier: ClassifierVars,
}

impl DragVars {
    /// Splits vars given in [`DragParams::tensors`] order.
    pub fn assemble(stages: usize, v: &[Var]) -> DragVars {
        let mut it = v.iter().copied();
        let mut next = || it.next().expect("one var per parameter");
        let mut kernels = Vec::with_capacity(stages);
        let mut biases = Vec::with_capacity(stages);
        for _ in 0..stages {
            kernels.push(next());
            biases.push(next());
        }
        DragVars {
            backbone: BackboneVars { kernels, biases },
            head: HeadVars {
                weight: next(),
                bias: next(),
            },
            cgl: CglVars {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            },
            attention: AttentionVars {
                wq: next(),
                bq: next(),
                wk: next(),
                wv: next(),
                bv: next(),
            },
            gcn: GcnVars {
                theta1: next(),
                theta2: next(),
            },
            classifier: ClassifierVars {
                weight: next(),
                bias: next(),
            },
        }
    }
}

/// Intermediate values of one forward pass.
pub struct Forward {
    pub fb: Var,
    pub fc: Var,
    pub cr_prime: Var,
    pub fw: Var,
    /// Correlation matrix fed to the adjacency, absent without GCN.
    pub a: Option<Var>,
    pub fp: Option<Var>,
    pub probs: Var,
}

pub fn forward(g: &mut Graph, images: Var, vars: &DragVars, config: &ModelConfig, mode: AblationMode) -> Result<Forward> {
    let fb = backbone_forward(g, images, &vars.backbone, &config.backbone)?;
    forward_from_features(g, fb, vars, config, mode)
}

/// Everything downstream of `F_b`.
pub fn forward_from_features(
    g: &mut Graph,
    fb: Var,
    vars: &DragVars,
    config: &ModelConfig,
    mode: AblationMode,
) -> Result<Forward> {
    let fc = global_channel_mean(g, fb)?;
    let cr_prime = cgl_forward(g, fb, &vars.cgl, config.regions)?;
    let fw = region_features(g, fb, cr_prime)?;
    let (a, fp, probs) = match mode {
        AblationMode::NoGcn => (None, None, classify(g, fc, fw, &vars.classifier)?),
        _ => {
            let a = if mode == AblationMode::FixedCorrelation {
                let b = g.shape(fb)[0];
                g.constant(Tensor::ones(&[b, config.regions, config.regions]))
            } else {
                attention_correlation(g, fw, &vars.attention)?
            };
            let fp = propagate(g, fw, a, &vars.gcn)?;
            (Some(a), Some(fp), classify(g, fc, fp, &vars.classifier)?)
        }
    };
    Ok(Forward {
        fb,
        fc,
        cr_prime,
        fw,
        a,
        fp,
        probs,
    })
}

/// Pretraining path: backbone and the linear head.
pub fn pretrain_forward(g: &mut Graph, images: Var, vars: &DragVars, config: &ModelConfig) -> Result<Var> {
    let fb = backbone_forward(g, images, &vars.backbone, &config.backbone)?;
    backbone_classifier_head(g, fb, &vars.head)
}

/// Classification loss: batch mean of `−Σ_k y_k·ln(ŷ_k + ε)`.
pub fn cls_loss(g: &mut Graph, probs: Var, labels: &[u8]) -> Result<Var> {
    if labels.len() != g.shape(probs)[0] || labels.iter().any(|&l| l > 1) {
        return Err(Error::Contract("labels must be 0/1, one per batch row".into()));
    }
    cross_entropy(g, probs, labels)
}

/// Configuration of the full-pipeline gradient check.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_channels: 3,
            input_size: 16,
            stage_channels: vec![4, 8],
            kernel_size: 3,
            downsample: vec![true, true],
        },
        regions: 4,
        cgl_hidden: 8,
        key_dim: 4,
    }
}

const BIAS_STD: f64 = 0.1;
const CGL_LOGIT_RMS: f64 = 2.0;

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// A fixed point at which the full pipeline is differentiated: parameters,
/// a batch of images, and the peak locations and competitor routes of
/// the unperturbed pass, which stay fixed under perturbation.
pub struct GradCheckCase {
    pub config: ModelConfig,
    pub params: DragParams,
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub peaks: Vec<(usize, usize)>,
    pub routes: Vec<usize>,
}

impl GradCheckCase {
    /// Random parameters with nonzero biases (keeping pre-activations off
    /// the ReLU kink at exactly 0), then queries, keys, values and the
    /// classifier rescaled to unit RMS outputs on the batch so that no
    /// softmax saturates and every path carries a non-negligible gradient.
    pub fn new(config: &ModelConfig, seed: u64, batch: usize) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Contract("gradient check needs at least one image".into()));
        }
        let mut params = DragParams::init(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        for p in params.tensors_mut() {
            if p.tensor.rank() == 1 {
                *p.tensor = normal(&mut rng, p.tensor.shape(), BIAS_STD);
            }
        }
        let side = config.backbone.input_size;
        let images = normal(&mut rng, &[batch, config.backbone.input_channels, side, side], 0.5);
        let images = Tensor::new(images.shape(), images.data().iter().map(|v| v.abs().min(1.0)).collect())?;

        let run = |params: &DragParams| -> Result<(Graph, Forward)> {
            let mut g = Graph::new();
            let vars = params.bind(&mut g, &[]);
            let x = g.constant(images.clone());
            let out = forward(&mut g, x, &vars, config, AblationMode::Full)?;
            Ok((g, out))
        };
        let (g, out) = run(&params)?;
        let logits: Vec<f64> = g.value(out.cr_prime).iter().map(|p| (p / (1.0 - p)).ln()).collect();
        let s = CGL_LOGIT_RMS / rms(&logits);
        for t in [&mut params.cgl.w2, &mut params.cgl.b2] {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        let (g, out) = run(&params)?;
        let fw = rms(g.value(out.fw));
        let d = config.node_dim() as f64;
        let a = &mut params.attention;
        for (w, b) in [(&mut a.wq, Some(&mut a.bq)), (&mut a.wk, None), (&mut a.wv, Some(&mut a.bv))] {
            let s = 1.0 / (fw * rms(w.data()) * d.sqrt());
            w.data_mut().iter_mut().for_each(|v| *v *= s);
            if let Some(b) = b {
                b.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
        let (g, out) = run(&params)?;
        let fp = rms(g.value(out.fp.expect("full mode propagates")));
        let fc = rms(g.value(out.fc));
        let inputs = params.classifier.weight.shape()[0] as f64;
        let s = 1.0 / (fp.max(fc) * rms(params.classifier.weight.data()) * inputs.sqrt());
        params.classifier.weight.data_mut().iter_mut().for_each(|v| *v *= s);

        let (g, out) = run(&params)?;
        // Labels oppose the current prediction so the cls gradient is not damped.
        let labels = (0..batch).map(|b| u8::from(g.value(out.probs)[2 * b + 1] < 0.5)).collect();
        Ok(GradCheckCase {
            config: config.clone(),
            peaks: region_peaks(g.value(out.fw), g.shape(out.fw)),
            routes: div_routes(g.value(out.fw), g.shape(out.fw)),
            params,
            images,
            labels,
        })
    }

    pub fn flat_params(&self) -> Vec<Tensor> {
        self.params.tensors().iter().map(|p| p.tensor.clone()).collect()
    }

    /// Total loss `cls + dis + div` from vars in canonical parameter order.
    pub fn objective(&self, g: &mut Graph, vs: &[Var]) -> Result<Var> {
        let t = self.terms(g, vs)?;
        let total = g.add(t[0], t[1])?;
        g.add(total, t[2])
    }

    /// The three loss terms `[cls, dis, div]`.
    pub fn terms(&self, g: &mut Graph, vs: &[Var]) -> Result<Vec<Var>> {
        let vars = DragVars::assemble(self.config.backbone.stage_channels.len(), vs);
        let x = g.constant(self.images.clone());
        let out = forward(g, x, &vars, &self.config, AblationMode::Full)?;
        let cls = cls_loss(g, out.probs, &self.labels)?;
        let dis = dis_loss_with_peaks(g, out.fw, &self.peaks)?;
        let div = div_loss_with_routes(g, out.fw, self.routes.clone())?;
        Ok(vec![cls, dis, div])
    }
}

/// Finite-difference check of every parameter of the pipeline at
/// [`GradCheckCase::new`].
pub fn pipeline_grad_check(config: &ModelConfig, seed: u64, batch: usize, eps: f64) -> Result<GradCheckReport> {
    let case = GradCheckCase::new(config, seed, batch)?;
    grad_check_terms(|g, vs| case.terms(g, vs), &case.flat_params(), eps)
}
