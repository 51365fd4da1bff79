//! Staged training: backbone pretraining, channel grouping, then
//! alternating classification and region objectives.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::correlation::AblationMode;
use crate::data::{Dataset, SplitData};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{cls_loss, forward_from_features, DragParams, DragVars, ModelConfig, ParamGroup};
use crate::backbone::{backbone_classifier_head, backbone_forward};
use crate::region::{
    cgl_forward, cgl_pretrain_loss, dis_loss, div_loss, kmeans_cluster, region_features, ClusterAssignment,
    SignatureBuilder,
};
use crate::tensor::Tensor;

use super::metrics::{threshold, Confusion, MetricsReport};
use super::optim::{adam_step, OptimizerState, DEFAULT_WEIGHT_DECAY};

const EVAL_BATCH: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StageKind {
    PretrainBackbone,
    PretrainCgl,
    Cgl,
    Gcn,
    GcnBackbone,
    /// Second CGL pass, only run when enabled.
    CglAgain,
    FineTune,
}

impl StageKind {
    pub const ALL: [StageKind; 7] = [
        StageKind::PretrainBackbone,
        StageKind::PretrainCgl,
        StageKind::Cgl,
        StageKind::Gcn,
        StageKind::GcnBackbone,
        StageKind::CglAgain,
        StageKind::FineTune,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::PretrainBackbone => "pretrain_backbone",
            StageKind::PretrainCgl => "pretrain_cgl",
            StageKind::Cgl => "cgl",
            StageKind::Gcn => "gcn",
            StageKind::GcnBackbone => "gcn_backbone",
            StageKind::CglAgain => "cgl_again",
            StageKind::FineTune => "finetune",
        }
    }

    /// Shared by every ablation mode.
    pub fn is_pretraining(self) -> bool {
        matches!(self, StageKind::PretrainBackbone | StageKind::PretrainCgl)
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

/// Loss driving a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Cross-entropy of the pretraining head.
    Head,
    /// Binary cross-entropy of `cr′` against the K-means grouping.
    CglFit,
    Cls,
    /// Dis + Div.
    Region,
    /// Odd mini-batches step `Cls`, even ones step `Region`.
    Alternating,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub kind: StageKind,
    pub epochs: usize,
    /// Trainable groups with their learning rates.
    pub groups: Vec<(ParamGroup, f64)>,
    pub objective: Objective,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearningRates {
    pub backbone_pretrain: f64,
    pub head: f64,
    pub backbone: f64,
    pub cgl: f64,
    pub gcn: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        LearningRates {
            backbone_pretrain: 3e-3,
            head: 1e-3,
            backbone: 1e-5,
            cgl: 1e-3,
            gcn: 1e-3,
        }
    }
}

/// Epochs per stage, indexed like [`StageKind::ALL`].
#[derive(Clone, Debug, PartialEq)]
pub struct StageEpochs(pub [usize; 7]);

impl Default for StageEpochs {
    fn default() -> Self {
        StageEpochs([30, 10, 5, 10, 10, 5, 10])
    }
}

impl StageEpochs {
    pub fn get(&self, kind: StageKind) -> usize {
        self.0[StageKind::ALL.iter().position(|&k| k == kind).unwrap()]
    }

    pub fn set(&mut self, kind: StageKind, epochs: usize) {
        self.0[StageKind::ALL.iter().position(|&k| k == kind).unwrap()] = epochs;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageSchedule {
    pub stages: Vec<Stage>,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl StageSchedule {
    pub fn new(lr: &LearningRates, epochs: &StageEpochs, cgl_again: bool) -> Self {
        use ParamGroup::*;
        let stage = |kind, groups: Vec<(ParamGroup, f64)>, objective| Stage {
            kind,
            epochs: epochs.get(kind),
            groups,
            objective,
        };
        let mut stages = vec![
            stage(
                StageKind::PretrainBackbone,
                vec![(Backbone, lr.backbone_pretrain), (Head, lr.head)],
                Objective::Head,
            ),
            stage(StageKind::PretrainCgl, vec![(Cgl, lr.cgl)], Objective::CglFit),
            stage(StageKind::Cgl, vec![(Cgl, lr.cgl), (Gcn, lr.gcn)], Objective::Alternating),
            stage(StageKind::Gcn, vec![(Gcn, lr.gcn)], Objective::Cls),
            stage(
                StageKind::GcnBackbone,
                vec![(Gcn, lr.gcn), (Backbone, lr.backbone)],
                Objective::Alternating,
            ),
        ];
        if cgl_again {
            stages.push(stage(
                StageKind::CglAgain,
                vec![(Cgl, lr.cgl), (Gcn, lr.gcn)],
                Objective::Alternating,
            ));
        }
        stages.push(stage(
            StageKind::FineTune,
            vec![(Backbone, lr.backbone), (Gcn, lr.gcn)],
            Objective::Alternating,
        ));
        StageSchedule {
            stages,
            batch_size: 32,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }

    /// Schedule as run under `mode`: a frozen CGL skips the CGL stages and
    /// drops its group from every other stage after pretraining.
    pub fn for_mode(&self, mode: AblationMode) -> StageSchedule {
        let mut s = self.clone();
        if mode == AblationMode::FrozenCgl {
            s.stages.retain(|st| !matches!(st.kind, StageKind::Cgl | StageKind::CglAgain));
            for st in s.stages.iter_mut().filter(|st| !st.kind.is_pretraining()) {
                st.groups.retain(|(g, _)| *g != ParamGroup::Cgl);
            }
            s.stages.retain(|st| !st.groups.is_empty());
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        for st in &self.stages {
            if st.groups.is_empty() {
                return Err(Error::Config(format!("stage {} trains nothing", st.kind)));
            }
            if let Some((g, lr)) = st.groups.iter().find(|(_, lr)| !(*lr > 0.0) || !lr.is_finite()) {
                return Err(Error::Config(format!("stage {}: learning rate {lr} for {}", st.kind, g.name())));
            }
        }
        Ok(())
    }
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule::new(&LearningRates::default(), &StageEpochs::default(), false)
    }
}

/// Mean losses of one epoch; `None` for inactive terms.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub stage: StageKind,
    pub epoch: usize,
    pub loss_cls: Option<f64>,
    pub loss_dis: Option<f64>,
    pub loss_div: Option<f64>,
    pub loss_cgl: Option<f64>,
    pub val_accuracy: f64,
}

pub const LOG_HEADER: &str = "stage,epoch,loss_cls,loss_dis,loss_div,loss_cgl,val_accuracy";

pub fn write_log(log: &[EpochLog], mut out: impl Write) -> Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    let f = |v: Option<f64>| v.map(|x| format!("{x:.12e}")).unwrap_or_default();
    for e in log {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6}",
            e.stage,
            e.epoch,
            f(e.loss_cls),
            f(e.loss_dis),
            f(e.loss_div),
            f(e.loss_cgl),
            e.val_accuracy
        )?;
    }
    Ok(())
}

/// Which loss a step optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Head,
    CglFit,
    Cls,
    Region,
}

#[derive(Default)]
struct Sums {
    cls: (f64, usize),
    dis: (f64, usize),
    div: (f64, usize),
    cgl: (f64, usize),
}

fn mean((s, n): (f64, usize)) -> Option<f64> {
    (n > 0).then(|| s / n as f64)
}

/// Rows `idx` of a tensor whose first axis indexes samples.
pub fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let len = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * len);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * len..(i + 1) * len]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("whole rows")
}

/// Backbone features `F_b` of every image of a split.
pub fn compute_features(params: &DragParams, config: &ModelConfig, split: &SplitData) -> Result<Tensor> {
    let n = split.len();
    let mut parts = Vec::new();
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let (images, _) = split.batch(&idx);
        let mut g = Graph::new();
        let vars = params.bind(&mut g, &[]);
        let x = g.constant(images);
        let fb = backbone_forward(&mut g, x, &vars.backbone, &config.backbone)?;
        parts.push(g.tensor(fb));
    }
    let shape = [n, config.channels(), config.side(), config.side()];
    Tensor::new(&shape, parts.into_iter().flat_map(Tensor::into_data).collect())
}

/// Private-class probabilities of a split under `mode`.
pub fn predict(params: &DragParams, config: &ModelConfig, mode: AblationMode, split: &SplitData) -> Result<Vec<f64>> {
    let fb = compute_features(params, config, split)?;
    predict_from_features(params, config, mode, &fb)
}

fn predict_from_features(params: &DragParams, config: &ModelConfig, mode: AblationMode, fb: &Tensor) -> Result<Vec<f64>> {
    let n = fb.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let mut g = Graph::new();
        let vars = params.bind(&mut g, &[]);
        let x = g.constant(gather(fb, &idx));
        let f = forward_from_features(&mut g, x, &vars, config, mode)?;
        out.extend(g.value(f.probs).chunks(2).map(|p| p[1]));
    }
    Ok(out)
}

fn head_predict(params: &DragParams, fb: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, &[]);
    let x = g.constant(fb.clone());
    let probs = backbone_classifier_head(&mut g, x, &vars.head)?;
    Ok(g.value(probs).chunks(2).map(|p| p[1]).collect())
}

/// Accuracy and per-class metrics of a split under `mode`.
pub fn evaluate(params: &DragParams, config: &ModelConfig, mode: AblationMode, split: &SplitData) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let probs = predict(params, config, mode, split)?;
    Ok(Confusion::from_predictions(&threshold(&probs), &split.labels).report())
}

fn accuracy(probs: &[f64], labels: &[u8]) -> f64 {
    Confusion::from_predictions(&threshold(probs), labels).report().accuracy
}

/// Fraction of `N×C` entries where `cr′ ≥ 0.5` matches the hard grouping,
/// averaged over the images behind `fb`.
pub fn cgl_agreement(params: &DragParams, config: &ModelConfig, assignment: &ClusterAssignment, fb: &Tensor) -> Result<f64> {
    let n = fb.shape()[0];
    let target = assignment.matrix().data();
    let mut hits = 0usize;
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let mut g = Graph::new();
        let vars = params.bind(&mut g, &[]);
        let x = g.constant(gather(fb, &idx));
        let cr = cgl_forward(&mut g, x, &vars.cgl, config.regions)?;
        for img in g.value(cr).chunks(target.len()) {
            hits += img.iter().zip(target).filter(|(p, t)| (**p >= 0.5) == (**t == 1.0)).count();
        }
    }
    Ok(hits as f64 / (n * target.len()) as f64)
}

/// Mean CGL pretraining loss over the images behind `fb`.
pub fn cgl_fit_loss(params: &DragParams, config: &ModelConfig, assignment: &ClusterAssignment, fb: &Tensor) -> Result<f64> {
    let n = fb.shape()[0];
    let mut total = 0.0;
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let mut g = Graph::new();
        let vars = params.bind(&mut g, &[]);
        let x = g.constant(gather(fb, &idx));
        let cr = cgl_forward(&mut g, x, &vars.cgl, config.regions)?;
        let loss = cgl_pretrain_loss(&mut g, cr, assignment)?;
        total += g.scalar(loss)? * idx.len() as f64;
    }
    Ok(total / n as f64)
}

/// Result of a run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last state if no
    /// epoch trained the classifier).
    pub params: DragParams,
    pub last_params: DragParams,
    pub log: Vec<EpochLog>,
    pub assignment: Option<ClusterAssignment>,
    /// `(stage, epoch, val accuracy)` of the selected parameters.
    pub selected: Option<(StageKind, usize, f64)>,
    pub stage_reached: Option<StageKind>,
}

/// Training state; clone it to branch ablations after shared stages.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ModelConfig,
    pub mode: AblationMode,
    pub seed: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub params: DragParams,
    pub log: Vec<EpochLog>,
    pub assignment: Option<ClusterAssignment>,
    best: Option<(StageKind, usize, f64, DragParams)>,
    classifier_trained: bool,
    stage_reached: Option<StageKind>,
}

impl Trainer {
    pub fn new(config: &ModelConfig, schedule: &StageSchedule, mode: AblationMode, seed: u64) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        Ok(Trainer {
            config: config.clone(),
            mode,
            seed,
            batch_size: schedule.batch_size,
            weight_decay: schedule.weight_decay,
            params: DragParams::init(config, seed)?,
            log: Vec::new(),
            assignment: None,
            best: None,
            classifier_trained: false,
            stage_reached: None,
        })
    }

    pub fn stage_reached(&self) -> Option<StageKind> {
        self.stage_reached
    }

    /// Runs `stages` in order.
    pub fn run(&mut self, stages: &[Stage], data: &Dataset) -> Result<()> {
        for st in stages {
            self.run_stage(st, data)?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        let (params, selected) = match self.best {
            Some((stage, epoch, acc, p)) => (p, Some((stage, epoch, acc))),
            None => (self.params.clone(), None),
        };
        TrainOutcome {
            params,
            last_params: self.params,
            log: self.log,
            assignment: self.assignment,
            selected,
            stage_reached: self.stage_reached,
        }
    }

    fn cluster(&mut self, data: &Dataset) -> Result<()> {
        let mut sig = SignatureBuilder::new();
        sig.push(&compute_features(&self.params, &self.config, &data.train)?)?;
        let (assignment, _) = kmeans_cluster(&sig.finish()?, self.config.regions, self.seed)?;
        self.assignment = Some(assignment);
        Ok(())
    }

    pub fn run_stage(&mut self, stage: &Stage, data: &Dataset) -> Result<()> {
        if stage.epochs == 0 {
            return Ok(());
        }
        if data.train.is_empty() || data.val.is_empty() {
            return Err(Error::Contract("training needs nonempty train and val splits".into()));
        }
        if stage.objective == Objective::CglFit && self.assignment.is_none() {
            self.cluster(data)?;
        }
        let groups: Vec<ParamGroup> = stage.groups.iter().map(|(g, _)| *g).collect();
        let backbone_moves = groups.contains(&ParamGroup::Backbone);
        let stage_id = StageKind::ALL.iter().position(|&k| k == stage.kind).unwrap() as u64;
        let mut states: Vec<(Phase, ParamGroup, OptimizerState)> = Vec::new();

        // A frozen backbone is evaluated once per stage instead of per batch.
        let (cached, cached_val) = if backbone_moves {
            (None, None)
        } else {
            (
                Some(compute_features(&self.params, &self.config, &data.train)?),
                Some(compute_features(&self.params, &self.config, &data.val)?),
            )
        };
        for epoch in 0..stage.epochs {
            let mut order: Vec<usize> = (0..data.train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream((stage_id << 32) | epoch as u64);
            order.shuffle(&mut rng);

            let mut sums = Sums::default();
            for (b, idx) in order.chunks(self.batch_size).enumerate() {
                let phase = match stage.objective {
                    Objective::Head => Phase::Head,
                    Objective::CglFit => Phase::CglFit,
                    Objective::Cls => Phase::Cls,
                    Objective::Region => Phase::Region,
                    Objective::Alternating if b % 2 == 0 => Phase::Cls,
                    Objective::Alternating => Phase::Region,
                };
                let input = match &cached {
                    Some(fb) => gather(fb, idx),
                    None => data.train.batch(idx).0,
                };
                let labels: Vec<u8> = idx.iter().map(|&i| data.train.labels[i]).collect();
                self.step(stage, epoch, phase, input, &labels, cached.is_some(), &mut states, &mut sums)?;
            }

            let val_fb = match &cached_val {
                Some(fb) => fb.clone(),
                None => compute_features(&self.params, &self.config, &data.val)?,
            };
            let val_probs = if stage.kind.is_pretraining() {
                head_predict(&self.params, &val_fb)?
            } else {
                predict_from_features(&self.params, &self.config, self.mode, &val_fb)?
            };
            let val_accuracy = accuracy(&val_probs, &data.val.labels);
            self.log.push(EpochLog {
                stage: stage.kind,
                epoch,
                loss_cls: mean(sums.cls),
                loss_dis: mean(sums.dis),
                loss_div: mean(sums.div),
                loss_cgl: mean(sums.cgl),
                val_accuracy,
            });
            if groups.contains(&ParamGroup::Gcn) && matches!(stage.objective, Objective::Cls | Objective::Alternating) {
                self.classifier_trained = true;
            }
            if self.classifier_trained {
                let better = self.best.as_ref().map_or(true, |b| val_accuracy > b.2);
                if better {
                    self.best = Some((stage.kind, epoch, val_accuracy, self.params.clone()));
                }
            }
        }
        self.stage_reached = Some(stage.kind);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        stage: &Stage,
        epoch: usize,
        phase: Phase,
        input: Tensor,
        labels: &[u8],
        is_features: bool,
        states: &mut Vec<(Phase, ParamGroup, OptimizerState)>,
        sums: &mut Sums,
    ) -> Result<()> {
        let groups: Vec<ParamGroup> = stage.groups.iter().map(|(g, _)| *g).collect();
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, &groups);
        let x = g.constant(input);
        let diverged = |term: &'static str, value: f64| Error::Divergence {
            stage: stage.kind.name().to_string(),
            epoch,
            term,
            value,
        };
        let fb = if is_features {
            x
        } else {
            backbone_forward(&mut g, x, &vars.backbone, &self.config.backbone)?
        };
        let loss = match phase {
            Phase::Head => {
                let probs = backbone_classifier_head(&mut g, fb, &vars.head)?;
                let l = cls_loss(&mut g, probs, labels)?;
                record(&mut sums.cls, g.scalar(l)?, "loss_cls", &diverged)?;
                l
            }
            Phase::CglFit => {
                let cr = cgl_forward(&mut g, fb, &vars.cgl, self.config.regions)?;
                let assignment = self.assignment.as_ref().expect("clustered before pretraining");
                let l = cgl_pretrain_loss(&mut g, cr, assignment)?;
                record(&mut sums.cgl, g.scalar(l)?, "loss_cgl", &diverged)?;
                l
            }
            Phase::Cls => {
                let f = forward_from_features(&mut g, fb, &vars, &self.config, self.mode)?;
                let l = cls_loss(&mut g, f.probs, labels)?;
                record(&mut sums.cls, g.scalar(l)?, "loss_cls", &diverged)?;
                l
            }
            Phase::Region => {
                let (dis, div) = region_losses(&mut g, fb, &vars, &self.config)?;
                record(&mut sums.dis, g.scalar(dis)?, "loss_dis", &diverged)?;
                record(&mut sums.div, g.scalar(div)?, "loss_div", &diverged)?;
                g.add(dis, div)?
            }
        };
        let grads = g.backward(loss)?;

        let all_vars = self.param_vars(&vars);
        let weight_decay = self.weight_decay;
        let mut slots = self.params.tensors_mut();
        for &(grp, lr) in &stage.groups {
            let mut tensors = Vec::new();
            let mut gs: Vec<&[f64]> = Vec::new();
            let mut decay = Vec::new();
            for (slot, &v) in slots.iter_mut().zip(&all_vars).filter(|(s, _)| s.group == grp) {
                if let Some(gr) = grads.get(v) {
                    if let Some(bad) = gr.iter().find(|x| !x.is_finite()) {
                        return Err(diverged("gradient", *bad));
                    }
                    decay.push(!is_bias(&slot.name));
                    gs.push(gr);
                    tensors.push(&mut *slot.tensor);
                }
            }
            if tensors.is_empty() {
                continue;
            }
            let pos = match states.iter().position(|(p, gg, _)| *p == phase && *gg == grp) {
                Some(i) => i,
                None => {
                    states.push((phase, grp, OptimizerState::new(lr, weight_decay)));
                    states.len() - 1
                }
            };
            adam_step(&mut tensors, &gs, &decay, &mut states[pos].2)?;
        }
        Ok(())
    }

    /// Vars in [`DragParams::tensors`] order.
    fn param_vars(&self, v: &DragVars) -> Vec<crate::graph::Var> {
        let mut out = Vec::new();
        for (k, b) in v.backbone.kernels.iter().zip(&v.backbone.biases) {
            out.push(*k);
            out.push(*b);
        }
        out.extend([v.head.weight, v.head.bias]);
        out.extend([v.cgl.w1, v.cgl.b1, v.cgl.w2, v.cgl.b2]);
        out.extend([v.attention.wq, v.attention.bq, v.attention.wk, v.attention.wv, v.attention.bv]);
        out.extend([v.gcn.theta1, v.gcn.theta2]);
        out.extend([v.classifier.weight, v.classifier.bias]);
        out
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with("bias") || name.rsplit('.').next().is_some_and(|last| last.starts_with('b'))
}

fn record(
    slot: &mut (f64, usize),
    value: f64,
    term: &'static str,
    diverged: &impl Fn(&'static str, f64) -> Error,
) -> Result<()> {
    if !value.is_finite() {
        return Err(diverged(term, value));
    }
    slot.0 += value;
    slot.1 += 1;
    Ok(())
}

/// Dis and Div of the region maps, with peaks and competitors taken from
/// the current values.
pub fn region_losses(
    g: &mut Graph,
    fb: crate::graph::Var,
    vars: &DragVars,
    config: &ModelConfig,
) -> Result<(crate::graph::Var, crate::graph::Var)> {
    let cr = cgl_forward(g, fb, &vars.cgl, config.regions)?;
    let fw = region_features(g, fb, cr)?;
    Ok((dis_loss(g, fw)?, div_loss(g, fw)?))
}

/// Runs a full schedule under `mode` from a fresh initialization.
pub fn run_schedule(
    schedule: &StageSchedule,
    config: &ModelConfig,
    mode: AblationMode,
    data: &Dataset,
    seed: u64,
) -> Result<TrainOutcome> {
    let schedule = schedule.for_mode(mode);
    let mut t = Trainer::new(config, &schedule, mode, seed)?;
    t.run(&schedule.stages, data)?;
    Ok(t.finish())
}

/// Runs the shared pretraining stages once, then every mode from that
/// state. Each branch equals the matching [`run_schedule`] result.
pub fn run_ablation(
    schedule: &StageSchedule,
    config: &ModelConfig,
    modes: &[AblationMode],
    data: &Dataset,
    seed: u64,
) -> Result<Vec<(AblationMode, TrainOutcome)>> {
    let split = schedule
        .stages
        .iter()
        .position(|s| !s.kind.is_pretraining())
        .unwrap_or(schedule.stages.len());
    let mut shared = Trainer::new(config, schedule, AblationMode::Full, seed)?;
    shared.run(&schedule.stages[..split], data)?;
    let mut out = Vec::with_capacity(modes.len());
    for &mode in modes {
        let s = schedule.for_mode(mode);
        let rest: Vec<Stage> = s.stages.into_iter().filter(|st| !st.kind.is_pretraining()).collect();
        let mut t = shared.clone();
        t.mode = mode;
        t.run(&rest, data)?;
        out.push((mode, t.finish()));
    }
    Ok(out)
}
