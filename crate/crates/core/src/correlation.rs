//! Self-attention correlation matrix, symmetric-normalized adjacency, the
//! two-layer GCN and the final classifier.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{affine, normal};
use crate::tensor::Tensor;

/// Degree floor applied before `D^{-1/2}`.
pub const DEGREE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AblationMode {
    #[default]
    Full,
    /// All-ones correlation in place of the attention matrix.
    FixedCorrelation,
    /// Classify from `F_c ⊕ F_w` without propagation.
    NoGcn,
    /// CGL parameters stay at their pretrained values.
    FrozenCgl,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::FixedCorrelation,
        AblationMode::NoGcn,
        AblationMode::FrozenCgl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::FixedCorrelation => "fixed_correlation",
            AblationMode::NoGcn => "no_gcn",
            AblationMode::FrozenCgl => "frozen_cgl",
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Contract(format!("unknown ablation mode {s:?}")))
    }
}

/// Query/key/value projections of flattened region maps (`d = H·W`).
///
/// Keys carry no bias: a key bias adds `q_i·b_k` to every logit of row `i`,
/// which the row softmax cancels.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
}

pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub wv: Var,
    pub bv: Var,
}

impl AttentionParams {
    pub fn init(d: usize, dk: usize, regions: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / d as f64).sqrt();
        AttentionParams {
            wq: normal(rng, &[d, dk], std),
            bq: Tensor::zeros(&[dk]),
            wk: normal(rng, &[d, dk], std),
            wv: normal(rng, &[d, regions], std),
            bv: Tensor::zeros(&[regions]),
        }
    }

    pub fn key_dim(&self) -> usize {
        self.wq.shape()[1]
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("attention.wq".into(), &self.wq),
            ("attention.bq".into(), &self.bq),
            ("attention.wk".into(), &self.wk),
            ("attention.wv".into(), &self.wv),
            ("attention.bv".into(), &self.bv),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("attention.wq".into(), &mut self.wq),
            ("attention.bq".into(), &mut self.bq),
            ("attention.wk".into(), &mut self.wk),
            ("attention.wv".into(), &mut self.wv),
            ("attention.bv".into(), &mut self.bv),
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> AttentionVars {
        AttentionVars {
            wq: g.leaf(&self.wq),
            bq: g.leaf(&self.bq),
            wk: g.leaf(&self.wk),
            wv: g.leaf(&self.wv),
            bv: g.leaf(&self.bv),
        }
    }
}

/// `Θ₁, Θ₂`, both `d×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct GcnParams {
    pub theta1: Tensor,
    pub theta2: Tensor,
}

pub struct GcnVars {
    pub theta1: Var,
    pub theta2: Var,
}

impl GcnParams {
    /// Identity plus Gaussian noise of std `0.1/√d`.
    pub fn init(d: usize, rng: &mut impl Rng) -> Self {
        let std = 0.1 / (d as f64).sqrt();
        let mut theta = || {
            let mut t = normal(rng, &[d, d], std);
            for i in 0..d {
                t.data_mut()[i * d + i] += 1.0;
            }
            t
        };
        GcnParams {
            theta1: theta(),
            theta2: theta(),
        }
    }

    pub fn identity(d: usize) -> Self {
        GcnParams {
            theta1: Tensor::eye(d),
            theta2: Tensor::eye(d),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("gcn.theta1".into(), &self.theta1), ("gcn.theta2".into(), &self.theta2)]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("gcn.theta1".into(), &mut self.theta1),
            ("gcn.theta2".into(), &mut self.theta2),
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> GcnVars {
        GcnVars {
            theta1: g.leaf(&self.theta1),
            theta2: g.leaf(&self.theta2),
        }
    }
}

/// Affine map from `(N+1)·H·W` to two logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

pub struct ClassifierVars {
    pub weight: Var,
    pub bias: Var,
}

impl ClassifierParams {
    pub fn init(inputs: usize, rng: &mut impl Rng) -> Self {
        ClassifierParams {
            weight: normal(rng, &[inputs, 2], (1.0 / inputs as f64).sqrt()),
            bias: Tensor::zeros(&[2]),
        }
    }

    pub fn zeros(inputs: usize) -> Self {
        ClassifierParams {
            weight: Tensor::zeros(&[inputs, 2]),
            bias: Tensor::zeros(&[2]),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("classifier.weight".into(), &self.weight),
            ("classifier.bias".into(), &self.bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("classifier.weight".into(), &mut self.weight),
            ("classifier.bias".into(), &mut self.bias),
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> ClassifierVars {
        ClassifierVars {
            weight: g.leaf(&self.weight),
            bias: g.leaf(&self.bias),
        }
    }
}

fn flatten_regions(g: &mut Graph, fw: Var) -> Result<(Var, [usize; 4])> {
    let s = g.shape(fw).to_vec();
    let &[b, n, h, w] = s.as_slice() else {
        return Err(Error::Dimension(format!("region stack of shape {s:?}")));
    };
    Ok((g.reshape(fw, &[b, n, h * w])?, [b, n, h, w]))
}

/// Row-wise `softmax(Q·Kᵀ/√d_k)` without the value product, `B×N×N`.
pub fn attention_weights(g: &mut Graph, fw: Var, params: &AttentionVars) -> Result<Var> {
    let (x, _) = flatten_regions(g, fw)?;
    let q = affine(g, x, params.wq, params.bq)?;
    let k = g.matmul(x, params.wk)?;
    let dk = g.shape(q)[2];
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
    g.softmax(logits, 2)
}

/// `A = softmax(Q·Kᵀ/√d_k)·V`, `B×N×N`.
pub fn attention_correlation(g: &mut Graph, fw: Var, params: &AttentionVars) -> Result<Var> {
    let weights = attention_weights(g, fw, params)?;
    let (x, _) = flatten_regions(g, fw)?;
    let v = affine(g, x, params.wv, params.bv)?;
    g.matmul(weights, v)
}

/// `D̂^{-1/2}·Â·D̂^{-1/2}` with `Â = (relu(A) + relu(A)ᵀ)/2 + I`.
pub fn prepare_adjacency(g: &mut Graph, a: Var) -> Result<Var> {
    let s = g.shape(a).to_vec();
    let &[b, n, m] = s.as_slice() else {
        return Err(Error::Dimension(format!("adjacency of shape {s:?}")));
    };
    if n != m {
        return Err(Error::Dimension(format!("adjacency of shape {s:?} is not square")));
    }
    let pos = g.relu(a);
    let pos_t = g.transpose(pos)?;
    let sym = g.add(pos, pos_t)?;
    let sym = g.scale(sym, 0.5);
    let eye = g.constant(Tensor::eye(n).reshape(&[1, n, n])?);
    let eye = g.expand(eye, &s)?;
    let hat = g.add(sym, eye)?;
    let degree = g.sum(hat, Some(2))?;
    let degree = g.clamp_min(degree, DEGREE_FLOOR);
    let inv_sqrt = g.powf(degree, -0.5);
    let rows = g.reshape(inv_sqrt, &[b, n, 1])?;
    let rows = g.expand(rows, &s)?;
    let cols = g.reshape(inv_sqrt, &[b, 1, n])?;
    let cols = g.expand(cols, &s)?;
    let left = g.mul(rows, hat)?;
    g.mul(left, cols)
}

/// `ReLU(Â_norm · X · Θ)`.
pub fn gcn_layer(g: &mut Graph, x: Var, adj: Var, theta: Var) -> Result<Var> {
    let mixed = g.matmul(adj, x)?;
    let projected = g.matmul(mixed, theta)?;
    Ok(g.relu(projected))
}

/// Two GCN layers sharing one normalized adjacency; `F_p` has the shape of
/// `F_w`.
pub fn propagate(g: &mut Graph, fw: Var, a: Var, params: &GcnVars) -> Result<Var> {
    let (x, [b, n, h, w]) = flatten_regions(g, fw)?;
    let adj = prepare_adjacency(g, a)?;
    let x = gcn_layer(g, x, adj, params.theta1)?;
    let x = gcn_layer(g, x, adj, params.theta2)?;
    g.reshape(x, &[b, n, h, w])
}

/// Softmax over the two logits of `affine(flatten(F_c ⊕ F_p))`.
pub fn classify(g: &mut Graph, fc: Var, fp: Var, params: &ClassifierVars) -> Result<Var> {
    let cs = g.shape(fc).to_vec();
    let ps = g.shape(fp).to_vec();
    if cs.len() != 4 || ps.len() != 4 || cs[1] != 1 || cs[0] != ps[0] || cs[2..] != ps[2..] {
        return Err(Error::Dimension(format!("classify of {cs:?} with {ps:?}")));
    }
    let joined = g.concat(&[fc, fp], 1)?;
    let flat = g.reshape(joined, &[ps[0], (ps[1] + 1) * ps[2] * ps[3]])?;
    let logits = affine(g, flat, params.weight, params.bias)?;
    g.softmax(logits, 1)
}

/// One correlation matrix as `N` lines of `N` values, 9 significant digits.
pub fn correlation_to_text(a: &Tensor) -> Result<String> {
    let &[n, m] = a.shape() else {
        return Err(Error::Dimension(format!("correlation dump of {:?}", a.shape())));
    };
    let mut s = String::new();
    for row in a.data().chunks(m) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    debug_assert_eq!(s.lines().count(), n);
    Ok(s)
}
