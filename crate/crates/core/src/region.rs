//! Region discovery: peak-response channel signatures, K-means channel
//! grouping, the channel grouping layer (CGL), region-aware feature maps and
//! the compactness/diversity losses.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{argmax_along, Graph, Var};
use crate::kmeans::{kmeans, KMeansResult, DEFAULT_RESTARTS};
use crate::layers::{affine, he, LOG_EPS};
use crate::tensor::Tensor;

/// Per channel, the row-major-first location `(t_x, t_y)` of the maximum
/// of a `C×H×W` feature map. `t_x` indexes rows.
pub fn peak_coordinates(fb: &Tensor) -> Result<Vec<(usize, usize)>> {
    let &[c, h, w] = fb.shape() else {
        return Err(Error::Dimension(format!("peak_coordinates of {:?}", fb.shape())));
    };
    let flat = argmax_along(fb.data(), &[c, h * w], 1);
    Ok(flat.into_iter().map(|p| (p / w, p % w)).collect())
}

/// Peak coordinates of one channel over every training image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PeakSignature {
    pub channel: usize,
    /// `[t_x¹, t_y¹, …, t_x^Ω, t_y^Ω]`.
    pub coords: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignatureSet {
    pub height: usize,
    pub width: usize,
    pub images: usize,
    pub signatures: Vec<PeakSignature>,
}

impl SignatureSet {
    pub fn channels(&self) -> usize {
        self.signatures.len()
    }

    /// Signatures as real vectors for clustering.
    pub fn points(&self) -> Vec<Vec<f64>> {
        self.signatures
            .iter()
            .map(|s| s.coords.iter().map(|&v| v as f64).collect())
            .collect()
    }

    /// Header `C Ω H W`, then one line of space-separated ints per channel.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {} {}\n", self.channels(), self.images, self.height, self.width);
        for sig in &self.signatures {
            let line: Vec<String> = sig.coords.iter().map(usize::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Accumulates channel signatures over a stream of `C×H×W` maps (or
/// `B×C×H×W` batches) in dataset order.
#[derive(Default)]
pub struct SignatureBuilder {
    dims: Option<(usize, usize, usize)>,
    images: usize,
    coords: Vec<Vec<usize>>,
}

impl SignatureBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, fb: &Tensor) -> Result<()> {
        match fb.rank() {
            3 => self.push_single(fb),
            4 => (0..fb.shape()[0]).try_for_each(|b| self.push_single(&fb.slice_outer(b)?)),
            _ => Err(Error::Dimension(format!("signature input of shape {:?}", fb.shape()))),
        }
    }

    fn push_single(&mut self, fb: &Tensor) -> Result<()> {
        let dims = (fb.shape()[0], fb.shape()[1], fb.shape()[2]);
        match self.dims {
            None => {
                self.dims = Some(dims);
                self.coords = vec![Vec::new(); dims.0];
            }
            Some(d) if d != dims => {
                return Err(Error::Dimension(format!(
                    "feature map {:?} after maps of shape {:?}",
                    fb.shape(),
                    [d.0, d.1, d.2]
                )))
            }
            _ => {}
        }
        for (c, (tx, ty)) in peak_coordinates(fb)?.into_iter().enumerate() {
            self.coords[c].push(tx);
            self.coords[c].push(ty);
        }
        self.images += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<SignatureSet> {
        let (_, h, w) = self
            .dims
            .ok_or_else(|| Error::Dimension("no feature maps for signatures".into()))?;
        Ok(SignatureSet {
            height: h,
            width: w,
            images: self.images,
            signatures: self
                .coords
                .into_iter()
                .enumerate()
                .map(|(channel, coords)| PeakSignature { channel, coords })
                .collect(),
        })
    }
}

pub fn build_channel_signatures<'a>(maps: impl IntoIterator<Item = &'a Tensor>) -> Result<SignatureSet> {
    let mut b = SignatureBuilder::new();
    for m in maps {
        b.push(m)?;
    }
    b.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignmentKind {
    Hard,
    Soft,
}

/// `N×C` channel-to-region matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    matrix: Tensor,
    kind: AssignmentKind,
}

impl ClusterAssignment {
    pub fn from_labels(labels: &[usize], regions: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= regions) {
            return Err(Error::Contract(format!("cluster label {bad} with {regions} regions")));
        }
        let c = labels.len();
        let matrix = Tensor::from_fn(&[regions, c], |i| f64::from(labels[i[1]] == i[0]));
        Ok(ClusterAssignment {
            matrix,
            kind: AssignmentKind::Hard,
        })
    }

    /// Validates and wraps a matrix: hard entries in {0,1} with unit column
    /// sums, soft entries in [0,1].
    pub fn new(matrix: Tensor, kind: AssignmentKind) -> Result<Self> {
        let &[n, c] = matrix.shape() else {
            return Err(Error::Dimension(format!("assignment of shape {:?}", matrix.shape())));
        };
        match kind {
            AssignmentKind::Hard => {
                for j in 0..c {
                    let col: Vec<f64> = (0..n).map(|i| matrix.get(&[i, j])).collect();
                    if col.iter().any(|&v| v != 0.0 && v != 1.0) || col.iter().sum::<f64>() != 1.0 {
                        return Err(Error::Contract(format!("channel {j} is not in exactly one group")));
                    }
                }
            }
            AssignmentKind::Soft => {
                if matrix.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::Contract("soft assignment outside [0,1]".into()));
                }
            }
        }
        Ok(ClusterAssignment { matrix, kind })
    }

    pub fn kind(&self) -> AssignmentKind {
        self.kind
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn regions(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.matrix.shape()[1]
    }

    /// Group index of every channel (hard assignments only).
    pub fn labels(&self) -> Vec<usize> {
        let (n, c) = (self.regions(), self.channels());
        (0..c)
            .map(|j| (0..n).find(|&i| self.matrix.get(&[i, j]) == 1.0).unwrap_or(0))
            .collect()
    }

    /// `N` lines of `C` space-separated values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in self.matrix.data().chunks(self.channels()) {
            let line: Vec<String> = row
                .iter()
                .map(|&v| match self.kind {
                    AssignmentKind::Hard => format!("{}", v as u8),
                    AssignmentKind::Soft => format!("{v}"),
                })
                .collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn parse_hard(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.split_whitespace().map(|t| t.parse::<f64>()).collect())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("cluster assignment", e.to_string()))?;
        let n = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if n == 0 || c == 0 || rows.iter().any(|r| r.len() != c) {
            return Err(Error::format("cluster assignment", "ragged or empty matrix"));
        }
        Self::new(Tensor::new(&[n, c], rows.concat())?, AssignmentKind::Hard)
    }
}

/// Hard channel grouping of the signatures into `regions` clusters.
pub fn kmeans_cluster(signatures: &SignatureSet, regions: usize, seed: u64) -> Result<(ClusterAssignment, KMeansResult)> {
    if regions == 0 || regions > signatures.channels() {
        return Err(Error::Contract(format!(
            "{regions} regions for {} channels",
            signatures.channels()
        )));
    }
    let result = kmeans(&signatures.points(), regions, seed, DEFAULT_RESTARTS)?;
    Ok((ClusterAssignment::from_labels(&result.labels, regions)?, result))
}

/// Channel grouping layer: per-channel global max pool → affine → ReLU →
/// affine to `N·C` logits → sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct CglParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct CglVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl CglParams {
    pub fn init(channels: usize, regions: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        CglParams {
            w1: he(rng, &[channels, hidden], channels),
            b1: Tensor::zeros(&[hidden]),
            w2: crate::layers::normal(rng, &[hidden, regions * channels], (1.0 / hidden as f64).sqrt()),
            b2: Tensor::zeros(&[regions * channels]),
        }
    }

    pub fn regions(&self) -> usize {
        self.w2.shape()[1] / self.w1.shape()[0]
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("cgl.fc1.weight".into(), &self.w1),
            ("cgl.fc1.bias".into(), &self.b1),
            ("cgl.fc2.weight".into(), &self.w2),
            ("cgl.fc2.bias".into(), &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("cgl.fc1.weight".into(), &mut self.w1),
            ("cgl.fc1.bias".into(), &mut self.b1),
            ("cgl.fc2.weight".into(), &mut self.w2),
            ("cgl.fc2.bias".into(), &mut self.b2),
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> CglVars {
        CglVars {
            w1: g.leaf(&self.w1),
            b1: g.leaf(&self.b1),
            w2: g.leaf(&self.w2),
            b2: g.leaf(&self.b2),
        }
    }
}

/// Estimated assignment `cr′` of shape `B×N×C`, entries in (0,1).
pub fn cgl_forward(g: &mut Graph, fb: Var, params: &CglVars, regions: usize) -> Result<Var> {
    let s = g.shape(fb).to_vec();
    let &[b, c, h, w] = s.as_slice() else {
        return Err(Error::Dimension(format!("cgl_forward of {s:?}")));
    };
    let flat = g.reshape(fb, &[b, c, h * w])?;
    let (descriptor, _) = g.max_along(flat, 2)?;
    let hidden = affine(g, descriptor, params.w1, params.b1)?;
    let hidden = g.relu(hidden);
    let logits = affine(g, hidden, params.w2, params.b2)?;
    let probs = g.sigmoid(logits);
    g.reshape(probs, &[b, regions, c])
}

/// `F_w[b,i] = (1/C)·Σ_c F_b[b,c]·cr′[b,i,c]`, shape `B×N×H×W`.
pub fn region_features(g: &mut Graph, fb: Var, cr: Var) -> Result<Var> {
    let s = g.shape(fb).to_vec();
    let cs = g.shape(cr).to_vec();
    let &[b, c, h, w] = s.as_slice() else {
        return Err(Error::Dimension(format!("region_features of {s:?}")));
    };
    if cs.len() != 3 || cs[0] != b || cs[2] != c {
        return Err(Error::Dimension(format!(
            "assignment {cs:?} does not match features {s:?}"
        )));
    }
    let flat = g.reshape(fb, &[b, c, h * w])?;
    let mixed = g.matmul(cr, flat)?;
    let avg = g.scale(mixed, 1.0 / c as f64);
    g.reshape(avg, &[b, cs[1], h, w])
}

/// Peak `(t_x, t_y)` of every region map of a `B×N×H×W` stack, in
/// `(b, i)` order.
pub fn region_peaks(values: &[f64], shape: &[usize]) -> Vec<(usize, usize)> {
    let (bn, hw, w) = (shape[0] * shape[1], shape[2] * shape[3], shape[3]);
    argmax_along(values, &[bn, hw], 1)
        .into_iter()
        .map(|p| (p / w, p % w))
        .collect()
}

/// Compactness loss with peaks recomputed from the current values.
pub fn dis_loss(g: &mut Graph, fw: Var) -> Result<Var> {
    let peaks = region_peaks(g.value(fw), g.shape(fw));
    dis_loss_with_peaks(g, fw, &peaks)
}

/// `mean_b Σ_i Σ_(x,y) F_wi(x,y)²·[(x−t_ix)² + (y−t_iy)²]` with fixed peaks.
pub fn dis_loss_with_peaks(g: &mut Graph, fw: Var, peaks: &[(usize, usize)]) -> Result<Var> {
    let s = g.shape(fw).to_vec();
    if s.len() != 4 || peaks.len() != s[0] * s[1] {
        return Err(Error::Dimension(format!("dis_loss of {s:?} with {} peaks", peaks.len())));
    }
    let weights = Tensor::from_fn(&s, |i| {
        let (tx, ty) = peaks[i[0] * s[1] + i[1]];
        let dx = i[2] as f64 - tx as f64;
        let dy = i[3] as f64 - ty as f64;
        dx * dx + dy * dy
    });
    let wv = g.constant(weights);
    let sq = g.square(fw);
    let weighted = g.mul(sq, wv)?;
    let total = g.sum(weighted, None)?;
    Ok(g.scale(total, 1.0 / s[0] as f64))
}

/// For each `(b, i, x, y)`, the index `j ≠ i` of the largest competing
/// region value (first index on ties). Empty when `N = 1`.
pub fn div_routes(values: &[f64], shape: &[usize]) -> Vec<usize> {
    let (b, n, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    if n < 2 {
        return Vec::new();
    }
    let mut routes = vec![0usize; b * n * hw];
    for bi in 0..b {
        for p in 0..hw {
            let at = |j: usize| values[(bi * n + j) * hw + p];
            for i in 0..n {
                let mut best = usize::MAX;
                for j in (0..n).filter(|&j| j != i) {
                    if best == usize::MAX || at(j) > at(best) {
                        best = j;
                    }
                }
                routes[(bi * n + i) * hw + p] = best;
            }
        }
    }
    routes
}

/// Diversity loss with competitor routes recomputed from the current values.
pub fn div_loss(g: &mut Graph, fw: Var) -> Result<Var> {
    let routes = div_routes(g.value(fw), g.shape(fw));
    div_loss_with_routes(g, fw, routes)
}

/// `mean_b Σ_i Σ_(x,y) F_wi(x,y)²·[max_{j≠i} F_wj(x,y) − mrg]²`, where
/// `mrg` is the per-image mean of `F_w`. Zero for a single region.
pub fn div_loss_with_routes(g: &mut Graph, fw: Var, routes: Vec<usize>) -> Result<Var> {
    let s = g.shape(fw).to_vec();
    let &[b, n, h, w] = s.as_slice() else {
        return Err(Error::Dimension(format!("div_loss of {s:?}")));
    };
    if n < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let d = h * w;
    let flat = g.reshape(fw, &[b, n, d])?;
    let rivals = g.take_along(flat, 1, routes, n)?;
    let per_image = g.reshape(fw, &[b, n * d])?;
    let mrg = g.mean(per_image, Some(1))?;
    let mrg = g.reshape(mrg, &[b, 1, 1])?;
    let mrg = g.expand(mrg, &[b, n, d])?;
    let bracket = g.sub(rivals, mrg)?;
    let bracket = g.square(bracket);
    let mass = g.square(flat);
    let prod = g.mul(mass, bracket)?;
    let total = g.sum(prod, None)?;
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Binary cross-entropy between `cr′` (`B×N×C`) and the hard K-means
/// result, summed over `N×C` and averaged over the batch.
pub fn cgl_pretrain_loss(g: &mut Graph, cr_prime: Var, cr: &ClusterAssignment) -> Result<Var> {
    let s = g.shape(cr_prime).to_vec();
    if s.len() != 3 || s[1] != cr.regions() || s[2] != cr.channels() {
        return Err(Error::Dimension(format!(
            "cr′ {s:?} against assignment {:?}",
            cr.matrix().shape()
        )));
    }
    if cr.kind() != AssignmentKind::Hard {
        return Err(Error::Contract("CGL pretraining needs a hard assignment".into()));
    }
    let b = s[0];
    let target = Tensor::from_fn(&s, |i| cr.matrix().get(&[i[1], i[2]]));
    let complement = Tensor::from_fn(&s, |i| 1.0 - cr.matrix().get(&[i[1], i[2]]));
    let y = g.constant(target);
    let y0 = g.constant(complement);
    let p = g.add_scalar(cr_prime, LOG_EPS);
    let logp = g.ln(p);
    let q = g.scale(cr_prime, -1.0);
    let q = g.add_scalar(q, 1.0 + LOG_EPS);
    let logq = g.ln(q);
    let pos = g.mul(y, logp)?;
    let neg = g.mul(y0, logq)?;
    let both = g.add(pos, neg)?;
    let total = g.sum(both, None)?;
    Ok(g.scale(total, -1.0 / b as f64))
}

/// Writes each region map of one image as a min-max normalized binary
/// graymap `region_<image>_<i>.pgm`.
pub fn export_region_maps(dir: &Path, image: usize, maps: &Tensor) -> Result<Vec<PathBuf>> {
    let &[n, h, w] = maps.shape() else {
        return Err(Error::Dimension(format!("region maps of shape {:?}", maps.shape())));
    };
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let map = &maps.data()[i * h * w..(i + 1) * h * w];
        let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend(map.iter().map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        }));
        let path = dir.join(format!("region_{image}_{i}.pgm"));
        fs::write(&path, bytes)?;
        paths.push(path);
    }
    Ok(paths)
}
