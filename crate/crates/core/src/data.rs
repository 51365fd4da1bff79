//! Synthetic co-occurrence benchmark: procedural patterns on a noisy
//! background, labelled private iff both patterns of a fixed pair appear.
//!
//! On disk a dataset is a directory holding `manifest.csv`
//! (`index,filename,label,split`), one binary pixmap (`P6`, maxval 255) per
//! sample, and `genconfig.txt` with the generating configuration.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.csv";
pub const GENCONFIG: &str = "genconfig.txt";
const MANIFEST_HEADER: &str = "index,filename,label,split";
const PLACEMENT_ATTEMPTS: usize = 100;
/// Largest allowed relative gap between the class-conditional mean pixel
/// intensities.
pub const MEAN_INTENSITY_TOLERANCE: f64 = 0.03;
/// Below this many images per class the mean-intensity gap is dominated by
/// sampling noise and is not checked.
pub const MIN_CHECKED_PER_CLASS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PatternKind {
    Square,
    Cross,
    Stripes,
    Disk,
    Checker,
}

impl PatternKind {
    pub const ALL: [PatternKind; 5] = [
        PatternKind::Square,
        PatternKind::Cross,
        PatternKind::Stripes,
        PatternKind::Disk,
        PatternKind::Checker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PatternKind::Square => "square",
            PatternKind::Cross => "cross",
            PatternKind::Stripes => "stripes",
            PatternKind::Disk => "disk",
            PatternKind::Checker => "checker",
        }
    }

    /// Row-major `size×size` binary mask.
    pub fn mask(self, size: usize) -> Vec<bool> {
        let s = size as isize;
        let mid = (s - 1) as f64 / 2.0;
        let mut m = Vec::with_capacity(size * size);
        for r in 0..s {
            for c in 0..s {
                let on = match self {
                    PatternKind::Square => r == 0 || c == 0 || r == s - 1 || c == s - 1,
                    PatternKind::Cross => (r as f64 - mid).abs() < 1.0 || (c as f64 - mid).abs() < 1.0,
                    PatternKind::Stripes => r % 2 == 0,
                    PatternKind::Disk => {
                        let (dr, dc) = (r as f64 - mid, c as f64 - mid);
                        dr * dr + dc * dc <= (s as f64 / 2.0).powi(2)
                    }
                    PatternKind::Checker => (r / 2 + c / 2) % 2 == 0,
                };
                m.push(on);
            }
        }
        m
    }

    /// Fraction of the bounding box the mask covers.
    pub fn fill(self, size: usize) -> f64 {
        self.mask(size).iter().filter(|&&b| b).count() as f64 / (size * size) as f64
    }
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PatternKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown pattern kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatternSpec {
    pub kind: PatternKind,
    pub size: usize,
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub image_side: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Label 1 iff both kinds appear.
    pub private_rule: (PatternKind, PatternKind),
    /// Public images per private image.
    pub class_ratio: f64,
    /// Fraction of public images holding exactly one member of the pair.
    pub single_member_fraction: f64,
    pub min_patterns: usize,
    pub max_patterns: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            image_side: 32,
            n_train: 1500,
            n_val: 700,
            n_test: 1000,
            private_rule: (PatternKind::Cross, PatternKind::Disk),
            class_ratio: 3.0,
            single_member_fraction: 0.5,
            min_patterns: 2,
            max_patterns: 4,
            min_size: 6,
            max_size: 8,
            noise_std: 0.05,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.private_rule.0 == self.private_rule.1 {
            return bad("private rule needs two different pattern kinds".into());
        }
        if self.min_patterns < 2 || self.min_patterns > self.max_patterns {
            return bad(format!(
                "pattern count range {}..={} must start at 2 or more",
                self.min_patterns, self.max_patterns
            ));
        }
        if self.min_size < 3 || self.min_size > self.max_size || self.max_size > self.image_side / 2 {
            return bad(format!(
                "pattern sizes {}..={} must lie in 3..={}",
                self.min_size,
                self.max_size,
                self.image_side / 2
            ));
        }
        if !(self.class_ratio > 0.0) || !self.class_ratio.is_finite() {
            return bad(format!("class ratio must be positive, got {}", self.class_ratio));
        }
        if !(0.0..=1.0).contains(&self.single_member_fraction) {
            return bad("single-member fraction must lie in [0,1]".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise std must be nonnegative".into());
        }
        Ok(())
    }

    pub fn private_fraction(&self) -> f64 {
        1.0 / (1.0 + self.class_ratio)
    }

    pub fn split_len(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Test => self.n_test,
        }
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        format!(
            "image_side={}\nn_train={}\nn_val={}\nn_test={}\nprivate_rule={}+{}\nclass_ratio={}\n\
             single_member_fraction={}\nmin_patterns={}\nmax_patterns={}\nmin_size={}\nmax_size={}\n\
             noise_std={}\nseed={}\n",
            self.image_side,
            self.n_train,
            self.n_val,
            self.n_test,
            self.private_rule.0,
            self.private_rule.1,
            self.class_ratio,
            self.single_member_fraction,
            self.min_patterns,
            self.max_patterns,
            self.min_size,
            self.max_size,
            self.noise_std,
            self.seed
        )
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        match key.trim() {
            "image_side" => self.image_side = num(key, value)?,
            "n_train" => self.n_train = num(key, value)?,
            "n_val" => self.n_val = num(key, value)?,
            "n_test" => self.n_test = num(key, value)?,
            "private_rule" => {
                let (a, b) = value
                    .split_once('+')
                    .ok_or_else(|| Error::Config(format!("private rule {value:?} is not a+b")))?;
                self.private_rule = (a.parse()?, b.parse()?);
            }
            "class_ratio" => self.class_ratio = num(key, value)?,
            "single_member_fraction" => self.single_member_fraction = num(key, value)?,
            "min_patterns" => self.min_patterns = num(key, value)?,
            "max_patterns" => self.max_patterns = num(key, value)?,
            "min_size" => self.min_size = num(key, value)?,
            "max_size" => self.max_size = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown dataset key {other:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = DatasetConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            c.set(k, v)?;
        }
        Ok(c)
    }
}

/// Images (`n×3×S×S`, values `q/255`) and 0/1 labels of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub images: Tensor,
    pub labels: Vec<u8>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_len(&self) -> usize {
        self.images.numel() / self.len().max(1)
    }

    /// Stacks the selected images into a `B×3×S×S` batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<u8>) {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(&shape, data).expect("batch of whole images"), labels)
    }

    pub fn private_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// What a generated sample contains, for inspection and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInfo {
    pub label: u8,
    pub patterns: Vec<PatternSpec>,
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Average fill over every kind and size; intensities are scaled by
/// `mean / fill` (capped at 1) so dense and sparse patterns carry similar ink.
fn mean_fill(config: &DatasetConfig) -> f64 {
    let fills: Vec<f64> = PatternKind::ALL
        .iter()
        .flat_map(|k| (config.min_size..=config.max_size).map(move |s| k.fill(s)))
        .collect();
    fills.iter().sum::<f64>() / fills.len() as f64
}

fn choose_kinds(config: &DatasetConfig, label: u8, single: bool, rng: &mut ChaCha8Rng) -> Vec<PatternKind> {
    let (a, b) = config.private_rule;
    let distractors: Vec<PatternKind> = PatternKind::ALL.into_iter().filter(|&k| k != a && k != b).collect();
    let count = rng.gen_range(config.min_patterns..=config.max_patterns);
    let mut kinds = match (label, single) {
        (1, _) => vec![a, b],
        (_, true) => vec![if rng.gen_bool(0.5) { a } else { b }],
        _ => vec![],
    };
    while kinds.len() < count {
        kinds.push(*distractors.choose(rng).expect("three distractor kinds"));
    }
    kinds.shuffle(rng);
    kinds
}

fn render(
    config: &DatasetConfig,
    kinds: &[PatternKind],
    fill: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Vec<PatternSpec>)> {
    let side = config.image_side;
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let background = rng.gen_range(0.10..0.15);
    let mut canvas = vec![background; side * side];
    let mut boxes: Vec<(usize, usize, usize)> = Vec::new();
    let mut specs = Vec::with_capacity(kinds.len());
    for &kind in kinds {
        let size = rng.gen_range(config.min_size..=config.max_size);
        let intensity = (rng.gen_range(0.55..0.95) * fill / kind.fill(size)).min(1.0);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = rng.gen_range(0..=side - size);
            let c = rng.gen_range(0..=side - size);
            // one pixel of clearance between boxes
            let clear = boxes
                .iter()
                .all(|&(br, bc, bs)| r > br + bs || br > r + size || c > bc + bs || bc > c + size);
            if clear {
                placed = Some((r, c));
                break;
            }
        }
        let (r0, c0) = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place a {kind} of size {size} after {PLACEMENT_ATTEMPTS} attempts"
            ))
        })?;
        for (i, on) in kind.mask(size).into_iter().enumerate() {
            if on {
                canvas[(r0 + i / size) * side + c0 + i % size] = intensity;
            }
        }
        boxes.push((r0, c0, size));
        specs.push(PatternSpec { kind, size, intensity });
    }
    let mut pixels = Vec::with_capacity(3 * side * side);
    for _ in 0..3 {
        for &v in &canvas {
            let n = if config.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            pixels.push(quantize(v + n));
        }
    }
    Ok((pixels, specs))
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn generate_split(config: &DatasetConfig, split: Split, fill: f64) -> Result<(SplitData, Vec<SampleInfo>)> {
    let n = config.split_len(split);
    let side = config.image_side;
    let mut order = sample_rng(config.seed, (split.id() + 3) << 32);
    let private = (n as f64 * config.private_fraction()).round() as usize;
    let public = n - private;
    let singles = (public as f64 * config.single_member_fraction).round() as usize;
    // (label, single-member negative)
    let mut plan: Vec<(u8, bool)> = std::iter::repeat((1, false))
        .take(private)
        .chain(std::iter::repeat((0, true)).take(singles))
        .chain(std::iter::repeat((0, false)).take(public - singles))
        .collect();
    plan.shuffle(&mut order);

    let mut data = Vec::with_capacity(n * 3 * side * side);
    let mut infos = Vec::with_capacity(n);
    for (i, &(label, single)) in plan.iter().enumerate() {
        let mut rng = sample_rng(config.seed, (split.id() << 32) | i as u64);
        let kinds = choose_kinds(config, label, single, &mut rng);
        let (pixels, patterns) = render(config, &kinds, fill, &mut rng)?;
        data.extend(pixels);
        infos.push(SampleInfo { label, patterns });
    }
    let shape = [n, 3, side, side];
    let images = if n == 0 {
        Tensor::zeros(&[1, 3, side, side])
    } else {
        Tensor::new(&shape, data)?
    };
    let labels = plan.into_iter().map(|(l, _)| l).collect();
    Ok((SplitData { images, labels }, infos))
}

/// Class-conditional mean pixel intensities `(public, private)` pooled over
/// the given splits.
pub fn class_mean_intensity(splits: &[&SplitData]) -> (f64, f64) {
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for s in splits {
        let len = s.image_len();
        for (i, &l) in s.labels.iter().enumerate() {
            sums[l as usize] += s.images.data()[i * len..(i + 1) * len].iter().sum::<f64>();
            counts[l as usize] += len;
        }
    }
    (sums[0] / counts[0].max(1) as f64, sums[1] / counts[1].max(1) as f64)
}

/// Generates all three splits in memory, with per-sample contents.
pub fn generate_with_info(config: &DatasetConfig) -> Result<(Dataset, Vec<SampleInfo>)> {
    config.validate()?;
    let fill = mean_fill(config);
    let (train, mut infos) = generate_split(config, Split::Train, fill)?;
    let (val, vi) = generate_split(config, Split::Val, fill)?;
    let (test, ti) = generate_split(config, Split::Test, fill)?;
    infos.extend(vi);
    infos.extend(ti);
    let (m0, m1) = class_mean_intensity(&[&train, &val, &test]);
    let private: usize = [&train, &val, &test].iter().map(|s| s.private_count()).sum();
    let public = train.len() + val.len() + test.len() - private;
    if private.min(public) >= MIN_CHECKED_PER_CLASS && m0 > 0.0 && m1 > 0.0 {
        let gap = (m0 - m1).abs() / (0.5 * (m0 + m1));
        if gap > MEAN_INTENSITY_TOLERANCE {
            return Err(Error::Generation(format!(
                "class mean intensities {m0:.4} and {m1:.4} differ by {:.2}%",
                100.0 * gap
            )));
        }
    }
    Ok((
        Dataset {
            config: config.clone(),
            train,
            val,
            test,
        },
        infos,
    ))
}

pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
    Ok(generate_with_info(config)?.0)
}

fn image_filename(index: usize) -> String {
    format!("img_{index:05}.ppm")
}

fn encode_ppm(pixels: &[f64], side: usize) -> Vec<u8> {
    let plane = side * side;
    let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
    for p in 0..plane {
        for ch in 0..3 {
            out.push((pixels[ch * plane + p] * 255.0).round() as u8);
        }
    }
    out
}

/// Writes the dataset directory. Output bytes depend only on the dataset.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let side = dataset.config.image_side;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    let mut index = 0;
    for split in Split::ALL {
        let data = dataset.split(split);
        let len = data.image_len();
        for (i, &label) in data.labels.iter().enumerate() {
            let name = image_filename(index);
            fs::write(dir.join(&name), encode_ppm(&data.images.data()[i * len..(i + 1) * len], side))?;
            manifest.push_str(&format!("{index},{name},{label},{}\n", split.name()));
            index += 1;
        }
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    fs::write(dir.join(GENCONFIG), dataset.config.to_text())?;
    Ok(())
}

pub fn generate_dataset(config: &DatasetConfig, dir: &Path) -> Result<Dataset> {
    let dataset = generate(config)?;
    write_dataset(&dataset, dir)?;
    Ok(dataset)
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<(usize, Vec<f64>)> {
    let fail = |m: &str| Error::format(path.display(), m);
    // header: magic, width, height, maxval, each followed by whitespace
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(fail("not a binary pixmap (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| fail("malformed header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w != h || w == 0 {
        return Err(fail("image is not square"));
    }
    if maxval != 255 {
        return Err(fail("maxval must be 255"));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != 3 * w * h {
        return Err(fail(&format!("expected {} pixel bytes, found {}", 3 * w * h, body.len())));
    }
    let plane = w * h;
    let mut pixels = vec![0.0; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            pixels[ch * plane + p] = f64::from(body[3 * p + ch]) / 255.0;
        }
    }
    Ok((w, pixels))
}

/// Loads a dataset directory; samples keep manifest order within a split.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::format(manifest_path.display(), format!("cannot read manifest: {e}")))?;
    let config = match fs::read_to_string(dir.join(GENCONFIG)) {
        Ok(t) => DatasetConfig::parse(&t)
            .map_err(|e| Error::format(dir.join(GENCONFIG).display(), e.to_string()))?,
        Err(_) => DatasetConfig::default(),
    };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::format(manifest_path.display(), "line 1: bad header"));
    }
    let mut side = None;
    let mut parts: [(Vec<f64>, Vec<u8>); 3] = Default::default();
    for (lineno, line) in lines.enumerate().map(|(i, l)| (i + 2, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| Error::format(manifest_path.display(), format!("line {lineno}: {m}"));
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let &[_, name, label, split] = cols.as_slice() else {
            return Err(at(format!("expected 4 fields, got {}", cols.len())));
        };
        let label = match label {
            "0" => 0u8,
            "1" => 1,
            other => return Err(at(format!("label {other:?} is not 0 or 1"))),
        };
        let split: Split = split.parse().map_err(|e: Error| at(e.to_string()))?;
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::format(path.display(), e.to_string()))?;
        let (s, pixels) = decode_ppm(&bytes, &path)?;
        if *side.get_or_insert(s) != s {
            return Err(Error::format(path.display(), "image size differs from earlier images"));
        }
        let slot = &mut parts[split.id() as usize];
        slot.0.extend(pixels);
        slot.1.push(label);
    }
    let side = side.ok_or_else(|| Error::format(manifest_path.display(), "no samples"))?;
    let [train, val, test] = parts.map(|(data, labels)| {
        let n = labels.len();
        let images = if n == 0 {
            Tensor::zeros(&[1, 3, side, side])
        } else {
            Tensor::new(&[n, 3, side, side], data).expect("whole images")
        };
        SplitData { images, labels }
    });
    Ok(Dataset {
        config: DatasetConfig {
            image_side: side,
            n_train: train.len(),
            n_val: val.len(),
            n_test: test.len(),
            ..config
        },
        train,
        val,
        test,
    })
}
