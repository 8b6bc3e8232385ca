//! Deterministic synthetic classification datasets, augmentation, batching.
//!
//! Datasets regenerate bit-identically from their spec (kind, sizes, noise,
//! seed). Augmentation supports a finite variant ratio (each sample cycles
//! through `1 + r` precomputed forms: the original plus `r` transformed
//! variants, giving persistent-lambda storage its `N*(1+r)` footprint) or an
//! unbounded ratio (a fresh transform every epoch).

use crate::error::Error;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::Result;

/// Angular sweep of each spiral arm; tight enough that shallow nets cannot
/// separate the arms but the full residual stack can.
const SPIRAL_TWIST: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Blobs,
    Spirals,
    Rings,
    Csv,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub kind: DataKind,
    pub n: usize,
    pub classes: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub spec: DatasetSpec,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn raw_dim(&self) -> usize {
        self.features.cols()
    }
}

/// Synthetic 2-D dataset with near-balanced classes (counts differ by <= 1).
pub fn gen_dataset(
    kind: DataKind,
    n: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || n < classes {
        return Err(Error::input(format!(
            "gen_dataset: need n >= classes >= 2, got {n}/{classes}"
        )));
    }
    if kind == DataKind::Csv {
        return Err(Error::usage(
            "gen_dataset: csv datasets come from load_csv".to_string(),
        ));
    }
    let mut rng = SeededRng::derive(seed, &[kind as u64, n as u64, classes as u64]);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    // Round-robin labels keep the classes balanced by construction.
    let mut within = vec![0usize; classes];
    for i in 0..n {
        let c = i % classes;
        let count_c = n / classes + usize::from(c < n % classes);
        let t = within[c] as f64 / count_c.max(1) as f64;
        within[c] += 1;
        let theta0 = std::f64::consts::TAU * c as f64 / classes as f64;
        let (mut x, mut y) = match kind {
            DataKind::Blobs => (3.0 * theta0.cos(), 3.0 * theta0.sin()),
            DataKind::Spirals => {
                let r = 0.3 + 2.2 * t;
                let theta = theta0 + SPIRAL_TWIST * t;
                (r * theta.cos(), r * theta.sin())
            }
            DataKind::Rings => {
                let r = 1.0 + 1.4 * c as f64;
                let theta = std::f64::consts::TAU * rng.uniform();
                (r * theta.cos(), r * theta.sin())
            }
            DataKind::Csv => unreachable!(),
        };
        x += noise * rng.normal();
        y += noise * rng.normal();
        data.push(x);
        data.push(y);
        labels.push(c);
    }
    Ok(Dataset {
        features: Tensor::new(vec![n, 2], data)?,
        labels,
        classes,
        spec: DatasetSpec {
            kind,
            n,
            classes,
            noise,
            seed,
        },
    })
}

/// CSV loader: header row, one sample per line, last column an integer label.
pub fn load_csv(path: &std::path::Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(format!("{}: empty csv", path.display())))?;
    let dim = header.split(',').count().saturating_sub(1);
    if dim == 0 {
        return Err(Error::parse(format!(
            "{}: need at least one feature column",
            path.display()
        )));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::parse(format!(
                "{}:{}: expected {} columns, got {}",
                path.display(),
                lineno + 2,
                dim + 1,
                fields.len()
            )));
        }
        for f in &fields[..dim] {
            data.push(f.trim().parse::<f64>().map_err(|e| {
                Error::parse(format!(
                    "{}:{}: bad number {f:?}: {e}",
                    path.display(),
                    lineno + 2
                ))
            })?);
        }
        labels.push(fields[dim].trim().parse::<usize>().map_err(|e| {
            Error::parse(format!("{}:{}: bad label: {e}", path.display(), lineno + 2))
        })?);
    }
    if labels.is_empty() {
        return Err(Error::parse(format!("{}: no samples", path.display())));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let n = labels.len();
    Ok(Dataset {
        features: Tensor::new(vec![n, dim], data)?,
        labels,
        classes,
        spec: DatasetSpec {
            kind: DataKind::Csv,
            n,
            classes,
            noise: 0.0,
            seed: 0,
        },
    })
}

/// Deterministic train/test index split from the dataset seed.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    SeededRng::derive(seed, &[0x5317]).shuffle(&mut idx);
    let cut = ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let test = idx.split_off(cut);
    (idx, test)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AugmentKind {
    None,
    GaussianJitter { sigma: f64 },
    RandomShift { max_offset: f64 },
    FlipSign { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentRatio {
    /// `r` precomputed variants per sample, cycled across epochs together
    /// with the original (so each sample takes `1 + r` distinct forms).
    Finite(u32),
    /// A fresh random transform every epoch.
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    pub ratio: AugmentRatio,
    pub seed: u64,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            kind: AugmentKind::None,
            ratio: AugmentRatio::Finite(0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            AugmentKind::None => true,
            AugmentKind::GaussianJitter { sigma } => sigma >= 0.0,
            AugmentKind::RandomShift { max_offset } => max_offset >= 0.0,
            AugmentKind::FlipSign { p } => (0.0..=1.0).contains(&p),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::input(format!(
                "augment policy parameter out of range: {self:?}"
            )))
        }
    }

    /// The variant id each sample takes at `epoch`. Variant 0 is the
    /// untransformed original; ids of unbounded policies never repeat.
    pub fn variant_for_epoch(&self, epoch: usize) -> u32 {
        match (self.kind, self.ratio) {
            (AugmentKind::None, _) => 0,
            (_, AugmentRatio::Finite(r)) => (epoch % (1 + r as usize)) as u32,
            (_, AugmentRatio::Unbounded) => epoch as u32 + 1,
        }
    }
}

/// Apply the policy's transform to a whole `[batch, dim]` tensor.
pub fn augment(x: &Tensor, policy: &AugmentPolicy, rng: &mut SeededRng) -> Tensor {
    match policy.kind {
        AugmentKind::None => x.clone(),
        AugmentKind::GaussianJitter { sigma } => x.map_with_rng(rng, |v, r| v + sigma * r.normal()),
        AugmentKind::RandomShift { max_offset } => {
            x.map_with_rng(rng, |v, r| v + max_offset * (2.0 * r.uniform() - 1.0))
        }
        AugmentKind::FlipSign { p } => {
            x.map_with_rng(rng, |v, r| if r.uniform() < p { -v } else { v })
        }
    }
}

/// The features of `sample` under `variant`. Variant 0 is the original;
/// every other id is a pure function of (policy seed, sample, variant).
pub fn variant_features(
    ds: &Dataset,
    policy: &AugmentPolicy,
    sample: usize,
    variant: u32,
) -> Vec<f64> {
    let row = ds.features.row(sample);
    if variant == 0 || policy.kind == AugmentKind::None {
        return row.to_vec();
    }
    let mut rng = SeededRng::derive(policy.seed, &[sample as u64, variant as u64]);
    let t = Tensor::new(vec![1, row.len()], row.to_vec()).unwrap();
    augment(&t, policy, &mut rng).data().to_vec()
}

/// One training mini-batch, with provenance for persistent-lambda keying.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<u32>,
    pub variant_ids: Vec<u32>,
}

/// A shuffled full pass over `subset`, augmented per policy for `epoch`.
/// Order is a pure function of `epoch_seed`; the last batch may be short.
pub fn epoch_batches(
    ds: &Dataset,
    subset: &[usize],
    policy: &AugmentPolicy,
    epoch: usize,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::input("batch_size must be >= 1".to_string()));
    }
    if subset.is_empty() {
        return Err(Error::input("empty dataset subset".to_string()));
    }
    let variant = policy.variant_for_epoch(epoch);
    let mut order: Vec<usize> = subset.to_vec();
    SeededRng::derive(epoch_seed, &[epoch as u64]).shuffle(&mut order);
    let dim = ds.raw_dim();
    let mut out = Vec::with_capacity(order.len().div_ceil(batch_size));
    for chunk in order.chunks(batch_size) {
        let mut data = Vec::with_capacity(chunk.len() * dim);
        let mut labels = Vec::with_capacity(chunk.len());
        let mut sample_ids = Vec::with_capacity(chunk.len());
        for &i in chunk {
            data.extend_from_slice(&variant_features(ds, policy, i, variant));
            labels.push(ds.labels[i]);
            sample_ids.push(i as u32);
        }
        out.push(Batch {
            features: Tensor::new(vec![chunk.len(), dim], data)?,
            labels,
            sample_ids,
            variant_ids: vec![variant; chunk.len()],
        });
    }
    Ok(out)
}

/// Unaugmented shuffled pass over the whole dataset.
pub fn batches(ds: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<Batch>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    epoch_batches(ds, &all, &AugmentPolicy::none(), 0, batch_size, epoch_seed)
}

/// Features/labels for a subset at the original (variant 0) form.
pub fn gather(ds: &Dataset, subset: &[usize]) -> (Tensor, Vec<usize>) {
    let dim = ds.raw_dim();
    let mut data = Vec::with_capacity(subset.len() * dim);
    let mut labels = Vec::with_capacity(subset.len());
    for &i in subset {
        data.extend_from_slice(ds.features.row(i));
        labels.push(ds.labels[i]);
    }
    (Tensor::new(vec![subset.len(), dim], data).unwrap(), labels)
}
