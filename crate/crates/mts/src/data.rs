//! Synthetic open-set domain-shift datasets.
//!
//! Class centroids sit on a circle of radius 4 in the first two feature
//! dimensions. The target domain is the same mixture rotated about the
//! origin and translated, so the rotation angle is a continuous domain-gap
//! knob. Unknown classes are drawn only in the target domain and collapse
//! to the single label K+1.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MtsError, Result};
use crate::matrix::Matrix;

pub const CENTROID_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// One labeled feature vector. Labels are 1-based; K+1 marks unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    /// Known-class count; labels range over 1..=k (+ k+1 for unknown).
    pub k: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn features_of(&self, indices: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(indices.len(), self.dim);
        for (r, &i) in indices.iter().enumerate() {
            for (c, &v) in self.samples[i].x.iter().enumerate() {
                m.set(r, c, v);
            }
        }
        m
    }

    pub fn all_features(&self) -> Matrix {
        self.features_of(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].y).collect()
    }

    pub fn source_batch(&self, indices: &[usize]) -> SourceBatch {
        SourceBatch { x: self.features_of(indices), y: self.labels_of(indices) }
    }

    /// Labels are withheld: the trainer never sees target labels.
    pub fn target_batch(&self, indices: &[usize]) -> TargetBatch {
        TargetBatch { x: self.features_of(indices) }
    }
}

/// A labeled source mini-batch.
#[derive(Debug, Clone)]
pub struct SourceBatch {
    pub x: Matrix,
    /// 1-based class labels in 1..=K.
    pub y: Vec<usize>,
}

/// An unlabeled target mini-batch.
#[derive(Debug, Clone)]
pub struct TargetBatch {
    pub x: Matrix,
}

#[derive(Debug, Clone)]
pub struct ShiftConfig {
    pub dim: usize,
    pub k: usize,
    pub u: usize,
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    pub noise_sigma: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub seed: u64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        ShiftConfig {
            dim: 2,
            k: 3,
            u: 2,
            rotation_deg: 45.0,
            translation: vec![0.0, 0.0],
            noise_sigma: 0.6,
            n_source: 150,
            n_target: 150,
            seed: 7,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(MtsError::Config("dim must be >= 2".into()));
        }
        if self.k < 2 {
            return Err(MtsError::Config("k must be >= 2".into()));
        }
        if self.u < 1 {
            return Err(MtsError::Config("u must be >= 1".into()));
        }
        if self.translation.len() != self.dim {
            return Err(MtsError::Config(format!(
                "translation has {} entries for dim {}",
                self.translation.len(),
                self.dim
            )));
        }
        if self.n_source < self.k {
            return Err(MtsError::Config("n_source must cover every known class".into()));
        }
        if self.n_target < self.k + self.u {
            return Err(MtsError::Config("n_target must cover every class".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    loop {
        let u1: f64 = rng.gen::<f64>();
        if u1 > 0.0 {
            let u2: f64 = rng.gen::<f64>();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}

/// Deterministic class-assignment cycle with unequal class masses: class c
/// appears c+1 times per cycle, and each cycle starts with one pass over all
/// classes so any n >= the class count covers every class. Equal masses
/// would leave cluster-permuting alignments indistinguishable from the
/// correct one at rotations near a multiple of 360/total.
fn class_cycle(classes: usize) -> Vec<usize> {
    let mut cycle = Vec::new();
    for rep in 0..=classes {
        for c in 1..=classes {
            if rep < c + 1 {
                cycle.push(c);
            }
        }
    }
    cycle
}

/// Centroid of class `class1` (1-based) on the radius-4 circle. Known
/// classes sit at multiples of g = 360(K+1)/K^2 degrees, slightly wider
/// than even spacing, so the constellation has one narrow wrap gap and no
/// rotational symmetry; unknown classes sit a quarter gap past the knowns.
/// Evenly spaced centroids would turn rotations near a multiple of
/// 360/(K+U) into an exact class permutation that no unsupervised method
/// could resolve, and would park rotated unknowns on top of source classes.
fn centroid(class1: usize, k: usize, dim: usize) -> Vec<f64> {
    let g = 2.0 * std::f64::consts::PI * (k + 1) as f64 / (k * k) as f64;
    let angle = if class1 <= k {
        (class1 - 1) as f64 * g
    } else {
        (class1 - k - 1) as f64 * g + 0.25 * g
    };
    let mut c = vec![0.0; dim];
    c[0] = CENTROID_RADIUS * angle.cos();
    c[1] = CENTROID_RADIUS * angle.sin();
    c
}

/// Generates source (classes 1..=K) and target (classes 1..=K+U, unknown
/// labels collapsed to K+1, features rotated and translated) datasets.
pub fn generate(cfg: &ShiftConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let total = cfg.k + cfg.u;
    let theta = cfg.rotation_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let draw = |cls1: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let mut x = centroid(cls1, cfg.k, cfg.dim);
        for v in x.iter_mut() {
            *v += cfg.noise_sigma * gaussian(rng);
        }
        x
    };

    let src_cycle = class_cycle(cfg.k);
    let mut source = Dataset { dim: cfg.dim, k: cfg.k, samples: Vec::with_capacity(cfg.n_source) };
    for i in 0..cfg.n_source {
        let cls = src_cycle[i % src_cycle.len()];
        source.samples.push(Sample { x: draw(cls, &mut rng), y: cls, domain: Domain::Source });
    }

    let tgt_cycle = class_cycle(total);
    let mut target = Dataset { dim: cfg.dim, k: cfg.k, samples: Vec::with_capacity(cfg.n_target) };
    for j in 0..cfg.n_target {
        let cls = tgt_cycle[j % tgt_cycle.len()];
        let mut x = draw(cls, &mut rng);
        // rotation in the first two dims, then translation in all dims
        let (x0, x1) = (x[0], x[1]);
        x[0] = cos_t * x0 - sin_t * x1;
        x[1] = sin_t * x0 + cos_t * x1;
        for (v, t) in x.iter_mut().zip(&cfg.translation) {
            *v += t;
        }
        let y = if cls <= cfg.k { cls } else { cfg.k + 1 };
        target.samples.push(Sample { x, y, domain: Domain::Target });
    }

    Ok((source, target))
}

/// CSV header `f0,...,f{d-1},label,domain`; values use shortest round-trip
/// decimal form so load(save(ds)) == ds exactly.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for i in 0..ds.dim {
        out.push_str(&format!("f{i},"));
    }
    out.push_str("label,domain\n");
    for s in &ds.samples {
        for v in &s.x {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{},{}\n", s.y, s.domain.name()));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| MtsError::Data(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "domain" {
        return Err(MtsError::Data(format!("{}: line 1: bad header", path.display())));
    }
    let dim = cols.len() - 2;
    for (i, c) in cols[..dim].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(MtsError::Data(format!("{}: line 1: bad feature column {c:?}", path.display())));
        }
    }

    let mut samples = Vec::new();
    let mut max_known = 0usize;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(MtsError::Data(format!(
                "{}: line {}: expected {} fields, got {}",
                path.display(),
                lineno,
                dim + 2,
                fields.len()
            )));
        }
        let mut x = Vec::with_capacity(dim);
        for f in &fields[..dim] {
            x.push(f.parse::<f64>().map_err(|_| {
                MtsError::Data(format!("{}: line {}: bad feature {f:?}", path.display(), lineno))
            })?);
        }
        let y: usize = fields[dim].parse().map_err(|_| {
            MtsError::Data(format!("{}: line {}: bad label {:?}", path.display(), lineno, fields[dim]))
        })?;
        if y == 0 {
            return Err(MtsError::Data(format!(
                "{}: line {}: label 0 out of range",
                path.display(),
                lineno
            )));
        }
        let domain = match fields[dim + 1] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => {
                return Err(MtsError::Data(format!(
                    "{}: line {}: unknown domain token {other:?}",
                    path.display(),
                    lineno
                )))
            }
        };
        if domain == Domain::Source {
            max_known = max_known.max(y);
        }
        samples.push((lineno, Sample { x, y, domain }));
    }

    // K = max source label; a target-only file assumes its max label is the
    // unknown class K+1 (true for every file this crate writes).
    let k = if max_known > 0 {
        max_known
    } else {
        samples.iter().map(|(_, s)| s.y).max().unwrap_or(1).saturating_sub(1)
    };
    for (lineno, s) in &samples {
        let limit = match s.domain {
            Domain::Source => k,
            Domain::Target => k + 1,
        };
        if s.y > limit {
            return Err(MtsError::Data(format!(
                "{}: line {}: label {} out of range (K={})",
                path.display(),
                lineno,
                s.y,
                k
            )));
        }
    }

    Ok(Dataset { dim, k, samples: samples.into_iter().map(|(_, s)| s).collect() })
}

/// Partitions a shuffled 0..n into consecutive batches; every index appears
/// exactly once per epoch, the final batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(MtsError::Config("batch_size must be >= 2".into()));
    }
    if n == 0 {
        return Err(MtsError::Data("empty dataset".into()));
    }
    if batch_size > n {
        return Err(MtsError::Data(format!("batch_size {batch_size} exceeds dataset size {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinism_bitwise() {
        let cfg = ShiftConfig::default();
        let (s1, t1) = generate(&cfg).unwrap();
        let (s2, t2) = generate(&cfg).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn label_sets() {
        let cfg = ShiftConfig::default();
        let (s, t) = generate(&cfg).unwrap();
        let src_labels: std::collections::BTreeSet<usize> = s.samples.iter().map(|x| x.y).collect();
        assert_eq!(src_labels, (1..=cfg.k).collect());
        let tgt_labels: std::collections::BTreeSet<usize> = t.samples.iter().map(|x| x.y).collect();
        assert!(tgt_labels.contains(&(cfg.k + 1)));
        assert!(tgt_labels.iter().all(|&y| y <= cfg.k + 1));
    }

    #[test]
    fn zero_rotation_centroids_agree() {
        let cfg = ShiftConfig {
            rotation_deg: 0.0,
            n_source: 3000,
            n_target: 5000,
            noise_sigma: 0.5,
            ..Default::default()
        };
        let (s, t) = generate(&cfg).unwrap();
        for cls in 1..=cfg.k {
            for d in 0..2 {
                let sm: Vec<f64> =
                    s.samples.iter().filter(|x| x.y == cls).map(|x| x.x[d]).collect();
                let tm: Vec<f64> =
                    t.samples.iter().filter(|x| x.y == cls).map(|x| x.x[d]).collect();
                let ms = sm.iter().sum::<f64>() / sm.len() as f64;
                let mt = tm.iter().sum::<f64>() / tm.len() as f64;
                let tol = 3.0 * cfg.noise_sigma / (sm.len().min(tm.len()) as f64).sqrt() * 2.0;
                assert!((ms - mt).abs() < tol, "class {cls} dim {d}: {ms} vs {mt}");
            }
        }
    }

    #[test]
    fn rotation_180_flips_centroid() {
        let cfg = ShiftConfig {
            k: 2,
            u: 2,
            rotation_deg: 180.0,
            n_source: 400,
            n_target: 4000,
            noise_sigma: 0.3,
            ..Default::default()
        };
        let (_, t) = generate(&cfg).unwrap();
        // class 1 centroid is (4, 0); rotated by 180 degrees it is (-4, 0)
        let pts: Vec<&Sample> = t.samples.iter().filter(|s| s.y == 1).collect();
        let mx = pts.iter().map(|s| s.x[0]).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|s| s.x[1]).sum::<f64>() / pts.len() as f64;
        assert!((mx + 4.0).abs() < 0.1, "mx = {mx}");
        assert!(my.abs() < 0.1, "my = {my}");
    }

    #[test]
    fn csv_roundtrip_exact() {
        let cfg = ShiftConfig { n_source: 20, n_target: 20, ..Default::default() };
        let (s, t) = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for ds in [&s, &t] {
            let p = dir.path().join("ds.csv");
            save_csv(ds, &p).unwrap();
            let back = load_csv(&p).unwrap();
            assert_eq!(*ds, back);
        }
    }

    #[test]
    fn csv_empty_dataset_roundtrip() {
        let ds = Dataset { dim: 2, k: 0, samples: vec![] };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        save_csv(&ds, &p).unwrap();
        let back = load_csv(&p).unwrap();
        assert!(back.samples.is_empty());
        assert_eq!(back.dim, 2);
    }

    #[test]
    fn csv_label_out_of_range_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(
            &p,
            "f0,f1,label,domain\n1.0,2.0,2,source\n0.5,0.5,4,target\n",
        )
        .unwrap();
        // K = 2 from source rows, so target label 4 > K+1
        let err = load_csv(&p).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn csv_unknown_domain_token() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "f0,f1,label,domain\n1.0,2.0,1,weird\n").unwrap();
        let err = load_csv(&p).unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("weird"), "{err}");
    }

    #[test]
    fn epoch_batches_cover_each_index_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batches = epoch_batches(23, 5, &mut rng).unwrap();
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_batches_full_size_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batches = epoch_batches(8, 8, &mut rng).unwrap();
        assert_eq!(batches.len(), 1);
        let mut b = batches[0].clone();
        b.sort_unstable();
        assert_eq!(b, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_batches_deterministic() {
        let a = epoch_batches(17, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = epoch_batches(17, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn epoch_batches_oversized_batch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(epoch_batches(3, 4, &mut rng).is_err());
    }

    #[test]
    fn generate_rejects_undersized_counts() {
        let cfg = ShiftConfig { n_source: 2, ..Default::default() };
        assert!(generate(&cfg).is_err());
        let cfg = ShiftConfig { n_target: 4, ..Default::default() };
        assert!(generate(&cfg).is_err());
    }
}
