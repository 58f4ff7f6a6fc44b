//! Synthetic labeled datasets and their exact classifiers.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::{Purpose, SeedStream};

/// A tight cluster mixed into one label's distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Memorized {
    pub label: u32,
    pub point: [f32; 2],
    /// Probability that a sample of `label` comes from the cluster.
    pub weight: f64,
    pub sigma: f32,
}

/// Isotropic Gaussian modes in the plane. Label `l` draws from mode
/// `labels[l]`, so two labels may share a mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mixture2d {
    pub centers: Vec<[f32; 2]>,
    pub sigma: f32,
    #[serde(default)]
    pub labels: Vec<usize>,
    #[serde(default)]
    pub memorized: Option<Memorized>,
}

impl Mixture2d {
    /// `k` modes evenly spaced on a circle, one label per mode.
    pub fn ring(k: usize, radius: f32, sigma: f32) -> Self {
        let centers = (0..k)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * i as f64 / k as f64;
                [
                    (radius as f64 * a.cos()) as f32,
                    (radius as f64 * a.sin()) as f32,
                ]
            })
            .collect();
        Self {
            centers,
            sigma,
            labels: (0..k).collect(),
            memorized: None,
        }
    }
}

impl Default for Mixture2d {
    fn default() -> Self {
        Self::ring(3, 3.0, 0.5)
    }
}

pub const SHAPE_NAMES: [&str; 8] = [
    "cross", "disk", "square", "stripes", "diagonal", "ring", "checker", "triangle",
];

/// 8×8 grayscale templates in {−1, 1} plus additive Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shapes8 {
    pub templates: usize,
    pub noise: f32,
}

impl Default for Shapes8 {
    fn default() -> Self {
        Self {
            templates: 4,
            noise: 0.1,
        }
    }
}

/// Template `k` of [`SHAPE_NAMES`] as 64 row-major pixels.
pub fn shape_template(k: usize) -> Vec<f32> {
    let mut px = Vec::with_capacity(64);
    for r in 0..8i32 {
        for c in 0..8i32 {
            let (dr, dc) = (r as f32 - 3.5, c as f32 - 3.5);
            let d2 = dr * dr + dc * dc;
            let on = match k {
                0 => r == 3 || r == 4 || c == 3 || c == 4,
                1 => d2 <= 9.0,
                2 => (1..=6).contains(&r) && (1..=6).contains(&c),
                3 => r % 2 == 0,
                4 => r == c || r + 1 == c,
                5 => (6.0..=12.5).contains(&d2),
                6 => (r / 2 + c / 2) % 2 == 0,
                7 => c >= 3 - r / 2 && c <= 4 + r / 2,
                _ => panic!("no shape template {k}"),
            };
            px.push(if on { 1.0 } else { -1.0 });
        }
    }
    px
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ConceptDataset {
    Mixture2d(Mixture2d),
    Shapes8(Shapes8),
}

impl Default for ConceptDataset {
    fn default() -> Self {
        ConceptDataset::Mixture2d(Mixture2d::default())
    }
}

/// Samples with their labels.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub labels: Vec<u32>,
}

impl ConceptDataset {
    pub fn data_dim(&self) -> usize {
        match self {
            ConceptDataset::Mixture2d(_) => 2,
            ConceptDataset::Shapes8(_) => 64,
        }
    }

    pub fn num_labels(&self) -> usize {
        match self {
            ConceptDataset::Mixture2d(m) if m.labels.is_empty() => m.centers.len(),
            ConceptDataset::Mixture2d(m) => m.labels.len(),
            ConceptDataset::Shapes8(s) => s.templates,
        }
    }

    pub fn num_modes(&self) -> usize {
        match self {
            ConceptDataset::Mixture2d(m) => m.centers.len(),
            ConceptDataset::Shapes8(s) => s.templates,
        }
    }

    /// The mode a label's samples are drawn from.
    pub fn label_mode(&self, label: u32) -> Result<usize> {
        if label as usize >= self.num_labels() {
            return Err(Error::UnknownCondition {
                id: label,
                vocab: self.num_labels(),
            });
        }
        Ok(match self {
            ConceptDataset::Mixture2d(m) if !m.labels.is_empty() => m.labels[label as usize],
            _ => label as usize,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Dataset(msg));
        match self {
            ConceptDataset::Mixture2d(m) => {
                if m.centers.is_empty() {
                    return bad("mixture2d needs at least one center".into());
                }
                if !(m.sigma >= 0.0) || !m.sigma.is_finite() {
                    return bad(format!(
                        "mixture2d sigma {} must be finite and >= 0",
                        m.sigma
                    ));
                }
                for (i, a) in m.centers.iter().enumerate() {
                    if a.iter().any(|v| !v.is_finite()) {
                        return bad(format!("center {i} is not finite"));
                    }
                    if m.centers[..i].contains(a) {
                        return bad(format!("center {i} duplicates an earlier center"));
                    }
                }
                if let Some(&mode) = m.labels.iter().find(|&&mode| mode >= m.centers.len()) {
                    return bad(format!(
                        "label maps to mode {mode}, only {} centers",
                        m.centers.len()
                    ));
                }
                if let Some(mem) = &m.memorized {
                    if mem.label as usize >= self.num_labels() {
                        return bad(format!("memorized datum uses unknown label {}", mem.label));
                    }
                    if !(0.0..=1.0).contains(&mem.weight) || !(mem.sigma >= 0.0) {
                        return bad("memorized weight must be in [0, 1] and sigma >= 0".into());
                    }
                }
            }
            ConceptDataset::Shapes8(s) => {
                if !(1..=SHAPE_NAMES.len()).contains(&s.templates) {
                    return bad(format!(
                        "shapes8 supports 1..=8 templates, got {}",
                        s.templates
                    ));
                }
                if !(s.noise >= 0.0) || !s.noise.is_finite() {
                    return bad(format!("shapes8 noise {} must be finite and >= 0", s.noise));
                }
            }
        }
        Ok(())
    }

    /// Noise-free mode prototypes, one per mode.
    pub fn prototypes(&self) -> Vec<Vec<f32>> {
        match self {
            ConceptDataset::Mixture2d(m) => m.centers.iter().map(|c| c.to_vec()).collect(),
            ConceptDataset::Shapes8(s) => (0..s.templates).map(shape_template).collect(),
        }
    }

    pub fn oracle(&self) -> Result<OracleClassifier> {
        self.validate()?;
        let spread = match self {
            ConceptDataset::Mixture2d(m) => m.sigma,
            ConceptDataset::Shapes8(s) => s.noise,
        };
        Ok(OracleClassifier {
            prototypes: self.prototypes(),
            sigma: f64::from(spread),
        })
    }

    fn draw_one(
        &self,
        label: u32,
        protos: &[Vec<f32>],
        rng: &mut impl Rng,
        out: &mut Vec<f32>,
    ) -> Result<()> {
        let mode = self.label_mode(label)?;
        let (center, spread): (&[f32], f32) = match self {
            ConceptDataset::Mixture2d(m) => match &m.memorized {
                Some(mem) if mem.label == label && rng.random::<f64>() < mem.weight => {
                    (&mem.point, mem.sigma)
                }
                _ => (&protos[mode], m.sigma),
            },
            ConceptDataset::Shapes8(s) => (&protos[mode], s.noise),
        };
        out.extend(center.iter().map(|&c| {
            let z: f32 = StandardNormal.sample(rng);
            c + spread * z
        }));
        Ok(())
    }

    /// `count` samples of one label.
    pub fn sample_label(&self, label: u32, count: usize, rng: &mut impl Rng) -> Result<Tensor> {
        self.validate()?;
        let protos = self.prototypes();
        let mut data = Vec::with_capacity(count * self.data_dim());
        for _ in 0..count {
            self.draw_one(label, &protos, rng, &mut data)?;
        }
        Ok(Tensor::new(vec![count, self.data_dim()], data)?)
    }

    /// `count` samples with labels drawn uniformly.
    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Result<LabeledBatch> {
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        self.validate()?;
        let protos = self.prototypes();
        let k = self.num_labels() as u32;
        let mut data = Vec::with_capacity(count * self.data_dim());
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let l = rng.random_range(0..k);
            self.draw_one(l, &protos, rng, &mut data)?;
            labels.push(l);
        }
        let x = Tensor::new(vec![count, self.data_dim()], data)?;
        Ok(LabeledBatch { x, labels })
    }
}

/// A labeled batch from the dataset's own seed stream.
pub fn gen_dataset(spec: &ConceptDataset, count: usize, seed: u64) -> Result<LabeledBatch> {
    let mut rng = SeedStream::new(seed).rng(Purpose::Data, 0);
    spec.sample(count, &mut rng)
}

/// Maximum-likelihood mode assignment under equal-weight isotropic modes.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleClassifier {
    prototypes: Vec<Vec<f32>>,
    sigma: f64,
}

impl OracleClassifier {
    pub fn num_modes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].len()
    }

    /// Log density of `x` under each mode, up to a shared constant.
    pub fn log_densities(&self, x: &[f32]) -> Vec<f64> {
        let scale = if self.sigma > 0.0 {
            2.0 * self.sigma * self.sigma
        } else {
            1.0
        };
        self.prototypes
            .iter()
            .map(|p| {
                let d2: f64 = p
                    .iter()
                    .zip(x)
                    .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                    .sum();
                -d2 / scale
            })
            .collect()
    }

    /// Most likely mode; ties go to the lowest index.
    pub fn classify(&self, x: &[f32]) -> Result<usize> {
        if x.len() != self.dim() {
            return Err(Error::Dataset(format!(
                "sample has {} values, oracle expects {}",
                x.len(),
                self.dim()
            )));
        }
        let mut best = 0;
        let dens = self.log_densities(x);
        for (i, &d) in dens.iter().enumerate().skip(1) {
            if d > dens[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn classify_batch(&self, x: &Tensor) -> Result<Vec<usize>> {
        if x.shape().len() != 2 {
            return Err(Error::Dataset(format!(
                "expected a [B, D] batch, got {:?}",
                x.shape()
            )));
        }
        (0..x.shape()[0]).map(|i| self.classify(x.row(i))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_is_well_separated() {
        let m = Mixture2d::default();
        for (i, a) in m.centers.iter().enumerate() {
            for b in &m.centers[..i] {
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                assert!(d >= 8.0 * m.sigma, "{d}");
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = ConceptDataset::default();
        let a = gen_dataset(&spec, 50, 4).unwrap();
        let b = gen_dataset(&spec, 50, 4).unwrap();
        assert!(a.x.bit_eq(&b.x));
        assert_eq!(a.labels, b.labels);
        assert!(!gen_dataset(&spec, 50, 5).unwrap().x.bit_eq(&a.x));
    }

    #[test]
    fn zero_sigma_hits_centers() {
        let m = Mixture2d::ring(3, 2.0, 0.0);
        let centers = m.centers.clone();
        let batch = gen_dataset(&ConceptDataset::Mixture2d(m), 30, 1).unwrap();
        for (i, &l) in batch.labels.iter().enumerate() {
            assert_eq!(batch.x.row(i), &centers[l as usize]);
        }
    }

    #[test]
    fn oracle_basics() {
        let spec = ConceptDataset::default();
        let oracle = spec.oracle().unwrap();
        for (k, c) in spec.prototypes().iter().enumerate() {
            assert_eq!(oracle.classify(c).unwrap(), k);
        }
        let exact = OracleClassifier {
            prototypes: vec![vec![1.0, 0.0], vec![-1.0, 0.0]],
            sigma: 0.5,
        };
        assert_eq!(exact.classify(&[0.0, 3.0]).unwrap(), 0);
        assert!(oracle.classify(&[0.0]).is_err());
    }

    #[test]
    fn shapes_are_distinct_and_classified() {
        let spec = ConceptDataset::Shapes8(Shapes8 {
            templates: 8,
            noise: 0.3,
        });
        let protos = spec.prototypes();
        for (i, a) in protos.iter().enumerate() {
            assert_eq!(a.len(), 64);
            assert!(protos[..i].iter().all(|b| b != a), "template {i} repeats");
        }
        let oracle = spec.oracle().unwrap();
        let batch = gen_dataset(&spec, 200, 2).unwrap();
        let pred = oracle.classify_batch(&batch.x).unwrap();
        let hits = pred
            .iter()
            .zip(&batch.labels)
            .filter(|(p, l)| **p == **l as usize)
            .count();
        assert_eq!(hits, 200);
    }

    #[test]
    fn shared_modes_and_validation() {
        let mut m = Mixture2d::ring(2, 3.0, 0.5);
        m.labels = vec![0, 0, 1];
        let spec = ConceptDataset::Mixture2d(m.clone());
        assert_eq!(spec.num_labels(), 3);
        assert_eq!(spec.label_mode(1).unwrap(), 0);
        assert!(spec.label_mode(3).is_err());
        m.labels = vec![0, 2];
        assert!(ConceptDataset::Mixture2d(m).validate().is_err());
        let dup = Mixture2d {
            centers: vec![[1.0, 1.0], [1.0, 1.0]],
            ..Mixture2d::default()
        };
        assert!(ConceptDataset::Mixture2d(dup).validate().is_err());
        assert!(ConceptDataset::Shapes8(Shapes8 {
            templates: 9,
            noise: 0.1
        })
        .validate()
        .is_err());
    }

    #[test]
    fn memorized_datum_appears_with_its_weight() {
        let mut m = Mixture2d::ring(3, 3.0, 0.5);
        m.memorized = Some(Memorized {
            label: 0,
            point: [0.0, 0.0],
            weight: 0.5,
            sigma: 0.0,
        });
        let spec = ConceptDataset::Mixture2d(m);
        let mut rng = SeedStream::new(0).rng(Purpose::Data, 0);
        let x = spec.sample_label(0, 2000, &mut rng).unwrap();
        let at = (0..2000).filter(|&i| x.row(i) == [0.0, 0.0]).count();
        assert!((900..=1100).contains(&at), "{at}");
        let other = spec.sample_label(1, 200, &mut rng).unwrap();
        assert!((0..200).all(|i| other.row(i) != [0.0, 0.0]));
    }
}
