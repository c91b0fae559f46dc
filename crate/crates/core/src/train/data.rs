//! Synthetic sequence-classification data with an optional fixed linear
//! transform that defines a second domain.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::Tensor;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "split/train",
            Split::Eval => "split/eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub frames: usize,
    pub template_seed: u64,
    pub noise_std: f64,
    pub time_shift_max: usize,
    /// When set, features are multiplied by an orthonormalized
    /// `I + shift·G/√F` drawn from this seed.
    pub domain_transform_seed: Option<u64>,
    pub domain_shift: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            feature_dim: 12,
            frames: 16,
            template_seed: 1,
            noise_std: 1.0,
            time_shift_max: 2,
            domain_transform_seed: None,
            domain_shift: 1.0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_classes < 2 {
            return Err("num_classes must be at least 2".into());
        }
        if self.feature_dim == 0 || self.frames == 0 {
            return Err("feature_dim and frames must be positive".into());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err("noise_std must be a finite non-negative number".into());
        }
        if self.time_shift_max >= self.frames {
            return Err("time_shift_max must be smaller than frames".into());
        }
        Ok(())
    }

    /// Class templates, each `frames × feature_dim` standard normal.
    fn templates(&self) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(rng::derive_str(self.template_seed, "templates"));
        (0..self.num_classes)
            .map(|_| {
                (0..self.frames * self.feature_dim)
                    .map(|_| StandardNormal.sample(&mut r))
                    .collect()
            })
            .collect()
    }

    /// The domain map, `F×F`, or `None` for the identity domain.
    pub fn domain_transform(&self) -> Option<Vec<f64>> {
        let seed = self.domain_transform_seed?;
        let f = self.feature_dim;
        let mut r = rng::seeded(rng::derive_str(seed, "domain"));
        let scale = self.domain_shift / (f as f64).sqrt();
        let mut m: Vec<f64> = (0..f * f)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut r);
                z * scale + if i / f == i % f { 1.0 } else { 0.0 }
            })
            .collect();
        // Gram-Schmidt over rows.
        for i in 0..f {
            for j in 0..i {
                let dot: f64 = (0..f).map(|c| m[i * f + c] * m[j * f + c]).sum();
                for c in 0..f {
                    m[i * f + c] -= dot * m[j * f + c];
                }
            }
            let norm = (0..f).map(|c| m[i * f + c] * m[i * f + c]).sum::<f64>().sqrt();
            for c in 0..f {
                m[i * f + c] /= norm;
            }
        }
        Some(m)
    }
}

/// Examples stored flat; example `i` is `features[i·T·F..(i+1)·T·F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frames: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(frames: usize, feature_dim: usize, num_classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Self {
        assert_eq!(features.len(), labels.len() * frames * feature_dim);
        Self {
            frames,
            feature_dim,
            num_classes,
            features,
            labels,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let w = self.frames * self.feature_dim;
        &self.features[i * w..(i + 1) * w]
    }

    /// `B×T×F` features and labels for the given example indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.frames * self.feature_dim);
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        let t = Tensor::new(vec![indices.len(), self.frames, self.feature_dim], data).expect("finite features");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.frames * self.feature_dim);
        for &i in indices {
            features.extend_from_slice(self.example(i));
        }
        Dataset::new(
            self.frames,
            self.feature_dim,
            self.num_classes,
            features,
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// `n` examples, labels assigned round-robin. Each example is its class
/// template circularly shifted in time by up to `time_shift_max` frames in
/// either direction, plus Gaussian noise, then mapped through the domain
/// transform when one is configured. Train and eval draw from disjoint
/// seed streams.
pub fn make_dataset(spec: &SyntheticTaskSpec, split: Split, n: usize, seed: u64) -> Dataset {
    let templates = spec.templates();
    let transform = spec.domain_transform();
    let (t, f) = (spec.frames, spec.feature_dim);
    let mut r = rng::seeded(rng::derive_str(seed, split.label()));
    let mut features = Vec::with_capacity(n * t * f);
    let mut labels = Vec::with_capacity(n);
    let span = 2 * spec.time_shift_max + 1;
    for i in 0..n {
        let label = i % spec.num_classes;
        let shift = r.random_range(0..span) as isize - spec.time_shift_max as isize;
        let template = &templates[label];
        let mut ex = vec![0.0; t * f];
        for frame in 0..t {
            let src = (frame as isize - shift).rem_euclid(t as isize) as usize;
            for c in 0..f {
                let noise: f64 = StandardNormal.sample(&mut r);
                ex[frame * f + c] = template[src * f + c] + spec.noise_std * noise;
            }
        }
        if let Some(m) = &transform {
            for frame in 0..t {
                let row: Vec<f64> = ex[frame * f..(frame + 1) * f].to_vec();
                for c in 0..f {
                    ex[frame * f + c] = (0..f).map(|j| row[j] * m[j * f + c]).sum();
                }
            }
        }
        features.extend(ex);
        labels.push(label);
    }
    Dataset::new(t, f, spec.num_classes, features, labels)
}
