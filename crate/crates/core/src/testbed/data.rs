use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TestbedError;

pub const CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    /// Distance of each blob centre from the origin. Centres sit 120 degrees
    /// apart, so smaller values mean more overlap.
    pub radius: f64,
    /// Per-coordinate standard deviation of every blob.
    pub spread: f64,
    /// Multiplies the second feature after sampling. Classes 1 and 2 differ
    /// only along that axis, so a small value makes telling them apart a
    /// slow, late phase of training.
    pub y_scale: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            radius: 3.0,
            spread: 1.0,
            y_scale: 0.07,
            n_train: 1500,
            n_val: 500,
            n_test: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Split {
    pub features: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> [usize; CLASSES] {
        let mut c = [0; CLASSES];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// The first `n` examples (all of them if the split is shorter).
    pub fn head(&self, n: usize) -> Split {
        let n = n.min(self.len());
        Split {
            features: self.features[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }
}

/// Three Gaussian blobs split into train, validation and test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: DatasetConfig,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl SyntheticDataset {
    pub fn generate(config: &DatasetConfig) -> Result<Self, TestbedError> {
        if !(config.radius.is_finite() && config.radius >= 0.0) {
            return Err(TestbedError::Invalid(format!("radius must be finite and >= 0, got {}", config.radius)));
        }
        if !(config.spread.is_finite() && config.spread > 0.0) {
            return Err(TestbedError::Invalid(format!("spread must be finite and > 0, got {}", config.spread)));
        }
        if !(config.y_scale.is_finite() && config.y_scale > 0.0) {
            return Err(TestbedError::Invalid(format!("y_scale must be finite and > 0, got {}", config.y_scale)));
        }
        if config.n_train == 0 || config.n_val == 0 || config.n_test == 0 {
            return Err(TestbedError::Invalid("every split needs at least one example".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let noise = Normal::new(0.0, config.spread).expect("positive spread");
        let centres: Vec<[f64; 2]> = (0..CLASSES)
            .map(|c| {
                let a = 2.0 * std::f64::consts::PI * c as f64 / CLASSES as f64;
                [config.radius * a.cos(), config.radius * a.sin()]
            })
            .collect();
        let mut split = |n: usize| {
            // Round-robin labels keep every class within one of n / 3.
            let mut labels: Vec<usize> = (0..n).map(|i| i % CLASSES).collect();
            labels.shuffle(&mut rng);
            let features = labels
                .iter()
                .map(|&y| {
                    let x0 = centres[y][0] + noise.sample(&mut rng);
                    let x1 = centres[y][1] + noise.sample(&mut rng);
                    [x0, config.y_scale * x1]
                })
                .collect();
            Split { features, labels }
        };
        let train = split(config.n_train);
        let val = split(config.n_val);
        let test = split(config.n_test);
        Ok(Self {
            config: *config,
            train,
            val,
            test,
        })
    }
}
