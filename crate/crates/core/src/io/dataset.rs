//! Deterministic prototype-plus-noise image classification data.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::{Scalar, Tensor};

/// Labelled images `[samples, channels, S, S]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let images = self.images.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx)?;
        Ok(Self {
            images,
            labels,
            classes: self.classes,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    Probe,
}

impl Split {
    fn stream_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
            Split::Probe => 2,
        }
    }
}

/// Parameters of the synthetic task. Prototypes depend only on `seed`, so
/// every split of one spec shares the same classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            channels: 3,
            image_size: 8,
            train_samples: 2000,
            eval_samples: 500,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::contract("synthetic data needs at least two classes"));
        }
        if self.channels == 0 || self.image_size == 0 {
            return Err(Error::contract("image size and channel count must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::contract("noise std must be non-negative"));
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    /// Class prototypes, one unit-normal image per class.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(self.seed, streams::PROTOTYPES);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.classes)
            .map(|_| (0..self.pixels()).map(|_| normal.sample(&mut rng)).collect())
            .collect()
    }

    pub fn samples(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Eval | Split::Probe => self.eval_samples,
        }
    }
}

/// `samples` images; sample `i` has label `i mod classes` and equals that
/// class's prototype plus Gaussian noise.
pub fn generate_split<T: Scalar>(spec: &DatasetSpec, split: Split, samples: usize) -> Result<Dataset<T>> {
    spec.validate()?;
    if samples < spec.classes {
        return Err(Error::contract(format!(
            "{samples} samples cannot cover {} classes",
            spec.classes
        )));
    }
    let protos = spec.prototypes();
    let noise_stream = streams::NOISE + 16 * split.stream_offset();
    let mut rng = rng::stream(spec.seed, noise_stream);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(samples * spec.pixels());
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % spec.classes;
        labels.push(label);
        for &p in &protos[label] {
            let z: f64 = normal.sample(&mut rng);
            data.push(T::from_f64(p + spec.noise_std * z));
        }
    }
    let s = spec.image_size;
    Ok(Dataset {
        images: Tensor::new(vec![samples, spec.channels, s, s], data)?,
        labels,
        classes: spec.classes,
    })
}

/// Train-split data with the given shape parameters.
pub fn generate_dataset<T: Scalar>(classes: usize, samples: usize, image_size: usize, seed: u64) -> Result<Dataset<T>> {
    let spec = DatasetSpec {
        classes,
        image_size,
        train_samples: samples,
        seed,
        ..DatasetSpec::default()
    };
    generate_split(&spec, Split::Train, samples)
}

/// Accuracy of assigning each image to its nearest prototype.
pub fn nearest_prototype_accuracy<T: Scalar>(data: &Dataset<T>, prototypes: &[Vec<f64>]) -> f64 {
    let pixels = data.images.len() / data.len();
    let correct = data
        .images
        .data()
        .chunks(pixels)
        .zip(&data.labels)
        .filter(|(img, &label)| {
            let dist = |p: &Vec<f64>| -> f64 {
                img.iter().zip(p).map(|(a, b)| (a.as_f64() - b).powi(2)).sum()
            };
            let best = prototypes
                .iter()
                .enumerate()
                .min_by(|a, b| dist(a.1).total_cmp(&dist(b.1)))
                .map(|(i, _)| i);
            best == Some(label)
        })
        .count();
    correct as f64 / data.len() as f64
}
