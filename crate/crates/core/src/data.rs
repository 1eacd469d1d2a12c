//! In-memory image classification datasets.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{contract_err, dim_err, Result};
use crate::real::Real;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Images `[N, C, H, W]` with pixels in `[0, 1]` and labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T: Real = f64> {
    pub name: String,
    pub split: Split,
    images: Tensor<T>,
    labels: Vec<usize>,
    classes: usize,
}

impl<T: Real> Dataset<T> {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        images: Tensor<T>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(dim_err!("images must be [N,C,H,W], got {:?}", images.shape()));
        }
        if images.shape()[0] != labels.len() {
            return Err(dim_err!("{} images but {} labels", images.shape()[0], labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(contract_err!("label {} outside [0, {})", bad, classes));
        }
        if images.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(contract_err!("pixel values must lie in [0, 1]"));
        }
        Ok(Dataset { name: name.into(), split, images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// One image `[C, H, W]`.
    pub fn image(&self, i: usize) -> Tensor<T> {
        let len = self.sample_len();
        Tensor::from_parts(self.sample_shape().to_vec(), self.images.data()[i * len..(i + 1) * len].to_vec())
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Stacks the given samples into `[n, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
        }
        let [c, h, w] = self.sample_shape();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::from_parts(alloc::vec![indices.len(), c, h, w], data), labels)
    }

    /// Dataset made of the given samples, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.batch(indices);
        Dataset { name: self.name.clone(), split: self.split, images, labels, classes: self.classes }
    }

    /// The first `n` samples (all of them when `n` exceeds the length).
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    /// A fixed pseudo-random subset of size `n`, in ascending index order.
    pub fn subset(&self, n: usize, seed: u64) -> Self {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, 0));
        idx.truncate(n);
        idx.sort_unstable();
        self.select(&idx)
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            name: self.name.clone(),
            split: self.split,
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}

/// Synthetic classification data: each class is a fixed random template and
/// samples are noisy copies of it, clamped to `[0, 1]`.
pub fn toy<T: Real>(
    shape: [usize; 3],
    classes: usize,
    per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if classes == 0 || per_class == 0 || shape.contains(&0) {
        return Err(contract_err!("toy dataset dimensions must be positive"));
    }
    let len: usize = shape.iter().product();
    let mut r = rng::stream(seed, 0);
    let templates: Vec<Vec<f64>> =
        (0..classes).map(|_| (0..len).map(|_| if r.random_bool(0.3) { 0.9 } else { 0.1 }).collect()).collect();
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        for &t in &templates[class] {
            let v: f64 = t + noise * (r.random::<f64>() * 2.0 - 1.0);
            data.push(T::cast_from(v.clamp(0.0, 1.0)));
        }
    }
    let images = Tensor::from_parts(alloc::vec![n, shape[0], shape[1], shape[2]], data);
    Dataset::new("toy", Split::Train, images, labels, classes)
}
