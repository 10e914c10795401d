//! Preprocessed in-memory datasets and seeded mini-batch iteration.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::exec;
use crate::objective::TargetMatrix;
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::manifest::Manifest;
use super::pgm::{read_pgm, GrayImage};
use super::preprocess::{preprocess, PreprocessConfig};

/// Preprocessed images `[n, 3, S, S]` with their manifest.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    manifest: Manifest,
    image_shape: [usize; 3],
    pixels: Vec<T>,
}

/// One mini-batch. `indices` point into the owning dataset.
#[derive(Clone, Debug)]
pub struct LabeledBatch<T> {
    pub indices: Vec<usize>,
    pub paths: Vec<String>,
    pub images: Tensor<T>,
    pub targets: TargetMatrix,
}

impl<T: Scalar> Dataset<T> {
    /// Preprocess in-memory images paired with `manifest` records.
    pub fn from_images(manifest: Manifest, images: &[GrayImage], config: &PreprocessConfig) -> Result<Self> {
        if images.len() != manifest.len() {
            return Err(Error::Config(format!("{} images for {} manifest records", images.len(), manifest.len())));
        }
        let tensors = exec::map_indexed(images.len(), |i| preprocess::<T>(&images[i], config));
        Self::assemble(manifest, tensors)
    }

    /// Read and preprocess every image named by `manifest`.
    pub fn load(manifest: Manifest, config: &PreprocessConfig) -> Result<Self> {
        let tensors = exec::map_indexed(manifest.len(), |i| {
            let path = manifest.resolve(&manifest.records()[i]);
            read_pgm(&path).and_then(|img| preprocess::<T>(&img, config))
        });
        Self::assemble(manifest, tensors)
    }

    fn assemble(manifest: Manifest, tensors: Vec<Result<Tensor<T>>>) -> Result<Self> {
        let mut pixels = Vec::new();
        let mut shape: Option<[usize; 3]> = None;
        for (t, r) in tensors.into_iter().zip(manifest.records()) {
            let t = t?;
            let s = [t.shape()[0], t.shape()[1], t.shape()[2]];
            match shape {
                None => shape = Some(s),
                Some(prev) if prev != s => {
                    return Err(Error::shape("dataset", format!("{} preprocesses to {s:?}, earlier images to {prev:?}", r.image_path)))
                }
                _ => {}
            }
            pixels.extend_from_slice(t.data());
        }
        Ok(Self { manifest, image_shape: shape.unwrap_or([3, 1, 1]), pixels })
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn labels(&self) -> usize {
        self.manifest.label_names().len()
    }

    pub fn targets(&self) -> TargetMatrix {
        self.manifest.targets()
    }

    /// Images and targets at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> LabeledBatch<T> {
        let per: usize = self.image_shape.iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut targets = Vec::with_capacity(indices.len() * self.labels());
        let mut paths = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
            let r = &self.manifest.records()[i];
            targets.extend_from_slice(&r.labels);
            paths.push(r.image_path.clone());
        }
        let [c, h, w] = self.image_shape;
        LabeledBatch {
            indices: indices.to_vec(),
            paths,
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("non-empty batch"),
            targets: TargetMatrix::new(indices.len(), self.labels(), targets).expect("validated labels"),
        }
    }

    /// Mini-batches of epoch `epoch` in an order drawn from the shuffle
    /// stream of `seed`. The last batch may be short.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> Result<BatchIter<'_, T>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::epoch_stream(seed, Stream::Shuffle, epoch));
        BatchIter::new(self, order, batch_size)
    }

    /// Mini-batches in manifest order.
    pub fn batches_in_order(&self, batch_size: usize) -> Result<BatchIter<'_, T>> {
        BatchIter::new(self, (0..self.len()).collect(), batch_size)
    }
}

pub struct BatchIter<'a, T> {
    data: &'a Dataset<T>,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl<'a, T: Scalar> BatchIter<'a, T> {
    fn new(data: &'a Dataset<T>, order: Vec<usize>, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(Self { data, order, batch_size, pos: 0 })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = LabeledBatch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}
