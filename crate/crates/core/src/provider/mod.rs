//! Feature extraction: "given an image region, produce a feature map".

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::Result;
use crate::tensor::{FeatureMap, PixelRect};

pub mod bridge;
pub mod synthetic;

pub use bridge::{BridgeClient, BridgeHandshake, BridgeHead, BridgeProvider};
pub use synthetic::{paired_head, synth_extract, PairedHead, Scene, SceneObject, SyntheticProvider};

/// Stand-in for a convolutional trunk up to its last conv layer.
///
/// `extract` must be deterministic for a given `(image, crop)`.
pub trait FeatureProvider {
    /// Whatever identifies an image to this provider (a scene, a path, ...).
    type Image: ?Sized;

    fn grid_size(&self) -> usize;

    fn channels(&self) -> usize;

    fn extract(&self, image: &Self::Image, crop: PixelRect) -> Result<FeatureMap>;
}

impl<P: FeatureProvider + ?Sized> FeatureProvider for &P {
    type Image = P::Image;

    fn grid_size(&self) -> usize {
        (**self).grid_size()
    }

    fn channels(&self) -> usize {
        (**self).channels()
    }

    fn extract(&self, image: &Self::Image, crop: PixelRect) -> Result<FeatureMap> {
        (**self).extract(image, crop)
    }
}

/// Wraps a provider and counts `extract` calls.
#[derive(Debug)]
pub struct CountingProvider<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P> CountingProvider<P> {
    pub fn new(inner: P) -> Self {
        CountingProvider {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: FeatureProvider> FeatureProvider for CountingProvider<P> {
    type Image = P::Image;

    fn grid_size(&self) -> usize {
        self.inner.grid_size()
    }

    fn channels(&self) -> usize {
        self.inner.channels()
    }

    fn extract(&self, image: &Self::Image, crop: PixelRect) -> Result<FeatureMap> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.extract(image, crop)
    }
}
