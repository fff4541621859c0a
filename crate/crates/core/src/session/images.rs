//! Reference-counted image buffers with a live-buffer counter.
//!
//! Every avatar and thumbnail the server keeps is a [`TrackedImage`]. The
//! shared counter in [`ImageTracker`] goes up when a buffer is created and
//! down when its last handle (in session state or in an outbound queue) is
//! dropped, so a purge can be verified by checking it reaches zero.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use image::RgbImage;

#[derive(Debug, Clone, Default)]
pub struct ImageTracker(Arc<AtomicUsize>);

impl ImageTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of tracked image buffers currently alive.
    pub fn retained(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    pub fn track(&self, image: RgbImage) -> TrackedImage {
        self.0.fetch_add(1, Ordering::SeqCst);
        TrackedImage(Arc::new(Inner {
            image,
            png: OnceLock::new(),
            counter: self.0.clone(),
        }))
    }
}

struct Inner {
    image: RgbImage,
    png: OnceLock<Vec<u8>>,
    counter: Arc<AtomicUsize>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.counter.fetch_sub(1, Ordering::SeqCst);
    }
}

/// A shared, immutable RGB raster held only in memory.
#[derive(Clone)]
pub struct TrackedImage(Arc<Inner>);

impl TrackedImage {
    pub fn image(&self) -> &RgbImage {
        &self.0.image
    }

    /// PNG encoding, computed once per buffer.
    pub fn png(&self) -> &[u8] {
        self.0.png.get_or_init(|| {
            let mut buf = std::io::Cursor::new(Vec::new());
            self.0
                .image
                .write_to(&mut buf, image::ImageFormat::Png)
                .expect("in-memory PNG encoding cannot fail");
            buf.into_inner()
        })
    }

    pub fn ptr_eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl PartialEq for TrackedImage {
    fn eq(&self, other: &Self) -> bool {
        self.ptr_eq(other) || self.0.image == other.0.image
    }
}

impl fmt::Debug for TrackedImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (w, h) = self.0.image.dimensions();
        write!(f, "TrackedImage({w}x{h})")
    }
}
