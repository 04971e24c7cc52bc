use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{is_supported_image, load_image, Augmenter, ImageBuffer};
use crate::error::{contract_err, Error, Result};

/// Supported image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_supported_image(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// RNG for one training iteration, derived only from `(seed, iteration)` so a
/// resumed run replays the same draws.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Low-light (domain A) and normal-light (domain B) images, sampled
/// independently of each other.
#[derive(Clone)]
pub struct UnpairedDataset {
    images_a: Arc<Vec<ImageBuffer>>,
    images_b: Arc<Vec<ImageBuffer>>,
    augmenter: Augmenter,
    seed: u64,
}

impl UnpairedDataset {
    pub fn load(
        dir_a: impl AsRef<Path>,
        dir_b: impl AsRef<Path>,
        augmenter: Augmenter,
        seed: u64,
    ) -> Result<Self> {
        let read_all = |dir: &Path| -> Result<Vec<ImageBuffer>> {
            let files = list_images(dir)?;
            if files.is_empty() {
                return Err(contract_err!("no images found in {}", dir.display()));
            }
            files.iter().map(load_image).collect()
        };
        let a = read_all(dir_a.as_ref())?;
        let b = read_all(dir_b.as_ref())?;
        Self::from_images(a, b, augmenter, seed)
    }

    pub fn from_images(
        images_a: Vec<ImageBuffer>,
        images_b: Vec<ImageBuffer>,
        augmenter: Augmenter,
        seed: u64,
    ) -> Result<Self> {
        if images_a.is_empty() || images_b.is_empty() {
            return Err(contract_err!("both domains need at least one image"));
        }
        Ok(UnpairedDataset {
            images_a: Arc::new(images_a.into_iter().map(|i| i.to_rgb()).collect()),
            images_b: Arc::new(images_b.into_iter().map(|i| i.to_rgb()).collect()),
            augmenter,
            seed,
        })
    }

    pub fn len_a(&self) -> usize {
        self.images_a.len()
    }

    pub fn len_b(&self) -> usize {
        self.images_b.len()
    }

    pub fn images_a(&self) -> &[ImageBuffer] {
        &self.images_a
    }

    pub fn images_b(&self) -> &[ImageBuffer] {
        &self.images_b
    }

    /// Augmented `(a, b)` pair for one iteration.
    pub fn sample(&self, iteration: u64) -> Result<(ImageBuffer, ImageBuffer)> {
        let mut rng = iteration_rng(self.seed, iteration);
        let ia = rng.random_range(0..self.images_a.len());
        let ib = rng.random_range(0..self.images_b.len());
        let a = self.augmenter.apply(&self.images_a[ia], &mut rng)?;
        let b = self.augmenter.apply(&self.images_b[ib], &mut rng)?;
        Ok((a, b))
    }
}

pub type Sample = (u64, ImageBuffer, ImageBuffer);

/// Background worker producing augmented samples through a channel of
/// capacity two.
pub struct Prefetcher {
    rx: Receiver<Result<Sample>>,
    handle: Option<JoinHandle<()>>,
}

impl Prefetcher {
    pub fn spawn(dataset: UnpairedDataset, start: u64, end: u64) -> Self {
        let (tx, rx) = sync_channel(2);
        let handle = std::thread::spawn(move || {
            for it in start..end {
                let item = dataset.sample(it).map(|(a, b)| (it, a, b));
                if tx.send(item).is_err() {
                    break;
                }
            }
        });
        Prefetcher {
            rx,
            handle: Some(handle),
        }
    }

    /// Next sample, or `None` once the range is exhausted.
    pub fn next_sample(&self) -> Option<Result<Sample>> {
        self.rx.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // unblock the worker before joining
        let (_tx, rx) = sync_channel(0);
        drop(std::mem::replace(&mut self.rx, rx));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{save_image, synthetic};

    fn toy_dataset(seed: u64) -> UnpairedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<_> = (0..3).map(|_| synthetic::dead_leaves(40, 40, &mut rng)).collect();
        let b: Vec<_> = (0..2).map(|_| synthetic::dead_leaves(40, 40, &mut rng)).collect();
        UnpairedDataset::from_images(a, b, Augmenter::with_size(32), seed).unwrap()
    }

    #[test]
    fn sampling_is_a_function_of_seed_and_iteration() {
        let ds = toy_dataset(9);
        assert_eq!(ds.sample(5).unwrap(), ds.sample(5).unwrap());
        assert_ne!(ds.sample(5).unwrap(), ds.sample(6).unwrap());
        assert_ne!(ds.sample(5).unwrap(), toy_dataset(10).sample(5).unwrap());
    }

    #[test]
    fn prefetcher_matches_direct_sampling() {
        let ds = toy_dataset(1);
        let pf = Prefetcher::spawn(ds.clone(), 3, 7);
        for it in 3..7 {
            let (k, a, b) = pf.next_sample().unwrap().unwrap();
            assert_eq!(k, it);
            assert_eq!((a, b), ds.sample(it).unwrap());
        }
        assert!(pf.next_sample().is_none());
    }

    #[test]
    fn dropping_prefetcher_early_does_not_hang() {
        let pf = Prefetcher::spawn(toy_dataset(2), 0, 1000);
        let _ = pf.next_sample();
        drop(pf);
    }

    #[test]
    fn load_reads_sorted_directories_and_rejects_empty() {
        let root = tempfile::tempdir().unwrap();
        let (da, db) = (root.path().join("a"), root.path().join("b"));
        std::fs::create_dir_all(&da).unwrap();
        std::fs::create_dir_all(&db).unwrap();
        assert!(UnpairedDataset::load(&da, &db, Augmenter::with_size(8), 0).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for name in ["2.png", "1.ppm"] {
            save_image(&synthetic::dead_leaves(12, 12, &mut rng), da.join(name)).unwrap();
        }
        std::fs::write(da.join("notes.txt"), "skip me").unwrap();
        save_image(&synthetic::dead_leaves(12, 12, &mut rng), db.join("x.png")).unwrap();
        let files = list_images(&da).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files[0].ends_with("1.ppm"));
        let ds = UnpairedDataset::load(&da, &db, Augmenter::with_size(8), 0).unwrap();
        assert_eq!((ds.len_a(), ds.len_b()), (2, 1));
    }
}
