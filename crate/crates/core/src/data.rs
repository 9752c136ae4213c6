//! CIFAR-10 binary distribution loader.
//!
//! Each batch file holds 10,000 records of 3,073 bytes: one label byte
//! followed by the red, green and blue 32×32 planes (rows top to bottom).
//! Images are converted to channel-last `[32, 32, 3]` with values `byte/255`.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const RECORD_BYTES: usize = 1 + PIXELS * CHANNELS;
pub const RECORDS_PER_FILE: usize = 10_000;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<Tensor<f32>>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Dataset {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Keep the examples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: self.split,
        }
    }
}

/// Decode one planar record into a channel-last image.
pub fn decode_record(record: &[u8]) -> Tensor<f32> {
    debug_assert_eq!(record.len(), RECORD_BYTES);
    let planes = &record[1..];
    let mut data = Vec::with_capacity(PIXELS * CHANNELS);
    for p in 0..PIXELS {
        for c in 0..CHANNELS {
            data.push(planes[c * PIXELS + p] as f32 / 255.0);
        }
    }
    Tensor::from_vec(&[IMAGE_SIDE, IMAGE_SIDE, CHANNELS], data).expect("fixed image shape")
}

/// Parse a whole batch buffer. `path` only labels errors.
pub fn parse_batch(bytes: &[u8], path: &Path) -> Result<(Vec<Tensor<f32>>, Vec<u8>)> {
    let expected = RECORDS_PER_FILE * RECORD_BYTES;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let mut images = Vec::with_capacity(RECORDS_PER_FILE);
    let mut labels = Vec::with_capacity(RECORDS_PER_FILE);
    for (i, record) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let label = record[0];
        if label as usize >= NUM_CLASSES {
            return Err(Error::CorruptRecord {
                path: path.to_path_buf(),
                record: i,
                label,
            });
        }
        labels.push(label);
        images.push(decode_record(record));
    }
    Ok((images, labels))
}

pub fn load_batch_file(path: &Path) -> Result<(Vec<Tensor<f32>>, Vec<u8>)> {
    if !path.is_file() {
        return Err(Error::DataMissing(path.to_path_buf()));
    }
    parse_batch(&fs::read(path)?, path)
}

/// Optional per-split size limits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Subset {
    pub train: Option<usize>,
    pub test: Option<usize>,
}

impl Subset {
    pub fn both(n: usize) -> Self {
        Subset {
            train: Some(n),
            test: Some(n),
        }
    }
}

/// Load the five training batches and the test batch from `root`.
///
/// With a subset limit the split is shuffled with `seed` and the first `n`
/// examples kept; limits larger than the split are clamped.
pub fn load_dataset(root: &Path, subset: Subset, seed: u64) -> Result<(Dataset, Dataset)> {
    if let Some(missing) = TRAIN_FILES
        .iter()
        .chain(std::iter::once(&TEST_FILE))
        .map(|f| root.join(f))
        .find(|p| !p.is_file())
    {
        return Err(Error::DataMissing(missing));
    }
    Ok((
        load_split(root, Split::Train, subset.train, seed)?,
        load_split(root, Split::Test, subset.test, seed)?,
    ))
}

/// Load one split, optionally reduced to a seeded subset.
pub fn load_split(root: &Path, split: Split, limit: Option<usize>, seed: u64) -> Result<Dataset> {
    let files: &[&str] = match split {
        Split::Train => &TRAIN_FILES,
        Split::Test => &[TEST_FILE],
    };
    let mut images = Vec::with_capacity(files.len() * RECORDS_PER_FILE);
    let mut labels = Vec::with_capacity(files.len() * RECORDS_PER_FILE);
    for f in files {
        let (i, l) = load_batch_file(&root.join(f))?;
        images.extend(i);
        labels.extend(l);
    }
    let dataset = Dataset::new(images, labels, split)?;
    let seed = match split {
        Split::Train => seed,
        Split::Test => seed.wrapping_add(1),
    };
    Ok(take_subset(dataset, limit, seed))
}

fn take_subset(dataset: Dataset, limit: Option<usize>, seed: u64) -> Dataset {
    let Some(n) = limit else {
        return dataset;
    };
    if n >= dataset.len() {
        if n > dataset.len() {
            warn!(
                "subset of {n} exceeds the {:?} split ({}); using all of it",
                dataset.split,
                dataset.len()
            );
        }
        return dataset;
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(n);
    dataset.select(&order)
}

/// Seeded permutation of `0..n` cut into consecutive batches; the last one
/// may be short.
pub fn minibatches(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Encode one channel-last image with values in `[0, 1]` back into a
/// planar record (values are rounded to the nearest byte).
pub fn encode_record(image: &Tensor<f32>, label: u8) -> Result<Vec<u8>> {
    image.expect_dims(&[IMAGE_SIDE, IMAGE_SIDE, CHANNELS], "cifar image")?;
    let mut record = vec![0u8; RECORD_BYTES];
    record[0] = label;
    for (i, &v) in image.data().iter().enumerate() {
        let (p, c) = (i / CHANNELS, i % CHANNELS);
        record[1 + c * PIXELS + p] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    Ok(record)
}

/// Write a batch file from raw records.
pub fn write_batch_file(path: &Path, records: &[Vec<u8>]) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        file.write_all(r)?;
    }
    file.flush()?;
    Ok(())
}
