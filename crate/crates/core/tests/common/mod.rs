//! Synthetic CIFAR-10 batches for tests that need files on disk.
#![allow(dead_code)]

use std::path::Path;

use asu_cnn::data::{write_batch_file, CHANNELS, PIXELS, RECORDS_PER_FILE, TEST_FILE, TRAIN_FILES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One record whose class shows up as a colour cast and a stripe period,
/// with uniform noise on top.
pub fn synthetic_record(label: u8, rng: &mut impl Rng) -> Vec<u8> {
    let mut r = Vec::with_capacity(1 + PIXELS * CHANNELS);
    r.push(label);
    let l = label as usize;
    let period = 2 + l % 5;
    for c in 0..CHANNELS {
        let base = 40 + 50 * ((l + c) % 4);
        for p in 0..PIXELS {
            let (y, x) = (p / 32, p % 32);
            let along = if l < 5 { x } else { y };
            let stripe = if (along / period).is_multiple_of(2) {
                40
            } else {
                0
            };
            let noise: i32 = rng.gen_range(-30..=30);
            r.push((base as i32 + stripe + noise).clamp(0, 255) as u8);
        }
    }
    r
}

/// Write all six batch files. Labels cycle so every file holds exactly
/// 1,000 examples of each class.
pub fn write_synthetic_cifar(dir: &Path, seed: u64) {
    let files = TRAIN_FILES.iter().chain(std::iter::once(&TEST_FILE));
    for (k, name) in files.enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(k as u64));
        let records: Vec<Vec<u8>> = (0..RECORDS_PER_FILE)
            .map(|i| synthetic_record(((i * 7 + k) % 10) as u8, &mut rng))
            .collect();
        write_batch_file(&dir.join(name), &records).unwrap();
    }
}
