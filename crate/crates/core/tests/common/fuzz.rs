//! Container mutations for the format fuzz tests.

use genprobe::spectra::WeightTensor;
use genprobe::store::encode_container;
use rand::Rng;

use super::{gaussian, rng};

/// Byte offset of the JSON index.
pub const HEADER: usize = 16;

pub fn sample_container(seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    let a = WeightTensor::new("conv", vec![3, 2, 2, 2], gaussian(&mut r, 24)).unwrap();
    let b = WeightTensor::new("fc", vec![4, 3], gaussian(&mut r, 12)).unwrap();
    let c = WeightTensor::new("bias", vec![4], vec![0.5f32; 4]).unwrap();
    encode_container(&[a.into(), b.cast::<f32>().into(), c.into()]).unwrap()
}

pub fn index_len(bytes: &[u8]) -> usize {
    u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize
}

/// Mutation classes that must always be rejected.
pub fn must_fail(kind: usize, bytes: &mut Vec<u8>, r: &mut impl Rng) {
    let idx = index_len(bytes);
    match kind {
        0 => {
            let keep = r.random_range(0..bytes.len());
            bytes.truncate(keep);
        }
        1 => {
            let k = r.random_range(0..4);
            bytes[k] ^= r.random_range(1..=255u8);
        }
        2 => {
            // structural JSON characters replaced by a byte JSON cannot accept there
            let positions: Vec<usize> = (HEADER..HEADER + idx)
                .filter(|&p| matches!(bytes[p], b'{' | b'}' | b':' | b'"' | b'[' | b']'))
                .collect();
            let p = positions[r.random_range(0..positions.len())];
            bytes[p] = b'#';
        }
        _ => {
            // index length pointing past the end of the file
            let bogus = (bytes.len() as u64) + r.random_range(1..1_000_000u64);
            bytes[8..16].copy_from_slice(&bogus.to_le_bytes());
        }
    }
}
