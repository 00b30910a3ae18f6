//! Binary archive of visited states and the provenance check of centers.
//!
//! Layout (little endian): the 8 magic bytes `MOIESTS1`, the state
//! dimension as `u32`, the state count as `u64`, then `count * dim` `f64`
//! values, one state after another.

use std::collections::HashSet;
use std::path::Path;

use moie_core::policy::MoiePolicy;

pub const MAGIC: &[u8; 8] = b"MOIESTS1";

#[derive(Debug, thiserror::Error)]
pub enum ArchiveError {
    #[error("cannot access {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a state archive")]
    BadMagic,
    #[error("archive truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("states have mixed dimensions")]
    MixedDimensions,
}

pub fn encode_states(states: &[Vec<f64>]) -> Result<Vec<u8>, ArchiveError> {
    let dim = states.first().map_or(0, Vec::len);
    if states.iter().any(|s| s.len() != dim) {
        return Err(ArchiveError::MixedDimensions);
    }
    let mut out = Vec::with_capacity(20 + 8 * dim * states.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(states.len() as u64).to_le_bytes());
    for x in states.iter().flatten() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_states(bytes: &[u8]) -> Result<Vec<Vec<f64>>, ArchiveError> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(20))
        .ok_or(ArchiveError::Truncated { expected: usize::MAX, actual: bytes.len() })?;
    if bytes.len() != expected {
        return Err(ArchiveError::Truncated { expected, actual: bytes.len() });
    }
    let values: Vec<f64> = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if dim == 0 {
        return Ok(vec![Vec::new(); count]);
    }
    Ok(values.chunks(dim).map(<[f64]>::to_vec).collect())
}

pub fn write_states(path: &Path, states: &[Vec<f64>]) -> Result<(), ArchiveError> {
    let bytes = encode_states(states)?;
    std::fs::write(path, bytes).map_err(|source| ArchiveError::Io { path: path.display().to_string(), source })
}

pub fn read_states(path: &Path) -> Result<Vec<Vec<f64>>, ArchiveError> {
    let bytes = std::fs::read(path).map_err(|source| ArchiveError::Io { path: path.display().to_string(), source })?;
    decode_states(&bytes)
}

/// Exact-match lookup of states by their bit patterns.
#[derive(Debug, Clone, Default)]
pub struct ProvenanceIndex {
    states: HashSet<Vec<u64>>,
}

impl ProvenanceIndex {
    pub fn new<'a>(states: impl IntoIterator<Item = &'a Vec<f64>>) -> Self {
        Self { states: states.into_iter().map(|s| bits(s)).collect() }
    }

    pub fn contains(&self, state: &[f64]) -> bool {
        self.states.contains(&bits(state))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn bits(s: &[f64]) -> Vec<u64> {
    s.iter().map(|x| x.to_bits()).collect()
}

/// Slots of active experts whose center is not bit-identical to an archived
/// state.
pub fn unmatched_centers(policy: &MoiePolicy, index: &ProvenanceIndex) -> Vec<usize> {
    (0..policy.k()).filter(|&i| policy.active[i] && !index.contains(&policy.centers[i])).collect()
}

/// Euclidean distance from `center` to the closest of `states`.
pub fn nearest_distance(center: &[f64], states: &[Vec<f64>]) -> f64 {
    states
        .iter()
        .map(|s| s.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_layout() {
        let bytes = encode_states(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &1u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 36);
    }

    #[test]
    fn decode_inverts_encode() {
        let states = vec![vec![0.1, -0.0, f64::MIN_POSITIVE], vec![3.0, 4.0, 5.0]];
        let back = decode_states(&encode_states(&states).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in states.iter().zip(&back) {
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let mut bytes = encode_states(&[vec![1.0]]).unwrap();
        bytes.pop();
        assert!(matches!(decode_states(&bytes), Err(ArchiveError::Truncated { .. })));
        assert!(matches!(decode_states(b"NOTANARCHIVE........"), Err(ArchiveError::BadMagic)));
        assert!(matches!(encode_states(&[vec![1.0], vec![1.0, 2.0]]), Err(ArchiveError::MixedDimensions)));
    }

    #[test]
    fn provenance_is_bit_exact() {
        let states = vec![vec![0.1, 0.2]];
        let index = ProvenanceIndex::new(&states);
        assert!(index.contains(&[0.1, 0.2]));
        assert!(!index.contains(&[0.1, 0.2 + f64::EPSILON]));
        assert!(!index.contains(&[-0.0, 0.0]) && !ProvenanceIndex::new(&[vec![0.0, 0.0]]).contains(&[-0.0, 0.0]));
    }

    #[test]
    fn nearest_distance_scans_all_states() {
        let states = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        assert_eq!(nearest_distance(&[3.0, 4.0], &states), 0.0);
        assert_eq!(nearest_distance(&[0.0, 5.0], &states), (9.0f64 + 1.0).sqrt());
    }
}
