//! RNA records, structure graphs, file formats and the synthetic generator.

mod dotbracket;
mod graph;
pub mod io;
pub mod synthetic;

pub use dotbracket::{parse_dot_bracket, to_dot_bracket};
pub use graph::{build_structure_graph, EdgeKind, StructureGraph};
pub use io::{load_dataset, DatasetFiles};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use crate::error::{Error, Result};
use crate::numerics::NDArray;

/// One labelled sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RnaRecord {
    pub id: String,
    /// Over `A, C, G, U, N`.
    pub sequence: String,
    /// Dot-bracket, same length as `sequence`.
    pub structure: String,
    pub expression: Option<Vec<f64>>,
    pub label: usize,
}

/// One-hot column of a nucleotide; `N` has none.
pub(crate) fn nucleotide_index(ch: char, position: usize) -> Result<Option<usize>> {
    match ch {
        'A' => Ok(Some(0)),
        'C' => Ok(Some(1)),
        'G' => Ok(Some(2)),
        'U' | 'T' => Ok(Some(3)),
        'N' => Ok(None),
        found => Err(Error::Alphabet {
            position,
            found,
            expected: "A C G U N",
        }),
    }
}

/// Upper-cases and maps `T` to `U`; rejects anything outside `ACGTUN`.
pub fn normalize_sequence(seq: &str) -> Result<String> {
    seq.chars()
        .enumerate()
        .map(|(i, c)| {
            let c = c.to_ascii_uppercase();
            nucleotide_index(c, i).map(|_| if c == 'T' { 'U' } else { c })
        })
        .collect()
}

/// One-hot encoding truncated or zero-padded to `max_len`, with the validity mask.
pub fn encode_sequence(seq: &str, max_len: usize) -> Result<(NDArray, Vec<bool>)> {
    if max_len == 0 {
        return Err(Error::Shape("max_len must be at least 1".into()));
    }
    let mut out = NDArray::zeros(&[max_len, 4]);
    let mut mask = vec![false; max_len];
    for (i, ch) in seq.chars().enumerate() {
        let k = nucleotide_index(ch, i)?;
        if i >= max_len {
            continue;
        }
        mask[i] = true;
        if let Some(k) = k {
            out.set(&[i, k], 1.0);
        }
    }
    Ok((out, mask))
}

/// Number of classes implied by the largest label.
pub fn class_count(records: &[RnaRecord]) -> usize {
    records.iter().map(|r| r.label + 1).max().unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_pads_with_zero_rows() {
        let (x, mask) = encode_sequence("A", 2).unwrap();
        assert_eq!(x.data(), &[1., 0., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(mask, vec![true, false]);
    }

    #[test]
    fn encode_acgu_is_identity() {
        let (x, _) = encode_sequence("ACGU", 4).unwrap();
        assert_eq!(x, NDArray::eye(4));
    }

    #[test]
    fn encode_unknown_base_is_zero_row() {
        let (x, mask) = encode_sequence("N", 1).unwrap();
        assert_eq!(x.data(), &[0.0; 4]);
        assert_eq!(mask, vec![true]);
    }

    #[test]
    fn encode_truncates() {
        let (x, mask) = encode_sequence("ACGUA", 3).unwrap();
        assert_eq!(x.shape(), &[3, 4]);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn encode_rejects_illegal_characters() {
        assert!(matches!(
            encode_sequence("AXG", 3),
            Err(Error::Alphabet { position: 1, found: 'X', .. })
        ));
    }

    #[test]
    fn normalization_maps_t_to_u() {
        assert_eq!(normalize_sequence("acgtn").unwrap(), "ACGUN");
        assert!(normalize_sequence("AC-G").is_err());
    }
}
