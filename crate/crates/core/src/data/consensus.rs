//! Annotation consensus: a label is confirmed only when the majority
//! side reaches the agreement threshold (default 80%); everything else
//! is left unresolved for human discussion.

use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consensus {
    Label(u8),
    Unresolved,
}

/// Majority fraction `f = majority count / total votes`; returns the
/// majority label when `f ≥ threshold`, otherwise unresolved. Exact ties
/// are always unresolved.
pub fn consensus_label(votes: &[u8], threshold: f64) -> Result<Consensus, DataError> {
    if votes.is_empty() {
        return Err(DataError::Invalid("consensus needs at least one vote".into()));
    }
    if votes.iter().any(|&v| v > 1) {
        return Err(DataError::Invalid("votes must be 0 or 1".into()));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(DataError::Invalid(format!(
            "consensus threshold {threshold} outside [0, 1]"
        )));
    }
    let ones = votes.iter().filter(|&&v| v == 1).count();
    let zeros = votes.len() - ones;
    if ones == zeros {
        return Ok(Consensus::Unresolved);
    }
    let (majority, count) = if ones > zeros { (1, ones) } else { (0, zeros) };
    let fraction = count as f64 / votes.len() as f64;
    if fraction >= threshold {
        Ok(Consensus::Label(majority))
    } else {
        Ok(Consensus::Unresolved)
    }
}
