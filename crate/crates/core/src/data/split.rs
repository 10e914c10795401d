//! Patient-level partitioning: every patient's images land in exactly one
//! split.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

use super::manifest::Manifest;

/// Shuffle patients with the split stream of `seed` and cut the shuffled
/// order at `round(cumulative_fraction * n_patients)`. Output manifests keep
/// the input record order.
pub fn split_patient_level(manifest: &Manifest, fractions: &[f64], seed: u64) -> Result<Vec<Manifest>> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::Config(format!("split fractions must be positive, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {total}")));
    }
    let mut patients = manifest.patients();
    patients.shuffle(&mut rng::stream(seed, Stream::Split));
    let n = patients.len();
    let mut out = Vec::with_capacity(fractions.len());
    let mut start = 0;
    let mut cum = 0.0;
    for (k, f) in fractions.iter().enumerate() {
        cum += f;
        let end = if k + 1 == fractions.len() { n } else { ((cum * n as f64).round() as usize).clamp(start, n) };
        let ids: HashSet<&str> = patients[start..end].iter().map(String::as_str).collect();
        out.push(manifest.select_patients(&ids));
        start = end;
    }
    Ok(out)
}

/// `(train, val, test)` from three fractions.
pub fn split_three(manifest: &Manifest, fractions: [f64; 3], seed: u64) -> Result<(Manifest, Manifest, Manifest)> {
    let mut v = split_patient_level(manifest, &fractions, seed)?.into_iter();
    Ok((v.next().unwrap(), v.next().unwrap(), v.next().unwrap()))
}

/// Split from explicit patient lists, bypassing the shuffle. Patients not
/// named by any list are left out.
pub fn split_from_lists(manifest: &Manifest, lists: &[Vec<String>]) -> Result<Vec<Manifest>> {
    let known: HashSet<String> = manifest.patients().into_iter().collect();
    let mut claimed = HashSet::new();
    for id in lists.iter().flatten() {
        if !known.contains(id) {
            return Err(Error::UnknownPatient(id.clone()));
        }
        if !claimed.insert(id.as_str()) {
            return Err(Error::PatientInTwoSplits(id.clone()));
        }
    }
    Ok(lists
        .iter()
        .map(|l| manifest.select_patients(&l.iter().map(String::as_str).collect()))
        .collect())
}

/// One patient id per non-empty line; `#` starts a comment line.
pub fn read_split_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

pub fn write_split_list(path: &Path, manifest: &Manifest, comments: &[String]) -> Result<()> {
    let mut text = String::new();
    for c in comments {
        text.push_str(&format!("# {c}\n"));
    }
    for p in manifest.patients() {
        text.push_str(&p);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}
