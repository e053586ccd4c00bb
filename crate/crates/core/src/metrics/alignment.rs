use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::metrics::extractor::{dot, FeatureExtractor};

/// Mean pairwise cosine (×100) between two sets of unit features.
pub fn image_alignment_features(generated: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput("image alignment feature set".into()));
    }
    let d = generated[0].len();
    if generated.iter().chain(reference).any(|f| f.len() != d) {
        return Err(Error::Dimension("feature dimensions differ".into()));
    }
    let mut s = 0.0;
    for g in generated {
        for r in reference {
            s += dot(g, r);
        }
    }
    Ok(100.0 * s / (generated.len() * reference.len()) as f64)
}

/// Mean cosine (×100) between image features and one text feature.
pub fn text_alignment_features(generated: &[Vec<f64>], text: &[f64]) -> Result<f64> {
    if generated.is_empty() {
        return Err(Error::EmptyInput("text alignment image set".into()));
    }
    if generated.iter().any(|f| f.len() != text.len()) {
        return Err(Error::Dimension("feature dimensions differ".into()));
    }
    let s: f64 = generated.iter().map(|g| dot(g, text)).sum();
    Ok(100.0 * s / generated.len() as f64)
}

pub fn image_alignment(generated: &[&Tensor], reference: &[&Tensor], ext: &FeatureExtractor) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::EmptyInput("image alignment image set".into()));
    }
    image_alignment_features(&ext.encode_images(generated)?, &ext.encode_images(reference)?)
}

pub fn text_alignment(generated: &[&Tensor], prompt: &str, ext: &FeatureExtractor) -> Result<f64> {
    let text = ext.encode_text(prompt)?;
    if generated.is_empty() {
        return Err(Error::EmptyInput("text alignment image set".into()));
    }
    text_alignment_features(&ext.encode_images(generated)?, &text)
}

/// `IA[k][l]` and `TA[k][l]`: alignment of task `l` measured after learning
/// task `k`, for `l <= k`. Tasks are 1-based.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AlignmentMatrix {
    entries: BTreeMap<(usize, usize), (f64, f64)>,
}

impl AlignmentMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, k: usize, l: usize, ia: f64, ta: f64) -> Result<()> {
        if l == 0 || l > k {
            return Err(Error::Range(format!("entry ({k}, {l}) is not lower-triangular")));
        }
        self.entries.insert((k, l), (ia, ta));
        Ok(())
    }

    pub fn get(&self, k: usize, l: usize) -> Option<(f64, f64)> {
        self.entries.get(&(k, l)).copied()
    }

    fn require(&self, k: usize, l: usize) -> Result<(f64, f64)> {
        self.get(k, l).ok_or(Error::IncompleteMatrix { k, l })
    }

    /// Largest task index with any entry.
    pub fn tasks(&self) -> usize {
        self.entries.keys().map(|&(k, _)| k).max().unwrap_or(0)
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        self.entries.iter().map(|(&(k, l), &(ia, ta))| (k, l, ia, ta))
    }

    /// CSV with header `k,l,ia,ta`; floats use shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,l,ia,ta\n");
        for (k, l, ia, ta) in self.entries() {
            s.push_str(&format!("{k},{l},{ia},{ta}\n"));
        }
        s
    }

    pub fn from_csv(text: &str, location: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("k,l,ia,ta") {
            return Err(Error::integrity(location, "missing header `k,l,ia,ta`"));
        }
        let mut m = Self::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::integrity(location, format!("malformed row {}", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let k = f[0].parse().map_err(|_| bad())?;
            let l = f[1].parse().map_err(|_| bad())?;
            let ia = f[2].parse().map_err(|_| bad())?;
            let ta = f[3].parse().map_err(|_| bad())?;
            m.set(k, l, ia, ta)?;
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

/// Task forgetting rates after task `k`:
/// `(1/(k-1)) * sum_{l<k} (M[l][l] - M[k][l])` for IA and TA.
pub fn tfr(matrix: &AlignmentMatrix, k: usize) -> Result<(f64, f64)> {
    if k < 2 {
        return Err(Error::UndefinedMetric(format!("forgetting rate needs k >= 2, got {k}")));
    }
    let (mut fi, mut ft) = (0.0, 0.0);
    for l in 1..k {
        let (ia_ll, ta_ll) = matrix.require(l, l)?;
        let (ia_kl, ta_kl) = matrix.require(k, l)?;
        fi += ia_ll - ia_kl;
        ft += ta_ll - ta_kl;
    }
    let n = (k - 1) as f64;
    Ok((fi / n, ft / n))
}

/// Rounds a percentage to one decimal for display.
pub fn percent1(x: f64) -> String {
    format!("{x:.1}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_tfr() {
        let mut m = AlignmentMatrix::new();
        m.set(1, 1, 80.0, 30.0).unwrap();
        m.set(2, 2, 70.0, 25.0).unwrap();
        m.set(3, 1, 78.0, 29.0).unwrap();
        m.set(3, 2, 69.0, 25.0).unwrap();
        m.set(3, 3, 60.0, 20.0).unwrap();
        let (fi, ft) = tfr(&m, 3).unwrap();
        assert_eq!(fi, 1.5);
        assert_eq!(ft, 0.5);
        assert!(matches!(tfr(&m, 1), Err(Error::UndefinedMetric(_))));
        m.entries.remove(&(3, 2));
        assert!(matches!(tfr(&m, 3), Err(Error::IncompleteMatrix { k: 3, l: 2 })));
    }

    #[test]
    fn csv_roundtrip() {
        let mut m = AlignmentMatrix::new();
        m.set(1, 1, 80.123456789, -3.5).unwrap();
        m.set(2, 1, 0.1 + 0.2, 1e-9).unwrap();
        assert_eq!(AlignmentMatrix::from_csv(&m.to_csv(), "x").unwrap(), m);
        assert!(m.clone().set(1, 2, 0.0, 0.0).is_err());
    }

    #[test]
    fn alignment_extremes() {
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        assert_eq!(image_alignment_features(&[e(0), e(1)], &[e(0), e(1)]).unwrap(), 50.0);
        assert_eq!(image_alignment_features(&[e(0)], &[e(0)]).unwrap(), 100.0);
        assert_eq!(image_alignment_features(&[e(0)], &[e(1), e(2)]).unwrap(), 0.0);
        assert_eq!(text_alignment_features(&[e(2), e(2)], &e(2)).unwrap(), 100.0);
        assert!(image_alignment_features(&[], &[e(0)]).is_err());
    }
}
