//! Attention-map losses. Maps are `[n_spatial, s]` post-softmax matrices,
//! one per layer; column `j` is token `j`'s spatial map (row-major `H×W`).

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Normalized 3×3 Gaussian kernel, row-major.
pub fn gaussian_kernel3(sigma: f64) -> [f64; 9] {
    let mut k = [0.0; 9];
    for dy in 0..3 {
        for dx in 0..3 {
            let (y, x) = (dy as f64 - 1.0, dx as f64 - 1.0);
            k[dy * 3 + dx] = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
        }
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Forbidden-region masks: concept `i` of `n` owns the `i`-th of `n` equal
/// vertical stripes; its mask is 1 everywhere else.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Vec<f64>>,
}

impl RegionMasks {
    pub fn stripes(n: usize, height: usize, width: usize) -> Result<Self> {
        if n > width {
            return Err(Error::Range(format!("{n} concept regions on a grid {width} wide")));
        }
        let masks = (0..n)
            .map(|i| {
                let (lo, hi) = (i * width / n, (i + 1) * width / n);
                (0..height * width)
                    .map(|p| {
                        let x = p % width;
                        if (lo..hi).contains(&x) {
                            0.0
                        } else {
                            1.0
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            height,
            width,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

fn check_maps(g: &Graph, maps: &[Var], spatial: usize, tokens: &[usize]) -> Result<()> {
    if maps.is_empty() {
        return Err(Error::EmptyInput("attention layers".into()));
    }
    for &m in maps {
        let s = g.shape(m);
        if s.len() != 2 || s[0] != spatial {
            return Err(Error::Dimension(format!(
                "attention map {s:?} does not match {spatial} spatial positions"
            )));
        }
        if let Some(&j) = tokens.iter().find(|&&j| j >= s[1]) {
            return Err(Error::Dimension(format!("token index {j} outside {} columns", s[1])));
        }
    }
    Ok(())
}

fn sum_terms(g: &mut Graph, terms: Vec<Var>) -> Option<Var> {
    terms.into_iter().reduce(|a, b| g.add(a, b))
}

/// `(1/(n_l n_c)) sum_l sum_i ||A^i_l ⊙ M_i||^2`, squared norm as a plain
/// sum of squares. Zero when there are no concept tokens.
pub fn clul_loss(g: &mut Graph, maps: &[Var], concepts: &[usize], regions: &RegionMasks) -> Result<Var> {
    let spatial = regions.height * regions.width;
    check_maps(g, maps, spatial, concepts)?;
    if regions.len() != concepts.len() {
        return Err(Error::Dimension(format!(
            "{} region masks for {} concept tokens",
            regions.len(),
            concepts.len()
        )));
    }
    if concepts.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::new();
    for &m in maps {
        for (&i, mask) in concepts.iter().zip(&regions.masks) {
            let a = g.column(m, i);
            let a = g.mul_const(a, mask.clone());
            let a = g.square(a);
            terms.push(g.sum(a));
        }
    }
    let total = sum_terms(g, terms).expect("non-empty");
    Ok(g.scale(total, 1.0 / (maps.len() * concepts.len()) as f64))
}

/// Smoothed layer-mean map of token `j`, as a `[H, W]` node.
pub fn smoothed_map(g: &mut Graph, maps: &[Var], j: usize, height: usize, width: usize, kernel: [f64; 9]) -> Var {
    let cols: Vec<Var> = maps.iter().map(|&m| g.column(m, j)).collect();
    let n = cols.len();
    let s = sum_terms(g, cols).expect("at least one layer");
    let mean = g.scale(s, 1.0 / n as f64);
    let mean = g.reshape(mean, vec![height, width]);
    g.blur3(mean, kernel)
}

/// `sum_j (1 - max(G(mean_l A^j_l)))` over personalized tokens.
pub fn dal_loss(
    g: &mut Graph,
    maps: &[Var],
    personalized: &[usize],
    height: usize,
    width: usize,
    kernel: [f64; 9],
) -> Result<Var> {
    if personalized.is_empty() {
        return Err(Error::EmptyTarget);
    }
    check_maps(g, maps, height * width, personalized)?;
    let mut terms = Vec::new();
    for &j in personalized {
        let sm = smoothed_map(g, maps, j, height, width, kernel);
        let mx = g.max(sm);
        let neg = g.scale(mx, -1.0);
        terms.push(g.add_scalar(neg, 1.0));
    }
    Ok(sum_terms(g, terms).expect("non-empty"))
}

/// Activation mask: 1 where the value is strictly above
/// `fraction * max(map)`.
pub fn extract_mask(map: &[f64], fraction: f64) -> Vec<f64> {
    let mx = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tau = fraction * mx;
    map.iter().map(|&v| if v > tau { 1.0 } else { 0.0 }).collect()
}

/// Orthogonal attention loss over pairs (concept `i`, personalized `j`),
/// read elementwise on the support of `M^i`: a matched pair contributes
/// `sum_{M^i} (1 - A^j)^2 / sum A^j`, an unmatched pair
/// `sum_{M^i} (A^j)^2 / sum A^j`; the total is divided by `n_l n_c`.
/// `masks[l][c]` is the activation mask of `concepts[c]` in layer `l`;
/// `pairing` lists `(personalized, concept)` token positions.
pub fn oaa_loss(
    g: &mut Graph,
    maps: &[Var],
    concepts: &[usize],
    personalized: &[usize],
    masks: &[Vec<Vec<f64>>],
    pairing: &[(usize, usize)],
) -> Result<Var> {
    let spatial = maps.first().map(|&m| g.shape(m)[0]).unwrap_or(0);
    let all: Vec<usize> = concepts.iter().chain(personalized).copied().collect();
    check_maps(g, maps, spatial, &all)?;
    if masks.len() != maps.len() || masks.iter().any(|l| l.len() != concepts.len()) {
        return Err(Error::Dimension("one activation mask per layer and concept expected".into()));
    }
    if masks.iter().flatten().any(|m| m.len() != spatial) {
        return Err(Error::Dimension("activation mask does not match the spatial grid".into()));
    }
    for &j in personalized {
        if !pairing.iter().any(|&(p, c)| p == j && concepts.contains(&c)) {
            return Err(Error::Pairing(j));
        }
    }
    if concepts.is_empty() || personalized.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut terms = Vec::new();
    for (l, &m) in maps.iter().enumerate() {
        for &j in personalized {
            let a = g.column(m, j);
            let denom = g.sum(a);
            for (ci, &i) in concepts.iter().enumerate() {
                let matched = pairing.contains(&(j, i));
                let r = if matched {
                    let neg = g.scale(a, -1.0);
                    g.add_scalar(neg, 1.0)
                } else {
                    a
                };
                let r = g.mul_const(r, masks[l][ci].clone());
                let r = g.square(r);
                let r = g.sum(r);
                terms.push(g.div_scalar(r, denom));
            }
        }
    }
    let total = sum_terms(g, terms).expect("non-empty");
    Ok(g.scale(total, 1.0 / (maps.len() * concepts.len()) as f64))
}
