//! Embedding-space diagnostics: density overlap of per-class cosine
//! similarities, alignment and uniformity, and n-gram overlap between corpora.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::{Class, SentencePair};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::mixsp::Model;

/// Number of grid points used by [`kde_overlap`].
pub const GRID_POINTS: usize = 4096;
/// Smallest bandwidth [`silverman_bandwidth`] returns.
pub const MIN_BANDWIDTH: f64 = 1e-3;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector(
            "cosine of a zero-norm vector".into(),
        ));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySample {
    pub cosine: f64,
    pub class: Class,
}

/// Cosine samples plus the number of pairs skipped for zero-norm vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub samples: Vec<SimilaritySample>,
    pub skipped: usize,
}

fn collect<F>(pairs: &[SentencePair], mut vectors: F) -> Result<Samples>
where
    F: FnMut(&SentencePair) -> Result<(Vec<f64>, Vec<f64>)>,
{
    let mut samples = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for p in pairs {
        let (a, b) = vectors(p)?;
        match cosine(&a, &b) {
            Ok(c) => samples.push(SimilaritySample {
                cosine: c,
                class: p.class,
            }),
            Err(Error::DegenerateVector(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(Samples { samples, skipped })
}

/// `cos(z_x1, z_x2)` in the model's projected space.
pub fn cosine_samples(model: &Model, pairs: &[SentencePair]) -> Result<Samples> {
    collect(pairs, |p| {
        let pred = model.predict(p)?;
        Ok((pred.projected.z_x1, pred.projected.z_x2))
    })
}

/// `cos(h_x1, h_x2)` straight from an encoder.
pub fn encoder_cosine_samples(encoder: &Encoder, pairs: &[SentencePair]) -> Result<Samples> {
    collect(pairs, |p| {
        let e = encoder.encode(p)?;
        Ok((e.h_x1, e.h_x2))
    })
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// `0.9 · min(σ̂, IQR/1.34) · n^(-1/5)`, floored at [`MIN_BANDWIDTH`].
pub fn silverman_bandwidth(xs: &[f64]) -> Result<f64> {
    let n = xs.len();
    if n < 2 {
        return Err(Error::undefined(
            "bandwidth",
            format!("needs at least 2 samples, got {n}"),
        ));
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::undefined("bandwidth", "samples have zero variance"));
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = var.sqrt().min(iqr / 1.34);
    Ok((0.9 * spread * (n as f64).powf(-0.2)).max(MIN_BANDWIDTH))
}

/// Gaussian kernel density of `xs` with bandwidth `h` at `x`.
pub fn kde(xs: &[f64], h: f64, x: f64) -> f64 {
    let c = 1.0 / (xs.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    c * xs
        .iter()
        .map(|s| (-0.5 * ((x - s) / h).powi(2)).exp())
        .sum::<f64>()
}

/// Trapezoid rule on an ascending grid.
pub fn trapezoid(x: &[f64], f: &[f64]) -> f64 {
    x.windows(2)
        .zip(f.windows(2))
        .map(|(xw, fw)| 0.5 * (xw[1] - xw[0]) * (fw[0] + fw[1]))
        .sum()
}

/// Per-class densities on a shared grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub x: Vec<f64>,
    pub f_upper: Vec<f64>,
    pub f_lower: Vec<f64>,
    pub h_upper: f64,
    pub h_lower: f64,
}

impl DensityGrid {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,f_upper,f_lower\n");
        for i in 0..self.x.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.x[i], self.f_upper[i], self.f_lower[i]
            ));
        }
        out
    }
}

/// Overlap of the upper- and lower-class cosine densities: the trapezoid
/// integral of `min(f_upper, f_lower)` on a [`GRID_POINTS`] grid spanning
/// both samples plus five of the wider bandwidth on each side.
pub fn kde_overlap(samples: &[SimilaritySample]) -> Result<(f64, DensityGrid)> {
    let pick = |c: Class| {
        samples
            .iter()
            .filter(|s| s.class == c)
            .map(|s| s.cosine)
            .collect::<Vec<_>>()
    };
    kde_overlap_values(&pick(Class::Upper), &pick(Class::Lower))
}

/// [`kde_overlap`] on raw per-class values.
pub fn kde_overlap_values(upper: &[f64], lower: &[f64]) -> Result<(f64, DensityGrid)> {
    for (name, xs) in [("upper", upper), ("lower", lower)] {
        if xs.len() < 2 {
            return Err(Error::undefined(
                "kde overlap",
                format!(
                    "the {name} class has {} samples, at least 2 are needed",
                    xs.len()
                ),
            ));
        }
        if xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("non-finite {name} sample")));
        }
    }
    let h_upper = silverman_bandwidth(upper)
        .map_err(|e| Error::undefined("kde overlap", format!("upper class: {e}")))?;
    let h_lower = silverman_bandwidth(lower)
        .map_err(|e| Error::undefined("kde overlap", format!("lower class: {e}")))?;
    let h_max = h_upper.max(h_lower);
    let all = upper.iter().chain(lower);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min) - 5.0 * h_max;
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max) + 5.0 * h_max;
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    let x: Vec<f64> = (0..GRID_POINTS).map(|i| lo + step * i as f64).collect();
    let f_upper: Vec<f64> = x.iter().map(|&g| kde(upper, h_upper, g)).collect();
    let f_lower: Vec<f64> = x.iter().map(|&g| kde(lower, h_lower, g)).collect();
    let min: Vec<f64> = f_upper
        .iter()
        .zip(&f_lower)
        .map(|(a, b)| a.min(*b))
        .collect();
    let overlap = trapezoid(&x, &min).clamp(0.0, 1.0);
    Ok((
        overlap,
        DensityGrid {
            x,
            f_upper,
            f_lower,
            h_upper,
            h_lower,
        },
    ))
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateVector(
            "embedding has zero or non-finite norm".into(),
        ));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Mean squared distance between L2-normalised positive pairs.
pub fn alignment(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::undefined("alignment", "no positive pairs"));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += sq_dist(&unit(a)?, &unit(b)?);
    }
    Ok(total / pairs.len() as f64)
}

/// `log` of the mean of `exp(-2‖u - v‖²)` over distinct unordered pairs of
/// L2-normalised embeddings.
pub fn uniformity(embeddings: &[Vec<f64>]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::undefined(
            "uniformity",
            format!("needs at least 2 embeddings, got {}", embeddings.len()),
        ));
    }
    let units = embeddings
        .iter()
        .map(|e| unit(e))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..units.len() {
        for j in i + 1..units.len() {
            total += (-2.0 * sq_dist(&units[i], &units[j])).exp();
            count += 1;
        }
    }
    Ok((total / count as f64).ln().min(0.0))
}

/// Jaccard similarity of two corpora's word n-gram sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jaccard {
    pub n: usize,
    pub value: f64,
    /// Both n-gram sets were empty; `value` is then 0 by convention.
    pub both_empty: bool,
}

fn ngrams(sentences: &[String], n: usize) -> HashSet<Vec<String>> {
    let mut out = HashSet::new();
    for s in sentences {
        let words: Vec<String> = s.split_whitespace().map(str::to_lowercase).collect();
        for w in words.windows(n) {
            out.insert(w.to_vec());
        }
    }
    out
}

pub fn ngram_jaccard(a: &[String], b: &[String], n: usize) -> Result<Jaccard> {
    if n == 0 {
        return Err(Error::Argument("n-gram order must be at least 1".into()));
    }
    let (sa, sb) = (ngrams(a, n), ngrams(b, n));
    let union = sa.union(&sb).count();
    if union == 0 {
        return Ok(Jaccard {
            n,
            value: 0.0,
            both_empty: true,
        });
    }
    let inter = sa.intersection(&sb).count();
    Ok(Jaccard {
        n,
        value: inter as f64 / union as f64,
        both_empty: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn cosine_fixtures() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector(_))
        ));
    }

    #[test]
    fn identical_samples_overlap_fully() {
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let (o, grid) = kde_overlap_values(&xs, &xs).unwrap();
        assert!((o - 1.0).abs() < 1e-6, "{o}");
        assert_eq!(grid.x.len(), GRID_POINTS);
        assert!((trapezoid(&grid.x, &grid.f_upper) - 1.0).abs() < 1e-3);
    }

    #[test]
    fn separated_clusters_do_not_overlap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let up = Normal::new(0.9, 0.01).unwrap();
        let lo = Normal::new(-0.9, 0.01).unwrap();
        let u: Vec<f64> = (0..100).map(|_| up.sample(&mut rng)).collect();
        let l: Vec<f64> = (0..100).map(|_| lo.sample(&mut rng)).collect();
        let (o, _) = kde_overlap_values(&u, &l).unwrap();
        assert!(o < 1e-6, "{o}");
    }

    #[test]
    fn overlap_needs_two_varied_samples() {
        assert!(kde_overlap_values(&[0.1], &[0.2, 0.3]).is_err());
        assert!(kde_overlap_values(&[0.1, 0.1], &[0.2, 0.3]).is_err());
    }

    #[test]
    fn alignment_and_uniformity_closed_forms() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        assert_eq!(alignment(&[(e1.clone(), e1.clone())]).unwrap(), 0.0);
        assert!((alignment(&[(e1.clone(), e2.clone())]).unwrap() - 2.0).abs() < 1e-12);
        assert!((alignment(&[(e1.clone(), vec![-3.0, 0.0])]).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(
            uniformity(&[e1.clone(), e1.clone(), vec![2.0, 0.0]]).unwrap(),
            0.0
        );
        assert!((uniformity(&[e1.clone(), e2]).unwrap() + 4.0).abs() < 1e-12);
        assert!((uniformity(&[e1.clone(), vec![-1.0, 0.0]]).unwrap() + 8.0).abs() < 1e-12);
        assert!(uniformity(&[e1.clone()]).is_err());
        assert!(alignment(&[]).is_err());
        assert!(alignment(&[(e1, vec![0.0, 0.0])]).is_err());
    }

    #[test]
    fn jaccard_fixtures() {
        let a = s(&["a b c d e"]);
        let b = s(&["a b c d"]);
        assert_eq!(ngram_jaccard(&a, &b, 4).unwrap().value, 0.5);
        assert_eq!(ngram_jaccard(&a, &a, 3).unwrap().value, 1.0);
        assert_eq!(ngram_jaccard(&a, &s(&["x y z w"]), 1).unwrap().value, 0.0);
        let empty = ngram_jaccard(&b, &b, 9).unwrap();
        assert!(empty.both_empty && empty.value == 0.0);
        assert_eq!(
            ngram_jaccard(&s(&["The Cat"]), &s(&["the cat"]), 2)
                .unwrap()
                .value,
            1.0
        );
        assert!(ngram_jaccard(&a, &b, 0).is_err());
    }

    #[test]
    fn jaccard_shrinks_with_order_on_nested_fixture() {
        let a = s(&["a b c d e f", "g h i"]);
        let b = s(&["a b c d x y", "g h z"]);
        let vals: Vec<f64> = (1..=6)
            .map(|n| ngram_jaccard(&a, &b, n).unwrap().value)
            .collect();
        assert!(vals.windows(2).all(|w| w[1] <= w[0]), "{vals:?}");
    }

    fn arb_values() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1.0f64..1.0, 3..40)
    }

    proptest! {
        #[test]
        fn overlap_symmetric_bounded_and_shift_invariant(u in arb_values(), l in arb_values(), shift in -5.0f64..5.0) {
            let Ok((a, _)) = kde_overlap_values(&u, &l) else { return Ok(()) };
            let (b, _) = kde_overlap_values(&l, &u).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - b).abs() < 1e-12);
            let us: Vec<f64> = u.iter().map(|x| x + shift).collect();
            let ls: Vec<f64> = l.iter().map(|x| x + shift).collect();
            let (c, _) = kde_overlap_values(&us, &ls).unwrap();
            prop_assert!((a - c).abs() < 1e-9, "{} vs {}", a, c);
        }

        #[test]
        fn uniformity_nonpositive_and_order_free(
            v in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..12)
        ) {
            prop_assume!(v.iter().all(|e| norm(e) > 1e-6));
            let u = uniformity(&v).unwrap();
            prop_assert!(u <= 0.0);
            let mut r = v.clone();
            r.reverse();
            prop_assert!((uniformity(&r).unwrap() - u).abs() < 1e-12);
            let pairs: Vec<_> = v.windows(2).map(|w| (w[0].clone(), w[1].clone())).collect();
            let mut rp = pairs.clone();
            rp.reverse();
            prop_assert!((alignment(&pairs).unwrap() - alignment(&rp).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn jaccard_symmetric(a in prop::collection::vec("[a-d]( [a-d]){0,5}", 1..5), b in prop::collection::vec("[a-d]( [a-d]){0,5}", 1..5), n in 1usize..4) {
            let x = ngram_jaccard(&a, &b, n).unwrap().value;
            let y = ngram_jaccard(&b, &a, n).unwrap().value;
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}
