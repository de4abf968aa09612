//! Row-mask lifecycle: logits, soft masks, budget normalization, binarization
//! and the non-learned baseline generators.
//!
//! A row mask of length `m` always contains a centered low-frequency base band
//! of `l_base` rows that are sampled unconditionally. The remaining `m - l_base`
//! rows are the high-frequency rows; a budget `b` counts how many of them are
//! sampled.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_model::{KSpace, RowMask};

/// Binarization threshold. Values equal to the threshold map to 1.
pub const THRESHOLD: f64 = 0.5;

/// Magnitude of the logit used to seed mask parameters from a binary mask.
pub const INIT_LOGIT: f64 = 0.1;

/// Unbounded mask logits `xi`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskParam {
    pub xi: Vec<f64>,
}

/// Mask values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub values: Vec<f64>,
}

impl SoftMask {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!("soft mask entry {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

impl RowMask for SoftMask {
    fn len(&self) -> usize {
        self.values.len()
    }
    fn weight(&self, row: usize) -> f64 {
        self.values[row]
    }
}

/// A deployable 0/1 row mask with a sampled base band and an exact budget.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "BinaryMaskRepr", into = "BinaryMaskRepr")]
pub struct BinaryMask {
    l_base: usize,
    rows: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct BinaryMaskRepr {
    m: usize,
    l_base: usize,
    budget: usize,
    rows: Vec<u8>,
}

impl TryFrom<BinaryMaskRepr> for BinaryMask {
    type Error = Error;

    fn try_from(r: BinaryMaskRepr) -> Result<Self> {
        if r.rows.len() != r.m {
            return Err(Error::shape(format!("{} rows", r.m), r.rows.len()));
        }
        let mask = BinaryMask::new(r.rows, r.l_base)?;
        if mask.budget() != r.budget {
            return Err(Error::validation(format!(
                "mask declares budget {} but samples {} high-frequency rows",
                r.budget,
                mask.budget()
            )));
        }
        Ok(mask)
    }
}

impl From<BinaryMask> for BinaryMaskRepr {
    fn from(mask: BinaryMask) -> Self {
        BinaryMaskRepr {
            m: mask.m(),
            l_base: mask.l_base,
            budget: mask.budget(),
            rows: mask.rows,
        }
    }
}

impl BinaryMask {
    /// Validates that `rows` is 0/1 and that the base band is fully sampled.
    pub fn new(rows: Vec<u8>, l_base: usize) -> Result<Self> {
        let m = rows.len();
        if m == 0 {
            return Err(Error::validation("mask must have at least one row"));
        }
        if let Some(v) = rows.iter().find(|v| **v > 1) {
            return Err(Error::validation(format!("binary mask entry {v} is not 0/1")));
        }
        let band = base_band(m, l_base)?;
        if rows[band].iter().any(|v| *v != 1) {
            return Err(Error::validation("base low-frequency rows must all be sampled"));
        }
        Ok(Self { l_base, rows })
    }

    /// Builds a mask from the base band plus the given high-frequency values,
    /// ordered as in [`high_freq_rows`].
    pub fn from_high_freq(m: usize, l_base: usize, hf: &[u8]) -> Result<Self> {
        let hf_rows = high_freq_rows(m, l_base)?;
        if hf.len() != hf_rows.len() {
            return Err(Error::shape(format!("{} high-frequency values", hf_rows.len()), hf.len()));
        }
        let mut rows = vec![0u8; m];
        for r in base_band(m, l_base)? {
            rows[r] = 1;
        }
        for (&r, &v) in hf_rows.iter().zip(hf) {
            rows[r] = v;
        }
        Self::new(rows, l_base)
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn l_base(&self) -> usize {
        self.l_base
    }

    pub fn rows(&self) -> &[u8] {
        &self.rows
    }

    /// Number of sampled high-frequency rows.
    pub fn budget(&self) -> usize {
        self.sampled() - self.l_base
    }

    pub fn sampled(&self) -> usize {
        self.rows.iter().map(|&v| v as usize).sum()
    }

    pub fn acceleration(&self) -> f64 {
        self.m() as f64 / self.sampled() as f64
    }

    /// Values at the high-frequency rows, ordered as in [`high_freq_rows`].
    pub fn high_freq(&self) -> Vec<u8> {
        high_freq_rows(self.m(), self.l_base)
            .expect("validated at construction")
            .into_iter()
            .map(|r| self.rows[r])
            .collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.rows.iter().map(|&v| v as f64).collect()
    }

    pub fn hamming(&self, other: &BinaryMask) -> usize {
        self.rows.iter().zip(&other.rows).filter(|(a, b)| a != b).count()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl RowMask for BinaryMask {
    fn len(&self) -> usize {
        self.rows.len()
    }
    fn weight(&self, row: usize) -> f64 {
        self.rows[row] as f64
    }
}

/// Centered base band: rows `m/2 - ceil(l/2) .. m/2 + floor(l/2)`.
///
/// When `l = m` with `m` odd the band would start at -1; it is shifted to
/// cover the whole grid.
pub fn base_band(m: usize, l: usize) -> Result<Range<usize>> {
    if l > m {
        return Err(Error::validation(format!("base band {l} larger than {m} rows")));
    }
    let start = (m / 2).saturating_sub(l.div_ceil(2)).min(m - l);
    Ok(start..start + l)
}

/// Row indices outside the base band, ascending.
pub fn high_freq_rows(m: usize, l: usize) -> Result<Vec<usize>> {
    let band = base_band(m, l)?;
    Ok((0..m).filter(|r| !band.contains(r)).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn soft_from_param(p: &MaskParam) -> Result<SoftMask> {
    if p.xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mask parameters".into()));
    }
    Ok(SoftMask {
        values: p.xi.iter().map(|&x| sigmoid(x)).collect(),
    })
}

/// `xi = +0.1` where the mask is 1 and `-0.1` where it is 0.
pub fn init_param_from_binary(rows: &[u8]) -> MaskParam {
    MaskParam {
        xi: rows
            .iter()
            .map(|&v| if v != 0 { INIT_LOGIT } else { -INIT_LOGIT })
            .collect(),
    }
}

/// Rescales `p` so its mean equals `alpha`.
///
/// With `q` the current mean, `p` is scaled by `alpha / q` when `q >= alpha`,
/// otherwise `1 - p` is scaled by `(1 - alpha) / (1 - q)`. Both scale factors
/// are at most 1, so for inputs in `[0, 1]` the output stays in `[0, 1]`; the
/// final clamp only absorbs rounding. A mean of exactly 0 or 1 yields the
/// constant mask `alpha`.
pub fn normalize_budget(p: &[f64], alpha: f64) -> Result<SoftMask> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation(format!("sampling ratio {alpha} outside (0, 1)")));
    }
    if p.is_empty() {
        return Err(Error::validation("cannot normalize an empty mask"));
    }
    if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::validation(format!("mask entry {v} outside [0, 1]")));
    }
    let q = p.iter().sum::<f64>() / p.len() as f64;
    let values = if q == 0.0 || q == 1.0 {
        vec![alpha; p.len()]
    } else if q >= alpha {
        let s = alpha / q;
        p.iter().map(|&v| (s * v).clamp(0.0, 1.0)).collect()
    } else {
        let s = (1.0 - alpha) / (1.0 - q);
        p.iter().map(|&v| (1.0 - s * (1.0 - v)).clamp(0.0, 1.0)).collect()
    };
    Ok(SoftMask { values })
}

/// Entry is 1 iff `p >= threshold`.
pub fn binarize(p: &[f64], threshold: f64) -> Vec<u8> {
    p.iter().map(|&v| u8::from(v >= threshold)).collect()
}

/// Budget control on a full-length soft mask; base rows are ignored and forced to 1.
pub fn enforce_budget(p: &SoftMask, l_base: usize, b: usize, m: usize) -> Result<BinaryMask> {
    if p.len() != m {
        return Err(Error::shape(format!("mask of length {m}"), p.len()));
    }
    let hf: Vec<f64> = high_freq_rows(m, l_base)?.into_iter().map(|r| p.values[r]).collect();
    enforce_budget_high_freq(&hf, l_base, b, m)
}

/// Budget control on the high-frequency sub-vector (length `m - l_base`).
///
/// Normalizes to ratio `b / (m - l_base)`, binarizes, and when the threshold
/// does not give exactly `b` ones falls back to the top-`b` entries. Ranking
/// uses the normalized value, then the raw value (clipping can tie the
/// former), then the lower row index.
pub fn enforce_budget_high_freq(hf: &[f64], l_base: usize, b: usize, m: usize) -> Result<BinaryMask> {
    if l_base > m {
        return Err(Error::validation(format!("base band {l_base} larger than {m} rows")));
    }
    let h = m - l_base;
    if hf.len() != h {
        return Err(Error::shape(format!("{h} high-frequency values"), hf.len()));
    }
    if b > h {
        return Err(Error::validation(format!("budget {b} exceeds {h} high-frequency rows")));
    }
    if b == 0 {
        return BinaryMask::from_high_freq(m, l_base, &vec![0; h]);
    }
    if b == h {
        return BinaryMask::from_high_freq(m, l_base, &vec![1; h]);
    }
    let normalized = normalize_budget(hf, b as f64 / h as f64)?;
    let mut bits = binarize(&normalized.values, THRESHOLD);
    if bits.iter().filter(|&&v| v == 1).count() != b {
        let mut order: Vec<usize> = (0..h).collect();
        order.sort_by(|&i, &j| {
            normalized.values[j]
                .total_cmp(&normalized.values[i])
                .then(hf[j].total_cmp(&hf[i]))
                .then(i.cmp(&j))
        });
        bits = vec![0; h];
        for &i in &order[..b] {
            bits[i] = 1;
        }
    }
    BinaryMask::from_high_freq(m, l_base, &bits)
}

fn check_budget(m: usize, l: usize, b: usize) -> Result<usize> {
    if l > m || b > m - l {
        return Err(Error::validation(format!(
            "base {l} plus budget {b} exceeds {m} rows"
        )));
    }
    Ok(m - l)
}

pub fn make_lowfreq_base(m: usize, l: usize) -> Result<BinaryMask> {
    let h = check_budget(m, l, 0)?;
    BinaryMask::from_high_freq(m, l, &vec![0; h])
}

/// Base band plus `b` high-frequency rows drawn uniformly without replacement.
pub fn make_random_mask<R: Rng + ?Sized>(m: usize, l: usize, b: usize, rng: &mut R) -> Result<BinaryMask> {
    let h = check_budget(m, l, b)?;
    let mut hf = vec![0u8; h];
    for i in rand::seq::index::sample(rng, h, b) {
        hf[i] = 1;
    }
    BinaryMask::from_high_freq(m, l, &hf)
}

/// Base band plus `b` rows spread evenly over the high-frequency rows:
/// the `k`-th pick is the `floor(k (m - l) / b)`-th high-frequency row.
pub fn make_equispaced_mask(m: usize, l: usize, b: usize) -> Result<BinaryMask> {
    let h = check_budget(m, l, b)?;
    let mut hf = vec![0u8; h];
    for k in 0..b {
        hf[k * h / b] = 1;
    }
    BinaryMask::from_high_freq(m, l, &hf)
}

/// Base band plus `b` distinct high-frequency rows drawn without replacement
/// with probability proportional to `density` (length `m`) restricted to the
/// high-frequency rows. Rows of zero density are only used once the positive
/// ones are exhausted.
pub fn make_prob_mask<R: Rng + ?Sized>(
    m: usize,
    l: usize,
    b: usize,
    density: &[f64],
    rng: &mut R,
) -> Result<BinaryMask> {
    let h = check_budget(m, l, b)?;
    if density.len() != m {
        return Err(Error::shape(format!("density of length {m}"), density.len()));
    }
    let rows = high_freq_rows(m, l)?;
    let weights: Vec<f64> = rows.iter().map(|&r| density[r]).collect();
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::validation("density must be finite and non-negative"));
    }
    let positive = weights.iter().filter(|&&w| w > 0.0).count();
    let mut hf = vec![0u8; h];
    let weighted = b.min(positive);
    if weighted > 0 {
        let picks = rand::seq::index::sample_weighted(rng, h, |i| weights[i], weighted)
            .map_err(|e| Error::validation(format!("weighted sampling failed: {e}")))?;
        for i in picks {
            hf[i] = 1;
        }
    }
    if weighted < b {
        let rest: Vec<usize> = (0..h).filter(|&i| hf[i] == 0).collect();
        for k in rand::seq::index::sample(rng, rest.len(), b - weighted) {
            hf[rest[k]] = 1;
        }
    }
    BinaryMask::from_high_freq(m, l, &hf)
}

/// Mean over images of the per-image normalized row-energy profile.
pub fn energy_density_distribution(train: &[KSpace]) -> Result<Vec<f64>> {
    let first = train
        .first()
        .ok_or_else(|| Error::validation("energy density needs at least one k-space"))?;
    let (m, _) = first.shape();
    let mut acc = vec![0.0; m];
    for k in train {
        if k.shape().0 != m {
            return Err(Error::shape(format!("{m} rows"), k.shape().0));
        }
        let energy: Vec<f64> = k
            .data()
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|v| v.norm_sqr()).sum())
            .collect();
        let total: f64 = energy.iter().sum();
        if total > 0.0 {
            for (a, e) in acc.iter_mut().zip(energy) {
                *a += e / total;
            }
        } else {
            for a in acc.iter_mut() {
                *a += 1.0 / m as f64;
            }
        }
    }
    let count = train.len() as f64;
    Ok(acc.into_iter().map(|a| a / count).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn sigmoid_values() {
        let s = soft_from_param(&MaskParam { xi: vec![0.0, 0.1, -0.1] }).unwrap();
        assert!(close(&s.values, &[0.5, 0.52498, 0.47502], 1e-4));
        assert!(soft_from_param(&MaskParam { xi: vec![f64::INFINITY] }).is_err());
    }

    #[test]
    fn init_from_binary_round_trip() {
        assert_eq!(init_param_from_binary(&[1, 0, 1]).xi, vec![0.1, -0.1, 0.1]);
        assert_eq!(init_param_from_binary(&[1; 4]).xi, vec![0.1; 4]);
        let rows = vec![1, 0, 0, 1, 1, 0, 1, 0];
        let soft = soft_from_param(&init_param_from_binary(&rows)).unwrap();
        assert_eq!(binarize(&soft.values, THRESHOLD), rows);
    }

    #[test]
    fn normalize_hand_examples() {
        let a = normalize_budget(&[0.5, 0.5, 1.0, 0.0], 0.25).unwrap();
        assert!(close(&a.values, &[0.25, 0.25, 0.5, 0.0], 1e-12));
        let b = normalize_budget(&[0.1, 0.1, 0.0, 0.2], 0.5).unwrap();
        assert!(close(&b.values, &[0.5, 0.5, 0.4444, 0.5556], 1e-3));
        let p = [0.2, 0.4, 0.3, 0.1];
        assert!(close(&normalize_budget(&p, 0.25).unwrap().values, &p, 1e-12));
    }

    #[test]
    fn normalize_degenerate_and_invalid() {
        assert_eq!(normalize_budget(&[0.0; 3], 0.3).unwrap().values, vec![0.3; 3]);
        assert_eq!(normalize_budget(&[1.0; 3], 0.3).unwrap().values, vec![0.3; 3]);
        assert!(normalize_budget(&[0.5], 0.0).is_err());
        assert!(normalize_budget(&[0.5], 1.0).is_err());
        assert!(normalize_budget(&[1.5], 0.5).is_err());
    }

    #[test]
    fn binarize_ties_to_one() {
        assert_eq!(binarize(&[0.49, 0.5, 0.51], THRESHOLD), vec![0, 1, 1]);
        assert_eq!(binarize(&[0.7; 5], THRESHOLD), vec![1; 5]);
    }

    #[test]
    fn base_band_arithmetic() {
        assert_eq!(base_band(320, 8).unwrap(), 156..164);
        assert_eq!(base_band(16, 4).unwrap(), 6..10);
        assert_eq!(base_band(16, 16).unwrap(), 0..16);
        assert_eq!(base_band(8, 3).unwrap(), 2..5);
        assert_eq!(base_band(5, 5).unwrap(), 0..5);
        assert!(base_band(4, 5).is_err());
        let base = make_lowfreq_base(320, 8).unwrap();
        let set: Vec<usize> = (0..320).filter(|&r| base.rows()[r] == 1).collect();
        assert_eq!(set, (156..164).collect::<Vec<_>>());
        assert_eq!(make_lowfreq_base(16, 16).unwrap().rows(), &[1; 16]);
    }

    #[test]
    fn enforce_budget_cases() {
        let m = 16;
        let uniform = SoftMask::new(vec![0.5; m]).unwrap();
        let mask = enforce_budget(&uniform, 4, 3, m).unwrap();
        assert_eq!(mask.budget(), 3);
        assert_eq!(mask.sampled(), 7);

        // exactly three clearly separated high-frequency rows
        let hf_rows = high_freq_rows(m, 4).unwrap();
        let chosen = [hf_rows[1], hf_rows[5], hf_rows[10]];
        let values: Vec<f64> = (0..m).map(|r| if chosen.contains(&r) { 0.95 } else { 0.05 }).collect();
        let mask = enforce_budget(&SoftMask::new(values).unwrap(), 4, 3, m).unwrap();
        for r in hf_rows {
            assert_eq!(mask.rows()[r] == 1, chosen.contains(&r));
        }

        let b0 = enforce_budget(&uniform, 4, 0, m).unwrap();
        assert_eq!(b0, make_lowfreq_base(m, 4).unwrap());
        assert!(enforce_budget(&uniform, 4, 13, m).is_err());
        assert!(enforce_budget(&SoftMask::new(vec![0.5; 15]).unwrap(), 4, 3, m).is_err());
    }

    #[test]
    fn enforce_budget_is_idempotent_on_valid_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let mask = make_random_mask(16, 4, 5, &mut rng).unwrap();
            let again = enforce_budget(&SoftMask::new(mask.as_f64()).unwrap(), 4, 5, 16).unwrap();
            assert_eq!(again, mask);
        }
    }

    #[test]
    fn random_mask_frequencies() {
        let (m, l, b) = (16, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 10_000;
        let mut counts = vec![0usize; m];
        for _ in 0..draws {
            let mask = make_random_mask(m, l, b, &mut rng).unwrap();
            assert_eq!(mask.sampled(), l + b);
            for (c, v) in counts.iter_mut().zip(mask.rows()) {
                *c += *v as usize;
            }
        }
        let p = b as f64 / (m - l) as f64;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for r in high_freq_rows(m, l).unwrap() {
            assert!((counts[r] as f64 - draws as f64 * p).abs() <= 3.0 * sigma, "row {r}: {}", counts[r]);
        }
        let a = make_random_mask(m, l, b, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = make_random_mask(m, l, b, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn equispaced_layout() {
        let mask = make_equispaced_mask(16, 4, 4).unwrap();
        let hf = high_freq_rows(16, 4).unwrap();
        let picked: Vec<usize> = hf.iter().copied().filter(|&r| mask.rows()[r] == 1).collect();
        assert_eq!(picked, vec![hf[0], hf[3], hf[6], hf[9]]);
        assert_eq!(make_equispaced_mask(16, 4, 12).unwrap().rows(), &[1; 16]);
        assert_eq!(make_equispaced_mask(16, 4, 4).unwrap(), mask);
    }

    #[test]
    fn prob_mask_respects_budget_and_zero_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut density = vec![0.0; 16];
        density[0] = 1.0;
        density[15] = 2.0;
        for _ in 0..50 {
            let mask = make_prob_mask(16, 4, 2, &density, &mut rng).unwrap();
            assert_eq!(mask.budget(), 2);
            assert_eq!((mask.rows()[0], mask.rows()[15]), (1, 1));
        }
        let mask = make_prob_mask(16, 4, 5, &density, &mut rng).unwrap();
        assert_eq!(mask.budget(), 5);
    }

    #[test]
    fn energy_density_hand_example() {
        let rows = [4.0f64, 1.0, 1.0, 2.0];
        let k = Array2::from_shape_fn((4, 1), |(i, _)| Complex64::new(rows[i].sqrt(), 0.0));
        let k = KSpace::new(k).unwrap();
        let d = energy_density_distribution(&[k.clone()]).unwrap();
        assert!(close(&d, &[0.5, 0.125, 0.125, 0.25], 1e-12));
        let d2 = energy_density_distribution(&[k.clone(), k]).unwrap();
        assert!(close(&d, &d2, 1e-15));
        assert!(energy_density_distribution(&[]).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let mask = make_equispaced_mask(16, 4, 3).unwrap();
        let json = mask.to_json().unwrap();
        assert!(json.contains("\"budget\":3"));
        assert_eq!(BinaryMask::from_json(&json).unwrap(), mask);
        let bad = r#"{"m":4,"l_base":2,"budget":1,"rows":[0,1,1,0]}"#;
        assert!(BinaryMask::from_json(bad).is_err());
        let missing_base = r#"{"m":4,"l_base":2,"budget":0,"rows":[0,1,0,0]}"#;
        assert!(BinaryMask::from_json(missing_base).is_err());
    }

    proptest! {
        #[test]
        fn normalize_mean_and_order(p in prop::collection::vec(0.0f64..=1.0, 2..64), alpha in 0.01f64..0.99) {
            let out = normalize_budget(&p, alpha).unwrap();
            prop_assert!(out.values.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!((out.mean() - alpha).abs() < 1e-6);
            for i in 0..p.len() {
                for j in 0..p.len() {
                    if p[i] <= p[j] {
                        prop_assert!(out.values[i] <= out.values[j]);
                    }
                }
            }
        }

        #[test]
        fn enforce_budget_exact(p in prop::collection::vec(0.0f64..=1.0, 16), b in 0usize..=12) {
            let mask = enforce_budget(&SoftMask::new(p).unwrap(), 4, b, 16).unwrap();
            prop_assert_eq!(mask.budget(), b);
            prop_assert_eq!(mask.sampled(), 4 + b);
        }

        #[test]
        fn mask_json_round_trip(seed in any::<u64>(), b in 0usize..=28) {
            let mask = make_random_mask(32, 4, b, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert_eq!(BinaryMask::from_json(&mask.to_json().unwrap()).unwrap(), mask);
        }
    }
}
