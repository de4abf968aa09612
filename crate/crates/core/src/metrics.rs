//! Image-quality metrics on real (magnitude) images.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const HFEN_KERNEL: usize = 15;
pub const HFEN_SIGMA: f64 = 1.5;

fn check_pair(x: &Array2<f64>, gt: &Array2<f64>) -> Result<()> {
    if x.dim() != gt.dim() {
        return Err(Error::shape(format!("{:?}", gt.dim()), format!("{:?}", x.dim())));
    }
    if x.is_empty() {
        return Err(Error::validation("metrics need non-empty images"));
    }
    Ok(())
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// `||x - gt||_1 / ||gt||_1`.
pub fn nmae(x: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_pair(x, gt)?;
    let num: f64 = Zip::from(x).and(gt).fold(0.0, |acc, a, b| acc + (a - b).abs());
    Ok(ratio(num, gt.iter().map(|v| v.abs()).sum()))
}

/// `||x - gt||_2^2 / ||gt||_2^2`.
pub fn nmse(x: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_pair(x, gt)?;
    let num: f64 = Zip::from(x).and(gt).fold(0.0, |acc, a, b| acc + (a - b).powi(2));
    Ok(ratio(num, gt.iter().map(|v| v * v).sum()))
}

pub fn nrmse(x: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    Ok(nmse(x, gt)?.sqrt())
}

/// Summed-area table with a zero first row/column.
fn integral(img: &Array2<f64>) -> Array2<f64> {
    let (m, n) = img.dim();
    let mut s = Array2::zeros((m + 1, n + 1));
    for i in 0..m {
        for j in 0..n {
            s[(i + 1, j + 1)] = img[(i, j)] + s[(i, j + 1)] + s[(i + 1, j)] - s[(i, j)];
        }
    }
    s
}

fn box_sum(s: &Array2<f64>, i: usize, j: usize, w: usize) -> f64 {
    s[(i + w, j + w)] - s[(i, j + w)] - s[(i + w, j)] + s[(i, j)]
}

/// Mean SSIM over all valid 11x11 windows (stride 1, uniform weights,
/// sample covariance), with dynamic range `max(gt)`.
///
/// Images smaller than the window use a window equal to their smaller side.
/// An all-zero ground truth falls back to a dynamic range of 1.
pub fn ssim(x: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    let range = gt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ssim_with_range(x, gt, if range > 0.0 { range } else { 1.0 })
}

pub fn ssim_with_range(x: &Array2<f64>, gt: &Array2<f64>, data_range: f64) -> Result<f64> {
    check_pair(x, gt)?;
    let (m, n) = x.dim();
    let w = SSIM_WINDOW.min(m).min(n);
    let count = (w * w) as f64;
    let cov_norm = if w > 1 { count / (count - 1.0) } else { 1.0 };
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);

    let sx = integral(x);
    let sy = integral(gt);
    let sxx = integral(&(x * x));
    let syy = integral(&(gt * gt));
    let sxy = integral(&(x * gt));

    let mut total = 0.0;
    for i in 0..=m - w {
        for j in 0..=n - w {
            let ux = box_sum(&sx, i, j, w) / count;
            let uy = box_sum(&sy, i, j, w) / count;
            let vx = cov_norm * (box_sum(&sxx, i, j, w) / count - ux * ux);
            let vy = cov_norm * (box_sum(&syy, i, j, w) / count - uy * uy);
            let vxy = cov_norm * (box_sum(&sxy, i, j, w) / count - ux * uy);
            total += ((2.0 * ux * uy + c1) * (2.0 * vxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((m - w + 1) * (n - w + 1)) as f64)
}

/// Laplacian-of-Gaussian kernel built the way MATLAB's `fspecial('log')` does:
/// normalized Gaussian times `(r^2 - 2 sigma^2) / sigma^4`, shifted to zero sum.
pub fn log_kernel(size: usize, sigma: f64) -> Array2<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let s2 = sigma * sigma;
    let r2 = Array2::from_shape_fn((size, size), |(i, j)| {
        let (y, x) = (i as f64 - half, j as f64 - half);
        x * x + y * y
    });
    let mut g = r2.mapv(|r| (-r / (2.0 * s2)).exp());
    let gmax = g.iter().copied().fold(0.0, f64::max);
    g.mapv_inplace(|v| if v < f64::EPSILON * gmax { 0.0 } else { v });
    let gsum = g.sum();
    if gsum != 0.0 {
        g /= gsum;
    }
    let h1 = &g * &r2.mapv(|r| (r - 2.0 * s2) / (s2 * s2));
    let mean = h1.sum() / (size * size) as f64;
    h1.mapv(|v| v - mean)
}

/// Same-size 2-D correlation with zero padding.
pub fn filter_same(img: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (m, n) = img.dim();
    let (km, kn) = kernel.dim();
    let (cm, cn) = (km / 2, kn / 2);
    Array2::from_shape_fn((m, n), |(i, j)| {
        let mut acc = 0.0;
        for a in 0..km {
            let ii = i as isize + a as isize - cm as isize;
            if ii < 0 || ii >= m as isize {
                continue;
            }
            for b in 0..kn {
                let jj = j as isize + b as isize - cn as isize;
                if jj < 0 || jj >= n as isize {
                    continue;
                }
                acc += kernel[(a, b)] * img[(ii as usize, jj as usize)];
            }
        }
        acc
    })
}

/// `||LoG(x) - LoG(gt)||_2 / ||LoG(gt)||_2` with a 15x15, sigma 1.5 kernel.
pub fn hfen(x: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    check_pair(x, gt)?;
    let k = log_kernel(HFEN_KERNEL, HFEN_SIGMA);
    let lx = filter_same(x, &k);
    let lg = filter_same(gt, &k);
    let num: f64 = Zip::from(&lx).and(&lg).fold(0.0, |acc, a, b| acc + (a - b).powi(2));
    Ok(ratio(num.sqrt(), lg.iter().map(|v| v * v).sum::<f64>().sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub nmae: f64,
    pub nmse: f64,
    pub ssim: f64,
    pub hfen: f64,
}

impl ImageRecord {
    pub fn compute(id: impl Into<String>, x: &Array2<f64>, gt: &Array2<f64>) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            nmae: nmae(x, gt)?,
            nmse: nmse(x, gt)?,
            ssim: ssim(x, gt)?,
            hfen: hfen(x, gt)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    /// Quartiles use linear interpolation between order statistics.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p: f64| -> f64 {
            if v.is_empty() {
                return f64::NAN;
            }
            let pos = p * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
        };
        Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: q(0.5),
            q1: q(0.25),
            q3: q(0.75),
            min: q(0.0),
            max: q(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub nmae: Summary,
    pub nmse: Summary,
    pub ssim: Summary,
    pub hfen: Summary,
}

/// Per-image and aggregate metrics for one sampler/reconstructor pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sampler: String,
    pub reconstructor: String,
    pub records: Vec<ImageRecord>,
    pub aggregates: Aggregates,
}

#[derive(Serialize, Deserialize)]
struct SummaryRow {
    stat: String,
    nmae: f64,
    nmse: f64,
    ssim: f64,
    hfen: f64,
}

impl MetricsReport {
    pub fn new(sampler: impl Into<String>, reconstructor: impl Into<String>, records: Vec<ImageRecord>) -> Self {
        let aggregates = Self::aggregate(&records);
        Self {
            sampler: sampler.into(),
            reconstructor: reconstructor.into(),
            records,
            aggregates,
        }
    }

    pub fn aggregate(records: &[ImageRecord]) -> Aggregates {
        let col = |f: fn(&ImageRecord) -> f64| Summary::of(&records.iter().map(f).collect::<Vec<_>>());
        Aggregates {
            nmae: col(|r| r.nmae),
            nmse: col(|r| r.nmse),
            ssim: col(|r| r.ssim),
            hfen: col(|r| r.hfen),
        }
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.sampler, self.reconstructor)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Per-image rows: `id,nmae,nmse,ssim,hfen`.
    pub fn write_records_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.records {
            wr.serialize(r)?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// Aggregate block: one row per statistic.
    pub fn write_summary_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let a = &self.aggregates;
        let rows: [(&str, fn(&Summary) -> f64); 6] = [
            ("mean", |s| s.mean),
            ("median", |s| s.median),
            ("q1", |s| s.q1),
            ("q3", |s| s.q3),
            ("min", |s| s.min),
            ("max", |s| s.max),
        ];
        for (stat, f) in rows {
            wr.serialize(SummaryRow {
                stat: stat.to_string(),
                nmae: f(&a.nmae),
                nmse: f(&a.nmse),
                ssim: f(&a.ssim),
                hfen: f(&a.hfen),
            })?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_records_csv<R: std::io::Read>(r: R) -> Result<Vec<ImageRecord>> {
        let mut rd = csv::Reader::from_reader(r);
        rd.deserialize().map(|row| row.map_err(Error::from)).collect()
    }

    /// Writes `<stem>.json`, `<stem>.csv` and `<stem>_summary.csv` under `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        self.write_records_csv(f)?;
        let sum_path = dir.join(format!("{stem}_summary.csv"));
        let f = std::fs::File::create(&sum_path).map_err(|e| Error::io(&sum_path, e))?;
        self.write_summary_csv(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((1, xs.len()), xs.to_vec()).unwrap()
    }

    fn random_image(seed: u64, m: usize, n: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((m, n), |_| rng.random_range(0.0..1.0))
    }

    /// Direct per-window SSIM with no integral images.
    fn ssim_reference(x: &Array2<f64>, y: &Array2<f64>, range: f64) -> f64 {
        let (m, n) = x.dim();
        let w = 11.min(m).min(n);
        let np = (w * w) as f64;
        let (c1, c2) = ((0.01 * range).powi(2), (0.03 * range).powi(2));
        let mut acc = 0.0;
        let mut count = 0.0;
        for i in 0..=m - w {
            for j in 0..=n - w {
                let xs: Vec<f64> = (0..w).flat_map(|a| (0..w).map(move |b| (a, b))).map(|(a, b)| x[(i + a, j + b)]).collect();
                let ys: Vec<f64> = (0..w).flat_map(|a| (0..w).map(move |b| (a, b))).map(|(a, b)| y[(i + a, j + b)]).collect();
                let mx = xs.iter().sum::<f64>() / np;
                let my = ys.iter().sum::<f64>() / np;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / (np - 1.0);
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (np - 1.0);
                let cxy = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (np - 1.0);
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        acc / count
    }

    #[test]
    fn nmae_examples() {
        let gt = v(&[3.0, 4.0]);
        assert_eq!(nmae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(nmae(&v(&[0.0, 0.0]), &gt).unwrap(), 1.0);
        assert!((nmae(&v(&[3.0, 2.0]), &gt).unwrap() - 2.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn nmse_examples() {
        let gt = v(&[3.0, 4.0]);
        assert_eq!(nmse(&gt, &gt).unwrap(), 0.0);
        assert_eq!(nmse(&v(&[0.0, 0.0]), &gt).unwrap(), 1.0);
        assert!((nmse(&v(&[0.0, 4.0]), &gt).unwrap() - 9.0 / 25.0).abs() < 1e-15);
        let x = random_image(1, 9, 7);
        let y = random_image(2, 9, 7);
        assert!((nmse(&x, &y).unwrap() - nrmse(&x, &y).unwrap().powi(2)).abs() < 1e-10);
        assert!(nmse(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn ssim_identity_and_constant_closed_form() {
        let x = random_image(3, 32, 32);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let (c, range) = (0.3, 1.0);
        let a = Array2::from_elem((16, 16), c);
        let b = Array2::from_elem((16, 16), c + range);
        let got = ssim_with_range(&a, &b, range).unwrap();
        let c1 = (0.01 * range).powi(2);
        let expected = (2.0 * c * (c + range) + c1) / (c * c + (c + range).powi(2) + c1);
        assert!(got < 1.0);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_direct_window_reference() {
        for seed in 0..4 {
            let x = random_image(10 + seed, 24, 19);
            let y = &random_image(20 + seed, 24, 19) * 0.5 + &x * 0.5 + 0.2;
            let range = 1.7;
            assert!((ssim_with_range(&x, &y, range).unwrap() - ssim_reference(&x, &y, range)).abs() < 1e-6);
        }
        let x = random_image(5, 8, 8);
        let y = random_image(6, 8, 8);
        assert!((ssim_with_range(&x, &y, 1.0).unwrap() - ssim_reference(&x, &y, 1.0)).abs() < 1e-6);
    }

    #[test]
    fn log_kernel_is_zero_sum_and_symmetric() {
        let k = log_kernel(15, 1.5);
        assert!(k.sum().abs() < 1e-12);
        for i in 0..15 {
            for j in 0..15 {
                assert!((k[(i, j)] - k[(j, i)]).abs() < 1e-15);
                assert!((k[(i, j)] - k[(14 - i, j)]).abs() < 1e-15);
            }
        }
        assert!(k[(7, 7)] < 0.0);
    }

    #[test]
    fn hfen_identity_and_linearity() {
        let gt = random_image(7, 32, 32);
        assert_eq!(hfen(&gt, &gt).unwrap(), 0.0);
        for a in [0.25, 1.0, 3.0] {
            let x = &gt * a + &gt;
            assert!((hfen(&x, &gt).unwrap() - a).abs() < 1e-10);
        }
    }

    #[test]
    fn metrics_are_transpose_invariant() {
        let x = random_image(8, 20, 20);
        let y = random_image(9, 20, 20);
        let (xt, yt) = (x.t().to_owned(), y.t().to_owned());
        assert!((nmae(&x, &y).unwrap() - nmae(&xt, &yt).unwrap()).abs() < 1e-12);
        assert!((nmse(&x, &y).unwrap() - nmse(&xt, &yt).unwrap()).abs() < 1e-12);
        assert!((ssim(&x, &y).unwrap() - ssim(&xt, &yt).unwrap()).abs() < 1e-12);
        assert!((hfen(&x, &y).unwrap() - hfen(&xt, &yt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn report_csv_round_trip() {
        let gt = random_image(1, 16, 16);
        let records: Vec<ImageRecord> = (0..5)
            .map(|i| ImageRecord::compute(format!("img{i}"), &(&gt * (1.0 + 0.1 * i as f64)), &gt).unwrap())
            .collect();
        let report = MetricsReport::new("mnet", "unet", records);
        let mut buf = Vec::new();
        report.write_records_csv(&mut buf).unwrap();
        let back = MetricsReport::read_records_csv(buf.as_slice()).unwrap();
        assert_eq!(back, report.records);
        let mean = back.iter().map(|r| r.nmse).sum::<f64>() / back.len() as f64;
        assert!((mean - report.aggregates.nmse.mean).abs() < 1e-9);
        assert_eq!(report.aggregates.nmse.median, report.records[2].nmse);
        let json = report.to_json().unwrap();
        assert_eq!(MetricsReport::from_json(&json).unwrap(), report);
    }
}
