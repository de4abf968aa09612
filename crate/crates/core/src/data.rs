//! Image collections: seeded synthetic phantoms, fastMRI single-coil volumes,
//! and reproducible train/validation/test splits.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward_model::ComplexImage;

/// Identity of a slice: volume name plus slice index within the volume.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceKey {
    pub volume: String,
    pub slice: usize,
}

impl SliceKey {
    pub fn id(&self) -> String {
        format!("{}/{}", self.volume, self.slice)
    }
}

#[derive(Debug, Clone)]
pub struct Slice {
    pub key: SliceKey,
    pub image: ComplexImage,
}

impl Slice {
    pub fn id(&self) -> String {
        self.key.id()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
#[serde(deny_unknown_fields)]
pub enum DataSource {
    Phantom { count: usize },
    Fastmri { dir: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub m: usize,
    pub n: usize,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.counts.train == 0 || self.counts.val == 0 || self.counts.test == 0 {
            return Err(Error::Config("every split needs a positive count".into()));
        }
        if self.m < 8 || self.n < 8 {
            return Err(Error::Config(format!("image size {}x{} below 8x8", self.m, self.n)));
        }
        match &self.source {
            DataSource::Phantom { count } if *count < self.counts.total() => Err(Error::Config(format!(
                "{count} phantoms cannot fill splits of {}",
                self.counts.total()
            ))),
            DataSource::Fastmri { dir } if !dir.is_dir() => {
                Err(Error::Config(format!("fastMRI directory {} does not exist", dir.display())))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Slice>,
    pub val: Vec<Slice>,
    pub test: Vec<Slice>,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    value: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        u * u + v * v <= 1.0
    }
}

fn random_phantom(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Result<ComplexImage> {
    let count = rng.random_range(3..=8);
    let mut shapes = Vec::with_capacity(count);
    // an outer body ellipse, then smaller structures inside it
    shapes.push(Ellipse {
        cx: rng.random_range(-0.1..0.1),
        cy: rng.random_range(-0.1..0.1),
        a: rng.random_range(0.6..0.9),
        b: rng.random_range(0.5..0.85),
        angle: rng.random_range(0.0..std::f64::consts::PI),
        value: rng.random_range(0.3..0.6),
    });
    for _ in 1..count {
        shapes.push(Ellipse {
            cx: rng.random_range(-0.45..0.45),
            cy: rng.random_range(-0.45..0.45),
            a: rng.random_range(0.05..0.35),
            b: rng.random_range(0.05..0.35),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            value: rng.random_range(0.1..0.6),
        });
    }
    let coef: Vec<f64> = (0..5).map(|_| rng.random_range(-0.25..0.25)).collect();
    let coord = |i: usize, len: usize| 2.0 * (i as f64 + 0.5) / len as f64 - 1.0;
    let mut mag = Array2::<f64>::zeros((m, n));
    for ((i, j), v) in mag.indexed_iter_mut() {
        let (y, x) = (coord(i, m), coord(j, n));
        *v = shapes.iter().filter(|e| e.contains(x, y)).map(|e| e.value).sum();
    }
    let peak = mag.iter().copied().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::validation("phantom has no support on the grid"));
    }
    let data = Array2::from_shape_fn((m, n), |(i, j)| {
        let (y, x) = (coord(i, m), coord(j, n));
        let phase = std::f64::consts::PI
            * (coef[0] * x + coef[1] * y + coef[2] * x * y + coef[3] * x * x + coef[4] * y * y);
        Complex64::from_polar(mag[(i, j)] / peak, phase)
    });
    ComplexImage::new(data)
}

/// `count` complex phantoms of `m x n`: 3 to 8 ellipses with random
/// intensities, a smooth low-order phase, peak magnitude 1.
pub fn generate_phantoms(count: usize, m: usize, n: usize, seed: u64) -> Result<Vec<Slice>> {
    if m < 8 || n < 8 {
        return Err(Error::validation(format!("phantom size {m}x{n} below 8x8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            Ok(Slice {
                key: SliceKey {
                    volume: format!("phantom{i:05}"),
                    slice: 0,
                },
                image: random_phantom(&mut rng, m, n)?,
            })
        })
        .collect()
}

/// The six middle slices `S/2 - 3 .. S/2 + 2` of a volume, clamped to the volume.
pub fn middle_slices(s: usize) -> Range<usize> {
    let start = (s / 2).saturating_sub(3);
    start..(start + 6).min(s)
}

/// Centre crop or zero-pad to `m x n`.
pub fn crop_or_pad(img: &Array2<Complex64>, m: usize, n: usize) -> Array2<Complex64> {
    let (h, w) = img.dim();
    let mut out = Array2::zeros((m, n));
    let place = |src: usize, dst: usize| -> (usize, usize, usize) {
        if src >= dst {
            ((src - dst) / 2, 0, dst)
        } else {
            (0, (dst - src) / 2, src)
        }
    };
    let (si, di, hi) = place(h, m);
    let (sj, dj, wj) = place(w, n);
    for i in 0..hi {
        for j in 0..wj {
            out[(di + i, dj + j)] = img[(si + i, sj + j)];
        }
    }
    out
}

/// Scales an image so its largest magnitude is 1; all-zero images are rejected.
pub fn normalize_peak(img: Array2<Complex64>) -> Result<ComplexImage> {
    let peak = img.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::validation("image is identically zero"));
    }
    ComplexImage::new(img.mapv(|v| v / peak))
}

#[cfg(feature = "fastmri")]
// the H5Type derive expands to an impl inside a const block
#[allow(non_local_definitions)]
mod fastmri {
    use super::*;
    use crate::forward_model::{ifft2c, KSpace};

    #[derive(hdf5::H5Type, Clone, Copy, Debug)]
    #[repr(C)]
    struct C32 {
        r: f32,
        i: f32,
    }

    fn read_volume(path: &Path) -> Result<Vec<Array2<Complex64>>> {
        let file = hdf5::File::open(path)?;
        let ds = file.dataset("kspace")?;
        let shape = ds.shape();
        if shape.len() != 3 {
            return Err(Error::validation(format!("{}: k-space rank {} is not 3", path.display(), shape.len())));
        }
        // hdf5 links its own ndarray; go through a flat buffer
        let raw: Vec<C32> = ds.read_raw()?;
        let (h, w) = (shape[1], shape[2]);
        Ok(raw
            .chunks_exact(h * w)
            .map(|s| Array2::from_shape_fn((h, w), |(r, c)| {
                let v = s[r * w + c];
                Complex64::new(v.r as f64, v.i as f64)
            }))
            .collect())
    }

    /// Slices of every `.h5` volume under `dir`, sorted by file name. Each
    /// slice is transformed to the image domain, centre-cropped to `m x n`
    /// and scaled to unit peak magnitude. Unreadable files are skipped.
    pub fn ingest_fastmri(dir: &Path, m: usize, n: usize) -> Result<Vec<Slice>> {
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "h5"))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for path in files {
            let volume = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let slices = match read_volume(&path) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    continue;
                }
            };
            for idx in middle_slices(slices.len()) {
                let image = ifft2c(&KSpace::new(slices[idx].clone())?);
                match normalize_peak(crop_or_pad(image.data(), m, n)) {
                    Ok(image) => out.push(Slice {
                        key: SliceKey {
                            volume: volume.clone(),
                            slice: idx,
                        },
                        image,
                    }),
                    Err(e) => log::warn!("skipping {volume} slice {idx}: {e}"),
                }
            }
        }
        if out.is_empty() {
            return Err(Error::validation(format!("no usable slices under {}", dir.display())));
        }
        Ok(out)
    }
}

#[cfg(feature = "fastmri")]
pub use fastmri::ingest_fastmri;

/// Deterministic disjoint split: the collection is shuffled with `seed` and
/// cut into the configured counts; surplus slices are left out.
pub fn make_splits(mut collection: Vec<Slice>, counts: SplitCounts, seed: u64) -> Result<Splits> {
    if counts.total() > collection.len() {
        return Err(Error::validation(format!(
            "splits need {} slices, collection has {}",
            counts.total(),
            collection.len()
        )));
    }
    let mut keys: Vec<&SliceKey> = collection.iter().map(|s| &s.key).collect();
    keys.sort();
    if keys.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::validation("collection contains a slice twice"));
    }
    collection.sort_by(|a, b| a.key.cmp(&b.key));
    collection.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut rest = collection.into_iter();
    let train = rest.by_ref().take(counts.train).collect();
    let val = rest.by_ref().take(counts.val).collect();
    let test = rest.by_ref().take(counts.test).collect();
    Ok(Splits { train, val, test })
}

/// Loads the configured source and splits it.
pub fn load_dataset(spec: &DatasetSpec) -> Result<Splits> {
    spec.validate()?;
    let collection = match &spec.source {
        DataSource::Phantom { count } => generate_phantoms(*count, spec.m, spec.n, spec.seed)?,
        #[cfg(feature = "fastmri")]
        DataSource::Fastmri { dir } => ingest_fastmri(dir, spec.m, spec.n)?,
        #[cfg(not(feature = "fastmri"))]
        DataSource::Fastmri { .. } => return Err(Error::Config("built without fastMRI support".into())),
    };
    make_splits(collection, spec.counts, spec.seed)
}

/// On-disk record of which slices went into which split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceManifest {
    pub spec: DatasetSpec,
    pub train: Vec<SliceKey>,
    pub val: Vec<SliceKey>,
    pub test: Vec<SliceKey>,
}

impl SliceManifest {
    pub fn of(spec: &DatasetSpec, splits: &Splits) -> Self {
        let keys = |s: &[Slice]| s.iter().map(|x| x.key.clone()).collect();
        Self {
            spec: spec.clone(),
            train: keys(&splits.train),
            val: keys(&splits.val),
            test: keys(&splits.test),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_model::fft2c;

    #[test]
    fn phantoms_are_seeded_and_normalized() {
        let a = generate_phantoms(5, 32, 32, 7).unwrap();
        let b = generate_phantoms(5, 32, 32, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            let mag = x.image.magnitude();
            let peak = mag.iter().copied().fold(0.0, f64::max);
            assert!((peak - 1.0).abs() < 1e-12);
            assert!(mag.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
        let c = generate_phantoms(5, 32, 32, 8).unwrap();
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn row_energy_peaks_in_central_quarter() {
        let phantoms = generate_phantoms(100, 64, 64, 3).unwrap();
        let central = phantoms
            .iter()
            .filter(|p| {
                let k = fft2c(&p.image);
                let energy: Vec<f64> = k.data().rows().into_iter().map(|r| r.iter().map(|v| v.norm_sqr()).sum()).collect();
                let peak = (0..64).max_by(|&i, &j| energy[i].total_cmp(&energy[j])).unwrap();
                (24..40).contains(&peak)
            })
            .count();
        assert!(central >= 95, "{central} of 100");
    }

    #[test]
    fn middle_slice_policy() {
        assert_eq!(middle_slices(36), 15..21);
        assert_eq!(middle_slices(6), 0..6);
        assert_eq!(middle_slices(5), 0..5);
        assert_eq!(middle_slices(7), 0..6);
    }

    #[test]
    fn splits_are_disjoint_and_reproducible() {
        let counts = SplitCounts { train: 20, val: 5, test: 5 };
        let a = make_splits(generate_phantoms(32, 16, 16, 1).unwrap(), counts, 4).unwrap();
        let b = make_splits(generate_phantoms(32, 16, 16, 1).unwrap(), counts, 4).unwrap();
        let ids = |s: &[Slice]| s.iter().map(|x| x.id()).collect::<Vec<_>>();
        assert_eq!(ids(&a.train), ids(&b.train));
        assert_eq!(ids(&a.test), ids(&b.test));
        let mut all = [ids(&a.train), ids(&a.val), ids(&a.test)].concat();
        assert_eq!(all.len(), 30);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 30);
    }

    #[test]
    fn crop_and_pad_are_centred() {
        let img = Array2::from_shape_fn((6, 4), |(i, j)| Complex64::new((i * 10 + j) as f64, 0.0));
        let c = crop_or_pad(&img, 4, 2);
        assert_eq!(c[(0, 0)].re, 11.0);
        let p = crop_or_pad(&img, 8, 6);
        assert_eq!(p[(2, 2)].re, 11.0);
        assert_eq!(p[(6, 4)].re, 53.0);
        assert_eq!(p[(0, 0)].re, 0.0);
        assert_eq!(p[(7, 5)].re, 0.0);
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            source: DataSource::Phantom { count: 12 },
            m: 16,
            n: 16,
            counts: SplitCounts { train: 6, val: 3, test: 3 },
            seed: 2,
        };
        let splits = load_dataset(&spec).unwrap();
        let manifest = SliceManifest::of(&spec, &splits);
        let path = dir.path().join("slices.json");
        manifest.save(&path).unwrap();
        assert_eq!(SliceManifest::load(&path).unwrap(), manifest);
    }
}
