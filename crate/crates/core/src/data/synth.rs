//! Seeded synthetic datasets.
//!
//! `moons` is the classic pair of interleaved half circles in 2-D.
//! `blob_images` renders square greyscale images: class 0 is a filled disk,
//! class 1 is the same disk with eight thin radial spikes.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

const FOREGROUND: f64 = 0.8;
const BACKGROUND: f64 = 0.2;
const SPIKES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    Moons,
    BlobImages,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moons" => Ok(SyntheticKind::Moons),
            "blob_images" => Ok(SyntheticKind::BlobImages),
            other => Err(Error::Config(format!(
                "unknown synthetic kind `{other}` (expected moons or blob_images)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub count_per_class: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Image side length (blob images only).
    pub side: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count_per_class < 1 {
            return Err(Error::Config("synth.count_per_class must be >= 1".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!("synth.noise must be >= 0, got {}", self.noise)));
        }
        if self.kind == SyntheticKind::BlobImages && (self.side == 0 || self.side % 4 != 0) {
            return Err(Error::Config(format!(
                "synth.side must be a positive multiple of 4, got {}",
                self.side
            )));
        }
        Ok(())
    }
}

/// Noise-free point of `class` at angle `t`.
pub fn moon_point(class: usize, t: f64) -> [f64; 2] {
    if class == 0 {
        [t.cos(), t.sin()]
    } else {
        [1.0 - t.cos(), 0.5 - t.sin()]
    }
}

/// `(2 * count, 2)` points; class 0 first, then class 1.
pub fn gen_moons(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut data = Vec::with_capacity(4 * spec.count_per_class);
    let mut labels = Vec::with_capacity(2 * spec.count_per_class);
    for class in 0..2 {
        for _ in 0..spec.count_per_class {
            let t = rng.uniform_in(0.0, std::f64::consts::PI);
            let [a, b] = moon_point(class, t);
            data.push(a + spec.noise * rng.normal());
            data.push(b + spec.noise * rng.normal());
            labels.push(class);
        }
    }
    Dataset::new(Tensor::new(&[2 * spec.count_per_class, 2], data)?, labels)
}

/// Disk placement inside a blob image, in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlobShape {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// Noise-free `side x side` rendering. Pixel `(row, col)` is sampled at its
/// centre `(col + 0.5, row + 0.5)`.
pub fn render_blob(side: usize, shape: BlobShape, spikes: bool) -> Vec<f64> {
    let mut img = vec![BACKGROUND; side * side];
    for row in 0..side {
        for col in 0..side {
            let (x, y) = (col as f64 + 0.5 - shape.cx, row as f64 + 0.5 - shape.cy);
            if x * x + y * y <= shape.radius * shape.radius {
                img[row * side + col] = FOREGROUND;
            }
        }
    }
    if spikes {
        let length = side as f64 / 8.0;
        for k in 0..SPIKES {
            let angle = k as f64 * std::f64::consts::TAU / SPIKES as f64;
            let steps = (2.0 * length).ceil() as usize;
            for s in 0..=steps {
                let t = shape.radius + length * s as f64 / steps as f64;
                let (x, y) = (shape.cx + t * angle.cos(), shape.cy + t * angle.sin());
                if x >= 0.0 && y >= 0.0 && (x as usize) < side && (y as usize) < side {
                    img[y as usize * side + x as usize] = FOREGROUND;
                }
            }
        }
    }
    img
}

/// `(2 * count, 1, side, side)` images; class 0 first, then class 1.
pub fn gen_blob_images(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.side as f64;
    let mut rng = Rng::new(spec.seed);
    let n = spec.side * spec.side;
    let mut data = Vec::with_capacity(2 * spec.count_per_class * n);
    let mut labels = Vec::with_capacity(2 * spec.count_per_class);
    for class in 0..2 {
        for _ in 0..spec.count_per_class {
            let shape = BlobShape {
                radius: rng.uniform_in(s / 8.0, s / 6.0),
                cx: s / 2.0 + rng.uniform_in(-s / 8.0, s / 8.0),
                cy: s / 2.0 + rng.uniform_in(-s / 8.0, s / 8.0),
            };
            for v in render_blob(spec.side, shape, class == 1) {
                data.push((v + spec.noise * rng.normal()).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    let dims = [2 * spec.count_per_class, 1, spec.side, spec.side];
    Dataset::new(Tensor::new(&dims, data)?, labels)
}

/// Writes `x,y,label` rows.
pub fn write_points(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let path = path.as_ref();
    if data.samples.rank() != 2 || data.samples.dims()[1] != 2 {
        return Err(Error::Shape(format!(
            "point table needs (N, 2) samples, got {:?}",
            data.samples.dims()
        )));
    }
    let mut text = String::new();
    for (row, label) in data.samples.data().chunks(2).zip(&data.labels) {
        writeln!(text, "{},{},{}", row[0], row[1], label).unwrap();
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_points(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = || Error::parse(path, format!("line {}: expected `x,y,label`", n + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [x, y, label] = fields[..] else { return Err(err()) };
        data.push(x.parse::<f64>().map_err(|_| err())?);
        data.push(y.parse::<f64>().map_err(|_| err())?);
        labels.push(label.parse::<usize>().map_err(|_| err())?);
    }
    if labels.is_empty() {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    Dataset::new(Tensor::new(&[labels.len(), 2], data)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: SyntheticKind, count: usize, noise: f64) -> SyntheticSpec {
        SyntheticSpec {
            kind,
            count_per_class: count,
            noise,
            side: 32,
            seed: 4,
        }
    }

    #[test]
    fn moon_endpoints() {
        assert_eq!(moon_point(0, 0.0), [1.0, 0.0]);
        assert_eq!(moon_point(1, 0.0), [0.0, 0.5]);
    }

    #[test]
    fn moons_counts_and_determinism() {
        let s = spec(SyntheticKind::Moons, 50, 0.1);
        let a = gen_moons(&s).unwrap();
        assert_eq!(a.samples.dims(), &[100, 2]);
        assert_eq!(a.labels.iter().filter(|&&l| l == 1).count(), 50);
        assert_eq!(a, gen_moons(&s).unwrap());
        let noiseless = gen_moons(&spec(SyntheticKind::Moons, 20, 0.0)).unwrap();
        for (row, &l) in noiseless.samples.data().chunks(2).zip(&noiseless.labels) {
            // class 0 lies on the unit circle, class 1 on the circle about (1, 0.5)
            let c = if l == 0 { [0.0, 0.0] } else { [1.0, 0.5] };
            let r = ((row[0] - c[0]).powi(2) + (row[1] - c[1]).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn blob_images_in_range_and_deterministic() {
        let s = spec(SyntheticKind::BlobImages, 6, 0.3);
        let a = gen_blob_images(&s).unwrap();
        assert_eq!(a.samples.dims(), &[12, 1, 32, 32]);
        assert!(a.samples.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, gen_blob_images(&s).unwrap());
        assert_eq!(a.labels, [vec![0; 6], vec![1; 6]].concat());
    }

    #[test]
    fn spikes_only_add_foreground() {
        let shape = BlobShape {
            cx: 15.3,
            cy: 17.1,
            radius: 4.6,
        };
        let plain = render_blob(32, shape, false);
        let spiky = render_blob(32, shape, true);
        let mut changed = 0;
        for (p, s) in plain.iter().zip(&spiky) {
            if p != s {
                assert_eq!((*p, *s), (BACKGROUND, FOREGROUND));
                changed += 1;
            }
        }
        assert!(changed >= SPIKES * 2, "only {changed} spike pixels");
    }

    #[test]
    fn noiseless_class_one_is_disk_plus_spikes() {
        let s = spec(SyntheticKind::BlobImages, 3, 0.0);
        let data = gen_blob_images(&s).unwrap();
        for i in 3..6 {
            let img = data.samples.item(i);
            // every pixel is either background or foreground
            assert!(img.iter().all(|&v| v == BACKGROUND || v == FOREGROUND));
        }
    }

    #[test]
    fn side_must_divide_by_four() {
        let mut s = spec(SyntheticKind::BlobImages, 1, 0.0);
        s.side = 30;
        assert!(gen_blob_images(&s).is_err());
    }

    #[test]
    fn points_roundtrip() {
        let d = gen_moons(&spec(SyntheticKind::Moons, 10, 0.1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("points.csv");
        write_points(&p, &d).unwrap();
        assert_eq!(read_points(&p).unwrap(), d);
    }
}
