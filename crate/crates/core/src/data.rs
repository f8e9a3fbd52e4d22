//! Procedural labeled shapes, augmentation, minibatching and the `SGSH` file format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Rng, RngState};
use crate::tensor::{Scalar, Tensor};

/// Pattern list; the first `classes` entries are used.
pub const PATTERNS: [&str; 10] = [
    "filled-disk",
    "hollow-square",
    "horizontal-stripes",
    "diagonal-cross",
    "vertical-stripes",
    "ring",
    "plus",
    "checkerboard",
    "filled-triangle",
    "filled-square",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesSpec {
    pub classes: usize,
    pub size: usize,
    pub channels: usize,
    /// Maximum absolute shift of the pattern center in pixels.
    pub jitter_px: i64,
    /// Maximum absolute hue shift in degrees around the class hue.
    pub hue_jitter_deg: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub train_size: usize,
    pub held_out_size: usize,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            size: 16,
            channels: 3,
            jitter_px: 2,
            hue_jitter_deg: 20.0,
            noise_sigma: 0.05,
            seed: 0,
            train_size: 10_000,
            held_out_size: 2_000,
        }
    }
}

impl ShapesSpec {
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "shapes4" => Ok(Self::default()),
            "shapes10" => Ok(Self { classes: 10, ..Self::default() }),
            other => Err(Error::Config(format!("unknown builtin dataset `{other}` (shapes4, shapes10)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > PATTERNS.len() {
            return Err(Error::Config(format!(
                "class count {} outside 2..={} available patterns",
                self.classes,
                PATTERNS.len()
            )));
        }
        if self.channels != 3 || self.size < 8 || !self.size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "images must be RGB with a size divisible by 4 and ≥ 8, got {}×{}×{}",
                self.size, self.size, self.channels
            )));
        }
        if self.jitter_px < 0 || self.noise_sigma < 0.0 || self.hue_jitter_deg < 0.0 {
            return Err(Error::Config("jitter and noise ranges must be non-negative".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.size * self.size * self.channels
    }
}

/// Images in `[-1, 1]`, NHWC, with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = self.images.select_rows(idx)?.cast();
        Ok((x, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Split,
    pub held_out: Split,
}

fn inside(pattern: usize, dx: i64, dy: i64, r: i64) -> bool {
    // dx, dy are offsets from the center in half-pixels; r is the half-extent in half-pixels
    let (ax, ay) = (dx.abs(), dy.abs());
    match pattern {
        0 => dx * dx + dy * dy <= r * r,
        1 => ax.max(ay) <= r && ax.max(ay) >= r - 4,
        2 => ax <= r && ay <= r && (dy + 64).div_euclid(6) % 2 == 0,
        3 => ax <= r && ay <= r && (dx - dy).abs() <= 3 || ax <= r && ay <= r && (dx + dy).abs() <= 3,
        4 => ax <= r && ay <= r && (dx + 64).div_euclid(6) % 2 == 0,
        5 => {
            let d = dx * dx + dy * dy;
            d <= r * r && d >= (r - 4) * (r - 4)
        }
        6 => (ax <= 3 && ay <= r) || (ay <= 3 && ax <= r),
        7 => ax <= r && ay <= r && ((dx + 64).div_euclid(6) + (dy + 64).div_euclid(6)) % 2 == 0,
        8 => dy <= r && dy >= -r && 2 * ax <= dy + r,
        _ => ax <= r - 2 && ay <= r - 2,
    }
}

fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Approximately standard normal from twelve uniforms (arithmetic only, so
/// the dataset is reproducible bit-for-bit on any IEEE platform).
fn approx_normal(rng: &mut Rng) -> f64 {
    (0..12).map(|_| rng.uniform()).sum::<f64>() - 6.0
}

/// Sample `index` of the stream: a pure function of `(spec.seed, index)`.
/// Labels cycle through the classes so every prefix of length k·C is balanced.
pub fn render_sample(spec: &ShapesSpec, index: usize) -> (Vec<f32>, usize) {
    let label = index % spec.classes;
    let mut rng = Rng::new(spec.seed, &format!("data/{index}"));
    let j = spec.jitter_px;
    let cx = rng.range_inclusive(-j, j);
    let cy = rng.range_inclusive(-j, j);
    let hue = 360.0 * label as f64 / spec.classes as f64 + (rng.uniform() * 2.0 - 1.0) * spec.hue_jitter_deg;
    let fg = hsv_to_rgb(hue, 0.85, 0.95);
    let s = spec.size as i64;
    // pattern half-extent: 5/16 of the image, in half-pixels
    let r = s * 5 / 8;
    let mut px = Vec::with_capacity(spec.pixels());
    for y in 0..s {
        for x in 0..s {
            // half-pixel coordinates relative to the (jittered) image center
            let dx = 2 * x + 1 - s - 2 * cx;
            let dy = 2 * y + 1 - s - 2 * cy;
            let on = inside(label, dx, dy, r);
            for c in fg {
                let base = if on { c * 2.0 - 1.0 } else { -0.85 };
                let v = base + spec.noise_sigma * approx_normal(&mut rng);
                px.push(v.clamp(-1.0, 1.0) as f32);
            }
        }
    }
    (px, label)
}

fn render_range(spec: &ShapesSpec, start: usize, n: usize) -> Result<Split> {
    let mut data = Vec::with_capacity(n * spec.pixels());
    let mut labels = Vec::with_capacity(n);
    for i in start..start + n {
        let (px, l) = render_sample(spec, i);
        data.extend(px);
        labels.push(l);
    }
    Ok(Split {
        images: Tensor::new(&[n, spec.size, spec.size, spec.channels], data)?,
        labels,
    })
}

/// Training samples use indices `0..train_size`, held-out samples the next `held_out_size`.
pub fn generate_dataset(spec: &ShapesSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        classes: spec.classes,
        train: render_range(spec, 0, spec.train_size)?,
        held_out: render_range(spec, spec.train_size, spec.held_out_size)?,
    })
}

fn reflect(i: i64, n: i64) -> usize {
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Horizontal flip then a `(dx, dy)` shift with reflect padding.
pub fn apply_augment<T: Scalar>(img: &[T], size: usize, channels: usize, flip: bool, dx: i64, dy: i64) -> Vec<T> {
    let n = size as i64;
    let mut out = Vec::with_capacity(img.len());
    for y in 0..n {
        let sy = reflect(y - dy, n);
        for x in 0..n {
            let mut sx = reflect(x - dx, n);
            if flip {
                sx = size - 1 - sx;
            }
            let o = (sy * size + sx) * channels;
            out.extend_from_slice(&img[o..o + channels]);
        }
    }
    out
}

/// Random flip (p = 0.5) and translation of up to 2 px for every image of a batch.
pub fn augment<T: Scalar>(images: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != s[2] {
        return Err(crate::error::shape_err("augment", format!("expected square NHWC images, got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    let mut out = Vec::with_capacity(images.len());
    for img in images.data().chunks(per) {
        let flip = rng.uniform() < 0.5;
        let dx = rng.range_inclusive(-2, 2);
        let dy = rng.range_inclusive(-2, 2);
        out.extend(apply_augment(img, s[1], s[3], flip, dx, dy));
    }
    Tensor::new(s, out)
}

/// Serializable position of a [`Minibatches`] iterator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinibatchState {
    pub rng: RngState,
    pub order: Vec<u32>,
    pub position: usize,
    pub epoch: u64,
}

/// Endless shuffled index batches; each epoch visits every index once and
/// drops the short tail.
#[derive(Clone, Debug)]
pub struct Minibatches {
    n: usize,
    batch: usize,
    rng: Rng,
    order: Vec<usize>,
    position: usize,
    epoch: u64,
}

impl Minibatches {
    pub fn new(n: usize, batch: usize, rng: Rng) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(Error::InvalidArgument(format!("batch size {batch} must be in 1..={n}")));
        }
        let mut it = Self { n, batch, rng, order: (0..n).collect(), position: 0, epoch: 0 };
        it.rng.shuffle(&mut it.order);
        Ok(it)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.position + self.batch > self.n {
            self.order = (0..self.n).collect();
            self.rng.shuffle(&mut self.order);
            self.position = 0;
            self.epoch += 1;
        }
        let b = self.order[self.position..self.position + self.batch].to_vec();
        self.position += self.batch;
        b
    }

    pub fn state(&self) -> MinibatchState {
        MinibatchState {
            rng: self.rng.state(),
            order: self.order.iter().map(|&i| i as u32).collect(),
            position: self.position,
            epoch: self.epoch,
        }
    }

    pub fn from_state(n: usize, batch: usize, st: &MinibatchState) -> Result<Self> {
        if st.order.len() != n || st.position > n || batch == 0 || batch > n {
            return Err(Error::Checkpoint("minibatch state does not match the dataset".into()));
        }
        Ok(Self {
            n,
            batch,
            rng: Rng::from_state(&st.rng)?,
            order: st.order.iter().map(|&i| i as usize).collect(),
            position: st.position,
            epoch: st.epoch,
        })
    }
}

impl Iterator for Minibatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

const MAGIC: &[u8; 4] = b"SGSH";
const VERSION: u16 = 1;

/// Writes `SGSH` v1: magic, u16 version, u32 (C, H, W, channels, n), u8 labels, f32 pixels.
pub fn write_sgsh(w: &mut impl Write, classes: usize, split: &Split) -> Result<()> {
    let s = split.images.shape();
    if s.len() != 4 || s[0] != split.labels.len() {
        return Err(Error::Format("images must be NHWC with one label each".into()));
    }
    if classes > 256 || split.labels.iter().any(|&l| l >= classes) {
        return Err(Error::Format("labels must fit in u8 and be below the class count".into()));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [classes, s[1], s[2], s[3], s[0]] {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("header value {v} exceeds u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&split.labels.iter().map(|&l| l as u8).collect::<Vec<_>>())?;
    w.write_all(&split.images.to_le_bytes())?;
    Ok(())
}

/// Reads an `SGSH` file, returning the class count and the samples.
pub fn read_sgsh(r: &mut impl Read) -> Result<(usize, Split)> {
    let mut bytes = vec![];
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 26 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an SGSH file (bad magic or short header)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SGSH version {version}")));
    }
    let h: Vec<usize> = (0..5)
        .map(|i| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let (classes, hh, ww, ch, n) = (h[0], h[1], h[2], h[3], h[4]);
    let body = &bytes[26..];
    let need = n + n * hh * ww * ch * 4;
    if body.len() != need {
        return Err(Error::Format(format!("SGSH body has {} bytes, header implies {need}", body.len())));
    }
    let labels: Vec<usize> = body[..n].iter().map(|&b| b as usize).collect();
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Format(format!("label {l} ≥ class count {classes}")));
    }
    let images = Tensor::from_le_bytes(&[n, hh, ww, ch], &body[n..])?;
    if !images.data().iter().all(|v| (-1.0..=1.0).contains(v)) {
        return Err(Error::Format("pixels must lie in [-1, 1]".into()));
    }
    Ok((classes, Split { images, labels }))
}

pub fn save_sgsh(path: &Path, classes: usize, split: &Split) -> Result<()> {
    let mut buf = vec![];
    write_sgsh(&mut buf, classes, split)?;
    crate::io::write_atomic(path, &buf)
}

pub fn load_sgsh(path: &Path) -> Result<(usize, Split)> {
    let mut f = std::fs::File::open(path)?;
    read_sgsh(&mut f)
}

/// A file dataset keeps every sixth sample (index ≡ 5 mod 6) as held-out.
pub fn dataset_from_split(classes: usize, all: &Split) -> Result<Dataset> {
    let (held, train): (Vec<usize>, Vec<usize>) = (0..all.len()).partition(|i| i % 6 == 5);
    let pick = |idx: &[usize]| -> Result<Split> {
        Ok(Split {
            images: all.images.select_rows(idx)?,
            labels: idx.iter().map(|&i| all.labels[i]).collect(),
        })
    };
    Ok(Dataset { classes, train: pick(&train)?, held_out: pick(&held)? })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ShapesSpec {
        ShapesSpec { train_size: 40, held_out_size: 8, ..Default::default() }
    }

    #[test]
    fn samples_are_pure_functions_of_index() {
        let s = small();
        assert_eq!(render_sample(&s, 17), render_sample(&s, 17));
        assert_ne!(render_sample(&s, 17).0, render_sample(&s, 21).0);
        let other = ShapesSpec { seed: 1, ..small() };
        assert_ne!(render_sample(&s, 17).0, render_sample(&other, 17).0);
    }

    #[test]
    fn balanced_and_in_range() {
        let d = generate_dataset(&small()).unwrap();
        let mut hist = [0usize; 4];
        d.train.labels.iter().for_each(|&l| hist[l] += 1);
        assert_eq!(hist, [10; 4]);
        assert!(d.train.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(d.held_out.images.shape(), &[8, 16, 16, 3]);
        assert!(generate_dataset(&ShapesSpec { classes: 11, ..small() }).is_err());
    }

    #[test]
    fn augment_identity_and_symmetry() {
        let (img, _) = render_sample(&ShapesSpec { jitter_px: 0, noise_sigma: 0.0, ..small() }, 0);
        assert_eq!(apply_augment(&img, 16, 3, false, 0, 0), img);
        // a centered disk without noise is mirror symmetric
        assert_eq!(apply_augment(&img, 16, 3, true, 0, 0), img);
        let shifted = apply_augment(&img, 16, 3, false, 2, -1);
        assert!(shifted.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn minibatches_cover_epoch() {
        let mut it = Minibatches::new(10, 3, Rng::new(0, "mb")).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| it.next_batch()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(it.epoch(), 0);
        it.next_batch();
        assert_eq!(it.epoch(), 1);
        assert!(Minibatches::new(3, 4, Rng::new(0, "mb")).is_err());
    }

    #[test]
    fn minibatch_state_round_trip() {
        let mut a = Minibatches::new(50, 8, Rng::new(3, "mb")).unwrap();
        for _ in 0..9 {
            a.next_batch();
        }
        let mut b = Minibatches::from_state(50, 8, &a.state()).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn sgsh_round_trip_and_errors() {
        let d = generate_dataset(&small()).unwrap();
        let mut buf = vec![];
        write_sgsh(&mut buf, 4, &d.train).unwrap();
        assert_eq!(&buf[..4], b"SGSH");
        let (c, back) = read_sgsh(&mut buf.as_slice()).unwrap();
        assert_eq!(c, 4);
        assert_eq!(back, d.train);
        let mut short = buf.clone();
        short.pop();
        assert!(read_sgsh(&mut short.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_sgsh(&mut bad.as_slice()).is_err());
    }
}
