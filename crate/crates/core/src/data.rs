//! Desk-scale data: synthetic 2-D generators, IDX image files, the
//! flip/translate augmentation pipeline, and per-channel normalization.

use crate::rngutil;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
pub const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("idx: bad magic {0:#010x} in {1}")]
    BadMagic(u32, String),
    #[error("idx: truncated payload in {0}")]
    Truncated(String),
    #[error("idx: image count {images} != label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("normalize: channel {0} has zero standard deviation")]
    ZeroStd(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStat {
    pub mean: f64,
    pub std: f64,
}

/// Immutable dataset: flat row-major inputs plus hard labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub inputs: Vec<f64>,
    /// Shape of one example, e.g. [2] or [1,8,8].
    pub example_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub declared_range: Option<(f64, f64)>,
    pub channel_stats: Option<Vec<ChannelStat>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn example_len(&self) -> usize {
        self.example_shape.iter().product()
    }

    /// Gather rows by index into a batch buffer plus its shape.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let el = self.example_len();
        let mut out = Vec::with_capacity(indices.len() * el);
        for &i in indices {
            out.extend_from_slice(&self.inputs[i * el..(i + 1) * el]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.example_shape);
        (out, shape)
    }

    pub fn is_image(&self) -> bool {
        self.example_shape.len() == 3
    }

    /// FNV-1a over the raw bit patterns; used for determinism checks.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for v in &self.inputs {
            eat(&v.to_le_bytes());
        }
        for &l in &self.labels {
            eat(&(l as u64).to_le_bytes());
        }
        h
    }
}

// ---------------------------------------------------------------------------
// Synthetic 2-D generators. Balanced classes, unbounded plane.
// ---------------------------------------------------------------------------

pub fn gen_two_moons(n: usize, noise_sigma: f64, seed: u64) -> Dataset {
    let mut rng = rngutil::stream(seed, "two-moons");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let half = n / 2;
    let mut inputs = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = if i < half { 0 } else { 1 };
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (mut x, mut y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x += noise_sigma * normal.sample(&mut rng);
        y += noise_sigma * normal.sample(&mut rng);
        inputs.extend_from_slice(&[x, y]);
        labels.push(class);
    }
    Dataset {
        inputs,
        example_shape: vec![2],
        labels,
        class_count: 2,
        declared_range: None,
        channel_stats: None,
    }
}

/// Two moons with per-class sample counts and noise levels. With a
/// wide noisy majority class and a tight rare one, plain training
/// parks its boundary next to the tight arc while robust training
/// keeps it a margin away — a useful regime for robustness contrasts.
pub fn gen_two_moons_skewed(
    n0: usize,
    n1: usize,
    sigma0: f64,
    sigma1: f64,
    seed: u64,
) -> Dataset {
    let mut rng = rngutil::stream(seed, "two-moons-skewed");
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = n0 + n1;
    let mut inputs = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = if i < n0 { 0 } else { 1 };
        let sigma = if class == 0 { sigma0 } else { sigma1 };
        let t = std::f64::consts::PI * rng.random::<f64>();
        let (mut x, mut y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        x += sigma * normal.sample(&mut rng);
        y += sigma * normal.sample(&mut rng);
        inputs.extend_from_slice(&[x, y]);
        labels.push(class);
    }
    Dataset {
        inputs,
        example_shape: vec![2],
        labels,
        class_count: 2,
        declared_range: None,
        channel_stats: None,
    }
}

pub fn gen_gaussian_blobs(k: usize, n: usize, spacing: f64, sigma: f64, seed: u64) -> Dataset {
    let mut rng = rngutil::stream(seed, "blobs");
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut inputs = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let angle = 2.0 * std::f64::consts::PI * class as f64 / k as f64;
        let cx = spacing * angle.cos();
        let cy = spacing * angle.sin();
        inputs.push(cx + normal.sample(&mut rng));
        inputs.push(cy + normal.sample(&mut rng));
        labels.push(class);
    }
    Dataset {
        inputs,
        example_shape: vec![2],
        labels,
        class_count: k,
        declared_range: None,
        channel_stats: None,
    }
}

pub fn gen_rings(n: usize, radii: &[f64], sigma: f64, seed: u64) -> Dataset {
    let mut rng = rngutil::stream(seed, "rings");
    let normal = Normal::new(0.0, sigma).unwrap();
    let k = radii.len();
    let mut inputs = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        let angle = 2.0 * std::f64::consts::PI * rng.random::<f64>();
        let r = radii[class];
        inputs.push(r * angle.cos() + normal.sample(&mut rng));
        inputs.push(r * angle.sin() + normal.sample(&mut rng));
        labels.push(class);
    }
    Dataset {
        inputs,
        example_shape: vec![2],
        labels,
        class_count: k,
        declared_range: None,
        channel_stats: None,
    }
}

// ---------------------------------------------------------------------------
// IDX binary format (big-endian): u8 rank-3 images / u8 labels.
// ---------------------------------------------------------------------------

fn read_u32_be(r: &mut impl Read, what: &str) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| DataError::Truncated(what.to_string()))?;
    Ok(u32::from_be_bytes(b))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let mut imf = std::fs::File::open(images_path)?;
    let magic = read_u32_be(&mut imf, "images header")?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(DataError::BadMagic(magic, images_path.display().to_string()));
    }
    let count = read_u32_be(&mut imf, "images header")? as usize;
    let h = read_u32_be(&mut imf, "images header")? as usize;
    let w = read_u32_be(&mut imf, "images header")? as usize;
    let mut pixels = vec![0u8; count * h * w];
    imf.read_exact(&mut pixels)
        .map_err(|_| DataError::Truncated(images_path.display().to_string()))?;

    let mut lbf = std::fs::File::open(labels_path)?;
    let magic = read_u32_be(&mut lbf, "labels header")?;
    if magic != IDX_MAGIC_LABELS {
        return Err(DataError::BadMagic(magic, labels_path.display().to_string()));
    }
    let lcount = read_u32_be(&mut lbf, "labels header")? as usize;
    if lcount != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: lcount,
        });
    }
    let mut labels_u8 = vec![0u8; lcount];
    lbf.read_exact(&mut labels_u8)
        .map_err(|_| DataError::Truncated(labels_path.display().to_string()))?;

    let inputs: Vec<f64> = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels_u8.iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Ok(Dataset {
        inputs,
        example_shape: vec![1, h, w],
        labels,
        class_count,
        declared_range: Some((0.0, 1.0)),
        channel_stats: None,
    })
}

/// Write a [1,h,w]-shaped dataset as an IDX image/label pair. Pixel
/// values are rounded to u8 on a [0,1] scale.
pub fn save_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
    assert_eq!(ds.example_shape.len(), 3, "save_idx expects image data");
    let (h, w) = (ds.example_shape[1], ds.example_shape[2]);
    let mut imf = std::fs::File::create(images_path)?;
    imf.write_all(&IDX_MAGIC_IMAGES.to_be_bytes())?;
    imf.write_all(&(ds.len() as u32).to_be_bytes())?;
    imf.write_all(&(h as u32).to_be_bytes())?;
    imf.write_all(&(w as u32).to_be_bytes())?;
    let bytes: Vec<u8> = ds
        .inputs
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    imf.write_all(&bytes)?;

    let mut lbf = std::fs::File::create(labels_path)?;
    lbf.write_all(&IDX_MAGIC_LABELS.to_be_bytes())?;
    lbf.write_all(&(ds.len() as u32).to_be_bytes())?;
    let lbytes: Vec<u8> = ds.labels.iter().map(|&l| l as u8).collect();
    lbf.write_all(&lbytes)?;
    Ok(())
}

/// CSV export for synthetic datasets: header x0,..,xd,label.
pub fn to_csv(ds: &Dataset, w: &mut impl Write) -> Result<(), DataError> {
    let d = ds.example_len();
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    writeln!(w, "{},label", header.join(","))?;
    for i in 0..ds.len() {
        let row: Vec<String> = ds.inputs[i * d..(i + 1) * d]
            .iter()
            .map(|v| format!("{v}"))
            .collect();
        writeln!(w, "{},{}", row.join(","), ds.labels[i])?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic 8x8 digit glyphs (desk-scale IDX image source).
// ---------------------------------------------------------------------------

const DIGIT_GLYPHS: [[&str; 8]; 10] = [
    ["..####..", ".#....#.", ".#...##.", ".#..#.#.", ".#.#..#.", ".##...#.", ".#....#.", "..####.."],
    ["...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "...##...", ".######."],
    ["..####..", ".#....#.", "......#.", ".....#..", "....#...", "...#....", "..#.....", ".######."],
    ["..####..", ".#....#.", "......#.", "...###..", "......#.", "......#.", ".#....#.", "..####.."],
    ["....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..", ".....#.."],
    [".######.", ".#......", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####.."],
    ["..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    [".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....", "...#...."],
    ["..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", ".#....#.", "..####.."],
    ["..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", "......#.", "..####.."],
];

/// Noisy renders of fixed 8x8 digit glyphs; labels 0..classes.
pub fn gen_digits8x8(n: usize, classes: usize, noise_sigma: f64, seed: u64) -> Dataset {
    assert!(classes >= 2 && classes <= 10);
    let mut rng = rngutil::stream(seed, "digits8x8");
    let normal = Normal::new(0.0, noise_sigma).unwrap();
    let mut inputs = Vec::with_capacity(n * 64);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        for row in &DIGIT_GLYPHS[class] {
            for ch in row.bytes() {
                let base = if ch == b'#' { 0.85 } else { 0.1 };
                let v: f64 = base + normal.sample(&mut rng);
                inputs.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(class);
    }
    Dataset {
        inputs,
        example_shape: vec![1, 8, 8],
        labels,
        class_count: classes,
        declared_range: Some((0.0, 1.0)),
        channel_stats: None,
    }
}

// ---------------------------------------------------------------------------
// Augmentation: random horizontal flip + zero-padded translation.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub max_shift: usize,
}

impl AugmentPolicy {
    /// Paper-scaled default: flip p=0.5, shift ceil(4*side/32).
    pub fn for_side(side: usize) -> Self {
        AugmentPolicy {
            flip_prob: 0.5,
            max_shift: (4 * side).div_ceil(32),
        }
    }
}

/// In-place flip/translate on a batch shaped [m,c,h,w]. Labels untouched.
pub fn augment(batch: &mut [f64], shape: &[usize], rng: &mut impl Rng, policy: &AugmentPolicy) {
    assert_eq!(shape.len(), 4, "augment expects [m,c,h,w]");
    let (m, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let s = policy.max_shift as i64;
    for ex in 0..m {
        let flip = rng.random::<f64>() < policy.flip_prob;
        let dy = if s > 0 { rng.random_range(-s..=s) as isize } else { 0 };
        let dx = if s > 0 { rng.random_range(-s..=s) as isize } else { 0 };
        if !flip && dy == 0 && dx == 0 {
            continue;
        }
        for ch in 0..c {
            let base = (ex * c + ch) * h * w;
            let src: Vec<f64> = batch[base..base + h * w].to_vec();
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize - dy;
                    let sx0 = x as isize - dx;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    batch[base + y * w + x] =
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                            src[sy as usize * w + sx as usize]
                        } else {
                            0.0
                        };
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Normalization. Stats come from the training split only; the attack
// bound epsilon is specified in raw input units and converted by eps/std.
// ---------------------------------------------------------------------------

pub fn compute_channel_stats(ds: &Dataset) -> Result<Vec<ChannelStat>, DataError> {
    assert!(ds.is_image(), "channel stats are for image data");
    let (c, hw) = (ds.example_shape[0], ds.example_shape[1] * ds.example_shape[2]);
    let per_chan = ds.len() * hw;
    let mut stats = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for ex in 0..ds.len() {
            let base = (ex * c + ch) * hw;
            for &v in &ds.inputs[base..base + hw] {
                sum += v;
                sumsq += v * v;
            }
        }
        let mean = sum / per_chan as f64;
        let var = (sumsq / per_chan as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        if std == 0.0 {
            return Err(DataError::ZeroStd(ch));
        }
        stats.push(ChannelStat { mean, std });
    }
    Ok(stats)
}

/// Per-channel (x - mean) / std, in place, on a [m,c,h,w] batch.
pub fn normalize_batch(batch: &mut [f64], shape: &[usize], stats: &[ChannelStat]) {
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    for (i, v) in batch.iter_mut().enumerate() {
        let ch = (i / hw) % c;
        *v = (*v - stats[ch].mean) / stats[ch].std;
    }
}

/// Raw-unit epsilon converted to normalized space, per channel.
pub fn convert_eps(eps: f64, stats: &[ChannelStat]) -> Vec<f64> {
    stats.iter().map(|s| eps / s.std).collect()
}

/// Declared raw range mapped to normalized space, per channel.
pub fn convert_range(range: (f64, f64), stats: &[ChannelStat]) -> Vec<(f64, f64)> {
    stats
        .iter()
        .map(|s| ((range.0 - s.mean) / s.std, (range.1 - s.mean) / s.std))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_moons_noiseless_points_on_arcs() {
        let ds = gen_two_moons(100, 0.0, 7);
        for i in 0..ds.len() {
            let (x, y) = (ds.inputs[i * 2], ds.inputs[i * 2 + 1]);
            let r = if ds.labels[i] == 0 {
                (x * x + y * y).sqrt()
            } else {
                ((x - 1.0).powi(2) + (y - 0.5).powi(2)).sqrt()
            };
            assert!((r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_hash() {
        assert_eq!(
            gen_two_moons(50, 0.1, 3).content_hash(),
            gen_two_moons(50, 0.1, 3).content_hash()
        );
        assert_ne!(
            gen_two_moons(50, 0.1, 3).content_hash(),
            gen_two_moons(50, 0.1, 4).content_hash()
        );
    }

    #[test]
    fn skewed_moons_counts_and_determinism() {
        let ds = gen_two_moons_skewed(40, 10, 0.25, 0.01, 5);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 40);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 1).count(), 10);
        assert_eq!(
            ds.content_hash(),
            gen_two_moons_skewed(40, 10, 0.25, 0.01, 5).content_hash()
        );
        // Tight class hugs its arc.
        for i in 40..50 {
            let (x, y) = (ds.inputs[i * 2], ds.inputs[i * 2 + 1]);
            let r = ((x - 1.0).powi(2) + (y - 0.5).powi(2)).sqrt();
            assert!((r - 1.0).abs() < 0.1);
        }
    }

    #[test]
    fn blobs_are_balanced_and_separable_centers() {
        let ds = gen_gaussian_blobs(3, 90, 10.0, 1.0, 5);
        let mut counts = [0usize; 3];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, [30, 30, 30]);
    }

    #[test]
    fn rings_radii() {
        let ds = gen_rings(60, &[1.0, 2.0], 0.0, 9);
        for i in 0..ds.len() {
            let (x, y) = (ds.inputs[i * 2], ds.inputs[i * 2 + 1]);
            let r = (x * x + y * y).sqrt();
            let expect = if ds.labels[i] == 0 { 1.0 } else { 2.0 };
            assert!((r - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn idx_roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_digits8x8(20, 4, 0.15, 2);
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        save_idx(&ds, &img, &lbl).unwrap();
        let loaded = load_idx(&img, &lbl).unwrap();
        // Quantize the original the same way the writer does.
        let quant: Vec<f64> = ds
            .inputs
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0)
            .collect();
        assert_eq!(loaded.inputs, quant);
        assert_eq!(loaded.labels, ds.labels);
        // And a second round-trip is exactly stable.
        let img2 = dir.path().join("img2.idx");
        let lbl2 = dir.path().join("lbl2.idx");
        save_idx(&loaded, &img2, &lbl2).unwrap();
        let again = load_idx(&img2, &lbl2).unwrap();
        assert_eq!(again.inputs, loaded.inputs);
    }

    #[test]
    fn idx_empty_labels_ok_and_count_mismatch_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        let empty = Dataset {
            inputs: vec![],
            example_shape: vec![1, 4, 4],
            labels: vec![],
            class_count: 2,
            declared_range: Some((0.0, 1.0)),
            channel_stats: None,
        };
        save_idx(&empty, &img, &lbl).unwrap();
        let loaded = load_idx(&img, &lbl).unwrap();
        assert!(loaded.is_empty());

        let ds = gen_digits8x8(6, 3, 0.1, 1);
        save_idx(&ds, &img, &lbl).unwrap();
        let short = Dataset {
            labels: ds.labels[..4].to_vec(),
            inputs: ds.inputs[..4 * 64].to_vec(),
            ..ds.clone()
        };
        let lbl_short = dir.path().join("lbl_short.idx");
        save_idx(&short, &dir.path().join("img_short.idx"), &lbl_short).unwrap();
        let err = load_idx(&img, &lbl_short).unwrap_err();
        assert!(matches!(err, DataError::CountMismatch { images: 6, labels: 4 }));
    }

    #[test]
    fn idx_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        let ds = gen_digits8x8(4, 2, 0.0, 0);
        save_idx(&ds, &img, &lbl).unwrap();
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&img, &bytes).unwrap();
        assert!(matches!(load_idx(&img, &lbl), Err(DataError::BadMagic(_, _))));
    }

    #[test]
    fn pixel_255_scales_to_one() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            inputs: vec![1.0; 16],
            example_shape: vec![1, 4, 4],
            labels: vec![0],
            class_count: 2,
            declared_range: Some((0.0, 1.0)),
            channel_stats: None,
        };
        let img = dir.path().join("i.idx");
        let lbl = dir.path().join("l.idx");
        save_idx(&ds, &img, &lbl).unwrap();
        let loaded = load_idx(&img, &lbl).unwrap();
        assert!(loaded.inputs.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn augment_identity_and_double_flip() {
        let shape = [2usize, 1, 4, 4];
        let orig: Vec<f64> = (0..32).map(|i| i as f64).collect();
        // No-op policy leaves the batch untouched.
        let mut batch = orig.clone();
        let mut rng = rngutil::stream(0, "aug");
        augment(
            &mut batch,
            &shape,
            &mut rng,
            &AugmentPolicy { flip_prob: 0.0, max_shift: 0 },
        );
        assert_eq!(batch, orig);
        // Flipping twice is the identity.
        let mut batch = orig.clone();
        let always = AugmentPolicy { flip_prob: 1.1, max_shift: 0 };
        augment(&mut batch, &shape, &mut rngutil::stream(0, "a"), &always);
        augment(&mut batch, &shape, &mut rngutil::stream(1, "b"), &always);
        assert_eq!(batch, orig);
    }

    #[test]
    fn augment_shift_scales_with_side() {
        assert_eq!(AugmentPolicy::for_side(32).max_shift, 4);
        assert_eq!(AugmentPolicy::for_side(8).max_shift, 1);
    }

    #[test]
    fn normalize_stats_and_guard() {
        let ds = gen_digits8x8(50, 5, 0.2, 3);
        let stats = compute_channel_stats(&ds).unwrap();
        let (mut batch, shape) = ds.gather(&(0..ds.len()).collect::<Vec<_>>());
        normalize_batch(&mut batch, &shape, &stats);
        let n = batch.len() as f64;
        let mean: f64 = batch.iter().sum::<f64>() / n;
        let var: f64 = batch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-9);

        let flat = Dataset {
            inputs: vec![0.0; 32],
            example_shape: vec![1, 4, 4],
            labels: vec![0, 1],
            class_count: 2,
            declared_range: Some((0.0, 1.0)),
            channel_stats: None,
        };
        assert!(matches!(compute_channel_stats(&flat), Err(DataError::ZeroStd(0))));
    }

    #[test]
    fn eps_conversion_arithmetic() {
        let stats = vec![ChannelStat { mean: 0.5, std: 0.25 }];
        let eps = convert_eps(8.0 / 255.0, &stats);
        assert!((eps[0] - (8.0 / 255.0) / 0.25).abs() < 1e-15);
        assert!((eps[0] - 0.12549019607843137).abs() < 1e-12);
    }

    #[test]
    fn csv_export_header() {
        let ds = gen_two_moons(4, 0.0, 1);
        let mut buf = Vec::new();
        to_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x0,x1,label\n"));
        assert_eq!(text.lines().count(), 5);
    }
}
