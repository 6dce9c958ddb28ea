//! Dataset loading: MNIST-format IDX files, the CIFAR-10 binary format, and
//! a deterministic synthetic digit generator that emits real IDX files (so
//! the same loader path serves both).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

pub const CIFAR_MEANS: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STDS: [f32; 3] = [0.2470, 0.2435, 0.2616];

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Normalized images `[n, channels, h, w]` with integer class labels.
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Rows selected by `indices`, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let s = self.images.shape();
        let row = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Config(format!(
                    "index {i} out of range for dataset of {}",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let images = Tensor::from_vec(&[indices.len(), s[1], s[2], s[3]], data)?;
        Ok((images, labels))
    }

    /// A new dataset holding the selected rows.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (images, labels) = self.batch(indices)?;
        Ok(Dataset { images, labels, classes: self.classes, split: self.split })
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::format(path, format!("truncated at byte {offset}")));
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

fn parse_idx_images<'a>(bytes: &'a [u8], path: &str) -> Result<(usize, usize, usize, &'a [u8])> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(path, format!("image magic {magic}, want {IDX_IMAGES_MAGIC}")));
    }
    let n = read_u32_be(bytes, 4, path)? as usize;
    let rows = read_u32_be(bytes, 8, path)? as usize;
    let cols = read_u32_be(bytes, 12, path)? as usize;
    let want = 16 + n * rows * cols;
    if bytes.len() != want {
        return Err(Error::format(
            path,
            format!("{} bytes for {n} images of {rows}x{cols}, want {want}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, &bytes[16..]))
}

fn parse_idx_labels<'a>(bytes: &'a [u8], path: &str) -> Result<&'a [u8]> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(path, format!("label magic {magic}, want {IDX_LABELS_MAGIC}")));
    }
    let n = read_u32_be(bytes, 4, path)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::format(
            path,
            format!("{} bytes for {n} labels, want {}", bytes.len(), 8 + n),
        ));
    }
    Ok(&bytes[8..])
}

/// Loads one MNIST-format split from `dir` (`train-images-idx3-ubyte` /
/// `train-labels-idx1-ubyte` or the `t10k-` pair). Pixels are scaled to
/// [0, 1] and standardized with the usual constants (mean 0.1307,
/// std 0.3081).
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images_path = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let labels_path = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let image_bytes = fs::read(&images_path)?;
    let label_bytes = fs::read(&labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&image_bytes, &images_path.to_string_lossy())?;
    let labels_raw = parse_idx_labels(&label_bytes, &labels_path.to_string_lossy())?;
    if labels_raw.len() != n {
        return Err(Error::format(
            labels_path,
            format!("{} labels for {n} images", labels_raw.len()),
        ));
    }
    let mut labels = Vec::with_capacity(n);
    for (i, &l) in labels_raw.iter().enumerate() {
        if l > 9 {
            return Err(Error::format(
                labels_path,
                format!("label {l} at index {i} outside 0..=9"),
            ));
        }
        labels.push(l as usize);
    }
    let images = Tensor::from_vec(
        &[n, 1, rows, cols],
        pixels.iter().map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD).collect(),
    )?;
    Ok(Dataset { images, labels, classes: 10, split })
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_PER_FILE: usize = 10_000;

fn load_cifar_file(path: &Path, out_pixels: &mut Vec<f32>, out_labels: &mut Vec<usize>) -> Result<()> {
    let bytes = fs::read(path)?;
    if bytes.len() != CIFAR_RECORD * CIFAR_PER_FILE {
        return Err(Error::format(
            path,
            format!("{} bytes, want {}", bytes.len(), CIFAR_RECORD * CIFAR_PER_FILE),
        ));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0];
        if label > 9 {
            return Err(Error::format(path, format!("label {label} outside 0..=9")));
        }
        out_labels.push(label as usize);
        for ch in 0..3 {
            let plane = &rec[1 + ch * 1024..1 + (ch + 1) * 1024];
            let (mean, std) = (CIFAR_MEANS[ch], CIFAR_STDS[ch]);
            out_pixels.extend(plane.iter().map(|&p| (p as f32 / 255.0 - mean) / std));
        }
    }
    Ok(())
}

/// Loads the CIFAR-10 binary format from `dir`: `data_batch_1..5.bin` for
/// the train split (50000 images), `test_batch.bin` for test (10000).
/// Channels are standardized with the usual per-channel constants.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<_> = match split {
        Split::Train => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        Split::Test => vec![dir.join("test_batch.bin")],
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        load_cifar_file(f, &mut pixels, &mut labels)?;
    }
    let n = labels.len();
    let images = Tensor::from_vec(&[n, 3, 32, 32], pixels)?;
    Ok(Dataset { images, labels, classes: 10, split })
}

// Synthetic digits: 6x12 stroke glyphs rendered into 28x28 with random
// shift, per-image intensity, a fixed blur, and pixel noise. All randomness
// comes from one counter-based stream per file, so a (seed, count) pair
// names the dataset bytes exactly.

const GLYPH_W: usize = 6;
const GLYPH_H: usize = 12;

#[rustfmt::skip]
const GLYPHS: [[&str; GLYPH_H]; 10] = [
    [".####.", "#....#", "#....#", "#....#", "#....#", "#....#",
     "#....#", "#....#", "#....#", "#....#", "#....#", ".####."],
    ["...#..", "..##..", ".#.#..", "...#..", "...#..", "...#..",
     "...#..", "...#..", "...#..", "...#..", "...#..", ".#####"],
    [".####.", "#....#", ".....#", ".....#", "....#.", "...#..",
     "..#...", ".#....", "#.....", "#.....", "#.....", "######"],
    [".####.", "#....#", ".....#", ".....#", ".....#", "..###.",
     ".....#", ".....#", ".....#", ".....#", "#....#", ".####."],
    ["....#.", "...##.", "..#.#.", ".#..#.", "#...#.", "#...#.",
     "######", "....#.", "....#.", "....#.", "....#.", "....#."],
    ["######", "#.....", "#.....", "#.....", "#####.", ".....#",
     ".....#", ".....#", ".....#", ".....#", "#....#", ".####."],
    [".####.", "#....#", "#.....", "#.....", "#####.", "#....#",
     "#....#", "#....#", "#....#", "#....#", "#....#", ".####."],
    ["######", ".....#", ".....#", "....#.", "....#.", "...#..",
     "...#..", "..#...", "..#...", "..#...", "..#...", "..#..."],
    [".####.", "#....#", "#....#", "#....#", "#....#", ".####.",
     "#....#", "#....#", "#....#", "#....#", "#....#", ".####."],
    [".####.", "#....#", "#....#", "#....#", "#....#", ".#####",
     ".....#", ".....#", ".....#", ".....#", "#....#", ".####."],
];

/// Uniform float in [0, 1) from the top 24 bits of one draw.
fn unit_f32(rng: &mut ChaCha8Rng) -> f32 {
    (rng.next_u32() >> 8) as f32 / (1u32 << 24) as f32
}

/// Standard normal via Box-Muller; depends only on the raw ChaCha stream, so
/// the generated bytes are pinned by (seed, count) alone.
fn normal_f32(rng: &mut ChaCha8Rng) -> f32 {
    let u1 = (unit_f32(rng)).max(1e-7);
    let u2 = unit_f32(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
}

fn render_digit(digit: usize, rng: &mut ChaCha8Rng, pixels: &mut [u8]) {
    debug_assert_eq!(pixels.len(), 28 * 28);
    let dx = (rng.next_u32() % 11) as i32 - 5;
    let dy = (rng.next_u32() % 9) as i32 - 4;
    let x0 = (11 + dx) as usize;
    let y0 = (8 + dy) as usize;
    let intensity = 0.7 + 0.3 * unit_f32(rng);

    let mut canvas = [0.0f32; 28 * 28];
    for (r, row) in GLYPHS[digit].iter().enumerate() {
        debug_assert_eq!(row.len(), GLYPH_W);
        for (c, ch) in row.bytes().enumerate() {
            if ch == b'#' {
                canvas[(y0 + r) * 28 + (x0 + c)] = intensity;
            }
        }
    }
    // 3x3 binomial blur softens stroke edges.
    let mut blurred = [0.0f32; 28 * 28];
    const K: [[f32; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    for y in 0..28 {
        for x in 0..28 {
            let mut acc = 0.0;
            for (ky, krow) in K.iter().enumerate() {
                for (kx, &kv) in krow.iter().enumerate() {
                    let yy = y as i32 + ky as i32 - 1;
                    let xx = x as i32 + kx as i32 - 1;
                    if (0..28).contains(&yy) && (0..28).contains(&xx) {
                        acc += kv * canvas[yy as usize * 28 + xx as usize];
                    }
                }
            }
            blurred[y * 28 + x] = acc / 16.0;
        }
    }
    for (p, &v) in pixels.iter_mut().zip(&blurred) {
        let noisy = (v + 0.08 * normal_f32(rng)).clamp(0.0, 1.0);
        *p = (noisy * 255.0).round() as u8;
    }
}

fn write_idx_pair(dir: &Path, prefix: &str, count: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(16 + count * 784);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(count as u32).to_be_bytes());
    images.extend_from_slice(&28u32.to_be_bytes());
    images.extend_from_slice(&28u32.to_be_bytes());
    let mut labels = Vec::with_capacity(8 + count);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(count as u32).to_be_bytes());

    let mut pixels = [0u8; 784];
    for _ in 0..count {
        let digit = (rng.next_u32() % 10) as usize;
        render_digit(digit, &mut rng, &mut pixels);
        images.extend_from_slice(&pixels);
        labels.push(digit as u8);
    }
    let mut f = fs::File::create(dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    f.write_all(&images)?;
    let mut f = fs::File::create(dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    f.write_all(&labels)?;
    Ok(())
}

/// Writes a synthetic MNIST-format dataset (train and t10k IDX pairs) into
/// `dir`. Regenerating with the same arguments reproduces the files byte for
/// byte; train and test draw from independent streams.
pub fn write_synthetic_mnist(dir: &Path, train: usize, test: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_idx_pair(dir, "train", train, seed ^ 0x7355_608_1CED_CAFE)?;
    write_idx_pair(dir, "t10k", test, seed ^ 0x0DDB_A11_5EED_FACE)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;
    use std::sync::atomic::{AtomicU64, Ordering};

    fn tmpdir(tag: &str) -> PathBuf {
        static COUNT: AtomicU64 = AtomicU64::new(0);
        let d = std::env::temp_dir().join(format!(
            "flgc-data-{tag}-{}-{}",
            std::process::id(),
            COUNT.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&d).unwrap();
        d
    }

    fn write_tiny_idx(dir: &Path, n: usize) {
        let mut images = Vec::new();
        images.extend_from_slice(&2051u32.to_be_bytes());
        images.extend_from_slice(&(n as u32).to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        images.extend_from_slice(&28u32.to_be_bytes());
        for i in 0..n * 784 {
            images.push((i % 251) as u8);
        }
        fs::write(dir.join("train-images-idx3-ubyte"), &images).unwrap();
        let mut labels = Vec::new();
        labels.extend_from_slice(&2049u32.to_be_bytes());
        labels.extend_from_slice(&(n as u32).to_be_bytes());
        labels.extend((0..n).map(|i| (i % 10) as u8));
        fs::write(dir.join("train-labels-idx1-ubyte"), &labels).unwrap();
    }

    #[test]
    fn idx_round_trip_and_normalization() {
        let dir = tmpdir("idx");
        write_tiny_idx(&dir, 3);
        let ds = load_mnist(&dir, Split::Train).unwrap();
        assert_eq!(ds.images.shape(), &[3, 1, 28, 28]);
        assert_eq!(ds.labels, vec![0, 1, 2]);
        assert_eq!(ds.classes, 10);
        // Pixel value 0 normalizes to -mean/std.
        let want = (0.0 - MNIST_MEAN) / MNIST_STD;
        assert!((ds.images.data()[0] - want).abs() < 1e-6);
        // Pixel value 250 at flat index 250.
        let want = (250.0 / 255.0 - MNIST_MEAN) / MNIST_STD;
        assert!((ds.images.data()[250] - want).abs() < 1e-6);
    }

    #[test]
    fn idx_bad_magic_and_truncation() {
        let dir = tmpdir("bad");
        write_tiny_idx(&dir, 2);
        // Corrupt the magic.
        let p = dir.join("train-images-idx3-ubyte");
        let mut bytes = fs::read(&p).unwrap();
        bytes[3] = 0xFF;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_mnist(&dir, Split::Train), Err(Error::Format { .. })));

        write_tiny_idx(&dir, 2);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_mnist(&dir, Split::Train), Err(Error::Format { .. })));
    }

    #[test]
    fn idx_label_image_count_mismatch() {
        let dir = tmpdir("mismatch");
        write_tiny_idx(&dir, 2);
        let p = dir.join("train-labels-idx1-ubyte");
        let mut labels = Vec::new();
        labels.extend_from_slice(&2049u32.to_be_bytes());
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[1, 2, 3]);
        fs::write(&p, &labels).unwrap();
        assert!(load_mnist(&dir, Split::Train).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_loadable() {
        let dir = tmpdir("syn");
        write_synthetic_mnist(&dir, 64, 16, 42).unwrap();
        let train = load_mnist(&dir, Split::Train).unwrap();
        let test = load_mnist(&dir, Split::Test).unwrap();
        assert_eq!(train.len(), 64);
        assert_eq!(test.len(), 16);
        assert!(train.labels.iter().all(|&l| l < 10));
        // Enough class variety to train on.
        let mut seen = [false; 10];
        for &l in &train.labels {
            seen[l] = true;
        }
        assert!(seen.iter().filter(|&&s| s).count() >= 8);

        let first = fs::read(dir.join("train-images-idx3-ubyte")).unwrap();
        write_synthetic_mnist(&dir, 64, 16, 42).unwrap();
        let second = fs::read(dir.join("train-images-idx3-ubyte")).unwrap();
        assert_eq!(first, second);

        // Different seeds give different bytes.
        write_synthetic_mnist(&dir, 64, 16, 43).unwrap();
        let third = fs::read(dir.join("train-images-idx3-ubyte")).unwrap();
        assert_ne!(first, third);
    }

    #[test]
    fn batch_and_subset_select_rows() {
        let dir = tmpdir("batch");
        write_synthetic_mnist(&dir, 10, 4, 1).unwrap();
        let ds = load_mnist(&dir, Split::Train).unwrap();
        let (images, labels) = ds.batch(&[3, 1]).unwrap();
        assert_eq!(images.shape(), &[2, 1, 28, 28]);
        assert_eq!(labels, vec![ds.labels[3], ds.labels[1]]);
        assert_eq!(
            &images.data()[..784],
            &ds.images.data()[3 * 784..4 * 784]
        );
        assert!(ds.batch(&[10]).is_err());

        let sub = ds.subset(&[0, 2, 4]).unwrap();
        assert_eq!(sub.len(), 3);
        assert_eq!(sub.classes, 10);
    }

    #[test]
    fn cifar_round_trip_and_length_check() {
        let dir = tmpdir("cifar");
        // Test split only: one file of the exact record length.
        let mut bytes = vec![0u8; CIFAR_RECORD * CIFAR_PER_FILE];
        for i in 0..CIFAR_PER_FILE {
            bytes[i * CIFAR_RECORD] = (i % 10) as u8;
            bytes[i * CIFAR_RECORD + 1] = 255;
        }
        fs::write(dir.join("test_batch.bin"), &bytes).unwrap();
        let ds = load_cifar10(&dir, Split::Test).unwrap();
        assert_eq!(ds.images.shape(), &[10_000, 3, 32, 32]);
        assert_eq!(ds.labels[3], 3);
        let want = (1.0 - CIFAR_MEANS[0]) / CIFAR_STDS[0];
        assert!((ds.images.data()[0] - want).abs() < 1e-6);

        fs::write(dir.join("test_batch.bin"), &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_cifar10(&dir, Split::Test), Err(Error::Format { .. })));
    }
}
