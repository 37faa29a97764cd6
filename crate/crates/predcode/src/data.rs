//! Dataset plumbing: IDX container read/write (gzip accepted), joint ZCA
//! whitening with a reusable fitted transform, seeded batch ordering, and a
//! deterministic bar-image generator for fast fixtures.
//!
//! Pixel convention: IDX bytes map to [0, 1] by dividing by 255, and writing
//! inverts that map (values clamped to [0, 1], rounded to the nearest byte).
//! Any tensor whose values are multiples of 1/255 round-trips exactly.
//! Whitening is fitted jointly across channels on the flattened per-sample
//! vector; the fitted transform is immutable, so a held-out set can only
//! reuse it, never refit it.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Magic for a 3-D uint8 image container.
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
/// Magic for a 1-D uint8 label container.
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Labeled image collection plus the whitening transform fitted on it, if any.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Option<Vec<u8>>,
    pub whitening: Option<WhiteningTransform>,
}

impl Dataset {
    /// Pairs images with optional labels; label count must match sample count.
    pub fn new(images: Tensor4, labels: Option<Vec<u8>>) -> Result<Self> {
        if let Some(ref l) = labels {
            if l.len() != images.n {
                return Err(Error::Shape(format!(
                    "{} labels for {} images",
                    l.len(),
                    images.n
                )));
            }
        }
        Ok(Dataset {
            images,
            labels,
            whitening: None,
        })
    }

    /// Sample count.
    pub fn len(&self) -> usize {
        self.images.n
    }

    pub fn is_empty(&self) -> bool {
        self.images.n == 0
    }

    /// Fits ZCA whitening on these images and returns the whitened dataset
    /// with labels carried over and the transform stored for reuse.
    pub fn whitened(&self, eps: f64) -> Result<Dataset> {
        let mut out = zca_whiten(&self.images, eps)?;
        out.labels = self.labels.clone();
        Ok(out)
    }
}

/// Affine map x -> W (x - mean), fitted once by [`zca_whiten`]. Fields are
/// private so the fit cannot be edited afterwards; held-out data goes through
/// [`WhiteningTransform::apply`] with the train-set statistics.
#[derive(Debug, Clone)]
pub struct WhiteningTransform {
    mean: DVector<f64>,
    matrix: DMatrix<f64>,
}

impl WhiteningTransform {
    /// Flattened sample dimension the transform was fitted on.
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Applies the fitted map to every sample; shapes must flatten to the
    /// fitted dimension.
    pub fn apply(&self, images: &Tensor4) -> Result<Tensor4> {
        let (n, c, h, w) = images.shape();
        let dim = c * h * w;
        if dim != self.dim() {
            return Err(Error::Shape(format!(
                "whitening fitted on dimension {} but samples flatten to {}",
                self.dim(),
                dim
            )));
        }
        let mut centered = DMatrix::zeros(dim, n);
        for j in 0..n {
            let sample = &images.data()[j * dim..(j + 1) * dim];
            for i in 0..dim {
                centered[(i, j)] = sample[i] - self.mean[i];
            }
        }
        let mapped = &self.matrix * centered;
        let mut out = Tensor4::zeros(n, c, h, w);
        for j in 0..n {
            let dst = &mut out.data_mut()[j * dim..(j + 1) * dim];
            for i in 0..dim {
                dst[i] = mapped[(i, j)];
            }
        }
        Ok(out)
    }
}

/// Fits ZCA whitening on `images`: subtract the mean, rotate to the
/// covariance eigenbasis, scale each axis by (eigenvalue + eps)^{-1/2},
/// rotate back. Returns the whitened data with the fitted transform stored;
/// labels are absent (use [`Dataset::whitened`] to carry them).
pub fn zca_whiten(images: &Tensor4, eps: f64) -> Result<Dataset> {
    if !eps.is_finite() || eps <= 0.0 {
        return Err(Error::Argument(format!(
            "whitening eps must be positive and finite, got {eps}"
        )));
    }
    let (n, c, h, w) = images.shape();
    if n < 2 {
        return Err(Error::Argument(format!(
            "whitening needs at least 2 samples, got {n}"
        )));
    }
    let dim = c * h * w;
    let mut mean = DVector::zeros(dim);
    for j in 0..n {
        let sample = &images.data()[j * dim..(j + 1) * dim];
        for i in 0..dim {
            mean[i] += sample[i];
        }
    }
    mean /= n as f64;
    let mut centered = DMatrix::zeros(dim, n);
    for j in 0..n {
        let sample = &images.data()[j * dim..(j + 1) * dim];
        for i in 0..dim {
            centered[(i, j)] = sample[i] - mean[i];
        }
    }
    let cov = (&centered * centered.transpose()) / n as f64;
    let eig = SymmetricEigen::new(cov);
    // Roundoff can leave tiny negative eigenvalues; clamp before the shift.
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..dim {
        let s = 1.0 / (eig.eigenvalues[j].max(0.0) + eps).sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    let matrix = scaled * eig.eigenvectors.transpose();
    let transform = WhiteningTransform { mean, matrix };
    let whitened = transform.apply(images)?;
    Ok(Dataset {
        images: whitened,
        labels: None,
        whitening: Some(transform),
    })
}

/// Contents of one IDX container.
#[derive(Debug)]
pub enum IdxContent {
    /// Single-channel images scaled to [0, 1].
    Images(Tensor4),
    Labels(Vec<u8>),
}

/// Reads an IDX file (gzip-compressed accepted, sniffed by magic bytes) and
/// dispatches on the container magic.
pub fn load_idx(path: impl AsRef<Path>) -> Result<IdxContent> {
    let raw = fs::read(path.as_ref())?;
    let bytes = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip decode failed: {e}")))?;
        out
    } else {
        raw
    };
    parse_idx(&bytes)
}

/// Loads an image container, rejecting label files.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor4> {
    match load_idx(path)? {
        IdxContent::Images(t) => Ok(t),
        IdxContent::Labels(_) => Err(Error::Format(
            "expected an image container, found labels".into(),
        )),
    }
}

/// Loads a label container, rejecting image files.
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    match load_idx(path)? {
        IdxContent::Labels(l) => Ok(l),
        IdxContent::Images(_) => Err(Error::Format(
            "expected a label container, found images".into(),
        )),
    }
}

/// Loads images plus optional labels into one dataset.
pub fn load_dataset(images: impl AsRef<Path>, labels: Option<&Path>) -> Result<Dataset> {
    let tensor = load_idx_images(images)?;
    let labels = match labels {
        Some(p) => Some(load_idx_labels(p)?),
        None => None,
    };
    Dataset::new(tensor, labels)
}

/// Writes a single-channel image tensor as an IDX container; a `.gz`
/// extension selects gzip output. Values are clamped to [0, 1] and rounded
/// to bytes.
pub fn write_idx_images(path: impl AsRef<Path>, images: &Tensor4) -> Result<()> {
    let (n, c, h, w) = images.shape();
    if c != 1 {
        return Err(Error::Shape(format!(
            "IDX image container is single channel, got {c}"
        )));
    }
    let mut bytes = Vec::with_capacity(16 + n * h * w);
    bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        let d32 = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} exceeds the IDX u32 header")))?;
        bytes.extend_from_slice(&d32.to_be_bytes());
    }
    for &v in images.data() {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    write_maybe_gzip(path.as_ref(), &bytes)
}

/// Writes labels as an IDX container; a `.gz` extension selects gzip output.
pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let n32 = u32::try_from(labels.len())
        .map_err(|_| Error::Format(format!("label count {} exceeds the IDX u32 header", labels.len())))?;
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&n32.to_be_bytes());
    bytes.extend_from_slice(labels);
    write_maybe_gzip(path.as_ref(), &bytes)
}

fn write_maybe_gzip(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes)?;
        let compressed = enc.finish()?;
        fs::write(path, compressed)?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

fn parse_idx(bytes: &[u8]) -> Result<IdxContent> {
    let mut r = ByteReader { bytes, pos: 0 };
    let magic = r.read_u32()?;
    match magic {
        IDX_IMAGE_MAGIC => {
            let n = r.read_u32()? as usize;
            let h = r.read_u32()? as usize;
            let w = r.read_u32()? as usize;
            let count = n
                .checked_mul(h)
                .and_then(|p| p.checked_mul(w))
                .ok_or_else(|| {
                    Error::Format(format!("image dims {n}x{h}x{w} overflow the pixel count"))
                })?;
            let payload = r.take_exact(count)?;
            let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
            Ok(IdxContent::Images(Tensor4::from_vec(n, 1, h, w, data)?))
        }
        IDX_LABEL_MAGIC => {
            let n = r.read_u32()? as usize;
            let payload = r.take_exact(n)?;
            Ok(IdxContent::Labels(payload.to_vec()))
        }
        other => Err(Error::Format(format!(
            "bad IDX magic 0x{other:08x}, expected 0x{IDX_IMAGE_MAGIC:08x} or 0x{IDX_LABEL_MAGIC:08x}"
        ))),
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn read_u32(&mut self) -> Result<u32> {
        if self.bytes.len() < self.pos + 4 {
            return Err(Error::Format("truncated IDX header".into()));
        }
        let v = u32::from_be_bytes(self.bytes[self.pos..self.pos + 4].try_into().unwrap());
        self.pos += 4;
        Ok(v)
    }

    /// Consumes exactly `count` payload bytes; short and trailing data are
    /// both format errors so round trips stay byte-exact.
    fn take_exact(&mut self, count: usize) -> Result<&'a [u8]> {
        let have = self.bytes.len() - self.pos;
        if have < count {
            return Err(Error::Format(format!(
                "truncated payload: header promises {count} bytes, found {have}"
            )));
        }
        if have > count {
            return Err(Error::Format(format!(
                "{} trailing bytes after the payload",
                have - count
            )));
        }
        Ok(&self.bytes[self.pos..self.pos + count])
    }
}

/// Deterministic fixture set: `n` images of `size` x `size` pixels, each a
/// single one-pixel-thick bar spanning the image. Label 0 is horizontal,
/// label 1 is vertical; orientations are exactly balanced and shuffled, bar
/// positions are uniform, everything is reproducible from the seed.
pub fn synth_bars(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < 4 {
        return Err(Error::Argument(format!(
            "bar images need size >= 4, got {size}"
        )));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng);
    let mut images = Tensor4::zeros(n, 1, size, size);
    for i in 0..n {
        let pos = rng.gen_range(0..size);
        let plane = images.plane_mut(i, 0);
        if labels[i] == 0 {
            for x in 0..size {
                plane[pos * size + x] = 1.0;
            }
        } else {
            for y in 0..size {
                plane[y * size + pos] = 1.0;
            }
        }
    }
    Ok(Dataset {
        images,
        labels: Some(labels),
        whitening: None,
    })
}

/// Seeded epoch ordering: one shuffled pass over all samples split into
/// consecutive batches; a short trailing batch is kept.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Copies the selected samples into a contiguous batch tensor, in order.
pub fn gather(images: &Tensor4, indices: &[usize]) -> Result<Tensor4> {
    let (n, c, h, w) = images.shape();
    let mut out = Tensor4::zeros(indices.len(), c, h, w);
    for (j, &idx) in indices.iter().enumerate() {
        if idx >= n {
            return Err(Error::Argument(format!(
                "batch index {idx} out of range for {n} samples"
            )));
        }
        for ch in 0..c {
            out.plane_mut(j, ch).copy_from_slice(images.plane(idx, ch));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn image_fixture_bytes() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3];
        for d in [2u32, 2, 2] {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(&[10, 20, 30, 40, 50, 60, 70, 80]);
        b
    }

    #[test]
    fn hand_written_image_bytes_parse_back_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.idx");
        fs::write(&path, image_fixture_bytes()).unwrap();
        let t = load_idx_images(&path).unwrap();
        assert_eq!(t.shape(), (2, 1, 2, 2));
        let expected = [10u8, 20, 30, 40, 50, 60, 70, 80];
        for (v, e) in t.data().iter().zip(expected) {
            assert_eq!(*v, f64::from(e) / 255.0);
        }
    }

    #[test]
    fn label_fixture_parses_three_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.idx");
        let mut b = vec![0, 0, 8, 1];
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[5, 0, 9]);
        fs::write(&path, b).unwrap();
        let l = load_idx_labels(&path).unwrap();
        assert_eq!(l, vec![5, 0, 9]);
        assert_eq!(l.len(), 3);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.idx");
        let mut b = vec![0, 0, 8, 2];
        b.extend_from_slice(&2u32.to_be_bytes());
        fs::write(&path, b).unwrap();
        assert!(matches!(load_idx(&path), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_container_kind_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.idx");
        fs::write(&path, image_fixture_bytes()).unwrap();
        assert!(matches!(load_idx_labels(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.idx");
        let mut b = image_fixture_bytes();
        b.pop();
        fs::write(&path, b).unwrap();
        let err = load_idx(&path).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn trailing_bytes_are_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.idx");
        let mut b = image_fixture_bytes();
        b.push(0);
        fs::write(&path, b).unwrap();
        let err = load_idx(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"));
    }

    #[test]
    fn dim_overflow_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("huge.idx");
        let mut b = vec![0, 0, 8, 3];
        for _ in 0..3 {
            b.extend_from_slice(&u32::MAX.to_be_bytes());
        }
        fs::write(&path, b).unwrap();
        let err = load_idx(&path).unwrap_err();
        assert!(err.to_string().contains("overflow"), "got {err}");
    }

    #[test]
    fn gzip_compressed_files_load_transparently() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("imgs.idx.gz");
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&image_fixture_bytes()).unwrap();
        fs::write(&path, enc.finish().unwrap()).unwrap();
        let t = load_idx_images(&path).unwrap();
        assert_eq!(t.shape(), (2, 1, 2, 2));
        assert_eq!(t.at(1, 0, 1, 1), 80.0 / 255.0);
    }

    #[test]
    fn idx_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_bars(10, 5, 7).unwrap();
        let img_path = dir.path().join("bars-images.idx.gz");
        let lbl_path = dir.path().join("bars-labels.idx");
        write_idx_images(&img_path, &set.images).unwrap();
        write_idx_labels(&lbl_path, set.labels.as_ref().unwrap()).unwrap();
        let back = load_dataset(&img_path, Some(&lbl_path)).unwrap();
        assert_eq!(back.images.shape(), set.images.shape());
        assert_eq!(back.images.data(), set.images.data());
        assert_eq!(back.labels, set.labels);
    }

    #[test]
    fn bars_are_deterministic_per_seed() {
        let a = synth_bars(64, 6, 42).unwrap();
        let b = synth_bars(64, 6, 42).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn every_bar_image_has_exactly_size_nonzero_pixels() {
        let size = 6;
        let set = synth_bars(40, size, 3).unwrap();
        let labels = set.labels.as_ref().unwrap();
        for i in 0..40 {
            let plane = set.images.plane(i, 0);
            let nonzero = plane.iter().filter(|v| **v != 0.0).count();
            assert_eq!(nonzero, size, "image {i}");
            let full_row = (0..size)
                .any(|y| (0..size).all(|x| plane[y * size + x] == 1.0));
            let full_col = (0..size)
                .any(|x| (0..size).all(|y| plane[y * size + x] == 1.0));
            if labels[i] == 0 {
                assert!(full_row, "label 0 image {i} should hold a horizontal bar");
            } else {
                assert!(full_col, "label 1 image {i} should hold a vertical bar");
            }
        }
    }

    #[test]
    fn bar_labels_stay_balanced() {
        for seed in 0..5 {
            let set = synth_bars(101, 8, seed).unwrap();
            let ones = set
                .labels
                .as_ref()
                .unwrap()
                .iter()
                .filter(|l| **l == 1)
                .count();
            let zeros = 101 - ones;
            // Exact balance up to parity, far inside the 10 percent budget.
            assert!(zeros.abs_diff(ones) <= 1, "seed {seed}: {zeros} vs {ones}");
        }
    }

    #[test]
    fn small_sizes_are_rejected() {
        assert!(matches!(synth_bars(5, 3, 0), Err(Error::Argument(_))));
    }

    fn normal_tensor(n: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor4 {
        let data = (0..n * c * h * w)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor4::from_vec(n, c, h, w, data).unwrap()
    }

    fn operator_norm_sym(m: &DMatrix<f64>) -> f64 {
        let sym = (m + m.transpose()) * 0.5;
        SymmetricEigen::new(sym)
            .eigenvalues
            .iter()
            .fold(0.0f64, |acc, l| acc.max(l.abs()))
    }

    #[test]
    fn whitening_already_white_data_is_nearly_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let images = normal_tensor(20_000, 1, 2, 2, &mut rng);
        let set = zca_whiten(&images, 1e-5).unwrap();
        let t = set.whitening.as_ref().unwrap();
        let diff = t.matrix() - DMatrix::<f64>::identity(4, 4);
        assert!(
            operator_norm_sym(&diff) < 0.05,
            "transform strays from identity by {}",
            operator_norm_sym(&diff)
        );
    }

    #[test]
    fn whitened_covariance_matches_identity_under_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dim = 6;
        let n = 3000;
        // Correlated source: x = A z + b with A = I + 0.3 R.
        let mut a = DMatrix::<f64>::identity(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                a[(i, j)] += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let b: Vec<f64> = (0..dim).map(|i| 0.2 * i as f64).collect();
        let mut images = Tensor4::zeros(n, 1, 2, 3);
        for s in 0..n {
            let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &a * z;
            let dst = &mut images.data_mut()[s * dim..(s + 1) * dim];
            for i in 0..dim {
                dst[i] = x[i] + b[i];
            }
        }
        let set = zca_whiten(&images, 1e-5).unwrap();
        // Recompute mean and covariance of the output by plain loops.
        let out = &set.images;
        let mut mean = vec![0.0; dim];
        for s in 0..n {
            let sample = &out.data()[s * dim..(s + 1) * dim];
            for i in 0..dim {
                mean[i] += sample[i];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
            assert!(m.abs() < 1e-6, "post-whitening pixel mean {m}");
        }
        let mut cov = DMatrix::zeros(dim, dim);
        for s in 0..n {
            let sample = &out.data()[s * dim..(s + 1) * dim];
            for i in 0..dim {
                for j in 0..dim {
                    cov[(i, j)] += (sample[i] - mean[i]) * (sample[j] - mean[j]);
                }
            }
        }
        cov /= n as f64;
        let diff = &cov - DMatrix::<f64>::identity(dim, dim);
        let norm = operator_norm_sym(&diff);
        assert!(norm < 1e-2, "covariance strays from identity by {norm}");
    }

    #[test]
    fn constant_pixel_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut images = normal_tensor(200, 1, 2, 2, &mut rng);
        for s in 0..200 {
            images.plane_mut(s, 0)[0] = 0.7;
        }
        let set = zca_whiten(&images, 1e-5).unwrap();
        assert!(set.images.all_finite());
    }

    #[test]
    fn bad_whitening_arguments_are_rejected() {
        let images = Tensor4::zeros(8, 1, 2, 2);
        assert!(matches!(zca_whiten(&images, 0.0), Err(Error::Argument(_))));
        assert!(matches!(zca_whiten(&images, -1.0), Err(Error::Argument(_))));
        let one = Tensor4::zeros(1, 1, 2, 2);
        assert!(matches!(zca_whiten(&one, 1e-5), Err(Error::Argument(_))));
    }

    #[test]
    fn fitted_transform_reuses_on_new_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let train = normal_tensor(500, 1, 2, 2, &mut rng);
        let set = zca_whiten(&train, 1e-5).unwrap();
        let t = set.whitening.as_ref().unwrap();
        let test = normal_tensor(3, 1, 2, 2, &mut rng);
        let mapped = t.apply(&test).unwrap();
        assert!(mapped.all_finite());
        // First sample agrees with the explicit affine map.
        let x = DVector::from_column_slice(&test.data()[0..4]);
        let y = t.matrix() * (x - t.mean());
        for i in 0..4 {
            assert!((mapped.data()[i] - y[i]).abs() <= 1e-12);
        }
        let wrong = Tensor4::zeros(2, 1, 3, 3);
        assert!(matches!(t.apply(&wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn whitened_dataset_keeps_labels() {
        let set = synth_bars(24, 4, 2).unwrap();
        let white = set.whitened(1e-5).unwrap();
        assert_eq!(white.labels, set.labels);
        assert!(white.whitening.is_some());
    }

    #[test]
    fn label_count_mismatch_is_rejected() {
        let images = Tensor4::zeros(4, 1, 2, 2);
        assert!(matches!(
            Dataset::new(images, Some(vec![0, 1])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn epoch_batches_cover_every_sample_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let batches = epoch_batches(23, 5, &mut rng).unwrap();
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![5, 5, 5, 5, 3]);
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        let mut rng2 = ChaCha8Rng::seed_from_u64(33);
        assert_eq!(batches, epoch_batches(23, 5, &mut rng2).unwrap());
        assert!(matches!(
            epoch_batches(10, 0, &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn gather_copies_the_selected_planes() {
        let mut images = Tensor4::zeros(3, 2, 2, 2);
        for s in 0..3 {
            for c in 0..2 {
                for (k, v) in images.plane_mut(s, c).iter_mut().enumerate() {
                    *v = (s * 100 + c * 10 + k) as f64;
                }
            }
        }
        let batch = gather(&images, &[2, 0]).unwrap();
        assert_eq!(batch.shape(), (2, 2, 2, 2));
        assert_eq!(batch.at(0, 1, 0, 1), 211.0);
        assert_eq!(batch.at(1, 0, 1, 0), 2.0);
        assert!(matches!(gather(&images, &[3]), Err(Error::Argument(_))));
    }
}
