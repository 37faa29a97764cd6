//! Feature evaluation: nearest-neighbor classification over stage-aggregated
//! causes, stage-wise reconstruction error, receptive-field back-projection,
//! and filter-similarity export.
//!
//! Back-projection has no recorded pooling indices, so every pooled value is
//! placed at its window's top-left cell. The synthesis op stamps the
//! 180-degree-rotated tap table around a unit impulse; fields therefore show
//! each filter as it appears in the image, not as the tap table is stored.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{forward_infer, mse_percentage, InferenceResult, PredNet};
use crate::ops::{conv_synthesize, max_unpool};
use crate::tensor::{PoolIndex, Tensor4};

/// Default neighborhood size for classification runs.
pub const DEFAULT_KNN_K: usize = 7;

/// Majority vote among the `k` Euclidean nearest train points. Neighbor order
/// breaks distance ties by train index; vote ties go to the smallest label.
pub fn knn_classify(
    train: &[Vec<f64>],
    train_labels: &[u8],
    test: &[Vec<f64>],
    k: usize,
) -> Result<Vec<u8>> {
    if train.is_empty() {
        return Err(Error::Argument("classification needs a non-empty train set".into()));
    }
    if train.len() != train_labels.len() {
        return Err(Error::Shape(format!(
            "{} train points but {} labels",
            train.len(),
            train_labels.len()
        )));
    }
    if k == 0 {
        return Err(Error::Argument("neighborhood size must be at least 1".into()));
    }
    if k > train.len() {
        return Err(Error::Argument(format!(
            "neighborhood of {k} exceeds the {} train points",
            train.len()
        )));
    }
    let dim = train[0].len();
    for (i, p) in train.iter().enumerate() {
        if p.len() != dim {
            return Err(Error::Shape(format!(
                "train point {i} has {} features, expected {dim}",
                p.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(test.len());
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(train.len());
    for (t, point) in test.iter().enumerate() {
        if point.len() != dim {
            return Err(Error::Shape(format!(
                "test point {t} has {} features, expected {dim}",
                point.len()
            )));
        }
        scored.clear();
        for (i, p) in train.iter().enumerate() {
            let d2: f64 = p.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
            scored.push((d2, i));
        }
        scored.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut counts = [0u32; 256];
        for (_, i) in &scored[..k] {
            counts[train_labels[*i] as usize] += 1;
        }
        let mut best = 0usize;
        for label in 1..256 {
            if counts[label] > counts[best] {
                best = label;
            }
        }
        out.push(best as u8);
    }
    Ok(out)
}

/// Misclassification percentage.
pub fn error_rate(predicted: &[u8], truth: &[u8]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions against {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Argument("error rate over an empty set is undefined".into()));
    }
    let wrong = predicted.iter().zip(truth).filter(|(p, t)| p != t).count();
    Ok(100.0 * wrong as f64 / predicted.len() as f64)
}

/// Per-stage reconstruction MSE percentages for one batch, single inference.
pub fn reconstruction_errors(net: &PredNet, batch: &Tensor4) -> Result<Vec<f64>> {
    let result = forward_infer(net, batch)?;
    result
        .stages
        .iter()
        .map(|pass| mse_percentage(&pass.input, &pass.residual))
        .collect()
}

/// Reconstruction MSE percentage at one stage.
pub fn reconstruction_error(net: &PredNet, batch: &Tensor4, stage: usize) -> Result<f64> {
    if stage >= net.depth() {
        return Err(Error::Argument(format!(
            "stage {stage} out of range for a {}-stage net",
            net.depth()
        )));
    }
    Ok(reconstruction_errors(net, batch)?[stage])
}

/// Per-sample flattened feature rows: concatenated causes of the first
/// `stages` stages. Appending a stage never changes earlier columns.
pub fn aggregate_features(result: &InferenceResult, stages: usize) -> Result<Vec<Vec<f64>>> {
    if stages == 0 || stages > result.stages.len() {
        return Err(Error::Argument(format!(
            "feature prefix of {stages} stages out of range for a {}-stage result",
            result.stages.len()
        )));
    }
    let n = result.stages[0].causes.n;
    let mut rows = vec![Vec::new(); n];
    for pass in &result.stages[..stages] {
        let per_sample = pass.causes.c * pass.causes.h * pass.causes.w;
        for (s, row) in rows.iter_mut().enumerate() {
            row.extend_from_slice(&pass.causes.data()[s * per_sample..(s + 1) * per_sample]);
        }
    }
    Ok(rows)
}

/// Per-sample flattened pixel rows, the raw baseline for classification.
pub fn flatten_images(images: &Tensor4) -> Vec<Vec<f64>> {
    let per_sample = images.c * images.h * images.w;
    (0..images.n)
        .map(|s| images.data()[s * per_sample..(s + 1) * per_sample].to_vec())
        .collect()
}

/// Back-projected cause units in pixel space, one sample per unit.
#[derive(Debug, Clone)]
pub struct ReceptiveFields {
    /// Raw projections, shape (units, input_channels, h, w).
    pub raw: Tensor4,
    /// Per-field affine rescale of `raw` to [0, 1]; zero where degenerate.
    pub normalized: Tensor4,
    /// True for fields with no dynamic range (constant, typically all zero).
    pub degenerate: Vec<bool>,
}

/// Smallest odd cause-map side such that every intermediate support fits its
/// map with room for the off-center drift the top-left unpooling introduces.
fn cause_map_side(net: &PredNet, stage: usize) -> Result<usize> {
    let fits = |side: usize| -> bool {
        let mut support = 1usize;
        let mut map = side;
        let mut drift = 0usize;
        for i in (0..=stage).rev() {
            let f = net.stages[i].filter_size();
            support += f - 1;
            if support + 2 * drift > map {
                return false;
            }
            support = 2 * support - 1;
            map *= 2;
            drift += 1;
            if support + 2 * drift > map {
                return false;
            }
            support += f - 1;
            if support + 2 * drift > map {
                return false;
            }
        }
        true
    };
    let mut side = 3;
    while side <= 4096 {
        if fits(side) {
            return Ok(side);
        }
        side += 2;
    }
    Err(Error::Argument("receptive field exceeds the supported extent".into()))
}

/// Routes a unit impulse per cause channel of `stage` through each stage's
/// cause synthesis, unpooling, and state synthesis down to pixel space.
pub fn backproject_fields(net: &PredNet, stage: usize) -> Result<ReceptiveFields> {
    if stage >= net.depth() {
        return Err(Error::Argument(format!(
            "stage {stage} out of range for a {}-stage net",
            net.depth()
        )));
    }
    let units = net.stages[stage].cause_channels();
    let side = cause_map_side(net, stage)?;
    let mut raw = None;
    for j in 0..units {
        let mut field = Tensor4::zeros(1, units, side, side);
        *field.at_mut(0, j, side / 2, side / 2) = 1.0;
        for i in (0..=stage).rev() {
            let params = &net.stages[i];
            let states = conv_synthesize(&params.invariance, &field)?;
            let idx = PoolIndex::new(
                states.n,
                states.c,
                states.h * 2,
                states.w * 2,
                vec![0; states.n * states.c * states.h * states.w],
            );
            let unpooled = max_unpool(&states, &idx)?;
            field = conv_synthesize(&params.dictionary, &unpooled)?;
        }
        let out = raw.get_or_insert_with(|| Tensor4::zeros(units, field.c, field.h, field.w));
        for c in 0..field.c {
            out.plane_mut(j, c).copy_from_slice(field.plane(0, c));
        }
    }
    let raw = raw.expect("at least one cause unit");
    let mut normalized = Tensor4::zeros(raw.n, raw.c, raw.h, raw.w);
    let per_field = raw.c * raw.h * raw.w;
    let mut degenerate = Vec::with_capacity(units);
    for j in 0..units {
        let src = &raw.data()[j * per_field..(j + 1) * per_field];
        let lo = src.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            let dst = &mut normalized.data_mut()[j * per_field..(j + 1) * per_field];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - lo) / (hi - lo);
            }
            degenerate.push(false);
        } else {
            degenerate.push(true);
        }
    }
    Ok(ReceptiveFields { raw, normalized, degenerate })
}

/// Pairwise cosine similarities over the non-degenerate fields.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    values: Vec<f64>,
    /// Original field indices backing each matrix row, in order.
    pub kept: Vec<usize>,
    /// Zero-norm fields left out of the matrix.
    pub excluded: Vec<usize>,
}

impl SimilarityMatrix {
    pub fn dim(&self) -> usize {
        self.kept.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.kept.len() + j]
    }
}

/// Cosine similarity of every field pair; `fields` holds one field per
/// sample. Zero-norm fields are excluded and reported, not scored.
pub fn filter_similarity(fields: &Tensor4) -> Result<SimilarityMatrix> {
    if fields.n < 2 {
        return Err(Error::Argument(format!(
            "similarity needs at least 2 fields, got {}",
            fields.n
        )));
    }
    let per_field = fields.c * fields.h * fields.w;
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    let mut norms = Vec::new();
    for j in 0..fields.n {
        let v = &fields.data()[j * per_field..(j + 1) * per_field];
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            kept.push(j);
            norms.push(norm);
        } else {
            excluded.push(j);
        }
    }
    let dim = kept.len();
    let mut values = vec![0.0; dim * dim];
    for a in 0..dim {
        values[a * dim + a] = 1.0;
        let va = &fields.data()[kept[a] * per_field..(kept[a] + 1) * per_field];
        for b in a + 1..dim {
            let vb = &fields.data()[kept[b] * per_field..(kept[b] + 1) * per_field];
            let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
            let cos = dot / (norms[a] * norms[b]);
            values[a * dim + b] = cos;
            values[b * dim + a] = cos;
        }
    }
    Ok(SimilarityMatrix { values, kept, excluded })
}

/// CSV rendering: header row of original field indices, one row per field.
pub fn similarity_csv(m: &SimilarityMatrix) -> String {
    let mut out = String::from("field");
    for j in &m.kept {
        out.push_str(&format!(",{j}"));
    }
    out.push('\n');
    for (a, j) in m.kept.iter().enumerate() {
        out.push_str(&format!("{j}"));
        for b in 0..m.dim() {
            out.push_str(&format!(",{:.12e}", m.at(a, b)));
        }
        out.push('\n');
    }
    out
}

/// Generic numeric table rendering with a header line.
pub fn csv_table(header: &str, rows: &[Vec<f64>]) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for row in rows {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            out.push_str(&format!("{v:.12e}"));
            first = false;
        }
        out.push('\n');
    }
    out
}

/// Binary 8-bit PGM (P5). `bytes` is row-major, `w * h` long.
pub fn write_pgm(path: &Path, w: usize, h: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != w * h {
        return Err(Error::Shape(format!(
            "{}x{} image needs {} bytes, got {}",
            w,
            h,
            w * h,
            bytes.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out)?;
    Ok(())
}

/// One PGM per unit (multi-channel fields tile channels side by side) plus a
/// `fields.csv` manifest of unit, file, degeneracy flag, and raw range.
pub fn export_fields(dir: &Path, fields: &ReceptiveFields) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (c, h, w) = (fields.raw.c, fields.raw.h, fields.raw.w);
    let per_field = c * h * w;
    let mut manifest = String::from("unit,file,degenerate,raw_min,raw_max\n");
    for j in 0..fields.raw.n {
        let mut bytes = vec![0u8; h * c * w];
        for ch in 0..c {
            let plane = fields.normalized.plane(j, ch);
            for y in 0..h {
                for x in 0..w {
                    bytes[y * (c * w) + ch * w + x] = (plane[y * w + x] * 255.0).round() as u8;
                }
            }
        }
        let name = format!("unit_{j:04}.pgm");
        write_pgm(&dir.join(&name), c * w, h, &bytes)?;
        let src = &fields.raw.data()[j * per_field..(j + 1) * per_field];
        let lo = src.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        manifest.push_str(&format!(
            "{j},{name},{},{lo:.12e},{hi:.12e}\n",
            fields.degenerate[j] as u8
        ));
    }
    fs::write(dir.join("fields.csv"), manifest)?;
    Ok(())
}
