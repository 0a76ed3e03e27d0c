//! Synthetic dataset generators, IDX and FLDS containers, splitting,
//! batching, and the label-noise injector.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Labels;
use crate::error::{Error, Result};
use crate::rng::{seeded_rng, stream_seed};
use crate::tensor::Tensor;

/// Per-feature standardization statistics (computed on a training split).
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Marks which examples carry a corrupted label.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseMask {
    pub flags: Vec<bool>,
}

impl NoiseMask {
    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// An in-memory classification dataset. The noise mask, when present, stays
/// aligned with example indices through splitting and batching.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub norm: Option<NormStats>,
    pub noise_mask: Option<Vec<bool>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.inputs.batch_len() != self.labels.len() {
            return Err(Error::CountMismatch { images: self.inputs.batch_len(), labels: self.labels.len() });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes: self.classes });
        }
        Ok(())
    }

    /// The examples gathered at `indices`, as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            norm: self.norm.clone(),
            noise_mask: self
                .noise_mask
                .as_ref()
                .map(|m| indices.iter().map(|&i| m[i]).collect()),
        }
    }
}

/// One mini-batch. `indices` are positions in the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Labels,
    pub noise_mask: Option<Vec<bool>>,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn hard_labels(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Hard(v) => Some(v),
            Labels::Soft { .. } => None,
        }
    }
}

/// Gaussian blobs: class k centered at `separation * u_k` with unit-variance
/// isotropic noise. Center directions are a fixed deterministic arrangement.
pub fn gen_gaussians(
    classes: usize,
    per_class: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || dim == 0 || separation < 0.0 {
        return Err(Error::InvalidArgument("gaussians need C>=2, n>=1, d>=1, s>=0".into()));
    }
    let mut rng = seeded_rng(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        let mut center = vec![0.0; dim];
        if dim == 1 {
            center[0] = separation * (2.0 * k as f64 / (classes - 1) as f64 - 1.0);
        } else {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
            center[0] = separation * phi.cos();
            center[1] = separation * phi.sin();
        }
        for _ in 0..per_class {
            for c in center.iter().take(dim) {
                let z: f64 = rng.sample(StandardNormal);
                data.push(c + z);
            }
            labels.push(k);
        }
    }
    Ok(Dataset {
        inputs: Tensor::new(vec![n, dim], data)?,
        labels,
        classes,
        norm: None,
        noise_mask: None,
    })
}

/// Interleaved 2-D spiral arms with angular noise `sigma`. With `sigma = 0`
/// the arms are disjoint curves.
pub fn gen_spirals(classes: usize, per_class: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || sigma < 0.0 {
        return Err(Error::InvalidArgument("spirals need C>=2, n>=1, sigma>=0".into()));
    }
    const TURNS: f64 = 1.75;
    let mut rng = seeded_rng(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for k in 0..classes {
        for _ in 0..per_class {
            let t: f64 = rng.gen();
            let r = 0.2 + 0.8 * t;
            let eps: f64 = if sigma > 0.0 {
                sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let angle = 2.0 * std::f64::consts::PI * (TURNS * t + k as f64 / classes as f64) + eps;
            data.push(r * angle.cos());
            data.push(r * angle.sin());
            labels.push(k);
        }
    }
    Ok(Dataset {
        inputs: Tensor::new(vec![n, 2], data)?,
        labels,
        classes,
        norm: None,
        noise_mask: None,
    })
}

/// Replaces `round(fraction * N)` labels (chosen without replacement) with a
/// uniform redraw over all classes; the redraw may coincide with the original
/// label. Inputs are untouched.
pub fn inject_label_noise(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, NoiseMask)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument("noise fraction must be in [0,1]".into()));
    }
    data.validate()?;
    let n = data.len();
    let k = (fraction * n as f64).round() as usize;
    let mut rng = seeded_rng(seed);
    let chosen = crate::curvature::sample_indices(n, k, &mut rng);
    let mut labels = data.labels.clone();
    let mut flags = vec![false; n];
    for &i in &chosen {
        labels[i] = rng.gen_range(0..data.classes);
        flags[i] = true;
    }
    let out = Dataset {
        inputs: data.inputs.clone(),
        labels,
        classes: data.classes,
        norm: data.norm.clone(),
        noise_mask: Some(flags.clone()),
    };
    Ok((out, NoiseMask { flags }))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    let end = at + 4;
    if end > bytes.len() {
        return Err(Error::TruncatedPayload(what.to_string()));
    }
    Ok(u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]))
}

/// Parses the IDX image/label pair: big-endian magic and dimension sizes,
/// raw unsigned bytes. Pixels are scaled to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = fs::read(images_path)?;
    let magic = read_be_u32(&img, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { expected: IDX_IMAGES_MAGIC, got: magic });
    }
    let n = read_be_u32(&img, 4, "image header")? as usize;
    let rows = read_be_u32(&img, 8, "image header")? as usize;
    let cols = read_be_u32(&img, 12, "image header")? as usize;
    let need = 16 + n * rows * cols;
    if img.len() < need {
        return Err(Error::TruncatedPayload(format!(
            "image payload: have {} bytes, need {need}",
            img.len()
        )));
    }

    let lab = fs::read(labels_path)?;
    let lmagic = read_be_u32(&lab, 0, "label header")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { expected: IDX_LABELS_MAGIC, got: lmagic });
    }
    let ln = read_be_u32(&lab, 4, "label header")? as usize;
    if lab.len() < 8 + ln {
        return Err(Error::TruncatedPayload(format!(
            "label payload: have {} bytes, need {}",
            lab.len(),
            8 + ln
        )));
    }
    if n != ln {
        return Err(Error::CountMismatch { images: n, labels: ln });
    }

    let data: Vec<f64> = img[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab[8..8 + ln].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    Ok(Dataset {
        inputs: Tensor::new(vec![n, rows, cols], data)?,
        labels,
        classes,
        norm: None,
        noise_mask: None,
    })
}

/// Writes the dataset back out as an IDX image/label pair. Inputs must be
/// N x rows x cols with values in [0,1]; they are quantized to bytes.
pub fn save_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    data.validate()?;
    let shape = data.inputs.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidArgument("IDX export needs N x rows x cols inputs".into()));
    }
    let (n, rows, cols) = (shape[0], shape[1], shape[2]);
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(n as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for &v in data.inputs.data() {
        img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    fs::write(images_path, img)?;

    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &data.labels {
        if l > 255 {
            return Err(Error::InvalidArgument("IDX labels must fit a byte".into()));
        }
        lab.push(l as u8);
    }
    fs::write(labels_path, lab)?;
    Ok(())
}

const FLDS_MAGIC: &[u8; 4] = b"FLDS";
const FLDS_VERSION: u8 = 1;

/// Writes the documented FLDS container: magic "FLDS", version byte,
/// little-endian u64 N / d / C, raw f64 inputs, u32 labels, optional mask.
pub fn save_flds(data: &Dataset, path: &Path) -> Result<()> {
    data.validate()?;
    let n = data.len();
    let d: usize = data.inputs.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(5 + 24 + n * d * 8 + n * 4 + 1 + n);
    out.extend_from_slice(FLDS_MAGIC);
    out.push(FLDS_VERSION);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    out.extend_from_slice(&(data.classes as u64).to_le_bytes());
    for &v in data.inputs.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &l in &data.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    match &data.noise_mask {
        Some(mask) => {
            out.push(1);
            out.extend(mask.iter().map(|&f| f as u8));
        }
        None => out.push(0),
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a FLDS container written by [`save_flds`].
pub fn load_flds(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.len() < 5 || &bytes[..4] != FLDS_MAGIC {
        let got = if bytes.len() >= 4 {
            u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
        } else {
            0
        };
        return Err(Error::BadMagic { expected: u32::from_be_bytes(*FLDS_MAGIC), got });
    }
    if bytes[4] != FLDS_VERSION {
        return Err(Error::Config(format!("unsupported FLDS version {}", bytes[4])));
    }
    let mut at = 5usize;
    let mut read_u64 = |bytes: &[u8]| -> Result<u64> {
        if at + 8 > bytes.len() {
            return Err(Error::TruncatedPayload("FLDS header".into()));
        }
        let v = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        at += 8;
        Ok(v)
    };
    let n = read_u64(&bytes)? as usize;
    let d = read_u64(&bytes)? as usize;
    let classes = read_u64(&bytes)? as usize;
    let mut at = 5 + 24;
    let need = at + n * d * 8;
    if bytes.len() < need {
        return Err(Error::TruncatedPayload("FLDS inputs".into()));
    }
    let mut data = Vec::with_capacity(n * d);
    while at < need {
        data.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
        at += 8;
    }
    let lneed = at + n * 4;
    if bytes.len() < lneed {
        return Err(Error::TruncatedPayload("FLDS labels".into()));
    }
    let mut labels = Vec::with_capacity(n);
    while at < lneed {
        labels.push(u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize);
        at += 4;
    }
    if at >= bytes.len() {
        return Err(Error::TruncatedPayload("FLDS mask flag".into()));
    }
    let mask = match bytes[at] {
        0 => None,
        1 => {
            if bytes.len() < at + 1 + n {
                return Err(Error::TruncatedPayload("FLDS mask".into()));
            }
            Some(bytes[at + 1..at + 1 + n].iter().map(|&b| b != 0).collect())
        }
        v => return Err(Error::Config(format!("bad FLDS mask flag {v}"))),
    };
    Ok(Dataset {
        inputs: Tensor::new(vec![n, d], data)?,
        labels,
        classes,
        norm: None,
        noise_mask: mask,
    })
}

/// Seeded permutation, contiguous split, and per-feature standardization
/// with statistics computed on the train part and applied to all three.
pub fn split(data: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    data.validate()?;
    let (ft, fv, fs) = fractions;
    if ft <= 0.0 || fv <= 0.0 || fs <= 0.0 {
        return Err(Error::InvalidArgument("split fractions must all be positive".into()));
    }
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("split fractions must sum to 1".into()));
    }
    let n = data.len();
    let n_train = (ft * n as f64).round() as usize;
    let n_val = (fv * n as f64).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::InvalidArgument("split produces an empty part".into()));
    }
    let mut rng = seeded_rng(seed);
    let perm = crate::curvature::sample_indices(n, n, &mut rng);
    let train_idx = &perm[..n_train];
    let val_idx = &perm[n_train..n_train + n_val];
    let test_idx = &perm[n_train + n_val..];

    let mut train = data.subset(train_idx);
    let mut val = data.subset(val_idx);
    let mut test = data.subset(test_idx);

    let stats = feature_stats(&train);
    for part in [&mut train, &mut val, &mut test] {
        standardize(part, &stats);
        part.norm = Some(stats.clone());
    }
    Ok((train, val, test))
}

fn feature_stats(data: &Dataset) -> NormStats {
    let n = data.len();
    let d: usize = data.inputs.shape()[1..].iter().product();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(data.inputs.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (s, (&v, &m)) in var.iter_mut().zip(data.inputs.row(i).iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.iter().map(|s| (s / n as f64).sqrt().max(1e-12)).collect();
    NormStats { mean, std }
}

fn standardize(data: &mut Dataset, stats: &NormStats) {
    let d = stats.mean.len();
    let n = data.len();
    let buf = data.inputs.data_mut();
    for i in 0..n {
        for j in 0..d {
            buf[i * d + j] = (buf[i * d + j] - stats.mean[j]) / stats.std[j];
        }
    }
}

/// Per-epoch seeded shuffle into batches of `batch_size`; the final short
/// batch is kept. Mask bits travel with their examples.
pub fn batch_iter(data: &Dataset, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    data.validate()?;
    let n = data.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!("batch size must be in 1..={n}")));
    }
    let mut rng = seeded_rng(stream_seed(shuffle_seed, "batch-epoch", epoch));
    let perm = crate::curvature::sample_indices(n, n, &mut rng);
    let mut out = Vec::with_capacity(n.div_ceil(batch_size));
    for chunk in perm.chunks(batch_size) {
        out.push(Batch {
            inputs: data.inputs.gather_rows(chunk),
            labels: Labels::Hard(chunk.iter().map(|&i| data.labels[i]).collect()),
            noise_mask: data
                .noise_mask
                .as_ref()
                .map(|m| chunk.iter().map(|&i| m[i]).collect()),
            indices: chunk.to_vec(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussians_deterministic_and_balanced() {
        let a = gen_gaussians(3, 10, 2, 4.0, 5).unwrap();
        let b = gen_gaussians(3, 10, 2, 4.0, 5).unwrap();
        assert_eq!(a, b);
        for k in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 10);
        }
        assert_ne!(a, gen_gaussians(3, 10, 2, 4.0, 6).unwrap());
    }

    #[test]
    fn spirals_balanced_and_deterministic() {
        let a = gen_spirals(2, 25, 0.1, 9).unwrap();
        assert_eq!(a.len(), 50);
        for k in 0..2 {
            assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 25);
        }
        assert_eq!(a, gen_spirals(2, 25, 0.1, 9).unwrap());
    }

    #[test]
    fn spirals_zero_noise_arms_disjoint() {
        // same radius on different arms implies distinct angles; points of
        // different classes never coincide.
        let d = gen_spirals(2, 200, 0.0, 3).unwrap();
        for i in 0..d.len() {
            for j in (i + 1)..d.len() {
                if d.labels[i] != d.labels[j] {
                    let a = d.inputs.row(i);
                    let b = d.inputs.row(j);
                    let dist = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                    assert!(dist > 1e-6);
                }
            }
        }
    }

    #[test]
    fn spirals_rotation_congruence() {
        let d = gen_spirals(3, 20, 0.05, 11).unwrap();
        let phi = 0.7f64;
        let (c, s) = (phi.cos(), phi.sin());
        let rotated: Vec<(f64, f64)> = (0..d.len())
            .map(|i| {
                let r = d.inputs.row(i);
                (c * r[0] - s * r[1], s * r[0] + c * r[1])
            })
            .collect();
        // pairwise distances are preserved by the rotation
        for i in (0..d.len()).step_by(7) {
            for j in (0..d.len()).step_by(11) {
                let a = d.inputs.row(i);
                let b = d.inputs.row(j);
                let orig = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                let rot = ((rotated[i].0 - rotated[j].0).powi(2)
                    + (rotated[i].1 - rotated[j].1).powi(2))
                .sqrt();
                assert!((orig - rot).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn noise_zero_fraction_identity() {
        let d = gen_gaussians(4, 5, 3, 2.0, 1).unwrap();
        let (noisy, mask) = inject_label_noise(&d, 0.0, 7).unwrap();
        assert_eq!(noisy.labels, d.labels);
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn noise_mask_popcount_matches_round() {
        let d = gen_gaussians(2, 100, 2, 2.0, 1).unwrap();
        for fraction in [0.25, 0.5] {
            let (_, mask) = inject_label_noise(&d, fraction, 3).unwrap();
            assert_eq!(mask.count(), (fraction * 200.0).round() as usize);
        }
    }

    #[test]
    fn noise_leaves_inputs_untouched() {
        let d = gen_gaussians(3, 20, 2, 2.0, 2).unwrap();
        let (noisy, _) = inject_label_noise(&d, 0.5, 4).unwrap();
        assert_eq!(noisy.inputs, d.inputs);
    }

    #[test]
    fn full_noise_coincidence_rate() {
        // fraction 1, C=10, N=10^4: about 10% of redraws coincide with the
        // original label (within one point).
        let d = gen_gaussians(10, 1000, 2, 1.0, 8).unwrap();
        let (noisy, mask) = inject_label_noise(&d, 1.0, 9).unwrap();
        assert_eq!(mask.count(), 10_000);
        let coincide = d
            .labels
            .iter()
            .zip(&noisy.labels)
            .filter(|(a, b)| a == b)
            .count() as f64
            / 10_000.0;
        assert!((coincide - 0.1).abs() < 0.01, "coincidence rate {coincide}");
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = gen_gaussians(2, 50, 2, 3.0, 1).unwrap();
        let (tr, va, te) = split(&d, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (80, 10, 10));
        let (tr2, ..) = split(&d, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!(tr, tr2);
        assert!(split(&d, (1.0, 0.0, 0.0), 5).is_err());
        assert!(split(&d, (0.5, 0.2, 0.2), 5).is_err());
    }

    #[test]
    fn split_normalizes_with_train_stats() {
        let d = gen_gaussians(2, 100, 3, 5.0, 2).unwrap();
        let (tr, va, te) = split(&d, (0.6, 0.2, 0.2), 3).unwrap();
        let stats = tr.norm.clone().unwrap();
        assert_eq!(va.norm.as_ref(), Some(&stats));
        assert_eq!(te.norm.as_ref(), Some(&stats));
        // train features are standardized: mean ~0, std ~1
        let n = tr.len();
        for j in 0..3 {
            let col: Vec<f64> = (0..n).map(|i| tr.inputs.row(i)[j]).collect();
            let m = crate::stats::mean(&col);
            let s = crate::stats::sample_std(&col);
            assert!(m.abs() < 1e-9, "mean {m}");
            assert!((s - 1.0).abs() < 0.05, "std {s}");
        }
    }

    #[test]
    fn mask_survives_split() {
        let d = gen_gaussians(2, 50, 2, 3.0, 4).unwrap();
        let (noisy, _) = inject_label_noise(&d, 0.3, 5).unwrap();
        let (tr, va, te) = split(&noisy, (0.6, 0.2, 0.2), 6).unwrap();
        let total = [&tr, &va, &te]
            .iter()
            .map(|p| p.noise_mask.as_ref().unwrap().iter().filter(|&&f| f).count())
            .sum::<usize>();
        assert_eq!(total, 30);
    }

    #[test]
    fn batches_cover_every_example_once() {
        let d = gen_gaussians(2, 5, 2, 1.0, 7).unwrap();
        let batches = batch_iter(&d, 3, 11, 0).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batch_epochs_differ_but_are_reproducible() {
        let d = gen_gaussians(2, 20, 2, 1.0, 7).unwrap();
        let e0 = batch_iter(&d, 8, 11, 0).unwrap();
        let e0b = batch_iter(&d, 8, 11, 0).unwrap();
        let e1 = batch_iter(&d, 8, 11, 1).unwrap();
        assert_eq!(e0, e0b);
        assert_ne!(
            e0.iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>(),
            e1.iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>()
        );
        let full = batch_iter(&d, 40, 11, 0).unwrap();
        assert_eq!(full.len(), 1);
    }

    #[test]
    fn batch_mask_alignment() {
        let d = gen_gaussians(2, 20, 2, 1.0, 7).unwrap();
        let (noisy, mask) = inject_label_noise(&d, 0.25, 8).unwrap();
        let batches = batch_iter(&noisy, 7, 9, 3).unwrap();
        for b in &batches {
            let bm = b.noise_mask.as_ref().unwrap();
            for (pos, &i) in b.indices.iter().enumerate() {
                assert_eq!(bm[pos], mask.flags[i]);
            }
        }
    }

    #[test]
    fn idx_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        // hand-crafted bytes: 2 images of 2x2
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&2u32.to_be_bytes());
        bytes.extend_from_slice(&[0, 255, 128, 7, 9, 200, 50, 255]);
        fs::write(&img, &bytes).unwrap();
        let mut lbytes = Vec::new();
        lbytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbytes.extend_from_slice(&2u32.to_be_bytes());
        lbytes.extend_from_slice(&[1, 0]);
        fs::write(&lab, &lbytes).unwrap();

        let d = load_idx(&img, &lab).unwrap();
        assert_eq!(d.inputs.shape(), &[2, 2, 2]);
        assert_eq!(d.labels, vec![1, 0]);
        assert!((d.inputs.data()[1] - 1.0).abs() < 1e-12);
        assert!((d.inputs.data()[2] - 128.0 / 255.0).abs() < 1e-12);

        let img2 = dir.path().join("img2.idx");
        let lab2 = dir.path().join("lab2.idx");
        save_idx(&d, &img2, &lab2).unwrap();
        assert_eq!(fs::read(&img2).unwrap(), bytes);
        assert_eq!(fs::read(&lab2).unwrap(), lbytes);
    }

    #[test]
    fn idx_bad_magic_and_truncation_reported_distinctly() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        let mut lbytes = Vec::new();
        lbytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        lbytes.extend_from_slice(&1u32.to_be_bytes());
        lbytes.push(0);
        fs::write(&lab, &lbytes).unwrap();

        let mut bad = Vec::new();
        bad.extend_from_slice(&0u32.to_be_bytes());
        bad.extend_from_slice(&1u32.to_be_bytes());
        bad.extend_from_slice(&1u32.to_be_bytes());
        bad.extend_from_slice(&1u32.to_be_bytes());
        bad.push(3);
        fs::write(&img, &bad).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::BadMagic { .. })));

        let mut trunc = Vec::new();
        trunc.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        trunc.extend_from_slice(&2u32.to_be_bytes());
        trunc.extend_from_slice(&2u32.to_be_bytes());
        trunc.extend_from_slice(&2u32.to_be_bytes());
        trunc.extend_from_slice(&[0; 7]); // one byte short
        fs::write(&img, &trunc).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::TruncatedPayload(_))));

        let mut ok_img = Vec::new();
        ok_img.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        ok_img.extend_from_slice(&2u32.to_be_bytes());
        ok_img.extend_from_slice(&1u32.to_be_bytes());
        ok_img.extend_from_slice(&1u32.to_be_bytes());
        ok_img.extend_from_slice(&[1, 2]);
        fs::write(&img, &ok_img).unwrap();
        assert!(matches!(load_idx(&img, &lab), Err(Error::CountMismatch { .. })));
    }

    #[test]
    fn flds_roundtrip_with_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.flds");
        let d = gen_gaussians(3, 4, 2, 2.0, 1).unwrap();
        let (noisy, _) = inject_label_noise(&d, 0.5, 2).unwrap();
        save_flds(&noisy, &path).unwrap();
        let back = load_flds(&path).unwrap();
        assert_eq!(back.inputs.data(), noisy.inputs.data());
        assert_eq!(back.labels, noisy.labels);
        assert_eq!(back.classes, noisy.classes);
        assert_eq!(back.noise_mask, noisy.noise_mask);
    }
}
