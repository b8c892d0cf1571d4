//! Datasets: synthetic partial-domain benchmarks, IDX digit files and
//! restriction of a target set to a partial label space.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::Domain;
use crate::matrix::Matrix;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Matrix<f64>,
    pub labels: Vec<usize>,
    /// Size of the label space the ids index into.
    pub classes: usize,
    pub domain: Domain,
}

impl LabeledDataset {
    pub fn new(samples: Matrix<f64>, labels: Vec<usize>, classes: usize, domain: Domain) -> Result<Self> {
        if samples.rows() != labels.len() {
            return Err(Error::Shape {
                op: "LabeledDataset::new",
                left: samples.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::contract(format!("label {bad} outside [0, {classes})")));
        }
        if !samples.is_finite() {
            return Err(Error::contract("dataset features must be finite"));
        }
        Ok(LabeledDataset {
            samples,
            labels,
            classes,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    /// Sorted distinct labels present.
    pub fn present_classes(&self) -> Vec<usize> {
        self.labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }
}

/// A source set over all classes and a target set over a subset of them.
#[derive(Clone, Debug, PartialEq)]
pub struct PdaTask {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub shared: Vec<usize>,
    pub outliers: Vec<usize>,
}

impl PdaTask {
    /// Shared classes are those present in the target; the rest of the source
    /// label space are outliers.
    pub fn new(source: LabeledDataset, target: LabeledDataset) -> Result<Self> {
        if source.dim() != target.dim() {
            return Err(Error::Shape {
                op: "PdaTask::new",
                left: source.samples.shape(),
                right: target.samples.shape(),
            });
        }
        if source.classes != target.classes {
            return Err(Error::contract(format!(
                "source has {} classes but target indexes {}",
                source.classes, target.classes
            )));
        }
        let shared = target.present_classes();
        let outliers = (0..source.classes).filter(|c| !shared.contains(c)).collect();
        Ok(PdaTask {
            source: source.with_domain(Domain::Source),
            target: target.with_domain(Domain::Target),
            shared,
            outliers,
        })
    }

    pub fn classes(&self) -> usize {
        self.source.classes
    }

    pub fn dim(&self) -> usize {
        self.source.dim()
    }
}

/// Parameters of the synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub shared: usize,
    pub per_class: usize,
    pub sigma: f64,
    pub rotation_deg: f64,
    pub translation: [f64; 2],
    /// Pure-noise dimensions appended after the two informative ones.
    pub extra_dims: usize,
    pub radius: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Six source classes, three shared, 200 samples per class, σ = 0.6,
    /// target rotated by 25° and translated by (1.5, 0).
    pub fn reference(seed: u64) -> Self {
        SyntheticSpec {
            classes: 6,
            shared: 3,
            per_class: 200,
            sigma: 0.6,
            rotation_deg: 25.0,
            translation: [1.5, 0.0],
            extra_dims: 0,
            radius: 5.0,
            seed,
        }
    }

    /// Center of class `k` on the circle.
    pub fn center(&self, k: usize) -> [f64; 2] {
        let angle = 2.0 * std::f64::consts::PI * k as f64 / self.classes as f64;
        [self.radius * angle.cos(), self.radius * angle.sin()]
    }
}

/// Source classes are isotropic Gaussians around equally spaced points on a
/// circle; the target draws from the first `shared` class generators and
/// applies a rotation about the origin followed by a translation.
pub fn gen_synthetic_pda(spec: &SyntheticSpec) -> Result<PdaTask> {
    if spec.shared == 0 || spec.shared > spec.classes {
        return Err(Error::contract(format!(
            "need 1 ≤ shared ({}) ≤ classes ({})",
            spec.shared, spec.classes
        )));
    }
    if spec.per_class == 0 {
        return Err(Error::contract("per_class must be at least 1"));
    }
    if !(spec.sigma > 0.0) || !spec.sigma.is_finite() {
        return Err(Error::contract(format!("noise sigma {} must be positive", spec.sigma)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::contract(e.to_string()))?;
    let dim = 2 + spec.extra_dims;
    let (sin, cos) = spec.rotation_deg.to_radians().sin_cos();

    let mut draw = |classes: usize, shifted: bool| -> (Vec<f64>, Vec<usize>) {
        let mut data = Vec::with_capacity(classes * spec.per_class * dim);
        let mut labels = Vec::with_capacity(classes * spec.per_class);
        for k in 0..classes {
            let [cx, cy] = spec.center(k);
            for _ in 0..spec.per_class {
                let x = cx + noise.sample(&mut rng);
                let y = cy + noise.sample(&mut rng);
                if shifted {
                    data.push(cos * x - sin * y + spec.translation[0]);
                    data.push(sin * x + cos * y + spec.translation[1]);
                } else {
                    data.push(x);
                    data.push(y);
                }
                for _ in 0..spec.extra_dims {
                    data.push(noise.sample(&mut rng));
                }
                labels.push(k);
            }
        }
        (data, labels)
    };

    let (src, src_labels) = draw(spec.classes, false);
    let (tgt, tgt_labels) = draw(spec.shared, true);
    let source = LabeledDataset::new(
        Matrix::from_vec(src_labels.len(), dim, src)?,
        src_labels,
        spec.classes,
        Domain::Source,
    )?;
    let target = LabeledDataset::new(
        Matrix::from_vec(tgt_labels.len(), dim, tgt)?,
        tgt_labels,
        spec.classes,
        Domain::Target,
    )?;
    PdaTask::new(source, target)
}

/// Keeps only samples whose label is in `keep`. Label ids are not remapped.
pub fn make_partial_target(ds: &LabeledDataset, keep: &[usize]) -> Result<LabeledDataset> {
    if keep.is_empty() {
        return Err(Error::contract("keep set is empty"));
    }
    if let Some(&bad) = keep.iter().find(|&&k| k >= ds.classes) {
        return Err(Error::contract(format!("keep class {bad} outside [0, {})", ds.classes)));
    }
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| keep.contains(&ds.labels[i])).collect();
    if idx.is_empty() {
        return Err(Error::contract(format!("no samples with labels in {keep:?}")));
    }
    Ok(LabeledDataset {
        samples: ds.samples.select_rows(&idx),
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        classes: ds.classes,
        domain: ds.domain,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            kind: self.kind,
            offset: self.pos,
            detail: "truncated header".into(),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
    }

    fn body(&mut self, len: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(Error::Format {
                kind: self.kind,
                offset: self.bytes.len(),
                detail: format!("expected {len} data bytes, found {available}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }
}

/// Raw IDX image tensor: `count × rows × cols` unsigned bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let mut r = Reader {
        bytes,
        pos: 0,
        kind: "IDX image",
    };
    let magic = r.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            kind: "IDX image",
            offset: 0,
            detail: format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let len = count.checked_mul(rows).and_then(|v| v.checked_mul(cols)).ok_or_else(|| Error::Format {
        kind: "IDX image",
        offset: 4,
        detail: format!("dimensions {count}×{rows}×{cols} overflow"),
    })?;
    let pixels = r.body(len)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        kind: "IDX label",
    };
    let magic = r.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            kind: "IDX label",
            offset: 0,
            detail: format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = r.u32()? as usize;
    Ok(r.body(count)?.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Digit classes in the IDX label files.
pub const DIGIT_CLASSES: usize = 10;

/// Reads an IDX image/label pair, scaling pixels to `[0, 1]` and flattening
/// each image into a row.
pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let img_bytes = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lbl_bytes = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    idx_dataset(&parse_idx_images(&img_bytes)?, &parse_idx_labels(&lbl_bytes)?)
}

pub fn idx_dataset(images: &IdxImages, labels: &[u8]) -> Result<LabeledDataset> {
    if images.count != labels.len() {
        return Err(Error::Format {
            kind: "IDX label",
            offset: 4,
            detail: format!("{} labels for {} images", labels.len(), images.count),
        });
    }
    let classes = labels
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(0)
        .max(DIGIT_CLASSES);
    let dim = images.rows * images.cols;
    let data = images.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    LabeledDataset::new(
        Matrix::from_vec(images.count, dim, data)?,
        labels.iter().map(|&l| l as usize).collect(),
        classes,
        Domain::Source,
    )
}

/// Bilinear resize of flattened `from.0 × from.1` images to `to.0 × to.1`
/// (half-pixel centers, edge clamped).
pub fn resize_bilinear(ds: &LabeledDataset, from: (usize, usize), to: (usize, usize)) -> Result<LabeledDataset> {
    if ds.dim() != from.0 * from.1 {
        return Err(Error::Shape {
            op: "resize_bilinear",
            left: ds.samples.shape(),
            right: from,
        });
    }
    let (sh, sw) = (from.0 as f64 / to.0 as f64, from.1 as f64 / to.1 as f64);
    let src_coord = |dst: usize, scale: f64, len: usize| {
        let x = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = x.floor() as usize;
        (lo, (lo + 1).min(len - 1), x - lo as f64)
    };
    let mut out = Matrix::zeros(ds.len(), to.0 * to.1);
    for (n, img) in ds.samples.iter_rows().enumerate() {
        let px = |r: usize, c: usize| img[r * from.1 + c];
        let dst = out.row_mut(n);
        for i in 0..to.0 {
            let (r0, r1, fy) = src_coord(i, sh, from.0);
            for j in 0..to.1 {
                let (c0, c1, fx) = src_coord(j, sw, from.1);
                let top = px(r0, c0) * (1.0 - fx) + px(r0, c1) * fx;
                let bottom = px(r1, c0) * (1.0 - fx) + px(r1, c1) * fx;
                dst[i * to.1 + j] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    LabeledDataset::new(out, ds.labels.clone(), ds.classes, ds.domain)
}

/// Writes a task as CSV rows `x0..x{d-1}, label, domain`.
pub fn export_task_csv(task: &PdaTask, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = (0..task.dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    header.push("domain".into());
    w.write_record(&header).map_err(csv_err)?;
    for (ds, tag) in [(&task.source, "source"), (&task.target, "target")] {
        for (row, &label) in ds.samples.iter_rows().zip(&ds.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            rec.push(tag.into());
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
