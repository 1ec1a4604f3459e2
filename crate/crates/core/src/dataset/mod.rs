//! Dataset curation: static-intro filtering, feature-space categorization
//! into test/train/val splits, and LR/HR pair construction.

mod bicubic;
mod cluster;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::luma;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use bicubic::{bicubic_resize, keys, Bicubic, KEYS_A};
pub use cluster::{kmeans, pca_project, KMeans, Pca};

/// Default static-intro threshold: mean absolute luma difference.
pub const DEFAULT_TAU: f64 = 2.0 / 255.0;
pub const DEFAULT_CLUSTERS: usize = 20;
/// Embedding dimensions kept after PCA.
pub const EMBEDDING_DIMS: usize = 3;
pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Discard,
}

fn mean_abs_luma_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("scene_static_filter", "shape", format!("{} vs {}", a.shape(), b.shape())));
    }
    let la = luma(a)?;
    let lb = luma(b)?;
    let (mut total, mut n) = (0.0, 0usize);
    for (pa, pb) in la.iter().zip(&lb) {
        for (x, y) in pa.data.iter().zip(&pb.data) {
            total += (x - y).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::shape("scene_static_filter", "h/w", "empty frames"));
    }
    Ok(total / n as f64)
}

/// Discards a clip whose 100th and 150th frames both differ from the first
/// by less than `tau` in mean absolute luma.
pub fn scene_static_filter<T: Scalar>(
    first: &Tensor<T>,
    f100: &Tensor<T>,
    f150: &Tensor<T>,
    tau: f64,
) -> Result<Verdict> {
    let d100 = mean_abs_luma_diff(first, f100)?;
    let d150 = mean_abs_luma_diff(first, f150)?;
    Ok(if d100 < tau && d150 < tau {
        Verdict::Discard
    } else {
        Verdict::Keep
    })
}

/// Per-video descriptors used for categorization.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatureRecord {
    pub id: String,
    pub si: f64,
    pub ti: f64,
    pub bitrate: f64,
    pub quality: f64,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Test,
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Test => "test",
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(Split::Test),
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

pub type SplitAssignment = BTreeMap<String, Split>;

fn zscore(col: &mut [f64]) {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    for v in col.iter_mut() {
        *v = if sd > 0.0 { (*v - mean) / sd } else { 0.0 };
    }
}

/// Clustering features: z-scored `si, ti, bitrate, quality` followed by the
/// leading principal coordinates of the embeddings.
pub fn feature_matrix(records: &[VideoFeatureRecord]) -> Result<DMatrix<f64>> {
    let n = records.len();
    let d = records.first().map_or(0, |r| r.embedding.len());
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::invalid(format!("duplicate id `{}`", r.id)));
        }
        if r.embedding.len() != d {
            return Err(Error::invalid(format!(
                "record `{}` has a {}-dim embedding, expected {d}",
                r.id,
                r.embedding.len()
            )));
        }
        let scalars = [r.si, r.ti, r.bitrate, r.quality];
        if !scalars.iter().chain(&r.embedding).all(|v| v.is_finite()) {
            return Err(Error::invalid(format!("record `{}` has a non-finite feature", r.id)));
        }
    }
    let mut cols: Vec<Vec<f64>> = vec![
        records.iter().map(|r| r.si).collect(),
        records.iter().map(|r| r.ti).collect(),
        records.iter().map(|r| r.bitrate).collect(),
        records.iter().map(|r| r.quality).collect(),
    ];
    for c in &mut cols {
        zscore(c);
    }
    let k = EMBEDDING_DIMS.min(d).min(n.saturating_sub(1));
    let proj = if k > 0 {
        let emb = DMatrix::from_fn(n, d, |i, j| records[i].embedding[j]);
        Some(pca_project(&emb, k)?)
    } else {
        None
    };
    Ok(DMatrix::from_fn(n, 4 + k, |i, j| {
        if j < 4 {
            cols[j][i]
        } else {
            proj.as_ref().unwrap()[(i, j - 4)]
        }
    }))
}

/// Clusters the records into `k` groups, sends the record nearest each
/// centroid to the test split (smallest id on distance ties), and splits the
/// rest 10:1 into train and val after a seeded shuffle. Val receives
/// `ceil(rest / 11)` records.
pub fn categorize(records: &[VideoFeatureRecord], k: usize, seed: u64) -> Result<SplitAssignment> {
    if records.len() < k {
        return Err(Error::invalid(format!("categorize: {} records for {k} clusters", records.len())));
    }
    let x = feature_matrix(records)?;
    let km = kmeans(&x, k, seed, KMEANS_MAX_ITER)?;
    let mut best: Vec<Option<(f64, &str)>> = vec![None; k];
    for (i, r) in records.iter().enumerate() {
        let l = km.labels[i];
        let d: f64 = x
            .row(i)
            .iter()
            .zip(km.centroids.row(l).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let better = match best[l] {
            None => true,
            Some((bd, bid)) => d < bd || (d == bd && r.id.as_str() < bid),
        };
        if better {
            best[l] = Some((d, r.id.as_str()));
        }
    }
    let mut out = SplitAssignment::new();
    for (_, id) in best.iter().flatten() {
        out.insert(id.to_string(), Split::Test);
    }
    let mut rest: Vec<&str> = records
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !out.contains_key(*id))
        .collect();
    rest.sort_unstable();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = rest.len().div_ceil(11);
    for (i, id) in rest.into_iter().enumerate() {
        out.insert(id.to_string(), if i < n_val { Split::Val } else { Split::Train });
    }
    Ok(out)
}

/// Reads records from CSV with header `id,si,ti,bitrate,quality,e0,..,e{d-1}`.
pub fn read_feature_records(path: impl AsRef<Path>) -> Result<Vec<VideoFeatureRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(Error::at_path(path))?;
    parse_feature_records(file)
}

pub fn parse_feature_records(input: impl std::io::Read) -> Result<Vec<VideoFeatureRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let header = rdr.headers()?.clone();
    let fixed = ["id", "si", "ti", "bitrate", "quality"];
    for (i, want) in fixed.iter().enumerate() {
        if header.get(i) != Some(want) {
            return Err(Error::Record {
                line: 1,
                reason: format!("column {i} should be `{want}`"),
            });
        }
    }
    for (j, h) in header.iter().skip(fixed.len()).enumerate() {
        if h != format!("e{j}") {
            return Err(Error::Record {
                line: 1,
                reason: format!("embedding column `{h}` should be `e{j}`"),
            });
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            let field = rec.get(i).unwrap_or("");
            let v: f64 = field.parse().map_err(|_| Error::Record {
                line,
                reason: format!("`{}` is not a number: {field:?}", header.get(i).unwrap_or("?")),
            })?;
            if !v.is_finite() {
                return Err(Error::Record {
                    line,
                    reason: format!("`{}` is not finite", header.get(i).unwrap_or("?")),
                });
            }
            Ok(v)
        };
        out.push(VideoFeatureRecord {
            id: rec.get(0).unwrap_or("").to_string(),
            si: num(1)?,
            ti: num(2)?,
            bitrate: num(3)?,
            quality: num(4)?,
            embedding: (fixed.len()..header.len()).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

pub fn write_feature_records(path: impl AsRef<Path>, records: &[VideoFeatureRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let d = records.first().map_or(0, |r| r.embedding.len());
    let mut header: Vec<String> = ["id", "si", "ti", "bitrate", "quality"].map(String::from).to_vec();
    header.extend((0..d).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.id.clone(),
            r.si.to_string(),
            r.ti.to_string(),
            r.bitrate.to_string(),
            r.quality.to_string(),
        ];
        row.extend(r.embedding.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `id,split` rows in id order.
pub fn write_split(path: impl AsRef<Path>, split: &SplitAssignment) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["id", "split"])?;
    for (id, s) in split {
        w.write_record([id.as_str(), s.name()])?;
    }
    w.flush()?;
    Ok(())
}

/// An aligned low/high resolution pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair<T> {
    pub id: String,
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
}

/// Where the low-resolution half of each pair comes from.
#[derive(Clone, Debug)]
pub enum LrSource<T> {
    /// Bicubic downscale of the HR image, after cropping HR to a multiple of `r`.
    Synthetic,
    /// Externally captured LR images, matched to HR by id.
    Real(Vec<(String, Tensor<T>)>),
}

pub fn make_pairs<T: Scalar>(hr: Vec<(String, Tensor<T>)>, r: usize, source: LrSource<T>) -> Result<Vec<Pair<T>>> {
    if r == 0 {
        return Err(Error::invalid("scale must be >= 1"));
    }
    match source {
        LrSource::Synthetic => hr
            .into_iter()
            .map(|(id, hr)| {
                let s = hr.shape();
                let (h, w) = (s.h / r * r, s.w / r * r);
                if h == 0 || w == 0 {
                    return Err(Error::invalid(format!("`{id}`: {}x{} is smaller than the scale {r}", s.h, s.w)));
                }
                let hr = if (h, w) == (s.h, s.w) { hr } else { hr.crop(0, 0, h, w)? };
                let lr = bicubic_resize(&hr, h / r, w / r)?;
                Ok(Pair { id, lr, hr })
            })
            .collect(),
        LrSource::Real(lr) => {
            let mut lr: BTreeMap<String, Tensor<T>> = lr.into_iter().collect();
            hr.into_iter()
                .map(|(id, hr)| {
                    let l = lr
                        .remove(&id)
                        .ok_or_else(|| Error::invalid(format!("`{id}` has no LR counterpart")))?;
                    let (hs, ls) = (hr.shape(), l.shape());
                    if ls.n != hs.n || ls.c != hs.c || ls.h * r != hs.h || ls.w * r != hs.w {
                        return Err(Error::invalid(format!("`{id}`: LR {ls} is not HR {hs} / {r}")));
                    }
                    Ok(Pair { id, lr: l, hr })
                })
                .collect()
        }
    }
}
