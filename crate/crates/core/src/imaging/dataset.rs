//! Dataset manifests and sample loading.
//!
//! A sample source is one of
//! - `synth:<seed>`: a generated scene with its annotations,
//! - `<path>`: a PNG/PPM file (four channels read as RGB+IR),
//! - `<rgb path>::<ir path>`: separate RGB and single-channel IR files.
//!
//! Relative paths resolve against the manifest's directory. A file sample
//! may carry annotations in a JSON sidecar next to it (`scene.png` →
//! `scene.json`).

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::synth::{synth_pair, Annotations};
use super::{io, resize_bilinear, Modality, MultimodalImage};
use crate::error::{Error, Result};
use crate::exec::{try_map_ordered, Execution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub source: String,
    pub split: Split,
    pub modality: Modality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
}

const SYNTH_PREFIX: &str = "synth:";

impl DatasetManifest {
    /// A synthetic corpus; per-sample scene seeds are drawn from `seed`.
    pub fn synthetic(seed: u64, n_train: usize, n_test: usize, modality: Modality) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(7);
        let mut samples = Vec::with_capacity(n_train + n_test);
        for i in 0..n_train + n_test {
            let (split, tag) = if i < n_train { (Split::Train, "train") } else { (Split::Test, "test") };
            samples.push(SampleRecord {
                id: format!("{tag}-{i:05}"),
                source: format!("{SYNTH_PREFIX}{}", rng.gen::<u64>()),
                split,
                modality,
            });
        }
        Self { seed, samples }
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for s in &self.samples {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::Data(format!("sample id `{}` appears more than once", s.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: MultimodalImage,
    pub annotations: Option<Annotations>,
}

fn sidecar(path: &Path) -> Result<Option<Annotations>> {
    let p = path.with_extension("json");
    if !p.is_file() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
}

/// Loads one sample at `height`x`width`, resizing file images that differ.
pub fn load_sample(record: &SampleRecord, base: &Path, height: usize, width: usize) -> Result<Sample> {
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let (image, annotations) = if let Some(seed) = record.source.strip_prefix(SYNTH_PREFIX) {
        let seed = seed
            .parse::<u64>()
            .map_err(|_| Error::Data(format!("sample `{}`: bad synthetic seed `{seed}`", record.id)))?;
        let (img, ann) = synth_pair(seed, height, width)?;
        (img, Some(ann))
    } else if let Some((rgb, ir)) = record.source.split_once("::") {
        let rgb = resolve(rgb);
        let img = io::load_pair(&rgb, &resolve(ir))?;
        (img, sidecar(&rgb)?)
    } else {
        let p = resolve(&record.source);
        (io::load_multimodal(&p)?, sidecar(&p)?)
    };
    let image = match (record.modality, image.modality()) {
        (Modality::Rgb, _) => image.rgb(),
        (Modality::RgbIr, Modality::RgbIr) => image,
        (Modality::RgbIr, Modality::Rgb) => {
            return Err(Error::Data(format!("sample `{}` is tagged rgb_ir but has no IR channel", record.id)));
        }
    };
    let image = if (image.height(), image.width()) == (height, width) {
        image
    } else {
        if annotations.is_some() {
            return Err(Error::Data(format!(
                "annotated sample `{}` is {}x{}, expected {height}x{width}",
                record.id,
                image.height(),
                image.width()
            )));
        }
        resize_bilinear(&image, height, width)?
    };
    Ok(Sample {
        id: record.id.clone(),
        image,
        annotations,
    })
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Loads every record in manifest order.
    pub fn load(manifest: &DatasetManifest, base: &Path, height: usize, width: usize, exec: Execution) -> Result<Self> {
        manifest.validate()?;
        let load = |split| -> Result<Vec<Sample>> {
            let recs: Vec<&SampleRecord> = manifest.records(split).collect();
            try_map_ordered(exec, &recs, |_, r| load_sample(r, base, height, width))
        };
        let ds = Self {
            train: load(Split::Train)?,
            val: load(Split::Val)?,
            test: load(Split::Test)?,
        };
        if ds.train.is_empty() {
            return Err(Error::Data("dataset has no training samples".into()));
        }
        Ok(ds)
    }

    /// Same samples with the IR channel dropped.
    pub fn rgb_only(&self) -> Self {
        let strip = |v: &[Sample]| {
            v.iter()
                .map(|s| Sample {
                    image: s.image.rgb(),
                    ..s.clone()
                })
                .collect()
        };
        Self {
            train: strip(&self.train),
            val: strip(&self.val),
            test: strip(&self.test),
        }
    }

    pub fn modality(&self) -> Modality {
        self.train[0].image.modality()
    }
}

/// Per-channel mean and standard deviation over a set of images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn compute(images: &[&MultimodalImage]) -> Result<Self> {
        let first = images.first().ok_or_else(|| Error::Data("no images to compute statistics".into()))?;
        let c = first.channels();
        let (mut sum, mut sq, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
        for img in images {
            if img.channels() != c {
                return Err(Error::Data("mixed channel counts".into()));
            }
            for px in img.pixels().chunks_exact(c) {
                for k in 0..c {
                    sum[k] += px[k];
                    sq[k] += px[k] * px[k];
                }
            }
            n += img.pixels().len() / c;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n as f64 - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(Self { mean, std })
    }

    /// Standardizes a channel-last buffer in place.
    pub fn apply(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            let k = i % c;
            *v = (*v - self.mean[k]) / self.std[k];
        }
    }
}
