//! Dataset directories: `manifest.json` plus one TNSR file per modality and
//! sample.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{generate_sample, Sample, SceneConfig, IGNORE};
use super::tnsr::{read_tensor_file, write_tensor_file, StoredTensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub meta_train: Vec<usize>,
    pub meta_val: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Contiguous split: the last two sixths are val and test, the rest is
    /// train; the final fifth of train is meta-val and the remainder
    /// meta-train.
    pub fn assign(n: usize) -> Self {
        let held = n / 6;
        let n_train = n - 2 * held;
        let n_meta_val = n_train / 5;
        let n_meta_train = n_train - n_meta_val;
        Self {
            train: (0..n_train).collect(),
            meta_train: (0..n_meta_train).collect(),
            meta_val: (n_meta_train..n_train).collect(),
            val: (n_train..n_train + held).collect(),
            test: (n_train + held..n).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleFiles {
    pub img: String,
    pub seg: String,
    pub dep: String,
    pub nrm: String,
}

impl SampleFiles {
    pub fn for_index(idx: usize) -> Self {
        Self {
            img: format!("{idx}_img.tnsr"),
            seg: format!("{idx}_seg.tnsr"),
            dep: format!("{idx}_dep.tnsr"),
            nrm: format!("{idx}_nrm.tnsr"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub splits: Splits,
    pub files: Vec<SampleFiles>,
}

impl Manifest {
    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            h: self.h,
            w: self.w,
            classes: self.k,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[usize]> {
        let s = &self.manifest.splits;
        Ok(match name {
            "train" => &s.train,
            "meta_train" => &s.meta_train,
            "meta_val" => &s.meta_val,
            "val" => &s.val,
            "test" => &s.test,
            _ => return Err(Error::Config(format!("unknown split `{name}`"))),
        })
    }
}

/// Generates `n` scenes in memory.
pub fn gen_synthetic(seed: u64, n: usize, scene: SceneConfig) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    if scene.h == 0 || scene.w == 0 || scene.classes == 0 || scene.classes > IGNORE as usize {
        return Err(Error::Config(format!("invalid scene configuration {scene:?}")));
    }
    let samples = (0..n).map(|i| generate_sample(seed, i, &scene)).collect();
    let manifest = Manifest {
        n,
        h: scene.h,
        w: scene.w,
        k: scene.classes,
        seed,
        splits: Splits::assign(n),
        files: (0..n).map(SampleFiles::for_index).collect(),
    };
    Ok(Dataset { manifest, samples })
}

pub fn write_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = (ds.manifest.h, ds.manifest.w);
    for (s, f) in ds.samples.iter().zip(&ds.manifest.files) {
        let f32s = |shape: Vec<usize>, v: &[f32]| -> Result<StoredTensor> {
            Ok(StoredTensor::F32(Tensor::new(shape, v.to_vec())?))
        };
        write_tensor_file(dir.join(&f.img), &f32s(vec![3, h, w], &s.image)?)?;
        write_tensor_file(
            dir.join(&f.seg),
            &StoredTensor::I32 {
                shape: vec![h, w],
                data: s.seg.iter().map(|&l| l as i32).collect(),
            },
        )?;
        write_tensor_file(dir.join(&f.dep), &f32s(vec![h, w], &s.depth)?)?;
        write_tensor_file(dir.join(&f.nrm), &f32s(vec![3, h, w], &s.normal)?)?;
    }
    let json = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
    let path = dir.join("manifest.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn gen_synthetic_dir(dir: impl AsRef<Path>, seed: u64, n: usize, scene: SceneConfig) -> Result<Manifest> {
    let ds = gen_synthetic(seed, n, scene)?;
    write_dataset(dir, &ds)?;
    Ok(ds.manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.files.len() != m.n {
        return Err(Error::Format(format!("manifest lists {} files for n = {}", m.files.len(), m.n)));
    }
    Ok(m)
}

fn expect_f32(t: StoredTensor, shape: &[usize], what: &str) -> Result<Vec<f32>> {
    match t {
        StoredTensor::F32(t) if t.shape() == shape => Ok(t.into_data()),
        other => Err(Error::Data(format!(
            "{what}: expected f32 {shape:?}, found {:?} {:?}",
            other.dtype(),
            other.shape()
        ))),
    }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let (h, w, k) = (manifest.h, manifest.w, manifest.k);
    let mut samples = Vec::with_capacity(manifest.n);
    for f in &manifest.files {
        let image = expect_f32(read_tensor_file(dir.join(&f.img))?, &[3, h, w], &f.img)?;
        let depth = expect_f32(read_tensor_file(dir.join(&f.dep))?, &[h, w], &f.dep)?;
        let normal = expect_f32(read_tensor_file(dir.join(&f.nrm))?, &[3, h, w], &f.nrm)?;
        let seg = match read_tensor_file(dir.join(&f.seg))? {
            StoredTensor::I32 { shape, data } if shape == [h, w] => data
                .into_iter()
                .map(|l| match l {
                    l if (0..k as i32).contains(&l) || l == IGNORE as i32 => Ok(l as u8),
                    l => Err(Error::Data(format!("{}: label {l} outside 0..{k}", f.seg))),
                })
                .collect::<Result<Vec<u8>>>()?,
            other => {
                return Err(Error::Data(format!("{}: expected i32 [{h}, {w}], found {:?}", f.seg, other.shape())))
            }
        };
        if depth.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Data(format!("{}: non-positive depth", f.dep)));
        }
        samples.push(Sample {
            h,
            w,
            image,
            seg,
            depth,
            normal,
        });
    }
    Ok(Dataset { manifest, samples })
}
