//! Datasets on disk, synthetic scene generation, and model persistence.

mod model_file;
mod png_io;
mod synth;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clicksim::{BenchSample, LoadFailure};
use crate::error::{Error, Result};
use crate::segmenter::{Image, Mask};

pub use model_file::{decode_model, encode_model, load_model, model_hash, save_model, MAGIC, MODEL_FORMAT_VERSION};
pub use png_io::{
    decode_image, decode_labels, decode_mask, encode_image, encode_mask, png_dimensions, quantize, read_image, read_mask, write_image,
    write_mask,
};
pub use synth::{generate_scene, Scene, SynthConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Every non-zero mask pixel belongs to one target.
    #[default]
    Union,
    /// Each distinct non-zero mask value is its own target.
    PerInstance,
}

/// One manifest row. Paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub gt: PathBuf,
    pub sample_id: String,
    #[serde(default)]
    pub eval_mode: EvalMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads `root/manifest.json`.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Dataset { path: path.clone(), message: e.to_string() })?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset { path: path.clone(), message: e.to_string() })?;
        let mut seen = BTreeSet::new();
        if let Some(dup) = entries.iter().find(|e| !seen.insert(e.sample_id.as_str())) {
            return Err(Error::Dataset { path, message: format!("duplicate sample_id {:?}", dup.sample_id) });
        }
        Ok(Self { root: root.to_path_buf(), entries })
    }

    pub fn save(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(self.root.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }
}

/// Decodes one entry. The mask is the union of all labelled pixels.
pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<(Image, Mask)> {
    let image_path = root.join(&entry.image);
    let gt_path = root.join(&entry.gt);
    let image = read_image(&image_path)?;
    let gt = read_mask(&gt_path)?;
    if (image.width(), image.height()) != (gt.width(), gt.height()) {
        return Err(Error::Dataset {
            path: gt_path,
            message: format!(
                "mask is {}x{} but image is {}x{}",
                gt.width(),
                gt.height(),
                image.width(),
                image.height()
            ),
        });
    }
    Ok((image, gt))
}

/// One mask per distinct non-zero label value, in ascending label order.
pub fn load_instances(root: &Path, entry: &ManifestEntry) -> Result<Vec<(u8, Mask)>> {
    let path = root.join(&entry.gt);
    let bytes = std::fs::read(&path).map_err(|e| Error::Dataset { path: path.clone(), message: e.to_string() })?;
    let (w, h, labels) = decode_labels(&bytes).map_err(|m| Error::Dataset { path: path.clone(), message: m })?;
    let values: BTreeSet<u8> = labels.iter().copied().filter(|&v| v != 0).collect();
    values
        .into_iter()
        .map(|v| Ok((v, Mask::from_bits(w, h, labels.iter().map(|&l| l == v).collect())?)))
        .collect()
}

/// Every evaluation sample of a manifest. Failures are returned in place so
/// a benchmark can report them and carry on.
pub fn load_bench_samples(manifest: &Manifest) -> Vec<std::result::Result<BenchSample, LoadFailure>> {
    let mut out = Vec::new();
    for entry in &manifest.entries {
        let fail = |e: Error| LoadFailure { sample_id: entry.sample_id.clone(), message: e.to_string() };
        let (image, union) = match load_sample(&manifest.root, entry) {
            Ok(pair) => pair,
            Err(e) => {
                out.push(Err(fail(e)));
                continue;
            }
        };
        let image = Arc::new(image);
        match entry.eval_mode {
            EvalMode::Union => out.push(Ok(BenchSample { sample_id: entry.sample_id.clone(), image, gt: union })),
            EvalMode::PerInstance => match load_instances(&manifest.root, entry) {
                Ok(instances) => out.extend(instances.into_iter().map(|(v, gt)| {
                    Ok(BenchSample { sample_id: format!("{}#{v}", entry.sample_id), image: Arc::clone(&image), gt })
                })),
                Err(e) => out.push(Err(fail(e))),
            },
        }
    }
    out
}

/// Writes `cfg.n_samples` scenes as `root/{images,masks}/NNNN.png` plus the manifest.
pub fn generate_synthetic(cfg: &SynthConfig, root: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    let mut entries = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let scene = generate_scene(cfg, i as u64)?;
        let id = format!("{i:04}");
        let image = PathBuf::from("images").join(format!("{id}.png"));
        let gt = PathBuf::from("masks").join(format!("{id}.png"));
        write_image(&root.join(&image), &scene.image)?;
        write_mask(&root.join(&gt), &scene.gt)?;
        entries.push(ManifestEntry { image, gt, sample_id: id, eval_mode: EvalMode::Union });
    }
    let manifest = Manifest { root: root.to_path_buf(), entries };
    manifest.save()?;
    Ok(manifest)
}
