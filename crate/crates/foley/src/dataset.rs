//! Dataset directories: `manifest.json` plus one CAFT file per scene under `scenes/`.

use std::path::{Path, PathBuf};

use foley_core::synth::{generate_scenes, make_signatures, render_all, ClassSignature, RenderedScene, Scene, SynthConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::caft::Caft;
use crate::error::{FoleyError, Result};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub file: String,
    #[serde(flatten)]
    pub scene: Scene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub signature_seed: u64,
    pub classes: usize,
    pub conflict_ratio: f64,
    pub synth: SynthConfig,
    pub scenes: Vec<SceneEntry>,
    pub run_config: Value,
}

impl Manifest {
    pub fn conflicted(&self) -> usize {
        self.scenes.iter().filter(|s| s.scene.is_conflicted()).count()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub signatures: Vec<ClassSignature>,
    pub scenes: Vec<RenderedScene>,
}

fn scene_file(id: u64) -> String {
    format!("scenes/{id:06}.caft")
}

pub fn scene_caft(r: &RenderedScene, synth: &SynthConfig, signature_seed: u64) -> Caft {
    let mut c = Caft::new(json!({
        "scene": r.scene,
        "signature_seed": signature_seed,
        "synth": synth,
    }));
    c.push("latent", r.latent.clone());
    c.push("avclip", r.avclip.clone());
    c.push("clip", r.clip.clone());
    c
}

/// Scene file contents together with what is needed to score it.
pub struct SceneFile {
    pub rendered: RenderedScene,
    pub synth: SynthConfig,
    pub signature_seed: u64,
}

/// Deserializes one metadata entry of a CAFT file.
pub fn meta_field<T: serde::de::DeserializeOwned>(c: &Caft, key: &str, path: &Path) -> Result<T> {
    let v = c
        .meta
        .get(key)
        .cloned()
        .ok_or_else(|| FoleyError::corrupt(path, format!("metadata lacks `{key}`")))?;
    serde_json::from_value(v).map_err(|e| FoleyError::Json {
        path: path.into(),
        source: e,
    })
}

pub fn read_scene(path: &Path) -> Result<SceneFile> {
    let c = Caft::read(path)?;
    let scene: Scene = meta_field(&c, "scene", path)?;
    let synth: SynthConfig = meta_field(&c, "synth", path)?;
    let signature_seed: u64 = meta_field(&c, "signature_seed", path)?;
    let tensor = |n: &str| c.get(n).cloned().ok_or_else(|| FoleyError::corrupt(path, format!("missing tensor `{n}`")));
    let rendered = RenderedScene {
        scene,
        latent: tensor("latent")?,
        avclip: tensor("avclip")?,
        clip: tensor("clip")?,
    };
    let want = [
        (&rendered.latent, [synth.frames, synth.latent_channels]),
        (&rendered.avclip, [synth.frames, synth.feature_dim]),
        (&rendered.clip, [synth.clip_frames, synth.feature_dim]),
    ];
    for (t, shape) in want {
        if t.shape() != shape {
            return Err(FoleyError::corrupt(path, format!("tensor shape {:?}, expected {shape:?}", t.shape())));
        }
    }
    rendered.scene.validate(&synth)?;
    Ok(SceneFile {
        rendered,
        synth,
        signature_seed,
    })
}

/// Generates, renders and writes `n` scenes.
pub fn make_dataset(
    n: usize,
    conflict_ratio: f64,
    seed: u64,
    signature_seed: u64,
    synth: &SynthConfig,
    path: &Path,
    run_config: Value,
) -> Result<Manifest> {
    let sigs = make_signatures(synth, signature_seed)?;
    let scenes = generate_scenes(n, conflict_ratio, seed, synth)?;
    let rendered = render_all(&scenes, &sigs, synth)?;
    std::fs::create_dir_all(path.join("scenes")).map_err(|e| FoleyError::io(path, e))?;
    rendered
        .par_iter()
        .map(|r| scene_caft(r, synth, signature_seed).write(&path.join(scene_file(r.scene.scene_id))))
        .collect::<Result<Vec<()>>>()?;
    let manifest = Manifest {
        version: DATASET_VERSION,
        seed,
        signature_seed,
        classes: synth.classes,
        conflict_ratio,
        synth: synth.clone(),
        scenes: scenes
            .into_iter()
            .map(|s| SceneEntry {
                file: scene_file(s.scene_id),
                scene: s,
            })
            .collect(),
        run_config,
    };
    let mp = path.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&mp, text + "\n").map_err(|e| FoleyError::io(&mp, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mp = path.join("manifest.json");
    let text = std::fs::read_to_string(&mp).map_err(|e| FoleyError::io(&mp, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| FoleyError::Json {
        path: mp.clone(),
        source: e,
    })?;
    if m.version != DATASET_VERSION {
        return Err(FoleyError::UnsupportedVersion {
            path: mp,
            found: m.version,
            supported: DATASET_VERSION,
        });
    }
    Ok(m)
}

/// Reads every scene and checks it against the manifest.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(path)?;
    let scenes = manifest
        .scenes
        .par_iter()
        .map(|e| {
            let p: PathBuf = path.join(&e.file);
            let f = read_scene(&p)?;
            if f.rendered.scene != e.scene || f.signature_seed != manifest.signature_seed || f.synth != manifest.synth {
                return Err(FoleyError::corrupt(p, "scene file disagrees with the manifest"));
            }
            Ok(f.rendered)
        })
        .collect::<Result<Vec<_>>>()?;
    let signatures = make_signatures(&manifest.synth, manifest.signature_seed)?;
    Ok(Dataset {
        manifest,
        signatures,
        scenes,
    })
}
