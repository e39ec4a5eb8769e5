//! Synthetic dataset generation and the on-disk manifest format.
//!
//! A dataset directory holds `manifest.json` plus PNG files:
//!
//! ```text
//! manifest.json
//! scenes/<scene_id>.png       8-bit RGB
//! sources/<source_id>.png     8-bit RGB
//! composites/<sample_id>.png  8-bit RGB
//! masks/<sample_id>.png       8-bit gray, values {0, 255}
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compose::{compose, random_blend, warped_mask, BlendParams, Homography, ProjectionSpec, SarSample, SceneSpec, Split};
use crate::config::SynthConfig;
use crate::error::{ProcapError, Result};
use crate::image::{BinaryMask, Image};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub canvas: [usize; 2],
    pub scenes: Vec<ManifestScene>,
    pub sources: Vec<ManifestSource>,
    pub samples: Vec<ManifestSample>,
    /// Resolved run configuration and seed that produced the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestScene {
    pub id: String,
    pub image: String,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSource {
    pub id: String,
    pub image: String,
    pub captions: Vec<String>,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSample {
    pub id: String,
    pub scene_id: String,
    pub source_id: String,
    pub composite: String,
    pub mask: String,
    pub homography: [f64; 9],
    pub gain: [f64; 3],
    pub gamma: f64,
    pub noise_sigma: f64,
    pub split: Split,
}

/// A loaded dataset with its scene and source tables.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest_path: PathBuf,
    pub canvas: [usize; 2],
    pub scenes: Vec<SceneSpec>,
    pub sources: Vec<ProjectionSpec>,
    pub samples: Vec<SarSample>,
    scene_index: HashMap<String, usize>,
    source_index: HashMap<String, usize>,
}

impl Dataset {
    fn new(manifest_path: PathBuf, canvas: [usize; 2], scenes: Vec<SceneSpec>, sources: Vec<ProjectionSpec>, samples: Vec<SarSample>) -> Self {
        let scene_index = scenes.iter().enumerate().map(|(i, s)| (s.scene_id.clone(), i)).collect();
        let source_index = sources.iter().enumerate().map(|(i, s)| (s.source_id.clone(), i)).collect();
        Self { manifest_path, canvas, scenes, sources, samples, scene_index, source_index }
    }

    pub fn scene(&self, id: &str) -> &SceneSpec {
        &self.scenes[self.scene_index[id]]
    }

    pub fn source(&self, id: &str) -> &ProjectionSpec {
        &self.sources[self.source_index[id]]
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SarSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Ground-truth (scene captions, projection captions) of a sample.
    pub fn captions(&self, sample: &SarSample) -> (&[String], &[String]) {
        (&self.scene(&sample.scene_id).scene_captions, &self.source(&sample.source_id).source_captions)
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| ProcapError::io(path, e))
}

fn check_captions(kind: &str, id: &str, captions: &[String]) -> Result<()> {
    if captions.is_empty() || captions.iter().any(|c| c.trim().is_empty()) {
        return Err(ProcapError::SchemaViolation(format!("{kind} {id:?} has an empty caption list or blank caption")));
    }
    Ok(())
}

fn check_unique<'a>(kind: &str, ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(ProcapError::SchemaViolation(format!("duplicate {kind} id {id:?}")));
        }
    }
    Ok(())
}

fn entry_image(id: &str, image: &Option<String>, pattern: &Option<crate::compose::Pattern>, dims: [usize; 2], base: &Path) -> Result<Image> {
    match (image, pattern) {
        (Some(p), _) => {
            let img = Image::load_png(&base.join(p))?;
            Ok(img.resized(dims[0], dims[1]).quantized())
        }
        (None, Some(pat)) => Ok(pat.render(dims[0], dims[1]).quantized()),
        (None, None) => Err(ProcapError::InvalidConfig(format!("entry {id:?} needs an image or a pattern"))),
    }
}

/// Generate every `(scene, source, draw)` composite, write the images and
/// `manifest.json` under `out_dir`, and return the manifest path.
///
/// Output is a pure function of `(config, seed)`. Relative image paths in the
/// config are resolved against `base_dir`.
pub fn synth_dataset(
    config: &SynthConfig,
    seed: u64,
    out_dir: &Path,
    base_dir: &Path,
    provenance: Option<serde_json::Value>,
) -> Result<PathBuf> {
    config.validate()?;
    if config.scenes.is_empty() || config.sources.is_empty() || config.draws_per_pair == 0 {
        return Err(ProcapError::EmptyCorpus("synthesis needs at least one scene, one source and one draw".into()));
    }
    check_unique("scene", config.scenes.iter().map(|s| s.id.as_str()))?;
    check_unique("source", config.sources.iter().map(|s| s.id.as_str()))?;
    let canvas = config.canvas;

    let mut scenes = Vec::new();
    for s in &config.scenes {
        check_captions("scene", &s.id, &s.captions)?;
        let scene_image = entry_image(&s.id, &s.image, &s.pattern, canvas, base_dir)?;
        scenes.push(SceneSpec { scene_id: s.id.clone(), scene_image, scene_captions: s.captions.clone() });
    }
    let mut sources = Vec::new();
    for s in &config.sources {
        check_captions("source", &s.id, &s.captions)?;
        if s.name.trim().is_empty() {
            return Err(ProcapError::SchemaViolation(format!("source {:?} has an empty object name", s.id)));
        }
        let source_image = entry_image(&s.id, &s.image, &s.pattern, canvas, base_dir)?;
        sources.push(ProjectionSpec {
            source_id: s.id.clone(),
            source_image,
            source_captions: s.captions.clone(),
            object_name: s.name.clone(),
        });
    }

    let mut samples = Vec::new();
    for scene in &scenes {
        for src in &sources {
            for d in 0..config.draws_per_pair {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(samples.len() as u64);
                let blend = random_blend(canvas, src.source_image.dims(), &config.blend, &mut rng)?;
                let mut s = compose(scene, src, &blend, &mut rng)?;
                s.composite_image = s.composite_image.quantized();
                s.sample_id = format!("{}__{}__{d}", scene.scene_id, src.source_id);
                samples.push(s);
            }
        }
    }
    let n_eval = (samples.len() as f64 * config.eval_fraction).round() as usize;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    for &i in &order[..n_eval] {
        samples[i].split = Split::Eval;
    }

    for sub in ["scenes", "sources", "composites", "masks"] {
        ensure_dir(&out_dir.join(sub))?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        canvas,
        scenes: scenes
            .iter()
            .map(|s| {
                let image = format!("scenes/{}.png", s.scene_id);
                s.scene_image.save_png(&out_dir.join(&image))?;
                Ok(ManifestScene { id: s.scene_id.clone(), image, captions: s.scene_captions.clone() })
            })
            .collect::<Result<_>>()?,
        sources: sources
            .iter()
            .map(|s| {
                let image = format!("sources/{}.png", s.source_id);
                s.source_image.save_png(&out_dir.join(&image))?;
                Ok(ManifestSource {
                    id: s.source_id.clone(),
                    image,
                    captions: s.source_captions.clone(),
                    name: s.object_name.clone(),
                })
            })
            .collect::<Result<_>>()?,
        samples: samples
            .iter()
            .map(|s| {
                let composite = format!("composites/{}.png", s.sample_id);
                let mask = format!("masks/{}.png", s.sample_id);
                s.composite_image.save_png(&out_dir.join(&composite))?;
                s.gt_mask_pixel.save_png(&out_dir.join(&mask))?;
                Ok(ManifestSample {
                    id: s.sample_id.clone(),
                    scene_id: s.scene_id.clone(),
                    source_id: s.source_id.clone(),
                    composite,
                    mask,
                    homography: s.blend.homography.0,
                    gain: s.blend.gain,
                    gamma: s.blend.projector_gamma,
                    noise_sigma: s.blend.noise_sigma,
                    split: s.split,
                })
            })
            .collect::<Result<_>>()?,
        provenance,
    };
    let path = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &path)?;
    Ok(path)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| ProcapError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(ProcapError::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| ProcapError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ProcapError::SchemaViolation(format!("{}: {e}", path.display())))
}

/// Load and validate a dataset. Every referenced file must exist and every
/// type invariant (non-empty captions, binary masks, mask equal to the
/// warped quad, composite equal to the scene outside the mask) is checked.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let m = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    if m.version != MANIFEST_VERSION {
        return Err(ProcapError::SchemaViolation(format!("unsupported manifest version {}", m.version)));
    }
    check_unique("scene", m.scenes.iter().map(|s| s.id.as_str()))?;
    check_unique("source", m.sources.iter().map(|s| s.id.as_str()))?;
    check_unique("sample", m.samples.iter().map(|s| s.id.as_str()))?;

    let referencing = |kind: &str, id: &str| -> String {
        let first = m.samples.iter().find(|s| (kind == "scene" && s.scene_id == id) || (kind == "source" && s.source_id == id));
        match first {
            Some(s) => format!(" (used by sample {:?})", s.id),
            None => String::new(),
        }
    };
    let check_dims = |what: &str, dims: [usize; 2]| {
        if dims != m.canvas {
            return Err(ProcapError::DimensionMismatch(format!("{what} is {dims:?}, canvas is {:?}", m.canvas)));
        }
        Ok(())
    };

    let mut scenes = Vec::new();
    for s in &m.scenes {
        check_captions("scene", &s.id, &s.captions).map_err(|e| match e {
            ProcapError::SchemaViolation(msg) => ProcapError::SchemaViolation(msg + &referencing("scene", &s.id)),
            other => other,
        })?;
        let img = Image::load_png(&root.join(&s.image))?;
        check_dims(&format!("scene {:?}", s.id), img.dims())?;
        scenes.push(SceneSpec { scene_id: s.id.clone(), scene_image: img, scene_captions: s.captions.clone() });
    }
    let mut sources = Vec::new();
    for s in &m.sources {
        check_captions("source", &s.id, &s.captions).map_err(|e| match e {
            ProcapError::SchemaViolation(msg) => ProcapError::SchemaViolation(msg + &referencing("source", &s.id)),
            other => other,
        })?;
        if s.name.trim().is_empty() {
            return Err(ProcapError::SchemaViolation(format!("source {:?} has an empty name", s.id)));
        }
        let img = Image::load_png(&root.join(&s.image))?;
        sources.push(ProjectionSpec {
            source_id: s.id.clone(),
            source_image: img,
            source_captions: s.captions.clone(),
            object_name: s.name.clone(),
        });
    }
    let scene_ids: HashMap<&str, usize> = m.scenes.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let source_ids: HashMap<&str, usize> = m.sources.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();

    let mut samples = Vec::new();
    for s in &m.samples {
        let Some(&si) = scene_ids.get(s.scene_id.as_str()) else {
            return Err(ProcapError::SchemaViolation(format!("sample {:?} references unknown scene {:?}", s.id, s.scene_id)));
        };
        let Some(&pi) = source_ids.get(s.source_id.as_str()) else {
            return Err(ProcapError::SchemaViolation(format!("sample {:?} references unknown source {:?}", s.id, s.source_id)));
        };
        let blend = BlendParams {
            homography: Homography(s.homography),
            gain: s.gain,
            projector_gamma: s.gamma,
            noise_sigma: s.noise_sigma,
        };
        blend.validate().map_err(|e| ProcapError::SchemaViolation(format!("sample {:?}: {e}", s.id)))?;
        let composite = Image::load_png(&root.join(&s.composite))?;
        let mask = BinaryMask::load_png(&root.join(&s.mask))?;
        check_dims(&format!("composite of {:?}", s.id), composite.dims())?;
        check_dims(&format!("mask of {:?}", s.id), mask.dims())?;
        let expected = warped_mask(m.canvas, sources[pi].source_image.dims(), &blend.homography)?;
        if expected != mask {
            return Err(ProcapError::SchemaViolation(format!("mask of sample {:?} differs from its warped projector quad", s.id)));
        }
        let scene_img = &scenes[si].scene_image;
        for y in 0..m.canvas[0] {
            for x in 0..m.canvas[1] {
                if !mask.get(y, x) && composite.pixel(y, x) != scene_img.pixel(y, x) {
                    return Err(ProcapError::SchemaViolation(format!(
                        "sample {:?} differs from its scene outside the mask at ({y}, {x})",
                        s.id
                    )));
                }
            }
        }
        samples.push(SarSample {
            sample_id: s.id.clone(),
            scene_id: s.scene_id.clone(),
            source_id: s.source_id.clone(),
            composite_image: composite,
            gt_mask_pixel: mask,
            blend,
            split: s.split,
        });
    }
    Ok(Dataset::new(manifest_path.to_path_buf(), m.canvas, scenes, sources, samples))
}
