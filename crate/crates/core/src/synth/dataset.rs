//! Dataset generation: identities, expressions and views rendered to disk with
//! a JSONL manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::au::{pspi_score, sample_au_config_with, AuVector, NUM_PSPI_CLASSES};
use super::demographics::{
    sample_demographics, AgeGroup, DemographicConfig, DemographicProfile, Ethnicity, Gender,
};
use super::mesh::{apply_au_rig, make_identity_mesh};
use super::render::{render_heatmap, render_rgb, View};
use crate::tensor::{mix_seed, Tensor};
use crate::tensor_file::{write_atomic, TensorFile};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DATASET_META_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub identities: usize,
    pub expressions_per_identity: usize,
    /// Camera yaws in degrees; one frame per yaw per expression.
    pub views: Vec<f64>,
    pub resolution: usize,
    /// Sampling weights over PSPI targets 0..=16.
    pub pspi_distribution: Vec<f64>,
    pub seed: u64,
    /// Marginal counts; `None` rescales the reference distribution to `identities`.
    pub demographics: Option<DemographicConfig>,
}

impl DatasetSpec {
    pub fn new(
        identities: usize,
        expressions_per_identity: usize,
        views: Vec<f64>,
        seed: u64,
    ) -> Self {
        DatasetSpec {
            identities,
            expressions_per_identity,
            views,
            resolution: 64,
            pspi_distribution: vec![1.0 / NUM_PSPI_CLASSES as f64; NUM_PSPI_CLASSES],
            seed,
            demographics: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 || self.expressions_per_identity == 0 || self.views.is_empty() {
            return Err(Error::Config(
                "identities, expressions and views must all be at least 1".into(),
            ));
        }
        for &yaw in &self.views {
            View::new(yaw, self.resolution).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.pspi_distribution.len() != NUM_PSPI_CLASSES {
            return Err(Error::Config(format!(
                "pspi distribution needs {NUM_PSPI_CLASSES} entries, got {}",
                self.pspi_distribution.len()
            )));
        }
        if self
            .pspi_distribution
            .iter()
            .any(|&p| !p.is_finite() || p < 0.0)
        {
            return Err(Error::Config(
                "pspi distribution has a negative or non-finite weight".into(),
            ));
        }
        let sum: f64 = self.pspi_distribution.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "pspi distribution sums to {sum}, not 1"
            )));
        }
        if let Some(d) = &self.demographics {
            let total = d.total()?;
            if total != self.identities {
                return Err(Error::Config(format!(
                    "demographics total {total} != identities {}",
                    self.identities
                )));
            }
        }
        Ok(())
    }

    pub fn demographic_config(&self) -> DemographicConfig {
        self.demographics
            .clone()
            .unwrap_or_else(|| DemographicConfig::reference_scaled(self.identities))
    }

    pub fn frame_count(&self) -> usize {
        self.identities * (self.expressions_per_identity + 1) * self.views.len()
    }

    pub fn heatmap_count(&self) -> usize {
        self.identities * self.expressions_per_identity
    }
}

/// One rendered frame.
#[derive(Clone, Debug)]
pub struct Sample {
    pub identity_id: usize,
    /// 0 is the neutral expression.
    pub expression_id: usize,
    pub view_id: usize,
    pub camera_yaw: f64,
    pub rgb: Tensor,
    /// Frontal heatmap of this expression; absent for neutral frames.
    pub heatmap: Option<Tensor>,
    pub au: AuVector,
    pub pspi: u8,
    pub demographic: DemographicProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub identity_id: usize,
    pub view_id: usize,
    pub camera_yaw: f64,
    pub rgb_path: String,
    pub heatmap_path: Option<String>,
    pub au: AuVector,
    pub pspi: u8,
    pub age_group: AgeGroup,
    pub ethnicity: Ethnicity,
    pub gender: Gender,
    pub split_subject_id: usize,
    pub expression_id: usize,
}

/// Parsed manifest; relative paths resolve against `root`.
#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    /// SHA-256 of the manifest file as loaded.
    pub sha256: String,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let rows = parse_rows(&text, path)?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest {
            root,
            rows,
            sha256: sha256_hex(text.as_bytes()),
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn has_heatmaps(&self) -> bool {
        self.rows.iter().any(|r| r.heatmap_path.is_some())
    }

    pub fn subjects(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.rows.iter().map(|r| r.split_subject_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

fn parse_rows(text: &str, path: &Path) -> Result<Vec<ManifestRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let row: ManifestRow = serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                msg: format!("line {}: {e}", i + 1),
            })?;
            if row.pspi != pspi_score(&row.au) {
                return Err(Error::Data(format!(
                    "line {}: pspi {} disagrees with its AU vector",
                    i + 1,
                    row.pspi
                )));
            }
            Ok(row)
        })
        .collect()
}

fn rows_to_jsonl(rows: &[ManifestRow]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content hash of a manifest file.
pub fn manifest_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn rgb_rel(identity: usize, expression: usize, view: usize) -> String {
    format!("rgb/i{identity:05}_e{expression:02}_v{view}.p3dt")
}

fn heatmap_rel(identity: usize, expression: usize) -> String {
    format!("heatmaps/i{identity:05}_e{expression:02}.p3dt")
}

fn rows_rel(identity: usize) -> String {
    format!("rows/i{identity:05}.jsonl")
}

fn draw_target<R: Rng>(dist: &[f64], rng: &mut R) -> u8 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return k as u8;
        }
    }
    // rounding left a sliver past the last bucket; take the last nonzero one
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u8
}

/// Renders every frame of one identity. Only depends on `(spec, identity_id, profile)`.
pub fn generate_identity(
    spec: &DatasetSpec,
    identity_id: usize,
    profile: &DemographicProfile,
) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[spec.seed, 0xE7, identity_id as u64]));
    let neutral = make_identity_mesh(profile);
    let frontal = View::frontal(spec.resolution);
    let mut out = Vec::with_capacity((spec.expressions_per_identity + 1) * spec.views.len());
    for expression_id in 0..=spec.expressions_per_identity {
        let (au, mesh, heatmap) = if expression_id == 0 {
            (AuVector::zero(), neutral.clone(), None)
        } else {
            let target = draw_target(&spec.pspi_distribution, &mut rng);
            let au = sample_au_config_with(target, &mut rng)?;
            let rigged = apply_au_rig(&neutral, &au)?;
            let heat = render_heatmap(&neutral, &rigged, frontal)?;
            (au, rigged, Some(heat))
        };
        for (view_id, &yaw) in spec.views.iter().enumerate() {
            let view = View::new(yaw, spec.resolution)?;
            out.push(Sample {
                identity_id,
                expression_id,
                view_id,
                camera_yaw: yaw,
                rgb: render_rgb(&mesh, profile, view, None)?,
                heatmap: heatmap.clone(),
                au,
                pspi: pspi_score(&au),
                demographic: *profile,
            });
        }
    }
    Ok(out)
}

fn write_identity(
    spec: &DatasetSpec,
    out_dir: &Path,
    identity_id: usize,
    profile: &DemographicProfile,
) -> Result<()> {
    let samples = generate_identity(spec, identity_id, profile)?;
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let rgb_path = rgb_rel(identity_id, s.expression_id, s.view_id);
        TensorFile::u8_unit(&s.rgb).write(&out_dir.join(&rgb_path))?;
        let heatmap_path = match &s.heatmap {
            Some(h) => {
                let rel = heatmap_rel(identity_id, s.expression_id);
                if s.view_id == 0 {
                    TensorFile::f32(h).write(&out_dir.join(&rel))?;
                }
                Some(rel)
            }
            None => None,
        };
        rows.push(ManifestRow {
            identity_id,
            view_id: s.view_id,
            camera_yaw: s.camera_yaw,
            rgb_path,
            heatmap_path,
            au: s.au,
            pspi: s.pspi,
            age_group: profile.age_group,
            ethnicity: profile.ethnicity,
            gender: profile.gender,
            split_subject_id: identity_id,
            expression_id: s.expression_id,
        });
    }
    // the rows file is the completion marker, so it goes last
    write_atomic(&out_dir.join(rows_rel(identity_id)), &rows_to_jsonl(&rows)?)
}

/// Outcome of [`build_dataset`].
#[derive(Clone, Debug)]
pub struct BuildSummary {
    pub manifest_path: PathBuf,
    pub frames: usize,
    pub heatmaps: usize,
    /// Identities rendered by this call (the rest were already on disk).
    pub generated: usize,
    pub profiles: Vec<DemographicProfile>,
}

/// Generates the dataset under `out_dir`. Identities already completed by an
/// earlier call with the same spec are skipped when `resume` is set; the
/// output is identical either way.
pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path, resume: bool) -> Result<BuildSummary> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let meta_path = out_dir.join(DATASET_META_FILE);
    let meta = serde_json::to_vec_pretty(spec)?;
    let reuse = resume && fs::read(&meta_path).map(|old| old == meta).unwrap_or(false);
    write_atomic(&meta_path, &meta)?;

    let profiles = sample_demographics(&spec.demographic_config(), spec.seed)?;
    let todo: Vec<usize> = (0..spec.identities)
        .filter(|&i| !(reuse && out_dir.join(rows_rel(i)).is_file()))
        .collect();
    todo.par_iter()
        .try_for_each(|&i| write_identity(spec, out_dir, i, &profiles[i]))?;

    let mut manifest = Vec::new();
    for i in 0..spec.identities {
        let p = out_dir.join(rows_rel(i));
        manifest.extend(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_atomic(&manifest_path, &manifest)?;
    Ok(BuildSummary {
        manifest_path,
        frames: spec.frame_count(),
        heatmaps: spec.heatmap_count(),
        generated: todo.len(),
        profiles,
    })
}
