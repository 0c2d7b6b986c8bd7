//! Procedural face mesh with a linear AU blendshape rig.
//!
//! The canonical template is a height field over an elliptical grid: a
//! half-ellipsoid with a nose, brow ridge, eye sockets, and lips. Identity
//! shape comes from a small set of smooth global deformation fields. Each AU
//! owns a disjoint vertex region and displaces it along the depth axis only,
//! so a frontal orthographic view sees the same screen footprint before and
//! after rigging.

use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::au::{ActionUnit, AuVector, NUM_AUS};
use super::demographics::{AgeGroup, DemographicProfile, Gender};
use crate::{Error, Result};

pub type Vec3 = [f64; 3];

/// Vertices per side of the template grid before the elliptical cut.
const GRID: usize = 51;
const HALF_WIDTH: f64 = 0.42;
const HALF_HEIGHT: f64 = 0.52;
pub const NUM_SHAPE_PARAMS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct FaceMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
    pub shape_params: Vec<f64>,
    /// One displacement field per AU, in [`ActionUnit::ALL`] order.
    pub au_basis: Vec<Vec<Vec3>>,
    /// Template-space `(x, y)` per vertex; texture coordinates.
    pub uv: Vec<[f64; 2]>,
    pub wrinkle_amplitude: f64,
}

/// Rectangle in template coordinates, open on all sides.
#[derive(Clone, Copy, Debug)]
struct Window {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Window {
    /// `sin(πs)·sin(πt)` bump: positive strictly inside, zero elsewhere.
    fn weight(&self, x: f64, y: f64) -> f64 {
        if x <= self.x0 || x >= self.x1 || y <= self.y0 || y >= self.y1 {
            return 0.0;
        }
        let s = (x - self.x0) / (self.x1 - self.x0);
        let t = (y - self.y0) / (self.y1 - self.y0);
        (std::f64::consts::PI * s).sin() * (std::f64::consts::PI * t).sin()
    }
}

fn mirrored(x0: f64, x1: f64, y0: f64, y1: f64) -> Vec<Window> {
    vec![
        Window { x0, x1, y0, y1 },
        Window {
            x0: -x1,
            x1: -x0,
            y0,
            y1,
        },
    ]
}

/// Anatomical region and peak depth displacement of each AU.
fn au_regions(au: ActionUnit) -> (Vec<Window>, f64) {
    match au {
        // glabella and brows
        ActionUnit::Au4 => (
            vec![Window {
                x0: -0.30,
                x1: 0.30,
                y0: 0.11,
                y1: 0.24,
            }],
            0.030,
        ),
        // cheeks
        ActionUnit::Au6 => (mirrored(0.12, 0.32, -0.17, -0.03), 0.030),
        // lower lids
        ActionUnit::Au7 => (mirrored(0.07, 0.24, 0.0, 0.05), 0.020),
        // nose root
        ActionUnit::Au9 => (
            vec![Window {
                x0: -0.065,
                x1: 0.065,
                y0: -0.02,
                y1: 0.10,
            }],
            -0.020,
        ),
        // upper lip / nasolabial
        ActionUnit::Au10 => (
            vec![Window {
                x0: -0.20,
                x1: 0.20,
                y0: -0.32,
                y1: -0.19,
            }],
            0.030,
        ),
        // upper lids
        ActionUnit::Au43 => (mirrored(0.07, 0.24, 0.05, 0.105), 0.025),
    }
}

fn gauss(x: f64, y: f64, cx: f64, cy: f64, sx: f64, sy: f64) -> f64 {
    (-((x - cx) / sx).powi(2) - ((y - cy) / sy).powi(2)).exp()
}

fn nose(x: f64, y: f64) -> f64 {
    0.11 * gauss(x, y, 0.0, -0.08, 0.045, 0.07) + 0.05 * gauss(x, y, 0.0, 0.02, 0.035, 0.10)
}

fn eye_socket(x: f64, y: f64) -> f64 {
    gauss(x.abs(), y, 0.155, 0.055, 0.07, 0.04)
}

fn brow_ridge(x: f64, y: f64) -> f64 {
    gauss(x, y, 0.0, 0.17, 0.28, 0.04)
}

fn cheek(x: f64, y: f64) -> f64 {
    gauss(x.abs(), y, 0.2, -0.1, 0.08, 0.07)
}

fn template_depth(x: f64, y: f64) -> f64 {
    let base = 0.25
        * (1.0 - (x / 0.5).powi(2) - (y / 0.6).powi(2))
            .max(0.0)
            .sqrt();
    let lips = 0.02 * gauss(x, y, 0.0, -0.3, 0.1, 0.035);
    base + nose(x, y) + 0.02 * brow_ridge(x, y) - 0.04 * eye_socket(x, y)
        + 0.01 * cheek(x, y)
        + lips
}

/// Displacement field of shape parameter `k` at template point `p`.
fn shape_field(k: usize, p: Vec3) -> Vec3 {
    let [x, y, z] = p;
    match k {
        0 => [0.06 * x, 0.0, 0.0],
        1 => [0.0, 0.05 * y, 0.0],
        2 => [0.0, 0.0, 0.15 * z],
        3 => [0.0, 0.0, 0.03 * nose(x, y) / 0.11],
        4 => [0.0, 0.0, 0.015 * brow_ridge(x, y)],
        5 => [0.0, 0.0, 0.02 * cheek(x, y)],
        6 => [0.04 * x * (-y).max(0.0) / 0.5, 0.0, 0.0],
        7 => [0.0, 0.0, -0.015 * eye_socket(x, y)],
        _ => [0.0; 3],
    }
}

struct Template {
    vertices: Vec<Vec3>,
    faces: Vec<[u32; 3]>,
    au_basis: Vec<Vec<Vec3>>,
}

fn template() -> &'static Template {
    static T: OnceLock<Template> = OnceLock::new();
    T.get_or_init(build_template)
}

fn build_template() -> Template {
    let half = (GRID - 1) as f64;
    // Integer-symmetric coordinates so the grid mirrors exactly in x.
    let coord = |i: usize, extent: f64| extent * (2.0 * i as f64 - half) / half;
    let inside = |x: f64, y: f64| (x / HALF_WIDTH).powi(2) + (y / HALF_HEIGHT).powi(2) <= 1.0;

    let mut index = vec![u32::MAX; GRID * GRID];
    let mut vertices = Vec::new();
    for r in 0..GRID {
        for c in 0..GRID {
            let x = coord(c, HALF_WIDTH);
            let y = coord(r, HALF_HEIGHT);
            if inside(x, y) {
                index[r * GRID + c] = vertices.len() as u32;
                vertices.push([x, y, template_depth(x, y)]);
            }
        }
    }

    let mut faces = Vec::new();
    for r in 0..GRID - 1 {
        for c in 0..GRID - 1 {
            let (a, b, cc, d) = (
                index[r * GRID + c],
                index[r * GRID + c + 1],
                index[(r + 1) * GRID + c],
                index[(r + 1) * GRID + c + 1],
            );
            if [a, b, cc, d].contains(&u32::MAX) {
                continue;
            }
            // Rows grow with +y, columns with +x: (a, b, d) is counter-clockwise
            // seen from +z. Diagonals mirror across x = 0 to keep the mesh symmetric.
            if c < (GRID - 1) / 2 {
                faces.push([a, b, d]);
                faces.push([a, d, cc]);
            } else {
                faces.push([a, b, cc]);
                faces.push([b, d, cc]);
            }
        }
    }

    let au_basis = ActionUnit::ALL
        .iter()
        .map(|&au| {
            let (windows, peak) = au_regions(au);
            vertices
                .iter()
                .map(|&[x, y, _]| {
                    let w: f64 = windows.iter().map(|win| win.weight(x, y)).sum();
                    [0.0, 0.0, peak * w]
                })
                .collect()
        })
        .collect();

    Template {
        vertices,
        faces,
        au_basis,
    }
}

/// `Σ_k max_i ‖basis_k,i‖`: the largest displacement any rig can produce.
/// Heatmaps divide by it so values are comparable across samples.
pub fn max_displacement() -> f64 {
    template()
        .au_basis
        .iter()
        .map(|field| field.iter().map(|d| norm(*d)).fold(0.0, f64::max))
        .sum()
}

pub fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

impl FaceMesh {
    /// The canonical template deformed by `shape_params` (zeros give the template).
    pub fn from_shape(shape_params: &[f64], wrinkle_amplitude: f64) -> Result<Self> {
        if shape_params.len() != NUM_SHAPE_PARAMS {
            return Err(Error::Dimension(format!(
                "expected {NUM_SHAPE_PARAMS} shape parameters, got {}",
                shape_params.len()
            )));
        }
        let t = template();
        let vertices = t
            .vertices
            .iter()
            .map(|&p| {
                let mut v = p;
                for (k, &s) in shape_params.iter().enumerate() {
                    if s != 0.0 {
                        let d = shape_field(k, p);
                        for j in 0..3 {
                            v[j] += s * d[j];
                        }
                    }
                }
                v
            })
            .collect();
        Ok(FaceMesh {
            vertices,
            faces: t.faces.clone(),
            shape_params: shape_params.to_vec(),
            au_basis: t.au_basis.clone(),
            uv: t.vertices.iter().map(|&[x, y, _]| [x, y]).collect(),
            wrinkle_amplitude,
        })
    }

    pub fn template() -> Self {
        FaceMesh::from_shape(&[0.0; NUM_SHAPE_PARAMS], 0.0).expect("template shape arity")
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Vertices displaced by `au`.
    pub fn region_mask(&self, au: ActionUnit) -> Vec<bool> {
        self.au_basis[au.index()]
            .iter()
            .map(|d| norm(*d) > 0.0)
            .collect()
    }

    /// Index of the vertex nearest the camera at yaw 0.
    pub fn nose_tip(&self) -> usize {
        (0..self.vertices.len())
            .max_by(|&a, &b| self.vertices[a][2].total_cmp(&self.vertices[b][2]))
            .unwrap_or(0)
    }

    pub fn same_topology(&self, other: &FaceMesh) -> bool {
        self.vertices.len() == other.vertices.len() && self.faces == other.faces
    }

    /// Checks index bounds and rejects zero-area triangles.
    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() || self.faces.is_empty() {
            return Err(Error::Geometry("empty mesh".into()));
        }
        let n = self.vertices.len() as u32;
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&i| i >= n) {
                return Err(Error::Geometry(format!(
                    "face {fi} indexes past {n} vertices"
                )));
            }
            let [a, b, c] = f.map(|i| self.vertices[i as usize]);
            let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
            let cross = [
                e1[1] * e2[2] - e1[2] * e2[1],
                e1[2] * e2[0] - e1[0] * e2[2],
                e1[0] * e2[1] - e1[1] * e2[0],
            ];
            if norm(cross) < 1e-12 {
                return Err(Error::Geometry(format!("face {fi} is degenerate")));
            }
        }
        Ok(())
    }
}

/// Deterministic identity mesh for `profile`.
pub fn make_identity_mesh(profile: &DemographicProfile) -> FaceMesh {
    let mut rng = ChaCha8Rng::seed_from_u64(profile.identity_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut params: Vec<f64> = (0..NUM_SHAPE_PARAMS)
        .map(|_| {
            let z: f64 = normal.sample(&mut rng);
            z.clamp(-2.5, 2.5)
        })
        .collect();
    // jaw width leans with gender
    params[6] += match profile.gender {
        Gender::Man => 0.8,
        Gender::Woman => -0.5,
    };
    let wrinkle_amplitude = match profile.age_group {
        AgeGroup::Young => rng.gen_range(0.02..0.12),
        AgeGroup::Elderly => rng.gen_range(0.35..0.6),
    };
    FaceMesh::from_shape(&params, wrinkle_amplitude).expect("shape arity")
}

/// `vertices + Σ_k (au_k / max_k) · basis_k`; faces unchanged.
pub fn apply_au_rig(mesh: &FaceMesh, au: &AuVector) -> Result<FaceMesh> {
    // revalidate in case the vector was built without `AuVector::new`
    let au = AuVector::new(*au.values())?;
    let mut out = mesh.clone();
    for k in 0..NUM_AUS {
        let scale = au.values()[k] / ActionUnit::ALL[k].max_intensity();
        if scale == 0.0 {
            continue;
        }
        for (v, d) in out.vertices.iter_mut().zip(&mesh.au_basis[k]) {
            for j in 0..3 {
                v[j] += scale * d[j];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_size_and_validity() {
        let m = FaceMesh::template();
        assert!(
            (1800..2300).contains(&m.num_vertices()),
            "{}",
            m.num_vertices()
        );
        m.validate().unwrap();
    }

    #[test]
    fn regions_are_disjoint_and_nonempty() {
        let m = FaceMesh::template();
        let masks: Vec<Vec<bool>> = ActionUnit::ALL.iter().map(|&a| m.region_mask(a)).collect();
        for (i, mi) in masks.iter().enumerate() {
            assert!(
                mi.iter().filter(|&&b| b).count() > 10,
                "{:?} region too small",
                ActionUnit::ALL[i]
            );
            for mj in &masks[i + 1..] {
                assert!(!mi.iter().zip(mj).any(|(a, b)| *a && *b));
            }
        }
    }

    #[test]
    fn template_is_mirror_symmetric() {
        let m = FaceMesh::template();
        let mut pts: Vec<(i64, i64, u64)> = m
            .vertices
            .iter()
            .map(|v| {
                (
                    (v[0] * 1e9).round() as i64,
                    (v[1] * 1e9).round() as i64,
                    v[2].to_bits(),
                )
            })
            .collect();
        let mut mirrored: Vec<(i64, i64, u64)> = pts.iter().map(|&(x, y, z)| (-x, y, z)).collect();
        pts.sort();
        mirrored.sort();
        assert_eq!(pts, mirrored);
    }

    #[test]
    fn zero_shape_is_template() {
        let m = FaceMesh::from_shape(&[0.0; NUM_SHAPE_PARAMS], 0.0).unwrap();
        assert_eq!(m.vertices, template().vertices);
    }

    #[test]
    fn out_of_range_au_rejected() {
        let m = FaceMesh::template();
        let bad: AuVector = serde_json::from_str("[0,0,0,0,0,0]").unwrap();
        assert!(apply_au_rig(&m, &bad).is_ok());
        assert!(AuVector::new([6.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn au4_rig_moves_only_brow_region() {
        let m = FaceMesh::template();
        let rigged =
            apply_au_rig(&m, &AuVector::new([5.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let mask = m.region_mask(ActionUnit::Au4);
        for (i, (a, b)) in m.vertices.iter().zip(&rigged.vertices).enumerate() {
            if a != b {
                assert!(mask[i]);
            }
        }
        assert!(m.vertices != rigged.vertices);
        assert_eq!(m.faces, rigged.faces);
    }
}
