//! Orthographic rasterizer producing depth, shaded RGB and displacement heatmaps.

use super::demographics::{DemographicProfile, Ethnicity};
use super::mesh::{max_displacement, norm, FaceMesh, Vec3};
use crate::tensor::{mix_seed, Tensor};
use crate::{Error, Result};

/// The image covers `[-VIEW_EXTENT, VIEW_EXTENT]` in both x and y.
pub const VIEW_EXTENT: f64 = 0.6;
/// Depth range mapped to `[0, 1]`: z in `[-DEPTH_EXTENT, DEPTH_EXTENT]`.
const DEPTH_EXTENT: f64 = 0.6;
const AMBIENT: f64 = 0.25;
const DIFFUSE: f64 = 0.75;

/// Camera for a square orthographic render.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct View {
    pub yaw_deg: f64,
    pub resolution: usize,
}

impl View {
    pub fn new(yaw_deg: f64, resolution: usize) -> Result<Self> {
        if !yaw_deg.is_finite() || yaw_deg.abs() > 90.0 {
            return Err(Error::Parameter(format!(
                "camera yaw {yaw_deg} outside [-90, 90]"
            )));
        }
        if resolution == 0 {
            return Err(Error::Parameter("resolution must be positive".into()));
        }
        Ok(View {
            yaw_deg,
            resolution,
        })
    }

    pub fn frontal(resolution: usize) -> Self {
        View {
            yaw_deg: 0.0,
            resolution,
        }
    }

    fn rotate(&self, p: Vec3) -> Vec3 {
        let (s, c) = self.yaw_deg.to_radians().sin_cos();
        [p[0] * c + p[2] * s, p[1], -p[0] * s + p[2] * c]
    }
}

/// The surface point visible through one pixel.
#[derive(Clone, Copy, Debug)]
struct Fragment {
    face: u32,
    bary: [f64; 3],
    z: f64,
}

/// Per-pixel visible fragments, row-major, `None` for background.
struct Raster {
    res: usize,
    fragments: Vec<Option<Fragment>>,
    /// Camera-space vertices.
    cam: Vec<Vec3>,
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Pixels exactly on an edge shared by two triangles go to exactly one of them.
fn owns_edge(a: [f64; 2], b: [f64; 2]) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    dy > 0.0 || (dy == 0.0 && dx < 0.0)
}

fn rasterize(mesh: &FaceMesh, view: View) -> Result<Raster> {
    mesh.validate()?;
    let res = view.resolution;
    let scale = res as f64 / (2.0 * VIEW_EXTENT);
    let cam: Vec<Vec3> = mesh.vertices.iter().map(|&p| view.rotate(p)).collect();
    let screen: Vec<[f64; 2]> = cam
        .iter()
        .map(|p| [(p[0] + VIEW_EXTENT) * scale, (VIEW_EXTENT - p[1]) * scale])
        .collect();
    let mut fragments: Vec<Option<Fragment>> = vec![None; res * res];

    for (fi, f) in mesh.faces.iter().enumerate() {
        let mut idx = [f[0] as usize, f[1] as usize, f[2] as usize];
        let mut slot = [0usize, 1, 2];
        let mut area = edge(screen[idx[0]], screen[idx[1]], screen[idx[2]]);
        if area.abs() < 1e-12 {
            continue;
        }
        if area < 0.0 {
            idx.swap(1, 2);
            slot.swap(1, 2);
            area = -area;
        }
        let [p0, p1, p2] = idx.map(|i| screen[i]);
        let lo_x = p0[0].min(p1[0]).min(p2[0]);
        let hi_x = p0[0].max(p1[0]).max(p2[0]);
        let lo_y = p0[1].min(p1[1]).min(p2[1]);
        let hi_y = p0[1].max(p1[1]).max(p2[1]);
        let c0 = ((lo_x - 0.5).ceil().max(0.0)) as usize;
        let r0 = ((lo_y - 0.5).ceil().max(0.0)) as usize;
        let c1 = (hi_x - 0.5).floor();
        let r1 = (hi_y - 0.5).floor();
        if c1 < 0.0 || r1 < 0.0 {
            continue;
        }
        let c1 = (c1 as usize).min(res - 1);
        let r1 = (r1 as usize).min(res - 1);
        let own = [owns_edge(p1, p2), owns_edge(p2, p0), owns_edge(p0, p1)];
        for r in r0..=r1 {
            for c in c0..=c1 {
                let p = [c as f64 + 0.5, r as f64 + 0.5];
                let e = [edge(p1, p2, p), edge(p2, p0, p), edge(p0, p1, p)];
                if (0..3).any(|k| e[k] < 0.0 || (e[k] == 0.0 && !own[k])) {
                    continue;
                }
                let w = e.map(|v| v / area);
                let z = w[0] * cam[idx[0]][2] + w[1] * cam[idx[1]][2] + w[2] * cam[idx[2]][2];
                let px = &mut fragments[r * res + c];
                if px.map_or(true, |cur| z > cur.z) {
                    let mut bary = [0.0; 3];
                    for k in 0..3 {
                        bary[slot[k]] = w[k];
                    }
                    *px = Some(Fragment {
                        face: fi as u32,
                        bary,
                        z,
                    });
                }
            }
        }
    }
    Ok(Raster {
        res,
        fragments,
        cam,
    })
}

/// Nearest-surface depth in `[0, 1]` (larger is closer); background 0.
pub fn render_depth(mesh: &FaceMesh, view: View) -> Result<Tensor> {
    let raster = rasterize(mesh, view)?;
    let data = raster
        .fragments
        .iter()
        .map(|f| {
            f.map_or(0.0, |f| {
                ((f.z + DEPTH_EXTENT) / (2.0 * DEPTH_EXTENT)).clamp(0.0, 1.0)
            })
        })
        .collect();
    Tensor::new(vec![raster.res, raster.res], data)
}

fn base_tone(e: Ethnicity) -> [f64; 3] {
    match e {
        Ethnicity::Latino => [0.78, 0.58, 0.45],
        Ethnicity::White => [0.92, 0.77, 0.67],
        Ethnicity::SouthAsian => [0.66, 0.48, 0.36],
        Ethnicity::Black => [0.43, 0.30, 0.23],
        Ethnicity::MiddleEastern => [0.80, 0.62, 0.49],
        Ethnicity::EastAsian => [0.90, 0.75, 0.61],
    }
}

fn unit_hash(seed: u64, stream: u64) -> f64 {
    (mix_seed(&[seed, stream]) >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth_band(v: f64, lo: f64, hi: f64, soft: f64) -> f64 {
    let rise = ((v - lo) / soft + 0.5).clamp(0.0, 1.0);
    let fall = ((hi - v) / soft + 0.5).clamp(0.0, 1.0);
    rise.min(fall)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Procedural skin albedo at texture coordinate `uv`.
fn skin_albedo(uv: [f64; 2], profile: &DemographicProfile, wrinkle: f64) -> [f64; 3] {
    let [x, y] = uv;
    let brightness = 0.94 + 0.12 * unit_hash(profile.identity_seed, 1);
    let warmth = 0.04 * (unit_hash(profile.identity_seed, 2) - 0.5);
    let tone = base_tone(profile.ethnicity);
    let mut c = [
        tone[0] * brightness + warmth,
        tone[1] * brightness,
        tone[2] * brightness - warmth,
    ];

    // forehead lines and crow's feet, scaled by the identity's wrinkle amplitude
    let forehead = smooth_band(y, 0.25, 0.45, 0.04) * (0.5 + 0.5 * (y * 140.0).sin());
    let ax = x.abs();
    let crows = smooth_band(ax, 0.26, 0.36, 0.03)
        * smooth_band(y, -0.02, 0.12, 0.03)
        * (0.5 + 0.5 * (y * 160.0 + ax * 40.0).sin());
    let shade = 1.0 - 0.45 * wrinkle * (forehead + crows).min(1.0);
    c = c.map(|v| v * shade);

    let hair = [0.16, 0.11, 0.08];
    let brow = smooth_band(ax, 0.07, 0.27, 0.02) * smooth_band(y, 0.165, 0.205, 0.01);
    c = mix(c, hair, 0.85 * brow);
    let lip = smooth_band(ax, -1.0, 0.13, 0.03) * smooth_band(y, -0.36, -0.27, 0.02);
    c = mix(c, [0.62, 0.28, 0.28], 0.6 * lip);
    let iris = ((x.abs() - 0.155).powi(2) + (y - 0.06).powi(2)).sqrt();
    c = mix(c, [0.12, 0.09, 0.07], smooth_band(-iris, -0.025, 1.0, 0.01));
    c.map(|v| v.clamp(0.0, 1.0))
}

fn face_normal(cam: &[Vec3], f: [u32; 3]) -> Vec3 {
    let [a, b, c] = f.map(|i| cam[i as usize]);
    let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    let len = norm(n);
    n.map(|v| v / len)
}

/// Lambert-shaded RGB, `[H, W, 3]` in `[0, 1]`, background black.
/// `albedo_override` replaces the procedural skin everywhere.
pub fn render_rgb(
    mesh: &FaceMesh,
    profile: &DemographicProfile,
    view: View,
    albedo_override: Option<[f64; 3]>,
) -> Result<Tensor> {
    let raster = rasterize(mesh, view)?;
    let light = {
        let l = [-0.3, 0.5, 1.0];
        let n = norm(l);
        l.map(|v| v / n)
    };
    let mut data = vec![0.0; raster.res * raster.res * 3];
    for (px, frag) in raster.fragments.iter().enumerate() {
        let Some(frag) = frag else { continue };
        let f = mesh.faces[frag.face as usize];
        let n = face_normal(&raster.cam, f);
        let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
        let albedo = albedo_override.unwrap_or_else(|| {
            let mut uv = [0.0; 2];
            for k in 0..3 {
                let t = mesh.uv[f[k] as usize];
                uv[0] += frag.bary[k] * t[0];
                uv[1] += frag.bary[k] * t[1];
            }
            skin_albedo(uv, profile, mesh.wrinkle_amplitude)
        });
        let shade = AMBIENT + DIFFUSE * lambert;
        for ch in 0..3 {
            data[px * 3 + ch] = (albedo[ch] * shade).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![raster.res, raster.res, 3], data)
}

/// Per-pixel displacement magnitude divided by [`max_displacement`], not clamped.
pub fn render_heatmap_raw(neutral: &FaceMesh, rigged: &FaceMesh, view: View) -> Result<Tensor> {
    if !neutral.same_topology(rigged) {
        return Err(Error::Geometry(format!(
            "heatmap meshes differ in topology ({} vs {} vertices)",
            neutral.num_vertices(),
            rigged.num_vertices()
        )));
    }
    let raster = rasterize(rigged, view)?;
    let scale = 1.0 / max_displacement();
    let mag: Vec<f64> = neutral
        .vertices
        .iter()
        .zip(&rigged.vertices)
        .map(|(a, b)| norm([b[0] - a[0], b[1] - a[1], b[2] - a[2]]) * scale)
        .collect();
    let data = raster
        .fragments
        .iter()
        .map(|frag| {
            frag.map_or(0.0, |frag| {
                let f = rigged.faces[frag.face as usize];
                (0..3)
                    .map(|k| frag.bary[k] * mag[f[k] as usize])
                    .sum::<f64>()
                    .max(0.0)
            })
        })
        .collect();
    Tensor::new(vec![raster.res, raster.res], data)
}

/// Displacement heatmap in `[0, 1]`, splatted through the rigged mesh.
pub fn render_heatmap(neutral: &FaceMesh, rigged: &FaceMesh, view: View) -> Result<Tensor> {
    let mut t = render_heatmap_raw(neutral, rigged, view)?;
    for v in t.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(t)
}

/// Pixels whose visible triangle touches a vertex selected by `vertex_mask`.
pub fn project_vertex_mask(mesh: &FaceMesh, vertex_mask: &[bool], view: View) -> Result<Vec<bool>> {
    if vertex_mask.len() != mesh.num_vertices() {
        return Err(Error::Dimension(format!(
            "vertex mask has {} entries for {} vertices",
            vertex_mask.len(),
            mesh.num_vertices()
        )));
    }
    let raster = rasterize(mesh, view)?;
    Ok(raster
        .fragments
        .iter()
        .map(|frag| {
            frag.is_some_and(|frag| {
                mesh.faces[frag.face as usize]
                    .iter()
                    .any(|&i| vertex_mask[i as usize])
            })
        })
        .collect())
}

/// Grows a square boolean mask by `radius` pixels (Chebyshev distance).
pub fn dilate(mask: &[bool], res: usize, radius: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for r in 0..res {
        for c in 0..res {
            if !mask[r * res + c] {
                continue;
            }
            for rr in r.saturating_sub(radius)..=(r + radius).min(res - 1) {
                for cc in c.saturating_sub(radius)..=(c + radius).min(res - 1) {
                    out[rr * res + cc] = true;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::au::{ActionUnit, AuVector};
    use crate::synth::demographics::{AgeGroup, Gender};
    use crate::synth::mesh::{apply_au_rig, make_identity_mesh};

    fn profile(seed: u64) -> DemographicProfile {
        DemographicProfile {
            age_group: AgeGroup::Elderly,
            ethnicity: Ethnicity::White,
            gender: Gender::Woman,
            identity_seed: seed,
        }
    }

    fn au(v: [f64; 6]) -> AuVector {
        AuVector::new(v).unwrap()
    }

    #[test]
    fn nose_tip_is_deepest() {
        let m = FaceMesh::template();
        let d = render_depth(&m, View::frontal(64)).unwrap();
        let max = d.data().iter().cloned().fold(0.0, f64::max);
        let tip = m.vertices[m.nose_tip()];
        let res = 64.0;
        let c = ((tip[0] + VIEW_EXTENT) * res / (2.0 * VIEW_EXTENT)) as usize;
        let r = ((VIEW_EXTENT - tip[1]) * res / (2.0 * VIEW_EXTENT)) as usize;
        // the tip vertex sits inside a pixel whose value is within one pixel's slope of the maximum
        let around: f64 = (r.saturating_sub(1)..=r + 1)
            .flat_map(|rr| (c.saturating_sub(1)..=c + 1).map(move |cc| (rr, cc)))
            .map(|(rr, cc)| d.data()[rr * 64 + cc])
            .fold(0.0, f64::max);
        assert_eq!(around, max);
        assert!(d.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn frontal_template_is_mirror_symmetric() {
        let m = FaceMesh::template();
        for res in [64, 97] {
            let d = render_depth(&m, View::frontal(res)).unwrap();
            for r in 0..res {
                for c in 0..res {
                    let a = d.data()[r * res + c];
                    let b = d.data()[r * res + res - 1 - c];
                    assert!((a - b).abs() <= 1e-12, "({r},{c}) {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn empty_mesh_is_geometry_error() {
        let mut m = FaceMesh::template();
        m.vertices.clear();
        assert!(matches!(
            render_depth(&m, View::frontal(16)),
            Err(Error::Geometry(_))
        ));
        assert!(View::new(91.0, 16).is_err());
        assert!(View::new(-90.0, 16).is_ok());
    }

    #[test]
    fn rgb_deterministic_and_override() {
        let p = profile(5);
        let m = make_identity_mesh(&p);
        let v = View::new(30.0, 48).unwrap();
        let a = render_rgb(&m, &p, v, None).unwrap();
        let b = render_rgb(&m, &p, v, None).unwrap();
        assert_eq!(a, b);
        let black = render_rgb(&m, &p, v, Some([0.0; 3])).unwrap();
        assert!(black.data().iter().all(|&x| x == 0.0));
        assert!(a.data().iter().any(|&x| x > 0.0));
    }

    #[test]
    fn rgb_changes_stay_near_active_regions() {
        let p = profile(11);
        let neutral = make_identity_mesh(&p);
        let a = au([4.0, 0.0, 0.0, 3.0, 0.0, 1.0]);
        let rigged = apply_au_rig(&neutral, &a).unwrap();
        let res = 64;
        let v = View::frontal(res);
        let x = render_rgb(&neutral, &p, v, None).unwrap();
        let y = render_rgb(&rigged, &p, v, None).unwrap();
        let mut vmask = vec![false; neutral.num_vertices()];
        for unit in [ActionUnit::Au4, ActionUnit::Au9, ActionUnit::Au43] {
            for (m, r) in vmask.iter_mut().zip(neutral.region_mask(unit)) {
                *m |= r;
            }
        }
        let allowed = dilate(&project_vertex_mask(&rigged, &vmask, v).unwrap(), res, 2);
        let mut changed = 0;
        for px in 0..res * res {
            let diff = (0..3).any(|ch| x.data()[px * 3 + ch] != y.data()[px * 3 + ch]);
            if diff {
                changed += 1;
                assert!(allowed[px], "pixel {px} changed outside the region");
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn heatmap_zero_when_unchanged() {
        let m = make_identity_mesh(&profile(3));
        let h = render_heatmap(&m, &m, View::frontal(32)).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_brow_only_and_linear() {
        let m = make_identity_mesh(&profile(9));
        let v = View::frontal(64);
        let one = apply_au_rig(&m, &au([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        let two = apply_au_rig(&m, &au([2.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        let h1 = render_heatmap_raw(&m, &one, v).unwrap();
        let h2 = render_heatmap_raw(&m, &two, v).unwrap();
        let brow = project_vertex_mask(&one, &m.region_mask(ActionUnit::Au4), v).unwrap();
        let mut nonzero = 0;
        for px in 0..64 * 64 {
            if h1.data()[px] > 0.0 {
                nonzero += 1;
                assert!(brow[px]);
            }
            assert!(
                (h2.data()[px] - 2.0 * h1.data()[px]).abs() <= 1e-12 * (1.0 + h2.data()[px].abs())
            );
        }
        assert!(nonzero > 0);
    }

    #[test]
    fn heatmap_ignores_face_order() {
        let m = make_identity_mesh(&profile(21));
        let rigged = apply_au_rig(&m, &au([3.0, 2.0, 4.0, 1.0, 5.0, 1.0])).unwrap();
        let v = View::frontal(64);
        let base = render_heatmap(&m, &rigged, v).unwrap();
        let (mut m2, mut r2) = (m.clone(), rigged.clone());
        m2.faces.reverse();
        r2.faces.reverse();
        let swapped = render_heatmap(&m2, &r2, v).unwrap();
        for (a, b) in base.data().iter().zip(swapped.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn heatmap_topology_mismatch() {
        let m = FaceMesh::template();
        let mut other = m.clone();
        other.faces.pop();
        assert!(matches!(
            render_heatmap(&m, &other, View::frontal(16)),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn heatmap_within_unit_range_at_max_rig() {
        let m = make_identity_mesh(&profile(4));
        let rigged = apply_au_rig(&m, &au([5.0, 5.0, 5.0, 5.0, 5.0, 1.0])).unwrap();
        let raw = render_heatmap_raw(&m, &rigged, View::frontal(64)).unwrap();
        assert!(raw.data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }
}
