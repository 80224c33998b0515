//! Pixel-to-vertex barycentric lookup on a square grid and the resampling
//! of displacement fields into geometry displacement maps.
//!
//! The template is projected orthographically onto its frontal (xy) plane
//! and fitted into a square. Each pixel center is located in the projected
//! triangles; when several triangles cover a pixel the one nearest the
//! viewer (largest interpolated z) wins, ties going to the lowest triangle
//! index.

use crate::error::{Error, Result};
use crate::mesh::{DisplacementField, FaceMesh, Vec3};

const BARY_TOL: f64 = 1e-6;
pub const INVALID_INDEX: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelEntry {
    pub valid: bool,
    pub vertex_indices: [u32; 3],
    pub bary_weights: [f32; 3],
}

impl PixelEntry {
    pub const INVALID: PixelEntry = PixelEntry {
        valid: false,
        vertex_indices: [INVALID_INDEX; 3],
        bary_weights: [0.0; 3],
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingTable {
    grid: usize,
    n_vertices: usize,
    /// Row-major, row 0 at the top of the face (largest y).
    entries: Vec<PixelEntry>,
}

impl MappingTable {
    pub fn from_entries(grid: usize, n_vertices: usize, entries: Vec<PixelEntry>) -> Result<Self> {
        if entries.len() != grid * grid {
            return Err(Error::size(
                "mapping table entries",
                grid * grid,
                entries.len(),
            ));
        }
        for e in &entries {
            if e.valid {
                if let Some(&i) = e.vertex_indices.iter().find(|&&i| i as usize >= n_vertices) {
                    return Err(Error::IndexOutOfRange {
                        index: i as usize,
                        len: n_vertices,
                    });
                }
            } else if e.bary_weights != [0.0; 3] {
                return Err(Error::InvalidArgument(
                    "invalid pixel with nonzero weights".into(),
                ));
            }
        }
        Ok(Self {
            grid,
            n_vertices,
            entries,
        })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn entries(&self) -> &[PixelEntry] {
        &self.entries
    }

    pub fn entry(&self, row: usize, col: usize) -> &PixelEntry {
        &self.entries[row * self.grid + col]
    }

    pub fn valid_count(&self) -> usize {
        self.entries.iter().filter(|e| e.valid).count()
    }
}

/// Placement of the projected template inside the pixel grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridFrame {
    pub x0: f64,
    pub y_top: f64,
    pub step: f64,
    pub grid: usize,
}

impl GridFrame {
    pub fn for_template(template: &FaceMesh, grid: usize) -> Result<Self> {
        let (mut xmin, mut xmax, mut ymin, mut ymax) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for v in template.vertices() {
            xmin = xmin.min(v[0] as f64);
            xmax = xmax.max(v[0] as f64);
            ymin = ymin.min(v[1] as f64);
            ymax = ymax.max(v[1] as f64);
        }
        let (w, h) = (xmax - xmin, ymax - ymin);
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::DegenerateProjection(format!(
                "frontal bounding box is {w} x {h}"
            )));
        }
        let side = w.max(h);
        let cx = 0.5 * (xmin + xmax);
        let cy = 0.5 * (ymin + ymax);
        Ok(Self {
            x0: cx - 0.5 * side,
            y_top: cy + 0.5 * side,
            step: side / grid as f64,
            grid,
        })
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x0 + (col as f64 + 0.5) * self.step,
            self.y_top - (row as f64 + 0.5) * self.step,
        )
    }
}

pub fn build_mapping_table(template: &FaceMesh, grid: usize) -> Result<MappingTable> {
    if grid < 2 {
        return Err(Error::InvalidArgument(format!("grid size {grid} < 2")));
    }
    if template.triangles().is_empty() {
        return Err(Error::InvalidMesh("template has no triangles".into()));
    }
    let frame = GridFrame::for_template(template, grid)?;
    let verts = template.vertices();
    let z_tol = 1e-9 * frame.step * grid as f64;

    let mut entries = vec![PixelEntry::INVALID; grid * grid];
    let mut depth = vec![f64::NEG_INFINITY; grid * grid];

    for tri in template.triangles() {
        let p = tri.map(|i| {
            let v = verts[i];
            [v[0] as f64, v[1] as f64, v[2] as f64]
        });
        let area =
            (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        if area.abs() <= f64::EPSILON * frame.step * frame.step {
            // edge-on in the frontal projection
            continue;
        }
        let xs = [p[0][0], p[1][0], p[2][0]];
        let ys = [p[0][1], p[1][1], p[2][1]];
        let (txmin, txmax) = min_max(&xs);
        let (tymin, tymax) = min_max(&ys);
        let col_lo = ((txmin - frame.x0) / frame.step - 0.5).floor().max(0.0) as usize;
        let col_hi =
            (((txmax - frame.x0) / frame.step - 0.5).ceil() as isize).min(grid as isize - 1);
        let row_lo = ((frame.y_top - tymax) / frame.step - 0.5).floor().max(0.0) as usize;
        let row_hi =
            (((frame.y_top - tymin) / frame.step - 0.5).ceil() as isize).min(grid as isize - 1);
        if col_hi < 0 || row_hi < 0 {
            continue;
        }
        for row in row_lo..=row_hi as usize {
            for col in col_lo..=col_hi as usize {
                let (px, py) = frame.pixel_center(row, col);
                let Some(l) = barycentric(&p, area, px, py) else {
                    continue;
                };
                let z = l[0] * p[0][2] + l[1] * p[1][2] + l[2] * p[2][2];
                let k = row * grid + col;
                if entries[k].valid && z <= depth[k] + z_tol {
                    continue;
                }
                depth[k] = z;
                entries[k] = make_entry(tri, l);
            }
        }
    }
    MappingTable::from_entries(grid, template.n_vertices(), entries)
}

fn min_max(v: &[f64; 3]) -> (f64, f64) {
    (v[0].min(v[1]).min(v[2]), v[0].max(v[1]).max(v[2]))
}

/// Clamped and renormalized barycentric coordinates, or `None` outside.
fn barycentric(p: &[[f64; 3]; 3], area: f64, x: f64, y: f64) -> Option<[f64; 3]> {
    let edge = |a: &[f64; 3], b: &[f64; 3]| (b[0] - x) * (a[1] - y) - (a[0] - x) * (b[1] - y);
    // l0 is the signed area of (p, p1, p2) over the full area, etc.
    let mut l = [
        -edge(&p[1], &p[2]) / area,
        -edge(&p[2], &p[0]) / area,
        -edge(&p[0], &p[1]) / area,
    ];
    if l.iter().any(|&w| w < -BARY_TOL) {
        return None;
    }
    for w in &mut l {
        if *w < 0.0 {
            *w = 0.0;
        }
    }
    let s: f64 = l.iter().sum();
    Some([l[0] / s, l[1] / s, l[2] / s])
}

/// Rotates the corners so the heaviest one comes first; cyclic rotation
/// keeps the triangle's winding.
fn make_entry(tri: &[usize; 3], l: [f64; 3]) -> PixelEntry {
    let mut first = 0;
    for k in 1..3 {
        if l[k] > l[first] {
            first = k;
        }
    }
    let order = [first, (first + 1) % 3, (first + 2) % 3];
    PixelEntry {
        valid: true,
        vertex_indices: order.map(|k| tri[k] as u32),
        bary_weights: order.map(|k| l[k] as f32),
    }
}

/// Geometry displacement map: `grid x grid` pixels of 3D offsets, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementMap {
    grid: usize,
    pixels: Vec<Vec3>,
}

impl DisplacementMap {
    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn pixels(&self) -> &[Vec3] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> Vec3 {
        self.pixels[row * self.grid + col]
    }

    /// Channel-planar layout `[x-plane, y-plane, z-plane]` fed to the encoders.
    pub fn to_planes(&self) -> Vec<f32> {
        let n = self.pixels.len();
        let mut out = vec![0.0; 3 * n];
        self.write_planes(&mut out);
        out
    }

    pub fn write_planes(&self, out: &mut [f32]) {
        let n = self.pixels.len();
        for (p, v) in self.pixels.iter().enumerate() {
            out[p] = v[0];
            out[n + p] = v[1];
            out[2 * n + p] = v[2];
        }
    }
}

pub fn map_to_grid(field: &DisplacementField, table: &MappingTable) -> Result<DisplacementMap> {
    if field.len() != table.n_vertices() {
        return Err(Error::size(
            "displacement length",
            table.n_vertices(),
            field.len(),
        ));
    }
    let off = field.offsets();
    let pixels = table
        .entries()
        .iter()
        .map(|e| {
            if !e.valid {
                return [0.0; 3];
            }
            let mut acc = [0.0f32; 3];
            for (&i, &w) in e.vertex_indices.iter().zip(&e.bary_weights) {
                let v = off[i as usize];
                for c in 0..3 {
                    acc[c] += w * v[c];
                }
            }
            acc
        })
        .collect();
    Ok(DisplacementMap {
        grid: table.grid(),
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::face_template;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn right_triangle() -> FaceMesh {
        // covers the lower-left half of the unit square
        FaceMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn partition_of_unity_small_grid() {
        let t = build_mapping_table(&right_triangle(), 2).unwrap();
        // pixel centers at 0.25/0.75; lower-left half contains 3 of them
        assert_eq!(t.valid_count(), 3);
        for e in t.entries() {
            if e.valid {
                let s: f32 = e.bary_weights.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(e.bary_weights.iter().all(|&w| w >= -1e-6));
            } else {
                assert_eq!(*e, PixelEntry::INVALID);
            }
        }
        assert!(!t.entry(0, 1).valid);
    }

    #[test]
    fn vertex_coincidence() {
        // vertex 2 lands exactly on the center of pixel (0, 0) of a 4-grid
        // spanning [0, 4] x [0, 4]
        let mesh = FaceMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [4.0, 0.0, 0.0],
                [0.5, 3.5, 0.0],
                [4.0, 4.0, 0.0],
            ],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap();
        let t = build_mapping_table(&mesh, 4).unwrap();
        let e = t.entry(0, 0);
        assert!(e.valid);
        assert_eq!(e.vertex_indices[0], 2);
        assert_eq!(e.bary_weights, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn occlusion_prefers_nearest() {
        let mesh = FaceMesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 5.0],
                [1.0, 0.0, 5.0],
                [0.0, 1.0, 5.0],
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let t = build_mapping_table(&mesh, 8).unwrap();
        for e in t.entries().iter().filter(|e| e.valid) {
            assert!(e.vertex_indices.iter().all(|&i| i >= 3));
        }
        // same depth: lowest triangle index wins
        let flat = FaceMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            vec![[0, 1, 2], [1, 2, 0]],
        )
        .unwrap();
        let t = build_mapping_table(&flat, 8).unwrap();
        let single = build_mapping_table(&right_triangle(), 8).unwrap();
        assert_eq!(t.entries(), single.entries());
    }

    #[test]
    fn degenerate_inputs() {
        let line = FaceMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 1.0]],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(matches!(
            build_mapping_table(&line, 8),
            Err(Error::DegenerateProjection(_))
        ));
        assert!(build_mapping_table(&right_triangle(), 1).is_err());
        let no_tris = FaceMesh::new(vec![[0.0; 3], [1.0, 1.0, 0.0]], vec![]).unwrap();
        assert!(build_mapping_table(&no_tris, 4).is_err());
    }

    #[test]
    fn reprojection_matches_pixel_centers() {
        let (template, _) = face_template(300).unwrap();
        let table = build_mapping_table(&template, 16).unwrap();
        let frame = GridFrame::for_template(&template, 16).unwrap();
        assert!(table.valid_count() > 100);
        let v = template.vertices();
        for row in 0..16 {
            for col in 0..16 {
                let e = table.entry(row, col);
                if !e.valid {
                    continue;
                }
                let p: Vec<[f64; 2]> = e
                    .vertex_indices
                    .iter()
                    .map(|&i| [v[i as usize][0] as f64, v[i as usize][1] as f64])
                    .collect();
                let w = e.bary_weights.map(|w| w as f64);
                let x = p[0][0] + w[1] * (p[1][0] - p[0][0]) + w[2] * (p[2][0] - p[0][0]);
                let y = p[0][1] + w[1] * (p[1][1] - p[0][1]) + w[2] * (p[2][1] - p[0][1]);
                let (cx, cy) = frame.pixel_center(row, col);
                assert!(((x - cx).powi(2) + (y - cy).powi(2)).sqrt() <= 1e-6 * frame.step);
                let tri = [
                    e.vertex_indices[0] as usize,
                    e.vertex_indices[1] as usize,
                    e.vertex_indices[2] as usize,
                ];
                let found = template
                    .triangles()
                    .iter()
                    .any(|t| (0..3).any(|r| [t[r], t[(r + 1) % 3], t[(r + 2) % 3]] == tri));
                assert!(found);
            }
        }
    }

    #[test]
    fn deterministic() {
        let (template, _) = face_template(200).unwrap();
        assert_eq!(
            build_mapping_table(&template, 16).unwrap(),
            build_mapping_table(&template, 16).unwrap()
        );
    }

    #[test]
    fn map_zero_constant_and_affine() {
        let (template, _) = face_template(300).unwrap();
        let table = build_mapping_table(&template, 16).unwrap();
        let frame = GridFrame::for_template(&template, 16).unwrap();
        let n = template.n_vertices();

        let zero = map_to_grid(&DisplacementField::zeros(n), &table).unwrap();
        assert!(zero.pixels().iter().all(|p| *p == [0.0; 3]));

        let c = [1.5f32, -2.0, 0.25];
        let m = map_to_grid(&DisplacementField::new(vec![c; n]).unwrap(), &table).unwrap();
        for (p, e) in m.pixels().iter().zip(table.entries()) {
            if e.valid {
                for k in 0..3 {
                    assert!((p[k] - c[k]).abs() < 1e-5);
                }
            } else {
                assert_eq!(*p, [0.0; 3]);
            }
        }

        // offset = M [x, y] + b
        let mm = [[0.01, -0.02], [0.03, 0.005], [-0.015, 0.02]];
        let b = [0.5, -0.25, 1.0];
        let affine =
            |x: f64, y: f64| -> [f64; 3] { [0, 1, 2].map(|r| mm[r][0] * x + mm[r][1] * y + b[r]) };
        let field = DisplacementField::new(
            template
                .vertices()
                .iter()
                .map(|v| affine(v[0] as f64, v[1] as f64).map(|c| c as f32))
                .collect(),
        )
        .unwrap();
        let m = map_to_grid(&field, &table).unwrap();
        for row in 0..16 {
            for col in 0..16 {
                if !table.entry(row, col).valid {
                    continue;
                }
                let (cx, cy) = frame.pixel_center(row, col);
                let expect = affine(cx, cy);
                let got = m.pixel(row, col);
                for k in 0..3 {
                    assert!(
                        (got[k] as f64 - expect[k]).abs() < 1e-5,
                        "{got:?} vs {expect:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn map_is_linear() {
        let (template, _) = face_template(250).unwrap();
        let table = build_mapping_table(&template, 16).unwrap();
        let n = template.n_vertices();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand_field = || {
            DisplacementField::new(
                (0..n)
                    .map(|_| {
                        [
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                            rng.gen_range(-1.0..1.0),
                        ]
                    })
                    .collect(),
            )
            .unwrap()
        };
        let (f, g) = (rand_field(), rand_field());
        let (a, b) = (0.7f32, -1.3f32);
        let combo = DisplacementField::new(
            f.offsets()
                .iter()
                .zip(g.offsets())
                .map(|(x, y)| [0, 1, 2].map(|k| a * x[k] + b * y[k]))
                .collect(),
        )
        .unwrap();
        let (mf, mg, mc) = (
            map_to_grid(&f, &table).unwrap(),
            map_to_grid(&g, &table).unwrap(),
            map_to_grid(&combo, &table).unwrap(),
        );
        for p in 0..mc.pixels().len() {
            for k in 0..3 {
                let lin = a * mf.pixels()[p][k] + b * mg.pixels()[p][k];
                assert!((mc.pixels()[p][k] - lin).abs() < 1e-6);
            }
        }
        assert!(map_to_grid(&DisplacementField::zeros(n + 1), &table).is_err());
    }
}
