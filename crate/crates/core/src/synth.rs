//! Synthetic ground truth: a face-like template, orthonormal true bases,
//! seeded two-domain datasets, the dataset and world file formats, and the
//! measurement helpers (principal angles, lip aperture) used to score a
//! trained model against the truth.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};
use crate::mesh::{compute_displacement, load_obj, DisplacementField, FaceMesh, Vec3};
use crate::netcore::{BlendshapeBasis, Domain};

pub const DATASET_MAGIC: &[u8; 8] = b"BFDATA01";
pub const WORLD_MAGIC: &[u8; 8] = b"BFWORLD1";

/// Template extents in millimetres.
const FACE_WIDTH: f64 = 150.0;
const FACE_HEIGHT: f64 = 200.0;
const DOME_DEPTH: f64 = 60.0;

/// Paired vertices across the mouth slit, upper[i] above lower[i].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LipPairs {
    pub upper: Vec<usize>,
    pub lower: Vec<usize>,
}

impl LipPairs {
    pub fn len(&self) -> usize {
        self.upper.len()
    }

    pub fn is_empty(&self) -> bool {
        self.upper.is_empty()
    }

    /// Upper then lower lip vertices.
    pub fn vertices(&self) -> Vec<usize> {
        self.upper.iter().chain(&self.lower).copied().collect()
    }
}

struct TemplateLayout {
    cols: usize,
    rows: usize,
    mouth_row: usize,
    mouth_cols: (usize, usize),
}

fn layout(n_vertices: usize) -> Result<TemplateLayout> {
    if n_vertices < 36 {
        return Err(Error::InvalidArgument(format!(
            "synthetic template needs at least 36 vertices, got {n_vertices}"
        )));
    }
    let mut cols = (n_vertices as f64).sqrt().ceil() as usize;
    // a lone vertex in the last row would have no triangle
    while n_vertices % cols == 1 {
        cols += 1;
    }
    let rows = n_vertices.div_ceil(cols);
    let mouth_row = ((rows - 1) as f64 * 0.3) as usize;
    let c0 = (cols as f64 * 0.3) as usize;
    let c1 = (cols as f64 * 0.7) as usize;
    Ok(TemplateLayout {
        cols,
        rows,
        mouth_row,
        mouth_cols: (c0, c1),
    })
}

/// Deterministic face-like height field: a grid draped over an ellipsoidal
/// dome, with the triangles of one row band removed to open a mouth slit.
///
/// Row 0 is the chin. Returns the mesh and the lip vertex pairs along the
/// slit.
pub fn face_template(n_vertices: usize) -> Result<(FaceMesh, LipPairs)> {
    let l = layout(n_vertices)?;
    let a = 0.5 * FACE_WIDTH * std::f64::consts::SQRT_2 * 1.05;
    let b = 0.5 * FACE_HEIGHT * std::f64::consts::SQRT_2 * 1.05;
    let vertices: Vec<Vec3> = (0..n_vertices)
        .map(|i| {
            let (row, col) = (i / l.cols, i % l.cols);
            let x = (col as f64 / (l.cols - 1) as f64 - 0.5) * FACE_WIDTH;
            let y = (row as f64 / (l.rows - 1) as f64 - 0.5) * FACE_HEIGHT;
            let z = DOME_DEPTH * (1.0 - (x / a).powi(2) - (y / b).powi(2)).sqrt();
            [x as f32, y as f32, z as f32]
        })
        .collect();

    let (c0, c1) = l.mouth_cols;
    let mut triangles = Vec::new();
    for row in 0..l.rows - 1 {
        for col in 0..l.cols - 1 {
            if row == l.mouth_row && (c0..c1).contains(&col) {
                continue;
            }
            let p = row * l.cols + col;
            let (q, s, t) = (p + 1, p + l.cols, p + l.cols + 1);
            if t < n_vertices {
                triangles.push([p, q, t]);
                triangles.push([p, t, s]);
            } else if s < n_vertices {
                triangles.push([p, q, s]);
            }
        }
    }
    let mesh = FaceMesh::new(vertices, triangles)?;
    let lips = LipPairs {
        upper: (c0 + 1..c1)
            .map(|c| (l.mouth_row + 1) * l.cols + c)
            .collect(),
        lower: (c0 + 1..c1).map(|c| l.mouth_row * l.cols + c).collect(),
    };
    Ok((mesh, lips))
}

/// Known generative model for both domains.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub template: FaceMesh,
    pub lips: LipPairs,
    pub k: usize,
    pub eps_scale: f64,
    pub seed: u64,
    /// Per-column weight standard deviation, `1 / (1 + j)`.
    pub amplitudes: Vec<f32>,
    /// `[B_A* | B_E*]`, orthonormal columns.
    pub basis: BlendshapeBasis<f32>,
}

impl SyntheticWorld {
    pub fn n_vertices(&self) -> usize {
        self.template.n_vertices()
    }

    /// Column-major `3 n_v x K` half of the true basis, as `f64`.
    pub fn true_half(&self, domain: Domain) -> Vec<f64> {
        self.basis.half_f64(domain)
    }

    /// `B_own own + B_cross cross`, accumulated in f64.
    pub fn synthesize(
        &self,
        domain: Domain,
        own: &[f32],
        cross: &[f32],
    ) -> Result<DisplacementField> {
        let k = self.k;
        if own.len() != k || cross.len() != k {
            return Err(Error::size(
                "synthetic weights",
                k,
                own.len().min(cross.len()),
            ));
        }
        let mut z = vec![0.0f64; 2 * k];
        let (a, e) = match domain {
            Domain::Speech => (own, cross),
            Domain::Expression => (cross, own),
        };
        for j in 0..k {
            z[j] = a[j] as f64;
            z[k + j] = e[j] as f64;
        }
        let data = self.basis.data();
        let flat: Vec<f32> = (0..self.basis.rows())
            .map(|r| {
                let row = &data[r * 2 * k..(r + 1) * 2 * k];
                row.iter().zip(&z).map(|(&b, &w)| b as f64 * w).sum::<f64>() as f32
            })
            .collect();
        DisplacementField::from_flat(&flat)
    }
}

fn rbf_features(vertices: &[Vec3], centres: &[(f64, f64)], sigma: f64) -> DMatrix<f64> {
    DMatrix::from_fn(vertices.len(), centres.len(), |v, c| {
        let dx = vertices[v][0] as f64 - centres[c].0;
        let dy = vertices[v][1] as f64 - centres[c].1;
        (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
    })
}

/// Builds the template and draws orthonormal smooth true bases.
///
/// Every column starts as a random combination of Gaussian bumps over the
/// face; speech column 0 is replaced by a jaw-drop mode that moves the
/// upper lip region up and the lower region down. Columns are then
/// orthonormalized in order, so column 0 keeps its direction.
pub fn gen_world(n_vertices: usize, k: usize, eps_scale: f64, seed: u64) -> Result<SyntheticWorld> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if 2 * k > 3 * n_vertices {
        return Err(Error::InvalidArgument(format!(
            "2K = {} exceeds 3 n_v = {}",
            2 * k,
            3 * n_vertices
        )));
    }
    if !(eps_scale >= 0.0 && eps_scale.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "eps_scale must be >= 0, got {eps_scale}"
        )));
    }
    let (template, lips) = face_template(n_vertices)?;
    let l = layout(n_vertices)?;
    let verts = template.vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let n_centres = 40 + 2 * k;
    let centres: Vec<(f64, f64)> = (0..n_centres)
        .map(|_| {
            (
                rng.gen_range(-0.5..0.5) * FACE_WIDTH,
                rng.gen_range(-0.5..0.5) * FACE_HEIGHT,
            )
        })
        .collect();
    let feats = rbf_features(verts, &centres, FACE_WIDTH / 5.0);
    let rows = 3 * n_vertices;
    let mut m = DMatrix::<f64>::zeros(rows, 2 * k);
    for col in 0..2 * k {
        let coef = DMatrix::<f64>::from_fn(n_centres, 3, |_, _| rng.sample(StandardNormal));
        let f = &feats * coef;
        for v in 0..n_vertices {
            for d in 0..3 {
                m[(3 * v + d, col)] = f[(v, d)];
            }
        }
    }

    // jaw-drop mode
    let (c0, c1) = l.mouth_cols;
    let ym = 0.5 * (verts[l.mouth_row * l.cols][1] + verts[(l.mouth_row + 1) * l.cols][1]) as f64;
    let sx = 0.5 * (c1 - c0) as f64 / l.cols as f64 * FACE_WIDTH;
    let sy = 0.15 * FACE_HEIGHT;
    for v in 0..n_vertices {
        let dx = verts[v][0] as f64;
        let dy = verts[v][1] as f64 - ym;
        let g = (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp();
        let sign = if v / l.cols > l.mouth_row { 1.0 } else { -1.0 };
        m[(3 * v, 0)] = 0.0;
        m[(3 * v + 1, 0)] = sign * g;
        m[(3 * v + 2, 0)] = 0.0;
    }

    let qr = m.qr();
    let r = qr.r();
    let q = qr.q();
    let rmax = (0..2 * k).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let achieved = (0..2 * k)
        .filter(|&j| r[(j, j)].abs() > 1e-10 * rmax)
        .count();
    if achieved < 2 * k {
        return Err(Error::RankDeficient {
            achieved,
            required: 2 * k,
        });
    }
    let mut data = vec![0.0f32; rows * 2 * k];
    for j in 0..2 * k {
        let s = r[(j, j)].signum();
        for i in 0..rows {
            data[i * 2 * k + j] = (s * q[(i, j)]) as f32;
        }
    }
    Ok(SyntheticWorld {
        template,
        lips,
        k,
        eps_scale,
        seed,
        amplitudes: (0..k).map(|j| 1.0 / (1.0 + j as f32)).collect(),
        basis: BlendshapeBasis::new(rows, k, data)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTruth {
    pub own: Vec<f32>,
    pub cross: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub domain: Domain,
    pub field: DisplacementField,
    pub truth: Option<SampleTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub template: FaceMesh,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(template: FaceMesh, samples: Vec<Sample>) -> Result<Self> {
        let n = template.n_vertices();
        for s in &samples {
            if s.field.len() != n {
                return Err(Error::size("sample vertices", n, s.field.len()));
            }
        }
        let ks: Vec<usize> = samples
            .iter()
            .filter_map(|s| s.truth.as_ref())
            .map(|t| t.own.len())
            .collect();
        if let Some(&k) = ks.first() {
            let bad = samples
                .iter()
                .filter_map(|s| s.truth.as_ref())
                .any(|t| t.own.len() != k || t.cross.len() != k);
            if bad {
                return Err(Error::InvalidArgument(
                    "ground-truth weight lengths differ".into(),
                ));
            }
        }
        Ok(Self { template, samples })
    }

    pub fn n_vertices(&self) -> usize {
        self.template.n_vertices()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.samples.iter().filter(|s| s.domain == domain).count()
    }

    pub fn domain_samples(&self, domain: Domain) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.domain == domain).collect()
    }

    /// Only the samples of one domain.
    pub fn filter(&self, domain: Domain) -> Dataset {
        Dataset {
            template: self.template.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| s.domain == domain)
                .cloned()
                .collect(),
        }
    }

    /// Concatenates `other`; templates must be identical.
    pub fn merge(mut self, other: Dataset) -> Result<Dataset> {
        if self.template != other.template {
            return Err(Error::TopologyMismatch(
                "datasets use different templates".into(),
            ));
        }
        self.samples.extend(other.samples);
        Dataset::new(self.template, self.samples)
    }

    pub fn mean_norm(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples
            .iter()
            .map(|s| s.field.mean_norm())
            .sum::<f64>()
            / self.samples.len() as f64
    }
}

fn draw_weights(rng: &mut ChaCha8Rng, amplitudes: &[f32], scale: f64) -> Vec<f32> {
    amplitudes
        .iter()
        .map(|&a| {
            let z: f64 = rng.sample(StandardNormal);
            (z * a as f64 * scale) as f32
        })
        .collect()
}

/// `n` samples of one domain: own weights at unit scale, cross weights at
/// `eps_scale`, both zero-mean normal with the world's column amplitudes.
pub fn gen_domain(world: &SyntheticWorld, domain: Domain, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let own = draw_weights(&mut rng, &world.amplitudes, 1.0);
        let cross = draw_weights(&mut rng, &world.amplitudes, world.eps_scale);
        let field = world.synthesize(domain, &own, &cross)?;
        samples.push(Sample {
            domain,
            field,
            truth: Some(SampleTruth { own, cross }),
        });
    }
    Dataset::new(world.template.clone(), samples)
}

/// Speech samples followed by expression samples, `n_per_domain` each.
pub fn gen_dataset(world: &SyntheticWorld, n_per_domain: usize, seed: u64) -> Result<Dataset> {
    let speech = gen_domain(world, Domain::Speech, n_per_domain, seed)?;
    let expr = gen_domain(
        world,
        Domain::Expression,
        n_per_domain,
        seed.wrapping_add(1),
    )?;
    speech.merge(expr)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    n_vertices: usize,
    n_samples: usize,
    triangles: Vec<[usize; 3]>,
    domains: Vec<Domain>,
    has_truth: Vec<bool>,
    k: Option<usize>,
}

pub fn dataset_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let n = ds.n_vertices();
    let k = ds
        .samples
        .iter()
        .find_map(|s| s.truth.as_ref().map(|t| t.own.len()));
    let meta = DatasetMeta {
        n_vertices: n,
        n_samples: ds.len(),
        triangles: ds.template.triangles().to_vec(),
        domains: ds.samples.iter().map(|s| s.domain).collect(),
        has_truth: ds.samples.iter().map(|s| s.truth.is_some()).collect(),
        k,
    };
    let template: Vec<f32> = ds.template.vertices().iter().flatten().copied().collect();
    let mut fields = Vec::with_capacity(ds.len() * 3 * n);
    let mut weights = Vec::new();
    for s in &ds.samples {
        fields.extend(s.field.to_flat());
        if let Some(t) = &s.truth {
            weights.extend_from_slice(&t.own);
            weights.extend_from_slice(&t.cross);
        }
    }
    let mut w = ContainerWriter::new(DATASET_MAGIC);
    w.blob("template", &template)
        .blob("fields", &fields)
        .blob("weights", &weights);
    w.finish(&meta)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, dataset_bytes(ds)?)?;
    Ok(())
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ContainerReader::<DatasetMeta>::parse(bytes, DATASET_MAGIC)?;
    let n = r.meta.n_vertices;
    let count = r.meta.n_samples;
    if r.meta.domains.len() != count || r.meta.has_truth.len() != count {
        return Err(Error::Header(
            "per-sample tag count differs from n_samples".into(),
        ));
    }
    let n_truth = r.meta.has_truth.iter().filter(|&&t| t).count();
    let k = match (r.meta.k, n_truth) {
        (_, 0) => 0,
        (Some(k), _) => k,
        (None, _) => return Err(Error::Header("ground truth present without k".into())),
    };
    let template = r.take("template", 3 * n)?;
    let fields = r.take("fields", count * 3 * n)?;
    let weights = r.take("weights", n_truth * 2 * k)?;
    let meta = r.finish()?;
    let vertices = template
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let mesh = FaceMesh::new(vertices, meta.triangles)?;
    let mut samples = Vec::with_capacity(count);
    let mut woff = 0;
    for (i, (&domain, &has)) in meta.domains.iter().zip(&meta.has_truth).enumerate() {
        let field = DisplacementField::from_flat(&fields[i * 3 * n..(i + 1) * 3 * n])?;
        let truth = has.then(|| {
            let t = SampleTruth {
                own: weights[woff..woff + k].to_vec(),
                cross: weights[woff + k..woff + 2 * k].to_vec(),
            };
            woff += 2 * k;
            t
        });
        samples.push(Sample {
            domain,
            field,
            truth,
        });
    }
    Dataset::new(mesh, samples)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&fs::read(path)?)
}

/// Registered OBJ frames in `dir` (sorted by file name) as displacements
/// from `template_path`. The template itself is skipped if it lives in `dir`.
pub fn load_obj_sequence(dir: &Path, template_path: &Path, domain: Domain) -> Result<Dataset> {
    if !template_path.is_file() {
        return Err(Error::InvalidArgument(format!(
            "missing template {}",
            template_path.display()
        )));
    }
    let template = load_obj(template_path)?;
    let template_canon = fs::canonicalize(template_path)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("obj")))
        .filter(|p| fs::canonicalize(p).map_or(true, |c| c != template_canon))
        .collect();
    paths.sort();
    let mut samples = Vec::with_capacity(paths.len());
    for p in &paths {
        let mesh = load_obj(p)?;
        samples.push(Sample {
            domain,
            field: compute_displacement(&mesh, &template)?,
            truth: None,
        });
    }
    Dataset::new(template, samples)
}

#[derive(Debug, Serialize, Deserialize)]
struct WorldMeta {
    n_vertices: usize,
    k: usize,
    eps_scale: f64,
    seed: u64,
    triangles: Vec<[usize; 3]>,
    lips: LipPairs,
    amplitudes: Vec<f32>,
}

pub fn world_bytes(world: &SyntheticWorld) -> Result<Vec<u8>> {
    let meta = WorldMeta {
        n_vertices: world.n_vertices(),
        k: world.k,
        eps_scale: world.eps_scale,
        seed: world.seed,
        triangles: world.template.triangles().to_vec(),
        lips: world.lips.clone(),
        amplitudes: world.amplitudes.clone(),
    };
    let template: Vec<f32> = world
        .template
        .vertices()
        .iter()
        .flatten()
        .copied()
        .collect();
    let mut w = ContainerWriter::new(WORLD_MAGIC);
    w.blob("template", &template)
        .blob("basis", world.basis.data());
    w.finish(&meta)
}

pub fn save_world(path: &Path, world: &SyntheticWorld) -> Result<()> {
    fs::write(path, world_bytes(world)?)?;
    Ok(())
}

pub fn load_world(path: &Path) -> Result<SyntheticWorld> {
    let mut r = ContainerReader::<WorldMeta>::open(path, WORLD_MAGIC)?;
    let (n, k) = (r.meta.n_vertices, r.meta.k);
    let template = r.take("template", 3 * n)?;
    let basis = r.take("basis", 3 * n * 2 * k)?;
    let meta = r.finish()?;
    if meta.amplitudes.len() != k {
        return Err(Error::Header("amplitude count differs from k".into()));
    }
    let vertices = template
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    Ok(SyntheticWorld {
        template: FaceMesh::new(vertices, meta.triangles)?,
        lips: meta.lips,
        k,
        eps_scale: meta.eps_scale,
        seed: meta.seed,
        amplitudes: meta.amplitudes,
        basis: BlendshapeBasis::new(3 * n, k, basis)?,
    })
}

fn orthonormal_span(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let cols = m.ncols();
    let qr = m.qr();
    let r = qr.r();
    let rmax = (0..cols).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    let achieved = (0..cols)
        .filter(|&j| r[(j, j)].abs() > 1e-10 * rmax)
        .count();
    if rmax == 0.0 || achieved < cols {
        log::debug!("{what} rank {achieved} of {cols}");
        return Err(Error::RankDeficient {
            achieved: if rmax == 0.0 { 0 } else { achieved },
            required: cols,
        });
    }
    Ok(qr.q())
}

/// Principal angles in degrees, ascending, between the column spans of two
/// column-major matrices with `rows` rows.
pub fn subspace_angles(rows: usize, learned: &[f64], truth: &[f64]) -> Result<Vec<f64>> {
    if rows == 0 || learned.len() % rows != 0 || truth.len() % rows != 0 {
        return Err(Error::InvalidArgument(format!(
            "column data ({} and {} values) not divisible by {rows} rows",
            learned.len(),
            truth.len()
        )));
    }
    let (a, b) = (learned.len() / rows, truth.len() / rows);
    if a == 0 || b == 0 {
        return Err(Error::InvalidArgument("empty subspace".into()));
    }
    let qa = orthonormal_span(DMatrix::from_column_slice(rows, a, learned), "learned")?;
    let qb = orthonormal_span(DMatrix::from_column_slice(rows, b, truth), "truth")?;
    let sv = (qa.transpose() * qb).singular_values();
    let mut angles: Vec<f64> = sv
        .iter()
        .map(|&s| s.clamp(-1.0, 1.0).acos().to_degrees())
        .collect();
    angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(angles)
}

/// Largest vertical gap between paired lip vertices of the deformed template.
pub fn lip_aperture(template: &FaceMesh, field: &DisplacementField, lips: &LipPairs) -> f64 {
    let v = template.vertices();
    let d = field.offsets();
    lips.upper
        .iter()
        .zip(&lips.lower)
        .map(|(&u, &l)| (v[u][1] + d[u][1]) as f64 - (v[l][1] + d[l][1]) as f64)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Largest per-pair deviation of the lip gap from the reference deformation.
pub fn lip_closure_error(
    template: &FaceMesh,
    lips: &LipPairs,
    output: &DisplacementField,
    reference: &DisplacementField,
) -> f64 {
    let v = template.vertices();
    let (o, r) = (output.offsets(), reference.offsets());
    lips.upper
        .iter()
        .zip(&lips.lower)
        .map(|(&u, &l)| {
            let go = (v[u][1] + o[u][1]) as f64 - (v[l][1] + o[l][1]) as f64;
            let gr = (v[u][1] + r[u][1]) as f64 - (v[l][1] + r[l][1]) as f64;
            (go - gr).abs()
        })
        .fold(0.0, f64::max)
}

/// Closed-mouth speech paired with an expression frame that carries an
/// injected jaw-drop secondary deformation.
#[derive(Debug, Clone)]
pub struct ClosedMouthScenario {
    pub speech: DisplacementField,
    pub expression: DisplacementField,
    /// `B_A* w_A + B_E* w_E`, the deformation fusion should produce.
    pub reference: DisplacementField,
    pub injected: f32,
}

/// Speech weights have the jaw-drop column at zero and no secondary part;
/// the expression frame has its own weights plus `injected` on the speech
/// jaw-drop column and nothing else.
pub fn closed_mouth_scenario(
    world: &SyntheticWorld,
    injected: f32,
    seed: u64,
) -> Result<ClosedMouthScenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = world.k;
    let mut w_a = draw_weights(&mut rng, &world.amplitudes, 1.0);
    w_a[0] = 0.0;
    let w_e = draw_weights(&mut rng, &world.amplitudes, 1.0);
    let mut eps_e = vec![0.0f32; k];
    eps_e[0] = injected;
    let zero = vec![0.0f32; k];
    let speech = world.synthesize(Domain::Speech, &w_a, &zero)?;
    let expression = world.synthesize(Domain::Expression, &w_e, &eps_e)?;
    let expr_own = world.synthesize(Domain::Expression, &w_e, &zero)?;
    let reference = DisplacementField::new(
        speech
            .offsets()
            .iter()
            .zip(expr_own.offsets())
            .map(|(a, b)| [a[0] + b[0], a[1] + b[1], a[2] + b[2]])
            .collect(),
    )?;
    Ok(ClosedMouthScenario {
        speech,
        expression,
        reference,
        injected,
    })
}
