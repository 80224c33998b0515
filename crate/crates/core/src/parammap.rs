//! Linear map from learned blendshape weights to an external linear face
//! model's parameters, fitted in closed form.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{ContainerReader, ContainerWriter, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::mesh::{DisplacementField, VertexWeightMask};
use crate::netcore::{BlendshapeBasis, LatentWeights};

pub const BASIS_MAGIC: &[u8; 8] = b"BFBASIS1";

/// `3 n_v x P` deformation basis of the target parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBasis {
    n_vertices: usize,
    labels: Vec<String>,
    /// Column-major.
    data: Vec<f32>,
}

impl TargetBasis {
    pub fn new(n_vertices: usize, labels: Vec<String>, data: Vec<f32>) -> Result<Self> {
        let p = labels.len();
        if p == 0 {
            return Err(Error::InvalidArgument(
                "target basis needs at least one parameter".into(),
            ));
        }
        if data.len() != 3 * n_vertices * p {
            return Err(Error::size(
                "target basis values",
                3 * n_vertices * p,
                data.len(),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("target basis".into()));
        }
        Ok(Self {
            n_vertices,
            labels,
            data,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn p(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_iterator(
            3 * self.n_vertices,
            self.p(),
            self.data.iter().map(|&v| v as f64),
        )
    }

    /// Deformation produced by a parameter vector.
    pub fn deform(&self, params: &[f32]) -> Result<DisplacementField> {
        if params.len() != self.p() {
            return Err(Error::size("target parameters", self.p(), params.len()));
        }
        let rows = 3 * self.n_vertices;
        let mut out = vec![0.0f64; rows];
        for (j, &w) in params.iter().enumerate() {
            for (o, &b) in out.iter_mut().zip(&self.data[j * rows..(j + 1) * rows]) {
                *o += b as f64 * w as f64;
            }
        }
        DisplacementField::from_flat(&out.iter().map(|&v| v as f32).collect::<Vec<_>>())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BasisMeta {
    n_vertices: usize,
    p: usize,
    labels: Vec<String>,
}

pub fn basis_bytes(t: &TargetBasis) -> Result<Vec<u8>> {
    let meta = BasisMeta {
        n_vertices: t.n_vertices,
        p: t.p(),
        labels: t.labels.clone(),
    };
    let mut w = ContainerWriter::new(BASIS_MAGIC);
    w.blob("basis", &t.data);
    w.finish(&meta)
}

pub fn save_target_basis(path: &Path, t: &TargetBasis) -> Result<()> {
    fs::write(path, basis_bytes(t)?)?;
    Ok(())
}

pub fn parse_target_basis(bytes: &[u8]) -> Result<TargetBasis> {
    let mut r = ContainerReader::<BasisMeta>::parse(bytes, BASIS_MAGIC)?;
    if r.meta.labels.len() != r.meta.p {
        return Err(Error::Header("label count differs from p".into()));
    }
    let data = r.take("basis", 3 * r.meta.n_vertices * r.meta.p)?;
    let meta = r.finish()?;
    TargetBasis::new(meta.n_vertices, meta.labels, data)
}

pub fn load_target_basis(path: &Path) -> Result<TargetBasis> {
    parse_target_basis(&fs::read(path)?)
}

/// `params = matrix^T z + offset` with `matrix` stored `2K x P` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMap {
    pub latent_dim: usize,
    pub p: usize,
    pub matrix: Vec<f32>,
    pub offset: Option<Vec<f32>>,
}

impl LinearMap {
    pub fn new(
        latent_dim: usize,
        p: usize,
        matrix: Vec<f32>,
        offset: Option<Vec<f32>>,
    ) -> Result<Self> {
        if matrix.len() != latent_dim * p {
            return Err(Error::size("map matrix", latent_dim * p, matrix.len()));
        }
        if let Some(o) = &offset {
            if o.len() != p {
                return Err(Error::size("map offset", p, o.len()));
            }
        }
        if matrix
            .iter()
            .chain(offset.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("linear map".into()));
        }
        Ok(Self {
            latent_dim,
            p,
            matrix,
            offset,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut matrix = vec![0.0; n * n];
        for i in 0..n {
            matrix[i * n + i] = 1.0;
        }
        Self {
            latent_dim: n,
            p: n,
            matrix,
            offset: None,
        }
    }

    /// Parameters for a raw `2K` latent.
    pub fn apply_raw(&self, z: &[f32]) -> Result<Vec<f32>> {
        if z.len() != self.latent_dim {
            return Err(Error::size("mapping latent", self.latent_dim, z.len()));
        }
        let mut out: Vec<f64> = match &self.offset {
            Some(o) => o.iter().map(|&v| v as f64).collect(),
            None => vec![0.0; self.p],
        };
        for (i, &zi) in z.iter().enumerate() {
            let row = &self.matrix[i * self.p..(i + 1) * self.p];
            for (o, &m) in out.iter_mut().zip(row) {
                *o += m as f64 * zi as f64;
            }
        }
        Ok(out.into_iter().map(|v| v as f32).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            format_version: u32,
            #[serde(flatten)]
            map: &'a LinearMap,
        }
        Ok(serde_json::to_string_pretty(&Out {
            format_version: FORMAT_VERSION,
            map: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        match v.get("format_version").and_then(|x| x.as_u64()) {
            Some(x) if x == FORMAT_VERSION as u64 => {}
            Some(x) => return Err(Error::VersionMismatch(x as u32)),
            None => return Err(Error::Header("missing format_version".into())),
        }
        let m: LinearMap = serde_json::from_value(v)?;
        LinearMap::new(m.latent_dim, m.p, m.matrix, m.offset)
    }
}

/// Parameters for the own halves `[w_A0 | w_E0]`; cross halves never enter.
pub fn apply_mapping(
    map: &LinearMap,
    speech: &LatentWeights,
    expression: &LatentWeights,
) -> Result<Vec<f32>> {
    let z: Vec<f32> = speech.own.iter().chain(&expression.own).copied().collect();
    map.apply_raw(&z)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapFitConfig {
    pub lambda_fit: f64,
    pub lambda_reg: f64,
    pub mask: VertexWeightMask,
    /// Relative singular-value threshold for rank decisions.
    pub tolerance: f64,
}

impl MapFitConfig {
    pub fn uniform(n_vertices: usize) -> Self {
        Self {
            lambda_fit: 1.0,
            lambda_reg: 0.0,
            mask: VertexWeightMask::uniform(n_vertices),
            tolerance: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_fit > 0.0 && self.lambda_fit.is_finite()) {
            return Err(Error::InvalidArgument("lambda_fit must be > 0".into()));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::InvalidArgument("lambda_reg must be >= 0".into()));
        }
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::InvalidArgument(
                "tolerance must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapFitReport {
    pub samples: usize,
    pub sample_rank: usize,
    pub objective: f64,
    /// Mean over samples of the mean per-vertex error, millimetres.
    pub mean_vertex_error: f64,
}

fn numeric_rank(m: &DMatrix<f64>, tol: f64) -> usize {
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * max).count()
}

fn learned_matrix(basis: &BlendshapeBasis<f32>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(
        basis.rows(),
        basis.cols(),
        basis.data().iter().map(|&v| v as f64),
    )
}

fn map_matrix(map: &LinearMap) -> DMatrix<f64> {
    // P x 2K, so params = M z
    DMatrix::from_fn(map.p, map.latent_dim, |j, i| {
        map.matrix[i * map.p + j] as f64
    })
}

/// `lambda_fit * mean_s (1/n_v) sum_k w_k ||(T M z_s - B z_s)_k||^2
///  + lambda_reg * mean_s (1/n_v) ||T M z_s||^2`.
pub fn mapping_objective(
    basis: &BlendshapeBasis<f32>,
    target: &TargetBasis,
    samples: &[Vec<f32>],
    cfg: &MapFitConfig,
    map: &LinearMap,
) -> Result<f64> {
    let b = learned_matrix(basis);
    let t = target.matrix();
    let m = map_matrix(map);
    let n = target.n_vertices as f64;
    let w = cfg.mask.weights();
    let mut total = 0.0;
    for z in samples {
        let zv = DVector::from_iterator(z.len(), z.iter().map(|&v| v as f64));
        let mut params = &m * &zv;
        if let Some(o) = &map.offset {
            params += DVector::from_iterator(o.len(), o.iter().map(|&v| v as f64));
        }
        let mapped = &t * params;
        let r = &mapped - &b * &zv;
        let fit: f64 = (0..target.n_vertices)
            .map(|k| w[k] as f64 * (r[3 * k].powi(2) + r[3 * k + 1].powi(2) + r[3 * k + 2].powi(2)))
            .sum();
        total += cfg.lambda_fit * fit / n + cfg.lambda_reg * mapped.norm_squared() / n;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Closed-form minimizer of [`mapping_objective`].
///
/// Setting the gradient to zero gives `A M S = C S` with
/// `A = lambda_fit T^T W T + lambda_reg T^T T`,
/// `C = lambda_fit T^T W B` and `S` the sample second-moment matrix, so
/// `M = A^-1 C` is the optimum whenever `A` is invertible; the samples must
/// still span enough directions for it to be the unique one.
pub fn fit_linear_mapping(
    basis: &BlendshapeBasis<f32>,
    target: &TargetBasis,
    samples: &[Vec<f32>],
    cfg: &MapFitConfig,
) -> Result<(LinearMap, MapFitReport)> {
    cfg.validate()?;
    let rows = basis.rows();
    let k2 = basis.cols();
    let p = target.p();
    if target.n_vertices * 3 != rows {
        return Err(Error::size(
            "target basis vertices",
            rows / 3,
            target.n_vertices,
        ));
    }
    if cfg.mask.len() != target.n_vertices {
        return Err(Error::size("fit mask", target.n_vertices, cfg.mask.len()));
    }
    if let Some(z) = samples.iter().find(|z| z.len() != k2) {
        return Err(Error::size("sample latent", k2, z.len()));
    }
    let zmat = DMatrix::from_fn(samples.len(), k2, |s, i| samples[s][i] as f64);
    let sample_rank = numeric_rank(&zmat, cfg.tolerance);
    let required = p.min(k2);
    if sample_rank < required {
        return Err(Error::RankDeficient {
            achieved: sample_rank,
            required,
        });
    }

    let b = learned_matrix(basis);
    let t = target.matrix();
    let wdiag = DVector::from_fn(rows, |r, _| cfg.mask.weights()[r / 3] as f64);
    let wt = DMatrix::from_fn(rows, p, |r, j| wdiag[r] * t[(r, j)]);
    let a = cfg.lambda_fit * t.transpose() * &wt + cfg.lambda_reg * t.transpose() * &t;
    let c = cfg.lambda_fit * wt.transpose() * &b;
    let target_rank = numeric_rank(&a, cfg.tolerance);
    if target_rank < p {
        return Err(Error::RankDeficient {
            achieved: target_rank,
            required: p,
        });
    }
    let m = a
        .clone()
        .cholesky()
        .map(|ch| ch.solve(&c))
        .or_else(|| a.lu().solve(&c))
        .ok_or_else(|| Error::NonFinite("mapping solve".into()))?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mapping solve".into()));
    }
    // store 2K x P row-major
    let mut matrix = vec![0.0f32; k2 * p];
    for i in 0..k2 {
        for j in 0..p {
            matrix[i * p + j] = m[(j, i)] as f32;
        }
    }
    let map = LinearMap::new(k2, p, matrix, None)?;
    let objective = mapping_objective(basis, target, samples, cfg, &map)?;
    let mean_vertex_error = mean_vertex_error(basis, target, samples, &map)?;
    Ok((
        map,
        MapFitReport {
            samples: samples.len(),
            sample_rank,
            objective,
            mean_vertex_error,
        },
    ))
}

/// Mean per-vertex distance between `T(map(z))` and `B z`, averaged over samples.
pub fn mean_vertex_error(
    basis: &BlendshapeBasis<f32>,
    target: &TargetBasis,
    samples: &[Vec<f32>],
    map: &LinearMap,
) -> Result<f64> {
    let mut total = 0.0;
    for z in samples {
        let mapped = target.deform(&map.apply_raw(z)?)?;
        let own = basis.apply(z);
        let n = target.n_vertices;
        let e: f64 = (0..n)
            .map(|k| {
                let m = mapped.offsets()[k];
                (0..3)
                    .map(|d| (m[d] as f64 - own[3 * k + d] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum();
        total += e / n as f64;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Random well-conditioned square matrix `I + 0.3 N(0, 1)`, column-major.
pub fn random_mixing(n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(n, n, |i, j| {
        let z: f64 = rng.sample(StandardNormal);
        0.3 * z + if i == j { 1.0 } else { 0.0 }
    })
}

/// Target basis whose columns are the learned columns recombined by
/// `mixing` (`2K x P`): `T = B mixing`.
pub fn mixed_target(basis: &BlendshapeBasis<f32>, mixing: &DMatrix<f64>) -> Result<TargetBasis> {
    if mixing.nrows() != basis.cols() {
        return Err(Error::size("mixing rows", basis.cols(), mixing.nrows()));
    }
    let t = learned_matrix(basis) * mixing;
    let labels = (0..mixing.ncols()).map(|j| format!("param{j}")).collect();
    TargetBasis::new(
        basis.rows() / 3,
        labels,
        t.iter().map(|&v| v as f32).collect(),
    )
}
