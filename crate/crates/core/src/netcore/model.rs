use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{forward, EncoderArch, EncoderCache, EncoderParams};
use super::Real;
use crate::error::{Error, Result};
use crate::gridmap::{map_to_grid, DisplacementMap, MappingTable};
use crate::mesh::DisplacementField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Speech,
    Expression,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Speech => "speech",
            Domain::Expression => "expression",
        }
    }

    pub fn parse(s: &str) -> Option<Domain> {
        match s {
            "speech" => Some(Domain::Speech),
            "expression" => Some(Domain::Expression),
            _ => None,
        }
    }
}

/// Encoder output split by domain.
///
/// For a speech latent `own` weights the speech basis (columns `0..K`) and
/// `cross` the expression basis; an expression latent is the mirror image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentWeights {
    pub own: Vec<f32>,
    pub cross: Vec<f32>,
    pub domain: Domain,
}

impl LatentWeights {
    /// Splits a raw `2K` vector laid out in basis-column order.
    pub fn from_raw(raw: &[f32], domain: Domain) -> Result<Self> {
        if raw.is_empty() || raw.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "latent length {} is not even",
                raw.len()
            )));
        }
        let (first, second) = raw.split_at(raw.len() / 2);
        let (own, cross) = match domain {
            Domain::Speech => (first, second),
            Domain::Expression => (second, first),
        };
        Ok(Self {
            own: own.to_vec(),
            cross: cross.to_vec(),
            domain,
        })
    }

    pub fn k(&self) -> usize {
        self.own.len()
    }

    /// Back to basis-column order: `[speech weights | expression weights]`.
    pub fn to_raw(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(2 * self.own.len());
        match self.domain {
            Domain::Speech => {
                out.extend_from_slice(&self.own);
                out.extend_from_slice(&self.cross);
            }
            Domain::Expression => {
                out.extend_from_slice(&self.cross);
                out.extend_from_slice(&self.own);
            }
        }
        out
    }

    /// Raw layout with the cross half zeroed.
    pub fn own_only_raw(&self) -> Vec<f32> {
        let k = self.own.len();
        let mut out = vec![0.0; 2 * k];
        let off = match self.domain {
            Domain::Speech => 0,
            Domain::Expression => k,
        };
        out[off..off + k].copy_from_slice(&self.own);
        out
    }

    /// Raw layout with the own half zeroed.
    pub fn cross_only_raw(&self) -> Vec<f32> {
        let k = self.own.len();
        let mut out = vec![0.0; 2 * k];
        let off = match self.domain {
            Domain::Speech => k,
            Domain::Expression => 0,
        };
        out[off..off + k].copy_from_slice(&self.cross);
        out
    }
}

/// `[B_A | B_E]`: a `(3 n_v) x 2K` row-major matrix, the weight of the
/// bias-free linear decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeBasis<T> {
    rows: usize,
    k: usize,
    data: Vec<T>,
}

impl<T: Real> BlendshapeBasis<T> {
    pub fn new(rows: usize, k: usize, data: Vec<T>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be positive".into()));
        }
        if data.len() != rows * 2 * k {
            return Err(Error::size("basis entries", rows * 2 * k, data.len()));
        }
        Ok(Self { rows, k, data })
    }

    pub fn zeros(rows: usize, k: usize) -> Self {
        Self {
            rows,
            k,
            data: vec![T::zero(); rows * 2 * k],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cols(&self) -> usize {
        2 * self.k
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Vec<T> {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        let c = self.cols();
        (0..self.rows).map(|r| self.data[r * c + j]).collect()
    }

    /// One domain's `rows x K` half as f64, column-major.
    pub fn half_f64(&self, domain: Domain) -> Vec<f64> {
        let c = self.cols();
        let off = match domain {
            Domain::Speech => 0,
            Domain::Expression => self.k,
        };
        let mut out = Vec::with_capacity(self.rows * self.k);
        for j in off..off + self.k {
            out.extend((0..self.rows).map(|r| self.data[r * c + j].as_f64()));
        }
        out
    }

    /// `basis * z` for a raw `2K` latent.
    pub fn apply(&self, z: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.rows];
        super::matmul(&self.data, z, &mut out, self.rows, self.cols(), 1, false);
        out
    }

    pub fn cast<U: Real>(&self) -> BlendshapeBasis<U> {
        BlendshapeBasis {
            rows: self.rows,
            k: self.k,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }
}

pub fn decode(basis: &BlendshapeBasis<f32>, latent: &LatentWeights) -> Result<DisplacementField> {
    if latent.k() != basis.k() || latent.cross.len() != basis.k() {
        return Err(Error::size("latent half length", basis.k(), latent.k()));
    }
    DisplacementField::from_flat(&basis.apply(&latent.to_raw()))
}

/// Shape metadata and architecture knobs, everything except weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_vertices: usize,
    pub k: usize,
    pub grid: usize,
    pub channels_base: usize,
    pub channels_cap: usize,
    /// Constant gain applied to displacement maps before the encoders.
    pub input_scale: f32,
}

impl ModelShape {
    pub fn arch(&self) -> Result<EncoderArch> {
        EncoderArch::new(self.grid, self.channels_base, self.channels_cap, 2 * self.k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeModel<T = f32> {
    pub shape: ModelShape,
    pub arch: EncoderArch,
    pub encoder_a: EncoderParams<T>,
    pub encoder_e: EncoderParams<T>,
    pub basis: BlendshapeBasis<T>,
    pub table: MappingTable,
}

/// Initial value of every instance-norm scale.
pub const NORM_SCALE_INIT: f64 = 1.0;
/// Half-width of the uniform basis initialization.
pub const BASIS_INIT_SCALE: f64 = 1e-3;

impl<T: Real> BlendshapeModel<T> {
    pub fn new(shape: ModelShape, table: MappingTable, seed: u64) -> Result<Self> {
        let arch = shape.arch()?;
        if table.grid() != shape.grid {
            return Err(Error::size("mapping table grid", shape.grid, table.grid()));
        }
        if table.n_vertices() != shape.n_vertices {
            return Err(Error::size(
                "mapping table vertices",
                shape.n_vertices,
                table.n_vertices(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder_a = EncoderParams::init(&arch, NORM_SCALE_INIT, &mut rng);
        let encoder_e = EncoderParams::init(&arch, NORM_SCALE_INIT, &mut rng);
        let mut basis = BlendshapeBasis::zeros(3 * shape.n_vertices, shape.k);
        basis
            .data
            .iter_mut()
            .for_each(|v| *v = T::of(rng.gen_range(-BASIS_INIT_SCALE..BASIS_INIT_SCALE)));
        Ok(Self {
            shape,
            arch,
            encoder_a,
            encoder_e,
            basis,
            table,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.shape.arch()?;
        if arch != self.arch {
            return Err(Error::InvalidArgument(
                "architecture does not match shape".into(),
            ));
        }
        self.encoder_a.check_shape(&arch)?;
        self.encoder_e.check_shape(&arch)?;
        if self.basis.rows() != 3 * self.shape.n_vertices || self.basis.k() != self.shape.k {
            return Err(Error::InvalidArgument(format!(
                "basis is {}x{}, expected {}x{}",
                self.basis.rows(),
                self.basis.cols(),
                3 * self.shape.n_vertices,
                2 * self.shape.k
            )));
        }
        if self.table.grid() != self.shape.grid || self.table.n_vertices() != self.shape.n_vertices
        {
            return Err(Error::InvalidArgument(
                "mapping table does not match shape".into(),
            ));
        }
        Ok(())
    }

    pub fn encoder(&self, domain: Domain) -> &EncoderParams<T> {
        match domain {
            Domain::Speech => &self.encoder_a,
            Domain::Expression => &self.encoder_e,
        }
    }

    pub fn encoder_mut(&mut self, domain: Domain) -> &mut EncoderParams<T> {
        match domain {
            Domain::Speech => &mut self.encoder_a,
            Domain::Expression => &mut self.encoder_e,
        }
    }

    /// Named parameter groups in the fixed manifest order.
    pub fn param_groups(&self) -> Vec<(String, &[T])> {
        let mut out = Vec::new();
        for (prefix, enc) in [
            ("encoder_a", &self.encoder_a),
            ("encoder_e", &self.encoder_e),
        ] {
            out.extend(
                enc.groups()
                    .into_iter()
                    .map(|(n, v)| (format!("{prefix}.{n}"), v)),
            );
        }
        out.push(("basis".into(), self.basis.data()));
        out
    }

    pub fn param_groups_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = self.encoder_a.groups_mut();
        out.extend(self.encoder_e.groups_mut());
        out.push(&mut self.basis.data);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_groups().iter().map(|(_, g)| g.len()).sum()
    }

    /// Same structure with every parameter zero, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            arch: self.arch.clone(),
            encoder_a: EncoderParams::zeros(&self.arch),
            encoder_e: EncoderParams::zeros(&self.arch),
            basis: BlendshapeBasis::zeros(self.basis.rows, self.basis.k),
            table: self.table.clone(),
        }
    }

    pub fn cast<U: Real>(&self) -> BlendshapeModel<U> {
        BlendshapeModel {
            shape: self.shape.clone(),
            arch: self.arch.clone(),
            encoder_a: self.encoder_a.cast(),
            encoder_e: self.encoder_e.cast(),
            basis: self.basis.cast(),
            table: self.table.clone(),
        }
    }

    /// Encoder input for one map: scaled channel planes.
    pub fn encoder_input(&self, map: &DisplacementMap, out: &mut [T]) {
        let planes = map.to_planes();
        let s = self.shape.input_scale;
        for (o, v) in out.iter_mut().zip(planes) {
            *o = T::of_f32(v * s);
        }
    }

    /// Raw `2K` encoder output for a batch of maps, `batch x 2K` row-major.
    pub fn encode_raw(&self, maps: &[&DisplacementMap], domain: Domain) -> Result<Vec<T>> {
        let len = self.arch.input_len();
        let mut input = vec![T::zero(); maps.len() * len];
        for (m, chunk) in maps.iter().zip(input.chunks_exact_mut(len)) {
            if m.grid() != self.shape.grid {
                return Err(Error::size("map grid", self.shape.grid, m.grid()));
            }
            self.encoder_input(m, chunk);
        }
        let mut cache = EncoderCache::default();
        forward(
            &self.arch,
            self.encoder(domain),
            &input,
            maps.len(),
            &mut cache,
        );
        Ok(cache.latent().to_vec())
    }
}

impl BlendshapeModel<f32> {
    pub fn map_field(&self, field: &DisplacementField) -> Result<DisplacementMap> {
        map_to_grid(field, &self.table)
    }

    pub fn encode_map(&self, map: &DisplacementMap, domain: Domain) -> Result<LatentWeights> {
        let raw = self.encode_raw(&[map], domain)?;
        if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{} encoder output {i}",
                domain.name()
            )));
        }
        LatentWeights::from_raw(&raw, domain)
    }

    pub fn encode_field(&self, field: &DisplacementField, domain: Domain) -> Result<LatentWeights> {
        self.encode_map(&self.map_field(field)?, domain)
    }

    /// Full encode -> decode round trip including the cross half.
    pub fn reconstruct(
        &self,
        field: &DisplacementField,
        domain: Domain,
    ) -> Result<DisplacementField> {
        decode(&self.basis, &self.encode_field(field, domain)?)
    }
}

/// Encodes a displacement map with one encoder.
pub fn encode(
    arch: &EncoderArch,
    params: &EncoderParams<f32>,
    input_scale: f32,
    map: &DisplacementMap,
    domain: Domain,
) -> Result<LatentWeights> {
    if map.grid() != arch.grid {
        return Err(Error::size("map grid", arch.grid, map.grid()));
    }
    params.check_shape(arch)?;
    let input: Vec<f32> = map
        .to_planes()
        .into_iter()
        .map(|v| v * input_scale)
        .collect();
    let mut cache = EncoderCache::default();
    forward(arch, params, &input, 1, &mut cache);
    LatentWeights::from_raw(cache.latent(), domain)
}
