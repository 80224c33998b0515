//! Joint training of both encoders and the shared basis with Adam, plus the
//! checkpoint container.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{ContainerReader, ContainerWriter};
use crate::error::{Error, Result};
use crate::gridmap::{build_mapping_table, map_to_grid, MappingTable, PixelEntry};
use crate::losses::{LaplaceTarget, LossReport, LossWeights, RecNorm};
use crate::mesh::{build_adjacency, region_mask, FaceMesh, RegionSelector};
use crate::netcore::{
    backward, gradient_check, BatchInput, BlendshapeModel, Domain, DomainBatch, GradCheckReport,
    LossConfig, ModelShape, Real,
};
use crate::synth::Dataset;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BFCKPT01";
/// A step whose total loss exceeds this aborts training.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
/// Offset added to the training seed for batch shuffling; parameter
/// initialization uses the seed itself.
pub const SHUFFLE_SEED_OFFSET: u64 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumericMode {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub rec_norm: RecNorm,
    pub laplace_target: LaplaceTarget,
    pub numeric: NumericMode,
    pub k: usize,
    pub grid: usize,
    pub channels_base: usize,
    pub channels_cap: usize,
    pub input_scale: f32,
    pub mask: RegionSelector,
    pub mask_boost: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            batch_size: 128,
            epochs: 4000,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            weights: LossWeights::default(),
            rec_norm: RecNorm::Norm,
            laplace_target: LaplaceTarget::Positions,
            numeric: NumericMode::F32,
            k: 64,
            grid: 64,
            channels_base: 16,
            channels_cap: 256,
            input_scale: 1e-3,
            mask: RegionSelector::Uniform,
            mask_boost: 5.0,
        }
    }
}

impl TrainConfig {
    /// Small architecture for single-core runs.
    pub fn desk() -> Self {
        Self {
            k: 8,
            grid: 16,
            channels_base: 8,
            channels_cap: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidArgument("adam epsilon must be > 0".into()));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::InvalidArgument("input scale must be > 0".into()));
        }
        if !(self.mask_boost >= 0.0 && self.mask_boost.is_finite()) {
            return Err(Error::InvalidArgument("mask boost must be >= 0".into()));
        }
        self.weights.validate()
    }

    pub fn model_shape(&self, n_vertices: usize) -> ModelShape {
        ModelShape {
            n_vertices,
            k: self.k,
            grid: self.grid,
            channels_base: self.channels_base,
            channels_cap: self.channels_cap,
            input_scale: self.input_scale,
        }
    }

    pub fn loss_config(&self, template: &FaceMesh) -> Result<LossConfig> {
        Ok(LossConfig {
            weights: self.weights,
            rec_norm: self.rec_norm,
            laplace_target: self.laplace_target,
            mask: region_mask(template, &self.mask, self.mask_boost)?,
            adjacency: build_adjacency(template),
            template: template.vertices().iter().flatten().copied().collect(),
        })
    }
}

/// First and second moments per parameter group, in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &BlendshapeModel<T>) -> Self {
        let shapes: Vec<Vec<T>> = model
            .param_groups()
            .iter()
            .map(|(_, g)| vec![T::zero(); g.len()])
            .collect();
        Self {
            m: shapes.clone(),
            v: shapes,
            step: 0,
        }
    }

    pub fn cast<U: Real>(&self) -> AdamState<U> {
        let c = |g: &Vec<Vec<T>>| -> Vec<Vec<U>> {
            g.iter()
                .map(|x| x.iter().map(|&v| U::of(v.as_f64())).collect())
                .collect()
        };
        AdamState {
            m: c(&self.m),
            v: c(&self.v),
            step: self.step,
        }
    }
}

/// One bias-corrected Adam update over all groups in order.
///
/// Gradients are checked for finiteness before anything is modified.
pub fn adam_step<T: Real>(
    params: &mut [&mut Vec<T>],
    grads: &[&[T]],
    names: &[String],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::size(
            "adam parameter groups",
            state.m.len(),
            grads.len(),
        ));
    }
    for (gi, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.m[gi].len() != g.len() {
            return Err(Error::size("adam group length", p.len(), g.len()));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            let name = names.get(gi).map_or("?", String::as_str);
            return Err(Error::NonFinite(format!("gradient of {name}[{i}]")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(t));
    let c2 = T::one() - T::of(cfg.beta2.powi(t));
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.adam_eps);
    for (gi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[gi], &mut state.v[gi]);
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (T::one() - b1) * g[i];
            v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rec: f64,
    pub sparsity: f64,
    pub laplace: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: BlendshapeModel<f32>,
    pub adam: AdamState<f32>,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
}

impl Checkpoint {
    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceInfo {
    pub epoch: usize,
    pub loss: f64,
}

/// Outcome of a training call. On divergence the checkpoint holds the state
/// at the start of the failing epoch.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub diverged: Option<DivergenceInfo>,
}

impl TrainRun {
    pub fn into_result(self) -> Result<Checkpoint> {
        match self.diverged {
            Some(d) => Err(Error::Divergence {
                epoch: d.epoch,
                loss: d.loss,
            }),
            None => Ok(self.checkpoint),
        }
    }
}

/// Encoder inputs and targets computed once per dataset.
pub struct PreparedData {
    input_len: usize,
    rows: usize,
    speech: (Vec<f32>, Vec<f32>),
    expression: (Vec<f32>, Vec<f32>),
}

impl PreparedData {
    pub fn new(dataset: &Dataset, table: &MappingTable, input_scale: f32) -> Result<Self> {
        let grid = table.grid();
        let input_len = 3 * grid * grid;
        let rows = 3 * dataset.n_vertices();
        let prep = |domain: Domain| -> Result<(Vec<f32>, Vec<f32>)> {
            let samples = dataset.domain_samples(domain);
            let mut inputs = vec![0.0f32; samples.len() * input_len];
            let mut targets = Vec::with_capacity(samples.len() * rows);
            for (s, chunk) in samples.iter().zip(inputs.chunks_exact_mut(input_len)) {
                map_to_grid(&s.field, table)?.write_planes(chunk);
                chunk.iter_mut().for_each(|v| *v *= input_scale);
                targets.extend(s.field.to_flat());
            }
            Ok((inputs, targets))
        };
        let speech = prep(Domain::Speech)?;
        let expression = prep(Domain::Expression)?;
        Ok(Self {
            input_len,
            rows,
            speech,
            expression,
        })
    }

    pub fn count(&self, domain: Domain) -> usize {
        match domain {
            Domain::Speech => self.speech.1.len() / self.rows,
            Domain::Expression => self.expression.1.len() / self.rows,
        }
    }

    fn gather<T: Real>(&self, domain: Domain, idx: &[usize]) -> DomainBatch<T> {
        let (inputs, targets) = match domain {
            Domain::Speech => &self.speech,
            Domain::Expression => &self.expression,
        };
        let mut bi = Vec::with_capacity(idx.len() * self.input_len);
        let mut bt = Vec::with_capacity(idx.len() * self.rows);
        for &i in idx {
            bi.extend(
                inputs[i * self.input_len..(i + 1) * self.input_len]
                    .iter()
                    .map(|&v| T::of_f32(v)),
            );
            bt.extend(
                targets[i * self.rows..(i + 1) * self.rows]
                    .iter()
                    .map(|&v| T::of_f32(v)),
            );
        }
        DomainBatch {
            inputs: bi,
            targets: bt,
            count: idx.len(),
        }
    }

    /// Batch from explicit per-domain sample indices.
    pub fn batch<T: Real>(&self, speech: &[usize], expression: &[usize]) -> BatchInput<T> {
        BatchInput {
            speech: self.gather(Domain::Speech, speech),
            expression: self.gather(Domain::Expression, expression),
        }
    }
}

/// Per-domain share of a batch: proportional to dataset sizes, at least one
/// sample from each domain.
pub fn batch_split(batch_size: usize, n_speech: usize, n_expression: usize) -> (usize, usize) {
    let total = (n_speech + n_expression) as f64;
    let s = ((batch_size as f64) * n_speech as f64 / total).round() as usize;
    let s = s.clamp(1, batch_size.saturating_sub(1).max(1));
    let e = batch_size.saturating_sub(s).max(1);
    (s, e)
}

/// Sample order for one domain and epoch; depends only on seed and epoch.
fn epoch_order(seed: u64, epoch: usize, domain: Domain, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(SHUFFLE_SEED_OFFSET));
    rng.set_stream(2 * epoch as u64 + domain as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

struct LoopState<T> {
    model: BlendshapeModel<T>,
    adam: AdamState<T>,
    history: Vec<EpochRecord>,
}

fn run_epochs<T: Real>(
    mut st: LoopState<T>,
    data: &PreparedData,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    epochs: usize,
) -> Result<(LoopState<T>, Option<DivergenceInfo>)> {
    let (ns, ne) = (data.count(Domain::Speech), data.count(Domain::Expression));
    let (bs, be) = batch_split(cfg.batch_size, ns, ne);
    let steps = (ns + ne).div_ceil(bs + be).max(1);
    let names: Vec<String> = st
        .model
        .param_groups()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let start = st.history.len();
    for epoch in start..start + epochs {
        let snapshot = (st.model.clone(), st.adam.clone());
        let os = epoch_order(cfg.seed, epoch, Domain::Speech, ns);
        let oe = epoch_order(cfg.seed, epoch, Domain::Expression, ne);
        let mut sum = LossReport::default();
        for step in 0..steps {
            let is: Vec<usize> = (0..bs).map(|j| os[(step * bs + j) % ns]).collect();
            let ie: Vec<usize> = (0..be).map(|j| oe[(step * be + j) % ne]).collect();
            let batch = data.batch::<T>(&is, &ie);
            let outcome = backward(&st.model, &batch, loss_cfg).and_then(|(report, grads)| {
                if !(report.total <= DIVERGENCE_THRESHOLD) {
                    return Ok(Err(report.total));
                }
                let g: Vec<&[T]> = grads.param_groups().into_iter().map(|(_, g)| g).collect();
                adam_step(
                    &mut st.model.param_groups_mut(),
                    &g,
                    &names,
                    &mut st.adam,
                    cfg,
                )?;
                Ok(Ok(report))
            });
            let report = match outcome {
                Ok(Ok(r)) => r,
                Ok(Err(loss)) => {
                    log::warn!("epoch {epoch}: total loss {loss} above threshold, stopping");
                    (st.model, st.adam) = snapshot;
                    return Ok((st, Some(DivergenceInfo { epoch, loss })));
                }
                Err(Error::NonFinite(msg)) => {
                    log::warn!("epoch {epoch}: non-finite value ({msg}), stopping");
                    (st.model, st.adam) = snapshot;
                    return Ok((
                        st,
                        Some(DivergenceInfo {
                            epoch,
                            loss: f64::NAN,
                        }),
                    ));
                }
                Err(e) => return Err(e),
            };
            sum.rec += report.rec;
            sum.sparsity += report.sparsity;
            sum.laplace += report.laplace;
            sum.reg += report.reg;
            sum.total += report.total;
        }
        let n = steps as f64;
        let rec = EpochRecord {
            epoch,
            rec: sum.rec / n,
            sparsity: sum.sparsity / n,
            laplace: sum.laplace / n,
            reg: sum.reg / n,
            total: sum.total / n,
        };
        if epoch % 100 == 0 {
            log::info!("epoch {epoch}: total {:.6e} rec {:.6e}", rec.total, rec.rec);
        }
        st.history.push(rec);
    }
    Ok((st, None))
}

fn check_dataset(dataset: &Dataset) -> Result<()> {
    if dataset.count(Domain::Speech) == 0 {
        return Err(Error::EmptyDomain("speech"));
    }
    if dataset.count(Domain::Expression) == 0 {
        return Err(Error::EmptyDomain("expression"));
    }
    Ok(())
}

fn continue_training(ckpt: Checkpoint, dataset: &Dataset, epochs: usize) -> Result<TrainRun> {
    check_dataset(dataset)?;
    let cfg = ckpt.config.clone();
    cfg.validate()?;
    if dataset.n_vertices() != ckpt.model.shape.n_vertices {
        return Err(Error::size(
            "dataset vertices",
            ckpt.model.shape.n_vertices,
            dataset.n_vertices(),
        ));
    }
    let loss_cfg = cfg.loss_config(&dataset.template)?;
    let data = PreparedData::new(dataset, &ckpt.model.table, cfg.input_scale)?;
    let history = ckpt.history;
    let (checkpoint, diverged) = match cfg.numeric {
        NumericMode::F32 => {
            let st = LoopState {
                model: ckpt.model,
                adam: ckpt.adam,
                history,
            };
            let (st, d) = run_epochs(st, &data, &cfg, &loss_cfg, epochs)?;
            (
                Checkpoint {
                    model: st.model,
                    adam: st.adam,
                    config: cfg.clone(),
                    history: st.history,
                },
                d,
            )
        }
        NumericMode::F64 => {
            let st = LoopState::<f64> {
                model: ckpt.model.cast(),
                adam: ckpt.adam.cast(),
                history,
            };
            let (st, d) = run_epochs(st, &data, &cfg, &loss_cfg, epochs)?;
            (
                Checkpoint {
                    model: st.model.cast(),
                    adam: st.adam.cast(),
                    config: cfg.clone(),
                    history: st.history,
                },
                d,
            )
        }
    };
    Ok(TrainRun {
        checkpoint,
        diverged,
    })
}

/// Fresh model for `dataset`'s template under `cfg`.
pub fn init_model(dataset: &Dataset, cfg: &TrainConfig) -> Result<BlendshapeModel<f32>> {
    let table = build_mapping_table(&dataset.template, cfg.grid)?;
    BlendshapeModel::new(cfg.model_shape(dataset.n_vertices()), table, cfg.seed)
}

/// Trains a fresh model for `cfg.epochs` epochs.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    check_dataset(dataset)?;
    let model = init_model(dataset, cfg)?;
    let ckpt = Checkpoint {
        adam: AdamState::new(&model),
        model,
        config: cfg.clone(),
        history: Vec::new(),
    };
    continue_training(ckpt, dataset, cfg.epochs)
}

/// Finite-difference check of the freshly initialized model for `cfg` on
/// the first `n_per_domain` samples of each domain.
pub fn check_gradients(
    dataset: &Dataset,
    cfg: &TrainConfig,
    n_per_domain: usize,
    per_group: usize,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    check_dataset(dataset)?;
    let model = init_model(dataset, cfg)?;
    let data = PreparedData::new(dataset, &model.table, cfg.input_scale)?;
    let pick = |d: Domain| -> Vec<usize> { (0..n_per_domain.min(data.count(d))).collect() };
    let batch = data.batch::<f32>(&pick(Domain::Speech), &pick(Domain::Expression));
    let loss = cfg.loss_config(&dataset.template)?;
    gradient_check(&model, &batch, &loss, step, tolerance, per_group, cfg.seed)
}

/// Runs `epochs` more epochs from a checkpoint; the Adam step counter and
/// epoch numbering continue.
pub fn resume(ckpt: Checkpoint, dataset: &Dataset, epochs: usize) -> Result<TrainRun> {
    if epochs == 0 {
        return Err(Error::InvalidArgument("epochs must be >= 1".into()));
    }
    continue_training(ckpt, dataset, epochs)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    shape: ModelShape,
    config: TrainConfig,
    history: Vec<EpochRecord>,
    adam_step: u64,
    groups: Vec<String>,
    table_grid: usize,
}

/// Vertex indices travel as f32, exact below 2^24.
const MAX_TABLE_VERTICES: usize = 1 << 24;

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    if model.shape.n_vertices >= MAX_TABLE_VERTICES {
        return Err(Error::InvalidArgument(
            "too many vertices for checkpoint table".into(),
        ));
    }
    let groups = model.param_groups();
    let meta = CheckpointMeta {
        shape: model.shape.clone(),
        config: ckpt.config.clone(),
        history: ckpt.history.clone(),
        adam_step: ckpt.adam.step,
        groups: groups.iter().map(|(n, _)| n.clone()).collect(),
        table_grid: model.table.grid(),
    };
    let mut w = ContainerWriter::new(CHECKPOINT_MAGIC);
    for (name, data) in &groups {
        w.blob(format!("param:{name}"), data);
    }
    for ((name, _), m) in groups.iter().zip(&ckpt.adam.m) {
        w.blob(format!("adam_m:{name}"), m);
    }
    for ((name, _), v) in groups.iter().zip(&ckpt.adam.v) {
        w.blob(format!("adam_v:{name}"), v);
    }
    let entries = model.table.entries();
    let valid: Vec<f32> = entries
        .iter()
        .map(|e| if e.valid { 1.0 } else { 0.0 })
        .collect();
    let indices: Vec<f32> = entries
        .iter()
        .flat_map(|e| {
            e.vertex_indices
                .map(|i| if e.valid { i as f32 } else { -1.0 })
        })
        .collect();
    let weights: Vec<f32> = entries.iter().flat_map(|e| e.bary_weights).collect();
    w.blob("table.valid", &valid)
        .blob("table.indices", &indices)
        .blob("table.weights", &weights);
    w.finish(&meta)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ContainerReader::<CheckpointMeta>::parse(bytes, CHECKPOINT_MAGIC)?;
    let shape = r.meta.shape.clone();
    let grid = r.meta.table_grid;
    if grid != shape.grid {
        return Err(Error::Header("table grid differs from model grid".into()));
    }
    // shapes come from a skeleton model built from the header
    let skeleton_table = MappingTable::from_entries(
        grid,
        shape.n_vertices,
        vec![PixelEntry::INVALID; grid * grid],
    )?;
    let mut model = BlendshapeModel::<f32>::new(shape.clone(), skeleton_table, 0)?;
    let expected: Vec<(String, usize)> = model
        .param_groups()
        .into_iter()
        .map(|(n, g)| (n, g.len()))
        .collect();
    let names: Vec<&String> = expected.iter().map(|(n, _)| n).collect();
    if r.meta.groups.iter().collect::<Vec<_>>() != names {
        return Err(Error::Header(
            "parameter group manifest differs from model shape".into(),
        ));
    }
    for ((name, len), dst) in expected.iter().zip(model.param_groups_mut()) {
        *dst = r.take(&format!("param:{name}"), *len)?;
    }
    let mut adam = AdamState::new(&model);
    for ((name, len), dst) in expected.iter().zip(adam.m.iter_mut()) {
        *dst = r.take(&format!("adam_m:{name}"), *len)?;
    }
    for ((name, len), dst) in expected.iter().zip(adam.v.iter_mut()) {
        *dst = r.take(&format!("adam_v:{name}"), *len)?;
    }
    let n_pix = grid * grid;
    let valid = r.take("table.valid", n_pix)?;
    let indices = r.take("table.indices", 3 * n_pix)?;
    let weights = r.take("table.weights", 3 * n_pix)?;
    let meta = r.finish()?;
    adam.step = meta.adam_step;
    let mut entries = Vec::with_capacity(n_pix);
    for p in 0..n_pix {
        let e = if valid[p] == 1.0 {
            let mut vi = [0u32; 3];
            for c in 0..3 {
                let f = indices[3 * p + c];
                if !(f >= 0.0 && f.fract() == 0.0) {
                    return Err(Error::Header(format!("bad table index {f}")));
                }
                vi[c] = f as u32;
            }
            PixelEntry {
                valid: true,
                vertex_indices: vi,
                bary_weights: [weights[3 * p], weights[3 * p + 1], weights[3 * p + 2]],
            }
        } else if valid[p] == 0.0 {
            PixelEntry::INVALID
        } else {
            return Err(Error::Header("bad table validity flag".into()));
        };
        entries.push(e);
    }
    model.table = MappingTable::from_entries(grid, shape.n_vertices, entries)?;
    model.validate()?;
    Ok(Checkpoint {
        model,
        adam,
        config: meta.config,
        history: meta.history,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint_bytes(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    parse_checkpoint(&fs::read(path)?)
}
