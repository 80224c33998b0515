//! The overall training objective on a two-domain batch, its analytic
//! gradient, and central finite-difference checking.
//!
//! Batch loss: each term is averaged over the samples of a domain and the
//! two domain averages are added, mirroring `||eps_A||_1 + ||eps_E||_1`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{backward as encoder_backward, forward as encoder_forward, EncoderCache};
use super::model::{BlendshapeModel, Domain};
use super::{matmul, matmul_nt, matmul_tn, Real};
use crate::error::{Error, Result};
use crate::losses::{
    laplace_grad, overall_loss, rec_grad, reg_grad, sparsity_grad, LaplaceTarget, LossReport,
    LossTerms, LossWeights, RecNorm,
};
use crate::mesh::{AdjacencyMatrix, VertexWeightMask};

/// Everything the objective needs besides parameters and data.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub rec_norm: RecNorm,
    pub laplace_target: LaplaceTarget,
    pub mask: VertexWeightMask,
    pub adjacency: AdjacencyMatrix,
    /// Flat `3 n_v` template positions.
    pub template: Vec<f32>,
}

/// Encoder inputs and reconstruction targets for one domain.
#[derive(Debug, Clone)]
pub struct DomainBatch<T> {
    /// `count` channel-planar maps, already input-scaled.
    pub inputs: Vec<T>,
    /// `count x 3 n_v` target displacements.
    pub targets: Vec<T>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct BatchInput<T> {
    pub speech: DomainBatch<T>,
    pub expression: DomainBatch<T>,
}

impl<T: Real> BatchInput<T> {
    pub fn domain(&self, d: Domain) -> &DomainBatch<T> {
        match d {
            Domain::Speech => &self.speech,
            Domain::Expression => &self.expression,
        }
    }

    pub fn cast<U: Real>(&self) -> BatchInput<U> {
        let c = |d: &DomainBatch<T>| DomainBatch {
            inputs: d.inputs.iter().map(|&v| U::of(v.as_f64())).collect(),
            targets: d.targets.iter().map(|&v| U::of(v.as_f64())).collect(),
            count: d.count,
        };
        BatchInput {
            speech: c(&self.speech),
            expression: c(&self.expression),
        }
    }

    pub fn len(&self) -> usize {
        self.speech.count + self.expression.count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct BatchObjective<T> {
    pub report: LossReport,
    /// Raw latents per domain, `count x 2K`.
    pub speech_latent: Vec<T>,
    pub expression_latent: Vec<T>,
}

struct DomainPass<T> {
    cache: EncoderCache<T>,
    terms: LossTerms,
    dpred: Vec<T>,
    dlatent: Vec<T>,
}

fn domain_pass<T: Real>(
    model: &BlendshapeModel<T>,
    batch: &DomainBatch<T>,
    domain: Domain,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<DomainPass<T>> {
    let n = batch.count;
    let rows = model.basis.rows();
    let k2 = model.basis.cols();
    let kk = model.basis.k();
    if batch.inputs.len() != n * model.arch.input_len() {
        return Err(Error::size(
            "batch inputs",
            n * model.arch.input_len(),
            batch.inputs.len(),
        ));
    }
    if batch.targets.len() != n * rows {
        return Err(Error::size("batch targets", n * rows, batch.targets.len()));
    }
    if cfg.template.len() != rows
        || cfg.mask.len() * 3 != rows
        || cfg.adjacency.n_vertices() * 3 != rows
    {
        return Err(Error::size(
            "loss context vertices",
            rows / 3,
            cfg.mask.len(),
        ));
    }

    let mut cache = EncoderCache::default();
    let mut terms = LossTerms::default();
    if n == 0 {
        return Ok(DomainPass {
            cache,
            terms,
            dpred: Vec::new(),
            dlatent: Vec::new(),
        });
    }
    encoder_forward(
        &model.arch,
        model.encoder(domain),
        &batch.inputs,
        n,
        &mut cache,
    );
    let latent = cache.latent();

    // pred[n x rows] = latent[n x 2K] * basis^T
    let mut pred = vec![T::zero(); n * rows];
    matmul_nt(latent, model.basis.data(), &mut pred, n, k2, rows, false);

    let w = &cfg.weights;
    let inv_n = T::one() / T::of(n as f64);
    let s_rec = T::of(w.rec) * inv_n;
    let s_lap = T::of(w.laplace) * inv_n;
    let s_reg = T::of(w.reg) * inv_n;
    let s_sp = T::of(w.sparsity) * inv_n;

    let mut dpred = if want_grad {
        vec![T::zero(); n * rows]
    } else {
        Vec::new()
    };
    let mut dlatent = if want_grad {
        vec![T::zero(); n * k2]
    } else {
        Vec::new()
    };
    let template: Vec<T> = cfg.template.iter().map(|&v| T::of_f32(v)).collect();
    let mut positions = vec![T::zero(); rows];
    let (mut rec, mut lap, mut reg, mut sp) = (T::zero(), T::zero(), T::zero(), T::zero());

    for s in 0..n {
        let p = &pred[s * rows..(s + 1) * rows];
        let t = &batch.targets[s * rows..(s + 1) * rows];
        let mut g = want_grad.then(|| &mut dpred[s * rows..(s + 1) * rows]);
        rec += rec_grad(
            p,
            t,
            cfg.mask.weights(),
            cfg.rec_norm,
            g.as_deref_mut(),
            s_rec,
        );
        reg += reg_grad(p, g.as_deref_mut(), s_reg);
        match cfg.laplace_target {
            LaplaceTarget::Positions => {
                for ((o, &a), &b) in positions.iter_mut().zip(&template).zip(p) {
                    *o = a + b;
                }
                lap += laplace_grad(&positions, &cfg.adjacency, g.as_deref_mut(), s_lap);
            }
            LaplaceTarget::Displacement => {
                lap += laplace_grad(p, &cfg.adjacency, g.as_deref_mut(), s_lap);
            }
        }
        let row = &latent[s * k2..(s + 1) * k2];
        let cross = match domain {
            Domain::Speech => kk..k2,
            Domain::Expression => 0..kk,
        };
        let gl = want_grad.then(|| &mut dlatent[s * k2 + cross.start..s * k2 + cross.end]);
        sp += sparsity_grad(&row[cross], gl, s_sp);
    }
    terms.rec = (rec * inv_n).as_f64();
    terms.laplace = (lap * inv_n).as_f64();
    terms.reg = (reg * inv_n).as_f64();
    terms.sparsity = (sp * inv_n).as_f64();
    Ok(DomainPass {
        cache,
        terms,
        dpred,
        dlatent,
    })
}

fn combine(a: &LossTerms, b: &LossTerms) -> LossTerms {
    LossTerms {
        rec: a.rec + b.rec,
        sparsity: a.sparsity + b.sparsity,
        laplace: a.laplace + b.laplace,
        reg: a.reg + b.reg,
    }
}

/// Forward-only evaluation of the objective.
pub fn evaluate_batch<T: Real>(
    model: &BlendshapeModel<T>,
    batch: &BatchInput<T>,
    cfg: &LossConfig,
) -> Result<BatchObjective<T>> {
    let a = domain_pass(model, &batch.speech, Domain::Speech, cfg, false)?;
    let e = domain_pass(model, &batch.expression, Domain::Expression, cfg, false)?;
    let report = overall_loss(combine(&a.terms, &e.terms), &cfg.weights)?;
    Ok(BatchObjective {
        report,
        speech_latent: a.cache.latent().to_vec(),
        expression_latent: e.cache.latent().to_vec(),
    })
}

/// Total loss and the ReLU activation pattern of both encoders.
fn total_and_pattern<T: Real>(
    model: &BlendshapeModel<T>,
    batch: &BatchInput<T>,
    cfg: &LossConfig,
) -> Result<(f64, Vec<bool>)> {
    let a = domain_pass(model, &batch.speech, Domain::Speech, cfg, false)?;
    let e = domain_pass(model, &batch.expression, Domain::Expression, cfg, false)?;
    let report = overall_loss(combine(&a.terms, &e.terms), &cfg.weights)?;
    let k = model.basis.k();
    let mut pattern = a.cache.active_pattern();
    pattern.extend(e.cache.active_pattern());
    // the sparsity term is not differentiable where a cross weight changes sign
    for (pass, cross) in [(&a, k..2 * k), (&e, 0..k)] {
        for row in pass.cache.latent().chunks_exact(2 * k) {
            pattern.extend(row[cross.clone()].iter().map(|&v| v > T::zero()));
        }
    }
    Ok((report.total, pattern))
}

/// Loss report and the gradient of the total loss with respect to every
/// parameter, returned in a model-shaped buffer.
pub fn backward<T: Real>(
    model: &BlendshapeModel<T>,
    batch: &BatchInput<T>,
    cfg: &LossConfig,
) -> Result<(LossReport, BlendshapeModel<T>)> {
    let mut grads = model.zeros_like();
    let rows = model.basis.rows();
    let k2 = model.basis.cols();
    let mut terms = LossTerms::default();
    for domain in [Domain::Speech, Domain::Expression] {
        let mut pass = domain_pass(model, batch.domain(domain), domain, cfg, true)?;
        terms = combine(&terms, &pass.terms);
        let n = batch.domain(domain).count;
        if n == 0 {
            continue;
        }
        let latent = pass.cache.latent();
        // dbasis[rows x 2K] += dpred^T[rows x n] * latent[n x 2K]
        matmul_tn(
            &pass.dpred,
            latent,
            grads.basis.data_mut(),
            rows,
            n,
            k2,
            true,
        );
        // dlatent[n x 2K] += dpred[n x rows] * basis[rows x 2K]
        matmul(
            &pass.dpred,
            model.basis.data(),
            &mut pass.dlatent,
            n,
            rows,
            k2,
            true,
        );
        encoder_backward(
            &model.arch,
            model.encoder(domain),
            &pass.cache,
            &pass.dlatent,
            grads.encoder_mut(domain),
        );
    }
    let report = overall_loss(terms, &cfg.weights)?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite(format!("total loss {}", report.total)));
    }
    Ok((report, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupStatus {
    Pass,
    Fail,
    /// Gradient identically at the finite-difference noise floor, e.g. a
    /// conv bias ahead of instance norm or a constant (zero-variance)
    /// channel; compared in absolute terms.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    /// Probed entries whose +-step flipped a ReLU or the sign of a
    /// cross-half latent; they are replaced by the next candidate.
    pub kinks_skipped: usize,
    pub max_abs_err: f64,
    pub scale: f64,
    pub rel_err: f64,
    pub status: GroupStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.status != GroupStatus::Fail)
    }

    /// Largest relative error over non-degenerate groups.
    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .filter(|g| g.status != GroupStatus::Degenerate)
            .map(|g| g.rel_err)
            .fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.groups.iter().map(|g| g.checked).sum()
    }

    pub fn kinks_skipped(&self) -> usize {
        self.groups.iter().map(|g| g.kinks_skipped).sum()
    }
}

/// Gradients whose magnitude stays below this are indistinguishable from
/// finite-difference round-off at step 1e-5.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-8;

/// Compares analytic gradients with central differences in f64.
///
/// Up to `per_group` entries of every parameter group are probed, visited
/// in a seeded random order. Entries whose perturbation flips any ReLU or
/// the sign of any cross-half latent are skipped and the next candidate is
/// taken. Per group the relative error is
/// `max|analytic - numeric| / max(|analytic|, |numeric|)`.
pub fn gradient_check<T: Real>(
    model: &BlendshapeModel<T>,
    batch: &BatchInput<T>,
    cfg: &LossConfig,
    step: f64,
    tolerance: f64,
    per_group: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut m64: BlendshapeModel<f64> = model.cast();
    let b64: BatchInput<f64> = batch.cast();
    let (_, grads) = backward(&m64, &b64, cfg)?;
    let (_, base_pattern) = total_and_pattern(&m64, &b64, cfg)?;
    let names: Vec<String> = m64.param_groups().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grads
        .param_groups()
        .into_iter()
        .map(|(_, g)| g.to_vec())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = Vec::with_capacity(names.len());
    for (gi, name) in names.iter().enumerate() {
        let len = analytic[gi].len();
        let order = sample(&mut rng, len, len).into_vec();
        let (mut max_err, mut scale) = (0.0f64, 0.0f64);
        let (mut checked, mut kinks) = (0, 0);
        for &i in &order {
            if checked == per_group {
                break;
            }
            let orig = m64.param_groups_mut()[gi][i];
            m64.param_groups_mut()[gi][i] = orig + step;
            let (lp, pp) = total_and_pattern(&m64, &b64, cfg)?;
            m64.param_groups_mut()[gi][i] = orig - step;
            let (lm, pm) = total_and_pattern(&m64, &b64, cfg)?;
            m64.param_groups_mut()[gi][i] = orig;
            if pp != base_pattern || pm != base_pattern {
                kinks += 1;
                continue;
            }
            checked += 1;
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic[gi][i];
            max_err = max_err.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let (rel_err, status) = if checked == 0 {
            // every candidate sat on a kink
            (0.0, GroupStatus::Fail)
        } else if scale < GRADCHECK_ABS_FLOOR {
            let ok = max_err < GRADCHECK_ABS_FLOOR;
            (
                0.0,
                if ok {
                    GroupStatus::Degenerate
                } else {
                    GroupStatus::Fail
                },
            )
        } else {
            let r = max_err / scale;
            (
                r,
                if r < tolerance {
                    GroupStatus::Pass
                } else {
                    GroupStatus::Fail
                },
            )
        };
        groups.push(GroupCheck {
            name: name.clone(),
            checked,
            kinks_skipped: kinks,
            max_abs_err: max_err,
            scale,
            rel_err,
            status,
        });
    }
    Ok(GradCheckReport {
        step,
        tolerance,
        groups,
    })
}
