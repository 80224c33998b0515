//! Inference: encode a speech and an expression deformation, drop the
//! cross-domain halves, and decode the own halves together.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::DisplacementField;
use crate::netcore::{decode, BlendshapeModel, Domain, LatentWeights};
use crate::parammap::{apply_mapping, LinearMap};

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub fused: DisplacementField,
    pub speech: LatentWeights,
    pub expression: LatentWeights,
    pub elapsed_ms: f64,
}

impl FusionResult {
    /// Raw latent `[w_A0 | w_E0]` whose decode is the fused field.
    pub fn combined_latent(&self) -> Vec<f32> {
        combined(&self.speech, &self.expression)
    }
}

fn combined(speech: &LatentWeights, expression: &LatentWeights) -> Vec<f32> {
    speech.own.iter().chain(&expression.own).copied().collect()
}

fn check_fields(
    model: &BlendshapeModel,
    speech: &DisplacementField,
    expr: &DisplacementField,
) -> Result<()> {
    let n = model.shape.n_vertices;
    if speech.len() != n {
        return Err(Error::size("speech field vertices", n, speech.len()));
    }
    if expr.len() != n {
        return Err(Error::size("expression field vertices", n, expr.len()));
    }
    Ok(())
}

fn decode_raw(model: &BlendshapeModel, z: &[f32]) -> Result<DisplacementField> {
    DisplacementField::from_flat(&model.basis.apply(z))
}

fn fuse_latents(
    model: &BlendshapeModel,
    speech: LatentWeights,
    expression: LatentWeights,
    start: Instant,
) -> Result<FusionResult> {
    let fused = decode_raw(model, &combined(&speech, &expression))?;
    Ok(FusionResult {
        fused,
        speech,
        expression,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// `B_A w_A0 + B_E w_E0`; the cross halves are reported but not decoded.
pub fn fuse(
    model: &BlendshapeModel,
    speech: &DisplacementField,
    expr: &DisplacementField,
) -> Result<FusionResult> {
    let start = Instant::now();
    check_fields(model, speech, expr)?;
    let ls = model.encode_field(speech, Domain::Speech)?;
    let le = model.encode_field(expr, Domain::Expression)?;
    fuse_latents(model, ls, le, start)
}

/// Ablation baseline: the full reconstructions of both inputs added.
pub fn naive_interpolate(
    model: &BlendshapeModel,
    speech: &DisplacementField,
    expr: &DisplacementField,
) -> Result<DisplacementField> {
    check_fields(model, speech, expr)?;
    let a = decode(&model.basis, &model.encode_field(speech, Domain::Speech)?)?;
    let e = decode(&model.basis, &model.encode_field(expr, Domain::Expression)?)?;
    DisplacementField::new(
        a.offsets()
            .iter()
            .zip(e.offsets())
            .map(|(x, y)| [x[0] + y[0], x[1] + y[1], x[2] + y[2]])
            .collect(),
    )
}

/// Decode of the excluded secondary terms `B_E eps_A0 + B_A eps_E0`.
pub fn secondary_terms(
    model: &BlendshapeModel,
    result: &FusionResult,
) -> Result<DisplacementField> {
    let z: Vec<f32> = result
        .expression
        .cross
        .iter()
        .chain(&result.speech.cross)
        .copied()
        .collect();
    decode_raw(model, &z)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    #[default]
    Nearest,
    /// Linear blend of neighbouring expression own-half latents.
    Linear,
}

/// Expression frame used for speech frame `i`: `round(i * n_e / n_s)`,
/// clamped to the last frame.
pub fn resample_index(i: usize, n_speech: usize, n_expr: usize) -> usize {
    let pos = (i as f64 * n_expr as f64 / n_speech as f64).round() as usize;
    pos.min(n_expr - 1)
}

/// Fuses every speech frame with an expression frame resampled to the
/// speech frame count.
pub fn fuse_sequence(
    model: &BlendshapeModel,
    speech: &[DisplacementField],
    expr: &[DisplacementField],
    mode: Resample,
) -> Result<Vec<FusionResult>> {
    if speech.is_empty() {
        return Err(Error::InvalidArgument("empty speech sequence".into()));
    }
    if expr.is_empty() {
        return Err(Error::InvalidArgument("empty expression sequence".into()));
    }
    let expr_latents = expr
        .iter()
        .map(|f| {
            if f.len() != model.shape.n_vertices {
                return Err(Error::size(
                    "expression field vertices",
                    model.shape.n_vertices,
                    f.len(),
                ));
            }
            model.encode_field(f, Domain::Expression)
        })
        .collect::<Result<Vec<_>>>()?;
    let (ns, ne) = (speech.len(), expr.len());
    let mut out = Vec::with_capacity(ns);
    for (i, s) in speech.iter().enumerate() {
        let start = Instant::now();
        if s.len() != model.shape.n_vertices {
            return Err(Error::size(
                "speech field vertices",
                model.shape.n_vertices,
                s.len(),
            ));
        }
        let ls = model.encode_field(s, Domain::Speech)?;
        let le = match mode {
            Resample::Nearest => expr_latents[resample_index(i, ns, ne)].clone(),
            Resample::Linear => {
                let t = (i as f64 * ne as f64 / ns as f64).min((ne - 1) as f64);
                let (lo, hi) = (t.floor() as usize, (t.ceil() as usize).min(ne - 1));
                let f = (t - lo as f64) as f32;
                let (a, b) = (&expr_latents[lo], &expr_latents[hi]);
                let lerp = |x: &[f32], y: &[f32]| -> Vec<f32> {
                    x.iter().zip(y).map(|(&p, &q)| p + f * (q - p)).collect()
                };
                LatentWeights {
                    own: lerp(&a.own, &b.own),
                    cross: lerp(&a.cross, &b.cross),
                    domain: Domain::Expression,
                }
            }
        };
        out.push(fuse_latents(model, ls, le, start)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub n_frames: usize,
    pub n_v: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub fps: f64,
    pub fps_with_mapping: Option<f64>,
    pub threaded: bool,
    pub note: String,
}

fn timed_fps(n_frames: usize, mut frame: impl FnMut(usize) -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    for i in 0..n_frames {
        frame(i)?;
    }
    Ok(n_frames as f64 / start.elapsed().as_secs_f64())
}

/// Timing rounds; each rate is the best over rounds, with and without the
/// mapping measured alternately so both see the same machine state.
pub const BENCH_ROUNDS: usize = 3;

/// Wall-clock throughput of single-threaded `fuse` over `frames` pairs,
/// cycled to `n_frames` calls after one warm-up pass. With a mapping the
/// second rate also applies it to every result.
pub fn bench(
    model: &BlendshapeModel,
    frames: &[(DisplacementField, DisplacementField)],
    n_frames: usize,
    mapping: Option<&LinearMap>,
) -> Result<BenchReport> {
    if frames.is_empty() || n_frames == 0 {
        return Err(Error::InvalidArgument(
            "bench needs at least one frame".into(),
        ));
    }
    for (s, e) in frames {
        let r = fuse(model, s, e)?;
        if let Some(map) = mapping {
            apply_mapping(map, &r.speech, &r.expression)?;
        }
    }
    let (mut fps, mut fps_with_mapping) = (0.0f64, None::<f64>);
    for _ in 0..BENCH_ROUNDS {
        let plain = timed_fps(n_frames, |i| {
            let (s, e) = &frames[i % frames.len()];
            fuse(model, s, e).map(drop)
        })?;
        fps = fps.max(plain);
        if let Some(map) = mapping {
            let mapped = timed_fps(n_frames, |i| {
                let (s, e) = &frames[i % frames.len()];
                let r = fuse(model, s, e)?;
                apply_mapping(map, &r.speech, &r.expression).map(drop)
            })?;
            fps_with_mapping = Some(fps_with_mapping.map_or(mapped, |f: f64| f.max(mapped)));
        }
    }
    Ok(BenchReport {
        n_frames,
        n_v: model.shape.n_vertices,
        k: model.shape.k,
        fps,
        fps_with_mapping,
        threaded: false,
        note: format!(
            "single-threaded CPU, {} logical cores available; GPU figures are not comparable",
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::build_mapping_table;
    use crate::netcore::ModelShape;
    use crate::synth::{gen_dataset, gen_world};

    fn model() -> (BlendshapeModel, Vec<DisplacementField>) {
        let world = gen_world(120, 3, 0.1, 4).unwrap();
        let ds = gen_dataset(&world, 6, 5).unwrap();
        let shape = ModelShape {
            n_vertices: 120,
            k: 3,
            grid: 8,
            channels_base: 2,
            channels_cap: 4,
            input_scale: 1e-3,
        };
        let table = build_mapping_table(&world.template, 8).unwrap();
        let mut m = BlendshapeModel::new(shape, table, 2).unwrap();
        // larger basis so outputs are well above rounding noise
        m.basis.data_mut().iter_mut().for_each(|v| *v *= 1000.0);
        let fields = ds.samples.into_iter().map(|s| s.field).collect();
        (m, fields)
    }

    #[test]
    fn fused_equals_decode_of_own_halves() {
        let (m, f) = model();
        let r = fuse(&m, &f[0], &f[7]).unwrap();
        let z = r.combined_latent();
        assert_eq!(r.fused.to_flat(), m.basis.apply(&z));
    }

    #[test]
    fn naive_minus_fuse_is_secondary() {
        let (m, f) = model();
        for i in 0..6 {
            let r = fuse(&m, &f[i], &f[6 + i]).unwrap();
            let naive = naive_interpolate(&m, &f[i], &f[6 + i]).unwrap();
            let sec = secondary_terms(&m, &r).unwrap();
            for ((n, a), s) in naive
                .to_flat()
                .iter()
                .zip(r.fused.to_flat())
                .zip(sec.to_flat())
            {
                assert!((n - a - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_expression_keeps_speech_own_component() {
        let (m, f) = model();
        let zero = DisplacementField::zeros(120);
        let r = fuse(&m, &f[0], &zero).unwrap();
        let ls = m.encode_field(&f[0], Domain::Speech).unwrap();
        let le = m.encode_field(&zero, Domain::Expression).unwrap();
        let mut z = ls.own.clone();
        z.extend(&le.own);
        assert_eq!(r.fused.to_flat(), m.basis.apply(&z));
    }

    #[test]
    fn own_component_ignores_other_encoder_cross_params() {
        let (mut m, f) = model();
        let zero = DisplacementField::zeros(120);
        let before = fuse(&m, &f[0], &zero).unwrap();
        // perturb the expression encoder's cross-half outputs only
        let k = m.shape.k;
        let dense_rows = m.encoder_e.dense_weight.len() / (2 * k);
        for j in 0..k {
            m.encoder_e.dense_bias[j] += 0.5;
            for c in 0..dense_rows {
                m.encoder_e.dense_weight[j * dense_rows + c] *= -3.0;
            }
        }
        let after = fuse(&m, &f[0], &zero).unwrap();
        assert_eq!(before.speech, after.speech);
        assert_eq!(before.fused, after.fused);
    }

    #[test]
    fn zero_inputs_without_latent_bias_give_zero() {
        let (mut m, _) = model();
        m.encoder_a.dense_bias.iter_mut().for_each(|b| *b = 0.0);
        m.encoder_e.dense_bias.iter_mut().for_each(|b| *b = 0.0);
        let zero = DisplacementField::zeros(120);
        let r = fuse(&m, &zero, &zero).unwrap();
        assert!(r.fused.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch() {
        let (m, f) = model();
        assert!(fuse(&m, &f[0], &DisplacementField::zeros(3)).is_err());
        assert!(naive_interpolate(&m, &DisplacementField::zeros(3), &f[0]).is_err());
    }

    #[test]
    fn resample_oracle() {
        let idx: Vec<usize> = (0..25).map(|i| resample_index(i, 25, 10)).collect();
        let oracle: Vec<usize> = (0..25)
            .map(|i| ((i as f64 * 10.0 / 25.0).round() as usize).min(9))
            .collect();
        assert_eq!(idx, oracle);
        assert!((0..7).all(|i| resample_index(i, 7, 1) == 0));
        assert!((0..5).all(|i| resample_index(i, 5, 5) == i));
    }

    #[test]
    fn sequence_equal_length_is_elementwise() {
        let (m, f) = model();
        let seq = fuse_sequence(&m, &f[0..3], &f[6..9], Resample::Nearest).unwrap();
        for i in 0..3 {
            assert_eq!(seq[i].fused, fuse(&m, &f[i], &f[6 + i]).unwrap().fused);
        }
    }

    #[test]
    fn sequence_broadcasts_single_expression() {
        let (m, f) = model();
        let seq = fuse_sequence(&m, &f[0..4], &f[6..7], Resample::Nearest).unwrap();
        for (i, r) in seq.iter().enumerate() {
            assert_eq!(r.fused, fuse(&m, &f[i], &f[6]).unwrap().fused);
        }
        let lin = fuse_sequence(&m, &f[0..4], &f[6..7], Resample::Linear).unwrap();
        assert_eq!(lin[3].fused, seq[3].fused);
    }

    #[test]
    fn sequence_rejects_empty() {
        let (m, f) = model();
        assert!(fuse_sequence(&m, &[], &f[0..1], Resample::Nearest).is_err());
        assert!(fuse_sequence(&m, &f[0..1], &[], Resample::Nearest).is_err());
    }

    #[test]
    fn fuse_is_deterministic() {
        let (m, f) = model();
        let a = fuse(&m, &f[1], &f[8]).unwrap();
        let b = fuse(&m, &f[1], &f[8]).unwrap();
        assert_eq!(a.fused, b.fused);
    }
}
