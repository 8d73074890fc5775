use super::ops::{layer_norm, linear};
use super::*;
use crate::latent::{LatentShape, MultimodalLatent};
use crate::predictor::NoisePredictor;
use crate::rng::{seeded, Rng};
use crate::schedule::{sample_timestep_vector, StrategyKind, TimestepVector};

fn small_config(self_conditioning: bool) -> DenoiserConfig {
    DenoiserConfig {
        widths: vec![2, 3],
        segments: 4,
        model_dim: 16,
        layers: 2,
        heads: 4,
        ff_mult: 2,
        steps: 1000,
        timestep_embed_dim: 8,
        self_conditioning,
    }
}

fn jittered(cfg: &DenoiserConfig, seed: u64) -> DenoiserParams {
    let mut rng = seeded(seed);
    let mut p = init_denoiser(cfg, &mut rng).unwrap();
    p.jitter(0.2, &mut rng);
    p
}

fn random_inputs(cfg: &DenoiserConfig, rng: &mut Rng) -> (MultimodalLatent, TimestepVector) {
    let z = MultimodalLatent::standard_normal(&cfg.latent_shape(), rng);
    let t = sample_timestep_vector(StrategyKind::Ptm, cfg.modalities(), cfg.segments, cfg.steps, rng);
    (z, t)
}

#[test]
fn init_is_deterministic() {
    let cfg = small_config(true);
    let a = init_denoiser(&cfg, &mut seeded(9)).unwrap();
    let b = init_denoiser(&cfg, &mut seeded(9)).unwrap();
    assert_eq!(a.weights(), b.weights());
    assert_eq!(a.ema(), a.weights());
    let c = init_denoiser(&cfg, &mut seeded(10)).unwrap();
    assert_ne!(a.weights(), c.weights());
}

#[test]
fn init_rejects_invalid_config() {
    let mut cfg = small_config(false);
    cfg.heads = 3;
    assert!(init_denoiser(&cfg, &mut seeded(0)).is_err());
    let mut cfg = small_config(false);
    cfg.layers = 0;
    assert!(init_denoiser(&cfg, &mut seeded(0)).is_err());
}

#[test]
fn parameter_count_matches_closed_form() {
    for sc in [false, true] {
        let cfg = DenoiserConfig {
            widths: vec![4, 6],
            segments: 8,
            model_dim: 32,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            steps: 1000,
            timestep_embed_dim: 32,
            self_conditioning: sc,
        };
        let p = init_denoiser(&cfg, &mut seeded(0)).unwrap();
        let (d, n, e, f, l) = (32, 8, 32, 128, 2);
        let k = if sc { 2 } else { 1 };
        let per_modality = |dm: usize| (k * dm * d + d) + (d * dm + dm) + n * d;
        let expected = per_modality(4)
            + per_modality(6)
            + 2 * d
            + (e * d + d + d * d + d)
            + l * ((d * 6 * d + 6 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * f + f) + (f * d + d))
            + (d * 2 * d + 2 * d);
        assert_eq!(p.num_params(), expected);
        if !sc {
            assert_eq!(expected, 43_338);
        }
    }
}

#[test]
fn zero_modulation_reduces_to_projections() {
    let cfg = small_config(false);
    let p = init_denoiser(&cfg, &mut seeded(4)).unwrap();
    let mut rng = seeded(5);
    let (z, t) = random_inputs(&cfg, &mut rng);
    let out = denoise(&p, &z, &t, None).unwrap();

    // With every AdaLN map at zero, both residual branches are gated off and
    // the final norm is unmodulated.
    let d = cfg.model_dim;
    let memb = p.tensor("modality_emb").unwrap();
    for m in 0..cfg.modalities() {
        let w_in = p.tensor(&format!("modality.{m}.in_proj.weight")).unwrap();
        let b_in = p.tensor(&format!("modality.{m}.in_proj.bias")).unwrap();
        let w_out = p.tensor(&format!("modality.{m}.out_proj.weight")).unwrap();
        let b_out = p.tensor(&format!("modality.{m}.out_proj.bias")).unwrap();
        let pos = p.tensor(&format!("modality.{m}.pos_emb")).unwrap();
        let dm = cfg.widths[m];
        let mut h = linear(z.modality(m), cfg.segments, w_in, b_in, dm, d);
        for n in 0..cfg.segments {
            for c in 0..d {
                h[n * d + c] += pos[n * d + c] + memb[m * d + c];
            }
        }
        let (xhat, _) = layer_norm(&h, d);
        let expect = linear(&xhat, cfg.segments, w_out, b_out, d, dm);
        for (a, b) in out.modality(m).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // ... and therefore ignores the timestep vector entirely.
    let other = TimestepVector::filled(17, 2, 4);
    assert_eq!(denoise(&p, &z, &other, None).unwrap(), out);
}

#[test]
fn constant_timesteps_differ_only_by_position() {
    let cfg = small_config(false);
    let p = jittered(&cfg, 1);
    let view = p.view(WeightSet::Raw);
    let emb = view.embed_timestep_vector(&TimestepVector::filled(321, 2, 4)).unwrap();
    let d = cfg.model_dim;
    for m in 0..2 {
        let pos = p.tensor(&format!("modality.{m}.pos_emb")).unwrap();
        let base: Vec<f64> = (0..d).map(|c| emb.token(m * 4)[c] - pos[c]).collect();
        for n in 1..4 {
            for c in 0..d {
                let v = emb.token(m * 4 + n)[c] - pos[n * d + c];
                assert!((v - base[c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn clean_and_pure_noise_embeddings_are_distinct() {
    let cfg = small_config(false);
    let p = init_denoiser(&cfg, &mut seeded(2)).unwrap();
    let view = p.view(WeightSet::Raw);
    let a = view.embed_timestep_vector(&TimestepVector::filled(0, 2, 4)).unwrap();
    let b = view.embed_timestep_vector(&TimestepVector::filled(1000, 2, 4)).unwrap();
    let (x, y) = (a.token(0), b.token(0));
    let cos = super::ops::dot(x, y) / (super::ops::dot(x, x).sqrt() * super::ops::dot(y, y).sqrt());
    assert!(cos < 0.99, "cosine similarity {cos}");
}

#[test]
fn embedding_is_equivariant_to_segment_relabeling() {
    let cfg = small_config(false);
    let p = jittered(&cfg, 3);
    let tvec = TimestepVector::from_rows(vec![vec![0, 10, 500, 1000], vec![3, 3, 999, 42]]).unwrap();
    let perm = [2usize, 0, 3, 1];
    let d = cfg.model_dim;

    let mut permuted_params = p.clone();
    let mut permuted_t = tvec.clone();
    for m in 0..2 {
        let spec = p.layout().spec(&format!("modality.{m}.pos_emb")).unwrap().clone();
        let src = p.tensor(&spec.name).unwrap().to_vec();
        let dst = &mut permuted_params.weights_mut()[spec.offset..spec.offset + 4 * d];
        for n in 0..4 {
            dst[perm[n] * d..(perm[n] + 1) * d].copy_from_slice(&src[n * d..(n + 1) * d]);
            permuted_t.set(m, perm[n], tvec.get(m, n));
        }
    }
    let a = p.view(WeightSet::Raw).embed_timestep_vector(&tvec).unwrap();
    let b = permuted_params.view(WeightSet::Raw).embed_timestep_vector(&permuted_t).unwrap();
    for m in 0..2 {
        for n in 0..4 {
            assert_eq!(a.token(m * 4 + n), b.token(m * 4 + perm[n]));
        }
    }
}

#[test]
fn output_shape_matches_input() {
    for (widths, segments) in [(vec![1], 1), (vec![3, 1, 2], 5), (vec![4, 6], 8)] {
        let mut cfg = small_config(true);
        cfg.widths = widths;
        cfg.segments = segments;
        let p = jittered(&cfg, 7);
        let mut rng = seeded(8);
        let (z, t) = random_inputs(&cfg, &mut rng);
        let out = denoise(&p, &z, &t, None).unwrap();
        assert_eq!(out.shape(), z.shape());
        assert!(out.is_finite());
    }
}

#[test]
fn rejects_shape_mismatch() {
    let cfg = small_config(false);
    let p = init_denoiser(&cfg, &mut seeded(0)).unwrap();
    let z = MultimodalLatent::zeros(&LatentShape::new(5, vec![2, 3]).unwrap());
    assert!(denoise(&p, &z, &TimestepVector::filled(1, 2, 5), None).is_err());
    let z = MultimodalLatent::zeros(&cfg.latent_shape());
    assert!(denoise(&p, &z, &TimestepVector::filled(1, 2, 3), None).is_err());
    assert!(denoise(&p, &z, &TimestepVector::filled(1001, 2, 4), None).is_err());
}

#[test]
fn timestep_conditioning_is_live() {
    let cfg = small_config(false);
    let p = jittered(&cfg, 11);
    let mut rng = seeded(12);
    let (z, mut t) = random_inputs(&cfg, &mut rng);
    let base = denoise(&p, &z, &t, None).unwrap();
    t.set(1, 2, if t.get(1, 2) > 500 { 3 } else { 997 });
    let moved = denoise(&p, &z, &t, None).unwrap();
    let delta = base
        .values()
        .zip(moved.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(delta > 0.0);
}

#[test]
fn zero_self_condition_equals_absent() {
    let cfg = small_config(true);
    let p = jittered(&cfg, 13);
    let mut rng = seeded(14);
    let (z, t) = random_inputs(&cfg, &mut rng);
    let zeros = MultimodalLatent::zeros(&cfg.latent_shape());
    assert_eq!(
        denoise(&p, &z, &t, Some(&zeros)).unwrap(),
        denoise(&p, &z, &t, None).unwrap()
    );
    let sc = MultimodalLatent::standard_normal(&cfg.latent_shape(), &mut rng);
    assert_ne!(denoise(&p, &z, &t, Some(&sc)).unwrap(), denoise(&p, &z, &t, None).unwrap());
}

#[test]
fn modalities_attend_to_each_other() {
    let cfg = small_config(false);
    let p = jittered(&cfg, 15);
    let mut rng = seeded(16);
    let (z, t) = random_inputs(&cfg, &mut rng);
    let mut z2 = z.clone();
    z2.modality_mut(1).fill(0.0);
    let a = denoise(&p, &z, &t, None).unwrap();
    let b = denoise(&p, &z2, &t, None).unwrap();
    assert_ne!(a.modality(0), b.modality(0));
    assert_eq!(a, denoise(&p, &z, &t, None).unwrap());
}

fn sq_norm_loss(view: &Denoiser<'_>, z: &MultimodalLatent, t: &TimestepVector, sc: Option<&MultimodalLatent>) -> f64 {
    view.predict(z, t, sc).unwrap().values().map(|v| v * v).sum()
}

#[test]
fn parameter_gradients_match_central_differences() {
    let cfg = small_config(true);
    let p = jittered(&cfg, 21);
    let mut rng = seeded(22);
    let (z, t) = random_inputs(&cfg, &mut rng);
    let sc = MultimodalLatent::standard_normal(&cfg.latent_shape(), &mut rng);

    let view = p.view(WeightSet::Raw);
    let (out, cache) = view.forward(&z, &t, Some(&sc)).unwrap();
    let d_out = out.map(|v| 2.0 * v);
    let mut grads = vec![0.0; p.num_params()];
    view.backward(&cache, &d_out, &mut grads).unwrap();

    // One coordinate from every tensor.
    let h = 1e-4;
    for spec in &p.layout().specs {
        let idx = spec.offset + (spec.shape[0] * spec.shape[1] - 1) / 4;
        let mut plus = p.clone();
        plus.weights_mut()[idx] += h;
        let mut minus = p.clone();
        minus.weights_mut()[idx] -= h;
        let num = (sq_norm_loss(&plus.view(WeightSet::Raw), &z, &t, Some(&sc))
            - sq_norm_loss(&minus.view(WeightSet::Raw), &z, &t, Some(&sc)))
            / (2.0 * h);
        let ana = grads[idx];
        // Key biases have an identically zero gradient (softmax shift
        // invariance), so the denominator carries an absolute floor.
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
        assert!(rel < 1e-4, "{}: analytic {ana} vs numeric {num}", spec.name);
    }
}

#[test]
fn input_gradient_matches_central_differences() {
    let cfg = small_config(false);
    let p = jittered(&cfg, 31);
    let mut rng = seeded(32);
    let (z, t) = random_inputs(&cfg, &mut rng);
    let view = p.view(WeightSet::Raw);
    let (out, cache) = view.forward(&z, &t, None).unwrap();
    let mut scratch = vec![0.0; p.num_params()];
    let dz = view.backward(&cache, &out.map(|v| 2.0 * v), &mut scratch).unwrap();
    let flat = z.to_flat();
    let gflat = dz.to_flat();
    let h = 1e-5;
    for i in 0..flat.len() {
        let mut a = flat.clone();
        a[i] += h;
        let mut b = flat.clone();
        b[i] -= h;
        let za = MultimodalLatent::from_flat(z.shape(), &a).unwrap();
        let zb = MultimodalLatent::from_flat(z.shape(), &b).unwrap();
        let num = (sq_norm_loss(&view, &za, &t, None) - sq_norm_loss(&view, &zb, &t, None)) / (2.0 * h);
        let rel = (gflat[i] - num).abs() / gflat[i].abs().max(num.abs()).max(1e-8);
        assert!(rel < 1e-5, "input {i}: {} vs {num}", gflat[i]);
    }
}
