//! Forward and reverse passes of the multimodal diffusion transformer.
//!
//! One token per (modality, segment), ordered modality-major. Every token
//! carries its own conditioning vector built from its timestep, so cells at
//! different noise levels are modulated independently by AdaLN. Attention is
//! full and bidirectional over all M·N tokens.

use super::config::DenoiserConfig;
use super::ops::*;
use super::params::{DenoiserParams, Layout, WeightSet};
use crate::error::{shape_err, Result};
use crate::latent::MultimodalLatent;
use crate::predictor::{DifferentiablePredictor, NoisePredictor};
use crate::schedule::TimestepVector;

/// Read-only view of one weight set.
#[derive(Clone, Copy)]
pub struct Denoiser<'a> {
    pub config: &'a DenoiserConfig,
    pub layout: &'a Layout,
    pub weights: &'a [f64],
}

impl DenoiserParams {
    pub fn view(&self, which: WeightSet) -> Denoiser<'_> {
        Denoiser {
            config: self.config(),
            layout: self.layout(),
            weights: self.set(which),
        }
    }
}

/// Per-token conditioning vectors (M·N × d, token-major).
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningEmbedding {
    pub width: usize,
    pub data: Vec<f64>,
}

impl ConditioningEmbedding {
    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

struct LayerCache {
    modv: Vec<f64>,
    xhat1: Vec<f64>,
    inv1: Vec<f64>,
    a: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn_o: Vec<f64>,
    attn_out: Vec<f64>,
    xhat2: Vec<f64>,
    inv2: Vec<f64>,
    b: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
    ff_out: Vec<f64>,
}

/// Activations retained for the reverse pass.
pub struct ForwardCache {
    temb: Vec<f64>,
    t_pre: Vec<f64>,
    t_hidden: Vec<f64>,
    cond: Vec<f64>,
    cond_act: Vec<f64>,
    inputs: Vec<Vec<f64>>,
    layers: Vec<LayerCache>,
    fmod: Vec<f64>,
    xhat_f: Vec<f64>,
    inv_f: Vec<f64>,
    y_final: Vec<f64>,
}

impl<'a> Denoiser<'a> {
    #[inline]
    fn w(&self, b: super::params::Block) -> &'a [f64] {
        b.of(self.weights)
    }

    fn check_inputs(
        &self,
        z_t: &MultimodalLatent,
        tvec: &TimestepVector,
        self_cond: Option<&MultimodalLatent>,
    ) -> Result<()> {
        let shape = self.config.latent_shape();
        if *z_t.shape() != shape {
            return Err(shape_err(&shape, z_t.shape()));
        }
        if tvec.modalities() != shape.modalities() || tvec.segments() != shape.segments {
            return Err(shape_err(
                format!("{}x{} timesteps", shape.modalities(), shape.segments),
                format!("{}x{}", tvec.modalities(), tvec.segments()),
            ));
        }
        tvec.check_range(self.config.steps)?;
        if let Some(sc) = self_cond {
            z_t.ensure_same_shape(sc)?;
        }
        Ok(())
    }

    /// Sum of each token's learned temporal position and modality embedding.
    fn position_terms(&self) -> Vec<f64> {
        let cfg = self.config;
        let d = cfg.model_dim;
        let memb = self.w(self.layout.modality_emb);
        let mut out = vec![0.0; cfg.tokens() * d];
        for m in 0..cfg.modalities() {
            let pos = self.w(self.layout.modality[m].pos);
            for n in 0..cfg.segments {
                let i = m * cfg.segments + n;
                for c in 0..d {
                    out[i * d + c] = pos[n * d + c] + memb[m * d + c];
                }
            }
        }
        out
    }

    fn embed(&self, tvec: &TimestepVector) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let cfg = self.config;
        let (e, d, tokens) = (cfg.timestep_embed_dim, cfg.model_dim, cfg.tokens());
        let mut temb = vec![0.0; tokens * e];
        for (i, &t) in tvec.entries().iter().enumerate() {
            sinusoidal(t as f64, e, &mut temb[i * e..(i + 1) * e]);
        }
        let t_pre = linear(&temb, tokens, self.w(self.layout.t_w1), self.w(self.layout.t_b1), e, d);
        let t_hidden: Vec<f64> = t_pre.iter().map(|&x| silu(x)).collect();
        let mut cond = linear(&t_hidden, tokens, self.w(self.layout.t_w2), self.w(self.layout.t_b2), d, d);
        for (c, p) in cond.iter_mut().zip(self.position_terms()) {
            *c += p;
        }
        (temb, t_pre, t_hidden, cond)
    }

    /// Sinusoidal timestep features → two-layer SiLU MLP, plus each token's
    /// positional and modality embeddings.
    pub fn embed_timestep_vector(&self, tvec: &TimestepVector) -> Result<ConditioningEmbedding> {
        tvec.check_range(self.config.steps)?;
        if tvec.modalities() != self.config.modalities() || tvec.segments() != self.config.segments {
            return Err(shape_err(
                format!("{}x{}", self.config.modalities(), self.config.segments),
                format!("{}x{}", tvec.modalities(), tvec.segments()),
            ));
        }
        Ok(ConditioningEmbedding {
            width: self.config.model_dim,
            data: self.embed(tvec).3,
        })
    }

    pub fn forward(
        &self,
        z_t: &MultimodalLatent,
        tvec: &TimestepVector,
        self_cond: Option<&MultimodalLatent>,
    ) -> Result<(MultimodalLatent, ForwardCache)> {
        self.check_inputs(z_t, tvec, self_cond)?;
        let cfg = self.config;
        let lay = self.layout;
        let (d, tokens, nseg) = (cfg.model_dim, cfg.tokens(), cfg.segments);
        let (heads, hd, f) = (cfg.heads, cfg.head_dim(), cfg.ff_dim());

        let (temb, t_pre, t_hidden, cond) = self.embed(tvec);
        let cond_act: Vec<f64> = cond.iter().map(|&x| silu(x)).collect();
        let posmod = self.position_terms();

        // Input projection per modality.
        let mut h = vec![0.0; tokens * d];
        let mut inputs = Vec::with_capacity(cfg.modalities());
        for m in 0..cfg.modalities() {
            let dm = cfg.widths[m];
            let din = cfg.input_width(m);
            let mut x = vec![0.0; nseg * din];
            for n in 0..nseg {
                x[n * din..n * din + dm].copy_from_slice(z_t.segment(m, n));
                if cfg.self_conditioning {
                    if let Some(sc) = self_cond {
                        x[n * din + dm..(n + 1) * din].copy_from_slice(sc.segment(m, n));
                    }
                }
            }
            let mb = &lay.modality[m];
            let u = linear(&x, nseg, self.w(mb.in_w), self.w(mb.in_b), din, d);
            let base = m * nseg * d;
            for (k, v) in u.iter().enumerate() {
                h[base + k] = v + posmod[base + k];
            }
            inputs.push(x);
        }

        let scale = 1.0 / (hd as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.layers);
        for lb in &lay.layers {
            let modv = linear(&cond_act, tokens, self.w(lb.ada_w), self.w(lb.ada_b), d, 6 * d);
            let chunk = |i: usize, j: usize| &modv[i * 6 * d + j * d..i * 6 * d + (j + 1) * d];

            let (xhat1, inv1) = layer_norm(&h, d);
            let mut a = vec![0.0; tokens * d];
            for i in 0..tokens {
                let (shift, sc) = (chunk(i, 0), chunk(i, 1));
                for c in 0..d {
                    a[i * d + c] = xhat1[i * d + c] * (1.0 + sc[c]) + shift[c];
                }
            }
            let qkv = linear(&a, tokens, self.w(lb.qkv_w), self.w(lb.qkv_b), d, 3 * d);
            let mut probs = vec![0.0; heads * tokens * tokens];
            let mut attn_o = vec![0.0; tokens * d];
            for hh in 0..heads {
                let qo = hh * hd;
                let ko = d + hh * hd;
                let vo = 2 * d + hh * hd;
                for i in 0..tokens {
                    let q = &qkv[i * 3 * d + qo..i * 3 * d + qo + hd];
                    let row = &mut probs[(hh * tokens + i) * tokens..(hh * tokens + i + 1) * tokens];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, p) in row.iter_mut().enumerate() {
                        *p = dot(q, &qkv[j * 3 * d + ko..j * 3 * d + ko + hd]) * scale;
                        mx = mx.max(*p);
                    }
                    let mut sum = 0.0;
                    for p in row.iter_mut() {
                        *p = (*p - mx).exp();
                        sum += *p;
                    }
                    for p in row.iter_mut() {
                        *p /= sum;
                    }
                    let o = &mut attn_o[i * d + qo..i * d + qo + hd];
                    for (j, &p) in row.iter().enumerate() {
                        let v = &qkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                        for (oc, &vc) in o.iter_mut().zip(v) {
                            *oc += p * vc;
                        }
                    }
                }
            }
            let attn_out = linear(&attn_o, tokens, self.w(lb.o_w), self.w(lb.o_b), d, d);
            for i in 0..tokens {
                let gate = chunk(i, 2);
                for c in 0..d {
                    h[i * d + c] += gate[c] * attn_out[i * d + c];
                }
            }

            let (xhat2, inv2) = layer_norm(&h, d);
            let mut b = vec![0.0; tokens * d];
            for i in 0..tokens {
                let (shift, sc) = (chunk(i, 3), chunk(i, 4));
                for c in 0..d {
                    b[i * d + c] = xhat2[i * d + c] * (1.0 + sc[c]) + shift[c];
                }
            }
            let ff_pre = linear(&b, tokens, self.w(lb.ff1_w), self.w(lb.ff1_b), d, f);
            let ff_act: Vec<f64> = ff_pre.iter().map(|&x| gelu(x)).collect();
            let ff_out = linear(&ff_act, tokens, self.w(lb.ff2_w), self.w(lb.ff2_b), f, d);
            for i in 0..tokens {
                let gate = chunk(i, 5);
                for c in 0..d {
                    h[i * d + c] += gate[c] * ff_out[i * d + c];
                }
            }
            layers.push(LayerCache {
                modv,
                xhat1,
                inv1,
                a,
                qkv,
                probs,
                attn_o,
                attn_out,
                xhat2,
                inv2,
                b,
                ff_pre,
                ff_act,
                ff_out,
            });
        }

        let fmod = linear(&cond_act, tokens, self.w(lay.final_w), self.w(lay.final_b), d, 2 * d);
        let (xhat_f, inv_f) = layer_norm(&h, d);
        let mut y_final = vec![0.0; tokens * d];
        for i in 0..tokens {
            let shift = &fmod[i * 2 * d..i * 2 * d + d];
            let sc = &fmod[i * 2 * d + d..(i + 1) * 2 * d];
            for c in 0..d {
                y_final[i * d + c] = xhat_f[i * d + c] * (1.0 + sc[c]) + shift[c];
            }
        }

        let mut out = MultimodalLatent::zeros(&cfg.latent_shape());
        for m in 0..cfg.modalities() {
            let mb = &lay.modality[m];
            let rows = &y_final[m * nseg * d..(m + 1) * nseg * d];
            let o = linear(rows, nseg, self.w(mb.out_w), self.w(mb.out_b), d, cfg.widths[m]);
            out.modality_mut(m).copy_from_slice(&o);
        }

        Ok((
            out,
            ForwardCache {
                temb,
                t_pre,
                t_hidden,
                cond,
                cond_act,
                inputs,
                layers,
                fmod,
                xhat_f,
                inv_f,
                y_final,
            },
        ))
    }

    /// Accumulates ∂L/∂θ into `grads` (same layout as the weights) and
    /// returns ∂L/∂z_t, given ∂L/∂ε̂ in `d_out`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_out: &MultimodalLatent,
        grads: &mut [f64],
    ) -> Result<MultimodalLatent> {
        let cfg = self.config;
        let lay = self.layout;
        if *d_out.shape() != cfg.latent_shape() {
            return Err(shape_err(cfg.latent_shape(), d_out.shape()));
        }
        if grads.len() != lay.total {
            return Err(shape_err(lay.total, grads.len()));
        }
        let (d, tokens, nseg) = (cfg.model_dim, cfg.tokens(), cfg.segments);
        let (heads, hd, f) = (cfg.heads, cfg.head_dim(), cfg.ff_dim());

        // Output projections.
        let mut dy = vec![0.0; tokens * d];
        for m in 0..cfg.modalities() {
            let mb = &lay.modality[m];
            let dm = cfg.widths[m];
            let rows = &cache.y_final[m * nseg * d..(m + 1) * nseg * d];
            let g = d_out.modality(m);
            let (gw, gb) = pair_mut(grads, mb.out_w, mb.out_b);
            linear_param_grad(rows, g, d, dm, gw, gb);
            let dx = linear_input_grad(g, nseg, self.w(mb.out_w), d, dm);
            dy[m * nseg * d..(m + 1) * nseg * d].copy_from_slice(&dx);
        }

        // Final modulated norm.
        let mut d_cond_act = vec![0.0; tokens * d];
        let mut d_fmod = vec![0.0; tokens * 2 * d];
        let mut d_xf = vec![0.0; tokens * d];
        for i in 0..tokens {
            let sc = &cache.fmod[i * 2 * d + d..(i + 1) * 2 * d];
            for c in 0..d {
                let g = dy[i * d + c];
                d_xf[i * d + c] = g * (1.0 + sc[c]);
                d_fmod[i * 2 * d + c] = g;
                d_fmod[i * 2 * d + d + c] = g * cache.xhat_f[i * d + c];
            }
        }
        {
            let (gw, gb) = pair_mut(grads, lay.final_w, lay.final_b);
            linear_param_grad(&cache.cond_act, &d_fmod, d, 2 * d, gw, gb);
            add_into(&mut d_cond_act, &linear_input_grad(&d_fmod, tokens, self.w(lay.final_w), d, 2 * d));
        }
        let mut dh = layer_norm_backward(&d_xf, &cache.xhat_f, &cache.inv_f, d);

        let scale = 1.0 / (hd as f64).sqrt();
        for (lb, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            let chunk = |i: usize, j: usize| &lc.modv[i * 6 * d + j * d..i * 6 * d + (j + 1) * d];
            let mut d_modv = vec![0.0; tokens * 6 * d];

            // h_out = h_mid + gate2 * ff_out
            let mut d_ffout = vec![0.0; tokens * d];
            for i in 0..tokens {
                let gate = chunk(i, 5);
                for c in 0..d {
                    let g = dh[i * d + c];
                    d_modv[i * 6 * d + 5 * d + c] = g * lc.ff_out[i * d + c];
                    d_ffout[i * d + c] = g * gate[c];
                }
            }
            {
                let (gw, gb) = pair_mut(grads, lb.ff2_w, lb.ff2_b);
                linear_param_grad(&lc.ff_act, &d_ffout, f, d, gw, gb);
            }
            let mut d_ffpre = linear_input_grad(&d_ffout, tokens, self.w(lb.ff2_w), f, d);
            for (g, &x) in d_ffpre.iter_mut().zip(&lc.ff_pre) {
                *g *= gelu_grad(x);
            }
            {
                let (gw, gb) = pair_mut(grads, lb.ff1_w, lb.ff1_b);
                linear_param_grad(&lc.b, &d_ffpre, d, f, gw, gb);
            }
            let d_b = linear_input_grad(&d_ffpre, tokens, self.w(lb.ff1_w), d, f);
            let mut d_xhat2 = vec![0.0; tokens * d];
            for i in 0..tokens {
                let sc = chunk(i, 4);
                for c in 0..d {
                    let g = d_b[i * d + c];
                    d_xhat2[i * d + c] = g * (1.0 + sc[c]);
                    d_modv[i * 6 * d + 3 * d + c] = g;
                    d_modv[i * 6 * d + 4 * d + c] = g * lc.xhat2[i * d + c];
                }
            }
            add_into(&mut dh, &layer_norm_backward(&d_xhat2, &lc.xhat2, &lc.inv2, d));

            // h_mid = h_in + gate1 * attn_out
            let mut d_attn = vec![0.0; tokens * d];
            for i in 0..tokens {
                let gate = chunk(i, 2);
                for c in 0..d {
                    let g = dh[i * d + c];
                    d_modv[i * 6 * d + 2 * d + c] = g * lc.attn_out[i * d + c];
                    d_attn[i * d + c] = g * gate[c];
                }
            }
            {
                let (gw, gb) = pair_mut(grads, lb.o_w, lb.o_b);
                linear_param_grad(&lc.attn_o, &d_attn, d, d, gw, gb);
            }
            let d_o = linear_input_grad(&d_attn, tokens, self.w(lb.o_w), d, d);
            let mut d_qkv = vec![0.0; tokens * 3 * d];
            let mut d_p = vec![0.0; tokens];
            for hh in 0..heads {
                let qo = hh * hd;
                let ko = d + hh * hd;
                let vo = 2 * d + hh * hd;
                for i in 0..tokens {
                    let row = &lc.probs[(hh * tokens + i) * tokens..(hh * tokens + i + 1) * tokens];
                    let g_o = &d_o[i * d + qo..i * d + qo + hd];
                    for j in 0..tokens {
                        let v = &lc.qkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                        d_p[j] = dot(g_o, v);
                        let dv = &mut d_qkv[j * 3 * d + vo..j * 3 * d + vo + hd];
                        for (g, &go) in dv.iter_mut().zip(g_o) {
                            *g += row[j] * go;
                        }
                    }
                    let inner = dot(row, &d_p);
                    for j in 0..tokens {
                        let ds = row[j] * (d_p[j] - inner) * scale;
                        for c in 0..hd {
                            let kj = lc.qkv[j * 3 * d + ko + c];
                            let qi = lc.qkv[i * 3 * d + qo + c];
                            d_qkv[i * 3 * d + qo + c] += ds * kj;
                            d_qkv[j * 3 * d + ko + c] += ds * qi;
                        }
                    }
                }
            }
            {
                let (gw, gb) = pair_mut(grads, lb.qkv_w, lb.qkv_b);
                linear_param_grad(&lc.a, &d_qkv, d, 3 * d, gw, gb);
            }
            let d_a = linear_input_grad(&d_qkv, tokens, self.w(lb.qkv_w), d, 3 * d);
            let mut d_xhat1 = vec![0.0; tokens * d];
            for i in 0..tokens {
                let sc = chunk(i, 1);
                for c in 0..d {
                    let g = d_a[i * d + c];
                    d_xhat1[i * d + c] = g * (1.0 + sc[c]);
                    d_modv[i * 6 * d + c] = g;
                    d_modv[i * 6 * d + d + c] = g * lc.xhat1[i * d + c];
                }
            }
            add_into(&mut dh, &layer_norm_backward(&d_xhat1, &lc.xhat1, &lc.inv1, d));

            let (gw, gb) = pair_mut(grads, lb.ada_w, lb.ada_b);
            linear_param_grad(&cache.cond_act, &d_modv, d, 6 * d, gw, gb);
            add_into(&mut d_cond_act, &linear_input_grad(&d_modv, tokens, self.w(lb.ada_w), d, 6 * d));
        }

        // Input projections; dh is now ∂L/∂h₀.
        let mut d_z = MultimodalLatent::zeros(&cfg.latent_shape());
        for m in 0..cfg.modalities() {
            let mb = &lay.modality[m];
            let (dm, din) = (cfg.widths[m], cfg.input_width(m));
            let g = &dh[m * nseg * d..(m + 1) * nseg * d];
            let (gw, gb) = pair_mut(grads, mb.in_w, mb.in_b);
            linear_param_grad(&cache.inputs[m], g, din, d, gw, gb);
            let dx = linear_input_grad(g, nseg, self.w(mb.in_w), din, d);
            for n in 0..nseg {
                d_z.segment_mut(m, n).copy_from_slice(&dx[n * din..n * din + dm]);
            }
        }

        // cond = tm + pos + mod; h₀ also received pos + mod.
        let mut d_cond = d_cond_act;
        for (g, &x) in d_cond.iter_mut().zip(&cache.cond) {
            *g *= silu_grad(x);
        }
        for m in 0..cfg.modalities() {
            let pos = lay.modality[m].pos;
            for n in 0..nseg {
                let i = m * nseg + n;
                for c in 0..d {
                    let g = d_cond[i * d + c] + dh[i * d + c];
                    grads[pos.off + n * d + c] += g;
                    grads[lay.modality_emb.off + m * d + c] += g;
                }
            }
        }
        {
            let (gw, gb) = pair_mut(grads, lay.t_w2, lay.t_b2);
            linear_param_grad(&cache.t_hidden, &d_cond, d, d, gw, gb);
        }
        let mut d_th = linear_input_grad(&d_cond, tokens, self.w(lay.t_w2), d, d);
        for (g, &x) in d_th.iter_mut().zip(&cache.t_pre) {
            *g *= silu_grad(x);
        }
        let e = cfg.timestep_embed_dim;
        let (gw, gb) = pair_mut(grads, lay.t_w1, lay.t_b1);
        linear_param_grad(&cache.temb, &d_th, e, d, gw, gb);

        Ok(d_z)
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Disjoint mutable views of two blocks, `first` before `second` in memory.
fn pair_mut(
    buf: &mut [f64],
    first: super::params::Block,
    second: super::params::Block,
) -> (&mut [f64], &mut [f64]) {
    debug_assert!(first.off + first.len() <= second.off);
    let (lo, hi) = buf.split_at_mut(second.off);
    (&mut lo[first.range()], &mut hi[..second.len()])
}

impl NoisePredictor for Denoiser<'_> {
    fn predict(
        &self,
        z_t: &MultimodalLatent,
        tvec: &TimestepVector,
        self_cond: Option<&MultimodalLatent>,
    ) -> Result<MultimodalLatent> {
        Ok(self.forward(z_t, tvec, self_cond)?.0)
    }

    fn uses_self_conditioning(&self) -> bool {
        self.config.self_conditioning
    }
}

impl DifferentiablePredictor for Denoiser<'_> {
    fn predict_vjp(
        &self,
        z_t: &MultimodalLatent,
        tvec: &TimestepVector,
        self_cond: Option<&MultimodalLatent>,
        upstream: &mut dyn FnMut(&MultimodalLatent) -> Result<MultimodalLatent>,
    ) -> Result<(MultimodalLatent, MultimodalLatent)> {
        let (eps, cache) = self.forward(z_t, tvec, self_cond)?;
        let g = upstream(&eps)?;
        let mut scratch = vec![0.0; self.layout.total];
        let dz = self.backward(&cache, &g, &mut scratch)?;
        Ok((eps, dz))
    }
}

/// Noise prediction with the raw weights.
pub fn denoise(
    params: &DenoiserParams,
    z_t: &MultimodalLatent,
    tvec: &TimestepVector,
    self_cond: Option<&MultimodalLatent>,
) -> Result<MultimodalLatent> {
    params.view(WeightSet::Raw).predict(z_t, tvec, self_cond)
}
