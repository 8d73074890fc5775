//! Dense kernels on row-major buffers. Weights are `in × out`.

pub(crate) const LN_EPS: f64 = 1e-6;

/// `y = x W + b` for `rows` input rows.
pub(crate) fn linear(x: &[f64], rows: usize, w: &[f64], b: &[f64], din: usize, dout: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * din);
    debug_assert_eq!(w.len(), din * dout);
    let mut y = vec![0.0; rows * dout];
    for (xr, yr) in x.chunks_exact(din).zip(y.chunks_exact_mut(dout)) {
        yr.copy_from_slice(b);
        for (&xv, wk) in xr.iter().zip(w.chunks_exact(dout)) {
            for (yj, &wj) in yr.iter_mut().zip(wk) {
                *yj += xv * wj;
            }
        }
    }
    y
}

/// `dx = dy Wᵀ`.
pub(crate) fn linear_input_grad(dy: &[f64], rows: usize, w: &[f64], din: usize, dout: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * din];
    for (dyr, dxr) in dy.chunks_exact(dout).zip(dx.chunks_exact_mut(din)) {
        for (dxk, wk) in dxr.iter_mut().zip(w.chunks_exact(dout)) {
            *dxk = dot(dyr, wk);
        }
    }
    dx
}

/// `dW += xᵀ dy`, `db += Σ_rows dy`.
pub(crate) fn linear_param_grad(
    x: &[f64],
    dy: &[f64],
    din: usize,
    dout: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    for (xr, dyr) in x.chunks_exact(din).zip(dy.chunks_exact(dout)) {
        for (&xv, dwk) in xr.iter().zip(dw.chunks_exact_mut(dout)) {
            for (g, &d) in dwk.iter_mut().zip(dyr) {
                *g += xv * d;
            }
        }
        for (g, &d) in db.iter_mut().zip(dyr) {
            *g += d;
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Affine-free layer norm per row; returns `(x̂, 1/σ)`.
pub(crate) fn layer_norm(x: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / width);
    for (xr, yr) in x.chunks_exact(width).zip(xhat.chunks_exact_mut(width)) {
        let mean = xr.iter().sum::<f64>() / width as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - mean) * r;
        }
        inv.push(r);
    }
    (xhat, inv)
}

pub(crate) fn layer_norm_backward(dxhat: &[f64], xhat: &[f64], inv: &[f64], width: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dxhat.len()];
    let n = width as f64;
    for (((dyr, yr), dxr), &r) in dxhat
        .chunks_exact(width)
        .zip(xhat.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
        .zip(inv)
    {
        let mean_dy = dyr.iter().sum::<f64>() / n;
        let mean_dyy = dot(dyr, yr) / n;
        for ((g, &dy), &y) in dxr.iter_mut().zip(dyr).zip(yr) {
            *g = r * (dy - mean_dy - y * mean_dyy);
        }
    }
    dx
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub(crate) fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Sinusoidal features of a scalar timestep: `[sin(t f_k)…, cos(t f_k)…]`
/// with `f_k = 10000^(−k/half)`.
pub(crate) fn sinusoidal(t: f64, dim: usize, out: &mut [f64]) {
    let half = dim / 2;
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(f: impl Fn(f64) -> f64, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            assert!((gelu_grad(x) - fd(gelu, x)).abs() < 1e-8, "gelu at {x}");
            assert!((silu_grad(x) - fd(silu, x)).abs() < 1e-8, "silu at {x}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = [0.3, -1.2, 2.0, 0.5, 1.1, -0.4, 0.0, 0.9];
        let w = [0.7, -0.2, 1.5, 0.3, -1.0, 0.4, 0.25, -0.6];
        let loss = |x: &[f64]| dot(&layer_norm(x, 4).0, &w);
        let (xhat, inv) = layer_norm(&x, 4);
        let g = layer_norm_backward(&w, &xhat, &inv, 4);
        for i in 0..x.len() {
            let mut p = x;
            let mut m = x;
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let num = (loss(&p) - loss(&m)) / 2e-6;
            assert!((g[i] - num).abs() < 1e-7, "coord {i}: {} vs {num}", g[i]);
        }
    }

    #[test]
    fn linear_grads_match_naive() {
        let x = [1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let w = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let b = [0.01, -0.02];
        let y = linear(&x, 2, &w, &b, 3, 2);
        assert!((y[0] - (0.1 + 0.6 - 0.5 + 0.01)).abs() < 1e-15);
        let dy = [1.0, 0.0, 0.0, 1.0];
        let dx = linear_input_grad(&dy, 2, &w, 3, 2);
        assert_eq!(dx, vec![0.1, 0.3, 0.5, 0.2, 0.4, 0.6]);
        let mut dw = [0.0; 6];
        let mut db = [0.0; 2];
        linear_param_grad(&x, &dy, 3, 2, &mut dw, &mut db);
        assert_eq!(dw, [1.0, 0.5, 2.0, 0.0, -1.0, 3.0]);
        assert_eq!(db, [1.0, 1.0]);
    }
}
