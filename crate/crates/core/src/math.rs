//! Dense f32 kernels with a fixed accumulation order.
//!
//! Every reduction here is a pure function of its inputs: the same slices
//! always produce the same bits, regardless of call site or thread. Dot
//! products use eight interleaved partial sums combined in a fixed tree,
//! which lets the compiler vectorise them without reassociating.

const LANES: usize = 8;

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; LANES];
    let chunks = a.len() / LANES;
    for (ca, cb) in a.chunks_exact(LANES).zip(b.chunks_exact(LANES)) {
        for i in 0..LANES {
            acc[i] += ca[i] * cb[i];
        }
    }
    let mut sum = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for i in chunks * LANES..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[o] = dot(weight[o, :], x)` for an output-major `out_dim x in_dim` matrix.
#[inline]
pub fn matvec(weight: &[f32], x: &[f32], out: &mut [f32]) {
    let in_dim = x.len();
    debug_assert_eq!(weight.len(), in_dim * out.len());
    for (o, row) in out.iter_mut().zip(weight.chunks_exact(in_dim)) {
        *o = dot(row, x);
    }
}

/// `dx += weight^T dy` for an output-major matrix.
#[inline]
pub fn matvec_t_acc(weight: &[f32], dy: &[f32], dx: &mut [f32]) {
    let in_dim = dx.len();
    for (g, row) in dy.iter().zip(weight.chunks_exact(in_dim)) {
        if *g != 0.0 {
            axpy(*g, row, dx);
        }
    }
}

/// `dweight[o, :] += dy[o] * x`
#[inline]
pub fn outer_acc(dy: &[f32], x: &[f32], dweight: &mut [f32]) {
    let in_dim = x.len();
    for (g, row) in dy.iter().zip(dweight.chunks_exact_mut(in_dim)) {
        if *g != 0.0 {
            axpy(*g, x, row);
        }
    }
}

pub fn sum(values: &[f32]) -> f32 {
    values.iter().fold(0.0, |acc, v| acc + v)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(values: &mut [f32]) {
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0f32;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in values.iter_mut() {
        *v *= inv;
    }
}

pub fn log_sum_exp(values: &[f32]) -> f32 {
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let total = values.iter().fold(0.0f32, |acc, v| acc + (v - max).exp());
    max + total.ln()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn all_finite(values: &[f32]) -> bool {
    values.iter().all(|v| v.is_finite())
}

pub const NORM_EPS: f32 = 1e-5;

/// Statistics kept by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormStats {
    pub mean: f32,
    pub rstd: f32,
}

/// LayerNorm with learned gain and bias.
pub fn layer_norm(x: &[f32], gain: &[f32], bias: &[f32], out: &mut [f32]) -> NormStats {
    let n = x.len() as f32;
    let mean = sum(x) / n;
    let var = x
        .iter()
        .fold(0.0f32, |acc, v| acc + (v - mean) * (v - mean))
        / n;
    let rstd = 1.0 / (var + NORM_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    NormStats { mean, rstd }
}

/// Backward of [`layer_norm`]; accumulates into `dx`, `dgain` and `dbias`.
pub fn layer_norm_backward(
    x: &[f32],
    gain: &[f32],
    stats: NormStats,
    dy: &[f32],
    dx: &mut [f32],
    dgain: &mut [f32],
    dbias: &mut [f32],
) {
    let n = x.len();
    let mut mean_g = 0.0f32;
    let mut mean_gx = 0.0f32;
    for i in 0..n {
        let xhat = (x[i] - stats.mean) * stats.rstd;
        let g = dy[i] * gain[i];
        mean_g += g;
        mean_gx += g * xhat;
        dgain[i] += dy[i] * xhat;
        dbias[i] += dy[i];
    }
    mean_g /= n as f32;
    mean_gx /= n as f32;
    for i in 0..n {
        let xhat = (x[i] - stats.mean) * stats.rstd;
        dx[i] += stats.rstd * (dy[i] * gain[i] - mean_g - xhat * mean_gx);
    }
}
