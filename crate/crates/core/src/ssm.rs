//! Linear state-space layers: diagonal-plus-low-rank parameterization,
//! bilinear discretization, and the two equivalent ways of applying the
//! discrete system (step-by-step recurrence and long causal convolution).
//!
//! State matrices are real. A conjugate eigenvalue pair `re ± i·im` occupies
//! two consecutive state coordinates as the block `[[re, −im], [im, re]]`,
//! which is the real form of a conjugate-symmetric complex diagonal whose
//! output is read as twice the real part. An odd `state_dim` adds one real
//! mode at the end.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::autodiff::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LOG_DT_MIN: f64 = -3.0 * std::f64::consts::LN_10; // ln 0.001
pub const LOG_DT_MAX: f64 = -std::f64::consts::LN_10; // ln 0.1

/// Continuous-time SSM with `A = blockdiag(Λ) − P·Qᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSSM {
    /// Real part of each mode: conjugate pairs first, then the odd real mode.
    pub lambda_re: Vec<f64>,
    /// Imaginary part of each conjugate pair.
    pub lambda_im: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
    pub log_dt: f64,
}

/// Discrete system `h_k = Ā h_{k−1} + B̄ x_k`, `y_k = C̄ h_k` (`D̄ = 0`).
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSSM {
    pub state_dim: usize,
    /// Row-major `state_dim × state_dim`.
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c_bar: Vec<f64>,
    pub d_bar: f64,
}

impl ContinuousSSM {
    pub fn state_dim(&self) -> usize {
        self.p.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.state_dim() / 2
    }

    pub fn dt(&self) -> f64 {
        self.log_dt.exp()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        if n == 0 {
            return Err(Error::contract("state_dim must be at least 1"));
        }
        if self.lambda_im.len() != n / 2 || self.lambda_re.len() != n / 2 + n % 2 {
            return Err(Error::dim(format!(
                "state_dim {n} needs {} real and {} imaginary eigenvalue parts, got {} and {}",
                n / 2 + n % 2,
                n / 2,
                self.lambda_re.len(),
                self.lambda_im.len()
            )));
        }
        for (name, v) in [("Q", &self.q), ("B", &self.b), ("C", &self.c)] {
            if v.len() != n {
                return Err(Error::dim(format!("{name} has length {}, expected {n}", v.len())));
            }
        }
        Ok(())
    }

    /// Dense `A`, row-major.
    pub fn a_matrix(&self) -> Vec<f64> {
        let n = self.state_dim();
        let mut a = vec![0.0; n * n];
        for k in 0..n / 2 {
            let (re, im) = (self.lambda_re[k], self.lambda_im[k]);
            let (r0, r1) = (2 * k, 2 * k + 1);
            a[r0 * n + r0] = re;
            a[r1 * n + r1] = re;
            a[r0 * n + r1] = -im;
            a[r1 * n + r0] = im;
        }
        if n % 2 == 1 {
            a[(n - 1) * n + n - 1] = self.lambda_re[n / 2];
        }
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] -= self.p[i] * self.q[j];
            }
        }
        a
    }
}

/// Stable DPLR initialization from the HiPPO-LegS normal form:
/// `Λ_n = −½ + iπn`, rank-one correction of magnitude `√(n+½)`, unit-variance
/// `B` and `C`, and `log Δ` uniform on `[ln 0.001, ln 0.1]`.
pub fn init_dplr(state_dim: usize, seed: u64) -> Result<ContinuousSSM> {
    if state_dim == 0 {
        return Err(Error::contract("state_dim must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = state_dim / 2;
    let mut lambda_re = vec![-0.5; pairs + state_dim % 2];
    let lambda_im: Vec<f64> = (0..pairs).map(|n| PI * n as f64).collect();
    let mut p = vec![0.0; state_dim];
    for n in 0..pairs {
        let mag = ((n as f64 + 0.5) / 2.0).sqrt();
        p[2 * n] = mag;
        p[2 * n + 1] = mag;
    }
    if state_dim % 2 == 1 {
        p[state_dim - 1] = (pairs as f64 + 0.5).sqrt();
        lambda_re[pairs] = -0.5;
    }
    let mut normal = || -> f64 { rng.sample(StandardNormal) };
    let b = (0..state_dim).map(|_| normal()).collect();
    let c = (0..state_dim).map(|_| normal()).collect();
    let log_dt = rng.gen_range(LOG_DT_MIN..LOG_DT_MAX);
    Ok(ContinuousSSM {
        lambda_re,
        lambda_im,
        q: p.clone(),
        p,
        b,
        c,
        d: 0.0,
        log_dt,
    })
}

pub(crate) fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Gauss–Jordan inverse with partial pivoting.
pub(crate) fn invert(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut a = m.to_vec();
    let mut inv = identity(n);
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap_or(col);
        if a[pivot * n + col].abs() <= 1e-13 * scale {
            return Err(Error::numeric("singular resolvent (I − Δ/2·A)"));
        }
        if pivot != col {
            for j in 0..n {
                a.swap(pivot * n + j, col * n + j);
                inv.swap(pivot * n + j, col * n + j);
            }
        }
        let d = 1.0 / a[col * n + col];
        for j in 0..n {
            a[col * n + j] *= d;
            inv[col * n + j] *= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[r * n + j] -= f * a[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Ok(inv)
}

fn matvec(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| m[i * n..(i + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(m: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            out[j] += m[i * n + j] * v[i];
        }
    }
    out
}

fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    crate::autodiff::matmul_raw(a, b, n, n, n)
}

fn transpose_sq(a: &[f64], n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            t[j * n + i] = a[i * n + j];
        }
    }
    t
}

struct Bilinear {
    a: Vec<f64>,
    resolvent_inv: Vec<f64>,
    plus: Vec<f64>,
    disc: DiscreteSSM,
}

fn bilinear_parts(ssm: &ContinuousSSM) -> Result<Bilinear> {
    ssm.validate()?;
    let n = ssm.state_dim();
    let dt = ssm.dt();
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::numeric(format!("step size {dt} is not positive and finite")));
    }
    let a = ssm.a_matrix();
    let mut minus = identity(n);
    let mut plus = identity(n);
    for i in 0..n * n {
        minus[i] -= 0.5 * dt * a[i];
        plus[i] += 0.5 * dt * a[i];
    }
    let resolvent_inv = invert(&minus, n)?;
    let a_bar = matmul_sq(&resolvent_inv, &plus, n);
    let db: Vec<f64> = ssm.b.iter().map(|v| dt * v).collect();
    let b_bar = matvec(&resolvent_inv, &db, n);
    Ok(Bilinear {
        a,
        resolvent_inv,
        plus,
        disc: DiscreteSSM {
            state_dim: n,
            a_bar,
            b_bar,
            c_bar: ssm.c.clone(),
            d_bar: 0.0,
        },
    })
}

/// Bilinear (Tustin) transform:
/// `Ā = (I − Δ/2·A)⁻¹(I + Δ/2·A)`, `B̄ = (I − Δ/2·A)⁻¹·Δ·B`, `C̄ = C`.
pub fn discretize_bilinear(ssm: &ContinuousSSM) -> Result<DiscreteSSM> {
    Ok(bilinear_parts(ssm)?.disc)
}

/// `K̄_l = C̄·Ā^l·B̄` for `l < len`, by iterated state propagation.
pub fn compute_kernel(d: &DiscreteSSM, len: usize) -> Result<Tensor> {
    if len == 0 {
        return Err(Error::contract("kernel length must be at least 1"));
    }
    Tensor::vector(kernel_values(d, len))
}

fn kernel_values(d: &DiscreteSSM, len: usize) -> Vec<f64> {
    let n = d.state_dim;
    let mut h = d.b_bar.clone();
    let mut k = Vec::with_capacity(len);
    for l in 0..len {
        k.push(h.iter().zip(&d.c_bar).map(|(a, b)| a * b).sum());
        if l + 1 < len {
            h = matvec(&d.a_bar, &h, n);
        }
    }
    k
}

/// Runs the recurrence from `h_{−1} = 0`.
pub fn recurrent_scan(d: &DiscreteSSM, input: &Tensor) -> Result<Tensor> {
    if input.rank() != 1 {
        return Err(Error::dim(format!("recurrent_scan expects a sequence, got {:?}", input.shape())));
    }
    let n = d.state_dim;
    let mut h = vec![0.0; n];
    let mut out = Vec::with_capacity(input.len());
    for &x in input.data() {
        let mut next = matvec(&d.a_bar, &h, n);
        next.iter_mut().zip(&d.b_bar).for_each(|(hv, b)| *hv += b * x);
        h = next;
        out.push(h.iter().zip(&d.c_bar).map(|(a, b)| a * b).sum::<f64>() + d.d_bar * x);
    }
    Tensor::vector(out)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

/// Causal convolution truncated to `len` outputs, via zero-padded FFT.
fn causal_conv_raw(kernel: &[f64], input: &[f64], len: usize) -> Vec<f64> {
    let n = (2 * len - 1).next_power_of_two();
    let (fwd, inv) = plans(n);
    let mut ka: Vec<Complex<f64>> = (0..n)
        .map(|i| Complex::new(if i < len { kernel[i] } else { 0.0 }, 0.0))
        .collect();
    let mut xa: Vec<Complex<f64>> = (0..n)
        .map(|i| Complex::new(if i < len { input[i] } else { 0.0 }, 0.0))
        .collect();
    fwd.process(&mut ka);
    fwd.process(&mut xa);
    for (k, x) in ka.iter_mut().zip(&xa) {
        *k *= x;
    }
    inv.process(&mut ka);
    let norm = 1.0 / n as f64;
    ka[..len].iter().map(|c| c.re * norm).collect()
}

/// `y_k = Σ_{l≤k} K_l·x_{k−l}` for `k < L`.
pub fn fft_convolve(kernel: &Tensor, input: &Tensor) -> Result<Tensor> {
    if kernel.rank() != 1 || input.rank() != 1 || kernel.len() != input.len() {
        return Err(Error::dim(format!(
            "fft_convolve needs equal-length sequences, got {:?} and {:?}",
            kernel.shape(),
            input.shape()
        )));
    }
    if input.is_empty() {
        return Tensor::vector(Vec::new());
    }
    Tensor::vector(causal_conv_raw(kernel.data(), input.data(), input.len()))
}

/// Channelwise causal convolution: `kernel [C×L]`, `input [L×C]` → `[L×C]`.
pub(crate) fn channelwise_conv(kernel: &[f64], input: &[f64], len: usize, channels: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * channels];
    let mut col = vec![0.0; len];
    for c in 0..channels {
        for t in 0..len {
            col[t] = input[t * channels + c];
        }
        let y = causal_conv_raw(&kernel[c * len..(c + 1) * len], &col, len);
        for t in 0..len {
            out[t * channels + c] = y[t];
        }
    }
    out
}

/// Adjoints of [`channelwise_conv`]; both are causal convolutions against the
/// time-reversed upstream gradient.
pub(crate) fn channelwise_conv_adjoint(
    kernel: &[f64],
    input: &[f64],
    g: &[f64],
    len: usize,
    channels: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut gk = vec![0.0; channels * len];
    let mut gx = vec![0.0; len * channels];
    let mut col = vec![0.0; len];
    let mut grev = vec![0.0; len];
    for c in 0..channels {
        for t in 0..len {
            col[t] = input[t * channels + c];
            grev[t] = g[(len - 1 - t) * channels + c];
        }
        let k = &kernel[c * len..(c + 1) * len];
        let a = causal_conv_raw(k, &grev, len);
        let b = causal_conv_raw(&col, &grev, len);
        for s in 0..len {
            gx[s * channels + c] = a[len - 1 - s];
            gk[c * len + s] = b[len - 1 - s];
        }
    }
    (gk, gx)
}

/// Non-overlapping mean pooling along time; a trailing partial window is
/// averaged over its actual length.
pub fn downsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::contract("downsample factor must be at least 1"));
    }
    if x.rank() != 2 {
        return Err(Error::dim(format!("downsample expects [L×d], got {:?}", x.shape())));
    }
    let (len, d) = (x.shape()[0], x.shape()[1]);
    let out_len = len.div_ceil(factor);
    let mut out = vec![0.0; out_len * d];
    for w in 0..out_len {
        let (lo, hi) = (w * factor, ((w + 1) * factor).min(len));
        let dst = &mut out[w * d..(w + 1) * d];
        for t in lo..hi {
            dst.iter_mut().zip(x.row(t)).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / (hi - lo) as f64;
        dst.iter_mut().for_each(|o| *o *= inv);
    }
    Tensor::new(vec![out_len, d], out)
}

/// Gradients of a kernel-sum objective w.r.t. continuous SSM parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmGrads {
    pub lambda_re: Vec<f64>,
    pub lambda_im: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub log_dt: f64,
}

/// Reverse-mode adjoint of `ssm ↦ compute_kernel(discretize_bilinear(ssm), len)`
/// contracted with the upstream kernel gradient `gk`.
pub fn kernel_adjoint(ssm: &ContinuousSSM, len: usize, gk: &[f64]) -> Result<SsmGrads> {
    let parts = bilinear_parts(ssm)?;
    let n = ssm.state_dim();
    let dt = ssm.dt();
    let d = &parts.disc;

    let mut hs = Vec::with_capacity(len);
    let mut h = d.b_bar.clone();
    for l in 0..len {
        hs.push(h.clone());
        if l + 1 < len {
            h = matvec(&d.a_bar, &h, n);
        }
    }

    let mut g_c = vec![0.0; n];
    let mut g_abar = vec![0.0; n * n];
    let mut adj = vec![0.0; n];
    for l in (0..len).rev() {
        // adj_l = gk_l·C + Āᵀ·adj_{l+1}; Ā contributes adj_{l+1}·h_lᵀ.
        let mut next = if l + 1 < len {
            for i in 0..n {
                for j in 0..n {
                    g_abar[i * n + j] += adj[i] * hs[l][j];
                }
            }
            matvec_t(&d.a_bar, &adj, n)
        } else {
            vec![0.0; n]
        };
        for i in 0..n {
            next[i] += gk[l] * ssm.c[i];
            g_c[i] += gk[l] * hs[l][i];
        }
        adj = next;
    }
    let g_bbar = adj;

    let minv = &parts.resolvent_inv;
    let minv_t = transpose_sq(minv, n);
    let db: Vec<f64> = ssm.b.iter().map(|v| dt * v).collect();
    // Ā = M⁻¹·N, B̄ = M⁻¹·(ΔB)
    let mut g_minv = matmul_sq(&g_abar, &transpose_sq(&parts.plus, n), n);
    for i in 0..n {
        for j in 0..n {
            g_minv[i * n + j] += g_bbar[i] * db[j];
        }
    }
    let g_plus = matmul_sq(&minv_t, &g_abar, n);
    let g_db = matvec(&minv_t, &g_bbar, n);
    let g_minus = {
        let t = matmul_sq(&minv_t, &g_minv, n);
        let mut t = matmul_sq(&t, &minv_t, n);
        t.iter_mut().for_each(|v| *v = -*v);
        t
    };

    let a = &parts.a;
    let mut g_a = vec![0.0; n * n];
    let mut g_dt = 0.0;
    for i in 0..n * n {
        g_a[i] = 0.5 * dt * (g_plus[i] - g_minus[i]);
        g_dt += 0.5 * a[i] * (g_plus[i] - g_minus[i]);
    }
    g_dt += g_db.iter().zip(&ssm.b).map(|(g, b)| g * b).sum::<f64>();
    let g_b: Vec<f64> = g_db.iter().map(|g| dt * g).collect();

    let pairs = n / 2;
    let mut g_re = vec![0.0; ssm.lambda_re.len()];
    let mut g_im = vec![0.0; pairs];
    for k in 0..pairs {
        let (r0, r1) = (2 * k, 2 * k + 1);
        g_re[k] = g_a[r0 * n + r0] + g_a[r1 * n + r1];
        g_im[k] = g_a[r1 * n + r0] - g_a[r0 * n + r1];
    }
    if n % 2 == 1 {
        g_re[pairs] = g_a[(n - 1) * n + n - 1];
    }
    // A −= P·Qᵀ
    let g_p: Vec<f64> = matvec(&g_a, &ssm.q, n).iter().map(|v| -v).collect();
    let g_q: Vec<f64> = matvec_t(&g_a, &ssm.p, n).iter().map(|v| -v).collect();

    Ok(SsmGrads {
        lambda_re: g_re,
        lambda_im: g_im,
        p: g_p,
        q: g_q,
        b: g_b,
        c: g_c,
        log_dt: g_dt * dt,
    })
}

/// Graph handles for a bank of per-channel SSMs with trainable parameters.
///
/// Shapes: `log_neg_re [H×m]`, `im [H×pairs]`, `p`, `b`, `c` `[H×N]`,
/// `log_dt [H]`. Each channel uses `Λ_re = −exp(log_neg_re)` and `Q = P`,
/// which keeps `A + Aᵀ` negative definite and every channel stable.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub log_neg_re: Var,
    pub im: Var,
    pub p: Var,
    pub b: Var,
    pub c: Var,
    pub log_dt: Var,
}

pub(crate) struct KernelOp {
    vars: SsmVars,
    channels: usize,
    state_dim: usize,
    len: usize,
}

impl KernelOp {
    fn channel(&self, g: &Graph<'_>, h: usize) -> ContinuousSSM {
        let n = self.state_dim;
        let m = n / 2 + n % 2;
        let pairs = n / 2;
        let row = |v: Var, w: usize| g.value(v)[h * w..(h + 1) * w].to_vec();
        let p = row(self.vars.p, n);
        ContinuousSSM {
            lambda_re: row(self.vars.log_neg_re, m).iter().map(|v| -v.exp()).collect(),
            lambda_im: row(self.vars.im, pairs),
            q: p.clone(),
            p,
            b: row(self.vars.b, n),
            c: row(self.vars.c, n),
            d: 0.0,
            log_dt: g.value(self.vars.log_dt)[h],
        }
    }

    pub(crate) fn backward(&self, g: &Graph<'_>, upstream: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let (hn, n, len) = (self.channels, self.state_dim, self.len);
        let (m, pairs) = (n / 2 + n % 2, n / 2);
        let mut g_re = vec![0.0; hn * m];
        let mut g_im = vec![0.0; hn * pairs];
        let mut g_p = vec![0.0; hn * n];
        let mut g_b = vec![0.0; hn * n];
        let mut g_c = vec![0.0; hn * n];
        let mut g_dt = vec![0.0; hn];
        for h in 0..hn {
            let ssm = self.channel(g, h);
            // Forward succeeded with the same parameters, so this cannot fail.
            let gr = kernel_adjoint(&ssm, len, &upstream[h * len..(h + 1) * len])
                .expect("kernel adjoint after successful forward");
            for k in 0..m {
                g_re[h * m + k] = gr.lambda_re[k] * ssm.lambda_re[k];
            }
            g_im[h * pairs..(h + 1) * pairs].copy_from_slice(&gr.lambda_im);
            for i in 0..n {
                g_p[h * n + i] = gr.p[i] + gr.q[i];
            }
            g_b[h * n..(h + 1) * n].copy_from_slice(&gr.b);
            g_c[h * n..(h + 1) * n].copy_from_slice(&gr.c);
            g_dt[h] = gr.log_dt;
        }
        let v = self.vars;
        vec![
            (v.log_neg_re, g_re),
            (v.im, g_im),
            (v.p, g_p),
            (v.b, g_b),
            (v.c, g_c),
            (v.log_dt, g_dt),
        ]
    }
}

impl Graph<'_> {
    /// Materializes per-channel convolution kernels `[H×len]`.
    pub fn ssm_kernel(&mut self, vars: SsmVars, len: usize) -> Result<Var> {
        if len == 0 {
            return Err(Error::contract("kernel length must be at least 1"));
        }
        let ps = self.shape(vars.p).to_vec();
        if ps.len() != 2 {
            return Err(Error::dim(format!("SSM P must be [H×N], got {ps:?}")));
        }
        let (channels, state_dim) = (ps[0], ps[1]);
        let (m, pairs) = (state_dim / 2 + state_dim % 2, state_dim / 2);
        let expect = [
            (vars.log_neg_re, vec![channels, m]),
            (vars.im, vec![channels, pairs]),
            (vars.b, vec![channels, state_dim]),
            (vars.c, vec![channels, state_dim]),
            (vars.log_dt, vec![channels]),
        ];
        for (v, s) in &expect {
            if self.shape(*v) != s.as_slice() {
                return Err(Error::dim(format!(
                    "SSM parameter shape {:?}, expected {s:?}",
                    self.shape(*v)
                )));
            }
        }
        let op = KernelOp {
            vars,
            channels,
            state_dim,
            len,
        };
        let mut out = Vec::with_capacity(channels * len);
        for h in 0..channels {
            let d = discretize_bilinear(&op.channel(self, h))?;
            out.extend(kernel_values(&d, len));
        }
        let inputs = [vars.log_neg_re, vars.im, vars.p, vars.b, vars.c, vars.log_dt];
        self.push(vec![channels, len], out, Op::SsmKernel(op), &inputs)
    }
}
