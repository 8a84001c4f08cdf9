//! Self-checks run by `tessef verify`: exact oracles for the semi-CRF and
//! matching, finite-difference gradient checks, and agreement between the
//! recurrent and convolutional SSM modes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, ParamStore};
use crate::encoder::{Encoder, EncoderConfig, S4BlockConfig};
use crate::error::Result;
use crate::metrics::max_matching;
use crate::scorenet::{ScoreNet, ScoreNetConfig};
use crate::semicrf::{
    brute_force_enumerate, log_partition, marginals, nll_loss, nll_with_grad, viterbi_type, EventSet, ScoreTensor, Span,
};
use crate::ssm::{compute_kernel, discretize_bilinear, fft_convolve, recurrent_scan, ContinuousSSM};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed error or a short note.
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} suite={} check={} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(suite: &'static str, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        suite,
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Random scores `U(−2, 2)` on `T` frames with `N` types, uncapped.
pub fn random_scores(rng: &mut impl Rng, frames: usize, types: usize) -> ScoreTensor {
    ScoreTensor::from_fn(frames, types, |_, _, _| rng.gen_range(-2.0..2.0)).expect("finite scores")
}

/// `log Z`, maximum score and interval marginals of one type by enumeration.
pub struct Enumerated {
    pub log_z: f64,
    pub max_score: f64,
    pub argmax: Vec<Span>,
    /// Indexed `(end, start)`, `T×T`.
    pub marginals: Vec<f64>,
}

pub fn enumerate_type(scores: &ScoreTensor, e: usize) -> Result<Enumerated> {
    let sets = brute_force_enumerate(scores, e)?;
    let t = scores.frames();
    let max_score = sets.iter().map(|(_, s)| *s).fold(f64::NEG_INFINITY, f64::max);
    let log_z = max_score + sets.iter().map(|(_, s)| (s - max_score).exp()).sum::<f64>().ln();
    let argmax = sets
        .iter()
        .find(|(_, s)| *s == max_score)
        .map(|(set, _)| set.clone())
        .unwrap_or_default();
    let mut marg = vec![0.0; t * t];
    for (set, s) in &sets {
        let w = (s - log_z).exp();
        for sp in set {
            marg[sp.offset * t + sp.onset] += w;
        }
    }
    Ok(Enumerated {
        log_z,
        max_score,
        argmax,
        marginals: marg,
    })
}

/// Semi-CRF partition, Viterbi and marginals against enumeration on
/// `count` random tensors. Returns `(worst |ΔlogZ|, viterbi exact, worst
/// |Δmarginal|)`.
pub fn semicrf_oracle(count: usize, seed: u64) -> Result<(f64, bool, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_z, mut worst_m, mut exact) = (0.0f64, 0.0f64, true);
    for _ in 0..count {
        let t = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=2);
        let s = random_scores(&mut rng, t, n);
        let m = marginals(&s);
        for e in 0..n {
            let o = enumerate_type(&s, e)?;
            worst_z = worst_z.max((log_partition(&s, e)? - o.log_z).abs());
            let (_, best) = viterbi_type(&s, e)?;
            exact &= best == o.max_score;
            for j in 0..t {
                for i in 0..=j {
                    worst_m = worst_m.max((m.at(&[j, i, e]) - o.marginals[j * t + i]).abs());
                }
            }
        }
    }
    Ok((worst_z, exact, worst_m))
}

/// Largest gap between `∂nll/∂f` and both `marginal − 1[target]` and a
/// central difference of the loss, with the target drawn as the Viterbi set
/// of unrelated random scores.
pub fn gradient_identity(count: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_id, mut worst_fd) = (0.0f64, 0.0f64);
    let h = 1e-5;
    for _ in 0..count {
        let t = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=2);
        let s = random_scores(&mut rng, t, n);
        let other = random_scores(&mut rng, t, n);
        let target = EventSet::from_spans((0..n).map(|e| viterbi_type(&other, e).unwrap().0).collect());
        let (_, grad) = nll_with_grad(&s, &target)?;
        let m = marginals(&s);
        let mut ind = vec![0.0; grad.len()];
        for iv in target.iter() {
            ind[(iv.offset * t + iv.onset) * n + iv.event_type] = 1.0;
        }
        for j in 0..t {
            for i in 0..=j {
                for e in 0..n {
                    let k = (j * t + i) * n + e;
                    worst_id = worst_id.max((grad[k] - (m.data()[k] - ind[k])).abs());
                    let mut up = s.clone();
                    up.set(i, j, e, s.get(i, j, e) + h);
                    let mut down = s.clone();
                    down.set(i, j, e, s.get(i, j, e) - h);
                    let fd = (nll_loss(&up, &target)? - nll_loss(&down, &target)?) / (2.0 * h);
                    worst_fd = worst_fd.max((grad[k] - fd).abs());
                }
            }
        }
    }
    Ok((worst_id, worst_fd))
}

/// Central-difference check of encoder → score network → NLL on a
/// `frames`-frame input.
pub fn full_model_grad_check(frames: usize, seed: u64) -> Result<f64> {
    let mut store = ParamStore::new();
    let enc = Encoder::new(
        &mut store,
        EncoderConfig {
            input_dim: 3,
            n_blocks: 2,
            block: S4BlockConfig {
                model_dim: 4,
                state_dim: 4,
                ffn_hidden: 6,
                max_len: 64,
            },
        },
        seed,
    )?;
    let net = ScoreNet::new(
        &mut store,
        ScoreNetConfig {
            model_dim: 4,
            ffn_hidden: 6,
            d_pair: 3,
            c0: 2,
            cnn_channels: 3,
            n_types: 2,
            span_cap: 4,
        },
        seed + 1,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let x = Tensor::new(vec![frames, 3], (0..frames * 3).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let mut target = EventSet::new(2);
    target.push(0, 1, 3.min(frames - 1));
    if frames > 4 {
        target.push(1, 4, 4);
    }
    grad_check(&mut store, 1e-5, |g| {
        let xv = g.constant(&x);
        let h = enc.forward(g, xv)?;
        let raw = net.forward(g, h)?;
        g.semicrf_nll(raw, &target, 4)
    })
}

/// Random stable SSM: negative real parts, `Q = P`.
pub fn random_stable_ssm(rng: &mut impl Rng) -> ContinuousSSM {
    let n = rng.gen_range(1..=8);
    let (m, pairs) = (n / 2 + n % 2, n / 2);
    let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ContinuousSSM {
        lambda_re: (0..m).map(|_| -rng.gen_range(0.05..1.0)).collect(),
        lambda_im: (0..pairs).map(|_| rng.gen_range(0.0..10.0)).collect(),
        q: p.clone(),
        p,
        b: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        c: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        d: 0.0,
        log_dt: rng.gen_range(crate::ssm::LOG_DT_MIN..crate::ssm::LOG_DT_MAX),
    }
}

/// `y_k = Σ_{l≤k} K_l x_{k−l}` by the definition.
pub fn direct_convolve(kernel: &[f64], input: &[f64]) -> Vec<f64> {
    (0..input.len())
        .map(|k| (0..=k).map(|l| kernel[l] * input[k - l]).sum())
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

fn max_abs_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Recurrence vs kernel convolution, and FFT vs direct convolution, over
/// `count` random systems. Returns the two worst relative errors.
pub fn mode_equivalence(count: usize, max_len: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_modes, mut worst_fft) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let ssm = random_stable_ssm(&mut rng);
        let len = rng.gen_range(1..=max_len);
        let x = Tensor::vector((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let d = discretize_bilinear(&ssm)?;
        let k = compute_kernel(&d, len)?;
        let rec = recurrent_scan(&d, &x)?;
        let conv = fft_convolve(&k, &x)?;
        worst_modes = worst_modes.max(rel_err(conv.data(), rec.data()));
        let direct = direct_convolve(k.data(), x.data());
        worst_fft = worst_fft.max(max_abs_err(conv.data(), &direct));
    }
    Ok((worst_modes, worst_fft))
}

/// Maximum matching size by trying every assignment.
pub fn exhaustive_matching(adj: &[Vec<usize>], n_right: usize) -> usize {
    fn go(l: usize, adj: &[Vec<usize>], used: &mut [bool]) -> usize {
        if l == adj.len() {
            return 0;
        }
        let mut best = go(l + 1, adj, used);
        for &r in &adj[l] {
            if !used[r] {
                used[r] = true;
                best = best.max(1 + go(l + 1, adj, used));
                used[r] = false;
            }
        }
        best
    }
    go(0, adj, &mut vec![false; n_right])
}

pub fn random_bipartite(rng: &mut impl Rng) -> (Vec<Vec<usize>>, usize) {
    let (nl, nr) = (rng.gen_range(0..=6), rng.gen_range(0..=6));
    let density = rng.gen_range(0.1..0.9);
    let adj = (0..nl)
        .map(|_| (0..nr).filter(|_| rng.gen_bool(density)).collect())
        .collect();
    (adj, nr)
}

pub fn run_all() -> Vec<CheckResult> {
    vec![
        timed("oracle", "semicrf-enumeration", || {
            let (z, exact, m) = semicrf_oracle(200, 7)?;
            Ok((z <= 1e-9 && exact && m <= 1e-9, format!("logz_err={z:.2e} viterbi_exact={exact} marginal_err={m:.2e}")))
        }),
        timed("oracle", "small-partitions", || {
            let mut worst = 0.0f64;
            for (t, count) in [(1usize, 2.0f64), (2, 6.0), (3, 20.0)] {
                let s = ScoreTensor::from_fn(t, 1, |_, _, _| 0.0)?;
                worst = worst.max((log_partition(&s, 0)? - count.ln()).abs());
            }
            Ok((worst <= 1e-12, format!("err={worst:.2e}")))
        }),
        timed("oracle", "max-matching", || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let ok = (0..20).all(|_| {
                let (adj, nr) = random_bipartite(&mut rng);
                max_matching(&adj, nr).0 == exhaustive_matching(&adj, nr)
            });
            Ok((ok, "20 random graphs".into()))
        }),
        timed("gradcheck", "nll-gradient-identity", || {
            let (id, fd) = gradient_identity(100, 13)?;
            Ok((id <= 1e-9 && fd <= 1e-6, format!("identity_err={id:.2e} finite_diff_err={fd:.2e}")))
        }),
        timed("gradcheck", "full-model", || {
            let e = full_model_grad_check(6, 17)?;
            Ok((e <= 1e-6, format!("max_rel_err={e:.2e}")))
        }),
        timed("modes", "recurrence-vs-convolution", || {
            let (modes, fft) = mode_equivalence(50, 512, 19)?;
            Ok((
                modes <= 1e-8 && fft <= 1e-10,
                format!("scan_vs_conv={modes:.2e} fft_vs_direct={fft:.2e}"),
            ))
        }),
    ]
}
