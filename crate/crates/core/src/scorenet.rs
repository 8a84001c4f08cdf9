//! Pairwise interval scores from encoder frame features.
//!
//! Frame features pass through a shared FFN whose output splits into start
//! and end embeddings. Each frame pair `(j, i)` gets a `c₀`-channel feature
//! from a linear projection of `concat(start[i], end[j])`, and a small 2-D
//! CNN maps the `T×T×c₀` image to one score per event type.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::semicrf::ScoreTensor;
use crate::tensor::Tensor;

pub const DEFAULT_SPAN_CAP: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreNetConfig {
    pub model_dim: usize,
    pub ffn_hidden: usize,
    pub d_pair: usize,
    pub c0: usize,
    pub cnn_channels: usize,
    pub n_types: usize,
    /// Longest interval, in frames, that keeps a finite score.
    pub span_cap: usize,
}

impl Default for ScoreNetConfig {
    fn default() -> Self {
        ScoreNetConfig {
            model_dim: 32,
            ffn_hidden: 64,
            d_pair: 16,
            c0: 8,
            cnn_channels: 8,
            n_types: 3,
            span_cap: DEFAULT_SPAN_CAP,
        }
    }
}

/// Start and end embeddings, both `[T×d_pair]`.
#[derive(Clone, Copy, Debug)]
pub struct FrameEmbeddings {
    pub start: Var,
    pub end: Var,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    /// `[Cout×k×k×Cin]` kernel, uniform `±1/√(k²·Cin)`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((k * k * cin) as f64).sqrt();
        let w = (0..cout * k * k * cin).map(|_| rng.gen_range(-bound..bound)).collect();
        let b = (0..cout).map(|_| rng.gen_range(-bound..bound)).collect();
        Conv2d {
            weight: store.add(format!("{name}.weight"), Tensor::from_parts(vec![cout, k, k, cin], w)),
            bias: store.add(format!("{name}.bias"), Tensor::from_parts(vec![cout], b)),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct ScoreNet {
    pub config: ScoreNetConfig,
    pub heads: Mlp,
    pub pair_start: Linear,
    pub pair_end: Linear,
    pub convs: Vec<Conv2d>,
}

impl ScoreNet {
    pub fn new(store: &mut ParamStore, config: ScoreNetConfig, seed: u64) -> Result<Self> {
        let c = &config;
        if [c.model_dim, c.ffn_hidden, c.d_pair, c.c0, c.cnn_channels, c.n_types, c.span_cap].contains(&0) {
            return Err(Error::contract(format!("score network sizes must be at least 1: {c:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heads = Mlp::new(
            store,
            "score.heads",
            &[c.model_dim, c.ffn_hidden, c.ffn_hidden, 2 * c.d_pair],
            &mut rng,
        );
        // A projection of concat(s, e) is W_s·s + W_e·e; the bias lives on
        // the end half.
        let pair_start = Linear::new(store, "score.pair_start", c.d_pair, c.c0, false, &mut rng);
        let pair_end = Linear::new(store, "score.pair_end", c.d_pair, c.c0, true, &mut rng);
        let convs = vec![
            Conv2d::new(store, "score.conv0", c.c0, c.cnn_channels, 3, &mut rng),
            Conv2d::new(store, "score.conv1", c.cnn_channels, c.cnn_channels, 3, &mut rng),
            Conv2d::new(store, "score.conv2", c.cnn_channels, c.n_types, 3, &mut rng),
        ];
        Ok(ScoreNet {
            config,
            heads,
            pair_start,
            pair_end,
            convs,
        })
    }

    /// `h [T×model_dim]` → start and end embeddings.
    pub fn frame_heads(&self, g: &mut Graph<'_>, h: Var) -> Result<FrameEmbeddings> {
        let shape = g.shape(h).to_vec();
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.config.model_dim {
            return Err(Error::dim(format!(
                "frame heads expect [T×{}] with T ≥ 1, got {shape:?}",
                self.config.model_dim
            )));
        }
        let z = self.heads.forward(g, h)?;
        let d = self.config.d_pair;
        Ok(FrameEmbeddings {
            start: g.slice(z, 1, 0, d)?,
            end: g.slice(z, 1, d, d)?,
        })
    }

    /// `[T×T×c₀]` map indexed `(end j, start i)`.
    pub fn pairwise_map(&self, g: &mut Graph<'_>, emb: FrameEmbeddings) -> Result<Var> {
        let t = g.shape(emb.start)[0];
        if g.shape(emb.end)[0] != t {
            return Err(Error::dim("start and end embeddings differ in length"));
        }
        let c0 = self.config.c0;
        let s = self.pair_start.forward(g, emb.start)?;
        let s = g.reshape(s, &[1, t, c0])?;
        let e = self.pair_end.forward(g, emb.end)?;
        let e = g.reshape(e, &[t, 1, c0])?;
        g.add(e, s)
    }

    /// Raw `[T×T×N]` scores before masking.
    pub fn score_cnn(&self, g: &mut Graph<'_>, map: Var) -> Result<Var> {
        let mut x = map;
        for (k, conv) in self.convs.iter().enumerate() {
            x = conv.forward(g, x)?;
            if k + 1 < self.convs.len() {
                x = g.gelu(x)?;
            }
        }
        Ok(x)
    }

    /// Encoder features to raw `[T×T×N]` scores.
    pub fn forward(&self, g: &mut Graph<'_>, h: Var) -> Result<Var> {
        let emb = self.frame_heads(g, h)?;
        let map = self.pairwise_map(g, emb)?;
        self.score_cnn(g, map)
    }

    /// Masks raw scores into a [`ScoreTensor`].
    pub fn mask(&self, g: &Graph<'_>, raw: Var) -> Result<ScoreTensor> {
        let shape = g.shape(raw);
        ScoreTensor::from_raw(g.value(raw), shape[0], shape[2], self.config.span_cap)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.heads.layers.iter().flat_map(Linear::params).collect();
        ids.extend(self.pair_start.params());
        ids.extend(self.pair_end.params());
        ids.extend(self.convs.iter().flat_map(|c| [c.weight, c.bias]));
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::nn::zero_params;

    fn config() -> ScoreNetConfig {
        ScoreNetConfig {
            model_dim: 4,
            ffn_hidden: 5,
            d_pair: 3,
            c0: 2,
            cnn_channels: 2,
            n_types: 2,
            span_cap: 3,
        }
    }

    fn features(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(t, d, (0..t * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_heads_give_zero_embeddings() {
        let mut store = ParamStore::new();
        let net = ScoreNet::new(&mut store, config(), 1).unwrap();
        let ids: Vec<_> = net.heads.layers.iter().flat_map(Linear::params).collect();
        zero_params(&mut store, &ids);
        let mut g = Graph::with_params(&store);
        let h = g.constant(&features(5, 4, 2));
        let emb = net.frame_heads(&mut g, h).unwrap();
        assert!(g.value(emb.start).iter().chain(g.value(emb.end)).all(|v| *v == 0.0));
    }

    #[test]
    fn head_and_map_shapes() {
        let mut store = ParamStore::new();
        let net = ScoreNet::new(&mut store, config(), 1).unwrap();
        for t in [1, 40] {
            let mut g = Graph::with_params(&store);
            let h = g.constant(&features(t, 4, 3));
            let emb = net.frame_heads(&mut g, h).unwrap();
            assert_eq!(g.shape(emb.start), &[t, 3]);
            assert_eq!(g.shape(emb.end), &[t, 3]);
            let map = net.pairwise_map(&mut g, emb).unwrap();
            assert_eq!(g.shape(map), &[t, t, 2]);
        }
    }

    #[test]
    fn zero_start_embedding_makes_map_depend_on_end_only() {
        let mut store = ParamStore::new();
        let net = ScoreNet::new(&mut store, config(), 1).unwrap();
        let mut g = Graph::with_params(&store);
        let start = g.constant(&Tensor::zeros(&[4, 3]));
        let end = g.constant(&features(4, 3, 7));
        let map = net.pairwise_map(&mut g, FrameEmbeddings { start, end }).unwrap();
        let m = g.tensor(map);
        for j in 0..4 {
            for i in 0..4 {
                for c in 0..2 {
                    assert_eq!(m.at(&[j, i, c]), m.at(&[j, 0, c]));
                }
            }
        }
    }

    #[test]
    fn pairwise_map_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let net = ScoreNet::new(&mut store, config(), 1).unwrap();
        let (s, e) = (features(4, 3, 8), features(4, 3, 9));
        let perm = [2usize, 0, 3, 1];
        let permute = |x: &Tensor| {
            Tensor::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>()).unwrap()
        };
        let map_of = |s: &Tensor, e: &Tensor| {
            let mut g = Graph::with_params(&store);
            let (start, end) = (g.constant(s), g.constant(e));
            let m = net.pairwise_map(&mut g, FrameEmbeddings { start, end }).unwrap();
            g.tensor(m)
        };
        let base = map_of(&s, &e);
        let permuted = map_of(&permute(&s), &permute(&e));
        for j in 0..4 {
            for i in 0..4 {
                for c in 0..2 {
                    assert!((permuted.at(&[j, i, c]) - base.at(&[perm[j], perm[i], c])).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn zero_cnn_gives_zero_valid_region() {
        let mut store = ParamStore::new();
        let cfg = ScoreNetConfig {
            n_types: 3,
            span_cap: 40,
            ..config()
        };
        let net = ScoreNet::new(&mut store, cfg, 1).unwrap();
        let ids: Vec<_> = net.convs.iter().flat_map(|c| [c.weight, c.bias]).collect();
        zero_params(&mut store, &ids);
        let mut g = Graph::with_params(&store);
        let h = g.constant(&features(40, 4, 4));
        let raw = net.forward(&mut g, h).unwrap();
        assert_eq!(g.shape(raw), &[40, 40, 3]);
        let s = net.mask(&g, raw).unwrap();
        for j in 0..40 {
            for i in 0..40 {
                for e in 0..3 {
                    let want = if i <= j { 0.0 } else { f64::NEG_INFINITY };
                    assert_eq!(s.get(i, j, e), want);
                }
            }
        }
    }

    #[test]
    fn masking_is_total() {
        let mut store = ParamStore::new();
        let cfg = ScoreNetConfig {
            span_cap: 64,
            ..config()
        };
        let net = ScoreNet::new(&mut store, cfg, 1).unwrap();
        for t in [1, 2, 5, 17, 64] {
            let mut g = Graph::with_params(&store);
            let h = g.constant(&features(t, 4, t as u64));
            let raw = net.forward(&mut g, h).unwrap();
            let s = net.mask(&g, raw).unwrap();
            for j in 0..t {
                for i in 0..t {
                    for e in 0..2 {
                        assert_eq!(s.get(i, j, e).is_finite(), i <= j);
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let net = ScoreNet::new(&mut store, config(), 1).unwrap();
        let x = features(4, 4, 5);
        let w = features(16, 2, 6).reshape(vec![4, 4, 2]).unwrap();
        let err = grad_check(&mut store, 1e-5, |g| {
            let h = g.constant(&x);
            let raw = net.forward(g, h)?;
            let wv = g.constant(&w);
            let y = g.mul(raw, wv)?;
            g.sum(y)
        })
        .unwrap();
        assert!(err <= 1e-6, "max relative error {err}");
    }
}
