//! Weight generators: seeded random models, and a hand-wired induction
//! ("copy") model that can retrieve a span it has seen anywhere in a long
//! context.
//!
//! Copy-model residual layout (`E = embed_dim`):
//!
//! | dims            | content                                   |
//! |-----------------|-------------------------------------------|
//! | `0`             | constant bias                             |
//! | `1 .. 1+E`      | current token code                        |
//! | `1+E .. 1+2E`   | previous token code (written by layer 0)  |
//! | `1+2E .. 1+3E`  | predicted next-token code (layers 1..)    |
//!
//! Layer 0 head 0 attends to relative offset 1 through the high-frequency
//! rotary pairs. Every later layer runs two identical induction heads on the
//! low-frequency pairs (which barely rotate over `max_pos`): the query is the
//! current token code, the key is the stored previous-token code, and the
//! value is the token code at the matched slot. The unembedding reads only
//! the prediction block.

use super::{LayerWeights, Model, ModelSpec, Weights};
use crate::error::{bail, Result};
use crate::tensor::{Rng, Tensor};

/// Seeded random weights: Gaussian projections scaled by `1/sqrt(fan_in)`,
/// unit norm gains.
pub fn random_weights(spec: &ModelSpec, seed: u64) -> Result<Weights> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let (d, f, v) = (spec.d_model, spec.d_ff, spec.vocab);
    let gauss = |shape: Vec<usize>, std: f64, rng: &mut Rng| {
        let n: usize = shape.iter().product();
        Tensor::from_parts_unchecked(shape, (0..n).map(|_| rng.normal() * std).collect())
    };
    let ones = |n: usize| Tensor::from_parts_unchecked(vec![n], vec![1.0; n]);
    let embed = gauss(vec![v, d], 1.0, &mut rng);
    let proj = 1.0 / (d as f64).sqrt();
    let layers = (0..spec.n_layers)
        .map(|_| LayerWeights {
            attn_norm: ones(d),
            wq: gauss(vec![d, d], proj, &mut rng),
            wk: gauss(vec![d, d], proj, &mut rng),
            wv: gauss(vec![d, d], proj, &mut rng),
            wo: gauss(vec![d, d], proj, &mut rng),
            mlp_norm: ones(d),
            w_in: gauss(vec![d, f], proj, &mut rng),
            w_out: gauss(vec![f, d], 1.0 / (f as f64).sqrt(), &mut rng),
        })
        .collect();
    let unembed = gauss(vec![d, v], 2.0 * proj, &mut rng);
    Ok(Weights {
        embed,
        layers,
        final_norm: ones(d),
        unembed,
    })
}

/// Knobs of the hand-wired copy model.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyModelLayout {
    pub vocab: usize,
    pub n_layers: usize,
    pub embed_dim: usize,
    pub d_head: usize,
    pub max_pos: usize,
    pub rope_base: f64,
    /// Rotary pairs (from the highest frequency down) used by the
    /// previous-token head.
    pub position_pairs: usize,
    /// Logit gap per pair of the previous-token head.
    pub position_sharpness: f64,
    /// Match logit of each induction layer (length `n_layers - 1`).
    pub induction_sharpness: Vec<f64>,
    /// Unembedding gain.
    pub output_gain: f64,
    /// Scale of random MLP weights added to the last layer (0 disables).
    pub last_layer_noise: f64,
    pub seed: u64,
}

impl Default for CopyModelLayout {
    fn default() -> Self {
        Self {
            vocab: 96,
            n_layers: 3,
            embed_dim: 32,
            d_head: 64,
            max_pos: 20_000,
            rope_base: 1e12,
            position_pairs: 8,
            position_sharpness: 40.0,
            induction_sharpness: vec![30.0, 40.0],
            output_gain: 2.0,
            last_layer_noise: 0.0,
            seed: 7,
        }
    }
}

impl CopyModelLayout {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            n_layers: self.n_layers,
            n_heads: 2,
            d_model: 2 * self.d_head,
            d_head: self.d_head,
            d_ff: 8,
            vocab: self.vocab,
            max_pos: self.max_pos,
            rope_base: self.rope_base,
        }
    }
}

/// Unit-norm token codes with low mutual coherence: Gaussian start, then a
/// few rounds of pairwise repulsion.
fn token_codes(vocab: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
    };
    let mut codes: Vec<Vec<f64>> = (0..vocab)
        .map(|_| {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            normalize(&mut v);
            v
        })
        .collect();
    for _ in 0..200 {
        let snapshot = codes.clone();
        for (i, c) in codes.iter_mut().enumerate() {
            let mut push = vec![0.0; dim];
            for (j, o) in snapshot.iter().enumerate() {
                if i == j {
                    continue;
                }
                let g: f64 = c.iter().zip(o).map(|(a, b)| a * b).sum();
                let w = g * g * g;
                for (p, &x) in push.iter_mut().zip(o) {
                    *p += w * x;
                }
            }
            for (x, p) in c.iter_mut().zip(&push) {
                *x -= 0.5 * p;
            }
            normalize(c);
        }
    }
    codes
}

/// Builds the copy model. See the module docs for the circuit.
pub fn copy_model(layout: &CopyModelLayout) -> Result<Model> {
    let spec = layout.spec();
    spec.validate()?;
    let e = layout.embed_dim;
    let d = spec.d_model;
    let dh = spec.d_head;
    let pairs = dh / 2;
    if layout.n_layers < 2 {
        bail!(Parameter, "copy model needs at least 2 layers");
    }
    if layout.induction_sharpness.len() != layout.n_layers - 1 {
        bail!(Parameter, "need one induction sharpness per layer after the first");
    }
    if 1 + 3 * e > d || e > dh / 2 || layout.position_pairs + e / 2 > pairs {
        bail!(Parameter, "embed_dim {e} does not fit a d_head of {dh}");
    }
    let (c0, p0, o0) = (1, 1 + e, 1 + 2 * e);
    let content_pair0 = pairs - e / 2;

    let mut rng = Rng::new(layout.seed);
    let codes = token_codes(layout.vocab, e, &mut rng);

    let mut embed = Tensor::zeros(vec![spec.vocab, d]);
    for (t, code) in codes.iter().enumerate() {
        let row = embed.row_mut(t);
        row[0] = 1.0;
        row[c0..c0 + e].copy_from_slice(code);
    }

    // Nominal squared residual norm seen by each layer's input norm.
    let rms_scale = |sq_norm: f64| (d as f64 / sq_norm).sqrt();
    let inv_freq: Vec<f64> = (0..pairs)
        .map(|m| layout.rope_base.powf(-((2 * m) as f64) / dh as f64))
        .collect();
    let attn_scale = (dh as f64).sqrt();
    let zero = |r: usize, c: usize| Tensor::zeros(vec![r, c]);
    let ones = |n: usize| Tensor::from_parts_unchecked(vec![n], vec![1.0; n]);

    let mut layers = Vec::with_capacity(layout.n_layers);

    // Layer 0: previous-token head.
    {
        let s = rms_scale(2.0);
        let mut wq = zero(d, d);
        let mut wk = zero(d, d);
        let mut wv = zero(d, d);
        let mut wo = zero(d, d);
        let a = (layout.position_sharpness * attn_scale).sqrt();
        for m in 0..layout.position_pairs {
            let (sin, cos) = inv_freq[m].sin_cos();
            wq.row_mut(0)[2 * m] = a / s;
            wk.row_mut(0)[2 * m] = a * cos / s;
            wk.row_mut(0)[2 * m + 1] = a * sin / s;
        }
        for i in 0..e {
            wv.row_mut(c0 + i)[i] = 1.0 / s;
            wo.row_mut(i)[p0 + i] = 1.0;
        }
        layers.push(LayerWeights {
            attn_norm: ones(d),
            wq,
            wk,
            wv,
            wo,
            mlp_norm: ones(d),
            w_in: zero(d, spec.d_ff),
            w_out: zero(spec.d_ff, d),
        });
    }

    // Induction layers. Layer `l` sees bias, current, previous and `l - 1`
    // unit contributions in the prediction block.
    for l in 1..layout.n_layers {
        let pred_sq = ((l - 1) as f64).powi(2);
        let s = rms_scale(3.0 + pred_sq);
        let beta = layout.induction_sharpness[l - 1];
        let g = (beta * attn_scale).sqrt() / s;
        let mut wq = zero(d, d);
        let mut wk = zero(d, d);
        let mut wv = zero(d, d);
        let mut wo = zero(d, d);
        for hh in 0..spec.n_heads {
            let base = hh * dh + 2 * content_pair0;
            for i in 0..e {
                wq.row_mut(c0 + i)[base + i] = g;
                wk.row_mut(p0 + i)[base + i] = g;
                wv.row_mut(c0 + i)[hh * dh + i] = 1.0 / s;
                wo.row_mut(hh * dh + i)[o0 + i] = 1.0 / spec.n_heads as f64;
            }
        }
        let (w_in, w_out) = if l + 1 == layout.n_layers && layout.last_layer_noise > 0.0 {
            let n = layout.last_layer_noise;
            let w_in = Tensor::from_parts_unchecked(
                vec![d, spec.d_ff],
                (0..d * spec.d_ff).map(|_| rng.normal() / (d as f64).sqrt()).collect(),
            );
            let mut w_out = zero(spec.d_ff, d);
            for r in 0..spec.d_ff {
                for i in 0..e {
                    w_out.row_mut(r)[o0 + i] = rng.normal() * n;
                }
            }
            (w_in, w_out)
        } else {
            (zero(d, spec.d_ff), zero(spec.d_ff, d))
        };
        layers.push(LayerWeights {
            attn_norm: ones(d),
            wq,
            wk,
            wv,
            wo,
            mlp_norm: ones(d),
            w_in,
            w_out,
        });
    }

    let mut unembed = zero(d, spec.vocab);
    for (t, code) in codes.iter().enumerate() {
        for i in 0..e {
            unembed.row_mut(o0 + i)[t] = layout.output_gain * code[i];
        }
    }

    Model::new(
        spec,
        Weights {
            embed,
            layers,
            final_norm: ones(d),
            unembed,
        },
    )
}
