//! Straight-line reference implementations used as test oracles.
//!
//! Everything here works on plain nested vectors with explicit loops and
//! shares no code with the library beyond reading parameter tensors.

#![allow(dead_code)]

use imvalign_core::model::{Model, POSITION_GAIN};
use imvalign_core::params::ParamSet;
use imvalign_core::tape::{Tape, Var};
use imvalign_core::{Result, Tensor};
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rand_mat(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    let cols = m.first().map_or(0, Vec::len);
    Tensor::new(&[m.len(), cols], m.iter().flatten().copied().collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

// ------------------------------------------------------------ generator

pub struct GeneratorOracle {
    pub alpha: Mat,
    pub imv: Vec<f64>,
    pub increments: Vec<f64>,
    pub delta: Vec<f64>,
    pub positions_raw: Vec<f64>,
    pub positions: Vec<f64>,
    pub distances: Mat,
    pub alpha_hat: Mat,
    pub semantic: Mat,
}

/// Attention, IMV, gated increments, accumulation, rescaling, Gaussian
/// reconstruction and the semantic product. `None` for degenerate spans.
pub fn generator(es: &Mat, et: &Mat, sigma: f64) -> Option<GeneratorOracle> {
    let t = es.len();
    let l = et.len();
    let d = es[0].len();
    let mut alpha = vec![vec![0.0; l]; t];
    for i in 0..t {
        let mut logits = vec![0.0; l];
        for j in 0..l {
            let mut dot = 0.0;
            for k in 0..d {
                dot += es[i][k] * et[j][k];
            }
            logits[j] = dot / (d as f64).sqrt();
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..l {
            alpha[i][j] = (logits[j] - m).exp();
            z += alpha[i][j];
        }
        for j in 0..l {
            alpha[i][j] /= z;
        }
    }
    let mut imv = vec![0.0; t];
    for i in 0..t {
        for j in 0..l {
            imv[i] += alpha[i][j] * j as f64;
        }
    }
    let mut increments = Vec::new();
    let mut delta = vec![0.0];
    for i in 1..t {
        let inc = imv[i] - imv[i - 1];
        increments.push(inc);
        delta.push(if inc > 0.0 { inc } else { 0.0 });
    }
    let (positions_raw, positions, distances, alpha_hat) = reconstruct(&delta, l, sigma)?;
    let mut semantic = vec![vec![0.0; d]; l];
    for j in 0..l {
        for i in 0..t {
            for k in 0..d {
                semantic[j][k] += alpha_hat[i][j] * es[i][k];
            }
        }
    }
    Some(GeneratorOracle {
        alpha,
        imv,
        increments,
        delta,
        positions_raw,
        positions,
        distances,
        alpha_hat,
        semantic,
    })
}

/// `(p', p_hat, d, alpha_hat)` for an alignment `delta` and `l` tokens.
pub fn reconstruct(delta: &[f64], l: usize, sigma: f64) -> Option<(Vec<f64>, Vec<f64>, Mat, Mat)> {
    let t = delta.len();
    let mut raw = vec![0.0; t];
    let mut acc = 0.0;
    for i in 0..t {
        acc += delta[i];
        raw[i] = acc;
    }
    let span = raw[t - 1] - raw[0];
    if t < 2 || span <= 1e-6 {
        return None;
    }
    let p_hat: Vec<f64> = raw.iter().map(|p| (p - raw[0]) / span * (l - 1) as f64).collect();
    let mut dist = vec![vec![0.0; l]; t];
    for i in 0..t {
        for j in 0..l {
            dist[i][j] = (p_hat[i] - j as f64) * (p_hat[i] - j as f64);
        }
    }
    let mut ah = vec![vec![0.0; l]; t];
    for j in 0..l {
        let logit = |i: usize| -dist[i][j] / (sigma * sigma);
        let m = (0..t).map(logit).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..t).map(|i| (logit(i) - m).exp()).sum();
        for i in 0..t {
            ah[i][j] = (logit(i) - m).exp() / z;
        }
    }
    Some((raw, p_hat, dist, ah))
}

// ---------------------------------------------------------------- layers

fn param(ps: &ParamSet<f64>, name: &str) -> Tensor<f64> {
    ps.peek(name)
        .unwrap_or_else(|| panic!("missing parameter {name}"))
        .tensor
        .clone()
}

pub fn linear(x: &Mat, w: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
    let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..n_out)
                .map(|o| b.data()[o] + (0..n_in).map(|k| row[k] * w.at(k, o)).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, g: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(k, v)| (v - mean) * inv * g.data()[k] + b.data()[k])
                .collect()
        })
        .collect()
}

pub fn relu(x: &Mat) -> Mat {
    x.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Zero-padded "same" convolution, kernel `[k, cin, cout]`.
pub fn conv1d_same(x: &Mat, w: &Tensor<f64>, b: &Tensor<f64>) -> Mat {
    let (k, cin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let t = x.len() as isize;
    let pad = (k / 2) as isize;
    (0..t)
        .map(|i| {
            (0..cout)
                .map(|o| {
                    let mut acc = b.data()[o];
                    for q in 0..k {
                        let src = i + q as isize - pad;
                        if src < 0 || src >= t {
                            continue;
                        }
                        for c in 0..cin {
                            acc += x[src as usize][c] * w.data()[(q * cin + c) * cout + o];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn sinusoid(u: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let pair = (i / 2) as f64 * 2.0;
            let angle = u / 10000f64.powf(pair / dim as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn relative(len: usize, dim: usize, span: f64) -> Mat {
    (0..len)
        .map(|i| {
            let u = if len > 1 { span * i as f64 / (len - 1) as f64 } else { 0.0 };
            sinusoid(u, dim).into_iter().map(|v| v * POSITION_GAIN).collect()
        })
        .collect()
}

fn absolute(len: usize, dim: usize) -> Mat {
    (0..len).map(|i| sinusoid(i as f64, dim)).collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

pub fn encoder_block(ps: &ParamSet<f64>, prefix: &str, x: &Mat, heads: usize) -> Mat {
    let p = |n: &str| param(ps, &format!("{prefix}.{n}"));
    let n1 = layer_norm(x, &p("ln1.gain"), &p("ln1.bias"));
    let dim = x[0].len();
    let hd = dim / heads;
    let zero = Tensor::zeros(&[dim]);
    let q = linear(&n1, &p("attn.wq"), &zero);
    let k = linear(&n1, &p("attn.wk"), &zero);
    let v = linear(&n1, &p("attn.wv"), &zero);
    let n = x.len();
    let mut joined = vec![vec![0.0; dim]; n];
    for h in 0..heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..hd).map(|c| q[i][h * hd + c] * k[j][h * hd + c]).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let w = softmax(&scores);
            for c in 0..hd {
                joined[i][h * hd + c] = (0..n).map(|j| w[j] * v[j][h * hd + c]).sum();
            }
        }
    }
    let attn = linear(&joined, &p("attn.out.w"), &p("attn.out.b"));
    let h1 = add(x, &attn);
    let n2 = layer_norm(&h1, &p("ln2.gain"), &p("ln2.bias"));
    let up = relu(&linear(&n2, &p("ffn.up.w"), &p("ffn.up.b")));
    let down = linear(&up, &p("ffn.down.w"), &p("ffn.down.b"));
    add(&h1, &down)
}

pub fn encode_acoustic(model: &Model<f64>, x: &Mat) -> Mat {
    let c = &model.config;
    let ps = &model.params;
    let h = linear(x, &param(ps, "enc.in.w"), &param(ps, "enc.in.b"));
    let mut h = add(&h, &relative(x.len(), c.dim, c.position_span));
    for i in 0..c.encoder_layers {
        h = encoder_block(ps, &format!("enc.{i}"), &h, c.heads);
    }
    h
}

pub fn encode_text(model: &Model<f64>, tokens: &[usize]) -> Mat {
    let c = &model.config;
    let ps = &model.params;
    let emb = param(ps, "text.emb");
    let rows: Mat = tokens.iter().map(|&t| emb.row(t).to_vec()).collect();
    let mut h = add(&rows, &relative(tokens.len(), c.dim, c.position_span));
    for i in 0..c.text_encoder_layers {
        h = encoder_block(ps, &format!("text.{i}"), &h, c.heads);
    }
    h
}

pub fn decode(model: &Model<f64>, semantic: &Mat) -> Mat {
    let c = &model.config;
    let ps = &model.params;
    let mut h = add(semantic, &absolute(semantic.len(), c.dim));
    for i in 0..c.decoder_layers {
        h = encoder_block(ps, &format!("dec.{i}"), &h, c.heads);
    }
    let h = layer_norm(&h, &param(ps, "dec.ln.gain"), &param(ps, "dec.ln.bias"));
    linear(&h, &param(ps, "dec.out.w"), &param(ps, "dec.out.b"))
}

/// Two conv / layer-norm / relu blocks and a relu head.
pub fn predictor(ps: &ParamSet<f64>, prefix: &str, layers: usize, es: &Mat) -> Vec<f64> {
    let p = |n: &str| param(ps, &format!("{prefix}.{n}"));
    let mut h = es.clone();
    for l in 0..layers {
        h = conv1d_same(&h, &p(&format!("conv{l}.w")), &p(&format!("conv{l}.b")));
        h = layer_norm(&h, &p(&format!("ln{l}.gain")), &p(&format!("ln{l}.bias")));
        h = relu(&h);
    }
    linear(&h, &p("head.w"), &p("head.b"))
        .into_iter()
        .map(|r| r[0].max(0.0))
        .collect()
}

pub struct InferOracle {
    pub delta: Vec<f64>,
    pub length: usize,
    pub tokens: Vec<usize>,
    pub logits: Mat,
}

/// Baseline single-step inference. `None` when the predicted alignment
/// is degenerate.
pub fn infer(model: &Model<f64>, x: &Mat) -> Option<InferOracle> {
    let es = encode_acoustic(model, x);
    let delta = predictor(&model.params, "pred", model.config.predictor.layers, &es);
    let total: f64 = delta.iter().sum();
    let length = if total > 0.0 { total.round() as usize + 1 } else { 1 };
    let sigma = model.sigma();
    let (_, _, _, ah) = reconstruct(&delta, length, sigma)?;
    let d = es[0].len();
    let mut semantic = vec![vec![0.0; d]; length];
    for j in 0..length {
        for i in 0..es.len() {
            for k in 0..d {
                semantic[j][k] += ah[i][j] * es[i][k];
            }
        }
    }
    let logits = decode(model, &semantic);
    let tokens = logits
        .iter()
        .map(|r| (0..r.len()).fold(0, |best, v| if r[v] > r[best] { v } else { best }))
        .collect();
    Some(InferOracle {
        delta,
        length,
        tokens,
        logits,
    })
}

// ------------------------------------------------- gradient-check cases

/// A scalar composition under test plus an input generator.
pub struct GradCase {
    pub name: &'static str,
    /// Exactly linear in every input, so any step size is exact up to
    /// rounding.
    pub linear: bool,
    pub inputs: fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor<f64>>,
    pub f: fn(&Tape<f64>, &[Var]) -> Result<Var>,
}

/// `sum(out * w)` with `w` fixed per shape, making any output a scalar.
pub fn project(tape: &Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out);
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = tape.constant(Tensor::new(&shape, w)?);
    Ok(tape.sum(tape.mul(out, w)?))
}

fn away_from_zero(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

fn mat_pair(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (m, n) = (rng.random_range(1..5), rng.random_range(1..5));
    vec![rand_tensor(rng, &[m, n], 1.0), rand_tensor(rng, &[m, n], 1.0)]
}

fn one_mat(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (m, n) = (rng.random_range(2..5), rng.random_range(2..5));
    vec![rand_tensor(rng, &[m, n], 1.0)]
}

fn one_vec(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Tensor<f64>> {
    let n = rng.random_range(2..8);
    vec![rand_tensor(rng, &[n], 1.0)]
}

pub fn grad_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "matmul",
            linear: false,
            inputs: |rng| {
                let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
                vec![rand_tensor(rng, &[m, k], 1.0), rand_tensor(rng, &[k, n], 1.0)]
            },
            f: |t, v| project(t, t.matmul(v[0], v[1])?),
        },
        GradCase {
            name: "matmul (one side)",
            linear: true,
            inputs: |rng| {
                let (m, k) = (rng.random_range(1..5), rng.random_range(1..5));
                vec![rand_tensor(rng, &[m, k], 1.0)]
            },
            f: |t, v| {
                let k = t.shape(v[0])[1];
                let b = t.constant(Tensor::new(&[k, 3], (0..k * 3).map(|i| i as f64 * 0.3 - 1.0).collect())?);
                project(t, t.matmul(v[0], b)?)
            },
        },
        GradCase {
            name: "matmul_tn",
            linear: false,
            inputs: |rng| {
                let (m, k, n) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
                vec![rand_tensor(rng, &[m, k], 1.0), rand_tensor(rng, &[m, n], 1.0)]
            },
            f: |t, v| project(t, t.matmul_tn(v[0], v[1])?),
        },
        GradCase {
            name: "squared_distances",
            linear: false,
            inputs: |rng| {
                let n = rng.random_range(1..7);
                vec![rand_tensor(rng, &[n], 3.0)]
            },
            f: |t, v| project(t, t.squared_distances(v[0], 4)?),
        },
        GradCase {
            name: "gaussian_column_softmax",
            linear: false,
            inputs: |rng| {
                let (m, n) = (rng.random_range(1..6), rng.random_range(1..5));
                let d = rand_tensor(rng, &[m, n], 2.0).map(|v| v * v);
                let s = away_from_zero(rand_tensor(rng, &[1], 1.5));
                vec![d, s]
            },
            f: |t, v| project(t, t.gaussian_column_softmax(v[0], v[1], 1e-4)?),
        },
        GradCase {
            name: "transpose",
            linear: true,
            inputs: one_mat,
            f: |t, v| project(t, t.transpose(v[0])?),
        },
        GradCase {
            name: "reshape",
            linear: true,
            inputs: one_mat,
            f: |t, v| {
                let n = t.value(v[0]).len();
                project(t, t.reshape(v[0], &[n])?)
            },
        },
        GradCase {
            name: "add",
            linear: true,
            inputs: mat_pair,
            f: |t, v| project(t, t.add(v[0], v[1])?),
        },
        GradCase {
            name: "sub",
            linear: true,
            inputs: mat_pair,
            f: |t, v| project(t, t.sub(v[0], v[1])?),
        },
        GradCase {
            name: "mul",
            linear: false,
            inputs: mat_pair,
            f: |t, v| project(t, t.mul(v[0], v[1])?),
        },
        GradCase {
            name: "div",
            linear: false,
            inputs: |rng| {
                let mut v = mat_pair(rng);
                v[1] = v[1].map(|x| x.signum() * (x.abs() + 0.5));
                v
            },
            f: |t, v| project(t, t.div(v[0], v[1])?),
        },
        GradCase {
            name: "relu",
            linear: false,
            inputs: |rng| one_mat(rng).into_iter().map(away_from_zero).collect(),
            f: |t, v| project(t, t.relu(v[0])),
        },
        GradCase {
            name: "square",
            linear: false,
            inputs: one_mat,
            f: |t, v| project(t, t.square(v[0])),
        },
        GradCase {
            name: "abs",
            linear: false,
            inputs: |rng| one_mat(rng).into_iter().map(away_from_zero).collect(),
            f: |t, v| project(t, t.abs(v[0])),
        },
        GradCase {
            name: "recip",
            linear: false,
            inputs: |rng| one_mat(rng).into_iter().map(|x| x.map(|v| v.signum() * (v.abs() + 0.5))).collect(),
            f: |t, v| project(t, t.recip(v[0])),
        },
        GradCase {
            name: "scale",
            linear: true,
            inputs: one_mat,
            f: |t, v| project(t, t.scale(v[0], -2.5)),
        },
        GradCase {
            name: "add_const",
            linear: true,
            inputs: one_mat,
            f: |t, v| project(t, t.add_const(v[0], 0.7)),
        },
        GradCase {
            name: "add_bias",
            linear: true,
            inputs: |rng| {
                let (m, n) = (rng.random_range(1..5), rng.random_range(1..5));
                vec![rand_tensor(rng, &[m, n], 1.0), rand_tensor(rng, &[n], 1.0)]
            },
            f: |t, v| project(t, t.add_bias(v[0], v[1])?),
        },
        GradCase {
            name: "expand",
            linear: true,
            inputs: |rng| vec![rand_tensor(rng, &[1], 1.0)],
            f: |t, v| project(t, t.expand(v[0], &[3, 2])?),
        },
        GradCase {
            name: "broadcast_cols",
            linear: true,
            inputs: one_vec,
            f: |t, v| project(t, t.broadcast_cols(v[0], 3)?),
        },
        GradCase {
            name: "sum",
            linear: true,
            inputs: one_mat,
            f: |t, v| Ok(t.scale(t.sum(v[0]), 1.5)),
        },
        GradCase {
            name: "mean",
            linear: true,
            inputs: one_mat,
            f: |t, v| Ok(t.mean(v[0])),
        },
        GradCase {
            name: "row_softmax",
            linear: false,
            inputs: one_mat,
            f: |t, v| project(t, t.row_softmax(v[0])),
        },
        GradCase {
            name: "cumsum_last",
            linear: true,
            inputs: one_vec,
            f: |t, v| project(t, t.cumsum_last(v[0])),
        },
        GradCase {
            name: "slice",
            linear: true,
            inputs: one_vec,
            f: |t, v| project(t, t.slice(v[0], 1, 1)?),
        },
        GradCase {
            name: "concat",
            linear: true,
            inputs: |rng| {
                let n = rng.random_range(1..4);
                vec![rand_tensor(rng, &[2, n], 1.0), rand_tensor(rng, &[3, n], 1.0)]
            },
            f: |t, v| project(t, t.concat(&[v[0], v[1]])?),
        },
        GradCase {
            name: "slice_cols",
            linear: true,
            inputs: one_mat,
            f: |t, v| project(t, t.slice_cols(v[0], 1, 1)?),
        },
        GradCase {
            name: "concat_cols",
            linear: true,
            inputs: |rng| {
                let m = rng.random_range(1..4);
                vec![rand_tensor(rng, &[m, 2], 1.0), rand_tensor(rng, &[m, 3], 1.0)]
            },
            f: |t, v| project(t, t.concat_cols(&[v[0], v[1]])?),
        },
        GradCase {
            name: "gather_rows",
            linear: true,
            inputs: |rng| vec![rand_tensor(rng, &[4, 3], 1.0)],
            f: |t, v| project(t, t.gather_rows(v[0], &[2, 0, 2, 3])?),
        },
        GradCase {
            name: "layer_norm",
            linear: false,
            inputs: |rng| {
                let (m, n) = (rng.random_range(1..4), rng.random_range(2..6));
                vec![
                    rand_tensor(rng, &[m, n], 1.0),
                    rand_tensor(rng, &[n], 1.0),
                    rand_tensor(rng, &[n], 1.0),
                ]
            },
            f: |t, v| project(t, t.layer_norm(v[0], v[1], v[2])?),
        },
        GradCase {
            name: "conv1d_same",
            linear: false,
            inputs: |rng| {
                let (tt, cin, cout) = (rng.random_range(1..6), rng.random_range(1..4), rng.random_range(1..4));
                let k = [1, 3, 5][rng.random_range(0..3)];
                vec![
                    rand_tensor(rng, &[tt, cin], 1.0),
                    rand_tensor(rng, &[k, cin, cout], 1.0),
                    rand_tensor(rng, &[cout], 1.0),
                ]
            },
            f: |t, v| project(t, t.conv1d_same(v[0], v[1], v[2])?),
        },
        GradCase {
            name: "cross_entropy",
            linear: false,
            inputs: |rng| vec![rand_tensor(rng, &[3, 5], 2.0)],
            f: |t, v| t.cross_entropy(v[0], &[4, 0, 2], 0.1),
        },
        GradCase {
            name: "mse",
            linear: false,
            inputs: |rng| {
                let n = rng.random_range(1..8);
                vec![rand_tensor(rng, &[n], 1.0), rand_tensor(rng, &[n], 1.0)]
            },
            f: |t, v| t.mse(v[0], v[1]),
        },
    ]
}

/// Random generator inputs whose increments stay clear of the relu kink,
/// so central differences are valid.
pub fn generator_case(rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Tensor<f64>> {
    loop {
        let (t, l, d) = (rng.random_range(3..8), rng.random_range(2..5), rng.random_range(2..5));
        let es = rand_tensor(rng, &[t, d], 1.5);
        let et = rand_tensor(rng, &[l, d], 1.5);
        let sigma = Tensor::scalar(rng.random_range(0.3..1.5));
        let Some(o) = generator(&to_mat(&es), &to_mat(&et), 1.0) else {
            continue;
        };
        let span = o.positions_raw[t - 1];
        if o.increments.iter().all(|v| v.abs() > 1e-3) && span > 0.05 {
            return vec![es, et, sigma];
        }
    }
}

pub fn generator_graph(t: &Tape<f64>, v: &[Var]) -> Result<Var> {
    let out = imvalign_core::alignment::generator_forward(t, v[0], v[1], v[2])?;
    let a = project(t, out.semantic)?;
    let b = project(t, out.reconstruction.alpha_hat)?;
    Ok(t.add(a, b)?)
}

// ------------------------------------------------------------ invariants

/// Checks the structural invariants of the generator and reconstruction on
/// one instance. `Ok(false)` marks a degenerate instance that was skipped.
pub fn check_invariants(es: &Tensor<f64>, et: &Tensor<f64>, sigma: f64) -> std::result::Result<bool, String> {
    use imvalign_core::alignment::{generator_forward_values, raw_sigma, reconstruct_from_delta};
    use imvalign_core::Error;
    let (t, l, d) = (es.rows(), et.rows(), es.cols());
    let (a, r, sem) = match generator_forward_values(es, et, raw_sigma(sigma)) {
        Ok(v) => v,
        Err(Error::DegenerateAlignment { .. }) => return Ok(false),
        Err(e) => return Err(e.to_string()),
    };
    let fail = |what: &str| Err(format!("{what} (T={t}, L={l}, d={d})"));
    let delta = a.delta.data();
    if delta[0] != 0.0 || delta.iter().any(|&v| v < 0.0) {
        return fail("negative or nonzero-leading alignment");
    }
    for i in 0..t {
        if (a.alpha.row(i).iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return fail("attention row does not sum to one");
        }
    }
    for j in 0..l {
        let s: f64 = (0..t).map(|i| r.alpha_hat.at(i, j)).sum();
        if (s - 1.0).abs() > 1e-6 {
            return fail("reconstructed column does not sum to one");
        }
    }
    let p = r.positions.data();
    if p.windows(2).any(|w| w[1] < w[0] - 1e-12) {
        return fail("scaled positions decrease");
    }
    if p[0].abs() > 1e-6 || (p[t - 1] - (l - 1) as f64).abs() > 1e-6 {
        return fail("scaled positions miss their endpoints");
    }
    let raw = r.positions_raw.data();
    for i in 1..t {
        if (raw[i] - raw[i - 1] - delta[i]).abs() > 1e-9 {
            return fail("differences of accumulated positions differ from the alignment");
        }
    }
    if sem.shape() != [l, d] {
        return fail("semantic encodings have the wrong shape");
    }
    let tape = imvalign_core::tape::Tape::new();
    let tripled = tape.constant(a.delta.map(|v| 3.0 * v));
    let s = tape.constant(Tensor::scalar(raw_sigma(sigma)));
    let rt = reconstruct_from_delta(&tape, tripled, l, s).map_err(|e| e.to_string())?;
    if tape.value(rt.alpha_hat).max_abs_diff(&r.alpha_hat) > 1e-9 {
        return fail("reconstruction is not scale invariant");
    }
    Ok(true)
}

/// Plain Levenshtein distance.
pub fn levenshtein<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}
