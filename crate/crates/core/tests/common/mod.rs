//! Independent oracles and fixtures shared by the integration tests.
//!
//! Nothing here calls into the tape or the library's numeric kernels: the
//! model oracle is a plain loop-by-loop forward pass that reads parameters by
//! name, and the graph oracles use textbook algorithms different from the
//! library's (Floyd-Warshall instead of BFS, Jacobi rotations instead of the
//! library eigensolver).
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use trafficformer::autodiff::Tensor;
use trafficformer::data::{TimeIndexMeta, TimeSlot};
use trafficformer::graph::LaplacianEmbeddingBasis;
use trafficformer::matrix::BinaryMatrix;
use trafficformer::model::{Model, ModelConfig, Preprocessed};
use trafficformer::pattern::PatternSet;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// A random tiny model with perturbed parameters plus one input window.
pub struct TinyCase {
    pub model: Model,
    pub window: Tensor,
    pub meta: TimeIndexMeta,
}

fn random_mask(n: usize, rng: &mut ChaCha8Rng) -> BinaryMatrix {
    let mut m = BinaryMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, i == j || rng.random_bool(0.5));
        }
    }
    m
}

pub fn tiny_config(rng: &mut ChaCha8Rng, seed: u64) -> ModelConfig {
    let dim = [2, 4, 6, 8][rng.random_range(0..4)];
    let divisors: Vec<usize> = (1..=dim).filter(|h| dim % h == 0 && *h <= 4).collect();
    let total = divisors[rng.random_range(0..divisors.len())];
    let geo = rng.random_range(0..=total);
    let sem = rng.random_range(0..=total - geo);
    let interval = [360, 480, 720][rng.random_range(0..3)];
    ModelConfig {
        input_steps: rng.random_range(1..=4),
        output_steps: rng.random_range(1..=4),
        nodes: rng.random_range(1..=5),
        channels: rng.random_range(1..=2),
        dim,
        skip_dim: rng.random_range(1..=4),
        layers: rng.random_range(1..=2),
        geo_heads: geo,
        sem_heads: sem,
        temporal_heads: total - geo - sem,
        hop_threshold: 1,
        semantic_neighbours: 1,
        pattern_count: rng.random_range(1..=3),
        pattern_window: rng.random_range(2..=3),
        laplacian_dim: rng.random_range(1..=2),
        interval_minutes: interval,
        seed,
        use_delay: rng.random_bool(0.8),
        dropout: 0.0,
    }
}

pub fn random_artifacts(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Preprocessed {
    let n = cfg.nodes;
    let k = cfg.laplacian_dim;
    let basis = LaplacianEmbeddingBasis::from_parts(
        n,
        (0..k).map(|i| 0.5 + i as f64).collect(),
        (0..n * k).map(|_| normal(rng) * 0.5).collect(),
    )
    .unwrap();
    let patterns = PatternSet::new(
        (0..cfg.pattern_count)
            .map(|_| (0..cfg.pattern_window).map(|_| normal(rng)).collect())
            .collect(),
    )
    .unwrap();
    Preprocessed {
        geo_mask: random_mask(n, rng),
        sem_mask: random_mask(n, rng),
        basis,
        patterns,
    }
}

pub fn random_meta(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> TimeIndexMeta {
    let spd = cfg.slots_per_day();
    let slots = (0..cfg.input_steps)
        .map(|t| TimeSlot {
            week_index: rng.random_range(1..=7),
            day_slot: rng.random_range(0..spd),
            step: t,
        })
        .collect();
    TimeIndexMeta::new(slots, spd).unwrap()
}

/// Moves every parameter away from its initializer (gains near 1, the rest
/// near 0) so no term of the forward pass is trivially zero or one.
pub fn perturb_params(model: &mut Model, rng: &mut ChaCha8Rng, scale: f64) {
    let values: Vec<Tensor> = model
        .params()
        .iter()
        .map(|(_, p)| {
            let is_gain = p.name.ends_with(".gain");
            Tensor::from_fn(p.value.shape(), |_| {
                let v = rng.random_range(-scale..scale);
                if is_gain {
                    1.0 + v
                } else {
                    v
                }
            })
        })
        .collect();
    model.params_mut().set_values(&values).unwrap();
}

pub fn tiny_case(seed: u64) -> TinyCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = tiny_config(&mut rng, seed);
    let artifacts = random_artifacts(&cfg, &mut rng);
    let meta = random_meta(&cfg, &mut rng);
    let mut model = Model::new(cfg.clone(), artifacts).unwrap();
    perturb_params(&mut model, &mut rng, 0.5);
    let window = Tensor::from_fn(&[cfg.input_steps, cfg.nodes, cfg.channels], |_| normal(&mut rng));
    TinyCase { model, window, meta }
}

// ---------------------------------------------------------------------------
// straight-line forward pass

struct P<'a>(&'a Model);

impl P<'_> {
    fn get(&self, name: &str) -> &[f64] {
        self.0
            .params()
            .value(name)
            .unwrap_or_else(|| panic!("parameter {name} missing"))
            .data()
    }
}

fn oracle_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn oracle_layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + 1e-5).sqrt();
    (0..x.len()).map(|j| gain[j] * (x[j] - mean) / denom + bias[j]).collect()
}

/// `x (rows x k) * w (k x cols)` for row-major slices.
fn mm(x: &[f64], rows: usize, k: usize, w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for i in 0..k {
                acc += x[r * k + i] * w[i * cols + c];
            }
            out[r * cols + c] = acc;
        }
    }
    out
}

/// Softmax over the allowed entries; disallowed entries get weight 0.
fn masked_softmax(scores: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = scores
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(s, _)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores
        .iter()
        .zip(allowed)
        .map(|(s, &a)| if a { (s - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn oracle_znorm(h: &[f64]) -> Vec<f64> {
    let n = h.len() as f64;
    let mean = h.iter().sum::<f64>() / n;
    let std = (h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-10 * mean.abs().max(1.0) {
        vec![0.0; h.len()]
    } else {
        h.iter().map(|v| (v - mean) / std).collect()
    }
}

/// Forward pass of the whole predictor, written out loop by loop.
/// `window` is `(T, N, C)` row-major; returns `(T', N, C)` row-major.
pub fn oracle_forward(model: &Model, window: &[f64], meta: &TimeIndexMeta) -> Vec<f64> {
    let cfg = model.config();
    let art = model.artifacts();
    let p = P(model);
    let (t_len, n_len, c_len, d) = (cfg.input_steps, cfg.nodes, cfg.channels, cfg.dim);
    let heads = cfg.geo_heads + cfg.sem_heads + cfg.temporal_heads;
    let dh = d / heads;
    let s_len = cfg.pattern_window;
    let xin = |t: usize, n: usize, c: usize| window[(t * n_len + n) * c_len + c];

    // embedding: data + spatial + weekly + daily + position
    let (dw, db) = (p.get("embed.data.weight"), p.get("embed.data.bias"));
    let (lw, lb) = (p.get("embed.laplacian.weight"), p.get("embed.laplacian.bias"));
    let (week, day) = (p.get("embed.week"), p.get("embed.day"));
    let k_lap = cfg.laplacian_dim;
    let mut x = vec![vec![vec![0.0; d]; n_len]; t_len];
    for t in 0..t_len {
        let slot = meta.slots[t];
        for n in 0..n_len {
            let lap = art.basis.node_row(n);
            for j in 0..d {
                let mut v = db[j] + lb[j];
                for c in 0..c_len {
                    v += xin(t, n, c) * dw[c * d + j];
                }
                for k in 0..k_lap {
                    v += lap[k] * lw[k * d + j];
                }
                v += week[(slot.week_index as usize - 1) * d + j];
                v += day[slot.day_slot * d + j];
                let i2 = (j / 2 * 2) as f64;
                let angle = t as f64 / 10000f64.powf(i2 / d as f64);
                v += if j % 2 == 0 { angle.sin() } else { angle.cos() };
                x[t][n][j] = v;
            }
        }
    }

    // z-normalized S-step histories, edge-padded at the window start
    let hist = |t: usize, n: usize, c: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..s_len)
            .map(|k| {
                let s = (t + k + 1).saturating_sub(s_len);
                xin(s, n, c)
            })
            .collect();
        oracle_znorm(&raw)
    };
    let patterns: Vec<&Vec<f64>> = art.patterns.centroids().iter().collect();

    let mut skip_sum = vec![vec![vec![0.0; cfg.skip_dim]; n_len]; t_len];
    for l in 0..cfg.layers {
        let name = |s: &str| format!("layer{l}.{s}");
        // delay-aware key offset, one per (t, n), head width
        let mut delay = vec![vec![vec![0.0; dh]; n_len]; t_len];
        if cfg.use_delay && cfg.geo_heads > 0 {
            let wu = p.get(&name("delay.history"));
            let wm = p.get(&name("delay.memory"));
            let wc = p.get(&name("delay.content"));
            let mem: Vec<Vec<f64>> = patterns.iter().map(|pp| mm(pp, 1, s_len, wm, dh)).collect();
            let con: Vec<Vec<f64>> = patterns.iter().map(|pp| mm(pp, 1, s_len, wc, dh)).collect();
            for t in 0..t_len {
                for n in 0..n_len {
                    for c in 0..c_len {
                        let u = mm(&hist(t, n, c), 1, s_len, wu, dh);
                        let logits: Vec<f64> = mem
                            .iter()
                            .map(|m| (0..dh).map(|j| u[j] * m[j]).sum())
                            .collect();
                        let w = masked_softmax(&logits, &vec![true; logits.len()]);
                        for (wi, ci) in w.iter().zip(&con) {
                            for j in 0..dh {
                                delay[t][n][j] += wi * ci[j];
                            }
                        }
                    }
                }
            }
        }

        let proj = |xv: &[f64], w: &[f64]| mm(xv, 1, d, w, dh);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_out: Vec<Vec<Vec<Vec<f64>>>> = Vec::new(); // [head][t][n][dh]
        let spatial = (0..cfg.geo_heads)
            .map(|i| (format!("geo{i}"), &art.geo_mask, true))
            .chain((0..cfg.sem_heads).map(|i| (format!("sem{i}"), &art.sem_mask, false)));
        for (hname, mask, is_geo) in spatial {
            let wq = p.get(&name(&format!("{hname}.query")));
            let wk = p.get(&name(&format!("{hname}.key")));
            let wv = p.get(&name(&format!("{hname}.value")));
            let mut out = vec![vec![vec![0.0; dh]; n_len]; t_len];
            for t in 0..t_len {
                let q: Vec<Vec<f64>> = (0..n_len).map(|n| proj(&x[t][n], wq)).collect();
                let k: Vec<Vec<f64>> = (0..n_len)
                    .map(|n| {
                        let mut kk = proj(&x[t][n], wk);
                        if is_geo && cfg.use_delay {
                            for j in 0..dh {
                                kk[j] += delay[t][n][j];
                            }
                        }
                        kk
                    })
                    .collect();
                let v: Vec<Vec<f64>> = (0..n_len).map(|n| proj(&x[t][n], wv)).collect();
                for i in 0..n_len {
                    let scores: Vec<f64> = (0..n_len)
                        .map(|j| (0..dh).map(|e| q[i][e] * k[j][e]).sum::<f64>() * scale)
                        .collect();
                    let allowed: Vec<bool> = (0..n_len).map(|j| mask.get(i, j)).collect();
                    let a = masked_softmax(&scores, &allowed);
                    for j in 0..n_len {
                        for e in 0..dh {
                            out[t][i][e] += a[j] * v[j][e];
                        }
                    }
                }
            }
            head_out.push(out);
        }
        for i in 0..cfg.temporal_heads {
            let wq = p.get(&name(&format!("temporal{i}.query")));
            let wk = p.get(&name(&format!("temporal{i}.key")));
            let wv = p.get(&name(&format!("temporal{i}.value")));
            let mut out = vec![vec![vec![0.0; dh]; n_len]; t_len];
            for n in 0..n_len {
                let q: Vec<Vec<f64>> = (0..t_len).map(|t| proj(&x[t][n], wq)).collect();
                let k: Vec<Vec<f64>> = (0..t_len).map(|t| proj(&x[t][n], wk)).collect();
                let v: Vec<Vec<f64>> = (0..t_len).map(|t| proj(&x[t][n], wv)).collect();
                for t in 0..t_len {
                    let scores: Vec<f64> = (0..t_len)
                        .map(|s| (0..dh).map(|e| q[t][e] * k[s][e]).sum::<f64>() * scale)
                        .collect();
                    let a = masked_softmax(&scores, &vec![true; t_len]);
                    for s in 0..t_len {
                        for e in 0..dh {
                            out[t][n][e] += a[s] * v[s][e];
                        }
                    }
                }
            }
            head_out.push(out);
        }

        let wo = p.get(&name("attn_out"));
        let (g1, b1) = (p.get(&name("norm1.gain")), p.get(&name("norm1.bias")));
        let (w1, bb1) = (p.get(&name("ffn.in.weight")), p.get(&name("ffn.in.bias")));
        let (w2, bb2) = (p.get(&name("ffn.out.weight")), p.get(&name("ffn.out.bias")));
        let (g2, b2) = (p.get(&name("norm2.gain")), p.get(&name("norm2.bias")));
        let (sw, sb) = (p.get(&format!("skip{l}.weight")), p.get(&format!("skip{l}.bias")));
        let hidden = 4 * d;
        for t in 0..t_len {
            for n in 0..n_len {
                let cat: Vec<f64> = head_out.iter().flat_map(|h| h[t][n].iter().copied()).collect();
                let attn = mm(&cat, 1, d, wo, d);
                let res: Vec<f64> = (0..d).map(|j| x[t][n][j] + attn[j]).collect();
                let y = oracle_layer_norm(&res, g1, b1);
                let mut h = mm(&y, 1, d, w1, hidden);
                for (j, v) in h.iter_mut().enumerate() {
                    *v = oracle_gelu(*v + bb1[j]);
                }
                let f = mm(&h, 1, hidden, w2, d);
                let res2: Vec<f64> = (0..d).map(|j| y[j] + f[j] + bb2[j]).collect();
                x[t][n] = oracle_layer_norm(&res2, g2, b2);
                let sk = mm(&x[t][n], 1, d, sw, cfg.skip_dim);
                for j in 0..cfg.skip_dim {
                    skip_sum[t][n][j] += sk[j] + sb[j];
                }
            }
        }
    }

    // output head: mix along time, GELU, then map features to channels
    let (tw, tb) = (p.get("head.time.weight"), p.get("head.time.bias"));
    let (fw, fb) = (p.get("head.feature.weight"), p.get("head.feature.bias"));
    let t_out = cfg.output_steps;
    let mut y = vec![0.0; t_out * n_len * c_len];
    for to in 0..t_out {
        for n in 0..n_len {
            let g: Vec<f64> = (0..cfg.skip_dim)
                .map(|k| {
                    let mut acc = tb[to];
                    for t in 0..t_len {
                        acc += tw[to * t_len + t] * skip_sum[t][n][k];
                    }
                    oracle_gelu(acc)
                })
                .collect();
            for c in 0..c_len {
                let mut acc = fb[c];
                for k in 0..cfg.skip_dim {
                    acc += g[k] * fw[k * c_len + c];
                }
                y[(to * n_len + n) * c_len + c] = acc;
            }
        }
    }
    y
}

// ---------------------------------------------------------------------------
// graph oracles

/// All-pairs hop counts by Floyd-Warshall over the directed adjacency.
pub fn floyd_warshall(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<Option<u32>>> {
    let mut d = vec![vec![None; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = Some(0);
    }
    for &(a, b) in edges {
        if a != b {
            d[a][b] = Some(1);
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if let (Some(a), Some(b)) = (d[i][k], d[k][j]) {
                    if d[i][j].map_or(true, |c| a + b < c) {
                        d[i][j] = Some(a + b);
                    }
                }
            }
        }
    }
    d
}

/// Eigenvalues and column eigenvectors of a symmetric matrix by cyclic
/// Jacobi rotations; eigenvalues ascending.
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j].powi(2))
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| m[a * n + a].partial_cmp(&m[b * n + b]).unwrap());
    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k * n + i]).collect())
        .collect();
    (values, vectors)
}

/// Normalized Laplacian of the symmetrized adjacency, built from scratch.
pub fn oracle_laplacian(n: usize, edges: &[(usize, usize)]) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for &(i, j) in edges {
        if i != j {
            a[i * n + j] = 1.0;
            a[j * n + i] = 1.0;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j]).sum()).collect();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            // an isolated node's D^{-1/2} entry counts as 0, leaving its 1 on the diagonal
            let ident = if i == j { 1.0 } else { 0.0 };
            let norm = if deg[i] > 0.0 && deg[j] > 0.0 {
                a[i * n + j] / (deg[i] * deg[j]).sqrt()
            } else {
                0.0
            };
            l[i * n + j] = ident - norm;
        }
    }
    l
}

/// Directed edges of an 8-neighbour grid, counted by brute force.
pub fn brute_force_grid_edges(rows: usize, cols: usize) -> usize {
    let mut count = 0;
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if (dr, dc) != (0, 0) && (0..rows as i64).contains(&nr) && (0..cols as i64).contains(&nc) {
                        count += 1;
                    }
                }
            }
        }
    }
    count
}

// ---------------------------------------------------------------------------
// finite differences

use trafficformer::autodiff::{Gradients, ParamStore, Tape, Var};

/// Entry-wise comparison of tape gradients against central differences of
/// the scalar built by `f`. Returns the worst relative error per parameter
/// name. The denominator is floored at `floor * max(|loss|, 1)`: round-off in
/// a central difference grows with the loss value, so entries smaller than
/// that are compared at the resolution the difference quotient can resolve.
pub fn finite_difference_check<F>(store: &mut ParamStore, h: f64, floor: f64, f: F) -> Vec<(String, f64)>
where
    F: Fn(&mut Tape<'_>) -> Var,
{
    let (analytic, loss_value): (Gradients, f64) = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape);
        (tape.backward(loss).unwrap(), tape.value(loss).item())
    };
    let floor = floor * loss_value.abs().max(1.0);
    let eval = |store: &ParamStore| {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape);
        tape.value(loss).item()
    };
    let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
    let mut report = Vec::new();
    for (id, name, len) in ids {
        let mut worst = 0.0f64;
        for k in 0..len {
            let orig = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = orig + h;
            let up = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig - h;
            let down = eval(store);
            store.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
        report.push((name, worst));
    }
    report
}

pub fn uniform_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// A tiny case with every head family, the delay transform and two layers
/// active, for gradient checks that must reach every parameter class.
pub fn full_coverage_case(seed: u64) -> TinyCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut cfg = tiny_config(&mut rng, seed);
    let (dim, geo, sem, temporal) = [(6, 1, 1, 1), (8, 2, 1, 1), (8, 1, 1, 2), (4, 1, 1, 2)][seed as usize % 4];
    cfg.dim = dim;
    cfg.geo_heads = geo;
    cfg.sem_heads = sem;
    cfg.temporal_heads = temporal;
    cfg.use_delay = true;
    cfg.layers = 2;
    cfg.nodes = cfg.nodes.max(2);
    cfg.input_steps = cfg.input_steps.max(3);
    let artifacts = random_artifacts(&cfg, &mut rng);
    let meta = random_meta(&cfg, &mut rng);
    let mut model = Model::new(cfg.clone(), artifacts).unwrap();
    perturb_params(&mut model, &mut rng, 0.5);
    let window = Tensor::from_fn(&[cfg.input_steps, cfg.nodes, cfg.channels], |_| normal(&mut rng));
    TinyCase { model, window, meta }
}

/// Parameter class of a parameter name, as grouped in the gradient suite.
pub fn parameter_class(name: &str) -> &'static str {
    let classes = [
        ("embed.data", "data projection"),
        ("embed.laplacian", "laplacian projection"),
        ("embed.week", "week table"),
        ("embed.day", "day table"),
        (".query", "query"),
        (".key", "key"),
        (".value", "value"),
        (".delay.history", "delay history map"),
        (".delay.memory", "delay memory map"),
        (".delay.content", "delay content map"),
        (".attn_out", "attention output"),
        (".ffn.", "feed-forward"),
        (".norm", "layer norm"),
        ("skip", "skip projection"),
        ("head.time", "time convolution"),
        ("head.feature", "feature convolution"),
    ];
    classes
        .iter()
        .find(|(pat, _)| name.contains(pat))
        .map(|(_, c)| *c)
        .unwrap_or_else(|| panic!("unclassified parameter {name}"))
}

/// Relative floor for gradient comparisons, scaled by the loss value; see
/// [`finite_difference_check`].
pub const GRADIENT_FLOOR: f64 = 1e-5;

/// Worst relative gradient error per parameter for a Huber loss of the
/// model output against a random target.
pub fn model_gradient_report(case: &TinyCase, seed: u64, h: f64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A9);
    let cfg = case.model.config();
    let target = Tensor::from_fn(&[cfg.output_steps, cfg.nodes, cfg.channels], |_| normal(&mut rng) * 2.0);
    let mut store = case.model.params().clone();
    finite_difference_check(&mut store, h, GRADIENT_FLOOR, |tape| {
        let y = case.model.forward(tape, &case.window, None, &case.meta, None, None).unwrap();
        let t = tape.constant(target.clone());
        let d = tape.sub(y, t).unwrap();
        let l = tape.huber(d, 1.0);
        tape.sum(l)
    })
}

// ---------------------------------------------------------------------------
// small end-to-end setups

use trafficformer::data::{generate_synthetic, make_samples, split, Sample, Scaler, SplitRatios, SyntheticSpec};
use trafficformer::pipeline::{preprocess, training_range, PreprocessConfig};

pub struct Prepared {
    pub model: Model,
    pub scaler: Scaler,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Synthetic ring, preprocessing on its training split and a small model.
pub fn ring_setup(spec: &SyntheticSpec, steps: (usize, usize), dim: usize, seed: u64) -> Prepared {
    let (flow, net) = generate_synthetic(spec).unwrap();
    let (t_in, t_out) = steps;
    let range = training_range(flow.steps(), t_in, t_out, SplitRatios::GRAPH).unwrap();
    let pcfg = PreprocessConfig {
        hop_threshold: 2,
        semantic_neighbours: 2.min(spec.nodes - 1),
        pattern_count: 4,
        pattern_window: 3,
        laplacian_dim: 2,
        seed,
    };
    let pre = preprocess(&flow, &net, &pcfg, range).unwrap();
    let cfg = ModelConfig {
        input_steps: t_in,
        output_steps: t_out,
        nodes: spec.nodes,
        channels: 1,
        dim,
        skip_dim: 2 * dim,
        layers: 1,
        geo_heads: 1,
        sem_heads: 1,
        temporal_heads: 2,
        hop_threshold: pcfg.hop_threshold,
        semantic_neighbours: pcfg.semantic_neighbours,
        pattern_count: pcfg.pattern_count,
        pattern_window: pcfg.pattern_window,
        laplacian_dim: pcfg.laplacian_dim,
        interval_minutes: spec.interval_minutes,
        seed,
        use_delay: true,
        dropout: 0.0,
    };
    let model = Model::new(cfg, pre.artifacts).unwrap();
    let (train, val, test) = split(make_samples(&flow, t_in, t_out).unwrap(), SplitRatios::GRAPH).unwrap();
    Prepared {
        model,
        scaler: pre.scaler,
        train,
        val,
        test,
    }
}

pub fn small_ring(seed: u64) -> Prepared {
    let spec = SyntheticSpec {
        nodes: 4,
        days: 1,
        interval_minutes: 30,
        delay_steps: 1,
        noise_sigma: 1.0,
        seed,
    };
    ring_setup(&spec, (4, 2), 8, seed)
}
