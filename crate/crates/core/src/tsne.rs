//! Exact O(n²) t-SNE with balanced subsampling and scatter export.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::Xoshiro256;
use crate::Scalar;

/// Affinity floor applied to the symmetrized input and to output similarities.
pub const AFFINITY_FLOOR: f64 = 1e-12;
/// Entropy tolerance of the bandwidth search, in bits.
pub const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTIONS: usize = 50;
const MAX_BRACKET_STEPS: usize = 40;
const MIN_GAIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub n_iter: usize,
    pub learning_rate: f64,
    pub early_exaggeration_factor: f64,
    pub early_exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch_iter: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            n_iter: 1000,
            learning_rate: 200.0,
            early_exaggeration_factor: 12.0,
            early_exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch_iter: 250,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.perplexity > 1.0 && self.perplexity < n as f64 - 1.0) {
            return Err(Error::Config(format!(
                "perplexity {} must lie strictly between 1 and n-1 = {}",
                self.perplexity,
                n as f64 - 1.0
            )));
        }
        let positive = [
            self.learning_rate,
            self.early_exaggeration_factor,
            self.momentum_initial,
            self.momentum_final,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.n_iter == 0 {
            return Err(Error::Config("t-SNE parameters must be positive".into()));
        }
        Ok(())
    }
}

/// 2-D coordinates with the ids and labels of the embedded rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding2D {
    pub coords: Matrix<f64>,
    pub labels: Vec<u8>,
    pub ids: Vec<String>,
}

impl Embedding2D {
    pub fn new(coords: Matrix<f64>, labels: Vec<u8>, ids: Vec<String>) -> Result<Self> {
        if coords.cols() != 2 || coords.rows() != labels.len() || labels.len() != ids.len() {
            return Err(Error::Validation(
                "coordinates, labels and ids must agree in length".into(),
            ));
        }
        if coords.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("coordinates must be finite".into()));
        }
        Ok(Self {
            coords,
            labels,
            ids,
        })
    }
}

/// Exactly `per_class` rows of each class, chosen by a seeded Fisher–Yates
/// prefix per class (class 0 first), returned in original row order.
pub fn subsample_balanced(set: &EmbeddingSet, per_class: usize, seed: u64) -> Result<EmbeddingSet> {
    if per_class == 0 {
        return Err(Error::Validation("per_class must be at least 1".into()));
    }
    let mut rng = Xoshiro256::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(2 * per_class);
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..set.len())
            .filter(|&i| set.labels()[i] == class)
            .collect();
        if members.len() < per_class {
            return Err(Error::Validation(format!(
                "class {class} has {} members, {per_class} requested",
                members.len()
            )));
        }
        rng.partial_shuffle(&mut members, per_class);
        chosen.extend_from_slice(&members[..per_class]);
    }
    chosen.sort_unstable();
    set.select(&chosen)
}

fn squared_distances<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let n = x.rows();
    let data: Vec<T> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let xi = x.row(i);
            (0..n).map(move |j| {
                let mut s = T::zero();
                for (a, b) in xi.iter().zip(x.row(j)) {
                    let d = *a - *b;
                    s += d * d;
                }
                s
            })
        })
        .collect();
    Matrix::new(n, n, data).expect("n x n")
}

/// Conditional distribution of one row at log-bandwidth `log_sigma`, and its entropy in bits.
/// `dist` holds distances to the other rows, already shifted so the minimum is 0.
fn conditional<T: Scalar>(dist: &[T], log_sigma: T) -> (Vec<T>, T) {
    let beta = T::of(0.5) * (-(log_sigma + log_sigma)).exp();
    let w: Vec<T> = dist
        .iter()
        .map(|&d| {
            if d > T::zero() {
                (-d * beta).exp()
            } else {
                T::one()
            }
        })
        .collect();
    let z: T = w.iter().copied().sum();
    let weighted: T = w.iter().zip(dist).map(|(&wj, &d)| wj * d).sum();
    let h_nats = z.ln() + beta * weighted / z;
    (w.into_iter().map(|wj| wj / z).collect(), h_nats / T::LN_2())
}

/// Row-conditional affinities `p_{j|i}` (zero diagonal) and each row's entropy in bits.
pub fn conditional_affinities<T: Scalar>(
    x: &Matrix<T>,
    perplexity: f64,
) -> Result<(Matrix<T>, Vec<T>)> {
    let n = x.rows();
    if n < 3 {
        return Err(Error::Validation(format!(
            "t-SNE needs at least 3 rows, got {n}"
        )));
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("t-SNE input must be finite".into()));
    }
    if !(perplexity > 0.0 && perplexity.is_finite()) {
        return Err(Error::Config(format!("invalid perplexity {perplexity}")));
    }
    let d2 = squared_distances(x);
    let target = T::of(perplexity.log2());
    let tol = T::of(ENTROPY_TOL);

    let rows: Vec<(Vec<T>, T)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut dist: Vec<T> = (0..n).filter(|&j| j != i).map(|j| d2.get(i, j)).collect();
            // Divide by the mean distance so the search does not depend on
            // the input scale, then shift the minimum to zero for stable exponentials.
            let mean = dist.iter().copied().sum::<T>() / T::of((n - 1) as f64);
            let (p, h) = if mean > T::zero() {
                for d in dist.iter_mut() {
                    *d /= mean;
                }
                let dmin = dist.iter().copied().fold(T::infinity(), T::min);
                for d in dist.iter_mut() {
                    *d -= dmin;
                }
                search_bandwidth(&dist, target, tol).ok_or_else(|| Error::DegenerateAffinity {
                    row: i,
                    message: "bandwidth search could not bracket the target entropy".into(),
                })?
            } else {
                conditional(&dist, T::zero())
            };
            if (h - target).abs() >= tol {
                return Err(Error::DegenerateAffinity {
                    row: i,
                    message: format!("entropy {h} bits cannot reach target {target}"),
                });
            }
            let mut full = Vec::with_capacity(n);
            full.extend_from_slice(&p[..i]);
            full.push(T::zero());
            full.extend_from_slice(&p[i..]);
            Ok((full, h))
        })
        .collect::<Vec<Result<_>>>()
        .into_iter()
        .collect::<Result<_>>()?;

    let entropies = rows.iter().map(|r| r.1).collect();
    let data = rows.into_iter().flat_map(|r| r.0).collect();
    Ok((Matrix::new(n, n, data)?, entropies))
}

fn search_bandwidth<T: Scalar>(dist: &[T], target: T, tol: T) -> Option<(Vec<T>, T)> {
    let one = T::one();
    let at = |s: T| conditional(dist, s);
    let mut best = at(T::zero());
    if (best.1 - target).abs() < tol {
        return Some(best);
    }
    // Entropy grows with sigma: find lo with H < target < hi.
    let (mut lo, mut hi) = if best.1 > target {
        (-one, T::zero())
    } else {
        (T::zero(), one)
    };
    let mut steps = 0;
    loop {
        if best.1 > target {
            let h = at(lo).1;
            if h < target {
                break;
            }
            if (h - target).abs() < tol {
                return Some(at(lo));
            }
            hi = lo;
            lo -= one;
        } else {
            let h = at(hi).1;
            if h > target {
                break;
            }
            if (h - target).abs() < tol {
                return Some(at(hi));
            }
            lo = hi;
            hi += one;
        }
        steps += 1;
        if steps >= MAX_BRACKET_STEPS {
            return None;
        }
    }
    for _ in 0..MAX_BISECTIONS {
        let mid = (lo + hi) / T::of(2.0);
        let cand = at(mid);
        if (cand.1 - target).abs() < (best.1 - target).abs() {
            best = cand.clone();
        }
        if (cand.1 - target).abs() < tol {
            return Some(cand);
        }
        if cand.1 > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(best)
}

/// Symmetrized joint affinities `P = (P_cond + P_condᵀ) / 2n`.
///
/// Off-diagonal entries below [`AFFINITY_FLOOR`] are raised to it and the
/// matrix is renormalized to sum to one; the diagonal is zero.
pub fn pairwise_affinities<T: Scalar>(x: &Matrix<T>, perplexity: f64) -> Result<Matrix<T>> {
    let (cond, _) = conditional_affinities(x, perplexity)?;
    Ok(symmetrize(&cond))
}

fn symmetrize<T: Scalar>(cond: &Matrix<T>) -> Matrix<T> {
    let n = cond.rows();
    let two_n = T::of(2.0 * n as f64);
    let floor = T::of(AFFINITY_FLOOR);
    let mut p = Matrix::new(n, n, vec![T::zero(); n * n]).expect("n x n");
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let v = (cond.get(i, j) + cond.get(j, i)) / two_n;
                p.set(i, j, v.max(floor));
            }
        }
    }
    let total: T = p.as_slice().iter().copied().sum();
    p.map(|v| v / total)
}

/// Unnormalized Student-t kernel `(1 + |y_i - y_j|²)^-1`, zero diagonal, with its total.
fn student_kernel<T: Scalar>(y: &Matrix<T>) -> (Matrix<T>, T) {
    let n = y.rows();
    let rows: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (yi0, yi1) = (y.get(i, 0), y.get(i, 1));
            (0..n)
                .map(|j| {
                    if i == j {
                        T::zero()
                    } else {
                        let (a, b) = (yi0 - y.get(j, 0), yi1 - y.get(j, 1));
                        T::one() / (T::one() + a * a + b * b)
                    }
                })
                .collect()
        })
        .collect();
    // Row sums are added in row order for a schedule-independent total.
    let total = rows
        .iter()
        .map(|r| r.iter().copied().sum::<T>())
        .fold(T::zero(), |a, b| a + b);
    let data = rows.into_iter().flatten().collect();
    (Matrix::new(n, n, data).expect("n x n"), total)
}

/// KL(P || Q) for embedding `y`, with Q floored at [`AFFINITY_FLOOR`].
pub fn kl_divergence<T: Scalar>(p: &Matrix<T>, y: &Matrix<T>) -> T {
    let (num, total) = student_kernel(y);
    let floor = T::of(AFFINITY_FLOOR);
    let n = p.rows();
    let mut kl = T::zero();
    for i in 0..n {
        for j in 0..n {
            let pij = p.get(i, j);
            if i != j && pij > T::zero() {
                let q = (num.get(i, j) / total).max(floor);
                kl += pij * (pij / q).ln();
            }
        }
    }
    kl
}

#[derive(Clone, Debug)]
pub struct TsneRun<T> {
    pub coords: Matrix<T>,
    /// (iteration, KL) at iteration 0, every 50 iterations, and after the last one.
    pub kl_trace: Vec<(usize, T)>,
}

pub fn tsne_embed<T: Scalar>(x: &Matrix<T>, config: &TsneConfig) -> Result<Matrix<T>> {
    Ok(tsne_embed_traced(x, config)?.coords)
}

/// Gradient descent with momentum and per-coordinate adaptive gains.
pub fn tsne_embed_traced<T: Scalar>(x: &Matrix<T>, config: &TsneConfig) -> Result<TsneRun<T>> {
    let n = x.rows();
    config.validate(n)?;
    let p = pairwise_affinities(x, config.perplexity)?;
    tsne_optimize(&p, config)
}

/// Optimizes a 2-D layout for precomputed joint affinities `p`.
pub fn tsne_optimize<T: Scalar>(p: &Matrix<T>, config: &TsneConfig) -> Result<TsneRun<T>> {
    let n = p.rows();
    let mut rng = Xoshiro256::seed_from_u64(config.seed);
    let init: Vec<T> = (0..n * 2)
        .map(|_| T::of(1e-4 * rng.next_gaussian()))
        .collect();
    let mut y = Matrix::new(n, 2, init)?;
    let mut velocity = vec![T::zero(); n * 2];
    let mut gains = vec![T::one(); n * 2];
    let lr = T::of(config.learning_rate);
    let four = T::of(4.0);
    let mut kl_trace = vec![(0, kl_divergence(p, &y))];

    for iter in 0..config.n_iter {
        let exaggeration = if iter < config.early_exaggeration_iters {
            T::of(config.early_exaggeration_factor)
        } else {
            T::one()
        };
        let momentum = T::of(if iter < config.momentum_switch_iter {
            config.momentum_initial
        } else {
            config.momentum_final
        });
        let (num, total) = student_kernel(&y);
        let floor = T::of(AFFINITY_FLOOR);
        let grad: Vec<T> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let (mut g0, mut g1) = (T::zero(), T::zero());
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let w = num.get(i, j);
                    let q = (w / total).max(floor);
                    let coeff = (exaggeration * p.get(i, j) - q) * w;
                    g0 += coeff * (y.get(i, 0) - y.get(j, 0));
                    g1 += coeff * (y.get(i, 1) - y.get(j, 1));
                }
                [four * g0, four * g1]
            })
            .collect();

        let min_gain = T::of(MIN_GAIN);
        for k in 0..n * 2 {
            let same_sign = (grad[k] > T::zero()) == (velocity[k] > T::zero());
            gains[k] = if same_sign {
                gains[k] * T::of(0.8)
            } else {
                gains[k] + T::of(0.2)
            };
            if gains[k] < min_gain {
                gains[k] = min_gain;
            }
            velocity[k] = momentum * velocity[k] - lr * gains[k] * grad[k];
        }
        let (mut m0, mut m1) = (T::zero(), T::zero());
        for i in 0..n {
            let a = y.get(i, 0) + velocity[2 * i];
            let b = y.get(i, 1) + velocity[2 * i + 1];
            y.set(i, 0, a);
            y.set(i, 1, b);
            m0 += a;
            m1 += b;
        }
        let nn = T::of(n as f64);
        let (m0, m1) = (m0 / nn, m1 / nn);
        for i in 0..n {
            y.set(i, 0, y.get(i, 0) - m0);
            y.set(i, 1, y.get(i, 1) - m1);
        }
        let done = iter + 1;
        if done % 50 == 0 || done == config.n_iter {
            kl_trace.push((done, kl_divergence(p, &y)));
        }
    }
    if y.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation(
            "t-SNE diverged to non-finite coordinates".into(),
        ));
    }
    Ok(TsneRun {
        coords: y,
        kl_trace,
    })
}

const CLASS_COLORS: [&str; 2] = ["#1f77b4", "#d62728"];
const CLASS_NAMES: [&str; 2] = ["non-ACS (0)", "ACS (1)"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders a standalone SVG scatter plot: one circle per point, coloured by
/// class, axes scaled to the data bounding box plus a 5% margin.
pub fn render_scatter_svg(emb: &Embedding2D, title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 560.0;
    const LEFT: f64 = 60.0;
    const TOP: f64 = 40.0;
    const PLOT: f64 = 480.0;

    let xs: Vec<f64> = (0..emb.coords.rows())
        .map(|i| emb.coords.get(i, 0))
        .collect();
    let ys: Vec<f64> = (0..emb.coords.rows())
        .map(|i| emb.coords.get(i, 1))
        .collect();
    let bounds = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        (lo - 0.05 * span, hi + 0.05 * span)
    };
    let (x0, x1) = bounds(&xs);
    let (y0, y1) = bounds(&ys);
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * PLOT;
    let py = |y: f64| TOP + PLOT - (y - y0) / (y1 - y0) * PLOT;

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        LEFT + PLOT / 2.0,
        xml_escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{PLOT}" height="{PLOT}" fill="none" stroke="black"/>"#
    );
    let axis_label = |s: &mut String, x: f64, y: f64, anchor: &str, v: f64| {
        let _ = writeln!(
            s,
            r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">{v:.3}</text>"#
        );
    };
    axis_label(&mut s, LEFT, TOP + PLOT + 14.0, "start", x0);
    axis_label(&mut s, LEFT + PLOT, TOP + PLOT + 14.0, "end", x1);
    axis_label(&mut s, LEFT - 4.0, TOP + PLOT, "end", y0);
    axis_label(&mut s, LEFT - 4.0, TOP + 10.0, "end", y1);
    let _ = writeln!(s, r#"<g id="points">"#);
    for i in 0..xs.len() {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            px(xs[i]),
            py(ys[i]),
            CLASS_COLORS[emb.labels[i] as usize & 1]
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<g id="legend" font-family="sans-serif" font-size="12">"#
    );
    for (k, (color, name)) in CLASS_COLORS.iter().zip(CLASS_NAMES).enumerate() {
        let y = TOP + PLOT + 32.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{:.1}" width="10" height="10" fill="{color}"/>"#,
            y - 9.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{y:.1}">{name}</text>"#,
            LEFT + 16.0
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    s
}

pub fn export_scatter_svg<W: Write>(emb: &Embedding2D, mut sink: W) -> Result<()> {
    sink.write_all(render_scatter_svg(emb, "t-SNE").as_bytes())?;
    sink.flush()?;
    Ok(())
}

/// `id,label,x,y` with shortest round-trip float formatting.
pub fn write_coords_csv<W: Write>(emb: &Embedding2D, mut sink: W) -> Result<()> {
    let mut out = String::from("id,label,x,y\n");
    for i in 0..emb.ids.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            emb.ids[i],
            emb.labels[i],
            emb.coords.get(i, 0),
            emb.coords.get(i, 1)
        );
    }
    sink.write_all(out.as_bytes())?;
    sink.flush()?;
    Ok(())
}
