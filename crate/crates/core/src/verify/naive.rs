//! Deliberately naive reference implementations.
//!
//! Nothing here calls into the tape, the gemm kernel or the PET modules:
//! every formula is re-derived with explicit loops over `f64` so that an
//! agreement with the optimized path is evidence rather than tautology.

use crate::backbone::{BackboneConfig, Sample};
use crate::params::ParamStore;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "naive matrix shape");
        Self { rows, cols, data }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    /// Reads a stored parameter by name. Vectors become `1 × n` rows.
    pub fn param(store: &ParamStore<f64>, name: &str) -> Self {
        let id = store
            .find(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        let t = store.get(id);
        let (r, c) = match t.shape() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => panic!("{name}: unexpected rank {}", s.len()),
        };
        Self::from_vec(r, c, t.data().to_vec())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Error function from its Maclaurin series near zero and a continued
/// fraction for the complement in the tails. Kept separate from any libm so
/// the GELU oracle is independent of the kernel it checks.
pub fn erf(x: f64) -> f64 {
    let a = x.abs();
    let v = if a < 2.5 {
        // sum_n (-1)^n a^(2n+1) / (n! (2n+1))
        let (mut term, mut sum, mut n) = (a, a, 0.0);
        while term.abs() > 1e-17 * sum.abs() {
            n += 1.0;
            term *= -a * a / n;
            sum += term / (2.0 * n + 1.0);
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // Modified Lentz on erfc(a) = exp(-a^2)/sqrt(pi) / (a + 1/2/(a + 1/(a + 3/2/(a + ...))))
        let tiny = 1e-300;
        let (mut f, mut c, mut d) = (a, a, 0.0);
        for k in 1..500 {
            let an = k as f64 / 2.0;
            d = a + an * d;
            d = if d.abs() < tiny { tiny } else { d };
            c = a + an / c;
            c = if c.abs() < tiny { tiny } else { c };
            d = 1.0 / d;
            let delta = c * d;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - (-a * a).exp() / std::f64::consts::PI.sqrt() / f
    };
    v.copysign(x)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "naive matmul shape");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.at(i, k) * b.at(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "naive add shape");
    Mat::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    )
}

pub fn hadamard(a: &Mat, b: &Mat) -> Mat {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "naive hadamard shape");
    Mat::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    )
}

/// Adds a `1 × c` row to every row.
pub fn add_bias(a: &Mat, b: &Mat) -> Mat {
    let mut out = a.clone();
    for i in 0..a.rows {
        for j in 0..a.cols {
            out.set(i, j, a.at(i, j) + b.at(0, j));
        }
    }
    out
}

pub fn concat_cols(parts: &[Mat]) -> Mat {
    let rows = parts[0].rows;
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut out = Mat::zeros(rows, cols);
    for i in 0..rows {
        let mut off = 0;
        for p in parts {
            for j in 0..p.cols {
                out.set(i, off + j, p.at(i, j));
            }
            off += p.cols;
        }
    }
    out
}

// ------------------------------------------------------------------
// Gate generators
// ------------------------------------------------------------------

pub fn g_large(x: &Mat, wd: &Mat, wu: &Mat, s: f64) -> Mat {
    let mut out = Mat::zeros(x.rows, wu.cols);
    for i in 0..x.rows {
        let mut hidden = vec![0.0; wd.cols];
        for (k, hk) in hidden.iter_mut().enumerate() {
            let mut acc = 0.0;
            for j in 0..x.cols {
                acc += x.at(i, j) * wd.at(j, k);
            }
            *hk = gelu(acc);
        }
        for j in 0..wu.cols {
            let mut acc = 0.0;
            for (k, hk) in hidden.iter().enumerate() {
                acc += hk * wu.at(k, j);
            }
            out.set(i, j, s * sigmoid(acc));
        }
    }
    out
}

pub fn g_middle_x(x: &Mat, h: &Mat, w: &Mat, s: f64) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let mut acc = 0.0;
        for j in 0..x.cols {
            acc += (x.at(i, j) + h.at(i, j)) * w.at(j, 0);
        }
        let v = s * sigmoid(acc);
        for j in 0..x.cols {
            out.set(i, j, v);
        }
    }
    out
}

pub fn g_middle_y(n: usize, z: &Mat, s: f64) -> Mat {
    let mut out = Mat::zeros(n, z.cols);
    for i in 0..n {
        for j in 0..z.cols {
            out.set(i, j, s * (sigmoid(z.at(0, j)) + 1.0));
        }
    }
    out
}

/// `segments` are `(start, len)` row ranges; each gets its own pooled value.
pub fn g_small(x: &Mat, h: &Mat, w: &Mat, s: f64, segments: &[(usize, usize)]) -> Mat {
    let d = x.cols;
    let mut out = Mat::zeros(x.rows, d);
    for &(start, len) in segments {
        let mut total = 0.0;
        for i in start..start + len {
            let mut acc = 0.0;
            for j in 0..d {
                acc += x.at(i, j) * w.at(j, 0) + h.at(i, j) * w.at(d + j, 0);
            }
            total += sigmoid(acc);
        }
        let v = s * total / len as f64;
        for i in start..start + len {
            for j in 0..d {
                out.set(i, j, v);
            }
        }
    }
    out
}

// ------------------------------------------------------------------
// Modifications
// ------------------------------------------------------------------

/// Single-head bottleneck `gelu(X·Wd)·Wu`.
pub fn bottleneck(x: &Mat, wd: &Mat, wu: &Mat) -> Mat {
    matmul(&matmul(x, wd).map(gelu), wu)
}

/// Head `i` uses only its own slice of the hidden state.
pub fn paired_heads(x: &Mat, downs: &[Mat], ups: &[Mat]) -> Mat {
    let outs: Vec<Mat> = downs
        .iter()
        .zip(ups)
        .map(|(d, u)| bottleneck(x, d, u))
        .collect();
    concat_cols(&outs)
}

// ------------------------------------------------------------------
// Reference encoder-decoder
// ------------------------------------------------------------------

fn layer_norm(x: &Mat, g: &Mat, b: &Mat, eps: f64) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let n = x.cols as f64;
        let mean = (0..x.cols).map(|j| x.at(i, j)).sum::<f64>() / n;
        let var = (0..x.cols)
            .map(|j| (x.at(i, j) - mean).powi(2))
            .sum::<f64>()
            / n;
        for j in 0..x.cols {
            out.set(
                i,
                j,
                (x.at(i, j) - mean) / (var + eps).sqrt() * g.at(0, j) + b.at(0, j),
            );
        }
    }
    out
}

fn linear(store: &ParamStore<f64>, name: &str, x: &Mat) -> Mat {
    add_bias(
        &matmul(x, &Mat::param(store, &format!("{name}.w"))),
        &Mat::param(store, &format!("{name}.b")),
    )
}

fn norm(store: &ParamStore<f64>, name: &str, x: &Mat, eps: f64) -> Mat {
    layer_norm(
        x,
        &Mat::param(store, &format!("{name}.g")),
        &Mat::param(store, &format!("{name}.b")),
        eps,
    )
}

fn attention(
    store: &ParamStore<f64>,
    name: &str,
    xq: &Mat,
    xkv: &Mat,
    heads: usize,
    causal: bool,
) -> Mat {
    let q = linear(store, &format!("{name}.q"), xq);
    let k = linear(store, &format!("{name}.k"), xkv);
    let v = linear(store, &format!("{name}.v"), xkv);
    let d = q.cols;
    let dh = d / heads;
    let mut ctx = Mat::zeros(xq.rows, d);
    for hd in 0..heads {
        let off = hd * dh;
        for i in 0..q.rows {
            let visible = if causal { i + 1 } else { k.rows };
            let scores: Vec<f64> = (0..visible)
                .map(|j| {
                    (0..dh)
                        .map(|c| q.at(i, off + c) * k.at(j, off + c))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for (j, ej) in e.iter().enumerate() {
                    acc += ej / z * v.at(j, off + c);
                }
                ctx.set(i, off + c, acc);
            }
        }
    }
    linear(store, &format!("{name}.o"), &ctx)
}

fn feed_forward(store: &ParamStore<f64>, name: &str, x: &Mat) -> Mat {
    let h = linear(store, &format!("{name}.up"), x).map(gelu);
    linear(store, &format!("{name}.down"), &h)
}

fn rows_of(table: &Mat, ids: impl IntoIterator<Item = usize>) -> Mat {
    let ids: Vec<usize> = ids.into_iter().collect();
    let mut out = Mat::zeros(ids.len(), table.cols);
    for (i, &t) in ids.iter().enumerate() {
        for j in 0..table.cols {
            out.set(i, j, table.at(t, j));
        }
    }
    out
}

/// Teacher-forced logits of an unattached model with a linear projector,
/// for a single sample.
pub fn reference_logits(cfg: &BackboneConfig, store: &ParamStore<f64>, sample: &Sample) -> Mat {
    let eps = cfg.ln_eps;
    let embed = Mat::param(store, "embed");
    let mut rows = Vec::new();
    if !sample.visual.is_empty() {
        let feats = Mat::from_vec(cfg.visual_tokens, cfg.visual_dim, sample.visual.clone());
        let proj = linear(store, "projector", &feats);
        rows.extend(proj.data);
    }
    rows.extend(rows_of(&embed, sample.text.iter().copied()).data);
    let n = rows.len() / cfg.d;
    let x = Mat::from_vec(n, cfg.d, rows);
    let x = add(&x, &rows_of(&Mat::param(store, "enc.pos"), 0..n));
    let mut x = norm(store, "enc.embed_norm", &x, eps);
    for l in 0..cfg.enc_layers {
        let h = attention(
            store,
            &format!("enc.{l}.self_attn"),
            &x,
            &x,
            cfg.heads,
            false,
        );
        x = norm(store, &format!("enc.{l}.self_norm"), &add(&x, &h), eps);
        let h = feed_forward(store, &format!("enc.{l}.ff"), &x);
        x = norm(store, &format!("enc.{l}.ff_norm"), &add(&x, &h), eps);
    }
    let memory = x;

    let ids = sample.decoder_input();
    let y = add(
        &rows_of(&embed, ids.iter().copied()),
        &rows_of(&Mat::param(store, "dec.pos"), 0..ids.len()),
    );
    let mut y = norm(store, "dec.embed_norm", &y, eps);
    for l in 0..cfg.dec_layers {
        let h = attention(
            store,
            &format!("dec.{l}.self_attn"),
            &y,
            &y,
            cfg.heads,
            true,
        );
        y = norm(store, &format!("dec.{l}.self_norm"), &add(&y, &h), eps);
        let h = attention(
            store,
            &format!("dec.{l}.cross_attn"),
            &y,
            &memory,
            cfg.heads,
            false,
        );
        y = norm(store, &format!("dec.{l}.cross_norm"), &add(&y, &h), eps);
        let h = feed_forward(store, &format!("dec.{l}.ff"), &y);
        y = norm(store, &format!("dec.{l}.ff_norm"), &add(&y, &h), eps);
    }
    let mut logits = Mat::zeros(y.rows, embed.rows);
    for i in 0..y.rows {
        for t in 0..embed.rows {
            logits.set(i, t, (0..y.cols).map(|j| y.at(i, j) * embed.at(t, j)).sum());
        }
    }
    logits
}

/// Mean token cross-entropy of `logits` against `targets`.
pub fn cross_entropy(logits: &Mat, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let row: Vec<f64> = (0..logits.cols).map(|j| logits.at(i, j)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    total / targets.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_matches_tabulated_values() {
        let table = [
            (0.1, 0.112_462_916_018_284_9),
            (0.5, 0.520_499_877_813_046_5),
            (1.0, 0.842_700_792_949_714_9),
            (2.0, 0.995_322_265_018_952_7),
            (2.4, 0.999_311_486_103_354_9),
            (3.0, 0.999_977_909_503_001_4),
            (5.0, 0.999_999_999_998_462_5),
        ];
        for (x, want) in table {
            assert!((erf(x) - want).abs() < 1e-15, "erf({x}) = {}", erf(x));
            assert!((erf(-x) + want).abs() < 1e-15);
        }
        assert_eq!(erf(0.0), 0.0);
    }
}
