//! Forward and backward passes for a single sequence.

use crate::error::{Error, Result};
use crate::model::grads::{BaseGrads, LayerBaseGrads};
use crate::model::{BaseWeights, LayerEff, ModelConfig};
use crate::numerics::Matrix;

/// One training sequence; `None` targets are excluded from the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl Example {
    pub fn counted(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    pub x: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention probabilities per head, `T×T`.
    pub probs: Vec<Matrix>,
    pub o: Matrix,
    pub x1: Matrix,
    pub hpre: Matrix,
    pub hact: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerCache>,
    pub x_out: Matrix,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn add_bias(m: &mut Matrix, b: &[f64]) {
    for i in 0..m.rows() {
        for (v, bj) in m.row_mut(i).iter_mut().zip(b) {
            *v += bj;
        }
    }
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (acc, v) in s.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    s
}

fn head_block(m: &Matrix, h: usize, dh: usize) -> Matrix {
    Matrix::from_fn(m.rows(), dh, |i, j| m[(i, h * dh + j)])
}

fn put_head_block(dst: &mut Matrix, src: &Matrix, h: usize, dh: usize) {
    for i in 0..src.rows() {
        for j in 0..dh {
            dst[(i, h * dh + j)] = src[(i, j)];
        }
    }
}

fn softmax_rows(s: &mut Matrix) {
    for i in 0..s.rows() {
        let row = s.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub(crate) fn forward(
    cfg: &ModelConfig,
    base: &BaseWeights,
    eff: &[LayerEff],
    tokens: &[usize],
) -> Result<(Matrix, ForwardCache)> {
    let t_len = tokens.len();
    if t_len == 0 || t_len > cfg.seq_len {
        return Err(Error::invalid(format!(
            "sequence length {t_len} outside 1..={}",
            cfg.seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&tok| tok >= cfg.vocab) {
        return Err(Error::invalid(format!(
            "token {bad} out of range for vocab {}",
            cfg.vocab
        )));
    }
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut x = Matrix::from_fn(t_len, d, |t, j| {
        base.tok_emb[(tokens[t], j)] + base.pos_emb[(t, j)]
    });
    let mut layers = Vec::with_capacity(eff.len());
    for lw in eff {
        let q = x.matmul_t(&lw.wq)?;
        let k = x.matmul_t(&lw.wk)?;
        let v = x.matmul_t(&lw.wv)?;
        let mut o = Matrix::zeros(t_len, d);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (qh, kh, vh) = (head_block(&q, h, dh), head_block(&k, h, dh), head_block(&v, h, dh));
            let mut s = qh.matmul_t(&kh)?.scale(scale);
            softmax_rows(&mut s);
            put_head_block(&mut o, &s.matmul(&vh)?, h, dh);
            probs.push(s);
        }
        let x1 = x.add(&o.matmul_t(&lw.wo)?)?;
        let mut hpre = x1.matmul_t(&lw.w1)?;
        add_bias(&mut hpre, &lw.b1);
        let hact = hpre.map(gelu);
        let mut f = hact.matmul_t(&lw.w2)?;
        add_bias(&mut f, &lw.b2);
        let x2 = x1.add(&f)?;
        layers.push(LayerCache {
            x,
            q,
            k,
            v,
            probs,
            o,
            x1,
            hpre,
            hact,
        });
        x = x2;
    }
    let logits = x.matmul_t(&base.head)?;
    Ok((
        logits,
        ForwardCache {
            tokens: tokens.to_vec(),
            layers,
            x_out: x,
        },
    ))
}

/// Summed cross-entropy over non-masked positions, the number of positions
/// counted, and `∂(sum)/∂logits`.
pub fn cross_entropy(logits: &Matrix, targets: &[Option<usize>]) -> Result<(f64, usize, Matrix)> {
    if logits.rows() != targets.len() {
        return Err(Error::invalid("cross_entropy: logits and targets disagree on length"));
    }
    let mut total = 0.0;
    let mut count = 0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (t, target) in targets.iter().enumerate() {
        let Some(y) = *target else { continue };
        if y >= logits.cols() {
            return Err(Error::invalid(format!("target {y} out of range")));
        }
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y];
        count += 1;
        for (j, g) in grad.row_mut(t).iter_mut().enumerate() {
            *g = (row[j] - lse).exp() - if j == y { 1.0 } else { 0.0 };
        }
    }
    Ok((total, count, grad))
}

/// Gradients of a loss with cotangent `dlogits` with respect to every
/// effective weight, bias, embedding and the output head.
pub(crate) fn backward(
    cfg: &ModelConfig,
    base: &BaseWeights,
    eff: &[LayerEff],
    cache: &ForwardCache,
    dlogits: &Matrix,
) -> Result<BaseGrads> {
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t_len = cache.tokens.len();
    let head = dlogits.t_matmul(&cache.x_out)?;
    let mut dx = dlogits.matmul(&base.head)?;
    let mut layer_grads = Vec::with_capacity(eff.len());
    for (lw, lc) in eff.iter().zip(&cache.layers).rev() {
        // feed-forward block
        let db2 = col_sums(&dx);
        let dw2 = dx.t_matmul(&lc.hact)?;
        let dhact = dx.matmul(&lw.w2)?;
        let dhpre = dhact.zip_with(&lc.hpre, |g, z| g * gelu_grad(z));
        let db1 = col_sums(&dhpre);
        let dw1 = dhpre.t_matmul(&lc.x1)?;
        let dx1 = dx.add(&dhpre.matmul(&lw.w1)?)?;
        // attention block
        let dwo = dx1.t_matmul(&lc.o)?;
        let d_o = dx1.matmul(&lw.wo)?;
        let mut dq = Matrix::zeros(t_len, cfg.d_model);
        let mut dk = Matrix::zeros(t_len, cfg.d_model);
        let mut dv = Matrix::zeros(t_len, cfg.d_model);
        for h in 0..cfg.n_heads {
            let p = &lc.probs[h];
            let doh = head_block(&d_o, h, dh);
            let vh = head_block(&lc.v, h, dh);
            let dp = doh.matmul_t(&vh)?;
            put_head_block(&mut dv, &p.t_matmul(&doh)?, h, dh);
            let mut ds = Matrix::zeros(t_len, t_len);
            for i in 0..t_len {
                let dot: f64 = p.row(i).iter().zip(dp.row(i)).map(|(a, b)| a * b).sum();
                for j in 0..t_len {
                    ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot) * scale;
                }
            }
            put_head_block(&mut dq, &ds.matmul(&head_block(&lc.k, h, dh))?, h, dh);
            put_head_block(&mut dk, &ds.t_matmul(&head_block(&lc.q, h, dh))?, h, dh);
        }
        let dwq = dq.t_matmul(&lc.x)?;
        let dwk = dk.t_matmul(&lc.x)?;
        let dwv = dv.t_matmul(&lc.x)?;
        let mut dx0 = dx1;
        dx0.axpy(1.0, &dq.matmul(&lw.wq)?)?;
        dx0.axpy(1.0, &dk.matmul(&lw.wk)?)?;
        dx0.axpy(1.0, &dv.matmul(&lw.wv)?)?;
        layer_grads.push(LayerBaseGrads {
            wq: dwq,
            wk: dwk,
            wv: dwv,
            wo: dwo,
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        });
        dx = dx0;
    }
    layer_grads.reverse();
    let mut tok_emb = Matrix::zeros(cfg.vocab, cfg.d_model);
    let mut pos_emb = Matrix::zeros(cfg.seq_len, cfg.d_model);
    for (t, &tok) in cache.tokens.iter().enumerate() {
        for (j, g) in dx.row(t).iter().enumerate() {
            tok_emb[(tok, j)] += g;
            pos_emb[(t, j)] += g;
        }
    }
    Ok(BaseGrads {
        tok_emb,
        pos_emb,
        layers: layer_grads,
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Matrix::zeros(1, 16);
        let (l, n, _) = cross_entropy(&uniform, &[Some(3)]).unwrap();
        assert_eq!(n, 1);
        assert!((l - 16f64.ln()).abs() < 1e-12);
        let mut sharp = Matrix::zeros(1, 4);
        sharp[(0, 2)] = 60.0;
        assert!(cross_entropy(&sharp, &[Some(2)]).unwrap().0 < 1e-20);
        let (l, n, g) = cross_entropy(&sharp, &[None]).unwrap();
        assert_eq!((l, n), (0.0, 0));
        assert_eq!(g, Matrix::zeros(1, 4));
    }

    #[test]
    fn cross_entropy_matches_naive_sum() {
        let logits = Matrix::from_fn(3, 5, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.37 - 1.0);
        let targets = [Some(1), None, Some(4)];
        let (l, _, _) = cross_entropy(&logits, &targets).unwrap();
        let mut naive = 0.0;
        for (t, y) in targets.iter().enumerate() {
            if let Some(y) = y {
                let z: f64 = (0..5).map(|j| logits[(t, j)].exp()).sum();
                naive += -(logits[(t, *y)].exp() / z).ln();
            }
        }
        assert!((l - naive).abs() < 1e-12);
    }
}
