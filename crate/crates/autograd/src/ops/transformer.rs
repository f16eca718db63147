//! Fused kernels for decoder blocks: RMS normalisation, rotary position
//! encoding and causal multi-head attention.

use crate::ops::linalg::softmax_into;
use crate::{Scalar, Tape, Tensor, Var};

/// Strided `c = a * b` (overwrites `c`).
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    rsb: usize,
    csb: usize,
    c: &mut [T],
    rsc: usize,
    csc: usize,
    beta: T,
) {
    if m == 0 || n == 0 {
        return;
    }
    let need = |rs: usize, cs: usize, r: usize, c: usize| (r - 1) * rs + (c - 1) * cs + 1;
    assert!(a.len() >= need(rsa, csa, m, k.max(1)));
    assert!(b.len() >= need(rsb, csb, k.max(1), n));
    assert!(c.len() >= need(rsc, csc, m, n));
    // SAFETY: extents checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// `(sin, cos)` of every rotary angle for one position.
pub fn rope_angles(pos: usize, head_dim: usize) -> Vec<(f64, f64)> {
    (0..head_dim / 2)
        .map(|j| {
            let freq = 10000f64.powf(-(2.0 * j as f64) / head_dim as f64);
            (pos as f64 * freq).sin_cos()
        })
        .collect()
}

fn rotate_pairs<T: Scalar>(row: &mut [T], angles: &[(f64, f64)], head_dim: usize, inverse: bool) {
    for head in row.chunks_mut(head_dim) {
        for (j, &(s, c)) in angles.iter().enumerate() {
            let (s, c) = (T::lit(if inverse { -s } else { s }), T::lit(c));
            let (x0, x1) = (head[2 * j], head[2 * j + 1]);
            head[2 * j] = x0 * c - x1 * s;
            head[2 * j + 1] = x0 * s + x1 * c;
        }
    }
}

/// Rotates consecutive channel pairs of one row of `[heads * head_dim]`
/// values by position-dependent angles. `inverse` applies the transpose.
pub fn rope_row<T: Scalar>(row: &mut [T], pos: usize, head_dim: usize, inverse: bool) {
    assert!(head_dim % 2 == 0, "rotary encoding needs an even head dim");
    rotate_pairs(row, &rope_angles(pos, head_dim), head_dim, inverse);
}

/// RMS-normalises one row and multiplies by `gain`.
pub fn rms_norm_row<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) {
    let n = T::lit(x.len() as f64);
    let ms = x.iter().map(|v| *v * *v).sum::<T>() / n;
    let r = T::one() / (ms + eps).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = *v * r * *g;
    }
}

impl<T: Scalar> Tape<T> {
    /// Row-wise RMS normalisation with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let vx = self.value(x);
        let n = vx.last_dim();
        assert_eq!(self.value(gain).numel(), n, "rms_norm: gain width");
        let eps = T::lit(eps);
        let g = &self.value(gain).data;
        let mut data = vec![T::zero(); vx.numel()];
        let mut inv_rms = Vec::with_capacity(vx.rows());
        for (row, out) in vx.data.chunks(n).zip(data.chunks_mut(n)) {
            let ms = row.iter().map(|v| *v * *v).sum::<T>() / T::lit(n as f64);
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for ((o, v), gg) in out.iter_mut().zip(row).zip(g) {
                *o = *v * r * *gg;
            }
        }
        let out = Tensor::new(vx.shape.clone(), data);
        self.push_op(
            out,
            &[x, gain],
            Box::new(move |args| {
                let (xv, gv) = (&args.inputs[0].data, &args.inputs[1].data);
                let nn = T::lit(n as f64);
                let mut gx = vec![T::zero(); xv.len()];
                let mut gg = vec![T::zero(); n];
                for (ri, ((row, grow), dx)) in xv
                    .chunks(n)
                    .zip(args.grad.chunks(n))
                    .zip(gx.chunks_mut(n))
                    .enumerate()
                {
                    let r = inv_rms[ri];
                    let mut dot = T::zero();
                    for j in 0..n {
                        gg[j] = gg[j] + grow[j] * row[j] * r;
                        dot = dot + grow[j] * gv[j] * row[j];
                    }
                    let k = r * r * r * dot / nn;
                    for j in 0..n {
                        dx[j] = r * grow[j] * gv[j] - row[j] * k;
                    }
                }
                vec![args.needs[0].then_some(gx), args.needs[1].then_some(gg)]
            }),
        )
    }

    /// Rotary encoding of `[groups * seq, heads * head_dim]` rows; the row
    /// at offset `t` within its group gets position `t`.
    pub fn rope(&mut self, x: Var, seq: usize, head_dim: usize) -> Var {
        let vx = self.value(x);
        let width = vx.last_dim();
        assert_eq!(width % head_dim, 0);
        assert!(head_dim % 2 == 0, "rotary encoding needs an even head dim");
        let table: Vec<Vec<(f64, f64)>> = (0..seq).map(|p| rope_angles(p, head_dim)).collect();
        let mut data = vx.data.clone();
        for (r, row) in data.chunks_mut(width).enumerate() {
            rotate_pairs(row, &table[r % seq], head_dim, false);
        }
        let out = Tensor::new(vx.shape.clone(), data);
        self.push_op(
            out,
            &[x],
            Box::new(move |args| {
                let mut g = args.grad.to_vec();
                for (r, row) in g.chunks_mut(width).enumerate() {
                    rotate_pairs(row, &table[r % seq], head_dim, true);
                }
                vec![Some(g)]
            }),
        )
    }

    /// Causal scaled dot-product attention. `q`, `k`, `v` are
    /// `[batch * seq, heads * head_dim]`; output has the same layout.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(vq.shape, vk.shape);
        assert_eq!(vq.shape, vv.shape);
        let width = vq.last_dim();
        assert_eq!(width % heads, 0);
        let dh = width / heads;
        let rows = vq.rows();
        assert_eq!(rows % seq, 0);
        let batch = rows / seq;
        let scale = T::lit(1.0 / (dh as f64).sqrt());

        let mut out = vec![T::zero(); rows * width];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut scores = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * width + h * dh;
                // S = Q K^T
                gemm_strided(
                    seq, dh, seq, &vq.data[off..], width, 1, &vk.data[off..], 1, width,
                    &mut scores, seq, 1, T::zero(),
                );
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    let srow = &mut scores[i * seq..(i + 1) * seq];
                    srow.iter_mut().for_each(|s| *s = *s * scale);
                    let prow = &mut p[i * seq..(i + 1) * seq];
                    softmax_into(&srow[..=i], &mut prow[..=i]);
                    prow[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                }
                // O = P V
                gemm_strided(
                    seq, seq, dh, p, seq, 1, &vv.data[off..], width, 1, &mut out[off..], width,
                    1, T::zero(),
                );
            }
        }
        let out = Tensor::new(vq.shape.clone(), out);
        self.push_op(
            out,
            &[q, k, v],
            Box::new(move |args| {
                let (qv, kv, vv) = (&args.inputs[0].data, &args.inputs[1].data, &args.inputs[2].data);
                let g = args.grad;
                let mut gq = vec![T::zero(); rows * width];
                let mut gk = vec![T::zero(); rows * width];
                let mut gv = vec![T::zero(); rows * width];
                let mut dp = vec![T::zero(); seq * seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = b * seq * width + h * dh;
                        let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                        // dV = P^T dO
                        gemm_strided(
                            seq, seq, dh, p, 1, seq, &g[off..], width, 1, &mut gv[off..], width,
                            1, T::zero(),
                        );
                        // dP = dO V^T
                        gemm_strided(
                            seq, dh, seq, &g[off..], width, 1, &vv[off..], 1, width, &mut dp,
                            seq, 1, T::zero(),
                        );
                        // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                        for i in 0..seq {
                            let prow = &p[i * seq..(i + 1) * seq];
                            let drow = &mut dp[i * seq..(i + 1) * seq];
                            let dot = prow[..=i]
                                .iter()
                                .zip(&drow[..=i])
                                .map(|(a, b)| *a * *b)
                                .sum::<T>();
                            for j in 0..seq {
                                drow[j] = if j <= i { prow[j] * (drow[j] - dot) * scale } else { T::zero() };
                            }
                        }
                        // dQ = dS K ; dK = dS^T Q
                        gemm_strided(
                            seq, seq, dh, &dp, seq, 1, &kv[off..], width, 1, &mut gq[off..],
                            width, 1, T::zero(),
                        );
                        gemm_strided(
                            seq, seq, dh, &dp, 1, seq, &qv[off..], width, 1, &mut gk[off..],
                            width, 1, T::zero(),
                        );
                    }
                }
                vec![Some(gq), Some(gk), Some(gv)]
            }),
        )
    }
}
