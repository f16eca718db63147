use crate::scalar::{gemm, MatRef};
use crate::{Scalar, Tape, Tensor, Var};

impl<T: Scalar> Tape<T> {
    /// `x @ w` where `x` is `[.., k]` (flattened to rows) and `w` is `[k, n]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(vw.shape.len(), 2, "matmul: weight must be 2-D");
        let (k, n) = (vw.shape[0], vw.shape[1]);
        assert_eq!(vx.last_dim(), k, "matmul: inner dims {:?} x {:?}", vx.shape, vw.shape);
        let m = vx.rows();
        let mut data = vec![T::zero(); m * n];
        gemm(&vx.data, MatRef::new(m, k), &vw.data, MatRef::new(k, n), &mut data, T::zero());
        let mut shape = vx.shape.clone();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data);
        self.push_op(
            out,
            &[x, w],
            Box::new(move |args| {
                let (xv, wv) = (&args.inputs[0].data, &args.inputs[1].data);
                let gx = args.needs[0].then(|| {
                    let mut g = vec![T::zero(); m * k];
                    gemm(args.grad, MatRef::new(m, n), wv, MatRef::t(k, n), &mut g, T::zero());
                    g
                });
                let gw = args.needs[1].then(|| {
                    let mut g = vec![T::zero(); k * n];
                    gemm(xv, MatRef::t(m, k), args.grad, MatRef::new(m, n), &mut g, T::zero());
                    g
                });
                vec![gx, gw]
            }),
        )
    }

    /// Affine map `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// Row `r` of the output is the sum of `table[indices[r * per_row + j]]`
    /// over `j < per_row`.
    pub fn embed_sum(&mut self, table: Var, indices: &[u32], per_row: usize) -> Var {
        let vt = self.value(table);
        assert_eq!(vt.shape.len(), 2, "embed_sum: table must be 2-D");
        assert!(per_row >= 1 && indices.len() % per_row == 0);
        let (vocab, n) = (vt.shape[0], vt.shape[1]);
        let rows = indices.len() / per_row;
        let mut data = vec![T::zero(); rows * n];
        for (r, chunk) in indices.chunks(per_row).enumerate() {
            let dst = &mut data[r * n..(r + 1) * n];
            for &ix in chunk {
                let ix = ix as usize;
                assert!(ix < vocab, "embed_sum: index {ix} out of range {vocab}");
                dst.iter_mut()
                    .zip(&vt.data[ix * n..(ix + 1) * n])
                    .for_each(|(d, s)| *d = *d + *s);
            }
        }
        let idx = indices.to_vec();
        let out = Tensor::new([rows, n], data);
        self.push_op(
            out,
            &[table],
            Box::new(move |args| {
                let mut g = vec![T::zero(); vocab * n];
                for (r, chunk) in idx.chunks(per_row).enumerate() {
                    let src = &args.grad[r * n..(r + 1) * n];
                    for &ix in chunk {
                        let ix = ix as usize;
                        g[ix * n..(ix + 1) * n]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d = *d + *s);
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Mean cross-entropy of `logits` (`[m, classes]`) against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Var {
        let vl = self.value(logits);
        let classes = vl.last_dim();
        let m = vl.rows();
        assert_eq!(targets.len(), m, "cross_entropy: {m} rows but {} targets", targets.len());
        let mut probs = vec![T::zero(); m * classes];
        let mut total = 0.0f64;
        for r in 0..m {
            let row = &vl.data[r * classes..(r + 1) * classes];
            let p = &mut probs[r * classes..(r + 1) * classes];
            let lse = softmax_into(row, p);
            let t = targets[r] as usize;
            assert!(t < classes, "cross_entropy: target {t} out of range");
            total += (lse - row[t]).as_f64();
        }
        let inv_m = T::lit(1.0 / m as f64);
        let tg = targets.to_vec();
        let out = Tensor::scalar(T::lit(total / m as f64));
        self.push_op(
            out,
            &[logits],
            Box::new(move |args| {
                let k = args.grad[0] * inv_m;
                let mut g: Vec<T> = probs.iter().map(|p| *p * k).collect();
                for (r, &t) in tg.iter().enumerate() {
                    g[r * classes + t as usize] = g[r * classes + t as usize] - k;
                }
                vec![Some(g)]
            }),
        )
    }
}

/// Writes softmax(row) into `out` and returns log-sum-exp(row).
pub fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z = z + *o;
    }
    let inv = T::one() / z;
    out.iter_mut().for_each(|o| *o = *o * inv);
    max + z.ln()
}
