use crate::{Scalar, Tape, Tensor, Var};

fn same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, op: &str) {
    assert_eq!(
        tape.shape(a),
        tape.shape(b),
        "{op}: shape mismatch {:?} vs {:?}",
        tape.shape(a),
        tape.shape(b)
    );
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "add");
        let va = self.value(a);
        let data = va.data.iter().zip(&self.value(b).data).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape.clone(), data);
        self.push_op(
            out,
            &[a, b],
            Box::new(|args| vec![Some(args.grad.to_vec()), Some(args.grad.to_vec())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "sub");
        let va = self.value(a);
        let data = va.data.iter().zip(&self.value(b).data).map(|(x, y)| *x - *y).collect();
        let out = Tensor::new(va.shape.clone(), data);
        self.push_op(
            out,
            &[a, b],
            Box::new(|args| {
                vec![Some(args.grad.to_vec()), Some(args.grad.iter().map(|g| -*g).collect())]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self, a, b, "mul");
        let va = self.value(a);
        let data = va.data.iter().zip(&self.value(b).data).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(va.shape.clone(), data);
        self.push_op(
            out,
            &[a, b],
            Box::new(|args| {
                let (x, y) = (&args.inputs[0].data, &args.inputs[1].data);
                let ga = args.needs[0]
                    .then(|| args.grad.iter().zip(y).map(|(g, y)| *g * *y).collect());
                let gb = args.needs[1]
                    .then(|| args.grad.iter().zip(x).map(|(g, x)| *g * *x).collect());
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let out = Tensor::new(va.shape.clone(), va.data.iter().map(|x| *x * s).collect());
        self.push_op(
            out,
            &[a],
            Box::new(move |args| vec![Some(args.grad.iter().map(|g| *g * s).collect())]),
        )
    }

    /// `a + c` for a constant `c`; the gradient passes to `a` unchanged.
    ///
    /// With `c = sg(q - a)` this is the straight-through bridge.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape, c.shape, "add_const: shape mismatch");
        let data = va.data.iter().zip(&c.data).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape.clone(), data);
        self.push_op(out, &[a], Box::new(|args| vec![Some(args.grad.to_vec())]))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape, c.shape, "mul_const: shape mismatch");
        let data = va.data.iter().zip(&c.data).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(va.shape.clone(), data);
        let mask = c.data.clone();
        self.push_op(
            out,
            &[a],
            Box::new(move |args| {
                vec![Some(args.grad.iter().zip(&mask).map(|(g, m)| *g * *m).collect())]
            }),
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let sig: Vec<T> = va.data.iter().map(|&x| T::one() / (T::one() + (-x).exp())).collect();
        let data = va.data.iter().zip(&sig).map(|(&x, &s)| x * s).collect();
        let out = Tensor::new(va.shape.clone(), data);
        self.push_op(
            out,
            &[a],
            Box::new(move |args| {
                let g = args
                    .grad
                    .iter()
                    .zip(&args.inputs[0].data)
                    .zip(&sig)
                    .map(|((g, &x), &s)| *g * s * (T::one() + x * (T::one() - s)))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.numel();
        let s = va.data.iter().copied().sum::<T>();
        self.push_op(
            Tensor::scalar(s),
            &[a],
            Box::new(move |args| vec![Some(vec![args.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// `sum_i weights[i] * scalars[i]`.
    pub fn weighted_sum(&mut self, scalars: &[Var], weights: &[T]) -> Var {
        assert_eq!(scalars.len(), weights.len());
        let total = scalars
            .iter()
            .zip(weights)
            .map(|(v, w)| self.value(*v).item() * *w)
            .sum::<T>();
        let w = weights.to_vec();
        self.push_op(
            Tensor::scalar(total),
            scalars,
            Box::new(move |args| w.iter().map(|wi| Some(vec![args.grad[0] * *wi])).collect()),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let out = Tensor::new(shape.to_vec(), va.data.clone());
        self.push_op(out, &[a], Box::new(|args| vec![Some(args.grad.to_vec())]))
    }

    /// Adds `row` (shape `[n]`) to every row of `a` (shape `[.., n]`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let n = self.value(row).numel();
        let va = self.value(a);
        assert_eq!(va.last_dim(), n, "add_row: width mismatch");
        let rb = &self.value(row).data;
        let mut data = va.data.clone();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(rb).for_each(|(x, b)| *x = *x + *b);
        }
        let out = Tensor::new(va.shape.clone(), data);
        self.push_op(
            out,
            &[a, row],
            Box::new(move |args| {
                let gb = args.needs[1].then(|| {
                    let mut acc = vec![T::zero(); n];
                    for chunk in args.grad.chunks(n) {
                        acc.iter_mut().zip(chunk).for_each(|(a, g)| *a = *a + *g);
                    }
                    acc
                });
                vec![Some(args.grad.to_vec()), gb]
            }),
        )
    }

    /// Mean squared difference between `a` and a constant target.
    pub fn mse_const(&mut self, a: Var, target: &Tensor<T>) -> Var {
        let n = self.value(a).numel();
        self.sum_sq_diff_const(a, target, T::lit(n as f64))
    }

    /// `sum((a - target)^2) / divisor` with `target` held constant.
    pub fn sum_sq_diff_const(&mut self, a: Var, target: &Tensor<T>, divisor: T) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape, target.shape, "sum_sq_diff_const: shape mismatch");
        let diff: Vec<T> = va.data.iter().zip(&target.data).map(|(x, t)| *x - *t).collect();
        let s = diff.iter().map(|d| *d * *d).sum::<T>() / divisor;
        self.push_op(
            Tensor::scalar(s),
            &[a],
            Box::new(move |args| {
                let k = args.grad[0] * T::lit(2.0) / divisor;
                vec![Some(diff.iter().map(|d| *d * k).collect())]
            }),
        )
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape.len(), 2, "transpose expects a matrix");
        let (r, c) = (va.shape[0], va.shape[1]);
        let out = Tensor::new([c, r], transpose_data(&va.data, r, c));
        self.push_op(
            out,
            &[a],
            Box::new(move |args| vec![Some(transpose_data(args.grad, c, r))]),
        )
    }

    /// Builds `[groups * seq, n]` rows where row `g*seq` comes from `first[g]`
    /// and rows `g*seq + 1 ..` come from consecutive rows of `rest`.
    pub fn prepend_rows(&mut self, first: Var, rest: Var, seq: usize) -> Var {
        let vf = self.value(first);
        let vr = self.value(rest);
        let n = vf.last_dim();
        assert_eq!(vr.last_dim(), n);
        let groups = vf.rows();
        assert_eq!(vr.rows(), groups * (seq - 1), "prepend_rows: row count mismatch");
        let mut data = Vec::with_capacity(groups * seq * n);
        for g in 0..groups {
            data.extend_from_slice(&vf.data[g * n..(g + 1) * n]);
            data.extend_from_slice(&vr.data[g * (seq - 1) * n..(g + 1) * (seq - 1) * n]);
        }
        let out = Tensor::new([groups * seq, n], data);
        self.push_op(
            out,
            &[first, rest],
            Box::new(move |args| {
                let mut gf = Vec::with_capacity(groups * n);
                let mut gr = Vec::with_capacity(groups * (seq - 1) * n);
                for g in 0..groups {
                    let base = g * seq * n;
                    gf.extend_from_slice(&args.grad[base..base + n]);
                    gr.extend_from_slice(&args.grad[base + n..base + seq * n]);
                }
                vec![Some(gf), Some(gr)]
            }),
        )
    }
}

pub(crate) fn transpose_data<T: Copy>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(data[i * cols + j]);
        }
    }
    out
}
