//! Reverse-mode automatic differentiation over a linear tape.

use super::ops::{self, BnCache};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
    },
    Relu(Var),
    Add(Var, Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GrayToRgb {
        x: Var,
        inv_std: [f64; 3],
    },
    /// Scalar function of `x` whose local gradient was computed eagerly.
    Reduce {
        x: Var,
        grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of leaf variables after [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(y, Op::Conv { x, w, b, stride, pad }, rg))
    }

    /// Batch norm with batch statistics. Returns the output and the
    /// (mean, biased variance, count) so callers can track running stats.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>, usize)> {
        let (n, ..) = self.value(x).dims4()?;
        if n < 2 {
            return Err(Error::Precondition(
                "batch norm in train mode needs a batch of at least 2".into(),
            ));
        }
        let (mean, var, m) = ops::channel_stats(self.value(x))?;
        let (y, cache) = ops::batchnorm_apply(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            &mean,
            &var,
            eps,
            true,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, cache }, rg);
        Ok((v, mean, var, m))
    }

    /// Batch norm with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (y, cache) = ops::batchnorm_apply(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mean,
            var,
            eps,
            false,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(y, Op::BatchNorm { x, gamma, beta, cache }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        let rg = self.rg(x);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::max_pool2(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::MaxPool { x, argmax }, rg))
    }

    /// Replicate a 1-channel batch to 3 channels and standardise each.
    pub fn gray_to_rgb(&mut self, x: Var, mean: [f64; 3], std: [f64; 3]) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("gray_to_rgb expects 1 channel, got {c}")));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Precondition("standardisation std must be positive".into()));
        }
        let inv_std = std.map(|s| 1.0 / s);
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * 3 * hw);
        for b in 0..n {
            for ch in 0..3 {
                out.extend(
                    src[b * hw..(b + 1) * hw]
                        .iter()
                        .map(|v| T::of((v.f() - mean[ch]) * inv_std[ch])),
                );
            }
        }
        let y = Tensor::new(vec![n, 3, h, w], out)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::GrayToRgb { x, inv_std }, rg))
    }

    /// Record a scalar `value = f(x)` with its precomputed gradient `df/dx`.
    pub fn reduce(&mut self, x: Var, value: f64, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::Shape("reduce: gradient shape differs from input".into()));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(T::of(value)), Op::Reduce { x, grad }, rg))
    }

    /// Back-propagate from `root`, seeded with ones. Only leaf gradients
    /// are retained; intermediate gradients are released as the sweep passes.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut acc = |v: Var, t: Tensor<T>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => e.add_assign(&t),
                    slot => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, b, stride, pad } => {
                    let r = ops::conv2d_backward(self.value(*x), self.value(*w), &g, *stride, *pad, self.rg(*x))?;
                    if let Some(dx) = r.dx {
                        acc(*x, dx);
                    }
                    acc(*w, r.dw);
                    if let Some(b) = b {
                        acc(*b, r.db);
                    }
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let (dx, dg, db) = ops::batchnorm_backward(cache, self.value(*gamma), &g)?;
                    acc(*x, dx);
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                Op::Relu(x) => acc(*x, ops::relu_backward(self.value(*x), &g)),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::MaxPool { x, argmax } => acc(*x, ops::max_pool2_backward(self.value(*x).shape(), argmax, &g)),
                Op::GrayToRgb { x, inv_std } => {
                    let (n, _, h, w) = g.dims4()?;
                    let hw = h * w;
                    let mut dx = vec![T::zero(); n * hw];
                    for b in 0..n {
                        for (ch, s) in inv_std.iter().enumerate() {
                            let src = &g.data()[(b * 3 + ch) * hw..(b * 3 + ch + 1) * hw];
                            for (d, v) in dx[b * hw..(b + 1) * hw].iter_mut().zip(src) {
                                *d = T::of(d.f() + v.f() * s);
                            }
                        }
                    }
                    acc(*x, Tensor::new(vec![n, 1, h, w], dx)?);
                }
                Op::Reduce { x, grad } => {
                    let up = g.item();
                    let data = grad.data().iter().map(|&v| v * up).collect();
                    acc(*x, Tensor::new(grad.shape().to_vec(), data)?);
                }
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}


#[cfg(test)]
mod tests {
    use super::gradcheck::{check, project};
    use super::*;
    use crate::rng::PixelNormals;
    use proptest::prelude::*;

    fn randn(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let n = shape.iter().product();
        let z = PixelNormals::new(seed, 3)
            .take(n)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        Tensor::new(shape.to_vec(), z).unwrap()
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let x = randn(&[1, 2, 6, 6], 1, 1.0);
        let w = randn(&[3, 2, 3, 3], 2, 0.5);
        let b = randn(&[3], 3, 0.5);
        let err = check(
            &[x, w, b],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
                project(t, y, 9)
            },
            1e-3,
            1e-6,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_grad_leaf_is_skipped() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(randn(&[1, 1, 4, 4], 1, 1.0), false);
        let w = t.leaf(randn(&[1, 1, 3, 3], 2, 1.0), true);
        let y = t.conv2d(x, w, None, 1, 1).unwrap();
        let s = project(&mut t, y, 3);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).is_none());
        assert!(g.get(w).is_some());
        assert!(g.get(y).is_none());
    }

    #[test]
    fn batchnorm_identity_on_standardised_input() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(
            Tensor::new(vec![2, 1, 1, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap(),
            false,
        );
        let g = t.leaf(Tensor::full(&[1], 1.0), false);
        let b = t.leaf(Tensor::zeros(&[1]), false);
        let (y, ..) = t.batchnorm_train(x, g, b, 1e-5).unwrap();
        for (a, e) in t.value(y).data().iter().zip(t.value(x).data()) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_batch_of_one_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(&[1, 2, 3, 3]), false);
        let g = t.leaf(Tensor::full(&[2], 1.0), false);
        let b = t.leaf(Tensor::zeros(&[2]), false);
        assert!(matches!(t.batchnorm_train(x, g, b, 1e-5), Err(Error::Precondition(_))));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap(), true);
        let y = t.max_pool2(x).unwrap();
        assert_eq!(t.value(y).data(), &[4.0]);
        let s = project(&mut t, y, 1);
        let g = t.backward(s).unwrap();
        let gx = g.get(x).unwrap().data();
        assert_eq!(gx[0], 0.0);
        assert!(gx[1] != 0.0);
    }

    #[test]
    fn gray_to_rgb_values() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(&[1, 1, 1, 1], 0.5), true);
        let y = t.gray_to_rgb(x, [0.5, 0.0, 1.0], [1.0, 0.5, 2.0]).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 1.0, -0.25]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(50))]

        #[test]
        fn every_layer_passes_gradcheck(
            n in 2usize..4, c in 1usize..4, h in 3usize..7, w in 3usize..7, seed in 0u64..10_000,
        ) {
            let x = randn(&[n, c, h, w], seed, 1.0);
            let x2 = randn(&[n, c, h, w], seed + 1, 1.0);
            let wt = randn(&[2, c, 3, 3], seed + 2, 0.5);
            let bias = randn(&[2], seed + 3, 0.5);
            let gamma = randn(&[c], seed + 4, 1.0);
            let beta = randn(&[c], seed + 5, 1.0);
            let tol = 1e-4;

            let e = check(&[x.clone(), wt, bias], |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap();
                project(t, y, seed)
            }, 1e-4, 1e-6);
            prop_assert!(e < tol, "conv {e}");

            let e = check(&[x.clone(), gamma.clone(), beta.clone()], |t, v| {
                let (y, ..) = t.batchnorm_train(v[0], v[1], v[2], 1e-5).unwrap();
                project(t, y, seed)
            }, 1e-4, 1e-6);
            prop_assert!(e < tol, "bn train {e}");

            let mean: Vec<f64> = (0..c).map(|i| 0.1 * i as f64).collect();
            let var: Vec<f64> = (0..c).map(|i| 1.0 + i as f64).collect();
            let e = check(&[x.clone(), gamma, beta], |t, v| {
                let y = t.batchnorm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap();
                project(t, y, seed)
            }, 1e-4, 1e-6);
            prop_assert!(e < tol, "bn eval {e}");

            // Keep relu inputs away from the kink.
            let xr = Tensor::new(
                x.shape().to_vec(),
                x.data().iter().map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { *v }).collect(),
            ).unwrap();
            let e = check(&[xr], |t, v| {
                let y = t.relu(v[0]);
                project(t, y, seed)
            }, 1e-4, 1e-6);
            prop_assert!(e < tol, "relu {e}");

            let e = check(&[x.clone(), x2], |t, v| {
                let y = t.add(v[0], v[1]).unwrap();
                project(t, y, seed)
            }, 1e-4, 1e-6);
            prop_assert!(e < tol, "add {e}");

            let e = check(std::slice::from_ref(&x), |t, v| {
                let y = t.max_pool2(v[0]).unwrap();
                project(t, y, seed)
            }, 1e-6, 1e-6);
            prop_assert!(e < tol, "pool {e}");

            let g1 = x.data()[..n * h * w].to_vec();
            let xg = Tensor::new(vec![n, 1, h, w], g1).unwrap();
            let e = check(&[xg], |t, v| {
                let y = t.gray_to_rgb(v[0], [0.4, 0.45, 0.5], [0.2, 0.25, 0.3]).unwrap();
                project(t, y, seed)
            }, 1e-4, 1e-6);
            prop_assert!(e < tol, "gray_to_rgb {e}");
        }
    }
}
