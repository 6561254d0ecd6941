//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! All values are f64 so finite-difference checks hold to tight tolerances.
//! A node only stores a backward closure while the tape is recording and the
//! result actually depends on a gradient-bearing leaf; backward closures skip
//! work for parents that do not need gradients, which is what keeps frozen
//! base weights cheap during adapter training.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not cover {} elements",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: vec![1], data: vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Dimension pair of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a matrix, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<
    dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>> + Send + Sync,
>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// Wengert list of operations; build a fresh one per forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Tape {
    /// Tape that records backward closures for gradient-bearing paths.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
    }

    /// Forward-only tape: same numerics, no backward bookkeeping.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient-bearing input.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        self.push(value, Vec::new(), None, requires_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Vec::new(), None, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var {
        let keep = self.recording && requires_grad;
        self.nodes.push(Node {
            value,
            parents: if keep { parents } else { Vec::new() },
            backward: if keep { backward } else { None },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn op(
        &mut self,
        value: Tensor,
        parents: &[Var],
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>
            + Send
            + Sync
            + 'static,
    ) -> Var {
        let requires = self.needs(parents);
        let backward: Option<BackwardFn> = if self.recording && requires {
            Some(Box::new(backward))
        } else {
            None
        };
        let parent_ids = parents.iter().map(|v| v.0).collect();
        self.push(value, parent_ids, backward, requires)
    }

    /// Backpropagates from a scalar root, returning per-leaf gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.recording {
            return Err(Error::Input("cannot backpropagate on an inference tape".into()));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Input(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_needs: Vec<bool> =
                node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let contribs = backward(&g, &parent_values, &node.value, &parent_needs);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (&p, contrib) in node.parents.iter().zip(contribs) {
                if let Some(c) = contrib {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&c),
                        slot => *slot = Some(c),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape.clone(), data);
        self.op(value, &[a, b], |g, _, _, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| g.clone()),
            ]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape.clone(), data);
        self.op(value, &[a, b], |g, _, _, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| {
                    Tensor::new(g.shape.clone(), g.data.iter().map(|x| -x).collect())
                }),
            ]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape.clone(), data);
        self.op(value, &[a, b], |g, parents, _, needs| {
            vec![
                needs[0].then(|| {
                    Tensor::new(
                        g.shape.clone(),
                        g.data.iter().zip(&parents[1].data).map(|(g, y)| g * y).collect(),
                    )
                }),
                needs[1].then(|| {
                    Tensor::new(
                        g.shape.clone(),
                        g.data.iter().zip(&parents[0].data).map(|(g, x)| g * x).collect(),
                    )
                }),
            ]
        })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "div shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x / y).collect();
        let value = Tensor::new(ta.shape.clone(), data);
        self.op(value, &[a, b], |g, parents, _, needs| {
            vec![
                needs[0].then(|| {
                    Tensor::new(
                        g.shape.clone(),
                        g.data.iter().zip(&parents[1].data).map(|(g, y)| g / y).collect(),
                    )
                }),
                needs[1].then(|| {
                    Tensor::new(
                        g.shape.clone(),
                        g.data
                            .iter()
                            .zip(parents[0].data.iter().zip(&parents[1].data))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    )
                }),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x * k).collect());
        self.op(value, &[a], move |g, _, _, needs| {
            vec![needs[0].then(|| {
                Tensor::new(g.shape.clone(), g.data.iter().map(|x| x * k).collect())
            })]
        })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Elementwise power; inputs must stay positive when `p` is fractional.
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x.powf(p)).collect());
        self.op(value, &[a], move |g, parents, _, needs| {
            vec![needs[0].then(|| {
                Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&parents[0].data)
                        .map(|(g, x)| g * p * x.powf(p - 1.0))
                        .collect(),
                )
            })]
        })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x.tanh()).collect());
        self.op(value, &[a], |g, _, out, needs| {
            vec![needs[0].then(|| {
                Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&out.data)
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                )
            })]
        })
    }

    /// Elementwise natural log; inputs must be positive.
    pub fn ln(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert!(
            ta.data.iter().all(|x| *x > 0.0),
            "ln input must be positive"
        );
        let value = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x.ln()).collect());
        self.op(value, &[a], |g, parents, _, needs| {
            vec![needs[0].then(|| {
                Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&parents[0].data)
                        .map(|(g, x)| g / x)
                        .collect(),
                )
            })]
        })
    }

    /// Elementwise absolute value; subgradient 0 at exactly 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape.clone(), ta.data.iter().map(|x| x.abs()).collect());
        self.op(value, &[a], |g, parents, _, needs| {
            vec![needs[0].then(|| {
                Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&parents[0].data)
                        .map(|(g, x)| {
                            if *x == 0.0 {
                                0.0
                            } else {
                                g * x.signum()
                            }
                        })
                        .collect(),
                )
            })]
        })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(
            ta.shape.clone(),
            ta.data.iter().map(|x| x * sigmoid(*x)).collect(),
        );
        self.op(value, &[a], |g, parents, _, needs| {
            vec![needs[0].then(|| {
                Tensor::new(
                    g.shape.clone(),
                    g.data
                        .iter()
                        .zip(&parents[0].data)
                        .map(|(g, x)| {
                            let s = sigmoid(*x);
                            g * (s + x * s * (1.0 - s))
                        })
                        .collect(),
                )
            })]
        })
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor::scalar(ta.data.iter().sum());
        self.op(value, &[a], |g, parents, _, needs| {
            vec![needs[0].then(|| {
                Tensor::new(
                    parents[0].shape.clone(),
                    vec![g.data[0]; parents[0].numel()],
                )
            })]
        })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = ta.numel() as f64;
        let value = Tensor::scalar(ta.data.iter().sum::<f64>() / n);
        self.op(value, &[a], move |g, parents, _, needs| {
            vec![needs[0].then(|| {
                Tensor::new(
                    parents[0].shape.clone(),
                    vec![g.data[0] / n; parents[0].numel()],
                )
            })]
        })
    }

    /// Column-wise mean of a matrix: [n, d] -> [d].
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (n, d) = self.value(a).dims2();
        let ta = self.value(a);
        let mut data = vec![0.0; d];
        for r in 0..n {
            for c in 0..d {
                data[c] += ta.data[r * d + c];
            }
        }
        for x in &mut data {
            *x /= n as f64;
        }
        self.op(Tensor::vector(data), &[a], move |g, _, _, needs| {
            vec![needs[0].then(|| {
                let mut out = vec![0.0; n * d];
                for r in 0..n {
                    for c in 0..d {
                        out[r * d + c] = g.data[c] / n as f64;
                    }
                }
                Tensor::new(vec![n, d], out)
            })]
        })
    }

    // ---- linear algebra ----

    /// [n, k] x [k, m] -> [n, m].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).dims2();
        let (k2, m) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let value = Tensor::new(
            vec![n, m],
            mm(&self.value(a).data, &self.value(b).data, n, k, m),
        );
        self.op(value, &[a, b], move |g, parents, _, needs| {
            vec![
                needs[0].then(|| {
                    Tensor::new(vec![n, k], mm_nt(&g.data, &parents[1].data, n, m, k))
                }),
                needs[1].then(|| {
                    Tensor::new(vec![k, m], mm_tn(&parents[0].data, &g.data, n, k, m))
                }),
            ]
        })
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_bias_row(&mut self, x: Var, b: Var) -> Var {
        let (n, d) = self.value(x).dims2();
        assert_eq!(self.value(b).shape, vec![d], "bias length mismatch");
        let tb = self.value(b).data.clone();
        let tx = self.value(x);
        let mut data = tx.data.clone();
        for r in 0..n {
            for c in 0..d {
                data[r * d + c] += tb[c];
            }
        }
        self.op(Tensor::new(vec![n, d], data), &[x, b], move |g, _, _, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| {
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            db[c] += g.data[r * d + c];
                        }
                    }
                    Tensor::vector(db)
                }),
            ]
        })
    }

    /// Adds a per-channel offset to a [c, h, w] map.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let shape = self.value(x).shape.clone();
        assert_eq!(shape.len(), 3, "expected [c, h, w]");
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        assert_eq!(self.value(b).shape, vec![c], "channel bias length mismatch");
        let tb = self.value(b).data.clone();
        let mut data = self.value(x).data.clone();
        for ch in 0..c {
            for i in 0..h * w {
                data[ch * h * w + i] += tb[ch];
            }
        }
        self.op(Tensor::new(shape, data), &[x, b], move |g, _, _, needs| {
            vec![
                needs[0].then(|| g.clone()),
                needs[1].then(|| {
                    let mut db = vec![0.0; c];
                    for ch in 0..c {
                        for i in 0..h * w {
                            db[ch] += g.data[ch * h * w + i];
                        }
                    }
                    Tensor::vector(db)
                }),
            ]
        })
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (n, d) = self.value(a).dims2();
        let ta = self.value(a);
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            let row = &ta.data[r * d..(r + 1) * d];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..d {
                let e = (row[c] - max).exp();
                data[r * d + c] = e;
                sum += e;
            }
            for c in 0..d {
                data[r * d + c] /= sum;
            }
        }
        self.op(Tensor::new(vec![n, d], data), &[a], move |g, _, out, needs| {
            vec![needs[0].then(|| {
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let y = &out.data[r * d..(r + 1) * d];
                    let gr = &g.data[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for c in 0..d {
                        dx[r * d + c] = y[c] * (gr[c] - dot);
                    }
                }
                Tensor::new(vec![n, d], dx)
            })]
        })
    }

    /// Row-wise layer normalization with learnable gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (n, d) = self.value(x).dims2();
        assert_eq!(self.value(gamma).shape, vec![d]);
        assert_eq!(self.value(beta).shape, vec![d]);
        let tx = self.value(x);
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        for r in 0..n {
            let row = &tx.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for c in 0..d {
                xhat[r * d + c] = (row[c] - mean) * s;
            }
        }
        let tg = &self.value(gamma).data;
        let tb = &self.value(beta).data;
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] = xhat[r * d + c] * tg[c] + tb[c];
            }
        }
        self.op(
            Tensor::new(vec![n, d], out),
            &[x, gamma, beta],
            move |g, parents, _, needs| {
                let gamma = &parents[1].data;
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; n * d];
                    for r in 0..n {
                        let gg: Vec<f64> = (0..d).map(|c| g.data[r * d + c] * gamma[c]).collect();
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mean_gg = gg.iter().sum::<f64>() / d as f64;
                        let mean_ggx = gg.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            dx[r * d + c] = inv_std[r] * (gg[c] - mean_gg - xh[c] * mean_ggx);
                        }
                    }
                    Tensor::new(vec![n, d], dx)
                });
                let dgamma = needs[1].then(|| {
                    let mut dg = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            dg[c] += g.data[r * d + c] * xhat[r * d + c];
                        }
                    }
                    Tensor::vector(dg)
                });
                let dbeta = needs[2].then(|| {
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for c in 0..d {
                            db[c] += g.data[r * d + c];
                        }
                    }
                    Tensor::vector(db)
                });
                vec![dx, dgamma, dbeta]
            },
        )
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.numel(), shape.iter().product::<usize>(), "reshape element mismatch");
        let old_shape = ta.shape.clone();
        let value = Tensor::new(shape, ta.data.clone());
        self.op(value, &[a], move |g, _, _, needs| {
            vec![needs[0].then(|| Tensor::new(old_shape.clone(), g.data.clone()))]
        })
    }

    /// Matrix transpose: [n, d] -> [d, n].
    pub fn transpose(&mut self, a: Var) -> Var {
        let (n, d) = self.value(a).dims2();
        let ta = self.value(a);
        let mut data = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                data[c * n + r] = ta.data[r * d + c];
            }
        }
        self.op(Tensor::new(vec![d, n], data), &[a], move |g, _, _, needs| {
            vec![needs[0].then(|| {
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    for c in 0..d {
                        dx[r * d + c] = g.data[c * n + r];
                    }
                }
                Tensor::new(vec![n, d], dx)
            })]
        })
    }

    /// Stacks same-length vectors into the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "cannot stack zero rows");
        let d = self.value(rows[0]).numel();
        let n = rows.len();
        let mut data = Vec::with_capacity(n * d);
        for &r in rows {
            let t = self.value(r);
            assert_eq!(t.numel(), d, "stack row length mismatch");
            data.extend_from_slice(&t.data);
        }
        let shapes: Vec<Vec<usize>> = rows.iter().map(|&r| self.value(r).shape.clone()).collect();
        self.op(Tensor::new(vec![n, d], data), rows, move |g, _, _, needs| {
            (0..n)
                .map(|i| {
                    needs[i].then(|| {
                        Tensor::new(shapes[i].clone(), g.data[i * d..(i + 1) * d].to_vec())
                    })
                })
                .collect()
        })
    }

    /// Vertically concatenates two matrices with equal column counts.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (na, d) = self.value(a).dims2();
        let (nb, db) = self.value(b).dims2();
        assert_eq!(d, db, "concat column mismatch");
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(&self.value(b).data);
        self.op(Tensor::new(vec![na + nb, d], data), &[a, b], move |g, _, _, needs| {
            vec![
                needs[0].then(|| Tensor::new(vec![na, d], g.data[..na * d].to_vec())),
                needs[1].then(|| Tensor::new(vec![nb, d], g.data[na * d..].to_vec())),
            ]
        })
    }

    /// Contiguous row slice of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (n, d) = self.value(a).dims2();
        assert!(start + len <= n, "slice out of range");
        let data = self.value(a).data[start * d..(start + len) * d].to_vec();
        self.op(Tensor::new(vec![len, d], data), &[a], move |g, _, _, needs| {
            vec![needs[0].then(|| {
                let mut dx = vec![0.0; n * d];
                dx[start * d..(start + len) * d].copy_from_slice(&g.data);
                Tensor::new(vec![n, d], dx)
            })]
        })
    }

    /// Channel concatenation of two [c, h, w] maps.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let sa = self.value(a).shape.clone();
        let sb = self.value(b).shape.clone();
        assert_eq!(sa.len(), 3);
        assert_eq!(&sa[1..], &sb[1..], "spatial dims must match");
        let (ca, cb) = (sa[0], sb[0]);
        let hw = sa[1] * sa[2];
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(&self.value(b).data);
        let shape = vec![ca + cb, sa[1], sa[2]];
        self.op(Tensor::new(shape, data), &[a, b], move |g, _, _, needs| {
            vec![
                needs[0].then(|| {
                    Tensor::new(vec![ca, sa[1], sa[2]], g.data[..ca * hw].to_vec())
                }),
                needs[1].then(|| {
                    Tensor::new(vec![cb, sa[1], sa[2]], g.data[ca * hw..].to_vec())
                }),
            ]
        })
    }

    /// [c, h, w] -> [h*w, c] token layout.
    pub fn chw_to_tokens(&mut self, a: Var) -> Var {
        let s = self.value(a).shape.clone();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        let ta = self.value(a);
        let mut data = vec![0.0; hw * c];
        for ch in 0..c {
            for i in 0..hw {
                data[i * c + ch] = ta.data[ch * hw + i];
            }
        }
        self.op(Tensor::new(vec![hw, c], data), &[a], move |g, _, _, needs| {
            vec![needs[0].then(|| {
                let mut dx = vec![0.0; c * hw];
                for ch in 0..c {
                    for i in 0..hw {
                        dx[ch * hw + i] = g.data[i * c + ch];
                    }
                }
                Tensor::new(vec![c, h, w], dx)
            })]
        })
    }

    /// [h*w, c] tokens back to a [c, h, w] map.
    pub fn tokens_to_chw(&mut self, a: Var, h: usize, w: usize) -> Var {
        let (n, c) = self.value(a).dims2();
        assert_eq!(n, h * w, "token count must equal h*w");
        let ta = self.value(a);
        let mut data = vec![0.0; c * n];
        for ch in 0..c {
            for i in 0..n {
                data[ch * n + i] = ta.data[i * c + ch];
            }
        }
        self.op(Tensor::new(vec![c, h, w], data), &[a], move |g, _, _, needs| {
            vec![needs[0].then(|| {
                let mut dx = vec![0.0; n * c];
                for ch in 0..c {
                    for i in 0..n {
                        dx[i * c + ch] = g.data[ch * n + i];
                    }
                }
                Tensor::new(vec![n, c], dx)
            })]
        })
    }

    // ---- convolution and resampling ----

    /// 2-D convolution of a [cin, h, w] map with [cout, cin, kh, kw] weights.
    ///
    /// Runs as im2col plus matmul; the backward pass rebuilds the column
    /// buffer instead of storing it.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape.clone();
        let ws = self.value(w).shape.clone();
        assert_eq!(xs.len(), 3, "conv input must be [c, h, w]");
        assert_eq!(ws.len(), 4, "conv weight must be [cout, cin, kh, kw]");
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, cin2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cin, cin2, "conv channel mismatch");
        assert_eq!(self.value(b).shape, vec![cout], "conv bias length mismatch");
        assert!(stride >= 1);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            cin, h, w: wd, cout, kh, kw, stride, pad, oh, ow,
        };
        let cols = im2col(&self.value(x).data, &geom);
        let ck = cin * kh * kw;
        let mut out = mm(&self.value(w).data, &cols, cout, ck, oh * ow);
        let tb = &self.value(b).data;
        for co in 0..cout {
            for i in 0..oh * ow {
                out[co * oh * ow + i] += tb[co];
            }
        }
        self.op(
            Tensor::new(vec![cout, oh, ow], out),
            &[x, w, b],
            move |g, parents, _, needs| {
                let ck = geom.cin * geom.kh * geom.kw;
                let ohw = geom.oh * geom.ow;
                let dx = needs[0].then(|| {
                    // dcols = W^T (as [ck, cout]) x g_mat [cout, ohw]
                    let dcols = mm_tn(&parents[1].data, &g.data, geom.cout, ck, ohw);
                    Tensor::new(
                        vec![geom.cin, geom.h, geom.w],
                        col2im(&dcols, &geom),
                    )
                });
                let dw = needs[1].then(|| {
                    let cols = im2col(&parents[0].data, &geom);
                    Tensor::new(
                        vec![geom.cout, geom.cin, geom.kh, geom.kw],
                        mm_nt(&g.data, &cols, geom.cout, ohw, ck),
                    )
                });
                let db = needs[2].then(|| {
                    let mut db = vec![0.0; geom.cout];
                    for co in 0..geom.cout {
                        for i in 0..ohw {
                            db[co] += g.data[co * ohw + i];
                        }
                    }
                    Tensor::vector(db)
                });
                vec![dx, dw, db]
            },
        )
    }

    /// Nearest-neighbour 2x upsampling of a [c, h, w] map.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let s = self.value(a).shape.clone();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let ta = self.value(a);
        let mut data = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    data[ch * 4 * h * w + y * 2 * w + x] =
                        ta.data[ch * h * w + (y / 2) * w + x / 2];
                }
            }
        }
        self.op(Tensor::new(vec![c, 2 * h, 2 * w], data), &[a], move |g, _, _, needs| {
            vec![needs[0].then(|| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dx[ch * h * w + (y / 2) * w + x / 2] +=
                                g.data[ch * 4 * h * w + y * 2 * w + x];
                        }
                    }
                }
                Tensor::new(vec![c, h, w], dx)
            })]
        })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-leaf gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ck = g.cin * g.kh * g.kw;
    let ohw = g.oh * g.ow;
    let mut cols = vec![0.0; ck * ohw];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        cols[row * ohw + oy * g.ow + ox] =
                            x[ci * g.h * g.w + iy as usize * g.w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ohw = g.oh * g.ow;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        x[ci * g.h * g.w + iy as usize * g.w + ix as usize] +=
                            cols[row * ohw + oy * g.ow + ox];
                    }
                }
            }
        }
    }
    x
}

/// C[n, m] = A[n, k] x B[k, m].
pub(crate) fn mm(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let crow = &mut c[i * m..(i + 1) * m];
            for j in 0..m {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[n, m] = A[n, k] x B[m, k]^T.
pub(crate) fn mm_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            c[i * m + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C[n, m] = A[k, n]^T x B[k, m].
pub(crate) fn mm_tn(a: &[f64], b: &[f64], k: usize, n: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for p in 0..k {
        let brow = &b[p * m..(p + 1) * m];
        for i in 0..n {
            let av = a[p * n + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * m..(i + 1) * m];
            for j in 0..m {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// Passes when an analytic/numeric gradient pair agrees to a 1e-4 relative
/// error, with an absolute floor of 1e-8 for near-zero gradients.
pub fn grad_close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-4 {
        diff < 1e-8
    } else {
        diff / scale < 1e-4
    }
}

/// Central-difference derivative of `f` at coordinate `j` of `base`.
pub fn central_difference(base: &[f64], j: usize, f: &mut dyn FnMut(&[f64]) -> f64) -> f64 {
    let h = 1e-5 * base[j].abs().max(1.0);
    let mut plus = base.to_vec();
    plus[j] += h;
    let mut minus = base.to_vec();
    minus[j] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}
