use std::sync::Arc;

use super::{Real, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
///
/// Handles are only meaningful for the graph that issued them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Constant,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Silu {
        a: Var,
    },
    SoftmaxLast {
        a: Var,
    },
    LayerNorm {
        a: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    ConcatLast {
        parts: Vec<Var>,
    },
    Reshape {
        a: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of executed operations, in execution (topological) order.
///
/// Recording happens eagerly: every op computes its value immediately. A
/// single [`Graph::backward`] call consumes the tape.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensors have rank >= 1")
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn live(&self) -> Result<(), TensorError> {
        if self.consumed {
            Err(TensorError::GraphConsumed)
        } else {
            Ok(())
        }
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    /// Snapshot of a recorded value, detached from the tape.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_shared(n.shape.clone(), Arc::clone(&n.value))
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    /// Records a tensor. It participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared(),
            op: if t.requires_grad() {
                Op::Leaf
            } else {
                Op::Constant
            },
            needs_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor that never receives gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared(),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(TensorError::Rank {
                op: "matmul",
                expected: 2,
                shape: if sa.len() != 2 {
                    sa.to_vec()
                } else {
                    sb.to_vec()
                },
            });
        }
        let (m, k, k2, n) = (sa[0], sa[1], sb[0], sb[1]);
        if k != k2 {
            return Err(TensorError::InnerMismatch {
                op: "matmul",
                left: k,
                right: k2,
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
        );
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }, ng))
    }

    /// Batched product of `[B, m, k]` with `[B, k, n]`, or with `[B, n, k]`
    /// transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        self.live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 {
            return Err(TensorError::Rank {
                op: "bmm",
                expected: 3,
                shape: if sa.len() != 3 { sa } else { sb },
            });
        }
        if sa[0] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if k != kb {
            return Err(TensorError::InnerMismatch {
                op: "bmm",
                left: k,
                right: kb,
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![T::zero(); batch * m * n];
        let b_strides = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &bv[i * k * n..(i + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(
            vec![batch, m, n],
            out,
            Op::BatchMatMul { a, b, trans_b },
            ng,
        ))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        self.live()?;
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.grad_of(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a bias vector to every row (leading-batch broadcast).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        self.live()?;
        let n = last_dim(self.shape(a));
        if self.value(bias).len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let bv = self.value(bias);
        let out = self
            .value(a)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &b)| x + b))
            .collect();
        let ng = self.grad_of(&[a, bias]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddRow { a, bias }, ng))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, TensorError> {
        self.live()?;
        let out = self.value(a).iter().map(|&x| x * factor).collect();
        let ng = self.grad_of(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Scale { a, factor }, ng))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.live()?;
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let ng = self.grad_of(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Silu { a }, ng))
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var, TensorError> {
        self.live()?;
        let n = last_dim(self.shape(a));
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks_exact(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &x in row {
                let e = (x - max).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / total);
        }
        let ng = self.grad_of(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::SoftmaxLast { a }, ng))
    }

    /// Normalizes each row over the last axis to zero mean and unit
    /// variance. No learned affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var, TensorError> {
        self.live()?;
        let n = last_dim(self.shape(a));
        let nt = T::from_usize(n).expect("width representable");
        let mut xhat = Vec::with_capacity(self.value(a).len());
        let mut inv_std = Vec::with_capacity(self.value(a).len() / n);
        for row in self.value(a).chunks_exact(n) {
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            xhat.extend(row.iter().map(|&x| (x - mean) * inv));
        }
        let ng = self.grad_of(&[a]);
        let shape = self.shape(a).to_vec();
        let value = xhat.clone();
        Ok(self.push(shape, value, Op::LayerNorm { a, xhat, inv_std }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.live()?;
        let s = self.value(a).iter().copied().sum();
        let ng = self.grad_of(&[a]);
        Ok(self.push(vec![1], vec![s], Op::Sum { a }, ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.live()?;
        let n = T::from_usize(self.value(a).len()).expect("length representable");
        let s = self.value(a).iter().copied().sum::<T>() / n;
        let ng = self.grad_of(&[a]);
        Ok(self.push(vec![1], vec![s], Op::Mean { a }, ng))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        self.live()?;
        let Some(&first) = parts.first() else {
            return Err(TensorError::EmptyConcat);
        };
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| last_dim(self.shape(p))).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ng = self.grad_of(parts);
        Ok(self.push(
            shape,
            out,
            Op::ConcatLast {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.live()?;
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Arc::clone(&self.node(a).value);
        let ng = self.grad_of(&[a]);
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            op: Op::Reshape { a },
            needs_grad: ng,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Mean squared error, averaged over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Reverse pass from a scalar. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        self.live()?;
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        // Intermediate gradients are not part of the result; keep leaves only.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.node(*a).needs_grad {
                    // dA = dC * B^T
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        self.value(*b),
                        (1, n as isize),
                        T::zero(),
                        &mut da,
                    );
                    accumulate(grads, *a, da);
                }
                if self.node(*b).needs_grad {
                    // dB = A^T * dC
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        self.value(*a),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        T::zero(),
                        &mut db,
                    );
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.node(*a).needs_grad {
                    let mut da = vec![T::zero(); batch * m * k];
                    for s in 0..batch {
                        // dA = dC * B^T, where B is [k, n] (or stored [n, k]).
                        let bs = if *trans_b {
                            (k as isize, 1)
                        } else {
                            (1, n as isize)
                        };
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[s * m * n..(s + 1) * m * n],
                            (n as isize, 1),
                            &bv[s * k * n..(s + 1) * k * n],
                            bs,
                            T::zero(),
                            &mut da[s * m * k..(s + 1) * m * k],
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.node(*b).needs_grad {
                    let mut db = vec![T::zero(); batch * k * n];
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let a_s = &av[s * m * k..(s + 1) * m * k];
                        let out = &mut db[s * k * n..(s + 1) * k * n];
                        if *trans_b {
                            // stored B is [n, k]: dB = dC^T * A
                            T::gemm(
                                n,
                                m,
                                k,
                                gs,
                                (1, n as isize),
                                a_s,
                                (k as isize, 1),
                                T::zero(),
                                out,
                            );
                        } else {
                            // dB = A^T * dC
                            T::gemm(
                                k,
                                m,
                                n,
                                a_s,
                                (1, k as isize),
                                gs,
                                (n as isize, 1),
                                T::zero(),
                                out,
                            );
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                accumulate_if(self, grads, *a, || g.to_vec());
                accumulate_if(self, grads, *b, || g.to_vec());
            }
            Op::Sub { a, b } => {
                accumulate_if(self, grads, *a, || g.to_vec());
                accumulate_if(self, grads, *b, || g.iter().map(|&v| -v).collect());
            }
            Op::AddRow { a, bias } => {
                accumulate_if(self, grads, *a, || g.to_vec());
                accumulate_if(self, grads, *bias, || {
                    let n = self.value(*bias).len();
                    let mut acc = vec![T::zero(); n];
                    for row in g.chunks_exact(n) {
                        acc.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
                    }
                    acc
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate_if(self, grads, *a, || {
                    g.iter().zip(bv).map(|(&d, &y)| d * y).collect()
                });
                accumulate_if(self, grads, *b, || {
                    g.iter().zip(av).map(|(&d, &x)| d * x).collect()
                });
            }
            Op::Scale { a, factor } => {
                accumulate_if(self, grads, *a, || g.iter().map(|&d| d * *factor).collect());
            }
            Op::Silu { a } => {
                let av = self.value(*a);
                accumulate_if(self, grads, *a, || {
                    g.iter()
                        .zip(av)
                        .map(|(&d, &x)| {
                            let s = sigmoid(x);
                            d * (s + x * s * (T::one() - s))
                        })
                        .collect()
                });
            }
            Op::SoftmaxLast { a } => {
                let n = last_dim(&node.shape);
                let y = &node.value;
                accumulate_if(self, grads, *a, || {
                    let mut dx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks_exact(n).zip(g.chunks_exact(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&p, &d)| p * (d - dot)));
                    }
                    dx
                });
            }
            Op::LayerNorm { a, xhat, inv_std } => {
                let n = last_dim(&node.shape);
                let nt = T::from_usize(n).expect("width representable");
                accumulate_if(self, grads, *a, || {
                    let mut dx = Vec::with_capacity(xhat.len());
                    for ((xr, gr), &inv) in xhat.chunks_exact(n).zip(g.chunks_exact(n)).zip(inv_std)
                    {
                        let sum_g: T = gr.iter().copied().sum();
                        let sum_gx: T = gr.iter().zip(xr).map(|(&d, &x)| d * x).sum();
                        dx.extend(
                            gr.iter()
                                .zip(xr)
                                .map(|(&d, &x)| inv / nt * (nt * d - sum_g - x * sum_gx)),
                        );
                    }
                    dx
                });
            }
            Op::Sum { a } => {
                let len = self.value(*a).len();
                accumulate_if(self, grads, *a, || vec![g[0]; len]);
            }
            Op::Mean { a } => {
                let len = self.value(*a).len();
                let n = T::from_usize(len).expect("length representable");
                accumulate_if(self, grads, *a, || vec![g[0] / n; len]);
            }
            Op::ConcatLast { parts } => {
                let total = last_dim(&node.shape);
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = last_dim(self.shape(p));
                    accumulate_if(self, grads, p, || {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        d
                    });
                    offset += w;
                }
            }
            Op::Reshape { a } => {
                accumulate_if(self, grads, *a, || g.to_vec());
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
        None => grads[v.0] = Some(delta),
    }
}

fn accumulate_if<T: Real>(
    graph: &Graph<T>,
    grads: &mut [Option<Vec<T>>],
    v: Var,
    delta: impl FnOnce() -> Vec<T>,
) {
    if graph.node(v).needs_grad {
        accumulate(grads, v, delta());
    }
}
