use rand::Rng;
use rayon::prelude::*;

use super::{BatchNorm1d, Mode, NnError, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    Depthwise { x: Var, w: Var, b: Option<Var>, dilation: usize },
    Pointwise { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<S>, inv_std: Vec<S>, train: bool },
    Relu { x: Var },
    Dropout { x: Var, mask: Vec<S> },
    Add { a: Var, b: Var },
    GlobalAvgPool { x: Var },
    SoftmaxCrossEntropy { logits: Var, probs: Vec<S>, labels: Vec<usize> },
    WeightedSum { x: Var, weights: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

// Fixed reduction granularity so summed weight gradients do not depend on
// the number of worker threads.
const REDUCE_CHUNK: usize = 4;

fn shape_err(msg: String) -> NnError {
    NnError::ShapeMismatch(msg)
}

fn dims3(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, usize), NnError> {
    match *t.shape() {
        [n, c, l] => Ok((n, c, l)),
        ref s => Err(shape_err(format!("{what}: expected N x C x T, got {s:?}"))),
    }
}

/// Offsets `o` of tap `j` and the output range `t` for which `t + o` is in bounds.
fn tap_range(j: usize, half: usize, dilation: usize, len: usize) -> (isize, std::ops::Range<usize>) {
    let o = (j as isize - half as isize) * dilation as isize;
    let lo = (-o).max(0) as usize;
    let hi = (len as isize - o).clamp(0, len as isize) as usize;
    (o, lo.min(hi)..hi)
}

#[derive(Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input or parameter. Gradients are tracked when
    /// `value.requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Shapes of all recorded values in creation order.
    pub fn shapes(&self) -> impl Iterator<Item = &[usize]> {
        self.nodes.iter().map(|n| n.value.shape())
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn val(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Per-channel convolution over time with same padding and stride 1:
    /// `out[n,c,t] = sum_j x[n,c,t + (j - k/2) * dilation] * w[c,j] + b[c]`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var, NnError> {
        let (n, c, len) = dims3(self.value(x), "depthwise input")?;
        let k = match *self.value(w).shape() {
            [wc, k] if wc == c && k > 0 => k,
            ref s => return Err(shape_err(format!("depthwise weight {s:?} for {c} channels"))),
        };
        if let Some(b) = b {
            if self.value(b).shape() != [c] {
                return Err(shape_err(format!("depthwise bias {:?} for {c} channels", self.value(b).shape())));
            }
        }
        if dilation == 0 {
            return Err(shape_err("dilation must be at least 1".into()));
        }
        let half = k / 2;
        let xs = self.val(x);
        let ws = self.val(w);
        let bs = b.map(|b| self.val(b));
        let mut out = vec![S::zero(); n * c * len];
        out.par_chunks_mut(len).enumerate().for_each(|(row, y)| {
            let ch = row % c;
            let xr = &xs[row * len..(row + 1) * len];
            if let Some(bs) = bs {
                y.iter_mut().for_each(|v| *v = bs[ch]);
            }
            for j in 0..k {
                let wj = ws[ch * k + j];
                let (o, range) = tap_range(j, half, dilation, len);
                for t in range {
                    y[t] = y[t] + wj * xr[(t as isize + o) as usize];
                }
            }
        });
        let value = Tensor::new(&[n, c, len], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Depthwise { x, w, b, dilation }, &inputs))
    }

    /// Channel mixing at every time step: `out[n,o,t] = sum_i w[o,i] * x[n,i,t] + b[o]`.
    pub fn pointwise_conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let (n, cin, len) = dims3(self.value(x), "pointwise input")?;
        let cout = match *self.value(w).shape() {
            [o, i] if i == cin => o,
            ref s => return Err(shape_err(format!("pointwise weight {s:?} for {cin} input channels"))),
        };
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(shape_err(format!("pointwise bias {:?} for {cout} outputs", self.value(b).shape())));
            }
        }
        let xs = self.val(x);
        let ws = self.val(w);
        let bs = b.map(|b| self.val(b));
        let mut out = vec![S::zero(); n * cout * len];
        out.par_chunks_mut((cout * len).max(1)).enumerate().for_each(|(s, y)| {
            let xn = &xs[s * cin * len..(s + 1) * cin * len];
            S::gemm(cout, cin, len, ws, (cin as isize, 1), xn, (len as isize, 1), S::zero(), y);
            if let Some(bs) = bs {
                for (o, row) in y.chunks_mut(len).enumerate() {
                    row.iter_mut().for_each(|v| *v = *v + bs[o]);
                }
            }
        });
        let value = Tensor::new(&[n, cout, len], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Pointwise { x, w, b }, &inputs))
    }

    /// Batch normalization over `(N, T)` per channel. Train mode uses batch
    /// statistics and updates the running ones; eval mode uses running ones.
    pub fn batch_norm1d(&mut self, x: Var, bn: &mut BatchNorm1d<S>, mode: Mode) -> Result<Var, NnError> {
        let (n, c, len) = dims3(self.value(x), "batch norm input")?;
        if bn.channels() != c {
            return Err(shape_err(format!("batch norm has {} channels, input {c}", bn.channels())));
        }
        let m = n * len;
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(NnError::DegenerateBatch);
        }
        let gamma = bn.gamma.bind(self);
        let beta = bn.beta.bind(self);
        let xs = self.val(x);
        let eps = S::lit(bn.eps);

        let (mean, var): (Vec<S>, Vec<S>) = if train {
            (0..c)
                .into_par_iter()
                .map(|ch| {
                    let vals = (0..n).flat_map(|s| &xs[(s * c + ch) * len..(s * c + ch + 1) * len]);
                    let mean = vals.clone().copied().sum::<S>() / S::lit(m as f64);
                    let var = vals.map(|&v| (v - mean) * (v - mean)).sum::<S>() / S::lit(m as f64);
                    (mean, var)
                })
                .unzip()
        } else {
            (bn.running_mean.clone(), bn.running_var.clone())
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();

        let g = self.val(gamma);
        let bt = self.val(beta);
        let mut xhat = vec![S::zero(); n * c * len];
        let mut out = vec![S::zero(); n * c * len];
        xhat.par_chunks_mut(len.max(1))
            .zip(out.par_chunks_mut(len.max(1)))
            .enumerate()
            .for_each(|(row, (h, y))| {
                let ch = row % c;
                let xr = &xs[row * len..(row + 1) * len];
                for t in 0..len {
                    h[t] = (xr[t] - mean[ch]) * inv_std[ch];
                    y[t] = g[ch] * h[t] + bt[ch];
                }
            });

        if train {
            let mom = S::lit(bn.momentum);
            let unbias = S::lit(m as f64 / (m - 1) as f64);
            for ch in 0..c {
                bn.running_mean[ch] = (S::one() - mom) * bn.running_mean[ch] + mom * mean[ch];
                bn.running_var[ch] = (S::one() - mom) * bn.running_var[ch] + mom * var[ch] * unbias;
            }
        }
        let value = Tensor::new(&[n, c, len], out)?;
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(S::zero())).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)`; identity in eval
    /// mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Var {
        if mode == Mode::Eval || p <= 0.0 {
            return x;
        }
        let keep = S::lit(1.0 / (1.0 - p));
        let t = self.value(x);
        let mask: Vec<S> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { S::zero() } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("add: {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Mean over the time axis: `N x C x T -> N x C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let (n, c, len) = dims3(self.value(x), "pool input")?;
        if len == 0 {
            return Err(shape_err("cannot pool an empty time axis".into()));
        }
        let scale = S::lit(1.0 / len as f64);
        let data = self.val(x).chunks(len).map(|r| r.iter().copied().sum::<S>() * scale).collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let (n, k) = match *self.value(logits).shape() {
            [n, k] if n == labels.len() && n > 0 => (n, k),
            ref s => return Err(shape_err(format!("logits {s:?} for {} labels", labels.len()))),
        };
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(NnError::LabelOutOfRange { label, classes: k });
        }
        let z = self.val(logits);
        let mut probs = vec![S::zero(); n * k];
        let mut loss = S::zero();
        for (i, (row, p)) in z.chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (pj, &zj) in p.iter_mut().zip(row) {
                *pj = (zj - max).exp();
                sum = sum + *pj;
            }
            p.iter_mut().for_each(|v| *v = *v / sum);
            loss = loss + (sum.ln() + max - row[labels[i]]);
        }
        let value = Tensor::scalar(loss / S::lit(n as f64));
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, probs, labels: labels.to_vec() }, &[logits]))
    }

    /// `sum_i weights[i] * x[i]`, a fixed linear probe used to reduce any
    /// tensor to a scalar loss.
    pub fn weighted_sum(&mut self, x: Var, weights: &[S]) -> Result<Var, NnError> {
        let xs = self.val(x);
        if xs.len() != weights.len() {
            return Err(shape_err(format!("weighted_sum: {} values, {} weights", xs.len(), weights.len())));
        }
        let total = xs.iter().zip(weights).map(|(&a, &w)| a * w).sum();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { x, weights: weights.to_vec() }, &[x]))
    }

    fn accumulate(&mut self, v: Var, g: Vec<S>) {
        let node = &mut self.nodes[v.0].value;
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            None => node.grad = Some(g),
        }
    }

    /// Reverse-mode pass from a scalar `loss`. Fills `grad` on every node
    /// that requires it, then releases the recorded ops; a second call
    /// without a new forward pass fails with [`NnError::NoGraph`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        if loss.0 >= self.nodes.len() || self.nodes.iter().all(|n| matches!(n.op, Op::Leaf)) {
            return Err(NnError::NoGraph);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(shape_err("backward needs a scalar loss".into()));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.nodes[loss.0].value.grad = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].value.grad.take() else { continue };
            self.backward_op(&op, &self.nodes[i].value.shape().to_vec(), &gy)?;
            self.nodes[i].value.grad = Some(gy);
        }
        for node in &mut self.nodes {
            node.op = Op::Leaf;
        }
        Ok(())
    }

    fn backward_op(&mut self, op: &Op<S>, out_shape: &[usize], gy: &[S]) -> Result<(), NnError> {
        match op {
            Op::Leaf => {}
            Op::Depthwise { x, w, b, dilation } => {
                let (n, c, len) = dims3(self.value(*x), "depthwise input")?;
                let k = self.value(*w).shape()[1];
                let half = k / 2;
                let xs = self.val(*x);
                let ws = self.val(*w);
                let dx = self.needs_grad(*x).then(|| {
                    let mut dx = vec![S::zero(); n * c * len];
                    dx.par_chunks_mut(len).enumerate().for_each(|(row, d)| {
                        let ch = row % c;
                        let g = &gy[row * len..(row + 1) * len];
                        for j in 0..k {
                            let wj = ws[ch * k + j];
                            let (o, range) = tap_range(j, half, *dilation, len);
                            for t in range {
                                let src = (t as isize + o) as usize;
                                d[src] = d[src] + g[t] * wj;
                            }
                        }
                    });
                    dx
                });
                let (dw, db): (Vec<Vec<S>>, Vec<S>) = (0..c)
                    .into_par_iter()
                    .map(|ch| {
                        let mut dw = vec![S::zero(); k];
                        let mut db = S::zero();
                        for s in 0..n {
                            let row = s * c + ch;
                            let g = &gy[row * len..(row + 1) * len];
                            let xr = &xs[row * len..(row + 1) * len];
                            db = db + g.iter().copied().sum::<S>();
                            for (j, dwj) in dw.iter_mut().enumerate() {
                                let (o, range) = tap_range(j, half, *dilation, len);
                                let mut acc = S::zero();
                                for t in range {
                                    acc = acc + g[t] * xr[(t as isize + o) as usize];
                                }
                                *dwj = *dwj + acc;
                            }
                        }
                        (dw, db)
                    })
                    .unzip();
                let (x, w, b) = (*x, *w, *b);
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                self.accumulate(w, dw.concat());
                if let Some(b) = b {
                    self.accumulate(b, db);
                }
            }
            Op::Pointwise { x, w, b } => {
                let (n, cin, len) = dims3(self.value(*x), "pointwise input")?;
                let cout = out_shape[1];
                let xs = self.val(*x);
                let ws = self.val(*w);
                let dx = self.needs_grad(*x).then(|| {
                    let mut dx = vec![S::zero(); n * cin * len];
                    dx.par_chunks_mut((cin * len).max(1)).enumerate().for_each(|(s, d)| {
                        let g = &gy[s * cout * len..(s + 1) * cout * len];
                        S::gemm(cin, cout, len, ws, (1, cin as isize), g, (len as isize, 1), S::zero(), d);
                    });
                    dx
                });
                let partials: Vec<Vec<S>> = (0..n)
                    .collect::<Vec<_>>()
                    .par_chunks(REDUCE_CHUNK)
                    .map(|samples| {
                        let mut acc = vec![S::zero(); cout * cin];
                        for &s in samples {
                            let g = &gy[s * cout * len..(s + 1) * cout * len];
                            let xn = &xs[s * cin * len..(s + 1) * cin * len];
                            S::gemm(cout, len, cin, g, (len as isize, 1), xn, (1, len as isize), S::one(), &mut acc);
                        }
                        acc
                    })
                    .collect();
                let mut dw = vec![S::zero(); cout * cin];
                for p in partials {
                    dw.iter_mut().zip(p).for_each(|(a, b)| *a = *a + b);
                }
                let db = b.map(|_| {
                    let mut db = vec![S::zero(); cout];
                    for (row, g) in gy.chunks(len).enumerate() {
                        db[row % cout] = db[row % cout] + g.iter().copied().sum::<S>();
                    }
                    db
                });
                let (x, w, b) = (*x, *w, *b);
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                self.accumulate(w, dw);
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (n, c, len) = dims3(self.value(*x), "batch norm input")?;
                let m = S::lit((n * len) as f64);
                let g = self.val(*gamma).to_vec();
                let (dgamma, dbeta): (Vec<S>, Vec<S>) = (0..c)
                    .into_par_iter()
                    .map(|ch| {
                        let mut sg = S::zero();
                        let mut sb = S::zero();
                        for s in 0..n {
                            let r = (s * c + ch) * len;
                            for t in r..r + len {
                                sg = sg + gy[t] * xhat[t];
                                sb = sb + gy[t];
                            }
                        }
                        (sg, sb)
                    })
                    .unzip();
                let dx = self.needs_grad(*x).then(|| {
                    let mut dx = vec![S::zero(); n * c * len];
                    dx.par_chunks_mut(len.max(1)).enumerate().for_each(|(row, d)| {
                        let ch = row % c;
                        let r = row * len;
                        for t in 0..len {
                            d[t] = if *train {
                                g[ch] * inv_std[ch] / m * (m * gy[r + t] - dbeta[ch] - xhat[r + t] * dgamma[ch])
                            } else {
                                g[ch] * inv_std[ch] * gy[r + t]
                            };
                        }
                    });
                    dx
                });
                let (x, gamma, beta) = (*x, *gamma, *beta);
                if let Some(dx) = dx {
                    self.accumulate(x, dx);
                }
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::Relu { x } => {
                let dx = self
                    .val(*x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| if v > S::zero() { g } else { S::zero() })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = gy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(*x, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, gy.to_vec());
                self.accumulate(*b, gy.to_vec());
            }
            Op::GlobalAvgPool { x } => {
                let len = self.value(*x).shape()[2];
                let scale = S::lit(1.0 / len as f64);
                let dx = gy.iter().flat_map(|&g| std::iter::repeat_n(g * scale, len)).collect();
                self.accumulate(*x, dx);
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let k = self.value(*logits).shape()[1];
                let scale = gy[0] / S::lit(labels.len() as f64);
                let mut dz: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    dz[i * k + l] = dz[i * k + l] - scale;
                }
                self.accumulate(*logits, dz);
            }
            Op::WeightedSum { x, weights } => {
                let dx = weights.iter().map(|&w| w * gy[0]).collect();
                self.accumulate(*x, dx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn depthwise_identity_kernels() {
        let x: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let mut tape = Tape::new();
        let xv = leaf(&mut tape, &[1, 2, 5], x.clone());
        let w1 = leaf(&mut tape, &[2, 1], vec![1.0, 1.0]);
        let y = tape.depthwise_conv1d(xv, w1, None, 1).unwrap();
        assert_eq!(tape.value(y).data(), &x[..]);
        let w3 = leaf(&mut tape, &[2, 3], vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        let y = tape.depthwise_conv1d(xv, w3, None, 2).unwrap();
        assert_eq!(tape.value(y).data(), &x[..]);
    }

    #[test]
    fn pointwise_identity_and_sum() {
        let x: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let mut tape = Tape::new();
        let xv = leaf(&mut tape, &[1, 2, 3], x.clone());
        let eye = leaf(&mut tape, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = tape.pointwise_conv1d(xv, eye, None).unwrap();
        assert_eq!(tape.value(y).data(), &x[..]);
        let ones = leaf(&mut tape, &[1, 2], vec![1.0, 1.0]);
        let y = tape.pointwise_conv1d(xv, ones, None).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 5.0, 7.0]);
        assert_eq!(tape.value(y).shape(), &[1, 1, 3]);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, &[1, 2, 3], vec![0.0; 6]);
        let w = leaf(&mut tape, &[3, 3], vec![0.0; 9]);
        assert!(matches!(tape.depthwise_conv1d(x, w, None, 1), Err(NnError::ShapeMismatch(_))));
        assert!(matches!(tape.pointwise_conv1d(x, w, None), Err(NnError::ShapeMismatch(_))));
        let y = leaf(&mut tape, &[1, 3, 2], vec![0.0; 6]);
        assert!(matches!(tape.add(x, y), Err(NnError::ShapeMismatch(_))));
    }

    #[test]
    fn relu_values_and_grads() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![-1.0, 2.0]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        let loss = tape.weighted_sum(y, &[1.0, 1.0]).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_releases_graph() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1], vec![3.0]);
        let loss = tape.weighted_sum(x, &[2.0]).unwrap();
        assert_eq!(Tape::<f64>::new().backward(Var(0)), Err(NnError::NoGraph));
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
        assert_eq!(tape.backward(loss), Err(NnError::NoGraph));
    }

    #[test]
    fn unused_input_has_zero_or_no_grad() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let unused = leaf(&mut tape, &[2], vec![5.0, 6.0]);
        let loss = tape.weighted_sum(x, &[1.0, 1.0]).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(unused).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running_stats() {
        // 2 x 1 x 2 input [[1, 3]], [[5, 7]]: mean 4, biased var 5, unbiased 20/3
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]);
        let mut bn = BatchNorm1d::<f64>::new("bn", 1);
        let y = tape.batch_norm1d(x, &mut bn, Mode::Train).unwrap();
        let out = tape.value(y).data();
        let mean = out.iter().sum::<f64>() / 4.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 5.0 / (5.0 + 1e-3)).abs() < 1e-5);
        assert!((bn.running_mean[0] - 0.4).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_eval_identity_and_degenerate_batch() {
        let mut tape = Tape::new();
        let data = vec![0.5, -1.5, 2.0];
        let x = leaf(&mut tape, &[1, 3, 1], data.clone());
        let mut bn = BatchNorm1d::<f64>::new("bn", 3);
        let y = tape.batch_norm1d(x, &mut bn, Mode::Eval).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&data) {
            assert!((a - b).abs() < 1e-3 * b.abs());
        }
        assert_eq!(tape.batch_norm1d(x, &mut bn, Mode::Train), Err(NnError::DegenerateBatch));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = crate::seed::rng(1);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1000], vec![1.0; 1000]);
        assert_eq!(tape.dropout(x, 0.0, Mode::Train, &mut rng), x);
        assert_eq!(tape.dropout(x, 0.5, Mode::Eval, &mut rng), x);
        let y = tape.dropout(x, 0.5, Mode::Train, &mut rng);
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));
    }

    #[test]
    fn pooling_constant_channels() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2, 4], vec![3.0, 3.0, 3.0, 3.0, -1.0, -1.0, -1.0, -1.0]);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2]);
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[1, 3], vec![0.0; 3]);
        let loss = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((tape.value(loss).item() - 3f64.ln()).abs() < 1e-12);

        let z = leaf(&mut tape, &[1, 2], vec![1000.0, 0.0]);
        let loss = tape.softmax_cross_entropy(z, &[0]).unwrap();
        let v = tape.value(loss).item();
        assert!(v.is_finite() && v.abs() < 1e-12);

        assert_eq!(
            tape.softmax_cross_entropy(z, &[2]),
            Err(NnError::LabelOutOfRange { label: 2, classes: 2 })
        );
    }
}
