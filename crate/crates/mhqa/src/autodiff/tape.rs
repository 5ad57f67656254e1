//! Reverse-mode differentiation over a recording tape.
//!
//! Every operation evaluates eagerly, pushes a node holding its output, and
//! returns a `TensorId` handle. `backward` walks the nodes in exact reverse
//! creation order, which is a valid topological order because an operation
//! can only reference ids that already exist. Gradients accumulate by
//! addition, so shared subexpressions are handled for free.
//!
//! Outputs are checked for NaN/Inf as they are produced; a non-finite value
//! is a hard error, not a representable state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward called on a tape that was not recording")]
    NotRecording,
    #[error("backward called twice on the same tape")]
    TapeConsumed,
    #[error("backward target must have shape [1], got {0:?}")]
    NonScalarLoss(Vec<usize>),
}

/// Handle to a node on a specific tape. Ids are only meaningful for the tape
/// that produced them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

enum Op {
    Leaf,
    /// [m,k] x [k,n] -> [m,n], or [m,k] x [k] -> [m].
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    AddN(Vec<TensorId>),
    Mul(TensorId, TensorId),
    Sigmoid(TensorId),
    Tanh(TensorId),
    Softmax(TensorId),
    Concat(Vec<TensorId>),
    /// Sum of the selected coordinates of a vector, shape [1].
    SumSelected(TensorId, Vec<usize>),
    Dot(TensorId, TensorId),
    SumSquares(TensorId),
    Scale(TensorId, f64),
    Ln(TensorId),
    /// Mask values are 0 or 1/(1-rate), captured at forward time.
    Dropout(TensorId, Vec<f64>),
    /// Row extraction from a matrix.
    Row(TensorId, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    bound: Vec<(String, TensorId)>,
    rng: ChaCha8Rng,
    recording: bool,
    consumed: bool,
}

impl Tape {
    /// A recording tape. The seed only drives dropout masks.
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            recording: true,
            consumed: false,
        }
    }

    /// A tape that evaluates but keeps no backward information.
    pub fn inference() -> Self {
        let mut t = Tape::new(0);
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> TensorId {
        assert!(
            value.is_finite(),
            "non-finite output from {} (shape {:?})",
            what,
            value.shape()
        );
        let op = if self.recording { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn zeros(&mut self, n: usize) -> TensorId {
        self.leaf(Tensor::zeros(&[n]))
    }

    /// Leaf tied to a named parameter; `accumulate_bound_grads` later routes
    /// its gradient back out under this name.
    pub fn bind(&mut self, name: &str, value: Tensor) -> TensorId {
        let id = self.leaf(value);
        self.bound.push((name.to_string(), id));
        id
    }

    pub fn bound(&self) -> &[(String, TensorId)] {
        &self.bound
    }

    // ---- operations ----

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            av.rank(),
            2,
            "matmul left operand must be a matrix, got shape {:?}",
            av.shape()
        );
        let (m, k) = (av.rows(), av.cols());
        assert_eq!(
            k,
            bv.rows(),
            "matmul inner dimensions differ: {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let out = if bv.is_vector() {
            let mut data = vec![0.0; m];
            let ad = av.data();
            let bd = bv.data();
            for (r, slot) in data.iter_mut().enumerate() {
                let row = &ad[r * k..(r + 1) * k];
                *slot = row.iter().zip(bd).map(|(x, y)| x * y).sum();
            }
            Tensor::vector(data)
        } else {
            let n = bv.cols();
            let mut data = vec![0.0; m * n];
            for r in 0..m {
                for kk in 0..k {
                    let a_rk = av.at(r * k + kk);
                    if a_rk == 0.0 {
                        continue;
                    }
                    for c in 0..n {
                        data[r * n + c] += a_rk * bv.at(kk * n + c);
                    }
                }
            }
            Tensor::matrix(m, n, data)
        };
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            av.shape(),
            bv.shape(),
            "add between shapes {:?} and {:?}",
            av.shape(),
            bv.shape()
        );
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn add_n(&mut self, ids: &[TensorId]) -> TensorId {
        assert!(!ids.is_empty(), "add_n of zero tensors");
        if ids.len() == 1 {
            return ids[0];
        }
        let shape = self.nodes[ids[0].0].value.shape().to_vec();
        let mut data = vec![0.0; shape.iter().product()];
        for id in ids {
            let v = &self.nodes[id.0].value;
            assert_eq!(
                v.shape(),
                &shape[..],
                "add_n between shapes {:?} and {:?}",
                shape,
                v.shape()
            );
            for (slot, x) in data.iter_mut().zip(v.data()) {
                *slot += x;
            }
        }
        self.push(Tensor::new(shape, data), Op::AddN(ids.to_vec()), "add_n")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            av.shape(),
            bv.shape(),
            "mul between shapes {:?} and {:?}",
            av.shape(),
            bv.shape()
        );
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let out = Tensor::new(xv.shape().to_vec(), data);
        self.push(out, Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::new(xv.shape().to_vec(), data);
        self.push(out, Op::Tanh(x), "tanh")
    }

    /// Numerically stable softmax over a vector: the max is subtracted
    /// before exponentiation.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let xv = &self.nodes[x.0].value;
        assert!(
            xv.is_vector() && !xv.is_empty(),
            "softmax wants a nonempty vector, got shape {:?}",
            xv.shape()
        );
        let max = xv.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.data().iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out = Tensor::vector(exps.into_iter().map(|e| e / z).collect());
        self.push(out, Op::Softmax(x), "softmax")
    }

    pub fn concat(&mut self, ids: &[TensorId]) -> TensorId {
        assert!(!ids.is_empty(), "concat of zero tensors");
        let mut data = Vec::new();
        for id in ids {
            let v = &self.nodes[id.0].value;
            assert!(
                v.is_vector(),
                "concat wants vectors, got shape {:?}",
                v.shape()
            );
            data.extend_from_slice(v.data());
        }
        self.push(Tensor::vector(data), Op::Concat(ids.to_vec()), "concat")
    }

    pub fn sum_selected(&mut self, x: TensorId, indices: &[usize]) -> TensorId {
        let xv = &self.nodes[x.0].value;
        assert!(
            xv.is_vector(),
            "sum_selected wants a vector, got shape {:?}",
            xv.shape()
        );
        let n = xv.len();
        let sum = indices
            .iter()
            .map(|&i| {
                assert!(
                    i < n,
                    "sum_selected index {} out of bounds for length {}",
                    i,
                    n
                );
                xv.at(i)
            })
            .sum();
        self.push(
            Tensor::scalar(sum),
            Op::SumSelected(x, indices.to_vec()),
            "sum_selected",
        )
    }

    pub fn dot(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(
            av.is_vector() && bv.is_vector() && av.len() == bv.len(),
            "dot between shapes {:?} and {:?}",
            av.shape(),
            bv.shape()
        );
        let sum = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        self.push(Tensor::scalar(sum), Op::Dot(a, b), "dot")
    }

    pub fn sum_squares(&mut self, x: TensorId) -> TensorId {
        let xv = &self.nodes[x.0].value;
        let sum = xv.data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(sum), Op::SumSquares(x), "sum_squares")
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> TensorId {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(xv.shape().to_vec(), data);
        self.push(out, Op::Scale(x, factor), "scale")
    }

    /// Element-wise natural log. Inputs must be strictly positive; callers
    /// that can see zero probabilities check before building this node.
    pub fn ln(&mut self, x: TensorId) -> TensorId {
        let xv = &self.nodes[x.0].value;
        assert!(
            xv.data().iter().all(|v| *v > 0.0),
            "ln of non-positive input"
        );
        let data = xv.data().iter().map(|v| v.ln()).collect();
        let out = Tensor::new(xv.shape().to_vec(), data);
        self.push(out, Op::Ln(x), "ln")
    }

    /// Inverted dropout: kept coordinates are scaled by 1/(1-rate) so the
    /// expectation matches the input. The mask comes from the tape's seeded
    /// stream. rate == 0 is the identity.
    pub fn dropout(&mut self, x: TensorId, rate: f64) -> TensorId {
        assert!(
            (0.0..1.0).contains(&rate),
            "dropout rate must lie in [0, 1), got {}",
            rate
        );
        if rate == 0.0 {
            return x;
        }
        let n = self.nodes[x.0].value.len();
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data);
        self.push(out, Op::Dropout(x, mask), "dropout")
    }

    pub fn affine(&mut self, w: TensorId, x: TensorId, b: TensorId) -> TensorId {
        let wx = self.matmul(w, x);
        self.add(wx, b)
    }

    /// Extract row `r` of a matrix as a vector.
    pub fn row(&mut self, x: TensorId, r: usize) -> TensorId {
        let xv = &self.nodes[x.0].value;
        assert_eq!(
            xv.rank(),
            2,
            "row extraction wants a matrix, got shape {:?}",
            xv.shape()
        );
        assert!(
            r < xv.rows(),
            "row {} out of bounds for {} rows",
            r,
            xv.rows()
        );
        let out = Tensor::vector(xv.row(r).to_vec());
        self.push(out, Op::Row(x, r), "row")
    }

    // ---- backward ----

    pub fn backward(&mut self, loss: TensorId) -> Result<(), AutodiffError> {
        if !self.recording {
            return Err(AutodiffError::NotRecording);
        }
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != [1] {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn add_grad(grads: &mut [Option<Tensor>], nodes: &[Node], id: TensorId, delta: Tensor) {
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => {
                debug_assert_eq!(nodes[id.0].value.shape(), delta.shape());
                *slot = Some(delta);
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) {
        // One dispatch per node; each arm pushes contributions into inputs.
        let (done, rest) = self.nodes.split_at(i);
        let node = &rest[0];
        let grads = &mut self.grads;
        let val = |id: TensorId| -> &Tensor { &done[id.0].value };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.rows(), av.cols());
                if bv.is_vector() {
                    // y = A x: dA[r,c] = g[r] x[c]; dx[c] = sum_r A[r,c] g[r]
                    let mut da = vec![0.0; m * k];
                    let mut dx = vec![0.0; k];
                    for r in 0..m {
                        let gr = g.at(r);
                        for c in 0..k {
                            da[r * k + c] = gr * bv.at(c);
                            dx[c] += av.at(r * k + c) * gr;
                        }
                    }
                    Self::add_grad(grads, done, *a, Tensor::matrix(m, k, da));
                    Self::add_grad(grads, done, *b, Tensor::vector(dx));
                } else {
                    // C = A B: dA = G B^T, dB = A^T G
                    let n = bv.cols();
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        for c in 0..n {
                            let grc = g.at(r * n + c);
                            if grc == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[r * k + kk] += grc * bv.at(kk * n + c);
                                db[kk * n + c] += av.at(r * k + kk) * grc;
                            }
                        }
                    }
                    Self::add_grad(grads, done, *a, Tensor::matrix(m, k, da));
                    Self::add_grad(grads, done, *b, Tensor::matrix(k, n, db));
                }
            }
            Op::Add(a, b) => {
                Self::add_grad(grads, done, *a, g.clone());
                Self::add_grad(grads, done, *b, g.clone());
            }
            Op::AddN(ids) => {
                for id in ids {
                    Self::add_grad(grads, done, *id, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let da = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                );
                let db = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                );
                Self::add_grad(grads, done, *a, da);
                Self::add_grad(grads, done, *b, db);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| gi * yi * (1.0 - yi))
                        .collect(),
                );
                Self::add_grad(grads, done, *x, dx);
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect(),
                );
                Self::add_grad(grads, done, *x, dx);
            }
            Op::Softmax(x) => {
                // dx_i = y_i (g_i - sum_j g_j y_j)
                let y = &node.value;
                let inner: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                let dx = Tensor::vector(
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| yi * (gi - inner))
                        .collect(),
                );
                Self::add_grad(grads, done, *x, dx);
            }
            Op::Concat(ids) => {
                let mut offset = 0;
                for id in ids {
                    let n = done[id.0].value.len();
                    let part = Tensor::vector(g.data()[offset..offset + n].to_vec());
                    Self::add_grad(grads, done, *id, part);
                    offset += n;
                }
            }
            Op::SumSelected(x, indices) => {
                let mut dx = Tensor::zeros_like(val(*x));
                let g0 = g.item();
                for &idx in indices {
                    dx.data_mut()[idx] += g0;
                }
                Self::add_grad(grads, done, *x, dx);
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let g0 = g.item();
                let da = Tensor::vector(bv.data().iter().map(|v| v * g0).collect());
                let db = Tensor::vector(av.data().iter().map(|v| v * g0).collect());
                Self::add_grad(grads, done, *a, da);
                Self::add_grad(grads, done, *b, db);
            }
            Op::SumSquares(x) => {
                let xv = val(*x);
                let g0 = g.item();
                let dx = Tensor::new(
                    xv.shape().to_vec(),
                    xv.data().iter().map(|v| 2.0 * v * g0).collect(),
                );
                Self::add_grad(grads, done, *x, dx);
            }
            Op::Scale(x, factor) => {
                let mut dx = g.clone();
                dx.scale_assign(*factor);
                Self::add_grad(grads, done, *x, dx);
            }
            Op::Ln(x) => {
                let xv = val(*x);
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(gi, xi)| gi / xi)
                        .collect(),
                );
                Self::add_grad(grads, done, *x, dx);
            }
            Op::Dropout(x, mask) => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect(),
                );
                Self::add_grad(grads, done, *x, dx);
            }
            Op::Row(x, r) => {
                let xv = val(*x);
                let cols = xv.cols();
                let mut dx = Tensor::zeros_like(xv);
                for c in 0..cols {
                    dx.data_mut()[r * cols + c] = g.at(c);
                }
                Self::add_grad(grads, done, *x, dx);
            }
        }
    }

    /// Gradient of a node after `backward`; None when the node does not
    /// influence the loss (or backward has not run).
    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Route gradients of bound parameters back out by name. Parameters with
    /// no influence on the loss contribute nothing.
    pub fn bound_grads(&self) -> Vec<(&str, &Tensor)> {
        self.bound
            .iter()
            .filter_map(|(name, id)| self.grad(*id).map(|g| (name.as_str(), g)))
            .collect()
    }
}
