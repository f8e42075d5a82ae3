//! Reverse-mode autodiff on a replay tape.
//!
//! A forward pass records primitive operations eagerly (values are computed
//! at record time); `backward` walks the tape once in reverse and accumulates
//! gradients into every parameter and input leaf. A tape is consumable: one
//! forward pass funds exactly one backward pass, and replaying a consumed
//! tape is a usage error, not a silent wrong answer.
//!
//! The op set is deliberately small. Composite losses (margin losses, the
//! contrastive loss) are single ops with hand-derived backward rules; each
//! rule is pinned against central finite differences in the tests.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses;
use crate::tensor::{dot, norm, Tensor2D};

/// Named, ordered collection of trainable tensors. Slot indices are stable
/// and are what tapes, gradients, and optimizer state all key on.
#[derive(Debug, Clone)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor2D)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet { entries: Vec::new() }
    }

    /// Adds a parameter; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor2D) -> Result<usize> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name {name}")));
        }
        self.entries.push((name, value));
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.entries[slot].0
    }

    pub fn value(&self, slot: usize) -> &Tensor2D {
        &self.entries[slot].1
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Tensor2D {
        &mut self.entries[slot].1
    }

    pub fn slot_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.rows() * t.cols()).sum()
    }

    /// Flattens all parameters into one vector, in slot order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.as_slice());
        }
        out
    }

    /// Writes a flat vector (as produced by `flatten`) back into the parameters.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::InvalidInput(format!(
                "unflatten: expected {} values, got {}",
                self.scalar_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        for (_, t) in &mut self.entries {
            let n = t.rows() * t.cols();
            t.as_mut_slice().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    /// No gradient flows into a constant.
    Const,
    Param(usize),
    Input(usize),
    MatMul(NodeId, NodeId),
    /// a * b^T
    MatMulNT(NodeId, NodeId),
    /// x + broadcast row bias
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Swish(NodeId),
    RowNormalize(NodeId),
    /// Single entry of a matrix as a 1x1 scalar node.
    Pick(NodeId, usize, usize),
    CeMean(NodeId, Vec<usize>),
    L2Mean(NodeId),
    /// Supervised contrastive loss over already-normalized rows.
    SupCon { u: NodeId, labels: Vec<usize>, tau: f64 },
    ArcFace { cos: NodeId, labels: Vec<usize>, scale: f64, margin: f64 },
    /// Backward needs only the scale: the additive margin has unit slope.
    CosFace { cos: NodeId, scale: f64 },
}

struct Node {
    op: Op,
    value: Tensor2D,
}

/// Gradients produced by one backward pass, keyed by leaf slot.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: BTreeMap<usize, Tensor2D>,
    inputs: BTreeMap<usize, Tensor2D>,
}

impl Gradients {
    pub fn param(&self, slot: usize) -> Option<&Tensor2D> {
        self.params.get(&slot)
    }

    pub fn input(&self, slot: usize) -> Option<&Tensor2D> {
        self.inputs.get(&slot)
    }

    /// Dense per-slot gradients aligned with `params`; slots the graph never
    /// touched come back as zeros.
    pub fn to_dense(&self, params: &ParameterSet) -> Vec<Tensor2D> {
        (0..params.len())
            .map(|i| {
                self.params.get(&i).cloned().unwrap_or_else(|| {
                    let (r, c) = params.value(i).shape();
                    Tensor2D::zeros(r, c)
                })
            })
            .collect()
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn value(&self, id: NodeId) -> &Tensor2D {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.shape(), (1, 1));
        self.nodes[id.0].value.get(0, 0)
    }

    fn record(&mut self, op: Op, value: Tensor2D) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor2D) -> NodeId {
        self.record(Op::Const, value)
    }

    /// Leaf for parameter `slot`; the current value is captured by copy.
    pub fn param(&mut self, slot: usize, value: Tensor2D) -> NodeId {
        self.record(Op::Param(slot), value)
    }

    /// Leaf for a differentiable input (used by the input-space attack).
    pub fn input(&mut self, slot: usize, value: Tensor2D) -> NodeId {
        self.record(Op::Input(slot), value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.record(Op::MatMul(a, b), v))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.record(Op::MatMulNT(a, b), v))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::shape(
                "add_bias",
                format!("x {:?} bias {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut v = xv.clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                *r += bv.get(0, j);
            }
        }
        Ok(self.record(Op::AddBias(x, bias), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.record(Op::Add(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.record(Op::Scale(a, c), v)
    }

    pub fn swish(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(losses::swish);
        self.record(Op::Swish(x), v)
    }

    pub fn row_normalize(&mut self, x: NodeId) -> NodeId {
        let v = losses::row_normalize(self.value(x));
        self.record(Op::RowNormalize(x), v)
    }

    pub fn pick(&mut self, x: NodeId, i: usize, j: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if i >= xv.rows() || j >= xv.cols() {
            return Err(Error::shape("pick", format!("({i},{j}) of {:?}", xv.shape())));
        }
        let v = Tensor2D::from_vec(1, 1, vec![xv.get(i, j)])?;
        Ok(self.record(Op::Pick(x, i, j), v))
    }

    pub fn ce_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ce = losses::cross_entropy(self.value(logits), labels)?;
        let v = Tensor2D::from_vec(1, 1, vec![ce])?;
        Ok(self.record(Op::CeMean(logits, labels.to_vec()), v))
    }

    pub fn l2_mean(&mut self, z: NodeId) -> Result<NodeId> {
        let l2 = losses::l2_penalty(self.value(z))?;
        let v = Tensor2D::from_vec(1, 1, vec![l2])?;
        Ok(self.record(Op::L2Mean(z), v))
    }

    /// Contrastive loss node over rows that must already be unit-norm
    /// (compose with `row_normalize`). Degenerate batches contribute 0.
    pub fn supcon(&mut self, u: NodeId, labels: &[usize], tau: f64) -> Result<NodeId> {
        let (value, _) = losses::supcon_from_normalized(self.value(u), labels, tau)?;
        let v = Tensor2D::from_vec(1, 1, vec![value])?;
        Ok(self.record(Op::SupCon { u, labels: labels.to_vec(), tau }, v))
    }

    pub fn arcface_logits(
        &mut self,
        cos: NodeId,
        labels: &[usize],
        scale: f64,
        margin: f64,
    ) -> Result<NodeId> {
        let v = losses::arcface_logits(self.value(cos), labels, scale, margin)?;
        Ok(self.record(Op::ArcFace { cos, labels: labels.to_vec(), scale, margin }, v))
    }

    pub fn cosface_logits(
        &mut self,
        cos: NodeId,
        labels: &[usize],
        scale: f64,
        margin: f64,
    ) -> Result<NodeId> {
        let v = losses::cosface_logits(self.value(cos), labels, scale, margin)?;
        Ok(self.record(Op::CosFace { cos, scale }, v))
    }

    /// Reverse pass from a scalar root. Consumes the tape: a second call is
    /// a usage error. Gradients accumulate across fan-out automatically.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;
        if self.value(root).shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("root must be 1x1 scalar, got {:?}", self.value(root).shape()),
            ));
        }

        let mut grads: Vec<Option<Tensor2D>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor2D::from_vec(1, 1, vec![1.0])?);

        // Nodes only reference earlier nodes, so reverse index order is a
        // valid reverse topological order.
        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Const | Op::Param(_) | Op::Input(_) => {
                    grads[idx] = Some(g); // leaves keep their accumulated gradient
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(b))?;
                    let gb = self.value(a).matmul_tn(&g)?;
                    self.accumulate(&mut grads, a, ga)?;
                    self.accumulate(&mut grads, b, gb)?;
                }
                Op::MatMulNT(a, b) => {
                    let ga = g.matmul(self.value(b))?;
                    let gb = g.matmul_tn(self.value(a))?;
                    self.accumulate(&mut grads, a, ga)?;
                    self.accumulate(&mut grads, b, gb)?;
                }
                Op::AddBias(x, bias) => {
                    let mut gb = Tensor2D::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            gb.set(0, j, gb.get(0, j) + g.get(i, j));
                        }
                    }
                    self.accumulate(&mut grads, x, g)?;
                    self.accumulate(&mut grads, bias, gb)?;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, g.clone())?;
                    self.accumulate(&mut grads, b, g)?;
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut grads, a, g.scale(c))?;
                }
                Op::Swish(x) => {
                    let xv = self.value(x);
                    let mut gx = g;
                    for (gi, &xi) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                        *gi *= losses::swish_deriv(xi);
                    }
                    self.accumulate(&mut grads, x, gx)?;
                }
                Op::RowNormalize(x) => {
                    // u = x / r with r = max(||x||, eps):
                    // dL/dx = (g - (g.u) u) / r
                    let xv = self.value(x);
                    let uv = &self.nodes[idx].value;
                    let mut gx = Tensor2D::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        let r = norm(xv.row(i)).max(losses::NORM_EPS);
                        let gu = g.row(i);
                        let u = uv.row(i);
                        let proj = dot(gu, u);
                        let out = gx.row_mut(i);
                        for j in 0..out.len() {
                            out[j] = (gu[j] - proj * u[j]) / r;
                        }
                    }
                    self.accumulate(&mut grads, x, gx)?;
                }
                Op::Pick(x, i, j) => {
                    let xv = self.value(x);
                    let mut gx = Tensor2D::zeros(xv.rows(), xv.cols());
                    gx.set(i, j, g.get(0, 0));
                    self.accumulate(&mut grads, x, gx)?;
                }
                Op::CeMean(logits, labels) => {
                    let gs = g.get(0, 0);
                    let lv = self.value(logits);
                    let n = lv.rows() as f64;
                    let mut gl = Tensor2D::zeros(lv.rows(), lv.cols());
                    for (i, &y) in labels.iter().enumerate() {
                        let p = losses::softmax_row(lv.row(i));
                        let out = gl.row_mut(i);
                        for (j, pj) in p.iter().enumerate() {
                            let delta = if j == y { 1.0 } else { 0.0 };
                            out[j] = gs * (pj - delta) / n;
                        }
                    }
                    self.accumulate(&mut grads, logits, gl)?;
                }
                Op::L2Mean(z) => {
                    let gs = g.get(0, 0);
                    let zv = self.value(z);
                    let gz = zv.scale(2.0 * gs / zv.rows() as f64);
                    self.accumulate(&mut grads, z, gz)?;
                }
                Op::SupCon { u, labels, tau } => {
                    let gs = g.get(0, 0);
                    let gu = supcon_backward(self.value(u), &labels, tau)?.scale(gs);
                    self.accumulate(&mut grads, u, gu)?;
                }
                Op::ArcFace { cos, labels, scale, margin } => {
                    let cv = self.value(cos);
                    let mut gc = g;
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..gc.cols() {
                            let d = if j == y {
                                scale * losses::arcface_target_deriv(cv.get(i, y), margin)
                            } else {
                                scale
                            };
                            gc.set(i, j, gc.get(i, j) * d);
                        }
                    }
                    self.accumulate(&mut grads, cos, gc)?;
                }
                Op::CosFace { cos, scale } => {
                    self.accumulate(&mut grads, cos, g.scale(scale))?;
                }
            }
        }

        let mut out = Gradients { params: BTreeMap::new(), inputs: BTreeMap::new() };
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(g) = grads[idx].take() {
                match node.op {
                    Op::Param(slot) => match out.params.get_mut(&slot) {
                        // The same parameter may appear as several leaves.
                        Some(acc) => acc.add_assign(&g)?,
                        None => {
                            out.params.insert(slot, g);
                        }
                    },
                    Op::Input(slot) => match out.inputs.get_mut(&slot) {
                        Some(acc) => acc.add_assign(&g)?,
                        None => {
                            out.inputs.insert(slot, g);
                        }
                    },
                    _ => {}
                }
            }
        }
        Ok(out)
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor2D>],
        target: NodeId,
        g: Tensor2D,
    ) -> Result<()> {
        match &mut grads[target.0] {
            Some(acc) => acc.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// dL/du for the contrastive loss, u row-normalized. With S = u u^T and
/// G_ab = dL/dS_ab treated entrywise, dL/du = (G + G^T) u.
fn supcon_backward(u: &Tensor2D, labels: &[usize], tau: f64) -> Result<Tensor2D> {
    let n = u.rows();
    let mut g = Tensor2D::zeros(n, n);
    if n < 2 {
        return Ok(Tensor2D::zeros(n, u.cols()));
    }
    let sims = u.matmul_nt(u)?;
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Ok(Tensor2D::zeros(n, u.cols()));
    }
    let n_anchors = anchors.len() as f64;
    for &a in &anchors {
        let scaled: Vec<f64> = (0..n).filter(|&j| j != a).map(|j| sims.get(a, j) / tau).collect();
        let lse = losses::log_sum_exp(&scaled);
        let pos_count = (0..n).filter(|&j| j != a && labels[j] == labels[a]).count() as f64;
        for j in 0..n {
            if j == a {
                continue;
            }
            let q = (sims.get(a, j) / tau - lse).exp();
            let indicator = if labels[j] == labels[a] { 1.0 / pos_count } else { 0.0 };
            g.set(a, j, -(indicator - q) / (n_anchors * tau));
        }
    }
    let gt = g.transpose();
    g.add(&gt)?.matmul(u)
}

/// Central finite-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len()).map(|i| fd_partial(f, x, i, h)).collect()
}

/// Central finite-difference partial derivative along coordinate `idx`.
pub fn fd_partial(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], idx: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[idx] += h;
    let fp = f(&xp);
    xp[idx] = x[idx] - h;
    let fm = f(&xp);
    (fp - fm) / (2.0 * h)
}

/// Relative error |a - b| / max(|a|, |b|, floor).
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, r: usize, c: usize) -> Tensor2D {
        Tensor2D::from_vec(r, c, (0..r * c).map(|_| rng.normal() * 0.7).collect()).unwrap()
    }

    /// FD check harness: builds the loss twice per coordinate probe.
    fn check_param_grads(
        build: &dyn Fn(&mut Tape, &[Tensor2D]) -> NodeId,
        params: &[Tensor2D],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params);
        let grads = tape.backward(loss).unwrap();

        let flat: Vec<f64> = params.iter().flat_map(|t| t.as_slice().to_vec()).collect();
        let shapes: Vec<(usize, usize)> = params.iter().map(|t| t.shape()).collect();
        let mut eval = |x: &[f64]| {
            let mut at = 0;
            let rebuilt: Vec<Tensor2D> = shapes
                .iter()
                .map(|&(r, c)| {
                    let t = Tensor2D::from_vec(r, c, x[at..at + r * c].to_vec()).unwrap();
                    at += r * c;
                    t
                })
                .collect();
            let mut tape = Tape::new();
            let loss = build(&mut tape, &rebuilt);
            tape.scalar(loss)
        };
        let numeric = finite_difference_gradient(&mut eval, &flat, 1e-5);

        let mut at = 0;
        for (slot, &(r, c)) in shapes.iter().enumerate() {
            let g = grads.param(slot).cloned().unwrap_or_else(|| Tensor2D::zeros(r, c));
            for (k, &a) in g.as_slice().iter().enumerate() {
                let e = rel_err(a, numeric[at + k], 1e-6);
                assert!(e < tol, "slot {slot} coord {k}: analytic {a} fd {} err {e}", numeric[at + k]);
            }
            at += r * c;
        }
    }

    #[test]
    fn matmul_bias_swish_ce_chain_matches_fd() {
        let mut rng = Rng::seed(41);
        let x = rand_tensor(&mut rng, 5, 3);
        let w = rand_tensor(&mut rng, 4, 3);
        let b = rand_tensor(&mut rng, 1, 4);
        let wc = rand_tensor(&mut rng, 2, 4);
        let labels = vec![0, 1, 1, 0, 1];
        check_param_grads(
            &move |tape, p| {
                let xn = tape.constant(x.clone());
                let w = tape.param(0, p[0].clone());
                let b = tape.param(1, p[1].clone());
                let wc = tape.param(2, p[2].clone());
                let lin = tape.matmul_nt(xn, w).unwrap();
                let lin = tape.add_bias(lin, b).unwrap();
                let h = tape.swish(lin);
                let logits = tape.matmul_nt(h, wc).unwrap();
                tape.ce_mean(logits, &labels).unwrap()
            },
            &[w, b, wc],
            1e-5,
        );
    }

    #[test]
    fn l2_and_scale_and_add_match_fd() {
        let mut rng = Rng::seed(43);
        let x = rand_tensor(&mut rng, 6, 2);
        let w = rand_tensor(&mut rng, 3, 2);
        let labels = vec![0, 2, 1, 0, 2, 1];
        check_param_grads(
            &move |tape, p| {
                let xn = tape.constant(x.clone());
                let w = tape.param(0, p[0].clone());
                let z = tape.matmul_nt(xn, w).unwrap();
                let ce = tape.ce_mean(z, &labels).unwrap();
                let l2 = tape.l2_mean(z).unwrap();
                let l2s = tape.scale(l2, 0.37);
                tape.add(ce, l2s).unwrap()
            },
            &[w],
            1e-5,
        );
    }

    #[test]
    fn row_normalize_and_supcon_match_fd() {
        let mut rng = Rng::seed(47);
        let w = rand_tensor(&mut rng, 4, 3);
        let x = rand_tensor(&mut rng, 6, 3);
        let labels = vec![0, 0, 1, 1, 0, 1];
        check_param_grads(
            &move |tape, p| {
                let xn = tape.constant(x.clone());
                let w = tape.param(0, p[0].clone());
                let h = tape.matmul_nt(xn, w).unwrap();
                let u = tape.row_normalize(h);
                tape.supcon(u, &labels, 0.05).unwrap()
            },
            &[w],
            2e-5,
        );
    }

    #[test]
    fn arcface_and_cosface_match_fd() {
        let mut rng = Rng::seed(53);
        let x = rand_tensor(&mut rng, 5, 4);
        let w = rand_tensor(&mut rng, 3, 4);
        let labels = vec![0, 2, 1, 2, 0];
        for arc in [true, false] {
            let x = x.clone();
            let labels = labels.clone();
            check_param_grads(
                &move |tape, p| {
                    let xn = tape.constant(x.clone());
                    let w = tape.param(0, p[0].clone());
                    let u = tape.row_normalize(xn);
                    let v = tape.row_normalize(w);
                    let cos = tape.matmul_nt(u, v).unwrap();
                    let logits = if arc {
                        tape.arcface_logits(cos, &labels, 40.0, 0.3).unwrap()
                    } else {
                        tape.cosface_logits(cos, &labels, 40.0, 0.15).unwrap()
                    };
                    tape.ce_mean(logits, &labels).unwrap()
                },
                std::slice::from_ref(&w),
                2e-5,
            );
        }
    }

    #[test]
    fn input_gradients_flow() {
        let mut rng = Rng::seed(59);
        let x = rand_tensor(&mut rng, 1, 3);
        let w = rand_tensor(&mut rng, 2, 3);
        let mut tape = Tape::new();
        let xi = tape.input(0, x.clone());
        let wn = tape.constant(w.clone());
        let logits = tape.matmul_nt(xi, wn).unwrap();
        let l = tape.pick(logits, 0, 1).unwrap();
        let grads = tape.backward(l).unwrap();
        let gx = grads.input(0).unwrap();
        // d(logit_1)/dx = second row of w.
        for j in 0..3 {
            assert!((gx.get(0, j) - w.get(1, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum of two uses of the same parameter: grads add.
        let w = Tensor2D::from_rows(&[&[2.0]]).unwrap();
        let mut tape = Tape::new();
        let wn = tape.param(0, w);
        let a = tape.l2_mean(wn).unwrap(); // w^2
        let b = tape.l2_mean(wn).unwrap();
        let s = tape.add(a, b).unwrap();
        let grads = tape.backward(s).unwrap();
        // d(2 w^2)/dw = 4w = 8.
        assert!((grads.param(0).unwrap().get(0, 0) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn consumed_tape_errors() {
        let mut tape = Tape::new();
        let w = tape.param(0, Tensor2D::from_rows(&[&[1.0]]).unwrap());
        let l = tape.l2_mean(w).unwrap();
        let _ = tape.backward(l).unwrap();
        match tape.backward(l) {
            Err(Error::TapeConsumed) => {}
            other => panic!("expected TapeConsumed, got {other:?}"),
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let w = tape.param(0, Tensor2D::zeros(2, 2));
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn degenerate_supcon_has_zero_gradient() {
        let u = Tensor2D::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let mut tape = Tape::new();
        let un = tape.param(0, u);
        let l = tape.supcon(un, &[0, 1], 0.05).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let grads = tape.backward(l).unwrap();
        assert!(grads.param(0).unwrap().as_slice().iter().all(|&g| g == 0.0));
    }
}
