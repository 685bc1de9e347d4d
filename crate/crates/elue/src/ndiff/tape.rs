use std::collections::BTreeMap;

use super::{Grads, ParameterSet, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// x @ w + b with b broadcast over rows.
    Affine { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Exp { x: Var },
    /// Identity inside [lo, hi], constant (zero gradient) outside.
    Clamp { x: Var, lo: f64, hi: f64 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    AddScalar { x: Var },
    SumAll { x: Var },
    /// Column sums: (r, c) -> (1, c).
    SumRows { x: Var },
    /// Repeat a (1, c) row: (1, c) -> (rows, c).
    BroadcastRows { x: Var, rows: usize },
    ConcatCols { a: Var, b: Var },
    SliceCols { x: Var, start: usize, len: usize },
    /// Elementwise sum of same-shaped inputs.
    AddN { xs: Vec<Var> },
}

struct Node {
    op: Op,
    value: Tensor,
    /// Set when this leaf was registered from a named parameter.
    param_name: Option<String>,
}

/// Gradients for every named leaf on a tape, before being matched up with a
/// particular [`ParameterSet`].
#[derive(Debug, Default)]
pub struct RawGrads {
    by_name: BTreeMap<String, Tensor>,
}

impl RawGrads {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    /// Gradients keyed exactly like `params`. Parameters that never made it
    /// onto the tape get zero gradients.
    pub fn for_params(&self, params: &ParameterSet) -> Grads {
        let mut out = Grads::new();
        for (name, entry) in params.iter() {
            let g = self
                .by_name
                .get(name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(entry.value.shape().to_vec()));
            out.insert(name.to_string(), g);
        }
        out
    }
}

/// Reverse-mode differentiation tape.
///
/// Values are computed eagerly as operations are recorded; `backward` then
/// replays the record in reverse. Loops run in a fixed order everywhere so
/// results are deterministic.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value,
            param_name: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant input. No gradient is reported for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Record a named parameter leaf. Gradients accumulate across repeated
    /// registrations of the same name.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let value = params.require(name)?.clone();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            param_name: Some(name.to_string()),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (r, k) = self.value(x).dims2();
        let (k2, m) = self.value(w).dims2();
        let (rb, mb) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape("affine input/weight", k2, k));
        }
        if rb != 1 || mb != m {
            return Err(Error::shape("affine bias", m, mb * rb));
        }
        let xv = self.value(x).values();
        let wv = self.value(w).values();
        let bv = self.value(b).values();
        let mut out = vec![0.0; r * m];
        for i in 0..r {
            let row = &mut out[i * m..(i + 1) * m];
            row.copy_from_slice(bv);
            for l in 0..k {
                let a = xv[i * k + l];
                let wrow = &wv[l * m..(l + 1) * m];
                for j in 0..m {
                    row[j] += a * wrow[j];
                }
            }
        }
        Ok(self.push(Op::Affine { x, w, b }, Tensor::from_parts(vec![r, m], out)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .values()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Relu { x }, Tensor::from_parts(shape, out))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).values().iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Tanh { x }, Tensor::from_parts(shape, out))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).values().iter().map(|v| v.exp()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Exp { x }, Tensor::from_parts(shape, out))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self
            .value(x)
            .values()
            .iter()
            .map(|v| v.clamp(lo, hi))
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Clamp { x, lo, hi }, Tensor::from_parts(shape, out))
    }

    fn zip_shapes(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if self.value(a).numel() != self.value(b).numel() || sa.len() != sb.len() {
            return Err(Error::shape(what, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.zip_shapes(a, b, "add")?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add { a, b }, Tensor::from_parts(shape, out)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.zip_shapes(a, b, "sub")?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub { a, b }, Tensor::from_parts(shape, out)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.zip_shapes(a, b, "mul")?;
        let out = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul { a, b }, Tensor::from_parts(shape, out)))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same shape")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).values().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Scale { x, c }, Tensor::from_parts(shape, out))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).values().iter().map(|v| v + c).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::AddScalar { x }, Tensor::from_parts(shape, out))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = 0.0;
        for v in self.value(x).values() {
            acc += v;
        }
        self.push(Op::SumAll { x }, Tensor::scalar(acc))
    }

    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.value(x).dims2();
        let xv = self.value(x).values();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xv[i * c + j];
            }
        }
        self.push(Op::SumRows { x }, Tensor::from_parts(vec![1, c], out))
    }

    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if r != 1 {
            return Err(Error::shape("broadcast_rows input rows", 1, r));
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            out.extend_from_slice(xv);
        }
        Ok(self.push(
            Op::BroadcastRows { x, rows },
            Tensor::from_parts(vec![rows, c], out),
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2();
        let (rb, cb) = self.value(b).dims2();
        if ra != rb {
            return Err(Error::shape("concat_cols rows", ra, rb));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(
            Op::ConcatCols { a, b },
            Tensor::from_parts(vec![ra, ca + cb], out),
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if start + len > c {
            return Err(Error::shape("slice_cols range", c, start + len));
        }
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        Ok(self.push(
            Op::SliceCols { x, start, len },
            Tensor::from_parts(vec![r, len], out),
        ))
    }

    pub fn add_n(&mut self, xs: Vec<Var>) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("add_n: empty input".into()))?;
        let shape = self.value(first).shape().to_vec();
        let mut out = self.value(first).values().to_vec();
        for &x in &xs[1..] {
            if self.value(x).numel() != out.len() {
                return Err(Error::shape("add_n", out.len(), self.value(x).numel()));
            }
            for (o, v) in out.iter_mut().zip(self.value(x).values()) {
                *o += v;
            }
        }
        Ok(self.push(Op::AddN { xs }, Tensor::from_parts(shape, out)))
    }

    /// Reverse pass from a scalar loss. Returns gradients for every named
    /// leaf; combine with [`RawGrads::for_params`] to match a parameter set.
    pub fn backward(&self, loss: Var) -> Result<RawGrads> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward loss",
                1,
                self.value(loss).numel(),
            ));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    adj[idx] = Some(g); // keep for collection below
                }
                Op::Affine { x, w, b } => {
                    let (r, k) = self.nodes[x.0].value.dims2();
                    let (_, m) = self.nodes[w.0].value.dims2();
                    let xv = self.nodes[x.0].value.values();
                    let wv = self.nodes[w.0].value.values();
                    {
                        let gx = grad_slot(&mut adj, x.0, r * k);
                        for i in 0..r {
                            for l in 0..k {
                                let mut acc = 0.0;
                                for j in 0..m {
                                    acc += g[i * m + j] * wv[l * m + j];
                                }
                                gx[i * k + l] += acc;
                            }
                        }
                    }
                    {
                        let gw = grad_slot(&mut adj, w.0, k * m);
                        for l in 0..k {
                            for j in 0..m {
                                let mut acc = 0.0;
                                for i in 0..r {
                                    acc += xv[i * k + l] * g[i * m + j];
                                }
                                gw[l * m + j] += acc;
                            }
                        }
                    }
                    {
                        let gb = grad_slot(&mut adj, b.0, m);
                        for i in 0..r {
                            for j in 0..m {
                                gb[j] += g[i * m + j];
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = self.nodes[x.0].value.values();
                    let gx = grad_slot(&mut adj, x.0, xv.len());
                    for i in 0..xv.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::Tanh { x } => {
                    let yv = self.nodes[idx].value.values();
                    let gx = grad_slot(&mut adj, x.0, yv.len());
                    for i in 0..yv.len() {
                        gx[i] += g[i] * (1.0 - yv[i] * yv[i]);
                    }
                }
                Op::Exp { x } => {
                    let yv = self.nodes[idx].value.values();
                    let gx = grad_slot(&mut adj, x.0, yv.len());
                    for i in 0..yv.len() {
                        gx[i] += g[i] * yv[i];
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.nodes[x.0].value.values();
                    let gx = grad_slot(&mut adj, x.0, xv.len());
                    for i in 0..xv.len() {
                        if xv[i] > *lo && xv[i] < *hi {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj, a.0, &g);
                    accumulate(&mut adj, b.0, &g);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut adj, a.0, &g);
                    let gb = grad_slot(&mut adj, b.0, g.len());
                    for i in 0..g.len() {
                        gb[i] -= g[i];
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a.0].value.values().to_vec();
                    let bv = self.nodes[b.0].value.values().to_vec();
                    {
                        let ga = grad_slot(&mut adj, a.0, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    {
                        let gb = grad_slot(&mut adj, b.0, g.len());
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let gx = grad_slot(&mut adj, x.0, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * c;
                    }
                }
                Op::AddScalar { x } => {
                    accumulate(&mut adj, x.0, &g);
                }
                Op::SumAll { x } => {
                    let n = self.nodes[x.0].value.numel();
                    let gx = grad_slot(&mut adj, x.0, n);
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::SumRows { x } => {
                    let (r, c) = self.nodes[x.0].value.dims2();
                    let gx = grad_slot(&mut adj, x.0, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j];
                        }
                    }
                }
                Op::BroadcastRows { x, rows } => {
                    let (_, c) = self.nodes[x.0].value.dims2();
                    let gx = grad_slot(&mut adj, x.0, c);
                    for i in 0..*rows {
                        for j in 0..c {
                            gx[j] += g[i * c + j];
                        }
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (ra, ca) = self.nodes[a.0].value.dims2();
                    let (_, cb) = self.nodes[b.0].value.dims2();
                    {
                        let ga = grad_slot(&mut adj, a.0, ra * ca);
                        for i in 0..ra {
                            for j in 0..ca {
                                ga[i * ca + j] += g[i * (ca + cb) + j];
                            }
                        }
                    }
                    {
                        let gb = grad_slot(&mut adj, b.0, ra * cb);
                        for i in 0..ra {
                            for j in 0..cb {
                                gb[i * cb + j] += g[i * (ca + cb) + ca + j];
                            }
                        }
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (r, c) = self.nodes[x.0].value.dims2();
                    let gx = grad_slot(&mut adj, x.0, r * c);
                    for i in 0..r {
                        for j in 0..*len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
                Op::AddN { xs } => {
                    for &x in xs {
                        accumulate(&mut adj, x.0, &g);
                    }
                }
            }
        }

        let mut raw = RawGrads::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.param_name {
                if let Some(g) = &adj[idx] {
                    let t = Tensor::from_parts(node.value.shape().to_vec(), g.clone());
                    match raw.by_name.get_mut(name) {
                        Some(existing) => {
                            let ev = existing.values_mut();
                            for (e, v) in ev.iter_mut().zip(t.values()) {
                                *e += v;
                            }
                        }
                        None => {
                            raw.by_name.insert(name.clone(), t);
                        }
                    }
                }
            }
        }
        Ok(raw)
    }

    /// Gradient of a scalar loss with respect to every entry of `params`.
    /// Entries that never contributed to the loss get zero gradients.
    pub fn grad(&self, loss: Var, params: &ParameterSet) -> Result<Grads> {
        Ok(self.backward(loss)?.for_params(params))
    }
}

fn grad_slot<'a>(adj: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut Vec<f64> {
    adj[idx].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(adj: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    let slot = grad_slot(adj, idx, g.len());
    for i in 0..g.len() {
        slot[i] += g[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient() {
        // loss = w * x with x = 3, w = 2 -> d loss / d w = 3
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::scalar(2.0));
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let x = tape.constant(Tensor::scalar(3.0));
        let loss = tape.mul(w, x).unwrap();
        let grads = tape.grad(loss, &params).unwrap();
        assert_eq!(grads["w"].item().unwrap(), 3.0);
        assert_eq!(tape.value(loss).item().unwrap(), 6.0);
    }

    #[test]
    fn tanh_gradient_at_zero() {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let w = tape.param(&params, "w").unwrap();
        let loss = tape.tanh(w);
        let grads = tape.grad(loss, &params).unwrap();
        assert_eq!(grads["w"].item().unwrap(), 1.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn untouched_parameters_get_zero_gradients() {
        let mut params = ParameterSet::new();
        params.insert("used", Tensor::scalar(1.0));
        params.insert("unused", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new();
        let w = tape.param(&params, "used").unwrap();
        let loss = tape.scale(w, 2.0);
        let grads = tape.grad(loss, &params).unwrap();
        assert_eq!(grads["used"].item().unwrap(), 2.0);
        assert_eq!(grads["unused"].values(), &[0.0, 0.0]);
    }

    #[test]
    fn repeated_registration_accumulates() {
        // loss = w + w -> gradient 2
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::scalar(1.0));
        let mut tape = Tape::new();
        let w1 = tape.param(&params, "w").unwrap();
        let w2 = tape.param(&params, "w").unwrap();
        let loss = tape.add(w1, w2).unwrap();
        let grads = tape.grad(loss, &params).unwrap();
        assert_eq!(grads["w"].item().unwrap(), 2.0);
    }

    #[test]
    fn structural_ops_roundtrip_gradients() {
        // loss = sum(concat(a, broadcast(b, 2))^2); check against hand values.
        let mut params = ParameterSet::new();
        params.insert("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        params.insert("b", Tensor::matrix(1, 1, vec![5.0]).unwrap());
        let mut tape = Tape::new();
        let a = tape.param(&params, "a").unwrap();
        let b = tape.param(&params, "b").unwrap();
        let bb = tape.broadcast_rows(b, 2).unwrap();
        let cat = tape.concat_cols(a, bb).unwrap();
        let sq = tape.square(cat);
        let loss = tape.sum_all(sq);
        assert_eq!(
            tape.value(loss).item().unwrap(),
            1.0 + 4.0 + 9.0 + 16.0 + 25.0 + 25.0
        );
        let grads = tape.grad(loss, &params).unwrap();
        assert_eq!(grads["a"].values(), &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(grads["b"].item().unwrap(), 2.0 * 5.0 + 2.0 * 5.0);
    }

    #[test]
    fn sum_rows_matches_fold() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let s = tape.sum_rows(x);
        assert_eq!(tape.value(s).values(), &[9.0, 12.0]);
    }
}
