//! Reverse-mode differentiation on a flat tape, covering exactly the ops the
//! encoder-decoder model needs.
//!
//! A [`Tape`] borrows the parameter set, records forward values, and
//! `backward` walks the op list in reverse accumulating gradients. Leased
//! parameters become leaf nodes (deduplicated, so shared weights such as the
//! tied vocabulary embedding accumulate gradients from every use site).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, softmax_row, Tensor};

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}

pub type NodeId = usize;
pub type ParamId = usize;

enum Op<S> {
    Leaf { param: ParamId },
    Input,
    Matmul { a: NodeId, b: NodeId },
    /// a (m,k) x b^T where b is (n,k)
    MatmulBt { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Row-broadcast add of a 1-D bias.
    AddBias { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: S },
    Relu { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Tensor<S>, inv_std: Vec<S> },
    Attention {
        x: NodeId,
        ctx: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        heads: usize,
        q_heads: Vec<Tensor<S>>,
        k_heads: Vec<Tensor<S>>,
        v_heads: Vec<Tensor<S>>,
        probs: Vec<Tensor<S>>,
        o_concat: Tensor<S>,
    },
    /// Gather rows of `table` at `ids`.
    Embed { table: NodeId, ids: Vec<usize> },
    /// Copy of `base` with `positions` rows overwritten by the rows of `rows`.
    ReplaceRows { base: NodeId, rows: NodeId, positions: Vec<usize> },
    /// Mean masked negative log-likelihood over rows of logits.
    MaskedCe { logits: NodeId, targets: Vec<usize>, mask: Vec<bool>, probs: Tensor<S>, weight: usize },
    WeightedSum { terms: Vec<(NodeId, S)> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

pub struct Tape<'p, S: Scalar> {
    params: &'p [Parameter<S>],
    nodes: Vec<Node<S>>,
    leaf_of: HashMap<ParamId, NodeId>,
    grads: Vec<Option<Tensor<S>>>,
    /// Count of masked-CE losses that saw an empty mask (loss forced to 0).
    pub empty_mask_events: usize,
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new(params: &'p [Parameter<S>]) -> Self {
        Tape { params, nodes: Vec::new(), leaf_of: HashMap::new(), grads: Vec::new(), empty_mask_events: 0 }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    /// Forward value of a node (leaf nodes read through to the parameter).
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        match self.nodes[id].op {
            Op::Leaf { param } => &self.params[param].value,
            _ => &self.nodes[id].value,
        }
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Leases a parameter in as a leaf node; repeated leases return the same
    /// node so gradients from all uses accumulate together.
    pub fn leaf(&mut self, param: ParamId) -> NodeId {
        if let Some(&id) = self.leaf_of.get(&param) {
            return id;
        }
        let id = self.push(Tensor::zeros(&[0]), Op::Leaf { param });
        self.leaf_of.insert(param, id);
        id
    }

    /// A constant with no gradient.
    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_bt(self.value(b))?;
        Ok(self.push(v, Op::MatmulBt { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2()?;
        if self.value(bias).shape() != [c] {
            return Err(Error::Dimension(format!(
                "add_bias: bias shape {:?} vs {} cols",
                self.value(bias).shape(),
                c
            )));
        }
        let mut v = self.value(a).clone();
        {
            let bvals = self.value(bias);
            for i in 0..r {
                let brow = bvals.data();
                // rows and bias come from different tensors; v is local
                let vrow = v.row_mut(i);
                for (o, &b) in vrow.iter_mut().zip(brow) {
                    *o += b;
                }
            }
        }
        Ok(self.push(v, Op::AddBias { a, bias }))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(v, Op::Relu { a })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        let epsv = S::of_f64(eps);
        let mut xhat = Tensor::zeros(&[r, c]);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Tensor::zeros(&[r, c]);
        let cf = S::of_f64(c as f64);
        for i in 0..r {
            let xr = self.value(x).row(i);
            let mean = xr.iter().copied().sum::<S>() / cf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / cf;
            let inv = S::one() / (var + epsv).sqrt();
            inv_std.push(inv);
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for j in 0..c {
                let xh = (xr[j] - mean) * inv;
                xhat.row_mut(i)[j] = xh;
                out.row_mut(i)[j] = xh * g[j] + b[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    /// Multi-head scaled dot-product attention with projection weights.
    ///
    /// `x` provides queries, `ctx` provides keys/values (pass the same node
    /// for self-attention). `causal` masks future positions (requires square
    /// score matrices).
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        x: NodeId,
        ctx: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        heads: usize,
        causal: bool,
    ) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2()?;
        let (m, d2) = self.value(ctx).dims2()?;
        if d != d2 {
            return Err(Error::Dimension(format!("attention: d_model {d} vs {d2}")));
        }
        if d % heads != 0 {
            return Err(Error::Config(format!("d_model {d} not divisible by {heads} heads")));
        }
        if causal && n != m {
            return Err(Error::Dimension("causal attention needs square scores".into()));
        }
        let dh = d / heads;
        let scale = S::of_f64(1.0 / (dh as f64).sqrt());

        let q = self.value(x).matmul(self.value(wq))?;
        let k = self.value(ctx).matmul(self.value(wk))?;
        let v = self.value(ctx).matmul(self.value(wv))?;

        let mut q_heads = Vec::with_capacity(heads);
        let mut k_heads = Vec::with_capacity(heads);
        let mut v_heads = Vec::with_capacity(heads);
        let mut probs = Vec::with_capacity(heads);
        let mut o_concat = Tensor::zeros(&[n, d]);

        for h in 0..heads {
            let qh = slice_cols(&q, h * dh, dh);
            let kh = slice_cols(&k, h * dh, dh);
            let vh = slice_cols(&v, h * dh, dh);
            let mut scores = qh.matmul_bt(&kh)?;
            scores.scale_inplace(scale);
            if causal {
                for i in 0..n {
                    for j in (i + 1)..m {
                        scores.row_mut(i)[j] = S::neg_infinity();
                    }
                }
            }
            let mut ph = scores;
            for i in 0..n {
                softmax_row(ph.row_mut(i));
            }
            let oh = ph.matmul(&vh)?;
            for i in 0..n {
                o_concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(oh.row(i));
            }
            q_heads.push(qh);
            k_heads.push(kh);
            v_heads.push(vh);
            probs.push(ph);
        }

        let out = o_concat.matmul(self.value(wo))?;
        Ok(self.push(
            out,
            Op::Attention { x, ctx, wq, wk, wv, wo, heads, q_heads, k_heads, v_heads, probs, o_concat },
        ))
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Dimension(format!("embed: id {bad} out of {rows} rows")));
        }
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.value(table).row(id));
        }
        Ok(self.push(out, Op::Embed { table, ids: ids.to_vec() }))
    }

    pub fn replace_rows(&mut self, base: NodeId, positions: &[usize], rows: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(base).dims2()?;
        let (rn, rd) = self.value(rows).dims2()?;
        if rn != positions.len() || rd != d {
            return Err(Error::Dimension(format!(
                "replace_rows: {} positions, rows shape {:?}, base {:?}",
                positions.len(),
                self.value(rows).shape(),
                self.value(base).shape()
            )));
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= n) {
            return Err(Error::Dimension(format!("replace_rows: position {bad} out of {n}")));
        }
        let mut out = self.value(base).clone();
        for (j, &p) in positions.iter().enumerate() {
            let src = self.value(rows).row(j);
            out.row_mut(p).copy_from_slice(src);
        }
        Ok(self.push(out, Op::ReplaceRows { base, rows, positions: positions.to_vec() }))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is
    /// true. An all-false mask yields a zero loss and bumps
    /// `empty_mask_events`.
    pub fn masked_ce(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        let (r, c) = self.value(logits).dims2()?;
        if targets.len() != r || mask.len() != r {
            return Err(Error::Dimension(format!(
                "masked_ce: {r} rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Dimension(format!("masked_ce: target {bad} out of {c} classes")));
        }
        let weight = mask.iter().filter(|&&m| m).count();
        let mut probs = self.value(logits).clone();
        let mut total = S::zero();
        for i in 0..r {
            let row = probs.row_mut(i);
            // one exp pass: softmax in place, log-sum-exp from its sum
            let mut mx = row[0];
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let target_logit = row[targets[i]];
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            if mask[i] {
                total += mx + sum.ln() - target_logit;
            }
            let inv = S::one() / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let value = if weight == 0 {
            self.empty_mask_events += 1;
            S::zero()
        } else {
            total / S::of_f64(weight as f64)
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::MaskedCe { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, weight },
        ))
    }

    /// Scalar combination `sum_k c_k * x_k` of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, S)]) -> NodeId {
        let v = terms.iter().map(|&(id, c)| self.value(id).item() * c).sum();
        self.push(Tensor::scalar(v), Op::WeightedSum { terms: terms.to_vec() })
    }

    fn accumulate(grads: &mut [Option<Tensor<S>>], id: NodeId, g: Tensor<S>) {
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar root; gradients are then available via
    /// [`Tape::grad`] / [`Tape::into_leaf_grads`].
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Dimension("backward root must be scalar".into()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::from_vec(self.value(root).shape(), vec![S::one()]).unwrap());

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf { .. } | Op::Input => {
                    grads[id] = Some(g); // keep for extraction
                    continue;
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = g.matmul_bt(self.value(b))?;
                    let db = self.value(a).matmul_tn(&g)?;
                    Self::accumulate(&mut grads, a, da);
                    Self::accumulate(&mut grads, b, db);
                }
                Op::MatmulBt { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = g.matmul(self.value(b))?;
                    let db = g.matmul_tn(self.value(a))?;
                    Self::accumulate(&mut grads, a, da);
                    Self::accumulate(&mut grads, b, db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    Self::accumulate(&mut grads, a, g.clone());
                    Self::accumulate(&mut grads, b, g);
                }
                Op::AddBias { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    let (r, c) = g.dims2()?;
                    let mut db = Tensor::zeros(&[c]);
                    for i in 0..r {
                        let grow = g.row(i);
                        for (o, &gv) in db.data_mut().iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                    Self::accumulate(&mut grads, a, g);
                    Self::accumulate(&mut grads, bias, db);
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    Self::accumulate(&mut grads, a, g.scale(c));
                }
                Op::Relu { a } => {
                    let a = *a;
                    let mut da = g;
                    for (dv, &v) in da.data_mut().iter_mut().zip(self.nodes[id].value.data()) {
                        if v <= S::zero() {
                            *dv = S::zero();
                        }
                    }
                    Self::accumulate(&mut grads, a, da);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let (r, c) = g.dims2()?;
                    let cf = S::of_f64(c as f64);
                    let gainv = self.value(gain).data();
                    let mut dgain = Tensor::zeros(&[c]);
                    let mut dbias = Tensor::zeros(&[c]);
                    let mut dx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        let grow = g.row(i);
                        let xh = xhat.row(i);
                        let inv = inv_std[i];
                        let mut mean_dxh = S::zero();
                        let mut mean_dxh_xh = S::zero();
                        for j in 0..c {
                            let dxh = grow[j] * gainv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                            dgain.data_mut()[j] += grow[j] * xh[j];
                            dbias.data_mut()[j] += grow[j];
                        }
                        mean_dxh = mean_dxh / cf;
                        mean_dxh_xh = mean_dxh_xh / cf;
                        for j in 0..c {
                            let dxh = grow[j] * gainv[j];
                            dx.row_mut(i)[j] = inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    Self::accumulate(&mut grads, x, dx);
                    Self::accumulate(&mut grads, gain, dgain);
                    Self::accumulate(&mut grads, bias, dbias);
                }
                Op::Attention { x, ctx, wq, wk, wv, wo, heads, q_heads, k_heads, v_heads, probs, o_concat } => {
                    let (x, ctx, wq, wk, wv, wo, heads) = (*x, *ctx, *wq, *wk, *wv, *wo, *heads);
                    let (n, d) = g.dims2()?;
                    let m = k_heads[0].shape()[0];
                    let dh = d / heads;
                    let scale = S::of_f64(1.0 / (dh as f64).sqrt());

                    let dwo = o_concat.matmul_tn(&g)?;
                    let d_o = g.matmul_bt(self.value(wo))?;

                    let mut dq = Tensor::zeros(&[n, d]);
                    let mut dk = Tensor::zeros(&[m, d]);
                    let mut dv = Tensor::zeros(&[m, d]);
                    for h in 0..heads {
                        let doh = slice_cols(&d_o, h * dh, dh);
                        let ph = &probs[h];
                        // dV_h = P^T dO_h ; dP = dO_h V_h^T
                        let dvh = ph.matmul_tn(&doh)?;
                        let dp = doh.matmul_bt(&v_heads[h])?;
                        // softmax backward rows
                        let mut ds = Tensor::zeros(&[n, m]);
                        for i in 0..n {
                            let prow = ph.row(i);
                            let dprow = dp.row(i);
                            let dotv: S = dot(prow, dprow);
                            for j in 0..m {
                                ds.row_mut(i)[j] = prow[j] * (dprow[j] - dotv) * scale;
                            }
                        }
                        let dqh = ds.matmul(&k_heads[h])?;
                        let dkh = ds.matmul_tn(&q_heads[h])?;
                        write_cols(&mut dq, h * dh, &dqh);
                        write_cols(&mut dk, h * dh, &dkh);
                        write_cols(&mut dv, h * dh, &dvh);
                    }

                    let dwq = self.value(x).matmul_tn(&dq)?;
                    let dwk = self.value(ctx).matmul_tn(&dk)?;
                    let dwv = self.value(ctx).matmul_tn(&dv)?;
                    let dx = dq.matmul_bt(self.value(wq))?;
                    let dctx_k = dk.matmul_bt(self.value(wk))?;
                    let dctx_v = dv.matmul_bt(self.value(wv))?;

                    Self::accumulate(&mut grads, wo, dwo);
                    Self::accumulate(&mut grads, wq, dwq);
                    Self::accumulate(&mut grads, wk, dwk);
                    Self::accumulate(&mut grads, wv, dwv);
                    Self::accumulate(&mut grads, x, dx);
                    Self::accumulate(&mut grads, ctx, dctx_k);
                    Self::accumulate(&mut grads, ctx, dctx_v);
                }
                Op::Embed { table, ids } => {
                    let table = *table;
                    let (rows, d) = self.value(table).dims2()?;
                    let mut dt = Tensor::zeros(&[rows, d]);
                    for (i, &id2) in ids.iter().enumerate() {
                        let grow = g.row(i);
                        for (o, &gv) in dt.row_mut(id2).iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                    Self::accumulate(&mut grads, table, dt);
                }
                Op::ReplaceRows { base, rows, positions } => {
                    let (base, rows) = (*base, *rows);
                    let mut dbase = g.clone();
                    let (_, d) = g.dims2()?;
                    let mut drows = Tensor::zeros(&[positions.len(), d]);
                    for (j, &p) in positions.iter().enumerate() {
                        drows.row_mut(j).copy_from_slice(g.row(p));
                        dbase.row_mut(p).fill(S::zero());
                    }
                    Self::accumulate(&mut grads, base, dbase);
                    Self::accumulate(&mut grads, rows, drows);
                }
                Op::MaskedCe { logits, targets, mask, probs, weight } => {
                    let logits = *logits;
                    if *weight == 0 {
                        continue;
                    }
                    let gv = g.item() / S::of_f64(*weight as f64);
                    let (r, c) = probs.dims2()?;
                    let mut dl = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        if !mask[i] {
                            continue;
                        }
                        let prow = probs.row(i);
                        let drow = dl.row_mut(i);
                        for j in 0..c {
                            drow[j] = gv * prow[j];
                        }
                        drow[targets[i]] -= gv;
                    }
                    Self::accumulate(&mut grads, logits, dl);
                }
                Op::WeightedSum { terms } => {
                    let gv = g.item();
                    let terms = terms.clone();
                    for (tid, c) in terms {
                        Self::accumulate(&mut grads, tid, Tensor::scalar(gv * c));
                    }
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Consumes the tape and returns `(param, gradient)` pairs in node order.
    pub fn into_leaf_grads(mut self) -> Vec<(ParamId, Tensor<S>)> {
        let mut out = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param } = node.op {
                if let Some(slot) = self.grads.get_mut(id) {
                    if let Some(g) = slot.take() {
                        out.push((param, g));
                    }
                }
            }
        }
        out
    }
}

fn slice_cols<S: Scalar>(t: &Tensor<S>, start: usize, width: usize) -> Tensor<S> {
    let (r, _c) = t.dims2().expect("slice_cols wants 2-D");
    let mut out = Tensor::zeros(&[r, width]);
    for i in 0..r {
        out.row_mut(i).copy_from_slice(&t.row(i)[start..start + width]);
    }
    out
}

fn write_cols<S: Scalar>(dst: &mut Tensor<S>, start: usize, src: &Tensor<S>) {
    let (r, w) = src.dims2().expect("write_cols wants 2-D");
    for i in 0..r {
        dst.row_mut(i)[start..start + w].copy_from_slice(src.row(i));
    }
}
