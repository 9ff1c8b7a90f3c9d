//! Recorded computation graph with reverse-mode gradients.
//!
//! Forward methods execute eagerly, cache what the backward pass needs, and
//! return node ids. Values are batches: every sample flows through the same
//! layer stack, while per-sample site sets may differ. The backward sweep
//! walks nodes in reverse creation order exactly once, accumulates parameter
//! gradients by name, and keeps gradients at leaf nodes so truncation and
//! input-sensitivity checks can read them.

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::params::ParamRef;
use crate::nn::rulebook::{ConvRulebook, PoolRulebook};
use crate::scalar::Scalar;
use crate::sparse::SparseTensor;
use std::collections::BTreeMap;
use std::sync::Arc;

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub enum Value<T> {
    Sparse(Vec<SparseTensor<T>>),
    /// Batch-major dense buffer, `data.len() == batch * width`.
    Dense { width: usize, data: Vec<T> },
    Scalar(T),
}

#[derive(Debug, Clone)]
pub enum Grad<T> {
    /// Per-sample feature-buffer gradients, aligned with the value's sites.
    Sparse(Vec<Vec<T>>),
    Dense(Vec<T>),
    Scalar(T),
}

enum Op<T> {
    Leaf,
    SubmConv {
        rbs: Vec<Arc<ConvRulebook>>,
        w: ParamRef<T>,
        b: ParamRef<T>,
        cin: usize,
        cout: usize,
    },
    MaxPool {
        argmax: Vec<Vec<u32>>,
    },
    BatchNorm {
        gamma: ParamRef<T>,
        beta: ParamRef<T>,
        mean: Vec<T>,
        invstd: Vec<T>,
        /// `Some(active-site count)` in train mode (batch-statistics
        /// backward); `None` in infer mode (constant statistics).
        train_n: Option<usize>,
    },
    Relu,
    Sigmoid,
    Tanh,
    Mul,
    /// inputs [z, a, b]; value = a + z * (b - a).
    Lerp,
    Concat {
        c_first: usize,
    },
    Materialize {
        /// Per sample: position of each input site in the output site list.
        maps: Vec<Vec<u32>>,
    },
    ResetSlots {
        slots: Vec<usize>,
    },
    Flatten,
    Linear {
        w: ParamRef<T>,
        b: ParamRef<T>,
        nin: usize,
        nout: usize,
    },
    ReluDense,
    /// value = sum of cached per-sample losses; `grads` is the batch-major
    /// gradient of that sum wrt the dense input.
    ScalarFromDense {
        grads: Vec<T>,
    },
    AddScalars,
    ScaleScalar {
        factor: T,
    },
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Value<T>,
}

pub struct Gradients<T> {
    /// Parameter-name keyed gradients, shapes matching the parameter data.
    pub by_param: BTreeMap<String, Vec<T>>,
    /// Gradients retained at leaf nodes.
    pub by_leaf: BTreeMap<NodeId, Grad<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, name: &str) -> Option<&[T]> {
        self.by_param.get(name).map(|v| v.as_slice())
    }
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Value<T> {
        &self.nodes[id].value
    }

    pub fn sparse_batch(&self, id: NodeId) -> Result<&[SparseTensor<T>]> {
        match &self.nodes[id].value {
            Value::Sparse(batch) => Ok(batch),
            _ => Err(Error::Dimension(format!("node {id} is not sparse"))),
        }
    }

    pub fn dense_batch(&self, id: NodeId) -> Result<(usize, &[T])> {
        match &self.nodes[id].value {
            Value::Dense { width, data } => Ok((*width, data)),
            _ => Err(Error::Dimension(format!("node {id} is not dense"))),
        }
    }

    pub fn scalar(&self, id: NodeId) -> Result<T> {
        match &self.nodes[id].value {
            Value::Scalar(v) => Ok(*v),
            _ => Err(Error::Dimension(format!("node {id} is not scalar"))),
        }
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Value<T>) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        self.nodes.len() - 1
    }

    pub fn leaf_sparse(&mut self, batch: Vec<SparseTensor<T>>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), Value::Sparse(batch))
    }

    pub fn leaf_dense(&mut self, width: usize, data: Vec<T>) -> NodeId {
        self.push(Op::Leaf, Vec::new(), Value::Dense { width, data })
    }

    pub fn subm_conv(
        &mut self,
        x: NodeId,
        rbs: Vec<Arc<ConvRulebook>>,
        w: ParamRef<T>,
        b: ParamRef<T>,
        cin: usize,
        cout: usize,
    ) -> Result<NodeId> {
        let batch = self.sparse_batch(x)?;
        if rbs.len() != batch.len() {
            return Err(Error::Dimension(format!(
                "{} rulebooks for batch of {}",
                rbs.len(),
                batch.len()
            )));
        }
        if w.data.len() != ops::conv_weight_len(cin, cout) || b.data.len() != cout {
            return Err(Error::Dimension(format!(
                "conv {} weight/bias sizes do not match {cin}->{cout}",
                w.name
            )));
        }
        let mut out = Vec::with_capacity(batch.len());
        for (t, rb) in batch.iter().zip(&rbs) {
            if t.channels() != cin {
                return Err(Error::Dimension(format!(
                    "conv {} expects {cin} channels, input has {}",
                    w.name,
                    t.channels()
                )));
            }
            if rb.n_sites != t.site_count() {
                return Err(Error::Dimension(format!(
                    "rulebook built for {} sites, input has {}",
                    rb.n_sites,
                    t.site_count()
                )));
            }
            let features = ops::conv_forward(rb, t.features(), cin, cout, &w.data, &b.data);
            out.push(SparseTensor::new(
                t.rows(),
                t.cols(),
                cout,
                t.linear_sites().to_vec(),
                features,
            )?);
        }
        Ok(self.push(
            Op::SubmConv {
                rbs,
                w,
                b,
                cin,
                cout,
            },
            vec![x],
            Value::Sparse(out),
        ))
    }

    pub fn max_pool(&mut self, x: NodeId, rbs: Vec<Arc<PoolRulebook>>) -> Result<NodeId> {
        let batch = self.sparse_batch(x)?;
        if rbs.len() != batch.len() {
            return Err(Error::Dimension(format!(
                "{} pool rulebooks for batch of {}",
                rbs.len(),
                batch.len()
            )));
        }
        let mut out = Vec::with_capacity(batch.len());
        let mut argmax_all = Vec::with_capacity(batch.len());
        for (t, rb) in batch.iter().zip(&rbs) {
            let ch = t.channels();
            let (features, argmax) = ops::pool_forward(rb, t.features(), ch);
            argmax_all.push(argmax);
            out.push(SparseTensor::new(
                rb.out_rows,
                rb.out_cols,
                ch,
                rb.out_sites.clone(),
                features,
            )?);
        }
        Ok(self.push(
            Op::MaxPool { argmax: argmax_all },
            vec![x],
            Value::Sparse(out),
        ))
    }

    /// Train-mode batch norm: statistics over all active sites across the
    /// batch. Returns the node and the batch statistics so the caller can
    /// update running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: ParamRef<T>,
        beta: ParamRef<T>,
        eps: T,
    ) -> Result<(NodeId, ops::BnStats<T>)> {
        let batch = self.sparse_batch(x)?;
        let ch = gamma.data.len();
        let buffers: Vec<&[T]> = batch.iter().map(|t| t.features()).collect();
        let stats = ops::bn_stats(&buffers, ch, eps)?;
        let out = self.bn_apply_batch(x, &gamma, &beta, &stats.mean, &stats.invstd)?;
        let id = self.push(
            Op::BatchNorm {
                gamma,
                beta,
                mean: stats.mean.clone(),
                invstd: stats.invstd.clone(),
                train_n: Some(stats.n),
            },
            vec![x],
            Value::Sparse(out),
        );
        Ok((id, stats))
    }

    /// Infer-mode batch norm with fixed running statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: NodeId,
        gamma: ParamRef<T>,
        beta: ParamRef<T>,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<NodeId> {
        let invstd: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let out = self.bn_apply_batch(x, &gamma, &beta, running_mean, &invstd)?;
        Ok(self.push(
            Op::BatchNorm {
                gamma,
                beta,
                mean: running_mean.to_vec(),
                invstd,
                train_n: None,
            },
            vec![x],
            Value::Sparse(out),
        ))
    }

    fn bn_apply_batch(
        &self,
        x: NodeId,
        gamma: &ParamRef<T>,
        beta: &ParamRef<T>,
        mean: &[T],
        invstd: &[T],
    ) -> Result<Vec<SparseTensor<T>>> {
        let batch = self.sparse_batch(x)?;
        let ch = gamma.data.len();
        let mut out = Vec::with_capacity(batch.len());
        for t in batch {
            if t.channels() != ch {
                return Err(Error::Dimension(format!(
                    "batch norm {} expects {ch} channels, input has {}",
                    gamma.name,
                    t.channels()
                )));
            }
            let features = ops::bn_apply(t.features(), ch, mean, invstd, &gamma.data, &beta.data);
            let mut o = t.clone();
            o.features_mut().copy_from_slice(&features);
            out.push(o);
        }
        Ok(out)
    }

    fn elementwise(
        &mut self,
        x: NodeId,
        op: Op<T>,
        f: impl Fn(T) -> T,
    ) -> Result<NodeId> {
        let batch = self.sparse_batch(x)?;
        let out: Vec<SparseTensor<T>> = batch
            .iter()
            .map(|t| {
                let mut o = t.clone();
                for v in o.features_mut() {
                    *v = f(*v);
                }
                o
            })
            .collect();
        Ok(self.push(op, vec![x], Value::Sparse(out)))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.elementwise(x, Op::Relu, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.elementwise(x, Op::Sigmoid, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.elementwise(x, Op::Tanh, |v| v.tanh())
    }

    fn check_same_sites(&self, a: NodeId, b: NodeId) -> Result<()> {
        let ba = self.sparse_batch(a)?;
        let bb = self.sparse_batch(b)?;
        if ba.len() != bb.len() {
            return Err(Error::Dimension(format!(
                "batch sizes differ: {} vs {}",
                ba.len(),
                bb.len()
            )));
        }
        for (ta, tb) in ba.iter().zip(bb) {
            if ta.rows() != tb.rows()
                || ta.cols() != tb.cols()
                || ta.linear_sites() != tb.linear_sites()
            {
                return Err(Error::Dimension(
                    "operands have different active-site sets".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Elementwise product; operands must share site sets and channels.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_sites(a, b)?;
        let ba = self.sparse_batch(a)?;
        let bb = self.sparse_batch(b)?;
        let mut out = Vec::with_capacity(ba.len());
        for (ta, tb) in ba.iter().zip(bb) {
            if ta.channels() != tb.channels() {
                return Err(Error::Dimension("mul operand channels differ".to_string()));
            }
            let mut o = ta.clone();
            for (v, &w) in o.features_mut().iter_mut().zip(tb.features()) {
                *v *= w;
            }
            out.push(o);
        }
        Ok(self.push(Op::Mul, vec![a, b], Value::Sparse(out)))
    }

    /// Gated mix `a + z * (b - a)`, i.e. `(1 - z) * a + z * b`.
    pub fn lerp(&mut self, z: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_sites(z, a)?;
        self.check_same_sites(z, b)?;
        let bz = self.sparse_batch(z)?;
        let ba = self.sparse_batch(a)?;
        let bb = self.sparse_batch(b)?;
        let mut out = Vec::with_capacity(bz.len());
        for ((tz, ta), tb) in bz.iter().zip(ba).zip(bb) {
            let mut o = ta.clone();
            for ((v, &zv), (&av, &bv)) in o
                .features_mut()
                .iter_mut()
                .zip(tz.features())
                .zip(ta.features().iter().zip(tb.features()))
            {
                *v = av + zv * (bv - av);
            }
            out.push(o);
        }
        Ok(self.push(Op::Lerp, vec![z, a, b], Value::Sparse(out)))
    }

    /// Channel concatenation of two batches on identical site sets.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_sites(a, b)?;
        let ba = self.sparse_batch(a)?;
        let bb = self.sparse_batch(b)?;
        let c_first = ba.first().map(|t| t.channels()).unwrap_or(0);
        let mut out = Vec::with_capacity(ba.len());
        for (ta, tb) in ba.iter().zip(bb) {
            let (ca, cb) = (ta.channels(), tb.channels());
            let n = ta.site_count();
            let mut features = Vec::with_capacity(n * (ca + cb));
            for i in 0..n {
                features.extend_from_slice(ta.site_features(i));
                features.extend_from_slice(tb.site_features(i));
            }
            out.push(SparseTensor::new(
                ta.rows(),
                ta.cols(),
                ca + cb,
                ta.linear_sites().to_vec(),
                features,
            )?);
        }
        Ok(self.push(Op::Concat { c_first }, vec![a, b], Value::Sparse(out)))
    }

    /// Re-emits each sample on a superset site list, filling new sites with
    /// zeros. `target_sites[s]` must contain sample `s`'s sites.
    pub fn materialize(&mut self, x: NodeId, target_sites: Vec<Vec<u32>>) -> Result<NodeId> {
        let batch = self.sparse_batch(x)?;
        if target_sites.len() != batch.len() {
            return Err(Error::Dimension("materialize batch mismatch".to_string()));
        }
        let mut out = Vec::with_capacity(batch.len());
        let mut maps = Vec::with_capacity(batch.len());
        for (t, target) in batch.iter().zip(&target_sites) {
            let ch = t.channels();
            let mut features = vec![T::zero(); target.len() * ch];
            let mut map = Vec::with_capacity(t.site_count());
            for (i, &lin) in t.linear_sites().iter().enumerate() {
                let pos = target.binary_search(&lin).map_err(|_| {
                    Error::Dimension(format!("materialize target misses site {lin}"))
                })?;
                features[pos * ch..(pos + 1) * ch].copy_from_slice(t.site_features(i));
                map.push(pos as u32);
            }
            maps.push(map);
            out.push(SparseTensor::new(
                t.rows(),
                t.cols(),
                ch,
                target.clone(),
                features,
            )?);
        }
        Ok(self.push(Op::Materialize { maps }, vec![x], Value::Sparse(out)))
    }

    /// Replaces the listed batch slots with `template` (gradient-blocked);
    /// other slots pass through unchanged.
    pub fn reset_slots(
        &mut self,
        x: NodeId,
        slots: &[usize],
        template: &SparseTensor<T>,
    ) -> Result<NodeId> {
        let batch = self.sparse_batch(x)?;
        let mut out: Vec<SparseTensor<T>> = batch.to_vec();
        for &s in slots {
            if s >= out.len() {
                return Err(Error::Dimension(format!("reset of slot {s} out of range")));
            }
            out[s] = template.clone();
        }
        Ok(self.push(
            Op::ResetSlots {
                slots: slots.to_vec(),
            },
            vec![x],
            Value::Sparse(out),
        ))
    }

    /// Scatters each sample onto its dense `rows * cols * channels` grid and
    /// emits the batch as one dense node.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let batch = self.sparse_batch(x)?;
        if batch.is_empty() {
            return Err(Error::Dimension("flatten of empty batch".to_string()));
        }
        let width = batch[0].rows() * batch[0].cols() * batch[0].channels();
        let mut data = Vec::with_capacity(batch.len() * width);
        for t in batch {
            if t.rows() * t.cols() * t.channels() != width {
                return Err(Error::Dimension("flatten with ragged shapes".to_string()));
            }
            data.extend_from_slice(&t.to_dense());
        }
        Ok(self.push(Op::Flatten, vec![x], Value::Dense { width, data }))
    }

    pub fn linear(
        &mut self,
        x: NodeId,
        w: ParamRef<T>,
        b: ParamRef<T>,
        nin: usize,
        nout: usize,
    ) -> Result<NodeId> {
        let (width, data) = self.dense_batch(x)?;
        if width != nin || w.data.len() != nin * nout || b.data.len() != nout {
            return Err(Error::Dimension(format!(
                "linear {}: input width {width}, expected {nin}",
                w.name
            )));
        }
        let batch = data.len() / width;
        let mut out = Vec::with_capacity(batch * nout);
        for s in 0..batch {
            let xs = &data[s * nin..(s + 1) * nin];
            out.extend_from_slice(&ops::linear_forward(xs, &w.data, &b.data, nin, nout));
        }
        Ok(self.push(
            Op::Linear { w, b, nin, nout },
            vec![x],
            Value::Dense {
                width: nout,
                data: out,
            },
        ))
    }

    pub fn relu_dense(&mut self, x: NodeId) -> Result<NodeId> {
        let (width, data) = self.dense_batch(x)?;
        let out: Vec<T> = data
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        Ok(self.push(
            Op::ReluDense,
            vec![x],
            Value::Dense { width, data: out },
        ))
    }

    /// Attaches a precomputed scalar objective to a dense node: `losses[s]`
    /// and the corresponding rows of `grads` describe sample `s`. The node's
    /// value is the sum of losses; `grads` must be d(sum)/d(input).
    pub fn scalar_from_dense(
        &mut self,
        x: NodeId,
        losses: &[T],
        grads: Vec<T>,
    ) -> Result<NodeId> {
        let (_, data) = self.dense_batch(x)?;
        if grads.len() != data.len() {
            return Err(Error::Dimension(format!(
                "objective gradient holds {} values, input {}",
                grads.len(),
                data.len()
            )));
        }
        let total = losses.iter().fold(T::zero(), |a, &b| a + b);
        Ok(self.push(
            Op::ScalarFromDense { grads },
            vec![x],
            Value::Scalar(total),
        ))
    }

    pub fn add_scalars(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let mut total = T::zero();
        for &id in ids {
            total += self.scalar(id)?;
        }
        Ok(self.push(Op::AddScalars, ids.to_vec(), Value::Scalar(total)))
    }

    pub fn scale_scalar(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        let v = self.scalar(x)?;
        Ok(self.push(
            Op::ScaleScalar { factor },
            vec![x],
            Value::Scalar(v * factor),
        ))
    }

    /// Reverse sweep from the seeded nodes. Visits each node at most once in
    /// reverse creation order; frees intermediate gradients as it goes.
    pub fn backward(&self, seeds: &[(NodeId, T)]) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Training("backward on an empty record".to_string()));
        }
        let mut grads: Vec<Option<Grad<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(id, seed) in seeds {
            if id >= self.nodes.len() {
                return Err(Error::Training(format!("seed node {id} out of range")));
            }
            if !matches!(self.nodes[id].value, Value::Scalar(_)) {
                return Err(Error::Training(format!("seed node {id} is not scalar")));
            }
            match &mut grads[id] {
                Some(Grad::Scalar(v)) => *v += seed,
                slot => *slot = Some(Grad::Scalar(seed)),
            }
        }

        let mut out = Gradients {
            by_param: BTreeMap::new(),
            by_leaf: BTreeMap::new(),
        };

        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    out.by_leaf.insert(id, g);
                }
                Op::SubmConv {
                    rbs,
                    w,
                    b,
                    cin,
                    cout,
                } => {
                    let g_out = as_sparse(&g)?;
                    let x = self.sparse_batch(node.inputs[0])?;
                    let g_w = param_grad(&mut out.by_param, w);
                    let g_b_len = b.data.len();
                    let mut g_b_local = vec![T::zero(); g_b_len];
                    let mut g_xs = Vec::with_capacity(x.len());
                    for ((t, rb), gy) in x.iter().zip(rbs).zip(g_out) {
                        g_xs.push(ops::conv_backward_input(rb, gy, *cin, *cout, &w.data));
                        ops::conv_accumulate_param_grads(
                            rb,
                            t.features(),
                            gy,
                            *cin,
                            *cout,
                            g_w,
                            &mut g_b_local,
                        );
                    }
                    let g_b = param_grad(&mut out.by_param, b);
                    for (a, &v) in g_b.iter_mut().zip(&g_b_local) {
                        *a += v;
                    }
                    accumulate(&mut grads[node.inputs[0]], Grad::Sparse(g_xs))?;
                }
                Op::MaxPool { argmax } => {
                    let g_out = as_sparse(&g)?;
                    let x = self.sparse_batch(node.inputs[0])?;
                    let mut g_xs = Vec::with_capacity(x.len());
                    for ((t, am), gy) in x.iter().zip(argmax).zip(g_out) {
                        g_xs.push(ops::pool_backward(gy, am, t.channels(), t.site_count()));
                    }
                    accumulate(&mut grads[node.inputs[0]], Grad::Sparse(g_xs))?;
                }
                Op::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    invstd,
                    train_n,
                } => {
                    let g_out = as_sparse(&g)?;
                    let x = self.sparse_batch(node.inputs[0])?;
                    let ch = gamma.data.len();
                    let xs: Vec<&[T]> = x.iter().map(|t| t.features()).collect();
                    let gys: Vec<&[T]> = g_out.iter().map(|v| v.as_slice()).collect();
                    let (g_xs, g_gamma, g_beta) = match train_n {
                        Some(n) => {
                            let stats = ops::BnStats {
                                mean: mean.clone(),
                                var: Vec::new(),
                                invstd: invstd.clone(),
                                n: *n,
                            };
                            ops::bn_backward_batch(&xs, &gys, ch, &stats, &gamma.data)
                        }
                        None => {
                            // Constant statistics: y = (x - m) * s * gamma + beta.
                            let mut g_gamma = vec![T::zero(); ch];
                            let mut g_beta = vec![T::zero(); ch];
                            let mut g_xs = Vec::with_capacity(xs.len());
                            for (xv, gy) in xs.iter().zip(&gys) {
                                let mut g_x = vec![T::zero(); xv.len()];
                                for ((gx_site, x_site), gy_site) in g_x
                                    .chunks_exact_mut(ch)
                                    .zip(xv.chunks_exact(ch))
                                    .zip(gy.chunks_exact(ch))
                                {
                                    for c in 0..ch {
                                        let xhat = (x_site[c] - mean[c]) * invstd[c];
                                        g_gamma[c] += gy_site[c] * xhat;
                                        g_beta[c] += gy_site[c];
                                        gx_site[c] = gy_site[c] * gamma.data[c] * invstd[c];
                                    }
                                }
                                g_xs.push(g_x);
                            }
                            (g_xs, g_gamma, g_beta)
                        }
                    };
                    add_into(param_grad(&mut out.by_param, gamma), &g_gamma);
                    add_into(param_grad(&mut out.by_param, beta), &g_beta);
                    accumulate(&mut grads[node.inputs[0]], Grad::Sparse(g_xs))?;
                }
                Op::Relu => {
                    let g_out = as_sparse(&g)?;
                    let x = self.sparse_batch(node.inputs[0])?;
                    let g_xs: Vec<Vec<T>> = x
                        .iter()
                        .zip(g_out)
                        .map(|(t, gy)| {
                            t.features()
                                .iter()
                                .zip(gy)
                                .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                                .collect()
                        })
                        .collect();
                    accumulate(&mut grads[node.inputs[0]], Grad::Sparse(g_xs))?;
                }
                Op::Sigmoid => {
                    let g_out = as_sparse(&g)?;
                    let y = self.sparse_batch(id)?;
                    let g_xs = unary_from_output(y, g_out, |yv, gv| gv * yv * (T::one() - yv));
                    accumulate(&mut grads[node.inputs[0]], Grad::Sparse(g_xs))?;
                }
                Op::Tanh => {
                    let g_out = as_sparse(&g)?;
                    let y = self.sparse_batch(id)?;
                    let g_xs = unary_from_output(y, g_out, |yv, gv| gv * (T::one() - yv * yv));
                    accumulate(&mut grads[node.inputs[0]], Grad::Sparse(g_xs))?;
                }
                Op::Mul => {
                    let g_out = as_sparse(&g)?;
                    let a = self.sparse_batch(node.inputs[0])?;
                    let b = self.sparse_batch(node.inputs[1])?;
                    let g_as: Vec<Vec<T>> = b
                        .iter()
                        .zip(g_out)
                        .map(|(t, gy)| t.features().iter().zip(gy).map(|(&v, &g)| g * v).collect())
                        .collect();
                    let g_bs: Vec<Vec<T>> = a
                        .iter()
                        .zip(g_out)
                        .map(|(t, gy)| t.features().iter().zip(gy).map(|(&v, &g)| g * v).collect())
                        .collect();
                    accumulate(&mut grads[node.inputs[0]], Grad::Sparse(g_as))?;
                    accumulate(&mut grads[node.inputs[1]], Grad::Sparse(g_bs))?;
                }
                Op::Lerp => {
                    let g_out = as_sparse(&g)?;
                    let z = self.sparse_batch(node.inputs[0])?;
                    let a = self.sparse_batch(node.inputs[1])?;
                    let b = self.sparse_batch(node.inputs[2])?;
                    let mut g_zs = Vec::with_capacity(z.len());
                    let mut g_as = Vec::with_capacity(z.len());
                    let mut g_bs = Vec::with_capacity(z.len());
                    for (((tz, ta), tb), gy) in z.iter().zip(a).zip(b).zip(g_out) {
                        let zf = tz.features();
                        let af = ta.features();
                        let bf = tb.features();
                        let mut g_z = Vec::with_capacity(zf.len());
                        let mut g_a = Vec::with_capacity(zf.len());
                        let mut g_b = Vec::with_capacity(zf.len());
                        for i in 0..zf.len() {
                            g_z.push(gy[i] * (bf[i] - af[i]));
                            g_a.push(gy[i] * (T::one() - zf[i]));
                            g_b.push(gy[i] * zf[i]);
                        }
                        g_zs.push(g_z);
                        g_as.push(g_a);
                        g_bs.push(g_b);
                    }
                    accumulate(&mut grads[node.inputs[0]], Grad::Sparse(g_zs))?;
                    accumulate(&mut grads[node.inputs[1]], Grad::Sparse(g_as))?;
                    accumulate(&mut grads[node.inputs[2]], Grad::Sparse(g_bs))?;
                }
                Op::Concat { c_first } => {
                    let g_out = as_sparse(&g)?;
                    let a = self.sparse_batch(node.inputs[0])?;
                    let b = self.sparse_batch(node.inputs[1])?;
                    let mut g_as = Vec::with_capacity(a.len());
                    let mut g_bs = Vec::with_capacity(a.len());
                    for ((ta, tb), gy) in a.iter().zip(b).zip(g_out) {
                        let (ca, cb) = (ta.channels(), tb.channels());
                        debug_assert_eq!(ca, *c_first);
                        let mut g_a = Vec::with_capacity(ta.site_count() * ca);
                        let mut g_b = Vec::with_capacity(tb.site_count() * cb);
                        for site in gy.chunks_exact(ca + cb) {
                            g_a.extend_from_slice(&site[..ca]);
                            g_b.extend_from_slice(&site[ca..]);
                        }
                        g_as.push(g_a);
                        g_bs.push(g_b);
                    }
                    accumulate(&mut grads[node.inputs[0]], Grad::Sparse(g_as))?;
                    accumulate(&mut grads[node.inputs[1]], Grad::Sparse(g_bs))?;
                }
                Op::Materialize { maps } => {
                    let g_out = as_sparse(&g)?;
                    let x = self.sparse_batch(node.inputs[0])?;
                    let mut g_xs = Vec::with_capacity(x.len());
                    for ((t, map), gy) in x.iter().zip(maps).zip(g_out) {
                        let ch = t.channels();
                        let mut g_x = vec![T::zero(); t.site_count() * ch];
                        for (i, &pos) in map.iter().enumerate() {
                            g_x[i * ch..(i + 1) * ch]
                                .copy_from_slice(&gy[pos as usize * ch..(pos as usize + 1) * ch]);
                        }
                        g_xs.push(g_x);
                    }
                    accumulate(&mut grads[node.inputs[0]], Grad::Sparse(g_xs))?;
                }
                Op::ResetSlots { slots } => {
                    let g_out = as_sparse(&g)?;
                    let x = self.sparse_batch(node.inputs[0])?;
                    let mut g_xs: Vec<Vec<T>> = g_out.to_vec();
                    for &s in slots {
                        g_xs[s] = vec![T::zero(); x[s].features().len()];
                    }
                    accumulate(&mut grads[node.inputs[0]], Grad::Sparse(g_xs))?;
                }
                Op::Flatten => {
                    let g_dense = as_dense(&g)?;
                    let x = self.sparse_batch(node.inputs[0])?;
                    let width = x[0].rows() * x[0].cols() * x[0].channels();
                    let mut g_xs = Vec::with_capacity(x.len());
                    for (s, t) in x.iter().enumerate() {
                        let gy = &g_dense[s * width..(s + 1) * width];
                        let ch = t.channels();
                        let mut g_x = vec![T::zero(); t.site_count() * ch];
                        for (i, &lin) in t.linear_sites().iter().enumerate() {
                            g_x[i * ch..(i + 1) * ch]
                                .copy_from_slice(&gy[lin as usize * ch..(lin as usize + 1) * ch]);
                        }
                        g_xs.push(g_x);
                    }
                    accumulate(&mut grads[node.inputs[0]], Grad::Sparse(g_xs))?;
                }
                Op::Linear { w, b, nin, nout } => {
                    let g_dense = as_dense(&g)?;
                    let (_, x) = self.dense_batch(node.inputs[0])?;
                    let batch = x.len() / nin;
                    let g_w = param_grad(&mut out.by_param, w);
                    let mut g_b_local = vec![T::zero(); b.data.len()];
                    let mut g_x = vec![T::zero(); x.len()];
                    for s in 0..batch {
                        let xs = &x[s * nin..(s + 1) * nin];
                        let gy = &g_dense[s * nout..(s + 1) * nout];
                        let gx = ops::linear_backward_input(gy, &w.data, *nin, *nout);
                        g_x[s * nin..(s + 1) * nin].copy_from_slice(&gx);
                        ops::linear_accumulate_param_grads(xs, gy, *nin, g_w, &mut g_b_local);
                    }
                    let g_b = param_grad(&mut out.by_param, b);
                    add_into(g_b, &g_b_local);
                    accumulate(&mut grads[node.inputs[0]], Grad::Dense(g_x))?;
                }
                Op::ReluDense => {
                    let g_dense = as_dense(&g)?;
                    let (_, x) = self.dense_batch(node.inputs[0])?;
                    let g_x: Vec<T> = x
                        .iter()
                        .zip(g_dense)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[node.inputs[0]], Grad::Dense(g_x))?;
                }
                Op::ScalarFromDense { grads: g_cached } => {
                    let s = as_scalar(&g)?;
                    let g_x: Vec<T> = g_cached.iter().map(|&v| v * s).collect();
                    accumulate(&mut grads[node.inputs[0]], Grad::Dense(g_x))?;
                }
                Op::AddScalars => {
                    let s = as_scalar(&g)?;
                    for &input in &node.inputs {
                        accumulate(&mut grads[input], Grad::Scalar(s))?;
                    }
                }
                Op::ScaleScalar { factor } => {
                    let s = as_scalar(&g)?;
                    accumulate(&mut grads[node.inputs[0]], Grad::Scalar(s * *factor))?;
                }
            }
        }
        Ok(out)
    }
}

fn as_sparse<T: Scalar>(g: &Grad<T>) -> Result<&Vec<Vec<T>>> {
    match g {
        Grad::Sparse(v) => Ok(v),
        _ => Err(Error::Training("expected sparse gradient".to_string())),
    }
}

fn as_dense<T: Scalar>(g: &Grad<T>) -> Result<&Vec<T>> {
    match g {
        Grad::Dense(v) => Ok(v),
        _ => Err(Error::Training("expected dense gradient".to_string())),
    }
}

fn as_scalar<T: Scalar>(g: &Grad<T>) -> Result<T> {
    match g {
        Grad::Scalar(v) => Ok(*v),
        _ => Err(Error::Training("expected scalar gradient".to_string())),
    }
}

fn unary_from_output<T: Scalar>(
    y: &[SparseTensor<T>],
    g_out: &[Vec<T>],
    f: impl Fn(T, T) -> T,
) -> Vec<Vec<T>> {
    y.iter()
        .zip(g_out)
        .map(|(t, gy)| {
            t.features()
                .iter()
                .zip(gy)
                .map(|(&yv, &gv)| f(yv, gv))
                .collect()
        })
        .collect()
}

fn param_grad<'a, T: Scalar>(
    by_param: &'a mut BTreeMap<String, Vec<T>>,
    p: &ParamRef<T>,
) -> &'a mut Vec<T> {
    by_param
        .entry(p.name.clone())
        .or_insert_with(|| vec![T::zero(); p.data.len()])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Grad<T>>, add: Grad<T>) -> Result<()> {
    match slot {
        None => {
            *slot = Some(add);
            Ok(())
        }
        Some(existing) => match (existing, add) {
            (Grad::Scalar(a), Grad::Scalar(b)) => {
                *a += b;
                Ok(())
            }
            (Grad::Dense(a), Grad::Dense(b)) => {
                if a.len() != b.len() {
                    return Err(Error::Training("gradient size mismatch".to_string()));
                }
                add_into(a, &b);
                Ok(())
            }
            (Grad::Sparse(a), Grad::Sparse(b)) => {
                if a.len() != b.len() {
                    return Err(Error::Training("gradient batch mismatch".to_string()));
                }
                for (av, bv) in a.iter_mut().zip(&b) {
                    if av.len() != bv.len() {
                        return Err(Error::Training("gradient size mismatch".to_string()));
                    }
                    add_into(av, bv);
                }
                Ok(())
            }
            _ => Err(Error::Training("gradient kind mismatch".to_string())),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{assert_gradients_match, numeric_gradient};
    use crate::nn::ops::conv_weight_len;
    use crate::nn::rulebook::{build_pool_rulebook, build_submanifold_rulebook};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pref(name: &str, data: Vec<f64>) -> ParamRef<f64> {
        ParamRef {
            name: name.to_string(),
            data: Arc::new(data),
        }
    }

    fn sparse(rows: usize, cols: usize, ch: usize, sites: &[u32], f: &[f64]) -> SparseTensor<f64> {
        SparseTensor::new(rows, cols, ch, sites.to_vec(), f.to_vec()).unwrap()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Weighted-sum objective over a dense node: sum_s sum_o c[s,o] y[s,o].
    fn weighted_sum(tape: &mut Tape<f64>, y: NodeId, c: &[f64]) -> NodeId {
        let (width, data) = tape.dense_batch(y).unwrap();
        let batch = data.len() / width;
        let losses: Vec<f64> = (0..batch)
            .map(|s| {
                data[s * width..(s + 1) * width]
                    .iter()
                    .zip(&c[s * width..(s + 1) * width])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        tape.scalar_from_dense(y, &losses, c.to_vec()).unwrap()
    }

    /// Same objective over a sparse node, weights aligned per sample buffer.
    fn weighted_sum_sparse(tape: &mut Tape<f64>, y: NodeId, cs: &[Vec<f64>]) -> NodeId {
        let flat = tape.flatten(y).unwrap();
        let batch = tape.sparse_batch(y).unwrap().to_vec();
        let (width, _) = tape.dense_batch(flat).unwrap();
        let mut c_dense = vec![0.0; batch.len() * width];
        for (s, t) in batch.iter().enumerate() {
            let ch = t.channels();
            for (i, &lin) in t.linear_sites().iter().enumerate() {
                for k in 0..ch {
                    c_dense[s * width + lin as usize * ch + k] = cs[s][i * ch + k];
                }
            }
        }
        weighted_sum(tape, flat, &c_dense)
    }

    #[test]
    fn linear_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (nin, nout, batch) = (4, 3, 2);
        let x0 = rand_vec(&mut rng, nin * batch);
        let w0 = rand_vec(&mut rng, nin * nout);
        let b0 = rand_vec(&mut rng, nout);
        let c = rand_vec(&mut rng, nout * batch);

        let run = |x: &[f64], w: &[f64], b: &[f64]| -> (f64, Tape<f64>, NodeId, NodeId) {
            let mut tape = Tape::new();
            let xn = tape.leaf_dense(nin, x.to_vec());
            let y = tape
                .linear(xn, pref("w", w.to_vec()), pref("b", b.to_vec()), nin, nout)
                .unwrap();
            let loss = weighted_sum(&mut tape, y, &c);
            let v = tape.scalar(loss).unwrap();
            (v, tape, xn, loss)
        };

        let (_, tape, xn, loss) = run(&x0, &w0, &b0);
        let grads = tape.backward(&[(loss, 1.0)]).unwrap();

        let num_x = numeric_gradient(&x0, |x| run(x, &w0, &b0).0);
        let Grad::Dense(g_x) = &grads.by_leaf[&xn] else { panic!() };
        assert_gradients_match(g_x, &num_x, "linear d/dx");

        let num_w = numeric_gradient(&w0, |w| run(&x0, w, &b0).0);
        assert_gradients_match(grads.param("w").unwrap(), &num_w, "linear d/dw");

        let num_b = numeric_gradient(&b0, |b| run(&x0, &w0, b).0);
        assert_gradients_match(grads.param("b").unwrap(), &num_b, "linear d/db");
    }

    #[test]
    fn identity_conv_passes_gradient_through() {
        let sites = vec![3, 9, 10];
        let rb = Arc::new(build_submanifold_rulebook(4, 4, &sites));
        let ch = 2;
        let mut w = vec![0.0; conv_weight_len(ch, ch)];
        for c in 0..ch {
            w[(4 * ch + c) * ch + c] = 1.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = rand_vec(&mut rng, sites.len() * ch);
        let cs = vec![rand_vec(&mut rng, sites.len() * ch)];

        let mut tape = Tape::new();
        let x = tape.leaf_sparse(vec![sparse(4, 4, ch, &sites, &f)]);
        let y = tape
            .subm_conv(x, vec![rb], pref("w", w), pref("b", vec![0.0; ch]), ch, ch)
            .unwrap();
        let loss = weighted_sum_sparse(&mut tape, y, &cs);
        let grads = tape.backward(&[(loss, 1.0)]).unwrap();
        let Grad::Sparse(gx) = &grads.by_leaf[&x] else { panic!() };
        // Identity kernel: gradient wrt input equals the upstream weights.
        for (a, b) in gx[0].iter().zip(&cs[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sites = vec![0, 1, 5, 6, 12, 18, 19];
        let (cin, cout) = (2, 3);
        let rb = Arc::new(build_submanifold_rulebook(5, 4, &sites));
        let x0 = rand_vec(&mut rng, sites.len() * cin);
        let w0 = rand_vec(&mut rng, conv_weight_len(cin, cout));
        let b0 = rand_vec(&mut rng, cout);
        let cs = vec![rand_vec(&mut rng, sites.len() * cout)];

        let run = |x: &[f64], w: &[f64], b: &[f64]| {
            let mut tape = Tape::new();
            let xn = tape.leaf_sparse(vec![sparse(5, 4, cin, &sites, x)]);
            let y = tape
                .subm_conv(
                    xn,
                    vec![Arc::clone(&rb)],
                    pref("w", w.to_vec()),
                    pref("b", b.to_vec()),
                    cin,
                    cout,
                )
                .unwrap();
            let loss = weighted_sum_sparse(&mut tape, y, &cs);
            (tape.scalar(loss).unwrap(), tape, xn, loss)
        };

        let (_, tape, xn, loss) = run(&x0, &w0, &b0);
        let grads = tape.backward(&[(loss, 1.0)]).unwrap();

        let num_x = numeric_gradient(&x0, |x| run(x, &w0, &b0).0);
        let Grad::Sparse(g_x) = &grads.by_leaf[&xn] else { panic!() };
        assert_gradients_match(&g_x[0], &num_x, "conv d/dx");
        let num_w = numeric_gradient(&w0, |w| run(&x0, w, &b0).0);
        assert_gradients_match(grads.param("w").unwrap(), &num_w, "conv d/dw");
        let num_b = numeric_gradient(&b0, |b| run(&x0, &w0, b).0);
        assert_gradients_match(grads.param("b").unwrap(), &num_b, "conv d/db");
    }

    #[test]
    fn batchnorm_train_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ch = 3;
        let sites_a = vec![1u32, 4, 7];
        let sites_b = vec![0u32, 5];
        let na = sites_a.len() * ch;
        let x0 = rand_vec(&mut rng, na + sites_b.len() * ch);
        let gamma0 = rand_vec(&mut rng, ch);
        let beta0 = rand_vec(&mut rng, ch);
        let cs = vec![
            rand_vec(&mut rng, sites_a.len() * ch),
            rand_vec(&mut rng, sites_b.len() * ch),
        ];

        let run = |x: &[f64], gamma: &[f64], beta: &[f64]| {
            let mut tape = Tape::new();
            let xn = tape.leaf_sparse(vec![
                sparse(3, 3, ch, &sites_a, &x[..na]),
                sparse(3, 3, ch, &sites_b, &x[na..]),
            ]);
            let (y, _) = tape
                .batch_norm_train(xn, pref("g", gamma.to_vec()), pref("b", beta.to_vec()), 1e-5)
                .unwrap();
            let loss = weighted_sum_sparse(&mut tape, y, &cs);
            (tape.scalar(loss).unwrap(), tape, xn, loss)
        };

        let (_, tape, xn, loss) = run(&x0, &gamma0, &beta0);
        let grads = tape.backward(&[(loss, 1.0)]).unwrap();

        let num_x = numeric_gradient(&x0, |x| run(x, &gamma0, &beta0).0);
        let Grad::Sparse(g_x) = &grads.by_leaf[&xn] else { panic!() };
        let analytic: Vec<f64> = g_x[0].iter().chain(&g_x[1]).copied().collect();
        assert_gradients_match(&analytic, &num_x, "bn d/dx");

        let num_g = numeric_gradient(&gamma0, |g| run(&x0, g, &beta0).0);
        assert_gradients_match(grads.param("g").unwrap(), &num_g, "bn d/dgamma");
        let num_b = numeric_gradient(&beta0, |b| run(&x0, &gamma0, b).0);
        assert_gradients_match(grads.param("b").unwrap(), &num_b, "bn d/dbeta");
    }

    #[test]
    fn pool_gradient_matches_fd_at_untied_maxima() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sites = vec![0u32, 1, 4, 5, 10, 15];
        let ch = 2;
        // Well-separated values avoid argmax ties under FD probing.
        let mut x0: Vec<f64> = (0..sites.len() * ch).map(|i| i as f64 * 0.37).collect();
        for i in (1..x0.len()).rev() {
            let j = rng.gen_range(0..=i);
            x0.swap(i, j);
        }
        let rb = Arc::new(build_pool_rulebook(4, 4, &sites));
        let cs = vec![rand_vec(&mut rng, rb.out_sites.len() * ch)];

        let run = |x: &[f64]| {
            let mut tape = Tape::new();
            let xn = tape.leaf_sparse(vec![sparse(4, 4, ch, &sites, x)]);
            let y = tape.max_pool(xn, vec![Arc::clone(&rb)]).unwrap();
            let loss = weighted_sum_sparse(&mut tape, y, &cs);
            (tape.scalar(loss).unwrap(), tape, xn, loss)
        };
        let (_, tape, xn, loss) = run(&x0);
        let grads = tape.backward(&[(loss, 1.0)]).unwrap();
        let num = numeric_gradient(&x0, |x| run(x).0);
        let Grad::Sparse(g_x) = &grads.by_leaf[&xn] else { panic!() };
        assert_gradients_match(&g_x[0], &num, "pool d/dx");
    }

    #[test]
    fn gated_mix_chain_matches_fd() {
        // sigmoid/tanh/mul/lerp/concat/materialize composed like a GRU step.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ch = 2;
        let sites_h = vec![0u32, 2, 3];
        let sites_x = vec![0u32, 1, 3];
        let union = vec![0u32, 1, 2, 3];
        let nh = sites_h.len() * ch;
        let all0 = rand_vec(&mut rng, nh + sites_x.len() * ch);
        let rb = Arc::new(build_submanifold_rulebook(2, 2, &union));
        let wz0 = rand_vec(&mut rng, conv_weight_len(2 * ch, ch));
        let bz0 = rand_vec(&mut rng, ch);
        let wh0 = rand_vec(&mut rng, conv_weight_len(2 * ch, ch));
        let bh0 = rand_vec(&mut rng, ch);
        let cs = vec![rand_vec(&mut rng, union.len() * ch)];

        let run = |all: &[f64], wz: &[f64], wh: &[f64]| {
            let mut tape = Tape::new();
            let h = tape.leaf_sparse(vec![sparse(2, 2, ch, &sites_h, &all[..nh])]);
            let x = tape.leaf_sparse(vec![sparse(2, 2, ch, &sites_x, &all[nh..])]);
            let hu = tape.materialize(h, vec![union.clone()]).unwrap();
            let xu = tape.materialize(x, vec![union.clone()]).unwrap();
            let cat = tape.concat(hu, xu).unwrap();
            let z = tape
                .subm_conv(
                    cat,
                    vec![Arc::clone(&rb)],
                    pref("wz", wz.to_vec()),
                    pref("bz", bz0.clone()),
                    2 * ch,
                    ch,
                )
                .map(|n| tape.sigmoid(n).unwrap())
                .unwrap();
            let rh = tape.mul(z, hu).unwrap();
            let cat2 = tape.concat(rh, xu).unwrap();
            let cand = tape
                .subm_conv(
                    cat2,
                    vec![Arc::clone(&rb)],
                    pref("wh", wh.to_vec()),
                    pref("bh", bh0.clone()),
                    2 * ch,
                    ch,
                )
                .map(|n| tape.tanh(n).unwrap())
                .unwrap();
            let out = tape.lerp(z, hu, cand).unwrap();
            let loss = weighted_sum_sparse(&mut tape, out, &cs);
            (tape.scalar(loss).unwrap(), tape, h, x, loss)
        };

        let (_, tape, h, x, loss) = run(&all0, &wz0, &wh0);
        let grads = tape.backward(&[(loss, 1.0)]).unwrap();

        let num = numeric_gradient(&all0, |a| run(a, &wz0, &wh0).0);
        let Grad::Sparse(gh) = &grads.by_leaf[&h] else { panic!() };
        let Grad::Sparse(gx) = &grads.by_leaf[&x] else { panic!() };
        let analytic: Vec<f64> = gh[0].iter().chain(&gx[0]).copied().collect();
        assert_gradients_match(&analytic, &num, "gated chain d/dinputs");

        let num_wz = numeric_gradient(&wz0, |w| run(&all0, w, &wh0).0);
        assert_gradients_match(grads.param("wz").unwrap(), &num_wz, "gated chain d/dwz");
        let num_wh = numeric_gradient(&wh0, |w| run(&all0, &wz0, w).0);
        assert_gradients_match(grads.param("wh").unwrap(), &num_wh, "gated chain d/dwh");
    }

    #[test]
    fn reset_slots_blocks_gradient_and_passes_others() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sites = vec![0u32, 3];
        let ch = 1;
        let f0 = rand_vec(&mut rng, sites.len() * ch);
        let f1 = rand_vec(&mut rng, sites.len() * ch);
        let zeros = SparseTensor::zeros_full(2, 2, ch);

        let mut tape = Tape::new();
        let x = tape.leaf_sparse(vec![
            sparse(2, 2, ch, &sites, &f0),
            sparse(2, 2, ch, &sites, &f1),
        ]);
        let y = tape.reset_slots(x, &[0], &zeros).unwrap();
        let batch = tape.sparse_batch(y).unwrap();
        assert_eq!(batch[0].site_count(), 4);
        assert!(batch[0].features().iter().all(|&v| v == 0.0));
        assert_eq!(batch[1].features(), &f1[..]);

        let cs = vec![vec![1.0; 4], vec![1.0; 2]];
        let loss = weighted_sum_sparse(&mut tape, y, &cs);
        let grads = tape.backward(&[(loss, 1.0)]).unwrap();
        let Grad::Sparse(gx) = &grads.by_leaf[&x] else { panic!() };
        assert!(gx[0].iter().all(|&v| v == 0.0), "reset slot must block grads");
        assert!(gx[1].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn scalar_aggregation_backward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf_dense(2, vec![1.0, 2.0, 3.0, 4.0]);
        let l1 = tape
            .scalar_from_dense(x, &[3.0, 7.0], vec![1.0, 1.0, 1.0, 1.0])
            .unwrap();
        let l2 = tape
            .scalar_from_dense(x, &[1.0, 1.0], vec![0.0, 1.0, 0.0, 1.0])
            .unwrap();
        let total = tape.add_scalars(&[l1, l2]).unwrap();
        let mean = tape.scale_scalar(total, 0.5).unwrap();
        assert_eq!(tape.scalar(mean).unwrap(), 6.0);
        let grads = tape.backward(&[(mean, 1.0)]).unwrap();
        let Grad::Dense(gx) = &grads.by_leaf[&x] else { panic!() };
        assert_eq!(gx, &vec![0.5, 1.0, 0.5, 1.0]);
    }

    #[test]
    fn relu_gradients_match_fd_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sites = vec![0u32, 1, 2];
        let x0: Vec<f64> = (0..6)
            .map(|_| {
                let v: f64 = rng.gen_range(0.2..1.0);
                if rng.gen::<bool>() { v } else { -v }
            })
            .collect();
        let cs = vec![rand_vec(&mut rng, 6)];
        let run = |x: &[f64]| {
            let mut tape = Tape::new();
            let xn = tape.leaf_sparse(vec![sparse(2, 2, 2, &sites, x)]);
            let y = tape.relu(xn).unwrap();
            let loss = weighted_sum_sparse(&mut tape, y, &cs);
            (tape.scalar(loss).unwrap(), tape, xn, loss)
        };
        let (_, tape, xn, loss) = run(&x0);
        let grads = tape.backward(&[(loss, 1.0)]).unwrap();
        let num = numeric_gradient(&x0, |x| run(x).0);
        let Grad::Sparse(gx) = &grads.by_leaf[&xn] else { panic!() };
        assert_gradients_match(&gx[0], &num, "relu d/dx");
    }
}
