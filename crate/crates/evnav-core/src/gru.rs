//! Convolutional gated recurrent unit on the pooled feature grid.
//!
//! One step computes, with `[h, x]` the channel concatenation of the previous
//! hidden state and the current features:
//!
//! ```text
//! z = sigma(Wz * [h, x] + bz)
//! r = sigma(Wr * [h, x] + br)
//! c = tanh(Wh * [r . h, x] + bh)
//! h' = (1 - z) . h + z . c
//! ```
//!
//! All three gates are 3x3 submanifold convolutions from 2F to F channels.
//! The operands are aligned on the union of their active-site sets, absent
//! sites materialized as zeros; the returned state lives on that union.

use crate::error::{Error, Result};
use crate::nn::rulebook::build_submanifold_rulebook;
use crate::nn::tape::{NodeId, Tape};
use crate::nn::ParamRef;
use crate::scalar::Scalar;
use crate::sparse::SparseTensor;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct GateRefs<T> {
    pub w: ParamRef<T>,
    pub b: ParamRef<T>,
}

/// Parameter handles for one step; `channels` is F (the state width).
#[derive(Debug, Clone)]
pub struct GruRefs<T> {
    pub wz: GateRefs<T>,
    pub wr: GateRefs<T>,
    pub wh: GateRefs<T>,
    pub channels: usize,
}

/// Per-stream recurrent state: one hidden tensor per batch slot, plus the
/// tape node currently carrying it (None when detached from any record).
#[derive(Debug, Clone)]
pub struct GruState<T> {
    pub hidden: Vec<SparseTensor<T>>,
    pub node: Option<NodeId>,
}

impl<T: Scalar> GruState<T> {
    /// Zero state on the full grid: every site active, features zero.
    pub fn zeros(batch: usize, rows: usize, cols: usize, channels: usize) -> Self {
        GruState {
            hidden: (0..batch)
                .map(|_| SparseTensor::zeros_full(rows, cols, channels))
                .collect(),
            node: None,
        }
    }

    /// The node carrying the state on `tape`, creating a gradient-stopping
    /// leaf from the stored values if the state is detached.
    pub fn node_on(&mut self, tape: &mut Tape<T>) -> NodeId {
        match self.node {
            Some(id) => id,
            None => {
                let id = tape.leaf_sparse(self.hidden.clone());
                self.node = Some(id);
                id
            }
        }
    }

    /// Syncs stored values from `node` and remembers it as current.
    pub fn set_from(&mut self, tape: &Tape<T>, node: NodeId) -> Result<()> {
        self.hidden = tape.sparse_batch(node)?.to_vec();
        self.node = Some(node);
        Ok(())
    }

    /// Cuts gradient linkage to any recorded computation; values persist.
    pub fn detach(&mut self) {
        self.node = None;
    }
}

fn union_sorted(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len().max(b.len()));
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// Records one recurrent step; returns the node of the new hidden state.
pub fn gru_step<T: Scalar>(
    tape: &mut Tape<T>,
    h_prev: NodeId,
    x: NodeId,
    p: &GruRefs<T>,
) -> Result<NodeId> {
    let hb = tape.sparse_batch(h_prev)?;
    let xb = tape.sparse_batch(x)?;
    if hb.len() != xb.len() {
        return Err(Error::Dimension(format!(
            "state batch {} vs feature batch {}",
            hb.len(),
            xb.len()
        )));
    }
    let ch = p.channels;
    let mut unions = Vec::with_capacity(hb.len());
    for (ht, xt) in hb.iter().zip(xb) {
        if ht.rows() != xt.rows() || ht.cols() != xt.cols() {
            return Err(Error::Dimension(format!(
                "state grid {}x{} vs feature grid {}x{}",
                ht.rows(),
                ht.cols(),
                xt.rows(),
                xt.cols()
            )));
        }
        if ht.channels() != ch || xt.channels() != ch {
            return Err(Error::Dimension(format!(
                "recurrent cell expects {ch} channels, got state {} / features {}",
                ht.channels(),
                xt.channels()
            )));
        }
        unions.push(union_sorted(ht.linear_sites(), xt.linear_sites()));
    }
    let (rows, cols) = (hb[0].rows(), hb[0].cols());
    let rbs: Vec<Arc<_>> = unions
        .iter()
        .map(|u| Arc::new(build_submanifold_rulebook(rows, cols, u)))
        .collect();

    let hu = tape.materialize(h_prev, unions.clone())?;
    let xu = tape.materialize(x, unions)?;
    let cat = tape.concat(hu, xu)?;
    let z_pre = tape.subm_conv(cat, rbs.clone(), p.wz.w.clone(), p.wz.b.clone(), 2 * ch, ch)?;
    let z = tape.sigmoid(z_pre)?;
    let r_pre = tape.subm_conv(cat, rbs.clone(), p.wr.w.clone(), p.wr.b.clone(), 2 * ch, ch)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, hu)?;
    let cat2 = tape.concat(rh, xu)?;
    let c_pre = tape.subm_conv(cat2, rbs, p.wh.w.clone(), p.wh.b.clone(), 2 * ch, ch)?;
    let cand = tape.tanh(c_pre)?;
    tape.lerp(z, hu, cand)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ops::conv_weight_len;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pref(name: &str, data: Vec<f64>) -> ParamRef<f64> {
        ParamRef {
            name: name.to_string(),
            data: Arc::new(data),
        }
    }

    fn rand_refs(rng: &mut ChaCha8Rng, ch: usize, scale: f64, z_bias: f64) -> GruRefs<f64> {
        let n = conv_weight_len(2 * ch, ch);
        let mut w = |name: &str| {
            pref(
                name,
                (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
            )
        };
        let wz = w("gz.w");
        let wr = w("gr.w");
        let wh = w("gh.w");
        GruRefs {
            wz: GateRefs {
                w: wz,
                b: pref("gz.b", vec![z_bias; ch]),
            },
            wr: GateRefs {
                w: wr,
                b: pref("gr.b", vec![0.0; ch]),
            },
            wh: GateRefs {
                w: wh,
                b: pref("gh.b", vec![0.0; ch]),
            },
            channels: ch,
        }
    }

    fn full_random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, ch: usize, lim: f64) -> SparseTensor<f64> {
        let mut t = SparseTensor::zeros_full(rows, cols, ch);
        for v in t.features_mut() {
            *v = rng.gen_range(-lim..lim);
        }
        t
    }

    #[test]
    fn scalar_oracle_matches_to_1e10() {
        // 1x1 grid, 1 channel: only the center tap of each 3x3 kernel acts.
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..20 {
            let (wzh, wzx, bz) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (wrh, wrx, br) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let (whh, whx, bh) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let h0 = rng.gen_range(-0.9..0.9);
            let x0 = rng.gen_range(-2.0..2.0);

            let center = |wh_: f64, wx_: f64| {
                let mut w = vec![0.0; conv_weight_len(2, 1)];
                w[4 * 2] = wh_; // center tap, input channel 0 (state)
                w[4 * 2 + 1] = wx_; // center tap, input channel 1 (features)
                w
            };
            let p = GruRefs {
                wz: GateRefs { w: pref("z.w", center(wzh, wzx)), b: pref("z.b", vec![bz]) },
                wr: GateRefs { w: pref("r.w", center(wrh, wrx)), b: pref("r.b", vec![br]) },
                wh: GateRefs { w: pref("h.w", center(whh, whx)), b: pref("h.b", vec![bh]) },
                channels: 1,
            };

            let mut tape = Tape::new();
            let h = tape.leaf_sparse(vec![
                SparseTensor::new(1, 1, 1, vec![0], vec![h0]).unwrap(),
            ]);
            let x = tape.leaf_sparse(vec![
                SparseTensor::new(1, 1, 1, vec![0], vec![x0]).unwrap(),
            ]);
            let out = gru_step(&mut tape, h, x, &p).unwrap();
            let got = tape.sparse_batch(out).unwrap()[0].features()[0];

            let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());
            let z = sigma(wzh * h0 + wzx * x0 + bz);
            let r = sigma(wrh * h0 + wrx * x0 + br);
            let c = (whh * (r * h0) + whx * x0 + bh).tanh();
            let want = (1.0 - z) * h0 + z * c;
            assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
        }
    }

    #[test]
    fn closed_update_gate_freezes_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = rand_refs(&mut rng, 3, 0.3, -20.0);
        let h0 = full_random(&mut rng, 5, 7, 3, 0.8);
        let x0 = full_random(&mut rng, 5, 7, 3, 2.0);
        let mut tape = Tape::new();
        let h = tape.leaf_sparse(vec![h0.clone()]);
        let x = tape.leaf_sparse(vec![x0]);
        let out = gru_step(&mut tape, h, x, &p).unwrap();
        let got = &tape.sparse_batch(out).unwrap()[0];
        let drift = got
            .features()
            .iter()
            .zip(h0.features())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(drift < 1e-3, "drift {drift}");
    }

    #[test]
    fn open_update_gate_yields_candidate() {
        use crate::nn::ops;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let ch = 3;
        let p = rand_refs(&mut rng, ch, 0.3, 20.0);
        let h0 = full_random(&mut rng, 5, 7, ch, 0.8);
        let x0 = full_random(&mut rng, 5, 7, ch, 2.0);

        let mut tape = Tape::new();
        let h = tape.leaf_sparse(vec![h0.clone()]);
        let x = tape.leaf_sparse(vec![x0.clone()]);
        let out = gru_step(&mut tape, h, x, &p).unwrap();
        let got = &tape.sparse_batch(out).unwrap()[0];

        // Candidate recomputed directly with the numeric kernels.
        let rb = build_submanifold_rulebook(5, 7, h0.linear_sites());
        let interleave = |a: &SparseTensor<f64>, b: &SparseTensor<f64>| -> Vec<f64> {
            let mut out = Vec::new();
            for i in 0..a.site_count() {
                out.extend_from_slice(a.site_features(i));
                out.extend_from_slice(b.site_features(i));
            }
            out
        };
        let cat = interleave(&h0, &x0);
        let r = ops::sigmoid(&ops::conv_forward(&rb, &cat, 2 * ch, ch, &p.wr.w.data, &p.wr.b.data));
        let mut rh = h0.clone();
        for (v, rv) in rh.features_mut().iter_mut().zip(&r) {
            *v *= rv;
        }
        let cat2 = interleave(&rh, &x0);
        let cand = ops::tanh(&ops::conv_forward(&rb, &cat2, 2 * ch, ch, &p.wh.w.data, &p.wh.b.data));

        let gap = got
            .features()
            .iter()
            .zip(&cand)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-3, "gap {gap}");
    }

    #[test]
    fn bounded_state_from_zero_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let ch = 4;
        let p = rand_refs(&mut rng, ch, 0.5, 0.0);
        let mut state = GruState::<f64>::zeros(2, 5, 7, ch);
        let mut tape = Tape::new();
        for _ in 0..6 {
            let h = state.node_on(&mut tape);
            let x = tape.leaf_sparse(vec![
                full_random(&mut rng, 5, 7, ch, 3.0),
                full_random(&mut rng, 5, 7, ch, 3.0),
            ]);
            let out = gru_step(&mut tape, h, x, &p).unwrap();
            state.set_from(&tape, out).unwrap();
            for t in &state.hidden {
                assert!(t.features().iter().all(|v| v.abs() < 1.0));
            }
        }
    }

    #[test]
    fn union_alignment_of_partial_site_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let ch = 2;
        let p = rand_refs(&mut rng, ch, 0.4, 0.0);
        let h = SparseTensor::new(3, 3, ch, vec![0, 4], vec![0.3, -0.2, 0.5, 0.1]).unwrap();
        let x = SparseTensor::new(3, 3, ch, vec![4, 8], vec![1.0, 2.0, -1.0, 0.7]).unwrap();
        let mut tape = Tape::new();
        let hn = tape.leaf_sparse(vec![h]);
        let xn = tape.leaf_sparse(vec![x]);
        let out = gru_step(&mut tape, hn, xn, &p).unwrap();
        let t = &tape.sparse_batch(out).unwrap()[0];
        assert_eq!(t.linear_sites(), &[0, 4, 8]);
    }

    #[test]
    fn reset_equals_fresh_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let ch = 3;
        let p = rand_refs(&mut rng, ch, 0.4, 0.0);
        let seq_b: Vec<SparseTensor<f64>> =
            (0..3).map(|_| full_random(&mut rng, 5, 7, ch, 2.0)).collect();

        // Stream A then reset, then stream B.
        let mut state = GruState::<f64>::zeros(1, 5, 7, ch);
        let mut tape = Tape::new();
        for _ in 0..4 {
            let h = state.node_on(&mut tape);
            let x = tape.leaf_sparse(vec![full_random(&mut rng, 5, 7, ch, 2.0)]);
            let out = gru_step(&mut tape, h, x, &p).unwrap();
            state.set_from(&tape, out).unwrap();
        }
        let mut after_reset = GruState::<f64>::zeros(1, 5, 7, ch);
        for xt in &seq_b {
            let h = after_reset.node_on(&mut tape);
            let x = tape.leaf_sparse(vec![xt.clone()]);
            let out = gru_step(&mut tape, h, x, &p).unwrap();
            after_reset.set_from(&tape, out).unwrap();
        }

        // Fresh record, zero state, same sequence.
        let mut fresh = GruState::<f64>::zeros(1, 5, 7, ch);
        let mut tape2 = Tape::new();
        for xt in &seq_b {
            let h = fresh.node_on(&mut tape2);
            let x = tape2.leaf_sparse(vec![xt.clone()]);
            let out = gru_step(&mut tape2, h, x, &p).unwrap();
            fresh.set_from(&tape2, out).unwrap();
        }
        assert_eq!(after_reset.hidden[0], fresh.hidden[0]);
    }

    #[test]
    fn detach_blocks_gradient_within_window_flows() {
        use crate::nn::tape::Grad;
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let ch = 2;
        let p = rand_refs(&mut rng, ch, 0.5, 0.0);

        let mut tape = Tape::new();
        let x0 = tape.leaf_sparse(vec![full_random(&mut rng, 2, 2, ch, 1.5)]);
        let x1 = tape.leaf_sparse(vec![full_random(&mut rng, 2, 2, ch, 1.5)]);
        let x2 = tape.leaf_sparse(vec![full_random(&mut rng, 2, 2, ch, 1.5)]);

        let mut state = GruState::<f64>::zeros(1, 2, 2, ch);
        let h0 = state.node_on(&mut tape);
        let h1 = gru_step(&mut tape, h0, x0, &p).unwrap();
        let h2 = gru_step(&mut tape, h1, x1, &p).unwrap();
        state.set_from(&tape, h2).unwrap();
        // Truncation boundary: same record, fresh gradient-stopping leaf.
        state.detach();
        let h2_detached = state.node_on(&mut tape);
        let h3 = gru_step(&mut tape, h2_detached, x2, &p).unwrap();

        // Values are unchanged by the detach.
        assert_eq!(
            tape.sparse_batch(h2).unwrap()[0],
            tape.sparse_batch(h2_detached).unwrap()[0]
        );

        // Loss on h3: sum of features.
        let n = tape.sparse_batch(h3).unwrap()[0].features().len();
        let flat = tape.flatten(h3).unwrap();
        let (width, data) = tape.dense_batch(flat).unwrap();
        assert_eq!(width, 2 * 2 * ch);
        let total: f64 = data.iter().sum();
        let loss = tape
            .scalar_from_dense(flat, &[total], vec![1.0; width])
            .unwrap();
        let grads = tape.backward(&[(loss, 1.0)]).unwrap();

        // x2 feeds h3 directly: nonzero gradient.
        let Grad::Sparse(g2) = &grads.by_leaf[&x2] else { panic!() };
        assert!(g2[0].iter().any(|v| v.abs() > 1e-12));
        // x1 and x0 sit behind the truncation: no gradient at all.
        assert!(!grads.by_leaf.contains_key(&x1));
        assert!(!grads.by_leaf.contains_key(&x0));
        let _ = n;

        // Without the detach the gradient does reach x1 and x0.
        let grads2 = {
            let mut tape = Tape::new();
            let x0n = tape.leaf_sparse(vec![full_random(&mut rng, 2, 2, ch, 1.5)]);
            let x1n = tape.leaf_sparse(vec![full_random(&mut rng, 2, 2, ch, 1.5)]);
            let mut st = GruState::<f64>::zeros(1, 2, 2, ch);
            let h0 = st.node_on(&mut tape);
            let h1 = gru_step(&mut tape, h0, x0n, &p).unwrap();
            let h2 = gru_step(&mut tape, h1, x1n, &p).unwrap();
            let flat = tape.flatten(h2).unwrap();
            let (width, data) = tape.dense_batch(flat).unwrap();
            let total: f64 = data.iter().sum();
            let loss = tape
                .scalar_from_dense(flat, &[total], vec![1.0; width])
                .unwrap();
            let g = tape.backward(&[(loss, 1.0)]).unwrap();
            let Grad::Sparse(g0) = &g.by_leaf[&x0n] else { panic!() };
            g0[0].iter().any(|v| v.abs() > 1e-12)
        };
        assert!(grads2, "gradient two steps back should be nonzero");
    }
}
