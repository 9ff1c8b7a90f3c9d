//! Optimization and training: Adam, truncated backpropagation through time
//! over lockstep sequence batches, the three-stage transfer schedule, and
//! checkpoint persistence.

use crate::data::{Dataset, LoadedSequence};
use crate::detect::yolo_loss_grad;
use crate::error::{Error, Result};
use crate::model::{param_specs, Arch, BnMode, Network, INPUT_COLS, INPUT_ROWS};
use crate::nn::tape::Tape;
use crate::nn::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::sparse::SparseTensor;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moment buffers are created lazily per
/// parameter, so untouched parameters stay untouched.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter that received a gradient.
    pub fn apply(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let c1 = T::one() - T::from_f64(self.cfg.beta1.powi(t));
        let c2 = T::one() - T::from_f64(self.cfg.beta2.powi(t));
        for (name, g) in &grads.by_param {
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient for parameter {name} at element {bad}"
                )));
            }
            let p = params.get(name)?;
            if g.len() != p.len() {
                return Err(Error::Dimension(format!(
                    "gradient for {name} holds {} values, parameter {}",
                    g.len(),
                    p.len()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            let mut new = p.data.as_ref().clone();
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                new[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            params.set_data(name, new)?;
        }
        Ok(())
    }
}

/// Scales all parameter gradients so their global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.by_param.values() {
        for v in g {
            let v = (*v).to_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = T::from_f64(max_norm / norm);
        for g in grads.by_param.values_mut() {
            for v in g {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Forward steps per backward pass in the recurrent stage.
    pub tbptt_k: usize,
    /// Sequences streamed in lockstep.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global-norm gradient clip; disabled when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tbptt_k: 20,
            batch_size: 15,
            epochs: 10,
            seed: 0,
            adam: AdamConfig::default(),
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub update_index: u64,
    pub stage: String,
    pub loss: f64,
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "update_index,stage,loss").map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(w, "{},{},{}", r.update_index, r.stage, r.loss).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Streams a group of sequences in lockstep through the model, one window
/// per stream per step, running a backward pass and one Adam update every
/// `k` steps. The group runs until its longest sequence ends; shorter
/// sequences wrap around with a state reset and keep contributing loss.
pub fn train_group<T: Scalar>(
    net: &mut Network<T>,
    seqs: &[LoadedSequence<T>],
    k: usize,
    adam: &mut Adam<T>,
    grad_clip: Option<f64>,
    stage: &str,
    rows: &mut Vec<LossRow>,
) -> Result<()> {
    if seqs.is_empty() {
        return Ok(());
    }
    if k == 0 {
        return Err(Error::Config("truncation length must be >= 1".to_string()));
    }
    for (i, s) in seqs.iter().enumerate() {
        if s.n_windows() == 0 {
            return Err(Error::Config(format!(
                "sequence {i} has no complete event window"
            )));
        }
    }
    let b = seqs.len();
    let l_max = seqs.iter().map(|s| s.n_windows()).max().unwrap();
    let input_w = T::from_usize(INPUT_COLS);
    let input_h = T::from_usize(INPUT_ROWS);
    let mut state = net.arch.with_gru.then(|| net.zero_state(b));
    let (grid_r, grid_c) = net.arch.grid_dims();
    let zero_template =
        SparseTensor::<T>::zeros_full(grid_r, grid_c, net.arch.feature_channels());
    let mut pos = vec![0usize; b];
    let mut wrapped = vec![false; b];
    let mut done = 0usize;
    while done < l_max {
        let chunk = k.min(l_max - done);
        let mut tape = Tape::new();
        let mut scalars = Vec::with_capacity(chunk);
        for _ in 0..chunk {
            if let Some(st) = state.as_mut() {
                let node = st.node_on(&mut tape);
                let resets: Vec<usize> =
                    (0..b).filter(|&s| wrapped[s]).collect();
                if !resets.is_empty() {
                    let reset = tape.reset_slots(node, &resets, &zero_template)?;
                    st.set_from(&tape, reset)?;
                }
            }
            wrapped.iter_mut().for_each(|w| *w = false);

            let inputs: Vec<SparseTensor<T>> = (0..b)
                .map(|s| seqs[s].histograms[pos[s]].clone())
                .collect();
            let x = tape.leaf_sparse(inputs);
            let fwd = net.forward(&mut tape, x, state.as_mut(), BnMode::Train)?;
            net.apply_bn_updates(&fwd.bn_batch_stats)?;

            let pred = {
                let (_, data) = tape.dense_batch(fwd.prediction)?;
                data.to_vec()
            };
            let mut losses = Vec::with_capacity(b);
            let mut grad = Vec::with_capacity(pred.len());
            for s in 0..b {
                let row = &pred[s * crate::detect::PRED_LEN..(s + 1) * crate::detect::PRED_LEN];
                let (l, g) = yolo_loss_grad(row, &seqs[s].targets[pos[s]], input_w, input_h);
                losses.push(l);
                grad.extend(g);
            }
            scalars.push(tape.scalar_from_dense(fwd.prediction, &losses, grad)?);

            for s in 0..b {
                pos[s] += 1;
                if pos[s] == seqs[s].n_windows() {
                    pos[s] = 0;
                    wrapped[s] = true;
                }
            }
        }
        let total = tape.add_scalars(&scalars)?;
        let mean = tape.scale_scalar(total, T::from_f64(1.0 / (chunk * b) as f64))?;
        let loss = tape.scalar(mean)?.to_f64();
        let mut grads = tape.backward(&[(mean, T::one())])?;
        if let Some(c) = grad_clip {
            clip_global_norm(&mut grads, c);
        }
        adam.apply(&mut net.params, &grads)?;
        if let Some(st) = state.as_mut() {
            st.detach();
        }
        rows.push(LossRow {
            update_index: rows.len() as u64 + 1,
            stage: stage.to_string(),
            loss,
        });
        done += chunk;
    }
    Ok(())
}

/// One pass over the dataset in manifest order, `batch_size` sequences per
/// lockstep group.
pub fn train_epoch<T: Scalar>(
    net: &mut Network<T>,
    ds: &Dataset,
    k: usize,
    batch_size: usize,
    adam: &mut Adam<T>,
    grad_clip: Option<f64>,
    stage: &str,
    rows: &mut Vec<LossRow>,
) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Config(format!(
            "dataset {} holds no sequences",
            ds.dir.display()
        )));
    }
    let n = ds.len();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let seqs: Vec<LoadedSequence<T>> = (start..end)
            .map(|i| ds.load_sequence(i))
            .collect::<Result<_>>()?;
        train_group(net, &seqs, k, adam, grad_clip, stage, rows)?;
        start = end;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Sim,
    Real,
    Gru,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sim => "sim",
            Stage::Real => "real",
            Stage::Gru => "gru",
        }
    }

    /// Truncation length: the feedforward stages update per window, only
    /// the recurrent stage spans `tbptt_k` steps per backward pass.
    pub fn effective_k(self, cfg: &TrainConfig) -> usize {
        match self {
            Stage::Gru => cfg.tbptt_k,
            _ => 1,
        }
    }
}

/// Runs `cfg.epochs` passes of one stage with a fresh optimizer, checking
/// the model's architecture matches the stage.
pub fn run_stage<T: Scalar>(
    net: &mut Network<T>,
    ds: &Dataset,
    stage: Stage,
    cfg: &TrainConfig,
    rows: &mut Vec<LossRow>,
) -> Result<()> {
    match (stage, net.arch.with_gru) {
        (Stage::Gru, false) => {
            return Err(Error::Config(
                "architecture mismatch: recurrent stage on a feedforward model".to_string(),
            ))
        }
        (Stage::Sim | Stage::Real, true) => {
            return Err(Error::Config(format!(
                "architecture mismatch: stage {} trains the feedforward model, checkpoint contains a recurrent cell",
                stage.name()
            )))
        }
        _ => {}
    }
    let k = stage.effective_k(cfg);
    let mut adam = Adam::new(cfg.adam.clone());
    for _ in 0..cfg.epochs {
        train_epoch(
            net,
            ds,
            k,
            cfg.batch_size,
            &mut adam,
            cfg.grad_clip,
            stage.name(),
            rows,
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct StagedOutputs {
    pub m1: PathBuf,
    pub m2: PathBuf,
    pub m3: PathBuf,
    pub rows: Vec<LossRow>,
}

/// Derives the intermediate checkpoint path `model.m1.ckpt` from `model.ckpt`.
fn stage_path(out: &Path, tag: &str) -> PathBuf {
    match out.extension() {
        Some(ext) => {
            let stem = out.file_stem().unwrap_or_default().to_string_lossy();
            out.with_file_name(format!("{stem}.{tag}.{}", ext.to_string_lossy()))
        }
        None => {
            let name = out.file_name().unwrap_or_default().to_string_lossy();
            out.with_file_name(format!("{name}.{tag}"))
        }
    }
}

/// The full three-stage schedule: pretrain the feedforward model on the
/// source-domain dataset, fine-tune it on the target dataset, then insert a
/// fresh recurrent cell and train on the target dataset. Emits a checkpoint
/// after each stage; the final recurrent model lands at `out`.
pub fn staged_training<T: Scalar>(
    sim: &Dataset,
    real: &Dataset,
    width_divisor: usize,
    cfg: &TrainConfig,
    out: &Path,
) -> Result<StagedOutputs> {
    let mut net: Network<T> = Network::new(Arch::new(width_divisor, false), cfg.seed)?;
    let mut rows = Vec::new();

    run_stage(&mut net, sim, Stage::Sim, cfg, &mut rows)?;
    let m1 = stage_path(out, "m1");
    save_checkpoint(&net, &meta(Stage::Sim, cfg), &m1)?;

    run_stage(&mut net, real, Stage::Real, cfg, &mut rows)?;
    let m2 = stage_path(out, "m2");
    save_checkpoint(&net, &meta(Stage::Real, cfg), &m2)?;

    net.insert_gru(cfg.seed.wrapping_add(1))?;
    run_stage(&mut net, real, Stage::Gru, cfg, &mut rows)?;
    save_checkpoint(&net, &meta(Stage::Gru, cfg), out)?;

    Ok(StagedOutputs {
        m1,
        m2,
        m3: out.to_path_buf(),
        rows,
    })
}

fn meta(stage: Stage, cfg: &TrainConfig) -> CheckpointMeta {
    CheckpointMeta {
        stage: stage.name().to_string(),
        epoch: cfg.epochs as u32,
        seed: cfg.seed,
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NAUD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub epoch: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    arch: Arch,
    meta: CheckpointMeta,
    tensors: Vec<TensorMeta>,
}

/// Magic, version, length-prefixed canonical JSON descriptor, then each
/// tensor as a little-endian f32 buffer with an element-count prefix, in
/// declaration order.
pub fn save_checkpoint<T: Scalar>(
    net: &Network<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    let desc = Descriptor {
        arch: net.arch.clone(),
        meta: meta.clone(),
        tensors: net
            .params
            .iter()
            .map(|t| TensorMeta {
                name: t.name.clone(),
                shape: t.shape.clone(),
                trainable: t.trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&desc).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: e.to_string(),
    })?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.write_u32::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
    buf.write_u32::<LittleEndian>(json.len() as u32).unwrap();
    buf.extend_from_slice(&json);
    for t in net.params.iter() {
        buf.write_u32::<LittleEndian>(t.len() as u32).unwrap();
        for v in t.data.iter() {
            buf.write_f32::<LittleEndian>((*v).to_f64() as f32).unwrap();
        }
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Network<T>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: u64, message: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        message,
    };
    if bytes.len() < 12 {
        return Err(fail(
            bytes.len() as u64,
            format!("checkpoint header needs 12 bytes, file holds {}", bytes.len()),
        ));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(fail(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let mut rdr = &bytes[4..];
    let version = rdr.read_u32::<LittleEndian>().unwrap();
    if version != CHECKPOINT_VERSION {
        return Err(fail(
            4,
            format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let desc_len = rdr.read_u32::<LittleEndian>().unwrap() as usize;
    if bytes.len() < 12 + desc_len {
        return Err(fail(
            bytes.len() as u64,
            format!(
                "descriptor needs {} bytes, file holds {}",
                12 + desc_len,
                bytes.len()
            ),
        ));
    }
    let desc: Descriptor = serde_json::from_slice(&bytes[12..12 + desc_len])
        .map_err(|e| fail(12, format!("descriptor: {e}")))?;

    // The descriptor must agree with what the architecture declares.
    let specs = param_specs(&desc.arch);
    if specs.len() != desc.tensors.len()
        || specs.iter().zip(&desc.tensors).any(|(s, t)| {
            s.name != t.name || s.shape != t.shape || s.trainable != t.trainable
        })
    {
        return Err(fail(
            12,
            "descriptor tensor list does not match the declared architecture".to_string(),
        ));
    }

    let expected: usize = 12
        + desc_len
        + desc
            .tensors
            .iter()
            .map(|t| 4 + 4 * t.shape.iter().product::<usize>())
            .sum::<usize>();
    if bytes.len() != expected {
        return Err(fail(
            bytes.len() as u64,
            format!("expected {expected} bytes, file holds {}", bytes.len()),
        ));
    }

    let mut offset = 12 + desc_len;
    let mut params = ParamStore::<T>::new();
    for t in &desc.tensors {
        let n: usize = t.shape.iter().product();
        let mut rdr = &bytes[offset..];
        let count = rdr.read_u32::<LittleEndian>().unwrap() as usize;
        if count != n {
            return Err(fail(
                offset as u64,
                format!("tensor {} declares {n} values, stores {count}", t.name),
            ));
        }
        offset += 4;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::from_f64(rdr.read_f32::<LittleEndian>().unwrap() as f64));
        }
        offset += 4 * n;
        params.declare(&t.name, t.shape.clone(), data, t.trainable)?;
    }
    Ok((
        Network {
            arch: desc.arch,
            params,
        },
        desc.meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WindowLabels;
    use crate::detect::{encode_targets, BoundingBox, GroundTruthGrid, PRED_LEN};
    use crate::nn::Grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grads_of(name: &str, g: Vec<f64>) -> Gradients<f64> {
        let mut by_param = BTreeMap::new();
        by_param.insert(name.to_string(), g);
        Gradients {
            by_param,
            by_leaf: BTreeMap::new(),
        }
    }

    #[test]
    fn adam_hand_case() {
        let mut params = ParamStore::<f64>::new();
        params.declare("w", vec![1], vec![0.0], true).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.apply(&mut params, &grads_of("w", vec![1.0])).unwrap();
        let got = params.get("w").unwrap().data[0];
        let want = -1e-4 / (1.0 + 1e-8);
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
        assert!((got - (-9.99999e-5)).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = ParamStore::<f64>::new();
        params
            .declare("w", vec![3], vec![0.5, -1.5, 2.0], true)
            .unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..3 {
            adam.apply(&mut params, &grads_of("w", vec![0.0; 3])).unwrap();
        }
        assert_eq!(*params.get("w").unwrap().data, vec![0.5, -1.5, 2.0]);
        assert!(adam.m["w"].iter().all(|&v| v == 0.0));
        assert!(adam.v["w"].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = ParamStore::<f64>::new();
        params.declare("bad.w", vec![2], vec![0.0; 2], true).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam
            .apply(&mut params, &grads_of("bad.w", vec![0.0, f64::NAN]))
            .unwrap_err();
        assert!(err.to_string().contains("bad.w"));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = ParamStore::<f64>::new();
            params.declare("w", vec![2], vec![0.1, -0.2], true).unwrap();
            let mut adam = Adam::new(AdamConfig::default());
            for i in 0..10 {
                let g = vec![0.3 * (i as f64 + 1.0), -0.7];
                adam.apply(&mut params, &grads_of("w", g)).unwrap();
            }
            params.get("w").unwrap().data.as_ref().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn global_norm_clip() {
        let mut g = grads_of("a", vec![3.0, 4.0]);
        let norm = clip_global_norm(&mut g, 2.5);
        assert_eq!(norm, 5.0);
        assert_eq!(g.by_param["a"], vec![1.5, 2.0]);

        let mut g = grads_of("a", vec![0.3, 0.4]);
        clip_global_norm(&mut g, 2.5);
        assert_eq!(g.by_param["a"], vec![0.3, 0.4]);
    }

    fn tiny_sequence(
        rng: &mut ChaCha8Rng,
        n_windows: usize,
        sites: usize,
    ) -> LoadedSequence<f32> {
        let mut histograms = Vec::new();
        let mut targets = Vec::new();
        let mut spans = Vec::new();
        for w in 0..n_windows {
            let mut set = std::collections::BTreeSet::new();
            while set.len() < sites {
                set.insert(rng.gen_range(0..(INPUT_ROWS * INPUT_COLS) as u32));
            }
            let site_list: Vec<u32> = set.into_iter().collect();
            let features = (0..site_list.len() * 2)
                .map(|_| rng.gen_range(0.0f32..5.0))
                .collect();
            histograms
                .push(SparseTensor::new(INPUT_ROWS, INPUT_COLS, 2, site_list, features).unwrap());
            let boxes = vec![BoundingBox {
                cx: 60.0 + 10.0 * (w % 3) as f32,
                cy: 90.0,
                w: 40.0,
                h: 30.0,
                conf: 1.0,
            }];
            let (grid, _) = encode_targets(&boxes, INPUT_COLS as f32, INPUT_ROWS as f32);
            targets.push(grid);
            spans.push((w as i64 * 100, w as i64 * 100 + 99));
        }
        LoadedSequence {
            histograms,
            targets,
            labels: vec![
                WindowLabels {
                    window_index: 0,
                    t_end_us: 0,
                    boxes: vec![]
                };
                n_windows
            ],
            spans,
            dropped_boxes: 0,
        }
    }

    #[test]
    fn group_training_wraps_short_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut net = Network::<f32>::new(Arch::new(8, true), 2).unwrap();
        let seqs = vec![tiny_sequence(&mut rng, 3, 40), tiny_sequence(&mut rng, 5, 40)];
        let mut adam = Adam::new(AdamConfig::default());
        let mut rows = Vec::new();
        train_group(&mut net, &seqs, 2, &mut adam, None, "gru", &mut rows).unwrap();
        // longest = 5 windows, k = 2 -> chunks of 2, 2, 1.
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.loss.is_finite() && r.loss >= 0.0));
        assert_eq!(rows[0].update_index, 1);
        assert_eq!(rows[2].update_index, 3);
        assert_eq!(adam.step_count(), 3);
    }

    #[test]
    fn stage_architecture_gate() {
        let dir = tempfile::tempdir().unwrap();
        let ds = empty_dataset(dir.path());
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut rows = Vec::new();
        let mut ff = Network::<f32>::new(Arch::new(8, false), 0).unwrap();
        let err = run_stage(&mut ff, &ds, Stage::Gru, &cfg, &mut rows).unwrap_err();
        assert!(err.to_string().contains("architecture mismatch"));
        let mut rec = Network::<f32>::new(Arch::new(8, true), 0).unwrap();
        let err = run_stage(&mut rec, &ds, Stage::Real, &cfg, &mut rows).unwrap_err();
        assert!(err.to_string().contains("architecture mismatch"));
    }

    fn empty_dataset(dir: &Path) -> Dataset {
        let manifest = crate::data::DatasetManifest {
            format_version: crate::data::DATASET_FORMAT_VERSION,
            seed: 0,
            domain: "A".to_string(),
            window_events: 50,
            sensor_width: 240,
            sensor_height: 180,
            generator: serde_json::json!({}),
            sequences: vec![],
        };
        crate::data::write_manifest(dir, &manifest).unwrap();
        Dataset::open(dir).unwrap()
    }

    #[test]
    fn overfit_shrinks_loss_by_ninety_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut net = Network::<f32>::new(Arch::new(8, false), 5).unwrap();
        let seqs = vec![tiny_sequence(&mut rng, 4, 60)];
        let mut adam = Adam::new(AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        });
        let mut rows = Vec::new();
        for _ in 0..50 {
            train_group(&mut net, &seqs, 1, &mut adam, None, "sim", &mut rows).unwrap();
        }
        assert_eq!(rows.len(), 200);
        let first: f64 = rows[..4].iter().map(|r| r.loss).sum::<f64>() / 4.0;
        let last: f64 = rows[196..].iter().map(|r| r.loss).sum::<f64>() / 4.0;
        assert!(
            last < 0.1 * first,
            "loss {first} -> {last}, reduction {:.1}%",
            100.0 * (1.0 - last / first)
        );
    }

    #[test]
    fn truncation_blocks_gradients_beyond_k() {
        // One recurrent step per backward pass: the input of the previous
        // window must receive no gradient, verified via leaf bookkeeping.
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let net = Network::<f32>::new(Arch::new(8, true), 6).unwrap();
        let seq = tiny_sequence(&mut rng, 2, 30);
        let mut state = net.zero_state(1);

        // Window 0 on its own record, then detach.
        let mut tape0 = Tape::new();
        let x0 = tape0.leaf_sparse(vec![seq.histograms[0].clone()]);
        net.forward(&mut tape0, x0, Some(&mut state), BnMode::Infer)
            .unwrap();
        state.detach();

        // Window 1 on a fresh record; backward reaches only x1.
        let mut tape1 = Tape::new();
        let x1 = tape1.leaf_sparse(vec![seq.histograms[1].clone()]);
        let fwd = net
            .forward(&mut tape1, x1, Some(&mut state), BnMode::Infer)
            .unwrap();
        let pred = {
            let (_, d) = tape1.dense_batch(fwd.prediction).unwrap();
            d.to_vec()
        };
        let (l, g) = yolo_loss_grad(
            &pred,
            &seq.targets[1],
            INPUT_COLS as f32,
            INPUT_ROWS as f32,
        );
        let sc = tape1
            .scalar_from_dense(fwd.prediction, &[l], g)
            .unwrap();
        let grads = tape1.backward(&[(sc, 1.0)]).unwrap();
        let Grad::Sparse(gx1) = &grads.by_leaf[&x1] else { panic!() };
        assert!(gx1[0].iter().any(|v| v.abs() > 0.0));
        // The record holds exactly two leaves: window 1's input and the
        // detached state. Window 0's input lives on the other record and is
        // unreachable, so no gradient can cross the truncation boundary.
        assert_eq!(grads.by_leaf.len(), 2);
        let _ = x0;
    }

    fn small_net(with_gru: bool) -> Network<f32> {
        Network::new(Arch::new(8, with_gru), 13).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let net = small_net(true);
        let meta = CheckpointMeta {
            stage: "gru".to_string(),
            epoch: 10,
            seed: 13,
        };
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&net, &meta, &p1).unwrap();
        let (loaded, meta2) = load_checkpoint::<f32>(&p1).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(loaded.arch, net.arch);
        for (a, b) in net.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.data, b.data);
            assert_eq!(a.trainable, b.trainable);
        }
        save_checkpoint(&loaded, &meta2, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_reload_preserves_inference() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let net = small_net(true);
        let meta = CheckpointMeta {
            stage: "gru".to_string(),
            epoch: 1,
            seed: 0,
        };
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&net, &meta, &p).unwrap();
        let (loaded, _) = load_checkpoint::<f32>(&p).unwrap();
        let seq = tiny_sequence(&mut rng, 3, 50);
        assert_eq!(
            net.infer_sequence(&seq.histograms).unwrap(),
            loaded.infer_sequence(&seq.histograms).unwrap()
        );
    }

    #[test]
    fn checkpoint_corruption_detection() {
        let dir = tempfile::tempdir().unwrap();
        let net = small_net(false);
        let meta = CheckpointMeta {
            stage: "sim".to_string(),
            epoch: 1,
            seed: 0,
        };
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&net, &meta, &p).unwrap();
        let full = std::fs::read(&p).unwrap();

        let trunc = &full[..full.len() - 100];
        let tp = dir.path().join("t.ckpt");
        std::fs::write(&tp, trunc).unwrap();
        let err = load_checkpoint::<f32>(&tp).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains(&format!("expected {} bytes", full.len()))
                && msg.contains(&format!("holds {}", full.len() - 100)),
            "{msg}"
        );

        let mut bad = full.clone();
        bad[0] = b'X';
        std::fs::write(&tp, &bad).unwrap();
        let err = load_checkpoint::<f32>(&tp).unwrap_err();
        assert!(err.to_string().contains("bad magic"));
    }

    #[test]
    fn loss_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_loss_csv(
            &p,
            &[
                LossRow {
                    update_index: 1,
                    stage: "sim".to_string(),
                    loss: 0.5,
                },
                LossRow {
                    update_index: 2,
                    stage: "gru".to_string(),
                    loss: 0.25,
                },
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "update_index,stage,loss\n1,sim,0.5\n2,gru,0.25\n");
    }
}
