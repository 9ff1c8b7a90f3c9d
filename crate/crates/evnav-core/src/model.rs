//! The detection network: a sparse convolutional backbone (eleven 3x3
//! submanifold convolutions in five pooled blocks plus one final conv),
//! an optional convolutional GRU on the pooled 5x7 feature grid, and a
//! two-layer fully connected regression head emitting the 385-value
//! detection vector.
//!
//! All parameters live in a [`ParamStore`] under stable names; declaration
//! order is the canonical serialization order. `width_divisor` scales every
//! channel count (and the head's hidden width) down for small-scale runs.

use crate::detect::{GRID_COLS, GRID_ROWS, PRED_LEN};
use crate::error::{Error, Result};
use crate::gru::{gru_step, GateRefs, GruRefs, GruState};
use crate::nn::ops::BnStats;
use crate::nn::rulebook::{build_pool_rulebook, build_submanifold_rulebook};
use crate::nn::tape::{NodeId, Tape};
use crate::nn::{he_normal, ParamStore};
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Output channels of the eleven convolutions at full width, blockwise.
pub const BASE_BLOCK_CHANNELS: [usize; 10] = [16, 16, 32, 32, 64, 64, 128, 128, 256, 256];
pub const BASE_FINAL_CHANNELS: usize = 256;
pub const BASE_FC_HIDDEN: usize = 512;
pub const N_BLOCKS: usize = 5;

/// Histogram input plane: the 180x240 sensor embedded centered.
pub const INPUT_ROWS: usize = 191;
pub const INPUT_COLS: usize = 255;
pub const INPUT_CHANNELS: usize = 2;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub input_rows: usize,
    pub input_cols: usize,
    pub input_channels: usize,
    pub width_divisor: usize,
    pub with_gru: bool,
}

impl Arch {
    pub fn new(width_divisor: usize, with_gru: bool) -> Self {
        Arch {
            input_rows: INPUT_ROWS,
            input_cols: INPUT_COLS,
            input_channels: INPUT_CHANNELS,
            width_divisor,
            with_gru,
        }
    }

    fn scaled(&self, base: usize) -> usize {
        (base / self.width_divisor).max(1)
    }

    /// Conv output channels in layer order (ten block convs + final).
    pub fn conv_channels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = BASE_BLOCK_CHANNELS.iter().map(|&c| self.scaled(c)).collect();
        v.push(self.scaled(BASE_FINAL_CHANNELS));
        v
    }

    /// Channel count of the pooled feature grid (GRU state width).
    pub fn feature_channels(&self) -> usize {
        self.scaled(BASE_FINAL_CHANNELS)
    }

    pub fn fc_hidden(&self) -> usize {
        self.scaled(BASE_FC_HIDDEN)
    }

    /// Spatial dims after the five stride-2 pools.
    pub fn grid_dims(&self) -> (usize, usize) {
        let (mut r, mut c) = (self.input_rows, self.input_cols);
        for _ in 0..N_BLOCKS {
            r /= 2;
            c /= 2;
        }
        (r, c)
    }

    pub fn head_fan_in(&self) -> usize {
        let (r, c) = self.grid_dims();
        r * c * self.feature_channels()
    }

    fn validate(&self) -> Result<()> {
        if self.width_divisor == 0 {
            return Err(Error::Config("width divisor must be >= 1".to_string()));
        }
        if self.grid_dims() != (GRID_ROWS, GRID_COLS) {
            return Err(Error::Config(format!(
                "input {}x{} pools to grid {:?}, head requires {}x{}",
                self.input_rows,
                self.input_cols,
                self.grid_dims(),
                GRID_ROWS,
                GRID_COLS
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Result of one recorded forward pass.
pub struct ForwardOutput<T> {
    /// Dense node, width 385 per sample.
    pub prediction: NodeId,
    /// (input, output) node per submanifold convolution, in layer order.
    pub conv_io: Vec<(NodeId, NodeId)>,
    /// Per-BN batch statistics gathered in train mode (layer prefix, stats);
    /// empty in infer mode. Feed to [`Network::apply_bn_updates`].
    pub bn_batch_stats: Vec<(String, BnStats<T>)>,
}

#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub arch: Arch,
    pub params: ParamStore<T>,
}

fn conv_layer_names() -> Vec<String> {
    let mut names = Vec::new();
    for b in 0..N_BLOCKS {
        for j in 0..2 {
            names.push(format!("bb.{b}.{j}"));
        }
    }
    names.push("bb.final".to_string());
    names
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum InitKind {
    HeNormal { fan_in: usize },
    Zeros,
    Ones,
}

/// Declared name, shape and trainability of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    init: InitKind,
}

/// The architecture's full parameter inventory in canonical declaration order.
pub fn param_specs(arch: &Arch) -> Vec<ParamSpec> {
    let spec = |name: String, shape: Vec<usize>, trainable: bool, init: InitKind| ParamSpec {
        name,
        shape,
        trainable,
        init,
    };
    let mut out = Vec::new();
    let channels = arch.conv_channels();
    let mut cin = arch.input_channels;
    for (prefix, &cout) in conv_layer_names().iter().zip(&channels) {
        out.push(spec(
            format!("{prefix}.conv.w"),
            vec![3, 3, cin, cout],
            true,
            InitKind::HeNormal { fan_in: 9 * cin },
        ));
        out.push(spec(format!("{prefix}.conv.b"), vec![cout], true, InitKind::Zeros));
        out.push(spec(format!("{prefix}.bn.gamma"), vec![cout], true, InitKind::Ones));
        out.push(spec(format!("{prefix}.bn.beta"), vec![cout], true, InitKind::Zeros));
        out.push(spec(
            format!("{prefix}.bn.running_mean"),
            vec![cout],
            false,
            InitKind::Zeros,
        ));
        out.push(spec(
            format!("{prefix}.bn.running_var"),
            vec![cout],
            false,
            InitKind::Ones,
        ));
        cin = cout;
    }
    if arch.with_gru {
        let ch = arch.feature_channels();
        for gate in ["z", "r", "h"] {
            out.push(spec(
                format!("gru.{gate}.w"),
                vec![3, 3, 2 * ch, ch],
                true,
                InitKind::HeNormal { fan_in: 9 * 2 * ch },
            ));
            out.push(spec(format!("gru.{gate}.b"), vec![ch], true, InitKind::Zeros));
        }
    }
    let nin = arch.head_fan_in();
    let hidden = arch.fc_hidden();
    out.push(spec(
        "head.fc0.w".to_string(),
        vec![hidden, nin],
        true,
        InitKind::HeNormal { fan_in: nin },
    ));
    out.push(spec("head.fc0.b".to_string(), vec![hidden], true, InitKind::Zeros));
    out.push(spec(
        "head.fc1.w".to_string(),
        vec![PRED_LEN, hidden],
        true,
        InitKind::HeNormal { fan_in: hidden },
    ));
    out.push(spec("head.fc1.b".to_string(), vec![PRED_LEN], true, InitKind::Zeros));
    out
}

fn init_data<T: Scalar>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Vec<T> {
    let n: usize = spec.shape.iter().product();
    match spec.init {
        InitKind::HeNormal { fan_in } => he_normal(rng, fan_in, n),
        InitKind::Zeros => vec![T::zero(); n],
        InitKind::Ones => vec![T::one(); n],
    }
}

impl<T: Scalar> Network<T> {
    /// Fresh network with He-initialized weights, deterministic in `seed`.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in param_specs(&arch) {
            let data = init_data(&spec, &mut rng);
            params.declare(&spec.name, spec.shape, data, spec.trainable)?;
        }
        Ok(Network { arch, params })
    }

    /// Adds a freshly initialized recurrent cell between backbone and head,
    /// carrying every existing parameter over unchanged.
    pub fn insert_gru(&mut self, seed: u64) -> Result<()> {
        if self.arch.with_gru {
            return Err(Error::Config(
                "model already contains a recurrent cell".to_string(),
            ));
        }
        let mut arch = self.arch.clone();
        arch.with_gru = true;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in param_specs(&arch) {
            let data = if self.params.contains(&spec.name) {
                self.params.get(&spec.name)?.data.as_ref().clone()
            } else {
                init_data(&spec, &mut rng)
            };
            params.declare(&spec.name, spec.shape, data, spec.trainable)?;
        }
        self.arch = arch;
        self.params = params;
        Ok(())
    }

    pub fn gru_refs(&self) -> Result<GruRefs<T>> {
        if !self.arch.with_gru {
            return Err(Error::Config(
                "model has no recurrent cell".to_string(),
            ));
        }
        let gate = |g: &str| -> Result<GateRefs<T>> {
            Ok(GateRefs {
                w: self.params.reference(&format!("gru.{g}.w"))?,
                b: self.params.reference(&format!("gru.{g}.b"))?,
            })
        };
        Ok(GruRefs {
            wz: gate("z")?,
            wr: gate("r")?,
            wh: gate("h")?,
            channels: self.arch.feature_channels(),
        })
    }

    /// Zero recurrent state for `batch` lockstep streams.
    pub fn zero_state(&self, batch: usize) -> GruState<T> {
        let (r, c) = self.arch.grid_dims();
        GruState::zeros(batch, r, c, self.arch.feature_channels())
    }

    /// Records a full forward pass on `tape`. `input` must hold histogram
    /// tensors of the architecture's input shape. A recurrent model requires
    /// `state` (advanced in place); a feedforward model ignores it.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        input: NodeId,
        mut state: Option<&mut GruState<T>>,
        mode: BnMode,
    ) -> Result<ForwardOutput<T>> {
        let mut conv_io = Vec::new();
        let mut bn_batch_stats = Vec::new();
        let channels = self.arch.conv_channels();
        let mut layer = 0usize;
        let mut cin = self.arch.input_channels;
        let mut x = input;
        for b in 0..N_BLOCKS {
            let conv_rbs = self.conv_rulebooks(tape, x)?;
            for j in 0..2 {
                let cout = channels[layer];
                x = self.conv_bn_relu(
                    tape,
                    x,
                    &format!("bb.{b}.{j}"),
                    conv_rbs.clone(),
                    cin,
                    cout,
                    mode,
                    &mut conv_io,
                    &mut bn_batch_stats,
                )?;
                cin = cout;
                layer += 1;
            }
            let pool_rbs = {
                let batch = tape.sparse_batch(x)?;
                batch
                    .iter()
                    .map(|t| Arc::new(build_pool_rulebook(t.rows(), t.cols(), t.linear_sites())))
                    .collect()
            };
            x = tape.max_pool(x, pool_rbs)?;
        }
        let conv_rbs = self.conv_rulebooks(tape, x)?;
        x = self.conv_bn_relu(
            tape,
            x,
            "bb.final",
            conv_rbs,
            cin,
            channels[layer],
            mode,
            &mut conv_io,
            &mut bn_batch_stats,
        )?;

        if self.arch.with_gru {
            let state = state.as_deref_mut().ok_or_else(|| {
                Error::Config("recurrent model forward requires a state".to_string())
            })?;
            let h = state.node_on(tape);
            let refs = self.gru_refs()?;
            x = gru_step(tape, h, x, &refs)?;
            state.set_from(tape, x)?;
        }

        let flat = tape.flatten(x)?;
        let nin = self.arch.head_fan_in();
        let hidden = self.arch.fc_hidden();
        let h0 = tape.linear(
            flat,
            self.params.reference("head.fc0.w")?,
            self.params.reference("head.fc0.b")?,
            nin,
            hidden,
        )?;
        let a0 = tape.relu_dense(h0)?;
        let prediction = tape.linear(
            a0,
            self.params.reference("head.fc1.w")?,
            self.params.reference("head.fc1.b")?,
            hidden,
            PRED_LEN,
        )?;
        Ok(ForwardOutput {
            prediction,
            conv_io,
            bn_batch_stats,
        })
    }

    fn conv_rulebooks(
        &self,
        tape: &Tape<T>,
        x: NodeId,
    ) -> Result<Vec<Arc<crate::nn::rulebook::ConvRulebook>>> {
        let batch = tape.sparse_batch(x)?;
        Ok(batch
            .iter()
            .map(|t| Arc::new(build_submanifold_rulebook(t.rows(), t.cols(), t.linear_sites())))
            .collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn_relu(
        &self,
        tape: &mut Tape<T>,
        x: NodeId,
        prefix: &str,
        rbs: Vec<Arc<crate::nn::rulebook::ConvRulebook>>,
        cin: usize,
        cout: usize,
        mode: BnMode,
        conv_io: &mut Vec<(NodeId, NodeId)>,
        bn_batch_stats: &mut Vec<(String, BnStats<T>)>,
    ) -> Result<NodeId> {
        let conv = tape.subm_conv(
            x,
            rbs,
            self.params.reference(&format!("{prefix}.conv.w"))?,
            self.params.reference(&format!("{prefix}.conv.b"))?,
            cin,
            cout,
        )?;
        conv_io.push((x, conv));
        let gamma = self.params.reference(&format!("{prefix}.bn.gamma"))?;
        let beta = self.params.reference(&format!("{prefix}.bn.beta"))?;
        let eps = T::from_f64(BN_EPS);
        let bn = match mode {
            BnMode::Train => {
                let (id, stats) = tape.batch_norm_train(conv, gamma, beta, eps)?;
                bn_batch_stats.push((prefix.to_string(), stats));
                id
            }
            BnMode::Infer => {
                let mean = self.params.get(&format!("{prefix}.bn.running_mean"))?;
                let var = self.params.get(&format!("{prefix}.bn.running_var"))?;
                tape.batch_norm_infer(conv, gamma, beta, &mean.data, &var.data, eps)?
            }
        };
        tape.relu(bn)
    }

    /// Folds train-mode batch statistics into the running estimates:
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_updates(&mut self, stats: &[(String, BnStats<T>)]) -> Result<()> {
        let m = T::from_f64(BN_MOMENTUM);
        for (prefix, s) in stats {
            for (suffix, batch_vals) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{prefix}.bn.{suffix}");
                let old = self.params.get(&name)?;
                let new: Vec<T> = old
                    .data
                    .iter()
                    .zip(batch_vals)
                    .map(|(&o, &b)| (T::one() - m) * o + m * b)
                    .collect();
                self.params.set_data(&name, new)?;
            }
        }
        Ok(())
    }

    /// Runs a window sequence through the model in inference mode with a
    /// fresh zero state, returning one 385-value prediction per window.
    pub fn infer_sequence(
        &self,
        windows: &[crate::sparse::SparseTensor<T>],
    ) -> Result<Vec<Vec<T>>> {
        let mut state = self.zero_state(1);
        let mut out = Vec::with_capacity(windows.len());
        for w in windows {
            let mut tape = Tape::new();
            let input = tape.leaf_sparse(vec![w.clone()]);
            let fwd = self.forward(&mut tape, input, Some(&mut state), BnMode::Infer)?;
            let (width, data) = tape.dense_batch(fwd.prediction)?;
            debug_assert_eq!(width, PRED_LEN);
            out.push(data.to_vec());
            state.detach();
        }
        Ok(out)
    }
}
