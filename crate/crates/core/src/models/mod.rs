//! Student steering networks on a shared PilotNet backbone: a static CNN
//! head, a 64-unit LSTM over 3 frames and a neural-ODE head.

mod ode;
mod weights;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ode::{ode_solve, OdeBackend, OdeConfig, Solver, TapeBackend, VecBackend};
pub use weights::{load_weights, save_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::data::{NormStats, MODEL_HEIGHT, MODEL_WIDTH};
use crate::tensor::{GradTape, Tensor, TensorError, Var};

pub const FEATURE_DIM: usize = 50;
pub const LSTM_UNITS: usize = 64;
pub const NODE_DIM: usize = 64;
pub const SEQUENCE_LEN: usize = 3;
/// Labels are divided by this many degrees.
pub const STEERING_SCALE: f32 = 30.0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numerical failure at step {step}: {message}")]
    Numerical { step: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt weights file {path}: {message}")]
    Corrupt { path: String, message: String },
    #[error("variant mismatch: expected {expected}, file holds {found}")]
    VariantMismatch { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "cnn")]
    Cnn,
    #[serde(rename = "cnn-lstm")]
    CnnLstm,
    #[serde(rename = "cnn-node")]
    CnnNode,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cnn => "cnn",
            Variant::CnnLstm => "cnn-lstm",
            Variant::CnnNode => "cnn-node",
        }
    }

    /// Frames consumed per prediction.
    pub fn window(self) -> usize {
        match self {
            Variant::Cnn => 1,
            _ => SEQUENCE_LEN,
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cnn" => Ok(Variant::Cnn),
            "cnn-lstm" | "lstm" => Ok(Variant::CnnLstm),
            "cnn-node" | "node" => Ok(Variant::CnnNode),
            other => Err(format!("unknown variant '{other}' (expected cnn, cnn-lstm or cnn-node)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub variant: Variant,
    /// `[C, H, W]`
    pub input_shape: [usize; 3],
    pub norm_stats: NormStats,
    pub norm_stats_hash: u32,
    pub steering_scale: f32,
    pub ode: Option<OdeConfig>,
    /// Hash of the training configuration, when produced by the trainer.
    pub config_hash: Option<u32>,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub meta: ModelMeta,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn stats_hash(stats: &NormStats) -> u32 {
    let mut h = crc32fast::Hasher::new();
    for v in stats.mean.iter().chain(&stats.std) {
        h.update(&v.to_le_bytes());
    }
    h.finalize()
}

/// (name, shape, fan_in) of every parameter, backbone first.
pub fn layout(variant: Variant, input: [usize; 3]) -> Vec<(String, Vec<usize>, usize)> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<(String, Vec<usize>, usize)>, name: &str, f: usize, c: usize, k: usize| {
        out.push((format!("{name}.w"), vec![f, c, k, k], c * k * k));
        out.push((format!("{name}.b"), vec![f], c * k * k));
    };
    let dense = |out: &mut Vec<(String, Vec<usize>, usize)>, name: &str, o: usize, i: usize| {
        out.push((format!("{name}.w"), vec![o, i], i));
        out.push((format!("{name}.b"), vec![o], i));
    };
    let [c, mut h, mut w] = input;
    let mut ch = c;
    for (i, &(f, k, s)) in BACKBONE_CONVS.iter().enumerate() {
        conv(&mut out, &format!("backbone.conv{}", i + 1), f, ch, k);
        h = (h - k) / s + 1;
        w = (w - k) / s + 1;
        ch = f;
    }
    dense(&mut out, "backbone.fc1", 100, ch * h * w);
    dense(&mut out, "backbone.fc2", FEATURE_DIM, 100);
    match variant {
        Variant::Cnn => {
            dense(&mut out, "head.fc1", 128, FEATURE_DIM);
            dense(&mut out, "head.fc2", 64, 128);
            dense(&mut out, "head.fc3", 32, 64);
            dense(&mut out, "head.out", 1, 32);
        }
        Variant::CnnLstm => {
            dense(&mut out, "lstm", 4 * LSTM_UNITS, FEATURE_DIM + LSTM_UNITS);
            dense(&mut out, "head.out", 1, LSTM_UNITS);
        }
        Variant::CnnNode => {
            dense(&mut out, "node.proj", NODE_DIM, SEQUENCE_LEN * FEATURE_DIM);
            dense(&mut out, "node.f1", NODE_DIM, NODE_DIM);
            dense(&mut out, "node.f2", NODE_DIM, NODE_DIM);
            dense(&mut out, "head.fc1", 50, NODE_DIM);
            dense(&mut out, "head.fc2", 25, 50);
            dense(&mut out, "head.out", 1, 25);
        }
    }
    out
}

/// (filters, kernel, stride)
const BACKBONE_CONVS: [(usize, usize, usize); 5] = [(24, 5, 2), (36, 5, 2), (48, 5, 2), (64, 3, 1), (64, 3, 1)];

impl ModelParams {
    /// He-uniform weights (bound √(6/fan_in)), zero biases.
    pub fn init(variant: Variant, ode: Option<OdeConfig>, stats: NormStats, seed: u64) -> Result<Self> {
        Self::init_with_input(variant, ode, stats, seed, [3, MODEL_HEIGHT, MODEL_WIDTH])
    }

    pub fn init_with_input(
        variant: Variant,
        ode: Option<OdeConfig>,
        stats: NormStats,
        seed: u64,
        input: [usize; 3],
    ) -> Result<Self> {
        let ode = match (variant, ode) {
            (Variant::CnnNode, Some(o)) => {
                o.validate()?;
                Some(o)
            }
            (Variant::CnnNode, None) => Some(OdeConfig::new(Solver::Rk4)),
            (_, _) => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(variant, input)
            .into_iter()
            .map(|(name, shape, fan_in)| {
                let t = if name.ends_with(".b") {
                    Tensor::zeros(shape)
                } else {
                    Tensor::uniform(shape, (6.0 / fan_in as f32).sqrt(), &mut rng)
                };
                (name, t)
            })
            .collect();
        Ok(Self {
            meta: ModelMeta {
                variant,
                input_shape: input,
                norm_stats_hash: stats_hash(&stats),
                norm_stats: stats,
                steering_scale: STEERING_SCALE,
                ode,
                config_hash: None,
            },
            tensors,
        })
    }

    pub fn variant(&self) -> Variant {
        self.meta.variant
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| ModelError::Contract(format!("no parameter named {name}")))?;
        if slot.1.shape() != tensor.shape() {
            return Err(TensorError::Shape { op: "set parameter", left: slot.1.shape().to_vec(), right: tensor.shape().to_vec() }.into());
        }
        slot.1 = tensor;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }

    /// Copies every `backbone.*` tensor from `other`.
    pub fn copy_backbone_from(&mut self, other: &ModelParams) -> Result<()> {
        for (name, t) in &other.tensors {
            if name.starts_with("backbone.") {
                self.set(name, t.clone())?;
            }
        }
        Ok(())
    }

    /// Records every parameter on `tape`, tracked when `trainable(name)`.
    pub fn bind(&self, tape: &mut GradTape, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut index = HashMap::with_capacity(self.tensors.len());
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, (name, t))| {
                index.insert(name.clone(), i);
                if trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars, index, meta: self.meta.clone() }
    }
}

/// Parameters recorded on one tape.
#[derive(Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
    meta: ModelMeta,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn dense(&self, tape: &mut GradTape, name: &str, x: Var) -> Result<Var> {
        Ok(tape.dense(x, self.var(&format!("{name}.w")), self.var(&format!("{name}.b")))?)
    }

    fn dense_relu(&self, tape: &mut GradTape, name: &str, x: Var) -> Result<Var> {
        let y = self.dense(tape, name, x)?;
        Ok(tape.relu(y)?)
    }
}

/// PilotNet feature extractor: `[3,66,200]` to a 50-vector, ReLU after
/// every layer.
pub fn backbone_forward(tape: &mut GradTape, p: &Bound, x: Var) -> Result<Var> {
    let expected = p.meta.input_shape.to_vec();
    if tape.value(x).shape() != expected.as_slice() {
        return Err(TensorError::Shape { op: "backbone input", left: expected, right: tape.value(x).shape().to_vec() }.into());
    }
    let mut h = x;
    for (i, &(_, _, stride)) in BACKBONE_CONVS.iter().enumerate() {
        let name = format!("backbone.conv{}", i + 1);
        let y = tape.conv2d(h, p.var(&format!("{name}.w")), p.var(&format!("{name}.b")), stride)?;
        h = tape.relu(y)?;
    }
    let flat = tape.flatten(h)?;
    let h = p.dense_relu(tape, "backbone.fc1", flat)?;
    p.dense_relu(tape, "backbone.fc2", h)
}

/// LSTM hidden and cell state.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(tape: &mut GradTape) -> Self {
        Self { h: tape.constant(Tensor::zeros(vec![LSTM_UNITS])), c: tape.constant(Tensor::zeros(vec![LSTM_UNITS])) }
    }
}

/// Gated update with one stacked weight `[4·64, 50+64]` over `[x; h]` and a
/// single bias; gate order i, f, g, o.
pub fn lstm_cell_step(tape: &mut GradTape, w: Var, b: Var, x: Var, state: LstmState) -> Result<LstmState> {
    let n = LSTM_UNITS;
    let xh = tape.concat(&[x, state.h])?;
    let z = tape.dense(xh, w, b)?;
    let zi = tape.slice(z, 0, n)?;
    let zf = tape.slice(z, n, n)?;
    let zg = tape.slice(z, 2 * n, n)?;
    let zo = tape.slice(z, 3 * n, n)?;
    let i = tape.sigmoid(zi)?;
    let f = tape.sigmoid(zf)?;
    let g = tape.tanh(zg)?;
    let o = tape.sigmoid(zo)?;
    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// `f(h) = W2·tanh(W1·h + b1) + b2`; time-invariant.
pub fn node_vector_field(tape: &mut GradTape, p: &Bound, h: Var) -> Result<Var> {
    let a = p.dense(tape, "node.f1", h)?;
    let a = tape.tanh(a)?;
    p.dense(tape, "node.f2", a)
}

/// Maps backbone features (1 for the CNN, 3 oldest-first for sequence
/// models) to the normalized steering scalar.
pub fn head_forward(tape: &mut GradTape, p: &Bound, features: &[Var]) -> Result<Var> {
    let variant = p.meta.variant;
    if features.len() != variant.window() {
        return Err(ModelError::Contract(format!(
            "{variant} expects {} frame(s), got {}",
            variant.window(),
            features.len()
        )));
    }
    match variant {
        Variant::Cnn => {
            let h = p.dense_relu(tape, "head.fc1", features[0])?;
            let h = p.dense_relu(tape, "head.fc2", h)?;
            let h = p.dense_relu(tape, "head.fc3", h)?;
            p.dense(tape, "head.out", h)
        }
        Variant::CnnLstm => {
            let mut state = LstmState::zeros(tape);
            let (w, b) = (p.var("lstm.w"), p.var("lstm.b"));
            for &x in features {
                state = lstm_cell_step(tape, w, b, x, state)?;
            }
            p.dense(tape, "head.out", state.h)
        }
        Variant::CnnNode => {
            let cat = tape.concat(features)?;
            let h0 = p.dense(tape, "node.proj", cat)?;
            let h0 = tape.tanh(h0)?;
            let cfg = p.meta.ode.expect("node variant carries ODE settings");
            let mut backend = TapeBackend { tape: &mut *tape, field: |t: &mut GradTape, h: Var, _| node_vector_field(t, p, h) };
            let h1 = ode_solve(&mut backend, h0, &cfg)?;
            let h = p.dense_relu(tape, "head.fc1", h1)?;
            let h = p.dense_relu(tape, "head.fc2", h)?;
            p.dense(tape, "head.out", h)
        }
    }
}

/// Full forward from normalized frame tensors (oldest first).
pub fn forward(tape: &mut GradTape, p: &Bound, frames: &[Var]) -> Result<Var> {
    let feats = frames.iter().map(|&f| backbone_forward(tape, p, f)).collect::<Result<Vec<_>>>()?;
    head_forward(tape, p, &feats)
}

impl ModelParams {
    /// Normalized steering for normalized `[3,H,W]` frames, oldest first.
    pub fn predict(&self, frames: &[Tensor]) -> Result<f32> {
        let mut tape = GradTape::new();
        let p = self.bind(&mut tape, |_| false);
        let xs: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
        let y = forward(&mut tape, &p, &xs)?;
        Ok(tape.value(y).data()[0])
    }

    /// 50-d backbone features of one normalized frame.
    pub fn features(&self, frame: &Tensor) -> Result<Vec<f32>> {
        let mut tape = GradTape::new();
        let p = self.bind(&mut tape, |_| false);
        let x = tape.constant(frame.clone());
        let f = backbone_forward(&mut tape, &p, x)?;
        Ok(tape.value(f).data().to_vec())
    }

    /// Head output from precomputed features.
    pub fn predict_from_features(&self, features: &[Vec<f32>]) -> Result<f32> {
        let mut tape = GradTape::new();
        let p = self.bind(&mut tape, |_| false);
        let fs: Vec<Var> = features.iter().map(|f| tape.constant(Tensor::from_vec(f.clone()))).collect();
        let y = head_forward(&mut tape, &p, &fs)?;
        Ok(tape.value(y).data()[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn stats() -> NormStats {
        NormStats::identity()
    }

    #[test]
    fn lstm_parameter_count() {
        let p = ModelParams::init(Variant::CnnLstm, None, stats(), 0).unwrap();
        assert_eq!(p.count_with_prefix("lstm."), 4 * (64 * (50 + 64) + 64));
        assert_eq!(p.count_with_prefix("head."), 64 + 1);
        let a = ModelParams::init(Variant::CnnLstm, None, stats(), 0).unwrap();
        assert_eq!(a.param_count(), p.param_count());
    }

    #[test]
    fn backbone_shapes() {
        let l = layout(Variant::Cnn, [3, 66, 200]);
        let fc1 = l.iter().find(|(n, _, _)| n == "backbone.fc1.w").unwrap();
        assert_eq!(fc1.1, vec![100, 64 * 18]);
        let p = ModelParams::init(Variant::Cnn, None, stats(), 1).unwrap();
        let f = p.features(&Tensor::zeros(vec![3, 66, 200])).unwrap();
        assert_eq!(f.len(), FEATURE_DIM);
        assert!(p.features(&Tensor::zeros(vec![3, 60, 200])).is_err());
    }

    fn zeroed(mut p: ModelParams, except: &str) -> ModelParams {
        for (n, t) in p.tensors.iter_mut() {
            if !n.starts_with(except) {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
        p
    }

    #[test]
    fn zero_weights_output_final_bias() {
        for v in [Variant::Cnn, Variant::CnnLstm, Variant::CnnNode] {
            let mut p = zeroed(ModelParams::init(v, None, stats(), 2).unwrap(), "none");
            p.set("head.out.b", Tensor::from_vec(vec![0.375])).unwrap();
            let frames = vec![Tensor::filled(vec![3, 66, 200], 0.5); v.window()];
            assert_eq!(p.predict(&frames).unwrap(), 0.375, "{v}");
        }
    }

    #[test]
    fn prediction_is_deterministic_and_window_checked() {
        let p = ModelParams::init(Variant::CnnNode, None, stats(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(vec![3, 66, 200], 1.0, &mut rng)).collect();
        let a = p.predict(&frames).unwrap();
        assert_eq!(a.to_bits(), p.predict(&frames).unwrap().to_bits());
        assert!(matches!(p.predict(&frames[..2]), Err(ModelError::Contract(_))));
    }

    #[test]
    fn zero_field_node_is_head_of_initial_state() {
        let mut p = ModelParams::init(Variant::CnnNode, None, stats(), 4).unwrap();
        for n in ["node.f1.w", "node.f1.b", "node.f2.w", "node.f2.b"] {
            let shape = p.get(n).unwrap().shape().to_vec();
            p.set(n, Tensor::zeros(shape)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats: Vec<Vec<f32>> = (0..3).map(|_| (0..50).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let got = p.predict_from_features(&feats).unwrap();
        // Head applied directly to tanh(proj · features).
        let mut tape = GradTape::new();
        let b = p.bind(&mut tape, |_| false);
        let fs: Vec<Var> = feats.iter().map(|f| tape.constant(Tensor::from_vec(f.clone()))).collect();
        let cat = tape.concat(&fs).unwrap();
        let h = b.dense(&mut tape, "node.proj", cat).unwrap();
        let h = tape.tanh(h).unwrap();
        let h = b.dense_relu(&mut tape, "head.fc1", h).unwrap();
        let h = b.dense_relu(&mut tape, "head.fc2", h).unwrap();
        let y = b.dense(&mut tape, "head.out", h).unwrap();
        assert_eq!(got, tape.value(y).data()[0]);
    }

    #[test]
    fn lstm_zero_fixed_point_and_forget_saturation() {
        let mut tape = GradTape::new();
        let w = tape.constant(Tensor::zeros(vec![256, 114]));
        let b = tape.constant(Tensor::zeros(vec![256]));
        let x = tape.constant(Tensor::zeros(vec![50]));
        let s = LstmState::zeros(&mut tape);
        let out = lstm_cell_step(&mut tape, w, b, x, s).unwrap();
        assert!(tape.value(out.h).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(out.c).data().iter().all(|&v| v == 0.0));

        let mut bias = vec![0.0f32; 256];
        bias[64..128].iter_mut().for_each(|v| *v = 10.0);
        let b = tape.constant(Tensor::from_vec(bias));
        let c = tape.constant(Tensor::filled(vec![64], 1.0));
        let h = tape.constant(Tensor::zeros(vec![64]));
        let out = lstm_cell_step(&mut tape, w, b, x, LstmState { h, c }).unwrap();
        assert!(tape.value(out.c).data().iter().all(|&v| (v - 1.0).abs() < 1e-4));
    }

    #[test]
    fn sequence_and_static_models_differ_on_zero_input() {
        let cnn = ModelParams::init(Variant::Cnn, None, stats(), 6).unwrap();
        let mut lstm = ModelParams::init(Variant::CnnLstm, None, stats(), 6).unwrap();
        lstm.copy_backbone_from(&cnn).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (_, t) in lstm.tensors.iter_mut().filter(|(n, _)| n.ends_with(".b")) {
            *t = Tensor::uniform(t.shape().to_vec(), 0.1, &mut rng);
        }
        let mut cnn = cnn;
        cnn.copy_backbone_from(&lstm).unwrap();
        for (_, t) in cnn.tensors.iter_mut().filter(|(n, _)| n.starts_with("head.")) {
            *t = Tensor::uniform(t.shape().to_vec(), 0.1, &mut rng);
        }
        let z = Tensor::zeros(vec![3, 66, 200]);
        let a = cnn.predict(std::slice::from_ref(&z)).unwrap();
        let b = lstm.predict(&[z.clone(), z.clone(), z]).unwrap();
        assert_ne!(a, b);
    }
}
