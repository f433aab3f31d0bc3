//! Network architectures: plain fully connected (ANN), DeepONet, MIONet and
//! the composite MIONet encoder + fully connected decoder (CPNN).
//!
//! All models consume standardized inputs placed on their own tensor axes:
//! loadings `p` on `(N_L,1,1,1,5)`, class `cl` on `(1,N_c,1,1,1)`, time `T` on
//! `(1,1,N_t,1,1)` and coordinates `q` on `(N_L,1,1,N_s,3)`. ANN and DeepONet
//! materialise Cartesian products of these groups; MIONet and CPNN only
//! broadcast latent vectors.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{Target, FEATURE_WIDTH};
use crate::tensor::{Activation, Gradients, Shape5, Tape, Tensor5, TensorError, Var};
use crate::training::StandardizationStats;

pub const SWMD_MAGIC: &[u8; 6] = b"SWMD1\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("input '{input}' occupies the {axis} axis (extent {extent}); expected extent 1")]
    AxisMisplaced { input: &'static str, axis: &'static str, extent: usize },
    #[error("input '{input}' has feature width {got}, expected {expected}")]
    WidthMismatch { input: &'static str, expected: usize, got: usize },
    #[error("{0} architecture cannot be evaluated this way")]
    WrongKind(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("not an SWMD1 checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("model has no standardization statistics")]
    MissingStats,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Ann,
    Deeponet,
    Mionet,
    Cpnn,
}

impl ArchKind {
    pub const ALL: [ArchKind; 4] = [ArchKind::Ann, ArchKind::Deeponet, ArchKind::Mionet, ArchKind::Cpnn];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Ann => "ann",
            ArchKind::Deeponet => "deeponet",
            ArchKind::Mionet => "mionet",
            ArchKind::Cpnn => "cpnn",
        }
    }
}

impl std::str::FromStr for ArchKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ArchKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown architecture '{s}' (expected ann|deeponet|mionet|cpnn)"))
    }
}

/// How branch and trunk latents are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Merge {
    #[default]
    Hadamard,
    Add,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// One network per target; a single output.
    #[default]
    Separate,
    /// One network predicting `(|u|, c)` together.
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub kind: ArchKind,
    /// Hidden layers in each branch/trunk subnetwork.
    pub encoder_layers: usize,
    /// Hidden layers in the fully connected decoder. Ignored for pure MIONet.
    pub decoder_layers: usize,
    pub hidden: usize,
    pub activation: Activation,
    pub merge: Merge,
    pub output_mode: OutputMode,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self::cpnn(2, 6, 92)
    }
}

impl ArchitectureConfig {
    pub fn cpnn(encoder_layers: usize, decoder_layers: usize, hidden: usize) -> Self {
        Self {
            kind: ArchKind::Cpnn,
            encoder_layers,
            decoder_layers,
            hidden,
            activation: Activation::Tanh,
            merge: Merge::Hadamard,
            output_mode: OutputMode::Separate,
        }
    }

    pub fn with_kind(self, kind: ArchKind) -> Self {
        Self { kind, ..self }
    }

    pub fn outputs(&self) -> usize {
        match self.output_mode {
            OutputMode::Separate => 1,
            OutputMode::Joint => 2,
        }
    }

    /// Decoder depth actually built (pure MIONet has a linear readout only).
    pub fn effective_decoder_layers(&self) -> usize {
        match self.kind {
            ArchKind::Mionet => 0,
            _ => self.decoder_layers,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 {
            return Err(ModelError::InvalidConfig("hidden width must be at least 1".into()));
        }
        if self.encoder_layers == 0 {
            return Err(ModelError::InvalidConfig("at least one encoder layer is required".into()));
        }
        Ok(())
    }

    /// Input widths of the encoder subnetworks, in checkpoint order.
    fn encoder_inputs(&self) -> &'static [(&'static str, usize)] {
        match self.kind {
            ArchKind::Ann => &[],
            ArchKind::Deeponet => &[("br", 7), ("tr", 3)],
            ArchKind::Mionet | ArchKind::Cpnn => &[("br1", 5), ("br2", 1), ("tr1", 1), ("tr2", 3)],
        }
    }
}

/// Fully connected layer, weight stored row-major `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    #[serde(skip)]
    pub weight: Vec<f64>,
    #[serde(skip)]
    pub bias: Vec<f64>,
}

impl Dense {
    fn glorot(n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let limit = glorot_limit(n_in, n_out);
        let weight = (0..n_in * n_out).map(|_| rng.gen_range(-limit..=limit)).collect();
        Self { n_in, n_out, weight, bias: vec![0.0; n_out] }
    }
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subnet {
    pub name: String,
    pub layers: Vec<Dense>,
    /// Whether the last layer is followed by the activation.
    pub activate_last: bool,
}

impl Subnet {
    fn build(name: &str, widths: &[usize], activate_last: bool, rng: &mut impl Rng) -> Self {
        let layers = widths.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect();
        Self { name: name.to_string(), layers, activate_last }
    }
}

/// Metadata carried along in checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub targets: Vec<Target>,
    pub iterations: usize,
    pub best_iteration: usize,
    pub best_val_mse: Option<f64>,
    pub seed: u64,
}

/// Trainable parameters plus the statistics needed to use them on raw data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ArchitectureConfig,
    /// Br1, Br2, Tr1, Tr2 (MIONet/CPNN); Br, Tr (DeepONet); empty for ANN.
    pub encoders: Vec<Subnet>,
    /// Hidden decoder layers followed by the linear readout.
    pub decoder: Subnet,
    pub stats: Option<StandardizationStats>,
    pub meta: TrainingMeta,
}

/// Glorot-uniform weights, zero biases.
pub fn build(cfg: &ArchitectureConfig, seed: u64) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.hidden;
    let encoders = cfg
        .encoder_inputs()
        .iter()
        .map(|&(name, width)| {
            let mut widths = vec![width];
            widths.extend(std::iter::repeat(h).take(cfg.encoder_layers));
            Subnet::build(name, &widths, true, &mut rng)
        })
        .collect();
    let mut widths = match cfg.kind {
        ArchKind::Ann => {
            let mut w = vec![FEATURE_WIDTH];
            w.extend(std::iter::repeat(h).take(cfg.encoder_layers + cfg.decoder_layers));
            w
        }
        _ => {
            let mut w = vec![h];
            w.extend(std::iter::repeat(h).take(cfg.effective_decoder_layers()));
            w
        }
    };
    widths.push(cfg.outputs());
    let decoder = Subnet::build("fcnn", &widths, false, &mut rng);
    Ok(ModelParams { config: *cfg, encoders, decoder, stats: None, meta: TrainingMeta::default() })
}

/// Standardized inputs, each on its own axes.
#[derive(Debug, Clone)]
pub struct SplitInputs {
    pub p: Tensor5,
    pub cl: Tensor5,
    pub t: Tensor5,
    pub q: Tensor5,
}

/// The same inputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct InputVars {
    pub p: Var,
    pub cl: Var,
    pub t: Var,
    pub q: Var,
}

impl SplitInputs {
    pub fn record(&self, tape: &mut Tape) -> InputVars {
        InputVars {
            p: tape.leaf(self.p.clone()),
            cl: tape.leaf(self.cl.clone()),
            t: tape.leaf(self.t.clone()),
            q: tape.leaf(self.q.clone()),
        }
    }

    /// Batch extents `(N_L, N_c, N_t, N_s)`.
    pub fn extents(&self) -> [usize; 4] {
        [self.p.shape().dims()[0], self.cl.shape().dims()[1], self.t.shape().dims()[2], self.q.shape().dims()[3]]
    }
}

fn check_placement(
    input: &'static str,
    shape: Shape5,
    free_axes: &[usize],
    width: usize,
) -> Result<(), ModelError> {
    const NAMES: [&str; 4] = ["case", "class", "time", "point"];
    let d = shape.dims();
    for axis in 0..4 {
        if !free_axes.contains(&axis) && d[axis] != 1 {
            return Err(ModelError::AxisMisplaced { input, axis: NAMES[axis], extent: d[axis] });
        }
    }
    if d[4] != width {
        return Err(ModelError::WidthMismatch { input, expected: width, got: d[4] });
    }
    Ok(())
}

fn check_inputs(tape: &Tape, v: &InputVars) -> Result<(), ModelError> {
    check_placement("p", tape.shape(v.p), &[0], 5)?;
    check_placement("cl", tape.shape(v.cl), &[1], 1)?;
    check_placement("T", tape.shape(v.t), &[2], 1)?;
    check_placement("q", tape.shape(v.q), &[0, 3], 3)?;
    let (np, nq) = (tape.shape(v.p).dims()[0], tape.shape(v.q).dims()[0]);
    if np != nq && nq != 1 {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch { axis: "case", left: np, right: nq }));
    }
    Ok(())
}

/// Parameters recorded as leaves of one tape, in checkpoint order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    /// `(weight, bias)` per layer, encoders first then decoder.
    leaves: Vec<(Var, Var)>,
    /// Layer count per subnet, same order.
    counts: Vec<usize>,
}

impl BoundParams {
    fn subnet(&self, index: usize) -> &[(Var, Var)] {
        let start: usize = self.counts[..index].iter().sum();
        &self.leaves[start..start + self.counts[index]]
    }

    /// Gradients in the order of [`ModelParams::params`].
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.leaves.len() * 2);
        for &(w, b) in &self.leaves {
            out.push(grads.take(w));
            out.push(grads.take(b));
        }
        out
    }
}

impl ModelParams {
    fn subnets(&self) -> impl Iterator<Item = &Subnet> {
        self.encoders.iter().chain(std::iter::once(&self.decoder))
    }

    /// Every weight matrix and bias vector, in checkpoint order.
    pub fn params(&self) -> Vec<&[f64]> {
        self.subnets()
            .flat_map(|s| s.layers.iter())
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.encoders
            .iter_mut()
            .chain(std::iter::once(&mut self.decoder))
            .flat_map(|s| s.layers.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn targets(&self) -> Vec<Target> {
        match self.config.output_mode {
            OutputMode::Joint => Target::ALL.to_vec(),
            OutputMode::Separate => {
                if self.meta.targets.is_empty() {
                    vec![Target::Concentration]
                } else {
                    self.meta.targets.clone()
                }
            }
        }
    }

    pub fn stats(&self) -> Result<&StandardizationStats, ModelError> {
        self.stats.as_ref().ok_or(ModelError::MissingStats)
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut leaves = Vec::new();
        let mut counts = Vec::new();
        for subnet in self.subnets() {
            counts.push(subnet.layers.len());
            for layer in &subnet.layers {
                let w = Tensor5::from_dims([1, 1, 1, layer.n_out, layer.n_in], layer.weight.clone())
                    .expect("layer weight shape");
                let b = Tensor5::from_dims([1, 1, 1, 1, layer.n_out], layer.bias.clone())
                    .expect("layer bias shape");
                leaves.push((tape.leaf(w), tape.leaf(b)));
            }
        }
        BoundParams { leaves, counts }
    }

    fn run_subnet(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        index: usize,
        mut x: Var,
    ) -> Result<Var, ModelError> {
        let subnet = if index < self.encoders.len() { &self.encoders[index] } else { &self.decoder };
        let layers = bound.subnet(index);
        for (i, &(w, b)) in layers.iter().enumerate() {
            x = tape.affine(x, w, b)?;
            if i + 1 < layers.len() || subnet.activate_last {
                x = tape.activation(x, self.config.activation);
            }
        }
        Ok(x)
    }

    fn merge(&self, tape: &mut Tape, parts: &[Var]) -> Result<Var, ModelError> {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = match self.config.merge {
                Merge::Hadamard => tape.mul(acc, p)?,
                Merge::Add => tape.add(acc, p)?,
            };
        }
        Ok(acc)
    }

    fn decode(&self, tape: &mut Tape, bound: &BoundParams, latent: Var) -> Result<Var, ModelError> {
        self.run_subnet(tape, bound, self.encoders.len(), latent)
    }

    /// Merged branch/trunk latent of shape `(N_L, N_c, N_t, N_s, N_h)`.
    pub fn forward_mionet(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        inputs: &InputVars,
    ) -> Result<Var, ModelError> {
        if !matches!(self.config.kind, ArchKind::Mionet | ArchKind::Cpnn) {
            return Err(ModelError::WrongKind(self.config.kind.name()));
        }
        check_inputs(tape, inputs)?;
        let br1 = self.run_subnet(tape, bound, 0, inputs.p)?;
        let br2 = self.run_subnet(tape, bound, 1, inputs.cl)?;
        let tr1 = self.run_subnet(tape, bound, 2, inputs.t)?;
        let tr2 = self.run_subnet(tape, bound, 3, inputs.q)?;
        self.merge(tape, &[br1, br2, tr1, tr2])
    }

    /// MIONet latent followed by the decoder; outputs `(N_L, N_c, N_t, N_s, N_o)`.
    pub fn forward_cpnn(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        inputs: &InputVars,
    ) -> Result<Var, ModelError> {
        let latent = self.forward_mionet(tape, bound, inputs)?;
        self.decode(tape, bound, latent)
    }

    /// Plain network on materialised width-10 feature rows.
    pub fn forward_ann(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var, ModelError> {
        if self.config.kind != ArchKind::Ann {
            return Err(ModelError::WrongKind(self.config.kind.name()));
        }
        let got = tape.shape(x).features();
        if got != FEATURE_WIDTH {
            return Err(ModelError::WidthMismatch { input: "x", expected: FEATURE_WIDTH, got });
        }
        self.decode(tape, bound, x)
    }

    /// `Br(p × cl × T) ⊙ Tr(q)` followed by the decoder.
    pub fn forward_deeponet(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        branch: Var,
        trunk: Var,
    ) -> Result<Var, ModelError> {
        if self.config.kind != ArchKind::Deeponet {
            return Err(ModelError::WrongKind(self.config.kind.name()));
        }
        for (input, var, width) in [("branch", branch, 7), ("trunk", trunk, 3)] {
            let got = tape.shape(var).features();
            if got != width {
                return Err(ModelError::WidthMismatch { input, expected: width, got });
            }
        }
        let br = self.run_subnet(tape, bound, 0, branch)?;
        let tr = self.run_subnet(tape, bound, 1, trunk)?;
        let latent = self.merge(tape, &[br, tr])?;
        self.decode(tape, bound, latent)
    }

    /// Runs whichever architecture this is on split inputs, materialising the
    /// Cartesian products ANN and DeepONet need on the tape.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, inputs: &InputVars) -> Result<Var, ModelError> {
        match self.config.kind {
            ArchKind::Mionet | ArchKind::Cpnn => self.forward_cpnn(tape, bound, inputs),
            ArchKind::Ann => {
                check_inputs(tape, inputs)?;
                let x = tape.concat_features(&[inputs.p, inputs.cl, inputs.t, inputs.q])?;
                self.forward_ann(tape, bound, x)
            }
            ArchKind::Deeponet => {
                check_inputs(tape, inputs)?;
                let branch = tape.concat_features(&[inputs.p, inputs.cl, inputs.t])?;
                self.forward_deeponet(tape, bound, branch, inputs.q)
            }
        }
    }

    /// Forward pass on a fresh tape, returning only the output values.
    pub fn predict(&self, inputs: &SplitInputs) -> Result<Tensor5, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let vars = inputs.record(&mut tape);
        let out = self.forward(&mut tape, &bound, &vars)?;
        Ok(tape.value(out).clone())
    }

    /// Reference MIONet/CPNN evaluation: every input is first expanded to the
    /// full `(N_L, N_c, N_t, N_s)` grid and each subnet runs on all rows. Costs
    /// the Cartesian product in memory; meant for checking [`Self::predict`].
    pub fn predict_materialized(&self, inputs: &SplitInputs) -> Result<Tensor5, ModelError> {
        if !matches!(self.config.kind, ArchKind::Mionet | ArchKind::Cpnn) {
            return Err(ModelError::WrongKind(self.config.kind.name()));
        }
        let [m, c, o, n] = inputs.extents();
        let expand = |x: &Tensor5| -> Result<Tensor5, ModelError> {
            let w = x.shape().features();
            Ok(x.broadcast_to(Shape5::new([m, c, o, n, w])?)?)
        };
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut parts = Vec::with_capacity(4);
        for (i, x) in [&inputs.p, &inputs.cl, &inputs.t, &inputs.q].into_iter().enumerate() {
            let leaf = tape.leaf(expand(x)?);
            parts.push(self.run_subnet(&mut tape, &bound, i, leaf)?);
        }
        let latent = self.merge(&mut tape, &parts)?;
        let out = self.decode(&mut tape, &bound, latent)?;
        Ok(tape.value(out).clone())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ModelError> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config,
            subnets: self.subnets().cloned().collect(),
            stats: self.stats.clone(),
            meta: self.meta.clone(),
        };
        let text = serde_json::to_string_pretty(&header)
            .map_err(|e| ModelError::Corrupt(format!("header encoding: {e}")))?;
        let len = u32::try_from(text.len()).map_err(|_| ModelError::Corrupt("header too long".into()))?;
        w.write_all(SWMD_MAGIC)?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        for chunk in self.params() {
            for v in chunk {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, ModelError> {
        let truncated = |e: io::Error| match e.kind() {
            io::ErrorKind::UnexpectedEof => ModelError::Corrupt("truncated".into()),
            _ => ModelError::Io(e),
        };
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != SWMD_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(truncated)?;
        let mut text = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut text).map_err(truncated)?;
        let header: CheckpointHeader = serde_json::from_slice(&text)
            .map_err(|e| ModelError::Corrupt(format!("header: {e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(ModelError::BadVersion(header.version));
        }
        let mut subnets = header.subnets;
        for subnet in &mut subnets {
            for layer in &mut subnet.layers {
                layer.weight = read_f64s(r, layer.n_in * layer.n_out).map_err(truncated)?;
                layer.bias = read_f64s(r, layer.n_out).map_err(truncated)?;
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(ModelError::Corrupt("trailing bytes after weights".into()));
        }
        let decoder = subnets.pop().ok_or_else(|| ModelError::Corrupt("no subnetworks".into()))?;
        let model = ModelParams {
            config: header.config,
            encoders: subnets,
            decoder,
            stats: header.stats,
            meta: header.meta,
        };
        model.check_structure()?;
        Ok(model)
    }

    /// Layer dimensions chain and match the configuration.
    fn check_structure(&self) -> Result<(), ModelError> {
        let reference = build(&self.config, 0)?;
        let dims = |m: &ModelParams| -> Vec<(usize, usize)> {
            m.subnets().flat_map(|s| s.layers.iter().map(|l| (l.n_in, l.n_out))).collect()
        };
        if dims(self) != dims(&reference) || self.encoders.len() != reference.encoders.len() {
            return Err(ModelError::Corrupt("layer dimensions do not match the architecture".into()));
        }
        Ok(())
    }
}

fn read_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    Ok(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect())
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: ArchitectureConfig,
    subnets: Vec<Subnet>,
    stats: Option<StandardizationStats>,
    meta: TrainingMeta,
}

/// Element counts of the full input dataset under each input layout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryAccounting {
    /// Width-10 rows replicated over cases, times and points.
    pub ann_elements: u64,
    /// Width-10 rows over the full case × class × time × point product.
    pub ann_cartesian_elements: u64,
    /// Separate input groups: `M·5 + C + O + M·N·3`.
    pub mionet_elements: u64,
    pub ratio: f64,
    pub bytes_per_element: u64,
}

impl MemoryAccounting {
    pub fn ann_gib(&self) -> f64 {
        (self.ann_elements * self.bytes_per_element) as f64 / (1u64 << 30) as f64
    }

    pub fn mionet_gib(&self) -> f64 {
        (self.mionet_elements * self.bytes_per_element) as f64 / (1u64 << 30) as f64
    }
}

pub fn input_memory_accounting(
    cases: u64,
    classes: u64,
    times: u64,
    points: u64,
    bytes_per_element: u64,
) -> MemoryAccounting {
    let width = FEATURE_WIDTH as u64;
    let ann_elements = cases * times * points * width;
    let ann_cartesian_elements = cases * classes * times * points * width;
    let mionet_elements = cases * 5 + classes + times + cases * points * 3;
    MemoryAccounting {
        ann_elements,
        ann_cartesian_elements,
        mionet_elements,
        ratio: mionet_elements as f64 / ann_elements as f64,
        bytes_per_element,
    }
}
