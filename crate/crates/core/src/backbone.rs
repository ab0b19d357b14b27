//! The dual-branch forecaster: disentangling gate, intrinsic and environment
//! branches, prototype fusion, output head and checkpoint files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{SpatialAttention, TemporalAttention};
use crate::error::{io_err, Error, Result};
use crate::graphs::{build_rct_adjacency, build_sim_adjacency, CrossTimeAdjacency, SensorGraph};
use crate::ndtensor::{Tensor, Var};
use crate::nn::{uniform, Bound, Linear, ParamId, ParamStore};
use crate::patterns::{init_prototypes, one_hot_membership, PrototypeBank, PATTERN_COUNT};

const MANIFEST_FILE: &str = "manifest.txt";
const PARAMS_FILE: &str = "params.bin";
const GRAPH_FILE: &str = "edges.txt";
const CHECKPOINT_VERSION: &str = "1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Parallel,
    #[default]
    Sequential,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Add,
    Concat,
    Gate,
}

/// Which cross-time graph the spatial layers propagate over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyKind {
    #[default]
    Rct,
    Sim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width `D`.
    pub width: usize,
    /// STLayer count `L`.
    pub layers: usize,
    /// Sub-tree levels `K`.
    pub levels: usize,
    pub structure: Structure,
    pub fusion: Fusion,
    /// Input window `T`.
    pub input_steps: usize,
    /// Output window `T'`; must equal `T`.
    pub output_steps: usize,
    /// Reading channels `C`.
    pub channels: usize,
    /// Cross-time span `s`.
    pub span: usize,
    pub adjacency: AdjacencyKind,
    /// Causal mask in temporal attention. Off by default since the output
    /// head maps input step `t` to target step `t`.
    pub causal: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 16,
            layers: 2,
            levels: 2,
            structure: Structure::Sequential,
            fusion: Fusion::Add,
            input_steps: 12,
            output_steps: 12,
            channels: 1,
            span: 1,
            adjacency: AdjacencyKind::Rct,
            causal: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("width", self.width),
            ("levels", self.levels),
            ("input_steps", self.input_steps),
            ("output_steps", self.output_steps),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model {name} must be positive")));
            }
        }
        if self.input_steps != self.output_steps {
            return Err(Error::Config(format!(
                "output window {} must equal input window {}",
                self.output_steps, self.input_steps
            )));
        }
        Ok(())
    }
}

/// Splits the input into intrinsic and environment parts with per-(b, t, n)
/// softmax coefficients.
#[derive(Clone, Copy, Debug)]
pub struct DisentangleGate {
    pub linear: Linear,
}

pub struct Disentangled<'t> {
    pub x_i: Var<'t>,
    pub x_e: Var<'t>,
    /// `(B, T, N)`.
    pub mu_i: Var<'t>,
    pub mu_e: Var<'t>,
}

impl DisentangleGate {
    pub fn new(store: &mut ParamStore, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            linear: Linear::new(store, "gate", channels, 2, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Disentangled<'t>> {
        let s = x.shape();
        let [b, t, n, _] = s[..] else {
            return Err(Error::Config(format!("gate expects (B,T,N,C), got {s:?}")));
        };
        let mu = self.linear.forward(p, x)?.softmax(3)?;
        let mu_i = mu.slice(3, 0, 1)?;
        let mu_e = mu.slice(3, 1, 1)?;
        Ok(Disentangled {
            x_i: mu_i.broadcast_to(&s)?.mul(x)?,
            x_e: mu_e.broadcast_to(&s)?.mul(x)?,
            mu_i: mu_i.reshape(&[b, t, n])?,
            mu_e: mu_e.reshape(&[b, t, n])?,
        })
    }
}

/// One encoder block with a residual connection.
#[derive(Clone, Debug)]
pub struct StLayer {
    pub spatial: SpatialAttention,
    pub temporal: TemporalAttention,
    pub structure: Structure,
    pub fusion: Fusion,
    /// `2D -> D` map for concat and gate fusion.
    pub mix: Option<Linear>,
}

impl StLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.width;
        let spatial = SpatialAttention::new(store, &format!("{name}.spatial"), d, cfg.levels, rng);
        let temporal = TemporalAttention::new(store, &format!("{name}.temporal"), d, cfg.causal, rng);
        let mix = (cfg.structure == Structure::Parallel && cfg.fusion != Fusion::Add)
            .then(|| Linear::new(store, &format!("{name}.mix"), 2 * d, d, rng));
        Self {
            spatial,
            temporal,
            structure: cfg.structure,
            fusion: cfg.fusion,
            mix,
        }
    }

    /// Combines spatial and temporal outputs in the parallel arrangement.
    pub fn fuse<'t>(&self, p: &Bound<'t>, hs: Var<'t>, ht: Var<'t>) -> Result<Var<'t>> {
        match (self.fusion, self.mix) {
            (Fusion::Add, _) => Ok(hs.add(ht)?),
            (Fusion::Concat, Some(mix)) => mix.forward(p, Var::concat(&[hs, ht], 3)?),
            (Fusion::Gate, Some(mix)) => {
                let z = mix.forward(p, Var::concat(&[hs, ht], 3)?)?.sigmoid()?;
                Ok(ht.add(z.mul(hs.sub(ht)?)?)?)
            }
            (f, None) => Err(Error::Config(format!("fusion {f:?} needs a mixing layer"))),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, h: Var<'t>, adj: &CrossTimeAdjacency) -> Result<Var<'t>> {
        let out = match self.structure {
            Structure::Sequential => self.temporal.forward(p, self.spatial.forward(p, h, adj)?)?,
            Structure::Parallel => {
                let hs = self.spatial.forward(p, h, adj)?;
                let ht = self.temporal.forward(p, h)?;
                self.fuse(p, hs, ht)?
            }
        };
        Ok(h.add(out)?)
    }
}

/// Encoder, decoder and pooled readout of one branch.
#[derive(Clone, Debug)]
pub struct Branch {
    pub lift: Linear,
    /// Learnable per-step embedding `(T, 1, D)` added after the lift.
    pub position: ParamId,
    pub layers: Vec<StLayer>,
    pub decoder: Linear,
    /// Time-axis map `T -> T'`, initialised to the identity.
    pub horizon: Linear,
    /// Time-axis map `T -> 1`.
    pub readout: Linear,
}

impl Branch {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let lift = Linear::new(store, &format!("{name}.lift"), cfg.channels, cfg.width, rng);
        let bound = 1.0 / (cfg.width as f64).sqrt();
        let position = store.add(
            format!("{name}.position"),
            uniform(&[cfg.input_steps, 1, cfg.width], bound, rng),
        );
        let layers = (0..cfg.layers)
            .map(|l| StLayer::new(store, &format!("{name}.layer{l}"), cfg, rng))
            .collect();
        let decoder = Linear::new(store, &format!("{name}.decoder"), cfg.width, cfg.width, rng);
        let horizon = Linear::new(store, &format!("{name}.horizon"), cfg.input_steps, cfg.output_steps, rng);
        *store.get_mut(horizon.weight) = Tensor::eye(cfg.input_steps);
        let readout = Linear::new(store, &format!("{name}.readout"), cfg.output_steps, 1, rng);
        Self {
            lift,
            position,
            layers,
            decoder,
            horizon,
            readout,
        }
    }

    /// Lifted input through the STLayer stack, `(B, T, N, D)`.
    pub fn encode<'t>(&self, p: &Bound<'t>, x: Var<'t>, adj: &CrossTimeAdjacency) -> Result<Var<'t>> {
        let lifted = self.lift.forward(p, x)?;
        let mut h = lifted.add(p.get(self.position).broadcast_to(&lifted.shape())?)?;
        for layer in &self.layers {
            h = layer.forward(p, h, adj)?;
        }
        Ok(h)
    }

    /// `(B, T, N, D) -> (B, D)`: linear over time, then mean over nodes.
    pub fn pool<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let s = z.shape();
        let by_time = z.permute(&[0, 2, 3, 1])?;
        let pooled = self.readout.forward(p, by_time)?.reshape(&[s[0], s[2], s[3]])?;
        Ok(pooled.mean_axis(1)?)
    }

    /// Feature map then time map: `(B, T, N, D) -> (B, T', N, D)`.
    pub fn decode<'t>(&self, p: &Bound<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let by_time = self.decoder.forward(p, h)?.permute(&[0, 2, 3, 1])?;
        Ok(self.horizon.forward(p, by_time)?.permute(&[0, 3, 1, 2])?)
    }

    /// Returns `(Z, g)`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, adj: &CrossTimeAdjacency) -> Result<(Var<'t>, Var<'t>)> {
        let z = self.decode(p, self.encode(p, x, adj)?)?;
        let g = self.pool(p, z)?;
        Ok((z, g))
    }
}

fn check_one_hot(w: &Tensor, batch: usize) -> Result<()> {
    if w.shape() != [batch, PATTERN_COUNT] {
        return Err(Error::Config(format!(
            "membership must be ({batch}, {PATTERN_COUNT}), got {:?}",
            w.shape()
        )));
    }
    for (j, row) in w.data().chunks(PATTERN_COUNT).enumerate() {
        let ones = row.iter().filter(|&&x| x == 1.0).count();
        let zeros = row.iter().filter(|&&x| x == 0.0).count();
        if ones != 1 || zeros != PATTERN_COUNT - 1 {
            return Err(Error::Data(format!("membership row {j} is not one-hot")));
        }
    }
    Ok(())
}

/// `Concat(Z^i + W Psi, Z^e)` over the feature axis.
pub fn fuse_prototypes<'t>(z_i: Var<'t>, z_e: Var<'t>, psi: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    let s = z_i.shape();
    if s.len() != 4 || z_e.shape() != s || psi.shape()[1..] != s[1..] || psi.shape()[0] != PATTERN_COUNT {
        return Err(Error::Config(format!(
            "fuse_prototypes: Z^i {s:?}, Z^e {:?}, psi {:?}",
            z_e.shape(),
            psi.shape()
        )));
    }
    check_one_hot(w, s[0])?;
    let block: usize = s[1..].iter().product();
    let added = z_i
        .tape()
        .constant(w.clone())
        .matmul(psi.reshape(&[PATTERN_COUNT, block])?)?
        .reshape(&s)?;
    Ok(Var::concat(&[z_i.add(added)?, z_e], 3)?)
}

/// Everything the objective needs from one forward pass.
pub struct ForwardOutput<'t> {
    /// `(B, T', N, C)`.
    pub x_hat: Var<'t>,
    pub parts: Disentangled<'t>,
    pub z_i: Var<'t>,
    pub z_e: Var<'t>,
    /// `(B, D)`.
    pub g_i: Var<'t>,
    pub g_e: Var<'t>,
    pub psi: Var<'t>,
    /// One-hot `(B, 17)`.
    pub membership: Tensor,
}

#[derive(Clone, Debug)]
pub struct DualCast {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub graph: SensorGraph,
    pub adjacency: CrossTimeAdjacency,
    pub gate: DisentangleGate,
    pub intrinsic: Branch,
    pub environment: Branch,
    pub prototypes: PrototypeBank,
    pub output: Linear,
}

impl DualCast {
    pub fn new(config: ModelConfig, graph: SensorGraph) -> Result<Self> {
        config.validate()?;
        let adjacency = match config.adjacency {
            AdjacencyKind::Rct => build_rct_adjacency(&graph, config.input_steps, config.span)?,
            AdjacencyKind::Sim => build_sim_adjacency(&graph, config.input_steps, config.span)?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let gate = DisentangleGate::new(&mut params, config.channels, &mut rng);
        let intrinsic = Branch::new(&mut params, "ibranch", &config, &mut rng);
        let environment = Branch::new(&mut params, "ebranch", &config, &mut rng);
        let prototypes = init_prototypes(
            &mut params,
            config.input_steps,
            graph.node_count(),
            config.width,
            config.seed.wrapping_add(0x9e37_79b9),
        );
        let output = Linear::new(&mut params, "output", 2 * config.width, config.channels, &mut rng);
        Ok(Self {
            config,
            params,
            graph,
            adjacency,
            gate,
            intrinsic,
            environment,
            prototypes,
            output,
        })
    }

    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }

    /// `x` is `(B, T, N, C)`; `pattern_ids` holds one calendar id per sample.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, pattern_ids: &[usize]) -> Result<ForwardOutput<'t>> {
        let s = x.shape();
        let want = [pattern_ids.len(), self.config.input_steps, self.node_count(), self.config.channels];
        if s != want {
            return Err(Error::Config(format!("model input {s:?}, expected {want:?}")));
        }
        let parts = self.gate.forward(p, x)?;
        let (z_i, g_i) = self.intrinsic.forward(p, parts.x_i, &self.adjacency)?;
        let (z_e, g_e) = self.environment.forward(p, parts.x_e, &self.adjacency)?;
        let membership = one_hot_membership(pattern_ids)?;
        let psi = p.get(self.prototypes.psi);
        let fused = fuse_prototypes(z_i, z_e, psi, &membership)?;
        let x_hat = self.output.forward(p, fused)?;
        Ok(ForwardOutput {
            x_hat,
            parts,
            z_i,
            z_e,
            g_i,
            g_e,
            psi,
            membership,
        })
    }

    /// Writes `manifest.txt`, `params.bin` and `edges.txt` into `dir`.
    pub fn save(&self, dir: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut manifest = format!(
            "version = {CHECKPOINT_VERSION}\nnodes = {}\nconfig = {}\n",
            self.node_count(),
            serde_json::to_string(&self.config)?
        );
        for (k, v) in metadata {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("metadata entry {k:?} is not a single line")));
            }
            manifest.push_str(&format!("meta.{k} = {v}\n"));
        }
        let mut payload = Vec::with_capacity(self.params.total_elements() * 8);
        for (name, value) in self.params.iter() {
            let dims: Vec<String> = value.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("param.{name} = {}\n", dims.join(",")));
            for x in value.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let write = |file: &str, bytes: &[u8]| {
            let path = dir.join(file);
            fs::write(&path, bytes).map_err(io_err(&path))
        };
        write(MANIFEST_FILE, manifest.as_bytes())?;
        write(PARAMS_FILE, &payload)?;
        write(GRAPH_FILE, self.graph.to_edge_list().as_bytes())
    }

    /// Restores a model and its metadata from a checkpoint directory.
    pub fn load(dir: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let mut config = None;
        let mut nodes = None;
        let mut metadata = BTreeMap::new();
        let mut shapes = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Checkpoint(format!("manifest line {}: expected `key = value`", i + 1)))?;
            if let Some(name) = key.strip_prefix("param.") {
                let dims = value
                    .split(',')
                    .filter(|d| !d.is_empty())
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Checkpoint(format!("manifest line {}: {e}", i + 1)))?;
                shapes.push((name.to_string(), dims));
            } else if let Some(k) = key.strip_prefix("meta.") {
                metadata.insert(k.to_string(), value.to_string());
            } else {
                match key {
                    "version" if value == CHECKPOINT_VERSION => {}
                    "version" => return Err(Error::Checkpoint(format!("unsupported version {value}"))),
                    "config" => config = Some(serde_json::from_str::<ModelConfig>(value)?),
                    "nodes" => {
                        nodes = Some(value.parse::<usize>().map_err(|e| Error::Checkpoint(format!("nodes: {e}")))?)
                    }
                    other => return Err(Error::Checkpoint(format!("unknown manifest key {other}"))),
                }
            }
        }
        let config = config.ok_or_else(|| Error::Checkpoint("manifest lacks config".into()))?;
        let nodes = nodes.ok_or_else(|| Error::Checkpoint("manifest lacks nodes".into()))?;
        let graph = SensorGraph::load(&dir.join(GRAPH_FILE), nodes)?;
        let mut model = Self::new(config, graph)?;

        let path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let total: usize = shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if bytes.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "payload holds {} bytes, manifest needs {}",
                bytes.len(),
                total * 8
            )));
        }
        let mut values = Vec::with_capacity(shapes.len());
        let mut floats = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for (id, (name, dims)) in model.params.ids().zip(&shapes) {
            if model.params.name(id) != name {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} found where {} was expected",
                    model.params.name(id)
                )));
            }
            let n = dims.iter().product();
            values.push(Tensor::new(dims.clone(), floats.by_ref().take(n).collect())?);
        }
        model.params.load_values(values)?;
        Ok((model, metadata))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::{grad_check, Tape};

    fn tiny(structure: Structure, fusion: Fusion) -> ModelConfig {
        ModelConfig {
            width: 4,
            layers: 1,
            levels: 1,
            structure,
            fusion,
            input_steps: 3,
            output_steps: 3,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn input(b: usize, t: usize, n: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::nn::uniform(&[b, t, n, c], 1.0, &mut rng)
    }

    #[test]
    fn zero_gate_splits_in_half() {
        let model = DualCast::new(tiny(Structure::Sequential, Fusion::Add), SensorGraph::path(4)).unwrap();
        let mut params = model.params.clone();
        *params.get_mut(model.gate.linear.weight) = Tensor::zeros(&[1, 2]);
        let tape = Tape::new();
        let p = params.bind(&tape);
        let x = tape.constant(input(2, 3, 4, 1, 1));
        let parts = model.gate.forward(&p, x).unwrap();
        assert!(parts.mu_i.value().data().iter().all(|&m| m == 0.5));
        assert_eq!(parts.x_i.value().data(), x.value().map(|v| v / 2.0).data());
    }

    #[test]
    fn gate_parts_sum_to_input() {
        let model = DualCast::new(tiny(Structure::Sequential, Fusion::Add), SensorGraph::path(4)).unwrap();
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let x = tape.constant(input(2, 3, 4, 1, 2).map(|v| 10.0 * v));
        let parts = model.gate.forward(&p, x).unwrap();
        let xs = x.value();
        for (i, (a, b)) in parts.x_i.value().data().iter().zip(parts.x_e.value().data()).enumerate() {
            assert!((a + b - xs.data()[i]).abs() <= 4.0 * f64::EPSILON * xs.data()[i].abs());
        }
        for (a, b) in parts.mu_i.value().data().iter().zip(parts.mu_e.value().data()) {
            assert!(*a > 0.0 && *a < 1.0 && (a + b - 1.0).abs() <= f64::EPSILON);
        }
    }

    #[test]
    fn zero_layers_is_lift_plus_position() {
        let cfg = ModelConfig {
            layers: 0,
            ..tiny(Structure::Sequential, Fusion::Add)
        };
        let model = DualCast::new(cfg, SensorGraph::path(4)).unwrap();
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let x = tape.constant(input(1, 3, 4, 1, 3));
        let h = model.intrinsic.encode(&p, x, &model.adjacency).unwrap();
        let lifted = model.intrinsic.lift.forward(&p, x).unwrap();
        let pos = p.get(model.intrinsic.position).broadcast_to(&[1, 3, 4, 4]).unwrap();
        assert_eq!(h.value().data(), lifted.add(pos).unwrap().value().data());
    }

    #[test]
    fn parallel_add_with_zero_temporal() {
        let model = DualCast::new(tiny(Structure::Parallel, Fusion::Add), SensorGraph::path(4)).unwrap();
        let layer = &model.intrinsic.layers[0];
        let mut params = model.params.clone();
        let v = layer.temporal.proj.value;
        *params.get_mut(v.weight) = Tensor::zeros(&[4, 4]);
        let tape = Tape::new();
        let p = params.bind(&tape);
        let h = tape.constant(input(2, 3, 4, 4, 4));
        let out = layer.forward(&p, h, &model.adjacency).unwrap();
        let want = layer.spatial.forward(&p, h, &model.adjacency).unwrap().add(h).unwrap();
        assert!(out.value().max_abs_diff(&want.value()) < 1e-12);
    }

    #[test]
    fn stlayer_gradients_all_variants() {
        for (structure, fusion) in [
            (Structure::Sequential, Fusion::Add),
            (Structure::Parallel, Fusion::Add),
            (Structure::Parallel, Fusion::Concat),
            (Structure::Parallel, Fusion::Gate),
        ] {
            let model = DualCast::new(tiny(structure, fusion), SensorGraph::path(4)).unwrap();
            let layer = model.intrinsic.layers[0].clone();
            let adj = model.adjacency.clone();
            let store = model.params.clone();
            let h = input(2, 3, 4, 4, 6);
            let report = grad_check(
                |tape, vars| {
                    let p = store.bind_frozen(tape);
                    let out = layer.forward(&p, vars[0], &adj).map_err(to_tensor_err)?;
                    out.square()?.mean_all()
                },
                &[h],
                1e-5,
                1e-4,
            );
            assert!(report.passed, "{structure:?}/{fusion:?}: {report:?}");
        }
    }

    fn to_tensor_err(e: Error) -> crate::ndtensor::TensorError {
        match e {
            Error::Tensor(t) => t,
            other => crate::ndtensor::TensorError::InvalidArgument(other.to_string()),
        }
    }

    #[test]
    fn prototype_fusion_examples() {
        let tape = Tape::new();
        let zi = tape.constant(input(2, 2, 3, 2, 7));
        let ze = tape.constant(input(2, 2, 3, 2, 8));
        let zero = tape.constant(Tensor::zeros(&[PATTERN_COUNT, 2, 3, 2]));
        let w = one_hot_membership(&[4, 4]).unwrap();
        let fused = fuse_prototypes(zi, ze, zero, &w).unwrap();
        let plain = Var::concat(&[zi, ze], 3).unwrap();
        assert_eq!(fused.value().data(), plain.value().data());

        let psi_t = crate::nn::uniform(&[PATTERN_COUNT, 2, 3, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let psi = tape.constant(psi_t.clone());
        let w = one_hot_membership(&[4, 16]).unwrap();
        let fused = fuse_prototypes(zi, ze, psi, &w).unwrap().value();
        let block = 12;
        for j in 0..2 {
            let p = [4, 16][j];
            for e in 0..block {
                let (t, n, d) = (e / 6, (e / 2) % 3, e % 2);
                let got = fused.get(&[j, t, n, d]);
                let want = zi.value().get(&[j, t, n, d]) + psi_t.get(&[p, t, n, d]);
                assert!((got - want).abs() < 1e-15);
                assert_eq!(fused.get(&[j, t, n, d + 2]), ze.value().get(&[j, t, n, d]));
            }
        }
        let mut bad = one_hot_membership(&[4, 16]).unwrap();
        bad.set(&[0, 5], 1.0);
        assert!(fuse_prototypes(zi, ze, psi, &bad).is_err());
    }

    #[test]
    fn output_shape_and_zero_head() {
        let cfg = ModelConfig {
            input_steps: 4,
            output_steps: 4,
            ..tiny(Structure::Sequential, Fusion::Add)
        };
        let model = DualCast::new(cfg, SensorGraph::path(3)).unwrap();
        let mut params = model.params.clone();
        *params.get_mut(model.output.weight) = Tensor::zeros(&[8, 1]);
        let tape = Tape::new();
        let p = params.bind(&tape);
        let out = model.forward(&p, tape.constant(input(2, 4, 3, 1, 1)), &[0, 15]).unwrap();
        assert_eq!(out.x_hat.shape(), vec![2, 4, 3, 1]);
        assert!(out.x_hat.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(out.g_i.shape(), vec![2, 4]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny(Structure::Parallel, Fusion::Gate);
        let run = || {
            let model = DualCast::new(cfg.clone(), SensorGraph::grid(4)).unwrap();
            let tape = Tape::new();
            let p = model.params.bind(&tape);
            let out = model.forward(&p, tape.constant(input(2, 3, 4, 1, 11)), &[3, 7]).unwrap();
            out.x_hat.value().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn branches_have_disjoint_parameters() {
        let model = DualCast::new(tiny(Structure::Parallel, Fusion::Concat), SensorGraph::path(4)).unwrap();
        let names: Vec<&str> = model.params.ids().map(|id| model.params.name(id)).collect();
        let i: Vec<&str> = names.iter().filter_map(|n| n.strip_prefix("ibranch.")).collect();
        let e: Vec<&str> = names.iter().filter_map(|n| n.strip_prefix("ebranch.")).collect();
        assert_eq!(i, e);
        let ids = |prefix: &str| -> Vec<usize> {
            model
                .params
                .ids()
                .filter(|&id| model.params.name(id).starts_with(prefix))
                .map(|id| id.index())
                .collect()
        };
        let (a, b) = (ids("ibranch."), ids("ebranch."));
        assert!(a.iter().all(|x| !b.contains(x)));
        // Doubling intrinsic parameters leaves the environment output unchanged.
        let tape = Tape::new();
        let x = tape.constant(input(1, 3, 4, 1, 2));
        let before = {
            let p = model.params.bind(&tape);
            model.environment.forward(&p, x, &model.adjacency).unwrap().1.value()
        };
        let mut doubled = model.params.clone();
        for &i in &a {
            let id = model.params.ids().nth(i).unwrap();
            *doubled.get_mut(id) = doubled.get(id).map(|v| 2.0 * v);
        }
        let p = doubled.bind(&tape);
        let after = model.environment.forward(&p, x, &model.adjacency).unwrap().1.value();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn node_permutation_equivariance() {
        let graph = SensorGraph::new(5, [(0, 1), (1, 2), (2, 3), (1, 4)]).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let cfg = ModelConfig {
            layers: 2,
            levels: 2,
            ..tiny(Structure::Sequential, Fusion::Add)
        };
        let model = DualCast::new(cfg.clone(), graph.clone()).unwrap();
        let mut permuted = DualCast::new(cfg, graph.relabeled(&perm).unwrap()).unwrap();
        let mut values: Vec<Tensor> = model.params.iter().map(|(_, v)| v.clone()).collect();
        let psi = model.prototypes.psi.index();
        let old = values[psi].clone();
        let mut new = old.clone();
        for p in 0..PATTERN_COUNT {
            for t in 0..3 {
                for n in 0..5 {
                    for d in 0..4 {
                        new.set(&[p, t, perm[n], d], old.get(&[p, t, n, d]));
                    }
                }
            }
        }
        values[psi] = new;
        permuted.params.load_values(values).unwrap();

        let x = input(2, 3, 5, 1, 21);
        let mut xp = x.clone();
        for b in 0..2 {
            for t in 0..3 {
                for n in 0..5 {
                    xp.set(&[b, t, perm[n], 0], x.get(&[b, t, n, 0]));
                }
            }
        }
        let tape = Tape::new();
        let a = model.forward(&model.params.bind(&tape), tape.constant(x), &[1, 9]).unwrap();
        let b = permuted
            .forward(&permuted.params.bind(&tape), tape.constant(xp), &[1, 9])
            .unwrap();
        for bi in 0..2 {
            for t in 0..3 {
                for n in 0..5 {
                    let d = a.x_hat.value().get(&[bi, t, n, 0]) - b.x_hat.value().get(&[bi, t, perm[n], 0]);
                    assert!(d.abs() < 1e-9);
                }
            }
        }
        assert!(a.g_i.value().max_abs_diff(&b.g_i.value()) < 1e-9);
        assert!(a.g_e.value().max_abs_diff(&b.g_e.value()) < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = DualCast::new(tiny(Structure::Parallel, Fusion::Gate), SensorGraph::grid(4)).unwrap();
        let meta = BTreeMap::from([("mean".to_string(), "1.5".to_string())]);
        model.save(dir.path(), &meta).unwrap();
        let (back, m) = DualCast::load(dir.path()).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.params, model.params);
        assert_eq!(back.config, model.config);
        assert_eq!(back.graph.edges(), model.graph.edges());

        let payload = dir.path().join(PARAMS_FILE);
        let bytes = fs::read(&payload).unwrap();
        fs::write(&payload, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(DualCast::load(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = ModelConfig {
            width: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            output_steps: 6,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"structure":"diagonal"}"#).is_err());
        assert!(serde_json::from_str::<ModelConfig>(r#"{"fusion":"gate"}"#).is_ok());
    }
}
