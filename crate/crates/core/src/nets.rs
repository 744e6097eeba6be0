//! Tanh multilayer perceptrons: configuration, flat parameter storage,
//! plain evaluation, graph evaluation, spatial-jet evaluation and checkpoint files.
//!
//! # Checkpoint file format
//!
//! ```text
//! bytes 0..8     magic "GEACKPT1"
//! bytes 8..12    header length H, u32 little-endian
//! next H bytes   UTF-8 header, one `key=value` record per line:
//!                  epoch=<u64>
//!                  seed=<u64>
//!                  nets=<count>
//!                  net=<name> input_dim=<n> output_dim=<n> hidden_layers=<n> hidden_width=<n> params=<n>
//!                  (one `net=` line per network, in payload order)
//! payload        for each network, `params` f64 values, little-endian
//! ```
//!
//! Within a network the flat parameters are laid out layer by layer as the
//! weight matrix (`fan_in x fan_out`, row-major) followed by the bias
//! (`fan_out` values).

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{jet_propagate, Graph, Primitive, SpatialJet, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, Matrix};

/// Shape of a tanh MLP. Hidden layers use tanh; the output layer is affine.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub output_dim: usize,
    /// Zero gives a single affine map.
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl MlpConfig {
    pub fn new(input_dim: usize, output_dim: usize, hidden_layers: usize, hidden_width: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_layers,
            hidden_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("network input and output dims must be >= 1".into()));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl LayerSlot {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

/// All weights and biases of one network in a single flat array.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    config: MlpConfig,
    flat: Vec<f64>,
    slots: Vec<LayerSlot>,
}

fn slots_for(config: &MlpConfig) -> Vec<LayerSlot> {
    let mut offset = 0;
    config
        .layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let slot = LayerSlot {
                fan_in,
                fan_out,
                offset,
            };
            offset += fan_in * fan_out + fan_out;
            slot
        })
        .collect()
}

impl MlpParams {
    pub fn from_flat(config: MlpConfig, flat: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if flat.len() != config.param_count() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                config.param_count(),
                flat.len()
            )));
        }
        Ok(Self {
            slots: slots_for(&config),
            config,
            flat,
        })
    }

    /// Build from per-layer `(weight, bias)` pairs; inverse of [`MlpParams::layers`].
    pub fn from_layers(config: MlpConfig, layers: &[(Matrix, Matrix)]) -> Result<Self> {
        let mut flat = Vec::with_capacity(config.param_count());
        for (w, b) in layers {
            flat.extend_from_slice(w.data());
            flat.extend_from_slice(b.data());
        }
        Self::from_flat(config, flat)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.slots.len()
    }

    pub fn weight(&self, layer: usize) -> Matrix {
        let s = self.slots[layer];
        Matrix::from_vec(s.fan_in, s.fan_out, self.flat[s.weight_range()].to_vec())
    }

    pub fn bias(&self, layer: usize) -> Matrix {
        let s = self.slots[layer];
        Matrix::from_vec(1, s.fan_out, self.flat[s.bias_range()].to_vec())
    }

    pub fn weight_slice_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.slots[layer].weight_range();
        &mut self.flat[r]
    }

    pub fn bias_slice_mut(&mut self, layer: usize) -> &mut [f64] {
        let r = self.slots[layer].bias_range();
        &mut self.flat[r]
    }

    /// Per-layer `(weight, bias)` matrices.
    pub fn layers(&self) -> Vec<(Matrix, Matrix)> {
        (0..self.slots.len())
            .map(|l| (self.weight(l), self.bias(l)))
            .collect()
    }

    /// Batched evaluation: one input per row.
    pub fn forward_batch(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.config.input_dim {
            return Err(Error::dim(format!(
                "network expects {} inputs, got {}",
                self.config.input_dim,
                input.cols()
            )));
        }
        let last = self.slots.len() - 1;
        let mut h = input.clone();
        for (l, s) in self.slots.iter().enumerate() {
            let w = Matrix::from_vec(s.fan_in, s.fan_out, self.flat[s.weight_range()].to_vec());
            let bias = &self.flat[s.bias_range()];
            let mut out = Matrix::zeros(h.rows(), s.fan_out);
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(bias);
            }
            gemm_nn(&h, &w, &mut out, 1.0);
            if l < last {
                for v in out.data_mut() {
                    *v = crate::diff::fastmath::tanh(*v);
                }
            }
            h = out;
        }
        Ok(h)
    }
}

/// Xavier-uniform weights, zero biases.
pub fn init_mlp(config: MlpConfig, seed: u64) -> Result<MlpParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = MlpParams::from_flat(config, vec![0.0; config.param_count()])?;
    for l in 0..params.num_layers() {
        let s = params.slots[l];
        let bound = (6.0 / (s.fan_in + s.fan_out) as f64).sqrt();
        for w in params.weight_slice_mut(l) {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(params)
}

/// Evaluate the network on a single input vector.
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != params.config.input_dim {
        return Err(Error::dim(format!(
            "network expects {} inputs, got {}",
            params.config.input_dim,
            input.len()
        )));
    }
    Ok(params.forward_batch(&Matrix::row_vector(input))?.into_vec())
}

/// An m-dimensional latent vector (noise draw or encoder output).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(Vec<f64>);

impl LatentCode {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn expect_dim(&self, m: usize) -> Result<()> {
        if self.0.len() != m {
            return Err(Error::dim(format!("latent code has dim {}, expected {m}", self.0.len())));
        }
        Ok(())
    }
}

/// A network whose parameters live as leaves in a [`Graph`].
#[derive(Clone, Debug)]
pub struct GraphMlp {
    config: MlpConfig,
    layers: Vec<(Var, Var)>,
}

impl GraphMlp {
    /// Register the parameters as leaves; `trainable` decides whether
    /// gradients flow into them.
    pub fn bind(g: &mut Graph, params: &MlpParams, trainable: bool) -> Self {
        let layers = params
            .layers()
            .into_iter()
            .map(|(w, b)| {
                if trainable {
                    (g.param(w), g.param(b))
                } else {
                    (g.constant(w), g.constant(b))
                }
            })
            .collect();
        Self {
            config: params.config,
            layers,
        }
    }

    /// Reassemble from leaves already in the graph, ordered as [`GraphMlp::vars`].
    pub fn from_vars(g: &Graph, config: MlpConfig, vars: &[Var]) -> Result<Self> {
        let dims = config.layer_dims();
        if vars.len() != 2 * dims.len() {
            return Err(Error::dim(format!("expected {} leaves, got {}", 2 * dims.len(), vars.len())));
        }
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            if g.shape(vars[2 * l]) != (fan_in, fan_out) || g.shape(vars[2 * l + 1]) != (1, fan_out) {
                return Err(Error::dim(format!("layer {l} leaves have the wrong shape")));
            }
        }
        Ok(Self {
            config,
            layers: vars.chunks(2).map(|c| (c[0], c[1])).collect(),
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    /// Parameter leaves in flat-layout order.
    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x).1 != self.config.input_dim {
            return Err(Error::dim(format!(
                "network expects {} inputs, got {}",
                self.config.input_dim,
                g.shape(x).1
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = g.affine(h, w, b);
            if l < last {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }

    pub fn forward_jet(&self, g: &mut Graph, x: SpatialJet) -> Result<SpatialJet> {
        if g.shape(x.stacked()).1 != self.config.input_dim {
            return Err(Error::dim("jet input width does not match the network"));
        }
        let last = self.layers.len() - 1;
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = h.affine(g, w, b);
            if l < last {
                h = jet_propagate(g, Primitive::Tanh, &[h])?;
            }
        }
        Ok(h)
    }

    /// Flat gradient aligned with [`MlpParams::flat`].
    pub fn gradient(&self, g: &Graph, objective: Var) -> Result<Vec<f64>> {
        let grads = g.grad(objective, &self.vars())?;
        Ok(grads.into_iter().flat_map(Matrix::into_vec).collect())
    }
}

/// Flat gradients of several networks from a single backward pass.
pub fn joint_gradient(g: &Graph, objective: Var, nets: &[GraphMlp]) -> Result<Vec<Vec<f64>>> {
    let vars: Vec<Var> = nets.iter().flat_map(GraphMlp::vars).collect();
    let mut grads = g.grad(objective, &vars)?.into_iter();
    Ok(nets
        .iter()
        .map(|net| {
            grads
                .by_ref()
                .take(net.vars().len())
                .flat_map(Matrix::into_vec)
                .collect()
        })
        .collect())
}

/// Generator inputs `[x_i, z_j]` for every snapshot `j` (rows of `latent`)
/// and coordinate `i`, snapshot-major.
fn coordinate_latent_input(g: &mut Graph, coords: &[f64], latent: Var) -> Var {
    let n = g.shape(latent).0;
    let xs: Vec<f64> = (0..n).flat_map(|_| coords.iter().copied()).collect();
    let x = g.constant(Matrix::column(&xs));
    let z = g.repeat_rows(latent, coords.len());
    g.concat_cols(&[x, z])
}

/// Network values at `coords` for each latent row; shape `(n·p) x out`.
pub fn mlp_values_at(g: &mut Graph, net: &GraphMlp, coords: &[f64], latent: Var) -> Result<Var> {
    if 1 + g.shape(latent).1 != net.config.input_dim {
        return Err(Error::dim("latent width + 1 must equal the network input dim"));
    }
    let input = coordinate_latent_input(g, coords, latent);
    net.forward(g, input)
}

/// Jet of a scalar-output generator with respect to `x` at fixed latent code.
///
/// `latent` is `n x m`; the returned jet covers `n·p` points ordered
/// snapshot-major, and its components remain differentiable with respect to
/// the network parameters and the latent rows.
pub fn mlp_spatial_jet(g: &mut Graph, net: &GraphMlp, coords: &[f64], latent: Var) -> Result<SpatialJet> {
    if net.config.output_dim != 1 {
        return Err(Error::dim("spatial jets need a scalar-output network"));
    }
    if 1 + g.shape(latent).1 != net.config.input_dim {
        return Err(Error::dim("latent width + 1 must equal the network input dim"));
    }
    let n = g.shape(latent).0;
    let xs: Vec<f64> = (0..n).flat_map(|_| coords.iter().copied()).collect();
    let x = SpatialJet::coordinate(g, &xs);
    let z = g.repeat_rows(latent, coords.len());
    let z = SpatialJet::independent(g, z);
    let input = SpatialJet::concat_cols(g, &[x, z])?;
    net.forward_jet(g, input)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub seed: u64,
    pub nets: Vec<(String, MlpParams)>,
}

const MAGIC: &[u8; 8] = b"GEACKPT1";

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let mut header = format!(
        "epoch={}\nseed={}\nnets={}\n",
        checkpoint.epoch,
        checkpoint.seed,
        checkpoint.nets.len()
    );
    for (name, p) in &checkpoint.nets {
        if name.contains(char::is_whitespace) || name.is_empty() {
            return Err(Error::Config(format!("invalid network name {name:?}")));
        }
        let c = p.config();
        header.push_str(&format!(
            "net={name} input_dim={} output_dim={} hidden_layers={} hidden_width={} params={}\n",
            c.input_dim,
            c.output_dim,
            c.hidden_layers,
            c.hidden_width,
            p.len()
        ));
    }
    let mut bytes = Vec::with_capacity(
        12 + header.len() + 8 * checkpoint.nets.iter().map(|(_, p)| p.len()).sum::<usize>(),
    );
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for (_, p) in &checkpoint.nets {
        for v in p.flat() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| bad("truncated header"))?;
    let header = std::str::from_utf8(header).map_err(|_| bad("header is not UTF-8"))?;

    let mut epoch = None;
    let mut seed = None;
    let mut specs = Vec::new();
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("net=") {
            let mut fields = rest.split(' ');
            let name = fields.next().ok_or_else(|| bad("empty net record"))?.to_string();
            let mut get = |key: &str| -> Result<usize> {
                let field = fields.next().ok_or_else(|| bad("short net record"))?;
                let value = field
                    .strip_prefix(key)
                    .and_then(|v| v.strip_prefix('='))
                    .ok_or_else(|| bad(&format!("expected {key}")))?;
                value.parse().map_err(|_| bad(&format!("bad {key}")))
            };
            let config = MlpConfig {
                input_dim: get("input_dim")?,
                output_dim: get("output_dim")?,
                hidden_layers: get("hidden_layers")?,
                hidden_width: get("hidden_width")?,
            };
            let count = get("params")?;
            if count != config.param_count() {
                return Err(bad("parameter count does not match the network shape"));
            }
            specs.push((name, config));
        } else if let Some(v) = line.strip_prefix("epoch=") {
            epoch = Some(v.parse().map_err(|_| bad("bad epoch"))?);
        } else if let Some(v) = line.strip_prefix("seed=") {
            seed = Some(v.parse().map_err(|_| bad("bad seed"))?);
        }
    }

    let mut offset = 12 + header_len;
    let mut nets = Vec::with_capacity(specs.len());
    for (name, config) in specs {
        let n = config.param_count();
        let chunk = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad("truncated payload"))?;
        let flat = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 8 * n;
        nets.push((name, MlpParams::from_flat(config, flat)?));
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(Checkpoint {
        epoch: epoch.ok_or_else(|| bad("missing epoch"))?,
        seed: seed.ok_or_else(|| bad("missing seed"))?,
        nets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_gradient_matches_separate_passes() {
        let c = MlpConfig::new(2, 1, 1, 5);
        let (pa, pb) = (init_mlp(c, 11).unwrap(), init_mlp(c, 12).unwrap());
        let mut g = Graph::new();
        let a = GraphMlp::bind(&mut g, &pa, true);
        let b = GraphMlp::bind(&mut g, &pb, true);
        let x = g.constant(Matrix::from_fn(3, 2, |i, j| 0.4 * i as f64 - 0.3 * j as f64));
        let ya = a.forward(&mut g, x).unwrap();
        let yb = b.forward(&mut g, x).unwrap();
        let prod = g.mul(ya, yb);
        let obj = g.sum(prod);
        let joint = joint_gradient(&g, obj, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(joint[0], a.gradient(&g, obj).unwrap());
        assert_eq!(joint[1], b.gradient(&g, obj).unwrap());
    }

    #[test]
    fn flat_length_for_small_config() {
        let c = MlpConfig::new(5, 1, 1, 4);
        assert_eq!(c.param_count(), 29);
        assert_eq!(init_mlp(c, 0).unwrap().len(), 29);
    }

    #[test]
    fn weights_within_xavier_bound_and_biases_zero() {
        let c = MlpConfig::new(5, 3, 2, 7);
        let p = init_mlp(c, 11).unwrap();
        for (l, (fan_in, fan_out)) in c.layer_dims().into_iter().enumerate() {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            assert!(p.weight(l).data().iter().all(|w| w.abs() <= bound));
            assert!(p.bias(l).data().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let c = MlpConfig::new(3, 2, 2, 8);
        assert_eq!(init_mlp(c, 5).unwrap(), init_mlp(c, 5).unwrap());
        assert_ne!(init_mlp(c, 5).unwrap(), init_mlp(c, 6).unwrap());
    }

    #[test]
    fn zero_weights_return_output_bias() {
        let c = MlpConfig::new(3, 2, 2, 4);
        let mut p = MlpParams::from_flat(c, vec![0.0; c.param_count()]).unwrap();
        p.bias_slice_mut(2).copy_from_slice(&[0.7, -1.5]);
        assert_eq!(mlp_forward(&p, &[0.3, -2.0, 9.0]).unwrap(), vec![0.7, -1.5]);
    }

    #[test]
    fn single_affine_layer() {
        let c = MlpConfig::new(2, 1, 0, 0);
        let p = MlpParams::from_flat(c, vec![2.0, -3.0, 0.5]).unwrap();
        assert_eq!(mlp_forward(&p, &[1.0, 4.0]).unwrap(), vec![2.0 - 12.0 + 0.5]);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let p = init_mlp(MlpConfig::new(3, 1, 1, 4), 0).unwrap();
        assert!(matches!(mlp_forward(&p, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn flatten_round_trip() {
        let c = MlpConfig::new(4, 2, 3, 5);
        let p = init_mlp(c, 3).unwrap();
        let q = MlpParams::from_layers(c, &p.layers()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn graph_forward_matches_plain_forward() {
        let c = MlpConfig::new(3, 2, 2, 6);
        let p = init_mlp(c, 9).unwrap();
        let input = Matrix::from_fn(4, 3, |i, j| (i as f64 - 1.5) * 0.4 + j as f64 * 0.1);
        let plain = p.forward_batch(&input).unwrap();
        let mut g = Graph::new();
        let net = GraphMlp::bind(&mut g, &p, true);
        let x = g.constant(input);
        let out = net.forward(&mut g, x).unwrap();
        assert_eq!(g.value(out), &plain);
    }

    #[test]
    fn affine_net_jet() {
        // u = w·x + c with a 1-dim latent input that has zero weight
        let c = MlpConfig::new(2, 1, 0, 0);
        let p = MlpParams::from_flat(c, vec![1.5, 0.0, -0.25]).unwrap();
        let mut g = Graph::new();
        let net = GraphMlp::bind(&mut g, &p, true);
        let z = g.constant(Matrix::from_vec(1, 1, vec![0.9]));
        let jet = mlp_spatial_jet(&mut g, &net, &[0.4], z).unwrap();
        let (v, d1, d2) = jet.components(&g);
        assert_eq!((v.item(), d1.item(), d2.item()), (1.5 * 0.4 - 0.25, 1.5, 0.0));
    }

    #[test]
    fn zero_weight_net_jet_is_constant_bias() {
        let c = MlpConfig::new(3, 1, 2, 4);
        let mut p = MlpParams::from_flat(c, vec![0.0; c.param_count()]).unwrap();
        p.bias_slice_mut(2)[0] = 0.8;
        let mut g = Graph::new();
        let net = GraphMlp::bind(&mut g, &p, false);
        let z = g.constant(Matrix::from_vec(2, 2, vec![0.1, 0.2, -0.3, 0.4]));
        let jet = mlp_spatial_jet(&mut g, &net, &[-1.0, 0.0, 1.0], z).unwrap();
        let (v, d1, d2) = jet.components(&g);
        assert!(v.data().iter().all(|&x| x == 0.8));
        assert!(d1.data().iter().chain(d2.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn jet_requires_scalar_output() {
        let p = init_mlp(MlpConfig::new(2, 2, 1, 3), 0).unwrap();
        let mut g = Graph::new();
        let net = GraphMlp::bind(&mut g, &p, false);
        let z = g.constant(Matrix::zeros(1, 1));
        assert!(mlp_spatial_jet(&mut g, &net, &[0.0], z).is_err());
    }

    #[test]
    fn odd_symmetry_of_zero_bias_single_hidden_layer() {
        let c = MlpConfig::new(3, 1, 1, 8);
        let p = init_mlp(c, 21).unwrap();
        let a = mlp_forward(&p, &[0.3, -0.7, 0.2]).unwrap()[0];
        let b = mlp_forward(&p, &[-0.3, 0.7, -0.2]).unwrap()[0];
        assert_eq!(a, -b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("gea-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.bin");
        let ck = Checkpoint {
            epoch: 300,
            seed: 42,
            nets: vec![
                ("k".into(), init_mlp(MlpConfig::new(5, 1, 2, 3), 1).unwrap()),
                ("enc".into(), init_mlp(MlpConfig::new(36, 4, 1, 6), 2).unwrap()),
            ],
        };
        write_checkpoint(&path, &ck).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ck);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(read_checkpoint(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
