//! Fully connected encoder/decoder stacks with hand-wired backpropagation,
//! plus the versioned binary model format.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng, Stream};
use crate::tensor::{self, LayerCache, Matrix};

/// Hidden widths shared by the encoder (in order) and the decoder (reversed).
pub const HIDDEN_DIMS: [usize; 3] = [500, 500, 2000];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Dense>,
}

/// Per-layer gradients, laid out like [`Network::params_mut`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl NetworkGrads {
    pub fn zeros_like(net: &Network) -> Self {
        NetworkGrads {
            weights: net.layers.iter().map(|l| Matrix::zeros(l.in_dim(), l.out_dim())).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &NetworkGrads, s: f64) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(Error::invalid("gradient sets come from different networks"));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.add_scaled(b, s)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
        Ok(())
    }

    fn reversed(mut self) -> Self {
        self.weights.reverse();
        self.biases.reverse();
        self
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }
}

/// Activations recorded by [`Network::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<LayerCache>,
}

impl Network {
    /// Glorot-uniform weights and zero biases. `activations[i]` applies to layer `i`'s output.
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::invalid(format!(
                "{} dims need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::invalid(format!("layer dimensions must be positive: {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
                Dense {
                    weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized buffer"),
                    bias: vec![0.0; fan_out],
                    activation,
                }
            })
            .collect();
        Ok(Network { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::dim("layer bias", (1, l.bias.len()), l.weight.shape()));
            }
            if let Some(next) = layers.get(i + 1) {
                if next.in_dim() != l.out_dim() {
                    return Err(Error::dim("layer chain", l.weight.shape(), next.weight.shape()));
                }
            }
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(Dense::out_dim));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// Weight and bias buffers in layer order: `w0, b0, w1, b1, ...`.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = tensor::affine(&h, &layer.weight, &layer.bias)?;
            if layer.activation == Activation::Relu {
                h.as_mut_slice().iter_mut().for_each(|v| *v = tensor::relu(*v));
            }
        }
        Ok(h)
    }

    /// Forward pass that keeps every layer's input and pre-activation for [`Network::backward`].
    pub fn forward_trace(&self, x: &Matrix) -> Result<(Matrix, Trace)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let pre = tensor::affine(&h, &layer.weight, &layer.bias)?;
            let out = match layer.activation {
                Activation::Relu => pre.map(tensor::relu),
                Activation::Identity => pre.clone(),
            };
            caches.push(LayerCache {
                input: h,
                pre_activation: pre,
            });
            h = out;
        }
        Ok((h, Trace { caches }))
    }

    /// Backpropagates `grad_out` (∂loss/∂output). Returns ∂loss/∂input when
    /// `with_input` is set and the parameter gradients when `with_params` is set.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: &Matrix,
        with_params: bool,
        with_input: bool,
    ) -> Result<(Option<Matrix>, Option<NetworkGrads>)> {
        if trace.caches.len() != self.layers.len() {
            return Err(Error::invalid("trace was recorded on a different network"));
        }
        if grad_out.shape() != (trace.caches[0].input.rows(), self.output_dim()) {
            return Err(Error::dim("network backward", grad_out.shape(), (trace.caches[0].input.rows(), self.output_dim())));
        }
        let mut grads = with_params.then(|| NetworkGrads {
            weights: Vec::with_capacity(self.layers.len()),
            biases: Vec::with_capacity(self.layers.len()),
        });
        let mut g = grad_out.clone();
        for (idx, (layer, cache)) in self.layers.iter().zip(&trace.caches).enumerate().rev() {
            if layer.activation == Activation::Relu {
                g = tensor::relu_mask(&g, &cache.pre_activation)?;
            }
            if let Some(grads) = grads.as_mut() {
                let (gw, gb) = tensor::affine_param_grads(&g, &cache.input, &layer.weight)?;
                grads.weights.push(gw);
                grads.biases.push(gb);
            }
            if idx == 0 && !with_input {
                return Ok((None, grads.map(NetworkGrads::reversed)));
            }
            g = g.matmul_t(&layer.weight)?;
        }
        Ok((Some(g), grads.map(NetworkGrads::reversed)))
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::dim("network input", x.shape(), self.layers[0].weight.shape()));
        }
        Ok(())
    }
}

/// Encoder `d-500-500-2000-L` and mirrored decoder `L-2000-500-500-d`.
/// ReLU on internal layers; embedding and reconstruction layers are linear.
pub fn build_network(input_dim: usize, latent_dim: usize, seed: u64) -> Result<(Network, Network)> {
    if input_dim == 0 || latent_dim == 0 {
        return Err(Error::invalid(format!(
            "input_dim ({input_dim}) and latent_dim ({latent_dim}) must be positive"
        )));
    }
    let mut enc_dims = vec![input_dim];
    enc_dims.extend(HIDDEN_DIMS);
    enc_dims.push(latent_dim);
    let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
    let acts = [Activation::Relu, Activation::Relu, Activation::Relu, Activation::Identity];
    let encoder = Network::new(&enc_dims, &acts, &mut rng::stream(seed, Stream::Encoder, 0))?;
    let decoder = Network::new(&dec_dims, &acts, &mut rng::stream(seed, Stream::Decoder, 0))?;
    Ok((encoder, decoder))
}

/// Maps a batch into the latent space.
pub fn encode(encoder: &Network, x: &Matrix) -> Result<Matrix> {
    encoder.forward(x)
}

const MAGIC: &[u8; 8] = b"RDECNET\0";
const FORMAT_VERSION: u32 = 1;

/// Binary layout, little-endian: magic, `u32` version, `u32` network count, then per
/// network `u32` layer count, `u64` dims (layers + 1), `u8` activation per layer
/// (0 identity, 1 relu), and per layer the row-major `f64` weight then the `f64` bias.
pub fn write_networks<W: Write>(mut w: W, nets: &[&Network]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(nets.len() as u32).to_le_bytes())?;
    for net in nets {
        w.write_all(&(net.layers.len() as u32).to_le_bytes())?;
        for d in net.layer_dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for l in &net.layers {
            w.write_all(&[match l.activation {
                Activation::Identity => 0u8,
                Activation::Relu => 1u8,
            }])?;
        }
        for l in &net.layers {
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_networks<R: Read>(mut r: R) -> Result<Vec<Network>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Model(format!("bad magic bytes {magic:02x?}")));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Model(format!("unsupported format version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut nets = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n_layers = read_u32(&mut r)? as usize;
        if n_layers == 0 {
            return Err(Error::Model("network with zero layers".into()));
        }
        let dims = (0..=n_layers)
            .map(|_| {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                Ok(u64::from_le_bytes(b) as usize)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut acts = vec![0u8; n_layers];
        r.read_exact(&mut acts)?;
        let mut layers = Vec::with_capacity(n_layers);
        for (i, &a) in acts.iter().enumerate() {
            let activation = match a {
                0 => Activation::Identity,
                1 => Activation::Relu,
                other => return Err(Error::Model(format!("unknown activation code {other}"))),
            };
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let weight = Matrix::from_vec(fan_in, fan_out, read_f64s(&mut r, fan_in * fan_out)?)?;
            let bias = read_f64s(&mut r, fan_out)?;
            layers.push(Dense {
                weight,
                bias,
                activation,
            });
        }
        nets.push(Network::from_layers(layers)?);
    }
    Ok(nets)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn save_model(path: &Path, encoder: &Network, decoder: &Network) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_networks(std::io::BufWriter::new(file), &[encoder, decoder])
}

pub fn load_model(path: &Path) -> Result<(Network, Network)> {
    let file = std::fs::File::open(path)?;
    let mut nets = read_networks(std::io::BufReader::new(file))?;
    if nets.len() != 2 {
        return Err(Error::Model(format!(
            "{}: expected encoder and decoder, found {} networks",
            path.display(),
            nets.len()
        )));
    }
    let decoder = nets.pop().expect("two networks");
    let encoder = nets.pop().expect("two networks");
    if encoder.output_dim() != decoder.input_dim() || encoder.input_dim() != decoder.output_dim() {
        return Err(Error::Model("encoder and decoder shapes do not mirror".into()));
    }
    Ok((encoder, decoder))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_stack_shapes() {
        let (enc, dec) = build_network(784, 10, 3).unwrap();
        assert_eq!(enc.layer_dims(), vec![784, 500, 500, 2000, 10]);
        assert_eq!(dec.layer_dims(), vec![10, 2000, 500, 500, 784]);
        let acts: Vec<_> = enc.layers().iter().map(|l| l.activation).collect();
        assert_eq!(
            acts,
            [Activation::Relu, Activation::Relu, Activation::Relu, Activation::Identity]
        );
        assert_eq!(dec.layers().last().unwrap().activation, Activation::Identity);

        let (enc2, _) = build_network(784, 2, 3).unwrap();
        assert_eq!(enc2.layer_dims(), vec![784, 500, 500, 2000, 2]);
    }

    #[test]
    fn seeded_build_is_bit_identical() {
        let a = build_network(20, 3, 42).unwrap();
        let b = build_network(20, 3, 42).unwrap();
        assert_eq!(a, b);
        let c = build_network(20, 3, 43).unwrap();
        assert_ne!(a.0, c.0);
        assert!(a.0.layers().iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(build_network(0, 10, 1).is_err());
        assert!(build_network(10, 0, 1).is_err());
    }

    #[test]
    fn encode_shapes_and_row_independence() {
        let (enc, _) = build_network(6, 3, 9).unwrap();
        let x = Matrix::from_vec(4, 6, (0..24).map(|v| v as f64 / 24.0).collect()).unwrap();
        let z = encode(&enc, &x).unwrap();
        assert_eq!(z.shape(), (4, 3));
        let single = encode(&enc, &x.select_rows(&[2])).unwrap();
        for (a, b) in single.row(0).iter().zip(z.row(2)) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        assert_eq!(encode(&enc, &x).unwrap(), z);
        assert!(encode(&enc, &Matrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let (mut enc, _) = build_network(5, 2, 1).unwrap();
        for p in enc.params_mut() {
            p.fill(0.0);
        }
        let z = encode(&enc, &Matrix::filled(3, 5, 0.7)).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn serialization_round_trip_and_bad_magic() {
        let (enc, dec) = build_network(7, 2, 5).unwrap();
        let mut buf = Vec::new();
        write_networks(&mut buf, &[&enc, &dec]).unwrap();
        let nets = read_networks(buf.as_slice()).unwrap();
        assert_eq!(nets, vec![enc, dec]);

        buf[0] = b'X';
        assert!(matches!(read_networks(buf.as_slice()), Err(Error::Model(_))));
        assert!(read_networks(&buf[..10]).is_err());
    }
}
