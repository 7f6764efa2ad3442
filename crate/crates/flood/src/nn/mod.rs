//! From-scratch tensor/autodiff kernel and the surrogate networks: a residual
//! encoder-decoder CNN trained with L1 loss, and a conditional GAN variant
//! with a patch discriminator.

pub mod layers;
pub mod rollout;
pub mod tensor;
pub mod train;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::field::{read_field_file, write_field_file, GridSpec, NamedField};
use layers::{BatchNorm2d, Conv2d, ConvTranspose2d, Layer, PRelu, ResidualBlock};
pub use tensor::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    ConvTranspose,
    Prelu,
    BatchNorm,
    ResidualBlock,
}

/// One layer description. For `prelu`, `batch_norm` and `residual_block`
/// only `in_channels` is meaningful (`out_channels` must equal it; kernel,
/// stride and padding are fixed by the kind).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerSpec {
    pub fn conv(cin: usize, cout: usize, k: usize, s: usize, p: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: s,
            padding: p,
        }
    }

    pub fn conv_transpose(cin: usize, cout: usize, k: usize, s: usize, p: usize) -> Self {
        Self {
            kind: LayerKind::ConvTranspose,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: s,
            padding: p,
        }
    }

    pub fn pointwise(kind: LayerKind, channels: usize) -> Self {
        Self {
            kind,
            in_channels: channels,
            out_channels: channels,
            kernel: if kind == LayerKind::ResidualBlock { 3 } else { 1 },
            stride: 1,
            padding: if kind == LayerKind::ResidualBlock { 1 } else { 0 },
        }
    }

    /// Number of trainable parameters this spec creates.
    pub fn param_count(&self) -> usize {
        let c = self.in_channels;
        match self.kind {
            LayerKind::Conv | LayerKind::ConvTranspose => {
                self.in_channels * self.out_channels * self.kernel * self.kernel
                    + self.out_channels
            }
            LayerKind::Prelu => c,
            LayerKind::BatchNorm => 2 * c,
            // Two 3x3 convs with bias, two batch norms, one PReLU.
            LayerKind::ResidualBlock => 2 * (c * c * 9 + c) + 2 * (2 * c) + c,
        }
    }
}

/// Parse one layer per line:
/// `conv <in> <out> <k> <s> <p>`, `conv_transpose <in> <out> <k> <s> <p>`,
/// `prelu <ch>`, `batch_norm <ch>`, `residual_block <ch>`. Blank lines and
/// `#` comments are ignored.
pub fn parse_layer_specs(text: &str) -> Result<Vec<LayerSpec>, NnError> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let bad = |m: &str| NnError::BadConfig(format!("line {}: {m}", ln + 1));
        let num = |t: &str| -> Result<usize, NnError> {
            t.parse().map_err(|_| bad(&format!("bad number `{t}`")))
        };
        let spec = match toks[0] {
            "conv" | "conv_transpose" if toks.len() == 6 => {
                let (cin, cout) = (num(toks[1])?, num(toks[2])?);
                let (k, s, p) = (num(toks[3])?, num(toks[4])?, num(toks[5])?);
                if cin == 0 || cout == 0 || k == 0 || s == 0 {
                    return Err(bad("channels, kernel and stride must be positive"));
                }
                if toks[0] == "conv" {
                    LayerSpec::conv(cin, cout, k, s, p)
                } else {
                    LayerSpec::conv_transpose(cin, cout, k, s, p)
                }
            }
            "prelu" | "batch_norm" | "residual_block" if toks.len() == 2 => {
                let ch = num(toks[1])?;
                if ch == 0 {
                    return Err(bad("channels must be positive"));
                }
                let kind = match toks[0] {
                    "prelu" => LayerKind::Prelu,
                    "batch_norm" => LayerKind::BatchNorm,
                    _ => LayerKind::ResidualBlock,
                };
                LayerSpec::pointwise(kind, ch)
            }
            _ => return Err(bad(&format!("unrecognized layer line `{line}`"))),
        };
        out.push(spec);
    }
    if out.is_empty() {
        return Err(NnError::BadConfig("no layers in config".into()));
    }
    Ok(out)
}

pub fn layer_specs_to_text(specs: &[LayerSpec]) -> String {
    let mut s = String::new();
    for spec in specs {
        match spec.kind {
            LayerKind::Conv => s.push_str(&format!(
                "conv {} {} {} {} {}\n",
                spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding
            )),
            LayerKind::ConvTranspose => s.push_str(&format!(
                "conv_transpose {} {} {} {} {}\n",
                spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding
            )),
            LayerKind::Prelu => s.push_str(&format!("prelu {}\n", spec.in_channels)),
            LayerKind::BatchNorm => s.push_str(&format!("batch_norm {}\n", spec.in_channels)),
            LayerKind::ResidualBlock => {
                s.push_str(&format!("residual_block {}\n", spec.in_channels))
            }
        }
    }
    s
}

/// Desk-scale residual encoder-decoder generator: 5 -> 12 -> 24 (stride-4
/// encode) -> residual block -> 12 (stride-4 decode) -> 3, sized so one
/// inference is orders of magnitude cheaper than the solver horizon it
/// replaces. The full-scale 17-layer variant remains expressible through
/// layer config files.
pub fn default_generator_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(5, 12, 3, 1, 1),
        LayerSpec::pointwise(LayerKind::BatchNorm, 12),
        LayerSpec::pointwise(LayerKind::Prelu, 12),
        LayerSpec::conv(12, 24, 4, 4, 0),
        LayerSpec::pointwise(LayerKind::BatchNorm, 24),
        LayerSpec::pointwise(LayerKind::Prelu, 24),
        LayerSpec::pointwise(LayerKind::ResidualBlock, 24),
        LayerSpec::conv_transpose(24, 12, 4, 4, 0),
        LayerSpec::pointwise(LayerKind::BatchNorm, 12),
        LayerSpec::pointwise(LayerKind::Prelu, 12),
        LayerSpec::conv(12, 3, 3, 1, 1),
    ]
}

/// Patch discriminator over the channel-concatenated (candidate, condition)
/// pair: 8 channels in, one realness logit per spatial patch out.
pub fn default_discriminator_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(8, 16, 4, 2, 1),
        LayerSpec::pointwise(LayerKind::Prelu, 16),
        LayerSpec::conv(16, 32, 4, 2, 1),
        LayerSpec::pointwise(LayerKind::BatchNorm, 32),
        LayerSpec::pointwise(LayerKind::Prelu, 32),
        LayerSpec::conv(32, 1, 3, 1, 1),
    ]
}

/// A sequential network built from layer specs. Parameters are initialized
/// deterministically from the seed.
pub struct Network {
    pub specs: Vec<LayerSpec>,
    layers: Vec<Box<dyn Layer>>,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl Network {
    pub fn build(specs: &[LayerSpec], seed: u64) -> Result<Self, NnError> {
        if specs.is_empty() {
            return Err(NnError::BadConfig("empty layer list".into()));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut layers: Vec<Box<dyn Layer>> = Vec::with_capacity(specs.len());
        let mut channels = specs[0].in_channels;
        for (i, s) in specs.iter().enumerate() {
            if s.in_channels != channels {
                return Err(NnError::BadConfig(format!(
                    "layer {i} expects {} channels but receives {channels}",
                    s.in_channels
                )));
            }
            let layer: Box<dyn Layer> = match s.kind {
                LayerKind::Conv => Box::new(Conv2d::new(
                    s.in_channels,
                    s.out_channels,
                    s.kernel,
                    s.stride,
                    s.padding,
                    &mut rng,
                )),
                LayerKind::ConvTranspose => Box::new(ConvTranspose2d::new(
                    s.in_channels,
                    s.out_channels,
                    s.kernel,
                    s.stride,
                    s.padding,
                    &mut rng,
                )),
                LayerKind::Prelu => Box::new(PRelu::new(s.in_channels)),
                LayerKind::BatchNorm => Box::new(BatchNorm2d::new(s.in_channels)),
                LayerKind::ResidualBlock => Box::new(ResidualBlock::new(s.in_channels, &mut rng)),
            };
            channels = s.out_channels;
            layers.push(layer);
        }
        Ok(Self {
            specs: specs.to_vec(),
            input_channels: specs[0].in_channels,
            output_channels: channels,
            layers,
        })
    }

    /// Verify the layer stack geometrically composes over an (H, W) input
    /// and return the output (C, H, W).
    pub fn check_geometry(&self, h: usize, w: usize) -> Result<(usize, usize, usize), NnError> {
        let mut shape = (self.input_channels, h, w);
        for layer in &self.layers {
            shape = layer.out_shape(shape.0, shape.1, shape.2)?;
        }
        Ok(shape)
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Result<Tensor, NnError> {
        let mut t = self.layers[0].forward(x, training)?;
        for layer in self.layers.iter_mut().skip(1) {
            t = layer.forward(&t, training)?;
        }
        Ok(t)
    }

    /// Backpropagate through the whole stack, accumulating parameter
    /// gradients; returns the gradient with respect to the network input.
    pub fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g);
        }
        g
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.params_mut() {
                out.push((format!("l{i:03}.{name}"), t));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.buffers_mut() {
                out.push((format!("l{i:03}.{name}"), t));
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Actual trainable parameter count (matches the closed-form sum of
    /// `LayerSpec::param_count` by construction, asserted in tests).
    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|(_, t)| t.len()).sum()
    }

    /// Serialize parameters and batch-norm running statistics through the
    /// field-file format (one named field per tensor, with shape metadata).
    pub fn save_params(&mut self, path: &Path) -> Result<(), NnError> {
        let dummy = GridSpec::new(3, 3, 1.0, 1.0).expect("static grid");
        let mut fields = Vec::new();
        for (name, t) in self.params_mut() {
            fields.push(NamedField {
                name,
                values: t.data.iter().map(|&v| v as f32).collect(),
                shape: Some(t.shape.clone()),
            });
        }
        for (name, t) in self.buffers_mut() {
            fields.push(NamedField {
                name: format!("buf.{name}"),
                values: t.data.iter().map(|&v| v as f32).collect(),
                shape: Some(t.shape.clone()),
            });
        }
        write_field_file(path, dummy, &fields)?;
        Ok(())
    }

    pub fn load_params(&mut self, path: &Path) -> Result<(), NnError> {
        let (_, fields) = read_field_file(path)?;
        let find = |name: &str| fields.iter().find(|f| f.name == name);
        for (name, t) in self.params_mut() {
            let f = find(&name)
                .ok_or_else(|| NnError::BadConfig(format!("missing parameter `{name}`")))?;
            if f.values.len() != t.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "parameter `{name}`: file has {} values, net wants {}",
                    f.values.len(),
                    t.len()
                )));
            }
            for (d, &v) in t.data.iter_mut().zip(&f.values) {
                *d = v as f64;
            }
        }
        for (name, t) in self.buffers_mut() {
            let key = format!("buf.{name}");
            let f = find(&key)
                .ok_or_else(|| NnError::BadConfig(format!("missing buffer `{key}`")))?;
            if f.values.len() != t.len() {
                return Err(NnError::ShapeMismatch(format!("buffer `{key}` size mismatch")));
            }
            for (d, &v) in t.data.iter_mut().zip(&f.values) {
                *d = v as f64;
            }
        }
        Ok(())
    }

    /// Direct access for tests and the GAN loop.
    pub fn layers_mut(&mut self) -> &mut [Box<dyn Layer>] {
        &mut self.layers
    }
}
