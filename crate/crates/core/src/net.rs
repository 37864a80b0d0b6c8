//! The detector graph: a Darknet-style RGB-D backbone, a two-scale head
//! merged by upsampling, a 1×1 projection to `S·10` channels and the
//! channel-to-depth split that turns the S×S map into an S×S×S grid.
//!
//! Topology is driven entirely by [`NetConfig`]; [`Network::graph`] walks it
//! once for any [`Exec`] backend, so the eager inference path and the
//! recorded training path share the same code.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{GridSpec, CHANNELS_PER_CELL};
use crate::tensor::{self, ConvParams, Shape4, Tensor4, LEAKY_SLOPE};

/// Input channel order.
pub const INPUT_CHANNELS: [&str; 4] = ["R", "G", "B", "depth"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    Tiny,
    Custom,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Tiny => "tiny",
            Preset::Custom => "custom",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "tiny" => Ok(Preset::Tiny),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::Config(format!("unknown preset {other:?} (full, tiny)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub preset: Preset,
    /// Square input side in pixels.
    pub input_size: usize,
    /// Detection grid cells per axis; `input_size / 16`.
    pub grid_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stem_width: usize,
    /// Output width of each stride-2 stage; five stages reach stride 32.
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    /// Width of the 1×1 convs in the head; the 3×3 convs use twice this.
    pub head_width: usize,
    /// (1×1, 3×3) conv pairs after the scale merge.
    pub head_pairs: usize,
    /// Reserved; must be false.
    #[serde(default)]
    pub batch_norm: bool,
}

impl NetConfig {
    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            input_size: 416,
            grid_size: 26,
            in_channels: 4,
            num_classes: 2,
            stem_width: 32,
            stage_widths: vec![64, 128, 256, 512, 1024],
            stage_blocks: vec![1, 2, 8, 8, 4],
            head_width: 256,
            head_pairs: 3,
            batch_norm: false,
        }
    }

    pub fn tiny() -> Self {
        Self {
            preset: Preset::Tiny,
            input_size: 128,
            grid_size: 8,
            in_channels: 4,
            num_classes: 2,
            stem_width: 8,
            stage_widths: vec![8, 16, 32, 64, 128],
            stage_blocks: vec![1, 1, 1, 1, 1],
            head_width: 32,
            head_pairs: 3,
            batch_norm: false,
        }
    }

    pub fn from_preset(preset: Preset) -> Result<Self> {
        match preset {
            Preset::Full => Ok(Self::full()),
            Preset::Tiny => Ok(Self::tiny()),
            Preset::Custom => Err(Error::Config(
                "the custom preset needs a config file".into(),
            )),
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.grid_size, self.num_classes)
    }

    /// Channels of the final projection: one 10-value cell per depth slab.
    pub fn projection_channels(&self) -> usize {
        self.grid_size * (crate::grid::BOX_CHANNELS + self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.in_channels != 4 {
            return fail(format!(
                "in_channels must be 4 (R,G,B,depth), got {}",
                self.in_channels
            ));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return fail(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            ));
        }
        if self.input_size / 16 != self.grid_size {
            return fail(format!(
                "input_size / 16 must equal grid_size: {} / 16 != {}",
                self.input_size, self.grid_size
            ));
        }
        if self.input_size / 32 * 2 != self.grid_size {
            return fail("input_size / 32 must equal grid_size / 2".into());
        }
        if self.stage_widths.len() != 5 || self.stage_blocks.len() != 5 {
            return fail(format!(
                "need 5 backbone stages to reach stride 32, got {} widths and {} block counts",
                self.stage_widths.len(),
                self.stage_blocks.len()
            ));
        }
        if self.stem_width == 0 || self.head_width == 0 {
            return fail("stem_width and head_width must be positive".into());
        }
        if let Some(w) = self.stage_widths.iter().find(|&&w| w < 2 || w % 2 != 0) {
            return fail(format!("stage widths must be even and >= 2, got {w}"));
        }
        if self.projection_channels() != self.grid_size * CHANNELS_PER_CELL {
            return fail(format!(
                "projection channels {} != grid_size·10 = {}",
                self.projection_channels(),
                self.grid_size * CHANNELS_PER_CELL
            ));
        }
        if self.batch_norm {
            return fail("batch_norm is reserved and not implemented; set it to false".into());
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("NetConfig always serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| Error::io(path, e))
    }

    /// Stable fingerprint of the canonical config text.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub params: ConvParams,
    /// Leaky ReLU after the conv.
    pub activation: bool,
}

struct LayerPlan {
    name: String,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    activation: bool,
    init_gain: f64,
}

fn plan(cfg: &NetConfig) -> Vec<LayerPlan> {
    let leaky_gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
    let mut out = Vec::new();
    let mut push = |name: String, in_ch, out_ch, kernel, stride, activation, init_gain| {
        out.push(LayerPlan {
            name,
            in_ch,
            out_ch,
            kernel,
            stride,
            activation,
            init_gain,
        })
    };
    push("stem".into(), cfg.in_channels, cfg.stem_width, 3, 1, true, leaky_gain);
    let mut width = cfg.stem_width;
    for (s, (&w, &blocks)) in cfg.stage_widths.iter().zip(&cfg.stage_blocks).enumerate() {
        push(format!("stage{s}.down"), width, w, 3, 2, true, leaky_gain);
        for b in 0..blocks {
            push(format!("stage{s}.block{b}.reduce"), w, w / 2, 1, 1, true, leaky_gain);
            // Residual branches start small so stacked blocks stay near unit scale.
            push(
                format!("stage{s}.block{b}.expand"),
                w / 2,
                w,
                3,
                1,
                true,
                leaky_gain / (2.0 * blocks as f64).sqrt(),
            );
        }
        width = w;
    }
    let hw = cfg.head_width;
    push("head.lateral".into(), width, hw, 1, 1, true, leaky_gain);
    let mut in_ch = hw + cfg.stage_widths[3];
    for p in 0..cfg.head_pairs {
        push(format!("head.pair{p}.reduce"), in_ch, hw, 1, 1, true, leaky_gain);
        push(format!("head.pair{p}.expand"), hw, 2 * hw, 3, 1, true, leaky_gain);
        in_ch = 2 * hw;
    }
    push("head.project".into(), in_ch, cfg.projection_channels(), 1, 1, false, 1.0);
    out
}

/// Operations the network graph needs from an execution backend.
pub trait Exec<'a> {
    type T: Clone;
    fn conv(&mut self, x: Self::T, index: usize, layer: &'a ConvLayer) -> Result<Self::T>;
    fn upsample(&mut self, x: Self::T) -> Result<Self::T>;
    fn concat(&mut self, a: Self::T, b: Self::T) -> Result<Self::T>;
    fn add(&mut self, a: Self::T, b: Self::T) -> Result<Self::T>;
    fn split_to_depth(&mut self, x: Self::T, grid: usize) -> Result<Self::T>;
}

/// Immediate evaluation; intermediates are dropped as soon as possible.
pub struct Eager;

impl<'a> Exec<'a> for Eager {
    type T = Tensor4;

    fn conv(&mut self, x: Tensor4, _: usize, layer: &'a ConvLayer) -> Result<Tensor4> {
        let y = tensor::conv2d(&x, &layer.params)?;
        drop(x);
        Ok(if layer.activation { tensor::leaky_relu(&y) } else { y })
    }

    fn upsample(&mut self, x: Tensor4) -> Result<Tensor4> {
        Ok(tensor::upsample_nearest_2x(&x))
    }

    fn concat(&mut self, a: Tensor4, b: Tensor4) -> Result<Tensor4> {
        tensor::concat_channels(&a, &b)
    }

    fn add(&mut self, a: Tensor4, b: Tensor4) -> Result<Tensor4> {
        tensor::add(&a, &b)
    }

    fn split_to_depth(&mut self, x: Tensor4, grid: usize) -> Result<Tensor4> {
        split_to_depth(&x, grid)
    }
}

/// Records onto a tape and remembers which nodes hold each layer's weights.
pub struct Recorder<'t, 'a> {
    pub tape: &'t mut Tape<'a>,
    /// (weight, bias) per layer index.
    pub params: Vec<Option<(Var, Var)>>,
}

impl<'t, 'a> Recorder<'t, 'a> {
    pub fn new(tape: &'t mut Tape<'a>, layers: usize) -> Self {
        Self {
            tape,
            params: vec![None; layers],
        }
    }
}

impl<'a> Exec<'a> for Recorder<'_, 'a> {
    type T = Var;

    fn conv(&mut self, x: Var, index: usize, layer: &'a ConvLayer) -> Result<Var> {
        let w = self.tape.param(&layer.params.weight)?;
        let b = self.tape.param(&layer.params.bias)?;
        self.params[index] = Some((w, b));
        let y = self.tape.conv2d(x, w, b, layer.params.stride)?;
        if layer.activation {
            self.tape.leaky_relu(y)
        } else {
            Ok(y)
        }
    }

    fn upsample(&mut self, x: Var) -> Result<Var> {
        self.tape.upsample_nearest_2x(x)
    }

    fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tape.concat_channels(a, b)
    }

    fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.tape.add(a, b)
    }

    fn split_to_depth(&mut self, x: Var, grid: usize) -> Result<Var> {
        self.tape.split_to_depth(x, grid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetConfig,
    layers: Vec<ConvLayer>,
}

impl Network {
    /// Builds the topology for `config` with seeded He-style initialization.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = plan(&config)
            .into_iter()
            .map(|p| {
                let fan_in = (p.in_ch * p.kernel * p.kernel) as f64;
                let normal = Normal::new(0.0, p.init_gain / fan_in.sqrt())
                    .map_err(|e| Error::Config(e.to_string()))?;
                let shape = Shape4::new(p.out_ch, p.in_ch, p.kernel, p.kernel);
                let weight = (0..shape.len()).map(|_| normal.sample(&mut rng)).collect();
                let params = ConvParams::new(
                    Tensor4::new(shape, weight)?,
                    Tensor4::zeros([1, p.out_ch, 1, 1]),
                    p.stride,
                )?;
                Ok(ConvLayer {
                    name: p.name,
                    params,
                    activation: p.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.config
            .grid_spec()
            .expect("validated config has a valid grid spec")
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params.param_count()).sum()
    }

    /// `<layer>.weight` / `<layer>.bias` tensors in layer order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor4)> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), &l.params.weight),
                    (format!("{}.bias", l.name), &l.params.bias),
                ]
            })
            .collect()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor4)> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), &mut l.params.weight),
                    (format!("{}.bias", l.name), &mut l.params.bias),
                ]
            })
            .collect()
    }

    pub fn check_input(&self, shape: Shape4) -> Result<()> {
        if shape.channels != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "expected 4 channels: R,G,B,depth; got input {shape}"
            )));
        }
        let n = self.config.input_size;
        if shape.height != n || shape.width != n {
            return Err(Error::Dimension(format!(
                "expected {n}x{n} input, got {shape}"
            )));
        }
        Ok(())
    }

    /// Walks the topology on any backend, returning the raw grid.
    pub fn graph<'a, E: Exec<'a>>(&'a self, exec: &mut E, input: E::T) -> Result<E::T> {
        let cfg = &self.config;
        let mut layers = self.layers.iter().enumerate();
        let mut next = || layers.next().expect("layer plan matches topology");
        let mut conv = |exec: &mut E, x: E::T| {
            let (i, l) = next();
            exec.conv(x, i, l)
        };

        let mut x = conv(exec, input)?;
        let mut stride16 = None;
        for (s, &blocks) in cfg.stage_blocks.iter().enumerate() {
            x = conv(exec, x)?;
            for _ in 0..blocks {
                let shortcut = x.clone();
                let y = conv(exec, x)?;
                let y = conv(exec, y)?;
                x = exec.add(shortcut, y)?;
            }
            if s == 3 {
                stride16 = Some(x.clone());
            }
        }
        let stride16 = stride16.expect("validated config has 5 stages");
        let lateral = conv(exec, x)?;
        let up = exec.upsample(lateral)?;
        let mut h = exec.concat(up, stride16)?;
        for _ in 0..cfg.head_pairs {
            h = conv(exec, h)?;
            h = conv(exec, h)?;
        }
        let logits = conv(exec, h)?;
        exec.split_to_depth(logits, cfg.grid_size)
    }

    /// Inference: `(batch, 4, N, N)` → raw grid `(batch, S, S, S·10)`.
    pub fn forward(&self, input: &Tensor4) -> Result<Tensor4> {
        self.check_input(input.shape())?;
        input.ensure_finite("forward input")?;
        self.graph(&mut Eager, input.clone())
    }

    /// Records a forward pass; returns the raw grid node and per-layer
    /// (weight, bias) nodes.
    pub fn forward_tape<'a>(&'a self, tape: &mut Tape<'a>, input: Var) -> Result<(Var, Vec<(Var, Var)>)> {
        self.check_input(tape.value(input).shape())?;
        let mut rec = Recorder::new(tape, self.layers.len());
        let out = self.graph(&mut rec, input)?;
        let params = rec
            .params
            .into_iter()
            .map(|p| p.expect("every layer is visited once"))
            .collect();
        Ok((out, params))
    }

    /// Copies weights from `other`, which must share the topology.
    pub fn load_weights_from(&mut self, other: &Network) -> Result<()> {
        if other.config != self.config {
            return Err(Error::Config("network configs differ".into()));
        }
        self.layers.clone_from(&other.layers);
        Ok(())
    }
}

/// Reinterprets a `(batch, S·C, S, S)` map as the `(batch, S, S, S·C)` grid:
/// channel block `k·C..k·C+C` at spatial (y = j, x = i) becomes cell (i, j, k).
pub fn split_to_depth(features: &Tensor4, grid: usize) -> Result<Tensor4> {
    let s = features.shape();
    let c = CHANNELS_PER_CELL;
    if s.channels != grid * c || s.height != grid || s.width != grid {
        return Err(Error::Dimension(format!(
            "split_to_depth expects (batch, {}, {grid}, {grid}), got {s}",
            grid * c
        )));
    }
    let mut out = vec![0.0; s.len()];
    let item = s.item_len();
    for b in 0..s.batch {
        let src = features.item(b);
        let dst = &mut out[b * item..(b + 1) * item];
        for ch in 0..grid * c {
            for j in 0..grid {
                for i in 0..grid {
                    dst[(i * grid + j) * grid * c + ch] = src[(ch * grid + j) * grid + i];
                }
            }
        }
    }
    Tensor4::new([s.batch, grid, grid, grid * c], out)
}

/// Inverse of [`split_to_depth`].
pub fn merge_from_depth(grid_tensor: &Tensor4, grid: usize) -> Result<Tensor4> {
    let s = grid_tensor.shape();
    let c = CHANNELS_PER_CELL;
    if s.channels != grid || s.height != grid || s.width != grid * c {
        return Err(Error::Dimension(format!(
            "merge_from_depth expects (batch, {grid}, {grid}, {}), got {s}",
            grid * c
        )));
    }
    let mut out = vec![0.0; s.len()];
    let item = s.item_len();
    for b in 0..s.batch {
        let src = grid_tensor.item(b);
        let dst = &mut out[b * item..(b + 1) * item];
        for ch in 0..grid * c {
            for j in 0..grid {
                for i in 0..grid {
                    dst[(ch * grid + j) * grid + i] = src[(i * grid + j) * grid * c + ch];
                }
            }
        }
    }
    Tensor4::new([s.batch, grid * c, grid, grid], out)
}
