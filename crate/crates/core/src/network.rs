//! U-shaped restoration network: 3×3 input projection, three encoder levels
//! with pixel-unshuffle downsampling, a bottleneck at 1/8 resolution, a
//! mirrored decoder with skip concatenation and 1×1 fusion, a full
//! resolution refinement stage and a 3×3 output conv predicting the
//! residual that is added back to the input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockConfig, BranchMode, Ddtb};
use crate::deform::AttentionKind;
use crate::error::{Error, Result};
use crate::nn::{pixel_shuffle, pixel_unshuffle};
use crate::ops::concat;
use crate::params::{Conv2d, Ctx, Init, ParamStore, PROJ_STD};
use crate::tape::{Tape, Var};
use crate::tensor::{DType, Scalar, Tensor};

/// Number of downsampling steps between the input and the bottleneck.
pub const LEVELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    /// Blocks per encoder level, shallowest first.
    pub encoder_blocks: [usize; LEVELS],
    pub bottleneck_blocks: usize,
    /// Blocks per decoder level in execution order (deepest first).
    pub decoder_blocks: [usize; LEVELS],
    pub refinement_blocks: usize,
    /// Heads per level 0..=3 (level 3 is the bottleneck).
    pub heads: [usize; LEVELS + 1],
    pub p_loc: usize,
    pub p_glob: usize,
    pub gamma: usize,
    pub ffn_expansion: usize,
    /// Offset bound in pixels; defaults to gamma.
    pub offset_scale: Option<f64>,
    pub branch: BranchMode,
    pub attention: AttentionKind,
    pub dtype: DType,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 32,
            encoder_blocks: [4, 6, 6],
            bottleneck_blocks: 8,
            decoder_blocks: [6, 6, 4],
            refinement_blocks: 4,
            heads: [1, 2, 4, 8],
            p_loc: 8,
            p_glob: 8,
            gamma: 2,
            ffn_expansion: 4,
            offset_scale: None,
            branch: BranchMode::Dual,
            attention: AttentionKind::Deformable,
            dtype: DType::F32,
        }
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl NetworkConfig {
    /// Small configuration used by tests and desk-scale experiments.
    pub fn toy() -> Self {
        NetworkConfig {
            base_channels: 8,
            encoder_blocks: [1, 1, 1],
            bottleneck_blocks: 1,
            decoder_blocks: [1, 1, 1],
            refinement_blocks: 1,
            heads: [1, 1, 2, 2],
            p_loc: 4,
            p_glob: 4,
            gamma: 2,
            ..Self::default()
        }
    }

    /// Encoder channels at level 0..=3.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channels of decoder level `level` after skip fusion; level 0 keeps
    /// the concatenated width.
    pub fn decoder_channels(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.base_channels
        } else {
            self.level_channels(level)
        }
    }

    /// Input extents must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        let lcm = self.p_loc / gcd(self.p_loc, self.p_glob) * self.p_glob;
        (1 << LEVELS) * lcm
    }

    pub fn block_config(&self, channels: usize, heads: usize) -> BlockConfig {
        BlockConfig {
            channels,
            heads,
            p_loc: self.p_loc,
            p_glob: self.p_glob,
            gamma: self.gamma,
            ffn_expansion: self.ffn_expansion,
            branch: self.branch,
            attention: self.attention,
            offset_scale: self.offset_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        for level in 0..=LEVELS {
            let c = self.level_channels(level);
            let m = self.heads[level];
            if m == 0 || !c.is_multiple_of(m) {
                return Err(Error::Config(format!(
                    "heads[{level}] = {m} must divide the level channel count {c}"
                )));
            }
        }
        if !self.decoder_channels(0).is_multiple_of(self.heads[0]) {
            return Err(Error::Config("heads[0] must divide 2·base_channels".into()));
        }
        if let Some(s) = self.offset_scale {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config(format!(
                    "offset_scale {s} must be finite and >= 0"
                )));
            }
        }
        self.block_config(self.base_channels, self.heads[0])
            .validate()
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_multiple();
        if !h.is_multiple_of(m) || !w.is_multiple_of(m) || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} must be a positive multiple of {m} in both extents; \
                 pad the image (e.g. reflect padding) before calling forward"
            )));
        }
        Ok(())
    }
}

/// Layer structure of a network, independent of parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub cfg: NetworkConfig,
    pub input: Conv2d,
    pub encoder: Vec<Vec<Ddtb>>,
    pub down: Vec<Conv2d>,
    pub bottleneck: Vec<Ddtb>,
    /// `up[l]` maps level l+1 to level l.
    pub up: Vec<Conv2d>,
    pub fuse: Vec<Conv2d>,
    /// `decoder[l]` runs at level l.
    pub decoder: Vec<Vec<Ddtb>>,
    pub refinement: Vec<Ddtb>,
    pub output: Conv2d,
}

impl Architecture {
    pub fn new(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.base_channels;
        let stack =
            |prefix: String, count: usize, channels: usize, heads: usize| -> Result<Vec<Ddtb>> {
                (0..count)
                    .map(|i| Ddtb::new(&format!("{prefix}.{i}"), cfg.block_config(channels, heads)))
                    .collect()
            };
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        let mut decoder = Vec::new();
        for l in 0..LEVELS {
            let c = cfg.level_channels(l);
            encoder.push(stack(
                format!("enc{l}"),
                cfg.encoder_blocks[l],
                c,
                cfg.heads[l],
            )?);
            down.push(Conv2d::pointwise(format!("down{l}"), 4 * c, 2 * c));
            up.push(Conv2d::pointwise(
                format!("up{l}"),
                cfg.level_channels(l + 1),
                4 * c,
            ));
            fuse.push(Conv2d::pointwise(
                format!("fuse{l}"),
                2 * c,
                cfg.decoder_channels(l),
            ));
            decoder.push(stack(
                format!("dec{l}"),
                cfg.decoder_blocks[LEVELS - 1 - l],
                cfg.decoder_channels(l),
                cfg.heads[l],
            )?);
        }
        Ok(Architecture {
            cfg: cfg.clone(),
            input: Conv2d::new("input", 3, c0, 3),
            encoder,
            down,
            bottleneck: stack(
                "bottleneck".into(),
                cfg.bottleneck_blocks,
                cfg.level_channels(LEVELS),
                cfg.heads[LEVELS],
            )?,
            up,
            fuse,
            decoder,
            refinement: stack("refine".into(), cfg.refinement_blocks, 2 * c0, cfg.heads[0])?,
            output: Conv2d::new("output", 2 * c0, 3, 3),
        })
    }

    fn blocks(&self) -> impl Iterator<Item = &Ddtb> {
        self.encoder
            .iter()
            .flatten()
            .chain(&self.bottleneck)
            .chain(self.decoder.iter().flatten())
            .chain(&self.refinement)
    }

    pub fn num_params(&self) -> usize {
        let convs = self.input.num_params()
            + self.output.num_params()
            + self
                .down
                .iter()
                .chain(&self.up)
                .chain(&self.fuse)
                .map(Conv2d::num_params)
                .sum::<usize>();
        convs + self.blocks().map(Ddtb::num_params).sum::<usize>()
    }

    /// Deterministic given `seed`. The output conv is zero so the freshly
    /// built network maps every input to itself.
    pub fn init<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tn = Init::TruncNormal(PROJ_STD);
        self.input.init(&mut store, tn, &mut rng);
        for l in 0..LEVELS {
            for b in &self.encoder[l] {
                b.init(&mut store, &mut rng);
            }
            self.down[l].init(&mut store, tn, &mut rng);
        }
        for b in &self.bottleneck {
            b.init(&mut store, &mut rng);
        }
        for l in (0..LEVELS).rev() {
            self.up[l].init(&mut store, tn, &mut rng);
            self.fuse[l].init(&mut store, tn, &mut rng);
            for b in &self.decoder[l] {
                b.init(&mut store, &mut rng);
            }
        }
        for b in &self.refinement {
            b.init(&mut store, &mut rng);
        }
        self.output.init(&mut store, Init::Zeros, &mut rng);
        store
    }
}

/// Feature shapes observed during a forward pass, keyed by stage label.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub arch: Architecture,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(cfg)?;
        let params = arch.init(seed);
        Ok(Model { arch, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.arch.cfg
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// `I_out = I_in + I_r` for `input`: [N, 3, H, W].
    pub fn forward<'t>(&self, tape: &'t Tape<T>, input: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_traced(tape, input, None)
    }

    pub fn forward_traced<'t>(
        &self,
        tape: &'t Tape<T>,
        input: Var<'t, T>,
        mut trace: Option<&mut ShapeTrace>,
    ) -> Result<Var<'t, T>> {
        let s = input.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape("network input", &s, &[0, 3, 0, 0]));
        }
        self.arch.cfg.check_input(s[2], s[3])?;
        let ctx = Ctx::new(tape, &self.params);
        let mut note = |label: String, v: Var<'t, T>| {
            if let Some(t) = trace.as_deref_mut() {
                t.push((label, v.shape()));
            }
        };
        let run = |blocks: &[Ddtb], mut x: Var<'t, T>| -> Result<Var<'t, T>> {
            for b in blocks {
                x = b.forward(&ctx, x)?;
            }
            Ok(x)
        };

        let mut x = self.arch.input.forward(&ctx, input)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            x = run(&self.arch.encoder[l], x)?;
            note(format!("enc{l}"), x);
            skips.push(x);
            x = self.arch.down[l].forward(&ctx, pixel_unshuffle(x, 2)?)?;
        }
        note("bottleneck.in".into(), x);
        x = run(&self.arch.bottleneck, x)?;
        for l in (0..LEVELS).rev() {
            x = pixel_shuffle(self.arch.up[l].forward(&ctx, x)?, 2)?;
            let cat = concat(&[x, skips[l]], 1)?;
            note(format!("dec{l}.concat"), cat);
            x = self.arch.fuse[l].forward(&ctx, cat)?;
            note(format!("dec{l}.fused"), x);
            x = run(&self.arch.decoder[l], x)?;
        }
        x = run(&self.arch.refinement, x)?;
        note("refine".into(), x);
        let residual = self.arch.output.forward(&ctx, x)?;
        residual.add(input)
    }

    /// Forward on a plain tensor without keeping gradients.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::with_finite_check(false);
        let x = tape.constant(input.clone());
        Ok(self.forward(&tape, x)?.value())
    }

    /// Reflect-pads to the size multiple, runs the network and crops back.
    pub fn infer_padded(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let s = input.shape();
        if s.len() != 4 {
            return Err(Error::shape("infer_padded", s, &[0, 3, 0, 0]));
        }
        let m = self.arch.cfg.size_multiple();
        let (h, w) = (s[2], s[3]);
        let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
        let padded = pad_reflect_to(input, hp, wp);
        let out = self.infer(&padded)?;
        Ok(crop(&out, h, w))
    }

    /// Replaces parameter values from another store with identical names and
    /// shapes.
    pub fn load_params(&mut self, source: &ParamStore<T>) -> Result<()> {
        for (name, value) in source.iter() {
            let Some(existing) = self.params.get(name) else {
                return Err(Error::CheckpointShape {
                    name: name.to_string(),
                    stored: value.shape().to_vec(),
                    expected: vec![],
                });
            };
            if existing.shape() != value.shape() {
                return Err(Error::CheckpointShape {
                    name: name.to_string(),
                    stored: value.shape().to_vec(),
                    expected: existing.shape().to_vec(),
                });
            }
        }
        if let Some(missing) = self.params.names().find(|n| source.get(n).is_none()) {
            return Err(Error::CheckpointShape {
                name: missing.to_string(),
                stored: vec![],
                expected: self
                    .params
                    .get(missing)
                    .map(|t| t.shape().to_vec())
                    .unwrap_or_default(),
            });
        }
        for (name, value) in source.iter() {
            self.params.insert(name, value.clone());
        }
        Ok(())
    }
}

/// Exact parameter count of the architecture described by `cfg`.
pub fn count_params(cfg: &NetworkConfig) -> Result<usize> {
    Ok(Architecture::new(cfg)?.num_params())
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Mirror-pads the bottom/right of an [N, C, H, W] tensor to `h`×`w`.
pub fn pad_reflect_to<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape();
    let (planes, h0, w0) = (s[0] * s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            let sy = reflect_index(y, h0);
            for xx in 0..w {
                out.push(x.data()[p * h0 * w0 + sy * w0 + reflect_index(xx, w0)]);
            }
        }
    }
    Tensor::from_parts(vec![s[0], s[1], h, w], out)
}

/// Top-left `h`×`w` window of an [N, C, H, W] tensor.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape();
    let (planes, h0, w0) = (s[0] * s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        for y in 0..h {
            let row = p * h0 * w0 + y * w0;
            out.extend_from_slice(&x.data()[row..row + w]);
        }
    }
    Tensor::from_parts(vec![s[0], s[1], h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_builds_and_is_identity() {
        let model = Model::<f64>::build(&NetworkConfig::toy(), 0).unwrap();
        let x = Tensor::from_fn(&[1, 3, 32, 32], |i| (i as f64 * 0.013).sin().abs());
        assert_eq!(model.infer(&x).unwrap(), x);
    }

    #[test]
    fn same_seed_same_params() {
        let a = Model::<f32>::build(&NetworkConfig::toy(), 9).unwrap();
        let b = Model::<f32>::build(&NetworkConfig::toy(), 9).unwrap();
        let c = Model::<f32>::build(&NetworkConfig::toy(), 10).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn count_matches_built_store() {
        for cfg in [
            NetworkConfig::toy(),
            NetworkConfig {
                branch: BranchMode::Local,
                ..NetworkConfig::toy()
            },
        ] {
            let model = Model::<f32>::build(&cfg, 0).unwrap();
            assert_eq!(count_params(&cfg).unwrap(), model.num_params());
        }
    }

    #[test]
    fn input_divisibility_error_mentions_padding() {
        let model = Model::<f32>::build(&NetworkConfig::toy(), 0).unwrap();
        let err = model
            .infer(&Tensor::zeros(&[1, 3, 40, 32]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("pad"), "{err}");
    }

    #[test]
    fn padded_inference_restores_shape() {
        let model = Model::<f32>::build(&NetworkConfig::toy(), 0).unwrap();
        let x = Tensor::from_fn(&[1, 3, 21, 45], |i| (i % 7) as f32 / 7.0);
        assert_eq!(model.infer_padded(&x).unwrap(), x);
    }

    #[test]
    fn invalid_heads_rejected() {
        let cfg = NetworkConfig {
            heads: [3, 1, 1, 1],
            ..NetworkConfig::toy()
        };
        assert!(Model::<f32>::build(&cfg, 0).is_err());
    }

    #[test]
    fn reflect_index_wraps() {
        let idx: Vec<usize> = (0..9).map(|i| reflect_index(i, 3)).collect();
        assert_eq!(idx, vec![0, 1, 2, 1, 0, 1, 2, 1, 0]);
    }
}
