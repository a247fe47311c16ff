//! Dual-branch deformable attention (DDA), the depth-wise feed-forward
//! network (DFFN) and the residual transformer block built from them.
//!
//! DDA expands C channels to 2C with a 1×1 conv, splits the result into two
//! C-channel halves, runs a local branch (attention inside non-overlapping
//! p×p patches) and a global branch (attention among tokens at the same
//! relative position of a g×g patch tiling) in parallel, concatenates the
//! halves and fuses back to C with a second 1×1 conv.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deform::{AttentionKind, DeformAttnConfig, DeformableAttention};
use crate::error::{Error, Result};
use crate::ops::concat;
use crate::params::{Conv2d, Ctx, Init, LayerNorm, ParamStore, PROJ_STD};
use crate::tape::Var;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchMode {
    #[default]
    Dual,
    /// Both channel halves use local patches.
    Local,
    /// Both channel halves use global groups.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partition {
    Local,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    /// Local patch side in pixels.
    pub p_loc: usize,
    /// Global branch: patches per side.
    pub p_glob: usize,
    pub gamma: usize,
    pub ffn_expansion: usize,
    pub branch: BranchMode,
    pub attention: AttentionKind,
    pub offset_scale: Option<f64>,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return err(format!(
                "block channels {} must be a positive multiple of heads {}",
                self.channels, self.heads
            ));
        }
        if self.p_loc == 0 || self.p_glob == 0 || self.gamma == 0 || self.ffn_expansion == 0 {
            return err("p_loc, p_glob, gamma and ffn_expansion must be positive".into());
        }
        if self.attention == AttentionKind::Deformable {
            if !self.p_loc.is_multiple_of(self.gamma) {
                return err(format!(
                    "p_loc {} is not divisible by gamma {}",
                    self.p_loc, self.gamma
                ));
            }
            if !self.p_glob.is_multiple_of(self.gamma) {
                return err(format!(
                    "p_glob {} is not divisible by gamma {}",
                    self.p_glob, self.gamma
                ));
            }
        }
        Ok(())
    }

    /// Checks a feature map extent against both partitions.
    pub fn check_extent(&self, op: &'static str, h: usize, w: usize) -> Result<()> {
        for (extent, what) in [(h, "height"), (w, "width")] {
            if extent % self.p_loc != 0 {
                return Err(Error::divisibility(op, what, extent, self.p_loc));
            }
            if extent % self.p_glob != 0 {
                return Err(Error::divisibility(op, what, extent, self.p_glob));
            }
        }
        Ok(())
    }

    fn partitions(&self) -> [Partition; 2] {
        match self.branch {
            BranchMode::Dual => [Partition::Local, Partition::Global],
            BranchMode::Local => [Partition::Local, Partition::Local],
            BranchMode::Global => [Partition::Global, Partition::Global],
        }
    }
}

fn spatial<T: Scalar>(op: &'static str, x: Var<'_, T>, p: usize) -> Result<[usize; 4]> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, &s, &[0, 0, 0, 0]));
    }
    if p == 0 || !s[2].is_multiple_of(p) {
        return Err(Error::divisibility(op, "height", s[2], p));
    }
    if !s[3].is_multiple_of(p) {
        return Err(Error::divisibility(op, "width", s[3], p));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// [N, C, H, W] -> [N·(H/p)·(W/p), C, p, p], patches in row-major order.
pub fn partition_local<'t, T: Scalar>(x: Var<'t, T>, p: usize) -> Result<Var<'t, T>> {
    let [n, c, h, w] = spatial("partition_local", x, p)?;
    x.reshape(&[n, c, h / p, p, w / p, p])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[n * (h / p) * (w / p), c, p, p])
}

/// Inverse of [`partition_local`] for an original extent `h`×`w`.
pub fn unpartition_local<'t, T: Scalar>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (c, p) = (s[1], s[2]);
    if p == 0
        || !h.is_multiple_of(p)
        || !w.is_multiple_of(p)
        || !s[0].is_multiple_of((h / p) * (w / p))
    {
        return Err(Error::shape("unpartition_local", &s, &[h, w]));
    }
    let n = s[0] / ((h / p) * (w / p));
    x.reshape(&[n, h / p, w / p, c, p, p])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape(&[n, c, h, w])
}

/// Groups the tokens that share a relative position within a g×g tiling
/// of (H/g)×(W/g) patches: [N, C, H, W] -> [N·(H/g)·(W/g), C, g, g]. Group
/// (i, j) holds pixels (a·H/g + i, b·W/g + j) for a, b in 0..g.
pub fn partition_global<'t, T: Scalar>(x: Var<'t, T>, g: usize) -> Result<Var<'t, T>> {
    let [n, c, h, w] = spatial("partition_global", x, g)?;
    let (ph, pw) = (h / g, w / g);
    x.reshape(&[n, c, g, ph, g, pw])?
        .permute(&[0, 3, 5, 1, 2, 4])?
        .reshape(&[n * ph * pw, c, g, g])
}

/// Inverse of [`partition_global`].
pub fn unpartition_global<'t, T: Scalar>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (c, g) = (s[1], s[2]);
    if g == 0
        || !h.is_multiple_of(g)
        || !w.is_multiple_of(g)
        || !s[0].is_multiple_of((h / g) * (w / g))
    {
        return Err(Error::shape("unpartition_global", &s, &[h, w]));
    }
    let (ph, pw) = (h / g, w / g);
    let n = s[0] / (ph * pw);
    x.reshape(&[n, ph, pw, c, g, g])?
        .permute(&[0, 3, 4, 1, 5, 2])?
        .reshape(&[n, c, h, w])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub partition: Partition,
    pub side: usize,
    pub attn: DeformableAttention,
}

impl Branch {
    fn forward<'t, T: Scalar>(&self, ctx: &Ctx<'_, 't, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        match self.partition {
            Partition::Local => {
                let tokens = partition_local(x, self.side)?;
                unpartition_local(self.attn.forward(ctx, tokens)?, h, w)
            }
            Partition::Global => {
                let tokens = partition_global(x, self.side)?;
                unpartition_global(self.attn.forward(ctx, tokens)?, h, w)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dda {
    pub cfg: BlockConfig,
    pub expand: Conv2d,
    pub branches: [Branch; 2],
    pub fuse: Conv2d,
}

impl Dda {
    pub fn new(name: &str, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let make = |i: usize, partition: Partition| -> Result<Branch> {
            let side = match partition {
                Partition::Local => cfg.p_loc,
                Partition::Global => cfg.p_glob,
            };
            let attn_cfg = DeformAttnConfig {
                channels: c,
                heads: cfg.heads,
                gamma: cfg.gamma,
                offset_scale: cfg.offset_scale,
            };
            let label = match partition {
                Partition::Local => "local",
                Partition::Global => "global",
            };
            Ok(Branch {
                partition,
                side,
                attn: DeformableAttention::new(
                    &format!("{name}.{label}{i}"),
                    attn_cfg,
                    cfg.attention,
                    side,
                )?,
            })
        };
        let [pa, pb] = cfg.partitions();
        Ok(Dda {
            cfg,
            expand: Conv2d::pointwise(format!("{name}.expand"), c, 2 * c),
            branches: [make(0, pa)?, make(1, pb)?],
            fuse: Conv2d::pointwise(format!("{name}.fuse"), 2 * c, c),
        })
    }

    pub fn num_params(&self) -> usize {
        self.expand.num_params()
            + self.fuse.num_params()
            + self
                .branches
                .iter()
                .map(|b| b.attn.num_params())
                .sum::<usize>()
    }

    /// The fusion conv starts at zero so the residual block is the identity.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.expand.init(store, Init::TruncNormal(PROJ_STD), rng);
        for b in &self.branches {
            b.attn.init(store, rng);
        }
        self.fuse.init(store, Init::Zeros, rng);
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let s = x.shape();
        self.cfg.check_extent("dda_forward", s[2], s[3])?;
        let c = self.cfg.channels;
        let halves = self.expand.forward(ctx, x)?.split(1, &[c, c])?;
        let outs = [
            self.branches[0].forward(ctx, halves[0])?,
            self.branches[1].forward(ctx, halves[1])?,
        ];
        self.fuse.forward(ctx, concat(&outs, 1)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dffn {
    pub expand: Conv2d,
    pub dw: Conv2d,
    pub project: Conv2d,
}

impl Dffn {
    pub fn new(name: &str, channels: usize, expansion: usize) -> Self {
        let hidden = channels * expansion;
        Dffn {
            expand: Conv2d::pointwise(format!("{name}.expand"), channels, hidden),
            dw: Conv2d::depthwise(format!("{name}.dw"), hidden, 3, 1),
            project: Conv2d::pointwise(format!("{name}.project"), hidden, channels),
        }
    }

    pub fn num_params(&self) -> usize {
        self.expand.num_params() + self.dw.num_params() + self.project.num_params()
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.expand.init(store, Init::TruncNormal(PROJ_STD), rng);
        self.dw.init(store, Init::TruncNormal(PROJ_STD), rng);
        self.project.init(store, Init::Zeros, rng);
    }

    /// 1×1 expand, 3×3 depthwise, GELU, 1×1 project.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let h = self.dw.forward(ctx, self.expand.forward(ctx, x)?)?.gelu();
        self.project.forward(ctx, h)
    }
}

/// x̂ = DDA(LN(x)) + x;  out = DFFN(LN(x̂)) + x̂.
#[derive(Clone, Debug, PartialEq)]
pub struct Ddtb {
    pub norm1: LayerNorm,
    pub dda: Dda,
    pub norm2: LayerNorm,
    pub dffn: Dffn,
}

impl Ddtb {
    pub fn new(name: &str, cfg: BlockConfig) -> Result<Self> {
        Ok(Ddtb {
            norm1: LayerNorm::new(format!("{name}.norm1"), cfg.channels),
            dda: Dda::new(&format!("{name}.dda"), cfg)?,
            norm2: LayerNorm::new(format!("{name}.norm2"), cfg.channels),
            dffn: Dffn::new(&format!("{name}.dffn"), cfg.channels, cfg.ffn_expansion),
        })
    }

    pub fn num_params(&self) -> usize {
        self.norm1.num_params()
            + self.dda.num_params()
            + self.norm2.num_params()
            + self.dffn.num_params()
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.norm1.init(store);
        self.dda.init(store, rng);
        self.norm2.init(store);
        self.dffn.init(store, rng);
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let attn = self.dda.forward(ctx, self.norm1.forward(ctx, x)?)?;
        let mid = attn.add(x)?;
        let ffn = self.dffn.forward(ctx, self.norm2.forward(ctx, mid)?)?;
        ffn.add(mid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn cfg(c: usize, m: usize, p: usize, g: usize, gamma: usize) -> BlockConfig {
        BlockConfig {
            channels: c,
            heads: m,
            p_loc: p,
            p_glob: g,
            gamma,
            ffn_expansion: 4,
            branch: BranchMode::Dual,
            attention: AttentionKind::Deformable,
            offset_scale: None,
        }
    }

    fn iota(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| i as f64)
    }

    #[test]
    fn local_partition_enumeration() {
        let tape = Tape::new();
        let x = tape.constant(iota(&[1, 1, 4, 4]));
        let p = partition_local(x, 2).unwrap().value();
        assert_eq!(p.shape(), &[4, 1, 2, 2]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn global_partition_enumeration() {
        let tape = Tape::new();
        let x = tape.constant(iota(&[1, 1, 4, 4]));
        let p = partition_global(x, 2).unwrap().value();
        assert_eq!(p.shape(), &[4, 1, 2, 2]);
        // group (0,0): pixels (0,0),(0,2),(2,0),(2,2)
        assert_eq!(&p.data()[..4], &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn partitions_round_trip() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[2, 3, 8, 12], |i| (i as f64).sin()));
        let l = unpartition_local(partition_local(x, 4).unwrap(), 8, 12).unwrap();
        let g = unpartition_global(partition_global(x, 4).unwrap(), 8, 12).unwrap();
        assert_eq!(l.value(), x.value());
        assert_eq!(g.value(), x.value());
        assert!(partition_local(x, 5).is_err());
        assert!(partition_global(x, 5).is_err());
    }

    #[test]
    fn zero_output_projections_give_identity_block() {
        let block = Ddtb::new("b", cfg(8, 2, 4, 4, 2)).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(Tensor::<f64>::from_fn(&[1, 8, 8, 8], |i| {
            (i as f64 * 0.1).cos()
        }));
        let y = block.forward(&ctx, x).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn dda_shape_contract_and_zero_output() {
        let dda = Dda::new("d", cfg(8, 2, 4, 4, 2)).unwrap();
        let mut store = ParamStore::new();
        dda.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(Tensor::<f64>::from_fn(&[1, 8, 16, 16], |i| {
            (i as f64 * 0.3).sin()
        }));
        let y = dda.forward(&ctx, x).unwrap().value();
        assert_eq!(y.shape(), &[1, 8, 16, 16]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_branch_modes_keep_param_count() {
        let dual = Dda::new("d", cfg(8, 2, 4, 4, 2)).unwrap();
        for branch in [BranchMode::Local, BranchMode::Global] {
            let single = Dda::new(
                "d",
                BlockConfig {
                    branch,
                    ..cfg(8, 2, 4, 4, 2)
                },
            )
            .unwrap();
            assert_eq!(single.num_params(), dual.num_params());
        }
    }

    #[test]
    fn geometry_violations_are_errors() {
        assert!(Dda::new("d", cfg(8, 3, 4, 4, 2)).is_err());
        assert!(Dda::new("d", cfg(8, 2, 3, 4, 2)).is_err());
        let dda = Dda::new("d", cfg(8, 2, 4, 4, 2)).unwrap();
        let mut store = ParamStore::new();
        dda.init(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(Tensor::<f64>::zeros(&[1, 8, 12, 10]));
        assert!(matches!(
            dda.forward(&ctx, x),
            Err(Error::Divisibility { .. })
        ));
    }

    #[test]
    fn dffn_zero_projection_and_shape() {
        let ffn = Dffn::new("f", 4, 4);
        let mut store = ParamStore::new();
        ffn.init(&mut store, &mut ChaCha8Rng::seed_from_u64(5));
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(Tensor::<f64>::from_fn(&[2, 4, 5, 7], |i| i as f64 * 0.01));
        let y = ffn.forward(&ctx, x).unwrap().value();
        assert_eq!(y.shape(), &[2, 4, 5, 7]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }
}
