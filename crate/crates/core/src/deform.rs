//! Deformable multi-head attention.
//!
//! Queries come from every pixel of the input. Keys and values come from a
//! sparse feature map sampled at a grid of reference points (one per γ×γ
//! cell) shifted by learned offsets and scaled by a learned modulation. A
//! small position sub-network (depthwise 5×5 conv with stride γ, then a 1×1
//! conv down to three channels) predicts both from the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::params::{init_tensor, Conv2d, Ctx, Init, ParamStore, PROJ_STD};
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

/// Spatial operator used inside a branch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// Keys/values from deformably sampled points.
    #[default]
    Deformable,
    /// Standard multi-head self-attention over every token.
    Dense,
    /// Learned token-mixing matrix shared by all channels.
    MlpMixer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformAttnConfig {
    pub channels: usize,
    pub heads: usize,
    /// Grid-reduction stride γ.
    pub gamma: usize,
    /// Offset bound in pixels; `None` means γ.
    pub offset_scale: Option<f64>,
}

impl DeformAttnConfig {
    pub fn new(channels: usize, heads: usize, gamma: usize) -> Self {
        DeformAttnConfig {
            channels,
            heads,
            gamma,
            offset_scale: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention channels {} must be divisible by heads {}",
                self.channels, self.heads
            )));
        }
        if self.gamma == 0 {
            return Err(Error::Config("gamma must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn offset_pixels(&self) -> f64 {
        self.offset_scale.unwrap_or(self.gamma as f64)
    }
}

/// Reference points, offsets and modulation for one attention call.
pub struct DeformableField<'t, T: Scalar> {
    /// [H_G, W_G, 2], normalized (horizontal, vertical).
    pub ref_points: Tensor<T>,
    /// [N, H_G, W_G, 2], normalized units.
    pub offsets: Var<'t, T>,
    /// [N, H_G, W_G, 1], in (0, 2).
    pub modulation: Var<'t, T>,
}

/// Pixel index to normalized coordinate (−1 and +1 at the centers of the
/// border pixels). A unit extent maps to 0.
pub fn normalize_coord(pixel: f64, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        2.0 * pixel / (extent - 1) as f64 - 1.0
    }
}

/// Normalized units per pixel along an axis of `extent` pixels.
fn pixel_to_normalized(extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        2.0 / (extent - 1) as f64
    }
}

/// One point at the center of each γ×γ cell, as a [H/γ, W/γ, 2] tensor of
/// normalized (horizontal, vertical) coordinates.
pub fn reference_grid<T: Scalar>(h: usize, w: usize, gamma: usize) -> Result<Tensor<T>> {
    if gamma == 0 {
        return Err(Error::Config("gamma must be >= 1".into()));
    }
    if !h.is_multiple_of(gamma) {
        return Err(Error::divisibility("reference_grid", "height", h, gamma));
    }
    if !w.is_multiple_of(gamma) {
        return Err(Error::divisibility("reference_grid", "width", w, gamma));
    }
    let (hg, wg) = (h / gamma, w / gamma);
    let center = (gamma as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(hg * wg * 2);
    for i in 0..hg {
        for j in 0..wg {
            data.push(T::of(normalize_coord(j as f64 * gamma as f64 + center, w)));
            data.push(T::of(normalize_coord(i as f64 * gamma as f64 + center, h)));
        }
    }
    Tensor::new(&[hg, wg, 2], data)
}

/// `x' = ψ(x, p + Δp) ⊙ Δm` with border-clamped bilinear sampling ψ and
/// Δm broadcast over channels. Output [N, C, H_G, W_G].
pub fn sample_deformed<'t, T: Scalar>(
    x: Var<'t, T>,
    field: &DeformableField<'t, T>,
) -> Result<Var<'t, T>> {
    let tape = x.tape();
    let rp = field.ref_points.shape().to_vec();
    let grid = tape.constant(field.ref_points.reshaped(&[1, rp[0], rp[1], 2])?);
    let coords = field.offsets.add(grid)?;
    let sampled = nn::bilinear_sample(x, coords)?;
    let ms = field.modulation.shape();
    let m = field.modulation.reshape(&[ms[0], 1, ms[1], ms[2]])?;
    sampled.mul(m)
}

/// Multi-head scaled dot-product attention on channel-major tokens.
/// `q`: [B, C, T], `k`, `v`: [B, C, S]. Returns the output [B, C, T] and
/// the attention weights [B, M, T, S].
pub fn multi_head_attention<'t, T: Scalar>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    heads: usize,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[1] != ks[1] || v.shape() != ks {
        return Err(Error::shape("multi_head_attention", &qs, &ks));
    }
    let (b, c, t, s) = (qs[0], qs[1], qs[2], ks[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!(
            "channels {c} not divisible by heads {heads}"
        )));
    }
    let d = c / heads;
    let qh = q.reshape(&[b, heads, d, t])?.permute(&[0, 1, 3, 2])?;
    let kh = k.reshape(&[b, heads, d, s])?;
    let scores = qh.matmul(kh)?.scale(T::one() / T::of(d as f64).sqrt());
    let weights = scores.softmax(3)?;
    let vh = v.reshape(&[b, heads, d, s])?;
    let z = vh.matmul(weights.transpose()?)?;
    Ok((z.reshape(&[b, c, t])?, weights))
}

/// Intermediate values of one attention call, for inspection in tests and
/// tooling.
pub struct AttnTrace<'t, T: Scalar> {
    pub output: Var<'t, T>,
    pub weights: Option<Var<'t, T>>,
    pub field: Option<DeformableField<'t, T>>,
    pub sampled: Option<Var<'t, T>>,
}

/// Attention operator applied to square token grids of side `side`
/// (a local patch or a global group).
#[derive(Clone, Debug, PartialEq)]
pub struct DeformableAttention {
    pub name: String,
    pub cfg: DeformAttnConfig,
    pub kind: AttentionKind,
    pub side: usize,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub o: Conv2d,
    pub offset_dw: Conv2d,
    pub offset_pw: Conv2d,
}

impl DeformableAttention {
    pub fn new(
        name: &str,
        cfg: DeformAttnConfig,
        kind: AttentionKind,
        side: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if kind == AttentionKind::Deformable && !side.is_multiple_of(cfg.gamma) {
            return Err(Error::divisibility(
                "deformable attention",
                "token grid side",
                side,
                cfg.gamma,
            ));
        }
        let c = cfg.channels;
        Ok(DeformableAttention {
            name: name.to_string(),
            cfg,
            kind,
            side,
            q: Conv2d::pointwise(format!("{name}.q"), c, c),
            k: Conv2d::pointwise(format!("{name}.k"), c, c),
            v: Conv2d::pointwise(format!("{name}.v"), c, c),
            o: Conv2d::pointwise(format!("{name}.o"), c, c),
            offset_dw: Conv2d::depthwise(format!("{name}.offset.dw"), c, 5, cfg.gamma),
            offset_pw: Conv2d::pointwise(format!("{name}.offset.pw"), c, 3),
        })
    }

    fn mixer_name(&self) -> String {
        format!("{}.mix", self.name)
    }

    pub fn num_params(&self) -> usize {
        let t = self.side * self.side;
        match self.kind {
            AttentionKind::Deformable => {
                self.q.num_params()
                    + self.k.num_params()
                    + self.v.num_params()
                    + self.o.num_params()
                    + self.offset_dw.num_params()
                    + self.offset_pw.num_params()
            }
            AttentionKind::Dense => {
                self.q.num_params()
                    + self.k.num_params()
                    + self.v.num_params()
                    + self.o.num_params()
            }
            AttentionKind::MlpMixer => t * t + t + self.o.num_params(),
        }
    }

    /// Projections get truncated-normal weights; the final offset conv is
    /// zero so that Δp ≡ 0 and Δm ≡ 1 at initialization.
    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let tn = Init::TruncNormal(PROJ_STD);
        match self.kind {
            AttentionKind::Deformable | AttentionKind::Dense => {
                self.q.init(store, tn, rng);
                self.k.init(store, tn, rng);
                self.v.init(store, tn, rng);
                self.o.init(store, tn, rng);
                if self.kind == AttentionKind::Deformable {
                    self.offset_dw.init(store, tn, rng);
                    self.offset_pw.init(store, Init::Zeros, rng);
                }
            }
            AttentionKind::MlpMixer => {
                let t = self.side * self.side;
                store.insert(
                    format!("{}.weight", self.mixer_name()),
                    init_tensor(&[t, t], tn, rng),
                );
                store.insert(format!("{}.bias", self.mixer_name()), Tensor::zeros(&[t]));
                self.o.init(store, tn, rng);
            }
        }
    }

    /// Position sub-network: returns (Δp [N,H_G,W_G,2] in normalized units,
    /// Δm [N,H_G,W_G,1]).
    pub fn position_subnet<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let s = x.shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        let gamma = self.cfg.gamma;
        if h % gamma != 0 {
            return Err(Error::divisibility("position_subnet", "height", h, gamma));
        }
        if w % gamma != 0 {
            return Err(Error::divisibility("position_subnet", "width", w, gamma));
        }
        let raw = self
            .offset_pw
            .forward(ctx, self.offset_dw.forward(ctx, x)?)?;
        let (hg, wg) = (h / gamma, w / gamma);
        debug_assert_eq!(raw.shape(), vec![n, 3, hg, wg]);
        let parts = raw.split(1, &[2, 1])?;
        let bound = self.cfg.offset_pixels();
        let axis_scale = Tensor::new(
            &[1, 2, 1, 1],
            vec![
                T::of(bound * pixel_to_normalized(w)),
                T::of(bound * pixel_to_normalized(h)),
            ],
        )?;
        let offsets = parts[0]
            .tanh()
            .mul(ctx.tape.constant(axis_scale))?
            .permute(&[0, 2, 3, 1])?;
        let modulation = parts[1]
            .sigmoid()
            .scale(T::of(2.0))
            .reshape(&[n, hg, wg, 1])?;
        Ok((offsets, modulation))
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        Ok(self.trace(ctx, x)?.output)
    }

    /// Forward pass on `x`: [B, C, side, side], keeping intermediates.
    pub fn trace<'t, T: Scalar>(
        &self,
        ctx: &Ctx<'_, 't, T>,
        x: Var<'t, T>,
    ) -> Result<AttnTrace<'t, T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.cfg.channels {
            return Err(Error::shape(
                "deformable_attention",
                &s,
                &[0, self.cfg.channels, 0, 0],
            ));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        match self.kind {
            AttentionKind::MlpMixer => {
                if h * w != self.side * self.side {
                    return Err(Error::shape(
                        "mlp-mixer tokens",
                        &s,
                        &[self.side, self.side],
                    ));
                }
                let t = h * w;
                let wm = ctx.param(&format!("{}.weight", self.mixer_name()))?;
                let bm = ctx.param(&format!("{}.bias", self.mixer_name()))?;
                let tokens = x.reshape(&[b * c, t])?;
                let mixed = tokens
                    .matmul(wm.transpose()?)?
                    .add(bm.reshape(&[1, t])?)?
                    .reshape(&[b, c, h, w])?;
                let output = self.o.forward(ctx, mixed)?;
                Ok(AttnTrace {
                    output,
                    weights: None,
                    field: None,
                    sampled: None,
                })
            }
            AttentionKind::Dense | AttentionKind::Deformable => {
                let q = self.q.forward(ctx, x)?;
                let (source, field) = if self.kind == AttentionKind::Deformable {
                    let (offsets, modulation) = self.position_subnet(ctx, x)?;
                    let field = DeformableField {
                        ref_points: reference_grid(h, w, self.cfg.gamma)?,
                        offsets,
                        modulation,
                    };
                    (sample_deformed(x, &field)?, Some(field))
                } else {
                    (x, None)
                };
                let ss = source.shape();
                let tokens_kv = ss[2] * ss[3];
                let k = self.k.forward(ctx, source)?.reshape(&[b, c, tokens_kv])?;
                let v = self.v.forward(ctx, source)?.reshape(&[b, c, tokens_kv])?;
                let (z, weights) =
                    multi_head_attention(q.reshape(&[b, c, h * w])?, k, v, self.cfg.heads)?;
                let output = self.o.forward(ctx, z.reshape(&[b, c, h, w])?)?;
                Ok(AttnTrace {
                    output,
                    weights: Some(weights),
                    field,
                    sampled: (self.kind == AttentionKind::Deformable).then_some(source),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_cell_centers() {
        let g = reference_grid::<f64>(4, 4, 2).unwrap();
        assert_eq!(g.shape(), &[2, 2, 2]);
        let to_pix = |u: f64| (u + 1.0) * 1.5;
        let centers: Vec<(f64, f64)> = g
            .data()
            .chunks(2)
            .map(|c| (to_pix(c[1]), to_pix(c[0])))
            .collect();
        let want = [(0.5, 0.5), (0.5, 2.5), (2.5, 0.5), (2.5, 2.5)];
        for (got, want) in centers.iter().zip(want) {
            assert!(
                (got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12,
                "{got:?}"
            );
        }
    }

    #[test]
    fn grid_unit_stride_and_symmetry() {
        let g = reference_grid::<f64>(6, 4, 1).unwrap();
        assert_eq!(g.shape(), &[6, 4, 2]);
        let d = g.data();
        let n = d.len();
        for i in 0..n / 2 {
            // 180° rotation maps point i to point (len-1-i) with negated coords
            let j = n / 2 - 1 - i;
            assert!((d[2 * i] + d[2 * j]).abs() < 1e-12);
            assert!((d[2 * i + 1] + d[2 * j + 1]).abs() < 1e-12);
        }
        assert!(reference_grid::<f64>(5, 4, 2).is_err());
    }

    fn build(
        kind: AttentionKind,
        c: usize,
        m: usize,
        gamma: usize,
        side: usize,
    ) -> (DeformableAttention, ParamStore<f64>) {
        let attn =
            DeformableAttention::new("a", DeformAttnConfig::new(c, m, gamma), kind, side).unwrap();
        let mut store = ParamStore::new();
        attn.init(&mut store, &mut ChaCha8Rng::seed_from_u64(3));
        (attn, store)
    }

    #[test]
    fn zero_init_subnet_is_neutral() {
        let (attn, store) = build(AttentionKind::Deformable, 4, 2, 2, 8);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(Tensor::from_fn(&[2, 4, 8, 8], |i| (i as f64 * 0.37).sin()));
        let (dp, dm) = attn.position_subnet(&ctx, x).unwrap();
        assert_eq!(dp.shape(), vec![2, 4, 4, 2]);
        assert!(dp.value().data().iter().all(|&v| v == 0.0));
        assert!(dm.value().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn subnet_bounds_hold_for_large_raw_outputs() {
        let (attn, mut store) = build(AttentionKind::Deformable, 4, 1, 2, 8);
        let w = store.get_mut("a.offset.pw.weight").unwrap();
        w.data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = if i % 2 == 0 { 50.0 } else { -30.0 });
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(Tensor::from_fn(&[1, 4, 8, 8], |i| {
            (i as f64 * 0.91).cos() * 3.0
        }));
        let (dp, dm) = attn.position_subnet(&ctx, x).unwrap();
        // 2 pixels (γ) in normalized units on an 8-wide grid is 2 * 2/7.
        let bound = 2.0 * 2.0 / 7.0 + 1e-12;
        assert!(dp.value().data().iter().all(|v| v.abs() <= bound));
        assert!(dm
            .value()
            .data()
            .iter()
            .all(|&v| v > 0.0 && v < 2.0 + 1e-12));
    }

    #[test]
    fn identity_sampling_at_unit_stride() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[1, 3, 4, 5], |i| i as f64));
        let field = DeformableField {
            ref_points: reference_grid(4, 5, 1).unwrap(),
            offsets: tape.constant(Tensor::zeros(&[1, 4, 5, 2])),
            modulation: tape.constant(Tensor::ones(&[1, 4, 5, 1])),
        };
        let y = sample_deformed(x, &field).unwrap();
        let diff = y.value().max_abs_diff(&x.value());
        assert!(diff < 1e-12, "{diff}");
    }

    #[test]
    fn constant_image_gives_modulation() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::full(&[1, 2, 4, 4], 3.0));
        let field = DeformableField {
            ref_points: reference_grid(4, 4, 2).unwrap(),
            offsets: tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| (i as f64) * 0.3 - 0.9)),
            modulation: tape.constant(Tensor::from_fn(&[1, 2, 2, 1], |i| 0.5 + i as f64 * 0.25)),
        };
        let y = sample_deformed(x, &field).unwrap().value();
        for ch in 0..2 {
            for i in 0..4 {
                let expected = 3.0 * (0.5 + i as f64 * 0.25);
                assert!((y.data()[ch * 4 + i] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_key_attention_weight_is_one() {
        let (attn, store) = build(AttentionKind::Deformable, 4, 2, 2, 2);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(Tensor::from_fn(&[3, 4, 2, 2], |i| (i as f64).sin()));
        let trace = attn.trace(&ctx, x).unwrap();
        let w = trace.weights.unwrap().value();
        assert_eq!(w.shape(), &[3, 2, 4, 1]);
        assert!(w.data().iter().all(|&v| v == 1.0));
        // output = W_o (W_v x' + b_v) + b_o, identical for every query
        let out = trace.output.value();
        for b in 0..3 {
            for ch in 0..4 {
                let base = (b * 4 + ch) * 4;
                for t in 1..4 {
                    assert!((out.data()[base + t] - out.data()[base]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_value_projection_gives_zero_output() {
        let (attn, mut store) = build(AttentionKind::Deformable, 4, 2, 2, 4);
        for name in ["a.k.weight", "a.v.weight", "a.o.weight"] {
            store.insert(name, Tensor::zeros(&[4, 4, 1, 1]));
        }
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(Tensor::from_fn(&[1, 4, 4, 4], |i| (i as f64).cos()));
        let y = attn.forward(&ctx, x).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kv_tokens_shrink_by_gamma_squared() {
        let (attn, store) = build(AttentionKind::Deformable, 4, 1, 2, 8);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let x = tape.constant(Tensor::from_fn(&[1, 4, 8, 8], |i| (i as f64).sin()));
        let trace = attn.trace(&ctx, x).unwrap();
        assert_eq!(trace.weights.unwrap().shape(), vec![1, 1, 64, 16]);
        assert_eq!(trace.sampled.unwrap().shape(), vec![1, 4, 4, 4]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(DeformableAttention::new(
            "a",
            DeformAttnConfig::new(6, 4, 2),
            AttentionKind::Deformable,
            8
        )
        .is_err());
        assert!(DeformableAttention::new(
            "a",
            DeformAttnConfig::new(4, 2, 3),
            AttentionKind::Deformable,
            8
        )
        .is_err());
    }
}
