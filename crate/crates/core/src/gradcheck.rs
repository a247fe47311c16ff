//! Central finite-difference checks of the tape gradients, in f64.
//!
//! A case is a set of named input tensors plus a function producing a scalar
//! from them. Non-scalar outputs are reduced with a fixed random projection
//! so that every output element contributes a distinct weight. The reported
//! error for one input is `max|analytic − numeric| / max(max|numeric|,
//! max|analytic|, floor)` over the checked coordinates, where `floor` is
//! 1e-3 of the largest analytic gradient anywhere in the case. The floor
//! keeps inputs whose gradient is exactly zero (a key bias under softmax,
//! say) from dividing finite-difference round-off by nothing. The case error
//! is the worst input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blocks::{BlockConfig, BranchMode, Dda, Ddtb, Dffn};
use crate::deform::{AttentionKind, DeformAttnConfig, DeformableAttention};
use crate::error::Result;
use crate::network::{Model, NetworkConfig};
use crate::nn::{self, ConvOptions};
use crate::ops::concat;
use crate::params::{Ctx, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub type CaseFn = Box<dyn for<'a, 't> Fn(&Ctx<'a, 't, f64>) -> Result<Var<'t, f64>>>;

pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub inputs: ParamStore<f64>,
    /// Upper bound on coordinates probed per input tensor.
    pub coords_per_input: usize,
    pub f: CaseFn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_input: String,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// Standard normal tensor.
pub fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// Adds N(0, std²) noise to every tensor so zero-initialized layers become
/// active and sampling positions move off the pixel lattice.
pub fn perturb(store: &mut ParamStore<f64>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += std * z;
        }
    }
}

/// `Σ y ⊙ w` for a fixed weight tensor `w` of the same shape.
pub fn project<'t>(y: Var<'t, f64>, w: &Tensor<f64>) -> Result<Var<'t, f64>> {
    let wv = y.tape().constant(w.clone());
    Ok(y.mul(wv)?.sum_all())
}

fn eval(case: &GradCase, inputs: &ParamStore<f64>) -> Result<f64> {
    let tape = Tape::with_finite_check(false);
    let ctx = Ctx::new(&tape, inputs);
    Ok((case.f)(&ctx)?.value().item())
}

/// Checks at most `max_coords` randomly chosen coordinates per input.
pub fn check(case: &GradCase, max_coords: usize, eps: f64, seed: u64) -> Result<GradReport> {
    let tape = Tape::with_finite_check(false);
    let ctx = Ctx::new(&tape, &case.inputs);
    let loss = (case.f)(&ctx)?;
    let grads = tape.backward(loss)?;
    let largest = case
        .inputs
        .names()
        .filter_map(|n| grads.param(n))
        .flat_map(|g| g.data().iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max);
    let floor = (FLOOR_FRACTION * largest).max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    let mut probe = case.inputs.clone();
    for (name, value) in case.inputs.iter() {
        let analytic = grads
            .param(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        let n = value.numel();
        let k = max_coords.min(case.coords_per_input);
        let coords: Vec<usize> = if n <= k {
            (0..n).collect()
        } else {
            (0..k).map(|_| rng.random_range(0..n)).collect()
        };
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for &i in &coords {
            let orig = value.data()[i];
            probe.get_mut(name).expect("present").data_mut()[i] = orig + eps;
            let plus = eval(case, &probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig - eps;
            let minus = eval(case, &probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            diff = diff.max((a - numeric).abs());
            scale = scale.max(numeric.abs()).max(a.abs());
        }
        checked += coords.len();
        let rel = diff / scale.max(floor);
        if rel > worst.0 || worst.1.is_empty() {
            worst = (rel, name.to_string());
        }
    }
    Ok(GradReport {
        name: case.name.to_string(),
        max_rel_err: worst.0,
        worst_input: worst.1,
        checked,
        tolerance: case.tolerance,
    })
}

const OP_TOL: f64 = 1e-4;
const FLOOR_FRACTION: f64 = 1e-3;
const NET_TOL: f64 = 1e-3;

struct Builder {
    rng: ChaCha8Rng,
}

impl Builder {
    fn inputs(&mut self, specs: &[(&str, &[usize])]) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        for (name, shape) in specs {
            store.insert(*name, randn(shape, &mut self.rng));
        }
        store
    }

    fn weights(&mut self, shape: &[usize]) -> Tensor<f64> {
        randn(shape, &mut self.rng)
    }
}

fn case(name: &'static str, tolerance: f64, inputs: ParamStore<f64>, f: CaseFn) -> GradCase {
    GradCase {
        name,
        tolerance,
        inputs,
        coords_per_input: usize::MAX,
        f,
    }
}

/// Single-op cases. `pad_reflect`, `pixel_shuffle` and friends are index
/// maps, so their checks exercise the backward scatter.
pub fn op_cases(seed: u64) -> Vec<GradCase> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut cases = Vec::new();
    macro_rules! unary {
        ($name:literal, $shape:expr, |$x:ident| $body:expr) => {{
            let inputs = b.inputs(&[("x", &$shape)]);
            let out_shape = {
                let tape = Tape::<f64>::new();
                let $x = tape.constant(inputs.get("x").expect("x").clone());
                #[allow(clippy::redundant_closure_call)]
                let y: Result<Var<'_, f64>> = (|| Ok($body))();
                y.expect("case builds").shape()
            };
            let w = b.weights(&out_shape);
            cases.push(case(
                $name,
                OP_TOL,
                inputs,
                Box::new(move |ctx| {
                    let $x = ctx.param("x")?;
                    project($body, &w)
                }),
            ));
        }};
    }
    unary!("neg", [2, 3], |x| x.neg());
    unary!("scale", [2, 3], |x| x.scale(1.7).add_scalar(0.3));
    unary!("abs", [2, 5], |x| x.abs());
    unary!("tanh", [2, 5], |x| x.tanh());
    unary!("sigmoid", [2, 5], |x| x.sigmoid());
    unary!("exp", [2, 5], |x| x.exp());
    unary!("gelu", [2, 5], |x| x.gelu());
    unary!("softmax", [2, 3, 4], |x| x.softmax(1)?);
    unary!("softmax_last", [2, 3, 4], |x| x.softmax(2)?);
    unary!("permute", [2, 3, 4], |x| x.permute(&[2, 0, 1])?);
    unary!("transpose", [2, 3, 4], |x| x.transpose()?);
    unary!("sum_axis", [2, 3, 4], |x| x.sum_axis(1)?);
    unary!("mean_all", [2, 3], |x| x.mean_all());
    unary!("split_concat", [2, 5, 3], |x| {
        let parts = x.split(1, &[2, 3])?;
        concat(&[parts[1], parts[0].tanh()], 1)?
    });
    unary!("pad_reflect", [1, 2, 4, 5], |x| nn::pad_reflect(x, 2)?);
    unary!("pixel_unshuffle", [1, 2, 4, 6], |x| nn::pixel_unshuffle(
        x, 2
    )?);
    unary!("pixel_shuffle", [1, 8, 2, 3], |x| nn::pixel_shuffle(x, 2)?);

    macro_rules! binary {
        ($name:literal, $sa:expr, $sb:expr, $out:expr, |$x:ident, $y:ident| $body:expr) => {{
            let w = b.weights(&$out);
            let inputs = b.inputs(&[("x", &$sa), ("y", &$sb)]);
            cases.push(case(
                $name,
                OP_TOL,
                inputs,
                Box::new(move |ctx| {
                    let $x = ctx.param("x")?;
                    let $y = ctx.param("y")?;
                    project($body, &w)
                }),
            ));
        }};
    }
    binary!("add", [2, 3], [2, 3], [2, 3], |x, y| x.add(y)?);
    binary!("sub", [2, 3], [2, 3], [2, 3], |x, y| x.sub(y)?);
    binary!("mul", [2, 3], [2, 3], [2, 3], |x, y| x.mul(y)?);
    binary!("mul_broadcast", [2, 3, 4], [1, 3, 1], [2, 3, 4], |x, y| x
        .mul(
        y
    )?);
    binary!("add_broadcast", [2, 3, 4], [2, 1, 4], [2, 3, 4], |x, y| x
        .add(
        y
    )?);
    binary!("matmul", [3, 4], [4, 2], [3, 2], |x, y| x.matmul(y)?);
    binary!("matmul_batched", [2, 3, 4], [2, 4, 5], [2, 3, 5], |x, y| x
        .matmul(y)?);
    binary!("matmul_shared", [2, 3, 4], [4, 5], [2, 3, 5], |x, y| x
        .matmul(y)?);

    let conv = |name: &'static str,
                b: &mut Builder,
                cin: usize,
                cout: usize,
                k: usize,
                opts: ConvOptions| {
        let x_shape = [2, cin, 6, 7];
        let w_shape = [cout, cin / opts.groups, k, k];
        let inputs = b.inputs(&[("x", &x_shape), ("w", &w_shape), ("b", &[cout])]);
        let tape = Tape::<f64>::new();
        let out_shape = nn::conv2d(
            tape.constant(inputs.get("x").expect("x").clone()),
            tape.constant(inputs.get("w").expect("w").clone()),
            None,
            opts,
        )
        .expect("valid geometry")
        .shape();
        let w = b.weights(&out_shape);
        case(
            name,
            OP_TOL,
            inputs,
            Box::new(move |ctx| {
                let y = nn::conv2d(
                    ctx.param("x")?,
                    ctx.param("w")?,
                    Some(ctx.param("b")?),
                    opts,
                )?;
                project(y, &w)
            }),
        )
    };
    cases.push(conv(
        "conv_pointwise",
        &mut b,
        3,
        4,
        1,
        ConvOptions::default(),
    ));
    cases.push(conv(
        "conv_3x3_strided_grouped",
        &mut b,
        4,
        6,
        3,
        ConvOptions {
            stride: 2,
            padding: 1,
            groups: 2,
        },
    ));
    cases.push(conv(
        "conv_depthwise_5x5",
        &mut b,
        3,
        3,
        5,
        ConvOptions {
            stride: 2,
            padding: 2,
            groups: 3,
        },
    ));

    {
        let w = b.weights(&[2, 3, 4, 5]);
        let mut inputs = b.inputs(&[("x", &[2, 3, 4, 5]), ("gamma", &[3]), ("beta", &[3])]);
        for v in inputs.get_mut("gamma").expect("gamma").data_mut() {
            *v += 1.0;
        }
        cases.push(case(
            "layer_norm",
            OP_TOL,
            inputs,
            Box::new(move |ctx| {
                project(
                    nn::layer_norm(
                        ctx.param("x")?,
                        ctx.param("gamma")?,
                        ctx.param("beta")?,
                        1e-5,
                    )?,
                    &w,
                )
            }),
        ));
    }
    {
        // coordinates strictly inside the map and off the pixel lattice
        let w = b.weights(&[1, 2, 3, 3]);
        let mut inputs = b.inputs(&[("x", &[1, 2, 5, 6])]);
        let coords = Tensor::from_fn(&[1, 3, 3, 2], |_| b.rng.random_range(-0.85..0.85));
        inputs.insert("coords", coords);
        cases.push(case(
            "bilinear_sample",
            OP_TOL,
            inputs,
            Box::new(move |ctx| {
                project(
                    nn::bilinear_sample(ctx.param("x")?, ctx.param("coords")?)?,
                    &w,
                )
            }),
        ));
    }
    cases
}

fn block_cfg(attention: AttentionKind) -> BlockConfig {
    BlockConfig {
        channels: 8,
        heads: 2,
        p_loc: 4,
        p_glob: 4,
        gamma: 2,
        ffn_expansion: 2,
        branch: BranchMode::Dual,
        attention,
        offset_scale: None,
    }
}

/// Composite modules with every parameter perturbed away from its
/// initialization, plus the toy network under an L1 loss.
pub fn module_cases(seed: u64) -> Vec<GradCase> {
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut cases = Vec::new();

    macro_rules! module {
        ($name:literal, $tol:expr, $x_shape:expr, $out:expr, $module:expr, |$m:ident, $ctx:ident, $x:ident| $body:expr) => {{
            let $m = $module;
            let mut inputs = ParamStore::new();
            $m.init(&mut inputs, &mut init_rng);
            perturb(&mut inputs, 0.3, b.rng.random());
            inputs.insert("x", randn(&$x_shape, &mut b.rng));
            let w = b.weights(&$out);
            cases.push(case(
                $name,
                $tol,
                inputs,
                Box::new(move |$ctx| {
                    let $x = $ctx.param("x")?;
                    project($body, &w)
                }),
            ));
        }};
    }

    let da_cfg = DeformAttnConfig {
        channels: 8,
        heads: 2,
        gamma: 2,
        offset_scale: None,
    };
    module!(
        "deformable_attention",
        OP_TOL,
        [2, 8, 4, 4],
        [2, 8, 4, 4],
        DeformableAttention::new("da", da_cfg, AttentionKind::Deformable, 4).expect("valid"),
        |m, ctx, x| m.forward(ctx, x)?
    );
    module!(
        "dense_attention",
        OP_TOL,
        [2, 8, 4, 4],
        [2, 8, 4, 4],
        DeformableAttention::new("dense", da_cfg, AttentionKind::Dense, 4).expect("valid"),
        |m, ctx, x| m.forward(ctx, x)?
    );
    module!(
        "mlp_mixer",
        OP_TOL,
        [2, 8, 4, 4],
        [2, 8, 4, 4],
        DeformableAttention::new("mix", da_cfg, AttentionKind::MlpMixer, 4).expect("valid"),
        |m, ctx, x| m.forward(ctx, x)?
    );
    module!(
        "dda",
        OP_TOL,
        [1, 8, 8, 8],
        [1, 8, 8, 8],
        Dda::new("dda", block_cfg(AttentionKind::Deformable)).expect("valid"),
        |m, ctx, x| m.forward(ctx, x)?
    );
    module!(
        "dffn",
        OP_TOL,
        [1, 8, 5, 6],
        [1, 8, 5, 6],
        Dffn::new("dffn", 8, 2),
        |m, ctx, x| m.forward(ctx, x)?
    );
    module!(
        "ddtb",
        OP_TOL,
        [1, 8, 8, 8],
        [1, 8, 8, 8],
        Ddtb::new("ddtb", block_cfg(AttentionKind::Deformable)).expect("valid"),
        |m, ctx, x| m.forward(ctx, x)?
    );

    {
        let cfg = NetworkConfig::toy();
        let model = Model::<f64>::build(&cfg, b.rng.random()).expect("toy config is valid");
        let mut inputs = model.params.clone();
        perturb(&mut inputs, 0.1, b.rng.random());
        let x = Tensor::from_fn(&[1, 3, 32, 32], |_| b.rng.random_range(0.0..1.0));
        let target = Tensor::from_fn(&[1, 3, 32, 32], |_| b.rng.random_range(0.0..1.0));
        cases.push(GradCase {
            coords_per_input: 2,
            ..case(
                "network_l1",
                NET_TOL,
                inputs,
                Box::new(move |ctx| {
                    let tape = ctx.tape;
                    let scratch = Model {
                        arch: model.arch.clone(),
                        params: ctx.params.clone(),
                    };
                    let out = scratch.forward(tape, tape.constant(x.clone()))?;
                    Ok(out.sub(tape.constant(target.clone()))?.abs().mean_all())
                }),
            )
        });
    }
    cases
}

/// All cases, optionally filtered by exact name.
pub fn all_cases(seed: u64, only: Option<&str>) -> Vec<GradCase> {
    op_cases(seed)
        .into_iter()
        .chain(module_cases(seed))
        .filter(|c| only.is_none_or(|n| n == c.name))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // y = x² whose backward is deliberately routed through a constant,
        // leaving only half of the true gradient
        let mut inputs = ParamStore::new();
        inputs.insert("x", Tensor::from_fn(&[3], |i| 1.0 + i as f64));
        let c = case(
            "half",
            OP_TOL,
            inputs,
            Box::new(|ctx| {
                let x = ctx.param("x")?;
                let frozen = ctx.tape.constant(x.value());
                Ok(x.mul(frozen)?.sum_all())
            }),
        );
        let report = check(&c, 8, 1e-6, 0).unwrap();
        assert!(report.max_rel_err > 0.4, "{report:?}");
    }

    #[test]
    fn simple_ops_pass() {
        for c in op_cases(1).iter().take(6) {
            let r = check(c, 16, 1e-6, 0).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
