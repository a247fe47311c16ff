//! Analytic cost model. Every count is an exact rational in units where one
//! multiply-accumulate counts once, matching the closed forms below; the
//! empirical counter in [`crate::counter`] instead counts two operations per
//! multiply-accumulate.
//!
//! Closed forms, for an H×W map with C channels, grid stride γ and patch
//! size p:
//!
//! ```text
//! Ω(Conv)   = 2HWC²
//! Ω(DA)     = (2/γ²)H²W²C + (2 + 2/γ²)HWC² + (29/γ²)HWC + (2/γ²)HW
//! Ω(Branch) = ((2γ²+2)/γ²)HWC² + ((2p²+29)/γ²)HWC + (2/γ²)HW
//! Ω(DDA)    = ((8γ²+4)/γ²)HWC² + ((4p²+58)/γ²)HWC + (4/γ²)HW
//! ```

use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};

use crate::blocks::BranchMode;
use crate::deform::AttentionKind;
use crate::error::Result;
use crate::network::{Architecture, NetworkConfig, LEVELS};
use crate::params::Conv2d;

pub type Flops = BigRational;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostQuery {
    pub h: u64,
    pub w: u64,
    pub c: u64,
    pub p: u64,
    pub gamma: u64,
}

fn r(v: u64) -> BigRational {
    BigRational::from_integer(BigInt::from(v))
}

impl CostQuery {
    fn hw(&self) -> BigRational {
        r(self.h) * r(self.w)
    }

    fn g2(&self) -> BigRational {
        r(self.gamma * self.gamma)
    }

    fn c(&self) -> BigRational {
        r(self.c)
    }

    /// The same query on a single p×p patch.
    fn on_patch(&self) -> CostQuery {
        CostQuery {
            h: self.p,
            w: self.p,
            ..*self
        }
    }
}

/// A channel-doubling (or halving) 1×1 convolution: `2HWC²`.
pub fn cost_conv(q: CostQuery) -> Flops {
    r(2) * q.hw() * q.c() * q.c()
}

/// The individual terms making up one deformable attention evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct DaSubparts {
    /// Position sub-network: depthwise 5×5 at stride γ then 1×1 to 3 channels.
    pub position_subnet: Flops,
    pub query: Flops,
    pub key: Flops,
    pub value: Flops,
    pub output: Flops,
    /// Bilinear interpolation of the offset grid.
    pub offsets: Flops,
    /// Modulation of the sampled features.
    pub modulation: Flops,
    pub attention: Flops,
}

impl DaSubparts {
    pub fn sum(&self) -> Flops {
        [
            &self.position_subnet,
            &self.query,
            &self.key,
            &self.value,
            &self.output,
            &self.offsets,
            &self.modulation,
            &self.attention,
        ]
        .into_iter()
        .fold(BigRational::zero(), |acc, x| acc + x)
    }
}

pub fn cost_subparts(q: CostQuery) -> DaSubparts {
    let (hw, c, g2) = (q.hw(), q.c(), q.g2());
    let reduced = &hw / &g2;
    DaSubparts {
        position_subnet: r(25) * &reduced * &c + r(3) * &reduced * &c,
        query: &hw * &c * &c,
        key: &reduced * &c * &c,
        value: &reduced * &c * &c,
        output: &hw * &c * &c,
        offsets: r(2) * &reduced,
        modulation: &reduced * &c,
        attention: r(2) * &hw * &hw * &c / &g2,
    }
}

/// Deformable attention over the whole H×W map (closed form). Panics if the
/// closed form ever disagrees with the sum of [`cost_subparts`], since that
/// would mean the model itself is inconsistent.
pub fn cost_da(q: CostQuery) -> Flops {
    let (hw, c, g2) = (q.hw(), q.c(), q.g2());
    let closed = r(2) / &g2 * &hw * &hw * &c
        + (r(2) + r(2) / &g2) * &hw * &c * &c
        + r(29) / &g2 * &hw * &c
        + r(2) / &g2 * &hw;
    assert_eq!(
        closed,
        cost_subparts(q).sum(),
        "deformable attention cost model is inconsistent"
    );
    closed
}

/// One branch: deformable attention applied independently to the HW/p²
/// patches (closed form).
pub fn cost_branch(q: CostQuery) -> Flops {
    let (hw, c, g2) = (q.hw(), q.c(), q.g2());
    let p2 = r(q.p * q.p);
    (r(2) * &g2 + r(2)) / &g2 * &hw * &c * &c
        + (r(2) * &p2 + r(29)) / &g2 * &hw * &c
        + r(2) / &g2 * &hw
}

/// [`cost_branch`] evaluated by summing per-patch attention costs.
pub fn cost_branch_by_patches(q: CostQuery) -> Flops {
    q.hw() / r(q.p * q.p) * cost_da(q.on_patch())
}

/// Closed form of the full dual-branch module.
pub fn cost_dda_closed_form(q: CostQuery) -> Flops {
    let (hw, c, g2) = (q.hw(), q.c(), q.g2());
    let p2 = r(q.p * q.p);
    (r(8) * &g2 + r(4)) / &g2 * &hw * &c * &c
        + (r(4) * &p2 + r(58)) / &g2 * &hw * &c
        + r(4) / &g2 * &hw
}

/// Dual-branch module broken into its expand/fuse convolutions and the two
/// branches. The total equals [`cost_dda_closed_form`].
pub fn cost_dda(q: CostQuery) -> CostReport {
    let mut report = CostReport::default();
    report.push("expand", cost_conv(q), None);
    report.push("local", cost_branch(q), None);
    report.push("global", cost_branch(q), None);
    report.push("fuse", cost_conv(q), None);
    report
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostEntry {
    pub component: String,
    pub flops: Flops,
    pub params: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn push(&mut self, component: impl Into<String>, flops: Flops, params: Option<u64>) {
        self.entries.push(CostEntry {
            component: component.into(),
            flops,
            params,
        });
    }

    pub fn total(&self) -> Flops {
        self.entries
            .iter()
            .fold(BigRational::zero(), |acc, e| acc + &e.flops)
    }

    pub fn total_params(&self) -> Option<u64> {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn get(&self, component: &str) -> Option<&CostEntry> {
        self.entries.iter().find(|e| e.component == component)
    }

    /// `component,flops,params` with a trailing `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,flops,params\n");
        let row = |name: &str, f: &Flops, p: Option<u64>| {
            format!(
                "{name},{},{}\n",
                format_flops(f),
                p.map(|p| p.to_string()).unwrap_or_default()
            )
        };
        for e in &self.entries {
            out += &row(&e.component, &e.flops, e.params);
        }
        out += &row("total", &self.total(), self.total_params());
        out
    }
}

/// Integers print exactly; anything else as a decimal with three places.
pub fn format_flops(f: &Flops) -> String {
    if f.is_integer() {
        f.to_integer().to_string()
    } else {
        format!("{:.3}", f.to_f64().unwrap_or(f64::NAN))
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .entries
            .iter()
            .map(|e| e.component.len())
            .max()
            .unwrap_or(0)
            .max(9);
        writeln!(
            f,
            "{:<width$}  {:>18}  {:>12}",
            "component", "flops", "params"
        )?;
        let total = self.total();
        let rows = self
            .entries
            .iter()
            .map(|e| (e.component.as_str(), &e.flops, e.params))
            .chain(std::iter::once(("total", &total, self.total_params())));
        for (name, flops, params) in rows {
            let p = params.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
            writeln!(f, "{name:<width$}  {:>18}  {p:>12}", format_flops(flops))?;
        }
        Ok(())
    }
}

/// Cost of one attention branch of the given kind on a C-channel map.
fn branch_cost(kind: AttentionKind, h: u64, w: u64, c: u64, p: u64, gamma: u64) -> Flops {
    let q = CostQuery { h, w, c, p, gamma };
    let (hw, cc) = (q.hw(), q.c());
    let p2 = r(p * p);
    match kind {
        AttentionKind::Deformable => cost_branch(q),
        // four full-resolution projections plus all-pairs attention per patch
        AttentionKind::Dense => r(4) * &hw * &cc * &cc + r(2) * &p2 * &hw * &cc,
        // per-channel token mixing plus the output projection
        AttentionKind::MlpMixer => &p2 * &hw * &cc + &hw * &cc * &cc,
    }
}

fn conv_cost(conv: &Conv2d, h: u64, w: u64) -> Flops {
    let s = conv.opts.stride as u64;
    let (ho, wo) = (h.div_ceil(s), w.div_ceil(s));
    let per_out = (conv.in_channels / conv.opts.groups * conv.kernel * conv.kernel) as u64;
    r(ho * wo * conv.out_channels as u64 * per_out)
}

/// Whole-network estimate for an `h`×`w` input. The attention modules use
/// the closed forms above; feed-forward, normalization and the surrounding
/// convolutions are counted from their layer shapes.
pub fn cost_network(cfg: &NetworkConfig, h: u64, w: u64) -> Result<CostReport> {
    let arch = Architecture::new(cfg)?;
    cfg.check_input(h as usize, w as usize)?;
    let gamma = cfg.gamma as u64;
    let (p_loc, p_glob) = (cfg.p_loc as u64, cfg.p_glob as u64);
    let mut report = CostReport::default();

    let stage =
        |report: &mut CostReport, label: &str, blocks: &[crate::blocks::Ddtb], h: u64, w: u64| {
            let Some(first) = blocks.first() else { return };
            let n = blocks.len() as u64;
            let c = first.dda.cfg.channels as u64;
            let (pa, pb) = match cfg.branch {
                BranchMode::Dual => (p_loc, p_glob),
                BranchMode::Local => (p_loc, p_loc),
                BranchMode::Global => (p_glob, p_glob),
            };
            let q = CostQuery {
                h,
                w,
                c,
                p: pa,
                gamma,
            };
            let dda = r(2) * cost_conv(q)
                + branch_cost(cfg.attention, h, w, c, pa, gamma)
                + branch_cost(cfg.attention, h, w, c, pb, gamma);
            let e = cfg.ffn_expansion as u64;
            let hwc = r(h * w * c);
            let ffn = r(2 * e) * &hwc * r(c) + r(9 * e) * &hwc;
            let norm = r(2) * &hwc;
            let dda_params: usize = blocks.iter().map(|b| b.dda.num_params()).sum();
            let ffn_params: usize = blocks
                .iter()
                .map(|b| b.num_params() - b.dda.num_params())
                .sum();
            report.push(format!("{label}.dda"), r(n) * dda, Some(dda_params as u64));
            report.push(
                format!("{label}.ffn"),
                r(n) * (ffn + norm),
                Some(ffn_params as u64),
            );
        };
    let conv = |report: &mut CostReport, conv: &Conv2d, h: u64, w: u64| {
        report.push(
            conv.name.clone(),
            conv_cost(conv, h, w),
            Some(conv.num_params() as u64),
        );
    };

    conv(&mut report, &arch.input, h, w);
    for l in 0..LEVELS {
        let (hl, wl) = (h >> l, w >> l);
        stage(&mut report, &format!("enc{l}"), &arch.encoder[l], hl, wl);
        conv(&mut report, &arch.down[l], hl / 2, wl / 2);
    }
    stage(
        &mut report,
        "bottleneck",
        &arch.bottleneck,
        h >> LEVELS,
        w >> LEVELS,
    );
    for l in (0..LEVELS).rev() {
        let (hl, wl) = (h >> l, w >> l);
        conv(&mut report, &arch.up[l], hl / 2, wl / 2);
        conv(&mut report, &arch.fuse[l], hl, wl);
        stage(&mut report, &format!("dec{l}"), &arch.decoder[l], hl, wl);
    }
    stage(&mut report, "refine", &arch.refinement, h, w);
    conv(&mut report, &arch.output, h, w);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const Q: CostQuery = CostQuery {
        h: 64,
        w: 64,
        c: 32,
        p: 8,
        gamma: 2,
    };

    fn frac(n: u64, d: u64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn spot_values() {
        assert_eq!(cost_conv(Q), r(8_388_608));
        assert_eq!(cost_branch(Q), r(15_632_384));
        assert_eq!(cost_dda(Q).total(), r(48_041_984));
        assert_eq!(cost_dda_closed_form(Q), r(48_041_984));
        let patch = CostQuery { h: 8, w: 8, ..Q };
        assert_eq!(cost_da(patch), r(244_256));
        let parts = cost_subparts(patch);
        assert_eq!(parts.position_subnet, r(14_336));
        assert_eq!(parts.attention, r(65_536));
        assert_eq!(parts.offsets, r(32));
    }

    #[test]
    fn branch_forms_agree() {
        assert_eq!(cost_branch(Q), cost_branch_by_patches(Q));
    }

    #[test]
    fn fractional_costs_stay_exact() {
        let q = CostQuery {
            h: 3,
            w: 5,
            c: 7,
            p: 3,
            gamma: 2,
        };
        let v = cost_da(q);
        assert!(!v.is_integer());
        assert_eq!(v * r(4), cost_da(q) * r(4));
        assert_eq!(format_flops(&frac(1, 4)), "0.250");
    }

    #[test]
    fn csv_has_total_row() {
        let csv = cost_dda(Q).to_csv();
        assert!(csv.starts_with("component,flops,params\n"));
        assert!(csv.ends_with("total,48041984,\n"), "{csv}");
    }

    #[test]
    fn network_params_match_architecture() {
        let cfg = NetworkConfig::toy();
        let report = cost_network(&cfg, 32, 32).unwrap();
        assert_eq!(
            report.total_params(),
            Some(crate::network::count_params(&cfg).unwrap() as u64)
        );
    }
}
