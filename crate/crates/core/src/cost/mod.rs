//! Analytic parameter and multiply-accumulate accounting, and wall-clock
//! latency measurement.

mod bench;

pub use bench::{bench_latency, BenchResult};

use crate::attention::RegionGrid;
use crate::error::{Error, Result};
use crate::network::{LayerPlan, Network, PlanOp};
use crate::tensor::Shape4;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// How a multiply-accumulate is reported as floating-point operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Convention {
    /// One MAC counts as one operation.
    Macs,
    /// One MAC counts as two operations.
    Flops2x,
}

impl Convention {
    pub const BOTH: [Convention; 2] = [Convention::Macs, Convention::Flops2x];

    pub fn factor(self) -> u64 {
        match self {
            Convention::Macs => 1,
            Convention::Flops2x => 2,
        }
    }

    pub fn apply(self, macs: u64) -> u64 {
        macs * self.factor()
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::Macs => "macs",
            Convention::Flops2x => "flops2x",
        })
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macs" => Ok(Convention::Macs),
            "flops2x" => Ok(Convention::Flops2x),
            other => Err(Error::Config(format!("unknown convention {other:?}; expected macs or flops2x"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub layer: String,
    pub params: u64,
    pub macs: u64,
}

/// Per-layer costs. Elementwise work (norm 2 ops, relu 1, add 1, pooling 3
/// comparisons per output, bilinear 4 per output) is kept in a separate
/// `overhead` row and counted in the `macs` column as plain operations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub input_shape: Option<Shape4>,
    pub convention: Convention,
    pub rows: Vec<CostRow>,
}

pub const OVERHEAD_ROW: &str = "overhead";

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    /// MACs without the overhead row.
    pub fn compute_macs(&self) -> u64 {
        self.rows.iter().filter(|r| r.layer != OVERHEAD_ROW).map(|r| r.macs).sum()
    }

    /// Total under the report's convention.
    pub fn total(&self) -> u64 {
        self.convention.apply(self.total_macs())
    }

    pub fn total_under(&self, c: Convention) -> u64 {
        c.apply(self.total_macs())
    }

    pub fn row(&self, layer: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }

    /// `layer,params,macs,flops2x`, one row per layer, totals last.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params,macs,flops2x\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.layer, r.params, r.macs, 2 * r.macs));
        }
        let (p, m) = (self.total_params(), self.total_macs());
        out.push_str(&format!("total,{p},{m},{}\n", 2 * m));
        out
    }
}

fn conv_params(c_in: usize, c_out: usize, kernel: (usize, usize), groups: usize, bias: bool) -> u64 {
    let w = c_out * (c_in / groups) * kernel.0 * kernel.1;
    (w + if bias { c_out } else { 0 }) as u64
}

/// MACs and learnable parameters of one primitive; elementwise work is
/// returned separately as overhead.
fn op_cost(op: &PlanOp) -> (u64, u64, u64) {
    match *op {
        PlanOp::Conv {
            c_in,
            c_out,
            kernel,
            groups,
            bias,
            output,
            ..
        } => {
            let per_out = (c_in / groups * kernel.0 * kernel.1) as u64;
            (conv_params(c_in, c_out, kernel, groups, bias), output.numel() as u64 * per_out, 0)
        }
        PlanOp::Norm { channels, elems, .. } => (2 * channels as u64, 0, 2 * elems as u64),
        PlanOp::Relu { elems } | PlanOp::Add { elems } => (0, 0, elems as u64),
        PlanOp::MaxPool { out_elems } => (0, 0, 3 * out_elems as u64),
        PlanOp::Upsample { out_elems } => (0, 0, 4 * out_elems as u64),
        PlanOp::Attention {
            batch,
            channels,
            pixels,
            regions,
            scales,
            power_iters,
        } => {
            let a = reduced_attention_macs(channels, pixels, regions);
            let p = power_iteration_macs(channels, pixels, scales, power_iters);
            (0, batch as u64 * (a + p), 0)
        }
    }
}

fn report_from_plan(plan: &[LayerPlan], input: Option<Shape4>, convention: Convention, with_macs: bool) -> CostReport {
    let mut rows = Vec::with_capacity(plan.len() + 1);
    let mut overhead = 0;
    for layer in plan {
        let (mut params, mut macs) = (0, 0);
        for op in &layer.ops {
            let (p, m, o) = op_cost(op);
            params += p;
            macs += m;
            overhead += o;
        }
        rows.push(CostRow {
            layer: layer.name.clone(),
            params,
            macs: if with_macs { macs } else { 0 },
        });
    }
    rows.push(CostRow {
        layer: OVERHEAD_ROW.into(),
        params: 0,
        macs: if with_macs { overhead } else { 0 },
    });
    CostReport {
        input_shape: input,
        convention,
        rows,
    }
}

/// Learnable parameters per layer (conv weights, biases, norm affine
/// terms); MAC columns are zero.
pub fn count_params(net: &Network) -> Result<CostReport> {
    let s = net.spec();
    let stride = s.output_stride();
    let plan = net.plan(Shape4::new(1, s.input_channels, stride, stride))?;
    Ok(report_from_plan(&plan, None, Convention::Macs, false))
}

/// Per-layer MACs for one forward pass on `input`.
pub fn count_flops(net: &Network, input: Shape4, convention: Convention) -> Result<CostReport> {
    let plan = net.plan(input)?;
    Ok(report_from_plan(&plan, Some(input), convention, true))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AttentionCost {
    /// Scores plus weighted sum over all keys.
    pub attention_macs: u64,
    /// All power iterations over every region of every scale.
    pub power_iter_macs: u64,
}

/// `2·C'·N·S`: one product for the scores, one for the weighted sum.
pub fn reduced_attention_macs(channels: usize, pixels: usize, keys: usize) -> u64 {
    2 * (channels * pixels * keys) as u64
}

/// `2·T·C'·N` per scale: each iteration multiplies by the region matrix
/// and its transpose once.
pub fn power_iteration_macs(channels: usize, pixels: usize, scales: usize, iters: usize) -> u64 {
    2 * (iters * channels * pixels * scales) as u64
}

/// Dense query-key-value aggregation over all `N` pixels: `2·C'·N²`.
pub fn standard_nonlocal_macs(channels: usize, pixels: usize) -> u64 {
    2 * (channels as u64) * (pixels as u64) * (pixels as u64)
}

pub fn attention_flops(channels: usize, pixels: usize, grids: &[RegionGrid], iters: usize) -> AttentionCost {
    let keys = grids.iter().map(RegionGrid::count).sum();
    AttentionCost {
        attention_macs: reduced_attention_macs(channels, pixels, keys),
        power_iter_macs: power_iteration_macs(channels, pixels, grids.len(), iters),
    }
}

/// Reference totals for the full-size models: (parameters in millions,
/// GFLOPS at 512x1024).
pub fn reference_costs(variant: crate::network::ModelVariant) -> (f64, f64) {
    use crate::network::ModelVariant::*;
    match variant {
        A => (0.67, 8.48),
        B => (0.68, 8.57),
        C => (0.68, 8.58),
    }
}

/// Reference attention figures for a 32x64x128 bottleneck, in operations.
pub const REF_STANDARD_NONLOCAL: f64 = 4.0e9;
pub const REF_SINGLE_SCALE: f64 = 32.0e6;
pub const REF_MULTI_SCALE: f64 = 40.0e6;
pub const REF_POWER_SINGLE: f64 = 1.0e6;
pub const REF_POWER_MULTI: f64 = 2.0e6;

/// Signed relative deviation `(got - want) / want`.
pub fn relative_delta(got: f64, want: f64) -> f64 {
    (got - want) / want
}

/// The convention whose reading of `macs` lies closer to `reference`.
pub fn closer_convention(macs: u64, reference: f64) -> (Convention, f64) {
    Convention::BOTH
        .iter()
        .map(|&c| (c, relative_delta(c.apply(macs) as f64, reference)))
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .expect("two conventions")
}
