//! Multiplication counts of convolution layers.
//!
//! A convolution with `N` filters over `M` input channels, a `D_k x D_k`
//! kernel and a `D_p x D_p` output costs `N * M * D_k^2 * D_p^2`
//! multiplications. Pooling layers are listed with zero multiplications and
//! dense layers are not counted.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::LayerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvCostSpec {
    /// Output channels (`N`).
    pub filters: u64,
    /// Input channels (`M`).
    pub channels: u64,
    /// Kernel side (`D_k`).
    pub kernel_side: u64,
    pub output_rows: u64,
    pub output_cols: u64,
}

impl ConvCostSpec {
    /// Square output of side `D_p`.
    pub fn square(filters: u64, channels: u64, kernel_side: u64, output_side: u64) -> Result<Self> {
        Self::new(filters, channels, kernel_side, output_side, output_side)
    }

    pub fn new(filters: u64, channels: u64, kernel_side: u64, output_rows: u64, output_cols: u64) -> Result<Self> {
        if [filters, channels, kernel_side, output_rows, output_cols].contains(&0) {
            return Err(Error::Config("convolution cost parameters must be positive".into()));
        }
        Ok(ConvCostSpec {
            filters,
            channels,
            kernel_side,
            output_rows,
            output_cols,
        })
    }
}

/// `N * M * D_k^2 * D_p^2`; `D_p^2` becomes `rows * cols` for non-square maps.
///
/// Panics if the product overflows `u64`.
pub fn conv_multiplications(spec: &ConvCostSpec) -> u64 {
    [
        spec.channels,
        spec.kernel_side,
        spec.kernel_side,
        spec.output_rows,
        spec.output_cols,
    ]
    .iter()
    .try_fold(spec.filters, |acc, &f| acc.checked_mul(f))
    .expect("multiplication count overflows u64")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub model: String,
    pub layer: String,
    pub kind: &'static str,
    /// `None` for pooling layers.
    pub spec: Option<ConvCostSpec>,
    pub multiplications: u64,
    /// The frozen transfer branch of MM-V-A.
    pub transferred: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub ours: u64,
    pub theirs: u64,
    pub difference: u64,
    pub percent_faster: f64,
}

impl Comparison {
    pub fn percent_string(&self) -> String {
        format!("{:.4}%", self.percent_faster)
    }
}

/// `difference = |theirs - ours|`, `percent = 100 * difference / max(ours, theirs)`.
pub fn compare(ours: u64, theirs: u64) -> Result<Comparison> {
    if ours == 0 || theirs == 0 {
        return Err(Error::Config("compared totals must be positive".into()));
    }
    let difference = ours.abs_diff(theirs);
    let percent_faster = 100.0 * difference as f64 / ours.max(theirs) as f64;
    Ok(Comparison {
        ours,
        theirs,
        difference,
        percent_faster,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total: u64,
}

impl CostReport {
    pub fn from_layers(layers: Vec<LayerCost>) -> Self {
        let total = layers.iter().map(|l| l.multiplications).sum();
        CostReport { layers, total }
    }

    /// Concatenates several model reports into one figure (the twin total).
    pub fn combine(reports: &[CostReport]) -> Self {
        Self::from_layers(reports.iter().flat_map(|r| r.layers.iter().cloned()).collect())
    }

    pub fn transferred_total(&self) -> u64 {
        self.layers.iter().filter(|l| l.transferred).map(|l| l.multiplications).sum()
    }

    pub fn is_consistent(&self) -> bool {
        self.total == self.layers.iter().map(|l| l.multiplications).sum::<u64>()
    }

    /// Column-aligned per-layer table followed by the totals.
    pub fn render(&self) -> String {
        assert!(self.is_consistent(), "cost report total disagrees with its lines");
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:<22} {:<10} {:>5} {:>5} {:>4} {:>9} {:>16}",
            "model", "layer", "kind", "N", "M", "D_k", "D_p", "multiplications"
        );
        for l in &self.layers {
            let (n, m, k, p) = match &l.spec {
                Some(c) => (
                    c.filters.to_string(),
                    c.channels.to_string(),
                    c.kernel_side.to_string(),
                    if c.output_rows == c.output_cols {
                        c.output_rows.to_string()
                    } else {
                        format!("{}x{}", c.output_rows, c.output_cols)
                    },
                ),
                None => ("-".into(), "-".into(), "-".into(), "-".into()),
            };
            let kind = if l.transferred { "conv2d*" } else { l.kind };
            let _ = writeln!(
                s,
                "{:<8} {:<22} {:<10} {:>5} {:>5} {:>4} {:>9} {:>16}",
                l.model, l.layer, kind, n, m, k, p, l.multiplications
            );
        }
        let _ = writeln!(s, "total_multiplications = {}", self.total);
        let t = self.transferred_total();
        if t > 0 {
            let _ = writeln!(s, "transferred_branch_multiplications = {t}  (rows marked conv2d*)");
            let _ = writeln!(s, "total_without_transferred_branch = {}", self.total - t);
        }
        s
    }
}

/// Multiplications of every convolution of a compiled model; pooling layers
/// appear with zero.
pub fn model_cost(model: &Model) -> Result<CostReport> {
    let net = &model.network;
    let shapes: std::collections::HashMap<String, Vec<usize>> = net.layer_shapes().into_iter().collect();
    let mut lines = Vec::new();
    for layer in net.layers() {
        match &layer.kind {
            LayerKind::Conv2d(c) => {
                let out = &shapes[&layer.name];
                let inputs = net
                    .layer_input_shapes(&layer.name)
                    .ok_or_else(|| Error::layer(&layer.name, "layer missing from graph"))?;
                let spec = ConvCostSpec::new(
                    c.filters as u64,
                    inputs[0][2] as u64,
                    c.kernel_size as u64,
                    out[0] as u64,
                    out[1] as u64,
                )?;
                lines.push(LayerCost {
                    model: model.name().to_string(),
                    layer: layer.name.clone(),
                    kind: "conv2d",
                    spec: Some(spec),
                    multiplications: conv_multiplications(&spec),
                    transferred: !c.trainable,
                });
            }
            LayerKind::MaxPool2d { .. } => lines.push(LayerCost {
                model: model.name().to_string(),
                layer: layer.name.clone(),
                kind: "maxpool2d",
                spec: None,
                multiplications: 0,
                transferred: false,
            }),
            _ => {}
        }
    }
    Ok(CostReport::from_layers(lines))
}

/// Published totals used as comparison fixtures: the reported MissMarple
/// figure and the two reference models.
pub mod published {
    pub const MISSMARPLE_TOTAL: u64 = 11_540_352;
    pub const RAO_NI_TOTAL: u64 = 36_507_450;
    pub const POMARI_TOTAL: u64 = 1_296_937_728;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mmv, build_mmva, ModelConfig};
    use proptest::prelude::*;

    #[test]
    fn fixtures() {
        assert_eq!(conv_multiplications(&ConvCostSpec::square(1, 1, 1, 1).unwrap()), 1);
        assert_eq!(conv_multiplications(&ConvCostSpec::square(32, 3, 3, 62).unwrap()), 3_321_216);
        assert!(ConvCostSpec::square(0, 1, 1, 1).is_err());
    }

    #[test]
    fn comparisons() {
        let c = compare(published::MISSMARPLE_TOTAL, published::RAO_NI_TOTAL).unwrap();
        assert_eq!(c.difference, 24_967_098);
        assert_eq!(c.percent_string(), "68.3890%");
        let c = compare(published::MISSMARPLE_TOTAL, published::POMARI_TOTAL).unwrap();
        assert_eq!(c.difference, 1_285_397_376);
        assert_eq!(c.percent_string(), "99.1102%");
        let c = compare(5, 5).unwrap();
        assert_eq!((c.difference, c.percent_string().as_str()), (0, "0.0000%"));
        assert!(compare(0, 5).is_err());
    }

    #[test]
    fn pooling_only_and_single_conv_models() {
        let (m, _) = build_mmv(&ModelConfig::default(), 0).unwrap();
        let r = model_cost(&m).unwrap();
        assert_eq!(r.layers.iter().filter(|l| l.kind == "maxpool2d").count(), 4);
        assert!(r.layers.iter().filter(|l| l.kind == "maxpool2d").all(|l| l.multiplications == 0));
        assert!(r.is_consistent());
        assert_eq!(CostReport::from_layers(vec![]).total, 0);
    }

    #[test]
    fn frozen_branch_is_itemized() {
        let cfg = ModelConfig::default();
        let (_, vw) = build_mmv(&cfg, 0).unwrap();
        let (m, _) = build_mmva(&cfg, &vw, 0).unwrap();
        let r = model_cost(&m).unwrap();
        assert_eq!(r.transferred_total(), 64 * 32 * 9 * 16 * 16);
        assert!(r.render().contains("conv2d*"));
    }

    proptest! {
        #[test]
        fn multiplicative_in_each_parameter(
            n in 1u64..512, m in 1u64..512, k in 1u64..12, p in 1u64..256, f in 1u64..5
        ) {
            let base = conv_multiplications(&ConvCostSpec::square(n, m, k, p).unwrap());
            prop_assert_eq!(conv_multiplications(&ConvCostSpec::square(n * f, m, k, p).unwrap()), base * f);
            prop_assert_eq!(conv_multiplications(&ConvCostSpec::square(n, m * f, k, p).unwrap()), base * f);
            prop_assert_eq!(conv_multiplications(&ConvCostSpec::square(n, m, k * f, p).unwrap()), base * f * f);
            prop_assert_eq!(conv_multiplications(&ConvCostSpec::square(n, m, k, p * f).unwrap()), base * f * f);
        }

        #[test]
        fn compare_percent_is_symmetric(a in 1u64..u32::MAX as u64, b in 1u64..u32::MAX as u64) {
            let x = compare(a, b).unwrap();
            let y = compare(b, a).unwrap();
            prop_assert_eq!(x.difference, y.difference);
            prop_assert_eq!(x.percent_faster, y.percent_faster);
        }
    }
}
