//! Closed-form parameter and FLOP accounting.
//!
//! Block weights are tallied in four rows (AdaLN, self-attention,
//! cross-attention, MLP) and compared with the closed forms in
//! [`expected_counts`]. Everything else (embedders, head, biases, gains,
//! null embeddings) is overhead.

use std::fmt::Write as _;

use crate::arch::{build_layout, Model, ModelConfig, SizePreset, Variant};
use crate::error::{Error, Result};
use crate::layers::{Component, Layout, ParamKind};
use crate::numerics::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ComponentCounts {
    pub adaln: u64,
    pub self_mha: u64,
    pub cross_mha: u64,
    pub mlp: u64,
}

impl ComponentCounts {
    pub fn total(&self) -> u64 {
        self.adaln + self.self_mha + self.cross_mha + self.mlp
    }

    pub fn rows(&self) -> [(&'static str, u64); 4] {
        [
            ("adaln", self.adaln),
            ("self_mha", self.self_mha),
            ("cross_mha", self.cross_mha),
            ("mlp", self.mlp),
        ]
    }
}

/// Closed-form block weight counts.
pub fn expected_counts(variant: Variant, n: u64, d: u64) -> ComponentCounts {
    let d2 = d * d;
    match variant {
        Variant::Pixart => ComponentCounts {
            adaln: 6 * d2,
            self_mha: 4 * n * d2,
            cross_mha: 4 * n * d2,
            mlp: 8 * n * d2,
        },
        Variant::Mmdit => ComponentCounts {
            adaln: 12 * n * d2,
            self_mha: 8 * n * d2,
            cross_mha: 0,
            mlp: 16 * n * d2,
        },
        Variant::MmditSharedAdaln => ComponentCounts {
            adaln: 12 * d2,
            self_mha: 8 * n * d2,
            cross_mha: 0,
            mlp: 16 * n * d2,
        },
        Variant::DitAir => ComponentCounts {
            adaln: 12 * d2,
            self_mha: 4 * n * d2,
            cross_mha: 0,
            mlp: 8 * n * d2,
        },
        Variant::DitAirLiteFull => ComponentCounts {
            adaln: 12 * d2,
            self_mha: 4 * d2,
            cross_mha: 0,
            mlp: 8 * d2,
        },
        Variant::DitAirLiteAttention => ComponentCounts {
            adaln: 12 * d2,
            self_mha: 4 * d2,
            cross_mha: 0,
            mlp: 8 * n * d2,
        },
    }
}

/// Parameters outside the four block-weight rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overhead {
    /// Patch, timestep, text and pooled embedders (weights and biases) plus null embeddings.
    pub embedding: u64,
    /// Final modulation and output projection.
    pub head: u64,
    /// Biases of block linears.
    pub block_biases: u64,
    /// QK-norm gains and cross-attention gates.
    pub block_gains: u64,
}

impl Overhead {
    pub fn total(&self) -> u64 {
        self.embedding + self.head + self.block_biases + self.block_gains
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditReport {
    pub variant: Variant,
    pub layers: usize,
    pub width: usize,
    pub expected: ComponentCounts,
    pub actual: ComponentCounts,
    pub overhead: Overhead,
    /// Every unique parameter scalar.
    pub total: u64,
    /// Multiply-accumulates of one forward pass at the config's sequence lengths.
    pub flops: FlopBreakdown,
}

impl AuditReport {
    /// First component whose counted weights differ from the closed form.
    pub fn mismatch(&self) -> Option<Error> {
        self.expected
            .rows()
            .into_iter()
            .zip(self.actual.rows())
            .find(|((_, e), (_, a))| e != a)
            .map(|((name, e), (_, a))| Error::Audit {
                component: name.to_string(),
                expected: e,
                actual: a,
            })
    }

    pub fn is_exact(&self) -> bool {
        self.mismatch().is_none()
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} (layers={}, d={})", self.variant, self.layers, self.width);
        let _ = writeln!(s, "{:<12} {:>16} {:>16}", "component", "expected", "actual");
        for ((name, e), (_, a)) in self.expected.rows().into_iter().zip(self.actual.rows()) {
            let _ = writeln!(s, "{:<12} {:>16} {:>16}", name, group(e), group(a));
        }
        let _ = writeln!(
            s,
            "{:<12} {:>16} {:>16}",
            "formula",
            group(self.expected.total()),
            group(self.actual.total())
        );
        let _ = writeln!(s, "{:<12} {:>16}", "overhead", group(self.overhead.total()));
        let _ = writeln!(s, "{:<12} {:>16}", "total", group(self.total));
        let _ = writeln!(s, "{:<12} {:>16}", "forward MACs", group(self.flops.total()));
        s
    }
}

/// `1234567` → `1,234,567`.
pub fn group(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Tallies a layout. `tokens` are `(l_text, l_img)` for the FLOP estimate.
pub fn audit_layout(layout: &Layout, config: &ModelConfig) -> AuditReport {
    let mut actual = ComponentCounts::default();
    let mut overhead = Overhead::default();
    for spec in layout.specs() {
        let n = spec.numel();
        match (spec.component, spec.kind) {
            (Component::Embedding, _) => overhead.embedding += n,
            (Component::Head, _) => overhead.head += n,
            (_, ParamKind::Bias) => overhead.block_biases += n,
            (_, ParamKind::Gain | ParamKind::Table) => overhead.block_gains += n,
            (Component::AdaLn, ParamKind::Weight) => actual.adaln += n,
            (Component::SelfAttention, ParamKind::Weight) => actual.self_mha += n,
            (Component::CrossAttention, ParamKind::Weight) => actual.cross_mha += n,
            (Component::Mlp, ParamKind::Weight) => actual.mlp += n,
        }
    }
    let l_img = (config.latent_size / config.patch).pow(2) as u64;
    AuditReport {
        variant: config.variant,
        layers: config.layers,
        width: config.width,
        expected: expected_counts(config.variant, config.layers as u64, config.width as u64),
        actual,
        overhead,
        total: layout.total_numel(),
        flops: flops_breakdown(
            config.variant,
            config.layers as u64,
            config.width as u64,
            config.text_len as u64,
            l_img,
        ),
    }
}

/// Shape-only audit of a config; no parameters are allocated.
pub fn audit_config(config: &ModelConfig) -> Result<AuditReport> {
    let (layout, _) = build_layout(config)?;
    Ok(audit_layout(&layout, config))
}

/// Audits an instantiated model, failing on any component mismatch.
pub fn audit_model<T: Scalar>(model: &Model<T>) -> Result<AuditReport> {
    let report = audit_layout(model.layout(), model.config());
    match report.mismatch() {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub projections: u64,
    pub attention: u64,
    pub mlp: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.projections + self.attention + self.mlp
    }
}

/// Multiply-accumulates of the transformer blocks for one forward pass.
/// Softmax, norms, modulation and embedders are excluded.
pub fn flops_breakdown(variant: Variant, n: u64, d: u64, l_text: u64, l_img: u64) -> FlopBreakdown {
    let per_layer = if variant.is_joint() {
        let l = l_text + l_img;
        FlopBreakdown {
            projections: 4 * d * d * l,
            attention: 2 * l * l * d,
            mlp: 8 * d * d * l,
        }
    } else {
        FlopBreakdown {
            // self-attention QKVO on image tokens, cross Q/O on image and K/V on text
            projections: 4 * d * d * l_img + 2 * d * d * l_img + 2 * d * d * l_text,
            attention: 2 * l_img * l_img * d + 2 * l_img * l_text * d,
            mlp: 8 * d * d * l_img,
        }
    };
    FlopBreakdown {
        projections: n * per_layer.projections,
        attention: n * per_layer.attention,
        mlp: n * per_layer.mlp,
    }
}

pub fn flops_estimate(variant: Variant, n: u64, d: u64, l_text: u64, l_img: u64) -> u64 {
    flops_breakdown(variant, n, d, l_text, l_img).total()
}

/// Parameter totals quoted for the B-size models.
pub fn reported_total(variant: Variant) -> u64 {
    match variant {
        Variant::Pixart => 0,
        Variant::Mmdit => 902_000_000,
        Variant::MmditSharedAdaln => 631_000_000,
        Variant::DitAir => 321_000_000,
        Variant::DitAirLiteFull => 49_000_000,
        Variant::DitAirLiteAttention => 230_000_000,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reconciliation {
    pub variant: Variant,
    pub formula: u64,
    pub reported: u64,
    /// `reported - formula`: what the quoted total spends outside the block rows.
    pub implied_overhead: f64,
}

/// Formula vs quoted totals at size B for every variant with a quoted total.
pub fn reconcile_reported() -> Vec<Reconciliation> {
    Variant::ALL
        .into_iter()
        .filter(|&v| reported_total(v) > 0)
        .map(|v| {
            let cfg = ModelConfig::preset(v, SizePreset::B);
            let formula = expected_counts(v, cfg.layers as u64, cfg.width as u64).total();
            let reported = reported_total(v);
            Reconciliation {
                variant: v,
                formula,
                reported,
                implied_overhead: reported as f64 - formula as f64,
            }
        })
        .collect()
}

/// Largest minus smallest implied overhead among `variants`.
pub fn overhead_spread(recs: &[Reconciliation], variants: &[Variant]) -> f64 {
    let vals: Vec<f64> = recs
        .iter()
        .filter(|r| variants.contains(&r.variant))
        .map(|r| r.implied_overhead)
        .collect();
    let max = vals.iter().copied().fold(f64::MIN, f64::max);
    let min = vals.iter().copied().fold(f64::MAX, f64::min);
    max - min
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_values() {
        let b = |v| expected_counts(v, 18, 1152).total();
        assert_eq!(b(Variant::Mmdit), 859_963_392);
        assert_eq!(b(Variant::DitAir), 302_579_712);
        assert_eq!(b(Variant::DitAirLiteFull), 31_850_496);
        assert_eq!(b(Variant::DitAirLiteAttention), 212_336_640);
        assert_eq!(expected_counts(Variant::Pixart, 1, 1).total(), 22);
        for n in [1, 5, 40] {
            assert_eq!(expected_counts(Variant::DitAirLiteFull, n, 7).total(), 24 * 49);
        }
    }

    #[test]
    fn closed_forms_by_variant() {
        for n in 1..6u64 {
            for d in [1u64, 3, 64] {
                let t = |v| expected_counts(v, n, d).total();
                assert_eq!(t(Variant::Pixart), (6 + 16 * n) * d * d);
                assert_eq!(t(Variant::Mmdit), 36 * n * d * d);
                assert_eq!(t(Variant::DitAir), (12 + 12 * n) * d * d);
                assert_eq!(t(Variant::DitAirLiteAttention), (16 + 8 * n) * d * d);
                assert_eq!(t(Variant::Mmdit) - t(Variant::MmditSharedAdaln), 12 * (n - 1) * d * d);
            }
        }
    }

    #[test]
    fn every_preset_matches() {
        for v in Variant::ALL {
            for p in SizePreset::ALL {
                let r = audit_config(&ModelConfig::preset(v, p)).unwrap();
                assert!(r.is_exact(), "{v} {p}: {:?} vs {:?}", r.expected, r.actual);
                assert_eq!(r.actual.total() + r.overhead.total(), r.total);
            }
        }
    }

    #[test]
    fn asymptotic_ratios() {
        let n = 1_000_000u64;
        let air = expected_counts(Variant::DitAir, n, 1).total() as f64;
        let mm = expected_counts(Variant::Mmdit, n, 1).total() as f64;
        let px = expected_counts(Variant::Pixart, n, 1).total() as f64;
        assert!((air / mm - 1.0 / 3.0).abs() < 1e-5);
        assert!((air / px - 0.75).abs() < 1e-5);
    }

    #[test]
    fn reported_overheads() {
        let recs = reconcile_reported();
        let get = |v| recs.iter().find(|r| r.variant == v).unwrap().implied_overhead;
        assert!((get(Variant::DitAir) - 18.42e6).abs() < 0.01e6);
        assert!((get(Variant::DitAirLiteFull) - 17.15e6).abs() < 0.01e6);
        assert!((get(Variant::DitAirLiteAttention) - 17.66e6).abs() < 0.01e6);
        let gap = reported_total(Variant::Mmdit) - reported_total(Variant::MmditSharedAdaln);
        let delta = 12 * 17 * 1152 * 1152;
        assert!(((gap as f64 - delta as f64) / delta as f64).abs() < 0.002);
    }

    /// Counts multiplications by walking naive loops of each matmul.
    fn enumerate_joint(n: u64, d: u64, l: u64) -> u64 {
        let mut count = 0u64;
        for _layer in 0..n {
            for _proj in 0..4 {
                for _tok in 0..l {
                    for _i in 0..d {
                        for _o in 0..d {
                            count += 1;
                        }
                    }
                }
            }
            for _q in 0..l {
                for _k in 0..l {
                    for _c in 0..d {
                        count += 2; // QK^T and PV
                    }
                }
            }
            for _tok in 0..l {
                for _i in 0..d {
                    for _h in 0..4 * d {
                        count += 2; // up and down
                    }
                }
            }
        }
        count
    }

    #[test]
    fn hand_count_small_case() {
        assert_eq!(enumerate_joint(1, 2, 2), 112);
        assert_eq!(flops_estimate(Variant::DitAir, 1, 2, 1, 1), 112);
        assert_eq!(flops_estimate(Variant::Mmdit, 3, 5, 2, 7), enumerate_joint(3, 5, 9));
    }

    #[test]
    fn parity_and_empty_text() {
        for (n, d, lt, li) in [(1, 1, 0, 1), (12, 768, 77, 256), (3, 10, 5, 5)] {
            assert_eq!(
                flops_estimate(Variant::DitAir, n, d, lt, li),
                flops_estimate(Variant::Mmdit, n, d, lt, li)
            );
        }
        let with = flops_breakdown(Variant::Pixart, 1, 4, 0, 3);
        let without_cross = FlopBreakdown {
            projections: 4 * 16 * 3,
            attention: 2 * 9 * 4,
            mlp: 8 * 16 * 3,
        };
        assert_eq!(with.projections - without_cross.projections, 2 * 16 * 3);
        assert_eq!(with.attention, without_cross.attention);
    }

    #[test]
    fn mismatch_reports_component() {
        let cfg = ModelConfig::preset(Variant::DitAir, SizePreset::S);
        let mut r = audit_config(&cfg).unwrap();
        r.actual.mlp += 1;
        match r.mismatch() {
            Some(Error::Audit { component, .. }) => assert_eq!(component, "mlp"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grouping() {
        assert_eq!(group(302_579_712), "302,579,712");
        assert_eq!(group(12), "12");
        assert_eq!(group(1000), "1,000");
    }
}
