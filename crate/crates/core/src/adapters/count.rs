//! Trainable-parameter accounting for an adapter config over a manifest.

use serde::Serialize;

use crate::adapters::config::{AdapterConfig, Method};
use crate::adapters::manifest::{AdaptPolicy, LayerManifest, ManifestEntry};
use crate::adapters::styleinject::Variant;
use crate::error::{Error, Result};

/// Adapter chosen for one manifest layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Lora,
    StyleInject { styles: usize, variant: Variant },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedAdapter {
    pub entry: ManifestEntry,
    pub kind: AdapterKind,
}

/// Decides which manifest layers receive which adapter.
///
/// Without `targets`, every non-frozen layer is adapted. With `targets`, only
/// the listed layers are; naming a missing or frozen layer is a config error.
/// `Method::Lora` puts plain LoRA on every adapted layer; the routed methods
/// honour each layer's policy.
pub fn plan_adapters(config: &AdapterConfig, manifest: &LayerManifest) -> Result<Vec<PlannedAdapter>> {
    config.validate()?;
    if let Some(targets) = &config.targets {
        for t in targets {
            match manifest.get(t) {
                None => return Err(Error::Config(format!("target layer `{t}` is not in the manifest"))),
                Some(e) if e.policy == AdaptPolicy::Frozen => {
                    return Err(Error::Config(format!("target layer `{t}` is marked frozen")))
                }
                Some(_) => {}
            }
        }
    }
    let wanted = |e: &ManifestEntry| match &config.targets {
        Some(t) => t.iter().any(|n| n == &e.name),
        None => e.policy != AdaptPolicy::Frozen,
    };
    let routed = match config.method {
        Method::Lora => None,
        Method::StyleInject => Some(Variant::Full),
        Method::Sta => Some(Variant::Full),
        Method::Dma => Some(Variant::DmaOnly),
    };
    Ok(manifest
        .entries()
        .iter()
        .filter(|e| wanted(e))
        .map(|e| {
            let kind = match (e.policy, routed) {
                (AdaptPolicy::StyleInject, Some(variant)) => AdapterKind::StyleInject {
                    styles: config.effective_styles(),
                    variant,
                },
                _ => AdapterKind::Lora,
            };
            PlannedAdapter { entry: e.clone(), kind }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub name: String,
    pub adapter: String,
    pub d_in: usize,
    pub d_out: usize,
    /// `(component, count)` pairs, e.g. `("a", n·r·d_in)`.
    pub components: Vec<(String, usize)>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamBreakdown {
    pub method: String,
    pub rank: usize,
    pub styles: usize,
    pub layers: Vec<LayerCount>,
    pub total: usize,
}

/// Component sizes of one planned adapter at rank `r`.
pub fn adapter_components(plan: &PlannedAdapter, r: usize) -> Vec<(String, usize)> {
    let (k, d) = (plan.entry.d_in, plan.entry.d_out);
    match plan.kind {
        AdapterKind::Lora => vec![("a".into(), r * k), ("b".into(), d * r)],
        AdapterKind::StyleInject { styles: n, variant } => {
            let mut c = vec![
                ("a".into(), n * r * k),
                ("b".into(), d * r),
                ("router".into(), k * n + n),
            ];
            if variant == Variant::Full {
                c.push(("hypernet".into(), r * d + d));
            }
            c
        }
    }
}

/// Counts without building anything, so the rank bound checked at
/// attachment time is not enforced here.
pub fn count_params(config: &AdapterConfig, manifest: &LayerManifest) -> Result<ParamBreakdown> {
    let plans = plan_adapters(config, manifest)?;
    let layers: Vec<LayerCount> = plans
        .iter()
        .map(|p| {
            let components = adapter_components(p, config.rank);
            LayerCount {
                name: p.entry.name.clone(),
                adapter: match p.kind {
                    AdapterKind::Lora => "lora".into(),
                    AdapterKind::StyleInject { variant: Variant::Full, .. } => "styleinject".into(),
                    AdapterKind::StyleInject { variant: Variant::DmaOnly, .. } => "dma".into(),
                },
                d_in: p.entry.d_in,
                d_out: p.entry.d_out,
                total: components.iter().map(|(_, c)| c).sum(),
                components,
            }
        })
        .collect();
    Ok(ParamBreakdown {
        method: config.method.to_string(),
        rank: config.rank,
        styles: config.effective_styles(),
        total: layers.iter().map(|l| l.total).sum(),
        layers,
    })
}

/// Millions with two decimals, rounding half to even: `3188736 -> "3.19M"`.
pub fn format_millions(count: usize) -> String {
    let mut hundredths = count / 10_000;
    let rem = count % 10_000;
    if rem > 5_000 || (rem == 5_000 && hundredths % 2 == 1) {
        hundredths += 1;
    }
    format!("{}.{:02}M", hundredths / 100, hundredths % 100)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(policy: AdaptPolicy) -> LayerManifest {
        LayerManifest::parse(&format!("l linear 4 4 {policy}\n")).unwrap()
    }

    #[test]
    fn single_lora_layer() {
        let b = count_params(&AdapterConfig::lora(2), &single(AdaptPolicy::Lora)).unwrap();
        assert_eq!(b.total, 16);
    }

    #[test]
    fn styleinject_components() {
        let b = count_params(&AdapterConfig::styleinject(2, 1), &single(AdaptPolicy::StyleInject)).unwrap();
        assert_eq!(b.total, 8 + 8 + 5 + 12);
        let b = count_params(
            &AdapterConfig::styleinject(2, 3).with_method(Method::Dma),
            &single(AdaptPolicy::StyleInject),
        )
        .unwrap();
        assert_eq!(b.total, 24 + 8 + 15);
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(format_millions(3_188_736), "3.19M");
        assert_eq!(format_millions(12_754_944), "12.75M");
        assert_eq!(format_millions(51_019_776), "51.02M");
        assert_eq!(format_millions(0), "0.00M");
        assert_eq!(format_millions(15_000), "0.02M");
        assert_eq!(format_millions(25_000), "0.02M");
        assert_eq!(format_millions(25_001), "0.03M");
    }

    #[test]
    fn bad_targets() {
        let m = LayerManifest::parse("a linear 4 4 lora\nb linear 4 4 frozen\n").unwrap();
        assert!(matches!(count_params(&AdapterConfig::lora(2).with_targets(["zz"]), &m), Err(Error::Config(_))));
        assert!(matches!(count_params(&AdapterConfig::lora(2).with_targets(["b"]), &m), Err(Error::Config(_))));
        let empty: [&str; 0] = [];
        assert_eq!(count_params(&AdapterConfig::lora(2).with_targets(empty), &m).unwrap().total, 0);
    }
}
