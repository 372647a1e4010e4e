use std::collections::BTreeMap;

use serde::Serialize;

use super::{Model, Targets};
use crate::nn::Module;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PartSummary {
    pub name: String,
    pub params: u64,
    /// Multiply-accumulates for one image.
    pub flops: u64,
}

/// Parameter and FLOP accounting of a built model. FLOPs are
/// multiply-accumulates of matrix products and convolutions; normalization,
/// softmax and elementwise work are not counted.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSummary {
    pub variant: String,
    pub resolution: usize,
    pub num_classes: usize,
    pub params: u64,
    pub flops: u64,
    pub params_m: f64,
    pub flops_g: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets: Option<Targets>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params_deviation_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flops_deviation_pct: Option<f64>,
    pub parts: Vec<PartSummary>,
}

/// Part a parameter is accounted under: `stem`, `head`, or `stageN.conv` /
/// `stageN.attn`.
fn part_of(name: &str) -> String {
    let mut it = name.split('.');
    match (it.next(), it.next(), it.next()) {
        (Some(s), Some(_block), Some(kind)) if s.starts_with("stage") => format!("{s}.{kind}"),
        (Some(top), _, _) => top.to_string(),
        _ => name.to_string(),
    }
}

fn pct(measured: f64, target: f64) -> f64 {
    100.0 * (measured - target) / target
}

impl ModelSummary {
    pub fn of<T: Scalar>(model: &Model<T>) -> Self {
        let mut params: BTreeMap<String, u64> = BTreeMap::new();
        model.visit_params(&mut |p| *params.entry(part_of(&p.name)).or_default() += p.numel() as u64);

        let res = model.options.resolution;
        let mut parts = vec![PartSummary {
            name: "stem".into(),
            params: params.remove("stem").unwrap_or(0),
            flops: model.stem.macs((res, res)),
        }];
        for (i, stage) in model.stages.iter().enumerate() {
            let (mut conv, mut attn) = (0, 0);
            let mut side = stage.input_side;
            for block in &stage.blocks {
                conv += block.conv.macs((side, side));
                attn += block.attn.macs();
                side = stage.output_side;
            }
            for (kind, flops) in [("conv", conv), ("attn", attn)] {
                let name = format!("stage{}.{kind}", i + 1);
                let params = params.remove(&name).unwrap_or(0);
                parts.push(PartSummary { name, params, flops });
            }
        }
        let head_flops = (model.head.fc.in_features() * model.head.fc.out_features()) as u64;
        parts.push(PartSummary { name: "head".into(), params: params.remove("head").unwrap_or(0), flops: head_flops });
        assert!(params.is_empty(), "parameters outside every summary part: {params:?}");

        let total_params: u64 = parts.iter().map(|p| p.params).sum();
        let total_flops: u64 = parts.iter().map(|p| p.flops).sum();
        let (params_m, flops_g) = (total_params as f64 / 1e6, total_flops as f64 / 1e9);
        let targets = model.config.targets.filter(|_| res == 224 && model.options.num_classes == 1000);
        ModelSummary {
            variant: model.config.name.clone(),
            resolution: res,
            num_classes: model.options.num_classes,
            params: total_params,
            flops: total_flops,
            params_m,
            flops_g,
            targets,
            params_deviation_pct: targets.map(|t| pct(params_m, t.params_m)),
            flops_deviation_pct: targets.map(|t| pct(flops_g, t.flops_g)),
            parts,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelOptions, VariantConfig};

    #[test]
    fn part_names() {
        assert_eq!(part_of("stem.conv1.weight"), "stem");
        assert_eq!(part_of("stage3.block2.attn.branch1.qkv.weight"), "stage3.attn");
        assert_eq!(part_of("head.fc.bias"), "head");
    }

    #[test]
    fn totals_are_sums_of_parts_and_match_the_registry() {
        let m = Model::<f32>::build(&VariantConfig::femto(), ModelOptions::default()).unwrap();
        let s = m.count_params();
        assert_eq!(s.params, m.param_count() as u64);
        assert_eq!(s.parts.len(), 1 + 2 * 4 + 1);
        assert_eq!(s.flops, s.parts.iter().map(|p| p.flops).sum::<u64>());
        assert!(s.targets.is_some());
    }

    #[test]
    fn flops_grow_with_resolution_and_param_ratios_do_not() {
        let build = |cfg: &VariantConfig, res| {
            Model::<f32>::build(cfg, ModelOptions { resolution: res, ..Default::default() }).unwrap().count_params()
        };
        let (f224, f448) = (build(&VariantConfig::femto(), 224), build(&VariantConfig::femto(), 448));
        assert!(f448.flops > f224.flops);
        let (p224, p448) = (build(&VariantConfig::pico(), 224), build(&VariantConfig::pico(), 448));
        let r224 = p224.params as f64 / f224.params as f64;
        let r448 = p448.params as f64 / f448.params as f64;
        assert!((r224 - r448).abs() < 1e-12);
    }
}
