use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::ffn_space::NodeKind;

/// Per-layer share of a [`CostReport`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub params_mha: u64,
    pub params_ffn: u64,
    pub mult_adds_mha: u64,
    pub mult_adds_ffn: u64,
}

/// Analytic parameter and Mult-Add counts.
///
/// Parameter counts include biases. `weights_*` count weight matrices only. MHA Mult-Adds
/// are `4Ld^2 + L^2 d` per layer; FFN Mult-Adds are `L * in * out` per linear node plus
/// `L * width` per elementwise primitive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub seq_len: usize,
    pub params_mha: u64,
    pub params_ffn: u64,
    pub params_embedding: u64,
    /// Layer norms and prediction heads.
    pub params_other: u64,
    pub params_total: u64,
    pub weights_mha: u64,
    pub weights_ffn: u64,
    pub mult_adds_mha: u64,
    pub mult_adds_ffn: u64,
    pub mult_adds_total: u64,
    pub per_layer: Vec<LayerCost>,
}

impl CostReport {
    /// FFN over MHA weight-matrix parameters.
    pub fn ffn_mha_weight_ratio(&self) -> f64 {
        self.weights_ffn as f64 / self.weights_mha as f64
    }
}

/// Parameter counts, with Mult-Adds at the configured maximum length.
pub fn count_params(cfg: &ModelConfig) -> CostReport {
    count_mult_adds(cfg, cfg.max_len)
}

/// Full cost report at sequence length `seq_len`.
pub fn count_mult_adds(cfg: &ModelConfig, seq_len: usize) -> CostReport {
    let d = cfg.hidden as u64;
    let l = seq_len as u64;
    let mut per_layer = Vec::with_capacity(cfg.genotype.layers.len());
    let (mut weights_mha, mut weights_ffn) = (0, 0);
    for (i, spec) in cfg.genotype.layers.iter().enumerate() {
        let w = spec.width(cfg.d_ref);
        let widths = spec.node_widths(cfg.hidden, w);
        let w = w as u64;
        let (mut params_ffn, mut ma_ffn, mut wts) = (0, 0, 0);
        for (node, &width) in spec.nodes.iter().zip(&widths) {
            match node.kind {
                NodeKind::Input => {}
                NodeKind::Linear { expand } => {
                    params_ffn += d * w + if expand { w } else { d };
                    wts += d * w;
                    ma_ffn += l * d * w;
                }
                NodeKind::Math(_) => ma_ffn += l * width as u64,
            }
        }
        let stack = spec.stack as u64;
        weights_mha += 4 * d * d;
        weights_ffn += stack * wts;
        per_layer.push(LayerCost {
            layer: i,
            params_mha: 4 * d * d + 4 * d,
            params_ffn: stack * params_ffn,
            mult_adds_mha: 4 * l * d * d + l * l * d,
            mult_adds_ffn: stack * ma_ffn,
        });
    }
    let sum = |f: fn(&LayerCost) -> u64| per_layer.iter().map(f).sum::<u64>();
    let params_mha = sum(|c| c.params_mha);
    let params_ffn = sum(|c| c.params_ffn);
    let mult_adds_mha = sum(|c| c.mult_adds_mha);
    let mult_adds_ffn = sum(|c| c.mult_adds_ffn);
    let (v, f) = (cfg.vocab_size as u64, cfg.embed_dim as u64);
    let params_embedding = v * f + f * d + d + cfg.max_len as u64 * d + 2 * d;
    let heads: u64 = cfg
        .task_heads
        .iter()
        .map(|h| d * h.width as u64 + h.width as u64)
        .sum::<u64>()
        + if cfg.mlm_head { d * v + v } else { 0 };
    let params_other = cfg.num_layers as u64 * 4 * d + heads;
    CostReport {
        seq_len,
        params_mha,
        params_ffn,
        params_embedding,
        params_other,
        params_total: params_mha + params_ffn + params_embedding + params_other,
        weights_mha,
        weights_ffn,
        mult_adds_mha,
        mult_adds_ffn,
        mult_adds_total: mult_adds_mha + mult_adds_ffn,
        per_layer,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadSpec, Model};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn totals_match_instantiated_parameters() {
        let cfg = ModelConfig::desk_student()
            .with_heads(vec![HeadSpec::new("a", 2), HeadSpec::new("c", 1)], true)
            .with_genotype(crate::ffn_space::FfnGenotype::supernet(2));
        let m = Model::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(count_params(&cfg).params_total, m.num_params() as u64);
    }

    #[test]
    fn parts_sum_to_totals() {
        let r = count_mult_adds(&ModelConfig::desk_teacher(), 16);
        assert_eq!(
            r.params_total,
            r.params_mha + r.params_ffn + r.params_embedding + r.params_other
        );
        assert_eq!(r.mult_adds_total, r.mult_adds_mha + r.mult_adds_ffn);
    }
}
