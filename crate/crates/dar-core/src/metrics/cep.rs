//! Core Effect Percentage: normalized interventional effect of the core
//! component on a probed model output.
//!
//! For each example the core and spurious components are independently
//! replaced with values from `m` donor examples; the effect of a component on
//! a probed element is the donor-averaged L1 change of that element, and
//! CEP = E[ E_core / (E_core + E_spu) ] * 100 over all (example, element)
//! pairs whose total effect clears the dead-element threshold.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::data::{self, Component, DominoExample, GenConfig};
use crate::model::{self, ModelConfig};
use crate::par;
use crate::tensor::{ParamSet, Tape};

/// (example, element) pairs with `E_core + E_spu` below this are excluded
/// (dead ReLU channels would otherwise contribute 0/0).
pub const EXCLUSION_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSpace {
    Probabilities,
    Logits,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct InterventionCfg {
    /// Donors per component per example.
    pub donors: usize,
    /// Relabel which component counts as "core" in the ratio (same donors).
    pub swap_components: bool,
    /// What the prediction probe reads.
    pub prediction_space: PredictionSpace,
    pub seed: u64,
}

impl Default for InterventionCfg {
    fn default() -> Self {
        InterventionCfg {
            donors: 5,
            swap_components: false,
            prediction_space: PredictionSpace::Probabilities,
            seed: 0xCE9,
        }
    }
}

/// Per-element aggregate: donor-averaged effects averaged over examples, the
/// per-element CEP over valid examples, and validity counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ElementEffect {
    pub element: usize,
    pub e_core: f64,
    pub e_spu: f64,
    pub cep: Option<f64>,
    pub valid: usize,
    pub total: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CepOutcome {
    /// Mean of 100 * E_core/(E_core+E_spu) over all valid (example, element)
    /// pairs.
    pub aggregate: f64,
    pub elements: Vec<ElementEffect>,
    pub excluded_pairs: usize,
    pub total_pairs: usize,
}

impl CepOutcome {
    /// Defined per-element CEP values (histogram input).
    pub fn element_values(&self) -> Vec<f64> {
        self.elements.iter().filter_map(|e| e.cep).collect()
    }
}

struct Accum {
    sum_core: f64,
    sum_spu: f64,
    sum_ratio: f64,
    valid: usize,
    total: usize,
}

/// Generic CEP engine. `eval` maps a batch of images to, per image, a list of
/// probed elements, each a vector of entries; the engine feeds it
/// `[x, m core-counterfactuals, m spurious-counterfactuals]` per example.
pub fn cep<E>(
    gen: &GenConfig,
    split: &[DominoExample],
    cfg: &InterventionCfg,
    eval: E,
) -> Result<CepOutcome, MetricError>
where
    E: Fn(&[Vec<f32>]) -> Result<Vec<Vec<Vec<f64>>>, MetricError> + Sync,
{
    if split.is_empty() {
        return Err(MetricError::Contract("CEP over an empty split".into()));
    }
    if cfg.donors == 0 {
        return Err(MetricError::Contract("CEP needs at least one donor".into()));
    }
    let m = cfg.donors;
    let per_example = par::map_indexed(split.len(), |i| -> Result<Vec<(f64, f64)>, MetricError> {
        let x = &split[i];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let core_donors = data::sample_donors(split.len(), Some(i), m, &mut rng)?;
        let spu_donors = data::sample_donors(split.len(), Some(i), m, &mut rng)?;

        let mut batch = Vec::with_capacity(1 + 2 * m);
        batch.push(x.image.clone());
        for &d in &core_donors {
            batch.push(data::counterfactual(gen, x, &split[d], Component::Core));
        }
        for &d in &spu_donors {
            batch.push(data::counterfactual(gen, x, &split[d], Component::Spurious));
        }
        let outs = eval(&batch)?;
        if outs.len() != batch.len() {
            return Err(MetricError::Contract(format!(
                "probe returned {} outputs for {} images",
                outs.len(),
                batch.len()
            )));
        }
        let n_elements = outs[0].len();
        let inv_m = 1.0 / m as f64;
        let mut effects = Vec::with_capacity(n_elements);
        for e in 0..n_elements {
            let base = &outs[0][e];
            let l1 = |other: &Vec<f64>| -> f64 {
                base.iter().zip(other).map(|(a, b)| (a - b).abs()).sum()
            };
            let mut e_core = 0.0;
            for j in 0..m {
                e_core += l1(&outs[1 + j][e]);
            }
            let mut e_spu = 0.0;
            for j in 0..m {
                e_spu += l1(&outs[1 + m + j][e]);
            }
            e_core *= inv_m;
            e_spu *= inv_m;
            if cfg.swap_components {
                std::mem::swap(&mut e_core, &mut e_spu);
            }
            effects.push((e_core, e_spu));
        }
        Ok(effects)
    });

    let mut accums: Vec<Accum> = Vec::new();
    let (mut ratio_sum, mut valid_pairs, mut total_pairs) = (0.0f64, 0usize, 0usize);
    for per in per_example {
        let effects = per?;
        if accums.is_empty() {
            accums = (0..effects.len())
                .map(|_| Accum { sum_core: 0.0, sum_spu: 0.0, sum_ratio: 0.0, valid: 0, total: 0 })
                .collect();
        }
        if effects.len() != accums.len() {
            return Err(MetricError::Contract("probe element count varies across examples".into()));
        }
        for (e, &(ec, es)) in effects.iter().enumerate() {
            let acc = &mut accums[e];
            acc.sum_core += ec;
            acc.sum_spu += es;
            acc.total += 1;
            total_pairs += 1;
            if ec + es >= EXCLUSION_EPS {
                let r = 100.0 * ec / (ec + es);
                acc.sum_ratio += r;
                acc.valid += 1;
                ratio_sum += r;
                valid_pairs += 1;
            }
        }
    }
    if valid_pairs == 0 {
        return Err(MetricError::Undefined(
            "every (example, element) pair fell below the CEP effect threshold".into(),
        ));
    }
    let elements = accums
        .into_iter()
        .enumerate()
        .map(|(e, a)| ElementEffect {
            element: e,
            e_core: a.sum_core / a.total as f64,
            e_spu: a.sum_spu / a.total as f64,
            cep: (a.valid > 0).then(|| a.sum_ratio / a.valid as f64),
            valid: a.valid,
            total: a.total,
        })
        .collect();
    Ok(CepOutcome {
        aggregate: ratio_sum / valid_pairs as f64,
        elements,
        excluded_pairs: total_pairs - valid_pairs,
        total_pairs,
    })
}

/// Softmax in f64 with max subtraction.
fn softmax64(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - mx).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / denom).collect()
}

/// CEP at the four probe granularities, sharing one forward pass per image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CepReport {
    pub prediction: CepOutcome,
    pub feature: CepOutcome,
    pub feature_map: CepOutcome,
    pub pixel: CepOutcome,
}

/// Evaluate CEP for a trained model on a split, at all probe levels at once:
/// the prediction probe reads the class output (softmax probabilities by
/// default), the feature probe each aggregated feature, the feature-map probe
/// each channel of the final activation map, and the pixel probe each spatial
/// entry of each channel.
pub fn cep_report(
    cfg: &ModelConfig,
    params: &ParamSet<f32>,
    gen: &GenConfig,
    split: &[DominoExample],
    icfg: &InterventionCfg,
) -> Result<CepReport, MetricError> {
    let (d, mh, mw) = cfg.map_dims();
    let hw = mh * mw;
    let classes = cfg.classes;
    let mut frozen = params.clone();
    frozen.freeze_all();

    let eval = |images: &[Vec<f32>]| -> Result<Vec<Vec<Vec<f64>>>, MetricError> {
        let mut tape: Tape<f32> = Tape::new();
        let bound = model::bind(&mut tape, &frozen)?;
        let refs: Vec<&[f32]> = images.iter().map(|v| v.as_slice()).collect();
        let x = model::batch_input(&mut tape, &refs, cfg.input)?;
        let out = model::forward(&mut tape, cfg, &bound, x)?;
        let logits = tape.data(out.logits);
        let features = tape.data(out.features);
        let map = tape.data(out.map);
        let mut per_image = Vec::with_capacity(images.len());
        for b in 0..images.len() {
            let mut elements: Vec<Vec<f64>> = Vec::with_capacity(1 + 2 * d + d * hw);
            let logit_row: Vec<f64> = logits[b * classes..(b + 1) * classes].iter().map(|&v| v as f64).collect();
            elements.push(match icfg.prediction_space {
                PredictionSpace::Probabilities => softmax64(&logit_row),
                PredictionSpace::Logits => logit_row,
            });
            for j in 0..d {
                elements.push(vec![features[b * d + j] as f64]);
            }
            let map_b = &map[b * d * hw..(b + 1) * d * hw];
            for j in 0..d {
                elements.push(map_b[j * hw..(j + 1) * hw].iter().map(|&v| v as f64).collect());
            }
            for idx in 0..d * hw {
                elements.push(vec![map_b[idx] as f64]);
            }
            per_image.push(elements);
        }
        Ok(per_image)
    };

    let combined = cep(gen, split, icfg, eval)?;
    let split_outcome = |lo: usize, hi: usize| -> Result<CepOutcome, MetricError> {
        let mut elements: Vec<ElementEffect> = combined.elements[lo..hi].to_vec();
        let (mut ratio_sum, mut valid, mut total, mut excluded) = (0.0f64, 0usize, 0usize, 0usize);
        for (i, e) in elements.iter_mut().enumerate() {
            e.element = i;
            if let Some(c) = e.cep {
                ratio_sum += c * e.valid as f64;
            }
            valid += e.valid;
            total += e.total;
            excluded += e.total - e.valid;
        }
        if valid == 0 {
            return Err(MetricError::Undefined("every probed element excluded".into()));
        }
        Ok(CepOutcome { aggregate: ratio_sum / valid as f64, elements, excluded_pairs: excluded, total_pairs: total })
    };

    Ok(CepReport {
        prediction: split_outcome(0, 1)?,
        feature: split_outcome(1, 1 + d)?,
        feature_map: split_outcome(1 + d, 1 + 2 * d)?,
        pixel: split_outcome(1 + 2 * d, 1 + 2 * d + d * hw)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenConfig};

    fn gen_cfg() -> GenConfig {
        GenConfig { train: 32, target: 16, val: 16, test: 32, ..GenConfig::default() }
    }

    /// Probe reading a single half of the image, as one element.
    fn half_reader(gen: &GenConfig, bottom: bool) -> impl Fn(&[Vec<f32>]) -> Result<Vec<Vec<Vec<f64>>>, MetricError> + Sync {
        let half = gen.panel * gen.panel;
        move |images| {
            Ok(images
                .iter()
                .map(|img| {
                    let slice = if bottom { &img[half..] } else { &img[..half] };
                    vec![slice.iter().map(|&v| v as f64).collect()]
                })
                .collect())
        }
    }

    #[test]
    fn spurious_blind_probe_scores_exactly_100() {
        let gen = gen_cfg();
        let split = generate(&gen, 1).unwrap().test;
        let cfg = InterventionCfg::default();
        let out = cep(&gen, &split, &cfg, half_reader(&gen, true)).unwrap();
        assert_eq!(out.aggregate, 100.0);
        assert_eq!(out.excluded_pairs, 0);
    }

    #[test]
    fn core_blind_probe_scores_exactly_0() {
        let gen = gen_cfg();
        let split = generate(&gen, 1).unwrap().test;
        let cfg = InterventionCfg::default();
        let out = cep(&gen, &split, &cfg, half_reader(&gen, false)).unwrap();
        assert_eq!(out.aggregate, 0.0);
    }

    #[test]
    fn hand_constructed_effect_ratio_is_75() {
        // Model output (0.2 * top mean, 0.6 * bottom mean); donors flip each
        // half between all-zeros and all-ones, so the interventions move the
        // two output components by exactly 0.2 and 0.6.
        let gen = gen_cfg();
        let half = gen.panel * gen.panel;
        let zeros = DominoExample { image: vec![0.0; 2 * half], label: 0, attribute: 0 };
        let ones = DominoExample { image: vec![1.0; 2 * half], label: 1, attribute: 1 };
        let split = vec![zeros, ones];
        let cfg = InterventionCfg { donors: 1, ..InterventionCfg::default() };
        let probe = move |images: &[Vec<f32>]| -> Result<Vec<Vec<Vec<f64>>>, MetricError> {
            Ok(images
                .iter()
                .map(|img| {
                    let top: f64 = img[..half].iter().map(|&v| v as f64).sum::<f64>() / half as f64;
                    let bottom: f64 = img[half..].iter().map(|&v| v as f64).sum::<f64>() / half as f64;
                    vec![vec![0.2 * top, 0.6 * bottom]]
                })
                .collect())
        };
        let out = cep(&gen, &split, &cfg, probe).unwrap();
        assert!((out.aggregate - 75.0).abs() < 1e-9, "{}", out.aggregate);
    }

    #[test]
    fn component_swap_maps_cep_to_complement() {
        let gen = gen_cfg();
        let split = generate(&gen, 2).unwrap().test;
        let probe = |images: &[Vec<f32>]| -> Result<Vec<Vec<Vec<f64>>>, MetricError> {
            let half = 16 * 16;
            Ok(images
                .iter()
                .map(|img| {
                    // Mixed reader: weighs the two halves unevenly.
                    let top: f64 = img[..half].iter().map(|&v| v as f64).sum();
                    let bottom: f64 = img[half..].iter().map(|&v| v as f64).sum();
                    vec![vec![top + 0.25 * bottom], vec![bottom], vec![0.5 * top + bottom]]
                })
                .collect())
        };
        let plain = cep(&gen, &split, &InterventionCfg::default(), probe).unwrap();
        let swapped_cfg = InterventionCfg { swap_components: true, ..InterventionCfg::default() };
        let swapped = cep(&gen, &split, &swapped_cfg, probe).unwrap();
        assert!((plain.aggregate + swapped.aggregate - 100.0).abs() < 1e-9);
        assert_eq!(plain.excluded_pairs, swapped.excluded_pairs);
    }

    #[test]
    fn dead_probe_is_a_metric_error() {
        let gen = gen_cfg();
        let split = generate(&gen, 3).unwrap().test;
        let probe = |images: &[Vec<f32>]| -> Result<Vec<Vec<Vec<f64>>>, MetricError> {
            Ok(images.iter().map(|_| vec![vec![1.0]]).collect())
        };
        assert!(matches!(
            cep(&gen, &split, &InterventionCfg::default(), probe),
            Err(MetricError::Undefined(_))
        ));
    }

    #[test]
    fn cep_is_deterministic_in_seed() {
        let gen = gen_cfg();
        let split = generate(&gen, 4).unwrap().test;
        let cfg = InterventionCfg::default();
        let a = cep(&gen, &split, &cfg, half_reader(&gen, true)).unwrap();
        let b = cep(&gen, &split, &cfg, half_reader(&gen, true)).unwrap();
        assert_eq!(a.aggregate.to_bits(), b.aggregate.to_bits());
    }

    #[test]
    fn model_report_covers_all_probe_levels() {
        use crate::model::{init_params, AggregatorKind, BackbonePreset, HeadKind, ModelConfig};
        let gen = gen_cfg();
        let split = generate(&gen, 5).unwrap().test;
        let cfg = ModelConfig {
            preset: BackbonePreset::Small,
            input: gen.image_dims(),
            classes: 4,
            aggregator: AggregatorKind::Gap,
            head: HeadKind::Linear,
        };
        let params = init_params::<f32>(&cfg, 1).unwrap();
        let icfg = InterventionCfg { donors: 2, ..InterventionCfg::default() };
        let report = cep_report(&cfg, &params, &gen, &split[..8], &icfg).unwrap();
        let (d, h, w) = cfg.map_dims();
        assert_eq!(report.prediction.elements.len(), 1);
        assert_eq!(report.feature.elements.len(), d);
        assert_eq!(report.feature_map.elements.len(), d);
        assert_eq!(report.pixel.elements.len(), d * h * w);
        for out in [&report.prediction, &report.feature, &report.feature_map, &report.pixel] {
            assert!(out.aggregate >= 0.0 && out.aggregate <= 100.0);
        }
    }
}
