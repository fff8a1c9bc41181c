use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabelLayout, PipelineError, PredictionSet, Predictor};
use crate::instances::{Family, Instance, KnapsackInstance, LotSizingInstance};
use crate::milp::ConstraintTag;
use crate::nn::Tensor;

/// `c·part/total`, rounded; a zero total scales by the item share instead.
fn rescale(c: i64, part: i64, total: i64, share: f64) -> i64 {
    let ratio = if total > 0 { part as f64 / total as f64 } else { share };
    (c as f64 * ratio).round() as i64
}

/// The instance restricted to `items` (sorted), with capacities scaled by the
/// selected share of demand (lot sizing) or weight (knapsack).
pub fn sub_instance(inst: &Instance, items: &[usize]) -> Instance {
    let share = items.len() as f64 / inst.items() as f64;
    match inst {
        Instance::Mclsp(m) => {
            let pick = |src: &Vec<Vec<i64>>| items.iter().map(|&i| src[i].clone()).collect::<Vec<_>>();
            let capacity = (0..m.periods)
                .map(|t| {
                    let part = items.iter().map(|&i| m.demand[i][t]).sum();
                    rescale(m.capacity[t], part, m.period_demand(t), share)
                })
                .collect();
            Instance::Mclsp(LotSizingInstance {
                items: items.len(),
                periods: m.periods,
                seed: m.seed,
                demand: pick(&m.demand),
                prod_cost: pick(&m.prod_cost),
                setup_cost: pick(&m.setup_cost),
                hold_cost: pick(&m.hold_cost),
                capacity,
            })
        }
        Instance::Msmk(k) => {
            let capacity = (0..k.resources)
                .map(|j| {
                    (0..k.periods)
                        .map(|t| {
                            let part = items.iter().map(|&i| k.weight[i][j][t]).sum();
                            rescale(k.capacity[j][t], part, k.weight_sum(j, t), share)
                        })
                        .collect()
                })
                .collect();
            Instance::Msmk(KnapsackInstance {
                items: items.len(),
                periods: k.periods,
                resources: k.resources,
                seed: k.seed,
                profit: items.iter().map(|&i| k.profit[i].clone()).collect(),
                bonus: items.iter().map(|&i| k.bonus[i].clone()).collect(),
                weight: items.iter().map(|&i| k.weight[i].clone()).collect(),
                capacity,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemwiseOutput {
    pub predictions: PredictionSet,
    /// Passes that included each item.
    pub counts: Vec<usize>,
    pub passes: usize,
}

/// Predicts an instance with `I` items using a predictor for `sub_items`
/// items, averaging over random item subsets until every item has been
/// covered more than `delta` times.
pub fn itemwise_predict(
    predictor: &dyn Predictor,
    inst: &Instance,
    sub_items: usize,
    delta: usize,
    seed: u64,
) -> Result<ItemwiseOutput, PipelineError> {
    inst.validate()?;
    let ni = inst.items();
    if sub_items == 0 || ni < sub_items {
        return Err(PipelineError::Usage(format!(
            "item-wise prediction needs 1 <= I^M <= I, got I^M={sub_items} and I={ni}"
        )));
    }
    let nt = inst.periods();
    let layout = LabelLayout::of(inst);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; ni];
    // running means: decisions and item-specific tight rows per (item, t);
    // shared tight rows per tag
    let mut decision = vec![0.0; ni * nt];
    let mut item_tight = vec![0.0; ni * nt];
    let mut shared: BTreeMap<ConstraintTag, f64> = BTreeMap::new();
    let mut passes = 0usize;
    while counts.iter().any(|&g| g <= delta) {
        let mut subset = rand::seq::index::sample(&mut rng, ni, sub_items).into_vec();
        subset.sort_unstable();
        let sub = sub_instance(inst, &subset);
        let pred = predictor.predict(&sub)?;
        passes += 1;
        let sub_layout = pred.layout;
        for (k, &i) in subset.iter().enumerate() {
            counts[i] += 1;
            let n = counts[i] as f64;
            for t in 0..nt {
                let d = &mut decision[i * nt + t];
                *d += (pred.probs.get(t, k) - *d) / n;
                if layout.family == Family::Mclsp {
                    let v = &mut item_tight[i * nt + t];
                    *v += (pred.probs.get(t, sub_items + k) - *v) / n;
                }
            }
        }
        for t in 0..nt {
            for (k, tag) in sub_layout.tight_tags(t).into_iter().enumerate() {
                if !matches!(tag, ConstraintTag::SetupLink { .. }) {
                    let p = pred.probs.get(t, sub_items + k);
                    let m = shared.entry(tag).or_insert(0.0);
                    *m += (p - *m) / passes as f64;
                }
            }
        }
    }
    let width = layout.width();
    let mut probs = Tensor::zeros(nt, width);
    for t in 0..nt {
        for i in 0..ni {
            probs.data[t * width + i] = decision[i * nt + t];
        }
        for (k, tag) in layout.tight_tags(t).iter().enumerate() {
            probs.data[t * width + ni + k] = match *tag {
                ConstraintTag::SetupLink { item, period } => item_tight[item * nt + period],
                _ => shared[tag],
            };
        }
    }
    Ok(ItemwiseOutput {
        predictions: PredictionSet { layout, probs },
        counts,
        passes,
    })
}

/// Wraps a predictor trained on `sub_items` items so it can serve larger
/// instances through [`itemwise_predict`].
pub struct ItemwisePredictor<'a> {
    pub inner: &'a dyn Predictor,
    pub sub_items: usize,
    pub delta: usize,
    pub seed: u64,
}

impl Predictor for ItemwisePredictor<'_> {
    fn predict(&self, inst: &Instance) -> Result<PredictionSet, PipelineError> {
        Ok(itemwise_predict(self.inner, inst, self.sub_items, self.delta, self.seed)?.predictions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::GenConfig;
    use crate::pipeline::RandomPredictor;

    #[test]
    fn capacity_follows_selected_demand() {
        let inst = Instance::Mclsp(LotSizingInstance {
            items: 2,
            periods: 1,
            seed: None,
            demand: vec![vec![10], vec![10]],
            prod_cost: vec![vec![1], vec![1]],
            setup_cost: vec![vec![1], vec![1]],
            hold_cost: vec![vec![1], vec![1]],
            capacity: vec![40],
        });
        let Instance::Mclsp(sub) = sub_instance(&inst, &[1]) else { panic!() };
        assert_eq!(sub.capacity, vec![20]);
        assert_eq!(sub.items, 1);
    }

    #[test]
    fn knapsack_capacity_follows_selected_weight() {
        let inst = GenConfig::msmk(5, 4, 3, 2).generate().unwrap();
        let Instance::Msmk(k) = &inst else { panic!() };
        let Instance::Msmk(sub) = sub_instance(&inst, &[0, 2]) else { panic!() };
        let part = k.weight[0][1][2] + k.weight[2][1][2];
        let want = (k.capacity[1][2] as f64 * part as f64 / k.weight_sum(1, 2) as f64).round() as i64;
        assert_eq!(sub.capacity[1][2], want);
    }

    #[test]
    fn every_item_is_covered_more_than_delta_times() {
        let inst = GenConfig::mclsp(1, 5, 4, 10.0).generate().unwrap();
        let out = itemwise_predict(&RandomPredictor { seed: 3 }, &inst, 2, 10, 9).unwrap();
        assert!(out.counts.iter().all(|&g| g > 10));
        assert!(out.predictions.probs.data.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(out.predictions.layout.family, Family::Mclsp);
        let again = itemwise_predict(&RandomPredictor { seed: 3 }, &inst, 2, 10, 9).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn full_subset_equals_a_direct_pass() {
        for inst in [
            GenConfig::mclsp(2, 3, 4, 10.0).generate().unwrap(),
            GenConfig::msmk(2, 3, 4, 2).generate().unwrap(),
        ] {
            let p = RandomPredictor { seed: 1 };
            let out = itemwise_predict(&p, &inst, 3, 10, 0).unwrap();
            let direct = p.predict(&inst).unwrap();
            assert!(out
                .predictions
                .probs
                .data
                .iter()
                .zip(&direct.probs.data)
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn too_few_items_is_a_usage_error() {
        let inst = GenConfig::mclsp(2, 2, 4, 10.0).generate().unwrap();
        assert!(matches!(
            itemwise_predict(&RandomPredictor { seed: 0 }, &inst, 3, 10, 0),
            Err(PipelineError::Usage(_))
        ));
    }
}
