use proptest::prelude::*;

use cscr_core::eval::{audc, lambda_grid, paired_bootstrap_audc, sweep};
use cscr_core::router::{pareto_frontier, select_among, RandomPolicy};
use cscr_core::{Descriptor, DescriptorKind, FlatIndex, Neighbor, ScoreRule, Threshold};

fn curve() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0..1.0f64, 0.0..1.0f64), 1..12)
}

fn candidates() -> impl Strategy<Value = (Vec<Neighbor>, Vec<f64>)> {
    (1usize..10).prop_flat_map(|n| {
        (prop::collection::vec(-1.0..1.0f64, n), prop::collection::vec(0.0..1.0f64, n)).prop_map(|(sims, costs)| {
            let nb = sims.into_iter().enumerate().map(|(index, similarity)| Neighbor { index, similarity }).collect();
            (nb, costs)
        })
    })
}

proptest! {
    #[test]
    fn audc_is_order_free_and_bounded(mut pts in curve(), seed in any::<u64>()) {
        let a = audc(&pts, 1.0);
        let lo = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
        let k = (seed as usize) % pts.len();
        pts.rotate_left(k);
        pts.reverse();
        prop_assert!((audc(&pts, 1.0) - a).abs() < 1e-12);
    }

    #[test]
    fn chosen_cost_never_rises_with_lambda((nb, costs) in candidates()) {
        let mut last = f64::INFINITY;
        for lambda in lambda_grid(40, 4.0) {
            let d = select_among(&nb, &costs, lambda, ScoreRule::Penalized);
            prop_assert!(d.cost <= last);
            // No candidate scores strictly better.
            prop_assert!(nb.iter().all(|n| n.similarity - lambda * costs[n.index] <= d.score + 1e-15));
            last = d.cost;
        }
    }

    #[test]
    fn frontier_is_exactly_the_undominated_set(
        pts in prop::collection::vec((0u8..6, 0u8..6), 1..10)
    ) {
        let costs: Vec<f64> = pts.iter().map(|p| f64::from(p.0)).collect();
        let quality: Vec<f64> = pts.iter().map(|p| f64::from(p.1)).collect();
        let front = pareto_frontier(&costs, &quality);
        for m in 0..costs.len() {
            let beaten = (0..costs.len()).any(|o| {
                (costs[o] < costs[m] && quality[o] >= quality[m]) || (costs[o] <= costs[m] && quality[o] > quality[m])
            });
            prop_assert_eq!(front.contains(&m), !beaten);
        }
        prop_assert!(front.windows(2).all(|w| costs[w[0]] <= costs[w[1]]));
    }

    #[test]
    fn top_k_lists_are_nested(raw in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 4), 2..20), q in prop::collection::vec(-1.0..1.0f64, 4)) {
        let descs: Vec<Descriptor> = raw
            .iter()
            .enumerate()
            .filter_map(|(i, v)| Descriptor::from_raw(format!("e{i}"), DescriptorKind::Logit, v).ok())
            .collect();
        prop_assume!(!descs.is_empty() && q.iter().any(|x| x.abs() > 1e-3));
        let index = FlatIndex::build(&descs).unwrap();
        let all = index.top_k(&q, descs.len()).unwrap();
        for k in 1..=descs.len() {
            prop_assert_eq!(&index.top_k(&q, k).unwrap()[..], &all[..k]);
        }
    }
}

#[test]
fn identical_policies_have_no_audc_gap() {
    let costs = [0.0, 0.5, 1.0];
    let quality: Vec<Vec<f64>> = (0..60).map(|i| vec![(i % 2) as f64, f64::from(u8::from(i % 3 == 0)), 1.0]).collect();
    let rows: Vec<&[f64]> = quality.iter().map(Vec::as_slice).collect();
    let grid = lambda_grid(5, 2.0);
    let a = sweep(&mut RandomPolicy::new(&costs, 4), &rows, Threshold::default(), &grid).unwrap();
    let b = sweep(&mut RandomPolicy::new(&costs, 4), &rows, Threshold::default(), &grid).unwrap();
    let r = paired_bootstrap_audc(&a, &b, 1.0, 500, 1).unwrap();
    assert_eq!(r.delta, 0.0);
    assert!(r.ci_low <= 0.0 && r.ci_high >= 0.0);
    assert!((r.p_one_sided - 0.5).abs() < 1e-12);
}
