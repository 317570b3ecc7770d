//! Randomized properties of the cost model, the gate primitives and the
//! decision-log analysis.

use std::path::Path;

use approx::assert_relative_eq;
use proptest::prelude::*;
use prunenet::analysis::{analyze_decisions, ChannelCategory, DecisionRecord, LayerInfo, PruneDecisionLog};
use prunenet::cost::{compute_lambda, layer_flops, sample_flops, BatchDecisions, BudgetConfig, LayerCostSpec};
use prunenet::data::Split;
use prunenet::spm::{fixed_k_select, saturating_sigmoid};

/// A chain of convs where each layer after the first reads the previous
/// layer's gated output.
fn chain(channels: &[usize], hw: usize, k: usize) -> Vec<LayerCostSpec> {
    (0..channels.len())
        .map(|i| LayerCostSpec {
            layer_id: i,
            h_out: hw,
            w_out: hw,
            c_in: if i == 0 { 3 } else { channels[i - 1] },
            c_out: channels[i],
            k,
            gated: true,
            input_from: i.checked_sub(1),
        })
        .collect()
}

fn chain_and_bits() -> impl Strategy<Value = (Vec<usize>, Vec<Vec<bool>>)> {
    prop::collection::vec(1usize..9, 1..5).prop_flat_map(|channels| {
        let bits = channels.iter().map(|&c| prop::collection::vec(any::<bool>(), c)).collect::<Vec<_>>();
        (Just(channels), bits)
    })
}

fn decisions(bits: &[Vec<bool>]) -> BatchDecisions {
    BatchDecisions {
        batch: 1,
        layers: bits.iter().map(|b| Some(b.clone())).collect(),
    }
}

proptest! {
    #[test]
    fn dense_decisions_cost_p0((channels, _) in chain_and_bits(), hw in 1usize..6, k in 1usize..4) {
        let specs = chain(&channels, hw, k);
        let ones: Vec<Vec<bool>> = channels.iter().map(|&c| vec![true; c]).collect();
        let p0: u64 = specs.iter().map(layer_flops).sum();
        prop_assert_eq!(sample_flops(&specs, &decisions(&ones), 0).unwrap(), p0);
    }

    #[test]
    fn enabling_a_channel_never_lowers_flops(
        (channels, bits) in chain_and_bits(),
        hw in 1usize..6,
        k in 1usize..4,
        pick in any::<prop::sample::Index>(),
    ) {
        let specs = chain(&channels, hw, k);
        let before = sample_flops(&specs, &decisions(&bits), 0).unwrap();
        let slots: Vec<(usize, usize)> = bits
            .iter()
            .enumerate()
            .flat_map(|(l, b)| (0..b.len()).map(move |c| (l, c)))
            .collect();
        let (l, c) = slots[pick.index(slots.len())];
        let mut more = bits.clone();
        more[l][c] = true;
        let after = sample_flops(&specs, &decisions(&more), 0).unwrap();
        prop_assert!(after >= before);
        prop_assert!(after <= specs.iter().map(layer_flops).sum::<u64>());
    }

    #[test]
    fn lambda_sign_follows_the_budget_gap(p0 in 1.0f64..1e9, frac in 0.01f64..1.0, at in 0.0f64..1.0, lambda0 in 0.001f64..10.0) {
        let cfg = BudgetConfig::from_fraction(frac, p0, lambda0, 20, 16, 3).unwrap();
        let p_t = at * p0;
        let lambda = compute_lambda(&cfg, p_t).unwrap();
        assert_relative_eq!(lambda, lambda0 * (at - frac), epsilon = 1e-9 * lambda0, max_relative = 1e-9);
        if p_t > cfg.p {
            prop_assert!(lambda > 0.0);
        } else if p_t < cfg.p {
            prop_assert!(lambda < 0.0);
        }
    }

    #[test]
    fn saturating_sigmoid_is_a_clamped_monotone_map(mut s in prop::collection::vec(-20.0f64..20.0, 1..32)) {
        s.sort_by(f64::total_cmp);
        let y = saturating_sigmoid(&s, 1.2, 0.1, None);
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(y.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn fixed_k_keeps_the_top_scores(s in prop::collection::vec(-5.0f64..5.0, 1..40), k in 0.01f64..1.0) {
        let keep = (k * s.len() as f64).round() as usize;
        match fixed_k_select(&s, k) {
            Err(_) => prop_assert_eq!(keep, 0),
            Ok(b) => {
                prop_assert_eq!(b.iter().filter(|&&v| v == 1.0).count(), keep);
                let lowest_kept = s.iter().zip(&b).filter(|(_, &v)| v == 1.0).map(|(&x, _)| x).fold(f64::INFINITY, f64::min);
                let highest_dropped = s.iter().zip(&b).filter(|(_, &v)| v == 0.0).map(|(&x, _)| x).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lowest_kept >= highest_dropped);
            }
        }
    }
}

fn random_log() -> impl Strategy<Value = PruneDecisionLog> {
    (1usize..12, prop::collection::vec(1usize..10, 1..4)).prop_flat_map(|(samples, channels)| {
        let grid = channels
            .iter()
            .map(|&c| prop::collection::vec(prop::collection::vec(any::<bool>(), c), samples))
            .collect::<Vec<_>>();
        (Just(samples), Just(channels), grid, any::<[u8; 32]>()).prop_map(|(samples, channels, grid, hash)| {
            let layers = channels
                .iter()
                .enumerate()
                .map(|(i, &c)| LayerInfo {
                    layer_id: 2 * i + 1,
                    name: format!("conv{i}"),
                    channels: c,
                })
                .collect::<Vec<_>>();
            let mut log = PruneDecisionLog::new(Split::Test, hex::encode(hash), layers);
            log.num_samples = samples;
            for (li, rows) in grid.into_iter().enumerate() {
                for (sample_id, bits) in rows.into_iter().enumerate() {
                    log.records.push(DecisionRecord {
                        sample_id,
                        layer_id: 2 * li + 1,
                        bits,
                    });
                }
            }
            log
        })
    })
}

proptest! {
    #[test]
    fn log_encoding_round_trips(log in random_log()) {
        let decoded = PruneDecisionLog::decode(&log.encode(), Path::new("mem")).unwrap();
        prop_assert_eq!(decoded, log);
    }

    #[test]
    fn categories_match_a_direct_scan(log in random_log()) {
        let analysis = analyze_decisions(&log).unwrap();
        for (layer, info) in analysis.layers.iter().zip(&log.layers) {
            let rows: Vec<&Vec<bool>> = log.records.iter().filter(|r| r.layer_id == info.layer_id).map(|r| &r.bits).collect();
            for c in 0..info.channels {
                let on = rows.iter().filter(|b| b[c]).count();
                let expected = if on == rows.len() {
                    ChannelCategory::NeverPruned
                } else if on == 0 {
                    ChannelCategory::AlwaysPruned
                } else {
                    ChannelCategory::SampleDependent
                };
                prop_assert_eq!(layer.categories[c], expected);
            }
            prop_assert_eq!(layer.active_histogram.iter().sum::<usize>(), log.num_samples);
            for (active, &n) in layer.active_histogram.iter().enumerate() {
                prop_assert_eq!(rows.iter().filter(|b| b.iter().filter(|&&x| x).count() == active).count(), n);
            }
        }
    }

    #[test]
    fn dropping_a_record_is_a_coverage_error(log in random_log(), pick in any::<prop::sample::Index>()) {
        let mut log = log;
        log.records.remove(pick.index(log.records.len()));
        prop_assert!(analyze_decisions(&log).is_err());
    }
}
