use proptest::prelude::*;

use cplab::detection::{aggregate, min_max, AttributionMap, IgTarget, RelevanceScores};
use cplab::eval::{classify, classify_ids, OutcomeKind};
use cplab::model::{Checkpoint, LayerHandle, Model, ModelConfig, TrainingMeta};
use cplab::pruning::{apply, mask_from_relevance, random_mask, PruneMask};
use cplab::seed::derive_seed;
use cplab::tasks::Tokenizer;

fn scores(v: Vec<f64>) -> RelevanceScores {
    RelevanceScores { layer: LayerHandle::mlp_up(0), m: 20, target: IgTarget::Shift, normalize: true, samples: 1, scores: v }
}

fn small_model(seed: u64) -> Model {
    Model::init(ModelConfig { n_blocks: 2, d_model: 8, n_heads: 2, d_ff: 16, vocab_size: 9, max_context: 8, seed }).unwrap()
}

proptest! {
    #[test]
    fn min_max_spans_the_unit_interval(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let n = min_max(&v);
        prop_assert!(n.iter().all(|x| (0.0..=1.0).contains(x)));
        let constant = v.iter().all(|&x| x == v[0]);
        if constant {
            prop_assert!(n.iter().all(|&x| x == 0.0));
        } else {
            prop_assert!(n.contains(&0.0) && n.contains(&1.0));
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] < v[j] {
                        prop_assert!(n[i] <= n[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn normalized_relevance_stays_in_unit_interval(maps in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..8)) {
        let maps: Vec<AttributionMap> = maps
            .into_iter()
            .map(|values| AttributionMap { layer: LayerHandle::mlp_up(0), m: 3, target: IgTarget::Shift, values, f_full: 0.0, f_zero: 0.0 })
            .collect();
        let r = aggregate(&maps, true).unwrap();
        prop_assert_eq!(r.samples, maps.len());
        prop_assert!(r.scores.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn relevance_mask_takes_the_top_scores(v in prop::collection::vec(0.0f64..1.0, 1..200), pct in 1u32..=50) {
        let rate = pct as f64 / 100.0;
        let width = v.len();
        let m = mask_from_relevance(&scores(v.clone()), rate).unwrap();
        let want = ((pct as usize * width).div_ceil(100)).clamp(1, width);
        prop_assert_eq!(m.count(), want);
        let kept_max = v.iter().zip(&m.mask).filter(|(_, &b)| !b).map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max);
        let pruned_min = v.iter().zip(&m.mask).filter(|(_, &b)| b).map(|(x, _)| *x).fold(f64::INFINITY, f64::min);
        prop_assert!(pruned_min >= kept_max);
        prop_assert_eq!(m.sigma, Some(pruned_min));
    }

    #[test]
    fn random_mask_has_the_same_size(width in 1usize..300, pct in 1u32..=50, seed: u64) {
        let rate = pct as f64 / 100.0;
        let r = random_mask(LayerHandle::mlp_up(0), width, rate, seed).unwrap();
        let t = mask_from_relevance(&scores(vec![0.5; width]), rate).unwrap();
        prop_assert_eq!(r.count(), t.count());
        prop_assert_eq!(&r, &random_mask(LayerHandle::mlp_up(0), width, rate, seed).unwrap());
        prop_assert_eq!(PruneMask::from_file(&r.to_file()).unwrap(), r);
    }

    #[test]
    fn classifier_partitions_outcomes(pred in 0usize..6, gold in 0usize..6, ctx in prop::collection::vec(0usize..6, 0..6)) {
        let kind = classify_ids(pred, gold, &ctx);
        let names: Vec<String> = ctx.iter().map(|c| format!("L{c}")).collect();
        prop_assert_eq!(classify(&format!("L{pred}"), &format!("L{gold}"), &names).kind, kind);
        match kind {
            OutcomeKind::Correct => prop_assert_eq!(pred, gold),
            OutcomeKind::CopyingError => prop_assert!(pred != gold && ctx.contains(&pred)),
            OutcomeKind::OtherError => prop_assert!(pred != gold && !ctx.contains(&pred)),
        }
    }

    #[test]
    fn tokenizer_round_trips(words in prop::collection::vec(prop_oneof![
        "[a-z]{1,5}",
        Just(":".to_string()),
        Just(",".to_string()),
        "[0-9](,[0-9]){1,3}",
    ], 1..12)) {
        let text = words.join(" ");
        let tok = Tokenizer::build([text.as_str()]);
        prop_assert_eq!(tok.decode(&tok.encode(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn derived_seeds_are_deterministic_and_path_sensitive(base: u64, a in 0u64..1000, b in 0u64..1000) {
        prop_assert_eq!(derive_seed(base, &[a, b]), derive_seed(base, &[a, b]));
        if a != b {
            prop_assert_ne!(derive_seed(base, &[a]), derive_seed(base, &[b]));
            prop_assert_ne!(derive_seed(base, &[a, b]), derive_seed(base, &[b, a]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pruning_equals_silencing(seed in 0u64..1000, picks in prop::collection::btree_set(0usize..16, 1..6)) {
        let model = small_model(seed);
        let layer = LayerHandle::mlp_up(1);
        let mut mask = PruneMask::empty(layer, 16);
        for &j in &picks {
            mask.mask[j] = true;
        }
        let pruned = apply(&model, &mask).unwrap();
        let tokens = [1, 4, 2, 7, 3];
        let silenced = model.forward_with_scale(&tokens, layer, &picks.iter().copied().collect::<Vec<_>>(), 0.0).unwrap();
        let direct = pruned.next_token_dist(&tokens).unwrap();
        for (a, b) in silenced.iter().zip(&direct) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // The source model is untouched and other rows are unchanged.
        prop_assert_eq!(&model, &small_model(seed));
        let up = "blocks.1.mlp.up.weight";
        for j in 0..16 {
            let row = pruned.param(up).unwrap().row(j);
            if picks.contains(&j) {
                prop_assert!(row.iter().all(|&x| x == 0.0));
            } else {
                prop_assert_eq!(row, model.param(up).unwrap().row(j));
            }
        }
    }

    #[test]
    fn checkpoints_round_trip(seed: u64) {
        let ck = Checkpoint {
            model: small_model(seed),
            vocab: (0..9).map(|i| format!("t{i}")).collect(),
            meta: TrainingMeta { steps: 3, final_loss: Some(1.5), seed },
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back, ck);
    }
}
