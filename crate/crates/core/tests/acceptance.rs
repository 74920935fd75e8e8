//! Acceptance criteria 1 to 9. Runs as a plain binary so the per-criterion
//! lines are always printed; exits non-zero if any gating criterion fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use cplab::autodiff::{Tape, Tensor};
use cplab::detection::{integrated_gradients, relevance, select_copying, IGConfig, IgTarget};
use cplab::eval::{classify, classify_ids, outcomes, EvalReport, OutcomeKind};
use cplab::model::{build_forward, Hooks, LayerHandle, Model, ModelConfig, Readout, ScaleHook};
use cplab::pipeline::{run_all, RunArtifacts, RunConfig, ABLATION_COLUMNS};
use cplab::planted::{planted_model, planted_prompts, PlantedSpec};
use cplab::pruning::{apply, PruneMask};
use cplab::tasks::{builtin_wordlist, gen_vowel_proxy, vowel_count, SplitSizes};
use cplab::taskvec::{hidden_state, patched_dist, TaskVector};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 1

/// Mean answer cross-entropy at `positions`, with its parameter and
/// scale-factor gradients.
fn loss_and_grads(model: &Model, tokens: &[usize], positions: &[usize], scale: &[f64]) -> (f64, Vec<Tensor>, Vec<f64>) {
    let mut tape = Tape::new();
    let hook = ScaleHook { layer: LayerHandle::mlp_up(model.config().n_blocks - 1), factors: scale.to_vec(), track_grad: true };
    let hooks = Hooks { scale: Some(hook), patch: None };
    let trace = build_forward(model, &mut tape, tokens, &hooks, &Readout::Rows(positions.to_vec()), true).unwrap();
    let lp = tape.log_softmax(trace.logits).unwrap();
    let index: Vec<(usize, usize)> = positions.iter().enumerate().map(|(k, &p)| (k, tokens[p + 1])).collect();
    let picks = tape.gather(lp, &index).unwrap();
    let s = tape.sum(picks).unwrap();
    let loss = tape.scale(s, -1.0 / positions.len() as f64).unwrap();
    let value = tape.value(loss).item();
    tape.backward(loss).unwrap();
    let grads = trace.params.iter().map(|&p| tape.grad_or_zeros(p).unwrap()).collect();
    let sg = tape.grad(trace.scale.unwrap()).unwrap().data().to_vec();
    (value, grads, sg)
}

/// The same loss from the plain inference path, for finite differences.
fn loss_value(model: &Model, tokens: &[usize], positions: &[usize], scale: &[f64]) -> f64 {
    let layer = LayerHandle::mlp_up(model.config().n_blocks - 1);
    let hooks = Hooks { scale: Some(ScaleHook { layer, factors: scale.to_vec(), track_grad: false }), patch: None };
    let mut total = 0.0;
    for &p in positions {
        let dist = model.dist_with_hooks(&tokens[..=p], &hooks).unwrap();
        total -= dist[tokens[p + 1]].ln();
    }
    total / positions.len() as f64
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn criterion_1() -> Outcome {
    const H: f64 = 1e-5;
    let shapes = [(1, 8, 2, 16), (2, 8, 2, 16), (2, 16, 4, 32)];
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (i, &(n_blocks, d_model, n_heads, d_ff)) in shapes.iter().enumerate() {
        let cfg = ModelConfig { n_blocks, d_model, n_heads, d_ff, vocab_size: 11, max_context: 12, seed: i as u64 };
        let mut model = Model::init(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let normal = Normal::new(0.0, 0.5).unwrap();
        for p in model.params_mut() {
            p.data_mut().iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        }
        let tokens: Vec<usize> = (0..10).map(|_| rng.random_range(0..11)).collect();
        let positions = [2, 5, 8];
        let scale: Vec<f64> = (0..d_ff).map(|_| rng.random_range(0.2..1.0)).collect();
        let (_, grads, scale_grad) = loss_and_grads(&model, &tokens, &positions, &scale);

        #[allow(clippy::needless_range_loop)]
        for k in 0..model.params().len() {
            for c in 0..model.params()[k].numel() {
                let orig = model.params()[k].data()[c];
                model.params_mut()[k].data_mut()[c] = orig + H;
                let plus = loss_value(&model, &tokens, &positions, &scale);
                model.params_mut()[k].data_mut()[c] = orig - H;
                let minus = loss_value(&model, &tokens, &positions, &scale);
                model.params_mut()[k].data_mut()[c] = orig;
                worst = worst.max(rel_err(grads[k].data()[c], (plus - minus) / (2.0 * H)));
                checked += 1;
            }
        }
        for j in 0..d_ff {
            let mut s = scale.clone();
            s[j] += H;
            let plus = loss_value(&model, &tokens, &positions, &s);
            s[j] -= 2.0 * H;
            let minus = loss_value(&model, &tokens, &positions, &s);
            worst = worst.max(rel_err(scale_grad[j], (plus - minus) / (2.0 * H)));
            checked += 1;
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e} over {checked} coordinates"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let planted = planted_model(&PlantedSpec::default()).unwrap();
    let model = &planted.model;
    let layer = LayerHandle::mlp_up(0);
    let prompts = planted_prompts(1000, 21);
    let kinds = outcomes(model, &prompts).unwrap();
    let qualifying: Vec<_> = prompts
        .iter()
        .zip(&kinds)
        .filter(|(_, &k)| k == OutcomeKind::CopyingError)
        .map(|(p, _)| p)
        .take(60)
        .collect();
    let mut worst = 0.0f64;
    let mut monotone = 0;
    for p in &qualifying {
        let fine = integrated_gradients(model, p, layer, 100, IgTarget::MaxProb).unwrap().completeness_error();
        let coarse = integrated_gradients(model, p, layer, 5, IgTarget::MaxProb).unwrap().completeness_error();
        worst = worst.max(fine);
        if fine <= coarse {
            monotone += 1;
        }
    }
    let n = qualifying.len();
    let share = monotone as f64 / n.max(1) as f64;
    outcome(
        n >= 50 && worst < 0.02 && share >= 0.95,
        format!("{n} prompts, max error at m=100 {worst:.2e}, error(100) <= error(5) on {:.1}%", 100.0 * share),
    )
}

// ---------------------------------------------------------------- 3

fn brute_force(pred: &str, gold: &str, context: &[String]) -> OutcomeKind {
    if pred == gold {
        return OutcomeKind::Correct;
    }
    let mut found = false;
    for c in context {
        if c.as_str() == pred {
            found = true;
        }
    }
    if found {
        OutcomeKind::CopyingError
    } else {
        OutcomeKind::OtherError
    }
}

fn criterion_3() -> Outcome {
    let alphabet = ["0", "1", "2", "3", "4", "a", "b", "ab", ""];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let pick = |rng: &mut ChaCha8Rng| rng.random_range(0..alphabet.len());
        let (p, g) = (pick(&mut rng), pick(&mut rng));
        let n = rng.random_range(0..6);
        let ctx_ids: Vec<usize> = (0..n).map(|_| pick(&mut rng)).collect();
        let ctx: Vec<String> = ctx_ids.iter().map(|&i| alphabet[i].to_string()).collect();
        let want = brute_force(alphabet[p], alphabet[g], &ctx);
        if classify(alphabet[p], alphabet[g], &ctx).kind != want || classify_ids(p, g, &ctx_ids) != want {
            mismatches += 1;
        }
    }
    let intro = ["2", "1"].iter().all(|pred| classify(pred, "3", &["1", "2", "1"]).kind == OutcomeKind::CopyingError);
    outcome(mismatches == 0 && intro, format!("{mismatches} mismatches in 10000 triples, introduction case {intro}"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let words = builtin_wordlist();
    let oracle = |w: &str| w.bytes().filter(|b| matches!(b.to_ascii_lowercase(), b'a' | b'e' | b'i' | b'o' | b'u')).count();
    let direct = words.iter().filter(|w| vowel_count(&w.to_ascii_lowercase()) != oracle(w)).count();
    let all = SplitSizes { train: words.len(), val: 0, test: 0 };
    let (proxy, _) = gen_vowel_proxy(&words, all, 0).unwrap();
    let labelled = proxy.iter().filter(|e| e.label != oracle(&e.input).to_string()).count();
    let examples = vowel_count("apple") == 2 && vowel_count("florida") == 3;
    outcome(
        direct == 0 && labelled == 0 && examples && !proxy.is_empty(),
        format!("{} words, {direct} count and {labelled} label disagreements, apple/florida {examples}", words.len()),
    )
}

// ---------------------------------------------------------------- 5

fn copy_rate(model: &Model, prompts: &[cplab::tasks::EncodedPrompt]) -> f64 {
    let o = outcomes(model, prompts).unwrap();
    o.iter().filter(|&&k| k == OutcomeKind::CopyingError).count() as f64 / o.len() as f64
}

fn criterion_5() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for seed in 0..3u64 {
        let p = planted_model(&PlantedSpec { seed, ..PlantedSpec::default() }).unwrap();
        let prompts = planted_prompts(1000, 100 + seed);
        let layer = LayerHandle::mlp_up(0);
        let width = p.model.config().d_ff;
        let base = copy_rate(&p.model, &prompts);
        let oracle: Vec<f64> = (0..width)
            .map(|j| {
                let mut mask = PruneMask::empty(layer, width);
                mask.mask[j] = true;
                base - copy_rate(&apply(&p.model, &mask).unwrap(), &prompts)
            })
            .collect();
        let causal = p.planted.iter().all(|&j| oracle[j] > 0.0);

        let copying = select_copying(&p.model, &prompts, 512, seed).unwrap();
        let rel = relevance(&p.model, &copying, layer, &IGConfig::default()).unwrap();
        let mut order: Vec<usize> = (0..width).collect();
        order.sort_by(|&a, &b| rel.scores[b].total_cmp(&rel.scores[a]).then(a.cmp(&b)));
        let top = &order[..2 * p.planted.len()];
        let hits = p.planted.iter().filter(|j| top.contains(j)).count();
        let rho = common::spearman(&rel.scores, &oracle);
        let ok = causal && hits as f64 >= 0.7 * p.planted.len() as f64 && rho > 0.5;
        pass &= ok;
        lines.push(format!("seed {seed}: {hits}/{} in top-{} rho {rho:.3}", p.planted.len(), top.len()));
    }
    outcome(pass, lines.join("; "))
}

// ---------------------------------------------------------------- 6-8

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn per_task_accuracy(reports: &[EvalReport]) -> BTreeMap<String, f64> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in reports {
        by.entry(r.task.name().to_string()).or_default().push(r.accuracy);
    }
    by.into_iter().map(|(k, v)| (k, mean(v))).collect()
}

fn criterion_6(run: &RunArtifacts, elapsed: Duration) -> Outcome {
    let r = &run.report;
    let (u, p) = (&r.eval_unpruned, &r.eval_pruned);
    let copy_u = mean(u.iter().map(|e| e.copying_error));
    let copy_p = mean(p.iter().map(|e| e.copying_error));
    let (acc_u, acc_p) = (per_task_accuracy(u), per_task_accuracy(p));
    let drop = acc_u.iter().map(|(t, a)| a - acc_p[t]).fold(f64::NEG_INFINITY, f64::max);
    let seeds: std::collections::BTreeSet<u64> = u.iter().map(|e| e.seed).collect();
    let shots: std::collections::BTreeSet<usize> = u.iter().map(|e| e.shots).collect();
    let coverage = acc_u.len() >= 3 && seeds.len() == 5 && shots == [1, 2, 3, 4].into_iter().collect();
    let rates_ok = r.config.sweep.rates == cplab::detection::default_rates();
    let agrees = r.directional.holds == (copy_p <= copy_u && drop <= 0.01);
    outcome(
        coverage && rates_ok && agrees && copy_p <= copy_u && drop <= 0.01 && elapsed < Duration::from_secs(15 * 60),
        format!(
            "copy rate {copy_u:.6} -> {copy_p:.6}, max task accuracy drop {drop:.4}, pruned {} at {:.0}%, {} tasks, {:.0}s",
            r.prune.layer,
            100.0 * r.prune.rate,
            acc_u.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_7(run: &RunArtifacts) -> Outcome {
    let t = &run.report.ablation;
    let csv = t.to_csv();
    let header: Vec<&str> = csv.lines().next().unwrap_or("").split(',').skip(1).collect();
    let columns_ok = header == ["ICL", "Ours", "Max IG", "w/o Norm", "Random"] && header == ABLATION_COLUMNS;
    let ours = mean(t.rows.iter().map(|r| r.ours));
    let random = mean(t.rows.iter().map(|r| r.random));
    outcome(columns_ok && ours >= random, format!("columns {header:?}, Ours {ours:.6} vs Random {random:.6}"))
}

fn self_patch_identity(model: &Model, prompts: &[cplab::tasks::EncodedPrompt]) -> bool {
    prompts.iter().all(|p| {
        let plain = model.next_token_dist(&p.tokens).unwrap();
        (0..model.config().n_blocks).all(|layer| {
            let tv = TaskVector {
                layer,
                vector: hidden_state(model, &p.tokens, layer).unwrap(),
                task: None,
                demos_hash: String::new(),
                pruned: false,
            };
            let patched = patched_dist(model, &p.tokens, &tv).unwrap();
            patched.iter().zip(&plain).all(|(a, b)| a.to_bits() == b.to_bits())
        })
    })
}

fn criterion_8(run: &RunArtifacts) -> (Outcome, bool) {
    let prompts = cplab::pipeline::sweep_prompts(&run.report.config, &run.data).unwrap();
    let identity = self_patch_identity(&run.model, &prompts[..40]) && self_patch_identity(&run.pruned, &prompts[..40]);
    let t = &run.report.taskvec;
    let shots: Vec<usize> = t.per_shot.iter().map(|s| s.shot).collect();
    let finite = t.per_shot.iter().all(|s| s.icl.is_finite() && s.tv.is_finite() && s.tv_pruned.is_finite());
    let triples: Vec<String> =
        t.per_shot.iter().map(|s| format!("{}:({:.3},{:.3},{:.3})", s.shot, s.icl, s.tv, s.tv_pruned)).collect();
    let flag = format!(
        "TV-pruned >= TV on {}/{} seeds, mean delta {:.4}, variance {:.2e}, target {}",
        t.seeds_holding,
        t.per_seed.len(),
        t.delta_mean,
        t.delta_variance,
        if t.holds { "met" } else { "NOT met (flagged)" }
    );
    (
        outcome(
            identity && shots == [1, 2, 3, 4] && finite,
            format!("self-patch bitwise {identity}, (ICL, TV, TV-pruned) {}; {flag}", triples.join(" ")),
        ),
        t.holds,
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let cfg = common::tiny_config();
    let a = run_all(&cfg).unwrap();
    let b = run_all(&cfg).unwrap();
    let (ra, rb) = (a.report.to_bytes().unwrap(), b.report.to_bytes().unwrap());
    let rel = a.relevance.to_bytes().unwrap() == b.relevance.to_bytes().unwrap();
    let ckpt = |m: &Model| m.params().iter().flat_map(|p| p.to_le_bytes()).collect::<Vec<u8>>();
    let models = ckpt(&a.pruned) == ckpt(&b.pruned);
    outcome(ra == rb && rel && models, format!("report {} bytes, identical {}", ra.len(), ra == rb))
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn report(n: usize, name: &str, started: Instant, o: &Outcome) {
    println!(
        "criterion {n} {name}: {} ({}) [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed().as_secs_f64()
    );
}

fn main() {
    let mut failed = Vec::new();
    let mut check = |n: usize, name: &str, limit: Option<u64>, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let mut o = guarded(f);
        if let Some(secs) = limit {
            if t.elapsed() > Duration::from_secs(secs) {
                o.pass = false;
                o.detail.push_str(&format!(", over the {secs}s budget"));
            }
        }
        report(n, name, t, &o);
        if !o.pass {
            failed.push(n);
        }
    };
    check(1, "gradient check", Some(30), &criterion_1);
    check(2, "IG completeness", Some(120), &criterion_2);
    check(3, "copying classifier", None, &criterion_3);
    check(4, "vowel proxy", None, &criterion_4);
    check(5, "planted recovery", Some(300), &criterion_5);

    let t = Instant::now();
    let run = catch_unwind(|| run_all(&RunConfig::default()).unwrap());
    let elapsed = t.elapsed();
    match &run {
        Ok(run) => {
            check(6, "end-to-end direction", None, &|| criterion_6(run, elapsed));
            check(7, "ablation", None, &|| criterion_7(run));
            check(8, "task vectors", None, &|| {
                let (o, holds) = criterion_8(run);
                if !holds {
                    println!("criterion 8 note: the TV-pruned >= TV target is flagged, not gating");
                }
                o
            });
        }
        Err(_) => {
            for (n, name) in [(6, "end-to-end direction"), (7, "ablation"), (8, "task vectors")] {
                check(n, name, None, &|| outcome(false, "default run failed".into()));
            }
        }
    }
    check(9, "determinism", None, &criterion_9);

    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
