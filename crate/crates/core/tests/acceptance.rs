//! Acceptance suite: one line per criterion, non-zero exit if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sega_autodiff::{grad_check, op_gradient_suite, AdamWConfig, Checkpoint, GradCheckOptions, ParamStore, Tape, Tensor};
use sega_core::config::RunConfig;
use sega_core::dataset::{load_dataset, save_dataset};
use sega_core::detect::{evaluate, finetune_loss, Classifier, FinetuneConfig};
use sega_core::embed::{cosine, EmbeddingProvider, Role, MAX_WORDS};
use sega_core::features::NodeInputs;
use sega_core::graph::{Edge, HeteroGraph, Label, Relation, Split, MAX_TWEETS};
use sega_core::model::{Dims, Encoder};
use sega_core::pipeline::{train, train_prepared, write_metrics, Prepared};
use sega_core::prefs::{parse_llm_response, preference_summary, render_prompt, Emotion, PreferenceProfile, TemplateKind, Topic};
use sega_core::pretrain::{infonce_loss, ContrastiveHead, ContrastiveTerm, PretrainConfig};
use sega_core::synth::{synth_generate, SynthConfig};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
}

fn worst(report: &sega_autodiff::GradCheckReport) -> (String, f64) {
    report
        .per_param
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default()
}

fn gradients() -> Check {
    let start = Instant::now();
    let mut op_worst = 0.0f64;
    for seed in 0..8 {
        for (op, err) in op_gradient_suite(seed, 8).map_err(|e| e.to_string())? {
            ensure(err < 1e-4, || format!("op {op}: relative error {err:.2e}"))?;
            op_worst = op_worst.max(err);
        }
    }

    let g = random_graph(6, 2, 16, 21);
    let dims = small_dims();
    let opts = GradCheckOptions {
        eps: 1e-5,
        max_coords: Some(8),
        seed: 1,
        floor: 1e-5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::register(&mut store, &dims, true, &mut rng).map_err(|e| e.to_string())?;
    let head = ContrastiveHead::register(&mut store, &dims, &mut rng).map_err(|e| e.to_string())?;
    let cls = Classifier::register(&mut store, &dims, &mut rng).map_err(|e| e.to_string())?;
    jitter(&mut store, &mut rng);
    let index = enc.index(&g).map_err(|e| e.to_string())?;
    let inputs: NodeInputs<f64> = inputs_for(&g).cast();
    let prompts = Tensor::new(vec![4, dims.text], (0..4 * dims.text).map(|_| rng.random_range(-1.0..1.0)).collect())
        .map_err(|e| e.to_string())?;
    let terms: Vec<ContrastiveTerm> = (0..6)
        .map(|u| ContrastiveTerm {
            anchor: u,
            positive: u % 4,
            negatives: (0..4).filter(|&j| j != u % 4).collect(),
        })
        .collect();
    let contrastive = grad_check(
        &store,
        |s| {
            let mut tape = Tape::train(9);
            let z = enc.user_embeddings(&mut tape, s, &inputs, &index, 0.3).expect("encoder");
            let p = tape.constant(prompts.clone())?;
            let (zt, pt) = head.project(&mut tape, s, z, p).expect("projection");
            let loss = infonce_loss(&mut tape, zt, pt, &terms, 0.1).expect("loss");
            Ok((tape, loss))
        },
        opts,
    )
    .map_err(|e| e.to_string())?;
    let detection = grad_check(
        &store,
        |s| {
            let mut tape = Tape::train(3);
            let loss = finetune_loss(&mut tape, &enc, &cls, s, &inputs, &index, &[0, 1, 3, 5], &[0, 2, 1, 1], 3e-2, 0.3)
                .expect("loss");
            Ok((tape, loss))
        },
        opts,
    )
    .map_err(|e| e.to_string())?;
    // the contrastive check never touches the classifier and vice versa; both report zero there
    let (cn, ce) = worst(&contrastive);
    let (dn, de) = worst(&detection);
    ensure(ce < 1e-3, || format!("contrastive composite: {cn} {ce:.2e}"))?;
    ensure(de < 1e-3, || format!("detection composite: {dn} {de:.2e}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("ops max {op_worst:.1e}, contrastive max {ce:.1e}, detection max {de:.1e}, {secs:.1}s"))
}

fn infonce_value(z: &[f64], p: &[Vec<f64>], negatives: Vec<usize>, tau: f64) -> f64 {
    let width = z.len();
    let mut tape = Tape::<f64>::eval();
    let zv = tape.constant(Tensor::new(vec![1, width], z.to_vec()).unwrap()).unwrap();
    let pv = tape.constant(Tensor::new(vec![p.len(), width], p.concat()).unwrap()).unwrap();
    let term = ContrastiveTerm {
        anchor: 0,
        positive: 0,
        negatives,
    };
    let l = infonce_loss(&mut tape, zv, pv, &[term], tau).unwrap();
    tape.value(l).item().unwrap()
}

fn infonce() -> Check {
    let x = vec![1.0, 0.0];
    let y = vec![0.0, 1.0];
    let cases = [
        (infonce_value(&x, std::slice::from_ref(&y), vec![], 0.1), 0.0),
        (infonce_value(&x, &[x.clone(), y.clone()], vec![1], 0.1), (-10f64).exp().ln_1p()),
        (infonce_value(&x, &[y.clone(), y.clone()], vec![1], 0.1), 2f64.ln()),
    ];
    for (k, (got, want)) in cases.iter().enumerate() {
        ensure((got - want).abs() < 1e-9, || format!("closed form {}: {got} vs {want}", k + 1))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let instance = |rng: &mut ChaCha8Rng| {
        let d = rng.random_range(2..8);
        let k = rng.random_range(1..10);
        let p: Vec<Vec<f64>> = (0..=k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        (z, p, (1..=k).collect::<Vec<usize>>(), rng.random_range(0.05..1.0))
    };
    let mut min_loss = f64::INFINITY;
    for _ in 0..1000 {
        let (z, p, negs, tau) = instance(&mut rng);
        let l = infonce_value(&z, &p, negs, tau);
        ensure(l >= 0.0, || format!("negative loss {l}"))?;
        min_loss = min_loss.min(l);
    }
    for _ in 0..100 {
        let (z, mut p, negs, tau) = instance(&mut rng);
        let before = infonce_value(&z, &p, negs.clone(), tau);
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let pn = p[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        let t = rng.random_range(0.05..0.9);
        p[0] = p[0].iter().zip(&z).map(|(a, b)| (1.0 - t) * a / pn - t * b / zn).collect();
        let after = infonce_value(&z, &p, negs, tau);
        ensure(after >= before - 1e-12, || format!("loss fell from {before} to {after}"))?;
    }
    Ok(format!("3 closed forms within 1e-9, min over 1000 random {min_loss:.2e}, 100 monotone perturbations"))
}

fn mean_f1(graph: &HeteroGraph, prefs: &sega_core::prefs::PreferenceCache, seeds: &[u64], tweak: impl Fn(&mut RunConfig)) -> Result<(f64, Vec<f64>), String> {
    let mut base = RunConfig::default();
    tweak(&mut base);
    let prep = Prepared::new(graph, &base).map_err(|e| e.to_string())?;
    let mut scores = Vec::new();
    for &seed in seeds {
        let config = RunConfig { seed, ..base.clone() };
        let r = train_prepared(&prep, Some(prefs), &config).map_err(|e| e.to_string())?;
        scores.push(r.test.macro_avg.f1);
    }
    Ok((scores.iter().sum::<f64>() / scores.len() as f64, scores))
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn pretraining_helps() -> Check {
    let start = Instant::now();
    let data = synth_generate(&SynthConfig::default()).map_err(|e| e.to_string())?;
    let (with, ws) = mean_f1(&data.graph, &data.prefs, &SEEDS, |_| {})?;
    let (without, os) = mean_f1(&data.graph, &data.prefs, &SEEDS, |c| c.ablation.no_pretrain = true)?;
    let secs = start.elapsed().as_secs_f64();
    let detail = format!("pretrained {with:.4} {ws:.3?} vs fresh {without:.4} {os:.3?}, {secs:.0}s");
    ensure(with - without >= 0.03, || format!("gap below 0.03: {detail}"))?;
    ensure(secs < 600.0, || format!("over 10 min: {detail}"))?;
    Ok(detail)
}

fn lists_help() -> Check {
    let data = synth_generate(&SynthConfig::list_routed(7)).map_err(|e| e.to_string())?;
    let (full, fs) = mean_f1(&data.graph, &data.prefs, &SEEDS, |_| {})?;
    let (no_list, ns) = mean_f1(&data.graph, &data.prefs, &SEEDS, |c| c.ablation.no_list = true)?;
    let detail = format!("full {full:.4} {fs:.3?} vs no_list {no_list:.4} {ns:.3?}");
    ensure(full >= no_list - 0.005, || detail.clone())?;
    Ok(detail)
}

fn template() -> Check {
    let response = "1: news - anger\n2: news - anger\n3: news - anger\n4: news - anger\n5: news - anger\n6: news - anticipation\n7: news - anticipation\n8: news - joy\n9: news - anger\n10: news - anger";
    let profile = PreferenceProfile::from_pairs("u", &parse_llm_response(response));
    let summary = preference_summary(&profile).map_err(|e| e.to_string())?;
    let text = render_prompt(&summary, TemplateKind::Default).text;
    let want = "The majority of the posts express news with anger emotion, while a minority of them express news with joy.";
    ensure(text == want, || format!("got {text:?}"))?;
    Ok("byte-exact".into())
}

/// Independent confusion-matrix metrics.
fn brute_force(pred: &[usize], truth: &[usize]) -> ([[usize; 3]; 3], f64) {
    let mut m = [[0usize; 3]; 3];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    let mut f1s = 0.0;
    for c in 0..3 {
        let tp = m[c][c] as f64;
        let predicted: usize = (0..3).map(|t| m[t][c]).sum();
        let actual: usize = m[c].iter().sum();
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        f1s += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    (m, f1s / 3.0)
}

fn metrics() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut max_err = 0.0f64;
    for _ in 0..50 {
        let skew = rng.random_range(0.0..1.0);
        let draw = |rng: &mut ChaCha8Rng| if rng.random_bool(skew) { 0 } else { rng.random_range(0..3) };
        let truth: Vec<usize> = (0..200).map(|_| draw(&mut rng)).collect();
        let pred: Vec<usize> = (0..200).map(|_| draw(&mut rng)).collect();
        let to_labels = |v: &[usize]| v.iter().map(|&i| Label::from_index(i).unwrap()).collect::<Vec<_>>();
        let r = evaluate(&to_labels(&pred), &to_labels(&truth)).map_err(|e| e.to_string())?;
        let (m, f1) = brute_force(&pred, &truth);
        ensure(r.confusion == m, || "confusion mismatch".into())?;
        let err = (r.macro_avg.f1 - f1).abs();
        ensure(err <= 1e-12, || format!("macro-F1 {} vs {f1}", r.macro_avg.f1))?;
        max_err = max_err.max(err);
    }
    let r = evaluate(&[Label::Normal; 3], &[Label::Normal, Label::Bot, Label::Troll]).map_err(|e| e.to_string())?;
    ensure((r.macro_avg.f1 - 1.0 / 6.0).abs() < 1e-12, || format!("all-normal example: {}", r.macro_avg.f1))?;
    Ok(format!("50 random sets of 200, max |diff| {max_err:.1e}; all-normal example = 1/6"))
}

fn states(enc: &Encoder, store: &ParamStore<f32>, inputs: &NodeInputs<f32>, g: &HeteroGraph) -> (Vec<Vec<u32>>, f64) {
    let index = enc.index(g).unwrap();
    let mut tape = Tape::eval();
    let x = enc.features.forward(&mut tape, store, inputs, 0.0).unwrap();
    let (h, trace) = enc.rgt.forward_traced(&mut tape, store, x, &index, 0.0).unwrap();
    let mut worst = 0.0f64;
    for layer in &trace {
        for (alpha, edges) in layer.iter().zip(&index.relations) {
            let a = tape.value(*alpha);
            let heads = a.shape()[1];
            let mut sums = vec![0.0f64; index.nodes() * heads];
            for (e, &d) in edges.dst.iter().enumerate() {
                for k in 0..heads {
                    sums[d * heads + k] += f64::from(a.data()[e * heads + k]);
                }
            }
            worst = sums.iter().fold(worst, |w, s| w.max((s - 1.0).abs()));
        }
    }
    let v = tape.value(h);
    let w = v.shape()[1];
    (v.data().chunks_exact(w).map(|r| r.iter().map(|x| x.to_bits()).collect()).collect(), worst)
}

fn encoder_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let users = vec![
        user("a", Label::Normal, Split::Train, &mut rng),
        user("b", Label::Bot, Split::Train, &mut rng),
        user("c", Label::Troll, Split::Train, &mut rng),
        user("d", Label::Normal, Split::Test, &mut rng),
    ];
    let lists = vec![list("l1", &mut rng), list("l2", &mut rng)];
    let edges = vec![
        Edge::new("a", Relation::Following, "b"),
        Edge::new("c", Relation::Following, "b"),
        Edge::new("b", Relation::Followers, "a"),
        Edge::new("l1", Relation::Membership, "c"),
        Edge::new("l2", Relation::Membership, "a"),
        Edge::new("d", Relation::Followed, "l1"),
        Edge::new("a", Relation::Own, "l2"),
    ];
    let g = HeteroGraph::new(users, lists, edges);
    let mut store = ParamStore::new();
    let enc = Encoder::register(&mut store, &Dims::default(), true, &mut ChaCha8Rng::seed_from_u64(1)).map_err(|e| e.to_string())?;
    let inputs = inputs_for(&g);
    let (base, sum_err) = states(&enc, &store, &inputs, &g);

    let uo = [3usize, 1, 0, 2];
    let lo = [1usize, 0];
    let pg = HeteroGraph::with_order(
        uo.iter().map(|&i| g.users()[i].clone()).collect(),
        lo.iter().map(|&i| g.lists()[i].clone()).collect(),
        g.edges().iter().rev().cloned().collect(),
    );
    let pin = NodeInputs {
        users: permute_kind(&inputs.users, &uo),
        lists: inputs.lists.as_ref().map(|l| permute_kind(l, &lo)),
    };
    let (perm, _) = states(&enc, &store, &pin, &pg);
    let old: Vec<usize> = uo.iter().copied().chain(lo.iter().map(|&i| i + 4)).collect();
    ensure(old.iter().enumerate().all(|(new, &o)| perm[new] == base[o]), || "permutation changed node states".into())?;

    let users = (1..=5).map(|i| user(&format!("u{i}"), Label::Normal, Split::Train, &mut rng)).collect();
    let chain: Vec<Edge> = (1..5).map(|i| Edge::new(format!("u{i}"), Relation::Following, format!("u{}", i + 1))).collect();
    let cg = HeteroGraph::new(users, vec![], chain);
    let cin = inputs_for(&cg);
    let (before, _) = states(&enc, &store, &cin, &cg);
    let mut moved = cin.clone();
    for v in moved.users.twe.data_mut()[..768].iter_mut() {
        *v -= 0.7;
    }
    let (after, _) = states(&enc, &store, &moved, &cg);
    ensure(after[2] != before[2], || "two-hop node did not react".into())?;
    ensure(after[3] == before[3] && after[4] == before[4], || "three-hop node changed".into())?;
    ensure(sum_err < 1e-6, || format!("attention sums off by {sum_err:.1e}"))?;
    Ok(format!("equivariance exact, 3-hop invariance exact, attention sums within {sum_err:.1e}"))
}

fn determinism() -> Check {
    let synth = SynthConfig {
        normal: 40,
        bot: 10,
        troll: 10,
        lists: 8,
        ..SynthConfig::default()
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    sega_core::synth::synth_to_dir(&synth, dir.path()).map_err(|e| e.to_string())?;
    let mut config = RunConfig::default();
    config.pretrain.epochs = 5;
    config.finetune.epochs = 5;
    let mut outputs = Vec::new();
    for k in 0..2 {
        let g = load_dataset(dir.path()).map_err(|e| e.to_string())?;
        let prefs = sega_core::pipeline::load_prefs(dir.path()).map_err(|e| e.to_string())?;
        let report = train(&g, Some(&prefs), &config).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("metrics{k}.json"));
        write_metrics(&path, &report.test).map_err(|e| e.to_string())?;
        outputs.push((std::fs::read(&path).map_err(|e| e.to_string())?, report));
    }
    ensure(outputs[0].0 == outputs[1].0, || "metrics JSON differs between runs".into())?;

    let (ckpt, _) = outputs[0].1.pretrain.as_ref().ok_or("no pre-training checkpoint")?;
    let path = dir.path().join("p.ckpt");
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let back = Checkpoint::<f32>::load(&path, AdamWConfig::default()).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    ensure(sega_autodiff::checkpoint::encode(&back.to_records()).map_err(|e| e.to_string())? == bytes, || {
        "checkpoint did not round-trip bitwise".into()
    })?;

    let g = load_dataset(dir.path()).map_err(|e| e.to_string())?;
    let again = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_dataset(&g, again.path()).map_err(|e| e.to_string())?;
    ensure(load_dataset(again.path()).map_err(|e| e.to_string())? == g, || "dataset round trip differs".into())?;
    for f in ["nodes.jsonl", "tweets.jsonl", "edges.csv", "labels.csv", "splits.csv"] {
        ensure(std::fs::read(dir.path().join(f)).ok() == std::fs::read(again.path().join(f)).ok(), || format!("{f} not canonical"))?;
    }
    Ok("metrics JSON, checkpoint bytes and dataset files identical".into())
}

fn defaults() -> Check {
    let c = RunConfig::default();
    let p = PretrainConfig::default();
    let f = FinetuneConfig::default();
    let table: Vec<(&str, f64, f64)> = vec![
        ("tau", c.pretrain.tau, 0.1),
        ("k_neg", c.pretrain.k_neg as f64, 100.0),
        ("d_h", c.dims.hidden as f64, 32.0),
        ("d_out", c.dims.out as f64, 128.0),
        ("d_u", c.dims.user as f64, 64.0),
        ("d_a", c.dims.align as f64, 64.0),
        ("d_des = d_twe = d_p", c.dims.text as f64, 768.0),
        ("g", c.dims.layers as f64, 2.0),
        ("q", MAX_TWEETS as f64, 20.0),
        ("s = L", MAX_WORDS as f64, 50.0),
        ("pretrain dropout", c.pretrain.dropout, 0.3),
        ("finetune dropout", c.finetune.dropout, 0.3),
        ("pretrain lr", c.pretrain.lr, 0.001),
        ("finetune lr", c.finetune.lr, 0.001),
        ("pretrain batch", c.pretrain.batch_size as f64, 2048.0),
        ("finetune batch", c.finetune.batch_size as f64, 2048.0),
        ("lambda", c.finetune.lambda, 3e-5),
        ("pretrain epochs", c.pretrain.epochs as f64, 100.0),
        ("finetune epochs", c.finetune.epochs as f64, 150.0),
    ];
    for (name, got, want) in &table {
        ensure(got == want, || format!("{name} = {got}, expected {want}"))?;
    }
    ensure(c.pretrain == p && c.finetune == f, || "run config sections differ from stage defaults".into())?;
    let empty: RunConfig = serde_json::from_str("{}").map_err(|e| e.to_string())?;
    ensure(empty == c, || "empty config file does not give the defaults".into())?;
    Ok(format!("{} values", table.len()))
}

fn provider_separation() -> Check {
    let prompt = EmbeddingProvider::new(Role::Prompt, &RunConfig::default().prompt_provider).map_err(|e| e.to_string())?;
    let profiles = [
        vec![(Topic::News, Emotion::Anger); 7]
            .into_iter()
            .chain([(Topic::Sports, Emotion::Joy); 3])
            .collect::<Vec<_>>(),
        vec![(Topic::Music, Emotion::Joy); 6]
            .into_iter()
            .chain([(Topic::Food, Emotion::Trust); 4])
            .collect(),
    ];
    let mut texts = BTreeMap::new();
    for pairs in &profiles {
        let s = preference_summary(&PreferenceProfile::from_pairs("u", pairs)).map_err(|e| e.to_string())?;
        for kind in [TemplateKind::Short, TemplateKind::Topic, TemplateKind::Emotion, TemplateKind::Tandem] {
            texts.insert(render_prompt(&s, kind).text, ());
        }
    }
    ensure(texts.len() == 8, || format!("{} distinct templates", texts.len()))?;
    let texts: Vec<String> = texts.into_keys().collect();
    let vecs = prompt.embed_batch(&texts).map_err(|e| e.to_string())?;
    let mut max = f64::MIN;
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            max = max.max(cosine(&vecs[i], &vecs[j]));
        }
    }
    ensure(max < 0.5, || format!("max pairwise cosine {max:.4}"))?;
    Ok(format!("8 templates, max pairwise cosine {max:.4}"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient correctness", gradients),
        ("InfoNCE oracle", infonce),
        ("pre-training helps", pretraining_helps),
        ("list ablation", lists_help),
        ("template exactness", template),
        ("metrics oracle", metrics),
        ("encoder invariants", encoder_invariants),
        ("determinism and persistence", determinism),
        ("defaults audit", defaults),
        ("provider separation", provider_separation),
    ];
    let only: Option<usize> = std::env::var("SEGA_CRITERION").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let n = k + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
