use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{count_effective_params, EncoderModel, MoeConfig, ModelConfig};
use crate::tensor::HasParams;

fn random_ffn(d: usize, dh: usize, seed: u64) -> FfnWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FfnWeights {
        w1: Tensor::randn(&[d, dh], 0.5, &mut rng),
        b1: Tensor::randn(&[dh], 0.5, &mut rng),
        w2: Tensor::randn(&[dh, d], 0.5, &mut rng),
        b2: Tensor::randn(&[d], 0.5, &mut rng),
    }
}

fn eval_ffn(f: &FfnWeights, a: &Tensor) -> Vec<f64> {
    let mut g = Graph::no_grad();
    let v: Vec<Var> = [a, &f.w1, &f.b1, &f.w2, &f.b2].iter().map(|t| g.constant(t)).collect();
    let out = ffn_forward(&mut g, v[0], v[1], v[2], v[3], v[4]).unwrap();
    g.value(out).to_vec()
}

#[test]
fn two_experts_share_the_top_neuron() {
    let ffn = random_ffn(3, 4, 0);
    let ordering = [2, 0, 3, 1];
    let set = adapt_ffn(&ffn, &ordering, 2, 1).unwrap();
    assert_eq!(set.expert_dim, 2);
    assert_eq!(set.provenance, vec![vec![2, 0], vec![2, 3]]);
    assert_eq!(set.discarded(4), vec![1]);
    // the neuron bundle moves together
    let e1 = &set.experts[1];
    assert_eq!(e1.b1.data(), &[ffn.b1.data()[2], ffn.b1.data()[3]]);
    assert_eq!(&e1.w2.data()[3..6], &ffn.w2.data()[9..12]);
    assert_eq!(e1.w1.data()[1], ffn.w1.data()[3]);
    assert_eq!(e1.b2, ffn.b2);
}

#[test]
fn single_expert_preserves_function() {
    let ffn = random_ffn(6, 12, 1);
    let ordering = [5, 11, 0, 3, 7, 1, 2, 10, 9, 4, 8, 6];
    let set = adapt_ffn(&ffn, &ordering, 1, 0).unwrap();
    assert_eq!(set.provenance[0], ordering);
    let a = Tensor::randn(&[2, 4, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    for (x, y) in eval_ffn(&ffn, &a).iter().zip(eval_ffn(&set.experts[0], &a)) {
        assert!((x - y).abs() <= 1e-9);
    }
}

#[test]
fn paper_sized_split_counts() {
    let ffn = random_ffn(2, 3072, 3);
    let ordering: Vec<usize> = (0..3072).rev().collect();
    let set = adapt_ffn(&ffn, &ordering, 4, 512).unwrap();
    assert_eq!(set.expert_dim, 768);
    let shared: BTreeSet<usize> = ordering[..512].iter().copied().collect();
    for p in &set.provenance {
        assert_eq!(p.len(), 768);
        assert_eq!(p[..512].iter().copied().collect::<BTreeSet<_>>(), shared);
        assert_eq!(p[512..].iter().filter(|c| !shared.contains(c)).count(), 256);
    }
    assert_eq!(set.discarded(3072).len(), 1536);
}

#[test]
fn adapt_errors() {
    let ffn = random_ffn(2, 8, 0);
    let id: Vec<usize> = (0..8).collect();
    assert!(adapt_ffn(&ffn, &id, 2, 5).is_err());
    assert!(adapt_ffn(&ffn, &id, 9, 0).is_err());
    assert!(adapt_ffn(&ffn, &id, 0, 0).is_err());
    assert!(adapt_ffn(&ffn, &[0, 1, 2], 2, 0).is_err());
    assert!(adapt_ffn(&ffn, &[0, 0, 1, 2, 3, 4, 5, 6], 2, 0).is_err());
    // wider experts than the columns allow
    assert!(adapt_ffn_with_dim(&ffn, &id, 2, 0, 5).is_err());
    assert!(adapt_ffn_with_dim(&ffn, &id, 2, 2, 5).is_ok());
}

#[test]
fn inverse_and_random_variants() {
    let ffn = random_ffn(2, 8, 0);
    let ordering: Vec<usize> = vec![3, 1, 4, 0, 5, 2, 7, 6];
    let inv = adapt_inverse(&ffn, &ordering, 2, 1, 4).unwrap();
    assert_eq!(inv.provenance[0][0], 6);
    let r1 = adapt_random(&ffn, &ordering, 2, 1, 4, 9).unwrap();
    let r2 = adapt_random(&ffn, &ordering, 2, 1, 4, 9).unwrap();
    assert_eq!(r1, r2);
    let imp = adapt_with_strategy(AdaptStrategy::Import, &ffn, &ordering, 2, 1, 4, 0).unwrap();
    assert_eq!(imp.provenance[0][0], 3);
}

proptest! {
    #[test]
    fn split_shares_top_columns_and_keeps_the_rest_disjoint(
        dh in 1usize..64,
        n in 1usize..9,
        s_frac in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        prop_assume!(n <= dh);
        let e = dh / n;
        let s = ((e as f64) * s_frac) as usize;
        let ffn = random_ffn(2, dh, seed);
        let mut ordering: Vec<usize> = (0..dh).collect();
        ordering.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let set = adapt_ffn(&ffn, &ordering, n, s).unwrap();
        let shared: BTreeSet<usize> = ordering[..s].iter().copied().collect();
        let mut seen = BTreeSet::new();
        for p in &set.provenance {
            prop_assert_eq!(p.len(), e);
            prop_assert_eq!(p[..s].iter().copied().collect::<BTreeSet<_>>(), shared.clone());
            for &c in &p[s..] {
                prop_assert!(!shared.contains(&c));
                prop_assert!(seen.insert(c), "column {} in two experts", c);
            }
        }
        let common = set.provenance.iter().skip(1).fold(
            set.provenance[0].iter().copied().collect::<BTreeSet<_>>(),
            |acc, p| acc.intersection(&p.iter().copied().collect()).copied().collect(),
        );
        if n > 1 {
            prop_assert_eq!(common.len(), s);
        }
        prop_assert_eq!(set.discarded(dh).len(), dh - (s + n * (e - s)));
        if n * e == dh {
            prop_assert_eq!(set.discarded(dh).len(), (n - 1) * s);
        }
    }
}

#[test]
fn hash_random_is_seeded_and_in_range() {
    let freqs = vec![1u64; 50];
    let a = build_routing(RoutingStrategy::HashRandom, &freqs, 4, 7).unwrap();
    let b = build_routing(RoutingStrategy::HashRandom, &freqs, 4, 7).unwrap();
    assert_eq!(a, b);
    assert!(a.table().unwrap().iter().all(|&e| e < 4));
    assert_eq!(a.table().unwrap().len(), 50);
    let c = build_routing(RoutingStrategy::HashRandom, &freqs, 4, 8).unwrap();
    assert_ne!(a, c);
}

#[test]
fn balanced_hash_greedy_example() {
    // a:4 b:3 c:2 d:1
    let freqs = [4, 3, 2, 1];
    let t = build_routing(RoutingStrategy::HashBalanced, &freqs, 2, 0).unwrap();
    assert_eq!(t.table().unwrap(), &[0, 1, 1, 0]);
    assert_eq!(expert_loads(t.table().unwrap(), &freqs, 2), vec![5, 5]);
}

#[test]
fn balanced_hash_matches_brute_force_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let freqs: Vec<u64> = (0..40).map(|_| rng.random_range(0..100)).collect();
    let t = build_routing(RoutingStrategy::HashBalanced, &freqs, 3, 0).unwrap();
    let mut toks: Vec<(u64, usize)> = freqs.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    toks.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut loads = [0u64; 3];
    for (f, tok) in toks {
        let mut best = 0;
        for e in 1..3 {
            if loads[e] < loads[best] {
                best = e;
            }
        }
        assert_eq!(t.table().unwrap()[tok], best);
        loads[best] += f;
    }
}

#[test]
fn routing_errors() {
    assert!(build_routing(RoutingStrategy::HashRandom, &[], 2, 0).is_err());
    assert!(build_routing(RoutingStrategy::Gate, &[1], 0, 0).is_err());
    let t = RoutingTable::HashRandom { table: vec![0, 1] };
    assert!(t.route(2).unwrap().is_err());
    assert!(t.validate(2, 1).is_err());
    assert!(t.validate(3, 2).is_err());
    assert!(RoutingTable::Gate.route(0).is_none());
}

#[test]
fn routing_table_json_round_trip() {
    let t = build_routing(RoutingStrategy::HashBalanced, &[5, 1, 3], 2, 0).unwrap();
    let s = serde_json::to_string(&t).unwrap();
    assert!(s.contains("\"strategy\":\"hash_balanced\""));
    assert_eq!(serde_json::from_str::<RoutingTable>(&s).unwrap(), t);
}

fn probs_of(repr: &Tensor, wg: &Tensor) -> Vec<f64> {
    let mut g = Graph::no_grad();
    let (r, w) = (g.constant(repr), g.constant(wg));
    let p = gate_probs(&mut g, r, w).unwrap();
    g.value(p).to_vec()
}

#[test]
fn zero_gate_is_uniform() {
    let repr = Tensor::randn(&[3, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(probs_of(&repr, &Tensor::zeros(&[5, 4])), vec![0.25; 12]);
}

#[test]
fn gate_probs_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let repr = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let wg = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let got = probs_of(&repr, &wg);
    for b in 0..3 {
        let logits: Vec<f64> = (0..4)
            .map(|e| (0..5).map(|i| repr.data()[b * 5 + i] * wg.data()[i * 4 + e]).sum())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let row = &got[b * 4..(b + 1) * 4];
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for e in 0..4 {
            assert!((row[e] - logits[e].exp() / z).abs() <= 1e-12);
        }
    }
}

struct Layer {
    store: ParamStore,
    layer: MoeFfn,
    weights: Vec<FfnWeights>,
    wg: Option<Tensor>,
}

fn build_layer(weights: Vec<FfnWeights>, routing: RoutingTable, seed: u64) -> Layer {
    let mut store = ParamStore::new();
    let d = weights[0].embed_dim();
    let experts = weights
        .iter()
        .enumerate()
        .map(|(e, w)| FfnParams {
            w1: store.insert(format!("{e}.w1"), w.w1.clone()).unwrap(),
            b1: store.insert(format!("{e}.b1"), w.b1.clone()).unwrap(),
            w2: store.insert(format!("{e}.w2"), w.w2.clone()).unwrap(),
            b2: store.insert(format!("{e}.b2"), w.b2.clone()).unwrap(),
        })
        .collect();
    let (gate, wg) = if routing == RoutingTable::Gate {
        let t = Tensor::randn(&[d, weights.len()], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        (Some(store.insert("gate", t.clone()).unwrap()), Some(t))
    } else {
        (None, None)
    };
    Layer {
        store,
        layer: MoeFfn {
            experts,
            gate,
            routing,
            provenance: Vec::new(),
        },
        weights,
        wg,
    }
}

fn run_layer(l: &Layer, a: &Tensor, ids: &[usize], mask: &[f64]) -> Vec<f64> {
    let mut g = Graph::no_grad();
    let mut binder = Binder::new(&l.store);
    let av = g.constant(a);
    let out = moe_forward(&mut g, &mut binder, &l.store, &l.layer, av, ids, mask).unwrap();
    assert_eq!(g.shape(out), a.shape());
    g.value(out).to_vec()
}

/// Dispatches each token on its own with plain loops.
fn naive_dispatch(l: &Layer, a: &Tensor, ids: &[usize], mask: &[f64], b: usize, s: usize, d: usize) -> Vec<f64> {
    let n = l.weights.len();
    let mut out = vec![0.0; b * s * d];
    for bi in 0..b {
        let (expert, scale) = match &l.layer.routing {
            RoutingTable::Gate => {
                let wg = l.wg.as_ref().unwrap();
                let cnt: f64 = mask[bi * s..(bi + 1) * s].iter().sum();
                let mean: Vec<f64> = (0..d)
                    .map(|j| (0..s).map(|t| mask[bi * s + t] * a.data()[(bi * s + t) * d + j]).sum::<f64>() / cnt)
                    .collect();
                let logits: Vec<f64> = (0..n).map(|e| (0..d).map(|j| mean[j] * wg.data()[j * n + e]).sum()).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
                let best = (0..n).fold(0, |best, e| if logits[e] > logits[best] { e } else { best });
                (Some(best), (logits[best] - m).exp() / z)
            }
            _ => (None, 1.0),
        };
        for t in 0..s {
            let r = bi * s + t;
            let e = expert.unwrap_or_else(|| l.layer.routing.table().unwrap()[ids[r]]);
            let row = Tensor::new(vec![1, d], a.data()[r * d..(r + 1) * d].to_vec()).unwrap();
            let y = eval_ffn(&l.weights[e], &row);
            for j in 0..d {
                out[r * d + j] = scale * y[j];
            }
        }
    }
    out
}

#[test]
fn moe_forward_matches_naive_dispatch() {
    let (b, s, d, n) = (3, 5, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ids: Vec<usize> = (0..b * s).map(|_| rng.random_range(0..10)).collect();
    let mask: Vec<f64> = (0..b * s).map(|r| if r % s < 3 + r / s % 2 { 1.0 } else { 0.0 }).collect();
    let a = Tensor::randn(&[b, s, d], 1.0, &mut rng);
    for strategy in [RoutingStrategy::HashRandom, RoutingStrategy::HashBalanced, RoutingStrategy::Gate] {
        let freqs: Vec<u64> = (0..10).map(|i| 10 - i).collect();
        let routing = build_routing(strategy, &freqs, n, 5).unwrap();
        let weights = (0..n as u64).map(|e| random_ffn(d, 3, 100 + e)).collect();
        let layer = build_layer(weights, routing, 6);
        let got = run_layer(&layer, &a, &ids, &mask);
        let want = naive_dispatch(&layer, &a, &ids, &mask, b, s, d);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() <= 1e-12, "{strategy:?}: {x} vs {y}");
        }
    }
}

#[test]
fn identical_experts_make_hash_routing_irrelevant() {
    let (b, s, d) = (2, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<usize> = (0..b * s).map(|_| rng.random_range(0..6)).collect();
    let a = Tensor::randn(&[b, s, d], 1.0, &mut rng);
    let f = random_ffn(d, 5, 2);
    let dense = eval_ffn(&f, &a);
    for strategy in [RoutingStrategy::HashRandom, RoutingStrategy::HashBalanced] {
        let routing = build_routing(strategy, &[3, 1, 4, 1, 5, 9], 3, 0).unwrap();
        let layer = build_layer(vec![f.clone(), f.clone(), f.clone()], routing, 0);
        assert_eq!(run_layer(&layer, &a, &ids, &[1.0; 8]), dense);
    }
    // with one expert the gate probability is exactly 1
    let layer = build_layer(vec![f.clone()], RoutingTable::Gate, 0);
    for (x, y) in run_layer(&layer, &a, &ids, &[1.0; 8]).iter().zip(&dense) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn gate_weight_receives_gradient() {
    let (b, s, d) = (2, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = Tensor::randn(&[b, s, d], 1.0, &mut rng);
    let layer = build_layer((0..2).map(|e| random_ffn(d, 3, e)).collect(), RoutingTable::Gate, 1);
    let mut g = Graph::new();
    let mut binder = Binder::new(&layer.store);
    let av = g.constant(&a);
    let out = moe_forward(&mut g, &mut binder, &layer.store, &layer.layer, av, &[3; 6], &[1.0; 6]).unwrap();
    let loss = g.sum(out).unwrap();
    let grads = g.backward(loss).unwrap();
    let gw = binder.grad_of(&grads, &layer.store, layer.layer.gate.unwrap());
    assert!(gw.iter().any(|v| v.abs() > 1e-8));
}

fn tiny() -> ModelConfig {
    crate::model::tests::tiny_config()
}

fn student_from(teacher: &EncoderModel, moe: MoeConfig, seed: u64) -> EncoderModel {
    let cfg = teacher.config();
    let ordering: Vec<usize> = (0..cfg.ffn_hidden).rev().collect();
    let freqs: Vec<u64> = (0..cfg.vocab_size as u64).collect();
    let layers = (0..cfg.layers)
        .map(|l| {
            let set = adapt_ffn_with_dim(&teacher.dense_ffn(l).unwrap(), &ordering, moe.experts, moe.shared_dim, moe.expert_dim).unwrap();
            let routing = build_routing(moe.routing, &freqs, moe.experts, seed + l as u64).unwrap();
            (set, routing)
        })
        .collect();
    teacher.with_experts(&moe, layers, seed).unwrap()
}

#[test]
fn single_expert_student_reproduces_teacher_logits() {
    let teacher = EncoderModel::new_dense(&tiny(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for strategy in [RoutingStrategy::HashRandom, RoutingStrategy::HashBalanced, RoutingStrategy::Gate] {
        let student = student_from(&teacher, MoeConfig::even_split(16, 1, 0, strategy), 1);
        for _ in 0..10 {
            let batch = crate::model::tests::random_batch(&mut rng, 3, 6, 20, true);
            let (t, s) = (teacher.logits(&batch).unwrap(), student.logits(&batch).unwrap());
            for (x, y) in t.data().iter().zip(s.data()) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn effective_count_enumerates_activated_tensors() {
    let teacher = EncoderModel::new_dense(&tiny(), 0).unwrap();
    for (routing, n, s) in [(RoutingStrategy::HashRandom, 4, 2), (RoutingStrategy::Gate, 2, 0), (RoutingStrategy::HashBalanced, 1, 0)] {
        let moe = MoeConfig::even_split(16, n, s, routing);
        let student = student_from(&teacher, moe.clone(), 0);
        // one expert per layer, everything else once
        let activated: usize = student
            .params()
            .iter()
            .filter(|(name, _)| !name.contains(".experts.") || name.contains(".experts.0."))
            .map(|(_, t)| t.numel())
            .sum();
        let cfg = student.config().clone();
        assert_eq!(count_effective_params(&cfg).total, activated as u64);
        assert_eq!(crate::model::count_total_params(&cfg), student.params().numel() as u64);
        assert!(count_effective_params(&cfg).total <= count_effective_params(teacher.config()).total + 16 * 2 * 2);
    }
}

#[test]
fn student_copies_non_ffn_parameters() {
    let teacher = EncoderModel::new_dense(&tiny(), 0).unwrap();
    let student = student_from(&teacher, MoeConfig::even_split(16, 2, 1, RoutingStrategy::HashRandom), 0);
    for (name, t) in teacher.params().iter() {
        if !name.contains(".ffn.w") && !name.contains(".ffn.b") {
            let id = student.params().id(name).unwrap();
            assert_eq!(student.params().get(id).data(), t.data(), "{name}");
        }
    }
    assert!(student.with_experts(&MoeConfig::even_split(16, 2, 1, RoutingStrategy::HashRandom), vec![], 0).is_err());
}
