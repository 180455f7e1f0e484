//! Pass/fail checks shared by the acceptance target and the topical test files.

use std::collections::{BTreeSet, HashMap};
use std::time::Instant;

use kgattack_core::encoder::{GnnForward, GnnParams, GruParams};
use kgattack_core::env::{rank_metrics, BlackBoxTarget};
use kgattack_core::harness::{run_cell, SweepAxis};
use kgattack_core::numeric::gradcheck;
use kgattack_core::numeric::{softmax, ParameterSet, Tape, Tensor};
use kgattack_core::policy::{anchor_policy, AnchorHead, Critic, ItemHead};
use kgattack_core::trainer::{critic_loss, discounted_returns, ppo_objective, ppo_objective_var, Transition};
use kgattack_core::transe::{hits_at_1, pretrain, KgEmbeddings, Norm, PretrainConfig};
use kgattack_core::{
    ablation_sweep, AnchorSource, AttackerKind, DataConfig, EncoderConfig, EntityId, ExperimentConfig, ExperimentResult,
    FakeProfile, ItemId, ItemSource, KnowledgeGraph, RecommenderEnv, SyntheticSpec, Triple,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{oracle_candidates, oracle_layers, random_graph, toy_kg};

pub struct Outcome {
    pub ok: bool,
    pub detail: String,
}

impl Outcome {
    fn new(ok: bool, detail: impl Into<String>) -> Self {
        Self { ok, detail: detail.into() }
    }
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, random_vec(rng, rows * cols)).unwrap()
}

/// Five entities, items 0..3, with fan-in so attention has work to do.
pub fn gnn_fixture(rng: &mut ChaCha8Rng, dim: usize) -> (KnowledgeGraph, KgEmbeddings) {
    let triples = [
        Triple::new(0, 0, 1),
        Triple::new(0, 1, 4),
        Triple::new(1, 0, 2),
        Triple::new(1, 1, 4),
        Triple::new(2, 0, 0),
        Triple::new(2, 0, 3),
        Triple::new(4, 1, 0),
        Triple::new(4, 1, 3),
        Triple::new(3, 0, 4),
    ];
    let map = (0..4).map(|i| Some(EntityId(i))).collect();
    let g = KnowledgeGraph::from_triples(5, 2, triples, map).unwrap().0;
    let emb = KgEmbeddings::new(random_tensor(rng, 5, dim), random_tensor(rng, 2, dim)).unwrap();
    (g, emb)
}

/// Worst relative error of each trainable layer over ten random points.
pub fn layer_gradient_errors() -> Vec<(&'static str, f64)> {
    let h = 1e-6;
    let mut worst: Vec<(&'static str, f64)> = ["affine", "gru", "gnn", "anchor_head", "item_head", "critic"]
        .into_iter()
        .map(|n| (n, 0.0))
        .collect();
    let mut record = |name: &str, e: f64| {
        let slot = worst.iter_mut().find(|(n, _)| *n == name).unwrap();
        slot.1 = slot.1.max(e);
    };
    for point in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);

        let mut set = ParameterSet::new();
        let w = set.add("w", random_tensor(&mut rng, 4, 5)).unwrap();
        let b = set.add("b", Tensor::vector(random_vec(&mut rng, 4))).unwrap();
        let x = random_vec(&mut rng, 5);
        let r = gradcheck::check(&set, h, |t, p| {
            let xv = t.constant(Tensor::vector(x.clone()));
            let y = t.tanh(t.affine(p[w], xv, p[b])?);
            Ok(t.sum(t.square(y)))
        })
        .unwrap();
        record("affine", r.max_rel_error);

        let mut gru = GruParams::new(5, 4, &mut rng).unwrap();
        for id in [gru.b_z, gru.b_u, gru.b_c] {
            *gru.set.get_mut(id) = Tensor::vector(random_vec(&mut rng, 4));
        }
        let inputs: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 5)).collect();
        let c = random_vec(&mut rng, 4);
        let r = gradcheck::check(&gru.set, h, |t, p| {
            let xs: Vec<_> = inputs.iter().map(|v| t.constant(Tensor::vector(v.clone()))).collect();
            let hs = gru.run(t, p, &xs)?;
            let cv = t.constant(Tensor::vector(c.clone()));
            t.dot(*hs.last().unwrap(), cv)
        })
        .unwrap();
        record("gru", r.max_rel_error);

        let (g, emb) = gnn_fixture(&mut rng, 4);
        let gnn = GnnParams::new(4, 2, &mut rng).unwrap();
        let cfg = EncoderConfig {
            gnn_layers: 2,
            ..EncoderConfig::default()
        };
        let cs: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 4)).collect();
        let r = gradcheck::check(&gnn.set, h, |t, p| {
            let mut fwd = GnnForward::new(t, &g, &emb, &gnn, p, &cfg)?;
            let mut terms = Vec::new();
            for (i, c) in cs.iter().enumerate() {
                let v = fwd.item(ItemId(i as u32))?;
                terms.push(t.dot(v, t.constant(Tensor::vector(c.clone())))?);
            }
            Ok(t.sum(t.concat(&terms)?))
        })
        .unwrap();
        record("gnn", r.max_rel_error);

        let head = AnchorHead::new(6, 5, 8, &mut rng).unwrap();
        let x = random_vec(&mut rng, 6);
        let len = rng.gen_range(1..=8);
        let pick = rng.gen_range(0..len);
        let r = gradcheck::check(&head.set, h, |t, p| {
            let lp = head.log_probs(t, p, t.constant(Tensor::vector(x.clone())), len)?;
            Ok(t.sum(t.gather(lp, &[pick])?))
        })
        .unwrap();
        record("anchor_head", r.max_rel_error);

        let head = ItemHead::new(6, 5, 4, &mut rng).unwrap();
        let x = random_vec(&mut rng, 6);
        let pool: Vec<Vec<f64>> = (0..5).map(|_| random_vec(&mut rng, 4)).collect();
        let pick = rng.gen_range(0..5);
        let r = gradcheck::check(&head.set, h, |t, p| {
            let vars: Vec<_> = pool.iter().map(|v| t.constant(Tensor::vector(v.clone()))).collect();
            let lp = head.log_probs(t, p, t.constant(Tensor::vector(x.clone())), &vars)?;
            Ok(t.sum(t.gather(lp, &[pick])?))
        })
        .unwrap();
        record("item_head", r.max_rel_error);

        let mut critic = Critic::new(6, 5, &mut rng).unwrap();
        *critic.set.get_mut(critic.b1) = Tensor::vector(random_vec(&mut rng, 5));
        let x = random_vec(&mut rng, 6);
        let r = gradcheck::check(&critic.set, h, |t, p| {
            let v = critic.value(t, p, t.constant(Tensor::vector(x.clone())))?;
            Ok(t.sum(t.square(t.add_scalar(v, -0.3))))
        })
        .unwrap();
        record("critic", r.max_rel_error);
    }
    worst
}

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let errors = layer_gradient_errors();
    let secs = start.elapsed().as_secs_f64();
    let ok = errors.iter().all(|(_, e)| *e < 1e-4) && secs < 30.0;
    let detail = errors
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::new(ok, format!("{detail}; {secs:.1}s"))
}

pub fn graph_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut compared = 0usize;
    for graph_no in 0..100 {
        let g = random_graph(&mut rng, 200);
        for anchor in g.mapped_items().collect::<Vec<_>>() {
            let hops = rng.gen_range(1..=3);
            let got: BTreeSet<ItemId> = g.candidate_set(anchor, hops).unwrap().into_iter().collect();
            if got != oracle_candidates(&g, anchor, hops) {
                return Outcome::new(false, format!("graph {graph_no}: candidates of {anchor} differ at H={hops}"));
            }
            compared += 1;
        }
        let seed: BTreeSet<EntityId> = (0..3)
            .map(|_| EntityId(rng.gen_range(0..g.entity_count() as u32)))
            .collect();
        if g.hop_expand(&seed, 3).unwrap() != oracle_layers(&g, &seed, 3) {
            return Outcome::new(false, format!("graph {graph_no}: layers differ"));
        }
    }
    Outcome::new(true, format!("100 graphs, {compared} anchors"))
}

pub fn mask_fuzz() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_masked = 0.0f64;
    let mut worst_sum = 0.0f64;
    for _ in 0..1000 {
        let positions = rng.gen_range(1..=12);
        let dim = rng.gen_range(1..=8);
        let mut head = AnchorHead::new(dim, rng.gen_range(1..=8), positions, &mut rng).unwrap();
        let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
        for id in [head.w1, head.w2] {
            for v in head.set.get_mut(id).data_mut() {
                *v = rng.gen_range(-1.0..1.0) * scale;
            }
        }
        let x = random_vec(&mut rng, dim);
        let t = rng.gen_range(1..=positions);
        let probs = anchor_policy(&head, &x, t, &mut rng).unwrap().probs;
        worst_masked = probs[t..].iter().fold(worst_masked, |m, &p| m.max(p));
        worst_sum = worst_sum.max((probs[..t].iter().sum::<f64>() - 1.0).abs());
    }
    Outcome::new(
        worst_masked < 1e-30 && worst_sum <= 1e-9,
        format!("max masked prob {worst_masked:.1e}, max |sum-1| {worst_sum:.1e}"),
    )
}

/// `∇ log π(a|x)` of the anchor head written out by hand.
fn anchor_log_prob_grad(w1: &Tensor, w2: &Tensor, x: &[f64], t: usize, a: usize) -> (Vec<f64>, Vec<f64>) {
    let (hid, sd, pos) = (w1.rows(), w1.cols(), w2.rows());
    let pre: Vec<f64> = (0..hid).map(|i| (0..sd).map(|j| w1.row(i)[j] * x[j]).sum()).collect();
    let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
    let logits: Vec<f64> = (0..pos)
        .map(|r| {
            let l: f64 = (0..hid).map(|i| w2.row(r)[i] * act[i]).sum();
            if r < t {
                l
            } else {
                l - 1e9
            }
        })
        .collect();
    let p = softmax(&logits);
    let delta: Vec<f64> = (0..pos).map(|r| f64::from(u8::from(r == a)) - p[r]).collect();
    let mut g2 = vec![0.0; pos * hid];
    for r in 0..pos {
        for i in 0..hid {
            g2[r * hid + i] = delta[r] * act[i];
        }
    }
    let mut g1 = vec![0.0; hid * sd];
    for i in 0..hid {
        if pre[i] > 0.0 {
            let back: f64 = (0..pos).map(|r| w2.row(r)[i] * delta[r]).sum();
            for j in 0..sd {
                g1[i * sd + j] = back * x[j];
            }
        }
    }
    (g1, g2)
}

pub fn ppo_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst_obj = 0.0f64;
    let mut worst_grad = 0.0f64;
    for _ in 0..20 {
        let head = AnchorHead::new(6, 5, 9, &mut rng).unwrap();
        let steps = rng.gen_range(1..=12);
        let samples: Vec<(Vec<f64>, usize, usize, f64)> = (0..steps)
            .map(|_| {
                let t = rng.gen_range(1..=9);
                (random_vec(&mut rng, 6), t, rng.gen_range(0..t), rng.gen_range(-2.0..2.0))
            })
            .collect();
        let tape = Tape::new();
        let p = head.set.bind(&tape);
        let mut new = Vec::new();
        for (x, t, a, _) in &samples {
            let lp = head.log_probs(&tape, &p, tape.constant(Tensor::vector(x.clone())), *t).unwrap();
            new.push(tape.sum(tape.gather(lp, &[*a]).unwrap()));
        }
        let old: Vec<f64> = new.iter().map(|&v| tape.scalar(v)).collect();
        let adv: Vec<f64> = samples.iter().map(|s| s.3).collect();
        let obj = ppo_objective_var(&tape, &new, &old, &adv, 0.2).unwrap();
        let mean_adv = adv.iter().sum::<f64>() / steps as f64;
        worst_obj = worst_obj.max((tape.scalar(obj) - mean_adv).abs());
        worst_obj = worst_obj.max((ppo_objective(&old, &old, &adv, 0.2) - mean_adv).abs());
        let grads = tape.backward(obj).unwrap();

        let (w1, w2) = (head.set.get(head.w1), head.set.get(head.w2));
        let mut e1 = vec![0.0; w1.len()];
        let mut e2 = vec![0.0; w2.len()];
        for (x, t, a, adv) in &samples {
            let (g1, g2) = anchor_log_prob_grad(w1, w2, x, *t, *a);
            for (e, g) in e1.iter_mut().zip(g1) {
                *e += adv * g / steps as f64;
            }
            for (e, g) in e2.iter_mut().zip(g2) {
                *e += adv * g / steps as f64;
            }
        }
        for (id, expect) in [(head.w1, e1), (head.w2, e2)] {
            let got = grads.get(p[id]).unwrap();
            let num: f64 = got.iter().zip(&expect).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = expect.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
            worst_grad = worst_grad.max(num / den);
        }
    }
    Outcome::new(
        worst_obj < 1e-12 && worst_grad < 1e-6,
        format!("|obj-mean adv| {worst_obj:.1e}, grad rel err {worst_grad:.1e}"),
    )
}

fn brute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| (t..rewards.len()).map(|k| gamma.powi((k - t) as i32) * rewards[k]).sum())
        .collect()
}

fn brute_value(critic: &Critic, x: &[f64]) -> f64 {
    let (w1, b1, w2, b2) = (
        critic.set.get(critic.w1),
        critic.set.get(critic.b1),
        critic.set.get(critic.w2),
        critic.set.get(critic.b2),
    );
    let hidden: Vec<f64> = (0..w1.rows())
        .map(|i| (w1.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b1.data()[i]).max(0.0))
        .collect();
    w2.row(0).iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>() + b2.data()[0]
}

pub fn transition(trajectory: usize, step: usize, state: Vec<f64>, reward: f64, terminal: bool) -> Transition {
    Transition {
        trajectory,
        step,
        state,
        profile: vec![ItemId(0)],
        anchor_index: 0,
        anchor_source: AnchorSource::TargetForced,
        anchor_log_prob: None,
        item: ItemId(1),
        item_source: ItemSource::Policy,
        item_log_prob: Some(-1.0),
        pool: vec![ItemId(1)],
        reward,
        terminal,
    }
}

pub fn return_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..=20);
        let gamma = rng.gen_range(0.0..=1.0);
        let rewards = random_vec(&mut rng, n);
        for (a, b) in discounted_returns(&rewards, gamma).iter().zip(brute_returns(&rewards, gamma)) {
            worst = worst.max((a - b).abs());
        }
    }
    for _ in 0..50 {
        let critic = Critic::new(4, 6, &mut rng).unwrap();
        let gamma = rng.gen_range(0.5..=1.0);
        let mut transitions = Vec::new();
        let mut expect = 0.0;
        for traj in 0..3 {
            let len = rng.gen_range(1..=6);
            let rewards = random_vec(&mut rng, len);
            let states: Vec<Vec<f64>> = (0..len).map(|_| random_vec(&mut rng, 4)).collect();
            for (t, g) in brute_returns(&rewards, gamma).into_iter().enumerate() {
                expect += (g - brute_value(&critic, &states[t])).powi(2);
                transitions.push(transition(traj, t, states[t].clone(), rewards[t], t + 1 == len));
            }
        }
        let rev: Vec<Transition> = transitions.into_iter().rev().collect();
        worst = worst.max((critic_loss(&rev, &critic, gamma).unwrap() - expect).abs());
    }
    Outcome::new(worst <= 1e-12, format!("max abs error {worst:.1e}"))
}

pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        user_count: 150,
        item_count: 80,
        non_item_entity_count: 60,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_data(DataConfig {
        synthetic: Some(small_spec(seed)),
        files: None,
    });
    cfg.protocol.spy_users = 20;
    cfg.protocol.normal_users = 100;
    cfg.protocol.candidates = 40;
    cfg.attack.budget = 12;
    cfg.attack.profile_len = 4;
    cfg.pretrain.epochs = 20;
    cfg.target.mf.epochs = 10;
    cfg.seeds = vec![seed];
    cfg
}

/// Sorts the candidates by score and counts spies whose target lands in the top `k`.
pub fn oracle_reward(env: &mut RecommenderEnv, k: usize) -> f64 {
    let target = env.target();
    let spies = env.spies().to_vec();
    let mut hits = 0usize;
    for &u in &spies {
        let list = env.candidates(u).unwrap().to_vec();
        let mut scored: Vec<(ItemId, f64)> = list.iter().map(|&v| (v, env.score(u, v).unwrap())).collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        if scored.iter().take(k).any(|(v, _)| *v == target) {
            hits += 1;
        }
    }
    hits as f64 / spies.len() as f64
}

pub fn reward_fidelity() -> Outcome {
    let mut queries = 0;
    for seed in 0..3u64 {
        let cfg = small_config(seed);
        let data = cfg.data.build().unwrap();
        for k in [1, 5, 20] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let target = kgattack_core::env::pick_target(&data.interactions, 10, &mut rng).unwrap();
            let env_cfg = kgattack_core::EnvConfig {
                spy_users: 20,
                normal_users: 100,
                candidates: 40,
                budget: 12,
                k,
                max_profile_len: 5,
                mf: kgattack_core::MfConfig {
                    epochs: 10,
                    seed,
                    ..Default::default()
                },
                seed,
                ..Default::default()
            };
            let mut env = RecommenderEnv::new(data.interactions.clone(), target, env_cfg).unwrap();
            let spies = env.spies().len() as f64;
            for _ in 0..4 {
                let got = env.query_reward().unwrap().reward;
                let want = oracle_reward(&mut env, k);
                let on_grid = ((got * spies).round() - got * spies).abs() < 1e-9;
                if got != want || !on_grid {
                    return Outcome::new(false, format!("seed {seed} k {k}: reward {got} vs oracle {want}"));
                }
                queries += 1;
                let profiles: Vec<FakeProfile> = (0..3)
                    .map(|_| {
                        let mut items = vec![target];
                        while items.len() < 5 {
                            let v = ItemId(rng.gen_range(0..80));
                            if !items.contains(&v) {
                                items.push(v);
                            }
                        }
                        FakeProfile::from_items(items, 5).unwrap()
                    })
                    .collect();
                env.inject(&profiles).unwrap();
            }
        }
    }
    let mut ranks = vec![3usize; 10];
    ranks.extend(vec![50usize; 10]);
    let ndcg = rank_metrics(&ranks, 20).ndcg;
    Outcome::new(ndcg == 0.25, format!("{queries} queries match the oracle, hand NDCG {ndcg}"))
}

pub fn transe_learning() -> Outcome {
    let start = Instant::now();
    let g = toy_kg(4);
    let cfg = PretrainConfig {
        dim: 16,
        epochs: 500,
        lr: 0.01,
        margin: 1.0,
        norm: Norm::L2,
        batch: 10,
        seed: 11,
    };
    let out = pretrain(&g, &cfg).unwrap();
    let first = out.loss_trace[0];
    let last = *out.loss_trace.last().unwrap();
    let hits = hits_at_1(&out.embeddings, g.triples(), Norm::L2).unwrap();
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        last < first && hits >= 0.8 && secs < 60.0,
        format!("loss {first:.2} -> {last:.2}, hits@1 {hits:.3}, {secs:.1}s"),
    )
}

pub fn protocol_constants() -> Outcome {
    let cfg = ExperimentConfig::from_toml("[data.synthetic]\n").unwrap();
    let seen = [
        ("budget", cfg.attack.budget, 75),
        ("profiles per query", cfg.attack.profiles_per_episode, 3),
        ("spy users", cfg.protocol.spy_users, 50),
        ("normal users", cfg.protocol.normal_users, 500),
        ("candidates", cfg.protocol.candidates, 100),
        ("hops", cfg.attack.hops, 2),
    ];
    let bad: Vec<String> = seen
        .iter()
        .filter(|(_, got, want)| got != want)
        .map(|(n, got, want)| format!("{n} {got}!={want}"))
        .collect();
    let ks_ok = cfg.protocol.ks == vec![10, 20];
    let ok = bad.is_empty() && ks_ok;
    Outcome::new(
        ok,
        if ok {
            "budget 75, N 3, 50 spies, 500 normal, 100 candidates, H 2, k {10,20}".to_string()
        } else {
            format!("{bad:?} ks {:?}", cfg.protocol.ks)
        },
    )
}

pub fn reference_config() -> ExperimentConfig {
    ExperimentConfig::from_toml("name = \"synthetic\"\n[data.synthetic]\n").unwrap()
}

pub struct ReferenceRun {
    pub result: ExperimentResult,
    pub seconds: f64,
}

pub fn reference_run() -> ReferenceRun {
    let cfg = reference_config();
    let start = Instant::now();
    let data = cfg.data.build().unwrap();
    let result = kgattack_core::run_experiment_on(
        &cfg,
        &data,
        &[AttackerKind::Kgattack, AttackerKind::RandomAttack, AttackerKind::TargetAttack],
    )
    .unwrap();
    ReferenceRun {
        result,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn per_seed_hr(result: &ExperimentResult, attacker: &str) -> HashMap<u64, f64> {
    result
        .rows_for(attacker, 20)
        .filter_map(|r| r.seed.map(|s| (s, r.hr)))
        .collect()
}

pub fn directional_uplift(run: &ReferenceRun) -> Outcome {
    let r = &run.result;
    let kg = r.aggregate("KGAttack", 20).unwrap().hr;
    let random = r.aggregate("RandomAttack", 20).unwrap().hr;
    let kg_seeds = per_seed_hr(r, "KGAttack");
    let target_seeds = per_seed_hr(r, "TargetAttack");
    let wins = kg_seeds.iter().filter(|(s, hr)| **hr >= target_seeds[s]).count();
    Outcome::new(
        kg >= random && wins >= 3 && run.seconds < 600.0,
        format!(
            "median HR@20 KGAttack {kg:.3} vs RandomAttack {random:.3}; beats TargetAttack in {wins}/{}; {:.0}s",
            kg_seeds.len(),
            run.seconds
        ),
    )
}

pub fn learning_signal(run: &ReferenceRun) -> Outcome {
    let mut improved = 0;
    let mut total = 0;
    let mut parts = Vec::new();
    for cell in run.result.cells.iter().filter(|c| c.attacker == AttackerKind::Kgattack) {
        let rewards: Vec<f64> = cell.trace.iter().map(|m| m.reward).collect();
        let n = rewards.len();
        let head = rewards[..5].iter().sum::<f64>() / 5.0;
        let tail = rewards[n - 5..].iter().sum::<f64>() / 5.0;
        total += 1;
        if tail >= head {
            improved += 1;
        }
        parts.push(format!("{head:.2}->{tail:.2}"));
    }
    Outcome::new(improved >= 4, format!("{improved}/{total} seeds ({})", parts.join(" ")))
}

pub fn determinism() -> Outcome {
    let cfg = reference_config();
    let data = cfg.data.build().unwrap();
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let cell = run_cell(&cfg, &data, AttackerKind::Kgattack, 3).unwrap();
        kgattack_core::trainer::write_metrics(&dir.path().join("m.csv"), &cell.trace, &cfg.hash()).unwrap();
        files.push(std::fs::read(dir.path().join("m.csv")).unwrap());
    }
    Outcome::new(files[0] == files[1], format!("{} bytes per metrics file", files[0].len()))
}

pub fn ablation_plumbing() -> Outcome {
    let mut cfg = reference_config();
    cfg.seeds = vec![0, 1, 2];
    let eps = ablation_sweep(&cfg, SweepAxis::Epsilon, &[0.1, 0.3, 0.5, 0.7, 0.9]).unwrap();
    let hops = ablation_sweep(&cfg, SweepAxis::Hops, &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let budget = ablation_sweep(&cfg, SweepAxis::Budget, &[0.0, 15.0]).unwrap();
    let shape = |t: &kgattack_core::SweepTable, n: usize| {
        let text = t.render();
        let lines: Vec<&str> = text.lines().collect();
        lines.len() == 2 && lines.iter().all(|l| l.split(',').count() == n + 1) && t.hr.len() == n
    };
    let zero_matches = budget.hr[0] == budget.without_hr[0] && budget.ndcg[0] == budget.without_ndcg[0];
    let ok = shape(&eps, 5) && shape(&hops, 4) && zero_matches;
    Outcome::new(
        ok,
        format!(
            "epsilon row [{}], H row [{}], budget 0 HR {} vs unattacked {}",
            eps.render().lines().nth(1).unwrap_or(""),
            hops.render().lines().nth(1).unwrap_or(""),
            budget.hr[0],
            budget.without_hr[0]
        ),
    )
}
