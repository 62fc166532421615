//! Acceptance criteria 1–12. Each test prints one PASS/FAIL line.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::panic::AssertUnwindSafe;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbr_core::baselines::{RuleTable, RulesConfig, Sampling, Similarity, VsknnConfig, VsknnIndex, Weighting};
use sbr_core::dataset::{preprocess, ItemIdx, Role, Session, SessionDataset, Vocabulary};
use sbr_core::embeddings::{
    bpr_max_loss, sgns_gradient, sgns_loss, sgns_update, train_item2vec, train_smf, Item2VecConfig, SmfConfig, SmfModel,
};
use sbr_core::eval::{evaluate, expand_prefixes, EvalOptions};
use sbr_core::harness::{run_experiment_on, AlgorithmSpec, DatasetSource, ExperimentConfig, Preprocess};
use sbr_core::metamodel::{fit_tree, DecisionTree, MetaInstance, TreeConfig, TreeNode, CLASS_ORDER};
use sbr_core::ranking::{RankedItem, Ranking, Recommender};
use sbr_core::splits::{generate_split, presets, BaseSplit, SplitKind, SplitSpec};

type Check = Result<(), String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn criterion(n: u32, title: &str, limit: Duration, body: impl FnOnce() -> Check) {
    let started = Instant::now();
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(body)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let elapsed = started.elapsed();
    let outcome = outcome.and_then(|()| {
        if elapsed <= limit {
            Ok(())
        } else {
            Err(format!(
                "took {:.2}s, limit {:.0}s",
                elapsed.as_secs_f64(),
                limit.as_secs_f64()
            ))
        }
    });
    let line = match &outcome {
        Ok(()) => format!("criterion {n:>2}: PASS  {title} ({:.2}s)", elapsed.as_secs_f64()),
        Err(e) => format!("criterion {n:>2}: FAIL  {title}: {e}"),
    };
    // bypasses the harness capture so the line always shows up
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    if let Err(e) = outcome {
        panic!("criterion {n} failed: {e}");
    }
}

fn vocab(n: usize) -> Arc<Vocabulary> {
    Arc::new(Vocabulary::from_ids((0..n).map(|i| format!("i{i}")).collect()).unwrap())
}

fn session(id: u64, items: Vec<ItemIdx>) -> Session {
    let start = 1_600_000_000 + id as i64 * 3_600;
    Session {
        id,
        start_time: start,
        end_time: start + 60 * items.len() as i64,
        items,
    }
}

fn dataset(v: &Arc<Vocabulary>, sessions: Vec<Vec<ItemIdx>>, role: Role) -> SessionDataset {
    let sessions = sessions
        .into_iter()
        .enumerate()
        .map(|(i, items)| session(i as u64, items))
        .collect();
    SessionDataset::with_vocabulary(sessions, Arc::clone(v), role)
}

fn ids(ds: &SessionDataset, items: &[ItemIdx]) -> Vec<String> {
    items.iter().map(|&i| ds.vocabulary().id(i).to_string()).collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// ---------------------------------------------------------------- 1, 2

#[test]
fn criterion_01_preprocessing_fixture() {
    criterion(1, "repeat collapsing fixture", Duration::from_secs(1), || {
        let v = Arc::new(Vocabulary::from_ids(["1", "2", "3", "4"].map(String::from).to_vec()).unwrap());
        let raw = dataset(&v, vec![vec![0, 0, 0, 1, 1, 2, 3, 3, 0]], Role::Train);
        let clean = preprocess(&raw);
        let got = ids(&clean, &clean.sessions()[0].items);
        check!(got == ["1", "2", "3", "4", "1"], "got {got:?}");
        Ok(())
    });
}

#[test]
fn criterion_02_prefix_expansion_fixture() {
    criterion(2, "prefix expansion fixture", Duration::from_secs(1), || {
        let v = Arc::new(Vocabulary::from_ids(["1", "2", "3", "4"].map(String::from).to_vec()).unwrap());
        let test = dataset(&v, vec![vec![0, 1, 2, 3]], Role::Test);
        let got: Vec<(Vec<String>, String)> = expand_prefixes(&test)
            .map(|e| (ids(&test, e.prefix), test.vocabulary().id(e.target).to_string()))
            .collect();
        let want = vec![
            (vec!["1".to_string()], "2".to_string()),
            (vec!["1".into(), "2".into()], "3".into()),
            (vec!["1".into(), "2".into(), "3".into()], "4".into()),
        ];
        check!(got == want, "got {got:?}");
        Ok(())
    });
}

// ---------------------------------------------------------------- 3

fn random_corpus(
    rng: &mut ChaCha8Rng,
    max_sessions: usize,
    max_items: usize,
    max_len: usize,
) -> (usize, Vec<Vec<ItemIdx>>) {
    let n_items = rng.random_range(1..=max_items);
    let n_sessions = rng.random_range(1..=max_sessions);
    let sessions = (0..n_sessions)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(0..n_items) as ItemIdx).collect()
        })
        .collect();
    (n_items, sessions)
}

/// Co-occurrence count of `last` with `item` in the same session.
fn oracle_ar(sessions: &[Vec<ItemIdx>], last: ItemIdx, item: ItemIdx) -> u64 {
    if item == last {
        return 0;
    }
    let mut n = 0;
    for s in sessions {
        for &x in s {
            for &y in s {
                if x == last && y == item {
                    n += 1;
                }
            }
        }
    }
    n
}

/// Distance-weighted count of `last` followed by `item`, in tenths.
fn oracle_sr_tenths(sessions: &[Vec<ItemIdx>], last: ItemIdx, item: ItemIdx) -> u64 {
    if item == last {
        return 0;
    }
    let mut n = 0;
    for s in sessions {
        for j in 1..s.len() {
            for k in 0..j {
                if s[k] == last && s[j] == item && j - k < 10 {
                    n += (10 - (j - k)) as u64;
                }
            }
        }
    }
    n
}

#[test]
fn criterion_03_rule_mining_oracle() {
    criterion(
        3,
        "AR/SR against brute-force rule scores",
        Duration::from_secs(30),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for case in 0..200 {
                let (n_items, sessions) = random_corpus(&mut rng, 50, 20, 14);
                let pruning = rng.random_range(0..=2u32);
                let v = vocab(n_items);
                let train = dataset(&v, sessions.clone(), Role::Train);
                let cfg = RulesConfig {
                    pruning,
                    weighting: Weighting::Linear,
                };
                let ar = RuleTable::fit_association(&train, cfg.clone());
                let sr = RuleTable::fit_sequential(&train, cfg);
                for last in 0..n_items as ItemIdx {
                    let (sa, ss) = (ar.score(&[last]), sr.score(&[last]));
                    for item in 0..n_items as ItemIdx {
                        let a = oracle_ar(&sessions, last, item);
                        let want_a = if a > pruning as u64 { a as f64 } else { 0.0 };
                        check!(
                            sa[item as usize] == want_a,
                            "case {case}: AR {last}->{item} = {} want {want_a}",
                            sa[item as usize]
                        );
                        let t = oracle_sr_tenths(&sessions, last, item);
                        let want_s = if t > 10 * pruning as u64 { t as f64 / 10.0 } else { 0.0 };
                        check!(
                            ss[item as usize] == want_s,
                            "case {case}: SR {last}->{item} = {} want {want_s}",
                            ss[item as usize]
                        );
                    }
                }
            }
            Ok(())
        },
    );
}

// ---------------------------------------------------------------- 4

fn oracle_weight(w: Weighting, i: usize, len: usize) -> f64 {
    let (i, l) = (i as f64, len as f64);
    match w {
        Weighting::Same => 1.0,
        Weighting::Div => i / l,
        Weighting::Linear => f64::max(1.0 - 0.1 * (l - i), 0.0),
        Weighting::Log => 1.0 / ((l - i + 1.7).log10() + 1.0),
        Weighting::Quadratic => (i / l).powi(2),
    }
}

/// Session score: Σ over train sessions of cosine(prefix vector, binary
/// session vector) times the item's position weight in that session.
fn oracle_vsknn(
    sessions: &[Vec<ItemIdx>],
    n_items: usize,
    prefix: &[ItemIdx],
    w_prefix: Weighting,
    w_score: Weighting,
) -> Vec<f64> {
    let mut p = vec![0.0; n_items];
    for (i, &item) in prefix.iter().enumerate() {
        p[item as usize] = oracle_weight(w_prefix, i + 1, prefix.len());
    }
    let p_norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut scores = vec![0.0; n_items];
    for s in sessions {
        let mut b = vec![0.0; n_items];
        let mut last_pos = vec![0usize; n_items];
        for (pos, &item) in s.iter().enumerate() {
            b[item as usize] = 1.0;
            last_pos[item as usize] = pos + 1;
        }
        let dot: f64 = p.iter().zip(&b).map(|(x, y)| x * y).sum();
        let b_norm = b.iter().sum::<f64>().sqrt();
        if dot == 0.0 || p_norm == 0.0 {
            continue;
        }
        let sim = dot / (p_norm * b_norm);
        for item in 0..n_items {
            if b[item] > 0.0 {
                scores[item] += sim * oracle_weight(w_score, last_pos[item], s.len());
            }
        }
    }
    scores
}

#[test]
fn criterion_04_vsknn_oracle() {
    criterion(
        4,
        "VSKNN against direct session scoring",
        Duration::from_secs(30),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            for case in 0..50 {
                let n_items = rng.random_range(2..=15);
                let sessions: Vec<Vec<ItemIdx>> = (0..10)
                    .map(|_| {
                        let len = rng.random_range(1..=12);
                        (0..len).map(|_| rng.random_range(0..n_items) as ItemIdx).collect()
                    })
                    .collect();
                let v = vocab(n_items);
                let train = dataset(&v, sessions.clone(), Role::Train);
                let w_prefix = *Weighting::ALL.choose(&mut rng).unwrap();
                let w_score = *Weighting::ALL.choose(&mut rng).unwrap();
                let index = VsknnIndex::fit(
                    &train,
                    VsknnConfig {
                        k: 10,
                        sample_size: 10,
                        sampling: Sampling::Recent,
                        similarity: Similarity::Cosine,
                        weighting: w_prefix,
                        weighting_score: w_score,
                        seed: 0,
                    },
                )
                .map_err(|e| e.to_string())?;
                for _ in 0..10 {
                    let len = rng.random_range(1..=12);
                    let prefix: Vec<ItemIdx> = (0..len).map(|_| rng.random_range(0..n_items) as ItemIdx).collect();
                    let got = index.score(&prefix);
                    let want = oracle_vsknn(&sessions, n_items, &prefix, w_prefix, w_score);
                    for i in 0..n_items {
                        check!(
                            (got[i] - want[i]).abs() <= 1e-9,
                            "case {case} prefix {prefix:?} item {i}: {} vs {}",
                            got[i],
                            want[i]
                        );
                    }
                }
            }
            Ok(())
        },
    );
}

// ---------------------------------------------------------------- 5

/// Replays a fixed ranking per prefix.
struct Replay {
    rankings: HashMap<Vec<ItemIdx>, Vec<ItemIdx>>,
}

impl Recommender for Replay {
    fn name(&self) -> &str {
        "replay"
    }

    fn recommend(&self, prefix: &[ItemIdx], k: usize, _: &[ItemIdx]) -> sbr_core::Result<Ranking> {
        let items = self.rankings.get(prefix).cloned().unwrap_or_default();
        let n = items.len();
        Ranking::new(
            items
                .into_iter()
                .take(k)
                .enumerate()
                .map(|(p, item)| RankedItem {
                    item,
                    score: (n - p) as f64,
                })
                .collect(),
        )
    }
}

/// By-last-item lookup used by the hand-computed fixture.
struct LastItem(HashMap<ItemIdx, Vec<ItemIdx>>);

impl Recommender for LastItem {
    fn name(&self) -> &str {
        "last-item"
    }

    fn recommend(&self, prefix: &[ItemIdx], k: usize, _: &[ItemIdx]) -> sbr_core::Result<Ranking> {
        let items = self.0.get(prefix.last().unwrap()).cloned().unwrap_or_default();
        let n = items.len();
        Ranking::new(
            items
                .into_iter()
                .take(k)
                .enumerate()
                .map(|(p, item)| RankedItem {
                    item,
                    score: (n - p) as f64,
                })
                .collect(),
        )
    }
}

fn hand_fixture() -> Check {
    // items a b c d e
    let v = Arc::new(Vocabulary::from_ids(["a", "b", "c", "d", "e"].map(String::from).to_vec()).unwrap());
    let (a, b, c, d, e) = (0, 1, 2, 3, 4);
    // train counts: a 4, b 2, c 1, d 1, e 1
    let train = dataset(&v, vec![vec![a, b, c], vec![a, b], vec![a, d], vec![e, a]], Role::Train);
    let test = dataset(&v, vec![vec![a, b, c], vec![b, d], vec![c, a, e]], Role::Test);
    let model = LastItem(HashMap::from([
        (a, vec![b, c, d]),
        (b, vec![c, a, e]),
        (c, vec![b, d, a]),
    ]));
    let eval = evaluate(&model, &train, &test, &[1, 3, 5], &EvalOptions::sequential()).map_err(|e| e.to_string())?;
    // events: a→b hit@1, ab→c hit@1, b→d miss, c→a hit@3, ca→e miss
    let want = [
        (1, 2.0 / 5.0, 2.0 / 5.0, 2.0 / 5.0, 8.0 / 20.0),
        (3, 3.0 / 5.0, 7.0 / 15.0, 1.0, 27.0 / 60.0),
        (5, 3.0 / 5.0, 7.0 / 15.0, 1.0, 27.0 / 100.0),
    ];
    check!(eval.n_events == 5, "{} events", eval.n_events);
    for (k, hr, mrr, cov, pop) in want {
        let m = eval.at(k).ok_or("missing cutoff")?;
        for (name, got, want) in [
            ("HR", m.hr, hr),
            ("MRR", m.mrr, mrr),
            ("COV", m.cov, cov),
            ("POP", m.pop, pop),
        ] {
            check!((got - want).abs() <= 1e-12, "{name}@{k} = {got}, want {want}");
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Stream {
    n_real: usize,
    events: Vec<(Vec<ItemIdx>, ItemIdx)>,
    train_counts: Vec<usize>,
}

fn stream_strategy() -> impl Strategy<Value = Stream> {
    (1usize..25, 1usize..20).prop_flat_map(|(n_real, n_events)| {
        let ranking = Just((0..n_real as ItemIdx).collect::<Vec<_>>())
            .prop_shuffle()
            .prop_flat_map(move |perm| (0..=n_real).prop_map(move |len| perm[..len].to_vec()));
        let event = (ranking, 0..n_real as ItemIdx);
        (
            Just(n_real),
            prop::collection::vec(event, n_events),
            prop::collection::vec(1usize..4, n_real),
        )
            .prop_map(|(n_real, events, train_counts)| Stream {
                n_real,
                events,
                train_counts,
            })
    })
}

fn check_stream(s: &Stream) -> Result<(), TestCaseError> {
    // one marker item per event keeps every prefix unique
    let n_events = s.events.len();
    let v = vocab(s.n_real + n_events);
    let mut train_items = Vec::new();
    for (i, &c) in s.train_counts.iter().enumerate() {
        train_items.extend(std::iter::repeat_n(i as ItemIdx, c));
    }
    train_items.extend((0..n_events).map(|e| (s.n_real + e) as ItemIdx));
    let train = dataset(&v, vec![train_items], Role::Train);
    let mut rankings = HashMap::new();
    let mut test_sessions = Vec::new();
    for (e, (ranking, target)) in s.events.iter().enumerate() {
        let marker = (s.n_real + e) as ItemIdx;
        rankings.insert(vec![marker], ranking.clone());
        test_sessions.push(vec![marker, *target]);
    }
    let test = dataset(&v, test_sessions, Role::Test);
    let eval = evaluate(
        &Replay { rankings },
        &train,
        &test,
        &[1, 3, 5, 10, 20],
        &EvalOptions::sequential(),
    )
    .map_err(|e| TestCaseError::fail(e.to_string()))?;
    for m in &eval.metrics {
        prop_assert!(m.mrr <= m.hr + 1e-15, "MRR@{} {} > HR {}", m.k, m.mrr, m.hr);
    }
    for w in eval.metrics.windows(2) {
        prop_assert!(w[0].hr <= w[1].hr && w[0].mrr <= w[1].mrr && w[0].cov <= w[1].cov);
    }
    Ok(())
}

#[test]
fn criterion_05_metric_identities() {
    criterion(
        5,
        "metric identities and hand-computed fixture",
        Duration::from_secs(30),
        || {
            hand_fixture()?;
            let mut runner = TestRunner::new(PropConfig {
                cases: 10_000,
                failure_persistence: None,
                ..PropConfig::default()
            });
            runner
                .run(&stream_strategy(), |s| check_stream(&s))
                .map_err(|e| e.to_string())
        },
    );
}

// ---------------------------------------------------------------- 6

const H: f64 = 1e-5;

/// Relative error with a small scale floor for near-zero gradients.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + H) - f(x - H)) / (2.0 * H)
}

fn check_bpr_max(rng: &mut ChaCha8Rng) -> Check {
    for point in 0..100 {
        let target = rng.random_range(-3.0..3.0);
        let n = rng.random_range(1..=10);
        let negs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lambda = rng.random_range(0.0..1.0);
        let loss = |t: f64, r: &[f64]| bpr_max_loss(t, r, lambda).unwrap().loss;
        let g = bpr_max_loss(target, &negs, lambda).map_err(|e| e.to_string())?;
        let fd = central(|t| loss(t, &negs), target);
        check!(
            rel_err(g.grad_target, fd) < 1e-4,
            "bpr point {point}: target {} vs {fd}",
            g.grad_target
        );
        for j in 0..n {
            let fd = central(
                |x| {
                    let mut r = negs.clone();
                    r[j] = x;
                    loss(target, &r)
                },
                negs[j],
            );
            check!(
                rel_err(g.grad_negatives[j], fd) < 1e-4,
                "bpr point {point}: negative {j} {} vs {fd}",
                g.grad_negatives[j]
            );
        }
    }
    Ok(())
}

fn check_sgns(rng: &mut ChaCha8Rng) -> Check {
    for point in 0..100 {
        let dim = rng.random_range(1..=8);
        let n_neg = rng.random_range(1..=5);
        let mut vecs: Vec<Vec<f64>> = (0..n_neg + 2)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let loss = |v: &[Vec<f64>]| {
            let negs: Vec<&[f64]> = v[2..].iter().map(Vec::as_slice).collect();
            sgns_loss(&v[0], &v[1], &negs)
        };
        let negs: Vec<&[f64]> = vecs[2..].iter().map(Vec::as_slice).collect();
        let g = sgns_gradient(&vecs[0], &vecs[1], &negs);
        let mut analytic = vec![g.input, g.positive];
        analytic.extend(g.negatives);

        let lr = 0.05;
        let mut input = vecs[0].clone();
        let mut positive = vecs[1].clone();
        let mut negatives: Vec<Vec<f64>> = vecs[2..].to_vec();
        sgns_update(&mut input, &mut positive, &mut negatives, lr);
        let mut stepped = vec![input, positive];
        stepped.extend(negatives);

        for v in 0..vecs.len() {
            for d in 0..dim {
                let x = vecs[v][d];
                let fd = central(
                    |y| {
                        vecs[v][d] = y;
                        let l = loss(&vecs);
                        vecs[v][d] = x;
                        l
                    },
                    x,
                );
                check!(
                    rel_err(analytic[v][d], fd) < 1e-4,
                    "sgns point {point}: grad [{v}][{d}]"
                );
                let step = (x - stepped[v][d]) / lr;
                check!(
                    rel_err(step, fd) < 1e-4,
                    "sgns point {point}: step [{v}][{d}] {step} vs {fd}"
                );
            }
        }
    }
    Ok(())
}

fn check_smf(rng: &mut ChaCha8Rng) -> Check {
    let n = 6;
    for point in 0..100 {
        let f = rng.random_range(1..=4);
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-0.5..0.5)).collect() };
        let item = draw(n * f);
        let transition = draw(n * f);
        let w1 = rng.random_range(0.0..1.0);
        let w2 = rng.random_range(0.0..1.0);
        let prefix: Vec<ItemIdx> = (0..rng.random_range(1..=5))
            .map(|_| rng.random_range(0..n) as ItemIdx)
            .collect();
        let target = rng.random_range(0..n) as ItemIdx;
        let negatives: Vec<ItemIdx> = (0..rng.random_range(1..=5))
            .map(|_| loop {
                let x = rng.random_range(0..n) as ItemIdx;
                if x != target {
                    break x;
                }
            })
            .collect();
        let lambda = 0.5;
        let model = |item: &[f64], tr: &[f64], w1: f64, w2: f64| {
            SmfModel::from_parts(f, item.to_vec(), tr.to_vec(), w1, w2, vec![1; n]).unwrap()
        };
        let loss = |item: &[f64], tr: &[f64], w1: f64, w2: f64| {
            model(item, tr, w1, w2)
                .event_loss(&prefix, target, &negatives, lambda)
                .unwrap()
        };
        let g = model(&item, &transition, w1, w2)
            .event_gradient(&prefix, target, &negatives, lambda)
            .map_err(|e| e.to_string())?;
        for i in 0..item.len() {
            let fd = central(
                |x| {
                    let mut p = item.clone();
                    p[i] = x;
                    loss(&p, &transition, w1, w2)
                },
                item[i],
            );
            check!(
                rel_err(g.item[i], fd) < 1e-4,
                "smf point {point}: item[{i}] {} vs {fd}",
                g.item[i]
            );
        }
        for i in 0..transition.len() {
            let fd = central(
                |x| {
                    let mut p = transition.clone();
                    p[i] = x;
                    loss(&item, &p, w1, w2)
                },
                transition[i],
            );
            check!(
                rel_err(g.transition[i], fd) < 1e-4,
                "smf point {point}: transition[{i}] {} vs {fd}",
                g.transition[i]
            );
        }
        let fd1 = central(|x| loss(&item, &transition, x, w2), w1);
        let fd2 = central(|x| loss(&item, &transition, w1, x), w2);
        check!(rel_err(g.w1, fd1) < 1e-4, "smf point {point}: w1 {} vs {fd1}", g.w1);
        check!(rel_err(g.w2, fd2) < 1e-4, "smf point {point}: w2 {} vs {fd2}", g.w2);
    }
    Ok(())
}

#[test]
fn criterion_06_gradient_checks() {
    criterion(
        6,
        "analytic gradients against central differences",
        Duration::from_secs(60),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            check_bpr_max(&mut rng)?;
            check_sgns(&mut rng)?;
            check_smf(&mut rng)
        },
    );
}

// ---------------------------------------------------------------- 7

/// Sessions following a planted successor with probability 0.9.
fn planted_corpus(rng: &mut ChaCha8Rng, n_items: usize, n_sessions: usize) -> Vec<Vec<ItemIdx>> {
    let succ: Vec<ItemIdx> = loop {
        let mut p: Vec<ItemIdx> = (0..n_items as ItemIdx).collect();
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &s)| s as usize != i) {
            break p;
        }
    };
    (0..n_sessions)
        .map(|_| {
            let len = rng.random_range(3..=7);
            let mut s = vec![rng.random_range(0..n_items) as ItemIdx];
            while s.len() < len {
                let prev = *s.last().unwrap();
                let next = if rng.random_bool(0.9) {
                    succ[prev as usize]
                } else {
                    loop {
                        let x = rng.random_range(0..n_items) as ItemIdx;
                        if x != prev {
                            break x;
                        }
                    }
                };
                s.push(next);
            }
            s
        })
        .collect()
}

/// HR@5 of the model, and HR@5 after shuffling targets across events.
fn hr_and_permuted(
    model: &dyn Recommender,
    train: &SessionDataset,
    test: &SessionDataset,
    seed: u64,
) -> Result<(f64, f64), String> {
    let hr = evaluate(model, train, test, &[5], &EvalOptions::sequential())
        .map_err(|e| e.to_string())?
        .metrics[0]
        .hr;
    let events: Vec<_> = expand_prefixes(test).collect();
    let mut targets: Vec<ItemIdx> = events.iter().map(|e| e.target).collect();
    targets.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut hits = 0;
    for (e, t) in events.iter().zip(&targets) {
        let r = model.recommend(e.prefix, 5, &[]).map_err(|e| e.to_string())?;
        if r.position(*t).is_some() {
            hits += 1;
        }
    }
    Ok((hr, hits as f64 / events.len() as f64))
}

#[test]
fn criterion_07_learning_sanity() {
    criterion(
        7,
        "SR and SMF learn a planted sequential pattern",
        Duration::from_secs(300),
        || {
            let n_items = 40;
            let v = vocab(n_items);
            let (mut sr_hr, mut sr_perm, mut smf_hr, mut smf_perm) = (vec![], vec![], vec![], vec![]);
            for seed in 0..5u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
                let corpus = planted_corpus(&mut rng, n_items, 750);
                let train = dataset(&v, corpus[..600].to_vec(), Role::Train);
                let test = dataset(&v, corpus[600..].to_vec(), Role::Test);

                let sr = RuleTable::fit_sequential(&train, RulesConfig::default());
                let (h, p) = hr_and_permuted(&sr, &train, &test, seed)?;
                sr_hr.push(h);
                sr_perm.push(p);

                let smf = train_smf(
                    &train,
                    &SmfConfig {
                        factors: 32,
                        learning_rate: 0.05,
                        negatives: 20,
                        epochs: 10,
                        seed,
                        ..SmfConfig::default()
                    },
                )
                .map_err(|e| e.to_string())?;
                let (h, p) = hr_and_permuted(&smf, &train, &test, seed)?;
                smf_hr.push(h);
                smf_perm.push(p);
            }
            for (name, hr, perm) in [("SR", &mut sr_hr, &mut sr_perm), ("SMF", &mut smf_hr, &mut smf_perm)] {
                let (h, p) = (median(hr), median(perm));
                check!(h >= 3.0 * p && h > 0.0, "{name}: median HR@5 {h:.4} vs permuted {p:.4}");
            }
            Ok(())
        },
    );
}

// ---------------------------------------------------------------- 8

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn criterion_08_item2vec_clusters() {
    criterion(8, "Item2Vec separates two cliques", Duration::from_secs(120), || {
        let clique = 10;
        let v = vocab(2 * clique);
        let mut separated = 0;
        let mut report = Vec::new();
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
            let sessions: Vec<Vec<ItemIdx>> = (0..400)
                .map(|s| {
                    let base = if s % 2 == 0 { 0 } else { clique };
                    let len = rng.random_range(4..=8);
                    let mut items: Vec<ItemIdx> = Vec::new();
                    while items.len() < len {
                        let x = (base + rng.random_range(0..clique)) as ItemIdx;
                        if items.last() != Some(&x) {
                            items.push(x);
                        }
                    }
                    items
                })
                .collect();
            let train = dataset(&v, sessions, Role::Train);
            let emb = train_item2vec(
                &train,
                &Item2VecConfig {
                    dim: 16,
                    window: 3,
                    negatives: 5,
                    subsample: 0.0,
                    epochs: 5,
                    seed,
                    ..Item2VecConfig::default()
                },
            )
            .map_err(|e| e.to_string())?;
            let (mut intra, mut inter) = ((0.0, 0), (0.0, 0));
            for a in 0..2 * clique {
                for b in a + 1..2 * clique {
                    let c = cosine(emb.vector(a as ItemIdx), emb.vector(b as ItemIdx));
                    let acc = if (a < clique) == (b < clique) {
                        &mut intra
                    } else {
                        &mut inter
                    };
                    acc.0 += c;
                    acc.1 += 1;
                }
            }
            let (mi, mx) = (intra.0 / intra.1 as f64, inter.0 / inter.1 as f64);
            report.push(format!("{mi:.2}/{mx:.2}"));
            if mi > mx {
                separated += 1;
            }
        }
        check!(
            separated >= 9,
            "separated in {separated}/10 seeds (intra/inter: {})",
            report.join(" ")
        );
        Ok(())
    });
}

// ---------------------------------------------------------------- 9

type Q = Ratio<i64>;

#[derive(Debug, PartialEq)]
enum OracleNode {
    Leaf(String, Vec<usize>),
    Split(usize, f64, Vec<usize>, Box<OracleNode>, Box<OracleNode>),
}

fn q_gini(counts: &[usize]) -> Q {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Q::from_integer(0);
    }
    let mut g = Q::from_integer(1);
    for &c in counts {
        let p = Q::new(c as i64, n as i64);
        g -= p * p;
    }
    g
}

/// Exhaustive CART: every feature and every midpoint between distinct
/// sorted values; minimum weighted child Gini with a strict decrease.
fn oracle_tree(rows: &[(Vec<f64>, usize)], classes: &[&str], depth: usize, cfg: &TreeConfig, floor: Q) -> OracleNode {
    let mut counts = vec![0; classes.len()];
    for (_, y) in rows {
        counts[*y] += 1;
    }
    let mut label = 0;
    for c in 0..classes.len() {
        if counts[c] > counts[label] {
            label = c;
        }
    }
    let leaf = || OracleNode::Leaf(classes[label].to_string(), counts.clone());
    let parent = q_gini(&counts);
    if depth >= cfg.max_depth || rows.len() < 2 || parent < floor {
        return leaf();
    }
    let n = rows.len() as i64;
    let mut best: Option<(Q, usize, f64)> = None;
    for f in 0..rows[0].0.len() {
        let values: BTreeSet<i64> = rows.iter().map(|r| r.0[f] as i64).collect();
        let values: Vec<i64> = values.into_iter().collect();
        for w in values.windows(2) {
            let t = (w[0] + w[1]) as f64 / 2.0;
            let (mut l, mut r) = (vec![0; classes.len()], vec![0; classes.len()]);
            for (x, y) in rows {
                if x[f] <= t {
                    l[*y] += 1;
                } else {
                    r[*y] += 1;
                }
            }
            let nl: usize = l.iter().sum();
            let nr: usize = r.iter().sum();
            let weighted = Q::new(nl as i64, n) * q_gini(&l) + Q::new(nr as i64, n) * q_gini(&r);
            if weighted >= parent {
                continue;
            }
            if best.as_ref().is_none_or(|b| weighted < b.0) {
                best = Some((weighted, f, t));
            }
        }
    }
    match best {
        None => leaf(),
        Some((_, f, t)) => {
            let (l, r): (Vec<_>, Vec<_>) = rows.iter().cloned().partition(|(x, _)| x[f] <= t);
            OracleNode::Split(
                f,
                t,
                counts.clone(),
                Box::new(oracle_tree(&l, classes, depth + 1, cfg, floor)),
                Box::new(oracle_tree(&r, classes, depth + 1, cfg, floor)),
            )
        }
    }
}

fn convert(node: &TreeNode, classes: &[String]) -> OracleNode {
    match node {
        TreeNode::Leaf { label, counts } => OracleNode::Leaf(classes[*label].clone(), counts.clone()),
        TreeNode::Split {
            feature,
            threshold,
            counts,
            left,
            right,
        } => OracleNode::Split(
            *feature,
            *threshold,
            counts.clone(),
            Box::new(convert(left, classes)),
            Box::new(convert(right, classes)),
        ),
    }
}

fn floor_respected(node: &TreeNode, floor: f64) -> bool {
    match node {
        TreeNode::Leaf { .. } => true,
        TreeNode::Split {
            counts, left, right, ..
        } => {
            let n: usize = counts.iter().sum();
            let g = 1.0 - counts.iter().map(|&c| (c as f64 / n as f64).powi(2)).sum::<f64>();
            g >= floor - 1e-12 && floor_respected(left, floor) && floor_respected(right, floor)
        }
    }
}

#[test]
fn criterion_09_decision_tree_oracle() {
    criterion(
        9,
        "CART against exhaustive split search",
        Duration::from_secs(60),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for case in 0..500 {
                let n = rng.random_range(1..=12);
                let dim = rng.random_range(1..=4);
                let n_classes = rng.random_range(1..=4);
                let labels = &CLASS_ORDER[..n_classes];
                let table: Vec<MetaInstance> = (0..n)
                    .map(|i| MetaInstance {
                        name: format!("t{i}"),
                        features: (0..dim).map(|_| rng.random_range(0..5) as f64).collect(),
                        label: labels[rng.random_range(0..n_classes)].to_string(),
                    })
                    .collect();
                let cfg = if case % 5 == 0 {
                    TreeConfig {
                        max_depth: rng.random_range(1..=3),
                        ..TreeConfig::default()
                    }
                } else {
                    TreeConfig::default()
                };
                let tree: DecisionTree = fit_tree(&table, &cfg).map_err(|e| e.to_string())?;
                let present: Vec<&str> = CLASS_ORDER
                    .iter()
                    .copied()
                    .filter(|c| table.iter().any(|t| t.label == *c))
                    .collect();
                let rows: Vec<(Vec<f64>, usize)> = table
                    .iter()
                    .map(|t| (t.features.clone(), present.iter().position(|c| *c == t.label).unwrap()))
                    .collect();
                let want = oracle_tree(&rows, &present, 0, &cfg, Q::new(3, 10));
                let got = convert(&tree.root, &tree.classes);
                check!(got == want, "case {case}: tree differs\n got {got:?}\nwant {want:?}");
                check!(
                    tree.depth() <= cfg.max_depth && tree.depth() <= 6,
                    "case {case}: depth {}",
                    tree.depth()
                );
                check!(
                    floor_respected(&tree.root, cfg.min_impurity),
                    "case {case}: split below impurity floor"
                );
            }
            let trivial = bpr_max_loss(0.7, &[0.7], 0.0).map_err(|e| e.to_string())?.loss;
            check!(
                (trivial - 0.5f64.ln().abs()).abs() <= 1e-9,
                "BPR-max equal scores: {trivial}"
            );
            Ok(())
        },
    );
}

// ---------------------------------------------------------------- 10

#[derive(Debug, Clone)]
struct RawDataset {
    /// `(day, items)`
    sessions: Vec<(i64, Vec<ItemIdx>)>,
    n_items: usize,
}

fn raw_strategy() -> impl Strategy<Value = RawDataset> {
    (5usize..30, 30i64..45).prop_flat_map(|(n_items, days)| {
        // every session opens with 0, 1
        let tail = prop::collection::vec(0..n_items as ItemIdx, 0..14).prop_map(|t| [vec![0, 1], t].concat());
        let session = (0..days, tail);
        prop::collection::vec(session, 60..200).prop_map(move |mut sessions| {
            for d in 0..days {
                sessions.push((d, vec![0, 1]));
            }
            RawDataset { sessions, n_items }
        })
    })
}

fn base_split(raw: &RawDataset) -> BaseSplit {
    let v = vocab(raw.n_items);
    let sessions = raw
        .sessions
        .iter()
        .enumerate()
        .map(|(i, (day, items))| {
            let start = 1_600_000_000 / 86_400 * 86_400 + day * 86_400 + (i as i64 % 1000) * 60;
            Session {
                id: i as u64,
                start_time: start,
                end_time: start + 30 * items.len() as i64,
                items: items.clone(),
            }
        })
        .collect();
    let ds = SessionDataset::compacted(sessions, &v, Role::Train);
    BaseSplit::from_holdout(preprocess(&ds), 1).expect("holdout")
}

fn train_ids(base: &BaseSplit, spec: &SplitSpec) -> Option<Vec<u64>> {
    generate_split(base, spec)
        .ok()
        .map(|s| s.train.sessions().iter().map(|x| x.id).collect())
}

fn check_splits(raw: &RawDataset) -> Result<(), TestCaseError> {
    let base = base_split(raw);
    let all: BTreeSet<u64> = base.train.sessions().iter().map(|s| s.id).collect();

    let mut union = BTreeSet::new();
    let mut total = 0;
    for spec in presets::train_lengths() {
        let part = train_ids(&base, &spec).unwrap_or_default();
        total += part.len();
        union.extend(part);
    }
    prop_assert_eq!(total, union.len(), "length buckets overlap");
    prop_assert_eq!(&union, &all, "length buckets do not cover the train set");

    let n = all.len();
    for spec in presets::train_fractions(&[2, 4, 8, 16, 32, 64], 5) {
        let SplitKind::TrainFraction { denominator } = spec.kind else {
            unreachable!()
        };
        let want = n / denominator;
        match train_ids(&base, &spec) {
            Some(ids) => {
                prop_assert_eq!(ids.len(), want);
                prop_assert!(ids.iter().all(|i| all.contains(i)));
            }
            None => prop_assert_eq!(want, 0),
        }
    }

    let start = |id: u64| base.train.sessions().iter().find(|s| s.id == id).unwrap().start_time;
    let specs = presets::train_recency(5);
    let recent = train_ids(&base, &specs[0]).unwrap_or_default();
    let old = train_ids(&base, &specs[1]).unwrap_or_default();
    let mixed: BTreeSet<u64> = train_ids(&base, &specs[2]).unwrap_or_default().into_iter().collect();
    prop_assert!(!recent.is_empty() && !old.is_empty());
    let newest_old = old.iter().map(|&i| start(i)).max().unwrap();
    let oldest_recent = recent.iter().map(|&i| start(i)).min().unwrap();
    prop_assert!(newest_old < oldest_recent, "old sessions overlap recent ones");
    let first = base.train.sessions().first().unwrap().start_time / 86_400 * 86_400;
    let end = (base.train.sessions().last().unwrap().start_time / 86_400 + 1) * 86_400;
    prop_assert!(recent.iter().all(|&i| start(i) >= end - 5 * 86_400));
    prop_assert!(old.iter().all(|&i| start(i) < first + 5 * 86_400));
    for &i in &mixed {
        let t = start(i);
        prop_assert!(t < first + 5 * 86_400 / 2 || t >= end - 5 * 86_400 / 2);
    }
    Ok(())
}

#[test]
fn criterion_10_split_invariants() {
    criterion(
        10,
        "split partition, size and recency invariants",
        Duration::from_secs(30),
        || {
            let mut runner = TestRunner::new(PropConfig {
                cases: 100,
                failure_persistence: None,
                ..PropConfig::default()
            });
            runner
                .run(&raw_strategy(), |raw| check_splits(&raw))
                .map_err(|e| e.to_string())
        },
    );
}

// ---------------------------------------------------------------- 11

fn small_grid(output: &std::path::Path) -> ExperimentConfig {
    let spec = |kind: &str, params: serde_json::Value| {
        let mut a = AlgorithmSpec::new(kind);
        if let serde_json::Value::Object(m) = params {
            a.params = m;
        }
        a
    };
    let mut tuned = spec("sr", serde_json::json!({}));
    tuned.tune = true;
    tuned.trials = Some(4);
    tuned.name = Some("SR-tuned".into());
    ExperimentConfig {
        name: "determinism".into(),
        dataset: DatasetSource {
            path: "unused".into(),
            format: Default::default(),
            schema: Default::default(),
            session_rule: Default::default(),
        },
        preprocess: Preprocess::default(),
        splits: vec![
            SplitSpec::new("half", SplitKind::TrainFraction { denominator: 2 }).with_seed(1),
            SplitSpec::new("test-short", SplitKind::TestSessionLength { lo: 2, hi: Some(6) }),
        ],
        algorithms: vec![
            spec("spop", serde_json::json!({})),
            spec("ar", serde_json::json!({})),
            spec("sr", serde_json::json!({})),
            spec(
                "vsknn",
                serde_json::json!({ "sampling": "random", "sample_size": 50, "k": 20 }),
            ),
            spec(
                "smf",
                serde_json::json!({ "factors": 16, "epochs": 3, "negatives": 20 }),
            ),
            spec("item2vec", serde_json::json!({ "dim": 16, "epochs": 3 })),
            tuned,
        ],
        cutoffs: vec![1, 3, 5, 10, 20],
        seed: 11,
        output_dir: output.to_path_buf(),
        workers: 4,
        exclusion: Default::default(),
    }
}

#[test]
fn criterion_11_end_to_end_determinism() {
    criterion(
        11,
        "identical seeds give byte-identical metric records",
        Duration::from_secs(300),
        || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let corpus = planted_corpus(&mut rng, 60, 1500);
            let raw = RawDataset {
                sessions: corpus
                    .into_iter()
                    .enumerate()
                    .map(|(i, s)| ((i / 50) as i64, s))
                    .collect(),
                n_items: 60,
            };
            let base = base_split(&raw);
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let mut outputs = Vec::new();
            for run in ["a", "b"] {
                let cfg = small_grid(&dir.path().join(run));
                let summary = run_experiment_on(&cfg, &base).map_err(|e| e.to_string())?;
                check!(summary.n_failed() == 0, "failed cells: {:?}", summary.cells);
                outputs.push(std::fs::read(dir.path().join(run).join("metrics.jsonl")).map_err(|e| e.to_string())?);
            }
            check!(!outputs[0].is_empty(), "empty metrics file");
            check!(
                outputs[0].iter().filter(|&&b| b == b'\n').count() == 2 * 7 * 5,
                "unexpected record count"
            );
            check!(outputs[0] == outputs[1], "metric records differ between runs");
            Ok(())
        },
    );
}

// ---------------------------------------------------------------- 12

#[test]
fn criterion_12_recsys_statistics() {
    let Ok(path) = std::env::var("SBR_RECSYS_CLICKS") else {
        let _ = writeln!(
            std::io::stdout().lock(),
            "criterion 12: SKIP  set SBR_RECSYS_CLICKS to a RecSys Challenge 2015 clicks file"
        );
        return;
    };
    criterion(
        12,
        "RecSys Challenge click log statistics",
        Duration::from_secs(3600),
        || {
            use sbr_core::dataset::{compute_stats, ingest_file, sessionize, Column, Schema, SessionRule, TimeFormat};
            let schema = Schema {
                session: Column::Index(0),
                time: Column::Index(1),
                item: Column::Index(2),
                time_format: TimeFormat::Iso8601,
                has_header: false,
                ..Schema::default()
            };
            let log = ingest_file(&path, &schema).map_err(|e| e.to_string())?;
            let ds = preprocess(&sessionize(&log, SessionRule::ByKey).map_err(|e| e.to_string())?);
            let stats = compute_stats(&ds).map_err(|e| e.to_string())?;
            check!(
                (stats.avg_session_length - 3.47).abs() <= 0.01,
                "average session length {:.4}",
                stats.avg_session_length
            );
            Ok(())
        },
    );
}
