use mixsp::analysis::alignment;
use mixsp::data::{split, synth_corpus, BinScheme, Class, Corpus, SentencePair, SynthConfig};
use mixsp::diffkit::Tape;
use mixsp::encoder::{build_store, EncodedPair, Encoder, ToyEncoder};
use mixsp::metrics::{auc, pearson, spearman};
use mixsp::mixsp::{argmax, route, HeadConfig, HeadParams, Linear, Model, Selection, Trainable};
use mixsp::trainer::{init_model, init_toy_model, train, TrainConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize, dim: usize, vocab: usize, seed: u64) -> Corpus {
    synth_corpus(&SynthConfig {
        n_pairs: n,
        dim,
        vocab_size: vocab,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
    .0
}

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, len)
}

fn encoded(d: usize) -> impl Strategy<Value = EncodedPair> {
    (vector(d), vector(d), vector(d)).prop_map(|(c, a, b)| EncodedPair::new(c, a, b).unwrap())
}

fn grad_norm(grads: &mixsp::diffkit::Gradients, v: mixsp::diffkit::Var) -> f64 {
    grads
        .get(v)
        .map_or(0.0, |g| g.iter().map(|x| x.abs()).sum())
}

#[test]
fn generator_scores_track_latent_similarity() {
    let (c, g) = synth_corpus(&SynthConfig::default()).unwrap();
    let gold: Vec<f64> = c.pairs.iter().map(|p| p.gold_score).collect();
    let cos: Vec<f64> = c
        .pairs
        .iter()
        .map(|p| g.latent_cosine(&p.id).unwrap())
        .collect();
    let rho = spearman(&gold, &cos).unwrap();
    assert!(rho >= 0.9, "{rho}");
}

#[test]
fn frozen_store_receives_no_gradient() {
    let c = corpus(60, 4, 32, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let toy = Encoder::Toy(ToyEncoder::init(&mut rng, 32, 4, false).unwrap());
    let store = build_store(&toy, &c.pairs).unwrap();
    let model = init_model(HeadConfig::default(), Encoder::Frozen(store.clone()), 1).unwrap();
    assert!(model
        .named_tensors()
        .iter()
        .all(|(n, _)| !n.starts_with("encoder")));
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, Trainable::ALL);
    assert!(vars.encoder.is_none());
    let parts = split(&c, &[0.8, 0.2], 1).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let out = train(model, &parts[0].pairs, &parts[1].pairs, &cfg).unwrap();
    match &out.model.encoder {
        Encoder::Frozen(s) => assert_eq!(s, &store),
        other => panic!("encoder changed kind: {}", other.kind()),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn labels_are_pure_and_survive_tsv(scores in prop::collection::vec(0.0f64..=5.0, 1..30)) {
        let text: String = scores.iter().enumerate().map(|(i, s)| format!("a b\tc d\t{s}\tp{i}\n")).collect();
        for scheme in [BinScheme::default(), BinScheme::unit_bins()] {
            let first = Corpus::parse_tsv(&text, "mem", None, &scheme).unwrap();
            let again = Corpus::parse_tsv(&first.to_tsv(), "mem", None, &scheme).unwrap();
            for (p, q) in first.pairs.iter().zip(&again.pairs) {
                prop_assert_eq!(p, q);
                prop_assert_eq!(p.bin, scheme.bin_of(p.gold_score));
                prop_assert_eq!(p.class, Class::of_score(p.gold_score));
            }
        }
    }

    #[test]
    fn every_synthetic_split_has_both_classes(n in 20usize..120, seed in 0u64..1000) {
        let c = corpus(n, 4, 32, seed);
        for part in split(&c, &[0.8, 0.1, 0.1], seed).unwrap().iter().take(1) {
            prop_assert!(part.count(Class::Upper) > 0 && part.count(Class::Lower) > 0);
        }
    }

    #[test]
    fn toy_encoder_is_finite_and_order_free(seed in 0u64..500, len in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = ToyEncoder::init(&mut rng, 20, 5, true).unwrap();
        let s1: Vec<usize> = (0..len).map(|i| (i * 7 + seed as usize) % 20).collect();
        let s2: Vec<usize> = (0..len + 1).map(|i| (i * 3 + 1) % 20).collect();
        let mut shuffled = s1.clone();
        shuffled.shuffle(&mut rng);
        let a = enc.encode(&s1, &s2).unwrap();
        let b = enc.encode(&shuffled, &s2).unwrap();
        prop_assert_eq!(a.dim(), 5);
        for v in [&a.h_cls, &a.h_x1, &a.h_x2] {
            prop_assert!(v.iter().all(|x| x.is_finite()));
        }
        for (x, y) in a.h_x1.iter().zip(&b.h_x1).chain(a.h_cls.iter().zip(&b.h_cls)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn routing_is_a_simplex_with_bounded_beta(enc in encoded(4), seed in 0u64..1000, k in 2usize..5) {
        let cfg = HeadConfig {
            bin_scheme: BinScheme::new((1..k).map(|b| b as f64).collect()).unwrap(),
            ..HeadConfig::default()
        };
        let head = HeadParams::init(&mut ChaCha8Rng::seed_from_u64(seed), &cfg, 4);
        let d = route(&head, &cfg, &enc).unwrap();
        for j in 0..2 {
            prop_assert_eq!(d.p_hat[j].len(), k);
            prop_assert!((d.p_hat[j].iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(d.p_hat[j].iter().all(|p| *p >= 0.0));
            prop_assert!(d.beta[j] >= 1.0 / k as f64 - 1e-15 && d.beta[j] <= 1.0);
        }
    }

    #[test]
    fn argmax_survives_positive_input_scaling(enc in encoded(4), seed in 0u64..1000, scale in 0.01f64..100.0) {
        let cfg = HeadConfig {
            router_input: mixsp::mixsp::RouterInput::CtxOnly,
            ..HeadConfig::default()
        };
        let mut head = HeadParams::init(&mut ChaCha8Rng::seed_from_u64(seed), &cfg, 4);
        // zero bias keeps the logits linear in the input
        head.router.as_mut().unwrap().b = Linear::zeros(2, 4).b;
        let scaled = EncodedPair::new(
            enc.h_cls.iter().map(|x| x * scale).collect(),
            enc.h_x1.iter().map(|x| x * scale).collect(),
            enc.h_x2.iter().map(|x| x * scale).collect(),
        ).unwrap();
        let a = route(&head, &cfg, &enc).unwrap();
        let b = route(&head, &cfg, &scaled).unwrap();
        // an exact tie can resolve either way once rounding differs
        let tied = a.p_hat.iter().any(|p| (p[0] - p[1]).abs() < 1e-12);
        prop_assume!(!tied);
        prop_assert_eq!(a.chosen, b.chosen);
        prop_assert_eq!(argmax(&a.p_hat[0]), a.chosen[0]);
    }
}

fn pair_model(seed: u64, cfg: HeadConfig) -> (Model, Vec<SentencePair>) {
    let c = corpus(24, 4, 24, seed);
    let mut m = init_toy_model(cfg, c.vocab_size(), 4, true, seed).unwrap();
    // spread routing so both projectors get traffic
    if let Some(r) = m.head.router.as_mut() {
        r.w.values_mut().iter_mut().for_each(|w| *w *= 8.0);
    }
    (m, c.pairs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unselected_projectors_get_exactly_zero(seed in 0u64..10_000) {
        let (m, pairs) = pair_model(seed, HeadConfig::default());
        for p in &pairs {
            let mut tape = Tape::new();
            let vars = m.register(&mut tape, Trainable::ALL);
            let g = m.sample_on_tape(&mut tape, &vars, p).unwrap();
            let grads = tape.backward(g.total).unwrap();
            for (c, lv) in vars.projectors.iter().enumerate() {
                if !g.chosen.contains(&c) {
                    prop_assert_eq!(grad_norm(&grads, lv.w) + grad_norm(&grads, lv.b), 0.0);
                }
            }
        }
    }

    #[test]
    fn router_learns_through_beta_and_classification(seed in 0u64..10_000) {
        let only_router = Trainable { encoder: false, router: true, projectors: false, scorer: false };
        for use_clf_loss in [false, true] {
            let cfg = HeadConfig { use_clf_loss, ..HeadConfig::default() };
            let (m, pairs) = pair_model(seed, cfg);
            let p = &pairs[0];
            let mut tape = Tape::new();
            let vars = m.register(&mut tape, only_router);
            let g = m.sample_on_tape(&mut tape, &vars, p).unwrap();
            let target = if use_clf_loss { g.clf.unwrap() } else { g.total };
            let grads = tape.backward(target).unwrap();
            prop_assert!(grad_norm(&grads, vars.router.unwrap().w) > 0.0);
        }
    }

    #[test]
    fn soft_selection_reaches_every_projector(seed in 0u64..10_000) {
        let cfg = HeadConfig { selection: Selection::WeightedAverage, ..HeadConfig::default() };
        let (m, pairs) = pair_model(seed, cfg);
        let mut tape = Tape::new();
        let vars = m.register(&mut tape, Trainable::ALL);
        let g = m.sample_on_tape(&mut tape, &vars, &pairs[0]).unwrap();
        let grads = tape.backward(g.total).unwrap();
        for lv in &vars.projectors {
            prop_assert!(grad_norm(&grads, lv.w) > 0.0);
        }
    }

    #[test]
    fn a_descent_step_moves_the_prediction_toward_the_target(seed in 0u64..10_000, idx in 0usize..24) {
        let (mut m, pairs) = pair_model(seed, HeadConfig::default());
        let p = &pairs[idx % pairs.len()];
        let before = m.predict(p).unwrap().score;
        let mut tape = Tape::new();
        let vars = m.register(&mut tape, Trainable { encoder: false, router: false, projectors: true, scorer: true });
        let g = m.sample_on_tape(&mut tape, &vars, p).unwrap();
        let grads = tape.backward(g.rl).unwrap();
        let names = Model::var_names(&vars);
        for (name, t) in m.named_tensors_mut() {
            if let Some((_, v)) = names.iter().find(|(n, _)| *n == name) {
                if let Some(gr) = grads.get(*v) {
                    t.values_mut().iter_mut().zip(gr).for_each(|(x, d)| *x -= 1e-3 * d);
                }
            }
        }
        let after = m.predict(p).unwrap().score;
        prop_assert!((after - p.y_sim).abs() <= (before - p.y_sim).abs());
    }

    #[test]
    fn correlations_and_auc_ignore_sample_order(
        xs in prop::collection::vec((0i32..10, 0i32..10, any::<bool>()), 4..60),
        seed in 0u64..1000,
    ) {
        let mut shuffled = xs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cols = |v: &[(i32, i32, bool)]| -> (Vec<f64>, Vec<f64>, Vec<bool>) {
            (v.iter().map(|t| t.0 as f64).collect(), v.iter().map(|t| t.1 as f64).collect(), v.iter().map(|t| t.2).collect())
        };
        let (a, b, l) = cols(&xs);
        let (a2, b2, l2) = cols(&shuffled);
        if let (Ok(r1), Ok(r2)) = (spearman(&a, &b), spearman(&a2, &b2)) {
            prop_assert!((r1 - r2).abs() <= 1e-12);
        }
        if let (Ok(r1), Ok(r2)) = (pearson(&a, &b), pearson(&a2, &b2)) {
            prop_assert!((r1 - r2).abs() <= 1e-12);
        }
        if let (Ok(r1), Ok(r2)) = (auc(&a, &l), auc(&a2, &l2)) {
            prop_assert_eq!(r1, r2);
        }
    }

    #[test]
    fn alignment_ignores_pair_order(pairs in prop::collection::vec((vector(3), vector(3)), 1..12), seed in 0u64..1000) {
        let nonzero = |v: &Vec<f64>| v.iter().any(|x| x.abs() > 1e-6);
        prop_assume!(pairs.iter().all(|(a, b)| nonzero(a) && nonzero(b)));
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!((alignment(&pairs).unwrap() - alignment(&shuffled).unwrap()).abs() <= 1e-12);
    }
}
