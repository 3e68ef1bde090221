use hagroute_core::gate::{GateMode, HardAttentionGate};
use hagroute_core::init;
use hagroute_core::loss::{Objective, SizeLossConfig, Targets};
use hagroute_core::nn::{CnnConfig, MlpConfig, Model, ModelConfig, Network, VitConfig};
use hagroute_core::tensor::{finite_diff_check, Array, Graph};
use hagroute_core::train::gradcheck_network;
use hagroute_core::{Group, Result};
use proptest::prelude::*;
use rand::Rng;

fn sigma(w: f64) -> f64 {
    1.0 / (1.0 + (-w).exp())
}

fn random(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Array {
    let mut r = init::rng(seed);
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn gate_with(raw: &[f64], mode: GateMode) -> (hagroute_core::ParamStore, HardAttentionGate) {
    let (mut store, gate) = HardAttentionGate::standalone(raw.len(), mode, 0).unwrap();
    *store.value_mut(gate.param()) = Array::vector(raw);
    (store, gate)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn gated_output_is_score_times_input(
        raw in prop::collection::vec(-30.0f64..30.0, 1..12),
        rows in 1usize..4,
        seed in any::<u64>(),
    ) {
        let n = raw.len();
        let (store, gate) = gate_with(&raw, GateMode::Embedding);
        let x = random(seed, &[rows, n], -100.0, 100.0);
        let g = Graph::new();
        let out = gate.apply(&g, &store, &g.constant(x.clone())).unwrap().value();
        for (k, (&o, &xi)) in out.data().iter().zip(x.data()).enumerate() {
            let expected = sigma(raw[k % n]) * xi;
            prop_assert!((o - expected).abs() <= 1e-15 * expected.abs(), "{} vs {}", o, expected);
            prop_assert!(o.abs() <= xi.abs());
            if xi != 0.0 {
                prop_assert_eq!(o.signum(), xi.signum());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn scores_are_independent(raw in prop::collection::vec(-5.0f64..5.0, 2..10), j in 0usize..10, dw in -3.0f64..3.0) {
        let j = j % raw.len();
        let (store, gate) = gate_with(&raw, GateMode::Embedding);
        let before = gate.score_values(&store);
        let mut moved = raw.clone();
        moved[j] += dw;
        let (store2, gate2) = gate_with(&moved, GateMode::Embedding);
        let after = gate2.score_values(&store2);
        for i in (0..raw.len()).filter(|&i| i != j) {
            prop_assert_eq!(before[i].to_bits(), after[i].to_bits());
        }
        prop_assert!(before.iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn gate_gradients_through_downstream_ops(seed in any::<u64>()) {
        let (store, gate) = HardAttentionGate::standalone(4, GateMode::Embedding, seed).unwrap();
        let x = random(seed, &[3, 4], -2.0, 2.0);
        let w = random(seed ^ 1, &[4, 2], -1.0, 1.0);
        let report = finite_diff_check(
            |g, s| {
                let h = gate.apply(g, s, &g.constant(x.clone()))?;
                Ok(h.matmul(&g.constant(w.clone()))?.tanh().square().sum_all())
            },
            &store,
            1e-6,
        )
        .unwrap();
        prop_assert!(report.max_rel_error < 1e-6);
    }
}

#[test]
fn saturated_gate_passes_input_through() {
    let (store, gate) = gate_with(&[40.0; 3], GateMode::Embedding);
    let x = Array::vector(&[1.5, -2.0, 1e6]);
    let g = Graph::new();
    let out = gate.apply(&g, &store, &g.constant(x.clone())).unwrap().value();
    for (o, xi) in out.data().iter().zip(x.data()) {
        assert!((o - xi).abs() / xi.abs() < 1e-15);
    }
}

#[test]
fn channel_gate_broadcasts_over_space() {
    let (store, gate) = gate_with(&[0.0, 3f64.ln()], GateMode::Channel);
    let x = Array::full(vec![2, 2, 3, 3], 4.0);
    let g = Graph::new();
    let out = gate.apply(&g, &store, &g.constant(x)).unwrap().value();
    for b in out.data().chunks(18) {
        assert!(b[..9].iter().all(|&v| v == 2.0));
        assert!(b[9..].iter().all(|&v| (v - 3.0).abs() < 1e-15));
    }
}

#[test]
fn gate_init_is_bounded_and_centred() {
    for seed in 0..100 {
        let (store, gate) = HardAttentionGate::standalone(64, GateMode::Embedding, seed).unwrap();
        let bound = (6.0f64 / 128.0).sqrt();
        assert!(store.value(gate.param()).data().iter().all(|w| w.abs() <= bound));
        let m = gate.stats(&store).mean;
        assert!((0.45..=0.55).contains(&m), "seed {seed}: {m}");
        let again = HardAttentionGate::standalone(64, GateMode::Embedding, seed).unwrap().0;
        assert_eq!(store, again);
    }
}

fn vit(depth: usize, use_hag: bool) -> ModelConfig {
    ModelConfig::micro_vit(
        [1, 4, 4],
        VitConfig {
            depth,
            ..VitConfig::default()
        },
        use_hag,
    )
}

fn huber() -> Objective {
    Objective::WeightedHuber(SizeLossConfig::default())
}

#[test]
fn micro_vit_gradients_match_finite_differences() {
    let net = Network::build(&vit(2, true).with_seed(3)).unwrap();
    let x = random(1, &[2, 16], 0.0, 1.0);
    let y = Targets::Values(vec![3.0, 12.0]);
    let r = gradcheck_network(&net, &x, &y, &huber(), 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-4, "{:?}", r.per_param.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)));
}

#[test]
fn multistream_cnn_gradients_match_finite_differences() {
    let cfg = ModelConfig::multistream_cnn([4, 8, 8], CnnConfig::default(), true)
        .with_head(hagroute_core::nn::HeadKind::Classification, 3)
        .with_seed(5);
    let net = Network::build(&cfg).unwrap();
    let x = random(2, &[2, 4, 8, 8], -1.0, 1.0);
    let y = Targets::Labels(vec![0, 2]);
    let r = gradcheck_network(&net, &x, &y, &Objective::CrossEntropy, 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
}

#[test]
fn gated_mlp_gradients_match_finite_differences() {
    let net = Network::build(&ModelConfig::gated_mlp(6, MlpConfig { hidden: 8 }, true)).unwrap();
    let x = random(4, &[3, 6], 0.0, 1.0);
    let y = Targets::Values(vec![1.0, 7.5, 15.0]);
    let r = gradcheck_network(&net, &x, &y, &huber(), 1e-6).unwrap();
    assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
}

#[test]
fn gate_params_are_the_att_group() {
    let net = Network::build(&vit(2, true)).unwrap();
    let att = net.store.ids_in(Group::Att);
    assert_eq!(att.len(), 4);
    assert_eq!(net.gates().len(), 4);
    let plain = Network::build(&vit(2, false)).unwrap();
    assert!(plain.store.ids_in(Group::Att).is_empty());
    // gates draw from their own stream, main init is unchanged
    for (id, p) in plain.store.iter() {
        let q = net.store.find(&p.name).unwrap();
        assert_eq!(net.store.value(q), plain.store.value(id), "{}", p.name);
    }
}

#[test]
fn batch_order_does_not_change_per_sample_outputs() -> Result<()> {
    let net = Network::build(&vit(2, true).with_seed(9))?;
    let x = random(5, &[4, 16], 0.0, 1.0);
    let perm = [2usize, 0, 3, 1];
    let rows: Vec<Array> = (0..4)
        .map(|i| Array::vector(&x.data()[i * 16..(i + 1) * 16]))
        .collect();
    let shuffled = Array::stack(&perm.iter().map(|&i| &rows[i]).collect::<Vec<_>>())?;
    let g = Graph::new();
    let a = net.forward(&g, &x)?.value();
    let b = net.forward(&g, &shuffled)?.value();
    for (k, &i) in perm.iter().enumerate() {
        assert!((a.data()[i] - b.data()[k]).abs() < 1e-12);
    }
    Ok(())
}

#[test]
fn zero_and_saturated_gates_bracket_the_ungated_model() -> Result<()> {
    let gated = Network::build(&vit(1, true).with_seed(2))?;
    let plain = Network::build(&vit(1, false).with_seed(2))?;
    let mut open = gated.clone();
    for site in open.gates() {
        let n = site.gate.n();
        *open.store.value_mut(site.gate.param()) = Array::full(vec![n], 40.0);
    }
    let x = random(8, &[3, 16], 0.0, 1.0);
    let g = Graph::new();
    let a = open.forward(&g, &x)?.value();
    let b = plain.forward(&g, &x)?.value();
    assert_eq!(a.data(), b.data());
    Ok(())
}
