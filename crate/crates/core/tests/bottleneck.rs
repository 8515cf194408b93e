mod common;

use common::composed::check_composed;
use pcb_core::autograd::{ParamStore, Tape, Tensor};
use pcb_core::bottleneck::*;
use pcb_core::concept::{ConceptSpec, ConceptVector};
use pcb_core::rng::stream_rng;
use pcb_core::synth::TaskTemplate;
use proptest::prelude::*;
use rand::Rng;
use std::collections::HashSet;
use std::f64::consts::LN_2;

fn af_hf_specs() -> Vec<ConceptSpec> {
    TaskTemplate::AfHf.concept_specs()
}

fn setup(hidden: usize, specs: &[ConceptSpec], n: usize, seed: u64) -> (Bottleneck, ParamStore) {
    let config = BottleneckConfig {
        latent_groups: n,
        ..BottleneckConfig::default()
    };
    let mut params = ParamStore::new();
    let b = Bottleneck::register(hidden, specs, &config, &mut params, &mut stream_rng(seed, 1)).unwrap();
    (b, params)
}

fn rep(rng: &mut impl Rng, hidden: usize) -> Tensor {
    Tensor::row_vector((0..hidden).map(|_| rng.random_range(-2.0..2.0)).collect())
}

#[test]
fn composed_graph_matches_finite_differences() {
    for seed in 0..2 {
        let r = check_composed(seed, 1e-5);
        assert!(r.checked > 1000);
        assert!(r.max_rel_err < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn head_shapes_per_template() {
    let (b, params) = setup(8, &af_hf_specs(), 6, 0);
    let mut t = Tape::new(&params);
    let r = t.constant(rep(&mut stream_rng(0, 2), 8));
    let g = b.concept_head_g(&mut t, r).unwrap();
    assert_eq!(t.value(g).shape(), &[1, 3]);
    let w = params.get(params.id("pcb.f.0.w").unwrap());
    assert_eq!(w.shape(), &[9, 16]);

    let specs = TaskTemplate::FHf.concept_specs();
    let (b, params) = setup(8, &specs, 6, 0);
    let mut t = Tape::new(&params);
    let r = t.constant(rep(&mut stream_rng(0, 2), 8));
    let g = b.concept_head_g(&mut t, r).unwrap();
    assert_eq!(t.value(g).shape(), &[1, 15]);
    assert_eq!(params.get(params.id("pcb.f.0.w").unwrap()).shape(), &[10, 16]);
}

#[test]
fn zero_weights_give_bias_outputs() {
    let specs = af_hf_specs();
    let (b, mut params) = setup(8, &specs, 4, 3);
    let names: Vec<String> = params.iter().map(|(_, n, _)| n.to_string()).collect();
    for n in names.iter().filter(|n| n.ends_with(".w")) {
        let id = params.id(n).unwrap();
        params.get_mut(id).data_mut().fill(0.0);
    }
    let gb = params.get(params.id("pcb.g.out.b").unwrap()).data().to_vec();
    let fb = params.get(params.id("pcb.f.2.b").unwrap()).item();
    let mut t = Tape::new(&params);
    let r = t.constant(rep(&mut stream_rng(1, 2), 8));
    let g = b.concept_head_g(&mut t, r).unwrap();
    assert_eq!(t.value(g).data(), gb.as_slice());
    let cin = b.assemble_concept_input(&mut t, ConceptSource::Values(&ConceptVector(vec![1, 0, 1]))).unwrap();
    let oh = b.one_hot(&mut t, &[1, 0, 0, 1]).unwrap();
    let z = b.latent_embedding(&mut t, oh).unwrap();
    let f = b.classifier_f(&mut t, cin, z).unwrap();
    assert_eq!(t.value(f).item(), fb);
}

#[test]
fn hard_gumbel_samples_are_one_hot() {
    let params = ParamStore::new();
    let mut rng = stream_rng(4, 4);
    for _ in 0..200 {
        let mut t = Tape::new(&params);
        let logits = t.constant(Tensor::matrix(5, 2, (0..10).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap());
        let tau = rng.random_range(0.1..4.0);
        let y = gumbel_softmax(&mut t, logits, tau, true, &mut rng).unwrap();
        for r in 0..5 {
            let row = t.value(y).row(r);
            assert!(row == [1.0, 0.0] || row == [0.0, 1.0], "{row:?}");
        }
    }
}

#[test]
fn equal_logits_sample_each_side_half_the_time() {
    let params = ParamStore::new();
    let mut rng = stream_rng(5, 5);
    let n = 100_000;
    let mut t = Tape::new(&params);
    let logits = t.constant(Tensor::zeros(&[n, 2]));
    let y = gumbel_softmax(&mut t, logits, 1.0, true, &mut rng).unwrap();
    let ones = (0..n).filter(|&r| t.value(y).get(r, 0) == 1.0).count();
    let freq = ones as f64 / n as f64;
    assert!((freq - 0.5).abs() < 0.01, "{freq}");
}

#[test]
fn unequal_logits_follow_softmax_probabilities() {
    let params = ParamStore::new();
    let mut rng = stream_rng(6, 5);
    let n = 100_000;
    let mut t = Tape::new(&params);
    let logits = t.constant(Tensor::matrix(n, 2, [1.0, 0.0].repeat(n)).unwrap());
    let y = gumbel_softmax(&mut t, logits, 0.7, true, &mut rng).unwrap();
    let freq = (0..n).filter(|&r| t.value(y).get(r, 0) == 1.0).count() as f64 / n as f64;
    let p = 1.0 / (1.0 + (-1.0f64).exp());
    let se = (p * (1.0 - p) / n as f64).sqrt();
    assert!((freq - p).abs() < 4.0 * se, "{freq} vs {p}");
}

#[test]
fn large_temperature_soft_sample_is_near_uniform() {
    let params = ParamStore::new();
    let mut rng = stream_rng(7, 5);
    let n = 20_000;
    let mut t = Tape::new(&params);
    let logits = t.constant(Tensor::matrix(n, 2, [0.8, -0.4].repeat(n)).unwrap());
    let y = gumbel_softmax(&mut t, logits, 64.0, false, &mut rng).unwrap();
    let mean = (0..n).map(|r| t.value(y).get(r, 0)).sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 0.01, "{mean}");
}

#[test]
fn straight_through_gradient_reaches_projection() {
    let specs = af_hf_specs();
    let (b, params) = setup(8, &specs, 6, 8);
    let state = QuantizerState::new(b.config());
    let mut rng = stream_rng(8, 3);
    let mut t = Tape::new(&params);
    let r = t.constant(rep(&mut rng, 8));
    let q = b.quantize_h(&mut t, r, &state, QuantMode::Train, &mut rng).unwrap();
    let z = b.latent_embedding(&mut t, q.one_hot).unwrap();
    let cin = b.assemble_concept_input(&mut t, ConceptSource::Values(&ConceptVector(vec![0, 1, 1]))).unwrap();
    let f = b.classifier_f(&mut t, cin, z).unwrap();
    let loss = t.bce_with_logits(f, 1.0).unwrap();
    let g = t.backward(loss).unwrap();
    let hw = params.id("pcb.h.w").unwrap();
    assert!(g.get(hw).data().iter().any(|v| *v != 0.0));
}

#[test]
fn eval_codes_are_deterministic_and_bounded() {
    let specs = af_hf_specs();
    for n in [1, 2, 4] {
        let (b, params) = setup(8, &specs, n, 9);
        let state = QuantizerState::new(b.config());
        let mut rng = stream_rng(9, 1);
        let mut codes = HashSet::new();
        for _ in 0..500 {
            let x = rep(&mut rng, 8);
            let run = |noise_seed: u64| {
                let mut t = Tape::new(&params);
                let r = t.constant(x.clone());
                let mut noise = stream_rng(noise_seed, 0);
                let q = b.quantize_h(&mut t, r, &state, QuantMode::Eval, &mut noise).unwrap();
                (q.bits, t.value(q.one_hot).clone())
            };
            let (bits, oh) = run(1);
            assert_eq!(run(2), (bits.clone(), oh));
            assert!(bits.iter().all(|v| *v <= 1));
            codes.insert(bits);
        }
        assert!(codes.len() <= 1 << n);
        if n == 1 {
            assert_eq!(codes.len(), 2);
        }
    }
}

#[test]
fn concept_input_assembly() {
    let specs = af_hf_specs();
    let (b, params) = setup(8, &specs, 6, 10);
    let mut t = Tape::new(&params);
    let c = ConceptVector(vec![1, 0, 1]);
    let gt = b.assemble_concept_input(&mut t, ConceptSource::Values(&c)).unwrap();
    assert_eq!(t.value(gt).data(), &[1.0, 0.0, 1.0]);
    let intervened = c.clone();
    let mut intervened = intervened;
    intervened.0[0] = 0;
    let iv = b.assemble_concept_input(&mut t, ConceptSource::Values(&intervened)).unwrap();
    assert_eq!(t.value(iv).data(), &[0.0, 0.0, 1.0]);
    let logits = t.constant(Tensor::row_vector(vec![0.0, 3.0, -1.0]));
    let pr = b.assemble_concept_input(&mut t, ConceptSource::Predicted(logits)).unwrap();
    let v = t.value(pr).data().to_vec();
    assert_eq!(v[0], 0.5);
    assert!(v[1] > 0.95 && v[2] < 0.5);
    assert!(b.assemble_concept_input(&mut t, ConceptSource::Values(&ConceptVector(vec![1, 0]))).is_err());
    assert!(b.assemble_concept_input(&mut t, ConceptSource::Values(&ConceptVector(vec![1, 0, 2]))).is_err());

    let specs = TaskTemplate::FHf.concept_specs();
    let (b, params) = setup(8, &specs, 6, 10);
    let mut t = Tape::new(&params);
    let x = b.assemble_concept_input(&mut t, ConceptSource::Values(&ConceptVector(vec![3, 5]))).unwrap();
    let e0 = params.get(params.id(&format!("pcb.concept_emb.{}", specs[0].name)).unwrap());
    let e1 = params.get(params.id(&format!("pcb.concept_emb.{}", specs[1].name)).unwrap());
    assert_eq!(t.value(x).data(), [e0.row(3), e1.row(5)].concat().as_slice());
    let mut logits = vec![0.0; 15];
    logits[2] = 4.0;
    logits[7 + 6] = 4.0;
    let l = t.constant(Tensor::row_vector(logits));
    let p = b.assemble_concept_input(&mut t, ConceptSource::Predicted(l)).unwrap();
    assert_eq!(t.value(p).data(), [e0.row(2), e1.row(6)].concat().as_slice());
}

#[test]
fn joint_loss_reference_values() {
    let specs = af_hf_specs();
    let params = ParamStore::new();
    let mut t = Tape::new(&params);
    let risk = t.constant(Tensor::row_vector(vec![0.0]));
    let logits = t.constant(Tensor::row_vector(vec![0.0; 3]));
    for (y, c) in [(0, vec![0, 0, 0]), (1, vec![1, 0, 1]), (1, vec![1, 1, 1])] {
        let l = joint_loss(&mut t, &specs, risk, y, logits, &ConceptVector(c), 1.0).unwrap();
        assert!((t.value(l.total).item() - 4.0 * LN_2).abs() < 1e-15);
    }
    let risk = t.constant(Tensor::row_vector(vec![40.0]));
    let logits = t.constant(Tensor::row_vector(vec![40.0, -40.0, 40.0]));
    let l = joint_loss(&mut t, &specs, risk, 1, logits, &ConceptVector(vec![1, 0, 1]), 1.0).unwrap();
    let v = t.value(l.total).item();
    assert!(v > 0.0 && v < 1e-15, "{v}");
}

proptest! {
    #[test]
    fn joint_loss_is_exactly_additive(
        risk in -8.0f64..8.0,
        logits in proptest::collection::vec(-8.0f64..8.0, 15),
        y in 0u8..2,
        a in 0usize..7,
        b in 0usize..8,
    ) {
        let specs = TaskTemplate::FHf.concept_specs();
        let params = ParamStore::new();
        let mut t = Tape::new(&params);
        let rv = t.constant(Tensor::row_vector(vec![risk]));
        let lv = t.constant(Tensor::row_vector(logits.clone()));
        let l = joint_loss(&mut t, &specs, rv, y, lv, &ConceptVector(vec![a, b]), 1.0).unwrap();
        let ly = pcb_core::autograd::bce_with_logits(risk, f64::from(y)).unwrap();
        let lc = pcb_core::autograd::ce_with_logits(&logits[..7], a).unwrap()
            + pcb_core::autograd::ce_with_logits(&logits[7..], b).unwrap();
        prop_assert_eq!(t.value(l.outcome).item(), ly);
        prop_assert_eq!(t.value(l.concept).item(), lc);
        prop_assert_eq!(t.value(l.total).item(), ly + lc);
    }

    #[test]
    fn temperature_stays_in_range(steps in 0usize..5000, decay in 0.9f64..=1.0) {
        let config = BottleneckConfig { tau_decay: decay, ..BottleneckConfig::default() };
        let mut s = QuantizerState::new(&config);
        let mut prev = s.tau;
        for _ in 0..steps {
            s.step();
            prop_assert!(s.tau <= prev && s.tau >= 0.5);
            prev = s.tau;
        }
        if decay == 1.0 {
            prop_assert_eq!(s.tau, 2.0);
        }
    }
}
