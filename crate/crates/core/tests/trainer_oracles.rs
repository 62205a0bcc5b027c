mod common;

use common::*;
use msflow_core::coupling::FlowChain;
use msflow_core::dataset::Label;
use msflow_core::error::Error;
use msflow_core::params;
use msflow_core::trainer::*;
use msflow_core::Tensor;

#[test]
fn identity_flow_loss_is_half_second_moment() {
    let items = toy_items(64, 5);
    let flow = FlowChain::new(2, 2, None, Some(8), 1.9, &mut rng(6)).unwrap();
    let samples: Vec<&Tensor> = items.iter().map(|i| &i.sample).collect();
    let moment: f64 = items.iter().map(|i| i.sample.sum_squares()).sum::<f64>() / 128.0;
    assert!((mean_loss(&flow, &samples).unwrap() - moment / 2.0).abs() < 1e-9);
}

#[test]
fn nll_loss_examples() {
    let z = Tensor::new(vec![2, 1, 1], vec![1.0, 2.0]).unwrap();
    assert_eq!(nll_loss(std::slice::from_ref(&z), 0.0, 2).unwrap(), 1.25);
    assert_eq!(nll_loss(&[z.clone(), z.clone()], 1.0, 4).unwrap(), 1.0);
    assert!(nll_loss(std::slice::from_ref(&z), 0.0, 0).is_err());
    assert!(matches!(nll_loss(&[z], f64::INFINITY, 2), Err(Error::NonFinite { .. })));
}

#[test]
fn lr_schedule_drops_at_seventy_and_ninety_percent() {
    let cfg = TrainConfig { lr: 9e-4, ..Default::default() };
    let total = 1000;
    assert_eq!(lr_at(500, total, &cfg), 9e-4);
    assert!((lr_at(800, total, &cfg) - 3e-4).abs() < 1e-18);
    assert!((lr_at(950, total, &cfg) - 1e-4).abs() < 1e-18);
    assert!((lr_at(699, total, &cfg) - 9e-4).abs() < 1e-18);
    assert!((lr_at(700, total, &cfg) - 3e-4).abs() < 1e-18);
}

#[test]
fn lr_trace_follows_schedule_over_a_run() {
    let items = toy_items(40, 7);
    let mut flow = FlowChain::new(2, 1, None, Some(4), 1.9, &mut rng(8)).unwrap();
    let cfg = TrainConfig { epochs: 10, batch_size: 8, lr: 1e-3, ..Default::default() };
    let log = train(&mut flow, &items, &cfg).unwrap();
    assert_eq!(log.lr_trace.len(), 50);
    for (s, &lr) in log.lr_trace.iter().enumerate() {
        assert_eq!(lr, lr_at(s, 50, &cfg));
    }
    assert_eq!(log.epochs.len(), 10);
    assert!(log.to_csv().starts_with("epoch,loss,lr,seconds,checksum\n"));
}

#[test]
fn zero_epochs_leave_parameters_untouched() {
    let items = toy_items(16, 9);
    let mut flow = FlowChain::new(2, 2, None, Some(8), 1.9, &mut rng(10)).unwrap();
    let before = flow.clone();
    let log = train(&mut flow, &items, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
    assert!(log.epochs.is_empty());
    assert_eq!(flow, before);
}

#[test]
fn training_is_deterministic() {
    let items = toy_items(48, 11);
    let run = || {
        let mut flow = FlowChain::new(2, 2, None, Some(8), 1.9, &mut rng(12)).unwrap();
        let cfg = TrainConfig { epochs: 3, batch_size: 16, lr: 1e-3, seed: 13, ..Default::default() };
        let log = train(&mut flow, &items, &cfg).unwrap();
        (log.epochs.iter().map(|e| (e.loss, e.checksum.clone())).collect::<Vec<_>>(), params::checksum(&flow))
    };
    assert_eq!(run(), run());
}

#[test]
fn anomalous_training_sample_is_a_data_error() {
    let mut items = toy_items(8, 14);
    items[3].label = Label::Anomalous;
    let mut flow = FlowChain::new(2, 1, None, Some(4), 1.9, &mut rng(15)).unwrap();
    let err = train(&mut flow, &items, &TrainConfig { epochs: 1, ..Default::default() }).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains("p3")), "{err}");
}

#[test]
fn non_finite_input_diverges_with_event() {
    let mut items = toy_items(8, 16);
    items[0].sample.data_mut()[0] = f32::NAN;
    let mut flow = FlowChain::new(2, 1, None, Some(4), 1.9, &mut rng(17)).unwrap();
    let mut seen = false;
    let err = train_with(&mut flow, &items, &TrainConfig { epochs: 1, batch_size: 8, ..Default::default() }, &mut |e| {
        seen |= matches!(e, TrainEvent::Diverged { .. });
        Ok(())
    })
    .unwrap_err();
    assert!(seen);
    assert!(matches!(err, Error::Diverged { .. }));
}

#[test]
fn training_lowers_the_loss() {
    let items = toy_items(256, 18);
    let mut flow = FlowChain::new(2, 2, None, Some(16), 1.9, &mut rng(19)).unwrap();
    let before = per_element_nll(&flow, &items);
    train(&mut flow, &items, &TrainConfig { epochs: 4, batch_size: 32, lr: 2e-3, ..Default::default() }).unwrap();
    assert!(per_element_nll(&flow, &items) < before - 0.5);
}

#[test]
fn invalid_config_is_rejected() {
    let items = toy_items(4, 20);
    let mut flow = FlowChain::new(2, 1, None, Some(4), 1.9, &mut rng(21)).unwrap();
    for cfg in [
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { lr: -1.0, ..Default::default() },
        TrainConfig { lr_drop_points: vec![0.9, 0.7], ..Default::default() },
        TrainConfig { clip_norm: Some(0.0), ..Default::default() },
    ] {
        assert!(matches!(train(&mut flow, &items, &cfg), Err(Error::Config(_))));
    }
}
