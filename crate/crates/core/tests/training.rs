use predcls::eval::{configuration_groups, group_distances};
use predcls::experiment::{first_epoch_losses, overfit, BenchmarkConfig};
use predcls::train::TrainConfig;

#[test]
fn full_model_memorizes_32_pairs() {
    let r = overfit(0, 200).unwrap();
    assert_eq!((r.samples, r.steps), (32, 200));
    assert!(r.train_accuracy >= 0.95, "{r:?}");
}

#[test]
fn first_epoch_lowers_loss_for_most_seeds() {
    let mut ok = 0;
    for seed in 0..10 {
        let (before, after) = first_epoch_losses(seed).unwrap();
        assert!(before.is_finite() && after.is_finite());
        ok += usize::from(after <= before);
    }
    assert!(ok >= 9, "{ok}/10 seeds");
}

#[test]
fn trained_attention_groups_similar_configurations() {
    let bench = BenchmarkConfig {
        train_images: 150,
        test_images: 25,
        train: TrainConfig {
            epochs: 6,
            lr_drop_epochs: vec![4],
            ..Default::default()
        },
        ..Default::default()
    };
    let data = bench.build(0).unwrap();
    let out = predcls::train(&data.train, &data.train_inputs, bench.dims, &bench.train).unwrap();
    let a = out.model.predict(&data.test_inputs, 128).unwrap().a;
    let d = group_distances(a.view(), &configuration_groups(&data.test)).unwrap();
    assert!(d.separates(), "{d:?}");
}
