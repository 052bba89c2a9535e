use saformer_core::data::DatasetSpec;

/// Class means of the flattened training clips; predicts the closest mean.
fn nearest_centroid_accuracy(spec: &str, t: usize, hw: usize) -> f64 {
    let spec = DatasetSpec::parse(spec).unwrap();
    let (train, test) = spec.build(t, hw, hw).unwrap();
    let dim = train.samples[0].image.numel();
    let mut sums = vec![vec![0.0f64; dim]; train.num_classes];
    let mut counts = vec![0usize; train.num_classes];
    for s in &train.samples {
        counts[s.label] += 1;
        for (acc, v) in sums[s.label].iter_mut().zip(s.image.data()) {
            *acc += *v as f64;
        }
    }
    for (c, n) in sums.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
    }
    let hits = test
        .samples
        .iter()
        .filter(|s| {
            let dist = |c: &Vec<f64>| c.iter().zip(s.image.data()).map(|(m, v)| (m - *v as f64).powi(2)).sum::<f64>();
            let best = (0..sums.len()).min_by(|a, b| dist(&sums[*a]).total_cmp(&dist(&sums[*b]))).unwrap();
            best == s.label
        })
        .count();
    hits as f64 / test.len() as f64
}

#[test]
fn two_class_events_are_learnable_by_a_linear_baseline() {
    let acc = nearest_centroid_accuracy("synthetic-events:2:256:8", 16, 16);
    assert!(acc > 0.7, "nearest-centroid accuracy {acc}");
}

#[test]
fn shapes_beat_chance_under_a_linear_baseline() {
    // shapes move and rescale, so class means are blurred; chance is 1/6
    let acc = nearest_centroid_accuracy("synthetic-shapes:6:240:3", 1, 16);
    assert!(acc > 2.0 / 6.0, "nearest-centroid accuracy {acc}");
}

#[test]
fn train_and_test_splits_differ() {
    let spec = DatasetSpec::parse("synthetic-events:4:32:5").unwrap();
    let (train, test) = spec.build(4, 8, 8).unwrap();
    assert_eq!(test.len(), 16);
    assert!(test.samples.iter().all(|s| !train.samples.contains(s)));
}

#[test]
fn events_are_two_channel_binary_clips() {
    let spec = DatasetSpec::parse("synthetic-events:8:16:0").unwrap();
    let (train, _) = spec.build(6, 12, 12).unwrap();
    let (x, y) = train.batch(&[0, 1, 2], 6).unwrap();
    assert_eq!(x.shape(), &[6, 3, 2, 12, 12]);
    assert!(x.is_binary());
    assert_eq!(y.len(), 3);
}
