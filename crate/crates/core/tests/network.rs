use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sofd::dataio::{Dataset, Role, Sample};
use sofd::graph::{laplacian_of, LaplacianBundle};
use sofd::nnet::{self, Architecture, GcnModel, TrainConfig};
use sofd::openset::{fuse, LayerSelection};

fn ring(n: usize) -> LaplacianBundle {
    let w = DMatrix::from_fn(n, n, |i, j| if (i + 1) % n == j || (j + 1) % n == i { 1.0 } else { 0.0 });
    LaplacianBundle::from_laplacian(laplacian_of(&w)).unwrap()
}

fn samples(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<Sample> {
    (0..n).map(|id| Sample { id, x: (0..m).map(|_| rng.random_range(-1.5..1.5)).collect(), label: None, speed: 1 }).collect()
}

#[test]
fn finite_differences_on_a_deeper_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let arch = Architecture { cheb_order: 3, conv_widths: vec![2, 3, 2], hidden_widths: vec![5, 4], outputs: 4 };
    let mut model = GcnModel::new(ring(5), arch, 3).unwrap();
    let batch = samples(&mut rng, 11, 5);
    let refs: Vec<&Sample> = batch.iter().collect();
    let labels: Vec<usize> = (0..11).map(|i| i % 4).collect();
    let (_, grad) = model.loss_and_gradient(&refs, &labels).unwrap();
    let analytic = grad.tensors().concat();
    let lens: Vec<usize> = model.params.tensors().iter().map(|t| t.len()).collect();
    let h = 1e-5;
    let mut idx = 0;
    for (t, len) in lens.into_iter().enumerate() {
        for j in 0..len {
            let orig = model.params.tensors()[t][j];
            model.params.tensors_mut()[t][j] = orig + h;
            let up = model.loss_and_gradient(&refs, &labels).unwrap().0;
            model.params.tensors_mut()[t][j] = orig - h;
            let down = model.loss_and_gradient(&refs, &labels).unwrap().0;
            model.params.tensors_mut()[t][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[idx];
            assert!((a - numeric).abs() <= 1e-4 * a.abs().max(numeric.abs()).max(1e-6), "tensor {t} entry {j}: {a} vs {numeric}");
            idx += 1;
        }
    }
}

#[test]
fn forward_shapes_and_fusion_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let arch = Architecture { cheb_order: 2, conv_widths: vec![4, 4], hidden_widths: vec![6, 3], outputs: 3 };
    let model = GcnModel::new(ring(6), arch, 0).unwrap();
    let batch = samples(&mut rng, 7, 6);
    let trace = model.forward(&batch).unwrap();
    assert_eq!(trace.batch_size(), 7);
    assert_eq!(trace.logits.shape(), (7, 3));
    for r in 0..7 {
        let total: f64 = trace.probabilities.row(r).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
    let fused = fuse(&trace, &LayerSelection::All).unwrap();
    assert_eq!(fused[0].dim(), 6 + 3 + 3);
    assert_eq!(fuse(&trace, &LayerSelection::Last).unwrap()[0].dim(), 3);
    // hidden outputs come after the ReLU
    assert!(fused.iter().all(|f| f.z[..9].iter().all(|&v| v >= 0.0)));
    let bad = vec![Sample { id: 0, x: vec![0.0; 5], label: None, speed: 1 }];
    assert!(model.forward(&bad).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let arch = Architecture { cheb_order: 2, conv_widths: vec![3], hidden_widths: vec![4], outputs: 2 };
    let model = GcnModel::new(ring(4), arch, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).unwrap();
    let back = GcnModel::load(&path).unwrap();
    let batch = samples(&mut rng, 5, 4);
    assert_eq!(model.predict(&batch).unwrap().1, back.predict(&batch).unwrap().1);
    assert!(GcnModel::from_checkpoint("not a checkpoint").is_err());
}

#[test]
fn training_is_reproducible_and_reduces_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut data = samples(&mut rng, 120, 4);
    for s in &mut data {
        let c = s.id % 3;
        s.x[c] += 3.0;
        s.label = Some(c);
    }
    let ds = Dataset::new(data, Role::Labeled, 3);
    let arch = Architecture { cheb_order: 2, conv_widths: vec![4], hidden_widths: vec![8], outputs: 3 };
    let cfg = TrainConfig { learning_rate: 1e-2, batch_size: 16, epochs: 15, seed: 5, ..TrainConfig::default() };
    let run = || {
        let mut m = GcnModel::new(ring(4), arch.clone(), 1).unwrap();
        let h = nnet::train(&mut m, &ds, &cfg).unwrap();
        (m, h)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert_eq!(a.params, b.params);
    assert!(ha.last().unwrap() < &(0.5 * ha[0]));
}
