use hyperlora_core::datagen::{generate_dataset, Label, SignalKind, SyntheticSpec, TaskSpec};
use hyperlora_core::hyper::HyperConfig;
use hyperlora_core::params::ParamStore;
use hyperlora_core::rng::{self, StreamRng};
use hyperlora_core::tensor::bce_with_logits;
use hyperlora_core::train::{sample_task, train, Model, Prepared, TrainConfig, Variant};
use hyperlora_core::vit::BackboneConfig;
use hyperlora_core::{Error, Real, Tensor};
use rand::Rng;

fn backbone() -> BackboneConfig {
    BackboneConfig {
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 2,
        patch_size: 4,
        mlp_ratio: 4,
        image_side: 12,
    }
}

fn hyper(dropout: f64) -> HyperConfig {
    HyperConfig {
        task_embed_dim: 8,
        pos_embed_dim: 4,
        latent: 8,
        head_in: 8,
        rank: 2,
        alpha: 2.0,
        dropout,
        ..Default::default()
    }
}

fn spec(n: usize, seed: u64) -> SyntheticSpec {
    let task = |family, kind| TaskSpec {
        family,
        kind,
        prevalence: 0.4,
        missing_rate: 0.2,
    };
    SyntheticSpec {
        n_samples: n,
        tasks: vec![
            task(0, SignalKind::CenterBlob),
            task(0, SignalKind::CenterBlob),
            task(1, SignalKind::PeripheralTexture),
        ],
        height: 12,
        width: 12,
        depth: 7,
        seed,
        ..Default::default()
    }
}

fn prepared<S: Real>(model: &Model<S>, n: usize, seed: u64) -> Vec<Prepared<S>> {
    generate_dataset(&spec(n, seed))
        .unwrap()
        .samples
        .iter()
        .map(|s| model.prepare(s).unwrap())
        .collect()
}

fn randomize<S: Real>(store: &mut ParamStore<S>, seed: u64, std: f64) {
    let mut r = rng::stream(seed, 13);
    for p in store.trainable_paths() {
        let t = store.get_mut(&p).unwrap();
        let v: Vec<f64> = (0..t.numel()).map(|_| rng::normal(&mut r) * std).collect();
        *t = Tensor::from_f64(t.shape(), &v).unwrap();
    }
}

#[test]
fn sample_task_examples() {
    let mut r = rng::stream(1, 0);
    let one = [Label::Missing, Label::Pos, Label::Missing];
    for _ in 0..100 {
        assert_eq!(sample_task(&one, &mut r).unwrap(), 1);
    }
    assert!(matches!(
        sample_task(&[Label::Missing; 3], &mut r),
        Err(Error::NoAvailableTask)
    ));

    let row = [Label::Neg, Label::Missing, Label::Pos];
    let mut counts = [0usize; 3];
    for _ in 0..10_000 {
        counts[sample_task(&row, &mut r).unwrap()] += 1;
    }
    assert_eq!(counts[1], 0);
    for c in [counts[0], counts[2]] {
        assert!((c as f64 / 10_000.0 - 0.5).abs() <= 0.02, "{counts:?}");
    }
    // chi-square with one degree of freedom, 99.9% quantile
    let chi2: f64 = [counts[0], counts[2]].iter().map(|&c| (c as f64 - 5000.0).powi(2) / 5000.0).sum();
    assert!(chi2 < 10.83, "{chi2}");
}

#[test]
fn initial_loss_is_ln2_per_sample() {
    for variant in [Variant::Hyperct, Variant::EwBaseline] {
        let model = Model::<f32>::new(&backbone(), &hyper(0.05), 3, variant, 2).unwrap();
        let data = prepared(&model, 12, 2);
        let batch: Vec<&Prepared> = data.iter().filter(|p| p.labels.iter().any(|l| *l != Label::Missing)).collect();
        let (loss, grads) = model.loss_for_batch(&batch, &mut rng::stream(2, 1)).unwrap();
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-6, "{variant:?}: {loss}");
        assert!(grads.contains_key("task_head.bias"));
    }
}

#[test]
fn duplicated_sample_has_the_same_mean_loss() {
    let mut model = Model::<f32>::new(&backbone(), &hyper(0.0), 3, Variant::Hyperct, 3).unwrap();
    randomize(model.params_mut(), 3, 0.3);
    let mut data = prepared(&model, 6, 3);
    data[0].labels = vec![Label::Missing, Label::Pos, Label::Missing];
    let single = model.loss_for_batch(&[&data[0]], &mut rng::stream(3, 1)).unwrap().0;
    let double = model.loss_for_batch(&[&data[0], &data[0]], &mut rng::stream(3, 1)).unwrap().0;
    assert!((single - double).abs() <= 1e-6 * single.abs().max(1.0));
}

#[test]
fn batch_loss_replays_per_sample_oracle() {
    let mut model = Model::<f32>::new(&backbone(), &hyper(0.0), 3, Variant::Hyperct, 4).unwrap();
    randomize(model.params_mut(), 4, 0.3);
    let data: Vec<Prepared> = prepared(&model, 20, 4)
        .into_iter()
        .filter(|p| p.labels.iter().any(|l| *l != Label::Missing))
        .take(3)
        .collect();
    let batch: Vec<&Prepared> = data.iter().collect();
    let (loss, _) = model.loss_for_batch(&batch, &mut rng::stream(4, 1)).unwrap();

    // oracle: replay the task draws, then score each sample on its own
    let mut r = rng::stream(4, 1);
    let tasks: Vec<usize> = data.iter().map(|p| sample_task(&p.labels, &mut r).unwrap()).collect();
    let logits = model.predict_logits(&data, false).unwrap();
    let want = data
        .iter()
        .zip(&tasks)
        .zip(&logits)
        .map(|((p, &k), row)| bce_with_logits(row[k].unwrap(), p.labels[k].binary().unwrap()))
        .sum::<f64>()
        / 3.0;
    assert!((loss - want).abs() <= 1e-5 * want.max(1.0), "{loss} vs {want}");
}

fn loss_at(model: &Model<f64>, batch: &[&Prepared<f64>], r: &StreamRng) -> f64 {
    model.loss_for_batch(batch, &mut r.clone()).unwrap().0
}

#[test]
fn training_loss_gradient_matches_central_differences() {
    for variant_seed in 0..3u64 {
        let mut model = Model::<f32>::new(&backbone(), &hyper(0.05), 3, Variant::Hyperct, 10 + variant_seed).unwrap();
        randomize(model.params_mut(), 10 + variant_seed, 0.3);
        let data = prepared(&model, 16, 10 + variant_seed);
        let batch: Vec<&Prepared> = data.iter().filter(|p| p.labels.iter().any(|l| *l != Label::Missing)).take(4).collect();
        let r = rng::stream(variant_seed, 5);
        let (_, grads) = model.loss_for_batch(&batch, &mut r.clone()).unwrap();

        let mut m64: Model<f64> = model.cast().unwrap();
        let data64: Vec<Prepared<f64>> = batch
            .iter()
            .map(|p| Prepared {
                id: p.id.clone(),
                tokens: p.tokens.cast(),
                triplets: p.triplets,
                labels: p.labels.clone(),
            })
            .collect();
        let batch64: Vec<&Prepared<f64>> = data64.iter().collect();

        let mut pick = rng::stream(variant_seed, 6);
        let head = format!("hyper.head.{}.weight", pick.random_range(0..12));
        let groups = ["task_embed", "pos_embed", head.as_str(), "task_head.weight"];
        let h = 1e-3;
        let mut checked = 0;
        for path in groups {
            let g = &grads[path];
            for _ in 0..4 {
                let j = pick.random_range(0..g.numel());
                let a = g.data()[j] as f64;
                if a.abs() < 1e-6 {
                    continue;
                }
                let orig = m64.params().get(path).unwrap().data()[j];
                m64.params_mut().get_mut(path).unwrap().data_mut()[j] = orig + h;
                let up = loss_at(&m64, &batch64, &r);
                m64.params_mut().get_mut(path).unwrap().data_mut()[j] = orig - h;
                let down = loss_at(&m64, &batch64, &r);
                m64.params_mut().get_mut(path).unwrap().data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (a - fd).abs() / a.abs().max(fd.abs());
                assert!(rel <= 1e-3, "{path}[{j}]: analytic {a}, fd {fd}, rel {rel}");
                checked += 1;
            }
        }
        assert!(checked >= 12, "only {checked} coordinates above threshold");
    }
}

#[test]
fn variants_differ_only_in_delta_provenance() {
    let hyperct = Model::<f32>::new(&backbone(), &hyper(0.05), 3, Variant::Hyperct, 1).unwrap();
    let ew = Model::<f32>::new(&backbone(), &hyper(0.05), 3, Variant::EwBaseline, 1).unwrap();
    let paths = |m: &Model| m.params().trainable_paths();
    let (a, b) = (paths(&hyperct), paths(&ew));
    assert_ne!(a, b);
    let shared: Vec<&String> = a.iter().filter(|p| b.contains(p)).collect();
    assert_eq!(shared, vec!["task_head.bias", "task_head.weight"]);
    assert!(a.iter().filter(|p| !shared.contains(p)).all(|p| p.starts_with("hyper.") || p.ends_with("_embed")));
    assert!(b.iter().filter(|p| !shared.contains(p)).all(|p| p.starts_with("lora.")));
    // both variants see the same frozen backbone
    assert_eq!(hyperct.backbone().params().paths().collect::<Vec<_>>(), ew.backbone().params().paths().collect::<Vec<_>>());
    for (p, e) in hyperct.backbone().params().iter() {
        assert_eq!(e.tensor, ew.backbone().params().get(p).unwrap().clone());
    }
}

fn run(variant: Variant, epochs: usize) -> (Model, Vec<String>, ParamStore, Vec<u8>) {
    let mut model = Model::<f32>::new(&backbone(), &hyper(0.05), 3, variant, 6).unwrap();
    let data = prepared(&model, 40, 6);
    let (tr, va) = data.split_at(30);
    let init = model.params().trainable_subset();
    let before = model.backbone().params().clone();
    let cfg = TrainConfig {
        epochs,
        batch_size: 4,
        lr: 1e-2,
        weight_decay: 0.01,
        seed: 6,
        variant,
        ..Default::default()
    };
    let out = train(&mut model, tr, va, &cfg, |_| {}).unwrap();
    let log: Vec<String> = out.log.iter().map(|r| format!("{r:?}")).collect();
    // frozen guarantee: byte-identical backbone
    for (p, e) in before.iter() {
        let now = model.backbone().params().get(p).unwrap();
        assert_eq!(now.to_le_bytes(), e.tensor.to_le_bytes(), "{p}");
    }
    let bytes: Vec<u8> = out.best.params.iter().flat_map(|(_, e)| e.tensor.to_le_bytes()).collect();
    if epochs == 0 {
        assert_eq!(out.best.epoch, 0);
        assert_eq!(out.best.params, init);
    }
    (model, log, out.best.params, bytes)
}

#[test]
fn zero_epochs_return_the_initialization() {
    for v in [Variant::Hyperct, Variant::EwBaseline] {
        let (_, log, _, _) = run(v, 0);
        assert!(log.is_empty());
    }
}

#[test]
fn training_replays_bit_for_bit_and_keeps_backbone_frozen() {
    for v in [Variant::Hyperct, Variant::EwBaseline] {
        let (_, log1, _, b1) = run(v, 2);
        let (_, log2, _, b2) = run(v, 2);
        assert_eq!(log1.len(), 2);
        assert_eq!(log1, log2);
        assert_eq!(b1, b2);
    }
}

#[test]
fn empty_splits_are_rejected() {
    let mut model = Model::<f32>::new(&backbone(), &hyper(0.05), 3, Variant::Hyperct, 1).unwrap();
    let data = prepared(&model, 4, 1);
    let cfg = TrainConfig::default();
    assert!(matches!(train(&mut model, &[], &data, &cfg, |_| {}), Err(Error::Empty(_))));
    assert!(matches!(train(&mut model, &data, &[], &cfg, |_| {}), Err(Error::Empty(_))));
    assert!(model.loss_for_batch(&[], &mut rng::stream(0, 0)).is_err());
}
