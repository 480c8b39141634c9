use must::config::RunConfig;
use must::data::{generate_synthetic, labels_by_video, EmbeddingStore};
use must::mtfe::Mtfe;
use must::tcm::Tcm;
use must::tensor::Tensor;
use must::train::{fit_mtfe, fit_tcm};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_str(
        "data.num_videos = 3
         data.test_videos = 1
         data.frames_per_video = 40
         data.min_segment = 10
         data.max_segment = 20
         data.frame_size = 16
         pyramid.strides_s = 1,2
         pyramid.frames = 4
         backbone.dim = 8
         backbone.depth = 1
         backbone.heads = 2
         backbone.patch = 8
         mtfe.lr = 3e-3
         mtfe.batch_size = 8
         tcm.lr = 3e-3
         tcm.heads = 2",
    )
    .unwrap();
    cfg
}

fn mtfe_run(epochs: usize) -> (Mtfe<f64>, must::train::TrainLog) {
    let cfg = tiny();
    let data = generate_synthetic(&cfg.synthetic_spec()).unwrap();
    let labels = labels_by_video(&data.annotations);
    let videos: Vec<String> = labels.keys().cloned().collect();
    let mut mtfe = Mtfe::new(cfg.mtfe_config().unwrap(), cfg.seed).unwrap();
    let mut tc = cfg.mtfe_train();
    tc.epochs = epochs;
    let log = fit_mtfe(&mut mtfe, &data.store, &labels, &videos, &tc).unwrap();
    (mtfe, log)
}

#[test]
fn mtfe_loss_falls_each_epoch() {
    let (_, log) = mtfe_run(3);
    let losses: Vec<f64> = log.epochs.iter().map(|e| e.loss).collect();
    assert_eq!(losses.len(), 3);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn zero_epochs_leaves_initial_weights() {
    let cfg = tiny();
    let init = Mtfe::<f64>::new(cfg.mtfe_config().unwrap(), cfg.seed).unwrap();
    let (trained, log) = mtfe_run(0);
    assert!(log.step_losses.is_empty());
    for (a, b) in init
        .params()
        .tensors()
        .iter()
        .zip(trained.params().tensors())
    {
        assert_eq!(a.values(), b.values());
    }
}

#[test]
fn same_seed_same_trace() {
    let (a, la) = mtfe_run(1);
    let (b, lb) = mtfe_run(1);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&la.step_losses), bits(&lb.step_losses));
    for (x, y) in a.params().tensors().iter().zip(b.params().tensors()) {
        assert_eq!(bits(x.values()), bits(y.values()));
    }
}

#[test]
fn tcm_loss_falls_on_separable_embeddings() {
    let cfg = tiny();
    let data = generate_synthetic(&cfg.synthetic_spec()).unwrap();
    let labels = labels_by_video(&data.annotations);
    let videos: Vec<String> = labels.keys().cloned().collect();
    let width = cfg.tcm_config().width;
    // one-hot phase codes plus a constant column make a trivially learnable stream
    let mut store = EmbeddingStore::new(width);
    for v in &videos {
        let l = &labels[v];
        let mut rows = vec![0.0; l.len() * width];
        for (i, &c) in l.iter().enumerate() {
            rows[i * width + c] = 1.0;
            rows[i * width + width - 1] = 0.5;
        }
        store
            .push(v.clone(), Tensor::new(vec![l.len(), width], rows).unwrap())
            .unwrap();
    }
    let mut tcm = Tcm::<f64>::new(cfg.tcm_config(), 3).unwrap();
    let mut tc = cfg.tcm_train();
    tc.epochs = 4;
    let log = fit_tcm(&mut tcm, &store, &labels, &videos, 8, 6, &tc).unwrap();
    let first = log.epochs[0].loss;
    let last = log.epochs.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
}
