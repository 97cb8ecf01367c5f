use affmtl::data::{split_by_video, synth_generate, AnnotationRecord, DatasetSplit, SynthConfig};
use affmtl::layers::{Model, ParamStore, Session};
use affmtl::metrics::{expr_macro_f1, AbsentClassF1};
use affmtl::objectives::{expr_loss, ClassWeights};
use affmtl::task::{HeadKind, NUM_AUS, NUM_EXPR};
use affmtl::training::{
    evaluate, extract_bank, predict, score_predictions, task_score, train_joint, train_single,
    Adam, AdamParams, Checkpoint, Predictions, TrainConfig,
};
use affmtl::{Error, Tensor, TaskKind};

fn small() -> (DatasetSplit, DatasetSplit) {
    let records = synth_generate(&SynthConfig {
        num_videos: 4,
        frames_per_video: 80,
        ..Default::default()
    })
    .unwrap();
    split_by_video(&records, 1).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        max_epochs: 2,
        val_videos: 1,
        ..Default::default()
    }
}

fn head_bits(params: &ParamStore, m: &Model, head: HeadKind) -> Vec<u64> {
    m.head_params(head)
        .iter()
        .flat_map(|&id| params.get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn zero_epochs_keep_the_initial_model() {
    let (train, val) = small();
    let cfg = TrainConfig { max_epochs: 0, ..quick() };
    let out = train_single(TaskKind::Valence, &cfg, &train, &val).unwrap();
    assert_eq!(out.log.len(), 1);
    assert_eq!(out.checkpoint.best_epoch, 0);
    assert!(out.batch_losses.is_empty());
    let fresh = Model::new(cfg.arch(train.input_dim().unwrap(), false), cfg.seed).unwrap();
    assert_eq!(out.checkpoint.model.params, fresh.params);
}

#[test]
fn excluded_heads_and_banks_stay_untouched() {
    let (train, val) = small();
    let cfg = quick();
    let au = train_single(TaskKind::Au, &cfg, &train, &val).unwrap();
    let expr = train_single(TaskKind::Expr, &cfg, &train, &val).unwrap();
    let mut all = train.records.clone();
    all.extend(val.records.iter().cloned());
    let bank = extract_bank(&au.checkpoint, &all).unwrap();
    let (bank_bytes, au_bytes) = (bank.to_bytes(), au.checkpoint.to_bytes());

    let jcfg = TrainConfig {
        tasks: vec![TaskKind::Expr],
        fusion_sources: vec![TaskKind::Au],
        ..cfg.clone()
    };
    let joint = train_joint(&jcfg, &train, &val, &[&bank], Some(&expr.checkpoint)).unwrap();
    let m = &joint.checkpoint.model;
    let fresh = Model::new(jcfg.arch(train.input_dim().unwrap(), true), jcfg.seed).unwrap();
    for head in [HeadKind::Va, HeadKind::Au] {
        assert_eq!(head_bits(&joint.final_params, m, head), head_bits(&fresh.params, &fresh, head));
    }
    assert_ne!(
        head_bits(&joint.final_params, m, HeadKind::Expr),
        head_bits(&expr.checkpoint.model.params, &expr.checkpoint.model, HeadKind::Expr)
    );
    assert_eq!(bank.to_bytes(), bank_bytes);
    assert_eq!(au.checkpoint.to_bytes(), au_bytes);
    assert_eq!(joint.checkpoint.provenance.banks[0].checkpoint_hash, au.checkpoint.hash());
}

#[test]
fn saved_checkpoint_reproduces_its_best_score() {
    let (train, val) = small();
    for task in TaskKind::ALL {
        let out = train_single(task, &quick(), &train, &val).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.best");
        std::fs::write(&path, out.checkpoint.to_bytes()).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        let report = evaluate(&loaded, &val, &[]).unwrap();
        assert_eq!(task_score(&report, task), Some(out.checkpoint.best_score), "{task}");
        assert_eq!(out.log[out.checkpoint.best_epoch].val_score, out.checkpoint.best_score);
    }
}

#[test]
fn same_seed_same_best_score() {
    let (train, val) = small();
    let a = train_single(TaskKind::Arousal, &quick(), &train, &val).unwrap();
    let b = train_single(TaskKind::Arousal, &quick(), &train, &val).unwrap();
    assert_eq!(a.checkpoint.best_score.to_bits(), b.checkpoint.best_score.to_bits());
    assert_eq!(a.batch_losses, b.batch_losses);
}

#[test]
fn five_epochs_lower_the_training_loss() {
    let records = synth_generate(&SynthConfig::default()).unwrap();
    let cfg = TrainConfig { max_epochs: 5, patience: 0, ..Default::default() };
    let (train, val) = split_by_video(&records, cfg.val_videos).unwrap();
    for task in TaskKind::ALL {
        for seed in 0..5 {
            let out = train_single(task, &TrainConfig { seed, ..cfg.clone() }, &train, &val).unwrap();
            let (first, last) = (out.log[0].train_loss, out.log[5].train_loss);
            assert!(last < first, "{task} seed {seed}: {first} -> {last}");
        }
    }
}

#[test]
fn default_expression_model_separates_the_synthetic_classes() {
    let records = synth_generate(&SynthConfig::default()).unwrap();
    let cfg = TrainConfig::default();
    let (train, val) = split_by_video(&records, cfg.val_videos).unwrap();
    let out = train_single(TaskKind::Expr, &cfg, &train, &val).unwrap();
    assert!(out.checkpoint.best_score > 0.9, "{}", out.checkpoint.best_score);
}

#[test]
fn linear_probe_recovers_expression() {
    let records = synth_generate(&SynthConfig::default()).unwrap();
    let (train, val) = split_by_video(&records, 2).unwrap();
    let labelled = |s: &DatasetSplit| -> (Tensor, Vec<i32>) {
        let recs: Vec<&AnnotationRecord> = s.records.iter().filter(|r| r.expression >= 0).collect();
        let rows: Vec<Vec<f64>> = recs.iter().map(|r| r.features.clone()).collect();
        (Tensor::from_rows(&rows).unwrap(), recs.iter().map(|r| r.expression).collect())
    };
    let (xt, yt) = labelled(&train);
    let (xv, yv) = labelled(&val);
    let dim = xt.shape()[1];
    let mut store = ParamStore::new();
    let w = store.push("probe.weight", Tensor::zeros(&[dim, NUM_EXPR]));
    let b = store.push("probe.bias", Tensor::zeros(&[NUM_EXPR]));
    let mut opt = Adam::new(2, AdamParams { lr: 0.05, ..Default::default() });
    let forward = |s: &mut Session, x: &Tensor| {
        let x = s.tape.constant(x.clone());
        let z = s.tape.matmul(x, s.param(w)).unwrap();
        let z = s.tape.add_row(z, s.param(b)).unwrap();
        s.tape.softmax(z, 1).unwrap()
    };
    for _ in 0..300 {
        let mut s = Session::traced(&store, &[true, true]);
        let p = forward(&mut s, &xt);
        let l = expr_loss(&mut s.tape, p, &yt, &ClassWeights::default()).unwrap();
        let mut g = s.tape.backward(l).unwrap();
        let pairs = vec![(w, g.take(s.param(w)).unwrap()), (b, g.take(s.param(b)).unwrap())];
        opt.step(&mut store, &pairs).unwrap();
    }
    let mut s = Session::eval(&store);
    let p = forward(&mut s, &xv);
    let f1 = expr_macro_f1(s.tape.value(p), &yv, AbsentClassF1::One).unwrap().macro_f1;
    assert!(f1 > 0.9, "probe macro F1 {f1}");
}

#[test]
fn perfect_predictions_score_three() {
    let (_, val) = small();
    let cfg = TrainConfig {
        tasks: vec![TaskKind::Au, TaskKind::Expr, TaskKind::Valence, TaskKind::Arousal],
        ..quick()
    };
    let recs = &val.records;
    let preds = Predictions {
        records: (0..recs.len()).collect(),
        au: Some(recs.iter().map(|r| std::array::from_fn::<f64, NUM_AUS, _>(|k| r.aus[k].max(0) as f64)).collect()),
        expr: Some(
            recs.iter()
                .map(|r| std::array::from_fn::<f64, NUM_EXPR, _>(|k| (k as i32 == r.expression) as u8 as f64))
                .collect(),
        ),
        va: Some(recs.iter().map(|r| [r.valence, r.arousal]).collect()),
    };
    let report = score_predictions(&cfg, &val, &preds).unwrap();
    assert_eq!(report.p, Some(3.0));
    assert_eq!(report.au_counts.evaluated + report.au_counts.skipped, recs.len());
}

#[test]
fn window_padding_does_not_leak_into_predictions() {
    let (train, val) = small();
    let cfg = TrainConfig {
        tasks: vec![TaskKind::Valence],
        temporal: true,
        seq_len: 5,
        stride: 5,
        init_from_single: false,
        ..quick()
    };
    let out = train_joint(&cfg, &train, &val, &[], None).unwrap();
    let ck = &out.checkpoint;
    let head: Vec<AnnotationRecord> = val.records[..23].to_vec();
    let longer: Vec<AnnotationRecord> = val.records[..24].to_vec();
    let (a, b) = (DatasetSplit::new(head), DatasetSplit::new(longer));
    let pa = predict(&ck.model, &ck.config, &a, &None).unwrap();
    let pb = predict(&ck.model, &ck.config, &b, &None).unwrap();
    assert_eq!(pa.records.len(), 23);
    assert_eq!(pb.records.len(), 24);
    let (va, vb) = (pa.va.unwrap(), pb.va.unwrap());
    for (i, &r) in pa.records.iter().enumerate() {
        let j = pb.records.iter().position(|&q| q == r).unwrap();
        assert_eq!(va[i], vb[j]);
    }
    let report = evaluate(ck, &a, &[]).unwrap();
    let valid = a.records.iter().filter(|r| r.is_valid_for(TaskKind::Valence)).count();
    assert_eq!(report.valence_counts.evaluated, valid);
}

#[test]
fn configuration_errors() {
    let (train, val) = small();
    let empty = DatasetSplit::new(Vec::new());
    assert!(matches!(train_single(TaskKind::Au, &quick(), &empty, &val), Err(Error::Config(_))));

    let v = train_single(TaskKind::Valence, &quick(), &train, &val).unwrap();
    let jcfg = TrainConfig {
        tasks: vec![TaskKind::Valence],
        fusion_sources: vec![TaskKind::Expr],
        ..quick()
    };
    assert!(matches!(train_joint(&jcfg, &train, &val, &[], Some(&v.checkpoint)), Err(Error::Config(_))));

    let a = train_single(TaskKind::Arousal, &quick(), &train, &val).unwrap();
    let jcfg = TrainConfig { fusion_sources: vec![], ..jcfg };
    assert!(matches!(train_joint(&jcfg, &train, &val, &[], Some(&a.checkpoint)), Err(Error::Config(_))));
    assert!(matches!(train_joint(&jcfg, &train, &val, &[], None), Err(Error::Config(_))));
}
