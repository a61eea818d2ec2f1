use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;

use dtasr::harness::{
    cmd_eval, cmd_gen_corpus, cmd_probe, cmd_train_asr, cmd_train_diar, eval_asr, evaluate_loss, asr_pairs,
    probe_model, train_asr_model, train_diar_model, ExperimentConfig, Task, TrainOptions,
};
use dtasr::metrics::temporal_step_norms;
use dtasr::model::{Model, ModelConfig};
use dtasr::synth::{read_dataset, Dataset, Generator, ScenarioKind, Split, SplitCounts};
use dtasr::Error;

fn small(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().with_seed(seed);
    cfg.corpus.seed = seed;
    cfg.corpus.asr = SplitCounts {
        train: 50,
        dev: 10,
        test: 10,
    };
    cfg.corpus.mixtures = SplitCounts {
        train: 24,
        dev: 4,
        test: 6,
    };
    cfg.train.epochs = 1;
    cfg
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn no_hook() -> impl FnMut(&Model<f32>, &dtasr::harness::TrainState, &dtasr::harness::EpochReport, bool) -> dtasr::Result<()> {
    |_, _, _, _| Ok(())
}

#[test]
fn gen_corpus_is_deterministic_with_configured_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(3);
    cmd_gen_corpus(&cfg, &tmp.path().join("a"), false).unwrap();
    cmd_gen_corpus(&cfg, &tmp.path().join("b"), false).unwrap();
    assert_eq!(tree(&tmp.path().join("a")), tree(&tmp.path().join("b")));

    for (split, n) in [(Split::Train, 50), (Split::Dev, 10), (Split::Test, 10)] {
        let ds = read_dataset(&tmp.path().join("a/asr").join(split.name())).unwrap();
        assert_eq!(ds.len(), n);
    }
    for kind in ScenarioKind::ALL {
        for (split, n) in [(Split::Train, 24), (Split::Dev, 4), (Split::Test, 6)] {
            let ds = read_dataset(&tmp.path().join("a").join(kind.dir_name()).join(split.name())).unwrap();
            assert_eq!(ds.len(), n, "{kind} {}", split.name());
            assert!(ds.manifest.records.iter().all(|r| r.labels.is_some()));
        }
    }
    let ids = |s: Split| -> BTreeSet<String> {
        read_dataset(&tmp.path().join("a/asr").join(s.name()))
            .unwrap()
            .manifest
            .records
            .into_iter()
            .map(|r| r.id)
            .collect()
    };
    let train = ids(Split::Train);
    assert!(ids(Split::Dev).is_disjoint(&train));
    assert!(ids(Split::Test).is_disjoint(&train));
}

#[test]
fn gen_corpus_refuses_non_empty_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("keep.txt"), "x").unwrap();
    let err = cmd_gen_corpus(&small(0), &out, false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(out.join("keep.txt").exists());
    cmd_gen_corpus(&small(0), &out, true).unwrap();
    assert!(!out.join("keep.txt").exists());
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("f"), "x").unwrap();
    let run = |args: &[&str]| Command::new(env!("CARGO_BIN_EXE_dtasr")).args(args).output().unwrap();
    let o = run(&["gen-corpus", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--force"));
    assert_eq!(run(&["train-asr"]).status.code(), Some(2));
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    let o = run(&["gen-corpus", "--config", bad.to_str().unwrap(), "--out", tmp.path().join("e").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

fn asr_data(cfg: &ExperimentConfig) -> (Dataset, Dataset, Dataset) {
    let g = Generator::new(cfg.corpus.clone()).unwrap();
    (
        g.asr_split(Split::Train).unwrap(),
        g.asr_split(Split::Dev).unwrap(),
        g.asr_split(Split::Test).unwrap(),
    )
}

#[test]
fn one_epoch_reduces_the_training_loss() {
    let mut cfg = small(1);
    cfg.optim.warmup_steps = 4;
    cfg.train.batch_size = 5;
    let (train, _, _) = asr_data(&cfg);
    let pairs = asr_pairs(&train).unwrap();
    let mut untrained = cfg.clone();
    untrained.train.epochs = 0;
    let before = train_asr_model(&untrained, &train, None, None, &mut no_hook()).unwrap().best;
    let run = train_asr_model(&cfg, &train, None, None, &mut no_hook()).unwrap();
    assert_eq!(run.report.epochs.len(), 1);
    assert_eq!(run.report.epochs[0].steps, 10);
    let l0 = evaluate_loss(&before, &cfg, &pairs).unwrap();
    let l1 = evaluate_loss(&run.last, &cfg, &pairs).unwrap();
    assert!(l1.total < l0.total, "{} -> {}", l0.total, l1.total);
}

#[test]
fn baseline_and_disentangled_share_parameter_layout() {
    let d = Model::<f32>::new(ModelConfig::default()).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.mode.baseline = true;
    let b = Model::<f32>::new(cfg.effective_model()).unwrap();
    assert_eq!(b.config.lambda_s, 0.0);
    assert_eq!(d.params.total_count(), b.params.total_count());
    assert_eq!(d.params.trainable_count(), b.params.trainable_count());
    let names = |m: &Model<f32>| m.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect::<Vec<_>>();
    assert_eq!(names(&d), names(&b));
}

#[test]
fn resumed_run_continues_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(2);
    cfg.train.batch_size = 10;
    cmd_gen_corpus(&cfg, &tmp.path().join("data"), false).unwrap();
    let data = tmp.path().join("data/asr");
    cfg.train.epochs = 2;
    let full = cmd_train_asr(&cfg, &data, &tmp.path().join("full"), &TrainOptions::default()).unwrap();

    let mut first = cfg.clone();
    first.train.epochs = 1;
    let part = tmp.path().join("part");
    cmd_train_asr(&first, &data, &part, &TrainOptions::default()).unwrap();
    let resumed = cmd_train_asr(
        &cfg,
        &data,
        &part,
        &TrainOptions {
            force: false,
            resume: Some(part.join("last.dtck")),
        },
    )
    .unwrap();
    assert_eq!(resumed.epochs.len(), 1);
    let (a, b) = (&full.epochs[1], &resumed.epochs[0]);
    assert_eq!(b.epoch, 2);
    assert!((a.first_step_loss - b.first_step_loss).abs() < 1e-6);
    assert!((a.train_loss - b.train_loss).abs() < 1e-6);
    assert_eq!(
        std::fs::read(tmp.path().join("full/last.dtck")).unwrap(),
        std::fs::read(part.join("last.dtck")).unwrap()
    );
}

#[test]
fn non_finite_loss_aborts_with_numeric_exit_code() {
    let mut cfg = small(4);
    cfg.optim.peak_lr = 1e30;
    cfg.optim.warmup_steps = 1;
    cfg.optim.clip_norm = 0.0;
    cfg.train.epochs = 3;
    let (train, _, _) = asr_data(&cfg);
    let err = train_asr_model(&cfg, &train, None, None, &mut no_hook()).map(|_| ()).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("step"));
}

#[test]
fn diarization_training_freezes_everything_but_the_top_layer() {
    let mut cfg = small(5);
    cfg.train.epochs = 2;
    cfg.diar.epochs = 10;
    let g = Generator::new(cfg.corpus.clone()).unwrap();
    let train = g.asr_split(Split::Train).unwrap();
    let asr = train_asr_model(&cfg, &train, None, None, &mut no_hook()).unwrap().best;
    let mix = g.mixture_split(ScenarioKind::ConcatNoSilence, Split::Train).unwrap();
    let run = train_diar_model(&cfg, &asr, &mix, None).unwrap();

    let top = cfg.model.enc_layers;
    let expected: BTreeSet<String> = run
        .model
        .params
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.starts_with(&format!("enc.{top}.")) || n.starts_with("diar."))
        .collect();
    let trainable: BTreeSet<String> = run.model.params.trainable_names().into_iter().map(String::from).collect();
    assert_eq!(trainable, expected);
    assert!(expected.contains("diar.w") && expected.iter().any(|n| n.contains("attn.q4")));

    let mut changed = 0;
    for (name, before) in asr.params.iter() {
        let after = run.model.params.get(run.model.params.find(name).unwrap());
        if expected.contains(name) {
            changed += (after.data() != before.data()) as usize;
        } else {
            let a: Vec<u32> = after.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = before.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b, "frozen tensor {name} moved");
        }
    }
    assert!(changed > 0);
    let d5 = run.report.der_at(5, "train").unwrap();
    let d10 = run.report.der_at(10, "train").unwrap();
    assert!(d10 <= d5, "epoch 5 {d5} vs epoch 10 {d10}");
}

#[test]
fn diarization_needs_a_disentangled_layer() {
    let mut cfg = small(6);
    cfg.model.disentangled = dtasr::model::LayerSelection::Named("none".into());
    let g = Generator::new(cfg.corpus.clone()).unwrap();
    let asr = Model::<f32>::new(cfg.effective_model()).unwrap();
    let mix = g.mixture_split(ScenarioKind::ConcatSilence, Split::Train).unwrap();
    let err = train_diar_model(&cfg, &asr, &mix, None).map(|_| ()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn eval_is_deterministic_and_checks_the_task() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(7);
    cfg.diar.epochs = 1;
    cfg.diar.report_epochs = vec![1];
    let data = tmp.path().join("data");
    cmd_gen_corpus(&cfg, &data, false).unwrap();
    cmd_train_asr(&cfg, &data.join("asr"), &tmp.path().join("asr"), &TrainOptions::default()).unwrap();
    let ckpt = tmp.path().join("asr/best.dtck");
    let (a, b) = (tmp.path().join("e1.json"), tmp.path().join("e2.json"));
    cmd_eval(&ckpt, &data.join("asr/test"), Task::Asr, Some(&a)).unwrap();
    cmd_eval(&ckpt, &data.join("asr/test"), Task::Asr, Some(&b)).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&a).unwrap()).unwrap();
    for k in ["wer", "der", "miss", "fa", "conf", "spk_err_s"] {
        assert!(v["summary"].get(k).is_some(), "summary lacks {k}");
    }

    let err = cmd_eval(&ckpt, &data.join("mix2/test"), Task::Asr, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = cmd_eval(&ckpt, &data.join("mix2/test"), Task::Diar, None).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    cmd_train_diar(&cfg, &ckpt, &data.join("mix2"), &tmp.path().join("diar"), false).unwrap();
    let r = cmd_eval(&tmp.path().join("diar/diar.dtck"), &data.join("mix2/test"), Task::Diar, None).unwrap();
    let v = serde_json::to_value(&r).unwrap();
    for k in ["missed_s", "false_alarm_s", "confusion_s", "total_speech_s", "der"] {
        assert!(v["der"][k].is_number(), "der lacks {k}");
    }
    assert!(v["summary"]["spk_err_s"].is_number());
    assert_eq!(v["summary"]["spk_err_s"], v["der"]["confusion_s"]);
}

#[test]
fn asr_eval_on_empty_split_is_an_error() {
    let cfg = small(8);
    let (_, _, test) = asr_data(&cfg);
    let model = Model::<f32>::new(cfg.effective_model()).unwrap();
    let empty = Dataset {
        manifest: dtasr::synth::DatasetManifest {
            records: Vec::new(),
            ..test.manifest.clone()
        },
        features: Vec::new(),
    };
    let err = eval_asr(&model, &cfg.decode, &empty).unwrap_err();
    assert!(matches!(err, Error::Input(_)), "{err}");
}

#[test]
fn probe_reports_every_pair_and_aliases_the_speaker_track() {
    let cfg = small(9);
    let (_, _, test) = asr_data(&cfg);
    let model = Model::<f32>::new(cfg.effective_model()).unwrap();
    let (recs, proj) = probe_model(&model, &test, &[1, 3, 4], &[2, 4], true).unwrap();
    assert_eq!(recs.len(), 6);
    assert_eq!(proj.len(), 6);
    assert!(recs.iter().all(|r| r.fisher.is_some() && r.n_frames > 0));

    let outs = model.encoder_forward(&test.features.iter().collect::<Vec<_>>()).unwrap();
    let d = model.config.head_dim;
    let (mut sum, mut n) = (0.0, 0);
    for o in &outs {
        let track = o.speaker_tracks()[0];
        let rows: Vec<f64> = track
            .data()
            .chunks(d)
            .zip(&o.valid)
            .filter(|(_, &v)| v)
            .flat_map(|(r, _)| r.iter().map(|&x| x as f64))
            .collect();
        let s = temporal_step_norms(&rows, d).unwrap();
        sum += s.iter().sum::<f64>();
        n += s.len();
    }
    let spk = recs.iter().find(|r| r.layer == 4 && r.head == model.config.speaker_head).unwrap();
    assert_eq!(spk.smoothness, sum / n as f64);
    assert!(probe_model(&model, &test, &[5], &[1], false).is_err());
    assert!(probe_model(&model, &test, &[1], &[0], false).is_err());
}

#[test]
fn probe_marks_single_speaker_separability_null() {
    let mut cfg = small(10);
    cfg.corpus.generator.num_speakers = 1;
    cfg.corpus.scenarios = vec![ScenarioKind::NoiseSingle];
    let (_, _, test) = asr_data(&cfg);
    let model = Model::<f32>::new(cfg.effective_model()).unwrap();
    let (recs, _) = probe_model(&model, &test, &[4], &[1, 2, 3, 4], false).unwrap();
    assert!(recs.iter().all(|r| r.fisher.is_none()));

    let tmp = tempfile::tempdir().unwrap();
    cmd_gen_corpus(&cfg, &tmp.path().join("data"), false).unwrap();
    cmd_train_asr(&cfg, &tmp.path().join("data/asr"), &tmp.path().join("run"), &TrainOptions::default()).unwrap();
    let out = tmp.path().join("probe.jsonl");
    cmd_probe(&tmp.path().join("run/best.dtck"), &tmp.path().join("data/asr/test"), &[4], &[4], &out, None).unwrap();
    let line = std::fs::read_to_string(&out).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert!(v["fisher"].is_null());
    let keys: BTreeSet<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, BTreeSet::from(["layer", "head", "smoothness", "fisher", "n_frames"]));
}

#[test]
fn random_init_has_no_privileged_head() {
    let base = ExperimentConfig::default();
    let g = Generator::new(base.corpus.clone()).unwrap();
    let train = g.asr_split(Split::Train).unwrap();
    let test = g.asr_split(Split::Test).unwrap();
    let layers: Vec<usize> = (1..=4).collect();
    let heads: Vec<usize> = (1..=4).collect();
    for seed in 0..5 {
        let mut cfg = base.clone().with_seed(seed);
        cfg.train.epochs = 0;
        let model = train_asr_model(&cfg, &train, None, None, &mut no_hook()).unwrap().best;
        let (recs, _) = probe_model(&model, &test, &layers, &heads, false).unwrap();
        let mut f: Vec<f64> = recs.iter().map(|r| r.fisher.unwrap()).collect();
        f.sort_by(f64::total_cmp);
        let median = 0.5 * (f[7] + f[8]);
        assert!(f[15] <= 3.0 * median, "seed {seed}: max {} vs median {median}", f[15]);
    }
}
