use std::fs;

use augfpn::harness::stats::emit_stats;
use augfpn::harness::synth::{stream_seed, PARAM_STREAM};
use augfpn::harness::train::{train_toy, CHECKPOINT_DIR, CONFIG_FILE, LOSS_CSV, RATIO_CSV, ROI_FILE};
use augfpn::harness::RunConfig;
use augfpn::roi::RoiFusionMode;
use augfpn::supervision::LossBreakdown;
use augfpn::{Error, ParamStore};

fn small() -> RunConfig {
    RunConfig {
        seed: 5,
        scenes: 6,
        batch_size: 2,
        steps: 12,
        ..RunConfig::default()
    }
}

#[test]
fn train_toy_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let report = train_toy::<f32>(&cfg, Some(dir.path())).unwrap();
    assert_eq!(report.losses.len(), cfg.steps);

    let csv = fs::read_to_string(dir.path().join(LOSS_CSV)).unwrap();
    let lines: Vec<_> = csv.split("\r\n").filter(|l| !l.is_empty()).collect();
    assert_eq!(lines[0], LossBreakdown::CSV_HEADER);
    assert_eq!(lines.len(), cfg.steps + 1);
    for (step, line) in lines[1..].iter().enumerate() {
        let fields: Vec<_> = line.split(',').collect();
        assert_eq!(fields.len(), 6);
        assert_eq!(fields[0].parse::<usize>().unwrap(), step);
        let values: Vec<f64> = fields[1..].iter().map(|f| f.parse().unwrap()).collect();
        let l = &report.losses[step];
        let composed = l.lambda * (values[0] + l.beta * values[1]) + values[2] + l.beta * values[3];
        assert!((composed - values[4]).abs() <= 1e-6 * values[4].abs().max(1.0));
    }

    let saved = RunConfig::load(dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(saved, cfg);
    assert!(fs::read_to_string(dir.path().join(RATIO_CSV)).unwrap().starts_with("assigned,P2,P3,P4,P5,count"));
    let checkpoint = ParamStore::<f32>::load(dir.path().join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(checkpoint.len(), report.params.len());
    for (name, t) in report.params.iter() {
        assert_eq!(checkpoint.get(name).unwrap().data(), t.data(), "{name}");
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let cfg = small();
    let a = train_toy::<f32>(&cfg, None).unwrap();
    let b = train_toy::<f32>(&cfg, None).unwrap();
    let totals = |r: &[LossBreakdown]| r.iter().map(|l| l.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(totals(&a.losses), totals(&b.losses));

    let c = train_toy::<f32>(&RunConfig { seed: 6, ..cfg }, None).unwrap();
    assert_ne!(totals(&a.losses), totals(&c.losses));
}

#[test]
fn double_precision_training_tracks_single() {
    let cfg = RunConfig { steps: 3, ..small() };
    let single = train_toy::<f32>(&cfg, None).unwrap();
    let double = train_toy::<f64>(&cfg, None).unwrap();
    let (a, b) = (single.initial_total(), double.initial_total());
    assert!((a - b).abs() < 1e-4 * b, "{a} vs {b}");
}

#[test]
fn stats_of_a_checkpoint_match_the_training_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let report = train_toy::<f64>(&RunConfig { precision: 64, ..cfg.clone() }, Some(dir.path())).unwrap();
    let cfg = RunConfig { precision: 64, ..cfg };
    let from_disk = emit_stats(&cfg, &dir.path().join(CHECKPOINT_DIR), &dir.path().join(ROI_FILE)).unwrap();
    let trained = report.ratio.unwrap();
    assert_eq!(from_disk.counts, trained.counts);
    for (a, b) in from_disk.present_rows().zip(trained.present_rows()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zeroed_selection_weights_give_uniform_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let mut store: ParamStore<f64> = cfg.model().unwrap().init_params(stream_seed(cfg.seed, PARAM_STREAM));
    store.zero_prefix("srs.asf.");
    let checkpoint = dir.path().join("zeroed");
    store.save(&checkpoint).unwrap();
    let rois = dir.path().join("rois.txt");
    fs::write(&rois, "0 2 2 10 10\n0 0 0 60 60\n1 10 12 40 30\n").unwrap();

    let m = emit_stats(&cfg, &checkpoint, &rois).unwrap();
    assert_eq!(m.counts.iter().sum::<usize>(), 3);
    for row in m.present_rows() {
        for &v in row {
            assert!((v - 0.25).abs() < 1e-12, "{row:?}");
        }
    }
}

#[test]
fn stats_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    let rois = dir.path().join("rois.txt");
    fs::write(&rois, "0 2 2 10 10\n").unwrap();
    let missing = dir.path().join("nope");
    assert!(matches!(emit_stats(&cfg, &missing, &rois), Err(Error::Usage(_))));

    let store: ParamStore<f64> = cfg.model().unwrap().init_params(1);
    let checkpoint = dir.path().join("ckpt");
    store.save(&checkpoint).unwrap();
    let heuristic = RunConfig {
        srs_mode: RoiFusionMode::HeuristicSingleLevel,
        ..cfg.clone()
    };
    assert!(matches!(emit_stats(&heuristic, &checkpoint, &rois), Err(Error::Usage(_))));

    fs::write(&rois, "99 2 2 10 10\n").unwrap();
    assert!(matches!(emit_stats(&cfg, &checkpoint, &rois), Err(Error::Usage(_))));
}

#[test]
fn invalid_config_is_rejected_before_training() {
    let cfg = RunConfig {
        batch_size: 10,
        scenes: 4,
        ..RunConfig::default()
    };
    assert!(matches!(train_toy::<f32>(&cfg, None), Err(Error::Config(_))));
}
