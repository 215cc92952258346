use adnn::config::{Config, TablePreset};
use adnn::detector::{detect, detect_batch, detect_variant, train_anet, train_variant, Variant};
use adnn::io::{self, ModelBundle};
use adnn::problem::sample_pairs;
use adnn::seed::{self, stream};
use nalgebra::DMatrix;

fn quick(preset: TablePreset) -> Config {
    let mut c = Config::default().with_preset(preset);
    c.train.epochs = 200;
    c
}

#[test]
fn files_preserve_every_decision() {
    let dir = tempfile::tempdir().unwrap();
    for preset in [TablePreset::Gaussian, TablePreset::StudentT] {
        let cfg = quick(preset);
        let p = cfg.instance(3).unwrap();
        let d = sample_pairs(&p, 30, seed::derive(cfg.seed, stream::TRAIN_DATA, 3)).unwrap();
        let data = dir.path().join("d.jsonl");
        io::write_dataset(&data, &p, &d).unwrap();
        let (p2, d2) = io::read_dataset(&data).unwrap();
        assert_eq!((&p, &d), (&p2, &d2));

        let tcfg = cfg.train_config(seed::derive(cfg.seed, stream::TRAINING, 0));
        let specs = cfg.layer_specs();
        let anet = train_anet(&p2, &d2, &tcfg, &specs).unwrap();
        let c = train_variant(Variant::C, &p2, &d2, &tcfg, &specs, None).unwrap();
        let bundle = ModelBundle {
            anet,
            variants: vec![c],
        };
        let model = dir.path().join("m.json");
        io::write_model(&model, &bundle).unwrap();
        let back = io::read_model(&model).unwrap();
        let again = dir.path().join("m2.json");
        io::write_model(&again, &back).unwrap();
        assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(&again).unwrap());

        let test = sample_pairs(&p, 200, 99).unwrap();
        let cb = back.variant(Variant::C).unwrap();
        for s in &test.samples {
            assert_eq!(detect(&bundle.anet, &s.y).unwrap(), detect(&back.anet, &s.y).unwrap());
            assert_eq!(
                detect_variant(&bundle.variants[0], &s.y).unwrap(),
                detect_variant(cb, &s.y).unwrap()
            );
        }
        let ys = DMatrix::from_columns(&test.samples.iter().map(|s| s.y.clone()).collect::<Vec<_>>());
        let batch = detect_batch(&back.anet, &ys);
        for (s, b) in test.samples.iter().zip(&batch) {
            assert_eq!(&detect(&back.anet, &s.y).unwrap(), b);
        }
    }
}

#[test]
fn corrupt_files_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"format\": \"adnn-model\"").unwrap();
    let e = io::read_model(&path).unwrap_err();
    assert_eq!(e.category(), adnn::ErrorCategory::Data);
    assert!(e.to_string().contains("bad.json"));
    let e = io::read_dataset(&dir.path().join("missing.jsonl")).unwrap_err();
    assert_eq!(e.category(), adnn::ErrorCategory::Data);
    let obs = dir.path().join("y.csv");
    std::fs::write(&obs, "1,2,3\n4,5\n").unwrap();
    let e = io::read_observations(&obs, 3).unwrap_err();
    assert!(e.to_string().contains("row 2"));
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    let mut cfg = Config::default().with_preset(TablePreset::StudentT);
    cfg.seed = 42;
    cfg.experiment.k_values = vec![5, 50];
    std::fs::write(&path, cfg.to_toml_string()).unwrap();
    let back = Config::from_file(&path).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.instance(0).unwrap(), cfg.instance(0).unwrap());
}
