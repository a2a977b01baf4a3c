use std::fs;

use svcca_core::analysis::{self, CompareOptions};
use svcca_core::convdft;
use svcca_core::fixtures::gaussian;
use svcca_core::report::{self, Format};
use svcca_core::tensorio::{self, ActivationDump, Payload, Shape};
use svcca_core::toynet::{self, LayerActs, NetSpec, TrainConfig};
use svcca_core::Error;

#[test]
fn dumps_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let dense = ActivationDump::dense("fc1", Some(40), &gaussian(6, 11, 1));
    let fx = convdft::translation_fixture(4, 2, 2, true, 3).unwrap();
    let conv = ActivationDump::conv("conv2", None, &fx.layer2);
    for (file, dump) in [("dense.dump", &dense), ("conv.dump", &conv)] {
        let path = dir.path().join(file);
        tensorio::write_dump(dump, &path).unwrap();
        let back = tensorio::read_dump(&path).unwrap();
        assert_eq!(&back, dump);
        let header = tensorio::read_header(&path).unwrap();
        assert_eq!(header.shape, dump.shape);
    }
    assert_eq!(
        tensorio::read_dump(dir.path().join("conv.dump")).unwrap().to_conv().unwrap(),
        fx.layer2
    );
}

#[test]
fn f32_payload_widens_on_load() {
    let dump = ActivationDump {
        layer_name: "h".into(),
        step: Some(7),
        shape: Shape::Dense { neurons: 2, datapoints: 3 },
        payload: Payload::F32(vec![0.5, -1.25, 2.0, 0.0, 3.5, -4.0]),
    };
    let m = dump.to_activation_matrix().unwrap();
    assert_eq!(m.values()[(0, 1)], -1.25);
    assert_eq!(m.values()[(1, 2)], -4.0);
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.dump");
    let dump = ActivationDump::dense("fc", None, &gaussian(3, 4, 2));
    tensorio::write_dump(&dump, &path).unwrap();
    let mut bytes = fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 8);
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(tensorio::read_dump(&path), Err(Error::TruncatedPayload { .. })));
    assert!(matches!(tensorio::read_dump(dir.path().join("missing.dump")), Err(Error::Io { .. })));
}

fn tiny_run() -> toynet::TrainRun {
    let task = toynet::toy_regression_task(0);
    let config = TrainConfig {
        steps: 40,
        batch_size: 8,
        learning_rate: 0.05,
        checkpoint_every: 20,
        shuffle_seed: 1,
    };
    toynet::train(&NetSpec::mlp(1, 12, 2, 4, 3), &task, &config, None).unwrap()
}

#[test]
fn checkpoints_round_trip_through_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run();
    let written = run.checkpoints.write(dir.path()).unwrap();
    let loaded = tensorio::load_manifest(dir.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.manifest, written);
    assert_eq!(loaded.manifest.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![0, 20, 40]);
    let opts = CompareOptions::default();
    for (cp, rec) in loaded.manifest.checkpoints.iter().zip(&run.checkpoints.checkpoints) {
        for (entry, layer) in cp.layers.iter().zip(&rec.layers) {
            let dump = loaded.read_layer(entry).unwrap();
            assert_eq!(dump.step, Some(cp.step));
            let acts = LayerActs::from_dump(&dump).unwrap();
            assert_eq!(acts, layer.acts);
            let a = analysis::compare_layers(&acts, &layer.acts, true, &opts).unwrap();
            assert!((a.mean_similarity - 1.0).abs() < 1e-8);
        }
    }
}

#[test]
fn manifests_with_bad_references_fail_to_load() {
    let dir = tempfile::tempdir().unwrap();
    let run = tiny_run();
    let mut manifest = run.checkpoints.write(dir.path()).unwrap();
    let path = dir.path().join("manifest.json");

    manifest.datapoint_count += 1;
    tensorio::save_manifest(&manifest, &path).unwrap();
    assert!(matches!(tensorio::load_manifest(&path), Err(Error::DatapointMismatch { .. })));

    manifest.datapoint_count -= 1;
    manifest.checkpoints[0].layers[0].path = "nowhere.dump".into();
    tensorio::save_manifest(&manifest, &path).unwrap();
    assert!(matches!(tensorio::load_manifest(&path), Err(Error::Manifest(_))));

    fs::write(&path, "{\"model_id\": \"m\"}").unwrap();
    assert!(matches!(tensorio::load_manifest(&path), Err(Error::Manifest(_))));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let run = tiny_run();
    let layers = &run.checkpoints.last().layers;
    let render = || {
        let dir = tempfile::tempdir().unwrap();
        let grid = analysis::similarity_grid(layers, layers, true, &CompareOptions::default()).unwrap();
        let files = report::emit_report(dir.path(), "grid", &grid, &[Format::Csv, Format::Json, Format::Svg]).unwrap();
        files.iter().map(|f| fs::read(f).unwrap()).collect::<Vec<_>>()
    };
    let (a, b) = (render(), render());
    assert_eq!(a.len(), 3);
    assert_eq!(a, b);
}
