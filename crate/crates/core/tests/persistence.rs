mod common;

use common::*;
use styleinject::persist::{
    checkpoint_id, config_hash, read_trace, write_trace, Checkpoint, CheckpointMeta, MetricsWriter, RouterRecord, FORMAT_VERSION,
    TRAIN_HEADER,
};
use styleinject::tensor::{SeededRng, Tensor};
use styleinject::Error;

fn sample() -> Checkpoint {
    let mut rng = SeededRng::new(51);
    let mut awkward = random(&mut rng, &[3, 2], 1.0);
    awkward.data_mut()[0] = -0.0;
    awkward.data_mut()[1] = f64::MIN_POSITIVE / 4.0;
    awkward.data_mut()[2] = 1e308;
    Checkpoint {
        step: 1234,
        config_hash: config_hash("mode = \"finetune\"\n"),
        meta: CheckpointMeta {
            kind: "adapters".into(),
            seed: 9,
            loss: Some(0.125),
            config: "mode = \"finetune\"\n".into(),
        },
        tensors: vec![
            ("adapter/x.a".into(), random(&mut rng, &[4, 5], 1.0)),
            ("adapter/x.b".into(), awkward),
            ("base/scalar".into(), Tensor::scalar(3.25)),
        ],
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn round_trip_is_bit_exact() {
    let c = sample();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.sinj");
    c.save(&path).unwrap();
    let back = Checkpoint::load(&path, Some(&c.config_hash), false).unwrap();
    assert_eq!(back.step, c.step);
    assert_eq!(back.meta, c.meta);
    assert_eq!(back.tensors.len(), c.tensors.len());
    for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        assert_eq!(bits(t1), bits(t2));
    }
    assert_eq!(std::fs::read(&path).unwrap(), c.to_bytes().unwrap());
    assert!(!dir.path().join("c.sinj.tmp").exists());
}

#[test]
fn header_layout() {
    let bytes = sample().to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"SINJ");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1234);
    assert_eq!(&bytes[16..48], &config_hash("mode = \"finetune\"\n"));
}

#[test]
fn every_truncation_is_a_format_error() {
    let bytes = sample().to_bytes().unwrap();
    for len in 0..bytes.len() {
        match Checkpoint::from_bytes(&bytes[..len]) {
            Err(Error::Format(_)) => {}
            other => panic!("prefix of {len} bytes gave {other:?}"),
        }
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(Checkpoint::from_bytes(&longer), Err(Error::Format(_))));
}

#[test]
fn wrong_magic_or_version_rejected() {
    let bytes = sample().to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    let mut newer = bytes;
    newer[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&newer).unwrap_err();
    assert!(err.to_string().contains("version"), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn config_hash_mismatch_needs_force() {
    let c = sample();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.sinj");
    c.save(&path).unwrap();
    let other = config_hash("mode = \"distill\"\n");
    let err = Checkpoint::load(&path, Some(&other), false).unwrap_err();
    assert!(matches!(err, Error::Format(_)));
    assert!(err.to_string().contains("--force"));
    let forced = Checkpoint::load(&path, Some(&other), true).unwrap();
    assert_eq!(forced.tensors.len(), 3);
}

#[test]
fn group_strips_prefix() {
    let c = sample();
    let g: Vec<String> = c.group("adapter/").into_iter().map(|(n, _)| n).collect();
    assert_eq!(g, vec!["x.a", "x.b"]);
}

#[test]
fn metrics_rows_are_flushed_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let mut w = MetricsWriter::create(&path, TRAIN_HEADER).unwrap();
    w.row(&["1".into(), "0.5".into(), "0.001".into(), checkpoint_id(1)]).unwrap();
    // Still open, but already on disk.
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "step,loss,lr,checkpoint_id\n1,0.5,0.001,ckpt-000001\n");
    assert!(w.row(&["2".into()]).is_err());
}

#[test]
fn trace_round_trip_and_validation() {
    let good = RouterRecord {
        step: 0,
        layer: "blocks.0.to_q".into(),
        t: 999,
        instance: 1,
        s: vec![0.25, 0.75],
    };
    assert!(good.validate().is_ok());
    assert!(RouterRecord { s: vec![1.0], ..good.clone() }.validate().is_ok());
    assert!(RouterRecord { s: vec![0.3, 0.6], ..good.clone() }.validate().is_err());
    assert!(RouterRecord { s: vec![1.0, 0.0], ..good.clone() }.validate().is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    write_trace(&path, &[good.clone(), good.clone()]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(read_trace(&path).unwrap(), vec![good.clone(), good]);
}
