use std::collections::BTreeMap;

use hmmen::checkpoint::{config_digest, decode_npy, encode_npy, load_checkpoint, save_checkpoint, CheckpointMeta};
use hmmen::encoder::EncoderConfig;
use hmmen::network::{ModelVariant, Network};
use hmmen::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> EncoderConfig {
    EncoderConfig {
        stage_channels: [2, 3, 3, 4, 4],
        expansion_factor: 2,
    }
}

fn meta(variant: ModelVariant) -> CheckpointMeta {
    CheckpointMeta {
        variant,
        epoch: 7,
        learning_rate: 2.5e-5,
        seed: 42,
        config_digest: config_digest("train.epochs = 7\n"),
        metric_snapshot: BTreeMap::from([("val_iou".to_string(), 0.625), ("train_loss".to_string(), 0.1)]),
        encoder: tiny(),
    }
}

#[test]
fn round_trip_preserves_every_bit() {
    let dir = tempfile::tempdir().unwrap();
    for variant in ModelVariant::ALL {
        let net = Network::new(variant, &tiny()).unwrap();
        let mut store = net.init_params::<f32>(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (_, p) in store.iter_mut() {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-1.0e3..1.0e3);
            }
        }
        let path = dir.path().join(format!("{variant}.ckpt"));
        save_checkpoint(&path, &meta(variant), &store).unwrap();
        let (m, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(m, meta(variant));
        net.check_params(&loaded).unwrap();
        for ((a, pa), (b, pb)) in store.iter().zip(loaded.iter()) {
            assert_eq!(a, b);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(pa.value.shape(), pb.value.shape());
            assert_eq!(bits(&pa.value), bits(&pb.value), "{a}");
        }
        assert!(!path.with_extension("partial").exists());
    }
}

#[test]
fn saves_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let net = Network::new(ModelVariant::Hmmen, &tiny()).unwrap();
    let store = net.init_params::<f32>(5).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("sub/b.ckpt"));
    save_checkpoint(&a, &meta(ModelVariant::Hmmen), &store).unwrap();
    save_checkpoint(&b, &meta(ModelVariant::Hmmen), &store).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    // Overwriting in place is fine too.
    save_checkpoint(&a, &meta(ModelVariant::Hmmen), &store).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn npy_encoding_round_trips_special_values() {
    let t = Tensor::from_vec([1, 2, 1, 3], vec![0.0, -0.0, 1.5, f32::MIN_POSITIVE, f32::MAX, -7.25]).unwrap();
    let bytes = encode_npy(&t);
    assert_eq!(&bytes[..6], b"\x93NUMPY");
    let back = decode_npy(&bytes, "t").unwrap();
    assert_eq!(back.shape(), t.shape());
    assert_eq!(
        back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert!(decode_npy(&bytes[..bytes.len() - 4], "t").is_err());
    assert!(decode_npy(b"not an array", "t").is_err());
}

#[test]
fn unreadable_checkpoints_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = load_checkpoint(&dir.path().join("nope.ckpt")).unwrap_err();
    assert!(matches!(missing, hmmen::Error::Data(_)), "{missing}");
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"definitely not a tar archive").unwrap();
    assert!(load_checkpoint(&junk).is_err());
}

#[test]
fn digest_is_sha256_hex() {
    assert_eq!(config_digest(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    assert_ne!(config_digest("a = 1\n"), config_digest("a = 2\n"));
}
