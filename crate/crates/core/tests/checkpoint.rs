mod common;

use common::{rng, uniform32};
use gated::checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
use gated::{Error, Model, ModelConfig};
use gated_tensor::optim::{Adam, AdamConfig};
use tempfile::tempdir;

fn small(seed: u64) -> Model {
    Model::new(
        &ModelConfig {
            base_width: 8,
            cbam_reduction: 16,
        },
        seed,
    )
    .unwrap()
}

fn bits(m: &Model) -> Vec<(String, Vec<u32>)> {
    m.params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn with_optimizer(model: Model) -> Checkpoint {
    let mut adam = Adam::new(AdamConfig::default(), model.params.len());
    adam.step = 7;
    let mut r = rng(3);
    for id in model.params.trainable().into_iter().take(5) {
        let shape = model.params.tensor(id).shape().to_vec();
        adam.moments[id.0] = Some((uniform32(&mut r, &shape, -1.0, 1.0), uniform32(&mut r, &shape, 0.0, 1.0)));
    }
    let mut ck = Checkpoint::new(model);
    ck.optimizer = Some(adam);
    ck.epoch = 3;
    ck.step = 42;
    ck.best_psnr = Some(21.5);
    ck.config = serde_json::json!({"trainer": {"epochs": 100}});
    ck
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let mut model = small(1);
    // make the BN buffers non-trivial too
    model.forward_train(&uniform32(&mut rng(0), &[2, 3, 32, 32], 0.0, 1.0)).unwrap();
    let ck = with_optimizer(model);
    ck.save(&path).unwrap();
    assert!(!path.with_extension("tmp").exists());
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(bits(&back.model), bits(&ck.model));
    assert_eq!(back.model.config(), ck.model.config());
    assert_eq!((back.epoch, back.step, back.best_psnr), (3, 42, Some(21.5)));
    assert_eq!(back.config, ck.config);
    let (a, b) = (ck.optimizer.unwrap(), back.optimizer.unwrap());
    assert_eq!(b.step, 7);
    for (x, y) in a.moments.iter().zip(&b.moments) {
        match (x, y) {
            (None, None) => {}
            (Some((m1, v1)), Some((m2, v2))) => {
                assert_eq!(m1.data(), m2.data());
                assert_eq!(v1.data(), v2.data());
            }
            _ => panic!("moment presence differs"),
        }
    }
    // writing the loaded checkpoint reproduces the file exactly
    assert_eq!(std::fs::read(&path).unwrap(), with_optimizer(back.model).to_bytes());
}

#[test]
fn restored_models_infer_identically() {
    let model = small(2);
    let ck = Checkpoint::from_bytes(&Checkpoint::new(model.clone()).to_bytes()).unwrap();
    let x = uniform32(&mut rng(5), &[1, 3, 16, 16], 0.0, 1.0);
    let (a, b) = (model.infer(&x).unwrap(), ck.model.infer(&x).unwrap());
    assert_eq!(a.output.data(), b.output.data());
    let mut other = small(9);
    ck.restore_into(&mut other).unwrap();
    assert_eq!(bits(&other), bits(&model));
}

#[test]
fn size_is_stable_for_a_pinned_config() {
    let a = Checkpoint::new(small(1)).to_bytes().len();
    let b = Checkpoint::new(small(2)).to_bytes().len();
    assert_eq!(a, b);
    let values: usize = small(1).params.iter().map(|(_, p)| p.tensor.data().len()).sum();
    assert!(a > 4 * values && a < 4 * values + 64 * 1024);
}

#[test]
fn corruption_is_detected() {
    let bytes = with_optimizer(small(1)).to_bytes();
    for cut in [0, 5, 11, 20, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::ChecksumMismatch(_)), "cut {cut}: {err}");
    }
    for pos in [30, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
        let mut flipped = bytes.clone();
        flipped[pos] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::ChecksumMismatch(_))), "byte {pos}");
    }
    let mut other = bytes.clone();
    other[..8].copy_from_slice(b"PNGPNGPN");
    assert!(matches!(Checkpoint::from_bytes(&other), Err(Error::ChecksumMismatch(_))));
    assert_eq!(&bytes[..8], MAGIC);
}

#[test]
fn version_mismatch_is_typed() {
    let mut bytes = Checkpoint::new(small(1)).to_bytes();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match Checkpoint::from_bytes(&bytes) {
        Err(Error::VersionMismatch { found, expected }) => {
            assert_eq!((found, expected), (FORMAT_VERSION + 1, FORMAT_VERSION));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn architecture_mismatch_names_the_tensors() {
    let ck = Checkpoint::new(small(1));
    let mut wider = Model::new(
        &ModelConfig {
            base_width: 16,
            cbam_reduction: 16,
        },
        0,
    )
    .unwrap();
    let err = ck.restore_into(&mut wider).unwrap_err();
    let Error::ArchitectureMismatch(list) = &err else {
        panic!("{err}");
    };
    assert!(list.iter().any(|m| m.starts_with("refine.stem.0.conv.weight: expected [16, 3, 3, 3], found [8, 3, 3, 3]")), "{list:?}");
    assert!(!list.iter().any(|m| m.starts_with("agcm.")), "the first stage is identical");
    assert!(err.to_string().contains("refine.out.weight"));
    assert_eq!(err.exit_code(), 4);
}
