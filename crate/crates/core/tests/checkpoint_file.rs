use ddt_core::checkpoint::read_header;
use ddt_core::{Checkpoint, DType, Error, Model, NetworkConfig, Tensor};

fn toy_checkpoint() -> Checkpoint<f32> {
    let model = Model::<f32>::build(&NetworkConfig::toy(), 4).unwrap();
    Checkpoint {
        config: model.config().clone(),
        params: model.params.clone(),
        optimizer: None,
        iteration: 12,
        seed: 4,
    }
}

#[test]
fn saved_checkpoint_restores_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ddt");
    let mut ck = toy_checkpoint();
    // make the output non-trivial so the comparison means something
    for (_, t) in ck.params.iter_mut() {
        *t = t.map(|v| v + 0.01);
    }
    ck.save(&path).unwrap();

    let header = read_header(&path).unwrap();
    assert_eq!(header.dtype, DType::F32);

    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(loaded.iteration, 12);
    let mut a = Model::<f32>::build(&ck.config, 0).unwrap();
    a.load_params(&ck.params).unwrap();
    let mut b = Model::<f32>::build(&loaded.config, 0).unwrap();
    b.load_params(&loaded.params).unwrap();
    let x = Tensor::<f32>::from_fn(&[1, 3, 32, 32], |i| (i % 17) as f32 / 17.0);
    assert_eq!(a.infer(&x).unwrap(), b.infer(&x).unwrap());
}

#[test]
fn loading_into_a_different_architecture_fails() {
    let ck = toy_checkpoint();
    let wider = NetworkConfig {
        base_channels: 16,
        ..NetworkConfig::toy()
    };
    let mut model = Model::<f32>::build(&wider, 0).unwrap();
    let err = model.load_params(&ck.params).unwrap_err();
    assert!(matches!(err, Error::CheckpointShape { .. }), "{err}");
}

#[test]
fn wrong_dtype_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ddt");
    toy_checkpoint().save(&path).unwrap();
    let err = Checkpoint::<f64>::load(&path).unwrap_err();
    assert!(matches!(err, Error::CheckpointDType { .. }), "{err}");
}
