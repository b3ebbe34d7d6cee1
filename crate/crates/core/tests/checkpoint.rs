//! Checkpoint round trips over random trees.

mod common;

use fedadapt::checkpoint::Checkpoint;
use fedadapt::model::{AdapterSpec, AdapterVariant, Model, ModelConfig};
use fedadapt::optim::Adam;
use fedadapt::tree::{FreezePolicy, ParamMap};
use proptest::prelude::*;

fn variant() -> impl Strategy<Value = Option<AdapterVariant>> {
    prop_oneof![Just(None), (0usize..5).prop_map(|i| Some(AdapterVariant::ALL[i]))]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encode_decode_is_bit_exact(
        layers in 1usize..3,
        v in variant(),
        seed in any::<u64>(),
        adam_steps in 0usize..3,
        nudge in -1e3f64..1e3,
    ) {
        let cfg = ModelConfig { layers, model_dim: 8, ..ModelConfig::desk() };
        let spec = v.map(|v| AdapterSpec::new(v, 3));
        let (model, mut tree) = Model::build(cfg, spec, seed).unwrap();
        tree.set_freeze(if spec.is_some() { FreezePolicy::FreezeAllButAdapters } else { FreezePolicy::FreezeEncoderBase }).unwrap();
        tree.tensor_mut("decoder/b").unwrap().data_mut()[0] = nudge;
        let mut adam = Adam::new(1e-3, &tree);
        for _ in 0..adam_steps {
            let grads: ParamMap = tree.trainable_values().into_iter().map(|(p, t)| (p, t.map(|x| x.sin()))).collect();
            adam.step(&mut tree, &grads).unwrap();
        }
        let ck = Checkpoint { model, tree, adam: (adam_steps > 0).then_some(adam) };
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.tree.digest(), ck.tree.digest());
        prop_assert_eq!(back.encode().unwrap(), bytes);
        prop_assert_eq!(&back, &ck);
    }
}

#[test]
fn save_and_load_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (model, tree) = Model::build(common::tiny_config(), None, 1).unwrap();
    let ck = Checkpoint::new(model, tree);
    let path = dir.path().join("nested/dir/model.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn truncated_files_never_decode() {
    let (model, tree) = Model::build(ModelConfig { layers: 1, model_dim: 8, ..ModelConfig::desk() }, None, 1).unwrap();
    let bytes = Checkpoint::new(model, tree).encode().unwrap();
    for cut in (0..bytes.len()).step_by(97) {
        assert!(Checkpoint::decode(&bytes[..cut]).is_err());
    }
}
