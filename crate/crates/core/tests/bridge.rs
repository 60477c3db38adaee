use manipdet::bridge::{finetune, Bridge};
use manipdet::data::{generate_dataset, GeneratorConfig};
use manipdet::model::{Model, ModelConfig};
use manipdet::tensor::{ParamId, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(seed: u64) -> (Model, Bridge, ParamStore) {
    let (m, mut ps) = Model::new(&ModelConfig::default(), seed).unwrap();
    let b = Bridge::new(&mut ps, 32, 24, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    (m, b, ps)
}

fn snapshot(ps: &ParamStore) -> Vec<(ParamId, Vec<f64>, bool)> {
    ps.ids()
        .map(|id| (id, ps.value(id).data().to_vec(), ps.is_trainable(id)))
        .collect()
}

#[test]
fn finetuning_moves_only_the_projection() {
    let (m, b, mut ps) = setup(1);
    let ds = generate_dataset(&GeneratorConfig::with_total(1, "ft", 48)).unwrap();
    let before = snapshot(&ps);
    finetune(&m, &b, &mut ps, &ds, 2, 1e-2).unwrap();
    let proj = b.proj.params();
    for (id, v, trainable) in before {
        assert_eq!(ps.is_trainable(id), trainable, "{}", ps.name(id));
        let moved = ps.value(id).data() != v.as_slice();
        assert_eq!(moved, proj.contains(&id), "{}", ps.name(id));
    }
}

#[test]
fn finetuning_lowers_the_instruction_loss() {
    let ds = generate_dataset(&GeneratorConfig::with_total(2, "ft", 64)).unwrap();
    let (m, b, mut ps) = setup(2);
    let first = finetune(&m, &b, &mut ps, &ds, 1, 1e-2).unwrap();
    let later = finetune(&m, &b, &mut ps, &ds, 5, 1e-2).unwrap();
    assert!(later < first, "{first} -> {later}");
}

#[test]
fn saved_bridge_restores_into_a_fresh_store() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bridge.ckpt");
    let (m, b, mut ps) = setup(3);
    let ds = generate_dataset(&GeneratorConfig::with_total(3, "ft", 32)).unwrap();
    finetune(&m, &b, &mut ps, &ds, 1, 1e-2).unwrap();
    b.save(&ps, &path).unwrap();

    let (_, b2, mut ps2) = setup(4);
    b2.load(&mut ps2, &path).unwrap();
    let ids = |br: &Bridge| [br.proj.params(), br.readout.params()].concat();
    for (x, y) in ids(&b).into_iter().zip(ids(&b2)) {
        assert_eq!(ps.value(x), ps2.value(y));
    }

    // a bridge of another width rejects the file
    let (_, mut ps3) = Model::new(&ModelConfig::default(), 5).unwrap();
    let narrow = Bridge::new(&mut ps3, 32, 16, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(narrow.load(&mut ps3, &path).unwrap_err().code(), 306);
}
