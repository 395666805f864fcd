mod common;

use culb::container::{checkpoint_container, decode_checkpoint, read_checkpoint, read_world, write_checkpoint, write_world, Container, FORMAT_VERSION};
use culb::io::write_atomic;
use culb_core::model::Block;
use culb_core::world::Classifiers;
use culb_core::Tensor;
use proptest::prelude::*;

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let e = common::prepared(dir.path(), common::tiny_config());
    let (mut ck, gate) = read_checkpoint(&e.base_path()).unwrap();
    let specials = [-0.0, f64::MIN_POSITIVE / 3.0, 1e308, -1e-308, 0.1 + 0.2, f64::EPSILON];
    for (v, s) in ck.params.block_mut(Block::WK).data_mut().iter_mut().zip(specials) {
        *v = s;
    }
    let path = dir.path().join("x.culb");
    write_checkpoint(&path, &ck, gate.as_ref()).unwrap();
    let (back, gate_back) = read_checkpoint(&path).unwrap();
    assert_eq!(gate_back, gate);
    assert_eq!(back.lineage, ck.lineage);
    assert_eq!(back.world_hash, ck.world_hash);
    assert_eq!(back.schedule, ck.schedule);
    for b in Block::ALL {
        assert_eq!(bits(back.params.block(b)), bits(ck.params.block(b)), "{}", b.name());
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(Container::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
}

#[test]
fn world_round_trip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let e = common::prepared(dir.path(), common::tiny_config());
    let (w, c) = read_world(&e.world_path()).unwrap();
    let p = dir.path().join("w2.culb");
    write_world(&p, &w, &c).unwrap();
    let (w2, c2): (_, Classifiers) = read_world(&p).unwrap();
    assert_eq!(w2, w);
    assert_eq!(c2, c);
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(e.world_path()).unwrap());
}

#[test]
fn malformed_containers_are_rejected() {
    let mut c = Container::new("checkpoint", serde_json::json!({}));
    c.push("a", Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap());
    c.push("b", Tensor::vector(&[4.0, 5.0]).unwrap());
    let good = c.to_bytes().unwrap();
    assert_eq!(Container::from_bytes(&good).unwrap(), c);

    let mut v = good.clone();
    v[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let err = Container::from_bytes(&v).unwrap_err().to_string();
    assert!(err.contains("version"), "{err}");

    let mut m = good.clone();
    m[0] = b'X';
    assert!(Container::from_bytes(&m).is_err());

    let mut long = good.clone();
    long[8..16].copy_from_slice(&(u64::MAX).to_le_bytes());
    assert!(Container::from_bytes(&long).is_err());

    let mut trailing = good.clone();
    trailing.extend_from_slice(&1.0f64.to_le_bytes());
    assert!(Container::from_bytes(&trailing).is_err());

    let mut ragged = good.clone();
    ragged.push(0);
    assert!(Container::from_bytes(&ragged).is_err());

    assert!(Container::from_bytes(&good[..good.len() - 8]).is_err());
    assert!(Container::from_bytes(&good[..10]).is_err());

    let text = String::from_utf8_lossy(&good).replace("chacha8", "pcg0000");
    assert!(Container::from_bytes(text.as_bytes()).is_err());
}

#[test]
fn checkpoint_decoding_checks_shapes_and_kind() {
    let dir = tempfile::tempdir().unwrap();
    let e = common::prepared(dir.path(), common::tiny_config());
    let (ck, _) = read_checkpoint(&e.base_path()).unwrap();
    let mut c = checkpoint_container(&ck, None).unwrap();
    c.tensors.retain(|(n, _)| n != "W_K");
    assert!(decode_checkpoint(c).is_err());
    let mut c = checkpoint_container(&ck, None).unwrap();
    c.kind = "world".into();
    assert!(decode_checkpoint(c).is_err());
    assert!(read_checkpoint(&e.world_path()).is_err());
}

#[test]
fn tampered_world_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let e = common::prepared(dir.path(), common::tiny_config());
    let mut c = Container::read(&e.world_path()).unwrap();
    let (_, t) = c.tensors.iter_mut().find(|(n, _)| n.starts_with("embedding/")).unwrap();
    t.data_mut()[0] += 1e-12;
    assert!(culb::container::decode_world(c).is_err());
}

#[test]
fn atomic_write_replaces_and_leaves_no_temporaries() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sub").join("f.txt");
    write_atomic(&p, b"first").unwrap();
    write_atomic(&p, b"second").unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), b"second");
    let names: Vec<_> = std::fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from("f.txt")]);
}

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(any::<u64>().prop_map(f64::from_bits).prop_filter("finite", |v| v.is_finite()), n)
            .prop_map(move |data| Tensor::from_vec(&shape, data).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn arbitrary_tensors_round_trip(tensors in prop::collection::vec(tensor_strategy(), 0..6), tag in "[a-z]{1,8}") {
        let mut c = Container::new(&tag, serde_json::json!({ "tag": tag }));
        for (i, t) in tensors.iter().enumerate() {
            c.push(format!("t{i}"), t.clone());
        }
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.tensors.len(), tensors.len());
        for ((_, a), b) in back.tensors.iter().zip(&tensors) {
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert_eq!(bits(a), bits(b));
        }
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}
