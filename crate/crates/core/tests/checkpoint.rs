use mpda_core::checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
use mpda_core::error::{Error, FormatError};
use mpda_core::nn::ParamStore;
use mpda_core::{Precision, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store() -> ParamStore<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut s = ParamStore::new();
    s.add("a.weight", Tensor::randn(&[3, 4], 1.0, &mut r));
    s.add("a.bias", Tensor::randn(&[4], 1.0, &mut r));
    s.add("scalar", Tensor::scalar(0.25));
    s
}

#[test]
fn f64_round_trip_is_bit_exact() {
    let s = store();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    write_checkpoint(&s, "seed = 3\n", &path).unwrap();
    let ck = read_checkpoint(&path).unwrap();
    assert_eq!(ck.precision, Precision::F64);
    assert_eq!(ck.meta, "seed = 3\n");
    let mut back = store();
    for id in back.ids().collect::<Vec<_>>() {
        let shape = back.get(id).shape().to_vec();
        back.set(id, Tensor::zeros(&shape)).unwrap();
    }
    ck.load_into(&mut back).unwrap();
    for ((_, _, a), (_, _, b)) in s.iter().zip(back.iter()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn f32_stores_round_trip() {
    let s = store().cast::<f32>();
    let ck = decode_checkpoint(&encode_checkpoint(&s, "")).unwrap();
    assert_eq!(ck.precision, Precision::F32);
    let mut back = s.clone();
    ck.load_into(&mut back).unwrap();
    assert_eq!(back.get(back.id("a.bias").unwrap()), s.get(s.id("a.bias").unwrap()));
}

#[test]
fn golden_bytes() {
    let mut s = ParamStore::<f32>::new();
    s.add("w", Tensor::from_vec(&[1], vec![1.0f32]).unwrap());
    let mut want = b"MPDC".to_vec();
    want.extend_from_slice(&[1, 0]);
    want.extend_from_slice(&[2, 0, 0, 0, b'h', b'i']);
    want.extend_from_slice(&[1, 0, 0, 0]);
    want.extend_from_slice(&[1, 0, b'w', 1, 1, 0, 0, 0]);
    want.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]);
    assert_eq!(encode_checkpoint(&s, "hi"), want);
}

#[test]
fn rejects_damaged_files() {
    let bytes = encode_checkpoint(&store(), "m");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(FormatError::BadMagic { .. }))));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(FormatError::VersionMismatch { .. }))));
    assert!(matches!(decode_checkpoint(&bytes[..bytes.len() - 1]), Err(Error::Format(FormatError::Truncated { .. }))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_checkpoint(&long).is_err());
}

#[test]
fn missing_or_misshapen_sections_fail_to_load() {
    let ck = decode_checkpoint(&encode_checkpoint(&store(), "")).unwrap();
    let mut extra = store();
    extra.add("new", Tensor::zeros(&[2]));
    assert!(ck.load_into(&mut extra).is_err());
    let mut other = ParamStore::<f64>::new();
    other.add("a.bias", Tensor::zeros(&[5]));
    assert!(ck.load_into(&mut other).is_err());
}
