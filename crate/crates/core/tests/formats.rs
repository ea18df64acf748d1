use ldag_core::error::LdagError;
use ldag_core::image::{Image, Mask};
use ldag_core::netpbm::{decode_mask, decode_pgm, decode_ppm, encode_mask, encode_pgm, encode_ppm, read_mask, write_mask};
use ldag_core::providers::{
    decode_tensor, encode_tensor, load_feature_file, save_feature_file, toy_encode_text, FeatureFile, Metadata,
    TextRole,
};
use ldag_core::tensor::{Source, Tensor};
use proptest::prelude::*;

fn sample_file() -> Vec<u8> {
    let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-30, -7.0]).unwrap();
    encode_tensor(&t, &Metadata::new("sam", Source::Imported)).unwrap()
}

fn format_offset(err: LdagError) -> u64 {
    match err {
        LdagError::Format { offset, .. } => offset,
        other => panic!("expected a format error, got {other}"),
    }
}

proptest! {
    #[test]
    fn tensor_round_trip_is_bit_exact(
        shape in prop::collection::vec(1usize..5, 0..4),
        seed in any::<u64>(),
    ) {
        let len: usize = shape.iter().product();
        let mut rng = ldag_core::rng::SplitMix64::new(seed);
        let data: Vec<f32> = (0..len).map(|_| (rng.next_gaussian() * 1e3) as f32).collect();
        let t = Tensor::new(shape, data).unwrap();
        let mut meta = Metadata::new("raw", Source::Toy);
        meta.class_id = Some(3);
        meta.extra.insert("layer".into(), serde_json::json!("final"));
        let bytes = encode_tensor(&t, &meta).unwrap();
        let (back, back_meta) = decode_tensor(&bytes).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&t));
        prop_assert_eq!(encode_tensor(&back, &back_meta).unwrap(), bytes);
        prop_assert_eq!(back_meta, meta);
    }

    #[test]
    fn mask_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let mut rng = ldag_core::rng::SplitMix64::new(seed);
        let bits = (0..w * h).map(|_| u8::from(rng.next_f64() < 0.5)).collect();
        let m = Mask::new(w, h, bits).unwrap();
        prop_assert_eq!(decode_mask(&encode_mask(&m)).unwrap(), m);
    }

    #[test]
    fn image_round_trip(w in 1usize..16, h in 1usize..16, seed in any::<u64>()) {
        let mut rng = ldag_core::rng::SplitMix64::new(seed);
        let data = (0..w * h * 3).map(|_| (rng.next_u64() & 0xFF) as u8).collect();
        let img = Image::new(w, h, data).unwrap();
        prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn every_truncation_is_a_located_error(cut in 0usize..1000) {
        let bytes = sample_file();
        let cut = cut % bytes.len();
        let err = decode_tensor(&bytes[..cut]).unwrap_err();
        prop_assert!(format_offset(err) <= cut as u64);
    }
}

#[test]
fn truncated_payload_names_expected_and_actual_length() {
    let bytes = sample_file();
    let err = decode_tensor(&bytes[..bytes.len() - 3]).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("payload"), "{msg}");
    assert!(msg.contains("24") && msg.contains("21"), "{msg}");
}

#[test]
fn bad_magic_is_rejected_at_offset_zero() {
    let mut bytes = sample_file();
    bytes[0] = b'X';
    assert_eq!(format_offset(decode_tensor(&bytes).unwrap_err()), 0);
}

#[test]
fn version_99_is_unsupported() {
    let mut bytes = sample_file();
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    match decode_tensor(&bytes).unwrap_err() {
        LdagError::UnsupportedVersion { found, expected } => assert_eq!((found, expected), (99, 1)),
        other => panic!("{other}"),
    }
}

#[test]
fn unknown_dtype_and_reserved_bits_are_located() {
    let mut bytes = sample_file();
    bytes[12] = 1;
    assert_eq!(format_offset(decode_tensor(&bytes).unwrap_err()), 12);
    let mut bytes = sample_file();
    bytes[14] = 1;
    assert_eq!(format_offset(decode_tensor(&bytes).unwrap_err()), 14);
}

#[test]
fn trailing_bytes_are_rejected() {
    let mut bytes = sample_file();
    let end = bytes.len() as u64;
    bytes.push(0);
    assert_eq!(format_offset(decode_tensor(&bytes).unwrap_err()), end);
}

#[test]
fn broken_metadata_is_located() {
    let bytes = sample_file();
    // rank 2 header: 16 fixed bytes, 16 bytes of extents, then the length word
    let meta_at = 16 + 16 + 4;
    let mut broken = bytes.clone();
    broken[meta_at] = b'!';
    assert_eq!(format_offset(decode_tensor(&broken).unwrap_err()), meta_at as u64);
}

#[test]
fn text_file_keeps_role_and_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ldt");
    let e = toy_encode_text("a photo of red square", 9).unwrap().with_role(TextRole::Background);
    save_feature_file(&FeatureFile::Text(e.clone()), &path).unwrap();
    let back = load_feature_file(&path).unwrap().into_text().unwrap();
    assert_eq!(back, e);
}

#[test]
fn mask_rejects_non_binary_samples_and_other_maxvals() {
    let err = decode_mask(&encode_pgm(2, 1, &[0, 7])).unwrap_err();
    assert!(err.to_string().contains('7'));
    let mut odd = b"P5\n2 1\n100\n".to_vec();
    odd.extend_from_slice(&[0, 100]);
    assert!(matches!(decode_pgm(&odd), Err(LdagError::Format { .. })));
    assert!(decode_pgm(b"P6\n1 1\n255\n\0\0\0").is_err());
    assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
    assert!(decode_pgm(b"P5\nx 1\n255\n\0").is_err());
}

#[test]
fn header_comments_are_skipped() {
    let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
    bytes.extend_from_slice(&[255, 0]);
    assert_eq!(decode_mask(&bytes).unwrap().data(), &[1, 0]);
}

#[test]
fn mask_file_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pgm");
    let m = Mask::new(3, 2, vec![1, 0, 1, 0, 0, 1]).unwrap();
    write_mask(&path, &m).unwrap();
    assert_eq!(read_mask(&path).unwrap(), m);
    let raw = std::fs::read(&path).unwrap();
    assert!(raw.ends_with(&[255, 0, 255, 0, 0, 255]));
}
