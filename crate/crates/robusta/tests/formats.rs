use std::path::Path;

use robusta::datasets::{load_cifar10, load_idx, load_idx_dir, parse_cifar_records, parse_idx_images};
use robusta::modelfile::{decode, encode, load_model, save_model};
use robusta::Error;
use robusta_core::data::Split;
use robusta_core::model::{Architecture, ModelMeta};
use robusta_core::Model;

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut v = 0x0803u32.to_be_bytes().to_vec();
    for x in [n, rows, cols] {
        v.extend_from_slice(&x.to_be_bytes());
    }
    v.extend_from_slice(pixels);
    v
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut v = 0x0801u32.to_be_bytes().to_vec();
    v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    v.extend_from_slice(labels);
    v
}

fn offset_of(e: &Error) -> Option<u64> {
    match e {
        Error::Format { offset, .. } => Some(*offset),
        _ => None,
    }
}

#[test]
fn two_image_idx_fixture_scales_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let mut pixels = vec![0u8; 4];
    pixels.extend([255u8; 4]);
    std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), idx_images(2, 2, 2, &pixels)).unwrap();
    std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&[3, 7])).unwrap();
    let d = load_idx_dir::<f64>("mnist", dir.path(), Split::Test).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.image(0).data(), &[0.0; 4]);
    assert_eq!(d.image(1).data(), &[1.0; 4]);
    assert_eq!((d.label(0), d.label(1)), (3, 7));
    assert_eq!(d.image(0).shape(), &[1, 2, 2]);
}

#[test]
fn dotted_file_names_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("train-images.idx3-ubyte"), idx_images(1, 1, 1, &[51])).unwrap();
    std::fs::write(dir.path().join("train-labels.idx1-ubyte"), idx_labels(&[0])).unwrap();
    let d = load_idx_dir::<f32>("mnist", dir.path(), Split::Train).unwrap();
    assert_eq!(d.image(0).data(), &[0.2f32]);
}

#[test]
fn malformed_idx_files_report_offsets() {
    let p = Path::new("fixture");
    let mut bad = idx_images(1, 2, 2, &[0; 4]);
    bad[3] = 0x01;
    let e = parse_idx_images(&bad, p).unwrap_err();
    assert_eq!(offset_of(&e), Some(0));
    assert!(e.to_string().contains("magic"));

    let truncated = idx_images(2, 2, 2, &[0; 5]);
    let e = parse_idx_images(&truncated, p).unwrap_err();
    assert_eq!(offset_of(&e), Some(21));
    assert!(parse_idx_images(&truncated[..10], p).is_err());

    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
    std::fs::write(&img, idx_images(2, 1, 1, &[0, 0])).unwrap();
    std::fs::write(&lab, idx_labels(&[1, 10])).unwrap();
    let e = load_idx::<f64>("mnist", Split::Test, &img, &lab).unwrap_err();
    assert_eq!(offset_of(&e), Some(9));
    std::fs::write(&lab, idx_labels(&[1])).unwrap();
    assert!(load_idx::<f64>("mnist", Split::Test, &img, &lab).is_err());
    assert!(matches!(
        load_idx::<f64>("mnist", Split::Test, &dir.path().join("missing"), &lab),
        Err(Error::Io { .. })
    ));
}

#[test]
fn cifar_records() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch_1.bin");
    let mut rec = vec![4u8];
    rec.extend([255u8; 3072]);
    std::fs::write(&path, &rec).unwrap();
    let d = load_cifar10::<f64>("cifar10", Split::Train, &[&path]).unwrap();
    assert_eq!(d.len(), 1);
    assert_eq!(d.label(0), 4);
    assert_eq!(d.image(0).shape(), &[3, 32, 32]);
    assert!(d.image(0).data().iter().all(|&v| v == 1.0));

    let (mut px, mut lb) = (Vec::new(), Vec::new());
    let mut two = rec.clone();
    two.extend(&rec);
    two[3073] = 10;
    let e = parse_cifar_records(&two, &path, &mut px, &mut lb).unwrap_err();
    assert_eq!(offset_of(&e), Some(3073));
    assert!(parse_cifar_records(&rec[..100], &path, &mut px, &mut lb).is_err());
}

fn trained_like() -> Model<f32> {
    let mut m = Model::init(Architecture::simple_cnn([1, 8, 8], 3).unwrap(), 77).unwrap();
    m.meta = ModelMeta { dataset: "toy".into(), seed: u64::MAX - 5, train_digest: "abc123".into() };
    m
}

#[test]
fn checkpoints_round_trip_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a/m.rbm"), dir.path().join("b.rbm"));
    let m = trained_like();
    save_model(&m, &a).unwrap();
    let back: Model<f32> = load_model(&a).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.meta.seed, u64::MAX - 5);
    save_model(&back, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let wide: Model<f64> = load_model(&a).unwrap();
    assert_eq!(wide.flat_params(), m.flat_params().iter().map(|&v| v as f64).collect::<Vec<_>>());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let p = Path::new("m.rbm");
    let bytes = encode(&trained_like()).unwrap();

    let mut tampered = bytes.clone();
    let mid = bytes.len() - 40;
    tampered[mid] ^= 0x10;
    let e = decode::<f32>(&tampered, p).unwrap_err();
    assert!(e.to_string().contains("checksum"), "{e}");

    let mut version = bytes.clone();
    version[8] = 9;
    assert!(decode::<f32>(&version, p).unwrap_err().to_string().contains("version"));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert_eq!(offset_of(&decode::<f32>(&magic, p).unwrap_err()), Some(0));

    assert!(decode::<f32>(&bytes[..bytes.len() - 1], p).is_err());
    assert!(decode::<f32>(&bytes[..30], p).is_err());
}
