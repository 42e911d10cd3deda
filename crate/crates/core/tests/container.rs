use mobileone::arch::{build_model, variant_spec, Model, ModelMode};
use mobileone::container::{decode, encode, sidecar_path, MAGIC};
use mobileone::{load_model, reparameterize_model, save_model, Error, InitPolicy, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(mode: ModelMode) -> Model<f32> {
    let mut spec = variant_spec("mu1").unwrap();
    spec.stages.truncate(3);
    spec.n_classes = 5;
    let model = build_model(&spec, ModelMode::Train, InitPolicy::random_bn(11)).unwrap();
    match mode {
        ModelMode::Train => model,
        ModelMode::Inference => reparameterize_model(&model).unwrap(),
    }
}

fn bits(t: &Tensor4<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn save_load_forward_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let x = Tensor4::randn([2, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    for mode in [ModelMode::Train, ModelMode::Inference] {
        let model = small(mode);
        let path = dir.path().join(format!("{}.mob", mode.as_str()));
        save_model(&model, &path).unwrap();
        assert!(sidecar_path(&path).exists());
        let back: Model<f32> = load_model(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(bits(&back.forward(&x).unwrap()), bits(&model.forward(&x).unwrap()));
    }
}

#[test]
fn double_precision_round_trip() {
    let model: Model<f64> = small(ModelMode::Train).cast();
    let (bytes, _) = encode(&model).unwrap();
    assert_eq!(decode::<f64>(&bytes).unwrap(), model);
}

#[test]
fn corrupted_headers_are_rejected() {
    let (bytes, _) = encode(&small(ModelMode::Inference)).unwrap();
    assert_eq!(&bytes[..4], MAGIC);

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    let mut bad_count = bytes.clone();
    bad_count[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    let mut bad_name_len = bytes.clone();
    bad_name_len[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
    let truncated = bytes[..bytes.len() / 2].to_vec();

    for (what, corrupt) in [
        ("magic", bad_magic),
        ("version", bad_version),
        ("count", bad_count),
        ("name length", bad_name_len),
        ("truncation", truncated),
        ("empty", Vec::new()),
    ] {
        match decode::<f32>(&corrupt) {
            Err(Error::Format(_)) => {}
            other => panic!("{what}: expected a format error, got {other:?}"),
        }
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_model::<f32>(dir.path().join("absent.mob")), Err(Error::Io(_))));
}
