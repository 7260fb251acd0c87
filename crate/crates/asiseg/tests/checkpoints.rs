mod common;

use asiseg::checkpoint::{decode, encode, load, save, Seeds, FORMAT_VERSION, MAGIC};
use asiseg::error::AppError;
use asiseg::train::fit_audio_norm;
use asiseg_core::model::SegmentInputs;
use asiseg_core::synth::Split;
use asiseg_core::Error;

fn seeds() -> Seeds {
    Seeds {
        model: 11,
        train: 2,
        data: 3,
    }
}

#[test]
fn round_trip_preserves_parameters_and_outputs() {
    let ds = common::tiny_split(1, Split::Val);
    let mut model = common::default_model(11);
    fit_audio_norm(&mut model, &ds).unwrap();
    // Move a trainable parameter away from its seeded initial value.
    let id = model.store.find("queries").unwrap();
    model.store.get_mut(id).data_mut()[3] = 0.125;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save(&path, &model, seeds()).unwrap();
    let (back, header) = load(&path, Some(7)).unwrap();
    assert_eq!(header.seeds, seeds());
    assert_eq!((header.num_classes, header.d, header.format_version), (7, 64, FORMAT_VERSION));
    assert_eq!(back.norm_stats, model.norm_stats);
    assert_eq!(back.bank, model.bank);
    for (a, b) in back.store.entries().iter().zip(model.store.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }
    let s = &ds.samples[0];
    let text = model.text_features().unwrap();
    let features = model.encode_image(&s.image).unwrap();
    let inputs = SegmentInputs {
        features: &features,
        image: &s.image,
        text: &text,
        target: 2,
    };
    assert_eq!(back.segment(&inputs).unwrap(), model.segment(&inputs).unwrap());
    assert_eq!(encode(&back, seeds()), encode(&model, seeds()));
}

#[test]
fn version_mismatch_is_rejected() {
    let model = common::default_model(0);
    let mut bytes = encode(&model, seeds());
    bytes[MAGIC.len()..MAGIC.len() + 4].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let e = decode(&bytes, None).err().unwrap();
    assert!(matches!(e, AppError::Checkpoint(_)), "{e}");
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let bytes = encode(&common::default_model(0), seeds());
    let e = decode(&bytes, Some(5)).err().unwrap();
    assert!(matches!(e, AppError::Core(Error::Config(_))), "{e}");
}

#[test]
fn truncated_and_foreign_files_are_rejected() {
    let bytes = encode(&common::default_model(0), seeds());
    assert!(matches!(decode(&bytes[..bytes.len() - 3], None).err().unwrap(), AppError::Checkpoint(_)));
    assert!(matches!(decode(b"PNG....", None).err().unwrap(), AppError::Checkpoint(_)));
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(decode(&longer, None).err().unwrap(), AppError::Checkpoint(_)));
}
