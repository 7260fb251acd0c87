mod common;

use std::fs;
use std::path::Path;

use asiseg::dataset::{generate_dataset, load_dataset, load_endovis, read_manifest, verify_manifest, write_dataset};
use asiseg::error::AppError;
use asiseg::io::{write_mask_png, write_rgb_png};
use asiseg_core::decoder::BinaryMask;
use asiseg_core::synth::{render_masks, Split};
use asiseg_core::Error;

#[test]
fn generated_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(3);
    let manifests = generate_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(manifests.len(), 2);
    let loaded = load_dataset(dir.path(), "train").unwrap();
    let memory = common::tiny_split(3, Split::Train);
    assert_eq!(loaded.len(), memory.len());
    for (a, b) in loaded.samples.iter().zip(&memory.samples) {
        assert_eq!(a.id, b.id);
        assert!(a.rgb == b.rgb, "pixels of {}", a.id);
        assert!(a.masks == b.masks, "masks of {}", a.id);
        assert_eq!(a.present_classes, b.present_classes);
        assert_eq!(a.shapes, b.shapes);
        assert_eq!(a.command_seed, b.command_seed);
        assert!(a.audio == b.audio, "audio of {}", a.id);
        assert!(a.image == b.image, "image of {}", a.id);
    }
    for s in &loaded.samples {
        assert_eq!(s.present_classes, (0..7).filter(|&k| !s.masks[k].is_empty()).collect::<Vec<_>>());
        assert_eq!(render_masks(&s.shapes, 7, 64).unwrap(), s.masks);
        assert_eq!(s.audio.keys().copied().collect::<Vec<_>>(), s.present_classes);
    }
}

#[test]
fn generation_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_dataset(&common::tiny_config(5), a.path()).unwrap();
    let mb = generate_dataset(&common::tiny_config(5), b.path()).unwrap();
    assert_eq!(
        ma.iter().map(|m| &m.checksum).collect::<Vec<_>>(),
        mb.iter().map(|m| &m.checksum).collect::<Vec<_>>()
    );
}

fn corrupted(edit: impl FnOnce(&Path)) -> AppError {
    let dir = tempfile::tempdir().unwrap();
    let ds = common::tiny_split(4, Split::Val);
    write_dataset(&ds, dir.path()).unwrap();
    edit(&dir.path().join("val"));
    verify_manifest(&read_manifest(dir.path(), "val").unwrap()).unwrap_err()
}

#[test]
fn manifest_detects_altered_and_missing_files() {
    let e = corrupted(|d| {
        let p = d.join("images/00001.png");
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0x40;
        fs::write(&p, bytes).unwrap();
    });
    assert!(matches!(e, AppError::Manifest(_)), "{e}");
    let e = corrupted(|d| fs::remove_file(d.join("masks/3/00002.png")).unwrap());
    assert!(matches!(e, AppError::Manifest(_)), "{e}");
    let e = corrupted(|d| {
        let p = d.join("shapes/00000.json");
        let t = fs::read_to_string(&p).unwrap();
        fs::write(&p, t.replacen('1', "2", 1)).unwrap();
    });
    assert!(matches!(e, AppError::Manifest(_)), "{e}");
}

fn endovis_fixture(root: &Path, bad_mask: bool) {
    let dir = root.join("test");
    for (i, id) in ["f0", "f1", "f2"].iter().enumerate() {
        let rgb: Vec<u8> = (0..16 * 16 * 3).map(|v| ((v + i) % 251) as u8).collect();
        write_rgb_png(&dir.join(format!("images/{id}.png")), 16, 16, &rgb).unwrap();
        for k in 0..2 {
            let m = BinaryMask::from_fn(16, 16, |y, x| (y + k * 3 + i) % 5 == 0 && x < 8);
            write_mask_png(&dir.join(format!("masks/{k}/{id}.png")), &m).unwrap();
        }
    }
    if bad_mask {
        let p = dir.join("masks/1/f1.png");
        let file = fs::File::create(p).unwrap();
        let mut enc = png::Encoder::new(file, 3, 1);
        enc.set_color(png::ColorType::Grayscale);
        enc.write_header().unwrap().write_image_data(&[0, 128, 255]).unwrap();
    }
    fs::write(root.join("test.txt"), "# frames\nf0\nf1\n\nf2\n").unwrap();
    fs::write(root.join("empty.txt"), "# nothing\n").unwrap();
}

#[test]
fn endovis_loader() {
    let dir = tempfile::tempdir().unwrap();
    endovis_fixture(dir.path(), false);
    let ds = load_endovis(dir.path(), &dir.path().join("test.txt")).unwrap();
    assert_eq!((ds.len(), ds.num_classes), (3, 2));
    assert_eq!(ds.samples[1].id, "f1");
    assert!(ds.warnings.is_empty());
    let empty = load_endovis(dir.path(), &dir.path().join("empty.txt")).unwrap();
    assert!(empty.is_empty());
    assert_eq!(empty.warnings.len(), 1);
}

#[test]
fn endovis_grey_level_mask_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    endovis_fixture(dir.path(), true);
    let e = load_endovis(dir.path(), &dir.path().join("test.txt")).unwrap_err();
    assert!(matches!(e, AppError::Core(Error::Validation(_))), "{e}");
}

#[test]
fn endovis_missing_mask_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    endovis_fixture(dir.path(), false);
    fs::remove_file(dir.path().join("test/masks/0/f2.png")).unwrap();
    let e = load_endovis(dir.path(), &dir.path().join("test.txt")).unwrap_err();
    assert!(matches!(e, AppError::Manifest(_)), "{e}");
}
