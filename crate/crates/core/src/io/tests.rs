use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, FormatError};
use crate::models::{HGG, LGG};
use crate::preprocess::Volume;
use crate::volcore::Tensor;

fn sample_image(seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specials = [0.0, -0.0, f32::MIN_POSITIVE, 1e-40, f32::MAX, -1.5];
    let data = Tensor::from_fn([4, 2, 3, 5], |i| {
        if i < specials.len() {
            specials[i]
        } else {
            rng.random_range(-10.0..10.0)
        }
    });
    Volume::image(data).unwrap().with_spacing([1.0, 0.5, 2.25]).unwrap()
}

fn sample_mask() -> Volume {
    Volume::mask(Tensor::from_fn([1, 2, 3, 5], |i| (i % 3 == 0) as u8 as f32)).unwrap()
}

#[test]
fn volume_round_trip_is_bitwise() {
    for v in [sample_image(1), sample_mask()] {
        let bytes = encode_volume(&v);
        let back = decode_volume(&bytes).unwrap();
        assert_eq!(back.shape(), v.shape());
        assert_eq!(back.spacing(), v.spacing());
        assert_eq!(back.kind(), v.kind());
        let bits = |v: &Volume| v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&v));
        assert_eq!(encode_volume(&back), bytes);
    }
    let mask = decode_volume(&encode_volume(&sample_mask())).unwrap();
    assert!(mask.data().iter().all(|&x| x == 0.0 || x == 1.0));
}

#[test]
fn volume_header_layout() {
    let bytes = encode_volume(&sample_mask());
    assert_eq!(&bytes[..4], b"VVOL");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(bytes[6], 2);
    assert_eq!(u16::from_le_bytes([bytes[7], bytes[8]]), 1);
    assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 2);
    assert_eq!(bytes.len(), 4 + 2 + 1 + 2 + 12 + 12 + 30);
}

#[test]
fn volume_corruption_is_reported_distinctly() {
    let bytes = encode_volume(&sample_image(2));
    for cut in 0..bytes.len() {
        assert!(
            matches!(decode_volume(&bytes[..cut]), Err(FormatError::Truncated { .. })),
            "prefix of {cut} bytes"
        );
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_volume(&bad), Err(FormatError::BadMagic { .. })));
    let mut newer = bytes.clone();
    newer[4] = 2;
    assert!(matches!(
        decode_volume(&newer),
        Err(FormatError::VersionMismatch { found: 2, supported: 1 })
    ));
    let mut dtype = bytes.clone();
    dtype[6] = 9;
    assert!(matches!(decode_volume(&dtype), Err(FormatError::UnknownDtype(9))));
    let mut long = bytes;
    long.push(0);
    assert!(matches!(decode_volume(&long), Err(FormatError::TrailingBytes { len: 1 })));
}

#[test]
fn volume_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v.vvol");
    let v = sample_image(3);
    write_volume(&path, &v).unwrap();
    assert_eq!(read_volume(&path).unwrap(), v);
    assert!(matches!(read_volume(dir.path().join("missing.vvol")), Err(Error::Io { .. })));
}

proptest! {
    #[test]
    fn corrupted_volumes_never_misparse(seed: u64, flips in prop::collection::vec((any::<usize>(), 0u8..8), 1..4), cut in any::<prop::sample::Index>()) {
        let original = encode_volume(&sample_image(seed % 4));
        let mut bytes = original.clone();
        for (pos, bit) in flips {
            let p = pos % bytes.len();
            bytes[p] ^= 1 << bit;
        }
        if let Ok(v) = decode_volume(&bytes) {
            // a flip inside the payload or spacing can yield another valid file;
            // it must then re-encode to exactly the bytes it was read from
            prop_assert_eq!(encode_volume(&v), bytes.clone());
        }
        let n = cut.index(original.len());
        prop_assert!(decode_volume(&original[..n]).is_err());
    }
}

fn small_spec(seed: u64) -> PhantomSpec {
    PhantomSpec {
        grid: [8, 16, 16],
        radius: (1.5, 2.5),
        seed,
        ..PhantomSpec::default()
    }
}

#[test]
fn phantoms_are_deterministic() {
    let spec = small_spec(7);
    let a = generate_phantom(&spec, HGG, 3).unwrap();
    let b = generate_phantom(&spec, HGG, 3).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_phantom(&spec, HGG, 4).unwrap());
    assert_ne!(a, generate_phantom(&small_spec(8), HGG, 3).unwrap());
    assert_eq!(a.patient_id, "PH0003");
    assert_eq!(a.image.modalities(), ["FLAIR", "T1", "T1ce", "T2"]);
}

#[test]
fn tumor_lies_strictly_inside_the_brain() {
    for spec in [small_spec(1), PhantomSpec::default(), PhantomSpec { tumors: (1, 3), ..small_spec(2) }] {
        let [d, h, w] = spec.grid;
        for index in 0..10 {
            for grade in [HGG, LGG] {
                let case = generate_phantom(&spec, grade, index).unwrap();
                assert!(case.mask.count_nonzero() > 0);
                let c = spec.grid.map(|n| (n as f64 - 1.0) / 2.0);
                let a = spec.grid.map(|n| n as f64 * 0.42);
                for (i, &m) in case.mask.data().iter().enumerate() {
                    let p = [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64];
                    let r: f64 = (0..3).map(|k| ((p[k] - c[k]) / a[k]).powi(2)).sum::<f64>().sqrt();
                    if m == 1.0 {
                        assert!(r < 1.0, "tumor voxel outside brain");
                    }
                    if r >= 1.0 {
                        assert!((0..4).all(|ch| case.image.data()[ch * d * h * w + i] == 0.0));
                    }
                }
            }
        }
    }
}

#[test]
fn hgg_enhances_more_than_lgg() {
    let spec = small_spec(11);
    let n = spec.grid.iter().product::<usize>();
    let t1ce_in_tumor = |case: &CaseRecord| {
        let t1ce = &case.image.data()[2 * n..3 * n];
        let (sum, count) = t1ce
            .iter()
            .zip(case.mask.data())
            .filter(|(_, &m)| m == 1.0)
            .fold((0.0, 0), |(s, k), (&v, _)| (s + v as f64, k + 1));
        sum / count as f64
    };
    for index in 0..50 {
        let hgg = generate_phantom(&spec, HGG, index).unwrap();
        let lgg = generate_phantom(&spec, LGG, index).unwrap();
        assert!(t1ce_in_tumor(&hgg) > t1ce_in_tumor(&lgg), "pair {index}");
    }
}

#[test]
fn oversized_tumors_are_rejected() {
    let spec = PhantomSpec {
        radius: (2.0, 10.0),
        ..small_spec(0)
    };
    assert!(matches!(generate_phantom(&spec, HGG, 0), Err(Error::Config(_))));
    assert!(generate_phantom(&small_spec(0), 7, 0).is_err());
}

#[test]
fn phantom_spec_kv_round_trip() {
    let spec = PhantomSpec {
        tumors: (1, 2),
        noise: 0.125,
        ..small_spec(5)
    };
    assert_eq!(PhantomSpec::from_kv(&spec.to_kv()).unwrap(), spec);
    let mut kv = spec.to_kv();
    kv.set("grid", "8,16");
    assert!(PhantomSpec::from_kv(&kv).is_err());
}

fn synthetic_manifest(n_hgg: usize, n_lgg: usize) -> DatasetManifest {
    let entry = |i: usize, grade| ManifestEntry {
        patient_id: format!("P{i:03}"),
        grade,
        split: None,
        image: format!("cases/P{i:03}_image.vvol").into(),
        mask: format!("cases/P{i:03}_mask.vvol").into(),
    };
    DatasetManifest {
        echo: Default::default(),
        entries: (0..n_hgg)
            .map(|i| entry(i, HGG))
            .chain((n_hgg..n_hgg + n_lgg).map(|i| entry(i, LGG)))
            .collect(),
    }
}

#[test]
fn split_reproduces_patient_counts() {
    let m = stratified_split(&synthetic_manifest(259, 76), DEFAULT_TRAIN_FRACTION, 0).unwrap();
    assert_eq!(m.split(Split::Train).count(), 251);
    assert_eq!(m.split(Split::Val).count(), 84);
    assert_eq!(m.count(Some(Split::Train), HGG), 194);
    assert_eq!(m.count(Some(Split::Train), LGG), 57);
    assert_eq!(m.count(Some(Split::Val), HGG), 65);
    assert_eq!(m.count(Some(Split::Val), LGG), 19);

    let small = stratified_split(&synthetic_manifest(4, 4), 0.75, 3).unwrap();
    assert_eq!((small.count(Some(Split::Train), HGG), small.count(Some(Split::Train), LGG)), (3, 3));
    assert_eq!((small.count(Some(Split::Val), HGG), small.count(Some(Split::Val), LGG)), (1, 1));
}

#[test]
fn split_never_leaks_patients() {
    let base = synthetic_manifest(259, 76);
    for seed in 0..1000 {
        let m = stratified_split(&base, DEFAULT_TRAIN_FRACTION, seed).unwrap();
        let train: std::collections::BTreeSet<_> = m.split(Split::Train).map(|e| &e.patient_id).collect();
        let val: std::collections::BTreeSet<_> = m.split(Split::Val).map(|e| &e.patient_id).collect();
        assert!(train.is_disjoint(&val));
        assert_eq!(train.len() + val.len(), 335);
    }
}

#[test]
fn split_is_seeded_and_order_independent() {
    let base = synthetic_manifest(10, 6);
    let a = stratified_split(&base, 0.75, 5).unwrap();
    let mut reversed = base.clone();
    reversed.entries.reverse();
    let b = stratified_split(&reversed, 0.75, 5).unwrap();
    for e in &a.entries {
        let other = b.entries.iter().find(|x| x.patient_id == e.patient_id).unwrap();
        assert_eq!(e.split, other.split);
    }
    let c = stratified_split(&base, 0.75, 6).unwrap();
    assert_ne!(a.entries, c.entries);
}

#[test]
fn split_errors() {
    assert!(matches!(stratified_split(&synthetic_manifest(5, 1), 0.75, 0), Err(Error::Data(_))));
    assert!(stratified_split(&synthetic_manifest(5, 5), 1.0, 0).is_err());
    let mut dup = synthetic_manifest(3, 3);
    dup.entries[1].patient_id = dup.entries[0].patient_id.clone();
    assert!(stratified_split(&dup, 0.75, 0).is_err());
}

#[test]
fn manifest_csv_round_trip() {
    let mut m = stratified_split(&synthetic_manifest(6, 3), 0.75, 9).unwrap();
    m.echo.set("phantom.seed", 9);
    let text = m.to_csv().unwrap();
    assert!(text.contains("# split.seed = 9\n"));
    assert!(text.contains("\npatient_id,grade,split,image,mask\n"));
    let back = DatasetManifest::from_csv(&text).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.to_csv().unwrap(), text);
}

#[test]
fn manifest_rejects_malformed_input() {
    let header = "patient_id,grade,split,image,mask\n";
    for bad in [
        "",
        "id,grade\n",
        &format!("{header}P1,HGG,train,a\n"),
        &format!("{header}P1,XGG,train,a,b\n"),
        &format!("{header}P1,HGG,test,a,b\n"),
        &format!("{header}P1,HGG,train,a,b\nP1,LGG,val,c,d\n"),
        &format!("{header}P1,HGG,train,a,b\nP2,LGG,,c,d\n"),
        &format!("# not a pair\n{header}"),
    ] {
        assert!(DatasetManifest::from_csv(bad).is_err(), "{bad:?}");
    }
    let mut m = synthetic_manifest(2, 2);
    m.entries[0].image = "a,b".into();
    assert!(m.to_csv().is_err());
}

#[test]
fn phantom_dataset_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(4);
    let m = write_phantom_dataset(dir.path(), &spec, 3, 2).unwrap();
    assert_eq!(DatasetManifest::load(dir.path().join("manifest.csv")).unwrap(), m);
    assert_eq!(m.echo.get("phantom.seed"), Some("4"));
    let again = tempfile::tempdir().unwrap();
    write_phantom_dataset(again.path(), &spec, 3, 2).unwrap();
    for e in &m.entries {
        let a = std::fs::read(dir.path().join(&e.image)).unwrap();
        let b = std::fs::read(again.path().join(&e.image)).unwrap();
        assert_eq!(a, b);
    }
    let case = load_case(dir.path(), &m.entries[4], false).unwrap();
    assert_eq!(case, generate_phantom(&spec, LGG, 4).unwrap());
    let normalized = load_case(dir.path(), &m.entries[0], true).unwrap();
    let n = normalized.image.voxels();
    let inside: Vec<f64> = normalized.image.data()[..n].iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect();
    let mean = inside.iter().sum::<f64>() / inside.len() as f64;
    assert!(mean.abs() < 1e-4);
}

#[test]
fn class_counts_follow_the_cohort_ratio() {
    assert_eq!(class_counts(335), (259, 76));
    assert_eq!(class_counts(8), (6, 2));
    assert_eq!(class_counts(2), (1, 1));
    assert_eq!(class_counts(1), (1, 0));
    for n in 2..200 {
        let (h, l) = class_counts(n);
        assert!(h >= 1 && l >= 1 && h + l == n);
    }
}

fn sample_predictions() -> Vec<Prediction> {
    vec![
        Prediction {
            patient_id: "PH0000".into(),
            mask: Some("masks/PH0000_pred.vvol".into()),
            grade: Some(GradePrediction { probs: [0.9, 0.1], grade: HGG }),
        },
        Prediction {
            patient_id: "PH0001".into(),
            mask: None,
            grade: Some(GradePrediction { probs: [1.0 / 3.0, 2.0 / 3.0], grade: LGG }),
        },
        Prediction { patient_id: "PH0002".into(), mask: Some("m.vvol".into()), grade: None },
    ]
}

#[test]
fn predictions_csv_round_trip() {
    let rows = sample_predictions();
    let csv = predictions_to_csv(&rows).unwrap();
    assert!(csv.starts_with(PREDICTIONS_HEADER));
    assert_eq!(csv.lines().nth(3), Some("PH0002,m.vvol,,,"));
    assert_eq!(predictions_from_csv(&csv).unwrap(), rows);
}

#[test]
fn predictions_reject_malformed_rows() {
    let bad = [
        "",
        "id,mask\n",
        "patient_id,mask,p_hgg,p_lgg,predicted\nA,,0.5,0.5\n",
        "patient_id,mask,p_hgg,p_lgg,predicted\n,,0.5,0.5,HGG\n",
        "patient_id,mask,p_hgg,p_lgg,predicted\nA,,1.5,0.5,HGG\n",
        "patient_id,mask,p_hgg,p_lgg,predicted\nA,,0.5,0.5,XGG\n",
        "patient_id,mask,p_hgg,p_lgg,predicted\nA,,,0.5,HGG\n",
        "patient_id,mask,p_hgg,p_lgg,predicted\nA,,,,\nA,,,,\n",
    ];
    for text in bad {
        assert!(predictions_from_csv(text).is_err(), "{text:?}");
    }
    let comma = Prediction { patient_id: "a,b".into(), mask: None, grade: None };
    assert!(predictions_to_csv(&[comma]).is_err());
}
