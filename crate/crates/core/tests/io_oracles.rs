mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use common::*;
use msflow_core::checkpoint::{load_checkpoint, read_checkpoint_manifest, save_checkpoint};
use msflow_core::dataset::*;
use msflow_core::model::{ModelConfig, MsFlowModel};
use msflow_core::params;
use msflow_core::pyramid::{build_pyramid, toy_extract, FeaturePyramid, ToyExtractor};
use msflow_core::tensor_io::{decode_tensor, encode_tensor, read_tensor, write_tensor};
use msflow_core::{Error, Tensor};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

#[test]
fn tensor_file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(1);
    let mut t = rand_tensor(&mut r, &[3, 4, 5], 10.0);
    t.data_mut()[0] = -0.0;
    t.data_mut()[1] = f32::MIN_POSITIVE / 2.0;
    let path = dir.path().join("t.msft");
    write_tensor(&path, &t).unwrap();
    let back = read_tensor(&path).unwrap();
    assert_eq!(back.dims(), t.dims());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&t));
    assert_eq!(fs::metadata(&path).unwrap().len(), 16 + 12 + 4 * 60);
}

#[test]
fn tensor_file_corruptions_map_to_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::full(&[3, 4, 5], 1.5);
    let path = dir.path().join("t.msft");
    let good = encode_tensor(&t);

    let mut bad = good.clone();
    bad[0] ^= 0xff;
    fs::write(&path, &bad).unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::BadMagic { .. })));

    fs::write(&path, &good[..good.len() - 4]).unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::TruncatedPayload { .. })));

    let mut dt = good.clone();
    dt[8..12].copy_from_slice(&3u32.to_le_bytes());
    fs::write(&path, &dt).unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::UnsupportedDtype { dtype: 3, .. })));

    assert!(matches!(read_tensor(dir.path().join("missing.msft")), Err(Error::Io { .. })));
}

proptest! {
    #[test]
    fn tensor_file_round_trip_up_to_4d(
        dims in prop::collection::vec(1usize..5, 1..=4),
        seed in any::<u64>(),
    ) {
        let n: usize = dims.iter().product();
        let mut r = rng(seed);
        let data: Vec<f32> = (0..n).map(|_| f32::from_bits(rand::Rng::gen::<u32>(&mut r) & 0x7f7f_ffff)).collect();
        let t = Tensor::new(dims, data).unwrap();
        let back = decode_tensor(&encode_tensor(&t), Path::new("p")).unwrap();
        prop_assert_eq!(back.dims(), t.dims());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn pyramid_pools_with_kernel_three_stride_two() {
    let mut r = rng(2);
    let stages = [rand_tensor(&mut r, &[4, 64, 64], 1.0), rand_tensor(&mut r, &[8, 32, 32], 1.0), rand_tensor(&mut r, &[16, 16, 16], 1.0)];
    let p = build_pyramid(&stages).unwrap();
    assert_eq!(p.sizes(), [[32, 32], [16, 16], [8, 8]]);
    for (level, raw) in p.levels.iter().zip(&stages) {
        assert!(level.max_abs_diff(&avg_pool_oracle(raw, 3, 2, 1)) < 1e-6);
    }

    let constant = [Tensor::full(&[2, 16, 16], 3.0), Tensor::full(&[3, 8, 8], 3.0), Tensor::full(&[4, 4, 4], 3.0)];
    let p = build_pyramid(&constant).unwrap();
    let y = &p.levels[0];
    for i in 1..8 {
        for j in 1..8 {
            assert!((y.data()[i * 8 + j] - 3.0).abs() < 1e-6);
        }
    }
    assert!((y.data()[0] - 4.0 * 3.0 / 9.0).abs() < 1e-6);
}

#[test]
fn pyramid_rejects_bad_stage_sets() {
    let ok = |c: usize, s: usize| Tensor::zeros(&[c, s, s]);
    let e = build_pyramid(&[ok(4, 16), ok(4, 8), ok(8, 4)]).unwrap_err();
    assert_eq!(e.class(), msflow_core::ErrorClass::Data);
    assert!(build_pyramid(&[ok(2, 16), ok(4, 8), ok(8, 4), ok(16, 2)]).is_err());
    assert!(build_pyramid(&[ok(2, 16), ok(4, 8)]).is_err());
    assert!(FeaturePyramid::new([ok(2, 16), ok(4, 5), ok(8, 2)]).is_err());
}

#[test]
fn toy_extractor_is_deterministic_with_halving_shapes() {
    let mut r = rng(3);
    let img = Tensor::from_fn(&[3, 32, 48], |_| rand::Rng::gen_range(&mut r, 0.0..1.0));
    let a = toy_extract(&img, 11).unwrap();
    let b = toy_extract(&img, 11).unwrap();
    assert_eq!(a, b);
    let dims: Vec<_> = a.iter().map(|t| t.dims().to_vec()).collect();
    assert_eq!(dims, vec![vec![16, 16, 24], vec![32, 8, 12], vec![64, 4, 6]]);
    assert_ne!(toy_extract(&img, 12).unwrap(), a);
    assert!(toy_extract(&Tensor::zeros(&[3, 24, 32]), 1).is_err());
    assert!(toy_extract(&Tensor::zeros(&[1, 32, 32]), 1).is_err());
}

/// Rows/cols of stage `s` output that can see input index `p`: each stage is
/// a 3x3 conv (pad 1) followed by a 2x2/2 pool.
fn receptive_interval(p: usize, stages: usize) -> (i64, i64) {
    let (mut lo, mut hi) = (p as i64, p as i64);
    for _ in 0..stages {
        let (clo, chi) = (lo - 1, hi + 1);
        lo = clo.div_euclid(2);
        hi = chi.div_euclid(2);
    }
    (lo, hi)
}

#[test]
fn one_pixel_change_stays_in_receptive_field() {
    let mut r = rng(4);
    let ex = ToyExtractor::new(5);
    let img = Tensor::from_fn(&[3, 64, 64], |_| rand::Rng::gen_range(&mut r, 0.0..1.0));
    for (py, px) in [(0usize, 0usize), (17, 40), (63, 5), (31, 32)] {
        let mut moved = img.clone();
        for c in 0..3 {
            let v = &mut moved.data_mut()[(c * 64 + py) * 64 + px];
            *v = 1.0 - *v;
        }
        let a = ex.extract(&img).unwrap();
        let b = ex.extract(&moved).unwrap();
        for s in 0..3 {
            let (c, h, w) = a[s].chw().unwrap();
            let (ylo, yhi) = receptive_interval(py, s + 1);
            let (xlo, xhi) = receptive_interval(px, s + 1);
            let mut changed_inside = 0;
            for i in 0..c * h * w {
                let (y, x) = (((i / w) % h) as i64, (i % w) as i64);
                let inside = y >= ylo && y <= yhi && x >= xlo && x <= xhi;
                let differs = a[s].data()[i] != b[s].data()[i];
                assert!(inside || !differs, "stage {s} changed outside the field at ({y},{x})");
                changed_inside += usize::from(differs);
            }
            if s == 0 {
                assert!(changed_inside > 0);
            }
        }
    }
}

fn small_synth() -> SynthConfig {
    SynthConfig { size: 32, train: 6, test: 8, ..SynthConfig::default() }
}

#[test]
fn synthetic_samples_respect_the_generator_contract() {
    let cfg = SynthConfig { size: 64, train: 4, test: 60, ..SynthConfig::default() };
    let (train, test) = synth_samples(&cfg, 9).unwrap();
    assert!(train.iter().all(|s| s.mask.is_none() && s.defect.is_none()));
    let defective: Vec<_> = test.iter().filter(|s| s.mask.is_some()).collect();
    assert_eq!(defective.len(), 30);
    for s in &defective {
        let m = s.mask.as_ref().unwrap();
        let frac = m.iter().filter(|&&b| b).count() as f64 / m.len() as f64;
        assert!(frac >= cfg.min_defect_fraction && frac <= cfg.max_defect_fraction, "{frac}");
    }
    for s in train.iter().chain(&test) {
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let kinds: std::collections::BTreeSet<_> = defective.iter().map(|s| format!("{:?}", s.defect)).collect();
    assert_eq!(kinds.len(), 3);
}

#[test]
fn defect_masks_cover_the_configured_range() {
    let cfg = SynthConfig { min_defect_fraction: 0.01, max_defect_fraction: 0.02, ..SynthConfig::default() };
    let mut r = rng(6);
    for _ in 0..50 {
        let m = defect_mask(&mut r, &cfg);
        let frac = m.iter().filter(|&&b| b).count() as f64 / m.len() as f64;
        assert!((0.01..=0.02).contains(&frac));
    }
}

fn hash_dir(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, format!("{:x}", Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    out
}

#[test]
fn dataset_bytes_are_a_function_of_config_and_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small_synth();
    let m = gen_synthetic_dataset(&cfg, 21, 7, a.path()).unwrap();
    gen_synthetic_dataset(&cfg, 21, 7, b.path()).unwrap();
    let (ha, hb) = (hash_dir(a.path()), hash_dir(b.path()));
    assert_eq!(ha, hb);
    assert_eq!(ha.len(), 1 + (6 + 8) * 4 + 4);

    let c = tempfile::tempdir().unwrap();
    gen_synthetic_dataset(&cfg, 22, 7, c.path()).unwrap();
    assert_ne!(hash_dir(c.path()), ha);

    assert!(m.train.iter().all(|r| r.label == Label::Normal && r.mask.is_none()));
    let loaded = DatasetManifest::load(a.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded, m);
    for r in &m.test {
        let mask = load_mask(a.path(), r).unwrap();
        assert_eq!(mask.len(), r.height * r.width);
        assert_eq!(mask.iter().any(|&b| b), r.label == Label::Anomalous);
        let p = load_pyramid(a.path(), r).unwrap();
        assert_eq!(p.channels(), [16, 32, 64]);
        assert_eq!(p.sizes(), [[8, 8], [4, 4], [2, 2]]);
    }
}

#[test]
fn manifest_rejects_anomalous_training_records_and_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_synthetic_dataset(&small_synth(), 3, 7, dir.path()).unwrap();
    let mut bad = m.clone();
    bad.train[0].label = Label::Anomalous;
    let path = dir.path().join("bad.json");
    bad.save(&path).unwrap();
    let e = DatasetManifest::load(&path).unwrap_err();
    assert!(e.to_string().contains(&bad.train[0].id));

    let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap().replacen("\"label\"", "\"extra\": 1, \"label\"", 1);
    fs::write(&path, text).unwrap();
    assert!(matches!(DatasetManifest::load(&path), Err(Error::Json { .. })));
}

#[test]
fn manifest_schema_matches_the_exporter_contract() {
    let json = r#"{
        "extractor": "wide-resnet-50",
        "train": [{"id": "a", "features": ["a1.msft", "a2.msft", "a3.msft"], "label": "normal", "height": 512, "width": 512}],
        "test": [{"id": "b", "features": ["b1.msft", "b2.msft", "b3.msft"], "label": "anomalous",
                  "mask": "b_mask.pgm", "height": 512, "width": 512}]
    }"#;
    let m: DatasetManifest = serde_json::from_str(json).unwrap();
    m.validate().unwrap();
    assert_eq!(m.test[0].mask.as_deref(), Some("b_mask.pgm"));
    assert_eq!(m.extractor_seed, None);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::for_shapes([4, 8, 16], [[8, 8], [4, 4], [2, 2]]);
    cfg.pos_channels = 8;
    let mut m = MsFlowModel::new(cfg).unwrap();
    randomize(&mut m, &mut rng(8), 0.2);
    let manifest = save_checkpoint(&m, dir.path()).unwrap();
    assert_eq!(manifest.parameters.len(), params::named(&m).len());
    assert!(manifest.parameters.iter().any(|p| p.name == "parallel2.block7.layer1.st.conv_b.bias"));
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(params::checksum(&back), params::checksum(&m));
    assert_eq!(back, m);
    assert_eq!(read_checkpoint_manifest(dir.path()).unwrap().model.blocks, [2, 5, 8]);

    let victim = dir.path().join(&manifest.parameters[3].file);
    let mut t = read_tensor(&victim).unwrap();
    t.data_mut()[0] += 1.0;
    write_tensor(&victim, &t).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
    fs::remove_file(&victim).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Io { .. })));
}
