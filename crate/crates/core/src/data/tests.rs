use proptest::prelude::*;
use rand::SeedableRng;
use rand_pcg::Pcg64;

use super::tnsr::{decode, encode};
use super::*;
use crate::tensor::Tensor;

fn small() -> SceneConfig {
    SceneConfig {
        h: 16,
        w: 16,
        classes: 5,
    }
}

fn unit_normals(s: &Sample) -> bool {
    let p = s.h * s.w;
    (0..p).all(|i| {
        let n2: f64 = (0..3).map(|c| (s.normal[c * p + i] as f64).powi(2)).sum();
        (n2.sqrt() - 1.0).abs() <= 1e-6
    })
}

#[test]
fn tnsr_header_arithmetic() {
    let t = StoredTensor::F32(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let mut buf = Vec::new();
    encode(&t, &mut buf).unwrap();
    assert_eq!(buf.len(), 4 + 4 + 1 + 1 + 8 + 16);
    assert_eq!(&buf[..4], b"TNSR");
    assert_eq!(&buf[4..8], &1u32.to_le_bytes());
    assert_eq!(buf[8], 1);
    assert_eq!(buf[9], 2);
}

#[test]
fn tnsr_rejects_corruption() {
    let t = StoredTensor::I32 {
        shape: vec![3],
        data: vec![1, -2, 3],
    };
    let mut buf = Vec::new();
    encode(&t, &mut buf).unwrap();
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(crate::Error::Format(_))));
    let mut bad = buf.clone();
    bad[4] = 2;
    assert!(matches!(decode(&bad), Err(crate::Error::Format(_))));
    let mut bad = buf.clone();
    bad[8] = 9;
    assert!(matches!(decode(&bad), Err(crate::Error::Format(_))));
    assert!(matches!(decode(&buf[..buf.len() - 1]), Err(crate::Error::Format(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.tnsr");
    std::fs::write(&path, &buf[..buf.len() - 2]).unwrap();
    assert!(matches!(read_tensor_file(&path), Err(crate::Error::Format(_))));
    assert!(matches!(read_tensor_file(dir.path().join("missing")), Err(crate::Error::Io { .. })));
}

fn stored_tensor() -> impl Strategy<Value = StoredTensor> {
    let shape = prop::collection::vec(0usize..4, 0..4);
    (shape, 0u8..3).prop_flat_map(|(shape, kind)| {
        let n: usize = shape.iter().product();
        let s = shape.clone();
        match kind {
            0 => prop::collection::vec(any::<f32>(), n)
                .prop_map(move |d| StoredTensor::F32(Tensor::new(s.clone(), d).unwrap()))
                .boxed(),
            1 => prop::collection::vec(any::<f64>(), n)
                .prop_map(move |d| StoredTensor::F64(Tensor::new(s.clone(), d).unwrap()))
                .boxed(),
            _ => prop::collection::vec(any::<i32>(), n)
                .prop_map(move |data| StoredTensor::I32 {
                    shape: s.clone(),
                    data,
                })
                .boxed(),
        }
    })
}

fn bits(t: &StoredTensor) -> (Vec<usize>, Vec<u64>) {
    let b = match t {
        StoredTensor::F32(t) => t.data().iter().map(|v| v.to_bits() as u64).collect(),
        StoredTensor::F64(t) => t.data().iter().map(|v| v.to_bits()).collect(),
        StoredTensor::I32 { data, .. } => data.iter().map(|&v| v as u32 as u64).collect(),
    };
    (t.shape().to_vec(), b)
}

proptest! {
    #[test]
    fn tnsr_round_trip_is_bitwise(t in stored_tensor()) {
        let mut buf = Vec::new();
        encode(&t, &mut buf).unwrap();
        prop_assert_eq!(buf.len(), t.encoded_len());
        let (back, used) = decode(&buf).unwrap();
        prop_assert_eq!(used, buf.len());
        prop_assert_eq!(back.dtype(), t.dtype());
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn augmentation_preserves_modality_invariants(idx in 0usize..200, aug_seed in any::<u64>()) {
        let s = generate_sample(11, idx, &small());
        let mut rng = Pcg64::seed_from_u64(aug_seed);
        let a = augment(&s, &mut rng, &AugmentConfig::default());
        prop_assert_eq!((a.h, a.w), (s.h, s.w));
        prop_assert!(a.depth.iter().all(|&d| d > 0.0));
        prop_assert!(a.seg.iter().all(|&l| (l as usize) < 5 || l == IGNORE));
        prop_assert!(a.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(unit_normals(&a));
    }
}

#[test]
fn generation_is_a_pure_function_of_seed_and_index() {
    let a = generate_sample(3, 17, &small());
    let b = generate_sample(3, 17, &small());
    assert_eq!(a, b);
    assert_ne!(a, generate_sample(3, 18, &small()));
    assert_ne!(a, generate_sample(4, 17, &small()));
}

#[test]
fn generated_modalities_satisfy_invariants() {
    for i in 0..50 {
        let s = generate_sample(5, i, &SceneConfig::default());
        assert!(unit_normals(&s));
        assert!(s.depth.iter().all(|&d| d > 0.0));
        assert!(s.seg.iter().all(|&l| l < 5));
    }
}

#[test]
fn class_histogram_covers_every_class() {
    let mut hist = [0usize; 5];
    for i in 0..1000 {
        for &l in &generate_sample(21, i, &small()).seg {
            hist[l as usize] += 1;
        }
    }
    assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
}

#[test]
fn normals_of_analytic_planes() {
    let (h, w) = (6, 7);
    let flat = derive_normals(&vec![2.5; h * w], h, w);
    for i in 0..h * w {
        assert_eq!([flat[i], flat[h * w + i], flat[2 * h * w + i]], [0.0, 0.0, 1.0]);
    }
    let ramp: Vec<f64> = (0..h * w).map(|i| (i % w) as f64 + 1.0).collect();
    let n = derive_normals(&ramp, h, w);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    for y in 0..h {
        for x in 1..w - 1 {
            let i = y * w + x;
            assert!((n[i] + r).abs() < 1e-12 && n[h * w + i].abs() < 1e-12 && (n[2 * h * w + i] - r).abs() < 1e-12);
        }
    }
}

#[test]
fn flip_is_an_involution() {
    let s = generate_sample(1, 2, &small());
    let f = hflip(&s);
    assert_ne!(f, s);
    assert_eq!(hflip(&f), s);
    // normal x of the mirrored pixel is negated
    assert_eq!(f.normal[0], -s.normal[s.w - 1]);
}

#[test]
fn rescale_divides_depth_by_factor() {
    let mut s = generate_sample(1, 3, &small());
    s.depth.iter_mut().for_each(|d| *d = 3.0);
    let r = rescale(&s, 2.0);
    assert_eq!((r.h, r.w), (32, 32));
    assert!(r.depth.iter().all(|&d| d == 1.5));
    let r = rescale(&s, 0.5);
    assert!(r.depth.iter().all(|&d| d == 6.0));
}

#[test]
fn crop_pads_with_ignore_and_edges() {
    let s = generate_sample(1, 4, &small());
    let c = crop(&s, (-2, -3), (16, 16));
    assert_eq!(c.seg[0], IGNORE);
    assert_eq!(c.image[0], 0.0);
    assert_eq!(c.depth[0], s.depth[0]);
    assert_eq!(c.seg[2 * 16 + 3], s.seg[0]);
}

#[test]
fn splits_partition_and_meta_splits_come_from_train() {
    for n in [1, 5, 6, 7, 100, 1536] {
        let s = Splits::assign(n);
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        let mut meta: Vec<usize> = s.meta_train.iter().chain(&s.meta_val).copied().collect();
        meta.sort_unstable();
        assert_eq!(meta, s.train);
    }
    let s = Splits::assign(1536);
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1024, 256, 256));
}

#[test]
fn dataset_directory_round_trip_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let m = gen_synthetic_dir(a.path(), 7, 12, small()).unwrap();
    gen_synthetic_dir(b.path(), 7, 12, small()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 4 * 12 + 1);
    for name in &names {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name:?}");
    }
    let loaded = load_dataset(a.path()).unwrap();
    assert_eq!(loaded.manifest, m);
    let fresh = gen_synthetic(7, 12, small()).unwrap();
    assert_eq!(loaded.samples, fresh.samples);
}

#[test]
fn single_sample_dataset() {
    let d = tempfile::tempdir().unwrap();
    let m = gen_synthetic_dir(d.path(), 1, 1, small()).unwrap();
    assert_eq!(m.splits.train, vec![0]);
    assert!(load_dataset(d.path()).is_ok());
}
