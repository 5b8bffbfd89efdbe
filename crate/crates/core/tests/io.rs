use globalmind::io::{
    decode_hsc, decode_labels, encode_hsc, encode_labels, read_binary_map, read_hsc, read_labels, write_binary_map,
    write_hsc, write_labels, HSC_HEADER_LEN,
};
use globalmind::raster::CHANGED;
use globalmind::synth::{spectral_angle, synth_generate, ChangeRegion, RegionShape, SynthSpec};
use globalmind::tiling::{tile_grid, tile_merge, tile_split};
use globalmind::{BinaryMap, Error, FormatError, HyperCube, LabelRaster, Tensor};
use proptest::prelude::*;

fn cube_strategy() -> impl Strategy<Value = HyperCube> {
    (1usize..7, 1usize..7, 1usize..5).prop_flat_map(|(h, w, b)| {
        proptest::collection::vec(any::<u32>(), h * w * b).prop_map(move |bits| {
            // arbitrary bit patterns, NaN payloads included
            HyperCube::new(Tensor::new(&[h, w, b], bits.into_iter().map(f32::from_bits).collect()).unwrap()).unwrap()
        })
    })
}

fn bits(c: &HyperCube) -> Vec<u32> {
    c.tensor().data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth_generate(&SynthSpec::default()).unwrap();
    write_hsc(&scene.t1, dir.path().join("a.hsc")).unwrap();
    write_labels(&scene.labels, dir.path().join("l.chl")).unwrap();
    assert_eq!(bits(&read_hsc(dir.path().join("a.hsc")).unwrap()), bits(&scene.t1));
    assert_eq!(read_labels(dir.path().join("l.chl")).unwrap(), scene.labels);
    let map = BinaryMap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
    write_binary_map(&map, dir.path().join("m.chl")).unwrap();
    assert_eq!(read_binary_map(dir.path().join("m.chl")).unwrap(), map);
}

#[test]
fn header_is_little_endian() {
    let c = HyperCube::zeros(3, 258, 2);
    let bytes = encode_hsc(&c);
    assert_eq!(&bytes[..4], b"HSC1");
    assert_eq!(&bytes[4..16], &[3, 0, 0, 0, 2, 1, 0, 0, 2, 0, 0, 0]);
    assert_eq!(bytes.len(), HSC_HEADER_LEN + 3 * 258 * 2 * 4);
}

#[test]
fn truncation_is_detected() {
    let c = HyperCube::new(Tensor::from_fn(&[5, 4, 3], |i| i as f32)).unwrap();
    let bytes = encode_hsc(&c);
    match decode_hsc(&bytes[..bytes.len() - 1]) {
        Err(Error::Format(FormatError::Truncated { expected, found })) => assert_eq!(expected, found + 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    assert!(matches!(read_hsc("/nonexistent/x.hsc"), Err(Error::Io(_))));
}

#[test]
fn null_change_scene() {
    let s = synth_generate(&SynthSpec {
        regions: vec![],
        noise_sigma: 0.0,
        ..SynthSpec::default()
    })
    .unwrap();
    assert_eq!(bits(&s.t1), bits(&s.t2));
    assert!(s.labels.data().iter().all(|&v| v == 0));
}

#[test]
fn planted_square_labels() {
    let s = synth_generate(&SynthSpec::default()).unwrap();
    assert_eq!(s.t1.dims(), (32, 24, 8));
    assert_eq!(s.labels.count(CHANGED), 64);
    assert_eq!(s.labels.labeled(), 32 * 24);
}

#[test]
fn oversized_region_is_a_config_error() {
    let spec = SynthSpec {
        regions: vec![ChangeRegion::square(25)],
        ..SynthSpec::default()
    };
    assert!(matches!(synth_generate(&spec), Err(Error::Config(_))));
}

#[test]
fn changed_pixels_differ_spectrally() {
    for seed in 0..5 {
        let s = synth_generate(&SynthSpec { seed, ..SynthSpec::default() }).unwrap();
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for r in 0..32 {
            for c in 0..24 {
                let a = spectral_angle(s.t1.spectrum(r, c), s.t2.spectrum(r, c));
                if s.labels.get(r, c) == CHANGED { inside.push(a) } else { outside.push(a) }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (mi, mo) = (mean(&inside), mean(&outside));
        let spread = (outside.iter().map(|a| (a - mo).powi(2)).sum::<f64>() / outside.len() as f64).sqrt();
        // the change must stand out from the noise-only angles by three deviations
        assert!(mi - mo > 3.0 * spread, "seed {seed}: inside {mi} outside {mo} ± {spread}");
    }
}

#[test]
fn planted_mask_matches_placed_regions() {
    let spec = SynthSpec {
        height: 20,
        width: 20,
        regions: vec![
            ChangeRegion { shape: RegionShape::Square, size: 4, origin: Some((1, 2)) },
            ChangeRegion { shape: RegionShape::Circle, size: 7, origin: Some((10, 10)) },
        ],
        noise_sigma: 0.0,
        ..SynthSpec::default()
    };
    let s = synth_generate(&spec).unwrap();
    for r in 0..20 {
        for c in 0..20 {
            let changed = s.labels.get(r, c) == CHANGED;
            let same = bits(&s.t1.crop(r, r + 1, c, c + 1)) == bits(&s.t2.crop(r, r + 1, c, c + 1));
            assert_eq!(changed, !same, "pixel ({r}, {c})");
        }
    }
    assert!((1..5).all(|r| (2..6).all(|c| s.labels.get(r, c) == CHANGED)));
}

#[test]
fn tiling_examples() {
    let g = tile_grid(600, 500, 2).unwrap();
    assert_eq!((g[0].height(), g[0].width(), g[1].height(), g[1].width()), (300, 500, 300, 500));
    let c = HyperCube::new(Tensor::from_fn(&[5, 3, 2], |i| i as f32)).unwrap();
    let tiles = tile_split(&c, 4).unwrap();
    assert_eq!(tiles.len(), 4);
    assert_eq!(tiles.iter().map(|(t, _)| t.height() * t.width()).sum::<usize>(), 15);
    assert_eq!(tiles[3].1.spectrum(0, 0), c.spectrum(2, 1));
    assert!(matches!(tile_grid(1, 5, 2), Err(Error::Input(_))));
    assert!(matches!(tile_grid(8, 8, 3), Err(Error::Usage(_))));
}

proptest! {
    #[test]
    fn hsc_round_trip_is_bit_exact(c in cube_strategy()) {
        prop_assert_eq!(bits(&decode_hsc(&encode_hsc(&c)).unwrap()), bits(&c));
    }

    #[test]
    fn label_round_trip(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let data = (0..h * w).map(|i| [0u8, 1, 255][((seed >> (i % 60)) as usize + i) % 3]).collect();
        let l = LabelRaster::new(h, w, data).unwrap();
        prop_assert_eq!(decode_labels(&encode_labels(&l)).unwrap(), l);
    }

    #[test]
    fn merge_of_split_is_identity(h in 2usize..40, w in 2usize..40, four in any::<bool>()) {
        let parts = if four { 4 } else { 2 };
        let map = BinaryMap::new(h, w, (0..h * w).map(|i| (i * 7 % 5 == 0) as u8).collect()).unwrap();
        let tiles: Vec<_> = tile_grid(h, w, parts).unwrap().into_iter().map(|t| {
            let d = (t.row0..t.row1).flat_map(|r| (t.col0..t.col1).map(move |c| (r, c))).map(|(r, c)| map.get(r, c)).collect();
            (t, BinaryMap::new(t.height(), t.width(), d).unwrap())
        }).collect();
        prop_assert_eq!(tile_merge(h, w, &tiles).unwrap(), map);
    }
}
