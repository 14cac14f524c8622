use std::path::Path;

use fbnet_core::data::{synthetic_sample, SyntheticSpec};
use fbnet_core::export::*;
use fbnet_core::model::{Model, ModelConfig, Strategy};
use fbnet_core::Error;

#[test]
fn pgm_round_trip() {
    let map = GreyMap::normalised(&[0.0, 0.5, 1.0, 0.25, 0.75, 1.0], 2, 3);
    assert_eq!(map.pixels, vec![0, 128, 255, 64, 191, 255]);
    let bytes = encode_pgm(&map);
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(bytes.len(), 11 + 6);
    assert_eq!(decode_pgm(&bytes, Path::new("m.pgm")).unwrap(), map);
}

#[test]
fn constant_map_is_black() {
    assert_eq!(GreyMap::normalised(&[0.3; 4], 2, 2).pixels, vec![0; 4]);
}

#[test]
fn damaged_pgm_is_rejected() {
    let good = encode_pgm(&GreyMap::normalised(&[0.0, 1.0], 1, 2));
    let path = Path::new("x.pgm");
    let mut wrong_magic = good.clone();
    wrong_magic[1] = b'6';
    let mut short = good.clone();
    short.pop();
    let mut long = good.clone();
    long.push(0);
    for bytes in [wrong_magic, short, long, b"P5\n2".to_vec(), b"P5\n1 1\n65535\n\0\0".to_vec()] {
        assert!(matches!(decode_pgm(&bytes, path), Err(Error::Format { .. })));
    }
}

#[test]
fn spatial_maps_are_half_the_channel_maps() {
    let model = Model::<f32>::new(&ModelConfig::toy(), 3).unwrap();
    let spec = SyntheticSpec {
        height: 64,
        width: 80,
        ..SyntheticSpec::default()
    };
    let sample = synthetic_sample(&spec, 0);
    let export = attention_maps(&model, &sample, 64, 4).unwrap();
    assert_eq!(export.cam.len(), 4);
    assert_eq!(export.sam.len(), 5);
    for (_, c) in &export.cam {
        assert_eq!((c.height, c.width), (16, 20));
        for (_, s) in &export.sam {
            assert_eq!((2 * s.height, 2 * s.width), (c.height, c.width));
        }
    }
    assert_eq!((export.prediction.height, export.prediction.width), (16, 20));

    let dir = tempfile::tempdir().unwrap();
    let written = write_attention(dir.path(), &export).unwrap();
    assert_eq!(written.len(), 2 + 4 + 5);
    for path in written.iter().filter(|p| p.extension().unwrap() == "pgm") {
        let map = decode_pgm(&std::fs::read(path).unwrap(), path).unwrap();
        assert!(map.height > 0 && map.width > 0);
    }
    let ppm = std::fs::read(dir.path().join("input.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n80 64\n255\n"));
    assert_eq!(ppm.len(), 13 + 3 * 64 * 80);
}

#[test]
fn strategies_without_a_module_export_nothing_for_it() {
    let sample = synthetic_sample(&SyntheticSpec::default(), 1);
    let cam_only = ModelConfig {
        strategy: Strategy::Cam,
        ..ModelConfig::toy()
    };
    let export = attention_maps(&Model::<f32>::new(&cam_only, 0).unwrap(), &sample, 64, 3).unwrap();
    assert!(export.sam.is_empty());
    assert_eq!(export.cam.len(), 3);
    let ff = ModelConfig {
        strategy: Strategy::FeatureFusion,
        ..ModelConfig::toy()
    };
    let export = attention_maps(&Model::<f32>::new(&ff, 0).unwrap(), &sample, 64, 3).unwrap();
    assert!(export.sam.is_empty() && export.cam.is_empty());
}

#[test]
fn queries_stay_inside_the_grid() {
    for (h, w) in [(1, 1), (2, 3), (8, 8), (5, 9)] {
        let q = default_queries(h, w);
        assert!(!q.is_empty());
        assert!(q.iter().all(|&(y, x)| y < h && x < w));
    }
    assert_eq!(default_queries(8, 8).len(), 5);
}
