mod common;

use common::*;
use dualcassi::io::*;
use dualcassi::masks::{normal_mask, template_mask};
use dualcassi::nn::{init_dmdc, NetConfig};
use dualcassi::{CassiMeasurement, Dispersion, Error, HyperspectralCube, RgbImage};
use proptest::prelude::*;
use tempfile::TempDir;

fn f32_exact(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x as f32 as f64).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cube_bytes_round_trip(nx in 1usize..9, ny in 1usize..9, bands in 2usize..7, seed in any::<u64>()) {
        let cube = HyperspectralCube::from_vec(nx, ny, bands, f32_exact(uniform_vec(nx * ny * bands, seed))).unwrap();
        let bytes = encode_cube(&cube).unwrap();
        prop_assert_eq!(&bytes[..4], b"HSC1");
        prop_assert_eq!(bytes.len(), 8 + 12 + 4 * nx * ny * bands);
        prop_assert_eq!(decode_cube(&bytes).unwrap(), cube);
    }
}

#[test]
fn every_container_round_trips_through_files() {
    let dir = TempDir::new().unwrap();
    let cube = HyperspectralCube::from_vec(3, 4, 5, f32_exact(uniform_vec(60, 1))).unwrap();
    save_cube(&cube, &dir.path().join("c.hsc")).unwrap();
    assert_eq!(load_cube(&dir.path().join("c.hsc")).unwrap(), cube);

    let rgb = RgbImage::from_vec(3, 4, f32_exact(uniform_vec(36, 2))).unwrap();
    save_rgb(&rgb, &dir.path().join("r.hsr")).unwrap();
    assert_eq!(load_rgb(&dir.path().join("r.hsr")).unwrap(), rgb);

    let meas = CassiMeasurement::zeros(3, 4, 5, Dispersion::Linear(2));
    let meas = meas.with_data(f32_exact(uniform_vec(meas.data.len(), 3)));
    save_measurement(&meas, &dir.path().join("m.hsm")).unwrap();
    assert_eq!(load_measurement(&dir.path().join("m.hsm")).unwrap(), meas);

    for mask in [template_mask(5, 6, 0.5, 4).unwrap(), normal_mask(5, 6, 5)] {
        let mask = dualcassi::CodedMask::from_vec(5, 6, f32_exact(mask.data)).unwrap();
        save_mask(&mask, &dir.path().join("k.hsk")).unwrap();
        assert_eq!(load_mask(&dir.path().join("k.hsk")).unwrap(), mask);
    }

    let mut params = init_dmdc(
        4,
        &NetConfig {
            embed_dim: 4,
            window: 2,
            ..NetConfig::default()
        },
        6,
    )
    .unwrap();
    for (_, e) in params.iter_mut() {
        e.value.data = f32_exact(e.value.data.clone());
    }
    save_params(&params, &dir.path().join("p.hsp")).unwrap();
    assert_eq!(load_params(&dir.path().join("p.hsp")).unwrap(), params);
}

#[test]
fn damaged_bytes_are_format_errors() {
    let cube = HyperspectralCube::from_vec(2, 2, 2, vec![0.5; 8]).unwrap();
    let bytes = encode_cube(&cube).unwrap();
    for cut in [0, 3, 7, 12, bytes.len() - 1] {
        assert!(
            matches!(decode_cube(&bytes[..cut]), Err(Error::Format { .. })),
            "cut at {cut}"
        );
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_cube(&bad), Err(Error::Format { .. })));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode_cube(&long), Err(Error::Format { .. })));
    // a cube container is not a mask
    assert!(matches!(decode_mask(&bytes), Err(Error::Format { .. })));
}

#[test]
fn invalid_cubes_are_not_written() {
    let single = HyperspectralCube::from_vec(2, 2, 1, vec![0.5; 4]).unwrap();
    assert!(matches!(encode_cube(&single), Err(Error::Parameter(_))));
    let negative = HyperspectralCube::from_vec(2, 2, 2, vec![-0.5; 8]).unwrap();
    assert!(matches!(encode_cube(&negative), Err(Error::Parameter(_))));
}

#[test]
fn missing_files_are_io_errors() {
    let dir = TempDir::new().unwrap();
    assert!(matches!(load_cube(&dir.path().join("none.hsc")), Err(Error::Io(_))));
}

#[test]
fn loss_trace_csv_numbers_epochs_from_one() {
    let csv = loss_csv(&[(2.0, 4e-4), (1.0, 2e-4)]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,loss,lr");
    assert!(lines[1].starts_with("1,") && lines[2].starts_with("2,"));
    assert_eq!(lines.len(), 3);
}
