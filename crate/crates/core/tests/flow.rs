mod common;

use common::{central_region, circular_shift, parse_flo, tensor, texture};
use inflate3d_core::flow::{
    flo_from_bytes, flo_to_bytes, flow_stack, read_flo, tvl1, tvl1_with_energy, write_flo,
    FlowField, TvL1Params,
};
use std::path::Path;

const SIZE: usize = 64;

fn pair(dx: isize, dy: isize, seed: u64) -> (inflate3d_core::Tensor, inflate3d_core::Tensor) {
    let a = texture(SIZE, SIZE, seed);
    let b = circular_shift(&a, SIZE, SIZE, dx, dy);
    (tensor(&[SIZE, SIZE], a), tensor(&[SIZE, SIZE], b))
}

fn mean_epe(f: &FlowField, dx: f32, dy: f32) -> f32 {
    let idx: Vec<usize> = central_region(f.height, f.width, 0.8).collect();
    idx.iter()
        .map(|&i| ((f.u[i] - dx).powi(2) + (f.v[i] - dy).powi(2)).sqrt())
        .sum::<f32>()
        / idx.len() as f32
}

#[test]
fn integer_translations_are_recovered() {
    for (dx, dy) in [(2, 0), (-2, 0), (0, 2), (1, 0), (-1, 1), (0, -1), (2, -2)] {
        let (a, b) = pair(dx, dy, 7);
        let r = tvl1_with_energy(&a, &b, &TvL1Params::default()).unwrap();
        let epe = mean_epe(&r.flow, dx as f32, dy as f32);
        println!("shift ({dx},{dy}) epe {epe:.4} energies {:?}", r.energies);
        assert!(epe < 0.5, "shift ({dx},{dy}): epe {epe}");
        assert!(r.energies.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn identical_frames_give_zero_flow() {
    let (a, _) = pair(0, 0, 3);
    let f = tvl1(&a, &a, &TvL1Params::default()).unwrap();
    assert!(f.max_abs() < 1e-3);
}

#[test]
fn flow_is_roughly_antisymmetric() {
    let (a, b) = pair(2, -1, 11);
    let p = TvL1Params::default();
    let f = tvl1(&a, &b, &p).unwrap();
    let g = tvl1(&b, &a, &p).unwrap();
    let idx: Vec<usize> = central_region(SIZE, SIZE, 0.8).collect();
    let err: f32 = idx
        .iter()
        .map(|&i| ((f.u[i] + g.u[i]).powi(2) + (f.v[i] + g.v[i]).powi(2)).sqrt())
        .sum::<f32>()
        / idx.len() as f32;
    assert!(err < 0.75, "antisymmetry error {err}");
}

#[test]
fn nonfinite_pixels_are_rejected() {
    let (mut a, b) = pair(1, 0, 1);
    a.data_mut()[5] = f32::NAN;
    assert!(tvl1(&a, &b, &TvL1Params::default()).is_err());
}

#[test]
fn flow_stack_interleaves_and_rescales() {
    let p = TvL1Params::default();
    let a = texture(32, 32, 5);
    let frames: Vec<_> = (0..3)
        .map(|k| tensor(&[32, 32], circular_shift(&a, 32, 32, k, 0)))
        .collect();
    let s = flow_stack(&frames, &p).unwrap();
    assert_eq!(s.shape(), &[4, 32, 32]);
    let f = tvl1(&frames[0], &frames[1], &p).unwrap();
    assert_eq!(
        s.data()[..32 * 32],
        f.u.iter().map(|x| x / p.clamp).collect::<Vec<_>>()[..]
    );
    assert!(s.data().iter().all(|x| x.abs() <= 1.0));

    let still = vec![frames[0].clone(); 11];
    let s = flow_stack(&still, &p).unwrap();
    assert_eq!(s.shape()[0], 20);
    assert!(s.max_abs() < 1e-3 / p.clamp);
}

#[test]
fn flo_files_match_an_independent_parser() {
    let mut f = FlowField::zeros(3, 2);
    for i in 0..6 {
        f.u[i] = i as f32 * 0.5 - 1.0;
        f.v[i] = -(i as f32) * 0.25;
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.flo");
    write_flo(&path, &f).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let (w, h, pairs) = parse_flo(&bytes);
    assert_eq!((w, h), (3, 2));
    for (i, (u, v)) in pairs.into_iter().enumerate() {
        assert_eq!((u, v), (f.u[i], f.v[i]));
    }
    assert_eq!(read_flo(&path).unwrap(), f);
    assert_eq!(
        flo_from_bytes(&flo_to_bytes(&f), Path::new("m")).unwrap(),
        f
    );
    assert!(read_flo(dir.path().join("missing.flo"))
        .unwrap_err()
        .is_io());
}
