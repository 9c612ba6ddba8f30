mod common;

use common::*;
use inflate3d_core::video::*;
use inflate3d_core::{Error, Tensor};
use rand::Rng;

/// Clip whose pixel values encode `(t, c, y, x)` uniquely.
fn coded_clip(t: usize, h: usize, w: usize) -> VideoClip {
    let n = t * 3 * h * w;
    let data = (0..n).map(|i| i as f32 / n as f32).collect();
    VideoClip::new(tensor(&[t, 3, h, w], data), 25.0, Some(0)).unwrap()
}

/// `(t, y, x)` of a coded value in channel 0.
fn decode(v: f32, t: usize, h: usize, w: usize) -> (usize, usize, usize) {
    let n = t * 3 * h * w;
    let i = (v as f64 * n as f64).round() as usize;
    let frame = i / (3 * h * w);
    let rest = i % (h * w);
    (frame, rest / w, rest % w)
}

fn no_resize(
    size: usize,
    crop: usize,
    flip_prob: f32,
    temporal_crop: Option<usize>,
) -> AugmentConfig {
    AugmentConfig {
        resize_short: size,
        crop,
        flip_prob,
        temporal_crop,
        seed: 0,
    }
}

#[test]
fn short_clips_loop_with_their_own_period() {
    let clip = coded_clip(3, 6, 6);
    let cfg = no_resize(6, 6, 0.0, Some(8));
    for seed in 0..10 {
        let out = augment_train(&clip, &cfg, &mut rng(seed)).unwrap();
        assert_eq!(out.len(), 8);
        let start = decode(out.frames().data()[0], 3, 6, 6).0;
        for j in 0..8 {
            assert_eq!(
                out.frame(j),
                clip.frame((start + j) % 3),
                "seed {seed} frame {j}"
            );
        }
    }
}

#[test]
fn augmentation_is_seeded() {
    let clip = coded_clip(10, 20, 30);
    let cfg = no_resize(20, 12, 0.5, Some(4));
    let a = augment_train(&clip, &cfg, &mut rng(5)).unwrap();
    let b = augment_train(&clip, &cfg, &mut rng(5)).unwrap();
    assert_eq!(a, b);
    let distinct = (0..20)
        .map(|s| augment_train(&clip, &cfg, &mut rng(s)).unwrap())
        .filter(|c| *c != a)
        .count();
    assert!(distinct >= 15);
}

#[test]
fn training_crop_is_one_window_of_the_source() {
    let (h, w) = (256, 340);
    let clip = coded_clip(2, h, w);
    let mut seen_flip = [false; 2];
    let mut r = rng(7);
    for _ in 0..12 {
        let flip_prob = if r.random_bool(0.5) { 0.0 } else { 1.0 };
        let out = augment_train(&clip, &no_resize(256, 224, flip_prob, None), &mut r).unwrap();
        assert_eq!(out.dims(), [2, 3, 224, 224]);
        let flipped = flip_prob == 1.0;
        seen_flip[flipped as usize] = true;
        // the top-left output pixel fixes the window
        let (_, y0, corner_x) = decode(out.frames().data()[0], 2, h, w);
        let x0 = if flipped { corner_x - 223 } else { corner_x };
        assert!(y0 + 224 <= h && x0 + 224 <= w);
        for t in 0..2 {
            for c in 0..3 {
                for y in 0..224 {
                    for x in 0..224 {
                        let sx = if flipped { x0 + 223 - x } else { x0 + x };
                        let want = clip.frames().data()[((t * 3 + c) * h + y0 + y) * w + sx];
                        let got = out.frames().data()[((t * 3 + c) * 224 + y) * 224 + x];
                        assert_eq!(got, want);
                    }
                }
            }
        }
    }
    assert!(seen_flip[0] && seen_flip[1]);
}

#[test]
fn evaluation_uses_the_centre_crop() {
    let (h, w) = (256, 340);
    let clip = coded_clip(2, h, w);
    let out = eval_preprocess(&clip, &no_resize(256, 224, 0.5, Some(1))).unwrap();
    assert_eq!(out.dims(), [2, 3, 224, 224]);
    assert_eq!(decode(out.frames().data()[0], 2, h, w), (0, 16, 58));
    let odd = coded_clip(1, 9, 12);
    let out = eval_preprocess(&odd, &no_resize(9, 4, 0.0, None)).unwrap();
    assert_eq!(decode(out.frames().data()[0], 1, 9, 12), (0, 2, 4));
}

#[test]
fn resizing_scales_the_short_side() {
    let clip = coded_clip(1, 20, 30);
    assert_eq!(clip.resize(20, 30).unwrap(), clip);
    let r = clip.resize_short_side(10).unwrap();
    assert_eq!(r.dims(), [1, 3, 10, 15]);
    let r = coded_clip(1, 30, 20).resize_short_side(40).unwrap();
    assert_eq!(r.dims(), [1, 3, 60, 40]);
    // corner-aligned sampling keeps the corners
    let big = clip.resize(39, 59).unwrap();
    assert_eq!(big.frames().data()[0], clip.frames().data()[0]);
    assert_eq!(
        big.frames().data()[39 * 59 - 1],
        clip.frames().data()[20 * 30 - 1]
    );
    // constant frames stay constant
    let flat = VideoClip::new(Tensor::full(vec![2, 3, 5, 7], 0.25), 10.0, None).unwrap();
    assert!(flat
        .resize(11, 3)
        .unwrap()
        .frames()
        .data()
        .iter()
        .all(|&v| (v - 0.25).abs() < 1e-6));
}

#[test]
fn subsampling_keeps_the_footprint() {
    let clip = coded_clip(125, 2, 2);
    let sub = subsample_frames(&clip, 5).unwrap();
    assert_eq!(sub.len(), 25);
    assert_eq!(sub.fps, 5.0);
    assert_eq!(sub.footprint(), clip.footprint());
    assert_eq!(sub.frame(3), clip.frame(15));
    assert!(subsample_frames(&clip, 0).is_err());
    assert_eq!(subsample_frames(&coded_clip(7, 2, 2), 3).unwrap().len(), 3);
}

#[test]
fn network_input_is_rescaled_and_channel_major() {
    let clip = coded_clip(4, 3, 5);
    let x = clip.to_network_input();
    assert_eq!(x.shape(), &[3, 4, 3, 5]);
    assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let b = batch_input(&[&clip, &clip.reversed()]).unwrap();
    assert_eq!(b.shape(), &[2, 3, 4, 3, 5]);
    assert_eq!(&b.data()[..x.len()], x.data());
}

#[test]
fn twins_are_time_reversals() {
    for task in [Task::Direction, Task::Order] {
        let clips =
            gen_synthetic_temporal(task, 20, Geometry::new(16, 32, 32), &mut rng(3)).unwrap();
        assert_eq!(clips.len(), 40);
        for pair in clips.chunks(2) {
            assert_eq!(pair[0].label, Some(0));
            assert_eq!(pair[1].label, Some(1));
            assert_eq!(pair[1].frames(), pair[0].reversed().frames());
            assert_ne!(pair[0].frames(), pair[1].frames());
            assert!(pair[0]
                .frames()
                .data()
                .iter()
                .all(|v| (0.0..=1.0).contains(v)));
        }
        let again =
            gen_synthetic_temporal(task, 20, Geometry::new(16, 32, 32), &mut rng(3)).unwrap();
        assert_eq!(again, clips);
    }
}

#[test]
fn per_pair_frame_statistics_match() {
    for task in [Task::Direction, Task::Order] {
        let clips =
            gen_synthetic_temporal(task, 25, Geometry::new(16, 32, 32), &mut rng(4)).unwrap();
        for pair in clips.chunks(2) {
            let mean = |c: &VideoClip| {
                c.frames().data().iter().map(|&v| v as f64).sum::<f64>() / c.frames().len() as f64
            };
            assert!((mean(&pair[0]) - mean(&pair[1])).abs() < 1e-3);
            let mut a: Vec<u32> = pair[0]
                .frames()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            let mut b: Vec<u32> = pair[1]
                .frames()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }
}

/// Fraction of bright pixels (the square) in one frame.
fn bright_fraction(frame: &Tensor) -> f32 {
    frame.data().iter().filter(|&&v| v >= 0.5).count() as f32 / frame.len() as f32
}

#[test]
fn a_single_frame_classifier_is_at_chance() {
    // fits the best threshold on the square's area in a randomly chosen
    // frame, then scores it on fresh clips
    let g = Geometry::new(16, 32, 32);
    let mut r = rng(5);
    for task in [Task::Order, Task::Direction] {
        let train = gen_synthetic_temporal(task, 250, g, &mut r).unwrap();
        let test = gen_synthetic_temporal(task, 500, g, &mut r).unwrap();
        let accuracy = |random_frame: bool, r: &mut rand_chacha::ChaCha8Rng| {
            let feature = |c: &VideoClip, r: &mut rand_chacha::ChaCha8Rng| {
                let f = c.frame(if random_frame {
                    r.random_range(0..c.len())
                } else {
                    0
                });
                match task {
                    Task::Order => bright_fraction(&f),
                    Task::Direction => {
                        // column of the square's left edge in channel 0
                        let w = g.width;
                        (0..w)
                            .find(|&x| (0..g.height).any(|y| f.data()[y * w + x] >= 0.5))
                            .unwrap() as f32
                    }
                }
            };
            let tf: Vec<(f32, usize)> = train
                .iter()
                .map(|c| (feature(c, r), c.label.unwrap()))
                .collect();
            let mut best = (0.0f32, 0.0f32, false);
            for &(thr, _) in &tf {
                for above_is_one in [false, true] {
                    let acc = tf
                        .iter()
                        .filter(|(v, l)| ((*v > thr) == above_is_one) == (*l == 1))
                        .count() as f32
                        / tf.len() as f32;
                    if acc > best.0 {
                        best = (acc, thr, above_is_one);
                    }
                }
            }
            let (_, thr, above) = best;
            let correct = test
                .iter()
                .filter(|c| ((feature(c, r) > thr) == above) == (c.label == Some(1)))
                .count();
            correct as f32 / test.len() as f32
        };
        let acc = accuracy(true, &mut r);
        assert!(
            (acc - 0.5).abs() <= 0.05,
            "{task:?}: single-frame accuracy {acc}"
        );
        // control: a fixed frame index does reveal the class
        let fixed = accuracy(false, &mut r);
        assert!(fixed >= 0.9, "{task:?}: fixed-frame accuracy {fixed}");
    }
}

#[test]
fn frame_directories_round_trip_at_8_bits() {
    let dir = tempfile::tempdir().unwrap();
    let clip = gen_synthetic_temporal(Task::Order, 1, Geometry::new(5, 12, 10), &mut rng(1))
        .unwrap()
        .remove(1);
    write_frames_dir(&clip, dir.path()).unwrap();
    let back = read_frames_dir(dir.path()).unwrap();
    assert_eq!(back.dims(), clip.dims());
    assert_eq!(back.label, Some(1));
    assert_eq!(back.fps, clip.fps);
    let err = back.frames().max_abs_diff(clip.frames()).unwrap();
    assert!(err <= 0.5 / 255.0 + 1e-6, "{err}");
    // a second pass is lossless
    let dir2 = tempfile::tempdir().unwrap();
    write_frames_dir(&back, dir2.path()).unwrap();
    assert_eq!(read_frames_dir(dir2.path()).unwrap(), back);
}

#[test]
fn frame_directory_errors() {
    let clip = coded_clip(3, 4, 4);
    let is_format = |e: &Error| matches!(e, Error::Format { .. } | Error::Io { .. }) && e.is_io();

    let empty = tempfile::tempdir().unwrap();
    let e = read_frames_dir(empty.path()).unwrap_err();
    assert!(is_format(&e) && e.to_string().contains("no frame"), "{e}");

    let gap = tempfile::tempdir().unwrap();
    write_frames_dir(&clip, gap.path()).unwrap();
    std::fs::remove_file(gap.path().join(frame_name(1))).unwrap();
    let e = read_frames_dir(gap.path()).unwrap_err();
    assert!(
        is_format(&e) && e.to_string().contains("frame_000001.ppm"),
        "{e}"
    );

    let no_meta = tempfile::tempdir().unwrap();
    write_frames_dir(&clip, no_meta.path()).unwrap();
    std::fs::remove_file(no_meta.path().join("meta.txt")).unwrap();
    let e = read_frames_dir(no_meta.path()).unwrap_err();
    assert!(is_format(&e) && e.to_string().contains("meta.txt"), "{e}");

    let gray = tempfile::tempdir().unwrap();
    write_frames_dir(&clip, gray.path()).unwrap();
    write_pgm(gray.path().join(frame_name(2)), &Tensor::zeros(vec![4, 4])).unwrap();
    let e = read_frames_dir(gray.path()).unwrap_err();
    assert!(is_format(&e) && e.to_string().contains("P6"), "{e}");

    let sizes = tempfile::tempdir().unwrap();
    write_frames_dir(&clip, sizes.path()).unwrap();
    write_ppm(
        sizes.path().join(frame_name(2)),
        &Tensor::zeros(vec![3, 5, 4]),
    )
    .unwrap();
    let e = read_frames_dir(sizes.path()).unwrap_err();
    assert!(is_format(&e) && e.to_string().contains("differs"), "{e}");
}

#[test]
fn pnm_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = tensor(&[3, 2, 2], (0..12).map(|i| i as f32 / 11.0).collect());
    let p = dir.path().join("a.ppm");
    write_ppm(&p, &img).unwrap();
    let back = read_pnm(&p).unwrap();
    assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-6);
    let p = dir.path().join("c.pgm");
    std::fs::write(&p, b"P5\n# comment\n2 1\n100\n\x00\x64").unwrap();
    assert_eq!(read_pnm(&p).unwrap().data(), &[0.0, 1.0]);
    std::fs::write(&p, b"P3\n1 1\n255\n0 0 0").unwrap();
    assert!(read_pnm(&p).unwrap_err().is_io());
}
