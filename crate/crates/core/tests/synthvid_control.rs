use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use timeeq::evalkit::{linear_probe, FeatureBank, ProbeConfig};
use timeeq::synthvid::{generate_dataset, GenerateConfig, VideoSet};

/// 8x8 average-pooled pixels of single frames, several frames per video.
fn frame_features(set: &VideoSet, idx: &[usize], frames_per_video: usize, rng: &mut ChaCha8Rng) -> (Array2<f64>, Vec<u16>) {
    let pool = set.h / 8;
    let dim = 8 * 8 * set.c;
    let mut x = Array2::zeros((idx.len() * frames_per_video, dim));
    let mut y = Vec::new();
    let mut row = 0;
    for &v in idx {
        let video = set.video(v);
        let frames = video.frames();
        let mut order: Vec<usize> = (0..set.t).collect();
        order.shuffle(rng);
        for &f in &order[..frames_per_video] {
            for by in 0..8 {
                for bx in 0..8 {
                    for c in 0..set.c {
                        let mut s = 0.0;
                        for yy in by * pool..(by + 1) * pool {
                            for xx in bx * pool..(bx + 1) * pool {
                                s += frames[[f, yy, xx, c]] as f64;
                            }
                        }
                        x[[row, (by * 8 + bx) * set.c + c]] = s / (pool * pool) as f64;
                    }
                }
            }
            y.push(set.labels[v]);
            row += 1;
        }
    }
    (x, y)
}

#[test]
fn shuffled_single_frames_carry_no_class_information() {
    let set = generate_dataset(&GenerateConfig {
        n_per_class: 100,
        frames: 48,
        seed: 21,
        ..GenerateConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut videos: Vec<usize> = (0..set.len()).collect();
    videos.shuffle(&mut rng);
    let (train_idx, test_idx) = videos.split_at(600);
    let (xtr, ytr) = frame_features(&set, train_idx, 4, &mut rng);
    let (xte, yte) = frame_features(&set, test_idx, 4, &mut rng);
    let train = FeatureBank::fit(&xtr, ytr).unwrap();
    let test = FeatureBank::with_stats(&xte, yte, train.stats.clone()).unwrap();
    let acc = linear_probe(&train, &test, &ProbeConfig::default()).unwrap();
    assert!((acc - 0.125).abs() <= 0.05, "per-frame accuracy {acc}");
    // the frames themselves are far from uniform, so the probe had something to fit
    assert!(xtr.std(0.0) > 0.05);
}
