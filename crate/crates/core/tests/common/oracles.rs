//! Independent reference computations: brute-force prototypes, hand-counted
//! IoU, and finite differences of the Grad-CAM score path.

use ldag_core::attributes::{AttributeSet, Provenance};
use ldag_core::autodiff::Precision;
use ldag_core::image::Mask;
use ldag_core::maa::map_prototypes;
use ldag_core::mae::{GradCam, SoftmaxScope};
use ldag_core::metrics::iou;
use ldag_core::providers::{ClipEncoding, SamEncoding, TextEmbedding, TextRole};
use ldag_core::rng::SplitMix64;
use ldag_core::tensor::{FeatureGrid, Source, Tensor};

/// Largest prototype deviation from per-pixel accumulation over `cases` random grids.
pub fn prototype_cases(cases: usize, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    let mut done = 0;
    while done < cases {
        let c = 1 + (rng.next_u64() % 6) as usize + 1;
        let h = 1 + (rng.next_u64() % 8) as usize;
        let w = 1 + (rng.next_u64() % 8) as usize;
        // either a mask at feature resolution or one 8x larger
        let factor = if rng.next_u64() % 2 == 0 { 1 } else { 8 };
        let (mh, mw) = (h * factor, w * factor);
        let mask_bits: Vec<u8> = (0..mh * mw).map(|_| u8::from(rng.next_f64() < 0.4)).collect();
        let feats: Vec<f32> = (0..c * h * w).map(|_| rng.next_gaussian() as f32).collect();

        let mut fg = vec![0.0f64; c];
        let mut bg = vec![0.0f64; c];
        let (mut nf, mut nb) = (0usize, 0usize);
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = (y * factor + factor / 2, x * factor + factor / 2);
                let on = mask_bits[sy * mw + sx] == 1;
                if on {
                    nf += 1;
                } else {
                    nb += 1;
                }
                for ch in 0..c {
                    let v = f64::from(feats[(ch * h + y) * w + x]);
                    if on {
                        fg[ch] += v;
                    } else {
                        bg[ch] += v;
                    }
                }
            }
        }
        let sam = SamEncoding {
            features: FeatureGrid::new(Tensor::new(vec![c, h, w], feats).unwrap(), Source::Toy).unwrap(),
        };
        let mask = Mask::new(mw, mh, mask_bits).unwrap();
        let got = map_prototypes(&sam, &mask);
        if nf == 0 || nb == 0 {
            assert!(got.is_err(), "single-class mask must be rejected");
            continue;
        }
        let got = got.unwrap();
        assert_eq!((got.fg_pixel_count, got.bg_pixel_count), (nf, nb));
        for ch in 0..c {
            worst = worst.max((f64::from(got.foreground.data()[ch]) - fg[ch] / nf as f64).abs());
            worst = worst.max((f64::from(got.background.data()[ch]) - bg[ch] / nb as f64).abs());
        }
        done += 1;
    }
    worst
}

fn mask(rows: &[&str]) -> Mask {
    let h = rows.len();
    let w = rows[0].len();
    let data = rows.iter().flat_map(|r| r.bytes().map(|b| u8::from(b == b'#'))).collect();
    Mask::new(w, h, data).unwrap()
}

/// `(pred, gt, intersection, union)` counted by hand.
#[rustfmt::skip]
pub fn crafted_iou_pairs() -> Vec<(Mask, Mask, usize, usize)> {
    vec![
        (mask(&["##..", "##..", "....", "...."]), mask(&["##..", "##..", "....", "...."]), 4, 4),
        (mask(&["##..", "##..", "....", "...."]), mask(&["....", "....", "..##", "..##"]), 0, 8),
        (mask(&["##..", "##..", "....", "...."]), mask(&[".##.", ".##.", "....", "...."]), 2, 6),
        (mask(&["....", "....", "....", "...."]), mask(&["....", "....", "....", "...."]), 0, 0),
        (mask(&["#...", "....", "....", "...."]), mask(&["....", "....", "....", "...."]), 0, 1),
        (mask(&["####", "####", "####", "####"]), mask(&["#...", "....", "....", "...."]), 1, 16),
        (mask(&["####", "####", "####", "####"]), mask(&["####", "####", "####", "####"]), 16, 16),
        (mask(&["#.#.", ".#.#", "#.#.", ".#.#"]), mask(&[".#.#", "#.#.", ".#.#", "#.#."]), 0, 16),
        (mask(&["#.#.", ".#.#", "#.#.", ".#.#"]), mask(&["####", "....", "....", "...."]), 2, 10),
        (mask(&["###.", "###.", "###.", "...."]), mask(&[".###", ".###", ".###", "...."]), 6, 12),
        (mask(&["###.", "###.", "###.", "...."]), mask(&["....", ".###", ".###", ".###"]), 4, 14),
        (mask(&["#...", ".#..", "..#.", "...#"]), mask(&["#...", "....", "....", "...#"]), 2, 4),
        (mask(&["##", "##"]), mask(&["#.", ".."]), 1, 4),
        (mask(&["#.", ".#"]), mask(&[".#", "#."]), 0, 4),
        (mask(&["###", "#.#", "###"]), mask(&["...", ".#.", "..."]), 0, 9),
        (mask(&["###", "#.#", "###"]), mask(&["###", "###", "###"]), 8, 9),
        (mask(&["#....", "#....", "#....", "#...."]), mask(&["####.", ".....", ".....", "....."]), 1, 7),
        (mask(&["..#..", ".###.", "#####"]), mask(&[".....", ".###.", "....."]), 3, 9),
        (mask(&["..#..", ".###.", "#####"]), mask(&["#####", ".###.", "..#.."]), 5, 13),
        (mask(&["##....", "##....", "....##", "....##"]), mask(&["###...", "###...", "...###", "...###"]), 8, 12),
    ]
}

/// `(pairs checked, pairs where iou disagrees with the hand count)`.
pub fn iou_cases() -> (usize, usize) {
    let pairs = crafted_iou_pairs();
    let wrong = pairs
        .iter()
        .filter(|(p, g, inter, union)| {
            let expected = if *union == 0 { 1.0 } else { *inter as f64 / *union as f64 };
            iou(p, g).unwrap() != expected || iou(g, p).unwrap() != expected
        })
        .count();
    (pairs.len(), wrong)
}

fn text(v: &[f64], role: TextRole) -> TextEmbedding {
    TextEmbedding {
        vector: Tensor::from_f64(vec![v.len()], v).unwrap(),
        prompt: "p".into(),
        role,
        source: Source::Imported,
    }
}

fn clip_from(values: Vec<f32>) -> ClipEncoding {
    let t = Tensor::new(vec![2, 2, 2], values).unwrap();
    ClipEncoding::from_tokens(FeatureGrid::new(t, Source::Imported).unwrap()).unwrap()
}

/// Worst `|analytic - numeric| / (1e-8 + 1e-4 |numeric|)` of the 32-bit token
/// gradient against central differences of the softmaxed score on 2-channel
/// 2x2 grids; `<= 1` passes.
pub fn gradcam_fd_ratio(cases: usize, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let tokens: Vec<f32> = (0..8).map(|_| rng.next_gaussian() as f32 + 0.3).collect();
        let unit = |rng: &mut SplitMix64| {
            let v = [rng.next_gaussian(), rng.next_gaussian()];
            let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
            [v[0] / n, v[1] / n]
        };
        let attrs = AttributeSet::from_embeddings(
            "c",
            vec![text(&unit(&mut rng), TextRole::ForegroundAttribute)],
            text(&unit(&mut rng), TextRole::ForegroundTemplate),
            text(&unit(&mut rng), TextRole::Background),
            Provenance::FixtureFile("oracle".into()),
        )
        .unwrap();
        let scope = if case % 2 == 0 { SoftmaxScope::Pairwise } else { SoftmaxScope::Joint };
        let tau = [1.0, 0.5, 2.0][case % 3];
        let cam = GradCam::with_precision(&clip_from(tokens.clone()), &attrs, tau, scope, Precision::F32).unwrap();
        for i in 0..cam.len() {
            let analytic = cam.token_gradient(i).unwrap();
            for k in 0..8 {
                let probe = |delta: f32| {
                    let mut t = tokens.clone();
                    t[k] += delta;
                    let cam = GradCam::with_precision(&clip_from(t.clone()), &attrs, tau, scope, Precision::F64).unwrap();
                    (cam.scores().softmaxed[i].0, f64::from(t[k]))
                };
                let (up, xu) = probe(1e-3);
                let (down, xd) = probe(-1e-3);
                let numeric = (up - down) / (xu - xd);
                let ratio = (analytic[k] - numeric).abs() / (1e-8 + 1e-4 * numeric.abs());
                worst = worst.max(ratio);
            }
        }
    }
    worst
}
