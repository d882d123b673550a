use ndarray::{Array3, Array4};
use rand::Rng;

use super::VideoClip;

/// Rotates every frame and the mask of `clip` by one angle drawn uniformly
/// from `[−max_degrees, max_degrees]`. Returns the clip and the angle used.
pub fn augment_rotate(clip: &VideoClip, max_degrees: f64, rng: &mut impl Rng) -> (VideoClip, f64) {
    if max_degrees <= 0.0 {
        return (clip.clone(), 0.0);
    }
    let degrees = rng.gen_range(-max_degrees..=max_degrees);
    (rotate_clip(clip, degrees), degrees)
}

/// Rotates about the frame center. Positive angles turn content from the
/// column axis towards the row axis. Frames use bilinear interpolation, the
/// mask nearest-neighbour; samples falling outside the frame read as 0.
pub fn rotate_clip(clip: &VideoClip, degrees: f64) -> VideoClip {
    if degrees == 0.0 {
        return clip.clone();
    }
    let (h, w, t, c) = clip.frames.dim();
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let mut frames = Array4::<f32>::zeros((h, w, t, c));
    let mut mask = clip.mask.as_ref().map(|_| Array3::<u8>::zeros((h, w, t)));
    for i in 0..h {
        for j in 0..w {
            // Inverse map of the output pixel center into the source frame.
            let dy = i as f64 + 0.5 - cy;
            let dx = j as f64 + 0.5 - cx;
            let sx = cos * dx + sin * dy + cx - 0.5;
            let sy = -sin * dx + cos * dy + cy - 0.5;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1.0, (1.0 - fy) * fx),
                (y0 + 1.0, x0, fy * (1.0 - fx)),
                (y0 + 1.0, x0 + 1.0, fy * fx),
            ];
            for &(yy, xx, wgt) in &taps {
                if wgt == 0.0 || yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
                    continue;
                }
                let (yy, xx) = (yy as usize, xx as usize);
                for ti in 0..t {
                    for ch in 0..c {
                        frames[[i, j, ti, ch]] += (wgt as f32) * clip.frames[[yy, xx, ti, ch]];
                    }
                }
            }
            if let (Some(out), Some(src)) = (mask.as_mut(), clip.mask.as_ref()) {
                let ny = sy.round();
                let nx = sx.round();
                if ny >= 0.0 && nx >= 0.0 && ny < h as f64 && nx < w as f64 {
                    for ti in 0..t {
                        out[[i, j, ti]] = src[[ny as usize, nx as usize, ti]];
                    }
                }
            }
        }
    }
    VideoClip { id: clip.id.clone(), frames, label: clip.label, mask, start_frame: clip.start_frame }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{ellipse_semi_axes, render_ellipse_mask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ellipse_clip(center: (f64, f64), axes: (f64, f64), orientation: f64) -> VideoClip {
        let plane = render_ellipse_mask(64, 64, center, axes, orientation);
        let mut frames = Array4::<f32>::zeros((64, 64, 2, 3));
        let mut mask = Array3::<u8>::zeros((64, 64, 2));
        for ((i, j), &v) in plane.indexed_iter() {
            for t in 0..2 {
                mask[[i, j, t]] = v;
                for ch in 0..3 {
                    frames[[i, j, t, ch]] = v as f32;
                }
            }
        }
        VideoClip { id: "e".into(), frames, label: 42.0, mask: Some(mask), start_frame: 0 }
    }

    #[test]
    fn zero_bound_is_identity() {
        let clip = ellipse_clip((30.0, 33.0), (14.0, 8.0), 0.3);
        let (out, angle) = augment_rotate(&clip, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(angle, 0.0);
        assert_eq!(out, clip);
    }

    #[test]
    fn mask_follows_analytic_rotation() {
        let center = (29.0, 35.0);
        let axes = ellipse_semi_axes(600.0, 0.6);
        let orientation = 0.4;
        let clip = ellipse_clip(center, axes, orientation);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let (out, degrees) = augment_rotate(&clip, 15.0, &mut rng);
            assert_eq!(out.label, clip.label);
            let theta = degrees.to_radians();
            let (dy, dx) = (center.0 - 32.0, center.1 - 32.0);
            let rotated_center =
                (32.0 + theta.sin() * dx + theta.cos() * dy, 32.0 + theta.cos() * dx - theta.sin() * dy);
            let oracle = render_ellipse_mask(64, 64, rotated_center, axes, orientation + theta);
            let mask = out.mask.unwrap();
            let (mut inter, mut union) = (0usize, 0usize);
            for ((i, j), &o) in oracle.indexed_iter() {
                let m = mask[[i, j, 0]];
                inter += (o & m) as usize;
                union += (o | m) as usize;
            }
            let iou = inter as f64 / union as f64;
            assert!(iou > 0.95, "iou {iou} at {degrees}°");
        }
    }
}
