//! Image sizing and visual-token accounting.

use serde::{Deserialize, Serialize};

/// Pixel-count window an image must fall into before it enters policy context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PixelBounds {
    pub min_pixels: u64,
    pub max_pixels: u64,
    /// Output dimensions of a rescaled image are multiples of this.
    pub factor: u32,
}

impl Default for PixelBounds {
    fn default() -> Self {
        Self {
            min_pixels: 3136,
            max_pixels: 2_000_000,
            factor: 28,
        }
    }
}

impl PixelBounds {
    pub fn contains(&self, w: u32, h: u32) -> bool {
        let area = w as u64 * h as u64;
        (self.min_pixels..=self.max_pixels).contains(&area)
    }
}

// Candidates are ranked by aspect error in buckets of this width, then by
// distance to the violated bound.
const ASPECT_BUCKET: f64 = 0.02;

/// Brings `w × h` inside `bounds`.
///
/// In-bounds sizes are returned unchanged. Otherwise both sides are scaled by
/// `sqrt(target / (w·h))`, where `target` is the violated bound, and snapped to
/// multiples of `bounds.factor` (never below one factor). Snapping searches
/// the multiples around the scaled short side and keeps the in-bounds pair
/// with the best aspect ratio, so the result always satisfies the bounds.
pub fn resize_to_bounds(w: u32, h: u32, bounds: PixelBounds) -> (u32, u32) {
    let (w, h) = (w.max(1), h.max(1));
    if bounds.contains(w, h) {
        return (w, h);
    }
    let area = w as f64 * h as f64;
    let target = if (area as u64) < bounds.min_pixels {
        bounds.min_pixels
    } else {
        bounds.max_pixels
    } as f64;
    let scale = (target / area).sqrt();
    let f = bounds.factor.max(1) as f64;

    let w_is_short = w <= h;
    let (short, long) = if w_is_short { (w, h) } else { (h, w) };
    let ratio = long as f64 / short as f64;
    let base = ((short as f64 * scale) / f).floor() as i64;

    let orient = |s: u32, l: u32| if w_is_short { (s, l) } else { (l, s) };
    let mut best: Option<((u64, f64), (u32, u32))> = None;
    for k in (base - 2).max(1)..=base + 8 {
        let short_px = k as f64 * f;
        let long_ideal = short_px * ratio;
        let lo = (long_ideal / f).floor().max(1.0);
        for m in [lo, lo + 1.0] {
            let long_px = m * f;
            let (cw, ch) = orient(short_px as u32, long_px as u32);
            if !bounds.contains(cw, ch) {
                continue;
            }
            let aspect_err = ((long_px / short_px) / ratio - 1.0).abs();
            let area_err = ((long_px * short_px) - target).abs() / target;
            let key = ((aspect_err / ASPECT_BUCKET).floor() as u64, area_err);
            let better = match &best {
                None => true,
                Some((bk, _)) => key.0 < bk.0 || (key.0 == bk.0 && key.1 < bk.1),
            };
            if better {
                best = Some((key, (cw, ch)));
            }
        }
    }
    if let Some((_, dims)) = best {
        return dims;
    }

    // Aspect ratios too extreme for any snapped pair: pin the short side to
    // one factor and clamp the long side into the window.
    let fu = bounds.factor.max(1) as u64;
    let m_lo = bounds.min_pixels.div_ceil(fu * fu).max(1);
    let m_hi = (bounds.max_pixels / (fu * fu)).max(m_lo);
    let m = (ratio.round() as u64).clamp(m_lo, m_hi);
    orient(fu as u32, (m * fu) as u32)
}

/// Visual tokens for a `w × h` image: patch grid divided by the merge window, at least one.
pub fn estimate_visual_tokens(w: u32, h: u32, patch: u32, merge: u32) -> u64 {
    let patch = patch.max(1) as u64;
    let grid = (w.max(1) as u64).div_ceil(patch) * (h.max(1) as u64).div_ceil(patch);
    let window = (merge.max(1) as u64).pow(2);
    grid.div_ceil(window).max(1)
}

/// Proportionally shrinks so the long edge is at most `max_edge`.
pub fn cap_long_edge(w: u32, h: u32, max_edge: u32) -> (u32, u32) {
    let long = w.max(h);
    if long <= max_edge || max_edge == 0 {
        return (w, h);
    }
    let s = max_edge as f64 / long as f64;
    let shrink = |d: u32| ((d as f64 * s).round() as u32).clamp(1, max_edge);
    (shrink(w), shrink(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn in_bounds_identity() {
        assert_eq!(resize_to_bounds(800, 600, PixelBounds::default()), (800, 600));
    }

    #[test]
    fn large_image_shrinks_under_max() {
        // s = sqrt(2e6 / 12e6) ≈ 0.408 gives ≈ 1633 × 1225 before snapping.
        let (w, h) = resize_to_bounds(4000, 3000, PixelBounds::default());
        assert!(w as u64 * h as u64 <= 2_000_000);
        assert!((w as f64 / h as f64 - 4.0 / 3.0).abs() <= 0.1);
        assert_eq!((w % 28, h % 28), (0, 0));
        // 1204 = 43·28 and 1624 = 58·28; 1624·1204 = 1,955,296
        assert_eq!((w, h), (1624, 1204));
    }

    #[test]
    fn tiny_image_grows_to_min() {
        // s = sqrt(3136 / 784) = 2
        assert_eq!(resize_to_bounds(28, 28, PixelBounds::default()), (56, 56));
    }

    #[test]
    fn thin_strip_keeps_aspect() {
        let (w, h) = resize_to_bounds(8000, 251, PixelBounds::default());
        assert!(PixelBounds::default().contains(w, h));
        let err = ((w as f64 / h as f64) / (8000.0 / 251.0) - 1.0).abs();
        assert!(err < 0.02, "{w}x{h}");
    }

    #[test]
    fn infeasible_aspect_still_in_bounds() {
        let (w, h) = resize_to_bounds(1, 3000, PixelBounds::default());
        assert!(PixelBounds::default().contains(w, h));
        assert_eq!(w, 28);
    }

    #[test]
    fn token_estimates() {
        assert_eq!(estimate_visual_tokens(28, 28, 28, 2), 1);
        assert_eq!(estimate_visual_tokens(448, 448, 28, 2), 64);
        assert_eq!(estimate_visual_tokens(1, 1, 28, 2), 1);
        assert_eq!(estimate_visual_tokens(29, 28, 28, 2), 1);
        assert_eq!(estimate_visual_tokens(800, 600, 28, 2), 29 * 22 / 4 + 1);
    }

    #[test]
    fn cap_edges() {
        assert_eq!(cap_long_edge(640, 480, 1024), (640, 480));
        assert_eq!(cap_long_edge(4096, 1024, 1024), (1024, 256));
        assert_eq!(cap_long_edge(10, 5000, 1024), (2, 1024));
    }

    proptest! {
        #[test]
        fn output_always_in_bounds(w in 1u32..=8000, h in 1u32..=8000) {
            let (rw, rh) = resize_to_bounds(w, h, PixelBounds::default());
            prop_assert!(PixelBounds::default().contains(rw, rh));
        }
    }
}
