//! Glyph templates for the two panel families and the overlap-mode palette.
//!
//! The core family (labels) and the spurious family (attributes) are visually
//! disjoint so a nearest-template classifier separates both perfectly at zero
//! noise; the data module tests pin that property.

/// Largest supported class count; each family ships this many templates.
pub const MAX_CLASSES: usize = 6;

/// Core-family template (filled disk, hollow square, X-cross, horizontal
/// stripes, plus, lower triangle) on a `p x p` grid with values in {0, 1}.
pub fn core_template(class: usize, p: usize) -> Vec<f32> {
    assert!(class < MAX_CLASSES);
    let mut t = vec![0.0f32; p * p];
    let c = (p as f32 - 1.0) / 2.0;
    let m = p / 5;
    for i in 0..p {
        for j in 0..p {
            let on = match class {
                0 => {
                    let (di, dj) = (i as f32 - c, j as f32 - c);
                    di * di + dj * dj <= (0.32 * p as f32).powi(2)
                }
                1 => {
                    let inside = i >= m && i < p - m && j >= m && j < p - m;
                    let band = i < m + 2 || i >= p - m - 2 || j < m + 2 || j >= p - m - 2;
                    inside && band
                }
                2 => i.abs_diff(j) <= 1 || (i + j).abs_diff(p - 1) <= 1,
                3 => i >= 2 && i < p - 2 && ((i - 2) / 2) % 2 == 0,
                4 => {
                    let c0 = p / 2 - 1;
                    let inside = |v: usize| v >= m && v < p - m;
                    (i >= c0 && i < c0 + 2 && inside(j)) || (j >= c0 && j < c0 + 2 && inside(i))
                }
                _ => i >= j,
            };
            if on {
                t[i * p + j] = 1.0;
            }
        }
    }
    t
}

/// Spurious-family template (one bar, two bars, three bars, checker,
/// diagonal stripes, border ring) on a `p x p` grid with values in {0, 1}.
pub fn spurious_template(attr: usize, p: usize) -> Vec<f32> {
    assert!(attr < MAX_CLASSES);
    let mut t = vec![0.0f32; p * p];
    let block = (p / 4).max(2);
    let in_bar = |j: usize, start: usize| j >= start && j < start + 2;
    for i in 0..p {
        for j in 0..p {
            let tall = i >= 2 && i < p - 2;
            let on = match attr {
                0 => tall && in_bar(j, p / 2 - 1),
                1 => tall && (in_bar(j, p / 4 - 1) || in_bar(j, 3 * p / 4 - 1)),
                2 => tall && (in_bar(j, p / 6) || in_bar(j, p / 2 - 1) || in_bar(j, p - p / 6 - 2)),
                3 => (i / block + j / block) % 2 == 0,
                4 => ((i + j) / 4) % 2 == 0,
                _ => i < 2 || i >= p - 2 || j < 2 || j >= p - 2,
            };
            if on {
                t[i * p + j] = 1.0;
            }
        }
    }
    t
}

/// Overlap-mode tint for each spurious attribute. Every color has at least
/// one unit component, so the shape field is recoverable as the per-pixel
/// channel maximum.
pub fn overlap_color(attr: usize) -> [f32; 3] {
    const COLORS: [[f32; 3]; MAX_CLASSES] = [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
    ];
    COLORS[attr]
}
