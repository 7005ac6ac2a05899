//! Anti-aliased rasterization of the entity shapes. Coverage ramps linearly
//! over one pixel of signed distance, so sub-pixel motion changes pixels
//! smoothly.

use crate::DataConfig;

const BACKGROUND: f64 = 0.08;

/// Fill colors, one per entity slot.
const COLORS: [[f64; 3]; 4] = [
    [0.95, 0.25, 0.20],
    [0.20, 0.45, 0.95],
    [0.25, 0.90, 0.35],
    [0.95, 0.85, 0.25],
];

enum Shape {
    Circle { r: f64 },
    Square { half: f64 },
    Diamond { half: f64 },
    Ring { r: f64, width: f64 },
}

impl Shape {
    fn for_entity(e: usize, scale: f64) -> Shape {
        match e {
            0 => Shape::Circle { r: 0.070 * scale },
            1 => Shape::Square { half: 0.060 * scale },
            2 => Shape::Diamond { half: 0.078 * scale },
            _ => Shape::Ring {
                r: 0.065 * scale,
                width: 0.024 * scale,
            },
        }
    }

    /// Signed distance in pixels; negative inside.
    fn sdf(&self, dx: f64, dy: f64) -> f64 {
        match *self {
            Shape::Circle { r } => (dx * dx + dy * dy).sqrt() - r,
            Shape::Square { half } => dx.abs().max(dy.abs()) - half,
            Shape::Diamond { half } => (dx.abs() + dy.abs() - half) / std::f64::consts::SQRT_2,
            Shape::Ring { r, width } => ((dx * dx + dy * dy).sqrt() - r).abs() - width,
        }
    }

    /// Conservative pixel radius of the support, for the bounding box.
    fn extent(&self) -> f64 {
        match *self {
            Shape::Circle { r } => r,
            Shape::Square { half } => half * std::f64::consts::SQRT_2,
            Shape::Diamond { half } => half,
            Shape::Ring { r, width } => r + width,
        }
    }
}

/// Rasterizes one frame from entity centers (unit coordinates, flattened
/// [entities, 2]) into an [H, W, 3] buffer in [0, 1].
pub fn render_frame(cfg: &DataConfig, centers: &[f64]) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let scale = h.min(w) as f64;
    let mut img = vec![BACKGROUND; h * w * 3];
    for (e, c) in centers.chunks_exact(2).enumerate() {
        let shape = Shape::for_entity(e, scale);
        let color = COLORS[e % COLORS.len()];
        let cx = c[0] * w as f64;
        let cy = c[1] * h as f64;
        let reach = shape.extent() + 1.0;
        let y0 = ((cy - reach).floor().max(0.0)) as usize;
        let y1 = ((cy + reach).ceil().min(h as f64)) as usize;
        let x0 = ((cx - reach).floor().max(0.0)) as usize;
        let x1 = ((cx + reach).ceil().min(w as f64)) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let dx = (x as f64 + 0.5) - cx;
                let dy = (y as f64 + 0.5) - cy;
                let coverage = (0.5 - shape.sdf(dx, dy)).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let px = (y * w + x) * 3;
                    for ch in 0..3 {
                        img[px + ch] = img[px + ch] * (1.0 - coverage) + color[ch] * coverage;
                    }
                }
            }
        }
    }
    img
}
