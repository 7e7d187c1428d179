//! Event-frame similarity measures.
//!
//! * [`mss`]: one minus the mean squared cell difference.
//! * [`esim`]: intersection over union of signed events.
//! * [`region_esim`]: esim after polarizing both frames with an `n x n`
//!   polarity-intensity window, which tolerates isolated noise and small
//!   shifts.

use crate::error::{Error, Result};
use crate::events::{EventFrame, Geometry};

/// Threshold that maps a polarity intensity of exactly 1/4 to zero.
pub const DEFAULT_POLARITY_THRESHOLD: f64 = 0.2501;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Mss,
    Esim,
    /// Region esim over an `n x n` window.
    EsimN(usize),
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricKind::Mss => write!(f, "mss"),
            MetricKind::Esim => write!(f, "esim"),
            MetricKind::EsimN(n) => write!(f, "esim{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityScore {
    pub value: f64,
    pub kind: MetricKind,
}

/// Anything laid out as a ternary grid.
pub trait TernaryGrid {
    fn geometry(&self) -> Geometry;
    fn cells(&self) -> &[i8];
}

impl TernaryGrid for EventFrame {
    fn geometry(&self) -> Geometry {
        EventFrame::geometry(self)
    }
    fn cells(&self) -> &[i8] {
        EventFrame::cells(self)
    }
}

/// A frame polarized with a window size and threshold. Only [`polarize`]
/// builds one.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarizedFrame {
    geometry: Geometry,
    cells: Vec<i8>,
    window: usize,
    threshold: f64,
}

impl PolarizedFrame {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn to_frame(&self) -> EventFrame {
        EventFrame::from_cells(self.geometry, self.cells.clone()).expect("polarized cells are ternary")
    }
}

impl TernaryGrid for PolarizedFrame {
    fn geometry(&self) -> Geometry {
        self.geometry
    }
    fn cells(&self) -> &[i8] {
        &self.cells
    }
}

/// `|F1 ∩ F2| / |F1 ∪ F2|`; two empty frames score 1.
pub fn esim<T: TernaryGrid>(f1: &T, f2: &T) -> Result<SimilarityScore> {
    f1.geometry().ensure_same(&f2.geometry())?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in f1.cells().iter().zip(f2.cells()) {
        if a != 0 || b != 0 {
            union += 1;
            if a == b {
                inter += 1;
            }
        }
    }
    let value = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    Ok(SimilarityScore {
        value,
        kind: MetricKind::Esim,
    })
}

pub fn mss(f1: &EventFrame, f2: &EventFrame) -> Result<SimilarityScore> {
    f1.geometry().ensure_same(&f2.geometry())?;
    let sq: u64 = f1
        .cells()
        .iter()
        .zip(f2.cells())
        .map(|(&a, &b)| {
            let d = (a - b) as i64;
            (d * d) as u64
        })
        .sum();
    let mse = sq as f64 / f1.geometry().area() as f64;
    if mse > 1.0 {
        return Err(Error::OutOfRange(format!(
            "mean squared error {mse} exceeds 1, so 1 - MSE is negative"
        )));
    }
    Ok(SimilarityScore {
        value: 1.0 - mse,
        kind: MetricKind::Mss,
    })
}

/// First row/column of an `n`-wide window anchored at `c`; even widths put
/// the extra row/column after the center.
fn window_start(c: usize, n: usize) -> isize {
    c as isize - ((n as isize - 1) / 2)
}

/// `(|E_pos| - |E_neg|) / (h * w)` over the `h x w` window centered at
/// `(x, y)`. Cells outside the frame count as empty.
pub fn polarity_intensity(f: &EventFrame, x: usize, y: usize, h: usize, w: usize) -> f64 {
    assert!(h >= 1 && w >= 1, "window must be at least 1x1");
    let g = f.geometry();
    assert!(x < g.width && y < g.height, "({x}, {y}) outside {g}");
    let (y0, x0) = (window_start(y, h), window_start(x, w));
    let mut net = 0i64;
    for yy in y0..y0 + h as isize {
        for xx in x0..x0 + w as isize {
            if yy >= 0 && xx >= 0 && (yy as usize) < g.height && (xx as usize) < g.width {
                net += f.get(xx as usize, yy as usize) as i64;
            }
        }
    }
    net as f64 / (h * w) as f64
}

/// Sliding-window polarization: `+1` where PI > th, `-1` where PI < -th,
/// `0` otherwise (so |PI| == th maps to zero).
pub fn polarize(f: &EventFrame, n: usize, th: f64) -> Result<PolarizedFrame> {
    if n == 0 {
        return Err(Error::InvalidValue("polarization window must be >= 1".into()));
    }
    if !(th > 0.0) {
        return Err(Error::InvalidValue(format!(
            "polarization threshold must be positive, got {th}"
        )));
    }
    let g = f.geometry();
    let (w, h) = (g.width, g.height);
    // Summed-area table with a zero guard row/column.
    let stride = w + 1;
    let mut sat = vec![0i64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0i64;
        for x in 0..w {
            row += f.get(x, y) as i64;
            sat[(y + 1) * stride + x + 1] = sat[y * stride + x + 1] + row;
        }
    }
    let area = (n * n) as f64;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize) as usize;
    let mut cells = Vec::with_capacity(g.area());
    for y in 0..h {
        let y0 = clamp(window_start(y, n), h);
        let y1 = clamp(window_start(y, n) + n as isize, h);
        for x in 0..w {
            let x0 = clamp(window_start(x, n), w);
            let x1 = clamp(window_start(x, n) + n as isize, w);
            let net = sat[y1 * stride + x1] - sat[y0 * stride + x1] - sat[y1 * stride + x0]
                + sat[y0 * stride + x0];
            let pi = net as f64 / area;
            cells.push(if pi > th {
                1
            } else if pi < -th {
                -1
            } else {
                0
            });
        }
    }
    Ok(PolarizedFrame {
        geometry: g,
        cells,
        window: n,
        threshold: th,
    })
}

pub fn region_esim(f1: &EventFrame, f2: &EventFrame, n: usize, th: f64) -> Result<SimilarityScore> {
    f1.geometry().ensure_same(&f2.geometry())?;
    let score = esim(&polarize(f1, n, th)?, &polarize(f2, n, th)?)?;
    Ok(SimilarityScore {
        value: score.value,
        kind: MetricKind::EsimN(n),
    })
}

/// Region esim with a 4x4 window at the default threshold, the score used to
/// judge predictions throughout the crate.
pub fn esim4(f1: &EventFrame, f2: &EventFrame) -> Result<f64> {
    region_esim(f1, f2, 4, DEFAULT_POLARITY_THRESHOLD).map(|s| s.value)
}

pub fn relative_esim(esim_noisy: f64, esim_clean: f64) -> Result<f64> {
    if !(esim_clean > 0.0) {
        return Err(Error::UndefinedRatio(format!(
            "clean-input score is {esim_clean}"
        )));
    }
    Ok(esim_noisy / esim_clean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame(w: usize, h: usize, events: &[(usize, usize, i8)]) -> EventFrame {
        let mut f = EventFrame::zeros(Geometry::new(w, h));
        for &(x, y, v) in events {
            f.set(x, y, v);
        }
        f
    }

    #[test]
    fn esim_hand_cases() {
        let a = frame(4, 4, &[(0, 0, 1), (1, 1, -1)]);
        assert_eq!(esim(&a, &a).unwrap().value, 1.0);
        let b = frame(4, 4, &[(0, 0, 1), (2, 2, 1)]);
        assert!((esim(&a, &b).unwrap().value - 1.0 / 3.0).abs() < 1e-12);
        let c = frame(4, 4, &[(3, 3, 1)]);
        assert_eq!(esim(&a, &c).unwrap().value, 0.0);
        let z = EventFrame::zeros(Geometry::new(4, 4));
        assert_eq!(esim(&z, &z).unwrap().value, 1.0);
        // opposite polarity on one cell is not shared
        let d = frame(4, 4, &[(0, 0, -1)]);
        assert_eq!(esim(&frame(4, 4, &[(0, 0, 1)]), &d).unwrap().value, 0.0);
    }

    #[test]
    fn geometry_mismatch_is_a_dimension_error() {
        let a = EventFrame::zeros(Geometry::new(4, 4));
        let b = EventFrame::zeros(Geometry::new(4, 5));
        assert!(matches!(esim(&a, &b), Err(Error::Dimension { .. })));
        assert!(matches!(mss(&a, &b), Err(Error::Dimension { .. })));
        assert!(matches!(region_esim(&a, &b, 2, 0.25), Err(Error::Dimension { .. })));
    }

    #[test]
    fn mss_hand_cases() {
        let a = EventFrame::zeros(Geometry::new(64, 64));
        assert_eq!(mss(&a, &a).unwrap().value, 1.0);
        let mut b = a.clone();
        b.set(10, 20, 1);
        let v = mss(&a, &b).unwrap().value;
        assert!((v - (1.0 - 1.0 / 4096.0)).abs() < 1e-15);
        // every cell opposite: MSE = 4
        let p = frame(1, 2, &[(0, 0, 1), (0, 1, 1)]);
        let n = frame(1, 2, &[(0, 0, -1), (0, 1, -1)]);
        assert!(matches!(mss(&p, &n), Err(Error::OutOfRange(_))));
    }

    #[test]
    fn polarity_intensity_cases() {
        let f = frame(4, 4, &[(1, 1, 1), (2, 1, 1), (1, 2, 1), (2, 2, -1)]);
        // 2x2 window at (1,1) covers rows 1..=2, cols 1..=2
        assert_eq!(polarity_intensity(&f, 1, 1, 2, 2), 0.5);
        assert_eq!(polarity_intensity(&EventFrame::zeros(Geometry::new(4, 4)), 2, 2, 3, 3), 0.0);
        let full = frame(2, 2, &[(0, 0, 1), (1, 0, 1), (0, 1, 1), (1, 1, 1)]);
        assert_eq!(polarity_intensity(&full, 0, 0, 2, 2), 1.0);
        // border windows keep the full denominator
        assert_eq!(polarity_intensity(&full, 1, 1, 2, 2), 0.25);
    }

    #[test]
    fn polarize_erases_isolated_events() {
        let f = frame(6, 6, &[(3, 3, 1)]);
        let p = polarize(&f, 2, DEFAULT_POLARITY_THRESHOLD).unwrap();
        assert!(p.cells().iter().all(|&c| c == 0));
        let z = polarize(&EventFrame::zeros(Geometry::new(6, 6)), 4, 0.2501).unwrap();
        assert!(z.cells().iter().all(|&c| c == 0));
    }

    #[test]
    fn polarize_keeps_solid_blocks() {
        let f = frame(6, 6, &[(2, 2, 1), (3, 2, 1), (2, 3, 1), (3, 3, 1)]);
        let p = polarize(&f, 2, DEFAULT_POLARITY_THRESHOLD).unwrap();
        // window anchored at (2,2) spans exactly the block
        assert_eq!(p.to_frame().get(2, 2), 1);
        assert_eq!(p.window(), 2);
        // windows covering two block cells reach PI = 0.5
        assert_eq!(p.to_frame().get(1, 2), 1);
        // a corner overlap of one cell is 0.25 and stays below threshold
        assert_eq!(p.to_frame().get(1, 1), 0);
    }

    #[test]
    fn polarize_rejects_bad_parameters() {
        let f = EventFrame::zeros(Geometry::new(4, 4));
        assert!(polarize(&f, 0, 0.25).is_err());
        assert!(polarize(&f, 2, 0.0).is_err());
    }

    #[test]
    fn polarize_matches_windowed_intensity() {
        let mut f = EventFrame::zeros(Geometry::new(9, 7));
        for i in 0..63 {
            let v = [(0i8), 1, -1, 0, 1][(i * 7 + i / 3) % 5];
            f.set(i % 9, i / 9, v);
        }
        for n in 1..=5 {
            let p = polarize(&f, n, 0.2).unwrap().to_frame();
            for y in 0..7 {
                for x in 0..9 {
                    let pi = polarity_intensity(&f, x, y, n, n);
                    let want = if pi > 0.2 { 1 } else if pi < -0.2 { -1 } else { 0 };
                    assert_eq!(p.get(x, y), want, "n={n} at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn region_esim_forgives_isolated_noise() {
        let mut clean = EventFrame::zeros(Geometry::new(32, 32));
        for y in 10..16 {
            for x in 12..15 {
                clean.set(x, y, 1);
            }
        }
        let mut noisy = clean.clone();
        for (x, y) in [(1, 1), (5, 28), (28, 3), (30, 30), (20, 25), (3, 14), (25, 12), (8, 22), (17, 1), (27, 20)] {
            noisy.set(x, y, if (x + y) % 2 == 0 { 1 } else { -1 });
        }
        assert_eq!(region_esim(&clean, &noisy, 4, DEFAULT_POLARITY_THRESHOLD).unwrap().value, 1.0);
        assert!(esim(&clean, &noisy).unwrap().value < 1.0);
    }

    #[test]
    fn relative_esim_cases() {
        assert_eq!(relative_esim(0.5, 0.5).unwrap(), 1.0);
        assert!((relative_esim(0.45, 0.5).unwrap() - 0.9).abs() < 1e-12);
        assert!(matches!(relative_esim(0.3, 0.0), Err(Error::UndefinedRatio(_))));
    }

    fn arb_frame(w: usize, h: usize) -> impl Strategy<Value = EventFrame> {
        proptest::collection::vec(-1i8..=1, w * h)
            .prop_map(move |cells| EventFrame::from_cells(Geometry::new(w, h), cells).unwrap())
    }

    proptest! {
        #[test]
        fn scores_are_symmetric_and_bounded(a in arb_frame(16, 16), b in arb_frame(16, 16)) {
            let ab = esim(&a, &b).unwrap().value;
            prop_assert_eq!(ab, esim(&b, &a).unwrap().value);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(esim(&a, &a).unwrap().value, 1.0);
            for n in [2, 4] {
                let r = region_esim(&a, &b, n, DEFAULT_POLARITY_THRESHOLD).unwrap().value;
                prop_assert_eq!(r, region_esim(&b, &a, n, DEFAULT_POLARITY_THRESHOLD).unwrap().value);
                prop_assert!((0.0..=1.0).contains(&r));
            }
            if let (Ok(m1), Ok(m2)) = (mss(&a, &b), mss(&b, &a)) {
                prop_assert_eq!(m1.value, m2.value);
            }
        }

        #[test]
        fn unit_window_region_esim_is_esim(a in arb_frame(16, 16), b in arb_frame(16, 16)) {
            // with n = 1 every nonzero cell has |PI| = 1, above any threshold < 1
            let r = region_esim(&a, &b, 1, 0.5).unwrap().value;
            prop_assert_eq!(r, esim(&a, &b).unwrap().value);
        }

        #[test]
        fn a_spurious_event_never_raises_esim(
            a in arb_frame(8, 8), b in arb_frame(8, 8), cell in 0usize..64, positive in any::<bool>()
        ) {
            let v: i8 = if positive { 1 } else { -1 };
            let (x, y) = (cell % 8, cell / 8);
            prop_assume!(a.get(x, y) == 0 && b.get(x, y) != v);
            let before = esim(&a, &b).unwrap().value;
            let mut noisy = a.clone();
            noisy.set(x, y, v);
            prop_assert!(esim(&noisy, &b).unwrap().value <= before);
        }
    }
}
