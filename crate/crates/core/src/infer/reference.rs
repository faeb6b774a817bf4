//! Deterministic marker-pixel classifier used as a test oracle.

use rayon::prelude::*;

use super::ClassifierBackend;
use crate::error::Result;
use crate::tiles::TileTensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceParams {
    /// Waste iff the marker fraction is strictly greater than this.
    pub fraction: f64,
    /// Marker pixels have channel 0 at least this value...
    pub red_min: u8,
    /// ...and channel 1 at most this value.
    pub green_max: u8,
    /// Slope of the logistic mapping from fraction to waste probability.
    pub steepness: f64,
}

impl Default for ReferenceParams {
    fn default() -> Self {
        ReferenceParams {
            fraction: 0.02,
            red_min: 200,
            green_max: 60,
            steepness: 200.0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReferenceClassifier {
    pub params: ReferenceParams,
}

impl ReferenceClassifier {
    pub fn new(params: ReferenceParams) -> Self {
        ReferenceClassifier { params }
    }

    pub fn is_marker(&self, px: [u8; 3]) -> bool {
        px[0] >= self.params.red_min && px[1] <= self.params.green_max
    }

    pub fn marker_fraction(&self, t: &TileTensor) -> f64 {
        let (r, g) = (self.params.red_min, self.params.green_max);
        let hit = |p: &[u8]| usize::from(p[0] >= r) & usize::from(p[1] <= g);
        // 16 pixels per step with fixed offsets, which vectorizes.
        let mut blocks = t.data.chunks_exact(48);
        let mut n = 0;
        for b in &mut blocks {
            let mut k = 0u8;
            for i in 0..16 {
                k += u8::from(b[3 * i] >= r) & u8::from(b[3 * i + 1] <= g);
            }
            n += usize::from(k);
        }
        n += blocks.remainder().chunks_exact(3).map(hit).sum::<usize>();
        n as f64 / (t.size * t.size) as f64
    }

    /// `[p_background, p_waste]` for a marker fraction.
    pub fn probabilities(&self, fraction: f64) -> [f64; 2] {
        let x = self.params.steepness * (fraction - self.params.fraction);
        let p_waste = 1.0 / (1.0 + (-x).exp());
        [1.0 - p_waste, p_waste]
    }
}

impl ClassifierBackend for ReferenceClassifier {
    fn predict_batch(&self, batch: &[TileTensor]) -> Result<Vec<[f64; 2]>> {
        Ok(batch
            .par_iter()
            .map(|t| self.probabilities(self.marker_fraction(t)))
            .collect())
    }

    fn id(&self) -> String {
        let p = &self.params;
        format!(
            "reference:fraction={}:red_min={}:green_max={}:steepness={}",
            p.fraction, p.red_min, p.green_max, p.steepness
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geogrid::{PixelWindow, TileId};
    use crate::infer::decide;
    use crate::records::Class;

    fn tensor(markers: usize) -> TileTensor {
        let mut data = vec![0u8; 128 * 128 * 3];
        for px in data.chunks_exact_mut(3).take(markers) {
            px.copy_from_slice(&[255, 0, 0]);
        }
        TileTensor {
            tile_id: TileId::new(0, 0),
            size: 128,
            data,
            source_window: PixelWindow::new(0, 0, 128, 128),
            valid_fraction: 1.0,
        }
    }

    #[test]
    fn black_tile_is_background() {
        let c = ReferenceClassifier::default();
        let p = c.predict_batch(&[tensor(0)]).unwrap()[0];
        let (class, conf) = decide(p);
        assert_eq!(class, Class::Background);
        assert!(conf >= 0.5);
    }

    #[test]
    fn five_percent_is_waste() {
        let c = ReferenceClassifier::default();
        let n = (0.05 * 16384.0) as usize;
        let (class, conf) = decide(c.predict_batch(&[tensor(n)]).unwrap()[0]);
        assert_eq!(class, Class::Waste);
        assert!(conf > 0.99);
    }

    #[test]
    fn threshold_is_strict() {
        let c = ReferenceClassifier::default();
        assert_eq!(decide(c.probabilities(0.02)), (Class::Background, 0.5));
        // 327 / 16384 < 2% < 328 / 16384
        assert_eq!(decide(c.predict_batch(&[tensor(327)]).unwrap()[0]).0, Class::Background);
        assert_eq!(decide(c.predict_batch(&[tensor(328)]).unwrap()[0]).0, Class::Waste);
    }

    #[test]
    fn near_markers_do_not_count() {
        let c = ReferenceClassifier::default();
        assert!(c.is_marker([200, 60, 0]));
        assert!(!c.is_marker([199, 0, 0]));
        assert!(!c.is_marker([255, 61, 0]));
    }
}
