//! Spatially sparse feature maps on a 2D grid.
//!
//! A [`SparseTensor`] stores features only at *active sites*: grid cells that
//! carry information. Sites are kept as strictly increasing row-major linear
//! indices so that lookups are binary searches and every iteration order is
//! deterministic. Inactive sites are absent, not zero: layers downstream
//! decide what absence means.

use crate::error::{Error, Result};
use crate::event::{Event, SensorGeometry};
use crate::scalar::Scalar;

/// A sparse `rows x cols` grid with `channels` values per active site.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor<T> {
    rows: usize,
    cols: usize,
    channels: usize,
    /// Row-major linear site indices, strictly increasing.
    sites: Vec<u32>,
    /// Site-major features, `sites.len() * channels` values.
    features: Vec<T>,
}

impl<T: Scalar> SparseTensor<T> {
    pub fn new(
        rows: usize,
        cols: usize,
        channels: usize,
        sites: Vec<u32>,
        features: Vec<T>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || channels == 0 {
            return Err(Error::Dimension(format!(
                "degenerate sparse tensor shape {rows}x{cols}x{channels}"
            )));
        }
        let n_cells = rows * cols;
        let mut prev: Option<u32> = None;
        for &s in &sites {
            if s as usize >= n_cells {
                return Err(Error::Dimension(format!(
                    "site {s} outside {rows}x{cols} grid"
                )));
            }
            if let Some(p) = prev {
                if s <= p {
                    return Err(Error::Dimension(format!(
                        "sites not strictly increasing at {s}"
                    )));
                }
            }
            prev = Some(s);
        }
        if features.len() != sites.len() * channels {
            return Err(Error::Dimension(format!(
                "feature buffer holds {} values, expected {} sites x {} channels",
                features.len(),
                sites.len(),
                channels
            )));
        }
        Ok(SparseTensor {
            rows,
            cols,
            channels,
            sites,
            features,
        })
    }

    /// No active sites.
    pub fn empty(rows: usize, cols: usize, channels: usize) -> Self {
        SparseTensor {
            rows,
            cols,
            channels,
            sites: Vec::new(),
            features: Vec::new(),
        }
    }

    /// Every site active, all features zero.
    pub fn zeros_full(rows: usize, cols: usize, channels: usize) -> Self {
        let n = rows * cols;
        SparseTensor {
            rows,
            cols,
            channels,
            sites: (0..n as u32).collect(),
            features: vec![T::zero(); n * channels],
        }
    }

    /// Same active sites as `self`, `channels` zero-valued features per site.
    pub fn zeros_like_sites(&self, channels: usize) -> Self {
        SparseTensor {
            rows: self.rows,
            cols: self.cols,
            channels,
            sites: self.sites.clone(),
            features: vec![T::zero(); self.sites.len() * channels],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn site_count(&self) -> usize {
        self.sites.len()
    }

    pub fn linear_sites(&self) -> &[u32] {
        &self.sites
    }

    pub fn features(&self) -> &[T] {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut [T] {
        &mut self.features
    }

    pub fn into_features(self) -> Vec<T> {
        self.features
    }

    /// (row, col) of the `i`-th active site.
    pub fn site_rc(&self, i: usize) -> (usize, usize) {
        let lin = self.sites[i] as usize;
        (lin / self.cols, lin % self.cols)
    }

    /// Features of the `i`-th active site.
    pub fn site_features(&self, i: usize) -> &[T] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// Index of the active site at `(row, col)`, if present.
    pub fn find_site(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.rows || col >= self.cols {
            return None;
        }
        let lin = (row * self.cols + col) as u32;
        self.sites.binary_search(&lin).ok()
    }

    /// Dense row-major `rows * cols * channels` buffer; inactive sites read
    /// as zero.
    pub fn to_dense(&self) -> Vec<T> {
        let mut dense = vec![T::zero(); self.rows * self.cols * self.channels];
        for (i, &lin) in self.sites.iter().enumerate() {
            let dst = lin as usize * self.channels;
            let src = i * self.channels;
            dense[dst..dst + self.channels]
                .copy_from_slice(&self.features[src..src + self.channels]);
        }
        dense
    }

    /// Rebuilds a sparse tensor from a dense buffer: a site is active iff any
    /// of its channels is nonzero.
    pub fn from_dense(rows: usize, cols: usize, channels: usize, dense: &[T]) -> Result<Self> {
        if dense.len() != rows * cols * channels {
            return Err(Error::Dimension(format!(
                "dense buffer holds {} values, expected {}",
                dense.len(),
                rows * cols * channels
            )));
        }
        let mut sites = Vec::new();
        let mut features = Vec::new();
        for lin in 0..rows * cols {
            let cell = &dense[lin * channels..(lin + 1) * channels];
            if cell.iter().any(|v| *v != T::zero()) {
                sites.push(lin as u32);
                features.extend_from_slice(cell);
            }
        }
        SparseTensor::new(rows, cols, channels, sites, features)
    }

    /// Copies this tensor into the centre of a larger `rows x cols` grid.
    /// The offset is `floor((target - source) / 2)` per axis, so active site
    /// `(r, c)` lands at `(r + row_off, c + col_off)`.
    pub fn embed(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows < self.rows || cols < self.cols {
            return Err(Error::Dimension(format!(
                "cannot embed {}x{} grid into smaller {rows}x{cols} grid",
                self.rows, self.cols
            )));
        }
        let row_off = (rows - self.rows) / 2;
        let col_off = (cols - self.cols) / 2;
        let sites = self
            .sites
            .iter()
            .map(|&lin| {
                let r = lin as usize / self.cols + row_off;
                let c = lin as usize % self.cols + col_off;
                (r * cols + c) as u32
            })
            .collect();
        SparseTensor::new(rows, cols, self.channels, sites, self.features.clone())
    }
}

/// Per-polarity event count histogram over one window.
///
/// Shape is `height x width x 2`; channel 0 counts negative events, channel 1
/// positive ones. A site is active iff at least one event fell on its pixel.
pub fn event_histogram<T: Scalar>(geometry: SensorGeometry, window: &[Event]) -> SparseTensor<T> {
    let rows = geometry.height as usize;
    let cols = geometry.width as usize;
    let mut counts = vec![[0u32; 2]; rows * cols];
    for ev in window {
        debug_assert!(geometry.contains(ev.x, ev.y) && ev.polarity <= 1);
        let lin = ev.y as usize * cols + ev.x as usize;
        counts[lin][ev.polarity as usize] += 1;
    }
    let mut sites = Vec::new();
    let mut features = Vec::new();
    for (lin, c) in counts.iter().enumerate() {
        if c[0] > 0 || c[1] > 0 {
            sites.push(lin as u32);
            features.push(T::from_usize(c[0] as usize));
            features.push(T::from_usize(c[1] as usize));
        }
    }
    SparseTensor {
        rows,
        cols,
        channels: 2,
        sites,
        features,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn ev(x: u16, y: u16, polarity: u8) -> Event {
        Event {
            t_us: 0,
            x,
            y,
            polarity,
        }
    }

    #[test]
    fn histogram_hand_case() {
        // Three events on one pixel (2 positive, 1 negative), one elsewhere.
        let g = SensorGeometry::new(8, 4);
        let window = [ev(2, 1, 1), ev(2, 1, 0), ev(2, 1, 1), ev(5, 3, 0)];
        let h: SparseTensor<f64> = event_histogram(g, &window);
        assert_eq!((h.rows(), h.cols(), h.channels()), (4, 8, 2));
        assert_eq!(h.site_count(), 2);

        let i = h.find_site(1, 2).unwrap();
        assert_eq!(h.site_features(i), &[1.0, 2.0]);
        let j = h.find_site(3, 5).unwrap();
        assert_eq!(h.site_features(j), &[1.0, 0.0]);
        assert_eq!(h.find_site(0, 0), None);
    }

    #[test]
    fn histogram_empty_window() {
        let h: SparseTensor<f32> = event_histogram(SensorGeometry::DAVIS240, &[]);
        assert_eq!(h.site_count(), 0);
        assert_eq!((h.rows(), h.cols()), (180, 240));
    }

    #[test]
    fn embed_sensor_plane_into_network_input() {
        // 180x240 sensor centred in the 191x255 network input plane:
        // offsets floor((191-180)/2) = 5 rows, floor((255-240)/2) = 7 cols.
        let g = SensorGeometry::DAVIS240;
        let window = [ev(0, 0, 1), ev(239, 179, 0)];
        let h: SparseTensor<f32> = event_histogram(g, &window);
        let e = h.embed(191, 255).unwrap();
        assert_eq!((e.rows(), e.cols()), (191, 255));
        assert_eq!(e.site_count(), 2);
        let a = e.find_site(5, 7).unwrap();
        assert_eq!(e.site_features(a), &[0.0, 1.0]);
        let b = e.find_site(184, 246).unwrap();
        assert_eq!(e.site_features(b), &[1.0, 0.0]);
        // Total mass is preserved.
        let sum: f32 = e.features().iter().sum();
        assert_eq!(sum, 2.0);
    }

    #[test]
    fn embed_rejects_shrinking() {
        let h: SparseTensor<f32> = SparseTensor::zeros_full(4, 4, 1);
        assert!(h.embed(3, 8).is_err());
    }

    #[test]
    fn dense_roundtrip() {
        let t = SparseTensor::<f64>::new(
            2,
            3,
            2,
            vec![1, 4],
            vec![1.0, 2.0, -3.0, 0.5],
        )
        .unwrap();
        let d = t.to_dense();
        assert_eq!(d.len(), 12);
        assert_eq!(&d[2..4], &[1.0, 2.0]);
        assert_eq!(&d[8..10], &[-3.0, 0.5]);
        assert_eq!(d[0], 0.0);
        let back = SparseTensor::from_dense(2, 3, 2, &d).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn constructor_validates() {
        assert!(SparseTensor::<f32>::new(2, 2, 1, vec![4], vec![1.0]).is_err());
        assert!(SparseTensor::<f32>::new(2, 2, 1, vec![1, 1], vec![1.0, 2.0]).is_err());
        assert!(SparseTensor::<f32>::new(2, 2, 1, vec![2, 1], vec![1.0, 2.0]).is_err());
        assert!(SparseTensor::<f32>::new(2, 2, 1, vec![1], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn zeros_full_covers_grid() {
        let t = SparseTensor::<f32>::zeros_full(5, 7, 3);
        assert_eq!(t.site_count(), 35);
        assert_eq!(t.features().len(), 105);
        assert_eq!(t.site_rc(0), (0, 0));
        assert_eq!(t.site_rc(34), (4, 6));
    }

    proptest! {
        #[test]
        fn histogram_matches_counting_oracle(seed in 0u64..500, n in 0usize..400) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = SensorGeometry::new(16, 12);
            let window: Vec<Event> = (0..n)
                .map(|_| ev(rng.gen_range(0..16), rng.gen_range(0..12), rng.gen_range(0..=1)))
                .collect();

            let mut oracle: BTreeMap<(u16, u16), [u32; 2]> = BTreeMap::new();
            for e in &window {
                oracle.entry((e.y, e.x)).or_default()[e.polarity as usize] += 1;
            }

            let h: SparseTensor<f64> = event_histogram(g, &window);
            prop_assert_eq!(h.site_count(), oracle.len());
            for (i, ((y, x), counts)) in oracle.iter().enumerate() {
                // BTreeMap (y, x) order equals row-major site order.
                prop_assert_eq!(h.site_rc(i), (*y as usize, *x as usize));
                prop_assert_eq!(h.site_features(i)[0], counts[0] as f64);
                prop_assert_eq!(h.site_features(i)[1], counts[1] as f64);
            }
            let total: f64 = h.features().iter().sum();
            prop_assert_eq!(total, n as f64);
        }

        #[test]
        fn dense_roundtrip_identity(seed in 0u64..300) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (rows, cols, ch) = (6, 5, 3);
            let n_sites = rng.gen_range(0..=rows * cols);
            let mut all: Vec<u32> = (0..(rows * cols) as u32).collect();
            for i in (1..all.len()).rev() {
                let j = rng.gen_range(0..=i);
                all.swap(i, j);
            }
            let mut sites: Vec<u32> = all[..n_sites].to_vec();
            sites.sort_unstable();
            let features: Vec<f32> = (0..n_sites * ch)
                .map(|_| {
                    // Nonzero so activity survives the dense roundtrip.
                    let v: f32 = rng.gen_range(0.1..2.0);
                    if rng.gen::<bool>() { v } else { -v }
                })
                .collect();
            let t = SparseTensor::new(rows, cols, ch, sites, features).unwrap();
            let back = SparseTensor::from_dense(rows, cols, ch, &t.to_dense()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
