use super::GeoError;

pub const COVARIATE_CHANNELS: usize = 20;

/// Regular lat/lon grid of covariate vectors. Node `(r, c)` sits at
/// `(lat0 + r * dlat, lon0 + c * dlon)`; values are stored row-major as
/// `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateRaster {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
    pub values: Vec<f64>,
    pub channel_min: Vec<f64>,
    pub channel_max: Vec<f64>,
}

/// Fractional grid positions closer than this to a node snap onto it.
const NODE_SNAP: f64 = 1e-9;

impl CovariateRaster {
    /// Builds a raster and derives per-channel min/max from the values.
    pub fn from_values(
        rows: usize,
        cols: usize,
        channels: usize,
        origin: (f64, f64),
        cell: (f64, f64),
        values: Vec<f64>,
    ) -> Result<Self, GeoError> {
        let mut channel_min = vec![f64::INFINITY; channels];
        let mut channel_max = vec![f64::NEG_INFINITY; channels];
        for node in values.chunks(channels.max(1)) {
            for (c, v) in node.iter().enumerate() {
                channel_min[c] = channel_min[c].min(*v);
                channel_max[c] = channel_max[c].max(*v);
            }
        }
        let r = Self {
            rows,
            cols,
            channels,
            lat0: origin.0,
            lon0: origin.1,
            dlat: cell.0,
            dlon: cell.1,
            values,
            channel_min,
            channel_max,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        let bad = |m: String| Err(GeoError::InvalidRaster(m));
        if self.rows < 2 || self.cols < 2 {
            return bad(format!(
                "need at least 2x2 nodes, got {}x{}",
                self.rows, self.cols
            ));
        }
        if self.channels == 0 {
            return bad("zero channels".into());
        }
        if !(self.dlat > 0.0 && self.dlon > 0.0) {
            return bad(format!(
                "cell size ({}, {}) must be positive",
                self.dlat, self.dlon
            ));
        }
        if self.values.len() != self.rows * self.cols * self.channels {
            return bad(format!(
                "{} values for {}x{}x{} grid",
                self.values.len(),
                self.rows,
                self.cols,
                self.channels
            ));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return bad("non-finite value".into());
        }
        if self.channel_min.len() != self.channels || self.channel_max.len() != self.channels {
            return bad("channel_min/channel_max length differs from channel count".into());
        }
        if self
            .channel_min
            .iter()
            .zip(&self.channel_max)
            .any(|(lo, hi)| !(lo <= hi))
        {
            return bad("channel_min exceeds channel_max".into());
        }
        Ok(())
    }

    pub fn lat_max(&self) -> f64 {
        self.lat0 + (self.rows - 1) as f64 * self.dlat
    }

    pub fn lon_max(&self) -> f64 {
        self.lon0 + (self.cols - 1) as f64 * self.dlon
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.lat0..=self.lat_max()).contains(&lat) && (self.lon0..=self.lon_max()).contains(&lon)
    }

    pub fn node(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.cols + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// Bilinear blend of the four grid nodes around `(lat, lon)`.
    pub fn bilinear_sample(&self, lat: f64, lon: f64) -> Result<Vec<f64>, GeoError> {
        if !self.contains(lat, lon) {
            return Err(GeoError::OutOfBounds { lat, lon });
        }
        let (r0, t) = Self::locate((lat - self.lat0) / self.dlat, self.rows);
        let (c0, u) = Self::locate((lon - self.lon0) / self.dlon, self.cols);
        let w00 = (1.0 - t) * (1.0 - u);
        let w01 = (1.0 - t) * u;
        let w10 = t * (1.0 - u);
        let w11 = t * u;
        let (v00, v01) = (self.node(r0, c0), self.node(r0, c0 + 1));
        let (v10, v11) = (self.node(r0 + 1, c0), self.node(r0 + 1, c0 + 1));
        Ok((0..self.channels)
            .map(|k| w00 * v00[k] + w01 * v01[k] + w10 * v10[k] + w11 * v11[k])
            .collect())
    }

    /// Lower node index and fractional offset inside the cell.
    fn locate(pos: f64, n: usize) -> (usize, f64) {
        let nearest = pos.round();
        let pos = if (pos - nearest).abs() < NODE_SNAP {
            nearest
        } else {
            pos
        };
        let lower = (pos.floor().max(0.0) as usize).min(n - 2);
        (lower, (pos - lower as f64).clamp(0.0, 1.0))
    }

    /// Min-max scales a covariate vector to `[-1, 1]` per channel.
    /// Constant channels map to 0.
    pub fn normalize(&self, v: &mut [f64]) {
        for ((x, lo), hi) in v.iter_mut().zip(&self.channel_min).zip(&self.channel_max) {
            let span = hi - lo;
            *x = if span > 0.0 {
                (2.0 * (*x - lo) / span - 1.0).clamp(-1.0, 1.0)
            } else {
                0.0
            };
        }
    }

    pub fn sample_normalized(&self, lat: f64, lon: f64) -> Result<Vec<f64>, GeoError> {
        let mut v = self.bilinear_sample(lat, lon)?;
        self.normalize(&mut v);
        Ok(v)
    }
}
