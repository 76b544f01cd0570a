use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{GeoError, TileRecord};
use rand::SeedableRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeometricParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub top: usize,
    pub left: usize,
}

impl GeometricParams {
    pub fn draw(rng: &mut impl Rng, height: usize, width: usize, crop: usize) -> Self {
        Self {
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
            top: rng.random_range(0..=height - crop),
            left: rng.random_range(0..=width - crop),
        }
    }
}

/// Per-channel additive offsets and a row-stochastic channel mixing matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricParams {
    pub offsets: Vec<f64>,
    /// `C x C`, row-major; output channel `c` is `sum_k mixing[c][k] * in[k]`.
    pub mixing: Vec<f64>,
}

impl PhotometricParams {
    pub fn identity(channels: usize) -> Self {
        let mut mixing = vec![0.0; channels * channels];
        for c in 0..channels {
            mixing[c * channels + c] = 1.0;
        }
        Self {
            offsets: vec![0.0; channels],
            mixing,
        }
    }

    /// Offsets uniform in `[-jitter, jitter]`; mixing `I + mix * R` with
    /// `R` uniform in `[-1, 1]`, each row rescaled to sum to 1.
    pub fn draw(rng: &mut impl Rng, channels: usize, jitter: f64, mix: f64) -> Self {
        let mut p = Self::identity(channels);
        if jitter > 0.0 {
            for o in &mut p.offsets {
                *o = rng.random_range(-jitter..=jitter);
            }
        }
        if mix > 0.0 {
            for row in p.mixing.chunks_exact_mut(channels) {
                for v in row.iter_mut() {
                    *v += mix * rng.random_range(-1.0..=1.0);
                }
                let s: f64 = row.iter().sum();
                // a row summing to ~0 cannot be renormalized; keep it as is
                if s.abs() > 1e-3 {
                    row.iter_mut().for_each(|v| *v /= s);
                }
            }
        }
        p
    }
}

fn check_crop(tile: &TileRecord, crop: usize) -> Result<(), GeoError> {
    if crop == 0 || crop > tile.height || crop > tile.width {
        return Err(GeoError::CropTooLarge {
            crop,
            height: tile.height,
            width: tile.width,
        });
    }
    Ok(())
}

/// Flips, crops a `crop x crop` window at `(top, left)`, then resizes to
/// `out_size x out_size`.
pub fn apply_geometric(
    tile: &TileRecord,
    params: &GeometricParams,
    crop: usize,
    out_size: usize,
) -> Result<TileRecord, GeoError> {
    check_crop(tile, crop)?;
    if params.top + crop > tile.height || params.left + crop > tile.width {
        return Err(GeoError::InvalidTile(format!(
            "crop window at ({}, {}) leaves the tile",
            params.top, params.left
        )));
    }
    let (h, w) = (tile.height, tile.width);
    let mut cropped = Vec::with_capacity(tile.channels * crop * crop);
    for c in 0..tile.channels {
        for y in params.top..params.top + crop {
            let sy = if params.flip_v { h - 1 - y } else { y };
            for x in params.left..params.left + crop {
                let sx = if params.flip_h { w - 1 - x } else { x };
                cropped.push(tile.at(c, sy, sx));
            }
        }
    }
    let pixels = resize_bilinear(&cropped, tile.channels, crop, crop, out_size, out_size);
    Ok(tile.with_pixels(out_size, out_size, pixels))
}

/// Random flips and crop, then resize; deterministic given `seed`.
pub fn augment_geometric(
    tile: &TileRecord,
    crop: usize,
    out_size: usize,
    seed: u64,
) -> Result<TileRecord, GeoError> {
    check_crop(tile, crop)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = GeometricParams::draw(&mut rng, tile.height, tile.width, crop);
    apply_geometric(tile, &params, crop, out_size)
}

/// Mixes channels, adds offsets and clamps to `[0, 1]`.
pub fn apply_photometric(tile: &TileRecord, params: &PhotometricParams) -> TileRecord {
    let c = tile.channels;
    let plane = tile.height * tile.width;
    let mut out = vec![0.0; tile.pixels.len()];
    for oc in 0..c {
        let row = &params.mixing[oc * c..(oc + 1) * c];
        let dst = &mut out[oc * plane..(oc + 1) * plane];
        for (ic, &m) in row.iter().enumerate() {
            let src = &tile.pixels[ic * plane..(ic + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += m * s;
            }
        }
        for d in dst.iter_mut() {
            *d = (*d + params.offsets[oc]).clamp(0.0, 1.0);
        }
    }
    tile.with_pixels(tile.height, tile.width, out)
}

pub fn augment_photometric(tile: &TileRecord, jitter: f64, mix: f64, seed: u64) -> TileRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = PhotometricParams::draw(&mut rng, tile.channels, jitter.max(0.0), mix.max(0.0));
    apply_photometric(tile, &params)
}

/// Bilinear resize of a `C x H x W` image using pixel-center alignment.
/// Same-size resizes return the input unchanged.
pub fn resize_bilinear(
    pixels: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    if h == out_h && w == out_w {
        return pixels.to_vec();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &pixels[c * h * w..(c + 1) * h * w];
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bottom = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    out
}
