use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::top_k_indices;
use super::EvalError;
use crate::encoders::WildSatModel;
use crate::geodata::TileRecord;
use crate::numerics::{dot, l2_normalize_rows, Tensor};

/// Unit-norm tile embeddings from the `txt_head` projection.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    tile_ids: Vec<u64>,
    /// `N x d`
    embeddings: Tensor,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexHeader {
    tile_ids: Vec<u64>,
    n: usize,
    d: usize,
}

impl RetrievalIndex {
    /// Rows are renormalized to unit length.
    pub fn new(tile_ids: Vec<u64>, embeddings: &Tensor) -> Result<Self, EvalError> {
        let (n, _) = embeddings
            .dims2()
            .ok_or(EvalError::Shape(embeddings.shape().to_vec()))?;
        if n != tile_ids.len() {
            return Err(EvalError::Length {
                left: tile_ids.len(),
                right: n,
            });
        }
        if n == 0 {
            return Err(EvalError::Empty);
        }
        Ok(Self {
            tile_ids,
            embeddings: l2_normalize_rows(embeddings)?,
        })
    }

    pub fn tile_ids(&self) -> &[u64] {
        &self.tile_ids
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.tile_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tile_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// Top-`k` tiles by cosine to a query already in the shared space.
    /// Ties go to the lower tile id; `k > N` returns all `N`.
    pub fn query(&self, query: &[f64], k: usize) -> Result<Vec<(u64, f64)>, EvalError> {
        if k == 0 {
            return Err(EvalError::Task("k must be at least 1".into()));
        }
        if query.len() != self.dim() {
            return Err(EvalError::Length {
                left: query.len(),
                right: self.dim(),
            });
        }
        let norm = dot(query, query).sqrt();
        if !(norm > crate::numerics::NORM_EPS) || !norm.is_finite() {
            return Err(EvalError::Task("query vector is zero or non-finite".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let cos: Vec<f64> = order
            .iter()
            .map(|&i| dot(self.embeddings.row(i), query) / norm)
            .collect();
        order.sort_by(|&a, &b| {
            cos[b]
                .total_cmp(&cos[a])
                .then(self.tile_ids[a].cmp(&self.tile_ids[b]))
        });
        Ok(order
            .into_iter()
            .take(k)
            .map(|i| (self.tile_ids[i], cos[i]))
            .collect())
    }

    /// Writes `index.json` and `index.bin` (little-endian f32 rows) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir).map_err(|e| EvalError::io(dir, e))?;
        let header = IndexHeader {
            tile_ids: self.tile_ids.clone(),
            n: self.len(),
            d: self.dim(),
        };
        let json = dir.join("index.json");
        fs::write(
            &json,
            serde_json::to_string_pretty(&header).expect("serializable"),
        )
        .map_err(|e| EvalError::io(&json, e))?;
        let mut bytes = Vec::with_capacity(self.embeddings.len() * 4);
        for v in self.embeddings.data() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let bin = dir.join("index.bin");
        fs::write(&bin, bytes).map_err(|e| EvalError::io(&bin, e))
    }

    /// Reads an index directory; rows are renormalized after the f32 round trip.
    pub fn load(dir: &Path) -> Result<Self, EvalError> {
        let json = dir.join("index.json");
        let text = fs::read_to_string(&json).map_err(|e| EvalError::io(&json, e))?;
        let header: IndexHeader = serde_json::from_str(&text)
            .map_err(|e| EvalError::Format(format!("index.json: {e}")))?;
        if header.tile_ids.len() != header.n {
            return Err(EvalError::Format(format!(
                "index.json: {} tile ids but n = {}",
                header.tile_ids.len(),
                header.n
            )));
        }
        let bin = dir.join("index.bin");
        let bytes = fs::read(&bin).map_err(|e| EvalError::io(&bin, e))?;
        if bytes.len() != header.n * header.d * 4 {
            return Err(EvalError::Format(format!(
                "index.bin: {} bytes, expected {} for {} x {} f32",
                bytes.len(),
                header.n * header.d * 4,
                header.n,
                header.d
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::new(
            header.tile_ids,
            &Tensor::new(vec![header.n, header.d], data)?,
        )
    }
}

/// Embeds every tile with the frozen encoder and its `txt_head` projection.
pub fn build_index(
    model: &WildSatModel,
    tiles: &[&TileRecord],
) -> Result<RetrievalIndex, EvalError> {
    let emb = tile_text_embeddings(model, tiles)?;
    RetrievalIndex::new(tiles.iter().map(|t| t.tile_id).collect(), &emb)
}

/// `txt_head` embeddings of tiles, `N x d`, unit rows.
pub fn tile_text_embeddings(
    model: &WildSatModel,
    tiles: &[&TileRecord],
) -> Result<Tensor, EvalError> {
    let size = model.config.image.input_size;
    let resized: Vec<TileRecord> = tiles
        .iter()
        .map(|t| fit_to_model(t, size))
        .collect::<Result<_, _>>()?;
    let refs: Vec<&TileRecord> = resized.iter().collect();
    let features = model.encode_tiles(&refs)?;
    Ok(model.project(crate::encoders::HEAD_TXT, &features)?)
}

/// Resizes a tile to the model input without cropping or flipping.
pub fn fit_to_model(tile: &TileRecord, size: usize) -> Result<TileRecord, EvalError> {
    if tile.height == size && tile.width == size {
        return Ok(tile.clone());
    }
    let pixels = crate::geodata::resize_bilinear(
        &tile.pixels,
        tile.channels,
        tile.height,
        tile.width,
        size,
        size,
    );
    Ok(tile.with_pixels(size, size, pixels))
}

/// Maps a raw text embedding (`d_txt`) into the shared space via the
/// frozen `e_txt` projection.
pub fn project_query(model: &WildSatModel, raw: &[f64]) -> Result<Vec<f64>, EvalError> {
    let t = Tensor::new(vec![1, raw.len()], raw.to_vec())?;
    Ok(model.project_text(&t)?.into_data())
}

/// Projects a raw text query, then ranks the index.
pub fn query_index(
    index: &RetrievalIndex,
    model: &WildSatModel,
    raw: &[f64],
    k: usize,
) -> Result<Vec<(u64, f64)>, EvalError> {
    index.query(&project_query(model, raw)?, k)
}

/// Index of the class whose projected text embedding is most cosine-similar
/// to the tile's `txt_head` embedding; ties to the lower class index.
pub fn zero_shot_classify(
    model: &WildSatModel,
    tile: &TileRecord,
    class_texts: &Tensor,
) -> Result<usize, EvalError> {
    Ok(zero_shot_batch(model, &[tile], class_texts)?[0])
}

pub fn zero_shot_batch(
    model: &WildSatModel,
    tiles: &[&TileRecord],
    class_texts: &Tensor,
) -> Result<Vec<usize>, EvalError> {
    let classes = model.project_text(class_texts)?;
    let emb = tile_text_embeddings(model, tiles)?;
    Ok((0..tiles.len())
        .map(|i| {
            let scores: Vec<f64> = (0..classes.shape()[0])
                .map(|c| dot(emb.row(i), classes.row(c)))
                .collect();
            top_k_indices(&scores, 1)[0]
        })
        .collect())
}
