//! On-disk dataset layout:
//!
//! ```text
//! observations.csv          lat,lon,species_id
//! raster.json + raster.bin  header + little-endian f32 (row, col, channel)
//! tiles/manifest.json       [{tile_id, lat, lon, timestamp, file, c, h, w}]
//! tiles/<file>              little-endian f32, C x H x W
//! text/sections.json        {d_txt, sections: [{species_id, section_id, row}]}
//! text/embeddings.bin       little-endian f32, one row of d_txt per section
//! truth/truth.json          synthetic worlds only
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    CovariateRaster, GeoDataset, GeoError, GeoObservation, SyntheticWorld, TextSection, TileRecord,
    WorldTruth,
};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RasterHeader {
    rows: usize,
    cols: usize,
    channels: usize,
    lat0: f64,
    lon0: f64,
    dlat: f64,
    dlon: f64,
    channel_min: Vec<f64>,
    channel_max: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TileEntry {
    tile_id: u64,
    lat: f64,
    lon: f64,
    timestamp: i64,
    file: String,
    c: usize,
    h: usize,
    w: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SectionEntry {
    species_id: u32,
    section_id: u32,
    row: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SectionsFile {
    d_txt: usize,
    sections: Vec<SectionEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObservationRow {
    lat: f64,
    lon: f64,
    species_id: u32,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GeoError + '_ {
    move |source| GeoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(file: &str, detail: impl ToString) -> GeoError {
    GeoError::Format {
        file: file.to_string(),
        detail: detail.to_string(),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, rel: &str) -> Result<T, GeoError> {
    let path = dir.join(rel);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| format_err(rel, format!("malformed header: {e}")))
}

fn write_json<T: Serialize>(dir: &Path, rel: &str, value: &T) -> Result<(), GeoError> {
    let path = dir.join(rel);
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(&path, text).map_err(io_err(&path))
}

pub(crate) fn read_f32_le(path: &Path, rel: &str) -> Result<Vec<f64>, GeoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(format_err(
            rel,
            format!("length {} is not a multiple of 4", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

pub(crate) fn write_f32_le(path: &Path, values: &[f64]) -> Result<(), GeoError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_observations(dir: &Path) -> Result<Vec<GeoObservation>, GeoError> {
    const FILE: &str = "observations.csv";
    let path = dir.join(FILE);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| format_err(FILE, e))?;
    let headers = reader.headers().map_err(|e| format_err(FILE, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["lat", "lon", "species_id"] {
        return Err(format_err(
            FILE,
            format!(
                "malformed header {:?}, expected lat,lon,species_id",
                headers
            ),
        ));
    }
    let mut out = Vec::new();
    for (record, row) in reader.deserialize::<ObservationRow>().enumerate() {
        let row = row.map_err(|e| GeoError::Record {
            file: FILE.into(),
            record,
            detail: e.to_string(),
        })?;
        let obs = GeoObservation {
            lat: row.lat,
            lon: row.lon,
            species_id: row.species_id,
        };
        obs.validate().map_err(|detail| GeoError::Record {
            file: FILE.into(),
            record,
            detail,
        })?;
        out.push(obs);
    }
    Ok(out)
}

fn read_raster(dir: &Path) -> Result<CovariateRaster, GeoError> {
    let header: RasterHeader = read_json(dir, "raster.json")?;
    let values = read_f32_le(&dir.join("raster.bin"), "raster.bin")?;
    let expected = header.rows * header.cols * header.channels;
    if values.len() != expected {
        return Err(format_err(
            "raster.bin",
            format!("{} values, header declares {expected}", values.len()),
        ));
    }
    let raster = CovariateRaster {
        rows: header.rows,
        cols: header.cols,
        channels: header.channels,
        lat0: header.lat0,
        lon0: header.lon0,
        dlat: header.dlat,
        dlon: header.dlon,
        values,
        channel_min: header.channel_min,
        channel_max: header.channel_max,
    };
    raster
        .validate()
        .map_err(|e| format_err("raster.json", e))?;
    Ok(raster)
}

fn read_tiles(dir: &Path) -> Result<Vec<TileRecord>, GeoError> {
    const FILE: &str = "tiles/manifest.json";
    let entries: Vec<TileEntry> = read_json(dir, FILE)?;
    let mut tiles = Vec::with_capacity(entries.len());
    for (record, e) in entries.into_iter().enumerate() {
        let rec_err = |detail: String| GeoError::Record {
            file: FILE.into(),
            record,
            detail,
        };
        if tiles.iter().any(|t: &TileRecord| t.tile_id == e.tile_id) {
            return Err(rec_err(format!("duplicate tile_id {}", e.tile_id)));
        }
        let probe = GeoObservation {
            lat: e.lat,
            lon: e.lon,
            species_id: 0,
        };
        probe.validate().map_err(&rec_err)?;
        let rel = format!("tiles/{}", e.file);
        let pixels = read_f32_le(&dir.join(&rel), &rel)?;
        let tile = TileRecord {
            tile_id: e.tile_id,
            lat: e.lat,
            lon: e.lon,
            timestamp: e.timestamp,
            channels: e.c,
            height: e.h,
            width: e.w,
            pixels,
        };
        tile.validate().map_err(&rec_err)?;
        tiles.push(tile);
    }
    Ok(tiles)
}

fn read_texts(dir: &Path) -> Result<Vec<TextSection>, GeoError> {
    const FILE: &str = "text/sections.json";
    let header: SectionsFile = read_json(dir, FILE)?;
    if header.d_txt == 0 {
        return Err(format_err(FILE, "d_txt must be positive"));
    }
    let values = read_f32_le(&dir.join("text/embeddings.bin"), "text/embeddings.bin")?;
    if values.len() % header.d_txt != 0 {
        return Err(format_err(
            "text/embeddings.bin",
            format!(
                "{} values is not divisible by d_txt {}",
                values.len(),
                header.d_txt
            ),
        ));
    }
    let rows = values.len() / header.d_txt;
    header
        .sections
        .iter()
        .enumerate()
        .map(|(record, s)| {
            if s.row >= rows {
                return Err(GeoError::Record {
                    file: FILE.into(),
                    record,
                    detail: format!("embedding row {} beyond {rows} rows", s.row),
                });
            }
            let embedding = values[s.row * header.d_txt..(s.row + 1) * header.d_txt].to_vec();
            if embedding.iter().any(|v| !v.is_finite()) {
                return Err(GeoError::Record {
                    file: FILE.into(),
                    record,
                    detail: "non-finite embedding".into(),
                });
            }
            Ok(TextSection {
                species_id: s.species_id,
                section_id: s.section_id,
                embedding,
            })
        })
        .collect()
}

/// Reads and validates a dataset directory.
pub fn ingest_dataset(dir: &Path) -> Result<GeoDataset, GeoError> {
    Ok(GeoDataset {
        observations: read_observations(dir)?,
        raster: read_raster(dir)?,
        tiles: read_tiles(dir)?,
        texts: read_texts(dir)?,
    })
}

fn create_dir(path: PathBuf) -> Result<PathBuf, GeoError> {
    fs::create_dir_all(&path).map_err(io_err(&path))?;
    Ok(path)
}

/// Writes `dataset` into `dir` (created if needed). Values are stored as f32.
pub fn write_dataset(dataset: &GeoDataset, dir: &Path) -> Result<(), GeoError> {
    create_dir(dir.to_path_buf())?;

    let obs_path = dir.join("observations.csv");
    let mut writer =
        csv::Writer::from_path(&obs_path).map_err(|e| format_err("observations.csv", e))?;
    for o in &dataset.observations {
        writer
            .serialize(ObservationRow {
                lat: o.lat,
                lon: o.lon,
                species_id: o.species_id,
            })
            .map_err(|e| format_err("observations.csv", e))?;
    }
    writer.flush().map_err(io_err(&obs_path))?;

    let r = &dataset.raster;
    write_json(
        dir,
        "raster.json",
        &RasterHeader {
            rows: r.rows,
            cols: r.cols,
            channels: r.channels,
            lat0: r.lat0,
            lon0: r.lon0,
            dlat: r.dlat,
            dlon: r.dlon,
            channel_min: r.channel_min.clone(),
            channel_max: r.channel_max.clone(),
        },
    )?;
    write_f32_le(&dir.join("raster.bin"), &r.values)?;

    let tiles_dir = create_dir(dir.join("tiles"))?;
    let mut manifest = Vec::with_capacity(dataset.tiles.len());
    for t in &dataset.tiles {
        let file = format!("{:08}.bin", t.tile_id);
        write_f32_le(&tiles_dir.join(&file), &t.pixels)?;
        manifest.push(TileEntry {
            tile_id: t.tile_id,
            lat: t.lat,
            lon: t.lon,
            timestamp: t.timestamp,
            file,
            c: t.channels,
            h: t.height,
            w: t.width,
        });
    }
    write_json(dir, "tiles/manifest.json", &manifest)?;

    let text_dir = create_dir(dir.join("text"))?;
    let d_txt = dataset.text_dim().unwrap_or(1);
    let mut flat = Vec::with_capacity(dataset.texts.len() * d_txt);
    let mut sections = Vec::with_capacity(dataset.texts.len());
    for (row, s) in dataset.texts.iter().enumerate() {
        if s.embedding.len() != d_txt {
            return Err(format_err(
                "text/embeddings.bin",
                "text embeddings have unequal lengths",
            ));
        }
        flat.extend_from_slice(&s.embedding);
        sections.push(SectionEntry {
            species_id: s.species_id,
            section_id: s.section_id,
            row,
        });
    }
    write_f32_le(&text_dir.join("embeddings.bin"), &flat)?;
    write_json(dir, "text/sections.json", &SectionsFile { d_txt, sections })
}

/// Writes a synthetic world: the dataset plus `truth/truth.json`.
pub fn write_world(world: &SyntheticWorld, dir: &Path) -> Result<(), GeoError> {
    write_dataset(&world.dataset, dir)?;
    create_dir(dir.join("truth"))?;
    write_json(dir, "truth/truth.json", &world.truth)?;
    write_json(dir, "truth/config.json", &world.config)
}

pub fn read_truth(dir: &Path) -> Result<WorldTruth, GeoError> {
    read_json(dir, "truth/truth.json")
}
