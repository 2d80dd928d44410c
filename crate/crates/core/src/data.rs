//! Paired satellite/street corpora: manifest ingestion and preprocessing.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polar::{polar_transform, OutOfBounds, PolarParams};
use crate::raster::{RasterImage, ValueRange};

/// Easting/northing in meters.
pub type Coords = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub satellite: PathBuf,
    pub street: PathBuf,
    pub coords: Option<Coords>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths were resolved against.
    pub root: PathBuf,
    pub split: String,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub satellite: RasterImage,
    pub street: RasterImage,
    pub coords: Option<Coords>,
}

const BASE_HEADER: [&str; 3] = ["id", "satellite", "street"];
const COORD_HEADER: [&str; 2] = ["easting", "northing"];

/// Reads `id,satellite,street[,easting,northing]`. The split name is the
/// manifest's parent directory name.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let split = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "default".into());
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let bad = |msg: String| Error::Data(format!("{}: {msg}", path.display()));

    let header: Vec<String> = reader
        .headers()
        .map_err(|e| bad(format!("unreadable header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let with_coords = match header.len() {
        3 if header == BASE_HEADER => false,
        5 if header[..3] == BASE_HEADER && header[3..] == COORD_HEADER => true,
        _ => {
            return Err(bad(format!(
                "header must be id,satellite,street[,easting,northing], got {}",
                header.join(",")
            )))
        }
    };

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    let mut rows_with_coords = 0usize;
    for (i, record) in reader.records().enumerate() {
        // Header is line 1.
        let row = i + 2;
        let record = record.map_err(|e| bad(format!("row {row}: {e}")))?;
        if record.len() != header.len() {
            return Err(bad(format!("row {row}: expected {} fields, got {}", header.len(), record.len())));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(bad(format!("row {row}: empty id")));
        }
        if !seen.insert(id.clone()) {
            return Err(bad(format!("row {row}: duplicate id {id}")));
        }
        let resolve = |field: &str| -> Result<PathBuf> {
            let p = root.join(field);
            if !p.is_file() {
                return Err(bad(format!("row {row}: missing file {}", p.display())));
            }
            Ok(p)
        };
        let satellite = resolve(&record[1])?;
        let street = resolve(&record[2])?;
        let coords = if with_coords {
            match (&record[3], &record[4]) {
                ("", "") => None,
                (e, n) => {
                    let parse = |s: &str| {
                        s.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| bad(format!("row {row}: bad coordinate {s:?}")))
                    };
                    rows_with_coords += 1;
                    Some((parse(e)?, parse(n)?))
                }
            }
        } else {
            None
        };
        entries.push(ManifestEntry {
            id,
            satellite,
            street,
            coords,
        });
    }
    if rows_with_coords != 0 && rows_with_coords != entries.len() {
        return Err(bad(format!(
            "coordinates given for {rows_with_coords} of {} rows; provide all or none",
            entries.len()
        )));
    }
    Ok(DatasetManifest {
        root,
        split,
        entries,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decodes every pair; `street_shape` is the expected `(H, W)` panorama.
    pub fn load_pairs(&self, street_shape: (usize, usize)) -> Result<Vec<ImagePair>> {
        self.entries
            .iter()
            .map(|e| {
                let satellite = RasterImage::load_png(&e.satellite)?;
                let street = RasterImage::load_png(&e.street)?;
                if satellite.height() != satellite.width() {
                    return Err(Error::Data(format!("{}: satellite image is not square", e.id)));
                }
                if (street.height(), street.width()) != street_shape {
                    return Err(Error::Data(format!(
                        "{}: panorama is {}x{}, expected {}x{}",
                        e.id,
                        street.height(),
                        street.width(),
                        street_shape.0,
                        street_shape.1
                    )));
                }
                Ok(ImagePair {
                    id: e.id.clone(),
                    satellite,
                    street,
                    coords: e.coords,
                })
            })
            .collect()
    }
}

/// Applies the same horizontal flip to both images with probability 1/2.
/// Returns whether a flip happened.
pub fn paired_flip<R: Rng + ?Sized>(polar: &mut RasterImage, street: &mut RasterImage, rng: &mut R) -> bool {
    let flip = rng.random_bool(0.5);
    if flip {
        *polar = polar.flip_horizontal();
        *street = street.flip_horizontal();
    }
    flip
}

/// Polar-warps the satellite, maps both images to `[-1, 1]` and, when
/// `augment` is set, applies a shared random horizontal flip.
pub fn prepare_pair<R: Rng + ?Sized>(
    pair: &ImagePair,
    params: &PolarParams,
    oob: OutOfBounds,
    augment: bool,
    rng: &mut R,
) -> Result<(RasterImage, RasterImage)> {
    if (pair.street.height(), pair.street.width()) != (params.polar_height, params.polar_width) {
        return Err(Error::shape(
            "prepare_pair panorama",
            (params.polar_height, params.polar_width),
            (pair.street.height(), pair.street.width()),
        ));
    }
    let mut polar = polar_transform(&pair.satellite, params, oob)?
        .to_rgb()
        .to_range(ValueRange::Signed);
    let mut street = pair.street.to_rgb().to_range(ValueRange::Signed);
    if augment {
        paired_flip(&mut polar, &mut street, rng);
    }
    Ok((polar, street))
}
