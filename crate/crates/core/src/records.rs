//! Tile classes, region-qualified tile keys, and the prediction/truth CSV
//! formats shared by inference, evaluation and mapping.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geogrid::TileId;

pub const PREDICTION_HEADER: [&str; 5] = ["region_id", "row", "col", "predicted_class", "confidence"];

/// Binary tile class. Index order is fixed: 0 = background, 1 = waste.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Background = 0,
    Waste = 1,
}

impl Class {
    pub const NAMES: [&'static str; 2] = ["background", "waste"];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        Self::NAMES[self.index()]
    }

    pub fn is_waste(self) -> bool {
        self == Class::Waste
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Class {
    type Err = String;

    /// Case- and whitespace-insensitive.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "waste" => Ok(Class::Waste),
            "background" => Ok(Class::Background),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TileKey {
    pub region_id: String,
    pub tile: TileId,
}

impl TileKey {
    pub fn new(region_id: impl Into<String>, tile: TileId) -> Self {
        TileKey {
            region_id: region_id.into(),
            tile,
        }
    }
}

impl fmt::Display for TileKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.region_id, self.tile)
    }
}

/// One row of a prediction CSV (also used for truth files).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub key: TileKey,
    pub class: Class,
    pub confidence: f64,
}

impl PredictionRow {
    /// Waste probability implied by the binary argmax and its confidence.
    pub fn waste_score(&self) -> f64 {
        if self.class.is_waste() {
            self.confidence
        } else {
            1.0 - self.confidence
        }
    }
}

pub fn write_predictions_csv(path: impl AsRef<Path>, rows: &[PredictionRow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_predictions(&mut w, rows).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_predictions<W: Write>(w: &mut W, rows: &[PredictionRow]) -> std::io::Result<()> {
    writeln!(w, "{}", PREDICTION_HEADER.join(","))?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.key.region_id, r.key.tile.row, r.key.tile.col, r.class, r.confidence
        )?;
    }
    Ok(())
}

/// Reads a prediction CSV. The class column may be named `predicted_class`
/// or `label`; `confidence` defaults to 1.0 when absent (truth files).
pub fn read_predictions_csv(path: impl AsRef<Path>) -> Result<Vec<PredictionRow>> {
    let path = path.as_ref();
    let ctx = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::parse(&ctx, "header", format!("{other:?}")),
        })?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let region = col("region_id").ok_or_else(|| Error::parse(&ctx, "region_id", "missing column"))?;
    let row_i = col("row").ok_or_else(|| Error::parse(&ctx, "row", "missing column"))?;
    let col_i = col("col").ok_or_else(|| Error::parse(&ctx, "col", "missing column"))?;
    let class_i = col("predicted_class")
        .or_else(|| col("label"))
        .ok_or_else(|| Error::parse(&ctx, "predicted_class", "missing column"))?;
    let conf_i = col("confidence");

    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        let field = |i: usize, name: &str| {
            rec.get(i)
                .ok_or_else(|| Error::parse(&ctx, format!("{name} (line {line})"), "missing value"))
        };
        let parse_u32 = |i: usize, name: &str| -> Result<u32> {
            field(i, name)?
                .parse()
                .map_err(|e| Error::parse(&ctx, format!("{name} (line {line})"), e))
        };
        let class = field(class_i, "predicted_class")?
            .parse::<Class>()
            .map_err(|e| Error::parse(&ctx, format!("predicted_class (line {line})"), e))?;
        let confidence = match conf_i {
            Some(i) => {
                let c: f64 = field(i, "confidence")?
                    .parse()
                    .map_err(|e| Error::parse(&ctx, format!("confidence (line {line})"), e))?;
                if !(0.0..=1.0).contains(&c) {
                    return Err(Error::parse(
                        &ctx,
                        format!("confidence (line {line})"),
                        format!("{c} outside [0, 1]"),
                    ));
                }
                c
            }
            None => 1.0,
        };
        out.push(PredictionRow {
            key: TileKey::new(
                field(region, "region_id")?,
                TileId::new(parse_u32(row_i, "row")?, parse_u32(col_i, "col")?),
            ),
            class,
            confidence,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_parsing_normalizes() {
        assert_eq!("Waste ".parse::<Class>(), Ok(Class::Waste));
        assert_eq!(" BACKGROUND".parse::<Class>(), Ok(Class::Background));
        assert!("trash".parse::<Class>().is_err());
        assert_eq!(Class::Waste.index(), 1);
    }

    #[test]
    fn prediction_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let rows = vec![
            PredictionRow {
                key: TileKey::new("accra", TileId::new(0, 3)),
                class: Class::Waste,
                confidence: 0.9975273768433653,
            },
            PredictionRow {
                key: TileKey::new("accra", TileId::new(1, 0)),
                class: Class::Background,
                confidence: 0.5,
            },
        ];
        write_predictions_csv(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("region_id,row,col,predicted_class,confidence\n"));
        assert_eq!(read_predictions_csv(&p).unwrap(), rows);
        assert_eq!(rows[1].waste_score(), 0.5);
    }

    #[test]
    fn truth_file_with_label_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "region_id,row,col,label\nr1,2,3, Waste\n").unwrap();
        let rows = read_predictions_csv(&p).unwrap();
        assert_eq!(rows[0].class, Class::Waste);
        assert_eq!(rows[0].confidence, 1.0);
    }

    #[test]
    fn bad_confidence_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "region_id,row,col,predicted_class,confidence\nr1,0,0,waste,1.5\n")
            .unwrap();
        let err = read_predictions_csv(&p).unwrap_err().to_string();
        assert!(err.contains("confidence (line 2)"), "{err}");
    }
}
