//! Piecewise-linear heightfields.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RngStream, StreamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    Flat,
    Rough,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerrainConfig {
    pub kind: TerrainKind,
    /// Node heights are uniform in `[-amplitude, amplitude]` (m).
    pub amplitude: f64,
    /// Node spacing (m).
    pub cell_size: f64,
    /// First node abscissa (m).
    pub x0: f64,
    /// Extent covered by nodes (m). Spawn points are drawn from it.
    pub length: f64,
}

impl Default for TerrainConfig {
    fn default() -> Self {
        Self {
            kind: TerrainKind::Flat,
            amplitude: 0.0,
            cell_size: 0.25,
            x0: 0.0,
            length: 40.0,
        }
    }
}

impl TerrainConfig {
    pub fn rough(amplitude: f64, cell_size: f64) -> Self {
        Self {
            kind: TerrainKind::Rough,
            amplitude,
            cell_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0) {
            return Err(Error::config("env.terrain.amplitude", "must be >= 0"));
        }
        if !(self.cell_size > 0.0) || !(self.length > self.cell_size) {
            return Err(Error::config(
                "env.terrain",
                "cell_size must be positive and smaller than length",
            ));
        }
        Ok(())
    }
}

/// Heights at evenly spaced nodes, linearly interpolated, held constant
/// beyond either end.
#[derive(Debug, Clone, PartialEq)]
pub struct Terrain {
    x0: f64,
    cell: f64,
    heights: Vec<f64>,
}

impl Terrain {
    pub fn flat(x0: f64, length: f64, cell: f64) -> Self {
        let n = (length / cell).ceil() as usize + 1;
        Self {
            x0,
            cell,
            heights: vec![0.0; n],
        }
    }

    pub fn from_nodes(x0: f64, cell: f64, heights: Vec<f64>) -> Result<Self> {
        if heights.len() < 2 || !(cell > 0.0) {
            return Err(Error::contract("terrain needs >= 2 nodes and positive spacing"));
        }
        Ok(Self { x0, cell, heights })
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    pub fn x0(&self) -> f64 {
        self.x0
    }

    pub fn cell(&self) -> f64 {
        self.cell
    }

    pub fn extent(&self) -> (f64, f64) {
        (self.x0, self.x0 + self.cell * (self.heights.len() - 1) as f64)
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let s = (x - self.x0) / self.cell;
        let last = self.heights.len() - 2;
        if s <= 0.0 {
            (0, 0.0)
        } else if s >= (last + 1) as f64 {
            (last, 1.0)
        } else {
            let i = (s.floor() as usize).min(last);
            (i, s - i as f64)
        }
    }

    pub fn height(&self, x: f64) -> f64 {
        let (i, t) = self.locate(x);
        self.heights[i] + t * (self.heights[i + 1] - self.heights[i])
    }

    /// dh/dx; zero outside the node range.
    pub fn slope(&self, x: f64) -> f64 {
        let (lo, hi) = self.extent();
        if x < lo || x > hi {
            return 0.0;
        }
        let (i, _) = self.locate(x);
        (self.heights[i + 1] - self.heights[i]) / self.cell
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("x_m,height_m\n");
        for (i, h) in self.heights.iter().enumerate() {
            text.push_str(&format!("{},{}\n", self.x0 + self.cell * i as f64, h));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut xs = Vec::new();
        let mut hs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("column {i} is not a number"),
                    })
            };
            xs.push(parse(0)?);
            hs.push(parse(1)?);
        }
        if xs.len() < 2 {
            return Err(Error::Parse {
                line: 1,
                message: "terrain needs at least two nodes".into(),
            });
        }
        let cell = xs[1] - xs[0];
        Self::from_nodes(xs[0], cell, hs)
    }
}

/// Build the heightfield described by `cfg`. Rough node heights come from
/// the terrain stream of `seed`.
pub fn generate_terrain(cfg: &TerrainConfig, seed: u64) -> Result<Terrain> {
    cfg.validate()?;
    let mut t = Terrain::flat(cfg.x0, cfg.length, cfg.cell_size);
    if cfg.kind == TerrainKind::Rough && cfg.amplitude > 0.0 {
        let mut rng = RngStream::new(seed, 0, StreamId::Terrain);
        for h in &mut t.heights {
            *h = rng.uniform_range(-cfg.amplitude, cfg.amplitude);
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_is_flat() {
        let t = generate_terrain(&TerrainConfig::rough(0.0, 0.2), 3).unwrap();
        assert!(t.heights().iter().all(|&h| h == 0.0));
    }

    #[test]
    fn same_seed_same_field_and_bounded() {
        let cfg = TerrainConfig::rough(0.03, 0.2);
        let a = generate_terrain(&cfg, 9).unwrap();
        let b = generate_terrain(&cfg, 9).unwrap();
        let c = generate_terrain(&cfg, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.heights().iter().all(|h| h.abs() <= 0.03));
    }

    #[test]
    fn interpolation_and_clamping() {
        let t = Terrain::from_nodes(0.0, 1.0, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(t.height(0.5), 0.5);
        assert_eq!(t.height(1.5), 0.5);
        assert_eq!(t.height(-3.0), 0.0);
        assert_eq!(t.height(7.0), 0.0);
        assert_eq!(t.slope(0.5), 1.0);
        assert_eq!(t.slope(1.5), -1.0);
        assert_eq!(t.slope(9.0), 0.0);
    }

    #[test]
    fn negative_amplitude_rejected() {
        assert!(generate_terrain(&TerrainConfig::rough(-0.1, 0.2), 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("terrain.csv");
        let t = generate_terrain(&TerrainConfig::rough(0.02, 0.5), 4).unwrap();
        t.write_csv(&path).unwrap();
        let back = Terrain::read_csv(&path).unwrap();
        assert_eq!(back.heights(), t.heights());
    }
}
