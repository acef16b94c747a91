//! Reading and writing datasets, transforms, metrics and exported systems.
//!
//! Tiles and matches are JSON arrays written one record per line; transforms
//! are a JSON object keyed by tile id. Writers are deterministic: keys are
//! sorted and floats use the shortest round-trip representation.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::assembly::{merge_duplicates, MatchSet, Solution};
use crate::error::{Error, Result};
use crate::model::{TileSpec, TransformParams};
use crate::regularize::fmt_f64;
use crate::solvers::SolveReport;
use crate::sparse::CsrMatrix;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub tiles: Vec<TileSpec>,
    pub matches: Vec<MatchSet>,
    pub priors: Option<Solution>,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn json_lines<T: Serialize>(records: &[T]) -> String {
    if records.is_empty() {
        return "[]\n".to_string();
    }
    let body: Vec<String> = records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize"))
        .collect();
    format!("[\n{}\n]\n", body.join(",\n"))
}

pub fn load_tiles(path: &Path) -> Result<Vec<TileSpec>> {
    let tiles: Vec<TileSpec> = parse_json(path, &read_to_string(path)?)?;
    let mut seen = HashSet::new();
    for (index, t) in tiles.iter().enumerate() {
        let invalid = |message: String| Error::InvalidRecord {
            path: path.to_path_buf(),
            index,
            message,
        };
        t.validate().map_err(|e| invalid(e.to_string()))?;
        if !seen.insert(t.tile_id.as_str()) {
            return Err(invalid(format!("duplicate tile_id `{}`", t.tile_id)));
        }
    }
    Ok(tiles)
}

/// Match records as stored, with omitted weights set to one. Records are
/// decoded in parallel; order is preserved.
pub fn load_matches(path: &Path) -> Result<Vec<MatchSet>> {
    let raw: Vec<serde_json::Value> = parse_json(path, &read_to_string(path)?)?;
    raw.into_par_iter()
        .enumerate()
        .map(|(index, v)| {
            let invalid = |message: String| Error::InvalidRecord {
                path: path.to_path_buf(),
                index,
                message,
            };
            let mut m: MatchSet = serde_json::from_value(v).map_err(|e| invalid(e.to_string()))?;
            m.normalize().map_err(|e| invalid(e.to_string()))?;
            Ok(m)
        })
        .collect::<Vec<Result<MatchSet>>>()
        .into_iter()
        .collect()
}

pub fn load_transforms(path: &Path) -> Result<Solution> {
    let solution: Solution = parse_json(path, &read_to_string(path)?)?;
    for (index, (id, t)) in solution.iter().enumerate() {
        if t.coeffs.len() != t.kind.coeffs_per_tile() || !t.is_finite() {
            return Err(Error::InvalidRecord {
                path: path.to_path_buf(),
                index,
                message: format!("transform of `{id}` needs {} finite coefficients", t.kind.coeffs_per_tile()),
            });
        }
    }
    Ok(solution)
}

/// Loads and validates a dataset: every match must name known tiles and
/// duplicate pairs are merged.
pub fn load_dataset(tiles_path: &Path, matches_path: &Path, priors_path: Option<&Path>) -> Result<Dataset> {
    let tiles = load_tiles(tiles_path)?;
    let matches = load_matches(matches_path)?;
    let priors = priors_path.map(load_transforms).transpose()?;
    let dataset = Dataset {
        matches: merge_duplicates(&matches),
        tiles,
        priors,
    };
    check_references(&dataset, &matches)?;
    Ok(dataset)
}

fn check_references(dataset: &Dataset, raw: &[MatchSet]) -> Result<()> {
    let by_id: std::collections::HashMap<&str, &TileSpec> =
        dataset.tiles.iter().map(|t| (t.tile_id.as_str(), t)).collect();
    let mut out_of_bounds = 0usize;
    for (index, m) in raw.iter().enumerate() {
        for (id, pts) in [(&m.p_tile, &m.p), (&m.q_tile, &m.q)] {
            let tile = by_id.get(id.as_str()).ok_or_else(|| Error::DanglingReference {
                index,
                tile: id.clone(),
            })?;
            let (w, h) = (tile.width, tile.height);
            out_of_bounds += pts
                .iter()
                .filter(|p| p.x < -w || p.x > 2.0 * w || p.y < -h || p.y > 2.0 * h)
                .count();
        }
    }
    if out_of_bounds > 0 {
        warn!("{out_of_bounds} match points lie far outside their tile");
    }
    if let Some(priors) = &dataset.priors {
        if let Some(id) = priors.keys().find(|id| !by_id.contains_key(id.as_str())) {
            return Err(Error::UnknownTile(id.clone()));
        }
    }
    Ok(())
}

pub fn save_tiles(path: &Path, tiles: &[TileSpec]) -> Result<()> {
    write_file(path, &json_lines(tiles))
}

pub fn save_matches(path: &Path, matches: &[MatchSet]) -> Result<()> {
    write_file(path, &json_lines(matches))
}

pub fn save_dataset(tiles_path: &Path, matches_path: &Path, priors_path: Option<&Path>, dataset: &Dataset) -> Result<()> {
    save_tiles(tiles_path, &dataset.tiles)?;
    save_matches(matches_path, &dataset.matches)?;
    match (priors_path, &dataset.priors) {
        (Some(p), Some(priors)) => write_transforms(p, priors),
        _ => Ok(()),
    }
}

pub fn write_transforms(path: &Path, solution: &Solution) -> Result<()> {
    if solution.is_empty() {
        return write_file(path, "{}\n");
    }
    let body: Vec<String> = solution
        .iter()
        .map(|(id, t)| {
            format!(
                "  {}: {}",
                serde_json::to_string(id).expect("string serializes"),
                serde_json::to_string::<TransformParams>(t).expect("transform serializes")
            )
        })
        .collect();
    write_file(path, &format!("{{\n{}\n}}\n", body.join(",\n")))
}

/// The solve metrics stored next to a transforms file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub solve_seconds: f64,
    pub mean_residual_px: f64,
    pub precision: f64,
    pub nnz: usize,
    pub assembly_seconds: f64,
    pub point_matches: usize,
    pub backend: String,
    pub iterations: usize,
    pub status: String,
}

impl From<&SolveReport> for Metrics {
    fn from(r: &SolveReport) -> Self {
        let status = serde_json::to_value(r.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        Metrics {
            solve_seconds: r.solve_seconds,
            mean_residual_px: r.mean_residual_px,
            precision: r.precision,
            nnz: r.nnz,
            assembly_seconds: r.assembly_seconds,
            point_matches: r.point_matches,
            backend: r.backend.to_string(),
            iterations: r.iterations,
            status,
        }
    }
}

/// `out.json` → `out.metrics.json`.
pub fn metrics_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.metrics.json"))
}

/// Writes the transforms and, next to them, the metrics of the solve.
pub fn save_transforms(path: &Path, solution: &Solution, report: &SolveReport) -> Result<()> {
    write_transforms(path, solution)?;
    let metrics = serde_json::to_string_pretty(&Metrics::from(report)).expect("metrics serialize");
    write_file(&metrics_path(path), &(metrics + "\n"))
}

pub fn load_metrics(path: &Path) -> Result<Metrics> {
    parse_json(path, &read_to_string(path)?)
}

/// Symmetric coordinate Matrix Market file holding the lower triangle.
pub fn write_matrix_market(path: &Path, a: &CsrMatrix) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let lower: usize = (0..a.nrows()).map(|r| a.row(r).0.iter().filter(|&&c| c <= r).count()).sum();
    let mut body = || -> std::io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real symmetric")?;
        writeln!(w, "{} {} {}", a.nrows(), a.ncols(), lower)?;
        for r in 0..a.nrows() {
            let (cols, vals) = a.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                if c <= r {
                    writeln!(w, "{} {} {}", r + 1, c + 1, fmt_f64(v))?;
                }
            }
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        column: 1,
        message: message.into(),
    }
}

/// Reads a coordinate Matrix Market file; symmetric files are expanded.
pub fn read_matrix_market(path: &Path) -> Result<CsrMatrix> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| parse_error(path, 1, "empty file"))?;
    let header = header.map_err(|e| Error::io(path, e))?.to_lowercase();
    if !header.starts_with("%%matrixmarket matrix coordinate real") {
        return Err(parse_error(path, 1, "expected a real coordinate Matrix Market header"));
    }
    let symmetric = header.contains("symmetric");
    let mut size: Option<(usize, usize)> = None;
    let mut triplets = Vec::new();
    for (i, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || parse_error(path, i + 1, format!("malformed line `{line}`"));
        if size.is_none() {
            if fields.len() != 3 {
                return Err(bad());
            }
            size = Some((fields[0].parse().map_err(|_| bad())?, fields[1].parse().map_err(|_| bad())?));
            continue;
        }
        if fields.len() != 3 {
            return Err(bad());
        }
        let r: usize = fields[0].parse().map_err(|_| bad())?;
        let c: usize = fields[1].parse().map_err(|_| bad())?;
        let v: f64 = fields[2].parse().map_err(|_| bad())?;
        if r == 0 || c == 0 {
            return Err(bad());
        }
        triplets.push((r - 1, c - 1, v));
        if symmetric && r != c {
            triplets.push((c - 1, r - 1, v));
        }
    }
    let (nr, nc) = size.ok_or_else(|| parse_error(path, 2, "missing size line"))?;
    CsrMatrix::from_triplets(nr, nc, &triplets)
}

/// One value per line.
pub fn write_vector(path: &Path, v: &[f64]) -> Result<()> {
    let mut body = String::with_capacity(v.len() * 20);
    for x in v {
        body.push_str(&fmt_f64(*x));
        body.push('\n');
    }
    write_file(path, &body)
}

pub fn read_vector(path: &Path) -> Result<Vec<f64>> {
    read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| parse_error(path, i + 1, e.to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelKind, Point2};

    #[test]
    fn minimal_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (t, m) = (dir.path().join("tiles.json"), dir.path().join("matches.json"));
        fs::write(
            &t,
            r#"[{"tile_id":"a","z":0,"width":100,"height":100},{"tile_id":"b","z":0,"width":100,"height":100}]"#,
        )
        .unwrap();
        fs::write(&m, r#"[{"p_tile":"a","q_tile":"b","p":[[90,10],[95,50]],"q":[[0,10],[5,50]]}]"#).unwrap();
        let d = load_dataset(&t, &m, None).unwrap();
        assert_eq!(d.matches.len(), 1);
        assert_eq!(d.matches[0].w, vec![1.0, 1.0]);

        fs::write(&m, r#"[{"p_tile":"a","q_tile":"zz","p":[[90,10]],"q":[[0,10]]}]"#).unwrap();
        match load_dataset(&t, &m, None) {
            Err(Error::DanglingReference { index: 0, tile }) => assert_eq!(tile, "zz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_errors_report_position() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("tiles.json");
        fs::write(&t, "[\n{\"tile_id\": \"a\", \"z\": 0,,}\n]").unwrap();
        match load_tiles(&t) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        fs::write(&t, r#"[{"tile_id":"a","z":0,"width":-1,"height":1}]"#).unwrap();
        assert!(matches!(load_tiles(&t), Err(Error::InvalidRecord { index: 0, .. })));
    }

    #[test]
    fn transforms_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.json");
        let mut s = Solution::new();
        s.insert("b".into(), TransformParams::identity(ModelKind::Affine));
        s.insert("a".into(), TransformParams::affine([0.1 + 0.2, 1e-17, -3.5, 1.0], [1234.5678, -0.0001]));
        write_transforms(&path, &s).unwrap();
        assert_eq!(load_transforms(&path).unwrap(), s);
        let first = fs::read(&path).unwrap();
        write_transforms(&path, &s).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        assert_eq!(metrics_path(&path), dir.path().join("out.metrics.json"));
    }

    #[test]
    fn matrix_market_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.mtx");
        let a = CsrMatrix::from_triplets(3, 3, &[(0, 0, 2.0), (0, 2, -1.5), (2, 0, -1.5), (1, 1, 0.1), (2, 2, 4.0)]).unwrap();
        write_matrix_market(&path, &a).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("%%MatrixMarket matrix coordinate real symmetric\n3 3 4\n"));
        assert_eq!(read_matrix_market(&path).unwrap(), a);

        let v = dir.path().join("b.txt");
        let x = vec![1.0, -2.5e-12, 0.1 + 0.2];
        write_vector(&v, &x).unwrap();
        assert_eq!(read_vector(&v).unwrap(), x);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (t, m) = (dir.path().join("t.json"), dir.path().join("m.json"));
        let d = Dataset {
            tiles: vec![TileSpec::new("a", 0, 10.0, 10.0).unwrap(), TileSpec::new("b", 1, 10.0, 10.0).unwrap()],
            matches: vec![MatchSet::new(
                "a",
                "b",
                vec![Point2::new(0.1, 0.2), Point2::new(3.0, 1.0 / 3.0)],
                vec![Point2::new(1.0, 2.0), Point2::new(-1e-9, 7.0)],
                Some(vec![0.5, 2.0]),
            )
            .unwrap()],
            priors: None,
        };
        save_dataset(&t, &m, None, &d).unwrap();
        assert_eq!(load_dataset(&t, &m, None).unwrap(), d);
    }
}
