//! Feature CSVs, label files, edge lists and the loss trace.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use owl_core::data::RawDataset;
use owl_core::train::EpochRecord;
use owl_core::Mat;

use crate::error::{Error, Result};

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads a feature matrix: a header line, then one sample per row.
pub fn read_matrix(path: &Path) -> Result<Mat> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let width = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(path, line, e.to_string()))?;
        if rec.len() != width {
            return Err(Error::parse(
                path,
                line,
                format!("expected {width} cells, found {}", rec.len()),
            ));
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::parse(
                    path,
                    line,
                    format!("column {}: {cell:?} is not a number", j + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    path,
                    line,
                    format!("column {}: non-finite value", j + 1),
                ));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::parse(path, 1, "no data rows"));
    }
    Ok(Mat::new(rows, width, data)?)
}

/// Writes `x` with a `f0,f1,...` header. Values use the shortest
/// representation that parses back to the same bits.
pub fn write_matrix(path: &Path, x: &Mat) -> Result<()> {
    let mut w = create(path)?;
    let header: Vec<String> = (0..x.cols()).map(|j| format!("f{j}")).collect();
    let mut out = header.join(",");
    out.push('\n');
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    w.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// One non-negative integer per line; blank lines are skipped.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(open(path)?).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        out.push(
            t.parse()
                .map_err(|_| Error::parse(path, i + 1, format!("{t:?} is not a class index")))?,
        );
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut w = create(path)?;
    for l in labels {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads modality CSVs and the label file; every file must agree on N.
pub fn load_csv(
    paths: &[impl AsRef<Path>],
    label_path: &Path,
    known_classes: Vec<usize>,
) -> Result<RawDataset> {
    if paths.is_empty() {
        return Err(Error::config("no modality files given"));
    }
    let labels = read_labels(label_path)?;
    let mut modalities = Vec::with_capacity(paths.len());
    for p in paths {
        let p = p.as_ref();
        let x = read_matrix(p)?;
        if x.rows() != labels.len() {
            return Err(Error::Runtime(format!(
                "{} has {} samples but {} has {} labels",
                p.display(),
                x.rows(),
                label_path.display(),
                labels.len()
            )));
        }
        modalities.push(x);
    }
    Ok(RawDataset {
        modalities,
        labels,
        known_classes,
    })
}

/// Undirected edges, one whitespace-separated `i j` pair per line, 0-based.
/// Lines starting with `#` are comments.
pub fn read_edge_list(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(open(path)?).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(Error::parse(path, i + 1, "expected two vertex indices"));
        }
        let mut ends = [0usize; 2];
        for (e, s) in ends.iter_mut().zip(&parts) {
            *e = s
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("{s:?} is not a vertex index")))?;
            if *e >= n {
                return Err(Error::parse(
                    path,
                    i + 1,
                    format!("vertex {e} out of range for {n} samples"),
                ));
            }
        }
        out.push((ends[0], ends[1]));
    }
    Ok(out)
}

pub const TRACE_HEADER: &str = "epoch,l_k,l_u,l_total,acc_val";

pub fn write_trace(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    let mut w = create(path)?;
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&format!(
            "{},{:?},{:?},{:?},{:?}\n",
            r.epoch, r.l_k, r.l_u, r.l_total, r.acc_val
        ));
    }
    w.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut reader = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::parse(path, line, e.to_string()))?;
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(path, line, format!("bad value in column {}", j + 1)))
        };
        out.push(EpochRecord {
            epoch: num(0)? as usize,
            l_k: num(1)?,
            l_u: num(2)?,
            l_total: num(3)?,
            acc_val: num(4)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn reads_small_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "x.csv", "a,b\n1,2\n3,4\n5.5,-6\n");
        let x = read_matrix(&p).unwrap();
        assert_eq!(x.shape(), (3, 2));
        assert_eq!(x[(2, 1)], -6.0);
    }

    #[test]
    fn ragged_and_non_numeric_rows_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "x.csv", "a,b\n1,2\n3\n");
        assert!(matches!(read_matrix(&p), Err(Error::Parse { line: 3, .. })));
        let p = write(dir.path(), "y.csv", "a,b\n1,2\n3,4\nfoo,1\n");
        let err = read_matrix(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn label_count_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let x = write(dir.path(), "x.csv", "a\n1\n2\n3\n");
        let y = write(dir.path(), "y.txt", "0\n1\n");
        let msg = load_csv(&[x], &y, vec![0]).unwrap_err().to_string();
        assert!(msg.contains('3') && msg.contains('2'), "{msg}");
    }

    #[test]
    fn two_modalities() {
        let dir = tempfile::tempdir().unwrap();
        let a = write(dir.path(), "a.csv", "a\n1\n2\n");
        let b = write(dir.path(), "b.csv", "a,b\n1,0\n2,0\n");
        let y = write(dir.path(), "y.txt", "0\n1\n");
        let raw = load_csv(&[a, b], &y, vec![0, 1]).unwrap();
        assert_eq!(raw.modalities.len(), 2);
        assert_eq!(raw.modalities[1].shape(), (2, 2));
    }

    #[test]
    fn matrix_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let x = Mat::randn(7, 3, &mut owl_core::Rng::new(3));
        let p = dir.path().join("m.csv");
        write_matrix(&p, &x).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), x);
    }

    #[test]
    fn edge_list_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.txt", "# graph\n0 1\n1  2\n");
        assert_eq!(read_edge_list(&p, 3).unwrap(), vec![(0, 1), (1, 2)]);
        assert!(matches!(
            read_edge_list(&p, 2),
            Err(Error::Parse { line: 3, .. })
        ));
    }
}
