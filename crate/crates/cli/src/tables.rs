//! CSV and plain-text table output.

use std::path::Path;

use shaftpower::metrics::{median, MeanSd};
use shaftpower::numfmt::format_f64;
use shaftpower::{Error, Result};

/// A header plus string cells, written either as CSV or as an aligned text table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            crate::pipeline::ensure_dir(parent)?;
        }
        let csv_err = |e: csv::Error| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn render(&self, title: &str) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|j| {
                self.rows
                    .iter()
                    .map(|r| r[j].chars().count())
                    .chain([self.header[j].chars().count()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1));
        let mut out = format!("{title}\n{rule}\n{}\n{rule}\n", line(&self.header));
        for row in &self.rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out.push_str(&rule);
        out.push('\n');
        out
    }

    pub fn write_text(&self, path: &Path, title: &str) -> Result<()> {
        std::fs::write(path, self.render(title)).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Full-precision cell.
pub fn num(v: f64) -> String {
    format_f64(v)
}

/// `mean ± sd` at a fixed number of decimals, for text tables.
pub fn pm(s: &MeanSd, decimals: usize) -> String {
    format!("{:.*} ± {:.*}", decimals, s.mean, decimals, s.sd)
}

/// Mean, SD and median of `values` as three full-precision cells.
pub fn stat_cells(values: &[f64]) -> Result<Vec<String>> {
    let s = MeanSd::of(values)?;
    let m = median(values).ok_or_else(|| Error::Argument("median of empty list".into()))?;
    Ok(vec![num(s.mean), num(s.sd), num(m)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_text() {
        let mut t = Table::new(["vessel", "mape"]);
        t.push(vec!["A".into(), num(1.5)]);
        t.push(vec!["LONGER".into(), "2".into()]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/t.csv");
        t.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "vessel,mape\nA,1.5000000000000000e0\nLONGER,2\n");
        let r = t.render("T");
        assert!(r.starts_with("T\n"));
        assert!(r.contains(&format!("LONGER  {:>20}\n", "2")));
        assert!(r.contains(&format!("vessel  {:>20}\n", "mape")));
    }

    #[test]
    fn stats() {
        let c = stat_cells(&[10.0, 14.0]).unwrap();
        assert_eq!(c, vec![num(12.0), num(2.0), num(12.0)]);
        assert_eq!(pm(&MeanSd { mean: 1.0, sd: 0.25 }, 2), "1.00 ± 0.25");
    }
}
