//! The run directory: config echo, seed, CSV tables, JSON metrics and SVG plots.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use contrastive_core::Vector;
use serde::Serialize;

pub struct RunDir {
    path: PathBuf,
    written: Vec<String>,
}

impl RunDir {
    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path).with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// File names written so far, in order.
    pub fn written(&self) -> &[String] {
        &self.written
    }

    fn target(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.path.join(name)
    }

    pub fn text(&mut self, name: &str, contents: &str) -> Result<()> {
        let p = self.target(name);
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.text(name, &s)
    }

    /// The config echo plus the bare seed.
    pub fn echo<T: Serialize>(&mut self, config: &T, seed: u64) -> Result<()> {
        self.json("config.json", config)?;
        self.text("seed.txt", &format!("{seed}\n"))
    }

    pub fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let p = self.target(name);
        let mut w = csv::Writer::from_path(&p).with_context(|| format!("writing {}", p.display()))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One row per sample; `label` adds a leading column such as the λ or arm.
    pub fn samples(&mut self, name: &str, label: Option<&str>, groups: &[(String, &[Vector])]) -> Result<()> {
        let d = groups
            .iter()
            .flat_map(|g| g.1.first())
            .map(|v| v.len())
            .next()
            .unwrap_or(0);
        let mut header: Vec<String> = label.into_iter().map(String::from).collect();
        header.extend(coord_names("x", d));
        let rows: Vec<Vec<String>> = groups
            .iter()
            .flat_map(|(tag, samples)| {
                samples.iter().map(move |v| {
                    let mut row: Vec<String> = label.map(|_| tag.clone()).into_iter().collect();
                    row.extend(v.iter().map(|x| num(*x)));
                    row
                })
            })
            .collect();
        self.csv(name, &header, &rows)
    }
}

pub fn coord_names(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|k| format!("{prefix}{k}")).collect()
}

/// Shortest round-trip decimal form, so CSVs are exact and reproducible.
pub fn num(x: f64) -> String {
    format!("{x}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_samples_with_label_column() {
        let dir = std::env::temp_dir().join(format!("contrastive-artifacts-{}", std::process::id()));
        let mut run = RunDir::create(&dir).unwrap();
        let a = vec![Vector::from_vec(vec![1.0, 0.1]), Vector::from_vec(vec![2.0, -0.5])];
        run.samples("s.csv", Some("lambda"), &[("4".into(), &a)]).unwrap();
        let text = fs::read_to_string(dir.join("s.csv")).unwrap();
        assert_eq!(text, "lambda,x0,x1\n4,1,0.1\n4,2,-0.5\n");
        assert_eq!(run.written(), ["s.csv"]);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn numbers_round_trip() {
        let x = 0.1 + 0.2;
        assert_eq!(num(x).parse::<f64>().unwrap(), x);
    }
}
