//! Line-based evaluation reports and ablation tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{io_err, Error, Result};

/// `#key=value` provenance lines followed by `metric<TAB>value` lines.
/// Values print in shortest round-trip form, so parsing is lossless.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub provenance: Vec<(String, String)>,
    pub metrics: Vec<(String, f64)>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn provenance(mut self, key: &str, value: impl ToString) -> Self {
        self.provenance.push((key.to_string(), value.to_string()));
        self
    }

    pub fn metric(&mut self, name: &str, value: f64) {
        self.metrics.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    pub fn parse(body: &str) -> Result<Self> {
        let mut r = Self::new();
        for line in body.lines() {
            if let Some(rest) = line.strip_prefix('#') {
                let (k, v) = rest.split_once('=').ok_or_else(|| {
                    Error::Format(format!("report: bad provenance line {line:?}"))
                })?;
                r.provenance.push((k.to_string(), v.to_string()));
            } else if !line.is_empty() {
                let (k, v) = line
                    .split_once('\t')
                    .ok_or_else(|| Error::Format(format!("report: bad metric line {line:?}")))?;
                let v = v
                    .parse()
                    .map_err(|_| Error::Format(format!("report: bad value in {line:?}")))?;
                r.metrics.push((k.to_string(), v));
            }
        }
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, v) in &self.provenance {
            writeln!(f, "#{k}={v}")?;
        }
        for (k, v) in &self.metrics {
            writeln!(f, "{k}\t{v}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub config_hash: String,
    pub seed: u64,
    pub metrics: Vec<f64>,
}

/// One row per variant of an ablation axis, with shared metric columns.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub axis: String,
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("#axis={}\nvariant\tconfig_hash\tseed", self.axis);
        for c in &self.columns {
            s.push('\t');
            s.push_str(c);
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{}\t{}\t{}", r.variant, r.config_hash, r.seed);
            for v in &r.metrics {
                let _ = write!(s, "\t{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(body: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("ablation table: {m}"));
        let mut lines = body.lines();
        let axis = lines
            .next()
            .and_then(|l| l.strip_prefix("#axis="))
            .ok_or_else(|| bad("missing #axis line".into()))?
            .to_string();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("missing header".into()))?
            .split('\t')
            .collect();
        if header.len() < 3 || header[..3] != ["variant", "config_hash", "seed"] {
            return Err(bad(format!("bad header {header:?}")));
        }
        let columns: Vec<String> = header[3..].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 + columns.len() {
                return Err(bad(format!("row {line:?} has {} fields", f.len())));
            }
            rows.push(AblationRow {
                variant: f[0].to_string(),
                config_hash: f[1].to_string(),
                seed: f[2].parse().map_err(|_| bad(format!("seed in {line:?}")))?,
                metrics: f[3..]
                    .iter()
                    .map(|v| v.parse().map_err(|_| bad(format!("value {v:?}"))))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(Self {
            axis,
            columns,
            rows,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_round_trip() {
        let mut r = EvalReport::new()
            .provenance("config_hash", "abc")
            .provenance("seed", 7);
        r.metric("accuracy", 0.1 + 0.2);
        r.metric("r@1", 1.0);
        let text = r.to_string();
        let back = EvalReport::parse(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.to_string(), text);
    }

    #[test]
    fn table_round_trip() {
        let t = AblationTable {
            axis: "loss_ratio".into(),
            columns: vec!["zeroshot_acc".into()],
            rows: vec![AblationRow {
                variant: "1:2".into(),
                config_hash: "00ff".into(),
                seed: 3,
                metrics: vec![0.875],
            }],
        };
        let text = t.to_tsv();
        assert_eq!(AblationTable::parse(&text).unwrap().to_tsv(), text);
    }
}
