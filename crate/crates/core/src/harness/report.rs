//! Suite reports: one record per metric, exported as JSON and CSV.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub baseline: Option<f64>,
    pub delta: Option<f64>,
    pub seed: u64,
    pub repetitions: usize,
    /// Wall-clock measurements; excluded from reproducibility checks.
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub cores: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub suite: String,
    pub metrics: Vec<Metric>,
    pub environment: Environment,
}

impl Report {
    pub fn new(suite: impl Into<String>, seed: u64) -> Self {
        Self {
            suite: suite.into(),
            metrics: Vec::new(),
            environment: Environment {
                cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
                seed,
            },
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64, repetitions: usize) -> &mut Metric {
        self.metrics.push(Metric {
            name: name.into(),
            value,
            baseline: None,
            delta: None,
            seed: self.environment.seed,
            repetitions,
            timing: false,
        });
        self.metrics.last_mut().expect("just pushed")
    }

    pub fn push_timing(&mut self, name: impl Into<String>, value: f64, repetitions: usize) -> &mut Metric {
        let m = self.push(name, value, repetitions);
        m.timing = true;
        m
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }

    /// Copy with every timing value and delta zeroed.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for m in r.metrics.iter_mut().filter(|m| m.timing) {
            m.value = 0.0;
            m.baseline = m.baseline.map(|_| 0.0);
            m.delta = m.delta.map(|_| 0.0);
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["suite", "name", "value", "baseline", "delta", "seed", "repetitions", "timing"])
            .expect("in-memory write");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for m in &self.metrics {
            w.write_record([
                self.suite.clone(),
                m.name.clone(),
                m.value.to_string(),
                opt(m.baseline),
                opt(m.delta),
                m.seed.to_string(),
                m.repetitions.to_string(),
                m.timing.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }

    /// Writes `<suite>.json` and `<suite>.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let json = dir.join(format!("{}.json", self.suite));
        let csv = dir.join(format!("{}.csv", self.suite));
        std::fs::write(&json, self.to_json())?;
        std::fs::write(&csv, self.to_csv())?;
        Ok(vec![json, csv])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_one_row_per_metric() {
        let mut r = Report::new("demo", 3);
        r.push("a", 0.5, 1);
        let m = r.push_timing("b_ms", 12.0, 10);
        m.baseline = Some(10.0);
        m.delta = Some(2.0);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().starts_with("demo,b_ms,12,10,2,3,10,true"));
        let stripped = r.without_timings();
        assert_eq!(stripped.get("b_ms"), Some(0.0));
        assert_eq!(stripped.get("a"), Some(0.5));
    }
}
