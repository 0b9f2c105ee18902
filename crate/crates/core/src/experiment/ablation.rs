//! Cartesian sweeps over a fixed set of configuration keys.

use std::fs;
use std::path::Path;

use super::config::ExperimentConfig;
use super::runner::{config_fingerprint, run_training, DataBundle, Teacher};
use crate::detector::{network_spec, Role};
use crate::error::{Error, Result};
use crate::eval::EvalResult;
use crate::tensor::count_flops;

/// Sweepable keys with their short aliases.
pub const SWEEP_KEYS: &[(&str, &str)] = &[
    ("k", "student.light_ml.ratio"),
    ("gamma", "distill.gamma"),
    ("gamma_ld", "distill.gamma_ld"),
    ("lambda_vlr", "distill.lambda_vlr"),
    ("mode", "distill.mode"),
    ("light_ml", "student.light_ml"),
    ("cls_kd", "distill.cls_kd"),
    ("focal", "distill.focal"),
    ("vlr", "distill.vlr"),
    ("global", "distill.global"),
    ("seed", "seed"),
];

pub fn sweep_key(name: &str) -> Result<&'static str> {
    SWEEP_KEYS
        .iter()
        .find(|(alias, key)| *alias == name || *key == name)
        .map(|(_, key)| *key)
        .ok_or_else(|| {
            let names: Vec<&str> = SWEEP_KEYS.iter().map(|(a, _)| *a).collect();
            Error::Config(format!("{name:?} cannot be swept; sweepable keys: {}", names.join(", ")))
        })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sweep {
    /// `(key, values)` per axis; the first axis varies slowest.
    pub axes: Vec<(&'static str, Vec<String>)>,
}

impl Sweep {
    /// Adds an axis from `key=v1,v2,...`.
    pub fn add(&mut self, spec: &str) -> Result<()> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep axis {spec:?} is not key=v1,v2,...")))?;
        let key = sweep_key(k.trim())?;
        if self.axes.iter().any(|(x, _)| *x == key) {
            return Err(Error::Config(format!("{key} swept twice")));
        }
        let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("sweep axis {key} has no values")));
        }
        let mut probe = ExperimentConfig::default();
        for val in &values {
            probe.set(key, val)?;
        }
        self.axes.push((key, values));
        Ok(())
    }

    /// One axis per non-comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Sweep::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                s.add(line)?;
            }
        }
        Ok(s)
    }

    pub fn points(&self) -> Vec<Vec<(&'static str, String)>> {
        let mut out: Vec<Vec<(&'static str, String)>> = vec![Vec::new()];
        for (key, values) in &self.axes {
            out = out
                .into_iter()
                .flat_map(|p| {
                    values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push((*key, v.clone()));
                        q
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub assignments: Vec<(&'static str, String)>,
    pub fingerprint: String,
    /// Student inference FLOPs at the configured image size.
    pub flops: u64,
    pub eval: Option<EvalResult>,
}

/// Runs every sweep point in `out/NNN` (or only counts FLOPs when `data` is `None`) and
/// writes `out/ablation.csv`.
pub fn run_ablation(
    base: &ExperimentConfig,
    sweep: &Sweep,
    data: Option<&DataBundle>,
    teacher: Option<&Teacher>,
    out: &Path,
) -> Result<Vec<AblationRow>> {
    if sweep.axes.is_empty() {
        return Err(Error::Config("empty sweep".into()));
    }
    let mut rows = Vec::new();
    for (i, point) in sweep.points().into_iter().enumerate() {
        let mut cfg = base.clone();
        for (k, v) in &point {
            cfg.set(k, v)?;
        }
        let s = cfg.resolve()?;
        let flops = count_flops(&network_spec(&s.student)?, (s.scene.height, s.scene.width))?.total;
        let eval = match data {
            Some(d) => Some(run_training(&cfg, Role::Student, d, teacher, &out.join(format!("{i:03}")))?.final_eval),
            None => None,
        };
        rows.push(AblationRow {
            assignments: point,
            fingerprint: config_fingerprint(&cfg)[..16].to_string(),
            flops,
            eval,
        });
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("ablation.csv");
    fs::write(&path, ablation_csv(sweep, &rows)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

pub fn ablation_csv(sweep: &Sweep, rows: &[AblationRow]) -> String {
    let mut s = String::from("run,fingerprint");
    for (k, _) in &sweep.axes {
        s.push(',');
        s.push_str(k);
    }
    s.push_str(",flops,mAP,AP50,AP75,AP_S\n");
    for (i, r) in rows.iter().enumerate() {
        s.push_str(&format!("{i},{}", r.fingerprint));
        for (_, v) in &r.assignments {
            s.push(',');
            s.push_str(v);
        }
        s.push_str(&format!(",{}", r.flops));
        match &r.eval {
            Some(e) => s.push_str(&format!(",{:.6},{:.6},{:.6},{:.6}\n", e.map, e.ap50, e.ap75, e.ap_small)),
            None => s.push_str(",,,,\n"),
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.set("seed", "1").unwrap();
        c.set("student.light_ml", "true").unwrap();
        c
    }

    #[test]
    fn ratio_sweep_flops_nondecreasing() {
        let dir = tempfile::tempdir().unwrap();
        let mut sw = Sweep::default();
        sw.add("k=0,0.25,0.5,0.75,1").unwrap();
        let rows = run_ablation(&seeded(), &sw, None, None, dir.path()).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.windows(2).all(|w| w[0].flops <= w[1].flops));
        assert!(rows[0].flops < rows[4].flops);
        let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("run,fingerprint,student.light_ml.ratio,flops,"));
    }

    #[test]
    fn gamma_and_mode_sweeps() {
        let sw = Sweep::parse("gamma = 0.35,0.4,0.45,0.5,0.55,0.6\n").unwrap();
        assert_eq!(sw.points().len(), 6);
        let sw = Sweep::parse("mode = cid, cid-within-gt, ld-vlr").unwrap();
        assert_eq!(sw.points().len(), 3);
        let sw = Sweep::parse("mode = cid, ld-vlr\nseed = 1,2,3").unwrap();
        let p = sw.points();
        assert_eq!(p.len(), 6);
        assert_eq!(p[1], vec![("distill.mode", "cid".to_string()), ("seed", "2".to_string())]);
    }

    #[test]
    fn rejects_unknown_keys_and_values() {
        let mut sw = Sweep::default();
        assert!(sw.add("train.lr=0.1,0.2").unwrap_err().is_config_error());
        assert!(sw.add("mode=fcos").is_err());
        assert!(sw.add("gamma").is_err());
        assert!(run_ablation(&seeded(), &Sweep::default(), None, None, Path::new("/nonexistent")).is_err());
    }
}
