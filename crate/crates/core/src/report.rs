//! Output files: 17-digit JSON and CSV, plot data and restart checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::continuation::{ContinuationState, OrbitResult, SeedReport, StageRecord};
use crate::curvespace::node_samples;
use crate::error::{Error, Result};
use crate::geometry::ManifoldModel;
use crate::timescale::TimeFactor;

/// Float with 17 significant digits; `nan`, `inf`, `-inf` otherwise.
pub fn fmt17(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    let pad = |out: &mut String, n: usize| out.extend(std::iter::repeat("  ").take(n));
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&fmt17(n.as_f64().unwrap_or(f64::NAN)));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, indent + 1);
                write_value(out, item, indent + 1);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            for (i, (k, item)) in map.iter().enumerate() {
                pad(out, indent + 1);
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_value(out, item, indent + 1);
                out.push_str(if i + 1 < map.len() { ",\n" } else { "\n" });
            }
            pad(out, indent);
            out.push('}');
        }
    }
}

/// Pretty JSON with every float printed to 17 significant digits.
/// Non-finite floats become `null`.
pub fn to_json17<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Io(e.to_string()))?;
    let mut out = String::new();
    write_value(&mut out, &v, 0);
    out.push('\n');
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn csv_bytes(header: &[String], rows: &[Vec<String>], tag: Option<&str>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    if let Some(t) = tag {
        writeln!(buf, "# {t}").map_err(|e| Error::Io(e.to_string()))?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(|e| Error::Io(e.to_string()))?;
        for r in rows {
            w.write_record(r).map_err(|e| Error::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))?;
    }
    Ok(buf)
}

/// Trajectory table `xi, t, q_1..q_n, speed, energy`; `tag` goes into a
/// leading comment line.
pub fn trajectory_csv(model: &ManifoldModel, tf: &TimeFactor, state: &ContinuationState, tag: Option<&str>) -> Result<Vec<u8>> {
    let curve = state.curve.restore(model, tf)?;
    let mut header = vec!["xi".to_string(), "t".to_string()];
    header.extend((1..=curve.dim()).map(|i| format!("q{i}")));
    header.push("speed".into());
    header.push("energy".into());
    let rows: Vec<Vec<String>> = node_samples(model, tf, &curve)
        .into_iter()
        .map(|(xi, t, q, speed, e)| {
            let mut r = vec![fmt17(xi), fmt17(t)];
            r.extend(q.iter().map(|v| fmt17(*v)));
            r.push(fmt17(speed));
            r.push(fmt17(e));
            r
        })
        .collect();
    csv_bytes(&header, &rows, tag)
}

fn plot_tables(result: &OrbitResult) -> Vec<(&'static str, Vec<String>, Vec<Vec<String>>)> {
    let h = |cols: &[&str]| cols.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    let mut residuals = Vec::new();
    let traces = std::iter::once((0usize, "seed", &result.seed.newton))
        .chain(result.stages.iter().map(|s| (s.k + 1, "stage", &s.newton)));
    for (k, kind, trace) in traces {
        for it in &trace.iterates {
            residuals.push(vec![
                k.to_string(),
                kind.to_string(),
                it.iteration.to_string(),
                fmt17(it.residual),
                fmt17(it.step_norm),
                fmt17(it.distance_to_final),
            ]);
        }
    }
    let mut gamma = vec![vec![
        "0".to_string(),
        fmt17(result.seed.xi_0),
        fmt17(result.seed.gamma_measured),
        fmt17(result.seed.gamma_floor),
    ]];
    gamma.extend(result.stages.iter().map(|s| {
        vec![
            (s.k + 1).to_string(),
            fmt17(s.xi_next),
            fmt17(s.gamma_measured_next),
            s.gamma_floor_next.map_or_else(|| "nan".into(), fmt17),
        ]
    }));
    let window: Vec<Vec<String>> = result
        .stages
        .iter()
        .map(|s: &StageRecord| {
            vec![
                s.k.to_string(),
                fmt17(s.xi_k),
                fmt17(s.xi_next),
                fmt17(s.epsilon),
                fmt17(s.p_certified),
                fmt17(s.l_measured),
            ]
        })
        .collect();
    vec![
        ("residuals.csv", h(&["stage", "kind", "iteration", "residual", "step_norm", "distance_to_final"]), residuals),
        ("gamma.csv", h(&["stage", "xi", "gamma_measured", "gamma_floor"]), gamma),
        ("window.csv", h(&["stage", "xi_k", "xi_next", "epsilon", "p_certified", "l_measured"]), window),
    ]
}

/// Per-stage certificates without the curves.
#[derive(Debug, Clone, Serialize)]
pub struct CertificateFile<'a> {
    pub config_hash: &'a str,
    pub seed: &'a SeedReport,
    /// Wall times are zeroed so reruns compare byte for byte; they live in the manifest.
    pub stages: &'a [StageRecord],
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary<'a> {
    pub config_hash: &'a str,
    pub stop: crate::continuation::StopReason,
    /// Stages completed since the seed, including any before a restart.
    pub stages: usize,
    pub xi_final: f64,
    pub xi_hat_final: f64,
    pub gamma_measured_final: f64,
    pub gamma_floor_final: Option<f64>,
    pub heuristic: bool,
    pub residual_final: f64,
    pub action_final: f64,
    pub lambda_eff: Option<f64>,
    pub c_gamma: Option<f64>,
    pub convergence_sum: Option<f64>,
    pub necessary_condition: Option<(f64, f64)>,
    pub cells: usize,
}

impl<'a> Summary<'a> {
    pub fn of(result: &OrbitResult, config_hash: &'a str) -> Self {
        let st = &result.state;
        Summary {
            config_hash,
            stop: result.stop,
            stages: result.state.k,
            xi_final: st.xi_k,
            xi_hat_final: st.xi_hat_k,
            gamma_measured_final: st.gamma_measured,
            gamma_floor_final: st.gamma_k,
            heuristic: st.heuristic,
            residual_final: result.stages.last().map_or(result.seed.residual, |s| s.residual),
            action_final: st.i_hat_k,
            lambda_eff: result.lambda_eff,
            c_gamma: result.c_gamma,
            convergence_sum: result.convergence_sum,
            necessary_condition: result.necessary_condition,
            cells: st.curve.nodes.len().saturating_sub(1),
        }
    }
}

/// Writes every output of a finished run into `dir` and returns the file
/// names written. Every file carries `config_hash`.
pub fn write_outputs(
    dir: &Path,
    model: &ManifoldModel,
    tf: &TimeFactor,
    result: &OrbitResult,
    config_hash: &str,
) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let tag = format!("config_hash={config_hash}");
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        write_file(&dir.join(name), &bytes)?;
        written.push(name.to_string());
        Ok(())
    };
    put("trajectory.csv", trajectory_csv(model, tf, &result.state, Some(&tag))?)?;
    put(
        "certificates.json",
        {
            let stages: Vec<StageRecord> =
                result.stages.iter().cloned().map(|r| StageRecord { wall_seconds: 0.0, ..r }).collect();
            to_json17(&CertificateFile { config_hash, seed: &result.seed, stages: &stages })?.into_bytes()
        },
    )?;
    put("summary.json", to_json17(&Summary::of(result, config_hash))?.into_bytes())?;
    for (name, header, rows) in plot_tables(result) {
        put(name, csv_bytes(&header, &rows, Some(&tag))?)?;
    }
    let ck = Checkpoint { config_hash: config_hash.to_string(), seed: result.seed.clone(), state: result.state.clone() };
    put("state.ckpt", ck.to_bytes()?)?;
    Ok(written)
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ORBFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Restartable run state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: SeedReport,
    pub state: ContinuationState,
}

impl Checkpoint {
    /// Magic, little-endian version and payload length, then a JSON payload
    /// (shortest round-trip floats, so restoring is exact).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = serde_json::to_vec(self).map_err(|e| Error::Io(e.to_string()))?;
        let mut out = Vec::with_capacity(payload.len() + 20);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        let mut version = [0u8; 4];
        let mut len = [0u8; 8];
        let short = |_| Error::Io("checkpoint is truncated".into());
        r.read_exact(&mut magic).map_err(short)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Io("not an orbitforge checkpoint".into()));
        }
        r.read_exact(&mut version).map_err(short)?;
        let found = u32::from_le_bytes(version);
        if found != CHECKPOINT_VERSION {
            return Err(Error::StateVersion { found, expected: CHECKPOINT_VERSION });
        }
        r.read_exact(&mut len).map_err(short)?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() != len {
            return Err(Error::Io(format!("checkpoint payload has {} bytes, header says {len}", r.len())));
        }
        serde_json::from_slice(r).map_err(|e| Error::Io(format!("checkpoint payload: {e}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [std::f64::consts::PI, 1e-300, -2.5, 0.1 + 0.2, f64::MAX] {
            let s = fmt17(v);
            assert_eq!(s.parse::<f64>().unwrap(), v);
            let mantissa = s.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
            assert_eq!(mantissa.len(), 17, "{s}");
        }
        assert_eq!(fmt17(f64::NAN), "nan");
    }

    #[test]
    fn json17_is_valid_json_with_same_numbers() {
        #[derive(Serialize)]
        struct S {
            a: f64,
            b: Vec<f64>,
            n: usize,
            s: String,
            bad: f64,
        }
        let v = S { a: 0.1, b: vec![1.0, -3.25e-9], n: 7, s: "q\"x".into(), bad: f64::INFINITY };
        let text = to_json17(&v).unwrap();
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["a"].as_f64(), Some(0.1));
        assert_eq!(back["b"][1].as_f64(), Some(-3.25e-9));
        assert_eq!(back["n"].as_u64(), Some(7));
        assert_eq!(back["s"].as_str(), Some("q\"x"));
        assert!(back["bad"].is_null());
        assert!(text.contains("1.0000000000000001e-1"));
    }

    #[test]
    fn checkpoint_rejects_other_versions_and_garbage() {
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let mut bytes = CHECKPOINT_MAGIC.to_vec();
        bytes.extend_from_slice(&7u32.to_le_bytes());
        bytes.extend_from_slice(&0u64.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::StateVersion { found: 7, expected: 1 })));
    }
}
