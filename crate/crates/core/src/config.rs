//! Run configuration in TOML and the validation pass that precedes a run.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::continuation::{ContinuationConfig, Problem};
use crate::error::{Error, Result};
use crate::geometry::{
    calibrate_ball, generalized_sym_eigs, BallSampling, ConstantPotential, CoordTopology, CriticalPointData,
    DoubleWell, DoubleWellCircle, ExprMetric, ExprPotential, FlatMetric, ManifoldModel, MetricField, Pendulum,
    PotentialField, QuadraticPotential, SphereChartMetric, GRAD_TOL,
};
use crate::timescale::{AssumptionReport, FactorSpec, TimeFactor, Verdict};

fn two_pi() -> f64 {
    2.0 * PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TopologySpec {
    Line,
    Circle {
        #[serde(default = "two_pi")]
        period: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MetricSpec {
    #[default]
    Flat,
    /// Round unit sphere in (polar, azimuth) coordinates.
    SphereChart,
    /// Entries as expressions in the coordinate names.
    Expr { rows: Vec<Vec<String>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PotentialSpec {
    /// `−Σ cos x_i`
    Pendulum,
    /// `−¼(|x|² − 1)²`
    DoubleWell,
    /// `½ Σ cos 2x_i`
    DoubleWellCircle,
    Quadratic {
        coeffs: Vec<f64>,
        #[serde(default)]
        center: Option<Vec<f64>>,
    },
    Constant { value: f64 },
    Expr { source: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub topology: Vec<TopologySpec>,
    #[serde(default)]
    pub metric: MetricSpec,
    pub potential: PotentialSpec,
    /// Coordinate names for expressions; `x`, `y`, `z` or `x1..xn` by default.
    #[serde(default)]
    pub vars: Option<Vec<String>>,
    #[serde(default)]
    pub fd_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSpec {
    pub x_minus: Vec<f64>,
    pub x_plus: Vec<f64>,
    /// Whole periods added to `x_plus` per coordinate (circle coordinates
    /// only); selects the homotopy class of a homoclinic loop.
    #[serde(default)]
    pub winding: Option<Vec<i64>>,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub nu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSpec {
    pub shrink: f64,
    pub shells: usize,
    pub per_shell: Option<usize>,
    pub floor: f64,
    pub seed: u64,
    pub initial_radius: Option<f64>,
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        let s = BallSampling::default();
        Self { shrink: 0.8, shells: s.shells, per_shell: s.per_shell, floor: s.floor, seed: s.seed, initial_radius: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationSpec {
    /// Half-width of the original-time grid around `t_0`.
    pub span: f64,
    pub points: usize,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        Self { span: 10.0, points: 2001 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<String>,
    /// Trajectory samples per unit of `ξ` in the CSV; every node when absent.
    pub csv_stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub model: ModelSpec,
    pub factor: FactorSpec,
    pub endpoints: EndpointSpec,
    #[serde(default)]
    pub calibration: CalibrationSpec,
    #[serde(default)]
    pub validation: ValidationSpec,
    #[serde(default)]
    pub continuation: ContinuationConfig,
    #[serde(default)]
    pub output: OutputSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Structural checks that do not need any numerics.
    pub fn check(&self) -> Result<()> {
        let n = self.model.topology.len();
        if n == 0 {
            return Err(Error::Config("model.topology must list at least one coordinate".into()));
        }
        if self.endpoints.x_minus.len() != n || self.endpoints.x_plus.len() != n {
            return Err(Error::Config(format!("endpoints must have {n} coordinates")));
        }
        if let Some(w) = &self.endpoints.winding {
            if w.len() != n {
                return Err(Error::Config(format!("endpoints.winding must have {n} entries")));
            }
            for (k, t) in w.iter().zip(&self.model.topology) {
                if *k != 0 && matches!(t, TopologySpec::Line) {
                    return Err(Error::Config("winding is only defined for circle coordinates".into()));
                }
            }
        }
        if let Some(v) = &self.model.vars {
            if v.len() != n {
                return Err(Error::Config(format!("model.vars must name {n} coordinates")));
            }
        }
        if !(self.calibration.shrink > 0.0 && self.calibration.shrink < 1.0) {
            return Err(Error::Config("calibration.shrink must lie in (0, 1)".into()));
        }
        if self.validation.points < 1000 || !(self.validation.span > 0.0) {
            return Err(Error::Config("validation needs span > 0 and at least 1000 points".into()));
        }
        self.continuation.check()
    }

    fn var_names(&self) -> Vec<String> {
        let n = self.model.topology.len();
        if let Some(v) = &self.model.vars {
            return v.clone();
        }
        match n {
            1 => vec!["x".into()],
            2 => vec!["x".into(), "y".into()],
            3 => vec!["x".into(), "y".into(), "z".into()],
            _ => (1..=n).map(|i| format!("x{i}")).collect(),
        }
    }

    pub fn build_model(&self) -> Result<ManifoldModel> {
        let n = self.model.topology.len();
        let topology: Vec<CoordTopology> = self
            .model
            .topology
            .iter()
            .map(|t| match t {
                TopologySpec::Line => CoordTopology::Line,
                TopologySpec::Circle { period } => CoordTopology::Circle { period: *period },
            })
            .collect();
        let names = self.var_names();
        let vars: Vec<&str> = names.iter().map(String::as_str).collect();
        let metric: Arc<dyn MetricField> = match &self.model.metric {
            MetricSpec::Flat => Arc::new(FlatMetric::new(n)),
            MetricSpec::SphereChart => Arc::new(SphereChartMetric),
            MetricSpec::Expr { rows } => Arc::new(ExprMetric::parse(n, rows, &vars)?),
        };
        let potential: Arc<dyn PotentialField> = match &self.model.potential {
            PotentialSpec::Pendulum => Arc::new(Pendulum),
            PotentialSpec::DoubleWell => Arc::new(DoubleWell),
            PotentialSpec::DoubleWellCircle => Arc::new(DoubleWellCircle),
            PotentialSpec::Quadratic { coeffs, center } => {
                if coeffs.len() != n || center.as_ref().is_some_and(|c| c.len() != n) {
                    return Err(Error::Config(format!("quadratic potential needs {n} coefficients")));
                }
                let mut q = QuadraticPotential::new(coeffs.clone());
                if let Some(c) = center {
                    q.center = c.clone();
                }
                Arc::new(q)
            }
            PotentialSpec::Constant { value } => Arc::new(ConstantPotential(*value)),
            PotentialSpec::Expr { source } => Arc::new(ExprPotential::parse(source, &vars)?),
        };
        let model = ManifoldModel::new(topology, metric, potential)?;
        Ok(match self.model.fd_step {
            Some(h) => model.with_fd_step(h),
            None => model,
        })
    }

    pub fn build_factor(&self) -> Result<TimeFactor> {
        TimeFactor::from_spec(&self.factor)
    }

    /// `x_+` shifted by the configured winding.
    pub fn lifted_x_plus(&self) -> Vec<f64> {
        let mut x = self.endpoints.x_plus.clone();
        if let Some(w) = &self.endpoints.winding {
            for ((xi, k), t) in x.iter_mut().zip(w).zip(&self.model.topology) {
                if let TopologySpec::Circle { period } = t {
                    *xi += *k as f64 * period;
                }
            }
        }
        x
    }

    pub fn sampling(&self) -> BallSampling {
        let c = &self.calibration;
        BallSampling {
            shells: c.shells,
            per_shell: c.per_shell,
            seed: c.seed,
            initial_radius: c.initial_radius,
            floor: c.floor,
            ..BallSampling::default()
        }
    }
}

/// Criticality and definiteness at one endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointCheck {
    pub side: String,
    pub point: Vec<f64>,
    pub sigma: f64,
    pub gradient_norm: f64,
    /// Eigenvalues of `σ H^V` relative to the metric.
    pub eigenvalues: Vec<f64>,
    pub critical: bool,
    pub strict_maximum: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub r_lambda: f64,
    pub lambda: f64,
    pub nu: f64,
    pub rates_minus: Vec<f64>,
    pub rates_plus: Vec<f64>,
    pub k_max: f64,
    pub c_g: f64,
    pub c_k: f64,
    pub c_v: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub assumptions: AssumptionReport,
    /// Endpoints are nondegenerate critical points, maxima of `σ V`.
    pub a4: Verdict,
    pub endpoints: Vec<EndpointCheck>,
    pub calibration: Option<CalibrationSummary>,
    pub calibration_error: Option<String>,
    pub passed: bool,
}

fn endpoint_check(model: &ManifoldModel, side: &str, x: &[f64], sigma: f64) -> Result<EndpointCheck> {
    let pkg = model.potential_package(x)?;
    let gradient_norm = model.norm(x, &pkg.gradient);
    let eigenvalues = generalized_sym_eigs(&(&pkg.hessian * sigma), &model.metric_at(x))
        .ok_or_else(|| Error::DegenerateMetric { point: x.to_vec() })?;
    Ok(EndpointCheck {
        side: side.into(),
        point: x.to_vec(),
        sigma,
        gradient_norm,
        critical: gradient_norm <= GRAD_TOL * pkg.value.abs().max(1.0),
        strict_maximum: eigenvalues.iter().all(|e| *e < 0.0),
        eigenvalues,
    })
}

/// Assumptions on the factor, endpoint checks and ball calibration. The
/// problem is returned when everything passed.
pub fn validate(cfg: &RunConfig) -> Result<(ValidationReport, Option<Problem>)> {
    let model = cfg.build_model()?;
    let tf = cfg.build_factor()?;
    let assumptions = tf.validate(cfg.validation.span, cfg.validation.points)?;
    let x_minus = cfg.endpoints.x_minus.clone();
    let x_plus = cfg.lifted_x_plus();
    let (s_minus, s_plus) = (tf.sigma(-1.0), tf.sigma(1.0));
    let endpoints = vec![
        endpoint_check(&model, "-", &x_minus, s_minus)?,
        endpoint_check(&model, "+", &x_plus, s_plus)?,
    ];
    let bad: Vec<String> = endpoints
        .iter()
        .filter(|e| !(e.critical && e.strict_maximum))
        .map(|e| {
            if !e.critical {
                format!("x_{} is not critical (|grad V| = {:e})", e.side, e.gradient_norm)
            } else {
                format!("σV is not a strict maximum at x_{} (eigenvalues {:?})", e.side, e.eigenvalues)
            }
        })
        .collect();
    let a4 = if bad.is_empty() {
        Verdict::pass("both endpoints are nondegenerate maxima of σV")
    } else {
        Verdict::fail(None, bad.join("; "))
    };
    let mut calibration = None;
    let mut calibration_error = None;
    let mut problem = None;
    if a4.passed {
        let attempt = CriticalPointData::analyze(
            &model,
            x_minus,
            x_plus,
            s_minus,
            s_plus,
            cfg.endpoints.lambda,
            cfg.endpoints.nu,
        )
        .and_then(|cp| calibrate_ball(&model, &cp, cfg.calibration.shrink, &cfg.sampling()))
        .and_then(|cp| Problem::new(model.clone(), tf.clone(), cp));
        match attempt {
            Ok(p) => {
                let scan = p.cp.scan.as_ref().expect("calibrated");
                calibration = Some(CalibrationSummary {
                    r_lambda: p.cp.r_lambda,
                    lambda: p.cp.lambda,
                    nu: p.cp.nu,
                    rates_minus: p.cp.hessian_eigs_minus.clone(),
                    rates_plus: p.cp.hessian_eigs_plus.clone(),
                    k_max: scan.k_max,
                    c_g: scan.c_g,
                    c_k: scan.c_k,
                    c_v: scan.c_v,
                    samples: scan.samples.len(),
                });
                problem = Some(p);
            }
            Err(e) => calibration_error = Some(e.to_string()),
        }
    }
    let passed = assumptions.a1.passed && assumptions.a2.passed && assumptions.a3.passed && a4.passed && problem.is_some();
    let report = ValidationReport { assumptions, a4, endpoints, calibration, calibration_error, passed };
    Ok((report, problem.filter(|_| passed)))
}

/// Builds and calibrates the problem without the assumption checks.
pub fn build_problem(cfg: &RunConfig) -> Result<Problem> {
    let model = cfg.build_model()?;
    let tf = cfg.build_factor()?;
    let cp = CriticalPointData::analyze(
        &model,
        cfg.endpoints.x_minus.clone(),
        cfg.lifted_x_plus(),
        tf.sigma(-1.0),
        tf.sigma(1.0),
        cfg.endpoints.lambda,
        cfg.endpoints.nu,
    )?;
    let cp = calibrate_ball(&model, &cp, cfg.calibration.shrink, &cfg.sampling())?;
    Problem::new(model, tf, cp)
}
