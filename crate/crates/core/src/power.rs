//! Buses, quadratic generation costs and the B-coefficient loss model.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BusSpec {
    pub index: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub cost_a: f64,
    pub cost_b: f64,
    pub demand: f64,
    pub is_generator: bool,
}

impl BusSpec {
    pub fn generator(index: usize, x_min: f64, x_max: f64, cost_a: f64, cost_b: f64) -> Self {
        BusSpec {
            index,
            x_min,
            x_max,
            cost_a,
            cost_b,
            demand: 0.0,
            is_generator: true,
        }
    }

    pub fn load(index: usize, demand: f64) -> Self {
        BusSpec {
            index,
            x_min: 0.0,
            x_max: 0.0,
            cost_a: 0.0,
            cost_b: 0.0,
            demand,
            is_generator: false,
        }
    }

    pub fn with_demand(mut self, demand: f64) -> Self {
        self.demand = demand;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| {
            Err(Error::Validation {
                assumption: "bus".into(),
                message: format!("bus {}: {msg}", self.index + 1),
            })
        };
        if !(self.demand >= 0.0 && self.demand.is_finite()) {
            return bad(format!(
                "demand {} must be a nonnegative number",
                self.demand
            ));
        }
        if self.is_generator {
            if !(self.x_min >= 0.0 && self.x_min < self.x_max && self.x_max.is_finite()) {
                return bad(format!(
                    "generator limits need 0 <= x_min < x_max, got [{}, {}]",
                    self.x_min, self.x_max
                ));
            }
            if !(self.cost_a > 0.0) {
                return bad(format!(
                    "quadratic cost coefficient {} must be positive",
                    self.cost_a
                ));
            }
        } else if self.x_min != 0.0 || self.x_max != 0.0 || self.cost_a != 0.0 || self.cost_b != 0.0
        {
            return bad("non-generator bus must have zero limits and cost".into());
        }
        Ok(())
    }
}

/// `B` together with its symmetric square root `R` (`RᵀR = B`).
#[derive(Debug, Clone, PartialEq)]
pub struct LossModel {
    pub b: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub psd_tolerance: f64,
    /// Spectrum of the symmetrized `B` in ascending order, before clamping.
    pub eigenvalues: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UBound {
    pub u_max: f64,
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn default_psd_tolerance(b: &DMatrix<f64>) -> f64 {
    1e-8 * inf_norm(b)
}

/// Symmetrizes `B` and takes its PSD square root by eigendecomposition.
/// Eigenvalues in `[-psd_tolerance, 0)` are treated as rounding noise.
pub fn factor_loss_matrix(b: &DMatrix<f64>, psd_tolerance: f64) -> Result<LossModel> {
    if b.nrows() != b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: b.nrows(),
            found: b.ncols(),
        });
    }
    let sym = (b + b.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    if let Some(&lowest) = eigenvalues.first() {
        if lowest < -psd_tolerance {
            return Err(Error::NotPositiveSemidefinite {
                eigenvalue: lowest,
                tolerance: psd_tolerance,
            });
        }
    }
    let roots = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()),
    );
    let q = &eig.eigenvectors;
    let r = q * DMatrix::from_diagonal(&roots) * q.transpose();
    let r = (&r + r.transpose()) * 0.5;
    Ok(LossModel {
        b: sym,
        r,
        psd_tolerance,
        eigenvalues,
    })
}

impl LossModel {
    pub fn n(&self) -> usize {
        self.b.nrows()
    }

    pub fn zero(n: usize) -> Self {
        LossModel {
            b: DMatrix::zeros(n, n),
            r: DMatrix::zeros(n, n),
            psd_tolerance: 0.0,
            eigenvalues: vec![0.0; n],
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        evaluate_loss(&self.b, x)
    }

    /// `Rx`, the loss slack that makes `Σ u_i² = xᵀBx`.
    pub fn apply_root(&self, x: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        (&self.r * xv).iter().copied().collect()
    }

    pub fn r_max(&self, i: usize) -> f64 {
        self.r
            .column(i)
            .iter()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }

    /// `‖RᵀR − B‖∞ / max(1, ‖B‖∞)`.
    pub fn reconstruction_error(&self) -> f64 {
        let diff = self.r.transpose() * &self.r - &self.b;
        inf_norm(&diff) / inf_norm(&self.b).max(1.0)
    }
}

/// `xᵀBx`.
pub fn evaluate_loss(b: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    if x.len() != b.nrows() {
        return Err(Error::DimensionMismatch {
            expected: b.nrows(),
            found: x.len(),
        });
    }
    let mut total = 0.0;
    for i in 0..x.len() {
        if x[i] == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for j in 0..x.len() {
            row += b[(i, j)] * x[j];
        }
        total += x[i] * row;
    }
    Ok(total)
}

/// Column `i` of `R` and its largest magnitude.
pub fn local_loss_column(model: &LossModel, i: usize) -> Result<(Vec<f64>, f64)> {
    if i >= model.n() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: model.n(),
        });
    }
    Ok((model.r.column(i).iter().copied().collect(), model.r_max(i)))
}

/// `Σ_i r_i^max · x_i^max`, a box bound on every component of `Rx`.
pub fn compute_u_bound(model: &LossModel, buses: &[BusSpec]) -> UBound {
    let u_max = buses
        .iter()
        .enumerate()
        .map(|(i, bus)| model.r_max(i) * bus.x_max)
        .sum();
    UBound { u_max }
}

/// `(a x² + b x, 2 a x + b)`.
pub fn cost_value_and_slope(bus: &BusSpec, x: f64) -> Result<(f64, f64)> {
    if !bus.is_generator {
        return Err(Error::NotAGenerator(bus.index));
    }
    Ok((
        bus.cost_a * x * x + bus.cost_b * x,
        2.0 * bus.cost_a * x + bus.cost_b,
    ))
}

pub fn total_cost(buses: &[BusSpec], x: &[f64]) -> f64 {
    buses
        .iter()
        .zip(x)
        .filter(|(b, _)| b.is_generator)
        .map(|(b, &xi)| b.cost_a * xi * xi + b.cost_b * xi)
        .sum()
}

/// `Υ(x) + Σd − Σx`; zero when supply meets demand plus losses.
pub fn balance_residual(buses: &[BusSpec], model: &LossModel, x: &[f64]) -> Result<f64> {
    let loss = model.evaluate(x)?;
    let demand: f64 = buses.iter().map(|b| b.demand).sum();
    Ok(loss + demand - x.iter().sum::<f64>())
}

pub fn x_min_vector(buses: &[BusSpec]) -> Vec<f64> {
    buses.iter().map(|b| b.x_min).collect()
}

pub fn x_max_vector(buses: &[BusSpec]) -> Vec<f64> {
    buses.iter().map(|b| b.x_max).collect()
}

pub fn total_demand(buses: &[BusSpec]) -> f64 {
    buses.iter().map(|b| b.demand).sum()
}

/// One finding of the assumption checks, labelled like `"A5.1"`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionFinding {
    pub assumption: String,
    pub holds: bool,
    pub detail: String,
}

/// Checks the loss and cost hypotheses that the dispatch solver relies on.
pub fn check_power_assumptions(buses: &[BusSpec], model: &LossModel) -> Vec<AssumptionFinding> {
    let mut out = Vec::new();
    let lowest = model.eigenvalues.first().copied().unwrap_or(0.0);
    out.push(AssumptionFinding {
        assumption: "A2".into(),
        holds: lowest >= -model.psd_tolerance,
        detail: format!("smallest eigenvalue of B is {lowest:e}"),
    });

    let bad_slope: Vec<usize> = buses
        .iter()
        .filter(|b| {
            b.is_generator && (b.cost_a <= 0.0 || 2.0 * b.cost_a * b.x_min + b.cost_b < 0.0)
        })
        .map(|b| b.index + 1)
        .collect();
    out.push(AssumptionFinding {
        assumption: "A4".into(),
        holds: bad_slope.is_empty(),
        detail: if bad_slope.is_empty() {
            "every cost is strongly convex and nondecreasing on its box".into()
        } else {
            format!("cost not strongly convex or decreasing at buses {bad_slope:?}")
        },
    });

    let xmin = x_min_vector(buses);
    let xmax = x_max_vector(buses);
    let loss_min = model.evaluate(&xmin).unwrap_or(f64::NAN);
    let loss_max = model.evaluate(&xmax).unwrap_or(f64::NAN);
    let sum_min: f64 = xmin.iter().sum();
    let sum_max: f64 = xmax.iter().sum();
    let demand = total_demand(buses);
    out.push(AssumptionFinding {
        assumption: "A5.1".into(),
        holds: sum_min < demand + loss_min,
        detail: format!(
            "sum x_min = {sum_min}, demand + losses at x_min = {}",
            demand + loss_min
        ),
    });
    out.push(AssumptionFinding {
        assumption: "A5.2".into(),
        holds: loss_min <= sum_min && loss_max <= sum_max,
        detail: format!(
            "losses at x_min = {loss_min} (sum {sum_min}), at x_max = {loss_max} (sum {sum_max})"
        ),
    });
    out
}
