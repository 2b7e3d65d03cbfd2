//! Scenario files: a TOML description of a network, its generators, loads,
//! loss coefficients, shedding setup and solver settings.
//!
//! Buses are numbered from 1 in the file and from 0 in memory. Unknown keys
//! are rejected, and every error carries the offending line. See
//! `scenarios/README.md` for the schema.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::feasibility::DEFAULT_TAU;
use crate::graph::Graph;
use crate::power::{
    check_power_assumptions, factor_loss_matrix, AssumptionFinding, BusSpec, LossModel,
};
use crate::shed::{partition_priorities, PriorityAssignment, ShedParams};
use crate::step::{StepSchedule, StopRule};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    name: String,
    buses: usize,
    #[serde(default = "one")]
    demand_scale: f64,
    graph: RawGraph,
    #[serde(default)]
    generator: Vec<RawGenerator>,
    #[serde(default)]
    load: Vec<RawLoad>,
    loss: RawLoss,
    #[serde(default)]
    priority: RawPriority,
    shedding: RawShedding,
    #[serde(default)]
    feasibility: RawFeasibility,
    #[serde(default)]
    edp: RawSolver,
    #[serde(default)]
    consensus: RawConsensus,
    #[serde(default)]
    output: RawOutput,
    #[serde(default)]
    overrides: RawOverrides,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    topology: Topology,
    #[serde(default)]
    edges: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Topology {
    Complete,
    Ring,
    Path,
    Edges,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerator {
    bus: usize,
    x_min: f64,
    x_max: f64,
    a: f64,
    b: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoad {
    buses: Vec<usize>,
    demand: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoss {
    buses: Vec<usize>,
    #[serde(default = "one")]
    scale: f64,
    b: Vec<Vec<f64>>,
    #[serde(default)]
    linear: Vec<f64>,
    #[serde(default)]
    constant: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPriority {
    #[serde(default)]
    levels: Vec<Vec<usize>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawShedding {
    kappa: f64,
    y_tot: f64,
    y_max: f64,
    q: f64,
    r: f64,
    #[serde(default)]
    group: Vec<RawShedGroup>,
    #[serde(default = "StepSchedule::shedding_default")]
    schedule: StepSchedule,
    #[serde(default)]
    stop: StopRule,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawShedGroup {
    buses: Vec<usize>,
    y_max: Option<f64>,
    q: Option<f64>,
    r: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFeasibility {
    #[serde(default = "default_tau")]
    tau: f64,
    s_cap: Option<f64>,
    #[serde(default = "StepSchedule::edp_default")]
    schedule: StepSchedule,
    #[serde(default)]
    stop: StopRule,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl Default for RawFeasibility {
    fn default() -> Self {
        RawFeasibility {
            tau: DEFAULT_TAU,
            s_cap: None,
            schedule: StepSchedule::edp_default(),
            stop: StopRule::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    #[serde(default = "StepSchedule::edp_default")]
    schedule: StepSchedule,
    #[serde(default)]
    stop: StopRule,
}

impl Default for RawSolver {
    fn default() -> Self {
        RawSolver {
            schedule: StepSchedule::edp_default(),
            stop: StopRule::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConsensus {
    #[serde(default = "default_epsilon")]
    epsilon: f64,
    #[serde(default = "default_sum_tolerance")]
    sum_tolerance: f64,
}

fn default_epsilon() -> f64 {
    0.4
}

fn default_sum_tolerance() -> f64 {
    1e-4
}

impl Default for RawConsensus {
    fn default() -> Self {
        RawConsensus {
            epsilon: default_epsilon(),
            sum_tolerance: default_sum_tolerance(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    #[serde(default = "default_stride")]
    trace_stride: usize,
    trace: Option<PathBuf>,
    summary: Option<PathBuf>,
}

fn default_stride() -> usize {
    100
}

impl Default for RawOutput {
    fn default() -> Self {
        RawOutput {
            trace_stride: default_stride(),
            trace: None,
            summary: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOverrides {
    #[serde(default)]
    assumptions: Vec<String>,
}

/// Schedule and stop rule for one iterative stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub schedule: StepSchedule,
    pub stop: StopRule,
}

/// A fully validated scenario. Bus indices are 0-based.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub buses: Vec<BusSpec>,
    pub graph: Graph,
    pub loss: LossModel,
    pub priorities: Vec<Option<u32>>,
    pub assignment: PriorityAssignment,
    pub shed_params: Vec<ShedParams>,
    pub shed_network: ShedNetwork,
    pub kappa: f64,
    pub y_tot: f64,
    pub tau: f64,
    pub s_cap: Option<f64>,
    /// Decoding tolerance for the priority-depth consensus.
    pub epsilon: f64,
    /// Absolute accuracy of consensus-based sums such as the loss bound.
    pub sum_tolerance: f64,
    pub edp: SolverSettings,
    pub shedding: SolverSettings,
    pub feasibility: SolverSettings,
    pub trace_stride: usize,
    pub trace_path: Option<PathBuf>,
    pub summary_path: Option<PathBuf>,
    pub overrides: BTreeSet<String>,
    pub findings: Vec<AssumptionFinding>,
}

/// The buses that take part in shedding (positive capacity or a priority
/// level) and the communication graph restricted to them.
#[derive(Debug, Clone)]
pub struct ShedNetwork {
    /// Scenario bus index of each member, ascending.
    pub members: Vec<usize>,
    pub graph: Graph,
    pub assignment: PriorityAssignment,
    pub params: Vec<ShedParams>,
}

impl ShedNetwork {
    pub fn new(graph: &Graph, priorities: &[Option<u32>], params: &[ShedParams]) -> Result<Self> {
        let members: Vec<usize> = (0..params.len())
            .filter(|&i| params[i].y_max > 0.0 || priorities[i].is_some())
            .collect();
        if members.is_empty() {
            return Err(invalid("A8", "no bus can shed load"));
        }
        let sub = graph
            .induced(&members)
            .map_err(|e| invalid("A1", format!("shedding buses: {e}")))?;
        let levels: Vec<Option<u32>> = members.iter().map(|&i| priorities[i]).collect();
        Ok(ShedNetwork {
            assignment: partition_priorities(&levels)
                .map_err(|e| invalid("priority", e.to_string()))?,
            params: members.iter().map(|&i| params[i]).collect(),
            graph: sub,
            members,
        })
    }

    /// Spreads member values back over all `n` buses; other buses get 0.
    pub fn scatter(&self, values: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (&i, &v) in self.members.iter().zip(values) {
            out[i] = v;
        }
        out
    }
}

/// Changes applied on top of the file before validation.
#[derive(Debug, Clone, Default)]
pub struct Adjustments {
    pub demand_scale: Option<f64>,
    pub y_tot: Option<f64>,
    pub max_iterations: Option<usize>,
    pub residual_tol: Option<f64>,
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    load_scenario_with(path, &Adjustments::default())
}

pub fn load_scenario_with(path: &Path, adjust: &Adjustments) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config = parse_scenario(&text, adjust)?;
    // Relative output paths are resolved against the scenario's directory.
    let base = path.parent().unwrap_or(Path::new(""));
    for p in [&mut config.trace_path, &mut config.summary_path]
        .into_iter()
        .flatten()
    {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(config)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_error(text: &str, err: toml::de::Error) -> Error {
    let (line, field) = match err.span() {
        Some(span) => {
            let line = line_of(text, span.start);
            let source = text.lines().nth(line - 1).unwrap_or("");
            let field = source
                .split_once('=')
                .map(|(k, _)| k.trim().to_string())
                .filter(|k| !k.is_empty() && !k.starts_with('['));
            (line, field)
        }
        None => (0, None),
    };
    Error::Parse {
        line,
        field,
        message: err.message().trim().to_string(),
    }
}

fn invalid(assumption: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        assumption: assumption.into(),
        message: message.into(),
    }
}

fn bus_index(n: usize, bus: usize, what: &str) -> Result<usize> {
    if bus == 0 || bus > n {
        return Err(invalid(
            "bus",
            format!("{what} refers to bus {bus}, outside 1..={n}"),
        ));
    }
    Ok(bus - 1)
}

/// Parses and validates scenario text.
pub fn parse_scenario(text: &str, adjust: &Adjustments) -> Result<ScenarioConfig> {
    let raw: RawScenario = toml::from_str(text).map_err(|e| parse_error(text, e))?;
    build(raw, adjust)
}

fn build(raw: RawScenario, adjust: &Adjustments) -> Result<ScenarioConfig> {
    let n = raw.buses;
    if n == 0 {
        return Err(invalid("A1", "a scenario needs at least one bus"));
    }

    let graph = match raw.graph.topology {
        Topology::Complete => Graph::complete(n),
        Topology::Ring => Graph::ring(n),
        Topology::Path => Graph::path(n),
        Topology::Edges => {
            let edges = raw
                .graph
                .edges
                .iter()
                .map(|&(a, b)| Ok((bus_index(n, a, "edge")?, bus_index(n, b, "edge")?)))
                .collect::<Result<Vec<_>>>()?;
            Graph::new(n, &edges)
        }
    }
    .map_err(|e| match e {
        Error::DisconnectedGraph { components } => invalid(
            "A1",
            format!("communication graph has {components} components"),
        ),
        other => other,
    })?;

    let mut buses: Vec<BusSpec> = (0..n).map(|i| BusSpec::load(i, 0.0)).collect();
    for g in &raw.generator {
        let i = bus_index(n, g.bus, "generator")?;
        if buses[i].is_generator {
            return Err(invalid("bus", format!("bus {} has two generators", g.bus)));
        }
        if g.x_min > g.x_max {
            return Err(invalid(
                "bus",
                format!("bus {}: x_min {} exceeds x_max {}", g.bus, g.x_min, g.x_max),
            ));
        }
        buses[i] = BusSpec::generator(i, g.x_min, g.x_max, g.a, g.b);
    }
    let scale = adjust.demand_scale.unwrap_or(1.0) * raw.demand_scale;
    for l in &raw.load {
        for &b in &l.buses {
            let i = bus_index(n, b, "load")?;
            buses[i].demand += l.demand * scale;
        }
    }
    for b in &buses {
        b.validate()?;
    }

    if raw.loss.linear.iter().any(|v| *v != 0.0) || raw.loss.constant != 0.0 {
        return Err(invalid(
            "loss",
            "only the quadratic loss form is supported; linear and constant terms must be zero",
        ));
    }
    let k = raw.loss.buses.len();
    if raw.loss.b.len() != k || raw.loss.b.iter().any(|row| row.len() != k) {
        return Err(invalid("loss", format!("loss matrix must be {k}x{k}")));
    }
    let idx = raw
        .loss
        .buses
        .iter()
        .map(|&b| bus_index(n, b, "loss matrix"))
        .collect::<Result<Vec<_>>>()?;
    let mut b = DMatrix::zeros(n, n);
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            b[(i, j)] = raw.loss.b[r][c] * raw.loss.scale;
        }
    }
    if (0..n).any(|i| (0..n).any(|j| b[(i, j)] != b[(j, i)])) {
        return Err(invalid("A2", "loss matrix is not symmetric"));
    }
    let tolerance = crate::power::default_psd_tolerance(&b);
    let loss = factor_loss_matrix(&b, tolerance).map_err(|e| invalid("A2", e.to_string()))?;

    let mut priorities = vec![None; n];
    for (level, members) in raw.priority.levels.iter().enumerate() {
        for &bus in members {
            let i = bus_index(n, bus, "priority level")?;
            if priorities[i].is_some() {
                return Err(invalid(
                    "priority",
                    format!("bus {bus} appears in two levels"),
                ));
            }
            priorities[i] = Some(level as u32 + 1);
        }
    }
    let assignment =
        partition_priorities(&priorities).map_err(|e| invalid("priority", e.to_string()))?;
    if assignment.m() > 0 && assignment.regular_count() == 0 {
        return Err(invalid("priority", "at least one bus must stay regular"));
    }

    let sh = &raw.shedding;
    let mut shed_params = vec![
        ShedParams {
            y_max: sh.y_max,
            q: sh.q,
            r: sh.r
        };
        n
    ];
    for group in &sh.group {
        for &bus in &group.buses {
            let p = &mut shed_params[bus_index(n, bus, "shedding group")?];
            p.y_max = group.y_max.unwrap_or(p.y_max);
            p.q = group.q.unwrap_or(p.q);
            p.r = group.r.unwrap_or(p.r);
        }
    }
    if let Some(p) = shed_params
        .iter()
        .find(|p| !(p.q > 0.0) || !(p.y_max >= 0.0))
    {
        return Err(invalid(
            "A7",
            format!("shedding needs q > 0 and y_max >= 0, got {p:?}"),
        ));
    }
    let y_tot = adjust.y_tot.unwrap_or(sh.y_tot);
    if !(y_tot >= 0.0) {
        return Err(invalid(
            "shedding",
            format!("y_tot {y_tot} must be nonnegative"),
        ));
    }
    if !(sh.kappa >= 1.0) {
        return Err(invalid(
            "shedding",
            format!("kappa {} must be at least 1", sh.kappa),
        ));
    }
    let overrides: BTreeSet<String> = raw.overrides.assumptions.iter().cloned().collect();
    let capacity: f64 = shed_params.iter().map(|p| p.y_max).sum();
    if capacity <= y_tot && !overrides.contains("A8") {
        return Err(invalid(
            "A8",
            format!("Assumption 8 violated: total y_max {capacity} does not exceed y_tot {y_tot}"),
        ));
    }

    let shed_network = ShedNetwork::new(&graph, &priorities, &shed_params)?;

    let f = &raw.feasibility;
    if !(f.tau > 0.0) {
        return Err(invalid(
            "feasibility",
            format!("tau {} must be positive", f.tau),
        ));
    }
    if let Some(cap) = f.s_cap {
        if !(cap > 0.0) {
            return Err(invalid(
                "feasibility",
                format!("s_cap {cap} must be positive"),
            ));
        }
    }
    let c = &raw.consensus;
    if !(c.epsilon > 0.0 && c.epsilon < 0.5) {
        return Err(invalid(
            "consensus",
            format!("epsilon {} must lie in (0, 0.5)", c.epsilon),
        ));
    }
    if !(c.sum_tolerance > 0.0) {
        return Err(invalid("consensus", "sum_tolerance must be positive"));
    }
    if raw.output.trace_stride == 0 {
        return Err(invalid("output", "trace_stride must be positive"));
    }

    let settings = |schedule: StepSchedule, stop: StopRule| -> Result<SolverSettings> {
        schedule
            .validate()
            .map_err(|e| invalid("A6", e.to_string()))?;
        let mut stop = stop;
        if let Some(k) = adjust.max_iterations {
            stop.max_iterations = k;
        }
        if let Some(t) = adjust.residual_tol {
            stop.residual_tol = t;
        }
        Ok(SolverSettings { schedule, stop })
    };

    let findings = check_power_assumptions(&buses, &loss);
    if let Some(bad) = findings
        .iter()
        .find(|f| !f.holds && !overrides.contains(&f.assumption))
    {
        return Err(invalid(&bad.assumption, bad.detail.clone()));
    }

    Ok(ScenarioConfig {
        name: raw.name,
        edp: settings(raw.edp.schedule, raw.edp.stop)?,
        shedding: settings(sh.schedule, sh.stop)?,
        feasibility: settings(f.schedule, f.stop)?,
        kappa: sh.kappa,
        tau: f.tau,
        s_cap: f.s_cap,
        epsilon: c.epsilon,
        sum_tolerance: c.sum_tolerance,
        trace_stride: raw.output.trace_stride,
        trace_path: raw.output.trace,
        summary_path: raw.output.summary,
        buses,
        graph,
        loss,
        priorities,
        assignment,
        shed_params,
        shed_network,
        y_tot,
        overrides,
        findings,
    })
}

/// Small random scenario: a feasible dispatch instance and a shedding ladder
/// on a random connected graph, all drawn from `seed`.
pub fn random_scenario(seed: u64, n: usize) -> Result<ScenarioConfig> {
    use crate::random::{
        random_connected_graph, random_edp_instance, random_shed_instance, seeded,
    };
    use rand::Rng;
    if n == 0 {
        return Err(invalid("A1", "a scenario needs at least one bus"));
    }
    let mut rng = seeded(seed);
    let graph = random_connected_graph(&mut rng, n, 0.3);
    let inst = random_edp_instance(&mut rng, n);
    let m = rng.gen_range(0..n.min(4));
    let shed = random_shed_instance(&mut rng, n, m);
    let priorities: Vec<Option<u32>> = (0..n)
        .map(|i| match shed.assignment.categories[i] {
            crate::shed::Category::Prioritized { level } => Some(level),
            crate::shed::Category::Regular => None,
        })
        .collect();
    let shed_network = ShedNetwork::new(&graph, &priorities, &shed.params)?;
    let solver = |schedule| SolverSettings {
        schedule,
        stop: StopRule {
            max_iterations: 200_000,
            ..StopRule::default()
        },
    };
    Ok(ScenarioConfig {
        name: format!("random-{seed}"),
        findings: check_power_assumptions(&inst.buses, &inst.loss),
        buses: inst.buses,
        graph,
        loss: inst.loss,
        priorities,
        shed_network,
        assignment: shed.assignment,
        shed_params: shed.params,
        kappa: shed.kappa,
        y_tot: shed.y_tot,
        tau: DEFAULT_TAU,
        s_cap: None,
        epsilon: default_epsilon(),
        sum_tolerance: default_sum_tolerance(),
        // Random graphs are sparse; a small dispatch step keeps the agents'
        // multipliers close.
        edp: solver(StepSchedule::HarmonicPower {
            c: 0.5,
            exponent: 0.6,
        }),
        shedding: solver(StepSchedule::shedding_default()),
        feasibility: solver(StepSchedule::HarmonicPower {
            c: 1.0,
            exponent: 1.0,
        }),
        trace_stride: 100,
        trace_path: None,
        summary_path: None,
        overrides: BTreeSet::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"
name = "tiny"
buses = 3

[graph]
topology = "path"

[[generator]]
bus = 1
x_min = 0.0
x_max = 10.0
a = 0.1
b = 1.0

[[load]]
buses = [2, 3]
demand = 2.0

[loss]
buses = [1]
b = [[0.01]]

[priority]
levels = [[2]]

[shedding]
kappa = 5.0
y_tot = 0.5
y_max = 1.0
q = 1.0
r = 0.5
"#;

    fn parse(text: &str) -> Result<ScenarioConfig> {
        parse_scenario(text, &Adjustments::default())
    }

    #[test]
    fn tiny_scenario_loads() {
        let c = parse(TINY).unwrap();
        assert_eq!(c.buses.len(), 3);
        assert!(c.buses[0].is_generator);
        assert_eq!(c.buses[2].demand, 2.0);
        assert_eq!(c.loss.b[(0, 0)], 0.01);
        assert_eq!(c.assignment.m(), 1);
        assert_eq!(c.priorities, vec![None, Some(1), None]);
        assert_eq!(c.edp.schedule, StepSchedule::edp_default());
    }

    #[test]
    fn inverted_box_is_rejected() {
        let text = TINY.replace("x_min = 0.0", "x_min = 12.0");
        assert!(matches!(parse(&text), Err(Error::Validation { .. })));
    }

    #[test]
    fn over_budget_shedding_names_assumption() {
        let text = TINY.replace("y_tot = 0.5", "y_tot = 3.5");
        match parse(&text) {
            Err(Error::Validation {
                assumption,
                message,
            }) => {
                assert_eq!(assumption, "A8");
                assert!(message.contains("Assumption 8"));
            }
            other => panic!("{other:?}"),
        }
        let overridden = format!("{text}\n[overrides]\nassumptions = [\"A8\"]\n");
        assert!(parse(&overridden).is_ok());
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = TINY.replace("kappa = 5.0", "kappa = 5.0\nkapa = 1.0");
        match parse(&text) {
            Err(Error::Parse { line, message, .. }) => {
                let expected = text.lines().position(|l| l.starts_with("kapa")).unwrap() + 1;
                assert_eq!(line, expected);
                assert!(message.contains("kapa"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn linear_loss_terms_are_rejected() {
        let text = TINY.replace("b = [[0.01]]", "b = [[0.01]]\nlinear = [0.1]");
        assert!(
            matches!(parse(&text), Err(Error::Validation { assumption, .. }) if assumption == "loss")
        );
    }

    #[test]
    fn infeasible_demand_fails_assumption_check() {
        // Demand below what the minimum output can absorb.
        let text = TINY.replace("x_min = 0.0", "x_min = 8.0");
        assert!(
            matches!(parse(&text), Err(Error::Validation { assumption, .. }) if assumption == "A5.1")
        );
    }

    #[test]
    fn adjustments_apply_before_validation() {
        let adj = Adjustments {
            demand_scale: Some(2.0),
            y_tot: Some(0.25),
            ..Adjustments::default()
        };
        let c = parse_scenario(TINY, &adj).unwrap();
        assert_eq!(c.buses[1].demand, 4.0);
        assert_eq!(c.y_tot, 0.25);
    }
}
