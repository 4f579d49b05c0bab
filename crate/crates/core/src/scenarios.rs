//! Scenario files, built-in experiment configurations, and parameter sweeps.
//!
//! Scenarios are TOML with an explicit `schema_version` and strict key
//! checking. The five shipped configurations encode the two benchmark
//! networks verbatim; loading one and solving it is all the CLI does.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leaders::{Evaluator, ModelParams, TrafficFormulation};
use crate::metrics;
use crate::network::{
    AccessCongestion, ExpansionConfig, MultiModalNetwork, OdPair, Operator, OperatorKind,
    PhysicalNetwork, PricingScheme, PtLine, RoadLink,
};
use crate::par;
use crate::pumcm::{SigmaConfig, ValueIterationOptions};
use crate::solver::{self, ResidualKind, SolverOptions};
use crate::network::tntp;

pub const SCHEMA_VERSION: u32 = 1;

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoiceSection {
    pub sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_origin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_hub: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_service: Option<f64>,
    pub discount: f64,
    pub value_of_time: f64,
    pub mode_choice_epsilon: f64,
}

impl Default for ChoiceSection {
    fn default() -> Self {
        ChoiceSection {
            sigma: 1.0,
            sigma_origin: None,
            sigma_hub: None,
            sigma_service: None,
            discount: 1.0,
            value_of_time: 1.0,
            mode_choice_epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupplySection {
    pub bpr_alpha: f64,
    pub bpr_beta: f64,
    pub max_time_ratio: f64,
    pub pt_access_capacitated: bool,
}

impl Default for SupplySection {
    fn default() -> Self {
        SupplySection {
            bpr_alpha: 0.15,
            bpr_beta: 4.0,
            max_time_ratio: 5.0,
            pt_access_capacitated: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PricesSection {
    pub max_price: f64,
}

impl Default for PricesSection {
    fn default() -> Self {
        PricesSection { max_price: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaasSection {
    pub enabled: bool,
    pub transfer_penalty: f64,
}

impl Default for MaasSection {
    fn default() -> Self {
        MaasSection {
            enabled: true,
            transfer_penalty: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NonMaasSection {
    pub transfer_penalty: f64,
}

impl Default for NonMaasSection {
    fn default() -> Self {
        NonMaasSection {
            transfer_penalty: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrivingSection {
    pub fixed_cost: f64,
    pub distance_cost: f64,
}

impl Default for DrivingSection {
    fn default() -> Self {
        DrivingSection {
            fixed_cost: 5.0,
            distance_cost: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub step_size: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    /// "natural" or "iterate_diff".
    pub residual: String,
    /// "supply_gap" or "time_gap": how the traffic block of G is formed on
    /// congestible links.
    pub traffic_formulation: String,
    pub trace_stride: usize,
    pub vi_tolerance: f64,
    pub vi_max_sweeps: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            step_size: 1e-4,
            tolerance: 1e-6,
            max_iterations: 500_000,
            residual: "natural".to_string(),
            traffic_formulation: "supply_gap".to_string(),
            trace_stride: 10,
            vi_tolerance: 1e-12,
            vi_max_sweeps: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadSection {
    pub tail: usize,
    pub head: usize,
    pub length: f64,
    pub capacity: f64,
    pub time: f64,
    #[serde(default)]
    pub bidirectional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PtLineSection {
    pub operator: String,
    pub stops: Vec<usize>,
    pub times: Vec<f64>,
    pub capacities: Vec<f64>,
    #[serde(default)]
    pub bidirectional: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub nodes: Vec<usize>,
    pub roads: Vec<RoadSection>,
    #[serde(default)]
    pub pt_lines: Vec<PtLineSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorSection {
    pub name: String,
    /// "mod" or "pt".
    pub kind: String,
    pub wholesale_price: f64,
    /// "distance_rate", "flat_rate", or "per_link".
    pub pricing: String,
    pub access_time: f64,
    pub access_capacity: f64,
    /// "per_link" (default) or "pooled".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub access_congestion: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fleet_size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdSection {
    pub origin: usize,
    pub dest: usize,
    pub flow: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vot: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSection {
    /// TNTP trips file: a shipped data name or a path relative to the
    /// scenario file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trips: Option<String>,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub od: Vec<OdSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub name: String,
    #[serde(default)]
    pub choice: ChoiceSection,
    #[serde(default)]
    pub supply: SupplySection,
    #[serde(default)]
    pub prices: PricesSection,
    #[serde(default)]
    pub maas: MaasSection,
    #[serde(default)]
    pub nonmaas: NonMaasSection,
    #[serde(default)]
    pub driving: DrivingSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub network: NetworkSection,
    pub operators: Vec<OperatorSection>,
    pub demand: DemandSection,
}

/// A scenario with all file references resolved and raw sections converted
/// into model inputs; still cheap to clone and mutate for sweeps.
#[derive(Debug, Clone)]
pub struct BuiltScenario {
    pub name: String,
    pub phys: PhysicalNetwork,
    pub operators: Vec<Operator>,
    pub config: ExpansionConfig,
    pub ods: Vec<OdPair>,
    pub params: ModelParams,
    pub solver: SolverOptions,
}

impl BuiltScenario {
    pub fn network(&self) -> Result<MultiModalNetwork> {
        crate::network::build(
            self.phys.clone(),
            self.operators.clone(),
            self.config.clone(),
            self.ods.clone(),
        )
    }

    pub fn evaluator(&self) -> Result<Evaluator> {
        Evaluator::new(self.network()?, self.params.clone())
    }

    pub fn operator_names(&self) -> Vec<String> {
        self.operators.iter().map(|o| o.name.clone()).collect()
    }

    /// The same scenario with the MaaS platform structurally removed.
    pub fn without_maas(&self) -> BuiltScenario {
        let mut s = self.clone();
        s.name = format!("{}__without_maas", self.name);
        s.config.maas_enabled = false;
        s
    }
}

const BUILTINS: &[(&str, &str)] = &[
    (
        "small_without_maas",
        include_str!("../data/small_without_maas.toml"),
    ),
    (
        "small_with_maas",
        include_str!("../data/small_with_maas.toml"),
    ),
    (
        "small_with_maas_moderate",
        include_str!("../data/small_with_maas_moderate.toml"),
    ),
    (
        "siouxfalls_without_maas",
        include_str!("../data/siouxfalls_without_maas.toml"),
    ),
    (
        "siouxfalls_with_maas",
        include_str!("../data/siouxfalls_with_maas.toml"),
    ),
];

const EMBEDDED_TRIPS: &[(&str, &str)] = &[(
    "siouxfalls_trips.tntp",
    include_str!("../data/siouxfalls_trips.tntp"),
)];

pub fn builtin_names() -> Vec<&'static str> {
    BUILTINS.iter().map(|(n, _)| *n).collect()
}

pub fn parse(text: &str) -> Result<ScenarioFile> {
    let file: ScenarioFile =
        toml::from_str(text).map_err(|e| Error::Scenario(format!("scenario parse: {e}")))?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(Error::Scenario(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    Ok(file)
}

/// Loads a scenario by built-in name or filesystem path.
pub fn load(spec: &str) -> Result<BuiltScenario> {
    let path = Path::new(spec);
    if path.exists() {
        let text = std::fs::read_to_string(path)?;
        let file = parse(&text)?;
        return build(&file, path.parent());
    }
    if let Some((_, text)) = BUILTINS.iter().find(|(n, _)| *n == spec) {
        let file = parse(text)?;
        return build(&file, None);
    }
    Err(Error::Scenario(format!(
        "unknown scenario '{spec}'; not a file, and built-ins are: {}",
        builtin_names().join(", ")
    )))
}

fn positive(value: f64, field: String) -> Result<f64> {
    if !value.is_finite() || value <= 0.0 {
        return Err(Error::Scenario(format!(
            "{field}: must be positive and finite, got {value}"
        )));
    }
    Ok(value)
}

fn nonnegative(value: f64, field: String) -> Result<f64> {
    if !value.is_finite() || value < 0.0 {
        return Err(Error::Scenario(format!(
            "{field}: must be nonnegative and finite, got {value}"
        )));
    }
    Ok(value)
}

pub fn build(file: &ScenarioFile, base_dir: Option<&Path>) -> Result<BuiltScenario> {
    let mut roads = Vec::new();
    for (i, r) in file.network.roads.iter().enumerate() {
        let length = positive(r.length, format!("network.roads[{i}].length"))?;
        let capacity = positive(r.capacity, format!("network.roads[{i}].capacity"))?;
        let time = positive(r.time, format!("network.roads[{i}].time"))?;
        roads.push(RoadLink {
            tail: r.tail,
            head: r.head,
            length,
            free_flow_time: time,
            capacity,
        });
        if r.bidirectional {
            roads.push(RoadLink {
                tail: r.head,
                head: r.tail,
                length,
                free_flow_time: time,
                capacity,
            });
        }
    }

    let mut operators = Vec::new();
    for (i, o) in file.operators.iter().enumerate() {
        let kind = match o.kind.as_str() {
            "mod" => OperatorKind::MoD,
            "pt" => OperatorKind::Pt,
            other => {
                return Err(Error::Scenario(format!(
                    "operators[{i}].kind: expected \"mod\" or \"pt\", got \"{other}\""
                )))
            }
        };
        let pricing = match o.pricing.as_str() {
            "distance_rate" => PricingScheme::DistanceRate,
            "flat_rate" => PricingScheme::FlatRate,
            "per_link" => PricingScheme::PerLink,
            other => {
                return Err(Error::Scenario(format!(
                    "operators[{i}].pricing: expected \"distance_rate\", \"flat_rate\" or \
                     \"per_link\", got \"{other}\""
                )))
            }
        };
        let access_congestion = match o.access_congestion.as_deref() {
            None | Some("per_link") => AccessCongestion::PerLink,
            Some("pooled") => AccessCongestion::Pooled {
                fleet_size: positive(
                    o.fleet_size.ok_or_else(|| {
                        Error::Scenario(format!(
                            "operators[{i}].fleet_size: required for pooled access"
                        ))
                    })?,
                    format!("operators[{i}].fleet_size"),
                )?,
            },
            Some(other) => {
                return Err(Error::Scenario(format!(
                    "operators[{i}].access_congestion: expected \"per_link\" or \"pooled\", \
                     got \"{other}\""
                )))
            }
        };
        operators.push(Operator {
            name: o.name.clone(),
            kind,
            wholesale_price: nonnegative(
                o.wholesale_price,
                format!("operators[{i}].wholesale_price"),
            )?,
            pricing,
            access_time: positive(o.access_time, format!("operators[{i}].access_time"))?,
            access_capacity: positive(
                o.access_capacity,
                format!("operators[{i}].access_capacity"),
            )?,
            access_congestion,
        });
    }

    let mut pt_lines = Vec::new();
    for (i, l) in file.network.pt_lines.iter().enumerate() {
        let op = operators
            .iter()
            .position(|o| o.name == l.operator)
            .ok_or_else(|| {
                Error::Scenario(format!(
                    "network.pt_lines[{i}].operator: no operator named \"{}\"",
                    l.operator
                ))
            })?;
        for (j, &t) in l.times.iter().enumerate() {
            positive(t, format!("network.pt_lines[{i}].times[{j}]"))?;
        }
        for (j, &c) in l.capacities.iter().enumerate() {
            positive(c, format!("network.pt_lines[{i}].capacities[{j}]"))?;
        }
        pt_lines.push(PtLine {
            operator: op,
            stops: l.stops.clone(),
            segment_times: l.times.clone(),
            segment_capacities: l.capacities.clone(),
        });
        if l.bidirectional {
            let mut stops = l.stops.clone();
            stops.reverse();
            let mut times = l.times.clone();
            times.reverse();
            let mut caps = l.capacities.clone();
            caps.reverse();
            pt_lines.push(PtLine {
                operator: op,
                stops,
                segment_times: times,
                segment_capacities: caps,
            });
        }
    }

    let phys = PhysicalNetwork {
        nodes: file.network.nodes.clone(),
        roads,
        pt_lines,
    };

    let default_vot = positive(file.choice.value_of_time, "choice.value_of_time".into())?;
    let scale = positive(file.demand.scale, "demand.scale".into())?;
    let mut ods = Vec::new();
    match (&file.demand.trips, file.demand.od.is_empty()) {
        (Some(name), true) => {
            let text = resolve_trips(name, base_dir)?;
            let table = tntp::parse_trips(&text)?;
            for &(o, d, flow) in &table.entries {
                if o == d || flow <= 0.0 {
                    continue;
                }
                ods.push(OdPair {
                    origin: o,
                    dest: d,
                    demand: flow * scale,
                    vot: default_vot,
                });
            }
        }
        (None, false) => {
            for (i, od) in file.demand.od.iter().enumerate() {
                ods.push(OdPair {
                    origin: od.origin,
                    dest: od.dest,
                    demand: positive(od.flow, format!("demand.od[{i}].flow"))? * scale,
                    vot: match od.vot {
                        Some(v) => positive(v, format!("demand.od[{i}].vot"))?,
                        None => default_vot,
                    },
                });
            }
        }
        (Some(_), false) => {
            return Err(Error::Scenario(
                "demand: give either trips or inline od entries, not both".into(),
            ))
        }
        (None, true) => {
            return Err(Error::Scenario(
                "demand: either trips or at least one od entry is required".into(),
            ))
        }
    }

    let sigma = SigmaConfig {
        origin: file.choice.sigma_origin.unwrap_or(file.choice.sigma),
        hub: file.choice.sigma_hub.unwrap_or(file.choice.sigma),
        service: file.choice.sigma_service.unwrap_or(file.choice.sigma),
    };
    positive(sigma.origin, "choice.sigma_origin".into())?;
    positive(sigma.hub, "choice.sigma_hub".into())?;
    positive(sigma.service, "choice.sigma_service".into())?;
    let gamma = positive(file.choice.discount, "choice.discount".into())?;
    if gamma > 1.0 {
        return Err(Error::Scenario(format!(
            "choice.discount: must lie in (0, 1], got {gamma}"
        )));
    }

    let traffic = match file.solver.traffic_formulation.as_str() {
        "supply_gap" => TrafficFormulation::SupplyGap,
        "time_gap" => TrafficFormulation::TimeGap,
        other => {
            return Err(Error::Scenario(format!(
                "solver.traffic_formulation: expected \"supply_gap\" or \"time_gap\", got \"{other}\""
            )))
        }
    };
    let params = ModelParams {
        gamma,
        sigma,
        bpr_alpha: positive(file.supply.bpr_alpha, "supply.bpr_alpha".into())?,
        bpr_beta: positive(file.supply.bpr_beta, "supply.bpr_beta".into())?,
        max_time_ratio: positive(file.supply.max_time_ratio, "supply.max_time_ratio".into())?,
        max_price: positive(file.prices.max_price, "prices.max_price".into())?,
        traffic,
        vi: ValueIterationOptions {
            tolerance: positive(file.solver.vi_tolerance, "solver.vi_tolerance".into())?,
            max_sweeps: file.solver.vi_max_sweeps,
        },
    };

    let residual = match file.solver.residual.as_str() {
        "natural" => ResidualKind::Natural,
        "iterate_diff" => ResidualKind::IterateDiff,
        other => {
            return Err(Error::Scenario(format!(
                "solver.residual: expected \"natural\" or \"iterate_diff\", got \"{other}\""
            )))
        }
    };
    let solver = SolverOptions {
        step_size: positive(file.solver.step_size, "solver.step_size".into())?,
        tolerance: positive(file.solver.tolerance, "solver.tolerance".into())?,
        max_iterations: file.solver.max_iterations.max(1),
        residual,
        trace_stride: file.solver.trace_stride.max(1),
    };

    let config = ExpansionConfig {
        maas_enabled: file.maas.enabled,
        maas_transfer_penalty: nonnegative(
            file.maas.transfer_penalty,
            "maas.transfer_penalty".into(),
        )?,
        nonmaas_transfer_penalty: nonnegative(
            file.nonmaas.transfer_penalty,
            "nonmaas.transfer_penalty".into(),
        )?,
        driving_fixed_cost: nonnegative(file.driving.fixed_cost, "driving.fixed_cost".into())?,
        driving_distance_cost: nonnegative(
            file.driving.distance_cost,
            "driving.distance_cost".into(),
        )?,
        mode_choice_epsilon: positive(
            file.choice.mode_choice_epsilon,
            "choice.mode_choice_epsilon".into(),
        )?,
        pt_access_capacitated: file.supply.pt_access_capacitated,
    };

    Ok(BuiltScenario {
        name: file.name.clone(),
        phys,
        operators,
        config,
        ods,
        params,
        solver,
    })
}

fn resolve_trips(name: &str, base_dir: Option<&Path>) -> Result<String> {
    if let Some((_, text)) = EMBEDDED_TRIPS.iter().find(|(n, _)| *n == name) {
        return Ok(text.to_string());
    }
    let direct = Path::new(name);
    if direct.exists() {
        return Ok(std::fs::read_to_string(direct)?);
    }
    if let Some(base) = base_dir {
        let joined = base.join(name);
        if joined.exists() {
            return Ok(std::fs::read_to_string(joined)?);
        }
    }
    Err(Error::Scenario(format!(
        "demand.trips: '{name}' is neither a shipped data set nor a readable file"
    )))
}

/// What a sweep varies.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepParameter {
    /// Wholesale price of one operator, or of all when unnamed.
    Wholesale { operator: Option<String> },
    /// Value of time of one OD pair.
    ValueOfTime { origin: usize, dest: usize },
    /// Capacity of one road link (applied to both directions if present).
    Capacity { tail: usize, head: usize },
}

impl SweepParameter {
    /// Parses "wholesale", "wholesale:<op>", "vot:<o>-<d>", "capacity:<t>-<h>".
    pub fn parse(s: &str) -> Result<SweepParameter> {
        let bad = |msg: &str| Error::Scenario(format!("sweep parameter '{s}': {msg}"));
        let pair = |rest: &str| -> Result<(usize, usize)> {
            let (a, b) = rest
                .split_once('-')
                .ok_or_else(|| bad("expected <a>-<b>"))?;
            Ok((
                a.trim().parse().map_err(|_| bad("bad node number"))?,
                b.trim().parse().map_err(|_| bad("bad node number"))?,
            ))
        };
        match s.split_once(':') {
            None if s == "wholesale" => Ok(SweepParameter::Wholesale { operator: None }),
            Some(("wholesale", op)) => Ok(SweepParameter::Wholesale {
                operator: Some(op.trim().to_string()),
            }),
            Some(("vot", rest)) => {
                let (o, d) = pair(rest)?;
                Ok(SweepParameter::ValueOfTime { origin: o, dest: d })
            }
            Some(("capacity", rest)) => {
                let (t, h) = pair(rest)?;
                Ok(SweepParameter::Capacity { tail: t, head: h })
            }
            _ => Err(bad(
                "expected wholesale[:<operator>], vot:<o>-<d>, or capacity:<tail>-<head>",
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Warm-start each point from the previous solution (serializes the
    /// sweep); cold start solves points independently and in parallel.
    pub warm_start: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Scenario("sweep: empty value grid".into()));
        }
        if self.values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Scenario(
                "sweep: values must be strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

fn apply(base: &BuiltScenario, param: &SweepParameter, value: f64) -> Result<BuiltScenario> {
    let mut s = base.clone();
    match param {
        SweepParameter::Wholesale { operator } => {
            let mut hit = false;
            for op in &mut s.operators {
                if operator.as_deref().is_none_or(|n| n == op.name) {
                    op.wholesale_price = value;
                    hit = true;
                }
            }
            if !hit {
                return Err(Error::Scenario(format!(
                    "sweep: no operator named \"{}\"",
                    operator.as_deref().unwrap_or("")
                )));
            }
        }
        SweepParameter::ValueOfTime { origin, dest } => {
            let od = s
                .ods
                .iter_mut()
                .find(|od| od.origin == *origin && od.dest == *dest)
                .ok_or_else(|| {
                    Error::Scenario(format!("sweep: no OD pair ({origin}, {dest})"))
                })?;
            od.vot = value;
        }
        SweepParameter::Capacity { tail, head } => {
            let mut hit = false;
            for r in &mut s.phys.roads {
                if (r.tail == *tail && r.head == *head) || (r.tail == *head && r.head == *tail) {
                    r.capacity = value;
                    hit = true;
                }
            }
            if !hit {
                return Err(Error::Scenario(format!(
                    "sweep: no road link ({tail}, {head})"
                )));
            }
        }
    }
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub natural_residual: f64,
    pub share_maas: f64,
    pub share_nonmaas: f64,
    pub share_driving: f64,
    pub transfer_flow: f64,
    pub platform_profit: f64,
    pub operator_profit: Vec<f64>,
    pub total_profit: f64,
    pub welfare: f64,
    pub social_welfare: f64,
}

#[derive(Debug, Clone)]
pub struct SweepAnalysis {
    /// Swept value maximizing total profit (converged rows only).
    pub total_profit_argmax: Option<f64>,
    /// Per operator: swept value maximizing that operator's profit.
    pub operator_argmax: Vec<(String, Option<f64>)>,
    /// Without-MaaS reference profits per operator.
    pub baseline_profit: Vec<(String, f64)>,
    /// Smallest grid value from which every later point is win-win-win:
    /// all operators at or above baseline and the platform nonnegative.
    pub pareto_lower_edge: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub analysis: Option<SweepAnalysis>,
}

fn solve_row(scenario: &BuiltScenario, y0: Option<Vec<f64>>, value: f64) -> Result<SweepRow> {
    let mut ev = scenario.evaluator()?;
    let eq = solver::solve(&mut ev, y0, &scenario.solver)?;
    let p = metrics::profits(&ev.net, &ev.layout, &eq.y, &eq.agg);
    let s = metrics::shares(&ev.net, &eq.agg);
    Ok(SweepRow {
        value,
        converged: eq.converged,
        iterations: eq.iterations,
        natural_residual: eq.natural_residual,
        share_maas: s.maas_pct,
        share_nonmaas: s.nonmaas_pct,
        share_driving: s.driving_pct,
        transfer_flow: eq.agg.transfer_flow,
        platform_profit: p.platform,
        operator_profit: p.operator.iter().map(|o| o.total).collect(),
        total_profit: p.total,
        welfare: eq.agg.welfare,
        social_welfare: eq.agg.welfare + p.total,
    })
}

pub fn run_sweep(base: &BuiltScenario, spec: &SweepSpec) -> Result<SweepOutcome> {
    spec.validate()?;
    let scenarios: Vec<(f64, BuiltScenario)> = spec
        .values
        .iter()
        .map(|&v| Ok((v, apply(base, &spec.parameter, v)?)))
        .collect::<Result<_>>()?;

    let rows: Vec<SweepRow> = if spec.warm_start {
        let mut rows = Vec::with_capacity(scenarios.len());
        let mut carry: Option<Vec<f64>> = None;
        for (v, sc) in &scenarios {
            let row_scenario = sc;
            let mut ev = row_scenario.evaluator()?;
            let eq = solver::solve(&mut ev, carry.clone(), &row_scenario.solver)?;
            let p = metrics::profits(&ev.net, &ev.layout, &eq.y, &eq.agg);
            let s = metrics::shares(&ev.net, &eq.agg);
            carry = Some(eq.y.clone());
            rows.push(SweepRow {
                value: *v,
                converged: eq.converged,
                iterations: eq.iterations,
                natural_residual: eq.natural_residual,
                share_maas: s.maas_pct,
                share_nonmaas: s.nonmaas_pct,
                share_driving: s.driving_pct,
                transfer_flow: eq.agg.transfer_flow,
                platform_profit: p.platform,
                operator_profit: p.operator.iter().map(|o| o.total).collect(),
                total_profit: p.total,
                welfare: eq.agg.welfare,
                social_welfare: eq.agg.welfare + p.total,
            });
        }
        rows
    } else {
        let results: Vec<Result<SweepRow>> =
            par::map_indexed(&scenarios, |_, (v, sc)| solve_row(sc, None, *v));
        let mut rows = Vec::with_capacity(results.len());
        for r in results {
            rows.push(r?);
        }
        rows
    };

    let analysis = match &spec.parameter {
        SweepParameter::Wholesale { .. } if base.config.maas_enabled => {
            let names = base.operator_names();
            let baseline_sc = base.without_maas();
            let mut base_ev = baseline_sc.evaluator()?;
            let base_eq = solver::solve(&mut base_ev, None, &baseline_sc.solver)?;
            let base_p = metrics::profits(&base_ev.net, &base_ev.layout, &base_eq.y, &base_eq.agg);

            let argmax = |f: &dyn Fn(&SweepRow) -> f64| -> Option<f64> {
                rows.iter()
                    .filter(|r| r.converged)
                    .max_by(|a, b| f(a).total_cmp(&f(b)))
                    .map(|r| r.value)
            };
            let operator_argmax: Vec<(String, Option<f64>)> = names
                .iter()
                .enumerate()
                .map(|(i, n)| (n.clone(), argmax(&move |r: &SweepRow| r.operator_profit[i])))
                .collect();

            let tol = 1e-6;
            let win = |r: &SweepRow| -> bool {
                r.converged
                    && r.platform_profit >= -tol
                    && r.operator_profit
                        .iter()
                        .zip(&base_p.operator)
                        .all(|(&p, b)| p >= b.total - tol * b.total.abs().max(1.0))
            };
            let mut edge = None;
            for r in rows.iter().rev() {
                if win(r) {
                    edge = Some(r.value);
                } else {
                    break;
                }
            }

            Some(SweepAnalysis {
                total_profit_argmax: argmax(&|r: &SweepRow| r.total_profit),
                operator_argmax,
                baseline_profit: names
                    .iter()
                    .zip(&base_p.operator)
                    .map(|(n, o)| (n.clone(), o.total))
                    .collect(),
                pareto_lower_edge: edge,
            })
        }
        _ => None,
    };

    Ok(SweepOutcome { rows, analysis })
}

pub fn write_sweep_csv<W: Write>(
    w: W,
    outcome: &SweepOutcome,
    op_names: &[String],
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec![
        "value".to_string(),
        "converged".to_string(),
        "iterations".to_string(),
        "natural_residual".to_string(),
        "share_maas".to_string(),
        "share_nonmaas".to_string(),
        "share_driving".to_string(),
        "transfer_flow".to_string(),
        "profit_platform".to_string(),
    ];
    for n in op_names {
        header.push(format!("profit_{n}"));
    }
    header.push("profit_total".to_string());
    header.push("welfare".to_string());
    header.push("social_welfare".to_string());
    wtr.write_record(&header)
        .map_err(|e| Error::Scenario(format!("sweep csv: {e}")))?;
    for r in &outcome.rows {
        let mut rec = vec![
            r.value.to_string(),
            r.converged.to_string(),
            r.iterations.to_string(),
            format!("{:e}", r.natural_residual),
            r.share_maas.to_string(),
            r.share_nonmaas.to_string(),
            r.share_driving.to_string(),
            r.transfer_flow.to_string(),
            r.platform_profit.to_string(),
        ];
        for p in &r.operator_profit {
            rec.push(p.to_string());
        }
        rec.push(r.total_profit.to_string());
        rec.push(r.welfare.to_string());
        rec.push(r.social_welfare.to_string());
        wtr.write_record(&rec)
            .map_err(|e| Error::Scenario(format!("sweep csv: {e}")))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Plot-ready two-column files (value <tab> metric), one per headline metric.
pub fn write_xy_files(dir: &Path, outcome: &SweepOutcome, op_names: &[String]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut emit = |stem: &str, f: &dyn Fn(&SweepRow) -> f64| -> Result<()> {
        let path = dir.join(format!("{stem}.xy"));
        let mut text = String::new();
        for r in &outcome.rows {
            text.push_str(&format!("{}\t{}\n", r.value, f(r)));
        }
        std::fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };
    emit("total_profit", &|r| r.total_profit)?;
    emit("platform_profit", &|r| r.platform_profit)?;
    for (i, n) in op_names.iter().enumerate() {
        emit(&format!("profit_{n}"), &move |r| r.operator_profit[i])?;
    }
    emit("welfare", &|r| r.welfare)?;
    emit("social_welfare", &|r| r.social_welfare)?;
    emit("share_maas", &|r| r.share_maas)?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_and_build() {
        for name in builtin_names() {
            let sc = load(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(!sc.ods.is_empty(), "{name}");
            assert_eq!(sc.operators.len(), 2, "{name}");
        }
    }

    #[test]
    fn small_network_has_expected_dimensions() {
        let sc = load("small_with_maas").unwrap();
        assert_eq!(sc.ods.len(), 3);
        let net = sc.network().unwrap();
        // 12 road links + 5 PT service edges + 1 pooled MoD access supply
        // make up the priced time vector.
        assert_eq!(net.tlinks.len(), 18);
        let ev = sc.evaluator().unwrap();
        // 18 times + 3 OD fares + 2 operator rates.
        assert_eq!(ev.layout.dim, 23);
        assert_eq!(ev.layout.p_ods.len(), 3);
        assert_eq!(ev.layout.rate_len, vec![1, 1]);
    }

    #[test]
    fn without_maas_drops_the_fare_block() {
        let sc = load("small_without_maas").unwrap();
        let ev = sc.evaluator().unwrap();
        assert_eq!(ev.layout.p_ods.len(), 0);
        assert_eq!(ev.layout.dim, ev.layout.n_t + 2);
    }

    #[test]
    fn siouxfalls_demand_matches_benchmark_total() {
        let sc = load("siouxfalls_with_maas").unwrap();
        assert_eq!(sc.ods.len(), 528);
        let total: f64 = sc.ods.iter().map(|od| od.demand).sum();
        assert!((total - 360_700.0 * 1.2).abs() < 1e-6, "total {total}");
        // Bidirectional roads: 38 table rows.
        assert_eq!(sc.phys.roads.len(), 76);
        // Three lines each way.
        assert_eq!(sc.phys.pt_lines.len(), 6);
    }

    #[test]
    fn round_trip_preserves_scenarios() {
        for (name, text) in BUILTINS {
            let a = parse(text).unwrap();
            let serialized = toml::to_string(&a).unwrap();
            let b = parse(&serialized).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn rejects_unknown_keys_and_bad_versions() {
        let (_, text) = BUILTINS[0];
        let bad = text.replace("schema_version = 1", "schema_version = 1\nbogus_key = 3");
        assert!(parse(&bad).is_err());
        let old = text.replace("schema_version = 1", "schema_version = 99");
        let err = parse(&old).unwrap_err().to_string();
        assert!(err.contains("schema_version"), "{err}");
    }

    #[test]
    fn rejects_negative_capacity_with_field_path() {
        let (_, text) = BUILTINS[0];
        let bad = text.replacen("capacity = 300.0", "capacity = -300.0", 1);
        let file = parse(&bad).unwrap();
        let err = build(&file, None).unwrap_err().to_string();
        assert!(err.contains("capacity"), "{err}");
        assert!(err.contains("network.roads"), "{err}");
    }

    #[test]
    fn demand_requires_exactly_one_source() {
        let (_, text) = BUILTINS[0];
        let file_ok = parse(text).unwrap();
        let mut no_demand = file_ok.clone();
        no_demand.demand.od.clear();
        assert!(build(&no_demand, None).is_err());
        let mut both = file_ok.clone();
        both.demand.trips = Some("siouxfalls_trips.tntp".into());
        assert!(build(&both, None).is_err());
    }

    #[test]
    fn sweep_parameter_parsing() {
        assert_eq!(
            SweepParameter::parse("wholesale").unwrap(),
            SweepParameter::Wholesale { operator: None }
        );
        assert_eq!(
            SweepParameter::parse("wholesale:pt").unwrap(),
            SweepParameter::Wholesale {
                operator: Some("pt".into())
            }
        );
        assert_eq!(
            SweepParameter::parse("vot:1-7").unwrap(),
            SweepParameter::ValueOfTime { origin: 1, dest: 7 }
        );
        assert_eq!(
            SweepParameter::parse("capacity:3-4").unwrap(),
            SweepParameter::Capacity { tail: 3, head: 4 }
        );
        assert!(SweepParameter::parse("nonsense").is_err());
        assert!(SweepParameter::parse("vot:17").is_err());
    }

    #[test]
    fn sweep_grid_validation() {
        let spec = SweepSpec {
            parameter: SweepParameter::Wholesale { operator: None },
            values: vec![],
            warm_start: false,
        };
        assert!(spec.validate().is_err());
        let spec = SweepSpec {
            values: vec![1.0, 1.0],
            ..spec
        };
        assert!(spec.validate().is_err());
        let spec = SweepSpec {
            values: vec![0.0, 0.5, 1.0],
            ..spec
        };
        assert!(spec.validate().is_ok());
    }

    #[test]
    fn apply_mutates_the_right_knob() {
        let sc = load("small_with_maas").unwrap();
        let w = apply(
            &sc,
            &SweepParameter::Wholesale { operator: None },
            2.5,
        )
        .unwrap();
        assert!(w.operators.iter().all(|o| o.wholesale_price == 2.5));
        let v = apply(
            &sc,
            &SweepParameter::ValueOfTime { origin: 1, dest: 7 },
            3.0,
        )
        .unwrap();
        assert_eq!(
            v.ods
                .iter()
                .find(|od| od.origin == 1 && od.dest == 7)
                .unwrap()
                .vot,
            3.0
        );
        let c = apply(&sc, &SweepParameter::Capacity { tail: 3, head: 4 }, 777.0).unwrap();
        assert_eq!(
            c.phys
                .roads
                .iter()
                .find(|r| r.tail == 3 && r.head == 4)
                .unwrap()
                .capacity,
            777.0
        );
        assert!(apply(&sc, &SweepParameter::Capacity { tail: 9, head: 9 }, 1.0).is_err());
    }
}
