//! Experiment configuration: TOML schema, validation, and assembly of the
//! truth model, loads, and training plan.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use netwave::certify::CpConvention;
use netwave::error::{Error, Result};
use netwave::fem::{EdgeCoefficients, TruthModel};
use netwave::forcing::{Expr, ForcingModel, SourceTerm, TimeSignal};
use netwave::greedy::{GreedyIndicator, GreedySettings};
use netwave::integrate::SolverSettings;
use netwave::network::{build_graph, kernel_space, EdgeSpec, TopologySpec};
use netwave::persist::model_hash;
use netwave::reduce::PcaSettings;
use netwave::system::LoadModel;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    network: NetworkSection,
    coefficients: CoefficientsSection,
    parameter: ParameterSection,
    discretization: DiscretizationSection,
    solver: SolverSection,
    #[serde(default)]
    boundary: BTreeMap<String, String>,
    #[serde(default)]
    source: SourceSection,
    #[serde(default)]
    initial: InitialSection,
    #[serde(default)]
    greedy: GreedySection,
    #[serde(default)]
    bound: BoundSection,
    #[serde(default)]
    test: TestSection,
    #[serde(default)]
    plotdata: PlotSection,
    output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkSection {
    /// JSON topology file, resolved relative to the config file.
    file: Option<PathBuf>,
    nodes: Option<Vec<String>>,
    edges: Option<Vec<EdgeSpec>>,
    boundary_nodes: Option<Vec<String>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientsSection {
    a: Vec<f64>,
    b: Vec<f64>,
    d_base: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParameterSection {
    min: f64,
    max: f64,
    train_count: usize,
    #[serde(default = "default_spacing")]
    train_spacing: String,
}

fn default_spacing() -> String {
    "log".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiscretizationSection {
    cells_per_edge: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverSection {
    tau: f64,
    t_final: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceSection {
    #[serde(default)]
    f: Vec<SourceEntry>,
    #[serde(default)]
    g: Vec<SourceEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceEntry {
    time: String,
    space: String,
    /// Edge ids; omitted means all edges.
    edges: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialSection {
    p: Option<String>,
    u: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GreedySection {
    #[serde(default = "default_tolerance")]
    tolerance: f64,
    #[serde(default = "default_max_basis")]
    max_basis: usize,
    #[serde(default = "default_max_modes")]
    max_modes_per_iteration: usize,
    #[serde(default = "default_energy_cutoff")]
    energy_cutoff: f64,
    #[serde(default = "default_indicator")]
    indicator: String,
}

fn default_tolerance() -> f64 {
    1e-2
}
fn default_max_basis() -> usize {
    250
}
fn default_max_modes() -> usize {
    10
}
fn default_energy_cutoff() -> f64 {
    1e-7
}
fn default_indicator() -> String {
    "delta".into()
}

impl Default for GreedySection {
    fn default() -> Self {
        GreedySection {
            tolerance: default_tolerance(),
            max_basis: default_max_basis(),
            max_modes_per_iteration: default_max_modes(),
            energy_cutoff: default_energy_cutoff(),
            indicator: default_indicator(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BoundSection {
    #[serde(default = "default_convention")]
    cp_convention: String,
    #[serde(default)]
    worst_case_constants: bool,
}

fn default_convention() -> String {
    "sqrt".into()
}

impl Default for BoundSection {
    fn default() -> Self {
        BoundSection {
            cp_convention: default_convention(),
            worst_case_constants: false,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TestSection {
    #[serde(default = "default_test_count")]
    count: usize,
    #[serde(default = "default_test_seed")]
    seed: u64,
    /// Requested reduced sizes; omitted means every whole greedy iteration.
    n_grid: Option<Vec<usize>>,
}

fn default_test_count() -> usize {
    20
}
fn default_test_seed() -> u64 {
    7071
}

impl Default for TestSection {
    fn default() -> Self {
        TestSection {
            count: default_test_count(),
            seed: default_test_seed(),
            n_grid: None,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlotSection {
    /// Parameter the per-time figure data is produced at.
    mu: Option<f64>,
    /// Reduced size for the per-time figure; omitted means the largest.
    n: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    dir: PathBuf,
}

/// Fully validated experiment: model, loads, plans, output location.
#[derive(Debug)]
pub struct Experiment {
    pub model: TruthModel,
    pub loads: LoadModel,
    pub p0: DVector<f64>,
    pub u0: DVector<f64>,
    pub solver: SolverSettings,
    pub greedy: GreedySettings,
    pub mu_train: Vec<f64>,
    pub test_count: usize,
    pub test_seed: u64,
    pub n_grid: Option<Vec<usize>>,
    pub plot_mu: Option<f64>,
    pub plot_n: Option<usize>,
    pub out_dir: PathBuf,
    /// Hash of the model (topology, coefficients, mesh).
    pub model_hash: String,
    /// Hash additionally covering loads, initial data, and solver settings;
    /// keys the on-disk truth cache.
    pub run_hash: String,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

pub fn load_experiment(path: &Path) -> Result<Experiment> {
    let text = fs::read_to_string(path)
        .map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    let file: ConfigFile = toml::from_str(&text)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));

    // Topology: referenced file or inline table, not both.
    let topo: TopologySpec = match (&file.network.file, &file.network.edges) {
        (Some(_), Some(_)) => {
            return Err(invalid("network: give either `file` or inline `edges`, not both"))
        }
        (Some(f), None) => {
            if file.network.nodes.is_some() || file.network.boundary_nodes.is_some() {
                return Err(invalid(
                    "network: `nodes`/`boundary_nodes` belong in the referenced file",
                ));
            }
            let p = base.join(f);
            let json = fs::read_to_string(&p)
                .map_err(|e| invalid(format!("cannot read network file {}: {e}", p.display())))?;
            serde_json::from_str(&json)
                .map_err(|e| invalid(format!("network file {}: {e}", p.display())))?
        }
        (None, Some(edges)) => TopologySpec {
            nodes: file
                .network
                .nodes
                .clone()
                .ok_or_else(|| invalid("network: inline topology needs `nodes`"))?,
            edges: edges.clone(),
            boundary_nodes: file.network.boundary_nodes.clone(),
        },
        (None, None) => return Err(invalid("network: missing `file` or inline `edges`")),
    };
    let graph = build_graph(&topo)?;
    let kernel = kernel_space(&graph);

    let par = &file.parameter;
    if !(par.min > 0.0) || !(par.max > par.min) || !par.max.is_finite() {
        return Err(invalid("parameter: need 0 < min < max"));
    }
    if par.train_count < 1 {
        return Err(invalid("parameter: train_count must be at least 1"));
    }
    let coeff = EdgeCoefficients {
        a: file.coefficients.a.clone(),
        b: file.coefficients.b.clone(),
        d_base: file.coefficients.d_base.clone(),
        mu_min: par.min,
        mu_max: par.max,
    };
    let model = TruthModel::build(graph, coeff, &kernel, file.discretization.cells_per_edge)?;

    let solver = SolverSettings::new(file.solver.tau, file.solver.t_final);
    solver.validate()?;

    // Boundary signals: one per boundary node, keyed by node id; unnamed
    // boundary nodes get the zero signal.
    let boundary_nodes = model.graph.boundary_nodes().to_vec();
    for key in file.boundary.keys() {
        let idx = model.graph.node_index(key);
        match idx {
            None => return Err(invalid(format!("boundary: unknown node `{key}`"))),
            Some(i) if !model.graph.is_boundary(i) => {
                return Err(invalid(format!("boundary: node `{key}` is not a boundary node")))
            }
            Some(_) => {}
        }
    }
    let mut boundary = Vec::with_capacity(boundary_nodes.len());
    for &node in &boundary_nodes {
        let name = model.graph.node_id(node);
        match file.boundary.get(name) {
            Some(src) => boundary.push(
                TimeSignal::from_expr(src)
                    .map_err(|e| invalid(format!("boundary `{name}`: {e}")))?,
            ),
            None => boundary.push(TimeSignal::Zero),
        }
    }

    let parse_sources = |entries: &[SourceEntry], which: &str| -> Result<Vec<SourceTerm>> {
        entries
            .iter()
            .enumerate()
            .map(|(i, entry)| {
                let time = TimeSignal::from_expr(&entry.time)
                    .map_err(|e| invalid(format!("source.{which}[{i}].time: {e}")))?;
                let space = Expr::parse(&entry.space, "x")
                    .map_err(|e| invalid(format!("source.{which}[{i}].space: {e}")))?;
                let edges = match &entry.edges {
                    None => (0..model.graph.edge_count()).collect(),
                    Some(ids) => ids
                        .iter()
                        .map(|id| {
                            model
                                .graph
                                .edges()
                                .iter()
                                .position(|e| e.id == *id)
                                .ok_or_else(|| {
                                    invalid(format!("source.{which}[{i}]: unknown edge `{id}`"))
                                })
                        })
                        .collect::<Result<Vec<_>>>()?,
                };
                Ok(SourceTerm { time, space, edges })
            })
            .collect()
    };
    let forcing = ForcingModel {
        f_terms: parse_sources(&file.source.f, "f")?,
        g_terms: parse_sources(&file.source.g, "g")?,
        boundary,
    };
    let loads = LoadModel::build(&model, &forcing)?;

    let p0 = match &file.initial.p {
        None => DVector::zeros(model.n_p),
        Some(src) => {
            let expr = Expr::parse(src, "x").map_err(|e| invalid(format!("initial.p: {e}")))?;
            model.project_p0(&|_, x| expr.eval(x))
        }
    };
    let u0 = match &file.initial.u {
        None => DVector::zeros(model.n_u),
        Some(src) => {
            let expr = Expr::parse(src, "x").map_err(|e| invalid(format!("initial.u: {e}")))?;
            model.project_p1(&|_, x| expr.eval(x))
        }
    };

    let gr = &file.greedy;
    if !(gr.tolerance >= 0.0) || !gr.tolerance.is_finite() {
        return Err(invalid("greedy: tolerance must be finite and >= 0"));
    }
    if gr.max_basis < 1 {
        return Err(invalid("greedy: max_basis must be at least 1"));
    }
    if gr.max_modes_per_iteration < 1 {
        return Err(invalid("greedy: max_modes_per_iteration must be at least 1"));
    }
    if !(gr.energy_cutoff >= 0.0 && gr.energy_cutoff < 1.0) {
        return Err(invalid("greedy: energy_cutoff must lie in [0, 1)"));
    }
    let indicator = match gr.indicator.as_str() {
        "delta" => GreedyIndicator::Delta,
        "delta_tilde" => GreedyIndicator::DeltaTilde,
        other => {
            return Err(invalid(format!(
                "greedy: indicator must be `delta` or `delta_tilde`, got `{other}`"
            )))
        }
    };
    let convention = match file.bound.cp_convention.as_str() {
        "sqrt" => CpConvention::Sqrt,
        "eigenvalue" => CpConvention::Eigenvalue,
        other => {
            return Err(invalid(format!(
                "bound: cp_convention must be `sqrt` or `eigenvalue`, got `{other}`"
            )))
        }
    };

    let mu_train = train_parameters(par.min, par.max, par.train_count, &par.train_spacing)?;
    let greedy = GreedySettings {
        mu_train: mu_train.clone(),
        max_basis: gr.max_basis,
        tol: gr.tolerance,
        pca: PcaSettings {
            energy_cutoff: gr.energy_cutoff,
            max_modes: gr.max_modes_per_iteration,
        },
        indicator,
        convention,
        worst_case_constants: file.bound.worst_case_constants,
    };

    let n_grid = match &file.test.n_grid {
        None => None,
        Some(raw) => {
            if raw.is_empty() {
                return Err(invalid("test: n_grid must not be empty when given"));
            }
            let mut grid = raw.clone();
            grid.sort_unstable();
            grid.dedup();
            Some(grid)
        }
    };
    if let Some(mu) = file.plotdata.mu {
        if !(mu >= par.min && mu <= par.max) {
            return Err(invalid(format!(
                "plotdata: mu = {mu} outside the parameter domain [{}, {}]",
                par.min, par.max
            )));
        }
    }

    let model_hash = model_hash(&model);
    let run_hash = {
        let mut text = model_hash.clone();
        text.push('|');
        text.push_str(&format!(
            "{:016x},{:016x}|",
            file.solver.tau.to_bits(),
            file.solver.t_final.to_bits()
        ));
        for (node, expr) in &file.boundary {
            text.push_str(&format!("b:{node}={expr};"));
        }
        for (which, entries) in [("f", &file.source.f), ("g", &file.source.g)] {
            for e in entries {
                text.push_str(&format!(
                    "s{which}:{}:{}:{};",
                    e.time,
                    e.space,
                    e.edges.as_ref().map(|v| v.join(",")).unwrap_or_default()
                ));
            }
        }
        text.push_str(&format!(
            "i:{}:{}",
            file.initial.p.as_deref().unwrap_or(""),
            file.initial.u.as_deref().unwrap_or("")
        ));
        hex::encode(Sha256::digest(text.as_bytes()))
    };

    Ok(Experiment {
        model,
        loads,
        p0,
        u0,
        solver,
        greedy,
        mu_train,
        test_count: file.test.count,
        test_seed: file.test.seed,
        n_grid,
        plot_mu: file.plotdata.mu,
        plot_n: file.plotdata.n,
        out_dir: base.join(&file.output.dir),
        model_hash,
        run_hash,
    })
}

/// Training parameters over [min, max]: `log` spacing (endpoints included)
/// or `linear`. A single sample sits at the geometric midpoint.
pub fn train_parameters(min: f64, max: f64, count: usize, spacing: &str) -> Result<Vec<f64>> {
    match spacing {
        "log" => Ok(if count == 1 {
            vec![(min * max).sqrt()]
        } else {
            (0..count)
                .map(|i| {
                    let t = i as f64 / (count - 1) as f64;
                    min * (max / min).powf(t)
                })
                .collect()
        }),
        "linear" => Ok(if count == 1 {
            vec![0.5 * (min + max)]
        } else {
            (0..count)
                .map(|i| {
                    let t = i as f64 / (count - 1) as f64;
                    min + (max - min) * t
                })
                .collect()
        }),
        other => Err(invalid(format!(
            "parameter: train_spacing must be `log` or `linear`, got `{other}`"
        ))),
    }
}

/// Log-uniform test sample, sorted ascending; deterministic in the seed.
pub fn sample_test_parameters(min: f64, max: f64, count: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let ratio = max / min;
    let mut mus: Vec<f64> = (0..count)
        .map(|_| {
            let t: f64 = rng.random();
            min * ratio.powf(t)
        })
        .collect();
    mus.sort_by(|a, b| a.partial_cmp(b).unwrap());
    mus
}
