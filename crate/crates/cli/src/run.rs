//! Experiment dispatch: one function per model family, each producing a summary and artifacts.

use mesoflow::fisher_rao::{fr_run, fr_stationary_measure};
use mesoflow::flows::{
    run_flow, FlowRun, FullFlow, MonokineticFlow, MonokineticState, ParticleState, ReducedFlow, ScalarFlow,
};
use mesoflow::graph::{discrete_energy, discrete_stationary_residual, gf_evolve};
use mesoflow::io::{energy_csv, graph_trajectory_csv, pressure_vtk, slice_csv};
use mesoflow::particles::{deposit_permeability, deposit_permeability_scalar, sample_initial, ParticleEnsemble, ScalarEnsemble};
use mesoflow::poisson::{PermeabilityField, PoissonProblem, PressureField};
use mesoflow::semidiscrete::{consistency_check, solve_pressure, transmission_residual};
use mesoflow::stationary::{
    constrained_minimize_gamma1, fr_functional_minimize, plap_minimize, scalar_stationary_minimize, StationaryReport,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, GraphConfig, InitialConfig, ModelKind};
use crate::CliError;

/// File produced by a run, relative to the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub path: String,
    pub bytes: Vec<u8>,
}

impl Artifact {
    fn text(path: impl Into<String>, s: String) -> Self {
        Self { path: path.into(), bytes: s.into_bytes() }
    }

    fn json<T: Serialize>(path: impl Into<String>, v: &T) -> Result<Self, CliError> {
        let mut bytes = serde_json::to_vec_pretty(v).map_err(mesoflow::Error::from)?;
        bytes.push(b'\n');
        Ok(Self { path: path.into(), bytes })
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Machine-readable summary; echoes the resolved configuration under `config`.
    pub summary: Value,
    pub artifacts: Vec<Artifact>,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let (result, artifacts) = match cfg.model {
        ModelKind::Discrete => discrete(cfg)?,
        ModelKind::Reduced | ModelKind::Full | ModelKind::FisherRao => particle_flow(cfg)?,
        ModelKind::Monokinetic => monokinetic(cfg)?,
        ModelKind::Scalar => scalar_flow(cfg)?,
        ModelKind::StationaryPlap
        | ModelKind::StationaryGamma1
        | ModelKind::StationaryScalar
        | ModelKind::StationaryFr => stationary(cfg)?,
        ModelKind::Semidiscrete => semidiscrete(cfg)?,
    };
    let summary = json!({ "model": cfg.model, "config": cfg, "result": result });
    Ok(RunOutput { summary, artifacts })
}

type Outcome = (Value, Vec<Artifact>);

fn discrete(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let Some(GraphConfig::Discrete(g)) = &cfg.graph else {
        return Err(CliError::Config(vec!["discrete model needs a graph".into()]));
    };
    let sched = cfg.schedule();
    let traj = gf_evolve(g, &cfg.params, sched.dt, sched.steps)?;
    let last = g.with_conductivities(traj.final_conductivities());
    let residual = discrete_stationary_residual(&last, &cfg.params)?.into_iter().fold(0.0, f64::max);
    let result = json!({
        "steps": sched.steps,
        "final_time": traj.times.last(),
        "initial_energy": traj.energies.first(),
        "final_energy": discrete_energy(&last, &cfg.params)?,
        "final_conductivities": traj.final_conductivities(),
        "max_stationary_residual": residual,
    });
    let artifacts = vec![Artifact::text("trajectory.csv", graph_trajectory_csv(&traj)), Artifact::json("final_graph.json", &last)?];
    Ok((result, artifacts))
}

fn problem(cfg: &ExperimentConfig) -> Result<PoissonProblem, CliError> {
    let mesh = cfg.mesh()?;
    let source = cfg.source.clone().unwrap_or_default().build(&mesh)?;
    Ok(PoissonProblem::new(mesh, source)?)
}

fn flow_summary<S>(run: &FlowRun<S>, tol: f64) -> Value {
    let first = run.log.first().expect("log has the initial record");
    let last = run.log.last().expect("log has the initial record");
    let monotone = run.log.windows(2).all(|w| w[1].energy <= w[0].energy + tol * w[0].energy.abs().max(1.0));
    json!({
        "steps": last.step,
        "final_time": last.t,
        "initial_energy": first.energy,
        "final_energy": last.energy,
        "final_max_residual": last.max_residual,
        "rejections": run.rejections,
        "snapshots": run.snapshots.len(),
        "energy_nonincreasing": monotone,
    })
}

fn snapshot_name(step: usize, ext: &str) -> String {
    format!("snapshots/step_{step:06}.{ext}")
}

fn snapshot_fields(problem: &PoissonProblem, perm: &PermeabilityField, r: f64) -> Result<String, CliError> {
    let p = problem.solve(perm, r)?;
    Ok(pressure_vtk(&p, Some(perm)))
}

fn final_fields(p: &PressureField, perm: &PermeabilityField) -> Vec<Artifact> {
    vec![Artifact::text("pressure.vtk", pressure_vtk(p, Some(perm))), Artifact::text("slice.csv", slice_csv(p))]
}

fn particle_flow(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let problem = problem(cfg)?;
    let sched = cfg.schedule();
    let Some(InitialConfig::Particles(spec)) = &cfg.initial else {
        return Err(CliError::Config(vec!["particle flows need a particle initial descriptor".into()]));
    };
    let mu = sample_initial(spec, &problem.mesh, cfg.seed.unwrap_or(0))?;
    let params = cfg.params;
    let (run, snapshots): (FlowRun<ParticleEnsemble>, Vec<(usize, ParticleEnsemble)>) = match cfg.model {
        ModelKind::FisherRao => {
            let run = fr_run(mu, &params, &problem, &sched)?;
            let snaps = run.snapshots.iter().map(|s| (s.step, s.state.clone())).collect();
            (run, snaps)
        }
        model => {
            let run = if model == ModelKind::Full {
                run_flow(&FullFlow { params, problem: problem.clone() }, ParticleState::new(mu), &sched)?
            } else {
                run_flow(&ReducedFlow { params, problem: problem.clone() }, ParticleState::new(mu), &sched)?
            };
            let snaps = run.snapshots.iter().map(|s| (s.step, s.state.ensemble.clone())).collect();
            let run = FlowRun {
                final_state: run.final_state.ensemble,
                final_pressure: run.final_pressure,
                snapshots: Vec::new(),
                log: run.log,
                rejections: run.rejections,
            };
            (run, snaps)
        }
    };
    let mut artifacts = vec![Artifact::text("energy.csv", energy_csv(&run.log))];
    for (step, ens) in &snapshots {
        artifacts.push(Artifact::text(snapshot_name(*step, "jsonl"), ens.to_jsonl()));
        artifacts.push(Artifact::text(snapshot_name(*step, "vtk"), snapshot_fields(&problem, &deposit_permeability(ens)?, params.r)?));
    }
    artifacts.push(Artifact::text("final_ensemble.jsonl", run.final_state.to_jsonl()));
    artifacts.extend(final_fields(&run.final_pressure, &deposit_permeability(&run.final_state)?));
    let mut result = flow_summary(&run, sched.dissipation_tol);
    result["snapshots"] = json!(snapshots.len());
    result["total_weight"] = json!(run.final_state.total_weight());
    Ok((result, artifacts))
}

fn monokinetic(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let problem = problem(cfg)?;
    let sched = cfg.schedule();
    let Some(InitialConfig::Monokinetic(init)) = &cfg.initial else {
        return Err(CliError::Config(vec!["monokinetic model needs an initial tensor".into()]));
    };
    let state = MonokineticState::uniform(&problem.mesh, init.c0.clone())?;
    let run = run_flow(&MonokineticFlow { params: cfg.params, problem: problem.clone() }, state, &sched)?;
    let mut artifacts = vec![Artifact::text("energy.csv", energy_csv(&run.log))];
    for s in &run.snapshots {
        artifacts.push(Artifact::json(snapshot_name(s.step, "json"), &json!({ "rho": s.state.rho, "chat": s.state.chat }))?);
        artifacts.push(Artifact::text(snapshot_name(s.step, "vtk"), snapshot_fields(&problem, &s.state.permeability(), cfg.params.r)?));
    }
    artifacts.extend(final_fields(&run.final_pressure, &run.final_state.permeability()));
    let mut result = flow_summary(&run, sched.dissipation_tol);
    result["mass"] = json!(run.final_state.mass());
    Ok((result, artifacts))
}

fn scalar_jsonl(mu: &ScalarEnsemble) -> Result<String, CliError> {
    let mut out = String::new();
    for a in &mu.atoms {
        out.push_str(&serde_json::to_string(a).map_err(mesoflow::Error::from)?);
        out.push('\n');
    }
    Ok(out)
}

fn scalar_flow(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let problem = problem(cfg)?;
    let sched = cfg.schedule();
    let Some(InitialConfig::Scalar(init)) = &cfg.initial else {
        return Err(CliError::Config(vec!["scalar model needs an initial descriptor".into()]));
    };
    let mu = ScalarEnsemble::sample(&problem.mesh, init.n, init.scale, cfg.seed.unwrap_or(0))?;
    let run = run_flow(&ScalarFlow { params: cfg.params, problem: problem.clone() }, mu, &sched)?;
    let mut artifacts = vec![Artifact::text("energy.csv", energy_csv(&run.log))];
    for s in &run.snapshots {
        artifacts.push(Artifact::text(snapshot_name(s.step, "jsonl"), scalar_jsonl(&s.state)?));
        artifacts.push(Artifact::text(
            snapshot_name(s.step, "vtk"),
            snapshot_fields(&problem, &deposit_permeability_scalar(&s.state)?, cfg.params.r)?,
        ));
    }
    artifacts.push(Artifact::text("final_ensemble.jsonl", scalar_jsonl(&run.final_state)?));
    artifacts.extend(final_fields(&run.final_pressure, &deposit_permeability_scalar(&run.final_state)?));
    Ok((flow_summary(&run, sched.dissipation_tol), artifacts))
}

fn stationary(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let mesh = cfg.mesh()?;
    let s = cfg.source.clone().unwrap_or_default().build(&mesh)?;
    let params = &cfg.params;
    let mut artifacts = Vec::new();
    let (p, report): (PressureField, StationaryReport) = match cfg.model {
        ModelKind::StationaryPlap => {
            let rho = cfg.density.clone().unwrap_or_default().build(&mesh);
            plap_minimize(&mesh, &rho, &s, params)?
        }
        ModelKind::StationaryGamma1 => {
            let rho = cfg.density.clone().unwrap_or_default().build(&mesh);
            let (p, m, report) = constrained_minimize_gamma1(&mesh, &rho, &s, params)?;
            artifacts.push(Artifact::json("multiplier.json", &m)?);
            (p, report)
        }
        ModelKind::StationaryScalar => {
            let density = cfg.angular.clone().unwrap_or_default().build(&mesh);
            scalar_stationary_minimize(&mesh, &density, &s, params)?
        }
        ModelKind::StationaryFr => {
            let spec = cfg.spec.as_ref().ok_or_else(|| CliError::Config(vec!["stationary-fr needs a spec".into()]))?;
            let (p, report) = fr_functional_minimize(&mesh, spec, &s, params)?;
            let mu = fr_stationary_measure(spec, &p, params)?;
            artifacts.push(Artifact::text("stationary_measure.jsonl", mu.to_jsonl()));
            (p, report)
        }
        _ => unreachable!("not a stationary model"),
    };
    artifacts.push(Artifact::text("pressure.vtk", pressure_vtk(&p, None)));
    artifacts.push(Artifact::text("slice.csv", slice_csv(&p)));
    artifacts.push(Artifact::json("report.json", &report)?);
    let result = json!({
        "report": report,
        "max_gradient_norm": p.max_gradient_norm(),
        "dirichlet_energy": p.dirichlet_energy(),
        "source_work": p.source_work(&s),
    });
    Ok((result, artifacts))
}

fn semidiscrete(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let Some(GraphConfig::Metric(g)) = &cfg.graph else {
        return Err(CliError::Config(vec!["semidiscrete model needs a metric graph".into()]));
    };
    let sol = solve_pressure(g, &cfg.params)?;
    let transmission = transmission_residual(g, &cfg.params, &sol).into_iter().fold(0.0, f64::max);
    let consistency = consistency_check(g, &cfg.params).ok().map(|r| {
        json!({
            "max_affine_deviation": r.max_affine_deviation,
            "kirchhoff_residual": r.kirchhoff_residual,
            "stationary_residual": r.stationary_residual,
        })
    });
    let mut artifacts = vec![Artifact::json("solution.json", &sol)?];
    let mut nodes = String::from("node,p\n");
    for (i, p) in sol.nodes.iter().enumerate() {
        nodes.push_str(&format!("{i},{}\n", mesoflow::io::fmt_f64(*p)));
    }
    artifacts.push(Artifact::text("nodes.csv", nodes));
    for k in 0..g.edges.len() {
        artifacts.push(Artifact::text(format!("edges/edge_{k:04}.csv"), sol.edge_csv(g, k)));
    }
    let result = json!({
        "node_pressures": sol.nodes,
        "iterations": sol.iterations,
        "residual": sol.residual,
        "max_transmission_residual": transmission,
        "consistency": consistency,
    });
    Ok((result, artifacts))
}
