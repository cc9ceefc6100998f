//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance -- 1 4 9` runs a subset. Set
//! `RFLOW_ACCEPTANCE_CACHE=<dir>` to keep trained checkpoints between runs of
//! the critical-point criteria (6 to 8); each cached file embeds the training
//! settings in its name.

use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use replica_flow::estimators::{c_function, ess, gamma_analysis, log_ratio, Abscissa, RatioEstimate, GAMMA_S};
use replica_flow::flow::{flow_apply, layer_apply, nf_weight, DefectWindow, FlowDirection, FlowModel, FlowSpec, NetKind, PatchSpec};
use replica_flow::heatbath::PriorPlan;
use replica_flow::lattice::{ActionParams, BoundaryConvention, FieldConfig, Lattice, ReplicaGeometry};
use replica_flow::oracle::{fit_c_function, fit_central_charge, gaussian_log_ratio, quadrature_log_ratio};
use replica_flow::pipeline::{evaluate_many, train_model, transfer_to, Sampler, TrainData};
use replica_flow::protocol::{evolve_forward, Direction, ProtocolSchedule, WorkRecord};
use replica_flow::rng::rng_from_seed;
use replica_flow::snf::{nf_evolve, snf_evolve, SnfModel};
use replica_flow::train::{nf_loss_and_grad, snf_loss_and_grad, AdamHyper, Checkpoint, NfSample, TrainConfig, TrainModel};

type Outcome = Result<(bool, String), String>;

const KAPPA_C: f64 = 0.2758297;
const LAMBDA_C: f64 = 0.03;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn plan(thermalization: u64, stride: u64) -> PriorPlan {
    PriorPlan { thermalization, stride, samples: 0, hot_start: false }
}

fn train_config(steps: u64, seed: u64) -> TrainConfig {
    TrainConfig { steps, batch: 100, adam: AdamHyper::default(), era: 100, seed, blockwise: false }
}

/// Runs every sampler over the same `count` prior samples.
fn evaluate(samplers: &[Sampler], g: &ReplicaGeometry, p: &ActionParams, pl: PriorPlan, count: u64, seed: u64) -> Result<Vec<RatioEstimate>, String> {
    let mut works: Vec<Vec<WorkRecord>> = vec![Vec::with_capacity(count as usize); samplers.len()];
    evaluate_many(samplers, g, p, pl, count, 1000, seed, |k, r| {
        works[k].extend_from_slice(r);
        Ok(())
    })
    .map_err(err)?;
    works.iter().map(|w| log_ratio(w).map_err(err)).collect()
}

fn fmt_est(r: &RatioEstimate) -> String {
    format!("{:.5}({:.5}) ESS {:.3}({:.3})", r.ln_ratio, r.sigma, r.ess, r.ess_sigma)
}

fn random_field(g: &ReplicaGeometry, seed: u64, amp: f64) -> FieldConfig {
    let mut rng = rng_from_seed(seed);
    FieldConfig::from_values(g, (0..g.n_sites()).map(|_| rng.random_range(-amp..amp)).collect()).unwrap()
}

fn random_model(spec: FlowSpec, g: &ReplicaGeometry, seed: u64, scale: f64) -> FlowModel {
    let mut m = FlowModel::new(spec, g, seed).unwrap();
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let p: Vec<f64> = (0..m.n_params()).map(|_| rng.random_range(-scale..scale)).collect();
    m.set_params(&p).unwrap();
    m
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn free_field_geometry(t: usize) -> (ReplicaGeometry, ActionParams) {
    (ReplicaGeometry::new_2d(t, 8, 2, 2).unwrap(), ActionParams::new(0.2, 0.0).unwrap())
}

fn free_field_suite() -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for t in [16, 32] {
        let (g, p) = free_field_geometry(t);
        let exact = gaussian_log_ratio(&g, &g.with_cut(3).map_err(err)?, p.kappa).map_err(err)?;
        let nf_spec = FlowSpec { patch: PatchSpec::new(4, 5).map_err(err)?, net: NetKind::fcnn(), n_blocks: 4 };
        let untrained = FlowModel::new(nf_spec.clone(), &g, 1).map_err(err)?;
        let chain = |seed| TrainData::Chain { geometry: &g, params: p, plan: plan(2000, 5), seed };
        let nf = train_model(TrainModel::Nf(untrained.clone()), chain(11), &train_config(2000, 12)).map_err(err)?;
        let snf_spec = FlowSpec { patch: PatchSpec::new(2, 3).map_err(err)?, net: NetKind::fcnn(), n_blocks: 2 };
        let snf0 = SnfModel::new(FlowModel::new(snf_spec, &g, 2).map_err(err)?, ProtocolSchedule::linear(2));
        let snf = train_model(TrainModel::Snf(snf0), chain(13), &train_config(1000, 14)).map_err(err)?;
        let samplers = [
            Sampler::Nemc { schedule: ProtocolSchedule::linear(100), direction: Direction::Forward },
            Sampler::Nf(untrained),
            Sampler::from_model(nf.checkpoint.model),
            Sampler::from_model(snf.checkpoint.model),
        ];
        let ests = evaluate(&samplers, &g, &p, plan(2000, 10), 10_000, 16 + t as u64).map_err(err)?;
        let mut parts = Vec::new();
        for (name, e) in ["nemc100", "nf0", "nf", "snf2"].iter().zip(&ests) {
            let pull = e.pull(exact, 0.0);
            pass &= pull.abs() <= 3.0;
            parts.push(format!("{name} {:.5}({:.5}) ESS {:.3} pull {pull:+.2}", e.ln_ratio, e.sigma, e.ess));
        }
        lines.push(format!("{t}x8 exact {exact:.5}: {}", parts.join(", ")));
    }
    Ok((pass, lines.join("; ")))
}

fn dual_oracle() -> Outcome {
    let g = ReplicaGeometry::new_2d(2, 2, 2, 1).map_err(err)?;
    let free = ActionParams::new(0.2, 0.0).map_err(err)?;
    let quad = quadrature_log_ratio(&g, &free, 32, 1e-8).map_err(err)?;
    let det = gaussian_log_ratio(&g, &g.with_cut(2).map_err(err)?, 0.2).map_err(err)?;
    let d_free = (quad.value - det).abs();

    let fixture = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/golden.txt")).map_err(err)?;
    let golden: f64 = fixture
        .lines()
        .map(|l| l.split('#').next().unwrap().trim())
        .find_map(|l| l.strip_prefix("quadrature_t2_l2_n2_cut1_kappa0.25_lambda0.03 = "))
        .ok_or("golden value missing")?
        .parse()
        .map_err(err)?;
    let inter = ActionParams::new(0.25, LAMBDA_C).map_err(err)?;
    let q = quadrature_log_ratio(&g, &inter, 32, 1e-5).map_err(err)?;
    let d_golden = (q.value - golden).abs();
    let pass = d_free <= 1e-5 && q.refinement_change() <= 1e-5 && d_golden <= 1e-5;
    Ok((
        pass,
        format!(
            "free |quad - det| = {d_free:.2e}; interacting {:.14} (golden {golden}), refinement change {:.2e} at {} nodes, |fresh - golden| = {d_golden:.2e}",
            q.value,
            q.refinement_change(),
            q.nodes
        ),
    ))
}

fn degeneration() -> Outcome {
    let g = ReplicaGeometry::new_2d(16, 8, 2, 3).map_err(err)?;
    let lat = Lattice::new(&g).map_err(err)?;
    let p = ActionParams::new(KAPPA_C, LAMBDA_C).map_err(err)?;
    let (mut checked, mut mismatches) = (0, 0);
    for (patch, net) in [((2, 3), NetKind::fcnn()), ((4, 5), NetKind::cnn())] {
        let w = DefectWindow::new(&lat, PatchSpec::new(patch.0, patch.1).map_err(err)?).map_err(err)?;
        for n_step in [1, 2, 5] {
            let spec = FlowSpec { patch: w.patch(), net: net.clone(), n_blocks: n_step };
            let model = SnfModel::new(FlowModel::new(spec, &g, 3).map_err(err)?, ProtocolSchedule::linear(n_step));
            for s in 0..8 {
                let f = random_field(&g, s, 1.5);
                let (a, ra) = snf_evolve(&model, &w, &lat, &p, f.clone(), 100 + s).map_err(err)?;
                let (b, rb) = evolve_forward(&lat, &p, &ProtocolSchedule::linear(n_step), f, 100 + s).map_err(err)?;
                checked += 1;
                if ra.work.to_bits() != rb.work.to_bits() || ra.heat.to_bits() != rb.heat.to_bits() || a != b {
                    mismatches += 1;
                }
            }
        }
        let spec = FlowSpec { patch: w.patch(), net: net.clone(), n_blocks: 3 };
        let flow = random_model(spec, &g, 9, 0.3);
        let model = SnfModel::new(flow.clone(), ProtocolSchedule::instantaneous());
        for s in 0..8 {
            let f = random_field(&g, 50 + s, 1.5);
            let (a, ra) = snf_evolve(&model, &w, &lat, &p, f.clone(), 7).map_err(err)?;
            let (b, log_w) = nf_weight(&flow, &w, &lat, &p, &f).map_err(err)?;
            let (_, rn) = nf_evolve(&flow, &w, &lat, &p, f, 7).map_err(err)?;
            checked += 1;
            if (-ra.work).to_bits() != log_w.to_bits() || ra.work.to_bits() != rn.work.to_bits() || a != b {
                mismatches += 1;
            }
        }
    }
    Ok((mismatches == 0, format!("{checked} evolutions compared bitwise, {mismatches} mismatches")))
}

fn flow_suite() -> Outcome {
    let g = ReplicaGeometry::new_2d(16, 8, 2, 3).map_err(err)?;
    let lat = Lattice::new(&g).map_err(err)?;
    let w = DefectWindow::new(&lat, PatchSpec::new(4, 5).map_err(err)?).map_err(err)?;

    let mut round_trip = 0.0f64;
    let mut z2 = 0.0f64;
    let mut env_bits_changed = 0usize;
    let patch_sites: std::collections::HashSet<usize> = {
        let mut marker = FieldConfig::zeros(&g);
        w.scatter(&vec![1.0; w.len()], marker.values_mut());
        (0..g.n_sites()).filter(|&i| marker.values()[i] == 1.0).collect()
    };
    for (k, net) in [NetKind::fcnn(), NetKind::Dense { hidden: vec![6] }, NetKind::cnn()].into_iter().enumerate() {
        let m = random_model(FlowSpec { patch: w.patch(), net, n_blocks: 5 }, &g, 11 + k as u64, 0.2);
        let phi = random_field(&g, 2 + k as u64, 1.5);
        let (fwd, lj) = flow_apply(&m, &w, &phi, FlowDirection::Forward).map_err(err)?;
        let (back, lj_inv) = flow_apply(&m, &w, &fwd, FlowDirection::Inverse).map_err(err)?;
        round_trip = round_trip.max(max_abs_diff(back.values(), phi.values())).max((lj + lj_inv).abs());
        let (neg, lj_neg) = flow_apply(&m, &w, &phi.negated(), FlowDirection::Forward).map_err(err)?;
        z2 = z2.max(max_abs_diff(neg.values(), fwd.negated().values())).max((lj - lj_neg).abs());
        env_bits_changed += (0..g.n_sites())
            .filter(|i| !patch_sites.contains(i) && fwd.values()[*i].to_bits() != phi.values()[*i].to_bits())
            .count();
        for layer in 0..m.layers().len() {
            let replica = m.layers()[layer].replica;
            let (out, _) = layer_apply(&m, layer, &w, &phi, FlowDirection::Forward).map_err(err)?;
            env_bits_changed += (0..g.n_sites())
                .filter(|&i| g.coords(i).0 != replica && out.values()[i].to_bits() != phi.values()[i].to_bits())
                .count();
        }
    }

    // ln det of the central-difference Jacobian on a 2x3 patch.
    let gs = ReplicaGeometry::new_2d(8, 6, 2, 2).map_err(err)?;
    let lats = Lattice::new(&gs).map_err(err)?;
    let ws = DefectWindow::new(&lats, PatchSpec::new(2, 3).map_err(err)?).map_err(err)?;
    let m = random_model(FlowSpec { patch: ws.patch(), net: NetKind::Dense { hidden: vec![5] }, n_blocks: 3 }, &gs, 5, 0.5);
    let phi = random_field(&gs, 8, 1.5);
    let (_, lj) = flow_apply(&m, &ws, &phi, FlowDirection::Forward).map_err(err)?;
    let v0 = ws.gather(phi.values());
    let n = ws.n_patch();
    let h = 1e-5;
    let mut jac = DMatrix::zeros(n, n);
    for col in 0..n {
        let mut out = [0.0, 0.0].map(|_| Vec::new());
        for (sign, slot) in [(1.0, 0), (-1.0, 1)] {
            let mut v = v0.clone();
            v[col] += sign * h;
            let mut f = phi.clone();
            ws.scatter(&v, f.values_mut());
            out[slot] = ws.gather(flow_apply(&m, &ws, &f, FlowDirection::Forward).map_err(err)?.0.values());
        }
        for row in 0..n {
            jac[(row, col)] = (out[0][row] - out[1][row]) / (2.0 * h);
        }
    }
    let logj_err = (jac.determinant().ln() - lj).abs();

    // Every parameter gradient of the NF and SNF losses against central differences.
    let params = ActionParams::new(0.27, LAMBDA_C).map_err(err)?;
    let mut grad_rel = 0.0f64;
    let mut n_grads = 0;
    for net in [NetKind::Dense { hidden: vec![4] }, NetKind::Conv { hidden: vec![2] }] {
        let mut m = random_model(FlowSpec { patch: ws.patch(), net, n_blocks: 2 }, &gs, 31, 0.3);
        let batch: Vec<NfSample> =
            (0..3).map(|s| NfSample::new(&ws, &lats, &params, &random_field(&gs, 40 + s, 1.5))).collect();
        let analytic = nf_loss_and_grad(&m, &ws, &params, &batch).map_err(err)?.grad;
        let p0 = m.params();
        for k in 0..p0.len() {
            let mut loss = [0.0; 2];
            for (i, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut q = p0.clone();
                q[k] += sign * 1e-6;
                m.set_params(&q).map_err(err)?;
                loss[i] = nf_loss_and_grad(&m, &ws, &params, &batch).map_err(err)?.loss;
            }
            let fd = (loss[0] - loss[1]) / 2e-6;
            grad_rel = grad_rel.max((analytic[k] - fd).abs() / fd.abs().max(1e-3));
            n_grads += 1;
        }
    }
    // Instantaneous SNF: replayed-noise differences are exact here.
    let flow = random_model(FlowSpec { patch: ws.patch(), net: NetKind::Conv { hidden: vec![2] }, n_blocks: 3 }, &gs, 5, 0.3);
    let mut snf = SnfModel::new(flow, ProtocolSchedule::instantaneous());
    let fields: Vec<FieldConfig> = (0..3).map(|s| random_field(&gs, 50 + s, 1.0)).collect();
    let seeds = [11, 12, 13];
    let analytic = snf_loss_and_grad(&snf, &ws, &lats, &params, fields.clone(), &seeds).map_err(err)?.grad;
    let p0 = snf.flow.params();
    for k in 0..p0.len() {
        let mut loss = [0.0; 2];
        for (i, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut q = p0.clone();
            q[k] += sign * 1e-6;
            snf.flow.set_params(&q).map_err(err)?;
            loss[i] = snf_loss_and_grad(&snf, &ws, &lats, &params, fields.clone(), &seeds).map_err(err)?.loss;
        }
        let fd = (loss[0] - loss[1]) / 2e-6;
        grad_rel = grad_rel.max((analytic[k] - fd).abs() / fd.abs().max(1e-3));
        n_grads += 1;
    }

    let pass = round_trip <= 1e-8 && logj_err <= 1e-4 && z2 <= 1e-12 && env_bits_changed == 0 && grad_rel <= 1e-5;
    Ok((
        pass,
        format!(
            "round trip {round_trip:.1e}, |ln det J - logJ| {logj_err:.1e}, Z2 {z2:.1e}, environment bits changed {env_bits_changed}, max gradient rel. error {grad_rel:.1e} over {n_grads} parameters"
        ),
    ))
}

fn ess_units() -> Outcome {
    let e = ess(&[0.0, 3f64.ln()]).map_err(err)?;
    let w = [0.1, 2.0, -1.3, 0.7, 5.5];
    let shifted: Vec<f64> = w.iter().map(|x| x + 123.4).collect();
    let shift = (ess(&w).map_err(err)? - ess(&shifted).map_err(err)?).abs();
    let mut pass = (e - 0.8).abs() <= 1e-15 && shift <= 1e-12;
    let mut parts = vec![format!("ess(0, ln 3) = {e:.17}, shift change {shift:.1e}")];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for rho in [0.5f64, 0.8] {
        let mut x = 0.0;
        let series: Vec<f64> = (0..200_000)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x = rho * x + (1.0 - rho * rho).sqrt() * z;
                x
            })
            .collect();
        let tau = gamma_analysis(&series, GAMMA_S).map_err(err)?.tau;
        let exact = (1.0 + rho) / (2.0 * (1.0 - rho));
        pass &= ((tau - exact) / exact).abs() <= 0.15;
        parts.push(format!("AR(1) rho {rho}: tau {tau:.3} vs {exact:.3}"));
    }
    Ok((pass, parts.join(", ")))
}

/// Criterion 9: n_step independence and forward/reverse consistency.
fn protocol_invariance() -> Outcome {
    let (g, p) = free_field_geometry(16);
    let fwd = |n| Sampler::Nemc { schedule: ProtocolSchedule::linear(n), direction: Direction::Forward };
    let f = evaluate(&[fwd(10), fwd(100)], &g, &p, plan(2000, 10), 10_000, 91)?;
    let rev = Sampler::Nemc { schedule: ProtocolSchedule::linear(100), direction: Direction::Reverse };
    let r = evaluate(&[rev], &g, &p, plan(2000, 10), 10_000, 92)?.remove(0);
    let z_steps = f[0].pull(f[1].ln_ratio, f[1].sigma);
    let sum = f[1].ln_ratio + r.ln_ratio;
    let z_sum = sum / f[1].sigma.hypot(r.sigma);
    Ok((
        z_steps.abs() <= 3.0 && z_sum.abs() <= 3.0,
        format!(
            "n_step 10 {} vs 100 {} ({z_steps:+.2} sigma); forward + reverse = {sum:+.5} ({z_sum:+.2} sigma)",
            fmt_est(&f[0]),
            fmt_est(&f[1])
        ),
    ))
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, method) in [("nf", &["--method.kind=nf"][..]), ("snf", &["--method.kind=snf", "--method.blocks=2"][..]), ("nemc", &["--method.kind=nemc"][..])] {
        let d = dir.path().join(name);
        let base = [
            "--geometry.extent_t=16",
            "--geometry.extent_l=8",
            "--geometry.cut=2",
            "--prior.thermalization=200",
            "--prior.stride=5",
            "--prior.samples=500",
            "--train.steps=200",
            "--train.batch=20",
            "--train.era=20",
            "--sample.count=2000",
            "--sample.chunk=300",
            "--method.patch=[2,3]",
        ];
        let run = |extra: &[&str], cmd: &str| -> Result<(), String> {
            let out = Command::new(env!("CARGO_BIN_EXE_rflow"))
                .args(extra)
                .arg(cmd)
                .output()
                .map_err(err)?;
            if !out.status.success() {
                return Err(format!("rflow {cmd}: {}", String::from_utf8_lossy(&out.stderr)));
            }
            Ok(())
        };
        let mut first: Vec<&str> = base.to_vec();
        first.extend_from_slice(method);
        let out_flag = format!("--output.dir={}", d.display());
        first.push(&out_flag);
        let cmds: &[&str] = if name == "nemc" { &["sample"] } else { &["prior", "train", "sample"] };
        for c in cmds {
            run(&first, c)?;
        }
        let files = ["prior.rfpr", "model.rflw", "records.jsonl"];
        let before: Vec<Option<Vec<u8>>> = files.iter().map(|f| std::fs::read(d.join(f)).ok()).collect();
        let resolved = d.join("config.resolved");
        let replay = ["--config", resolved.to_str().unwrap(), "--threads", "1"];
        for c in cmds {
            run(&replay, c)?;
        }
        let mut same = 0;
        for (f, b) in files.iter().zip(&before) {
            if let Some(b) = b {
                let a = std::fs::read(d.join(f)).map_err(err)?;
                if &a == b {
                    same += 1;
                } else {
                    pass = false;
                    parts.push(format!("{name}: {f} differs"));
                }
            }
        }
        parts.push(format!("{name}: {same} artefacts bit-identical"));
    }
    Ok((pass, parts.join(", ")))
}

/// Trained critical-point models and their training-volume estimates,
/// shared by criteria 6 to 8.
struct Critical {
    nf: Checkpoint,
    nf_est: RatioEstimate,
    snf_est: RatioEstimate,
    nemc_est: RatioEstimate,
    train_s: f64,
}

const NF_STEPS: u64 = 100_000;
const SNF_STEPS: u64 = 100_000;
/// Sweeps between training samples of the heatbath chain.
const TRAIN_STRIDE: u64 = 1;
const EVAL: u64 = 100_000;

fn critical_geometry(extent_l: usize, cut: usize) -> ReplicaGeometry {
    ReplicaGeometry::new_2d(4 * extent_l, extent_l, 2, cut).unwrap()
}

fn train_cached(name: &str, model: TrainModel, steps: u64, seed: u64) -> Result<Checkpoint, String> {
    let tag = format!("{name}_s{steps}_stride{TRAIN_STRIDE}_seed{seed}.rflw");
    let cache = std::env::var_os("RFLOW_ACCEPTANCE_CACHE").map(PathBuf::from);
    if let Some(path) = cache.as_ref().map(|c| c.join(&tag)) {
        if let Ok(ck) = Checkpoint::load(&path) {
            eprintln!("  using cached {}", path.display());
            return Ok(ck);
        }
    }
    let g = critical_geometry(16, 1);
    let p = ActionParams::new(KAPPA_C, LAMBDA_C).map_err(err)?;
    let data = TrainData::Chain { geometry: &g, params: p, plan: plan(10_000, TRAIN_STRIDE), seed: seed + 1 };
    let trained = train_model(model, data, &train_config(steps, seed)).map_err(err)?;
    if let Some(m) = trained.metrics.last() {
        eprintln!("  {name}: final era loss {:.4}, ESS {:.3}, {:.0} s", m.mean_loss, m.ess, m.wallclock_s);
    }
    if let Some(dir) = cache {
        std::fs::create_dir_all(&dir).map_err(err)?;
        trained.checkpoint.save(&dir.join(&tag)).map_err(err)?;
    }
    Ok(trained.checkpoint)
}

fn critical() -> Result<Critical, String> {
    let t0 = Instant::now();
    let g = critical_geometry(16, 1);
    let p = ActionParams::new(KAPPA_C, LAMBDA_C).map_err(err)?;
    let nf_spec = FlowSpec { patch: PatchSpec::new(4, 5).map_err(err)?, net: NetKind::fcnn(), n_blocks: 4 };
    let nf = train_cached("nf", TrainModel::Nf(FlowModel::new(nf_spec, &g, 62).map_err(err)?), NF_STEPS, 63)?;
    let snf_spec = FlowSpec { patch: PatchSpec::new(2, 3).map_err(err)?, net: NetKind::fcnn(), n_blocks: 2 };
    let snf0 = SnfModel::new(FlowModel::new(snf_spec, &g, 64).map_err(err)?, ProtocolSchedule::linear(2));
    let snf = train_cached("snf", TrainModel::Snf(snf0), SNF_STEPS, 65)?;
    let train_s = t0.elapsed().as_secs_f64();
    let samplers = [
        Sampler::from_model(nf.model.clone()),
        Sampler::from_model(snf.model),
        Sampler::Nemc { schedule: ProtocolSchedule::linear(2), direction: Direction::Forward },
    ];
    let mut e = evaluate(&samplers, &g, &p, plan(10_000, 10), EVAL, 66)?.into_iter();
    Ok(Critical { nf, nf_est: e.next().unwrap(), snf_est: e.next().unwrap(), nemc_est: e.next().unwrap(), train_s })
}

fn method_ordering(c: &Critical) -> Outcome {
    let z = |a: &RatioEstimate, b: &RatioEstimate| (a.ess - b.ess) / a.ess_sigma.hypot(b.ess_sigma);
    let (z1, z2) = (z(&c.nf_est, &c.snf_est), z(&c.snf_est, &c.nemc_est));
    Ok((
        z1 >= 3.0 && z2 >= 3.0,
        format!(
            "64x16 l=1, {EVAL} samples: NF {}, SNF {}, NEMC {}; NF-SNF {z1:.1} sigma, SNF-NEMC {z2:.1} sigma (training {:.0} s)",
            fmt_est(&c.nf_est),
            fmt_est(&c.snf_est),
            fmt_est(&c.nemc_est),
            c.train_s
        ),
    ))
}

fn transferred_estimate(ck: &Checkpoint, g: &ReplicaGeometry, p: &ActionParams, count: u64, seed: u64) -> Result<RatioEstimate, String> {
    let moved = transfer_to(ck, g, p).map_err(err)?;
    Ok(evaluate(&[Sampler::from_model(moved.model)], g, p, plan(5000, 10), count, seed)?.remove(0))
}

fn clipped(extent_l: usize, cut: usize) -> bool {
    PatchSpec::new(4, 5).unwrap().columns(extent_l, cut).iter().any(Option::is_none)
}

/// Forward estimates at 64x16 for l = 1..14: the training cut comes from the
/// ordering run, the others from transfer.
fn cut_scan(c: &Critical, kappa: f64, count: u64) -> Result<Vec<(usize, RatioEstimate)>, String> {
    let p = ActionParams::new(kappa, LAMBDA_C).map_err(err)?;
    let mut out = Vec::new();
    for l in 1..=14 {
        let est = if l == 1 && kappa == KAPPA_C {
            c.nf_est.clone()
        } else {
            transferred_estimate(&c.nf, &critical_geometry(16, l), &p, count, 700 + l as u64 + (kappa * 1e4) as u64)?
        };
        out.push((l, est));
    }
    Ok(out)
}

fn transfer(c: &Critical, scan: &[(usize, RatioEstimate)]) -> Outcome {
    let p = ActionParams::new(KAPPA_C, LAMBDA_C).map_err(err)?;
    let reference = c.nf_est.ess;
    let within = |e: f64| (0.5..=2.0).contains(&(e / reference));
    let mut pass = true;
    let mut parts = vec![format!("training ESS {reference:.3}")];
    for extent in [32, 48] {
        let e = transferred_estimate(&c.nf, &critical_geometry(extent, 1), &p, 10_000, 800 + extent as u64)?;
        pass &= within(e.ess);
        parts.push(format!("{}x{extent}: {:.3}({:.3})", 4 * extent, e.ess, e.ess_sigma));
    }
    let mut cuts = Vec::new();
    for (l, e) in scan {
        let mark = if clipped(16, *l) {
            " (clipped, not tested)"
        } else {
            pass &= within(e.ess);
            ""
        };
        cuts.push(format!("l={l} {:.3}{mark}", e.ess));
    }
    parts.push(cuts.join(" "));
    Ok((pass, parts.join("; ")))
}

fn physics(scan: &[(usize, RatioEstimate)], massive: &[(usize, RatioEstimate)]) -> Outcome {
    let g = critical_geometry(16, 1);
    let mut parts = Vec::new();
    let mut fits = Vec::new();
    for abscissa in [Abscissa::Midpoint, Abscissa::Left] {
        for convention in [BoundaryConvention::OneEndpoint, BoundaryConvention::TwoEndpoints] {
            let pts = c_function(scan, &g, convention, abscissa).map_err(err)?;
            // The prediction carries the same 1/|∂A| as the data.
            let b = g.boundary_size(convention);
            let xy: Vec<_> = pts.iter().map(|q| (q.l_eff, q.value * b, q.sigma * b)).collect();
            let fit = fit_c_function(&xy, 16, 2).map_err(err)?;
            parts.push(format!(
                "{}/{}: c = {:.3}({:.3}) chi2/dof {:.2}",
                abscissa.tag(),
                convention.tag(),
                fit.central_charge,
                fit.sigma,
                fit.chi2_per_dof
            ));
            if convention == BoundaryConvention::OneEndpoint {
                fits.push((abscissa, fit));
            }
        }
    }
    let (best_abscissa, best) = fits
        .iter()
        .min_by(|a, b| a.1.chi2_per_dof.total_cmp(&b.1.chi2_per_dof))
        .cloned()
        .ok_or("no fits")?;
    let diffs: Vec<_> = scan.iter().map(|(l, e)| (*l, -e.ln_ratio, e.sigma)).collect();
    let exact = fit_central_charge(&diffs, 16, 2).map_err(err)?;
    parts.push(format!("finite-difference fit c = {:.3}({:.3}) chi2/dof {:.2}", exact.central_charge, exact.sigma, exact.chi2_per_dof));
    let mut pass = (best.central_charge - 0.5).abs() <= 0.15;
    parts.push(format!("best: {} c = {:.3}", best_abscissa.tag(), best.central_charge));

    let pts = c_function(massive, &g, BoundaryConvention::OneEndpoint, Abscissa::Midpoint).map_err(err)?;
    let pulls: Vec<f64> = pts.iter().map(|q| q.value / q.sigma).collect();
    let worst = pulls.iter().copied().fold(0.0f64, |a, b| a.max(b.abs()));
    pass &= worst <= 3.0;
    parts.push(format!(
        "kappa 0.21: C2 {} (max |C2|/sigma {worst:.2})",
        pts.iter().map(|q| format!("{:.4}({:.4})", q.value, q.sigma)).collect::<Vec<_>>().join(" ")
    ));
    Ok((pass, parts.join("; ")))
}

fn report(n: u32, name: &str, t: Instant, outcome: Outcome) -> bool {
    let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
    println!(
        "criterion {n:>2} {name}: {} [{:.0} s] {detail}",
        if pass { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64()
    );
    pass
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut all = true;
    type Criterion = (u32, &'static str, fn() -> Outcome);
    let simple: [Criterion; 7] = [
        (1, "free-field oracle", free_field_suite),
        (2, "dual oracle", dual_oracle),
        (3, "degeneration identities", degeneration),
        (4, "flow correctness", flow_suite),
        (5, "ESS and autocorrelation units", ess_units),
        (9, "protocol invariance", protocol_invariance),
        (10, "reproducibility", reproducibility),
    ];
    for (n, name, f) in simple {
        if want(n) {
            all &= report(n, name, Instant::now(), f());
        }
    }
    if want(6) || want(7) || want(8) {
        let t = Instant::now();
        match critical() {
            Err(e) => {
                for (n, name) in [(6, "method ordering"), (7, "transfer"), (8, "central charge")] {
                    if want(n) {
                        all &= report(n, name, t, Err(e.clone()));
                    }
                }
            }
            Ok(c) => {
                if want(6) {
                    all &= report(6, "method ordering", t, method_ordering(&c));
                }
                let t = Instant::now();
                let scan = if want(7) || want(8) { cut_scan(&c, KAPPA_C, 20_000) } else { Ok(Vec::new()) };
                if want(7) {
                    all &= report(7, "transfer", t, scan.clone().and_then(|s| transfer(&c, &s)));
                }
                if want(8) {
                    let t = Instant::now();
                    let outcome = scan.and_then(|s| {
                        let massive = cut_scan(&c, 0.21, 10_000)?;
                        physics(&s, &massive)
                    });
                    all &= report(8, "central charge", t, outcome);
                }
            }
        }
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
