use nalgebra::DMatrix;
use rand::Rng as _;
use replica_flow::flow::{flow_apply, layer_apply, DefectWindow, FlowDirection, FlowModel, FlowSpec, NetKind, PatchSpec};
use replica_flow::lattice::{ActionParams, FieldConfig, Lattice, ReplicaGeometry};
use replica_flow::rng::rng_from_seed;
use replica_flow::train::{nf_loss_and_grad, NfSample};

fn random_field(g: &ReplicaGeometry, seed: u64) -> FieldConfig {
    let mut rng = rng_from_seed(seed);
    FieldConfig::from_values(g, (0..g.n_sites()).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn random_model(spec: FlowSpec, g: &ReplicaGeometry, seed: u64, scale: f64) -> FlowModel {
    let mut m = FlowModel::new(spec, g, seed).unwrap();
    let mut rng = rng_from_seed(seed ^ 0xabcdef);
    let p: Vec<f64> = (0..m.n_params()).map(|_| rng.random_range(-scale..scale)).collect();
    m.set_params(&p).unwrap();
    m
}

fn setup(t: usize, l: usize, cut: usize, patch: (usize, usize)) -> (ReplicaGeometry, Lattice, DefectWindow) {
    let g = ReplicaGeometry::new_2d(t, l, 2, cut).unwrap();
    let lat = Lattice::new(&g).unwrap();
    let w = DefectWindow::new(&lat, PatchSpec::new(patch.0, patch.1).unwrap()).unwrap();
    (g, lat, w)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn five_block_round_trip() {
    let (g, _, w) = setup(16, 8, 3, (4, 5));
    for net in [NetKind::fcnn(), NetKind::Dense { hidden: vec![6] }, NetKind::cnn()] {
        let spec = FlowSpec { patch: w.patch(), net, n_blocks: 5 };
        // Weights of the init scale; much larger ones make e^{|s|} amplify
        // rounding beyond the tolerance.
        let m = random_model(spec, &g, 11, 0.2);
        let phi = random_field(&g, 2);
        let (fwd, lj) = flow_apply(&m, &w, &phi, FlowDirection::Forward).unwrap();
        let (back, lj_inv) = flow_apply(&m, &w, &fwd, FlowDirection::Inverse).unwrap();
        let mx = fwd.values().iter().fold(0.0f64, |a, b| a.max(b.abs()));
        assert!(max_abs_diff(back.values(), phi.values()) <= 1e-8, "{} max {mx}", max_abs_diff(back.values(), phi.values()));
        assert!((lj + lj_inv).abs() <= 1e-8);
        assert!(max_abs_diff(fwd.values(), phi.values()) > 1e-3);
    }
}

#[test]
fn log_jacobian_matches_finite_differences() {
    let (g, _, w) = setup(8, 6, 2, (2, 3));
    let spec = FlowSpec { patch: w.patch(), net: NetKind::Dense { hidden: vec![5] }, n_blocks: 3 };
    let m = random_model(spec, &g, 5, 0.5);
    let phi = random_field(&g, 8);
    let (_, lj) = flow_apply(&m, &w, &phi, FlowDirection::Forward).unwrap();
    let v0 = w.gather(phi.values());
    let n = w.n_patch();
    let h = 1e-5;
    let mut jac = DMatrix::zeros(n, n);
    for col in 0..n {
        let mut plus = v0.clone();
        let mut minus = v0.clone();
        plus[col] += h;
        minus[col] -= h;
        let (mut fp, mut fm) = (phi.clone(), phi.clone());
        w.scatter(&plus, fp.values_mut());
        w.scatter(&minus, fm.values_mut());
        let (op, _) = flow_apply(&m, &w, &fp, FlowDirection::Forward).unwrap();
        let (om, _) = flow_apply(&m, &w, &fm, FlowDirection::Forward).unwrap();
        let (gp, gm) = (w.gather(op.values()), w.gather(om.values()));
        for row in 0..n {
            jac[(row, col)] = (gp[row] - gm[row]) / (2.0 * h);
        }
    }
    let det = jac.determinant();
    assert!(det > 0.0);
    assert!((det.ln() - lj).abs() <= 1e-4, "ln det {} vs logJ {lj}", det.ln());
    assert!(lj.abs() > 0.1);
}

#[test]
fn odd_flows_are_z2_equivariant() {
    let (g, _, w) = setup(16, 8, 3, (4, 5));
    for net in [NetKind::Dense { hidden: vec![7, 4] }, NetKind::cnn()] {
        let spec = FlowSpec { patch: w.patch(), net, n_blocks: 3 };
        let m = random_model(spec, &g, 21, 0.5);
        let phi = random_field(&g, 3);
        let (a, lja) = flow_apply(&m, &w, &phi, FlowDirection::Forward).unwrap();
        let (b, ljb) = flow_apply(&m, &w, &phi.negated(), FlowDirection::Forward).unwrap();
        let neg = a.negated();
        assert!(max_abs_diff(b.values(), neg.values()) <= 1e-12);
        assert!((lja - ljb).abs() <= 1e-12);
    }
}

#[test]
fn environment_is_bit_identical() {
    let (g, _, w) = setup(16, 8, 0, (4, 5));
    let spec = FlowSpec { patch: w.patch(), net: NetKind::Dense { hidden: vec![4] }, n_blocks: 2 };
    let m = random_model(spec, &g, 4, 0.5);
    let phi = random_field(&g, 9);
    let patch: std::collections::HashSet<usize> = {
        let mut marker = FieldConfig::zeros(&g);
        let ones = vec![1.0; w.len()];
        w.scatter(&ones, marker.values_mut());
        (0..g.n_sites()).filter(|&i| marker.values()[i] == 1.0).collect()
    };
    let (out, _) = flow_apply(&m, &w, &phi, FlowDirection::Forward).unwrap();
    for i in 0..g.n_sites() {
        if !patch.contains(&i) {
            assert_eq!(out.values()[i].to_bits(), phi.values()[i].to_bits());
        }
    }
    // A single layer also leaves the frozen replica untouched.
    for k in 0..m.layers().len() {
        let replica = m.layers()[k].replica;
        let (out, _) = layer_apply(&m, k, &w, &phi, FlowDirection::Forward).unwrap();
        for i in 0..g.n_sites() {
            if g.coords(i).0 != replica {
                assert_eq!(out.values()[i].to_bits(), phi.values()[i].to_bits());
            }
        }
    }
}

#[test]
fn zero_nets_are_the_identity() {
    let (g, _, w) = setup(16, 8, 3, (4, 5));
    let m = FlowModel::new(FlowSpec { patch: w.patch(), net: NetKind::cnn(), n_blocks: 2 }, &g, 1).unwrap();
    let phi = random_field(&g, 4);
    let (out, lj) = flow_apply(&m, &w, &phi, FlowDirection::Forward).unwrap();
    assert_eq!(out, phi);
    assert_eq!(lj, 0.0);
}

#[test]
fn nf_parameter_gradients_match_finite_differences() {
    let (g, lat, w) = setup(8, 6, 2, (2, 3));
    let params = ActionParams::new(0.27, 0.03).unwrap();
    for net in [NetKind::Dense { hidden: vec![4] }, NetKind::Conv { hidden: vec![2] }] {
        let spec = FlowSpec { patch: w.patch(), net, n_blocks: 2 };
        let mut m = random_model(spec, &g, 31, 0.3);
        let batch: Vec<NfSample> = (0..3).map(|s| NfSample::new(&w, &lat, &params, &random_field(&g, 40 + s))).collect();
        let lg = nf_loss_and_grad(&m, &w, &params, &batch).unwrap();
        let p0 = m.params();
        let h = 1e-6;
        for k in 0..p0.len() {
            let mut p = p0.clone();
            p[k] = p0[k] + h;
            m.set_params(&p).unwrap();
            let lp = nf_loss_and_grad(&m, &w, &params, &batch).unwrap().loss;
            p[k] = p0[k] - h;
            m.set_params(&p).unwrap();
            let lm = nf_loss_and_grad(&m, &w, &params, &batch).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (lg.grad[k] - fd).abs() / fd.abs().max(1e-3);
            assert!(rel <= 1e-5, "param {k}: analytic {} fd {fd}", lg.grad[k]);
        }
        m.set_params(&p0).unwrap();
    }
}
