use super::*;
use crate::moments::propagate_sequential;
use crate::oracle::{kalman_filter, rts_smoother};

fn small_lg() -> LgParams {
    let mut p = LgParams::standard(2);
    p.lattice = 20;
    p.n_times = 12;
    p.horizon = 5.0;
    p.offset = DVector::from_vec(vec![0.2, -0.1]);
    p
}

#[test]
fn generators_are_deterministic() {
    let p = small_lg();
    let a = gen_lg(&p, 30, &RandomStream::new(4, 0)).unwrap();
    let b = gen_lg(&p, 30, &RandomStream::new(4, 0)).unwrap();
    assert_eq!(a, b);
    let c = gen_lg(&p, 30, &RandomStream::new(5, 0)).unwrap();
    assert_ne!(a, c);
    let mut q = PendulumParams::default();
    q.n_times = 10;
    let a = gen_pendulum(&q, 8, &RandomStream::new(4, 0)).unwrap();
    let b = gen_pendulum(&q, 8, &RandomStream::new(4, 0)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn splits_are_disjoint_with_exact_counts() {
    let mut rng = RandomStream::new(1, 0);
    for n in [1usize, 7, 10, 101, 4000] {
        let tags = assign_splits(n, [0.6, 0.2, 0.2], &mut rng).unwrap();
        let count = |s| tags.iter().filter(|&&t| t == s).count();
        let val = (0.2 * n as f64 + 1e-9).floor() as usize;
        assert_eq!(count(Split::Val), val);
        assert_eq!(count(Split::Test), val);
        assert_eq!(count(Split::Train), n - 2 * val);
    }
    assert!(assign_splits(5, [0.5, 0.2, 0.2], &mut rng).is_err());
    let ds = gen_pendulum(&PendulumParams { n_times: 5, ..Default::default() }, 4000, &RandomStream::new(2, 0)).unwrap();
    assert_eq!(ds.indices(Split::Train).len(), 2000);
    assert_eq!(ds.indices(Split::Val).len(), 1000);
    assert_eq!(ds.indices(Split::Test).len(), 1000);
}

#[test]
fn noiseless_lg_is_a_function_of_the_initial_draw() {
    let mut p = small_lg();
    p.sigma = 0.0;
    p.obs_noise = 0.0;
    let ds = gen_lg(&p, 5, &RandomStream::new(3, 0)).unwrap();
    let lat = ds.latents.as_ref().unwrap();
    for (s, x) in ds.inputs.iter().zip(lat) {
        assert_eq!(&s.values, x);
        // Deterministic flow: x(t) = E diag(e^{-λt}) Eᵀ (x0 - x∞) + x∞.
        let a = &p.basis * DMatrix::from_diagonal(&p.spectrum) * p.basis.transpose();
        let x_inf = a.clone().lu().solve(&p.offset).unwrap();
        let t0 = s.grid.times()[0];
        let x0 = x.row(0).transpose();
        for i in 0..s.len() {
            let dt = s.grid.times()[i] - t0;
            let decay = DMatrix::from_diagonal(&p.spectrum.map(|l| (-l * dt).exp()));
            let pred = &p.basis * decay * p.basis.transpose() * (&x0 - &x_inf) + &x_inf;
            assert!((pred - x.row(i).transpose()).amax() < 1e-12);
        }
    }
}

#[test]
fn true_model_has_higher_likelihood_than_a_perturbed_one() {
    let p = small_lg();
    let ds = gen_lg(&p, 500, &RandomStream::new(6, 0)).unwrap();
    let mut bad = p.clone();
    bad.spectrum *= 2.0;
    bad.offset = DVector::from_vec(vec![-0.3, 0.4]);
    let (mut good_ll, mut bad_ll) = (0.0, 0.0);
    for s in &ds.inputs {
        good_ll += kalman_filter(&p.ssm_on(&s.grid).unwrap(), s).unwrap().log_evidence;
        bad_ll += kalman_filter(&bad.ssm_on(&s.grid).unwrap(), s).unwrap().log_evidence;
    }
    assert!(good_ll > bad_ll, "{good_ll} vs {bad_ll}");
}

#[test]
fn latent_moments_match_closed_form() {
    let mut p = small_lg();
    p.n_times = p.lattice;
    let n = 4000;
    let ds = gen_lg(&p, n, &RandomStream::new(7, 0)).unwrap();
    let grid = ds.inputs[0].grid.clone();
    let ssm = p.ssm_on(&grid).unwrap();
    let traj = propagate_sequential(&ssm.init, &ssm.dynamics).unwrap();
    let lat = ds.latents.unwrap();
    for i in 0..grid.len() {
        let st = traj.standard_state(i).unwrap();
        let cov = match &st.cov {
            crate::types::Covariance::Full(c) => c.clone(),
            other => panic!("unexpected {other:?}"),
        };
        for j in 0..2 {
            let xs: Vec<f64> = lat.iter().map(|x| x[(i, j)]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let v = cov[(j, j)];
            assert!((mean - st.mean[j]).abs() < 4.0 * (v / n as f64).sqrt(), "mean t{i} x{j}");
            // Var of the sample variance for Gaussians is 2σ⁴/(n-1).
            assert!((var - v).abs() < 4.0 * v * (2.0 / (n - 1) as f64).sqrt(), "var t{i} x{j}");
        }
    }
}

#[test]
fn smoother_bands_are_calibrated() {
    let mut p = small_lg();
    p.obs_noise = 0.2;
    let ds = gen_lg(&p, 200, &RandomStream::new(8, 0)).unwrap();
    let lat = ds.latents.as_ref().unwrap();
    let (mut inside, mut total) = (0usize, 0usize);
    for (s, x) in ds.inputs.iter().zip(lat) {
        let sm = rts_smoother(&p.ssm_on(&s.grid).unwrap(), s).unwrap();
        for (i, st) in sm.iter().enumerate() {
            let var = st.variances();
            for j in 0..2 {
                total += 1;
                if (x[(i, j)] - st.mean[j]).abs() <= 1.96 * var[j].sqrt() {
                    inside += 1;
                }
            }
        }
    }
    let frac = inside as f64 / total as f64;
    // Cells within a sequence are correlated; allow twice the binomial spread.
    let se = (0.95 * 0.05 / total as f64).sqrt();
    assert!((frac - 0.95).abs() < 8.0 * se, "coverage {frac}");
}

#[test]
fn pendulum_targets_lie_on_the_circle() {
    let ds = gen_pendulum(&PendulumParams::default(), 20, &RandomStream::new(9, 0)).unwrap();
    for t in &ds.targets {
        assert_eq!(t.len(), 50);
        for i in 0..t.len() {
            let (s, c) = (t.values[(i, 0)], t.values[(i, 1)]);
            assert!((s * s + c * c - 1.0).abs() < 1e-10);
        }
        let times = t.grid.times();
        assert!(times.iter().all(|&v| (0.0..=100.0).contains(&v)));
    }
}

#[test]
fn heavy_damping_settles_at_the_bottom() {
    let p = PendulumParams { damping: 5.0, time_scale: 1.0, ..Default::default() };
    let ds = gen_pendulum(&p, 10, &RandomStream::new(10, 0)).unwrap();
    for t in &ds.targets {
        let last = t.len() - 1;
        assert!(t.values[(last, 0)].abs() < 1e-3);
        assert!((t.values[(last, 1)] - 1.0).abs() < 1e-3);
    }
}

#[test]
fn rk4_is_converged_at_the_default_step() {
    let p = PendulumParams::default();
    let half = PendulumParams { rk4_step: p.rk4_step / 2.0, ..p.clone() };
    let times: Vec<f64> = (0..100).map(|j| 100.0 * j as f64 / 99.0).collect();
    for (th, om) in [(2.4, 0.3), (-1.0, -0.8), (0.1, 0.0)] {
        let a = pendulum_angles(&p, th, om, &times);
        let b = pendulum_angles(&half, th, om, &times);
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{diff}");
    }
}

#[test]
fn subsampling_identity_and_counts() {
    let p = small_lg();
    let ds = gen_lg(&p, 1, &RandomStream::new(11, 0)).unwrap();
    let s = &ds.inputs[0];
    let mut rng = RandomStream::new(12, 0);
    assert_eq!(&subsample_irregular(s, 1.0, 0.0, &mut rng).unwrap(), s);

    let grid = TimeGrid::new((0..100).map(f64::from).collect()).unwrap();
    let long = ObservationSeq::fully_observed(grid, DMatrix::from_element(100, 3, 1.0)).unwrap();
    let half = subsample_irregular(&long, 0.5, 0.0, &mut rng).unwrap();
    assert_eq!(half.len(), 50);
    assert!(subsample_irregular(&long, 0.0, 0.0, &mut rng).is_err());
    assert!(subsample_irregular(&long, 0.5, 1.0, &mut rng).is_err());
}

#[test]
fn drop_fraction_is_respected_on_average() {
    let grid = TimeGrid::new((0..10).map(f64::from).collect()).unwrap();
    let seq = ObservationSeq::fully_observed(grid, DMatrix::from_element(10, 2, 1.0)).unwrap();
    let mut rng = RandomStream::new(13, 0);
    let (mut masked, mut cells) = (0usize, 0usize);
    for _ in 0..10_000 {
        let s = subsample_irregular(&seq, 0.5, 0.2, &mut rng).unwrap();
        cells += s.mask.len();
        masked += s.mask.iter().filter(|&&b| !b).count();
    }
    let frac = masked as f64 / cells as f64;
    assert!((frac - 0.2).abs() < 0.01, "{frac}");
}

fn constant_dataset(n: usize) -> Dataset {
    let mut seqs = Vec::new();
    for s in 0..n {
        let grid = TimeGrid::new(vec![0.0, 0.5, 1.5, 2.0]).unwrap();
        let seq = ObservationSeq::fully_observed(grid, DMatrix::from_element(4, 2, s as f64)).unwrap();
        seqs.push(seq);
    }
    let splits = vec![Split::Test; n];
    Dataset::new(seqs.clone(), seqs, splits, DatasetMeta::default(), None).unwrap()
}

#[test]
fn locf_is_exact_on_constant_sequences() {
    let ds = constant_dataset(3);
    let ds = make_interpolation(&ds, 0.5, &RandomStream::new(14, 0)).unwrap();
    let b = baselines(&ds, Split::Test).unwrap();
    assert_eq!(b.locf_mse, 0.0);
    assert_eq!(b.mean_mse, 0.0);
    assert_eq!(b.n_cells, 24);
}

#[test]
fn mean_predictor_on_white_noise_scores_the_variance() {
    let mut rng = RandomStream::new(15, 0);
    let n = 400;
    let k = 50;
    let mut seqs = Vec::new();
    for _ in 0..n {
        let grid = TimeGrid::new((0..k).map(|i| i as f64).collect()).unwrap();
        let v = DMatrix::from_fn(k, 1, |_, _| 2.0 * rng.normal());
        seqs.push(ObservationSeq::fully_observed(grid, v).unwrap());
    }
    let ds = Dataset::new(seqs.clone(), seqs, vec![Split::Test; n], DatasetMeta::default(), None).unwrap();
    let b = baselines(&ds, Split::Test).unwrap();
    // In-sample mean: E = σ²(k-1)/k.
    let expect = 4.0 * (k - 1) as f64 / k as f64;
    let se = 4.0 * (2.0 / (n * k) as f64).sqrt();
    assert!((b.mean_mse - expect).abs() < 4.0 * se, "{}", b.mean_mse);
    // LOCF on white noise carries the current value, so it is exact in-sample.
    assert_eq!(b.locf_mse, 0.0);
}

#[test]
fn locf_carries_values_across_hidden_rows() {
    let grid = TimeGrid::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let v = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
    let s = ObservationSeq::new(grid, v, vec![false, true, false, true]).unwrap();
    let p = locf_predictions(&s, &[0.0]);
    assert_eq!(p.as_slice(), &[2.0, 2.0, 2.0, 4.0]);
    let m = mean_predictions(&s, &[0.0]);
    assert_eq!(m.as_slice(), &[3.0; 4]);
    let never = ObservationSeq::new(s.grid.clone(), s.values.clone(), vec![false; 4]).unwrap();
    assert_eq!(locf_predictions(&never, &[7.0]).as_slice(), &[7.0; 4]);
}

#[test]
fn extrapolation_masks_are_complementary() {
    let p = small_lg();
    let ds = gen_lg(&p, 10, &RandomStream::new(16, 0)).unwrap();
    let ex = make_extrapolation(&ds, 0.5).unwrap();
    let cut = 0.5 * ds.horizon();
    for (a, b) in ex.inputs.iter().zip(&ex.targets) {
        for i in 0..a.len() {
            let before = a.grid.times()[i] <= cut;
            assert_eq!(a.row_observed(i), before);
            assert_eq!(b.row_observed(i), !before);
        }
    }
}

#[test]
fn csv_round_trip_is_exact() {
    let p = small_lg();
    let ds = gen_lg(&p, 6, &RandomStream::new(17, 0)).unwrap();
    let ds = make_interpolation(&ds, 0.6, &RandomStream::new(18, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    let text = std::fs::read_to_string(dir.path().join("inputs.csv")).unwrap();
    assert!(text.starts_with("t,y0,y1,mask0,mask1\n"));
    assert_eq!(parse_csv(&text).unwrap(), ds.inputs);
}

#[test]
fn csv_rejects_malformed_input() {
    assert!(matches!(parse_csv("time,y0,mask0\n0,1,1\n"), Err(Error::Parse(_))));
    assert!(matches!(parse_csv("t,y0,mask0\n1,1,1\n0,1,1\n"), Err(Error::Parse(_))));
    assert!(matches!(parse_csv("t,y0,mask0\n0,NaN,1\n"), Err(Error::Parse(_))));
    assert!(matches!(parse_csv("t,y0,mask0\n0,1,2\n"), Err(Error::Parse(_))));
    assert!(matches!(parse_csv("t,y0,mask0\n0,1\n"), Err(Error::Parse(_))));
    let ok = parse_csv("t,y0,mask0\n0,NaN,0\n1,2,1\n\n0,3,1\n").unwrap();
    assert_eq!(ok.len(), 2);
    assert!(!ok[0].is_observed(0, 0));
}

#[test]
fn minmax_uses_training_statistics() {
    let grid = TimeGrid::new(vec![0.0, 1.0]).unwrap();
    let a = ObservationSeq::fully_observed(grid.clone(), DMatrix::from_column_slice(2, 1, &[2.0, 4.0])).unwrap();
    let b = ObservationSeq::fully_observed(grid, DMatrix::from_column_slice(2, 1, &[100.0, 6.0])).unwrap();
    let ds = Dataset::new(
        vec![a.clone(), b.clone()],
        vec![a, b],
        vec![Split::Train, Split::Test],
        DatasetMeta::default(),
        None,
    )
    .unwrap();
    let mm = MinMax::fit(&ds).unwrap();
    assert_eq!((mm.min[0], mm.max[0]), (2.0, 4.0));
    let n = mm.apply(&ds).unwrap();
    assert_eq!(n.inputs[0].values.as_slice(), &[0.0, 1.0]);
    assert_eq!(n.inputs[1].values.as_slice(), &[49.0, 2.0]);
    let mut v = n.inputs[1].values.clone();
    mm.invert(&mut v);
    assert_eq!(v.as_slice(), &[100.0, 6.0]);
}
