use proptest::prelude::*;

use super::*;
use crate::gauss::log_density_1d;
use crate::pscan::moments_via_scan;
use crate::types::{ObservationSeq, TimeGrid};

fn random(rows: usize, cols: usize, rng: &mut RandomStream) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.normal())
}

/// Largest relative disagreement between reverse-mode and central differences
/// for `f` built over leaves holding `inputs`.
fn fd_check(inputs: &[Mat], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |xs: &[Mat]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|m| t.leaf(m.clone())).collect();
        let o = f(&mut t, &vs);
        t.scalar_value(o)
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (a, m) in inputs.iter().enumerate() {
        let g = grads.get(vars[a]).cloned().unwrap_or_else(|| Mat::zeros(m.nrows(), m.ncols()));
        for idx in 0..m.len() {
            let mut plus = inputs.to_vec();
            plus[a][idx] += h;
            let mut minus = inputs.to_vec();
            minus[a][idx] -= h;
            let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let ana = g[idx];
            let scale = ana.abs().max(num.abs()).max(1e-2);
            worst = worst.max((ana - num).abs() / scale);
        }
    }
    worst
}

#[test]
fn tanh_slope_at_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Mat::zeros(1, 1));
    let y = t.tanh(x);
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap()[(0, 0)], 1.0);
}

#[test]
fn half_square_slope() {
    let mut t = Tape::new();
    let x = t.leaf(Mat::from_element(1, 1, 3.0));
    let y = t.square(x);
    let y = t.scale(y, 0.5);
    let g = t.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap()[(0, 0)], 3.0);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let x = t.leaf(Mat::zeros(2, 2));
    assert!(matches!(t.backward(x), Err(crate::Error::InvalidArgument(_))));
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = RandomStream::new(1, 0);
    let inputs = vec![
        random(5, 4, &mut rng),
        random(4, 6, &mut rng),
        random(1, 6, &mut rng),
        random(6, 6, &mut rng),
        random(1, 6, &mut rng),
        random(6, 1, &mut rng),
    ];
    let err = fd_check(&inputs, &|t, v| {
        let h = t.matmul(v[0], v[1]);
        let h = t.add_row(h, v[2]);
        let h = t.tanh(h);
        let h = t.matmul(h, v[3]);
        let h = t.add_row(h, v[4]);
        let h = t.gelu(h);
        let o = t.matmul(h, v[5]);
        let o = t.square(o);
        t.mean(o)
    });
    assert!(err < 1e-4, "{err}");
}

fn unary_case(op: usize, x: Mat) -> f64 {
    let f = move |t: &mut Tape, v: &[Var]| {
        let y = match op {
            0 => t.exp(v[0]),
            1 => t.tanh(v[0]),
            2 => t.sigmoid(v[0]),
            3 => t.relu(v[0]),
            4 => t.gelu(v[0]),
            5 => t.square(v[0]),
            6 => t.scale(v[0], -1.7),
            7 => t.shift(v[0], 0.3),
            8 => t.transpose(v[0]),
            9 => t.layer_norm(v[0]),
            10 => t.sum_rows(v[0]),
            11 => t.mean(v[0]),
            _ => unreachable!(),
        };
        reduce(t, y)
    };
    fd_check(&[x], &f)
}

/// `Σ (y + y²/2 + y³)`: every entry gets a distinct, nonconstant slope.
fn reduce(t: &mut Tape, y: Var) -> Var {
    let s = t.square(y);
    let c = t.mul(s, y);
    let s = t.scale(s, 0.5);
    let a = t.add(y, s);
    let a = t.add(a, c);
    t.sum(a)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 20, ..ProptestConfig::default() })]

    #[test]
    fn unary_ops_pass_finite_differences(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = RandomStream::new(seed, 0);
        for op in 0..12 {
            let mut x = random(rows, cols, &mut rng);
            if op == 3 {
                // Keep away from the kink.
                x.apply(|v| *v = if v.abs() < 0.05 { 0.3 } else { *v });
            }
            if op == 9 && cols < 2 {
                continue;
            }
            let err = unary_case(op, x);
            prop_assert!(err < 1e-4, "op {} err {}", op, err);
        }
    }

    #[test]
    fn positive_domain_ops_pass_finite_differences(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        let mut rng = RandomStream::new(seed, 1);
        let x = Mat::from_fn(rows, cols, |_, _| rng.uniform_range(0.2, 3.0));
        for op in 0..3 {
            let err = fd_check(&[x.clone()], &|t, v| {
                let y = match op {
                    0 => t.log(v[0]),
                    1 => t.sqrt(v[0]),
                    _ => t.phi(v[0]),
                };
                let y = t.square(y);
                t.sum(y)
            });
            prop_assert!(err < 1e-4, "op {} err {}", op, err);
        }
        // φ near zero switches to a series.
        let small = Mat::from_fn(rows, cols, |_, _| rng.uniform_range(1e-6, 1e-3));
        let err = fd_check(&[small], &|t, v| { let y = t.phi(v[0]); t.sum(y) });
        prop_assert!(err < 1e-4);
    }

    #[test]
    fn binary_and_broadcast_ops_pass_finite_differences(rows in 1usize..5, cols in 1usize..5, inner in 1usize..5, seed in any::<u64>()) {
        let mut rng = RandomStream::new(seed, 2);
        let a = random(rows, cols, &mut rng);
        let b = random(rows, cols, &mut rng);
        let row = random(1, cols, &mut rng);
        let col = random(rows, 1, &mut rng);
        let left = random(rows, inner, &mut rng);
        let right = random(inner, cols, &mut rng);
        let w = random(rows, cols, &mut rng);
        let red = |t: &mut Tape, y: Var| { let c = t.constant(w.clone()); let p = t.mul(y, c); let p = t.tanh(p); t.sum(p) };
        let checks: Vec<(Vec<Mat>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>)> = vec![
            (vec![a.clone(), b.clone()], Box::new(|t: &mut Tape, v: &[Var]| { let y = t.add(v[0], v[1]); red(t, y) })),
            (vec![a.clone(), b.clone()], Box::new(|t: &mut Tape, v: &[Var]| { let y = t.sub(v[0], v[1]); red(t, y) })),
            (vec![a.clone(), b.clone()], Box::new(|t: &mut Tape, v: &[Var]| { let y = t.mul(v[0], v[1]); red(t, y) })),
            (vec![a.clone(), row.clone()], Box::new(|t: &mut Tape, v: &[Var]| { let y = t.add_row(v[0], v[1]); red(t, y) })),
            (vec![a.clone(), row.clone()], Box::new(|t: &mut Tape, v: &[Var]| { let y = t.mul_row(v[0], v[1]); red(t, y) })),
            (vec![a.clone(), col.clone()], Box::new(|t: &mut Tape, v: &[Var]| { let y = t.mul_col(v[0], v[1]); red(t, y) })),
            (vec![left.clone(), right.clone()], Box::new(|t: &mut Tape, v: &[Var]| { let y = t.matmul(v[0], v[1]); red(t, y) })),
        ];
        for (i, (inputs, f)) in checks.iter().enumerate() {
            let err = fd_check(inputs, f.as_ref());
            prop_assert!(err < 1e-4, "case {} err {}", i, err);
        }
    }

    #[test]
    fn structural_ops_pass_finite_differences(rows in 1usize..5, cols in 2usize..6, seed in any::<u64>()) {
        let mut rng = RandomStream::new(seed, 3);
        let a = random(rows, cols, &mut rng);
        let b = random(rows, 2, &mut rng);
        let idx: Vec<usize> = (0..rows + 2).map(|_| rng.below(rows)).collect();
        let mut mask = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                if j != i % cols && rng.uniform() < 0.3 {
                    mask[(i, j)] = f64::NEG_INFINITY;
                }
            }
        }
        let w = random(rows, cols, &mut rng);
        let w2 = random(rows + 2, cols, &mut rng);
        let err = fd_check(&[a.clone(), b.clone()], &|t, v| {
            let c = t.concat_cols(&[v[0], v[1]]);
            let s = t.slice_cols(c, 1, cols);
            let wc = t.constant(w.clone());
            let p = t.mul(s, wc);
            let p = t.square(p);
            t.sum(p)
        });
        prop_assert!(err < 1e-4, "concat/slice {}", err);
        let err = fd_check(&[a.clone()], &|t, v| {
            let g = t.gather_rows(v[0], &idx);
            let wc = t.constant(w2.clone());
            let p = t.mul(g, wc);
            let p = t.square(p);
            t.sum(p)
        });
        prop_assert!(err < 1e-4, "gather {}", err);
        let err = fd_check(&[a.clone()], &|t, v| {
            let s = t.softmax_rows(v[0], Some(&mask));
            let wc = t.constant(w.clone());
            let p = t.mul(s, wc);
            t.sum(p)
        });
        prop_assert!(err < 1e-4, "softmax {}", err);
    }

    #[test]
    fn sequence_ops_pass_finite_differences(steps in 1usize..6, width in 1usize..4, hidden in 1usize..4, seed in any::<u64>()) {
        let mut rng = RandomStream::new(seed, 4);
        let inputs = vec![
            random(steps, width, &mut rng),
            random(width, 3 * hidden, &mut rng) * 0.7,
            random(hidden, 3 * hidden, &mut rng) * 0.7,
            random(1, 3 * hidden, &mut rng) * 0.3,
            random(1, 3 * hidden, &mut rng) * 0.3,
        ];
        let w = random(steps, hidden, &mut rng);
        let err = fd_check(&inputs, &|t, v| {
            let h = t.gru(v[0], v[1], v[2], v[3], v[4]);
            let wc = t.constant(w.clone());
            let p = t.mul(h, wc);
            t.sum(p)
        });
        prop_assert!(err < 1e-4, "gru {}", err);

        let a = Mat::from_fn(steps, width, |_, _| rng.uniform_range(0.1, 1.0));
        let b = random(steps, width, &mut rng);
        let init = random(1, width, &mut rng);
        let w = random(steps + 1, width, &mut rng);
        let err = fd_check(&[a, b, init], &|t, v| {
            let s = t.affine_scan(v[0], v[1], v[2]);
            let wc = t.constant(w.clone());
            let p = t.mul(s, wc);
            let p = t.square(p);
            t.sum(p)
        });
        prop_assert!(err < 1e-4, "scan {}", err);

        let sq = random(width + 1, width + 1, &mut rng);
        let w = random(width + 1, width + 1, &mut rng);
        let err = fd_check(&[sq], &|t, v| {
            let e = t.expm(v[0]);
            let wc = t.constant(w.clone());
            let p = t.mul(e, wc);
            t.sum(p)
        });
        prop_assert!(err < 1e-4, "expm {}", err);
    }
}

#[test]
fn affine_scan_matches_the_recurrence() {
    let mut rng = RandomStream::new(2, 0);
    let a = Mat::from_fn(40, 3, |_, _| rng.uniform_range(0.0, 1.0));
    let b = random(40, 3, &mut rng);
    let init = random(1, 3, &mut rng);
    let mut t = Tape::new();
    let (va, vb, vi) = (t.constant(a.clone()), t.constant(b.clone()), t.constant(init.clone()));
    let s = t.affine_scan(va, vb, vi);
    let s = t.value(s);
    let mut x = init.clone();
    for i in 0..40 {
        x = x.component_mul(&a.rows(i, 1)) + b.rows(i, 1);
        assert!((s.rows(i + 1, 1) - &x).amax() < 1e-12);
    }
}

fn tiny_config(scheme: Scheme) -> AssimilationConfig {
    AssimilationConfig {
        scheme,
        latent_dim: 3,
        encoded_dim: 4,
        n_base: 3,
        n_blocks: 2,
        decoder_hidden: 5,
        input_dim: 2,
        output_dim: 2,
        time_scale: 0.5,
        ..AssimilationConfig::default()
    }
}

fn tiny_sequence(rng: &mut RandomStream) -> ObservationSeq {
    let grid = TimeGrid::new(vec![0.0, 0.4, 1.1, 1.5, 2.6, 3.0, 3.3]).unwrap();
    let values = random(7, 2, rng);
    let mut mask = vec![true; 14];
    for c in [2, 3, 8, 9, 11] {
        mask[c] = false;
    }
    ObservationSeq::new(grid, values, mask).unwrap()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = RandomStream::new(3, 0);
    let model = Model::new(tiny_config(Scheme::Full), &mut rng).unwrap();
    let text = model.params.to_text();
    let back = ParamStore::from_text(&text).unwrap();
    assert_eq!(back, model.params);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.txt");
    model.params.save(&path).unwrap();
    let loaded = Model::with_params(model.config.clone(), &ParamStore::load(&path).unwrap()).unwrap();
    assert_eq!(loaded, model);
}

#[test]
fn checkpoint_shape_mismatch_names_the_tensor() {
    let mut rng = RandomStream::new(4, 0);
    let model = Model::new(tiny_config(Scheme::Full), &mut rng).unwrap();
    let mut other = tiny_config(Scheme::Full);
    other.latent_dim = 5;
    match Model::with_params(other, &model.params) {
        Err(crate::Error::Dimension(msg)) => assert!(msg.contains("base.log_spectra"), "{msg}"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(ParamStore::from_text("cdssm-checkpoint 1\ntensor a 2 2 2\n1 2\n").is_err());
    assert!(ParamStore::from_text("nonsense").is_err());
}

#[test]
fn encoder_contracts() {
    let mut rng = RandomStream::new(5, 0);
    let seq = tiny_sequence(&mut rng);
    let mut cfg = tiny_config(Scheme::Full);
    cfg.encoder_var = 1e-30;
    let mut model = Model::new(cfg, &mut rng).unwrap();
    let (s, m) = model.encode(&seq, &mut rng).unwrap();
    assert!((s - &m).amax() < 1e-13);
    assert_eq!(m.nrows(), seq.observed_rows().len());

    for name in ["enc.w2", "enc.b2"] {
        model.params.get_mut(name).unwrap().values.iter_mut().for_each(|v| *v = 0.0);
    }
    let (_, m) = model.encode(&seq, &mut rng).unwrap();
    assert_eq!(m.amax(), 0.0);

    model.config.encoder_var = 0.01;
    let a = model.encode(&seq, &mut RandomStream::new(9, 9)).unwrap();
    let b = model.encode(&seq, &mut RandomStream::new(9, 9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_observation_fills_every_row() {
    let mut rng = RandomStream::new(6, 0);
    let model = Model::new(tiny_config(Scheme::History), &mut rng).unwrap();
    let grid = TimeGrid::new(vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let mut mask = vec![false; 8];
    mask[2] = true;
    let seq = ObservationSeq::new(grid, random(4, 2, &mut rng), mask).unwrap();
    let (y, _) = model.encode(&seq, &mut rng).unwrap();
    let z = model.assimilate(&y, &seq).unwrap();
    for i in 1..4 {
        assert_eq!(z.row(i), z.row(0));
    }
}

#[test]
fn uniform_logits_average_unmasked_values() {
    let mut rng = RandomStream::new(7, 0);
    let n = 5;
    let x = random(n, 3, &mut rng);
    let wv = random(3, 3, &mut rng);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let zero = t.constant(Mat::zeros(3, 3));
    let zb = t.constant(Mat::zeros(1, 3));
    let wvv = t.constant(wv.clone());
    let mut mask = Mat::zeros(n, n);
    for i in 0..n {
        mask[(i, 1)] = f64::NEG_INFINITY;
        mask[(i, 3)] = f64::NEG_INFINITY;
    }
    let out = masked_attention(&mut t, xv, zero, zb, zero, zb, wvv, zb, Some(&mask), None);
    let v = &x * &wv;
    let mean = (v.row(0) + v.row(2) + v.row(4)) / 3.0;
    for i in 0..n {
        assert!((t.value(out).row(i) - &mean).amax() < 1e-12);
    }
}

#[test]
fn history_context_is_causal_and_ignores_unseen_values() {
    let mut rng = RandomStream::new(8, 0);
    for scheme in [Scheme::History, Scheme::Full] {
        let model = Model::new(tiny_config(scheme), &mut rng).unwrap();
        let seq = tiny_sequence(&mut rng);
        let rows = seq.observed_rows();
        let run = |s: &ObservationSeq| {
            let (_, y) = model.encode(s, &mut RandomStream::new(0, 0)).unwrap();
            model.assimilate(&y, s).unwrap()
        };
        let base = run(&seq);

        // Values behind the mask never matter.
        let mut hidden = seq.clone();
        for i in 0..seq.len() {
            for j in 0..2 {
                if !seq.is_observed(i, j) {
                    hidden.values[(i, j)] = 1e6 * (i + j + 1) as f64;
                }
            }
        }
        assert_eq!(run(&hidden), base);

        if scheme == Scheme::History {
            for &j in &rows[1..] {
                let mut p = seq.clone();
                for c in 0..2 {
                    p.values[(j, c)] += 0.5;
                }
                let z = run(&p);
                for i in 0..seq.len() {
                    let same = z.row(i) == base.row(i);
                    assert_eq!(same, i < j, "row {i} after perturbing {j}");
                }
            }
        }
    }
}

#[test]
fn attention_commutes_with_permutations() {
    let mut rng = RandomStream::new(9, 0);
    let n = 6;
    let x = random(n, 4, &mut rng);
    let ws: Vec<Mat> = (0..3).map(|_| random(4, 4, &mut rng)).collect();
    let bs: Vec<Mat> = (0..3).map(|_| random(1, 4, &mut rng)).collect();
    let run = |x: &Mat| {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let w: Vec<Var> = ws.iter().map(|m| t.constant(m.clone())).collect();
        let b: Vec<Var> = bs.iter().map(|m| t.constant(m.clone())).collect();
        let o = masked_attention(&mut t, xv, w[0], b[0], w[1], b[1], w[2], b[2], None, None);
        t.value(o).clone()
    };
    let base = run(&x);
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        let px = Mat::from_fn(n, 4, |i, j| x[(perm[i], j)]);
        let out = run(&px);
        for i in 0..n {
            assert!((out.row(i) - base.row(perm[i])).amax() < 1e-12);
        }
    }
}

#[test]
fn control_spectra_stay_in_the_convex_hull() {
    let mut rng = RandomStream::new(10, 0);
    let mut model = Model::new(tiny_config(Scheme::Full), &mut rng).unwrap();
    let grid = TimeGrid::new(vec![0.0, 0.5, 1.0, 2.0, 2.5]).unwrap();
    let z = random(5, 4, &mut rng);

    // Zero-initialized weight network: equal weights.
    let base = model.base_spectra().unwrap();
    let c = model.control_from_context(&z, &grid).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            let mean = base.column(j).sum() / 3.0;
            assert!((c.operator.spectrum(i)[j] - mean).abs() < 1e-12);
        }
    }

    let w = random(4, 3, &mut rng) * 3.0;
    model.params.get_mut("weights.w").unwrap().values = Tensor::from_matrix(&w).values;
    let (wts, lambda, _) = model.control_rows(&z).unwrap();
    for i in 0..5 {
        assert!((wts.row(i).sum() - 1.0).abs() < 1e-12);
        for j in 0..3 {
            let lo = base.column(j).min();
            let hi = base.column(j).max();
            assert!(lambda[(i, j)] >= lo - 1e-12 && lambda[(i, j)] <= hi + 1e-12);
        }
    }

    let mut one = tiny_config(Scheme::Full);
    one.n_base = 1;
    let model = Model::new(one, &mut rng).unwrap();
    let c = model.control_from_context(&z, &grid).unwrap();
    let base = model.base_spectra().unwrap();
    for i in 0..4 {
        assert_eq!(c.operator.spectrum(i).transpose(), base.row(0));
    }
}

#[test]
fn tape_moments_match_the_scan_module() {
    let mut rng = RandomStream::new(11, 0);
    let model = Model::new(tiny_config(Scheme::Full), &mut rng).unwrap();
    let seq = tiny_sequence(&mut rng);
    let inputs = SequenceInputs::new(&model.config, &seq).unwrap();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, false);
    let (en, _, _) = model.draw_noise(&inputs, &mut rng);
    let ctx = model.context_tape(&mut tape, &bound, &inputs, &en, None);
    let z = tape.value(ctx.z).clone();
    let control = model.control_from_context(&z, &seq.grid).unwrap();
    let traj = moments_via_scan(&model.initial_state().unwrap(), &control).unwrap();
    for i in 0..seq.len() {
        let st = &traj.states[i];
        let mh = tape.value(ctx.mean_hat).row(i).transpose();
        let vh = tape.value(ctx.var_hat).row(i).transpose();
        assert!((&st.mean - mh).amax() < 1e-10);
        assert!((st.variances() - vh).amax() < 1e-10);
    }
}

#[test]
fn decoder_likelihoods() {
    let mut rng = RandomStream::new(12, 0);
    let model = Model::new(tiny_config(Scheme::Full), &mut rng).unwrap();
    let grid = TimeGrid::new(vec![0.0, 1.0, 2.0]).unwrap();
    let out = random(3, 2, &mut rng);
    let exact = ObservationSeq::fully_observed(grid.clone(), out.clone()).unwrap();
    let ll = model.log_likelihood(&out, &exact).unwrap();
    let per = -1.0 * (2.0 * std::f64::consts::PI * 0.01).ln();
    assert!((ll - 3.0 * per).abs() < 1e-12);

    let target = tiny_sequence(&mut rng);
    let pred = random(7, 2, &mut rng);
    let mut direct = 0.0;
    for i in 0..7 {
        for j in 0..2 {
            if target.is_observed(i, j) {
                direct += log_density_1d(target.values[(i, j)], pred[(i, j)], 0.01);
            }
        }
    }
    assert!((model.log_likelihood(&pred, &target).unwrap() - direct).abs() < 1e-12 * direct.abs().max(1.0));

    let mut cat = tiny_config(Scheme::Full);
    cat.likelihood = Likelihood::Categorical;
    cat.n_classes = 4;
    cat.output_dim = 4;
    let model = Model::new(cat, &mut rng).unwrap();
    let labels = ObservationSeq::fully_observed(grid.clone(), Mat::from_column_slice(3, 1, &[0.0, 3.0, 1.0])).unwrap();
    let ll = model.log_likelihood(&Mat::from_element(3, 4, 0.7), &labels).unwrap();
    assert!((ll + 3.0 * 4f64.ln()).abs() < 1e-12);
    let bad = ObservationSeq::fully_observed(grid, Mat::from_column_slice(3, 1, &[0.0, 4.0, 1.0])).unwrap();
    assert!(model.log_likelihood(&Mat::zeros(3, 4), &bad).is_err());
}

#[test]
fn sequence_gradients_match_finite_differences() {
    let mut rng = RandomStream::new(13, 0);
    let model = Model::new(tiny_config(Scheme::History), &mut rng).unwrap();
    let seq = tiny_sequence(&mut rng);
    let (out, grads) = model.sequence_gradients(&seq, &seq, &mut RandomStream::new(5, 5)).unwrap();
    assert!(out.loss.is_finite());
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    let h = 1e-5;
    for (pi, name) in names.iter().enumerate() {
        let len = model.params.get(name).unwrap().len();
        // Row-major index 0 and the last entry of every tensor.
        for idx in [0, len - 1] {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.params.get_mut(name).unwrap().values[idx] += delta;
                m.sequence_gradients(&seq, &seq, &mut RandomStream::new(5, 5)).unwrap().0.loss
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let t = model.params.get(name).unwrap();
            let (_, c) = t.rows_cols();
            let ana = grads[pi][(idx / c, idx % c)];
            let scale = ana.abs().max(num.abs()).max(1e-2);
            assert!((ana - num).abs() / scale < 1e-4, "{name}[{idx}]: {ana} vs {num}");
        }
    }
}
