use mtc_core::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use mtc_core::nn::{Bind, LayerNorm, LstmCell, Mlp};
use mtc_core::rng::stream;
use mtc_core::Result;
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;

fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Norm-wise relative error `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞)`.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    inf(&diff) / inf(analytic).max(inf(numeric)).max(1e-12)
}

/// `Σ w ⊙ f(x)` with fixed random weights, so every output element matters.
fn weighted(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let (r, c) = tape.shape(out);
    let w = tape.input(uniform(&mut stream(seed, "weights"), r, c, -1.0, 1.0));
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

/// Analytic and central-difference gradients of `Σ w ⊙ f(x)` with respect to `x`.
fn input_grads(x: &Tensor, f: &dyn Fn(&mut Tape, Var) -> Result<Var>) -> (Vec<f64>, Vec<f64>) {
    let eval = |x: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let v = tape.input(x.clone());
        let out = f(&mut tape, v).unwrap();
        let loss = weighted(&mut tape, out, 99);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let v = tape.variable(x.clone());
    let out = f(&mut tape, v).unwrap();
    let loss = weighted(&mut tape, out, 99);
    tape.backward(loss, &mut ParamStore::new()).unwrap();
    let analytic = tape.grad(v).unwrap().to_vec();
    let numeric = (0..x.numel())
        .map(|i| {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += H;
            m.data_mut()[i] -= H;
            (eval(&p) - eval(&m)) / (2.0 * H)
        })
        .collect();
    (analytic, numeric)
}

/// Same, with respect to every listed parameter in `store`.
fn param_grads(store: &mut ParamStore, ids: &[ParamId], f: &dyn Fn(&mut Tape, &ParamStore) -> Result<Var>) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let out = f(&mut tape, store).unwrap();
    let loss = weighted(&mut tape, out, 7);
    store.zero_all_grads();
    tape.backward(loss, store).unwrap();
    let analytic: Vec<f64> = ids.iter().flat_map(|&id| store.get(id).grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).numel()])).collect();
    let mut numeric = Vec::new();
    for &id in ids {
        for i in 0..store.get(id).numel() {
            let value = |s: &mut ParamStore, delta: f64| {
                s.get_mut(id).data_mut()[i] += delta;
                let mut t = Tape::new();
                let out = f(&mut t, s).unwrap();
                let loss = weighted(&mut t, out, 7);
                s.get_mut(id).data_mut()[i] -= delta;
                t.value(loss).item()
            };
            numeric.push((value(store, H) - value(store, -H)) / (2.0 * H));
        }
    }
    (analytic, numeric)
}

#[test]
fn matmul_gradient_matches_differences() {
    let mut rng = stream(1, "t");
    let a = uniform(&mut rng, 4, 3, -2.0, 2.0);
    let b = uniform(&mut rng, 3, 5, -2.0, 2.0);
    let bc = b.clone();
    let (an, nu) = input_grads(&a, &move |t, x| {
        let bv = t.input(bc.clone());
        t.matmul(x, bv)
    });
    assert!(rel_err(&an, &nu) < 1e-4);

    // d/da Σ(a b) is the row-sums of b repeated for each row of a
    let mut tape = Tape::new();
    let av = tape.variable(a.clone());
    let bv = tape.input(b.clone());
    let y = tape.matmul(av, bv).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s, &mut ParamStore::new()).unwrap();
    let g = tape.grad(av).unwrap();
    for r in 0..4 {
        for k in 0..3 {
            let row_sum: f64 = b.row(k).iter().sum();
            assert!((g[r * 3 + k] - row_sum).abs() < 1e-12);
        }
    }
    let (an, nu) = input_grads(&b, &move |t, x| {
        let av = t.input(a.clone());
        t.matmul(av, x)
    });
    assert!(rel_err(&an, &nu) < 1e-4);
}

type Op = fn(&mut Tape, Var) -> Result<Var>;

#[test]
fn unary_gradients_match_differences() {
    let ops: [(&str, Op, f64, f64); 8] = [
        ("tanh", |t, x| t.tanh(x), -2.0, 2.0),
        ("softplus", |t, x| t.softplus(x), -2.0, 2.0),
        ("exp", |t, x| t.exp(x), -2.0, 2.0),
        ("log", |t, x| t.log(x), 0.1, 2.0),
        ("square", |t, x| t.square(x), -2.0, 2.0),
        ("neg", |t, x| t.neg(x), -2.0, 2.0),
        ("sigmoid", |t, x| t.sigmoid(x), -2.0, 2.0),
        ("scale_shift", |t, x| {
            let y = t.scale(x, -1.5)?;
            t.shift(y, 0.25)
        }, -2.0, 2.0),
    ];
    for (seed, (name, op, lo, hi)) in ops.into_iter().enumerate() {
        let x = uniform(&mut stream(seed as u64, "unary"), 3, 4, lo, hi);
        let (an, nu) = input_grads(&x, &op);
        assert!(rel_err(&an, &nu) < 1e-4, "{name}: {}", rel_err(&an, &nu));
    }
}

#[test]
fn relu_gradient_away_from_the_kink() {
    let mut x = uniform(&mut stream(3, "relu"), 4, 4, -2.0, 2.0);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let (an, nu) = input_grads(&x, &|t, x| t.relu(x));
    assert!(rel_err(&an, &nu) < 1e-4);
}

#[test]
fn binary_and_structural_gradients_match_differences() {
    let mut rng = stream(4, "binary");
    let other = uniform(&mut rng, 3, 4, -2.0, 2.0);
    let row = uniform(&mut rng, 1, 4, -2.0, 2.0);
    let x = uniform(&mut rng, 3, 4, -2.0, 2.0);
    let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>)> = vec![
        ("add", Box::new({
            let o = other.clone();
            move |t, x| {
                let o = t.input(o.clone());
                t.add(x, o)
            }
        })),
        ("sub", Box::new({
            let o = other.clone();
            move |t, x| {
                let o = t.input(o.clone());
                t.sub(o, x)
            }
        })),
        ("mul", Box::new({
            let o = other.clone();
            move |t, x| {
                let o = t.input(o.clone());
                t.mul(x, o)
            }
        })),
        ("mul_self", Box::new(|t, x| t.mul(x, x))),
        ("add_row", Box::new({
            let r = row.clone();
            move |t, x| {
                let r = t.input(r.clone());
                t.add_row(x, r)
            }
        })),
        ("mul_row", Box::new({
            let r = row.clone();
            move |t, x| {
                let r = t.input(r.clone());
                t.mul_row(x, r)
            }
        })),
        ("minimum", Box::new({
            let o = other.clone();
            move |t, x| {
                let o = t.input(o.clone());
                t.minimum(x, o)
            }
        })),
        ("mean", Box::new(|t, x| t.mean(x))),
        ("sum_cols", Box::new(|t, x| t.sum_cols(x))),
        ("slices_and_concat", Box::new(|t, x| {
            let left = t.slice_cols(x, 0, 1)?;
            let right = t.slice_cols(x, 2, 4)?;
            let cols = t.concat_cols(&[right, left])?;
            let top = t.slice_rows(cols, 0, 1)?;
            let rest = t.slice_rows(cols, 1, 3)?;
            t.concat_rows(&[rest, top, top])
        })),
        ("layer_norm", Box::new(|t, x| t.layer_norm(x, 1e-5))),
    ];
    for (name, f) in &cases {
        let (an, nu) = input_grads(&x, f.as_ref());
        assert!(rel_err(&an, &nu) < 1e-4, "{name}: {}", rel_err(&an, &nu));
    }
}

#[test]
fn recurrent_step_zero_fixed_point() {
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "cell", 3, 5, &mut stream(0, "init")).unwrap();
    for id in cell.params() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut tape = Tape::new();
    let x = tape.input(Tensor::zeros(2, 3));
    let s = cell.zero_state(&mut tape, 2);
    let (h, next) = cell.step(&mut tape, &store, x, s, Bind::Frozen).unwrap();
    assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    assert!(tape.value(next.cell).data().iter().all(|&v| v == 0.0));
}

fn unroll(cell: &LstmCell, store: &ParamStore, tape: &mut Tape, xs: &[Var], mode: Bind) -> Result<Var> {
    let mut state = cell.zero_state(tape, tape.shape(xs[0]).0);
    let mut h = state.hidden;
    for &x in xs {
        let (out, next) = cell.step(tape, store, x, state, mode)?;
        h = out;
        state = next;
    }
    Ok(h)
}

#[test]
fn recurrent_gradients_match_differences() {
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "cell", 3, 6, &mut stream(2, "init")).unwrap();
    let mut rng = stream(2, "inputs");
    let first = uniform(&mut rng, 2, 3, -2.0, 2.0);
    let rest: Vec<Tensor> = (0..7).map(|_| uniform(&mut rng, 2, 3, -2.0, 2.0)).collect();

    let (an, nu) = input_grads(&first, &|t, x| unroll(&cell, &store, t, &[x], Bind::Frozen));
    assert!(rel_err(&an, &nu) < 1e-4, "single step {}", rel_err(&an, &nu));

    let (an, nu) = input_grads(&first, &|t, x| {
        let mut xs = vec![x];
        xs.extend(rest.iter().map(|r| t.input(r.clone())));
        unroll(&cell, &store, t, &xs, Bind::Frozen)
    });
    assert!(an.iter().any(|g| g.abs() > 1e-8), "step-1 input must influence the last output");
    assert!(rel_err(&an, &nu) < 1e-3, "8-step unroll {}", rel_err(&an, &nu));

    let inputs: Vec<Tensor> = std::iter::once(first.clone()).chain(rest.iter().cloned()).collect();
    let ids = cell.params();
    let (an, nu) = param_grads(&mut store, &ids, &|t, s| {
        let xs: Vec<Var> = inputs.iter().map(|x| t.input(x.clone())).collect();
        unroll(&cell, s, t, &xs, Bind::Train)
    });
    assert!(rel_err(&an, &nu) < 1e-3, "unroll parameters {}", rel_err(&an, &nu));
}

#[test]
fn mlp_parameter_gradients_match_differences() {
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[3, 8, 8, 2], &mut stream(5, "init")).unwrap();
    let norm = LayerNorm::new(&mut store, "norm", 2).unwrap();
    let x = uniform(&mut stream(5, "x"), 4, 3, -2.0, 2.0);
    let mut ids = mlp.params();
    ids.extend(norm.params());
    let (an, nu) = param_grads(&mut store, &ids, &|t, s| {
        let xv = t.input(x.clone());
        let y = mlp.forward(t, s, xv, Bind::Train)?;
        let y = t.tanh(y)?;
        let y = norm.forward(t, s, y, Bind::Train)?;
        t.softplus(y)
    });
    assert!(rel_err(&an, &nu) < 1e-4, "{}", rel_err(&an, &nu));
}

#[test]
fn backward_is_bit_deterministic_and_accumulates() {
    let grads = || {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[4, 16, 3], &mut stream(9, "init")).unwrap();
        let x = uniform(&mut stream(9, "x"), 5, 4, -2.0, 2.0);
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let y = mlp.forward(&mut tape, &store, xv, Bind::Train).unwrap();
        let loss = weighted(&mut tape, y, 1);
        tape.backward(loss, &mut store).unwrap();
        let once: Vec<Vec<f64>> = mlp.params().iter().map(|&id| store.get(id).grad().unwrap().to_vec()).collect();
        tape.backward(loss, &mut store).unwrap();
        let twice: Vec<Vec<f64>> = mlp.params().iter().map(|&id| store.get(id).grad().unwrap().to_vec()).collect();
        (once, twice)
    };
    let (a1, a2) = grads();
    let (b1, _) = grads();
    assert_eq!(a1, b1);
    for (g1, g2) in a1.iter().zip(&a2) {
        for (x, y) in g1.iter().zip(g2) {
            assert_eq!(2.0 * x, *y);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tanh_softplus_gradients_on_random_inputs(vals in proptest::collection::vec(-2.0f64..2.0, 6)) {
        let x = Tensor::matrix(2, 3, vals).unwrap();
        for op in [(|t: &mut Tape, x: Var| t.tanh(x)) as Op, |t, x| t.softplus(x), |t, x| t.sigmoid(x)] {
            let (an, nu) = input_grads(&x, &op);
            prop_assert!(rel_err(&an, &nu) < 1e-4);
        }
    }

    #[test]
    fn construction_rejects_non_finite(i in 0usize..4, bad in prop_oneof![Just(f64::NAN), Just(f64::INFINITY), Just(f64::NEG_INFINITY)]) {
        let mut v = vec![0.5; 4];
        v[i] = bad;
        prop_assert!(Tensor::matrix(2, 2, v).is_err());
    }
}
