//! Independent oracles shared by the core integration tests and the
//! acceptance suite. Nothing here calls the code under test except to
//! build tape graphs for the primitive gradient checks.

#![allow(dead_code)]

use opsc_core::autodiff::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor, Var};
use opsc_core::corpus::{ClfBatch, ClfExample, LmBatch, Truncate};
use opsc_core::metrics::roc_curve;
use opsc_core::model::{lstm_cell_step, Dropouts, LstmState, Mode, Model, ModelConfig, ModelKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One LSTM step written as plain scalar loops. Gate blocks are laid out
/// column-wise as input, forget, output, cell.
pub struct NaiveLstm<'a> {
    pub w_ih: &'a [Vec<f64>],
    pub w_hh: &'a [Vec<f64>],
    pub bias: &'a [f64],
}

impl NaiveLstm<'_> {
    pub fn step(&self, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hid = h.len();
        let mut z = self.bias.to_vec();
        for (j, zj) in z.iter_mut().enumerate() {
            for (k, &xk) in x.iter().enumerate() {
                *zj += xk * self.w_ih[k][j];
            }
            for (k, &hk) in h.iter().enumerate() {
                *zj += hk * self.w_hh[k][j];
            }
        }
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h_out = vec![0.0; hid];
        let mut c_out = vec![0.0; hid];
        for u in 0..hid {
            let i = sig(z[u]);
            let f = sig(z[hid + u]);
            let o = sig(z[2 * hid + u]);
            let g = z[3 * hid + u].tanh();
            c_out[u] = f * c[u] + i * g;
            h_out[u] = o * c_out[u].tanh();
        }
        (h_out, c_out)
    }
}

/// AUC by counting every (positive, negative) pair; ties score one half.
pub fn pair_count_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Learning rates on a log grid over `[lo, hi]` for which one gradient step
/// on `0.5 * a * w^2` from `w0` lowers the objective.
pub fn quadratic_descent_grid(a: f64, w0: f64, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let f = |w: f64| 0.5 * a * w * w;
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .filter(|&lr| f(w0 - lr * a * w0) < f(w0))
        .collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::uniform(rows, cols, 1.0, rng)
}

/// Entries bounded away from zero so relu never sits on its kink.
fn off_kink(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_rows(rows, cols, data)
}

/// Contract an output with fixed random weights so every output element
/// gets a distinct upstream gradient.
fn project(tape: &mut Tape<f64>, v: Var, seed: u64) -> opsc_core::Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_tensor(&mut rng, shape[0], shape[1]));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

type Build = fn(&mut Tape<f64>, &[Var]) -> opsc_core::Result<Var>;

/// Name, input shapes, whether inputs must avoid zero, graph builder.
type Case = (&'static str, Vec<(usize, usize)>, bool, Build);

/// Finite-difference check of every tape primitive. Returns the report for
/// each named case.
pub fn primitive_reports() -> Vec<(&'static str, GradCheckReport)> {
    let cases: Vec<Case> = vec![
        ("matmul", vec![(3, 4), (4, 2)], false, |t, v| t.matmul(v[0], v[1])),
        ("matmul_nt", vec![(3, 4), (5, 4)], false, |t, v| t.matmul_nt(v[0], v[1])),
        ("add", vec![(3, 4), (3, 4)], false, |t, v| t.add(v[0], v[1])),
        ("sub", vec![(3, 4), (3, 4)], false, |t, v| t.sub(v[0], v[1])),
        ("mul", vec![(3, 4), (3, 4)], false, |t, v| t.mul(v[0], v[1])),
        ("add_row", vec![(3, 4), (1, 4)], false, |t, v| t.add_row(v[0], v[1])),
        ("scale", vec![(3, 4)], false, |t, v| Ok(t.scale(v[0], -1.7))),
        ("sigmoid", vec![(3, 4)], false, |t, v| Ok(t.sigmoid(v[0]))),
        ("tanh", vec![(3, 4)], false, |t, v| Ok(t.tanh(v[0]))),
        ("relu", vec![(3, 4)], true, |t, v| Ok(t.relu(v[0]))),
        ("log_softmax", vec![(3, 5)], false, |t, v| Ok(t.log_softmax(v[0]))),
        ("cross_entropy", vec![(4, 5)], false, |t, v| t.cross_entropy(v[0], &[1, 0, 4, 2], Some(0))),
        ("embedding", vec![(6, 3)], false, |t, v| t.embedding(v[0], &[5, 0, 2, 5])),
        ("concat_cols", vec![(3, 2), (3, 4)], false, |t, v| t.concat_cols(&[v[0], v[1]])),
        ("concat_rows", vec![(2, 3), (4, 3)], false, |t, v| t.concat_rows(&[v[0], v[1]])),
        ("slice_cols", vec![(3, 6)], false, |t, v| t.slice_cols(v[0], 1, 4)),
        ("slice_rows", vec![(6, 3)], false, |t, v| t.slice_rows(v[0], 2, 5)),
        ("masked_mean_over_time", vec![(2, 3), (2, 3), (2, 3)], false, |t, v| {
            t.masked_mean_over_time(v, &[3, 2])
        }),
        ("masked_max_over_time", vec![(2, 3), (2, 3), (2, 3)], false, |t, v| {
            t.masked_max_over_time(v, &[3, 1])
        }),
        ("select_last", vec![(2, 3), (2, 3), (2, 3)], false, |t, v| t.select_last(v, &[2, 3])),
        ("apply_mask", vec![(3, 4)], false, |t, v| {
            let mask = Tensor::from_f64(3, 4, &[1., 0., 1., 1., 0., 1., 1., 0., 1., 1., 0., 1.]);
            t.apply_mask(v[0], mask, 1.5)
        }),
        ("apply_mask_rows", vec![(3, 4)], false, |t, v| {
            t.apply_mask(v[0], Tensor::from_f64(3, 1, &[1., 0., 1.]), 2.0)
        }),
        ("sum", vec![(3, 4)], false, |t, v| Ok(t.sum(v[0]))),
        ("mean", vec![(3, 4)], false, |t, v| Ok(t.mean(v[0]))),
    ];

    let mut out = Vec::new();
    for (case, (name, shapes, kinked, build)) in cases.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + case as u64);
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let t = if kinked { off_kink(&mut rng, r, c) } else { rand_tensor(&mut rng, r, c) };
                store.add(format!("{name}.{i}"), t, 0).unwrap()
            })
            .collect();
        let opts = GradCheckOptions {
            max_coords_per_param: usize::MAX,
            ..GradCheckOptions::default()
        };
        let report = grad_check(
            &mut store,
            &ids,
            |tape, s| {
                let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
                let y = build(tape, &vars)?;
                if tape.shape(y) == [1, 1] {
                    Ok(y)
                } else {
                    project(tape, y, 7)
                }
            },
            opts,
        )
        .unwrap_or_else(|e| panic!("{name}: {e}"));
        out.push((name, report));
    }
    out
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn flat(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// Largest deviation of `lstm_cell_step` from [`NaiveLstm`] over random
/// instances of random shape.
pub fn lstm_oracle_deviation(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (b, d, h) = (rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6));
        let x = matrix(&mut rng, b, d);
        let h0 = matrix(&mut rng, b, h);
        let c0 = matrix(&mut rng, b, h);
        let w_ih = matrix(&mut rng, d, 4 * h);
        let w_hh = matrix(&mut rng, h, 4 * h);
        let bias = matrix(&mut rng, 1, 4 * h);

        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(Tensor::from_f64(b, d, &flat(&x)));
        let hv = tape.constant(Tensor::from_f64(b, h, &flat(&h0)));
        let cv = tape.constant(Tensor::from_f64(b, h, &flat(&c0)));
        let wi = tape.constant(Tensor::from_f64(d, 4 * h, &flat(&w_ih)));
        let wh = tape.constant(Tensor::from_f64(h, 4 * h, &flat(&w_hh)));
        let bv = tape.constant(Tensor::from_f64(1, 4 * h, &bias[0]));
        let (h1, c1) = lstm_cell_step(&mut tape, xv, hv, cv, wi, wh, bv).unwrap();

        let oracle = NaiveLstm {
            w_ih: &w_ih,
            w_hh: &w_hh,
            bias: &bias[0],
        };
        for r in 0..b {
            let (eh, ec) = oracle.step(&x[r], &h0[r], &c0[r]);
            for u in 0..h {
                worst = worst.max((tape.value(h1).get(r, u) - eh[u]).abs());
                worst = worst.max((tape.value(c1).get(r, u) - ec[u]).abs());
            }
        }
    }
    worst
}

/// True when a zero-weight cell maps nonzero inputs and state to exactly
/// zero hidden and cell outputs.
pub fn zero_weight_cell_is_zero() -> bool {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::filled(2, 3, 0.7));
    let h = tape.constant(Tensor::filled(2, 4, -0.3));
    let c = tape.constant(Tensor::zeros(2, 4));
    let wi = tape.constant(Tensor::zeros(3, 16));
    let wh = tape.constant(Tensor::zeros(4, 16));
    let b = tape.constant(Tensor::zeros(1, 16));
    let (h1, c1) = lstm_cell_step(&mut tape, x, h, c, wi, wh, b).unwrap();
    tape.value(h1).data().iter().all(|&v| v == 0.0) && tape.value(c1).data().iter().all(|&v| v == 0.0)
}

/// Largest gap between the library AUC and [`pair_count_auc`] over random
/// trials of at most `max_n` samples with frequent score ties.
pub fn auc_oracle_deviation(trials: usize, max_n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.gen_range(2..=max_n);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..8u8)) / 8.0).collect();
        let mut positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        let got = roc_curve(&scores, &positive).unwrap().auc;
        let expect = pair_count_auc(&scores, &positive).unwrap();
        worst = worst.max((got - expect).abs());
    }
    worst
}

fn tiny_config(dropout: bool) -> ModelConfig {
    ModelConfig {
        emb_size: 4,
        hidden_size: 3,
        n_layers: 2,
        head_hidden: 5,
        dropouts: if dropout { Dropouts::default() } else { Dropouts::none() },
        ..ModelConfig::desk(10)
    }
}

/// Re-draw every parameter from U(-0.8, 0.8) so activations and gradients
/// are far from zero.
fn spread(m: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.store.iter_mut() {
        let (r, c) = (p.tensor.rows(), p.tensor.cols());
        p.tensor = Tensor::uniform(r, c, 0.8, &mut rng);
    }
}

fn with_store(m: &Model<f64>, store: &ParamStore<f64>) -> Model<f64> {
    Model {
        store: store.clone(),
        ..m.clone()
    }
}

fn model_check<F>(m: &Model<f64>, loss: F) -> GradCheckReport
where
    F: Fn(&Model<f64>, &mut Tape<f64>) -> opsc_core::Result<Var>,
{
    let ids: Vec<_> = m.store.ids().collect();
    let mut store = m.store.clone();
    grad_check(&mut store, &ids, |tape, s| loss(&with_store(m, s), tape), GradCheckOptions::default()).unwrap()
}

/// Gradient check of a two-layer language model unrolled for `bptt` steps.
/// With `dropout` every dropout is active; the masks are drawn from the same
/// seed on each evaluation so they stay fixed.
pub fn lm_report(bptt: usize, dropout: bool) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut m = Model::<f64>::new(tiny_config(dropout), ModelKind::Lm, [0; 32], &mut rng).unwrap();
    spread(&mut m, 2);
    let tokens: Vec<usize> = (0..2 * bptt + 1).map(|i| 2 + i % 8).collect();
    let b = LmBatch {
        inputs: tokens[..2 * bptt].to_vec(),
        targets: tokens[1..].to_vec(),
        batch_size: 2,
        bptt,
    };
    model_check(&m, |mm, tape| {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let mode = if dropout { Mode::Train(&mut r) } else { Mode::Eval };
        Ok(mm.lm_forward(tape, &b, &LstmState::zeros(mm, 2), mode)?.loss)
    })
}

/// Gradient check of the full classifier (encoder, pooling and head) on a
/// ragged batch, with fixed dropout masks when `dropout` is set.
pub fn classifier_report(dropout: bool) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut m = Model::<f64>::new(tiny_config(dropout), ModelKind::Clf, [0; 32], &mut rng).unwrap();
    spread(&mut m, if dropout { 1 } else { 3 });
    let ex = [
        ClfExample { ids: vec![2, 5, 6, 7, 3], label: 0 },
        ClfExample { ids: vec![2, 4, 4], label: 3 },
        ClfExample { ids: vec![2, 8, 9, 3], label: 2 },
    ];
    let refs: Vec<&ClfExample> = ex.iter().collect();
    let b = ClfBatch::from_examples(&refs, vec![0, 1, 2], 100, Truncate::Head);
    model_check(&m, |mm, tape| {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mode = if dropout { Mode::Train(&mut r) } else { Mode::Eval };
        Ok(mm.clf_forward(tape, &b, mode)?.loss)
    })
}
