//! Acceptance suite: one test per shipped claim, each ending in a
//! single `criterion N: PASS` line with the measured quantities (run
//! with `--nocapture` to see them; the per-test harness lines double as
//! the pass/fail report). The claims and their pinned tolerances:
//!
//! 1. Synthetic end to end at desk scale (N=200, T=50, 30% bursts, 10
//!    replicates, published synthetic hyperparameters): the model beats
//!    Mean and LOCF on continuous-attribute cross-correlation on every
//!    replicate and beats Mean on average error. Ordinal comparison.
//! 2. Analytic gradients match central finite differences (step 1e-5)
//!    with relative error < 1e-4 on >= 100 parameters (all are checked).
//! 3. A hand-rolled evaluation of the objective on a tiny fixed-weight
//!    model matches the library within 1e-10.
//! 4. Metrics match brute-force references within 1e-9 on 100
//!    randomized instances each.
//! 5. Burst masks: achieved per-attribute rates within 2 points of
//!    {10%, 30%, 50%}; burst lengths in [3,10] except right-boundary
//!    truncation; 10 replicates.
//! 6. Invariants hold on >= 1000 randomized trials each.
//! 7. A full pipeline rerun with identical seeds reproduces the error
//!    and cross-correlation metrics within 1e-6.
//! 8. Published clinical results are documented only (license-gated
//!    data); the patient-file loader is exercised end to end on a
//!    schema-compatible stand-in and emits both metrics.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use shivae::data::{AttributeSchema, HeterogeneousDataset, MaskOverlay, Sequence};
use shivae::impute::impute_dataset;
use shivae::metrics::{
    burst_xcorr, classification_error, evaluate_replicate, nrmse, phi,
};
use shivae::model::{
    elbo, elbo_forward, filter_sequence, kl_categorical_uniform, kl_gaussian_diag, AttrParams,
    Batch, ElboSettings, ModelDims, SeededNoise, ShiVae, ZeroNoise, VAR_FLOOR,
};
use shivae::pipeline::{build_registry, run_pipeline, ExperimentConfig};
use shivae::preprocess::fit_transform_state;
use shivae::synth::{
    derive_seed, generate_mask_suite, sample_hmm_dataset, BurstSpec, HmmConfig,
};
use shivae::tape::Tape;
use shivae::train::{prepare_sequences, train, TrainConfig};

fn pass(n: usize, detail: &str) {
    println!("criterion {n}: PASS - {detail}");
}

// ---------------------------------------------------------------------------
// Criterion 1: synthetic end to end, desk scale
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_synthetic_end_to_end_desk_scale() {
    let root = 20_601u64;
    let ds = sample_hmm_dataset(&HmmConfig::benchmark(200, 50, derive_seed(root, 1))).unwrap();
    let suite = generate_mask_suite(&ds, &BurstSpec::new(0.3, 10, derive_seed(root, 2))).unwrap();
    // published synthetic configuration: 100 epochs, 20 annealing,
    // lr 5e-3, batch 64, K=2, H=10, L=3
    let cfg = TrainConfig { seed: derive_seed(root, 3), ..TrainConfig::default() };

    let methods = ["shi-vae", "mean", "locf"];
    let mut errors: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut xcorrs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (r, overlay) in suite.overlays.iter().enumerate() {
        let outcome = train(&ds, Some(overlay), &cfg).unwrap();
        assert!(outcome.aborted.is_none(), "replicate {r} aborted: {:?}", outcome.aborted);
        let split = &outcome.split;

        let masked_train: Vec<Sequence> = split
            .train
            .iter()
            .map(|&i| ds.sequences[i].with_hidden(&overlay.per_seq[i]).unwrap())
            .collect();
        let masked_train = HeterogeneousDataset::new(ds.schema.clone(), masked_train).unwrap();
        let registry =
            build_registry(Some(&outcome.final_checkpoint), Some(&masked_train), 10).unwrap();

        let test_seqs: Vec<Sequence> =
            split.test.iter().map(|&i| ds.sequences[i].clone()).collect();
        let test_ds = HeterogeneousDataset::new(ds.schema.clone(), test_seqs).unwrap();
        let test_overlay = MaskOverlay {
            per_seq: split.test.iter().map(|&i| overlay.per_seq[i].clone()).collect(),
        };
        let truth: Vec<&Sequence> = split.test.iter().map(|&i| &ds.sequences[i]).collect();
        let hidden: Vec<&Array2<bool>> =
            split.test.iter().map(|&i| &overlay.per_seq[i]).collect();

        let mut replicate_xc = BTreeMap::new();
        for method in methods {
            let results = impute_dataset(
                registry.get(method).unwrap(),
                &test_ds,
                Some(&test_overlay),
                derive_seed(root, 100 + r as u64),
            )
            .unwrap();
            let completed: Vec<&Array2<f64>> = results.iter().map(|res| &res.completed).collect();
            let rep = evaluate_replicate(&ds.schema, &truth, &completed, &hidden).unwrap();
            errors.entry(method).or_default().push(rep.error_avg.unwrap());
            let xc = rep.xcorr_continuous.unwrap();
            xcorrs.entry(method).or_default().push(xc);
            replicate_xc.insert(method, xc);
        }
        // ordinal claim, per replicate: model above both baselines on
        // continuous-attribute cross-correlation
        let model_xc = replicate_xc["shi-vae"];
        for baseline in ["mean", "locf"] {
            assert!(
                model_xc > replicate_xc[baseline],
                "replicate {r}: cross-correlation {model_xc:.4} does not beat {baseline} \
                 ({:.4})",
                replicate_xc[baseline]
            );
        }
    }

    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (err_model, err_mean) = (avg(&errors["shi-vae"]), avg(&errors["mean"]));
    assert!(
        err_model < err_mean,
        "average error {err_model:.4} does not beat the mean baseline ({err_mean:.4})"
    );
    pass(
        1,
        &format!(
            "desk scale, 10 replicates: cross-correlation {:.3} vs mean {:.3} / locf {:.3} \
             (dominant on every replicate); error {:.4} < mean baseline {:.4}",
            avg(&xcorrs["shi-vae"]),
            avg(&xcorrs["mean"]),
            avg(&xcorrs["locf"]),
            err_model,
            err_mean
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: gradient check
// ---------------------------------------------------------------------------

/// Schema used by the gradient and invariant checks: one attribute of
/// each kind.
fn four_kind_schema() -> Vec<AttributeSchema> {
    vec![
        AttributeSchema::real("re"),
        AttributeSchema::positive("po"),
        AttributeSchema::binary("bi"),
        AttributeSchema::categorical("ca", 3),
    ]
}

/// Random encoded batch for the four-kind schema (E = 6: one column
/// each for real/positive/binary, three one-hot columns).
fn random_batch(b: usize, t: usize, rng: &mut ChaCha12Rng) -> Batch {
    let (mut xs, mut obs, mut valid) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..t {
        let mut x = Array2::zeros((b, 6));
        let mut o = Array2::zeros((b, 4));
        for row in 0..b {
            for (d, col) in [(0usize, 0usize), (1, 1), (2, 2)] {
                if rng.random_bool(0.75) {
                    o[(row, d)] = 1.0;
                    x[(row, col)] = if d == 2 {
                        f64::from(rng.random_bool(0.5))
                    } else {
                        rng.random_range(-1.5..1.5)
                    };
                }
            }
            if rng.random_bool(0.75) {
                o[(row, 3)] = 1.0;
                x[(row, 3 + rng.random_range(0..3))] = 1.0;
            }
        }
        xs.push(x);
        obs.push(o);
        valid.push(Array2::from_elem((b, 1), 1.0));
    }
    Batch { x: xs, attr_obs: obs, valid }
}

#[test]
fn criterion_2_gradient_check() {
    let dims = ModelDims { k: 2, h: 4, l: 2, width: 6 };
    let schema = four_kind_schema();
    let (model, mut store) = ShiVae::init(dims, &schema, 31).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(32);
    let batch = random_batch(2, 5, &mut rng);
    let settings = ElboSettings { beta: 0.7, temperature: 0.8 };
    let noise_seed = 33;

    // analytic gradients of the minimized quantity (negative objective)
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape);
    let vars = elbo_forward(
        &model,
        &mut tape,
        &bind,
        &batch,
        settings,
        &mut SeededNoise::new(noise_seed),
    );
    let grads = tape.backward(vars.loss);
    let analytic = bind.collect_grads(&tape, &grads);

    let loss_at = |store: &shivae::nn::ParamStore| -> f64 {
        -elbo(&model, store, &batch, settings, &mut SeededNoise::new(noise_seed))
            .unwrap()
            .total
    };

    let step = 1e-5;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for name in &names {
        let grad = &analytic[name];
        let (nrows, ncols) = store.get(name).dim();
        for idx in 0..nrows * ncols {
            let (r, c) = (idx / ncols, idx % ncols);
            store.get_mut(name)[(r, c)] += step;
            let up = loss_at(&store);
            store.get_mut(name)[(r, c)] -= 2.0 * step;
            let down = loss_at(&store);
            store.get_mut(name)[(r, c)] += step;

            let fd = (up - down) / (2.0 * step);
            let a = grad[(r, c)];
            // relative error with an absolute floor for near-zero grads
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2);
            worst = worst.max(rel);
            assert!(
                rel < 1e-4,
                "{name}[{r},{c}]: analytic {a:.10e} vs finite difference {fd:.10e} (rel {rel:.3e})"
            );
            checked += 1;
        }
    }
    assert!(checked >= 100, "only {checked} parameters checked");
    pass(2, &format!("{checked} parameters checked, worst relative error {worst:.3e}"));
}

// ---------------------------------------------------------------------------
// Criterion 3: objective oracle
// ---------------------------------------------------------------------------

mod oracle {
    //! From-scratch evaluation of the objective with plain loops, used
    //! only to cross-check the tape implementation. Reads weights from
    //! the parameter store; shares nothing with the tape.

    use shivae::nn::ParamStore;

    pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

    pub fn matvec(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
        let w = store.get(&format!("{name}.w"));
        let b = store.get(&format!("{name}.b"));
        assert_eq!(w.nrows(), x.len(), "{name}: input width mismatch");
        (0..w.ncols())
            .map(|j| x.iter().enumerate().map(|(i, &v)| v * w[(i, j)]).sum::<f64>() + b[(0, j)])
            .collect()
    }

    pub fn relu(v: Vec<f64>) -> Vec<f64> {
        v.into_iter().map(|x| x.max(0.0)).collect()
    }

    pub fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    pub fn log_softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        v.iter().map(|&x| x - lse).collect()
    }

    pub fn mlp2(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
        let h = relu(matvec(store, &format!("{prefix}.0"), x));
        matvec(store, &format!("{prefix}.1"), &h)
    }

    /// Mean and floored softplus variance of a trunk/mu/var network.
    pub fn gaussian_net(store: &ParamStore, prefix: &str, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let t = relu(matvec(store, &format!("{prefix}.trunk"), x));
        let mu = matvec(store, &format!("{prefix}.mu"), &t);
        let var = matvec(store, &format!("{prefix}.var"), &t)
            .into_iter()
            .map(|r| softplus(r).max(1e-5))
            .collect();
        (mu, var)
    }

    pub fn concat(parts: &[&[f64]]) -> Vec<f64> {
        parts.iter().flat_map(|p| p.iter().cloned()).collect()
    }

    /// One LSTM update with the fused gate layout [input, forget,
    /// cell, output].
    pub fn lstm(store: &ParamStore, y: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let hd = h.len();
        let pre = matvec(store, "rnn", &concat(&[y, h]));
        let mut h_new = vec![0.0; hd];
        let mut c_new = vec![0.0; hd];
        for j in 0..hd {
            let i_g = sigmoid(pre[j]);
            let f_g = sigmoid(pre[hd + j]);
            let g_c = pre[2 * hd + j].tanh();
            let o_g = sigmoid(pre[3 * hd + j]);
            c_new[j] = f_g * c[j] + i_g * g_c;
            h_new[j] = o_g * c_new[j].tanh();
        }
        (h_new, c_new)
    }
}

#[test]
fn criterion_3_objective_matches_hand_rolled_oracle() {
    // K=1, H=2, L=2, width 3, one real plus one binary attribute, two
    // steps, zero noise (latents at their means, relaxed draw at the
    // tempered posterior)
    let dims = ModelDims { k: 1, h: 2, l: 2, width: 3 };
    let schema = vec![AttributeSchema::real("a"), AttributeSchema::binary("b")];
    let (model, store) = ShiVae::init(dims, &schema, 42).unwrap();
    let (beta, tau) = (0.9, 1.3);

    // step 0: both observed; step 1: real missing (zero-filled), binary
    // observed as zero
    let xs = [[0.7, 1.0], [0.0, 0.0]];
    let obs = [[1.0, 1.0], [0.0, 1.0]];

    let mut h = vec![0.0f64; 2];
    let mut c = vec![0.0f64; 2];
    let (mut recon, mut kl_z, mut kl_s) = (0.0, 0.0, 0.0);
    for t in 0..2 {
        let x = &xs[t][..];
        let log_q_s = oracle::log_softmax(&oracle::matvec(
            &store,
            "phi_s.1",
            &oracle::relu(oracle::matvec(&store, "phi_s.0", &oracle::concat(&[x, &h]))),
        ));
        let s = oracle::log_softmax(&log_q_s.iter().map(|&v| v / tau).collect::<Vec<_>>())
            .iter()
            .map(|&v| v.exp())
            .collect::<Vec<_>>();
        let (mu_p, var_p) = oracle::gaussian_net(&store, "phi_prior", &oracle::concat(&[&h, &s]));
        let feat = oracle::mlp2(&store, "phi_x", x);
        let (mu_q, var_q) =
            oracle::gaussian_net(&store, "phi_enc", &oracle::concat(&[&feat, &h, &s]));
        let z = mu_q.clone();
        let y = oracle::mlp2(&store, "phi_z", &z);
        let dec_in = oracle::concat(&[&y, &s, &h]);

        let (d_mu, d_var) = oracle::gaussian_net(&store, "dec.0", &dec_in);
        let ll_real = -oracle::HALF_LN_2PI
            - 0.5 * (d_var[0].ln() + (x[0] - d_mu[0]).powi(2) / d_var[0]);
        let logit = oracle::matvec(
            &store,
            "dec.1.logit",
            &oracle::relu(oracle::matvec(&store, "dec.1.trunk", &dec_in)),
        )[0];
        let ll_bin = x[1] * logit - oracle::softplus(logit);
        recon += obs[t][0] * ll_real + obs[t][1] * ll_bin;

        kl_z += 0.5
            * ((var_p[0] / var_q[0]).ln() + (var_q[0] + (mu_q[0] - mu_p[0]).powi(2)) / var_p[0]
                - 1.0);
        kl_s += log_q_s
            .iter()
            .map(|&lq| lq.exp() * (lq + 2.0f64.ln()))
            .sum::<f64>();

        let (h_new, c_new) = oracle::lstm(&store, &y, &h, &c);
        h = h_new;
        c = c_new;
    }
    let oracle_total = recon - beta * (kl_z + kl_s);

    let batch = Batch {
        x: xs.iter().map(|r| Array2::from_shape_vec((1, 2), r.to_vec()).unwrap()).collect(),
        attr_obs: obs.iter().map(|r| Array2::from_shape_vec((1, 2), r.to_vec()).unwrap()).collect(),
        valid: vec![Array2::from_elem((1, 1), 1.0); 2],
    };
    let terms = elbo(
        &model,
        &store,
        &batch,
        ElboSettings { beta, temperature: tau },
        &mut ZeroNoise,
    )
    .unwrap();

    for (name, want, got) in [
        ("reconstruction", recon, terms.recon),
        ("continuous KL", kl_z, terms.kl_z),
        ("discrete KL", kl_s, terms.kl_s),
        ("total", oracle_total, terms.total),
    ] {
        assert!(
            (want - got).abs() < 1e-10,
            "{name}: oracle {want:.14} vs library {got:.14}"
        );
    }
    pass(
        3,
        &format!(
            "oracle total {oracle_total:.10} matches library {:.10} (|diff| {:.1e} < 1e-10)",
            terms.total,
            (oracle_total - terms.total).abs()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: metric oracles
// ---------------------------------------------------------------------------

fn ref_burst_xcorr(w: &[f64], w_hat: &[f64]) -> f64 {
    let n = w.len();
    let mu_w = w.iter().sum::<f64>() / n as f64;
    let mu_h = w_hat.iter().sum::<f64>() / n as f64;
    let mut best = f64::NEG_INFINITY;
    for lag in -(n as i64 - 1)..=(n as i64 - 1) {
        let mut acc = 0.0;
        for i in 0..n as i64 {
            let j = i + lag;
            if (0..n as i64).contains(&j) {
                acc += (w[i as usize] - mu_w) * (w_hat[j as usize] - mu_h);
            }
        }
        best = best.max(acc);
    }
    best
}

fn ref_runs(row: &[bool]) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < row.len() {
        if row[i] {
            let start = i;
            while i < row.len() && row[i] {
                i += 1;
            }
            runs.push((start, i));
        } else {
            i += 1;
        }
    }
    runs
}

#[test]
fn criterion_4_metrics_match_brute_force_references() {
    let mut rng = ChaCha12Rng::seed_from_u64(404);
    let mut random_instance = |discrete: bool| {
        let n_seq = rng.random_range(1..4);
        let mut truth = Vec::new();
        let mut imp = Vec::new();
        let mut hid = Vec::new();
        for _ in 0..n_seq {
            let t = rng.random_range(5..15);
            truth.push(
                (0..t)
                    .map(|_| {
                        if discrete {
                            f64::from(rng.random_range(0..3))
                        } else {
                            rng.random_range(-3.0..3.0)
                        }
                    })
                    .collect::<Vec<f64>>(),
            );
            imp.push(
                (0..t)
                    .map(|_| {
                        if discrete {
                            f64::from(rng.random_range(0..3))
                        } else {
                            rng.random_range(-3.0..3.0)
                        }
                    })
                    .collect::<Vec<f64>>(),
            );
            hid.push((0..t).map(|_| rng.random_bool(0.4)).collect::<Vec<bool>>());
        }
        // guarantee at least one hidden cell so the metric is defined
        hid[0][0] = true;
        (truth, imp, hid)
    };

    for _ in 0..100 {
        let (truth, imp, hid) = random_instance(false);
        // range-normalized error over hidden cells
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in &truth {
            for &v in row {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        let (mut sq, mut n) = (0.0, 0usize);
        for ((t_row, i_row), h_row) in truth.iter().zip(&imp).zip(&hid) {
            for ((&t, &i), &h) in t_row.iter().zip(i_row).zip(h_row) {
                if h {
                    sq += (t - i).powi(2);
                    n += 1;
                }
            }
        }
        let want = (sq / n as f64).sqrt() / (hi - lo);
        let got = nrmse(&truth, &imp, &hid).unwrap().unwrap();
        assert!((want - got).abs() < 1e-9, "nrmse {got} vs reference {want}");

        // burst score: per hidden run, lag-maximized centered product,
        // summed and divided by the hidden count
        let (mut total, mut hidden_count) = (0.0, 0usize);
        for ((t_row, i_row), h_row) in truth.iter().zip(&imp).zip(&hid) {
            for (a, b) in ref_runs(h_row) {
                hidden_count += b - a;
                total += ref_burst_xcorr(&t_row[a..b], &i_row[a..b]);
            }
        }
        let want_phi = total / hidden_count as f64;
        let got_phi = phi(&truth, &imp, &hid).unwrap().unwrap();
        assert!(
            (want_phi - got_phi).abs() < 1e-9,
            "burst score {got_phi} vs reference {want_phi}"
        );
    }

    for _ in 0..100 {
        let (truth, imp, hid) = random_instance(true);
        let (mut wrong, mut n) = (0usize, 0usize);
        for ((t_row, i_row), h_row) in truth.iter().zip(&imp).zip(&hid) {
            for ((&t, &i), &h) in t_row.iter().zip(i_row).zip(h_row) {
                if h {
                    n += 1;
                    wrong += usize::from(t != i);
                }
            }
        }
        let want = wrong as f64 / n as f64;
        let got = classification_error(&truth, &imp, &hid).unwrap().unwrap();
        assert!((want - got).abs() < 1e-9, "classification error {got} vs reference {want}");
    }

    // the run-level kernel itself, on standalone random windows
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..12);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let w_hat: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let diff = (burst_xcorr(&w, &w_hat) - ref_burst_xcorr(&w, &w_hat)).abs();
        worst = worst.max(diff);
        assert!(diff < 1e-9, "window correlation differs by {diff}");
    }
    pass(4, &format!("4 metrics x 100 randomized instances, worst |diff| {worst:.2e} (< 1e-9)"));
}

// ---------------------------------------------------------------------------
// Criterion 5: mask protocol
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_mask_protocol_rates_and_lengths() {
    let ds = sample_hmm_dataset(&HmmConfig::benchmark(40, 60, 505)).unwrap();
    let mut rate_worst = 0.0f64;
    let mut runs_seen = 0usize;
    let mut truncated_seen = 0usize;
    for (i, rate) in [0.10, 0.30, 0.50].into_iter().enumerate() {
        let suite =
            generate_mask_suite(&ds, &BurstSpec::new(rate, 10, 600 + i as u64)).unwrap();
        assert_eq!(suite.overlays.len(), 10, "10 replicates required");
        for overlay in &suite.overlays {
            for d in 0..ds.num_attrs() {
                let achieved = overlay.hidden_rate(&ds, d);
                rate_worst = rate_worst.max((achieved - rate).abs());
                assert!(
                    (achieved - rate).abs() <= 0.02 + 1e-12,
                    "attribute {d}: achieved rate {achieved:.4} vs target {rate}"
                );
            }
            // the data is fully observed, so every hidden run is a real
            // burst; all must fit in [3,10], except that a burst placed
            // near the end of a sequence may be truncated below 3 by the
            // right boundary
            for (ov, seq) in overlay.per_seq.iter().zip(&ds.sequences) {
                for d in 0..ds.num_attrs() {
                    let col: Vec<bool> = (0..seq.len()).map(|t| ov[(t, d)]).collect();
                    for (a, b) in ref_runs(&col) {
                        let len = b - a;
                        runs_seen += 1;
                        assert!(
                            len <= 10,
                            "burst of length {len} at ({}, t={a}, attr {d})",
                            seq.id
                        );
                        if len < 3 {
                            truncated_seen += 1;
                            assert_eq!(
                                b,
                                seq.len(),
                                "interior burst of length {len} at ({}, t={a}, attr {d})",
                                seq.id
                            );
                        }
                    }
                }
            }
        }
    }
    pass(
        5,
        &format!(
            "rates 10/30/50% within {:.2} points (limit 2.0); {runs_seen} bursts all of length \
             <= 10, {truncated_seen} truncated below 3 only at a sequence end; 10 replicates \
             per rate",
            rate_worst * 100.0
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: invariant suite
// ---------------------------------------------------------------------------

/// Random heterogeneous dataset over the four-kind schema with native
/// missingness but every attribute observed at least once per sequence.
fn random_dataset(seed: u64, n_seqs: usize) -> HeterogeneousDataset {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let schema = four_kind_schema();
    let mut seqs = Vec::new();
    for i in 0..n_seqs {
        let t_len = rng.random_range(6..12);
        let mut values = Array2::from_elem((t_len, 4), f64::NAN);
        let mut mask = Array2::from_elem((t_len, 4), false);
        for d in 0..4 {
            for t in 0..t_len {
                if rng.random_bool(0.8) {
                    values[(t, d)] = match d {
                        0 => rng.random_range(-2.0..2.0),
                        1 => rng.random_range(0.1..5.0),
                        2 => f64::from(rng.random_bool(0.5)),
                        _ => f64::from(rng.random_range(0..3)),
                    };
                    mask[(t, d)] = true;
                }
            }
            if (0..t_len).all(|t| !mask[(t, d)]) {
                let t = rng.random_range(0..t_len);
                values[(t, d)] = if d == 1 { 1.0 } else { 0.0 };
                mask[(t, d)] = true;
            }
        }
        seqs.push(Sequence::new(format!("s{i}"), values, mask).unwrap());
    }
    HeterogeneousDataset::new(schema, seqs).unwrap()
}

#[test]
fn criterion_6_invariant_suite() {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();

    // KL terms are non-negative; the discrete one is bounded by ln L
    let mut rng = ChaCha12Rng::seed_from_u64(606);
    for _ in 0..1000 {
        let k = rng.random_range(1..5);
        let arr = |rng: &mut ChaCha12Rng, lo: f64, hi: f64| {
            Array2::from_shape_fn((1, k), |_| rng.random_range(lo..hi))
        };
        let mut tape = Tape::new();
        let mu_q = tape.input(arr(&mut rng, -3.0, 3.0));
        let var_q = tape.input(arr(&mut rng, 1e-4, 4.0));
        let mu_p = tape.input(arr(&mut rng, -3.0, 3.0));
        let var_p = tape.input(arr(&mut rng, 1e-4, 4.0));
        let kl = kl_gaussian_diag(&mut tape, mu_q, var_q, mu_p, var_p);
        assert!(tape.value(kl)[(0, 0)] >= -1e-12, "negative continuous KL");

        let l = rng.random_range(2..6);
        let logits = Array2::from_shape_fn((1, l), |_| rng.random_range(-4.0..4.0));
        let mut tape = Tape::new();
        let v = tape.input(logits);
        let log_q = tape.log_softmax(v);
        let kl = kl_categorical_uniform(&mut tape, log_q);
        let val = tape.value(kl)[(0, 0)];
        assert!(
            (-1e-12..=(l as f64).ln() + 1e-12).contains(&val),
            "discrete KL {val} outside [0, ln {l}]"
        );
        *counts.entry("kl bounds").or_default() += 2;
    }

    // decoded likelihood parameters are always valid
    let schema = four_kind_schema();
    let mut rng = ChaCha12Rng::seed_from_u64(616);
    let mut current: Option<(ShiVae, shivae::nn::ParamStore)> = None;
    for trial in 0..1000u64 {
        if trial % 20 == 0 {
            // fresh random weights every 20 trials
            let dims = ModelDims { k: 2, h: 3, l: 3, width: 5 };
            current = Some(ShiVae::init(dims, &schema, 7000 + trial).unwrap());
        }
        let (model, store) = current.as_ref().unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let y = tape.input(Array2::from_shape_fn((1, 5), |_| rng.random_range(-2.0..2.0)));
        let s = tape.input(Array2::from_shape_fn((1, 3), |_| rng.random_range(-3.0..3.0)));
        let s = tape.softmax(s);
        let h = tape.input(Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0)));
        for p in model.decode_step(&mut tape, &bind, y, s, h) {
            match p {
                AttrParams::Gaussian { var, .. } => {
                    let v = tape.value(var)[(0, 0)];
                    assert!(v >= VAR_FLOOR, "variance {v} under the floor");
                }
                AttrParams::Bernoulli { logit } => {
                    let l = tape.value(logit)[(0, 0)];
                    assert!(l.is_finite(), "non-finite logit");
                    let p = shivae::tape::sigmoid_scalar(l);
                    assert!(p > 0.0 && p < 1.0, "probability {p} outside (0,1)");
                }
                AttrParams::Categorical { log_probs } => {
                    let row = tape.value(log_probs);
                    let mass: f64 = row.iter().map(|&lp| lp.exp()).sum();
                    assert!((mass - 1.0).abs() <= 1e-6, "probabilities sum to {mass}");
                }
            }
        }
        *counts.entry("likelihood parameters").or_default() += 1;
    }

    // the objective never reads values hidden by an overlay
    let dims = ModelDims { k: 2, h: 3, l: 2, width: 5 };
    let (model, store) = ShiVae::init(dims, &schema, 626).unwrap();
    let mut rng = ChaCha12Rng::seed_from_u64(627);
    for trial in 0..1000 {
        let ds = random_dataset(8000 + trial, 1);
        let seq = &ds.sequences[0];
        // hide a random slice of observed cells, but keep at least one
        // per attribute so scaling stays fittable
        let mut hidden = Array2::from_elem(seq.values.dim(), false);
        for ((t, d), &m) in seq.mask.indexed_iter() {
            if m && rng.random_bool(0.3) {
                hidden[(t, d)] = true;
            }
        }
        for d in 0..4 {
            if (0..seq.len()).all(|t| !seq.mask[(t, d)] || hidden[(t, d)]) {
                let t = (0..seq.len()).find(|&t| seq.mask[(t, d)]).unwrap();
                hidden[(t, d)] = false;
            }
        }
        let masked = seq.with_hidden(&hidden).unwrap();
        // mutate the hidden cells of a copy (kind-valid junk values)
        let mut other = seq.clone();
        for ((t, d), &h) in hidden.indexed_iter() {
            if h {
                other.values[(t, d)] = match d {
                    0 => other.values[(t, d)] * 2.0 + 1.0,
                    1 => other.values[(t, d)] + 3.0,
                    2 => 1.0 - other.values[(t, d)],
                    _ => (other.values[(t, d)] + 1.0) % 3.0,
                };
            }
        }
        let masked_other = other.with_hidden(&hidden).unwrap();

        let total_of = |s: &Sequence| {
            let view =
                HeterogeneousDataset::new(schema.clone(), vec![s.clone()]).unwrap();
            let ts = fit_transform_state(&view, None).unwrap();
            let prep = prepare_sequences(&ts, &view.sequences).unwrap();
            let batch = Batch {
                x: (0..s.len()).map(|t| prep[0].x.row(t).insert_axis(ndarray::Axis(0)).to_owned()).collect(),
                attr_obs: (0..s.len())
                    .map(|t| prep[0].attr_obs.row(t).insert_axis(ndarray::Axis(0)).to_owned())
                    .collect(),
                valid: vec![Array2::from_elem((1, 1), 1.0); s.len()],
            };
            elbo(&model, &store, &batch, ElboSettings::default(), &mut SeededNoise::new(99))
                .unwrap()
                .total
        };
        let (a, b) = (total_of(&masked), total_of(&masked_other));
        assert!(
            (a - b).abs() <= 1e-12,
            "objective read a hidden value: {a} vs {b} (trial {trial})"
        );
        *counts.entry("hidden-value independence").or_default() += 1;
    }

    // padded steps contribute exactly nothing
    let mut rng = ChaCha12Rng::seed_from_u64(636);
    for _ in 0..1000 {
        let t_real = rng.random_range(2..6);
        let pad = rng.random_range(1..4);
        let batch = random_batch(1, t_real, &mut rng);
        let mut padded = batch.clone();
        for _ in 0..pad {
            padded.x.push(Array2::zeros((1, 6)));
            padded.attr_obs.push(Array2::zeros((1, 4)));
            padded.valid.push(Array2::zeros((1, 1)));
        }
        // same noise prefix: real steps draw first in both layouts
        let a = elbo(&model, &store, &batch, ElboSettings::default(), &mut SeededNoise::new(5))
            .unwrap();
        let b = elbo(&model, &store, &padded, ElboSettings::default(), &mut SeededNoise::new(5))
            .unwrap();
        assert!(
            (a.total - b.total).abs() <= 1e-12,
            "padded steps changed the objective: {} vs {}",
            a.total,
            b.total
        );
        *counts.entry("padded-step neutrality").or_default() += 1;
    }

    // every imputer preserves observed cells bit for bit
    let base = random_dataset(646, 4);
    let ckpt = train(
        &base,
        None,
        &TrainConfig {
            epochs: 0,
            batch_size: 4,
            k: 2,
            h: 3,
            l: 2,
            width: 5,
            seed: 647,
            ..TrainConfig::default()
        },
    )
    .unwrap()
    .final_checkpoint;
    for trial in 0..120 {
        let ds = random_dataset(9000 + trial, 3);
        let view = HeterogeneousDataset::new(ds.schema.clone(), ds.sequences.clone()).unwrap();
        let registry = build_registry(Some(&ckpt), Some(&view), 2).unwrap();
        for method in ["shi-vae", "mean", "locf"] {
            let results =
                impute_dataset(registry.get(method).unwrap(), &ds, None, trial).unwrap();
            for (seq, res) in ds.sequences.iter().zip(&results) {
                for ((t, d), &m) in seq.mask.indexed_iter() {
                    if m {
                        assert_eq!(
                            res.completed[(t, d)].to_bits(),
                            seq.values[(t, d)].to_bits(),
                            "{method} rewrote observed cell ({}, t={t}, attr {d})",
                            seq.id
                        );
                    }
                }
                *counts.entry("observed-cell preservation").or_default() += 1;
            }
        }
    }

    // filtering is causal: the params at step t ignore later inputs
    let mut rng = ChaCha12Rng::seed_from_u64(656);
    for trial in 0..1000 {
        let t_len = 6;
        let cut = rng.random_range(1..t_len);
        let mk = |rng: &mut ChaCha12Rng| {
            Array2::from_shape_fn((t_len, 6), |_| rng.random_range(-1.0..1.0))
        };
        let a = mk(&mut rng);
        let mut b = a.clone();
        for t in cut..t_len {
            for d in 0..6 {
                b[(t, d)] = rng.random_range(-1.0..1.0);
            }
        }
        let obs = Array2::from_shape_fn((t_len, 4), |_| f64::from(rng.random_bool(0.7)));
        let pa =
            filter_sequence(&model, &store, &a, &obs, &mut SeededNoise::new(trial), false)
                .unwrap();
        let pb =
            filter_sequence(&model, &store, &b, &obs, &mut SeededNoise::new(trial), false)
                .unwrap();
        for t in 0..cut {
            assert_eq!(pa[t], pb[t], "step {t} params changed by inputs after {cut}");
        }
        *counts.entry("temporal causality").or_default() += 1;
    }

    let summary: Vec<String> =
        counts.iter().map(|(name, n)| format!("{name} x{n}")).collect();
    for (name, n) in &counts {
        assert!(*n >= 1000, "{name}: only {n} trials");
    }
    pass(6, &summary.join(", "));
}

// ---------------------------------------------------------------------------
// Criterion 7: pipeline determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_pipeline_rerun_determinism() {
    let mut cfg = ExperimentConfig::named("synthetic-desk").unwrap();
    cfg.seed = 707;
    cfg.num_sequences = Some(30);
    cfg.seq_len = Some(30);
    cfg.num_masks = 3;
    cfg.samples = 3;
    cfg.train = TrainConfig {
        epochs: 8,
        annealing_epochs: 4,
        batch_size: 16,
        width: 16,
        ..TrainConfig::default()
    };

    let dir = tempfile::tempdir().unwrap();
    let a = run_pipeline(&cfg, &dir.path().join("a")).unwrap();
    let b = run_pipeline(&cfg, &dir.path().join("b")).unwrap();

    let mut worst = 0.0f64;
    for (method, summary_a) in &a.metrics {
        let summary_b = &b.metrics[method];
        for (metric, x, y) in [
            ("error", summary_a.error, summary_b.error),
            ("xcorr", summary_a.xcorr, summary_b.xcorr),
        ] {
            let (x, y) = (x.unwrap(), y.unwrap());
            let diff = (x.mean - y.mean).abs().max((x.std - y.std).abs());
            worst = worst.max(diff);
            assert!(
                diff <= 1e-6,
                "{method}/{metric} drifted across reruns: {} vs {}",
                x.mean,
                y.mean
            );
        }
    }
    assert_eq!(a.artifacts, b.artifacts, "artifact checksums drifted across reruns");
    pass(
        7,
        &format!(
            "3-replicate pipeline rerun: worst metric drift {worst:.1e} (limit 1e-6); all {} \
             artifact checksums identical",
            a.artifacts.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: clinical-format loader; published numbers documented only
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_clinical_format_loader_end_to_end() {
    use shivae::physionet::{
        load_physionet_format, synthetic_standin, write_physionet_format, PHYSIONET_SEQ_LEN,
    };

    // the real 12,000-patient corpus is license-gated, so the published
    // test-set numbers cannot be recomputed here; they are recorded for
    // reference and the full path is exercised on a stand-in instead
    let published_error = (0.064, 0.003);
    let published_xcorr = (38.061, 5.000);

    let standin = synthetic_standin(24, 808).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_physionet_format(&standin, dir.path()).unwrap();
    let loaded = load_physionet_format(dir.path()).unwrap();
    let ds = loaded.dataset;
    assert_eq!(ds.num_attrs(), 35, "35 monitored variables");
    assert!(ds.sequences.iter().all(|s| s.len() == PHYSIONET_SEQ_LEN));

    // small model, a few epochs: enough to prove the loaded data flows
    // through training, imputation, and both metrics
    let suite = generate_mask_suite(&ds, &BurstSpec::new(0.2, 2, 809)).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        annealing_epochs: 2,
        batch_size: 8,
        k: 8,
        h: 8,
        l: 4,
        width: 16,
        seed: 810,
        ..TrainConfig::default()
    };
    let outcome = train(&ds, Some(&suite.overlays[0]), &cfg).unwrap();
    let registry = build_registry(Some(&outcome.final_checkpoint), None, 2).unwrap();
    let results = impute_dataset(
        registry.get("shi-vae").unwrap(),
        &ds,
        Some(&suite.overlays[0]),
        811,
    )
    .unwrap();
    let truth: Vec<&Sequence> = ds.sequences.iter().collect();
    let completed: Vec<&Array2<f64>> = results.iter().map(|r| &r.completed).collect();
    let hidden: Vec<&Array2<bool>> = suite.overlays[0].per_seq.iter().collect();
    let rep = evaluate_replicate(&ds.schema, &truth, &completed, &hidden).unwrap();

    let err = rep.error_avg.expect("error metric must be emitted");
    let xc = rep.xcorr_avg.expect("cross-correlation metric must be emitted");
    assert!(err.is_finite() && xc.is_finite());
    pass(
        8,
        &format!(
            "documented only: published clinical test-set results {:.3} +/- {:.3} error, \
             {:.3} +/- {:.3} cross-correlation (license-gated data; same for the private \
             monitoring corpus); stand-in loader round trip + train + impute emitted error \
             {err:.3} and cross-correlation {xc:.3}",
            published_error.0, published_error.1, published_xcorr.0, published_xcorr.1
        ),
    );
}
