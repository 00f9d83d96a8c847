use m2vae::autodiff::{ParamId, ParamStore, Tape};
use m2vae::tensor::Tensor;
use proptest::prelude::*;

/// `Σ [tanh(X W + b) · C] − KL(N(m, e^v) ‖ N(0, I)) + log N(y; sigmoid(X W), e^v)` summed.
fn objective(store: &ParamStore<f64>, ids: [ParamId; 4], x: &Tensor<f64>, c: &Tensor<f64>, y: &Tensor<f64>) -> (Tape<f64>, m2vae::autodiff::Var) {
    let mut t = Tape::new();
    let [w, b, m, v] = ids.map(|id| t.param(store, id));
    let xv = t.constant(x.clone());
    let cv = t.constant(c.clone());
    let yv = t.constant(y.clone());
    let xw = t.matmul(xv, w);
    let h = t.add_bias(xw, b);
    let h = t.tanh(h);
    let hc = t.mul(h, cv);
    let s1 = t.sum(hc);
    let kl = t.kl_standard(m, v);
    let kl = t.sum(kl);
    let p = t.sigmoid(xw);
    let lp = t.gaussian_log_prob(yv, p, v);
    let lp = t.sum(lp);
    let a = t.sub(s1, kl);
    let out = t.add(a, lp);
    (t, out)
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-1.5f64..1.5, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_matches_central_differences(
        x in matrix(3, 2), w in matrix(2, 4), b in matrix(1, 4), c in matrix(3, 4),
        m in matrix(3, 4), v in matrix(3, 4), y in matrix(3, 4),
    ) {
        let mut store = ParamStore::new();
        let ids = [store.add("w", w), store.add("b", b), store.add("m", m), store.add("v", v)];
        let (tape, out) = objective(&store, ids, &x, &c, &y);
        let grads = tape.backward(out, &store);
        let h = 1e-5;
        for id in ids {
            for k in 0..store.value(id).len() {
                let mut plus = store.clone();
                plus.value_mut(id).data_mut()[k] += h;
                let mut minus = store.clone();
                minus.value_mut(id).data_mut()[k] -= h;
                let f = |s: &ParamStore<f64>| { let (t, o) = objective(s, ids, &x, &c, &y); t.value(o).item() };
                let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
                let analytic = grads.get(id).data()[k];
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                prop_assert!(err < 1e-5, "{} at {}: {} vs {}", store.get(id).name, k, analytic, numeric);
            }
        }
    }

    #[test]
    fn fan_out_accumulates(w in matrix(2, 3)) {
        let mut store = ParamStore::new();
        let id = store.add("w", w.clone());
        let mut t = Tape::new();
        let p = t.param(&store, id);
        let sq = t.mul(p, p);
        let a = t.sum(sq);
        let b = t.sum(p);
        let b3 = t.scale(b, 3.0);
        let out = t.add(a, b3);
        let g = t.backward(out, &store);
        for (gi, wi) in g.get(id).data().iter().zip(w.data()) {
            prop_assert!((gi - (2.0 * wi + 3.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn detached_branches_carry_no_gradient(w in matrix(2, 2)) {
        let mut store = ParamStore::new();
        let id = store.add("w", w);
        let mut t = Tape::new();
        let p = t.param(&store, id);
        let d = t.detach(p);
        let e = t.exp(d);
        let out = t.sum(e);
        prop_assert!(t.backward(out, &store).get(id).data().iter().all(|&g| g == 0.0));
    }
}
