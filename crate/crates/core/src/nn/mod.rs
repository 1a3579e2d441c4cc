//! Minimal reverse-mode autodiff: f64 tensors, a define-by-run tape, the
//! layer set needed by the generative and embedding networks, and Adam.

pub mod adam;
pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod layers;
pub mod params;
pub mod tensor;

pub use adam::Adam;
pub use graph::{Graph, Var};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Numeric gradient of `f` w.r.t. every element of every trainable entry.
    fn numeric_grads(
        store: &mut ParamStore,
        mut f: impl FnMut(&mut ParamStore) -> f64,
        h: f64,
    ) -> Vec<Vec<f64>> {
        let n_entries = store.len();
        let mut out = Vec::new();
        for i in 0..n_entries {
            if !store.entries()[i].trainable {
                out.push(vec![]);
                continue;
            }
            let id = ParamId(i);
            let numel = store.value(id).numel();
            let mut g = Vec::with_capacity(numel);
            for j in 0..numel {
                let orig = store.value(id).data()[j];
                store.value_mut(id).data_mut()[j] = orig + h;
                let fp = f(store);
                store.value_mut(id).data_mut()[j] = orig - h;
                let fm = f(store);
                store.value_mut(id).data_mut()[j] = orig;
                g.push((fp - fm) / (2.0 * h));
            }
            out.push(g);
        }
        out
    }

    #[test]
    fn add_mul_chain_matches_fd() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", init::normal(&mut rng(1), &[3, 4], 1.0));
        let b = ps.add("b", init::normal(&mut rng(2), &[3, 4], 1.0));

        let run = |ps: &mut ParamStore| -> f64 {
            let mut g = Graph::new();
            let bound = ps.bind(&mut g);
            let x = g.mul(bound.var(a), bound.var(b));
            let y = g.add(x, bound.var(a));
            let z = g.square(y);
            let l = g.mean(z);
            g.value(l).item()
        };

        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let x = g.mul(bound.var(a), bound.var(b));
        let y = g.add(x, bound.var(a));
        let z = g.square(y);
        let l = g.mean(z);
        g.backward(l);
        let ga = g.grad(bound.var(a)).unwrap().data().to_vec();
        let gb = g.grad(bound.var(b)).unwrap().data().to_vec();

        let num = numeric_grads(&mut ps, run, 1e-5);
        for (an, nu) in ga.iter().zip(&num[0]) {
            assert!(gradcheck::rel_error(*an, *nu) < 1e-6, "{an} vs {nu}");
        }
        for (an, nu) in gb.iter().zip(&num[1]) {
            assert!(gradcheck::rel_error(*an, *nu) < 1e-6, "{an} vs {nu}");
        }
    }

    #[test]
    fn conv2d_matches_fd() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", init::normal(&mut rng(3), &[3, 2, 3, 3], 0.5));
        let b = ps.add("b", init::normal(&mut rng(4), &[3], 0.5));
        let x_data = init::normal(&mut rng(5), &[2, 2, 5, 5], 1.0);

        let build = |ps: &ParamStore, g: &mut Graph| -> Var {
            let bound = ps.bind(g);
            let x = g.leaf(x_data.clone());
            let y = g.conv2d(x, bound.var(w), Some(bound.var(b)), 2, 1);
            let t = g.tanh(y);
            g.mean(t)
        };

        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let x = g.leaf(x_data.clone());
        let y = g.conv2d(x, bound.var(w), Some(bound.var(b)), 2, 1);
        let t = g.tanh(y);
        let l = g.mean(t);
        g.backward(l);
        let gw = g.grad(bound.var(w)).unwrap().data().to_vec();
        let gb = g.grad(bound.var(b)).unwrap().data().to_vec();

        let run = |ps: &mut ParamStore| -> f64 {
            let mut g = Graph::new();
            let l = build(ps, &mut g);
            g.value(l).item()
        };
        let num = numeric_grads(&mut ps, run, 1e-5);
        for (an, nu) in gw.iter().zip(&num[0]) {
            assert!(gradcheck::rel_error(*an, *nu) < 1e-6, "conv w: {an} vs {nu}");
        }
        for (an, nu) in gb.iter().zip(&num[1]) {
            assert!(gradcheck::rel_error(*an, *nu) < 1e-6, "conv b: {an} vs {nu}");
        }
    }

    #[test]
    fn conv_transpose2d_matches_fd() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", init::normal(&mut rng(6), &[3, 2, 4, 4], 0.5));
        let b = ps.add("b", init::normal(&mut rng(7), &[2], 0.5));
        let xp = ps.add("x", init::normal(&mut rng(8), &[1, 3, 4, 4], 1.0));

        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let y = g.conv_transpose2d(bound.var(xp), bound.var(w), Some(bound.var(b)), 2, 1);
        assert_eq!(g.value(y).shape(), [1, 2, 8, 8]);
        let t = g.square(y);
        let l = g.mean(t);
        g.backward(l);
        let grads: Vec<Vec<f64>> = [w, b, xp]
            .iter()
            .map(|p| g.grad(bound.var(*p)).unwrap().data().to_vec())
            .collect();

        let run = |ps: &mut ParamStore| -> f64 {
            let mut g = Graph::new();
            let bound = ps.bind(&mut g);
            let y = g.conv_transpose2d(bound.var(xp), bound.var(w), Some(bound.var(b)), 2, 1);
            let t = g.square(y);
            let l = g.mean(t);
            g.value(l).item()
        };
        let num = numeric_grads(&mut ps, run, 1e-5);
        for (an, nu) in grads[0].iter().zip(&num[0]) {
            assert!(gradcheck::rel_error(*an, *nu) < 1e-6, "ct w: {an} vs {nu}");
        }
        for (an, nu) in grads[1].iter().zip(&num[1]) {
            assert!(gradcheck::rel_error(*an, *nu) < 1e-6, "ct b: {an} vs {nu}");
        }
        for (an, nu) in grads[2].iter().zip(&num[2]) {
            assert!(gradcheck::rel_error(*an, *nu) < 1e-6, "ct x: {an} vs {nu}");
        }
    }

    #[test]
    fn batchnorm_train_matches_fd() {
        let mut ps = ParamStore::new();
        let gamma = ps.add("gamma", init::normal(&mut rng(9), &[3], 0.3));
        let beta = ps.add("beta", init::normal(&mut rng(10), &[3], 0.3));
        let xp = ps.add("x", init::normal(&mut rng(11), &[2, 3, 4, 4], 1.0));

        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let (y, _) = g.batch_norm(bound.var(xp), bound.var(gamma), bound.var(beta), None, 1e-5);
        let s = g.square(y);
        let l = g.mean(s);
        g.backward(l);
        let grads: Vec<Vec<f64>> = [gamma, beta, xp]
            .iter()
            .map(|p| g.grad(bound.var(*p)).unwrap().data().to_vec())
            .collect();

        let run = |ps: &mut ParamStore| -> f64 {
            let mut g = Graph::new();
            let bound = ps.bind(&mut g);
            let (y, _) =
                g.batch_norm(bound.var(xp), bound.var(gamma), bound.var(beta), None, 1e-5);
            let s = g.square(y);
            let l = g.mean(s);
            g.value(l).item()
        };
        let num = numeric_grads(&mut ps, run, 1e-5);
        for (i, (an, nu)) in grads.iter().zip(&num).enumerate() {
            for (a, n) in an.iter().zip(nu) {
                assert!(gradcheck::rel_error(*a, *n) < 1e-5, "bn entry {i}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn softmax_ce_matmul_matches_fd() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", init::normal(&mut rng(12), &[5, 3], 0.8));
        let b = ps.add("b", init::normal(&mut rng(13), &[3], 0.8));
        let xp = ps.add("x", init::normal(&mut rng(14), &[4, 5], 1.0));
        let targets = vec![0usize, 2, 1, 1];
        let weights = vec![1.0, 0.5, 1.0, 0.25];

        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let z = g.matmul(bound.var(xp), bound.var(w));
        let z = g.add_last_dim(z, bound.var(b));
        let p = g.softmax_rows(z);
        let l = g.cross_entropy_weighted(p, targets.clone(), weights.clone());
        g.backward(l);
        let grads: Vec<Vec<f64>> = [w, b, xp]
            .iter()
            .map(|p| g.grad(bound.var(*p)).unwrap().data().to_vec())
            .collect();

        let run = |ps: &mut ParamStore| -> f64 {
            let mut g = Graph::new();
            let bound = ps.bind(&mut g);
            let z = g.matmul(bound.var(xp), bound.var(w));
            let z = g.add_last_dim(z, bound.var(b));
            let p = g.softmax_rows(z);
            let l = g.cross_entropy_weighted(p, targets.clone(), weights.clone());
            g.value(l).item()
        };
        let num = numeric_grads(&mut ps, run, 1e-6);
        for (an, nu) in grads.iter().zip(&num) {
            for (a, n) in an.iter().zip(nu) {
                assert!(gradcheck::rel_error(*a, *n) < 1e-5, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn netvlad_core_and_l2norm_match_fd() {
        let mut ps = ParamStore::new();
        let assign_logits = ps.add("al", init::normal(&mut rng(15), &[2, 6, 4], 0.7));
        let locals = ps.add("loc", init::normal(&mut rng(16), &[2, 6, 3], 0.9));
        let centers = ps.add("cen", init::normal(&mut rng(17), &[4, 3], 0.9));

        let build = |ps: &ParamStore, g: &mut Graph| -> Var {
            let bound = ps.bind(g);
            let al = bound.var(assign_logits);
            let flat = g.reshape(al, &[12, 4]);
            let sm = g.softmax_rows(flat);
            let a = g.reshape(sm, &[2, 6, 4]);
            let v = g.netvlad_core(a, bound.var(locals), bound.var(centers));
            let vr = g.reshape(v, &[8, 3]);
            let intra = g.l2_normalize_rows(vr, 1e-12);
            let flatd = g.reshape(intra, &[2, 12]);
            let desc = g.l2_normalize_rows(flatd, 1e-12);
            // pull toward an arbitrary fixed target so grads are generic
            let target = g.leaf(init::normal(&mut rng(18), &[2, 12], 1.0));
            let d = g.sub(desc, target);
            let sq = g.square(d);
            g.mean(sq)
        };

        let mut g = Graph::new();
        let l = build(&ps, &mut g);
        g.backward(l);
        // grads live on the first three param leaves (bind order = entry order)
        let grads: Vec<Vec<f64>> = (0..3)
            .map(|i| g.grad(Var(i)).unwrap().data().to_vec())
            .collect();

        let run = |ps: &mut ParamStore| -> f64 {
            let mut g = Graph::new();
            let l = build(ps, &mut g);
            g.value(l).item()
        };
        let num = numeric_grads(&mut ps, run, 1e-6);
        for (an, nu) in grads.iter().zip(&num) {
            for (a, n) in an.iter().zip(nu) {
                assert!(gradcheck::rel_error(*a, *n) < 1e-5, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn grad_reverse_negates() {
        let mut ps = ParamStore::new();
        let xp = ps.add("x", init::normal(&mut rng(19), &[2, 3], 1.0));

        let grad_with = |reversed: bool, ps: &ParamStore| -> Vec<f64> {
            let mut g = Graph::new();
            let bound = ps.bind(&mut g);
            let x = bound.var(xp);
            let h = if reversed { g.grad_reverse(x) } else { x };
            let s = g.square(h);
            let l = g.mean(s);
            g.backward(l);
            g.grad(x).unwrap().data().to_vec()
        };
        let plain = grad_with(false, &ps);
        let rev = grad_with(true, &ps);
        for (p, r) in plain.iter().zip(&rev) {
            assert!((p + r).abs() < 1e-15, "reversal must negate exactly: {p} vs {r}");
        }
        // forward is the identity
        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let x = bound.var(xp);
        let y = g.grad_reverse(x);
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn maxpool_matches_fd() {
        let mut ps = ParamStore::new();
        let xp = ps.add("x", init::normal(&mut rng(20), &[1, 2, 6, 6], 1.0));

        let mut g = Graph::new();
        let bound = ps.bind(&mut g);
        let y = g.maxpool2d(bound.var(xp), 3, 2, 1);
        assert_eq!(g.value(y).shape(), [1, 2, 3, 3]);
        let s = g.square(y);
        let l = g.mean(s);
        g.backward(l);
        let an = g.grad(bound.var(xp)).unwrap().data().to_vec();

        let run = |ps: &mut ParamStore| -> f64 {
            let mut g = Graph::new();
            let bound = ps.bind(&mut g);
            let y = g.maxpool2d(bound.var(xp), 3, 2, 1);
            let s = g.square(y);
            let l = g.mean(s);
            g.value(l).item()
        };
        let num = numeric_grads(&mut ps, run, 1e-6);
        for (a, n) in an.iter().zip(&num[0]) {
            assert!(gradcheck::rel_error(*a, *n) < 1e-5, "{a} vs {n}");
        }
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut ps = ParamStore::new();
        let xp = ps.add("x", Tensor::from_vec(&[4], vec![2.0, -3.0, 1.5, 0.5]));
        let mut opt = Adam::new(&ps, 0.05, 0.9, 0.999);
        let mut last = f64::INFINITY;
        for _ in 0..400 {
            let mut g = Graph::new();
            let bound = ps.bind(&mut g);
            let s = g.square(bound.var(xp));
            let l = g.sum_all(s);
            g.backward(l);
            last = g.value(l).item();
            opt.step(&mut ps, &g, &bound);
        }
        assert!(last < 1e-3, "Adam failed to minimize: {last}");
    }

    #[test]
    fn l2norm_zero_row_guard() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, 3.0, 0.0, 4.0]));
        let y = g.l2_normalize_rows(x, 1e-12);
        assert_eq!(&g.value(y).data()[..3], &[0.0, 0.0, 0.0]);
        assert!((g.value(y).data()[3] - 0.6).abs() < 1e-12);
        assert!((g.value(y).data()[5] - 0.8).abs() < 1e-12);
        assert_eq!(g.degenerate_rows(y), vec![0]);
    }
}
