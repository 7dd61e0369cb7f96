//! Minimal CPU tensor engine: NHWC tensors, reverse-mode graph, AdamW.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, SpatialWeights, Var, PATCH_VAR_FLOOR};
pub use optim::{AdamW, AdamWConfig, GradBuffer};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod gradcheck {
    use std::rc::Rc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect())
    }

    /// Compare the analytic gradient of every input against central
    /// differences, element by element.
    fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var, tol: f32) {
        let eval = |vals: &[Tensor]| -> f64 {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let out = f(&mut g, &vars);
            g.value(out).item() as f64
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        g.backward(out);
        let h = 1e-2f32;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            for e in 0..input.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[e] -= h;
                let fd = ((eval(&plus) - eval(&minus)) / (2.0 * h as f64)) as f32;
                let a = analytic.data()[e];
                let err = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-1));
                assert!(err < tol, "input {k} elem {e}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 5, 5, 2], &mut rng);
        let w = random(&[3 * 3 * 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let y = random(&[2, 3, 3, 3], &mut rng);
        check(
            vec![x, w, b],
            move |g, v| {
                let o = g.conv2d(v[0], v[1], Some(v[2]), 3, 2, 1);
                let t = g.constant(y.clone());
                let p = g.mul(o, t);
                g.sum(p)
            },
            1e-2,
        );
    }

    #[test]
    fn depthwise_layernorm_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[1, 4, 4, 3], &mut rng);
        let w = random(&[9, 3], &mut rng);
        let gam = random(&[3], &mut rng);
        let bet = random(&[3], &mut rng);
        let y = random(&[1, 4, 4, 3], &mut rng);
        check(
            vec![x, w, gam, bet],
            move |g, v| {
                let o = g.depthwise(v[0], v[1], None, 3, 1, 1);
                let o = g.layer_norm(o, v[2], v[3]);
                let o = g.gelu(o);
                let t = g.constant(y.clone());
                let p = g.mul(o, t);
                g.sum(p)
            },
            2e-2,
        );
    }

    #[test]
    fn grn_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 3, 4], &mut rng);
        let gam = random(&[4], &mut rng);
        let bet = random(&[4], &mut rng);
        let y = random(&[2, 3, 3, 4], &mut rng);
        check(
            vec![x, gam, bet],
            move |g, v| {
                let o = g.grn(v[0], v[1], v[2]);
                let t = g.constant(y.clone());
                let p = g.mul(o, t);
                g.sum(p)
            },
            2e-2,
        );
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&[1, 2, 2, 8], &mut rng);
        let b = random(&[1, 4, 4, 1], &mut rng);
        let token = random(&[8], &mut rng);
        let keep = Rc::new(Tensor::new(&[1, 2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]));
        let pool = Rc::new(Tensor::new(&[1, 4, 4, 1], (0..16).map(|i| (i % 3 == 0) as i32 as f32).collect()));
        let y = random(&[1, 4, 4, 3], &mut rng);
        check(
            vec![a, b, token],
            move |g, v| {
                let f = g.fill_mask(v[0], v[2], &keep);
                let d = g.depth_to_space(f, 2); // [1,4,4,2]
                let c = g.concat_channels(d, v[1]); // [1,4,4,3]
                let t = g.constant(y.clone());
                let p = g.mul(c, t);
                let m = g.masked_mean_pool(p, &pool);
                let up = g.upsample_nearest(c, 2);
                let s1 = g.sum(m);
                let s2 = g.sum(up);
                let s2 = g.scale(s2, 0.1);
                g.add(s1, s2)
            },
            1e-2,
        );
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = random(&[1, 4, 4, 2], &mut rng);
        let target = random(&[1, 4, 4, 2], &mut rng);
        let scores = random(&[1, 4, 4, 3], &mut rng);
        let weights = Rc::new(Tensor::new(&[1, 4, 4, 1], (0..16).map(|i| (i >= 8) as i32 as f32).collect()));
        let labels: Rc<Vec<u32>> = Rc::new((0..16).map(|i| (i % 3) as u32).collect());
        let ce_w: Rc<Vec<f32>> = Rc::new((0..16).map(|i| (i % 2) as f32).collect());
        let valid = Rc::new(Tensor::new(&[1, 4, 4, 1], (0..16).map(|i| (i != 5) as i32 as f32).collect()));
        check(
            vec![pred, target, scores],
            move |g, v| {
                let pn = g.patch_normalize(v[1], 2, &valid);
                let a = g.mse_spatial(v[0], pn, &weights).unwrap();
                let b = g.cross_entropy(v[2], labels.clone(), ce_w.clone()).unwrap();
                let s = g.exp(b);
                g.add_n(&[a, s])
            },
            2e-2,
        );
    }

    #[test]
    fn linear_bce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[4, 2], &mut rng);
        let b = random(&[2], &mut rng);
        let targets = Rc::new(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let rows_t = random(&[3, 2], &mut rng);
        check(
            vec![x, w, b],
            move |g, v| {
                let o = g.linear(v[0], v[1], Some(v[2]));
                let l1 = g.bce_with_logits(o, targets.clone());
                let t = g.constant(rows_t.clone());
                let l2 = g.mse_rows(o, t, Rc::new(vec![1.0, 0.0, 1.0])).unwrap();
                g.add(l1, l2)
            },
            1e-2,
        );
    }

    #[test]
    fn constants_do_not_record_history() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(2.0));
        let b = g.exp(a);
        assert!(!g.requires_grad(b));
        g.backward(b);
        assert!(g.grad(a).is_none());
    }
}
