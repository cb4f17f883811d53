//! Multi-head attention with explicit backward, usable as self-attention
//! (queries and keys/values from the same tokens) or cross-attention.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use super::layers::Linear;
use super::store::{GradBuf, ParamStore};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub inner: usize,
}

pub struct AttentionCache {
    q_in: Array2<f64>,
    kv_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax probabilities per head, `(heads, nq, nk)`.
    probs: Array3<f64>,
    ctx: Array2<f64>,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        inner: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(inner % heads == 0, "inner dim must divide into heads");
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), q_dim, inner, rng),
            wk: Linear::new(store, &format!("{name}.wk"), kv_dim, inner, rng),
            wv: Linear::new(store, &format!("{name}.wv"), kv_dim, inner, rng),
            wo: Linear::new(store, &format!("{name}.wo"), inner, q_dim, rng),
            heads,
            inner,
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        q_in: &Array2<f64>,
        kv_in: &Array2<f64>,
    ) -> (Array2<f64>, AttentionCache) {
        let (nq, nk) = (q_in.nrows(), kv_in.nrows());
        let hd = self.inner / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let q = self.wq.forward(store, q_in);
        let k = self.wk.forward(store, kv_in);
        let v = self.wv.forward(store, kv_in);
        let mut probs = Array3::zeros((self.heads, nq, nk));
        let mut ctx = Array2::zeros((nq, self.inner));
        for h in 0..self.heads {
            let span = h * hd..(h + 1) * hd;
            let qh = q.slice(ndarray::s![.., span.clone()]);
            let kh = k.slice(ndarray::s![.., span.clone()]);
            let vh = v.slice(ndarray::s![.., span.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores *= scale;
            // Row softmax with max subtraction.
            for mut row in scores.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - m).exp());
                let s = row.sum();
                row /= s;
            }
            let ctx_h = scores.dot(&vh);
            ctx.slice_mut(ndarray::s![.., span]).assign(&ctx_h);
            probs.index_axis_mut(Axis(0), h).assign(&scores);
        }
        let out = self.wo.forward(store, &ctx);
        (
            out,
            AttentionCache {
                q_in: q_in.clone(),
                kv_in: kv_in.clone(),
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    /// Returns `(d_q_in, d_kv_in)`. For self-attention add the two.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &AttentionCache,
        gout: &Array2<f64>,
        grads: &mut GradBuf,
    ) -> (Array2<f64>, Array2<f64>) {
        let hd = self.inner / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let dctx = self.wo.backward(store, &cache.ctx, gout, grads);
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for h in 0..self.heads {
            let span = h * hd..(h + 1) * hd;
            let qh = cache.q.slice(ndarray::s![.., span.clone()]);
            let kh = cache.k.slice(ndarray::s![.., span.clone()]);
            let vh = cache.v.slice(ndarray::s![.., span.clone()]);
            let p = cache.probs.index_axis(Axis(0), h);
            let dctx_h = dctx.slice(ndarray::s![.., span.clone()]);
            let dp = dctx_h.dot(&vh.t());
            dv.slice_mut(ndarray::s![.., span.clone()])
                .assign(&p.t().dot(&dctx_h));
            // Softmax backward: ds = p * (dp - rowsum(dp * p)).
            let rowsum = (&dp * &p).sum_axis(Axis(1));
            let mut ds = dp.to_owned();
            for (mut row, &rs) in ds.rows_mut().into_iter().zip(rowsum.iter()) {
                row -= rs;
            }
            ds *= &p;
            ds *= scale;
            dq.slice_mut(ndarray::s![.., span.clone()])
                .assign(&ds.dot(&kh));
            dk.slice_mut(ndarray::s![.., span])
                .assign(&ds.t().dot(&qh));
        }
        let dq_in = self.wq.backward(store, &cache.q_in, &dq, grads);
        let mut dkv_in = self.wk.backward(store, &cache.kv_in, &dk, grads);
        dkv_in += &self.wv.backward(store, &cache.kv_in, &dv, grads);
        (dq_in, dkv_in)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_param_grads;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cross_attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "xa", 6, 10, 8, 2, &mut rng);
        let q = Array2::from_shape_simple_fn((5, 6), || rng.gen_range(-1.0..1.0));
        let kv = Array2::from_shape_simple_fn((7, 10), || rng.gen_range(-1.0..1.0));
        let r = Array2::from_shape_simple_fn((5, 6), || rng.gen_range(-1.0..1.0));
        let loss = |s: &ParamStore| (&attn.forward(s, &q, &kv).0 * &r).sum();
        let mut grads = GradBuf::zeros_like(&store);
        let (_, cache) = attn.forward(&store, &q, &kv);
        let (dq, dkv) = attn.backward(&store, &cache, &r, &mut grads);
        let err = check_param_grads(&mut store, &grads, loss, 40, 1e-5, 17);
        assert!(err < 1e-5, "param rel err {err}");

        // Input gradients against central differences.
        for (arr, grad, idx) in [(&q, &dq, (2usize, 3usize)), (&kv, &dkv, (4, 7))] {
            let mut plus = arr.clone();
            plus[idx] += 1e-6;
            let mut minus = arr.clone();
            minus[idx] -= 1e-6;
            let (fp, fm) = if std::ptr::eq(arr, &q) {
                (
                    (&attn.forward(&store, &plus, &kv).0 * &r).sum(),
                    (&attn.forward(&store, &minus, &kv).0 * &r).sum(),
                )
            } else {
                (
                    (&attn.forward(&store, &q, &plus).0 * &r).sum(),
                    (&attn.forward(&store, &q, &minus).0 * &r).sum(),
                )
            };
            let fd = (fp - fm) / 2e-6;
            assert!(
                (fd - grad[idx]).abs() / fd.abs().max(1e-8) < 1e-5,
                "input grad mismatch: fd={fd} an={}",
                grad[idx]
            );
        }
    }

    #[test]
    fn self_attention_input_gradient_sums_both_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut store = ParamStore::new();
        let attn = MultiHeadAttention::new(&mut store, "sa", 4, 4, 4, 1, &mut rng);
        let x = Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0));
        let r = Array2::from_shape_simple_fn((3, 4), || rng.gen_range(-1.0..1.0));
        let mut grads = GradBuf::zeros_like(&store);
        let (_, cache) = attn.forward(&store, &x, &x);
        let (dq, dkv) = attn.backward(&store, &cache, &r, &mut grads);
        let dx = &dq + &dkv;
        let mut xp = x.clone();
        xp[[1, 1]] += 1e-6;
        let mut xm = x.clone();
        xm[[1, 1]] -= 1e-6;
        let fd = ((&attn.forward(&store, &xp, &xp).0 * &r).sum()
            - (&attn.forward(&store, &xm, &xm).0 * &r).sum())
            / 2e-6;
        assert!((fd - dx[[1, 1]]).abs() / fd.abs().max(1e-8) < 1e-5);
    }
}
