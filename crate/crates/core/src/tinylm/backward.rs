//! Reverse-mode gradients through the frozen blocks.
//!
//! Base weights never receive gradients. The pass returns the gradient with
//! respect to the input embeddings and, when adapters were active in the
//! forward pass, with respect to the adapter matrices.

use rayon::prelude::*;

use super::forward::{rope, silu_grad, LayerTape, Tape};
use super::{rms_norm_backward, LayerParams, LoraAdapters, ModelParams};
use crate::tensor::{dot, Float, Mat};

impl<T: Float> ModelParams<T> {
    /// `d_hidden[l]` is the upstream gradient on layer `l`'s output (the
    /// tapped hidden state), `None` where the loss does not read that layer.
    pub(crate) fn backward(
        &self,
        tape: &Tape<T>,
        lora: Option<&LoraAdapters<T>>,
        d_hidden: &[Option<Mat<T>>],
    ) -> (Mat<T>, Option<LoraAdapters<T>>) {
        assert_eq!(d_hidden.len(), self.layers.len(), "one upstream slot per layer");
        let n = tape.layers[0].x_in.rows();
        let d = self.config.hidden_dim;
        let mut grads = lora.map(LoraAdapters::zeros_like);
        let mut g = Mat::zeros(n, d);
        for li in (0..self.layers.len()).rev() {
            if let Some(dh) = &d_hidden[li] {
                g.add_assign(dh);
            }
            g = self.layer_backward(
                li,
                &self.layers[li],
                &tape.layers[li],
                lora,
                grads.as_mut(),
                &g,
            );
        }
        (g, grads)
    }

    fn layer_backward(
        &self,
        li: usize,
        layer: &LayerParams<T>,
        t: &LayerTape<T>,
        lora: Option<&LoraAdapters<T>>,
        grads: Option<&mut LoraAdapters<T>>,
        dy: &Mat<T>,
    ) -> Mat<T> {
        let heads = self.config.n_heads;

        // feed-forward branch
        let mut d_pre = dy.matmul_t(&layer.w_down);
        for (g, &p) in d_pre.data_mut().iter_mut().zip(t.pre.data()) {
            *g *= silu_grad(p);
        }
        let d_xn2 = d_pre.matmul_t(&layer.w_up);
        let mut d_mid = rms_norm_backward(&d_xn2, &t.h_mid, &t.inv2, &layer.ffn_norm);
        d_mid.add_assign(dy);

        // attention branch
        let d_attn = d_mid.matmul_t(&layer.wo);
        let (mut dq, mut dk, dv) = attention_backward(t, &d_attn, heads);
        rope(&mut dq, 0, heads, true);
        rope(&mut dk, 0, heads, true);

        let mut d_xn1 = dq.matmul_t(&layer.wq);
        d_xn1.add_assign(&dk.matmul_t(&layer.wk));
        d_xn1.add_assign(&dv.matmul_t(&layer.wv));

        if let (Some(a), Some(gr)) = (lora, grads) {
            let s = a.scale();
            let adapters = &a.layers[li];
            let targets = &mut gr.layers[li];
            let branches = [
                (&adapters.query, &mut targets.query, &dq, t.uq.as_ref()),
                (&adapters.value, &mut targets.value, &dv, t.uv.as_ref()),
            ];
            for (pair, gpair, dout, u) in branches {
                let u = u.expect("adapter activations recorded");
                let mut d_up = dout.t_matmul(u);
                d_up.scale(s);
                gpair.up.add_assign(&d_up);
                let mut du = dout.matmul(&pair.up);
                du.scale(s);
                gpair.down.add_assign(&du.t_matmul(&t.xn1));
                d_xn1.add_assign(&du.matmul(&pair.down));
            }
        }

        let mut dx = rms_norm_backward(&d_xn1, &t.x_in, &t.inv1, &layer.attn_norm);
        dx.add_assign(&d_mid);
        dx
    }
}

/// Softmax-attention backward for all heads; returns gradients on the
/// rotated queries, rotated keys and values.
fn attention_backward<T: Float>(t: &LayerTape<T>, d_attn: &Mat<T>, heads: usize) -> (Mat<T>, Mat<T>, Mat<T>) {
    let n = t.q.rows();
    let d = t.q.cols();
    let hd = d / heads;
    let scale = T::lit(1.0 / (hd as f64).sqrt());

    let per_head: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..heads)
        .into_par_iter()
        .map(|h| {
            let cols = h * hd..(h + 1) * hd;
            let mut dq = vec![T::zero(); n * hd];
            let mut dk = vec![T::zero(); n * hd];
            let mut dv = vec![T::zero(); n * hd];
            let mut dp = Vec::with_capacity(n);
            for i in 0..n {
                let nk = i + 1;
                let p = &t.probs[i][h * nk..(h + 1) * nk];
                let dout = &d_attn.row(i)[cols.clone()];
                dp.clear();
                let mut weighted = T::zero();
                for (j, &pj) in p.iter().enumerate() {
                    let g = dot(dout, &t.v.row(j)[cols.clone()]);
                    weighted += pj * g;
                    dp.push(g);
                    for (acc, &o) in dv[j * hd..(j + 1) * hd].iter_mut().zip(dout) {
                        *acc += pj * o;
                    }
                }
                let qi = &t.q.row(i)[cols.clone()];
                for (j, &pj) in p.iter().enumerate() {
                    let ds = pj * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &t.k.row(j)[cols.clone()];
                    for (acc, &kv) in dq[i * hd..(i + 1) * hd].iter_mut().zip(kj) {
                        *acc += ds * kv;
                    }
                    for (acc, &qv) in dk[j * hd..(j + 1) * hd].iter_mut().zip(qi) {
                        *acc += ds * qv;
                    }
                }
            }
            (dq, dk, dv)
        })
        .collect();

    let mut dq = Mat::zeros(n, d);
    let mut dk = Mat::zeros(n, d);
    let mut dv = Mat::zeros(n, d);
    for (h, (q, k, v)) in per_head.iter().enumerate() {
        for i in 0..n {
            let dst = h * hd..(h + 1) * hd;
            let src = i * hd..(i + 1) * hd;
            dq.row_mut(i)[dst.clone()].copy_from_slice(&q[src.clone()]);
            dk.row_mut(i)[dst.clone()].copy_from_slice(&k[src.clone()]);
            dv.row_mut(i)[dst].copy_from_slice(&v[src]);
        }
    }
    (dq, dk, dv)
}
