//! Symmetric image-text contrastive loss with a learnable temperature.

use crate::error::Result;
use crate::nn::{Graph, ParamStore, Tensor, Var};

/// Parameter holding `ln τ`.
pub const LOG_TAU: &str = "contrastive.log_tau";

/// Allowed range of `ln τ`.
pub const LOG_TAU_RANGE: (f64, f64) = (-5.0, 5.0);

/// Softmax temperature `τ = exp(log_tau)`; logits are cosines divided by `τ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    pub log_tau: f64,
}

impl Default for Temperature {
    /// `τ = 0.07`, i.e. cosines scaled by `1/0.07`.
    fn default() -> Self {
        Self {
            log_tau: 0.07f64.ln(),
        }
    }
}

impl Temperature {
    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn clamped(self) -> Self {
        Self {
            log_tau: self.log_tau.clamp(LOG_TAU_RANGE.0, LOG_TAU_RANGE.1),
        }
    }

    pub fn insert_into(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(LOG_TAU, Tensor::scalar(self.log_tau))
    }
}

/// Clamps the stored `ln τ` into [`LOG_TAU_RANGE`] after an update.
pub fn clamp_log_tau(store: &mut ParamStore) {
    if let Some(t) = store.get_mut(LOG_TAU) {
        for v in t.data_mut() {
            *v = v.clamp(LOG_TAU_RANGE.0, LOG_TAU_RANGE.1);
        }
    }
}

/// Mean of the image→text and text→image cross-entropies over the `B x B`
/// cosine matrix scaled by `1/τ`. Row `i` of each side is a matched pair.
pub fn contrastive_loss(
    g: &mut Graph,
    image_embs: Var,
    text_embs: Var,
    log_tau: Var,
) -> Result<Var> {
    let zi = g.normalize_rows(image_embs)?;
    let zt = g.normalize_rows(text_embs)?;
    let cos = g.matmul_nt(zi, zt);
    let neg = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg);
    let logits = g.mul(cos, inv_tau);
    let targets: Vec<usize> = (0..g.shape(logits).0).collect();
    let i2t = g.cross_entropy_rows(logits, &targets);
    let lt = g.transpose(logits);
    let t2i = g.cross_entropy_rows(lt, &targets);
    let both = g.add(i2t, t2i);
    Ok(g.scale(both, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck, init, log_sum_exp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(img: Tensor, txt: Tensor, log_tau: f64) -> f64 {
        let mut g = Graph::new();
        let i = g.constant(img);
        let t = g.constant(txt);
        let lt = g.constant(Tensor::scalar(log_tau));
        let l = contrastive_loss(&mut g, i, t, lt).unwrap();
        g.value(l).item()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let l = loss(
            Tensor::row_vector(vec![1.0, 2.0]),
            Tensor::row_vector(vec![-3.0, 0.5]),
            0.0,
        );
        assert_eq!(l, 0.0);
    }

    #[test]
    fn orthogonal_pairs_at_low_temperature() {
        let e = Tensor::eye(2);
        assert!(loss(e.clone(), e, -5.0) < 1e-20);
    }

    #[test]
    fn identical_images_match_direct_softmax() {
        let img = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let txt = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]);
        let log_tau = 0.3f64;
        let s = (-log_tau).exp();
        // Image rows are identical: both see logits (1·s, 0.6·s).
        let row = [s, 0.6 * s];
        let i2t = 0.5 * ((log_sum_exp(&row) - row[0]) + (log_sum_exp(&row) - row[1]));
        // Text columns: text 0 sees (s, s), text 1 sees (0.6 s, 0.6 s); ln 2 each.
        let t2i = 2f64.ln();
        let want = 0.5 * (i2t + t2i);
        assert!((loss(img, txt, log_tau) - want).abs() < 1e-12);
    }

    #[test]
    fn zero_embedding_is_error() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::zeros(&[1, 2]));
        let t = g.constant(Tensor::row_vector(vec![1.0, 0.0]));
        let lt = g.constant(Tensor::scalar(0.0));
        assert!(contrastive_loss(&mut g, i, t, lt).is_err());
    }

    #[test]
    fn contrastive_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = init::normal(&mut rng, &[4, 5], 1.0);
        let txt = init::normal(&mut rng, &[4, 5], 1.0);
        let res = gradcheck::check(&[img, txt, Tensor::scalar(-0.5)], 1e-6, |g, x| {
            contrastive_loss(g, x[0], x[1], x[2]).unwrap()
        });
        assert!(res.max_rel_err <= 1e-6, "{res:?}");
    }

    #[test]
    fn default_temperature_and_clamp() {
        assert!((Temperature::default().tau() - 0.07).abs() < 1e-15);
        let mut p = ParamStore::new();
        Temperature { log_tau: 9.0 }.insert_into(&mut p).unwrap();
        clamp_log_tau(&mut p);
        assert_eq!(p.get(LOG_TAU).unwrap().item(), 5.0);
    }
}
