use rand::seq::SliceRandom;

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Per-sample random masking of a token sequence.
///
/// For sample `b`, tokens `ids_shuffle[b][..keep_count]` are visible and the
/// rest are masked; `ids_restore[b]` is the inverse permutation, and
/// `mask[b][i]` is 1 when original token `i` is masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub token_count: usize,
    pub keep_count: usize,
    pub ids_shuffle: Vec<Vec<usize>>,
    pub ids_restore: Vec<Vec<usize>>,
    pub mask: Vec<Vec<u8>>,
}

/// Visible token count for a ratio: `floor(n * (1 - ratio))`. A tiny slack
/// keeps products such as `10 * (1 - 0.9)` from rounding down a whole token.
pub fn keep_count(token_count: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(invalid(
            "random_mask",
            format!("mask ratio {ratio} must lie in [0, 1)"),
        ));
    }
    let keep = (token_count as f64 * (1.0 - ratio) + 1e-9).floor() as usize;
    if keep == 0 {
        return Err(invalid(
            "random_mask",
            format!("ratio {ratio} leaves no visible token out of {token_count}"),
        ));
    }
    Ok(keep.min(token_count))
}

impl MaskPlan {
    fn from_shuffles(token_count: usize, keep_count: usize, ids_shuffle: Vec<Vec<usize>>) -> Self {
        let mut ids_restore = Vec::with_capacity(ids_shuffle.len());
        let mut mask = Vec::with_capacity(ids_shuffle.len());
        for perm in &ids_shuffle {
            let mut restore = vec![0; token_count];
            let mut m = vec![1u8; token_count];
            for (pos, &tok) in perm.iter().enumerate() {
                restore[tok] = pos;
                if pos < keep_count {
                    m[tok] = 0;
                }
            }
            ids_restore.push(restore);
            mask.push(m);
        }
        MaskPlan {
            token_count,
            keep_count,
            ids_shuffle,
            ids_restore,
            mask,
        }
    }

    /// Every token visible, in original order (the momentum branch).
    pub fn unmasked(batch: usize, token_count: usize) -> Self {
        let ids: Vec<usize> = (0..token_count).collect();
        Self::from_shuffles(token_count, token_count, vec![ids; batch])
    }

    /// One uniformly random permutation per sample, each drawn from its own
    /// stream.
    pub fn random_per_sample(token_count: usize, ratio: f64, rngs: &mut [Rng]) -> Result<Self> {
        let keep = keep_count(token_count, ratio)?;
        let shuffles = rngs
            .iter_mut()
            .map(|rng| {
                let mut ids: Vec<usize> = (0..token_count).collect();
                ids.shuffle(rng);
                ids
            })
            .collect();
        Ok(Self::from_shuffles(token_count, keep, shuffles))
    }

    /// `batch` permutations drawn in sequence from one stream.
    pub fn random(batch: usize, token_count: usize, ratio: f64, rng: &mut Rng) -> Result<Self> {
        let keep = keep_count(token_count, ratio)?;
        let shuffles = (0..batch)
            .map(|_| {
                let mut ids: Vec<usize> = (0..token_count).collect();
                ids.shuffle(rng);
                ids
            })
            .collect();
        Ok(Self::from_shuffles(token_count, keep, shuffles))
    }

    pub fn batch_size(&self) -> usize {
        self.ids_shuffle.len()
    }

    pub fn masked_count(&self) -> usize {
        self.token_count - self.keep_count
    }

    /// Flat row indices into a `[batch * tokens, ..]` view selecting the
    /// visible tokens of every sample in shuffled order.
    pub fn visible_rows(&self) -> Vec<usize> {
        let n = self.token_count;
        self.ids_shuffle
            .iter()
            .enumerate()
            .flat_map(|(b, ids)| ids[..self.keep_count].iter().map(move |&i| b * n + i))
            .collect()
    }

    /// Flat row indices that undo the shuffle of a `[batch * tokens, ..]` view.
    pub fn restore_rows(&self) -> Vec<usize> {
        let n = self.token_count;
        self.ids_restore
            .iter()
            .enumerate()
            .flat_map(|(b, ids)| ids.iter().map(move |&i| b * n + i))
            .collect()
    }

    /// Selects the visible tokens of `x: [batch, tokens, dim]` on the graph.
    pub fn gather_visible<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let [b, n, d] = *g.shape(x) else {
            return Err(invalid(
                "random_mask",
                format!("expected [batch, tokens, dim], got {:?}", g.shape(x)),
            ));
        };
        self.check_batch(b, n)?;
        let flat = g.reshape(x, &[b * n, d])?;
        let kept = g.gather_rows(flat, self.visible_rows())?;
        Ok(g.reshape(kept, &[b, self.keep_count, d])?)
    }

    pub(crate) fn check_batch(&self, batch: usize, tokens: usize) -> Result<()> {
        if batch != self.batch_size() || tokens != self.token_count {
            return Err(invalid(
                "mask plan",
                format!(
                    "plan covers {} samples x {} tokens, input has {batch} x {tokens}",
                    self.batch_size(),
                    self.token_count
                ),
            ));
        }
        Ok(())
    }
}

/// Applies random masking to `[tokens, dim]` or `[batch, tokens, dim]`
/// values, returning the visible tokens and the plan.
pub fn random_mask<S: Scalar>(
    tokens: &Tensor<S>,
    ratio: f64,
    rng: &mut Rng,
) -> Result<(Tensor<S>, MaskPlan)> {
    let (b, n, d) = match *tokens.shape() {
        [n, d] => (1, n, d),
        [b, n, d] => (b, n, d),
        ref other => {
            return Err(invalid(
                "random_mask",
                format!("expected token rows, got {other:?}"),
            ))
        }
    };
    let plan = MaskPlan::random(b, n, ratio, rng)?;
    let mut g = Graph::no_grad();
    let x = g.constant(tokens.clone().reshaped(vec![b, n, d])?);
    let visible = plan.gather_visible(&mut g, x)?;
    let mut out = g.value(visible).clone();
    if tokens.rank() == 2 {
        out = out.reshaped(vec![plan.keep_count, d])?;
    }
    Ok((out, plan))
}
