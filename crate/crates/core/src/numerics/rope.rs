use crate::error::{Error, Result};

/// Grid position of a token for the 2D rotary encoding.
pub type GridPos = (i64, i64);

/// Precomputed rotation angles: for every row, `head_dim / 2` pair angles.
/// The first half of each head's pairs rotates by the row coordinate, the
/// second half by the column coordinate. All heads share the same angles.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeAngles {
    pub head_dim: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RopeAngles {
    pub fn new(head_dim: usize, positions: &[GridPos], base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(Error::Config(format!("rotary head dimension {head_dim} must be a positive multiple of 4")));
        }
        let half_pairs = head_dim / 4;
        let pairs = head_dim / 2;
        let freqs: Vec<f64> = (0..half_pairs).map(|i| base.powf(-(i as f64) / half_pairs as f64)).collect();
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &(r, c) in positions {
            for (coord, _) in [(r, 0), (c, 1)] {
                for f in &freqs {
                    let a = coord as f64 * f;
                    cos.push(a.cos());
                    sin.push(a.sin());
                }
            }
        }
        Ok(Self { head_dim, cos, sin })
    }

    pub fn rows(&self) -> usize {
        self.cos.len() / (self.head_dim / 2)
    }
}

/// Rotates adjacent pairs of every head of every row. With `inverse` the
/// rotation is undone (angles negated).
pub fn apply_rope<F: crate::numerics::Real>(x: &[F], d: usize, angles: &RopeAngles, inverse: bool, out: &mut [F]) {
    let hd = angles.head_dim;
    let pairs = hd / 2;
    let heads = d / hd;
    let rows = x.len() / d;
    for r in 0..rows {
        let cs = &angles.cos[r * pairs..(r + 1) * pairs];
        let sn = &angles.sin[r * pairs..(r + 1) * pairs];
        for h in 0..heads {
            let base = r * d + h * hd;
            for p in 0..pairs {
                let c = F::from_f64c(cs[p]);
                let s = if inverse { -F::from_f64c(sn[p]) } else { F::from_f64c(sn[p]) };
                let a = x[base + 2 * p];
                let b = x[base + 2 * p + 1];
                out[base + 2 * p] = a * c - b * s;
                out[base + 2 * p + 1] = a * s + b * c;
            }
        }
    }
}

/// Rotates each row of `embeddings` (treated as a single head) by its grid
/// position.
pub fn rope2d_encode<F: crate::numerics::Real>(
    embeddings: &crate::numerics::Tensor<F>,
    positions: &[GridPos],
    base: f64,
) -> Result<crate::numerics::Tensor<F>> {
    let d = embeddings.cols();
    if embeddings.rows() != positions.len() {
        return Err(Error::Shape(format!("rope2d: {} rows but {} positions", embeddings.rows(), positions.len())));
    }
    let angles = RopeAngles::new(d, positions, base)?;
    let mut out = vec![F::zero(); embeddings.numel()];
    apply_rope(embeddings.data(), d, &angles, false, &mut out);
    crate::numerics::Tensor::new(embeddings.shape().to_vec(), out)
}
