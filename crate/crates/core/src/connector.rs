//! Fuses per-point geometry and visual features into one vector per point.

use detr3d_autograd::{ParamStore, Real, Var};
use rand::Rng;

use crate::error::{DetrError, Result};
use crate::nn::{Ctx, LinearBnGelu};

#[derive(Clone, Debug)]
pub struct Connector {
    pub mlp: LinearBnGelu,
    pub geo_dim: usize,
    pub vis_dim: usize,
}

impl Connector {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        geo_dim: usize,
        vis_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Connector {
            mlp: LinearBnGelu::new(store, rng, "connector.mlp", geo_dim + vis_dim, out_dim)?,
            geo_dim,
            vis_dim,
        })
    }

    /// `gelu(bn(linear([geo ; vis])))`.
    pub fn fuse<T: Real>(&self, ctx: &mut Ctx<'_, T>, geo: Var, vis: Var) -> Result<Var> {
        let (sg, sv) = (ctx.g.shape(geo).to_vec(), ctx.g.shape(vis).to_vec());
        if sg.len() != 2 || sv.len() != 2 || sg[0] != sv[0] || sg[1] != self.geo_dim || sv[1] != self.vis_dim {
            return Err(DetrError::Contract(format!(
                "connector expects [N×{}] and [N×{}], got {sg:?} and {sv:?}",
                self.geo_dim, self.vis_dim
            )));
        }
        let cat = ctx.g.concat_cols(&[geo, vis])?;
        ctx.linear_bn_gelu(&self.mlp, cat)
    }
}
