//! Composite layers built from primitive tape operations.

use super::{Scalar, Tape, Var};
use crate::error::{Error, Result};

impl<T: Scalar> Tape<T> {
    /// `groups` independent two-layer pointwise MLPs over the same input.
    ///
    /// `w1: [G*D_h, C_in]` (every group reads all input channels), `w2: [G*D_f, D_h]`
    /// applied group-wise. Group `k` writes channels `[k*D_f, (k+1)*D_f)`.
    pub fn grouped_pointwise_mlp(
        &mut self,
        x: Var,
        (w1, b1): (Var, Option<Var>),
        (w2, b2): (Var, Option<Var>),
        groups: usize,
    ) -> Result<Var> {
        if groups == 0 {
            return Err(Error::Config("grouped_pointwise_mlp: K must be at least 1".into()));
        }
        if self.shape(w2).first().copied().unwrap_or(0) < groups {
            return Err(Error::Config(
                "grouped_pointwise_mlp: D_f must be at least 1".into(),
            ));
        }
        let hidden = self.pointwise_linear(x, w1, b1)?;
        let hidden = self.relu(hidden);
        self.grouped_linear(hidden, w2, b2, groups)
    }
}
