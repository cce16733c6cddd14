//! Parameterized building blocks: affine maps and the LSTM recurrence.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Affine map `y = x·wᵀ + b`, applied over the trailing axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.weight(&format!("{name}.w"), &[out_dim, in_dim])?;
        let b = if bias {
            Some(store.zeros(&format!("{name}.b"), &[out_dim])?)
        } else {
            None
        };
        Ok(Linear {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.b);
        v
    }
}

/// One direction of an LSTM. Gate rows are ordered input, forget, cell, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmCell {
    pub input: Linear,
    pub recurrent: Linear,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(LstmCell {
            input: Linear::new(store, &format!("{name}.ih"), in_dim, 4 * hidden, true)?,
            recurrent: Linear::new(store, &format!("{name}.hh"), hidden, 4 * hidden, false)?,
            hidden,
        })
    }

    /// One recurrence step given the already projected input `x_proj = W_ih x + b`.
    pub fn step<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x_proj: Var,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var)> {
        let n = self.hidden;
        let rec = self.recurrent.forward(g, store, h)?;
        let pre = g.add(x_proj, rec)?;
        let i_pre = g.slice_last(pre, 0, n)?;
        let f_pre = g.slice_last(pre, n, n)?;
        let g_pre = g.slice_last(pre, 2 * n, n)?;
        let o_pre = g.slice_last(pre, 3 * n, n)?;
        let i = g.sigmoid(i_pre);
        let f = g.sigmoid(f_pre);
        let cand = g.tanh(g_pre);
        let o = g.sigmoid(o_pre);
        let keep = g.mul(f, c)?;
        let write = g.mul(i, cand)?;
        let c_next = g.add(keep, write)?;
        let squashed = g.tanh(c_next);
        let h_next = g.mul(o, squashed)?;
        Ok((h_next, c_next))
    }

    /// Runs the recurrence over `order` (row indices of `seq`), returning states in that order.
    fn run<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        seq: Var,
        order: impl Iterator<Item = usize>,
    ) -> Result<Vec<Var>> {
        let proj = self.input.forward(g, store, seq)?;
        let mut h = g.constant(Tensor::zeros([self.hidden]));
        let mut c = g.constant(Tensor::zeros([self.hidden]));
        let mut out = Vec::new();
        for s in order {
            let xp = g.row(proj, s)?;
            let (h2, c2) = self.step(g, store, xp, h, c)?;
            h = h2;
            c = c2;
            out.push(h);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstmOutput {
    /// `[S, 2h]`; row `s` is `[forward_s ; backward_s]`.
    pub states: Var,
    /// Forward state after the last token.
    pub final_fwd: Var,
    /// Backward state after reading back to the first token.
    pub final_bwd: Var,
}

impl BiLstm {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(BiLstm {
            forward: LstmCell::new(store, &format!("{name}.fwd"), in_dim, hidden)?,
            backward: LstmCell::new(store, &format!("{name}.bwd"), in_dim, hidden)?,
        })
    }

    pub fn run<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, seq: Var) -> Result<BiLstmOutput> {
        let shape = g.shape(seq).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("bilstm", &shape, &[0, self.forward.input.in_dim]));
        }
        let len = shape[0];
        let fwd = self.forward.run(g, store, seq, 0..len)?;
        let mut bwd = self.backward.run(g, store, seq, (0..len).rev())?;
        bwd.reverse();
        let rows: Vec<Var> = fwd
            .iter()
            .zip(&bwd)
            .map(|(&f, &b)| g.concat_last(&[f, b]))
            .collect::<Result<_>>()?;
        let states = g.stack(&rows)?;
        Ok(BiLstmOutput {
            states,
            final_fwd: fwd[len - 1],
            final_bwd: bwd[0],
        })
    }
}
