//! GRU cell and linear layer on top of the [`Tape`].
//!
//! Gate convention (fixed; checkpoints depend on it):
//!
//! ```text
//! r  = σ(W_r x + U_r h + b_r)
//! z  = σ(W_z x + U_z h + b_z)
//! h̃  = tanh(W_h x + U_h (r ∘ h) + b_h)
//! h' = (1 − z) ∘ h + z ∘ h̃
//! ```
//!
//! so `z` gates the candidate and `z → 0` keeps the previous state.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Array2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gru {
    pub w_r: ParamId,
    pub w_z: ParamId,
    pub w_h: ParamId,
    pub u_r: ParamId,
    pub u_z: ParamId,
    pub u_h: ParamId,
    pub b_r: ParamId,
    pub b_z: ParamId,
    pub b_h: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

const GRU_SUFFIXES: [&str; 9] = ["w_r", "w_z", "w_h", "u_r", "u_z", "u_h", "b_r", "b_z", "b_h"];

fn lookup(store: &ParamStore, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
    let id = store
        .id(name)
        .ok_or_else(|| Error::Invalid(format!("missing parameter {name:?}")))?;
    let a = store.get(id);
    if a.rows() != rows || a.cols() != cols {
        return Err(Error::Shape {
            op: "parameter lookup",
            expected: format!("{name} {rows}x{cols}"),
            got: format!("{}x{}", a.rows(), a.cols()),
        });
    }
    Ok(id)
}

impl Gru {
    /// Adds freshly initialized weights named `{prefix}.w_r`, ... to `store`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        for s in &GRU_SUFFIXES[..3] {
            store.add(&format!("{prefix}.{s}"), Array2::xavier(hidden_dim, input_dim, rng))?;
        }
        for s in &GRU_SUFFIXES[3..6] {
            store.add(&format!("{prefix}.{s}"), Array2::xavier(hidden_dim, hidden_dim, rng))?;
        }
        for s in &GRU_SUFFIXES[6..] {
            store.add(&format!("{prefix}.{s}"), Array2::zeros(hidden_dim, 1))?;
        }
        Self::from_store(store, prefix, input_dim, hidden_dim)
    }

    /// Resolves existing weights by name, checking their shapes.
    pub fn from_store(
        store: &ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(Gru {
            w_r: lookup(store, &n("w_r"), hidden_dim, input_dim)?,
            w_z: lookup(store, &n("w_z"), hidden_dim, input_dim)?,
            w_h: lookup(store, &n("w_h"), hidden_dim, input_dim)?,
            u_r: lookup(store, &n("u_r"), hidden_dim, hidden_dim)?,
            u_z: lookup(store, &n("u_z"), hidden_dim, hidden_dim)?,
            u_h: lookup(store, &n("u_h"), hidden_dim, hidden_dim)?,
            b_r: lookup(store, &n("b_r"), hidden_dim, 1)?,
            b_z: lookup(store, &n("b_z"), hidden_dim, 1)?,
            b_h: lookup(store, &n("b_h"), hidden_dim, 1)?,
            input_dim,
            hidden_dim,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        [
            self.w_r, self.w_z, self.w_h, self.u_r, self.u_z, self.u_h, self.b_r, self.b_z,
            self.b_h,
        ]
    }

    fn gate(&self, tape: &mut Tape, w: ParamId, x: Var, u: ParamId, h: Var, b: ParamId) -> Result<Var> {
        let wx = tape.matvec(w, x)?;
        let uh = tape.matvec(u, h)?;
        let bias = tape.param(b);
        let s = tape.add(wx, uh)?;
        tape.add(s, bias)
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let r_pre = self.gate(tape, self.w_r, x, self.u_r, h, self.b_r)?;
        let r = tape.sigmoid(r_pre);
        let z_pre = self.gate(tape, self.w_z, x, self.u_z, h, self.b_z)?;
        let z = tape.sigmoid(z_pre);
        let rh = tape.mul(r, h)?;
        let c_pre = self.gate(tape, self.w_h, x, self.u_h, rh, self.b_h)?;
        let candidate = tape.tanh(c_pre);
        let keep = tape.one_minus(z);
        let kept = tape.mul(keep, h)?;
        let fresh = tape.mul(z, candidate)?;
        tape.add(kept, fresh)
    }
}

/// One GRU step outside any training context.
pub fn gru_cell_forward(store: &ParamStore, gru: &Gru, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
    if x.len() != gru.input_dim || h_prev.len() != gru.hidden_dim {
        return Err(Error::Shape {
            op: "gru_cell_forward",
            expected: format!("x: {}, h: {}", gru.input_dim, gru.hidden_dim),
            got: format!("x: {}, h: {}", x.len(), h_prev.len()),
        });
    }
    let mut tape = Tape::new(store);
    let xv = tape.constant(x.to_vec());
    let hv = tape.constant(h_prev.to_vec());
    let out = gru.step(&mut tape, xv, hv)?;
    Ok(tape.value(out).to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        store.add(&format!("{prefix}.w"), Array2::xavier(output_dim, input_dim, rng))?;
        store.add(&format!("{prefix}.b"), Array2::zeros(output_dim, 1))?;
        Self::from_store(store, prefix, input_dim, output_dim)
    }

    pub fn from_store(store: &ParamStore, prefix: &str, input_dim: usize, output_dim: usize) -> Result<Self> {
        Ok(Linear {
            w: lookup(store, &format!("{prefix}.w"), output_dim, input_dim)?,
            b: lookup(store, &format!("{prefix}.b"), output_dim, 1)?,
            input_dim,
            output_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let wx = tape.matvec(self.w, x)?;
        let b = tape.param(self.b);
        tape.add(wx, b)
    }
}

/// `W x + b` on plain slices.
pub fn linear_forward(x: &[f64], w: &Array2, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != w.rows() {
        return Err(Error::Shape {
            op: "linear_forward",
            expected: format!("bias of length {}", w.rows()),
            got: format!("{}", b.len()),
        });
    }
    let mut out = w.matvec(x)?;
    out.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
    Ok(out)
}

pub(crate) fn resolve(store: &ParamStore, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
    lookup(store, name, rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_gru(input: usize, hidden: usize) -> (ParamStore, Gru) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gru = Gru::register(&mut store, "g", input, hidden, &mut rng).unwrap();
        for id in gru.param_ids() {
            store.get_mut(id).fill(0.0);
        }
        (store, gru)
    }

    #[test]
    fn all_zero_gru_gives_zero_state() {
        let (store, gru) = zero_gru(3, 4);
        let h = gru_cell_forward(&store, &gru, &[0.0; 3], &[0.0; 4]).unwrap();
        assert_eq!(h, alloc::vec![0.0; 4]);
    }

    #[test]
    fn closed_update_gate_keeps_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gru = Gru::register(&mut store, "g", 3, 4, &mut rng).unwrap();
        store.get_mut(gru.b_z).fill(-1000.0);
        let h_prev = [0.3, -0.7, 0.1, 0.9];
        let h = gru_cell_forward(&store, &gru, &[5.0, -2.0, 1.0], &h_prev).unwrap();
        for (a, b) in h.iter().zip(&h_prev) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_dimension_mismatch() {
        let (store, gru) = zero_gru(3, 4);
        assert!(gru_cell_forward(&store, &gru, &[0.0; 2], &[0.0; 4]).is_err());
        assert!(gru_cell_forward(&store, &gru, &[0.0; 3], &[0.0; 5]).is_err());
    }

    #[test]
    fn from_store_checks_shapes() {
        let (store, _) = zero_gru(3, 4);
        assert!(Gru::from_store(&store, "g", 3, 4).is_ok());
        assert!(Gru::from_store(&store, "g", 2, 4).is_err());
        assert!(Gru::from_store(&store, "missing", 3, 4).is_err());
    }

    #[test]
    fn linear_identity_and_bias() {
        let w = Array2::identity(3);
        let x = [1.0, 2.0, 3.0];
        assert_eq!(linear_forward(&x, &w, &[0.0; 3]).unwrap(), x.to_vec());
        let w = Array2::from_vec(2, 3, alloc::vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(linear_forward(&[0.0; 3], &w, &[7.0, -1.0]).unwrap(), alloc::vec![7.0, -1.0]);
        assert!(linear_forward(&x, &w, &[0.0]).is_err());
    }
}
