//! Nested rank-indexed linear layers.
//!
//! A weight `W` (`d_out × d_in`) is stored as factors `B` (`d_out × r_max`) and
//! `A` (`r_max × d_in`). Privilege `g` selects the prefix product
//! `W(g) = B[:, ..g] · A[..g, :]`, so the image of `W(g)` is contained in the
//! image of `W(g+1)` and lowering `g` strictly shrinks what the layer can
//! compute. Changing `g` touches no parameter data.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::engine::{Graph, ParamId, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizationReport {
    pub frobenius_error: f64,
    /// Full singular spectrum of the factorized matrix, descending.
    pub spectrum: Vec<f64>,
}

/// Best rank-`r` factorization `W ≈ B·A` with the singular values split evenly
/// (`A = S^½·Vᵀ`, `B = U·S^½`), factors ordered by descending singular value.
pub fn truncated_svd(w: &Tensor, r: usize) -> Result<(Tensor, Tensor, FactorizationReport)> {
    let (d_out, d_in) = w.dims2()?;
    let min_dim = d_out.min(d_in);
    if r == 0 || r > min_dim {
        return Err(Error::Argument(format!(
            "rank {r} outside 1..={min_dim} for a {d_out}x{d_in} matrix"
        )));
    }
    if !w.is_finite() {
        return Err(Error::Argument("matrix has non-finite entries".into()));
    }
    // Right singular vectors from the Gram matrix of the tall orientation;
    // nalgebra's bidiagonal SVD returns wrong factors for rank-deficient input.
    let m = DMatrix::from_row_slice(d_out, d_in, w.data());
    let tall = d_out >= d_in;
    let t = if tall { m } else { m.transpose() };
    let eig = SymmetricEigen::new(t.transpose() * &t);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    // (σ, v, t·v) per direction, descending.
    let dirs: Vec<(f64, DVector<f64>, DVector<f64>)> = order
        .iter()
        .map(|&i| {
            let v = eig.eigenvectors.column(i).into_owned();
            let tv = &t * &v;
            (tv.norm(), v, tv)
        })
        .collect();

    let mut a = vec![0.0; r * d_in];
    let mut b = vec![0.0; d_out * r];
    for (slot, (sigma, v, tv)) in dirs.iter().take(r).enumerate() {
        if *sigma == 0.0 {
            continue;
        }
        let root = sigma.sqrt();
        // In the tall orientation v spans the input side; otherwise the roles swap.
        let (input, output) = if tall { (v * root, tv / root) } else { (tv / root, v * root) };
        for j in 0..d_in {
            a[slot * d_in + j] = input[j];
        }
        for i in 0..d_out {
            b[i * r + slot] = output[i];
        }
    }
    let a = Tensor::new(vec![r, d_in], a)?;
    let b = Tensor::new(vec![d_out, r], b)?;

    let approx = crate::engine::matmul(&b, &a)?;
    let frobenius_error = w
        .data()
        .iter()
        .zip(approx.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let spectrum = dirs.iter().map(|d| d.0).collect();
    Ok((
        a,
        b,
        FactorizationReport {
            frobenius_error,
            spectrum,
        },
    ))
}

/// A linear map re-parameterized as nested prefix factors.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedLinear {
    a: ParamId,
    b: ParamId,
    d_in: usize,
    d_out: usize,
    r_max: usize,
    active_rank: usize,
}

impl NestedLinear {
    /// Registers `a` (`r_max × d_in`) and `b` (`d_out × r_max`) as `{prefix}.a` / `{prefix}.b`.
    pub fn register(store: &mut ParameterStore, prefix: &str, a: Tensor, b: Tensor) -> Result<Self> {
        let (r_max, d_in) = a.dims2()?;
        let (d_out, r_b) = b.dims2()?;
        if r_b != r_max {
            return Err(Error::Dimension(format!(
                "factor ranks disagree: A {:?}, B {:?}",
                a.shape(),
                b.shape()
            )));
        }
        if r_max == 0 || r_max > d_in.min(d_out) {
            return Err(Error::Argument(format!(
                "r_max {r_max} outside 1..={}",
                d_in.min(d_out)
            )));
        }
        let a = store.insert(format!("{prefix}.a"), a)?;
        let b = store.insert(format!("{prefix}.b"), b)?;
        Ok(Self {
            a,
            b,
            d_in,
            d_out,
            r_max,
            active_rank: r_max,
        })
    }

    /// Re-attaches to factors already present in `store` (e.g. after loading a checkpoint).
    pub fn attach(store: &ParameterStore, prefix: &str) -> Result<Self> {
        let a = store.id(&format!("{prefix}.a"))?;
        let b = store.id(&format!("{prefix}.b"))?;
        let (r_max, d_in) = store.get(a).dims2()?;
        let (d_out, r_b) = store.get(b).dims2()?;
        if r_b != r_max {
            return Err(Error::Dimension(format!("factor ranks disagree under {prefix}")));
        }
        Ok(Self {
            a,
            b,
            d_in,
            d_out,
            r_max,
            active_rank: r_max,
        })
    }

    /// SVD-initialized layer approximating `w`.
    pub fn from_weight(
        store: &mut ParameterStore,
        prefix: &str,
        w: &Tensor,
        r_max: usize,
    ) -> Result<(Self, FactorizationReport)> {
        let (a, b, report) = truncated_svd(w, r_max)?;
        Ok((Self::register(store, prefix, a, b)?, report))
    }

    pub fn a(&self) -> ParamId {
        self.a
    }

    pub fn b(&self) -> ParamId {
        self.b
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn r_max(&self) -> usize {
        self.r_max
    }

    pub fn active_rank(&self) -> usize {
        self.active_rank
    }

    fn check_rank(&self, g: usize) -> Result<()> {
        if g > self.r_max {
            return Err(Error::Argument(format!(
                "privilege {g} outside 0..={}",
                self.r_max
            )));
        }
        Ok(())
    }

    /// Sets the active prefix rank. Only this field changes.
    pub fn set_privilege(&mut self, g: usize) -> Result<()> {
        self.check_rank(g)?;
        self.active_rank = g;
        Ok(())
    }

    /// Materializes `Σ_{i<g} B[:, i]·A[i, :]`.
    pub fn effective_weight(&self, store: &ParameterStore, g: usize) -> Result<Tensor> {
        self.check_rank(g)?;
        let a = store.get(self.a).data();
        let b = store.get(self.b).data();
        let mut w = vec![0.0; self.d_out * self.d_in];
        for (o, row) in w.chunks_exact_mut(self.d_in).enumerate() {
            for i in 0..g {
                let coeff = b[o * self.r_max + i];
                let a_row = &a[i * self.d_in..(i + 1) * self.d_in];
                row.iter_mut().zip(a_row).for_each(|(w, a)| *w += coeff * a);
            }
        }
        Tensor::new(vec![self.d_out, self.d_in], w)
    }

    /// Records `x · W(g)ᵀ` as two skinny products `(x·A_gᵀ)·B_gᵀ`.
    pub fn forward(&self, graph: &mut Graph, x: Var, g: usize) -> Result<Var> {
        self.check_rank(g)?;
        let (_, cols) = graph.shape(x);
        if cols != self.d_in {
            return Err(Error::Dimension(format!(
                "input width {cols} for a layer with d_in {}",
                self.d_in
            )));
        }
        let a = graph.param(self.a)?;
        let b = graph.param(self.b)?;
        let h = graph.linear(x, a, g, self.d_in)?;
        graph.linear(h, b, self.d_out, g)
    }

    /// [`forward`](Self::forward) at the currently active rank.
    pub fn forward_active(&self, graph: &mut Graph, x: Var) -> Result<Var> {
        self.forward(graph, x, self.active_rank)
    }

    /// Tape-free evaluation of `x · W(g)ᵀ` for a `rows × d_in` tensor.
    pub fn apply(&self, store: &ParameterStore, x: &Tensor, g: usize) -> Result<Tensor> {
        let mut graph = Graph::new(store);
        let xv = graph.constant(x)?;
        let y = self.forward(&mut graph, xv, g)?;
        Ok(graph.to_tensor(y))
    }
}
