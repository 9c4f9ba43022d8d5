use crate::tensor::{SparseMatrix, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PropagationMode {
    /// `D⁻¹(A + I)`, with `D` the degree matrix of `A + I`.
    RowStochastic,
    /// `D^{-1/2} A D^{-1/2}`; rows of isolated nodes are zero.
    Symmetric,
}

impl PropagationMode {
    /// Normalized operator for a square 0/1 adjacency.
    pub fn operator(self, adjacency: &SparseMatrix) -> SparseMatrix {
        let n = adjacency.rows();
        match self {
            PropagationMode::RowStochastic => {
                let mut t = Vec::with_capacity(adjacency.nnz() + n);
                for r in 0..n {
                    let deg: f64 = 1.0 + adjacency.row(r).map(|(_, v)| v).sum::<f64>();
                    t.push((r, r, 1.0 / deg));
                    t.extend(adjacency.row(r).map(|(c, v)| (r, c, v / deg)));
                }
                SparseMatrix::from_triplets(n, n, t)
            }
            PropagationMode::Symmetric => {
                let inv_sqrt: Vec<f64> = (0..n)
                    .map(|r| {
                        let d: f64 = adjacency.row(r).map(|(_, v)| v).sum();
                        if d > 0.0 {
                            1.0 / d.sqrt()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let mut t = Vec::with_capacity(adjacency.nnz());
                for r in 0..n {
                    t.extend(adjacency.row(r).map(|(c, v)| (r, c, inv_sqrt[r] * v * inv_sqrt[c])));
                }
                SparseMatrix::from_triplets(n, n, t)
            }
        }
    }
}

/// One normalized propagation step over `adjacency`.
pub fn normalized_propagate(adjacency: &SparseMatrix, features: &Tensor, mode: PropagationMode) -> Result<Tensor, TensorError> {
    let (rows, cols) = features.matrix_dims()?;
    if rows != adjacency.cols() || adjacency.rows() != adjacency.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "normalized_propagate",
            detail: format!(
                "adjacency {}x{} vs features {}x{}",
                adjacency.rows(),
                adjacency.cols(),
                rows,
                cols
            ),
        });
    }
    let out = mode.operator(adjacency).matmul_dense(&features.to_f64(), cols);
    Tensor::from_f64(vec![rows, cols], &out)
}
