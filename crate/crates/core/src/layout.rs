//! Reshaping of layer weights into 2-D matrices and carving of those
//! matrices into column subvectors.
//!
//! A conv weight with axes `(C_in, C_out, K, K)` becomes a
//! `(C_in * K^2, C_out)` matrix whose row `c * K^2 + ky * K + kx` of column
//! `o` holds `W[c, o, ky, kx]`. Every `K x K` filter therefore occupies
//! `K^2` contiguous rows of one column. Fully-connected weights are stored
//! `(C_in, C_out)` and map to the matrix unchanged.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor_io::{LayerKind, LayerMeta, TensorRecord};

/// Layer geometry carried alongside reshaped weights so they can be inverted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub kind: LayerKind,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Geometry {
    pub fn of(meta: &LayerMeta) -> Self {
        let kernel = if meta.kind == LayerKind::Fc { 1 } else { meta.kernel };
        Self { kind: meta.kind, kernel, c_in: meta.c_in, c_out: meta.c_out }
    }

    pub fn fc(c_in: usize, c_out: usize) -> Self {
        Self { kind: LayerKind::Fc, kernel: 1, c_in, c_out }
    }

    pub fn conv(kernel: usize, c_in: usize, c_out: usize) -> Self {
        Self { kind: LayerKind::Conv, kernel, c_in, c_out }
    }

    /// Rows of the reshaped matrix that belong to one input channel.
    pub fn kernel_area(&self) -> usize {
        self.kernel * self.kernel
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.kernel_area()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReshapedWeight {
    pub matrix: Array2<f64>,
    pub geometry: Geometry,
}

impl ReshapedWeight {
    pub fn from_matrix(matrix: Array2<f64>, geometry: Geometry) -> Self {
        assert_eq!(matrix.dim(), (geometry.rows(), geometry.c_out));
        Self { matrix, geometry }
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Reshapes a `(C_in, C_out, K, K)` tensor.
pub fn reshape_conv(values: &[f64], c_in: usize, c_out: usize, kernel: usize) -> ReshapedWeight {
    let area = kernel * kernel;
    assert_eq!(values.len(), c_in * c_out * area, "conv tensor size");
    let mut m = Array2::zeros((c_in * area, c_out));
    for c in 0..c_in {
        for o in 0..c_out {
            let src = &values[(c * c_out + o) * area..(c * c_out + o + 1) * area];
            for (p, &v) in src.iter().enumerate() {
                m[[c * area + p, o]] = v;
            }
        }
    }
    ReshapedWeight { matrix: m, geometry: Geometry::conv(kernel, c_in, c_out) }
}

/// Inverse of [`reshape_conv`]; returns values in `(C_in, C_out, K, K)` order.
pub fn unreshape_conv(w: &ReshapedWeight) -> Vec<f64> {
    let g = w.geometry;
    let area = g.kernel_area();
    let mut out = vec![0.0; g.c_in * g.c_out * area];
    for c in 0..g.c_in {
        for o in 0..g.c_out {
            for p in 0..area {
                out[(c * g.c_out + o) * area + p] = w.matrix[[c * area + p, o]];
            }
        }
    }
    out
}

/// Reshapes a stored weight tensor according to its layer kind.
///
/// Deconv weights are stored `(C_out, C_in, K, K)` and are transposed on the
/// channel axes before the conv reshape.
pub fn reshape_weight(values: &[f64], geometry: Geometry) -> Result<ReshapedWeight> {
    let Geometry { kind, kernel, c_in, c_out } = geometry;
    let expected = c_in * c_out * kernel * kernel;
    if values.len() != expected {
        return Err(Error::ShapeMismatch(format!("weight has {} values, expected {expected}", values.len())));
    }
    match kind {
        LayerKind::Fc => {
            let m = Array2::from_shape_vec((c_in, c_out), values.to_vec()).expect("sized above");
            Ok(ReshapedWeight { matrix: m, geometry })
        }
        LayerKind::Conv => Ok(reshape_conv(values, c_in, c_out, kernel)),
        LayerKind::Deconv => {
            let area = kernel * kernel;
            let mut swapped = vec![0.0; values.len()];
            for o in 0..c_out {
                for c in 0..c_in {
                    let src = (o * c_in + c) * area;
                    let dst = (c * c_out + o) * area;
                    swapped[dst..dst + area].copy_from_slice(&values[src..src + area]);
                }
            }
            let mut w = reshape_conv(&swapped, c_in, c_out, kernel);
            w.geometry.kind = LayerKind::Deconv;
            Ok(w)
        }
        other => Err(Error::UnsupportedLayerKind(other.to_string())),
    }
}

/// Inverse of [`reshape_weight`], in the stored axis order of the layer kind.
pub fn unreshape_weight(w: &ReshapedWeight) -> Vec<f64> {
    let g = w.geometry;
    match g.kind {
        LayerKind::Fc => w.matrix.iter().copied().collect(),
        LayerKind::Deconv => {
            let conv_order = unreshape_conv(w);
            let area = g.kernel_area();
            let mut out = vec![0.0; conv_order.len()];
            for c in 0..g.c_in {
                for o in 0..g.c_out {
                    let src = (c * g.c_out + o) * area;
                    let dst = (o * g.c_in + c) * area;
                    out[dst..dst + area].copy_from_slice(&conv_order[src..src + area]);
                }
            }
            out
        }
        _ => unreshape_conv(w),
    }
}

pub fn reshape_record(t: &TensorRecord, meta: &LayerMeta) -> Result<ReshapedWeight> {
    let geometry = Geometry::of(meta);
    if t.shape != meta.weight_shape() {
        return Err(Error::ShapeMismatch(format!(
            "`{}` has shape {:?}, expected {:?}",
            t.name,
            t.shape,
            meta.weight_shape()
        )));
    }
    reshape_weight(&t.to_f64(), geometry)
}

/// The `m_hat x n` grid of `d`-dimensional column subvectors of a matrix.
///
/// Subvector `(i, j)` covers rows `[i*d, (i+1)*d)` of column `j` and is
/// stored at flat index `s = j * m_hat + i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubvectorMatrix {
    pub d: usize,
    pub m_hat: usize,
    pub n: usize,
    pub data: Vec<f64>,
    pub geometry: Geometry,
}

impl SubvectorMatrix {
    pub fn len(&self) -> usize {
        self.m_hat * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, s: usize) -> &[f64] {
        &self.data[s * self.d..(s + 1) * self.d]
    }

    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        self.get(j * self.m_hat + i)
    }

    pub fn iter(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.d)
    }

    /// Builds a subvector set from raw vectors (no backing layer).
    pub fn from_vectors(d: usize, data: Vec<f64>) -> Self {
        assert!(d > 0 && data.len().is_multiple_of(d));
        let count = data.len() / d;
        Self { d, m_hat: 1, n: count, data, geometry: Geometry::fc(d, count) }
    }
}

/// Carves any matrix into subvectors without the filter-alignment check.
pub fn split_matrix(matrix: &Array2<f64>, d: usize, geometry: Geometry) -> Result<SubvectorMatrix> {
    let (rows, n) = matrix.dim();
    if d == 0 || rows % d != 0 {
        return Err(Error::IndivisibleBlockSize { rows, d, block: 1 });
    }
    let m_hat = rows / d;
    let mut data = Vec::with_capacity(rows * n);
    for j in 0..n {
        let col = matrix.column(j);
        data.extend(col.iter().copied());
    }
    Ok(SubvectorMatrix { d, m_hat, n, data, geometry })
}

pub fn split_subvectors(w: &ReshapedWeight, d: usize) -> Result<SubvectorMatrix> {
    let area = w.geometry.kernel_area();
    if d == 0 || !w.rows().is_multiple_of(d) || (area > 1 && !d.is_multiple_of(area)) {
        return Err(Error::IndivisibleBlockSize { rows: w.rows(), d, block: area });
    }
    split_matrix(&w.matrix, d, w.geometry)
}

pub fn merge_subvectors(s: &SubvectorMatrix) -> ReshapedWeight {
    let rows = s.m_hat * s.d;
    let mut m = Array2::zeros((rows, s.n));
    for j in 0..s.n {
        let col = &s.data[j * rows..(j + 1) * rows];
        for (r, &v) in col.iter().enumerate() {
            m[[r, j]] = v;
        }
    }
    ReshapedWeight { matrix: m, geometry: s.geometry }
}
