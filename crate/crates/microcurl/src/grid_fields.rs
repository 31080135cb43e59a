//! Structured-grid discrete fields over a box domain and the mimetic
//! one-sided difference operators Grad, Curl, Div.
//!
//! All three primal operators use forward differences (with the stencil
//! dropped to zero on the last plane of each axis), so the complex
//! identities curl∘grad = 0 and div∘curl = 0 hold by stencil cancellation:
//! the mixed forward differences commute. The adjoint operators
//! ([`curl_h_adjoint`], [`grad_h_adjoint`]) are the exact transposes under
//! the h^3-weighted inner product and are built from backward differences
//! with one-sided boundary rows; they carry the summation-by-parts
//! structure used by the weak forms.

use crate::tensor3::Tensor3;
use crate::{Error, Result};

/// Axis-aligned box faces usable as the Dirichlet part of the boundary.
/// Order: x-min, x-max, y-min, y-max, z-min, z-max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct GammaD {
    pub faces: [bool; 6],
}

impl GammaD {
    pub const EMPTY: GammaD = GammaD { faces: [false; 6] };

    pub fn from_faces(faces: [bool; 6]) -> Self {
        GammaD { faces }
    }

    /// Parses a comma-separated face list, e.g. "zmin,zmax" or "none".
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut faces = [false; 6];
        let t = text.trim();
        if t.is_empty() || t == "none" {
            return Ok(GammaD { faces });
        }
        if t == "all" {
            return Ok(GammaD { faces: [true; 6] });
        }
        for part in t.split(',') {
            let idx = match part.trim() {
                "xmin" => 0,
                "xmax" => 1,
                "ymin" => 2,
                "ymax" => 3,
                "zmin" => 4,
                "zmax" => 5,
                other => return Err(format!("unknown boundary face '{other}' (expected xmin/xmax/ymin/ymax/zmin/zmax, 'all' or 'none')")),
            };
            faces[idx] = true;
        }
        Ok(GammaD { faces })
    }

    pub fn is_empty(&self) -> bool {
        !self.faces.iter().any(|&f| f)
    }

    pub fn names(&self) -> Vec<&'static str> {
        const NAMES: [&str; 6] = ["xmin", "xmax", "ymin", "ymax", "zmin", "zmax"];
        (0..6).filter(|&f| self.faces[f]).map(|f| NAMES[f]).collect()
    }
}

/// Uniform structured grid of nodes over an axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub h: f64,
    pub gamma_d: GammaD,
}

impl Grid {
    /// Node counts must be at least 2 per axis and the spacing positive.
    /// An empty gamma_d is permitted (the Korn estimator probes that case
    /// deliberately); the solver validates non-emptiness separately.
    pub fn new(dims: [usize; 3], h: f64, gamma_d: GammaD) -> Result<Self> {
        if dims.iter().any(|&n| n < 2) {
            return Err(Error::Validation(format!(
                "grid needs at least 2 nodes per axis, got {dims:?}"
            )));
        }
        if !(h > 0.0) {
            return Err(Error::Validation(format!("grid spacing must be positive, got {h}")));
        }
        Ok(Grid { dims, h, gamma_d })
    }

    pub fn cube(n: usize, h: f64, gamma_d: GammaD) -> Result<Self> {
        Self::new([n, n, n], h, gamma_d)
    }

    pub fn node_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let j = (idx / self.dims[2]) % self.dims[1];
        let i = idx / (self.dims[1] * self.dims[2]);
        [i, j, k]
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => self.dims[1] * self.dims[2],
            1 => self.dims[2],
            _ => 1,
        }
    }

    /// Position of a node in physical space (box corner at the origin).
    pub fn position(&self, c: [usize; 3]) -> [f64; 3] {
        [c[0] as f64 * self.h, c[1] as f64 * self.h, c[2] as f64 * self.h]
    }

    /// Quadrature weight of one node.
    pub fn weight(&self) -> f64 {
        self.h * self.h * self.h
    }

    /// True if the node lies on some Gamma_D face.
    pub fn on_gamma_d(&self, c: [usize; 3]) -> bool {
        for axis in 0..3 {
            if self.gamma_d.faces[2 * axis] && c[axis] == 0 {
                return true;
            }
            if self.gamma_d.faces[2 * axis + 1] && c[axis] == self.dims[axis] - 1 {
                return true;
            }
        }
        false
    }

    /// Axes whose Gamma_D faces contain this node (face normals).
    pub fn gamma_d_axes(&self, c: [usize; 3]) -> [bool; 3] {
        let mut axes = [false; 3];
        for axis in 0..3 {
            if (self.gamma_d.faces[2 * axis] && c[axis] == 0)
                || (self.gamma_d.faces[2 * axis + 1] && c[axis] == self.dims[axis] - 1)
            {
                axes[axis] = true;
            }
        }
        axes
    }

    pub fn for_each_node(&self, mut f: impl FnMut([usize; 3], usize)) {
        let mut idx = 0;
        for i in 0..self.dims[0] {
            for j in 0..self.dims[1] {
                for k in 0..self.dims[2] {
                    f([i, j, k], idx);
                    idx += 1;
                }
            }
        }
    }
}

/// One 3-vector per node.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField3 {
    pub n: [usize; 3],
    pub data: Vec<[f64; 3]>,
}

impl VectorField3 {
    pub fn zero(grid: &Grid) -> Self {
        VectorField3 {
            n: grid.dims,
            data: vec![[0.0; 3]; grid.node_count()],
        }
    }

    pub fn from_fn(grid: &Grid, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        let mut out = Self::zero(grid);
        grid.for_each_node(|c, idx| out.data[idx] = f(grid.position(c)));
        out
    }

    pub fn matches(&self, grid: &Grid) -> bool {
        self.n == grid.dims && self.data.len() == grid.node_count()
    }
}

/// One 3x3 tensor per node.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField3 {
    pub n: [usize; 3],
    pub data: Vec<Tensor3>,
}

impl TensorField3 {
    pub fn zero(grid: &Grid) -> Self {
        TensorField3 {
            n: grid.dims,
            data: vec![Tensor3::ZERO; grid.node_count()],
        }
    }

    pub fn constant(grid: &Grid, t: Tensor3) -> Self {
        TensorField3 {
            n: grid.dims,
            data: vec![t; grid.node_count()],
        }
    }

    pub fn from_fn(grid: &Grid, mut f: impl FnMut([f64; 3]) -> Tensor3) -> Self {
        let mut out = Self::zero(grid);
        grid.for_each_node(|c, idx| out.data[idx] = f(grid.position(c)));
        out
    }

    pub fn matches(&self, grid: &Grid) -> bool {
        self.n == grid.dims && self.data.len() == grid.node_count()
    }
}

/// Forward difference along `axis` of one scalar component accessed by
/// `get`, evaluated at the node with linear index `idx` and coordinates `c`.
/// The stencil is dropped to zero on the last plane of the axis; this is
/// what makes the mixed differences commute exactly.
#[inline]
fn dfwd(
    grid: &Grid,
    c: [usize; 3],
    idx: usize,
    axis: usize,
    inv_h: f64,
    get: impl Fn(usize) -> f64,
) -> f64 {
    if c[axis] + 1 < grid.dims[axis] {
        (get(idx + grid.stride(axis)) - get(idx)) * inv_h
    } else {
        0.0
    }
}

/// Transpose of [`dfwd`] under the plain dot product: backward difference
/// in the interior with one-sided boundary rows.
#[inline]
fn dfwd_t(
    grid: &Grid,
    c: [usize; 3],
    idx: usize,
    axis: usize,
    inv_h: f64,
    get: impl Fn(usize) -> f64,
) -> f64 {
    let n = grid.dims[axis];
    let s = grid.stride(axis);
    if c[axis] == 0 {
        -get(idx) * inv_h
    } else if c[axis] == n - 1 {
        get(idx - s) * inv_h
    } else {
        (get(idx - s) - get(idx)) * inv_h
    }
}

/// Discrete gradient: row i of the result approximates grad(u_i).
/// Exact for affine u wherever the forward stencil is complete.
pub fn grad_h(grid: &Grid, u: &VectorField3) -> TensorField3 {
    debug_assert!(u.matches(grid));
    let inv_h = 1.0 / grid.h;
    let mut out = TensorField3::zero(grid);
    grid.for_each_node(|c, idx| {
        let mut t = Tensor3::ZERO;
        for i in 0..3 {
            for m in 0..3 {
                t.a[i][m] = dfwd(grid, c, idx, m, inv_h, |q| u.data[q][i]);
            }
        }
        out.data[idx] = t;
    });
    out
}

/// Row-wise discrete curl: row i of the result is curl of row i of X,
/// built from the same forward differences as [`grad_h`] so that
/// curl_h(grad_h(u)) = 0 by stencil cancellation.
pub fn curl_h(grid: &Grid, x: &TensorField3) -> TensorField3 {
    debug_assert!(x.matches(grid));
    let inv_h = 1.0 / grid.h;
    let mut out = TensorField3::zero(grid);
    grid.for_each_node(|c, idx| {
        let mut t = Tensor3::ZERO;
        for i in 0..3 {
            let d = |axis: usize, m: usize| dfwd(grid, c, idx, axis, inv_h, |q| x.data[q].a[i][m]);
            t.a[i][0] = d(1, 2) - d(2, 1);
            t.a[i][1] = d(2, 0) - d(0, 2);
            t.a[i][2] = d(0, 1) - d(1, 0);
        }
        out.data[idx] = t;
    });
    out
}

/// Row-wise discrete divergence, part of the forward-difference primal
/// complex: div_h(curl_h(X)) = 0 identically (discrete Bianchi identity).
/// The summation-by-parts partner of [`grad_h`] is [`grad_h_adjoint`].
pub fn div_h(grid: &Grid, x: &TensorField3) -> VectorField3 {
    debug_assert!(x.matches(grid));
    let inv_h = 1.0 / grid.h;
    let mut out = VectorField3::zero(grid);
    grid.for_each_node(|c, idx| {
        for i in 0..3 {
            let mut s = 0.0;
            for m in 0..3 {
                s += dfwd(grid, c, idx, m, inv_h, |q| x.data[q].a[i][m]);
            }
            out.data[idx][i] = s;
        }
    });
    out
}

/// Exact transpose of [`curl_h`] under the h^3-weighted inner product:
/// <curl_h X, Y>_h = <X, curl_h_adjoint(Y)>_h for all X, Y.
pub fn curl_h_adjoint(grid: &Grid, y: &TensorField3) -> TensorField3 {
    debug_assert!(y.matches(grid));
    let inv_h = 1.0 / grid.h;
    let mut out = TensorField3::zero(grid);
    grid.for_each_node(|c, idx| {
        let mut t = Tensor3::ZERO;
        for i in 0..3 {
            let dt = |axis: usize, k: usize| dfwd_t(grid, c, idx, axis, inv_h, |q| y.data[q].a[i][k]);
            t.a[i][0] = dt(2, 1) - dt(1, 2);
            t.a[i][1] = dt(0, 2) - dt(2, 0);
            t.a[i][2] = dt(1, 0) - dt(0, 1);
        }
        out.data[idx] = t;
    });
    out
}

/// Exact transpose of [`grad_h`]: <grad_h u, X>_h = <u, grad_h_adjoint(X)>_h
/// for all u, X. Its negative is the backward-difference divergence used in
/// weak-form equilibrium residuals.
pub fn grad_h_adjoint(grid: &Grid, x: &TensorField3) -> VectorField3 {
    debug_assert!(x.matches(grid));
    let inv_h = 1.0 / grid.h;
    let mut out = VectorField3::zero(grid);
    grid.for_each_node(|c, idx| {
        for i in 0..3 {
            let mut s = 0.0;
            for m in 0..3 {
                s += dfwd_t(grid, c, idx, m, inv_h, |q| x.data[q].a[i][m]);
            }
            out.data[idx][i] = s;
        }
    });
    out
}

/// Zeroes the degrees of freedom carrying the tangential trace X x n on
/// Gamma_D faces: on a face with normal along `axis`, the in-face row
/// components X_im with m != axis vanish. Idempotent.
pub fn apply_tangential_bc(grid: &Grid, x: &TensorField3) -> TensorField3 {
    let mut out = x.clone();
    project_tangential_bc(grid, &mut out);
    out
}

/// In-place form of [`apply_tangential_bc`].
pub fn project_tangential_bc(grid: &Grid, x: &mut TensorField3) {
    debug_assert!(x.matches(grid));
    grid.for_each_node(|c, idx| {
        let axes = grid.gamma_d_axes(c);
        for (axis, &on) in axes.iter().enumerate() {
            if on {
                for i in 0..3 {
                    for m in 0..3 {
                        if m != axis {
                            x.data[idx].a[i][m] = 0.0;
                        }
                    }
                }
            }
        }
    });
}

/// h^3-weighted L2 inner product of two tensor fields.
pub fn inner_l2(grid: &Grid, a: &TensorField3, b: &TensorField3) -> Result<f64> {
    if !a.matches(grid) || !b.matches(grid) || a.n != b.n {
        return Err(Error::Validation(format!(
            "inner_l2: field layouts {:?} / {:?} do not match grid {:?}",
            a.n, b.n, grid.dims
        )));
    }
    let mut s = 0.0;
    for (ta, tb) in a.data.iter().zip(&b.data) {
        s += ta.inner(tb);
    }
    Ok(s * grid.weight())
}

/// h^3-weighted L2 inner product of two vector fields.
pub fn inner_l2_vec(grid: &Grid, a: &VectorField3, b: &VectorField3) -> Result<f64> {
    if !a.matches(grid) || !b.matches(grid) || a.n != b.n {
        return Err(Error::Validation(format!(
            "inner_l2_vec: field layouts {:?} / {:?} do not match grid {:?}",
            a.n, b.n, grid.dims
        )));
    }
    let mut s = 0.0;
    for (va, vb) in a.data.iter().zip(&b.data) {
        s += va[0] * vb[0] + va[1] * vb[1] + va[2] * vb[2];
    }
    Ok(s * grid.weight())
}

pub fn norm_l2(grid: &Grid, a: &TensorField3) -> f64 {
    inner_l2(grid, a, a).expect("layout checked by caller").sqrt()
}

pub fn norm_l2_vec(grid: &Grid, a: &VectorField3) -> f64 {
    inner_l2_vec(grid, a, a).expect("layout checked by caller").sqrt()
}
