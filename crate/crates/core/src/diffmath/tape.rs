use nalgebra::Matrix3;

use super::polar::{polar_factor, PolarFactor};
use super::real::Real;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A matrix view into one of the tape's parameter blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef {
    pub block: usize,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamRef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} matrix from {} values",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Column layout of a composite node's output rows.
pub const COMPOSITE_COLOR: usize = 0;
pub const COMPOSITE_DEPTH: usize = 3;
pub const COMPOSITE_OPACITY: usize = 4;
pub const COMPOSITE_SEMANTIC: usize = 5;

/// Ray structure for a composite node: samples of ray `r` occupy rows
/// `ray_starts[r]..ray_starts[r + 1]` of the per-sample inputs, ordered by
/// distance along the ray.
#[derive(Clone, Debug)]
pub struct CompositeSpec<T> {
    pub ray_starts: Vec<usize>,
    pub t: Vec<T>,
    pub delta: Vec<T>,
    pub background: [T; 3],
    /// Logits composited against the residual transmittance; empty for none.
    pub background_semantic: Vec<T>,
    /// Divide the depth channel by opacity.
    pub normalize_depth: bool,
}

impl<T: Real> CompositeSpec<T> {
    pub fn num_rays(&self) -> usize {
        self.ray_starts.len().saturating_sub(1)
    }
}

const DEPTH_EPS: f64 = 1e-10;

/// Front-to-back "over" compositing of per-sample channels.
///
/// Inputs are per-sample slices: density `n`, color `n x 3`, semantic
/// `n x sem_cols`, instance `n x inst_cols`. Output is one row per ray laid
/// out as `[r, g, b, depth, opacity, semantic.., instance..]`.
pub fn composite_forward<T: Real>(
    spec: &CompositeSpec<T>,
    density: &[T],
    color: &[T],
    semantic: &[T],
    sem_cols: usize,
    instance: &[T],
    inst_cols: usize,
) -> Mat<T> {
    let rays = spec.num_rays();
    let width = COMPOSITE_SEMANTIC + sem_cols + inst_cols;
    let mut out = Mat::zeros(rays, width);
    for r in 0..rays {
        let row = &mut out.data[r * width..(r + 1) * width];
        let mut transmittance = T::one();
        let mut depth = T::zero();
        let mut opacity = T::zero();
        for j in spec.ray_starts[r]..spec.ray_starts[r + 1] {
            let tau = density[j] * spec.delta[j];
            let decay = (-tau).exp();
            let w = transmittance * (T::one() - decay);
            transmittance = transmittance * decay;
            for c in 0..3 {
                row[COMPOSITE_COLOR + c] += w * color[3 * j + c];
            }
            depth += w * spec.t[j];
            opacity += w;
            for c in 0..sem_cols {
                row[COMPOSITE_SEMANTIC + c] += w * semantic[j * sem_cols + c];
            }
            for c in 0..inst_cols {
                row[COMPOSITE_SEMANTIC + sem_cols + c] += w * instance[j * inst_cols + c];
            }
        }
        let residual = T::one() - opacity;
        for c in 0..3 {
            row[COMPOSITE_COLOR + c] += residual * spec.background[c];
        }
        if !spec.background_semantic.is_empty() {
            for c in 0..sem_cols {
                row[COMPOSITE_SEMANTIC + c] += residual * spec.background_semantic[c];
            }
        }
        row[COMPOSITE_DEPTH] = if spec.normalize_depth {
            depth / opacity.max(T::from_f64_lossy(DEPTH_EPS))
        } else {
            depth
        };
        row[COMPOSITE_OPACITY] = opacity;
    }
    out
}

enum Op<T: Real> {
    Input,
    Param(ParamRef),
    Linear {
        x: NodeId,
        w: ParamRef,
        b: ParamRef,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Concat(NodeId, NodeId),
    Columns {
        x: NodeId,
        start: usize,
    },
    Encode {
        x: NodeId,
        freqs: usize,
    },
    Gather {
        x: NodeId,
        rows: Vec<usize>,
    },
    ScatterAdd {
        parts: Vec<(NodeId, Vec<usize>)>,
    },
    OneHotScaled {
        x: NodeId,
        col: usize,
    },
    PoseInterp {
        a: ParamRef,
        b: ParamRef,
        w: f64,
        polar: Box<PolarFactor>,
    },
    ToBox {
        pose: NodeId,
        world: Vec<T>,
        inv_half: [T; 3],
    },
    DirToBox {
        pose: NodeId,
        dirs: Vec<T>,
    },
    Composite {
        density: NodeId,
        color: NodeId,
        semantic: Option<NodeId>,
        instance: Option<NodeId>,
        spec: Box<CompositeSpec<T>>,
    },
    SumSquares {
        x: NodeId,
        target: Vec<T>,
        scale: T,
    },
    SoftmaxCe {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        scale: T,
    },
    Sum(NodeId),
    Combine(Vec<(NodeId, T)>),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Concat(..) => "concat",
            Op::Columns { .. } => "columns",
            Op::Encode { .. } => "encode",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::OneHotScaled { .. } => "one_hot_scaled",
            Op::PoseInterp { .. } => "pose_interp",
            Op::ToBox { .. } => "to_box",
            Op::DirToBox { .. } => "dir_to_box",
            Op::Composite { .. } => "composite",
            Op::SumSquares { .. } => "sum_squares",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
            Op::Combine(_) => "combine",
        }
    }
}

struct Node<T: Real> {
    value: Mat<T>,
    op: Op<T>,
}

/// Records a batched computation over read-only parameter blocks and
/// produces exact reverse-mode gradients for every block.
///
/// A tape is single-threaded. Several tapes may share the same blocks; the
/// caller sums their gradients.
pub struct Tape<'p, T: Real> {
    blocks: Vec<&'p [T]>,
    nodes: Vec<Node<T>>,
    eager_checks: bool,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(blocks: Vec<&'p [T]>) -> Self {
        Self {
            blocks,
            nodes: Vec::new(),
            eager_checks: false,
        }
    }

    /// Checks every node for non-finite values as it is recorded, instead of
    /// only at the loss.
    pub fn with_eager_checks(mut self, on: bool) -> Self {
        self.eager_checks = on;
        self
    }

    pub fn value(&self, id: NodeId) -> &Mat<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn block(&self, i: usize) -> &'p [T] {
        self.blocks[i]
    }

    fn param(&self, p: ParamRef) -> &'p [T] {
        &self.blocks[p.block][p.range()]
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Result<NodeId> {
        let id = self.nodes.len();
        if self.eager_checks && !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node: id,
            });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(id))
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows, v.cols)
    }

    fn expect_cols(&self, id: NodeId, cols: usize, what: &str) -> Result<usize> {
        let (rows, c) = self.shape(id);
        if c != cols {
            return Err(Error::DimensionMismatch(format!(
                "{what}: expected {cols} columns, found {c}"
            )));
        }
        Ok(rows)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Mat<T>) -> Result<NodeId> {
        self.push(value, Op::Input)
    }

    /// A parameter segment as a node.
    pub fn param_node(&mut self, p: ParamRef) -> Result<NodeId> {
        let value = Mat::from_vec(p.rows, p.cols, self.param(p).to_vec())?;
        self.push(value, Op::Param(p))
    }

    /// `x W + b` with `W` stored `in x out` and `b` of length `out`.
    pub fn linear(&mut self, x: NodeId, w: ParamRef, b: ParamRef) -> Result<NodeId> {
        let rows = self.expect_cols(x, w.rows, "linear input")?;
        if b.len() != w.cols {
            return Err(Error::DimensionMismatch("linear bias".into()));
        }
        let (k, n) = (w.rows, w.cols);
        let bias = self.param(b);
        let weight = self.param(w);
        let mut out = Mat::zeros(rows, n);
        for r in 0..rows {
            out.data[r * n..(r + 1) * n].copy_from_slice(bias);
        }
        if rows > 0 && n > 0 && k > 0 {
            let xv = &self.nodes[x.0].value.data;
            T::gemm(
                rows,
                k,
                n,
                xv,
                k as isize,
                1,
                weight,
                n as isize,
                1,
                T::one(),
                &mut out.data,
            );
        }
        self.push(out, Op::Linear { x, w, b })
    }

    fn map_unary(&mut self, x: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let out = Mat {
            rows: v.rows,
            cols: v.cols,
            data: v.data.iter().map(|&a| f(a)).collect(),
        };
        self.push(out, op)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, |a| a.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, sigmoid_t, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, softplus_t, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, |a| a.exp(), Op::Exp(x))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> Result<NodeId> {
        self.map_unary(x, |a| a * s, Op::Scale(x, s))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::DimensionMismatch(format!(
                "{}: {:?} vs {:?}",
                op.name(),
                self.shape(a),
                self.shape(b)
            )));
        }
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = Mat {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect(),
        };
        self.push(out, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::DimensionMismatch(format!("concat rows {ra} vs {rb}")));
        }
        let cols = ca + cb;
        let mut out = Mat::zeros(ra, cols);
        {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            for r in 0..ra {
                out.data[r * cols..r * cols + ca].copy_from_slice(va.row(r));
                out.data[r * cols + ca..(r + 1) * cols].copy_from_slice(vb.row(r));
            }
        }
        self.push(out, Op::Concat(a, b))
    }

    /// Columns `start..start + len` of `x`.
    pub fn columns(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if start + len > cols {
            return Err(Error::DimensionMismatch(format!(
                "columns {start}..{} of {cols}",
                start + len
            )));
        }
        let mut out = Mat::zeros(rows, len);
        {
            let v = &self.nodes[x.0].value;
            for r in 0..rows {
                out.data[r * len..(r + 1) * len]
                    .copy_from_slice(&v.row(r)[start..start + len]);
            }
        }
        self.push(out, Op::Columns { x, start })
    }

    /// Windowed positional encoding of `n x 3` rows:
    /// `[x, w_0 sin(pi x), w_0 cos(pi x), .., w_{L-1} sin(2^{L-1} pi x), ..]`.
    pub fn encode(&mut self, x: NodeId, freqs: usize, alpha: T) -> Result<NodeId> {
        let rows = self.expect_cols(x, 3, "encode")?;
        let cols = 3 + 6 * freqs;
        let weights = band_weights(freqs, alpha);
        let mut out = Mat::zeros(rows, cols);
        {
            let v = &self.nodes[x.0].value;
            let pi = T::from_f64_lossy(std::f64::consts::PI);
            for r in 0..rows {
                let src = v.row(r);
                let dst = &mut out.data[r * cols..(r + 1) * cols];
                dst[..3].copy_from_slice(src);
                let mut freq = pi;
                for (j, &w) in weights.iter().enumerate() {
                    let base = 3 + 6 * j;
                    for c in 0..3 {
                        let (s, co) = (freq * src[c]).sin_cos();
                        dst[base + c] = w * s;
                        dst[base + 3 + c] = w * co;
                    }
                    freq = freq + freq;
                }
            }
        }
        self.push(out, Op::Encode { x, freqs })
    }

    pub fn gather(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let (n, cols) = self.shape(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::IndexOutOfRange { index: bad, len: n });
        }
        let mut out = Mat::zeros(rows.len(), cols);
        {
            let v = &self.nodes[x.0].value;
            for (i, &r) in rows.iter().enumerate() {
                out.data[i * cols..(i + 1) * cols].copy_from_slice(v.row(r));
            }
        }
        self.push(out, Op::Gather { x, rows })
    }

    /// `rows x cols` zeros with row `targets[i]` of each part accumulating
    /// row `i` of that part's node.
    pub fn scatter_add(
        &mut self,
        rows: usize,
        cols: usize,
        parts: Vec<(NodeId, Vec<usize>)>,
    ) -> Result<NodeId> {
        let mut out = Mat::zeros(rows, cols);
        for (node, targets) in &parts {
            let v = &self.nodes[node.0].value;
            if v.cols != cols || v.rows != targets.len() {
                return Err(Error::DimensionMismatch("scatter_add part".into()));
            }
            for (i, &t) in targets.iter().enumerate() {
                if t >= rows {
                    return Err(Error::IndexOutOfRange { index: t, len: rows });
                }
                let dst = &mut out.data[t * cols..(t + 1) * cols];
                for (d, &s) in dst.iter_mut().zip(v.row(i)) {
                    *d += s;
                }
            }
        }
        self.push(out, Op::ScatterAdd { parts })
    }

    /// Expands an `n x 1` column into `n x width` with the value at `col`
    /// and zeros elsewhere.
    pub fn one_hot_scaled(&mut self, x: NodeId, col: usize, width: usize) -> Result<NodeId> {
        let rows = self.expect_cols(x, 1, "one_hot_scaled")?;
        if col >= width {
            return Err(Error::IndexOutOfRange { index: col, len: width });
        }
        let mut out = Mat::zeros(rows, width);
        {
            let v = &self.nodes[x.0].value;
            for r in 0..rows {
                out.data[r * width + col] = v.data[r];
            }
        }
        self.push(out, Op::OneHotScaled { x, col })
    }

    /// Pose between two keyframe blocks, each 12 values (row-major rotation
    /// then translation). Translation is blended linearly; the rotation is
    /// blended elementwise and projected back onto SO(3). At `w == 0` or
    /// `w == 1` the keyframe passes through untouched.
    pub fn pose_interp(&mut self, a: ParamRef, b: ParamRef, w: f64) -> Result<NodeId> {
        if a.len() != 12 || b.len() != 12 {
            return Err(Error::DimensionMismatch("pose blocks hold 12 values".into()));
        }
        if w <= 0.0 {
            return self.param_node(a);
        }
        if w >= 1.0 {
            return self.param_node(b);
        }
        let (pa, pb) = (self.param(a), self.param(b));
        let wt = T::from_f64_lossy(w);
        let blend: Vec<f64> = pa
            .iter()
            .zip(pb)
            .map(|(&x, &y)| ((T::one() - wt) * x + wt * y).as_f64())
            .collect();
        let m = Matrix3::from_row_slice(&blend[..9]);
        let polar = polar_factor(&m)?;
        let r = polar.rotation();
        let mut data = Vec::with_capacity(12);
        for i in 0..3 {
            for j in 0..3 {
                data.push(T::from_f64_lossy(r[(i, j)]));
            }
        }
        data.extend(blend[9..].iter().map(|&v| T::from_f64_lossy(v)));
        let value = Mat::from_vec(1, 12, data)?;
        self.push(
            value,
            Op::PoseInterp {
                a,
                b,
                w,
                polar: Box::new(polar),
            },
        )
    }

    /// World points (`n x 3`, row-major) into the unit box frame of `pose`:
    /// `(R^T (x - t)) * inv_half`.
    pub fn to_box(&mut self, pose: NodeId, world: Vec<T>, inv_half: [T; 3]) -> Result<NodeId> {
        self.expect_cols(pose, 12, "to_box pose")?;
        if world.len() % 3 != 0 {
            return Err(Error::DimensionMismatch("to_box points".into()));
        }
        let rows = world.len() / 3;
        let p = self.nodes[pose.0].value.data.clone();
        let mut out = Mat::zeros(rows, 3);
        for r in 0..rows {
            let d = [
                world[3 * r] - p[9],
                world[3 * r + 1] - p[10],
                world[3 * r + 2] - p[11],
            ];
            for a in 0..3 {
                let v = p[a] * d[0] + p[3 + a] * d[1] + p[6 + a] * d[2];
                out.data[3 * r + a] = v * inv_half[a];
            }
        }
        self.push(
            out,
            Op::ToBox {
                pose,
                world,
                inv_half,
            },
        )
    }

    /// Directions into the box frame, renormalized: `R^T d / |R^T d|`.
    pub fn dir_to_box(&mut self, pose: NodeId, dirs: Vec<T>) -> Result<NodeId> {
        self.expect_cols(pose, 12, "dir_to_box pose")?;
        if dirs.len() % 3 != 0 {
            return Err(Error::DimensionMismatch("dir_to_box directions".into()));
        }
        let rows = dirs.len() / 3;
        let p = self.nodes[pose.0].value.data.clone();
        let mut out = Mat::zeros(rows, 3);
        for r in 0..rows {
            let u = rotate_transpose(&p, &dirs[3 * r..3 * r + 3]);
            let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            for a in 0..3 {
                out.data[3 * r + a] = u[a] / norm;
            }
        }
        self.push(out, Op::DirToBox { pose, dirs })
    }

    /// Composites per-sample channels along rays; see [`composite_forward`].
    pub fn composite(
        &mut self,
        density: NodeId,
        color: NodeId,
        semantic: Option<NodeId>,
        instance: Option<NodeId>,
        spec: CompositeSpec<T>,
    ) -> Result<NodeId> {
        let n = self.expect_cols(density, 1, "composite density")?;
        if self.expect_cols(color, 3, "composite color")? != n {
            return Err(Error::DimensionMismatch("composite color rows".into()));
        }
        if spec.ray_starts.last().copied().unwrap_or(0) != n
            || spec.t.len() != n
            || spec.delta.len() != n
        {
            return Err(Error::DimensionMismatch("composite ray layout".into()));
        }
        let sem_cols = semantic.map(|s| self.shape(s).1).unwrap_or(0);
        let inst_cols = instance.map(|s| self.shape(s).1).unwrap_or(0);
        for id in semantic.iter().chain(instance.iter()) {
            if self.shape(*id).0 != n {
                return Err(Error::DimensionMismatch("composite label rows".into()));
            }
        }
        if !spec.background_semantic.is_empty() && spec.background_semantic.len() != sem_cols {
            return Err(Error::DimensionMismatch("background semantic logits".into()));
        }
        let empty: &[T] = &[];
        let out = composite_forward(
            &spec,
            &self.nodes[density.0].value.data,
            &self.nodes[color.0].value.data,
            semantic.map_or(empty, |s| &self.nodes[s.0].value.data),
            sem_cols,
            instance.map_or(empty, |s| &self.nodes[s.0].value.data),
            inst_cols,
        );
        self.push(
            out,
            Op::Composite {
                density,
                color,
                semantic,
                instance,
                spec: Box::new(spec),
            },
        )
    }

    /// `scale * sum((x - target)^2)` as a `1 x 1` node.
    pub fn sum_squares(&mut self, x: NodeId, target: Vec<T>, scale: T) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if v.data.len() != target.len() {
            return Err(Error::DimensionMismatch("sum_squares target".into()));
        }
        let s: T = v
            .data
            .iter()
            .zip(&target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        self.push(Mat::from_vec(1, 1, vec![scale * s])?, Op::SumSquares { x, target, scale })
    }

    /// `scale * sum_r CE(logits_r, target_r)` over rows with a target.
    pub fn softmax_ce(
        &mut self,
        logits: NodeId,
        targets: Vec<Option<usize>>,
        scale: T,
    ) -> Result<NodeId> {
        let (rows, cols) = self.shape(logits);
        if targets.len() != rows {
            return Err(Error::DimensionMismatch("softmax_ce targets".into()));
        }
        let v = &self.nodes[logits.0].value;
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= cols {
                    return Err(Error::IndexOutOfRange { index: t, len: cols });
                }
                let row = v.row(r);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let sum: T = row.iter().map(|&l| (l - max).exp()).sum();
                total += max + sum.ln() - row[t];
            }
        }
        self.push(
            Mat::from_vec(1, 1, vec![scale * total])?,
            Op::SoftmaxCe {
                logits,
                targets,
                scale,
            },
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: T = self.nodes[x.0].value.data.iter().copied().sum();
        self.push(Mat::from_vec(1, 1, vec![s])?, Op::Sum(x))
    }

    /// `sum_k coef_k * term_k` over `1 x 1` nodes.
    pub fn combine(&mut self, terms: Vec<(NodeId, T)>) -> Result<NodeId> {
        let mut s = T::zero();
        for (id, c) in &terms {
            let v = &self.nodes[id.0].value;
            if v.data.len() != 1 {
                return Err(Error::DimensionMismatch("combine expects scalars".into()));
            }
            s += *c * v.data[0];
        }
        self.push(Mat::from_vec(1, 1, vec![s])?, Op::Combine(terms))
    }

    fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Reverse pass from a `1 x 1` node. Returns one gradient vector per
    /// parameter block.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Vec<T>>> {
        let lv = &self.nodes[loss.0].value;
        if lv.data.len() != 1 {
            return Err(Error::DimensionMismatch("loss must be 1x1".into()));
        }
        if !lv.data[0].is_finite() {
            let (node, op) = self.first_non_finite().unwrap_or((loss.0, "loss"));
            return Err(Error::NonFinite { op, node });
        }
        let mut grads: Vec<Vec<T>> = self.blocks.iter().map(|b| vec![T::zero(); b.len()]).collect();
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => add_into(&mut grads[p.block][p.range()], &g),
                Op::Linear { x, w, b } => {
                    let rows = node.value.rows;
                    let (k, n) = (w.rows, w.cols);
                    let xv = &self.nodes[x.0].value.data;
                    if rows > 0 {
                        T::gemm(
                            k,
                            rows,
                            n,
                            xv,
                            1,
                            k as isize,
                            &g,
                            n as isize,
                            1,
                            T::one(),
                            &mut grads[w.block][w.range()],
                        );
                        let gb = &mut grads[b.block][b.range()];
                        for r in 0..rows {
                            for (d, &s) in gb.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *d += s;
                            }
                        }
                        let dx = slot(&mut adj, *x, rows * k);
                        T::gemm(
                            rows,
                            n,
                            k,
                            &g,
                            n as isize,
                            1,
                            self.param(*w),
                            1,
                            n as isize,
                            T::one(),
                            dx,
                        );
                    }
                }
                Op::Relu(x) => {
                    let y = &node.value.data;
                    let dx = slot(&mut adj, *x, y.len());
                    for ((d, &gy), &yv) in dx.iter_mut().zip(&g).zip(y) {
                        if yv > T::zero() {
                            *d += gy;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &node.value.data;
                    let dx = slot(&mut adj, *x, y.len());
                    for ((d, &gy), &yv) in dx.iter_mut().zip(&g).zip(y) {
                        *d += gy * yv * (T::one() - yv);
                    }
                }
                Op::Softplus(x) => {
                    let xv = &self.nodes[x.0].value.data;
                    let dx = slot(&mut adj, *x, xv.len());
                    for ((d, &gy), &a) in dx.iter_mut().zip(&g).zip(xv) {
                        *d += gy * sigmoid_t(a);
                    }
                }
                Op::Exp(x) => {
                    let y = &node.value.data;
                    let dx = slot(&mut adj, *x, y.len());
                    for ((d, &gy), &yv) in dx.iter_mut().zip(&g).zip(y) {
                        *d += gy * yv;
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut adj, *a, g.len()), &g);
                    add_into(slot(&mut adj, *b, g.len()), &g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value.data, &self.nodes[b.0].value.data);
                    {
                        let da = slot(&mut adj, *a, g.len());
                        for ((d, &gy), &y) in da.iter_mut().zip(&g).zip(vb) {
                            *d += gy * y;
                        }
                    }
                    let db = slot(&mut adj, *b, g.len());
                    for ((d, &gy), &y) in db.iter_mut().zip(&g).zip(va) {
                        *d += gy * y;
                    }
                }
                Op::Scale(x, s) => {
                    let dx = slot(&mut adj, *x, g.len());
                    for (d, &gy) in dx.iter_mut().zip(&g) {
                        *d += gy * *s;
                    }
                }
                Op::Concat(a, b) => {
                    let rows = node.value.rows;
                    let cols = node.value.cols;
                    let ca = self.nodes[a.0].value.cols;
                    let cb = cols - ca;
                    {
                        let da = slot(&mut adj, *a, rows * ca);
                        for r in 0..rows {
                            add_into(&mut da[r * ca..(r + 1) * ca], &g[r * cols..r * cols + ca]);
                        }
                    }
                    let db = slot(&mut adj, *b, rows * cb);
                    for r in 0..rows {
                        add_into(&mut db[r * cb..(r + 1) * cb], &g[r * cols + ca..(r + 1) * cols]);
                    }
                }
                Op::Columns { x, start } => {
                    let rows = node.value.rows;
                    let len = node.value.cols;
                    let src_cols = self.nodes[x.0].value.cols;
                    let dx = slot(&mut adj, *x, rows * src_cols);
                    for r in 0..rows {
                        add_into(
                            &mut dx[r * src_cols + start..r * src_cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
                Op::Encode { x, freqs, .. } => {
                    let rows = node.value.rows;
                    let cols = node.value.cols;
                    let y = &node.value.data;
                    let dx = slot(&mut adj, *x, rows * 3);
                    let pi = T::from_f64_lossy(std::f64::consts::PI);
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let mut acc = [gr[0], gr[1], gr[2]];
                        let mut freq = pi;
                        for j in 0..*freqs {
                            let base = 3 + 6 * j;
                            for c in 0..3 {
                                // d(w sin(fx)) = f * (w cos(fx)), d(w cos(fx)) = -f * (w sin(fx))
                                acc[c] += freq * (gr[base + c] * yr[base + 3 + c]
                                    - gr[base + 3 + c] * yr[base + c]);
                            }
                            freq = freq + freq;
                        }
                        add_into(&mut dx[3 * r..3 * r + 3], &acc);
                    }
                }
                Op::Gather { x, rows } => {
                    let (n, cols) = (self.nodes[x.0].value.rows, node.value.cols);
                    let dx = slot(&mut adj, *x, n * cols);
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut dx[r * cols..(r + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                }
                Op::ScatterAdd { parts } => {
                    let cols = node.value.cols;
                    for (part, targets) in parts {
                        let dp = slot(&mut adj, *part, targets.len() * cols);
                        for (i, &t) in targets.iter().enumerate() {
                            add_into(&mut dp[i * cols..(i + 1) * cols], &g[t * cols..(t + 1) * cols]);
                        }
                    }
                }
                Op::OneHotScaled { x, col } => {
                    let rows = node.value.rows;
                    let width = node.value.cols;
                    let dx = slot(&mut adj, *x, rows);
                    for r in 0..rows {
                        dx[r] += g[r * width + col];
                    }
                }
                Op::PoseInterp { a, b, w, polar } => {
                    let gr = Matrix3::from_fn(|i, j| g[3 * i + j].as_f64());
                    let dm = polar.backward(&gr);
                    let wa = T::from_f64_lossy(1.0 - w);
                    let wb = T::from_f64_lossy(*w);
                    for (p, coef) in [(a, wa), (b, wb)] {
                        let dst = &mut grads[p.block][p.range()];
                        for i in 0..3 {
                            for j in 0..3 {
                                dst[3 * i + j] += coef * T::from_f64_lossy(dm[(i, j)]);
                            }
                        }
                        for c in 9..12 {
                            dst[c] += coef * g[c];
                        }
                    }
                }
                Op::ToBox {
                    pose,
                    world,
                    inv_half,
                } => {
                    let p = &self.nodes[pose.0].value.data;
                    let mut dp = [T::zero(); 12];
                    for r in 0..node.value.rows {
                        let d = [
                            world[3 * r] - p[9],
                            world[3 * r + 1] - p[10],
                            world[3 * r + 2] - p[11],
                        ];
                        for a in 0..3 {
                            let ga = g[3 * r + a] * inv_half[a];
                            for b in 0..3 {
                                dp[3 * b + a] += ga * d[b];
                                dp[9 + b] -= ga * p[3 * b + a];
                            }
                        }
                    }
                    add_into(slot(&mut adj, *pose, 12), &dp);
                }
                Op::DirToBox { pose, dirs } => {
                    let p = &self.nodes[pose.0].value.data;
                    let y = &node.value.data;
                    let mut dp = [T::zero(); 12];
                    for r in 0..node.value.rows {
                        let d = &dirs[3 * r..3 * r + 3];
                        let u = rotate_transpose(p, d);
                        let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
                        let yr = &y[3 * r..3 * r + 3];
                        let gr = &g[3 * r..3 * r + 3];
                        let dot = yr[0] * gr[0] + yr[1] * gr[1] + yr[2] * gr[2];
                        for a in 0..3 {
                            let gu = (gr[a] - yr[a] * dot) / norm;
                            for b in 0..3 {
                                dp[3 * b + a] += gu * d[b];
                            }
                        }
                    }
                    add_into(slot(&mut adj, *pose, 12), &dp);
                }
                Op::Composite {
                    density,
                    color,
                    semantic,
                    instance,
                    spec,
                } => {
                    self.composite_backward(
                        &node.value,
                        &g,
                        *density,
                        *color,
                        *semantic,
                        *instance,
                        spec,
                        &mut adj,
                    );
                }
                Op::SumSquares { x, target, scale } => {
                    let xv = &self.nodes[x.0].value.data;
                    let two = T::from_f64_lossy(2.0);
                    let dx = slot(&mut adj, *x, xv.len());
                    for ((d, &a), &t) in dx.iter_mut().zip(xv).zip(target) {
                        *d += g[0] * *scale * two * (a - t);
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    targets,
                    scale,
                } => {
                    let v = &self.nodes[logits.0].value;
                    let cols = v.cols;
                    let dx = slot(&mut adj, *logits, v.data.len());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = v.row(r);
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let sum: T = row.iter().map(|&l| (l - max).exp()).sum();
                        for c in 0..cols {
                            let mut p = (row[c] - max).exp() / sum;
                            if c == t {
                                p -= T::one();
                            }
                            dx[r * cols + c] += g[0] * *scale * p;
                        }
                    }
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.data.len();
                    let dx = slot(&mut adj, *x, n);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Combine(terms) => {
                    for (id, c) in terms {
                        slot(&mut adj, *id, 1)[0] += g[0] * *c;
                    }
                }
            }
        }

        for (b, grad) in grads.iter().enumerate() {
            if !grad.iter().all(|v| v.is_finite()) {
                let (node, op) = self.first_non_finite().unwrap_or((b, "gradient"));
                return Err(Error::NonFinite { op, node });
            }
        }
        Ok(grads)
    }

    #[allow(clippy::too_many_arguments)]
    fn composite_backward(
        &self,
        out: &Mat<T>,
        g: &[T],
        density: NodeId,
        color: NodeId,
        semantic: Option<NodeId>,
        instance: Option<NodeId>,
        spec: &CompositeSpec<T>,
        adj: &mut [Option<Vec<T>>],
    ) {
        let sigma = &self.nodes[density.0].value.data;
        let col = &self.nodes[color.0].value.data;
        let sem = semantic.map(|s| &self.nodes[s.0].value);
        let inst = instance.map(|s| &self.nodes[s.0].value);
        let sem_cols = sem.map_or(0, |m| m.cols);
        let inst_cols = inst.map_or(0, |m| m.cols);
        let n = sigma.len();
        let width = out.cols;

        let mut d_sigma = vec![T::zero(); n];
        let mut d_color = vec![T::zero(); n * 3];
        let mut d_sem = vec![T::zero(); n * sem_cols];
        let mut d_inst = vec![T::zero(); n * inst_cols];
        let eps = T::from_f64_lossy(DEPTH_EPS);

        let mut weights = Vec::new();
        let mut trans_after = Vec::new();
        let mut err = Vec::new();
        for r in 0..spec.num_rays() {
            let (s0, s1) = (spec.ray_starts[r], spec.ray_starts[r + 1]);
            let gr = &g[r * width..(r + 1) * width];
            let orow = &out.data[r * width..(r + 1) * width];

            weights.clear();
            trans_after.clear();
            let mut transmittance = T::one();
            let mut depth_sum = T::zero();
            for j in s0..s1 {
                let decay = (-(sigma[j] * spec.delta[j])).exp();
                let w = transmittance * (T::one() - decay);
                transmittance = transmittance * decay;
                weights.push(w);
                trans_after.push(transmittance);
                depth_sum += w * spec.t[j];
            }
            let opacity = orow[COMPOSITE_OPACITY];

            let mut g_depth = gr[COMPOSITE_DEPTH];
            let mut g_opacity = gr[COMPOSITE_OPACITY];
            if spec.normalize_depth {
                let denom = opacity.max(eps);
                if opacity > eps {
                    g_opacity -= g_depth * depth_sum / (denom * denom);
                }
                g_depth = g_depth / denom;
            }
            // Background terms enter every weight through (1 - opacity).
            let mut bg_dot = T::zero();
            for c in 0..3 {
                bg_dot += gr[COMPOSITE_COLOR + c] * spec.background[c];
            }
            if !spec.background_semantic.is_empty() {
                for c in 0..sem_cols {
                    bg_dot += gr[COMPOSITE_SEMANTIC + c] * spec.background_semantic[c];
                }
            }

            err.clear();
            for (i, j) in (s0..s1).enumerate() {
                let mut e = g_opacity + g_depth * spec.t[j] - bg_dot;
                for c in 0..3 {
                    e += gr[COMPOSITE_COLOR + c] * col[3 * j + c];
                }
                if let Some(m) = sem {
                    for c in 0..sem_cols {
                        e += gr[COMPOSITE_SEMANTIC + c] * m.data[j * sem_cols + c];
                    }
                }
                if let Some(m) = inst {
                    for c in 0..inst_cols {
                        e += gr[COMPOSITE_SEMANTIC + sem_cols + c] * m.data[j * inst_cols + c];
                    }
                }
                err.push(e);

                let w = weights[i];
                for c in 0..3 {
                    d_color[3 * j + c] += w * gr[COMPOSITE_COLOR + c];
                }
                for c in 0..sem_cols {
                    d_sem[j * sem_cols + c] += w * gr[COMPOSITE_SEMANTIC + c];
                }
                for c in 0..inst_cols {
                    d_inst[j * inst_cols + c] += w * gr[COMPOSITE_SEMANTIC + sem_cols + c];
                }
            }
            // dL/dtau_j = e_j T_{j+1} - sum_{m>j} e_m w_m
            let mut suffix = T::zero();
            for (i, j) in (s0..s1).enumerate().rev() {
                let d_tau = err[i] * trans_after[i] - suffix;
                d_sigma[j] += d_tau * spec.delta[j];
                suffix += err[i] * weights[i];
            }
        }

        add_into(slot(adj, density, n), &d_sigma);
        add_into(slot(adj, color, n * 3), &d_color);
        if let Some(s) = semantic {
            add_into(slot(adj, s, d_sem.len()), &d_sem);
        }
        if let Some(s) = instance {
            add_into(slot(adj, s, d_inst.len()), &d_inst);
        }
    }
}

/// Builds a scalar loss on a fresh tape over `blocks` and returns its value
/// with the gradient for every block.
pub fn forward_backward<'p, T, F>(blocks: Vec<&'p [T]>, build: F) -> Result<(T, Vec<Vec<T>>)>
where
    T: Real,
    F: FnOnce(&mut Tape<'p, T>) -> Result<NodeId>,
{
    let mut tape = Tape::new(blocks);
    let loss = build(&mut tape)?;
    let grads = tape.backward(loss)?;
    Ok((tape.value(loss).data[0], grads))
}

fn slot<T: Real>(adj: &mut [Option<Vec<T>>], id: NodeId, len: usize) -> &mut [T] {
    adj[id.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn rotate_transpose<T: Real>(p: &[T], d: &[T]) -> [T; 3] {
    let mut u = [T::zero(); 3];
    for (a, ua) in u.iter_mut().enumerate() {
        *ua = p[a] * d[0] + p[3 + a] * d[1] + p[6 + a] * d[2];
    }
    u
}

fn sigmoid_t<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_t<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Cosine-eased window per frequency band: `(1 - cos(pi * clamp(alpha - j, 0, 1))) / 2`.
pub fn band_weights<T: Real>(freqs: usize, alpha: T) -> Vec<T> {
    let pi = T::from_f64_lossy(std::f64::consts::PI);
    let half = T::from_f64_lossy(0.5);
    (0..freqs)
        .map(|j| {
            let x = (alpha - T::from_f64_lossy(j as f64)).max(T::zero()).min(T::one());
            half * (T::one() - (pi * x).cos())
        })
        .collect()
}
