//! Base forecasters mapping an `N x P` history window to an `N x Q` forecast.
//!
//! All forecasters share weights across nodes and expose exact reverse-mode
//! gradients so they can be optimized jointly with the residual model.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DMatrixView};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DrError, Result};
use crate::io::{f64s_from_le_bytes, f64s_to_le_bytes};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForecasterKind {
    /// Repeats the last observed column.
    SeasonalNaive,
    /// `X·W + b·1ᵀ` with `W` (P×Q) shared across nodes and a per-node bias.
    LinearSeq2Seq,
    /// One tanh hidden layer applied to every node's history.
    Mlp,
}

impl fmt::Display for ForecasterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForecasterKind::SeasonalNaive => "seasonal_naive",
            ForecasterKind::LinearSeq2Seq => "linear_seq2seq",
            ForecasterKind::Mlp => "mlp",
        })
    }
}

impl FromStr for ForecasterKind {
    type Err = DrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seasonal_naive" => Ok(ForecasterKind::SeasonalNaive),
            "linear_seq2seq" | "linear" => Ok(ForecasterKind::LinearSeq2Seq),
            "mlp" => Ok(ForecasterKind::Mlp),
            other => Err(DrError::Config(format!("unknown forecaster kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForecasterSpec {
    pub kind: ForecasterKind,
    pub n_nodes: usize,
    pub horizon_in: usize,
    pub horizon_out: usize,
    pub hidden_width: usize,
}

impl ForecasterSpec {
    pub fn new(kind: ForecasterKind, n_nodes: usize, horizon_in: usize, horizon_out: usize, hidden_width: usize) -> Result<Self> {
        if n_nodes == 0 || horizon_in == 0 || horizon_out == 0 {
            return Err(DrError::Config("forecaster dimensions must be positive".into()));
        }
        if kind == ForecasterKind::Mlp && hidden_width == 0 {
            return Err(DrError::Config("mlp hidden width must be positive".into()));
        }
        Ok(Self {
            kind,
            n_nodes,
            horizon_in,
            horizon_out,
            hidden_width,
        })
    }

    pub fn layout(&self) -> Layout {
        let (n, p, q, h) = (self.n_nodes, self.horizon_in, self.horizon_out, self.hidden_width);
        let blocks: &[(&str, usize, usize)] = match self.kind {
            ForecasterKind::SeasonalNaive => &[],
            ForecasterKind::LinearSeq2Seq => &[("weight", p, q), ("bias", n, 1)],
            ForecasterKind::Mlp => &[("w_hidden", p, h), ("b_hidden", h, 1), ("w_out", h, q), ("b_out", q, 1)],
        };
        Layout::from_shapes(blocks.iter().map(|&(name, r, c)| (name.to_string(), r, c)))
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().len()
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.shape() != (self.n_nodes, self.horizon_in) {
            return Err(DrError::dims(
                "forecaster input",
                format!("{}x{}", self.n_nodes, self.horizon_in),
                format!("{}x{}", x.nrows(), x.ncols()),
            ));
        }
        Ok(())
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        if params.layout != self.layout() {
            return Err(DrError::dims(
                "parameter vector",
                format!("{} parameters for {}", self.parameter_count(), self.kind),
                format!("{} parameters", params.len()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParameterVector, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        self.check_params(params)?;
        let (n, p, q) = (self.n_nodes, self.horizon_in, self.horizon_out);
        Ok(match self.kind {
            ForecasterKind::SeasonalNaive => DMatrix::from_fn(n, q, |i, _| x[(i, p - 1)]),
            ForecasterKind::LinearSeq2Seq => {
                let w = params.block(0);
                let b = params.block(1);
                let mut out = x * w;
                for j in 0..q {
                    for i in 0..n {
                        out[(i, j)] += b[(i, 0)];
                    }
                }
                out
            }
            ForecasterKind::Mlp => self.mlp_forward(params, x).1,
        })
    }

    fn mlp_forward(&self, params: &ParameterVector, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (w1, b1, w2, b2) = (params.block(0), params.block(1), params.block(2), params.block(3));
        let mut hidden = x * w1;
        for j in 0..hidden.ncols() {
            for i in 0..hidden.nrows() {
                hidden[(i, j)] = (hidden[(i, j)] + b1[(j, 0)]).tanh();
            }
        }
        let mut out = &hidden * w2;
        for j in 0..out.ncols() {
            for i in 0..out.nrows() {
                out[(i, j)] += b2[(j, 0)];
            }
        }
        (hidden, out)
    }

    /// Reverse-mode gradients of `⟨upstream, forward(params, x)⟩`.
    pub fn backward(
        &self,
        params: &ParameterVector,
        x: &DMatrix<f64>,
        upstream: &DMatrix<f64>,
    ) -> Result<(ParameterVector, DMatrix<f64>)> {
        self.check_input(x)?;
        self.check_params(params)?;
        if upstream.shape() != (self.n_nodes, self.horizon_out) {
            return Err(DrError::dims(
                "forecaster upstream",
                format!("{}x{}", self.n_nodes, self.horizon_out),
                format!("{}x{}", upstream.nrows(), upstream.ncols()),
            ));
        }
        let mut grad = ParameterVector::zeros(self.layout());
        let p = self.horizon_in;
        let grad_x = match self.kind {
            ForecasterKind::SeasonalNaive => {
                let mut gx = DMatrix::zeros(self.n_nodes, p);
                for i in 0..self.n_nodes {
                    gx[(i, p - 1)] = upstream.row(i).sum();
                }
                gx
            }
            ForecasterKind::LinearSeq2Seq => {
                grad.set_block(0, &(x.transpose() * upstream));
                let row_sums = DMatrix::from_fn(self.n_nodes, 1, |i, _| upstream.row(i).sum());
                grad.set_block(1, &row_sums);
                upstream * params.block(0).transpose()
            }
            ForecasterKind::Mlp => {
                let (hidden, _) = self.mlp_forward(params, x);
                let w1 = params.block(0);
                let w2 = params.block(2);
                grad.set_block(2, &(hidden.transpose() * upstream));
                grad.set_block(3, &column_sums(upstream));
                let d_hidden = upstream * w2.transpose();
                let d_pre = d_hidden.zip_map(&hidden, |g, h| g * (1.0 - h * h));
                grad.set_block(0, &(x.transpose() * &d_pre));
                grad.set_block(1, &column_sums(&d_pre));
                d_pre * w1.transpose()
            }
        };
        Ok((grad, grad_x))
    }

    pub fn init_params(&self, scheme: InitScheme, seed: u64) -> ParameterVector {
        let layout = self.layout();
        match scheme {
            InitScheme::Zeros => ParameterVector::zeros(layout),
            InitScheme::SmallNormal(sigma) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let dist = Normal::new(0.0, sigma.abs()).expect("finite sigma");
                let values = (0..layout.len()).map(|_| dist.sample(&mut rng)).collect();
                ParameterVector { values, layout }
            }
        }
    }
}

fn column_sums(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.ncols(), 1, |j, _| m.column(j).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    Zeros,
    SmallNormal(f64),
}

/// Named block inside a flat parameter vector. Values are stored column-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    pub blocks: Vec<Block>,
}

impl Layout {
    pub fn from_shapes(shapes: impl IntoIterator<Item = (String, usize, usize)>) -> Self {
        let mut offset = 0;
        let blocks = shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let b = Block { name, offset, rows, cols };
                offset += rows * cols;
                b
            })
            .collect();
        Layout { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Text manifest: one `name offset rows cols` line per block.
    pub fn render(&self) -> String {
        let mut s = String::from("# name offset rows cols\n");
        for b in &self.blocks {
            s.push_str(&format!("{} {} {} {}\n", b.name, b.offset, b.rows, b.cols));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut blocks = Vec::new();
        let mut expected_offset = 0usize;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(DrError::RaggedRow {
                    line: line_no,
                    expected: 4,
                    got: fields.len(),
                });
            }
            let num = |col: usize| -> Result<usize> {
                fields[col]
                    .parse()
                    .map_err(|_| DrError::parse(line_no, col + 1, format!("not an integer: {:?}", fields[col])))
            };
            let (offset, rows, cols) = (num(1)?, num(2)?, num(3)?);
            if offset != expected_offset {
                return Err(DrError::parse(line_no, 2, format!("block offset {offset}, expected {expected_offset}")));
            }
            let len = rows
                .checked_mul(cols)
                .and_then(|l| l.checked_add(offset))
                .ok_or_else(|| DrError::parse(line_no, 3, "block size overflows"))?;
            expected_offset = len;
            blocks.push(Block {
                name: fields[0].to_string(),
                offset,
                rows,
                cols,
            });
        }
        Ok(Layout { blocks })
    }
}

/// Flat parameter array plus the layout describing its blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ParameterVector {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(DrError::dims("parameter vector", layout.len().to_string(), values.len().to_string()));
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, index: usize) -> DMatrixView<'_, f64> {
        let b = &self.layout.blocks[index];
        DMatrixView::from_slice(&self.values[b.offset..b.offset + b.len()], b.rows, b.cols)
    }

    pub fn block_by_name(&self, name: &str) -> Option<DMatrix<f64>> {
        let idx = self.layout.blocks.iter().position(|b| b.name == name)?;
        Some(self.block(idx).into_owned())
    }

    fn set_block(&mut self, index: usize, m: &DMatrix<f64>) {
        let b = &self.layout.blocks[index];
        debug_assert_eq!(m.shape(), (b.rows, b.cols));
        self.values[b.offset..b.offset + b.len()].copy_from_slice(m.as_slice());
    }

    /// Splits into one matrix per block.
    pub fn unpack(&self) -> Vec<(String, DMatrix<f64>)> {
        (0..self.layout.blocks.len())
            .map(|i| (self.layout.blocks[i].name.clone(), self.block(i).into_owned()))
            .collect()
    }

    /// Inverse of [`Self::unpack`].
    pub fn pack(blocks: &[(String, DMatrix<f64>)]) -> Self {
        let layout = Layout::from_shapes(blocks.iter().map(|(n, m)| (n.clone(), m.nrows(), m.ncols())));
        let values = blocks.iter().flat_map(|(_, m)| m.iter().copied()).collect();
        Self { values, layout }
    }

    pub fn add_assign(&mut self, other: &ParameterVector) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        f64s_to_le_bytes(&self.values)
    }

    pub fn from_bytes(bytes: &[u8], layout: Layout) -> Result<Self> {
        Self::new(f64s_from_le_bytes(bytes)?, layout)
    }
}

/// Draws `count` i.i.d. `N(0, sigma²)` values; used by tests and init.
pub fn normal_draws<R: Rng>(rng: &mut R, count: usize, sigma: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, sigma).expect("finite sigma");
    (0..count).map(|_| dist.sample(rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(kind: ForecasterKind) -> ForecasterSpec {
        ForecasterSpec::new(kind, 3, 5, 2, 4).unwrap()
    }

    fn rand_x(seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_vec(3, 5, normal_draws(&mut rng, 15, 1.0))
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(spec(ForecasterKind::SeasonalNaive).parameter_count(), 0);
        assert_eq!(spec(ForecasterKind::LinearSeq2Seq).parameter_count(), 5 * 2 + 3);
        assert_eq!(spec(ForecasterKind::Mlp).parameter_count(), 5 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn seasonal_naive_repeats_last_column() {
        let s = spec(ForecasterKind::SeasonalNaive);
        let x = rand_x(1);
        let out = s.forward(&s.init_params(InitScheme::Zeros, 0), &x).unwrap();
        for j in 0..2 {
            assert_eq!(out.column(j), x.column(4));
        }
    }

    #[test]
    fn seasonal_naive_backward_is_structural() {
        let s = spec(ForecasterKind::SeasonalNaive);
        let x = rand_x(2);
        let up = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (g, gx) = s.backward(&s.init_params(InitScheme::Zeros, 0), &x, &up).unwrap();
        assert!(g.is_empty());
        assert_eq!(gx.column(4).as_slice(), &[3.0, 7.0, 11.0]);
        assert!(gx.columns(0, 4).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_with_zero_weight_outputs_bias() {
        let s = spec(ForecasterKind::LinearSeq2Seq);
        let params = ParameterVector::pack(&[
            ("weight".into(), DMatrix::zeros(5, 2)),
            ("bias".into(), DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5])),
        ]);
        let out = s.forward(&params, &rand_x(3)).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(out[(i, j)], [1.0, -2.0, 0.5][i]);
            }
        }
    }

    #[test]
    fn mlp_matches_reference_loops() {
        let s = spec(ForecasterKind::Mlp);
        let params = s.init_params(InitScheme::SmallNormal(0.7), 9);
        let x = rand_x(4);
        let out = s.forward(&params, &x).unwrap();
        let blocks = params.unpack();
        let (w1, b1, w2, b2) = (&blocks[0].1, &blocks[1].1, &blocks[2].1, &blocks[3].1);
        for n in 0..3 {
            let mut h = [0.0; 4];
            for (k, hk) in h.iter_mut().enumerate() {
                let mut a = b1[(k, 0)];
                for p in 0..5 {
                    a += x[(n, p)] * w1[(p, k)];
                }
                *hk = a.tanh();
            }
            for q in 0..2 {
                let mut o = b2[(q, 0)];
                for (k, hk) in h.iter().enumerate() {
                    o += hk * w2[(k, q)];
                }
                assert_relative_eq!(out[(n, q)], o, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let s = spec(ForecasterKind::Mlp);
        assert_eq!(s.init_params(InitScheme::SmallNormal(0.01), 5), s.init_params(InitScheme::SmallNormal(0.01), 5));
        assert!(s.init_params(InitScheme::Zeros, 5).values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn small_normal_has_requested_spread() {
        let s = ForecasterSpec::new(ForecasterKind::Mlp, 1, 100, 100, 495).unwrap();
        // 100*495 + 495 + 495*100 + 100 ≈ 1e5 draws
        let p = s.init_params(InitScheme::SmallNormal(0.01), 42);
        let n = p.len() as f64;
        let mean = p.values.iter().sum::<f64>() / n;
        let sd = (p.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(p.len() >= 99_000);
        assert!((sd - 0.01).abs() < 0.0005, "sd {sd}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let s = spec(ForecasterKind::LinearSeq2Seq);
        let params = s.init_params(InitScheme::Zeros, 0);
        assert!(s.forward(&params, &DMatrix::zeros(3, 4)).is_err());
        let other = spec(ForecasterKind::Mlp).init_params(InitScheme::Zeros, 0);
        assert!(s.forward(&other, &DMatrix::zeros(3, 5)).is_err());
    }

    #[test]
    fn layout_manifest_round_trips() {
        let l = spec(ForecasterKind::Mlp).layout();
        assert_eq!(Layout::parse(&l.render()).unwrap(), l);
        assert!(Layout::parse("w 3 1 1\n").is_err());
        assert!(Layout::parse("w 0 1\n").is_err());
    }

    #[test]
    fn seasonal_naive_is_idempotent_on_own_prediction() {
        let s = ForecasterSpec::new(ForecasterKind::SeasonalNaive, 3, 5, 2, 0).unwrap();
        let params = s.init_params(InitScheme::Zeros, 0);
        let x = rand_x(8);
        let y = s.forward(&params, &x).unwrap();
        let mut shifted = DMatrix::zeros(3, 5);
        shifted.columns_mut(0, 3).copy_from(&x.columns(2, 3));
        shifted.columns_mut(3, 2).copy_from(&y);
        assert_eq!(s.forward(&params, &shifted).unwrap(), y);
    }
}
