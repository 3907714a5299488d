//! Forward kernels for every graph operation.

use std::fmt;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Operation recorded in a graph node.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `op(A) op(B)`, where `op` optionally transposes.
    MatMul {
        ta: bool,
        tb: bool,
    },
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    Negate,
    /// `ln(1 + exp(alpha x)) / alpha`.
    Softplus {
        alpha: f64,
    },
    /// `1 / (1 + exp(-alpha x))`.
    Sigmoid {
        alpha: f64,
    },
    Tanh,
    Abs,
    Sqrt,
    Square,
    Recip,
    Exp,
    Ln,
    Sin,
    Cos,
    Sum,
    Mean,
    /// Scalar replicated to `shape`.
    Expand {
        shape: Vec<usize>,
    },
    /// `[d]` replicated across `rows` rows.
    BroadcastRow {
        rows: usize,
    },
    /// `[b, d] -> [d]`.
    SumRows,
    /// `[b, 1]` replicated across `cols` columns.
    BroadcastCol {
        cols: usize,
    },
    /// `[b, d] -> [b, 1]`.
    SumCols,
    SelectCols {
        idx: Rc<[usize]>,
    },
    /// Adjoint of `SelectCols`: accumulate into a `[b, cols]` zero matrix.
    ScatterCols {
        idx: Rc<[usize]>,
        cols: usize,
    },
    /// Each row repeated `k` times, contiguously.
    RepeatRows {
        k: usize,
    },
    /// Sums consecutive groups of `k` rows.
    SumRowGroups {
        k: usize,
    },
    Transpose,
}

impl OpKind {
    pub fn arity(&self) -> usize {
        match self {
            OpKind::MatMul { .. } | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul { .. } => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul_elementwise",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::AddScalar(_) => "add_scalar",
            OpKind::Negate => "negate",
            OpKind::Softplus { .. } => "softplus",
            OpKind::Sigmoid { .. } => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Abs => "abs",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Recip => "recip",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Sin => "sin",
            OpKind::Cos => "cos",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Expand { .. } => "expand",
            OpKind::BroadcastRow { .. } => "broadcast_row",
            OpKind::SumRows => "sum_rows",
            OpKind::BroadcastCol { .. } => "broadcast_col",
            OpKind::SumCols => "sum_cols",
            OpKind::SelectCols { .. } => "select_cols",
            OpKind::ScatterCols { .. } => "scatter_cols",
            OpKind::RepeatRows { .. } => "repeat_rows",
            OpKind::SumRowGroups { .. } => "sum_row_groups",
            OpKind::Transpose => "transpose",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn mismatch(op: &OpKind, detail: String) -> Error {
    Error::contract(op.name(), detail)
}

fn as_matrix(op: &OpKind, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(mismatch(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus_unit(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool, op: &OpKind) -> Result<Tensor> {
    let (ar, ac) = as_matrix(op, a)?;
    let (br, bc) = as_matrix(op, b)?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(mismatch(
            op,
            format!(
                "inner dimensions differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            ),
        ));
    }
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        let (rsa, csa) = if ta {
            (1, ac as isize)
        } else {
            (ac as isize, 1)
        };
        let (rsb, csb) = if tb {
            (1, bc as isize)
        } else {
            (bc as isize, 1)
        };
        // SAFETY: strides describe the row-major buffers of `a`, `b` and `out`,
        // whose lengths match the dimensions checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

fn same_shape(op: &OpKind, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(
            op,
            format!("shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Evaluates `op` on concrete operands.
pub fn eval(op: &OpKind, xs: &[&Tensor]) -> Result<Tensor> {
    if xs.len() != op.arity() {
        return Err(mismatch(
            op,
            format!("expected {} operands, got {}", op.arity(), xs.len()),
        ));
    }
    let a = xs[0];
    let out = match op {
        OpKind::MatMul { ta, tb } => matmul(a, xs[1], *ta, *tb, op)?,
        OpKind::Add => {
            same_shape(op, a, xs[1])?;
            a.zip_map(xs[1], |p, q| p + q)
        }
        OpKind::Sub => {
            same_shape(op, a, xs[1])?;
            a.zip_map(xs[1], |p, q| p - q)
        }
        OpKind::Mul => {
            same_shape(op, a, xs[1])?;
            a.zip_map(xs[1], |p, q| p * q)
        }
        OpKind::Div => {
            same_shape(op, a, xs[1])?;
            a.zip_map(xs[1], |p, q| p / q)
        }
        OpKind::Scale(c) => a.map(|v| c * v),
        OpKind::AddScalar(c) => a.map(|v| v + c),
        OpKind::Negate => a.map(|v| -v),
        OpKind::Softplus { alpha } => {
            let alpha = *alpha;
            a.map(|v| softplus_unit(alpha * v) / alpha)
        }
        OpKind::Sigmoid { alpha } => {
            let alpha = *alpha;
            a.map(|v| logistic(alpha * v))
        }
        OpKind::Tanh => a.map(f64::tanh),
        OpKind::Abs => a.map(f64::abs),
        OpKind::Sqrt => a.map(f64::sqrt),
        OpKind::Square => a.map(|v| v * v),
        OpKind::Recip => a.map(|v| 1.0 / v),
        OpKind::Exp => a.map(f64::exp),
        OpKind::Ln => a.map(f64::ln),
        OpKind::Sin => a.map(f64::sin),
        OpKind::Cos => a.map(f64::cos),
        OpKind::Sum => Tensor::scalar(a.data().iter().sum()),
        OpKind::Mean => {
            if a.is_empty() {
                return Err(mismatch(op, "mean of empty tensor".into()));
            }
            Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        OpKind::Expand { shape } => {
            if a.len() != 1 {
                return Err(mismatch(
                    op,
                    format!("source shape {:?} is not scalar", a.shape()),
                ));
            }
            Tensor::full(shape, a.data()[0])
        }
        OpKind::BroadcastRow { rows } => {
            let d = match a.shape() {
                [d] | [1, d] => *d,
                s => return Err(mismatch(op, format!("expected a vector, got {s:?}"))),
            };
            let mut data = Vec::with_capacity(rows * d);
            for _ in 0..*rows {
                data.extend_from_slice(a.data());
            }
            Tensor::matrix(*rows, d, data)
        }
        OpKind::SumRows => {
            let (r, c) = as_matrix(op, a)?;
            let mut data = vec![0.0; c];
            for i in 0..r {
                for (acc, v) in data.iter_mut().zip(&a.data()[i * c..(i + 1) * c]) {
                    *acc += v;
                }
            }
            Tensor::vector(data)
        }
        OpKind::BroadcastCol { cols } => {
            let (r, c) = as_matrix(op, a)?;
            if c != 1 {
                return Err(mismatch(
                    op,
                    format!("expected a column, got {:?}", a.shape()),
                ));
            }
            let mut data = Vec::with_capacity(r * cols);
            for &v in a.data() {
                data.extend(std::iter::repeat_n(v, *cols));
            }
            Tensor::matrix(r, *cols, data)
        }
        OpKind::SumCols => {
            let (r, c) = as_matrix(op, a)?;
            let data = (0..r)
                .map(|i| a.data()[i * c..(i + 1) * c].iter().sum())
                .collect();
            Tensor::matrix(r, 1, data)
        }
        OpKind::SelectCols { idx } => {
            let (r, c) = as_matrix(op, a)?;
            if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
                return Err(mismatch(
                    op,
                    format!("column {bad} out of range for {c} columns"),
                ));
            }
            let mut data = Vec::with_capacity(r * idx.len());
            for i in 0..r {
                let row = &a.data()[i * c..(i + 1) * c];
                data.extend(idx.iter().map(|&j| row[j]));
            }
            Tensor::matrix(r, idx.len(), data)
        }
        OpKind::ScatterCols { idx, cols } => {
            let (r, c) = as_matrix(op, a)?;
            if c != idx.len() || idx.iter().any(|&j| j >= *cols) {
                return Err(mismatch(
                    op,
                    format!(
                        "{c} source columns scattered into {cols} via {} indices",
                        idx.len()
                    ),
                ));
            }
            let mut data = vec![0.0; r * cols];
            for i in 0..r {
                for (k, &j) in idx.iter().enumerate() {
                    data[i * cols + j] += a.data()[i * c + k];
                }
            }
            Tensor::matrix(r, *cols, data)
        }
        OpKind::RepeatRows { k } => {
            let (r, c) = as_matrix(op, a)?;
            let mut data = Vec::with_capacity(r * k * c);
            for i in 0..r {
                for _ in 0..*k {
                    data.extend_from_slice(&a.data()[i * c..(i + 1) * c]);
                }
            }
            Tensor::matrix(r * k, c, data)
        }
        OpKind::SumRowGroups { k } => {
            let (r, c) = as_matrix(op, a)?;
            if *k == 0 || r % k != 0 {
                return Err(mismatch(
                    op,
                    format!("{r} rows not divisible into groups of {k}"),
                ));
            }
            let mut data = vec![0.0; (r / k) * c];
            for i in 0..r {
                let g = i / k;
                for j in 0..c {
                    data[g * c + j] += a.data()[i * c + j];
                }
            }
            Tensor::matrix(r / k, c, data)
        }
        OpKind::Transpose => {
            let (r, c) = as_matrix(op, a)?;
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = a.data()[i * c + j];
                }
            }
            Tensor::matrix(c, r, data)
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_at_zero_is_ln2() {
        let y = eval(&OpKind::Softplus { alpha: 1.0 }, &[&Tensor::scalar(0.0)]).unwrap();
        assert!((y.item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn softplus_large_input_does_not_overflow() {
        // ln(1 + e^x) = x + ln(1 + e^-x); the correction at x = 30 is e^-30 to
        // within e^-60, well below f64 resolution.
        for &x in &[30.0, 700.0, 1e4] {
            let y = eval(&OpKind::Softplus { alpha: 1.0 }, &[&Tensor::scalar(x)]).unwrap();
            let reference = x + (-x).exp();
            assert!(y.item().is_finite());
            assert!((y.item() - reference).abs() <= 1e-15 * x);
        }
        let y = eval(&OpKind::Softplus { alpha: 1.0 }, &[&Tensor::scalar(-800.0)]).unwrap();
        assert!(y.item() >= 0.0 && y.item() < 1e-300);
    }

    #[test]
    fn matmul_of_ones_gives_row_sums() {
        let a = Tensor::ones(&[2, 3]);
        let b = Tensor::ones(&[3, 1]);
        let c = eval(
            &OpKind::MatMul {
                ta: false,
                tb: false,
            },
            &[&a, &b],
        )
        .unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 3.0]);
    }

    #[test]
    fn transposed_matmul_variants_agree() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.5, 3.0]);
        let at = eval(&OpKind::Transpose, &[&a]).unwrap();
        let bt = eval(&OpKind::Transpose, &[&b]).unwrap();
        let nn = eval(
            &OpKind::MatMul {
                ta: false,
                tb: false,
            },
            &[&a, &b],
        )
        .unwrap();
        let tn = eval(
            &OpKind::MatMul {
                ta: true,
                tb: false,
            },
            &[&at, &b],
        )
        .unwrap();
        let nt = eval(
            &OpKind::MatMul {
                ta: false,
                tb: true,
            },
            &[&a, &bt],
        )
        .unwrap();
        let tt = eval(&OpKind::MatMul { ta: true, tb: true }, &[&at, &bt]).unwrap();
        assert_eq!(nn, tn);
        assert_eq!(nn, nt);
        assert_eq!(nn, tt);
        assert_eq!(nn.data(), &[9.0, 8.0, 21.0, 14.0]);
    }

    #[test]
    fn shape_mismatch_is_a_contract_violation() {
        let a = Tensor::ones(&[2, 3]);
        let b = Tensor::ones(&[2, 1]);
        let err = eval(
            &OpKind::MatMul {
                ta: false,
                tb: false,
            },
            &[&a, &b],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Contract { .. }));
        assert!(eval(&OpKind::Add, &[&a, &b]).is_err());
        assert!(eval(
            &OpKind::SelectCols {
                idx: vec![5].into()
            },
            &[&a]
        )
        .is_err());
    }

    #[test]
    fn scatter_is_select_adjoint() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let idx: Rc<[usize]> = vec![2, 0, 2].into();
        let s = eval(&OpKind::SelectCols { idx: idx.clone() }, &[&a]).unwrap();
        assert_eq!(s.data(), &[3.0, 1.0, 3.0, 6.0, 4.0, 6.0]);
        let back = eval(&OpKind::ScatterCols { idx, cols: 3 }, &[&s]).unwrap();
        assert_eq!(back.data(), &[1.0, 0.0, 6.0, 4.0, 0.0, 12.0]);
    }

    #[test]
    fn repeat_and_group_sum() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let r = eval(&OpKind::RepeatRows { k: 3 }, &[&a]).unwrap();
        assert_eq!(r.shape(), &[6, 2]);
        assert_eq!(r.row(2), &[1.0, 2.0]);
        assert_eq!(r.row(3), &[3.0, 4.0]);
        let s = eval(&OpKind::SumRowGroups { k: 3 }, &[&r]).unwrap();
        assert_eq!(s.data(), &[3.0, 6.0, 9.0, 12.0]);
    }
}
