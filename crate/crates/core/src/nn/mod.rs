//! Reverse-mode differentiation and the amortization networks.

mod model;
mod tape;

pub use model::{
    history_mask, masked_attention, time_features, AssimilationConfig, Context, Likelihood, Model, Scheme,
    SequenceInputs, SequenceOutput,
};
pub use tape::{Gradients, Mat, Tape, Var};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RandomStream;

/// Dense row-major array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Dimension(format!("shape {shape:?} needs {n} values, got {}", values.len())));
        }
        Ok(Self { shape, values, requires_grad: true, grad: None })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { shape: vec![rows, cols], values: vec![0.0; rows * cols], requires_grad: true, grad: None }
    }

    pub fn from_matrix(m: &Mat) -> Self {
        let values = m.transpose().as_slice().to_vec();
        Self { shape: vec![m.nrows(), m.ncols()], values, requires_grad: true, grad: None }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows are the leading dimension; remaining dimensions are flattened.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    pub fn to_matrix(&self) -> Mat {
        let (r, c) = self.rows_cols();
        Mat::from_row_slice(r, c, &self.values)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Named parameters in a fixed (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameters placed on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    /// Gradients in store order; parameters the output does not reach get zeros.
    pub fn collect(&self, store: &ParamStore, grads: &mut Gradients) -> Vec<Mat> {
        store
            .tensors
            .iter()
            .map(|(name, t)| {
                let (r, c) = t.rows_cols();
                grads.take(self.var(name)).unwrap_or_else(|| Mat::zeros(r, c))
            })
            .collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Mat) {
        self.tensors.insert(name.to_string(), Tensor::from_matrix(&value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn matrix(&self, name: &str) -> Result<Mat> {
        self.get(name)
            .map(Tensor::to_matrix)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Puts every parameter on `tape`; frozen tensors and `trainable = false`
    /// bind as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let m = t.to_matrix();
                let v = if trainable && t.requires_grad { tape.leaf(m) } else { tape.constant(m) };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Copies values from `other`, which must hold exactly the same names and
    /// shapes.
    pub fn assign_from(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            let o = other
                .tensors
                .get(name)
                .ok_or_else(|| Error::Dimension(format!("checkpoint lacks tensor {name}")))?;
            if o.shape != t.shape {
                return Err(Error::Dimension(format!(
                    "tensor {name}: checkpoint shape {:?}, model expects {:?}",
                    o.shape, t.shape
                )));
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::Dimension(format!("checkpoint has unexpected tensor {extra}")));
        }
        for (name, t) in &mut self.tensors {
            t.values.clone_from(&other.tensors[name].values);
        }
        Ok(())
    }

    /// `tensor <name> <ndim> <dims..>` followed by one line of values per row.
    pub fn to_text(&self) -> String {
        let mut out = String::from("cdssm-checkpoint 1\n");
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            writeln!(out, "tensor {name} {} {}", t.shape.len(), dims.join(" ")).expect("string write");
            let (r, c) = t.rows_cols();
            for i in 0..r {
                let row: Vec<String> = t.values[i * c..(i + 1) * c].iter().map(|v| format!("{v:.16e}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "cdssm-checkpoint 1")) => {}
            _ => return Err(Error::Parse("not a checkpoint file".into())),
        }
        let mut tensors = BTreeMap::new();
        let bad = |ln: usize, msg: &str| Error::Parse(format!("checkpoint line {}: {msg}", ln + 1));
        while let Some((ln, line)) = lines.next() {
            if line.trim().is_empty() {
                continue;
            }
            let head: Vec<&str> = line.split_whitespace().collect();
            if head.len() < 3 || head[0] != "tensor" {
                return Err(bad(ln, "expected a tensor header"));
            }
            let name = head[1].to_string();
            let ndim: usize = head[2].parse().map_err(|_| bad(ln, "bad rank"))?;
            if head.len() != 3 + ndim {
                return Err(bad(ln, "rank and dimension count disagree"));
            }
            let shape = head[3..]
                .iter()
                .map(|s| s.parse::<usize>().map_err(|_| bad(ln, "bad dimension")))
                .collect::<Result<Vec<_>>>()?;
            let mut t = Tensor::new(shape.clone(), vec![0.0; shape.iter().product()])?;
            let (r, c) = t.rows_cols();
            for i in 0..r {
                let (ln, row) = lines.next().ok_or_else(|| bad(ln, "truncated tensor"))?;
                let vals = row
                    .split_whitespace()
                    .map(|s| s.parse::<f64>().map_err(|_| bad(ln, "bad value")))
                    .collect::<Result<Vec<_>>>()?;
                if vals.len() != c {
                    return Err(bad(ln, "wrong number of values"));
                }
                t.values[i * c..(i + 1) * c].copy_from_slice(&vals);
            }
            if tensors.insert(name.clone(), t).is_some() {
                return Err(bad(ln, &format!("duplicate tensor {name}")));
            }
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// `U(-1/√fan_in, 1/√fan_in)` weights.
pub fn uniform_fan_in(rows: usize, cols: usize, rng: &mut RandomStream) -> Mat {
    let b = 1.0 / (rows.max(1) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.uniform_range(-b, b))
}

#[cfg(test)]
mod tests;
