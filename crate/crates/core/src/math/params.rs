use super::Tensor2;
use crate::error::{Error, Result};

/// Uniform access to the trainable tensors of a module.
///
/// Gradient containers reuse the module type itself, so the visiting order
/// of a module and of its gradient is always identical.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2>);

    fn named_params(&self) -> Vec<(String, &Tensor2)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.fill(0.0);
        }
        z
    }

    fn flatten(&self) -> Vec<f64> {
        self.named_params()
            .into_iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        let mut params = self.params_mut();
        let total: usize = params.iter().map(|t| t.len()).sum();
        if total != values.len() {
            return Err(Error::shape(format!(
                "flat parameter vector has {} entries, module has {total}",
                values.len()
            )));
        }
        let mut offset = 0;
        for p in params.iter_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `self += other`, parameter by parameter.
    fn accumulate(&mut self, other: &Self) -> Result<()> {
        let theirs = other.named_params();
        let mine = self.params_mut();
        if mine.len() != theirs.len() {
            return Err(Error::shape("parameter lists differ in length"));
        }
        for (a, (_, b)) in mine.into_iter().zip(theirs) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameters for Tensor2 {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        out.push((prefix.to_string(), self));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2>) {
        out.push(self);
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2>) {
        for p in self.iter_mut() {
            p.visit_mut(out);
        }
    }
}

impl<P: Parameters> Parameters for Option<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        if let Some(p) = self {
            p.visit(prefix, out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2>) {
        if let Some(p) = self {
            p.visit_mut(out);
        }
    }
}
