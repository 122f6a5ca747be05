/// Uniform access to the learnable tensors of a parameter container.
///
/// Gradients reuse the container type, so everything that walks parameters
/// (flattening for Adam, checkpoint serialization, finite differences) goes
/// through the two visitors. Visiting order is fixed and defines the flat
/// layout.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    /// Overwrites every parameter from a flat slice laid out as `flatten`.
    fn assign(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, d| {
            d.copy_from_slice(&flat[off..off + d.len()]);
            off += d.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, d| d.iter_mut().for_each(|x| *x = value));
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// `self += scale · other`.
    fn add_scaled(&mut self, other: &Self, scale: f64)
    where
        Self: Sized,
    {
        let o = other.flatten();
        let mut off = 0;
        self.visit_mut("", &mut |_, d| {
            let n = d.len();
            for (x, y) in d.iter_mut().zip(&o[off..off + n]) {
                *x += scale * y;
            }
            off += n;
        });
    }

    fn scale(&mut self, c: f64) {
        self.visit_mut("", &mut |_, d| d.iter_mut().for_each(|x| *x *= c));
    }

    fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, d| ok &= d.iter().all(|x| x.is_finite()));
        ok
    }
}

/// A bare vector is a single tensor named `values`.
impl Parameters for Vec<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(&join(prefix, "values"), &[self.len()], self);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "values"), self);
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
