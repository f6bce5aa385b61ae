//! Input distributions and monomial feature maps `x: Z -> R^d`.
//!
//! Every feature is a monomial in the (optionally standardized) input
//! coordinates, so `C_XX = E[x(Z) x(Z)^T]` is a table of mixed moments that
//! factor over independent coordinates and can be computed in closed form.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SymMatrix};

/// One independent input coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MarginalSpec", into = "MarginalSpec")]
pub enum Marginal {
    Uniform { lo: f64, hi: f64 },
    /// `ln Z` uniform on `[ln lo, ln hi]`; requires `0 < lo`.
    LogUniform { lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MarginalSpec {
    kind: String,
    lo: f64,
    hi: f64,
}

impl TryFrom<MarginalSpec> for Marginal {
    type Error = Error;

    fn try_from(s: MarginalSpec) -> Result<Self> {
        match s.kind.as_str() {
            "uniform" => Marginal::uniform(s.lo, s.hi),
            "log-uniform" | "loguniform" => Marginal::log_uniform(s.lo, s.hi),
            other => Err(Error::UnsupportedDistribution(format!(
                "marginal kind '{other}' (supported: uniform, log-uniform)"
            ))),
        }
    }
}

impl From<Marginal> for MarginalSpec {
    fn from(m: Marginal) -> Self {
        let (kind, lo, hi) = match m {
            Marginal::Uniform { lo, hi } => ("uniform", lo, hi),
            Marginal::LogUniform { lo, hi } => ("log-uniform", lo, hi),
        };
        MarginalSpec {
            kind: kind.to_string(),
            lo,
            hi,
        }
    }
}

impl Marginal {
    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidDistribution(format!(
                "uniform bounds must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Marginal::Uniform { lo, hi })
    }

    pub fn log_uniform(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 < lo && lo < hi) || !hi.is_finite() {
            return Err(Error::InvalidDistribution(format!(
                "log-uniform bounds must satisfy 0 < lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Marginal::LogUniform { lo, hi })
    }

    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            Marginal::Uniform { lo, hi } | Marginal::LogUniform { lo, hi } => (lo, hi),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.gen();
        match *self {
            Marginal::Uniform { lo, hi } => lo + (hi - lo) * u,
            Marginal::LogUniform { lo, hi } => (lo.ln() + (hi.ln() - lo.ln()) * u).exp(),
        }
    }

    /// Raw moment `E[Z^k]`.
    pub fn raw_moment(&self, k: u32) -> f64 {
        if k == 0 {
            return 1.0;
        }
        match *self {
            Marginal::Uniform { lo, hi } => {
                let kp = (k + 1) as i32;
                (hi.powi(kp) - lo.powi(kp)) / ((k + 1) as f64 * (hi - lo))
            }
            Marginal::LogUniform { lo, hi } => {
                let ki = k as i32;
                (hi.powi(ki) - lo.powi(ki)) / (k as f64 * (hi.ln() - lo.ln()))
            }
        }
    }

    /// Moment `E[(a + b Z)^k]` of the affinely mapped coordinate.
    pub fn affine_moment(&self, a: f64, b: f64, k: u32) -> f64 {
        match *self {
            Marginal::Uniform { lo, hi } => {
                let (l, h) = (a + b * lo, a + b * hi);
                let (l, h) = if l <= h { (l, h) } else { (h, l) };
                if k == 0 {
                    1.0
                } else {
                    let kp = (k + 1) as i32;
                    (h.powi(kp) - l.powi(kp)) / ((k + 1) as f64 * (h - l))
                }
            }
            Marginal::LogUniform { .. } => {
                let mut sum = 0.0;
                let mut binom = 1.0;
                for j in 0..=k {
                    sum += binom * a.powi((k - j) as i32) * b.powi(j as i32) * self.raw_moment(j);
                    binom = binom * (k - j) as f64 / (j + 1) as f64;
                }
                sum
            }
        }
    }
}

/// Product distribution over independent coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InputDistribution {
    coords: Vec<Marginal>,
}

impl InputDistribution {
    pub fn new(coords: Vec<Marginal>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidDistribution(
                "distribution needs at least one coordinate".into(),
            ));
        }
        Ok(InputDistribution { coords })
    }

    /// `U(lo, hi)` in one dimension.
    pub fn uniform_1d(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![Marginal::uniform(lo, hi)?])
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn marginals(&self) -> &[Marginal] {
        &self.coords
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.coords.iter().map(|m| m.sample(rng)).collect()
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dim()
            && self.coords.iter().zip(z).all(|(m, &v)| {
                let (lo, hi) = m.bounds();
                lo <= v && v <= hi
            })
    }
}

/// Declarative feature map description, as it appears in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureSpec {
    FullQuadratic {
        p: usize,
        #[serde(default)]
        standardize: bool,
    },
    /// Explicit monomial exponents, one vector of length `p` per feature.
    /// The first feature must be the constant.
    Monomials {
        p: usize,
        exponents: Vec<Vec<u32>>,
        #[serde(default)]
        standardize: bool,
    },
}

impl FeatureSpec {
    pub fn standardize(&self) -> bool {
        match *self {
            FeatureSpec::FullQuadratic { standardize, .. }
            | FeatureSpec::Monomials { standardize, .. } => standardize,
        }
    }

    pub fn build(&self, dist: &InputDistribution) -> Result<FeatureMap> {
        let map = match self {
            FeatureSpec::FullQuadratic { p, .. } => FeatureMap::full_quadratic(*p)?,
            FeatureSpec::Monomials { p, exponents, .. } => {
                FeatureMap::monomials(*p, exponents.clone())?
            }
        };
        if map.input_dim() != dist.dim() {
            return Err(Error::DimensionMismatch {
                expected: dist.dim(),
                got: map.input_dim(),
            });
        }
        if self.standardize() {
            Ok(map.standardized(dist))
        } else {
            Ok(map)
        }
    }
}

/// Affine map of each coordinate onto `[-1, 1]`: `u = a + b z`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    a: f64,
    b: f64,
}

/// Monomial feature map. Feature 0 is always the constant 1; a full quadratic
/// map orders features as constant, linears in coordinate order, then
/// products `z_i z_j` (`i <= j`) in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    p: usize,
    exponents: Vec<Vec<u32>>,
    scaling: Option<Vec<Affine>>,
}

impl FeatureMap {
    pub fn full_quadratic(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidFeatureMap("input dimension must be >= 1".into()));
        }
        let mut exps = vec![vec![0; p]];
        for i in 0..p {
            let mut e = vec![0; p];
            e[i] = 1;
            exps.push(e);
        }
        for i in 0..p {
            for j in i..p {
                let mut e = vec![0; p];
                e[i] += 1;
                e[j] += 1;
                exps.push(e);
            }
        }
        Ok(FeatureMap {
            p,
            exponents: exps,
            scaling: None,
        })
    }

    pub fn monomials(p: usize, exponents: Vec<Vec<u32>>) -> Result<Self> {
        if p == 0 || exponents.is_empty() {
            return Err(Error::InvalidFeatureMap(
                "need p >= 1 and at least one feature".into(),
            ));
        }
        if let Some(bad) = exponents.iter().find(|e| e.len() != p) {
            return Err(Error::InvalidFeatureMap(format!(
                "exponent vector {bad:?} does not have length {p}"
            )));
        }
        if exponents[0].iter().any(|&e| e != 0) {
            return Err(Error::InvalidFeatureMap(
                "the first feature must be the constant (all exponents zero)".into(),
            ));
        }
        for (i, e) in exponents.iter().enumerate() {
            if exponents[..i].contains(e) {
                return Err(Error::InvalidFeatureMap(format!("duplicate monomial {e:?}")));
            }
        }
        Ok(FeatureMap {
            p,
            exponents,
            scaling: None,
        })
    }

    /// Constant-only map (`d = 1`).
    pub fn constant(p: usize) -> Result<Self> {
        Self::monomials(p, vec![vec![0; p]])
    }

    /// Returns a copy that maps each coordinate of `dist` affinely onto
    /// `[-1, 1]` before evaluating monomials.
    pub fn standardized(mut self, dist: &InputDistribution) -> Self {
        self.scaling = Some(
            dist.marginals()
                .iter()
                .map(|m| {
                    let (lo, hi) = m.bounds();
                    Affine {
                        a: -(lo + hi) / (hi - lo),
                        b: 2.0 / (hi - lo),
                    }
                })
                .collect(),
        );
        self
    }

    pub fn is_standardized(&self) -> bool {
        self.scaling.is_some()
    }

    pub fn input_dim(&self) -> usize {
        self.p
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    fn transform(&self, z: &[f64]) -> Vec<f64> {
        match &self.scaling {
            Some(s) => z.iter().zip(s).map(|(v, t)| t.a + t.b * v).collect(),
            None => z.to_vec(),
        }
    }

    pub fn eval(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.p {
            return Err(Error::DimensionMismatch {
                expected: self.p,
                got: z.len(),
            });
        }
        let u = self.transform(z);
        Ok(self
            .exponents
            .iter()
            .map(|e| {
                e.iter()
                    .zip(&u)
                    .fold(1.0, |acc, (&k, &v)| if k == 0 { acc } else { acc * v.powi(k as i32) })
            })
            .collect())
    }
}

pub fn eval_features(map: &FeatureMap, z: &[f64]) -> Result<Vec<f64>> {
    map.eval(z)
}

/// Exact `C_XX = E[x(Z) x(Z)^T]` from closed-form per-coordinate moments.
pub fn exact_cxx(map: &FeatureMap, dist: &InputDistribution) -> Result<SymMatrix> {
    if dist.dim() != map.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: map.input_dim(),
            got: dist.dim(),
        });
    }
    let moment = |c: usize, k: u32| -> f64 {
        let m = &dist.marginals()[c];
        match &map.scaling {
            Some(s) => m.affine_moment(s[c].a, s[c].b, k),
            None => m.raw_moment(k),
        }
    };
    let d = map.dim();
    let mut cxx = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let mut v = 1.0;
            for c in 0..map.p {
                let k = map.exponents[i][c] + map.exponents[j][c];
                if k > 0 {
                    v *= moment(c, k);
                }
            }
            cxx[(i, j)] = v;
            cxx[(j, i)] = v;
        }
    }
    SymMatrix::new(cxx)
}

/// Moment matrix `(1/N) sum x_i x_i^T` over the given inputs.
pub fn sample_cxx<Z: AsRef<[f64]>>(map: &FeatureMap, inputs: &[Z]) -> Result<SymMatrix> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d = map.dim();
    let mut acc = Matrix::zeros(d, d);
    for z in inputs {
        let x = map.eval(z.as_ref())?;
        for i in 0..d {
            for j in 0..=i {
                acc[(i, j)] += x[i] * x[j];
            }
        }
    }
    let inv = 1.0 / inputs.len() as f64;
    for i in 0..d {
        for j in 0..=i {
            let v = acc[(i, j)] * inv;
            acc[(i, j)] = v;
            acc[(j, i)] = v;
        }
    }
    SymMatrix::new(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_features() {
        let q1 = FeatureMap::full_quadratic(1).unwrap();
        assert_eq!(q1.eval(&[2.0]).unwrap(), vec![1.0, 2.0, 4.0]);
        let q2 = FeatureMap::full_quadratic(2).unwrap();
        assert_eq!(q2.eval(&[0.0, 0.0]).unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(q2.eval(&[2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(FeatureMap::full_quadratic(5).unwrap().dim(), 21);
        assert!(matches!(q2.eval(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn monomial_map_validation() {
        assert!(FeatureMap::monomials(1, vec![vec![1]]).is_err());
        assert!(FeatureMap::monomials(1, vec![vec![0], vec![2], vec![2]]).is_err());
        assert!(FeatureMap::monomials(2, vec![vec![0]]).is_err());
        let m = FeatureMap::monomials(1, vec![vec![0], vec![3]]).unwrap();
        assert_eq!(m.eval(&[2.0]).unwrap(), vec![1.0, 8.0]);
    }

    #[test]
    fn exact_cxx_uniform_0_5() {
        let dist = InputDistribution::uniform_1d(0.0, 5.0).unwrap();
        let c = exact_cxx(&FeatureMap::full_quadratic(1).unwrap(), &dist).unwrap();
        let expected = [
            [1.0, 2.5, 25.0 / 3.0],
            [2.5, 25.0 / 3.0, 31.25],
            [25.0 / 3.0, 31.25, 125.0],
        ];
        for i in 0..3 {
            for j in 0..3 {
                assert!((c[(i, j)] - expected[i][j]).abs() <= 1e-12 * expected[i][j].abs());
            }
        }
    }

    #[test]
    fn exact_cxx_small_cases() {
        let dist = InputDistribution::uniform_1d(-1.0, 1.0).unwrap();
        let c = exact_cxx(&FeatureMap::constant(1).unwrap(), &dist).unwrap();
        assert_eq!(c.matrix().to_rows(), vec![vec![1.0]]);
        let lin = FeatureMap::monomials(1, vec![vec![0], vec![1]]).unwrap();
        let c = exact_cxx(&lin, &dist).unwrap();
        assert!((c[(0, 1)]).abs() < 1e-15);
        assert!((c[(1, 1)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn log_uniform_moments_match_sampling() {
        let m = Marginal::log_uniform(1500.0, 9500.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400_000;
        let mut s = [0.0; 3];
        for _ in 0..n {
            let z = m.sample(&mut rng);
            assert!((1500.0..=9500.0).contains(&z));
            s[0] += z;
            s[1] += z * z;
            s[2] += z * z * z;
        }
        for k in 1..=3u32 {
            let mc = s[k as usize - 1] / n as f64;
            let exact = m.raw_moment(k);
            assert!((mc / exact - 1.0).abs() < 0.01, "k={k} mc={mc} exact={exact}");
        }
    }

    #[test]
    fn standardized_moments_consistent() {
        // U(0,5) mapped to U(-1,1): E[u^2] = 1/3, odd moments vanish.
        let u = Marginal::uniform(0.0, 5.0).unwrap();
        assert!((u.affine_moment(-1.0, 0.4, 2) - 1.0 / 3.0).abs() < 1e-14);
        assert!(u.affine_moment(-1.0, 0.4, 3).abs() < 1e-14);
        // log-uniform binomial expansion against the direct raw moment
        let l = Marginal::log_uniform(2.0, 7.0).unwrap();
        for k in 0..5 {
            assert!((l.affine_moment(0.0, 1.0, k) - l.raw_moment(k)).abs() < 1e-10 * l.raw_moment(k));
        }
    }

    #[test]
    fn sample_cxx_examples() {
        let map = FeatureMap::monomials(1, vec![vec![0], vec![1]]).unwrap();
        let c = sample_cxx(&map, &[[2.0]]).unwrap();
        assert_eq!(c.matrix().to_rows(), vec![vec![1.0, 2.0], vec![2.0, 4.0]]);

        let q = FeatureMap::full_quadratic(2).unwrap();
        let c = sample_cxx(&q, &[[0.0, 0.0], [0.0, 0.0]]).unwrap();
        assert_eq!(c[(0, 0)], 1.0);
        assert_eq!(c.matrix().as_slice().iter().filter(|v| **v != 0.0).count(), 1);

        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(sample_cxx(&q, &empty), Err(Error::EmptyInput)));
    }

    #[test]
    fn sample_cxx_converges_to_exact() {
        let dist = InputDistribution::uniform_1d(0.0, 5.0).unwrap();
        let map = FeatureMap::full_quadratic(1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zs = dist.sample_n(1_000_000, &mut rng);
        let s = sample_cxx(&map, &zs).unwrap();
        let e = exact_cxx(&map, &dist).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((s[(i, j)] / e[(i, j)] - 1.0).abs() < 0.005);
            }
        }
    }

    #[test]
    fn unsupported_marginal_kind() {
        let err = serde_json::from_str::<InputDistribution>(r#"[{"kind":"normal","lo":0,"hi":1}]"#)
            .unwrap_err();
        assert!(err.to_string().contains("unsupported distribution"));
        let ok: InputDistribution =
            serde_json::from_str(r#"[{"kind":"uniform","lo":0,"hi":5}]"#).unwrap();
        assert_eq!(ok.dim(), 1);
    }
}
