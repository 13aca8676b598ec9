use std::io::{Read, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::estimators::DrawMatrix;

/// Observations with an optional design matrix and offset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub x: Option<Array2<f64>>,
    pub offset: Option<Vec<f64>>,
}

impl Dataset {
    pub fn from_y(y: Vec<f64>) -> Self {
        Self { y, x: None, offset: None }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Reads a CSV with a header row holding `y`, optionally `x1..xP` and `offset`.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let y_col = col("y").ok_or_else(|| Error::Data("missing column y".into()))?;
        let mut x_cols = Vec::new();
        while let Some(c) = col(&format!("x{}", x_cols.len() + 1)) {
            x_cols.push(c);
        }
        let off_col = col("offset");

        let mut y = Vec::new();
        let mut xs = Vec::new();
        let mut offset = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |c: usize| -> Result<f64> {
                let raw = rec.get(c).unwrap_or("").trim();
                let v: f64 = raw
                    .parse()
                    .map_err(|_| Error::Data(format!("row {}: cannot parse {raw:?}", line + 2)))?;
                if !v.is_finite() {
                    return Err(Error::Data(format!("row {}: non-finite value", line + 2)));
                }
                Ok(v)
            };
            y.push(field(y_col)?);
            for &c in &x_cols {
                xs.push(field(c)?);
            }
            if let Some(c) = off_col {
                offset.push(field(c)?);
            }
        }
        if y.len() < 2 {
            return Err(Error::Data("need at least two observations".into()));
        }
        let n = y.len();
        let x = (!x_cols.is_empty())
            .then(|| Array2::from_shape_vec((n, x_cols.len()), xs).expect("shape"));
        Ok(Self { y, x, offset: off_col.map(|_| offset) })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let p = self.x.as_ref().map_or(0, |x| x.ncols());
        let mut header = vec!["y".to_string()];
        header.extend((1..=p).map(|j| format!("x{j}")));
        if self.offset.is_some() {
            header.push("offset".into());
        }
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![self.y[i].to_string()];
            if let Some(x) = &self.x {
                rec.extend(x.row(i).iter().map(|v| v.to_string()));
            }
            if let Some(o) = &self.offset {
                rec.push(o[i].to_string());
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Reads draws with a header row of parameter names.
pub fn read_draws_csv<R: Read>(reader: R) -> Result<(Vec<String>, DrawMatrix)> {
    let mut rdr = csv::Reader::from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| Error::Data(format!("row {}: cannot parse {f:?}", line + 2))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let draws = DrawMatrix::from_rows(&rows)?;
    if draws.dim() != names.len() {
        return Err(Error::DimensionMismatch { expected: names.len(), got: draws.dim() });
    }
    Ok((names, draws))
}

pub fn write_draws_csv<W: Write>(writer: W, names: &[String], draws: &DrawMatrix) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(names)?;
    for row in draws.rows() {
        wtr.write_record(row.iter().map(|v| v.to_string()))?;
    }
    wtr.flush()?;
    Ok(())
}

/// `n_base` standard normal observations followed by `last`.
pub fn gaussian_outlier_data(seed: u64, n_base: usize, last: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<f64> = (0..n_base).map(|_| rng.sample(StandardNormal)).collect();
    y.push(last);
    y
}

/// Recipe for overdispersed counts with planted outliers, to be fitted by
/// a Poisson regression.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonDataConfig {
    pub n: usize,
    pub seed: u64,
    /// Intercept followed by the three covariate effects.
    pub beta: [f64; 4],
    /// Negative binomial shape; smaller means more overdispersion.
    pub shape: f64,
    pub n_outliers: usize,
    /// Multiplier on the mean of the planted outliers.
    pub outlier_factor: f64,
}

impl Default for PoissonDataConfig {
    fn default() -> Self {
        Self { n: 100, seed: 2020, beta: [1.5, 0.6, -0.5, -0.3], shape: 0.4, n_outliers: 8, outlier_factor: 10.0 }
    }
}

/// Design: intercept, a skewed pre-treatment level, a treatment indicator
/// and a group indicator, with a log exposure offset.
pub fn poisson_outlier_data(cfg: &PoissonDataConfig) -> Result<Dataset> {
    if cfg.n < 10 || !(cfg.shape > 0.0) || cfg.n_outliers > cfg.n {
        return Err(Error::InvalidArgument("invalid synthetic data configuration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n;
    let mut x = Array2::<f64>::zeros((n, 4));
    let mut offset = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let outlier_every = if cfg.n_outliers == 0 { usize::MAX } else { n / cfg.n_outliers };
    for i in 0..n {
        let z: f64 = rng.sample(StandardNormal);
        let level = (0.8 * z).exp().sqrt() - 1.0;
        let treat = f64::from(rng.random_bool(0.5));
        let group = f64::from(rng.random_bool(0.3));
        let exposure: f64 = rng.random_range(0.3..1.5);
        x[[i, 0]] = 1.0;
        x[[i, 1]] = level;
        x[[i, 2]] = treat;
        x[[i, 3]] = group;
        offset.push(exposure.ln());
        let eta = cfg.beta[0] + cfg.beta[1] * level + cfg.beta[2] * treat + cfg.beta[3] * group + exposure.ln();
        let mut mean = eta.exp();
        if i % outlier_every == outlier_every - 1 && i / outlier_every < cfg.n_outliers {
            mean *= cfg.outlier_factor;
        }
        let lambda = Gamma::new(cfg.shape, mean / cfg.shape)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .sample(&mut rng);
        let count = if lambda > 0.0 {
            Poisson::new(lambda).map_err(|e| Error::InvalidArgument(e.to_string()))?.sample(&mut rng)
        } else {
            0.0
        };
        y.push(count);
    }
    Ok(Dataset { y, x: Some(x), offset: Some(offset) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_csv_round_trip() {
        let d = poisson_outlier_data(&PoissonDataConfig::default()).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, d);
        assert!(d.y.iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(Dataset::read_csv("y\n1\nabc\n".as_bytes()).is_err());
        assert!(Dataset::read_csv("z\n1\n2\n".as_bytes()).is_err());
        let d = Dataset::read_csv("y\n1\n2.5\n".as_bytes()).unwrap();
        assert_eq!(d.y, vec![1.0, 2.5]);
    }

    #[test]
    fn draws_round_trip() {
        let draws = DrawMatrix::from_rows(&[vec![0.1, 2.0], vec![-3.5, 1e-9]]).unwrap();
        let names = vec!["mu".to_string(), "log_sigma".to_string()];
        let mut buf = Vec::new();
        write_draws_csv(&mut buf, &names, &draws).unwrap();
        let (n2, d2) = read_draws_csv(buf.as_slice()).unwrap();
        assert_eq!(n2, names);
        assert_eq!(d2, draws);
    }

    #[test]
    fn outlier_data_is_seeded() {
        assert_eq!(gaussian_outlier_data(1, 29, 20.0), gaussian_outlier_data(1, 29, 20.0));
        assert_eq!(gaussian_outlier_data(1, 29, 20.0)[29], 20.0);
    }
}
