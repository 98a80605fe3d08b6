//! Trajectory generation with per-coordinate i.i.d. random delays.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{weighted::WeightedIndex, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{validate_params_with_bound, SystemParams};

/// Magnitude above which a trajectory is declared divergent.
pub const DIVERGENCE_GUARD: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Number of retained samples.
    pub t: usize,
    /// Samples discarded before recording; `None` uses [`default_burn_in`].
    #[serde(default)]
    pub burn_in: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub record_latent: bool,
    #[serde(default)]
    pub record_delays: bool,
}

impl SimConfig {
    pub fn new(t: usize, seed: u64) -> Self {
        SimConfig {
            t,
            burn_in: None,
            seed,
            record_latent: false,
            record_delays: false,
        }
    }
}

pub fn default_burn_in(theta_max: usize) -> usize {
    1000.max(50 * (theta_max + 1))
}

/// Simulated (or ingested) observation series.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub p: usize,
    /// `T × p`, row `t` is `x_t`.
    pub x: DMatrix<f64>,
    pub z: Option<DMatrix<f64>>,
    /// Realized delays, `T × p`.
    pub delays: Option<DMatrix<u32>>,
}

impl Trajectory {
    pub fn from_observations(x: DMatrix<f64>) -> Self {
        Trajectory {
            p: x.ncols(),
            x,
            z: None,
            delays: None,
        }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    /// Contiguous sub-trajectory `[start, start + len)` of the observations.
    pub fn segment(&self, start: usize, len: usize) -> Trajectory {
        Trajectory::from_observations(self.x.rows(start, len).into_owned())
    }

    /// Writes `t,x1,...,xp` with one row per step (`t` starts at 1).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_series_csv(w, "x", &self.x)
    }

    pub fn write_latent_csv<W: Write>(&self, w: W) -> Result<()> {
        match &self.z {
            Some(z) => write_series_csv(w, "z", z),
            None => Err(Error::InvalidArgument("trajectory has no latent record".into())),
        }
    }

    pub fn write_delays_csv<W: Write>(&self, w: W) -> Result<()> {
        match &self.delays {
            Some(d) => write_series_csv(w, "d", &d.map(f64::from)),
            None => Err(Error::InvalidArgument("trajectory has no delay record".into())),
        }
    }

    /// Writes the observation CSV plus the optional companions
    /// (`<stem>_latent.csv`, `<stem>_delays.csv`) next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))?;
        let stem = path.with_extension("");
        let stem = stem.to_string_lossy();
        if self.z.is_some() {
            let f = std::fs::File::create(format!("{stem}_latent.csv"))?;
            self.write_latent_csv(std::io::BufWriter::new(f))?;
        }
        if self.delays.is_some() {
            let f = std::fs::File::create(format!("{stem}_delays.csv"))?;
            self.write_delays_csv(std::io::BufWriter::new(f))?;
        }
        Ok(())
    }
}

fn write_series_csv<W: Write>(w: W, prefix: &str, m: &DMatrix<f64>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend((1..=m.ncols()).map(|i| format!("{prefix}{i}")));
    out.write_record(&header).map_err(csv_io)?;
    let mut rec = Vec::with_capacity(m.ncols() + 1);
    for t in 0..m.nrows() {
        rec.clear();
        rec.push((t + 1).to_string());
        // `{}` on f64 prints the shortest representation that round-trips exactly.
        rec.extend(m.row(t).iter().map(|v| format!("{v}")));
        out.write_record(&rec).map_err(csv_io)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Runs the random-delay recursion from the origin.
///
/// Each coordinate draws its delay independently at every step, so
/// `x_t(i) = z_{t-Θ_t(i)}(i) + (D x_{t-1})(i) + w_t(i)`. Latent states before
/// the origin are zero. The first `burn_in` samples are discarded.
pub fn simulate(params: &SystemParams, cfg: &SimConfig) -> Result<Trajectory> {
    // Stability is left to the divergence guard: callers may deliberately
    // simulate explosive systems.
    let report = validate_params_with_bound(params, f64::INFINITY);
    if !report.is_ok() {
        return Err(Error::InvalidParams(report.violations));
    }
    if cfg.t == 0 {
        return Err(Error::InvalidArgument("T must be at least 1".into()));
    }
    let p = params.p;
    let theta_max = params.theta_max;
    let burn_in = cfg.burn_in.unwrap_or_else(|| default_burn_in(theta_max));
    if burn_in < theta_max {
        return Err(Error::InvalidArgument(format!(
            "burn_in = {burn_in} is shorter than theta_max = {theta_max}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let delay_dist = WeightedIndex::new(&params.q).map_err(|e| Error::InvalidArgument(format!("delay pmf: {e}")))?;
    let lv = linalg::psd_sqrt(&params.sigma_v);
    let lw = linalg::psd_sqrt(&params.sigma_w);

    // ring[k] holds z_{t-k} after the latent update at step t
    let depth = theta_max + 1;
    let mut ring: Vec<DVector<f64>> = vec![DVector::zeros(p); depth];
    let mut head = 0usize;
    let mut x_prev = DVector::<f64>::zeros(p);
    let mut e = DVector::<f64>::zeros(p);

    let total = burn_in + cfg.t;
    let mut xs = DMatrix::<f64>::zeros(cfg.t, p);
    let mut zs = cfg.record_latent.then(|| DMatrix::<f64>::zeros(cfg.t, p));
    let mut ds = cfg.record_delays.then(|| DMatrix::<u32>::zeros(cfg.t, p));

    for step in 1..=total {
        for v in e.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let z_prev = &ring[head];
        let z_new = &params.a * z_prev + &params.b * &x_prev + &lv * &e;
        head = (head + depth - 1) % depth;
        ring[head] = z_new;

        for v in e.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let mut x_new = &params.d * &x_prev + &lw * &e;
        let row = step.checked_sub(burn_in + 1);
        for i in 0..p {
            let delay = delay_dist.sample(&mut rng);
            x_new[i] += ring[(head + delay) % depth][i];
            if let (Some(r), Some(ds)) = (row, ds.as_mut()) {
                ds[(r, i)] = delay as u32;
            }
        }
        if let Some(bad) = x_new.iter().find(|v| !v.is_finite() || v.abs() > DIVERGENCE_GUARD) {
            return Err(Error::NotStationary { step, value: bad.abs() });
        }
        if let Some(r) = row {
            xs.row_mut(r).copy_from(&x_new.transpose());
            if let Some(zs) = zs.as_mut() {
                zs.row_mut(r).copy_from(&ring[head].transpose());
            }
        }
        x_prev = x_new;
    }

    Ok(Trajectory {
        p,
        x: xs,
        z: zs,
        delays: ds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(a: f64, b: f64, d: f64, q: Vec<f64>) -> SystemParams {
        SystemParams::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, d),
            q,
        )
    }

    #[test]
    fn zero_system_gives_zero_path() {
        let p = SystemParams::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 2),
            vec![0.5, 0.5],
        )
        .with_noise(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2));
        let tr = simulate(&p, &SimConfig::new(100, 3)).unwrap();
        assert_eq!(tr.x.norm(), 0.0);
    }

    #[test]
    fn explosive_scalar_triggers_guard() {
        // x_t = z_t + w_t with z_t = 1.5 z_{t-1} + v_t grows like 1.5^t;
        // from unit-scale noise it must cross 1e6 within ~60 steps.
        let p = scalar(1.5, 0.0, 0.0, vec![1.0]);
        let err = simulate(&p, &SimConfig::new(1000, 1)).unwrap_err();
        match err {
            Error::NotStationary { step, .. } => assert!(step < 100, "step {step}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let p = scalar(0.3, 0.2, 0.1, vec![0.5, 0.5]);
        let a = simulate(&p, &SimConfig::new(500, 9)).unwrap();
        let b = simulate(&p, &SimConfig::new(500, 9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn burn_in_must_cover_delays() {
        let p = scalar(0.3, 0.2, 0.1, vec![0.2, 0.2, 0.2, 0.2, 0.2]);
        let mut cfg = SimConfig::new(10, 0);
        cfg.burn_in = Some(2);
        assert!(simulate(&p, &cfg).is_err());
    }

    #[test]
    fn delays_stay_in_support() {
        let p = scalar(0.3, 0.2, 0.1, vec![0.0, 0.5, 0.5]);
        let mut cfg = SimConfig::new(2000, 4);
        cfg.record_delays = true;
        cfg.record_latent = true;
        let tr = simulate(&p, &cfg).unwrap();
        let d = tr.delays.unwrap();
        assert!(d.iter().all(|&v| v == 1 || v == 2));
        assert_eq!(tr.z.unwrap().nrows(), 2000);
    }

    #[test]
    fn recorded_delays_reproduce_observations() {
        // with D = 0 and Σ_W = 0, x_t(i) equals the latent value it read
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, -0.2, 0.4]);
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.2]));
        let p = SystemParams::new(a, b, DMatrix::zeros(2, 2), vec![0.3, 0.3, 0.4])
            .with_noise(DMatrix::identity(2, 2), DMatrix::zeros(2, 2));
        let mut cfg = SimConfig::new(300, 11);
        cfg.record_delays = true;
        cfg.record_latent = true;
        let tr = simulate(&p, &cfg).unwrap();
        let (z, d) = (tr.z.unwrap(), tr.delays.unwrap());
        for t in 2..300 {
            for i in 0..2 {
                let k = d[(t, i)] as usize;
                assert_eq!(tr.x[(t, i)], z[(t - k, i)]);
            }
        }
    }

    #[test]
    fn csv_layout() {
        let p = scalar(0.3, 0.2, 0.0, vec![1.0]);
        let tr = simulate(&p, &SimConfig::new(3, 0)).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x1");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("3,"));
    }
}
