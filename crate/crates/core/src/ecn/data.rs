//! L2 data ingestion and fitting of the ECN generative model.

use std::io::Read;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::agent::{fit_decay_rate, BookShape, OrderSizeDist, SnapshotVariation};
use super::gmm::{em_fit, EmOptions, GaussianMixture, GaussianMixtureParams};
use super::EcnError;

/// One L2 snapshot with `m` levels per side, best level first.
#[derive(Debug, Clone, PartialEq)]
pub struct L2Row {
    pub time: f64,
    pub ask_px: Vec<f64>,
    pub ask_sz: Vec<f64>,
    pub bid_px: Vec<f64>,
    pub bid_sz: Vec<f64>,
}

/// Reads CSV with columns
/// `time, ask_px_1..m, ask_sz_1..m, bid_px_1..m, bid_sz_1..m`.
pub fn read_l2_csv<R: Read>(reader: R, m: usize) -> Result<Vec<L2Row>, EcnError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let width = 1 + 4 * m;
    let mut rows: Vec<L2Row> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| EcnError::Data { row: line, msg: e.to_string() })?;
        if rec.len() != width {
            return Err(EcnError::Data {
                row: line,
                msg: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        let mut vals = Vec::with_capacity(width);
        for (j, field) in rec.iter().enumerate() {
            if field.is_empty() {
                return Err(EcnError::Data {
                    row: line,
                    msg: format!("missing value in column {}", j + 1),
                });
            }
            let v: f64 = field.parse().map_err(|_| EcnError::Data {
                row: line,
                msg: format!("unparsable value {field:?} in column {}", j + 1),
            })?;
            if !v.is_finite() {
                return Err(EcnError::Data {
                    row: line,
                    msg: format!("non-finite value in column {}", j + 1),
                });
            }
            vals.push(v);
        }
        let row = L2Row {
            time: vals[0],
            ask_px: vals[1..1 + m].to_vec(),
            ask_sz: vals[1 + m..1 + 2 * m].to_vec(),
            bid_px: vals[1 + 2 * m..1 + 3 * m].to_vec(),
            bid_sz: vals[1 + 3 * m..1 + 4 * m].to_vec(),
        };
        if row.ask_sz.iter().chain(&row.bid_sz).any(|s| *s <= 0.0) {
            return Err(EcnError::Data {
                row: line,
                msg: "missing level (non-positive size)".into(),
            });
        }
        if row.bid_px[0] >= row.ask_px[0] {
            return Err(EcnError::Data {
                row: line,
                msg: "crossed or locked snapshot".into(),
            });
        }
        if let Some(prev) = rows.last() {
            if row.time <= prev.time {
                return Err(EcnError::Data {
                    row: line,
                    msg: "timestamps must be strictly increasing".into(),
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Samples derived from an L2 series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Dataset {
    pub m: usize,
    pub tick: f64,
    pub dt: f64,
    /// `[ln ask sizes.., ln bid sizes.., spread ticks]` per sampled snapshot.
    pub initial: Vec<Vec<f64>>,
    /// `[deltas.., spread ticks, mid change ticks]` per consecutive pair.
    pub variations: Vec<Vec<f64>>,
    /// Non-zero volume changes between raw consecutive rows, in lots.
    pub size_samples: Vec<u64>,
    /// Mean volume per level from the touch, both sides pooled.
    pub mean_level_volume: Vec<f64>,
}

/// Signed variation of one level: relative when volume falls, absolute
/// otherwise.
pub fn signed_variation(before: f64, after: f64) -> f64 {
    if after < before {
        (after - before) / before
    } else {
        after - before
    }
}

pub fn ingest_l2(rows: &[L2Row], m: usize, dt: f64, tick: f64, lot: f64) -> Result<L2Dataset, EcnError> {
    if rows.len() < 2 {
        return Err(EcnError::EmptyData);
    }
    if !(dt > 0.0 && tick > 0.0 && lot > 0.0) {
        return Err(EcnError::InvalidParams("dt, tick and lot must be positive".into()));
    }
    let mut sampled: Vec<&L2Row> = Vec::new();
    let mut next = rows[0].time;
    for r in rows {
        if r.time >= next - 1e-9 * dt {
            sampled.push(r);
            while next <= r.time + 1e-9 * dt {
                next += dt;
            }
        }
    }
    let lots = |s: f64| s / lot;
    let spread = |r: &L2Row| (r.ask_px[0] - r.bid_px[0]) / tick;
    let mid = |r: &L2Row| 0.5 * (r.ask_px[0] + r.bid_px[0]);
    let initial: Vec<Vec<f64>> = sampled
        .iter()
        .map(|r| {
            let mut v: Vec<f64> = r.ask_sz.iter().chain(&r.bid_sz).map(|s| lots(*s).ln()).collect();
            v.push(spread(r));
            v
        })
        .collect();
    let variations: Vec<Vec<f64>> = sampled
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let mut v: Vec<f64> = (0..m)
                .map(|i| signed_variation(lots(a.ask_sz[i]), lots(b.ask_sz[i])))
                .chain((0..m).map(|i| signed_variation(lots(a.bid_sz[i]), lots(b.bid_sz[i]))))
                .collect();
            v.push(spread(b));
            v.push((mid(b) - mid(a)) / tick);
            v
        })
        .collect();
    let mut size_samples = Vec::new();
    for w in rows.windows(2) {
        for i in 0..m {
            for (px0, px1, s0, s1) in [
                (w[0].ask_px[i], w[1].ask_px[i], w[0].ask_sz[i], w[1].ask_sz[i]),
                (w[0].bid_px[i], w[1].bid_px[i], w[0].bid_sz[i], w[1].bid_sz[i]),
            ] {
                if (px0 - px1).abs() < 0.5 * tick {
                    let q = (lots(s1) - lots(s0)).abs().round() as u64;
                    if q > 0 {
                        size_samples.push(q);
                    }
                }
            }
        }
    }
    let mut mean_level_volume = vec![0.0; m];
    for r in &sampled {
        for i in 0..m {
            mean_level_volume[i] += 0.5 * (lots(r.ask_sz[i]) + lots(r.bid_sz[i])) / sampled.len() as f64;
        }
    }
    if variations.is_empty() {
        return Err(EcnError::EmptyData);
    }
    Ok(L2Dataset {
        m,
        tick,
        dt,
        initial,
        variations,
        size_samples,
        mean_level_volume,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcnFitOptions {
    pub init_components: usize,
    pub variation_components: usize,
    pub depth: usize,
    pub em: EmOptions,
}

impl Default for EcnFitOptions {
    fn default() -> Self {
        EcnFitOptions {
            init_components: 3,
            variation_components: 4,
            depth: 20,
            em: EmOptions::default(),
        }
    }
}

/// Mean log-likelihood per sample of each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial: SplitScores,
    pub variation: SplitScores,
    pub initial_iterations: usize,
    pub variation_iterations: usize,
}

/// Generative model of the ECN book.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcnModel {
    pub m: usize,
    pub shape: BookShape,
    pub initial: GaussianMixtureParams,
    pub variation: GaussianMixtureParams,
    pub size_dist: OrderSizeDist,
    #[serde(default)]
    pub report: Option<FitReport>,
}

impl EcnModel {
    pub fn validate(&self) -> Result<(), EcnError> {
        self.shape.validate()?;
        self.size_dist.validate()?;
        self.initial.validate()?;
        self.variation.validate()?;
        if self.shape.m != self.m || self.initial.dim() != 2 * self.m + 1 || self.variation.dim() != 2 * self.m + 2 {
            return Err(EcnError::InvalidParams("model dimensions disagree with m".into()));
        }
        Ok(())
    }

    /// Hand-built model with stable stationary depth: an addition component
    /// and a removal component per step, a one to two tick spread and a
    /// symmetric mid change.
    pub fn synthetic(m: usize) -> Self {
        let d = 2 * m + 2;
        let mut add_mean = vec![6.0; 2 * m];
        add_mean.extend([1.3, 0.0]);
        let mut add_var = vec![4.0; 2 * m];
        add_var.extend([0.2, 0.5]);
        let mut rem_mean = vec![-0.25; 2 * m];
        rem_mean.extend([1.3, 0.0]);
        let mut rem_var = vec![0.01; 2 * m];
        rem_var.extend([0.2, 0.5]);
        let eye: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        let variation = GaussianMixtureParams {
            weights: vec![0.5, 0.5],
            means: vec![add_mean, rem_mean],
            variances: vec![add_var, rem_var],
            correlations: vec![eye.clone(), eye],
        };
        let mut init_mean: Vec<f64> = (0..2 * m).map(|i| 3.3 - 0.05 * (i % m) as f64).collect();
        init_mean.push(1.2);
        let mut init_var = vec![0.04; 2 * m];
        init_var.push(0.1);
        EcnModel {
            m,
            shape: BookShape { m, depth: 20, alpha: 0.1 },
            initial: GaussianMixtureParams::diagonal(init_mean, init_var),
            variation,
            size_dist: OrderSizeDist::Geometric { mean: 3.0 },
            report: None,
        }
    }

    pub fn sampler(&self) -> Result<EcnSampler, EcnError> {
        self.validate()?;
        Ok(EcnSampler {
            m: self.m,
            initial: GaussianMixture::new(self.initial.clone())?,
            variation: GaussianMixture::new(self.variation.clone())?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EcnSampler {
    m: usize,
    initial: GaussianMixture,
    variation: GaussianMixture,
}

impl EcnSampler {
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.initial.sample(rng)
    }

    pub fn sample_variation<R: Rng + ?Sized>(&self, rng: &mut R) -> SnapshotVariation {
        SnapshotVariation::from_raw(&self.variation.sample(rng), self.m).expect("sampler dimension matches m")
    }
}

fn standardize(data: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let d = data[0].len();
    let n = data.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = data.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z = data
        .iter()
        .map(|x| x.iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]).collect())
        .collect();
    (z, mean, sd)
}

fn unstandardize(p: GaussianMixtureParams, mean: &[f64], sd: &[f64]) -> GaussianMixtureParams {
    GaussianMixtureParams {
        means: p
            .means
            .iter()
            .map(|mu| mu.iter().enumerate().map(|(j, v)| v * sd[j] + mean[j]).collect())
            .collect(),
        variances: p
            .variances
            .iter()
            .map(|var| var.iter().enumerate().map(|(j, v)| v * sd[j] * sd[j]).collect())
            .collect(),
        ..p
    }
}

fn split3<T: Clone>(v: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = v.len();
    let a = (n as f64 * 0.70).round() as usize;
    let b = (n as f64 * 0.85).round() as usize;
    (v[..a].to_vec(), v[a..b].to_vec(), v[b..].to_vec())
}

fn fit_split<R: Rng + ?Sized>(data: &[Vec<f64>], k: usize, opts: &EmOptions, rng: &mut R) -> Result<(GaussianMixtureParams, SplitScores, usize), EcnError> {
    let (train, val, test) = split3(data);
    if train.len() < k || val.is_empty() || test.is_empty() {
        return Err(EcnError::Data {
            row: 0,
            msg: format!("{} samples are too few for a 70/15/15 split", data.len()),
        });
    }
    let (z, mean, sd) = standardize(&train);
    let fit = em_fit(&z, k, opts, rng)?;
    let params = unstandardize(fit.params, &mean, &sd);
    let g = GaussianMixture::new(params.clone())?;
    let scores = SplitScores {
        train: g.mean_log_likelihood(&train)?,
        validation: g.mean_log_likelihood(&val)?,
        test: g.mean_log_likelihood(&test)?,
    };
    Ok((params, scores, fit.iterations))
}

/// Fits both mixtures on the first 70% of samples in time order and scores
/// the validation and test splits.
pub fn fit_ecn_model<R: Rng + ?Sized>(data: &L2Dataset, opts: &EcnFitOptions, rng: &mut R) -> Result<EcnModel, EcnError> {
    let (initial, si, ii) = fit_split(&data.initial, opts.init_components, &opts.em, rng)?;
    let (variation, sv, iv) = fit_split(&data.variations, opts.variation_components, &opts.em, rng)?;
    let alpha = fit_decay_rate(&data.mean_level_volume).unwrap_or(0.0).max(0.0);
    let size_dist = if data.size_samples.is_empty() {
        OrderSizeDist::default()
    } else {
        OrderSizeDist::Empirical {
            sizes: data.size_samples.clone(),
        }
    };
    Ok(EcnModel {
        m: data.m,
        shape: BookShape {
            m: data.m,
            depth: opts.depth.max(data.m),
            alpha,
        },
        initial,
        variation,
        size_dist,
        report: Some(FitReport {
            initial: si,
            variation: sv,
            initial_iterations: ii,
            variation_iterations: iv,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn csv_text(rows: usize, step: f64) -> String {
        let mut s = String::from("time,ask_px_1,ask_px_2,ask_sz_1,ask_sz_2,bid_px_1,bid_px_2,bid_sz_1,bid_sz_2\n");
        for i in 0..rows {
            let t = i as f64 * step;
            let shift = (i / 7) as f64 * 0.00005;
            let (a1, b1) = (1.10005 + shift, 1.1 + shift);
            let v = 10.0 + (i % 5) as f64;
            s.push_str(&format!("{t},{a1},{},{v},{},{b1},{},{},{v}\n", a1 + 0.00005, v + 3.0, b1 - 0.00005, v + 1.0));
        }
        s
    }

    #[test]
    fn signed_variation_rules() {
        assert!((signed_variation(10.0, 7.0) + 0.3).abs() < 1e-12);
        assert!((signed_variation(10.0, 12.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn downsampling_ten_hertz_to_one_second() {
        let rows = read_l2_csv(csv_text(101, 0.1).as_bytes(), 2).unwrap();
        let ds = ingest_l2(&rows, 2, 1.0, 0.00005, 1.0).unwrap();
        assert_eq!(ds.initial.len(), 11);
        assert_eq!(ds.variations.len(), 10);
        assert_eq!(ds.initial[0].len(), 5);
        assert_eq!(ds.variations[0].len(), 6);
        assert!((ds.initial[0][4] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_monotone_time() {
        let text = "time,ask_px_1,ask_sz_1,bid_px_1,bid_sz_1\n0,1.1,5,1.0,5\n0,1.1,5,1.0,5\n";
        let err = read_l2_csv(text.as_bytes(), 1).unwrap_err();
        assert!(matches!(err, EcnError::Data { row: 3, .. }), "{err}");
    }

    #[test]
    fn rejects_missing_level() {
        let text = "time,ask_px_1,ask_sz_1,bid_px_1,bid_sz_1\n0,1.1,,1.0,5\n";
        assert!(matches!(read_l2_csv(text.as_bytes(), 1), Err(EcnError::Data { row: 2, .. })));
        let text = "time,ask_px_1,ask_sz_1,bid_px_1,bid_sz_1\n0,1.1,0,1.0,5\n";
        assert!(matches!(read_l2_csv(text.as_bytes(), 1), Err(EcnError::Data { row: 2, .. })));
    }

    #[test]
    fn fit_pipeline_produces_valid_model() {
        let rows = read_l2_csv(csv_text(3000, 0.1).as_bytes(), 2).unwrap();
        let ds = ingest_l2(&rows, 2, 1.0, 0.00005, 1.0).unwrap();
        let mut rng = substream(1, "fit", 0);
        let opts = EcnFitOptions {
            init_components: 2,
            variation_components: 2,
            depth: 6,
            ..Default::default()
        };
        let model = fit_ecn_model(&ds, &opts, &mut rng).unwrap();
        model.validate().unwrap();
        let r = model.report.as_ref().unwrap();
        assert!(r.variation.train.is_finite() && r.variation.test.is_finite());
        let sampler = model.sampler().unwrap();
        let v = sampler.sample_variation(&mut rng);
        assert!(v.spread_ticks >= 1 && v.spread_ticks <= 3);
    }

    #[test]
    fn synthetic_model_is_valid() {
        EcnModel::synthetic(5).validate().unwrap();
    }
}
