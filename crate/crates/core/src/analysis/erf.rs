//! Effective receptive field: the absolute input gradient of the center
//! feature unit, averaged over many inputs.

use std::fmt::Write as _;

use log::info;

use crate::error::{Error, Result};
use crate::io::pnm::GrayImage;
use crate::model::Network;
use crate::params::Graph;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    RandomUniform,
    ImageDir,
}

impl InputKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InputKind::RandomUniform => "random_uniform",
            InputKind::ImageDir => "image_dir",
        }
    }
}

/// Where ERF stimuli come from.
#[derive(Debug, Clone, Copy)]
pub enum ErfSource<'a, T> {
    /// Sample `i` is uniform `[0, 1]` noise from stream `i` of `seed`.
    RandomUniform { seed: u64 },
    /// Sample `i` is `images[i]`, each shaped `(1, C, H, W)`.
    Images(&'a [Tensor<T>]),
}

/// Averaged absolute input gradient, summed over input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ErfMap {
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width`.
    pub grid: Vec<f64>,
    pub sample_count: usize,
    pub input_kind: InputKind,
    /// Input pixel under the seeded feature unit, `(row, col)`.
    pub center: (usize, usize),
}

impl ErfMap {
    pub fn at(&self, h: usize, w: usize) -> f64 {
        self.grid[h * self.width + w]
    }

    pub fn max(&self) -> f64 {
        self.grid.iter().copied().fold(0.0, f64::max)
    }

    pub fn total(&self) -> f64 {
        self.grid.iter().sum()
    }

    /// First position holding the maximum, `(row, col)`.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.grid.iter().enumerate() {
            if v > self.grid[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    /// One CSV row per map row; values in shortest round-trip notation.
    pub fn to_grid_csv(&self) -> String {
        let mut s = String::new();
        for row in self.grid.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(s, "{}", cells.join(","));
        }
        s
    }

    pub fn from_grid_csv(text: &str, center: Option<(usize, usize)>) -> Result<Self> {
        let mut grid = Vec::new();
        let mut width = None;
        let mut height = 0;
        for (i, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let row = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    column: 1,
                    message: e.to_string(),
                })?;
            if *width.get_or_insert(row.len()) != row.len() {
                return Err(Error::Malformed(format!("ragged grid at line {}", i + 1)));
            }
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Malformed(format!(
                    "grid line {} holds a negative or non-finite value",
                    i + 1
                )));
            }
            grid.extend(row);
            height += 1;
        }
        let width = width.ok_or_else(|| Error::Malformed("empty grid".into()))?;
        Ok(Self {
            height,
            width,
            grid,
            sample_count: 0,
            input_kind: InputKind::RandomUniform,
            center: center.unwrap_or((height / 2, width / 2)),
        })
    }
}

/// Absolute input gradient of the center feature unit (summed over feature
/// channels), summed over input channels. Returns the map and the input
/// position under the seeded unit.
pub fn erf_sample<T: Real, N: Network<T> + ?Sized>(
    net: &N,
    input: &Tensor<T>,
) -> Result<(Vec<f64>, (usize, usize))> {
    let s = input.shape();
    if s.batch != 1 || s.channels != net.in_channels() {
        return Err(Error::Shape(format!(
            "ERF input must be (1, {}, H, W), got {s}",
            net.in_channels()
        )));
    }
    let mut g = Graph::new(net.store());
    let x = g.input(input.clone());
    let feats = net.features(&mut g, x)?;
    let fs = g.tape.shape(feats)?;
    let (ch, cw) = (fs.height / 2, fs.width / 2);
    let mut seed = Tensor::zeros(fs);
    for c in 0..fs.channels {
        seed.set(0, c, ch, cw, T::one());
    }
    let grads = g.tape.backward(feats, &seed)?;
    let gx = grads.wrt(x)?;
    let mut map = vec![0.0; s.plane()];
    for c in 0..s.channels {
        for (m, v) in map.iter_mut().zip(gx.plane(0, c)) {
            *m += v.abs().as_f64();
        }
    }
    let stride = net.feature_stride();
    Ok((map, (ch * stride, cw * stride)))
}

/// Averages [`erf_sample`] over `n_samples` stimuli. Samples are computed on
/// up to `threads` workers, but always summed in sample order, so the result
/// does not depend on the worker count.
pub fn compute_erf<T: Real, N: Network<T> + Sync + ?Sized>(
    net: &N,
    height: usize,
    width: usize,
    n_samples: usize,
    source: ErfSource<'_, T>,
    threads: usize,
) -> Result<ErfMap> {
    if n_samples == 0 {
        return Err(Error::Input("ERF needs at least one sample".into()));
    }
    let shape = Shape::new(1, net.in_channels(), height, width);
    let (count, kind) = match source {
        ErfSource::RandomUniform { .. } => (n_samples, InputKind::RandomUniform),
        ErfSource::Images(imgs) => {
            if imgs.is_empty() {
                return Err(Error::Input("no input images".into()));
            }
            if let Some(bad) = imgs.iter().find(|t| t.shape() != shape) {
                return Err(Error::Input(format!(
                    "image shape {} differs from model input {shape}",
                    bad.shape()
                )));
            }
            (n_samples.min(imgs.len()), InputKind::ImageDir)
        }
    };
    let stimulus = |i: usize| -> Tensor<T> {
        match source {
            ErfSource::RandomUniform { seed } => {
                Tensor::random_uniform(shape, 0.0, 1.0, &mut Rng::with_stream(seed, i as u64))
            }
            ErfSource::Images(imgs) => imgs[i].clone(),
        }
    };

    let threads = threads.max(1);
    let mut acc = vec![0.0f64; height * width];
    let mut center = (height / 2, width / 2);
    let mut done = 0;
    let mut next_log = 0;
    while done < count {
        let batch: Vec<usize> = (done..count.min(done + threads)).collect();
        let results: Vec<Result<(Vec<f64>, (usize, usize))>> = if batch.len() == 1 {
            vec![erf_sample(net, &stimulus(batch[0]))]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|&i| {
                        let stimulus = &stimulus;
                        scope.spawn(move || erf_sample(net, &stimulus(i)))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("ERF worker panicked"))
                    .collect()
            })
        };
        for r in results {
            let (map, c) = r?;
            center = c;
            for (a, m) in acc.iter_mut().zip(map) {
                *a += m;
            }
        }
        done += batch.len();
        if done >= next_log || done == count {
            info!("erf: {done}/{count} samples");
            next_log = done + count.div_ceil(10);
        }
    }
    let inv = 1.0 / count as f64;
    acc.iter_mut().for_each(|v| *v *= inv);
    Ok(ErfMap {
        height,
        width,
        grid: acc,
        sample_count: count,
        input_kind: kind,
        center,
    })
}

/// Gamma-corrected grayscale: `round(255 * (v / max)^gamma)`.
pub fn render_heatmap(e: &ErfMap, gamma: f64) -> Result<GrayImage> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::Input(format!("gamma must be positive, got {gamma}")));
    }
    let max = e.max();
    if max <= 0.0 || !max.is_finite() {
        return Err(Error::Degenerate("heatmap of an all-zero map".into()));
    }
    let pixels = e
        .grid
        .iter()
        .map(|&v| (255.0 * (v / max).powf(gamma)).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::new(e.width, e.height, pixels)
}
