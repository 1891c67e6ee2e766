//! Denoising demo: autoencoders of several compression widths trained on
//! noisy digit glyphs, compared by reconstruction error against the clean
//! images.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::data::{generate_digits, DigitSample, GlyphStyle, IMAGE_PIXELS, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::nn::{Group, ParamId, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::pgm::GrayImage;
use crate::rng::{CounterRng, Purpose};
use crate::tensor::{Tape, Tensor};

pub const FIG1_DIMS: [usize; 3] = [49, 98, 392];
pub const FIG1_SIGMA: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Config {
    pub dims: Vec<usize>,
    pub sigma: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Train against the clean image instead of the noisy input.
    pub clean_target: bool,
    /// Images per reconstruction grid.
    pub grid_images: usize,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Self {
            dims: FIG1_DIMS.to_vec(),
            sigma: FIG1_SIGMA,
            train_size: 2000,
            test_size: 500,
            epochs: 30,
            batch_size: 50,
            lr: 1e-3,
            seed: 0,
            clean_target: false,
            grid_images: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Row {
    pub dim: usize,
    pub seed: u64,
    /// Test MSE of the reconstruction against the clean image.
    pub mse_clean: f64,
    /// Test MSE against the noisy input.
    pub mse_noisy: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Fig1Result {
    pub rows: Vec<Fig1Row>,
    /// Test reconstructions of the first `grid_images` test digits per dim.
    pub reconstructions: Vec<(usize, Vec<Vec<f64>>)>,
    pub test: Vec<DigitSample>,
}

fn to_tensor(rows: &[&[f64]]) -> Tensor<f32> {
    let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
    Tensor::new(vec![rows.len(), IMAGE_PIXELS], data).expect("row lengths checked")
}

/// Trains one autoencoder per compression width and scores it on held-out digits.
pub fn run_fig1(cfg: &Fig1Config) -> Result<Fig1Result> {
    if cfg.dims.is_empty() || cfg.train_size == 0 || cfg.test_size == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("fig1 needs dims and non-empty splits".into()));
    }
    if !(cfg.sigma >= 0.0) {
        return Err(Error::Config(format!("fig1 sigma {} must be non-negative", cfg.sigma)));
    }
    let style = GlyphStyle::default();
    let train = generate_digits(cfg.train_size, cfg.sigma, cfg.seed, &style);
    let test = generate_digits(cfg.test_size, cfg.sigma, cfg.seed ^ 0x7e57, &style);
    let root = CounterRng::new(cfg.seed);
    let mut rows = Vec::new();
    let mut reconstructions = Vec::new();
    for &dim in &cfg.dims {
        let mut store = ParamStore::<f32>::new();
        let mut init = root.stream(Purpose::Init, dim as u64);
        let ae = Autoencoder::new(&mut store, "ae", IMAGE_PIXELS, dim, Group::Hae, &mut init)?;
        let ids: Vec<ParamId> = store.ids().collect();
        let mut opt = Adam::new(AdamConfig::default());
        let mut last = f64::NAN;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut root.stream(Purpose::Shuffle, (dim as u64) << 20 | epoch as u64));
            let (mut sum, mut n) = (0.0, 0);
            for chunk in order.chunks(cfg.batch_size) {
                let input: Vec<&[f64]> = chunk.iter().map(|&i| train[i].noisy.as_slice()).collect();
                let target: Vec<&[f64]> = chunk
                    .iter()
                    .map(|&i| if cfg.clean_target { &train[i].clean } else { &train[i].noisy }.as_slice())
                    .collect();
                let mut tape = Tape::new();
                let params = store.bind(&mut tape, |_| true);
                let x = tape.constant(to_tensor(&input));
                let y = tape.constant(to_tensor(&target));
                let out = ae.forward(&mut tape, &params, x)?;
                let loss = tape.mse(out, y)?;
                let value = tape.value(loss).data()[0] as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("fig1 loss (dim {dim}, epoch {epoch})")));
                }
                sum += value;
                n += 1;
                let grads = tape.backward(loss)?;
                let updates: Vec<_> = ids.iter().map(|&id| (id, grads.wrt(params.var(id)))).collect();
                opt.step(&mut store, &updates, cfg.lr)?;
            }
            last = sum / n as f64;
        }
        let (mut clean_se, mut noisy_se) = (0.0, 0.0);
        let mut shown = Vec::new();
        for chunk in test.chunks(250) {
            let input: Vec<&[f64]> = chunk.iter().map(|s| s.noisy.as_slice()).collect();
            let mut tape = Tape::new();
            let params = store.bind(&mut tape, |_| false);
            let x = tape.constant(to_tensor(&input));
            let out = ae.forward(&mut tape, &params, x)?;
            let recon = tape.value(out).to_f64_vec();
            for (s, r) in chunk.iter().zip(recon.chunks(IMAGE_PIXELS)) {
                for ((&c, &z), &o) in s.clean.iter().zip(&s.noisy).zip(r) {
                    clean_se += (o - c) * (o - c);
                    noisy_se += (o - z) * (o - z);
                }
                if shown.len() < cfg.grid_images {
                    shown.push(r.to_vec());
                }
            }
        }
        let total = (test.len() * IMAGE_PIXELS) as f64;
        rows.push(Fig1Row {
            dim,
            seed: cfg.seed,
            mse_clean: clean_se / total,
            mse_noisy: noisy_se / total,
            final_train_loss: last,
        });
        reconstructions.push((dim, shown));
    }
    Ok(Fig1Result { rows, reconstructions, test })
}

/// Writes `fig1_mse.csv` and one PGM grid per image set (clean, noisy and
/// each compression width) into `dir`; returns the written paths.
pub fn write_fig1(result: &Fig1Result, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let table = dir.join("fig1_mse.csv");
    let mut w = csv::Writer::from_path(&table)?;
    w.write_record(["dim", "seed", "mse_clean", "mse_noisy", "final_train_loss"])?;
    for r in &result.rows {
        w.write_record([
            r.dim.to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.mse_clean),
            format!("{:.6}", r.mse_noisy),
            format!("{:.6}", r.final_train_loss),
        ])?;
    }
    w.flush()?;
    written.push(table);
    let n = result.reconstructions.first().map_or(0, |(_, v)| v.len());
    let cols = n.clamp(1, 8);
    let mut save = |name: String, images: Vec<&[f64]>| -> Result<()> {
        let cells =
            images.iter().map(|v| GrayImage::from_unit(IMAGE_SIDE, IMAGE_SIDE, v)).collect::<Result<Vec<_>>>()?;
        if cells.is_empty() {
            return Ok(());
        }
        let path = dir.join(name);
        GrayImage::grid(&cells, cols, 2)?.save(&path)?;
        written.push(path);
        Ok(())
    };
    save("fig1_clean.pgm".into(), result.test[..n].iter().map(|s| s.clean.as_slice()).collect())?;
    save("fig1_noisy.pgm".into(), result.test[..n].iter().map(|s| s.noisy.as_slice()).collect())?;
    for (dim, images) in &result.reconstructions {
        save(format!("fig1_d{dim}.pgm"), images.iter().map(Vec::as_slice).collect())?;
    }
    Ok(written)
}

/// Whether the clean-target MSE strictly decreases as the width grows.
pub fn strictly_ordered(rows: &[Fig1Row]) -> bool {
    let mut sorted: Vec<&Fig1Row> = rows.iter().collect();
    sorted.sort_by_key(|r| r.dim);
    sorted.windows(2).all(|w| w[1].mse_clean < w[0].mse_clean)
}
