//! Activation maps and gradient-ascent filter visualization.
//!
//! Layers are indexed by position in [`Model::layers`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::preprocess::{write_png, Image};
use crate::tensor::{cst, Element, Tensor};

/// Per-channel maps of one layer, each min-max scaled to `0..=255`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationGrid {
    pub layer: usize,
    pub channels: usize,
    pub maps: Vec<Image>,
    /// Constant channels, rendered mid-gray.
    pub blank: Vec<bool>,
}

/// Eval-mode activations of `layer` for a single `H×W×C` image.
pub fn activation_maps<T: Element>(model: &Model<T>, image: &Tensor<T>, layer: usize) -> Result<ActivationGrid> {
    if image.rank() != 3 {
        return Err(Error::Shape(format!("expected one H×W×C image, got {:?}", image.shape())));
    }
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let pass = model.forward_graph(&mut g, x, Mode::Eval, Some(layer))?;
    let out = g.value(*pass.outputs.last().expect("layer evaluated"));
    let (h, w, c) = match out.shape() {
        [h, w, c] | [1, h, w, c] => (*h, *w, *c),
        [c] | [1, c] => (1, 1, *c),
        s => return Err(Error::Shape(format!("cannot render activations of shape {:?}", s))),
    };
    let data = out.data();
    let mut maps = Vec::with_capacity(c);
    let mut blank = Vec::with_capacity(c);
    for ch in 0..c {
        let vals: Vec<f64> = (0..h * w).map(|p| Element::to_f64(data[p * c + ch])).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let is_blank = !(hi > lo);
        let pixels = vals
            .iter()
            .map(|&v| if is_blank { 128 } else { ((v - lo) / (hi - lo) * 255.0).round() as u8 })
            .collect();
        maps.push(Image::new(h, w, 1, pixels)?);
        blank.push(is_blank);
    }
    Ok(ActivationGrid {
        layer,
        channels: c,
        maps,
        blank,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VizConfig {
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Added to the gradient norm before dividing.
    pub epsilon: f64,
}

impl Default for VizConfig {
    fn default() -> Self {
        VizConfig {
            steps: 30,
            step_size: 1.0,
            seed: 0,
            epsilon: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterVisualization<T> {
    /// Optimized input in pixel units (`0..255` scale, unclipped).
    pub raw: Tensor<T>,
    /// Deprocessed RGB image.
    pub image: Image,
    /// Loss before the first step and after every step (`steps + 1` values).
    pub losses: Vec<f64>,
    /// The gradient was zero at the start; `raw` is the initialization.
    pub zero_gradient: bool,
}

/// Mean activation of channel `filter` at `layer` and its gradient with
/// respect to the pixel-unit input. The model sees `pixels / 255`.
fn loss_and_grad<T: Element>(model: &Model<T>, pixels: &Tensor<T>, layer: usize, filter: usize) -> Result<(f64, Tensor<T>)> {
    let mut g = Graph::new();
    let x = g.param(pixels.clone());
    let scaled = g.scale(x, cst::<T>(1.0 / 255.0));
    let pass = model.forward_graph(&mut g, scaled, Mode::Eval, Some(layer))?;
    let out = *pass.outputs.last().expect("layer evaluated");
    let ch = g.select_last(out, filter)?;
    let loss = g.mean(ch);
    let value = Element::to_f64(g.value(loss).item()?);
    let mut grads = g.backward(loss)?;
    let grad = grads.take(x).ok_or_else(|| Error::Numeric("input gradient missing".into()))?;
    Ok((value, grad))
}

/// Standardize, scale by 0.1, shift by 0.5, clip to `[0, 1]` and quantize.
pub fn deprocess<T: Element>(x: &Tensor<T>) -> Result<Image> {
    let [h, w, c] = x.shape() else {
        return Err(Error::Shape(format!("deprocess expects H×W×C, got {:?}", x.shape())));
    };
    let v: Vec<f64> = x.data().iter().map(|&t| Element::to_f64(t)).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    let pixels = v
        .iter()
        .map(|a| ((((a - mean) / (sd + 1e-5)) * 0.1 + 0.5).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = Image::new(*h, *w, *c, pixels)?;
    Ok(img)
}

/// Gradient ascent on the input to maximize the mean activation of channel
/// `filter` at `layer`, starting from mid-gray plus seeded uniform noise in
/// `±12.7`. Each step adds `step_size · ∇ / (‖∇‖₂ + ε)`.
///
/// If the gradient is zero at the start the initialization is returned with
/// `zero_gradient` set and the initial loss repeated in the trace.
pub fn filter_visualization<T: Element>(model: &Model<T>, layer: usize, filter: usize, cfg: &VizConfig) -> Result<FilterVisualization<T>> {
    let channels = model.layer_channels(layer)?;
    if filter >= channels {
        return Err(Error::InvalidArgument(format!(
            "filter {} out of range: layer {} has {} channels",
            filter, layer, channels
        )));
    }
    let s = model.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = Tensor::from_fn(vec![s, s, model.in_channels], |_| cst::<T>(127.5 + rng.gen_range(-12.7..=12.7)));
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    let step = cst::<T>(cfg.step_size);
    for i in 0..=cfg.steps {
        let (loss, grad) = loss_and_grad(model, &x, layer, filter)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("visualization loss {} at step {}", loss, i)));
        }
        losses.push(loss);
        if i == cfg.steps {
            break;
        }
        let norm = grad.data().iter().map(|&g| Element::to_f64(g) * Element::to_f64(g)).sum::<f64>().sqrt();
        if norm == 0.0 {
            if i == 0 {
                losses.resize(cfg.steps + 1, loss);
                return Ok(FilterVisualization {
                    image: deprocess(&x)?,
                    raw: x,
                    losses,
                    zero_gradient: true,
                });
            }
            // stuck later on: keep the image and record the flat loss
            losses.resize(cfg.steps + 1, loss);
            break;
        }
        let scale = step / cst::<T>(norm + cfg.epsilon);
        for (xi, gi) in x.data_mut().iter_mut().zip(grad.data()) {
            *xi = *xi + scale * *gi;
        }
    }
    Ok(FilterVisualization {
        image: deprocess(&x)?,
        raw: x,
        losses,
        zero_gradient: false,
    })
}

/// Row-major mosaic with 2-pixel black separators and border:
/// `columns·(w+2)+2` wide and `rows·(h+2)+2` tall.
pub fn mosaic(images: &[Image], columns: usize) -> Result<Image> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("no images to arrange".into()))?;
    if columns == 0 {
        return Err(Error::InvalidArgument("columns must be >= 1".into()));
    }
    let (h, w) = (first.height, first.width);
    if let Some(i) = images.iter().position(|m| m.height != h || m.width != w) {
        return Err(Error::InvalidArgument(format!("image {} is not {}x{}", i, w, h)));
    }
    let channels = images.iter().map(|m| m.channels).max().unwrap_or(1);
    let rows = images.len().div_ceil(columns);
    let mut out = Image::filled(rows * (h + 2) + 2, columns * (w + 2) + 2, channels, 0);
    for (i, img) in images.iter().enumerate() {
        let img = if img.channels == channels { img.clone() } else { img.to_rgb() };
        let (top, left) = ((i / columns) * (h + 2) + 2, (i % columns) * (w + 2) + 2);
        for r in 0..h {
            for c in 0..w {
                out.pixel_mut(top + r, left + c).copy_from_slice(img.pixel(r, c));
            }
        }
    }
    Ok(out)
}

pub fn export_grid(images: &[Image], columns: usize, path: &Path) -> Result<Image> {
    let m = mosaic(images, columns)?;
    write_png(&m, path)?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Padding;
    use crate::model::{build_adsnn, Layer, ModelConfig, WidthMultiplier};

    fn conv_model(kernel: Tensor<f64>) -> Model<f64> {
        Model::from_layers(
            12,
            3,
            vec![Layer::Conv {
                kernel,
                stride: 1,
                padding: Padding::Same,
            }],
        )
        .unwrap()
    }

    #[test]
    fn first_layer_has_stem_channels() {
        let cfg = ModelConfig::baseline(32, 3, WidthMultiplier::new(1, 8).unwrap(), 0);
        let m = build_adsnn::<f32>(&cfg).unwrap();
        let img = Tensor::from_fn(vec![32, 32, 3], |i| (i % 7) as f32 / 7.0);
        let g = activation_maps(&m, &img, 0).unwrap();
        assert_eq!(g.channels, cfg.stem_channels());
        assert_eq!(g.maps.len(), g.channels);
        assert_eq!((g.maps[0].height, g.maps[0].width), (16, 16));
        assert_eq!(g, activation_maps(&m, &img, 0).unwrap());
        assert!(activation_maps(&m, &img, 999).is_err());
        // after pooling every channel is a single constant pixel
        let pooled = activation_maps(&m, &img, m.num_layers() - 3).unwrap();
        assert!(pooled.blank.iter().all(|&b| b));
    }

    #[test]
    fn zero_weights_give_blank_maps() {
        let m = conv_model(Tensor::zeros(vec![3, 3, 3, 4]));
        let g = activation_maps(&m, &Tensor::ones(vec![12, 12, 3]), 0).unwrap();
        assert!(g.blank.iter().all(|&b| b));
        assert!(g.maps.iter().all(|m| m.pixels.iter().all(|&p| p == 128)));
    }

    #[test]
    fn zero_filter_returns_initialization() {
        let m = conv_model(Tensor::zeros(vec![3, 3, 3, 2]));
        let cfg = VizConfig::default();
        let v = filter_visualization(&m, 0, 1, &cfg).unwrap();
        assert!(v.zero_gradient);
        assert!(v.losses.iter().all(|&l| l == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = Tensor::<f64>::from_fn(vec![12, 12, 3], |_| 127.5 + rng.gen_range(-12.7..=12.7));
        assert_eq!(v.raw, init);
    }

    #[test]
    fn positive_linear_filter_climbs() {
        let m = conv_model(Tensor::from_fn(vec![3, 3, 3, 2], |i| 0.05 + (i % 5) as f64 * 0.01));
        let v = filter_visualization(&m, 0, 1, &VizConfig::default()).unwrap();
        assert_eq!(v.losses.len(), 31);
        assert!(v.losses.windows(2).all(|w| w[1] > w[0]));
        assert_eq!((v.image.height, v.image.width, v.image.channels), (12, 12, 3));
        assert!(filter_visualization(&m, 0, 2, &VizConfig::default()).is_err());
    }

    #[test]
    fn mosaic_layout() {
        let imgs: Vec<Image> = (0..8).map(|i| Image::filled(5, 4, 1, i * 10)).collect();
        let m = mosaic(&imgs, 8).unwrap();
        assert_eq!((m.width, m.height), (8 * 6 + 2, 7 + 2));
        assert_eq!(m.pixel(2, 2), &[0]);
        assert_eq!(m.pixel(2, 8), &[10]);
        let m3 = mosaic(&imgs, 3).unwrap();
        assert_eq!((m3.width, m3.height), (3 * 6 + 2, 3 * 7 + 2));
        assert!(mosaic(&[], 3).is_err());
    }
}
