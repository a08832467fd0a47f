//! Landmark prediction with a trained detector and scoring against
//! annotations at the original image resolution.

use serde::Serialize;

use crate::attention::AttentionKind;
use crate::data::{prepare, AnnotatedImage};
use crate::detector::{self, DetectorState, Mode};
use crate::error::{invalid_input, Result};
use crate::heatmap::{decode_argmax, rescale_coords, Heatmap, HeatmapSpec, Landmark};
use crate::metrics::{heatmap_l2, radial_errors, MetricsReport};
use crate::tensor::Tensor;

/// Images per forward pass.
const EVAL_BATCH: usize = 8;

/// Splits a `[L, H, W]` prediction into per-landmark heatmaps.
pub fn split_heatmaps(prediction: &Tensor) -> Result<Vec<Heatmap>> {
    let shape = prediction.shape();
    if shape.len() != 3 {
        return Err(invalid_input(format!("expected [L, H, W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    prediction
        .data()
        .chunks(h * w)
        .map(|c| Heatmap::from_values(h, w, c.to_vec()))
        .collect()
}

/// Arg-max landmark of every channel of a `[L, H, W]` prediction.
pub fn decode_prediction(prediction: &Tensor) -> Result<Vec<Landmark>> {
    Ok(split_heatmaps(prediction)?
        .iter()
        .enumerate()
        .map(|(i, h)| decode_argmax(h).landmark(i))
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// `errors[image][landmark]` in physical units.
    pub errors: Vec<Vec<f64>>,
    /// Predicted landmarks in the original pixel coordinates of each image.
    pub predictions: Vec<Vec<Landmark>>,
}

/// Predicts every image at the detector's resolution, maps the arg-max
/// positions back to the image's own size and scores them with its spacing.
/// The heatmap term compares predictions with the encoded targets.
pub fn evaluate(
    state: &DetectorState,
    images: &[AnnotatedImage],
    spec: &HeatmapSpec,
    thresholds: &[f64],
    kind: AttentionKind,
) -> Result<Evaluation> {
    if images.is_empty() {
        return Err(invalid_input("no images to evaluate"));
    }
    let mut errors = Vec::with_capacity(images.len());
    let mut predictions = Vec::with_capacity(images.len());
    let mut l2_total = 0.0;
    let mut l2_count = 0usize;
    let net = (spec.height, spec.width);
    for chunk in images.chunks(EVAL_BATCH) {
        let prepared = chunk.iter().map(|img| prepare(img, spec)).collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack(&prepared.iter().map(|p| &p.pixels).collect::<Vec<_>>())?;
        let out = detector::forward_batch(state, &x, Mode::Eval, kind)?;
        let per_image = out.len() / chunk.len();
        for ((img, prep), pred) in chunk.iter().zip(&prepared).zip(out.data().chunks(per_image)) {
            let shape = &out.shape()[1..];
            let pred = Tensor::from_vec(shape, pred.to_vec())?;
            let predicted = decode_prediction(&pred)?
                .iter()
                .map(|l| rescale_coords(l, net, img.size()))
                .collect::<Result<Vec<_>>>()?;
            errors.push(radial_errors(&predicted, &img.landmarks, img.spacing)?);
            predictions.push(predicted);
            for (p, t) in split_heatmaps(&pred)?.iter().zip(split_heatmaps(&prep.heatmaps)?.iter()) {
                l2_total += heatmap_l2(p, t)?;
                l2_count += 1;
            }
        }
    }
    let unit = if images.iter().all(|i| i.spacing == 1.0) {
        "px"
    } else {
        "mm"
    };
    let report = MetricsReport::from_errors(&errors, thresholds, Some(l2_total / l2_count as f64), unit)?;
    Ok(Evaluation {
        report,
        errors,
        predictions,
    })
}
