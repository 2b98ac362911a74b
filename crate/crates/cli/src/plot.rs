use std::path::Path;

use anyhow::{anyhow, Result};
use plotters::prelude::*;
use weakvid::experiment::{ci95_half_width, mean_std};

/// Mean curve across repeats with its 95% interval half-width per point.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub label: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub half: Vec<f64>,
    pub repeats: usize,
}

impl Band {
    /// Pointwise statistics over equally long series; longer ones are cut
    /// to the shortest.
    pub fn from_series(label: &str, x: &[f64], series: &[Vec<f64>]) -> Self {
        let len = series.iter().map(Vec::len).min().unwrap_or(0).min(x.len());
        let mut mean = Vec::with_capacity(len);
        let mut half = Vec::with_capacity(len);
        for i in 0..len {
            let col: Vec<f64> = series.iter().map(|s| s[i]).collect();
            let (m, sd) = mean_std(&col);
            mean.push(m);
            half.push(ci95_half_width(sd, col.len()));
        }
        Self { label: label.to_string(), x: x[..len].to_vec(), mean, half, repeats: series.len() }
    }

    fn bounds(&self) -> (f64, f64) {
        let lo = self.mean.iter().zip(&self.half).map(|(m, h)| m - h).fold(f64::INFINITY, f64::min);
        let hi = self.mean.iter().zip(&self.half).map(|(m, h)| m + h).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

/// Draws every band into one SVG: a line per mean and, with two or more
/// repeats, a shaded interval.
pub fn draw_bands(path: &Path, title: &str, x_label: &str, y_label: &str, bands: &[Band]) -> Result<()> {
    let points: Vec<&Band> = bands.iter().filter(|b| !b.x.is_empty()).collect();
    if points.is_empty() {
        return Err(anyhow!("nothing to plot"));
    }
    let x_min = points.iter().flat_map(|b| b.x.iter().copied()).fold(f64::INFINITY, f64::min);
    let mut x_max = points.iter().flat_map(|b| b.x.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    if x_max <= x_min {
        x_max = x_min + 1.0;
    }
    let (mut y_min, mut y_max) = points.iter().map(|b| b.bounds()).fold((f64::INFINITY, f64::NEG_INFINITY), |a, b| (a.0.min(b.0), a.1.max(b.1)));
    let pad = ((y_max - y_min) * 0.1).max(0.01);
    y_min = (y_min - pad).max(0.0);
    y_max = (y_max + pad).min(1.0);

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    let err = |e: DrawingAreaErrorKind<_>| anyhow!("plotting failed: {e:?}");
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(x_min..x_max, y_min..y_max)
        .map_err(err)?;
    chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(err)?;

    for (i, band) in points.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        if band.repeats >= 2 {
            let mut poly: Vec<(f64, f64)> = band.x.iter().zip(&band.mean).zip(&band.half).map(|((x, m), h)| (*x, m + h)).collect();
            poly.extend(band.x.iter().zip(&band.mean).zip(&band.half).rev().map(|((x, m), h)| (*x, m - h)));
            chart.draw_series(std::iter::once(Polygon::new(poly, color.mix(0.2).filled()))).map_err(err)?;
        }
        chart
            .draw_series(LineSeries::new(band.x.iter().copied().zip(band.mean.iter().copied()), color.stroke_width(2)))
            .map_err(err)?
            .label(band.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_half_width_uses_sample_std() {
        let series: Vec<Vec<f64>> = (0..5).map(|i| vec![0.5 + 0.01 * i as f64, 0.6]).collect();
        let band = Band::from_series("x", &[0.0, 1.0], &series);
        let sd = mean_std(&[0.5, 0.51, 0.52, 0.53, 0.54]).1;
        assert!((band.half[0] - 1.96 * sd / 5f64.sqrt()).abs() < 1e-12);
        assert_eq!(band.half[1], 0.0);
        assert!((band.mean[0] - 0.52).abs() < 1e-12);
    }

    #[test]
    fn single_repeat_has_no_band() {
        let band = Band::from_series("x", &[0.0, 1.0, 2.0], &[vec![0.1, 0.2]]);
        assert_eq!(band.x.len(), 2);
        assert!(band.half.iter().all(|h| *h == 0.0));
    }

    #[test]
    fn svg_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.svg");
        let band = Band::from_series("run", &[0.0, 1.0, 2.0], &[vec![0.1, 0.3, 0.4], vec![0.2, 0.35, 0.5]]);
        draw_bands(&path, "t", "epoch", "mAP", &[band]).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().contains("<svg"));
    }
}
