//! Static SVG plots: hydrographs and adjacency heatmaps. Display-only
//! artifacts emitted at the end of a pipeline run.

use ndarray::Array2;

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Observed-vs-predicted line chart for one station.
pub fn hydrograph_svg(title: &str, observed: &[f64], predicted: &[f64]) -> String {
    let (w, h) = (860.0, 300.0);
    let (ml, mr, mt, mb) = (50.0, 10.0, 28.0, 24.0);
    let n = observed.len().max(2);
    let lo = observed
        .iter()
        .chain(predicted)
        .fold(f64::INFINITY, |m, v| m.min(*v));
    let hi = observed
        .iter()
        .chain(predicted)
        .fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let span = (hi - lo).max(1e-9);
    let x = |i: usize| ml + (w - ml - mr) * i as f64 / (n - 1) as f64;
    let y = |v: f64| mt + (h - mt - mb) * (1.0 - (v - lo) / span);
    let path = |series: &[f64]| {
        series
            .iter()
            .enumerate()
            .map(|(i, v)| format!("{}{},{}", if i == 0 { "M" } else { "L" }, fmt(x(i)), fmt(y(*v))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{ml}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">{title}</text>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#888\"/>\n",
        h - mb,
        w - mr,
        h - mb
    ));
    svg.push_str(&format!(
        "<path d=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.2\"/>\n",
        path(observed)
    ));
    svg.push_str(&format!(
        "<path d=\"{}\" fill=\"none\" stroke=\"#ff7f0e\" stroke-width=\"1.2\" stroke-dasharray=\"4 2\"/>\n",
        path(predicted)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"18\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#1f77b4\">observed</text>\n",
        w - 180.0
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"18\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#ff7f0e\">predicted</text>\n",
        w - 100.0
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Heatmap of a weighted adjacency slice (entry [child, parent]).
pub fn heatmap_svg(title: &str, matrix: &Array2<f64>, labels: &[String]) -> String {
    let d = matrix.nrows();
    let cell = 34.0;
    let ml = 80.0;
    let mt = 50.0;
    let w = ml + cell * d as f64 + 20.0;
    let h = mt + cell * d as f64 + 20.0;
    let max = matrix.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"10\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">{title}</text>\n"
    ));
    for (i, label) in labels.iter().enumerate() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{label}</text>\n",
            ml - 6.0,
            mt + cell * i as f64 + cell * 0.65
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\">{label}</text>\n",
            ml + cell * i as f64 + 4.0,
            mt - 8.0
        ));
    }
    for i in 0..d {
        for j in 0..d {
            let v = matrix[[i, j]].abs() / max;
            let shade = (255.0 * (1.0 - v)) as u8;
            svg.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\" stroke=\"#ddd\"/>\n",
                ml + cell * j as f64,
                mt + cell * i as f64
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}
