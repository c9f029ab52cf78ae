//! Minimal line-chart SVG of smoothed per-method mean learning curves.

use causal_shaping::agent::CurvePoint;
use causal_shaping::report::smooth;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Mean over seeds at each shared step, then smoothed.
fn method_mean(curves: &[&[CurvePoint]], window: usize) -> Vec<(f64, f64)> {
    let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
    let means: Vec<f64> = (0..len).map(|i| curves.iter().map(|c| c[i].eval_mean).sum::<f64>() / curves.len() as f64).collect();
    let sm = smooth(&means, window).unwrap_or(means);
    (0..len).map(|i| (curves[0][i].step as f64, sm[i])).collect()
}

pub fn learning_curves(curves: &[(&str, Vec<CurvePoint>)], window: usize) -> String {
    let mut methods: Vec<&str> = Vec::new();
    for (m, _) in curves {
        if !methods.contains(m) {
            methods.push(m);
        }
    }
    let lines: Vec<(&str, Vec<(f64, f64)>)> = methods
        .iter()
        .map(|m| {
            let cs: Vec<&[CurvePoint]> = curves.iter().filter(|(k, _)| k == m).map(|(_, c)| c.as_slice()).collect();
            (*m, method_mean(&cs, window))
        })
        .collect();
    let pts = lines.iter().flat_map(|(_, l)| l.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    out += &format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n");
    out += &format!(
        "<path d=\"M{PAD} {PAD} V{b} H{r}\" fill=\"none\" stroke=\"black\"/>\n",
        b = H - PAD,
        r = W - PAD
    );
    out += &format!("<text x=\"{PAD}\" y=\"{}\">{x0}</text>\n", H - PAD + 16.0);
    out += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x1}</text>\n", W - PAD, H - PAD + 16.0);
    out += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.1}</text>\n", PAD - 4.0, H - PAD);
    out += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.1}</text>\n", PAD - 4.0, PAD + 4.0);
    out += &format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">step</text>\n", W / 2.0, H - 12.0);
    for (i, (m, l)) in lines.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = l.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        out += &format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n", path.join(" "));
        out += &format!("<text x=\"{}\" y=\"{}\" fill=\"{color}\">{m}</text>\n", W - PAD - 90.0, PAD + 14.0 * (i as f64 + 1.0));
    }
    out += "</svg>\n";
    out
}
