//! Static SVG figures for an evaluation report.

use std::fmt::Write;

use mcore::metrics::{MetricsReport, AIOU_THRESHOLDS};

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Maps `[lo, hi]` onto the pixel span `[a, b]`.
fn scale(lo: f64, hi: f64, a: f64, b: f64) -> impl Fn(f64) -> f64 {
    let span = if hi > lo { hi - lo } else { 1.0 };
    move |v| a + (v - lo) / span * (b - a)
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN);
    let _ = writeln!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (x0 + x1) / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

/// Predicted against true scores, with the identity line.
pub fn score_scatter(r: &MetricsReport) -> String {
    let all = r.true_scores.iter().chain(&r.pred_scores).copied();
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let pad = ((hi - lo) * 0.05).max(1e-9);
    let (lo, hi) = (lo - pad, hi + pad);
    let sx = scale(lo, hi, MARGIN, W - MARGIN / 2.0);
    let sy = scale(lo, hi, H - MARGIN, MARGIN);

    let srcc = r.srcc.map_or("undefined".to_string(), |s| format!("{s:.4}"));
    let mut out = header(&format!("Scores (n = {}, SRCC {srcc})", r.n));
    axes(&mut out, "true score", "predicted score");
    for t in ticks(lo, hi) {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{t:.1}</text>",
            sx(t),
            H - MARGIN + 14.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{t:.1}</text>",
            MARGIN - 4.0,
            sy(t) + 4.0
        );
    }
    let _ = writeln!(
        out,
        "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>",
        sx(lo),
        sy(lo),
        sx(hi),
        sy(hi)
    );
    for (t, p) in r.true_scores.iter().zip(&r.pred_scores) {
        let _ = writeln!(
            out,
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.7\"/>",
            sx(*t),
            sy(*p)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One bar per video, with the AIoU thresholds drawn across.
pub fn iou_bars(r: &MetricsReport) -> String {
    let n = r.per_video_iou.len().max(1);
    let sy = scale(0.0, 1.0, H - MARGIN, MARGIN);
    let span = W - MARGIN * 1.5;
    let bar = span / n as f64;

    let mut out = header(&format!("Stage interval IoU per video (n = {})", r.per_video_iou.len()));
    axes(&mut out, "test video", "mean stage IoU");
    for t in ticks(0.0, 1.0) {
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{t:.2}</text>",
            MARGIN - 4.0,
            sy(t) + 4.0
        );
    }
    for (i, &iou) in r.per_video_iou.iter().enumerate() {
        let top = sy(iou.clamp(0.0, 1.0));
        let _ = writeln!(
            out,
            "<rect x=\"{:.2}\" y=\"{top:.1}\" width=\"{:.2}\" height=\"{:.1}\" fill=\"seagreen\"><title>{}: {iou:.4}</title></rect>",
            MARGIN + i as f64 * bar + bar * 0.1,
            bar * 0.8,
            H - MARGIN - top,
            escape(r.video_ids.get(i).map_or("", String::as_str))
        );
    }
    for d in AIOU_THRESHOLDS {
        let y = sy(d);
        let frac = r
            .aiou_at(d)
            .map_or(String::new(), |a| format!(" ({:.0}% pass)", a * 100.0));
        let _ = writeln!(
            out,
            "<line x1=\"{MARGIN}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"firebrick\" stroke-dasharray=\"5 3\"/>",
            W - MARGIN / 2.0
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" fill=\"firebrick\">d = {d}{frac}</text>",
            W - MARGIN / 2.0,
            y - 3.0
        );
    }
    out.push_str("</svg>\n");
    out
}
