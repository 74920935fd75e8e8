//! Figure data as CSV and static SVG renders. Every SVG function takes the
//! CSV text only, so a plot can always be regenerated from its data file.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::error::{Error, Result};
use crate::eval::{mean_over_seeds, EvalReport};
use crate::tasks::TaskId;

use super::TaskVecTable;

pub const BARS_HEADER: &str = "model,task,total_err_unpruned,copy_err_unpruned,total_err_pruned,copy_err_pruned";
pub const SCATTER_HEADER: &str = "task,shot,baseline_acc,pruned_acc";
pub const MODES_HEADER: &str = "shot,icl,tv,tv_pruned";

fn per_task(reports: &[EvalReport]) -> BTreeMap<TaskId, (f64, f64, usize)> {
    let mut m: BTreeMap<TaskId, (f64, f64, usize)> = BTreeMap::new();
    for r in reports {
        let e = m.entry(r.task).or_default();
        e.0 += r.total_error;
        e.1 += r.copying_error;
        e.2 += 1;
    }
    m
}

/// One row per (model, task): total and copying error rates before and
/// after pruning, averaged over shots and seeds.
pub fn bars_csv(model_name: &str, unpruned: &[EvalReport], pruned: &[EvalReport]) -> String {
    let (u, p) = (per_task(unpruned), per_task(pruned));
    let mut s = format!("{BARS_HEADER}\n");
    for (t, &(ut, uc, un)) in &u {
        let Some(&(pt, pc, pn)) = p.get(t) else { continue };
        let (un, pn) = (un as f64, pn as f64);
        let _ = writeln!(s, "{model_name},{t},{},{},{},{}", ut / un, uc / un, pt / pn, pc / pn);
    }
    s
}

/// One row per (task, shot): seed-averaged accuracy before and after pruning.
pub fn scatter_csv(unpruned: &[EvalReport], pruned: &[EvalReport]) -> String {
    let p: BTreeMap<(TaskId, usize), f64> =
        mean_over_seeds(pruned).into_iter().map(|c| ((c.task, c.shots), c.accuracy)).collect();
    let mut s = format!("{SCATTER_HEADER}\n");
    for c in mean_over_seeds(unpruned) {
        if let Some(acc) = p.get(&(c.task, c.shots)) {
            let _ = writeln!(s, "{},{},{},{}", c.task, c.shots, c.accuracy, acc);
        }
    }
    s
}

pub fn modes_csv(table: &TaskVecTable) -> String {
    let mut s = format!("{MODES_HEADER}\n");
    for m in &table.per_shot {
        let _ = writeln!(s, "{},{},{},{}", m.shot, m.icl, m.tv, m.tv_pruned);
    }
    s
}

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn parse(text: &str, expected: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Empty("csv".into()))?;
        if header != expected {
            return Err(Error::Format(format!("csv header `{header}`, expected `{expected}`")));
        }
        let header: Vec<String> = header.split(',').map(str::to_string).collect();
        let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
        if let Some(r) = rows.iter().find(|r| r.len() != header.len()) {
            return Err(Error::Format(format!("csv row `{}` has the wrong width", r.join(","))));
        }
        Ok(Self { header, rows })
    }

    fn num(&self, row: usize, col: usize) -> Result<f64> {
        let v = &self.rows[row][col];
        v.parse().map_err(|_| Error::Format(format!("`{v}` in column {} is not a number", self.header[col])))
    }
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 3] = ["#4c72b0", "#dd8452", "#55a868"];

fn open_svg(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);
    axes(&mut s);
    s
}

fn axes(s: &mut String) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = y_of(v, 1.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, y + 4.0);
    }
}

fn y_of(v: f64, max: f64) -> f64 {
    H - MARGIN - (v / max).clamp(0.0, 1.0) * (H - 2.0 * MARGIN)
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let x = W - 150.0;
        let y = MARGIN + 14.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{x}" y="{:.1}" width="10" height="10" fill="{}"/>"#, y - 9.0, COLORS[i % 3]);
        let _ = writeln!(s, r#"<text x="{}" y="{y:.1}">{n}</text>"#, x + 14.0);
    }
}

fn bar(s: &mut String, x: f64, w: f64, v: f64, color: &str, extra: &str) {
    let y = y_of(v, 1.0);
    let _ = writeln!(
        s,
        r#"<rect x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{:.1}" fill="{color}"{extra}/>"#,
        H - MARGIN - y
    );
}

/// Paired bars of total error per task, unpruned next to pruned, with the
/// copying share shaded dark inside each bar.
pub fn bars_svg(csv: &str) -> Result<String> {
    let c = Csv::parse(csv, BARS_HEADER)?;
    let mut s = open_svg("Error rates before and after pruning");
    legend(&mut s, &["unpruned", "pruned"]);
    let n = c.rows.len().max(1) as f64;
    let group = (W - 1.5 * MARGIN) / n;
    let w = group * 0.35;
    for i in 0..c.rows.len() {
        let gx = MARGIN + group * i as f64 + group * 0.1;
        for (k, col) in [2usize, 4].into_iter().enumerate() {
            let x = gx + w * k as f64;
            bar(&mut s, x, w, c.num(i, col)?, COLORS[k], "");
            bar(&mut s, x, w, c.num(i, col + 1)?, "black", r#" fill-opacity="0.35""#);
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            gx + w,
            H - MARGIN + 14.0,
            c.rows[i][1]
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Pruned accuracy against baseline accuracy, one point per (task, shot),
/// with the diagonal for reference.
pub fn scatter_svg(csv: &str) -> Result<String> {
    let c = Csv::parse(csv, SCATTER_HEADER)?;
    let mut s = open_svg("Accuracy per task and shot");
    let x_of = |v: f64| MARGIN + v.clamp(0.0, 1.0) * (W - 1.5 * MARGIN);
    let _ = writeln!(
        s,
        r#"<line x1="{}" y1="{}" x2="{:.1}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
        x_of(0.0),
        y_of(0.0, 1.0),
        x_of(1.0),
        y_of(1.0, 1.0)
    );
    let mut tasks: Vec<&str> = c.rows.iter().map(|r| r[0].as_str()).collect();
    tasks.dedup();
    for i in 0..c.rows.len() {
        let k = tasks.iter().position(|t| *t == c.rows[i][0]).unwrap_or(0);
        let _ = writeln!(
            s,
            r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{}"><title>{} {}-shot</title></circle>"#,
            x_of(c.num(i, 2)?),
            y_of(c.num(i, 3)?, 1.0),
            COLORS[k % 3],
            c.rows[i][0],
            c.rows[i][1]
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">baseline accuracy</text>"#, W / 2.0, H - 12.0);
    s.push_str("</svg>\n");
    Ok(s)
}

/// Grouped bars per shot for the three modes.
pub fn modes_svg(csv: &str) -> Result<String> {
    let c = Csv::parse(csv, MODES_HEADER)?;
    let mut s = open_svg("ICL, task vectors and pruned task vectors");
    legend(&mut s, &["ICL", "Task-Vectors", "Task-Vectors-Pruned"]);
    let n = c.rows.len().max(1) as f64;
    let group = (W - 1.5 * MARGIN) / n;
    let w = group * 0.25;
    for i in 0..c.rows.len() {
        let gx = MARGIN + group * i as f64 + group * 0.1;
        for (k, colour) in COLORS.iter().enumerate() {
            bar(&mut s, gx + w * k as f64, w, c.num(i, k + 1)?, colour, "");
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}-shot</text>"#,
            gx + 1.5 * w,
            H - MARGIN + 14.0,
            c.rows[i][0]
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(task: TaskId, shots: usize, seed: u64, acc: f64, copy: f64) -> EvalReport {
        EvalReport {
            task,
            shots,
            seed,
            accuracy: acc,
            total_error: 1.0 - acc,
            copying_error: copy,
            other_error: 1.0 - acc - copy,
            samples: 10,
        }
    }

    #[test]
    fn csv_rows_and_means() {
        let u = vec![report(TaskId::T5, 1, 0, 0.5, 0.2), report(TaskId::T5, 1, 1, 0.7, 0.1)];
        let p = vec![report(TaskId::T5, 1, 0, 0.6, 0.1), report(TaskId::T5, 1, 1, 0.8, 0.1)];
        let bars = bars_csv("toy", &u, &p);
        let lines: Vec<&str> = bars.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: Vec<f64> = lines[1].split(',').skip(2).map(|x| x.parse().unwrap()).collect();
        assert!((v[0] - 0.4).abs() < 1e-12 && (v[1] - 0.15).abs() < 1e-12);
        assert!((v[2] - 0.3).abs() < 1e-12 && (v[3] - 0.1).abs() < 1e-12);
        let sc = scatter_csv(&u, &p);
        assert_eq!(sc.lines().nth(1).unwrap(), "T5,1,0.6,0.7");
    }

    #[test]
    fn svg_is_a_function_of_csv() {
        let csv = format!("{SCATTER_HEADER}\nT5,1,0.5,0.6\nT6,2,0.4,0.3\n");
        let a = scatter_svg(&csv).unwrap();
        assert_eq!(a, scatter_svg(&csv).unwrap());
        assert_eq!(a.matches("<circle").count(), 2);
        assert!(scatter_svg("a,b\n1,2\n").is_err());
        let modes = format!("{MODES_HEADER}\n1,0.5,0.4,0.45\n2,0.6,0.5,0.5\n");
        assert!(modes_svg(&modes).unwrap().starts_with("<svg"));
        let bars = format!("{BARS_HEADER}\ntoy,T5,0.4,0.1,0.3,0.05\n");
        assert!(bars_svg(&bars).unwrap().ends_with("</svg>\n"));
        assert!(bars_svg(&format!("{BARS_HEADER}\ntoy,T5,x,0.1,0.3,0.05\n")).is_err());
    }
}
