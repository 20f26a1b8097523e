//! SVG plots of run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::records::{read_csv, RunTable};
use crate::error::{Error, Result};
use crate::verify::LandscapeSpec;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// `x0,x1,value` samples of the landscape on an `n x n` grid over its domain.
pub fn landscape_grid_csv(spec: &LandscapeSpec, n: usize) -> String {
    let mut s = String::from("x0,x1,value\n");
    let (ax, ay) = (spec.domain[0], spec.domain[1]);
    for j in 0..n {
        for i in 0..n {
            let x = ax.0 + (ax.1 - ax.0) * i as f64 / (n - 1) as f64;
            let y = ay.0 + (ay.1 - ay.0) * j as f64 / (n - 1) as f64;
            let _ = writeln!(s, "{x},{y},{}", spec.value(&[x, y]));
        }
    }
    s
}

/// A regular grid read back from `landscape.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Row-major over `ys`, then `xs`.
    pub values: Vec<f64>,
}

pub fn read_grid(path: &Path) -> Result<Grid> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |row: usize, column: &str, msg: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        column: column.into(),
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some("x0,x1,value") {
        return Err(err(1, "", "expected header `x0,x1,value`".into()));
    }
    let mut pts = Vec::new();
    for (k, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(err(
                k + 2,
                "",
                format!("{} fields, expected 3", cells.len()),
            ));
        }
        let mut v = [0.0; 3];
        for (c, name) in ["x0", "x1", "value"].iter().enumerate() {
            v[c] = cells[c]
                .parse()
                .map_err(|_| err(k + 2, name, format!("`{}` is not a number", cells[c])))?;
        }
        pts.push(v);
    }
    let mut xs: Vec<f64> = Vec::new();
    for p in &pts {
        if xs.contains(&p[0]) {
            break;
        }
        xs.push(p[0]);
    }
    let n = xs.len();
    if n < 2 || pts.len() % n != 0 {
        return Err(err(1, "", "samples do not form a regular grid".into()));
    }
    let ys = pts.iter().step_by(n).map(|p| p[1]).collect();
    Ok(Grid {
        xs,
        ys,
        values: pts.iter().map(|p| p[2]).collect(),
    })
}

/// Linear map from data coordinates to the plot area.
#[derive(Debug, Clone, Copy)]
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        let range = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(v), b.max(v))
            });
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        Frame {
            x: range(&mut xs.clone()),
            y: range(&mut ys.clone()),
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn open_svg(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>",
        W / 2.0,
        escape(title)
    );
    s
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
    let _ = writeln!(
        s,
        "<path d=\"M{x0} {y1} L{x0} {y0} L{x1} {y0}\" fill=\"none\" stroke=\"black\"/>"
    );
    for k in 0..=4 {
        let fx = f.x.0 + (f.x.1 - f.x.0) * k as f64 / 4.0;
        let fy = f.y.0 + (f.y.1 - f.y.0) * k as f64 / 4.0;
        let (px, py) = (f.px(fx), f.py(fy));
        let _ = writeln!(
            s,
            "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
            y0 + 14.0,
            tick(fx)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{py:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
            x0 - 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
        W / 2.0,
        H - 16.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(s: &mut String, names: &[String]) {
    for (k, n) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * k as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            W - MARGIN - 120.0,
            y - 9.0,
            PALETTE[k % PALETTE.len()],
            W - MARGIN - 106.0,
            y,
            escape(n)
        );
    }
}

fn polyline(s: &mut String, f: &Frame, pts: &[(f64, f64)], color: &str, attrs: &str) {
    if pts.is_empty() {
        return;
    }
    let coords: Vec<String> = pts
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
        .collect();
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.2\" {attrs}/>",
        coords.join(" ")
    );
}

/// Runs found under a directory, grouped by their parent directory.
type Groups = BTreeMap<String, Vec<(PathBuf, RunTable)>>;

fn collect_runs(root: &Path, dir: &Path, out: &mut Groups) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_runs(root, &p, out)?;
            continue;
        }
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("run_") && name.ends_with(".csv") {
            let table = read_csv(&p)?;
            let group = p
                .parent()
                .and_then(|d| d.strip_prefix(root).ok())
                .map(|d| d.display().to_string())
                .filter(|d| !d.is_empty())
                .unwrap_or_else(|| ".".into());
            out.entry(group).or_default().push((p, table));
        }
    }
    Ok(())
}

fn series_plot(
    groups: &Groups,
    task: usize,
    title: &str,
    ylabel: &str,
    pick: &dyn Fn(&super::records::Row) -> Option<f64>,
) -> String {
    let all: Vec<(f64, f64)> = groups
        .values()
        .flatten()
        .flat_map(|(_, t)| {
            t.rows
                .iter()
                .filter_map(|r| pick(r).map(|v| (r.iter as f64, v)))
        })
        .collect();
    let f = Frame::fit(all.iter().map(|p| p.0), all.iter().map(|p| p.1));
    let mut s = open_svg(title);
    axes(&mut s, &f, "outer iteration", ylabel);
    for (k, (_, runs)) in groups.iter().enumerate() {
        for (path, t) in runs {
            let pts: Vec<(f64, f64)> = t
                .rows
                .iter()
                .filter_map(|r| pick(r).map(|v| (r.iter as f64, v)))
                .collect();
            let attrs = format!(
                "data-run=\"{}\" data-task=\"{task}\"",
                escape(&path.display().to_string())
            );
            polyline(&mut s, &f, &pts, PALETTE[k % PALETTE.len()], &attrs);
        }
    }
    legend(&mut s, &groups.keys().cloned().collect::<Vec<_>>());
    s += "</svg>\n";
    s
}

fn negative_transfer_bars(groups: &Groups) -> String {
    let rates: Vec<(String, f64)> = groups
        .iter()
        .filter_map(|(g, runs)| {
            let r: Vec<f64> = runs
                .iter()
                .filter_map(|(_, t)| t.negative_transfer_rate())
                .collect();
            (!r.is_empty()).then(|| (g.clone(), r.iter().sum::<f64>() / r.len() as f64))
        })
        .collect();
    let f = Frame {
        x: (0.0, rates.len().max(1) as f64),
        y: (
            0.0,
            rates.iter().map(|r| r.1).fold(0.0, f64::max).max(1e-3) * 1.1,
        ),
    };
    let mut s = open_svg("negative-transfer frequency");
    axes(&mut s, &f, "method", "fraction of outer iterations");
    for (k, (g, r)) in rates.iter().enumerate() {
        let (x0, x1) = (f.px(k as f64 + 0.2), f.px(k as f64 + 0.8));
        let (ytop, ybase) = (f.py(*r), f.py(0.0));
        let _ = writeln!(
            s,
            "<rect x=\"{x0:.2}\" y=\"{ytop:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\" data-group=\"{}\" data-rate=\"{r}\"/>",
            x1 - x0,
            ybase - ytop,
            PALETTE[k % PALETTE.len()],
            escape(g)
        );
    }
    legend(
        &mut s,
        &rates.iter().map(|r| r.0.clone()).collect::<Vec<_>>(),
    );
    s += "</svg>\n";
    s
}

/// Line segments of the `level` iso-contour by marching squares. Saddle
/// cells are resolved by the cell-center average.
pub fn contour_segments(g: &Grid, level: f64) -> Vec<[(f64, f64); 2]> {
    let nx = g.xs.len();
    let v = |i: usize, j: usize| g.values[j * nx + i];
    let lerp = |a: (f64, f64, f64), b: (f64, f64, f64)| -> (f64, f64) {
        let t = if a.2 == b.2 {
            0.5
        } else {
            (level - a.2) / (b.2 - a.2)
        };
        (a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1))
    };
    let mut segs = Vec::new();
    for j in 0..g.ys.len().saturating_sub(1) {
        for i in 0..nx - 1 {
            let c = [
                (g.xs[i], g.ys[j], v(i, j)),
                (g.xs[i + 1], g.ys[j], v(i + 1, j)),
                (g.xs[i + 1], g.ys[j + 1], v(i + 1, j + 1)),
                (g.xs[i], g.ys[j + 1], v(i, j + 1)),
            ];
            let mask = c
                .iter()
                .enumerate()
                .fold(0, |m, (k, p)| m | (usize::from(p.2 > level) << k));
            // edges: 0 bottom, 1 right, 2 top, 3 left
            let e = |k: usize| lerp(c[k], c[(k + 1) % 4]);
            let pairs: &[(usize, usize)] = match mask {
                0 | 15 => &[],
                1 | 14 => &[(3, 0)],
                2 | 13 => &[(0, 1)],
                3 | 12 => &[(3, 1)],
                4 | 11 => &[(1, 2)],
                6 | 9 => &[(0, 2)],
                7 | 8 => &[(3, 2)],
                5 | 10 => {
                    let center = c.iter().map(|p| p.2).sum::<f64>() / 4.0;
                    if (center > level) == (mask == 5) {
                        &[(3, 2), (0, 1)]
                    } else {
                        &[(3, 0), (1, 2)]
                    }
                }
                _ => unreachable!(),
            };
            segs.extend(pairs.iter().map(|&(a, b)| [e(a), e(b)]));
        }
    }
    segs
}

fn contour_plot(grid: &Grid, groups: &Groups) -> String {
    let f = Frame {
        x: (grid.xs[0], *grid.xs.last().expect("grid")),
        y: (grid.ys[0], *grid.ys.last().expect("grid")),
    };
    let mut s = open_svg("loss landscape and trajectories");
    axes(&mut s, &f, "x0 (task 1)", "x1 (task 2)");
    let (lo, hi) = grid
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    for k in 1..12 {
        let level = lo + (hi - lo) * k as f64 / 12.0;
        let mut d = String::new();
        for [a, b] in contour_segments(grid, level) {
            let _ = write!(
                d,
                "M{:.2} {:.2}L{:.2} {:.2}",
                f.px(a.0),
                f.py(a.1),
                f.px(b.0),
                f.py(b.1)
            );
        }
        if !d.is_empty() {
            let _ = writeln!(
                s,
                "<path class=\"contour\" data-level=\"{level}\" d=\"{d}\" fill=\"none\" stroke=\"#999\" stroke-width=\"0.7\"/>"
            );
        }
    }
    for (k, (_, runs)) in groups.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for (path, t) in runs {
            let pts: Vec<(f64, f64)> = t
                .rows
                .iter()
                .filter(|r| r.coordinates.len() >= 2)
                .map(|r| (r.coordinates[0], r.coordinates[1]))
                .collect();
            let run = escape(&path.display().to_string());
            polyline(
                &mut s,
                &f,
                &pts,
                color,
                &format!("class=\"trajectory\" data-run=\"{run}\""),
            );
            if let Some(&(x, y)) = pts.last() {
                let _ = writeln!(
                    s,
                    "<circle class=\"final\" data-run=\"{run}\" data-x=\"{x}\" data-y=\"{y}\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                    f.px(x),
                    f.py(y)
                );
            }
        }
    }
    legend(&mut s, &groups.keys().cloned().collect::<Vec<_>>());
    s += "</svg>\n";
    s
}

/// Writes `loss.svg`, `accuracy.svg` (if any run recorded accuracy),
/// `negative_transfer.svg` (if measured) and `contour.svg` (if the
/// directory holds `landscape.csv`) into `dir`. Returns the files written.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut groups = Groups::new();
    collect_runs(dir, dir, &mut groups)?;
    if groups.is_empty() {
        return Err(Error::invalid(
            "plot",
            format!("no runs found in {}", dir.display()),
        ));
    }
    let tasks = groups
        .values()
        .flatten()
        .map(|(_, t)| t.tasks)
        .max()
        .unwrap_or(0);
    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };
    for t in 0..tasks {
        emit(
            &format!("loss_task{}.svg", t + 1),
            series_plot(
                &groups,
                t + 1,
                &format!("training loss, task {}", t + 1),
                "loss",
                &|r| r.loss.get(t).copied(),
            ),
        )?;
        let has_acc = groups
            .values()
            .flatten()
            .any(|(_, tb)| tb.final_accuracy().is_some());
        if has_acc {
            emit(
                &format!("accuracy_task{}.svg", t + 1),
                series_plot(
                    &groups,
                    t + 1,
                    &format!("test accuracy, task {}", t + 1),
                    "accuracy",
                    &|r| r.accuracy.as_ref().and_then(|a| a.get(t).copied()),
                ),
            )?;
        }
    }
    if groups
        .values()
        .flatten()
        .any(|(_, t)| t.negative_transfer_rate().is_some())
    {
        emit("negative_transfer.svg", negative_transfer_bars(&groups))?;
    }
    let grid_path = dir.join("landscape.csv");
    if grid_path.is_file() {
        let grid = read_grid(&grid_path)?;
        emit("contour.svg", contour_plot(&grid, &groups))?;
    }
    Ok(written)
}
