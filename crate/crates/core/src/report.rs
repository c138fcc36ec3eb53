//! Comparison tables and SVG plots over finished experiment cells.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::Aggregate;
use crate::model::{count_blocks, Attention, Family, TopologyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
    Diverged,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::Failed => "failed",
            Self::Diverged => "diverged",
        }
    }
}

/// Per-case test metrics in full-volume coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case: String,
    pub dsc: Option<f64>,
    pub asd_mm: Option<f64>,
    pub sen: Option<f64>,
    pub ppv: Option<f64>,
    /// Whether the localized region held every ground-truth voxel.
    pub contained: bool,
}

/// Everything a table row needs from one finished cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub id: String,
    pub topology: TopologyConfig,
    pub seed: u64,
    pub status: CellStatus,
    pub error: Option<String>,
    pub cases: Vec<CaseRow>,
    /// Mean DSC and ASD over the training regions after training.
    #[serde(default)]
    pub train_dsc: Option<f64>,
    #[serde(default)]
    pub train_asd_mm: Option<f64>,
    pub steps: usize,
    pub checkpoint_sha256: Option<String>,
    pub param_checksum: Option<String>,
    pub seconds: f64,
}

impl CellSummary {
    pub fn failed(id: String, topology: TopologyConfig, seed: u64, status: CellStatus, error: String) -> Self {
        Self {
            id,
            topology,
            seed,
            status,
            error: Some(error),
            cases: Vec::new(),
            train_dsc: None,
            train_asd_mm: None,
            steps: 0,
            checkpoint_sha256: None,
            param_checksum: None,
            seconds: 0.0,
        }
    }

    pub fn dsc(&self) -> Aggregate {
        Aggregate::of(self.cases.iter().filter_map(|c| c.dsc))
    }

    pub fn asd(&self) -> Aggregate {
        Aggregate::of(self.cases.iter().filter_map(|c| c.asd_mm))
    }
}

/// Display name of a topology, e.g. `HF-UNet-6-dAtt`.
pub fn method_label(t: &TopologyConfig) -> String {
    let base = match t.family {
        Family::Unet => "U-Net".to_string(),
        Family::Eb => "EB".to_string(),
        Family::Lb => "LB".to_string(),
        Family::Hf => format!("HF-UNet-{}", t.tcl_count),
    };
    let att = match (t.family, t.attention) {
        (Family::Hf, Attention::Channel) => "-cAtt",
        (Family::Hf, Attention::Position) => "-pAtt",
        (Family::Hf, Attention::Dual) => "-dAtt",
        _ => "",
    };
    format!("{base}{att}")
}

/// One comparison-table row: a grid point pooled over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub fb: (usize, usize),
    pub alpha: f64,
    pub attention: Attention,
    pub seeds: Vec<u64>,
    pub failed: usize,
    pub dsc: Aggregate,
    pub asd_mm: Aggregate,
    pub sen: Aggregate,
    pub ppv: Aggregate,
}

fn row_key(t: &TopologyConfig) -> String {
    format!("{}|{}|{}|{}", t.name(), t.alpha, t.attention, t.attention_averaged)
}

/// Groups cells by grid point, keeping first-appearance order.
pub fn table_rows(cells: &[CellSummary]) -> Vec<TableRow> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&CellSummary>> = BTreeMap::new();
    for c in cells {
        let k = row_key(&c.topology);
        if !groups.contains_key(&k) {
            order.push(k.clone());
        }
        groups.entry(k).or_default().push(c);
    }
    order
        .iter()
        .map(|k| {
            let g = &groups[k];
            let t = &g[0].topology;
            let ok: Vec<&CaseRow> = g.iter().filter(|c| c.status == CellStatus::Ok).flat_map(|c| &c.cases).collect();
            TableRow {
                method: method_label(t),
                fb: count_blocks(t),
                alpha: t.alpha,
                attention: t.attention,
                seeds: g.iter().map(|c| c.seed).collect(),
                failed: g.iter().filter(|c| c.status != CellStatus::Ok).count(),
                dsc: Aggregate::of(ok.iter().filter_map(|r| r.dsc)),
                asd_mm: Aggregate::of(ok.iter().filter_map(|r| r.asd_mm)),
                sen: Aggregate::of(ok.iter().filter_map(|r| r.sen)),
                ppv: Aggregate::of(ok.iter().filter_map(|r| r.ppv)),
            }
        })
        .collect()
}

pub const TABLE_HEADER: &str =
    "Methods,FB,DSC±std,ASD±std(mm),alpha,attention,seeds,cases,failed,dsc_mean,dsc_std,asd_mean,asd_std,sen_mean,ppv_mean";

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = format!("{TABLE_HEADER}\n");
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{}+{},{:.3}±{:.3},{:.3}±{:.3},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.method,
            r.fb.0,
            r.fb.1,
            r.dsc.mean,
            r.dsc.std,
            r.asd_mm.mean,
            r.asd_mm.std,
            r.alpha,
            r.attention,
            seeds.join(" "),
            r.dsc.n,
            r.failed,
            r.dsc.mean,
            r.dsc.std,
            r.asd_mm.mean,
            r.asd_mm.std,
            r.sen.mean,
            r.ppv.mean
        );
    }
    s
}

/// Per-case CSV rows of every successful cell, the source of the box plots.
pub fn cases_csv(cells: &[CellSummary]) -> String {
    let mut s = String::from("cell,method,alpha,attention,seed,case,dsc,asd_mm,sen,ppv,contained\n");
    let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
    for c in cells.iter().filter(|c| c.status == CellStatus::Ok) {
        for r in &c.cases {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.id,
                method_label(&c.topology),
                c.topology.alpha,
                c.topology.attention,
                c.seed,
                r.case,
                opt(r.dsc),
                opt(r.asd_mm),
                opt(r.sen),
                opt(r.ppv),
                r.contained
            );
        }
    }
    s
}

pub fn cells_csv(cells: &[CellSummary]) -> String {
    let mut s = String::from("cell,status,dsc_mean,asd_mean,train_dsc,train_asd,steps,param_checksum,seconds,error\n");
    for c in cells {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{},{},{},{},{:.1},{}",
            c.id,
            c.status.as_str(),
            c.dsc().mean,
            c.asd().mean,
            c.train_dsc.map(|v| format!("{v:.6}")).unwrap_or_default(),
            c.train_asd_mm.map(|v| format!("{v:.6}")).unwrap_or_default(),
            c.steps,
            c.param_checksum.as_deref().unwrap_or(""),
            c.seconds,
            c.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        );
    }
    s
}

/// Quartiles by linear interpolation, `[min, q1, median, q3, max]`.
pub fn five_numbers(values: &[f64]) -> Option<[f64; 5]> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some([v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]])
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Panel {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    lo: f64,
    hi: f64,
}

impl Panel {
    fn sy(&self, v: f64) -> f64 {
        let t = if self.hi > self.lo { (v - self.lo) / (self.hi - self.lo) } else { 0.5 };
        self.y + self.h * (1.0 - t)
    }

    fn axes(&self, s: &mut String, title: &str) {
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
            self.x, self.y, self.w, self.h
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"#,
            self.x + self.w / 2.0,
            self.y - 8.0,
            esc(title)
        );
        for i in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * i as f64 / 4.0;
            let y = self.sy(v);
            let _ = writeln!(
                s,
                r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"##,
                self.x,
                self.x + self.w,
                self.x - 4.0,
                y + 3.0,
                fmt_tick(v)
            );
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || (v != 0.0 && v.abs() < 0.01) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Side-by-side box plots, one panel per metric; each panel holds one box
/// per labelled group.
pub fn box_plot_svg(panels: &[(&str, Vec<(String, Vec<f64>)>)]) -> String {
    let (pw, ph, left, top) = (360.0, 260.0, 60.0, 40.0);
    let width = left + panels.len() as f64 * (pw + left);
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{:.0}" font-family="sans-serif">"#,
        top + ph + 50.0
    );
    s.push('\n');
    for (i, (title, groups)) in panels.iter().enumerate() {
        let (lo, hi) = range(groups.iter().flat_map(|g| g.1.iter().copied()));
        let p = Panel { x: left + i as f64 * (pw + left), y: top, w: pw, h: ph, lo, hi };
        p.axes(&mut s, title);
        let n = groups.len().max(1) as f64;
        let slot = pw / n;
        for (j, (label, vals)) in groups.iter().enumerate() {
            let cx = p.x + slot * (j as f64 + 0.5);
            let bw = (slot * 0.5).min(30.0);
            let _ = writeln!(
                s,
                r#"<text x="{cx:.1}" y="{:.1}" font-size="10" text-anchor="middle">{}</text>"#,
                p.y + p.h + 14.0,
                esc(label)
            );
            let Some([mn, q1, md, q3, mx]) = five_numbers(vals) else { continue };
            let _ = writeln!(
                s,
                r##"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="#333"/><rect x="{:.1}" y="{:.1}" width="{bw:.1}" height="{:.1}" fill="#9ecae1" stroke="#333"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#d62728" stroke-width="2"/>"##,
                p.sy(mx),
                p.sy(mn),
                cx - bw / 2.0,
                p.sy(q3),
                (p.sy(q1) - p.sy(q3)).max(0.5),
                cx - bw / 2.0,
                p.sy(md),
                cx + bw / 2.0,
                p.sy(md)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Line plot of named `(x, y)` series; `log_y` plots `log10(y)` for
/// positive `y`.
pub fn line_plot_svg(title: &str, series: &[(&str, Vec<(f64, f64)>)], log_y: bool) -> String {
    let (pw, ph, left, top) = (560.0, 280.0, 70.0, 40.0);
    let tf = |y: f64| if log_y { if y > 0.0 { y.log10() } else { f64::NAN } } else { y };
    let (lo, hi) = range(series.iter().flat_map(|s| s.1.iter().map(|p| tf(p.1))));
    let (x0, x1) = range(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let p = Panel { x: left, y: top, w: pw, h: ph, lo, hi };
    let mut s = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{:.0}" font-family="sans-serif">"#,
        left + pw + 150.0,
        top + ph + 40.0
    );
    s.push('\n');
    p.axes(&mut s, &if log_y { format!("{title} (log10)") } else { title.to_string() });
    const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let mut d = String::new();
        for &(x, y) in pts {
            let y = tf(y);
            if !y.is_finite() {
                continue;
            }
            let sx = p.x + pw * (x - x0) / (x1 - x0).max(1e-12);
            let _ = write!(d, "{sx:.1},{:.1} ", p.sy(y));
        }
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1" points="{}"/>"#, d.trim_end());
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" fill="{c}">{}</text>"#,
            p.x + pw + 10.0,
            p.y + 14.0 * (i as f64 + 1.0),
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Box plots of test DSC and ASD per alpha value.
pub fn alpha_box_plot(cells: &[CellSummary]) -> Option<String> {
    let mut by_alpha: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut alphas: Vec<f64> = cells.iter().filter(|c| c.status == CellStatus::Ok).map(|c| c.topology.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    if alphas.len() < 2 {
        return None;
    }
    for c in cells.iter().filter(|c| c.status == CellStatus::Ok) {
        let e = by_alpha.entry(format!("{:020.12}", c.topology.alpha)).or_default();
        e.0.extend(c.cases.iter().filter_map(|r| r.dsc));
        e.1.extend(c.cases.iter().filter_map(|r| r.asd_mm));
    }
    let labels: Vec<String> = alphas.iter().map(|a| a.to_string()).collect();
    let (d, a): (Vec<_>, Vec<_>) =
        by_alpha.into_values().zip(labels).map(|((d, a), l)| ((l.clone(), d), (l, a))).unzip();
    Some(box_plot_svg(&[("DSC by alpha", d), ("ASD (mm) by alpha", a)]))
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("no cell summaries under {0}")]
    Empty(PathBuf),
}

pub const SUMMARY_FILE: &str = "summary.json";

/// Reads every `<dir>/*/summary.json`, in directory-name order.
pub fn collect_summaries(runs: &Path) -> Result<Vec<CellSummary>, ReportError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ReportError::Io { path, source }
    };
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(runs)
        .map_err(io(runs))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SUMMARY_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(ReportError::Empty(runs.to_path_buf()));
    }
    dirs.iter()
        .map(|d| {
            let path = d.join(SUMMARY_FILE);
            let bytes = std::fs::read(&path).map_err(io(&path))?;
            serde_json::from_slice(&bytes).map_err(|source| ReportError::Parse { path, source })
        })
        .collect()
}

/// Writes `table.csv` (or `table_out`), `cases.csv`, `cells.csv` and, for
/// an alpha sweep, `alpha_boxplot.svg` next to the table.
pub fn write_report(cells: &[CellSummary], table_out: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let dir = table_out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let write = |p: PathBuf, s: &str| std::fs::write(&p, s).map(|_| p.clone()).map_err(|source| ReportError::Io { path: p, source });
    let mut out = vec![write(table_out.to_path_buf(), &table_csv(&table_rows(cells)))?];
    out.push(write(dir.join("cases.csv"), &cases_csv(cells))?);
    out.push(write(dir.join("cells.csv"), &cells_csv(cells))?);
    if let Some(svg) = alpha_box_plot(cells) {
        out.push(write(dir.join("alpha_boxplot.svg"), &svg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(name: &str, alpha: f64, seed: u64, dsc: &[f64]) -> CellSummary {
        let mut t = TopologyConfig::named(name).unwrap();
        t.alpha = alpha;
        CellSummary {
            id: format!("{name}-{alpha}-{seed}"),
            topology: t,
            seed,
            status: CellStatus::Ok,
            error: None,
            cases: dsc
                .iter()
                .enumerate()
                .map(|(i, &d)| CaseRow { case: format!("c{i}"), dsc: Some(d), asd_mm: Some(1.0 - d), sen: None, ppv: None, contained: true })
                .collect(),
            train_dsc: None,
            train_asd_mm: None,
            steps: 1,
            checkpoint_sha256: None,
            param_checksum: None,
            seconds: 0.0,
        }
    }

    #[test]
    fn quartiles() {
        assert_eq!(five_numbers(&[4.0, 1.0, 3.0, 2.0, 5.0]), Some([1.0, 2.0, 3.0, 4.0, 5.0]));
        assert_eq!(five_numbers(&[1.0, 2.0]).unwrap()[2], 1.5);
        assert_eq!(five_numbers(&[]), None);
    }

    #[test]
    fn table_groups_seeds_and_counts_failures() {
        let mut cells = vec![cell("unet", 0.2, 0, &[0.8, 0.9]), cell("hf-6", 0.2, 0, &[0.9]), cell("unet", 0.2, 1, &[0.7])];
        let t = cells[2].topology.clone();
        cells.push(CellSummary::failed("x".into(), t, 2, CellStatus::Diverged, "nan".into()));
        let rows = table_rows(&cells);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].method, "U-Net");
        assert_eq!(rows[0].seeds, [0, 1, 2]);
        assert_eq!(rows[0].failed, 1);
        assert_eq!(rows[0].dsc.n, 3);
        assert!((rows[0].dsc.mean - 0.8).abs() < 1e-12);
        assert_eq!(rows[1].fb, (1, 6));
        let csv = table_csv(&rows);
        assert!(csv.lines().nth(2).unwrap().starts_with("HF-UNet-6,1+6,0.900±0.000"));
    }

    #[test]
    fn alpha_sweep_draws_one_box_per_alpha() {
        let cells: Vec<_> = (1..=9).map(|i| cell("hf-6", i as f64 / 10.0, 0, &[0.8, 0.85, 0.9])).collect();
        let svg = alpha_box_plot(&cells).unwrap();
        assert_eq!(svg.matches("fill=\"#9ecae1\"").count(), 18);
        assert!(svg.contains(">0.9<"));
        assert_eq!(table_rows(&cells).len(), 9);
        assert!(alpha_box_plot(&cells[..1]).is_none());
    }

    #[test]
    fn labels() {
        let mut t = TopologyConfig::named("hf-6").unwrap();
        t.attention = Attention::Dual;
        assert_eq!(method_label(&t), "HF-UNet-6-dAtt");
        assert_eq!(method_label(&TopologyConfig::named("lb").unwrap()), "LB");
    }
}
