use std::fmt::Write as _;

use crate::error::Result;
use crate::schedule::{advance_concave, max_timestep_gap, Curve, ScheduleFamily};

pub const OMEGA_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
const CURVE_POINTS: usize = 200;

/// `i,linear,<curve>...,<configured family>` sampled on a uniform grid.
pub fn curves_csv(family: &ScheduleFamily) -> Result<String> {
    let horizon = family.horizon();
    let families: Vec<ScheduleFamily> = Curve::ALL
        .iter()
        .map(|&c| ScheduleFamily::new(c, horizon))
        .collect::<Result<_>>()?;
    let mut out = String::from("i");
    for f in &families {
        write!(out, ",{}", f.label()).unwrap();
    }
    writeln!(out, ",configured:{}", family.label()).unwrap();
    for k in 0..=CURVE_POINTS {
        let i = horizon * k as f64 / CURVE_POINTS as f64;
        write!(out, "{i}").unwrap();
        for f in families.iter().chain(std::iter::once(family)) {
            write!(out, ",{}", f.eval(i)?).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Starting points `(i0, t0)` at the band midpoints of a few steps.
pub fn shift_starts(family: &ScheduleFamily) -> Result<Vec<(f64, f64)>> {
    let horizon = family.horizon();
    [0.2, 0.4, 0.6]
        .iter()
        .map(|frac| {
            let i0 = (horizon * frac).round();
            let t0 = 0.5 * ((horizon - i0) + family.eval(i0)?);
            Ok((i0, t0))
        })
        .collect()
}

/// Integer-step trajectories of the shifted scheduler from each start.
pub fn shifted_trajectories(family: &ScheduleFamily) -> Result<Vec<Vec<(f64, f64)>>> {
    let horizon = family.horizon();
    shift_starts(family)?
        .into_iter()
        .map(|(i0, t0)| {
            let mut path = vec![(i0, t0)];
            let (mut i, mut t) = (i0, t0);
            while i < horizon {
                t = advance_concave(family, i, t)?;
                i += 1.0;
                path.push((i, t));
            }
            Ok(path)
        })
        .collect()
}

pub fn shifted_csv(paths: &[Vec<(f64, f64)>]) -> String {
    let mut out = String::from("trajectory,i,t\n");
    for (k, path) in paths.iter().enumerate() {
        for (i, t) in path {
            writeln!(out, "{k},{i},{t}").unwrap();
        }
    }
    out
}

/// `(omega, max gap)` for ExtremeClamp reweighted by each omega.
pub fn gap_sweep(horizon: f64, omegas: &[f64]) -> Result<Vec<(f64, f64)>> {
    omegas
        .iter()
        .map(|&w| {
            let fam = ScheduleFamily::with_omega(Curve::ExtremeClamp, w, horizon)?;
            Ok((w, max_timestep_gap(&fam)))
        })
        .collect()
}

/// Line plot of the base curves, the configured family and shifted trajectories.
pub fn plot_svg(family: &ScheduleFamily, paths: &[Vec<(f64, f64)>]) -> Result<String> {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 40.0;
    const COLORS: [&str; 6] = ["#444444", "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
    let horizon = family.horizon();
    let span = SIZE - 2.0 * PAD;
    let px = |i: f64| PAD + i / horizon * span;
    let py = |t: f64| SIZE - PAD - t / horizon * span;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <path d=\"M{PAD},{PAD} V{b} H{r}\" stroke=\"black\" fill=\"none\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\">step i</text>\n<text x=\"4\" y=\"{PAD}\">t</text>\n",
        b = SIZE - PAD,
        r = SIZE - PAD,
        cx = SIZE / 2.0,
        ly = SIZE - 10.0,
    );
    let mut curves: Vec<ScheduleFamily> = Curve::ALL
        .iter()
        .map(|&c| ScheduleFamily::new(c, horizon))
        .collect::<Result<_>>()?;
    if !Curve::ALL
        .iter()
        .any(|&c| ScheduleFamily::new(c, horizon).ok() == Some(*family))
    {
        curves.push(*family);
    }
    for (k, f) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut points = String::new();
        for s in 0..=CURVE_POINTS {
            let i = horizon * s as f64 / CURVE_POINTS as f64;
            write!(points, "{:.2},{:.2} ", px(i), py(f.eval(i)?)).unwrap();
        }
        writeln!(
            svg,
            "<polyline points=\"{points}\" stroke=\"{color}\" fill=\"none\"/>\n\
             <text x=\"{x}\" y=\"{y}\" fill=\"{color}\">{label}</text>",
            x = SIZE - PAD - 120.0,
            y = PAD + 14.0 * k as f64,
            label = f.label()
        )
        .unwrap();
    }
    for path in paths {
        let points: String = path
            .iter()
            .map(|&(i, t)| format!("{:.2},{:.2} ", px(i), py(t)))
            .collect();
        writeln!(
            svg,
            "<polyline points=\"{points}\" stroke=\"black\" stroke-dasharray=\"4 3\" fill=\"none\"/>"
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
