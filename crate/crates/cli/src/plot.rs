//! Hourly snapshots of one predicted cube as an SVG grid.

use anyhow::Result;
use nowcast_core::data::RainCube;
use nowcast_core::ensemble::{load_submission, submission_file};
use nowcast_core::Error;
use plotters::prelude::*;

use crate::{default_out, Common, PlotArgs, Session};

const PANEL: u32 = 220;
const COLS: usize = 4;

/// One subplot: the slot shown and its title.
#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub hour: usize,
    pub slot: usize,
    pub ratio: f64,
    pub title: String,
}

fn slot_ratio(cube: &RainCube, slot: usize) -> f64 {
    let v = cube.slot(slot);
    v.iter().map(|&x| x as u64).sum::<u64>() as f64 / v.len() as f64
}

/// Panels at `stride_hours, 2·stride_hours, ..` up to `hours`; each shows the
/// last slot of its hour.
pub fn panels(cube: &RainCube, step_minutes: u32, stride_hours: usize, hours: usize) -> Result<Vec<Panel>> {
    if step_minutes == 0 || 60 % step_minutes != 0 {
        return Err(Error::config(format!("step of {} minutes does not divide an hour", step_minutes)).into());
    }
    if stride_hours == 0 || hours == 0 {
        return Err(Error::config("stride and span must be positive").into());
    }
    let per_hour = (60 / step_minutes) as usize;
    let slots = cube.shape()[0];
    if hours * per_hour > slots {
        return Err(Error::config(format!("{} hours need {} slots, the cube has {}", hours, hours * per_hour, slots)).into());
    }
    Ok((stride_hours..=hours)
        .step_by(stride_hours)
        .map(|hour| {
            let slot = hour * per_hour - 1;
            let ratio = slot_ratio(cube, slot);
            Panel { hour, slot, ratio, title: format!("+{}h  ratio={:.3}", hour, ratio) }
        })
        .collect())
}

pub fn render_svg(cube: &RainCube, panels: &[Panel]) -> Result<String> {
    let [_, h, w] = cube.shape();
    let cols = panels.len().clamp(1, COLS);
    let rows = panels.len().div_ceil(cols).max(1);
    let mut buf = String::new();
    {
        let root = SVGBackend::with_string(&mut buf, (PANEL * cols as u32, (PANEL + 24) * rows as u32)).into_drawing_area();
        root.fill(&WHITE).map_err(draw_err)?;
        let areas = root.split_evenly((rows, cols));
        for (p, area) in panels.iter().zip(areas) {
            let area = area.titled(&p.title, ("sans-serif", 14)).map_err(draw_err)?;
            let (aw, ah) = area.dim_in_pixel();
            let cell = ((aw.min(ah) as f64 - 8.0) / h.max(w) as f64).max(0.1);
            let px = |i: usize| 4 + (i as f64 * cell).round() as i32;
            area.draw(&Rectangle::new([(px(0), px(0)), (px(w), px(h))], BLACK.stroke_width(1))).map_err(draw_err)?;
            let plane = cube.slot(p.slot);
            for r in 0..h {
                let row = &plane[r * w..(r + 1) * w];
                let mut c = 0;
                while c < w {
                    if row[c] == 0 {
                        c += 1;
                        continue;
                    }
                    let start = c;
                    while c < w && row[c] != 0 {
                        c += 1;
                    }
                    let rect = Rectangle::new([(px(start), px(r)), (px(c), px(r + 1))], BLUE.filled());
                    area.draw(&rect).map_err(draw_err)?;
                }
            }
        }
        root.present().map_err(draw_err)?;
    }
    Ok(buf)
}

fn draw_err<E: std::fmt::Debug>(e: E) -> anyhow::Error {
    anyhow::anyhow!("drawing failed: {:?}", e)
}

pub fn plot(s: Session, common: &Common, a: &PlotArgs) -> Result<()> {
    let file = submission_file(&a.submission, &a.region, a.year);
    if !file.exists() {
        return Err(Error::domain(format!("no prediction for {} / {} in {}", a.region, a.year, a.submission.display())).into());
    }
    let mut manifest = s.manifest("plot")?;
    let sub = load_submission(&a.submission)?;
    let cube = sub
        .cubes
        .get(&(a.region.clone(), a.year, a.sample))
        .ok_or_else(|| Error::domain(format!("{} / {} has no sample {}", a.region, a.year, a.sample)))?;
    let ps = panels(cube, nowcast_core::GridSpec::default().step_minutes, a.stride_hours, a.hours)?;
    let svg = render_svg(cube, &ps)?;
    let out = default_out(common, "plot");
    std::fs::create_dir_all(&out)?;
    let path = out.join(format!("{}_{}_{:03}.svg", a.region, a.year, a.sample));
    std::fs::write(&path, svg)?;
    for p in &ps {
        println!("{}", p.title);
    }
    println!("{}", path.display());
    manifest.inputs.push(file);
    manifest.outputs.push(path);
    manifest.finish(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nowcast_core::data::SampleMeta;

    fn cube(values: Vec<u8>, side: usize) -> RainCube {
        RainCube::new(values, [32, side, side], SampleMeta::new("r", 2020, "t")).unwrap()
    }

    #[test]
    fn hourly_stride_over_eight_hours_gives_eight_panels() {
        let c = cube(vec![0; 32 * 16], 4);
        let ps = panels(&c, 15, 1, 8).unwrap();
        assert_eq!(ps.len(), 8);
        assert_eq!(ps.iter().map(|p| p.slot).collect::<Vec<_>>(), vec![3, 7, 11, 15, 19, 23, 27, 31]);
        assert!(ps.iter().all(|p| p.title.ends_with("ratio=0.000")));
        assert_eq!(ps[0].title, "+1h  ratio=0.000");
        assert_eq!(panels(&c, 15, 2, 8).unwrap().len(), 4);
    }

    #[test]
    fn title_ratio_matches_the_slot_mean() {
        let side = 10;
        let values: Vec<u8> = (0..32 * side * side).map(|i| ((i * 7919) % 13 < 4) as u8).collect();
        let c = cube(values.clone(), side);
        for p in panels(&c, 15, 1, 8).unwrap() {
            let plane = &values[p.slot * side * side..(p.slot + 1) * side * side];
            let mean = plane.iter().filter(|&&v| v == 1).count() as f64 / plane.len() as f64;
            let shown: f64 = p.title.rsplit('=').next().unwrap().parse().unwrap();
            assert!((shown - mean).abs() <= 5e-4, "{} vs {}", shown, mean);
        }
    }

    #[test]
    fn spans_beyond_the_cube_are_rejected() {
        let c = cube(vec![0; 32 * 4], 2);
        assert!(panels(&c, 15, 1, 9).is_err());
        assert!(panels(&c, 15, 0, 8).is_err());
    }

    #[test]
    fn svg_carries_every_title() {
        let mut values = vec![0u8; 32 * 16];
        values[3 * 16..4 * 16].fill(1);
        let c = cube(values, 4);
        let ps = panels(&c, 15, 1, 8).unwrap();
        let svg = render_svg(&c, &ps).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("ratio=1.000"));
        assert_eq!(svg.matches("ratio=").count(), 8);
    }
}
