//! Terminal heatmaps. Values map to a 10-level ramp after min–max
//! normalization; control masks use `█` for control and `·` for lazy.

use lazy_mdp::grid::{Cell, CompiledGrid, GridWorldSpec, Slice};

pub const RAMP: [char; 10] = ['.', ':', '-', '=', '+', '*', 'o', 'O', '#', '@'];
pub const CONTROL: char = '█';
pub const LAZY: char = '·';
pub const WALL: char = '▒';
/// A passable cell with no state in the panel's slice.
pub const EMPTY: char = ' ';

pub fn ramp_char(value: f64, lo: f64, hi: f64) -> char {
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return RAMP[0];
    }
    let t = ((value - lo) / (hi - lo)).clamp(0.0, 1.0);
    RAMP[((t * RAMP.len() as f64) as usize).min(RAMP.len() - 1)]
}

pub fn slice_title(slice: Slice) -> String {
    format!("key={} door={}", u8::from(slice.has_key), u8::from(slice.door_open))
}

fn paint(spec: &GridWorldSpec, cells: &[Vec<Option<f64>>], glyph: impl Fn(f64) -> char) -> Vec<String> {
    (0..spec.rows())
        .map(|r| {
            (0..spec.cols())
                .map(|c| match cells[r][c] {
                    Some(v) => glyph(v),
                    None if spec.cell(r, c) == Cell::Wall => WALL,
                    None => EMPTY,
                })
                .collect()
        })
        .collect()
}

fn bounds(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    values
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// One panel per slice, normalized over all states so slices compare.
pub fn value_panels(grid: &CompiledGrid, values: &[f64]) -> Vec<(String, Vec<String>)> {
    let (lo, hi) = bounds(values.iter().copied());
    grid.slices()
        .into_iter()
        .map(|sl| {
            let cells = grid.panel(values, sl);
            (slice_title(sl), paint(grid.spec(), &cells, |v| ramp_char(v, lo, hi)))
        })
        .collect()
}

pub fn mask_panels(grid: &CompiledGrid, mask: &[bool]) -> Vec<(String, Vec<String>)> {
    let values: Vec<f64> = mask.iter().map(|&m| f64::from(u8::from(m))).collect();
    grid.slices()
        .into_iter()
        .map(|sl| {
            let cells = grid.panel(&values, sl);
            let glyph = |v: f64| if v > 0.5 { CONTROL } else { LAZY };
            (slice_title(sl), paint(grid.spec(), &cells, glyph))
        })
        .collect()
}

/// Panel of per-cell values, normalized over the panel itself.
pub fn cell_panel(spec: &GridWorldSpec, cells: &[Vec<Option<f64>>]) -> Vec<String> {
    let (lo, hi) = bounds(cells.iter().flatten().flatten().copied());
    paint(spec, cells, |v| ramp_char(v, lo, hi))
}

/// Places titled panels next to each other, titles on the first line.
pub fn side_by_side(panels: &[(String, Vec<String>)]) -> String {
    const GAP: &str = "   ";
    let width = |lines: &[String], title: &str| {
        lines
            .iter()
            .map(|l| l.chars().count())
            .chain(std::iter::once(title.chars().count()))
            .max()
            .unwrap_or(0)
    };
    let widths: Vec<usize> = panels.iter().map(|(t, l)| width(l, t)).collect();
    let height = panels.iter().map(|(_, l)| l.len()).max().unwrap_or(0);
    let pad = |s: &str, w: usize| format!("{s}{}", " ".repeat(w - s.chars().count()));
    let mut out = String::new();
    let titles: Vec<String> = panels.iter().zip(&widths).map(|((t, _), &w)| pad(t, w)).collect();
    out.push_str(titles.join(GAP).trim_end());
    out.push('\n');
    for row in 0..height {
        let line: Vec<String> = panels
            .iter()
            .zip(&widths)
            .map(|((_, l), &w)| pad(l.get(row).map_or("", String::as_str), w))
            .collect();
        out.push_str(line.join(GAP).trim_end());
        out.push('\n');
    }
    out
}

pub fn legend() -> String {
    format!(
        "ramp low→high \"{}\"  {CONTROL} control  {LAZY} lazy  {WALL} wall\n",
        RAMP.iter().collect::<String>()
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_covers_the_range() {
        assert_eq!(ramp_char(0.0, 0.0, 1.0), '.');
        assert_eq!(ramp_char(1.0, 0.0, 1.0), '@');
        assert_eq!(ramp_char(0.55, 0.0, 1.0), '*');
        assert_eq!(ramp_char(3.0, 3.0, 3.0), '.');
    }

    #[test]
    fn panels_align() {
        let text = side_by_side(&[
            ("a".into(), vec!["xx".into(), "yy".into()]),
            ("bbb".into(), vec!["z".into()]),
        ]);
        assert_eq!(text, "a    bbb\nxx   z\nyy\n");
    }
}
