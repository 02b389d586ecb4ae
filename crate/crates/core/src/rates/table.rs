use super::poisson::RateEstimate;

/// One labelled row of an aligned text table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub label: String,
    pub cells: Vec<String>,
}

impl TableRow {
    pub fn new(label: impl Into<String>, cells: Vec<String>) -> Self {
        Self {
            label: label.into(),
            cells,
        }
    }
}

/// `0.42 +0.09/-0.08`, or `< 0.03` for a zero-count cell.
pub fn format_cell(r: &RateEstimate) -> String {
    if r.is_upper_limit() {
        format!("< {:.2}", r.ci_high)
    } else {
        format!("{:.2} +{:.2}/-{:.2}", r.rate, r.err_high(), r.err_low())
    }
}

/// Right-aligned columns under a header row; the first column is left-aligned.
pub fn render_table(header: &[&str], rows: &[TableRow]) -> String {
    let ncol = header
        .len()
        .max(rows.iter().map(|r| r.cells.len() + 1).max().unwrap_or(0));
    let mut width = vec![0; ncol];
    let mut grid: Vec<Vec<String>> = Vec::new();
    grid.push(header.iter().map(|s| s.to_string()).collect());
    for r in rows {
        let mut line = vec![r.label.clone()];
        line.extend(r.cells.iter().cloned());
        grid.push(line);
    }
    for line in &grid {
        for (i, c) in line.iter().enumerate() {
            width[i] = width[i].max(c.chars().count());
        }
    }
    let mut out = String::new();
    for (k, line) in grid.iter().enumerate() {
        let cells: Vec<String> = (0..ncol)
            .map(|i| {
                let c = line.get(i).map(String::as_str).unwrap_or("");
                if i == 0 {
                    format!("{c:<w$}", w = width[i])
                } else {
                    format!("{c:>w$}", w = width[i])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if k == 0 {
            let total = width.iter().sum::<usize>() + 2 * (ncol - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}
