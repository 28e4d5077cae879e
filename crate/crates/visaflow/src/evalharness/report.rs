//! Metrics files and comparison plots. Everything here is byte-stable given
//! identical inputs: fixed float formatting, sorted rows, and a hand-drawn
//! bar chart with an embedded bitmap font.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::error::Result;

use super::{EvalReport, CHAIN_LEN};

/// Write the metrics table, per-sequence records, and the bar plot. Rows are
/// sorted by variant name. Returns (csv, jsonl, png) paths.
pub fn report(rows: &BTreeMap<String, EvalReport>, out_dir: &Path) -> Result<(PathBuf, PathBuf, PathBuf)> {
    if rows.is_empty() {
        return Err(crate::error::Error::Validation("report needs at least one eval report".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let csv_path = out_dir.join("metrics.csv");
    let mut csv = String::from("variant,sr1,sr2,sr3,sr4,sr5,avg_len,n_sequences,eval_seed\n");
    for (name, r) in rows {
        csv.push_str(&format!(
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            r.sr[0], r.sr[1], r.sr[2], r.sr[3], r.sr[4], r.avg_len, r.n_sequences, r.eval_seed
        ));
    }
    std::fs::write(&csv_path, csv)?;

    #[derive(Serialize)]
    struct RecordLine<'a> {
        variant: &'a str,
        seed: u64,
        completed: usize,
        chain: Vec<String>,
    }
    let jsonl_path = out_dir.join("records.jsonl");
    let mut jsonl = std::fs::File::create(&jsonl_path)?;
    for (name, r) in rows {
        for rec in &r.per_sequence_records {
            let line = RecordLine {
                variant: name,
                seed: rec.seed,
                completed: rec.completed,
                chain: rec.chain.iter().map(|(k, c)| format!("{}:{}", k.as_str(), c.word())).collect(),
            };
            writeln!(jsonl, "{}", serde_json::to_string(&line)?)?;
        }
    }

    let png_path = out_dir.join("plot.png");
    plot_reports(rows, &png_path)?;
    Ok((csv_path, jsonl_path, png_path))
}

// 5x7 bitmap font rows (bit 4 = leftmost pixel).
fn glyph(c: char) -> [u8; 7] {
    match c {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        _ => [0x00; 7],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let g = glyph(c.to_ascii_uppercase());
        for (ri, row) in g.iter().enumerate() {
            for bit in 0..5 {
                if row & (0x10 >> bit) != 0 {
                    let (px, py) = (cx + bit as i64, y + ri as i64);
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
        cx += 6;
    }
}

fn fill_rect(img: &mut RgbImage, x0: i64, y0: i64, w: i64, h: i64, color: Rgb<u8>) {
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
                img.put_pixel(x as u32, y as u32, color);
            }
        }
    }
}

const SR_COLORS: [Rgb<u8>; CHAIN_LEN] = [
    Rgb([66, 100, 210]),
    Rgb([84, 118, 218]),
    Rgb([102, 136, 226]),
    Rgb([120, 154, 234]),
    Rgb([138, 172, 242]),
];
const AVG_COLOR: Rgb<u8> = Rgb([232, 150, 52]);

/// Grouped bars per variant: SR1..SR5 plus Avg. Len. / 5, on a [0, 1] axis.
pub fn plot_reports(rows: &BTreeMap<String, EvalReport>, path: &Path) -> Result<()> {
    let bar_w: i64 = 7;
    let bar_gap: i64 = 2;
    let bars_w = 6 * bar_w + 5 * bar_gap;
    let group_gap: i64 = 14;
    let group_w = |name: &str| -> i64 { bars_w.max(6 * name.len() as i64 + 2) };

    let (left, right, top, bottom) = (26i64, 8i64, 10i64, 22i64);
    let plot_h: i64 = 150;
    let total_groups: i64 = rows.keys().map(|n| group_w(n) + group_gap).sum::<i64>() - group_gap;
    let width = (left + total_groups + right) as u32;
    let height = (top + plot_h + bottom) as u32;

    let mut img = RgbImage::from_pixel(width, height, Rgb([24, 24, 28]));

    // Gridlines and y labels at 0, .25, .5, .75, 1.
    for k in 0..=4 {
        let frac = k as f64 / 4.0;
        let y = top + plot_h - (frac * plot_h as f64).round() as i64;
        fill_rect(&mut img, left, y, total_groups, 1, Rgb([64, 64, 70]));
        draw_text(&mut img, 2, y - 3, &format!("{frac:.2}"), Rgb([150, 150, 156]));
    }

    let mut x = left;
    for (name, r) in rows {
        let gw = group_w(name);
        let bars_x = x + (gw - bars_w) / 2;
        for (i, &sr) in r.sr.iter().enumerate() {
            let h = (sr.clamp(0.0, 1.0) * plot_h as f64).round() as i64;
            fill_rect(
                &mut img,
                bars_x + i as i64 * (bar_w + bar_gap),
                top + plot_h - h,
                bar_w,
                h,
                SR_COLORS[i],
            );
        }
        let avg_frac = (r.avg_len / CHAIN_LEN as f64).clamp(0.0, 1.0);
        let h = (avg_frac * plot_h as f64).round() as i64;
        fill_rect(
            &mut img,
            bars_x + 5 * (bar_w + bar_gap),
            top + plot_h - h,
            bar_w,
            h,
            AVG_COLOR,
        );
        let label_x = x + (gw - 6 * name.len() as i64) / 2;
        draw_text(&mut img, label_x, top + plot_h + 4, name, Rgb([200, 200, 206]));
        // Avg. Len. value above the group.
        let v = format!("{:.2}", r.avg_len);
        draw_text(&mut img, bars_x + bars_w - 6 * v.len() as i64, top - 9, &v, AVG_COLOR);
        x += gw + group_gap;
    }
    fill_rect(&mut img, left, top + plot_h, total_groups, 1, Rgb([180, 180, 186]));

    img.save(path).map_err(|e| crate::error::Error::Validation(format!("plot encode failed: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{ObjColor, SubtaskKind};
    use crate::evalharness::SequenceRecord;

    fn demo_report(counts: &[usize]) -> EvalReport {
        EvalReport::from_records(
            counts
                .iter()
                .map(|&c| SequenceRecord {
                    chain: vec![(SubtaskKind::Reach, ObjColor::Red); CHAIN_LEN],
                    completed: c,
                    seed: 7,
                })
                .collect(),
            42,
        )
    }

    #[test]
    fn single_report_row_and_identity() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = BTreeMap::new();
        rows.insert("full".to_string(), demo_report(&[5, 4, 3, 0]));
        let (csv, _, _) = report(&rows, dir.path()).unwrap();
        let text = std::fs::read_to_string(csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let fields: Vec<&str> = lines[1].split(',').collect();
        let sr_sum: f64 = fields[1..6].iter().map(|s| s.parse::<f64>().unwrap()).sum();
        let avg: f64 = fields[6].parse().unwrap();
        assert!((sr_sum - avg).abs() < 1e-9);
    }

    #[test]
    fn rows_sorted_and_regeneration_is_byte_identical() {
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let mut rows = BTreeMap::new();
        rows.insert("no_pretrain".to_string(), demo_report(&[0, 1]));
        rows.insert("full".to_string(), demo_report(&[5, 2]));
        let (c1, j1, p1) = report(&rows, dir1.path()).unwrap();
        let (c2, j2, p2) = report(&rows, dir2.path()).unwrap();
        let csv = std::fs::read_to_string(&c1).unwrap();
        assert!(csv.lines().nth(1).unwrap().starts_with("full,"));
        assert!(csv.lines().nth(2).unwrap().starts_with("no_pretrain,"));
        assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
        assert_eq!(std::fs::read(&j1).unwrap(), std::fs::read(&j2).unwrap());
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
