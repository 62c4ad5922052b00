//! Line-oriented box files: `image_id class_id x1 y1 x2 y2 [confidence]`, pixels.
//! Blank lines and `#` comments are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::boxes::{DetectionBox, GroundTruthBox, Rect};
use crate::error::{Error, Result};

fn parse_line(
    line: &str,
    lineno: usize,
    with_conf: bool,
) -> Result<Option<(String, usize, Rect, Option<f32>)>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return Ok(None);
    }
    let fields: Vec<&str> = line.split_whitespace().collect();
    let want = if with_conf { 7 } else { 6 };
    if fields.len() != want {
        return Err(Error::Format(format!(
            "line {lineno}: expected {want} fields, found {}",
            fields.len()
        )));
    }
    let class = fields[1]
        .parse::<usize>()
        .map_err(|_| Error::Format(format!("line {lineno}: bad class id {:?}", fields[1])))?;
    let num = |i: usize| -> Result<f32> {
        fields[i]
            .parse::<f32>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Format(format!("line {lineno}: bad number {:?}", fields[i])))
    };
    let rect = Rect::new(num(2)?, num(3)?, num(4)?, num(5)?);
    if !rect.is_valid() {
        return Err(Error::InvalidBox(format!(
            "line {lineno}: box {rect} has no area"
        )));
    }
    let conf = if with_conf {
        let c = num(6)?;
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Format(format!(
                "line {lineno}: confidence {c} outside [0,1]"
            )));
        }
        Some(c)
    } else {
        None
    };
    Ok(Some((fields[0].to_string(), class, rect, conf)))
}

pub fn parse_annotations(text: &str) -> Result<BTreeMap<String, Vec<GroundTruthBox>>> {
    let mut out: BTreeMap<String, Vec<GroundTruthBox>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if let Some((id, class, rect, _)) = parse_line(line, i + 1, false)? {
            out.entry(id)
                .or_default()
                .push(GroundTruthBox { rect, class });
        }
    }
    Ok(out)
}

pub fn parse_predictions(text: &str) -> Result<BTreeMap<String, Vec<DetectionBox>>> {
    let mut out: BTreeMap<String, Vec<DetectionBox>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if let Some((id, class, rect, conf)) = parse_line(line, i + 1, true)? {
            out.entry(id).or_default().push(DetectionBox {
                rect,
                class,
                confidence: conf.expect("confidence parsed"),
            });
        }
    }
    Ok(out)
}

pub fn format_annotations<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a [GroundTruthBox])>,
) -> String {
    let mut s = String::new();
    for (id, boxes) in items {
        for b in boxes {
            let _ = writeln!(s, "{id} {} {}", b.class, b.rect);
        }
    }
    s
}

pub fn format_predictions<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a [DetectionBox])>,
) -> String {
    let mut s = String::new();
    for (id, dets) in items {
        for d in dets {
            let _ = writeln!(s, "{id} {} {} {}", d.class, d.rect, d.confidence);
        }
    }
    s
}
