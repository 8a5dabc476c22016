//! VOC annotation XML.
//!
//! On disk, coordinates are 1-based inclusive integers; in memory they are
//! 0-based with exclusive max, so `x_min = xmin - 1` and `x_max = xmax`.

use std::fmt::Write as _;

use roxmltree::{Document, Node};

use super::{Annotation, BoundingBox, CategoryRegistry, VocError};

/// Parsed annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct VocAnnotation {
    pub filename: Option<String>,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<Annotation>,
}

fn xml_error(text: &str, pos: roxmltree::TextPos, message: String) -> VocError {
    let line = text
        .lines()
        .nth(pos.row.saturating_sub(1) as usize)
        .unwrap_or("")
        .trim_end();
    VocError::Xml {
        line: pos.row as usize,
        column: pos.col as usize,
        message,
        context: line.to_string(),
    }
}

fn child<'a, 'i>(node: Node<'a, 'i>, name: &str) -> Option<Node<'a, 'i>> {
    node.children().find(|c| c.is_element() && c.has_tag_name(name))
}

fn node_error(text: &str, doc: &Document<'_>, node: Node<'_, '_>, message: String) -> VocError {
    xml_error(text, doc.text_pos_at(node.range().start), message)
}

fn integer(text: &str, doc: &Document<'_>, parent: Node<'_, '_>, name: &str) -> Result<i64, VocError> {
    let node = child(parent, name).ok_or_else(|| node_error(text, doc, parent, format!("missing <{name}>")))?;
    let raw = node.text().unwrap_or("").trim();
    raw.parse::<i64>()
        .map_err(|_| node_error(text, doc, node, format!("<{name}> is not an integer: `{raw}`")))
}

/// Parses one annotation file, resolving object names against `registry`.
pub fn parse_voc_annotation(xml_text: &str, registry: &CategoryRegistry) -> Result<VocAnnotation, VocError> {
    let doc = Document::parse(xml_text).map_err(|e| xml_error(xml_text, e.pos(), e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(node_error(
            xml_text,
            &doc,
            root,
            format!("root element is <{}>, expected <annotation>", root.tag_name().name()),
        ));
    }
    let size = child(root, "size").ok_or_else(|| node_error(xml_text, &doc, root, "missing <size>".into()))?;
    let width = integer(xml_text, &doc, size, "width")?;
    let height = integer(xml_text, &doc, size, "height")?;
    if width <= 0 || height <= 0 {
        return Err(node_error(
            xml_text,
            &doc,
            size,
            format!("image size {width}x{height} is empty"),
        ));
    }
    let filename = child(root, "filename")
        .and_then(|n| n.text())
        .map(|s| s.trim().to_string());

    let mut annotations = Vec::new();
    for obj in root.children().filter(|c| c.is_element() && c.has_tag_name("object")) {
        let name = child(obj, "name")
            .and_then(|n| n.text())
            .map(str::trim)
            .ok_or_else(|| node_error(xml_text, &doc, obj, "object without <name>".into()))?;
        let category = registry.require(name)?;
        let difficult = match child(obj, "difficult") {
            Some(_) => integer(xml_text, &doc, obj, "difficult")? != 0,
            None => false,
        };
        let bnd =
            child(obj, "bndbox").ok_or_else(|| node_error(xml_text, &doc, obj, "object without <bndbox>".into()))?;
        let xmin = integer(xml_text, &doc, bnd, "xmin")?;
        let ymin = integer(xml_text, &doc, bnd, "ymin")?;
        let xmax = integer(xml_text, &doc, bnd, "xmax")?;
        let ymax = integer(xml_text, &doc, bnd, "ymax")?;
        if xmin >= xmax || ymin >= ymax {
            return Err(VocError::InvalidBox(format!(
                "object `{name}` has xmin={xmin} xmax={xmax} ymin={ymin} ymax={ymax}"
            )));
        }
        let raw = BoundingBox {
            x_min: (xmin - 1) as f64,
            y_min: (ymin - 1) as f64,
            x_max: xmax as f64,
            y_max: ymax as f64,
        };
        let bbox = raw
            .clamp_to(width as f64, height as f64)
            .ok_or_else(|| VocError::InvalidBox(format!("object `{name}` lies outside the {width}x{height} image")))?;
        annotations.push(Annotation {
            category,
            bbox,
            ignored: difficult,
        });
    }
    Ok(VocAnnotation {
        filename,
        width: width as usize,
        height: height as usize,
        annotations,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn to_voc_int(v: f64, what: &str) -> Result<i64, VocError> {
    let r = v.round();
    if (v - r).abs() > 1e-9 {
        return Err(VocError::InvalidBox(format!("{what} = {v} is not on the pixel grid")));
    }
    Ok(r as i64)
}

/// Serializes annotations; the output re-parses to the same annotations.
pub fn write_voc_annotation(
    filename: Option<&str>,
    image_size: (usize, usize),
    annotations: &[Annotation],
    registry: &CategoryRegistry,
) -> Result<String, VocError> {
    let (width, height) = image_size;
    let mut out = String::from("<annotation>\n");
    if let Some(f) = filename {
        let _ = writeln!(out, "\t<filename>{}</filename>", escape(f));
    }
    let _ = writeln!(
        out,
        "\t<size>\n\t\t<width>{width}</width>\n\t\t<height>{height}</height>\n\t\t<depth>3</depth>\n\t</size>"
    );
    for a in annotations {
        if !a.bbox.within(width as f64, height as f64) || a.bbox.x_min >= a.bbox.x_max || a.bbox.y_min >= a.bbox.y_max {
            return Err(VocError::InvalidBox(format!(
                "{:?} is outside the {width}x{height} image",
                a.bbox
            )));
        }
        if a.category.0 >= registry.len() {
            return Err(VocError::UnknownCategory(format!("id {}", a.category.0)));
        }
        let xmin = to_voc_int(a.bbox.x_min, "x_min")? + 1;
        let ymin = to_voc_int(a.bbox.y_min, "y_min")? + 1;
        let xmax = to_voc_int(a.bbox.x_max, "x_max")?;
        let ymax = to_voc_int(a.bbox.y_max, "y_max")?;
        let _ = write!(
            out,
            "\t<object>\n\t\t<name>{}</name>\n\t\t<difficult>{}</difficult>\n\t\t<bndbox>\n\
             \t\t\t<xmin>{xmin}</xmin>\n\t\t\t<ymin>{ymin}</ymin>\n\t\t\t<xmax>{xmax}</xmax>\n\t\t\t<ymax>{ymax}</ymax>\n\
             \t\t</bndbox>\n\t</object>\n",
            escape(registry.name(a.category)),
            u8::from(a.ignored),
        );
    }
    out.push_str("</annotation>\n");
    Ok(out)
}
