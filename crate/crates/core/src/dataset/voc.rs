//! Pascal VOC style directories: one XML file per image under
//! `Annotations/`, images under `JPEGImages/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{io_err, AnnotationRecord, DatasetError, DatasetManifest, ImageRecord, Result, MANIFEST_SCHEMA};
use crate::types::{BBox, LabelSpace};

pub const ANNOTATIONS_DIR: &str = "Annotations";
pub const IMAGES_DIR: &str = "JPEGImages";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq)]
pub struct VocOptions {
    pub labels: LabelSpace,
    /// Renames applied to XML class names before lookup in `labels`.
    pub class_map: BTreeMap<String, String>,
    pub annotations_dir: String,
    pub images_dir: String,
}

impl VocOptions {
    pub fn new(labels: LabelSpace) -> Self {
        Self {
            labels,
            class_map: BTreeMap::new(),
            annotations_dir: ANNOTATIONS_DIR.into(),
            images_dir: IMAGES_DIR.into(),
        }
    }
}

fn child<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<roxmltree::Node<'a, 'a>> {
    node.children().find(|c| c.has_tag_name(name))
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<&'a str> {
    child(node, name).and_then(|c| c.text()).map(str::trim)
}

struct ParsedXml {
    filename: Option<String>,
    size: Option<(u32, u32)>,
    objects: Vec<(String, bool, [f64; 4])>,
}

fn parse_xml(file: &Path, text: &str) -> Result<ParsedXml> {
    let xml_err = |message: String| DatasetError::Xml {
        file: file.to_path_buf(),
        message,
    };
    let doc = roxmltree::Document::parse(text).map_err(|e| xml_err(e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(xml_err(format!("root element is <{}>", root.tag_name().name())));
    }
    let size = child(root, "size").and_then(|s| {
        let w = child_text(s, "width")?.parse::<u32>().ok()?;
        let h = child_text(s, "height")?.parse::<u32>().ok()?;
        (w > 0 && h > 0).then_some((w, h))
    });
    let mut objects = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child_text(obj, "name")
            .ok_or_else(|| xml_err("object without <name>".into()))?
            .to_owned();
        let difficult = child_text(obj, "difficult").is_some_and(|d| d == "1");
        let bnd = child(obj, "bndbox").ok_or_else(|| xml_err(format!("{name}: missing <bndbox>")))?;
        let mut coords = [0.0; 4];
        for (slot, tag) in coords.iter_mut().zip(["xmin", "ymin", "xmax", "ymax"]) {
            let raw = child_text(bnd, tag).ok_or_else(|| xml_err(format!("{name}: missing <{tag}>")))?;
            *slot = raw
                .parse::<f64>()
                .map_err(|_| xml_err(format!("{name}: <{tag}> is not a number: {raw:?}")))?;
        }
        objects.push((name, difficult, coords));
    }
    Ok(ParsedXml {
        filename: child_text(root, "filename").map(str::to_owned),
        size,
        objects,
    })
}

/// Reads a VOC directory into a manifest. Image ids are XML file stems and
/// annotation ids are `{image_id}#{object index}`.
pub fn load_voc(root: &Path, options: &VocOptions) -> Result<DatasetManifest> {
    let ann_dir = root.join(&options.annotations_dir);
    let mut xml_files: Vec<PathBuf> = fs::read_dir(&ann_dir)
        .map_err(io_err(&ann_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")))
        .collect();
    xml_files.sort();

    let mut manifest = DatasetManifest::empty(root, options.labels.clone());
    for file in &xml_files {
        let text = fs::read_to_string(file).map_err(io_err(file))?;
        let parsed = parse_xml(file, &text)?;
        let id = file
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| DatasetError::Xml {
                file: file.clone(),
                message: "non-UTF-8 file name".into(),
            })?
            .to_owned();
        let filename = parsed.filename.unwrap_or_else(|| format!("{id}.jpg"));
        let rel = Path::new(&options.images_dir).join(&filename);
        let image_path = root.join(&rel);
        if !image_path.is_file() {
            return Err(DatasetError::MissingImage {
                file: file.clone(),
                image: image_path,
            });
        }
        let (width, height) = match parsed.size {
            Some(s) => s,
            None => image::image_dimensions(&image_path).map_err(|source| DatasetError::Image {
                path: image_path.clone(),
                source,
            })?,
        };
        for (idx, (name, difficult, c)) in parsed.objects.into_iter().enumerate() {
            let name = options.class_map.get(&name).cloned().unwrap_or(name);
            if options.labels.label(&name).is_none() {
                return Err(DatasetError::UnknownClass {
                    file: file.clone(),
                    name,
                });
            }
            let bbox = BBox::new(c[0], c[1], c[2], c[3]).map_err(|source| DatasetError::InvalidBox {
                file: file.clone(),
                source,
            })?;
            if !bbox.is_within(width, height) {
                return Err(DatasetError::BoxOutOfBounds {
                    file: file.clone(),
                    bbox,
                    width,
                    height,
                });
            }
            manifest.annotations.push(AnnotationRecord {
                id: format!("{id}#{idx}"),
                image_id: id.clone(),
                bbox,
                class: name,
                difficult,
            });
        }
        manifest.images.push(ImageRecord {
            id,
            file: rel,
            width,
            height,
        });
    }
    Ok(manifest)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Coordinates are written as integers, rounding any fractional edge.
pub fn annotation_xml(image: &ImageRecord, objects: &[&AnnotationRecord]) -> String {
    let filename = image
        .file
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut s = String::new();
    s.push_str("<annotation>\n");
    let _ = writeln!(s, "  <filename>{}</filename>", escape(&filename));
    let _ = writeln!(
        s,
        "  <size>\n    <width>{}</width>\n    <height>{}</height>\n    <depth>3</depth>\n  </size>",
        image.width, image.height
    );
    for a in objects {
        let [x0, y0, x1, y1] = a.bbox.coords().map(|v| v.round() as i64);
        let _ = writeln!(
            s,
            "  <object>\n    <name>{}</name>\n    <difficult>{}</difficult>\n    <bndbox>\n      <xmin>{x0}</xmin>\n      <ymin>{y0}</ymin>\n      <xmax>{x1}</xmax>\n      <ymax>{y1}</ymax>\n    </bndbox>\n  </object>",
            escape(&a.class),
            u8::from(a.difficult)
        );
    }
    s.push_str("</annotation>\n");
    s
}

/// Writes the manifest as a VOC directory at `dest`: images are copied to
/// `JPEGImages/{id}.{ext}`, one XML per image, plus `manifest.json`.
/// Returns the manifest re-rooted at `dest`.
pub fn save_voc(manifest: &DatasetManifest, dest: &Path) -> Result<DatasetManifest> {
    let ann_dir = dest.join(ANNOTATIONS_DIR);
    let img_dir = dest.join(IMAGES_DIR);
    fs::create_dir_all(&ann_dir).map_err(io_err(&ann_dir))?;
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;

    let mut by_image: BTreeMap<&str, Vec<&AnnotationRecord>> = BTreeMap::new();
    for a in &manifest.annotations {
        by_image.entry(a.image_id.as_str()).or_default().push(a);
    }
    let mut images = Vec::with_capacity(manifest.images.len());
    for rec in &manifest.images {
        let src = manifest.image_path(rec);
        let ext = src
            .extension()
            .map(|e| e.to_string_lossy().into_owned())
            .unwrap_or_else(|| "png".into());
        let rel = Path::new(IMAGES_DIR).join(format!("{}.{ext}", rec.id));
        let target = dest.join(&rel);
        let same = match (src.canonicalize(), target.canonicalize()) {
            (Ok(a), Ok(b)) => a == b,
            _ => false,
        };
        if !same {
            fs::copy(&src, &target).map_err(io_err(&src))?;
        }
        let out = ImageRecord {
            file: rel,
            ..rec.clone()
        };
        let objects = by_image.get(rec.id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let xml_path = ann_dir.join(format!("{}.xml", rec.id));
        fs::write(&xml_path, annotation_xml(&out, objects)).map_err(io_err(&xml_path))?;
        images.push(out);
    }
    let saved = DatasetManifest {
        schema: MANIFEST_SCHEMA.into(),
        root: dest.to_path_buf(),
        images,
        ..manifest.clone()
    };
    saved.save_json(&dest.join(MANIFEST_FILE))?;
    Ok(saved)
}
