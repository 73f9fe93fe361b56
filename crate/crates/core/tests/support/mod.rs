//! Shared fixtures: a synthetic VOC tree and an in-process integration
//! service speaking the JSON wire protocol over plain TCP.
#![allow(dead_code)]

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use ctxforge::compositing::diffusion::{
    decode_png, encode_png, mock_integrate, IntegrateRequest, TransportError, FEATURE_COLS,
    FEATURE_ROWS,
};
use image::{DynamicImage, Rgb, RgbImage};

pub const CLASSES: [&str; 4] = ["ship", "storagetank", "airplane", "windmill"];
pub const NOVEL: [&str; 2] = ["airplane", "windmill"];

pub fn labels() -> ctxforge::LabelSpace {
    ctxforge::LabelSpace::from_all(&CLASSES, &NOVEL)
}

fn write_image(root: &Path, id: &str, w: u32, h: u32, tint: u8, objects: &[(&str, [u32; 4], bool)]) {
    let img = RgbImage::from_fn(w, h, |x, y| {
        if objects.iter().any(|(_, b, _)| x >= b[0] && x < b[2] && y >= b[1] && y < b[3]) {
            Rgb([230, (x * 7 % 255) as u8, (y * 5 % 255) as u8])
        } else {
            Rgb([tint, 90 + (x % 23) as u8, 50 + (y % 31) as u8])
        }
    });
    img.save(root.join("JPEGImages").join(format!("{id}.png"))).unwrap();
    let mut xml = format!(
        "<annotation>\n  <filename>{id}.png</filename>\n  <size><width>{w}</width><height>{h}</height><depth>3</depth></size>\n"
    );
    for (name, b, difficult) in objects {
        xml += &format!(
            "  <object><name>{name}</name><difficult>{}</difficult><bndbox><xmin>{}</xmin><ymin>{}</ymin><xmax>{}</xmax><ymax>{}</ymax></bndbox></object>\n",
            u8::from(*difficult),
            b[0],
            b[1],
            b[2],
            b[3]
        );
    }
    xml += "</annotation>\n";
    fs::write(root.join("Annotations").join(format!("{id}.xml")), xml).unwrap();
}

/// `novel_images` images per novel class (one object each, every fifth one
/// also carrying a difficult duplicate) and `contexts` novel-free images.
pub fn voc_fixture(root: &Path, novel_images: u32, contexts: u32) {
    fs::create_dir_all(root.join("Annotations")).unwrap();
    fs::create_dir_all(root.join("JPEGImages")).unwrap();
    for i in 0..novel_images {
        let j = i % 7;
        write_image(
            root,
            &format!("plane{i:03}"),
            80,
            64,
            40,
            &[
                ("airplane", [8 + j, 10, 34 + j, 24], false),
                ("ship", [50, 40, 70, 58], false),
                ("airplane", [40, 4, 60, 14], i % 5 == 0),
            ],
        );
        write_image(
            root,
            &format!("mill{i:03}"),
            64,
            80,
            70,
            &[("windmill", [20, 8 + j, 32, 36 + j], false)],
        );
    }
    for i in 0..contexts {
        let objects: &[(&str, [u32; 4], bool)] = if i % 3 == 0 {
            &[("storagetank", [6, 6, 26, 26], false)]
        } else {
            &[]
        };
        write_image(root, &format!("ctx{i:03}"), 128, 112, (i * 13 % 200) as u8, objects);
    }
}

#[derive(Debug, Clone, Copy)]
pub enum StubMode {
    /// Feathered paste, like the service's mock mode.
    Mock,
    /// Never answers within any reasonable client timeout.
    Stall,
    /// Stalls on the first `n` requests, then behaves like `Mock`.
    StallFirst(usize),
    /// Answers with an image of the wrong size.
    WrongSize,
}

pub struct StubServer {
    pub url: String,
    hits: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    addr: std::net::SocketAddr,
}

impl StubServer {
    pub fn start(mode: StubMode) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let (h, s) = (hits.clone(), stop.clone());
        thread::spawn(move || {
            for conn in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let h = h.clone();
                thread::spawn(move || handle(conn, mode, &h));
            }
        });
        Self {
            url: format!("http://{addr}"),
            hits,
            stop,
            addr,
        }
    }

    /// Integrate requests received so far.
    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
    }
}

fn respond(mut conn: TcpStream, code: u16, body: &str) {
    let reason = match code {
        200 => "OK",
        400 => "Bad Request",
        404 => "Not Found",
        _ => "Error",
    };
    let _ = write!(
        conn,
        "HTTP/1.1 {code} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = conn.flush();
}

fn handle(conn: TcpStream, mode: StubMode, hits: &AtomicUsize) {
    let mut reader = BufReader::new(conn.try_clone().unwrap());
    let mut request_line = String::new();
    if reader.read_line(&mut request_line).is_err() || request_line.is_empty() {
        return;
    }
    let mut length = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                length = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; length];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let mut parts = request_line.split_whitespace();
    match (parts.next(), parts.next()) {
        (Some("GET"), Some("/v1/health")) => {
            respond(conn, 200, r#"{"status":"ok","mode":"mock","model_loaded":false}"#)
        }
        (Some("POST"), Some("/v1/integrate")) => {
            let n = hits.fetch_add(1, Ordering::SeqCst);
            let stall = match mode {
                StubMode::Stall => true,
                StubMode::StallFirst(k) => n < k,
                _ => false,
            };
            if stall {
                thread::sleep(Duration::from_secs(3));
                return;
            }
            let req: IntegrateRequest = match serde_json::from_slice(&body) {
                Ok(r) => r,
                Err(e) => return respond(conn, 422, &format!("{{\"error\":{:?}}}", e.to_string())),
            };
            if let Some(f) = &req.coarse_feature {
                let cols = f.first().map_or(0, Vec::len);
                if f.len() != FEATURE_ROWS || f.iter().any(|r| r.len() != FEATURE_COLS) {
                    let msg = format!("coarse_feature: expected 257x1536, got {}x{cols}", f.len());
                    return respond(conn, 400, &format!("{{\"error\":{msg:?}}}"));
                }
            }
            match mock_integrate(&req) {
                Ok(mut resp) => {
                    if let StubMode::WrongSize = mode {
                        let img = decode_png(&resp.image).unwrap().to_rgb8();
                        let small = image::imageops::crop_imm(&img, 0, 0, img.width() - 1, img.height()).to_image();
                        resp.image = encode_png(&DynamicImage::ImageRgb8(small));
                    }
                    respond(conn, 200, &serde_json::to_string(&resp).unwrap())
                }
                Err(TransportError::Status { code, body }) => respond(conn, code, &format!("{{\"error\":{body:?}}}")),
                Err(e) => respond(conn, 422, &format!("{{\"error\":{:?}}}", e.to_string())),
            }
        }
        _ => respond(conn, 404, "{}"),
    }
}
