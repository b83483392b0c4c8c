//! Minimal YUV4MPEG2 reader and writer (8-bit 4:2:0 and 4:4:4), with
//! full-range BT.601 colour conversion.

use std::io::{BufRead, Write};

use pyrstyle::{Error, Image, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Chroma {
    C420,
    C444,
}

impl Chroma {
    fn plane_dims(self, width: usize, height: usize) -> (usize, usize) {
        match self {
            Chroma::C420 => (width.div_ceil(2), height.div_ceil(2)),
            Chroma::C444 => (width, height),
        }
    }
}

/// Stream header. Parameters other than size and colourspace are kept
/// verbatim so the output reproduces frame rate, aspect and interlacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub width: usize,
    pub height: usize,
    pub chroma: Chroma,
    params: Vec<String>,
}

impl Header {
    pub fn new(width: usize, height: usize, chroma: Chroma, params: Vec<String>) -> Self {
        Header {
            width,
            height,
            chroma,
            params,
        }
    }

    fn parse(line: &str) -> Result<Self> {
        let bad = |m: String| Error::Data(format!("y4m header: {}", m));
        let mut tokens = line.split_ascii_whitespace();
        if tokens.next() != Some("YUV4MPEG2") {
            return Err(bad("missing YUV4MPEG2 signature".into()));
        }
        let (mut w, mut h, mut chroma) = (None, None, Chroma::C420);
        let mut params = Vec::new();
        for t in tokens {
            let (tag, val) = t.split_at(1);
            match tag {
                "W" => w = val.parse::<usize>().ok(),
                "H" => h = val.parse::<usize>().ok(),
                "C" => {
                    chroma = match val {
                        "420" | "420jpeg" | "420paldv" | "420mpeg2" => Chroma::C420,
                        "444" => Chroma::C444,
                        other => return Err(bad(format!("unsupported colourspace C{}", other))),
                    };
                    params.push(t.to_string());
                }
                _ => params.push(t.to_string()),
            }
        }
        match (w, h) {
            (Some(w), Some(h)) if w > 0 && h > 0 => Ok(Header::new(w, h, chroma, params)),
            _ => Err(bad("missing or invalid W/H".into())),
        }
    }

    fn line(&self) -> String {
        let mut s = format!("YUV4MPEG2 W{} H{}", self.width, self.height);
        for p in &self.params {
            s.push(' ');
            s.push_str(p);
        }
        if self.chroma == Chroma::C444 && !self.params.iter().any(|p| p.starts_with('C')) {
            s.push_str(" C444");
        }
        s
    }

    fn frame_bytes(&self) -> usize {
        let (cw, ch) = self.chroma.plane_dims(self.width, self.height);
        self.width * self.height + 2 * cw * ch
    }
}

pub struct Reader<R> {
    inner: R,
    header: Header,
    index: usize,
}

impl<R: BufRead> Reader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut line = String::new();
        inner
            .read_line(&mut line)
            .map_err(|e| Error::Data(format!("y4m header: {}", e)))?;
        let header = Header::parse(line.trim_end())?;
        Ok(Reader {
            inner,
            header,
            index: 0,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    /// Next frame as RGB, `None` at a clean end of stream. Errors name the
    /// zero-based frame index.
    pub fn next_frame(&mut self) -> Result<Option<Image>> {
        let idx = self.index;
        let bad = |m: String| Error::Data(format!("frame {}: {}", idx, m));
        let mut tag = Vec::new();
        let n = self.inner.read_until(b'\n', &mut tag).map_err(|e| bad(e.to_string()))?;
        if n == 0 {
            return Ok(None);
        }
        if !tag.starts_with(b"FRAME") || tag.last() != Some(&b'\n') {
            return Err(bad("missing FRAME marker".into()));
        }
        let mut buf = vec![0u8; self.header.frame_bytes()];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| bad("truncated frame data".into()))?;
        self.index += 1;
        Ok(Some(yuv_to_rgb(&self.header, &buf)))
    }
}

pub struct Writer<W> {
    inner: W,
    header: Header,
}

impl<W: Write> Writer<W> {
    pub fn new(mut inner: W, header: Header) -> Result<Self> {
        writeln!(inner, "{}", header.line()).map_err(|e| Error::Data(format!("y4m write: {}", e)))?;
        Ok(Writer { inner, header })
    }

    /// Quantises to 8-bit RGB first, exactly as PNG export does.
    pub fn write_frame(&mut self, img: &Image) -> Result<()> {
        if img.dims() != (self.header.height, self.header.width) {
            return Err(Error::Dimension(format!(
                "frame {:?} does not match stream {}x{}",
                img.dims(),
                self.header.width,
                self.header.height
            )));
        }
        let bytes = rgb8_to_yuv(&self.header, &img.to_rgb8());
        let io = |e: std::io::Error| Error::Data(format!("y4m write: {}", e));
        self.inner.write_all(b"FRAME\n").map_err(io)?;
        self.inner.write_all(&bytes).map_err(io)
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner
            .flush()
            .map_err(|e| Error::Data(format!("y4m write: {}", e)))?;
        Ok(self.inner)
    }
}

fn yuv_to_rgb(h: &Header, buf: &[u8]) -> Image {
    let (w, ht) = (h.width, h.height);
    let (cw, ch) = h.chroma.plane_dims(w, ht);
    let (y, rest) = buf.split_at(w * ht);
    let (u, v) = rest.split_at(cw * ch);
    let sub = matches!(h.chroma, Chroma::C420) as usize;
    let mut data = vec![0f32; 3 * w * ht];
    for r in 0..ht {
        for c in 0..w {
            let ci = (r >> sub) * cw + (c >> sub);
            let yy = y[r * w + c] as f32;
            let uu = u[ci] as f32 - 128.0;
            let vv = v[ci] as f32 - 128.0;
            let rgb = [yy + 1.402 * vv, yy - 0.344_136 * uu - 0.714_136 * vv, yy + 1.772 * uu];
            for (k, val) in rgb.into_iter().enumerate() {
                data[k * w * ht + r * w + c] = (val / 255.0).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(ht, w, data).expect("finite by construction")
}

fn rgb8_to_yuv(h: &Header, rgb: &image::RgbImage) -> Vec<u8> {
    let (w, ht) = (h.width, h.height);
    let (cw, ch) = h.chroma.plane_dims(w, ht);
    let q = |v: f32| v.round().clamp(0.0, 255.0) as u8;
    let mut y = vec![0u8; w * ht];
    let mut u_full = vec![0f32; w * ht];
    let mut v_full = vec![0f32; w * ht];
    for (x, yy, p) in rgb.enumerate_pixels() {
        let [r, g, b] = p.0.map(|c| c as f32);
        let i = yy as usize * w + x as usize;
        y[i] = q(0.299 * r + 0.587 * g + 0.114 * b);
        u_full[i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0;
        v_full[i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0;
    }
    let mut out = y;
    for plane in [&u_full, &v_full] {
        match h.chroma {
            Chroma::C444 => out.extend(plane.iter().map(|&v| q(v))),
            Chroma::C420 => {
                for cy in 0..ch {
                    for cx in 0..cw {
                        let (mut s, mut n) = (0.0, 0.0);
                        for yy in 2 * cy..(2 * cy + 2).min(ht) {
                            for xx in 2 * cx..(2 * cx + 2).min(w) {
                                s += plane[yy * w + xx];
                                n += 1.0;
                            }
                        }
                        out.push(q(s / n));
                    }
                }
            }
        }
    }
    out
}

/// Encodes an 8-bit RGB frame with the stream's layout; used to compare
/// video output against still-image output.
#[allow(dead_code)]
pub fn encode_rgb8(header: &Header, rgb: &image::RgbImage) -> Vec<u8> {
    rgb8_to_yuv(header, rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn frame(w: usize, h: usize, k: usize) -> Image {
        Image::from_fn(h, w, |c, y, x| ((x * 7 + y * 3 + c * 5 + k) % 16) as f32 / 15.0)
    }

    #[test]
    fn round_trip_444_is_close() {
        let hd = Header::new(6, 4, Chroma::C444, vec!["F25:1".into(), "C444".into()]);
        let mut w = Writer::new(Vec::new(), hd.clone()).unwrap();
        w.write_frame(&frame(6, 4, 0)).unwrap();
        w.write_frame(&frame(6, 4, 1)).unwrap();
        let bytes = w.finish().unwrap();
        assert!(bytes.starts_with(b"YUV4MPEG2 W6 H4 F25:1 C444\n"));
        let mut r = Reader::new(Cursor::new(bytes)).unwrap();
        assert_eq!(r.header(), &hd);
        for k in 0..2 {
            let got = r.next_frame().unwrap().unwrap();
            assert!(got.max_abs_diff(&frame(6, 4, k)) < 3.0 / 255.0);
        }
        assert!(r.next_frame().unwrap().is_none());
    }

    #[test]
    fn odd_420_and_truncation() {
        let hd = Header::new(5, 3, Chroma::C420, vec!["F30:1".into()]);
        assert_eq!(hd.frame_bytes(), 15 + 2 * 6);
        let mut w = Writer::new(Vec::new(), hd).unwrap();
        w.write_frame(&frame(5, 3, 0)).unwrap();
        w.write_frame(&frame(5, 3, 1)).unwrap();
        let mut bytes = w.finish().unwrap();
        bytes.truncate(bytes.len() - 4);
        let mut r = Reader::new(Cursor::new(bytes)).unwrap();
        assert!(r.next_frame().unwrap().is_some());
        let err = r.next_frame().unwrap_err().to_string();
        assert!(err.contains("frame 1"), "{}", err);
        assert!(Reader::new(Cursor::new(b"P6\n".to_vec())).is_err());
    }
}
