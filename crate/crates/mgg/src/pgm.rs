//! Binary greyscale PGM (`P5`, maxval 255).

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

pub fn encode(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Maps `[0, 1]` values linearly onto `0..=255`.
pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Image {
    Image { width, height, pixels: values.iter().map(|&v| mgg_core::synth::quantize(v)).collect() }
}

pub fn decode(bytes: &[u8]) -> Result<Image, String> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "header is not ASCII")?.to_string());
    }
    if fields[0] != "P5" {
        return Err(format!("expected P5, found `{}`", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header number `{s}`"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (need 255)"));
    }
    let pixels = bytes.get(pos + 1..).unwrap_or(&[]);
    if pixels.len() != width * height {
        return Err(format!("{} pixel bytes for a {width}x{height} image", pixels.len()));
    }
    Ok(Image { width, height, pixels: pixels.to_vec() })
}
