//! Binary netpbm codecs and the resize/normalize pipeline that turns raw
//! images into network input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a binary (P6) PPM with 8-bit samples into a `[1, 3, h, w]`
/// tensor of raw intensities in `[0, 255]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut cursor = HeaderCursor::new(bytes);
    cursor.expect_magic(b"P6")?;
    let w = cursor.read_number("width")?;
    let h = cursor.read_number("height")?;
    let maxval = cursor.read_number("maxval")?;
    if maxval != 255 {
        return Err(Error::image(format!(
            "unsupported maxval {maxval}, expected 255"
        )));
    }
    cursor.expect_single_whitespace()?;
    let payload = cursor.rest();
    let need = w * h * 3;
    if payload.len() < need {
        return Err(Error::image(format!(
            "truncated pixel data: expected {need} bytes, found {}",
            payload.len()
        )));
    }
    // Interleaved RGB rows -> planar channels.
    let mut data = vec![0.0f32; need];
    for (i, px) in payload[..need].chunks_exact(3).enumerate() {
        data[i] = px[0] as f32;
        data[w * h + i] = px[1] as f32;
        data[2 * w * h + i] = px[2] as f32;
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// Encodes a `[1, 3, h, w]` tensor to a binary PPM; values are clamped to
/// `[0, 255]` and rounded. Decoding an encoded tensor of integral values in
/// range reproduces it exactly.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::image(format!(
            "expected a single RGB image, got shape {:?}",
            image.shape()
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let area = h * w;
    for i in 0..area {
        for ch in 0..3 {
            out.push(quantize(image.data()[ch * area + i]));
        }
    }
    Ok(out)
}

/// Encodes an 8-bit grayscale raster as binary (P5) PGM.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::image(format!(
            "{} pixels for a {width}x{height} raster",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Decodes a binary (P5) PGM into `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut cursor = HeaderCursor::new(bytes);
    cursor.expect_magic(b"P5")?;
    let w = cursor.read_number("width")?;
    let h = cursor.read_number("height")?;
    let maxval = cursor.read_number("maxval")?;
    if maxval != 255 {
        return Err(Error::image(format!(
            "unsupported maxval {maxval}, expected 255"
        )));
    }
    cursor.expect_single_whitespace()?;
    let payload = cursor.rest();
    if payload.len() < w * h {
        return Err(Error::image(format!(
            "truncated pixel data: expected {} bytes, found {}",
            w * h,
            payload.len()
        )));
    }
    Ok((w, h, payload[..w * h].to_vec()))
}

fn quantize(v: f32) -> u8 {
    v.clamp(0.0, 255.0).round() as u8
}

/// Incremental reader for the whitespace/comment grammar of netpbm headers.
struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderCursor { bytes, pos: 0 }
    }

    fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.bytes.len() < magic.len() || &self.bytes[..magic.len()] != magic {
            return Err(Error::image(format!(
                "bad magic number, expected {}",
                String::from_utf8_lossy(magic)
            )));
        }
        self.pos = magic.len();
        Ok(())
    }

    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else {
                break;
            }
        }
    }

    fn read_number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::image(format!("missing {what} in header")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits are utf-8");
        let value: usize = text
            .parse()
            .map_err(|_| Error::image(format!("{what} {text:?} out of range")))?;
        if value == 0 {
            return Err(Error::image(format!("{what} must be positive")));
        }
        Ok(value)
    }

    /// Exactly one whitespace byte separates the header from the raster.
    fn expect_single_whitespace(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(Error::image(
                "missing whitespace before pixel data".to_string(),
            )),
        }
    }

    fn rest(&self) -> &'a [u8] {
        &self.bytes[self.pos.min(self.bytes.len())..]
    }
}

/// Bilinear resize of a `[1, c, h, w]` tensor with edge-clamped,
/// center-aligned sampling: destination pixel centers map to
/// `(d + 0.5) * in/out - 0.5` in source coordinates.
pub fn resize_bilinear(image: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let (n, c, h, w) = image.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid_arg(
            "resize target must be positive".to_string(),
        ));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let map_axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|d| {
                let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = map_axis(out_h, h);
    let xs = map_axis(out_w, w);

    let mut out = Tensor::zeros(vec![n, c, out_h, out_w]);
    for plane in 0..n * c {
        let src = &image.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out.data_mut()[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let row0 = &src[y0 * w..(y0 + 1) * w];
            let row1 = &src[y1 * w..(y1 + 1) * w];
            let out_row = &mut dst[oy * out_w..(oy + 1) * out_w];
            for (slot, &(x0, x1, fx)) in out_row.iter_mut().zip(&xs) {
                let top = row0[x0] * (1.0 - fx) + row0[x1] * fx;
                let bottom = row1[x0] * (1.0 - fx) + row1[x1] * fx;
                *slot = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Resizes a raw-intensity image to the network's square input extent and
/// centers each channel by the dataset mean.
pub fn preprocess(
    image: &Tensor<f32>,
    side: usize,
    channel_means: [f32; 3],
) -> Result<Tensor<f32>> {
    let (_, c, _, _) = image.dims4()?;
    if c != 3 {
        return Err(Error::image(format!("expected 3 channels, got {c}")));
    }
    let mut resized = resize_bilinear(image, side, side)?;
    let area = side * side;
    for (ch, &mean) in channel_means.iter().enumerate() {
        for v in &mut resized.data_mut()[ch * area..(ch + 1) * area] {
            *v -= mean;
        }
    }
    Ok(resized)
}

/// Streaming per-channel mean over any number of images (resized or not;
/// images may differ in extent).
#[derive(Debug, Default, Clone)]
pub struct ChannelMeanAccumulator {
    sums: [f64; 3],
    count: u64,
}

impl ChannelMeanAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, image: &Tensor<f32>) -> Result<()> {
        let (n, c, h, w) = image.dims4()?;
        if n != 1 || c != 3 {
            return Err(Error::image(format!(
                "expected a single RGB image, got shape {:?}",
                image.shape()
            )));
        }
        let area = h * w;
        for ch in 0..3 {
            self.sums[ch] += image.data()[ch * area..(ch + 1) * area]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        self.count += area as u64;
        Ok(())
    }

    pub fn finish(&self) -> Result<[f32; 3]> {
        if self.count == 0 {
            return Err(Error::empty("channel means over zero pixels".to_string()));
        }
        Ok([
            (self.sums[0] / self.count as f64) as f32,
            (self.sums[1] / self.count as f64) as f32,
            (self.sums[2] / self.count as f64) as f32,
        ])
    }
}

/// Per-channel means over a set of images in one call.
pub fn compute_channel_means<'a>(
    images: impl IntoIterator<Item = &'a Tensor<f32>>,
) -> Result<[f32; 3]> {
    let mut acc = ChannelMeanAccumulator::new();
    for image in images {
        acc.add(image)?;
    }
    acc.finish()
}

/// Renders an activation tensor as an 8-bit grayscale raster, returning
/// `(width, height, pixels)` ready for [`encode_pgm`].
///
/// A `[1, c, h, w]` map becomes a grid of channel tiles, `ceil(sqrt(c))`
/// columns wide; unused grid cells stay black. A `[1, d]` vector becomes a
/// one-pixel-tall strip. Every channel is min-max normalized to `0..=255`
/// independently; a constant channel renders as mid-gray 128.
pub fn render_activations(activations: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    match activations.shape() {
        &[1, d] => {
            let mut pixels = vec![0u8; d];
            normalize_into(activations.data(), &mut pixels, d, 1, d);
            Ok((d, 1, pixels))
        }
        &[1, c, h, w] => {
            let cols = (c as f64).sqrt().ceil() as usize;
            let rows = c.div_ceil(cols);
            let (out_w, out_h) = (cols * w, rows * h);
            let mut pixels = vec![0u8; out_w * out_h];
            for ch in 0..c {
                let channel = &activations.data()[ch * h * w..(ch + 1) * h * w];
                let origin = (ch / cols) * h * out_w + (ch % cols) * w;
                normalize_into(channel, &mut pixels[origin..], w, h, out_w);
            }
            Ok((out_w, out_h, pixels))
        }
        other => Err(Error::image(format!(
            "cannot render shape {other:?}; expected [1, d] or [1, c, h, w]"
        ))),
    }
}

/// Min-max normalizes one `w x h` channel into a raster of row stride
/// `stride`, starting at the slice origin.
fn normalize_into(channel: &[f32], out: &mut [u8], w: usize, h: usize, stride: usize) {
    let lo = channel.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = channel.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for row in 0..h {
        for col in 0..w {
            let v = channel[row * w + col];
            out[row * stride + col] = if lo == hi {
                128
            } else {
                ((v - lo) / (hi - lo) * 255.0).round() as u8
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_a_red_pixel() {
        let bytes = b"P6\n1 1\n255\n\xff\x00\x00";
        let t = decode_ppm(bytes).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 1]);
        assert_eq!(t.data(), &[255.0, 0.0, 0.0]);
    }

    #[test]
    fn header_comments_and_extra_whitespace_are_fine() {
        let bytes = b"P6\n# shot on a potato\n 2\t1 # trailing\n255\n\x01\x02\x03\x04\x05\x06";
        let t = decode_ppm(bytes).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn rejects_bad_magic() {
        assert!(matches!(
            decode_ppm(b"P3\n1 1\n255\n..."),
            Err(Error::Image(_))
        ));
    }

    #[test]
    fn rejects_truncated_payload() {
        let err = decode_ppm(b"P6\n2 2\n255\n\x00\x00\x00").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated"), "{msg}");
    }

    #[test]
    fn rejects_wrong_maxval() {
        assert!(decode_ppm(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn ppm_round_trips_through_codec() {
        let t = Tensor::new(
            vec![1, 3, 2, 2],
            vec![
                0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 255.0, 128.0,
            ],
        )
        .unwrap();
        let bytes = encode_ppm(&t).unwrap();
        let back = decode_ppm(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_ppm(&back).unwrap(), bytes);
    }

    #[test]
    fn pgm_round_trips() {
        let pixels: Vec<u8> = (0..12).collect();
        let bytes = encode_pgm(4, 3, &pixels).unwrap();
        let (w, h, back) = decode_pgm(&bytes).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, pixels);
    }

    #[test]
    fn resize_to_same_extent_is_identity() {
        let t = Tensor::new(vec![1, 3, 2, 3], (0..18).map(|v| v as f32).collect()).unwrap();
        let r = resize_bilinear(&t, 2, 3).unwrap();
        assert_eq!(r, t);
    }

    #[test]
    fn resize_preserves_constant_images() {
        let t = Tensor::full(vec![1, 3, 5, 7], 42.0f32);
        let r = resize_bilinear(&t, 11, 3).unwrap();
        assert!(r.data().iter().all(|&v| (v - 42.0).abs() < 1e-5));
    }

    #[test]
    fn upscaling_a_step_interpolates_the_known_ramp() {
        // One row [0, 1] doubled to width 4: centers map to
        // src = (d + 0.5)/2 - 0.5 = -0.25, 0.25, 0.75, 1.25 (clamped).
        let t = Tensor::new(vec![1, 1, 1, 2], vec![0.0f32, 1.0]).unwrap();
        let mut rgb_data = t.data().to_vec();
        rgb_data.extend_from_slice(t.data());
        rgb_data.extend_from_slice(t.data());
        let rgb = Tensor::new(vec![1, 3, 1, 2], rgb_data).unwrap();
        let r = resize_bilinear(&rgb, 1, 4).unwrap();
        let want = [0.0, 0.25, 0.75, 1.0];
        for (got, want) in r.data()[..4].iter().zip(want) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn downscale_by_two_averages_quads() {
        // 2x2 -> 1x1: the single center lands exactly between all four.
        let t = Tensor::new(
            vec![1, 3, 2, 2],
            vec![
                0.0f32, 2.0, 4.0, 6.0, 1.0, 1.0, 1.0, 1.0, 8.0, 8.0, 0.0, 0.0,
            ],
        )
        .unwrap();
        let r = resize_bilinear(&t, 1, 1).unwrap();
        assert_eq!(r.data(), &[3.0, 1.0, 4.0]);
    }

    #[test]
    fn preprocess_centers_channels() {
        let t = Tensor::full(vec![1, 3, 4, 4], 100.0f32);
        let p = preprocess(&t, 8, [100.0, 100.0, 100.0]).unwrap();
        assert_eq!(p.shape(), &[1, 3, 8, 8]);
        assert!(p.data().iter().all(|&v| v.abs() < 1e-5));
    }

    #[test]
    fn channel_means_agree_with_direct_sums() {
        let a = Tensor::full(vec![1, 3, 2, 2], 10.0f32);
        let mut b_data = vec![20.0f32; 4];
        b_data.extend(vec![40.0f32; 4]);
        b_data.extend(vec![60.0f32; 4]);
        let b = Tensor::new(vec![1, 3, 2, 2], b_data).unwrap();
        let means = compute_channel_means([&a, &b]).unwrap();
        assert_eq!(means, [15.0, 25.0, 35.0]);
    }

    #[test]
    fn channel_means_of_nothing_error() {
        assert!(compute_channel_means([]).is_err());
    }

    #[test]
    fn vector_renders_as_a_strip() {
        let t = Tensor::new(vec![1, 4], vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        let (w, h, pixels) = render_activations(&t).unwrap();
        assert_eq!((w, h), (4, 1));
        assert_eq!(pixels, vec![0, 64, 128, 255]);
    }

    #[test]
    fn channels_normalize_independently_and_tile_by_rows() {
        // 3 channels of 2x2 -> 2-column grid, bottom-right cell unused.
        let mut data = vec![0.0, 1.0, 2.0, 3.0]; // ch0: full ramp
        data.extend([5.0, 5.0, 5.0, 5.0]); // ch1: constant -> 128
        data.extend([0.0, 0.0, 0.0, 10.0]); // ch2: one hot
        let t = Tensor::new(vec![1, 3, 2, 2], data).unwrap();
        let (w, h, pixels) = render_activations(&t).unwrap();
        assert_eq!((w, h), (4, 4));
        #[rustfmt::skip]
        let want = vec![
            0,   85,  128, 128,
            170, 255, 128, 128,
            0,   0,   0,   0,
            0,   255, 0,   0,
        ];
        assert_eq!(pixels, want);
    }

    #[test]
    fn constant_map_renders_mid_gray() {
        let t = Tensor::full(vec![1, 1, 3, 3], 7.5f32);
        let (w, h, pixels) = render_activations(&t).unwrap();
        assert_eq!((w, h), (3, 3));
        assert!(pixels.iter().all(|&p| p == 128));
    }

    #[test]
    fn unrenderable_shapes_error() {
        assert!(render_activations(&Tensor::full(vec![2, 3], 0.0f32)).is_err());
        assert!(render_activations(&Tensor::full(vec![5], 0.0f32)).is_err());
    }
}
