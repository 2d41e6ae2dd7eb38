//! Deterministic synthetic multi-modal tracking sequences.
//!
//! A single target follows a smooth random walk over a noisy background. In
//! a controllable fraction of frames the target's RGB appearance is blended
//! fully into the background while the auxiliary channel keeps contrast;
//! distractor blobs appear only in RGB. Complementarity between the two
//! modalities is therefore a dial, and everything is a pure function of the
//! scene seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{DatasetError, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    Disc,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AuxSignal {
    Clean,
    /// Additive Gaussian pixel noise with the given σ (in [0,1] units).
    Noisy(f64),
}

/// Generation recipe for one sequence.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub seed: u64,
    pub num_frames: usize,
    /// (height, width) in pixels.
    pub canvas: (usize, usize),
    pub target: TargetKind,
    /// Half-extent range of the target, pixels.
    pub size_range: (f64, f64),
    /// Fraction of frames where the target is camouflaged in RGB.
    pub rgb_corruption_rate: f64,
    pub aux_signal: AuxSignal,
    /// RGB-only confusing blobs.
    pub distractors: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            seed: 0,
            num_frames: 40,
            canvas: (96, 96),
            target: TargetKind::Disc,
            size_range: (6.0, 11.0),
            rgb_corruption_rate: 0.0,
            aux_signal: AuxSignal::Clean,
            distractors: 2,
        }
    }
}

/// Axis-aligned box in pixel coordinates, top-left origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl PixelBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

/// One frame: planar RGB bytes, single-channel auxiliary bytes, target box.
#[derive(Clone, Debug)]
pub struct Frame {
    /// `[3, H, W]` planar, 8-bit.
    pub rgb: Vec<u8>,
    /// `[H, W]`, 8-bit.
    pub aux: Vec<u8>,
    pub gt: PixelBox,
}

#[derive(Clone, Debug)]
pub struct SceneSequence {
    pub canvas: (usize, usize),
    pub frames: Vec<Frame>,
    /// Which frames were RGB-corrupted. Empty for sequences loaded from
    /// disk (the on-disk layout does not carry the flags).
    pub corrupted: Vec<bool>,
}

fn gauss(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Generate one sequence; identical specs yield identical pixel data.
pub fn gen_sequence(spec: &SceneSpec) -> Result<SceneSequence> {
    let (h, w) = spec.canvas;
    let max_half = spec.size_range.1;
    if 2.0 * max_half + 4.0 >= h.min(w) as f64 {
        return Err(Error::InvalidArgument(format!(
            "target (half-extent up to {max_half}) does not fit a {h}×{w} canvas"
        )));
    }
    if !(0.0..=1.0).contains(&spec.rgb_corruption_rate) {
        return Err(Error::InvalidArgument("corruption rate outside [0, 1]".into()));
    }
    let mut rng = crate::rng::stream(spec.seed, "scene");

    // Static per-sequence appearance.
    let bg_rgb: [u8; 3] = [rng.gen_range(60..180), rng.gen_range(60..180), rng.gen_range(60..180)];
    let bg_aux: u8 = rng.gen_range(40..70);
    let target_rgb: [u8; 3] = [rng.gen_range(160..=255), rng.gen_range(160..=255), rng.gen_range(160..=255)];
    let target_aux: u8 = 220;
    let half = rng.gen_range(spec.size_range.0..=spec.size_range.1);

    // Static background noise pattern, shared by all frames.
    let noise: Vec<i16> = (0..h * w).map(|_| rng.gen_range(-12..=12)).collect();

    // Exactly round(rate · n) corrupted frames, chosen by a seeded shuffle.
    let n_corrupt = (spec.rgb_corruption_rate * spec.num_frames as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.num_frames).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut corrupted = vec![false; spec.num_frames];
    for &f in order.iter().take(n_corrupt) {
        corrupted[f] = true;
    }

    // Smooth walks for the target and the distractors.
    let margin = half + 2.0;
    let mut walk_state: Vec<(f64, f64, f64, f64)> = (0..=spec.distractors)
        .map(|_| {
            (
                rng.gen_range(margin..w as f64 - margin),
                rng.gen_range(margin..h as f64 - margin),
                gauss(&mut rng),
                gauss(&mut rng),
            )
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.num_frames);
    for f in 0..spec.num_frames {
        // Advance every walk; reflect at the margins.
        for state in walk_state.iter_mut() {
            state.2 = 0.85 * state.2 + 0.8 * gauss(&mut rng);
            state.3 = 0.85 * state.3 + 0.8 * gauss(&mut rng);
            state.0 += state.2;
            state.1 += state.3;
            if state.0 < margin || state.0 > w as f64 - margin {
                state.2 = -state.2;
                state.0 = state.0.clamp(margin, w as f64 - margin);
            }
            if state.1 < margin || state.1 > h as f64 - margin {
                state.3 = -state.3;
                state.1 = state.1.clamp(margin, h as f64 - margin);
            }
        }

        let mut rgb = vec![0u8; 3 * h * w];
        let mut aux = vec![0u8; h * w];
        for p in 0..h * w {
            for c in 0..3 {
                rgb[c * h * w + p] = (bg_rgb[c] as i16 + noise[p]).clamp(0, 255) as u8;
            }
            aux[p] = (bg_aux as i16 + noise[p] / 2).clamp(0, 255) as u8;
        }

        // Distractors: RGB only, same color as the target.
        for state in walk_state.iter().skip(1) {
            draw_blob(&mut rgb, &mut aux, h, w, state.0, state.1, half, spec.target, Some(target_rgb), None);
        }
        // Target: aux always, RGB unless this frame is corrupted.
        let (cx, cy) = (walk_state[0].0, walk_state[0].1);
        let rgb_color = if corrupted[f] { None } else { Some(target_rgb) };
        draw_blob(&mut rgb, &mut aux, h, w, cx, cy, half, spec.target, rgb_color, Some(target_aux));

        if let AuxSignal::Noisy(sigma) = spec.aux_signal {
            for v in aux.iter_mut() {
                let n = gauss(&mut rng) * sigma * 255.0;
                *v = (*v as f64 + n).clamp(0.0, 255.0) as u8;
            }
        }

        frames.push(Frame {
            rgb,
            aux,
            gt: PixelBox {
                x: cx - half,
                y: cy - half,
                w: 2.0 * half,
                h: 2.0 * half,
            },
        });
    }
    Ok(SceneSequence {
        canvas: spec.canvas,
        frames,
        corrupted,
    })
}

#[allow(clippy::too_many_arguments)]
fn draw_blob(
    rgb: &mut [u8],
    aux: &mut [u8],
    h: usize,
    w: usize,
    cx: f64,
    cy: f64,
    half: f64,
    kind: TargetKind,
    rgb_color: Option<[u8; 3]>,
    aux_color: Option<u8>,
) {
    draw_shape(h, w, cx, cy, half, kind, |p| {
        if let Some(color) = rgb_color {
            for c in 0..3 {
                rgb[c * h * w + p] = color[c];
            }
        }
        if let Some(a) = aux_color {
            aux[p] = a;
        }
    });
}

fn draw_shape(
    h: usize,
    w: usize,
    cx: f64,
    cy: f64,
    half: f64,
    kind: TargetKind,
    mut paint: impl FnMut(usize),
) {
    let y0 = ((cy - half).floor().max(0.0)) as usize;
    let y1 = ((cy + half).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((cx - half).floor().max(0.0)) as usize;
    let x1 = ((cx + half).ceil().min(w as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let inside = match kind {
                TargetKind::Square => {
                    (y as f64 - cy).abs() <= half && (x as f64 - cx).abs() <= half
                }
                TargetKind::Disc => {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    dy * dy + dx * dx <= half * half
                }
            };
            if inside {
                paint(y * w + x);
            }
        }
    }
}

// ── sample pairs ────────────────────────────────────────────────────

/// Crop geometry for building training pairs.
#[derive(Clone, Copy, Debug)]
pub struct PairOptions {
    pub template_size: usize,
    pub search_size: usize,
    /// Max |jitter| of the search-crop center, pixels per axis.
    pub max_jitter: f64,
}

/// A pixel-aligned multi-modal training sample. Image tensors are
/// standardized to `(v/255 − 0.5)/0.5`; the auxiliary channel is replicated
/// to 3 channels.
#[derive(Clone, Debug)]
pub struct SamplePair {
    pub template_rgb: Tensor,
    pub template_aux: Tensor,
    pub search_rgb: Tensor,
    pub search_aux: Tensor,
    /// (cx, cy, w, h) normalized to the search crop.
    pub gt_box: [f64; 4],
    /// True when any crop escaped the canvas and was mean-padded.
    pub padded: bool,
}

/// Integer top-left corner of a `side`-sized crop centered at `c`.
fn crop_origin(c: f64, side: usize) -> i64 {
    (c - side as f64 / 2.0).round() as i64
}

/// Extract one modality crop; out-of-canvas pixels become exact mid-gray
/// (0.0 after standardization).
fn crop_channels(
    data: &[u8],
    channels: usize,
    h: usize,
    w: usize,
    oy: i64,
    ox: i64,
    side: usize,
    replicate: bool,
) -> (Tensor, bool) {
    let out_ch = 3;
    let mut out = vec![0.0f64; out_ch * side * side];
    let mut padded = false;
    for y in 0..side {
        for x in 0..side {
            let (sy, sx) = (oy + y as i64, ox + x as i64);
            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                padded = true;
                continue; // already 0.0 = mid-gray
            }
            let p = sy as usize * w + sx as usize;
            for c in 0..out_ch {
                let src_c = if replicate { 0 } else { c.min(channels - 1) };
                let v = data[src_c * h * w + p] as f64 / 255.0;
                out[c * side * side + y * side + x] = (v - 0.5) / 0.5;
            }
        }
    }
    (
        Tensor::new(vec![3, side, side], out).expect("crop shape"),
        padded,
    )
}

/// Standardized `[3, side, side]` crop of one modality centered at `center`
/// (x, y); single-channel data is replicated. Returns the tensor and
/// whether padding occurred. This is the tracking-time crop entry point.
pub fn crop_modality(
    data: &[u8],
    channels: usize,
    canvas: (usize, usize),
    center: (f64, f64),
    side: usize,
) -> (Tensor, bool) {
    let (h, w) = canvas;
    let oy = crop_origin(center.1, side);
    let ox = crop_origin(center.0, side);
    crop_channels(data, channels, h, w, oy, ox, side, channels == 1)
}

/// Top-left corner (x, y) of the crop window `crop_modality` uses.
pub fn crop_window(center: (f64, f64), side: usize) -> (i64, i64) {
    (crop_origin(center.0, side), crop_origin(center.1, side))
}

/// Build one template/search pair. The same crop windows are applied to
/// both modalities, so they stay pixel-aligned by construction.
pub fn make_pair(
    seq: &SceneSequence,
    template_idx: usize,
    search_idx: usize,
    opts: &PairOptions,
    jitter: (f64, f64),
) -> Result<SamplePair> {
    if template_idx >= seq.frames.len() || search_idx >= seq.frames.len() {
        return Err(Error::InvalidArgument(format!(
            "frame index out of range ({} frames)",
            seq.frames.len()
        )));
    }
    let (h, w) = seq.canvas;
    let t_frame = &seq.frames[template_idx];
    let s_frame = &seq.frames[search_idx];

    let (tcx, tcy) = t_frame.gt.center();
    let t_oy = crop_origin(tcy, opts.template_size);
    let t_ox = crop_origin(tcx, opts.template_size);
    let (template_rgb, p1) = crop_channels(&t_frame.rgb, 3, h, w, t_oy, t_ox, opts.template_size, false);
    let (template_aux, p2) = crop_channels(&t_frame.aux, 1, h, w, t_oy, t_ox, opts.template_size, true);

    let (scx, scy) = s_frame.gt.center();
    let s_oy = crop_origin(scy + jitter.1, opts.search_size);
    let s_ox = crop_origin(scx + jitter.0, opts.search_size);
    let (search_rgb, p3) = crop_channels(&s_frame.rgb, 3, h, w, s_oy, s_ox, opts.search_size, false);
    let (search_aux, p4) = crop_channels(&s_frame.aux, 1, h, w, s_oy, s_ox, opts.search_size, true);

    let side = opts.search_size as f64;
    let gt_box = [
        ((scx - s_ox as f64) / side).clamp(0.0, 1.0),
        ((scy - s_oy as f64) / side).clamp(0.0, 1.0),
        (s_frame.gt.w / side).clamp(0.0, 1.0),
        (s_frame.gt.h / side).clamp(0.0, 1.0),
    ];
    Ok(SamplePair {
        template_rgb,
        template_aux,
        search_rgb,
        search_aux,
        gt_box,
        padded: p1 || p2 || p3 || p4,
    })
}

/// One pair per frame: template from frame 0, search from frame t with a
/// seeded jitter.
pub fn pairs_from_sequence(
    seq: &SceneSequence,
    opts: &PairOptions,
    seed: u64,
) -> Result<Vec<SamplePair>> {
    (0..seq.frames.len())
        .map(|t| {
            let mut rng = crate::rng::indexed_stream(seed, "pair-jitter", t as u64);
            let jitter = (
                rng.gen_range(-opts.max_jitter..=opts.max_jitter),
                rng.gen_range(-opts.max_jitter..=opts.max_jitter),
            );
            make_pair(seq, 0, t, opts, jitter)
        })
        .collect()
}

// ── dataset I/O ─────────────────────────────────────────────────────

/// `<dir>/<seq>/rgb/%06d.ppm`, `<dir>/<seq>/aux/%06d.pgm`,
/// `<dir>/<seq>/groundtruth.txt` with one `x,y,w,h` line per frame.
pub fn write_dataset(seqs: &[SceneSequence], dir: &Path) -> Result<()> {
    for (i, seq) in seqs.iter().enumerate() {
        let seq_dir = dir.join(format!("{i:03}"));
        fs::create_dir_all(seq_dir.join("rgb"))?;
        fs::create_dir_all(seq_dir.join("aux"))?;
        let (h, w) = seq.canvas;
        let mut gt = String::new();
        for (f, frame) in seq.frames.iter().enumerate() {
            fs::write(
                seq_dir.join(format!("rgb/{f:06}.ppm")),
                encode_ppm(&frame.rgb, h, w),
            )?;
            fs::write(
                seq_dir.join(format!("aux/{f:06}.pgm")),
                encode_pgm(&frame.aux, h, w),
            )?;
            let b = frame.gt;
            gt.push_str(&format!("{},{},{},{}\n", b.x, b.y, b.w, b.h));
        }
        fs::write(seq_dir.join("groundtruth.txt"), gt)?;
    }
    Ok(())
}

/// Planar `[3, H, W]` to interleaved binary PPM.
pub fn encode_ppm(rgb: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for c in 0..3 {
            out.push(rgb[c * h * w + p]);
        }
    }
    out
}

pub fn encode_pgm(gray: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

fn parse_netpbm(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |reason: &str| -> Error {
        DatasetError::MalformedImage {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        }
        .into()
    };
    // Header: magic, width, height, maxval, single whitespace, raw payload.
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != magic {
        return Err(bad(&format!("expected {magic}, found {}", fields[0])));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if fields[3] != "255" {
        return Err(bad("maxval must be 255"));
    }
    let channels = if magic == "P6" { 3 } else { 1 };
    let need = h * w * channels;
    if bytes.len() < pos + need {
        return Err(bad("payload shorter than header promises"));
    }
    Ok((h, w, bytes[pos..pos + need].to_vec()))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|_| DatasetError::MissingFile(path.to_path_buf()))?;
    let (h, w, inter) = parse_netpbm(&bytes, "P6", path)?;
    // Interleaved to planar.
    let mut planar = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            planar[c * h * w + p] = inter[p * 3 + c];
        }
    }
    Ok((h, w, planar))
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|_| DatasetError::MissingFile(path.to_path_buf()))?;
    parse_netpbm(&bytes, "P5", path)
}

/// Load every sequence directory (sorted by name).
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSequence>> {
    let mut seq_dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|_| DatasetError::MissingFile(dir.to_path_buf()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    seq_dirs.sort();
    if seq_dirs.is_empty() {
        return Err(DatasetError::Empty(dir.to_path_buf()).into());
    }
    let mut seqs = Vec::new();
    for seq_dir in seq_dirs {
        let gt_path = seq_dir.join("groundtruth.txt");
        let gt_text = fs::read_to_string(&gt_path)
            .map_err(|_| DatasetError::MissingFile(gt_path.clone()))?;
        let boxes: Vec<PixelBox> = gt_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let parts: Vec<f64> = line
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| {
                        Error::from(DatasetError::MalformedImage {
                            path: gt_path.clone(),
                            reason: format!("bad box line `{line}`"),
                        })
                    })?;
                if parts.len() != 4 {
                    return Err(DatasetError::MalformedImage {
                        path: gt_path.clone(),
                        reason: format!("expected 4 fields, got {}", parts.len()),
                    }
                    .into());
                }
                Ok(PixelBox { x: parts[0], y: parts[1], w: parts[2], h: parts[3] })
            })
            .collect::<Result<_>>()?;

        let mut rgb_files: Vec<PathBuf> = fs::read_dir(seq_dir.join("rgb"))
            .map_err(|_| DatasetError::MissingFile(seq_dir.join("rgb")))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        rgb_files.sort();
        if rgb_files.len() != boxes.len() {
            return Err(DatasetError::BoxCountMismatch {
                frames: rgb_files.len(),
                boxes: boxes.len(),
            }
            .into());
        }
        let mut frames = Vec::with_capacity(rgb_files.len());
        let mut canvas = (0, 0);
        for (f, rgb_path) in rgb_files.iter().enumerate() {
            let (h, w, rgb) = read_ppm(rgb_path)?;
            let aux_path = seq_dir.join(format!("aux/{f:06}.pgm"));
            let (ah, aw, aux) = read_pgm(&aux_path)?;
            if (ah, aw) != (h, w) {
                return Err(DatasetError::MalformedImage {
                    path: aux_path,
                    reason: format!("aux {ah}×{aw} does not match rgb {h}×{w}"),
                }
                .into());
            }
            canvas = (h, w);
            frames.push(Frame { rgb, aux, gt: boxes[f] });
        }
        seqs.push(SceneSequence {
            canvas,
            frames,
            corrupted: Vec::new(),
        });
    }
    Ok(seqs)
}
