//! Synthetic training data: a CPU rasterizer for checker-bordered square
//! gates under a pinhole camera, randomized smooth camera trajectories, a
//! frame-to-event converter (per-pixel log-intensity threshold crossings),
//! segmentation-based box annotation, and whole-dataset generation.
//!
//! Everything here is a pure function of (configuration, seed): the same
//! inputs produce byte-identical datasets, regardless of thread count.
//! Generation runs in `f64` so dataset bytes never depend on the precision
//! the network side happens to use.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    sequence_event_name, sequence_labels_name, write_labels, write_manifest, DatasetManifest,
    LabelBox, SequenceEntry, WindowLabels, DATASET_FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::event::{write_event_file, Event, EventStream, SensorGeometry};

// ---------------------------------------------------------------------------
// Camera
// ---------------------------------------------------------------------------

/// Pinhole camera: resolution, field of view, and pose (world position plus
/// yaw/pitch, zero roll). World frame: x forward, y left, z up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub width: u16,
    pub height: u16,
    /// Horizontal field of view in radians, in (0, π).
    pub hfov_rad: f64,
    /// Vertical field of view in radians, in (0, π).
    pub vfov_rad: f64,
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
}

/// Camera pose along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CamPose {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
}

impl CameraModel {
    /// The event sensor modeled throughout: 240×180 with a 60°×50° field of
    /// view, at the world origin looking down +x.
    pub fn davis240() -> Self {
        CameraModel {
            width: 240,
            height: 180,
            hfov_rad: 60f64.to_radians(),
            vfov_rad: 50f64.to_radians(),
            position: [0.0, 0.0, 0.0],
            yaw: 0.0,
            pitch: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f > 0.0 && f < std::f64::consts::PI;
        if !ok(self.hfov_rad) || !ok(self.vfov_rad) {
            return Err(Error::Config(format!(
                "field of view ({:.3}, {:.3}) rad outside (0, pi)",
                self.hfov_rad, self.vfov_rad
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("zero camera resolution".into()));
        }
        Ok(())
    }

    /// Horizontal focal length in pixels: (W/2) / tan(hfov/2).
    pub fn fx(&self) -> f64 {
        self.width as f64 / 2.0 / (self.hfov_rad / 2.0).tan()
    }

    /// Vertical focal length in pixels: (H/2) / tan(vfov/2).
    pub fn fy(&self) -> f64 {
        self.height as f64 / 2.0 / (self.vfov_rad / 2.0).tan()
    }

    pub fn at(&self, pose: &CamPose) -> CameraModel {
        CameraModel {
            position: pose.position,
            yaw: pose.yaw,
            pitch: pose.pitch,
            ..*self
        }
    }

    pub fn pose(&self) -> CamPose {
        CamPose {
            position: self.position,
            yaw: self.yaw,
            pitch: self.pitch,
        }
    }

    /// Orthonormal camera basis in world coordinates: (right, up, forward).
    pub fn basis(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let (sy, cy) = self.yaw.sin_cos();
        let (sp, cp) = self.pitch.sin_cos();
        let forward = [cp * cy, cp * sy, sp];
        // Right is horizontal (zero roll): forward × world-up, normalized.
        let right = [sy, -cy, 0.0];
        let up = cross(right, forward);
        (right, up, forward)
    }

    /// Projects a world point to pixel coordinates; `None` behind the camera.
    /// Returns (u, v, depth) with u along columns, v along rows (downward),
    /// and depth along the optical axis in meters.
    pub fn project(&self, p: [f64; 3]) -> Option<(f64, f64, f64)> {
        let (right, up, forward) = self.basis();
        let d = sub(p, self.position);
        let depth = dot(d, forward);
        if depth <= 1e-9 {
            return None;
        }
        let u = self.width as f64 / 2.0 + self.fx() * dot(d, right) / depth;
        let v = self.height as f64 / 2.0 - self.fy() * dot(d, up) / depth;
        Some((u, v, depth))
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

// ---------------------------------------------------------------------------
// Scene
// ---------------------------------------------------------------------------

/// A square racing gate: a vertical planar ring with a checkered border.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    /// Center of the opening, meters, world frame.
    pub center: [f64; 3],
    /// Rotation of the gate plane about the vertical axis, radians. At yaw 0
    /// the plane normal points along +x.
    pub yaw: f64,
    /// Side length of the square opening, meters.
    pub inner_size: f64,
    /// Width of the checkered border strip, meters.
    pub border_width: f64,
    /// Side length of one checker square, meters.
    pub checker_period: f64,
}

impl Default for GateSpec {
    fn default() -> Self {
        GateSpec {
            center: [3.0, 0.0, 1.5],
            yaw: 0.0,
            inner_size: 1.5,
            border_width: 0.25,
            checker_period: 0.25,
        }
    }
}

impl GateSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_size > 0.0) || !(self.border_width > 0.0) || !(self.checker_period > 0.0) {
            return Err(Error::Config(format!(
                "gate sizes must be positive: inner {}, border {}, checker {}",
                self.inner_size, self.border_width, self.checker_period
            )));
        }
        Ok(())
    }

    pub fn half_inner(&self) -> f64 {
        self.inner_size / 2.0
    }

    pub fn half_outer(&self) -> f64 {
        self.inner_size / 2.0 + self.border_width
    }

    /// Unit normal of the gate plane.
    pub fn normal(&self) -> [f64; 3] {
        [self.yaw.cos(), self.yaw.sin(), 0.0]
    }

    /// In-plane horizontal axis (the vertical axis is world z).
    pub fn lateral(&self) -> [f64; 3] {
        [-self.yaw.sin(), self.yaw.cos(), 0.0]
    }
}

/// What a ray that misses every gate sees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Background {
    /// A constant intensity everywhere.
    Uniform { intensity: f64 },
    /// A smooth angular pattern fixed to the world (camera rotation sweeps
    /// it across the sensor, producing background clutter events).
    DirectionalStripes {
        base: f64,
        amplitude: f64,
        azimuth_freq: f64,
        elevation_freq: f64,
    },
}

impl Background {
    fn sample(&self, dir: [f64; 3]) -> f64 {
        match *self {
            Background::Uniform { intensity } => intensity,
            Background::DirectionalStripes {
                base,
                amplitude,
                azimuth_freq,
                elevation_freq,
            } => {
                let az = dir[1].atan2(dir[0]);
                let el = dir[2].atan2((dir[0] * dir[0] + dir[1] * dir[1]).sqrt());
                (base + amplitude * (azimuth_freq * az).sin() * (elevation_freq * el).cos())
                    .clamp(0.0, 1.0)
            }
        }
    }
}

/// A renderable scene: gates plus surface appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub gates: Vec<GateSpec>,
    pub background: Background,
    /// Intensity of the dark checker squares.
    pub checker_dark: f64,
    /// Intensity of the light checker squares.
    pub checker_light: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        for g in &self.gates {
            g.validate()?;
        }
        Ok(())
    }

    /// Mean gate center; the world origin when there are no gates.
    pub fn centroid(&self) -> [f64; 3] {
        if self.gates.is_empty() {
            return [0.0, 0.0, 0.0];
        }
        let mut c = [0.0; 3];
        for g in &self.gates {
            c = add(c, g.center);
        }
        scale(c, 1.0 / self.gates.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Row-major grayscale image with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: u16,
    pub height: u16,
    pub pixels: Vec<f64>,
}

impl Frame {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width as usize + col]
    }
}

/// Row-major segmentation mask: 0 is background, gate k renders as id k+1.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    pub width: u16,
    pub height: u16,
    pub ids: Vec<u32>,
}

impl SegMask {
    pub fn at(&self, row: usize, col: usize) -> u32 {
        self.ids[row * self.width as usize + col]
    }
}

/// Renders the scene through the camera: a grayscale intensity image plus a
/// per-pixel gate-id mask. Each pixel casts a ray through its center; the
/// nearest gate-border hit wins (painter's depth order), rays that miss every
/// border see the background. Gates behind the camera are culled by the
/// positive-depth test.
pub fn render_frame(scene: &Scene, cam: &CameraModel) -> (Frame, SegMask) {
    let w = cam.width as usize;
    let h = cam.height as usize;
    let (right, up, forward) = cam.basis();
    let fx = cam.fx();
    let fy = cam.fy();
    let cx = cam.width as f64 / 2.0;
    let cy = cam.height as f64 / 2.0;

    // Per-gate values that do not depend on the pixel.
    struct GatePre {
        normal: [f64; 3],
        lateral: [f64; 3],
        center: [f64; 3],
        n_dot_to_center: f64,
        half_inner: f64,
        half_outer: f64,
        period: f64,
    }
    let pre: Vec<GatePre> = scene
        .gates
        .iter()
        .map(|g| GatePre {
            normal: g.normal(),
            lateral: g.lateral(),
            center: g.center,
            n_dot_to_center: dot(g.normal(), sub(g.center, cam.position)),
            half_inner: g.half_inner(),
            half_outer: g.half_outer(),
            period: g.checker_period,
        })
        .collect();

    let mut pixels = vec![0.0f64; w * h];
    let mut ids = vec![0u32; w * h];
    for row in 0..h {
        let yn = (row as f64 + 0.5 - cy) / fy;
        for col in 0..w {
            let xn = (col as f64 + 0.5 - cx) / fx;
            // dir·forward = 1, so the plane parameter t is depth in meters.
            let dir = [
                forward[0] + xn * right[0] - yn * up[0],
                forward[1] + xn * right[1] - yn * up[1],
                forward[2] + xn * right[2] - yn * up[2],
            ];
            let mut best_t = f64::INFINITY;
            let mut best_id = 0u32;
            let mut best_intensity = 0.0;
            for (gi, g) in pre.iter().enumerate() {
                let denom = dot(g.normal, dir);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let t = g.n_dot_to_center / denom;
                if t <= 1e-3 || t >= best_t {
                    continue;
                }
                let q = add(cam.position, scale(dir, t));
                let rel = sub(q, g.center);
                let a = dot(rel, g.lateral);
                let b = rel[2];
                let m = a.abs().max(b.abs());
                if m > g.half_outer || m < g.half_inner {
                    continue;
                }
                let ca = (a / g.period).floor() as i64;
                let cb = (b / g.period).floor() as i64;
                best_t = t;
                best_id = gi as u32 + 1;
                best_intensity = if (ca + cb).rem_euclid(2) == 0 {
                    scene.checker_dark
                } else {
                    scene.checker_light
                };
            }
            let lin = row * w + col;
            if best_id != 0 {
                pixels[lin] = best_intensity;
                ids[lin] = best_id;
            } else {
                pixels[lin] = scene.background.sample(dir);
            }
        }
    }
    (
        Frame {
            width: cam.width,
            height: cam.height,
            pixels,
        },
        SegMask {
            width: cam.width,
            height: cam.height,
            ids,
        },
    )
}

// ---------------------------------------------------------------------------
// Annotation
// ---------------------------------------------------------------------------

/// Gates occupying fewer visible pixels than this are not annotated.
pub const MIN_ANNOTATION_PIXELS: usize = 20;

/// Tight axis-aligned boxes over each gate id present in the mask, in sensor
/// pixel coordinates with inclusive corners; gates with fewer than
/// [`MIN_ANNOTATION_PIXELS`] visible pixels are omitted. Boxes come out
/// sorted by gate id.
pub fn annotate_from_segmentation(mask: &SegMask) -> Vec<LabelBox> {
    use std::collections::BTreeMap;
    struct Acc {
        min_r: usize,
        max_r: usize,
        min_c: usize,
        max_c: usize,
        count: usize,
    }
    let mut acc: BTreeMap<u32, Acc> = BTreeMap::new();
    let w = mask.width as usize;
    for (lin, &id) in mask.ids.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let (r, c) = (lin / w, lin % w);
        let e = acc.entry(id).or_insert(Acc {
            min_r: r,
            max_r: r,
            min_c: c,
            max_c: c,
            count: 0,
        });
        e.min_r = e.min_r.min(r);
        e.max_r = e.max_r.max(r);
        e.min_c = e.min_c.min(c);
        e.max_c = e.max_c.max(c);
        e.count += 1;
    }
    acc.into_iter()
        .filter(|(_, a)| a.count >= MIN_ANNOTATION_PIXELS)
        .map(|(id, a)| LabelBox {
            x_min: a.min_c as f64,
            y_min: a.min_r as f64,
            x_max: a.max_c as f64,
            y_max: a.max_r as f64,
            gate_id: id,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

/// Randomized-camera-motion parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub duration_s: f64,
    pub fps: f64,
    /// Linear speed drawn uniformly from this range, m/s.
    pub speed_range: (f64, f64),
    /// Yaw rate magnitude bound, rad/s (the camera steers toward the gates
    /// within this bound).
    pub max_yaw_rate: f64,
    /// Pitch rate magnitude bound, rad/s.
    pub max_pitch_rate: f64,
    /// Minimum fraction of frames with at least one gate center in view.
    pub min_visible_fraction: f64,
    /// Trajectory draws before giving up.
    pub max_retries: u32,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            duration_s: 10.0,
            fps: 120.0,
            speed_range: (0.15, 0.5),
            max_yaw_rate: 0.35,
            max_pitch_rate: 0.12,
            min_visible_fraction: 0.7,
            max_retries: 50,
        }
    }
}

/// A time-parameterized camera path sampled at a fixed frame rate: pose k is
/// taken at time k/fps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<CamPose>,
    pub fps: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Timestamp of frame k in microseconds.
    pub fn frame_time_us(&self, k: usize) -> i64 {
        (k as f64 * 1e6 / self.fps).round() as i64
    }

    /// Pose at an arbitrary time, linearly interpolated between neighboring
    /// frames and clamped to the path's ends.
    pub fn pose_at_us(&self, t_us: i64) -> CamPose {
        assert!(!self.poses.is_empty(), "empty trajectory");
        let ft = t_us as f64 * self.fps / 1e6;
        if ft <= 0.0 {
            return self.poses[0];
        }
        let last = self.poses.len() - 1;
        if ft >= last as f64 {
            return self.poses[last];
        }
        let k = ft.floor() as usize;
        let w = ft - k as f64;
        let (a, b) = (&self.poses[k], &self.poses[k + 1]);
        let lerp = |x: f64, y: f64| x + (y - x) * w;
        CamPose {
            position: [
                lerp(a.position[0], b.position[0]),
                lerp(a.position[1], b.position[1]),
                lerp(a.position[2], b.position[2]),
            ],
            yaw: lerp(a.yaw, b.yaw),
            pitch: lerp(a.pitch, b.pitch),
        }
    }
}

fn wrap_to_pi(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = a % two_pi;
    if r > std::f64::consts::PI {
        r -= two_pi;
    } else if r < -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Is any gate center inside the image with reasonable depth?
fn any_gate_visible(scene: &Scene, cam: &CameraModel) -> bool {
    scene.gates.iter().any(|g| match cam.project(g.center) {
        Some((u, v, depth)) => {
            depth > 0.3
                && depth < 25.0
                && u >= 0.0
                && u < cam.width as f64
                && v >= 0.0
                && v < cam.height as f64
        }
        None => false,
    })
}

/// Samples a smooth randomized camera path that keeps at least one gate in
/// view for the configured fraction of frames. Deterministic in the seed;
/// draws are retried up to `max_retries` times before a generation error.
pub fn sample_trajectory(
    cfg: &TrajectoryConfig,
    scene: &Scene,
    cam_template: &CameraModel,
    seed: u64,
) -> Result<Trajectory> {
    cam_template.validate()?;
    scene.validate()?;
    let n_frames = (cfg.duration_s * cfg.fps).round() as usize;
    if n_frames == 0 {
        return Err(Error::Config(format!(
            "trajectory of duration {} s at {} fps has no frames",
            cfg.duration_s, cfg.fps
        )));
    }
    let dt = 1.0 / cfg.fps;
    let centroid = scene.centroid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    for _ in 0..cfg.max_retries.max(1) {
        // Start on the side the average gate normal points away from, at a
        // few meters, looking roughly at the gates.
        let mut n_avg = [0.0; 3];
        for g in &scene.gates {
            n_avg = add(n_avg, g.normal());
        }
        let n_len = norm(n_avg);
        let facing = if n_len > 1e-9 {
            scale(n_avg, 1.0 / n_len)
        } else {
            [1.0, 0.0, 0.0]
        };
        let d0 = uniform(&mut rng, 2.6, 4.2);
        let side = [-facing[1], facing[0], 0.0];
        let lateral = uniform(&mut rng, -0.9, 0.9);
        let mut pos = add(
            add(centroid, scale(facing, -d0)),
            add(scale(side, lateral), [0.0, 0.0, uniform(&mut rng, -0.35, 0.35)]),
        );
        pos[2] = pos[2].max(0.5);
        let to_c = sub(centroid, pos);
        let mut yaw = to_c[1].atan2(to_c[0]) + uniform(&mut rng, -0.1, 0.1);
        let mut pitch =
            to_c[2].atan2((to_c[0] * to_c[0] + to_c[1] * to_c[1]).sqrt()) + uniform(&mut rng, -0.06, 0.06);

        let mut poses = Vec::with_capacity(n_frames);
        let mut vel = [0.0; 3];
        let mut frames_left = 0usize;
        let mut off_yaw = 0.0;
        let mut off_pitch = 0.0;
        for _ in 0..n_frames {
            if frames_left == 0 {
                frames_left = (uniform(&mut rng, 0.8, 1.6) * cfg.fps).round().max(1.0) as usize;
                let speed = uniform(&mut rng, cfg.speed_range.0, cfg.speed_range.1);
                let mut dir = [
                    uniform(&mut rng, -1.0, 1.0),
                    uniform(&mut rng, -1.0, 1.0),
                    uniform(&mut rng, -0.4, 0.4),
                ];
                let len = norm(dir);
                if len < 1e-6 {
                    dir = [1.0, 0.0, 0.0];
                } else {
                    dir = scale(dir, 1.0 / len);
                }
                // Keep the camera in a shell around the gates: if this
                // segment would drift out, steer the segment inward instead.
                let seg_end = add(pos, scale(dir, speed * frames_left as f64 * dt));
                let d_end = norm(sub(seg_end, centroid));
                let inward = {
                    let v = sub(centroid, pos);
                    let l = norm(v);
                    if l > 1e-9 {
                        scale(v, 1.0 / l)
                    } else {
                        [1.0, 0.0, 0.0]
                    }
                };
                if d_end > 5.5 {
                    dir = inward;
                } else if d_end < 2.0 {
                    dir = scale(inward, -1.0);
                }
                vel = scale(dir, speed);
                off_yaw = uniform(&mut rng, -0.12, 0.12);
                off_pitch = uniform(&mut rng, -0.08, 0.08);
            }
            frames_left -= 1;

            poses.push(CamPose {
                position: pos,
                yaw,
                pitch,
            });

            // Steer toward the gates (plus a per-segment offset) within the
            // configured angular rate bounds.
            let to_c = sub(centroid, pos);
            let target_yaw = to_c[1].atan2(to_c[0]) + off_yaw;
            let target_pitch =
                to_c[2].atan2((to_c[0] * to_c[0] + to_c[1] * to_c[1]).sqrt()) + off_pitch;
            let yaw_rate =
                (2.0 * wrap_to_pi(target_yaw - yaw)).clamp(-cfg.max_yaw_rate, cfg.max_yaw_rate);
            let pitch_rate =
                (2.0 * (target_pitch - pitch)).clamp(-cfg.max_pitch_rate, cfg.max_pitch_rate);

            pos = add(pos, scale(vel, dt));
            pos[2] = pos[2].clamp(0.4, 3.2);
            yaw += yaw_rate * dt;
            pitch = (pitch + pitch_rate * dt).clamp(-0.6, 0.6);
        }

        let visible = poses
            .iter()
            .filter(|p| any_gate_visible(scene, &cam_template.at(p)))
            .count();
        if scene.gates.is_empty() || visible as f64 >= cfg.min_visible_fraction * n_frames as f64 {
            return Ok(Trajectory {
                poses,
                fps: cfg.fps,
            });
        }
    }
    Err(Error::Generation(format!(
        "no trajectory with {:.0}% gate visibility found in {} draws",
        cfg.min_visible_fraction * 100.0,
        cfg.max_retries.max(1)
    )))
}

// ---------------------------------------------------------------------------
// Frame-to-event conversion
// ---------------------------------------------------------------------------

/// Event-generation model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsimConfig {
    /// Log-intensity change that triggers one event.
    pub contrast_threshold: f64,
    /// Floor added before the log: L = ln(I + eps_log).
    pub eps_log: f64,
    /// Optional per-pixel Gaussian jitter of the contrast threshold
    /// (standard deviation, log-intensity units); emulates sensor noise.
    pub threshold_jitter_std: Option<f64>,
}

impl Default for EsimConfig {
    fn default() -> Self {
        EsimConfig {
            contrast_threshold: 0.2,
            eps_log: 1e-3,
            threshold_jitter_std: None,
        }
    }
}

impl EsimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrast_threshold > 0.0) {
            return Err(Error::Config(format!(
                "contrast threshold {} must be positive",
                self.contrast_threshold
            )));
        }
        if !(self.eps_log > 0.0) {
            return Err(Error::Config(format!(
                "log-intensity floor {} must be positive",
                self.eps_log
            )));
        }
        Ok(())
    }
}

/// An intensity image with its capture time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedFrame {
    pub t_us: i64,
    pub frame: Frame,
}

/// Incremental frame-to-event converter. Feed frames in time order with
/// [`EventSynthesizer::push_frame`], then collect the stream with
/// [`EventSynthesizer::finish`]; memory stays at two frames regardless of
/// sequence length.
///
/// Per pixel it tracks L = ln(I + eps_log). Between consecutive frames L is
/// linearly interpolated, and one event is emitted each time it moves a full
/// contrast threshold away from the level of the pixel's previous event, at
/// the interpolated crossing time, with polarity 1 for rising and 0 for
/// falling intensity.
pub struct EventSynthesizer {
    geometry: SensorGeometry,
    eps_log: f64,
    thresholds: Vec<f64>,
    last_level: Vec<f64>,
    prev_log: Vec<f64>,
    prev_t: i64,
    frames_seen: usize,
    events: Vec<Event>,
}

impl EventSynthesizer {
    /// `jitter_seed` only matters when the config enables threshold jitter.
    pub fn new(geometry: SensorGeometry, cfg: &EsimConfig, jitter_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n = geometry.n_pixels();
        let c = cfg.contrast_threshold;
        let thresholds = match cfg.threshold_jitter_std {
            None => vec![c; n],
            Some(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
                (0..n)
                    .map(|_| {
                        // Box-Muller standard normal.
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen_range(0.0..1.0);
                        let z = (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos();
                        (c + std * z).max(0.05 * c)
                    })
                    .collect()
            }
        };
        Ok(EventSynthesizer {
            geometry,
            eps_log: cfg.eps_log,
            thresholds,
            last_level: vec![0.0; n],
            prev_log: vec![0.0; n],
            prev_t: i64::MIN,
            frames_seen: 0,
            events: Vec::new(),
        })
    }

    pub fn push_frame(&mut self, t_us: i64, frame: &Frame) -> Result<()> {
        if (frame.width, frame.height) != (self.geometry.width, self.geometry.height) {
            return Err(Error::Dimension(format!(
                "frame is {}x{}, synthesizer expects {}x{}",
                frame.width, frame.height, self.geometry.width, self.geometry.height
            )));
        }
        if self.frames_seen > 0 && t_us <= self.prev_t {
            return Err(Error::Generation(format!(
                "frame timestamps must strictly increase: {} after {}",
                t_us, self.prev_t
            )));
        }
        let w = self.geometry.width as usize;
        if self.frames_seen == 0 {
            for (p, &i) in frame.pixels.iter().enumerate() {
                let l = (i + self.eps_log).ln();
                self.prev_log[p] = l;
                self.last_level[p] = l;
            }
        } else {
            let t_a = self.prev_t;
            let dt = (t_us - t_a) as f64;
            for (p, &i) in frame.pixels.iter().enumerate() {
                let la = self.prev_log[p];
                let lb = (i + self.eps_log).ln();
                if lb != la {
                    let c = self.thresholds[p];
                    let (x, y) = ((p % w) as u16, (p / w) as u16);
                    let slope_inv = dt / (lb - la);
                    if lb > la {
                        while self.last_level[p] + c <= lb {
                            self.last_level[p] += c;
                            let t = t_a as f64 + (self.last_level[p] - la) * slope_inv;
                            self.events.push(Event {
                                t_us: t.round() as i64,
                                x,
                                y,
                                polarity: 1,
                            });
                        }
                    } else {
                        while self.last_level[p] - c >= lb {
                            self.last_level[p] -= c;
                            let t = t_a as f64 + (self.last_level[p] - la) * slope_inv;
                            self.events.push(Event {
                                t_us: t.round() as i64,
                                x,
                                y,
                                polarity: 0,
                            });
                        }
                    }
                }
                self.prev_log[p] = lb;
            }
        }
        self.prev_t = t_us;
        self.frames_seen += 1;
        Ok(())
    }

    /// Takes the events synthesized so far, sorted by time, leaving the
    /// synthesizer ready for more frames. Successive batches never go back
    /// in time, so concatenating them preserves temporal order.
    pub fn drain_events(&mut self) -> Vec<Event> {
        self.events.sort_by_key(|e| e.t_us);
        std::mem::take(&mut self.events)
    }

    pub fn finish(mut self) -> Result<EventStream> {
        if self.frames_seen < 2 {
            return Err(Error::Generation(format!(
                "event synthesis needs at least 2 frames, got {}",
                self.frames_seen
            )));
        }
        self.events.sort_by_key(|e| e.t_us);
        EventStream::new(self.geometry, self.events)
    }
}

/// One-shot frame-to-event conversion. Requires at least two frames with
/// strictly increasing timestamps and identical dimensions.
pub fn frames_to_events(frames: &[TimedFrame], cfg: &EsimConfig) -> Result<EventStream> {
    let first = frames.first().ok_or_else(|| {
        Error::Generation("event synthesis needs at least 2 frames, got 0".into())
    })?;
    let geometry = SensorGeometry::new(first.frame.width, first.frame.height);
    let mut synth = EventSynthesizer::new(geometry, cfg, 0)?;
    for f in frames {
        synth.push_frame(f.t_us, &f.frame)?;
    }
    synth.finish()
}

// ---------------------------------------------------------------------------
// Domains and dataset generation
// ---------------------------------------------------------------------------

/// The two synthetic domains. A is the plain source domain ("simulation");
/// B differs in contrast threshold, checker contrast, and a textured
/// background, standing in for the harder target domain ("real").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainId {
    A,
    B,
}

impl std::str::FromStr for DomainId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(DomainId::A),
            "B" | "b" => Ok(DomainId::B),
            other => Err(Error::Config(format!(
                "unknown domain {other:?}, expected A or B"
            ))),
        }
    }
}

impl std::fmt::Display for DomainId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DomainId::A => "A",
            DomainId::B => "B",
        })
    }
}

/// Scene appearance and sensor model of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    pub name: String,
    pub esim: EsimConfig,
    pub checker_dark: f64,
    pub checker_light: f64,
    pub background: Background,
    /// Gates per scene, drawn uniformly from this inclusive range.
    pub gate_count_range: (u32, u32),
}

impl DomainConfig {
    pub fn for_domain(id: DomainId) -> Self {
        match id {
            DomainId::A => DomainConfig {
                name: "A".into(),
                esim: EsimConfig::default(),
                checker_dark: 0.12,
                checker_light: 0.95,
                background: Background::Uniform { intensity: 0.55 },
                gate_count_range: (1, 2),
            },
            DomainId::B => DomainConfig {
                name: "B".into(),
                esim: EsimConfig {
                    contrast_threshold: 0.32,
                    eps_log: 1e-3,
                    threshold_jitter_std: None,
                },
                checker_dark: 0.3,
                checker_light: 0.78,
                background: Background::DirectionalStripes {
                    base: 0.5,
                    amplitude: 0.18,
                    azimuth_freq: 45.0,
                    elevation_freq: 20.0,
                },
                gate_count_range: (1, 2),
            },
        }
    }
}

/// Everything needed to regenerate a dataset, stored inside its manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub domain: DomainConfig,
    pub trajectory: TrajectoryConfig,
    pub window_events: usize,
}

impl GeneratorConfig {
    pub fn for_domain(id: DomainId) -> Self {
        GeneratorConfig {
            domain: DomainConfig::for_domain(id),
            trajectory: TrajectoryConfig::default(),
            window_events: crate::event::DEFAULT_WINDOW_EVENTS,
        }
    }
}

/// Derives the per-sequence seed from the master seed (splitmix64 over the
/// pair), so sequences are independent of each other and of thread schedule.
pub fn sequence_seed(master: u64, index: u32) -> u64 {
    let mut z = master
        .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Draws the gates of one scene.
fn sample_scene(domain: &DomainConfig, rng: &mut ChaCha8Rng) -> Scene {
    let (lo, hi) = domain.gate_count_range;
    let n = if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
    .max(1);
    let mut gates = Vec::with_capacity(n as usize);
    let first = GateSpec {
        center: [
            uniform(rng, -0.4, 0.4),
            uniform(rng, -0.4, 0.4),
            uniform(rng, 1.2, 1.9),
        ],
        yaw: uniform(rng, -0.35, 0.35),
        border_width: uniform(rng, 0.2, 0.3),
        ..GateSpec::default()
    };
    gates.push(first);
    for _ in 1..n {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = first.lateral();
        let offset = side * uniform(rng, 2.0, 2.9);
        gates.push(GateSpec {
            center: [
                first.center[0] + lateral[0] * offset + uniform(rng, -0.3, 0.3),
                first.center[1] + lateral[1] * offset + uniform(rng, -0.3, 0.3),
                uniform(rng, 1.2, 1.9),
            ],
            yaw: first.yaw + uniform(rng, -0.25, 0.25),
            border_width: uniform(rng, 0.2, 0.3),
            ..GateSpec::default()
        });
    }
    Scene {
        gates,
        background: domain.background,
        checker_dark: domain.checker_dark,
        checker_light: domain.checker_light,
    }
}

/// Renders one sequence and converts it to events plus window labels.
/// Returns the stream and the labels of every complete window.
pub fn synthesize_sequence(
    cfg: &GeneratorConfig,
    seq_seed: u64,
) -> Result<(EventStream, Vec<WindowLabels>)> {
    let cam = CameraModel::davis240();
    let mut rng = ChaCha8Rng::seed_from_u64(seq_seed);
    let scene = sample_scene(&cfg.domain, &mut rng);
    let traj_seed: u64 = rng.gen();
    let jitter_seed: u64 = rng.gen();
    let traj = sample_trajectory(&cfg.trajectory, &scene, &cam, traj_seed)?;

    let geometry = SensorGeometry::new(cam.width, cam.height);
    let mut synth = EventSynthesizer::new(geometry, &cfg.domain.esim, jitter_seed)?;
    for (k, pose) in traj.poses.iter().enumerate() {
        let (frame, _) = render_frame(&scene, &cam.at(pose));
        synth.push_frame(traj.frame_time_us(k), &frame)?;
    }
    let stream = synth.finish()?;

    // Label each complete window with boxes rendered at its end time.
    let mut labels = Vec::new();
    for (j, win) in stream.events().chunks_exact(cfg.window_events).enumerate() {
        let t_end_us = win.last().expect("chunks_exact yields full windows").t_us;
        let pose = traj.pose_at_us(t_end_us);
        let (_, mask) = render_frame(&scene, &cam.at(&pose));
        labels.push(WindowLabels {
            window_index: j as u32,
            t_end_us,
            boxes: annotate_from_segmentation(&mask),
        });
    }
    Ok((stream, labels))
}

/// Generates `n_sequences` event sequences with window labels under
/// `out_dir`, plus a manifest carrying the full generator configuration.
/// Identical (config, seed) produce byte-identical datasets; sequences may
/// be generated on up to `threads` worker threads without affecting output.
pub fn generate_dataset(
    out_dir: &Path,
    n_sequences: u32,
    cfg: &GeneratorConfig,
    seed: u64,
    threads: usize,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cam = CameraModel::davis240();

    let write_sequence = |index: u32| -> Result<SequenceEntry> {
        let (stream, labels) = synthesize_sequence(cfg, sequence_seed(seed, index))?;
        let events_name = sequence_event_name(index);
        let labels_name = sequence_labels_name(index);
        write_event_file(&stream, &out_dir.join(&events_name))?;
        write_labels(&out_dir.join(&labels_name), &labels)?;
        Ok(SequenceEntry {
            index,
            events: events_name,
            labels: labels_name,
            n_events: stream.len() as u64,
            n_windows: labels.len() as u32,
        })
    };

    let threads = threads.max(1).min(n_sequences.max(1) as usize);
    let mut entries: Vec<Option<SequenceEntry>> = vec![None; n_sequences as usize];
    if threads <= 1 {
        for (i, slot) in entries.iter_mut().enumerate() {
            *slot = Some(write_sequence(i as u32)?);
        }
    } else {
        let next = std::sync::atomic::AtomicU32::new(0);
        let results: Vec<std::sync::Mutex<Option<Result<SequenceEntry>>>> =
            (0..n_sequences).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= n_sequences {
                        break;
                    }
                    let r = write_sequence(i);
                    *results[i as usize].lock().expect("poisoned result slot") = Some(r);
                });
            }
        });
        for (i, slot) in results.into_iter().enumerate() {
            let r = slot
                .into_inner()
                .expect("poisoned result slot")
                .expect("worker covered every index");
            entries[i] = Some(r?);
        }
    }

    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        seed,
        domain: cfg.domain.name.clone(),
        window_events: cfg.window_events,
        sensor_width: cam.width,
        sensor_height: cam.height,
        generator: serde_json::to_value(cfg)
            .map_err(|e| Error::Generation(format!("generator config serialization: {e}")))?,
        sequences: entries
            .into_iter()
            .map(|e| e.expect("every sequence generated"))
            .collect(),
    };
    write_manifest(out_dir, &manifest)?;
    Ok(manifest)
}
