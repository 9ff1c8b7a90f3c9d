//! Closed-loop navigation: a kinematic drone with first-order velocity
//! tracking, an event-camera feed rendered from its pose, a detector (the
//! trained network, ground-truth projection, or nothing), a pick-the-biggest-
//! box planner, an image-based proportional controller, and gate-pass
//! scoring.
//!
//! World frame: x forward, y left, z up. Body frame matches at zero yaw.
//! Image coordinates: u rightward, v downward, origin top-left.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    render_frame, CamPose, CameraModel, DomainConfig, DomainId, EventSynthesizer, GateSpec, Scene,
};
use crate::detect::{decode_predictions, BoundingBox};
use crate::error::{Error, Result};
use crate::event::{Event, SensorGeometry};
use crate::model::{BnMode, Network, INPUT_COLS, INPUT_ROWS};
use crate::nn::tape::Tape;
use crate::scalar::Scalar;
use crate::sparse::event_histogram;

// ---------------------------------------------------------------------------
// Drone, controller, dynamics
// ---------------------------------------------------------------------------

/// Kinematic drone state: world position, yaw, and the body-frame velocity
/// being tracked.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroneState {
    pub position: [f64; 3],
    pub yaw: f64,
    /// Velocity in the body frame (x forward, y left, z up), m/s.
    pub velocity: [f64; 3],
}

/// Image-servoing gains: lateral/vertical m/s per pixel of center error and
/// the constant forward speed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    pub k_lat: f64,
    pub k_ver: f64,
    pub v_long: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        ControllerGains {
            k_lat: 0.01,
            k_ver: 0.01,
            v_long: 1.0,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_long > 0.0) {
            return Err(Error::Config(format!(
                "forward speed {} must be positive",
                self.v_long
            )));
        }
        Ok(())
    }
}

/// Picks the detection believed to be the next gate: the largest box by
/// pixel area, ties broken by higher confidence, then by leftmost center.
pub fn select_next_gate<T: Scalar>(dets: &[BoundingBox<T>]) -> Option<BoundingBox<T>> {
    let mut best: Option<&BoundingBox<T>> = None;
    for d in dets {
        let better = match best {
            None => true,
            Some(b) => {
                let (da, ba) = (d.area(), b.area());
                da > ba
                    || (da == ba && (d.conf > b.conf || (d.conf == b.conf && d.cx < b.cx)))
            }
        };
        if better {
            best = Some(d);
        }
    }
    best.cloned()
}

/// Proportional image-based control: fly forward at `v_long` while steering
/// the target's center toward the image center. Lateral command follows the
/// horizontal pixel error (u grows rightward, body y leftward), vertical
/// follows the vertical error (v grows downward, body z upward). With no
/// target the previous command is held.
pub fn control_law<T: Scalar>(
    target: Option<&BoundingBox<T>>,
    image_center: (f64, f64),
    gains: &ControllerGains,
    last_cmd: [f64; 3],
) -> [f64; 3] {
    match target {
        Some(b) => [
            gains.v_long,
            gains.k_lat * (image_center.0 - b.cx.to_f64()),
            gains.k_ver * (image_center.1 - b.cy.to_f64()),
        ],
        None => last_cmd,
    }
}

/// Advances the drone by `dt` seconds of first-order velocity tracking:
/// within the step the body velocity ramps linearly toward `cmd` with time
/// constant `tau`, saturating at `cmd` (v ← v + (cmd − v)·min(1, dt/τ)), and
/// the position advances by the exact integral of that ramp rotated into the
/// world frame by the yaw.
pub fn step_dynamics(s: &DroneState, cmd: [f64; 3], tau: f64, dt: f64) -> Result<DroneState> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dynamics step dt {dt} must be positive")));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("time constant tau {tau} must be positive")));
    }
    let alpha = (dt / tau).min(1.0);
    let mut v_new = [0.0; 3];
    let mut body_disp = [0.0; 3];
    for i in 0..3 {
        v_new[i] = s.velocity[i] + (cmd[i] - s.velocity[i]) * alpha;
        // Exact displacement of the clamped linear ramp: trapezoid up to the
        // saturation time, then constant at cmd.
        body_disp[i] = if dt <= tau {
            (s.velocity[i] + v_new[i]) / 2.0 * dt
        } else {
            (s.velocity[i] + cmd[i]) / 2.0 * tau + cmd[i] * (dt - tau)
        };
    }
    let (sy, cy) = s.yaw.sin_cos();
    let world_disp = [
        cy * body_disp[0] - sy * body_disp[1],
        sy * body_disp[0] + cy * body_disp[1],
        body_disp[2],
    ];
    Ok(DroneState {
        position: [
            s.position[0] + world_disp[0],
            s.position[1] + world_disp[1],
            s.position[2] + world_disp[2],
        ],
        yaw: s.yaw,
        velocity: v_new,
    })
}

// ---------------------------------------------------------------------------
// Gate passing
// ---------------------------------------------------------------------------

/// Result of testing one motion segment against one gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateCrossing {
    /// Crossed the gate plane through the opening with full drone clearance.
    Passed,
    /// Crossed the gate plane outside the cleared opening.
    PlaneHit,
    /// Did not cross the plane.
    NoCross,
}

/// Classifies the segment `prev → curr` against a gate: if it crosses the
/// gate plane, the crossing passes only when it stays within the inner
/// opening shrunk by the drone radius on each side; a segment that stays on
/// one side of the plane (or lies in it) does not cross. A segment starting
/// exactly on the plane counts as already across, so consecutive segments
/// never double-count one crossing.
pub fn gate_pass_check(
    prev: [f64; 3],
    curr: [f64; 3],
    gate: &GateSpec,
    drone_radius: f64,
) -> GateCrossing {
    let n = gate.normal();
    let d0 = (prev[0] - gate.center[0]) * n[0]
        + (prev[1] - gate.center[1]) * n[1]
        + (prev[2] - gate.center[2]) * n[2];
    let d1 = (curr[0] - gate.center[0]) * n[0]
        + (curr[1] - gate.center[1]) * n[1]
        + (curr[2] - gate.center[2]) * n[2];
    let crosses = (d0 > 0.0 && d1 <= 0.0) || (d0 < 0.0 && d1 >= 0.0);
    if !crosses {
        return GateCrossing::NoCross;
    }
    let s = d0 / (d0 - d1);
    let q = [
        prev[0] + s * (curr[0] - prev[0]),
        prev[1] + s * (curr[1] - prev[1]),
        prev[2] + s * (curr[2] - prev[2]),
    ];
    let lat = gate.lateral();
    let a = (q[0] - gate.center[0]) * lat[0] + (q[1] - gate.center[1]) * lat[1];
    let b = q[2] - gate.center[2];
    let clearance = gate.half_inner() - drone_radius;
    if a.abs() <= clearance && b.abs() <= clearance {
        GateCrossing::Passed
    } else {
        GateCrossing::PlaneHit
    }
}

// ---------------------------------------------------------------------------
// Race track
// ---------------------------------------------------------------------------

/// An ordered gate course with a start pose and the drone's radius (which
/// shrinks the opening each crossing must clear).
#[derive(Debug, Clone, PartialEq)]
pub struct RaceTrack {
    pub gates: Vec<GateSpec>,
    pub start_position: [f64; 3],
    pub start_yaw: f64,
    pub drone_radius: f64,
}

impl RaceTrack {
    /// The default four-gate course: gates at different lateral offsets and
    /// heights, all with the standard 1.5 m opening.
    pub fn default_track() -> Self {
        let gate = |x: f64, y: f64, z: f64| GateSpec {
            center: [x, y, z],
            yaw: 0.0,
            ..GateSpec::default()
        };
        RaceTrack {
            gates: vec![
                gate(4.0, 0.0, 1.5),
                gate(8.0, 1.5, 2.0),
                gate(12.0, -1.0, 1.2),
                gate(16.0, 0.5, 1.8),
            ],
            start_position: [0.0, 0.0, 1.5],
            start_yaw: 0.0,
            drone_radius: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gates.is_empty() {
            return Err(Error::Config("a race track needs at least one gate".into()));
        }
        for g in &self.gates {
            g.validate()?;
        }
        if !(self.drone_radius >= 0.0) {
            return Err(Error::Config(format!(
                "drone radius {} must be non-negative",
                self.drone_radius
            )));
        }
        Ok(())
    }
}

/// One gate in a track file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackGateRecord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub inner_size: f64,
}

/// Writes the track as a JSON list of gates {x, y, z, yaw, inner_size}.
pub fn write_track(path: &Path, track: &RaceTrack) -> Result<()> {
    let records: Vec<TrackGateRecord> = track
        .gates
        .iter()
        .map(|g| TrackGateRecord {
            x: g.center[0],
            y: g.center[1],
            z: g.center[2],
            yaw: g.yaw,
            inner_size: g.inner_size,
        })
        .collect();
    let text = serde_json::to_string_pretty(&records).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a JSON gate list back into a track, with the default start pose,
/// drone radius, and gate border style.
pub fn read_track(path: &Path) -> Result<RaceTrack> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let records: Vec<TrackGateRecord> =
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        })?;
    let defaults = RaceTrack::default_track();
    let track = RaceTrack {
        gates: records
            .iter()
            .map(|r| GateSpec {
                center: [r.x, r.y, r.z],
                yaw: r.yaw,
                inner_size: r.inner_size,
                ..GateSpec::default()
            })
            .collect(),
        ..defaults
    };
    track.validate()?;
    Ok(track)
}

// ---------------------------------------------------------------------------
// Closed loop
// ---------------------------------------------------------------------------

/// What turns event windows (and the current pose) into detections.
pub enum Detector<'a, T: Scalar> {
    /// Projects the true inner corners of every gate to boxes (confidence 1).
    Oracle,
    /// Never detects anything; the controller holds its last command.
    Null,
    /// Runs the trained network on each completed event window.
    Model {
        net: &'a Network<T>,
        conf_threshold: T,
    },
}

/// Closed-loop run parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub gains: ControllerGains,
    /// Control (and render) rate, Hz.
    pub control_rate_hz: f64,
    /// Events per detector window.
    pub window_events: usize,
    /// Simulated-time budget, seconds.
    pub timeout_s: f64,
    /// Velocity-tracking time constant, seconds.
    pub tau_s: f64,
    /// Scene appearance and event-sensor model used for rendering.
    pub domain: DomainId,
    /// Seeds the start-pose jitter (and any sensor noise).
    pub seed: u64,
    /// Start-pose perturbation scale in meters (0 = start exactly at the
    /// track's start pose).
    pub start_jitter: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gains: ControllerGains::default(),
            control_rate_hz: 30.0,
            window_events: crate::event::DEFAULT_WINDOW_EVENTS,
            timeout_s: 60.0,
            tau_s: 0.3,
            domain: DomainId::B,
            seed: 0,
            start_jitter: 0.0,
        }
    }
}

/// Per-gate result of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateOutcome {
    Passed,
    PlaneHit,
    NotReached,
}

impl GateOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            GateOutcome::Passed => "passed",
            GateOutcome::PlaneHit => "plane_hit",
            GateOutcome::NotReached => "not_reached",
        }
    }
}

/// Run summary serialized as the report JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Outcome per gate, in track order: "passed" | "plane_hit" |
    /// "not_reached".
    pub gates: Vec<String>,
    pub duration_s: f64,
    pub windows_processed: u64,
}

impl RunReport {
    pub fn gates_passed(&self) -> usize {
        self.gates.iter().filter(|g| g.as_str() == "passed").count()
    }
}

/// One control tick in the trajectory log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRow {
    pub t_s: f64,
    pub position: [f64; 3],
    pub yaw: f64,
    pub cmd: [f64; 3],
}

/// Renders the trajectory log as CSV with a `t,x,y,z,yaw,u_x,u_y,u_z` header.
pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from("t,x,y,z,yaw,u_x,u_y,u_z\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.t_s,
            r.position[0],
            r.position[1],
            r.position[2],
            r.yaw,
            r.cmd[0],
            r.cmd[1],
            r.cmd[2]
        ));
    }
    out
}

/// Full result of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: RunReport,
    pub trajectory: Vec<TrajectoryRow>,
}

fn bearing_to(from: [f64; 3], to: [f64; 3]) -> f64 {
    (to[1] - from[1]).atan2(to[0] - from[0])
}

/// Projects the true inner corners of each gate to an axis-aligned box
/// (confidence 1), in sensor pixel coordinates. A gate contributes only if
/// all four corners project in front of the camera and the box overlaps the
/// image; boxes are clipped to the image.
pub fn oracle_detections(gates: &[GateSpec], cam: &CameraModel) -> Vec<BoundingBox<f64>> {
    let mut out = Vec::new();
    let (w, h) = (cam.width as f64, cam.height as f64);
    for g in gates {
        let lat = g.lateral();
        let hi = g.half_inner();
        let mut min_u = f64::INFINITY;
        let mut max_u = f64::NEG_INFINITY;
        let mut min_v = f64::INFINITY;
        let mut max_v = f64::NEG_INFINITY;
        let mut ok = true;
        for (sa, sb) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
            let corner = [
                g.center[0] + sa * hi * lat[0],
                g.center[1] + sa * hi * lat[1],
                g.center[2] + sb * hi,
            ];
            match cam.project(corner) {
                Some((u, v, depth)) if depth > 0.1 => {
                    min_u = min_u.min(u);
                    max_u = max_u.max(u);
                    min_v = min_v.min(v);
                    max_v = max_v.max(v);
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok || max_u <= 0.0 || min_u >= w || max_v <= 0.0 || min_v >= h {
            continue;
        }
        let b = BoundingBox::from_corners(
            min_u.max(0.0),
            min_v.max(0.0),
            max_u.min(w),
            max_v.min(h),
            1.0,
        );
        if b.w > 0.0 && b.h > 0.0 {
            out.push(b);
        }
    }
    out
}

/// Runs the drone around the track: at each control tick the camera view is
/// rendered and converted to events; every completed window of
/// `window_events` events is run through the detector; the biggest detected
/// box steers the controller (holding the last command when there is no
/// detection yet); gates are scored by plane crossings. Terminates on final-
/// gate pass, a plane hit, leaving the arena, or timeout. Deterministic in
/// (track, detector weights, config).
pub fn run_closed_loop<T: Scalar>(
    track: &RaceTrack,
    detector: Detector<'_, T>,
    cfg: &RunConfig,
) -> Result<RunOutcome> {
    track.validate()?;
    cfg.gains.validate()?;
    if !(cfg.control_rate_hz > 0.0) {
        return Err(Error::Config(format!(
            "control rate {} Hz must be positive",
            cfg.control_rate_hz
        )));
    }
    if cfg.window_events == 0 {
        return Err(Error::Config("window size must be positive".into()));
    }
    if let Detector::Model { net, .. } = &detector {
        let (r, c) = (net.arch.input_rows, net.arch.input_cols);
        if (r, c) != (INPUT_ROWS, INPUT_COLS) {
            return Err(Error::Config(format!(
                "architecture mismatch: checkpoint expects {r}x{c} input, the simulator produces {INPUT_ROWS}x{INPUT_COLS}"
            )));
        }
    }

    let domain_cfg = DomainConfig::for_domain(cfg.domain);
    let scene = Scene {
        gates: track.gates.clone(),
        background: domain_cfg.background,
        checker_dark: domain_cfg.checker_dark,
        checker_light: domain_cfg.checker_light,
    };
    let cam = CameraModel::davis240();
    let geometry = SensorGeometry::new(cam.width, cam.height);
    let image_center = (cam.width as f64 / 2.0, cam.height as f64 / 2.0);
    let input_dx = ((INPUT_COLS - cam.width as usize) / 2) as f64;
    let input_dy = ((INPUT_ROWS - cam.height as usize) / 2) as f64;

    // Start pose: the track start, optionally jittered, yawed at gate 1.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut start = track.start_position;
    let mut yaw_jitter = 0.0;
    if cfg.start_jitter > 0.0 {
        let j = cfg.start_jitter;
        start[1] += rng.gen_range(-j..=j);
        start[2] = (start[2] + rng.gen_range(-0.6 * j..=0.6 * j)).max(0.3);
        yaw_jitter = rng.gen_range(-0.4 * j..=0.4 * j);
    }
    let mut drone = DroneState {
        position: start,
        yaw: bearing_to(start, track.gates[0].center) + yaw_jitter,
        velocity: [0.0; 3],
    };

    let mut synth = EventSynthesizer::new(geometry, &domain_cfg.esim, cfg.seed)?;
    let mut model_state = match &detector {
        Detector::Model { net, .. } => Some(net.zero_state(1)),
        _ => None,
    };

    // Arena: the track's bounding box plus margin.
    let mut lo = track.start_position;
    let mut hi = track.start_position;
    for g in &track.gates {
        for i in 0..3 {
            lo[i] = lo[i].min(g.center[i]);
            hi[i] = hi[i].max(g.center[i]);
        }
    }
    let margin = 6.0;
    let in_arena = |p: [f64; 3]| {
        p[0] > lo[0] - margin
            && p[0] < hi[0] + margin
            && p[1] > lo[1] - margin
            && p[1] < hi[1] + margin
            && p[2] > 0.0
            && p[2] < hi[2] + 4.0
    };

    let dt = 1.0 / cfg.control_rate_hz;
    let max_steps = (cfg.timeout_s * cfg.control_rate_hz).ceil() as usize;
    let mut outcomes = vec![GateOutcome::NotReached; track.gates.len()];
    let mut next_gate = 0usize;
    let mut last_cmd = [cfg.gains.v_long, 0.0, 0.0];
    let mut last_detections: Vec<BoundingBox<f64>> = Vec::new();
    let mut event_buffer: Vec<Event> = Vec::new();
    let mut windows_processed = 0u64;
    let mut trajectory = Vec::new();
    let mut duration_s = 0.0;

    'outer: for step in 0..max_steps {
        let t_s = step as f64 * dt;
        let pose = CamPose {
            position: drone.position,
            yaw: drone.yaw,
            pitch: 0.0,
        };

        // Sense: render the current view, accumulate events, and hand every
        // completed window to the detector.
        let (frame, _) = render_frame(&scene, &cam.at(&pose));
        synth.push_frame((t_s * 1e6).round() as i64, &frame)?;
        event_buffer.extend(synth.drain_events());
        let mut consumed = 0usize;
        while event_buffer.len() - consumed >= cfg.window_events {
            let window = &event_buffer[consumed..consumed + cfg.window_events];
            windows_processed += 1;
            match &detector {
                Detector::Oracle => {
                    last_detections = oracle_detections(&track.gates, &cam.at(&pose));
                }
                Detector::Null => last_detections = Vec::new(),
                Detector::Model { net, conf_threshold } => {
                    let hist =
                        event_histogram::<T>(geometry, window).embed(INPUT_ROWS, INPUT_COLS)?;
                    let mut tape = Tape::new();
                    let input = tape.leaf_sparse(vec![hist]);
                    let state = model_state.as_mut().expect("model state initialized");
                    let fwd = net.forward(&mut tape, input, Some(state), BnMode::Infer)?;
                    let (_, data) = tape.dense_batch(fwd.prediction)?;
                    let boxes = decode_predictions(
                        data,
                        *conf_threshold,
                        T::from_usize(INPUT_COLS),
                        T::from_usize(INPUT_ROWS),
                    );
                    state.detach();
                    // Back from network-input to sensor pixel coordinates.
                    last_detections = boxes
                        .iter()
                        .map(|b| BoundingBox {
                            cx: b.cx.to_f64() - input_dx,
                            cy: b.cy.to_f64() - input_dy,
                            w: b.w.to_f64(),
                            h: b.h.to_f64(),
                            conf: b.conf.to_f64(),
                        })
                        .collect();
                }
            }
            consumed += cfg.window_events;
        }
        event_buffer.drain(..consumed);

        // Plan, command, move.
        let target = select_next_gate(&last_detections);
        let cmd = control_law(target.as_ref(), image_center, &cfg.gains, last_cmd);
        last_cmd = cmd;
        trajectory.push(TrajectoryRow {
            t_s,
            position: drone.position,
            yaw: drone.yaw,
            cmd,
        });
        let prev = drone.position;
        drone = step_dynamics(&drone, cmd, cfg.tau_s, dt)?;
        duration_s = t_s + dt;

        // Score the segment against the gate currently being attempted.
        match gate_pass_check(prev, drone.position, &track.gates[next_gate], track.drone_radius) {
            GateCrossing::Passed => {
                outcomes[next_gate] = GateOutcome::Passed;
                next_gate += 1;
                if next_gate == track.gates.len() {
                    break 'outer;
                }
                // New leg: aim the body (and camera) at the next gate.
                drone.yaw = bearing_to(drone.position, track.gates[next_gate].center);
            }
            GateCrossing::PlaneHit => {
                outcomes[next_gate] = GateOutcome::PlaneHit;
                break 'outer;
            }
            GateCrossing::NoCross => {}
        }

        if !in_arena(drone.position) {
            break 'outer;
        }
    }

    Ok(RunOutcome {
        report: RunReport {
            gates: outcomes.iter().map(|o| o.as_str().to_string()).collect(),
            duration_s,
            windows_processed,
        },
        trajectory,
    })
}
