"""HTTP/WebSocket service backing the drawing playground.

Sessions are fully isolated. Each session's mutable state is guarded by one
lock and mutated only in short critical sections; fits run on the session's
single-worker executor so at most one fit is active per session and stream
consumers are never blocked by it.  The live integration cursor is advanced
by the WebSocket consumer at its own cadence, reading the current model and
obstacle snapshots each tick, so a fit or obstacle update lands within one
tick without interrupting the stream.

All state-changing endpoints require a client-supplied request_id and are
idempotent: replaying a request_id returns the recorded response without
re-executing.  Tick schema: {"t", "x", "modulated", "obstacleVersion"}.
"""

from __future__ import annotations

import asyncio
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
from fastapi import FastAPI, HTTPException, Request, WebSocket, WebSocketDisconnect

from cvfields.data import Demonstration
from cvfields.dynsys import ObstacleField, calibrate_alpha, modulate
from cvfields.learner import ContractionSpec, FitOptions, LearnerError, fit


@dataclass
class FitJobState:
    job_id: str
    request_id: str
    status: str = "queued"  # queued | running | done | error
    error: str | None = None
    model_version: int | None = None
    summary: dict | None = None

    def as_dict(self) -> dict:
        out = {"job": self.job_id, "status": self.status}
        if self.error is not None:
            out["error"] = self.error
        if self.model_version is not None:
            out["modelVersion"] = self.model_version
        if self.summary is not None:
            out["summary"] = self.summary
        return out


@dataclass
class StreamState:
    x: np.ndarray
    t: float = 0.0
    dt: float = 0.01
    steps_per_tick: int = 5
    cadence_hz: float = 20.0
    running: bool = True
    obstacles: ObstacleField | None = None
    consumer_attached: bool = False


class Session:
    def __init__(self, sid: str):
        self.sid = sid
        self.lock = threading.RLock()
        self.demos: list[Demonstration] = []
        self.model = None
        self.model_version = 0
        self.obstacle_points: np.ndarray | None = None
        self.obstacle_r = 4
        self.obstacle_alpha = 1.0
        self.obstacle_rho = 1e-3
        self.obstacle_version = 0
        self.fit_state: FitJobState | None = None
        self.executor = ThreadPoolExecutor(max_workers=1)
        self.responses: dict[str, dict] = {}
        self.stream: StreamState | None = None


def _fail(status: int, msg: str):
    raise HTTPException(status_code=status, detail=msg)


def _session_of(app: FastAPI, sid: str) -> Session:
    sess = app.state.sessions.get(sid)
    if sess is None:
        _fail(404, f"no session {sid}")
    return sess


async def _payload_of(request: Request) -> dict:
    try:
        payload = await request.json()
    except Exception:
        _fail(422, "body must be JSON")
    if not isinstance(payload, dict):
        _fail(422, "body must be a JSON object")
    return payload


def _request_id(payload: dict) -> str:
    rid = payload.get("request_id")
    if not isinstance(rid, str) or not rid:
        _fail(422, "request_id (nonempty string) is required")
    return rid


def _replay(sess: Session, rid: str) -> dict | None:
    return sess.responses.get(rid)


def _record(sess: Session, rid: str, response: dict) -> dict:
    sess.responses[rid] = response
    return response


def _float_list(value, name: str, length: int | None = None) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        _fail(422, f"{name} must be numeric")
    if arr.ndim != 1 or (length is not None and arr.shape[0] != length):
        _fail(422, f"{name} has wrong shape")
    if not np.isfinite(arr).all():
        _fail(422, f"{name} must be finite")
    return arr


def _parse_stroke(payload: dict) -> Demonstration:
    t = payload.get("t")
    pos = payload.get("positions")
    if not isinstance(t, list) or not isinstance(pos, list):
        _fail(422, "stroke needs 't' and 'positions' lists")
    if len(t) < 2:
        _fail(422, "stroke needs at least 2 points")
    if len(t) != len(pos):
        _fail(422, "t and positions lengths differ")
    try:
        ts = np.asarray(t, dtype=float)
        xs = np.asarray(pos, dtype=float)
    except (TypeError, ValueError):
        _fail(422, "stroke values must be numeric")
    if xs.ndim != 2 or not np.isfinite(ts).all() or not np.isfinite(xs).all():
        _fail(422, "stroke must be finite (m, n) samples")
    if np.any(np.diff(ts) <= 0):
        _fail(422, "stroke timestamps must be strictly increasing")
    vel = payload.get("velocities")
    vs = None
    if vel is not None:
        vs = np.asarray(vel, dtype=float)
        if vs.shape != xs.shape or not np.isfinite(vs).all():
            _fail(422, "velocities must match positions shape")
    return Demonstration(ts, xs, vs)


def _rk4_step(fn, t: float, x: np.ndarray, dt: float) -> np.ndarray:
    k1 = np.asarray(fn(t, x), dtype=float)
    k2 = np.asarray(fn(t + 0.5 * dt, x + 0.5 * dt * k1), dtype=float)
    k3 = np.asarray(fn(t + 0.5 * dt, x + 0.5 * dt * k2), dtype=float)
    k4 = np.asarray(fn(t + dt, x + dt * k3), dtype=float)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _run_fit_job(sess: Session, state: FitJobState, demos, degree, tau, opts) -> None:
    with sess.lock:
        state.status = "running"
    try:
        model = fit(demos, degree, ContractionSpec(tau=tau), opts)
    except LearnerError as exc:
        with sess.lock:
            state.status = "error"
            state.error = str(exc)
        return
    except Exception as exc:  # surface anything else to the client
        with sess.lock:
            state.status = "error"
            state.error = f"{type(exc).__name__}: {exc}"
        return
    with sess.lock:
        sess.model = model
        sess.model_version += 1
        state.model_version = sess.model_version
        state.summary = {
            "loss": model.loss,
            "status": model.diagnostics.status,
            "sampledResidual": model.diagnostics.sampled_residual,
            "degree": model.degree,
        }
        state.status = "done"


def create_app() -> FastAPI:
    app = FastAPI(title="cvfields service")
    app.state.sessions = {}
    app.state.registry_lock = threading.Lock()

    @app.post("/sessions")
    async def create_session():
        sid = uuid.uuid4().hex[:12]
        with app.state.registry_lock:
            app.state.sessions[sid] = Session(sid)
        return {"session": sid}

    @app.get("/sessions/{sid}")
    async def session_info(sid: str):
        sess = _session_of(app, sid)
        with sess.lock:
            return {
                "session": sid,
                "demos": len(sess.demos),
                "modelVersion": sess.model_version,
                "obstacleVersion": sess.obstacle_version,
                "streamRunning": bool(sess.stream and sess.stream.running),
            }

    @app.post("/sessions/{sid}/strokes")
    async def add_stroke(sid: str, request: Request):
        sess = _session_of(app, sid)
        payload = await _payload_of(request)
        rid = _request_id(payload)
        with sess.lock:
            prior = _replay(sess, rid)
            if prior is not None:
                return prior
        demo = _parse_stroke(payload)
        with sess.lock:
            if sess.demos and sess.demos[0].dimension != demo.dimension:
                _fail(422, "stroke dimension differs from existing demos")
            sess.demos.append(demo)
            return _record(sess, rid, {"demo": len(sess.demos) - 1,
                                       "samples": len(demo.t)})

    @app.get("/sessions/{sid}/demos")
    async def list_demos(sid: str):
        sess = _session_of(app, sid)
        with sess.lock:
            return {"demos": [
                {"index": k, "samples": len(d.t), "duration": d.horizon}
                for k, d in enumerate(sess.demos)
            ]}

    @app.post("/sessions/{sid}/fit")
    async def trigger_fit(sid: str, request: Request):
        sess = _session_of(app, sid)
        payload = await _payload_of(request)
        rid = _request_id(payload)
        degree = payload.get("degree", 5)
        tau = payload.get("tau", 1.0)
        accuracy = payload.get("accuracy", 1e-5)
        margin = payload.get("margin", 1e-3)
        max_iters = payload.get("max_iters", 25_000)
        if isinstance(degree, bool) or not isinstance(degree, int) or degree < 1:
            _fail(422, "degree must be an integer >= 1")
        if not isinstance(tau, (int, float)) or tau <= 0:
            _fail(422, "tau must be positive")
        if not isinstance(accuracy, (int, float)) or accuracy <= 0:
            _fail(422, "accuracy must be positive")
        with sess.lock:
            prior = _replay(sess, rid)
            if prior is not None:
                state = sess.fit_state
                if state is not None and state.request_id == rid:
                    return state.as_dict()
                return prior
            state = sess.fit_state
            if state is not None and state.status in ("queued", "running"):
                _fail(409, f"fit in progress (job {state.job_id})")
            if not sess.demos:
                _fail(409, "no demonstrations in session")
            demos = list(sess.demos)
            job = FitJobState(job_id=uuid.uuid4().hex[:12], request_id=rid)
            sess.fit_state = job
            opts = FitOptions(accuracy=float(accuracy), max_iters=int(max_iters),
                              constraint_margin=float(margin))
            sess.executor.submit(_run_fit_job, sess, job, demos, degree, float(tau), opts)
            return _record(sess, rid, job.as_dict())

    @app.get("/sessions/{sid}/jobs/{job_id}")
    async def job_status(sid: str, job_id: str):
        sess = _session_of(app, sid)
        with sess.lock:
            state = sess.fit_state
            if state is None or state.job_id != job_id:
                _fail(404, f"no job {job_id}")
            return state.as_dict()

    @app.get("/sessions/{sid}/model")
    async def model_summary(sid: str, coeffs: bool = False):
        sess = _session_of(app, sid)
        with sess.lock:
            if sess.model is None:
                _fail(404, "no model fitted yet")
            model = sess.model
            out = {
                "version": sess.model_version,
                "degree": model.degree,
                "dimension": model.dimension,
                "loss": model.loss,
                "tau": model.spec.tau if model.spec else None,
                "status": model.diagnostics.status,
                "sampledResidual": model.diagnostics.sampled_residual,
            }
            if coeffs:
                out["model"] = model.to_dict()
            return out

    @app.get("/sessions/{sid}/field")
    async def field_grid(sid: str, nx: int = 16, ny: int = 16,
                         xmin: float | None = None, xmax: float | None = None,
                         ymin: float | None = None, ymax: float | None = None):
        sess = _session_of(app, sid)
        with sess.lock:
            if sess.model is None:
                _fail(404, "no model fitted yet")
            model = sess.model
            version = sess.model_version
            demos = list(sess.demos)
        if model.dimension != 2:
            _fail(400, "field grid rendering is 2-D only")
        if not (1 <= nx <= 200 and 1 <= ny <= 200):
            _fail(422, "nx, ny must be in [1, 200]")
        if demos and None in (xmin, xmax, ymin, ymax):
            allpos = np.vstack([d.positions for d in demos])
            lo, hi = allpos.min(axis=0), allpos.max(axis=0)
            center, half = 0.5 * (lo + hi), 0.625 * (hi - lo)  # +25% box
            xmin = center[0] - half[0] if xmin is None else xmin
            xmax = center[0] + half[0] if xmax is None else xmax
            ymin = center[1] - half[1] if ymin is None else ymin
            ymax = center[1] + half[1] if ymax is None else ymax
        xmin = -1.0 if xmin is None else xmin
        xmax = 1.0 if xmax is None else xmax
        ymin = -1.0 if ymin is None else ymin
        ymax = 1.0 if ymax is None else ymax
        if not (xmax > xmin and ymax > ymin):
            _fail(422, "empty grid bounds")
        gx = np.linspace(xmin, xmax, nx)
        gy = np.linspace(ymin, ymax, ny)
        pts = np.array([[x, y] for y in gy for x in gx])
        vec = model.field(pts)
        return {"version": version,
                "bounds": [xmin, xmax, ymin, ymax],
                "points": pts.tolist(),
                "vectors": vec.tolist()}

    @app.post("/sessions/{sid}/obstacles")
    async def set_obstacles(sid: str, request: Request):
        sess = _session_of(app, sid)
        payload = await _payload_of(request)
        rid = _request_id(payload)
        with sess.lock:
            prior = _replay(sess, rid)
            if prior is not None:
                return prior
        raw = payload.get("points", [])
        if not isinstance(raw, list):
            _fail(422, "points must be a list of states")
        pts = None
        if raw:
            try:
                pts = np.asarray(raw, dtype=float)
            except (TypeError, ValueError):
                _fail(422, "points must be numeric")
            if pts.ndim != 2 or not np.isfinite(pts).all():
                _fail(422, "points must be a finite (k, n) array")
        r = payload.get("r", 4)
        rho = payload.get("rho", 1e-3)
        alpha = payload.get("alpha", "keep")
        if isinstance(r, bool) or not isinstance(r, int) or r < 1:
            _fail(422, "r must be an integer >= 1")
        if not isinstance(rho, (int, float)) or rho <= 0:
            _fail(422, "rho must be positive")
        with sess.lock:
            if alpha == "auto":
                if sess.model is None or not sess.demos:
                    _fail(409, "alpha calibration needs a model and demos")
                if pts is None:
                    _fail(422, "alpha calibration needs obstacle points")
                probe = ObstacleField(records=((0.0, pts),), r=r, alpha=1.0, rho=rho)
                path = np.vstack([d.positions for d in sess.demos])
                alpha = calibrate_alpha(sess.model.field, probe, path)
            elif alpha == "keep":
                alpha = sess.obstacle_alpha
            elif not isinstance(alpha, (int, float)) or alpha < 0:
                _fail(422, "alpha must be nonnegative or 'auto'")
            sess.obstacle_points = pts
            sess.obstacle_r = r
            sess.obstacle_alpha = float(alpha)
            sess.obstacle_rho = float(rho)
            sess.obstacle_version += 1
            stream = sess.stream
            if stream is not None and stream.running and stream.obstacles is not None:
                live = pts if pts is not None else np.zeros((0, len(stream.x)))
                stream.obstacles.update(stream.t, live)
                stream.obstacles.alpha = float(alpha)
            return _record(sess, rid, {"obstacleVersion": sess.obstacle_version,
                                       "alpha": float(alpha),
                                       "points": 0 if pts is None else int(pts.shape[0])})

    @app.post("/sessions/{sid}/stream/start")
    async def stream_start(sid: str, request: Request):
        sess = _session_of(app, sid)
        payload = await _payload_of(request)
        rid = _request_id(payload)
        with sess.lock:
            prior = _replay(sess, rid)
            if prior is not None:
                return prior
            if sess.model is None:
                _fail(409, "no model fitted yet")
            if sess.stream is not None and sess.stream.running:
                _fail(409, "stream already running")
            x0 = _float_list(payload.get("x0"), "x0", sess.model.dimension)
            dt = payload.get("dt", 0.01)
            steps = payload.get("steps_per_tick", 5)
            cadence = payload.get("cadence_hz", 20.0)
            if not isinstance(dt, (int, float)) or dt <= 0:
                _fail(422, "dt must be positive")
            if isinstance(steps, bool) or not isinstance(steps, int) or steps < 1:
                _fail(422, "steps_per_tick must be an integer >= 1")
            if not isinstance(cadence, (int, float)) or not 0 < cadence <= 1000:
                _fail(422, "cadence_hz must be in (0, 1000]")
            records = ()
            if sess.obstacle_points is not None:
                records = ((0.0, sess.obstacle_points),)
            obstacles = ObstacleField(records=records, r=sess.obstacle_r,
                                      alpha=sess.obstacle_alpha, rho=sess.obstacle_rho)
            sess.stream = StreamState(x=x0, dt=float(dt), steps_per_tick=steps,
                                      cadence_hz=float(cadence), obstacles=obstacles)
            return _record(sess, rid, {"streaming": True, "t": 0.0})

    @app.post("/sessions/{sid}/stream/stop")
    async def stream_stop(sid: str, request: Request):
        sess = _session_of(app, sid)
        payload = await _payload_of(request)
        rid = _request_id(payload)
        with sess.lock:
            prior = _replay(sess, rid)
            if prior is not None:
                return prior
            stream = sess.stream
            if stream is not None:
                stream.running = False
            return _record(sess, rid, {"streaming": False,
                                       "t": stream.t if stream else 0.0})

    @app.websocket("/sessions/{sid}/stream")
    async def stream_ticks(ws: WebSocket, sid: str):
        sess = app.state.sessions.get(sid)
        if sess is None:
            await ws.close(code=1008)
            return
        await ws.accept()
        refuse = None
        with sess.lock:  # never await while holding the lock
            stream = sess.stream
            if stream is None or not stream.running:
                refuse = "no active stream"
            elif stream.consumer_attached:
                refuse = "stream already has a consumer"
            else:
                stream.consumer_attached = True
        if refuse is not None:
            await ws.send_json({"error": refuse})
            await ws.close(code=1008)
            return
        try:
            while True:
                with sess.lock:
                    if sess.stream is not stream or not stream.running:
                        break
                    model = sess.model
                    obstacles = stream.obstacles
                    obstacle_version = sess.obstacle_version
                # integration happens outside the lock on snapshots
                moving = modulate(model.field, obstacles)
                active = obstacles.active_points(stream.t)
                is_modulated = obstacles.alpha > 0.0 and active is not None and len(active) > 0
                x, t = stream.x, stream.t
                for _ in range(stream.steps_per_tick):
                    x = _rk4_step(moving, t, x, stream.dt)
                    t += stream.dt
                stream.x, stream.t = x, t
                await ws.send_json({
                    "t": float(t),
                    "x": [float(v) for v in x],
                    "modulated": bool(is_modulated),
                    "obstacleVersion": int(obstacle_version),
                })
                await asyncio.sleep(1.0 / stream.cadence_hz)
        except WebSocketDisconnect:
            pass
        finally:
            with sess.lock:
                stream.consumer_attached = False

    return app
