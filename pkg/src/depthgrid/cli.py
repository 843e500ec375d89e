"""Command-line front end: registry, sensor servers, monitor, and office tools.

Exit codes: 0 success, 2 bad input or unreachable dependency, 3 server name
conflict at registration, 4 degenerate calibration geometry.
"""

from __future__ import annotations

import argparse
import json
import logging
import queue
import sys
import threading
import time

import numpy as np

from .fusion import FusionParams, MissingCalibrationError, SkeletonFusion
from .geometry import (
    BandwidthModel,
    DegenerateGeometryError,
    bandwidth,
    fit_rigid,
    fuse_clouds,
    icp_refine,
    load_calibration,
    load_correspondences,
    load_ply,
    plan_layout,
    save_calibration,
    save_ply,
    subsample,
)
from .model import (
    JOINT_COUNT,
    CameraIntrinsics,
    RigidTransform,
    TrackState,
    compute_center_of_mass,
)
from .netproto.registry import (
    DEFAULT_REGISTRY_PORT,
    DuplicateServerNameError,
    HeartbeatLoop,
    RegistryClient,
    RegistryError,
    RegistryServer,
    resolve_registry_endpoint,
)
from .netproto.stream import FrameBundle, SensorPublisher, StreamClient, StreamServer
from .recording import RecordingError, RecordingReader, RecordingWriter
from .simsensor import SkeletonSensor, apply_interference, load_scene, render_frame

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NAME_CONFLICT = 3
EXIT_DEGENERATE = 4


def _parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def _fail(message: str, code: int = EXIT_INPUT) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# registry


def cmd_registry(args: argparse.Namespace) -> int:
    server = RegistryServer(host=args.host, port=args.port)
    try:
        server.start()
    except OSError as exc:
        return _fail(f"cannot bind registry on {args.host}:{args.port}: {exc}")
    print(f"registry listening on {server.host}:{server.port}", flush=True)
    try:
        threading.Event().wait(args.duration)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


# ---------------------------------------------------------------------------
# serve


def _frame_source(scene, rig):
    """Bind one camera's render/interfere/extract pipeline to a frame index."""
    sensor = SkeletonSensor(scene, rig)

    def source(frame_index: int) -> FrameBundle:
        t = frame_index / scene.fps
        depth, color, labels = render_frame(scene, rig, t)
        depth = apply_interference({rig.camera_id: depth}, scene, frame_index)[rig.camera_id]
        skeletons = sensor.extract(frame_index)
        return FrameBundle(depth=depth, color=color, labels=labels,
                           skeletons=skeletons, timestamp_us=depth.timestamp_us)

    return source


def cmd_serve(args: argparse.Namespace) -> int:
    try:
        scene = load_scene(args.scene)
    except (OSError, ValueError, KeyError) as exc:
        return _fail(f"cannot load scene {args.scene}: {exc}")

    known = {rig.camera_id for rig in scene.cameras}
    if args.cameras:
        try:
            camera_ids = [int(x) for x in args.cameras.split(",") if x.strip()]
        except ValueError:
            return _fail(f"bad --cameras list: {args.cameras!r}")
        missing = sorted(set(camera_ids) - known)
        if missing:
            return _fail(f"scene has no camera {missing}")
    else:
        camera_ids = sorted(known)
    if not camera_ids:
        return _fail("no cameras to serve")

    server = StreamServer(host=args.host, port=args.port)
    try:
        server.start()
    except OSError as exc:
        return _fail(f"cannot bind stream server: {exc}")

    name = args.name or f"sensor-{server.port}"
    heartbeat = None
    if not args.no_registry:
        client = RegistryClient(resolve_registry_endpoint(args.registry))
        try:
            client.register(name, server.host, server.port, camera_ids)
        except DuplicateServerNameError:
            server.stop()
            return _fail(f"server name {name!r} already registered", EXIT_NAME_CONFLICT)
        except (RegistryError, OSError) as exc:
            server.stop()
            return _fail(f"registry unreachable: {exc}")
        heartbeat = HeartbeatLoop(client, name, server.host, server.port, camera_ids)
        heartbeat.start()
        print(f"registered {name} at {client.endpoint[0]}:{client.endpoint[1]}", flush=True)

    sources = {cid: _frame_source(scene, scene.rig(cid)) for cid in camera_ids}
    publisher = SensorPublisher(server, sources, fps=args.fps or scene.fps)
    print(f"serving cameras {camera_ids} on {server.host}:{server.port}", flush=True)
    try:
        publisher.run(duration=args.duration)
    except KeyboardInterrupt:
        pass
    finally:
        publisher.stop()
        if heartbeat is not None:
            heartbeat.stop()
        server.stop()
    print(f"served {publisher.ticks} ticks, {publisher.bytes_sent} bytes", flush=True)
    return EXIT_OK


# ---------------------------------------------------------------------------
# monitor


def _load_side_map(path):
    """JSON array of [camera_a, side_a, camera_b, side_b] exit/entry pairings."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError("side map must be a JSON array")
    table: dict[tuple[int, str], list] = {}
    for item in raw:
        if not (isinstance(item, list) and len(item) == 4):
            raise ValueError(f"bad side map entry: {item!r}")
        cam_a, side_a, cam_b, side_b = item
        for side in (side_a, side_b):
            if side not in ("left", "right"):
                raise ValueError(f"bad side {side!r} in side map")
        table.setdefault((int(cam_a), side_a), []).append((int(cam_b), side_b))
        table.setdefault((int(cam_b), side_b), []).append((int(cam_a), side_a))
    return {key: tuple(val) for key, val in table.items()}


class _CommandReader(threading.Thread):
    """Forwards stdin lines to the monitor loop without blocking it."""

    def __init__(self):
        super().__init__(name="stdin-commands", daemon=True)
        self.lines: queue.Queue[str] = queue.Queue()

    def run(self) -> None:
        try:
            for line in sys.stdin:
                self.lines.put(line.strip())
        except ValueError:
            pass  # stdin closed underneath us


class _Monitor:
    def __init__(self, args: argparse.Namespace, calibrations, side_map):
        self.args = args
        self.calibrations = calibrations
        self.tracker = SkeletonFusion(calibrations, FusionParams(), side_map=side_map)
        self.client = StreamClient()
        self.known_endpoints: set[tuple[str, int]] = set()
        self.registry: RegistryClient | None = None
        self.recorder: RecordingWriter | None = None
        self.ticks = 0
        self.start = time.monotonic()
        self.first_byte_at: float | None = None
        self.last_confirmed = 0
        self._stats_mark = (self.start, 0)
        self._camera_marks: dict[int, tuple[int, int]] = {}
        self._next_poll = 0.0
        self._stop = False

    # -- discovery ----------------------------------------------------------

    def _connect(self, endpoint: tuple[str, int], origin: str) -> None:
        if endpoint in self.known_endpoints:
            return
        self.known_endpoints.add(endpoint)
        self.client.connect(endpoint)
        print(f"connecting to {origin} at {endpoint[0]}:{endpoint[1]}", flush=True)

    def poll_registry(self, now: float) -> None:
        if self.registry is None or now < self._next_poll:
            return
        self._next_poll = now + self.args.poll_interval
        try:
            entries = self.registry.list_entries()
        except (RegistryError, OSError) as exc:
            print(f"warning: registry poll failed: {exc}", file=sys.stderr, flush=True)
            return
        for entry in entries:
            self._connect((entry.host, entry.port), entry.server_name)
        if not entries and not self.known_endpoints:
            print("warning: no servers registered yet; retrying", file=sys.stderr, flush=True)

    # -- operator commands ----------------------------------------------------

    def handle_command(self, line: str) -> None:
        if not line:
            return
        fields = line.split(None, 2)
        if fields[0] in ("quit", "stop", "exit"):
            self._stop = True
        elif fields[0] == "label" and len(fields) >= 3:
            try:
                self.tracker.set_label(int(fields[1]), fields[2])
                print(f"labeled {fields[1]} {fields[2]}", flush=True)
            except (ValueError, KeyError):
                print(f"no such output: {fields[1]}", flush=True)
        elif fields[0] == "snapshot":
            path = fields[1] if len(fields) > 1 else f"snapshot-{self.tracker.frame_index:06d}.ply"
            self.snapshot(path)
        elif fields[0] == "trace":
            for line_out in self.tracker.trace_lines():
                print(line_out, flush=True)
        else:
            print(f"unknown command: {line!r}", flush=True)

    def snapshot(self, path: str) -> None:
        """Fuse the latest decoded depth frames into a world-frame PLY."""
        parts = []
        for camera_id, bank in sorted(self.client.banks.items()):
            calib = self.calibrations.get(camera_id)
            depth = bank.depth_frame()
            if calib is None or depth is None:
                continue
            intr = CameraIntrinsics(width=depth.width, height=depth.height)
            cloud = subsample(depth, self.args.subsample, intr, color=bank.color_frame())
            parts.append((cloud, calib))
        if not parts:
            print("snapshot: no depth frames decoded yet", flush=True)
            return
        fused = fuse_clouds(parts)
        save_ply(path, fused)
        print(f"snapshot {path}: {len(fused)} points from {len(parts)} cameras", flush=True)

    # -- periodic stats -------------------------------------------------------

    def print_stats(self, now: float) -> None:
        mark_time, mark_bytes = self._stats_mark
        interval = now - mark_time
        if interval <= 0:
            return
        total = self.client.total_bytes()
        mbps = (total - mark_bytes) * 8 / interval / 1e6
        self._stats_mark = (now, total)
        cams = []
        for camera_id, box in sorted(self.client.mailboxes.items()):
            st = box.stats
            prev_recv, prev_skip = self._camera_marks.get(camera_id, (0, 0))
            fps = (st.received - prev_recv) / interval
            cams.append(f"cam {camera_id}: {fps:.1f} fps, {st.skipped - prev_skip} skipped")
            self._camera_marks[camera_id] = (st.received, st.skipped)
        predicted = self.predicted_mbps()
        line = " | ".join(
            [f"stats: {self.ticks} ticks, {self.last_confirmed} outputs"]
            + cams
            + [f"{mbps:.2f} Mbps (predicted {predicted:.2f})"]
        )
        print(line, flush=True)

    def mean_packet_bytes(self) -> float:
        packets = self.client.total_packets()
        return self.client.total_bytes() / packets if packets else 0.0

    def predicted_mbps(self) -> float:
        n = len(self.client.mailboxes)
        mean = self.mean_packet_bytes()
        if n == 0 or mean <= 0:
            return 0.0
        model = BandwidthModel(N=n, D=max(1, int(round(mean))), F=int(round(self.args.fps)))
        return bandwidth(model) / 1e6

    def summary(self, now: float) -> dict:
        elapsed = now - self.start
        streamed = now - self.first_byte_at if self.first_byte_at is not None else 0.0
        cameras = {}
        for camera_id, box in sorted(self.client.mailboxes.items()):
            st = box.stats
            cameras[str(camera_id)] = {
                "received": st.received,
                "taken": st.taken,
                "skipped": st.skipped,
                "dropped_gap": st.dropped_gap,
                "skip_rate": st.skipped / st.received if st.received else 0.0,
            }
        total = self.client.total_bytes()
        return {
            "ticks": self.ticks,
            "duration_s": elapsed,
            "ticks_per_s": self.ticks / elapsed if elapsed > 0 else 0.0,
            "cameras": cameras,
            "bytes_received": total,
            "packets": self.client.total_packets(),
            "mean_packet_bytes": self.mean_packet_bytes(),
            "bandwidth_mbps_measured": total * 8 / streamed / 1e6 if streamed > 0 else 0.0,
            "bandwidth_mbps_predicted": self.predicted_mbps(),
            "outputs_confirmed": self.last_confirmed,
            "labels": {
                str(out.output_id): out.label
                for out in self.tracker.outputs.values() if out.label
            },
        }

    # -- main loop ------------------------------------------------------------

    def run(self) -> int:
        args = self.args
        if args.server:
            for spec in args.server:
                self._connect(_parse_endpoint(spec), "server")
        else:
            self.registry = RegistryClient(resolve_registry_endpoint(args.registry))
        if args.record:
            self.recorder = RecordingWriter(
                args.record, fps=int(round(args.fps)),
                start_timestamp_us=time.time_ns() // 1000,
            )
        commands = _CommandReader()
        commands.start()

        period = 1.0 / args.fps
        deadline = None if args.duration is None else self.start + args.duration
        next_tick = self.start
        next_stats = self.start + args.stats_interval
        code = EXIT_OK
        try:
            while not self._stop:
                now = time.monotonic()
                if deadline is not None and now >= deadline:
                    break
                if now < next_tick:
                    time.sleep(min(next_tick - now, period))
                    continue
                next_tick += period
                if now - next_tick > 1.0:
                    next_tick = now + period  # resync after a stall
                self.poll_registry(now)
                while True:
                    try:
                        self.handle_command(commands.lines.get_nowait())
                    except queue.Empty:
                        break
                if self.first_byte_at is None and self.client.total_bytes() > 0:
                    self.first_byte_at = time.monotonic()
                views = self.client.take_fresh()
                inputs = {cid: view.skeletons() for cid, view in views.items()}
                outputs = self.tracker.ingest_frame(inputs)
                self.ticks += 1
                confirmed = [
                    out for out in outputs
                    if out.state is TrackState.CONFIRMED and len(out.joints) == JOINT_COUNT
                ]
                self.last_confirmed = len(confirmed)
                if self.recorder is not None:
                    self.recorder.write_frame(self.tracker.frame_index, confirmed)
                if now >= next_stats:
                    self.print_stats(now)
                    next_stats = now + args.stats_interval
        except KeyboardInterrupt:
            pass
        except MissingCalibrationError as exc:
            code = _fail(str(exc))
        finally:
            end = time.monotonic()
            self.client.stop()
            if self.recorder is not None:
                self.recorder.close()
            if args.summary_json:
                with open(args.summary_json, "w", encoding="utf-8") as fh:
                    json.dump(self.summary(end), fh, indent=2)
                    fh.write("\n")
        return code


def cmd_monitor(args: argparse.Namespace) -> int:
    try:
        calibrations = load_calibration(args.calibration)
    except (OSError, ValueError) as exc:
        return _fail(f"cannot load calibration {args.calibration}: {exc}")
    if not calibrations:
        return _fail(f"calibration file {args.calibration} is empty")
    side_map = None
    if args.side_map:
        try:
            side_map = _load_side_map(args.side_map)
        except (OSError, ValueError) as exc:
            return _fail(f"cannot load side map {args.side_map}: {exc}")
    try:
        monitor = _Monitor(args, calibrations, side_map)
    except ValueError as exc:
        return _fail(str(exc))
    return monitor.run()


# ---------------------------------------------------------------------------
# calibrate


def cmd_calibrate(args: argparse.Namespace) -> int:
    transforms: dict[int, RigidTransform] = {args.reference: RigidTransform.identity()}
    print(f"camera {args.reference}: reference (identity)")
    try:
        for spec in args.pairs:
            cam_text, sep, path = spec.partition("=")
            if not sep:
                return _fail(f"expected CAMERA=FILE, got {spec!r}")
            camera_id = int(cam_text)
            pairs = load_correspondences(path)
            transform = fit_rigid(pairs)
            a = np.array([p.point_a for p in pairs])
            b = np.array([p.point_b for p in pairs])
            rms = float(np.sqrt(np.mean(np.sum((transform.apply(a) - b) ** 2, axis=1))))
            transforms[camera_id] = transform
            print(f"camera {camera_id}: rms {rms:.4f} m over {len(pairs)} points")
        for spec in args.clouds or []:
            cam_text, sep, rest = spec.partition("=")
            src, sep2, dst = rest.partition(":")
            if not (sep and sep2):
                return _fail(f"expected CAMERA=SOURCE.ply:TARGET.ply, got {spec!r}")
            camera_id = int(cam_text)
            if camera_id not in transforms:
                return _fail(f"--clouds camera {camera_id} has no initial transform")
            result = icp_refine(load_ply(src), load_ply(dst), transforms[camera_id])
            transforms[camera_id] = result.transform
            rms = result.rms_trace[-1] if result.rms_trace else 0.0
            print(f"camera {camera_id}: icp rms {rms:.4f} m "
                  f"after {result.iterations} iterations")
    except DegenerateGeometryError as exc:
        return _fail(f"degenerate geometry: {exc}", EXIT_DEGENERATE)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    save_calibration(args.output, transforms)
    print(f"wrote calibration for {len(transforms)} cameras to {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# replay


def cmd_replay(args: argparse.Namespace) -> int:
    writer = None
    try:
        with RecordingReader(args.recording) as reader:
            print(f"recording: fps {reader.fps}, start {reader.start_timestamp_us} us")
            if args.rewrite:
                writer = RecordingWriter(args.rewrite, reader.fps, reader.start_timestamp_us)
            frames = 0
            skeletons_seen = 0
            for frame_index, skeletons in reader.frames():
                if args.limit is not None and frames >= args.limit:
                    break
                frames += 1
                skeletons_seen += len(skeletons)
                if writer is not None:
                    writer.write_frame(frame_index, skeletons)
                if args.quiet:
                    continue
                print(f"frame {frame_index}: {len(skeletons)} skeletons")
                for skel in skeletons:
                    com = compute_center_of_mass(skel.joints)
                    label = skel.label or "-"
                    print(f"  id {skel.output_id} {label} "
                          f"com {com[0]:.3f} {com[1]:.3f} {com[2]:.3f}")
            print(f"replayed {frames} frames, {skeletons_seen} skeletons")
    except RecordingError as exc:
        return _fail(str(exc))
    except OSError as exc:
        return _fail(f"cannot read {args.recording}: {exc}")
    finally:
        if writer is not None:
            writer.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# plan / bandwidth


def cmd_plan(args: argparse.Namespace) -> int:
    try:
        plan = plan_layout(args.depth, hfov_deg=args.hfov, overlap=args.overlap,
                           camera_count=args.cameras, mount_height=args.mount_height)
    except ValueError as exc:
        return _fail(str(exc))
    print(f"coverage depth {plan.coverage_depth_d:g} m, "
          f"half-width {plan.half_width_h:.2f} m")
    print(f"camera spacing {plan.camera_spacing:.2f} m "
          f"(overlap {plan.overlap:g} m, mount height {plan.mount_height:g} m)")
    for placement in plan.placements:
        print(f"camera {placement.index}: {placement.along_m:.2f} m along corridor, "
              f"{placement.side} wall")
    for cam_a, side_a, cam_b, side_b in plan.side_links:
        print(f"handoff: camera {cam_a} {side_a} -> camera {cam_b} {side_b}")
    return EXIT_OK


def cmd_bandwidth(args: argparse.Namespace) -> int:
    counts = [args.cameras] if args.cameras else [1, 2, 3, 4, 5]
    for n in counts:
        bits = bandwidth(BandwidthModel(N=n, D=args.frame_bytes, F=args.fps))
        print(f"{n} cameras: {bits / 1e6:g} Mbps")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthgrid",
        description="Distributed depth-camera simulation, streaming, and fusion tools.",
    )
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("registry", help="run the camera-server registry")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=DEFAULT_REGISTRY_PORT)
    p.add_argument("--duration", type=float, default=None,
                   help="exit after this many seconds (default: run until SIGINT)")
    p.set_defaults(func=cmd_registry)

    p = sub.add_parser("serve", help="run a simulated sensor server")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--cameras", default="",
                   help="comma-separated camera ids (default: all in scene)")
    p.add_argument("--name", default="", help="registry name (default: sensor-<port>)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0, help="stream port (default: ephemeral)")
    p.add_argument("--registry", default=None, help="registry HOST:PORT")
    p.add_argument("--no-registry", action="store_true",
                   help="serve without registering")
    p.add_argument("--fps", type=float, default=0.0,
                   help="override the scene frame rate")
    p.add_argument("--duration", type=float, default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("monitor", help="fuse streams into labeled output skeletons")
    p.add_argument("--calibration", required=True,
                   help="camera-to-world calibration file")
    p.add_argument("--registry", default=None, help="registry HOST:PORT")
    p.add_argument("--server", action="append", default=[],
                   help="connect directly to HOST:PORT (repeatable; skips registry)")
    p.add_argument("--fps", type=float, default=30.0, help="fusion tick rate")
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--record", default="", help="write confirmed skeletons to this file")
    p.add_argument("--summary-json", default="",
                   help="write a run summary JSON on exit")
    p.add_argument("--side-map", default="",
                   help="JSON file of [cam_a, side_a, cam_b, side_b] handoff pairings")
    p.add_argument("--subsample", type=int, choices=(1, 2, 3, 4), default=2,
                   help="snapshot point decimation factor")
    p.add_argument("--stats-interval", type=float, default=1.0)
    p.add_argument("--poll-interval", type=float, default=2.0,
                   help="registry discovery period in seconds")
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("calibrate", help="fit camera-to-reference transforms")
    p.add_argument("--reference", type=int, required=True,
                   help="camera id fixed to the identity")
    p.add_argument("--pairs", nargs="+", required=True, metavar="CAMERA=FILE",
                   help="correspondence JSON per camera")
    p.add_argument("--clouds", nargs="*", default=[], metavar="CAMERA=SRC.ply:DST.ply",
                   help="optional ICP refinement cloud pairs")
    p.add_argument("--output", required=True, help="calibration file to write")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("replay", help="print or rewrite a skeleton recording")
    p.add_argument("recording", help="recording file")
    p.add_argument("--rewrite", default="", help="write a verified copy here")
    p.add_argument("--limit", type=int, default=None, help="stop after N frames")
    p.add_argument("--quiet", action="store_true", help="suppress per-frame lines")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("plan", help="plan corridor camera placement")
    p.add_argument("--depth", type=float, required=True,
                   help="coverage depth d in meters")
    p.add_argument("--hfov", type=float, default=57.5)
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--cameras", type=int, default=0,
                   help="number of cameras to place (default: spacing only)")
    p.add_argument("--mount-height", type=float, default=1.85)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("bandwidth", help="print the streaming bandwidth model")
    p.add_argument("--cameras", type=int, default=0,
                   help="camera count (default: table for 1..5)")
    p.add_argument("--frame-bytes", type=int, default=70000)
    p.add_argument("--fps", type=int, default=30)
    p.set_defaults(func=cmd_bandwidth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
