"""File formats: scene bundles, label/probability grids, model weights,
metric reports.

Binary containers share one envelope: an ASCII magic, a little-endian
u32 format version, a u64 body length, the body itself, and a trailing
CRC-32 of the body. Readers validate magic, version, length, and
checksum before touching any payload, and every writer goes through a
write-to-temp-then-rename so partially written files never appear under
the final name.

Label grids are stored as binary PGM (P5) images plus a JSON sidecar
(`<path>.json`) holding the grid geometry, so any image viewer can
inspect them. Category-to-byte mapping: Free=0, Occupied=255,
Unobserved=192, Ignore=96.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from typing import BinaryIO

import numpy as np

from .grid import FREE, IGNORE, OCCUPIED, UNOBSERVED, GridSpec, LabelGrid, Pose2
from .metrics import MetricsReport
from .occnet import OccNetModel
from .scene import LidarSweep, RadarFrame, SceneBundle, SensorMount

SCENE_MAGIC = b"RGSB"
MODEL_MAGIC = b"OCNM"
SCENE_VERSION = 1
MODEL_VERSION = 1

_BYTE_OF_CAT = {FREE: 0, OCCUPIED: 255, UNOBSERVED: 192, IGNORE: 96}
_CAT_OF_BYTE = {v: k for k, v in _BYTE_OF_CAT.items()}


class FormatError(ValueError):
    """File contents do not match the expected format."""


class MagicError(FormatError):
    """Leading magic bytes are wrong (not this file type)."""


class VersionError(FormatError):
    """Recognized file type but unsupported format version."""


class ChecksumError(FormatError):
    """Body bytes do not match the stored CRC-32."""


class TruncatedError(FormatError):
    """File ends before the declared length."""


def _atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp_", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedError(f"file ends inside {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_container(path: str, magic: bytes, version: int) -> bytes:
    with open(path, "rb") as f:
        got = _read_exact(f, 4, "magic")
        if got != magic:
            raise MagicError(f"bad magic {got!r}, expected {magic!r}")
        (ver,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if ver != version:
            raise VersionError(f"unsupported version {ver}, expected {version}")
        (body_len,) = struct.unpack("<Q", _read_exact(f, 8, "body length"))
        body = _read_exact(f, body_len, "body")
        (crc,) = struct.unpack("<I", _read_exact(f, 4, "checksum"))
    if zlib.crc32(body) != crc:
        raise ChecksumError("body checksum mismatch; file is corrupt")
    return body


def _wrap_container(magic: bytes, version: int, body: bytes) -> bytes:
    return (
        magic
        + struct.pack("<I", version)
        + struct.pack("<Q", len(body))
        + body
        + struct.pack("<I", zlib.crc32(body))
    )


def _json_block(obj) -> bytes:
    payload = json.dumps(obj, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(payload)) + payload


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"body ends inside {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f64(self, what: str) -> float:
        return struct.unpack("<d", self.take(8, what))[0]

    def f64_array(self, shape: tuple[int, ...], what: str) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        raw = self.take(8 * n, what)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    def done(self, what: str) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes after {what}")


# ---------------------------------------------------------------------------
# scene bundles


def _grid_to_dict(spec: GridSpec) -> dict:
    return {
        "h": spec.h,
        "w": spec.w,
        "res_x": spec.res_x,
        "res_y": spec.res_y,
        "x0": spec.x0,
        "y0": spec.y0,
    }


def _grid_from_dict(d: dict) -> GridSpec:
    try:
        return GridSpec(
            int(d["h"]), int(d["w"]),
            float(d["res_x"]), float(d["res_y"]),
            float(d["x0"]), float(d["y0"]),
        )
    except KeyError as e:
        raise FormatError(f"grid header missing field {e}") from e


def write_scene(path: str, scene: SceneBundle) -> None:
    radar_ids = scene.radar_ids
    header = {
        "grid": _grid_to_dict(scene.spec),
        "seed": scene.seed,
        "n_steps": scene.n_steps,
        "radar_ids": radar_ids,
        "mounts": [
            {
                "sensor_id": m.sensor_id,
                "kind": m.kind,
                "pose": [m.pose.x, m.pose.y, m.pose.yaw],
            }
            for m in scene.mounts
        ],
    }
    chunks = [_json_block(header)]
    for t in range(scene.n_steps):
        ego = scene.ego_poses[t]
        chunks.append(struct.pack("<3d", ego.x, ego.y, ego.yaw))
        sweep = scene.lidar_sweeps[t]
        chunks.append(struct.pack("<Id", len(sweep.points), sweep.timestamp))
        chunks.append(np.ascontiguousarray(sweep.points, dtype="<f8").tobytes())
        for sid in radar_ids:
            fr = scene.radar_frames[sid][t]
            chunks.append(struct.pack("<Id", len(fr.points), fr.timestamp))
            chunks.append(np.ascontiguousarray(fr.points, dtype="<f8").tobytes())
    _atomic_write(path, _wrap_container(SCENE_MAGIC, SCENE_VERSION, b"".join(chunks)))


def read_scene(path: str) -> SceneBundle:
    body = _read_container(path, SCENE_MAGIC, SCENE_VERSION)
    cur = _Cursor(body)
    hlen = cur.u32("header length")
    try:
        header = json.loads(cur.take(hlen, "header").decode("utf-8"))
    except ValueError as e:
        raise FormatError(f"scene header is not valid JSON: {e}") from e
    spec = _grid_from_dict(header["grid"])
    mounts = [
        SensorMount(m["sensor_id"], Pose2(*m["pose"]), m["kind"]) for m in header["mounts"]
    ]
    radar_ids = list(header["radar_ids"])
    n_steps = int(header["n_steps"])

    ego_poses: list[Pose2] = []
    sweeps: list[LidarSweep] = []
    frames: dict[str, list[RadarFrame]] = {sid: [] for sid in radar_ids}
    for t in range(n_steps):
        x, y, yaw = struct.unpack("<3d", cur.take(24, f"ego pose {t}"))
        ego_poses.append(Pose2(x, y, yaw))
        n = cur.u32(f"lidar count {t}")
        ts = cur.f64(f"lidar timestamp {t}")
        sweeps.append(LidarSweep(ts, cur.f64_array((n, 3), f"lidar points {t}")))
        for sid in radar_ids:
            n = cur.u32(f"radar count {t}/{sid}")
            ts = cur.f64(f"radar timestamp {t}/{sid}")
            frames[sid].append(
                RadarFrame(ts, sid, cur.f64_array((n, 4), f"radar points {t}/{sid}"))
            )
    cur.done("scene records")
    return SceneBundle(
        spec=spec,
        seed=int(header["seed"]),
        mounts=mounts,
        ego_poses=ego_poses,
        lidar_sweeps=sweeps,
        radar_frames=frames,
    )


# ---------------------------------------------------------------------------
# label grids (PGM + JSON sidecar)


def write_grid(path: str, grid: LabelGrid) -> None:
    lut = np.zeros(4, dtype=np.uint8)
    for cat, byte in _BYTE_OF_CAT.items():
        lut[cat] = byte
    img = lut[grid.cells]
    header = f"P5\n{grid.spec.w} {grid.spec.h}\n255\n".encode("ascii")
    _atomic_write(path, header + img.tobytes())
    sidecar = {
        "grid": _grid_to_dict(grid.spec),
        "byte_map": {str(byte): int(cat) for cat, byte in _BYTE_OF_CAT.items()},
    }
    _atomic_write(path + ".json", (json.dumps(sidecar, sort_keys=True, indent=2) + "\n").encode())


def read_grid(path: str) -> LabelGrid:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise MagicError("not a binary PGM (P5) file")
    # header: P5, width height, maxval, then a single whitespace byte
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedError("PGM header ends early")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(x) for x in fields)
    except ValueError as e:
        raise FormatError(f"bad PGM header: {e}") from e
    if maxval != 255:
        raise FormatError(f"expected maxval 255, got {maxval}")
    pix = raw[pos:]
    if len(pix) < h * w:
        raise TruncatedError(f"PGM pixel data: wanted {h * w} bytes, got {len(pix)}")
    img = np.frombuffer(pix[: h * w], dtype=np.uint8).reshape(h, w)

    try:
        with open(path + ".json", "r", encoding="utf-8") as f:
            sidecar = json.load(f)
    except FileNotFoundError as e:
        raise FormatError(f"missing grid sidecar {path + '.json'}") from e
    except ValueError as e:
        raise FormatError(f"grid sidecar is not valid JSON: {e}") from e
    spec = _grid_from_dict(sidecar["grid"])
    if (spec.h, spec.w) != (h, w):
        raise FormatError(
            f"sidecar grid {spec.h}x{spec.w} does not match image {h}x{w}"
        )
    inv = np.full(256, 255, dtype=np.uint16)
    for byte_str, cat in sidecar["byte_map"].items():
        inv[int(byte_str)] = int(cat)
    cats = inv[img]
    if (cats > 3).any():
        bad = int(img.reshape(-1)[np.argmax(cats.reshape(-1) > 3)])
        raise FormatError(f"pixel value {bad} not present in the sidecar byte map")
    return LabelGrid(spec, cats.astype(np.uint8))


# ---------------------------------------------------------------------------
# probability grids


def write_prob_grid(path: str, spec: GridSpec, probs: np.ndarray) -> None:
    probs = np.asarray(probs, dtype="<f8")
    if probs.shape != (spec.h, spec.w):
        raise ValueError(f"probability grid shape {probs.shape} != {(spec.h, spec.w)}")
    body = _json_block({"grid": _grid_to_dict(spec)}) + np.ascontiguousarray(probs).tobytes()
    _atomic_write(path, _wrap_container(b"RGPB", 1, body))


def read_prob_grid(path: str) -> tuple[GridSpec, np.ndarray]:
    body = _read_container(path, b"RGPB", 1)
    cur = _Cursor(body)
    hlen = cur.u32("header length")
    header = json.loads(cur.take(hlen, "header").decode("utf-8"))
    spec = _grid_from_dict(header["grid"])
    probs = cur.f64_array((spec.h, spec.w), "probabilities")
    cur.done("probability grid")
    return spec, probs


# ---------------------------------------------------------------------------
# model weights


def write_model(path: str, model: OccNetModel) -> None:
    names = sorted(model.params)
    header = {
        "in_channels": model.in_channels,
        "widths": list(model.widths),
        "n_classes": model.n_classes,
        "seed": model.seed,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    chunks = [_json_block(header)]
    for n in names:
        chunks.append(np.ascontiguousarray(model.params[n], dtype="<f4").tobytes())
    _atomic_write(path, _wrap_container(MODEL_MAGIC, MODEL_VERSION, b"".join(chunks)))


def read_model(path: str) -> OccNetModel:
    body = _read_container(path, MODEL_MAGIC, MODEL_VERSION)
    cur = _Cursor(body)
    hlen = cur.u32("header length")
    try:
        header = json.loads(cur.take(hlen, "header").decode("utf-8"))
    except ValueError as e:
        raise FormatError(f"model header is not valid JSON: {e}") from e
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(int(s) for s in entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        raw = cur.take(4 * n, f"weights for {entry['name']}")
        params[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    cur.done("model weights")
    return OccNetModel(
        in_channels=int(header["in_channels"]),
        widths=tuple(int(w) for w in header["widths"]),
        n_classes=int(header["n_classes"]),
        seed=int(header["seed"]),
        params=params,
    )


# ---------------------------------------------------------------------------
# reports


def write_report(path: str, report: MetricsReport) -> None:
    _atomic_write(
        path, (json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n").encode("utf-8")
    )


def read_report(path: str) -> MetricsReport:
    with open(path, "r", encoding="utf-8") as f:
        try:
            d = json.load(f)
        except ValueError as e:
            raise FormatError(f"report is not valid JSON: {e}") from e
    return MetricsReport.from_dict(d)
