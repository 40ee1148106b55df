"""Checkpoints, PLY interchange and the on-disk dataset layout."""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .config import PipelineConfig
from .optim import AdamState
from .scene import FIELDS, Camera, FrameSet, GaussianCloud, segment_frames

MAGIC = b"RGS1"
VERSION = 1
SH_C0 = 0.28209479177387814


class CheckpointFormatError(ValueError):
    pass


class CheckpointVersionError(CheckpointFormatError):
    pass


# checkpoints --------------------------------------------------------------------

def _arrays_of_state(state) -> Dict[str, np.ndarray]:
    arrays: Dict[str, np.ndarray] = {}
    cloud = state.cloud
    for f in FIELDS:
        arrays[f"cloud.{f}"] = getattr(cloud, f).detach().double().numpy()
    arrays["cloud.group"] = cloud.group.numpy().astype(np.int64)
    arrays["cloud.segment"] = cloud.segment.numpy().astype(np.int64)
    for i, (gain, bias) in enumerate(state.camera_colors):
        arrays[f"camera.{i}.gain"] = gain.detach().double().numpy()
        arrays[f"camera.{i}.bias"] = bias.detach().double().numpy()
    if state.motion is not None:
        for k, v in state.motion.state_dict().items():
            arrays[f"motion.{k}"] = v.detach().double().numpy()
    if state.optimizer is not None:
        for k, v in state.optimizer.exp_avg.items():
            arrays[f"adam.exp_avg.{k}"] = v.detach().double().numpy()
        for k, v in state.optimizer.exp_avg_sq.items():
            arrays[f"adam.exp_avg_sq.{k}"] = v.detach().double().numpy()
    return arrays


def encode_checkpoint(state) -> bytes:
    arrays = _arrays_of_state(state)
    index, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        kind = "i8" if a.dtype.kind in "iu" else "f8"
        data = a.astype("<" + kind).tobytes()
        index.append({"name": name, "dtype": kind, "shape": list(a.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    segs = [[s.index, s.start, s.end, list(s.selected_frames)] for s in state.segments]
    header = {
        "config": state.cfg.to_dict(),
        "config_digest": state.cfg.digest(),
        "stage": state.stage,
        "frame_count": state.frame_count,
        "generation": state.cloud.generation,
        "segments": segs,
        "has_motion": state.motion is not None,
        "adam_steps": dict(sorted(state.optimizer.steps.items())) if state.optimizer is not None else None,
        "losses": {str(k): v for k, v in sorted(state.losses.items())},
        "report": state.report,
        "arrays": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(blobs)
    body = struct.pack("<I", len(head)) + head + payload
    return MAGIC + struct.pack("<I", VERSION) + body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes, cfg: Optional[PipelineConfig] = None):
    from .pipeline import PipelineState, make_field

    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    body, tail = data[8:-4], data[-4:]
    if len(tail) < 4 or struct.unpack("<I", tail)[0] != zlib.crc32(body):
        raise CheckpointFormatError("checkpoint is truncated or corrupt (checksum mismatch)")
    (hlen,) = struct.unpack("<I", body[:4])
    try:
        header = json.loads(body[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint header: {exc}") from None
    payload = body[4 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointFormatError(f"array {e['name']} is truncated")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<" + e["dtype"]).reshape(e["shape"]).copy()

    saved = PipelineConfig.from_dict(header["config"])
    if cfg is not None and cfg.digest() != header["config_digest"]:
        warnings.warn("config differs from the checkpoint's; using the checkpoint's config", RuntimeWarning)
    t = lambda k: torch.from_numpy(arrays[k])
    cloud = GaussianCloud(t("cloud.position"), t("cloud.log_scale"), t("cloud.rotation"),
                          t("cloud.opacity_logit"), t("cloud.color"), mask_logit=t("cloud.mask_logit"),
                          gamma=t("cloud.gamma"), group=t("cloud.group"), segment=t("cloud.segment"),
                          sh=t("cloud.sh"), generation=header["generation"])
    n_cams = sum(1 for k in arrays if k.startswith("camera.") and k.endswith(".gain"))
    cams = [(t(f"camera.{i}.gain"), t(f"camera.{i}.bias")) for i in range(n_cams)]
    motion = None
    if header["has_motion"]:
        motion = make_field(saved, cloud).double()
        state_dict = {k[len("motion."):]: t(k) for k in arrays if k.startswith("motion.")}
        motion.load_state_dict(state_dict)
    optimizer = None
    if header["adam_steps"] is not None:
        optimizer = AdamState(group_beta2={"mask-logits": saved.lr.mask_beta2})
        optimizer.steps = {k: int(v) for k, v in header["adam_steps"].items()}
        for k in arrays:
            if k.startswith("adam.exp_avg."):
                optimizer.exp_avg[k[len("adam.exp_avg."):]] = t(k)
            elif k.startswith("adam.exp_avg_sq."):
                optimizer.exp_avg_sq[k[len("adam.exp_avg_sq."):]] = t(k)
    state = PipelineState(saved, header["stage"], cloud, header["frame_count"], cams, motion, optimizer,
                          {int(k): list(v) for k, v in header["losses"].items()}, header["report"])
    table = [[s.index, s.start, s.end, list(s.selected_frames)] for s in state.segments]
    if table != header["segments"]:
        raise CheckpointFormatError("segment table does not match the stored config")
    return state


def save_checkpoint(state, path) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path, cfg: Optional[PipelineConfig] = None):
    return decode_checkpoint(Path(path).read_bytes(), cfg)


# PLY ----------------------------------------------------------------------------

def _ply_properties(n_rest: int) -> List[Tuple[str, str]]:
    props = [("x", "f"), ("y", "f"), ("z", "f"), ("nx", "f"), ("ny", "f"), ("nz", "f"),
             ("f_dc_0", "f"), ("f_dc_1", "f"), ("f_dc_2", "f")]
    props += [(f"f_rest_{i}", "f") for i in range(n_rest)]
    props += [("opacity", "f"), ("scale_0", "f"), ("scale_1", "f"), ("scale_2", "f"),
              ("rot_0", "f"), ("rot_1", "f"), ("rot_2", "f"), ("rot_3", "f"),
              ("mask_logit", "f"), ("group_id", "i"), ("segment_id", "i"),
              ("color_0", "f"), ("color_1", "f"), ("color_2", "f"),
              ("gamma_0", "f"), ("gamma_1", "f"), ("gamma_2", "f")]
    return props


PLY_TYPES = {("f", "float"): "<f4", ("f", "double"): "<f8", ("i", "float"): "<i4", ("i", "double"): "<i4"}
PLY_NAMES = {"<f4": "float", "<f8": "double", "<i4": "int"}


def export_ply(cloud: GaussianCloud, path, precision: str = "float") -> None:
    """Binary little-endian PLY in the 3DGS layout plus relay-specific fields.

    Colors go out as degree-0 SH coefficients (rgb - 0.5) / C0 and, for an
    exact round trip, verbatim as ``color_*``; ``f_rest_*`` hold the
    degree-1 coefficients channel-major.
    """
    if precision not in ("float", "double"):
        raise ValueError("precision must be 'float' or 'double'")
    n = len(cloud)
    sh = cloud.sh.detach().double().numpy()  # (N, coeff, channel)
    n_rest = sh.shape[1] * 3
    props = _ply_properties(n_rest)
    dtype = np.dtype([(name, PLY_TYPES[(kind, precision)]) for name, kind in props])
    rec = np.zeros(n, dtype=dtype)
    pos = cloud.position.detach().double().numpy()
    for i, ax in enumerate("xyz"):
        rec[ax] = pos[:, i]
    col = (cloud.color.detach().double().numpy() - 0.5) / SH_C0
    raw = cloud.color.detach().double().numpy()
    for i in range(3):
        rec[f"f_dc_{i}"] = col[:, i]
        rec[f"color_{i}"] = raw[:, i]
    rest = sh.transpose(0, 2, 1).reshape(n, n_rest)
    for i in range(n_rest):
        rec[f"f_rest_{i}"] = rest[:, i]
    rec["opacity"] = cloud.opacity_logit.detach().double().numpy()
    scale = cloud.log_scale.detach().double().numpy()
    rot = cloud.rotation.detach().double().numpy()
    gamma = cloud.gamma.detach().double().numpy()
    for i in range(3):
        rec[f"scale_{i}"] = scale[:, i]
        rec[f"gamma_{i}"] = gamma[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = rot[:, i]
    rec["mask_logit"] = cloud.mask_logit.detach().double().numpy()
    rec["group_id"] = cloud.group.numpy()
    rec["segment_id"] = cloud.segment.numpy()
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property {PLY_NAMES[dtype[name].str]} {name}" for name, _ in props]
    lines.append("end_header")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii") + rec.tobytes())


def import_ply(path) -> GaussianCloud:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise ValueError("not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError("only binary little-endian PLY is supported")
    n = None
    fields = []
    rev = {"float": "<f4", "double": "<f8", "int": "<i4"}
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            fields.append((parts[2], rev[parts[1]]))
    rec = np.frombuffer(data[end + len(b"end_header\n"):], dtype=np.dtype(fields), count=n)
    col = lambda *names: np.stack([rec[k].astype(np.float64) for k in names], axis=1)
    n_rest = sum(1 for name, _ in fields if name.startswith("f_rest_"))
    rest = col(*[f"f_rest_{i}" for i in range(n_rest)]) if n_rest else np.zeros((n, 0))
    sh = rest.reshape(n, 3, n_rest // 3).transpose(0, 2, 1) if n_rest else None
    names = {name for name, _ in fields}
    if {"color_0", "color_1", "color_2"} <= names:
        color = col("color_0", "color_1", "color_2")
    else:
        color = col("f_dc_0", "f_dc_1", "f_dc_2") * SH_C0 + 0.5
    return GaussianCloud(torch.from_numpy(col("x", "y", "z")), col("scale_0", "scale_1", "scale_2"),
                         col("rot_0", "rot_1", "rot_2", "rot_3"), rec["opacity"].astype(np.float64), color,
                         mask_logit=rec["mask_logit"].astype(np.float64),
                         gamma=col("gamma_0", "gamma_1", "gamma_2"),
                         group=rec["group_id"].astype(np.int64), segment=rec["segment_id"].astype(np.int64),
                         sh=sh)


# dataset directory ----------------------------------------------------------------

def _fmt(v) -> str:
    return " ".join(repr(float(x)) for x in np.asarray(v, dtype=np.float64).reshape(-1))


def write_cameras(cameras: Sequence[Camera], path) -> None:
    lines = [f"count = {len(cameras)}"]
    for i, c in enumerate(cameras):
        lines += [f"[camera {i}]", f"fx = {c.fx!r}", f"fy = {c.fy!r}", f"cx = {c.cx!r}", f"cy = {c.cy!r}",
                  f"width = {c.width}", f"height = {c.height}", f"rotation = {_fmt(c.rotation)}",
                  f"translation = {_fmt(c.translation)}"]
    Path(path).write_text("\n".join(lines) + "\n")


def _sections(text: str) -> Tuple[Dict[str, str], List[Dict[str, str]]]:
    top: Dict[str, str] = {}
    sections: List[Dict[str, str]] = []
    cur = top
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            cur = {"__name__": line[1:-1].strip()}
            sections.append(cur)
            continue
        if "=" not in line:
            raise ValueError(f"malformed line {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        cur[k] = v
    return top, sections


def read_cameras(path) -> List[Camera]:
    top, secs = _sections(Path(path).read_text())
    cams = []
    for s in secs:
        nums = lambda k: [float(x) for x in s[k].split()]
        cams.append(Camera(float(s["fx"]), float(s["fy"]), float(s["cx"]), float(s["cy"]), int(s["width"]),
                           int(s["height"]), np.array(nums("rotation")).reshape(3, 3), np.array(nums("translation"))))
    if "count" in top and int(top["count"]) != len(cams):
        raise ValueError("camera count does not match the number of camera sections")
    return cams


def write_png(img: torch.Tensor, path) -> None:
    arr = np.round(np.clip(img.detach().double().numpy(), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path, format="PNG", optimize=False, compress_level=6)


def read_png(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return torch.from_numpy(arr / 255.0)


def write_labels(labels: Dict[str, np.ndarray], path, extra: Optional[Dict[str, str]] = None) -> None:
    lines = [f"{k} = {_fmt(v) if np.asarray(v).dtype.kind == 'f' else ' '.join(str(int(x)) for x in np.asarray(v).reshape(-1))}"
             for k, v in sorted(labels.items())]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_labels(path) -> Dict[str, str]:
    top, _ = _sections(Path(path).read_text())
    return top


def write_dataset(frames: FrameSet, out, labels: Optional[Dict[str, np.ndarray]] = None,
                  extra: Optional[Dict[str, str]] = None) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_cameras(frames.cameras, out / "cams.cfg")
    for (cam, frame), img in sorted(frames.images.items()):
        d = out / "frames" / str(cam)
        d.mkdir(parents=True, exist_ok=True)
        write_png(img, d / f"{frame:04d}.png")
    write_labels(labels or {}, out / "labels.cfg", {"frame_count": str(frames.frame_count), **(extra or {})})


def read_dataset(root) -> FrameSet:
    root = Path(root)
    if not (root / "cams.cfg").is_file():
        raise FileNotFoundError(f"{root / 'cams.cfg'} not found")
    cams = read_cameras(root / "cams.cfg")
    images = {}
    frame_count = 0
    for cam_dir in sorted((root / "frames").iterdir()):
        if not cam_dir.is_dir():
            continue
        cam = int(cam_dir.name)
        for png in sorted(cam_dir.glob("*.png")):
            frame = int(png.stem)
            images[(cam, frame)] = read_png(png)
            frame_count = max(frame_count, frame)
    labels = root / "labels.cfg"
    if labels.is_file():
        frame_count = int(read_labels(labels).get("frame_count", frame_count))
    return FrameSet(cams, images, frame_count)
