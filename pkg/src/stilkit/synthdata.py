"""Synthetic forged-video clips.

A "real" clip is a striped Gaussian blob (the face proxy) drifting along a
slow sinusoidal path over a static noise background.  A "fake" clip applies
one or both forgery artefacts:

* temporal: the face is re-rendered each frame at an i.i.d. integer offset
  of up to ``jitter_px`` pixels;
* spatial: a re-textured copy of the face is alpha-blended into a rectangle
  around it, with a 2-pixel linear ramp at the seam.

Clips are a pure function of (seed, spec).  Frames are stored as float32.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import tensor as tn

REAL, FAKE = 0, 1
LUMA = np.array([0.299, 0.587, 0.114])
SEAM_PX = 2.0


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ClipSpec:
    length: int = 64
    height: int = 64
    width: int = 64
    label: int = REAL
    jitter_px: int = 0
    blend: bool = False
    # motion amplitude range in pixels; 0 gives a static clip
    amplitude: float = 3.0
    # patch side as a fraction of the frame for blended fakes
    patch_frac: float = 0.55

    def __post_init__(self):
        if self.length < 2:
            raise SpecError(f"clip length must be >= 2, got {self.length}")
        if self.height < 8 or self.width < 8:
            raise SpecError(f"frames must be at least 8x8, got {self.height}x{self.width}")
        if self.label not in (REAL, FAKE):
            raise SpecError(f"label must be 0 (real) or 1 (fake), got {self.label!r}")
        if self.jitter_px < 0:
            raise SpecError(f"jitter_px must be >= 0, got {self.jitter_px}")
        if self.amplitude < 0:
            raise SpecError(f"amplitude must be >= 0, got {self.amplitude}")
        if not 0 < self.patch_frac <= 1:
            raise SpecError(f"patch_frac must be in (0, 1], got {self.patch_frac}")

    @classmethod
    def real(cls, **kw) -> "ClipSpec":
        return cls(label=REAL, jitter_px=0, blend=False, **kw)

    @classmethod
    def fake(cls, jitter_px: int = 2, blend: bool = True, **kw) -> "ClipSpec":
        return cls(label=FAKE, jitter_px=jitter_px, blend=blend, **kw)

    def validate_label(self) -> None:
        forged = self.jitter_px > 0 or self.blend
        if self.label == FAKE and not forged:
            raise SpecError("a fake clip needs jitter_px > 0 or blend=True")
        if self.label == REAL and forged:
            raise SpecError("a real clip cannot carry jitter or blending")


@dataclass
class Clip:
    frames: np.ndarray  # (L, 3, H, W) float32 in [0, 1]
    label: int
    meta: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.frames.shape[0]


def _box_blur(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="wrap")
    h, w = img.shape[1:]
    return sum(p[:, i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0


def _render_face(yy, xx, center, tex: dict, phase_shift: float = 0.0, gain: float = 1.0):
    """Envelope (H, W) and colored texture (3, H, W) of the face proxy at ``center``."""
    dy = yy - center[0]
    dx = xx - center[1]
    env = np.exp(-(dy * dy + dx * dx) / (2.0 * tex["sigma"] ** 2))
    along = dy * np.sin(tex["theta"]) + dx * np.cos(tex["theta"])
    stripes = 0.5 + 0.45 * gain * np.sin(2.0 * np.pi * tex["freq"] * along + tex["phase"] + phase_shift)
    color = np.asarray(tex["color"])[:, None, None]
    return env, color * stripes[None]


def _soft_rect(yy, xx, center, half: tuple[float, float]) -> np.ndarray:
    """1 inside the rectangle, 0 outside, linear over SEAM_PX at the border."""
    inside = np.minimum(half[0] - np.abs(yy - center[0]), half[1] - np.abs(xx - center[1]))
    return np.clip(inside / SEAM_PX, 0.0, 1.0)


def synth_clip(seed: int, spec: ClipSpec, strict: bool = True) -> Clip:
    """Generate one clip.  ``strict=False`` skips the label/forgery consistency check."""
    if strict:
        spec.validate_label()
    L, H, W = spec.length, spec.height, spec.width
    bg_rng, traj_rng, tex_rng, jit_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4))

    background = 0.2 + 0.3 * _box_blur(bg_rng.uniform(size=(3, H, W)))

    c0 = (H / 2.0 + traj_rng.uniform(-H / 10, H / 10), W / 2.0 + traj_rng.uniform(-W / 10, W / 10))
    amp = spec.amplitude * traj_rng.uniform(0.5, 1.0, size=2)
    cycles = traj_rng.uniform(0.25, 0.6)
    phase = traj_rng.uniform(0.0, 2.0 * np.pi, size=2)
    t = np.arange(L)
    path = np.stack([c0[0] + amp[0] * np.sin(2 * np.pi * cycles * t / L + phase[0]),
                     c0[1] + amp[1] * np.sin(2 * np.pi * cycles * t / L + phase[1])], axis=1)

    tex = {
        "sigma": min(H, W) * tex_rng.uniform(0.14, 0.18),
        "theta": tex_rng.uniform(0.0, np.pi),
        "freq": tex_rng.uniform(0.08, 0.14),
        "phase": tex_rng.uniform(0.0, 2.0 * np.pi),
        "color": tex_rng.uniform(0.6, 1.0, size=3),
    }
    jitter = np.zeros((L, 2), dtype=np.int64)
    if spec.jitter_px > 0:
        jitter = jit_rng.integers(-spec.jitter_px, spec.jitter_px + 1, size=(L, 2))

    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    half = (spec.patch_frac * H / 2.0, spec.patch_frac * W / 2.0)
    frames = np.empty((L, 3, H, W))
    for i in range(L):
        if spec.blend:
            env, col = _render_face(yy, xx, path[i], tex)
            frame = (1.0 - env) * background + env * col
            env_f, col_f = _render_face(yy, xx, path[i] + jitter[i], tex, phase_shift=np.pi / 2, gain=0.8)
            forged = (1.0 - env_f) * background + env_f * col_f
            alpha = _soft_rect(yy, xx, path[i], half)
            frame = (1.0 - alpha) * frame + alpha * forged
        else:
            env, col = _render_face(yy, xx, path[i] + jitter[i], tex)
            frame = (1.0 - env) * background + env * col
        frames[i] = frame
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)

    meta = {
        "seed": int(seed),
        "spec": asdict(spec),
        "trajectory": {"center": [float(c) for c in c0], "amplitude": amp.tolist(),
                       "cycles": float(cycles), "phase": phase.tolist()},
        "jitter_px": int(spec.jitter_px),
        "patch": None,
    }
    if spec.blend:
        meta["patch"] = [int(np.floor(c0[0] - half[0])), int(np.floor(c0[1] - half[1])),
                         int(np.ceil(c0[0] + half[0])), int(np.ceil(c0[1] + half[1]))]
    return Clip(frames, spec.label, meta)


def patch_box(clip: Clip) -> tuple[int, int, int, int]:
    """(y0, x0, y1, x1) of the nominal face rectangle, clipped to the frame."""
    _, _, H, W = clip.frames.shape
    if clip.meta.get("patch"):
        y0, x0, y1, x1 = clip.meta["patch"]
    else:
        spec = clip.meta["spec"]
        cy, cx = clip.meta["trajectory"]["center"]
        hy, hx = spec["patch_frac"] * H / 2.0, spec["patch_frac"] * W / 2.0
        y0, x0, y1, x1 = int(np.floor(cy - hy)), int(np.floor(cx - hx)), int(np.ceil(cy + hy)), int(np.ceil(cx + hx))
    return max(y0, 0), max(x0, 0), min(y1, H), min(x1, W)


def mean_abs_frame_diff(clip: Clip, box: tuple[int, int, int, int] | None = None) -> float:
    f = clip.frames.astype(np.float64)
    if box is not None:
        y0, x0, y1, x1 = box
        f = f[:, :, y0:y1, x0:x1]
    return float(np.mean(np.abs(np.diff(f, axis=0))))


# ------------------------------------------------------------ frame sampling

def sample_indices(length: int, n: int) -> np.ndarray:
    """Segment-centre indices floor((i + 0.5) * L / n)."""
    if not 1 <= n <= length:
        raise SpecError(f"need 1 <= n <= L, got n={n}, L={length}")
    i = np.arange(n)
    return ((2 * i + 1) * length) // (2 * n)


def sample_frames(clip: Clip | np.ndarray, n: int) -> np.ndarray:
    frames = clip.frames if isinstance(clip, Clip) else np.asarray(clip)
    return frames[sample_indices(frames.shape[0], n)]


# --------------------------------------------------------------- slice maps

def luma(frames: np.ndarray) -> np.ndarray:
    """(L, 3, H, W) -> (L, H, W)."""
    return np.tensordot(LUMA, np.asarray(frames, dtype=np.float64), axes=(0, 1))


def slice_map(clip: Clip | np.ndarray, axis: str, position: int) -> np.ndarray:
    """Stack one column (axis='h') or row (axis='w') of every frame over time.

    Returns (H, L) for 'h' and (W, L) for 'w'.
    """
    frames = clip.frames if isinstance(clip, Clip) else np.asarray(clip)
    _, _, H, W = frames.shape
    y = luma(frames)
    if axis == "h":
        if not 0 <= position < W:
            raise SpecError(f"column {position} outside width {W}")
        return y[:, :, position].T.copy()
    if axis == "w":
        if not 0 <= position < H:
            raise SpecError(f"row {position} outside height {H}")
        return y[:, position, :].T.copy()
    raise SpecError(f"axis must be 'h' or 'w', got {axis!r}")


def temporal_roughness(smap: np.ndarray) -> float:
    """Mean absolute difference between adjacent time columns of a slice map."""
    return float(np.mean(np.abs(np.diff(smap, axis=1))))


# ------------------------------------------------------------------- corpus

@dataclass(frozen=True)
class CorpusSpec:
    n_clips: int = 200
    seed_base: int = 0
    length: int = 64
    height: int = 64
    width: int = 64
    jitter_px: int = 2
    blend: bool = True
    amplitude: float = 3.0

    def __post_init__(self):
        if self.n_clips < 1:
            raise SpecError("corpus needs at least one clip")

    def clip_spec(self, index: int) -> ClipSpec:
        common = dict(length=self.length, height=self.height, width=self.width, amplitude=self.amplitude)
        # even indices real, odd indices fake: balanced by construction
        if index % 2 == 0:
            return ClipSpec.real(**common)
        return ClipSpec.fake(jitter_px=self.jitter_px, blend=self.blend, **common)

    @classmethod
    def from_dict(cls, d: Mapping) -> "CorpusSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown corpus keys: {sorted(unknown)}")
        return cls(**d)


def generate_corpus(spec: CorpusSpec) -> Iterator[Clip]:
    for i in range(spec.n_clips):
        yield synth_clip(spec.seed_base + i, spec.clip_spec(i))


def write_corpus(spec: CorpusSpec, directory: str | os.PathLike) -> Path:
    """Write clips as ``clip_XXXXX.sten`` plus a JSON-lines ``manifest.jsonl``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for i, clip in enumerate(generate_corpus(spec)):
        name = f"clip_{i:05d}.sten"
        tn.save(tn.Tensor(clip.frames), directory / name)
        records.append({"seed": clip.meta["seed"], "label": clip.label, "spec": clip.meta["spec"],
                        "meta": {k: clip.meta[k] for k in ("trajectory", "jitter_px", "patch")},
                        "path": name})
    manifest = directory / "manifest.jsonl"
    manifest.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    return manifest


def read_corpus(directory: str | os.PathLike) -> list[Clip]:
    directory = Path(directory)
    manifest = directory / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no corpus manifest at {manifest}")
    clips = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        frames = np.array(tn.load(directory / rec["path"]).array)
        meta = {"seed": rec["seed"], "spec": rec["spec"], **rec["meta"]}
        clips.append(Clip(frames, int(rec["label"]), meta))
    return clips
