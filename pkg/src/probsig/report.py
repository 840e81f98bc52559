"""Run-directory plumbing: flat configs, manifests, locks and SVG figures."""
from __future__ import annotations

import hashlib
import json
import os
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import __version__

MANIFEST = "manifest.json"
LOCK = ".lock"


class RunError(RuntimeError):
    pass


# -- flat key=value config --------------------------------------------------------

def parse_config(text: str) -> dict[str, str]:
    """``section.key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"config line {n}: expected key=value, got {line!r}")
        out[key.strip()] = value.strip()
    return out


def format_config(cfg: dict) -> str:
    return "".join(f"{k}={cfg[k]}\n" for k in sorted(cfg))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(format_config(cfg).encode()).hexdigest()[:16]


# -- manifest and lock ------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def load_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        return {"tool_version": __version__, "files": {}, "commands": {}, "timings": {}}
    return json.loads(path.read_text())


def update_manifest(run_dir, command: str, cfg: dict, files: Iterable[Path], seconds: float,
                    extra: dict | None = None) -> dict:
    """Record ``files`` (with checksums) emitted by ``command``.

    Wall-clock timings live in their own section so the rest of the manifest
    is reproducible byte for byte.
    """
    run_dir = Path(run_dir)
    man = load_manifest(run_dir)
    man["tool_version"] = __version__
    for f in files:
        f = Path(f)
        man["files"][f.relative_to(run_dir).as_posix()] = sha256_file(f)
    man["commands"][command] = {"config_hash": config_hash(cfg), **(extra or {})}
    man["timings"][command] = round(seconds, 3)
    (run_dir / MANIFEST).write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
    return man


@contextmanager
def run_lock(run_dir):
    """Exclusive ownership of ``run_dir`` for one command."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunError(f"{run_dir} is locked by another command (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


# -- SVG ------------------------------------------------------------------------------

def _diverging(v: float) -> str:
    """Fixed blue-white-red map on [-1, 1]."""
    v = float(np.clip(v, -1.0, 1.0)) if np.isfinite(v) else 0.0
    if v >= 0:
        r, g, b = 255, int(255 * (1 - v)), int(255 * (1 - v))
    else:
        r, g, b = int(255 * (1 + v)), int(255 * (1 + v)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(m: np.ndarray, row_labels: Sequence, col_labels: Sequence, title: str = "",
                cell: int = 12) -> str:
    """Square-cell heatmap with token-labelled axes; values are clipped to [-1, 1]."""
    m = np.asarray(m, dtype=np.float64)
    n_r, n_c = m.shape
    left, top = 48, 40
    w, h = left + n_c * cell + 10, top + n_r * cell + 10
    step_r = max(1, n_r // 20)
    step_c = max(1, n_c // 20)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="8">',
             f'<text x="{left}" y="12" font-size="11">{escape(title)}</text>']
    for i in range(n_r):
        for j in range(n_c):
            parts.append(f'<rect x="{left + j * cell}" y="{top + i * cell}" width="{cell}" height="{cell}" '
                         f'fill="{_diverging(m[i, j])}"/>')
    for i in range(0, n_r, step_r):
        parts.append(f'<text x="{left - 3}" y="{top + i * cell + cell - 3}" text-anchor="end">{escape(str(row_labels[i]))}</text>')
    for j in range(0, n_c, step_c):
        parts.append(f'<text x="{left + j * cell + 2}" y="{top - 4}">{escape(str(col_labels[j]))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def line_svg(x: Sequence[float], series: dict[str, Sequence[float]], title: str = "",
             width: int = 420, height: int = 240) -> str:
    """Poly-line chart; NaN / None points break the line."""
    colors = ["#1f4e9c", "#c0392b", "#2e8b57", "#8e44ad"]
    xs = np.asarray(x, dtype=np.float64)
    ys = [np.asarray([np.nan if v is None else v for v in s], dtype=np.float64) for s in series.values()]
    finite = np.concatenate([y[np.isfinite(y)] for y in ys]) if ys else np.array([0.0])
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    x0, x1 = (float(xs.min()), float(xs.max())) if xs.size else (0.0, 1.0)
    if x1 - x0 < 1e-12:
        x1 = x0 + 1.0
    pad = 40

    def px(a):
        return pad + (a - x0) / (x1 - x0) * (width - 2 * pad)

    def py(b):
        return height - pad - (b - lo) / (hi - lo) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="9">',
             f'<text x="{pad}" y="14" font-size="11">{escape(title)}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{pad - 4}" y="{py(hi) + 3:.1f}" text-anchor="end">{hi:.3g}</text>',
             f'<text x="{pad - 4}" y="{py(lo) + 3:.1f}" text-anchor="end">{lo:.3g}</text>',
             f'<text x="{pad}" y="{height - pad + 12}">{x0:.4g}</text>',
             f'<text x="{width - pad}" y="{height - pad + 12}" text-anchor="end">{x1:.4g}</text>']
    for k, (name, y) in enumerate(zip(series, ys)):
        color = colors[k % len(colors)]
        segs, cur = [], []
        for a, b in zip(xs, y):
            if np.isfinite(b):
                cur.append(f"{px(a):.1f},{py(b):.1f}")
            elif cur:
                segs.append(cur)
                cur = []
        if cur:
            segs.append(cur)
        for seg in segs:
            parts.append(f'<polyline fill="none" stroke="{color}" points="{" ".join(seg)}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 12 * k}" text-anchor="end" fill="{color}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
