"""Named learnable weights, Adam, and the flat-binary checkpoint format.

Checkpoint layout (a directory)::

    manifest.txt   header lines ``key=value`` then one line per array:
                   ``<name> <shape> <offset> <crc32>``  (shape like ``64x16``,
                   offset in float64 elements into params.bin)
    params.bin     all arrays back to back, little-endian float64, row-major

Adam moments are stored as ordinary arrays named ``adam.m/<param>`` and
``adam.v/<param>`` so a resumed run continues bit-exactly.
"""

from __future__ import annotations

import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Tensor

MANIFEST_VERSION = "hiermatch-checkpoint 1"
FUSION_GAIN = float(np.sqrt(6.0))


class CheckpointError(ValueError):
    pass


def parameter_shapes(d_raw: int, d: int, d_h: int) -> "OrderedDict[str, tuple[int, ...]]":
    """Every parameter the model owns, in a fixed order."""
    return OrderedDict([
        ("proj.W", (d_raw, d)),
        ("proj.b", (d,)),
        ("hier.W_C", (d, d_h)),
        ("hier.W_F", (d, 2 * d)),
        ("coattn.W_S", (d, d_h)),
        ("coattn.W_P", (d, d_h)),
        ("coattn.W_GS", (2 * d, d)),
        ("coattn.W_GP", (2 * d, d)),
        ("coattn.Z_S.W", (d, d)),
        ("coattn.Z_S.b", (d,)),
        ("coattn.Z_P.W", (d, d)),
        ("coattn.Z_P.b", (d,)),
    ])


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    # W_F multiplies a 2d column from the left, every other matrix from the right
    if name == "hier.W_F":
        return shape[1]
    return shape[0]


class ParamStore:
    """Ordered mapping of parameter name to a differentiable leaf tensor."""

    def __init__(self, arrays: "dict[str, np.ndarray] | None" = None):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    @classmethod
    def init(cls, d_raw: int, d: int, d_h: int, seed: int = 0, gain: float = 1.0,
             fusion_gain: float = FUSION_GAIN) -> "ParamStore":
        """Uniform(-b, b) weights with ``b = gain * sqrt(1/fan_in)``; biases zero.

        The fusion matrix uses ``fusion_gain`` instead.  Its default keeps the
        node norm roughly constant through a chain of ReLU fusions; at gain 1
        the second moment shrinks about six-fold per merge.
        """
        rng = np.random.default_rng(seed)
        store = cls()
        for name, shape in parameter_shapes(d_raw, d, d_h).items():
            if len(shape) == 1:
                arr = np.zeros(shape)
            else:
                g = fusion_gain if name == "hier.W_F" else gain
                bound = g * np.sqrt(1.0 / _fan_in(name, shape))
                arr = rng.uniform(-bound, bound, size=shape)
            store.add(name, arr)
        return store

    def add(self, name: str, arr) -> Tensor:
        t = Tensor(np.array(arr, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (k, t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self._params.items()
        )

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self._params.items())

    def copy(self) -> "ParamStore":
        return ParamStore({k: t.data.copy() for k, t in self._params.items()})

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))


class Adam:
    """Adam over a ParamStore; moments keyed by parameter name."""

    def __init__(self, params: ParamStore, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, scale: float = 1.0) -> None:
        """Apply one update using ``scale * grad`` (e.g. ``1/batch``)."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if scale != 1.0:
                g = g * scale
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# --------------------------------------------------------------------------
# checkpoint IO
# --------------------------------------------------------------------------

def _shape_str(shape: tuple[int, ...]) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    if text == "scalar":
        return ()
    return tuple(int(s) for s in text.split("x"))


def write_arrays(directory: Path, arrays: "dict[str, np.ndarray]",
                 header: "dict[str, str] | None" = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"# {MANIFEST_VERSION}"]
    for key, val in (header or {}).items():
        if "\n" in str(val) or " " in key:
            raise CheckpointError(f"header entry {key!r} cannot be written")
        lines.append(f"{key}={val}")
    lines.append("---")
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        lines.append(f"{name} {_shape_str(np.shape(arr))} {offset} {zlib.crc32(buf):08x}")
        chunks.append(buf)
        offset += np.size(arr)
    tmp_bin = directory / "params.bin.tmp"
    tmp_bin.write_bytes(b"".join(chunks))
    tmp_man = directory / "manifest.txt.tmp"
    tmp_man.write_text("\n".join(lines) + "\n")
    tmp_bin.replace(directory / "params.bin")
    tmp_man.replace(directory / "manifest.txt")


def read_arrays(directory: Path) -> "tuple[dict[str, str], OrderedDict[str, np.ndarray]]":
    directory = Path(directory)
    man = directory / "manifest.txt"
    binf = directory / "params.bin"
    if not man.exists() or not binf.exists():
        raise CheckpointError(f"{directory}: missing manifest.txt or params.bin")
    raw = np.frombuffer(binf.read_bytes(), dtype="<f8")
    lines = man.read_text().splitlines()
    if not lines or lines[0] != f"# {MANIFEST_VERSION}":
        raise CheckpointError(f"{man}: unrecognised manifest header")
    header: dict[str, str] = {}
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    in_body = False
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line == "---":
            in_body = True
            continue
        if not in_body:
            key, sep, val = line.partition("=")
            if not sep:
                raise CheckpointError(f"{man}:{lineno}: expected key=value")
            header[key] = val
            continue
        parts = line.split()
        if len(parts) != 4:
            raise CheckpointError(f"{man}:{lineno}: expected 'name shape offset crc32'")
        name, shape_s, off_s, crc_s = parts
        shape = _parse_shape(shape_s)
        off = int(off_s)
        size = int(np.prod(shape)) if shape else 1
        if off + size > raw.size:
            raise CheckpointError(f"{man}:{lineno}: {name} runs past the end of params.bin")
        arr = raw[off:off + size].reshape(shape).astype(np.float64)
        if f"{zlib.crc32(np.ascontiguousarray(arr, dtype='<f8').tobytes()):08x}" != crc_s:
            raise CheckpointError(f"{man}:{lineno}: checksum mismatch for {name}")
        arrays[name] = arr
    return header, arrays
