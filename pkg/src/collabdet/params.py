"""Named parameter collections, seeded initialisation and deterministic checkpoints."""
from __future__ import annotations

import io
import zipfile
from pathlib import Path

import numpy as np

from .numcore import Parameter, Tensor, matmul


class ParamSet(dict):
    """Ordered ``name -> Parameter`` mapping."""

    def add(self, name: str, data) -> Parameter:
        if name in self:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Parameter(data, name=name)
        self[name] = p
        return p

    def zero_grad(self) -> None:
        for p in self.values():
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        mismatched = []
        for k, p in self.items():
            if k not in state:
                mismatched.append(f"{k}: missing")
            elif state[k].shape != p.shape:
                mismatched.append(f"{k}: checkpoint {state[k].shape} vs model {p.shape}")
        extra = sorted(set(state) - set(self))
        mismatched += [f"{k}: not in model" for k in extra]
        if mismatched:
            raise ValueError("incompatible checkpoint:\n  " + "\n  ".join(mismatched))
        for k, p in self.items():
            p.data = np.array(state[k], dtype=np.float64)
            p.zero_grad()

    def count(self) -> int:
        return int(sum(p.data.size for p in self.values()))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def add_linear(ps: ParamSet, rng, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
    ps.add(f"{name}.weight", uniform_init(rng, (fan_in, fan_out), fan_in))
    if bias:
        ps.add(f"{name}.bias", uniform_init(rng, (fan_out,), fan_in))


def add_conv(ps: ParamSet, rng, name: str, cin: int, cout: int, k: int, bias: bool = True) -> None:
    fan_in = cin * k * k
    ps.add(f"{name}.weight", uniform_init(rng, (cout, cin, k, k), fan_in))
    if bias:
        ps.add(f"{name}.bias", uniform_init(rng, (cout,), fan_in))


def linear(ps: ParamSet, name: str, x) -> Tensor:
    out = matmul(x, ps[f"{name}.weight"])
    b = ps.get(f"{name}.bias")
    return out if b is None else out + b


def save_checkpoint(path, ps: ParamSet) -> None:
    """Write an .npz whose bytes depend only on parameter names and values."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(ps):
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            arr = io.BytesIO()
            np.lib.format.write_array(arr, np.ascontiguousarray(ps[name].data), allow_pickle=False)
            zf.writestr(info, arr.getvalue())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}
