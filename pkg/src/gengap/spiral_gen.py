"""Two-arm spiral classification datasets.

Blue points (label +1) follow ``theta = 2*pi*k*u, r = u`` for ``u`` in
[0, 1]; red points (label -1) are the blue arm rotated by pi. Gaussian noise
is added to each Cartesian coordinate.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Literal

import numpy as np

FULL_NUM_TRAIN = (50, 100, 200)
FULL_LOOPS = (1, 2, 3)
FULL_NOISE = (0.0, 0.05, 0.15)
FULL_SEEDS = (1, 2, 3, 4, 5)

TEST_SEED_OFFSET = 2**31
DEFAULT_TEST_SIZE = 10_000
FULL_TEST_SIZE = 1_000_000

BLUE, RED = "blue", "red"

Purpose = Literal["train", "test"]


@dataclass(frozen=True)
class SpiralSpec:
    loops: int
    noise_sigma: float
    num_train: int
    data_seed: int

    def __post_init__(self):
        if self.loops < 1:
            raise ValueError(f"loops must be >= 1, got {self.loops}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.num_train < 1:
            raise ValueError(f"num_train must be >= 1, got {self.num_train}")

    @property
    def variation(self) -> tuple[int, int, float]:
        """The (m, k, sigma) triple shared by all seeds of one variation."""
        return (self.num_train, self.loops, self.noise_sigma)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SpiralSpec":
        return cls(
            loops=int(d["loops"]),
            noise_sigma=float(d["noise_sigma"]),
            num_train=int(d["num_train"]),
            data_seed=int(d["data_seed"]),
        )

    @classmethod
    def parse(cls, text: str) -> "SpiralSpec":
        """Parse ``k=2,sigma=0.05,m=100,seed=3``."""
        aliases = {
            "k": "loops", "loops": "loops",
            "sigma": "noise_sigma", "noise_sigma": "noise_sigma",
            "m": "num_train", "num_train": "num_train",
            "seed": "data_seed", "data_seed": "data_seed",
        }
        fields = {}
        for part in text.split(","):
            if not part.strip():
                continue
            key, sep, value = part.partition("=")
            key = key.strip()
            if not sep or key not in aliases:
                raise ValueError(f"bad spec component {part!r}")
            fields[aliases[key]] = value.strip()
        missing = {"loops", "noise_sigma", "num_train", "data_seed"} - fields.keys()
        if missing:
            raise ValueError(f"spec {text!r} is missing {sorted(missing)}")
        return cls.from_dict(fields)


@dataclass(frozen=True)
class Dataset:
    spec: SpiralSpec
    X: np.ndarray  # (n, 2)
    y: np.ndarray  # (n,) of +-1

    def __post_init__(self):
        self.X.setflags(write=False)
        self.y.setflags(write=False)

    def __len__(self) -> int:
        return len(self.y)

    def points(self) -> Iterator[tuple[float, float, int]]:
        for (x, y), label in zip(self.X.tolist(), self.y.tolist()):
            yield x, y, int(label)


def arm_point(u: float, arm: str, k: int) -> tuple[float, float]:
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if arm not in (BLUE, RED):
        raise ValueError(f"unknown arm {arm!r}")
    theta = 2.0 * math.pi * k * u
    x, y = u * math.cos(theta), u * math.sin(theta)
    if arm == RED:
        return -x, -y
    return x, y


def _arm_points(u: np.ndarray, k: int, sign: np.ndarray) -> np.ndarray:
    theta = 2.0 * np.pi * k * u
    xy = np.stack([u * np.cos(theta), u * np.sin(theta)], axis=1)
    return xy * sign[:, None]


def _rng(spec: SpiralSpec, purpose: Purpose) -> np.random.Generator:
    if purpose not in ("train", "test"):
        raise ValueError(f"purpose must be 'train' or 'test', got {purpose!r}")
    seed = spec.data_seed + (TEST_SEED_OFFSET if purpose == "test" else 0)
    # sigma enters the key in integer micro-units so the key stays exact
    sigma_key = int(round(spec.noise_sigma * 1_000_000))
    return np.random.default_rng([seed, spec.loops, sigma_key, spec.num_train])


def generate(spec: SpiralSpec, n: int | None = None, purpose: Purpose = "train") -> Dataset:
    """Draw ``n`` points (default ``spec.num_train``), alternating blue/red."""
    if n is None:
        n = spec.num_train
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = _rng(spec, purpose)
    u = rng.uniform(0.0, 1.0, size=n)
    noise = rng.standard_normal(size=(n, 2)) * spec.noise_sigma
    labels = np.where(np.arange(n) % 2 == 0, 1, -1).astype(np.int64)
    X = _arm_points(u, spec.loops, labels.astype(np.float64)) + noise
    return Dataset(spec=spec, X=X, y=labels)


def full_preset_specs() -> list[SpiralSpec]:
    return [
        SpiralSpec(loops=k, noise_sigma=s, num_train=m, data_seed=seed)
        for m, k, s, seed in itertools.product(
            FULL_NUM_TRAIN, FULL_LOOPS, FULL_NOISE, FULL_SEEDS
        )
    ]


def write_jsonl(dataset: Dataset, path: str | Path, purpose: Purpose = "train") -> None:
    """Header line carries the SpiralSpec; one ``{"x", "y", "label"}`` object per point."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {"spec": dataset.spec.to_dict(), "purpose": purpose, "n": len(dataset)}
        fh.write(json.dumps(header) + "\n")
        for x, y, label in dataset.points():
            fh.write(json.dumps({"x": x, "y": y, "label": label}) + "\n")


def read_jsonl(path: str | Path) -> Dataset:
    with Path(path).open(encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    X = np.array([[r["x"], r["y"]] for r in rows], dtype=np.float64).reshape(-1, 2)
    y = np.array([r["label"] for r in rows], dtype=np.int64)
    return Dataset(spec=SpiralSpec.from_dict(header["spec"]), X=X, y=y)
