"""Sweep orchestration: sample hyperparameters, train every (dataset, hparam)
pair, extract signatures, persist records, and feed the evaluation stage.

Every work unit derives its seeds from ``(root_seed, net_id, purpose)`` so a
sweep produces the same records whatever order units finish in.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from gengap import __version__, evalkit, ggp, margin_sig, spiral_gen, tinynet
from gengap.spiral_gen import SpiralSpec
from gengap.tinynet import NetHparams

log = logging.getLogger(__name__)

ENGINE_VERSION = f"gengap-{__version__}"
RECORDS_FILE = "records.jsonl"
MANIFEST_FILE = "manifest.json"
CHECKPOINT_DIR = "checkpoints"


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    preset: str = "custom"
    num_train: tuple[int, ...] = (100, 200)
    loops: tuple[int, ...] = (1, 2, 3)
    noise: tuple[float, ...] = (0.0, 0.05)
    seeds: tuple[int, ...] = (1, 2, 3)
    num_hparams: int = 20
    hparam_seed: int = 0
    steps: int = 10_000
    test_size: int = spiral_gen.DEFAULT_TEST_SIZE
    lambdas: tuple[float, ...] = (0.5, 2.5)
    workers: int = 1
    root_seed: int = 0
    out_dir: str = "runs/desk"
    checkpoint: bool = False
    engine: str = "compiled"
    # net_id -> hparam field overrides, e.g. {"7": {"learning_rate": 1e6}}
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("num_train", "loops", "noise", "seeds", "lambdas"):
            setattr(self, name, tuple(getattr(self, name)))
        self.overrides = {str(k): dict(v) for k, v in self.overrides.items()}
        if self.num_hparams < 1 or self.steps < 1 or self.test_size < 1:
            raise ValueError("num_hparams, steps and test_size must be positive")
        if not self.lambdas or any(lam <= 0 for lam in self.lambdas):
            raise ValueError("lambdas must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")

    def variations(self) -> list[tuple[int, int, float]]:
        """Sorted (m, k, sigma) triples; the index is the variation id."""
        return sorted(itertools.product(self.num_train, self.loops, self.noise))

    def specs(self) -> list[SpiralSpec]:
        return [SpiralSpec(loops=k, noise_sigma=s, num_train=m, data_seed=seed)
                for (m, k, s), seed in itertools.product(self.variations(), self.seeds)]


PRESETS = {
    "full": dict(
        num_train=spiral_gen.FULL_NUM_TRAIN, loops=spiral_gen.FULL_LOOPS,
        noise=spiral_gen.FULL_NOISE, seeds=spiral_gen.FULL_SEEDS,
        num_hparams=100, steps=1_000_000, test_size=spiral_gen.FULL_TEST_SIZE,
        out_dir="runs/full"),
    "desk": dict(
        num_train=(100, 200), loops=(1, 2, 3), noise=(0.0, 0.05), seeds=(1, 2, 3),
        num_hparams=20, steps=10_000, test_size=10_000, out_dir="runs/desk"),
    "smoke": dict(
        num_train=(50, 100), loops=(1, 2), noise=(0.0,), seeds=(1, 2),
        num_hparams=8, steps=200, test_size=500, out_dir="runs/smoke"),
}


def preset_config(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig(preset=name, **{**PRESETS[name], **overrides})


# ---------------------------------------------------------------- seeds

def child_seed(root_seed: int, net_id: int, purpose: str) -> int:
    """sha256 of ``"root:net_id:purpose"``, first 8 bytes little-endian, 63 bits."""
    digest = hashlib.sha256(f"{root_seed}:{net_id}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


# ---------------------------------------------------------------- hparams

def hparam_space_size(depths=(1, 2, 3, 4)) -> int:
    architectures = sum(len(tinynet.FULL_WIDTHS) ** d for d in depths)
    return (architectures * len(tinynet.FULL_OPTIMIZERS) * len(tinynet.FULL_LEARNING_RATES)
            * len(tinynet.FULL_BATCH_SIZES) * 2 * len(tinynet.FULL_DROPOUT_RATES))


def sample_hparams(count: int, sample_seed: int) -> list[NetHparams]:
    """Uniform, duplicate-free draws; ``hparam_id`` is the draw index."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if count > hparam_space_size():
        raise ValueError("count exceeds the size of the hyperparameter space")
    rng = np.random.default_rng(sample_seed)
    seen, out = set(), []
    while len(out) < count:
        depth = int(rng.integers(1, 5))
        hp = NetHparams(
            layer_widths=tuple(int(w) for w in rng.choice(tinynet.FULL_WIDTHS, size=depth)),
            optimizer=str(rng.choice(tinynet.FULL_OPTIMIZERS)),
            learning_rate=float(rng.choice(tinynet.FULL_LEARNING_RATES)),
            batch_size=int(rng.choice(tinynet.FULL_BATCH_SIZES)),
            batch_norm=bool(rng.integers(0, 2)),
            dropout_rate=float(rng.choice(tinynet.FULL_DROPOUT_RATES)),
            hparam_id=len(out),
        )
        if hp.config_key() in seen:
            continue
        seen.add(hp.config_key())
        out.append(hp)
    return out


# ---------------------------------------------------------------- records

RECORD_KEYS = (
    "net_id", "variation_id", "loops", "noise_sigma", "num_train", "data_seed",
    "hparam_id", "layer_widths", "optimizer", "learning_rate", "batch_size",
    "batch_norm", "dropout_rate", "steps", "train_accuracy", "test_accuracy", "gap",
    "diverged", "lambda", "signature", "extra_signatures", "engine_version",
)


def dumps_record(record: dict) -> str:
    return json.dumps({k: record[k] for k in RECORD_KEYS}, separators=(",", ":"))


def read_records(path: str | Path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / RECORDS_FILE
    if not path.exists():
        raise FileNotFoundError(f"no record store at {path}")
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_records(records: Iterable[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_record(rec) + "\n")


def record_signature(record: dict, lam: float) -> margin_sig.SignatureMatrix:
    if record["diverged"]:
        raise ValueError(f"net {record['net_id']} diverged and has no signature")
    if np.isclose(record["lambda"], lam):
        return margin_sig.SignatureMatrix.from_list(record["signature"], record["lambda"])
    for key, rows in record["extra_signatures"].items():
        if np.isclose(float(key), lam):
            return margin_sig.SignatureMatrix.from_list(rows, float(key))
    raise KeyError(f"net {record['net_id']} has no signature at lambda={lam}")


def examples_from_records(records: Sequence[dict], lam: float,
                          label_mode: str = "gap") -> list[ggp.GgpExample]:
    if label_mode not in evalkit.LABEL_MODES:
        raise ValueError(f"unknown label mode {label_mode!r}")
    key = "gap" if label_mode == "gap" else "test_accuracy"
    return [
        ggp.GgpExample(
            signature=record_signature(r, lam), label=float(r[key]), net_id=r["net_id"],
            variation_id=r["variation_id"], data_seed=r["data_seed"],
            hparam_id=r["hparam_id"])
        for r in records if not r["diverged"]
    ]


# ---------------------------------------------------------------- sweep

@dataclass(frozen=True)
class WorkUnit:
    net_id: int
    variation_id: int
    spec: SpiralSpec
    hparams: NetHparams


def work_units(config: RunConfig) -> list[WorkUnit]:
    hparams = sample_hparams(config.num_hparams, config.hparam_seed)
    var_index = {v: i for i, v in enumerate(config.variations())}
    units = []
    for s_idx, spec in enumerate(config.specs()):
        for hp in hparams:
            net_id = s_idx * config.num_hparams + hp.hparam_id
            override = config.overrides.get(str(net_id))
            if override:
                hp = dataclasses.replace(hp, **override)
            units.append(WorkUnit(net_id, var_index[spec.variation], spec, hp))
    return units


def train_unit(unit: WorkUnit, config: RunConfig) -> tuple[tinynet.TrainOutcome,
                                                           spiral_gen.Dataset]:
    """Regenerate the unit's training set and train its network."""
    train = spiral_gen.generate(unit.spec, unit.spec.num_train, "train")
    net = tinynet.init(unit.hparams, child_seed(config.root_seed, unit.net_id, "init"))
    outcome = tinynet.train(net, train.X, train.y, config.steps,
                            child_seed(config.root_seed, unit.net_id, "train"),
                            engine=config.engine)
    return outcome, train


def run_unit(unit: WorkUnit, config: RunConfig) -> dict:
    spec, hp = unit.spec, unit.hparams
    outcome, train = train_unit(unit, config)
    record = {
        "net_id": unit.net_id, "variation_id": unit.variation_id,
        **spec.to_dict(), **hp.to_dict(), "steps": config.steps,
        "train_accuracy": None, "test_accuracy": None, "gap": None,
        "diverged": outcome.diverged, "lambda": config.lambdas[0],
        "signature": None, "extra_signatures": {}, "engine_version": ENGINE_VERSION,
    }
    if outcome.diverged:
        return record
    trained = outcome.net
    test = spiral_gen.generate(spec, config.test_size, "test")
    train_acc = tinynet.accuracy(trained, train.X, train.y)
    test_acc = tinynet.accuracy(trained, test.X, test.y)
    sigs = [margin_sig.extract_signature(trained, train.X, train.y, lam).to_list()
            for lam in config.lambdas]
    record.update(
        train_accuracy=train_acc, test_accuracy=test_acc, gap=train_acc - test_acc,
        signature=sigs[0],
        extra_signatures={repr(float(lam)): s for lam, s in zip(config.lambdas[1:], sigs[1:])},
    )
    if config.checkpoint:
        ckpt = Path(config.out_dir) / CHECKPOINT_DIR
        ckpt.mkdir(parents=True, exist_ok=True)
        trained.save(ckpt / f"net_{unit.net_id:06d}.json")
    return record


def _run_with_retry(unit: WorkUnit, config: RunConfig) -> tuple[int, dict | None, str | None]:
    error = None
    for _attempt in range(2):
        try:
            return unit.net_id, run_unit(unit, config), None
        except (OSError, tinynet.DivergedError) as exc:
            error = f"{type(exc).__name__}: {exc}"
    return unit.net_id, None, error


def run_sweep(config: RunConfig, write: bool = True) -> list[dict]:
    """Train and score every unit; records come back sorted by net_id."""
    out_dir = Path(config.out_dir)
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        config.save(out_dir / "config.json")
    units = work_units(config)
    started = time.time()
    results = []
    if config.workers == 1:
        results = [_run_with_retry(u, config) for u in units]
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_with_retry, units, itertools.repeat(config),
                                    chunksize=1))
    results.sort(key=lambda r: r[0])
    records = [rec for _, rec, _ in results if rec is not None]
    failures = [{"net_id": nid, "error": err} for nid, rec, err in results if rec is None]
    if write:
        write_records(records, out_dir / RECORDS_FILE)
        manifest = {
            "engine_version": ENGINE_VERSION,
            "preset": config.preset,
            "units": len(units),
            "records": len(records),
            "diverged": sum(r["diverged"] for r in records),
            "diverged_net_ids": [r["net_id"] for r in records if r["diverged"]],
            "failures": failures,
            "wall_seconds": round(time.time() - started, 3),
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        }
        write_manifest(out_dir, manifest)
    return records


def read_manifest(run_dir: str | Path) -> dict:
    path = Path(run_dir) / MANIFEST_FILE
    return json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}


def write_manifest(run_dir: str | Path, manifest: dict) -> None:
    (Path(run_dir) / MANIFEST_FILE).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def reextract(run_dir: str | Path, lam: float, config: RunConfig | None = None) -> list[dict]:
    """Recompute signatures at ``lam`` from stored checkpoints."""
    run_dir = Path(run_dir)
    records = read_records(run_dir)
    ckpt = run_dir / CHECKPOINT_DIR
    if not ckpt.is_dir():
        raise FileNotFoundError(f"no checkpoints under {ckpt}; rerun with checkpoint=true")
    out = []
    for rec in records:
        rec = dict(rec)
        if not rec["diverged"]:
            spec = SpiralSpec.from_dict(rec)
            train = spiral_gen.generate(spec, spec.num_train, "train")
            net = tinynet.Network.load(ckpt / f"net_{rec['net_id']:06d}.json")
            sig = margin_sig.extract_signature(net, train.X, train.y, lam)
            rec["extra_signatures"] = {**rec["extra_signatures"], repr(float(lam)): sig.to_list()}
        out.append(rec)
    return out


# ---------------------------------------------------------------- evaluation

def evaluate(records: Sequence[dict], scope: str, regime: str, family: str,
             label_mode: str = "gap", steps: int | None = None) -> evalkit.EvalReport:
    lam = evalkit.lambda_for(scope, family)
    examples = examples_from_records(records, lam, label_mode)
    excluded = sum(1 for r in records if r["diverged"])
    return evalkit.evaluate_regime(examples, regime, scope, family, label_mode,
                                   steps=steps, excluded_diverged=excluded)


def full_report(records: Sequence[dict], label_mode: str = "gap",
                families: Sequence[str] = ggp.FAMILIES,
                steps: int | None = None) -> list[evalkit.EvalReport]:
    return [evaluate(records, scope, regime, fam, label_mode, steps)
            for fam in families for scope, regime in evalkit.TABLE_CELLS]


# ---------------------------------------------------------------- analysis

ANALYSIS_COLUMNS = ("train_accuracy", "gap", "dropout_rate", "batch_norm", "batch_size",
                    "learning_rate")


def export_analysis(records: Sequence[dict]) -> str:
    """CSV of (train accuracy, gap, conditioning hparams) for non-diverged nets."""
    if not records:
        raise ValueError("no records to export")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(["net_id", *ANALYSIS_COLUMNS])
    for r in records:
        if r["diverged"]:
            continue
        writer.writerow([r["net_id"], *(r[c] for c in ANALYSIS_COLUMNS)])
    return buf.getvalue()


def scatter_svg(records: Sequence[dict], color_by: str, width: int = 480,
                height: int = 360) -> str:
    """Minimal SVG: gap against train accuracy, colored by one hparam."""
    pts = [r for r in records if not r["diverged"]]
    values = sorted({r[color_by] for r in pts}, key=str)
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"]
    color = {v: palette[i % len(palette)] for i, v in enumerate(values)}
    pad = 40
    gaps = [r["gap"] for r in pts] or [0.0]
    g_lo, g_hi = min(min(gaps), 0.0), max(max(gaps), 1e-9)

    def sx(a):
        return pad + a * (width - 2 * pad)

    def sy(g):
        return height - pad - (g - g_lo) / (g_hi - g_lo) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
             'stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" '
             'font-size="12">train accuracy</text>',
             f'<text x="12" y="{height / 2}" font-size="12" '
             f'transform="rotate(-90 12 {height / 2})">generalization gap</text>']
    for r in pts:
        parts.append(f'<circle cx="{sx(r["train_accuracy"]):.2f}" cy="{sy(r["gap"]):.2f}" '
                     f'r="2.5" fill="{color[r[color_by]]}" fill-opacity="0.6"/>')
    for i, v in enumerate(values):
        parts.append(f'<text x="{width - pad - 90}" y="{pad + 14 * i}" font-size="11" '
                     f'fill="{color[v]}">{color_by}={v}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def annotate_manifest(run_dir: str | Path, key: str, value) -> dict:
    """Merge one entry into an existing run manifest."""
    manifest = read_manifest(run_dir)
    manifest[key] = value
    write_manifest(run_dir, manifest)
    return manifest


HEADLINE_CELL = ("per_dataset", "same_dist", "linear")
HEADLINE_MIN_R2 = 0.5


def headline_check(reports: Sequence[evalkit.EvalReport]) -> dict:
    """Pooled and per-fold R^2 of the linear per-dataset same-dist cell,
    plus whether the neural families match or beat it on that cell."""
    by_cell = {(r.scope, r.regime, r.family): r for r in reports}
    lin = by_cell[HEADLINE_CELL]
    fold_r2 = [f["r2"] for f in lin.per_fold]
    ok = (lin.r2 is not None and lin.r2 > HEADLINE_MIN_R2
          and bool(fold_r2) and all(r is not None and r > 0 for r in fold_r2))
    ordering = {}
    for fam in ("dnn", "rnn"):
        r = by_cell.get((*HEADLINE_CELL[:2], fam))
        if r is not None and r.r2 is not None and lin.r2 is not None:
            ordering[fam] = {"r2": r.r2, "status": "pass" if r.r2 >= lin.r2 else "warn"}
    return {"cell": list(HEADLINE_CELL), "label_mode": lin.label_mode, "pooled_r2": lin.r2,
            "fold_r2": fold_r2, "passed": ok, "family_ordering": ordering}
