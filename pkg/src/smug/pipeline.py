"""End-to-end experiment stages operating on one output directory.

Layout under the run directory::

    config.ini
    data/       {train,val,test}_{t,y}.npy, mask.json
    models/     <stage>/ per-epoch checkpoints and training CSV, plus model.ckpt
    results/    eval.csv, attack_<method>.csv, sweep_<kind>.csv, bound_check.json
    manifests/  one JSON RunManifest per command

Every CSV carries a trailing ``config_hash`` column and every checkpoint and
JSON file records it too.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import logging
import os
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .data import generate_phantoms, simulate_measurements
from .errors import ConfigError, UsageError
from .fourier import ForwardOperator, SamplingMask, make_vd_mask
from .metrics import METRICS_COLUMNS, MetricsRow
from .models import Checkpoint, init_denoiser, init_encoder, init_istanet, load_checkpoint, save_checkpoint
from .recon import METHODS, Reconstructor
from .records import read_csv, write_csv, write_json
from .robustness import EvalContext, bound_audit, evaluate, pgd_attack, sweep
from .training import finetune, pretrain, train_istanet

log = logging.getLogger(__name__)

OUT_ENV = "SMUG_OUT_ROOT"
NORMALIZATION = "image-domain: each phantom scaled to max |t| = 1 before simulating k-space"


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


# -- manifests ----------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    code_version: str = __version__
    started: str = ""
    finished: str = ""
    status: str = "incomplete"
    outputs: dict = field(default_factory=dict)  # relative path -> sha256
    notes: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"command": self.command, "config_hash": self.config_hash, "seed": self.seed,
                "code_version": self.code_version, "python": platform.python_version(),
                "numpy": np.__version__, "started": self.started, "finished": self.finished,
                "status": self.status, "outputs": self.outputs, "notes": self.notes}


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Run:
    """One experiment directory bound to a config."""

    def __init__(self, cfg: ExperimentConfig, root):
        self.cfg = cfg
        self.root = Path(root)
        self.hash = cfg.config_hash
        self._outputs: list[Path] = []

    # paths
    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    def model_dir(self, stage: str) -> Path:
        return self.root / "models" / stage

    @property
    def results_dir(self) -> Path:
        return self.root / "results"

    def record(self, path) -> Path:
        self._outputs.append(Path(path))
        return Path(path)

    @contextmanager
    def command(self, name: str, **notes):
        """Write a manifest for the enclosed work; failed runs are marked and their partial outputs removed."""
        self.root.mkdir(parents=True, exist_ok=True)
        stored = self.root / "config.ini"
        if stored.exists():
            prev = ExperimentConfig.from_ini(stored.read_text(encoding="utf-8"))
            if prev.config_hash != self.hash:
                raise ConfigError(f"{self.root} holds a run with config hash {prev.config_hash[:12]}; "
                                  f"refusing to mix with {self.hash[:12]}")
        else:
            stored.write_text(self.cfg.to_ini(), encoding="utf-8")
        man = RunManifest(name, self.hash, self.cfg.run.seed, started=_now(), notes=dict(notes))
        man.notes.setdefault("normalization", NORMALIZATION)
        self._outputs = []
        t0 = time.perf_counter()
        try:
            yield man
            man.status = "complete"
        except BaseException:
            for p in self._outputs:
                if p.is_file():
                    p.unlink()
            man.status = "failed"
            raise
        finally:
            man.finished = _now()
            man.notes["wall_seconds"] = time.perf_counter() - t0
            man.outputs = {str(p.relative_to(self.root)): _sha256(p) for p in self._outputs if p.is_file()}
            write_json(self.root / "manifests" / f"{name}.json", man.as_dict())

    def meta(self, **extra) -> dict:
        return {"config_hash": self.hash, "master_seed": self.cfg.run.seed, "normalization": NORMALIZATION, **extra}

    # -- data ---------------------------------------------------------------
    def mask(self, accel: float | None = None) -> SamplingMask:
        m = self.cfg.mask
        a = m.accel if accel is None else accel
        return make_vd_mask(self.cfg.data.size, self.cfg.data.size, a, m.center_frac, self.cfg.seed_for("mask"))

    def operator(self, accel: float | None = None) -> ForwardOperator:
        return ForwardOperator(self.mask(accel))

    def measure(self, A: ForwardOperator, t, index: int, split: str = "test"):
        return simulate_measurements(t, A, self.cfg.data.measurement_noise,
                                     self.cfg.seed_for(f"measure/{split}"), index)

    def gen_data(self) -> None:
        d = self.cfg.data
        spec = self.cfg.phantom_spec()
        A = self.operator()
        self.data_dir.mkdir(parents=True, exist_ok=True)
        start = 0
        for split, n in (("train", d.n_train), ("val", d.n_val), ("test", d.n_test)):
            if n == 0:
                continue
            ts = generate_phantoms(spec, n, start)
            start += n
            ys = np.stack([self.measure(A, t, i, split) for i, t in enumerate(ts)])
            np.save(self.record(self.data_dir / f"{split}_t.npy"), ts)
            np.save(self.record(self.data_dir / f"{split}_y.npy"), ys)
        write_json(self.record(self.data_dir / "mask.json"), {"config_hash": self.hash, **A.mask.to_dict()})

    def load_split(self, split: str):
        pt, py = self.data_dir / f"{split}_t.npy", self.data_dir / f"{split}_y.npy"
        if not pt.exists():
            raise ConfigError(f"missing {split} data in {self.data_dir}; run gen-data first")
        return np.load(pt), np.load(py)

    # -- training -------------------------------------------------------------
    def _final(self, stage: str) -> Path:
        return self.model_dir(stage) / "model.ckpt"

    def _save_final(self, stage: str, ckpt: Checkpoint) -> Path:
        p = self.record(self._final(stage))
        save_checkpoint(p, ckpt)
        return p

    def _track_stage(self, stage: str) -> None:
        for p in sorted(self.model_dir(stage).glob("*")):
            if p.name != "model.ckpt":
                self.record(p)

    def pretrain(self, kind: str = "smooth") -> Path:
        """``smooth`` pre-trains at the smoothing sigma; ``plain`` fits a noise-free auto-encoder (vanilla baseline)."""
        if kind not in ("smooth", "plain"):
            raise ConfigError(f"unknown pretrain kind {kind!r}")
        stage = f"pretrain_{kind}"
        ts, _ = self.load_split("train")
        tc = self.cfg.train_config(stage, None if kind == "smooth" else 0.0)
        theta = init_denoiser(self.cfg.denoiser_spec(), self.cfg.seed_for("init/denoiser"))
        net, _ = pretrain(list(ts), tc, theta, self.model_dir(stage), "train", self.cfg.run.record_timing,
                          self.meta(stage=stage))
        self._track_stage(stage)
        return self._save_final(stage, Checkpoint(net, meta=self.meta(stage=stage)))

    def _require(self, stage: str, build):
        p = self._final(stage)
        if not p.exists():
            build()
        return load_checkpoint(p)

    def finetune(self, mode: str) -> Path:
        """Train one method: ``modl``, ``rs_e2e``, ``smug``, ``wsmug`` or an ISTA-Net variant."""
        if mode not in METHODS:
            raise ConfigError(f"unknown method {mode!r}; choose from {METHODS}")
        ts, ys = self.load_split("train")
        pairs = list(zip(ys, ts))
        A = self.operator()
        stage = f"finetune_{mode}"
        tc = self.cfg.train_config(stage)
        out = self.model_dir(stage)
        meta = self.meta(stage=stage, mask=A.mask.to_dict())
        rt = self.cfg.run.record_timing
        if mode.startswith("istanet"):
            ista_mode = {"istanet": "vanilla", "istanet_smug": "smug", "istanet_wsmug": "wsmug"}[mode]
            net = init_istanet(self.cfg.ista_spec(), self.cfg.seed_for("init/istanet"))
            enc = init_encoder(self.cfg.encoder_spec(), self.cfg.seed_for("init/encoder")) if ista_mode == "wsmug" else None
            res = train_istanet(pairs, net, A, self.cfg.unroll, tc, ista_mode, enc, out, "train", rt, meta)
            ckpt = Checkpoint(None, res.encoder, res.istanet, meta)
        else:
            pre = "pretrain_plain" if mode in ("modl", "rs_e2e") else "pretrain_smooth"
            base = self._require(pre, lambda: self.pretrain(pre.split("_")[1])).denoiser
            enc = init_encoder(self.cfg.encoder_spec(), self.cfg.seed_for("init/encoder")) if mode == "wsmug" else None
            res = finetune(pairs, base, A, self.cfg.unroll, tc, mode, enc, None, out, "train", rt, meta)
            ckpt = Checkpoint(res.denoiser, res.encoder, meta=meta)
        self._track_stage(stage)
        return self._save_final(stage, ckpt)

    def reconstructor(self, method: str, train_missing: bool = False) -> Reconstructor:
        p = self._final(f"finetune_{method}")
        if not p.exists():
            if not train_missing:
                raise ConfigError(f"missing checkpoint for {method}: {p}")
            self.finetune(method)
        ck = load_checkpoint(p)
        return Reconstructor(method, self.operator(), self.cfg.unroll, self.cfg.smoothing_config(),
                             ck.denoiser, ck.encoder, ck.istanet)

    # -- evaluation -------------------------------------------------------------
    def eval_context(self, n_items: int | None = None) -> EvalContext:
        ts, ys = self.load_split("test")
        n = len(ts) if n_items is None else min(n_items, len(ts))
        return EvalContext(list(ys[:n]), list(ts[:n]), self.cfg.attack_config(), self.cfg.eval.noise_scale,
                           self.cfg.seed_for("eval_noise"), lambda A, t, i: self.measure(A, t, i),
                           self.cfg.seed_for("mask"), self.cfg.mask.center_frac,
                           record_timing=self.cfg.run.record_timing)

    def _write_rows(self, name: str, rows: list[MetricsRow]) -> Path:
        out = []
        for r in rows:
            d = r.as_dict()
            d["config_hash"] = self.hash
            out.append(d)
        return self.record(write_csv(self.results_dir / name, METRICS_COLUMNS + ("config_hash",), out))

    def evaluate(self, methods=None, n_items=None) -> Path:
        methods = tuple(methods or self.cfg.eval.methods)
        ctx = self.eval_context(n_items)
        rows = [evaluate(self.reconstructor(m), ctx)[0] for m in methods]
        return self._write_rows("eval.csv", rows)

    def attack(self, method: str, n_items=None) -> Path:
        ctx = self.eval_context(n_items)
        r = self.reconstructor(method)
        rows, deltas = [], []
        for i, (y, t) in enumerate(zip(ctx.ys, ctx.ts)):
            res = pgd_attack(r, r.A, y, t, ctx.ac)
            deltas.append(res.delta)
            rows.append({"item": i, "epsilon": res.epsilon, "objective": res.objective,
                         "clean_objective": res.history[0], "steps": ctx.ac.steps,
                         "step_rule": f"{ctx.ac.step_factor}*eps/steps", "config_hash": self.hash})
        np.save(self.record(self.results_dir / f"attack_{method}_deltas.npy"), np.stack(deltas))
        cols = ("item", "epsilon", "objective", "clean_objective", "steps", "step_rule", "config_hash")
        return self.record(write_csv(self.results_dir / f"attack_{method}.csv", cols, rows))

    def sweep(self, kind: str, grid, methods=None, n_items=None) -> Path:
        methods = tuple(methods or self.cfg.eval.methods)
        ctx = self.eval_context(n_items)
        recons = {m: self.reconstructor(m) for m in methods}
        if kind == "sigma":
            # one perturbation per item, found against SMUG at its training sigma
            ref = recons.get("smug") or self.reconstructor("smug")
            ctx = replace(ctx, fixed_deltas=[pgd_attack(ref, ref.A, y, t, ctx.ac).delta
                                             for y, t in zip(ctx.ys, ctx.ts)])
        rows = sweep(kind, grid, recons, ctx)
        return self._write_rows(f"sweep_{kind}.csv", rows)

    def bound_check(self, n_items: int = 2, n_random: int = 100) -> Path:
        ctx = self.eval_context(n_items)
        reports = bound_audit(self.reconstructor("smug"), ctx.ys, ctx.ts, ctx.ac, n_random)
        out = {"config_hash": self.hash, "holds": all(r.holds for r in reports),
               "reports": [r.as_dict() for r in reports]}
        return self.record(write_json(self.results_dir / "bound_check.json", out))


# -- report -------------------------------------------------------------------

def report(root, out=None, allow_mixed: bool = False) -> Path:
    """Collect every metrics CSV under ``root`` into one long-format table."""
    root = Path(root)
    files = sorted(p for p in root.rglob("*.csv")
                   if p.name.startswith(("eval", "sweep_")) and p.parent.name == "results") if root.exists() else []
    if not files:
        raise UsageError(f"no inputs: no eval or sweep CSVs under {root}")
    rows, hashes = [], set()
    for f in files:
        for r in read_csv(f):
            hashes.add(r.get("config_hash", ""))
            for col in ("clean_psnr", "clean_ssim", "noise_psnr", "noise_ssim", "robust_psnr", "robust_ssim",
                        "rob_error_mean"):
                rows.append({"source": str(f.relative_to(root)), "method": r["method"], "kind": r["kind"],
                             "grid_value": r["grid_value"], "metric": col, "value": r[col],
                             "config_hash": r.get("config_hash", "")})
    if len(hashes) > 1 and not allow_mixed:
        raise UsageError(f"inputs come from {len(hashes)} different configs; pass --allow-mixed to combine them")
    target = Path(out) if out is not None else root / "report.csv"
    return write_csv(target, ("source", "method", "kind", "grid_value", "metric", "value", "config_hash"), rows)
