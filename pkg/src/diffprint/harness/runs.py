"""Experiment orchestration: zoo, fingerprint sets, verification matrix, attacks, ablation, sweeps.

Every output document carries the config hash and the seeds it used. Files
are written in a fixed order keyed by model name and record index.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..attacks import AttackSpec, UnsupportedAttackError
from ..diffusion import GMMDenoiser, sample, sample_stochastic, train_mlp_denoiser
from ..fingerprint import FingerprintRecord, OptimConfig, synthesize, synthesize_random_baseline
from ..io import save_model, save_record, write_json
from ..verify import BlackBox, CrossMatrix, black_box, cross_matrix, verify
from ..watermark import decode_hard, embed, make_anchor, make_key, random_message, str_to_bits
from .config import ExperimentConfig, ModelSpec, derive_seed

log = logging.getLogger("diffprint")

WORKERS_ENV = "DIFFPRINT_WORKERS"
VARIANTS = ("ours", "baseline", "ablation")


def worker_count() -> int:
    """Worker cap from DIFFPRINT_WORKERS (default 1)."""
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, min(n, os.cpu_count() or 1))


def parallel_map(fn, items: list) -> list:
    """Ordered map; a process pool when more than one worker is allowed."""
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def open_log(out: Path) -> None:
    """Timestamps go to a sidecar log only, never into result files."""
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)


def close_log() -> None:
    for h in list(log.handlers):
        h.close()
        log.removeHandler(h)


# ---- zoo -------------------------------------------------------------------------------------------

def mixture(spec: ModelSpec, D: int, seed: int) -> GMMDenoiser:
    """Equal-weight mixture: means offset * u + spread * N(0, I), u ~ N(0, I) shared by the components."""
    rng = np.random.default_rng(seed)
    center = spec.offset * rng.standard_normal(D)
    means = center + spec.spread * rng.standard_normal((spec.components, D))
    return GMMDenoiser(np.full(spec.components, 1.0 / spec.components), means, spec.sigma2)


def build_model(cfg: ExperimentConfig, index: int):
    spec = cfg.zoo[index]
    seed = cfg.model_seed(index)
    gmm = mixture(spec, cfg.D, seed).with_schedule(cfg.T)
    prov = {"name": spec.name, "seed": seed, "config_hash": cfg.hash, "zoo_index": index}
    if spec.kind == "gmm":
        return gmm.with_params(gmm.params(), prov)
    train_seed = derive_seed(seed, "train")
    model = train_mlp_denoiser(gmm, train_seed, spec.train_steps, spec.train_lr, spec.hidden, spec.depth,
                               batch=spec.train_batch)
    return model.with_params(model.params(), {**model.provenance, **prov})


def build_zoo(cfg: ExperimentConfig) -> list:
    return parallel_map(_build_model_job, [(cfg, i) for i in range(len(cfg.zoo))])


def _build_model_job(args):
    return build_model(*args)


# ---- fingerprints ----------------------------------------------------------------------------------

def variant_config(cfg: ExperimentConfig, variant: str) -> OptimConfig:
    if variant == "ablation":
        return replace(cfg.optim, lambda_rec=0.0, lambda_reg=0.0)
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    return cfg.optim


def make_record_anchor(cfg: ExperimentConfig, model_index: int, record_index: int, key):
    rng = np.random.default_rng(cfg.record_seed(model_index, record_index))
    carrier = rng.standard_normal(cfg.D)
    return make_anchor(carrier, random_message(key.k, rng), key)


def fingerprint(cfg: ExperimentConfig, model, model_index: int, record_index: int, variant: str = "ours",
                key=None) -> FingerprintRecord:
    key = key or make_key(cfg.key_seed(), cfg.key.k, cfg.D, cfg.key.beta, cfg.key.kappa)
    anchor = make_record_anchor(cfg, model_index, record_index, key)
    optim = replace(variant_config(cfg, variant), seed=derive_seed(cfg.record_seed(model_index, record_index), "optim"))
    synth = synthesize_random_baseline if variant == "baseline" else synthesize
    rec = synth(model, anchor, optim)
    rec.record_id = f"{cfg.zoo[model_index].name}/{variant}/r{record_index:03d}"
    rec.meta = {"config_hash": cfg.hash, "master_seed": cfg.master_seed, "variant": variant,
                "record_seed": cfg.record_seed(model_index, record_index), "key_seed": cfg.key_seed()}
    return rec


def _fingerprint_job(args):
    return fingerprint(*args)


def record_set(cfg: ExperimentConfig, model, model_index: int, variant: str = "ours") -> list:
    jobs = [(cfg, model, model_index, r, variant) for r in range(cfg.records)]
    return parallel_map(_fingerprint_job, jobs)


def all_record_sets(cfg: ExperimentConfig, models: list, variant: str) -> list:
    jobs = [(cfg, m, i, r, variant) for i, m in enumerate(models) for r in range(cfg.records)]
    recs = parallel_map(_fingerprint_job, jobs)
    return [recs[i * cfg.records:(i + 1) * cfg.records] for i in range(len(models))]


# ---- outputs ---------------------------------------------------------------------------------------

def _header(cfg: ExperimentConfig, kind: str) -> dict:
    return {"kind": kind, "config_hash": cfg.hash, "master_seed": cfg.master_seed, "key_seed": cfg.key_seed(),
            "model_seeds": {s.name: cfg.model_seed(i) for i, s in enumerate(cfg.zoo)}}


def write_zoo(out: Path, cfg: ExperimentConfig, models: list) -> None:
    for spec, m in zip(cfg.zoo, models):
        save_model(out / "models" / f"{spec.name}.json", m)


def write_records(out: Path, cfg: ExperimentConfig, record_sets: list) -> None:
    for spec, recs in zip(cfg.zoo, record_sets):
        for r, rec in enumerate(recs):
            save_record(out / "records" / spec.name / rec.meta["variant"] / f"r{r:03d}.json", rec)


def matrix_summary(matrix: CrossMatrix, alpha: float) -> dict:
    ba, p = matrix.ba(), matrix.p()
    n = len(matrix.model_ids)
    off = ~np.eye(n, dtype=bool)
    diag_ok = [bool(p[i, i] < alpha) for i in range(n)]
    off_ok = [bool(0.40 <= ba[i, j] <= 0.65 and p[i, j] > alpha) for i in range(n) for j in range(n) if i != j]
    return {
        "diagonal_mean_ba": float(np.mean(np.diag(ba))),
        "diagonal_min_ba": float(np.min(np.diag(ba))),
        "off_diagonal_mean_ba": float(np.mean(ba[off])) if n > 1 else None,
        "diagonal_infringing": diag_ok,
        "off_diagonal_not_proven_fraction": float(np.mean([c == "not-proven" for i, row in enumerate(matrix.cells)
                                                            for j, c in enumerate(v.verdict for v in row) if i != j]))
        if n > 1 else None,
        "off_diagonal_in_band_fraction": float(np.mean(off_ok)) if n > 1 else None,
    }


def write_matrix(out: Path, cfg: ExperimentConfig, names: list, matrix: CrossMatrix, variant: str) -> dict:
    doc = _header(cfg, "matrix")
    doc.update({"variant": variant, "names": names, "matrix": matrix.to_dict(),
                "summary": matrix_summary(matrix, cfg.alpha)})
    write_json(out / f"matrix_{variant}.json", doc)
    (out / f"matrix_{variant}.csv").write_text(matrix.to_csv())
    return doc


# ---- experiments -----------------------------------------------------------------------------------

class Run:
    """Shared state for one output directory: the zoo is built once and reused."""

    def __init__(self, cfg: ExperimentConfig, out: str | Path | None = None):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.output_dir)
        self._models = None
        self._records: dict[str, list] = {}

    @property
    def names(self) -> list:
        return [s.name for s in self.cfg.zoo]

    def models(self) -> list:
        if self._models is None:
            t0 = time.time()
            self._models = build_zoo(self.cfg)
            log.info("built zoo of %d models in %.1fs", len(self._models), time.time() - t0)
            write_zoo(self.out, self.cfg, self._models)
        return self._models

    def records(self, variant: str = "ours") -> list:
        if variant not in self._records:
            t0 = time.time()
            self._records[variant] = all_record_sets(self.cfg, self.models(), variant)
            log.info("synthesized %s fingerprints in %.1fs", variant, time.time() - t0)
            write_records(self.out, self.cfg, self._records[variant])
        return self._records[variant]

    def matrix(self, variant: str = "ours") -> dict:
        m = cross_matrix(self.models(), self.records(variant), self.cfg.alpha, self.cfg.two_sided)
        return write_matrix(self.out, self.cfg, self.names, m, variant)

    def ablate(self) -> dict:
        full = self.matrix("ours")["summary"]
        ablated = self.matrix("ablation")["summary"]
        doc = _header(self.cfg, "ablation")
        doc["rows"] = [{"variant": "ours", "lambda_rec": self.cfg.optim.lambda_rec,
                        "lambda_reg": self.cfg.optim.lambda_reg, **full},
                       {"variant": "ablation", "lambda_rec": 0.0, "lambda_reg": 0.0, **ablated}]
        doc["off_diagonal_increase"] = ablated["off_diagonal_mean_ba"] - full["off_diagonal_mean_ba"]
        write_json(self.out / "ablation.json", doc)
        return doc

    def attacks(self) -> dict:
        """Target BA of each model's own fingerprints on each attacked copy."""
        models, recs = self.models(), self.records("ours")
        rows = []
        for a_idx, spec in enumerate(self.cfg.attacks):
            for m_idx, (name, model) in enumerate(zip(self.names, models)):
                seeded = AttackSpec(spec.kind, spec.params, self.cfg.attack_seed(a_idx, m_idx))
                try:
                    attacked = seeded.apply(model)
                except UnsupportedAttackError as e:
                    rows.append({"attack": spec.label, "model": name, "kind": model.kind, "skipped": str(e)})
                    continue
                save_model(self.out / "attacked" / f"{name}__{spec.label}.json", attacked)
                rep = verify(black_box(attacked), recs[m_idx], self.cfg.alpha, self.cfg.two_sided)
                rows.append({"attack": spec.label, "model": name, "kind": model.kind,
                             "attacked_model_id": attacked.model_id, "seed": seeded.seed, "report": rep.to_dict()})
        doc = _header(self.cfg, "robustness")
        doc["rows"] = rows
        write_json(self.out / "robustness.json", doc)
        return doc

    def sweep_steps(self, grids=(10, 25, 50), schedule_T: int = 50) -> dict:
        """Verify T-step fingerprints on a finer schedule, subsampled to each grid.

        The cosine schedule depends on t/T only, so the 25-step grid of the
        T=50 schedule reproduces the T=25 schedule exactly.
        """
        models, recs = self.models(), self.records("ours")
        rows = []
        for name, model, rs in zip(self.names, models, recs):
            fine = model.with_schedule(schedule_T)
            for n in grids:
                steps = fine.schedule.grid(n)
                rep = verify(black_box(fine, steps), rs, self.cfg.alpha, self.cfg.two_sided)
                rows.append({"model": name, "steps": n, "grid": steps, "report": rep.to_dict()})
        doc = _header(self.cfg, "sweep_steps")
        doc.update({"schedule_T": schedule_T, "rows": rows})
        write_json(self.out / "sweep_steps.json", doc)
        return doc

    def sweep_payload(self, ks=None, records: int = 3) -> dict:
        """Codec round trip for each payload length k, and target BA of a few fingerprints per k."""
        cfg = self.cfg
        ks = list(ks) if ks is not None else list(range(8, cfg.D + 1))
        models = self.models()
        rows = []
        for k in ks:
            key = make_key(cfg.key_seed(), k, cfg.D, cfg.key.beta, cfg.key.kappa)
            rng = np.random.default_rng(derive_seed(cfg.master_seed, "payload", k))
            exact = sum(int(np.array_equal(decode_hard(embed(rng.standard_normal(cfg.D), m, key), key), m))
                        for m in (random_message(k, rng) for _ in range(100)))
            bas = []
            for r in range(records):
                rec = fingerprint(cfg, models[0], 0, r, "ours", key)
                bas.append(verify(black_box(models[0]), [rec]).mean)
            rows.append({"k": k, "codec_exact": exact, "codec_trials": 100, "target_model": self.names[0],
                         "target_ba": bas, "target_mean_ba": float(np.mean(bas))})
        doc = _header(cfg, "sweep_payload")
        doc["rows"] = rows
        write_json(self.out / "sweep_payload.json", doc)
        return doc

    def sweep_sampler(self, etas=(0.0, 0.5, 1.0)) -> dict:
        """Stochastic-sampler control: fresh seeded noise per step (eta > 0) on the target model."""
        models, recs = self.models(), self.records("ours")
        rows = []
        for m_idx, (name, model, rs) in enumerate(zip(self.names, models, recs)):
            for eta in etas:
                rng = np.random.default_rng(derive_seed(self.cfg.master_seed, "sampler", m_idx, eta))
                gen = (lambda z, model=model, rng=rng, eta=eta: sample_stochastic(model, z, rng, eta)) if eta > 0 \
                    else (lambda z, model=model: sample(model, z))
                rep = verify(BlackBox(gen, model.model_id, model.D), rs, self.cfg.alpha, self.cfg.two_sided)
                rows.append({"model": name, "eta": eta, "report": rep.to_dict()})
        doc = _header(self.cfg, "sweep_sampler")
        doc["rows"] = rows
        write_json(self.out / "sweep_sampler.json", doc)
        return doc


def message_bits(s: str) -> np.ndarray:
    return str_to_bits(s)
